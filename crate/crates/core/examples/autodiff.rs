// Build the default network, take one reconstruction-loss gradient and
// compare it with central finite differences.

use petmae::autonet::{build_unet, grad_check, Graph, UNetConfig};
use petmae::masking::{expand_mask, impute_zero, make_grid, sample_mask};
use petmae::rng::seeded;
use petmae::tensor::Tensor;
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = build_unet(&UNetConfig::default())?;
    println!("{} tensors, {} parameters", net.params().len(), net.params().count());
    for (name, shape) in net.manifest() {
        println!("  {name:14} {shape:?}");
    }

    let mut rng = seeded(1, 0);
    let x = Tensor::new(vec![1, 2, 8, 8, 8], (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let grid = make_grid([8, 8, 8], [4, 4, 4])?;
    let m = expand_mask(&sample_mask(&grid, 0.5, 2)?, &grid)?;
    let masked = impute_zero(&x, &m)?;

    let mut g = Graph::new();
    let pv = net.params().bind(&mut g, |_| true);
    let xv = g.constant(masked.clone());
    let y = net.forward_graph(&mut g, &pv, xv)?;
    let (loss, terms) = g.recon_loss(y, &x, &m, 0.2, 1e-8)?;
    let grads = g.backward(loss)?;
    println!("loss {:.5} (masked {:.5}, visible {:.5})", terms.total, terms.masked_term, terms.visible_term);
    println!("|d loss / d stem.w| = {:.5}", grads.get(pv[0]).data().iter().map(|v| v * v).sum::<f64>().sqrt());

    let report = grad_check(
        net.params(),
        |g, pv| {
            let xv = g.constant(masked.clone());
            let y = net.forward_graph(g, pv, xv)?;
            Ok(g.recon_loss(y, &x, &m, 0.2, 1e-8)?.0)
        },
        20,
        1e-5,
        1e-4,
        3,
    )?;
    println!("finite differences: max relative error {:.2e}, pass {}", report.max_rel_error, report.pass);
    Ok(())
}
