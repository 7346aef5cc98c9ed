// K-shot linear probing: only the output projection is trained.

use petmae::autonet::UNet;
use petmae::harmonize::{harmonize_case, HarmonizeOptions};
use petmae::phantom::{generate_phantoms, PhantomConfig};
use petmae::trainer::{linear_probe, pretrain, TrainConfig};
use petmae::volume::Volume;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        shape: [24, 40, 40],
        ..PhantomConfig::default()
    };
    let (images, labels): (Vec<Volume>, Vec<Volume>) = generate_phantoms(&cfg, 41, 6)?
        .iter()
        .map(|p| {
            let h = harmonize_case(&p.ct, &p.pet, Some(&p.label), &HarmonizeOptions::default()).unwrap();
            (h.image, h.label.unwrap())
        })
        .unzip();
    let crop = [12, 16, 16];
    let pre = TrainConfig {
        epochs: 1_000,
        lr0: 1e-3,
        max_steps: Some(20),
        crop_shape: crop,
        patch_shape: [4, 4, 4],
        ..TrainConfig::pretrain()
    };
    let init = pretrain(&images, &pre)?.checkpoint;

    let probe = TrainConfig {
        epochs: 1_000,
        max_steps: Some(400),
        crop_shape: crop,
        ..TrainConfig::probe()
    };
    let out = linear_probe(&images, &labels, &probe, 5, Some(&init))?;
    println!("probe on cases {:?}", out.checkpoint.meta.training_cases);
    println!(
        "loss {:.4} -> {:.4}",
        out.curve.first().map_or(f64::NAN, |r| r.loss),
        out.curve.last().map_or(f64::NAN, |r| r.loss)
    );
    for (name, t) in out.checkpoint.params.iter() {
        let same = init.params.get(name).is_some_and(|b| b == t);
        println!("  {name:14} {}", if UNet::is_head(name) { "trained" } else if same { "frozen" } else { "CHANGED" });
    }
    Ok(())
}
