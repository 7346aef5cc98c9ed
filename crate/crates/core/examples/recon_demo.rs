// Reconstruct masked CT and PET with a briefly pretrained model and write
// masked | reconstruction | original slices as PGM images.

use petmae::cli::{encode_pgm, triptych};
use petmae::harmonize::{harmonize_case, HarmonizeOptions};
use petmae::masking::{expand_mask, impute_zero, make_grid, sample_mask};
use petmae::phantom::{generate_phantoms, PhantomConfig};
use petmae::rng::{seeded, stream};
use petmae::tensor::Tensor;
use petmae::trainer::{masked_reconstruction, pretrain, TrainConfig};
use petmae::volume::random_crop;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        shape: [24, 40, 40],
        ..PhantomConfig::default()
    };
    let corpus = generate_phantoms(&cfg, 51, 4)?
        .iter()
        .map(|p| harmonize_case(&p.ct, &p.pet, None, &HarmonizeOptions::default()).map(|h| h.image))
        .collect::<Result<Vec<_>, _>>()?;
    let crop = [12, 16, 16];
    let train = TrainConfig {
        epochs: 1_000,
        lr0: 1e-3,
        max_steps: Some(30),
        crop_shape: crop,
        patch_shape: [4, 4, 4],
        ..TrainConfig::pretrain()
    };
    let net = pretrain(&corpus, &train)?.checkpoint.network()?;

    let x = Tensor::from_volume(&random_crop(&corpus[0], crop, &mut seeded(3, stream::CROP))?);
    let grid = make_grid(crop, [4, 4, 4])?;
    let m = expand_mask(&sample_mask(&grid, 0.5, 3)?, &grid)?;
    let r = masked_reconstruction(&net, &x, &m)?;
    println!("masked-voxel MSE {:.4} vs zero prediction {:.4}", r.model_mse, r.zero_mse);

    let masked = impute_zero(&x, &m)?;
    let y = net.forward(&masked)?;
    let dir = tempfile::tempdir()?;
    let v: usize = crop.iter().product();
    for (c, name) in [(0, "ct"), (1, "pet")] {
        let s = c * v..(c + 1) * v;
        let (w, h, px) = triptych(&[&masked.data()[s.clone()], &y.data()[s.clone()], &x.data()[s]], crop);
        let path = dir.path().join(format!("{name}.pgm"));
        std::fs::write(&path, encode_pgm(w, h, &px))?;
        println!("{name}: {w}x{h} triptych, {} bytes", std::fs::metadata(&path)?.len());
    }
    Ok(())
}
