// Pretrain briefly, then fine-tune for segmentation from the pretrained
// weights and from scratch, and score both on held-out cases.

use petmae::harmonize::{harmonize_case, HarmonizeOptions};
use petmae::infer::evaluate_case;
use petmae::phantom::{generate_phantoms, PhantomConfig};
use petmae::trainer::{finetune, pretrain, validation_split, TrainConfig};
use petmae::volume::Volume;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        shape: [24, 40, 40],
        ..PhantomConfig::default()
    };
    let (images, labels): (Vec<Volume>, Vec<Volume>) = generate_phantoms(&cfg, 31, 10)?
        .iter()
        .map(|p| {
            let h = harmonize_case(&p.ct, &p.pet, Some(&p.label), &HarmonizeOptions::default()).unwrap();
            (h.image, h.label.unwrap())
        })
        .unzip();
    let (train, val) = validation_split(images.len(), 0);
    let pick = |idx: &[usize], v: &[Volume]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let (ti, tl) = (pick(&train, &images), pick(&train, &labels));

    let crop = [12, 16, 16];
    let pre = TrainConfig {
        epochs: 1_000,
        lr0: 1e-3,
        max_steps: Some(20),
        crop_shape: crop,
        patch_shape: [4, 4, 4],
        ..TrainConfig::pretrain()
    };
    let mae = pretrain(&ti, &pre)?.checkpoint;

    let ft = TrainConfig {
        epochs: 1_000,
        lr0: 1e-3,
        max_steps: Some(30),
        crop_shape: crop,
        ..TrainConfig::finetune()
    };
    for (name, init) in [("scratch", None), ("mae", Some(&mae))] {
        for fraction in [0.5, 1.0] {
            let out = finetune(&ti, &tl, &ft, init, fraction)?;
            let net = out.checkpoint.network()?;
            let dice: f64 = val
                .iter()
                .map(|&i| evaluate_case(&net, &images[i], &labels[i], crop, 0.5).map(|s| s.dice))
                .sum::<Result<f64, _>>()?
                / val.len() as f64;
            println!(
                "{name:8} fraction {fraction}: {} training cases, final loss {:.4}, validation dice {dice:.3}",
                out.checkpoint.meta.training_cases.len(),
                out.curve.last().map_or(f64::NAN, |r| r.loss)
            );
        }
    }
    Ok(())
}
