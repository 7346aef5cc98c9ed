// Masked-autoencoder pretraining on a handful of small phantoms.

use petmae::harmonize::{harmonize_case, HarmonizeOptions};
use petmae::phantom::{generate_phantoms, PhantomConfig};
use petmae::trainer::{pretrain, smoothed, Imputation, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        shape: [24, 40, 40],
        ..PhantomConfig::default()
    };
    let corpus = generate_phantoms(&cfg, 21, 6)?
        .iter()
        .map(|p| harmonize_case(&p.ct, &p.pet, None, &HarmonizeOptions::default()).map(|h| h.image))
        .collect::<Result<Vec<_>, _>>()?;

    for imputation in [Imputation::Zero, Imputation::Token] {
        let train = TrainConfig {
            epochs: 1_000,
            lr0: 1e-3,
            max_steps: Some(30),
            crop_shape: [12, 16, 16],
            patch_shape: [4, 4, 4],
            imputation,
            ..TrainConfig::pretrain()
        };
        let out = pretrain(&corpus, &train)?;
        let losses: Vec<f64> = out.curve.iter().map(|r| r.loss).collect();
        let s = smoothed(&losses, 5);
        println!(
            "{imputation:?}: {} steps, smoothed loss {:.4} -> {:.4}, final lr {:.2e}",
            losses.len(),
            s[4],
            s[s.len() - 1],
            out.curve.last().map_or(0.0, |r| r.lr)
        );
        if let Some(t) = out.checkpoint.mask_token() {
            println!("  learned mask tokens {:.4?}", t.data());
        }
    }
    Ok(())
}
