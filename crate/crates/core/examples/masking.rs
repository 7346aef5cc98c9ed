// Patch grid, independent CT/PET masks and the two imputation modes.

use petmae::masking::{expand_mask, impute_token, impute_zero, make_grid, sample_mask};
use petmae::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = make_grid([24, 32, 32], [6, 8, 8])?;
    let mask = sample_mask(&grid, 0.5, 42)?;
    println!("{} patches, masked CT {} PET {}", grid.len(), mask.count(0), mask.count(1));
    let both = (0..grid.len()).filter(|&i| mask.bits[0][i] && mask.bits[1][i]).count();
    println!("hidden in both channels: {both}");

    let row = |bits: &[bool]| bits[..16].iter().map(|&b| if b { '#' } else { '.' }).collect::<String>();
    println!("CT  {}", row(&mask.bits[0]));
    println!("PET {}", row(&mask.bits[1]));

    let m = expand_mask(&mask, &grid)?;
    let x = Tensor::full(&[1, 2, 24, 32, 32], 1.5);
    let zero = impute_zero(&x, &m)?;
    let token = impute_token(&x, &m, &[-0.7, 0.3])?;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
    println!("mean after zero imputation {:.4}, after token imputation {:.4}", mean(&zero), mean(&token));
    Ok(())
}
