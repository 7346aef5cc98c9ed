//! Patch-level masking of dual-channel crops.
//!
//! A crop is tiled by non-overlapping patches. CT and PET receive independent
//! patch masks, each hiding exactly `round(ratio * P)` patches. Hidden voxels
//! are filled with zero, which is the channel mean after z-score
//! normalization; the learnable-token fill is kept as an ablation.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::tensor::Tensor;

pub const DEFAULT_MASK_RATIO: f64 = 0.5;

/// Non-overlapping patch tiling of a crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub crop_shape: [usize; 3],
    pub patch_shape: [usize; 3],
    pub counts: [usize; 3],
}

impl PatchGrid {
    /// Number of patches `P`.
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_shape.iter().product()
    }

    /// Grid coordinates of linear patch index `i` (x fastest).
    pub fn patch_coords(&self, i: usize) -> [usize; 3] {
        let [_, ny, nx] = self.counts;
        [i / (ny * nx), (i / nx) % ny, i % nx]
    }
}

pub fn make_grid(crop_shape: [usize; 3], patch_shape: [usize; 3]) -> Result<PatchGrid> {
    if crop_shape.contains(&0) || patch_shape.contains(&0) {
        return Err(Error::BadShape(format!("crop {crop_shape:?} / patch {patch_shape:?}")));
    }
    if (0..3).any(|a| !crop_shape[a].is_multiple_of(patch_shape[a])) {
        return Err(Error::NonDivisible {
            crop: crop_shape,
            patch: patch_shape,
        });
    }
    Ok(PatchGrid {
        crop_shape,
        patch_shape,
        counts: [0, 1, 2].map(|a| crop_shape[a] / patch_shape[a]),
    })
}

/// Per-channel patch masks, `true` = hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    /// `[CT, PET]` bit arrays of length `P`.
    pub bits: [Vec<bool>; 2],
    /// Masking ratio per channel.
    pub ratios: [f64; 2],
    pub seed: u64,
}

impl PatchMask {
    pub fn count(&self, channel: usize) -> usize {
        self.bits[channel].iter().filter(|&&b| b).count()
    }
}

fn masked_count(ratio: f64, p: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::BadConfig(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(((ratio * p as f64).round() as usize).min(p))
}

/// Samples independent CT and PET masks with the same ratio.
pub fn sample_mask(grid: &PatchGrid, ratio: f64, seed: u64) -> Result<PatchMask> {
    sample_mask_per_channel(grid, [ratio, ratio], seed)
}

/// Samples CT and PET masks with their own ratios from disjoint sub-streams
/// of `seed`. A ratio of 0 leaves that channel fully visible.
pub fn sample_mask_per_channel(grid: &PatchGrid, ratios: [f64; 2], seed: u64) -> Result<PatchMask> {
    let p = grid.len();
    let draw = |ratio: f64, stream_id: u64| -> Result<Vec<bool>> {
        let k = masked_count(ratio, p)?;
        let mut rng = seeded(seed, stream_id);
        let mut bits = vec![false; p];
        for i in index::sample(&mut rng, p, k) {
            bits[i] = true;
        }
        Ok(bits)
    };
    Ok(PatchMask {
        bits: [draw(ratios[0], stream::MASK_CT)?, draw(ratios[1], stream::MASK_PET)?],
        ratios,
        seed,
    })
}

/// Voxel-level mask `M` of shape `[1, 2, Z, Y, X]` with 1 on hidden voxels.
pub fn expand_mask(mask: &PatchMask, grid: &PatchGrid) -> Result<Tensor> {
    let p = grid.len();
    if mask.bits.iter().any(|b| b.len() != p) {
        return Err(Error::ShapeMismatch(format!("mask of {} patches for grid of {p}", mask.bits[0].len())));
    }
    let [z, y, x] = grid.crop_shape;
    let [pz, py, px] = grid.patch_shape;
    let mut m = Tensor::zeros(&[1, 2, z, y, x]);
    let data = m.data_mut();
    for (c, bits) in mask.bits.iter().enumerate() {
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let [gz, gy, gx] = grid.patch_coords(i);
            for dz in 0..pz {
                for dy in 0..py {
                    let row = ((c * z + gz * pz + dz) * y + gy * py + dy) * x + gx * px;
                    data[row..row + px].iter_mut().for_each(|v| *v = 1.0);
                }
            }
        }
    }
    Ok(m)
}

/// Zero-mean imputation: `x * (1 - M)`.
pub fn impute_zero(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    x.same_shape(mask, "impute_zero")?;
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0.0 { 0.0 } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Constant-token fill: `x * (1 - M) + token_c * M` per channel of a rank-5 tensor.
pub fn impute_token(x: &Tensor, mask: &Tensor, tokens: &[f64]) -> Result<Tensor> {
    x.same_shape(mask, "impute_token")?;
    let [_, c, z, y, xx] = x.dims5()?;
    if tokens.len() != c {
        return Err(Error::ShapeMismatch(format!("{} tokens for {c} channels", tokens.len())));
    }
    let plane = z * y * xx;
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .enumerate()
        .map(|(i, (&v, &m))| if m != 0.0 { tokens[(i / plane) % c] } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
