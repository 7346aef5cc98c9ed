//! Per-case harmonization: optional rigid alignment of PET to CT, CT
//! blank-boundary cropping, resampling to a common spacing, per-channel
//! z-scoring and CT/PET stacking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{apply_rigid, register_detailed, MiConfig, Registration};
use crate::volume::{
    compute_norm_stats, concat_channels, crop_blank_boundary, resample_trilinear, zscore_normalize, NormStats,
    Volume, DEFAULT_BLANK_MARGIN, DEFAULT_BLANK_THRESHOLD_HU, DEFAULT_SPACING,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizeOptions {
    /// `[z, y, x]` mm.
    pub spacing: [f64; 3],
    pub threshold_hu: f64,
    pub margin_voxels: usize,
    /// Register PET onto CT before cropping.
    pub register: Option<MiConfig>,
}

impl Default for HarmonizeOptions {
    fn default() -> Self {
        HarmonizeOptions {
            spacing: DEFAULT_SPACING,
            threshold_hu: DEFAULT_BLANK_THRESHOLD_HU,
            margin_voxels: DEFAULT_BLANK_MARGIN,
            register: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizedCase {
    /// `[CT, PET]`, normalized.
    pub image: Volume,
    /// Binary label on the image grid.
    pub label: Option<Volume>,
    pub ct_stats: NormStats,
    pub pet_stats: NormStats,
    pub registration: Option<Registration>,
}

/// Nearest-label resampling: trilinear, then thresholded at 0.5.
fn resample_label(label: &Volume, spacing: [f64; 3]) -> Result<Volume> {
    let mut out = resample_trilinear(label, spacing)?;
    for v in out.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

pub fn harmonize_case(ct: &Volume, pet: &Volume, label: Option<&Volume>, opts: &HarmonizeOptions) -> Result<HarmonizedCase> {
    let (pet, registration) = match &opts.register {
        Some(cfg) => {
            let reg = register_detailed(ct, pet, cfg)?;
            (apply_rigid(pet, &reg.transform, ct), Some(reg))
        }
        None => (pet.clone(), None),
    };
    let mut companions = vec![pet];
    if let Some(l) = label {
        companions.push(l.clone());
    }
    let (ct, mut rest) = crop_blank_boundary(ct, &companions, opts.threshold_hu, opts.margin_voxels)?;
    let label = if label.is_some() { rest.pop() } else { None };
    let pet = rest.pop().ok_or_else(|| Error::ShapeMismatch("missing PET".into()))?;
    let same = ct.spacing() == opts.spacing;
    let (ct, pet, label) = if same {
        (ct, pet, label)
    } else {
        (
            resample_trilinear(&ct, opts.spacing)?,
            resample_trilinear(&pet, opts.spacing)?,
            label.map(|l| resample_label(&l, opts.spacing)).transpose()?,
        )
    };
    let ct_stats = compute_norm_stats(&ct, 0);
    let pet_stats = compute_norm_stats(&pet, 0);
    let image = concat_channels(&zscore_normalize(&ct), &zscore_normalize(&pet))?;
    Ok(HarmonizedCase {
        image,
        label,
        ct_stats,
        pet_stats,
        registration,
    })
}
