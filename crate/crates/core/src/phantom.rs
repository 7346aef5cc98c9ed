//! Seeded synthetic PET/CT phantoms with lesion labels.
//!
//! CT: an ellipsoidal soft-tissue body (40 HU with Gaussian noise) inside a
//! bone shell (300 HU), surrounded by air (-1000 HU).
//! PET: inside the body, `rho * S + (1 - rho) * N`, where `S` is a smoothed
//! copy of the CT body mask and `N` a smoothed seeded noise field, both
//! rescaled to mean 1 and standard deviation 0.2 over the body; zero outside.
//! Spherical lesions, clipped to the body, replace PET with a uniform hot
//! uptake and form the label.
//!
//! Smoothing is `passes` rounds of the separable 3-tap kernel
//! `[1/4, 1/2, 1/4]` along each axis with edge replication.
//! All intensities are rounded to `f32` so that phantoms read back from
//! NIfTI equal the in-memory ones.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::nifti::{read_nifti_as, write_nifti};
use crate::rng::{derive_seed, seeded, stream};
use crate::volume::{ChannelLabel, Volume, DEFAULT_SPACING};

pub const CORPUS_MANIFEST: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// `[z, y, x]` voxels.
    pub shape: [usize; 3],
    /// `[z, y, x]` mm.
    pub spacing: [f64; 3],
    pub body_hu: f64,
    pub body_noise_hu: f64,
    pub air_hu: f64,
    pub bone_hu: f64,
    /// Normalized ellipsoid radius where the bone shell starts.
    pub shell_inner: f64,
    pub pet_background: f64,
    pub pet_background_sd: f64,
    /// Inclusive range of lesion counts; `[0, 0]` disables lesions.
    pub lesion_count: [usize; 2],
    pub lesion_radius_mm: [f64; 2],
    pub lesion_uptake: [f64; 2],
    /// Share of PET structure derived from CT body morphology.
    pub rho: f64,
    pub smooth_passes: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [48, 64, 64],
            spacing: DEFAULT_SPACING,
            body_hu: 40.0,
            body_noise_hu: 10.0,
            air_hu: -1000.0,
            bone_hu: 300.0,
            shell_inner: 0.88,
            pet_background: 1.0,
            pet_background_sd: 0.2,
            lesion_count: [1, 4],
            lesion_radius_mm: [3.0, 8.0],
            lesion_uptake: [4.0, 8.0],
            rho: 0.8,
            smooth_passes: 6,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.shape.iter().any(|&n| n < 4) {
            return bad(format!("phantom shape {:?} too small", self.shape));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?}", self.spacing));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} not in [0, 1]", self.rho));
        }
        if !(self.shell_inner > 0.0 && self.shell_inner < 1.0) {
            return bad(format!("shell_inner {}", self.shell_inner));
        }
        let [r0, r1] = self.lesion_radius_mm;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("lesion radii {:?}", self.lesion_radius_mm));
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return bad(format!("lesion counts {:?}", self.lesion_count));
        }
        let [u0, u1] = self.lesion_uptake;
        if !(u0 > 0.0 && u0 <= u1) {
            return bad(format!("lesion uptake {:?}", self.lesion_uptake));
        }
        if !(self.body_noise_hu >= 0.0 && self.pet_background_sd >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Semi-axis range as a fraction of the half field of view.
const BODY_SEMI_AXIS: [f64; 2] = [0.6, 0.8];
/// Center jitter as a fraction of the half field of view.
const BODY_JITTER: f64 = 0.05;
/// Lesion centers lie within this normalized ellipsoid radius.
const LESION_REGION: f64 = 0.55;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Physical center `[z, y, x]` mm.
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    pub uptake: f64,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub ct: Volume,
    pub pet: Volume,
    pub label: Volume,
    pub body: Vec<bool>,
    pub lesions: Vec<Lesion>,
}

/// Separable `[1/4, 1/2, 1/4]` blur with edge replication, `passes` times.
pub fn smooth(data: &mut [f64], dims: [usize; 3], passes: usize) {
    let [nz, ny, nx] = dims;
    let strides = [ny * nx, nx, 1];
    let mut tmp = vec![0.0; data.len()];
    for _ in 0..passes {
        for a in 0..3 {
            let (n, s) = (dims[a], strides[a]);
            for (i, t) in tmp.iter_mut().enumerate() {
                let k = (i / s) % n;
                let lo = if k == 0 { i } else { i - s };
                let hi = if k + 1 == n { i } else { i + s };
                *t = 0.25 * data[lo] + 0.5 * data[i] + 0.25 * data[hi];
            }
            data.copy_from_slice(&tmp);
        }
    }
    debug_assert_eq!(data.len(), nz * ny * nx);
}

/// Rescales `values` over `support` to the given mean and standard deviation.
fn standardize(values: &mut [f64], support: &[bool], mean: f64, sd: f64) {
    let inside: Vec<f64> = values.iter().zip(support).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    if inside.is_empty() {
        return;
    }
    let n = inside.len() as f64;
    let mu = crate::reduce::pairwise_sum(&inside) / n;
    let sq: Vec<f64> = inside.iter().map(|v| (v - mu) * (v - mu)).collect();
    let sigma = (crate::reduce::pairwise_sum(&sq) / n).sqrt();
    for v in values.iter_mut() {
        *v = if sigma > 0.0 { mean + sd * (*v - mu) / sigma } else { mean };
    }
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn quantize(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<Phantom> {
    cfg.validate()?;
    let dims = cfg.shape;
    let [nz, ny, nx] = dims;
    let n = nz * ny * nx;
    let sp = cfg.spacing;
    let mut rng = seeded(seed, stream::PHANTOM);
    let half = [0, 1, 2].map(|a| 0.5 * dims[a] as f64 * sp[a]);
    let center = [0, 1, 2].map(|a| (0.5 * (dims[a] as f64 - 1.0)) * sp[a] + uniform(&mut rng, [-BODY_JITTER, BODY_JITTER]) * half[a]);
    let semi = [0, 1, 2].map(|a| uniform(&mut rng, BODY_SEMI_AXIS) * half[a]);
    let pos = |i: usize| {
        let (z, y, x) = (i / (ny * nx), (i / nx) % ny, i % nx);
        [z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]]
    };
    let radius: Vec<f64> = (0..n)
        .map(|i| {
            let p = pos(i);
            (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let body: Vec<bool> = radius.iter().map(|&r| r < 1.0).collect();

    let mut noise_rng = seeded(seed, stream::NOISE);
    let ct_noise = Normal::new(0.0, cfg.body_noise_hu).map_err(|e| Error::BadConfig(e.to_string()))?;
    let ct: Vec<f64> = radius
        .iter()
        .map(|&r| {
            if r >= 1.0 {
                cfg.air_hu
            } else {
                let base = if r >= cfg.shell_inner { cfg.bone_hu } else { cfg.body_hu };
                base + ct_noise.sample(&mut noise_rng)
            }
        })
        .collect();

    let mut morph: Vec<f64> = body.iter().map(|&b| f64::from(u8::from(b))).collect();
    smooth(&mut morph, dims, cfg.smooth_passes);
    standardize(&mut morph, &body, cfg.pet_background, cfg.pet_background_sd);
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let mut field: Vec<f64> = (0..n).map(|_| white.sample(&mut noise_rng)).collect();
    smooth(&mut field, dims, cfg.smooth_passes);
    standardize(&mut field, &body, cfg.pet_background, cfg.pet_background_sd);
    let mut pet: Vec<f64> = (0..n)
        .map(|i| {
            if body[i] {
                (cfg.rho * morph[i] + (1.0 - cfg.rho) * field[i]).max(0.0)
            } else {
                0.0
            }
        })
        .collect();

    let mut label = vec![0.0; n];
    let count = rng.random_range(cfg.lesion_count[0]..=cfg.lesion_count[1]);
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        // rejection-sample a voxel center well inside the body
        let c = loop {
            let v = [0, 1, 2].map(|a| rng.random_range(0..dims[a]));
            let i = (v[0] * ny + v[1]) * nx + v[2];
            if radius[i] < LESION_REGION {
                break pos(i);
            }
        };
        let r = uniform(&mut rng, cfg.lesion_radius_mm);
        let uptake = uniform(&mut rng, cfg.lesion_uptake);
        let mut voxels = 0;
        for i in 0..n {
            let p = pos(i);
            let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            if d2 <= r * r && body[i] {
                label[i] = 1.0;
                pet[i] = uptake;
                voxels += 1;
            }
        }
        lesions.push(Lesion {
            center_mm: c,
            radius_mm: r,
            uptake,
            voxels,
        });
    }

    let ct = Volume::single(quantize(ct), dims, sp, ChannelLabel::Ct)?;
    let pet = Volume::single(quantize(pet), dims, sp, ChannelLabel::Pet)?;
    let label = Volume::single(label, dims, sp, ChannelLabel::Generic)?;
    Ok(Phantom {
        ct,
        pet,
        label,
        body,
        lesions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: usize,
    pub seed: u64,
    pub ct: String,
    pub pet: String,
    pub label: String,
    pub lesions: Vec<Lesion>,
    pub mean_pet_lesion: f64,
    pub mean_pet_background: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: PhantomConfig,
    /// Whether the volumes are already harmonized (normalized, common spacing).
    #[serde(default)]
    pub harmonized: bool,
    pub cases: Vec<CaseEntry>,
}

fn mean_where(values: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let sel: Vec<f64> = (0..values.len()).filter(|&i| keep(i)).map(|i| values[i]).collect();
    if sel.is_empty() {
        0.0
    } else {
        crate::reduce::pairwise_sum(&sel) / sel.len() as f64
    }
}

/// Case `i` of a corpus generated from `seed`.
pub fn corpus_case(cfg: &PhantomConfig, seed: u64, i: usize) -> Result<Phantom> {
    generate_phantom(cfg, derive_seed(seed, i as u64))
}

/// Generates `n` phantoms in memory.
pub fn generate_phantoms(cfg: &PhantomConfig, seed: u64, n: usize) -> Result<Vec<Phantom>> {
    (0..n).into_par_iter().map(|i| corpus_case(cfg, seed, i)).collect()
}

/// Writes `ct_i.nii`, `pet_i.nii`, `label_i.nii` for `i < n` and `corpus.json`.
pub fn generate_corpus(cfg: &PhantomConfig, n: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cases = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = corpus_case(cfg, seed, i)?;
            let entry = CaseEntry {
                id: i,
                seed: derive_seed(seed, i as u64),
                ct: format!("ct_{i}.nii"),
                pet: format!("pet_{i}.nii"),
                label: format!("label_{i}.nii"),
                mean_pet_lesion: mean_where(p.pet.data(), |j| p.label.data()[j] > 0.0),
                mean_pet_background: mean_where(p.pet.data(), |j| p.body[j] && p.label.data()[j] == 0.0),
                lesions: p.lesions.clone(),
            };
            write_nifti(&p.ct, dir.join(&entry.ct))?;
            write_nifti(&p.pet, dir.join(&entry.pet))?;
            write_nifti(&p.label, dir.join(&entry.label))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        seed,
        config: cfg.clone(),
        harmonized: false,
        cases,
    };
    write_json(&dir.join(CORPUS_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// One case read back from a corpus directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCase {
    pub id: usize,
    pub ct: Volume,
    pub pet: Volume,
    pub label: Volume,
}

pub fn read_corpus_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    read_json(&dir.as_ref().join(CORPUS_MANIFEST))
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<LoadedCase>)> {
    let dir = dir.as_ref();
    let manifest = read_corpus_manifest(dir)?;
    if manifest.cases.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let path = |f: &str| -> PathBuf { dir.join(f) };
    let cases = manifest
        .cases
        .iter()
        .map(|c| {
            Ok(LoadedCase {
                id: c.id,
                ct: read_nifti_as(path(&c.ct), ChannelLabel::Ct)?,
                pet: read_nifti_as(path(&c.pet), ChannelLabel::Pet)?,
                label: read_nifti_as(path(&c.label), ChannelLabel::Generic)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cases))
}
