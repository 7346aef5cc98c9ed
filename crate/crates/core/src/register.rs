//! Rigid PET-to-CT alignment by maximizing histogram mutual information.
//!
//! The search is a derivative-free coordinate descent over three translations
//! and three Euler angles, run coarse to fine over a fixed step schedule and
//! accepting only moves that strictly raise MI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Rotation about the reference volume's physical center followed by a
/// translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    /// `(rx, ry, rz)` radians, applied as `Rz * Ry * Rx` (intrinsic Z-Y-X).
    pub rotation: [f64; 3],
    /// `(tz, ty, tx)` mm.
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(tz: f64, ty: f64, tx: f64) -> Self {
        RigidTransform {
            rotation: [0.0; 3],
            translation: [tz, ty, tx],
        }
    }

    fn params(&self) -> [f64; 6] {
        let [tz, ty, tx] = self.translation;
        let [rx, ry, rz] = self.rotation;
        [tz, ty, tx, rx, ry, rz]
    }

    fn from_params(p: [f64; 6]) -> Self {
        RigidTransform {
            translation: [p[0], p[1], p[2]],
            rotation: [p[3], p[4], p[5]],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.params().iter().all(|v| v.is_finite()) && self.rotation.iter().all(|r| r.abs() <= std::f64::consts::PI)
    }

    /// `Rz * Ry * Rx` acting on `(x, y, z)` coordinate vectors.
    fn matrix_xyz(&self) -> [[f64; 3]; 3] {
        let [rx, ry, rz] = self.rotation;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }

    /// The same rotation acting on `(z, y, x)` coordinate vectors.
    fn matrix_zyx(&self) -> [[f64; 3]; 3] {
        let m = self.matrix_xyz();
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[2 - i][2 - j];
            }
        }
        r
    }

    /// `T^-1(q) = R^T (q - c) + c - R^T t`, re-expressed as Euler angles about
    /// the same center.
    pub fn inverse(&self) -> Self {
        let m = self.matrix_xyz();
        let mt = [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[j][i]));
        let ry = (-mt[2][0]).clamp(-1.0, 1.0).asin();
        let rx = mt[2][1].atan2(mt[2][2]);
        let rz = mt[1][0].atan2(mt[0][0]);
        let r = self.matrix_zyx();
        let t = self.translation;
        let translation = [0, 1, 2].map(|i| -(0..3).map(|k| r[k][i] * t[k]).sum::<f64>());
        RigidTransform {
            rotation: [rx, ry, rz],
            translation,
        }
    }
}

/// Search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub bins: usize,
    /// Maximum coordinate sweeps per schedule level.
    pub max_iters: usize,
    /// `(translation step mm, rotation step rad)`, coarse to fine.
    pub step_schedule: Vec<(f64, f64)>,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            bins: 32,
            max_iters: 50,
            step_schedule: vec![(4.0, 0.04), (1.0, 0.01), (0.25, 0.0025)],
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::BadConfig(format!("bins = {} < 2", self.bins)));
        }
        if self.step_schedule.is_empty() {
            return Err(Error::BadConfig("empty step schedule".into()));
        }
        for w in self.step_schedule.windows(2) {
            if !(w[1].0 < w[0].0 && w[1].1 < w[0].1) {
                return Err(Error::BadConfig(format!("steps must decrease: {:?}", self.step_schedule)));
            }
        }
        if self.step_schedule.iter().any(|&(t, r)| !(t > 0.0 && r > 0.0)) {
            return Err(Error::BadConfig("steps must be positive".into()));
        }
        Ok(())
    }
}

fn bin_indices(values: &[f64], bins: usize) -> Option<Vec<usize>> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return None;
    }
    let scale = bins as f64 / (hi - lo);
    Some(
        values
            .iter()
            .map(|&v| (((v - lo) * scale) as usize).min(bins - 1))
            .collect(),
    )
}

/// Mutual information (nats) of two single-channel volumes on the same grid,
/// from a `bins x bins` joint histogram of min-max scaled intensities.
/// Zero when either image is constant.
pub fn mutual_information(fixed: &Volume, moving: &Volume, bins: usize) -> Result<f64> {
    if fixed.dims() != moving.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", fixed.dims(), moving.dims())));
    }
    mutual_information_values(fixed.channel(0), moving.channel(0), bins)
}

pub fn mutual_information_values(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    if bins < 2 {
        return Err(Error::BadConfig(format!("bins = {bins} < 2")));
    }
    let (Some(ia), Some(ib)) = (bin_indices(a, bins), bin_indices(b, bins)) else {
        return Ok(0.0);
    };
    let mut joint = vec![0u64; bins * bins];
    for (&i, &j) in ia.iter().zip(&ib) {
        joint[i * bins + j] += 1;
    }
    let n = a.len() as f64;
    let mut pa = vec![0u64; bins];
    let mut pb = vec![0u64; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += joint[i * bins + j];
            pb[j] += joint[i * bins + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            // p_ab ln(p_ab / (p_a p_b)) = (c/n) ln(c n / (c_a c_b))
            mi += (c as f64 / n) * ((c as f64 * n) / (pa[i] as f64 * pb[j] as f64)).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Resamples `moving` onto the grid of `reference` through the inverse of `t`
/// (trilinear, clamp-to-edge). All channels are transformed.
pub fn apply_rigid(moving: &Volume, t: &RigidTransform, reference: &Volume) -> Volume {
    let r = t.matrix_zyx();
    let rs = reference.spacing();
    let ro = reference.origin();
    let center = [0, 1, 2].map(|a| ro[a] + 0.5 * (reference.dims()[a] as f64 - 1.0) * rs[a]);
    let ms = moving.spacing();
    let mo = moving.origin();
    let [mz, my, mx] = moving.dims();
    let [nz, ny, nx] = reference.dims();
    let shift = t.translation;

    // moving index = A * reference index + b
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for i in 0..3 {
        // q - c - t where q = ro + idx * rs
        let base: f64 = (0..3).map(|k| r[k][i] * (ro[k] - center[k] - shift[k])).sum();
        b[i] = (base + center[i] - mo[i]) / ms[i];
        for j in 0..3 {
            a[i][j] = r[j][i] * rs[j] / ms[i];
        }
    }
    let hi = [mz, my, mx].map(|n| (n - 1) as f64);
    let mut out = Volume::zeros(reference.dims(), rs, moving.labels().to_vec())
        .expect("reference geometry is valid")
        .with_origin(ro);
    for c in 0..moving.channels() {
        let src = moving.channel(c);
        let at = |z: usize, y: usize, x: usize| src[(z * my + y) * mx + x];
        let dst = out.channel_mut(c);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let idx = [z as f64, y as f64, x as f64];
                    let p = [0, 1, 2].map(|i| {
                        let v = a[i][0] * idx[0] + a[i][1] * idx[1] + a[i][2] * idx[2] + b[i];
                        v.clamp(0.0, hi[i])
                    });
                    let i0 = p.map(|v| v.floor() as usize);
                    let f = [0, 1, 2].map(|k| p[k] - i0[k] as f64);
                    let i1 = [(i0[0] + 1).min(mz - 1), (i0[1] + 1).min(my - 1), (i0[2] + 1).min(mx - 1)];
                    let l = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
                    let c00 = l(at(i0[0], i0[1], i0[2]), at(i0[0], i0[1], i1[2]), f[2]);
                    let c01 = l(at(i0[0], i1[1], i0[2]), at(i0[0], i1[1], i1[2]), f[2]);
                    let c10 = l(at(i1[0], i0[1], i0[2]), at(i1[0], i0[1], i1[2]), f[2]);
                    let c11 = l(at(i1[0], i1[1], i0[2]), at(i1[0], i1[1], i1[2]), f[2]);
                    dst[(z * ny + y) * nx + x] = l(l(c00, c01, f[1]), l(c10, c11, f[1]), f[0]);
                }
            }
        }
    }
    out
}

/// Outcome of a registration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub transform: RigidTransform,
    pub mi_before: f64,
    pub mi_after: f64,
    pub evaluations: usize,
}

/// Finds the rigid transform that, applied to `moving`, maximizes MI with `fixed`.
pub fn rigid_register(fixed: &Volume, moving: &Volume, cfg: &MiConfig) -> Result<RigidTransform> {
    register_detailed(fixed, moving, cfg).map(|r| r.transform)
}

pub fn register_detailed(fixed: &Volume, moving: &Volume, cfg: &MiConfig) -> Result<Registration> {
    cfg.validate()?;
    let bins = cfg.bins;
    if bin_indices(fixed.channel(0), bins).is_none() || bin_indices(moving.channel(0), bins).is_none() {
        return Err(Error::ConstantImage);
    }
    let single = |v: &Volume| if v.channels() == 1 { v.clone() } else { v.split_channel(0) };
    let fixed = single(fixed);
    let moving = single(moving);
    let mut evaluations = 0usize;
    let mut score = |p: [f64; 6]| -> f64 {
        evaluations += 1;
        let warped = apply_rigid(&moving, &RigidTransform::from_params(p), &fixed);
        mutual_information_values(fixed.channel(0), warped.channel(0), bins).unwrap_or(0.0)
    };
    let mut best = [0.0; 6];
    let mut best_mi = score(best);
    let mi_before = best_mi;
    for &(t_step, r_step) in &cfg.step_schedule {
        for _ in 0..cfg.max_iters {
            let mut improved = false;
            for k in 0..6 {
                let step = if k < 3 { t_step } else { r_step };
                let mut candidate_best = None;
                for dir in [1.0, -1.0] {
                    let mut p = best;
                    p[k] += dir * step;
                    if k >= 3 && p[k].abs() > std::f64::consts::PI {
                        continue;
                    }
                    let mi = score(p);
                    if mi > best_mi && candidate_best.is_none_or(|(m, _)| mi > m) {
                        candidate_best = Some((mi, p));
                    }
                }
                if let Some((mi, p)) = candidate_best {
                    best = p;
                    best_mi = mi;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
    }
    Ok(Registration {
        transform: RigidTransform::from_params(best),
        mi_before,
        mi_after: best_mi,
        evaluations,
    })
}
