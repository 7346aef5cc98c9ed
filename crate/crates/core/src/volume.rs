//! Multi-channel 3D volumes in physical space and the harmonization steps
//! applied to every scan: blank-boundary cropping, trilinear resampling to a
//! common spacing, per-channel z-score normalization, CT/PET channel stacking
//! and random cropping.
//!
//! Axis order is always `[z, y, x]` for extents, spacing (mm) and origin (mm).
//! The origin is the physical position of the center of voxel `(0, 0, 0)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default harmonization spacing, `(sz, sy, sx)` in mm: 2 mm in-plane, 3 mm axial.
pub const DEFAULT_SPACING: [f64; 3] = [3.0, 2.0, 2.0];
/// Default CT threshold for blank-boundary cropping.
pub const DEFAULT_BLANK_THRESHOLD_HU: f64 = -900.0;
/// Default margin kept around the CT bounding box.
pub const DEFAULT_BLANK_MARGIN: usize = 2;
/// Division guard of the z-score normalization.
pub const NORM_EPSILON: f64 = 1e-8;

/// Converts a spacing given in `(x, y, z)` order (as NIfTI and the CLI write
/// it) to the internal `(z, y, x)` order.
pub fn spacing_from_xyz(xyz: [f64; 3]) -> [f64; 3] {
    [xyz[2], xyz[1], xyz[0]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelLabel {
    Ct,
    Pet,
    Generic,
}

/// Dense `[channel][z][y][x]` grid of reals with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f64>,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    labels: Vec<ChannelLabel>,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

impl Volume {
    pub fn new(
        data: Vec<f64>,
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        labels: Vec<ChannelLabel>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::BadShape(format!("zero extent in {dims:?}")));
        }
        if labels.is_empty() {
            return Err(Error::BadShape("volume needs at least one channel".into()));
        }
        check_spacing(spacing)?;
        let expected = labels.len() * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {} channels x {dims:?}",
                data.len(),
                labels.len()
            )));
        }
        Ok(Volume {
            data,
            dims,
            spacing,
            origin,
            labels,
        })
    }

    /// Single-channel volume at the origin.
    pub fn single(data: Vec<f64>, dims: [usize; 3], spacing: [f64; 3], label: ChannelLabel) -> Result<Self> {
        Volume::new(data, dims, spacing, [0.0; 3], vec![label])
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], labels: Vec<ChannelLabel>) -> Result<Self> {
        let n = labels.len() * dims.iter().product::<usize>();
        Volume::new(vec![0.0; n], dims, spacing, [0.0; 3], labels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn labels(&self) -> &[ChannelLabel] {
        &self.labels
    }

    pub fn channels(&self) -> usize {
        self.labels.len()
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_labels(mut self, labels: Vec<ChannelLabel>) -> Result<Self> {
        if labels.len() != self.labels.len() {
            return Err(Error::LabelMismatch(format!(
                "{} labels for {} channels",
                labels.len(),
                self.labels.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    #[inline]
    pub fn offset(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(c, z, y, x);
        self.data[o] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as its own volume.
    pub fn split_channel(&self, c: usize) -> Volume {
        Volume {
            data: self.channel(c).to_vec(),
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            labels: vec![self.labels[c]],
        }
    }

    /// Physical extent of the field of view in mm per axis.
    pub fn physical_extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// Length of the field-of-view diagonal in mm.
    pub fn physical_diagonal(&self) -> f64 {
        self.physical_extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Extracts the box `[corner, corner + shape)`; must lie inside the volume.
    pub fn crop(&self, corner: [usize; 3], shape: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if shape[a] == 0 || corner[a] + shape[a] > self.dims[a] {
                return Err(Error::ShapeMismatch(format!(
                    "crop {corner:?}+{shape:?} outside {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(self.channels() * shape.iter().product::<usize>());
        for c in 0..self.channels() {
            for z in 0..shape[0] {
                for y in 0..shape[1] {
                    let start = self.offset(c, corner[0] + z, corner[1] + y, corner[2]);
                    data.extend_from_slice(&self.data[start..start + shape[2]]);
                }
            }
        }
        let origin = [0, 1, 2].map(|a| self.origin[a] + corner[a] as f64 * self.spacing[a]);
        Ok(Volume {
            data,
            dims: shape,
            spacing: self.spacing,
            origin,
            labels: self.labels.clone(),
        })
    }

    /// Zero-pads symmetrically (extra voxel after) up to at least `shape`.
    pub fn pad_to(&self, shape: [usize; 3]) -> Volume {
        if (0..3).all(|a| self.dims[a] >= shape[a]) {
            return self.clone();
        }
        let dims = [0, 1, 2].map(|a| self.dims[a].max(shape[a]));
        let before = [0, 1, 2].map(|a| (dims[a] - self.dims[a]) / 2);
        let mut out = Volume {
            data: vec![0.0; self.channels() * dims.iter().product::<usize>()],
            dims,
            spacing: self.spacing,
            origin: [0, 1, 2].map(|a| self.origin[a] - before[a] as f64 * self.spacing[a]),
            labels: self.labels.clone(),
        };
        for c in 0..self.channels() {
            for z in 0..self.dims[0] {
                for y in 0..self.dims[1] {
                    let src = self.offset(c, z, y, 0);
                    let dst = out.offset(c, z + before[0], y + before[1], before[2]);
                    out.data[dst..dst + self.dims[2]].copy_from_slice(&self.data[src..src + self.dims[2]]);
                }
            }
        }
        out
    }
}

/// Crops `ct` and every companion to the CT bounding box of voxels above
/// `threshold_hu`, dilated by `margin_voxels` and clamped to the grid.
pub fn crop_blank_boundary(
    ct: &Volume,
    companions: &[Volume],
    threshold_hu: f64,
    margin_voxels: usize,
) -> Result<(Volume, Vec<Volume>)> {
    for (i, c) in companions.iter().enumerate() {
        if !ct.same_grid(c) {
            return Err(Error::ShapeMismatch(format!(
                "companion {i} grid {:?}/{:?} differs from CT {:?}/{:?}",
                c.dims, c.spacing, ct.dims, ct.spacing
            )));
        }
    }
    let [nz, ny, nx] = ct.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    let ch = ct.channel(0);
    for z in 0..nz {
        for y in 0..ny {
            let row = &ch[(z * ny + y) * nx..(z * ny + y + 1) * nx];
            for (x, &v) in row.iter().enumerate() {
                if v > threshold_hu {
                    any = true;
                    for (a, i) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(i);
                        hi[a] = hi[a].max(i);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::AllBlank(threshold_hu));
    }
    let corner = [0, 1, 2].map(|a| lo[a].saturating_sub(margin_voxels));
    let shape = [0, 1, 2].map(|a| (hi[a] + margin_voxels).min(ct.dims[a] - 1) + 1 - corner[a]);
    let ct_out = ct.crop(corner, shape)?;
    let comp_out = companions
        .iter()
        .map(|c| c.crop(corner, shape))
        .collect::<Result<Vec<_>>>()?;
    Ok((ct_out, comp_out))
}

/// Continuous input index for output voxel `i` when resampling with the
/// field of view kept centered: voxel edges at 0 and `n * spacing` coincide.
#[inline]
fn source_coord(i: usize, ratio: f64) -> f64 {
    (i as f64 + 0.5) * ratio - 0.5
}

/// Clamp-to-edge linear sample positions along one axis.
fn axis_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let p = source_coord(i, ratio).clamp(0.0, (n_in - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

/// Resamples every channel onto a grid with `target_spacing` (`[z, y, x]`, mm).
pub fn resample_trilinear(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    check_spacing(target_spacing)?;
    let dims_out = [0, 1, 2].map(|a| {
        let n = (v.dims[a] as f64 * v.spacing[a] / target_spacing[a]).round() as usize;
        n.max(1)
    });
    let ratio = [0, 1, 2].map(|a| target_spacing[a] / v.spacing[a]);
    let tz = axis_taps(v.dims[0], dims_out[0], ratio[0]);
    let ty = axis_taps(v.dims[1], dims_out[1], ratio[1]);
    let tx = axis_taps(v.dims[2], dims_out[2], ratio[2]);
    let [_, ny, nx] = v.dims;
    let n_out: usize = dims_out.iter().product();
    let mut data = Vec::with_capacity(v.channels() * n_out);
    for c in 0..v.channels() {
        let src = v.channel(c);
        let at = |z: usize, y: usize, x: usize| src[(z * ny + y) * nx + x];
        for &(z0, z1, fz) in &tz {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                    data.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
                }
            }
        }
    }
    let origin = [0, 1, 2].map(|a| v.origin[a] + 0.5 * (target_spacing[a] - v.spacing[a]));
    Volume::new(data, dims_out, target_spacing, origin, v.labels.clone())
}

/// Mean and population standard deviation of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
    pub epsilon: f64,
}

impl NormStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mu) / self.sigma.max(self.epsilon)
    }
}

pub fn compute_norm_stats(v: &Volume, channel: usize) -> NormStats {
    let xs = v.channel(channel);
    let n = xs.len() as f64;
    let mu = crate::reduce::pairwise_sum(xs) / n;
    let sq: Vec<f64> = xs.iter().map(|x| (x - mu) * (x - mu)).collect();
    let sigma = (crate::reduce::pairwise_sum(&sq) / n).sqrt();
    NormStats {
        mu,
        sigma,
        epsilon: NORM_EPSILON,
    }
}

/// Normalizes each channel with its own statistics.
pub fn zscore_normalize(v: &Volume) -> Volume {
    let mut out = v.clone();
    for c in 0..v.channels() {
        let stats = compute_norm_stats(v, c);
        for x in out.channel_mut(c) {
            *x = stats.apply(*x);
        }
    }
    out
}

/// Stacks a CT and a PET volume into the fixed two-channel `[CT, PET]` layout.
pub fn concat_channels(ct: &Volume, pet: &Volume) -> Result<Volume> {
    if ct.labels != [ChannelLabel::Ct] {
        return Err(Error::LabelMismatch(format!("expected [CT], got {:?}", ct.labels)));
    }
    if pet.labels != [ChannelLabel::Pet] {
        return Err(Error::LabelMismatch(format!("expected [PET], got {:?}", pet.labels)));
    }
    if !ct.same_grid(pet) {
        return Err(Error::ShapeMismatch(format!(
            "CT {:?}@{:?} vs PET {:?}@{:?}",
            ct.dims, ct.spacing, pet.dims, pet.spacing
        )));
    }
    let mut data = Vec::with_capacity(2 * ct.voxels());
    data.extend_from_slice(&ct.data);
    data.extend_from_slice(&pet.data);
    Ok(Volume {
        data,
        dims: ct.dims,
        spacing: ct.spacing,
        origin: ct.origin,
        labels: vec![ChannelLabel::Ct, ChannelLabel::Pet],
    })
}

/// Uniformly random corner for a `crop_shape` box inside `dims`.
pub fn random_corner<R: Rng + ?Sized>(dims: [usize; 3], crop_shape: [usize; 3], rng: &mut R) -> [usize; 3] {
    [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - crop_shape[a]))
}

/// Crops all channels at a uniformly random corner, zero-padding first when
/// the volume is smaller than the crop.
pub fn random_crop<R: Rng + ?Sized>(v: &Volume, crop_shape: [usize; 3], rng: &mut R) -> Result<Volume> {
    if crop_shape.contains(&0) {
        return Err(Error::BadShape(format!("crop shape {crop_shape:?}")));
    }
    let padded = v.pad_to(crop_shape);
    let corner = random_corner(padded.dims, crop_shape, rng);
    padded.crop(corner, crop_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n: usize = dims.iter().product();
        Volume::single((0..n).map(|i| i as f64).collect(), dims, [1.0; 3], ChannelLabel::Generic).unwrap()
    }

    #[test]
    fn crop_blank_boundary_finds_corner_block() {
        let mut ct = Volume::single(vec![-1000.0; 64], [4, 4, 4], [1.0; 3], ChannelLabel::Ct).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    ct.set(0, z, y, x, 0.0);
                }
            }
        }
        let (out, _) = crop_blank_boundary(&ct, &[], -900.0, 0).unwrap();
        assert_eq!(out.dims(), [2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_blank_boundary_moves_origin_and_companions() {
        let mut ct = Volume::single(vec![-1000.0; 125], [5, 5, 5], [3.0, 2.0, 2.0], ChannelLabel::Ct).unwrap();
        ct.set(0, 3, 2, 4, 50.0);
        let pet = Volume::single(ramp([5, 5, 5]).into_data(), [5, 5, 5], [3.0, 2.0, 2.0], ChannelLabel::Pet).unwrap();
        let (c, comps) = crop_blank_boundary(&ct, std::slice::from_ref(&pet), -900.0, 1).unwrap();
        assert_eq!(c.dims(), [3, 3, 2]);
        assert_eq!(c.origin(), [6.0, 2.0, 6.0]);
        assert_eq!(comps[0].get(0, 0, 0, 0), pet.get(0, 2, 1, 3));
    }

    #[test]
    fn crop_blank_boundary_is_idempotent_on_tight_volume() {
        let ct = Volume::single(vec![10.0; 27], [3, 3, 3], [1.0; 3], ChannelLabel::Ct).unwrap();
        let (out, _) = crop_blank_boundary(&ct, &[], -900.0, 2).unwrap();
        assert_eq!(out, ct);
    }

    #[test]
    fn crop_blank_boundary_errors() {
        let ct = Volume::single(vec![-1000.0; 8], [2, 2, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
        assert!(matches!(crop_blank_boundary(&ct, &[], -900.0, 0), Err(Error::AllBlank(_))));
        let other = Volume::single(vec![0.0; 27], [3, 3, 3], [1.0; 3], ChannelLabel::Pet).unwrap();
        let ct = Volume::single(vec![0.0; 8], [2, 2, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
        assert!(matches!(crop_blank_boundary(&ct, &[other], -900.0, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = Volume::new(
            (0..5 * 6 * 7).map(|i| (i as f64 * 0.37).sin() * 100.0).collect(),
            [5, 6, 7],
            [3.0, 2.0, 2.0],
            [1.0, -4.0, 7.5],
            vec![ChannelLabel::Ct],
        )
        .unwrap();
        let r = resample_trilinear(&v, [3.0, 2.0, 2.0]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn ramp_downsample_samples_mapped_centers() {
        let v = Volume::single((0..8).map(|i| i as f64).collect(), [1, 1, 8], [1.0; 3], ChannelLabel::Generic).unwrap();
        let r = resample_trilinear(&v, [1.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.dims(), [1, 1, 4]);
        assert_eq!(r.data(), &[0.5, 2.5, 4.5, 6.5]);
        assert_eq!(r.origin(), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = ramp([2, 2, 2]);
        assert!(matches!(resample_trilinear(&v, [0.0, 1.0, 1.0]), Err(Error::InvalidSpacing(_))));
        assert!(matches!(resample_trilinear(&v, [f64::NAN, 1.0, 1.0]), Err(Error::InvalidSpacing(_))));
    }

    #[test]
    fn resample_preserves_physical_extent() {
        let v = ramp([7, 9, 11]);
        let target = [3.0, 2.0, 2.0];
        let r = resample_trilinear(&v, target).unwrap();
        for a in 0..3 {
            assert!((r.physical_extent()[a] - v.physical_extent()[a]).abs() <= target[a] / 2.0 + 1e-12);
        }
    }

    #[test]
    fn norm_stats_cases() {
        let c = Volume::single(vec![7.0; 8], [2, 2, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
        let s = compute_norm_stats(&c, 0);
        assert_eq!((s.mu, s.sigma), (7.0, 0.0));
        let v = Volume::single(vec![0.0, 2.0], [1, 1, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
        let s = compute_norm_stats(&v, 0);
        assert_eq!((s.mu, s.sigma), (1.0, 1.0));
        let v = Volume::single(vec![-1.0, 1.0, -1.0, 1.0], [1, 1, 4], [1.0; 3], ChannelLabel::Ct).unwrap();
        let s = compute_norm_stats(&v, 0);
        assert_eq!((s.mu, s.sigma), (0.0, 1.0));
    }

    #[test]
    fn zscore_cases() {
        let c = Volume::single(vec![7.0; 8], [2, 2, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
        assert!(zscore_normalize(&c).data().iter().all(|&v| v == 0.0));
        let v = Volume::new(vec![0.0, 2.0, 10.0, 30.0], [1, 1, 2], [1.0; 3], [0.0; 3], vec![ChannelLabel::Ct, ChannelLabel::Pet]).unwrap();
        let n = zscore_normalize(&v);
        assert_eq!(n.data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn concat_and_split_round_trip() {
        let ct = Volume::single(vec![1.0; 64], [4, 4, 4], [1.0; 3], ChannelLabel::Ct).unwrap();
        let pet = Volume::single((0..64).map(f64::from).collect(), [4, 4, 4], [1.0; 3], ChannelLabel::Pet).unwrap();
        let x = concat_channels(&ct, &pet).unwrap();
        assert_eq!(x.channels(), 2);
        assert_eq!(x.split_channel(0), ct);
        assert_eq!(x.split_channel(1), pet);
        assert!(matches!(concat_channels(&pet, &ct), Err(Error::LabelMismatch(_))));
        let small = Volume::single(vec![1.0; 27], [3, 3, 3], [1.0; 3], ChannelLabel::Pet).unwrap();
        assert!(matches!(concat_channels(&ct, &small), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn random_crop_shapes_and_determinism() {
        let v = Volume::zeros([20, 23, 25], [1.0; 3], vec![ChannelLabel::Ct, ChannelLabel::Pet]).unwrap();
        let a = random_crop(&v, [8, 8, 8], &mut seeded(3, 0)).unwrap();
        let b = random_crop(&v, [8, 8, 8], &mut seeded(3, 0)).unwrap();
        assert_eq!(a.dims(), [8, 8, 8]);
        assert_eq!(a.origin(), b.origin());
        let whole = random_crop(&v, [20, 23, 25], &mut seeded(1, 0)).unwrap();
        assert_eq!(whole, v);
    }

    #[test]
    fn random_crop_pads_small_volume() {
        let v = Volume::single(vec![1.0; 8], [2, 2, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
        let c = random_crop(&v, [4, 4, 4], &mut seeded(0, 0)).unwrap();
        assert_eq!(c.dims(), [4, 4, 4]);
        assert_eq!(c.data().iter().sum::<f64>(), 8.0);
        assert_eq!(c.get(0, 1, 1, 1), 1.0);
        assert_eq!(c.origin(), [-1.0, -1.0, -1.0]);
    }
}
