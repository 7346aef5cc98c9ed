//! Whole-volume sliding-window inference with uniform overlap blending.

use serde::{Deserialize, Serialize};

use crate::autonet::UNet;
use crate::error::{Error, Result};
use crate::metrics::{score, SegScore};
use crate::tensor::Tensor;
use crate::volume::{ChannelLabel, Volume};

pub const DEFAULT_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    /// Shape the windows tile: the volume, zero-padded up to the window.
    pub extent: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    /// Lexicographically sorted window corners.
    pub corners: Vec<[usize; 3]>,
}

fn axis_corners(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut out: Vec<usize> = (0..last).step_by(stride).collect();
    out.push(last);
    out
}

pub fn plan_windows(vol_shape: [usize; 3], window: [usize; 3], overlap: f64) -> Result<WindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::BadOverlap(overlap));
    }
    if vol_shape.contains(&0) || window.contains(&0) {
        return Err(Error::BadShape(format!("volume {vol_shape:?}, window {window:?}")));
    }
    let extent = [0, 1, 2].map(|a| vol_shape[a].max(window[a]));
    let stride = window.map(|w| ((w as f64 * (1.0 - overlap)).floor() as usize).max(1));
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_corners(extent[a], window[a], stride[a])).collect();
    let mut corners = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                corners.push([z, y, x]);
            }
        }
    }
    Ok(WindowPlan {
        extent,
        window,
        stride,
        corners,
    })
}

/// Anything that maps a `[1, C, Z, Y, X]` window to `[1, C', Z, Y, X]`.
pub trait WindowModel {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl WindowModel for UNet {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl WindowModel for Identity {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Per-voxel mean of all window outputs covering the voxel. The mean is
/// accumulated incrementally in corner order, so equal contributions
/// reproduce their value exactly.
pub fn sliding_infer(model: &dyn WindowModel, volume: &Volume, plan: &WindowPlan) -> Result<Volume> {
    let dims = volume.dims();
    if (0..3).any(|a| plan.extent[a] != dims[a].max(plan.window[a])) {
        return Err(Error::ShapeMismatch(format!(
            "plan for {:?} applied to volume {dims:?}",
            plan.extent
        )));
    }
    let padded = volume.pad_to(plan.window);
    let ext = plan.extent;
    let nvox: usize = ext.iter().product();
    let mut mean: Vec<f64> = Vec::new();
    let mut count = vec![0u32; nvox];
    let mut out_c = 0;
    let [wz, wy, wx] = plan.window;
    for &corner in &plan.corners {
        let x = Tensor::from_volume(&padded.crop(corner, plan.window)?);
        let y = model.predict(&x)?;
        let [b, c, z, yy, xx] = y.dims5()?;
        if b != 1 || [z, yy, xx] != plan.window || (out_c != 0 && c != out_c) {
            return Err(Error::ShapeMismatch(format!("window output {:?}", y.shape())));
        }
        if out_c == 0 {
            out_c = c;
            mean = vec![0.0; c * nvox];
        }
        let wv = wz * wy * wx;
        for dz in 0..wz {
            for dy in 0..wy {
                let row = ((corner[0] + dz) * ext[1] + corner[1] + dy) * ext[2] + corner[2];
                for dx in 0..wx {
                    let v = row + dx;
                    count[v] += 1;
                    let k = count[v] as f64;
                    let src = (dz * wy + dy) * wx + dx;
                    for ch in 0..c {
                        let m = &mut mean[ch * nvox + v];
                        *m += (y.data()[ch * wv + src] - *m) / k;
                    }
                }
            }
        }
    }
    debug_assert!(count.iter().all(|&n| n >= 1));
    let labels = if out_c == volume.channels() {
        volume.labels().to_vec()
    } else {
        vec![ChannelLabel::Generic; out_c]
    };
    let blended = Volume::new(mean, ext, volume.spacing(), padded.origin(), labels)?;
    if ext == dims {
        return Ok(blended);
    }
    let before = [0, 1, 2].map(|a| (ext[a] - dims[a]) / 2);
    blended.crop(before, dims)
}

/// Binary mask from two-class logits: foreground where logit 1 beats logit 0.
pub fn argmax_mask(logits: &Volume) -> Result<Volume> {
    if logits.channels() != 2 {
        return Err(Error::ShapeMismatch(format!("{} logit channels", logits.channels())));
    }
    let data = logits
        .channel(0)
        .iter()
        .zip(logits.channel(1))
        .map(|(&a, &b)| if b > a { 1.0 } else { 0.0 })
        .collect();
    Volume::new(data, logits.dims(), logits.spacing(), logits.origin(), vec![ChannelLabel::Generic])
}

/// Sliding-window segmentation of a CT+PET volume.
pub fn segment(model: &dyn WindowModel, volume: &Volume, window: [usize; 3], overlap: f64) -> Result<Volume> {
    let plan = plan_windows(volume.dims(), window, overlap)?;
    argmax_mask(&sliding_infer(model, volume, &plan)?)
}

/// Segments `volume` and scores it against `reference`.
pub fn evaluate_case(
    model: &dyn WindowModel,
    volume: &Volume,
    reference: &Volume,
    window: [usize; 3],
    overlap: f64,
) -> Result<SegScore> {
    score(&segment(model, volume, window, overlap)?, reference)
}
