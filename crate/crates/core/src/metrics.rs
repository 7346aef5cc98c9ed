//! Segmentation scores: Dice overlap and the 95th-percentile symmetric
//! surface distance (HD95) in millimetres.
//!
//! Conventions:
//! - surface voxels are foreground voxels with a 6-connected background
//!   neighbour; foreground on the grid border is surface;
//! - distances are between voxel centers with anisotropic spacing;
//! - the percentile is nearest-rank: element `ceil(0.95 n) - 1` of the sorted
//!   distances, no interpolation;
//! - HD95 is the larger of the two directed percentiles;
//! - two empty masks score Dice 1 and HD95 0, exactly one empty mask scores
//!   Dice 0 and HD95 equal to the field-of-view diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub dice: f64,
    pub hd95_mm: f64,
    pub n_pred: usize,
    pub n_ref: usize,
}

fn check_len(pred: &[bool], reference: &[bool]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} voxels, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// `2|P ∩ R| / (|P| + |R|)`.
pub fn dice(pred: &[bool], reference: &[bool]) -> Result<f64> {
    check_len(pred, reference)?;
    let (mut inter, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        np += p as usize;
        nr += r as usize;
        inter += (p && r) as usize;
    }
    Ok(if np + nr == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nr) as f64
    })
}

/// Linear indices of surface voxels, in ascending order.
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let [nz, ny, nx] = dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if !mask[i] {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
                if border
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * spacing;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&last) => {
                    let (xq, xl) = (pos(q), pos(last));
                    let s = ((f[q] + xq * xq) - (f[last] + xl * xl)) / (2.0 * (xq - xl));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(p) {
            k += 1;
        }
        let d = (p as f64 - v[k] as f64) * spacing;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest seed.
fn squared_distance_map(seeds: &[usize], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let mut d = vec![f64::INFINITY; nz * ny * nx];
    for &s in seeds {
        d[s] = 0.0;
    }
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    let longest = nz.max(ny).max(nx);
    let mut line = vec![0.0; longest];
    let mut res = vec![0.0; longest];
    // x, then y, then z
    for zz in 0..nz {
        for yy in 0..ny {
            let base = (zz * ny + yy) * nx;
            line[..nx].copy_from_slice(&d[base..base + nx]);
            edt_line(&line[..nx], spacing[2], &mut res[..nx], &mut v, &mut zb);
            d[base..base + nx].copy_from_slice(&res[..nx]);
        }
    }
    for zz in 0..nz {
        for xx in 0..nx {
            for yy in 0..ny {
                line[yy] = d[(zz * ny + yy) * nx + xx];
            }
            edt_line(&line[..ny], spacing[1], &mut res[..ny], &mut v, &mut zb);
            for yy in 0..ny {
                d[(zz * ny + yy) * nx + xx] = res[yy];
            }
        }
    }
    for yy in 0..ny {
        for xx in 0..nx {
            for zz in 0..nz {
                line[zz] = d[(zz * ny + yy) * nx + xx];
            }
            edt_line(&line[..nz], spacing[0], &mut res[..nz], &mut v, &mut zb);
            for zz in 0..nz {
                d[(zz * ny + yy) * nx + xx] = res[zz];
            }
        }
    }
    d
}

/// Nearest-rank 95th percentile of an unsorted sample.
pub fn percentile95(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = (0.95 * values.len() as f64).ceil() as usize;
    values[rank.max(1) - 1]
}

/// Directed surface distances from each surface voxel of `from` to the
/// nearest surface voxel of `to`.
pub fn directed_surface_distances(
    from: &[bool],
    to: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let target = surface_voxels(to, dims);
    let d2 = squared_distance_map(&target, dims, spacing);
    surface_voxels(from, dims).into_iter().map(|i| d2[i].sqrt()).collect()
}

pub fn hd95(pred: &[bool], reference: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    check_len(pred, reference)?;
    if pred.len() != dims.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!("{} voxels for grid {dims:?}", pred.len())));
    }
    let any_p = pred.iter().any(|&b| b);
    let any_r = reference.iter().any(|&b| b);
    match (any_p, any_r) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok([0, 1, 2].map(|a| dims[a] as f64 * spacing[a]).iter().map(|e| e * e).sum::<f64>().sqrt())
        }
        _ => {}
    }
    let forward = percentile95(directed_surface_distances(pred, reference, dims, spacing));
    let backward = percentile95(directed_surface_distances(reference, pred, dims, spacing));
    Ok(forward.max(backward))
}

/// Foreground mask of a single-channel volume (`value > 0.5`).
pub fn binarize(v: &Volume) -> Vec<bool> {
    v.channel(0).iter().map(|&x| x > 0.5).collect()
}

/// Dice and HD95 for one prediction/reference pair on the same grid.
pub fn score(pred: &Volume, reference: &Volume) -> Result<SegScore> {
    if pred.dims() != reference.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", pred.dims(), reference.dims())));
    }
    let p = binarize(pred);
    let r = binarize(reference);
    Ok(SegScore {
        dice: dice(&p, &r)?,
        hd95_mm: hd95(&p, &r, reference.dims(), reference.spacing())?,
        n_pred: p.iter().filter(|&&b| b).count(),
        n_ref: r.iter().filter(|&&b| b).count(),
    })
}
