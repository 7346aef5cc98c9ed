//! Direct 3-D cross-correlation kernels on `[B, C, Z, Y, X]` buffers.
//!
//! Work is split over whole output planes (one `(batch, channel)` pair per
//! task), so every output value is accumulated in a fixed order regardless of
//! how many threads run.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [batch, cin, z, y, xx] = x.dims5()?;
        let [cout, wcin, kz, ky, kx] = w.dims5()?;
        if wcin != cin || kz != ky || ky != kx {
            return Err(Error::ShapeMismatch(format!("conv input {:?} with kernel {:?}", x.shape(), w.shape())));
        }
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch(format!("bias {:?} for {cout} output channels", b.shape())));
        }
        if stride == 0 {
            return Err(Error::BadShape("stride 0".into()));
        }
        let k = kz;
        let in_dims = [z, y, xx];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            if in_dims[a] + 2 * pad < k {
                return Err(Error::ShapeMismatch(format!("kernel {k} exceeds padded extent {}", in_dims[a] + 2 * pad)));
            }
            out_dims[a] = (in_dims[a] + 2 * pad - k) / stride + 1;
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            k,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let [z, y, x] = self.out_dims;
        vec![self.batch, self.cout, z, y, x]
    }

    fn in_plane(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Output index range `[o0, o1)` along `axis` whose input index
    /// `stride * o + kk - pad` stays inside the volume.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (s, p, n) = (self.stride as isize, self.pad as isize, self.in_dims[axis] as isize);
        let kk = kk as isize;
        let lo = if kk >= p { 0 } else { (p - kk + s - 1) / s };
        let hi_in = n - 1 + p - kk;
        let hi = if hi_in < 0 { 0 } else { hi_in / s + 1 };
        let hi = hi.min(self.out_dims[axis] as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn ranges(&self) -> [Vec<(usize, usize)>; 3] {
        [0, 1, 2].map(|a| (0..self.k).map(|kk| self.valid(a, kk)).collect())
    }

    fn in_index(&self, o: usize, kk: usize) -> usize {
        self.stride * o + kk - self.pad
    }
}

/// Forward pass: `out[b, co] = bias[co] + Σ_ci Σ_k w[co, ci, k] · x[b, ci, s·o + k − p]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, b, stride, pad)?;
    if stride == 1 && pad < g.k {
        return Tensor::new(g.out_shape(), flat::forward(&g, x.data(), w.data(), b.data()));
    }
    let (ip, op) = (g.in_plane(), g.out_plane());
    let [_, iy, ix] = g.in_dims;
    let [_, oy, ox] = g.out_dims;
    let k3 = g.k * g.k * g.k;
    let r = g.ranges();
    let mut out = vec![0.0; g.batch * g.cout * op];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    out.par_chunks_mut(op).enumerate().for_each(|(bc, plane)| {
        let (bi, co) = (bc / g.cout, bc % g.cout);
        plane.iter_mut().for_each(|v| *v = bd[co]);
        for ci in 0..g.cin {
            let src = &xd[(bi * g.cin + ci) * ip..(bi * g.cin + ci + 1) * ip];
            let wk = &wd[(co * g.cin + ci) * k3..(co * g.cin + ci + 1) * k3];
            for kz in 0..g.k {
                for z in r[0][kz].0..r[0][kz].1 {
                    let sz = g.in_index(z, kz);
                    for ky in 0..g.k {
                        for y in r[1][ky].0..r[1][ky].1 {
                            let sy = g.in_index(y, ky);
                            let src_row = &src[(sz * iy + sy) * ix..(sz * iy + sy + 1) * ix];
                            let dst_row = &mut plane[(z * oy + y) * ox..(z * oy + y + 1) * ox];
                            for kx in 0..g.k {
                                let wv = wk[(kz * g.k + ky) * g.k + kx];
                                let (x0, x1) = r[2][kx];
                                if x0 >= x1 {
                                    continue;
                                }
                                let s0 = g.in_index(x0, kx);
                                if g.stride == 1 {
                                    let n = x1 - x0;
                                    for (d, s) in dst_row[x0..x1].iter_mut().zip(&src_row[s0..s0 + n]) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for (j, d) in dst_row[x0..x1].iter_mut().enumerate() {
                                        *d += wv * src_row[s0 + j * g.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(g.out_shape(), out)
}

/// Gradient with respect to the input.
pub fn conv3d_backward_input(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, dout: &Tensor) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, b, stride, pad)?;
    if dout.shape() != g.out_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!("upstream gradient {:?}", dout.shape())));
    }
    if stride == 1 && pad < g.k {
        return Tensor::new(x.shape().to_vec(), flat::backward_input(&g, w.data(), dout.data()));
    }
    let (ip, op) = (g.in_plane(), g.out_plane());
    let [_, iy, ix] = g.in_dims;
    let [_, oy, ox] = g.out_dims;
    let k3 = g.k * g.k * g.k;
    let r = g.ranges();
    let mut dx = vec![0.0; g.batch * g.cin * ip];
    let (dd, wd) = (dout.data(), w.data());
    dx.par_chunks_mut(ip).enumerate().for_each(|(bc, plane)| {
        let (bi, ci) = (bc / g.cin, bc % g.cin);
        for co in 0..g.cout {
            let up = &dd[(bi * g.cout + co) * op..(bi * g.cout + co + 1) * op];
            let wk = &wd[(co * g.cin + ci) * k3..(co * g.cin + ci + 1) * k3];
            for kz in 0..g.k {
                for z in r[0][kz].0..r[0][kz].1 {
                    let sz = g.in_index(z, kz);
                    for ky in 0..g.k {
                        for y in r[1][ky].0..r[1][ky].1 {
                            let sy = g.in_index(y, ky);
                            let up_row = &up[(z * oy + y) * ox..(z * oy + y + 1) * ox];
                            let dst_row = &mut plane[(sz * iy + sy) * ix..(sz * iy + sy + 1) * ix];
                            for kx in 0..g.k {
                                let wv = wk[(kz * g.k + ky) * g.k + kx];
                                let (x0, x1) = r[2][kx];
                                if x0 >= x1 {
                                    continue;
                                }
                                let s0 = g.in_index(x0, kx);
                                if g.stride == 1 {
                                    let n = x1 - x0;
                                    for (d, u) in dst_row[s0..s0 + n].iter_mut().zip(&up_row[x0..x1]) {
                                        *d += wv * u;
                                    }
                                } else {
                                    for (j, u) in up_row[x0..x1].iter().enumerate() {
                                        dst_row[s0 + j * g.stride] += wv * u;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x.shape().to_vec(), dx)
}

/// Gradients with respect to the kernel and the bias.
pub fn conv3d_backward_params(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(x, w, b, stride, pad)?;
    if dout.shape() != g.out_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!("upstream gradient {:?}", dout.shape())));
    }
    if stride == 1 && pad < g.k {
        let (dw, db) = flat::backward_params(&g, x.data(), dout.data());
        return Ok((Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(vec![g.cout], db)?));
    }
    let (ip, op) = (g.in_plane(), g.out_plane());
    let [_, iy, ix] = g.in_dims;
    let [_, oy, ox] = g.out_dims;
    let k3 = g.k * g.k * g.k;
    let r = g.ranges();
    let (xd, dd) = (x.data(), dout.data());
    let per_co: Vec<(Vec<f64>, f64)> = (0..g.cout)
        .into_par_iter()
        .map(|co| {
            let mut dw = vec![0.0; g.cin * k3];
            let mut db = 0.0;
            for bi in 0..g.batch {
                let up = &dd[(bi * g.cout + co) * op..(bi * g.cout + co + 1) * op];
                db += crate::reduce::pairwise_sum(up);
                for ci in 0..g.cin {
                    let src = &xd[(bi * g.cin + ci) * ip..(bi * g.cin + ci + 1) * ip];
                    let dwk = &mut dw[ci * k3..(ci + 1) * k3];
                    for kz in 0..g.k {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let (x0, x1) = r[2][kx];
                                if x0 >= x1 {
                                    continue;
                                }
                                let s0 = g.in_index(x0, kx);
                                let mut acc = 0.0;
                                for z in r[0][kz].0..r[0][kz].1 {
                                    let sz = g.in_index(z, kz);
                                    for y in r[1][ky].0..r[1][ky].1 {
                                        let sy = g.in_index(y, ky);
                                        let up_row = &up[(z * oy + y) * ox..(z * oy + y + 1) * ox];
                                        let src_row = &src[(sz * iy + sy) * ix..(sz * iy + sy + 1) * ix];
                                        if g.stride == 1 {
                                            let n = x1 - x0;
                                            acc += up_row[x0..x1]
                                                .iter()
                                                .zip(&src_row[s0..s0 + n])
                                                .map(|(u, s)| u * s)
                                                .sum::<f64>();
                                        } else {
                                            for (j, u) in up_row[x0..x1].iter().enumerate() {
                                                acc += u * src_row[s0 + j * g.stride];
                                            }
                                        }
                                    }
                                }
                                dwk[(kz * g.k + ky) * g.k + kx] += acc;
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = Vec::with_capacity(w.len());
    let mut db = Vec::with_capacity(g.cout);
    for (w_co, b_co) in per_co {
        dw.extend(w_co);
        db.push(b_co);
    }
    Ok((Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(vec![g.cout], db)?))
}

/// Stride-1 kernels on a zero-padded copy of the input.
///
/// With the input padded to `(Zp, Yp, Xp)`, output voxel `(z, y, x)` lives at
/// flat position `i = z·Yp·Xp + y·Xp + x` and every tap `k` reads the padded
/// input at `i + off(k)`. Evaluating all `i` in `[0, L)` (including positions
/// with `y ≥ OY` or `x ≥ OX`, which are discarded) turns each tap into one
/// contiguous axpy or dot product.
mod flat {
    use super::*;

    const CHUNK: usize = 512;

    struct Layout {
        pdims: [usize; 3],
        plane: usize,
        span: usize,
        offsets: Vec<usize>,
    }

    fn layout(in_dims: [usize; 3], pad: usize, k: usize, out_dims: [usize; 3]) -> Layout {
        let pdims = in_dims.map(|n| n + 2 * pad);
        let (py, px) = (pdims[1] * pdims[2], pdims[2]);
        let mut offsets = Vec::with_capacity(k * k * k);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    offsets.push(kz * py + ky * px + kx);
                }
            }
        }
        let [oz, oy, ox] = out_dims;
        Layout {
            pdims,
            plane: pdims.iter().product(),
            span: (oz - 1) * py + (oy - 1) * px + ox,
            offsets,
        }
    }

    /// Copies `[N, Z, Y, X]` planes into zero-padded planes.
    fn pad_planes(src: &[f64], n: usize, dims: [usize; 3], pad: usize) -> Vec<f64> {
        let [z, y, x] = dims;
        let [pz, py, px] = dims.map(|d| d + 2 * pad);
        let mut out = vec![0.0; n * pz * py * px];
        for c in 0..n {
            for k in 0..z {
                for j in 0..y {
                    let s = ((c * z + k) * y + j) * x;
                    let d = ((c * pz + k + pad) * py + j + pad) * px + pad;
                    out[d..d + x].copy_from_slice(&src[s..s + x]);
                }
            }
        }
        out
    }

    /// Gathers the valid `(z, y, x)` positions of a flat accumulator.
    fn extract(acc: &[f64], l: &Layout, out_dims: [usize; 3], dst: &mut [f64]) {
        let [oz, oy, ox] = out_dims;
        let (py, px) = (l.pdims[1] * l.pdims[2], l.pdims[2]);
        for z in 0..oz {
            for y in 0..oy {
                let a = z * py + y * px;
                dst[(z * oy + y) * ox..(z * oy + y + 1) * ox].copy_from_slice(&acc[a..a + ox]);
            }
        }
    }

    /// `out[b, co] = bias + Σ_ci Σ_k w · xp[b, ci] shifted by off(k)`.
    fn correlate(
        xp: &[f64],
        l: &Layout,
        batch: usize,
        cin: usize,
        cout: usize,
        w: &[f64],
        bias: Option<&[f64]>,
        out_dims: [usize; 3],
    ) -> Vec<f64> {
        let taps = l.offsets.len();
        let op: usize = out_dims.iter().product();
        let mut out = vec![0.0; batch * cout * op];
        out.par_chunks_mut(op).enumerate().for_each_init(
            || vec![0.0; l.span],
            |acc, (bc, dst)| {
                let (bi, co) = (bc / cout, bc % cout);
                acc.iter_mut().for_each(|v| *v = bias.map_or(0.0, |b| b[co]));
                for start in (0..l.span).step_by(CHUNK) {
                    let end = (start + CHUNK).min(l.span);
                    let a = &mut acc[start..end];
                    for ci in 0..cin {
                        let src = &xp[(bi * cin + ci) * l.plane..(bi * cin + ci + 1) * l.plane];
                        let wk = &w[(co * cin + ci) * taps..(co * cin + ci + 1) * taps];
                        if taps == 27 {
                            // one pass per kz plane covering its nine taps
                            let n = end - start;
                            for t in (0..taps).step_by(9) {
                                let o = &l.offsets[t..t + 9];
                                let wv = &wk[t..t + 9];
                                let sl = |j: usize| &src[start + o[j]..start + o[j] + n];
                                let (s0, s1, s2) = (sl(0), sl(1), sl(2));
                                let (s3, s4, s5) = (sl(3), sl(4), sl(5));
                                let (s6, s7, s8) = (sl(6), sl(7), sl(8));
                                for i in 0..n {
                                    a[i] += wv[0] * s0[i]
                                        + wv[1] * s1[i]
                                        + wv[2] * s2[i]
                                        + wv[3] * s3[i]
                                        + wv[4] * s4[i]
                                        + wv[5] * s5[i]
                                        + wv[6] * s6[i]
                                        + wv[7] * s7[i]
                                        + wv[8] * s8[i];
                                }
                            }
                        } else {
                            for (t, &off) in l.offsets.iter().enumerate() {
                                let wv = wk[t];
                                let s = &src[start + off..end + off];
                                for (d, v) in a.iter_mut().zip(s) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                }
                extract(acc, l, out_dims, dst);
            },
        );
        out
    }

    pub(super) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let l = layout(g.in_dims, g.pad, g.k, g.out_dims);
        let xp = pad_planes(x, g.batch * g.cin, g.in_dims, g.pad);
        correlate(&xp, &l, g.batch, g.cin, g.cout, w, Some(b), g.out_dims)
    }

    /// Full correlation of the upstream gradient with the flipped,
    /// channel-transposed kernel.
    pub(super) fn backward_input(g: &ConvGeom, w: &[f64], dout: &[f64]) -> Vec<f64> {
        let taps = g.k * g.k * g.k;
        let mut wt = vec![0.0; w.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for t in 0..taps {
                    wt[(ci * g.cout + co) * taps + t] = w[(co * g.cin + ci) * taps + taps - 1 - t];
                }
            }
        }
        let pad = g.k - 1 - g.pad;
        let l = layout(g.out_dims, pad, g.k, g.in_dims);
        let dp = pad_planes(dout, g.batch * g.cout, g.out_dims, pad);
        correlate(&dp, &l, g.batch, g.cout, g.cin, &wt, None, g.in_dims)
    }

    pub(super) fn backward_params(g: &ConvGeom, x: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = layout(g.in_dims, g.pad, g.k, g.out_dims);
        let taps = l.offsets.len();
        let xp = pad_planes(x, g.batch * g.cin, g.in_dims, g.pad);
        let op: usize = g.out_dims.iter().product();
        let [_, oy, ox] = g.out_dims;
        let (py, px) = (l.pdims[1] * l.pdims[2], l.pdims[2]);
        // upstream gradient scattered onto the flat grid, zero at discarded positions
        let mut dflat = vec![0.0; g.batch * g.cout * l.span];
        for bc in 0..g.batch * g.cout {
            let src = &dout[bc * op..(bc + 1) * op];
            let dst = &mut dflat[bc * l.span..(bc + 1) * l.span];
            for z in 0..g.out_dims[0] {
                for y in 0..oy {
                    let a = z * py + y * px;
                    dst[a..a + ox].copy_from_slice(&src[(z * oy + y) * ox..(z * oy + y + 1) * ox]);
                }
            }
        }
        let per_co: Vec<(Vec<f64>, f64)> = (0..g.cout)
            .into_par_iter()
            .map(|co| {
                let mut dw = vec![0.0; g.cin * taps];
                let mut db = 0.0;
                for bi in 0..g.batch {
                    db += crate::reduce::pairwise_sum(&dout[(bi * g.cout + co) * op..(bi * g.cout + co + 1) * op]);
                    let d = &dflat[(bi * g.cout + co) * l.span..(bi * g.cout + co + 1) * l.span];
                    for ci in 0..g.cin {
                        let src = &xp[(bi * g.cin + ci) * l.plane..(bi * g.cin + ci + 1) * l.plane];
                        let dwk = &mut dw[ci * taps..(ci + 1) * taps];
                        for start in (0..l.span).step_by(CHUNK) {
                            let end = (start + CHUNK).min(l.span);
                            let dc = &d[start..end];
                            let n = end - start;
                            let mut t = 0;
                            while t + 3 <= taps {
                                // three taps share each load of the upstream gradient
                                let o = &l.offsets[t..t + 3];
                                let s0 = &src[start + o[0]..start + o[0] + n];
                                let s1 = &src[start + o[1]..start + o[1] + n];
                                let s2 = &src[start + o[2]..start + o[2] + n];
                                let mut acc = [[0.0; 4]; 3];
                                let m = n - n % 4;
                                for i in (0..m).step_by(4) {
                                    for j in 0..4 {
                                        let g = dc[i + j];
                                        acc[0][j] += g * s0[i + j];
                                        acc[1][j] += g * s1[i + j];
                                        acc[2][j] += g * s2[i + j];
                                    }
                                }
                                for (q, sq) in [s0, s1, s2].iter().enumerate() {
                                    let tail: f64 = (m..n).map(|i| dc[i] * sq[i]).sum();
                                    let a = acc[q];
                                    dwk[t + q] += (a[0] + a[1]) + (a[2] + a[3]) + tail;
                                }
                                t += 3;
                            }
                            for (tt, &off) in l.offsets.iter().enumerate().skip(t) {
                                let s = &src[start + off..start + off + n];
                                dwk[tt] += crate::reduce::pairwise_sum_by(n, &|i| dc[i] * s[i]);
                            }
                        }
                    }
                }
                (dw, db)
            })
            .collect();
        let mut dw = Vec::with_capacity(g.cout * g.cin * taps);
        let mut db = Vec::with_capacity(g.cout);
        for (a, b) in per_co {
            dw.extend(a);
            db.push(b);
        }
        (dw, db)
    }
}
