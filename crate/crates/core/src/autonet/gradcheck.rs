//! Central finite-difference verification of graph gradients.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::seeded;

use super::graph::{Graph, Var};
use super::unet::ParamSet;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that gradients which vanish up to rounding do not divide by ~0.
pub const RELATIVE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Worst relative error per parameter tensor that was sampled.
    pub per_tensor: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares backward-pass gradients of `loss_fn` with central differences
/// `(L(θ+h) − L(θ−h)) / 2h` on `samples` scalar entries drawn uniformly
/// (without replacement) from all of `params`.
///
/// `loss_fn` receives a fresh graph and one bound variable per tensor of
/// `params`, and must return a scalar node.
pub fn grad_check<F>(params: &ParamSet, loss_fn: F, samples: usize, h: f64, tol: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let pv = params.bind(&mut g, |_| true);
    let loss = loss_fn(&mut g, &pv)?;
    let grads = g.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let pv = p.bind(&mut g, |_| false);
        let l = loss_fn(&mut g, &pv)?;
        Ok(g.value(l).item())
    };

    let offsets: Vec<usize> = params
        .tensors()
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total = params.count();
    let mut rng = seeded(seed, 0);
    let mut picks = index::sample(&mut rng, total, samples.min(total)).into_vec();
    picks.sort_unstable();

    let mut out = Vec::with_capacity(picks.len());
    let mut per_tensor = BTreeMap::new();
    let mut work = params.clone();
    for flat in picks {
        let ti = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[ti];
        let orig = work.tensors()[ti].data()[idx];
        work.tensors_mut()[ti].data_mut()[idx] = orig + h;
        let up = eval(&work)?;
        work.tensors_mut()[ti].data_mut()[idx] = orig - h;
        let down = eval(&work)?;
        work.tensors_mut()[ti].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(pv[ti]).data()[idx];
        let rel = relative_error(analytic, numeric);
        let name = params.names()[ti].clone();
        let worst = per_tensor.entry(name.clone()).or_insert(0.0f64);
        *worst = worst.max(rel);
        out.push(GradSample {
            name,
            index: idx,
            analytic,
            numeric,
            rel_error: rel,
        });
    }
    let max_rel_error = out.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        samples: out,
        per_tensor,
        max_rel_error,
        tolerance: tol,
        pass: max_rel_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonet::unet::{build_unet, UNetConfig};
    use crate::masking::{expand_mask, make_grid, sample_mask};
    use crate::tensor::Tensor;

    fn crop(seed: u64) -> Tensor {
        let mut rng = seeded(seed, 0);
        let n = 2 * 8 * 8 * 8;
        let normal = rand_distr::StandardNormal;
        use rand::Rng;
        Tensor::new(vec![1, 2, 8, 8, 8], (0..n).map(|_| rng.sample::<f64, _>(normal)).collect()).unwrap()
    }

    #[test]
    fn default_net_recon_loss_passes() {
        let net = build_unet(&UNetConfig::default()).unwrap();
        let x = crop(3);
        let grid = make_grid([8, 8, 8], [4, 4, 4]).unwrap();
        let m = expand_mask(&sample_mask(&grid, 0.5, 4).unwrap(), &grid).unwrap();
        let report = grad_check(
            net.params(),
            |g, pv| {
                let xv = g.constant(x.clone());
                let xm = g.mask_keep(xv, &m)?;
                let y = net.forward_graph(g, pv, xm)?;
                Ok(g.recon_loss(y, &x, &m, 0.2, 1e-8)?.0)
            },
            20,
            1e-5,
            1e-4,
            7,
        )
        .unwrap();
        assert_eq!(report.samples.len(), 20);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn corrupted_conv_backward_fails() {
        let net = build_unet(&UNetConfig::default()).unwrap();
        let x = crop(5);
        let report = grad_check(
            net.params(),
            |g, pv| {
                g.corrupt_conv_backward();
                let xv = g.constant(x.clone());
                let y = net.forward_graph(g, pv, xv)?;
                let s = g.sum(y);
                Ok(s)
            },
            40,
            1e-5,
            1e-4,
            8,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn linear_head_is_exact() {
        let net = build_unet(&UNetConfig::default()).unwrap();
        let mut head = ParamSet::new();
        head.push("head.w", net.params().get("head.w").unwrap().clone());
        head.push("head.b", net.params().get("head.b").unwrap().clone());
        let feats = Tensor::new(vec![1, 8, 2, 2, 2], (0..64).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let report = grad_check(
            &head,
            |g, pv| {
                let f = g.constant(feats.clone());
                let y = g.conv3d(f, pv[0], pv[1], 1, 0)?;
                Ok(g.sum(y))
            },
            18,
            1e-5,
            1e-9,
            1,
        )
        .unwrap();
        assert!(report.pass, "{}", report.max_rel_error);
    }
}
