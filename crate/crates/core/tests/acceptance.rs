//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 9`.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use petmae::autonet::{build_unet, grad_check, Fusion, Graph, ParamSet, UNet, UNetConfig};
use petmae::harmonize::{harmonize_case, HarmonizeOptions};
use petmae::infer::{evaluate_case, plan_windows, sliding_infer, Identity};
use petmae::losses::recon_loss;
use petmae::masking::{expand_mask, impute_token, impute_zero, make_grid, sample_mask, sample_mask_per_channel};
use petmae::metrics::{dice, hd95};
use petmae::nifti::{encode_nifti, parse_header, read_nifti, write_nifti};
use petmae::phantom::{generate_phantom, generate_phantoms, PhantomConfig};
use petmae::register::{apply_rigid, register_detailed, MiConfig, RigidTransform};
use petmae::rng::seeded;
use petmae::tensor::Tensor;
use petmae::trainer::{
    finetune, linear_probe, masked_reconstruction, pretrain, smoothed, validation_split, Checkpoint, FreezeSpec,
    TrainConfig, TrainOutcome,
};
use petmae::volume::{resample_trilinear, zscore_normalize, ChannelLabel, Volume};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn noise_volume(dims: [usize; 3], spacing: [f64; 3], channels: usize, seed: u64) -> Volume {
    let mut rng = seeded(seed, 77);
    let n = channels * dims.iter().product::<usize>();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Volume::new(data, dims, spacing, [0.0; 3], vec![ChannelLabel::Generic; channels]).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed, 78);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

#[derive(Deserialize)]
struct CorpusSpec {
    seed: u64,
    n: usize,
}

#[derive(Deserialize)]
struct Corpora {
    benchmark: CorpusSpec,
    study: CorpusSpec,
    phantom: PhantomConfig,
}

fn corpora() -> Corpora {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/phantom_corpora.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Harmonized two-channel images and labels of a fixture corpus.
fn harmonized(cfg: &PhantomConfig, spec: &CorpusSpec) -> (Vec<Volume>, Vec<Volume>) {
    let opts = HarmonizeOptions::default();
    generate_phantoms(cfg, spec.seed, spec.n)
        .unwrap()
        .iter()
        .map(|p| {
            let h = harmonize_case(&p.ct, &p.pet, Some(&p.label), &opts).unwrap();
            (h.image, h.label.unwrap())
        })
        .unzip()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    const TOL: f64 = 1e-12;
    // normalization
    let v = Volume::single(vec![0.0, 2.0], [1, 1, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
    check(zscore_normalize(&v).data() == [-1.0, 1.0], "z-score of {0, 2}")?;
    let c = Volume::single(vec![7.5; 8], [2, 2, 2], [1.0; 3], ChannelLabel::Ct).unwrap();
    check(zscore_normalize(&c).data().iter().all(|&x| x == 0.0), "constant volume")?;
    let r = noise_volume([5, 6, 7], [1.0; 3], 1, 1);
    let z = zscore_normalize(&r);
    let n = z.voxels() as f64;
    let mean = z.data().iter().sum::<f64>() / n;
    let sd = (z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    check(mean.abs() < TOL && rel(sd, 1.0) < TOL, format!("normalized mean {mean}, sd {sd}"))?;

    // zero-mean imputation
    let x = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
    let m = Tensor::new(vec![4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    check(impute_zero(&x, &m).unwrap().data() == [1.0, 0.0, 0.0, 4.0], "hand-evaluated imputation")?;
    check(impute_zero(&x, &Tensor::zeros(&[4])).unwrap() == x, "empty mask")?;
    check(impute_zero(&x, &Tensor::full(&[4], 1.0)).unwrap().data().iter().all(|&v| v == 0.0), "full mask")?;
    let xt = random_tensor(&[1, 2, 4, 4, 4], 2);
    let grid = make_grid([4, 4, 4], [2, 2, 2]).unwrap();
    let mt = expand_mask(&sample_mask(&grid, 0.5, 3).unwrap(), &grid).unwrap();
    check(
        impute_token(&xt, &mt, &[0.0, 0.0]).unwrap() == impute_zero(&xt, &mt).unwrap(),
        "zero tokens reduce to zero imputation",
    )?;

    // weighted reconstruction loss
    let l = recon_loss(&[0.0, 0.0, 3.0, 5.0], &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 0.0, 0.0], 0.2, 0.0).unwrap();
    check(
        rel(l.masked_term, 2.5) < TOL && rel(l.visible_term, 0.5) < TOL && rel(l.total, 2.6) < TOL,
        format!("hand case gave {l:?}"),
    )?;
    let pred = random_tensor(&[64], 4);
    let target = random_tensor(&[64], 5);
    let mse = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0;
    let all = recon_loss(pred.data(), target.data(), &[1.0; 64], 0.2, 1e-8).unwrap();
    check(rel(all.total, mse * 64.0 / (64.0 + 1e-8)) < TOL && all.visible_term == 0.0, "all-ones mask is plain MSE")?;
    let none = recon_loss(pred.data(), target.data(), &[0.0; 64], 0.2, 0.0).unwrap();
    check(rel(none.total, 0.2 * mse) < TOL && none.masked_term == 0.0, "empty mask is weighted MSE")?;
    let mask: Vec<f64> = (0..64).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let (mut sm, mut sv, mut nm, mut nv) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..64 {
        let e2 = (pred.data()[i] - target.data()[i]).powi(2);
        if mask[i] == 1.0 {
            sm += e2;
            nm += 1.0;
        } else {
            sv += e2;
            nv += 1.0;
        }
    }
    let oracle = sm / (nm + 1e-8) + 0.2 * sv / (nv + 1e-8);
    let got = recon_loss(pred.data(), target.data(), &mask, 0.2, 1e-8).unwrap().total;
    check(rel(got, oracle) < TOL, format!("random case {got} vs {oracle}"))?;
    Ok(format!("hand loss {:.12}, all relative errors < {TOL:e}", l.total))
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn params(items: &[(&str, Tensor)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in items {
        p.push(*n, t.clone());
    }
    p
}

/// Keeps entries away from the ReLU kink so central differences are valid.
fn off_kink(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

fn criterion_2() -> Outcome {
    let shape = [1, 2, 4, 4, 4];
    let grid = make_grid([4, 4, 4], [2, 2, 2]).unwrap();
    let mask = expand_mask(&sample_mask(&grid, 0.5, 9).unwrap(), &grid).unwrap();
    let target = random_tensor(&shape, 10);
    let up_target = random_tensor(&[1, 2, 8, 8, 8], 11);
    let up_mask = Tensor::zeros(&[1, 2, 8, 8, 8]);
    let t3 = random_tensor(&[1, 3, 4, 4, 4], 12);
    let m3 = Tensor::zeros(&[1, 3, 4, 4, 4]);
    let labels = Tensor::new(
        vec![1, 1, 4, 4, 4],
        (0..64).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect(),
    )
    .unwrap();
    let x = random_tensor(&shape, 13);
    let y = random_tensor(&shape, 14);
    let w = random_tensor(&[3, 2, 3, 3, 3], 15);
    let w2 = random_tensor(&[2, 2, 2, 2, 2], 16);
    let b3 = random_tensor(&[3], 17);
    let b2 = random_tensor(&[2], 18);
    let tok = random_tensor(&[2], 19);
    let loss = |g: &mut Graph, v, t: &Tensor, m: &Tensor| g.recon_loss(v, t, m, 0.2, 1e-8).map(|r| r.0);

    type Case<'a> = (&'a str, ParamSet, Box<dyn Fn(&mut Graph, &[petmae::autonet::Var]) -> petmae::Result<petmae::autonet::Var> + 'a>);
    let cases: Vec<Case> = vec![
        (
            "conv3d pad 1",
            params(&[("x", x.clone()), ("w", w.clone()), ("b", b3.clone())]),
            Box::new(|g, p| {
                let h = g.conv3d(p[0], p[1], p[2], 1, 1)?;
                loss(g, h, &t3, &m3)
            }),
        ),
        (
            "conv3d stride 2",
            params(&[("x", x.clone()), ("w", w2.clone()), ("b", b2.clone())]),
            Box::new(|g, p| {
                let h = g.conv3d(p[0], p[1], p[2], 2, 0)?;
                let t = Tensor::new(vec![1, 2, 2, 2, 2], target.data()[..16].to_vec())?;
                loss(g, h, &t, &Tensor::zeros(&[1, 2, 2, 2, 2]))
            }),
        ),
        (
            "relu",
            params(&[("x", off_kink(x.clone()))]),
            Box::new(|g, p| {
                let h = g.relu(p[0]);
                loss(g, h, &target, &mask)
            }),
        ),
        (
            "upsample2x",
            params(&[("x", x.clone())]),
            Box::new(|g, p| {
                let h = g.upsample2x(p[0])?;
                loss(g, h, &up_target, &up_mask)
            }),
        ),
        (
            "concat/slice",
            params(&[("x", x.clone()), ("y", y.clone())]),
            Box::new(|g, p| {
                let c = g.concat_c(p[0], p[1])?;
                let s = g.slice_c(c, 1, 2)?;
                loss(g, s, &target, &mask)
            }),
        ),
        (
            "add",
            params(&[("x", x.clone()), ("y", y.clone())]),
            Box::new(|g, p| {
                let h = g.add(p[0], p[1])?;
                loss(g, h, &target, &mask)
            }),
        ),
        (
            "mask_keep",
            params(&[("x", x.clone())]),
            Box::new(|g, p| {
                let h = g.mask_keep(p[0], &mask)?;
                loss(g, h, &target, &Tensor::zeros(&shape))
            }),
        ),
        (
            "impute_token",
            params(&[("x", x.clone()), ("tok", tok.clone())]),
            Box::new(|g, p| {
                let h = g.impute_token(p[0], p[1], &mask)?;
                loss(g, h, &target, &Tensor::zeros(&shape))
            }),
        ),
        (
            "recon_loss",
            params(&[("x", x.clone())]),
            Box::new(|g, p| loss(g, p[0], &target, &mask)),
        ),
        (
            "dice_ce",
            params(&[("x", x.clone())]),
            Box::new(|g, p| g.dice_ce(p[0], &labels).map(|r| r.0)),
        ),
        (
            "sum",
            params(&[("x", x.clone())]),
            Box::new(|g, p| {
                let h = g.mask_keep(p[0], &mask)?;
                let r = g.relu(h);
                let s = g.sum(r);
                let sq = g.add(s, s)?;
                Ok(sq)
            }),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, p, f) in &cases {
        let n = p.count().min(40);
        let r = grad_check(p, f, n, FD_STEP, FD_TOL, 1).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(r.max_rel_error);
        check(r.pass, format!("{name}: max relative error {:e}", r.max_rel_error))?;
    }

    let net = build_unet(&UNetConfig::default()).unwrap();
    let crop = random_tensor(&[1, 2, 8, 8, 8], 20);
    let g8 = make_grid([8, 8, 8], [4, 4, 4]).unwrap();
    let m8 = expand_mask(&sample_mask(&g8, 0.5, 21).unwrap(), &g8).unwrap();
    let masked = impute_zero(&crop, &m8).unwrap();
    let r = grad_check(
        net.params(),
        |g, pv| {
            let xv = g.constant(masked.clone());
            let y = net.forward_graph(g, pv, xv)?;
            Ok(g.recon_loss(y, &crop, &m8, 0.2, 1e-8)?.0)
        },
        32,
        FD_STEP,
        FD_TOL,
        22,
    )
    .unwrap();
    worst = worst.max(r.max_rel_error);
    check(r.pass, format!("recon_loss(forward): max relative error {:e}", r.max_rel_error))?;
    Ok(format!(
        "{} primitives + network ({} samples), worst relative error {worst:.2e} <= {FD_TOL:e}",
        cases.len(),
        r.samples.len()
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    const SEEDS: u64 = 10_000;
    let grid = make_grid([24, 32, 32], [6, 8, 8]).unwrap();
    let p = grid.len();
    check(p == 64, format!("P = {p}"))?;
    let (mut sx, mut sy, mut sxy, mut sxx, mut syy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for seed in 0..SEEDS {
        let m = sample_mask(&grid, 0.5, seed).unwrap();
        check(m.count(0) == 32 && m.count(1) == 32, format!("seed {seed}: counts {} {}", m.count(0), m.count(1)))?;
        for i in 0..p {
            let (a, b) = (m.bits[0][i] as u8 as f64, m.bits[1][i] as u8 as f64);
            sx += a;
            sy += b;
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
            n += 1.0;
        }
    }
    let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
    check(r.abs() <= 0.03, format!("CT/PET correlation {r}"))?;

    let x = random_tensor(&[1, 2, 24, 32, 32], 30);
    let m = expand_mask(&sample_mask(&grid, 0.5, 31).unwrap(), &grid).unwrap();
    let xt = impute_zero(&x, &m).unwrap();
    for i in 0..x.len() {
        let back = xt.data()[i] + x.data()[i] * m.data()[i];
        check(back.to_bits() == x.data()[i].to_bits(), format!("reconstruction identity at {i}"))?;
    }
    Ok(format!("exact 32/64 per channel over {SEEDS} seeds, |r| = {:.4} <= 0.03, identity bitwise", r.abs()))
}

// ---------------------------------------------------------------- 4

/// Independent trilinear sampler: weighted sum over the 8 neighbours.
fn trilinear_oracle(v: &Volume, target: [f64; 3]) -> Vec<f64> {
    let dims = v.dims();
    let sp = v.spacing();
    let out: [usize; 3] = [0, 1, 2].map(|a| ((dims[a] as f64 * sp[a] / target[a]).round() as usize).max(1));
    let mut data = Vec::new();
    for oz in 0..out[0] {
        for oy in 0..out[1] {
            for ox in 0..out[2] {
                let o = [oz, oy, ox];
                let p: [f64; 3] = [0, 1, 2].map(|a| {
                    // physical center of the output voxel, measured from the input's first edge
                    let mm = (o[a] as f64 + 0.5) * target[a];
                    (mm / sp[a] - 0.5).clamp(0.0, (dims[a] - 1) as f64)
                });
                let mut acc = 0.0;
                for z in 0..dims[0] {
                    for y in 0..dims[1] {
                        for x in 0..dims[2] {
                            let wz = (1.0 - (p[0] - z as f64).abs()).max(0.0);
                            let wy = (1.0 - (p[1] - y as f64).abs()).max(0.0);
                            let wx = (1.0 - (p[2] - x as f64).abs()).max(0.0);
                            acc += wz * wy * wx * v.get(0, z, y, x);
                        }
                    }
                }
                data.push(acc);
            }
        }
    }
    data
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded(40, 0);
    // NIfTI round trip of float32-representable data
    for k in 0..10 {
        let dims = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9)];
        let spacing = [rng.random_range(0.5..4.0f32) as f64, rng.random_range(0.5..4.0f32) as f64, rng.random_range(0.5..4.0f32) as f64];
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1000.0..1000.0f32) as f64).collect();
        let v = Volume::new(data, dims, spacing, [1.5, -2.25, 8.0], vec![ChannelLabel::Ct]).unwrap();
        let path = dir.path().join(format!("v{k}.nii"));
        write_nifti(&v, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        check(back.dims() == dims && back.spacing() == spacing && back.origin() == v.origin(), "geometry round trip")?;
        check(
            back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "voxel round trip",
        )?;
        let bytes = encode_nifti(&v).unwrap();
        check(encode_nifti(&back).unwrap() == bytes, "byte round trip")?;
        check(parse_header(&bytes[..348]).unwrap().dims_zyx() == dims, "header dims")?;
    }
    // identity resample
    let v = noise_volume([7, 5, 6], [3.0, 2.0, 2.0], 2, 41);
    let same = resample_trilinear(&v, v.spacing()).unwrap();
    check(same.dims() == v.dims() && same.data() == v.data(), "identity resample")?;
    // brute-force trilinear
    let mut worst: f64 = 0.0;
    for k in 0..30 {
        let dims = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9)];
        let choices = [0.5, 1.0, 1.5, 2.0, 3.0, 0.7, 1.3];
        let pick = |r: &mut petmae::rng::Rng| choices[r.random_range(0..choices.len())];
        let src = [pick(&mut rng), pick(&mut rng), pick(&mut rng)];
        let dst = [pick(&mut rng), pick(&mut rng), pick(&mut rng)];
        let v = noise_volume(dims, src, 1, 100 + k);
        let got = resample_trilinear(&v, dst).unwrap();
        let want = trilinear_oracle(&v, dst);
        check(got.data().len() == want.len(), "resampled grid size")?;
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("trilinear deviates from oracle by {worst:e}"))?;
    // window coverage
    for k in 0..100 {
        let shape = [rng.random_range(1..40), rng.random_range(1..40), rng.random_range(1..40)];
        let window = [rng.random_range(1..16), rng.random_range(1..16), rng.random_range(1..16)];
        let overlap = rng.random_range(0.0..0.95);
        let plan = plan_windows(shape, window, overlap).unwrap();
        let ext = plan.extent;
        let mut hits = vec![0u32; ext.iter().product()];
        for c in &plan.corners {
            check((0..3).all(|a| c[a] + window[a] <= ext[a]), format!("shape {k}: window out of bounds"))?;
            for z in c[0]..c[0] + window[0] {
                for y in c[1]..c[1] + window[1] {
                    for x in c[2]..c[2] + window[2] {
                        hits[(z * ext[1] + y) * ext[2] + x] += 1;
                    }
                }
            }
        }
        check(hits.iter().all(|&h| h > 0), format!("shape {shape:?} window {window:?}: uncovered voxel"))?;
    }
    // identity sliding inference
    for (k, overlap) in [0.0, 0.25, 0.5, 0.75].into_iter().enumerate() {
        let v = noise_volume([13, 17, 11], [3.0, 2.0, 2.0], 2, 200 + k as u64);
        let plan = plan_windows(v.dims(), [6, 8, 5], overlap).unwrap();
        let out = sliding_infer(&Identity, &v, &plan).unwrap();
        check(
            out.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("identity inference at overlap {overlap}"),
        )?;
    }
    Ok(format!("NIfTI bitwise, identity resample exact, trilinear within {worst:.1e}, 100 plans covered, identity inference bitwise"))
}

// ---------------------------------------------------------------- 5

fn oracle_surface(m: &[bool], d: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d[0] as isize || y >= d[1] as isize || x >= d[2] as isize {
            false
        } else {
            m[(z as usize * d[1] + y as usize) * d[2] + x as usize]
        }
    };
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if !at(zi, yi, xi) {
                    continue;
                }
                let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if nbrs.iter().any(|&(a, b, c)| !at(zi + a, yi + b, xi + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn oracle_p95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (0.95 * v.len() as f64).ceil() as usize;
    v[k - 1]
}

fn oracle_hd95(p: &[bool], r: &[bool], d: [usize; 3], s: [f64; 3]) -> f64 {
    let (sp, sr) = (oracle_surface(p, d), oracle_surface(r, d));
    if sp.is_empty() && sr.is_empty() {
        return 0.0;
    }
    if sp.is_empty() || sr.is_empty() {
        return (0..3).map(|a| (d[a] as f64 * s[a]).powi(2)).sum::<f64>().sqrt();
    }
    let directed = |a: &[[usize; 3]], b: &[[usize; 3]]| -> Vec<f64> {
        a.iter()
            .map(|u| {
                b.iter()
                    .map(|v| {
                        let dd: [f64; 3] = [0, 1, 2].map(|k| (u[k] as f64 - v[k] as f64) * s[k]);
                        dd[0] * dd[0] + (dd[1] * dd[1] + dd[2] * dd[2])
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    oracle_p95(directed(&sp, &sr)).max(oracle_p95(directed(&sr, &sp)))
}

fn criterion_5() -> Outcome {
    let mut rng = seeded(50, 0);
    let spacings = [0.5, 1.0, 1.5, 2.0, 3.0];
    for k in 0..50 {
        let d = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9)];
        let s = [0, 1, 2].map(|_| spacings[rng.random_range(0..spacings.len())]);
        let n: usize = d.iter().product();
        let (fp, fr) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
        let p: Vec<bool> = (0..n).map(|_| rng.random_bool(fp)).collect();
        let r: Vec<bool> = (0..n).map(|_| rng.random_bool(fr)).collect();
        let inter = p.iter().zip(&r).filter(|(a, b)| **a && **b).count();
        let (np, nr) = (p.iter().filter(|b| **b).count(), r.iter().filter(|b| **b).count());
        let dice_oracle = if np + nr == 0 { 1.0 } else { 2.0 * inter as f64 / (np + nr) as f64 };
        check(dice(&p, &r).unwrap() == dice_oracle, format!("pair {k}: dice"))?;
        let h = hd95(&p, &r, d, s).unwrap();
        let o = oracle_hd95(&p, &r, d, s);
        check(h == o, format!("pair {k}: hd95 {h} vs oracle {o}"))?;
        for f in [2.0, 0.5, 4.0] {
            let hs = hd95(&p, &r, d, s.map(|x| x * f)).unwrap();
            check(hs == h * f, format!("pair {k}: hd95 not covariant under x{f}: {hs} vs {}", h * f))?;
        }
    }
    Ok("50 random pairs: dice and hd95 equal brute force exactly; spacing covariance exact".into())
}

// ---------------------------------------------------------------- 6

fn registration_phantom(seed: u64, shape: [usize; 3]) -> (Volume, Volume) {
    let cfg = PhantomConfig {
        shape,
        ..PhantomConfig::default()
    };
    let p = generate_phantom(&cfg, seed).unwrap();
    (p.ct, p.pet)
}

fn criterion_6() -> Outcome {
    let shift = [0.0, 3.0, -4.0];
    let (ct, pet) = registration_phantom(60, [48, 64, 64]);
    let moving = apply_rigid(&pet, &RigidTransform::translation(shift[0], shift[1], shift[2]), &pet);
    let reg = register_detailed(&ct, &moving, &MiConfig::default()).unwrap();
    let t = reg.transform.translation;
    let sp = ct.spacing();
    let err: [f64; 3] = [0, 1, 2].map(|a| (t[a] + shift[a]).abs() / sp[a]);
    check(err.iter().all(|&e| e <= 0.5), format!("recovered {t:?}, residual {err:?} voxels"))?;

    let mut rng = seeded(61, 0);
    for trial in 0..20u64 {
        let (ct, pet) = registration_phantom(1000 + trial, [24, 32, 32]);
        let s = [0, 1, 2].map(|_| rng.random_range(-6.0..6.0));
        let moving = apply_rigid(&pet, &RigidTransform::translation(s[0], s[1], s[2]), &pet);
        let r = register_detailed(&ct, &moving, &MiConfig::default()).unwrap();
        check(
            r.mi_after >= r.mi_before,
            format!("trial {trial}: MI {} -> {}", r.mi_before, r.mi_after),
        )?;
    }
    Ok(format!(
        "translation recovered as {:.2?} mm (residual {:.2?} voxels <= 0.5); MI non-decreasing in 20/20 trials",
        t, err
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let c = corpora();
    let (images, _) = harmonized(&c.phantom, &c.benchmark);
    let cfg = TrainConfig {
        epochs: 10_000,
        max_steps: Some(200),
        seed: 7,
        ..TrainConfig::pretrain()
    };
    check(
        cfg.crop_shape == [24, 32, 32] && cfg.patch_shape == [6, 8, 8] && cfg.lr0 == 1e-4 && cfg.lambda == 0.2 && cfg.mask_ratio == 0.5,
        "benchmark settings",
    )?;
    let a = pretrain(&images, &cfg).unwrap();
    let losses: Vec<f64> = a.curve.iter().map(|r| r.loss).collect();
    check(losses.len() == 200, format!("{} steps", losses.len()))?;
    let s = smoothed(&losses, 10);
    let (first, last) = (s[9], s[s.len() - 1]);
    let b = pretrain(&images, &cfg).unwrap();
    let identical = a.checkpoint.params.tensors().iter().zip(b.checkpoint.params.tensors()).all(|(x, y)| {
        x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    }) && a.curve == b.curve;
    check(identical, "rerun differs")?;
    check(last <= 0.5 * first, format!("smoothed loss {first:.4} -> {last:.4} (ratio {:.3})", last / first))?;
    Ok(format!("smoothed loss {first:.4} -> {last:.4} (ratio {:.3} <= 0.5); rerun bit-identical", last / first))
}

// ---------------------------------------------------------------- 8

const REPS: u64 = 5;
const WINS_NEEDED: usize = 4;
const WINDOW: [usize; 3] = [24, 32, 32];
const PRETRAIN_STEPS: usize = 200;
const PRETRAIN_LR: f64 = 1e-3;
const PROBE_STEPS: usize = 2000;
const FINETUNE_STEPS: usize = 300;
const FINETUNE_LR: f64 = 1e-4;

fn mean_dice(ck: &Checkpoint, images: &[Volume], labels: &[Volume]) -> f64 {
    let net = ck.network().unwrap();
    images
        .iter()
        .zip(labels)
        .map(|(v, l)| evaluate_case(&net, v, l, WINDOW, 0.5).unwrap().dice)
        .sum::<f64>()
        / images.len() as f64
}

fn pet_only_recovery(net: &UNet, images: &[Volume], seed: u64) -> f64 {
    let grid = make_grid(WINDOW, [6, 8, 8]).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in images.iter().enumerate() {
        let s = seed * 1000 + i as u64;
        let crop = petmae::volume::random_crop(v, WINDOW, &mut seeded(s, 99)).unwrap();
        let m = expand_mask(&sample_mask_per_channel(&grid, [0.0, 0.5], s).unwrap(), &grid).unwrap();
        let r = masked_reconstruction(net, &Tensor::from_volume(&crop), &m).unwrap();
        num += r.model_mse;
        den += r.zero_mse;
    }
    num / den
}

fn criterion_8() -> Outcome {
    let c = corpora();
    let (images, labels) = harmonized(&c.phantom, &c.study);
    let (tr, va) = validation_split(images.len(), 0);
    let pick = |idx: &[usize], v: &[Volume]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let (ti, tl, vi, vl) = (pick(&tr, &images), pick(&tr, &labels), pick(&va, &images), pick(&va, &labels));
    let model = |fusion, seed| UNetConfig {
        fusion,
        seed,
        ..UNetConfig::default()
    };
    let mut wins = [0usize; 4];
    let pre = |fusion| -> TrainOutcome {
        let cfg = TrainConfig {
            epochs: 10_000,
            lr0: PRETRAIN_LR,
            max_steps: Some(PRETRAIN_STEPS),
            model: model(fusion, 0),
            ..TrainConfig::pretrain()
        };
        pretrain(&ti, &cfg).unwrap()
    };
    let concat = pre(Fusion::EarlyConcat).checkpoint;
    let separate = pre(Fusion::SeparateEncoders).checkpoint;
    for r in 0..REPS {
        let scratch = Checkpoint::from_model(&build_unet(&model(Fusion::EarlyConcat, r)).unwrap());

        let ft = |init: &Checkpoint| {
            let cfg = TrainConfig {
                epochs: 10_000,
                lr0: FINETUNE_LR,
                max_steps: Some(FINETUNE_STEPS),
                seed: r,
                model: init.model.clone(),
                ..TrainConfig::finetune()
            };
            mean_dice(&finetune(&ti, &tl, &cfg, Some(init), 1.0).unwrap().checkpoint, &vi, &vl)
        };
        let (ft_scratch, ft_mae) = (ft(&scratch), ft(&concat));

        let probe = |init: &Checkpoint| {
            let cfg = TrainConfig {
                epochs: 10_000,
                max_steps: Some(PROBE_STEPS),
                seed: r,
                model: init.model.clone(),
                ..TrainConfig::probe()
            };
            mean_dice(&linear_probe(&ti, &tl, &cfg, 5, Some(init)).unwrap().checkpoint, &vi, &vl)
        };
        let (pr_scratch, pr_concat, pr_separate) = (probe(&scratch), probe(&concat), probe(&separate));
        let recovery = pet_only_recovery(&concat.network().unwrap(), &vi, r);

        wins[0] += (ft_mae >= ft_scratch) as usize;
        wins[1] += (pr_concat > pr_scratch) as usize;
        wins[2] += (pr_concat >= pr_separate) as usize;
        wins[3] += (recovery <= 0.5) as usize;
        let line = format!(
            "    rep {r}: finetune mae {ft_mae:.3} / scratch {ft_scratch:.3}; probe concat {pr_concat:.3} / scratch {pr_scratch:.3} / separate {pr_separate:.3}; PET-only recon ratio {recovery:.3}"
        );
        println!("{line}");
    }
    let names = ["(a) MAE fine-tune >= scratch", "(b) MAE probe > scratch", "(c) concat probe >= separate", "(d) PET recovery <= 0.5x zero"];
    let summary = names
        .iter()
        .zip(wins)
        .map(|(n, w)| format!("{n}: {w}/{REPS}"))
        .collect::<Vec<_>>()
        .join("; ");
    if wins.iter().all(|&w| w >= WINS_NEEDED) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- 9

fn bitwise(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_9() -> Outcome {
    let cfg_p = PhantomConfig {
        shape: [24, 32, 32],
        ..PhantomConfig::default()
    };
    let opts = HarmonizeOptions::default();
    let (images, labels): (Vec<Volume>, Vec<Volume>) = generate_phantoms(&cfg_p, 90, 6)
        .unwrap()
        .iter()
        .map(|p| {
            let h = harmonize_case(&p.ct, &p.pet, Some(&p.label), &opts).unwrap();
            (h.image, h.label.unwrap())
        })
        .unzip();
    let crop = [16, 24, 24];
    let pre = TrainConfig {
        epochs: 10_000,
        max_steps: Some(5),
        crop_shape: crop,
        patch_shape: [4, 8, 8],
        ..TrainConfig::pretrain()
    };
    let init = pretrain(&images, &pre).unwrap().checkpoint;

    let probe_cfg = TrainConfig {
        epochs: 10_000,
        max_steps: Some(20),
        crop_shape: crop,
        patch_shape: [4, 8, 8],
        seed: 3,
        ..TrainConfig::probe()
    };
    let probed = linear_probe(&images, &labels, &probe_cfg, 3, Some(&init)).unwrap().checkpoint;
    let mut frozen = 0;
    let mut head_moved = false;
    for (name, t) in probed.params.iter() {
        let before = init.params.get(name).unwrap();
        if UNet::is_head(name) {
            head_moved |= !bitwise(t, before);
        } else {
            check(bitwise(t, before), format!("probe changed {name}"))?;
            frozen += 1;
        }
    }
    check(head_moved, "probe did not train the head")?;

    let ft_cfg = |steps| TrainConfig {
        epochs: 10_000,
        max_steps: Some(steps),
        crop_shape: crop,
        patch_shape: [4, 8, 8],
        freeze_spec: FreezeSpec::All,
        seed: 4,
        ..TrainConfig::finetune()
    };
    let start = finetune(&images, &labels, &ft_cfg(0), Some(&init), 1.0).unwrap().checkpoint;
    let after = finetune(&images, &labels, &ft_cfg(25), Some(&init), 1.0).unwrap().checkpoint;
    check(start.params.names() == after.params.names(), "tensor set changed")?;
    for ((name, a), b) in after.params.iter().zip(start.params.tensors()) {
        check(bitwise(a, b), format!("freeze-all fine-tune changed {name}"))?;
        if !UNet::is_head(name) {
            check(bitwise(a, init.params.get(name).unwrap()), format!("{name} differs from the loaded checkpoint"))?;
        }
    }
    Ok(format!(
        "probe: {frozen} non-head tensors bit-identical, head trained; freeze-all fine-tune: all {} tensors bit-identical after 25 steps",
        after.params.len()
    ))
}

// ----------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    budget_s: f64,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "equation fidelity", budget_s: 1.0, run: criterion_1 },
    Criterion { id: 2, name: "gradient correctness", budget_s: 60.0, run: criterion_2 },
    Criterion { id: 3, name: "masking contract", budget_s: 30.0, run: criterion_3 },
    Criterion { id: 4, name: "geometry and parser", budget_s: 30.0, run: criterion_4 },
    Criterion { id: 5, name: "metrics oracle", budget_s: 30.0, run: criterion_5 },
    Criterion { id: 6, name: "registration", budget_s: 300.0, run: criterion_6 },
    Criterion { id: 7, name: "training dynamics", budget_s: 900.0, run: criterion_7 },
    Criterion { id: 8, name: "directional phantom study", budget_s: 2700.0, run: criterion_8 },
    Criterion { id: 9, name: "freezing soundness", budget_s: 120.0, run: criterion_9 },
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("criterion_{}: test", c.id);
        }
        return;
    }
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        let timing = format!("{secs:.1}s, budget {}s", c.budget_s);
        let line = match &outcome {
            Ok(detail) => format!("criterion {} ({}): PASS - {detail} [{timing}]", c.id, c.name),
            Err(detail) => {
                failed += 1;
                format!("criterion {} ({}): FAIL - {detail} [{timing}]", c.id, c.name)
            }
        };
        println!("{line}");
        std::io::stdout().flush().unwrap();
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
