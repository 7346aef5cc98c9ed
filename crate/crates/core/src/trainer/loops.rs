//! MAE pretraining, segmentation fine-tuning and linear probing.

use std::cell::RefCell;
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autonet::{build_unet, Graph, ParamSet, UNet, Var};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::infer::{plan_windows, DEFAULT_OVERLAP};
use crate::masking::{expand_mask, make_grid, sample_mask, PatchGrid};
use crate::rng::{derive_seed, seeded, stream};
use crate::tensor::Tensor;
use crate::volume::{random_corner, random_crop, Volume};

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, MASK_TOKEN};
use super::config::{FreezeSpec, Imputation, Objective, TrainConfig};
use super::optim::{adam_step, cosine_lr, AdamState};

/// One optimizer step of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,epoch,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.loss, r.lr));
    }
    s
}

pub fn write_curve_csv(rows: &[CurveRow], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), curve_csv(rows).as_bytes())
}

/// Trailing moving average over `window` values (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Seed-shuffled order of corpus indices; training subsets and the
/// validation split are prefixes and suffixes of it.
pub fn corpus_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, stream::CORPUS_ORDER));
    order
}

/// Fixed 80/20 train/validation split of the seed-shuffled order.
pub fn validation_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = corpus_order(n, seed);
    let n_train = ((0.8 * n as f64).round() as usize).clamp(1.min(n), n);
    let (a, b) = order.split_at(n_train);
    (a.to_vec(), b.to_vec())
}

/// `round(fraction * n)`, at least one case.
pub fn subset_size(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::BadConfig(format!("fraction {fraction} not in (0, 1]")));
    }
    Ok(((fraction * n as f64).round() as usize).clamp(1, n.max(1)))
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    case: usize,
    seed: u64,
}

fn sample_seed(base: u64, index: usize) -> u64 {
    derive_seed(derive_seed(base, u64::MAX), index as u64)
}

fn total_steps(cfg: &TrainConfig, n: usize) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let t = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(t, |m| t.min(m))
}

fn check_pairs(corpus: &[Volume]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(v) = corpus.iter().find(|v| v.channels() != 2) {
        return Err(Error::ShapeMismatch(format!("expected CT+PET volumes, got {} channels", v.channels())));
    }
    Ok(())
}

struct Optimizer<'a> {
    cfg: &'a TrainConfig,
    params: ParamSet,
    trainable: Vec<bool>,
    adam: AdamState,
    meta: CheckpointMeta,
    out_dir: Option<&'a Path>,
}

impl Optimizer<'_> {
    fn run<F>(mut self, model: &UNet, cases: &[usize], batch_loss: F) -> Result<TrainOutcome>
    where
        F: Fn(&mut Graph, &[Var], &[Sample]) -> Result<Var>,
    {
        let cfg = self.cfg;
        let total = total_steps(cfg, cases.len());
        let any_trainable = self.trainable.iter().any(|&t| t);
        let mut curve = Vec::with_capacity(total);
        let mut step = 0;
        let mut epochs_done = 0;
        for epoch in 0..cfg.epochs {
            if step >= total {
                break;
            }
            let mut order = cases.to_vec();
            order.shuffle(&mut seeded(derive_seed(cfg.seed, epoch as u64), stream::EPOCH_ORDER));
            for chunk in order.chunks(cfg.batch_size) {
                if step >= total {
                    break;
                }
                let samples: Vec<Sample> = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &case)| Sample {
                        case,
                        seed: sample_seed(cfg.seed, step * cfg.batch_size + j),
                    })
                    .collect();
                let lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min);
                let mut g = Graph::new();
                let pv: Vec<Var> = self
                    .params
                    .tensors()
                    .iter()
                    .zip(&self.trainable)
                    .map(|(t, &rg)| g.leaf(t.clone(), rg))
                    .collect();
                let loss = batch_loss(&mut g, &pv, &samples)?;
                let value = g.value(loss).item();
                if any_trainable {
                    let mut grads = g.backward(loss)?;
                    let grads: Vec<Tensor> = pv.iter().map(|&v| grads.take(v)).collect();
                    adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.trainable)?;
                }
                curve.push(CurveRow {
                    step,
                    epoch,
                    loss: value,
                    lr,
                });
                step += 1;
            }
            epochs_done = epoch + 1;
            if let (Some(every), Some(dir)) = (cfg.save_every, self.out_dir) {
                if epochs_done % every == 0 {
                    let ck = self.snapshot(model, epochs_done, step, &curve);
                    save_checkpoint(&ck, dir.join(format!("checkpoint_epoch{epochs_done:04}")))?;
                }
            }
        }
        let checkpoint = self.snapshot(model, epochs_done, step, &curve);
        Ok(TrainOutcome { checkpoint, curve })
    }

    fn snapshot(&self, model: &UNet, epoch: usize, step: usize, curve: &[CurveRow]) -> Checkpoint {
        let mut meta = self.meta.clone();
        meta.epoch = epoch;
        meta.step = step;
        meta.loss_history = curve.iter().map(|r| r.loss).collect();
        Checkpoint {
            model: model.config().clone(),
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            meta,
        }
    }
}

fn stack(items: Vec<Tensor>) -> Result<Tensor> {
    Tensor::stack_batch(&items)
}

/// Masked crop `x` and voxel mask `M` for one pretraining sample.
fn mae_sample(v: &Volume, grid: &PatchGrid, ratio: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    let crop = random_crop(v, grid.crop_shape, &mut seeded(seed, stream::CROP))?;
    let mask = expand_mask(&sample_mask(grid, ratio, seed)?, grid)?;
    Ok((Tensor::from_volume(&crop), mask))
}

/// Records `x̃ = impute(x, M)`, the forward pass and the reconstruction loss.
pub fn mae_loss_graph(
    g: &mut Graph,
    model: &UNet,
    pv: &[Var],
    x: &Tensor,
    mask: &Tensor,
    cfg: &TrainConfig,
) -> Result<Var> {
    let n = model.params().len();
    let xv = g.constant(x.clone());
    let xt = match cfg.imputation {
        Imputation::Zero => g.mask_keep(xv, mask)?,
        Imputation::Token => {
            let tok = *pv.get(n).ok_or_else(|| Error::BadConfig("token imputation without a mask token".into()))?;
            g.impute_token(xv, tok, mask)?
        }
    };
    let y = model.forward_graph(g, &pv[..n], xt)?;
    Ok(g.recon_loss(y, x, mask, cfg.lambda, cfg.epsilon)?.0)
}

/// Masked-autoencoder pretraining from seeded weights.
pub fn pretrain(corpus: &[Volume], cfg: &TrainConfig) -> Result<TrainOutcome> {
    pretrain_with(corpus, cfg, None, None)
}

/// Pretraining that optionally resumes from `init` and writes periodic
/// checkpoints under `out_dir`.
pub fn pretrain_with(
    corpus: &[Volume],
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.objective != Objective::Mae {
        return Err(Error::BadConfig("pretraining needs the MAE objective".into()));
    }
    check_pairs(corpus)?;
    let grid = make_grid(cfg.crop_shape, cfg.patch_shape)?;
    let (model, mut params, adam) = match init {
        Some(ck) => (ck.network()?, ck.params.clone(), ck.adam.clone()),
        None => {
            let m = build_unet(&cfg.model)?;
            let p = m.params().clone();
            (m, p, None)
        }
    };
    if cfg.imputation == Imputation::Token && params.get(MASK_TOKEN).is_none() {
        params.push(MASK_TOKEN, Tensor::zeros(&[2]));
    }
    let adam = adam.filter(|a| a.m.len() == params.len()).unwrap_or_else(|| AdamState::new(&params));
    let trainable = vec![cfg.freeze_spec == FreezeSpec::None; params.len()];
    let trainable = match cfg.freeze_spec {
        FreezeSpec::AllButLastDecoderLayer => params.names().iter().map(|n| UNet::is_head(n)).collect(),
        _ => trainable,
    };
    let cases: Vec<usize> = (0..corpus.len()).collect();
    let opt = Optimizer {
        cfg,
        params,
        trainable,
        adam,
        meta: CheckpointMeta {
            config: Some(cfg.clone()),
            training_cases: cases.clone(),
            init: if init.is_some() { "checkpoint".into() } else { "seeded".into() },
            ..CheckpointMeta::default()
        },
        out_dir,
    };
    opt.run(&model, &cases, |g, pv, samples| {
        let mut xs = Vec::with_capacity(samples.len());
        let mut ms = Vec::with_capacity(samples.len());
        for s in samples {
            let (x, m) = mae_sample(&corpus[s.case], &grid, cfg.mask_ratio, s.seed)?;
            xs.push(x);
            ms.push(m);
        }
        mae_loss_graph(g, &model, pv, &stack(xs)?, &stack(ms)?, cfg)
    })
}

fn check_labels(corpus: &[Volume], labels: &[Volume]) -> Result<()> {
    check_pairs(corpus)?;
    if labels.len() != corpus.len() {
        return Err(Error::LabelMismatch(format!("{} label volumes for {} cases", labels.len(), corpus.len())));
    }
    for (i, (v, l)) in corpus.iter().zip(labels).enumerate() {
        if v.dims() != l.dims() || l.channels() != 1 {
            return Err(Error::LabelMismatch(format!(
                "case {i}: image {:?}, label {:?} with {} channels",
                v.dims(),
                l.dims(),
                l.channels()
            )));
        }
        if l.data().iter().any(|&g| g != 0.0 && g != 1.0) {
            return Err(Error::LabelMismatch(format!("case {i}: labels must be 0 or 1")));
        }
    }
    Ok(())
}

/// Image and label crops at one shared random corner.
fn paired_crop(v: &Volume, label: &Volume, shape: [usize; 3], seed: u64) -> Result<(Tensor, Tensor)> {
    let (pv, pl) = (v.pad_to(shape), label.pad_to(shape));
    let corner = random_corner(pv.dims(), shape, &mut seeded(seed, stream::CROP));
    Ok((Tensor::from_volume(&pv.crop(corner, shape)?), Tensor::from_volume(&pl.crop(corner, shape)?)))
}

fn supervised(
    corpus: &[Volume],
    labels: &[Volume],
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    cases: Vec<usize>,
    lattice: bool,
) -> Result<TrainOutcome> {
    let mut model = match init {
        Some(ck) => ck.network()?,
        None => build_unet(&cfg.model)?,
    };
    model.reset_head(cfg.seed);
    let params = model.params().clone();
    let trainable: Vec<bool> = params
        .names()
        .iter()
        .map(|n| match cfg.freeze_spec {
            FreezeSpec::None => true,
            FreezeSpec::AllButLastDecoderLayer => UNet::is_head(n),
            FreezeSpec::All => false,
        })
        .collect();
    let opt = Optimizer {
        cfg,
        adam: AdamState::new(&params),
        params,
        trainable,
        meta: CheckpointMeta {
            config: Some(cfg.clone()),
            training_cases: cases.clone(),
            init: if init.is_some() { "checkpoint".into() } else { "seeded".into() },
            ..CheckpointMeta::default()
        },
        out_dir: None,
    };
    if !lattice {
        return opt.run(&model, &cases, |g, pv, samples| {
            let mut xs = Vec::with_capacity(samples.len());
            let mut ys = Vec::with_capacity(samples.len());
            for s in samples {
                let (x, y) = paired_crop(&corpus[s.case], &labels[s.case], cfg.crop_shape, s.seed)?;
                xs.push(x);
                ys.push(y);
            }
            let xv = g.constant(stack(xs)?);
            let logits = model.forward_graph(g, pv, xv)?;
            Ok(g.dice_ce(logits, &stack(ys)?)?.0)
        });
    }
    // Frozen backbone: features of each (case, window) are computed once.
    let plans = cases
        .iter()
        .map(|&c| Ok((c, plan_windows(corpus[c].dims(), cfg.crop_shape, DEFAULT_OVERLAP)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let cache: RefCell<HashMap<(usize, usize), (Tensor, Tensor)>> = RefCell::new(HashMap::new());
    let head = model.plan().len() - 1;
    opt.run(&model, &cases, |g, pv, samples| {
        let mut fs = Vec::with_capacity(samples.len());
        let mut ys = Vec::with_capacity(samples.len());
        for s in samples {
            let plan = &plans[&s.case];
            let w = seeded(s.seed, stream::CROP).random_range(0..plan.corners.len());
            let mut cache = cache.borrow_mut();
            if let Entry::Vacant(e) = cache.entry((s.case, w)) {
                let (img, lab) = (corpus[s.case].pad_to(cfg.crop_shape), labels[s.case].pad_to(cfg.crop_shape));
                let corner = plan.corners[w];
                let x = Tensor::from_volume(&img.crop(corner, cfg.crop_shape)?);
                let y = Tensor::from_volume(&lab.crop(corner, cfg.crop_shape)?);
                e.insert((model.features(&x)?, y));
            }
            let (f, y) = &cache[&(s.case, w)];
            fs.push(f.batch_item(0)?);
            ys.push(y.batch_item(0)?);
        }
        let fv = g.constant(stack(fs)?);
        let logits = g.conv3d(fv, pv[2 * head], pv[2 * head + 1], 1, 0)?;
        Ok(g.dice_ce(logits, &stack(ys)?)?.0)
    })
}

/// Segmentation fine-tuning on the first `round(fraction * N)` cases of the
/// seed-shuffled corpus, starting from `init` (or seeded weights) with a fresh
/// output projection.
pub fn finetune(
    corpus: &[Volume],
    labels: &[Volume],
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    fraction: f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.objective != Objective::DiceCe {
        return Err(Error::BadConfig("fine-tuning needs the DICE_CE objective".into()));
    }
    check_labels(corpus, labels)?;
    let k = subset_size(corpus.len(), fraction)?;
    let cases = corpus_order(corpus.len(), cfg.seed)[..k].to_vec();
    supervised(corpus, labels, cfg, init, cases, false)
}

/// Trains only the output projection on the first `k` cases of the
/// seed-shuffled corpus. Training crops are drawn from the sliding-window
/// lattice used at inference (overlap 0.5), so the frozen backbone runs once
/// per window.
pub fn linear_probe(
    corpus: &[Volume],
    labels: &[Volume],
    cfg: &TrainConfig,
    k: usize,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        freeze_spec: FreezeSpec::AllButLastDecoderLayer,
        objective: Objective::DiceCe,
        ..cfg.clone()
    };
    cfg.validate()?;
    check_labels(corpus, labels)?;
    if k == 0 || k > corpus.len() {
        return Err(Error::BadConfig(format!("k = {k} with {} cases", corpus.len())));
    }
    let cases = corpus_order(corpus.len(), cfg.seed)[..k].to_vec();
    supervised(corpus, labels, &cfg, init, cases, true)
}

/// Reconstruction error on hidden voxels of one crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedRecon {
    /// Mean squared error of the network's output over voxels with `M = 1`.
    pub model_mse: f64,
    /// The same error for an all-zero prediction.
    pub zero_mse: f64,
    pub masked_voxels: usize,
}

/// Compares the network's reconstruction of hidden voxels with predicting
/// zero (the normalized mean). `x` and `mask` are `[1, 2, Z, Y, X]`.
pub fn masked_reconstruction(model: &UNet, x: &Tensor, mask: &Tensor) -> Result<MaskedRecon> {
    let y = model.forward(&crate::masking::impute_zero(x, mask)?)?;
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] != 0.0).collect();
    if idx.is_empty() {
        return Err(Error::BadShape("mask hides no voxels".into()));
    }
    let n = idx.len() as f64;
    let model_mse = crate::reduce::pairwise_sum_by(idx.len(), &|j| {
        let i = idx[j];
        (y.data()[i] - x.data()[i]).powi(2)
    }) / n;
    let zero_mse = crate::reduce::pairwise_sum_by(idx.len(), &|j| x.data()[idx[j]].powi(2)) / n;
    Ok(MaskedRecon {
        model_mse,
        zero_mse,
        masked_voxels: idx.len(),
    })
}

/// MAE loss of `model` on a fixed crop and mask.
pub fn mae_loss(model: &UNet, x: &Tensor, mask: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g, |_| false);
    let cfg = TrainConfig {
        imputation: Imputation::Zero,
        ..cfg.clone()
    };
    let l = mae_loss_graph(&mut g, model, &pv, x, mask, &cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonet::UNetConfig;
    use crate::volume::ChannelLabel;

    fn case(k: usize) -> (Volume, Volume) {
        let dims = [10, 18, 18];
        let n: usize = dims.iter().product();
        let c = [4.0 + (k % 3) as f64, 8.0 + k as f64, 9.0 - (k % 2) as f64];
        let mut ct = vec![0.0; n];
        let mut pet = vec![0.0; n];
        let mut lab = vec![0.0; n];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = (z * dims[1] + y) * dims[2] + x;
                    let r2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                    ct[i] = (-r2 / 30.0).exp() + 0.1 * (x as f64 * 0.4).sin();
                    pet[i] = 0.8 * ct[i] + 0.05 * (y as f64 * 0.7).cos();
                    lab[i] = if r2 < 6.0 { 1.0 } else { 0.0 };
                }
            }
        }
        ct.extend(pet);
        let img = Volume::new(ct, dims, [3.0, 2.0, 2.0], [0.0; 3], vec![ChannelLabel::Ct, ChannelLabel::Pet]).unwrap();
        let lab = Volume::single(lab, dims, [3.0, 2.0, 2.0], ChannelLabel::Generic).unwrap();
        (img, lab)
    }

    fn corpus(n: usize) -> (Vec<Volume>, Vec<Volume>) {
        (0..n).map(case).unzip()
    }

    fn tiny(objective: Objective) -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            lr0: 1e-2,
            crop_shape: [8, 16, 16],
            patch_shape: [4, 8, 8],
            objective,
            model: UNetConfig {
                base_features: 4,
                ..UNetConfig::default()
            },
            ..TrainConfig::pretrain()
        }
    }

    fn head_mean(c: &[CurveRow], n: usize) -> f64 {
        c[..n].iter().map(|r| r.loss).sum::<f64>() / n as f64
    }

    fn tail_mean(c: &[CurveRow], n: usize) -> f64 {
        c[c.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let (imgs, _) = corpus(4);
        let cfg = tiny(Objective::Mae);
        let a = pretrain(&imgs, &cfg).unwrap();
        assert_eq!(a.curve.len(), 20);
        assert!(tail_mean(&a.curve, 5) < head_mean(&a.curve, 5));
        assert!(a.curve.iter().all(|r| r.loss.is_finite()));
        assert_eq!(a.curve[0].lr, cfg.lr0);
        let b = pretrain(&imgs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checkpoint.meta.step, 20);
        assert_eq!(a.checkpoint.meta.epoch, 10);
        assert_eq!(a.checkpoint.adam.as_ref().unwrap().t, 20);
    }

    #[test]
    fn zero_epochs_leave_init_untouched() {
        let (imgs, _) = corpus(4);
        let cfg = tiny(Objective::Mae);
        let init = pretrain(&imgs, &cfg).unwrap().checkpoint;
        let idle = TrainConfig { epochs: 0, ..cfg };
        let out = pretrain_with(&imgs, &idle, Some(&init), None).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.checkpoint.params, init.params);
    }

    #[test]
    fn finetune_from_pretrained_swaps_only_the_head() {
        let (imgs, labs) = corpus(4);
        let init = pretrain(&imgs, &tiny(Objective::Mae)).unwrap().checkpoint;
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny(Objective::DiceCe)
        };
        let out = finetune(&imgs, &labs, &cfg, Some(&init), 1.0).unwrap().checkpoint;
        for (name, t) in out.params.iter() {
            let before = init.params.get(name).unwrap();
            assert_eq!(t == before, !UNet::is_head(name), "{name}");
        }
    }

    #[test]
    fn cached_features_reproduce_the_forward_pass() {
        let (imgs, _) = corpus(1);
        let net = build_unet(&tiny(Objective::DiceCe).model).unwrap();
        let x = Tensor::from_volume(&imgs[0].crop([0, 0, 0], [8, 16, 16]).unwrap());
        let f = net.features(&x).unwrap();
        let head = net.plan().len() - 1;
        let p = net.params().tensors();
        let via_cache = crate::autonet::conv::conv3d_forward(&f, &p[2 * head], &p[2 * head + 1], 1, 0).unwrap();
        assert_eq!(via_cache, net.forward(&x).unwrap());
    }

    #[test]
    fn max_steps_caps_the_schedule() {
        let (imgs, _) = corpus(4);
        let cfg = TrainConfig {
            max_steps: Some(3),
            ..tiny(Objective::Mae)
        };
        let out = pretrain(&imgs, &cfg).unwrap();
        assert_eq!(out.curve.len(), 3);
        assert_eq!(out.checkpoint.meta.epoch, 2);
        assert!((out.curve[2].lr - cosine_lr(2, 3, cfg.lr0, 0.0)).abs() < 1e-18);
    }

    #[test]
    fn token_imputation_trains_the_token() {
        let (imgs, _) = corpus(2);
        let cfg = TrainConfig {
            imputation: Imputation::Token,
            max_steps: Some(3),
            ..tiny(Objective::Mae)
        };
        let out = pretrain(&imgs, &cfg).unwrap();
        let tok = out.checkpoint.mask_token().unwrap();
        assert!(tok.data().iter().all(|&v| v != 0.0));
        assert_eq!(out.checkpoint.network().unwrap().params().len(), out.checkpoint.params.len() - 1);
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let (imgs, _) = corpus(2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            save_every: Some(2),
            ..tiny(Objective::Mae)
        };
        let out = pretrain_with(&imgs, &cfg, None, Some(dir.path())).unwrap();
        let mid = crate::trainer::load_checkpoint(dir.path().join("checkpoint_epoch0002")).unwrap();
        assert_eq!(mid.meta.step, 2);
        let last = crate::trainer::load_checkpoint(dir.path().join("checkpoint_epoch0004")).unwrap();
        assert_eq!(last, out.checkpoint);
    }

    #[test]
    fn finetune_uses_seeded_subset() {
        let (imgs, labs) = corpus(6);
        let cfg = TrainConfig {
            max_steps: Some(4),
            ..tiny(Objective::DiceCe)
        };
        let out = finetune(&imgs, &labs, &cfg, None, 0.5).unwrap();
        assert_eq!(out.checkpoint.meta.training_cases, corpus_order(6, cfg.seed)[..3].to_vec());
        assert!(out.curve.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    }

    #[test]
    fn finetuning_reduces_segmentation_loss() {
        let (imgs, labs) = corpus(4);
        let cfg = TrainConfig {
            epochs: 15,
            ..tiny(Objective::DiceCe)
        };
        let out = finetune(&imgs, &labs, &cfg, None, 1.0).unwrap();
        assert!(tail_mean(&out.curve, 5) < head_mean(&out.curve, 5));
    }

    #[test]
    fn probe_only_moves_the_head() {
        let (imgs, labs) = corpus(4);
        let cfg = TrainConfig {
            max_steps: Some(3),
            ..tiny(Objective::DiceCe)
        };
        let init = Checkpoint::from_model(&build_unet(&cfg.model).unwrap());
        let out = linear_probe(&imgs, &labs, &cfg, 2, Some(&init)).unwrap();
        assert_eq!(out.checkpoint.meta.training_cases.len(), 2);
        let mut moved = 0;
        for ((name, a), b) in init.params.iter().zip(out.checkpoint.params.tensors()) {
            if UNet::is_head(name) {
                moved += usize::from(a != b);
            } else {
                assert_eq!(a, b, "{name} changed");
            }
        }
        assert_eq!(moved, 2);
        assert!(matches!(linear_probe(&imgs, &labs, &cfg, 5, None), Err(Error::BadConfig(_))));
    }

    #[test]
    fn label_problems_are_reported() {
        let (imgs, mut labs) = corpus(2);
        let cfg = tiny(Objective::DiceCe);
        assert!(matches!(finetune(&imgs, &labs[..1], &cfg, None, 1.0), Err(Error::LabelMismatch(_))));
        assert!(matches!(finetune(&imgs, &labs, &cfg, None, 0.0), Err(Error::BadConfig(_))));
        assert!(matches!(pretrain(&[], &tiny(Objective::Mae)), Err(Error::EmptyCorpus)));
        labs[1].data_mut()[0] = 2.0;
        assert!(matches!(finetune(&imgs, &labs, &cfg, None, 1.0), Err(Error::LabelMismatch(_))));
    }

    #[test]
    fn splits_and_subsets() {
        let (tr, va) = validation_split(70, 3);
        assert_eq!((tr.len(), va.len()), (56, 14));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
        assert_eq!(subset_size(70, 0.1).unwrap(), 7);
        assert_eq!(subset_size(70, 0.01).unwrap(), 1);
        assert_ne!(corpus_order(70, 1), corpus_order(70, 2));
    }

    #[test]
    fn curve_formats() {
        let rows = [CurveRow {
            step: 0,
            epoch: 0,
            loss: 0.5,
            lr: 1e-4,
        }];
        assert_eq!(curve_csv(&rows), "step,epoch,loss,lr\n0,0,0.5,0.0001\n");
        assert_eq!(smoothed(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn masked_reconstruction_of_seeded_net() {
        let (imgs, _) = corpus(1);
        let cfg = tiny(Objective::Mae);
        let grid = make_grid(cfg.crop_shape, cfg.patch_shape).unwrap();
        let (x, m) = mae_sample(&imgs[0], &grid, 0.5, 9).unwrap();
        let net = build_unet(&cfg.model).unwrap();
        let r = masked_reconstruction(&net, &x, &m).unwrap();
        assert!(r.zero_mse > 0.0 && r.model_mse.is_finite());
        assert_eq!(r.masked_voxels as f64, m.data().iter().sum::<f64>());
        assert!(mae_loss(&net, &x, &m, &cfg).unwrap() > 0.0);
    }
}
