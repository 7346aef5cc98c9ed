//! Small convolutional UNet with early-concatenation or per-modality encoders.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::tensor::Tensor;

use super::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fusion {
    /// CT and PET stacked as input channels of one encoder.
    EarlyConcat,
    /// One single-channel encoder per modality, merged at the bottleneck.
    SeparateEncoders,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub fusion: Fusion,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 2,
            base_features: 8,
            in_channels: 2,
            out_channels: 2,
            fusion: Fusion::EarlyConcat,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_features < 1 || self.out_channels < 1 {
            return Err(Error::BadConfig(format!(
                "levels {} / base_features {} / out_channels {} must be >= 1",
                self.levels, self.base_features, self.out_channels
            )));
        }
        if self.in_channels != 2 {
            return Err(Error::BadConfig(format!("in_channels {} (expected CT + PET = 2)", self.in_channels)));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_extents(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::BadShape(format!("extents {dims:?} not divisible by {d}")));
        }
        Ok(())
    }
}

/// One convolution in the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }
}

pub const HEAD: &str = "head";

/// Encoder stack `stem, down1.., bottleneck` for `cin` inputs and width `f`.
fn encoder(prefix: &str, cin: usize, f: usize, levels: usize) -> Vec<LayerSpec> {
    let mut out = vec![LayerSpec::new(format!("{prefix}stem"), cin, f, 3, 1)];
    for l in 1..levels {
        out.push(LayerSpec::new(format!("{prefix}down{l}"), f << (l - 1), f << l, 3, 2));
    }
    let deep = f << (levels - 1);
    out.push(LayerSpec::new(format!("{prefix}bottleneck"), deep, deep, 3, 1));
    out
}

/// Every convolution in forward order.
pub fn layer_plan(cfg: &UNetConfig) -> Vec<LayerSpec> {
    let f = cfg.base_features;
    let levels = cfg.levels;
    let (mut plan, skip_width): (Vec<LayerSpec>, usize) = match cfg.fusion {
        Fusion::EarlyConcat => (encoder("", cfg.in_channels, f, levels), f),
        Fusion::SeparateEncoders => {
            let h = f.div_ceil(2);
            let mut p = encoder("enc_ct.", 1, h, levels);
            p.extend(encoder("enc_pet.", 1, h, levels));
            p.push(LayerSpec::new("merge", 2 * (h << (levels - 1)), f << (levels - 1), 3, 1));
            (p, 2 * h)
        }
    };
    for l in (1..levels).rev() {
        plan.push(LayerSpec::new(format!("up{l}"), f << l, f << (l - 1), 3, 1));
        plan.push(LayerSpec::new(format!("fuse{l}"), (f << (l - 1)) + (skip_width << (l - 1)), f << (l - 1), 3, 1));
    }
    plan.push(LayerSpec::new(HEAD, f, cfg.out_channels, 1, 1));
    plan
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g` as a leaf; `trainable` decides which ones
    /// require gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Vec<Var> {
        self.iter().map(|(n, t)| g.leaf(t.clone(), trainable(n))).collect()
    }
}

fn init_layer(spec: &LayerSpec, rng: &mut crate::rng::Rng) -> (Tensor, Tensor) {
    let std = (2.0 / spec.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let shape = spec.weight_shape();
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized");
    (w, Tensor::zeros(&[spec.cout]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    cfg: UNetConfig,
    plan: Vec<LayerSpec>,
    params: ParamSet,
}

/// Builds a network with seeded fan-in normal weights and zero biases.
pub fn build_unet(cfg: &UNetConfig) -> Result<UNet> {
    cfg.validate()?;
    let plan = layer_plan(cfg);
    let mut rng = seeded(cfg.seed, stream::INIT);
    let mut params = ParamSet::new();
    for spec in &plan {
        let (w, b) = init_layer(spec, &mut rng);
        params.push(format!("{}.w", spec.name), w);
        params.push(format!("{}.b", spec.name), b);
    }
    Ok(UNet {
        cfg: cfg.clone(),
        plan,
        params,
    })
}

impl UNet {
    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &[LayerSpec] {
        &self.plan
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the parameters, checking names and shapes against the plan.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self> {
        if params.names() != self.params.names() {
            return Err(Error::ShapeMismatch(format!(
                "parameter names {:?} do not match the network",
                params.names()
            )));
        }
        for ((n, a), b) in params.iter().zip(self.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!("{n}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        self.params = params;
        Ok(self)
    }

    /// Parameter name to shape.
    pub fn manifest(&self) -> BTreeMap<String, Vec<usize>> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Swaps in a freshly initialized output projection drawn from `seed`.
    pub fn reset_head(&mut self, seed: u64) {
        let spec = self.plan.last().expect("plan ends with the head").clone();
        let mut rng = seeded(seed, stream::HEAD_INIT);
        let (w, b) = init_layer(&spec, &mut rng);
        *self.params.get_mut("head.w").expect("head weight") = w;
        *self.params.get_mut("head.b").expect("head bias") = b;
    }

    /// Records the network applied to `x` on `g`, with parameters `pv`
    /// (as returned by [`ParamSet::bind`]).
    pub fn forward_graph(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<Var> {
        let h = self.features_graph(g, pv, x)?;
        let head = self.plan.len() - 1;
        g.conv3d(h, pv[2 * head], pv[2 * head + 1], 1, 0)
    }

    /// Records everything up to the input of the 1x1x1 head: the last
    /// decoder activation, `[B, F, Z, Y, X]`.
    pub fn features_graph(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<Var> {
        let [_, c, z, y, xx] = g.value(x).dims5()?;
        if c != self.cfg.in_channels {
            return Err(Error::BadShape(format!("{c} input channels, expected {}", self.cfg.in_channels)));
        }
        self.cfg.check_extents([z, y, xx])?;
        if pv.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!("{} bound parameters for {}", pv.len(), self.params.len())));
        }
        let mut li = 0;
        let mut conv = |g: &mut Graph, h: Var, relu: bool| -> Result<Var> {
            let spec = &self.plan[li];
            let pad = spec.kernel / 2;
            let out = g.conv3d(h, pv[2 * li], pv[2 * li + 1], spec.stride, pad)?;
            li += 1;
            Ok(if relu { g.relu(out) } else { out })
        };
        let levels = self.cfg.levels;
        let encode = |g: &mut Graph, conv: &mut dyn FnMut(&mut Graph, Var, bool) -> Result<Var>, x: Var| {
            let mut skips = Vec::with_capacity(levels);
            let mut h = conv(g, x, true)?;
            for _ in 1..levels {
                skips.push(h);
                h = conv(g, h, true)?;
            }
            let h = conv(g, h, true)?;
            Ok::<_, Error>((h, skips))
        };
        let (mut h, skips) = match self.cfg.fusion {
            Fusion::EarlyConcat => encode(g, &mut conv, x)?,
            Fusion::SeparateEncoders => {
                let ct = g.slice_c(x, 0, 1)?;
                let pet = g.slice_c(x, 1, 1)?;
                let (hc, sc) = encode(g, &mut conv, ct)?;
                let (hp, sp) = encode(g, &mut conv, pet)?;
                let joined = g.concat_c(hc, hp)?;
                let h = conv(g, joined, true)?;
                let skips = sc.into_iter().zip(sp).map(|(a, b)| g.concat_c(a, b)).collect::<Result<Vec<_>>>()?;
                (h, skips)
            }
        };
        for skip in skips.into_iter().rev() {
            let u = g.upsample2x(h)?;
            let u = conv(g, u, true)?;
            let cat = g.concat_c(u, skip)?;
            h = conv(g, cat, true)?;
        }
        Ok(h)
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &pv, xv)?;
        Ok(g.value(out).clone())
    }

    /// Inference-only features at the head input.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = self.features_graph(&mut g, &pv, xv)?;
        Ok(g.value(out).clone())
    }
}
