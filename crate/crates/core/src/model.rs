//! Two-channel U-Net with a RegNetY-style encoder.
//!
//! Encoder: a stride-2 stem, then four stages of residual blocks. Each block is
//! `1×1 expand → 3×3 grouped conv (stride 2 on the stage's first block) → SE gate →
//! 1×1 project`, plus a projected shortcut when the shape changes. Every convolution is
//! followed by group norm, and by ReLU except before the residual sum.
//!
//! Decoder: five nearest-neighbour 2× upsampling levels, each followed by two 3×3
//! conv units. The first four levels concatenate the matching encoder output
//! (stage 3, 2, 1, then the stem); the last level restores full resolution. A 1×1
//! head produces one logit per pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, relu_backward_by_mask, relu_inplace, split_channels, upsample2x, upsample2x_backward,
    Act, Conv2d, GroupNorm, Module, NormCache, Param, SeCache, SeGate, Tensor,
};
use crate::rng::{derived_rng, Stream};

pub const IN_CHANNELS: usize = 2;
/// Total downsampling factor of the encoder.
pub const STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stem_width: usize,
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub group_width: usize,
    pub se_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_width: 32,
            stage_depths: [1, 2, 4, 2],
            stage_widths: [48, 96, 192, 384],
            group_width: 24,
            se_ratio: 0.25,
        }
    }
}

impl EncoderConfig {
    /// Small encoder for CPU-scale phantom experiments.
    pub fn toy() -> Self {
        Self { stem_width: 8, stage_depths: [1, 1, 1, 1], stage_widths: [16, 24, 32, 48], group_width: 8, se_ratio: 0.25 }
    }

    pub fn se_bottleneck(&self, width: usize) -> usize {
        (self.se_ratio * width as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.group_width == 0 {
            return Err(Error::Config("stem_width and group_width must be positive".into()));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config(format!("stage depths must be >= 1, got {:?}", self.stage_depths)));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return Err(Error::Config(format!("se_ratio must lie in (0, 1], got {}", self.se_ratio)));
        }
        for &w in &self.stage_widths {
            if w == 0 || w % self.group_width != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} is not a positive multiple of group width {}",
                    self.group_width
                )));
            }
            if self.se_bottleneck(w) == 0 {
                return Err(Error::Config(format!("se_ratio {} leaves no bottleneck channel for width {w}", self.se_ratio)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Output widths of the five decoder levels, coarsest first.
    pub decoder_widths: [usize; 5],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), decoder_widths: [192, 96, 48, 32, 16], seed: 0 }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self { encoder: EncoderConfig::toy(), decoder_widths: [32, 24, 16, 8, 8], seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_widths.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Convolution followed by group norm and optional ReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    norm: GroupNorm,
    act: bool,
}

struct UnitCache {
    input: Act,
    norm: NormCache,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, stride: usize, groups: usize, act: bool, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(in_c, out_c, k, stride, groups, false, rng), norm: GroupNorm::new(out_c), act }
    }

    fn forward(&self, x: Act) -> (Act, UnitCache) {
        let h = self.conv.forward(&x);
        let (mut y, norm) = self.norm.forward(h);
        if self.act {
            relu_inplace(&mut y);
        }
        (y, UnitCache { input: x, norm })
    }

    fn backward(&mut self, cache: UnitCache, mut dy: Act) -> Act {
        if self.act {
            let mask = self.norm.positive_mask(&cache.norm, dy.c, dy.plane());
            relu_backward_by_mask(&mut dy, &mask);
        }
        let d = self.norm.backward(&cache.norm, &dy);
        self.conv.backward(&cache.input, &d)
    }
}

impl Module for ConvUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Residual block with grouped 3×3 convolution and SE gate.
#[derive(Debug, Clone)]
struct YBlock {
    expand: ConvUnit,
    spatial: ConvUnit,
    se: SeGate,
    project: ConvUnit,
    shortcut: Option<ConvUnit>,
}

struct BlockCache {
    expand: UnitCache,
    spatial: UnitCache,
    se: SeCache,
    project: UnitCache,
    shortcut: Option<UnitCache>,
    mask: Vec<bool>,
}

impl YBlock {
    fn new<R: Rng>(in_c: usize, width: usize, stride: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let groups = width / cfg.group_width;
        let shortcut = (in_c != width || stride != 1).then(|| ConvUnit::new(in_c, width, 1, stride, 1, false, rng));
        Self {
            expand: ConvUnit::new(in_c, width, 1, 1, 1, true, rng),
            spatial: ConvUnit::new(width, width, 3, stride, groups, true, rng),
            se: SeGate::new(width, cfg.se_bottleneck(width), rng),
            project: ConvUnit::new(width, width, 1, 1, 1, false, rng),
            shortcut,
        }
    }

    fn forward(&self, x: Act) -> (Act, BlockCache) {
        let (sc, sc_cache) = match &self.shortcut {
            Some(unit) => {
                let (s, c) = unit.forward(x.clone());
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let (a, expand) = self.expand.forward(x);
        let (b, spatial) = self.spatial.forward(a);
        let (s, se) = self.se.forward(b);
        let (mut y, project) = self.project.forward(s);
        for (v, r) in y.data.iter_mut().zip(&sc.data) {
            *v += r;
        }
        relu_inplace(&mut y);
        let mask = y.data.iter().map(|&v| v > 0.0).collect();
        (y, BlockCache { expand, spatial, se, project, shortcut: sc_cache, mask })
    }

    fn backward(&mut self, cache: BlockCache, mut dy: Act) -> Act {
        relu_backward_by_mask(&mut dy, &cache.mask);
        let d_short = match (&mut self.shortcut, cache.shortcut) {
            (Some(unit), Some(c)) => unit.backward(c, dy.clone()),
            _ => dy.clone(),
        };
        let ds = self.project.backward(cache.project, dy);
        let db = self.se.backward(cache.se, &ds);
        let da = self.spatial.backward(cache.spatial, db);
        let mut dx = self.expand.backward(cache.expand, da);
        for (v, r) in dx.data.iter_mut().zip(&d_short.data) {
            *v += r;
        }
        dx
    }
}

impl Module for YBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.project.visit(&join(prefix, "project"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up_c: usize,
    conv1: ConvUnit,
    conv2: ConvUnit,
}

struct LevelCache {
    conv1: UnitCache,
    conv2: UnitCache,
    has_skip: bool,
}

impl DecoderLevel {
    fn forward(&self, x: &Act, skip: Option<&Act>) -> (Act, LevelCache) {
        let up = upsample2x(x);
        let cat = match skip {
            Some(s) => concat_channels(up, s),
            None => up,
        };
        let (h, conv1) = self.conv1.forward(cat);
        let (y, conv2) = self.conv2.forward(h);
        (y, LevelCache { conv1, conv2, has_skip: skip.is_some() })
    }

    /// Returns gradients for the upsampled input and for the skip tensor.
    fn backward(&mut self, cache: LevelCache, dy: Act) -> (Act, Option<Act>) {
        let d1 = self.conv2.backward(cache.conv2, dy);
        let dcat = self.conv1.backward(cache.conv1, d1);
        if cache.has_skip {
            let (du, dskip) = split_channels(dcat, self.up_c);
            (upsample2x_backward(&du), Some(dskip))
        } else {
            (upsample2x_backward(&dcat), None)
        }
    }
}

impl Module for DecoderLevel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// The segmentation network.
#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    stem: ConvUnit,
    stages: Vec<Vec<YBlock>>,
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

/// Activations kept by [`SegModel::forward_train`] for the backward pass.
pub struct ForwardCache {
    stem: UnitCache,
    stages: Vec<Vec<BlockCache>>,
    decoder: Vec<LevelCache>,
    head_input: Act,
}

/// Anything that maps a `B × 2 × H × W` batch to `B × 1 × H × W` logits.
pub trait SlicePredictor {
    fn predict_logits(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Builds the network with weights drawn from a generator seeded by `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<SegModel> {
    config.validate()?;
    let enc = &config.encoder;
    let mut rng = derived_rng(config.seed, Stream::Init, 0);
    let stem = ConvUnit::new(IN_CHANNELS, enc.stem_width, 3, 2, 1, true, &mut rng);
    let mut stages = Vec::with_capacity(4);
    let mut in_c = enc.stem_width;
    for s in 0..4 {
        let width = enc.stage_widths[s];
        let blocks = (0..enc.stage_depths[s])
            .map(|i| YBlock::new(if i == 0 { in_c } else { width }, width, if i == 0 { 2 } else { 1 }, enc, &mut rng))
            .collect();
        stages.push(blocks);
        in_c = width;
    }
    let skips = [enc.stage_widths[2], enc.stage_widths[1], enc.stage_widths[0], enc.stem_width, 0];
    let mut decoder = Vec::with_capacity(5);
    for (lvl, &out) in config.decoder_widths.iter().enumerate() {
        let cat = in_c + skips[lvl];
        decoder.push(DecoderLevel {
            up_c: in_c,
            conv1: ConvUnit::new(cat, out, 3, 1, 1, true, &mut rng),
            conv2: ConvUnit::new(out, out, 3, 1, 1, true, &mut rng),
        });
        in_c = out;
    }
    let head = Conv2d::new(in_c, 1, 1, 1, 1, true, &mut rng);
    Ok(SegModel { config: config.clone(), stem, stages, decoder, head })
}

impl SegModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let [b, c, h, w] = input.shape;
        if c != IN_CHANNELS {
            return Err(Error::Shape(format!("model expects {IN_CHANNELS} input channels, got {c}")));
        }
        if b == 0 || h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {b}×{c}×{h}×{w}: batch must be non-empty and H, W positive multiples of {STRIDE}"
            )));
        }
        Ok(())
    }

    /// Stem output followed by the four stage outputs.
    pub fn encoder_features(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(input)?;
        let (x, _) = self.stem.forward(Act::from_tensor(input));
        let mut feats = vec![x.to_tensor()];
        let mut h = x;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(h).0;
            }
            feats.push(h.to_tensor());
        }
        Ok(feats)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(input)?.0)
    }

    /// Forward pass that keeps the activations needed by [`SegModel::backward`].
    pub fn forward_train(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        let (x0, stem_cache) = self.stem.forward(Act::from_tensor(input));
        let mut skips = vec![x0.clone()];
        let mut h = x0;
        let mut stage_caches = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, c) = block.forward(h);
                caches.push(c);
                h = y;
            }
            stage_caches.push(caches);
            skips.push(h.clone());
        }
        // skips = [stem, s1, s2, s3, s4]; decoder consumes s3, s2, s1, stem.
        let mut dec_caches = Vec::with_capacity(5);
        for (lvl, level) in self.decoder.iter().enumerate() {
            let skip = if lvl < 4 { Some(&skips[3 - lvl]) } else { None };
            let (y, c) = level.forward(&h, skip);
            dec_caches.push(c);
            h = y;
        }
        let logits = self.head.forward(&h);
        let cache = ForwardCache { stem: stem_cache, stages: stage_caches, decoder: dec_caches, head_input: h };
        Ok((logits.to_tensor(), cache))
    }

    /// Accumulates parameter gradients for `dL/dlogits`.
    pub fn backward(&mut self, cache: ForwardCache, dlogits: &Tensor) -> Result<()> {
        let ForwardCache { stem, stages, decoder, head_input } = cache;
        let [b, c, h, w] = dlogits.shape;
        if c != 1 || b != head_input.n || h != head_input.h || w != head_input.w {
            return Err(Error::Shape(format!("logit gradient shape {:?} does not match forward pass", dlogits.shape)));
        }
        let dy = Act::from_tensor(dlogits);
        let mut d = self.head.backward(&head_input, &dy);
        // gradients arriving at [stem, s1, s2, s3] through skip connections
        let mut skip_grads: Vec<Option<Act>> = vec![None, None, None, None];
        for (lvl, cache) in decoder.into_iter().enumerate().rev() {
            let (dx, dskip) = self.decoder[lvl].backward(cache, d);
            if let Some(ds) = dskip {
                skip_grads[3 - lvl] = Some(ds);
            }
            d = dx;
        }
        // d is now the gradient at the stage-4 output
        for (s, caches) in stages.into_iter().enumerate().rev() {
            for (i, cache) in caches.into_iter().enumerate().rev() {
                d = self.stages[s][i].backward(cache, d);
            }
            // d is the gradient at the input of stage s, i.e. output of stage s-1 (or the stem)
            if let Some(extra) = skip_grads[s].take() {
                for (v, e) in d.data.iter_mut().zip(&extra.data) {
                    *v += e;
                }
            }
        }
        self.stem.backward(stem, d);
        Ok(())
    }

    /// Names and shapes of all parameters, in visiting order.
    pub fn param_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.shape.clone())));
        out
    }
}

impl Module for SegModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, block) in stage.iter().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.block{i}", s + 1)), f);
            }
        }
        for (l, level) in self.decoder.iter().enumerate() {
            level.visit(&join(prefix, &format!("decoder{}", l + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (i, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.block{i}", s + 1)), f);
            }
        }
        for (l, level) in self.decoder.iter_mut().enumerate() {
            level.visit_mut(&join(prefix, &format!("decoder{}", l + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl SlicePredictor for SegModel {
    fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::values;

    fn input(b: usize, h: usize, seed: u64) -> Tensor {
        Tensor::new([b, 2, h, h], values(b * 2 * h * h, seed)).unwrap()
    }

    #[test]
    fn default_config_builds() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let n = m.param_count();
        assert!(n > 1_000_000 && n < 10_000_000, "{n} parameters");
    }

    #[test]
    fn group_width_equal_to_stage_width_is_valid() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.group_width = 8;
        cfg.encoder.stage_widths = [8, 8, 8, 8];
        assert!(build_model(&cfg).is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.stage_widths[1] = 50;
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
        let mut cfg = ModelConfig::toy();
        cfg.encoder.stage_depths[2] = 0;
        assert!(build_model(&cfg).is_err());
        let mut cfg = ModelConfig::toy();
        cfg.encoder.se_ratio = 0.01;
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn shapes_and_downsampling() {
        let m = build_model(&ModelConfig::toy()).unwrap();
        let x = input(1, 64, 1);
        assert_eq!(m.forward(&x).unwrap().shape, [1, 1, 64, 64]);
        let feats = m.encoder_features(&x).unwrap();
        let sizes: Vec<usize> = feats.iter().map(|t| t.shape[2]).collect();
        assert_eq!(sizes, [32, 16, 8, 4, 2]);
        assert!(m.forward(&input(1, 100, 1)).is_err());
        assert!(m.forward(&Tensor::zeros([1, 3, 64, 64])).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ModelConfig::toy()).unwrap();
        let b = build_model(&ModelConfig::toy()).unwrap();
        let x = input(2, 32, 4);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        let c = build_model(&ModelConfig { seed: 1, ..ModelConfig::toy() }).unwrap();
        assert_ne!(a.forward(&x).unwrap(), c.forward(&x).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_parameters() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                stem_width: 4,
                stage_depths: [1, 2, 1, 1],
                stage_widths: [4, 8, 8, 8],
                group_width: 4,
                se_ratio: 0.5,
            },
            decoder_widths: [8, 8, 4, 4, 4],
            seed: 3,
        };
        let mut m = build_model(&cfg).unwrap();
        let x = input(2, 64, 5);
        let r = values(2 * 64 * 64, 6);
        let probe = |m: &SegModel| -> f64 {
            m.forward(&x).unwrap().data.iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        m.zero_grad();
        let (_, cache) = m.forward_train(&x).unwrap();
        m.backward(cache, &Tensor::new([2, 1, 64, 64], r.clone()).unwrap()).unwrap();

        let names = m.param_names();
        let mut grads: Vec<Vec<f32>> = Vec::new();
        m.visit("", &mut |_, p| grads.push(p.grad.clone()));
        let mut checked = 0;
        for (pi, (name, _)) in names.iter().enumerate() {
            // probe the largest-gradient entry of every parameter tensor
            let (idx, &g) = grads[pi]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            if g.abs() < 1e-3 {
                continue;
            }
            let mut k = 0;
            let mut set = |m: &mut SegModel, delta: f32| {
                k = 0;
                m.visit_mut("", &mut |_, p| {
                    if k == pi {
                        p.value[idx] += delta;
                    }
                    k += 1;
                });
            };
            // strongly nonlinear at random init: take the best of a few steps, with an absolute
            // floor for f32 round-off on small gradients
            let mut best = f64::INFINITY;
            let mut best_num = 0.0;
            for eps in [1e-3f32, 3e-4, 1e-4] {
                set(&mut m, eps);
                let lp = probe(&m);
                set(&mut m, -2.0 * eps);
                let lm = probe(&m);
                set(&mut m, eps);
                let num = (lp - lm) / (2.0 * eps as f64);
                let err = (num - g as f64).abs() / num.abs().max(g.abs() as f64).max(10.0);
                if err < best {
                    (best, best_num) = (err, num);
                }
            }
            assert!(best < 5e-2, "{name}[{idx}]: analytic {g} numeric {best_num}");
            checked += 1;
        }
        assert!(checked > names.len() / 2, "only {checked} of {} tensors checked", names.len());
    }
}
