//! Backbone, densely connected SiT blocks and density head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{bind_from_slice, BoundConv, Conv};
use crate::ops::ConvSpec;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::sit::{draw_alphas, eval_alphas, sit_forward, BoundSit, MixerDraw, Phase, SitBlock, SitConfig};
use crate::tensor::Tensor;

/// One backbone stage: a 3x3 convolution + ReLU, optionally followed by 2x2 max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneStage {
    pub channels: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub backbone: Vec<BackboneStage>,
    /// Number of SiT blocks.
    pub sit_count: usize,
    pub sit: SitConfig,
    /// Feed block `l` the concatenation of the backbone output and all earlier block outputs.
    pub dense: bool,
    /// Width of the hidden head convolution.
    pub head_width: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            backbone: vec![
                BackboneStage {
                    channels: 32,
                    pool: true,
                },
                BackboneStage {
                    channels: 64,
                    pool: true,
                },
                BackboneStage {
                    channels: 128,
                    pool: false,
                },
            ],
            sit_count: 6,
            sit: SitConfig::default(),
            dense: true,
            head_width: 128,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale preset: backbone 8/16/32 with two pools (stride 4), three
    /// blocks of six 8-channel groups, 32 output channels, head width 16.
    pub fn toy() -> Self {
        NetworkConfig {
            backbone: vec![
                BackboneStage {
                    channels: 8,
                    pool: true,
                },
                BackboneStage {
                    channels: 16,
                    pool: true,
                },
                BackboneStage {
                    channels: 32,
                    pool: false,
                },
            ],
            sit_count: 3,
            sit: SitConfig {
                group_width: 8,
                out_channels: 32,
                ..SitConfig::default()
            },
            head_width: 16,
            ..NetworkConfig::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone.iter().filter(|s| s.pool).count()
    }

    pub fn backbone_channels(&self) -> usize {
        self.backbone.last().map_or(self.in_channels, |s| s.channels)
    }

    /// Channels entering SiT block `l`.
    pub fn sit_input_channels(&self, l: usize) -> usize {
        let c0 = self.backbone_channels();
        match (self.dense, l) {
            (_, 0) => c0,
            (true, l) => c0 + l * self.sit.out_channels,
            (false, _) => self.sit.out_channels,
        }
    }

    /// Channels entering the head.
    pub fn head_input_channels(&self) -> usize {
        if self.sit_count == 0 {
            self.backbone_channels()
        } else {
            self.sit.out_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("network input needs at least one channel"));
        }
        if self.backbone.is_empty() {
            return Err(Error::config("backbone needs at least one stage"));
        }
        if self.backbone.iter().any(|s| s.channels == 0) || self.head_width == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be a positive finite number"));
        }
        self.sit.validate()
    }
}

/// A network and its learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub backbone: Vec<Conv<T>>,
    pub blocks: Vec<SitBlock<T>>,
    pub head: [Conv<T>; 2],
}

/// Construct a model with weights drawn from `N(0, init_std^2)` and zero biases.
pub fn build_network<T: Scalar, R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Model<T>> {
    cfg.validate()?;
    let std = cfg.init_std;
    let mut backbone = Vec::with_capacity(cfg.backbone.len());
    let mut c = cfg.in_channels;
    for stage in &cfg.backbone {
        backbone.push(Conv::init(ConvSpec::new(c, stage.channels, 3), std, rng)?);
        c = stage.channels;
    }
    let blocks = (0..cfg.sit_count)
        .map(|l| SitBlock::init(&cfg.sit, cfg.sit_input_channels(l), std, rng))
        .collect::<Result<Vec<_>>>()?;
    let head = [
        Conv::init(ConvSpec::new(cfg.head_input_channels(), cfg.head_width, 3), std, rng)?,
        Conv::init(ConvSpec::new(cfg.head_width, 1, 3), std, rng)?,
    ];
    Ok(Model {
        config: cfg.clone(),
        backbone,
        blocks,
        head,
    })
}

impl<T: Scalar> Model<T> {
    /// Build from `config.seed` using the initialisation stream.
    pub fn from_config(cfg: &NetworkConfig) -> Result<Self> {
        build_network(cfg, &mut stream(cfg.seed, Stream::Init))
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    pub fn param_count(&self) -> usize {
        self.backbone.iter().map(Conv::param_count).sum::<usize>()
            + self.blocks.iter().map(SitBlock::param_count).sum::<usize>()
            + self.head.iter().map(Conv::param_count).sum::<usize>()
    }

    /// Named parameters in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let mut f = |name: String, t| out.push((name, t));
        for (i, c) in self.backbone.iter().enumerate() {
            c.visit(&format!("backbone.{i}"), &mut f);
        }
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("sit.{l}"), &mut f);
        }
        for (i, c) in self.head.iter().enumerate() {
            c.visit(&format!("head.{i}"), &mut f);
        }
        out
    }

    /// Mutable view of [`Model::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let mut f = |name: String, t| out.push((name, t));
        for (i, c) in self.backbone.iter_mut().enumerate() {
            c.visit_mut(&format!("backbone.{i}"), &mut f);
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("sit.{l}"), &mut f);
        }
        for (i, c) in self.head.iter_mut().enumerate() {
            c.visit_mut(&format!("head.{i}"), &mut f);
        }
        out
    }

    /// One mixer draw per SiT block.
    pub fn draw_mixers<R: Rng + ?Sized>(&self, rng: &mut R, phase: Phase) -> Vec<MixerDraw> {
        self.blocks
            .iter()
            .map(|b| draw_alphas(rng, &b.config, phase))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        self.bind_with(&mut |t| tape.param(t.clone()))
    }

    /// Bind with caller-chosen variables, visited in [`Model::named_params`] order.
    pub fn bind_with(&self, var: &mut dyn FnMut(&Tensor<T>) -> Var) -> BoundModel {
        BoundModel {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(|c| c.bind_with(var)).collect(),
            blocks: self.blocks.iter().map(|b| b.bind_with(var)).collect(),
            head: [self.head[0].bind_with(var), self.head[1].bind_with(var)],
        }
    }

    /// Reuse already-registered variables, one per parameter tensor.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        bind_from_slice(vars, |f| self.bind_with(f))
    }

    /// Density prediction for `(n, in_channels, h, w)` input; draws fresh
    /// mixer coefficients from `rng` in the training phase.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor<T>, phase: Phase, rng: &mut R) -> Result<Tensor<T>> {
        let draws = self.draw_mixers(rng, phase);
        self.forward_with(batch, &draws)
    }

    /// Deterministic forward pass with explicit mixer draws.
    pub fn forward_with(&self, batch: &Tensor<T>, draws: &[MixerDraw]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let y = bound.forward(&mut tape, x, draws)?;
        Ok(tape.value(y).clone())
    }

    /// Evaluation-phase prediction.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let draws: Vec<MixerDraw> = self.blocks.iter().map(|b| eval_alphas(&b.config)).collect();
        self.forward_with(batch, &draws)
    }
}

/// Number of learnable scalars.
pub fn param_count<T: Scalar>(model: &Model<T>) -> usize {
    model.param_count()
}

/// A [`Model`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: NetworkConfig,
    pub backbone: Vec<BoundConv>,
    pub blocks: Vec<BoundSit>,
    pub head: [BoundConv; 2],
}

impl BoundModel {
    /// Parameter variables in the order of [`Model::named_params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.backbone {
            c.vars(&mut out);
        }
        for b in &self.blocks {
            b.vars(&mut out);
        }
        for c in &self.head {
            c.vars(&mut out);
        }
        out
    }

    /// Record the full network; returns the `(n, 1, h/stride, w/stride)` density node.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, draws: &[MixerDraw]) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.value(x).shape();
        let stride = cfg.stride();
        if s.c != cfg.in_channels {
            return Err(Error::shape(format!(
                "input {s} has {} channels, network expects {}",
                s.c, cfg.in_channels
            )));
        }
        if s.h % stride != 0 || s.w % stride != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!(
                "input {}x{} not divisible by output stride {stride}",
                s.h, s.w
            )));
        }
        if draws.len() != self.blocks.len() {
            return Err(Error::arg(format!(
                "{} mixer draws for {} SiT blocks",
                draws.len(),
                self.blocks.len()
            )));
        }
        let mut h = x;
        for (conv, stage) in self.backbone.iter().zip(&cfg.backbone) {
            h = conv.forward(tape, h)?;
            h = tape.relu(h)?;
            if stage.pool {
                h = tape.max_pool(h, 2)?;
            }
        }
        let mut features = vec![h];
        let mut last = h;
        for (block, draw) in self.blocks.iter().zip(draws) {
            let input = if cfg.dense { tape.concat(&features)? } else { last };
            last = sit_forward(tape, input, block, draw)?;
            features.push(last);
        }
        let y = self.head[0].forward(tape, last)?;
        let y = tape.relu(y)?;
        let y = self.head[1].forward(tape, y)?;
        // clamp keeps densities non-negative
        tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            backbone: vec![
                BackboneStage {
                    channels: 4,
                    pool: true,
                },
                BackboneStage {
                    channels: 8,
                    pool: true,
                },
            ],
            sit_count: 2,
            sit: SitConfig {
                groups: 4,
                group_width: 2,
                out_channels: 6,
                ..SitConfig::default()
            },
            head_width: 4,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn output_shape_and_stride() {
        let model: Model<f64> = Model::from_config(&tiny()).unwrap();
        let x = Tensor::from_fn([4, 1, 48, 48], |i| (i % 17) as f64 / 17.0);
        let y = model.predict(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(4, 1, 12, 12));
        assert!(y.data().iter().all(|v| *v >= 0.0));
        let bad = Tensor::zeros([1, 1, 10, 12]);
        assert!(matches!(model.predict(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_channel_arithmetic() {
        let cfg = NetworkConfig {
            backbone: vec![BackboneStage {
                channels: 128,
                pool: false,
            }],
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.sit_input_channels(3), 128 + 3 * 256);
        let no_dense = NetworkConfig {
            dense: false,
            ..cfg
        };
        assert_eq!(no_dense.sit_input_channels(3), 256);
        assert_eq!(no_dense.sit_input_channels(0), 128);
    }

    #[test]
    fn same_seed_same_params() {
        let a: Model<f64> = Model::from_config(&tiny()).unwrap();
        let b: Model<f64> = Model::from_config(&tiny()).unwrap();
        assert_eq!(a, b);
        let c: Model<f64> = Model::from_config(&NetworkConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn param_names_unique_and_vars_align() {
        let model: Model<f64> = Model::from_config(&tiny()).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape);
        let vars = bound.param_vars();
        assert_eq!(vars.len(), names.len());
        for ((_, t), v) in model.named_params().iter().zip(&vars) {
            assert_eq!(*t, tape.value(*v));
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = NetworkConfig {
            backbone: vec![],
            ..tiny()
        };
        assert!(matches!(Model::<f64>::from_config(&cfg), Err(Error::Config(_))));
    }
}
