//! Whole-network assembly: stem layer, identity residual blocks, dropout,
//! global average pooling and the affine classifier head.
//!
//! Every convolutional layer runs conv -> BN -> ReLU -> channel shuffle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv1d_backward, ConvLayer, ConvSpec};
use super::norm::{BatchNormState, BnCache, Mode};
use super::ops::{
    affine_backward, affine_forward, channel_shuffle, channel_shuffle_backward, dropout,
    dropout_backward, global_average_pool, global_average_pool_backward, relu, relu_backward,
};
use super::tensor::{Matrix, Real, Tensor3};
use crate::{Error, Result, EPOCH_LEN, N_CLASSES};

/// One conv -> BN -> ReLU -> shuffle layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub conv: ConvSpec,
    pub shuffle_groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub layers: [LayerConfig; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_len: usize,
    pub n_classes: usize,
    pub stem: LayerConfig,
    pub blocks: Vec<BlockConfig>,
    pub dropout_p: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    /// Stem 1->128 (k 50, stride 6) giving length 492, two residual blocks of
    /// 128->128 grouped convs (k 7, g 16, same padding), shuffle 16 after
    /// every conv, dropout 0.5, GAP and a 128x5 head.
    fn default() -> Self {
        let block_layer = LayerConfig {
            conv: ConvSpec::new(128, 128, 7, 16, 1, 3),
            shuffle_groups: 16,
        };
        Self {
            input_channels: 1,
            input_len: EPOCH_LEN,
            n_classes: N_CLASSES,
            stem: LayerConfig {
                conv: ConvSpec::new(1, 128, 50, 1, 6, 0),
                shuffle_groups: 16,
            },
            blocks: vec![
                BlockConfig {
                    layers: [block_layer; 2]
                };
                2
            ],
            dropout_p: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Checks every structural constraint and returns the feature length
    /// after each conv layer, in layer order.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input_channels != self.stem.conv.c_in {
            return Err(Error::config(format!(
                "stem expects {} channels but input has {}",
                self.stem.conv.c_in, self.input_channels
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p {} not in [0, 1)",
                self.dropout_p
            )));
        }
        let mut lens = Vec::with_capacity(1 + 2 * self.blocks.len());
        let check_layer = |layer: &LayerConfig, len: usize| -> Result<usize> {
            layer.conv.validate()?;
            if layer.shuffle_groups == 0 || layer.conv.c_out % layer.shuffle_groups != 0 {
                return Err(Error::config(format!(
                    "shuffle groups {} do not divide {} channels",
                    layer.shuffle_groups, layer.conv.c_out
                )));
            }
            layer.conv.output_len(len).map_err(|e| Error::config(e.to_string()))
        };
        let mut len = check_layer(&self.stem, self.input_len)?;
        let mut channels = self.stem.conv.c_out;
        lens.push(len);
        for (b, block) in self.blocks.iter().enumerate() {
            let (in_c, in_len) = (channels, len);
            for layer in &block.layers {
                if layer.conv.c_in != channels {
                    return Err(Error::config(format!(
                        "block {b}: conv expects {} channels, previous layer gives {channels}",
                        layer.conv.c_in
                    )));
                }
                len = check_layer(layer, len)?;
                channels = layer.conv.c_out;
                lens.push(len);
            }
            if channels != in_c || len != in_len {
                return Err(Error::config(format!(
                    "block {b} maps ({in_c}, {in_len}) to ({channels}, {len}); identity skip needs equal shapes"
                )));
            }
        }
        Ok(lens)
    }

    /// Width of the pooled feature vector, i.e. the head's input size.
    pub fn head_inputs(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.stem.conv.c_out, |b| b.layers[1].conv.c_out)
    }

    pub fn layer_configs(&self) -> Vec<LayerConfig> {
        let mut out = vec![self.stem];
        for b in &self.blocks {
            out.extend_from_slice(&b.layers);
        }
        out
    }

    /// Same config with `n` copies of the first residual block (or of a
    /// same-padded k=7 block matching the stem width when there is none).
    pub fn with_block_count(&self, n: usize) -> Self {
        let template = self.blocks.first().copied().unwrap_or_else(|| {
            let c = self.stem.conv.c_out;
            let layer = LayerConfig {
                conv: ConvSpec::new(c, c, 7, 1, 1, 3),
                shuffle_groups: 1,
            };
            BlockConfig { layers: [layer; 2] }
        });
        Self {
            blocks: vec![template; n],
            ..self.clone()
        }
    }

    /// Same config with every residual-block conv set to `g` groups.
    pub fn with_block_groups(&self, g: usize) -> Self {
        let mut cfg = self.clone();
        for b in &mut cfg.blocks {
            for l in &mut b.layers {
                l.conv.g = g;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub layer: ConvLayer<T>,
    pub shuffle_groups: usize,
}

#[derive(Debug, Clone)]
struct UnitCache<T> {
    input: Tensor3<T>,
    bn: BnCache<T>,
    pre_relu: Tensor3<T>,
}

impl<T: Real> ConvUnit<T> {
    fn forward_eval(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        let z = self.layer.forward(x)?;
        let y = self.layer.bn.forward_eval(&z)?;
        channel_shuffle(&relu(&y), self.shuffle_groups)
    }

    fn forward_train(&mut self, x: &Tensor3<T>) -> Result<(Tensor3<T>, UnitCache<T>)> {
        let z = self.layer.forward(x)?;
        let (y, bn) = self.layer.bn.forward_train(&z)?;
        let out = channel_shuffle(&relu(&y), self.shuffle_groups)?;
        Ok((
            out,
            UnitCache {
                input: x.clone(),
                bn,
                pre_relu: y,
            },
        ))
    }

    fn backward(
        &self,
        cache: &UnitCache<T>,
        grad_out: &Tensor3<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor3<T>>, UnitGrads<T>)> {
        let g = channel_shuffle_backward(grad_out, self.shuffle_groups)?;
        let g = relu_backward(&cache.pre_relu, &g);
        let (gz, gamma, beta) = self.layer.bn.backward_train(&cache.bn, &g)?;
        let spec = &self.layer.spec;
        let cg = conv1d_backward(spec, &self.layer.weight, &cache.input, &gz, need_input_grad)?;
        Ok((
            cg.input,
            UnitGrads {
                weight: cg.weight,
                bias: cg.bias,
                gamma,
                beta,
            },
        ))
    }
}

struct UnitGrads<T> {
    weight: Vec<T>,
    bias: Vec<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
}

/// Two conv units with an identity skip: `y = F(x) + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub units: [ConvUnit<T>; 2],
}

impl<T: Real> ResidualBlock<T> {
    pub fn forward(&mut self, x: &Tensor3<T>, mode: Mode) -> Result<Tensor3<T>> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => Ok(self.forward_train(x)?.0),
        }
    }

    pub fn forward_eval(&self, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        let h = self.units[0].forward_eval(x)?;
        let f = self.units[1].forward_eval(&h)?;
        f.add(x)
    }

    fn forward_train(&mut self, x: &Tensor3<T>) -> Result<(Tensor3<T>, [UnitCache<T>; 2])> {
        let (h, c0) = self.units[0].forward_train(x)?;
        let (f, c1) = self.units[1].forward_train(&h)?;
        Ok((f.add(x)?, [c0, c1]))
    }
}

/// Everything the backward pass needs from one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    stem: UnitCache<T>,
    blocks: Vec<[UnitCache<T>; 2]>,
    dropout_mask: Option<Vec<T>>,
    feature_len: usize,
    pooled: Matrix<T>,
}

/// Parameter gradients in [`Model::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn scale(&mut self, c: T) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= c;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub stem: ConvUnit<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (eps, mom) = (config.bn_eps, config.bn_momentum);
        let unit = |lc: &LayerConfig, rng: &mut ChaCha8Rng| -> Result<ConvUnit<T>> {
            Ok(ConvUnit {
                layer: ConvLayer::init(lc.conv, eps, mom, rng)?,
                shuffle_groups: lc.shuffle_groups,
            })
        };
        let stem = unit(&config.stem, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for b in &config.blocks {
            let u0 = unit(&b.layers[0], &mut rng)?;
            let u1 = unit(&b.layers[1], &mut rng)?;
            blocks.push(ResidualBlock { units: [u0, u1] });
        }
        let n_in = config.head_inputs();
        let n_out = config.n_classes;
        let bound = 1.0 / (n_in as f64).sqrt();
        let head_weight = (0..n_in * n_out)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let head_bias = (0..n_out)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Ok(Self {
            config,
            stem,
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_inputs(&self) -> usize {
        self.config.head_inputs()
    }

    /// Conv units in forward order: stem, then both units of each block.
    pub fn units(&self) -> Vec<&ConvUnit<T>> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.push(&b.units[0]);
            out.push(&b.units[1]);
        }
        out
    }

    pub fn units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        let mut out = vec![&mut self.stem];
        for b in &mut self.blocks {
            let [u0, u1] = &mut b.units;
            out.push(u0);
            out.push(u1);
        }
        out
    }

    pub fn bn_layers(&self) -> Vec<&BatchNormState<T>> {
        self.units().into_iter().map(|u| &u.layer.bn).collect()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        self.units_mut().into_iter().map(|u| &mut u.layer.bn).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut unit = |prefix: String| {
            for p in ["weight", "bias", "bn.gamma", "bn.beta"] {
                names.push(format!("{prefix}.{p}"));
            }
        };
        unit("stem".into());
        for b in 0..self.blocks.len() {
            unit(format!("blocks.{b}.conv0"));
            unit(format!("blocks.{b}.conv1"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Trainable tensors in [`Model::param_names`] order.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for u in self.units() {
            out.push(&u.layer.weight);
            out.push(&u.layer.bias);
            out.push(&u.layer.bn.gamma);
            out.push(&u.layer.bn.beta);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let Model {
            stem,
            blocks,
            head_weight,
            head_bias,
            ..
        } = self;
        let mut units: Vec<&mut ConvUnit<T>> = vec![stem];
        for b in blocks.iter_mut() {
            let [u0, u1] = &mut b.units;
            units.push(u0);
            units.push(u1);
        }
        let mut out: Vec<&mut [T]> = Vec::new();
        for u in units {
            let l = &mut u.layer;
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
        }
        out.push(head_weight);
        out.push(head_bias);
        out
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<()> {
        if x.channels() != self.config.input_channels || x.len() != self.config.input_len {
            return Err(Error::shape(format!(
                "model expects (N, {}, {}) input, got {:?}",
                self.config.input_channels,
                self.config.input_len,
                x.shape()
            )));
        }
        Ok(())
    }

    fn head(&self, features: &Tensor3<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let pooled = global_average_pool(features)?;
        let logits = affine_forward(&self.head_weight, &self.head_bias, self.head_inputs(), &pooled)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((pooled, logits))
    }

    /// Pre-softmax logits with running BN statistics. Pure in the model and
    /// input; safe to call from many threads.
    pub fn forward_eval(&self, x: &Tensor3<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = self.stem.forward_eval(x)?;
        for b in &self.blocks {
            h = b.forward_eval(&h)?;
        }
        Ok(self.head(&h)?.1)
    }

    /// Eval-mode pass that reports each conv output (the BN input) to `hook`
    /// with its unit index. Stops after unit `stop_at` when given.
    pub fn observe_bn_inputs(
        &self,
        x: &Tensor3<T>,
        stop_at: Option<usize>,
        hook: &mut dyn FnMut(usize, &Tensor3<T>),
    ) -> Result<()> {
        self.check_input(x)?;
        let run_unit = |u: &ConvUnit<T>,
                        idx: usize,
                        x: &Tensor3<T>,
                        hook: &mut dyn FnMut(usize, &Tensor3<T>)|
         -> Result<Tensor3<T>> {
            let z = u.layer.forward(x)?;
            hook(idx, &z);
            let y = u.layer.bn.forward_eval(&z)?;
            channel_shuffle(&relu(&y), u.shuffle_groups)
        };
        let done = |idx: usize| stop_at.is_some_and(|s| idx >= s);
        let mut h = run_unit(&self.stem, 0, x, hook)?;
        if done(0) {
            return Ok(());
        }
        for (b, block) in self.blocks.iter().enumerate() {
            let i0 = 1 + 2 * b;
            let mid = run_unit(&block.units[0], i0, &h, hook)?;
            if done(i0) {
                return Ok(());
            }
            let f = run_unit(&block.units[1], i0 + 1, &mid, hook)?;
            if done(i0 + 1) {
                return Ok(());
            }
            h = f.add(&h)?;
        }
        Ok(())
    }

    /// Train-mode pass: batch statistics in every BN (running averages are
    /// updated) and dropout drawn from `dropout_seed`.
    pub fn forward_train(
        &mut self,
        x: &Tensor3<T>,
        dropout_seed: u64,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let (mut h, stem) = self.stem.forward_train(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (out, caches) = b.forward_train(&h)?;
            blocks.push(caches);
            h = out;
        }
        let (dropped, mask) = dropout(&h, self.config.dropout_p, Mode::Train, dropout_seed)?;
        let (pooled, logits) = self.head(&dropped)?;
        Ok((
            logits,
            ForwardCache {
                stem,
                blocks,
                dropout_mask: mask,
                feature_len: dropped.len(),
                pooled,
            },
        ))
    }

    /// Reverse-mode gradients of a loss whose gradient with respect to the
    /// logits is `grad_logits`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Matrix<T>) -> Result<Gradients<T>> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::shape("forward cache was produced by a different model"));
        }
        if grad_logits.rows() != cache.pooled.rows() || grad_logits.cols() != self.config.n_classes {
            return Err(Error::shape(format!(
                "logit gradient is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                cache.pooled.rows(),
                self.config.n_classes
            )));
        }
        let n_in = self.head_inputs();
        let (g_pooled, g_head_w, g_head_b) =
            affine_backward(&self.head_weight, n_in, &cache.pooled, grad_logits);
        let g = global_average_pool_backward(&g_pooled, cache.feature_len);
        let mut g = dropout_backward(&g, cache.dropout_mask.as_deref());

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, caches) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (g_mid, u1) = block.units[1].backward(&caches[1], &g, true)?;
            let g_mid = g_mid.expect("input gradient requested");
            let (g_in, u0) = block.units[0].backward(&caches[0], &g_mid, true)?;
            g = g_in.expect("input gradient requested").add(&g)?;
            block_grads.push([u0, u1]);
        }
        block_grads.reverse();
        let (_, stem) = self.stem.backward(&cache.stem, &g, false)?;

        let mut tensors = Vec::new();
        let mut push = |u: UnitGrads<T>| {
            tensors.push(u.weight);
            tensors.push(u.bias);
            tensors.push(u.gamma);
            tensors.push(u.beta);
        };
        push(stem);
        for [u0, u1] in block_grads {
            push(u0);
            push(u1);
        }
        tensors.push(g_head_w);
        tensors.push(g_head_b);
        Ok(Gradients { tensors })
    }

    /// Copies every parameter and BN statistic, converting precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |u: &ConvUnit<T>| ConvUnit {
            layer: ConvLayer {
                spec: u.layer.spec,
                weight: cast_vec(&u.layer.weight),
                bias: cast_vec(&u.layer.bias),
                bn: BatchNormState {
                    gamma: cast_vec(&u.layer.bn.gamma),
                    beta: cast_vec(&u.layer.bn.beta),
                    run_mean: cast_vec(&u.layer.bn.run_mean),
                    run_var: cast_vec(&u.layer.bn.run_var),
                    eps: u.layer.bn.eps,
                    momentum: u.layer.bn.momentum,
                },
            },
            shuffle_groups: u.shuffle_groups,
        };
        Model {
            config: self.config.clone(),
            stem: conv(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    units: [conv(&b.units[0]), conv(&b.units[1])],
                })
                .collect(),
            head_weight: cast_vec(&self.head_weight),
            head_bias: cast_vec(&self.head_bias),
        }
    }
}

fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::from_f64(x.to_f64())).collect()
}
