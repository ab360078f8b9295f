//! Convolutional encoder-decoder for formula translation: token and
//! learned position embeddings, gated convolutional blocks with
//! sqrt(0.5)-scaled residual connections, single-head dot-product
//! attention in every decoder layer, an output projection, and
//! label-smoothed cross-entropy with exact analytic gradients.
//!
//! Generic over the element type: `f32` for training, `f64` for
//! finite-difference gradient checks.

use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const RESIDUAL_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Element type of the network: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: u8;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: u8 = 4;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: u8 = 8;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// State size; the embedding size always equals it.
    pub state_size: usize,
    /// Number of layers, identical for encoder and decoder.
    pub num_layers: usize,
    /// Convolution kernel width; must be odd.
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            state_size: 512,
            num_layers: 11,
            kernel_size: 3,
            dropout_rate: 0.2,
            label_smoothing: 0.1,
            max_positions: 1024,
            source_vocab_size: 0,
            target_vocab_size: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.state_size == 0 || self.num_layers == 0 {
            return Err(Error::Config("state_size and num_layers must be positive".into()));
        }
        if self.max_positions < 1 {
            return Err(Error::Config("max_positions must be >= 1".into()));
        }
        if self.source_vocab_size == 0 || self.target_vocab_size == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One gated convolution block: weight (kernel*state x 2*state) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T: Real> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Per-decoder-layer attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T: Real> {
    pub query_w: Array2<T>,
    pub query_b: Array1<T>,
    pub key_w: Array2<T>,
    pub value_w: Array2<T>,
    pub value_b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T: Real> {
    pub conv: ConvBlock<T>,
    pub attention: Attention<T>,
}

/// The full parameter set; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Real> {
    pub source_embed: Array2<T>,
    pub target_embed: Array2<T>,
    pub source_pos: Array2<T>,
    pub target_pos: Array2<T>,
    pub encoder: Vec<ConvBlock<T>>,
    pub decoder: Vec<DecoderBlock<T>>,
    pub output_w: Array2<T>,
    pub output_b: Array1<T>,
}

enum TensorRef<'a, T: Real> {
    M(&'a Array2<T>),
    V(&'a Array1<T>),
}

enum TensorMut<'a, T: Real> {
    M(&'a mut Array2<T>),
    V(&'a mut Array1<T>),
}

impl<T: Real> Params<T> {
    fn entries(&self) -> Vec<(String, TensorRef<'_, T>)> {
        let mut out: Vec<(String, TensorRef<'_, T>)> = vec![
            ("source_embed".into(), TensorRef::M(&self.source_embed)),
            ("target_embed".into(), TensorRef::M(&self.target_embed)),
            ("source_pos".into(), TensorRef::M(&self.source_pos)),
            ("target_pos".into(), TensorRef::M(&self.target_pos)),
        ];
        for (i, block) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), TensorRef::M(&block.weight)));
            out.push((format!("encoder.{i}.bias"), TensorRef::V(&block.bias)));
        }
        for (i, block) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.conv.weight"), TensorRef::M(&block.conv.weight)));
            out.push((format!("decoder.{i}.conv.bias"), TensorRef::V(&block.conv.bias)));
            out.push((format!("decoder.{i}.attn.query_w"), TensorRef::M(&block.attention.query_w)));
            out.push((format!("decoder.{i}.attn.query_b"), TensorRef::V(&block.attention.query_b)));
            out.push((format!("decoder.{i}.attn.key_w"), TensorRef::M(&block.attention.key_w)));
            out.push((format!("decoder.{i}.attn.value_w"), TensorRef::M(&block.attention.value_w)));
            out.push((format!("decoder.{i}.attn.value_b"), TensorRef::V(&block.attention.value_b)));
        }
        out.push(("output_w".into(), TensorRef::M(&self.output_w)));
        out.push(("output_b".into(), TensorRef::V(&self.output_b)));
        out
    }

    fn entries_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out: Vec<TensorMut<'_, T>> = vec![
            TensorMut::M(&mut self.source_embed),
            TensorMut::M(&mut self.target_embed),
            TensorMut::M(&mut self.source_pos),
            TensorMut::M(&mut self.target_pos),
        ];
        for block in &mut self.encoder {
            out.push(TensorMut::M(&mut block.weight));
            out.push(TensorMut::V(&mut block.bias));
        }
        for block in &mut self.decoder {
            out.push(TensorMut::M(&mut block.conv.weight));
            out.push(TensorMut::V(&mut block.conv.bias));
            out.push(TensorMut::M(&mut block.attention.query_w));
            out.push(TensorMut::V(&mut block.attention.query_b));
            out.push(TensorMut::M(&mut block.attention.key_w));
            out.push(TensorMut::M(&mut block.attention.value_w));
            out.push(TensorMut::V(&mut block.attention.value_b));
        }
        out.push(TensorMut::M(&mut self.output_w));
        out.push(TensorMut::V(&mut self.output_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.entries()
            .iter()
            .map(|(_, t)| match t {
                TensorRef::M(m) => m.len(),
                TensorRef::V(v) => v.len(),
            })
            .sum()
    }

    pub fn for_each(&self, mut f: impl FnMut(T)) {
        for (_, t) in self.entries() {
            match t {
                TensorRef::M(m) => m.iter().for_each(|&v| f(v)),
                TensorRef::V(v) => v.iter().for_each(|&v| f(v)),
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut T)) {
        for t in self.entries_mut() {
            match t {
                TensorMut::M(m) => m.iter_mut().for_each(&mut f),
                TensorMut::V(v) => v.iter_mut().for_each(&mut f),
            }
        }
    }

    /// Elementwise `self[i] = f(self[i], other[i])`.
    pub fn zip_mut_with(&mut self, other: &Params<T>, mut f: impl FnMut(&mut T, T)) {
        let theirs = other.entries();
        for (mine, (_, theirs)) in self.entries_mut().into_iter().zip(theirs) {
            match (mine, theirs) {
                (TensorMut::M(a), TensorRef::M(b)) => {
                    a.zip_mut_with(b, |x, &y| f(x, y));
                }
                (TensorMut::V(a), TensorRef::V(b)) => {
                    a.zip_mut_with(b, |x, &y| f(x, y));
                }
                _ => unreachable!("tensor order mismatch"),
            }
        }
    }

    pub fn zeros_like(&self) -> Params<T> {
        let mut out = self.clone();
        out.for_each_mut(|v| *v = T::zero());
        out
    }

    /// `self += a * other`
    pub fn scaled_add(&mut self, a: T, other: &Params<T>) {
        self.zip_mut_with(other, |x, y| *x = *x + a * y);
    }

    pub fn scale(&mut self, a: T) {
        self.for_each_mut(|v| *v = *v * a);
    }

    pub fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each(|v| {
            let v = v.as_f64();
            acc += v * v;
        });
        acc
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|v| ok &= v.as_f64().is_finite());
        ok
    }

    /// Converts the element type (used by checkpoint loading and the
    /// double-precision gradient-check mode).
    pub fn convert<U: Real>(&self) -> Params<U> {
        let m = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.as_f64()));
        let v = |a: &Array1<T>| a.mapv(|x| U::from_f64(x.as_f64()));
        Params {
            source_embed: m(&self.source_embed),
            target_embed: m(&self.target_embed),
            source_pos: m(&self.source_pos),
            target_pos: m(&self.target_pos),
            encoder: self
                .encoder
                .iter()
                .map(|b| ConvBlock {
                    weight: m(&b.weight),
                    bias: v(&b.bias),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|b| DecoderBlock {
                    conv: ConvBlock {
                        weight: m(&b.conv.weight),
                        bias: v(&b.conv.bias),
                    },
                    attention: Attention {
                        query_w: m(&b.attention.query_w),
                        query_b: v(&b.attention.query_b),
                        key_w: m(&b.attention.key_w),
                        value_w: m(&b.attention.value_w),
                        value_b: v(&b.attention.value_b),
                    },
                })
                .collect(),
            output_w: m(&self.output_w),
            output_b: v(&self.output_b),
        }
    }
}

/// The model: a config plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

/// Special ids the model assumes; fixed by the vocabulary layout.
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

/// Draws parameters from zero-mean normals with std 1/sqrt(fan_in);
/// deterministic in the config seed.
pub fn init_model<T: Real>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let d = config.state_size;
    let k = config.kernel_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut normal = move |rows: usize, cols: usize, fan_in: usize| -> Array2<T> {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        Array2::from_shape_fn((rows, cols), |_| T::from_f64(dist.sample(&mut rng)))
    };
    let conv = |normal: &mut dyn FnMut(usize, usize, usize) -> Array2<T>| ConvBlock {
        weight: normal(k * d, 2 * d, k * d),
        bias: Array1::zeros(2 * d),
    };
    let source_embed = normal(config.source_vocab_size, d, d);
    let target_embed = normal(config.target_vocab_size, d, d);
    let source_pos = normal(config.max_positions, d, d);
    let target_pos = normal(config.max_positions, d, d);
    let encoder = (0..config.num_layers).map(|_| conv(&mut normal)).collect();
    let decoder = (0..config.num_layers)
        .map(|_| DecoderBlock {
            conv: conv(&mut normal),
            attention: Attention {
                query_w: normal(d, d, d),
                query_b: Array1::zeros(d),
                key_w: normal(d, d, d),
                value_w: normal(d, d, d),
                value_b: Array1::zeros(d),
            },
        })
        .collect();
    let output_w = normal(d, config.target_vocab_size, d);
    let output_b = Array1::zeros(config.target_vocab_size);
    Ok(Model {
        config: config.clone(),
        params: Params {
            source_embed,
            target_embed,
            source_pos,
            target_pos,
            encoder,
            decoder,
            output_w,
            output_b,
        },
    })
}

/// Whether dropout is active, and the seed making it deterministic.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Logits per target position plus the row-stochastic attention map of
/// every decoder layer.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real> {
    pub logits: Array2<T>,
    pub attention: Vec<Array2<T>>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Unfolds `x` (len x d) into convolution rows (len x kernel*d) with
/// zero padding.
fn unfold<T: Real>(x: &Array2<T>, kernel: usize, pad_left: usize) -> Array2<T> {
    let (len, d) = x.dim();
    let mut out = Array2::zeros((len, kernel * d));
    for t in 0..len {
        for j in 0..kernel {
            // input row feeding slot j of output row t
            let src = t as isize + j as isize - pad_left as isize;
            if src >= 0 && (src as usize) < len {
                out.slice_mut(s![t, j * d..(j + 1) * d])
                    .assign(&x.row(src as usize));
            }
        }
    }
    out
}

/// Adjoint of [`unfold`]: scatter-adds gradient rows back.
fn fold_add<T: Real>(grad: &Array2<T>, kernel: usize, pad_left: usize, out: &mut Array2<T>) {
    let (len, _) = out.dim();
    let d = out.dim().1;
    for t in 0..len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad_left as isize;
            if src >= 0 && (src as usize) < len {
                let g = grad.slice(s![t, j * d..(j + 1) * d]);
                let mut dst = out.row_mut(src as usize);
                dst += &g;
            }
        }
    }
}

fn softmax_rows<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

struct DropoutMask<T: Real>(Option<Array2<T>>);

impl<T: Real> DropoutMask<T> {
    fn apply(&self, x: &Array2<T>) -> Array2<T> {
        match &self.0 {
            Some(mask) => x * mask,
            None => x.clone(),
        }
    }
}

struct ConvCache<T: Real> {
    mask: DropoutMask<T>,
    unfolded: Array2<T>,
    pre_glu: Array2<T>,
    gated: Array2<T>,
}

struct DecoderLayerCache<T: Real> {
    conv: ConvCache<T>,
    keys: Array2<T>,
    query: Array2<T>,
    alpha: Array2<T>,
    context_raw: Array2<T>,
}

struct ForwardCache<T: Real> {
    source_ids: Vec<usize>,
    prefix_ids: Vec<usize>,
    tgt_input: Array2<T>,
    src_mask: DropoutMask<T>,
    tgt_mask: DropoutMask<T>,
    enc_layers: Vec<ConvCache<T>>,
    enc_states: Vec<Array2<T>>,
    dec_layers: Vec<DecoderLayerCache<T>>,
    dec_states: Vec<Array2<T>>,
    values: Array2<T>,
    logits: Array2<T>,
}

struct DropoutRng {
    rng: Option<(ChaCha8Rng, Bernoulli, f64)>,
}

impl DropoutRng {
    fn new(mode: Mode, rate: f64) -> DropoutRng {
        let rng = match mode {
            Mode::Train { dropout_seed } if rate > 0.0 => Some((
                ChaCha8Rng::seed_from_u64(dropout_seed),
                Bernoulli::new(1.0 - rate).unwrap(),
                rate,
            )),
            _ => None,
        };
        DropoutRng { rng }
    }

    fn mask<T: Real>(&mut self, shape: (usize, usize)) -> DropoutMask<T> {
        match &mut self.rng {
            None => DropoutMask(None),
            Some((rng, dist, rate)) => {
                let keep_scale = T::from_f64(1.0 / (1.0 - *rate));
                let mask = Array2::from_shape_fn(shape, |_| {
                    if dist.sample(rng) {
                        keep_scale
                    } else {
                        T::zero()
                    }
                });
                DropoutMask(Some(mask))
            }
        }
    }
}

impl<T: Real> Model<T> {
    fn check_ids(&self, ids: &[usize], vocab_size: usize) -> Result<()> {
        if ids.len() > self.config.max_positions {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        for &id in ids {
            if id >= vocab_size {
                return Err(Error::IdOutOfRange {
                    id,
                    size: vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, ids: &[usize], table: &Array2<T>, pos: &Array2<T>) -> Array2<T> {
        let d = self.config.state_size;
        let mut out = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            let row = &table.row(id) + &pos.row(t);
            out.row_mut(t).assign(&row);
        }
        out
    }

    fn conv_block(
        &self,
        block: &ConvBlock<T>,
        input: &Array2<T>,
        pad_left: usize,
        mask: DropoutMask<T>,
    ) -> (Array2<T>, ConvCache<T>) {
        let d = self.config.state_size;
        let scale = T::from_f64(RESIDUAL_SCALE);
        let dropped = mask.apply(input);
        let unfolded = unfold(&dropped, self.config.kernel_size, pad_left);
        let pre_glu = unfolded.dot(&block.weight) + &block.bias;
        let value = pre_glu.slice(s![.., 0..d]);
        let gate = pre_glu.slice(s![.., d..2 * d]).mapv(sigmoid);
        let gated = &value * &gate;
        let output = (&gated + input) * scale;
        (
            output,
            ConvCache {
                mask,
                unfolded,
                pre_glu,
                gated,
            },
        )
    }

    fn forward_full(
        &self,
        source_ids: &[usize],
        target_prefix_ids: &[usize],
        mode: Mode,
    ) -> Result<ForwardCache<T>> {
        self.check_ids(source_ids, self.config.source_vocab_size)?;
        self.check_ids(target_prefix_ids, self.config.target_vocab_size)?;
        let k = self.config.kernel_size;
        let scale = T::from_f64(RESIDUAL_SCALE);
        let mut dropout = DropoutRng::new(mode, self.config.dropout_rate);
        let p = &self.params;

        // encoder
        let src_input = self.embed(source_ids, &p.source_embed, &p.source_pos);
        let src_mask = dropout.mask((src_input.dim().0, src_input.dim().1));
        let mut enc_states = vec![src_mask.apply(&src_input)];
        let mut enc_layers = Vec::with_capacity(p.encoder.len());
        for block in &p.encoder {
            let mask = dropout.mask(enc_states.last().unwrap().dim());
            let (out, cache) =
                self.conv_block(block, enc_states.last().unwrap(), (k - 1) / 2, mask);
            enc_layers.push(cache);
            enc_states.push(out);
        }
        let encoded = enc_states.last().unwrap().clone();
        let values = &encoded + &src_input;

        // decoder
        let tgt_input = self.embed(target_prefix_ids, &p.target_embed, &p.target_pos);
        let tgt_mask = dropout.mask(tgt_input.dim());
        let mut dec_states = vec![tgt_mask.apply(&tgt_input)];
        let mut dec_layers = Vec::with_capacity(p.decoder.len());
        for block in &p.decoder {
            let input = dec_states.last().unwrap();
            let mask = dropout.mask(input.dim());
            let (gated_out, conv_cache) = self.conv_block_no_residual(&block.conv, input, k - 1, mask);
            let attn = &block.attention;
            let keys = encoded.dot(&attn.key_w);
            let query = gated_out.dot(&attn.query_w) + &attn.query_b + &tgt_input;
            let alpha = softmax_rows(&query.dot(&keys.t()));
            let context_raw = alpha.dot(&values);
            let context = context_raw.dot(&attn.value_w) + &attn.value_b;
            let combined = (&gated_out + &context) * scale;
            let out = (&combined + input) * scale;
            dec_layers.push(DecoderLayerCache {
                conv: conv_cache,
                keys,
                query,
                alpha,
                context_raw,
            });
            dec_states.push(out);
        }
        let logits = dec_states.last().unwrap().dot(&p.output_w) + &p.output_b;
        Ok(ForwardCache {
            source_ids: source_ids.to_vec(),
            prefix_ids: target_prefix_ids.to_vec(),
            tgt_input,
            src_mask,
            tgt_mask,
            enc_layers,
            enc_states,
            dec_layers,
            dec_states,
            values,
            logits,
        })
    }

    /// Gated conv without the residual add (the decoder applies the
    /// residual after mixing in the attention context).
    fn conv_block_no_residual(
        &self,
        block: &ConvBlock<T>,
        input: &Array2<T>,
        pad_left: usize,
        mask: DropoutMask<T>,
    ) -> (Array2<T>, ConvCache<T>) {
        let d = self.config.state_size;
        let dropped = mask.apply(input);
        let unfolded = unfold(&dropped, self.config.kernel_size, pad_left);
        let pre_glu = unfolded.dot(&block.weight) + &block.bias;
        let value = pre_glu.slice(s![.., 0..d]);
        let gate = pre_glu.slice(s![.., d..2 * d]).mapv(sigmoid);
        let gated = &value * &gate;
        (
            gated.clone(),
            ConvCache {
                mask,
                unfolded,
                pre_glu,
                gated,
            },
        )
    }

    /// Teacher-forced forward pass.
    pub fn forward(
        &self,
        source_ids: &[usize],
        target_prefix_ids: &[usize],
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        if source_ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        let cache = self.forward_full(source_ids, target_prefix_ids, mode)?;
        Ok(ForwardOutput {
            logits: cache.logits,
            attention: cache.dec_layers.iter().map(|l| l.alpha.clone()).collect(),
        })
    }

    /// Softmax rows of the teacher-forced logits for `target_ids`
    /// (decoder input is BOS + target minus its last token).
    pub fn target_distributions(
        &self,
        source_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let prefix = decoder_prefix(target_ids)?;
        let cache = self.forward_full(source_ids, &prefix, Mode::Eval)?;
        let probs = softmax_rows(&cache.logits);
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect())
    }

    /// Mean label-smoothed cross-entropy over non-PAD target positions
    /// plus exact gradients for every parameter.
    pub fn loss_and_gradients(
        &self,
        source_ids: &[usize],
        target_ids: &[usize],
        label_smoothing: f64,
        mode: Mode,
    ) -> Result<(f64, Params<T>)> {
        if !target_ids.is_empty() && target_ids.iter().all(|&t| t == PAD_ID) {
            return Err(Error::DegenerateBatch);
        }
        let prefix = decoder_prefix(target_ids)?;
        let cache = self.forward_full(source_ids, &prefix, mode)?;
        let vocab = self.config.target_vocab_size;
        let eps = label_smoothing;
        let n_pos = target_ids.iter().filter(|&&t| t != PAD_ID).count();
        let inv_n = 1.0 / n_pos as f64;

        // loss and dlogits via log-softmax
        let mut loss = 0.0f64;
        let mut d_logits: Array2<T> = Array2::zeros(cache.logits.dim());
        for (t, &target) in target_ids.iter().enumerate() {
            if target == PAD_ID {
                continue;
            }
            let row = cache.logits.row(t);
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max).as_f64();
            let mut sum_exp = 0.0f64;
            for &v in row.iter() {
                sum_exp += (v.as_f64() - max).exp();
            }
            let log_z = max + sum_exp.ln();
            let logp_target = row[target].as_f64() - log_z;
            let logp_sum: f64 = row.iter().map(|&v| v.as_f64() - log_z).sum();
            let off_mass = if vocab > 1 {
                eps / (vocab as f64 - 1.0)
            } else {
                0.0
            };
            loss -= (1.0 - eps) * logp_target + off_mass * (logp_sum - logp_target);
            let mut d_row = d_logits.row_mut(t);
            for (j, &v) in row.iter().enumerate() {
                let p = (v.as_f64() - log_z).exp();
                let q = if j == target { 1.0 - eps } else { off_mass };
                d_row[j] = T::from_f64((p - q) * inv_n);
            }
        }
        loss *= inv_n;

        let grads = self.backward(&cache, &d_logits);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric("loss or gradient not finite".into()));
        }
        Ok((loss, grads))
    }

    fn backward(&self, cache: &ForwardCache<T>, d_logits: &Array2<T>) -> Params<T> {
        let p = &self.params;
        let k = self.config.kernel_size;
        let d = self.config.state_size;
        let scale = T::from_f64(RESIDUAL_SCALE);
        let mut g = p.zeros_like();

        // output projection
        let top = cache.dec_states.last().unwrap();
        g.output_w += &top.t().dot(d_logits);
        g.output_b += &d_logits.sum_axis(Axis(0));
        let mut d_state = d_logits.dot(&p.output_w.t());

        let mut d_values: Array2<T> = Array2::zeros(cache.values.dim());
        let mut d_encoded: Array2<T> = Array2::zeros(cache.values.dim());
        let mut d_tgt_input: Array2<T> = Array2::zeros(cache.tgt_input.dim());

        // decoder layers, top down
        for (l, block) in p.decoder.iter().enumerate().rev() {
            let layer = &cache.dec_layers[l];
            let attn = &block.attention;
            let gb = &mut g.decoder[l];
            let d_out = d_state;
            let d_combined = d_out.mapv(|v| v * scale);
            let mut d_input = d_out.mapv(|v| v * scale);
            let mut d_gated = d_combined.mapv(|v| v * scale);
            let d_context = d_combined.mapv(|v| v * scale);

            // context = context_raw . value_w + value_b
            gb.attention.value_w += &layer.context_raw.t().dot(&d_context);
            gb.attention.value_b += &d_context.sum_axis(Axis(0));
            let d_context_raw = d_context.dot(&attn.value_w.t());

            // context_raw = alpha . values
            let d_alpha = d_context_raw.dot(&cache.values.t());
            d_values += &layer.alpha.t().dot(&d_context_raw);

            // softmax backward, rowwise
            let mut d_scores = Array2::zeros(layer.alpha.dim());
            for t in 0..layer.alpha.dim().0 {
                let a = layer.alpha.row(t);
                let da = d_alpha.row(t);
                let dot = a.iter().zip(da.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                let mut ds = d_scores.row_mut(t);
                for j in 0..a.len() {
                    ds[j] = a[j] * (da[j] - dot);
                }
            }

            // scores = query . keys^T
            let d_query = d_scores.dot(&layer.keys);
            let d_keys = d_scores.t().dot(&layer.query);

            // keys = encoded . key_w
            gb.attention.key_w += &cache.enc_states.last().unwrap().t().dot(&d_keys);
            d_encoded += &d_keys.dot(&attn.key_w.t());

            // query = gated . query_w + query_b + tgt_input
            gb.attention.query_w += &layer.conv.gated.t().dot(&d_query);
            gb.attention.query_b += &d_query.sum_axis(Axis(0));
            d_gated += &d_query.dot(&attn.query_w.t());
            d_tgt_input += &d_query;

            // GLU + causal conv
            let value = layer.conv.pre_glu.slice(s![.., 0..d]);
            let gate = layer.conv.pre_glu.slice(s![.., d..2 * d]).mapv(sigmoid);
            let d_value = &d_gated * &gate;
            let d_gate_pre = &d_gated * &value * &gate * &gate.mapv(|v| T::one() - v);
            let mut d_pre = Array2::zeros(layer.conv.pre_glu.dim());
            d_pre.slice_mut(s![.., 0..d]).assign(&d_value);
            d_pre.slice_mut(s![.., d..2 * d]).assign(&d_gate_pre);
            gb.conv.weight += &layer.conv.unfolded.t().dot(&d_pre);
            gb.conv.bias += &d_pre.sum_axis(Axis(0));
            let d_unfolded = d_pre.dot(&block.conv.weight.t());
            let mut d_dropped = Array2::zeros(d_input.dim());
            fold_add(&d_unfolded, k, k - 1, &mut d_dropped);
            d_input += &layer.conv.mask.apply(&d_dropped);
            d_state = d_input;
        }
        // decoder bottom: state0 = dropout(tgt_input)
        d_tgt_input += &cache.tgt_mask.apply(&d_state);

        // values = encoded + src_input
        d_encoded += &d_values;
        let mut d_src_input = d_values;

        // encoder layers, top down
        let mut d_enc_state = d_encoded;
        for (l, block) in p.encoder.iter().enumerate().rev() {
            let layer = &cache.enc_layers[l];
            let gb = &mut g.encoder[l];
            let d_out = d_enc_state;
            let d_gated = d_out.mapv(|v| v * scale);
            let mut d_input = d_out.mapv(|v| v * scale);

            let value = layer.pre_glu.slice(s![.., 0..d]);
            let gate = layer.pre_glu.slice(s![.., d..2 * d]).mapv(sigmoid);
            let d_value = &d_gated * &gate;
            let d_gate_pre = &d_gated * &value * &gate * &gate.mapv(|v| T::one() - v);
            let mut d_pre = Array2::zeros(layer.pre_glu.dim());
            d_pre.slice_mut(s![.., 0..d]).assign(&d_value);
            d_pre.slice_mut(s![.., d..2 * d]).assign(&d_gate_pre);
            gb.weight += &layer.unfolded.t().dot(&d_pre);
            gb.bias += &d_pre.sum_axis(Axis(0));
            let d_unfolded = d_pre.dot(&block.weight.t());
            let mut d_dropped = Array2::zeros(d_input.dim());
            fold_add(&d_unfolded, k, (k - 1) / 2, &mut d_dropped);
            d_input += &layer.mask.apply(&d_dropped);
            d_enc_state = d_input;
        }
        // encoder bottom: state0 = dropout(src_input)
        d_src_input += &cache.src_mask.apply(&d_enc_state);

        // scatter embedding and position gradients
        for (t, row) in d_src_input.rows().into_iter().enumerate() {
            g.source_pos.row_mut(t).zip_mut_with(&row, |a, &b| *a = *a + b);
            let id = cache.source_ids[t];
            g.source_embed.row_mut(id).zip_mut_with(&row, |a, &b| *a = *a + b);
        }
        for (t, row) in d_tgt_input.rows().into_iter().enumerate() {
            g.target_pos.row_mut(t).zip_mut_with(&row, |a, &b| *a = *a + b);
            let id = cache.prefix_ids[t];
            g.target_embed.row_mut(id).zip_mut_with(&row, |a, &b| *a = *a + b);
        }
        g
    }
}

/// Builds the decoder input: BOS followed by the target without its
/// final token. Errors if the target is empty or its last non-PAD
/// token is not EOS (trailing PAD is batch padding and allowed).
pub fn decoder_prefix(target_ids: &[usize]) -> Result<Vec<usize>> {
    let last_real = target_ids.iter().rev().find(|&&id| id != PAD_ID);
    match last_real {
        None => Err(Error::EmptyInput),
        Some(&last) if last != EOS_ID => Err(Error::Config(
            "target sequence must end with EOS".into(),
        )),
        Some(_) => {
            let mut prefix = Vec::with_capacity(target_ids.len());
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&target_ids[..target_ids.len() - 1]);
            Ok(prefix)
        }
    }
}

impl<T: Real> Model<T> {
    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Converts the element type, keeping the config.
    pub fn convert<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.convert(),
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes config plus all named tensors in little-endian binary.
pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    w.write_u32::<LittleEndian>(config.len() as u32)?;
    w.write_all(&config)?;
    w.write_u8(T::DTYPE)?;
    let entries = model.params.entries();
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, tensor) in entries {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        let (dims, data): (Vec<u64>, Vec<T>) = match tensor {
            TensorRef::M(m) => (
                vec![m.dim().0 as u64, m.dim().1 as u64],
                m.iter().cloned().collect(),
            ),
            TensorRef::V(v) => (vec![v.len() as u64], v.iter().cloned().collect()),
        };
        w.write_u8(dims.len() as u8)?;
        for d in dims {
            w.write_u64::<LittleEndian>(d)?;
        }
        for v in data {
            match T::DTYPE {
                4 => w.write_f32::<LittleEndian>(v.as_f64() as f32)?,
                _ => w.write_f64::<LittleEndian>(v.as_f64())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, converting the stored element type to `T` if
/// they differ.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = r.read_u32::<LittleEndian>()? as usize;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| Error::Checkpoint(format!("config parse failed: {e}")))?;
    let dtype = r.read_u8()?;
    if dtype != 4 && dtype != 8 {
        return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut model: Model<T> = init_model(&config)?;
    let mut loaded = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.read_u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let total: usize = dims.iter().product();
        let mut data = Vec::with_capacity(total);
        for _ in 0..total {
            let v = if dtype == 4 {
                r.read_f32::<LittleEndian>()? as f64
            } else {
                r.read_f64::<LittleEndian>()?
            };
            data.push(T::from_f64(v));
        }
        loaded.insert(name, (dims, data));
    }
    for (name, tensor) in model.params.entries() {
        let expected: Vec<usize> = match tensor {
            TensorRef::M(m) => vec![m.dim().0, m.dim().1],
            TensorRef::V(v) => vec![v.len()],
        };
        let (dims, _) = loaded
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if *dims != expected {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {dims:?}, expected {expected:?}"
            )));
        }
    }
    let names: Vec<String> = {
        let entries = model.params.entries();
        entries.into_iter().map(|(n, _)| n).collect()
    };
    for (name, tensor_mut) in names.into_iter().zip(model.params.entries_mut()) {
        let (dims, data) = loaded.remove(&name).unwrap();
        match tensor_mut {
            TensorMut::M(m) => {
                *m = Array2::from_shape_vec((dims[0], dims[1]), data)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
            TensorMut::V(v) => {
                *v = Array1::from_vec(data);
            }
        }
    }
    Ok(model)
}
