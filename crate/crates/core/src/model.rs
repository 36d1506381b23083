//! Transformer encoder over group features and autoregressive decoder.
//!
//! Pre-norm blocks with GELU feed-forward layers. Individual-image features
//! get a learned position embedding; every feature gets a slot embedding for
//! its kind (individual, aggregate, σ).

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    build_encoder_features_on, normalize_group_size, AggregationVars, Averaging, EncoderFeatures, FeatureConfig,
    FeatureKind, ImageGroup,
};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Tape, Tensor, Var};
use crate::tokenize::{TokenSeq, BOS};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Examples per tape when computing batch gradients. Fixed so that the
/// reduction order does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MISM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image embedding dimension.
    pub k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum caption content tokens.
    pub max_len: usize,
    /// Fixed group size for dense averaging and individual features.
    pub n_model: usize,
    /// Self-attention aggregation width.
    pub m: usize,
    pub feature_config: FeatureConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 64,
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            vocab_size: 0,
            max_len: crate::tokenize::DEFAULT_MAX_LEN,
            n_model: 8,
            m: 64,
            feature_config: FeatureConfig::new(false, Averaging::Dense, true),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("k", self.k),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("n_model", self.n_model),
            ("m", self.m),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        self.feature_config.validate()
    }

    /// Names of architecture fields that differ. Group size, aggregation
    /// width and feature inputs may differ between a pretrained and a
    /// finetuned model; everything else must match.
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut diff = Vec::new();
        let pairs = [
            ("k", self.k, other.k),
            ("d_model", self.d_model, other.d_model),
            ("n_heads", self.n_heads, other.n_heads),
            ("n_enc_layers", self.n_enc_layers, other.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers, other.n_dec_layers),
            ("d_ff", self.d_ff, other.d_ff),
            ("vocab_size", self.vocab_size, other.vocab_size),
            ("max_len", self.max_len, other.max_len),
        ];
        for (name, a, b) in pairs {
            if a != b {
                diff.push(name);
            }
        }
        diff
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        use Init::*;
        let (k, d, v) = (self.k, self.d_model, self.vocab_size);
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

        match self.feature_config.averaging {
            Averaging::Dense => add("agg.h_dense".into(), vec![self.n_model, k * self.n_model], Normal),
            Averaging::SelfAttn => {
                add("agg.h1".into(), vec![k, self.m], Normal);
                add("agg.h2".into(), vec![k, self.m], Normal);
            }
            _ => {}
        }
        add("enc.in.w".into(), vec![k, d], Normal);
        add("enc.in.b".into(), vec![d], Zeros);
        add("enc.slot".into(), vec![FeatureKind::COUNT, d], Normal);
        if self.feature_config.use_individual {
            add("enc.pos".into(), vec![self.n_model, d], Normal);
        }
        let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                add(format!("{p}.{w}"), vec![d, d], Normal);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                add(format!("{p}.{b}"), vec![d], Zeros);
            }
        };
        let ln = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
            add(format!("{p}.g"), vec![d], Ones);
            add(format!("{p}.b"), vec![d], Zeros);
        };
        let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
            add(format!("{p}.w1"), vec![d, self.d_ff], Normal);
            add(format!("{p}.b1"), vec![self.d_ff], Zeros);
            add(format!("{p}.w2"), vec![self.d_ff, d], Normal);
            add(format!("{p}.b2"), vec![d], Zeros);
        };
        for l in 0..self.n_enc_layers {
            ln(&mut add, &format!("enc.L{l}.ln1"));
            attn(&mut add, &format!("enc.L{l}.attn"));
            ln(&mut add, &format!("enc.L{l}.ln2"));
            ffn(&mut add, &format!("enc.L{l}.ffn"));
        }
        ln(&mut add, "enc.ln_f");
        add("dec.tok".into(), vec![v, d], Normal);
        add("dec.pos".into(), vec![self.max_len + 1, d], Normal);
        for l in 0..self.n_dec_layers {
            ln(&mut add, &format!("dec.L{l}.ln1"));
            attn(&mut add, &format!("dec.L{l}.self"));
            ln(&mut add, &format!("dec.L{l}.ln2"));
            attn(&mut add, &format!("dec.L{l}.cross"));
            ln(&mut add, &format!("dec.L{l}.ln3"));
            ffn(&mut add, &format!("dec.L{l}.ffn"));
        }
        ln(&mut add, "dec.ln_f");
        add("dec.out.w".into(), vec![d, v], Normal);
        add("dec.out.b".into(), vec![v], Zeros);
        specs
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Named learnable tensors. Iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ModelParameters {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Rounds every value through fp32, as a checkpoint would store it.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Encoder states for one group, `S × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
}

/// One training pair: a group (already size-normalized if the config needs
/// it) and its framed caption.
#[derive(Clone, Debug)]
pub struct Example {
    pub group: ImageGroup,
    pub target: TokenSeq,
}

/// Tape handles for every parameter.
pub struct Bound<'m> {
    vars: HashMap<&'m str, Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
    }

    /// Substitutes another tape value for a parameter, e.g. to check
    /// gradients of a subset.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))?;
        *slot = var;
        Ok(())
    }

    fn aggregation(&self) -> AggregationVars {
        AggregationVars {
            h_dense: self.vars.get("agg.h_dense").copied(),
            h1: self.vars.get("agg.h1").copied(),
            h2: self.vars.get("agg.h2").copied(),
        }
    }
}

/// Loss summed over target tokens, with its gradient.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub nll_sum: f64,
    pub n_tokens: usize,
    /// Gradient of the mean per-token loss, keyed like the parameters.
    pub grads: BTreeMap<String, Tensor>,
}

impl BatchGradients {
    pub fn mean_loss(&self) -> f64 {
        self.nll_sum / self.n_tokens as f64
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
    /// Trap NaN/Inf in every op.
    pub strict: bool,
}

/// FNV-1a, for stable per-group seeds.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Model {
    /// Truncated-normal (±2σ, σ = 0.02) weights, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut specs = config.param_specs();
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ModelParameters::default();
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Normal => {
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|_| loop {
                            let x: f64 = normal.sample(&mut rng);
                            if x.abs() <= 2.0 * INIT_STD {
                                break x;
                            }
                        })
                        .collect();
                    Tensor::new(shape, data)?
                }
            };
            params.insert(name, t);
        }
        Ok(Model {
            config,
            params,
            strict: true,
        })
    }

    pub fn bind<'m>(&'m self, tape: &mut Tape, requires_grad: bool) -> Result<Bound<'m>> {
        let mut vars = HashMap::with_capacity(self.params.len());
        for (name, t) in &self.params.tensors {
            vars.insert(name.as_str(), tape.leaf_shared(Arc::clone(t), requires_grad)?);
        }
        Ok(Bound { vars })
    }

    /// Resamples the group to `n_model` images when the feature config
    /// needs a fixed size. The sampling seed derives from the group id, so
    /// the same group is always resampled the same way.
    pub fn prepare_group<'g>(&self, group: &'g ImageGroup) -> Result<Cow<'g, ImageGroup>> {
        if group.k() != self.config.k {
            return Err(Error::dim(
                "encode",
                &[group.n(), group.k()],
                &[group.n(), self.config.k],
            ));
        }
        if self.config.feature_config.needs_fixed_size() && group.n() != self.config.n_model {
            let seed = stable_hash(&group.group_id);
            return Ok(Cow::Owned(normalize_group_size(group, self.config.n_model, seed)?));
        }
        Ok(Cow::Borrowed(group))
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, x: Var, w: &str, bias: &str) -> Result<Var> {
        let y = tape.matmul(x, b.get(w)?)?;
        tape.add_row(y, b.get(bias)?)
    }

    fn layer_norm(&self, tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let g = b.get(&format!("{prefix}.g"))?;
        let bias = b.get(&format!("{prefix}.b"))?;
        tape.layer_norm(x, g, bias, LN_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        query: Var,
        memory: Var,
        causal: bool,
        trace: &mut Option<Vec<Var>>,
    ) -> Result<Var> {
        let q = self.linear(tape, b, query, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(tape, b, memory, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(tape, b, memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let p = if causal {
                tape.causal_softmax(scores)?
            } else {
                tape.softmax(scores)?
            };
            if let Some(t) = trace.as_mut() {
                t.push(p);
            }
            outs.push(tape.matmul(p, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.linear(tape, b, joined, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&self, tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, b, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = tape.gelu(h)?;
        self.linear(tape, b, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Encoder over already-built feature rows.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        features: &EncoderFeatures,
        trace: &mut Option<Vec<Var>>,
    ) -> Result<Var> {
        let s = features.kinds.len();
        if s == 0 {
            return Err(Error::Contract("encoder needs at least one feature".into()));
        }
        let fshape = tape.shape(features.values).to_vec();
        if fshape != [s, self.config.k] {
            return Err(Error::dim("encode", &fshape, &[s, self.config.k]));
        }
        let mut x = self.linear(tape, b, features.values, "enc.in.w", "enc.in.b")?;
        let kinds: Vec<usize> = features.kinds.iter().map(|k| *k as usize).collect();
        let slots = tape.gather_rows(b.get("enc.slot")?, &kinds)?;
        x = tape.add(x, slots)?;

        let n_ind = features.kinds.iter().filter(|k| **k == FeatureKind::Individual).count();
        if n_ind > 0 {
            if n_ind > self.config.n_model {
                return Err(Error::Contract(format!(
                    "{n_ind} individual features exceed the {} learned positions",
                    self.config.n_model
                )));
            }
            let positions: Vec<usize> = (0..n_ind).collect();
            let mut pos = tape.gather_rows(b.get("enc.pos")?, &positions)?;
            if n_ind < s {
                let pad = tape.constant(Tensor::zeros(&[s - n_ind, self.config.d_model]))?;
                pos = tape.concat_rows(&[pos, pad])?;
            }
            x = tape.add(x, pos)?;
        }

        for l in 0..self.config.n_enc_layers {
            let h = self.layer_norm(tape, b, x, &format!("enc.L{l}.ln1"))?;
            let a = self.attention(tape, b, &format!("enc.L{l}.attn"), h, h, false, trace)?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, b, x, &format!("enc.L{l}.ln2"))?;
            let f = self.feed_forward(tape, b, h, &format!("enc.L{l}.ffn"))?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, b, x, "enc.ln_f")
    }

    /// Group → features → encoder states, recorded on `tape`.
    pub fn encode_group_on(&self, tape: &mut Tape, b: &Bound, group: &ImageGroup) -> Result<Var> {
        let group = self.prepare_group(group)?;
        let e = tape.constant(group.embeddings.clone())?;
        let feats = build_encoder_features_on(tape, e, &self.config.feature_config, &b.aggregation())?;
        self.encode_on(tape, b, &feats, &mut None)
    }

    /// Logits for every position of `input` (`T × vocab`).
    pub fn decode_on(&self, tape: &mut Tape, b: &Bound, enc: Var, input: &[u32]) -> Result<Var> {
        let t = input.len();
        if t == 0 || t > self.config.max_len + 1 {
            return Err(Error::Contract(format!(
                "decoder input length {t} outside 1..={}",
                self.config.max_len + 1
            )));
        }
        let ids: Vec<usize> = input.iter().map(|&i| i as usize).collect();
        let tok = tape.gather_rows(b.get("dec.tok")?, &ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(b.get("dec.pos")?, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut no_trace = None;
        for l in 0..self.config.n_dec_layers {
            let h = self.layer_norm(tape, b, x, &format!("dec.L{l}.ln1"))?;
            let a = self.attention(tape, b, &format!("dec.L{l}.self"), h, h, true, &mut no_trace)?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, b, x, &format!("dec.L{l}.ln2"))?;
            let c = self.attention(tape, b, &format!("dec.L{l}.cross"), h, enc, false, &mut no_trace)?;
            x = tape.add(x, c)?;
            let h = self.layer_norm(tape, b, x, &format!("dec.L{l}.ln3"))?;
            let f = self.feed_forward(tape, b, h, &format!("dec.L{l}.ffn"))?;
            x = tape.add(x, f)?;
        }
        let x = self.layer_norm(tape, b, x, "dec.ln_f")?;
        self.linear(tape, b, x, "dec.out.w", "dec.out.b")
    }

    /// Teacher-forced summed NLL of one example and its token count.
    pub fn example_nll_on(&self, tape: &mut Tape, b: &Bound, ex: &Example) -> Result<(Var, usize)> {
        let ids = &ex.target.ids;
        if ids.len() < 2 || ids[0] != BOS {
            return Err(Error::Contract(
                "target must be BOS-framed with at least one target token".into(),
            ));
        }
        if ids.len() > self.config.max_len + 2 {
            return Err(Error::Contract(format!(
                "target of {} ids exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Config(format!(
                "token id {bad} does not fit a vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let enc = self.encode_group_on(tape, b, &ex.group)?;
        let logits = self.decode_on(tape, b, enc, &ids[..ids.len() - 1])?;
        let targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
        Ok((tape.cross_entropy_sum(logits, &targets)?, targets.len()))
    }

    /// Mean per-token negative log-likelihood over a batch.
    pub fn mle_loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("mle_loss of an empty batch".into()));
        }
        let mut tape = Tape::new(self.strict);
        let b = self.bind(&mut tape, false)?;
        let (mut sum, mut count) = (0.0, 0);
        for ex in batch {
            let (nll, n) = self.example_nll_on(&mut tape, &b, ex)?;
            sum += tape.value(nll).item();
            count += n;
        }
        Ok(sum / count as f64)
    }

    /// Mean per-token loss and its gradient. Examples are processed in
    /// fixed-size chunks, possibly in parallel, and reduced in chunk order.
    pub fn loss_and_grads(&self, batch: &[Example]) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(Error::Contract("mle_loss of an empty batch".into()));
        }
        let names: Vec<&str> = self.params.names().collect();
        let chunks: Vec<Result<(f64, usize, Vec<Tensor>)>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new(self.strict);
                let b = self.bind(&mut tape, true)?;
                let mut total: Option<Var> = None;
                let mut count = 0;
                for ex in chunk {
                    let (nll, n) = self.example_nll_on(&mut tape, &b, ex)?;
                    count += n;
                    total = Some(match total {
                        Some(t) => tape.add(t, nll)?,
                        None => nll,
                    });
                }
                let total = total.expect("chunk is non-empty");
                let sum = tape.value(total).item();
                let vars: Vec<Var> = names.iter().map(|n| b.get(n)).collect::<Result<_>>()?;
                drop(b);
                let mut grads = tape.backward(total)?;
                let gs = vars
                    .iter()
                    .zip(&names)
                    .map(|(&v, n)| {
                        grads
                            .take(v)
                            .unwrap_or_else(|| Tensor::zeros(self.params.get(n).unwrap().shape()))
                    })
                    .collect();
                Ok((sum, count, gs))
            })
            .collect();

        let mut nll_sum = 0.0;
        let mut n_tokens = 0;
        let mut acc: Option<Vec<Tensor>> = None;
        for chunk in chunks {
            let (sum, count, gs) = chunk?;
            nll_sum += sum;
            n_tokens += count;
            match acc.as_mut() {
                None => acc = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(gs) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let scale = 1.0 / n_tokens as f64;
        let grads = names
            .iter()
            .zip(acc.expect("batch is non-empty"))
            .map(|(n, mut g)| {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                (n.to_string(), g)
            })
            .collect();
        Ok(BatchGradients {
            nll_sum,
            n_tokens,
            grads,
        })
    }

    pub fn encode(&self, group: &ImageGroup) -> Result<EncoderOutput> {
        Ok(self.encode_traced(group)?.0)
    }

    /// Encoder states plus every encoder attention map (per layer, per head).
    pub fn encode_traced(&self, group: &ImageGroup) -> Result<(EncoderOutput, Vec<Tensor>)> {
        let mut tape = Tape::new(self.strict);
        let b = self.bind(&mut tape, false)?;
        let group = self.prepare_group(group)?;
        let e = tape.constant(group.embeddings.clone())?;
        let feats = build_encoder_features_on(&mut tape, e, &self.config.feature_config, &b.aggregation())?;
        let mut trace = Some(Vec::new());
        let out = self.encode_on(&mut tape, &b, &feats, &mut trace)?;
        let maps = trace.unwrap().into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((
            EncoderOutput {
                states: tape.value(out).clone(),
            },
            maps,
        ))
    }

    /// Logits for every prefix position.
    pub fn decode_all(&self, enc: &EncoderOutput, prefix: &[u32]) -> Result<Tensor> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Contract("decoder prefix must start with BOS".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside the vocabulary")));
        }
        let mut tape = Tape::new(self.strict);
        let b = self.bind(&mut tape, false)?;
        let enc = tape.constant(enc.states.clone())?;
        let logits = self.decode_on(&mut tape, &b, enc, prefix)?;
        Ok(tape.value(logits).clone())
    }

    /// Next-token logits after `prefix`.
    pub fn decode_step(&self, enc: &EncoderOutput, prefix: &[u32]) -> Result<Vec<f64>> {
        let all = self.decode_all(enc, prefix)?;
        Ok(all.row(all.rows() - 1).to_vec())
    }

    pub fn next_log_probs(&self, enc: &EncoderOutput, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.decode_step(enc, prefix)?))
    }

    /// Copies every parameter whose name and shape match `source`.
    /// Returns the names that were skipped.
    pub fn transfer_from(&mut self, source: &Model) -> Result<Vec<String>> {
        let diff = self.config.architecture_diff(&source.config);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "pretrained model differs in: {}",
                diff.join(", ")
            )));
        }
        let mut skipped = Vec::new();
        for (name, dst) in self.params.iter_mut() {
            match source.params.get(name) {
                Some(src) if src.shape() == dst.shape() => *dst = src.clone(),
                _ => skipped.push(name.to_string()),
            }
        }
        Ok(skipped)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
        let bad = |what: &str| Error::Data(format!("malformed checkpoint: {what}"));
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated magic"))? != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let clen = cur.u32().ok_or_else(|| bad("truncated config"))? as usize;
        let config: ModelConfig = serde_json::from_slice(cur.take(clen).ok_or_else(|| bad("truncated config"))?)
            .map_err(|e| bad(&format!("config: {e}")))?;
        config.validate()?;
        let count = cur.u32().ok_or_else(|| bad("truncated parameter count"))? as usize;
        let mut params = ModelParameters::default();
        for _ in 0..count {
            let nlen = cur.u32().ok_or_else(|| bad("truncated name"))? as usize;
            let name = std::str::from_utf8(cur.take(nlen).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let rank = cur.u32().ok_or_else(|| bad("truncated rank"))? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated extents"))?;
            let n: usize = shape.iter().product();
            let payload = cur
                .take(n * 4)
                .ok_or_else(|| bad(&format!("truncated payload of {name}")))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut expected = config.param_specs();
        expected.sort_by(|a, b| a.0.cmp(&b.0));
        let layout_ok = expected.len() == params.len()
            && expected
                .iter()
                .all(|(n, s, _)| params.get(n).is_some_and(|t| t.shape() == s.as_slice()));
        if !layout_ok {
            return Err(bad("parameters do not match the stored config"));
        }
        Ok(Model {
            config,
            params,
            strict: true,
        })
    }

    pub fn load(path: &Path) -> Result<Model> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Model::read_checkpoint(std::io::BufReader::new(f))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
