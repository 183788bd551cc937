//! Auto-regressive transformer captioner over the conditioned sequence
//! `z = [o_hat, t_hat_original, t_hat_five, t_hat_nine]`.
//!
//! The decoder is a small pre-norm transformer: causal self-attention over
//! the caption prefix (sinusoidal positions), cross-attention to `z` (no
//! positions, so `z` is treated as a set) and a ReLU feed-forward block.
//! Conditioning parameters and decoder parameters live in one
//! [`ParamStore`], so cross-entropy and self-critical training update both.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::conditioning::{
    dropout_mask, ConditionedTokens, ConditioningConfig, ConditioningParams, ConditioningVariant, Mode, Stream,
};
use crate::crops::Granularity;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Matrix;
use crate::{math, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Token vocabulary with `<pad>`, `<bos>` and `<eos>` at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from words; duplicates and special names are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| String::from(*s)).collect();
        let mut index: BTreeMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(String::from(w), tokens.len());
                tokens.push(String::from(w));
            }
        }
        Self { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with <pad>, <bos>, <eos>".into()));
        }
        let vocab = Self::new(tokens[3..].iter());
        if vocab.len() != tokens.len() {
            return Err(Error::Config("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[bos, words..., eos]`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        for w in words {
            let id = self.id(w.as_ref()).ok_or_else(|| Error::UnknownToken(String::from(w.as_ref())))?;
            ids.push(id);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Words of a generated sequence, stopping at `<eos>` and skipping
    /// specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i > EOS)
            .filter_map(|&i| self.tokens.get(i).cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionerConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    /// Longest prefix the decoder accepts, `<bos>` included.
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self { d: 128, layers: 2, heads: 4, d_ff: 256, max_len: 16, vocab_size: 64 }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(alloc::format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads)));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_len < 2 || self.vocab_size <= EOS {
            return Err(Error::Config("captioner needs layers, d_ff >= 1, max_len >= 2, vocab_size >= 4".into()));
        }
        Ok(())
    }
}

/// Named parameter matrices addressed by [`ParamRef`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(usize);

impl ParamStore {
    pub fn add(&mut self, name: String, value: Matrix) -> ParamRef {
        self.names.push(name);
        self.values.push(value);
        ParamRef(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, r: ParamRef) -> &Matrix {
        &self.values[r.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Copies all values into one flat vector (store order).
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for m in &mut self.values {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct StreamRefs {
    gain: ParamRef,
    bias: ParamRef,
    weight: ParamRef,
    b: ParamRef,
}

#[derive(Debug, Clone)]
struct CondRefs {
    objects: StreamRefs,
    text: [StreamRefs; 3],
    crop_embeddings: ParamRef,
    image: Option<StreamRefs>,
}

#[derive(Debug, Clone, Copy)]
struct AttnRefs {
    wq: ParamRef,
    bq: ParamRef,
    wk: ParamRef,
    bk: ParamRef,
    wv: ParamRef,
    bv: ParamRef,
    wo: ParamRef,
    bo: ParamRef,
}

#[derive(Debug, Clone, Copy)]
struct LayerRefs {
    ln1: (ParamRef, ParamRef),
    self_attn: AttnRefs,
    ln2: (ParamRef, ParamRef),
    cross_attn: AttnRefs,
    ln3: (ParamRef, ParamRef),
    w1: ParamRef,
    b1: ParamRef,
    w2: ParamRef,
    b2: ParamRef,
}

/// Inputs of one image: object features, global feature, retrieved text
/// vectors per granularity and (optionally) a grid of region features.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionInputs {
    /// n_objects x d_o
    pub objects: Matrix,
    /// length d_x
    pub f_x: Vec<f64>,
    /// Retrieved text vectors per granularity (original, five, nine), each
    /// `crops * k` x d_t, with the flat crop index of every row.
    pub text: [(Matrix, Vec<usize>); 3],
    /// Region features for the TF-G variant (rows x d_x).
    pub grid: Option<Matrix>,
}

impl CaptionInputs {
    /// Number of tokens `z` will have for a given configuration.
    pub fn sequence_len(&self, cfg: &ConditioningConfig, use_text: bool) -> usize {
        let text: usize = if use_text { self.text.iter().map(|(m, _)| m.rows()).sum() } else { 0 };
        let extra = match (cfg.use_image, cfg.variant) {
            (true, ConditioningVariant::TfV) => 1,
            (true, ConditioningVariant::TfG) => self.grid.as_ref().map_or(0, Matrix::rows),
            _ => 0,
        };
        self.objects.rows() + text + extra
    }
}

/// Concatenates conditioned streams along the sequence dimension in the
/// order objects, original, five, nine.
pub fn build_sequence(
    o_hat: &ConditionedTokens,
    t_hat_original: &ConditionedTokens,
    t_hat_five: &ConditionedTokens,
    t_hat_nine: &ConditionedTokens,
) -> Result<ConditionedTokens> {
    let d = o_hat.tokens.cols();
    let parts = [o_hat, t_hat_original, t_hat_five, t_hat_nine];
    let mut data = Vec::new();
    let mut streams = Vec::new();
    for p in parts {
        if p.tokens.rows() > 0 && p.tokens.cols() != d {
            return Err(Error::DimMismatch { expected: d, actual: p.tokens.cols() });
        }
        data.extend_from_slice(p.tokens.data());
        streams.extend_from_slice(&p.streams);
    }
    let tokens = Matrix::from_vec(streams.len(), d, data)?;
    Ok(ConditionedTokens { tokens, streams })
}

/// Sinusoidal position table, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10_000.0, 2.0 * pair / d as f64);
            pe.set(pos, i, if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    pe
}

/// Parameters bound to leaves of one tape.
struct Bound {
    leaves: Vec<NodeId>,
}

impl Bound {
    fn at(&self, r: ParamRef) -> NodeId {
        self.leaves[r.0]
    }
}

/// Per-layer cross-attention keys and values, split into heads.
struct Memory {
    keys: Vec<Vec<NodeId>>,
    values: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub cond_config: ConditioningConfig,
    /// When false the text streams are dropped from `z`.
    pub use_text: bool,
    params: ParamStore,
    cond: CondRefs,
    tok_emb: ParamRef,
    layers: Vec<LayerRefs>,
    ln_f: (ParamRef, ParamRef),
    w_out: ParamRef,
    b_out: ParamRef,
}

impl Captioner {
    pub fn new(
        config: CaptionerConfig,
        mut cond_config: ConditioningConfig,
        use_text: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        cond_config.d = config.d;
        let cond_params = ConditioningParams::init(cond_config, rng)?;
        let mut params = ParamStore::default();
        let mut refs = Vec::new();
        cond_params.visit(&mut |name, m| refs.push(params.add(name, m.clone())));
        let mut it = refs.into_iter();
        let next_stream = |it: &mut alloc::vec::IntoIter<ParamRef>| -> StreamRefs {
            let mut take = || it.next().expect("conditioning parameter order");
            StreamRefs { gain: take(), bias: take(), weight: take(), b: take() }
        };
        let objects = next_stream(&mut it);
        let text = [next_stream(&mut it), next_stream(&mut it), next_stream(&mut it)];
        let crop_embeddings = it.next().expect("crop embeddings");
        let image = cond_params.image.as_ref().map(|_| next_stream(&mut it));
        let cond = CondRefs { objects, text, crop_embeddings, image };

        let d = config.d;
        let v = config.vocab_size;
        let lin = |fan_in: usize, fan_out: usize, rng: &mut SplitMix64| {
            Matrix::randn(fan_in, fan_out, 1.0 / math::sqrt(fan_in as f64), rng)
        };
        let tok_emb = params.add("dec.tok_emb".into(), Matrix::randn(v, d, 1.0, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut add = |name: &str, m: Matrix| params.add(alloc::format!("dec.layer{l}.{name}"), m);
            let attn = |prefix: &str, add: &mut dyn FnMut(&str, Matrix) -> ParamRef, rng: &mut SplitMix64| AttnRefs {
                wq: add(&alloc::format!("{prefix}.wq"), lin(d, d, rng)),
                bq: add(&alloc::format!("{prefix}.bq"), Matrix::zeros(1, d)),
                wk: add(&alloc::format!("{prefix}.wk"), lin(d, d, rng)),
                bk: add(&alloc::format!("{prefix}.bk"), Matrix::zeros(1, d)),
                wv: add(&alloc::format!("{prefix}.wv"), lin(d, d, rng)),
                bv: add(&alloc::format!("{prefix}.bv"), Matrix::zeros(1, d)),
                wo: add(&alloc::format!("{prefix}.wo"), lin(d, d, rng)),
                bo: add(&alloc::format!("{prefix}.bo"), Matrix::zeros(1, d)),
            };
            let ln1 = (add("ln1.gain", Matrix::filled(1, d, 1.0)), add("ln1.bias", Matrix::zeros(1, d)));
            let self_attn = attn("self", &mut add, rng);
            let ln2 = (add("ln2.gain", Matrix::filled(1, d, 1.0)), add("ln2.bias", Matrix::zeros(1, d)));
            let cross_attn = attn("cross", &mut add, rng);
            let ln3 = (add("ln3.gain", Matrix::filled(1, d, 1.0)), add("ln3.bias", Matrix::zeros(1, d)));
            let w1 = add("ffn.w1", lin(d, config.d_ff, rng));
            let b1 = add("ffn.b1", Matrix::zeros(1, config.d_ff));
            let w2 = add("ffn.w2", lin(config.d_ff, d, rng));
            let b2 = add("ffn.b2", Matrix::zeros(1, d));
            layers.push(LayerRefs { ln1, self_attn, ln2, cross_attn, ln3, w1, b1, w2, b2 });
        }
        let ln_f = (params.add("dec.ln_f.gain".into(), Matrix::filled(1, d, 1.0)), params.add("dec.ln_f.bias".into(), Matrix::zeros(1, d)));
        // Zero output projection: every initial next-token distribution is uniform.
        let w_out = params.add("dec.out.weight".into(), Matrix::zeros(d, v));
        let b_out = params.add("dec.out.bias".into(), Matrix::zeros(1, v));
        Ok(Self { config, cond_config, use_text, params, cond, tok_emb, layers, ln_f, w_out, b_out })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, names: &[String], values: Vec<Matrix>) -> Result<()> {
        if names != self.params.names() {
            return Err(Error::Config("checkpoint parameter names do not match the model".into()));
        }
        for (cur, new) in self.params.values().iter().zip(&values) {
            if cur.shape() != new.shape() {
                return Err(Error::Shape {
                    op: "load_params",
                    detail: alloc::format!("{:?} vs {:?}", cur.shape(), new.shape()),
                });
            }
        }
        self.params.values = values;
        Ok(())
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { leaves: self.params.values().iter().map(|m| tape.leaf(m.clone())).collect() }
    }

    #[allow(clippy::too_many_arguments)]
    fn condition_stream(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        refs: &StreamRefs,
        input: NodeId,
        f_x: Option<NodeId>,
        mode: Mode,
        seed: u64,
    ) -> Result<NodeId> {
        let rows = tape.value(input).rows();
        let x = match f_x {
            Some(fx) if self.cond_config.concat_image() => {
                let fxb = tape.broadcast_rows(fx, rows);
                tape.concat_cols(&[input, fxb])
            }
            _ => input,
        };
        let normed = tape.layer_norm(x, bound.at(refs.gain), bound.at(refs.bias), self.cond_config.ln_eps)?;
        let out = tape.linear(normed, bound.at(refs.weight), bound.at(refs.b));
        let rate = self.cond_config.dropout;
        if mode == Mode::Train && rate > 0.0 {
            let (r, c) = tape.value(out).shape();
            let mask = dropout_mask(r, c, rate, seed)?;
            Ok(tape.mul_const(out, mask))
        } else {
            Ok(out)
        }
    }

    /// Builds the conditioned sequence `z` on the tape.
    fn encode(&self, tape: &mut Tape, bound: &Bound, inputs: &CaptionInputs, mode: Mode, seed: u64) -> Result<NodeId> {
        let cfg = &self.cond_config;
        if inputs.objects.cols() != cfg.d_o {
            return Err(Error::DimMismatch { expected: cfg.d_o, actual: inputs.objects.cols() });
        }
        let fx = if cfg.use_image {
            if inputs.f_x.len() != cfg.d_x {
                return Err(Error::DimMismatch { expected: cfg.d_x, actual: inputs.f_x.len() });
            }
            Some(tape.constant(Matrix::row_vector(inputs.f_x.clone())))
        } else {
            None
        };
        let mut parts = Vec::with_capacity(5);
        let obj = tape.constant(inputs.objects.clone());
        parts.push(self.condition_stream(tape, bound, &self.cond.objects, obj, fx, mode, derive_seed(seed, 0))?);
        if self.use_text {
            for (g, (tokens, crops)) in inputs.text.iter().enumerate() {
                if tokens.rows() == 0 {
                    continue;
                }
                if tokens.cols() != cfg.d_t || crops.len() != tokens.rows() {
                    return Err(Error::DimMismatch { expected: cfg.d_t, actual: tokens.cols() });
                }
                let t = tape.constant(tokens.clone());
                let ce = tape.gather(bound.at(self.cond.crop_embeddings), crops);
                let t = tape.add(t, ce);
                let out = self.condition_stream(tape, bound, &self.cond.text[g], t, fx, mode, derive_seed(seed, 1 + g as u64))?;
                parts.push(out);
            }
        }
        if let (Some(image), Some(fx)) = (&self.cond.image, fx) {
            let img = match cfg.variant {
                ConditioningVariant::TfG => match &inputs.grid {
                    Some(grid) => Some(tape.constant(grid.clone())),
                    None => return Err(Error::Config("TF-G conditioning needs grid features".into())),
                },
                ConditioningVariant::TfV => Some(fx),
                ConditioningVariant::Fc => None,
            };
            if let Some(img) = img {
                parts.push(self.condition_stream(tape, bound, image, img, None, mode, derive_seed(seed, 4))?);
            }
        }
        Ok(tape.concat_rows(&parts))
    }

    fn memory(&self, tape: &mut Tape, bound: &Bound, z: NodeId) -> Memory {
        let dh = self.config.d / self.config.heads;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for layer in &self.layers {
            let a = &layer.cross_attn;
            let k = tape.linear(z, bound.at(a.wk), bound.at(a.bk));
            let v = tape.linear(z, bound.at(a.wv), bound.at(a.bv));
            keys.push((0..self.config.heads).map(|h| tape.slice_cols(k, h * dh, dh)).collect());
            values.push((0..self.config.heads).map(|h| tape.slice_cols(v, h * dh, dh)).collect());
        }
        Memory { keys, values }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        refs: &AttnRefs,
        x: NodeId,
        kv: Option<(&[NodeId], &[NodeId])>,
    ) -> NodeId {
        let heads = self.config.heads;
        let dh = self.config.d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let q = tape.linear(x, bound.at(refs.wq), bound.at(refs.bq));
        let (own_k, own_v) = match kv {
            None => {
                let k = tape.linear(x, bound.at(refs.wk), bound.at(refs.bk));
                let v = tape.linear(x, bound.at(refs.wv), bound.at(refs.bv));
                (Some(k), Some(v))
            }
            Some(_) => (None, None),
        };
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let (kh, vh) = match (kv, own_k, own_v) {
                (Some((ks, vs)), _, _) => (ks[h], vs[h]),
                (None, Some(k), Some(v)) => (tape.slice_cols(k, h * dh, dh), tape.slice_cols(v, h * dh, dh)),
                _ => unreachable!(),
            };
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax(scores, kv.is_none());
            outs.push(tape.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        tape.linear(cat, bound.at(refs.wo), bound.at(refs.bo))
    }

    /// Logits for every position of `prefix` (rows = prefix length).
    fn decode(&self, tape: &mut Tape, bound: &Bound, memory: &Memory, prefix: &[usize]) -> Result<NodeId> {
        if prefix.is_empty() || prefix[0] != BOS {
            return Err(Error::InvalidPrefix);
        }
        if prefix.len() > self.config.max_len {
            return Err(Error::PrefixTooLong { len: prefix.len(), max_len: self.config.max_len });
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownToken(alloc::format!("id {bad}")));
        }
        let emb = tape.gather(bound.at(self.tok_emb), prefix);
        let pe = tape.constant(positional_encoding(prefix.len(), self.config.d));
        let mut h = tape.add(emb, pe);
        let eps = self.cond_config.ln_eps;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = tape.layer_norm(h, bound.at(layer.ln1.0), bound.at(layer.ln1.1), eps)?;
            let sa = self.attention(tape, bound, &layer.self_attn, a, None);
            h = tape.add(h, sa);
            let c = tape.layer_norm(h, bound.at(layer.ln2.0), bound.at(layer.ln2.1), eps)?;
            let ca = self.attention(tape, bound, &layer.cross_attn, c, Some((&memory.keys[l], &memory.values[l])));
            h = tape.add(h, ca);
            let f = tape.layer_norm(h, bound.at(layer.ln3.0), bound.at(layer.ln3.1), eps)?;
            let f = tape.linear(f, bound.at(layer.w1), bound.at(layer.b1));
            let f = tape.relu(f);
            let f = tape.linear(f, bound.at(layer.w2), bound.at(layer.b2));
            h = tape.add(h, f);
        }
        let out = tape.layer_norm(h, bound.at(self.ln_f.0), bound.at(self.ln_f.1), eps)?;
        Ok(tape.linear(out, bound.at(self.w_out), bound.at(self.b_out)))
    }

    /// The conditioned sequence `z` in eval mode.
    pub fn condition(&self, inputs: &CaptionInputs) -> Result<ConditionedTokens> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = self.encode(&mut tape, &bound, inputs, Mode::Eval, 0)?;
        let tokens = tape.value(z).clone();
        let mut streams = vec![Stream::Objects; inputs.objects.rows()];
        if self.use_text {
            for (g, (t, _)) in Granularity::ALL.iter().zip(&inputs.text) {
                streams.extend(core::iter::repeat_n(Stream::text(*g), t.rows()));
            }
        }
        streams.resize(tokens.rows(), Stream::Image);
        Ok(ConditionedTokens { tokens, streams })
    }

    /// Next-token logits after `prefix` (eval mode).
    pub fn forward(&self, inputs: &CaptionInputs, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = self.encode(&mut tape, &bound, inputs, Mode::Eval, 0)?;
        let memory = self.memory(&mut tape, &bound, z);
        let logits = self.decode(&mut tape, &bound, &memory, prefix)?;
        let l = tape.value(logits);
        Ok(l.row(l.rows() - 1).to_vec())
    }

    /// Per-position logits for a whole prefix (eval mode), rows = positions.
    pub fn forward_all(&self, inputs: &CaptionInputs, prefix: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = self.encode(&mut tape, &bound, inputs, Mode::Eval, 0)?;
        let memory = self.memory(&mut tape, &bound, z);
        let logits = self.decode(&mut tape, &bound, &memory, prefix)?;
        Ok(tape.value(logits).clone())
    }

    fn generation_budget(&self, max_len: usize) -> usize {
        max_len.min(self.config.max_len - 1)
    }

    fn run_decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        memory: &Memory,
        max_len: usize,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<usize>> {
        let mut prefix = vec![BOS];
        for _ in 0..self.generation_budget(max_len) {
            let logits = self.decode(tape, bound, memory, &prefix)?;
            let l = tape.value(logits);
            let next = pick(l.row(l.rows() - 1));
            prefix.push(next);
            if next == EOS {
                break;
            }
        }
        prefix.remove(0);
        Ok(prefix)
    }

    /// Deterministic argmax decoding. Returns generated ids (no `<bos>`),
    /// ending with `<eos>` unless the length budget ran out.
    pub fn greedy_decode(&self, inputs: &CaptionInputs, max_len: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = self.encode(&mut tape, &bound, inputs, Mode::Eval, 0)?;
        let memory = self.memory(&mut tape, &bound, z);
        self.run_decode(&mut tape, &bound, &memory, max_len, argmax)
    }

    /// Samples from `softmax(logits / temperature)`; `temperature <= 0`
    /// falls back to greedy.
    pub fn sample_decode(&self, inputs: &CaptionInputs, max_len: usize, temperature: f64, seed: u64) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = self.encode(&mut tape, &bound, inputs, Mode::Eval, 0)?;
        let memory = self.memory(&mut tape, &bound, z);
        let mut rng = SplitMix64::new(seed);
        self.run_decode(&mut tape, &bound, &memory, max_len, |l| sample(l, temperature, &mut rng))
    }

    /// Teacher-forced loss of one example, gradients added into `grads`.
    /// `weight` scales every target position.
    fn accumulate_xent(
        &self,
        ex: &TrainExample,
        weight: f64,
        mode: Mode,
        seed: u64,
        grads: &mut [Matrix],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = self.encode(&mut tape, &bound, &ex.inputs, mode, seed)?;
        let memory = self.memory(&mut tape, &bound, z);
        let caption = &ex.caption;
        let prefix = &caption[..caption.len() - 1];
        let targets = &caption[1..];
        let logits = self.decode(&mut tape, &bound, &memory, prefix)?;
        let weights: Vec<f64> = targets.iter().map(|&t| if t == PAD { 0.0 } else { weight }).collect();
        let loss = tape.weighted_nll(logits, targets, &weights);
        tape.backward(loss);
        collect_grads(&tape, &bound, grads);
        Ok(tape.value(loss).get(0, 0))
    }

    /// Mean teacher-forced cross-entropy and its gradient over a batch, in
    /// the requested mode.
    pub fn xent_loss_and_grad(&self, batch: &[&TrainExample], mode: Mode, seed: u64) -> Result<(f64, Vec<Matrix>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let positions: usize = batch.iter().map(|e| e.target_count()).sum();
        if positions == 0 {
            return Err(Error::EmptyBatch);
        }
        let w = 1.0 / positions as f64;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            loss += self.accumulate_xent(ex, w, mode, derive_seed(seed, i as u64), &mut grads)?;
        }
        Ok((loss, grads))
    }

    /// Loss of the batch as a pure function of a flat parameter vector
    /// (eval mode). Used by gradient checks.
    pub fn xent_loss_at(&self, flat: &[f64], batch: &[&TrainExample]) -> Result<f64> {
        let mut probe = self.clone();
        probe.params.unflatten(flat);
        probe.xent_loss_and_grad(batch, Mode::Eval, 0).map(|(l, _)| l)
    }

    /// Teacher-forced predictions: argmax next token at every position of
    /// the gold caption.
    pub fn teacher_forced_argmax(&self, ex: &TrainExample) -> Result<Vec<usize>> {
        let prefix = &ex.caption[..ex.caption.len() - 1];
        let logits = self.forward_all(&ex.inputs, prefix)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

fn collect_grads(tape: &Tape, bound: &Bound, grads: &mut [Matrix]) {
    for (g, &leaf) in grads.iter_mut().zip(&bound.leaves) {
        if let Some(d) = tape.grad(leaf) {
            g.add_assign(d);
        }
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, rng: &mut SplitMix64) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    math::softmax_in_place(&mut p);
    rng.categorical(&p)
}

/// Inputs plus gold caption ids (`[bos, ..., eos]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub inputs: CaptionInputs,
    pub caption: Vec<usize>,
}

impl TrainExample {
    fn target_count(&self) -> usize {
        self.caption.iter().skip(1).filter(|&&t| t != PAD).count()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Matrix]) {
        let c = self.config;
        if let Some(max) = c.clip_norm {
            let norm = math::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum());
            if norm > max {
                grads.iter_mut().for_each(|g| g.scale(max / norm));
            }
        }
        self.t += 1;
        let b1t = 1.0 - libm::pow(c.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(c.beta2, self.t as f64);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / b1t;
                let vhat = *vv / b2t;
                *pv -= c.lr * mhat / (math::sqrt(vhat) + c.eps);
            }
        }
    }
}

/// A model with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Captioner,
    pub adam: Adam,
}

/// Outcome of one self-critical step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScstStats {
    pub loss: f64,
    pub sample_reward: f64,
    pub greedy_reward: f64,
}

impl Trainer {
    pub fn new(model: Captioner, adam: AdamConfig) -> Self {
        let adam = Adam::new(adam, model.params());
        Self { model, adam }
    }

    /// One Adam step on the mean cross-entropy of `batch`.
    pub fn xent_step(&mut self, batch: &[&TrainExample], seed: u64) -> Result<f64> {
        let (loss, mut grads) = self.model.xent_loss_and_grad(batch, Mode::Train, seed)?;
        self.adam.step(&mut self.model.params, &mut grads);
        Ok(loss)
    }

    /// Full-batch cross-entropy training for `steps` steps; returns the loss
    /// before each update.
    pub fn train_xent(&mut self, batch: &[TrainExample], steps: usize, seed: u64) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let refs: Vec<&TrainExample> = batch.iter().collect();
        (0..steps).map(|s| self.xent_step(&refs, derive_seed(seed, s as u64))).collect()
    }

    /// Self-critical policy-gradient step.
    ///
    /// For each example a caption is sampled and a greedy caption decoded;
    /// `reward(example_index, generated_ids)` scores both, and the loss is
    /// `-(r_sample - r_greedy) * sum log p(sampled tokens)`, averaged over
    /// the batch. Only the sampled tokens' log-probabilities carry gradient.
    pub fn scst_step<R>(&mut self, batch: &[(usize, &TrainExample)], max_len: usize, seed: u64, reward: R) -> Result<ScstStats>
    where
        R: Fn(usize, &[usize]) -> f64,
    {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let model = &self.model;
        let mut grads = model.params.zeros_like();
        let mut stats = ScstStats { loss: 0.0, sample_reward: 0.0, greedy_reward: 0.0 };
        let inv = 1.0 / batch.len() as f64;
        for (i, (index, ex)) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let z = model.encode(&mut tape, &bound, &ex.inputs, Mode::Eval, 0)?;
            let memory = model.memory(&mut tape, &bound, z);
            let mut rng = SplitMix64::new(derive_seed(seed, i as u64));
            let sampled = model.run_decode(&mut tape, &bound, &memory, max_len, |l| sample(l, 1.0, &mut rng))?;
            let greedy = model.run_decode(&mut tape, &bound, &memory, max_len, argmax)?;
            let r_s = reward(*index, &sampled);
            let r_g = reward(*index, &greedy);
            stats.sample_reward += inv * r_s;
            stats.greedy_reward += inv * r_g;
            let advantage = r_s - r_g;
            if advantage == 0.0 || sampled.is_empty() {
                continue;
            }
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&sampled[..sampled.len() - 1]);
            let logits = model.decode(&mut tape, &bound, &memory, &prefix)?;
            let weights = vec![advantage * inv; sampled.len()];
            let loss = tape.weighted_nll(logits, &sampled, &weights);
            tape.backward(loss);
            collect_grads(&tape, &bound, &mut grads);
            stats.loss += tape.value(loss).get(0, 0);
        }
        self.adam.step(&mut self.model.params, &mut grads);
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(seed: u64, use_text: bool) -> (Captioner, TrainExample) {
        let mut rng = SplitMix64::new(seed);
        let cfg = CaptionerConfig { d: 8, layers: 1, heads: 2, d_ff: 12, max_len: 8, vocab_size: 5 };
        let cond = ConditioningConfig { d_o: 4, d_t: 4, d_x: 3, dropout: 0.1, ..Default::default() };
        let model = Captioner::new(cfg, cond, use_text, &mut rng).unwrap();
        let text = |rows: usize, first_crop: usize, rng: &mut SplitMix64| {
            (Matrix::randn(rows, 4, 1.0, rng), (0..rows).map(|r| first_crop + r % 5).collect::<Vec<_>>())
        };
        let inputs = CaptionInputs {
            objects: Matrix::randn(3, 4, 1.0, &mut rng),
            f_x: (0..3).map(|_| rng.next_normal()).collect(),
            text: [text(2, 0, &mut rng), text(5, 1, &mut rng), text(4, 6, &mut rng)],
            grid: None,
        };
        (model, TrainExample { inputs, caption: vec![BOS, 3, 4, 3, EOS] })
    }

    #[test]
    fn vocabulary_roundtrip() {
        let v = Vocabulary::new(["red", "cube", "red"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode(&["red", "cube"]).unwrap(), vec![BOS, 3, 4, EOS]);
        assert_eq!(v.decode(&[3, 4, EOS, 3]), vec!["red", "cube"]);
        assert!(matches!(v.encode(&["ball"]), Err(Error::UnknownToken(_))));
        assert_eq!(Vocabulary::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }

    #[test]
    fn config_validation() {
        let bad = CaptionerConfig { d: 10, heads: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(CaptionerConfig::default().validate().is_ok());
    }

    #[test]
    fn initial_loss_is_log_vocab() {
        let (model, ex) = tiny(1, true);
        let (loss, _) = model.xent_loss_and_grad(&[&ex], Mode::Eval, 0).unwrap();
        assert!((loss - math::ln(5.0)).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn logits_shape_and_softmax() {
        let (model, ex) = tiny(2, true);
        let logits = model.forward(&ex.inputs, &[BOS, 3]).unwrap();
        assert_eq!(logits.len(), 5);
        let mut p = logits.clone();
        math::softmax_in_place(&mut p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prefix_errors() {
        let (model, ex) = tiny(3, true);
        assert_eq!(model.forward(&ex.inputs, &[]), Err(Error::InvalidPrefix));
        assert_eq!(model.forward(&ex.inputs, &[3]), Err(Error::InvalidPrefix));
        let long = vec![BOS; 9];
        assert_eq!(model.forward(&ex.inputs, &long), Err(Error::PrefixTooLong { len: 9, max_len: 8 }));
    }

    #[test]
    fn sequence_length_counts_all_streams() {
        let (model, ex) = tiny(4, true);
        assert_eq!(model.condition(&ex.inputs).unwrap().len(), 3 + 2 + 5 + 4);
        let (model, ex) = tiny(4, false);
        assert_eq!(model.condition(&ex.inputs).unwrap().len(), 3);
    }

    #[test]
    fn build_sequence_orders_streams() {
        let mk = |n: usize, s: Stream, v: f64| ConditionedTokens { tokens: Matrix::filled(n, 2, v), streams: vec![s; n] };
        let z = build_sequence(
            &mk(2, Stream::Objects, 1.0),
            &mk(1, Stream::TextOriginal, 2.0),
            &mk(0, Stream::TextFive, 3.0),
            &mk(1, Stream::TextNine, 4.0),
        )
        .unwrap();
        assert_eq!(z.len(), 4);
        assert_eq!(z.tokens.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 4.0, 4.0]);
        let bad = ConditionedTokens { tokens: Matrix::filled(1, 3, 0.0), streams: vec![Stream::TextFive] };
        assert!(build_sequence(&mk(1, Stream::Objects, 0.0), &bad, &bad, &bad).is_err());
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let (mut model, ex) = tiny(5, true);
        let mut rng = SplitMix64::new(99);
        for m in model.params_mut().values_mut() {
            for v in m.data_mut() {
                *v += 0.3 * rng.next_normal();
            }
        }
        let a = model.greedy_decode(&ex.inputs, 6).unwrap();
        assert_eq!(a, model.greedy_decode(&ex.inputs, 6).unwrap());
        assert!(a.len() <= 6);
        let cold = model.sample_decode(&ex.inputs, 6, 1e-9, 3).unwrap();
        assert_eq!(cold, a);
        let s1 = model.sample_decode(&ex.inputs, 6, 1.0, 3).unwrap();
        assert_eq!(s1, model.sample_decode(&ex.inputs, 6, 1.0, 3).unwrap());
    }

    #[test]
    fn memorizes_single_example() {
        let (model, ex) = tiny(6, true);
        let mut trainer = Trainer::new(model, AdamConfig { lr: 1e-2, ..Default::default() });
        let curve = trainer.train_xent(&[ex.clone()], 300, 1).unwrap();
        assert!(curve.iter().all(|&l| l >= 0.0));
        let (loss, _) = trainer.model.xent_loss_and_grad(&[&ex], Mode::Eval, 0).unwrap();
        assert!(loss < 0.01, "final loss {loss}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (model, _) = tiny(7, true);
        let mut trainer = Trainer::new(model, AdamConfig::default());
        assert_eq!(trainer.train_xent(&[], 1, 0), Err(Error::EmptyBatch));
    }
}
