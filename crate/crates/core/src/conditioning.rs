//! Image conditioning of object and text tokens.
//!
//! Every token of a stream is concatenated with the global image feature
//! `f_x`, then normalized and projected to the model width before dropout:
//!
//! ```text
//! o_hat[m]     = drop(fc_o(norm_o([o[m], f_x])))
//! t_hat[i,j,k] = drop(fc_t_i(norm_t_i([t[i,j,k] + crop_emb[i,j], f_x])))
//! ```
//!
//! The object stream and the three text streams (original, five, nine) have
//! disjoint parameters and share `f_x`. A learnable crop embedding per
//! `(granularity, position)` pair is added to each text vector before the
//! concatenation. Forward and backward passes are written out by hand and
//! verified against central finite differences with [`grad_check`].

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::crops::{Granularity, TOTAL_CROPS};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{matmul, matmul_at_acc, matmul_bt_acc, Matrix};
use crate::{math, Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Objects,
    TextOriginal,
    TextFive,
    TextNine,
    /// Extra image tokens appended by the TF-V / TF-G variants.
    Image,
}

impl Stream {
    pub fn text(granularity: Granularity) -> Self {
        match granularity {
            Granularity::Original => Stream::TextOriginal,
            Granularity::Five => Stream::TextFive,
            Granularity::Nine => Stream::TextNine,
        }
    }

    pub fn granularity(self) -> Option<Granularity> {
        match self {
            Stream::TextOriginal => Some(Granularity::Original),
            Stream::TextFive => Some(Granularity::Five),
            Stream::TextNine => Some(Granularity::Nine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the image feature enters the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningVariant {
    /// `f_x` concatenated to every token before norm + FC.
    #[default]
    Fc,
    /// `f_x` appended as one extra token.
    TfV,
    /// A grid of image-region features appended as extra tokens.
    TfG,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub d_o: usize,
    pub d_t: usize,
    pub d_x: usize,
    /// Model width of the conditioned tokens.
    pub d: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// When false, tokens are only normalized and projected (no `f_x`).
    pub use_image: bool,
    pub variant: ConditioningVariant,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            d_o: 64,
            d_t: 64,
            d_x: 64,
            d: 128,
            dropout: DEFAULT_DROPOUT,
            ln_eps: DEFAULT_LN_EPS,
            use_image: true,
            variant: ConditioningVariant::Fc,
        }
    }
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidDropout(self.dropout));
        }
        if self.d == 0 || self.d_o == 0 || self.d_t == 0 || self.d_x == 0 {
            return Err(Error::Config("conditioning dimensions must be positive".into()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// True when `f_x` is concatenated onto each token.
    pub fn concat_image(&self) -> bool {
        self.use_image && self.variant == ConditioningVariant::Fc
    }

    /// Input width of a stream's norm + FC.
    pub fn input_dim(&self, stream: Stream) -> usize {
        let base = match stream {
            Stream::Objects => self.d_o,
            Stream::Image => return self.d_x,
            _ => self.d_t,
        };
        if self.concat_image() {
            base + self.d_x
        } else {
            base
        }
    }
}

/// Layer norm + FC parameters of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    /// 1 x d_in
    pub gain: Matrix,
    /// 1 x d_in
    pub bias: Matrix,
    /// d_in x d
    pub weight: Matrix,
    /// 1 x d
    pub b: Matrix,
}

impl StreamParams {
    pub fn init(d_in: usize, d: usize, rng: &mut SplitMix64) -> Self {
        Self {
            gain: Matrix::filled(1, d_in, 1.0),
            bias: Matrix::zeros(1, d_in),
            weight: Matrix::randn(d_in, d, 1.0 / math::sqrt(d_in as f64), rng),
            b: Matrix::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gain: Matrix::zeros(1, self.gain.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            b: Matrix::zeros(1, self.b.cols()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gain.cols()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &'a Matrix)) {
        f(alloc::format!("{prefix}.norm.gain"), &self.gain);
        f(alloc::format!("{prefix}.norm.bias"), &self.bias);
        f(alloc::format!("{prefix}.fc.weight"), &self.weight);
        f(alloc::format!("{prefix}.fc.bias"), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.gain);
        f(&mut self.bias);
        f(&mut self.weight);
        f(&mut self.b);
    }
}

/// All conditioning parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningParams {
    pub config: ConditioningConfig,
    pub objects: StreamParams,
    /// Indexed by granularity: original, five, nine.
    pub text: [StreamParams; 3],
    /// One row per crop in flat order (15 x d_t), shared across ranks.
    pub crop_embeddings: Matrix,
    /// Projection of image tokens for the TF-V / TF-G variants.
    pub image: Option<StreamParams>,
}

impl ConditioningParams {
    pub fn init(config: ConditioningConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let objects = StreamParams::init(config.input_dim(Stream::Objects), config.d, rng);
        let text = [
            StreamParams::init(config.input_dim(Stream::TextOriginal), config.d, rng),
            StreamParams::init(config.input_dim(Stream::TextFive), config.d, rng),
            StreamParams::init(config.input_dim(Stream::TextNine), config.d, rng),
        ];
        let crop_embeddings = Matrix::randn(TOTAL_CROPS, config.d_t, 0.02, rng);
        let image = (config.use_image && config.variant != ConditioningVariant::Fc)
            .then(|| StreamParams::init(config.d_x, config.d, rng));
        Ok(Self { config, objects, text, crop_embeddings, image })
    }

    pub fn stream(&self, stream: Stream) -> &StreamParams {
        match stream {
            Stream::Objects => &self.objects,
            Stream::Image => self.image.as_ref().expect("image stream parameters"),
            s => &self.text[s.granularity().map(granularity_index).unwrap_or(0)],
        }
    }

    pub fn stream_mut(&mut self, stream: Stream) -> &mut StreamParams {
        match stream {
            Stream::Objects => &mut self.objects,
            Stream::Image => self.image.as_mut().expect("image stream parameters"),
            s => &mut self.text[s.granularity().map(granularity_index).unwrap_or(0)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            objects: self.objects.zeros_like(),
            text: [self.text[0].zeros_like(), self.text[1].zeros_like(), self.text[2].zeros_like()],
            crop_embeddings: Matrix::zeros(self.crop_embeddings.rows(), self.crop_embeddings.cols()),
            image: self.image.as_ref().map(StreamParams::zeros_like),
        }
    }

    /// Visits every parameter matrix with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(alloc::string::String, &'a Matrix)) {
        self.objects.visit("cond.objects", f);
        for (g, p) in Granularity::ALL.iter().zip(&self.text) {
            p.visit(&alloc::format!("cond.text_{}", g.as_str()), f);
        }
        f("cond.crop_embeddings".into(), &self.crop_embeddings);
        if let Some(p) = &self.image {
            p.visit("cond.image", f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.objects.visit_mut(f);
        for p in &mut self.text {
            p.visit_mut(f);
        }
        f(&mut self.crop_embeddings);
        if let Some(p) = &mut self.image {
            p.visit_mut(f);
        }
    }
}

fn granularity_index(g: Granularity) -> usize {
    match g {
        Granularity::Original => 0,
        Granularity::Five => 1,
        Granularity::Nine => 2,
    }
}

/// What the layer-norm backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with population variance.
///
/// `y = gain * (x - mean) / sqrt(var + eps) + bias`
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<(Matrix, LayerNormCache)> {
    let n = x.cols();
    if n < 2 || gain.len() != n || bias.len() != n {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: alloc::format!("width {n}, gain {}, bias {}", gain.len(), bias.len()),
        });
    }
    let mut y = Matrix::zeros(x.rows(), n);
    let mut xhat = Matrix::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / math::sqrt(var + eps);
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for c in 0..n {
            yr[c] = gain[c] * xhat.get(r, c) + bias[c];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(dy: &Matrix, gain: &[f64], cache: &LayerNormCache) -> (Matrix, Vec<f64>, Vec<f64>) {
    let n = dy.cols();
    let nf = n as f64;
    let mut dx = Matrix::zeros(dy.rows(), n);
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..n {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let scale = cache.inv_std[r] / nf;
        let out = dx.row_mut(r);
        for c in 0..n {
            out[c] = scale * (nf * dxhat[c] - sum_d - xh[c] * sum_dx);
        }
    }
    (dx, dgain, dbias)
}

/// `y = x W + b`, with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::Shape {
            op: "affine",
            detail: alloc::format!("x {:?}, W {:?}, b {}", x.shape(), w.shape(), b.len()),
        });
    }
    let mut y = matmul(x, w)?;
    for r in 0..y.rows() {
        for (o, bv) in y.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(y)
}

/// Returns `(dx, dW, db)` for [`affine`].
pub fn affine_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    matmul_bt_acc(dy, w, &mut dx);
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    matmul_at_acc(x, dy, &mut dw);
    let mut db = vec![0.0; w.cols()];
    for r in 0..dy.rows() {
        for (d, v) in db.iter_mut().zip(dy.row(r)) {
            *d += v;
        }
    }
    (dx, dw, db)
}

/// Inverted-dropout multipliers (`0` or `1/(1-rate)`) for a `rows x cols`
/// activation. Token `t`'s mask depends only on `(seed, t)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidDropout(rate));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut rng = SplitMix64::new(derive_seed(seed, r as u64));
        for v in m.row_mut(r) {
            *v = if rng.next_f64() >= rate { keep_scale } else { 0.0 };
        }
    }
    Ok(m)
}

/// Conditioned tokens of one or more streams, one `d`-wide row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedTokens {
    pub tokens: Matrix,
    pub streams: Vec<Stream>,
}

impl ConditionedTokens {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Intermediate values kept for [`condition_backward`].
#[derive(Debug, Clone)]
pub struct ConditionCache {
    stream: Stream,
    normed: Matrix,
    ln: LayerNormCache,
    mask: Option<Matrix>,
    input_cols: usize,
}

/// Adds each token's crop embedding (`crops[t]` is a flat crop index).
pub fn add_crop_embeddings(tokens: &Matrix, crops: &[usize], params: &ConditioningParams) -> Result<Matrix> {
    if crops.len() != tokens.rows() || tokens.cols() != params.crop_embeddings.cols() {
        return Err(Error::Shape {
            op: "add_crop_embeddings",
            detail: alloc::format!("{} tokens, {} crop ids", tokens.rows(), crops.len()),
        });
    }
    let mut out = tokens.clone();
    for (r, &c) in crops.iter().enumerate() {
        if c >= TOTAL_CROPS {
            return Err(Error::Config(alloc::format!("crop index {c} out of range")));
        }
        for (o, e) in out.row_mut(r).iter_mut().zip(params.crop_embeddings.row(c)) {
            *o += e;
        }
    }
    Ok(out)
}

/// Scatters token gradients back onto the crop embedding table.
pub fn crop_embedding_grad(d_tokens: &Matrix, crops: &[usize], grad: &mut Matrix) {
    for (r, &c) in crops.iter().enumerate() {
        for (g, d) in grad.row_mut(c).iter_mut().zip(d_tokens.row(r)) {
            *g += d;
        }
    }
}

/// Conditions the tokens of one stream on `f_x`.
///
/// In [`Mode::Eval`] dropout is the identity and `rng_seed` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn condition_tokens(
    stream: Stream,
    inputs: &Matrix,
    f_x: &[f64],
    params: &ConditioningParams,
    dropout_rate: f64,
    mode: Mode,
    rng_seed: u64,
) -> Result<(ConditionedTokens, ConditionCache)> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::InvalidDropout(dropout_rate));
    }
    let cfg = &params.config;
    let sp = params.stream(stream);
    let concat = if cfg.concat_image() {
        if f_x.len() != cfg.d_x {
            return Err(Error::DimMismatch { expected: cfg.d_x, actual: f_x.len() });
        }
        let width = inputs.cols() + f_x.len();
        let mut m = Matrix::zeros(inputs.rows(), width);
        for r in 0..inputs.rows() {
            let row = m.row_mut(r);
            row[..inputs.cols()].copy_from_slice(inputs.row(r));
            row[inputs.cols()..].copy_from_slice(f_x);
        }
        m
    } else {
        inputs.clone()
    };
    if concat.cols() != sp.input_dim() {
        return Err(Error::DimMismatch { expected: sp.input_dim(), actual: concat.cols() });
    }
    let (normed, ln) = layer_norm(&concat, sp.gain.data(), sp.bias.data(), cfg.ln_eps)?;
    let mut out = affine(&normed, &sp.weight, sp.b.data())?;
    let mask = match mode {
        Mode::Train if dropout_rate > 0.0 => {
            let m = dropout_mask(out.rows(), out.cols(), dropout_rate, rng_seed)?;
            for (o, k) in out.data_mut().iter_mut().zip(m.data()) {
                *o *= k;
            }
            Some(m)
        }
        _ => None,
    };
    let streams = vec![stream; out.rows()];
    let cache = ConditionCache { stream, normed, ln, mask, input_cols: inputs.cols() };
    Ok((ConditionedTokens { tokens: out, streams }, cache))
}

/// Backward pass of [`condition_tokens`]. Parameter gradients are added to
/// `grads`; the gradient with respect to the input tokens is returned.
pub fn condition_backward(
    cache: &ConditionCache,
    d_out: &Matrix,
    params: &ConditioningParams,
    grads: &mut ConditioningParams,
) -> Matrix {
    let sp = params.stream(cache.stream);
    let mut dy = d_out.clone();
    if let Some(m) = &cache.mask {
        for (d, k) in dy.data_mut().iter_mut().zip(m.data()) {
            *d *= k;
        }
    }
    let (d_normed, dw, db) = affine_backward(&cache.normed, &sp.weight, &dy);
    let (d_concat, dgain, dbias) = layer_norm_backward(&d_normed, sp.gain.data(), &cache.ln);
    let g = grads.stream_mut(cache.stream);
    g.weight.add_assign(&dw);
    add_slice(g.b.data_mut(), &db);
    add_slice(g.gain.data_mut(), &dgain);
    add_slice(g.bias.data_mut(), &dbias);
    let mut d_in = Matrix::zeros(d_concat.rows(), cache.input_cols);
    for r in 0..d_concat.rows() {
        d_in.row_mut(r).copy_from_slice(&d_concat.row(r)[..cache.input_cols]);
    }
    d_in
}

fn add_slice(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of `f` at `params`.
///
/// Per coordinate the error is `|a - n| / max(|a|, |n|, floor)`; the floor
/// keeps coordinates whose true gradient is ~0 from dividing rounding noise
/// by noise. `f` may be evaluated up to `2 * params.len()` times.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64, floor: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    assert!(eps > 0.0 && eps <= 1e-2, "eps must lie in (0, 1e-2]");
    let mut theta = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let fp = f(&theta);
        theta[i] = orig - eps;
        let fm = f(&theta);
        theta[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let denom = math::abs(a).max(math::abs(numeric)).max(floor);
        worst = worst.max(math::abs(a - numeric) / denom);
    }
    worst
}

/// Default denominator floor used by the gradient checks.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
