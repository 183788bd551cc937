//! Finite-difference checks of the conditioning stack and the captioner on
//! small random instances.

use alloc::vec;
use alloc::vec::Vec;

use crate::captioner::{CaptionInputs, Captioner, CaptionerConfig, TrainExample, BOS, EOS};
use crate::conditioning::{
    add_crop_embeddings, condition_backward, condition_tokens, crop_embedding_grad, grad_check, ConditionCache,
    ConditioningConfig, ConditioningParams, Mode, Stream, GRAD_CHECK_FLOOR,
};
use crate::crops::Granularity;
use crate::rng::SplitMix64;
use crate::tensor::Matrix;
use crate::Result;

/// Finite-difference step used by both checks.
pub const EPS: f64 = 1e-5;
pub const CONDITIONING_TOLERANCE: f64 = 1e-5;
pub const CAPTIONER_TOLERANCE: f64 = 1e-4;

const DROPOUT: f64 = 0.1;

/// Flattens conditioning parameters in visit order.
pub fn flatten_conditioning(p: &ConditioningParams) -> Vec<f64> {
    let mut v = Vec::new();
    p.visit(&mut |_, m| v.extend_from_slice(m.data()));
    v
}

pub fn unflatten_conditioning(p: &mut ConditioningParams, flat: &[f64]) {
    let mut off = 0;
    p.visit_mut(&mut |m| {
        let n = m.len();
        m.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    });
}

/// A random conditioning instance: every stream, crop embeddings on the text
/// streams, train-mode dropout with fixed masks, and a random linear read-out
/// `loss = sum(c * out)`.
pub struct ConditioningProblem {
    pub params: ConditioningParams,
    pub f_x: Vec<f64>,
    /// `(stream, tokens, crop indices)`; objects carry no crop indices.
    pub inputs: Vec<(Stream, Matrix, Vec<usize>)>,
    pub readout: Vec<Matrix>,
}

impl ConditioningProblem {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let cfg = ConditioningConfig { d_o: 3, d_t: 4, d_x: 2, d: 5, dropout: DROPOUT, ..Default::default() };
        let mut params = ConditioningParams::init(cfg, &mut rng)?;
        params.visit_mut(&mut |m| m.data_mut().iter_mut().for_each(|v| *v += 0.5 * rng.next_normal()));
        let f_x: Vec<f64> = (0..cfg.d_x).map(|_| rng.next_normal()).collect();
        let mut inputs = vec![(Stream::Objects, Matrix::randn(3, cfg.d_o, 1.0, &mut rng), Vec::new())];
        for g in Granularity::ALL {
            let crops = (0..4).map(|r| g.offset() + r % g.crop_count()).collect();
            inputs.push((Stream::text(g), Matrix::randn(4, cfg.d_t, 1.0, &mut rng), crops));
        }
        let readout = inputs.iter().map(|(_, x, _)| Matrix::randn(x.rows(), cfg.d, 1.0, &mut rng)).collect();
        Ok(Self { params, f_x, inputs, readout })
    }

    fn forward(&self, params: &ConditioningParams) -> Result<(f64, Vec<ConditionCache>)> {
        let mut loss = 0.0;
        let mut caches = Vec::with_capacity(self.inputs.len());
        for (i, (stream, x, crops)) in self.inputs.iter().enumerate() {
            let x = if crops.is_empty() { x.clone() } else { add_crop_embeddings(x, crops, params)? };
            let (out, cache) = condition_tokens(*stream, &x, &self.f_x, params, DROPOUT, Mode::Train, 7 + i as u64)?;
            loss += out.tokens.data().iter().zip(self.readout[i].data()).map(|(a, b)| a * b).sum::<f64>();
            caches.push(cache);
        }
        Ok((loss, caches))
    }

    pub fn loss_at(&self, flat: &[f64]) -> Result<f64> {
        let mut p = self.params.clone();
        unflatten_conditioning(&mut p, flat);
        self.forward(&p).map(|(l, _)| l)
    }

    /// Analytic gradient, flattened in visit order.
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let (_, caches) = self.forward(&self.params)?;
        let mut g = self.params.zeros_like();
        for (i, cache) in caches.iter().enumerate() {
            let dx = condition_backward(cache, &self.readout[i], &self.params, &mut g);
            if !self.inputs[i].2.is_empty() {
                crop_embedding_grad(&dx, &self.inputs[i].2, &mut g.crop_embeddings);
            }
        }
        Ok(flatten_conditioning(&g))
    }
}

/// Max relative error of the conditioning stack on the instance for `seed`.
pub fn conditioning_check(seed: u64) -> Result<f64> {
    let problem = ConditioningProblem::random(seed)?;
    let analytic = problem.gradient()?;
    let theta = flatten_conditioning(&problem.params);
    let mut failure = None;
    let err = grad_check(
        |t| problem.loss_at(t).unwrap_or_else(|e| {
            failure = Some(e);
            0.0
        }),
        &theta,
        &analytic,
        EPS,
        GRAD_CHECK_FLOOR,
    );
    failure.map_or(Ok(err), Err)
}

/// A random one-layer captioner with a two-word vocabulary and one example.
pub fn captioner_problem(seed: u64) -> Result<(Captioner, TrainExample)> {
    let mut rng = SplitMix64::new(seed);
    let cfg = CaptionerConfig { d: 8, layers: 1, heads: 2, d_ff: 12, max_len: 8, vocab_size: 5 };
    let cond = ConditioningConfig { d_o: 4, d_t: 4, d_x: 3, dropout: DROPOUT, ..Default::default() };
    let mut model = Captioner::new(cfg, cond, true, &mut rng)?;
    // Move off the zero-initialised output layer so every path carries gradient.
    for m in model.params_mut().values_mut() {
        m.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.next_normal());
    }
    let mut text = |rows: usize, first: usize| {
        (Matrix::randn(rows, 4, 1.0, &mut rng), (0..rows).map(|r| first + r % 5).collect::<Vec<_>>())
    };
    let text = [text(2, 0), text(3, 1), text(3, 6)];
    let inputs = CaptionInputs {
        objects: Matrix::randn(3, 4, 1.0, &mut rng),
        f_x: (0..3).map(|_| rng.next_normal()).collect(),
        text,
        grid: None,
    };
    Ok((model, TrainExample { inputs, caption: vec![BOS, 3, 4, 3, EOS] }))
}

/// Max relative error of the full captioner (conditioning included).
pub fn captioner_check(seed: u64) -> Result<f64> {
    let (model, ex) = captioner_problem(seed)?;
    let (_, grads) = model.xent_loss_and_grad(&[&ex], Mode::Eval, 0)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let theta = model.params().flatten();
    let mut failure = None;
    let err = grad_check(
        |t| model.xent_loss_at(t, &[&ex]).unwrap_or_else(|e| {
            failure = Some(e);
            0.0
        }),
        &theta,
        &analytic,
        EPS,
        GRAD_CHECK_FLOOR,
    );
    failure.map_or(Ok(err), Err)
}
