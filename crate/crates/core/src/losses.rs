//! Training objectives and the gradient-reversal operator.
//!
//! Every loss comes in a value-only form and a `_grad` form returning the value
//! together with the gradient with respect to its inputs. Reductions run
//! sequentially in index order so results do not depend on scheduling.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

fn log_sum_exp<R: Real>(row: impl Iterator<Item = R> + Clone) -> R {
    let max = row.clone().fold(R::neg_infinity(), R::max);
    if !max.is_finite() {
        return max;
    }
    max + row.map(|v| (v - max).exp()).sum::<R>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<R: Real>(logits: ArrayView2<R>) -> Array2<R> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z: R = row.iter().copied().sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// InfoNCE over a batch with a fixed time lag.
///
/// For anchor frame `t` of utterance `b`, the positive is frame `t + lag` of
/// the same utterance and the candidates are frame `t + lag` of every
/// utterance in the batch. The loss is the mean over all anchors of
/// `-log softmax` of the positive score.
pub fn cpc_loss<R: Real>(batch: &[ArrayView2<R>], lag: usize) -> Result<R> {
    cpc_loss_grad(batch, lag).map(|(l, _)| l)
}

pub fn cpc_loss_grad<R: Real>(batch: &[ArrayView2<R>], lag: usize) -> Result<(R, Vec<Array2<R>>)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Parameter(format!("contrastive loss needs at least 2 utterances per batch, got {b}")));
    }
    let (t, d) = batch[0].dim();
    if batch.iter().any(|s| s.dim() != (t, d)) {
        return Err(Error::Parameter("contrastive batch must share one sequence shape".into()));
    }
    if t <= lag {
        return Err(Error::EmptyInput(format!("sequence length {t} leaves no anchors at lag {lag}")));
    }
    let anchors = t - lag;
    let norm = R::lit((b * anchors) as f64);
    let mut grads: Vec<Array2<R>> = (0..b).map(|_| Array2::zeros((t, d))).collect();
    let mut total = R::zero();
    let mut a = Array2::<R>::zeros((b, d));
    let mut f = Array2::<R>::zeros((b, d));
    for step in 0..anchors {
        for (u, s) in batch.iter().enumerate() {
            a.row_mut(u).assign(&s.row(step));
            f.row_mut(u).assign(&s.row(step + lag));
        }
        let logits = a.dot(&f.t());
        let mut dlogits = softmax_rows(logits.view());
        for row in 0..b {
            total += log_sum_exp(logits.row(row).iter().copied()) - logits[[row, row]];
            dlogits[[row, row]] -= R::one();
        }
        dlogits.mapv_inplace(|v| v / norm);
        let da = dlogits.dot(&f);
        let df = dlogits.t().dot(&a);
        for (u, g) in grads.iter_mut().enumerate() {
            let mut ga = g.row_mut(step);
            ga += &da.row(u);
            let mut gf = g.row_mut(step + lag);
            gf += &df.row(u);
        }
    }
    Ok((total / norm, grads))
}

/// Mean over frames of `KL(N(mu, sigma²) || N(0, I))`.
pub fn kld_loss<R: Real>(mu: ArrayView2<R>, log_sigma: ArrayView2<R>) -> R {
    kld_loss_grad(mu, log_sigma).0
}

pub fn kld_loss_grad<R: Real>(mu: ArrayView2<R>, log_sigma: ArrayView2<R>) -> (R, Array2<R>, Array2<R>) {
    let n = R::lit(mu.nrows().max(1) as f64);
    let half = R::lit(0.5);
    let one = R::one();
    let two = R::lit(2.0);
    let mut total = R::zero();
    let mut dmu = Array2::zeros(mu.dim());
    let mut dls = Array2::zeros(mu.dim());
    for ((idx, &m), &ls) in mu.indexed_iter().zip(log_sigma.iter()) {
        let var = (two * ls).exp();
        total += half * (m * m + var - one - two * ls);
        dmu[idx] = m / n;
        dls[idx] = (var - one) / n;
    }
    (total / n, dmu, dls)
}

/// `(1/T) Σ_t Σ_f |Δ|·|2σ(Δ) − 1|` with `Δ = x̂ − x`, i.e. `Δ·tanh(Δ/2)`.
pub fn xsigmoid_loss<R: Real>(x_hat: ArrayView2<R>, x: ArrayView2<R>) -> Result<R> {
    xsigmoid_loss_grad(x_hat, x).map(|(l, _)| l)
}

pub fn xsigmoid_loss_grad<R: Real>(x_hat: ArrayView2<R>, x: ArrayView2<R>) -> Result<(R, Array2<R>)> {
    if x_hat.dim() != x.dim() {
        return Err(Error::Parameter(format!("reconstruction shape {:?} vs target {:?}", x_hat.dim(), x.dim())));
    }
    let t = R::lit(x.nrows().max(1) as f64);
    let half = R::lit(0.5);
    let one = R::one();
    let mut total = R::zero();
    let mut grad = Array2::zeros(x.dim());
    for ((idx, &a), &b) in x_hat.indexed_iter().zip(x.iter()) {
        let delta = a - b;
        let th = (half * delta).tanh();
        total += delta * th;
        grad[idx] = (th + half * delta * (one - th * th)) / t;
    }
    Ok((total / t, grad))
}

/// Frame-averaged cross-entropy of class probabilities against one label.
pub fn cross_entropy<R: Real>(probs: ArrayView2<R>, label: usize) -> Result<R> {
    if label >= probs.ncols() {
        return Err(Error::Parameter(format!("label {label} outside {} classes", probs.ncols())));
    }
    let t = R::lit(probs.nrows().max(1) as f64);
    let tiny = R::min_positive_value();
    Ok(-probs.column(label).iter().map(|&p| p.max(tiny).ln()).sum::<R>() / t)
}

/// Cross-entropy computed from logits via log-softmax; gradient w.r.t. logits.
pub fn cross_entropy_logits_grad<R: Real>(logits: ArrayView2<R>, label: usize) -> Result<(R, Array2<R>)> {
    if label >= logits.ncols() {
        return Err(Error::Parameter(format!("label {label} outside {} classes", logits.ncols())));
    }
    let t = R::lit(logits.nrows().max(1) as f64);
    let mut total = R::zero();
    for row in logits.outer_iter() {
        total += log_sum_exp(row.iter().copied()) - row[label];
    }
    let mut grad = softmax_rows(logits);
    grad.column_mut(label).mapv_inplace(|p| p - R::one());
    grad.mapv_inplace(|g| g / t);
    Ok((total / t, grad))
}

/// Fraction of frames whose arg-max class equals `label`.
pub fn frame_accuracy<R: Real>(logits: ArrayView2<R>, label: usize) -> f64 {
    let hits = logits
        .axis_iter(Axis(0))
        .filter(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, R::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == label
        })
        .count();
    hits as f64 / logits.nrows().max(1) as f64
}

/// Gradient-reversal layer: identity forward, negated gradient backward.
pub struct GradientReversal;

impl GradientReversal {
    pub fn forward<R: Real>(x: ArrayView2<R>) -> Array2<R> {
        x.to_owned()
    }

    pub fn backward<R: Real>(upstream: ArrayView2<R>) -> Array2<R> {
        upstream.mapv(|g| -g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_z: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_s: 1.0, lambda_z: 1.0, beta: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_z", self.lambda_z), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {v}")));
            }
        }
        Ok(())
    }
}

/// The `[loss]` configuration section: contrastive lag plus term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive lag on the utterance-level stream, in input frames.
    pub tau_frames: usize,
    pub lambda_s: f64,
    pub lambda_z: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig { tau_frames: 80, lambda_s: w.lambda_s, lambda_z: w.lambda_z, beta: w.beta }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_s: self.lambda_s, lambda_z: self.lambda_z, beta: self.beta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_frames == 0 {
            return Err(Error::Config("loss.tau_frames must be positive".into()));
        }
        self.weights().validate()
    }
}

/// Raw loss terms of one batch before weighting; `None` marks a term that was
/// not evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rec: Option<f64>,
    pub cpc_s: Option<f64>,
    pub kld: Option<f64>,
    pub adv_cpc: Option<f64>,
    pub ce_spk: Option<f64>,
    pub adv_ce_sty: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cpc_s: f64,
    pub kld: f64,
    pub adv_cpc: f64,
    pub ce_spk: f64,
    pub adv_ce_sty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 7] = ["rec", "cpc_s", "kld", "adv_cpc", "ce_spk", "adv_ce_sty", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.rec, self.cpc_s, self.kld, self.adv_cpc, self.ce_spk, self.adv_ce_sty, self.total]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Assembles the composite objective.
///
/// The adversarial terms enter with a positive sign: the adversarial heads
/// minimise them, and the gradient-reversal layers in front of the heads hand
/// the encoders the negated gradient.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let get =
        |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Config(format!("loss term {name} was not evaluated")));
    let rec = get(parts.rec, "rec")?;
    let cpc_s = get(parts.cpc_s, "cpc_s")?;
    let kld = get(parts.kld, "kld")?;
    let adv_cpc = get(parts.adv_cpc, "adv_cpc")?;
    let ce_spk = get(parts.ce_spk, "ce_spk")?;
    let adv_ce_sty = get(parts.adv_ce_sty, "adv_ce_sty")?;
    let total = rec + w.lambda_s * cpc_s + w.beta * kld + w.lambda_z * adv_cpc + ce_spk + adv_ce_sty;
    Ok(LossBreakdown { rec, cpc_s, kld, adv_cpc, ce_spk, adv_ce_sty, total })
}
