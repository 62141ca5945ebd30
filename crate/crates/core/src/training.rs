//! Alternating optimisation: one main update followed by a fixed number of
//! adversarial updates per iteration, each on its own batch.
//!
//! All randomness (batch selection, crops, warping factors, sampling noise)
//! is derived from the run seed and the iteration index, so a run resumed
//! from a checkpoint continues exactly as the uninterrupted run would.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::features::content_branch_input;
use crate::io::Manifest;
use crate::losses::{cpc_loss_grad, cross_entropy_logits_grad, kld_loss_grad, total_loss, xsigmoid_loss_grad};
use crate::losses::{LossBreakdown, LossConfig, LossParts};
use crate::model::{sample_content, FeatureNorm, Model, ModelConfig, ModelParams, ParamGroup, Upstream};
use crate::nn::{AdamConfig, AdamMoments};
use crate::real::Real;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Common crop length `T'` in frames.
    pub crop_frames: usize,
    pub iterations: u64,
    /// Adversarial updates per main update.
    pub adversarial_updates: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub vtlp_min: f64,
    pub vtlp_max: f64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub exec: ExecMode,
    /// Groups excluded from every update.
    pub freeze: Vec<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 16,
            crop_frames: 160,
            iterations: 5000,
            adversarial_updates: 3,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            vtlp_min: 0.9,
            vtlp_max: 1.1,
            checkpoint_every: 1000,
            exec: ExecMode::default(),
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Checks the batch geometry against the model and loss settings.
    pub fn validate(&self, model: &ModelConfig, loss: &LossConfig) -> Result<()> {
        loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size is {}; the contrastive loss needs at least 2 utterances per batch",
                self.batch_size
            )));
        }
        let d = model.downsample();
        if !self.crop_frames.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "train.crop_frames {} must be a multiple of the content downsampling factor {d}",
                self.crop_frames
            )));
        }
        if self.crop_frames <= loss.tau_frames {
            return Err(Error::Config(format!(
                "train.crop_frames {} must exceed loss.tau_frames {}",
                self.crop_frames, loss.tau_frames
            )));
        }
        if self.crop_frames / d <= model.content_lag(loss.tau_frames) {
            return Err(Error::Config("crop leaves no anchors for the content contrastive loss".into()));
        }
        if !self.lr.is_finite()
            || self.lr <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(self.vtlp_min > 0.0 && self.vtlp_min <= self.vtlp_max) {
            return Err(Error::Config("train.vtlp_min must be positive and not above vtlp_max".into()));
        }
        Ok(())
    }
}

/// Training utterances held in memory with integer speaker labels.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub features: Vec<Array2<f32>>,
    pub labels: Vec<usize>,
    pub utterance_ids: Vec<String>,
    /// Label `k` is `speakers[k]`.
    pub speakers: Vec<String>,
}

impl TrainingData {
    /// Loads the training records of a manifest, skipping utterances shorter
    /// than `min_frames`.
    pub fn from_manifest(manifest: &Manifest, min_frames: usize) -> Result<Self> {
        let train = manifest.training_records();
        if train.records.is_empty() {
            return Err(Error::Validation("manifest has no training records".into()));
        }
        let speakers = train.speakers();
        let mut data = TrainingData { features: Vec::new(), labels: Vec::new(), utterance_ids: Vec::new(), speakers };
        let mut short = 0;
        for r in &train.records {
            let f = train.load_features(r)?;
            if f.n_frames() < min_frames {
                short += 1;
                continue;
            }
            let label = data.speakers.binary_search(&r.speaker_id).expect("speaker listed");
            data.features.push(f.values);
            data.labels.push(label);
            data.utterance_ids.push(r.utterance_id.clone());
        }
        if short > 0 {
            log::warn!("skipped {short} utterance(s) shorter than {min_frames} frames");
        }
        data.check(min_frames)?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_bins(&self) -> usize {
        self.features.first().map_or(0, |f| f.ncols())
    }

    fn check(&self, min_frames: usize) -> Result<()> {
        let present: std::collections::BTreeSet<_> = self.labels.iter().collect();
        if present.len() < 2 {
            return Err(Error::Validation(format!(
                "training data covers {} speaker(s) with at least {min_frames} frames; the contrastive (CPC) batch and \
                 speaker classifiers need utterances from at least 2 speakers",
                present.len()
            )));
        }
        let bins = self.n_bins();
        if self.features.iter().any(|f| f.ncols() != bins) {
            return Err(Error::Validation("training features disagree on the mel bin count".into()));
        }
        Ok(())
    }
}

/// `B` cropped utterances with their content-branch inputs and sampling noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<R = f32> {
    pub x: Vec<Array2<R>>,
    pub x_aug: Vec<Array2<R>>,
    pub noise: Vec<Array2<R>>,
    pub labels: Vec<usize>,
    /// Source utterance indices; all distinct.
    pub sources: Vec<usize>,
}

impl<R: Real> TrainingBatch<R> {
    pub fn cast<S: Real>(&self) -> TrainingBatch<S> {
        let conv = |v: &Vec<Array2<R>>| v.iter().map(|a| a.mapv(|x| S::lit(x.as_f64()))).collect();
        TrainingBatch {
            x: conv(&self.x),
            x_aug: conv(&self.x_aug),
            noise: conv(&self.noise),
            labels: self.labels.clone(),
            sources: self.sources.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Draws batch `slot` of `iteration`: distinct utterances, random crops,
/// random warping factors.
pub fn sample_batch(
    data: &TrainingData,
    cfg: &TrainConfig,
    model: &ModelConfig,
    run_seed: u64,
    iteration: u64,
    slot: u64,
) -> Result<TrainingBatch> {
    let b = cfg.batch_size;
    if data.len() < b {
        return Err(Error::Validation(format!(
            "a batch of {b} distinct utterances needs at least {b} training utterances, found {}",
            data.len()
        )));
    }
    let crop = cfg.crop_frames;
    let mut rng = seed::rng(run_seed, "batch", &[iteration, slot]);
    let sources = index::sample(&mut rng, data.len(), b).into_vec();
    let plan: Vec<(usize, usize, f64, u64)> = sources
        .iter()
        .map(|&i| {
            let t = data.features[i].nrows();
            let start = if t > crop { rng.gen_range(0..=t - crop) } else { 0 };
            let alpha =
                if cfg.vtlp_max > cfg.vtlp_min { rng.gen_range(cfg.vtlp_min..=cfg.vtlp_max) } else { cfg.vtlp_min };
            (i, start, alpha, rng.gen())
        })
        .collect();
    if let Some(&(i, ..)) = plan.iter().find(|(i, ..)| data.features[*i].nrows() < crop) {
        return Err(Error::Validation(format!("{} is shorter than the {crop}-frame crop", data.utterance_ids[i])));
    }
    let n_z = crop / model.downsample();
    let built = exec::map_indexed(cfg.exec, &plan, |_, &(i, start, alpha, noise_seed)| {
        let x = data.features[i].slice(s![start..start + crop, ..]).to_owned();
        let x_aug = content_branch_input(&x, alpha)?;
        let mut nrng = seed::rng(noise_seed, "noise", &[]);
        let noise = Array2::from_shape_simple_fn((n_z, model.content_dim), || nrng.sample::<f32, _>(StandardNormal));
        Ok((x, x_aug, noise))
    });
    let mut batch = TrainingBatch {
        x: Vec::with_capacity(b),
        x_aug: Vec::with_capacity(b),
        noise: Vec::with_capacity(b),
        labels: sources.iter().map(|&i| data.labels[i]).collect(),
        sources,
    };
    for r in built {
        let (x, a, n): (Array2<f32>, Array2<f32>, Array2<f32>) = r?;
        batch.x.push(x);
        batch.x_aug.push(a);
        batch.noise.push(n);
    }
    Ok(batch)
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// counters, seed and label inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model<f32>,
    /// One entry per group, in [`ParamGroup::ALL`] order.
    pub moments: Vec<AdamMoments<f32>>,
    pub iteration: u64,
    pub main_steps: u64,
    pub adversarial_steps: u64,
    pub seed: u64,
    pub speakers: Vec<String>,
    pub loss: LossConfig,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl TrainState {
    /// Fresh state sized to the data's speaker inventory, with feature
    /// statistics estimated from the data.
    pub fn new(mut config: ModelConfig, loss: LossConfig, data: &TrainingData, seed: u64) -> Result<Self> {
        config.n_speakers = data.speakers.len();
        loss.validate()?;
        let mut model = Model::new(config, seed)?;
        model.norm = FeatureNorm::estimate(data.features.iter().map(|f| f.view()))?;
        let speakers = data.speakers.clone();
        let moments = ParamGroup::ALL.iter().map(|&g| AdamMoments::for_stack(model.params.group(g))).collect();
        Ok(TrainState { model, moments, iteration: 0, main_steps: 0, adversarial_steps: 0, seed, speakers, loss })
    }

    /// Fresh counters and optimizer state for `data`, with every parameter
    /// group whose shapes match copied from `init`. Groups sized by the
    /// speaker inventory are re-initialized when the inventories differ.
    pub fn warm_start(init: &TrainState, loss: LossConfig, data: &TrainingData, seed: u64) -> Result<Self> {
        let mut state = TrainState::new(init.model.config.clone(), loss, data, seed)?;
        for g in ParamGroup::ALL {
            let (src, dst) = (init.model.params.group(g), state.model.params.group(g));
            let same = src.layers.len() == dst.layers.len()
                && src.layers.iter().zip(&dst.layers).all(|(a, b)| a.weight.dim() == b.weight.dim());
            if same {
                *state.model.params.group_mut(g) = src.clone();
            } else {
                log::info!("{} re-initialized: shape differs from the initial checkpoint", g.name());
            }
        }
        state.model.norm = init.model.norm.clone();
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend(bincode::serialize(self).expect("train state serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let state: TrainState = bincode::deserialize(&bytes[8..]).map_err(|e| Error::format(path, e.to_string()))?;
        if state.moments.len() != ParamGroup::ALL.len() {
            return Err(Error::format(path, "optimizer state does not cover every parameter group"));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn apply(&mut self, grads: &ModelParams<f32>, groups: &[ParamGroup], cfg: &TrainConfig) {
        let adam = cfg.adam();
        for &g in groups {
            if cfg.freeze.contains(&g) {
                continue;
            }
            self.moments[g as usize].step(self.model.params.group_mut(g), grads.group(g), &adam);
        }
    }
}

/// Batch-mean losses of an adversarial update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversarialLoss {
    pub adv_ce_sty: f64,
    pub adv_cpc: f64,
}

impl AdversarialLoss {
    fn first_non_finite(&self) -> Option<&'static str> {
        if !self.adv_ce_sty.is_finite() {
            Some("adv_ce_sty")
        } else if !self.adv_cpc.is_finite() {
            Some("adv_cpc")
        } else {
            None
        }
    }
}

fn sum_in_order<R: Real>(mut parts: Vec<ModelParams<R>>) -> ModelParams<R> {
    let mut acc = parts.remove(0);
    for p in &parts {
        acc.add_assign(p);
    }
    acc
}

/// Loss terms and gradients of the composite objective for every group.
///
/// Gradients for the adversarial groups are produced as a by-product; the
/// main update ignores them.
pub fn main_gradients<R: Real>(
    model: &Model<R>,
    batch: &TrainingBatch<R>,
    loss: &LossConfig,
    mode: ExecMode,
) -> Result<(LossBreakdown, ModelParams<R>)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Parameter("the contrastive loss needs at least 2 utterances per batch".into()));
    }
    let w = loss.weights();
    let inv_b = R::lit(1.0 / b as f64);
    let fwds =
        exec::map_range(mode, b, |i| model.forward(batch.x[i].view(), batch.x_aug[i].view(), batch.noise[i].view()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

    let s_views: Vec<_> = fwds.iter().map(|f| f.s_utt.view()).collect();
    let (cpc_s, g_s) = cpc_loss_grad(&s_views, loss.tau_frames)?;
    let p_views: Vec<_> = fwds.iter().map(|f| f.adv_proj.view()).collect();
    let (adv_cpc, g_p) = cpc_loss_grad(&p_views, model.config.content_lag(loss.tau_frames))?;

    let ls = R::lit(w.lambda_s);
    let lz = R::lit(w.lambda_z);
    let beta = R::lit(w.beta);
    let per_utt = exec::map_range(mode, b, |i| -> Result<([f64; 4], ModelParams<R>)> {
        let f = &fwds[i];
        let label = batch.labels[i];
        let (rec, g_rec) = xsigmoid_loss_grad(f.x_hat.view(), batch.x[i].view())?;
        let (ce, g_ce) = cross_entropy_logits_grad(f.logits_spk.view(), label)?;
        let (adv_ce, g_adv) = cross_entropy_logits_grad(f.logits_adv.view(), label)?;
        let (kld, dmu, dls) = kld_loss_grad(f.posterior.mu.view(), f.posterior.log_sigma.view());
        let up = Upstream {
            x_hat: g_rec * inv_b,
            logits_spk: g_ce * inv_b,
            logits_adv: g_adv * inv_b,
            adv_proj: &g_p[i] * lz,
            s_utt: Some(&g_s[i] * ls),
            kld: Some((dmu * (beta * inv_b), dls * (beta * inv_b))),
        };
        let mut grads = model.params.zeros_like();
        model.backward(f, &up, &mut grads);
        Ok(([rec.as_f64(), ce.as_f64(), adv_ce.as_f64(), kld.as_f64()], grads))
    });
    let mut sums = [0.0f64; 4];
    let mut grads = Vec::with_capacity(b);
    for r in per_utt {
        let (v, g) = r?;
        for (s, x) in sums.iter_mut().zip(v) {
            *s += x;
        }
        grads.push(g);
    }
    let mean = |k: usize| sums[k] / b as f64;
    let parts = LossParts {
        rec: Some(mean(0)),
        cpc_s: Some(cpc_s.as_f64()),
        kld: Some(mean(3)),
        adv_cpc: Some(adv_cpc.as_f64()),
        ce_spk: Some(mean(1)),
        adv_ce_sty: Some(mean(2)),
    };
    Ok((total_loss(&parts, &w)?, sum_in_order(grads)))
}

/// Adversarial-head losses and gradients on detached encoder outputs. Only
/// the adversarial groups receive nonzero gradients.
pub fn adversarial_gradients<R: Real>(
    model: &Model<R>,
    batch: &TrainingBatch<R>,
    loss: &LossConfig,
    mode: ExecMode,
) -> Result<(AdversarialLoss, ModelParams<R>)> {
    let b = batch.len();
    let p = &model.params;
    let heads = exec::map_range(mode, b, |i| -> Result<_> {
        let s_utt = model.utterance_encoder(batch.x[i].view())?;
        let s_sty = model.style_encoder(s_utt.view())?;
        let q = model.content_encoder(batch.x_aug[i].view())?;
        let z = sample_content(&q, batch.noise[i].view());
        let (logits, c_adv) = p.adv_clf_spk.forward(s_sty.view());
        let (proj, c_head) = model.adversarial_head_forward(z.view());
        Ok((logits, c_adv, proj, c_head))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = heads.iter().map(|h| h.2.view()).collect();
    let (cpc, g_p) = cpc_loss_grad(&views, model.config.content_lag(loss.tau_frames))?;
    let inv_b = R::lit(1.0 / b as f64);
    let per_utt = exec::map_range(mode, b, |i| -> Result<(f64, ModelParams<R>)> {
        let (logits, c_adv, proj, c_head) = &heads[i];
        let (ce, g_ce) = cross_entropy_logits_grad(logits.view(), batch.labels[i])?;
        let mut grads = p.zeros_like();
        p.adv_clf_spk.backward(c_adv, (g_ce * inv_b).view(), &mut grads.adv_clf_spk, false);
        model.adversarial_head_backward(c_head, proj.view(), g_p[i].view(), &mut grads.adv_cpc_head, false);
        Ok((ce.as_f64(), grads))
    });
    let mut ce_sum = 0.0;
    let mut grads = Vec::with_capacity(b);
    for r in per_utt {
        let (ce, g) = r?;
        ce_sum += ce;
        grads.push(g);
    }
    Ok((AdversarialLoss { adv_ce_sty: ce_sum / b as f64, adv_cpc: cpc.as_f64() }, sum_in_order(grads)))
}

/// One update of the encoders, speaker classifier and decoder. A non-finite
/// loss aborts the step without touching any parameter.
pub fn main_step(state: &mut TrainState, batch: &TrainingBatch, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let (loss, grads) = main_gradients(&state.model, batch, &state.loss, cfg.exec)?;
    if let Some(term) = loss.first_non_finite() {
        return Err(Error::Numeric(format!("main step {}: non-finite {term} loss", state.main_steps + 1)));
    }
    state.apply(&grads, &ParamGroup::MAIN, cfg);
    state.main_steps += 1;
    Ok(loss)
}

/// One update of the adversarial heads only.
pub fn adversarial_step(state: &mut TrainState, batch: &TrainingBatch, cfg: &TrainConfig) -> Result<AdversarialLoss> {
    let (loss, grads) = adversarial_gradients(&state.model, batch, &state.loss, cfg.exec)?;
    if let Some(term) = loss.first_non_finite() {
        return Err(Error::Numeric(format!(
            "adversarial step {}: non-finite {term} loss",
            state.adversarial_steps + 1
        )));
    }
    state.apply(&grads, &ParamGroup::ADVERSARIAL, cfg);
    state.adversarial_steps += 1;
    Ok(loss)
}

/// Progress notifications from [`fit_with`], delivered after each update.
#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent {
    Main { iteration: u64, loss: LossBreakdown },
    Adversarial { iteration: u64, update: usize, loss: AdversarialLoss },
}

#[derive(Debug, Clone, Default)]
pub struct FitSummary {
    pub main_updates: u64,
    pub adversarial_updates: u64,
    pub history: Vec<(u64, LossBreakdown)>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:07}.ckpt"))
}

pub fn fit(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitSummary> {
    fit_with(state, data, cfg, out_dir, |_, _| {})
}

/// Runs iterations until `cfg.iterations` is reached, continuing from
/// `state.iteration`. Writes the loss log and checkpoints under `out_dir`.
pub fn fit_with<F>(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut observe: F,
) -> Result<FitSummary>
where
    F: FnMut(&StepEvent, &TrainState),
{
    cfg.validate(&state.model.config, &state.loss)?;
    if data.n_bins() != state.model.config.n_mels {
        return Err(Error::Validation(format!(
            "features have {} bins, model expects {}",
            data.n_bins(),
            state.model.config.n_mels
        )));
    }
    if data.speakers != state.speakers {
        return Err(Error::Validation("training speakers differ from the checkpoint's speaker inventory".into()));
    }
    let mut log = match out_dir {
        Some(dir) => Some(LossLog::open(&dir.join(LOSS_LOG))?),
        None => None,
    };
    let mut summary = FitSummary::default();
    let mut strikes = 0;
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let batch = sample_batch(data, cfg, &state.model.config, state.seed, it, 0)?;
        let (loss, grads) = main_gradients(&state.model, &batch, &state.loss, cfg.exec)?;
        if let Some(l) = log.as_mut() {
            l.row(it, &loss)?;
        }
        summary.history.push((it, loss));
        if let Some(term) = loss.first_non_finite() {
            strikes += 1;
            log::warn!("iteration {it}: non-finite {term} loss, update skipped");
            if strikes >= 2 {
                if let Some(dir) = out_dir {
                    write_divergence_dump(dir, it, term, &summary.history)?;
                }
                return Err(Error::Numeric(format!(
                    "training diverged at iteration {it}: {term} loss non-finite on two consecutive iterations"
                )));
            }
        } else {
            strikes = 0;
            state.apply(&grads, &ParamGroup::MAIN, cfg);
            state.main_steps += 1;
            summary.main_updates += 1;
            observe(&StepEvent::Main { iteration: it, loss }, state);
        }
        for k in 0..cfg.adversarial_updates {
            let batch = sample_batch(data, cfg, &state.model.config, state.seed, it, 1 + k as u64)?;
            match adversarial_step(state, &batch, cfg) {
                Ok(loss) => {
                    summary.adversarial_updates += 1;
                    observe(&StepEvent::Adversarial { iteration: it, update: k, loss }, state);
                }
                Err(Error::Numeric(msg)) => log::warn!("iteration {it}: {msg}, update skipped"),
                Err(e) => return Err(e),
            }
        }
        state.iteration += 1;
        if it.is_multiple_of(100) || state.iteration == cfg.iterations {
            log::info!(
                "iteration {}: total {:.4} rec {:.4} cpc_s {:.4} ce_spk {:.4} adv_ce_sty {:.4} adv_cpc {:.4}",
                state.iteration,
                loss.total,
                loss.rec,
                loss.cpc_s,
                loss.ce_spk,
                loss.adv_ce_sty,
                loss.adv_cpc
            );
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
                let path = checkpoint_path(dir, state.iteration);
                state.save(&path)?;
                summary.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        state.save(&path)?;
        summary.checkpoints.push(path);
    }
    Ok(summary)
}

struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let fresh = !path.exists();
        let fh = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut log = LossLog { file: std::io::BufWriter::new(fh), path: path.to_path_buf() };
        if fresh {
            let header = format!("iteration,{}", LossBreakdown::FIELDS.join(","));
            writeln!(log.file, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(log)
    }

    fn row(&mut self, iteration: u64, l: &LossBreakdown) -> Result<()> {
        let vals: Vec<String> = l.values().iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(self.file, "{iteration},{}", vals.join(",")).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_divergence_dump(dir: &Path, iteration: u64, term: &str, history: &[(u64, LossBreakdown)]) -> Result<()> {
    let recent: Vec<_> = history.iter().rev().take(10).rev().collect();
    let dump = serde_json::json!({
        "iteration": iteration,
        "term": term,
        "recent_losses": recent,
    });
    let path = dir.join("divergence.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dump).expect("json")).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_mels: 8,
            n_speakers: 0,
            utt_layers: 2,
            utt_hidden: 8,
            utt_dim: 6,
            utt_kernel: 3,
            emb_layers: 2,
            emb_hidden: 8,
            emb_dim: 4,
            emb_kernel: 3,
            cont_hidden: 8,
            cont_strides: vec![1, 2],
            cont_kernel: 3,
            content_dim: 3,
            dec_hidden: 8,
            dec_kernel: 3,
            adv_hidden: 6,
            adv_head_dim: 4,
            adv_head_kernel: 3,
        }
    }

    fn tiny_data(n_spk: usize, per: usize, t: usize) -> TrainingData {
        let mut rng = seed::rng(1, "tiny", &[]);
        let mut d = TrainingData {
            features: Vec::new(),
            labels: Vec::new(),
            utterance_ids: Vec::new(),
            speakers: (0..n_spk).map(|s| format!("s{s}")).collect(),
        };
        for s in 0..n_spk {
            for u in 0..per {
                d.features.push(Array2::from_shape_simple_fn((t, 8), || rng.gen_range(-1.0f32..1.0) + s as f32));
                d.labels.push(s);
                d.utterance_ids.push(format!("s{s}_{u}"));
            }
        }
        d
    }

    fn tiny_setup() -> (TrainState, TrainingData, TrainConfig) {
        let loss = LossConfig { tau_frames: 4, ..Default::default() };
        let data = tiny_data(2, 3, 20);
        let state = TrainState::new(tiny_model(), loss, &data, 3).unwrap();
        let cfg =
            TrainConfig { batch_size: 3, crop_frames: 12, iterations: 2, checkpoint_every: 0, ..Default::default() };
        (state, data, cfg)
    }

    #[test]
    fn config_geometry_is_validated() {
        let (state, _, cfg) = tiny_setup();
        let m = &state.model.config;
        cfg.validate(m, &state.loss).unwrap();
        assert!(TrainConfig { batch_size: 1, ..cfg.clone() }.validate(m, &state.loss).is_err());
        assert!(TrainConfig { crop_frames: 11, ..cfg.clone() }.validate(m, &state.loss).is_err());
        assert!(TrainConfig { crop_frames: 4, ..cfg.clone() }.validate(m, &state.loss).is_err());
    }

    #[test]
    fn batches_are_distinct_and_deterministic() {
        let (state, data, cfg) = tiny_setup();
        let a = sample_batch(&data, &cfg, &state.model.config, 9, 4, 1).unwrap();
        let b = sample_batch(&data, &cfg, &state.model.config, 9, 4, 1).unwrap();
        assert_eq!(a, b);
        let mut src = a.sources.clone();
        src.sort();
        src.dedup();
        assert_eq!(src.len(), 3);
        assert_eq!(a.x[0].dim(), (12, 8));
        assert_eq!(a.noise[0].dim(), (6, 3));
        let c = sample_batch(&data, &cfg, &state.model.config, 9, 4, 2).unwrap();
        assert_ne!(a, c);
        let big = TrainConfig { batch_size: 7, ..cfg };
        assert!(matches!(sample_batch(&data, &big, &state.model.config, 9, 0, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn one_speaker_is_rejected() {
        let data = tiny_data(1, 4, 20);
        assert!(matches!(data.check(12), Err(Error::Validation(m)) if m.contains("contrastive")));
    }

    #[test]
    fn main_step_leaves_adversarial_groups_alone() {
        let (mut state, data, cfg) = tiny_setup();
        let before = state.model.params.clone();
        let batch = sample_batch(&data, &cfg, &state.model.config, state.seed, 0, 0).unwrap();
        let loss = main_step(&mut state, &batch, &cfg).unwrap();
        assert!(loss.total.is_finite());
        assert_eq!(state.main_steps, 1);
        for g in ParamGroup::ADVERSARIAL {
            assert_eq!(state.model.params.group(g), before.group(g));
        }
        for g in ParamGroup::MAIN {
            assert_ne!(state.model.params.group(g), before.group(g), "{}", g.name());
        }
    }

    #[test]
    fn adversarial_step_is_detached() {
        let (mut state, data, cfg) = tiny_setup();
        let batch = sample_batch(&data, &cfg, &state.model.config, state.seed, 0, 1).unwrap();
        let (_, grads) = adversarial_gradients(&state.model, &batch, &state.loss, cfg.exec).unwrap();
        for g in ParamGroup::MAIN {
            assert!(grads.group(g).is_zero(), "{}", g.name());
        }
        let before = state.model.params.clone();
        adversarial_step(&mut state, &batch, &cfg).unwrap();
        for g in ParamGroup::MAIN {
            assert_eq!(state.model.params.group(g), before.group(g));
        }
        assert_eq!(state.adversarial_steps, 1);
    }

    #[test]
    fn frozen_groups_stay_fixed() {
        let (mut state, data, cfg) = tiny_setup();
        let cfg = TrainConfig { freeze: vec![ParamGroup::EncCont], ..cfg };
        let before = state.model.params.enc_cont.clone();
        fit(&mut state, &data, &cfg, None).unwrap();
        assert_eq!(state.model.params.enc_cont, before);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let (mut state, data, cfg) = tiny_setup();
        fit(&mut state, &data, &cfg, None).unwrap();
        let back = TrainState::from_bytes(&state.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, state);
        assert!(TrainState::from_bytes(b"XXXX\x01\0\0\0", Path::new("mem")).is_err());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let (mut a, data, cfg) = tiny_setup();
        let mut b = a.clone();
        fit(&mut a, &data, &TrainConfig { exec: ExecMode::Sequential, ..cfg.clone() }, None).unwrap();
        fit(&mut b, &data, &TrainConfig { exec: ExecMode::Parallel, ..cfg }, None).unwrap();
        assert_eq!(a, b);
    }
}
