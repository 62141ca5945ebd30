//! Speaker verification, embedding probes, conversion and embedding export.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::features::content_branch_input;
use crate::io::{Manifest, ManifestRecord};
use crate::losses::{cross_entropy_logits_grad, softmax_rows};
use crate::model::{global_average_pool, Model};
use crate::nn::{AdamConfig, AdamMoments, ConvSpec, ConvStack};
use crate::seed;

/// Which frame-level stream an embedding is pooled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// Utterance-level `S`.
    BeforeDisen,
    Speaker,
    Style,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::BeforeDisen, Stream::Speaker, Stream::Style];

    pub fn name(self) -> &'static str {
        match self {
            Stream::BeforeDisen => "before_disen",
            Stream::Speaker => "speaker",
            Stream::Style => "style",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown stream {s}; expected before_disen, speaker or style")))
    }
}

/// Time-pooled embedding of one utterance. Deterministic: no sampling.
pub fn embed_utterance(model: &Model<f32>, x: ArrayView2<f32>, which: Stream) -> Result<Array1<f32>> {
    let s = model.utterance_encoder(x)?;
    let frames = match which {
        Stream::BeforeDisen => s,
        Stream::Speaker => model.speaker_encoder(s.view())?,
        Stream::Style => model.style_encoder(s.view())?,
    };
    Ok(global_average_pool(frames.view()))
}

pub fn embed_all(model: &Model<f32>, feats: &[Array2<f32>], which: Stream, mode: ExecMode) -> Result<Vec<Array1<f32>>> {
    exec::map_indexed(mode, feats, |_, x| embed_utterance(model, x.view(), which)).into_iter().collect()
}

pub fn load_all(manifest: &Manifest, mode: ExecMode) -> Result<Vec<Array2<f32>>> {
    exec::map_indexed(mode, &manifest.records, |_, r| manifest.load_features(r).map(|f| f.values)).into_iter().collect()
}

pub fn cosine_score(a: ArrayView1<f32>, b: ArrayView1<f32>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!("embedding sizes differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine score is undefined for a zero embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Constraint on same-speaker trial pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Same session.
    #[serde(rename = "WC")]
    Wc,
    /// Different session.
    #[serde(rename = "AC")]
    Ac,
    /// Same style.
    #[serde(rename = "WE")]
    We,
    /// Different style.
    #[serde(rename = "AE")]
    Ae,
    #[serde(rename = "unconstrained")]
    Unconstrained,
}

impl Condition {
    pub const ALL: [Condition; 5] =
        [Condition::Wc, Condition::Ac, Condition::We, Condition::Ae, Condition::Unconstrained];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Wc => "WC",
            Condition::Ac => "AC",
            Condition::We => "WE",
            Condition::Ae => "AE",
            Condition::Unconstrained => "unconstrained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown condition {s}; expected WC, AC, WE, AE or unconstrained")))
    }

    /// Whether a same-speaker pair satisfies the condition.
    pub fn admits(self, a: &ManifestRecord, b: &ManifestRecord) -> bool {
        match self {
            Condition::Wc => a.session_id == b.session_id,
            Condition::Ac => a.session_id != b.session_id,
            Condition::We => a.style_id == b.style_id,
            Condition::Ae => a.style_id != b.style_id,
            Condition::Unconstrained => true,
        }
    }
}

/// Indices refer to the records of the manifest the list was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub a: usize,
    pub b: usize,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialList {
    pub condition: Condition,
    pub seed: u64,
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.trials.len() - self.n_target()
    }

    /// Re-derives every trial's label and condition from the manifest.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        let recs = &manifest.records;
        for t in &self.trials {
            if t.a == t.b || t.a >= recs.len() || t.b >= recs.len() {
                return Err(Error::Validation(format!("invalid trial pair ({}, {})", t.a, t.b)));
            }
            let (ra, rb) = (&recs[t.a], &recs[t.b]);
            let same = ra.speaker_id == rb.speaker_id;
            if same != t.target {
                return Err(Error::Validation(format!("trial {} / {} mislabelled", ra.utterance_id, rb.utterance_id)));
            }
            if t.target && !self.condition.admits(ra, rb) {
                return Err(Error::Validation(format!(
                    "target trial {} / {} violates {}",
                    ra.utterance_id,
                    rb.utterance_id,
                    self.condition.name()
                )));
            }
        }
        Ok(())
    }
}

fn pick<T: Copy>(mut items: Vec<T>, n: usize, rng: &mut impl Rng) -> Vec<T> {
    if n >= items.len() {
        return items;
    }
    let mut idx = index::sample(rng, items.len(), n).into_vec();
    idx.sort_unstable();
    let picked = idx.iter().map(|&i| items[i]).collect();
    items.clear();
    picked
}

/// Samples target pairs obeying `condition` and unconstrained different-speaker
/// pairs. Counts larger than the candidate pool take the whole pool.
pub fn build_trials(
    manifest: &Manifest,
    condition: Condition,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    let recs = &manifest.records;
    if recs.len() < 2 {
        return Err(Error::Parameter("trial lists need at least 2 utterances".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        by_speaker.entry(r.speaker_id.as_str()).or_default().push(i);
    }
    let mut targets = Vec::new();
    let mut lacking = Vec::new();
    for (spk, idx) in &by_speaker {
        let before = targets.len();
        for (k, &i) in idx.iter().enumerate() {
            for &j in &idx[k + 1..] {
                if condition.admits(&recs[i], &recs[j]) {
                    targets.push((i, j));
                }
            }
        }
        if targets.len() == before {
            lacking.push(*spk);
        }
    }
    if n_target > 0 && targets.is_empty() {
        return Err(Error::Validation(format!(
            "no same-speaker pair satisfies {}; speakers without a valid pair: {}",
            condition.name(),
            lacking.join(", ")
        )));
    }
    let mut rng = seed::rng(seed, "trials", &[condition as u64]);
    let targets = pick(targets, n_target, &mut rng);

    let n = recs.len();
    let same_pairs: usize = by_speaker.values().map(|v| v.len() * (v.len() - 1) / 2).sum();
    let diff_pairs = n * (n - 1) / 2 - same_pairs;
    let nontargets = if n_nontarget >= diff_pairs / 2 {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| recs[i].speaker_id != recs[j].speaker_id)
            .collect();
        pick(all, n_nontarget, &mut rng)
    } else {
        let mut seen = HashSet::new();
        while seen.len() < n_nontarget {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if recs[i].speaker_id != recs[j].speaker_id {
                seen.insert((i.min(j), i.max(j)));
            }
        }
        let mut v: Vec<_> = seen.into_iter().collect();
        v.sort_unstable();
        v
    };
    let mut trials: Vec<Trial> = targets.into_iter().map(|(a, b)| Trial { a, b, target: true }).collect();
    trials.extend(nontargets.into_iter().map(|(a, b)| Trial { a, b, target: false }));
    Ok(TrialList { condition, seed, trials })
}

pub fn score_trials(list: &TrialList, embeddings: &[Array1<f32>]) -> Result<Vec<f64>> {
    list.trials.iter().map(|t| cosine_score(embeddings[t.a].view(), embeddings[t.b].view())).collect()
}

/// Equal error rate from a threshold sweep over every distinct score.
///
/// At threshold `t`, FAR is the fraction of non-targets scoring `>= t` and FRR
/// the fraction of targets scoring `< t`. The first operating point with
/// `FRR >= FAR` is located; if the rates differ there, the EER is linearly
/// interpolated from the preceding point.
pub fn compute_eer(scores: &[f64], targets: &[bool]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Parameter("score and label counts differ".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("trial scores must be finite".into()));
    }
    let n_t = targets.iter().filter(|&&t| t).count();
    let n_n = targets.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Parameter(format!("EER needs both classes; got {n_t} target and {n_n} non-target trials")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut below_t = 0usize;
    let mut below_n = 0usize;
    let mut prev: Option<(f64, f64)> = None;
    let mut k = 0;
    loop {
        let frr = below_t as f64 / n_t as f64;
        let far = (n_n - below_n) as f64 / n_n as f64;
        if frr >= far {
            return Ok(match prev {
                Some((pfrr, pfar)) if frr != far => interpolate(pfrr, pfar, frr, far),
                _ => frr,
            });
        }
        prev = Some((frr, far));
        if k == order.len() {
            unreachable!("FRR reaches 1 and FAR 0 past the largest score");
        }
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if targets[order[k]] {
                below_t += 1;
            } else {
                below_n += 1;
            }
            k += 1;
        }
    }
}

/// Crossing of the segment between two operating points.
pub fn interpolate(frr0: f64, far0: f64, frr1: f64, far1: f64) -> f64 {
    let d0 = far0 - frr0;
    let d1 = far1 - frr1;
    let a = d0 / (d0 - d1);
    frr0 + a * (frr1 - frr0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvReport {
    pub stream: Stream,
    pub condition: Condition,
    pub eer: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub seed: u64,
}

/// Scores a trial list built on `manifest` with pooled embeddings from `which`.
pub fn evaluate_sv(
    model: &Model<f32>,
    manifest: &Manifest,
    feats: &[Array2<f32>],
    which: Stream,
    list: &TrialList,
    mode: ExecMode,
) -> Result<SvReport> {
    if feats.len() != manifest.records.len() {
        return Err(Error::Parameter("feature count differs from manifest size".into()));
    }
    let emb = embed_all(model, feats, which, mode)?;
    let scores = score_trials(list, &emb)?;
    let labels: Vec<bool> = list.trials.iter().map(|t| t.target).collect();
    Ok(SvReport {
        stream: which,
        condition: list.condition,
        eer: compute_eer(&scores, &labels)?,
        n_target: list.n_target(),
        n_nontarget: list.n_nontarget(),
        seed: list.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { hidden: 128, layers: 3, epochs: 150, batch_size: 64, lr: 5e-4, seed: 0 }
    }
}

/// Fully connected classifier on standardised pooled embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub net: ConvStack<f32>,
    pub classes: Vec<String>,
    pub mean: Array1<f32>,
    pub std: Array1<f32>,
}

fn stack_rows(rows: &[Array1<f32>]) -> Result<Array2<f32>> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Parameter(format!("embedding sizes differ: {e}")))
}

impl Probe {
    fn standardize(&self, x: &Array2<f32>) -> Array2<f32> {
        (x - &self.mean) / &self.std
    }

    pub fn predict(&self, embeddings: &[Array1<f32>]) -> Result<Vec<String>> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack_rows(embeddings)?;
        if x.ncols() != self.mean.len() {
            return Err(Error::Parameter(format!("probe expects {} dims, got {}", self.mean.len(), x.ncols())));
        }
        let p = softmax_rows(self.net.infer(self.standardize(&x).view()).view());
        Ok(p.outer_iter()
            .map(|row| {
                let k = row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                self.classes[k].clone()
            })
            .collect())
    }
}

pub fn train_probe(embeddings: &[Array1<f32>], labels: &[String], cfg: &ProbeConfig) -> Result<Probe> {
    if embeddings.len() != labels.len() {
        return Err(Error::Parameter("embedding and label counts differ".into()));
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Parameter(format!("probe training needs at least 2 classes, got {}", classes.len())));
    }
    if cfg.layers == 0 || cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::Parameter("probe layers, hidden size and batch size must be positive".into()));
    }
    let x = stack_rows(embeddings)?;
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("class listed")).collect();
    let mean = x.mean_axis(Axis(0)).expect("rows");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));

    let mut dims = vec![x.ncols()];
    dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers - 1));
    dims.push(classes.len());
    let specs: Vec<ConvSpec> = dims.windows(2).map(|w| ConvSpec::new(w[0], w[1], 1)).collect();
    let mut rng = seed::rng(cfg.seed, "probe", &[]);
    let mut probe = Probe { net: ConvStack::init(&specs, &mut rng), classes, mean, std };
    let xs = probe.standardize(&x);
    let mut moments = AdamMoments::for_stack(&probe.net);
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let n = xs.nrows();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = seed::rng(cfg.seed, "probe_epoch", &[epoch as u64]);
        for i in (1..n).rev() {
            order.swap(i, erng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xs.select(Axis(0), chunk);
            let (logits, cache) = probe.net.forward(xb.view());
            let mut dlogits = Array2::zeros(logits.dim());
            for (r, &i) in chunk.iter().enumerate() {
                let (_, g) = cross_entropy_logits_grad(logits.row(r).insert_axis(Axis(0)), y[i])?;
                dlogits.row_mut(r).assign(&(g.row(0).to_owned() / chunk.len() as f32));
            }
            let mut grad = probe.net.zeros_like();
            probe.net.backward(&cache, dlogits.view(), &mut grad, false);
            moments.step(&mut probe.net, &grad, &adam);
        }
    }
    Ok(probe)
}

pub fn probe_accuracy(probe: &Probe, embeddings: &[Array1<f32>], labels: &[String]) -> Result<f64> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Parameter("held-out set must be non-empty with one label per embedding".into()));
    }
    let pred = probe.predict(embeddings)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Reads a categorical field of a manifest record by name.
pub fn label_of<'a>(r: &'a ManifestRecord, field: &str) -> Result<&'a str> {
    match field {
        "speaker_id" => Ok(&r.speaker_id),
        "session_id" => Ok(&r.session_id),
        "style_id" => Ok(&r.style_id),
        "split" => r.split.as_deref().ok_or_else(|| Error::Validation(format!("{} has no split", r.utterance_id))),
        other => Err(Error::Parameter(format!("unknown label field {other}"))),
    }
}

pub fn labels_of(manifest: &Manifest, field: &str) -> Result<Vec<String>> {
    manifest.records.iter().map(|r| label_of(r, field).map(str::to_string)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub stream: Stream,
    pub label: String,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvertMode {
    Speaker,
    Style,
    Both,
}

impl ConvertMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(ConvertMode::Speaker),
            "style" => Ok(ConvertMode::Style),
            "both" => Ok(ConvertMode::Both),
            other => Err(Error::Parameter(format!("unknown conversion mode {other}; expected speaker, style or both"))),
        }
    }
}

fn pooled_pair(model: &Model<f32>, x: ArrayView2<f32>) -> Result<(Array1<f32>, Array1<f32>)> {
    let s = model.utterance_encoder(x)?;
    let spk = global_average_pool(model.speaker_encoder(s.view())?.view());
    let sty = global_average_pool(model.style_encoder(s.view())?.view());
    Ok((spk, sty))
}

/// Decodes the source's content posterior mean with the speaker and/or style
/// embedding taken from `target`.
pub fn convert(
    model: &Model<f32>,
    source: ArrayView2<f32>,
    target: ArrayView2<f32>,
    mode: ConvertMode,
) -> Result<Array2<f32>> {
    if source.ncols() != model.config.n_mels || target.ncols() != model.config.n_mels {
        return Err(Error::Parameter(format!(
            "conversion inputs need {} bins, got {} and {}",
            model.config.n_mels,
            source.ncols(),
            target.ncols()
        )));
    }
    let q = model.content_encoder(content_branch_input(&source.to_owned(), 1.0)?.view())?;
    let (src_spk, src_sty) = pooled_pair(model, source)?;
    let (spk, sty) = match mode {
        ConvertMode::Both => pooled_pair(model, target)?,
        ConvertMode::Speaker => (pooled_pair(model, target)?.0, src_sty),
        ConvertMode::Style => (src_spk, pooled_pair(model, target)?.1),
    };
    model.decode(spk.view(), sty.view(), q.mu.view(), Some(source.nrows()))
}

/// Plain reconstruction through the source's own embeddings.
pub fn reconstruct(model: &Model<f32>, x: ArrayView2<f32>) -> Result<Array2<f32>> {
    let q = model.content_encoder(content_branch_input(&x.to_owned(), 1.0)?.view())?;
    let (spk, sty) = pooled_pair(model, x)?;
    model.decode(spk.view(), sty.view(), q.mu.view(), Some(x.nrows()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub style_id: String,
    pub split: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub stream: Stream,
    pub rows: Vec<EmbeddingRow>,
}

const META_COLUMNS: [&str; 5] = ["utterance_id", "speaker_id", "session_id", "style_id", "split"];

pub fn export_embeddings(
    model: &Model<f32>,
    manifest: &Manifest,
    which: Stream,
    mode: ExecMode,
) -> Result<EmbeddingTable> {
    if manifest.records.is_empty() {
        return Err(Error::Parameter("cannot export embeddings from an empty manifest".into()));
    }
    let feats = load_all(manifest, mode)?;
    let emb = embed_all(model, &feats, which, mode)?;
    let rows = manifest
        .records
        .iter()
        .zip(emb)
        .map(|(r, e)| EmbeddingRow {
            utterance_id: r.utterance_id.clone(),
            speaker_id: r.speaker_id.clone(),
            session_id: r.session_id.clone(),
            style_id: r.style_id.clone(),
            split: r.split.clone().unwrap_or_default(),
            embedding: e.to_vec(),
        })
        .collect();
    Ok(EmbeddingTable { stream: which, rows })
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.embedding.len())
    }

    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), self.dim()), |(i, j)| self.rows[i].embedding[j] as f64)
    }

    /// CSV with metadata columns followed by `e0 .. e{D-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((0..self.dim()).map(|j| format!("e{j}")));
        w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.rows {
            let mut rec = vec![
                r.utterance_id.clone(),
                r.speaker_id.clone(),
                r.session_id.clone(),
                r.style_id.clone(),
                r.split.clone(),
            ];
            rec.extend(r.embedding.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, stream: Stream) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            if rec.len() < META_COLUMNS.len() {
                return Err(Error::format(path, "row is missing metadata columns"));
            }
            let embedding = rec
                .iter()
                .skip(META_COLUMNS.len())
                .map(|v| v.parse::<f32>().map_err(|e| Error::format(path, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(EmbeddingRow {
                utterance_id: rec[0].to_string(),
                speaker_id: rec[1].to_string(),
                session_id: rec[2].to_string(),
                style_id: rec[3].to_string(),
                split: rec[4].to_string(),
                embedding,
            });
        }
        Ok(EmbeddingTable { stream, rows })
    }
}

/// Principal-component projection to two dimensions. Component signs are
/// fixed so that each component's largest-magnitude loading is positive.
pub fn project_2d(x: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::Parameter("cannot project an empty table".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("rows");
    let centred = x - &mean;
    let cov = centred.t().dot(&centred) / n as f64;
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Array2::<f64>::zeros((d, 2));
    for (c, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().fold(0.0f64, |best, &x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            basis[[j, c]] = sign * v[j];
        }
    }
    Ok(centred.dot(&basis))
}

/// CSV with the table's metadata columns followed by `x, y`.
pub fn write_projection_csv(path: &Path, table: &EmbeddingTable, xy: &Array2<f64>) -> Result<()> {
    if xy.dim() != (table.rows.len(), 2) {
        return Err(Error::Parameter(format!(
            "projection has shape {:?}, expected ({}, 2)",
            xy.dim(),
            table.rows.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header: Vec<&str> = META_COLUMNS.to_vec();
    header.extend(["x", "y"]);
    w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for (r, p) in table.rows.iter().zip(xy.rows()) {
        let rec = [&r.utterance_id, &r.speaker_id, &r.session_id, &r.style_id, &r.split];
        let mut rec: Vec<String> = rec.iter().map(|s| s.to_string()).collect();
        rec.extend([p[0].to_string(), p[1].to_string()]);
        w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean pairwise Euclidean distance within and across groups.
pub fn distance_statistics(x: &Array2<f64>, groups: &[String]) -> (f64, f64) {
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..x.nrows() {
        for j in i + 1..x.nrows() {
            let d = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
            if groups[i] == groups[j] {
                within += d;
                nw += 1;
            } else {
                across += d;
                na += 1;
            }
        }
    }
    (within / nw.max(1) as f64, across / na.max(1) as f64)
}
