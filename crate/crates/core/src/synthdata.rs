//! Factorized synthetic corpora with known ground truth.
//!
//! Every utterance is a sum of independent log-mel components:
//!
//! ```text
//! x[t, f] = base[f] + speaker[s, f] + session[s, q, f] + tilt[j] · ramp[f] + content[t, f]
//! ```
//!
//! Session offsets are recording-channel curves drawn from a pool shared by
//! all speakers; each utterance is assigned one of its speaker's sessions at
//! random. Speaker, session and style components are constant in time. Content is a
//! low-dimensional autoregressive trajectory mixed onto the mel bins; its
//! temporal smoothing kernel is the second half of the style signature.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::features::{FeatureSequence, Rir};
use crate::io::{self, Manifest, ManifestRecord};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_styles: usize,
    pub utts_per_cell: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub n_mels: usize,
    pub frame_rate: u32,
    pub sessions_per_speaker: usize,
    /// Number of distinct recording channels sessions draw from.
    pub channel_pool: usize,
    /// RMS of the speaker offset curve.
    pub speaker_scale: f64,
    /// RMS of each channel curve.
    pub session_scale: f64,
    /// Largest absolute spectral tilt; styles are spread evenly in `[-s, s]`.
    pub style_tilt: f64,
    /// Per-bin standard deviation of the content component.
    pub content_scale: f64,
    pub content_dims: usize,
    /// Correlation time of the content trajectory, in frames.
    pub content_corr_frames: f64,
    pub heldout_speaker_frac: f64,
    pub reserve_style: bool,
    pub test_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 20,
            n_styles: 4,
            utts_per_cell: 10,
            duration_s: 2.0,
            seed: 0,
            n_mels: 80,
            frame_rate: 80,
            sessions_per_speaker: 2,
            channel_pool: 8,
            speaker_scale: 1.0,
            session_scale: 0.4,
            style_tilt: 1.5,
            content_scale: 1.0,
            content_dims: 6,
            content_corr_frames: 4.0,
            heldout_speaker_frac: 0.2,
            reserve_style: true,
            test_frac: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.frame_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Parameter(format!(
                "verification corpora need at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        for (name, v) in [
            ("styles", self.n_styles),
            ("utts_per_cell", self.utts_per_cell),
            ("sessions_per_speaker", self.sessions_per_speaker),
            ("channel_pool", self.channel_pool),
            ("n_mels", self.n_mels),
            ("content_dims", self.content_dims),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be at least 1")));
            }
        }
        if self.n_mels < 2 {
            return Err(Error::Parameter("at least two mel bins are needed for a tilt".into()));
        }
        if !self.duration_s.is_finite() || self.duration_s <= 0.0 || self.n_frames() == 0 {
            return Err(Error::Parameter(format!("duration {} s yields no frames", self.duration_s)));
        }
        if !self.content_corr_frames.is_finite() || self.content_corr_frames <= 0.0 {
            return Err(Error::Parameter("content correlation time must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth factors of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFactors {
    pub speaker: usize,
    pub session: usize,
    pub style: usize,
    /// `T × content_dims` latent controls after the style's smoothing kernel.
    pub content_trajectory: Array2<f32>,
}

/// Corpus-wide factor tables the features are rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTables {
    pub base: Array1<f64>,
    /// `K × F`.
    pub speaker_offsets: Array2<f64>,
    /// `P × F` channel curves.
    pub channel_offsets: Array2<f64>,
    /// Channel of session `q` of speaker `s` at index `s · Q + q`.
    pub session_channel: Vec<usize>,
    pub style_tilts: Vec<f64>,
    /// Box-kernel widths applied to the content trajectory.
    pub style_smear: Vec<usize>,
    /// `F × content_dims`.
    pub content_mix: Array2<f64>,
    /// `ramp[f] = 2 f / (F - 1) - 1`.
    pub ramp: Array1<f64>,
}

/// Separated additive components of a rendered utterance, each `T × F`.
#[derive(Debug, Clone)]
pub struct Components {
    pub base: Array2<f64>,
    pub speaker: Array2<f64>,
    pub session: Array2<f64>,
    pub style: Array2<f64>,
    pub content: Array2<f64>,
}

impl Components {
    pub fn sum(&self) -> Array2<f64> {
        &self.base + &self.speaker + &self.session + &self.style + &self.content
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub record: ManifestRecord,
    pub features: FeatureSequence,
    pub factors: SyntheticFactors,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub tables: FactorTables,
    pub utterances: Vec<SyntheticUtterance>,
}

/// Smooth random curve over `n` bins with the given RMS.
fn smooth_curve<G: Rng>(rng: &mut G, n: usize, rms: f64) -> Array1<f64> {
    let harmonics: Vec<(f64, f64)> = (1..=5)
        .map(|m| (rng.sample::<f64, _>(StandardNormal) / m as f64, rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut curve = Array1::from_shape_fn(n, |f| {
        let x = std::f64::consts::PI * f as f64 / (n - 1).max(1) as f64;
        harmonics.iter().enumerate().map(|(m, (a, ph))| a * ((m + 1) as f64 * x + ph).cos()).sum::<f64>()
    });
    let mean = curve.mean().unwrap_or(0.0);
    curve -= mean;
    let norm = (curve.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
    if norm > 0.0 {
        curve *= rms / norm;
    }
    curve
}

pub fn factor_tables(cfg: &SynthConfig) -> FactorTables {
    let f = cfg.n_mels;
    let q = cfg.sessions_per_speaker;
    let mut base_rng = seed::rng(cfg.seed, "base", &[]);
    let ramp = Array1::from_shape_fn(f, |i| 2.0 * i as f64 / (f - 1) as f64 - 1.0);
    let base = smooth_curve(&mut base_rng, f, 0.5) - ramp.mapv(|r| 1.5 * r) - 4.0;

    let mut speaker_offsets = Array2::zeros((cfg.n_speakers, f));
    let mut session_channel = Vec::with_capacity(cfg.n_speakers * q);
    for s in 0..cfg.n_speakers {
        let mut rng = seed::rng(cfg.seed, "speaker", &[s as u64]);
        speaker_offsets.row_mut(s).assign(&smooth_curve(&mut rng, f, cfg.speaker_scale));
        let mut rng = seed::rng(cfg.seed, "session", &[s as u64]);
        let picks = rand::seq::index::sample(&mut rng, cfg.channel_pool, q.min(cfg.channel_pool));
        session_channel.extend((0..q).map(|k| picks.index(k % picks.len())));
    }
    let mut channel_offsets = Array2::zeros((cfg.channel_pool, f));
    for c in 0..cfg.channel_pool {
        let mut rng = seed::rng(cfg.seed, "channel", &[c as u64]);
        channel_offsets.row_mut(c).assign(&smooth_curve(&mut rng, f, cfg.session_scale));
    }
    let j = cfg.n_styles;
    let style_tilts =
        (0..j).map(|i| if j == 1 { 0.0 } else { cfg.style_tilt * (2.0 * i as f64 / (j - 1) as f64 - 1.0) }).collect();
    let style_smear = (0..j).map(|i| 2 * (i % 4) + 1).collect();
    let mut mix_rng = seed::rng(cfg.seed, "content_mix", &[]);
    let w_scale = cfg.content_scale / (cfg.content_dims as f64).sqrt();
    let content_mix =
        Array2::from_shape_fn((f, cfg.content_dims), |_| w_scale * mix_rng.sample::<f64, _>(StandardNormal));
    FactorTables {
        base,
        speaker_offsets,
        channel_offsets,
        session_channel,
        style_tilts,
        style_smear,
        content_mix,
        ramp,
    }
}

/// Unit-variance AR(1) trajectory smoothed by a variance-preserving box kernel.
fn content_trajectory<G: Rng>(rng: &mut G, t: usize, dims: usize, corr: f64, smear: usize) -> Array2<f64> {
    let rho = (-1.0 / corr).exp();
    let innov = (1.0 - rho * rho).sqrt();
    let raw = {
        let mut u = Array2::<f64>::zeros((t, dims));
        for c in 0..dims {
            let mut prev: f64 = rng.sample(StandardNormal);
            for i in 0..t {
                if i > 0 {
                    prev = rho * prev + innov * rng.sample::<f64, _>(StandardNormal);
                }
                u[[i, c]] = prev;
            }
        }
        u
    };
    if smear <= 1 {
        return raw;
    }
    let half = (smear / 2) as isize;
    let gain = 1.0 / (smear as f64).sqrt();
    Array2::from_shape_fn((t, dims), |(i, c)| {
        (-half..=half).map(|k| raw[[(i as isize + k).clamp(0, t as isize - 1) as usize, c]]).sum::<f64>() * gain
    })
}

/// Renders the additive components of one utterance from the factor tables.
pub fn render_components(tables: &FactorTables, factors: &SyntheticFactors, sessions_per_speaker: usize) -> Components {
    let t = factors.content_trajectory.nrows();
    let f = tables.base.len();
    let rows = |v: Array1<f64>| v.broadcast((t, f)).expect("broadcast").to_owned();
    let traj = factors.content_trajectory.mapv(|v| v as f64);
    Components {
        base: rows(tables.base.clone()),
        speaker: rows(tables.speaker_offsets.row(factors.speaker).to_owned()),
        session: rows(
            tables
                .channel_offsets
                .row(tables.session_channel[factors.speaker * sessions_per_speaker + factors.session])
                .to_owned(),
        ),
        style: rows(&tables.ramp * tables.style_tilts[factors.style]),
        content: traj.dot(&tables.content_mix.t()),
    }
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

pub fn style_id(j: usize) -> String {
    format!("sty{j:02}")
}

pub fn session_id(s: usize, q: usize) -> String {
    format!("spk{s:03}_ses{q}")
}

/// Generates the corpus; identical configuration gives bit-identical output.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    generate_corpus_with(cfg, ExecMode::available_parallel())
}

pub fn generate_corpus_with(cfg: &SynthConfig, mode: ExecMode) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let tables = factor_tables(cfg);
    let t = cfg.n_frames();
    let heldout_spk = ((cfg.heldout_speaker_frac * cfg.n_speakers as f64).ceil() as usize).min(cfg.n_speakers - 2);
    let train_spk = cfg.n_speakers - heldout_spk;
    let reserved_style = (cfg.reserve_style && cfg.n_styles >= 2).then_some(cfg.n_styles - 1);
    let n_test = (cfg.test_frac * cfg.utts_per_cell as f64).floor() as usize;

    let mut cells = Vec::with_capacity(cfg.n_speakers * cfg.n_styles * cfg.utts_per_cell);
    for s in 0..cfg.n_speakers {
        for j in 0..cfg.n_styles {
            for m in 0..cfg.utts_per_cell {
                cells.push((s, j, m));
            }
        }
    }
    let utterances = exec::map_indexed(mode, &cells, |_, &(s, j, m)| {
        let mut rng = seed::rng(cfg.seed, "utterance", &[s as u64, j as u64, m as u64]);
        let session = rng.gen_range(0..cfg.sessions_per_speaker);
        let traj = content_trajectory(&mut rng, t, cfg.content_dims, cfg.content_corr_frames, tables.style_smear[j]);
        let factors = SyntheticFactors { speaker: s, session, style: j, content_trajectory: traj.mapv(|v| v as f32) };
        let values = render_components(&tables, &factors, cfg.sessions_per_speaker).sum().mapv(|v| v as f32);
        let split = if s >= train_spk {
            "unseen_speaker"
        } else if Some(j) == reserved_style {
            "unseen_style"
        } else if m >= cfg.utts_per_cell - n_test {
            "test"
        } else {
            "train"
        };
        let id = format!("{}_{}_{m:03}", speaker_id(s), style_id(j));
        SyntheticUtterance {
            record: ManifestRecord {
                utterance_id: id.clone(),
                audio_path: None,
                feature_path: Some(format!("feats/{id}.dsf")),
                speaker_id: speaker_id(s),
                session_id: session_id(s, session),
                style_id: style_id(j),
                duration_s: t as f64 / cfg.frame_rate as f64,
                split: Some(split.to_string()),
            },
            features: FeatureSequence { values, frame_rate: cfg.frame_rate },
            factors,
        }
    });
    Ok(SyntheticCorpus { config: cfg.clone(), tables, utterances })
}

impl SyntheticCorpus {
    pub fn manifest(&self, base_dir: &Path) -> Manifest {
        Manifest::new(self.utterances.iter().map(|u| u.record.clone()).collect(), base_dir.to_path_buf())
    }

    /// Writes feature files under `out_dir/feats` and `out_dir/manifest.jsonl`.
    pub fn write(&self, out_dir: &Path) -> Result<Manifest> {
        for u in &self.utterances {
            let rel = u.record.feature_path.as_deref().expect("synthetic records carry feature paths");
            io::write_features(&out_dir.join(rel), &u.features)?;
        }
        let manifest = self.manifest(out_dir);
        manifest.write(&out_dir.join("manifest.jsonl"))?;
        Ok(manifest)
    }

    pub fn components(&self, idx: usize) -> Components {
        render_components(&self.tables, &self.utterances[idx].factors, self.config.sessions_per_speaker)
    }
}

/// Exponentially decaying noise tail behind a unit direct-path tap.
///
/// The amplitude envelope falls by 60 dB over `rt60_s`.
pub fn generate_rir(rt60_s: f64, length: usize, sample_rate: u32, seed: u64) -> Result<Rir> {
    if !rt60_s.is_finite() || rt60_s <= 0.0 {
        return Err(Error::Parameter(format!("rt60 must be positive, got {rt60_s}")));
    }
    if sample_rate == 0 {
        return Err(Error::Parameter("sample rate must be positive".into()));
    }
    let needed = (rt60_s * sample_rate as f64).ceil() as usize;
    if length == 0 || length < needed {
        return Err(Error::Parameter(format!(
            "{length} taps cannot hold a {rt60_s} s decay at {sample_rate} Hz (need {needed})"
        )));
    }
    let decay = 1000f64.ln() / (rt60_s * sample_rate as f64);
    let mut rng = seed::rng(seed, "rir", &[]);
    let mut taps = Vec::with_capacity(length);
    taps.push(1.0f32);
    for n in 1..length {
        let g: f64 = rng.gen_range(-1.0..1.0);
        taps.push((0.5 * g * (-decay * n as f64).exp()) as f32);
    }
    Rir::new(taps, sample_rate, format!("synth_rt60_{rt60_s:.3}"))
}

/// Least-squares slope of the time-averaged spectrum against bin index.
pub fn tilt_statistic(x: ArrayView2<f32>) -> f64 {
    let f = x.ncols();
    let mean_spec: Vec<f64> =
        (0..f).map(|k| x.column(k).iter().map(|&v| v as f64).sum::<f64>() / x.nrows() as f64).collect();
    let kbar = (f as f64 - 1.0) / 2.0;
    let ybar = mean_spec.iter().sum::<f64>() / f as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, y) in mean_spec.iter().enumerate() {
        num += (k as f64 - kbar) * (y - ybar);
        den += (k as f64 - kbar).powi(2);
    }
    num / den
}

/// Pearson correlation between two equally shaped matrices after removing
/// each bin's time average.
pub fn content_correlation(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Parameter(format!("shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let centre = |m: ArrayView2<f32>| {
        let m = m.mapv(|v| v as f64);
        let mean = m.mean_axis(ndarray::Axis(0)).expect("frames");
        m - &mean
    };
    let (ca, cb) = (centre(a), centre(b));
    let num = (&ca * &cb).sum();
    let den = (ca.mapv(|v| v * v).sum() * cb.mapv(|v| v * v).sum()).sqrt();
    if den == 0.0 {
        return Err(Error::Numeric("correlation of a time-constant matrix is undefined".into()));
    }
    Ok(num / den)
}
