//! Audio ingestion and front-end feature processing.
//!
//! Log-mel analysis runs at 16 kHz with a 25 ms Hann window and a 12.5 ms hop,
//! i.e. 80 frames per second, so a one-second lag is exactly 80 frames. Each
//! signal is zero-padded by `(window - hop) / 2` samples on both sides, which
//! gives `floor(len / hop)` frames for any input at least one window long.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use realfft::{RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::io::{self, Manifest, ManifestRecord};
use crate::seed;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_N_MELS: usize = 80;
pub const DEFAULT_FRAME_RATE: u32 = 80;
pub const WINDOW_SECONDS: f64 = 0.025;
pub const LOG_FLOOR: f64 = 1e-10;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Log-mel matrix, `T` frames by `F` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub values: Array2<f32>,
    pub frame_rate: u32,
}

impl FeatureSequence {
    pub fn new(values: Array2<f32>, frame_rate: u32) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyInput("feature sequence has no frames".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence { values, frame_rate })
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f32>,
    pub sample_rate: u32,
    pub label: String,
}

impl Rir {
    pub fn new(taps: Vec<f32>, sample_rate: u32, label: impl Into<String>) -> Result<Self> {
        if !taps.iter().any(|t| *t != 0.0) {
            return Err(Error::Parameter("impulse response has no nonzero tap".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("impulse response contains non-finite taps".into()));
        }
        Ok(Rir { taps, sample_rate, label: label.into() })
    }
}

/// Reads a WAV file, mixes it down to mono and resamples to `target_rate`.
pub fn ingest(path: &Path, target_rate: u32) -> Result<Waveform> {
    let ingest_err = |reason: String| Error::Ingest { path: path.to_path_buf(), reason };
    if target_rate == 0 {
        return Err(Error::Parameter("target rate must be positive".into()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| ingest_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(|e| ingest_err(e.to_string()))?
        }
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ingest_err(e.to_string()))?
        }
    };
    if interleaved.len() < channels {
        return Err(Error::EmptyInput(format!("{} contains no audio", path.display())));
    }
    let mono: Vec<f32> =
        interleaved.chunks_exact(channels).map(|frame| frame.iter().sum::<f32>() / channels as f32).collect();
    let samples = resample(&mono, spec.sample_rate, target_rate)?;
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(ingest_err("decoded audio contains non-finite samples".into()));
    }
    Waveform::new(samples, target_rate)
}

/// Writes 32-bit float mono WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_err = |e: hound::Error| Error::format(path, e.to_string());
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for s in &w.samples {
        writer.write_sample(*s).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

/// Band-limited resampling by truncating or zero-extending the spectrum.
///
/// The output has exactly `round(len · to / from)` samples.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == 0 || to == 0 {
        return Err(Error::Parameter("sample rates must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to resample".into()));
    }
    if from == to {
        return Ok(samples.to_vec());
    }
    let n = samples.len();
    let m = ((n as f64) * to as f64 / from as f64).round().max(1.0) as usize;
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(m);
    let mut input: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let mut spec_in = fwd.make_output_vec();
    fwd.process(&mut input, &mut spec_in).expect("fft length");
    let mut spec_out = inv.make_input_vec();
    let keep = spec_in.len().min(spec_out.len());
    spec_out[..keep].copy_from_slice(&spec_in[..keep]);
    // An even-length input's Nyquist bin splits into a +/- pair when upsampled.
    if m > n && n.is_multiple_of(2) {
        spec_out[n / 2] *= 0.5;
    }
    spec_out[0].im = 0.0;
    if m.is_multiple_of(2) {
        let last = spec_out.len() - 1;
        spec_out[last].im = 0.0;
    }
    let mut out = inv.make_output_vec();
    inv.process(&mut spec_out, &mut out).expect("fft length");
    let scale = 1.0 / n as f64;
    Ok(out.into_iter().map(|v| (v * scale) as f32).collect())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels × (n_fft / 2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (f - lo) / (mid - lo);
        let fall = (hi - f) / (hi - mid);
        rise.min(fall).max(0.0)
    })
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos()).collect()
}

/// Framing plus power spectrum plus mel projection, planned once per geometry.
pub struct MelAnalyzer {
    pub sample_rate: u32,
    pub frame_rate: u32,
    pub hop: usize,
    pub window: Vec<f64>,
    pub n_fft: usize,
    pub filterbank: Array2<f64>,
    fft: Arc<dyn RealToComplex<f64>>,
}

impl MelAnalyzer {
    pub fn new(sample_rate: u32, n_mels: usize, frame_rate: u32) -> Result<Self> {
        if sample_rate == 0 || frame_rate == 0 || n_mels == 0 {
            return Err(Error::Parameter("sample rate, frame rate and mel count must be positive".into()));
        }
        if frame_rate > sample_rate {
            return Err(Error::Parameter("frame rate exceeds sample rate".into()));
        }
        let hop = (sample_rate as f64 / frame_rate as f64).round() as usize;
        let win_len = (sample_rate as f64 * WINDOW_SECONDS).round().max(hop as f64) as usize;
        let n_fft = win_len.next_power_of_two();
        let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n_fft);
        Ok(MelAnalyzer {
            sample_rate,
            frame_rate,
            hop,
            window: hann(win_len),
            n_fft,
            filterbank: mel_filterbank(sample_rate, n_fft, n_mels),
            fft,
        })
    }

    pub fn win_len(&self) -> usize {
        self.window.len()
    }

    fn pad(&self) -> usize {
        (self.win_len() - self.hop) / 2
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_len() {
            return 0;
        }
        1 + (n_samples + 2 * self.pad() - self.win_len()) / self.hop
    }

    fn check(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::Parameter(format!(
                "waveform at {} Hz, analyzer at {} Hz",
                w.sample_rate, self.sample_rate
            )));
        }
        if w.samples.len() < self.win_len() {
            return Err(Error::EmptyInput(format!(
                "{} samples is shorter than one {}-sample window",
                w.samples.len(),
                self.win_len()
            )));
        }
        Ok(())
    }

    /// `|STFT|²`, `T × (n_fft / 2 + 1)`.
    pub fn power_spectrogram(&self, w: &Waveform) -> Result<Array2<f64>> {
        self.check(w)?;
        let t = self.n_frames(w.samples.len());
        let n_bins = self.n_fft / 2 + 1;
        let pad = self.pad() as isize;
        let mut out = Array2::<f64>::zeros((t, n_bins));
        let mut frame = self.fft.make_input_vec();
        let mut spec = self.fft.make_output_vec();
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            frame.iter_mut().for_each(|v| *v = 0.0);
            let start = (i * self.hop) as isize - pad;
            for (j, wv) in self.window.iter().enumerate() {
                let pos = start + j as isize;
                if pos >= 0 && (pos as usize) < w.samples.len() {
                    frame[j] = w.samples[pos as usize] as f64 * wv;
                }
            }
            self.fft.process(&mut frame, &mut spec).expect("fft length");
            for (dst, c) in row.iter_mut().zip(spec.iter()) {
                *dst = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// Projects a power spectrogram onto the mel filters and takes a floored log.
    pub fn mel_from_power(&self, power: &Array2<f64>) -> FeatureSequence {
        let mel = power.dot(&self.filterbank.t());
        let values = mel.mapv(|p| p.max(LOG_FLOOR).ln() as f32);
        FeatureSequence { values, frame_rate: self.frame_rate }
    }

    pub fn logmel(&self, w: &Waveform) -> Result<FeatureSequence> {
        Ok(self.mel_from_power(&self.power_spectrogram(w)?))
    }

    /// Log-mel of a VTLP-warped power spectrogram.
    pub fn logmel_warped(&self, w: &Waveform, alpha: f64) -> Result<FeatureSequence> {
        let power = self.power_spectrogram(w)?;
        Ok(self.mel_from_power(&vtlp_matrix(&power, alpha)?))
    }
}

pub fn logmel(w: &Waveform, n_mels: usize, frame_rate: u32) -> Result<FeatureSequence> {
    MelAnalyzer::new(w.sample_rate, n_mels, frame_rate)?.logmel(w)
}

/// Source position on the frequency axis read by output bin `j`.
///
/// Linear `alpha · j` up to a knee, then a straight line that pins the top bin
/// to itself.
pub fn vtlp_source_position(j: f64, alpha: f64, n_bins: usize) -> f64 {
    let top = (n_bins - 1) as f64;
    let knee = 0.8 * top * (1.0f64).min(1.0 / alpha);
    if j <= knee {
        alpha * j
    } else {
        alpha * knee + (top - alpha * knee) * (j - knee) / (top - knee)
    }
}

/// Piecewise-linear frequency warp of every row; `alpha = 1` is the identity.
pub fn vtlp_matrix<A>(x: &Array2<A>, alpha: f64) -> Result<Array2<A>>
where
    A: num_traits::Float + num_traits::FromPrimitive,
{
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Parameter(format!("warp factor must be positive, got {alpha}")));
    }
    if alpha == 1.0 || x.ncols() < 2 {
        return Ok(x.clone());
    }
    let n = x.ncols();
    let taps: Vec<(usize, A, A)> = (0..n)
        .map(|j| {
            let src = vtlp_source_position(j as f64, alpha, n).clamp(0.0, (n - 1) as f64);
            let lo = (src.floor() as usize).min(n - 2);
            let frac = src - lo as f64;
            (lo, A::from_f64(1.0 - frac).unwrap(), A::from_f64(frac).unwrap())
        })
        .collect();
    let mut out = Array2::from_elem(x.dim(), A::zero());
    for (src_row, mut dst_row) in x.outer_iter().zip(out.outer_iter_mut()) {
        for (dst, &(lo, w0, w1)) in dst_row.iter_mut().zip(&taps) {
            *dst = src_row[lo] * w0 + src_row[lo + 1] * w1;
        }
    }
    Ok(out)
}

pub fn vtlp(x: &FeatureSequence, alpha: f64) -> Result<FeatureSequence> {
    Ok(FeatureSequence { values: vtlp_matrix(&x.values, alpha)?, frame_rate: x.frame_rate })
}

/// Per-channel standardisation over time with no learned affine.
pub fn instance_normalize_matrix(x: &Array2<f32>) -> Array2<f32> {
    let t = x.nrows().max(1) as f64;
    let mut out = x.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / t;
        let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        col.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
    }
    out
}

pub fn instance_normalize(x: &FeatureSequence) -> FeatureSequence {
    FeatureSequence { values: instance_normalize_matrix(&x.values), frame_rate: x.frame_rate }
}

/// Content-branch input: VTLP followed by instance normalisation.
pub fn content_branch_input(x: &Array2<f32>, alpha: f64) -> Result<Array2<f32>> {
    Ok(instance_normalize_matrix(&vtlp_matrix(x, alpha)?))
}

const DIRECT_CONV_LIMIT: usize = 1 << 16;

fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    let full = a.len() + b.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut pa = vec![0.0; n];
    pa[..a.len()].copy_from_slice(a);
    let mut pb = vec![0.0; n];
    pb[..b.len()].copy_from_slice(b);
    let mut sa = fwd.make_output_vec();
    let mut sb = fwd.make_output_vec();
    fwd.process(&mut pa, &mut sa).expect("fft length");
    fwd.process(&mut pb, &mut sb).expect("fft length");
    for (x, y) in sa.iter_mut().zip(&sb) {
        *x *= *y;
    }
    let mut out = inv.make_output_vec();
    inv.process(&mut sa, &mut out).expect("fft length");
    out.truncate(out_len);
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Linear convolution truncated to the input length, rescaled so the output
/// peak equals the input peak.
pub fn convolve_rir(w: &Waveform, r: &Rir) -> Result<Waveform> {
    if w.sample_rate != r.sample_rate {
        return Err(Error::Parameter(format!(
            "waveform at {} Hz but impulse response at {} Hz",
            w.sample_rate, r.sample_rate
        )));
    }
    if w.samples.is_empty() {
        return Err(Error::EmptyInput("waveform has no samples".into()));
    }
    let a: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
    let b: Vec<f64> = r.taps.iter().map(|&s| s as f64).collect();
    let n = a.len();
    let wet = if n * b.len() <= DIRECT_CONV_LIMIT {
        let mut y = vec![0.0; n];
        for (i, yi) in y.iter_mut().enumerate() {
            let kmax = b.len().min(i + 1);
            *yi = (0..kmax).map(|k| b[k] * a[i - k]).sum();
        }
        y
    } else {
        fft_convolve(&a, &b, n)
    };
    let in_peak = w.peak() as f64;
    let out_peak = wet.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if out_peak > 0.0 && in_peak > 0.0 { in_peak / out_peak } else { 1.0 };
    Waveform::new(wet.into_iter().map(|v| (v * gain) as f32).collect(), w.sample_rate)
}

/// Loads every `.wav` file in `dir` (sorted by name) as an impulse response
/// labelled by its file stem.
pub fn load_rir_dir(dir: &Path, sample_rate: u32) -> Result<Vec<Rir>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!("no .wav impulse responses in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let w = ingest(p, sample_rate)?;
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Rir::new(w.samples, sample_rate, label)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PrepOptions {
    pub n_mels: usize,
    pub frame_rate: u32,
    pub sample_rate: u32,
    pub rir_dir: Option<PathBuf>,
    pub rirs_per_utt: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for PrepOptions {
    fn default() -> Self {
        PrepOptions {
            n_mels: DEFAULT_N_MELS,
            frame_rate: DEFAULT_FRAME_RATE,
            sample_rate: DEFAULT_SAMPLE_RATE,
            rir_dir: None,
            rirs_per_utt: 4,
            seed: 0,
            exec: ExecMode::available_parallel(),
        }
    }
}

/// Extracts log-mel feature files for every audio record of `manifest`.
///
/// With an impulse-response directory each utterance additionally yields
/// `rirs_per_utt` reverberated copies, each using a distinct randomly chosen
/// response; the copy's `style_id` is the response label.
pub fn prepare_corpus(manifest: &Manifest, out_dir: &Path, opts: &PrepOptions) -> Result<Manifest> {
    let analyzer = MelAnalyzer::new(opts.sample_rate, opts.n_mels, opts.frame_rate)?;
    let rirs = match &opts.rir_dir {
        Some(dir) => load_rir_dir(dir, opts.sample_rate)?,
        None => Vec::new(),
    };
    if !rirs.is_empty() && opts.rirs_per_utt > rirs.len() {
        return Err(Error::Parameter(format!(
            "{} responses requested per utterance but only {} available",
            opts.rirs_per_utt,
            rirs.len()
        )));
    }
    let feat_dir = out_dir.join("feats");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let per_utt = exec::map_indexed(opts.exec, &manifest.records, |_, rec| -> Result<Vec<ManifestRecord>> {
        let audio = manifest.resolve_audio(rec)?;
        let wave = ingest(&audio, opts.sample_rate)?;
        let mut variants: Vec<(String, Option<String>, Waveform)> = Vec::new();
        if rirs.is_empty() {
            variants.push((rec.utterance_id.clone(), None, wave));
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::for_utterance(opts.seed, "rir", &rec.utterance_id));
            for (k, idx) in sample(&mut rng, rirs.len(), opts.rirs_per_utt).into_iter().enumerate() {
                let rir = &rirs[idx];
                variants.push((
                    format!("{}_rir{k}", rec.utterance_id),
                    Some(rir.label.clone()),
                    convolve_rir(&wave, rir)?,
                ));
            }
        }
        let mut out = Vec::with_capacity(variants.len());
        for (id, style, w) in variants {
            let feats = analyzer.logmel(&w)?;
            let rel = PathBuf::from("feats").join(format!("{id}.dsf"));
            io::write_features(&out_dir.join(&rel), &feats)?;
            out.push(ManifestRecord {
                utterance_id: id,
                audio_path: None,
                feature_path: Some(rel.to_string_lossy().into_owned()),
                speaker_id: rec.speaker_id.clone(),
                session_id: rec.session_id.clone(),
                style_id: style.unwrap_or_else(|| rec.style_id.clone()),
                duration_s: w.duration_s(),
                split: rec.split.clone(),
            });
        }
        Ok(out)
    });
    let mut records = Vec::new();
    for r in per_utt {
        records.extend(r?);
    }
    let out = Manifest::new(records, out_dir.to_path_buf());
    out.write(&out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tone(freq: f64, seconds: f64, rate: u32) -> Waveform {
        let n = (seconds * rate as f64) as usize;
        let samples =
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5).collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn one_second_gives_eighty_frames() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let f = logmel(&w, 80, 80).unwrap();
        assert_eq!(f.values.dim(), (80, 80));
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0; 8_000], 16_000).unwrap();
        let f = logmel(&w, 80, 80).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        assert!(f.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn shorter_than_window_is_empty_input() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(logmel(&w, 80, 80), Err(Error::EmptyInput(_))));
    }

    /// Naive DFT on the same frames as the analyzer.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn tone_logmel_matches_dft_reference_and_is_stationary() {
        let w = tone(440.0, 0.5, 16_000);
        let an = MelAnalyzer::new(16_000, 80, 80).unwrap();
        let feats = an.logmel(&w).unwrap();
        let pad = (an.win_len() - an.hop) / 2;
        let t = feats.n_frames();
        let mut reference = Array2::<f64>::zeros((t, an.n_fft / 2 + 1));
        for i in 0..t {
            let mut frame = vec![0.0; an.n_fft];
            for (j, v) in frame.iter_mut().enumerate().take(an.win_len()) {
                let pos = (i * an.hop + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < w.samples.len() {
                    *v = w.samples[pos as usize] as f64 * an.window[j];
                }
            }
            reference
                .row_mut(i)
                .assign(&Array2::from_shape_vec((1, an.n_fft / 2 + 1), dft_power(&frame, an.n_fft)).unwrap().row(0));
        }
        let expect = an.mel_from_power(&reference);
        for (a, b) in feats.values.iter().zip(expect.values.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }

        let lo = feats.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = feats.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        // Frames touching the zero padding are the warm-up.
        let steady: Vec<_> = (2..t - 2).map(|i| feats.values.row(i).to_owned()).collect();
        for row in &steady[1..] {
            let dev = (row - &steady[0]).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(dev < 1e-3 * range, "deviation {dev} vs range {range}");
        }
    }

    #[test]
    fn resample_length_contract() {
        let w = tone(200.0, 1.0, 8_000);
        let up = resample(&w.samples, 8_000, 16_000).unwrap();
        assert_eq!(up.len(), 16_000);
        let same = resample(&w.samples, 8_000, 8_000).unwrap();
        assert_eq!(same, w.samples);
        // Band-limited tone survives upsampling.
        let expect = tone(200.0, 1.0, 16_000);
        let err = up.iter().zip(&expect.samples).skip(200).take(15_000).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn ingest_reads_wav_and_resamples() {
        let dir = tempfile::tempdir().unwrap();
        let silent = dir.path().join("silent.wav");
        write_wav(&silent, &Waveform::new(vec![0.0; 16_000], 16_000).unwrap()).unwrap();
        let w = ingest(&silent, 16_000).unwrap();
        assert_eq!(w.samples.len(), 16_000);
        assert!(w.samples.iter().all(|s| *s == 0.0));

        let slow = dir.path().join("slow.wav");
        write_wav(&slow, &tone(100.0, 1.0, 8_000)).unwrap();
        assert_eq!(ingest(&slow, 16_000).unwrap().samples.len(), 16_000);

        let imp = dir.path().join("impulse.wav");
        let mut s = vec![0.0; 1_000];
        s[10] = 1.0;
        write_wav(&imp, &Waveform::new(s, 16_000).unwrap()).unwrap();
        let w = ingest(&imp, 16_000).unwrap();
        assert!(w.peak() <= 1.0 && w.peak() > 0.99);

        let empty = dir.path().join("empty.wav");
        write_wav(&empty, &Waveform { samples: vec![], sample_rate: 16_000 }).unwrap();
        assert!(matches!(ingest(&empty, 16_000), Err(Error::EmptyInput(_))));
        assert!(matches!(ingest(&dir.path().join("missing.wav"), 16_000), Err(Error::Ingest { .. })));
    }

    #[test]
    fn vtlp_identity_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((7, 20), |_| rng.gen_range(-3.0f32..3.0));
        assert_eq!(vtlp_matrix(&x, 1.0).unwrap(), x);
        assert!(matches!(vtlp_matrix(&x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(vtlp_matrix(&x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn vtlp_moves_an_impulse_to_k_over_alpha() {
        let n = 80;
        let k = 40;
        let alpha = 1.1;
        let mut x = Array2::<f64>::zeros((1, n));
        x[[0, k]] = 1.0;
        let y = vtlp_matrix(&x, alpha).unwrap();
        let target = k as f64 / alpha; // 36.36..
        let nonzero: Vec<usize> = (0..n).filter(|&j| y[[0, j]] != 0.0).collect();
        assert_eq!(nonzero, vec![target.floor() as usize, target.ceil() as usize]);
        // bin 36 reads position 39.6, bin 37 reads 40.7
        assert!((y[[0, 36]] - 0.6).abs() < 1e-12);
        assert!((y[[0, 37]] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn vtlp_preserves_constants_and_top_bin() {
        for alpha in [0.9, 0.95, 1.05, 1.1] {
            let x = Array2::<f32>::from_elem((3, 80), 2.5);
            let y = vtlp_matrix(&x, alpha).unwrap();
            assert_eq!(y.dim(), x.dim());
            assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-6));
            assert!((vtlp_source_position(79.0, alpha, 80) - 79.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_cases() {
        let x = ndarray::array![[1.0f32, 5.0], [3.0, 5.0]];
        let y = instance_normalize_matrix(&x);
        assert!((y[[0, 0]] + 1.0).abs() < 1e-4 && (y[[1, 0]] - 1.0).abs() < 1e-4);
        assert_eq!(y.column(1).to_vec(), vec![0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((50, 6), |_| rng.gen_range(-2.0f32..2.0));
        let scales = [0.5f32, 2.0, 3.0, 1.0, 7.0, 0.3];
        let mut affine = x.clone();
        for (c, mut col) in affine.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| scales[c] * v + c as f32);
        }
        let a = instance_normalize_matrix(&x);
        let b = instance_normalize_matrix(&affine);
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-3));
        let twice = instance_normalize_matrix(&a);
        assert!(a.iter().zip(twice.iter()).all(|(p, q)| (p - q).abs() < 1e-5));
    }

    #[test]
    fn rir_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Waveform::new((0..200).map(|_| rng.gen_range(-0.8f32..0.8)).collect(), 16_000).unwrap();
        let id = Rir::new(vec![0.5], 16_000, "id").unwrap();
        let out = convolve_rir(&w, &id).unwrap();
        assert!(out.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-6));

        let mut taps = vec![0.0; 6];
        taps[5] = 1.0;
        let shifted = convolve_rir(&w, &Rir::new(taps, 16_000, "d").unwrap()).unwrap();
        let scale = shifted.samples[5..].iter().fold(0.0f32, |m, v| m.max(v.abs()))
            / w.samples[..195].iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(shifted.samples[..5].iter().all(|v| *v == 0.0));
        for i in 5..200 {
            assert!((shifted.samples[i] - w.samples[i - 5] * scale).abs() < 1e-6);
        }

        let other = Rir::new(vec![1.0], 8_000, "x").unwrap();
        assert!(matches!(convolve_rir(&w, &other), Err(Error::Parameter(_))));
        assert!(Rir::new(vec![0.0; 4], 16_000, "z").is_err());
    }

    #[test]
    fn fft_and_direct_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Waveform::new((0..5_000).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 16_000).unwrap();
        let r = Rir::new((0..300).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 16_000, "r").unwrap();
        let a: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = r.taps.iter().map(|&v| v as f64).collect();
        let fast = fft_convolve(&a, &b, a.len());
        for i in (0..a.len()).step_by(37) {
            let direct: f64 = (0..b.len().min(i + 1)).map(|k| b[k] * a[i - k]).sum();
            assert!((fast[i] - direct).abs() < 1e-9);
        }
        assert_eq!(convolve_rir(&w, &r).unwrap().samples.len(), 5_000);
    }
}
