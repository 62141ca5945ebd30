//! Network architecture.
//!
//! ```text
//!  X ──► enc_utt ──► S ──┬─► enc_spk ──► S_spk ──┬─► clf_spk ──► P_spk
//!                        │                       └─► GAP ─┐
//!                        └─► enc_sty ──► S_sty ──┬─► R ─► adv_clf_spk ──► P_sty
//!                                                └─► GAP ─┤
//!  VTLP+IN(X) ─► enc_cont ─► (mu, log σ) ─► Z ──┬─► R ─► adv_cpc_head    │
//!                                               └──────────────► dec ◄───┘
//! ```
//!
//! `R` is the gradient-reversal layer. Utterance, speaker and style paths keep
//! the input frame rate; the content path downsamples by the product of its
//! strides and the decoder upsamples by the same factor.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{softmax_rows, GradientReversal};
use crate::nn::{ConvSpec, ConvStack, StackCache};
use crate::real::Real;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Speaker inventory size; filled in from the training manifest.
    pub n_speakers: usize,
    pub utt_layers: usize,
    pub utt_hidden: usize,
    pub utt_dim: usize,
    pub utt_kernel: usize,
    pub emb_layers: usize,
    pub emb_hidden: usize,
    pub emb_dim: usize,
    pub emb_kernel: usize,
    pub cont_hidden: usize,
    pub cont_strides: Vec<usize>,
    pub cont_kernel: usize,
    pub content_dim: usize,
    pub dec_hidden: usize,
    pub dec_kernel: usize,
    pub adv_hidden: usize,
    pub adv_head_dim: usize,
    pub adv_head_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            n_speakers: 0,
            utt_layers: 4,
            utt_hidden: 512,
            utt_dim: 256,
            utt_kernel: 5,
            emb_layers: 3,
            emb_hidden: 128,
            emb_dim: 128,
            emb_kernel: 5,
            cont_hidden: 512,
            cont_strides: vec![1, 2, 2],
            cont_kernel: 5,
            content_dim: 64,
            dec_hidden: 512,
            dec_kernel: 5,
            adv_hidden: 128,
            adv_head_dim: 128,
            adv_head_kernel: 3,
        }
    }
}

impl ModelConfig {
    /// Content-path downsampling factor `d`.
    pub fn downsample(&self) -> usize {
        self.cont_strides.iter().product()
    }

    /// Width of the decoder input: two pooled embeddings plus the content code.
    pub fn decoder_input_dim(&self) -> usize {
        2 * self.emb_dim + self.content_dim
    }

    /// Lag on the content sequence matching `tau` input frames.
    pub fn content_lag(&self, tau: usize) -> usize {
        tau / self.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_mels", self.n_mels),
            ("utt_hidden", self.utt_hidden),
            ("utt_dim", self.utt_dim),
            ("utt_kernel", self.utt_kernel),
            ("emb_hidden", self.emb_hidden),
            ("emb_dim", self.emb_dim),
            ("emb_kernel", self.emb_kernel),
            ("cont_hidden", self.cont_hidden),
            ("cont_kernel", self.cont_kernel),
            ("content_dim", self.content_dim),
            ("dec_hidden", self.dec_hidden),
            ("dec_kernel", self.dec_kernel),
            ("adv_hidden", self.adv_hidden),
            ("adv_head_dim", self.adv_head_dim),
            ("adv_head_kernel", self.adv_head_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.utt_layers < 2 || self.emb_layers < 2 {
            return Err(Error::Config("encoders need at least two layers".into()));
        }
        if self.cont_strides.is_empty() || self.cont_strides.contains(&0) {
            return Err(Error::Config("model.cont_strides must be non-empty and positive".into()));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config(format!(
                "speaker inventory has {} speaker(s); classifiers need at least 2",
                self.n_speakers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    EncUtt,
    EncSpk,
    EncSty,
    EncCont,
    Dec,
    ClfSpk,
    AdvClfSpk,
    AdvCpcHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::EncUtt,
        ParamGroup::EncSpk,
        ParamGroup::EncSty,
        ParamGroup::EncCont,
        ParamGroup::Dec,
        ParamGroup::ClfSpk,
        ParamGroup::AdvClfSpk,
        ParamGroup::AdvCpcHead,
    ];

    /// Groups updated by the main step.
    pub const MAIN: [ParamGroup; 6] = [
        ParamGroup::EncUtt,
        ParamGroup::EncSpk,
        ParamGroup::EncSty,
        ParamGroup::EncCont,
        ParamGroup::Dec,
        ParamGroup::ClfSpk,
    ];

    /// Groups updated by the adversarial step.
    pub const ADVERSARIAL: [ParamGroup; 2] = [ParamGroup::AdvClfSpk, ParamGroup::AdvCpcHead];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::EncUtt => "enc_utt",
            ParamGroup::EncSpk => "enc_spk",
            ParamGroup::EncSty => "enc_sty",
            ParamGroup::EncCont => "enc_cont",
            ParamGroup::Dec => "dec",
            ParamGroup::ClfSpk => "clf_spk",
            ParamGroup::AdvClfSpk => "adv_clf_spk",
            ParamGroup::AdvCpcHead => "adv_cpc_head",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter group {name}")))
    }
}

/// All trainable parameters, one stack per group. Gradients and optimizer
/// moments use the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<R> {
    pub enc_utt: ConvStack<R>,
    pub enc_spk: ConvStack<R>,
    pub enc_sty: ConvStack<R>,
    pub enc_cont: ConvStack<R>,
    pub dec: ConvStack<R>,
    pub clf_spk: ConvStack<R>,
    pub adv_clf_spk: ConvStack<R>,
    pub adv_cpc_head: ConvStack<R>,
}

impl<R: Real> ModelParams<R> {
    pub fn group(&self, g: ParamGroup) -> &ConvStack<R> {
        match g {
            ParamGroup::EncUtt => &self.enc_utt,
            ParamGroup::EncSpk => &self.enc_spk,
            ParamGroup::EncSty => &self.enc_sty,
            ParamGroup::EncCont => &self.enc_cont,
            ParamGroup::Dec => &self.dec,
            ParamGroup::ClfSpk => &self.clf_spk,
            ParamGroup::AdvClfSpk => &self.adv_clf_spk,
            ParamGroup::AdvCpcHead => &self.adv_cpc_head,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut ConvStack<R> {
        match g {
            ParamGroup::EncUtt => &mut self.enc_utt,
            ParamGroup::EncSpk => &mut self.enc_spk,
            ParamGroup::EncSty => &mut self.enc_sty,
            ParamGroup::EncCont => &mut self.enc_cont,
            ParamGroup::Dec => &mut self.dec,
            ParamGroup::ClfSpk => &mut self.clf_spk,
            ParamGroup::AdvClfSpk => &mut self.adv_clf_spk,
            ParamGroup::AdvCpcHead => &mut self.adv_cpc_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(ConvStack::zeros_like)
    }

    pub fn map(&self, f: impl Fn(&ConvStack<R>) -> ConvStack<R>) -> Self {
        ModelParams {
            enc_utt: f(&self.enc_utt),
            enc_spk: f(&self.enc_spk),
            enc_sty: f(&self.enc_sty),
            enc_cont: f(&self.enc_cont),
            dec: f(&self.dec),
            clf_spk: f(&self.clf_spk),
            adv_clf_spk: f(&self.adv_clf_spk),
            adv_cpc_head: f(&self.adv_cpc_head),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for g in ParamGroup::ALL {
            self.group_mut(g).add_assign(other.group(g));
        }
    }

    pub fn scale(&mut self, k: R) {
        for g in ParamGroup::ALL {
            self.group_mut(g).scale(k);
        }
    }

    pub fn num_params(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group(g).num_params()).sum()
    }

    pub fn all_finite(&self) -> bool {
        ParamGroup::ALL.iter().all(|&g| self.group(g).all_finite())
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        let conv = |st: &ConvStack<R>| ConvStack {
            layers: st
                .layers
                .iter()
                .map(|l| crate::nn::Conv1d {
                    spec: l.spec,
                    weight: l.weight.mapv(|v| S::lit(v.as_f64())),
                    bias: l.bias.mapv(|v| S::lit(v.as_f64())),
                })
                .collect(),
        };
        ModelParams {
            enc_utt: conv(&self.enc_utt),
            enc_spk: conv(&self.enc_spk),
            enc_sty: conv(&self.enc_sty),
            enc_cont: conv(&self.enc_cont),
            dec: conv(&self.dec),
            clf_spk: conv(&self.clf_spk),
            adv_clf_spk: conv(&self.adv_clf_spk),
            adv_cpc_head: conv(&self.adv_cpc_head),
        }
    }
}

/// Per-frame diagonal Gaussian over the content code.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentPosterior<R> {
    pub mu: Array2<R>,
    pub log_sigma: Array2<R>,
}

/// Rows are per-frame distributions over speakers.
pub type ClassProbabilities<R> = Array2<R>;

/// Fixed per-bin affine map between raw features and the network's working
/// scale, estimated once from the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(n_bins: usize) -> Self {
        FeatureNorm { mean: vec![0.0; n_bins], std: vec![1.0; n_bins] }
    }

    /// Per-bin mean and standard deviation over every frame of `utterances`.
    pub fn estimate<'a>(utterances: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for u in utterances {
            if sum.is_empty() {
                sum = vec![0.0; u.ncols()];
                sq = vec![0.0; u.ncols()];
            }
            if u.ncols() != sum.len() {
                return Err(Error::Validation("utterances disagree on the bin count".into()));
            }
            for row in u.outer_iter() {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            n += u.nrows();
        }
        if n == 0 {
            return Err(Error::EmptyInput("no frames to estimate feature statistics from".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)).collect();
        Ok(FeatureNorm { mean, std })
    }

    fn normalize<R: Real>(&self, x: ArrayView2<R>) -> Array2<R> {
        let mut out = x.to_owned();
        for mut row in out.outer_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - R::lit(self.mean[k])) / R::lit(self.std[k]);
            }
        }
        out
    }

    fn denormalize<R: Real>(&self, mut y: Array2<R>) -> Array2<R> {
        for mut row in y.outer_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * R::lit(self.std[k]) + R::lit(self.mean[k]);
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub params: ModelParams<R>,
    pub norm: FeatureNorm,
}

impl<R: Real> Model<R> {
    /// The same network with parameters converted to another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model { config: self.config.clone(), params: self.params.cast(), norm: self.norm.clone() }
    }
}

fn ensure_finite<R: Real>(x: ArrayView2<R>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Repeats the last row until the row count is a multiple of `d`.
pub fn replicate_pad<R: Real>(x: ArrayView2<R>, d: usize) -> Array2<R> {
    let t = x.nrows();
    let target = t.div_ceil(d) * d;
    if target == t {
        return x.to_owned();
    }
    let mut out = Array2::zeros((target, x.ncols()));
    out.slice_mut(s![..t, ..]).assign(&x);
    for i in t..target {
        out.row_mut(i).assign(&x.row(t - 1));
    }
    out
}

pub fn global_average_pool<R: Real>(e: ArrayView2<R>) -> Array1<R> {
    e.mean_axis(Axis(0)).expect("at least one frame")
}

/// Tiles pooled embeddings over `n` frames and appends the content code.
pub fn decoder_input<R: Real>(spk: ArrayView1<R>, sty: ArrayView1<R>, z: ArrayView2<R>) -> Array2<R> {
    let n = z.nrows();
    let tile = |v: ArrayView1<R>| v.broadcast((n, v.len())).expect("broadcast").to_owned();
    let (a, b) = (tile(spk), tile(sty));
    concatenate(Axis(1), &[a.view(), b.view(), z.view()]).expect("concat rows agree")
}

pub fn sample_content<R: Real>(q: &ContentPosterior<R>, noise: ArrayView2<R>) -> Array2<R> {
    let mut z = q.mu.clone();
    ndarray::Zip::from(&mut z).and(&q.log_sigma).and(&noise).for_each(|z, &ls, &e| *z += ls.exp() * e);
    z
}

impl<R: Real> Model<R> {
    /// Builds a freshly initialised model; each group draws from its own
    /// seed-derived stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let init = |g: ParamGroup, specs: Vec<ConvSpec>| {
            let mut rng = seed::rng(seed, "init", &[g as u64]);
            ConvStack::init(&specs, &mut rng)
        };
        let chain = |dims: &[usize], kernel: usize| -> Vec<ConvSpec> {
            dims.windows(2).map(|w| ConvSpec::new(w[0], w[1], kernel)).collect()
        };

        let mut utt_dims = vec![c.n_mels];
        utt_dims.extend(std::iter::repeat_n(c.utt_hidden, c.utt_layers - 1));
        utt_dims.push(c.utt_dim);

        let mut emb_dims = vec![c.utt_dim];
        emb_dims.extend(std::iter::repeat_n(c.emb_hidden, c.emb_layers - 1));
        emb_dims.push(c.emb_dim);

        let mut cont = Vec::new();
        let mut width = c.n_mels;
        for &st in &c.cont_strides {
            cont.push(ConvSpec::new(width, c.cont_hidden, c.cont_kernel).stride(st));
            width = c.cont_hidden;
        }
        cont.push(ConvSpec::new(width, 2 * c.content_dim, 1));

        let mut dec = Vec::new();
        let mut width = c.decoder_input_dim();
        for &st in c.cont_strides.iter().rev() {
            dec.push(ConvSpec::new(width, c.dec_hidden, c.dec_kernel).upsample(st));
            width = c.dec_hidden;
        }
        dec.push(ConvSpec::new(width, c.n_mels, 1));

        let params = ModelParams {
            enc_utt: init(ParamGroup::EncUtt, chain(&utt_dims, c.utt_kernel)),
            enc_spk: init(ParamGroup::EncSpk, chain(&emb_dims, c.emb_kernel)),
            enc_sty: init(ParamGroup::EncSty, chain(&emb_dims, c.emb_kernel)),
            enc_cont: init(ParamGroup::EncCont, cont),
            dec: init(ParamGroup::Dec, dec),
            clf_spk: init(ParamGroup::ClfSpk, vec![ConvSpec::new(c.emb_dim, c.n_speakers, 1)]),
            adv_clf_spk: init(ParamGroup::AdvClfSpk, chain(&[c.emb_dim, c.adv_hidden, c.adv_hidden, c.n_speakers], 1)),
            adv_cpc_head: init(
                ParamGroup::AdvCpcHead,
                chain(&[c.content_dim, c.adv_head_dim, c.adv_head_dim], c.adv_head_kernel),
            ),
        };
        let norm = FeatureNorm::identity(config.n_mels);
        Ok(Model { config, params, norm })
    }

    pub fn utterance_encoder(&self, x: ArrayView2<R>) -> Result<Array2<R>> {
        ensure_finite(x, "utterance encoder input")?;
        self.check_width(x, self.config.n_mels)?;
        Ok(self.params.enc_utt.infer(self.norm.normalize(x).view()))
    }

    pub fn speaker_encoder(&self, s: ArrayView2<R>) -> Result<Array2<R>> {
        ensure_finite(s, "speaker encoder input")?;
        self.check_width(s, self.config.utt_dim)?;
        Ok(self.params.enc_spk.infer(s))
    }

    pub fn style_encoder(&self, s: ArrayView2<R>) -> Result<Array2<R>> {
        ensure_finite(s, "style encoder input")?;
        self.check_width(s, self.config.utt_dim)?;
        Ok(self.params.enc_sty.infer(s))
    }

    /// Posterior over `ceil(T / d)` content frames; the input is replicate
    /// padded to a multiple of `d`.
    pub fn content_encoder(&self, x_aug: ArrayView2<R>) -> Result<ContentPosterior<R>> {
        ensure_finite(x_aug, "content encoder input")?;
        self.check_width(x_aug, self.config.n_mels)?;
        let padded = replicate_pad(x_aug, self.config.downsample());
        let out = self.params.enc_cont.infer(padded.view());
        Ok(self.split_posterior(out))
    }

    fn split_posterior(&self, out: Array2<R>) -> ContentPosterior<R> {
        let dz = self.config.content_dim;
        ContentPosterior { mu: out.slice(s![.., ..dz]).to_owned(), log_sigma: out.slice(s![.., dz..]).to_owned() }
    }

    pub fn speaker_classify(&self, e: ArrayView2<R>) -> Result<ClassProbabilities<R>> {
        self.check_classifier(e)?;
        Ok(softmax_rows(self.params.clf_spk.infer(e).view()))
    }

    /// Adversarial classifier behind the reversal layer; the forward pass is
    /// that of a plain classifier.
    pub fn adversarial_speaker_classify(&self, e: ArrayView2<R>) -> Result<ClassProbabilities<R>> {
        self.check_classifier(e)?;
        let reversed = GradientReversal::forward(e);
        Ok(softmax_rows(self.params.adv_clf_spk.infer(reversed.view()).view()))
    }

    /// Bounded projection of the content code behind the reversal layer.
    pub fn adversarial_cpc_head(&self, z: ArrayView2<R>) -> Result<Array2<R>> {
        self.check_width(z, self.config.content_dim)?;
        Ok(self.params.adv_cpc_head.infer(GradientReversal::forward(z).view()).mapv(|v| v.tanh()))
    }

    /// Training forward pass of the adversarial head: `tanh` of the stack.
    pub fn adversarial_head_forward(&self, z: ArrayView2<R>) -> (Array2<R>, StackCache<R>) {
        let (raw, cache) = self.params.adv_cpc_head.forward(z);
        (raw.mapv(|v| v.tanh()), cache)
    }

    /// Back-propagates through [`Model::adversarial_head_forward`]; `proj` is
    /// its output.
    pub fn adversarial_head_backward(
        &self,
        cache: &StackCache<R>,
        proj: ArrayView2<R>,
        d_proj: ArrayView2<R>,
        grad: &mut ConvStack<R>,
        need_dx: bool,
    ) -> Option<Array2<R>> {
        let mut d_raw = d_proj.to_owned();
        ndarray::Zip::from(&mut d_raw).and(proj).for_each(|g, &p| *g *= R::one() - p * p);
        self.params.adv_cpc_head.backward(cache, d_raw.view(), grad, need_dx)
    }

    /// Decodes to `N · d` frames, cropped to `t_out` when given.
    pub fn decode(
        &self,
        spk: ArrayView1<R>,
        sty: ArrayView1<R>,
        z: ArrayView2<R>,
        t_out: Option<usize>,
    ) -> Result<Array2<R>> {
        let c = &self.config;
        if spk.len() != c.emb_dim || sty.len() != c.emb_dim || z.ncols() != c.content_dim {
            return Err(Error::Config(format!(
                "decoder expects {}+{}+{} input dims, got {}+{}+{}",
                c.emb_dim,
                c.emb_dim,
                c.content_dim,
                spk.len(),
                sty.len(),
                z.ncols()
            )));
        }
        let input = decoder_input(spk, sty, z);
        let out = self.params.dec.infer(input.view());
        let t = t_out.unwrap_or(out.nrows()).min(out.nrows());
        Ok(self.norm.denormalize(out.slice(s![..t, ..]).to_owned()))
    }

    fn check_width(&self, x: ArrayView2<R>, width: usize) -> Result<()> {
        if x.ncols() != width {
            return Err(Error::Config(format!("expected {width} input channels, got {}", x.ncols())));
        }
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("sequence has no frames".into()));
        }
        Ok(())
    }

    fn check_classifier(&self, e: ArrayView2<R>) -> Result<()> {
        if self.config.n_speakers == 0 {
            return Err(Error::Config("speaker inventory size is not configured".into()));
        }
        self.check_width(e, self.config.emb_dim)
    }

    /// Training forward pass of one utterance with every intermediate kept
    /// for [`Model::backward`]. `x` and `x_aug` must have `T` rows with `T` a
    /// multiple of `d`; `noise` is `T/d × D_z`.
    pub fn forward(&self, x: ArrayView2<R>, x_aug: ArrayView2<R>, noise: ArrayView2<R>) -> Result<Forward<R>> {
        let d = self.config.downsample();
        let t = x.nrows();
        if !t.is_multiple_of(d) || x_aug.nrows() != t {
            return Err(Error::Parameter(format!("training sequences must share a length divisible by {d}")));
        }
        ensure_finite(x, "input features")?;
        ensure_finite(x_aug, "content-branch input")?;
        self.check_width(x, self.config.n_mels)?;
        self.check_width(x_aug, self.config.n_mels)?;
        let p = &self.params;
        let (s_utt, c_utt) = p.enc_utt.forward(self.norm.normalize(x).view());
        let (s_spk, c_spk) = p.enc_spk.forward(s_utt.view());
        let (s_sty, c_sty) = p.enc_sty.forward(s_utt.view());
        let (cont, c_cont) = p.enc_cont.forward(x_aug);
        let q = self.split_posterior(cont);
        if noise.dim() != q.mu.dim() {
            return Err(Error::Parameter(format!("noise shape {:?} vs posterior {:?}", noise.dim(), q.mu.dim())));
        }
        let z = sample_content(&q, noise);
        let spk_bar = global_average_pool(s_spk.view());
        let sty_bar = global_average_pool(s_sty.view());
        let (dec_out, c_dec) = p.dec.forward(decoder_input(spk_bar.view(), sty_bar.view(), z.view()).view());
        let x_hat = self.norm.denormalize(dec_out);
        let (logits_spk, c_clf) = p.clf_spk.forward(s_spk.view());
        let (logits_adv, c_adv) = p.adv_clf_spk.forward(GradientReversal::forward(s_sty.view()).view());
        let (adv_proj, c_head) = self.adversarial_head_forward(GradientReversal::forward(z.view()).view());
        Ok(Forward {
            s_utt,
            s_spk,
            s_sty,
            posterior: q,
            noise: noise.to_owned(),
            z,
            x_hat,
            logits_spk,
            logits_adv,
            adv_proj,
            caches: Caches {
                utt: c_utt,
                spk: c_spk,
                sty: c_sty,
                cont: c_cont,
                dec: c_dec,
                clf: c_clf,
                adv: c_adv,
                head: c_head,
            },
        })
    }

    /// Back-propagates upstream loss gradients through one utterance and
    /// accumulates parameter gradients for every group into `grads`.
    ///
    /// Gradients arriving from the adversarial heads are negated where they
    /// cross the reversal layers into the style and content encoders.
    pub fn backward(&self, fwd: &Forward<R>, up: &Upstream<R>, grads: &mut ModelParams<R>) {
        let p = &self.params;
        let c = &self.config;
        let ch = &fwd.caches;
        let t = fwd.s_utt.nrows();
        let inv_t = R::one() / R::lit(t as f64);
        let e = c.emb_dim;

        let mut d_out = up.x_hat.clone();
        for mut row in d_out.outer_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v *= R::lit(self.norm.std[k]);
            }
        }
        let d_in = p.dec.backward(&ch.dec, d_out.view(), &mut grads.dec, true).expect("dx");
        let d_spk_bar = d_in.slice(s![.., ..e]).sum_axis(Axis(0));
        let d_sty_bar = d_in.slice(s![.., e..2 * e]).sum_axis(Axis(0));
        let mut d_z = d_in.slice(s![.., 2 * e..]).to_owned();

        let d_head_in = self
            .adversarial_head_backward(&ch.head, fwd.adv_proj.view(), up.adv_proj.view(), &mut grads.adv_cpc_head, true)
            .expect("dx");
        d_z += &GradientReversal::backward(d_head_in.view());

        let mut d_s_spk = p.clf_spk.backward(&ch.clf, up.logits_spk.view(), &mut grads.clf_spk, true).expect("dx");
        d_s_spk += &(&d_spk_bar * inv_t);
        let d_adv_in = p.adv_clf_spk.backward(&ch.adv, up.logits_adv.view(), &mut grads.adv_clf_spk, true).expect("dx");
        let mut d_s_sty = GradientReversal::backward(d_adv_in.view());
        d_s_sty += &(&d_sty_bar * inv_t);

        let mut d_s = p.enc_spk.backward(&ch.spk, d_s_spk.view(), &mut grads.enc_spk, true).expect("dx");
        d_s += &p.enc_sty.backward(&ch.sty, d_s_sty.view(), &mut grads.enc_sty, true).expect("dx");
        if let Some(extra) = &up.s_utt {
            d_s += extra;
        }
        p.enc_utt.backward(&ch.utt, d_s.view(), &mut grads.enc_utt, false);

        let q = &fwd.posterior;
        let mut d_mu = d_z.clone();
        let mut d_ls = d_z;
        ndarray::Zip::from(&mut d_ls).and(&q.log_sigma).and(&fwd.noise).for_each(|g, &ls, &n| *g *= ls.exp() * n);
        if let Some(k) = &up.kld {
            d_mu += &k.0;
            d_ls += &k.1;
        }
        let d_cont = concatenate(Axis(1), &[d_mu.view(), d_ls.view()]).expect("posterior halves");
        p.enc_cont.backward(&ch.cont, d_cont.view(), &mut grads.enc_cont, false);
    }
}

pub struct Caches<R> {
    utt: StackCache<R>,
    spk: StackCache<R>,
    sty: StackCache<R>,
    cont: StackCache<R>,
    dec: StackCache<R>,
    clf: StackCache<R>,
    adv: StackCache<R>,
    head: StackCache<R>,
}

/// Outputs of [`Model::forward`].
pub struct Forward<R> {
    pub s_utt: Array2<R>,
    pub s_spk: Array2<R>,
    pub s_sty: Array2<R>,
    pub posterior: ContentPosterior<R>,
    pub noise: Array2<R>,
    pub z: Array2<R>,
    pub x_hat: Array2<R>,
    pub logits_spk: Array2<R>,
    pub logits_adv: Array2<R>,
    pub adv_proj: Array2<R>,
    caches: Caches<R>,
}

/// Loss gradients with respect to the outputs of [`Model::forward`].
pub struct Upstream<R> {
    pub x_hat: Array2<R>,
    pub logits_spk: Array2<R>,
    pub logits_adv: Array2<R>,
    pub adv_proj: Array2<R>,
    /// Extra gradient on `S` (from the contrastive loss).
    pub s_utt: Option<Array2<R>>,
    /// Gradients on `(mu, log_sigma)` from the KL term.
    pub kld: Option<(Array2<R>, Array2<R>)>,
}

impl<R: Real> Upstream<R> {
    pub fn zeros(fwd: &Forward<R>) -> Self {
        Upstream {
            x_hat: Array2::zeros(fwd.x_hat.dim()),
            logits_spk: Array2::zeros(fwd.logits_spk.dim()),
            logits_adv: Array2::zeros(fwd.logits_adv.dim()),
            adv_proj: Array2::zeros(fwd.adv_proj.dim()),
            s_utt: None,
            kld: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_mels: 6,
            n_speakers: 3,
            utt_layers: 2,
            utt_hidden: 5,
            utt_dim: 4,
            utt_kernel: 3,
            emb_layers: 2,
            emb_hidden: 5,
            emb_dim: 3,
            emb_kernel: 3,
            cont_hidden: 5,
            cont_strides: vec![1, 2],
            cont_kernel: 3,
            content_dim: 2,
            dec_hidden: 5,
            dec_kernel: 3,
            adv_hidden: 4,
            adv_head_dim: 3,
            adv_head_kernel: 3,
        }
    }

    fn desk_shapes() -> ModelConfig {
        ModelConfig {
            n_speakers: 4,
            utt_hidden: 32,
            utt_dim: 32,
            cont_hidden: 32,
            dec_hidden: 32,
            ..Default::default()
        }
    }

    #[test]
    fn shape_contracts() {
        let m = Model::<f32>::new(desk_shapes(), 1).unwrap();
        let x = Array2::<f32>::zeros((80, 80));
        let s = m.utterance_encoder(x.view()).unwrap();
        assert_eq!(s.dim(), (80, 32));
        assert!(s.iter().all(|v| v.is_finite()));
        assert_eq!(m.speaker_encoder(s.view()).unwrap().dim(), (80, 128));
        assert_eq!(m.style_encoder(s.view()).unwrap().dim(), (80, 128));
        assert_eq!(m.content_encoder(x.view()).unwrap().mu.dim(), (20, 64));
        let x79 = Array2::<f32>::zeros((79, 80));
        assert_eq!(m.content_encoder(x79.view()).unwrap().mu.dim(), (20, 64));
        assert_eq!(m.config.decoder_input_dim(), 256 + 64);
        let z = Array2::<f32>::zeros((20, 64));
        let v = Array1::<f32>::zeros(128);
        assert_eq!(m.decode(v.view(), v.view(), z.view(), None).unwrap().dim(), (80, 80));
        assert_eq!(m.adversarial_cpc_head(z.view()).unwrap().dim(), (20, 128));
        assert_eq!(m.config.content_lag(80), 20);
        assert!(m.decode(Array1::zeros(127).view(), v.view(), z.view(), None).is_err());
    }

    #[test]
    fn speaker_and_style_encoders_match_in_size() {
        let m = Model::<f32>::new(desk_shapes(), 2).unwrap();
        assert_eq!(m.params.enc_spk.num_params(), m.params.enc_sty.num_params());
        let specs: Vec<_> = m.params.enc_spk.layers.iter().map(|l| (l.spec.kernel, l.spec.stride)).collect();
        assert_eq!(specs, vec![(5, 1); 3]);
        assert_eq!(m.params.clf_spk.layers.len(), 1);
        assert_eq!(m.params.adv_clf_spk.layers.len(), 3);
        assert_eq!(m.params.adv_clf_spk.layers[0].spec.out_dim, 128);
    }

    #[test]
    fn parameter_groups_partition_the_model() {
        let m = Model::<f32>::new(desk_shapes(), 3).unwrap();
        let by_group: usize = ParamGroup::ALL.iter().map(|&g| m.params.group(g).num_params()).sum();
        assert_eq!(by_group, m.params.num_params());
        let main: std::collections::HashSet<_> = ParamGroup::MAIN.into_iter().collect();
        let adv: std::collections::HashSet<_> = ParamGroup::ADVERSARIAL.into_iter().collect();
        assert!(main.is_disjoint(&adv));
        assert_eq!(main.len() + adv.len(), ParamGroup::ALL.len());
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::parse(g.name()).unwrap(), g);
        }
    }

    #[test]
    fn inference_is_deterministic_and_classifiers_are_on_the_simplex() {
        let m = Model::<f64>::new(tiny_config(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0));
        let a = m.utterance_encoder(x.view()).unwrap();
        assert_eq!(a, m.utterance_encoder(x.view()).unwrap());
        let e = m.speaker_encoder(a.view()).unwrap();
        for p in [m.speaker_classify(e.view()).unwrap(), m.adversarial_speaker_classify(e.view()).unwrap()] {
            for row in p.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        // forward through reversal equals the same network without it
        let plain = softmax_rows(m.params.adv_clf_spk.infer(e.view()).view());
        assert_eq!(plain, m.adversarial_speaker_classify(e.view()).unwrap());
        let nan = Array2::from_elem((4, 6), f64::NAN);
        assert!(matches!(m.utterance_encoder(nan.view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_classifier_weights_give_uniform_rows() {
        let mut m = Model::<f64>::new(tiny_config(), 5).unwrap();
        m.params.clf_spk = m.params.clf_spk.zeros_like();
        let e = Array2::from_elem((3, 3), 0.7);
        let p = m.speaker_classify(e.view()).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let mut unconfigured = m.clone();
        unconfigured.config.n_speakers = 0;
        assert!(matches!(unconfigured.speaker_classify(e.view()), Err(Error::Config(_))));
        assert!(Model::<f64>::new(ModelConfig { n_speakers: 1, ..tiny_config() }, 0).is_err());
    }

    #[test]
    fn sampling_contracts() {
        let mu = ndarray::array![[1.0f64, -2.0], [0.5, 0.0]];
        let q = ContentPosterior { mu: mu.clone(), log_sigma: Array2::from_elem((2, 2), 0.3) };
        assert_eq!(sample_content(&q, Array2::zeros((2, 2)).view()), mu);
        let sharp = ContentPosterior { mu: mu.clone(), log_sigma: Array2::from_elem((2, 2), -80.0) };
        let z = sample_content(&sharp, Array2::from_elem((2, 2), 3.0).view());
        assert!(z.iter().zip(mu.iter()).all(|(a, b)| (a - b).abs() < 1e-30));
    }

    #[test]
    fn pooling_cases() {
        let e = ndarray::array![[1.0, 1.0], [3.0, 3.0]];
        assert_eq!(global_average_pool(e.view()).to_vec(), vec![2.0, 2.0]);
        let one = ndarray::array![[0.25, -4.0]];
        assert_eq!(global_average_pool(one.view()).to_vec(), vec![0.25, -4.0]);
        let constant = Array2::from_elem((9, 3), 1.5);
        assert_eq!(global_average_pool(constant.view()).to_vec(), vec![1.5; 3]);
    }

    #[test]
    fn replicate_padding() {
        let x = ndarray::array![[1.0], [2.0], [3.0]];
        let p = replicate_pad(x.view(), 4);
        assert_eq!(p.column(0).to_vec(), vec![1.0, 2.0, 3.0, 3.0]);
    }
}
