//! Dual-path time-frequency separator operating on RI spectrograms.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::dsp::{Spectrogram, StftConfig, StftPlan};
use crate::error::{Error, Result};
use crate::prompt::PromptBoundaries;
use crate::scalar::Scalar;

/// Per-head query/key width per frequency bin.
pub const ATTENTION_QK_DIM: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Enrollment enters through the prompted input signal.
    #[default]
    Lext,
    /// Enrollment is pooled into one vector that modulates every block.
    FixedEmbedBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub attention_heads: usize,
    pub hidden_units: usize,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn micro() -> Self {
        Self { embed_dim: 16, num_blocks: 2, attention_heads: 2, hidden_units: 32, variant: ModelVariant::Lext }
    }

    pub fn desk() -> Self {
        Self { embed_dim: 32, num_blocks: 3, attention_heads: 4, hidden_units: 64, variant: ModelVariant::Lext }
    }

    /// Published reference size; far beyond a single-core budget.
    pub fn full_scale() -> Self {
        Self { embed_dim: 128, num_blocks: 4, attention_heads: 4, hidden_units: 200, variant: ModelVariant::Lext }
    }

    pub fn with_variant(self, variant: ModelVariant) -> Self {
        Self { variant, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_units < 4 || self.attention_heads == 0 {
            return Err(Error::config("model dimensions must be positive (hidden_units >= 4)"));
        }
        if self.num_blocks == 0 {
            return Err(Error::config("need at least one block"));
        }
        if self.embed_dim % self.attention_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by attention_heads {}",
                self.embed_dim, self.attention_heads
            )));
        }
        Ok(())
    }

    pub fn is_full_scale(&self) -> bool {
        self.embed_dim >= 128 && self.num_blocks >= 4
    }

    /// Hidden size of each direction of the frequency-path recurrence.
    pub fn freq_hidden(&self) -> usize {
        self.hidden_units / 4
    }

    /// Number of trainable values implied by the layer shapes.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.hidden_units;
        let hf = self.freq_hidden();
        let qk = self.attention_heads * ATTENTION_QK_DIM;
        let encoder = 18 * d + d + 2 * d;
        let gru = 3 * hf * d + 3 * hf * hf + 6 * hf;
        let block = 2 * d
            + 2 * gru
            + 2 * hf * d
            + d
            + 2 * d
            + 3 * d * h
            + h
            + 1
            + h * d
            + d
            + 2 * d
            + 2 * (d * qk + qk)
            + 2 * (d * d + d);
        let decoder = 9 * d * 2 + 2;
        let film = match self.variant {
            ModelVariant::Lext => 0,
            ModelVariant::FixedEmbedBaseline => self.num_blocks * 2 * (d * d + d),
        };
        encoder + self.num_blocks * block + decoder + film
    }
}

/// Trainable separator: configuration, named parameters and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub step_count: u64,
}

/// Row-stochastic attention matrices of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub frames: usize,
    /// `maps[block][head]` is a row-major `frames x frames` matrix.
    pub maps: Vec<Vec<Vec<f64>>>,
    pub ranges: Option<FrameRanges>,
}

/// Frame spans of the prompt segments, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRanges {
    pub enrollment_pre: (usize, usize),
    pub glue1: (usize, usize),
    pub mixture: (usize, usize),
    pub glue2: (usize, usize),
    pub enrollment_post: (usize, usize),
}

impl FrameRanges {
    /// Map sample boundaries to frames with the frame-of-sample rule; the
    /// signal ends map to the first and one-past-last frame.
    pub fn from_boundaries<T: Scalar>(b: &PromptBoundaries, plan: &StftPlan<T>) -> Self {
        let frames = plan.num_frames(b.total());
        let f = |n: usize| match n {
            0 => 0,
            n if n >= b.total() => frames,
            n => plan.frame_of_sample(n).min(frames),
        };
        let (m0, m1) = b.mixture_range();
        let [g1, g2] = b.glue_ranges();
        let [e1, e2] = b.enrollment_ranges();
        Self {
            enrollment_pre: (f(e1.0), f(e1.1)),
            glue1: (f(g1.0), f(g1.1)),
            mixture: (f(m0), f(m1)),
            glue2: (f(g2.0), f(g2.1)),
            enrollment_post: (f(e2.0), f(e2.1)),
        }
    }
}

impl AttentionMaps {
    /// Mean attention mass that mixture-range queries put on enrollment
    /// keys, for `(block, head)`, alongside the uniform baseline
    /// `enrollment_frames / frames`.
    pub fn enrollment_mass(&self, block: usize, head: usize) -> Option<(f64, f64)> {
        let r = self.ranges?;
        let t = self.frames;
        let keys: Vec<usize> = (r.enrollment_pre.0..r.enrollment_pre.1).chain(r.enrollment_post.0..r.enrollment_post.1).collect();
        if keys.is_empty() || r.mixture.1 <= r.mixture.0 {
            return None;
        }
        let m = &self.maps[block][head];
        let queries = r.mixture.0..r.mixture.1;
        let n = queries.len() as f64;
        let mass = queries.map(|q| keys.iter().map(|&k| m[q * t + k]).sum::<f64>()).sum::<f64>() / n;
        Some((mass, keys.len() as f64 / t as f64))
    }
}

struct Binder<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Binder<'_, T> {
    fn p(&self, name: &str) -> Var {
        let slot = self.params.slot_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[slot]
    }
}

/// Variables produced by one graph forward pass.
pub struct ForwardVars {
    /// Output spectrogram `[frames, bins, 2]`.
    pub output: Var,
    /// Attention nodes, one per block.
    pub attention: Vec<Var>,
}

fn add_layer_norm<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize) {
    ps.add_const(format!("{name}.g"), vec![d], 1.0);
    ps.add_const(format!("{name}.b"), vec![d], 0.0);
}

fn add_linear<T: Scalar>(ps: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) {
    ps.add_normal(format!("{name}.w"), vec![inp, out], 1.0 / (inp as f64).sqrt(), rng);
    ps.add_const(format!("{name}.b"), vec![out], 0.0);
}

fn add_gru<T: Scalar>(ps: &mut ParamStore<T>, name: &str, inp: usize, h: usize, rng: &mut ChaCha8Rng) {
    let std = 1.0 / (h as f64).sqrt();
    ps.add_normal(format!("{name}.w_ih"), vec![inp, 3 * h], 1.0 / (inp as f64).sqrt(), rng);
    ps.add_normal(format!("{name}.w_hh"), vec![h, 3 * h], std, rng);
    ps.add_const(format!("{name}.b_ih"), vec![3 * h], 0.0);
    ps.add_const(format!("{name}.b_hh"), vec![3 * h], 0.0);
}

/// Deterministic initialization for `(cfg, seed)`.
pub fn init_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<SeparatorModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let hf = cfg.freq_hidden();
    let qk = cfg.attention_heads * ATTENTION_QK_DIM;
    let mut ps = ParamStore::new();
    add_linear(&mut ps, "enc", 18, d, &mut rng);
    add_layer_norm(&mut ps, "enc.ln", d);
    for b in 0..cfg.num_blocks {
        let n = |s: &str| format!("blk{b}.{s}");
        add_layer_norm(&mut ps, &n("freq.ln"), d);
        add_gru(&mut ps, &n("freq.fwd"), d, hf, &mut rng);
        add_gru(&mut ps, &n("freq.bwd"), d, hf, &mut rng);
        add_linear(&mut ps, &n("freq.proj"), 2 * hf, d, &mut rng);
        add_layer_norm(&mut ps, &n("time.ln"), d);
        add_linear(&mut ps, &n("time.fc1"), 3 * d, cfg.hidden_units, &mut rng);
        ps.add_const(n("time.alpha"), vec![1], 0.25);
        add_linear(&mut ps, &n("time.fc2"), cfg.hidden_units, d, &mut rng);
        add_layer_norm(&mut ps, &n("att.ln"), d);
        add_linear(&mut ps, &n("att.q"), d, qk, &mut rng);
        add_linear(&mut ps, &n("att.k"), d, qk, &mut rng);
        add_linear(&mut ps, &n("att.v"), d, d, &mut rng);
        add_linear(&mut ps, &n("att.out"), d, d, &mut rng);
        if cfg.variant == ModelVariant::FixedEmbedBaseline {
            add_linear(&mut ps, &n("film.gamma"), d, d, &mut rng);
            add_linear(&mut ps, &n("film.beta"), d, d, &mut rng);
        }
    }
    add_linear(&mut ps, "dec", 9 * d, 2, &mut rng);
    debug_assert_eq!(ps.num_values(), cfg.param_count());
    Ok(SeparatorModel { config: cfg, params: ps, step_count: 0 })
}

impl<T: Scalar> SeparatorModel<T> {
    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    fn bind<'a>(&'a self, g: &mut Graph<T>) -> Binder<'a, T> {
        let vars = (0..self.params.len()).map(|i| g.param(i, self.params.get(i))).collect();
        Binder { params: &self.params, vars }
    }

    /// 3x3 neighbourhood over (time, frequency) of `[T, F, C]`, giving
    /// `[T, F, 9C]`.
    fn unfold_tf(g: &mut Graph<T>, x: Var) -> Var {
        let u = g.unfold(x, 1, 3);
        g.unfold(u, 0, 3)
    }

    fn encode(&self, g: &mut Graph<T>, p: &Binder<T>, ri: Var) -> Var {
        let u = Self::unfold_tf(g, ri);
        let x = g.linear(u, p.p("enc.w"), Some(p.p("enc.b")));
        g.layer_norm(x, p.p("enc.ln.g"), p.p("enc.ln.b"))
    }

    fn block(&self, g: &mut Graph<T>, p: &Binder<T>, b: usize, x: Var) -> (Var, Var) {
        let cfg = &self.config;
        let n = |s: &str| format!("blk{b}.{s}");

        // frequency path: bidirectional recurrence across bins of each frame
        let z = g.layer_norm(x, p.p(&n("freq.ln.g")), p.p(&n("freq.ln.b")));
        let fw = g.gru(z, p.p(&n("freq.fwd.w_ih")), p.p(&n("freq.fwd.w_hh")), p.p(&n("freq.fwd.b_ih")), p.p(&n("freq.fwd.b_hh")), false);
        let bw = g.gru(z, p.p(&n("freq.bwd.w_ih")), p.p(&n("freq.bwd.w_hh")), p.p(&n("freq.bwd.b_ih")), p.p(&n("freq.bwd.b_hh")), true);
        let c = g.concat(fw, bw);
        let y = g.linear(c, p.p(&n("freq.proj.w")), Some(p.p(&n("freq.proj.b"))));
        let x = g.add(x, y);

        // time path: local context along frames of each bin
        let z = g.layer_norm(x, p.p(&n("time.ln.g")), p.p(&n("time.ln.b")));
        let z = g.unfold(z, 0, 3);
        let z = g.linear(z, p.p(&n("time.fc1.w")), Some(p.p(&n("time.fc1.b"))));
        let z = g.prelu(z, p.p(&n("time.alpha")));
        let z = g.linear(z, p.p(&n("time.fc2.w")), Some(p.p(&n("time.fc2.b"))));
        let x = g.add(x, z);

        // full-band self-attention over all frames, no positional encoding
        let heads = cfg.attention_heads;
        let z = g.layer_norm(x, p.p(&n("att.ln.g")), p.p(&n("att.ln.b")));
        let q = g.linear(z, p.p(&n("att.q.w")), Some(p.p(&n("att.q.b"))));
        let k = g.linear(z, p.p(&n("att.k.w")), Some(p.p(&n("att.k.b"))));
        let v = g.linear(z, p.p(&n("att.v.w")), Some(p.p(&n("att.v.b"))));
        let a = g.attention(q, k, v, heads);
        let o = g.linear(a, p.p(&n("att.out.w")), Some(p.p(&n("att.out.b"))));
        (g.add(x, o), a)
    }

    fn decode(&self, g: &mut Graph<T>, p: &Binder<T>, x: Var) -> Var {
        let u = Self::unfold_tf(g, x);
        g.linear(u, p.p("dec.w"), Some(p.p("dec.b")))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[2] != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::shape(format!("expected [frames, bins, 2], got {shape:?}")));
        }
        Ok(())
    }

    /// Build the prompted-input forward pass on `g`; `ri` is `[T, F, 2]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, ri: Var) -> Result<ForwardVars> {
        if self.config.variant != ModelVariant::Lext {
            return Err(Error::config("forward needs the prompted variant; use forward_fixed_embed"));
        }
        self.check_input(g.shape(ri))?;
        let p = self.bind(g);
        let mut x = self.encode(g, &p, ri);
        let mut attention = Vec::with_capacity(self.config.num_blocks);
        for b in 0..self.config.num_blocks {
            let (y, a) = self.block(g, &p, b, x);
            x = y;
            attention.push(a);
        }
        Ok(ForwardVars { output: self.decode(g, &p, x), attention })
    }

    /// Baseline forward pass: the enrollment is encoded by the encoder and
    /// first block, averaged over time and frequency, and turned into a
    /// per-block affine modulation of the mixture features.
    pub fn forward_fixed_embed_graph(&self, g: &mut Graph<T>, mix_ri: Var, enroll_ri: Var) -> Result<ForwardVars> {
        if self.config.variant != ModelVariant::FixedEmbedBaseline {
            return Err(Error::config("forward_fixed_embed needs the fixed-embedding variant"));
        }
        self.check_input(g.shape(mix_ri))?;
        self.check_input(g.shape(enroll_ri))?;
        let p = self.bind(g);
        let e = self.encode(g, &p, enroll_ri);
        let (e, _) = self.block(g, &p, 0, e);
        let d = self.config.embed_dim;
        let emb = g.mean_rows(e);
        let emb = g.reshape(emb, vec![1, d]);
        let mut x = self.encode(g, &p, mix_ri);
        let mut attention = Vec::with_capacity(self.config.num_blocks);
        for b in 0..self.config.num_blocks {
            let gamma = g.linear(emb, p.p(&format!("blk{b}.film.gamma.w")), Some(p.p(&format!("blk{b}.film.gamma.b"))));
            let beta = g.linear(emb, p.p(&format!("blk{b}.film.beta.w")), Some(p.p(&format!("blk{b}.film.beta.b"))));
            let gamma = g.reshape(gamma, vec![d]);
            let beta = g.reshape(beta, vec![d]);
            let xm = g.film(x, gamma, beta);
            let (y, a) = self.block(g, &p, b, xm);
            x = y;
            attention.push(a);
        }
        Ok(ForwardVars { output: self.decode(g, &p, x), attention })
    }
}

fn spec_input<T: Scalar>(g: &mut Graph<T>, spec: &Spectrogram<T>) -> Var {
    g.input(Tensor::new(vec![spec.frames, spec.bins, 2], spec.to_interleaved()))
}

fn to_spec<T: Scalar>(g: &Graph<T>, v: Var, like: &Spectrogram<T>) -> Result<Spectrogram<T>> {
    Spectrogram::from_interleaved(&g.value(v).data, like.frames, &like.config())
}

/// Output spectrogram for a prompted input spectrogram.
pub fn forward<T: Scalar>(m: &SeparatorModel<T>, in_spec: &Spectrogram<T>) -> Result<Spectrogram<T>> {
    let mut g = Graph::new();
    let x = spec_input(&mut g, in_spec);
    let fv = m.forward_graph(&mut g, x)?;
    to_spec(&g, fv.output, in_spec)
}

/// Output spectrogram of the fixed-embedding baseline.
pub fn forward_fixed_embed<T: Scalar>(
    m: &SeparatorModel<T>,
    mix_spec: &Spectrogram<T>,
    enroll_spec: &Spectrogram<T>,
) -> Result<Spectrogram<T>> {
    let mut g = Graph::new();
    let x = spec_input(&mut g, mix_spec);
    let e = spec_input(&mut g, enroll_spec);
    let fv = m.forward_fixed_embed_graph(&mut g, x, e)?;
    to_spec(&g, fv.output, mix_spec)
}

/// All `blocks x heads` attention maps of a forward pass, annotated with
/// the prompt's frame ranges when `boundaries` is given.
pub fn attention_maps<T: Scalar>(
    m: &SeparatorModel<T>,
    in_spec: &Spectrogram<T>,
    boundaries: Option<&PromptBoundaries>,
) -> Result<AttentionMaps> {
    let mut g = Graph::new();
    let x = spec_input(&mut g, in_spec);
    let fv = m.forward_graph(&mut g, x)?;
    let t = in_spec.frames;
    let maps = fv
        .attention
        .iter()
        .map(|&a| {
            let (probs, heads) = g.attention_probs(a).expect("attention node");
            (0..heads).map(|h| probs[h * t * t..(h + 1) * t * t].iter().map(|v| v.as_f64()).collect()).collect()
        })
        .collect();
    let ranges = match boundaries {
        Some(b) => {
            let plan = StftPlan::<T>::new(in_spec.config())?;
            if plan.num_frames(b.total()) != t {
                return Err(Error::shape(format!("boundaries span {} frames, spectrogram has {t}", plan.num_frames(b.total()))));
            }
            Some(FrameRanges::from_boundaries(b, &plan))
        }
        None => None,
    };
    Ok(AttentionMaps { frames: t, maps, ranges })
}

/// STFT settings used by every model.
pub fn stft_config() -> StftConfig {
    StftConfig::default()
}
