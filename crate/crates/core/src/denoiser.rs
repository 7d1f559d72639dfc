//! Toy text-conditioned pixel-space diffusion model hosting the
//! cross-attention layers, its noise schedule and a deterministic sampler.

use crate::attention::{init_linear, AttentionRecord, AttentionSink, CrossAttentionLayer, GraphBinding, SubjectBinding};
use crate::autodiff::{Graph, Var};
use crate::baselines::{MechanismKind, MechanismParams};
use crate::config::{ModelConfig, ScheduleConfig};
use crate::encoder::{patchify, unpatchify};
use crate::error::{invalid, Error, Result};
use crate::image_io::RgbImage;
use crate::rng::{streams, RandomSource};
use crate::scalar::Scalar;
use crate::synth::{retarget_subject, tokenize, TokenizedPrompt, Vocabulary};
use crate::tensor::Tensor;

/// Linear β schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!("betas must satisfy 0 < {beta_start} ≤ {beta_end} < 1"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Descending timesteps visited by a `steps`-step sampler.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return invalid(format!("sampling steps {steps} outside 1..={t}"));
        }
        Ok((0..steps).rev().map(|i| (i + 1) * t / steps - 1).collect())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_noising<T: Scalar>(x0: &Tensor<T>, t: usize, noise: &Tensor<T>, sched: &DiffusionSchedule) -> Result<Tensor<T>> {
    if t >= sched.len() {
        return invalid(format!("timestep {t} out of range for {} steps", sched.len()));
    }
    if x0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_noising",
            lhs: x0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let a = T::lit(sched.alpha_bars[t].sqrt());
    let b = T::lit((1.0 - sched.alpha_bars[t]).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(&x, &n)| a * x + b * n).collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Tokenized prompt; the embedding lookup happens against a model's table.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptEmbedding {
    pub tokens: TokenizedPrompt,
}

impl PromptEmbedding {
    pub fn from_words<S: AsRef<str>>(vocab: &Vocabulary, words: &[S]) -> Result<Self> {
        Ok(Self {
            tokens: tokenize(vocab, words)?,
        })
    }

    pub fn subject_word_index(&self) -> usize {
        self.tokens.subject_index
    }

    /// Number of real (non-pad) tokens.
    pub fn len(&self) -> usize {
        self.tokens.len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len == 0
    }

    /// Same prompt with the subject word replaced; bindings stay on the
    /// same position.
    pub fn retarget_subject(&self, vocab: &Vocabulary, new_word: &str) -> Result<Self> {
        Ok(Self {
            tokens: retarget_subject(vocab, &self.tokens, new_word)?,
        })
    }

    /// `c`: one table row per token, `PROMPT_LEN × text_dim`.
    pub fn embed<T: Scalar>(&self, model: &ToyDenoiser<T>) -> Result<Tensor<T>> {
        model.token_embedding.select_rows(&self.tokens.ids)
    }
}

/// Self-attention, cross-attention and MLP, each pre-normalized and residual.
#[derive(Clone, Debug)]
pub struct HostBlock<T: Scalar = f64> {
    pub sa_q: Tensor<T>,
    pub sa_k: Tensor<T>,
    pub sa_v: Tensor<T>,
    pub sa_o: Tensor<T>,
    pub ca: CrossAttentionLayer<T>,
    pub ca_o: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> HostBlock<T> {
    fn new(layer_id: usize, c: &ModelConfig, rng: &mut RandomSource) -> Self {
        let d = c.d_model;
        let mut ca = CrossAttentionLayer::new(layer_id, d, c.text_dim, c.d_attn, rng);
        ca.w_q.requires_grad = true;
        ca.w_k.requires_grad = true;
        ca.w_v.requires_grad = true;
        Self {
            sa_q: init_linear(d, d, rng).trainable(),
            sa_k: init_linear(d, d, rng).trainable(),
            sa_v: init_linear(d, d, rng).trainable(),
            sa_o: init_linear(d, d, rng).trainable(),
            ca,
            ca_o: init_linear(c.d_attn, d, rng).trainable(),
            w1: init_linear(d, c.mlp_hidden, rng).trainable(),
            b1: Tensor::zeros(&[1, c.mlp_hidden]).trainable(),
            w2: init_linear(c.mlp_hidden, d, rng).trainable(),
            b2: Tensor::zeros(&[1, d]).trainable(),
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("sa_q", &self.sa_q),
            ("sa_k", &self.sa_k),
            ("sa_v", &self.sa_v),
            ("sa_o", &self.sa_o),
            ("ca_q", &self.ca.w_q),
            ("ca_k", &self.ca.w_k),
            ("ca_v", &self.ca.w_v),
            ("ca_o", &self.ca_o),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("sa_q", &mut self.sa_q),
            ("sa_k", &mut self.sa_k),
            ("sa_v", &mut self.sa_v),
            ("sa_o", &mut self.sa_o),
            ("ca_q", &mut self.ca.w_q),
            ("ca_k", &mut self.ca.w_k),
            ("ca_v", &mut self.ca.w_v),
            ("ca_o", &mut self.ca_o),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Tags attention records with the sampling step before forwarding them.
#[derive(Clone, Debug, Default)]
pub struct CaptureLog<T: Scalar = f64> {
    pub step: usize,
    /// `(step, record)` in emission order.
    pub records: Vec<(usize, AttentionRecord<T>)>,
}

impl<T: Scalar> AttentionSink<T> for CaptureLog<T> {
    fn record(&mut self, record: AttentionRecord<T>) {
        self.records.push((self.step, record));
    }
}

/// Sinusoidal features of a timestep, `1 × dim`.
pub fn timestep_features<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = T::lit((t as f64 * freq).sin());
        out[half + i] = T::lit((t as f64 * freq).cos());
    }
    Tensor::from_vec(&[1, dim], out).expect("length matches")
}

/// The host denoiser plus the parameters of one injection mechanism.
#[derive(Clone, Debug)]
pub struct ToyDenoiser<T: Scalar = f64> {
    pub config: ModelConfig,
    pub patch_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub pos: Tensor<T>,
    pub time_w1: Tensor<T>,
    pub time_b1: Tensor<T>,
    pub time_w2: Tensor<T>,
    pub blocks: Vec<HostBlock<T>>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    pub token_embedding: Tensor<T>,
    pub alpha_bars: Vec<f64>,
    pub mechanism: MechanismParams<T>,
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn new(c: &ModelConfig, sched: &DiffusionSchedule, vocab_size: usize, mechanism: MechanismKind, d_enc: usize) -> Self {
        let mut rng = RandomSource::new(c.seed, streams::INIT);
        let n = (c.image_size / c.patch).pow(2);
        let pd = c.patch * c.patch * 3;
        let d = c.d_model;
        let patch_in = init_linear(pd, d, &mut rng).trainable();
        let pos = Tensor::randn(&[n, d], 0.1, &mut rng).trainable();
        let time_w1 = init_linear(c.time_dim, d, &mut rng).trainable();
        let time_w2 = init_linear(d, d, &mut rng).trainable();
        let blocks = (0..c.blocks).map(|l| HostBlock::new(l, c, &mut rng)).collect();
        let out_w = Tensor::randn(&[d, pd], 0.01, &mut rng).trainable();
        let token_embedding = Tensor::randn(&[vocab_size, c.text_dim], 1.0, &mut rng).trainable();
        // Separate stream so the host draws do not depend on the mechanism.
        let mut mrng = rng.split(streams::INIT + 100);
        let mechanism = MechanismParams::new(mechanism, c.blocks, d_enc, c.d_attn, c.text_dim, &mut mrng);
        Self {
            config: c.clone(),
            patch_in,
            b_in: Tensor::zeros(&[1, d]).trainable(),
            pos,
            time_w1,
            time_b1: Tensor::zeros(&[1, d]).trainable(),
            time_w2,
            blocks,
            out_w,
            out_b: Tensor::zeros(&[1, pd]).trainable(),
            token_embedding,
            alpha_bars: sched.alpha_bars.clone(),
            mechanism,
        }
    }

    pub fn num_cross_attention_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_patches(&self) -> usize {
        self.pos.rows()
    }

    /// Host parameters (everything except the mechanism), with names.
    pub fn host_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_in".into(), &self.patch_in),
            ("b_in".into(), &self.b_in),
            ("pos".into(), &self.pos),
            ("time_w1".into(), &self.time_w1),
            ("time_b1".into(), &self.time_b1),
            ("time_w2".into(), &self.time_w2),
            ("out_w".into(), &self.out_w),
            ("out_b".into(), &self.out_b),
            ("token_embedding".into(), &self.token_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out
    }

    pub fn host_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.all_params_mut().0
    }

    /// Host and mechanism parameters borrowed together.
    pub fn all_params_mut(&mut self) -> (Vec<(String, &mut Tensor<T>)>, Vec<(String, &mut Tensor<T>)>) {
        let mut host: Vec<(String, &mut Tensor<T>)> = vec![
            ("patch_in".into(), &mut self.patch_in),
            ("b_in".into(), &mut self.b_in),
            ("pos".into(), &mut self.pos),
            ("time_w1".into(), &mut self.time_w1),
            ("time_b1".into(), &mut self.time_b1),
            ("time_w2".into(), &mut self.time_w2),
            ("out_w".into(), &mut self.out_w),
            ("out_b".into(), &mut self.out_b),
            ("token_embedding".into(), &mut self.token_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            host.extend(b.params_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        (host, self.mechanism.params_mut())
    }

    /// Predicted noise patches (`n × patch²·3`) for patchified `x_t`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x_patches: Var,
        t: usize,
        prompt: &PromptEmbedding,
        bindings: &[GraphBinding<T>],
        mut sink: Option<&mut dyn AttentionSink<T>>,
    ) -> Result<Var> {
        for b in bindings {
            if b.subject_token_index >= prompt.len() {
                return invalid(format!(
                    "binding token index {} ≥ prompt length {}",
                    b.subject_token_index,
                    prompt.len()
                ));
            }
        }
        if t >= self.alpha_bars.len() {
            return invalid(format!("timestep {t} out of range for {} steps", self.alpha_bars.len()));
        }
        let table = g.param(&self.token_embedding);
        let text = g.select_rows(table, &prompt.tokens.ids)?;

        let w_in = g.param(&self.patch_in);
        let b_in = g.param(&self.b_in);
        let pos = g.param(&self.pos);
        let h = g.matmul(x_patches, w_in)?;
        let h = g.add_row(h, b_in)?;
        let h = g.add(h, pos)?;
        let tf = g.constant(timestep_features(t, self.config.time_dim));
        let tw1 = g.param(&self.time_w1);
        let tb1 = g.param(&self.time_b1);
        let tw2 = g.param(&self.time_w2);
        let te = g.matmul(tf, tw1)?;
        let te = g.add_row(te, tb1)?;
        let te = g.silu(te);
        let te = g.matmul(te, tw2)?;
        let mut h = g.add_row(h, te)?;

        for (l, blk) in self.blocks.iter().enumerate() {
            let hn = g.layer_norm(h)?;
            let q = {
                let w = g.param(&blk.sa_q);
                g.matmul(hn, w)?
            };
            let k = {
                let w = g.param(&blk.sa_k);
                g.matmul(hn, w)?
            };
            let v = {
                let w = g.param(&blk.sa_v);
                g.matmul(hn, w)?
            };
            let logits = crate::attention::attention_logits(g, q, k)?;
            let w = g.softmax_rows(logits)?;
            let a = g.matmul(w, v)?;
            let wo = g.param(&blk.sa_o);
            let a = g.matmul(a, wo)?;
            h = g.add(h, a)?;

            let hn = g.layer_norm(h)?;
            let ca = self
                .mechanism
                .cross_attention_graph(g, l, hn, text, bindings, &blk.ca, sink.as_mut().map(|s| &mut **s as &mut dyn AttentionSink<T>))?;
            let wo = g.param(&blk.ca_o);
            let ca = g.matmul(ca, wo)?;
            h = g.add(h, ca)?;

            let hn = g.layer_norm(h)?;
            let w1 = g.param(&blk.w1);
            let b1 = g.param(&blk.b1);
            let w2 = g.param(&blk.w2);
            let b2 = g.param(&blk.b2);
            let z = g.matmul(hn, w1)?;
            let z = g.add_row(z, b1)?;
            let z = g.silu(z);
            let z = g.matmul(z, w2)?;
            let z = g.add_row(z, b2)?;
            h = g.add(h, z)?;
        }
        let hn = g.layer_norm(h)?;
        let ow = g.param(&self.out_w);
        let ob = g.param(&self.out_b);
        let o = g.matmul(hn, ow)?;
        let o = g.add_row(o, ob)?;
        // Predicted noise is √ᾱ·F + √(1−ᾱ)·x_t: the network output F is a velocity.
        let ab = self.alpha_bars[t];
        let o = g.scale(o, T::lit(ab.sqrt()));
        let xs = g.scale(x_patches, T::lit((1.0 - ab).sqrt()));
        g.add(o, xs)
    }

    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        patchify(image, self.config.patch)
    }

    pub fn unpatchify(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        unpatchify(patches, s, s, 3, self.config.patch)
    }
}

/// Predicted noise for an `H × W × 3` noisy image.
pub fn denoiser_forward<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    prompt: &PromptEmbedding,
    bindings: &[SubjectBinding<T>],
    model: &ToyDenoiser<T>,
) -> Result<Tensor<T>> {
    denoiser_forward_captured(x_t, t, prompt, bindings, model, None)
}

pub fn denoiser_forward_captured<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    prompt: &PromptEmbedding,
    bindings: &[SubjectBinding<T>],
    model: &ToyDenoiser<T>,
    sink: Option<&mut dyn AttentionSink<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(model.patchify(x_t)?);
    let gb: Vec<_> = bindings.iter().map(|b| GraphBinding::from_binding(&mut g, b)).collect();
    let out = model.forward_graph(&mut g, x, t, prompt, &gb, sink)?;
    model.unpatchify(g.value(out))
}

/// Standard-normal initial latent for a sampling seed.
pub fn initial_latent<T: Scalar>(seed: u64, image_size: usize) -> Tensor<T> {
    let mut rng = RandomSource::new(seed, streams::SAMPLING);
    Tensor::randn(&[image_size, image_size, 3], 1.0, &mut rng)
}

/// Deterministic DDIM sampling. Returns the final clean estimate in `[-1, 1]`.
pub fn sample_tensor<T: Scalar>(
    prompt: &PromptEmbedding,
    bindings: &[SubjectBinding<T>],
    steps: usize,
    seed: u64,
    sched: &DiffusionSchedule,
    model: &ToyDenoiser<T>,
    mut capture: Option<&mut CaptureLog<T>>,
) -> Result<Tensor<T>> {
    let ts = sched.sampling_timesteps(steps)?;
    let mut x = initial_latent::<T>(seed, model.config.image_size);
    let mut x0 = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        if let Some(c) = capture.as_deref_mut() {
            c.step = i;
        }
        let sink = capture.as_deref_mut().map(|c| c as &mut dyn AttentionSink<T>);
        let eps = denoiser_forward_captured(&x, t, prompt, bindings, model, sink)?;
        if !eps.is_finite() {
            return Err(Error::NonFinite(format!("denoiser output at sampling step {i} (t={t})")));
        }
        let ab = T::lit(sched.alpha_bars[t]);
        let sa = ab.sqrt();
        let sb = (T::one() - ab).sqrt();
        let one = T::one();
        x0 = Tensor::from_vec(
            x.shape(),
            x.data()
                .iter()
                .zip(eps.data())
                .map(|(&xv, &e)| ((xv - sb * e) / sa).max(-one).min(one))
                .collect(),
        )?;
        if let Some(&t_next) = ts.get(i + 1) {
            let abn = T::lit(sched.alpha_bars[t_next]);
            let (an, bn) = (abn.sqrt(), (T::one() - abn).sqrt());
            // Noise re-derived from the clamped estimate keeps the step consistent.
            x = Tensor::from_vec(
                x.shape(),
                x0.data()
                    .iter()
                    .zip(x.data())
                    .map(|(&p, &xv)| an * p + bn * (xv - sa * p) / sb)
                    .collect(),
            )?;
        }
    }
    Ok(x0)
}

pub fn sample<T: Scalar>(
    prompt: &PromptEmbedding,
    bindings: &[SubjectBinding<T>],
    steps: usize,
    seed: u64,
    sched: &DiffusionSchedule,
    model: &ToyDenoiser<T>,
    capture: Option<&mut CaptureLog<T>>,
) -> Result<RgbImage> {
    let x = sample_tensor(prompt, bindings, steps, seed, sched, model, capture)?;
    let s = model.config.image_size;
    Ok(RgbImage::from_signed_unit(s, s, &x.to_f64_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn test_schedule() -> DiffusionSchedule {
        DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 4,
            d_model: 8,
            d_attn: 6,
            text_dim: 5,
            blocks: 2,
            mlp_hidden: 10,
            time_dim: 4,
            seed: 3,
        }
    }

    fn prompt() -> PromptEmbedding {
        PromptEmbedding::from_words(&Vocabulary::default(), &["subj", "on", "pink", "plain", "left"]).unwrap()
    }

    #[test]
    fn schedule_sanity() {
        let s = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a <= 1.0));
        assert_eq!(s.sampling_timesteps(25).unwrap().len(), 25);
        assert_eq!(s.sampling_timesteps(1).unwrap(), vec![99]);
        assert_eq!(s.sampling_timesteps(100).unwrap(), (0..100).rev().collect::<Vec<_>>());
        assert!(s.sampling_timesteps(101).is_err());
    }

    #[test]
    fn noising_limits() {
        let s = DiffusionSchedule::linear(10, 1e-9, 0.2).unwrap();
        let mut rng = RandomSource::new(0, 0);
        let x0 = Tensor::<f64>::randn(&[4, 4, 3], 1.0, &mut rng);
        let n = Tensor::<f64>::randn(&[4, 4, 3], 1.0, &mut rng);
        assert!(forward_noising(&x0, 0, &n, &s).unwrap().max_abs_diff(&x0) < 1e-4);
        let z = forward_noising(&x0, 5, &Tensor::zeros(&[4, 4, 3]), &s).unwrap();
        let a = s.alpha_bars[5].sqrt();
        assert!(z.data().iter().zip(x0.data()).all(|(p, q)| (p - a * q).abs() < 1e-15));
        assert!(forward_noising(&x0, 10, &n, &s).is_err());
    }

    #[test]
    fn noising_variance() {
        let s = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        let mut rng = RandomSource::new(1, 0);
        let t = 30;
        let x0 = Tensor::<f64>::randn(&[10_000], 0.5, &mut rng);
        let n = Tensor::<f64>::randn(&[10_000], 1.0, &mut rng);
        let xt = forward_noising(&x0, t, &n, &s).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let expect = s.alpha_bars[t] * var(x0.data()) + 1.0 - s.alpha_bars[t];
        assert!((var(xt.data()) / expect - 1.0).abs() < 0.05);
    }

    #[test]
    fn empty_bindings_match_bare_host() {
        let c = small_config();
        let m = ToyDenoiser::<f64>::new(&c, &test_schedule(), 32, MechanismKind::Nested, 4);
        let x = Tensor::<f64>::randn(&[16, 16, 3], 1.0, &mut RandomSource::new(2, 0));
        let a = denoiser_forward(&x, 5, &prompt(), &[], &m).unwrap();
        let b = denoiser_forward(&x, 5, &prompt(), &[], &m).unwrap();
        assert_eq!(a, b);
        // The mechanism's parameters are unused without bindings.
        let mut other = m.clone();
        other.mechanism = MechanismParams::new(MechanismKind::GlobalV, 2, 4, 6, 5, &mut RandomSource::new(9, 9));
        assert_eq!(denoiser_forward(&x, 5, &prompt(), &[], &other).unwrap(), a);
    }

    #[test]
    fn binding_past_prompt_rejected() {
        let c = small_config();
        let m = ToyDenoiser::<f64>::new(&c, &test_schedule(), 32, MechanismKind::Nested, 4);
        let x = Tensor::<f64>::zeros(&[16, 16, 3]);
        let b = SubjectBinding::new(5, Tensor::<f64>::filled(&[2, 4], 1.0));
        assert!(denoiser_forward(&x, 5, &prompt(), &[b], &m).is_err());
    }

    #[test]
    fn loss_gradients_through_full_model() {
        let c = small_config();
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let m = ToyDenoiser::<f64>::new(&ModelConfig { seed, ..c.clone() }, &test_schedule(), 32, MechanismKind::Nested, 4);
            let mut rng = RandomSource::new(seed, 7);
            let x = m.patchify(&Tensor::randn(&[16, 16, 3], 1.0, &mut rng)).unwrap();
            let target = m.patchify(&Tensor::randn(&[16, 16, 3], 1.0, &mut rng)).unwrap();
            let tokens = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
            let p = prompt();
            let err = grad_check(
                |g, tok| {
                    let xv = g.constant(x.clone());
                    let b = GraphBinding {
                        subject_token_index: 0,
                        tokens: tok,
                        lambda: 1.5,
                        alpha: Some(2.0),
                    };
                    let y = m.forward_graph(g, xv, 7, &p, &[b], None)?;
                    g.mse(y, &target)
                },
                &tokens,
                1e-6,
            )
            .unwrap();
            let err_x = grad_check(
                |g, xv| {
                    let y = m.forward_graph(g, xv, 7, &p, &[], None)?;
                    g.mse(y, &target)
                },
                &x,
                1e-6,
            )
            .unwrap();
            worst = worst.max(err).max(err_x);
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = small_config();
        let m = ToyDenoiser::<f64>::new(&c, &test_schedule(), 32, MechanismKind::Nested, 4);
        let s = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let a = sample(&prompt(), &[], 5, 4, &s, &m, None).unwrap();
        let b = sample(&prompt(), &[], 5, 4, &s, &m, None).unwrap();
        assert_eq!(a, b);
        let one = sample_tensor(&prompt(), &[], 1, 4, &s, &m, None).unwrap();
        assert!(one.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        assert_eq!(initial_latent::<f64>(4, 16), initial_latent::<f64>(4, 16));
    }

    #[test]
    fn retarget_keeps_position() {
        let v = Vocabulary::default();
        let p = prompt();
        assert_eq!(p.retarget_subject(&v, "subj").unwrap(), p);
        let q = p.retarget_subject(&v, "pet").unwrap();
        assert_eq!(q.subject_word_index(), 0);
        assert!(p.retarget_subject(&v, "zebra").is_err());
    }

    #[test]
    fn capture_records_every_layer_and_step() {
        let c = small_config();
        let m = ToyDenoiser::<f64>::new(&c, &test_schedule(), 32, MechanismKind::Nested, 4);
        let s = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let b = SubjectBinding::new(0, Tensor::<f64>::randn(&[1, 4], 1.0, &mut RandomSource::new(0, 3)));
        let mut log = CaptureLog::default();
        sample(&prompt(), &[b], 3, 1, &s, &m, Some(&mut log)).unwrap();
        assert_eq!(log.records.len(), 3 * 2);
        for (_, r) in &log.records {
            let nw = &r.nested[0].weights;
            // One encoder token: every nested map is constant 1.
            assert!(nw.data().iter().all(|&w| w == 1.0));
            for i in 0..r.external.rows() {
                assert!((r.external.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
