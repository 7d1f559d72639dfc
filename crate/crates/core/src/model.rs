//! Denoiser, encoder and schedule bundled under one run configuration.

use crate::attention::SubjectBinding;
use crate::baselines::MechanismKind;
use crate::config::{RunConfig, Stage};
use crate::denoiser::{sample, CaptureLog, DiffusionSchedule, PromptEmbedding, ToyDenoiser};
use crate::encoder::{concat_subject_tokens, EncoderOutput, PatchFeatureExtractor, QFormer, SubjectEncoder};
use crate::error::{invalid, Result};
use crate::image_io::RgbImage;
use crate::rng::{streams, RandomSource};
use crate::scalar::Scalar;
use crate::synth::Vocabulary;
use crate::tensor::Tensor;

/// Reference images personalizing one prompt word.
#[derive(Clone, Debug)]
pub struct SubjectRequest {
    pub token_index: usize,
    pub images: Vec<RgbImage>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub config: RunConfig,
    /// Last training stage completed, if any.
    pub trained: Option<Stage>,
    pub denoiser: ToyDenoiser<T>,
    pub encoder: SubjectEncoder<T>,
    pub schedule: DiffusionSchedule,
    pub vocab: Vocabulary,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::default();
        let e = &config.encoder;
        let schedule = DiffusionSchedule::from_config(&config.schedule)?;
        let denoiser = ToyDenoiser::new(&config.model, &schedule, vocab.len(), config.mechanism()?, e.d_enc);
        let extractor = PatchFeatureExtractor::new(config.model.image_size, e.patch, e.d_enc, e.extractor_seed, e.positional_std)?;
        let mut rng = RandomSource::new(config.model.seed, streams::INIT).split(streams::INIT + 200);
        let qformer = QFormer::new(e.queries, e.d_enc, e.layers, e.hidden, &mut rng);
        Ok(Self {
            config: config.clone(),
            trained: None,
            denoiser,
            encoder: SubjectEncoder { extractor, qformer },
            schedule,
            vocab,
        })
    }

    pub fn mechanism(&self) -> MechanismKind {
        self.denoiser.mechanism.kind()
    }

    pub fn alpha(&self) -> Option<T> {
        self.config.train.alpha.value().map(T::lit)
    }

    /// Every parameter with a unique name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(self.denoiser.host_params().into_iter().map(|(n, t)| (format!("host.{n}"), t)));
        out.extend(self.denoiser.mechanism.params().into_iter().map(|(n, t)| (format!("mech.{n}"), t)));
        out.extend(self.encoder.qformer.params().into_iter().map(|(n, t)| (format!("qformer.{n}"), t)));
        out.push(("extractor.embed".into(), &self.encoder.extractor.embed));
        out.push(("extractor.positional".into(), &self.encoder.extractor.positional));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        let (host, mech) = self.denoiser.all_params_mut();
        out.extend(host.into_iter().map(|(n, t)| (format!("host.{n}"), t)));
        out.extend(mech.into_iter().map(|(n, t)| (format!("mech.{n}"), t)));
        out.extend(self.encoder.qformer.params_mut().into_iter().map(|(n, t)| (format!("qformer.{n}"), t)));
        out.push(("extractor.embed".into(), &mut self.encoder.extractor.embed));
        out.push(("extractor.positional".into(), &mut self.encoder.extractor.positional));
        out
    }

    /// Sets `requires_grad` for a stage: host only in A; encoder and
    /// mechanism (plus the host unless frozen) in B. The extractor never
    /// trains.
    pub fn set_trainable(&mut self, stage: Stage) {
        let host = stage == Stage::A || !self.config.train.freeze_host;
        let rest = stage == Stage::B;
        for (name, t) in self.params_mut() {
            t.requires_grad = if name.starts_with("host.") {
                host
            } else if name.starts_with("extractor.") {
                false
            } else {
                rest
            };
        }
    }

    pub fn encode(&self, image: &RgbImage, source: &str) -> Result<EncoderOutput<T>> {
        self.encoder.encode(image, source)
    }

    /// Encodes and concatenates every reference image of a subject.
    pub fn encode_all(&self, images: &[RgbImage]) -> Result<EncoderOutput<T>> {
        if images.is_empty() {
            return invalid("a subject needs at least one reference image");
        }
        let parts = images
            .iter()
            .enumerate()
            .map(|(i, img)| self.encode(img, &format!("ref{i}")))
            .collect::<Result<Vec<_>>>()?;
        concat_subject_tokens(&parts)
    }

    pub fn binding(&self, enc: &EncoderOutput<T>, token_index: usize, lambda: f64) -> SubjectBinding<T> {
        SubjectBinding::new(token_index, enc.tokens.clone())
            .with_lambda(T::lit(lambda))
            .with_alpha(self.alpha())
    }

    pub fn bindings(&self, subjects: &[SubjectRequest], lambda: f64) -> Result<Vec<SubjectBinding<T>>> {
        subjects
            .iter()
            .map(|s| Ok(self.binding(&self.encode_all(&s.images)?, s.token_index, lambda)))
            .collect()
    }

    pub fn generate(
        &self,
        prompt: &PromptEmbedding,
        subjects: &[SubjectRequest],
        lambda: f64,
        seed: u64,
        capture: Option<&mut CaptureLog<T>>,
    ) -> Result<RgbImage> {
        let bindings = self.bindings(subjects, lambda)?;
        self.generate_with(prompt, &bindings, seed, capture)
    }

    pub fn generate_with(
        &self,
        prompt: &PromptEmbedding,
        bindings: &[SubjectBinding<T>],
        seed: u64,
        capture: Option<&mut CaptureLog<T>>,
    ) -> Result<RgbImage> {
        sample(
            prompt,
            bindings,
            self.config.schedule.sample_steps,
            seed,
            &self.schedule,
            &self.denoiser,
            capture,
        )
    }
}
