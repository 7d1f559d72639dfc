//! Denoising training loop, optimizers and loss records.

use std::collections::BTreeMap;

use crate::attention::GraphBinding;
use crate::autodiff::Graph;
use crate::config::{LossKind, OptimizerKind, RunConfig, Stage, TrainConfig};
use crate::denoiser::{forward_noising, PromptEmbedding};
use crate::encoder::image_tensor;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::rng::{streams, RandomSource};
use crate::scalar::Scalar;
use crate::synth::SyntheticSample;
use crate::tensor::Tensor;

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Momentum SGD or Adam, both after global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar = f64> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    steps: i32,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, clip: f64) -> Self {
        Self {
            kind,
            lr,
            momentum,
            clip,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.optimizer, c.lr, c.momentum, c.clip)
    }

    /// Applies accumulated gradients (divided by `batch`) and clears them.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<T>)>, batch: usize) -> f64 {
        let inv = 1.0 / batch as f64;
        let mut sq = 0.0;
        for (_, t) in &params {
            if let Some(g) = &t.grad {
                sq += g.iter().map(|v| (v.as_f64() * inv).powi(2)).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.steps += 1;
        let (lr, mu, gs) = (T::lit(self.lr), T::lit(self.momentum), T::lit(inv * scale));
        let b2 = T::lit(ADAM_BETA2);
        let c1 = T::lit(1.0 - self.momentum.powi(self.steps));
        let c2 = T::lit(1.0 - ADAM_BETA2.powi(self.steps));
        let eps = T::lit(ADAM_EPS);
        let one = T::one();
        for (name, t) in params {
            let Some(g) = t.grad.take() else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((p, m), gv) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = mu * *m + gs * gv;
                        *p -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(name).or_insert_with(|| vec![T::zero(); g.len()]);
                    for (((p, m), v), gv) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        let gv = gs * gv;
                        *m = mu * *m + (one - mu) * gv;
                        *v = b2 * *v + (one - b2) * gv * gv;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}

/// A training set with encoder features of every input image precomputed
/// (the extractor is frozen).
pub struct TrainingSet<T: Scalar = f64> {
    pub samples: Vec<SyntheticSample>,
    pub features: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
    pub prompts: Vec<PromptEmbedding>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(samples: Vec<SyntheticSample>, model: &Model<T>) -> Result<Self> {
        let features = samples
            .iter()
            .map(|s| model.encoder.extractor.extract_features(&s.input_image))
            .collect::<Result<Vec<_>>>()?;
        let targets = samples.iter().map(|s| image_tensor(&s.target_image)).collect();
        let prompts = samples
            .iter()
            .map(|s| PromptEmbedding {
                tokens: s.tokens.clone(),
            })
            .collect();
        Ok(Self {
            samples,
            features,
            targets,
            prompts,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loss of one sample at timestep `t` with the given noise; accumulates
/// parameter gradients into `model` when `backward` is set.
pub fn sample_loss<T: Scalar>(
    model: &mut Model<T>,
    data: &TrainingSet<T>,
    index: usize,
    t: usize,
    noise: &Tensor<T>,
    stage: Stage,
    backward: bool,
) -> Result<f64> {
    let x_t = forward_noising(&data.targets[index], t, noise, &model.schedule)?;
    let (loss, grads) = {
        let m = &*model;
        let mut g = Graph::new();
        let x = g.constant(m.denoiser.patchify(&x_t)?);
        let bindings = match stage {
            Stage::A => Vec::new(),
            Stage::B => {
                let tokens = m.encoder.encode_graph(&mut g, &data.features[index])?;
                let lambda = T::one();
                vec![GraphBinding {
                    subject_token_index: data.prompts[index].subject_word_index(),
                    tokens,
                    lambda,
                    alpha: m.alpha(),
                }]
            }
        };
        let pred = m.denoiser.forward_graph(&mut g, x, t, &data.prompts[index], &bindings, None)?;
        let target = m.denoiser.patchify(noise)?;
        let loss = g.mse(pred, &target)?;
        let loss = match m.config.train.loss {
            LossKind::Noise => loss,
            // Noise error over ᾱ_t equals the error in v = √ᾱ·ε − √(1−ᾱ)·x0.
            LossKind::Velocity => g.scale(loss, T::lit(1.0 / m.schedule.alpha_bars[t])),
        };
        let lv = g.value(loss).data()[0].as_f64();
        let mut grads = Vec::new();
        if backward && lv.is_finite() {
            g.backward(loss)?;
            for (name, p) in m.params() {
                if !p.requires_grad {
                    continue;
                }
                if let Some(gr) = g.param_var(p).and_then(|v| g.grad(v)) {
                    grads.push((name, gr.to_vec()));
                }
            }
        }
        (lv, grads)
    };
    if backward && !grads.is_empty() {
        let mut by_name: BTreeMap<String, Vec<T>> = grads.into_iter().collect();
        for (name, p) in model.params_mut() {
            if let Some(g) = by_name.remove(&name) {
                p.accumulate_grad(&g);
            }
        }
    }
    Ok(loss)
}

/// One optimizer step on a batch; returns the mean loss.
pub fn training_step<T: Scalar>(
    model: &mut Model<T>,
    data: &TrainingSet<T>,
    batch: &[usize],
    optimizer: &mut Optimizer<T>,
    rng: &mut RandomSource,
    stage: Stage,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let steps = model.schedule.len();
    let size = model.config.model.image_size;
    let mut total = 0.0;
    for &i in batch {
        let t = rng.below(steps);
        let noise = Tensor::randn(&[size, size, 3], 1.0, rng);
        let l = sample_loss(model, data, i, t, &noise, stage, true)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {step}, sample {i}, timestep {t}, stage {stage:?}"
            )));
        }
        total += l;
    }
    if optimizer.lr > 0.0 {
        optimizer.step(model.params_mut(), batch.len());
    } else {
        for (_, p) in model.params_mut() {
            p.grad = None;
        }
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Runs `steps` optimizer steps of `stage`. Batches are drawn from the
/// training stream of `seed`; `progress` sees every record.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &TrainingSet<T>,
    stage: Stage,
    steps: usize,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if stage == Stage::B && model.trained.is_none() {
        return invalid("stage B needs a stage-A host");
    }
    model.set_trainable(stage);
    let c = &model.config.train;
    let mut opt = Optimizer::from_config(c);
    let batch_size = c.batch.min(data.len());
    let stream = match stage {
        Stage::A => streams::TRAIN,
        Stage::B => streams::TRAIN + 100,
    };
    let mut rng = RandomSource::new(c.seed, stream);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        if opt.lr > 0.0 {
            opt.lr = model.config.train.lr_schedule.rate(model.config.train.lr, step, steps);
        }
        let loss = training_step(model, data, &batch, &mut opt, &mut rng, stage, step)?;
        let rec = LossRecord { step, loss };
        progress(&rec);
        log.push(rec);
    }
    model.trained = Some(stage);
    model.config.train.stage = stage;
    Ok(log)
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,loss\n");
    for r in records {
        s.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    s
}

/// A fresh model for `config` carrying the host weights of a stage-A model.
/// Host shapes must match; mechanism, encoder and α come from `config`.
pub fn personalize_from_host<T: Scalar>(config: &RunConfig, host: &Model<T>) -> Result<Model<T>> {
    if host.trained != Some(Stage::A) {
        return invalid("stage B needs a stage-A host checkpoint");
    }
    let mut model = Model::new(config)?;
    let src: BTreeMap<String, &Tensor<T>> = host.denoiser.host_params().into_iter().collect();
    for (name, t) in model.denoiser.host_params_mut() {
        let Some(s) = src.get(&name) else {
            return invalid(format!("host checkpoint lacks {name}"));
        };
        if s.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "personalize_from_host",
                lhs: s.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(s.data());
    }
    model.trained = Some(Stage::A);
    Ok(model)
}
