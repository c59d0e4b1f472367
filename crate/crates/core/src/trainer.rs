//! Optimization recipe with freeze masks: AdamW with decoupled weight decay,
//! cosine learning-rate schedule with linear warmup, global gradient-norm
//! clipping. Only tensors marked trainable ever receive updates; everything
//! else is bit-identical before and after a run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderWeights, PruneSpec};
use crate::error::ModelError;
use crate::lm::{LmWeights, LoraAdapterSet};
use crate::projector::ProjectorWeights;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip_norm() -> f64 {
    1.0
}
fn default_warmup_frac() -> f64 {
    0.05
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<(), String> {
        if self.lr <= 0.0 {
            return Err("lr must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err("warmup_frac must be in [0, 1)".to_string());
        }
        if self.clip_norm <= 0.0 {
            return Err("clip_norm must be positive".to_string());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be >= 1".to_string());
        }
        Ok(())
    }
}

/// Cosine schedule with linear warmup: 0 -> lr over the first
/// ceil(warmup_frac * total) steps, then lr * 0.5 * (1 + cos(pi * progress)).
pub fn lr_at(step: usize, total_steps: usize, recipe: &TrainRecipe) -> Result<f64, ModelError> {
    if total_steps == 0 || step >= total_steps {
        return Err(ModelError::ScheduleRange {
            step,
            total: total_steps,
        });
    }
    let warmup = (recipe.warmup_frac * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(recipe.lr * step as f64 / warmup as f64);
    }
    let remaining = total_steps.saturating_sub(1).saturating_sub(warmup);
    let progress = if remaining == 0 {
        1.0
    } else {
        (step - warmup) as f64 / remaining as f64
    };
    Ok(recipe.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scale all gradients so the global norm is at most `clip_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &[Tensor], clip_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > clip_norm {
        let factor = clip_norm / norm;
        for p in params {
            if let Some(g) = p.grad() {
                p.set_grad(g.iter().map(|x| x * factor).collect());
            }
        }
    }
    norm
}

pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, weight_decay: f64) -> Self {
        assert!(params.iter().all(|p| p.requires_grad()));
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW {
            params,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// One AdamW step from accumulated gradients; decay is decoupled
    /// (applied to the parameter directly, not through the moments).
    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            p.apply_update(|j, x| {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// One (step, lr, loss) record per optimizer step.
#[derive(Debug, Clone)]
pub struct LossTrace {
    pub rows: Vec<(usize, f64, f64)>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for (step, lr, loss) in &self.rows {
            out.push_str(&format!("{step},{lr:.10e},{loss:.10e}\n"));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.2)
    }
}

/// Everything a single ASR training/eval run needs. Encoder and LM stay
/// frozen; projector (and adapters when present) train.
pub struct AsrBundle {
    pub encoder: EncoderWeights,
    pub prune: PruneSpec,
    pub projector: ProjectorWeights,
    pub lm: LmWeights,
    pub lora: Option<LoraAdapterSet>,
}

impl AsrBundle {
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.projector.params();
        if let Some(lora) = &self.lora {
            out.extend(lora.params());
        }
        out
    }

    /// Forward one utterance to its masked cross-entropy loss.
    pub fn utterance_loss(
        &self,
        frames: &Tensor,
        target_tokens: &[usize],
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let enc = self.encoder.encode(frames, self.prune)?;
        self.loss_from_encoded(&enc, target_tokens, train_rng)
    }

    /// Like [`Self::utterance_loss`] but starting from precomputed encoder
    /// output. The encoder is frozen, so training loops can encode each
    /// utterance once and reuse the result across epochs.
    pub fn loss_from_encoded(
        &self,
        enc: &Tensor,
        target_tokens: &[usize],
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let prefix = self.projector.project(enc, train_rng.as_deref_mut())?;
        self.lm
            .asr_loss(&prefix, target_tokens, self.lora.as_ref(), train_rng)
    }
}

/// A training example: feature frames plus target token ids.
pub struct AsrExample {
    pub frames: Tensor,
    pub tokens: Vec<usize>,
}

/// Train the bundle's projector (and adapters) on the corpus. Deterministic
/// given the recipe seed. Aborts with step index on non-finite loss.
pub fn train_asr(
    bundle: &AsrBundle,
    corpus: &[AsrExample],
    recipe: &TrainRecipe,
) -> Result<LossTrace, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let params: Vec<Tensor> = bundle
        .trainable_params()
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let mut opt = AdamW::new(params, recipe.weight_decay);
    let steps_per_epoch = corpus.len().div_ceil(recipe.batch_size);
    let total_steps = steps_per_epoch * recipe.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(recipe.seed, 0x5075));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(recipe.seed, 0xd20b));
    let mut trace = LossTrace { rows: Vec::new() };
    let mut step = 0;
    // The encoder is frozen: encode every utterance once up front and reuse
    // the (detached) outputs across all epochs.
    let encoded: Vec<Tensor> = corpus
        .iter()
        .map(|ex| {
            let enc = bundle.encoder.encode(&ex.frames, bundle.prune)?;
            Ok(Tensor::from_vec(enc.dims().to_vec(), enc.data())?)
        })
        .collect::<Result<_, ModelError>>()?;
    for _epoch in 0..recipe.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(recipe.batch_size) {
            let lr = lr_at(step, total_steps, recipe)?;
            opt.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let ex = &corpus[idx];
                let loss =
                    bundle.loss_from_encoded(&encoded[idx], &ex.tokens, Some(&mut dropout_rng))?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(ModelError::Diverged { step });
                }
                batch_loss += value;
                loss.scale(1.0 / batch.len() as f64).backward()?;
            }
            batch_loss /= batch.len() as f64;
            clip_global_norm(opt.params(), recipe.clip_norm);
            opt.step(lr);
            trace.rows.push((step, lr, batch_loss));
            step += 1;
        }
    }
    Ok(trace)
}

/// Supervised pretraining for the encoder: a throwaway linear head
/// classifies each encoded frame into its character class, and the full
/// stack is trained with cross-entropy on noisy frames. Class identity
/// becomes most linearly accessible at the top of the stack, so top-down
/// truncation of the resulting weights genuinely loses signal. The caller
/// freezes the weights (`frozen_clone`) afterwards; the head is dropped.
pub fn pretrain_encoder(
    encoder: &EncoderWeights,
    examples: &[(Tensor, Vec<usize>)],
    num_classes: usize,
    recipe: &TrainRecipe,
) -> Result<LossTrace, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut head_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(recipe.seed, 0xe4c0));
    let head = crate::layers::Dense::init(
        encoder.config.d_model,
        num_classes,
        true,
        &mut head_rng,
    );
    let mut params: Vec<Tensor> = encoder.params().into_iter().map(|(_, p)| p).collect();
    assert!(
        params.iter().all(|p| p.requires_grad()),
        "pretrain_encoder needs a trainable encoder (init_trainable)"
    );
    params.push(head.w.clone());
    params.push(head.b.clone());
    let mut opt = AdamW::new(params, recipe.weight_decay);
    let full = PruneSpec::full(&encoder.config);
    let steps_per_epoch = examples.len().div_ceil(recipe.batch_size);
    let total_steps = steps_per_epoch * recipe.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(recipe.seed, 0x5075));
    let mut trace = LossTrace { rows: Vec::new() };
    let mut step = 0;
    for _epoch in 0..recipe.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(recipe.batch_size) {
            let lr = lr_at(step, total_steps, recipe)?;
            opt.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (frames, labels) = &examples[idx];
                let logits = head.forward(&encoder.encode(frames, full)?)?;
                let mask = vec![true; labels.len()];
                let loss = logits.cross_entropy(labels, &mask)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(ModelError::Diverged { step });
                }
                batch_loss += value;
                loss.scale(1.0 / batch.len() as f64).backward()?;
            }
            batch_loss /= batch.len() as f64;
            clip_global_norm(opt.params(), recipe.clip_norm);
            opt.step(lr);
            trace.rows.push((step, lr, batch_loss));
            step += 1;
        }
    }
    Ok(trace)
}

/// Row-standardized embeddings of `ids` plus gaussian noise: a text-only
/// stand-in for projector output, which (ending in a LayerNorm) delivers
/// zero-mean, unit-variance rows. Built as a constant, so the copy objective
/// trains the LM to read such prefixes without also dragging the embedding
/// table toward them.
fn pseudo_prefix(
    lm: &LmWeights,
    ids: &[usize],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, ModelError> {
    let d = lm.config.d_model;
    let rows = lm.embed.gather_rows(ids)?.data();
    let noise = Tensor::randn(vec![ids.len(), d], noise_std, rng).data();
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for (c, &v) in row.iter().enumerate() {
            out.push((v - mean) * inv + noise[r * d + c]);
        }
    }
    Ok(Tensor::from_vec(vec![ids.len(), d], out)?)
}

pub fn pretrain_lm(
    lm: &LmWeights,
    texts: &[Vec<usize>],
    recipe: &TrainRecipe,
) -> Result<LossTrace, ModelError> {
    if texts.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let params: Vec<Tensor> = lm.params().into_iter().map(|(_, p)| p).collect();
    let mut opt = AdamW::new(params, recipe.weight_decay);
    let steps_per_epoch = texts.len().div_ceil(recipe.batch_size);
    let total_steps = steps_per_epoch * recipe.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(recipe.seed, 0x5075));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(recipe.seed, 0xad0e));
    let mut trace = LossTrace { rows: Vec::new() };
    let mut step = 0;
    for _epoch in 0..recipe.epochs {
        let mut order: Vec<usize> = (0..texts.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(recipe.batch_size) {
            let lr = lr_at(step, total_steps, recipe)?;
            opt.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let ids = &texts[idx];
                // Plain next-token objective over the text itself.
                let text_loss = lm.text_loss(ids, None)?;
                // Prefix-conditioned objective in the exact ASR layout: the
                // text's own embeddings, row-standardized and lightly
                // perturbed, stand in for a projected speech prefix. Rows are
                // standardized because the projector ends in a LayerNorm, so
                // at ASR time the prefix arrives at exactly this scale.
                let copy_loss = lm.asr_loss(
                    &pseudo_prefix(lm, ids, 0.25, &mut noise_rng)?,
                    ids,
                    None,
                    None,
                )?;
                let loss = text_loss.add(&copy_loss)?.scale(0.5);
                let value = loss.item();
                if !value.is_finite() {
                    return Err(ModelError::Diverged { step });
                }
                batch_loss += value;
                loss.scale(1.0 / batch.len() as f64).backward()?;
            }
            batch_loss /= batch.len() as f64;
            clip_global_norm(opt.params(), recipe.clip_norm);
            opt.step(lr);
            trace.rows.push((step, lr, batch_loss));
            step += 1;
        }
    }
    Ok(trace)
}
