//! Decoder-only character-level LM, pre-trained on text and then frozen for
//! all downstream ASR use. Projected speech embeddings enter as a prefix
//! context; optional LoRA adapters sit on all attention projections
//! (Q, K, V, O) and are the only LM-side trainable tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::layers::{sinusoidal_positions, split_heads_attention, Dense, LayerNormParams};
use crate::tensor::{no_grad, Tensor};

pub const BOS: usize = 0;
pub const EOS: usize = 1;

/// Character-level vocabulary; ids 0 and 1 are reserved for BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(chars: &[char]) -> Self {
        Vocab {
            chars: chars.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn encode_char(&self, c: char) -> Result<usize, ModelError> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| i + 2)
            .ok_or(ModelError::UnknownSymbol(c))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        text.chars().map(|c| self.encode_char(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id >= 2 {
                    self.chars.get(id - 2).copied()
                } else {
                    None
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.max_seq == 0 {
            return Err("num_layers and max_seq must be >= 1".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

pub const ALL_TARGETS: [LoraTarget; 4] = [LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_lora_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<LoraTarget>,
}

fn default_lora_dropout() -> f64 {
    0.1
}

fn default_targets() -> Vec<LoraTarget> {
    ALL_TARGETS.to_vec()
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rank == 0 {
            return Err("LoRA rank must be >= 1".to_string());
        }
        if self.targets.is_empty() {
            return Err("LoRA targets must be non-empty".to_string());
        }
        if !self.scale().is_finite() {
            return Err("LoRA scale alpha/r must be finite".to_string());
        }
        Ok(())
    }
}

/// One low-rank pair. Layout: `down` is [d_in x r], `up` is [r x d_out];
/// `up` starts at zero so a fresh adapter is a no-op.
#[derive(Clone)]
pub struct LoraPair {
    pub down: Tensor,
    pub up: Tensor,
}

impl LoraPair {
    fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        LoraPair {
            down: Tensor::glorot_uniform(d_in, rank, rng).trainable(),
            up: Tensor::zeros(vec![rank, d_out]).trainable(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

/// Adapters for one attention layer, keyed by target matrix.
#[derive(Clone)]
pub struct LayerAdapters {
    pub pairs: Vec<(LoraTarget, LoraPair)>,
}

impl LayerAdapters {
    pub fn get(&self, t: LoraTarget) -> Option<&LoraPair> {
        self.pairs.iter().find(|(x, _)| *x == t).map(|(_, p)| p)
    }
}

#[derive(Clone)]
pub struct LoraAdapterSet {
    pub config: LoraConfig,
    pub layers: Vec<LayerAdapters>,
}

impl LoraAdapterSet {
    pub fn init(lm: &LmConfig, config: &LoraConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = lm.d_model;
        let layers = (0..lm.num_layers)
            .map(|_| LayerAdapters {
                pairs: config
                    .targets
                    .iter()
                    .map(|&t| (t, LoraPair::init(d, d, config.rank, &mut rng)))
                    .collect(),
            })
            .collect();
        LoraAdapterSet {
            config: config.clone(),
            layers,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.pairs.iter())
            .map(|(_, p)| p.num_params())
            .sum()
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, pair) in &layer.pairs {
                out.push((format!("lora.layer{i}.{t:?}.down"), pair.down.clone()));
                out.push((format!("lora.layer{i}.{t:?}.up"), pair.up.clone()));
            }
        }
        out
    }
}

/// Base projection plus additive low-rank path:
/// `x W + scale * (dropout(x) A) B`. With B = 0 this equals the base exactly.
pub fn lora_forward(
    base: &Dense,
    adapter: Option<&LoraPair>,
    scale: f64,
    dropout_p: f64,
    x: &Tensor,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, ModelError> {
    let out = base.forward(x)?;
    let Some(pair) = adapter else {
        return Ok(out);
    };
    let x_in = match train_rng {
        Some(rng) if dropout_p > 0.0 => x.dropout(dropout_p, rng)?,
        _ => x.clone(),
    };
    let delta = x_in.matmul(&pair.down)?.matmul(&pair.up)?.scale(scale);
    Ok(out.add(&delta)?)
}

#[derive(Clone)]
pub struct LmBlock {
    pub ln1: LayerNormParams,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub ln2: LayerNormParams,
    pub ff1: Dense,
    pub ff2: Dense,
}

impl LmBlock {
    fn init(d: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Self {
        LmBlock {
            ln1: LayerNormParams::init(d, trainable),
            wq: Dense::init(d, d, trainable, rng),
            wk: Dense::init(d, d, trainable, rng),
            wv: Dense::init(d, d, trainable, rng),
            wo: Dense::init(d, d, trainable, rng),
            ln2: LayerNormParams::init(d, trainable),
            ff1: Dense::init(d, d * 4, trainable, rng),
            ff2: Dense::init(d * 4, d, trainable, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Tensor,
        heads: usize,
        adapters: Option<&LayerAdapters>,
        scale: f64,
        dropout_p: f64,
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let h = self.ln1.forward(x)?;
        let q = lora_forward(
            &self.wq,
            adapters.and_then(|a| a.get(LoraTarget::Q)),
            scale,
            dropout_p,
            &h,
            train_rng.as_deref_mut(),
        )?;
        let k = lora_forward(
            &self.wk,
            adapters.and_then(|a| a.get(LoraTarget::K)),
            scale,
            dropout_p,
            &h,
            train_rng.as_deref_mut(),
        )?;
        let v = lora_forward(
            &self.wv,
            adapters.and_then(|a| a.get(LoraTarget::V)),
            scale,
            dropout_p,
            &h,
            train_rng.as_deref_mut(),
        )?;
        let attn = split_heads_attention(&q, &k, &v, heads, true)?;
        let o = lora_forward(
            &self.wo,
            adapters.and_then(|a| a.get(LoraTarget::O)),
            scale,
            dropout_p,
            &attn,
            train_rng.as_deref_mut(),
        )?;
        let x = x.add(&o)?;
        let h = self.ln2.forward(&x)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.relu())?;
        Ok(x.add(&ff)?)
    }

    fn map(&self, f: &impl Fn(&Tensor) -> Tensor) -> LmBlock {
        let dense = |d: &Dense| Dense {
            w: f(&d.w),
            b: f(&d.b),
        };
        let ln = |l: &LayerNormParams| LayerNormParams {
            gain: f(&l.gain),
            bias: f(&l.bias),
        };
        LmBlock {
            ln1: ln(&self.ln1),
            wq: dense(&self.wq),
            wk: dense(&self.wk),
            wv: dense(&self.wv),
            wo: dense(&self.wo),
            ln2: ln(&self.ln2),
            ff1: dense(&self.ff1),
            ff2: dense(&self.ff2),
        }
    }

    fn params_into(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.ln1.gain"), self.ln1.gain.clone()));
        out.push((format!("{prefix}.ln1.bias"), self.ln1.bias.clone()));
        for (name, d) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ff1", &self.ff1),
            ("ff2", &self.ff2),
        ] {
            out.push((format!("{prefix}.{name}.w"), d.w.clone()));
            out.push((format!("{prefix}.{name}.b"), d.b.clone()));
        }
        out.push((format!("{prefix}.ln2.gain"), self.ln2.gain.clone()));
        out.push((format!("{prefix}.ln2.bias"), self.ln2.bias.clone()));
    }
}

#[derive(Clone)]
pub struct LmWeights {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub embed: Tensor, // [V x d]
    pub blocks: Vec<LmBlock>,
    pub final_norm: LayerNormParams,
    pub out_proj: Dense, // [d x V]
}

impl LmWeights {
    pub fn init(config: &LmConfig, vocab: &Vocab, trainable: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.size();
        let d = config.d_model;
        let embed = {
            let e = Tensor::randn(vec![v, d], 0.02, &mut rng);
            if trainable {
                e.trainable()
            } else {
                e
            }
        };
        let blocks = (0..config.num_layers)
            .map(|_| LmBlock::init(d, trainable, &mut rng))
            .collect();
        let final_norm = LayerNormParams::init(d, trainable);
        let out_proj = Dense::init(d, v, trainable, &mut rng);
        LmWeights {
            config: config.clone(),
            vocab: vocab.clone(),
            embed,
            blocks,
            final_norm,
            out_proj,
        }
    }

    /// Value-identical copy with every tensor frozen.
    pub fn frozen_clone(&self) -> LmWeights {
        let f = |t: &Tensor| Tensor::from_vec(t.dims().to_vec(), t.data()).unwrap();
        LmWeights {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            embed: f(&self.embed),
            blocks: self.blocks.iter().map(|b| b.map(&f)).collect(),
            final_norm: LayerNormParams {
                gain: f(&self.final_norm.gain),
                bias: f(&self.final_norm.bias),
            },
            out_proj: Dense {
                w: f(&self.out_proj.w),
                b: f(&self.out_proj.b),
            },
        }
    }

    /// Causal transformer over an already-embedded sequence; returns logits
    /// `[T x V]`.
    pub fn forward_embedded(
        &self,
        embeds: &Tensor,
        lora: Option<&LoraAdapterSet>,
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let t = embeds.rows();
        if t > self.config.max_seq {
            return Err(ModelError::SequenceOverflow {
                got: t,
                max: self.config.max_seq,
            });
        }
        let pos = sinusoidal_positions(t, self.config.d_model);
        let mut x = embeds.add(&pos)?;
        let (scale, dropout_p) = match lora {
            Some(set) => (set.config.scale(), set.config.dropout_p),
            None => (0.0, 0.0),
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let adapters = lora.map(|set| &set.layers[i]);
            x = block.forward(
                &x,
                self.config.num_heads,
                adapters,
                scale,
                dropout_p,
                train_rng.as_deref_mut(),
            )?;
        }
        let x = self.final_norm.forward(&x)?;
        Ok(self.out_proj.forward(&x)?)
    }

    /// ASR forward: sequence = speech prefix embeddings, BOS, target
    /// embeddings. Returns full logits; loss must mask out prefix and BOS.
    pub fn forward_asr(
        &self,
        speech_prefix: &Tensor,
        target_tokens: &[usize],
        lora: Option<&LoraAdapterSet>,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let s = speech_prefix.rows();
        if s == 0 {
            return Err(ModelError::TooShortInput { got: 0, need: 1 });
        }
        let bos = self.embed.gather_rows(&[BOS])?;
        let tgt = self.embed.gather_rows(target_tokens)?;
        let seq = Tensor::concat_rows(&[speech_prefix.clone(), bos, tgt])?;
        self.forward_embedded(&seq, lora, train_rng)
    }

    /// Cross-entropy over target positions only: position S+i predicts
    /// target i, and the last target position predicts EOS.
    pub fn asr_loss(
        &self,
        speech_prefix: &Tensor,
        target_tokens: &[usize],
        lora: Option<&LoraAdapterSet>,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let s = speech_prefix.rows();
        let logits = self.forward_asr(speech_prefix, target_tokens, lora, train_rng)?;
        let (targets, mask) = asr_target_layout(s, target_tokens);
        Ok(logits.cross_entropy(&targets, &mask)?)
    }

    /// Text-only next-token loss over `[BOS] chars -> chars [EOS]`.
    pub fn text_loss(
        &self,
        token_ids: &[usize],
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let mut input = vec![BOS];
        input.extend_from_slice(token_ids);
        let embeds = self.embed.gather_rows(&input)?;
        let logits = self.forward_embedded(&embeds, None, train_rng)?;
        let mut targets = token_ids.to_vec();
        targets.push(EOS);
        let mask = vec![true; targets.len()];
        Ok(logits.cross_entropy(&targets, &mask)?)
    }

    /// Total log-likelihood of a text string under the frozen LM.
    pub fn text_log_likelihood(&self, text: &str) -> Result<f64, ModelError> {
        let ids = self.vocab.encode(text)?;
        let n = ids.len() + 1;
        let loss = no_grad(|| self.text_loss(&ids, None))?;
        Ok(-loss.item() * n as f64)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("lm.embed".to_string(), self.embed.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            b.params_into(&format!("lm.block{i}"), &mut out);
        }
        out.push(("lm.final_norm.gain".to_string(), self.final_norm.gain.clone()));
        out.push(("lm.final_norm.bias".to_string(), self.final_norm.bias.clone()));
        out.push(("lm.out_proj.w".to_string(), self.out_proj.w.clone()));
        out.push(("lm.out_proj.b".to_string(), self.out_proj.b.clone()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Target ids and loss mask for the combined `[prefix | BOS | targets]`
/// sequence of length S + 1 + T.
pub fn asr_target_layout(prefix_len: usize, target_tokens: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let total = prefix_len + 1 + target_tokens.len();
    let mut targets = vec![0usize; total];
    let mut mask = vec![false; total];
    for (i, &tok) in target_tokens.iter().enumerate() {
        targets[prefix_len + i] = tok;
        mask[prefix_len + i] = true;
    }
    targets[total - 1] = EOS;
    mask[total - 1] = true;
    (targets, mask)
}
