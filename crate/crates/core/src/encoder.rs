//! Transformer speech encoder over synthetic feature frames, supporting
//! top-down layer pruning by truncation: a k-layer pruned encoder runs the
//! first k blocks (bottom-up order) of the full stack and then the shared
//! final layer norm. Encoder weights are frozen from construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::layers::{sinusoidal_positions, split_heads_attention, Dense, LayerNormParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_feature_dim() -> usize {
    80
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_layers == 0 {
            return Err("num_layers must be >= 1".to_string());
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub keep_layers: usize,
}

impl PruneSpec {
    pub fn full(config: &EncoderConfig) -> Self {
        PruneSpec {
            keep_layers: config.num_layers,
        }
    }
}

#[derive(Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNormParams,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub ln2: LayerNormParams,
    pub ff1: Dense,
    pub ff2: Dense,
}

impl EncoderBlock {
    fn init(d: usize, ffn_mult: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlock {
            ln1: LayerNormParams::init(d, trainable),
            wq: Dense::init(d, d, trainable, rng),
            wk: Dense::init(d, d, trainable, rng),
            wv: Dense::init(d, d, trainable, rng),
            wo: Dense::init(d, d, trainable, rng),
            ln2: LayerNormParams::init(d, trainable),
            ff1: Dense::init(d, d * ffn_mult, trainable, rng),
            ff2: Dense::init(d * ffn_mult, d, trainable, rng),
        }
    }

    fn map(&self, f: &impl Fn(&Tensor) -> Tensor) -> EncoderBlock {
        EncoderBlock {
            ln1: LayerNormParams { gain: f(&self.ln1.gain), bias: f(&self.ln1.bias) },
            wq: Dense { w: f(&self.wq.w), b: f(&self.wq.b) },
            wk: Dense { w: f(&self.wk.w), b: f(&self.wk.b) },
            wv: Dense { w: f(&self.wv.w), b: f(&self.wv.b) },
            wo: Dense { w: f(&self.wo.w), b: f(&self.wo.b) },
            ln2: LayerNormParams { gain: f(&self.ln2.gain), bias: f(&self.ln2.bias) },
            ff1: Dense { w: f(&self.ff1.w), b: f(&self.ff1.b) },
            ff2: Dense { w: f(&self.ff2.w), b: f(&self.ff2.b) },
        }
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor, ModelError> {
        // Pre-norm residual block.
        let h = self.ln1.forward(x)?;
        let q = self.wq.forward(&h)?;
        let k = self.wk.forward(&h)?;
        let v = self.wv.forward(&h)?;
        let attn = split_heads_attention(&q, &k, &v, heads, false)?;
        let x = x.add(&self.wo.forward(&attn)?)?;
        let h = self.ln2.forward(&x)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.relu())?;
        Ok(x.add(&ff)?)
    }

    pub fn num_params(&self) -> usize {
        self.wq.num_params()
            + self.wk.num_params()
            + self.wv.num_params()
            + self.wo.num_params()
            + self.ff1.num_params()
            + self.ff2.num_params()
            + self.ln1.gain.len() * 2
            + self.ln2.gain.len() * 2
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
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub input_proj: Dense,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNormParams,
}

impl EncoderWeights {
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        Self::init_with(config, seed, false)
    }

    /// Trainable variant for the denoising pretraining pass; freeze with
    /// [`EncoderWeights::frozen_clone`] before any downstream use.
    pub fn init_trainable(config: &EncoderConfig, seed: u64) -> Self {
        Self::init_with(config, seed, true)
    }

    fn init_with(config: &EncoderConfig, seed: u64, trainable: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_proj = Dense::init(config.feature_dim, config.d_model, trainable, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| EncoderBlock::init(config.d_model, config.ffn_mult, trainable, &mut rng))
            .collect();
        let final_norm = LayerNormParams::init(config.d_model, trainable);
        EncoderWeights {
            config: config.clone(),
            input_proj,
            blocks,
            final_norm,
        }
    }

    /// Value-identical copy with every tensor frozen (no gradients).
    pub fn frozen_clone(&self) -> EncoderWeights {
        let f = |t: &Tensor| Tensor::from_vec(t.dims().to_vec(), t.data()).unwrap();
        EncoderWeights {
            config: self.config.clone(),
            input_proj: Dense { w: f(&self.input_proj.w), b: f(&self.input_proj.b) },
            blocks: self.blocks.iter().map(|b| b.map(&f)).collect(),
            final_norm: LayerNormParams {
                gain: f(&self.final_norm.gain),
                bias: f(&self.final_norm.bias),
            },
        }
    }

    fn check_prune(&self, prune: PruneSpec) -> Result<(), ModelError> {
        if prune.keep_layers == 0 || prune.keep_layers > self.blocks.len() {
            return Err(ModelError::PruneOutOfRange {
                keep: prune.keep_layers,
                total: self.blocks.len(),
            });
        }
        Ok(())
    }

    /// Input projection, position encoding, the first `keep_layers` blocks,
    /// then the shared final layer norm. Output length equals input length.
    pub fn encode(&self, frames: &Tensor, prune: PruneSpec) -> Result<Tensor, ModelError> {
        self.check_prune(prune)?;
        let states = self.forward_states(frames, prune.keep_layers)?;
        Ok(self.final_norm.forward(states.last().unwrap())?)
    }

    /// Per-block hidden states (pre-final-norm); `states[k]` is the output of
    /// block k, `states[0]` the projected input. Used by the truncation
    /// equivalence oracle.
    pub fn forward_states(&self, frames: &Tensor, upto: usize) -> Result<Vec<Tensor>, ModelError> {
        let t = frames.rows();
        if t == 0 {
            return Err(ModelError::TooShortInput { got: 0, need: 1 });
        }
        let pos = sinusoidal_positions(t, self.config.d_model);
        let mut x = self.input_proj.forward(frames)?.add(&pos)?;
        let mut states = Vec::with_capacity(upto + 1);
        states.push(x.clone());
        for block in &self.blocks[..upto] {
            x = block.forward(&x, self.config.num_heads)?;
            states.push(x.clone());
        }
        Ok(states)
    }

    /// Standalone weight set holding only the retained blocks; tensors are
    /// shared with the original (all frozen).
    pub fn build_pruned_weights(&self, prune: PruneSpec) -> Result<EncoderWeights, ModelError> {
        self.check_prune(prune)?;
        let mut config = self.config.clone();
        config.num_layers = prune.keep_layers;
        Ok(EncoderWeights {
            config,
            input_proj: self.input_proj.clone(),
            blocks: self.blocks[..prune.keep_layers].to_vec(),
            final_norm: self.final_norm.clone(),
        })
    }

    pub fn per_block_params(&self) -> usize {
        self.blocks[0].num_params()
    }

    pub fn num_params(&self) -> usize {
        self.input_proj.num_params()
            + self.blocks.iter().map(|b| b.num_params()).sum::<usize>()
            + self.final_norm.gain.len() * 2
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("input_proj.w".to_string(), self.input_proj.w.clone()));
        out.push(("input_proj.b".to_string(), self.input_proj.b.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.params_into(&format!("block{i}"), &mut out);
        }
        out.push(("final_norm.gain".to_string(), self.final_norm.gain.clone()));
        out.push(("final_norm.bias".to_string(), self.final_norm.bias.clone()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 4,
            d_model: 8,
            num_heads: 2,
            ffn_mult: 4,
            feature_dim: 5,
        }
    }

    #[test]
    fn full_prune_is_identity_config() {
        let cfg = toy_config();
        let enc = EncoderWeights::init(&cfg, 3);
        let frames = Tensor::randn(
            vec![6, 5],
            1.0,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(1),
        );
        let a = enc.encode(&frames, PruneSpec { keep_layers: 4 }).unwrap();
        let b = enc.encode(&frames, PruneSpec { keep_layers: 4 }).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn keep_layers_out_of_range() {
        let cfg = toy_config();
        let enc = EncoderWeights::init(&cfg, 3);
        let frames = Tensor::zeros(vec![3, 5]);
        assert!(matches!(
            enc.encode(&frames, PruneSpec { keep_layers: 5 }),
            Err(ModelError::PruneOutOfRange { .. })
        ));
        assert!(matches!(
            enc.encode(&frames, PruneSpec { keep_layers: 0 }),
            Err(ModelError::PruneOutOfRange { .. })
        ));
    }

    #[test]
    fn pruned_weights_match_truncated_forward() {
        let cfg = toy_config();
        let enc = EncoderWeights::init(&cfg, 42);
        let frames = Tensor::randn(
            vec![7, 5],
            1.0,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(9),
        );
        for keep in 1..=4 {
            let pruned = enc
                .build_pruned_weights(PruneSpec { keep_layers: keep })
                .unwrap();
            let a = pruned
                .encode(&frames, PruneSpec { keep_layers: keep })
                .unwrap();
            let b = enc.encode(&frames, PruneSpec { keep_layers: keep }).unwrap();
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pruned_param_count_drops_by_per_layer() {
        let cfg = toy_config();
        let enc = EncoderWeights::init(&cfg, 42);
        let pruned = enc
            .build_pruned_weights(PruneSpec { keep_layers: 2 })
            .unwrap();
        assert_eq!(pruned.blocks.len(), 2);
        assert_eq!(
            enc.num_params() - pruned.num_params(),
            2 * enc.per_block_params()
        );
    }

    #[test]
    fn block_param_conservation() {
        let cfg = toy_config();
        let enc = EncoderWeights::init(&cfg, 42);
        let retained = enc
            .build_pruned_weights(PruneSpec { keep_layers: 3 })
            .unwrap();
        let removed_blocks: usize = enc.blocks[3..].iter().map(|b| b.num_params()).sum();
        let retained_blocks: usize = retained.blocks.iter().map(|b| b.num_params()).sum();
        let full_blocks: usize = enc.blocks.iter().map(|b| b.num_params()).sum();
        assert_eq!(retained_blocks + removed_blocks, full_blocks);
    }

    #[test]
    fn encoder_params_are_frozen() {
        let enc = EncoderWeights::init(&toy_config(), 1);
        for (_, p) in enc.params() {
            assert!(!p.requires_grad());
        }
    }
}
