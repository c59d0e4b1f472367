//! The trainable bridge between encoder space and LM embedding space:
//! concatenation-based temporal downsampling (5 consecutive frames by
//! default), a two-layer MLP with ReLU and dropout, then layer norm.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::layers::{Dense, LayerNormParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    #[serde(default = "default_concat_factor")]
    pub concat_factor: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
}

fn default_concat_factor() -> usize {
    5
}

fn default_dropout() -> f64 {
    0.1
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.concat_factor == 0 {
            return Err("concat_factor must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(format!("dropout_p {} out of [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct ProjectorWeights {
    pub config: ProjectorConfig,
    pub fc1: Dense, // [concat * d_model -> hidden]
    pub fc2: Dense, // [hidden -> out_dim]
    pub norm: LayerNormParams,
    d_model: usize,
}

impl ProjectorWeights {
    /// Fresh trainable projector; re-initialized from scratch per run.
    pub fn init(config: &ProjectorConfig, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let fc1 = Dense::init(config.concat_factor * d_model, config.hidden_dim, true, rng);
        let fc2 = Dense::init(config.hidden_dim, config.out_dim, true, rng);
        let norm = LayerNormParams::init(config.out_dim, true);
        ProjectorWeights {
            config: config.clone(),
            fc1,
            fc2,
            norm,
            d_model,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Output length is floor(T / concat_factor); trailing frames that do not
    /// fill a complete window are dropped. Pass a rng only in train mode
    /// (dropout); eval mode is deterministic.
    pub fn project(
        &self,
        enc_out: &Tensor,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let t = enc_out.rows();
        let c = self.config.concat_factor;
        if t < c {
            return Err(ModelError::TooShortInput { got: t, need: c });
        }
        let windows = t / c;
        let d = enc_out.cols();
        // Row-major layout makes window concatenation a plain reshape of the
        // leading windows*c rows.
        let x = enc_out
            .slice_rows(0, windows * c)?
            .reshape(vec![windows, c * d])?;
        let h = self.fc1.forward(&x)?.relu();
        let h = match train_rng {
            Some(rng) if self.config.dropout_p > 0.0 => h.dropout(self.config.dropout_p, rng)?,
            _ => h,
        };
        let out = self.fc2.forward(&h)?;
        Ok(self.norm.forward(&out)?)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("projector.fc1.w".to_string(), self.fc1.w.clone()),
            ("projector.fc1.b".to_string(), self.fc1.b.clone()),
            ("projector.fc2.w".to_string(), self.fc2.w.clone()),
            ("projector.fc2.b".to_string(), self.fc2.b.clone()),
            ("projector.norm.gain".to_string(), self.norm.gain.clone()),
            ("projector.norm.bias".to_string(), self.norm.bias.clone()),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy() -> (ProjectorConfig, ProjectorWeights) {
        let cfg = ProjectorConfig {
            concat_factor: 5,
            hidden_dim: 16,
            out_dim: 6,
            dropout_p: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ProjectorWeights::init(&cfg, 4, &mut rng);
        (cfg, w)
    }

    #[test]
    fn output_length_is_floor() {
        let (_, proj) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x10 = Tensor::randn(vec![10, 4], 1.0, &mut rng);
        assert_eq!(proj.project(&x10, None).unwrap().rows(), 2);
        let x12 = Tensor::randn(vec![12, 4], 1.0, &mut rng);
        assert_eq!(proj.project(&x12, None).unwrap().rows(), 2);
    }

    #[test]
    fn too_short_input_errors() {
        let (_, proj) = toy();
        let x = Tensor::zeros(vec![4, 4]);
        assert!(matches!(
            proj.project(&x, None),
            Err(ModelError::TooShortInput { got: 4, need: 5 })
        ));
    }

    #[test]
    fn trailing_frames_are_ignored() {
        let (_, proj) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x12 = Tensor::randn(vec![12, 4], 1.0, &mut rng);
        let x10 = Tensor::from_vec(vec![10, 4], x12.data()[..40].to_vec()).unwrap();
        assert_eq!(
            proj.project(&x12, None).unwrap().data(),
            proj.project(&x10, None).unwrap().data()
        );
    }

    #[test]
    fn windows_are_local() {
        // Perturbing frames inside one 5-frame window changes only that row.
        let (_, proj) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![15, 4], 1.0, &mut rng);
        let base = proj.project(&x, None).unwrap();
        let mut perturbed = x.data();
        for v in perturbed[5 * 4..10 * 4].iter_mut() {
            *v += 1.0;
        }
        let x2 = Tensor::from_vec(vec![15, 4], perturbed).unwrap();
        let out = proj.project(&x2, None).unwrap();
        let (b, o) = (base.data(), out.data());
        let cols = base.cols();
        for j in 0..cols {
            assert_eq!(b[j], o[j], "row 0 must be unchanged");
            assert_eq!(b[2 * cols + j], o[2 * cols + j], "row 2 must be unchanged");
        }
        assert!((0..cols).any(|j| b[cols + j] != o[cols + j]), "row 1 must change");
    }

    #[test]
    fn all_params_trainable() {
        let (_, proj) = toy();
        for (_, p) in proj.params() {
            assert!(p.requires_grad());
        }
    }
}
