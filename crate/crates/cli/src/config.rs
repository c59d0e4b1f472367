//! Experiment configuration: strict TOML schema shared by every subcommand.
//! Unknown keys are rejected so a typo can never silently fall back to a
//! default mid-sweep.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use slamprune::encoder::EncoderConfig;
use slamprune::lm::{LmConfig, LoraConfig};
use slamprune::projector::ProjectorConfig;
use slamprune::sweep::{GridPlan, LanguageData, ScaleSpec};
use slamprune::synth::{LanguageProfile, TierSpec};
use slamprune::trainer::TrainRecipe;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub projector: ProjectorConfig,
    pub lm: LmConfig,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub recipe: TrainRecipe,
    /// Separate recipe for LM text pretraining; falls back to `recipe`.
    #[serde(default)]
    pub pretrain_recipe: Option<TrainRecipe>,
    /// Recipe for encoder denoising pretraining; falls back to
    /// `pretrain_recipe`, then `recipe`.
    #[serde(default)]
    pub encoder_pretrain_recipe: Option<TrainRecipe>,
    /// Per-language cap on utterances used for encoder pretraining.
    #[serde(default)]
    pub encoder_pretrain_utts: Option<usize>,
    pub scales: Vec<ScaleConfig>,
    pub languages: Vec<LanguageConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Single-cell target for the train/eval subcommands.
    #[serde(default)]
    pub train: Option<TrainTarget>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub name: String,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    /// One of the built-in profiles: nordia, flevia, anglia.
    pub name: String,
    /// low | medium | high; ignored when `counts` is given.
    #[serde(default)]
    pub tier: Option<String>,
    #[serde(default)]
    pub counts: Option<TierSpec>,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub frames_per_char: Option<usize>,
    #[serde(default)]
    pub words_min: Option<usize>,
    #[serde(default)]
    pub words_max: Option<usize>,
}

impl LanguageConfig {
    pub fn profile(&self) -> Result<LanguageProfile, CliError> {
        let mut p = match self.name.as_str() {
            "nordia" => LanguageProfile::nordia(),
            "flevia" => LanguageProfile::flevia(),
            "anglia" => LanguageProfile::anglia(),
            other => {
                return Err(CliError::Config(format!(
                    "languages.name: unknown language profile {other:?}"
                )))
            }
        };
        if let Some(s) = self.noise_sigma {
            p.noise_sigma = s;
        }
        if let Some(f) = self.frames_per_char {
            p.frames_per_char = f;
        }
        if let Some(w) = self.words_min {
            p.words_min = w;
        }
        if let Some(w) = self.words_max {
            p.words_max = w;
        }
        Ok(p)
    }

    pub fn tier_spec(&self) -> Result<TierSpec, CliError> {
        if let Some(c) = &self.counts {
            return Ok(c.clone());
        }
        match self.tier.as_deref() {
            Some("low") => Ok(TierSpec::low()),
            Some("medium") => Ok(TierSpec::medium()),
            Some("high") => Ok(TierSpec::high()),
            Some(other) => Err(CliError::Config(format!(
                "languages.tier: expected low|medium|high, got {other:?}"
            ))),
            None => Err(CliError::Config(
                "languages: either tier or counts is required".to_string(),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// layers_kept values; default is the full depth schedule per scale.
    pub depths: Option<Vec<usize>>,
    pub lora_options: Vec<bool>,
    pub beam_size: usize,
    pub max_decode_len: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: None,
            lora_options: vec![false, true],
            beam_size: 2,
            max_decode_len: 96,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTarget {
    pub scale: String,
    pub language: String,
    pub layers_kept: usize,
    pub lora: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingArtifact(format!("config {}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Ok(seed) = std::env::var("SLAMPRUNE_SEED") {
            config.master_seed = seed
                .parse()
                .map_err(|_| CliError::Config(format!("SLAMPRUNE_SEED: not a u64: {seed:?}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, msg: String| CliError::Config(format!("{name}: {msg}"));
        self.projector
            .validate()
            .map_err(|m| field("projector", m))?;
        self.lm.validate().map_err(|m| field("lm", m))?;
        if let Some(lora) = &self.lora {
            lora.validate().map_err(|m| field("lora", m))?;
        }
        self.recipe.validate().map_err(|m| field("recipe", m))?;
        if let Some(r) = &self.pretrain_recipe {
            r.validate().map_err(|m| field("pretrain_recipe", m))?;
        }
        if self.scales.is_empty() {
            return Err(field("scales", "at least one scale required".into()));
        }
        for s in &self.scales {
            s.encoder
                .validate()
                .map_err(|m| field(&format!("scales.{}.encoder", s.name), m))?;
        }
        if self.languages.is_empty() {
            return Err(field("languages", "at least one language required".into()));
        }
        for l in &self.languages {
            l.profile()?;
            l.tier_spec()?;
        }
        if self.sweep.beam_size == 0 {
            return Err(field("sweep.beam_size", "must be >= 1".into()));
        }
        if self.lora.is_none() && self.sweep.lora_options.contains(&true) {
            return Err(field(
                "lora",
                "required when sweep.lora_options includes true".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab_chars(&self) -> Result<Vec<char>, CliError> {
        let profiles: Vec<LanguageProfile> = self
            .languages
            .iter()
            .map(|l| l.profile())
            .collect::<Result<_, _>>()?;
        Ok(LanguageProfile::combined_charset(&profiles))
    }

    /// Depth schedule for a scale: configured override or full-to-2 steps.
    pub fn depths_for(&self, encoder: &EncoderConfig) -> Vec<usize> {
        match &self.sweep.depths {
            Some(d) => d.clone(),
            None => slamprune::params::depth_schedule(encoder.num_layers),
        }
    }

    /// Assemble the grid plan shared by sweep/train/eval. Corpora are
    /// regenerated in memory from the master seed, so a plan is
    /// self-contained and reproducible.
    pub fn grid_plan(
        &self,
        lm_state: Arc<Vec<(String, Vec<usize>, Vec<f64>)>>,
        encoder_states: &std::collections::HashMap<String, Arc<Vec<(String, Vec<usize>, Vec<f64>)>>>,
    ) -> Result<GridPlan, CliError> {
        let lora = self.lora.clone().unwrap_or_else(|| LoraConfig {
            rank: 1,
            alpha: 1.0,
            dropout_p: 0.0,
            targets: slamprune::lm::ALL_TARGETS.to_vec(),
        });
        let mut languages = Vec::new();
        for l in &self.languages {
            let profile = l.profile()?;
            let tier = l.tier_spec()?;
            let corpus = slamprune::synth::generate_corpus(&profile, &tier, self.data_seed());
            let raw = |utts: &[slamprune::synth::Utterance]| {
                Arc::new(
                    utts.iter()
                        .map(slamprune::sweep::RawUtterance::from_utterance)
                        .collect::<Vec<_>>(),
                )
            };
            languages.push(LanguageData {
                name: profile.name.clone(),
                train: raw(&corpus.train),
                test: raw(&corpus.test),
            });
        }
        let depths = self.depths_for(&self.scales[0].encoder);
        Ok(GridPlan {
            scales: self
                .scales
                .iter()
                .map(|s| ScaleSpec {
                    name: s.name.clone(),
                    encoder: s.encoder.clone(),
                    encoder_state: encoder_states
                        .get(&s.name)
                        .cloned()
                        .unwrap_or_default(),
                })
                .collect(),
            languages,
            depths,
            lora,
            lora_options: self.sweep.lora_options.clone(),
            projector: self.projector.clone(),
            lm: self.lm.clone(),
            vocab_chars: self.vocab_chars()?,
            lm_state,
            recipe: self.recipe.clone(),
            beam_size: self.sweep.beam_size,
            max_decode_len: self.sweep.max_decode_len,
            master_seed: self.master_seed,
        })
    }

    pub fn data_seed(&self) -> u64 {
        slamprune::mix_seed(self.master_seed, slamprune::salt_str("data"))
    }

    pub fn lm_checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("lm.ckpt")
    }

    pub fn encoder_checkpoint_path(&self, scale: &str) -> PathBuf {
        self.output_dir.join(format!("enc_{scale}.ckpt"))
    }

    pub fn encoder_pretrain_recipe(&self) -> TrainRecipe {
        self.encoder_pretrain_recipe
            .clone()
            .or_else(|| self.pretrain_recipe.clone())
            .unwrap_or_else(|| self.recipe.clone())
    }
}
