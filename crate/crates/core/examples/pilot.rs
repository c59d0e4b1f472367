//! Pilot harness for the qualitative-reproduction configuration: trains the
//! baseline, pruned, and pruned+LoRA cells on one language and prints WERs
//! and error decompositions. Sizes come from env vars so thresholds can be
//! tuned before being frozen in the acceptance suite.

use std::sync::Arc;
use std::time::Instant;

use slamprune::encoder::EncoderConfig;
use slamprune::eval::{normalize, NormProfile};
use slamprune::lm::{LmConfig, LmWeights, LoraConfig, Vocab, ALL_TARGETS};
use slamprune::projector::ProjectorConfig;
use slamprune::sweep::{run_grid, word_error_change, GridPlan, LanguageData, RawUtterance, ScaleSpec};
use slamprune::synth::{generate_corpus, LanguageProfile, TierSpec};
use slamprune::trainer::{pretrain_lm, TrainRecipe};
use slamprune::{mix_seed, salt_str};

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let t0 = Instant::now();
    let master_seed = env_usize("SEED", 42) as u64;
    let train_n = env_usize("TRAIN", 600);
    let test_n = env_usize("TEST", 100);
    let epochs = env_usize("EPOCHS", 2);
    let noise = env_f64("NOISE", 0.6);
    let lr = env_f64("LR", 1e-3);
    let workers = env_usize("WORKERS", 4);

    let mut profile = LanguageProfile::anglia();
    profile.noise_sigma = noise;
    let tier = TierSpec { train: train_n, dev: 0, test: test_n };
    let corpus = generate_corpus(&profile, &tier, mix_seed(master_seed, salt_str("data")));
    let raw = |utts: &[slamprune::synth::Utterance]| {
        Arc::new(utts.iter().map(RawUtterance::from_utterance).collect::<Vec<_>>())
    };

    let vocab_chars = LanguageProfile::combined_charset(&[profile.clone()]);
    let vocab = Vocab::new(&vocab_chars);
    let lm_cfg = LmConfig {
        d_model: env_usize("LM_D", 48),
        num_layers: env_usize("LM_L", 2),
        num_heads: 4,
        max_seq: 200,
    };

    let norm = NormProfile::default();
    let texts: Vec<Vec<usize>> = corpus
        .train
        .iter()
        .map(|u| vocab.encode(&normalize(&u.transcript, &norm)).unwrap())
        .collect();
    let lm = LmWeights::init(&lm_cfg, &vocab, true, mix_seed(master_seed, 0x11aa));
    let pre_recipe = TrainRecipe {
        lr: env_f64("PRE_LR", 3e-3),
        weight_decay: 0.01,
        clip_norm: 1.0,
        warmup_frac: 0.05,
        epochs: env_usize("PRE_EPOCHS", 4),
        batch_size: 8,
        seed: mix_seed(master_seed, 0x9137),
    };
    let trace = pretrain_lm(&lm, &texts, &pre_recipe).expect("pretrain");
    println!(
        "[{:6.1}s] pretrain: {} texts, final loss {:.4}",
        t0.elapsed().as_secs_f64(),
        texts.len(),
        trace.final_loss().unwrap()
    );
    // Oracle check: decode from a standardized-embedding prefix (perfect
    // "projector") to see whether the frozen LM's copy circuit works at all.
    struct OracleScorer<'a> {
        lm: &'a LmWeights,
        prefix: slamprune::tensor::Tensor,
    }
    impl slamprune::decode::TokenScorer for OracleScorer<'_> {
        fn vocab_size(&self) -> usize {
            self.lm.vocab.size()
        }
        fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, slamprune::error::ModelError> {
            slamprune::tensor::no_grad(|| {
                let logits = self.lm.forward_asr(&self.prefix, prefix, None, None)?;
                let v = self.lm.vocab.size();
                let last = logits.data()[(logits.rows() - 1) * v..].to_vec();
                Ok(slamprune::decode::log_softmax(&last))
            })
        }
    }
    let d = lm_cfg.d_model;
    let embed_data = lm.params()[0].1.data();
    for u in corpus.test.iter().take(4) {
        let ids = vocab.encode(&normalize(&u.transcript, &norm)).unwrap();
        let mut pd = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            let row = &embed_data[id * d..(id + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            pd.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let scorer = OracleScorer {
            lm: &lm,
            prefix: slamprune::tensor::Tensor::from_vec(vec![ids.len(), d], pd).unwrap(),
        };
        let (toks, _, trunc) = slamprune::decode::beam_decode(&scorer, 2, 64).expect("oracle decode");
        println!(
            "  oracle: ref={:?} hyp={:?}{}",
            normalize(&u.transcript, &norm),
            vocab.decode(&toks),
            if trunc { " (truncated)" } else { "" }
        );
    }

    if std::env::var("PRE_ONLY").is_ok() {
        println!("total {:.1}s", t0.elapsed().as_secs_f64());
        return;
    }

    let lm_state: Vec<(String, Vec<usize>, Vec<f64>)> = lm
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.dims().to_vec(), t.data()))
        .collect();

    let enc_d = env_usize("ENC_D", 32);
    let enc_cfg = EncoderConfig {
        num_layers: 8,
        d_model: enc_d,
        num_heads: 4,
        ffn_mult: 4,
        feature_dim: 80,
    };
    // Classification pretraining gives the encoder stack real top-down
    // structure so truncation degrades rather than helps.
    let enc = slamprune::encoder::EncoderWeights::init_trainable(
        &enc_cfg,
        mix_seed(master_seed, salt_str("toy8")),
    );
    let enc_pairs: Vec<_> = corpus
        .train
        .iter()
        .take(env_usize("ENC_PRE_N", 300))
        .map(|u| {
            (
                u.frames.clone(),
                slamprune::synth::frame_labels(
                    &u.transcript,
                    profile.frames_per_char,
                    &vocab_chars,
                ),
            )
        })
        .collect();
    let enc_recipe = TrainRecipe {
        lr: env_f64("ENC_PRE_LR", 1e-3),
        weight_decay: 0.01,
        clip_norm: 1.0,
        warmup_frac: 0.05,
        epochs: env_usize("ENC_PRE_EPOCHS", 3),
        batch_size: 8,
        seed: mix_seed(master_seed, 0xe2c0),
    };
    let enc_trace = slamprune::trainer::pretrain_encoder(&enc, &enc_pairs, vocab_chars.len(), &enc_recipe).expect("enc pretrain");
    println!(
        "[{:6.1}s] encoder pretrain: {} utts, final loss {:.4}",
        t0.elapsed().as_secs_f64(),
        enc_pairs.len(),
        enc_trace.final_loss().unwrap()
    );
    let encoder_state: Vec<(String, Vec<usize>, Vec<f64>)> = enc
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.dims().to_vec(), t.data()))
        .collect();

    let plan = GridPlan {
        scales: vec![ScaleSpec {
            name: "toy8".to_string(),
            encoder: enc_cfg.clone(),
            encoder_state: Arc::new(encoder_state),
        }],
        languages: vec![LanguageData {
            name: profile.name.clone(),
            train: raw(&corpus.train),
            test: raw(&corpus.test),
        }],
        depths: vec![8, 6],
        lora: LoraConfig {
            rank: env_usize("LORA_R", 4),
            alpha: env_f64("LORA_A", 8.0),
            dropout_p: 0.05,
            targets: ALL_TARGETS.to_vec(),
        },
        lora_options: vec![false, true],
        projector: ProjectorConfig {
            concat_factor: 4,
            hidden_dim: env_usize("PROJ_H", 64),
            out_dim: lm_cfg.d_model,
            dropout_p: 0.05,
        },
        lm: lm_cfg.clone(),
        vocab_chars,
        lm_state: Arc::new(lm_state),
        recipe: TrainRecipe {
            lr,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_frac: 0.05,
            epochs,
            batch_size: 8,
            seed: 0,
        },
        beam_size: 2,
        max_decode_len: 64,
        master_seed,
    };

    let cells = run_grid(&plan, workers).expect("grid");
    for c in &cells {
        println!(
            "[{:6.1}s] {}L {}: WER {:.2}%  train_loss {:.4}  (S={} I={} D={} N={}){}",
            t0.elapsed().as_secs_f64(),
            c.layers_kept,
            if c.lora_enabled { "lora" } else { "base" },
            c.wer_pct(),
            c.final_train_loss,
            c.totals.substitutions,
            c.totals.insertions,
            c.totals.deletions,
            c.totals.reference_words,
            if c.failed { "  FAILED" } else { "" }
        );
    }
    for c in &cells {
        for (id, r, h) in c.hyps.iter().take(3) {
            println!(
                "  {}L {} {id}: ref={r:?} hyp={h:?}",
                c.layers_kept,
                if c.lora_enabled { "lora" } else { "base" }
            );
        }
    }
    let find = |kept: usize, lora: bool| cells.iter().find(|c| c.layers_kept == kept && c.lora_enabled == lora).unwrap();
    let full = find(8, false);
    let pruned = find(6, false);
    let pruned_lora = find(6, true);
    println!(
        "baseline {:.2}% | pruned {:.2}% (delta {:+.2}) | pruned+lora {:.2}% (delta vs pruned {:+.2})",
        full.wer_pct(),
        pruned.wer_pct(),
        pruned.wer_pct() - full.wer_pct(),
        pruned_lora.wer_pct(),
        pruned_lora.wer_pct() - pruned.wer_pct()
    );
    let w = word_error_change(pruned, pruned_lora);
    println!("word error change pruned->pruned+lora: {w:?}");
    let b = &pruned.totals;
    let l = &pruned_lora.totals;
    let red_s = b.substitutions as i64 - l.substitutions as i64;
    let red_d = b.deletions as i64 - l.deletions as i64;
    let red_tot = b.errors() as i64 - l.errors() as i64;
    if red_tot > 0 {
        println!(
            "S+D share of total reduction: {:.1}%",
            100.0 * (red_s + red_d) as f64 / red_tot as f64
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
