//! Subcommand implementations. Every command that produces artifacts also
//! drops a run manifest (resolved seed + verbatim config) so a run can be
//! reproduced bit-identically from the manifest alone.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use slamprune::checkpoint;
use slamprune::eval::{corpus_wer, normalize, NormProfile};
use slamprune::params::{
    depth_schedule, lora_param_count, net_delta, reduction_table_csv, EncoderShape, LmShape,
};
use slamprune::sweep::{
    build_bundle, cell_seed, run_grid, table2_csv, write_reports, ExperimentCell, ScaleAccounting,
};
use slamprune::synth::{generate_corpus, write_frames, write_manifest};
use slamprune::trainer::{pretrain_lm, train_asr, AsrExample, TrainRecipe};
use slamprune::{mix_seed, salt_str};

use crate::config::ExperimentConfig;
use crate::CliError;

pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(tmp, path)
}

fn run_manifest(
    config: &ExperimentConfig,
    config_path: &Path,
    command: &str,
) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(config_path).map_err(CliError::other)?;
    let body = format!(
        "command = {command:?}\nmaster_seed = {}\nconfig_hash = {:#018x}\n\n# verbatim config; rerun with SLAMPRUNE_SEED={} to reproduce\n{}",
        config.master_seed,
        salt_str(&raw),
        config.master_seed,
        raw.lines().map(|l| format!("# {l}\n")).collect::<String>()
    );
    write_atomic(
        &config.output_dir.join("manifests").join(format!("{command}.txt")),
        body.as_bytes(),
    )
    .map_err(CliError::other)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(config: &ExperimentConfig, config_path: &Path, force: bool) -> Result<(), CliError> {
    let data_dir = config.output_dir.join("data");
    if data_dir.exists() && !force {
        return Err(CliError::Config(format!(
            "output {} exists; pass --force to overwrite",
            data_dir.display()
        )));
    }
    for lang in &config.languages {
        let profile = lang.profile()?;
        let tier = lang.tier_spec()?;
        let corpus = generate_corpus(&profile, &tier, config.data_seed());
        let lang_dir = data_dir.join(&profile.name);
        let frames_dir = lang_dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(CliError::other)?;
        for (split, utts) in [
            ("train", &corpus.train),
            ("dev", &corpus.dev),
            ("test", &corpus.test),
        ] {
            let mut records = Vec::with_capacity(utts.len());
            for u in utts {
                let rel = format!("frames/{}.frames", u.id);
                write_frames(&frames_dir.join(format!("{}.frames", u.id)), &u.frames)
                    .map_err(CliError::other)?;
                records.push((
                    u.id.clone(),
                    u.language.clone(),
                    u.transcript.clone(),
                    rel,
                ));
            }
            write_manifest(&lang_dir.join(format!("{split}.tsv")), &records)
                .map_err(CliError::other)?;
            println!(
                "gen-data: {} {} utterances -> {}",
                profile.name,
                utts.len(),
                lang_dir.join(format!("{split}.tsv")).display()
            );
        }
    }
    run_manifest(config, config_path, "gen-data")
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn pretrain_seed(config: &ExperimentConfig) -> u64 {
    mix_seed(config.master_seed, 0x11aa)
}

pub fn cmd_pretrain(config: &ExperimentConfig, config_path: &Path) -> Result<(), CliError> {
    let vocab = slamprune::lm::Vocab::new(&config.vocab_chars()?);
    let lm = slamprune::lm::LmWeights::init(&config.lm, &vocab, true, pretrain_seed(config));
    let norm = NormProfile::default();
    let mut texts = Vec::new();
    for lang in &config.languages {
        let profile = lang.profile()?;
        let tier = lang.tier_spec()?;
        let corpus = generate_corpus(&profile, &tier, config.data_seed());
        for u in &corpus.train {
            texts.push(
                vocab
                    .encode(&normalize(&u.transcript, &norm))
                    .map_err(CliError::other)?,
            );
        }
    }
    let recipe = config
        .pretrain_recipe
        .clone()
        .unwrap_or_else(|| config.recipe.clone());
    let trace = pretrain_lm(&lm, &texts, &recipe).map_err(CliError::other)?;
    let path = config.lm_checkpoint_path();
    std::fs::create_dir_all(&config.output_dir).map_err(CliError::other)?;
    checkpoint::save(&path, &lm.params()).map_err(CliError::other)?;
    write_atomic(
        &config.output_dir.join("pretrain_loss.csv"),
        trace.to_csv().as_bytes(),
    )
    .map_err(CliError::other)?;
    println!(
        "pretrain: {} texts, final loss {:.4}, checkpoint {}",
        texts.len(),
        trace.final_loss().unwrap_or(f64::NAN),
        path.display()
    );

    // Frame-classification pretraining per scale: the frozen encoder stack
    // gets real top-down structure, so later truncation costs accuracy.
    let charset = config.vocab_chars()?;
    let cap = config.encoder_pretrain_utts.unwrap_or(500);
    let mut pairs = Vec::new();
    for lang in &config.languages {
        let profile = lang.profile()?;
        let tier = lang.tier_spec()?;
        let corpus = generate_corpus(&profile, &tier, config.data_seed());
        for u in corpus.train.iter().take(cap) {
            pairs.push((
                u.frames.clone(),
                slamprune::synth::frame_labels(
                    &u.transcript,
                    profile.frames_per_char,
                    &charset,
                ),
            ));
        }
    }
    let enc_recipe = config.encoder_pretrain_recipe();
    for scale in &config.scales {
        let enc = slamprune::encoder::EncoderWeights::init_trainable(
            &scale.encoder,
            mix_seed(config.master_seed, slamprune::salt_str(&scale.name)),
        );
        let trace = slamprune::trainer::pretrain_encoder(&enc, &pairs, charset.len(), &enc_recipe)
            .map_err(CliError::other)?;
        let enc_path = config.encoder_checkpoint_path(&scale.name);
        checkpoint::save(&enc_path, &enc.params()).map_err(CliError::other)?;
        println!(
            "pretrain encoder {}: {} utterances, final loss {:.4}, checkpoint {}",
            scale.name,
            pairs.len(),
            trace.final_loss().unwrap_or(f64::NAN),
            enc_path.display()
        );
    }
    run_manifest(config, config_path, "pretrain")
}

/// Load the pretrained encoder state for every scale; exit 3 when any
/// checkpoint is absent.
pub fn load_encoder_states(
    config: &ExperimentConfig,
) -> Result<HashMap<String, Arc<Vec<(String, Vec<usize>, Vec<f64>)>>>, CliError> {
    let mut out = HashMap::new();
    for scale in &config.scales {
        let path = config.encoder_checkpoint_path(&scale.name);
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "encoder checkpoint {} not found; run `slamprune pretrain` first",
                path.display()
            )));
        }
        out.insert(
            scale.name.clone(),
            Arc::new(checkpoint::load(&path).map_err(CliError::other)?),
        );
    }
    Ok(out)
}

/// Load the pretrained LM tensor state; exit 3 when the checkpoint is absent.
pub fn load_lm_state(
    config: &ExperimentConfig,
) -> Result<Arc<Vec<(String, Vec<usize>, Vec<f64>)>>, CliError> {
    let path = config.lm_checkpoint_path();
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "LM checkpoint {} not found; run `slamprune pretrain` first",
            path.display()
        )));
    }
    Ok(Arc::new(checkpoint::load(&path).map_err(CliError::other)?))
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

fn cell_ckpt_path(config: &ExperimentConfig, t: &crate::config::TrainTarget) -> PathBuf {
    config.output_dir.join(format!(
        "cell_{}_{}_{}L_{}.ckpt",
        t.scale,
        t.language,
        t.layers_kept,
        if t.lora { "lora" } else { "base" }
    ))
}

pub fn cmd_train(config: &ExperimentConfig, config_path: &Path) -> Result<(), CliError> {
    let target = config.train.as_ref().ok_or_else(|| {
        CliError::Config("train: section required for the train subcommand".to_string())
    })?;
    let plan = config.grid_plan(load_lm_state(config)?, &load_encoder_states(config)?)?;
    let scale = plan
        .scales
        .iter()
        .find(|s| s.name == target.scale)
        .ok_or_else(|| CliError::Config(format!("train.scale: unknown scale {:?}", target.scale)))?;
    let language = plan
        .languages
        .iter()
        .find(|l| l.name == target.language)
        .ok_or_else(|| {
            CliError::Config(format!("train.language: unknown language {:?}", target.language))
        })?;
    let seed = cell_seed(
        plan.master_seed,
        &scale.name,
        &language.name,
        target.layers_kept,
        target.lora,
    );
    let bundle = build_bundle(&plan, scale, target.layers_kept, target.lora, seed);
    let norm = NormProfile::default();
    let corpus: Vec<AsrExample> = language
        .train
        .iter()
        .map(|u| {
            Ok(AsrExample {
                frames: u.frames(),
                tokens: bundle.lm.vocab.encode(&normalize(&u.transcript, &norm))?,
            })
        })
        .collect::<Result<_, slamprune::error::ModelError>>()
        .map_err(CliError::other)?;
    let recipe = TrainRecipe {
        seed: mix_seed(seed, 0x7e41),
        ..plan.recipe.clone()
    };
    let trace = train_asr(&bundle, &corpus, &recipe).map_err(CliError::other)?;
    let ckpt = cell_ckpt_path(config, target);
    checkpoint::save(&ckpt, &bundle.trainable_params()).map_err(CliError::other)?;
    write_atomic(
        &config.output_dir.join("train_loss.csv"),
        trace.to_csv().as_bytes(),
    )
    .map_err(CliError::other)?;
    println!(
        "train: {} steps, final loss {:.4}, checkpoint {}",
        trace.rows.len(),
        trace.final_loss().unwrap_or(f64::NAN),
        ckpt.display()
    );
    run_manifest(config, config_path, "train")
}

fn read_tsv_pairs(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| {
            CliError::other(format!("{}: malformed line {line:?}", path.display()))
        })?;
        out.push((id.to_string(), rest.to_string()));
    }
    Ok(out)
}

fn wer_report_csv(scored: &slamprune::eval::CorpusWer) -> String {
    let mut out = String::from("utterance_id,substitutions,insertions,deletions,hits,reference_words,wer\n");
    for u in &scored.utterances {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4}\n",
            u.id,
            u.counts.substitutions,
            u.counts.insertions,
            u.counts.deletions,
            u.counts.hits,
            u.counts.reference_words,
            u.wer
        ));
    }
    let t = &scored.totals;
    out.push_str(&format!(
        "TOTAL,{},{},{},{},{},{:.4}\n",
        t.substitutions, t.insertions, t.deletions, t.hits, t.reference_words, scored.wer
    ));
    out
}

/// Score a hypothesis file against a reference file (both `id<TAB>text`).
pub fn cmd_eval_files(ref_path: &Path, hyp_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let refs = read_tsv_pairs(ref_path)?;
    let hyps = read_tsv_pairs(hyp_path)?;
    if hyps.is_empty() {
        return Err(CliError::MissingArtifact(format!(
            "hypothesis file {} is empty",
            hyp_path.display()
        )));
    }
    let hyp_map: HashMap<&str, &str> = hyps.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let norm = NormProfile::default();
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, text) in &refs {
        let hyp = hyp_map.get(id.as_str()).ok_or_else(|| {
            CliError::other(format!("no hypothesis for utterance {id}"))
        })?;
        pairs.push((id.clone(), normalize(text, &norm), normalize(hyp, &norm)));
    }
    let scored = corpus_wer(&pairs).map_err(CliError::other)?;
    let report = wer_report_csv(&scored);
    if let Some(p) = out {
        write_atomic(p, report.as_bytes()).map_err(CliError::other)?;
    }
    println!(
        "eval: {} utterances, WER {:.2}% (S={} I={} D={})",
        scored.utterances.len(),
        scored.wer * 100.0,
        scored.totals.substitutions,
        scored.totals.insertions,
        scored.totals.deletions
    );
    Ok(())
}

/// Decode the configured cell's test split with its trained checkpoint.
pub fn cmd_eval_cell(config: &ExperimentConfig, config_path: &Path) -> Result<(), CliError> {
    let target = config.train.as_ref().ok_or_else(|| {
        CliError::Config("train: section required to evaluate a cell".to_string())
    })?;
    let ckpt = cell_ckpt_path(config, target);
    if !ckpt.exists() {
        return Err(CliError::MissingArtifact(format!(
            "cell checkpoint {} not found; run `slamprune train` first",
            ckpt.display()
        )));
    }
    let plan = config.grid_plan(load_lm_state(config)?, &load_encoder_states(config)?)?;
    let scale = plan
        .scales
        .iter()
        .find(|s| s.name == target.scale)
        .ok_or_else(|| CliError::Config(format!("train.scale: unknown scale {:?}", target.scale)))?;
    let language = plan
        .languages
        .iter()
        .find(|l| l.name == target.language)
        .ok_or_else(|| {
            CliError::Config(format!("train.language: unknown language {:?}", target.language))
        })?;
    let seed = cell_seed(
        plan.master_seed,
        &scale.name,
        &language.name,
        target.layers_kept,
        target.lora,
    );
    let bundle = build_bundle(&plan, scale, target.layers_kept, target.lora, seed);
    checkpoint::restore(&ckpt, &bundle.trainable_params()).map_err(CliError::other)?;

    let norm = NormProfile::default();
    let mut hyp_lines = String::new();
    let mut ref_lines = String::new();
    let mut pairs = Vec::new();
    for u in language.test.iter() {
        let hyp = slamprune::decode::decode_utterance(
            &bundle,
            &u.id,
            &u.frames(),
            plan.beam_size,
            plan.max_decode_len,
        )
        .map_err(CliError::other)?;
        hyp_lines.push_str(&format!("{}\t{}\n", u.id, hyp.text));
        ref_lines.push_str(&format!("{}\t{}\n", u.id, u.transcript));
        pairs.push((
            u.id.clone(),
            normalize(&u.transcript, &norm),
            normalize(&hyp.text, &norm),
        ));
    }
    let scored = corpus_wer(&pairs).map_err(CliError::other)?;
    write_atomic(&config.output_dir.join("hyp.tsv"), hyp_lines.as_bytes())
        .map_err(CliError::other)?;
    write_atomic(&config.output_dir.join("ref.tsv"), ref_lines.as_bytes())
        .map_err(CliError::other)?;
    write_atomic(
        &config.output_dir.join("eval_report.csv"),
        wer_report_csv(&scored).as_bytes(),
    )
    .map_err(CliError::other)?;
    println!(
        "eval: {} {}/{}L/{} WER {:.2}%",
        target.scale,
        target.language,
        target.layers_kept,
        if target.lora { "lora" } else { "base" },
        scored.wer * 100.0
    );
    run_manifest(config, config_path, "eval")
}

// ---------------------------------------------------------------------------
// sweep / analyze
// ---------------------------------------------------------------------------

pub fn cmd_sweep(
    config: &ExperimentConfig,
    config_path: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let plan = config.grid_plan(load_lm_state(config)?, &load_encoder_states(config)?)?;
    let cells = run_grid(&plan, workers).map_err(CliError::other)?;
    let reports = config.output_dir.join("reports");
    write_atomic(
        &reports.join("cells.json"),
        serde_json::to_string_pretty(&cells)
            .map_err(CliError::other)?
            .as_bytes(),
    )
    .map_err(CliError::other)?;
    write_atomic(&reports.join("table2_wer.csv"), table2_csv(&cells).as_bytes())
        .map_err(CliError::other)?;
    for c in &cells {
        println!(
            "sweep: {}/{}/{}L/{} -> {}",
            c.scale,
            c.language,
            c.layers_kept,
            if c.lora_enabled { "lora" } else { "base" },
            if c.failed {
                "FAILED (diverged)".to_string()
            } else {
                format!("WER {:.2}%", c.wer_pct())
            }
        );
    }
    run_manifest(config, config_path, "sweep")
}

fn accounting_for(config: &ExperimentConfig) -> HashMap<String, ScaleAccounting> {
    let lora_overhead = config
        .lora
        .as_ref()
        .map(|l| {
            lora_param_count(
                &LmShape {
                    name: "lm".to_string(),
                    num_layers: config.lm.num_layers,
                    d_model: config.lm.d_model,
                    kv_width: config.lm.d_model,
                },
                l.rank,
                &l.targets,
            ) as i64
        })
        .unwrap_or(0);
    config
        .scales
        .iter()
        .map(|s| {
            let shape = EncoderShape {
                name: s.name.clone(),
                d_model: s.encoder.d_model,
                num_layers: s.encoder.num_layers,
                feature_channels: s.encoder.feature_dim,
                conv_kernel: 3,
                pos_table_len: 1500,
                ffn_mult: s.encoder.ffn_mult,
            };
            (s.name.clone(), ScaleAccounting { shape, lora_overhead })
        })
        .collect()
}

pub fn cmd_analyze(config: &ExperimentConfig, config_path: &Path) -> Result<(), CliError> {
    let reports = config.output_dir.join("reports");
    let cells_path = reports.join("cells.json");
    if !cells_path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "{} not found; run `slamprune sweep` first",
            cells_path.display()
        )));
    }
    let text = std::fs::read_to_string(&cells_path).map_err(CliError::other)?;
    let cells: Vec<ExperimentCell> = serde_json::from_str(&text).map_err(CliError::other)?;
    write_reports(&cells, &accounting_for(config), &reports)
        .map_err(|e| CliError::other(e.to_string()))?;
    for name in [
        "table2_wer.csv",
        "table3_sweetspot.csv",
        "table4_degradation.csv",
        "table5_deltas.csv",
        "table6_worderrors.csv",
        "table8_examples.txt",
    ] {
        println!("analyze: wrote {}", reports.join(name).display());
    }
    run_manifest(config, config_path, "analyze")
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

pub fn cmd_params(out_dir: &Path) -> Result<(), CliError> {
    let shapes = [
        EncoderShape::whisper_small(),
        EncoderShape::whisper_medium(),
        EncoderShape::whisper_large_v2(),
    ];
    let mut reduction = String::new();
    for (i, shape) in shapes.iter().enumerate() {
        let csv = reduction_table_csv(shape, &depth_schedule(shape.num_layers));
        if i == 0 {
            reduction.push_str(&csv);
        } else {
            // Skip the repeated header on subsequent shapes.
            reduction.push_str(csv.split_once('\n').map(|x| x.1).unwrap_or(""));
        }
    }
    write_atomic(&out_dir.join("params_reduction.csv"), reduction.as_bytes())
        .map_err(CliError::other)?;

    // Published sweet-spot rows with their claimed adapter overheads, plus
    // the overhead this codebase measures for r=16 on all attention targets.
    let measured = lora_param_count(
        &LmShape::qwen25_3b(),
        16,
        &slamprune::params::ALL_ATTENTION_TARGETS,
    );
    let mut deltas = String::from(
        "encoder,layers_kept,claimed_lora_overhead,net_delta,measured_lora_overhead_r16\n",
    );
    for (shape, kept, overhead) in [
        (&shapes[0], 10usize, 1_500_000i64),
        (&shapes[1], 22, 1_800_000),
        (&shapes[2], 30, 1_500_000),
    ] {
        deltas.push_str(&format!(
            "{},{},{},{},{}\n",
            shape.name,
            kept,
            overhead,
            net_delta(shape, kept, overhead),
            measured
        ));
    }
    write_atomic(&out_dir.join("params_netdelta.csv"), deltas.as_bytes())
        .map_err(CliError::other)?;
    println!(
        "params: wrote {} and {}",
        out_dir.join("params_reduction.csv").display(),
        out_dir.join("params_netdelta.csv").display()
    );
    Ok(())
}
