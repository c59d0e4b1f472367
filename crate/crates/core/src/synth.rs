//! Deterministic generator of three synthetic "languages" across low/medium/
//! high resource tiers. Each character emits a fixed 80-dim template frame
//! (repeated frames_per_char times) plus Gaussian noise, so word sequences
//! map to feature-frame matrices with something acoustic-like for pruning to
//! destroy gradually.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::tensor::Tensor;
use crate::{mix_seed, salt_str};

pub const FEATURE_DIM: usize = 80;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageProfile {
    pub name: String,
    pub alphabet: Vec<char>,
    pub lexicon: Vec<String>,
    #[serde(default = "default_frames_per_char")]
    pub frames_per_char: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_words_min")]
    pub words_min: usize,
    #[serde(default = "default_words_max")]
    pub words_max: usize,
}

fn default_frames_per_char() -> usize {
    4
}
fn default_noise_sigma() -> f64 {
    0.5
}
fn default_words_min() -> usize {
    2
}
fn default_words_max() -> usize {
    4
}

/// Function words shared across all three lexicons (<= 10% overlap each).
const SHARED_WORDS: [&str; 2] = ["en", "om"];

impl LanguageProfile {
    /// Low-resource analog; the only profile carrying æ/ø/å letters.
    pub fn nordia() -> Self {
        let words = [
            "søren", "æble", "kåre", "børge", "høj", "grå", "blå", "sø",
            "næb", "løve", "måne", "vær", "køn", "små", "træ", "ørn",
            "hætte", "gård", "brød", "frø", "sæl", "våd", "møl", "ræv",
        ];
        Self::build("nordia", &words, "abdefghjklmnoprstuvæøå")
    }

    /// Medium-resource analog.
    pub fn flevia() -> Self {
        let words = [
            "water", "licht", "groen", "huis", "markt", "steen", "wind",
            "kleur", "vogel", "brug", "dorp", "zand", "regen", "boom",
            "veld", "lucht", "zee", "muur", "pad", "kust", "berg", "dal",
            "wolk", "gras",
        ];
        Self::build("flevia", &words, "abcdeghiklmnoprstuvwz")
    }

    /// High-resource analog; includes one apostrophe contraction.
    pub fn anglia() -> Self {
        let words = [
            "don't", "stone", "light", "river", "cloud", "grass", "house",
            "gale", "field", "track", "bird", "shore", "hill", "storm",
            "leaf", "frost", "creek", "plain", "ridge", "marsh", "brook",
            "glade", "moss", "fern",
        ];
        Self::build("anglia", &words, "abcdefghiklmnoprstuvw'")
    }

    fn build(name: &str, words: &[&str], alphabet: &str) -> Self {
        let mut lexicon: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        lexicon.extend(SHARED_WORDS.iter().map(|w| w.to_string()));
        LanguageProfile {
            name: name.to_string(),
            alphabet: alphabet.chars().collect(),
            lexicon,
            frames_per_char: default_frames_per_char(),
            noise_sigma: default_noise_sigma(),
            words_min: default_words_min(),
            words_max: default_words_max(),
        }
    }

    pub fn all_default() -> Vec<LanguageProfile> {
        vec![Self::nordia(), Self::flevia(), Self::anglia()]
    }

    /// Union character set of the given profiles plus space and apostrophe,
    /// sorted for a stable vocabulary order.
    pub fn combined_charset(profiles: &[LanguageProfile]) -> Vec<char> {
        let mut chars: Vec<char> = profiles
            .iter()
            .flat_map(|p| p.alphabet.iter().copied())
            .chain([' ', '\''])
            .collect();
        chars.sort_unstable();
        chars.dedup();
        chars
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl TierSpec {
    pub fn low() -> Self {
        TierSpec {
            train: 250,
            dev: 50,
            test: 100,
        }
    }
    pub fn medium() -> Self {
        TierSpec {
            train: 3200,
            dev: 150,
            test: 200,
        }
    }
    pub fn high() -> Self {
        TierSpec {
            train: 6000,
            dev: 200,
            test: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    pub transcript: String,
    pub frames: Tensor, // [T x 80]
}

impl Utterance {
    pub fn duration_proxy(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Fixed per-character frame template, shared across languages.
pub fn char_template(c: char) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0xc4a7_7e39, c as u64));
    let t = Tensor::randn(vec![1, FEATURE_DIM], 1.0, &mut rng);
    t.data()
}

/// Per-frame character-class labels for a transcript: each character's index
/// in `charset` repeated `frames_per_char` times. Supervision for encoder
/// classification pretraining. Panics on characters outside the charset.
pub fn frame_labels(transcript: &str, frames_per_char: usize, charset: &[char]) -> Vec<usize> {
    transcript
        .chars()
        .flat_map(|c| {
            let class = charset
                .iter()
                .position(|&x| x == c)
                .unwrap_or_else(|| panic!("character {c:?} not in charset"));
            std::iter::repeat(class).take(frames_per_char)
        })
        .collect()
}

/// Noise-free frames for a transcript: each character's template row repeated
/// `frames_per_char` times.
pub fn clean_frames(transcript: &str, frames_per_char: usize) -> Tensor {
    let chars: Vec<char> = transcript.chars().collect();
    let t = chars.len() * frames_per_char;
    let mut data = Vec::with_capacity(t * FEATURE_DIM);
    for c in chars {
        let template = char_template(c);
        for _ in 0..frames_per_char {
            data.extend_from_slice(&template);
        }
    }
    Tensor::from_vec(vec![t, FEATURE_DIM], data).unwrap()
}

fn synth_frames(transcript: &str, profile: &LanguageProfile, rng: &mut ChaCha8Rng) -> Tensor {
    let chars: Vec<char> = transcript.chars().collect();
    let t = chars.len() * profile.frames_per_char;
    let noise = if profile.noise_sigma > 0.0 {
        Tensor::randn(vec![t, FEATURE_DIM], profile.noise_sigma, rng).data()
    } else {
        vec![0.0; t * FEATURE_DIM]
    };
    let mut data = Vec::with_capacity(t * FEATURE_DIM);
    let mut row = 0;
    for c in chars {
        let template = char_template(c);
        for _ in 0..profile.frames_per_char {
            for j in 0..FEATURE_DIM {
                data.push(template[j] + noise[row * FEATURE_DIM + j]);
            }
            row += 1;
        }
    }
    Tensor::from_vec(vec![t, FEATURE_DIM], data).unwrap()
}

fn gen_split(
    profile: &LanguageProfile,
    split: &str,
    count: usize,
    seed: u64,
) -> Vec<Utterance> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, salt_str(&profile.name)), salt_str(split)));
    (0..count)
        .map(|i| {
            let n_words = rng.gen_range(profile.words_min..=profile.words_max);
            let words: Vec<&str> = (0..n_words)
                .map(|_| profile.lexicon[rng.gen_range(0..profile.lexicon.len())].as_str())
                .collect();
            let transcript = words.join(" ");
            let frames = synth_frames(&transcript, profile, &mut rng);
            Utterance {
                id: format!("{}-{}-{:05}", profile.name, split, i),
                language: profile.name.clone(),
                transcript,
                frames,
            }
        })
        .collect()
}

/// Deterministic per seed; split ids are disjoint by construction.
pub fn generate_corpus(profile: &LanguageProfile, tier: &TierSpec, seed: u64) -> CorpusSplits {
    CorpusSplits {
        train: gen_split(profile, "train", tier.train, seed),
        dev: gen_split(profile, "dev", tier.dev, seed),
        test: gen_split(profile, "test", tier.test, seed),
    }
}

/// Retain utterances with min_t <= T <= max_t; error if nothing survives.
pub fn duration_filter(
    utterances: Vec<Utterance>,
    min_t: usize,
    max_t: usize,
) -> Result<Vec<Utterance>, ModelError> {
    assert!(min_t < max_t);
    let kept: Vec<Utterance> = utterances
        .into_iter()
        .filter(|u| {
            let t = u.duration_proxy();
            t >= min_t && t <= max_t
        })
        .collect();
    if kept.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    Ok(kept)
}

// ---------------------------------------------------------------------------
// On-disk formats: frames as LE f32 with an 8-byte (T, 80) header; corpus
// manifest as one tab-separated record per line.
// ---------------------------------------------------------------------------

pub fn write_frames(path: &Path, frames: &Tensor) -> std::io::Result<()> {
    let mut f = File::create(path)?;
    let t = frames.rows() as u32;
    let d = frames.cols() as u32;
    f.write_all(&t.to_le_bytes())?;
    f.write_all(&d.to_le_bytes())?;
    let data = frames.data();
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)
}

pub fn read_frames(path: &Path) -> std::io::Result<Tensor> {
    let mut f = File::open(path)?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header)?;
    let t = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; t * d * 4];
    f.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(vec![t, d], data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// One record per line: `id<TAB>language<TAB>transcript<TAB>frames_file`.
pub fn write_manifest(path: &Path, records: &[(String, String, String, String)]) -> std::io::Result<()> {
    let mut out = String::new();
    for (id, lang, transcript, frames_file) in records {
        out.push_str(&format!("{id}\t{lang}\t{transcript}\t{frames_file}\n"));
    }
    std::fs::write(path, out)
}

pub fn read_manifest(path: &Path) -> std::io::Result<Vec<(String, String, String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, '\t').collect();
        if parts.len() != 4 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("malformed manifest line: {line:?}"),
            ));
        }
        out.push((
            parts[0].to_string(),
            parts[1].to_string(),
            parts[2].to_string(),
            parts[3].to_string(),
        ));
    }
    Ok(out)
}
