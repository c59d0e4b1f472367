//! Benchmarks for the three hot paths of a sweep cell: word alignment,
//! frozen-encoder forwarding, and beam-search decoding.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slamprune::decode::{beam_decode, log_softmax, TokenScorer};
use slamprune::encoder::{EncoderConfig, EncoderWeights, PruneSpec};
use slamprune::error::ModelError;
use slamprune::eval::align;
use slamprune::tensor::Tensor;

fn bench_align(c: &mut Criterion) {
    const WORDS: [&str; 8] = ["a", "b", "c", "d", "ab", "ba", "cd", "dc"];
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11);
    let mut seq = |n: usize| -> Vec<&'static str> {
        (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect()
    };
    let reference = seq(20);
    let hypothesis = seq(18);
    c.bench_function("align_20x18_words", |b| {
        b.iter(|| align(&reference, &hypothesis).unwrap())
    });
}

fn bench_encoder(c: &mut Criterion) {
    let config = EncoderConfig {
        num_layers: 8,
        d_model: 32,
        num_heads: 4,
        ffn_mult: 4,
        feature_dim: 80,
    };
    let weights = EncoderWeights::init(&config, 0xbe);
    let mut rng = ChaCha8Rng::seed_from_u64(0xf0);
    let frames = Tensor::randn(vec![48, 80], 1.0, &mut rng);
    c.bench_function("encoder_forward_8l_48f", |b| {
        b.iter(|| weights.encode(&frames, PruneSpec { keep_layers: 8 }).unwrap())
    });
    c.bench_function("encoder_forward_6l_48f", |b| {
        b.iter(|| weights.encode(&frames, PruneSpec { keep_layers: 6 }).unwrap())
    });
}

/// Table-driven scorer so the benchmark isolates beam bookkeeping from
/// network forwarding.
struct TableScorer {
    rows: Vec<Vec<f64>>,
}

impl TokenScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.rows[0].len()
    }
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        Ok(self.rows[prefix.len().min(self.rows.len() - 1)].clone())
    }
}

fn bench_beam(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdec0);
    let vocab = 32;
    let rows: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
            log_softmax(&logits)
        })
        .collect();
    let scorer = TableScorer { rows };
    c.bench_function("beam_decode_b2_v32", |b| {
        b.iter(|| beam_decode(&scorer, 2, 63).unwrap())
    });
    c.bench_function("beam_decode_b4_v32", |b| {
        b.iter(|| beam_decode(&scorer, 4, 63).unwrap())
    });
}

criterion_group!(benches, bench_align, bench_encoder, bench_beam);
criterion_main!(benches);
