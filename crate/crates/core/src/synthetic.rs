//! Seeded synthetic sentences and batches for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Batch, Sentence, PAD_ID};
use crate::model::ModelConfig;

const PERSONS: &[&str] = &["anna", "boris", "clara", "dmitri", "elena", "farid"];
const SURNAMES: &[&str] = &["ivanova", "smith", "okafor", "tanaka"];
const PLACES: &[&str] = &["paris", "lagos", "oslo", "lima", "kyoto", "quito"];
const VERBS: &[&str] = &["visited", "left", "praised", "called"];
const FILLER: &[&str] = &["the", "team", "said", "today", "again", "then"];

/// Labeled sentences over a small lexicon with `PER` (one or two tokens) and
/// `LOC` (one token) mentions, in BIO.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_sentence(&mut rng)).collect()
}

fn synthetic_sentence(rng: &mut impl Rng) -> Sentence {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut push = |t: &str, l: &str| {
        tokens.push(t.to_string());
        labels.push(l.to_string());
    };
    if rng.gen_bool(0.3) {
        push(FILLER[rng.gen_range(0..FILLER.len())], "O");
    }
    push(PERSONS.choose(rng).expect("lexicon"), "B-PER");
    if rng.gen_bool(0.4) {
        push(SURNAMES.choose(rng).expect("lexicon"), "I-PER");
    }
    push(VERBS.choose(rng).expect("lexicon"), "O");
    push(PLACES.choose(rng).expect("lexicon"), "B-LOC");
    if rng.gen_bool(0.5) {
        push(FILLER.choose(rng).expect("lexicon"), "O");
    }
    Sentence::new(tokens, labels)
}

/// Random labeled batch of `batch` sentences, each `seq_len` tokens long,
/// with ids valid for `config`.
pub fn random_batch(config: &ModelConfig, batch: usize, seq_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_max = 8;
    let rows = batch * seq_len;
    let word_ids = (0..rows).map(|_| rng.gen_range(1..config.num_words.max(2))).collect();
    let char_lengths: Vec<usize> = (0..rows).map(|_| rng.gen_range(1..=c_max)).collect();
    let mut char_ids = vec![PAD_ID; rows * c_max];
    for (r, &n) in char_lengths.iter().enumerate() {
        for c in 0..n {
            char_ids[r * c_max + c] = rng.gen_range(1..config.num_chars.max(2));
        }
    }
    let label_ids = (0..rows).map(|_| rng.gen_range(0..config.num_labels())).collect();
    Batch {
        word_ids,
        char_ids,
        char_lengths,
        label_ids: Some(label_ids),
        mask: vec![true; rows],
        lengths: vec![seq_len; batch],
        t_max: seq_len,
        c_max,
    }
}
