//! Synthetic inputs shared by the benchmarks.

use aste_core::corpus::{Embeddings, Sentence, Sentiment, Span, Triplet, Vocabulary};
use aste_core::{RunRng, Tensor};

/// Deterministic pseudo-sentence with one triplet per ~4 tokens.
pub fn synthetic_sentence(rng: &mut RunRng, n: usize) -> Sentence {
    let tokens: Vec<String> = (0..n)
        .map(|i| format!("tok{}", rng.below(50 + i)))
        .collect();
    let mut triplets = Vec::new();
    let mut cursor = 0;
    while cursor + 3 < n {
        triplets.push(Triplet {
            target: Span::new(cursor, cursor),
            sentiment: match rng.below(3) {
                0 => Sentiment::Pos,
                1 => Sentiment::Neg,
                _ => Sentiment::Neu,
            },
            opinion: Span::new(cursor + 2, cursor + 2),
        });
        cursor += 4;
    }
    let raw = format!(
        "{}####[{}]",
        tokens.join(" "),
        triplets
            .iter()
            .map(|t| format!(
                "([{}], [{}], '{}')",
                t.target.start, t.opinion.start, t.sentiment
            ))
            .collect::<Vec<_>>()
            .join(", ")
    );
    aste_core::corpus::parse_line(&raw, 1)
        .expect("synthetic line parses")
        .into_sentence()
        .expect("synthetic gold builds")
        .0
}

pub fn synthetic_corpus(seed: u64, sentences: usize, n: usize) -> Vec<Sentence> {
    let mut rng = RunRng::named(seed, "bench-corpus");
    (0..sentences)
        .map(|_| synthetic_sentence(&mut rng, n))
        .collect()
}

pub fn random_embeddings(corpus: &[Sentence], dim: usize, seed: u64) -> Embeddings {
    let vocab = Vocabulary::build(corpus);
    let mut rng = RunRng::named(seed, "bench-embeddings");
    Embeddings::random(vocab, dim, &mut rng)
}

pub fn random_matrix(rng: &mut RunRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .expect("finite")
}
