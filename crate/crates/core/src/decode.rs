//! Model outputs to triplets: BIO span extraction, then sentiment
//! aggregation over the cells covered by each candidate pair.

use thiserror::Error;

use crate::corpus::{BioTag, Span, TableLabel, Triplet, TABLE_LABELS};
use crate::model::SentenceLogits;
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("target {target:?} overlaps opinion {opinion:?}")]
    OverlappingSpans { target: Span, opinion: Span },
    #[error("table with {cells} cells is not square")]
    NotSquare { cells: usize },
}

/// Decoded output for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub targets: Vec<Span>,
    pub opinions: Vec<Span>,
    pub triplets: Vec<Triplet>,
}

/// Maximal BIO runs, relaxed: an I-X with no live span of type X opens a new
/// span, so partial spans from imperfect models are still recovered.
pub fn extract_spans(tags: &[BioTag]) -> (Vec<Span>, Vec<Span>) {
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Target,
        Opinion,
    }
    let mut targets = Vec::new();
    let mut opinions = Vec::new();
    let mut open: Option<(Kind, usize, usize)> = None;
    let close = |open: &mut Option<(Kind, usize, usize)>,
                 targets: &mut Vec<Span>,
                 opinions: &mut Vec<Span>| {
        if let Some((kind, start, end)) = open.take() {
            let span = Span::new(start, end);
            match kind {
                Kind::Target => targets.push(span),
                Kind::Opinion => opinions.push(span),
            }
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            BioTag::Outside => close(&mut open, &mut targets, &mut opinions),
            BioTag::BeginTarget => {
                close(&mut open, &mut targets, &mut opinions);
                open = Some((Kind::Target, i, i));
            }
            BioTag::BeginOpinion => {
                close(&mut open, &mut targets, &mut opinions);
                open = Some((Kind::Opinion, i, i));
            }
            BioTag::InsideTarget => match &mut open {
                Some((Kind::Target, _, end)) => *end = i,
                _ => {
                    close(&mut open, &mut targets, &mut opinions);
                    open = Some((Kind::Target, i, i));
                }
            },
            BioTag::InsideOpinion => match &mut open {
                Some((Kind::Opinion, _, end)) => *end = i,
                _ => {
                    close(&mut open, &mut targets, &mut opinions);
                    open = Some((Kind::Opinion, i, i));
                }
            },
        }
    }
    close(&mut open, &mut targets, &mut opinions);
    (targets, opinions)
}

/// Sums the four label probabilities over every cell covered by the pair in
/// both orientations and takes the argmax; N/A competes and suppresses the
/// pair. Ties resolve to the lowest label index (N/A < POS < NEG < NEU).
pub fn aggregate_sentiment(
    table_probs: &Tensor,
    target: Span,
    opinion: Span,
) -> Result<TableLabel, DecodeError> {
    if target.overlaps(&opinion) {
        return Err(DecodeError::OverlappingSpans { target, opinion });
    }
    let n = side_of(table_probs)?;
    let mut sums = [0.0f64; TABLE_LABELS];
    let mut add_cell = |m: usize, k: usize| {
        let row = table_probs.row(m * n + k);
        for (s, p) in sums.iter_mut().zip(row) {
            *s += p;
        }
    };
    for m in target.indices() {
        for k in opinion.indices() {
            add_cell(m, k);
            add_cell(k, m);
        }
    }
    let mut best = 0;
    for (i, s) in sums.iter().enumerate() {
        if *s > sums[best] {
            best = i;
        }
    }
    Ok(TableLabel::from_index(best).expect("index in range"))
}

/// Full decode: per-token argmax tags, relaxed span extraction, then one
/// aggregated sentiment per (target, opinion) pair; a triplet is emitted iff
/// the winning label is not N/A.
pub fn decode_triplets(logits: &SentenceLogits) -> Prediction {
    let n = logits.seq.shape()[0];
    let tags: Vec<BioTag> = (0..n)
        .map(|i| BioTag::from_index(logits.seq.argmax_row(i)).expect("5-way head"))
        .collect();
    decode_from_tags(&tags, &logits.table.softmax_rows())
}

/// Decode from already-chosen tags and per-cell probability rows.
pub fn decode_from_tags(tags: &[BioTag], table_probs: &Tensor) -> Prediction {
    let (targets, opinions) = extract_spans(tags);
    let mut triplets = Vec::new();
    for &target in &targets {
        for &opinion in &opinions {
            let label = aggregate_sentiment(table_probs, target, opinion)
                .expect("spans from one tag sequence never overlap");
            if let Some(sentiment) = label.sentiment() {
                triplets.push(Triplet {
                    target,
                    sentiment,
                    opinion,
                });
            }
        }
    }
    Prediction {
        targets,
        opinions,
        triplets,
    }
}

/// Decodes every sentence with the model in inference mode.
pub fn predict_sentences(
    model: &crate::model::Model,
    embeddings: &crate::corpus::Embeddings,
    sentences: &[crate::corpus::Sentence],
) -> Result<Vec<Prediction>, crate::model::ModelError> {
    let vocab = embeddings.vocab();
    sentences
        .iter()
        .map(|s| {
            let ids: Vec<usize> = s.tokens.iter().map(|t| vocab.lookup(t)).collect();
            let logits = model.infer(embeddings, &ids)?;
            Ok(decode_triplets(&logits))
        })
        .collect()
}

/// One-hot logits from gold labels; decoding these must reproduce the gold
/// triplets for any conflict-free sentence.
pub fn oracle_logits(tags: &[BioTag], table: &crate::corpus::SentimentTable) -> SentenceLogits {
    let n = tags.len();
    let mut seq = vec![0.0; n * crate::corpus::BIO_TAGS];
    for (i, t) in tags.iter().enumerate() {
        seq[i * crate::corpus::BIO_TAGS + t.index()] = 1.0;
    }
    let mut tab = vec![0.0; n * n * TABLE_LABELS];
    for m in 0..n {
        for k in 0..n {
            tab[(m * n + k) * TABLE_LABELS + table.get(m, k).index()] = 1.0;
        }
    }
    SentenceLogits {
        seq: Tensor::matrix(n, crate::corpus::BIO_TAGS, seq).expect("finite"),
        table: Tensor::matrix(n * n, TABLE_LABELS, tab).expect("finite"),
    }
}

/// Serializes a prediction in the dataset line format, so predictions can be
/// diffed against gold files and re-parsed.
pub fn format_prediction_line(tokens: &[String], prediction: &Prediction) -> String {
    let mut line = tokens.join(" ");
    line.push_str("####[");
    for (i, t) in prediction.triplets.iter().enumerate() {
        if i > 0 {
            line.push_str(", ");
        }
        line.push('(');
        push_index_list(&mut line, t.target);
        line.push_str(", ");
        push_index_list(&mut line, t.opinion);
        line.push_str(", '");
        line.push_str(t.sentiment.as_str());
        line.push_str("')");
    }
    line.push(']');
    line
}

fn push_index_list(out: &mut String, span: Span) {
    out.push('[');
    for (i, idx) in span.indices().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&idx.to_string());
    }
    out.push(']');
}

fn side_of(table_probs: &Tensor) -> Result<usize, DecodeError> {
    let cells = table_probs.shape()[0];
    let n = (cells as f64).sqrt().round() as usize;
    if n * n != cells {
        return Err(DecodeError::NotSquare { cells });
    }
    Ok(n)
}
