//! Benchmark data: parsing, gold label construction, vocabularies,
//! embeddings, batching.
//!
//! Dataset lines look like
//! `low price and performance####[([1], [0], 'POS'), ([3], [0], 'NEG')]`
//! with 0-based token index lists, target first, opinion second.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{RunRng, Tensor};

/// Sentences longer than this are rejected; the table is O(N²·d_h) and the
/// benchmarks stay far below it.
pub const MAX_SENTENCE_LEN: usize = 120;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Data(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Sentiment polarity of a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sentiment {
    Pos,
    Neg,
    Neu,
}

impl Sentiment {
    pub fn parse(s: &str) -> Option<Sentiment> {
        match s {
            "POS" => Some(Sentiment::Pos),
            "NEG" => Some(Sentiment::Neg),
            "NEU" => Some(Sentiment::Neu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Pos => "POS",
            Sentiment::Neg => "NEG",
            Sentiment::Neu => "NEU",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Table cell label. Index order fixes every tie-break: N/A < POS < NEG < NEU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TableLabel {
    Na,
    Pos,
    Neg,
    Neu,
}

pub const TABLE_LABELS: usize = 4;

impl TableLabel {
    pub fn index(self) -> usize {
        match self {
            TableLabel::Na => 0,
            TableLabel::Pos => 1,
            TableLabel::Neg => 2,
            TableLabel::Neu => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<TableLabel> {
        match i {
            0 => Some(TableLabel::Na),
            1 => Some(TableLabel::Pos),
            2 => Some(TableLabel::Neg),
            3 => Some(TableLabel::Neu),
            _ => None,
        }
    }

    pub fn from_sentiment(s: Sentiment) -> TableLabel {
        match s {
            Sentiment::Pos => TableLabel::Pos,
            Sentiment::Neg => TableLabel::Neg,
            Sentiment::Neu => TableLabel::Neu,
        }
    }

    pub fn sentiment(self) -> Option<Sentiment> {
        match self {
            TableLabel::Na => None,
            TableLabel::Pos => Some(Sentiment::Pos),
            TableLabel::Neg => Some(Sentiment::Neg),
            TableLabel::Neu => Some(Sentiment::Neu),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TableLabel::Na => "N/A",
            TableLabel::Pos => "POS",
            TableLabel::Neg => "NEG",
            TableLabel::Neu => "NEU",
        }
    }
}

impl fmt::Display for TableLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// BIO tag. Index order fixes the argmax tie-break:
/// O < B-Target < B-Opinion < I-Target < I-Opinion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BioTag {
    Outside,
    BeginTarget,
    BeginOpinion,
    InsideTarget,
    InsideOpinion,
}

pub const BIO_TAGS: usize = 5;

impl BioTag {
    pub fn index(self) -> usize {
        match self {
            BioTag::Outside => 0,
            BioTag::BeginTarget => 1,
            BioTag::BeginOpinion => 2,
            BioTag::InsideTarget => 3,
            BioTag::InsideOpinion => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<BioTag> {
        match i {
            0 => Some(BioTag::Outside),
            1 => Some(BioTag::BeginTarget),
            2 => Some(BioTag::BeginOpinion),
            3 => Some(BioTag::InsideTarget),
            4 => Some(BioTag::InsideOpinion),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioTag::Outside => "O",
            BioTag::BeginTarget => "B-Target",
            BioTag::BeginOpinion => "B-Opinion",
            BioTag::InsideTarget => "I-Target",
            BioTag::InsideOpinion => "I-Opinion",
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive token index interval, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[allow(clippy::len_without_is_empty)]
impl Span {
    pub fn new(start: usize, end: usize) -> Span {
        assert!(start <= end, "span start after end");
        Span { start, end }
    }

    /// Token count; a span is never empty.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

/// One `(target, sentiment, opinion)` annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub target: Span,
    pub sentiment: Sentiment,
    pub opinion: Span,
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}..{}, {}, {}..{})",
            self.target.start,
            self.target.end,
            self.sentiment,
            self.opinion.start,
            self.opinion.end
        )
    }
}

/// N×N grid of table labels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentimentTable {
    n: usize,
    cells: Vec<TableLabel>,
}

impl SentimentTable {
    pub fn empty(n: usize) -> SentimentTable {
        SentimentTable {
            n,
            cells: vec![TableLabel::Na; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, m: usize, k: usize) -> TableLabel {
        self.cells[m * self.n + k]
    }

    pub fn set(&mut self, m: usize, k: usize, label: TableLabel) {
        self.cells[m * self.n + k] = label;
    }

    pub fn cells(&self) -> &[TableLabel] {
        &self.cells
    }

    pub fn is_symmetric(&self) -> bool {
        for m in 0..self.n {
            for k in 0..m {
                if self.get(m, k) != self.get(k, m) {
                    return false;
                }
            }
        }
        true
    }
}

/// A token sequence with its gold annotations.
#[derive(Debug, Clone)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub triplets: Vec<Triplet>,
    pub gold_tags: Vec<BioTag>,
    pub gold_table: SentimentTable,
}

/// Parser output: tokens and triplets, gold labels not yet constructed.
#[derive(Debug, Clone)]
pub struct ParsedSentence {
    pub line: usize,
    pub tokens: Vec<String>,
    pub triplets: Vec<Triplet>,
}

impl ParsedSentence {
    /// Builds gold tags and the gold table. Returns conflict warnings for
    /// cells claimed by two triplets with different sentiments (later
    /// triplet wins).
    pub fn into_sentence(self) -> Result<(Sentence, Vec<String>), CorpusError> {
        let gold_tags = make_bio_tags(self.tokens.len(), &self.triplets)?;
        let (gold_table, conflicts) = make_sentiment_table(self.tokens.len(), &self.triplets);
        let warnings = conflicts
            .into_iter()
            .map(|c| format!("line {}: {}", self.line, c))
            .collect();
        Ok((
            Sentence {
                tokens: self.tokens,
                triplets: self.triplets,
                gold_tags,
                gold_table,
            },
            warnings,
        ))
    }
}

// ── Dataset parsing ─────────────────────────────────────────────────────

/// Reads a text file tolerating a UTF-8 BOM and CRLF line endings.
pub(crate) fn read_text_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect())
}

/// Parses a dataset file; any malformed line is an error carrying its
/// 1-based line number.
pub fn parse_dataset(path: &Path) -> Result<Vec<ParsedSentence>, CorpusError> {
    let lines = read_text_lines(path)?;
    let mut out = Vec::new();
    for (idx, raw) in lines.iter().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        out.push(parse_line(raw, line).map_err(|msg| CorpusError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        })?);
    }
    Ok(out)
}

/// Per-line dataset loading: lines that fail to parse or validate are
/// collected instead of aborting the file, so imperfectly annotated releases
/// can still be studied. The strict [`parse_dataset`] is the primary path.
#[derive(Debug)]
pub struct LoadOutcome {
    pub sentences: Vec<Sentence>,
    /// `(line, reason)` for skipped lines.
    pub rejected: Vec<(usize, String)>,
    /// Gold-table conflict warnings; the sentence is kept, later triplet won.
    pub warnings: Vec<String>,
}

pub fn load_dataset_lenient(path: &Path) -> Result<LoadOutcome, CorpusError> {
    let lines = read_text_lines(path)?;
    let mut out = LoadOutcome {
        sentences: Vec::new(),
        rejected: Vec::new(),
        warnings: Vec::new(),
    };
    for (idx, raw) in lines.iter().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match parse_line(raw, line) {
            Err(msg) => out.rejected.push((line, msg)),
            Ok(parsed) => match parsed.into_sentence() {
                Err(e) => out.rejected.push((line, e.to_string())),
                Ok((sentence, warnings)) => {
                    out.warnings.extend(warnings);
                    out.sentences.push(sentence);
                }
            },
        }
    }
    Ok(out)
}

/// Parses one `tokens####[triplets]` line.
pub fn parse_line(raw: &str, line: usize) -> Result<ParsedSentence, String> {
    let sep = raw.rfind("####").ok_or("missing #### separator")?;
    let (sentence_part, rest) = raw.split_at(sep);
    let annotation = &rest[4..];

    let tokens: Vec<String> = sentence_part
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect();
    if tokens.is_empty() {
        return Err("empty sentence".to_string());
    }
    if tokens.len() > MAX_SENTENCE_LEN {
        return Err(format!(
            "sentence has {} tokens, limit is {MAX_SENTENCE_LEN}",
            tokens.len()
        ));
    }

    let triplets = parse_triplet_list(annotation.trim(), tokens.len())?;
    Ok(ParsedSentence {
        line,
        tokens,
        triplets,
    })
}

struct Cursor<'a> {
    chars: Vec<char>,
    pos: usize,
    raw: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a str) -> Self {
        Cursor {
            chars: s.chars().collect(),
            pos: 0,
            raw: s,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, want: char) -> Result<(), String> {
        self.skip_ws();
        match self.bump() {
            Some(c) if c == want => Ok(()),
            got => Err(format!(
                "expected '{want}' at position {} of {:?}, found {got:?}",
                self.pos, self.raw
            )),
        }
    }

    fn integer(&mut self) -> Result<usize, String> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(format!("expected an index at position {}", self.pos));
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse()
            .map_err(|_| format!("index {s} out of machine range"))
    }
}

fn parse_triplet_list(s: &str, n_tokens: usize) -> Result<Vec<Triplet>, String> {
    let mut cur = Cursor::new(s);
    cur.expect('[')?;
    let mut triplets = Vec::new();
    cur.skip_ws();
    if cur.peek() == Some(']') {
        cur.bump();
        return Ok(triplets);
    }
    loop {
        triplets.push(parse_triplet(&mut cur, n_tokens)?);
        cur.skip_ws();
        match cur.bump() {
            Some(',') => continue,
            Some(']') => break,
            got => return Err(format!("expected ',' or ']' after triplet, found {got:?}")),
        }
    }
    cur.skip_ws();
    if cur.peek().is_some() {
        return Err("trailing characters after triplet list".to_string());
    }
    Ok(triplets)
}

fn parse_triplet(cur: &mut Cursor, n_tokens: usize) -> Result<Triplet, String> {
    cur.expect('(')?;
    let target = span_from_indices(&parse_index_list(cur)?, n_tokens, "target")?;
    cur.expect(',')?;
    let opinion = span_from_indices(&parse_index_list(cur)?, n_tokens, "opinion")?;
    cur.expect(',')?;
    let sentiment = parse_quoted_sentiment(cur)?;
    cur.expect(')')?;
    if target.overlaps(&opinion) {
        return Err(format!(
            "target {}..{} overlaps opinion {}..{}",
            target.start, target.end, opinion.start, opinion.end
        ));
    }
    Ok(Triplet {
        target,
        sentiment,
        opinion,
    })
}

fn parse_index_list(cur: &mut Cursor) -> Result<Vec<usize>, String> {
    cur.expect('[')?;
    let mut indices = Vec::new();
    cur.skip_ws();
    if cur.peek() == Some(']') {
        cur.bump();
        return Ok(indices);
    }
    loop {
        indices.push(cur.integer()?);
        cur.skip_ws();
        match cur.bump() {
            Some(',') => continue,
            Some(']') => break,
            got => return Err(format!("expected ',' or ']' in index list, found {got:?}")),
        }
    }
    Ok(indices)
}

fn parse_quoted_sentiment(cur: &mut Cursor) -> Result<Sentiment, String> {
    cur.expect('\'')?;
    let mut word = String::new();
    loop {
        match cur.bump() {
            Some('\'') => break,
            Some(c) => word.push(c),
            None => return Err("unterminated sentiment string".to_string()),
        }
    }
    Sentiment::parse(&word).ok_or(format!("unknown sentiment {word:?}"))
}

/// Index lists must be non-empty contiguous ascending runs inside the
/// sentence; spans are intervals.
fn span_from_indices(indices: &[usize], n_tokens: usize, what: &str) -> Result<Span, String> {
    let first = *indices.first().ok_or(format!("empty {what} index list"))?;
    let last = *indices.last().expect("non-empty");
    for w in indices.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(format!(
                "{what} index list {indices:?} is not a contiguous ascending run"
            ));
        }
    }
    if last >= n_tokens {
        return Err(format!(
            "{what} index {last} out of range for a {n_tokens}-token sentence"
        ));
    }
    Ok(Span::new(first, last))
}

// ── Gold label construction ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpanKind {
    Target,
    Opinion,
}

/// BIO tags from triplet spans: B-X at span starts, I-X at continuations,
/// O elsewhere. A token covered by identical spans of the same kind is
/// tagged once; distinct overlapping spans are a data error.
pub fn make_bio_tags(n_tokens: usize, triplets: &[Triplet]) -> Result<Vec<BioTag>, CorpusError> {
    let mut spans: Vec<(Span, SpanKind, usize)> = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        for (span, kind) in [(t.target, SpanKind::Target), (t.opinion, SpanKind::Opinion)] {
            if span.end >= n_tokens {
                return Err(CorpusError::Data(format!(
                    "triplet {t} span exceeds a {n_tokens}-token sentence"
                )));
            }
            if !spans.iter().any(|(s, k, _)| *s == span && *k == kind) {
                spans.push((span, kind, i));
            }
        }
    }
    for (i, (a, _, ta)) in spans.iter().enumerate() {
        for (b, _, tb) in &spans[i + 1..] {
            if a.overlaps(b) {
                return Err(CorpusError::Data(format!(
                    "overlapping spans between triplets {} and {}",
                    triplets[*ta], triplets[*tb]
                )));
            }
        }
    }
    let mut tags = vec![BioTag::Outside; n_tokens];
    for (span, kind, _) in &spans {
        let (begin, inside) = match kind {
            SpanKind::Target => (BioTag::BeginTarget, BioTag::InsideTarget),
            SpanKind::Opinion => (BioTag::BeginOpinion, BioTag::InsideOpinion),
        };
        tags[span.start] = begin;
        tags[span.start + 1..=span.end].fill(inside);
    }
    Ok(tags)
}

/// Gold sentiment table: cell `(m, k)` gets the triplet's sentiment when
/// `(m, k)` lies in the target×opinion cross product, in either orientation;
/// every other cell stays N/A. Later triplets win conflicting cells; each
/// conflict is reported.
pub fn make_sentiment_table(
    n_tokens: usize,
    triplets: &[Triplet],
) -> (SentimentTable, Vec<String>) {
    let mut table = SentimentTable::empty(n_tokens);
    let mut conflicts = Vec::new();
    for t in triplets {
        let label = TableLabel::from_sentiment(t.sentiment);
        for m in t.target.indices() {
            for k in t.opinion.indices() {
                for (a, b) in [(m, k), (k, m)] {
                    let old = table.get(a, b);
                    if old != TableLabel::Na && old != label {
                        conflicts.push(format!(
                            "cell ({a},{b}) relabeled {old} -> {label} by triplet {t}"
                        ));
                    }
                    table.set(a, b, label);
                }
            }
        }
    }
    (table, conflicts)
}

// ── Vocabulary and embeddings ───────────────────────────────────────────

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Token-to-index map; 0 is padding, 1 is unknown, the rest follow corpus
/// order, so a vocabulary is deterministic given its corpus.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build(sentences: &[Sentence]) -> Vocabulary {
        let mut vocab = Vocabulary {
            index: HashMap::new(),
            tokens: vec!["<pad>".to_string(), "<unk>".to_string()],
        };
        for s in sentences {
            for tok in &s.tokens {
                vocab.add(tok);
            }
        }
        vocab
    }

    fn add(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    /// Index for a token; unknown tokens map to [`UNK_INDEX`].
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Frozen embedding matrix aligned with a vocabulary. Never trained.
#[derive(Debug, Clone)]
pub struct Embeddings {
    vocab: Vocabulary,
    matrix: Tensor,
    dim: usize,
}

impl Embeddings {
    /// Loads a text embedding file: one `token v1 .. v_dw` entry per line.
    /// Padding, unknown, and out-of-file tokens get zero rows.
    pub fn load(path: &Path, vocab: Vocabulary, dim: usize) -> Result<Embeddings, CorpusError> {
        let lines = read_text_lines(path)?;
        let mut rows = vec![0.0; vocab.len() * dim];
        for (idx, raw) in lines.iter().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let mut fields = raw.split_whitespace();
            let token = fields.next().expect("non-empty line");
            let values: Vec<&str> = fields.collect();
            if values.len() != dim {
                return Err(CorpusError::Parse {
                    path: path.display().to_string(),
                    line,
                    msg: format!(
                        "expected {dim} values after the token, found {}",
                        values.len()
                    ),
                });
            }
            let slot = match vocab.index.get(token) {
                Some(&i) if i >= 2 => i,
                _ => continue,
            };
            for (j, v) in values.iter().enumerate() {
                rows[slot * dim + j] = v.parse().map_err(|_| CorpusError::Parse {
                    path: path.display().to_string(),
                    line,
                    msg: format!("bad number {v:?}"),
                })?;
            }
        }
        let matrix = Tensor::matrix(vocab.len(), dim, rows)
            .map_err(|e| CorpusError::Data(format!("embedding matrix: {e}")))?;
        Ok(Embeddings { vocab, matrix, dim })
    }

    /// Deterministic random embeddings for fixtures and overfitting tests;
    /// the padding row stays zero.
    pub fn random(vocab: Vocabulary, dim: usize, rng: &mut RunRng) -> Embeddings {
        let mut rows = vec![0.0; vocab.len() * dim];
        for i in 1..vocab.len() {
            for j in 0..dim {
                rows[i * dim + j] = rng.uniform(-1.0, 1.0);
            }
        }
        let matrix = Tensor::matrix(vocab.len(), dim, rows).expect("finite rows");
        Embeddings { vocab, matrix, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Embedding rows for a list of token ids, as an `N×d_w` tensor.
    pub fn rows_for(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.matrix.row(id));
        }
        Tensor::from_op(vec![ids.len(), self.dim], data)
    }
}

// ── Batching ────────────────────────────────────────────────────────────

/// Sentence converted to model inputs.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    /// Index into the source sentence list.
    pub source: usize,
    pub ids: Vec<usize>,
    pub tags: Vec<usize>,
    /// Row-major N² gold cell labels.
    pub table: Vec<usize>,
}

pub fn encode(sentences: &[Sentence], vocab: &Vocabulary) -> Vec<EncodedSentence> {
    sentences
        .iter()
        .enumerate()
        .map(|(source, s)| EncodedSentence {
            source,
            ids: s.tokens.iter().map(|t| vocab.lookup(t)).collect(),
            tags: s.gold_tags.iter().map(|t| t.index()).collect(),
            table: s.gold_table.cells().iter().map(|c| c.index()).collect(),
        })
        .collect()
}

/// One padded batch member.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub source: usize,
    pub len: usize,
    /// Token ids padded with [`PAD_INDEX`] to the batch width.
    pub ids: Vec<usize>,
    /// True at real token positions.
    pub token_mask: Vec<bool>,
    /// True at cells whose row and column are both real, row-major over the
    /// padded width.
    pub cell_mask: Vec<bool>,
    /// Gold tags at true length.
    pub tags: Vec<usize>,
    /// Gold cell labels at true length (row-major N²).
    pub table: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub width: usize,
    pub items: Vec<BatchItem>,
}

/// Shuffles one epoch of sentences and chunks them into padded batches.
pub fn batchify(encoded: &[EncodedSentence], batch_size: usize, rng: &mut RunRng) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| make_batch(encoded, chunk))
        .collect()
}

/// Batches in corpus order, no shuffling; used for evaluation.
pub fn batchify_in_order(encoded: &[EncodedSentence], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let order: Vec<usize> = (0..encoded.len()).collect();
    order
        .chunks(batch_size)
        .map(|chunk| make_batch(encoded, chunk))
        .collect()
}

fn make_batch(encoded: &[EncodedSentence], chunk: &[usize]) -> Batch {
    let width = chunk
        .iter()
        .map(|&i| encoded[i].ids.len())
        .max()
        .unwrap_or(0);
    let items = chunk
        .iter()
        .map(|&i| {
            let e = &encoded[i];
            let len = e.ids.len();
            let mut ids = e.ids.clone();
            ids.resize(width, PAD_INDEX);
            let token_mask: Vec<bool> = (0..width).map(|p| p < len).collect();
            let mut cell_mask = vec![false; width * width];
            for m in 0..len {
                for k in 0..len {
                    cell_mask[m * width + k] = true;
                }
            }
            BatchItem {
                source: e.source,
                len,
                ids,
                token_mask,
                cell_mask,
                tags: e.tags.clone(),
                table: e.table.clone(),
            }
        })
        .collect();
    Batch { width, items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn line(raw: &str) -> ParsedSentence {
        parse_line(raw, 1).unwrap()
    }

    fn span(a: usize, b: usize) -> Span {
        Span::new(a, b)
    }

    fn triplet(t: (usize, usize), s: Sentiment, o: (usize, usize)) -> Triplet {
        Triplet {
            target: span(t.0, t.1),
            sentiment: s,
            opinion: span(o.0, o.1),
        }
    }

    #[test]
    fn parses_the_two_triplet_line() {
        let p = line("low price and performance####[([1], [0], 'POS'), ([3], [0], 'NEG')]");
        assert_eq!(p.tokens, ["low", "price", "and", "performance"]);
        assert_eq!(
            p.triplets,
            vec![
                triplet((1, 1), Sentiment::Pos, (0, 0)),
                triplet((3, 3), Sentiment::Neg, (0, 0)),
            ]
        );
    }

    #[test]
    fn missing_separator_is_a_parse_error() {
        assert!(parse_line("no separator here", 3).is_err());
    }

    #[test]
    fn multi_token_index_list_becomes_a_span() {
        let toks: Vec<String> = (0..18).map(|i| format!("t{i}")).collect();
        let raw = format!("{}####[([16, 17], [15], 'POS')]", toks.join(" "));
        let p = line(&raw);
        assert_eq!(p.triplets[0].target, span(16, 17));
        assert_eq!(p.triplets[0].opinion, span(15, 15));
    }

    #[test]
    fn non_contiguous_index_list_is_rejected() {
        let err = parse_line("a b c d####[([0, 2], [1], 'POS')]", 9).unwrap_err();
        assert!(err.contains("contiguous"), "{err}");
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let err = parse_line("a b####[([0], [5], 'POS')]", 1).unwrap_err();
        assert!(err.contains("out of range"), "{err}");
    }

    #[test]
    fn overlapping_target_and_opinion_is_rejected() {
        assert!(parse_line("a b c####[([0, 1], [1], 'POS')]", 1).is_err());
    }

    #[test]
    fn empty_triplet_list_parses() {
        let p = line("just plain words####[]");
        assert!(p.triplets.is_empty());
    }

    #[test]
    fn over_length_sentence_is_rejected() {
        let toks: Vec<String> = (0..121).map(|i| format!("t{i}")).collect();
        let raw = format!("{}####[]", toks.join(" "));
        let err = parse_line(&raw, 1).unwrap_err();
        assert!(err.contains("121"), "{err}");
    }

    #[test]
    fn bio_tags_for_the_figure_sentence() {
        // "low price and performance", opinion low, targets price/performance
        let triplets = vec![
            triplet((1, 1), Sentiment::Pos, (0, 0)),
            triplet((3, 3), Sentiment::Neg, (0, 0)),
        ];
        let tags = make_bio_tags(4, &triplets).unwrap();
        assert_eq!(
            tags,
            vec![
                BioTag::BeginOpinion,
                BioTag::BeginTarget,
                BioTag::Outside,
                BioTag::BeginTarget,
            ]
        );
    }

    #[test]
    fn bio_tags_empty_triplets_all_outside() {
        assert_eq!(make_bio_tags(3, &[]).unwrap(), vec![BioTag::Outside; 3]);
    }

    #[test]
    fn bio_tags_mark_span_continuations() {
        let triplets = vec![triplet((16, 17), Sentiment::Pos, (15, 15))];
        let tags = make_bio_tags(18, &triplets).unwrap();
        assert_eq!(tags[16], BioTag::BeginTarget);
        assert_eq!(tags[17], BioTag::InsideTarget);
        assert_eq!(tags[15], BioTag::BeginOpinion);
        assert_eq!(tags[14], BioTag::Outside);
    }

    #[test]
    fn bio_tags_reject_overlapping_spans_naming_triplets() {
        let triplets = vec![
            triplet((0, 1), Sentiment::Pos, (3, 3)),
            triplet((1, 2), Sentiment::Neg, (4, 4)),
        ];
        let err = make_bio_tags(5, &triplets).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("(0..1, POS, 3..3)") && msg.contains("(1..2, NEG, 4..4)"),
            "{msg}"
        );
    }

    #[test]
    fn duplicate_spans_are_tagged_once() {
        let triplets = vec![
            triplet((1, 1), Sentiment::Pos, (0, 0)),
            triplet((1, 1), Sentiment::Pos, (2, 2)),
        ];
        let tags = make_bio_tags(3, &triplets).unwrap();
        assert_eq!(tags[1], BioTag::BeginTarget);
    }

    /// Independent oracle for the gold table: test every cell against the
    /// C-set membership definition per triplet, first match in file order
    /// overridden by later ones.
    fn brute_force_table(n: usize, triplets: &[Triplet]) -> SentimentTable {
        let mut table = SentimentTable::empty(n);
        for m in 0..n {
            for k in 0..n {
                let mut label = TableLabel::Na;
                for t in triplets {
                    let hit = (t.target.contains(m) && t.opinion.contains(k))
                        || (t.opinion.contains(m) && t.target.contains(k));
                    if hit {
                        label = TableLabel::from_sentiment(t.sentiment);
                    }
                }
                table.set(m, k, label);
            }
        }
        table
    }

    #[test]
    fn figure_sentence_table_matches_hand_derivation() {
        let triplets = vec![
            triplet((1, 1), Sentiment::Pos, (0, 0)),
            triplet((3, 3), Sentiment::Neg, (0, 0)),
        ];
        let (table, warnings) = make_sentiment_table(4, &triplets);
        assert!(warnings.is_empty());
        assert_eq!(table.get(1, 0), TableLabel::Pos);
        assert_eq!(table.get(0, 1), TableLabel::Pos);
        assert_eq!(table.get(3, 0), TableLabel::Neg);
        assert_eq!(table.get(0, 3), TableLabel::Neg);
        let labeled = table
            .cells()
            .iter()
            .filter(|c| **c != TableLabel::Na)
            .count();
        assert_eq!(labeled, 4);
        assert_eq!(table, brute_force_table(4, &triplets));
    }

    #[test]
    fn empty_triplets_all_na() {
        let (table, _) = make_sentiment_table(3, &[]);
        assert!(table.cells().iter().all(|c| *c == TableLabel::Na));
    }

    #[test]
    fn cset_size_is_twice_the_span_product() {
        let triplets = vec![triplet((2, 3), Sentiment::Neu, (0, 0))];
        let (table, _) = make_sentiment_table(5, &triplets);
        let labeled = table
            .cells()
            .iter()
            .filter(|c| **c != TableLabel::Na)
            .count();
        assert_eq!(labeled, 2 * 2);
        assert_eq!(table, brute_force_table(5, &triplets));
    }

    #[test]
    fn later_triplet_wins_conflicting_cells_with_warning() {
        // both triplets claim cell (0, 2) with different sentiments
        let triplets = vec![
            triplet((0, 0), Sentiment::Pos, (2, 2)),
            triplet((0, 1), Sentiment::Neg, (2, 3)),
        ];
        let (table, warnings) = make_sentiment_table(4, &triplets);
        assert_eq!(table.get(0, 2), TableLabel::Neg);
        assert!(!warnings.is_empty());
        assert_eq!(table, brute_force_table(4, &triplets));
        assert!(table.is_symmetric());
    }

    fn random_triplets(rng: &mut RunRng, n: usize, max_triplets: usize) -> Vec<Triplet> {
        let count = rng.below(max_triplets + 1);
        let mut out = Vec::new();
        for _ in 0..count {
            // random disjoint target/opinion spans
            for _attempt in 0..20 {
                let a = rng.below(n);
                let b = (a + rng.below(3)).min(n - 1);
                let c = rng.below(n);
                let d = (c + rng.below(3)).min(n - 1);
                let target = span(a, b);
                let opinion = span(c, d);
                if !target.overlaps(&opinion) {
                    let sentiment = match rng.below(3) {
                        0 => Sentiment::Pos,
                        1 => Sentiment::Neg,
                        _ => Sentiment::Neu,
                    };
                    out.push(Triplet {
                        target,
                        sentiment,
                        opinion,
                    });
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn thousand_random_sentences_match_brute_force_and_stay_symmetric() {
        let mut rng = RunRng::named(11, "table-oracle");
        for _ in 0..1000 {
            let n = 1 + rng.below(12);
            let triplets = random_triplets(&mut rng, n, 4);
            let (table, _) = make_sentiment_table(n, &triplets);
            assert_eq!(table, brute_force_table(n, &triplets));
            assert!(table.is_symmetric());
        }
    }

    #[test]
    fn crlf_and_bom_files_parse_cleanly() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(
            file,
            "\u{feff}low price and performance####[([1], [0], 'POS')]\r\ndecent price####[([1], [0], 'NEU')]\r\n"
        )
        .unwrap();
        file.flush().unwrap();
        let parsed = parse_dataset(file.path()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].tokens[0], "low");
        assert_eq!(parsed[1].tokens, ["decent", "price"]);
        assert_eq!(parsed[1].triplets.len(), 1);
    }

    #[test]
    fn crlf_embedding_files_load() {
        let sentences: Vec<Sentence> = ["hi there####[]"]
            .iter()
            .map(|raw| line(raw).into_sentence().unwrap().0)
            .collect();
        let vocab = Vocabulary::build(&sentences);
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write!(file, "hi 1.0 2.0\r\nthere -1.0 0.5\r\n").unwrap();
        file.flush().unwrap();
        let emb = Embeddings::load(file.path(), vocab, 2).unwrap();
        assert_eq!(emb.matrix().row(emb.vocab().lookup("there")), &[-1.0, 0.5]);
    }

    #[test]
    fn vocabulary_is_deterministic_and_reserves_special_indices() {
        let sentences: Vec<Sentence> = ["b a####[]", "a c####[]"]
            .iter()
            .map(|raw| line(raw).into_sentence().unwrap().0)
            .collect();
        let vocab = Vocabulary::build(&sentences);
        assert_eq!(vocab.lookup("b"), 2);
        assert_eq!(vocab.lookup("a"), 3);
        assert_eq!(vocab.lookup("c"), 4);
        assert_eq!(vocab.lookup("zzz"), UNK_INDEX);
        assert_eq!(vocab.len(), 5);
    }

    #[test]
    fn embeddings_copy_rows_and_zero_the_rest() {
        let sentences: Vec<Sentence> = ["hello world####[]"]
            .iter()
            .map(|raw| line(raw).into_sentence().unwrap().0)
            .collect();
        let vocab = Vocabulary::build(&sentences);
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "hello 0.25 -1.5 3.0").unwrap();
        writeln!(file, "unrelated 9.0 9.0 9.0").unwrap();
        file.flush().unwrap();

        let emb = Embeddings::load(file.path(), vocab, 3).unwrap();
        assert_eq!(
            emb.matrix().row(emb.vocab().lookup("hello")),
            &[0.25, -1.5, 3.0]
        );
        assert_eq!(
            emb.matrix().row(emb.vocab().lookup("world")),
            &[0.0, 0.0, 0.0]
        );
        assert_eq!(emb.matrix().row(PAD_INDEX), &[0.0, 0.0, 0.0]);
        assert_eq!(emb.matrix().row(UNK_INDEX), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_dimension_mismatch_reports_the_line() {
        let sentences: Vec<Sentence> = ["a####[]"]
            .iter()
            .map(|raw| line(raw).into_sentence().unwrap().0)
            .collect();
        let vocab = Vocabulary::build(&sentences);
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "a 1.0 2.0 3.0").unwrap();
        writeln!(file, "b 1.0 2.0").unwrap();
        file.flush().unwrap();
        let err = Embeddings::load(file.path(), vocab, 3).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    fn toy_encoded(lens: &[usize]) -> Vec<EncodedSentence> {
        lens.iter()
            .enumerate()
            .map(|(i, &len)| EncodedSentence {
                source: i,
                ids: vec![2; len],
                tags: vec![0; len],
                table: vec![0; len * len],
            })
            .collect()
    }

    #[test]
    fn batchify_splits_seven_into_six_and_one() {
        let encoded = toy_encoded(&[3; 7]);
        let mut rng = RunRng::named(0, "shuffle");
        let batches = batchify(&encoded, 6, &mut rng);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].items.len(), 6);
        assert_eq!(batches[1].items.len(), 1);
    }

    #[test]
    fn batchify_pads_to_batch_width_with_correct_masks() {
        let encoded = toy_encoded(&[3, 5]);
        let batches = batchify_in_order(&encoded, 2);
        let batch = &batches[0];
        assert_eq!(batch.width, 5);
        let sums: Vec<usize> = batch
            .items
            .iter()
            .map(|it| it.token_mask.iter().filter(|m| **m).count())
            .collect();
        assert_eq!(sums, vec![3, 5]);
        let cell_sums: Vec<usize> = batch
            .items
            .iter()
            .map(|it| it.cell_mask.iter().filter(|m| **m).count())
            .collect();
        assert_eq!(cell_sums, vec![9, 25]);
        assert_eq!(batch.items[0].ids.len(), 5);
        assert_eq!(&batch.items[0].ids[3..], &[PAD_INDEX, PAD_INDEX]);
    }

    #[test]
    fn batch_shuffle_is_seed_deterministic() {
        let encoded = toy_encoded(&[2; 20]);
        let order = |seed| {
            let mut rng = RunRng::named(seed, "shuffle");
            batchify(&encoded, 6, &mut rng)
                .iter()
                .flat_map(|b| b.items.iter().map(|i| i.source))
                .collect::<Vec<_>>()
        };
        assert_eq!(order(5), order(5));
        assert_ne!(order(5), order(6));
    }
}
