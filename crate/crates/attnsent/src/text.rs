//! Text pipeline: normalization with URL/email/phone sentinels, whitespace
//! and punctuation tokenization, frequency-thresholded vocabulary, and
//! subword-hashed embedding composition so every token stays embeddable.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Class labels. Index order is fixed: negative is class 0, positive class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "pos")]
    Positive,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(index: usize) -> Result<Label> {
        match index {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(Error::InvalidInput(format!("class index {other} out of range"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Negative => "neg",
            Label::Positive => "pos",
        })
    }
}

/// One corpus record. The label is absent for inference-only input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// Reads a line-delimited JSON corpus, one document per line.
/// Blank lines are skipped; malformed lines fail with their line number.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for doc in docs {
        let line = serde_json::to_string(doc)
            .map_err(|e| Error::Data(format!("serializing document: {e}")))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?://|www\.)[^\s]+").unwrap())
}

fn email_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}").unwrap())
}

// Vietnamese numbers: 9 to 11 digits starting with 0, or +84 replacing the
// leading zero. Only contiguous digit runs are recognized.
fn phone_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\+84\d{8,9}\b|\b0\d{8,10}\b").unwrap())
}

/// Normalizes raw text: unicode NFC, URL/email/phone sentinels, whitespace
/// runs collapsed to single spaces. Casing is preserved. Idempotent and total.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let replaced = url_re().replace_all(&composed, "urlObj");
    let replaced = email_re().replace_all(&replaced, "mailObj");
    let replaced = phone_re().replace_all(&replaced, "phonenumObj");
    let mut out = String::with_capacity(replaced.len());
    for (i, chunk) in replaced.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(chunk);
    }
    out
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits normalized text into tokens: whitespace-separated words with every
/// punctuation character detached as its own token. Underscores bind, so
/// pre-segmented compounds like "hà_nội" pass through atomically.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for chunk in text.split_whitespace() {
        for c in chunk.chars() {
            if is_token_char(c) {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    tokens
}

/// Splits text into sentences at '.', '!', '?' and newlines. Terminators stay
/// attached; empty segments are dropped.
pub fn sentence_split(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '.' | '!' | '?' => {
                current.push(c);
                flush_sentence(&mut current, &mut sentences);
            }
            '\n' => flush_sentence(&mut current, &mut sentences),
            _ => current.push(c),
        }
    }
    flush_sentence(&mut current, &mut sentences);
    sentences
}

fn flush_sentence(current: &mut String, out: &mut Vec<String>) {
    let trimmed = current.trim();
    // A bare terminator is not a sentence.
    if trimmed.chars().any(is_token_char) {
        out.push(trimmed.to_string());
    }
    current.clear();
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the byte string; fixed constants keep hash bucketing
/// stable across runs and platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub const DEFAULT_MIN_COUNT: u64 = 5;
pub const DEFAULT_BUCKET_COUNT: usize = 1 << 20;
pub const DEFAULT_NGRAM_MIN: usize = 3;
pub const DEFAULT_NGRAM_MAX: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabOptions {
    pub min_count: u64,
    pub bucket_count: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            min_count: DEFAULT_MIN_COUNT,
            bucket_count: DEFAULT_BUCKET_COUNT,
            ngram_min: DEFAULT_NGRAM_MIN,
            ngram_max: DEFAULT_NGRAM_MAX,
        }
    }
}

impl VocabOptions {
    fn validate(&self) -> Result<()> {
        if self.bucket_count == 0 {
            return Err(Error::Config("bucket count must be positive".into()));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!(
                "invalid n-gram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }
}

/// Frequency-thresholded word list with dense, deterministic ids
/// (count descending, then lexicographic), plus the subword hashing scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    options: VocabOptions,
}

impl Vocabulary {
    /// Counts tokens over the corpus and retains words seen at least
    /// `min_count` times. Errors if nothing survives the threshold.
    pub fn build<'a, I, D>(docs: I, options: VocabOptions) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a str>,
    {
        options.validate()?;
        let mut counts: HashMap<String, u64> = HashMap::new();
        for doc in docs {
            for token in doc {
                *counts.entry(token.to_string()).or_insert(0) += 1;
            }
        }
        let mut retained: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= options.min_count)
            .collect();
        if retained.is_empty() {
            return Err(Error::Data(format!(
                "no word reached min_count {}; vocabulary would be empty",
                options.min_count
            )));
        }
        retained.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Vocabulary::from_entries(retained, options))
    }

    /// Rebuilds a vocabulary from (word, count) pairs already in id order,
    /// as stored in a model file.
    pub fn from_entries(entries: Vec<(String, u64)>, options: VocabOptions) -> Vocabulary {
        let mut words = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (id, (word, count)) in entries.into_iter().enumerate() {
            index.insert(word.clone(), id as u32);
            words.push(word);
            counts.push(count);
        }
        Vocabulary { words, counts, index, options }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn options(&self) -> &VocabOptions {
        &self.options
    }

    pub fn bucket_count(&self) -> usize {
        self.options.bucket_count
    }

    /// Iterates (word, count) in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> + '_ {
        self.words
            .iter()
            .zip(&self.counts)
            .map(|(w, &c)| (w.as_str(), c))
    }

    /// Resolves a token to its word id (if retained) and its hashed character
    /// n-gram buckets over the boundary-marked form `<token>`. Total: every
    /// unicode token resolves, unknown words through n-grams alone.
    pub fn encode_token(&self, token: &str) -> TokenRef {
        let marked: Vec<char> = std::iter::once('<')
            .chain(token.chars())
            .chain(std::iter::once('>'))
            .collect();
        let mut buckets = Vec::new();
        let mut buf = String::new();
        for n in self.options.ngram_min..=self.options.ngram_max {
            if n > marked.len() {
                break;
            }
            for window in marked.windows(n) {
                buf.clear();
                buf.extend(window.iter());
                buckets.push((fnv1a64(buf.as_bytes()) % self.options.bucket_count as u64) as u32);
            }
        }
        TokenRef { word_id: self.word_id(token), ngram_buckets: buckets }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenRef> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }
}

/// A token resolved against a vocabulary: optional word id plus hashed
/// n-gram bucket ids (duplicates kept; the mean weights them by multiplicity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRef {
    pub word_id: Option<u32>,
    pub ngram_buckets: Vec<u32>,
}

impl TokenRef {
    pub fn contributor_count(&self) -> usize {
        usize::from(self.word_id.is_some()) + self.ngram_buckets.len()
    }
}

/// Trainable word vectors plus hashed n-gram bucket vectors. A token embeds
/// as the mean of its word vector (when in vocabulary) and its bucket
/// vectors, so out-of-vocabulary tokens still compose a representation.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub word: Matrix,
    pub ngram: Matrix,
}

impl EmbeddingTable {
    pub fn new(word: Matrix, ngram: Matrix) -> Result<EmbeddingTable> {
        if word.cols() != ngram.cols() {
            return Err(Error::shape("embedding_table", word.shape(), ngram.shape()));
        }
        Ok(EmbeddingTable { word, ngram })
    }

    /// Uniform init in ±1/√d_emb for every row.
    pub fn init<R: Rng>(vocab_size: usize, bucket_count: usize, d_emb: usize, rng: &mut R) -> Result<EmbeddingTable> {
        let bound = 1.0 / (d_emb as f64).sqrt();
        let mut fill = |rows: usize| -> Result<Matrix> {
            let data: Vec<f64> = (0..rows * d_emb).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix::new(rows, d_emb, data)
        };
        let word = fill(vocab_size)?;
        let ngram = fill(bucket_count)?;
        Ok(EmbeddingTable { word, ngram })
    }

    pub fn d_emb(&self) -> usize {
        self.word.cols()
    }

    /// Embeds a token sequence into an n×d_emb matrix. A token with no
    /// contributors (only possible for the empty string) embeds as zero.
    pub fn embed(&self, tokens: &[TokenRef]) -> Result<(Matrix, EmbedCache)> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty token sequence".into()));
        }
        let d = self.d_emb();
        let mut data = vec![0.0; tokens.len() * d];
        for (i, token) in tokens.iter().enumerate() {
            let row = &mut data[i * d..(i + 1) * d];
            let count = token.contributor_count();
            if count == 0 {
                continue;
            }
            if let Some(id) = token.word_id {
                if id as usize >= self.word.rows() {
                    return Err(Error::InvalidInput(format!(
                        "word id {id} outside table of {} rows",
                        self.word.rows()
                    )));
                }
                for (acc, &v) in row.iter_mut().zip(self.word.row(id as usize)) {
                    *acc += v;
                }
            }
            for &bucket in &token.ngram_buckets {
                if bucket as usize >= self.ngram.rows() {
                    return Err(Error::InvalidInput(format!(
                        "n-gram bucket {bucket} outside table of {} rows",
                        self.ngram.rows()
                    )));
                }
                for (acc, &v) in row.iter_mut().zip(self.ngram.row(bucket as usize)) {
                    *acc += v;
                }
            }
            let inv = 1.0 / count as f64;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let output = Matrix::new(tokens.len(), d, data)?;
        Ok((output, EmbedCache { tokens: tokens.to_vec() }))
    }
}

/// Token refs captured at embed time; backward fans each output row's
/// gradient back onto the rows that contributed to it.
pub struct EmbedCache {
    tokens: Vec<TokenRef>,
}

/// Sparse embedding gradients keyed by row id. Only touched rows appear.
#[derive(Debug, Default)]
pub struct SparseGrads {
    pub word: HashMap<u32, Vec<f64>>,
    pub ngram: HashMap<u32, Vec<f64>>,
}

impl SparseGrads {
    pub fn is_empty(&self) -> bool {
        self.word.is_empty() && self.ngram.is_empty()
    }

    /// Merges another gradient set into this one, adding overlapping rows.
    pub fn accumulate(&mut self, other: SparseGrads) {
        for (id, row) in other.word {
            merge_row(&mut self.word, id, row);
        }
        for (id, row) in other.ngram {
            merge_row(&mut self.ngram, id, row);
        }
    }
}

fn merge_row(map: &mut HashMap<u32, Vec<f64>>, id: u32, row: Vec<f64>) {
    match map.entry(id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(row) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(row);
        }
    }
}

impl EmbedCache {
    pub fn backward(&self, upstream: &Matrix) -> Result<SparseGrads> {
        if upstream.rows() != self.tokens.len() {
            return Err(Error::shape(
                "embed_backward",
                (self.tokens.len(), upstream.cols()),
                upstream.shape(),
            ));
        }
        let mut grads = SparseGrads::default();
        for (i, token) in self.tokens.iter().enumerate() {
            let count = token.contributor_count();
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            let up = upstream.row(i);
            if let Some(id) = token.word_id {
                add_scaled(&mut grads.word, id, up, inv);
            }
            for &bucket in &token.ngram_buckets {
                add_scaled(&mut grads.ngram, bucket, up, inv);
            }
        }
        Ok(grads)
    }
}

fn add_scaled(map: &mut HashMap<u32, Vec<f64>>, id: u32, row: &[f64], scale: f64) {
    let entry = map.entry(id).or_insert_with(|| vec![0.0; row.len()]);
    for (a, &b) in entry.iter_mut().zip(row) {
        *a += b * scale;
    }
}
