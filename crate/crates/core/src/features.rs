//! News text to numbers: tokenizer, sentence sentiment statistics, hashed
//! embeddings, external embedding import and average pooling per (stock, window).

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::newsflow::EsgNewsItem;
use crate::scalar::Real;

/// Length of a sentiment vector.
pub const SENTIMENT_DIM: usize = 6;

pub const EXTERNAL_MAGIC: &[u8; 4] = b"E2RE";
pub const EXTERNAL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("cannot pool an empty list of vectors")]
    EmptyPool,
    #[error("ragged vectors: expected dimension {expected}, found {found}")]
    Ragged { expected: usize, found: usize },
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("external embeddings: {0}")]
    External(String),
    #[error("no external embedding for news id {0:?}")]
    UnknownId(String),
    #[error("empty news window for {ticker} at period {t}")]
    EmptyWindow { ticker: String, t: usize },
    #[error("news item {id:?} does not belong to window of {ticker} at period {t}")]
    OutsideWindow { id: String, ticker: String, t: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Lowercase alphanumeric tokens. Any run of non-alphanumeric characters separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split on runs of `.`, `!`, `?` that are followed by whitespace or the end of text.
/// The terminator run is dropped; a run glued to the next word ("U.S") stays in place.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < chars.len() {
        if is_terminator(chars[i]) {
            let start = i;
            while i < chars.len() && is_terminator(chars[i]) {
                i += 1;
            }
            if i == chars.len() || chars[i].is_whitespace() {
                let seg = current.trim();
                if !seg.is_empty() {
                    out.push(seg.to_string());
                }
                current.clear();
            } else {
                current.extend(&chars[start..i]);
            }
        } else {
            current.push(chars[i]);
            i += 1;
        }
    }
    let seg = current.trim();
    if !seg.is_empty() {
        out.push(seg.to_string());
    }
    out
}

#[derive(Debug, Clone)]
pub struct SentimentLexicon {
    scores: HashMap<String, f64>,
}

impl SentimentLexicon {
    pub fn new(scores: HashMap<String, f64>) -> Result<Self, FeatureError> {
        if scores.is_empty() {
            return Err(FeatureError::Lexicon("lexicon is empty".into()));
        }
        if let Some((tok, s)) = scores.iter().find(|(_, s)| !(-1.0..=1.0).contains(*s)) {
            return Err(FeatureError::Lexicon(format!("score {s} for {tok:?} outside [-1, 1]")));
        }
        Ok(Self { scores })
    }

    pub fn score(&self, token: &str) -> Option<f64> {
        self.scores.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Load a `token,score` CSV.
pub fn load_lexicon(source: &str) -> Result<SentimentLexicon, FeatureError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source.as_bytes());
    if reader.headers()?.iter().collect::<Vec<_>>() != ["token", "score"] {
        return Err(FeatureError::Lexicon("expected header token,score".into()));
    }
    let mut scores = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let toks = tokenize(&record[0]);
        if toks.len() != 1 {
            return Err(FeatureError::Lexicon(format!("row {row}: {:?} is not one token", &record[0])));
        }
        let score: f64 = record[1]
            .parse()
            .map_err(|_| FeatureError::Lexicon(format!("row {row}: bad score {:?}", &record[1])))?;
        if !(-1.0..=1.0).contains(&score) {
            return Err(FeatureError::Lexicon(format!("row {row}: score {score} outside [-1, 1]")));
        }
        if scores.insert(toks[0].clone(), score).is_some() {
            return Err(FeatureError::Lexicon(format!("row {row}: duplicate token {:?}", toks[0])));
        }
    }
    SentimentLexicon::new(scores)
}

/// `[mean, std, min, max, frac_positive, frac_negative]` over per-sentence scores.
pub type SentimentVec = [f64; SENTIMENT_DIM];

pub mod slot {
    pub const MEAN: usize = 0;
    pub const STD: usize = 1;
    pub const MIN: usize = 2;
    pub const MAX: usize = 3;
    pub const POS: usize = 4;
    pub const NEG: usize = 5;
}

/// Score each sentence by the mean lexicon score of its known tokens (0 if none),
/// then summarize the sentence scores.
pub fn sentiment_vector(text: &str, lexicon: &SentimentLexicon) -> SentimentVec {
    let scores: Vec<f64> = split_sentences(text)
        .iter()
        .map(|sentence| {
            let hits: Vec<f64> = tokenize(sentence).iter().filter_map(|t| lexicon.score(t)).collect();
            if hits.is_empty() {
                0.0
            } else {
                hits.iter().sum::<f64>() / hits.len() as f64
            }
        })
        .collect();
    if scores.is_empty() {
        return [0.0; SENTIMENT_DIM];
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pos = scores.iter().filter(|&&s| s > 0.0).count() as f64 / n;
    let neg = scores.iter().filter(|&&s| s < 0.0).count() as f64 / n;
    // mean can drift past min/max by an ulp when all scores are equal
    [mean.clamp(min, max), var.sqrt(), min, max, pos, neg]
}

/// Anything that turns a news item into a fixed-length vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_item(&self, id: &str, text: &str) -> Result<Vec<f64>, FeatureError>;
}

/// Signed feature hashing of unigrams and bigrams.
///
/// Each n-gram is hashed with XXH64 seeded by `seed`; unigrams hash the token's
/// UTF-8 bytes and bigrams hash `"{a} {b}"`. Slot is `h % dim`, sign is `-1` when
/// the top bit of `h` is set. The accumulated vector is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { dim: 256, seed: 0 }
    }
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn add(&self, acc: &mut [f64], bytes: &[u8]) {
        let h = xxh64(bytes, self.seed);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % self.dim as u64) as usize] += sign;
    }

    pub fn embed_tokens(&self, tokens: &[String]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for tok in tokens {
            self.add(&mut acc, tok.as_bytes());
        }
        let mut bigram = Vec::new();
        for pair in tokens.windows(2) {
            bigram.clear();
            bigram.extend_from_slice(pair[0].as_bytes());
            bigram.push(b' ');
            bigram.extend_from_slice(pair[1].as_bytes());
            self.add(&mut acc, &bigram);
        }
        l2_normalize(&mut acc);
        acc
    }
}

impl EmbeddingProvider for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_item(&self, _id: &str, text: &str) -> Result<Vec<f64>, FeatureError> {
        Ok(embed(text, self))
    }
}

/// Hashed embedding of `text`; the zero vector when `text` has no tokens.
pub fn embed(text: &str, provider: &HashedEmbedder) -> Vec<f64> {
    provider.embed_tokens(&tokenize(text))
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), FeatureError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FeatureError::External(format!("truncated {what}")),
        _ => FeatureError::Io(e),
    })
}

/// Read the binary external-embedding format: `E2RE`, u32 version, u32 d, u64 count,
/// then per record a u16 id length, the id bytes and `d` little-endian f64.
pub fn load_external_embeddings<R: Read>(
    mut source: R,
) -> Result<(usize, BTreeMap<String, Vec<f64>>), FeatureError> {
    let mut header = [0u8; 20];
    let mut first = [0u8; 1];
    if source.read(&mut first)? == 0 {
        return Ok((0, BTreeMap::new()));
    }
    header[0] = first[0];
    read_exact_or(&mut source, &mut header[1..], "header")?;
    if &header[0..4] != EXTERNAL_MAGIC {
        return Err(FeatureError::External("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != EXTERNAL_VERSION {
        return Err(FeatureError::External(format!("unsupported version {version}")));
    }
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact_or(&mut source, &mut len, "record")?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(&mut source, &mut id, "record id")?;
        let id = String::from_utf8(id).map_err(|_| FeatureError::External("id not UTF-8".into()))?;
        let mut raw = vec![0u8; 8 * d];
        read_exact_or(&mut source, &mut raw, "record values")?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if map.insert(id.clone(), values).is_some() {
            return Err(FeatureError::External(format!("duplicate id {id:?}")));
        }
    }
    let mut tail = [0u8; 1];
    if source.read(&mut tail)? != 0 {
        return Err(FeatureError::External("trailing bytes after last record".into()));
    }
    Ok((d, map))
}

/// Write records in the format read by [`load_external_embeddings`].
pub fn write_external_embeddings<W: Write>(
    mut sink: W,
    records: &[(String, Vec<f64>)],
) -> Result<(), FeatureError> {
    let d = records.first().map_or(0, |r| r.1.len());
    if let Some(bad) = records.iter().find(|r| r.1.len() != d) {
        return Err(FeatureError::Ragged { expected: d, found: bad.1.len() });
    }
    sink.write_all(EXTERNAL_MAGIC)?;
    sink.write_all(&EXTERNAL_VERSION.to_le_bytes())?;
    sink.write_all(&(d as u32).to_le_bytes())?;
    sink.write_all(&(records.len() as u64).to_le_bytes())?;
    for (id, values) in records {
        let len = u16::try_from(id.len())
            .map_err(|_| FeatureError::External(format!("id {id:?} longer than 65535 bytes")))?;
        sink.write_all(&len.to_le_bytes())?;
        sink.write_all(id.as_bytes())?;
        for v in values {
            sink.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Embeddings computed elsewhere and imported by news id; returned L2-normalized.
#[derive(Debug, Clone)]
pub struct ExternalEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl ExternalEmbeddings {
    pub fn from_reader<R: Read>(source: R) -> Result<Self, FeatureError> {
        let (dim, vectors) = load_external_embeddings(source)?;
        Ok(Self { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for ExternalEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_item(&self, id: &str, _text: &str) -> Result<Vec<f64>, FeatureError> {
        let mut v = self.vectors.get(id).cloned().ok_or_else(|| FeatureError::UnknownId(id.into()))?;
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Elementwise mean of equal-length vectors.
pub fn pool<T: Real, V: AsRef<[T]>>(vectors: &[V]) -> Result<Vec<T>, FeatureError> {
    let first = vectors.first().ok_or(FeatureError::EmptyPool)?.as_ref();
    let mut acc = vec![T::zero(); first.len()];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != acc.len() {
            return Err(FeatureError::Ragged { expected: acc.len(), found: v.len() });
        }
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x);
    }
    let n = T::of_usize(vectors.len());
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Pooled news representation of one stock over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeatures {
    pub ticker: String,
    pub t: usize,
    pub s_pooled: Vec<f64>,
    pub e_pooled: Vec<f64>,
    pub m: usize,
    /// Ids of the pooled items, sorted.
    pub news_ids: Vec<String>,
    pub latest_news: DateTime<Utc>,
}

/// Per-item features before pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub sentiment: SentimentVec,
    pub embedding: Vec<f64>,
}

pub fn item_features(
    item: &EsgNewsItem,
    lexicon: &SentimentLexicon,
    provider: &dyn EmbeddingProvider,
) -> Result<ItemFeatures, FeatureError> {
    Ok(ItemFeatures {
        sentiment: sentiment_vector(&item.item.text, lexicon),
        embedding: provider.embed_item(&item.item.id, &item.item.text)?,
    })
}

/// Pool precomputed item features into one [`PooledFeatures`].
pub fn pool_items(
    ticker: &str,
    t: usize,
    items: &[(&EsgNewsItem, &ItemFeatures)],
) -> Result<PooledFeatures, FeatureError> {
    if items.is_empty() {
        return Err(FeatureError::EmptyWindow { ticker: ticker.into(), t });
    }
    let s: Vec<&[f64]> = items.iter().map(|(_, f)| &f.sentiment[..]).collect();
    let e: Vec<&[f64]> = items.iter().map(|(_, f)| &f.embedding[..]).collect();
    let mut news_ids: Vec<String> = items.iter().map(|(i, _)| i.item.id.clone()).collect();
    news_ids.sort();
    Ok(PooledFeatures {
        ticker: ticker.into(),
        t,
        s_pooled: pool(&s)?,
        e_pooled: pool(&e)?,
        m: items.len(),
        news_ids,
        latest_news: items.iter().map(|(i, _)| i.item.timestamp).max().unwrap(),
    })
}

/// Featurize and pool the news of `ticker` inside `window = [start, end)`.
pub fn transform_window(
    items: &[&EsgNewsItem],
    ticker: &str,
    t: usize,
    window: (DateTime<Utc>, DateTime<Utc>),
    lexicon: &SentimentLexicon,
    provider: &dyn EmbeddingProvider,
) -> Result<PooledFeatures, FeatureError> {
    let mut feats = Vec::with_capacity(items.len());
    for &item in items {
        let ts = item.item.timestamp;
        if ts < window.0 || ts >= window.1 || !item.tickers.iter().any(|x| x == ticker) {
            return Err(FeatureError::OutsideWindow {
                id: item.item.id.clone(),
                ticker: ticker.into(),
                t,
            });
        }
        feats.push(item_features(item, lexicon, provider)?);
    }
    let pairs: Vec<_> = items.iter().copied().zip(feats.iter()).collect();
    pool_items(ticker, t, &pairs)
}

/// Assign every (item, linked ticker) pair to the windows `[start(t), end(t))` it falls in
/// and pool each non-empty (ticker, t) group. `windows` yields `(t, start, end)` in
/// increasing `t`. Output is sorted by `(t, ticker)`.
pub fn featurize(
    items: &[EsgNewsItem],
    windows: &[(usize, DateTime<Utc>, DateTime<Utc>)],
    lexicon: &SentimentLexicon,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<PooledFeatures>, FeatureError> {
    let feats: Vec<ItemFeatures> =
        items.iter().map(|i| item_features(i, lexicon, provider)).collect::<Result<_, _>>()?;
    let mut groups: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (idx, item) in items.iter().enumerate() {
        let ts = item.item.timestamp;
        // windows may overlap when w > 1
        let first = windows.partition_point(|w| w.2 <= ts);
        for &(t, start, end) in &windows[first..] {
            if start > ts {
                break;
            }
            if ts < end {
                for ticker in &item.tickers {
                    groups.entry((t, ticker.as_str())).or_default().push(idx);
                }
            }
        }
    }
    groups
        .into_iter()
        .map(|((t, ticker), idxs)| {
            let pairs: Vec<_> = idxs.iter().map(|&i| (&items[i], &feats[i])).collect();
            pool_items(ticker, t, &pairs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::newsflow::{NewsItem, Pillar, TopicMatch};
    use proptest::prelude::*;

    fn lex(pairs: &[(&str, f64)]) -> SentimentLexicon {
        SentimentLexicon::new(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()).unwrap()
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("CO2 Emissions rise"), vec!["co2", "emissions", "rise"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("T-Mobile's CEO"), vec!["t", "mobile", "s", "ceo"]);
        assert_eq!(tokenize("  Überraschung!! 42x"), vec!["überraschung", "42x"]);
    }

    #[test]
    fn sentence_splitter_examples() {
        assert_eq!(split_sentences("Good plant. Bad spill."), vec!["Good plant", "Bad spill"]);
        assert_eq!(split_sentences("no terminator here"), vec!["no terminator here"]);
        assert_eq!(split_sentences("A.. B"), vec!["A", "B"]);
        assert_eq!(split_sentences("U.S. Steel rose 3.5% today!"), vec!["U.S", "Steel rose 3.5% today"]);
        assert!(split_sentences(" ... ").is_empty());
    }

    #[test]
    fn sentiment_examples() {
        let l = lex(&[("good", 1.0), ("bad", -1.0)]);
        assert_eq!(sentiment_vector("Good plant. Bad spill.", &l), [0.0, 1.0, -1.0, 1.0, 0.5, 0.5]);
        assert_eq!(sentiment_vector("nothing to see", &l), [0.0; 6]);
        assert_eq!(sentiment_vector("", &l), [0.0; 6]);
        assert_eq!(sentiment_vector("good good", &l), [1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn lexicon_validation() {
        assert!(load_lexicon("token,score\ngood,0.5\n").is_ok());
        assert!(load_lexicon("token,score\ngood,1.5\n").is_err());
        assert!(load_lexicon("token,score\n").is_err());
        assert!(load_lexicon("token,score\ntwo words,0.1\n").is_err());
        assert!(SentimentLexicon::new(HashMap::new()).is_err());
    }

    #[test]
    fn embedding_examples() {
        let p = HashedEmbedder::new(64, 7);
        assert_eq!(embed("", &p), vec![0.0; 64]);
        let v = embed("CO2 emissions rise", &p);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(v, embed("CO2 emissions rise", &p));
        assert_ne!(v, embed("CO2 emissions rise", &HashedEmbedder::new(64, 8)));
    }

    #[test]
    fn embedding_is_frozen() {
        // guards the documented hash layout: xxh64(seed=0) of "a" and of "a b"
        let p = HashedEmbedder::new(8, 0);
        let h1 = xxh64(b"a", 0);
        let h2 = xxh64(b"a b", 0);
        let h3 = xxh64(b"b", 0);
        let mut expect = [0.0f64; 8];
        for h in [h1, h2, h3] {
            expect[(h % 8) as usize] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let n = expect.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = embed("A b", &p);
        for (g, e) in got.iter().zip(expect) {
            assert_eq!(*g, e / n);
        }
    }

    #[test]
    fn pool_examples() {
        assert_eq!(pool(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(pool(&[vec![0.25f32, -1.0]]).unwrap(), vec![0.25, -1.0]);
        assert!(matches!(pool::<f64, Vec<f64>>(&[]), Err(FeatureError::EmptyPool)));
        assert!(matches!(
            pool(&[vec![1.0], vec![1.0, 2.0]]),
            Err(FeatureError::Ragged { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn external_embedding_format() {
        let recs = vec![("a".to_string(), vec![1.0, 2.0, 3.0, 4.0]), ("b".into(), vec![0.0; 4])];
        let mut buf = Vec::new();
        write_external_embeddings(&mut buf, &recs).unwrap();
        assert_eq!(&buf[..4], b"E2RE");
        let (d, map) = load_external_embeddings(&buf[..]).unwrap();
        assert_eq!((d, map.len()), (4, 2));
        assert_eq!(map["a"], recs[0].1);

        let ragged = vec![("a".to_string(), vec![0.0; 4]), ("b".into(), vec![0.0; 8])];
        assert!(write_external_embeddings(Vec::new(), &ragged).is_err());

        // hand-built mixed-dimension payload: header says d=4 but a record is short
        let mut bad = buf.clone();
        bad.truncate(bad.len() - 8);
        assert!(load_external_embeddings(&bad[..]).is_err());

        let mut dup = Vec::new();
        write_external_embeddings(&mut dup, &[("a".into(), vec![1.0]), ("a".into(), vec![2.0])])
            .unwrap();
        assert!(load_external_embeddings(&dup[..]).is_err());

        let (_, empty) = load_external_embeddings(&b""[..]).unwrap();
        assert!(empty.is_empty());
        let ext = ExternalEmbeddings::from_reader(&b""[..]).unwrap();
        assert!(matches!(ext.embed_item("x", "text"), Err(FeatureError::UnknownId(_))));

        let ext = ExternalEmbeddings::from_reader(&buf[..]).unwrap();
        let v = ext.embed_item("a", "").unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn news(id: &str, ts: &str, text: &str, ticker: &str) -> EsgNewsItem {
        EsgNewsItem {
            item: NewsItem { id: id.into(), timestamp: ts.parse().unwrap(), text: text.into(), vendor_tickers: None },
            topics: vec![TopicMatch { phrase: "oil spill".into(), topic: "Pollution".into(), pillar: Pillar::E }],
            tickers: vec![ticker.into()],
        }
    }

    fn week() -> (DateTime<Utc>, DateTime<Utc>) {
        ("2020-04-03T23:59:59Z".parse().unwrap(), "2020-04-10T23:59:59Z".parse().unwrap())
    }

    #[test]
    fn transform_window_pools_items() {
        let l = lex(&[("good", 0.5), ("bad", -0.5)]);
        let p = HashedEmbedder::new(16, 1);
        let a = news("a", "2020-04-06T10:00:00Z", "Good oil spill cleanup.", "X");
        let b = news("b", "2020-04-07T10:00:00Z", "Bad oil spill. Good response.", "X");

        let one = transform_window(&[&a], "X", 3, week(), &l, &p).unwrap();
        assert_eq!(one.m, 1);
        assert_eq!(one.s_pooled, sentiment_vector(&a.item.text, &l).to_vec());
        assert_eq!(one.e_pooled, embed(&a.item.text, &p));

        let two = transform_window(&[&a, &b], "X", 3, week(), &l, &p).unwrap();
        let (u, v) = (embed(&a.item.text, &p), embed(&b.item.text, &p));
        for i in 0..16 {
            assert!((two.e_pooled[i] - (u[i] + v[i]) / 2.0).abs() < 1e-15);
        }
        assert_eq!(two.news_ids, vec!["a", "b"]);
        assert_eq!(two.latest_news, b.item.timestamp);

        assert!(matches!(
            transform_window(&[], "X", 3, week(), &l, &p),
            Err(FeatureError::EmptyWindow { .. })
        ));
        let late = news("c", "2020-04-10T23:59:59Z", "oil spill", "X");
        assert!(transform_window(&[&late], "X", 3, week(), &l, &p).is_err());
        assert!(transform_window(&[&a], "Y", 3, week(), &l, &p).is_err());
    }

    #[test]
    fn featurize_groups_by_ticker_and_window() {
        let l = lex(&[("good", 0.5)]);
        let p = HashedEmbedder::new(8, 1);
        let (s, e) = week();
        let next = (e, e + chrono::Duration::days(7));
        let mut multi = news("m", "2020-04-08T00:00:00Z", "oil spill good", "X");
        multi.tickers.push("Y".into());
        let items = vec![
            news("a", "2020-04-06T10:00:00Z", "oil spill", "X"),
            multi,
            news("c", "2020-04-12T10:00:00Z", "oil spill", "X"),
            news("early", "2020-04-01T10:00:00Z", "oil spill", "X"),
        ];
        let windows = vec![(1, s, e), (2, next.0, next.1)];
        let out = featurize(&items, &windows, &l, &p).unwrap();
        let keys: Vec<_> = out.iter().map(|f| (f.t, f.ticker.as_str(), f.m)).collect();
        assert_eq!(keys, vec![(1, "X", 2), (1, "Y", 1), (2, "X", 1)]);
    }

    proptest! {
        #[test]
        fn pool_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..12),
            seed in any::<u64>(),
        ) {
            let mut shuffled = rows.clone();
            let k = shuffled.len();
            shuffled.rotate_left((seed % k as u64) as usize);
            shuffled.reverse();
            let a = pool(&rows).unwrap();
            let b = pool(&shuffled).unwrap();
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let constant = vec![rows[0].clone(); k];
            let c = pool(&constant).unwrap();
            for (x, y) in c.iter().zip(&rows[0]) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn sentiment_is_order_invariant_and_ordered(
            picks in prop::collection::vec(0usize..5, 1..8),
        ) {
            let words = ["good", "bad", "fine", "meh", "great"];
            let l = lex(&[("good", 0.8), ("bad", -0.6), ("great", 1.0), ("fine", 0.1)]);
            let sentences: Vec<String> = picks.iter().map(|&i| format!("{} plant", words[i])).collect();
            let fwd = sentiment_vector(&sentences.join(". "), &l);
            let mut rev = sentences.clone();
            rev.reverse();
            let bwd = sentiment_vector(&rev.join(". "), &l);
            for i in 0..SENTIMENT_DIM {
                prop_assert!((fwd[i] - bwd[i]).abs() < 1e-12);
            }
            prop_assert!(fwd[slot::MIN] <= fwd[slot::MEAN] && fwd[slot::MEAN] <= fwd[slot::MAX]);
            prop_assert!(fwd[slot::POS] + fwd[slot::NEG] <= 1.0 + 1e-12);
        }

        #[test]
        fn matching_is_case_insensitive(text in "[a-zA-Z ]{0,40}") {
            let p = HashedEmbedder::new(32, 3);
            prop_assert_eq!(embed(&text, &p), embed(&text.to_uppercase(), &p));
            prop_assert_eq!(tokenize(&text), tokenize(&text.to_uppercase()));
        }
    }
}
