//! News stream ingestion, ESG vocabulary filtering, ticker linking and topic counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::features::tokenize;

#[derive(Debug, thiserror::Error)]
pub enum NewsError {
    #[error("line {line}: {cause}")]
    Line { line: usize, cause: LineCause },
    #[error("line {line}: duplicate news id {id:?} (first seen on line {first})")]
    DuplicateId { id: String, line: usize, first: usize },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("ticker dictionary: {0}")]
    Dictionary(String),
    #[error("histogram window start {start} is not before end {end}")]
    EmptyWindow { start: DateTime<Utc>, end: DateTime<Utc> },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Why a single line of the news stream was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineCause {
    InvalidUtf8,
    MalformedJson(String),
    NotAnObject,
    MissingKey(&'static str),
    WrongType(&'static str),
    BadTimestamp(String),
    EmptyId,
    EmptyText,
}

impl fmt::Display for LineCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LineCause::InvalidUtf8 => write!(f, "invalid UTF-8"),
            LineCause::MalformedJson(e) => write!(f, "malformed JSON: {e}"),
            LineCause::NotAnObject => write!(f, "line is not a JSON object"),
            LineCause::MissingKey(k) => write!(f, "missing required key {k:?}"),
            LineCause::WrongType(k) => write!(f, "key {k:?} has the wrong type"),
            LineCause::BadTimestamp(s) => write!(f, "unparseable timestamp {s:?}"),
            LineCause::EmptyId => write!(f, "empty id"),
            LineCause::EmptyText => write!(f, "text is empty after trimming"),
        }
    }
}

/// A rejected line in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub cause: LineCause,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsItem {
    pub id: String,
    pub timestamp: DateTime<Utc>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vendor_tickers: Option<Vec<String>>,
}

/// Parse a JSON-lines news stream.
///
/// Blank lines are skipped. In lenient mode bad lines are collected as
/// [`ParseError`]s; in strict mode the first one aborts. Duplicate ids always abort.
pub fn parse_news_stream<R: BufRead>(
    mut source: R,
    strict: bool,
) -> Result<(Vec<NewsItem>, Vec<ParseError>), NewsError> {
    let mut items = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        if source.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        let parsed = match std::str::from_utf8(&buf) {
            Ok(s) if s.trim().is_empty() => continue,
            Ok(s) => parse_line(s),
            Err(_) => Err(LineCause::InvalidUtf8),
        };
        match parsed {
            Ok(item) => {
                if let Some(&first) = seen.get(&item.id) {
                    return Err(NewsError::DuplicateId { id: item.id, line: line_no, first });
                }
                seen.insert(item.id.clone(), line_no);
                items.push(item);
            }
            Err(cause) if strict => return Err(NewsError::Line { line: line_no, cause }),
            Err(cause) => errors.push(ParseError { line: line_no, cause }),
        }
    }
    Ok((items, errors))
}

fn parse_line(line: &str) -> Result<NewsItem, LineCause> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| LineCause::MalformedJson(e.to_string()))?;
    let obj = value.as_object().ok_or(LineCause::NotAnObject)?;
    let string_field = |key: &'static str| -> Result<&str, LineCause> {
        obj.get(key)
            .ok_or(LineCause::MissingKey(key))?
            .as_str()
            .ok_or(LineCause::WrongType(key))
    };
    let id = string_field("id")?;
    let ts = string_field("timestamp")?;
    let text = string_field("text")?;
    if id.is_empty() {
        return Err(LineCause::EmptyId);
    }
    if text.trim().is_empty() {
        return Err(LineCause::EmptyText);
    }
    let timestamp = DateTime::parse_from_rfc3339(ts)
        .map_err(|_| LineCause::BadTimestamp(ts.to_string()))?
        .with_timezone(&Utc)
        .trunc_subsecs(0);
    let vendor_tickers = match obj.get("tickers") {
        None | Some(Value::Null) => None,
        Some(Value::Array(arr)) => Some(
            arr.iter()
                .map(|v| v.as_str().map(str::to_string).ok_or(LineCause::WrongType("tickers")))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(LineCause::WrongType("tickers")),
    };
    Ok(NewsItem { id: id.to_string(), timestamp, text: text.to_string(), vendor_tickers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pillar {
    E,
    S,
    G,
}

impl std::str::FromStr for Pillar {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "E" | "e" => Ok(Pillar::E),
            "S" | "s" => Ok(Pillar::S),
            "G" | "g" => Ok(Pillar::G),
            other => Err(other.to_string()),
        }
    }
}

/// One matched (or matchable) vocabulary entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopicMatch {
    pub phrase: String,
    pub topic: String,
    pub pillar: Pillar,
}

/// Contiguous token-sequence lookup over a fixed set of phrases.
#[derive(Debug, Clone, Default)]
struct PhraseIndex {
    map: HashMap<Vec<String>, Vec<usize>>,
    max_len: usize,
}

impl PhraseIndex {
    fn insert(&mut self, tokens: Vec<String>, payload: usize) {
        self.max_len = self.max_len.max(tokens.len());
        self.map.entry(tokens).or_default().push(payload);
    }

    /// Payloads of every phrase occurring in `tokens`, each once, ordered by first occurrence.
    fn find_all(&self, tokens: &[String]) -> Vec<usize> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for start in 0..tokens.len() {
            let longest = self.max_len.min(tokens.len() - start);
            for len in (1..=longest).rev() {
                if let Some(payloads) = self.map.get(&tokens[start..start + len]) {
                    for &p in payloads {
                        if seen.insert(p) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct VocabEntry {
    pub tokens: Vec<String>,
    pub topic: String,
    pub pillar: Pillar,
}

impl VocabEntry {
    pub fn phrase(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct EsgVocabulary {
    entries: Vec<VocabEntry>,
    index: PhraseIndex,
}

impl EsgVocabulary {
    pub fn new(entries: Vec<VocabEntry>) -> Result<Self, NewsError> {
        if entries.is_empty() {
            return Err(NewsError::Vocabulary("vocabulary has no entries".into()));
        }
        let mut index = PhraseIndex::default();
        for (i, e) in entries.iter().enumerate() {
            if e.tokens.is_empty() {
                return Err(NewsError::Vocabulary(format!("entry {i} has an empty phrase")));
            }
            if index.map.contains_key(&e.tokens) {
                return Err(NewsError::Vocabulary(format!("duplicate phrase {:?}", e.phrase())));
            }
            index.insert(e.tokens.clone(), i);
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Load a `phrase,topic,pillar` CSV.
pub fn load_vocabulary(source: &str) -> Result<EsgVocabulary, NewsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["phrase", "topic", "pillar"] {
        return Err(NewsError::Vocabulary(format!(
            "expected header phrase,topic,pillar, found {:?}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries: Vec<VocabEntry> = Vec::new();
    let mut rows: HashMap<Vec<String>, u64> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let (phrase, topic, pillar) = (&record[0], &record[1], &record[2]);
        let pillar: Pillar = pillar.parse().map_err(|v| {
            NewsError::Vocabulary(format!("row {row}: invalid pillar {v:?} (expected E, S or G)"))
        })?;
        let tokens = tokenize(phrase);
        if tokens.is_empty() {
            return Err(NewsError::Vocabulary(format!("row {row}: empty phrase")));
        }
        if let Some(first) = rows.get(&tokens) {
            return Err(NewsError::Vocabulary(format!(
                "row {row}: duplicate phrase {phrase:?} (first on row {first})"
            )));
        }
        rows.insert(tokens.clone(), row);
        entries.push(VocabEntry { tokens, topic: topic.to_string(), pillar });
    }
    if entries.is_empty() {
        return Err(NewsError::Vocabulary("empty vocabulary file".into()));
    }
    EsgVocabulary::new(entries)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsgNewsItem {
    #[serde(flatten)]
    pub item: NewsItem,
    pub topics: Vec<TopicMatch>,
    pub tickers: Vec<String>,
}

/// Keep `item` when at least one vocabulary phrase occurs in its text.
pub fn esg_filter(item: &NewsItem, vocab: &EsgVocabulary) -> Option<EsgNewsItem> {
    let tokens = tokenize(&item.text);
    let topics: Vec<TopicMatch> = vocab
        .index
        .find_all(&tokens)
        .into_iter()
        .map(|i| {
            let e = &vocab.entries[i];
            TopicMatch { phrase: e.phrase(), topic: e.topic.clone(), pillar: e.pillar }
        })
        .collect();
    if topics.is_empty() {
        None
    } else {
        Some(EsgNewsItem { item: item.clone(), topics, tickers: Vec::new() })
    }
}

#[derive(Debug, Clone)]
pub struct TickerEntry {
    pub ticker: String,
    pub aliases: Vec<Vec<String>>,
    pub market: String,
}

#[derive(Debug, Clone, Default)]
pub struct TickerDictionary {
    entries: Vec<TickerEntry>,
    by_ticker: HashMap<String, usize>,
    index: PhraseIndex,
}

impl TickerDictionary {
    pub fn new(entries: Vec<TickerEntry>) -> Result<Self, NewsError> {
        let mut by_ticker = HashMap::new();
        let mut index = PhraseIndex::default();
        for (i, e) in entries.iter().enumerate() {
            if by_ticker.insert(e.ticker.clone(), i).is_some() {
                return Err(NewsError::Dictionary(format!("duplicate ticker {:?}", e.ticker)));
            }
            for alias in &e.aliases {
                if alias.is_empty() {
                    return Err(NewsError::Dictionary(format!("empty alias for {:?}", e.ticker)));
                }
                index.insert(alias.clone(), i);
            }
        }
        Ok(Self { entries, by_ticker, index })
    }

    pub fn entries(&self) -> &[TickerEntry] {
        &self.entries
    }

    pub fn contains(&self, ticker: &str) -> bool {
        self.by_ticker.contains_key(ticker)
    }
}

/// Load a `ticker,alias,market` CSV (one alias per row).
pub fn load_ticker_dictionary(source: &str) -> Result<TickerDictionary, NewsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["ticker", "alias", "market"] {
        return Err(NewsError::Dictionary("expected header ticker,alias,market".into()));
    }
    let mut entries: Vec<TickerEntry> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let (ticker, alias, market) = (&record[0], &record[1], &record[2]);
        if ticker.is_empty() {
            return Err(NewsError::Dictionary(format!("row {row}: empty ticker")));
        }
        let alias = tokenize(alias);
        if alias.is_empty() {
            return Err(NewsError::Dictionary(format!("row {row}: empty alias")));
        }
        let i = *pos.entry(ticker.to_string()).or_insert_with(|| {
            entries.push(TickerEntry {
                ticker: ticker.to_string(),
                aliases: Vec::new(),
                market: market.to_string(),
            });
            entries.len() - 1
        });
        if entries[i].market != market {
            return Err(NewsError::Dictionary(format!(
                "row {row}: ticker {ticker:?} listed under markets {:?} and {market:?}",
                entries[i].market
            )));
        }
        if !entries[i].aliases.contains(&alias) {
            entries[i].aliases.push(alias);
        }
    }
    TickerDictionary::new(entries)
}

/// Companies mentioned by `item`: vendor attributes when present, alias lookup otherwise.
pub fn link_tickers(item: &NewsItem, dict: &TickerDictionary) -> Vec<String> {
    let mut out: Vec<String> = match item.vendor_tickers.as_deref() {
        Some(vendor) if !vendor.is_empty() => {
            vendor.iter().filter(|t| dict.contains(t)).cloned().collect()
        }
        _ => dict
            .index
            .find_all(&tokenize(&item.text))
            .into_iter()
            .map(|i| dict.entries[i].ticker.clone())
            .collect(),
    };
    out.sort();
    out.dedup();
    out
}

/// Filter and link in one pass; items without an ESG match are dropped.
pub fn extract_esg(
    items: &[NewsItem],
    vocab: &EsgVocabulary,
    dict: &TickerDictionary,
) -> Vec<EsgNewsItem> {
    items
        .iter()
        .filter_map(|item| {
            let mut esg = esg_filter(item, vocab)?;
            esg.tickers = link_tickers(item, dict);
            Some(esg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicHistogram {
    pub window: (DateTime<Utc>, DateTime<Utc>),
    pub counts: BTreeMap<String, u64>,
    /// (item, topic) matches inside the window before top-k truncation.
    pub total_matches: u64,
}

impl TopicHistogram {
    /// Topics by descending count, ties alphabetical.
    pub fn ranked(&self) -> Vec<(String, u64)> {
        let mut v: Vec<_> = self.counts.iter().map(|(k, &c)| (k.clone(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("topic,count\n");
        for (topic, count) in self.ranked() {
            out.push_str(&format!("{},{count}\n", csv_field(&topic)));
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Count topics of items timestamped in `[start, end)` and keep the `k` most frequent.
pub fn topic_histogram(
    items: &[EsgNewsItem],
    window: (DateTime<Utc>, DateTime<Utc>),
    k: usize,
) -> Result<TopicHistogram, NewsError> {
    let (start, end) = window;
    if start >= end {
        return Err(NewsError::EmptyWindow { start, end });
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    for item in items.iter().filter(|i| i.item.timestamp >= start && i.item.timestamp < end) {
        let distinct: HashSet<&str> = item.topics.iter().map(|t| t.topic.as_str()).collect();
        for topic in distinct {
            *counts.entry(topic.to_string()).or_default() += 1;
            total += 1;
        }
    }
    let mut hist = TopicHistogram { window, counts, total_matches: total };
    let keep: HashSet<String> = hist.ranked().into_iter().take(k).map(|(t, _)| t).collect();
    hist.counts.retain(|t, _| keep.contains(t));
    Ok(hist)
}
