//! Synthetic market and news generator with known ground truth.
//!
//! Each stock carries a latent daily log-volatility following a stationary AR(1).
//! Weekday returns are `exp(z) - 1` with `z ~ N(0, vol^2)`. The news published in
//! the week before grid boundary `t` describes the volatility of the week after it:
//! every item carries a handful of "storm" and "calm" tokens whose mix encodes a
//! noisy, quantized copy of the standardized latent log-vol, plus lexicon sentences
//! whose polarity leans negative when volatility is high.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc, Weekday};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::market::close_instant;

pub const SAMPLE_VOCABULARY: &str = include_str!("../data/esg_vocabulary.csv");
pub const SAMPLE_LEXICON: &str = include_str!("../data/sentiment_lexicon.csv");

pub const STORM_TOKENS: [&str; 8] =
    ["turbulent", "jittery", "erratic", "choppy", "swinging", "unsettled", "frantic", "stormy"];
pub const CALM_TOKENS: [&str; 8] =
    ["quiet", "placid", "measured", "tranquil", "muted", "calm", "serene", "sedate"];
const LEVELS: usize = 8;

const NAMES: [&str; 20] = [
    "Arbor", "Beacon", "Cedar", "Delta", "Ember", "Falcon", "Granite", "Harbor", "Iris", "Juniper",
    "Kestrel", "Lumen", "Meridian", "Nimbus", "Orchid", "Pinnacle", "Quarry", "Redwood", "Summit", "Tundra",
];
const SUFFIXES: [&str; 5] = ["Industries", "Holdings", "Systems", "Group", "Partners"];
const POSITIVE: [&str; 10] =
    ["good", "strong", "gains", "growth", "improved", "robust", "solid", "progress", "confident", "success"];
const NEGATIVE: [&str; 10] =
    ["bad", "weak", "losses", "decline", "concern", "warning", "failure", "crisis", "criticism", "pessimistic"];
const OPENERS: [&str; 5] = ["reports on", "faces questions over", "responds to", "updates investors on", "is linked to"];

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_stocks: usize,
    /// Number of weekly grid boundaries.
    pub n_periods: usize,
    pub seed: u64,
    /// Correlation between the encoded level and the standardized latent log-vol.
    pub signal_strength: f64,
    /// Logistic slope of the negative-polarity lean, scaled by `signal_strength`.
    pub sentiment_strength: f64,
    /// Stationary mean of daily log-volatility.
    pub mean_log_vol: f64,
    pub persistence: f64,
    pub innovation_std: f64,
    /// Poisson mean of news items per stock and week.
    pub news_rate: f64,
    /// First trading date; moved forward to the next Friday.
    pub start: NaiveDate,
    /// ESG phrases to draw from; the shipped vocabulary when empty.
    pub palette: Vec<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_stocks: 40,
            n_periods: 150,
            seed: 7,
            signal_strength: 0.9,
            sentiment_strength: 0.5,
            mean_log_vol: 0.015f64.ln(),
            persistence: 0.9,
            innovation_std: 0.5 * (1.0f64 - 0.81).sqrt(),
            news_rate: 2.0,
            start: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
            palette: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.n_stocks == 0 {
            return bad("n_stocks must be >= 1");
        }
        if self.n_periods < 3 {
            return bad("n_periods must be >= 3");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return bad("persistence must lie in [0, 1)");
        }
        if !(self.innovation_std >= 0.0 && self.innovation_std.is_finite()) {
            return bad("innovation_std must be non-negative");
        }
        if !(self.news_rate > 0.0 && self.news_rate.is_finite()) {
            return bad("news_rate must be positive");
        }
        if !self.mean_log_vol.is_finite() || !self.sentiment_strength.is_finite() {
            return bad("mean_log_vol and sentiment_strength must be finite");
        }
        Ok(())
    }

    fn stationary_std(&self) -> f64 {
        self.innovation_std / (1.0 - self.persistence * self.persistence).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub ticker: String,
    pub t: usize,
    /// Daily volatility of the returns dated in `(b_t, b_{t+1}]`.
    pub latent_vol: f64,
    /// Items published in `[b_{t-1}, b_t)` that describe this volatility.
    pub news_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimTruth {
    pub rows: Vec<TruthRow>,
}

impl SimTruth {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ticker,period,latent_vol\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.ticker, r.t, r.latent_vol).unwrap();
        }
        out
    }

    pub fn emitted(&self) -> usize {
        self.rows.iter().map(|r| r.news_ids.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub news_jsonl: String,
    pub prices_csv: String,
    pub tickers_csv: String,
    pub truth: SimTruth,
    /// Weekly boundaries `b_0 .. b_{n_periods - 1}`.
    pub boundaries: Vec<DateTime<Utc>>,
}

impl SimOutput {
    /// Write `news.jsonl`, `prices.csv`, `tickers.csv`, `truth.csv` and the sample
    /// vocabulary and lexicon into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("news.jsonl"), &self.news_jsonl)?;
        std::fs::write(dir.join("prices.csv"), &self.prices_csv)?;
        std::fs::write(dir.join("tickers.csv"), &self.tickers_csv)?;
        std::fs::write(dir.join("truth.csv"), self.truth.to_csv())?;
        std::fs::write(dir.join("esg_vocabulary.csv"), SAMPLE_VOCABULARY)?;
        std::fs::write(dir.join("sentiment_lexicon.csv"), SAMPLE_LEXICON)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RawItem<'a> {
    id: &'a str,
    timestamp: DateTime<Utc>,
    text: &'a str,
    tickers: [&'a str; 1],
}

pub fn ticker_name(i: usize) -> String {
    format!("SIM{i:02}")
}

fn company_name(i: usize) -> String {
    let (name, suffix) = (NAMES[i % NAMES.len()], SUFFIXES[(i / NAMES.len()) % SUFFIXES.len()]);
    match i / (NAMES.len() * SUFFIXES.len()) {
        0 => format!("{name} {suffix}"),
        k => format!("{name} {suffix} {k}"),
    }
}

fn shipped_palette() -> Vec<String> {
    SAMPLE_VOCABULARY.lines().skip(1).filter_map(|l| l.split(',').next()).map(str::to_string).collect()
}

/// Encoded level in `0..=8` for a standardized log-vol `z`.
fn signal_level(z: f64, beta: f64, noise: f64) -> usize {
    let x = beta * z + (1.0 - beta * beta).sqrt() * noise;
    (2.0 * x + 4.0).round().clamp(0.0, LEVELS as f64) as usize
}

fn sentence(rng: &mut ChaCha20Rng, p_positive: f64) -> String {
    let words: Vec<&str> = (0..2)
        .map(|_| {
            let pool = if rng.random_bool(p_positive) { &POSITIVE } else { &NEGATIVE };
            *pool.choose(rng).unwrap()
        })
        .collect();
    format!("Commentary was {} and {}.", words[0], words[1])
}

fn item_text(rng: &mut ChaCha20Rng, company: &str, phrase: &str, level: usize, p_positive: f64) -> String {
    let mut tone: Vec<&str> = STORM_TOKENS.choose_multiple(rng, level).copied().collect();
    tone.extend(CALM_TOKENS.choose_multiple(rng, LEVELS - level).copied());
    tone.shuffle(rng);
    let opener = OPENERS.choose(rng).unwrap();
    let first = sentence(rng, p_positive);
    let second = sentence(rng, p_positive);
    format!("{company} {opener} {phrase}. Trading desks call the mood {}. {first} {second}", tone.join(" "))
}

pub fn generate(config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let palette = if config.palette.is_empty() { shipped_palette() } else { config.palette.clone() };
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let mut first = config.start;
    while first.weekday() != Weekday::Fri {
        first = first.succ_opt().unwrap();
    }
    let p = config.n_periods;
    let fridays: Vec<NaiveDate> = (0..p).map(|j| first + Duration::weeks(j as i64)).collect();
    let boundaries: Vec<DateTime<Utc>> = fridays.iter().map(|&d| close_instant(d)).collect();

    let sd = config.stationary_std();
    let innovation = Normal::new(0.0, config.innovation_std).unwrap();
    let poisson = Poisson::new(config.news_rate).unwrap();
    let mut prices = String::from("date,ticker,close\n");
    let mut tickers = String::from("ticker,alias,market\n");
    let mut news: Vec<(DateTime<Utc>, String, String)> = Vec::new();
    let mut truth = SimTruth::default();

    for i in 0..config.n_stocks {
        let ticker = ticker_name(i);
        let company = company_name(i);
        writeln!(tickers, "{ticker},{company},SIM").unwrap();

        // h[j] drives the returns dated in (b_j, b_{j+1}]
        let mut h = Vec::with_capacity(p - 1);
        let z0: f64 = rng.sample(StandardNormal);
        h.push(config.mean_log_vol + sd * z0);
        for j in 1..p - 1 {
            let prev = h[j - 1] - config.mean_log_vol;
            h.push(config.mean_log_vol + config.persistence * prev + innovation.sample(&mut rng));
        }

        let mut price = 100.0f64;
        writeln!(prices, "{},{ticker},{price}", fridays[0]).unwrap();
        for j in 0..p - 1 {
            let vol = h[j].exp();
            let mut day = fridays[j].succ_opt().unwrap();
            while day <= fridays[j + 1] {
                if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
                    let z: f64 = rng.sample(StandardNormal);
                    price *= (vol * z).exp();
                    writeln!(prices, "{day},{ticker},{price}").unwrap();
                }
                day = day.succ_opt().unwrap();
            }
        }

        for (t, &ht) in h.iter().enumerate() {
            let mut row = TruthRow { ticker: ticker.clone(), t, latent_vol: ht.exp(), news_ids: Vec::new() };
            if t >= 1 {
                let z = if sd > 0.0 { (ht - config.mean_log_vol) / sd } else { 0.0 };
                let lean = config.sentiment_strength * config.signal_strength * z;
                let p_positive = 1.0 / (1.0 + lean.exp());
                let count = poisson.sample(&mut rng) as usize;
                for k in 0..count {
                    let offset = rng.random_range(0..7 * 86_400i64);
                    let ts = boundaries[t - 1] + Duration::seconds(offset);
                    let noise: f64 = rng.sample(StandardNormal);
                    let level = signal_level(z, config.signal_strength, noise);
                    let phrase = palette.choose(&mut rng).unwrap();
                    let text = item_text(&mut rng, &company, phrase, level, p_positive);
                    let id = format!("{ticker}-{t:04}-{k:02}");
                    row.news_ids.push(id.clone());
                    news.push((ts, id, text));
                }
            }
            truth.rows.push(row);
        }
    }

    news.sort();
    let mut news_jsonl = String::new();
    let ticker_of = |id: &str| id.split('-').next().unwrap().to_string();
    for (ts, id, text) in &news {
        let tk = ticker_of(id);
        let raw = RawItem { id, timestamp: *ts, text, tickers: [&tk] };
        news_jsonl.push_str(&serde_json::to_string(&raw).unwrap());
        news_jsonl.push('\n');
    }
    truth.rows.sort_by(|a, b| (a.t, &a.ticker).cmp(&(b.t, &b.ticker)));
    Ok(SimOutput { news_jsonl, prices_csv: prices, tickers_csv: tickers, truth, boundaries })
}

/// Per-ticker latent volatility keyed by period, for quick lookups in tests and reports.
pub fn truth_map(truth: &SimTruth) -> BTreeMap<(String, usize), f64> {
    truth.rows.iter().map(|r| ((r.ticker.clone(), r.t), r.latent_vol)).collect()
}
