//! Prices, simple returns, realized volatility, the period grid and the
//! supervised dataset of (pooled news features, forward volatility) pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc, Weekday};
use serde::{Deserialize, Serialize};

use crate::features::PooledFeatures;
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum MarketError {
    #[error("prices row {row}: {msg}")]
    Row { row: u64, msg: String },
    #[error("series {0} needs at least two prices")]
    TooShort(String),
    #[error("realized volatility of an empty return set")]
    NoReturns,
    #[error("period {t} + horizon {delta} is beyond the grid ({len} boundaries)")]
    BeyondGrid { t: usize, delta: usize, len: usize },
    #[error("horizon must be at least one period")]
    ZeroHorizon,
    #[error("grid: {0}")]
    Grid(String),
    #[error("split: validation end {val_end} must be after train end {train_end}")]
    BadSplit { train_end: usize, val_end: usize },
    #[error("no feature row joined a target")]
    EmptyJoin,
    #[error("feature dimensions differ across examples")]
    RaggedFeatures,
    #[error("leakage at ({ticker}, {t}): {msg}")]
    Leakage { ticker: String, t: usize, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Instant a daily close is taken at: the end of its calendar day, UTC.
pub fn close_instant(date: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&date.and_hms_opt(23, 59, 59).unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub ticker: String,
    pub points: Vec<(NaiveDate, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub ticker: String,
    pub points: Vec<(NaiveDate, f64)>,
}

/// Read a `date,ticker,close` CSV into one date-sorted series per ticker (sorted by ticker).
pub fn load_prices(source: &str) -> Result<Vec<PriceSeries>, MarketError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "ticker", "close"] {
        return Err(MarketError::Row { row: 1, msg: "expected header date,ticker,close".into() });
    }
    let mut by_ticker: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let err = |msg: String| MarketError::Row { row, msg };
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|_| err(format!("unparseable date {:?}", &record[0])))?;
        let ticker = record[1].to_string();
        if ticker.is_empty() {
            return Err(err("empty ticker".into()));
        }
        let close: f64 =
            record[2].parse().map_err(|_| err(format!("unparseable close {:?}", &record[2])))?;
        if !(close.is_finite() && close > 0.0) {
            return Err(err(format!("close must be positive, found {close}")));
        }
        if by_ticker.entry(ticker.clone()).or_default().insert(date, close).is_some() {
            return Err(err(format!("duplicate row for {ticker} on {date}")));
        }
    }
    Ok(by_ticker
        .into_iter()
        .map(|(ticker, pts)| PriceSeries { ticker, points: pts.into_iter().collect() })
        .collect())
}

/// `r_t = p_t / p_{t-1} - 1` for consecutive prices.
pub fn simple_returns<T: Real>(prices: &[T]) -> Vec<T> {
    prices.windows(2).map(|w| w[1] / w[0] - T::one()).collect()
}

impl PriceSeries {
    /// Returns dated at the later price of each consecutive pair.
    pub fn returns(&self) -> Result<ReturnSeries, MarketError> {
        if self.points.len() < 2 {
            return Err(MarketError::TooShort(self.ticker.clone()));
        }
        let closes: Vec<f64> = self.points.iter().map(|p| p.1).collect();
        let points = self.points[1..]
            .iter()
            .zip(simple_returns(&closes))
            .map(|(p, r)| (p.0, r))
            .collect();
        Ok(ReturnSeries { ticker: self.ticker.clone(), points })
    }

    /// Last close at or before `instant`.
    pub fn close_at(&self, instant: DateTime<Utc>) -> Option<f64> {
        let n = self.points.partition_point(|p| close_instant(p.0) <= instant);
        n.checked_sub(1).map(|i| self.points[i].1)
    }
}

/// Uncentered realized volatility `sqrt(sum r^2 / K)` and `K`.
pub fn realized_volatility<T: Real>(returns: &[T]) -> Result<(T, usize), MarketError> {
    if returns.is_empty() {
        return Err(MarketError::NoReturns);
    }
    let ss: T = returns.iter().map(|&r| r * r).sum();
    Ok(((ss / T::of_usize(returns.len())).sqrt(), returns.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    #[default]
    Weekly,
    Daily,
}

/// Period boundaries; period `t` ends at `boundaries[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub frequency: Frequency,
    pub boundaries: Vec<DateTime<Utc>>,
}

impl TimeGrid {
    pub fn new(frequency: Frequency, boundaries: Vec<DateTime<Utc>>) -> Result<Self, MarketError> {
        if boundaries.len() < 2 {
            return Err(MarketError::Grid("need at least two boundaries".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MarketError::Grid("boundaries must be strictly increasing".into()));
        }
        let step = boundaries[1] - boundaries[0];
        if boundaries.windows(2).any(|w| w[1] - w[0] != step) {
            return Err(MarketError::Grid("boundaries must be uniformly spaced".into()));
        }
        Ok(Self { frequency, boundaries })
    }

    /// `count` weekly boundaries at Friday 23:59:59 UTC starting from the first Friday on or
    /// after `from`.
    pub fn weekly(from: NaiveDate, count: usize) -> Result<Self, MarketError> {
        let mut first = from;
        while first.weekday() != Weekday::Fri {
            first = first.succ_opt().unwrap();
        }
        let b = (0..count).map(|i| close_instant(first + Duration::weeks(i as i64))).collect();
        Self::new(Frequency::Weekly, b)
    }

    pub fn daily(from: NaiveDate, count: usize) -> Result<Self, MarketError> {
        let b = (0..count).map(|i| close_instant(from + Duration::days(i as i64))).collect();
        Self::new(Frequency::Daily, b)
    }

    /// Grid spanning `[first, last]`: weekly uses every Friday in range, daily every day.
    pub fn covering(frequency: Frequency, first: NaiveDate, last: NaiveDate) -> Result<Self, MarketError> {
        match frequency {
            Frequency::Weekly => {
                let mut f = first;
                while f.weekday() != Weekday::Fri {
                    f = f.succ_opt().unwrap();
                }
                let count = if f > last { 0 } else { ((last - f).num_days() / 7 + 1) as usize };
                Self::weekly(first, count)
            }
            Frequency::Daily => Self::daily(first, ((last - first).num_days() + 1).max(0) as usize),
        }
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn boundary(&self, t: usize) -> DateTime<Utc> {
        self.boundaries[t]
    }

    /// News windows `(t, boundary(t - w), boundary(t))` for every `t >= w`.
    pub fn windows(&self, w: usize) -> Vec<(usize, DateTime<Utc>, DateTime<Utc>)> {
        (w.max(1)..self.len()).map(|t| (t, self.boundaries[t - w.max(1)], self.boundaries[t])).collect()
    }

    /// Index of the last boundary at or before `instant`.
    pub fn index_at_or_before(&self, instant: DateTime<Utc>) -> Option<usize> {
        self.boundaries.partition_point(|b| *b <= instant).checked_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolTarget {
    pub ticker: String,
    pub t: usize,
    pub delta: usize,
    pub v: f64,
    pub k: usize,
    pub first_return: NaiveDate,
    pub last_return: NaiveDate,
}

pub const DEFAULT_MIN_SAMPLES: usize = 3;

/// Realized volatility of the returns dated in `(boundary(t), boundary(t + delta)]`;
/// `None` when fewer than `min_samples` returns fall in that window.
pub fn forward_vol_target(
    returns: &ReturnSeries,
    grid: &TimeGrid,
    t: usize,
    delta: usize,
    min_samples: usize,
) -> Result<Option<VolTarget>, MarketError> {
    if delta == 0 {
        return Err(MarketError::ZeroHorizon);
    }
    if t + delta >= grid.len() {
        return Err(MarketError::BeyondGrid { t, delta, len: grid.len() });
    }
    let (lo, hi) = (grid.boundary(t), grid.boundary(t + delta));
    let start = returns.points.partition_point(|p| close_instant(p.0) <= lo);
    let end = returns.points.partition_point(|p| close_instant(p.0) <= hi);
    let window = &returns.points[start..end];
    if window.len() < min_samples.max(1) {
        return Ok(None);
    }
    let rs: Vec<f64> = window.iter().map(|p| p.1).collect();
    let (v, k) = realized_volatility(&rs)?;
    Ok(Some(VolTarget {
        ticker: returns.ticker.clone(),
        t,
        delta,
        v,
        k,
        first_return: window[0].0,
        last_return: window[window.len() - 1].0,
    }))
}

/// Every available target for every ticker and period.
pub fn build_targets(
    returns: &[ReturnSeries],
    grid: &TimeGrid,
    delta: usize,
    min_samples: usize,
) -> Result<Vec<VolTarget>, MarketError> {
    let mut out = Vec::new();
    for series in returns {
        for t in 0..grid.len().saturating_sub(delta) {
            if let Some(target) = forward_vol_target(series, grid, t, delta, min_samples)? {
                out.push(target);
            }
        }
    }
    Ok(out)
}

/// Simple return of each ticker over each grid period `(boundary(t-1), boundary(t)]`,
/// from the last closes at or before the two boundaries.
pub fn period_returns(prices: &[PriceSeries], grid: &TimeGrid) -> BTreeMap<(String, usize), f64> {
    let mut out = BTreeMap::new();
    for series in prices {
        let closes: Vec<Option<f64>> = grid.boundaries.iter().map(|&b| series.close_at(b)).collect();
        for t in 1..grid.len() {
            if let (Some(a), Some(b)) = (closes[t - 1], closes[t]) {
                out.insert((series.ticker.clone(), t), b / a - 1.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitConfig {
    pub fn assign(&self, t: usize) -> Split {
        if t <= self.train_end {
            Split::Train
        } else if t <= self.val_end {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: PooledFeatures,
    pub target: VolTarget,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub grid: TimeGrid,
    pub window: usize,
    pub delta: usize,
    pub split: SplitConfig,
    pub universe: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub joined: usize,
    pub dropped_missing_target: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub warnings: Vec<String>,
}

/// Inner join of features and targets on `(ticker, t)`, sorted by `(t, ticker)`.
pub fn build_dataset(
    features: Vec<PooledFeatures>,
    targets: &[VolTarget],
    grid: &TimeGrid,
    window: usize,
    delta: usize,
    split: SplitConfig,
) -> Result<(Dataset, BuildReport), MarketError> {
    if split.val_end <= split.train_end {
        return Err(MarketError::BadSplit { train_end: split.train_end, val_end: split.val_end });
    }
    let by_key: HashMap<(&str, usize), &VolTarget> =
        targets.iter().filter(|x| x.delta == delta).map(|x| ((x.ticker.as_str(), x.t), x)).collect();
    let mut report = BuildReport::default();
    let mut examples = Vec::new();
    for f in features {
        match by_key.get(&(f.ticker.as_str(), f.t)) {
            Some(&target) => {
                let split = split.assign(f.t);
                examples.push(Example { features: f, target: target.clone(), split });
            }
            None => report.dropped_missing_target += 1,
        }
    }
    if examples.is_empty() {
        return Err(MarketError::EmptyJoin);
    }
    examples.sort_by(|a, b| {
        (a.features.t, &a.features.ticker).cmp(&(b.features.t, &b.features.ticker))
    });
    let (ds, de) = (examples[0].features.s_pooled.len(), examples[0].features.e_pooled.len());
    if examples.iter().any(|e| e.features.s_pooled.len() != ds || e.features.e_pooled.len() != de) {
        return Err(MarketError::RaggedFeatures);
    }
    for e in &examples {
        match e.split {
            Split::Train => report.train += 1,
            Split::Validation => report.validation += 1,
            Split::Test => report.test += 1,
        }
    }
    report.joined = examples.len();
    if report.test == 0 {
        report.warnings.push("test split is empty".into());
    }
    if report.train == 0 {
        report.warnings.push("train split is empty".into());
    }
    let universe = examples.iter().map(|e| e.features.ticker.clone()).collect();
    let dataset = Dataset { examples, grid: grid.clone(), window, delta, split, universe };
    check_leakage(&dataset)?;
    Ok((dataset, report))
}

/// Every example must satisfy `latest news < boundary(t) <= first target return`, with
/// its target window ending at `boundary(t + delta)`.
pub fn check_leakage(dataset: &Dataset) -> Result<(), MarketError> {
    let mut last_non_test = None;
    let mut first_test = None;
    for e in &dataset.examples {
        let f = &e.features;
        let leak = |msg: String| MarketError::Leakage { ticker: f.ticker.clone(), t: f.t, msg };
        if f.ticker != e.target.ticker || f.t != e.target.t {
            return Err(leak("feature and target keys differ".into()));
        }
        if f.t >= dataset.grid.len() || f.t + dataset.delta >= dataset.grid.len() {
            return Err(leak("period outside grid".into()));
        }
        let boundary = dataset.grid.boundary(f.t);
        if f.latest_news >= boundary {
            return Err(leak(format!("news at {} not before boundary {boundary}", f.latest_news)));
        }
        if close_instant(e.target.first_return) <= boundary {
            return Err(leak(format!("target return on {} not after boundary", e.target.first_return)));
        }
        if close_instant(e.target.last_return) > dataset.grid.boundary(f.t + dataset.delta) {
            return Err(leak("target return beyond horizon".into()));
        }
        match e.split {
            Split::Test => first_test = Some(first_test.map_or(f.t, |x: usize| x.min(f.t))),
            _ => last_non_test = Some(last_non_test.map_or(f.t, |x: usize| x.max(f.t))),
        }
    }
    if let (Some(a), Some(b)) = (last_non_test, first_test) {
        if a >= b {
            return Err(MarketError::Leakage {
                ticker: String::new(),
                t: b,
                msg: "test period not after all train/validation periods".into(),
            });
        }
    }
    Ok(())
}

impl Dataset {
    pub fn split_examples(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.e_pooled.len())
    }

    pub fn sentiment_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.s_pooled.len())
    }
}
