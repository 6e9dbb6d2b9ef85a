//! Forecast error metrics, the sentiment-only baseline, quintile portfolios and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::market::{Dataset, Split};
use crate::model::{predict_rows, sample_posterior, LogRow, ModelConfig, ModelError, PosteriorEnsemble, Row, SamplerConfig};
use crate::scalar::Real;

pub const QUINTILES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions to score")]
    Empty,
    #[error("quintile split needs at least 5 tickers, got {0}")]
    TooFewTickers(usize),
    #[error("non-finite prediction for {0}")]
    NonFinite(String),
    #[error("split {0:?} has no examples")]
    EmptySplit(Split),
    #[error("report parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// `(rmse, mae)` over `(prediction, truth)` pairs.
pub fn rmse_mae<T: Real>(pairs: &[(T, T)]) -> Result<(T, T), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = T::of_usize(pairs.len());
    let se: T = pairs.iter().map(|&(p, y)| (p - y) * (p - y)).sum();
    let ae: T = pairs.iter().map(|&(p, y)| (p - y).abs()).sum();
    Ok(((se / n).sqrt(), ae / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

impl ModelMetrics {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, EvalError> {
        let (rmse, mae) = rmse_mae(pairs)?;
        Ok(Self { rmse, mae, n: pairs.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub market: String,
    pub horizon: usize,
    pub models: BTreeMap<String, ModelMetrics>,
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("market,horizon,model,rmse,mae,n\n");
    for r in reports {
        for (name, m) in &r.models {
            writeln!(out, "{},{},{},{},{},{}", r.market, r.horizon, name, m.rmse, m.mae, m.n).unwrap();
        }
    }
    out
}

pub fn parse_metrics_csv(source: &str) -> Result<Vec<MetricReport>, EvalError> {
    let mut reader = csv::Reader::from_reader(source.as_bytes());
    let mut out: Vec<MetricReport> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let err = |msg: String| EvalError::Parse { row, msg };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", rec.len())));
        }
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| err(format!("bad number {:?}", &rec[k])));
        let horizon: usize = rec[1].parse().map_err(|_| err(format!("bad horizon {:?}", &rec[1])))?;
        let n: usize = rec[5].parse().map_err(|_| err(format!("bad count {:?}", &rec[5])))?;
        let m = ModelMetrics { rmse: num(3)?, mae: num(4)?, n };
        match out.last_mut() {
            Some(last) if last.market == rec[0] && last.horizon == horizon => {
                last.models.insert(rec[2].to_string(), m);
            }
            _ => out.push(MetricReport {
                market: rec[0].to_string(),
                horizon,
                models: BTreeMap::from([(rec[2].to_string(), m)]),
            }),
        }
    }
    Ok(out)
}

/// Model-space rows of one split.
pub fn dataset_rows<T: Real>(dataset: &Dataset, split: Split, floor: f64) -> Vec<Row<T>> {
    dataset.split_examples(split).iter().map(|e| Row::new(&e.features, e.target.v, floor)).collect()
}

/// `mcfg` with its input sizes taken from `dataset`.
pub fn fit_config(dataset: &Dataset, mcfg: &ModelConfig) -> ModelConfig {
    ModelConfig { sentiment_dim: dataset.sentiment_dim(), embedding_dim: dataset.embedding_dim(), ..mcfg.clone() }
}

/// Sample the posterior on the train split, logging validation error.
pub fn train_on_dataset(
    dataset: &Dataset,
    mcfg: &ModelConfig,
    scfg: &SamplerConfig,
) -> Result<(PosteriorEnsemble<f64>, Vec<LogRow>), EvalError> {
    let cfg = fit_config(dataset, mcfg);
    let train = dataset_rows::<f64>(dataset, Split::Train, cfg.target_floor);
    if train.is_empty() {
        return Err(EvalError::EmptySplit(Split::Train));
    }
    let val = dataset_rows::<f64>(dataset, Split::Validation, cfg.target_floor);
    Ok(sample_posterior(&train, &val, &cfg, scfg)?)
}

/// The same pipeline with the embedding branch removed.
pub fn senti_baseline_train(
    dataset: &Dataset,
    mcfg: &ModelConfig,
    scfg: &SamplerConfig,
) -> Result<(PosteriorEnsemble<f64>, Vec<LogRow>), EvalError> {
    train_on_dataset(dataset, &mcfg.sentiment_only(), scfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub ticker: String,
    pub t: usize,
    pub v_hat: f64,
    pub ensemble_std: f64,
    pub v_true: f64,
}

/// Ensemble predictions for every example of `split`, in dataset order.
pub fn score_split(ensemble: &PosteriorEnsemble<f64>, dataset: &Dataset, split: Split) -> Result<Vec<ScoredExample>, EvalError> {
    let examples = dataset.split_examples(split);
    let rows = dataset_rows::<f64>(dataset, split, ensemble.config.target_floor);
    let preds = predict_rows(ensemble, &rows)?;
    examples
        .iter()
        .zip(preds)
        .map(|(e, (v_hat, std))| {
            if !v_hat.is_finite() {
                return Err(EvalError::NonFinite(format!("{} at {}", e.features.ticker, e.features.t)));
            }
            Ok(ScoredExample { ticker: e.features.ticker.clone(), t: e.features.t, v_hat, ensemble_std: std, v_true: e.target.v })
        })
        .collect()
}

/// Mean training-split target; the simplest no-information forecast.
pub fn train_mean_target(dataset: &Dataset) -> Result<f64, EvalError> {
    let train = dataset.split_examples(Split::Train);
    if train.is_empty() {
        return Err(EvalError::EmptySplit(Split::Train));
    }
    Ok(train.iter().map(|e| e.target.v).sum::<f64>() / train.len() as f64)
}

/// Sort ascending by prediction (ties by ticker) and cut into five contiguous buckets;
/// the first `n % 5` buckets take one extra member. Bucket 4 holds the highest forecasts.
pub fn quintile_split(preds: &[(String, f64)]) -> Result<[Vec<String>; QUINTILES], EvalError> {
    if preds.len() < QUINTILES {
        return Err(EvalError::TooFewTickers(preds.len()));
    }
    if let Some((t, _)) = preds.iter().find(|p| p.1.is_nan()) {
        return Err(EvalError::NonFinite(t.clone()));
    }
    let mut sorted: Vec<&(String, f64)> = preds.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let (base, extra) = (sorted.len() / QUINTILES, sorted.len() % QUINTILES);
    let mut out: [Vec<String>; QUINTILES] = Default::default();
    let mut it = sorted.into_iter();
    for (q, bucket) in out.iter_mut().enumerate() {
        let size = base + usize::from(q < extra);
        bucket.extend(it.by_ref().take(size).map(|p| p.0.clone()));
    }
    Ok(out)
}

/// Buckets per formation period.
pub type Buckets = BTreeMap<usize, [Vec<String>; QUINTILES]>;

/// Quintile buckets for every period present in `scored`.
pub fn buckets_by_period(scored: &[ScoredExample]) -> Result<Buckets, EvalError> {
    let mut by_t: BTreeMap<usize, Vec<(String, f64)>> = BTreeMap::new();
    for s in scored {
        by_t.entry(s.t).or_default().push((s.ticker.clone(), s.v_hat));
    }
    let mut out = Buckets::new();
    for (t, preds) in by_t {
        if preds.len() >= QUINTILES {
            out.insert(t, quintile_split(&preds)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodQuintile {
    pub t: usize,
    pub q: usize,
    pub members: Vec<String>,
    pub mean_return: f64,
    pub std_return: f64,
    /// Members with a complete holding-period return.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileSummary {
    pub q: usize,
    /// Average of the per-period bucket means.
    pub mean_return: f64,
    /// Population std of all member returns pooled over periods.
    pub std_return: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuintileReport {
    pub holding: usize,
    pub periods: Vec<PeriodQuintile>,
    pub summary: Vec<QuintileSummary>,
    pub dropped: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Compounded return over periods `t+1 ..= t+holding`, where `returns[(ticker, j)]`
/// is the simple return from boundary `j-1` to `j`.
pub fn holding_return(returns: &BTreeMap<(String, usize), f64>, ticker: &str, t: usize, holding: usize) -> Option<f64> {
    let mut growth = 1.0;
    for j in t + 1..=t + holding {
        growth *= 1.0 + returns.get(&(ticker.to_string(), j))?;
    }
    Some(growth - 1.0)
}

/// Equal-weight statistics of every bucket; members without a complete holding-period
/// return are dropped and counted. Periods whose buckets are all empty after dropping are skipped.
pub fn portfolio_stats(buckets: &Buckets, returns: &BTreeMap<(String, usize), f64>, holding: usize) -> QuintileReport {
    let mut periods = Vec::new();
    let mut pooled: [Vec<f64>; QUINTILES] = Default::default();
    let mut means: [Vec<f64>; QUINTILES] = Default::default();
    let mut dropped = 0;
    for (&t, qs) in buckets {
        let rets: Vec<Vec<f64>> = qs
            .iter()
            .map(|members| {
                let r: Vec<f64> = members.iter().filter_map(|m| holding_return(returns, m, t, holding)).collect();
                dropped += members.len() - r.len();
                r
            })
            .collect();
        if rets.iter().all(Vec::is_empty) {
            continue;
        }
        for (q, r) in rets.into_iter().enumerate() {
            let (mean, std) = mean_std(&r);
            if !r.is_empty() {
                means[q].push(mean);
            }
            pooled[q].extend_from_slice(&r);
            periods.push(PeriodQuintile { t, q, members: qs[q].clone(), mean_return: mean, std_return: std, n: r.len() });
        }
    }
    let summary = (0..QUINTILES)
        .map(|q| QuintileSummary {
            q,
            mean_return: mean_std(&means[q]).0,
            std_return: mean_std(&pooled[q]).1,
            n: pooled[q].len(),
        })
        .collect();
    QuintileReport { holding, periods, summary, dropped }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean_std(&rx).0, mean_std(&ry).0);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// One line of `quintiles.csv`; `period` is `None` for the across-period summary.
#[derive(Debug, Clone, PartialEq)]
pub struct QuintileRow {
    pub period: Option<usize>,
    pub quintile: usize,
    pub holding: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub n: usize,
}

pub fn quintile_rows(reports: &[QuintileReport]) -> Vec<QuintileRow> {
    let mut out = Vec::new();
    for r in reports {
        for p in &r.periods {
            out.push(QuintileRow { period: Some(p.t), quintile: p.q, holding: r.holding, mean_return: p.mean_return, std_return: p.std_return, n: p.n });
        }
        for s in &r.summary {
            out.push(QuintileRow { period: None, quintile: s.q, holding: r.holding, mean_return: s.mean_return, std_return: s.std_return, n: s.n });
        }
    }
    out
}

pub fn quintiles_csv(reports: &[QuintileReport]) -> String {
    let mut out = String::from("period,quintile,holding,mean_return,std_return,n\n");
    for r in quintile_rows(reports) {
        let period = r.period.map_or("all".to_string(), |t| t.to_string());
        writeln!(out, "{period},{},{},{},{},{}", r.quintile, r.holding, r.mean_return, r.std_return, r.n).unwrap();
    }
    out
}

pub fn parse_quintiles_csv(source: &str) -> Result<Vec<QuintileRow>, EvalError> {
    let mut reader = csv::Reader::from_reader(source.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let err = |msg: String| EvalError::Parse { row, msg };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", rec.len())));
        }
        let int = |k: usize| rec[k].parse::<usize>().map_err(|_| err(format!("bad integer {:?}", &rec[k])));
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| err(format!("bad number {:?}", &rec[k])));
        let period = if &rec[0] == "all" { None } else { Some(int(0)?) };
        out.push(QuintileRow { period, quintile: int(1)?, holding: int(2)?, mean_return: num(3)?, std_return: num(4)?, n: int(5)? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
}

/// Per-quintile return std and mean for each holding period, plus error bars per model.
pub fn plot_series(metrics: &[MetricReport], quintiles: &[QuintileReport]) -> Vec<Series> {
    let mut out = Vec::new();
    for r in quintiles {
        let x: Vec<usize> = r.summary.iter().map(|s| s.q).collect();
        out.push(Series { name: format!("quintile_return_std_holding{}", r.holding), x: x.clone(), y: r.summary.iter().map(|s| s.std_return).collect() });
        out.push(Series { name: format!("quintile_return_mean_holding{}", r.holding), x, y: r.summary.iter().map(|s| s.mean_return).collect() });
    }
    let mut models: BTreeMap<&str, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for m in metrics {
        for (name, mm) in &m.models {
            let e = models.entry(name).or_default();
            e.0.push(m.horizon);
            e.1.push(mm.rmse);
        }
    }
    for (name, (x, y)) in models {
        out.push(Series { name: format!("rmse_by_horizon_{name}"), x, y });
    }
    out
}

/// Write `metrics.csv`, `quintiles.csv` and `plotdata.json` into `dir`.
pub fn emit_report(metrics: &[MetricReport], quintiles: &[QuintileReport], dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(metrics))?;
    std::fs::write(dir.join("quintiles.csv"), quintiles_csv(quintiles))?;
    let plot = serde_json::json!({ "series": plot_series(metrics, quintiles) });
    std::fs::write(dir.join("plotdata.json"), serde_json::to_string_pretty(&plot)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        assert_eq!(rmse_mae(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), (0.0, 0.0));
        let (rmse, mae) = rmse_mae(&[(0.0, 3.0), (0.0, 4.0)]).unwrap();
        assert!((rmse - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae, 3.5);
        assert!(matches!(rmse_mae::<f64>(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn quintile_sizes() {
        let preds = |n: usize| (0..n).map(|i| (format!("T{i:02}"), i as f64)).collect::<Vec<_>>();
        let sizes = |n| quintile_split(&preds(n)).unwrap().map(|b| b.len());
        assert_eq!(sizes(10), [2; 5]);
        assert_eq!(sizes(12), [3, 3, 2, 2, 2]);
        assert!(matches!(quintile_split(&preds(4)), Err(EvalError::TooFewTickers(4))));
        let b = quintile_split(&preds(10)).unwrap();
        assert_eq!(b[4], vec!["T08", "T09"]);
    }

    #[test]
    fn ties_break_by_ticker() {
        let preds: Vec<(String, f64)> = ["E", "D", "C", "B", "A"].iter().map(|t| (t.to_string(), 1.0)).collect();
        let b = quintile_split(&preds).unwrap();
        assert_eq!(b.map(|x| x[0].clone()), ["A", "B", "C", "D", "E"].map(String::from));
    }

    #[test]
    fn portfolio_examples() {
        let returns = BTreeMap::from([
            (("A".to_string(), 1), 0.01),
            (("B".to_string(), 1), 0.03),
            (("A".to_string(), 2), 0.02),
        ]);
        let mut buckets = Buckets::new();
        let mut qs: [Vec<String>; 5] = Default::default();
        qs[0] = vec!["A".into(), "B".into()];
        buckets.insert(0, qs.clone());
        let r = portfolio_stats(&buckets, &returns, 1);
        assert!((r.periods[0].mean_return - 0.02).abs() < 1e-15);
        assert!((r.periods[0].std_return - 0.01).abs() < 1e-15);
        assert_eq!(r.dropped, 0);

        let r2 = portfolio_stats(&buckets, &returns, 2);
        assert_eq!(r2.dropped, 1);
        assert_eq!(r2.periods[0].n, 1);
        assert!((r2.periods[0].mean_return - (1.01 * 1.02 - 1.0)).abs() < 1e-15);
        assert_eq!(holding_return(&returns, "A", 0, 2), Some(1.01 * 1.02 - 1.0));
        assert_eq!(holding_return(&returns, "B", 0, 2), None);
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(quintiles_csv(&[]), "period,quintile,holding,mean_return,std_return,n\n");
        assert_eq!(metrics_csv(&[]), "market,horizon,model,rmse,mae,n\n");
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // ties get the average rank: ranks y = [0.5, 0.5, 2]
        let expect = 1.5 / (2.0f64 * 1.5).sqrt();
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 7.0]) - expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rmse_matches_oracle_and_dominates_mae(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..100)) {
            let (rmse, mae) = rmse_mae(&pairs).unwrap();
            let mut se = 0.0;
            let mut ae = 0.0;
            for &(p, y) in &pairs {
                se += (p - y) * (p - y);
                ae += (p - y).abs();
            }
            let n = pairs.len() as f64;
            prop_assert!((rmse - (se / n).sqrt()).abs() <= 1e-12 * rmse.max(1e-300));
            prop_assert!((mae - ae / n).abs() <= 1e-12 * mae.max(1e-300));
            prop_assert!(rmse >= mae * (1.0 - 1e-12));
        }

        #[test]
        fn quintiles_match_sort_and_slice(vals in prop::collection::vec(-3.0f64..3.0, 5..60)) {
            let preds: Vec<(String, f64)> = vals.iter().enumerate().map(|(i, &v)| (format!("K{i:03}"), v)).collect();
            let b = quintile_split(&preds).unwrap();
            let mut oracle = preds.clone();
            oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let n = oracle.len();
            let mut start = 0;
            for q in 0..5 {
                let size = n / 5 + usize::from(q < n % 5);
                let want: Vec<String> = oracle[start..start + size].iter().map(|p| p.0.clone()).collect();
                prop_assert_eq!(&b[q], &want);
                start += size;
            }
            let mut all: Vec<String> = b.iter().flatten().cloned().collect();
            all.sort();
            let mut universe: Vec<String> = preds.iter().map(|p| p.0.clone()).collect();
            universe.sort();
            prop_assert_eq!(all, universe);
            let transformed: Vec<(String, f64)> = preds.iter().map(|(t, v)| (t.clone(), (2.0 * v).exp() + 1.0)).collect();
            prop_assert_eq!(quintile_split(&transformed).unwrap(), b);
        }

        #[test]
        fn csv_round_trips(rmse in prop::collection::vec(0.0f64..1.0, 1..4), holding in 1usize..3) {
            let metrics: Vec<MetricReport> = rmse.iter().enumerate().map(|(h, &r)| MetricReport {
                market: "SIM".into(),
                horizon: h + 1,
                models: BTreeMap::from([
                    ("full".to_string(), ModelMetrics { rmse: r, mae: r / 3.0, n: 10 + h }),
                    ("senti".to_string(), ModelMetrics { rmse: r * 1.1, mae: r / 7.0, n: 10 + h }),
                ]),
            }).collect();
            prop_assert_eq!(parse_metrics_csv(&metrics_csv(&metrics)).unwrap(), metrics);
            let q = QuintileReport {
                holding,
                periods: vec![PeriodQuintile { t: 3, q: 0, members: vec!["A".into()], mean_return: rmse[0] / 9.0, std_return: 0.0, n: 1 }],
                summary: (0..5).map(|q| QuintileSummary { q, mean_return: rmse[0] * q as f64 / 3.0, std_return: 0.1, n: 1 }).collect(),
                dropped: 0,
            };
            prop_assert_eq!(parse_quintiles_csv(&quintiles_csv(std::slice::from_ref(&q))).unwrap(), quintile_rows(&[q]));
        }
    }
}
