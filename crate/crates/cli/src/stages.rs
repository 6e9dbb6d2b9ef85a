use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use esgvol::evalkit::{
    buckets_by_period, metrics_csv, parse_metrics_csv, plot_series, portfolio_stats, quintiles_csv,
    score_split, senti_baseline_train, train_mean_target, train_on_dataset, MetricReport, ModelMetrics, ScoredExample,
};
use esgvol::features::{featurize, load_lexicon, EmbeddingProvider, ExternalEmbeddings, HashedEmbedder, PooledFeatures};
use esgvol::manifest::{sha256_file, sha256_hex, StageManifest};
use esgvol::market::{build_dataset, build_targets, load_prices, period_returns, Dataset, PriceSeries, Split, TimeGrid};
use esgvol::model::{load_ensemble, write_ensemble, training_log_csv, EnsembleManifest};
use esgvol::newsflow::{extract_esg, load_ticker_dictionary, load_vocabulary, parse_news_stream, topic_histogram, EsgNewsItem};
use esgvol::simgen::{generate, SAMPLE_LEXICON, SAMPLE_VOCABULARY};

use crate::config::{EmbeddingChoice, PipelineConfig};
use crate::error::{CliError, CliResult};

pub const TOP_TOPICS: usize = 15;
const SPLITS: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub workdir: PathBuf,
    pub force: bool,
    pub strict: bool,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

fn parse_split(s: &str) -> Option<Split> {
    SPLITS.into_iter().find(|&x| split_name(x) == s)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))?)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Runtime(anyhow!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).unwrap());
        out.push('\n');
    }
    out
}

pub fn dataset_file(delta: usize) -> String {
    format!("dataset_h{delta}.json")
}

pub fn ensemble_file(model: &str, delta: usize) -> String {
    format!("ensemble_{model}_h{delta}.bin")
}

pub fn predictions_file(model: &str, delta: usize) -> String {
    format!("predictions_{model}_h{delta}.csv")
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    fn input(&self, what: &str, p: &Path) -> CliResult<PathBuf> {
        let full = self.resolve(p);
        if !full.is_file() {
            return Err(CliError::missing(what, &full));
        }
        Ok(full)
    }

    /// Manifest key for a file: relative to the workdir when inside it.
    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.workdir).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn write_manifest(&self, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> CliResult<()> {
        let mut m = StageManifest::new(stage, self.cfg.seed, self.cfg.hash());
        for (dst, files) in [(&mut m.inputs, inputs), (&mut m.outputs, outputs)] {
            for f in files {
                dst.insert(self.key(f), sha256_file(f).with_context(|| format!("hashing {}", f.display()))?);
            }
        }
        write(&self.artifact(&format!("{stage}.manifest.json")), m.to_json())
    }

    fn stale(&self, stage: &str, file: &str, reason: String) -> CliResult<()> {
        if self.force {
            log::warn!("ignoring stale {file} from {stage}: {reason}");
            Ok(())
        } else {
            Err(CliError::Stale { stage: stage.into(), file: file.into(), reason })
        }
    }

    /// Load the manifest of `stage` and check that `files` and everything the stage
    /// consumed still hash to the recorded values.
    fn upstream(&self, stage: &str, files: &[String]) -> CliResult<StageManifest> {
        let path = self.artifact(&format!("{stage}.manifest.json"));
        if !path.is_file() {
            return Err(CliError::Runtime(anyhow!("missing {}; run `{stage}` first", path.display())));
        }
        let m: StageManifest = read_json(&path)?;
        if m.config_hash != self.cfg.hash() {
            self.stale(stage, &self.key(&path), "configuration changed since the stage ran".into())?;
        }
        for f in files {
            if !m.outputs.contains_key(f) {
                return Err(CliError::Runtime(anyhow!("{stage} did not produce {f}; rerun `{stage}`")));
            }
        }
        let consumed = m.inputs.iter().chain(m.outputs.iter().filter(|(k, _)| files.contains(k)));
        for (k, recorded) in consumed {
            let p = self.resolve(Path::new(k));
            match sha256_file(&p) {
                Ok(h) if &h == recorded => {}
                Ok(_) => self.stale(stage, k, "content hash differs from manifest".into())?,
                Err(e) => self.stale(stage, k, format!("cannot read: {e}"))?,
            }
        }
        Ok(m)
    }

    fn load_prices(&self) -> CliResult<(PathBuf, Vec<PriceSeries>)> {
        let path = self.input("prices", &self.cfg.paths.prices)?;
        let prices = load_prices(&read_text(&path)?).with_context(|| format!("prices {}", path.display()))?;
        Ok((path, prices))
    }

    fn load_grid(&self) -> CliResult<TimeGrid> {
        read_json(&self.artifact("grid.json"))
    }

    fn datasets(&self) -> Vec<String> {
        self.cfg.horizons.iter().map(|&d| dataset_file(d)).collect()
    }

    fn models(&self) -> CliResult<Vec<(String, usize)>> {
        let m = self.upstream("train", &[])?;
        let mut out = Vec::new();
        for &d in &self.cfg.horizons {
            for model in ["full", "senti"] {
                if m.outputs.contains_key(&ensemble_file(model, d)) {
                    out.push((model.to_string(), d));
                }
            }
        }
        Ok(out)
    }
}

pub fn simgen(ctx: &Ctx) -> CliResult<()> {
    let sim = ctx.cfg.sim();
    let out = generate(&sim).map_err(|e| CliError::Usage(e.to_string()))?;
    let p = &ctx.cfg.paths;
    let news = ctx.resolve(&p.news);
    let truth = news.with_file_name("truth.csv");
    let files = [
        (news.clone(), out.news_jsonl.clone()),
        (ctx.resolve(&p.prices), out.prices_csv.clone()),
        (ctx.resolve(&p.tickers), out.tickers_csv.clone()),
        (ctx.resolve(&p.vocabulary), SAMPLE_VOCABULARY.to_string()),
        (ctx.resolve(&p.lexicon), SAMPLE_LEXICON.to_string()),
        (truth, out.truth.to_csv()),
    ];
    for (path, body) in &files {
        write(path, body)?;
    }
    log::info!("simgen: {} stocks, {} periods, {} news items", sim.n_stocks, sim.n_periods, out.truth.emitted());
    let outputs: Vec<PathBuf> = files.into_iter().map(|f| f.0).collect();
    ctx.write_manifest("simgen", &[], &outputs)
}

pub fn extract(ctx: &Ctx) -> CliResult<()> {
    let p = &ctx.cfg.paths;
    let news = ctx.input("news", &p.news)?;
    let vocab_path = ctx.input("vocabulary", &p.vocabulary)?;
    let dict_path = ctx.input("ticker dictionary", &p.tickers)?;
    let vocab = load_vocabulary(&read_text(&vocab_path)?).with_context(|| format!("vocabulary {}", vocab_path.display()))?;
    let dict = load_ticker_dictionary(&read_text(&dict_path)?).with_context(|| format!("tickers {}", dict_path.display()))?;
    let file = File::open(&news).with_context(|| format!("opening {}", news.display()))?;
    let (items, errors) =
        parse_news_stream(BufReader::new(file), ctx.strict).with_context(|| format!("news {}", news.display()))?;
    for e in &errors {
        log::warn!("news {}:{}: skipped ({:?})", news.display(), e.line, e.cause);
    }
    let esg = extract_esg(&items, &vocab, &dict);
    log::info!("extract: {} items read, {} skipped, {} kept", items.len(), errors.len(), esg.len());

    let topics = match (esg.iter().map(|i| i.item.timestamp).min(), esg.iter().map(|i| i.item.timestamp).max()) {
        (Some(lo), Some(hi)) => topic_histogram(&esg, (lo, hi + chrono::Duration::seconds(1)), TOP_TOPICS)
            .context("topic histogram")?
            .to_csv(),
        _ => "topic,count\n".to_string(),
    };
    let (out, tp) = (ctx.artifact("extracted.jsonl"), ctx.artifact("topics.csv"));
    write(&out, jsonl(&esg))?;
    write(&tp, topics)?;
    ctx.write_manifest("extract", &[news, vocab_path, dict_path], &[out, tp])
}

fn grid_from_prices(ctx: &Ctx, prices: &[PriceSeries]) -> CliResult<TimeGrid> {
    let dates = prices.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (lo, hi) = dates.fold((None, None), |(lo, hi), d| {
        (Some(lo.map_or(d, |x: chrono::NaiveDate| x.min(d))), Some(hi.map_or(d, |x: chrono::NaiveDate| x.max(d))))
    });
    let (lo, hi) = lo.zip(hi).ok_or_else(|| anyhow!("price file has no rows"))?;
    Ok(TimeGrid::covering(ctx.cfg.frequency, lo, hi).context("building the time grid")?)
}

pub fn featurize_stage(ctx: &Ctx) -> CliResult<()> {
    ctx.upstream("extract", &["extracted.jsonl".into()])?;
    let extracted = ctx.artifact("extracted.jsonl");
    let items: Vec<EsgNewsItem> = read_jsonl(&extracted)?;
    let lex_path = ctx.input("lexicon", &ctx.cfg.paths.lexicon)?;
    let lexicon = load_lexicon(&read_text(&lex_path)?).with_context(|| format!("lexicon {}", lex_path.display()))?;
    let (prices_path, prices) = ctx.load_prices()?;
    let grid = grid_from_prices(ctx, &prices)?;
    let mut inputs = vec![extracted, lex_path, prices_path];
    let provider: Box<dyn EmbeddingProvider> = match &ctx.cfg.embedding {
        EmbeddingChoice::Hashed { dim, seed } => Box::new(HashedEmbedder::new(*dim, *seed)),
        EmbeddingChoice::External { path } => {
            let path = ctx.input("embeddings", path)?;
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let ext = ExternalEmbeddings::from_reader(BufReader::new(file))
                .with_context(|| format!("embeddings {}", path.display()))?;
            inputs.push(path);
            Box::new(ext)
        }
    };
    let feats = featurize(&items, &grid.windows(ctx.cfg.window), &lexicon, provider.as_ref()).context("featurize")?;
    log::info!("featurize: {} (ticker, period) groups over {} boundaries", feats.len(), grid.len());
    let (fp, gp) = (ctx.artifact("features.jsonl"), ctx.artifact("grid.json"));
    write(&fp, jsonl(&feats))?;
    write(&gp, serde_json::to_string(&grid).unwrap() + "\n")?;
    ctx.write_manifest("featurize", &inputs, &[fp, gp])
}

pub fn dataset(ctx: &Ctx) -> CliResult<()> {
    ctx.upstream("featurize", &["features.jsonl".into(), "grid.json".into()])?;
    let feats: Vec<PooledFeatures> = read_jsonl(&ctx.artifact("features.jsonl"))?;
    let grid = ctx.load_grid()?;
    let (prices_path, prices) = ctx.load_prices()?;
    let mut returns = Vec::new();
    for s in &prices {
        match s.returns() {
            Ok(r) => returns.push(r),
            Err(e) => log::warn!("skipping prices: {e}"),
        }
    }
    let mut outputs = Vec::new();
    let mut reports = BTreeMap::new();
    for &delta in &ctx.cfg.horizons {
        let targets = build_targets(&returns, &grid, delta, ctx.cfg.min_samples).context("forward volatility targets")?;
        let (ds, report) = build_dataset(feats.clone(), &targets, &grid, ctx.cfg.window, delta, ctx.cfg.split)
            .with_context(|| format!("dataset for horizon {delta}"))?;
        for w in &report.warnings {
            log::warn!("dataset h{delta}: {w}");
        }
        log::info!("dataset h{delta}: train {} validation {} test {}", report.train, report.validation, report.test);
        let path = ctx.artifact(&dataset_file(delta));
        write(&path, serde_json::to_string(&ds).unwrap())?;
        outputs.push(path);
        reports.insert(delta.to_string(), report);
    }
    let rp = ctx.artifact("dataset_report.json");
    write(&rp, serde_json::to_string_pretty(&reports).unwrap() + "\n")?;
    outputs.push(rp);
    let inputs = vec![ctx.artifact("features.jsonl"), ctx.artifact("grid.json"), prices_path];
    ctx.write_manifest("dataset", &inputs, &outputs)
}

fn load_dataset(ctx: &Ctx, delta: usize) -> CliResult<(Dataset, String)> {
    let path = ctx.artifact(&dataset_file(delta));
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let ds: Dataset = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((ds, sha256_hex(&bytes)))
}

pub fn train(ctx: &Ctx, senti: bool) -> CliResult<()> {
    ctx.upstream("dataset", &ctx.datasets())?;
    let scfg = ctx.cfg.sampler();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for &delta in &ctx.cfg.horizons {
        let (ds, hash) = load_dataset(ctx, delta)?;
        inputs.push(ctx.artifact(&dataset_file(delta)));
        let mut runs = vec!["full"];
        if senti {
            runs.push("senti");
        }
        for model in runs {
            let started = std::time::Instant::now();
            let (mut ens, log_rows) = match model {
                "full" => train_on_dataset(&ds, &ctx.cfg.model, &scfg),
                _ => senti_baseline_train(&ds, &ctx.cfg.model, &scfg),
            }
            .with_context(|| format!("training {model} model for horizon {delta}"))?;
            ens.provenance.dataset_hash = hash.clone();
            let bin = ctx.artifact(&ensemble_file(model, delta));
            let mut bytes = Vec::new();
            let manifest = write_ensemble(&ens, &mut bytes).context("serializing ensemble")?;
            write(&bin, &bytes)?;
            let side = bin.with_extension("json");
            write(&side, serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
            let lp = ctx.artifact(&format!("train_log_{model}_h{delta}.csv"));
            write(&lp, training_log_csv(&log_rows))?;
            log::info!(
                "train {model} h{delta}: {} samples of {} parameters in {:.1}s",
                ens.len(),
                manifest.params,
                started.elapsed().as_secs_f64()
            );
            outputs.extend([bin, side, lp]);
        }
    }
    ctx.write_manifest("train", &inputs, &outputs)
}

fn write_predictions(path: &Path, rows: &[(Split, ScoredExample)]) -> CliResult<()> {
    let mut out = String::from("ticker,t,split,v_hat,ensemble_std,v_true\n");
    for (split, r) in rows {
        writeln!(out, "{},{},{},{},{},{}", r.ticker, r.t, split_name(*split), r.v_hat, r.ensemble_std, r.v_true).unwrap();
    }
    write(path, out)
}

fn read_predictions(path: &Path, split: Split) -> CliResult<Vec<ScoredExample>> {
    let mut out = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate().skip(1) {
        let bad = || CliError::Runtime(anyhow!("{}:{}: malformed prediction row", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        if parse_split(f[2]).ok_or_else(bad)? != split {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(ScoredExample {
            ticker: f[0].to_string(),
            t: f[1].parse().map_err(|_| bad())?,
            v_hat: num(f[3])?,
            ensemble_std: num(f[4])?,
            v_true: num(f[5])?,
        });
    }
    Ok(out)
}

pub fn predict(ctx: &Ctx) -> CliResult<()> {
    let models = ctx.models()?;
    let files: Vec<String> = models
        .iter()
        .flat_map(|(m, d)| [ensemble_file(m, *d), ensemble_file(m, *d).replace(".bin", ".json")])
        .collect();
    ctx.upstream("train", &files)?;
    ctx.upstream("dataset", &ctx.datasets())?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for (model, delta) in models {
        let bin = ctx.artifact(&ensemble_file(&model, delta));
        let side = bin.with_extension("json");
        let manifest: EnsembleManifest = read_json(&side)?;
        let bytes = fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
        let ens = load_ensemble(&bytes, &manifest).with_context(|| format!("loading {}", bin.display()))?;
        let (ds, hash) = load_dataset(ctx, delta)?;
        if ens.provenance.dataset_hash != hash {
            ctx.stale("train", &ctx.key(&bin), "trained on a different dataset".into())?;
        }
        let mut rows = Vec::new();
        for split in SPLITS {
            if !ds.split_examples(split).is_empty() {
                rows.extend(score_split(&ens, &ds, split).context("prediction")?.into_iter().map(|r| (split, r)));
            }
        }
        let out = ctx.artifact(&predictions_file(&model, delta));
        write_predictions(&out, &rows)?;
        inputs.extend([bin, side, ctx.artifact(&dataset_file(delta))]);
        outputs.push(out);
    }
    inputs.sort();
    inputs.dedup();
    ctx.write_manifest("predict", &inputs, &outputs)
}

pub fn evaluate(ctx: &Ctx) -> CliResult<()> {
    let models = ctx.models()?;
    let files: Vec<String> = models.iter().map(|(m, d)| predictions_file(m, *d)).collect();
    ctx.upstream("predict", &files)?;
    ctx.upstream("dataset", &ctx.datasets())?;
    let mut reports = Vec::new();
    let mut inputs = Vec::new();
    for &delta in &ctx.cfg.horizons {
        let (ds, _) = load_dataset(ctx, delta)?;
        inputs.push(ctx.artifact(&dataset_file(delta)));
        let mut report = MetricReport { market: ctx.cfg.market.clone(), horizon: delta, models: BTreeMap::new() };
        for (model, _) in models.iter().filter(|(_, d)| *d == delta) {
            let path = ctx.artifact(&predictions_file(model, delta));
            let test = read_predictions(&path, Split::Test)?;
            let pairs: Vec<(f64, f64)> = test.iter().map(|r| (r.v_hat, r.v_true)).collect();
            report.models.insert(model.clone(), ModelMetrics::from_pairs(&pairs).context("scoring test split")?);
            inputs.push(path);
        }
        let c = train_mean_target(&ds).context("constant baseline")?;
        let pairs: Vec<(f64, f64)> = ds.split_examples(Split::Test).iter().map(|e| (c, e.target.v)).collect();
        report.models.insert("constant".into(), ModelMetrics::from_pairs(&pairs).context("scoring test split")?);
        for (name, m) in &report.models {
            log::info!("evaluate h{delta} {name}: rmse {:.6} mae {:.6} n {}", m.rmse, m.mae, m.n);
        }
        reports.push(report);
    }
    let out = ctx.artifact("metrics.csv");
    write(&out, metrics_csv(&reports))?;
    ctx.write_manifest("evaluate", &inputs, &[out])
}

pub fn backtest(ctx: &Ctx) -> CliResult<()> {
    let files: Vec<String> = ctx.cfg.horizons.iter().map(|&d| predictions_file("full", d)).collect();
    ctx.upstream("predict", &files)?;
    ctx.upstream("featurize", &["grid.json".into()])?;
    ctx.upstream("evaluate", &["metrics.csv".into()])?;
    let grid = ctx.load_grid()?;
    let (prices_path, prices) = ctx.load_prices()?;
    let returns = period_returns(&prices, &grid);
    let mut reports = Vec::new();
    let mut inputs = vec![ctx.artifact("grid.json"), prices_path, ctx.artifact("metrics.csv")];
    for &delta in &ctx.cfg.horizons {
        let path = ctx.artifact(&predictions_file("full", delta));
        let test = read_predictions(&path, Split::Test)?;
        let buckets = buckets_by_period(&test).context("quintile split")?;
        let report = portfolio_stats(&buckets, &returns, delta);
        if report.dropped > 0 {
            log::warn!("backtest holding {delta}: {} members without a full holding-period return", report.dropped);
        }
        reports.push(report);
        inputs.push(path);
    }
    let metrics: Vec<MetricReport> = parse_metrics_csv(&read_text(&ctx.artifact("metrics.csv"))?).context("metrics.csv")?;
    let (qp, pp) = (ctx.artifact("quintiles.csv"), ctx.artifact("plotdata.json"));
    write(&qp, quintiles_csv(&reports))?;
    let plot = serde_json::json!({ "series": plot_series(&metrics, &reports) });
    write(&pp, serde_json::to_string_pretty(&plot).unwrap() + "\n")?;
    ctx.write_manifest("backtest", &inputs, &[qp, pp])
}

pub fn pipeline(ctx: &Ctx, senti: bool, simulate: bool) -> CliResult<()> {
    if simulate {
        simgen(ctx)?;
    }
    extract(ctx)?;
    featurize_stage(ctx)?;
    dataset(ctx)?;
    train(ctx, senti)?;
    predict(ctx)?;
    evaluate(ctx)?;
    backtest(ctx)
}

