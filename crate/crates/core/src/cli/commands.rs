use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{load_gen_config, DatasetSource, ExperimentConfig};
use crate::datagen::{self, generate, imbalance_ratio, Dataset};
use crate::error::{Error, Result};
use crate::eval::{per_class_table, read_predictions, render_bar_chart, write_predictions, Constraint, Table};
use crate::trainer::{
    head_classes, metrics_from_predictions, run, save_checkpoint, split_test_scenes, MetricsReport, Strategy,
    TrainError, TrainerConfig,
};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Generates the configured dataset into `<out>/dataset` and returns that
/// directory.
pub fn cmd_gen(config: &Path, out: Option<&Path>, quiet: bool) -> Result<PathBuf> {
    let (gen, cfg_out) = load_gen_config(config)?;
    let out = out.map(Path::to_path_buf).or(cfg_out).unwrap_or_else(|| PathBuf::from("out"));
    let ds = generate(&gen)?;
    let dir = out.join("dataset");
    datagen::save(&ds, &dir)?;
    if !quiet {
        println!("wrote {} instances to {}", ds.len(), dir.display());
        println!("imbalance ratio: {}", imbalance_ratio(&ds.labels)?);
    }
    Ok(dir)
}

/// The experiment's dataset; a generated one is also written to
/// `<out>/dataset`.
fn obtain_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Generate(g) => {
            let ds = generate(g)?;
            datagen::save(&ds, &out.join("dataset"))?;
            Ok(ds)
        }
        DatasetSource::Path(p) => datagen::load(p),
    }
}

struct Job {
    strategy: Strategy,
    hidden: Vec<usize>,
    seed: u64,
    dir: PathBuf,
}

/// Trains, evaluates and writes one run directory. On divergence the last
/// good state is checkpointed before the error is returned.
fn run_job(cfg: &ExperimentConfig, ds: &Dataset, pool: &[usize], test: &[usize], job: &Job) -> Result<MetricsReport, TrainError> {
    create_dir(&job.dir)?;
    let classifier = cfg.classifier(ds.dim(), ds.num_classes(), job.seed);
    let weightnet = cfg.weightnet(ds.num_classes(), &job.hidden, job.seed);
    let trainer = TrainerConfig {
        strategy: job.strategy,
        seed: job.seed,
        ..cfg.trainer.clone()
    };
    let (outcome, report, records) = match run(ds, pool, test, &classifier, &weightnet, &trainer, &cfg.eval.spec()) {
        Ok(r) => r,
        Err(e) => {
            if let Some(state) = e.last_good() {
                save_checkpoint(state, &job.dir)?;
            }
            write_text(&job.dir.join("error.txt"), &format!("{e}\n"))?;
            return Err(e);
        }
    };
    save_checkpoint(&outcome.state, &job.dir)?;
    write_json(&job.dir.join("metrics.json"), &report)?;
    write_text(&job.dir.join("per_class.csv"), &per_class_table(&report.reports)?.to_csv()?)?;
    write_predictions(&job.dir.join("predictions.jsonl"), &records)?;
    if cfg.eval.chart {
        write_text(&job.dir.join("chart.svg"), &render_bar_chart(&report.reports[0])?)?;
    }
    Ok(report)
}

/// Runs jobs in parallel; results come back in job order. The first error
/// (in job order) is returned after every job has finished.
fn run_jobs(cfg: &ExperimentConfig, out: &Path, jobs: &[Job]) -> Result<Vec<MetricsReport>, TrainError> {
    let ds = obtain_dataset(cfg, out)?;
    let (pool, test) = split_test_scenes(&ds, cfg.eval.test_fraction, cfg.eval.split_seed)?;
    if test.is_empty() {
        return Err(Error::Argument("test split is empty; raise test_fraction or add scenes".into()).into());
    }
    let results: Vec<Result<MetricsReport, TrainError>> =
        jobs.par_iter().map(|job| run_job(cfg, &ds, &pool, &test, job)).collect();
    results.into_iter().collect()
}

fn summary_line(report: &MetricsReport, k_values: &[usize]) -> String {
    let c = report.reports[0].constraint;
    let parts: Vec<String> = k_values
        .iter()
        .filter_map(|&k| report.row(c, k).map(|r| format!("mR@{k}={:.4}", r.mean_recall)))
        .collect();
    format!("{} seed {} ({}): {}", report.strategy, report.seed, c.short(), parts.join(" "))
}

/// Trains one strategy per seed into `<out>/runs/<strategy>/<seed>`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    strategy: Option<Strategy>,
    quiet: bool,
) -> Result<Vec<MetricsReport>, TrainError> {
    let strategy = strategy.unwrap_or(cfg.trainer.strategy);
    let jobs: Vec<Job> = cfg
        .seeds
        .iter()
        .map(|&seed| Job {
            strategy,
            hidden: cfg.weightnet.hidden_sizes.clone(),
            seed,
            dir: out.join("runs").join(strategy.as_str()).join(seed.to_string()),
        })
        .collect();
    let reports = run_jobs(cfg, out, &jobs)?;
    if !quiet {
        for r in &reports {
            println!("{}", summary_line(r, &cfg.eval.k_values));
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalOutput {
    head_classes: Vec<usize>,
    summary: Vec<crate::trainer::SummaryRow>,
    reports: Vec<crate::eval::RecallReport>,
}

/// Recall reports for a prediction dump, written to `out`.
pub fn cmd_eval(predictions: &Path, cfg: Option<&ExperimentConfig>, out: &Path, quiet: bool) -> Result<()> {
    let records = read_predictions(predictions)?;
    if records.is_empty() {
        return Err(Error::format(predictions, "no prediction records"));
    }
    let eval = cfg.map(|c| c.eval.clone()).unwrap_or_default();
    let c = records[0].scores.len();
    let mut counts = vec![0usize; c];
    for r in &records {
        for &g in &r.gt {
            if g >= c {
                return Err(Error::format(predictions, format!("label {g} out of range for {c} classes")));
            }
            counts[g] += 1;
        }
    }
    let head = head_classes(&counts);
    let (summary, reports) = metrics_from_predictions(&records, &eval.k_values, &eval.constraints, &head)?;
    create_dir(out)?;
    write_text(&out.join("per_class.csv"), &per_class_table(&reports)?.to_csv()?)?;
    if eval.chart {
        write_text(&out.join("chart.svg"), &render_bar_chart(&reports[0])?)?;
    }
    if !quiet {
        for r in &summary {
            println!("{} mR@{} = {:.4}", r.constraint, r.k, r.mean_recall);
        }
    }
    write_json(
        &out.join("eval.json"),
        &EvalOutput {
            head_classes: head,
            summary,
            reports,
        },
    )
}

/// Mean and sample standard deviation over seeds of one summary entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub constraint: Constraint,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub head_mean: Option<f64>,
    pub tail_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub strategy: Strategy,
    pub weightnet: Option<String>,
    pub seeds: Vec<u64>,
    pub stats: Vec<MetricStat>,
}

impl AggregateRow {
    pub fn stat(&self, constraint: Constraint, k: usize) -> Option<&MetricStat> {
        self.stats.iter().find(|s| s.constraint == constraint && s.k == k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k_values: Vec<usize>,
    pub constraints: Vec<Constraint>,
    pub rows: Vec<AggregateRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mean_of(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn layout(report: &MetricsReport) -> (Vec<usize>, Vec<Constraint>) {
    let mut ks = Vec::new();
    let mut cs = Vec::new();
    for r in &report.summary {
        if !ks.contains(&r.k) {
            ks.push(r.k);
        }
        if !cs.contains(&r.constraint) {
            cs.push(r.constraint);
        }
    }
    (ks, cs)
}

/// Aggregates per-seed reports of one configuration into a row. All reports
/// must share K values and constraints.
pub fn aggregate(label: &str, reports: &[MetricsReport]) -> Result<AggregateRow> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Argument(format!("{label}: no runs to aggregate")))?;
    let (ks, cs) = layout(first);
    if reports.iter().any(|r| layout(r) != (ks.clone(), cs.clone())) {
        return Err(Error::Argument(format!("{label}: runs use different K values or constraints")));
    }
    let mut stats = Vec::new();
    for &c in &cs {
        for &k in &ks {
            let rows: Vec<_> = reports.iter().map(|r| r.row(c, k).expect("same layout")).collect();
            let (mean, std) = mean_std(&rows.iter().map(|r| r.mean_recall).collect::<Vec<_>>());
            stats.push(MetricStat {
                constraint: c,
                k,
                mean,
                std,
                head_mean: mean_of(&rows.iter().map(|r| r.head_recall).collect::<Vec<_>>()),
                tail_mean: mean_of(&rows.iter().map(|r| r.tail_recall).collect::<Vec<_>>()),
            });
        }
    }
    Ok(AggregateRow {
        label: label.to_string(),
        strategy: first.strategy,
        weightnet: first.weightnet.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        stats,
    })
}

fn comparison(rows: Vec<AggregateRow>) -> Result<Comparison> {
    let first = rows.first().ok_or_else(|| Error::Argument("nothing to compare".into()))?;
    let mut k_values: Vec<usize> = Vec::new();
    let mut constraints: Vec<Constraint> = Vec::new();
    for s in &first.stats {
        if !k_values.contains(&s.k) {
            k_values.push(s.k);
        }
        if !constraints.contains(&s.constraint) {
            constraints.push(s.constraint);
        }
    }
    for r in &rows {
        let same = r.stats.len() == first.stats.len()
            && r.stats.iter().zip(&first.stats).all(|(a, b)| a.k == b.k && a.constraint == b.constraint);
        if !same {
            return Err(Error::Argument(format!(
                "{} and {} were evaluated with different K values or constraints",
                first.label, r.label
            )));
        }
    }
    Ok(Comparison {
        k_values,
        constraints,
        rows,
    })
}

impl Comparison {
    pub fn table(&self) -> Table {
        let mut header = vec!["label".to_string(), "strategy".into(), "weightnet".into(), "seeds".into()];
        for c in &self.constraints {
            for k in &self.k_values {
                header.push(format!("mR@{k}_{}_mean", c.short()));
                header.push(format!("mR@{k}_{}_std", c.short()));
            }
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.label.clone(),
                    r.strategy.to_string(),
                    r.weightnet.clone().unwrap_or_default(),
                    r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                ];
                for s in &r.stats {
                    row.push(format!("{:.6}", s.mean));
                    row.push(format!("{:.6}", s.std));
                }
                row
            })
            .collect();
        Table { header, rows }
    }

    fn write(&self, out: &Path, stem: &str) -> Result<()> {
        create_dir(out)?;
        write_text(&out.join(format!("{stem}.csv")), &self.table().to_csv()?)?;
        write_json(&out.join(format!("{stem}.json")), self)
    }
}

fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Metrics of a run directory: its own `metrics.json`, or those of its
/// numeric seed subdirectories in seed order.
fn collect_metrics(dir: &Path) -> Result<Vec<MetricsReport>> {
    let own = dir.join("metrics.json");
    if own.is_file() {
        return Ok(vec![read_metrics(&own)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if let Some(seed) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse().ok()) {
            if path.join("metrics.json").is_file() {
                seeds.push((seed, path));
            }
        }
    }
    if seeds.is_empty() {
        return Err(Error::Argument(format!("{} holds no metrics.json", dir.display())));
    }
    seeds.sort();
    seeds.iter().map(|(_, p)| read_metrics(&p.join("metrics.json"))).collect()
}

fn label_of(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Writes `<out>/compare.{csv,json}`, one row per run directory.
pub fn cmd_compare(runs: &[PathBuf], out: &Path, quiet: bool) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Argument("compare needs at least two run directories".into()));
    }
    let rows = runs
        .iter()
        .map(|dir| aggregate(&label_of(dir), &collect_metrics(dir)?))
        .collect::<Result<Vec<_>>>()?;
    let cmp = comparison(rows)?;
    cmp.write(out, "compare")?;
    if !quiet {
        print!("{}", cmp.table().to_csv()?);
    }
    Ok(cmp)
}

/// Trains `ml_mwn` for every configured weight-net layout and writes
/// `<out>/reports/ablation.{csv,json}`, one row per layout.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, quiet: bool) -> Result<Comparison, TrainError> {
    let strategy = Strategy::MlMwn;
    let archs = &cfg.ablation.architectures;
    let labels: Vec<String> = archs.iter().map(|h| cfg.weightnet(1, h, 0).label()).collect();
    let mut jobs = Vec::new();
    for (hidden, label) in archs.iter().zip(&labels) {
        for &seed in &cfg.seeds {
            jobs.push(Job {
                strategy,
                hidden: hidden.clone(),
                seed,
                dir: out.join("runs").join("ablation").join(label).join(seed.to_string()),
            });
        }
    }
    let reports = run_jobs(cfg, out, &jobs)?;
    let rows = reports
        .chunks(cfg.seeds.len())
        .zip(&labels)
        .map(|(chunk, label)| aggregate(label, chunk))
        .collect::<Result<Vec<_>>>()?;
    let cmp = comparison(rows)?;
    cmp.write(&out.join("reports"), "ablation")?;
    if !quiet {
        print!("{}", cmp.table().to_csv()?);
    }
    Ok(cmp)
}
