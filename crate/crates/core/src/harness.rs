//! Experiment orchestration: single runs, k-ablation grids, robustness
//! evaluation, dataset generation and cross-seed reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use diffcore::snapshot;

use crate::config::{Pathway, RunConfig};
use crate::dataset::{generate_expert_dataset, load_dataset, save_dataset, SsmTrajectory};
use crate::envs::{EnvSpec, OBS_LEN};
use crate::error::{Error, Result};
use crate::metrics::{CsvWriter, CSV_HEADER, CSV_VERSION, METRIC_NAMES};
use crate::ssm::{imagination_log_likelihood, StateSpaceModel};
use crate::trainers::{train_obs_space, train_state_space, TrainFailure};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SNAPSHOT_FILE: &str = "snapshot.bin";
pub const CONFIG_COPY: &str = "run.cfg";
pub const EXPERT_FILE: &str = "expert.traj";
pub const HELDOUT_FILE: &str = "heldout.traj";
pub const REPORT_VERSION: &str = "#condyn-report-v1";

/// Paths written by a completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub snapshot: PathBuf,
}

/// Load a dataset, or generate and save it when the file does not exist.
pub fn ensure_dataset(path: &Path, spec: &EnvSpec, count: usize, seed: u64, name: &str) -> Result<Vec<SsmTrajectory>> {
    if path.exists() {
        return load_dataset(path, OBS_LEN, spec.action_dim());
    }
    log::info!("generating {count} expert trajectories into {}", path.display());
    let data = generate_expert_dataset(spec, count, seed, name)?;
    save_dataset(&data, path)?;
    Ok(data)
}

/// Train according to `config`, writing the metrics CSV, the final snapshot
/// and a copy of the config into `config.out_dir`. On divergence the last
/// good parameters are saved before the error is returned.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput> {
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_COPY), config.to_text())?;
    let metrics = dir.join(METRICS_FILE);
    let snapshot_path = dir.join(SNAPSHOT_FILE);
    let mut writer = CsvWriter::create(&metrics)?;
    let outcome = match config.pathway {
        Pathway::Obs => train_obs_space(config, &mut writer),
        Pathway::Ssm => {
            let spec = config.spec();
            let train_path = config.dataset.clone().unwrap_or_else(|| dir.join(EXPERT_FILE));
            let eval_path = config.eval_dataset.clone().unwrap_or_else(|| dir.join(HELDOUT_FILE));
            let train = ensure_dataset(&train_path, &spec, config.expert_trajectories, config.seed, "expert-data")?;
            let heldout = ensure_dataset(&eval_path, &spec, config.eval_trajectories, config.seed, "heldout-data")?;
            train_state_space(config, &train, &heldout, &mut writer)
        }
    };
    match outcome {
        Ok(result) => {
            snapshot::save(&result.snapshot, &snapshot_path)?;
            Ok(RunOutput { dir, metrics, snapshot: snapshot_path })
        }
        Err(TrainFailure { error, last_good, update }) => {
            if let Some(ps) = last_good {
                snapshot::save(&ps, &snapshot_path)?;
                log::error!("update {update} failed; last good parameters saved to {}", snapshot_path.display());
            }
            Err(error)
        }
    }
}

/// Output directory name of one ablation cell.
pub fn cell_name(k: usize, alpha: f64, seed: u64) -> String {
    format!("k{k}-a{alpha}-s{seed}")
}

/// Every `(k, α, seed)` combination as a config with its own output path
/// under `base.out_dir`.
pub fn ablation_plan(base: &RunConfig, ks: &[usize], seeds: &[u64], alphas: &[f64]) -> Result<Vec<RunConfig>> {
    let mut seen = std::collections::BTreeSet::new();
    for &s in seeds {
        if !seen.insert(s) {
            return Err(Error::Config(format!("seed {s} listed twice")));
        }
    }
    let mut cells = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for &k in ks {
        for &alpha in alphas {
            for &seed in seeds {
                let name = cell_name(k, alpha, seed);
                if !names.insert(name.clone()) {
                    return Err(Error::Config(format!("duplicate ablation cell {name}")));
                }
                let mut c = base.clone();
                c.k = k;
                c.alpha = alpha;
                c.seed = seed;
                c.out_dir = base.out_dir.join(name);
                crate::consistency::check_alpha(alpha)?;
                if k == 0 {
                    return Err(Error::Config("k must be >= 1".into()));
                }
                cells.push(c);
            }
        }
    }
    Ok(cells)
}

/// Run independent configs on up to `jobs` worker threads. Results keep
/// the input order.
pub fn run_all(configs: &[RunConfig], jobs: usize) -> Vec<Result<RunOutput>> {
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<RunOutput>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(config) = configs.get(i) else { break };
                let out = run_experiment(config);
                results.lock().expect("result lock")[i] = Some(out);
            });
        }
    });
    results.into_inner().expect("result lock").into_iter().map(|r| r.expect("every cell ran")).collect()
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Imagination log-likelihood of a trained state-space snapshot at
/// `horizon` on the trajectories stored at `data`.
pub fn evaluate_robustness(snapshot_path: &Path, horizon: usize, data: &Path, seed: u64) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    let ps = snapshot::load(snapshot_path)?;
    let model = StateSpaceModel::from_params(&ps)?;
    let dims = model.dims();
    let trajectories = load_dataset(data, dims.obs_len(), dims.action_dim)?;
    imagination_log_likelihood(&model, &ps, &trajectories, horizon, seed)
}

pub fn gen_data(env: &str, episodes: usize, out: &Path, seed: u64) -> Result<()> {
    let spec = EnvSpec::by_name(env)?;
    let data = generate_expert_dataset(&spec, episodes, seed, "expert-data")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_dataset(&data, out)
}

/// Parsed metrics file: rows keyed by update, values per metric column.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub rows: BTreeMap<usize, [Option<f64>; 10]>,
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_VERSION) || lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config(format!("{}: header-version mismatch (expected {CSV_VERSION})", path.display())));
    }
    let mut rows = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::Config(format!("{}: malformed row {}", path.display(), i + 3));
        let mut fields = line.split(',');
        let update: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let mut values = [None; 10];
        for v in values.iter_mut() {
            let f = fields.next().ok_or_else(bad)?;
            *v = if f.is_empty() { None } else { Some(f.parse().map_err(|_| bad())?) };
        }
        if fields.next().is_some() {
            return Err(bad());
        }
        rows.insert(update, values);
    }
    Ok(MetricsTable { rows })
}

/// Experiment id: the run directory name without a trailing `-s<seed>`.
pub fn experiment_id(dir_name: &str) -> String {
    match dir_name.rsplit_once("-s") {
        Some((head, seed)) if !head.is_empty() && !seed.is_empty() && seed.bytes().all(|b| b.is_ascii_digit()) => {
            head.to_string()
        }
        _ => dir_name.to_string(),
    }
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.join(METRICS_FILE).is_file() {
                out.push(p.clone());
            }
            find_runs(&p, out)?;
        }
    }
    Ok(())
}

/// One aggregated value.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub metric: &'static str,
    pub update: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub smoothed_mean: f64,
}

/// Aggregate every run below `runs` by experiment: mean and population
/// standard deviation across seeds for each update present in all of them,
/// plus a trailing moving average of the mean over `window` rows.
pub fn aggregate(runs: &Path, window: usize) -> Result<Vec<ReportRow>> {
    let mut dirs = Vec::new();
    find_runs(runs, &mut dirs)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no runs found in {}", runs.display())));
    }
    let mut groups: BTreeMap<String, Vec<MetricsTable>> = BTreeMap::new();
    for d in &dirs {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        groups.entry(experiment_id(&name)).or_default().push(read_metrics(&d.join(METRICS_FILE))?);
    }
    let window = window.max(1);
    let mut out = Vec::new();
    for (experiment, tables) in groups {
        for (m, metric) in METRIC_NAMES.iter().enumerate() {
            let updates = tables[0].rows.keys().filter(|u| {
                tables.iter().all(|t| t.rows.get(u).is_some_and(|row| row[m].is_some()))
            });
            let mut history: Vec<f64> = Vec::new();
            for &update in updates {
                let values: Vec<f64> = tables.iter().map(|t| t.rows[&update][m].expect("filtered")).collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                history.push(mean);
                let tail = &history[history.len().saturating_sub(window)..];
                let smoothed_mean = tail.iter().sum::<f64>() / tail.len() as f64;
                out.push(ReportRow {
                    experiment: experiment.clone(),
                    metric,
                    update,
                    mean,
                    std,
                    seeds: values.len(),
                    smoothed_mean,
                });
            }
        }
    }
    Ok(out)
}

pub fn emit_report(runs: &Path, out: &Path, window: usize) -> Result<usize> {
    let rows = aggregate(runs, window)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(out)?);
    writeln!(f, "{REPORT_VERSION}\nexperiment,metric,update,mean,std,seeds,smoothed_mean")?;
    for r in &rows {
        writeln!(f, "{},{},{},{},{},{},{}", r.experiment, r.metric, r.update, r.mean, r.std, r.seeds, r.smoothed_mean)?;
    }
    f.flush()?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{MetricsSink, TrainMetrics};

    fn write_run(dir: &Path, values: &[(usize, f64)]) {
        fs::create_dir_all(dir).unwrap();
        let mut w = CsvWriter::create(&dir.join(METRICS_FILE)).unwrap();
        for &(update, v) in values {
            w.record(&TrainMetrics { update, avg_return: Some(v), ..Default::default() }).unwrap();
        }
    }

    #[test]
    fn experiment_ids() {
        assert_eq!(experiment_id("k5-a0.5-s2"), "k5-a0.5");
        assert_eq!(experiment_id("baseline"), "baseline");
        assert_eq!(experiment_id("run-sx"), "run-sx");
    }

    #[test]
    fn report_statistics() {
        let dir = tempfile::tempdir().unwrap();
        write_run(&dir.path().join("exp-s0"), &[(0, 1.0), (1, 5.0), (2, 7.0)]);
        write_run(&dir.path().join("exp-s1"), &[(0, 2.0), (1, 5.0)]);
        write_run(&dir.path().join("exp-s2"), &[(0, 3.0), (1, 5.0)]);
        write_run(&dir.path().join("solo-s0"), &[(0, 4.0), (1, 6.0)]);
        let rows = aggregate(dir.path(), 100).unwrap();
        let exp: Vec<&ReportRow> = rows.iter().filter(|r| r.experiment == "exp").collect();
        assert_eq!(exp.len(), 2);
        assert_eq!(exp[0].mean, 2.0);
        assert!((exp[0].std - 0.816497).abs() < 1e-6);
        assert_eq!(exp[1].std, 0.0);
        assert_eq!(exp[1].smoothed_mean, 3.5);
        let solo: Vec<&ReportRow> = rows.iter().filter(|r| r.experiment == "solo").collect();
        assert_eq!((solo[0].mean, solo[0].std, solo[1].mean), (4.0, 0.0, 6.0));

        let out = dir.path().join("report.csv");
        assert_eq!(emit_report(dir.path(), &out, 1).unwrap(), 4);
        let text = fs::read_to_string(out).unwrap();
        assert!(text.starts_with(REPORT_VERSION));
        assert!(text.contains("exp,avg_return,1,5,0,3,5\n"));
    }

    #[test]
    fn report_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = aggregate(dir.path(), 10).unwrap_err();
        assert!(err.to_string().contains("no runs found"));
        let bad = dir.path().join("x-s0");
        fs::create_dir_all(&bad).unwrap();
        fs::write(bad.join(METRICS_FILE), format!("#condyn-metrics-v0\n{CSV_HEADER}\n")).unwrap();
        assert!(aggregate(dir.path(), 10).unwrap_err().to_string().contains("header-version mismatch"));
    }

    #[test]
    fn ablation_plan_paths_are_unique() {
        let base = RunConfig::parse("out_dir = runs/abl").unwrap();
        let plan = ablation_plan(&base, &[5, 20], &[0, 1, 2], &[0.5]).unwrap();
        assert_eq!(plan.len(), 6);
        let dirs: std::collections::BTreeSet<_> = plan.iter().map(|c| c.out_dir.clone()).collect();
        assert_eq!(dirs.len(), 6);
        assert!(dirs.contains(&PathBuf::from("runs/abl/k20-a0.5-s1")));
        assert!(ablation_plan(&base, &[5], &[1, 1], &[0.5]).is_err());
        assert!(ablation_plan(&base, &[5, 5], &[1], &[0.5]).is_err());
    }

    #[test]
    fn robustness_rejects_zero_horizon() {
        let err = evaluate_robustness(Path::new("missing.bin"), 0, Path::new("missing.traj"), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
