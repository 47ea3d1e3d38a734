//! Experiment outputs and the run, sweep and generation-export drivers
//! behind the `fedgc` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, KEYS};
use crate::data::{load_external_pool, write_pool, LabeledPool};
use crate::error::{Error, Result};
use crate::evaluation::RoundRecord;
use crate::orchestrator::{run_experiment, ExperimentOutput, Simulation};

pub const METRICS_HEADER: &str =
    "round,global_test_acc,avg_local_global_acc,divergence,mean_pairwise_cosine,mean_pairwise_l2,attack_acc";

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GENERATED_FILE: &str = "generated.csv";
pub const PLOTDATA_FILE: &str = "plotdata.csv";

/// Metrics CSV text: one row per round, six decimals, empty attack field when
/// the attack did not run that round.
pub fn metrics_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let attack = r.attack_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.round,
            r.global_test_acc,
            r.avg_local_global_acc,
            r.divergence,
            r.mean_pairwise_cosine,
            r.mean_pairwise_l2,
            attack
        );
    }
    out
}

pub fn emit_metrics(records: &[RoundRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no round records to write"));
    }
    fs::write(path, metrics_csv(records))?;
    Ok(())
}

/// One finished run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub axis_value: String,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

fn metric_values(r: &RoundRecord) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("global_test_acc", Some(r.global_test_acc)),
        ("avg_local_global_acc", Some(r.avg_local_global_acc)),
        ("divergence", Some(r.divergence)),
        ("mean_pairwise_cosine", Some(r.mean_pairwise_cosine)),
        ("mean_pairwise_l2", Some(r.mean_pairwise_l2)),
        ("attack_acc", r.attack_acc),
    ]
}

fn compare_axis(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// Long-format `axis_value,seed,metric,round,value` rows, sorted by axis
/// value (numerically when possible), seed and round.
pub fn plotdata_csv(runs: &[SweepRun]) -> String {
    let mut rows: Vec<(&str, u64, usize, &'static str, f64)> = Vec::new();
    for run in runs {
        for r in &run.records {
            for (metric, value) in metric_values(r) {
                if let Some(v) = value {
                    rows.push((&run.axis_value, run.seed, r.round, metric, v));
                }
            }
        }
    }
    rows.sort_by(|a, b| compare_axis(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = String::from("axis_value,seed,metric,round,value\n");
    for (axis, seed, round, metric, v) in rows {
        let _ = writeln!(out, "{axis},{seed},{metric},{round},{v:.6}");
    }
    out
}

pub fn emit_plotdata(runs: &[SweepRun], path: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::invalid("no completed runs to write"));
    }
    fs::write(path, plotdata_csv(runs))?;
    Ok(())
}

/// Writes the resolved config, metrics and (when any) generated pool into `dir`.
pub fn write_run_dir(cfg: &ExperimentConfig, output: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_config_string())?;
    emit_metrics(&output.records, &dir.join(METRICS_FILE))?;
    let generated = output.generated_union()?;
    if !generated.is_empty() {
        write_pool(&generated, cfg.task.feature_dim, &dir.join(GENERATED_FILE))?;
    }
    Ok(())
}

pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutput> {
    let output = run_experiment(cfg)?;
    write_run_dir(cfg, &output, dir)?;
    Ok(output)
}

/// Sweep file contents:
///
/// ```text
/// base = base.cfg
/// axis = generation.total_budget
/// values = 0, 1000, 2000
/// repeats = 3
/// ```
///
/// Repeat `r` runs with seed `base.seed + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: PathBuf,
    pub axis: String,
    pub values: Vec<String>,
    pub repeats: usize,
}

impl SweepSpec {
    pub fn parse_str(text: &str, base_dir: Option<&Path>) -> Result<SweepSpec> {
        let (mut base, mut axis, mut values, mut repeats) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let value = value.trim().to_string();
            match key.trim() {
                "base" => base = Some(PathBuf::from(value)),
                "axis" => axis = Some(value),
                "values" => values = Some(value.split(',').map(|v| v.trim().to_string()).collect::<Vec<_>>()),
                "repeats" => {
                    repeats = Some(
                        value
                            .parse::<usize>()
                            .map_err(|_| Error::config("repeats", format!("line {line}: bad count `{value}`")))?,
                    )
                }
                other => return Err(Error::config(other, format!("line {line}: unknown sweep key"))),
            }
        }
        let mut base = base.ok_or_else(|| Error::config("base", "missing"))?;
        if let (Some(dir), true) = (base_dir, base.is_relative()) {
            base = dir.join(base);
        }
        let spec = SweepSpec {
            base,
            axis: axis.ok_or_else(|| Error::config("axis", "missing"))?,
            values: values.ok_or_else(|| Error::config("values", "missing"))?,
            repeats: repeats.unwrap_or(1),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<SweepSpec> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::parse_str(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if !KEYS.contains(&self.axis.as_str()) {
            return Err(Error::config("axis", format!("`{}` is not a config key", self.axis)));
        }
        if self.axis == "seed" {
            return Err(Error::config("axis", "seeds are swept through `repeats`"));
        }
        if self.values.is_empty() || self.values.iter().any(String::is_empty) {
            return Err(Error::config("values", "needs at least one non-empty value"));
        }
        if self.repeats < 1 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        Ok(())
    }

    /// Every (axis value, config) pair of the sweep, seeds included, checked
    /// before any run starts.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut out = Vec::new();
        for value in &self.values {
            let cfg = base.with_override(&self.axis, value)?;
            for r in 0..self.repeats {
                let mut c = cfg.clone();
                c.seed = base.seed + r as u64;
                out.push((value.clone(), c));
            }
        }
        Ok(out)
    }
}

fn dir_name(axis: &str, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{axis}-{clean}")
}

/// Runs a sweep into `out/<axis>-<value>/seed-<seed>/` and writes
/// `out/plotdata.csv`.
pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRun>> {
    let base = ExperimentConfig::from_file(&spec.base)?;
    let runs = spec.expand(&base)?;
    let mut done = Vec::with_capacity(runs.len());
    for (value, cfg) in runs {
        let dir = out.join(dir_name(&spec.axis, &value)).join(format!("seed-{}", cfg.seed));
        let output = run_to_dir(&cfg, &dir)?;
        done.push(SweepRun {
            axis_value: value,
            seed: cfg.seed,
            records: output.records,
        });
    }
    emit_plotdata(&done, &out.join(PLOTDATA_FILE))?;
    Ok(done)
}

/// Generates (without training) and writes every client's generated pool.
pub fn export_generated(cfg: &ExperimentConfig, path: &Path) -> Result<LabeledPool> {
    let sim = Simulation::new(cfg)?;
    let pool = LabeledPool::from_samples(sim.clients().iter().flat_map(|c| c.generated.samples().iter().cloned()).collect())?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_pool(&pool, cfg.task.feature_dim, path)?;
    Ok(pool)
}

/// Checks that a pool file can be imported under `cfg` and returns per-class counts.
pub fn check_import(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<usize>> {
    let pool = load_external_pool(path, cfg.task.num_classes)?;
    if let Some(d) = pool.feature_dim().filter(|&d| d != cfg.task.feature_dim) {
        return Err(Error::shape(format!("pool has {d} features, config expects {}", cfg.task.feature_dim)));
    }
    Ok(pool.label_counts(cfg.task.num_classes))
}

/// Process exit code for an error: 1 for configuration problems, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_config_error() {
        1
    } else {
        2
    }
}
