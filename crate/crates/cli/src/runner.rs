//! Executes configs x seeds and writes metric tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sthfl_core::federation::{self, Algorithm, ExperimentConfig};
use sthfl_core::metrics::{MetricsLog, Scope};
use sthfl_core::{Error, Result};

use crate::config::{parse_config, print_config, with_path};
use crate::svg;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const AGGREGATE_HEADER: &str = "round,stage,algorithm,metric,scope,mean,stddev,runs";
pub const SVG_METRIC: &str = "A_sel";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    /// Paths are relative to the output directory.
    pub config: PathBuf,
    pub csv: PathBuf,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hashes: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub runs: Vec<RunRecord>,
    pub aggregate_csv: PathBuf,
    pub svg: Option<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(print_config(config).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The four loss variants compared in the ablation: full objective,
/// `lambda = 0`, `lambda = 1` and both relation terms removed.
pub fn ablation_variants(config: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut full = config.clone();
    full.algorithm = Algorithm::Gldp;
    full.loss.relation_terms = true;
    let mut out = vec![full.clone()];
    for lambda in [0.0, 1.0] {
        let mut v = full.clone();
        v.loss.lambda = lambda;
        out.push(v);
    }
    let mut off = full;
    off.loss.relation_terms = false;
    out.push(off);
    dedup(out)
}

fn dedup(configs: Vec<ExperimentConfig>) -> Vec<ExperimentConfig> {
    let mut seen = std::collections::BTreeSet::new();
    configs
        .into_iter()
        .filter(|c| seen.insert(print_config(c)))
        .collect()
}

/// File name stem: readable label plus a hash prefix to keep configs that
/// share a label apart.
fn file_stem(config: &ExperimentConfig) -> String {
    let mut s: String = config
        .label()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    while s.ends_with('_') {
        s.pop();
    }
    format!("{s}_{}", &config_hash(config)[..8])
}

/// Fails early if `dir` cannot be created or written.
pub fn probe_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| with_path(dir, e))?;
    let probe = dir.join(".sthfl-probe");
    fs::write(&probe, b"").map_err(|e| with_path(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| with_path(&probe, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| with_path(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| with_path(path, e))
}

/// Runs every config with every seed; `seeds` empty means each config's own seed.
pub fn run(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    out: &Path,
    emit_svg: bool,
) -> Result<RunManifest> {
    probe_output_dir(out)?;
    let configs = dedup(configs.to_vec());
    for c in &configs {
        c.validate()?;
    }
    let mut jobs: Vec<(usize, ExperimentConfig)> = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        if seeds.is_empty() {
            jobs.push((i, c.clone()));
        }
        for &seed in seeds {
            jobs.push((i, ExperimentConfig { seed, ..c.clone() }));
        }
    }

    let mut config_hashes = Vec::new();
    let mut config_paths = Vec::new();
    for c in &configs {
        let path = PathBuf::from("configs").join(format!("{}.toml", file_stem(c)));
        write_file(&out.join(&path), print_config(c).as_bytes())?;
        config_hashes.push(config_hash(c));
        config_paths.push(path);
    }

    let results: Vec<(RunRecord, MetricsLog)> = jobs
        .par_iter()
        .map(|(i, c)| {
            let started = Instant::now();
            let log = federation::run_experiment(c)?;
            let label = c.label();
            let stem = file_stem(&configs[*i]);
            let csv = PathBuf::from("runs").join(format!("{stem}_seed{}.csv", c.seed));
            let mut bytes = Vec::new();
            log.write_csv(&mut bytes)?;
            write_file(&out.join(&csv), &bytes)?;
            let wall_clock_secs = started.elapsed().as_secs_f64();
            info!("{label} seed {} finished in {wall_clock_secs:.1}s", c.seed);
            let record = RunRecord {
                label,
                seed: c.seed,
                config_hash: config_hashes[*i].clone(),
                config: config_paths[*i].clone(),
                csv,
                wall_clock_secs,
            };
            Ok((record, log))
        })
        .collect::<Result<_>>()?;

    let names = series_names(&configs);
    let series: Vec<(&str, &MetricsLog)> = jobs
        .iter()
        .zip(&results)
        .map(|((i, _), (_, log))| (names[*i].as_str(), log))
        .collect();
    let aggregate = aggregate_csv(&series);
    write_file(&out.join(AGGREGATE_FILE), aggregate.as_bytes())?;

    let svg = if emit_svg {
        let path = PathBuf::from(format!("{}.svg", SVG_METRIC.to_lowercase()));
        write_file(
            &out.join(&path),
            svg::emit_svg(&aggregate, SVG_METRIC)?.as_bytes(),
        )?;
        Some(path)
    } else {
        None
    };

    let manifest = RunManifest {
        config_hashes,
        seeds: seeds.to_vec(),
        output_dir: out.to_path_buf(),
        runs: results.into_iter().map(|(r, _)| r).collect(),
        aggregate_csv: PathBuf::from(AGGREGATE_FILE),
        svg,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Re-executes the runs recorded in the manifest at `manifest_path` into `out`.
pub fn rerun(manifest_path: &Path, out: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut paths: Vec<&PathBuf> = manifest.runs.iter().map(|r| &r.config).collect();
    paths.sort();
    paths.dedup();
    let configs: Vec<ExperimentConfig> = paths
        .into_iter()
        .map(|p| parse_config(&base.join(p)))
        .collect::<Result<_>>()?;
    run(&configs, &manifest.seeds, out, manifest.svg.is_some())
}

/// Series names for the aggregate table: the config label, suffixed with a
/// hash prefix when two configs share a label.
fn series_names(configs: &[ExperimentConfig]) -> Vec<String> {
    let labels: Vec<String> = configs.iter().map(|c| c.label()).collect();
    labels
        .iter()
        .zip(configs)
        .map(|(l, c)| {
            if labels.iter().filter(|m| *m == l).count() > 1 {
                format!("{l}@{}", &config_hash(c)[..8])
            } else {
                l.clone()
            }
        })
        .collect()
}

/// Mean and sample standard deviation across runs of every ALL-scope row,
/// grouped by series name.
pub fn aggregate_csv(series: &[(&str, &MetricsLog)]) -> String {
    let mut groups: BTreeMap<(&str, usize, usize, &str), Vec<f64>> = BTreeMap::new();
    for (name, log) in series {
        for row in log.rows.iter().filter(|r| r.scope == Scope::All) {
            groups
                .entry((*name, row.round, row.stage, row.metric.name()))
                .or_default()
                .push(row.value);
        }
    }
    let mut out = String::new();
    out.push_str(AGGREGATE_HEADER);
    out.push('\n');
    for ((algorithm, round, stage, metric), values) in groups {
        let (mean, sd) = mean_sd(&values);
        out.push_str(&format!(
            "{round},{stage},{algorithm},{metric},ALL,{mean},{sd},{}\n",
            values.len()
        ));
    }
    out
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_partitions(config: &ExperimentConfig, out: &Path) -> Result<()> {
    probe_output_dir(out)?;
    let timelines = federation::build_timelines(config)?;
    let manifest = sthfl_core::datagen::PartitionManifest {
        format_version: 1,
        dataset: config.dataset_spec(),
        plan: config.partition_plan(),
        seed: config.seed,
    };
    sthfl_core::datagen::export_partitions(out, &timelines, &manifest)?;
    let mut summary = fs::File::create(out.join("summary.txt")).map_err(|e| with_path(out, e))?;
    for t in &timelines {
        let stages: Vec<String> = t
            .stages
            .iter()
            .map(|s| format!("{:?}:{}+{}", s.class_set, s.train.len(), s.test.len()))
            .collect();
        writeln!(summary, "client {} {}", t.client_id, stages.join(" ")).map_err(Error::Io)?;
    }
    Ok(())
}
