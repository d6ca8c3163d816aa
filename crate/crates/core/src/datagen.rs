//! Synthetic data generation and `[N, S, M]` client/stage partitioning.
//!
//! Data is a Gaussian mixture: one center per class drawn from a scaled
//! standard normal, samples drawn isotropically around their class center.
//! [`apply_longtail`] subsamples it into an exponential long-tailed profile and
//! [`partition_clients`] hands each client `S` classes whose samples are spread
//! over `M` stage tasks with drifting class composition.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Share of every (stage, class) slice that goes to the test split.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub class_center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.input_dim < 2 {
            return Err(Error::config("input_dim", "must be at least 2"));
        }
        if self.samples_per_class < 1 {
            return Err(Error::config("samples_per_class", "must be at least 1"));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale.is_finite()) {
            return Err(Error::config(
                "class_center_scale",
                "must be a positive finite number",
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "noise_sigma",
                "must be a positive finite number",
            ));
        }
        Ok(())
    }
}

/// Rows of features with their class labels and stable sample ids.
///
/// Sample ids are assigned once at generation time and follow a sample through
/// every subsampling and partitioning step, so disjointness can be audited.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Shape(format!(
                "labeled set with {} rows, {} labels and {} ids",
                inputs.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            ids,
        })
    }

    pub fn empty(input_dim: usize) -> Self {
        Self {
            inputs: Array2::zeros((0, input_dim)),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Concatenates sets row-wise. All parts must share the input dimension.
    pub fn concat(parts: &[&LabeledSet], input_dim: usize) -> Result<Self> {
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut inputs = Array2::zeros((total, input_dim));
        let mut labels = Vec::with_capacity(total);
        let mut ids = Vec::with_capacity(total);
        let mut row = 0;
        for part in parts {
            if part.input_dim() != input_dim && !part.is_empty() {
                return Err(Error::Shape(format!(
                    "cannot concatenate {}-column set into {} columns",
                    part.input_dim(),
                    input_dim
                )));
            }
            for i in 0..part.len() {
                inputs.row_mut(row).assign(&part.inputs.row(i));
                row += 1;
            }
            labels.extend_from_slice(&part.labels);
            ids.extend_from_slice(&part.ids);
        }
        Ok(Self {
            inputs,
            labels,
            ids,
        })
    }

    /// Number of rows per class.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &y in &self.labels {
            *counts.entry(y).or_insert(0) += 1;
        }
        counts
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Row indices grouped by class, each group in ascending row order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            groups.entry(y).or_default().push(i);
        }
        groups
    }
}

/// `[N, S, M]`: clients, classes per client, stage tasks per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub num_stages: usize,
    pub imbalance_factor: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::config("num_clients", "must be at least 1"));
        }
        if self.classes_per_client < 1 {
            return Err(Error::config("classes_per_client", "must be at least 1"));
        }
        if self.classes_per_client > num_classes {
            return Err(Error::config(
                "classes_per_client",
                format!(
                    "is {} but only {} classes exist",
                    self.classes_per_client, num_classes
                ),
            ));
        }
        if self.num_stages < 1 {
            return Err(Error::config("num_stages", "must be at least 1"));
        }
        if self.num_stages > 1 && self.classes_per_client < 2 {
            return Err(Error::config(
                "classes_per_client",
                "must be at least 2 when there is more than one stage",
            ));
        }
        if self.num_clients * self.classes_per_client < num_classes {
            return Err(Error::config(
                "num_clients",
                format!(
                    "{} clients with {} classes each cannot cover {} classes",
                    self.num_clients, self.classes_per_client, num_classes
                ),
            ));
        }
        if !(self.imbalance_factor >= 1.0 && self.imbalance_factor.is_finite()) {
            return Err(Error::config(
                "imbalance_factor",
                "must be a finite number >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTask {
    /// 1-based stage index.
    pub stage_index: usize,
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub class_set: BTreeSet<usize>,
}

impl StageTask {
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientTimeline {
    pub client_id: usize,
    pub stages: Vec<StageTask>,
}

impl ClientTimeline {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Test rows from stages `1..=stage`, de-duplicated by sample id.
    pub fn test_union(&self, stage: usize) -> Result<LabeledSet> {
        let upto = stage.min(self.stages.len());
        let input_dim = self
            .stages
            .first()
            .map(|s| s.train.input_dim().max(s.test.input_dim()))
            .unwrap_or(0);
        let parts: Vec<&LabeledSet> = self.stages[..upto].iter().map(|s| &s.test).collect();
        let merged = LabeledSet::concat(&parts, input_dim)?;
        let mut seen = BTreeSet::new();
        let keep: Vec<usize> = (0..merged.len())
            .filter(|&i| seen.insert(merged.ids[i]))
            .collect();
        Ok(merged.select(&keep))
    }

    /// Every stage's test rows.
    pub fn full_test(&self) -> Result<LabeledSet> {
        self.test_union(self.stages.len())
    }
}

fn draw_centers(spec: &DatasetSpec) -> Array2<f64> {
    let mut rng = rng::stream(spec.seed, &[tag::CLASS_CENTERS]);
    loop {
        let centers = Array2::from_shape_fn((spec.num_classes, spec.input_dim), |_| {
            spec.class_center_scale * rng.sample::<f64, _>(StandardNormal)
        });
        let distinct = (0..spec.num_classes)
            .all(|a| (a + 1..spec.num_classes).all(|b| centers.row(a) != centers.row(b)));
        if distinct {
            return centers;
        }
    }
}

/// The per-class generative centers (`num_classes x input_dim`) for `spec`.
pub fn class_centers(spec: &DatasetSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    Ok(draw_centers(spec))
}

/// Draws `per_class` fresh samples per class around `centers`, class-major.
pub fn draw_samples(
    spec: &DatasetSpec,
    centers: &Array2<f64>,
    per_class: usize,
    seed: u64,
) -> Result<LabeledSet> {
    spec.validate()?;
    if centers.dim() != (spec.num_classes, spec.input_dim) {
        return Err(Error::Shape(format!(
            "centers are {:?}, expected ({}, {})",
            centers.dim(),
            spec.num_classes,
            spec.input_dim
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SAMPLES]);
    let rows = spec.num_classes * per_class;
    let mut inputs = Array2::zeros((rows, spec.input_dim));
    let mut labels = Vec::with_capacity(rows);
    for class in 0..spec.num_classes {
        for k in 0..per_class {
            let mut row = inputs.row_mut(class * per_class + k);
            for (j, v) in row.iter_mut().enumerate() {
                *v = centers[[class, j]] + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(class);
        }
    }
    LabeledSet::new(inputs, labels, (0..rows).collect())
}

/// Balanced Gaussian-mixture dataset with `samples_per_class` rows per class.
pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<LabeledSet> {
    let centers = class_centers(spec)?;
    draw_samples(spec, &centers, spec.samples_per_class, spec.seed)
}

/// Samples kept for class `k` of `num_classes` under the exponential profile.
pub fn longtail_count(n_max: usize, imbalance_factor: f64, k: usize, num_classes: usize) -> usize {
    if num_classes < 2 {
        return n_max;
    }
    let exponent = -(k as f64) / ((num_classes - 1) as f64);
    let kept = (n_max as f64 * imbalance_factor.powf(exponent)).round() as usize;
    kept.clamp(1, n_max)
}

/// Uniformly subsamples each class `k` of a balanced set down to
/// `round(n_max * IF^(-k / (z - 1)))` rows (at least one).
pub fn apply_longtail(data: &LabeledSet, imbalance_factor: f64, seed: u64) -> Result<LabeledSet> {
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(Error::config(
            "imbalance_factor",
            "must be a finite number >= 1",
        ));
    }
    let groups = data.indices_by_class();
    let num_classes = groups.keys().next_back().map_or(0, |&c| c + 1);
    if groups.len() != num_classes {
        return Err(Error::Data(
            "long-tail input must contain every class index".into(),
        ));
    }
    let n_max = groups.values().map(Vec::len).max().unwrap_or(0);
    if groups.values().any(|g| g.len() != n_max) {
        return Err(Error::Data("long-tail input must be class-balanced".into()));
    }

    let mut rng = rng::stream(seed, &[tag::LONGTAIL]);
    let mut keep = Vec::new();
    for (&class, rows) in &groups {
        let count = longtail_count(n_max, imbalance_factor, class, num_classes);
        let mut picked: Vec<usize> = index::sample(&mut rng, rows.len(), count)
            .into_iter()
            .map(|i| rows[i])
            .collect();
        picked.sort_unstable();
        keep.extend(picked);
    }
    Ok(data.select(&keep))
}

/// Classes of the client's ordered class list that appear in each stage.
///
/// Stage `m` (0-based) covers a cyclic window of `w` classes starting at
/// `m * c`, with `c = ceil(S / M)` and `w = min(c + 1, S - 1)`. Consecutive
/// windows overlap and differ, and together they cover all `S` classes.
pub fn stage_windows(classes: &[usize], num_stages: usize) -> Vec<Vec<usize>> {
    let s = classes.len();
    if num_stages <= 1 || s < 2 {
        return vec![classes.to_vec(); num_stages.max(1)];
    }
    let step = s.div_ceil(num_stages);
    let width = (step + 1).min(s - 1);
    (0..num_stages)
        .map(|m| (0..width).map(|j| classes[(m * step + j) % s]).collect())
        .collect()
}

/// Splits `n` items into `parts` contiguous chunk lengths differing by at most one.
fn chunk_lengths(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Draws each client's class list, retrying until every class has a holder.
fn assign_classes(num_classes: usize, plan: &PartitionPlan) -> Result<Vec<Vec<usize>>> {
    const MAX_ATTEMPTS: usize = 100_000;
    let mut rng = rng::stream(plan.seed, &[tag::CLASS_ASSIGNMENT]);
    for _ in 0..MAX_ATTEMPTS {
        let assignment: Vec<Vec<usize>> = (0..plan.num_clients)
            .map(|_| index::sample(&mut rng, num_classes, plan.classes_per_client).into_vec())
            .collect();
        let covered: BTreeSet<usize> = assignment.iter().flatten().copied().collect();
        if covered.len() == num_classes {
            return Ok(assignment);
        }
    }
    Err(Error::Data(format!(
        "could not cover all {num_classes} classes in {MAX_ATTEMPTS} assignment draws"
    )))
}

/// Carves `data` into one timeline of stage tasks per client.
///
/// Each client gets `S` distinct classes; a class's rows are divided
/// disjointly among its holders, then each client's share of a class is
/// divided among the stages whose window contains that class, and finally
/// every (stage, class) slice is split 80/20 into train/test.
pub fn partition_clients(data: &LabeledSet, plan: &PartitionPlan) -> Result<Vec<ClientTimeline>> {
    let groups = data.indices_by_class();
    let num_classes = groups.keys().next_back().map_or(0, |&c| c + 1);
    plan.validate(num_classes)?;
    let assignment = assign_classes(num_classes, plan)?;

    // class -> holder client ids (ascending) -> that holder's rows
    let mut shares: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for class in 0..num_classes {
        let holders: Vec<usize> = (0..plan.num_clients)
            .filter(|&i| assignment[i].contains(&class))
            .collect();
        let mut rows = groups.get(&class).cloned().unwrap_or_default();
        rows.shuffle(&mut rng::stream(
            plan.seed,
            &[tag::CLASS_SHARDS, class as u64],
        ));
        let mut offset = 0;
        for (&client, len) in holders.iter().zip(chunk_lengths(rows.len(), holders.len())) {
            shares.insert((client, class), rows[offset..offset + len].to_vec());
            offset += len;
        }
    }

    let mut timelines = Vec::with_capacity(plan.num_clients);
    for (client, classes) in assignment.iter().enumerate() {
        let windows = stage_windows(classes, plan.num_stages);
        // rows of each class per stage
        let mut per_stage: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); plan.num_stages];
        for &class in classes {
            let stages: Vec<usize> = (0..plan.num_stages)
                .filter(|&m| windows[m].contains(&class))
                .collect();
            let rows = &shares[&(client, class)];
            let mut offset = 0;
            for (&m, len) in stages.iter().zip(chunk_lengths(rows.len(), stages.len())) {
                per_stage[m].push((class, rows[offset..offset + len].to_vec()));
                offset += len;
            }
        }

        let mut stages = Vec::with_capacity(plan.num_stages);
        for (m, slices) in per_stage.into_iter().enumerate() {
            let mut train_rows = Vec::new();
            let mut test_rows = Vec::new();
            for (class, mut rows) in slices {
                rows.shuffle(&mut rng::stream(
                    plan.seed,
                    &[tag::STAGE_SPLIT, client as u64, m as u64, class as u64],
                ));
                let n_test = (rows.len() as f64 * TEST_FRACTION).round() as usize;
                let n_train = rows.len() - n_test;
                train_rows.extend_from_slice(&rows[..n_train]);
                test_rows.extend_from_slice(&rows[n_train..]);
            }
            if train_rows.is_empty() && test_rows.is_empty() {
                return Err(Error::Data(format!(
                    "client {client} stage {} received no samples",
                    m + 1
                )));
            }
            let train = data.select(&train_rows);
            let test = data.select(&test_rows);
            let class_set = train.classes().union(&test.classes()).copied().collect();
            stages.push(StageTask {
                stage_index: m + 1,
                train,
                test,
                class_set,
            });
        }
        timelines.push(ClientTimeline {
            client_id: client,
            stages,
        });
    }
    Ok(timelines)
}

/// Everything needed to regenerate a partition, recorded next to an export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub format_version: u32,
    pub dataset: DatasetSpec,
    pub plan: PartitionPlan,
    pub seed: u64,
}

const MANIFEST_FILE: &str = "manifest.toml";

fn split_file_name(client: usize, stage: usize, split: &str) -> String {
    format!("client{client:03}_stage{stage}_{split}.csv")
}

fn write_set_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..set.input_dim())
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..set.len() {
        let mut line = String::new();
        for v in set.row(i) {
            line.push_str(&v.to_string());
            line.push(',');
        }
        line.push_str(&set.labels[i].to_string());
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn read_set_csv(path: &Path, input_dim: usize, next_id: &mut usize) -> Result<LabeledSet> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))??;
    if header.split(',').count() != input_dim + 1 {
        return Err(Error::Data(format!(
            "{}: header has {} columns, expected {}",
            path.display(),
            header.split(',').count(),
            input_dim + 1
        )));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != input_dim + 1 {
            return Err(Error::Data(format!(
                "{} line {}: expected {} fields",
                path.display(),
                lineno + 2,
                input_dim + 1
            )));
        }
        for f in &fields[..input_dim] {
            values.push(f.parse::<f64>().map_err(|e| {
                Error::Data(format!("{} line {}: {e}", path.display(), lineno + 2))
            })?);
        }
        labels.push(
            fields[input_dim]
                .parse::<usize>()
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), lineno + 2)))?,
        );
    }
    let rows = labels.len();
    let inputs = Array2::from_shape_vec((rows, input_dim), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let ids = (*next_id..*next_id + rows).collect();
    *next_id += rows;
    LabeledSet::new(inputs, labels, ids)
}

/// Writes one train and one test CSV per (client, stage) plus `manifest.toml`.
pub fn export_partitions(
    dir: &Path,
    timelines: &[ClientTimeline],
    manifest: &PartitionManifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    for timeline in timelines {
        for stage in &timeline.stages {
            write_set_csv(
                &dir.join(split_file_name(
                    timeline.client_id,
                    stage.stage_index,
                    "train",
                )),
                &stage.train,
            )?;
            write_set_csv(
                &dir.join(split_file_name(
                    timeline.client_id,
                    stage.stage_index,
                    "test",
                )),
                &stage.test,
            )?;
        }
    }
    Ok(())
}

/// Reads an export back. Sample ids are not stored in the CSVs; fresh ids are
/// assigned in (client, stage, train-then-test, row) order.
pub fn import_partitions(dir: &Path) -> Result<(PartitionManifest, Vec<ClientTimeline>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: PartitionManifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{MANIFEST_FILE}: {e}")))?;
    let input_dim = manifest.dataset.input_dim;
    let mut next_id = 0;
    let mut timelines = Vec::with_capacity(manifest.plan.num_clients);
    for client in 0..manifest.plan.num_clients {
        let mut stages = Vec::with_capacity(manifest.plan.num_stages);
        for stage_index in 1..=manifest.plan.num_stages {
            let train = read_set_csv(
                &dir.join(split_file_name(client, stage_index, "train")),
                input_dim,
                &mut next_id,
            )?;
            let test = read_set_csv(
                &dir.join(split_file_name(client, stage_index, "test")),
                input_dim,
                &mut next_id,
            )?;
            let class_set = train.classes().union(&test.classes()).copied().collect();
            stages.push(StageTask {
                stage_index,
                train,
                test,
                class_set,
            });
        }
        timelines.push(ClientTimeline {
            client_id: client,
            stages,
        });
    }
    Ok((manifest, timelines))
}

/// Convenience: mean of the rows of `set` belonging to `class`.
pub fn class_mean(set: &LabeledSet, class: usize) -> Option<Array1<f64>> {
    let rows: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
    if rows.is_empty() {
        return None;
    }
    set.inputs.select(Axis(0), &rows).mean_axis(Axis(0))
}
