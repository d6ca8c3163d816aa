//! Split network, training losses and staged SGD.
//!
//! The network is `x -> relu(x W_mu + b_mu) -> h W_nu + b_nu`. The first layer
//! (`mu`, [`SharedParams`]) is the representation shared with the server; the
//! second (`nu`, [`HeadParams`]) is the personalized classifier head.
//!
//! The training objective on a mini-batch is
//!
//! ```text
//! L = CE + a * LP + b * GP
//! ```
//!
//! with `a = lambda`, `b = 1 - lambda` when the prototype relation terms are
//! enabled and `a = b = 0` otherwise. Both relation terms act on batch-level
//! class prototypes `P_n` (class means of the current embeddings):
//!
//! - `LP` averages `KL(softmax(C_old_n / tau) || softmax(P_n / tau))` over the
//!   batch classes that already have a local prototype `C_old_n`.
//! - `GP` sums `(count_n / batch) * MSE(P_n, G_n)` over the batch classes that
//!   have a global prototype `G_n`.
//!
//! Gradients are derived by hand; see `tests/gradient_oracle.rs` for the
//! finite-difference check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledSet, StageTask};
use crate::error::{Error, Result};
use crate::prototypes::{self, PrototypeLookup, PrototypeMap};
use crate::rng::SimRng;

/// Representation layer: `input_dim x hidden_dim` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Classifier head: `hidden_dim x num_classes` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shared: SharedParams,
    pub head: HeadParams,
}

/// Gradients share the parameter layout.
pub type Gradient = ModelParams;

impl SharedParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((input_dim, hidden_dim)),
            bias: Array1::zeros(hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }

    /// Embedding of a single input row.
    pub fn embed(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok((x.dot(&self.weight) + &self.bias).mapv(relu))
    }

    /// Embeddings of every row (`rows x hidden_dim`).
    pub fn embed_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} features, model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok((inputs.dot(&self.weight) + &self.bias).mapv(relu))
    }

    /// Flattened `weight` (row-major) followed by `bias`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(input_dim: usize, hidden_dim: usize, flat: &[f64]) -> Result<Self> {
        let w = input_dim * hidden_dim;
        if flat.len() != w + hidden_dim {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {input_dim}x{hidden_dim} layer with bias",
                flat.len()
            )));
        }
        Ok(Self {
            weight: Array2::from_shape_vec((input_dim, hidden_dim), flat[..w].to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?,
            bias: Array1::from(flat[w..].to_vec()),
        })
    }
}

impl HeadParams {
    pub fn zeros(hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            weight: Array2::zeros((hidden_dim, num_classes)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }

    pub fn logits(&self, embedding: ArrayView1<'_, f64>) -> Array1<f64> {
        embedding.dot(&self.weight) + &self.bias
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(hidden_dim: usize, num_classes: usize, flat: &[f64]) -> Result<Self> {
        let w = hidden_dim * num_classes;
        if flat.len() != w + num_classes {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {hidden_dim}x{num_classes} head with bias",
                flat.len()
            )));
        }
        Ok(Self {
            weight: Array2::from_shape_vec((hidden_dim, num_classes), flat[..w].to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?,
            bias: Array1::from(flat[w..].to_vec()),
        })
    }
}

impl ModelParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            shared: SharedParams::zeros(input_dim, hidden_dim),
            head: HeadParams::zeros(hidden_dim, num_classes),
        }
    }

    /// He-normal first layer, `N(0, 1/H)` head, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, rng: &mut SimRng) -> Self {
        let shared_std = (2.0 / input_dim as f64).sqrt();
        let head_std = (1.0 / hidden_dim as f64).sqrt();
        let mut params = Self::zeros(input_dim, hidden_dim, num_classes);
        params
            .shared
            .weight
            .mapv_inplace(|_| shared_std * rng.sample::<f64, _>(StandardNormal));
        params
            .head
            .weight
            .mapv_inplace(|_| head_std * rng.sample::<f64, _>(StandardNormal));
        params
    }

    pub fn input_dim(&self) -> usize {
        self.shared.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.shared.hidden_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.bias.len()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shared.same_shape(&other.shared) && self.head.same_shape(&other.head)
    }

    pub fn num_params(&self) -> usize {
        self.shared.weight.len()
            + self.shared.bias.len()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    /// Every parameter in a fixed order: shared weight, shared bias, head
    /// weight, head bias (matrices row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.shared.to_flat();
        flat.extend(self.head.to_flat());
        flat
    }

    pub fn from_flat(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        flat: &[f64],
    ) -> Result<Self> {
        let split = input_dim * hidden_dim + hidden_dim;
        if flat.len() < split {
            return Err(Error::Shape(format!("{} values are too few", flat.len())));
        }
        Ok(Self {
            shared: SharedParams::from_flat(input_dim, hidden_dim, &flat[..split])?,
            head: HeadParams::from_flat(hidden_dim, num_classes, &flat[split..])?,
        })
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub(crate) fn log_sum_exp(values: ArrayView1<'_, f64>) -> f64 {
    let max = values.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(values: ArrayView1<'_, f64>) -> Array1<f64> {
    let lse = log_sum_exp(values);
    values.mapv(|v| (v - lse).exp())
}

/// Embedding and logits for one input vector.
pub fn forward(params: &ModelParams, x: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let embedding = params.shared.embed(x)?;
    let logits = params.head.logits(embedding.view());
    Ok((embedding, logits))
}

/// Cross-entropy `-log softmax(logits)[label]`.
pub fn loss_ce(logits: ArrayView1<'_, f64>, label: usize) -> f64 {
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

/// `KL(softmax(old / tau) || softmax(new / tau))` for one class.
pub fn loss_lp(
    old_proto: ArrayView1<'_, f64>,
    new_proto: ArrayView1<'_, f64>,
    temperature: f64,
) -> f64 {
    let old_scaled = old_proto.mapv(|v| v / temperature);
    let new_scaled = new_proto.mapv(|v| v / temperature);
    let old_lse = log_sum_exp(old_scaled.view());
    let new_lse = log_sum_exp(new_scaled.view());
    let kl: f64 = old_scaled
        .iter()
        .zip(new_scaled.iter())
        .map(|(&o, &n)| {
            let log_p = o - old_lse;
            let p = log_p.exp();
            if p > 0.0 {
                p * (log_p - (n - new_lse))
            } else {
                0.0
            }
        })
        .sum();
    kl.max(0.0)
}

fn mse(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Count-weighted MSE between local and global prototypes, over the local
/// classes that have a global prototype.
pub fn loss_gp(
    local_protos: &PrototypeMap,
    global_protos: &impl PrototypeLookup,
    class_counts: &BTreeMap<usize, usize>,
    total: usize,
) -> f64 {
    if total == 0 {
        return 0.0;
    }
    local_protos
        .iter()
        .filter_map(|(class, local)| {
            let global = global_protos.prototype(*class)?;
            let count = class_counts.get(class).copied().unwrap_or(0);
            Some(count as f64 / total as f64 * mse(local.view(), global.view()))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Share of the local relation term; the global term gets `1 - lambda`.
    pub lambda: f64,
    pub kl_temperature: f64,
    /// When false both relation terms are dropped and only cross-entropy remains.
    pub relation_terms: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            kl_temperature: 1.0,
            relation_terms: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "lambda",
                format!("is {} but must lie in [0, 1]", self.lambda),
            ));
        }
        if !(self.kl_temperature > 0.0 && self.kl_temperature.is_finite()) {
            return Err(Error::config(
                "kl_temperature",
                "must be a positive finite number",
            ));
        }
        Ok(())
    }

    pub fn cross_entropy_only() -> Self {
        Self {
            relation_terms: false,
            ..Self::default()
        }
    }

    fn local_coef(&self) -> f64 {
        if self.relation_terms {
            self.lambda
        } else {
            0.0
        }
    }

    fn global_coef(&self) -> f64 {
        if self.relation_terms {
            1.0 - self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    /// Epochs updating only the shared layer.
    pub mu_epochs: usize,
    /// Epochs updating only the head.
    pub nu_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            mu_epochs: 2,
            nu_epochs: 4,
            weight_decay: 1e-4,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(
                "step_size",
                "must be a non-negative finite number",
            ));
        }
        if self.mu_epochs < 1 {
            return Err(Error::config("mu_epochs", "must be at least 1"));
        }
        if self.nu_epochs < 1 {
            return Err(Error::config("nu_epochs", "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                "must be a non-negative finite number",
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.mu_epochs + self.nu_epochs
    }
}

/// Everything besides the batch that the objective depends on.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a, L: PrototypeLookup, G: PrototypeLookup> {
    pub old_protos: &'a L,
    pub global_protos: &'a G,
    pub weights: LossWeights,
    /// FedProx anchor and coefficient: adds `coef / 2 * ||w - anchor||^2`.
    pub proximal: Option<(&'a ModelParams, f64)>,
}

/// Loss value with its components, as evaluated on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub local_relation: f64,
    pub global_relation: f64,
    pub proximal: f64,
}

fn check_batch(params: &ModelParams, batch: &LabeledSet) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.input_dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            batch.input_dim(),
            params.input_dim()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= params.num_classes()) {
        return Err(Error::Shape(format!(
            "label {bad} outside the model's {} classes",
            params.num_classes()
        )));
    }
    Ok(())
}

fn check_proto_dim(
    lookup: &impl PrototypeLookup,
    classes: impl Iterator<Item = usize>,
    dim: usize,
) -> Result<()> {
    for class in classes {
        if let Some(p) = lookup.prototype(class) {
            if p.len() != dim {
                return Err(Error::Shape(format!(
                    "prototype for class {class} has dimension {}, embeddings have {dim}",
                    p.len()
                )));
            }
        }
    }
    Ok(())
}

/// Loss and exact gradient of the objective on one batch.
pub fn loss_and_grad<L: PrototypeLookup, G: PrototypeLookup>(
    params: &ModelParams,
    batch: &LabeledSet,
    objective: &Objective<'_, L, G>,
) -> Result<(LossBreakdown, Gradient)> {
    check_batch(params, batch)?;
    let n = batch.len();
    let hidden = params.hidden_dim();
    let inputs = batch.inputs.view();

    let pre = inputs.dot(&params.shared.weight) + &params.shared.bias;
    let emb = pre.mapv(relu);
    let logits = emb.dot(&params.head.weight) + &params.head.bias;

    let mut cross_entropy = 0.0;
    let mut d_logits = Array2::<f64>::zeros(logits.dim());
    for (b, &y) in batch.labels.iter().enumerate() {
        let row = logits.row(b);
        cross_entropy += loss_ce(row, y);
        let mut d = softmax(row);
        d[y] -= 1.0;
        d_logits.row_mut(b).assign(&(d / n as f64));
    }
    cross_entropy /= n as f64;

    let groups = batch.indices_by_class();
    let batch_protos: PrototypeMap = groups
        .iter()
        .map(|(&class, rows)| {
            (
                class,
                emb.select(Axis(0), rows)
                    .mean_axis(Axis(0))
                    .expect("non-empty"),
            )
        })
        .collect();
    check_proto_dim(objective.old_protos, groups.keys().copied(), hidden)?;
    check_proto_dim(objective.global_protos, groups.keys().copied(), hidden)?;

    let weights = objective.weights;
    let tau = weights.kl_temperature;
    let mut d_protos: BTreeMap<usize, Array1<f64>> = BTreeMap::new();

    let overlap: Vec<usize> = batch_protos
        .keys()
        .copied()
        .filter(|&c| objective.old_protos.prototype(c).is_some())
        .collect();
    let mut local_relation = 0.0;
    for &class in &overlap {
        let old = objective.old_protos.prototype(class).expect("filtered");
        let new = &batch_protos[&class];
        local_relation += loss_lp(old.view(), new.view(), tau);
        if weights.local_coef() != 0.0 {
            let p_old = softmax(old.mapv(|v| v / tau).view());
            let q_new = softmax(new.mapv(|v| v / tau).view());
            let scale = weights.local_coef() / (tau * overlap.len() as f64);
            *d_protos
                .entry(class)
                .or_insert_with(|| Array1::zeros(hidden)) += &((q_new - p_old) * scale);
        }
    }
    if !overlap.is_empty() {
        local_relation /= overlap.len() as f64;
    }

    let mut global_relation = 0.0;
    for (&class, local) in &batch_protos {
        let Some(global) = objective.global_protos.prototype(class) else {
            continue;
        };
        let share = groups[&class].len() as f64 / n as f64;
        global_relation += share * mse(local.view(), global.view());
        if weights.global_coef() != 0.0 {
            let scale = weights.global_coef() * share * 2.0 / hidden as f64;
            *d_protos
                .entry(class)
                .or_insert_with(|| Array1::zeros(hidden)) += &((local - global) * scale);
        }
    }

    let mut d_emb = d_logits.dot(&params.head.weight.t());
    for (class, d_proto) in &d_protos {
        let rows = &groups[class];
        let per_row = d_proto / rows.len() as f64;
        for &b in rows {
            let mut row = d_emb.row_mut(b);
            row += &per_row;
        }
    }
    let mut d_pre = d_emb;
    Zip::from(&mut d_pre).and(&pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });

    let mut grad = Gradient {
        shared: SharedParams {
            weight: inputs.t().dot(&d_pre),
            bias: d_pre.sum_axis(Axis(0)),
        },
        head: HeadParams {
            weight: emb.t().dot(&d_logits),
            bias: d_logits.sum_axis(Axis(0)),
        },
    };

    let mut proximal = 0.0;
    if let Some((anchor, coef)) = objective.proximal {
        if !anchor.same_shape(params) {
            return Err(Error::Shape(
                "proximal anchor shape differs from parameters".into(),
            ));
        }
        let mut sq = 0.0;
        let mut add = |g: &mut Array2<f64>, w: &Array2<f64>, a: &Array2<f64>| {
            Zip::from(g).and(w).and(a).for_each(|g, &w, &a| {
                sq += (w - a) * (w - a);
                *g += coef * (w - a);
            });
        };
        add(
            &mut grad.shared.weight,
            &params.shared.weight,
            &anchor.shared.weight,
        );
        add(
            &mut grad.head.weight,
            &params.head.weight,
            &anchor.head.weight,
        );
        let mut add1 = |g: &mut Array1<f64>, w: &Array1<f64>, a: &Array1<f64>| {
            Zip::from(g).and(w).and(a).for_each(|g, &w, &a| {
                sq += (w - a) * (w - a);
                *g += coef * (w - a);
            });
        };
        add1(
            &mut grad.shared.bias,
            &params.shared.bias,
            &anchor.shared.bias,
        );
        add1(&mut grad.head.bias, &params.head.bias, &anchor.head.bias);
        proximal = 0.5 * coef * sq;
    }

    let total = cross_entropy
        + weights.local_coef() * local_relation
        + weights.global_coef() * global_relation
        + proximal;
    Ok((
        LossBreakdown {
            total,
            cross_entropy,
            local_relation,
            global_relation,
            proximal,
        },
        grad,
    ))
}

/// `CE + lambda * LP + (1 - lambda) * GP` on one batch.
pub fn loss_total(
    params: &ModelParams,
    batch: &LabeledSet,
    old_protos: &impl PrototypeLookup,
    global_protos: &impl PrototypeLookup,
    weights: LossWeights,
) -> Result<f64> {
    let objective = Objective {
        old_protos,
        global_protos,
        weights,
        proximal: None,
    };
    Ok(loss_and_grad(params, batch, &objective)?.0.total)
}

/// Gradient of [`loss_total`] with respect to every parameter.
pub fn grad_total(
    params: &ModelParams,
    batch: &LabeledSet,
    old_protos: &impl PrototypeLookup,
    global_protos: &impl PrototypeLookup,
    weights: LossWeights,
) -> Result<Gradient> {
    let objective = Objective {
        old_protos,
        global_protos,
        weights,
        proximal: None,
    };
    Ok(loss_and_grad(params, batch, &objective)?.1)
}

/// Which parameter groups an SGD step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Shared,
    Head,
    Joint,
}

fn sgd_matrix(w: &mut Array2<f64>, g: &Array2<f64>, step: f64, decay: f64) {
    Zip::from(w)
        .and(g)
        .for_each(|w, &g| *w -= step * (g + decay * *w));
}

fn sgd_vector(w: &mut Array1<f64>, g: &Array1<f64>, step: f64, decay: f64) {
    Zip::from(w)
        .and(g)
        .for_each(|w, &g| *w -= step * (g + decay * *w));
}

/// `w <- w - step * (g + weight_decay * w)` on the groups selected by `phase`.
pub fn sgd_step(params: &mut ModelParams, grad: &Gradient, phase: Phase, opt: &OptimizerConfig) {
    let (step, decay) = (opt.step_size, opt.weight_decay);
    if matches!(phase, Phase::Shared | Phase::Joint) {
        sgd_matrix(&mut params.shared.weight, &grad.shared.weight, step, decay);
        sgd_vector(&mut params.shared.bias, &grad.shared.bias, step, decay);
    }
    if matches!(phase, Phase::Head | Phase::Joint) {
        sgd_matrix(&mut params.head.weight, &grad.head.weight, step, decay);
        sgd_vector(&mut params.head.bias, &grad.head.bias, step, decay);
    }
}

/// Runs `epochs` shuffled mini-batch epochs of `phase` updates.
pub fn run_epochs<L: PrototypeLookup, G: PrototypeLookup>(
    params: &mut ModelParams,
    data: &LabeledSet,
    objective: &Objective<'_, L, G>,
    phase: Phase,
    epochs: usize,
    opt: &OptimizerConfig,
    rng: &mut SimRng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opt.batch_size) {
            let batch = data.select(chunk);
            let (_, grad) = loss_and_grad(params, &batch, objective)?;
            sgd_step(params, &grad, phase, opt);
        }
    }
    Ok(())
}

/// Per-class mean embedding of `data` under `shared`.
pub fn stage_prototypes(shared: &SharedParams, data: &LabeledSet) -> Result<PrototypeMap> {
    let emb = shared.embed_batch(data.inputs.view())?;
    Ok(prototypes::compute(
        emb.rows().into_iter().zip(data.labels.iter().copied()),
    ))
}

/// Local training on one stage task: `mu_epochs` of shared-layer updates with
/// the head frozen, then `nu_epochs` of head updates with the shared layer
/// frozen. Returns the trained parameters and the class prototypes of the
/// stage's training set under the trained shared layer.
pub fn local_update(
    params: &ModelParams,
    stage: &StageTask,
    old_protos: &impl PrototypeLookup,
    global_protos: &impl PrototypeLookup,
    opt: &OptimizerConfig,
    weights: LossWeights,
    rng: &mut SimRng,
) -> Result<(ModelParams, PrototypeMap)> {
    opt.validate()?;
    weights.validate()?;
    if stage.train.is_empty() {
        return Err(Error::Data(format!(
            "stage {} has no training samples",
            stage.stage_index
        )));
    }
    let objective = Objective {
        old_protos,
        global_protos,
        weights,
        proximal: None,
    };
    let mut trained = params.clone();
    run_epochs(
        &mut trained,
        &stage.train,
        &objective,
        Phase::Shared,
        opt.mu_epochs,
        opt,
        rng,
    )?;
    run_epochs(
        &mut trained,
        &stage.train,
        &objective,
        Phase::Head,
        opt.nu_epochs,
        opt,
        rng,
    )?;
    let protos = stage_prototypes(&trained.shared, &stage.train)?;
    Ok((trained, protos))
}

/// Joint training of every parameter with cross-entropy, plus an optional
/// proximal pull towards `proximal.0` (FedProx). Runs `mu_epochs + nu_epochs`
/// epochs so baselines share the local epoch budget.
pub fn train_joint(
    params: &ModelParams,
    data: &LabeledSet,
    opt: &OptimizerConfig,
    proximal: Option<(&ModelParams, f64)>,
    rng: &mut SimRng,
) -> Result<ModelParams> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let empty = PrototypeMap::new();
    let objective = Objective {
        old_protos: &empty,
        global_protos: &empty,
        weights: LossWeights::cross_entropy_only(),
        proximal,
    };
    let mut trained = params.clone();
    run_epochs(
        &mut trained,
        data,
        &objective,
        Phase::Joint,
        opt.total_epochs(),
        opt,
        rng,
    )?;
    Ok(trained)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(values: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const CHECKPOINT_MAGIC: &str = "sthfl-params v1";

/// Writes parameters as text: a magic line, then for each of `shared.weight`,
/// `shared.bias`, `head.weight`, `head.bias` a `name rows cols` header followed
/// by `rows` comma-separated lines. Values use the shortest representation
/// that parses back to the same `f64`, so the format round-trips exactly.
pub fn write_checkpoint(params: &ModelParams, out: &mut impl Write) -> Result<()> {
    fn block(text: &mut String, name: &str, rows: usize, cols: usize, values: &[f64]) {
        let _ = writeln!(text, "{name} {rows} {cols}");
        for r in 0..rows {
            let line: Vec<String> = values[r * cols..(r + 1) * cols]
                .iter()
                .map(f64::to_string)
                .collect();
            let _ = writeln!(text, "{}", line.join(","));
        }
    }
    let mut text = format!("{CHECKPOINT_MAGIC}\n");
    let (u, h) = params.shared.weight.dim();
    let z = params.num_classes();
    block(
        &mut text,
        "shared.weight",
        u,
        h,
        &params.shared.weight.iter().copied().collect::<Vec<_>>(),
    );
    block(
        &mut text,
        "shared.bias",
        1,
        h,
        params.shared.bias.as_slice().expect("contiguous"),
    );
    block(
        &mut text,
        "head.weight",
        h,
        z,
        &params.head.weight.iter().copied().collect::<Vec<_>>(),
    );
    block(
        &mut text,
        "head.bias",
        1,
        z,
        params.head.bias.as_slice().expect("contiguous"),
    );
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint(input: &mut impl BufRead) -> Result<ModelParams> {
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Data("truncated checkpoint".into()))?
            .map_err(Error::from)
    };
    if next()? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a parameter checkpoint".into()));
    }
    let mut blocks = Vec::new();
    for expected in ["shared.weight", "shared.bias", "head.weight", "head.bias"] {
        let header = next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != expected {
            return Err(Error::Data(format!(
                "expected `{expected} rows cols`, found `{header}`"
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("{header}: {e}")))
        };
        let (rows, cols) = (parse(parts[1])?, parse(parts[2])?);
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = next()?;
            for field in line.split(',') {
                values.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::Data(format!("{expected}: {e}")))?,
                );
            }
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{expected}: {} values for {rows}x{cols}",
                values.len()
            )));
        }
        blocks.push((rows, cols, values));
    }
    let to_matrix = |(r, c, v): (usize, usize, Vec<f64>)| {
        Array2::from_shape_vec((r, c), v).map_err(|e| Error::Shape(e.to_string()))
    };
    let mut it = blocks.into_iter();
    let shared_weight = to_matrix(it.next().expect("four blocks"))?;
    let shared_bias = Array1::from(it.next().expect("four blocks").2);
    let head_weight = to_matrix(it.next().expect("four blocks"))?;
    let head_bias = Array1::from(it.next().expect("four blocks").2);
    if shared_bias.len() != shared_weight.ncols()
        || head_weight.nrows() != shared_weight.ncols()
        || head_bias.len() != head_weight.ncols()
    {
        return Err(Error::Shape(
            "checkpoint blocks have inconsistent shapes".into(),
        ));
    }
    Ok(ModelParams {
        shared: SharedParams {
            weight: shared_weight,
            bias: shared_bias,
        },
        head: HeadParams {
            weight: head_weight,
            bias: head_bias,
        },
    })
}
