//! The federated protocol: client selection, per-stage local updates, server
//! aggregation of shared layers and prototypes, and the FedAvg, FedRep and
//! FedProx baselines.
//!
//! Each global round selects a subset of clients, then walks every stage
//! `1..=M`. In a stage the server broadcasts the shared layer `Θ` (and for
//! GLDP the global prototypes), each selected client replaces its shared
//! layer with `Θ`, trains on its stage task and uploads its shared layer plus
//! fresh prototypes. The server averages the shared layers into the next `Θ`
//! and blends the averaged prototypes into the global store. Heads stay on
//! the clients except for the full-model baselines.

pub mod message;

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, warn};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, ClientTimeline, DatasetSpec, LabeledSet, PartitionPlan, StageTask};
use crate::error::{Error, Result};
use crate::metrics::{self, Classifier, Metric, MetricsLog, Scope};
use crate::model::{self, HeadParams, LossWeights, ModelParams, OptimizerConfig, SharedParams};
use crate::prototypes::{coordinate_mean, PrototypeMap, PrototypeStore};
use crate::rng::{self, tag};

pub use message::{audit_uploads, AuditReport, Direction, Frame, RoundMessage, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Gldp,
    FedAvg,
    FedRep,
    FedProx,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Gldp,
        Algorithm::FedAvg,
        Algorithm::FedRep,
        Algorithm::FedProx,
    ];

    /// Lower-case identifier used in config files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            Algorithm::Gldp => "gldp",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedRep => "fedrep",
            Algorithm::FedProx => "fedprox",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.key().eq_ignore_ascii_case(name))
    }

    /// Whether the server aggregates the head as well as the shared layer.
    pub fn shares_head(self) -> bool {
        matches!(self, Algorithm::FedAvg | Algorithm::FedProx)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Gldp => "GLDP",
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedRep => "FedRep",
            Algorithm::FedProx => "FedProx",
        })
    }
}

/// Which prototypes a GLDP client classifies with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Global prototypes from the server.
    Gp,
    /// The client's own prototypes; a client that has never trained falls back
    /// to the global ones.
    Lp,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Gp => "GP",
            InferenceMode::Lp => "LP",
        })
    }
}

/// Synthetic data generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Rows of the most frequent class (`n_max`).
    pub samples_per_class: usize,
    pub class_center_scale: f64,
    pub noise_sigma: f64,
    pub imbalance_factor: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 16,
            samples_per_class: 1000,
            class_center_scale: 1.0,
            noise_sigma: 2.0,
            imbalance_factor: 50.0,
        }
    }
}

/// `[N, S, M]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub num_stages: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            classes_per_client: 4,
            num_stages: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    /// Global rounds `K`.
    pub rounds: usize,
    pub clients_per_round: usize,
    pub hidden_dim: usize,
    /// Moving-average coefficient for both prototype stores.
    pub beta: f64,
    pub fedprox_mu: f64,
    pub inference: InferenceMode,
    pub seed: u64,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gldp,
            rounds: 50,
            clients_per_round: 10,
            hidden_dim: 32,
            beta: 0.5,
            fedprox_mu: 0.01,
            inference: InferenceMode::Gp,
            seed: 0,
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.data.num_classes,
            input_dim: self.data.input_dim,
            samples_per_class: self.data.samples_per_class,
            class_center_scale: self.data.class_center_scale,
            noise_sigma: self.data.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        PartitionPlan {
            num_clients: self.partition.num_clients,
            classes_per_client: self.partition.classes_per_client,
            num_stages: self.partition.num_stages,
            imbalance_factor: self.data.imbalance_factor,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.partition_plan().validate(self.data.num_classes)?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.clients_per_round < 1 {
            return Err(Error::config("clients_per_round", "must be at least 1"));
        }
        if self.clients_per_round > self.partition.num_clients {
            return Err(Error::config(
                "clients_per_round",
                format!(
                    "is {} but there are only {} clients",
                    self.clients_per_round, self.partition.num_clients
                ),
            ));
        }
        if self.hidden_dim < 1 {
            return Err(Error::config("hidden_dim", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(
                "beta",
                format!("is {} but must lie in [0, 1]", self.beta),
            ));
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return Err(Error::config(
                "fedprox_mu",
                "must be a non-negative finite number",
            ));
        }
        if self.optimizer.mu_epochs >= self.optimizer.nu_epochs {
            debug!(
                "mu_epochs ({}) is not below nu_epochs ({})",
                self.optimizer.mu_epochs, self.optimizer.nu_epochs
            );
        }
        Ok(())
    }

    /// Series name used in metric tables, e.g. `GLDP-GP` or
    /// `GLDP-LP[lambda=0]`.
    pub fn label(&self) -> String {
        match self.algorithm {
            Algorithm::Gldp => {
                let mut label = format!("GLDP-{}", self.inference);
                if !self.loss.relation_terms {
                    label.push_str("[no-relation]");
                } else if self.loss.lambda != LossWeights::default().lambda {
                    label.push_str(&format!("[lambda={}]", self.loss.lambda));
                }
                label
            }
            other => other.to_string(),
        }
    }
}

/// Long-tailed synthetic data partitioned into client timelines.
pub fn build_timelines(config: &ExperimentConfig) -> Result<Vec<ClientTimeline>> {
    let spec = config.dataset_spec();
    let balanced = datagen::make_synthetic_dataset(&spec)?;
    let data = datagen::apply_longtail(&balanced, config.data.imbalance_factor, config.seed)?;
    datagen::partition_clients(&data, &config.partition_plan())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// `Θ`.
    pub global_mu: SharedParams,
    /// Aggregated head, kept only by the full-model baselines.
    pub global_head: Option<HeadParams>,
    pub global_protos: PrototypeStore,
    /// Completed global rounds.
    pub round_index: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub params: ModelParams,
    pub local_protos: PrototypeStore,
    pub timeline: ClientTimeline,
    /// Last stage this client trained on; 0 before its first participation.
    pub current_stage: usize,
}

/// Uniform sample of `count` distinct client ids out of `num_clients`,
/// ascending, determined by `(seed, round)`.
pub fn select_clients(
    seed: u64,
    num_clients: usize,
    count: usize,
    round: usize,
) -> Result<Vec<usize>> {
    if count > num_clients {
        return Err(Error::config(
            "clients_per_round",
            format!("is {count} but there are only {num_clients} clients"),
        ));
    }
    let mut rng = rng::stream(seed, &[tag::CLIENT_SELECTION, round as u64]);
    let mut ids = index::sample(&mut rng, num_clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Coordinate-wise unweighted mean of uploaded shared layers. Independent of
/// upload order.
pub fn aggregate_mu(uploads: &[&SharedParams]) -> Result<SharedParams> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("no shared-layer uploads to aggregate".into()))?;
    if let Some(bad) = uploads.iter().find(|u| !u.same_shape(first)) {
        return Err(Error::Protocol(format!(
            "shared layer of shape {:?} does not match {:?}",
            bad.weight.dim(),
            first.weight.dim()
        )));
    }
    let flats: Vec<_> = uploads.iter().map(|u| u.to_flat()).collect();
    let mean = mean_flat(&flats)?;
    SharedParams::from_flat(first.input_dim(), first.hidden_dim(), &mean)
}

fn mean_flat(flats: &[Vec<f64>]) -> Result<Vec<f64>> {
    let arrays: Vec<ndarray::ArrayView1<'_, f64>> = flats
        .iter()
        .map(|f| ndarray::ArrayView1::from(&f[..]))
        .collect();
    Ok(coordinate_mean(&arrays)?.to_vec())
}

fn aggregate_heads(uploads: &[&HeadParams]) -> Result<HeadParams> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("no head uploads to aggregate".into()))?;
    if uploads.iter().any(|u| !u.same_shape(first)) {
        return Err(Error::Protocol("uploaded heads differ in shape".into()));
    }
    let flats: Vec<_> = uploads.iter().map(|u| u.to_flat()).collect();
    HeadParams::from_flat(
        first.weight.nrows(),
        first.weight.ncols(),
        &mean_flat(&flats)?,
    )
}

/// One baseline client update on a stage task.
///
/// - FedAvg: start from the broadcast model and train every parameter jointly.
/// - FedProx: as FedAvg plus `fedprox_mu / 2 * ||w - broadcast||^2`.
/// - FedRep: replace the shared layer with the broadcast one, keep the local
///   head, and run the split shared/head schedule with cross-entropy only.
pub fn baseline_update(
    algorithm: Algorithm,
    params: &ModelParams,
    broadcast: &ModelParams,
    stage: &StageTask,
    opt: &OptimizerConfig,
    fedprox_mu: f64,
    rng: &mut rng::SimRng,
) -> Result<ModelParams> {
    match algorithm {
        Algorithm::FedAvg => model::train_joint(broadcast, &stage.train, opt, None, rng),
        Algorithm::FedProx => model::train_joint(
            broadcast,
            &stage.train,
            opt,
            Some((broadcast, fedprox_mu)),
            rng,
        ),
        Algorithm::FedRep => {
            let mut start = params.clone();
            start.shared = broadcast.shared.clone();
            let empty = PrototypeMap::new();
            let (trained, _) = model::local_update(
                &start,
                stage,
                &empty,
                &empty,
                opt,
                LossWeights::cross_entropy_only(),
                rng,
            )?;
            Ok(trained)
        }
        Algorithm::Gldp => Err(Error::config("algorithm", "gldp is not a baseline")),
    }
}

/// A_sel history of one client within the current round.
type SelHistory = BTreeMap<usize, Vec<f64>>;

/// A running experiment.
pub struct Simulation {
    config: ExperimentConfig,
    label: String,
    server: ServerState,
    clients: Vec<ClientState>,
    transport: Transport,
    metrics: MetricsLog,
    sel_history: SelHistory,
}

impl Simulation {
    /// Generates data from the config and sets up the initial states.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let timelines = build_timelines(&config)?;
        Self::from_timelines(config, timelines)
    }

    /// Sets up a simulation over externally provided timelines; client `i` is
    /// `timelines[i]`.
    pub fn from_timelines(
        config: ExperimentConfig,
        timelines: Vec<ClientTimeline>,
    ) -> Result<Self> {
        config.validate()?;
        if timelines.len() != config.partition.num_clients {
            return Err(Error::config(
                "num_clients",
                format!(
                    "is {} but {} timelines were given",
                    config.partition.num_clients,
                    timelines.len()
                ),
            ));
        }
        let (u, h, z) = (
            config.data.input_dim,
            config.hidden_dim,
            config.data.num_classes,
        );
        for t in &timelines {
            if t.stages.len() != config.partition.num_stages {
                return Err(Error::Data(format!(
                    "client {} has {} stages, expected {}",
                    t.client_id,
                    t.stages.len(),
                    config.partition.num_stages
                )));
            }
            for s in &t.stages {
                for set in [&s.train, &s.test] {
                    if !set.is_empty() && set.input_dim() != u {
                        return Err(Error::Shape(format!(
                            "client {} stage {} has input dimension {}, expected {u}",
                            t.client_id,
                            s.stage_index,
                            set.input_dim()
                        )));
                    }
                    if let Some(&bad) = set.labels.iter().find(|&&y| y >= z) {
                        return Err(Error::Data(format!(
                            "label {bad} out of range for {z} classes"
                        )));
                    }
                }
            }
        }

        let init = ModelParams::init(u, h, z, &mut rng::stream(config.seed, &[tag::MODEL_INIT]));
        let server = ServerState {
            global_mu: init.shared.clone(),
            global_head: config.algorithm.shares_head().then(|| init.head.clone()),
            global_protos: PrototypeStore::new(config.beta)?,
            round_index: 0,
            rng_seed: config.seed,
        };
        let clients = timelines
            .into_iter()
            .enumerate()
            .map(|(i, timeline)| {
                Ok(ClientState {
                    client_id: i,
                    params: init.clone(),
                    local_protos: PrototypeStore::new(config.beta)?,
                    timeline,
                    current_stage: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let label = config.label();
        Ok(Self {
            config,
            label,
            server,
            clients,
            transport: Transport::new(false),
            metrics: MetricsLog::default(),
            sel_history: SelHistory::new(),
        })
    }

    /// Keeps a copy of every message for later auditing.
    pub fn record_messages(&mut self, on: bool) {
        self.transport = Transport::new(on);
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn into_metrics(self) -> MetricsLog {
        self.metrics
    }

    /// Clients taking part in round `round` (1-based).
    pub fn selection(&self, round: usize) -> Result<Vec<usize>> {
        select_clients(
            self.server.rng_seed,
            self.clients.len(),
            self.config.clients_per_round,
            round,
        )
    }

    /// Full run: initial evaluation, then `K` rounds.
    pub fn run(&mut self) -> Result<()> {
        if self.server.round_index == 0 {
            self.evaluate_initial()?;
        }
        while self.server.round_index < self.config.rounds {
            self.run_round()?;
        }
        Ok(())
    }

    /// Runs the next global round over every stage, then evaluates.
    pub fn run_round(&mut self) -> Result<()> {
        let round = self.server.round_index + 1;
        let selected = self.selection(round)?;
        debug!("round {round}: clients {selected:?}");
        self.sel_history.clear();
        for stage in 1..=self.config.partition.num_stages {
            self.run_stage(round, stage, &selected)?;
        }
        self.server.round_index = round;
        self.evaluate_round(round)
    }

    /// One stage of a round: broadcast, local training, upload, aggregation,
    /// then `A_sel` and forgetting for the selected clients.
    pub fn run_stage(&mut self, round: usize, stage: usize, selected: &[usize]) -> Result<()> {
        if stage < 1 || stage > self.config.partition.num_stages {
            return Err(Error::Protocol(format!("stage {stage} out of range")));
        }
        let algorithm = self.config.algorithm;
        let broadcast = RoundMessage::Broadcast {
            round,
            stage,
            recipients: selected.to_vec(),
            shared: self.server.global_mu.clone(),
            head: self.server.global_head.clone(),
            prototypes: if algorithm == Algorithm::Gldp {
                self.server.global_protos.to_map()
            } else {
                PrototypeMap::new()
            },
        };
        let wire = self.transport.send(&broadcast);

        let config = &self.config;
        let mut participants: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| selected.binary_search(&c.client_id).is_ok())
            .collect();
        let uploads: Vec<Option<RoundMessage>> = participants
            .par_iter_mut()
            .map(|client| {
                let received = RoundMessage::decode(&wire)?;
                client_stage(config, client, &received, round, stage)
            })
            .collect::<Result<_>>()?;

        let mut received = Vec::new();
        for msg in uploads.into_iter().flatten() {
            let bytes = self.transport.send(&msg);
            received.push(RoundMessage::decode(&bytes)?);
        }
        self.aggregate(&received)?;
        self.evaluate_stage(round, stage, selected)
    }

    fn aggregate(&mut self, uploads: &[RoundMessage]) -> Result<()> {
        if uploads.is_empty() {
            warn!("no uploads this stage; global state unchanged");
            return Ok(());
        }
        let mut shared = Vec::new();
        let mut heads = Vec::new();
        let mut protos = Vec::new();
        for msg in uploads {
            match msg {
                RoundMessage::SharedUpdate {
                    client_id,
                    shared: mu,
                    prototypes,
                    ..
                } => {
                    shared.push(mu);
                    if !prototypes.is_empty() {
                        protos.push((*client_id, prototypes.clone()));
                    }
                }
                RoundMessage::FullModelUpdate {
                    shared: mu, head, ..
                } => {
                    shared.push(mu);
                    heads.push(head);
                }
                RoundMessage::Broadcast { .. } => {
                    return Err(Error::Protocol("server received a broadcast".into()))
                }
            }
        }
        if !heads.is_empty() && heads.len() != shared.len() {
            return Err(Error::Protocol(
                "mixed full-model and shared-layer uploads".into(),
            ));
        }
        self.server.global_mu = aggregate_mu(&shared)?;
        if self.config.algorithm.shares_head() {
            self.server.global_head = Some(aggregate_heads(&heads)?);
        }
        if self.config.algorithm == Algorithm::Gldp {
            self.server.global_protos.update_global(&protos)?;
        }
        Ok(())
    }

    /// The classifier client `i` uses at evaluation time.
    fn client_classifier<'a>(&'a self, client: &'a ClientState) -> Result<Classifier<'a>> {
        Ok(match self.config.algorithm {
            Algorithm::Gldp => match self.config.inference {
                InferenceMode::Gp => Classifier::Prototype {
                    shared: &client.params.shared,
                    protos: &self.server.global_protos,
                },
                InferenceMode::Lp if client.local_protos.is_empty() => Classifier::Prototype {
                    shared: &client.params.shared,
                    protos: &self.server.global_protos,
                },
                InferenceMode::Lp => Classifier::Prototype {
                    shared: &client.params.shared,
                    protos: &client.local_protos,
                },
            },
            Algorithm::FedRep => Classifier::Head {
                shared: &client.params.shared,
                head: &client.params.head,
            },
            Algorithm::FedAvg | Algorithm::FedProx => Classifier::Head {
                shared: &self.server.global_mu,
                head: self
                    .server
                    .global_head
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("missing global head".into()))?,
            },
        })
    }

    fn evaluate_stage(&mut self, round: usize, stage: usize, selected: &[usize]) -> Result<()> {
        // clients skipped for lack of stage data are not scored
        let results: Vec<(usize, Option<f64>)> = selected
            .par_iter()
            .filter(|&&id| self.clients[id].current_stage == stage)
            .map(|&id| {
                let client = &self.clients[id];
                let classifier = self.client_classifier(client)?;
                Ok((id, metrics::acc_sel(&classifier, &client.timeline, stage)?))
            })
            .collect::<Result<_>>()?;

        let (mut sel_sum, mut forget_sum, mut n) = (0.0, 0.0, 0usize);
        for (id, acc) in results {
            let Some(acc) = acc else { continue };
            let history = self.sel_history.entry(id).or_default();
            history.push(acc);
            let forgetting = metrics::forgetting(history, history.len() - 1);
            self.metrics.push(
                round,
                stage,
                &self.label,
                Metric::Selected,
                Scope::Client(id),
                acc,
            );
            self.metrics.push(
                round,
                stage,
                &self.label,
                Metric::Forgetting,
                Scope::Client(id),
                forgetting,
            );
            sel_sum += acc;
            forget_sum += forgetting;
            n += 1;
        }
        if n > 0 {
            self.metrics.push(
                round,
                stage,
                &self.label,
                Metric::Selected,
                Scope::All,
                sel_sum / n as f64,
            );
            self.metrics.push(
                round,
                stage,
                &self.label,
                Metric::Forgetting,
                Scope::All,
                forget_sum / n as f64,
            );
        }
        Ok(())
    }

    fn full_tests(&self) -> Result<Vec<LabeledSet>> {
        self.clients
            .par_iter()
            .map(|c| c.timeline.full_test())
            .collect()
    }

    /// `A_glo` and `A_loc` after round `round`, recorded at the last stage.
    fn evaluate_round(&mut self, round: usize) -> Result<()> {
        let tests = self.full_tests()?;
        let test_refs: Vec<&LabeledSet> = tests.iter().collect();
        let local: Vec<Classifier<'_>> = self
            .clients
            .iter()
            .map(|c| self.client_classifier(c))
            .collect::<Result<_>>()?;
        let a_loc = metrics::acc_local(&local, &test_refs)?;

        let a_glo = match self.config.algorithm {
            Algorithm::Gldp => metrics::acc_global(
                &self.server.global_mu,
                &self.server.global_protos,
                &test_refs,
            )?,
            Algorithm::FedRep => {
                let global: Vec<Classifier<'_>> = self
                    .clients
                    .iter()
                    .map(|c| Classifier::Head {
                        shared: &self.server.global_mu,
                        head: &c.params.head,
                    })
                    .collect();
                metrics::acc_local(&global, &test_refs)?
            }
            Algorithm::FedAvg | Algorithm::FedProx => a_loc,
        };
        let stage = self.config.partition.num_stages;
        self.metrics
            .push(round, stage, &self.label, Metric::Global, Scope::All, a_glo);
        self.metrics
            .push(round, stage, &self.label, Metric::Local, Scope::All, a_loc);
        Ok(())
    }

    /// Round-0 rows: the freshly initialized network, classified by its head,
    /// which is the same for every algorithm.
    fn evaluate_initial(&mut self) -> Result<()> {
        let tests = self.full_tests()?;
        let test_refs: Vec<&LabeledSet> = tests.iter().collect();
        let initial: Vec<Classifier<'_>> = self
            .clients
            .iter()
            .map(|c| Classifier::Head {
                shared: &c.params.shared,
                head: &c.params.head,
            })
            .collect();
        let acc = metrics::acc_local(&initial, &test_refs)?;
        self.metrics
            .push(0, 0, &self.label, Metric::Global, Scope::All, acc);
        self.metrics
            .push(0, 0, &self.label, Metric::Local, Scope::All, acc);
        Ok(())
    }
}

/// Client side of one stage: adopt the broadcast, train, and build the upload.
/// Returns `None` when the client has no training data for the stage.
fn client_stage(
    config: &ExperimentConfig,
    client: &mut ClientState,
    broadcast: &RoundMessage,
    round: usize,
    stage: usize,
) -> Result<Option<RoundMessage>> {
    let RoundMessage::Broadcast {
        shared,
        head,
        prototypes: global_protos,
        ..
    } = broadcast
    else {
        return Err(Error::Protocol("client expected a broadcast".into()));
    };
    let task = &client.timeline.stages[stage - 1];
    if task.train.is_empty() {
        warn!(
            "client {} has no training data in stage {stage}; skipped",
            client.client_id
        );
        return Ok(None);
    }
    let mut rng = rng::stream(
        config.seed,
        &[
            tag::LOCAL_TRAINING,
            client.client_id as u64,
            round as u64,
            stage as u64,
        ],
    );
    let id = client.client_id;
    let upload = match config.algorithm {
        Algorithm::Gldp => {
            let mut start = client.params.clone();
            start.shared = shared.clone();
            let (trained, fresh) = model::local_update(
                &start,
                task,
                &client.local_protos,
                global_protos,
                &config.optimizer,
                config.loss,
                &mut rng,
            )?;
            client.local_protos.update_local(&fresh)?;
            client.params = trained;
            RoundMessage::SharedUpdate {
                client_id: id,
                round,
                stage,
                shared: client.params.shared.clone(),
                prototypes: fresh,
                class_counts: task.train.class_counts(),
            }
        }
        Algorithm::FedRep => {
            let mut reference = client.params.clone();
            reference.shared = shared.clone();
            client.params = baseline_update(
                Algorithm::FedRep,
                &client.params,
                &reference,
                task,
                &config.optimizer,
                config.fedprox_mu,
                &mut rng,
            )?;
            RoundMessage::SharedUpdate {
                client_id: id,
                round,
                stage,
                shared: client.params.shared.clone(),
                prototypes: PrototypeMap::new(),
                class_counts: BTreeMap::new(),
            }
        }
        Algorithm::FedAvg | Algorithm::FedProx => {
            let head = head
                .as_ref()
                .ok_or_else(|| Error::Protocol("broadcast lacks the global head".into()))?;
            let global = ModelParams {
                shared: shared.clone(),
                head: head.clone(),
            };
            client.params = baseline_update(
                config.algorithm,
                &client.params,
                &global,
                task,
                &config.optimizer,
                config.fedprox_mu,
                &mut rng,
            )?;
            RoundMessage::FullModelUpdate {
                client_id: id,
                round,
                stage,
                shared: client.params.shared.clone(),
                head: client.params.head.clone(),
            }
        }
    };
    client.current_stage = stage;
    Ok(Some(upload))
}

/// Builds the data, runs all rounds, and returns the metrics.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsLog> {
    let mut sim = Simulation::new(config.clone())?;
    sim.run()?;
    Ok(sim.into_metrics())
}
