//! Accuracy measures and the metrics log.
//!
//! - `A_glo`: the global model on every client's test data, averaged over clients.
//! - `A_loc`: each client's personalized model on its own test data, averaged.
//! - `A_sel`: a participating client's current model on the union of its test
//!   sets from stage 1 up to the current stage.
//! - forgetting: largest drop of `A_sel` relative to any earlier stage.

use std::fmt;
use std::io::Write;

use crate::datagen::{ClientTimeline, LabeledSet};
use crate::error::{Error, Result};
use crate::model::{argmax, HeadParams, SharedParams};
use crate::prototypes::{self, PrototypeLookup};

/// How a model turns an input row into a class.
#[derive(Clone, Copy)]
pub enum Classifier<'a> {
    /// Nearest prototype in the embedding space of `shared`.
    Prototype {
        shared: &'a SharedParams,
        protos: &'a dyn PrototypeLookup,
    },
    /// Largest logit of the network `shared` + `head`.
    Head {
        shared: &'a SharedParams,
        head: &'a HeadParams,
    },
}

impl Classifier<'_> {
    pub fn predict_all(&self, set: &LabeledSet) -> Result<Vec<usize>> {
        match self {
            Classifier::Prototype { shared, protos } => {
                let emb = shared.embed_batch(set.inputs.view())?;
                emb.rows()
                    .into_iter()
                    .map(|e| prototypes::predict(e, *protos))
                    .collect()
            }
            Classifier::Head { shared, head } => {
                let emb = shared.embed_batch(set.inputs.view())?;
                Ok(emb
                    .rows()
                    .into_iter()
                    .map(|e| argmax(head.logits(e).view()))
                    .collect())
            }
        }
    }
}

/// Fraction of correctly classified rows; `None` for an empty set.
pub fn accuracy(classifier: &Classifier<'_>, set: &LabeledSet) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    let predictions = classifier.predict_all(set)?;
    let hits = predictions
        .iter()
        .zip(&set.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(Some(hits as f64 / set.len() as f64))
}

/// Mean per-client accuracy, skipping clients without test rows.
pub fn mean_accuracy(pairs: &[(Classifier<'_>, &LabeledSet)]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (classifier, set) in pairs {
        if let Some(acc) = accuracy(classifier, set)? {
            sum += acc;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no client has test samples".into()));
    }
    Ok(sum / n as f64)
}

/// Global representation plus global prototypes on every client's test set.
pub fn acc_global(
    theta: &SharedParams,
    global_protos: &dyn PrototypeLookup,
    test_sets: &[&LabeledSet],
) -> Result<f64> {
    let classifier = Classifier::Prototype {
        shared: theta,
        protos: global_protos,
    };
    let pairs: Vec<_> = test_sets.iter().map(|s| (classifier, *s)).collect();
    mean_accuracy(&pairs)
}

/// Each client's own classifier on its own test set.
pub fn acc_local(models: &[Classifier<'_>], test_sets: &[&LabeledSet]) -> Result<f64> {
    if models.len() != test_sets.len() {
        return Err(Error::Shape(format!(
            "{} models for {} test sets",
            models.len(),
            test_sets.len()
        )));
    }
    let pairs: Vec<_> = models
        .iter()
        .copied()
        .zip(test_sets.iter().copied())
        .collect();
    mean_accuracy(&pairs)
}

/// Accuracy on the union of the client's test sets from stages `1..=stage`.
/// `None` when that union is empty.
pub fn acc_sel(
    classifier: &Classifier<'_>,
    timeline: &ClientTimeline,
    stage: usize,
) -> Result<Option<f64>> {
    let union = timeline.test_union(stage)?;
    accuracy(classifier, &union)
}

/// `max_{j < m} (history[j] - history[m])`, floored at zero. `history[j]` is
/// `A_sel` after stage `j + 1`; `m` is 0-based.
pub fn forgetting(history: &[f64], m: usize) -> f64 {
    history[..m]
        .iter()
        .map(|&earlier| earlier - history[m])
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Global,
    Local,
    Selected,
    Forgetting,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Global => "A_glo",
            Metric::Local => "A_loc",
            Metric::Selected => "A_sel",
            Metric::Forgetting => "forgetting",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [
            Metric::Global,
            Metric::Local,
            Metric::Selected,
            Metric::Forgetting,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    All,
    Client(usize),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("ALL"),
            Scope::Client(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub stage: usize,
    pub algorithm: String,
    pub metric: Metric,
    pub scope: Scope,
    pub value: f64,
}

pub const CSV_HEADER: &str = "round,stage,algorithm,metric,scope,value";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(
        &mut self,
        round: usize,
        stage: usize,
        algorithm: &str,
        metric: Metric,
        scope: Scope,
        value: f64,
    ) {
        debug_assert!((0.0..=1.0).contains(&value), "{metric} = {value}");
        self.rows.push(MetricRow {
            round,
            stage,
            algorithm: algorithm.to_string(),
            metric,
            scope,
            value,
        });
    }

    pub fn rows_for(&self, metric: Metric, scope: Scope) -> impl Iterator<Item = &MetricRow> {
        self.rows
            .iter()
            .filter(move |r| r.metric == metric && r.scope == scope)
    }

    /// Value of the row at the largest (round, stage) for `metric`/`scope`.
    pub fn final_value(&self, metric: Metric, scope: Scope) -> Option<f64> {
        self.rows_for(metric, scope)
            .max_by_key(|r| (r.round, r.stage))
            .map(|r| r.value)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let mut text = String::with_capacity(64 * (self.rows.len() + 1));
        text.push_str(CSV_HEADER);
        text.push('\n');
        for r in &self.rows {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, r.stage, r.algorithm, r.metric, r.scope, r.value
            ));
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::prototypes::PrototypeMap;
    use ndarray::{array, Array2};

    fn identity_shared(dim: usize) -> SharedParams {
        let mut shared = SharedParams::zeros(dim, dim);
        shared.weight = Array2::eye(dim);
        shared
    }

    #[test]
    fn single_class_test_set_is_perfect() {
        let shared = identity_shared(2);
        let protos: PrototypeMap = [(1, array![1.0, 1.0])].into();
        let set = LabeledSet::new(array![[0.9, 1.2], [3.0, 0.1]], vec![1, 1], vec![0, 1]).unwrap();
        assert_eq!(acc_global(&shared, &protos, &[&set]).unwrap(), 1.0);
    }

    #[test]
    fn empty_store_propagates() {
        let shared = identity_shared(2);
        let protos = PrototypeMap::new();
        let set = LabeledSet::new(array![[0.9, 1.2]], vec![1], vec![0]).unwrap();
        assert!(matches!(
            acc_global(&shared, &protos, &[&set]),
            Err(Error::NoPrototypes)
        ));
    }

    #[test]
    fn head_classifier_uses_argmax() {
        let mut params = ModelParams::zeros(2, 2, 2);
        params.shared = identity_shared(2);
        params.head.weight = Array2::eye(2);
        let set = LabeledSet::new(
            array![[2.0, 0.5], [0.1, 3.0], [1.0, 0.0]],
            vec![0, 1, 1],
            vec![0, 1, 2],
        )
        .unwrap();
        let c = Classifier::Head {
            shared: &params.shared,
            head: &params.head,
        };
        assert_eq!(accuracy(&c, &set).unwrap(), Some(2.0 / 3.0));
        assert_eq!(accuracy(&c, &LabeledSet::empty(2)).unwrap(), None);
    }

    #[test]
    fn forgetting_arithmetic() {
        assert_eq!(forgetting(&[0.7], 0), 0.0);
        assert_eq!(forgetting(&[0.6, 0.6, 0.6], 2), 0.0);
        assert_eq!(forgetting(&[0.2, 0.5, 0.9], 2), 0.0);
        assert!((forgetting(&[0.8, 0.5], 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let mut log = MetricsLog::default();
        log.push(1, 5, "GLDP-GP", Metric::Selected, Scope::Client(3), 0.5);
        log.push(1, 5, "GLDP-GP", Metric::Global, Scope::All, 0.25);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,stage,algorithm,metric,scope,value\n1,5,GLDP-GP,A_sel,3,0.5\n1,5,GLDP-GP,A_glo,ALL,0.25\n"
        );
        assert_eq!(log.final_value(Metric::Global, Scope::All), Some(0.25));
        assert_eq!(Metric::parse("A_loc"), Some(Metric::Local));
    }
}
