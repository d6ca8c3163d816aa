//! Class prototypes: per-class mean embeddings, their moving-average stores
//! and nearest-prototype classification.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Class index to prototype vector.
pub type PrototypeMap = BTreeMap<usize, Array1<f64>>;

/// Read access to a set of class prototypes, iterated in ascending class order.
pub trait PrototypeLookup {
    fn prototype(&self, class: usize) -> Option<&Array1<f64>>;
    fn for_each_prototype(&self, f: &mut dyn FnMut(usize, &Array1<f64>));
}

impl PrototypeLookup for PrototypeMap {
    fn prototype(&self, class: usize) -> Option<&Array1<f64>> {
        self.get(&class)
    }

    fn for_each_prototype(&self, f: &mut dyn FnMut(usize, &Array1<f64>)) {
        for (&c, v) in self {
            f(c, v);
        }
    }
}

/// Per-class arithmetic mean of the given embeddings.
pub fn compute<'a, I>(embeddings: I) -> PrototypeMap
where
    I: IntoIterator<Item = (ArrayView1<'a, f64>, usize)>,
{
    let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (emb, class) in embeddings {
        let entry = sums
            .entry(class)
            .or_insert_with(|| (Array1::zeros(emb.len()), 0));
        entry.0 += &emb;
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (sum, n))| (c, sum / n as f64))
        .collect()
}

/// Coordinate-wise mean whose result is independent of input order and equals
/// the common value exactly when all inputs are identical.
///
/// Each coordinate's values are sorted before a running-mean pass
/// `m += (x - m) / k`.
pub fn coordinate_mean(vectors: &[ArrayView1<'_, f64>]) -> Result<Array1<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Protocol("mean of an empty list".into()))?;
    let dim = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Protocol(format!(
            "vectors of dimension {} and {dim} cannot be averaged",
            bad.len()
        )));
    }
    let mut column = Vec::with_capacity(vectors.len());
    let mut out = Array1::zeros(dim);
    for j in 0..dim {
        column.clear();
        column.extend(vectors.iter().map(|v| v[j]));
        column.sort_by(f64::total_cmp);
        let mut mean = column[0];
        for (k, &x) in column.iter().enumerate().skip(1) {
            mean += (x - mean) / (k + 1) as f64;
        }
        out[j] = mean;
    }
    Ok(out)
}

/// `beta * old + (1 - beta) * fresh`, clamped coordinate-wise to the segment
/// between the two so rounding can never leave it.
pub fn blend(old: ArrayView1<'_, f64>, fresh: ArrayView1<'_, f64>, beta: f64) -> Array1<f64> {
    let mut out = Array1::zeros(old.len());
    for ((o, &a), &b) in out.iter_mut().zip(old.iter()).zip(fresh.iter()) {
        let v = beta * a + (1.0 - beta) * b;
        *o = v.clamp(a.min(b), a.max(b));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEntry {
    pub vector: Array1<f64>,
    /// How many fresh prototypes have been folded into this entry.
    pub observations: u64,
}

/// Moving-average prototype set, used both for a client's local prototypes and
/// for the server's global prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    entries: BTreeMap<usize, PrototypeEntry>,
    beta: f64,
}

impl PrototypeStore {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(
                "beta",
                format!("is {beta} but must lie in [0, 1]"),
            ));
        }
        Ok(Self {
            entries: BTreeMap::new(),
            beta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.vector.len())
    }

    pub fn get(&self, class: usize) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &PrototypeEntry)> {
        self.entries.iter().map(|(&c, e)| (c, e))
    }

    pub fn to_map(&self) -> PrototypeMap {
        self.entries
            .iter()
            .map(|(&c, e)| (c, e.vector.clone()))
            .collect()
    }

    fn check_dim(&self, class: usize, dim: usize) -> Result<()> {
        match self.dim() {
            Some(d) if d != dim => Err(Error::Protocol(format!(
                "prototype for class {class} has dimension {dim}, store holds dimension {d}"
            ))),
            _ => Ok(()),
        }
    }

    fn absorb(&mut self, class: usize, fresh: ArrayView1<'_, f64>) {
        let beta = self.beta;
        self.entries
            .entry(class)
            .and_modify(|e| {
                e.vector = blend(e.vector.view(), fresh, beta);
                e.observations += 1;
            })
            .or_insert_with(|| PrototypeEntry {
                vector: fresh.to_owned(),
                observations: 1,
            });
    }

    /// Blends fresh client prototypes into the store; unseen classes are
    /// inserted as-is and classes absent from `fresh` are left untouched.
    pub fn update_local(&mut self, fresh: &PrototypeMap) -> Result<()> {
        for (&class, v) in fresh {
            self.check_dim(class, v.len())?;
        }
        if let Some(d) = fresh.values().next().map(|v| v.len()) {
            if let Some((&c, v)) = fresh.iter().find(|(_, v)| v.len() != d) {
                return Err(Error::Protocol(format!(
                    "prototype for class {c} has dimension {}, expected {d}",
                    v.len()
                )));
            }
        }
        for (&class, v) in fresh {
            self.absorb(class, v.view());
        }
        Ok(())
    }

    /// Server-side refresh: per class, blends in the mean of all uploaded
    /// prototypes for that class. A class seen for the first time is set to
    /// that mean directly. Uploads are reduced in ascending client order.
    pub fn update_global(&mut self, uploads: &[(usize, PrototypeMap)]) -> Result<()> {
        let mut sorted: Vec<&(usize, PrototypeMap)> = uploads.iter().collect();
        sorted.sort_by_key(|(client, _)| *client);
        let mut per_class: BTreeMap<usize, Vec<ArrayView1<'_, f64>>> = BTreeMap::new();
        for (_, protos) in &sorted {
            for (&class, v) in protos {
                per_class.entry(class).or_default().push(v.view());
            }
        }
        let mut means = Vec::with_capacity(per_class.len());
        for (class, vectors) in &per_class {
            let mean = coordinate_mean(vectors)?;
            self.check_dim(*class, mean.len())?;
            means.push((*class, mean));
        }
        if let Some((_, first)) = means.first() {
            let d = first.len();
            if let Some((c, m)) = means.iter().find(|(_, m)| m.len() != d) {
                return Err(Error::Protocol(format!(
                    "uploads for class {c} have dimension {}, others have {d}",
                    m.len()
                )));
            }
        }
        for (class, mean) in means {
            self.absorb(class, mean.view());
        }
        Ok(())
    }

    /// Nearest stored prototype to `embedding`.
    pub fn predict(&self, embedding: ArrayView1<'_, f64>) -> Result<usize> {
        predict(embedding, self)
    }
}

impl PrototypeLookup for PrototypeStore {
    fn prototype(&self, class: usize) -> Option<&Array1<f64>> {
        self.entries.get(&class).map(|e| &e.vector)
    }

    fn for_each_prototype(&self, f: &mut dyn FnMut(usize, &Array1<f64>)) {
        for (&c, e) in &self.entries {
            f(c, &e.vector);
        }
    }
}

/// Class whose prototype is nearest in Euclidean distance; lowest class index
/// wins ties.
pub fn predict<P: PrototypeLookup + ?Sized>(
    embedding: ArrayView1<'_, f64>,
    protos: &P,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut mismatch = None;
    protos.for_each_prototype(&mut |class, proto| {
        if proto.len() != embedding.len() {
            mismatch = Some((class, proto.len()));
            return;
        }
        let d: f64 = proto
            .iter()
            .zip(embedding.iter())
            .map(|(p, e)| (p - e) * (p - e))
            .sum();
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((class, d)),
        }
    });
    if let Some((class, len)) = mismatch {
        return Err(Error::Shape(format!(
            "prototype for class {class} has dimension {len}, embedding has {}",
            embedding.len()
        )));
    }
    best.map(|(c, _)| c).ok_or(Error::NoPrototypes)
}

/// Writes `class,coord0,...` rows, one per class in ascending order.
pub fn write_csv(protos: &impl PrototypeLookup, out: &mut impl Write) -> Result<()> {
    let mut dim = None;
    protos.for_each_prototype(&mut |_, v| {
        dim.get_or_insert(v.len());
    });
    let dim = dim.unwrap_or(0);
    let mut text = String::from("class");
    for j in 0..dim {
        text.push_str(&format!(",coord{j}"));
    }
    text.push('\n');
    protos.for_each_prototype(&mut |c, v| {
        text.push_str(&c.to_string());
        for x in v {
            text.push(',');
            text.push_str(&x.to_string());
        }
        text.push('\n');
    });
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_csv(input: &mut impl BufRead) -> Result<PrototypeMap> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty prototype file".into()))??;
    let dim = header.split(',').count().saturating_sub(1);
    if !header.starts_with("class") {
        return Err(Error::Data(format!(
            "unexpected prototype header `{header}`"
        )));
    }
    let mut map = PrototypeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |e: &dyn std::fmt::Display| Error::Data(format!("prototype line {}: {e}", i + 2));
        let mut fields = line.split(',');
        let class: usize = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e| bad(&e))?;
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(&e)))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(bad(&format!(
                "{} coordinates, header has {dim}",
                values.len()
            )));
        }
        map.insert(class, Array1::from(values));
    }
    Ok(map)
}
