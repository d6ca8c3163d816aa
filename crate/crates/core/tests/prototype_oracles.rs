//! Prototype computation and store updates against plain-loop formulas.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sthfl_core::prototypes::{self, PrototypeMap, PrototypeStore};

const TOL: f64 = 1e-12;

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.random_range(-5.0..5.0))
}

fn random_map(rng: &mut ChaCha8Rng, classes: usize, dim: usize, p: f64) -> PrototypeMap {
    let mut map = PrototypeMap::new();
    for c in 0..classes {
        if rng.random_bool(p) {
            map.insert(c, random_vec(rng, dim));
        }
    }
    map
}

fn max_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn blend_oracle(old: &Array1<f64>, fresh: &Array1<f64>, beta: f64) -> Array1<f64> {
    let mut out = Array1::zeros(old.len());
    for j in 0..old.len() {
        out[j] = beta * old[j] + (1.0 - beta) * fresh[j];
    }
    out
}

#[test]
fn class_means_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let dim = rng.random_range(1..10);
        let z = rng.random_range(1..6);
        let emb = Array2::from_shape_fn((n, dim), |_| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..z)).collect();
        let got = prototypes::compute(emb.rows().into_iter().zip(labels.iter().copied()));

        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for i in 0..n {
            let e = sums.entry(labels[i]).or_insert((vec![0.0; dim], 0));
            for j in 0..dim {
                e.0[j] += emb[[i, j]];
            }
            e.1 += 1;
        }
        assert_eq!(got.len(), sums.len());
        for (c, (sum, count)) in sums {
            let oracle = Array1::from_iter(sum.into_iter().map(|s| s / count as f64));
            assert!(max_diff(&got[&c], &oracle) < TOL);
        }
    }
}

#[test]
fn local_update_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let dim = rng.random_range(1..8);
        let beta = rng.random_range(0.0..1.0);
        let first = random_map(&mut rng, 6, dim, 0.5);
        let fresh = random_map(&mut rng, 6, dim, 0.5);
        let mut store = PrototypeStore::new(beta).unwrap();
        store.update_local(&first).unwrap();
        store.update_local(&fresh).unwrap();

        let mut oracle = first.clone();
        for (c, f) in &fresh {
            let v = match first.get(c) {
                Some(old) => blend_oracle(old, f, beta),
                None => f.clone(),
            };
            oracle.insert(*c, v);
        }
        let got = store.to_map();
        assert_eq!(
            got.keys().collect::<Vec<_>>(),
            oracle.keys().collect::<Vec<_>>()
        );
        for (c, v) in &oracle {
            assert!(max_diff(&got[c], v) < TOL);
        }
    }
}

#[test]
fn global_update_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let dim = rng.random_range(1..8);
        let beta = rng.random_range(0.0..1.0);
        let existing = random_map(&mut rng, 6, dim, 0.4);
        let uploads: Vec<(usize, PrototypeMap)> = (0..rng.random_range(1..7))
            .map(|i| (i, random_map(&mut rng, 6, dim, 0.6)))
            .collect();
        let mut store = PrototypeStore::new(beta).unwrap();
        store.update_local(&existing).unwrap();
        store.update_global(&uploads).unwrap();

        let mut oracle = existing.clone();
        for c in 0..6 {
            let holders: Vec<&Array1<f64>> =
                uploads.iter().filter_map(|(_, m)| m.get(&c)).collect();
            if holders.is_empty() {
                continue;
            }
            let mut mean = Array1::zeros(dim);
            for h in &holders {
                mean += *h;
            }
            mean /= holders.len() as f64;
            let v = match existing.get(&c) {
                Some(old) => blend_oracle(old, &mean, beta),
                None => mean,
            };
            oracle.insert(c, v);
        }
        let got = store.to_map();
        assert_eq!(
            got.keys().collect::<Vec<_>>(),
            oracle.keys().collect::<Vec<_>>()
        );
        for (c, v) in &oracle {
            assert!(max_diff(&got[c], v) < TOL);
        }
    }
}

#[test]
fn global_update_ignores_upload_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut uploads: Vec<(usize, PrototypeMap)> = (0..7)
            .map(|i| (i, random_map(&mut rng, 5, 4, 0.7)))
            .collect();
        let mut a = PrototypeStore::new(0.3).unwrap();
        a.update_global(&uploads).unwrap();
        uploads.shuffle(&mut rng);
        let mut b = PrototypeStore::new(0.3).unwrap();
        b.update_global(&uploads).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn repeated_blending_converges_geometrically() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let beta = 0.6;
    let start = random_vec(&mut rng, 5);
    let target = random_vec(&mut rng, 5);
    let mut store = PrototypeStore::new(beta).unwrap();
    store.update_local(&[(0, start.clone())].into()).unwrap();
    let fresh: PrototypeMap = [(0, target.clone())].into();
    let d0 = max_diff(&start, &target);
    for k in 1..=30 {
        store.update_local(&fresh).unwrap();
        let dk = max_diff(&store.get(0).unwrap().vector, &target);
        assert!((dk - beta.powi(k) * d0).abs() < 1e-9 * d0.max(1.0), "k={k}");
    }
}

#[test]
fn empty_store_cannot_predict() {
    let store = PrototypeStore::new(0.5).unwrap();
    assert!(matches!(
        store.predict(Array1::zeros(3).view()),
        Err(sthfl_core::Error::NoPrototypes)
    ));
}

proptest! {
    #[test]
    fn blend_is_convex_and_exact_at_the_ends(
        old in prop::collection::vec(-1e3f64..1e3, 1..8),
        shift in prop::collection::vec(-1e3f64..1e3, 8),
        beta in 0.0f64..=1.0,
    ) {
        let old = Array1::from(old);
        let fresh = Array1::from_iter(old.iter().zip(&shift).map(|(o, s)| o + s));
        let mixed = prototypes::blend(old.view(), fresh.view(), beta);
        for j in 0..old.len() {
            let (lo, hi) = if old[j] <= fresh[j] { (old[j], fresh[j]) } else { (fresh[j], old[j]) };
            prop_assert!(lo <= mixed[j] && mixed[j] <= hi);
        }
        prop_assert_eq!(prototypes::blend(old.view(), fresh.view(), 1.0), old.clone());
        prop_assert_eq!(prototypes::blend(old.view(), fresh.view(), 0.0), fresh.clone());
        prop_assert_eq!(prototypes::blend(old.view(), old.view(), beta), old.clone());
    }

    #[test]
    fn prediction_is_scale_free(
        protos in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..6),
        x in prop::collection::vec(-10.0f64..10.0, 3),
        scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0, 1024.0]),
    ) {
        let map: PrototypeMap = protos.iter().enumerate().map(|(c, v)| (c, Array1::from(v.clone()))).collect();
        let scaled: PrototypeMap = map.iter().map(|(c, v)| (*c, v * scale)).collect();
        let x = Array1::from(x);
        let a = prototypes::predict(x.view(), &map).unwrap();
        let b = prototypes::predict((&x * scale).view(), &scaled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mean_of_identical_vectors_is_exact(v in prop::collection::vec(-1e6f64..1e6, 1..10), n in 1usize..12) {
        let a = Array1::from(v);
        let views: Vec<_> = (0..n).map(|_| a.view()).collect();
        prop_assert_eq!(prototypes::coordinate_mean(&views).unwrap(), a);
    }
}
