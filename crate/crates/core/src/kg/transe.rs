//! TransE embeddings trained offline with a margin ranking loss.
//!
//! A triple `(h, r, t)` is plausible when `h + r ≈ t`; its score is
//! `-‖h + r - t‖₂`. Training minimizes
//!
//! ```text
//! Σ max(0, γ + ‖h + r - t‖ - ‖h' + r - t'‖)
//! ```
//!
//! over positives and corruptions that replace the head or the tail (each with
//! probability ½) by a uniformly drawn entity. Entity vectors are kept on the
//! unit sphere and relation vectors inside the unit ball after every step.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{KnowledgeGraph, Triple, TripleIds};
use crate::embedding::{norm, Vector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 100,
            negatives: 1,
            seed: 42,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Configuration("TransE dim must be > 0".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Configuration("TransE margin must be > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Configuration(
                "TransE learning rate must be > 0".into(),
            ));
        }
        if self.negatives == 0 {
            return Err(Error::Configuration(
                "TransE needs at least one negative per positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trained entity and relation vectors keyed by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KgEmbeddings<T> {
    pub dim: usize,
    pub entity_vectors: BTreeMap<String, Vector<T>>,
    pub relation_vectors: BTreeMap<String, Vector<T>>,
    pub trained_epoch: usize,
}

impl<T: Scalar> KgEmbeddings<T> {
    pub fn entity(&self, id: &str) -> Result<&Vector<T>> {
        self.entity_vectors
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("entity {id:?}")))
    }

    pub fn relation(&self, id: &str) -> Result<&Vector<T>> {
        self.relation_vectors
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("relation {id:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean hinge loss per (positive, negative) pair, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// `-‖h + r - t‖₂`
pub fn transe_score<T: Scalar>(triple: &Triple, emb: &KgEmbeddings<T>) -> Result<T> {
    let h = emb.entity(&triple.head)?;
    let r = emb.relation(&triple.relation)?;
    let t = emb.entity(&triple.tail)?;
    Ok(-translation_distance(
        h.as_slice(),
        r.as_slice(),
        t.as_slice(),
    ))
}

fn translation_distance<T: Scalar>(h: &[T], r: &[T], t: &[T]) -> T {
    h.iter()
        .zip(r)
        .zip(t)
        .map(|((&h, &r), &t)| {
            let d = h + r - t;
            d * d
        })
        .sum::<T>()
        .sqrt()
}

struct Params<T> {
    entities: Vec<Vec<T>>,
    relations: Vec<Vec<T>>,
}

fn normalize_in_place<T: Scalar>(v: &mut [T]) {
    let n = norm(v);
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn clip_to_unit_ball<T: Scalar>(v: &mut [T]) {
    let n = norm(v);
    if n > T::one() {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn initialize<T: Scalar>(
    graph: &KnowledgeGraph,
    cfg: &TransEConfig,
    rng: &mut ChaCha8Rng,
) -> Params<T> {
    let bound = 6.0 / (cfg.dim as f64).sqrt();
    let mut draw = |n: usize| -> Vec<Vec<T>> {
        (0..n)
            .map(|_| {
                let mut v: Vec<T> = (0..cfg.dim)
                    .map(|_| T::lit(rng.gen_range(-bound..bound)))
                    .collect();
                normalize_in_place(&mut v);
                v
            })
            .collect()
    };
    let relations = draw(graph.relations().len());
    let entities = draw(graph.entities().len());
    Params {
        entities,
        relations,
    }
}

fn export<T: Scalar>(
    graph: &KnowledgeGraph,
    params: Params<T>,
    dim: usize,
    epoch: usize,
) -> Result<KgEmbeddings<T>> {
    let entity_vectors = graph
        .entities()
        .iter()
        .cloned()
        .zip(params.entities)
        .map(|(k, v)| Ok((k, Vector::new(v)?)))
        .collect::<Result<_>>()?;
    let relation_vectors = graph
        .relations()
        .iter()
        .cloned()
        .zip(params.relations)
        .map(|(k, v)| Ok((k, Vector::new(v)?)))
        .collect::<Result<_>>()?;
    Ok(KgEmbeddings {
        dim,
        entity_vectors,
        relation_vectors,
        trained_epoch: epoch,
    })
}

fn corrupt(
    graph: &KnowledgeGraph,
    (h, r, t): TripleIds,
    rng: &mut ChaCha8Rng,
) -> Option<TripleIds> {
    let n = graph.entities().len();
    if n < 2 {
        return None;
    }
    let mut candidate = None;
    for _ in 0..16 {
        let replace_head = rng.gen_bool(0.5);
        let mut e = rng.gen_range(0..n - 1);
        let original = if replace_head { h } else { t };
        if e >= original {
            e += 1;
        }
        let c = if replace_head { (e, r, t) } else { (h, r, e) };
        candidate = Some(c);
        if !graph.contains_ids(c) {
            break;
        }
    }
    candidate
}

fn residual<T: Scalar>(p: &Params<T>, (h, r, t): TripleIds) -> Vec<T> {
    let (hv, rv, tv) = (&p.entities[h], &p.relations[r], &p.entities[t]);
    hv.iter()
        .zip(rv)
        .zip(tv)
        .map(|((&h, &r), &t)| h + r - t)
        .collect()
}

fn unit<T: Scalar>(mut v: Vec<T>) -> (T, Vec<T>) {
    let n = norm(&v);
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x /= n);
    }
    (n, v)
}

fn axpy<T: Scalar>(dst: &mut [T], a: T, x: &[T]) {
    dst.iter_mut().zip(x).for_each(|(d, &x)| *d += a * x);
}

/// Trains TransE on every triple of `graph`. Deterministic for a fixed seed;
/// with `epochs == 0` the seeded initialization is returned unchanged.
pub fn train_transe<T: Scalar>(
    graph: &KnowledgeGraph,
    cfg: &TransEConfig,
) -> Result<(KgEmbeddings<T>, TrainingReport)> {
    cfg.validate()?;
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = initialize::<T>(graph, cfg, &mut rng);
    let gamma = T::lit(cfg.margin);
    let lr = T::lit(cfg.learning_rate);
    let mut order: Vec<TripleIds> = graph.triple_ids().collect();
    let mut report = TrainingReport::default();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for &pos in &order {
            for _ in 0..cfg.negatives {
                let Some(neg) = corrupt(graph, pos, &mut rng) else {
                    continue;
                };
                pairs += 1;
                let (d_pos, u_pos) = unit(residual(&params, pos));
                let (d_neg, u_neg) = unit(residual(&params, neg));
                let loss = gamma + d_pos - d_neg;
                if loss <= T::zero() {
                    continue;
                }
                total += loss.to_f64_lossy();
                if !loss.is_finite() {
                    return Err(Error::NonFinite("TransE loss".into()));
                }
                // d‖e‖/de = e/‖e‖ with e = h + r - t
                axpy(&mut params.entities[pos.0], -lr, &u_pos);
                axpy(&mut params.entities[pos.2], lr, &u_pos);
                axpy(&mut params.relations[pos.1], -lr, &u_pos);
                axpy(&mut params.entities[neg.0], lr, &u_neg);
                axpy(&mut params.entities[neg.2], -lr, &u_neg);
                axpy(&mut params.relations[neg.1], lr, &u_neg);
                for e in [pos.0, pos.2, neg.0, neg.2] {
                    normalize_in_place(&mut params.entities[e]);
                }
                clip_to_unit_ball(&mut params.relations[pos.1]);
            }
        }
        for e in params.entities.iter_mut() {
            normalize_in_place(e);
        }
        report.epoch_losses.push(if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        });
    }
    Ok((export(graph, params, cfg.dim, cfg.epochs)?, report))
}

/// Fraction of graph triples whose true tail ranks within the top `k` of all
/// entities (raw setting; ties count in the triple's favour).
pub fn hits_at_k<T: Scalar>(
    graph: &KnowledgeGraph,
    emb: &KgEmbeddings<T>,
    k: usize,
) -> Result<f64> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let entities: Vec<&Vector<T>> = graph
        .entities()
        .iter()
        .map(|e| emb.entity(e))
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for (h, r, t) in graph.triple_ids() {
        let rv = emb.relation(&graph.relations()[r])?.as_slice();
        let hv = entities[h].as_slice();
        let true_d = translation_distance(hv, rv, entities[t].as_slice());
        let better = entities
            .iter()
            .filter(|e| translation_distance(hv, rv, e.as_slice()) < true_d)
            .count();
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / graph.len() as f64)
}
