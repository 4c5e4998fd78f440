use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, dot, Vector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 1-based expert identifier; expert `i` owns gate row `i - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertId(pub usize);

impl ExpertId {
    pub fn from_index(i: usize) -> Self {
        Self(i + 1)
    }

    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}", self.0)
    }
}

/// Linear-softmax gate: `g = softmax(W·v + b)` with `W` of shape `N×d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GateData<T>", into = "GateData<T>", bound = "T: Scalar")]
pub struct GatingNetwork<T> {
    experts: usize,
    dim: usize,
    /// row-major `experts × dim`
    weights: Vec<T>,
    bias: Vec<T>,
    pub version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct GateData<T> {
    weights: Vec<Vec<T>>,
    bias: Vec<T>,
    version: u64,
}

impl<T: Scalar> TryFrom<GateData<T>> for GatingNetwork<T> {
    type Error = Error;
    fn try_from(d: GateData<T>) -> Result<Self> {
        let mut g = GatingNetwork::from_rows(d.weights, d.bias)?;
        g.version = d.version;
        Ok(g)
    }
}

impl<T: Scalar> From<GatingNetwork<T>> for GateData<T> {
    fn from(g: GatingNetwork<T>) -> Self {
        GateData {
            weights: g.weights.chunks(g.dim).map(<[T]>::to_vec).collect(),
            bias: g.bias,
            version: g.version,
        }
    }
}

impl<T: Scalar> GatingNetwork<T> {
    /// All-zero parameters: uniform routing.
    pub fn zeros(experts: usize, dim: usize) -> Result<Self> {
        if experts == 0 || dim == 0 {
            return Err(Error::Configuration(
                "gating network needs N > 0 experts and d > 0".into(),
            ));
        }
        Ok(Self {
            experts,
            dim,
            weights: vec![T::zero(); experts * dim],
            bias: vec![T::zero(); experts],
            version: 0,
        })
    }

    pub fn from_rows(weights: Vec<Vec<T>>, bias: Vec<T>) -> Result<Self> {
        let experts = weights.len();
        let dim = weights.first().map_or(0, Vec::len);
        let mut g = Self::zeros(experts, dim)?;
        check_dim(experts, bias.len())?;
        for row in &weights {
            check_dim(dim, row.len())?;
        }
        g.weights = weights.into_iter().flatten().collect();
        g.bias = bias;
        g.check_finite()?;
        Ok(g)
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        experts: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut g = Self::zeros(experts, dim)?;
        for w in g.weights.iter_mut().chain(g.bias.iter_mut()) {
            *w = T::lit(rng.gen_range(-scale..=scale));
        }
        Ok(g)
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn row(&self, expert: usize) -> &[T] {
        &self.weights[expert * self.dim..(expert + 1) * self.dim]
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.weights, &mut self.bias)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.weights.iter().chain(&self.bias).all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("gating parameters".into()))
        }
    }

    pub fn logits(&self, v: &[T]) -> Result<Vec<T>> {
        check_dim(self.dim, v.len())?;
        Ok((0..self.experts)
            .map(|i| dot(self.row(i), v) + self.bias[i])
            .collect())
    }

    pub fn gate(&self, v: &Vector<T>) -> Result<GatingDistribution<T>> {
        gate(v, self)
    }
}

/// Probability vector over experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound = "T: Scalar")]
pub struct GatingDistribution<T> {
    pub probs: Vec<T>,
}

impl<T: Scalar> GatingDistribution<T> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, id: ExpertId) -> T {
        self.probs[id.index()]
    }

    /// Highest-probability expert, lowest id on ties.
    pub fn argmax(&self) -> ExpertId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        ExpertId::from_index(best)
    }
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gate logits".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn gate<T: Scalar>(v: &Vector<T>, net: &GatingNetwork<T>) -> Result<GatingDistribution<T>> {
    let logits = net.logits(v.as_slice())?;
    Ok(GatingDistribution {
        probs: softmax(&logits)?,
    })
}

/// The active expert set for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RoutingDecision<T> {
    /// Active experts, highest gate first.
    pub active: Vec<ExpertId>,
    pub k: usize,
    /// Weight per active expert, aligned with `active`.
    pub gates_used: Vec<T>,
    pub renormalized: bool,
}

impl<T: Scalar> RoutingDecision<T> {
    pub fn weight(&self, id: ExpertId) -> Option<T> {
        self.active
            .iter()
            .position(|&a| a == id)
            .map(|i| self.gates_used[i])
    }
}

/// Selects the `min(k, N)` largest gates (lowest id wins ties). With
/// `renormalize` the selected gates are rescaled to sum to one.
pub fn top_k<T: Scalar>(
    g: &GatingDistribution<T>,
    k: usize,
    renormalize: bool,
) -> Result<RoutingDecision<T>> {
    if k == 0 {
        return Err(Error::Validation("top-k needs k >= 1".into()));
    }
    if g.is_empty() {
        return Err(Error::Routing("empty gating distribution".into()));
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| {
        g.probs[b]
            .partial_cmp(&g.probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(g.len()));
    let raw: Vec<T> = order.iter().map(|&i| g.probs[i]).collect();
    let gates_used = if renormalize { renormalized(&raw) } else { raw };
    Ok(RoutingDecision {
        active: order.into_iter().map(ExpertId::from_index).collect(),
        k,
        gates_used,
        renormalized: renormalize,
    })
}

pub(crate) fn renormalized<T: Scalar>(w: &[T]) -> Vec<T> {
    let s: T = w.iter().copied().sum();
    if s > T::zero() {
        w.iter().map(|&x| x / s).collect()
    } else {
        vec![T::one() / T::lit(w.len() as f64); w.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> GatingDistribution<f64> {
        GatingDistribution { probs: p.to_vec() }
    }

    #[test]
    fn zero_gate_is_uniform() {
        let net = GatingNetwork::<f64>::zeros(4, 3).unwrap();
        let g = net
            .gate(&Vector::from_f64(&[0.3, -1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(g.probs, vec![0.25; 4]);
    }

    #[test]
    fn two_logit_softmax() {
        let net = GatingNetwork::from_rows(vec![vec![1.0], vec![0.0]], vec![0.0, 0.0]).unwrap();
        let g = net.gate(&Vector::from_f64(&[1.0]).unwrap()).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(g.probs[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(g.probs[1], 1.0 / (e + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn gate_errors() {
        let net = GatingNetwork::<f64>::zeros(2, 3).unwrap();
        assert!(matches!(
            net.gate(&Vector::from_f64(&[1.0]).unwrap()),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            softmax(&[1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
        assert!(
            GatingNetwork::<f64>::from_rows(vec![vec![1.0, 2.0], vec![1.0]], vec![0.0, 0.0])
                .is_err()
        );
    }

    #[test]
    fn top_k_examples() {
        let d = top_k(&dist(&[0.5, 0.3, 0.15, 0.05]), 2, false).unwrap();
        assert_eq!(d.active, vec![ExpertId(1), ExpertId(2)]);
        assert_eq!(d.gates_used, vec![0.5, 0.3]);
        let all = top_k(&dist(&[0.1, 0.2, 0.3, 0.4]), 9, true).unwrap();
        assert_eq!(all.active.len(), 4);
        assert_abs_diff_eq!(all.gates_used.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let tie = top_k(&dist(&[0.4, 0.25, 0.25, 0.1]), 2, true).unwrap();
        assert_eq!(tie.active, vec![ExpertId(1), ExpertId(2)]);
        assert!(top_k(&dist(&[1.0]), 0, true).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = rand::thread_rng();
        let mut net = GatingNetwork::<f64>::random(3, 5, 1.0, &mut rng).unwrap();
        net.version = 7;
        let back: GatingNetwork<f64> =
            serde_json::from_str(&serde_json::to_string(&net).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..10), c in -50.0f64..50.0) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(dist(&a).argmax(), dist(&b).argmax());
        }

        #[test]
        fn top_k_selects_the_largest(p in prop::collection::vec(0.0f64..1.0, 1..10), k in 1usize..12) {
            let d = top_k(&dist(&p), k, false).unwrap();
            prop_assert_eq!(d.active.len(), k.min(p.len()));
            let min_in = d.gates_used.iter().copied().fold(f64::INFINITY, f64::min);
            for (i, &x) in p.iter().enumerate() {
                if !d.active.contains(&ExpertId::from_index(i)) {
                    prop_assert!(x <= min_in);
                }
            }
        }
    }
}
