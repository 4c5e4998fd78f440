use std::collections::BTreeSet;

use super::linking::EntityLinkSet;
use super::transe::KgEmbeddings;
use crate::embedding::cosine_slices;
use crate::error::Result;
use crate::scalar::Scalar;

/// Symmetric mean-max entity similarity in `[0, 1]`.
///
/// For each entity on one side take its best cosine against the other side,
/// average, do the same in the other direction and return the mean of the two.
/// Negative cosines count as 0. An empty side yields 0.
pub fn kg_similarity<T: Scalar>(
    a: &EntityLinkSet,
    b: &EntityLinkSet,
    emb: &KgEmbeddings<T>,
) -> Result<T> {
    let ea = a.entities();
    let eb = b.entities();
    if ea.is_empty() || eb.is_empty() {
        return Ok(T::zero());
    }
    let va = ea
        .iter()
        .map(|e| emb.entity(e))
        .collect::<Result<Vec<_>>>()?;
    let vb = eb
        .iter()
        .map(|e| emb.entity(e))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_max(va.len(), vb.len(), |i, j| {
        cosine_slices(va[i].as_slice(), vb[j].as_slice())
    }))
}

/// The same matching with exact identity as the entity similarity, i.e. as if
/// every entity had its own orthonormal vector. Used before embeddings exist.
pub fn kg_similarity_exact<T: Scalar>(a: &EntityLinkSet, b: &EntityLinkSet) -> T {
    let ea: Vec<String> = a.entities().into_iter().collect();
    let eb: Vec<String> = b.entities().into_iter().collect();
    if ea.is_empty() || eb.is_empty() {
        return T::zero();
    }
    mean_max(ea.len(), eb.len(), |i, j| {
        if ea[i] == eb[j] {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn mean_max<T: Scalar>(n: usize, m: usize, sim: impl Fn(usize, usize) -> T) -> T {
    let clamp = |x: T| x.max(T::zero()).min(T::one());
    let a_side: T = (0..n)
        .map(|i| (0..m).map(|j| clamp(sim(i, j))).fold(T::zero(), T::max))
        .sum::<T>()
        / T::lit(n as f64);
    let b_side: T = (0..m)
        .map(|j| (0..n).map(|i| clamp(sim(i, j))).fold(T::zero(), T::max))
        .sum::<T>()
        / T::lit(m as f64);
    clamp((a_side + b_side) / T::lit(2.0))
}

/// Entity ids linked on either side, for pulling KG context.
pub fn linked_entities(sets: &[&EntityLinkSet]) -> BTreeSet<String> {
    sets.iter().flat_map(|s| s.entities()).collect()
}
