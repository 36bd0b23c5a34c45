//! Componentwise order on `N^k`: minimal antichains, upward closures and the
//! partition of `[M] \ M` into parts with a unique minimal member.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A point of `N^k`. Ordered lexicographically for storage; use
/// [`MultiIndex::le`] for the componentwise partial order.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn new(v: Vec<u32>) -> MultiIndex {
        MultiIndex(v)
    }

    pub fn zeros(k: usize) -> MultiIndex {
        MultiIndex(vec![0; k])
    }

    pub fn unit(k: usize, i: usize) -> MultiIndex {
        let mut v = vec![0; k];
        v[i] = 1;
        MultiIndex(v)
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Componentwise `self ≤ other`.
    pub fn leq(&self, other: &MultiIndex) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn partial_cmp_dom(&self, other: &MultiIndex) -> Option<Ordering> {
        match (self.leq(other), other.leq(self)) {
            (true, true) => Some(Ordering::Equal),
            (true, false) => Some(Ordering::Less),
            (false, true) => Some(Ordering::Greater),
            (false, false) => None,
        }
    }

    pub fn add(&self, o: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&o.0).map(|(a, b)| a + b).collect())
    }

    /// `self − o`, defined when `o ≤ self`.
    pub fn sub(&self, o: &MultiIndex) -> Option<MultiIndex> {
        if !o.leq(self) {
            return None;
        }
        Some(MultiIndex(self.0.iter().zip(&o.0).map(|(a, b)| a - b).collect()))
    }

    pub fn concat(&self, o: &MultiIndex) -> MultiIndex {
        let mut v = self.0.clone();
        v.extend_from_slice(&o.0);
        MultiIndex(v)
    }

    pub fn split_at(&self, i: usize) -> (MultiIndex, MultiIndex) {
        (MultiIndex(self.0[..i].to_vec()), MultiIndex(self.0[i..].to_vec()))
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// `{α : α_i > ε_i for i ∈ free, α_j = base_j for j ∉ free}`.
///
/// `base` is the unique minimal member, so on free coordinates it holds
/// `ε_i + 1`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct UpsetPart {
    pub base: MultiIndex,
    pub free_coords: Vec<usize>,
    pub thresholds: Vec<u32>,
}

impl UpsetPart {
    pub fn contains(&self, a: &MultiIndex) -> bool {
        if a.arity() != self.base.arity() {
            return false;
        }
        (0..a.arity()).all(|i| match self.free_coords.iter().position(|&c| c == i) {
            Some(pos) => a.0[i] > self.thresholds[pos],
            None => a.0[i] == self.base.0[i],
        })
    }

    pub fn minimal_member(&self) -> &MultiIndex {
        &self.base
    }

    pub fn is_singleton(&self) -> bool {
        self.free_coords.is_empty()
    }
}

/// Minimal members of `s` under the componentwise order, sorted.
pub fn min_antichain<'a>(s: impl IntoIterator<Item = &'a MultiIndex>) -> Vec<MultiIndex> {
    let set: BTreeSet<&MultiIndex> = s.into_iter().collect();
    let items: Vec<&MultiIndex> = set.into_iter().collect();
    let mut out = Vec::new();
    for a in &items {
        let dominated = items.iter().any(|b| b != a && b.leq(a));
        if !dominated {
            out.push((*a).clone());
        }
    }
    out
}

pub fn is_antichain(m: &[MultiIndex]) -> bool {
    for (i, a) in m.iter().enumerate() {
        for b in &m[i + 1..] {
            if a.leq(b) || b.leq(a) {
                return false;
            }
        }
    }
    true
}

pub fn upward_closure_contains(m: &[MultiIndex], a: &MultiIndex) -> bool {
    m.iter().any(|b| b.leq(a))
}

/// Partition of `[M] \ M` into parts with a unique minimal member, each
/// contained in or disjoint from every `[α]`, `α ∈ M`.
///
/// With `ε_i = max{α_i : α ∈ M}`, the points with `α_i ≤ ε_i` for all `i`
/// are listed as singletons. Every other point is classified by the set `N` of
/// coordinates where it exceeds `ε` and by its values off `N`; each class
/// `{α_N > ε_N, α_{N^c} = γ}` is nonempty and lies in `[M]` exactly when
/// `(γ, ε_N)` does. Enumerating the classes directly visits each one once.
pub fn partition_complement(m: &[MultiIndex]) -> Vec<UpsetPart> {
    let mins = min_antichain(m.iter());
    if mins.is_empty() {
        return Vec::new();
    }
    let k = mins[0].arity();
    // For an antichain this is the max over min M. Non-minimal members of M
    // widen the box so that they land among the singletons and can be removed.
    let eps: Vec<u32> = (0..k).map(|i| m.iter().map(|a| a.0[i]).max().unwrap_or(0)).collect();
    let originals: BTreeSet<&MultiIndex> = m.iter().collect();
    let mut parts = Vec::new();

    // Every subset N of coordinates, including the empty one (singletons).
    for mask in 0u32..(1u32 << k) {
        let free: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let fixed: Vec<usize> = (0..k).filter(|i| mask & (1 << i) == 0).collect();
        let mut gamma = vec![0u32; fixed.len()];
        loop {
            let mut probe = vec![0u32; k];
            for (pos, &j) in fixed.iter().enumerate() {
                probe[j] = gamma[pos];
            }
            for &i in &free {
                probe[i] = eps[i];
            }
            let probe = MultiIndex(probe);
            if upward_closure_contains(&mins, &probe) {
                let mut base = probe.clone();
                for &i in &free {
                    base.0[i] = eps[i] + 1;
                }
                let keep = !free.is_empty() || !originals.contains(&base);
                if keep {
                    parts.push(UpsetPart {
                        base,
                        thresholds: free.iter().map(|&i| eps[i]).collect(),
                        free_coords: free.clone(),
                    });
                }
            }
            // Odometer over γ ∈ ∏_{j ∉ N} [0, ε_j].
            let mut pos = 0;
            loop {
                if pos == fixed.len() {
                    break;
                }
                if gamma[pos] < eps[fixed[pos]] {
                    gamma[pos] += 1;
                    break;
                }
                gamma[pos] = 0;
                pos += 1;
            }
            if pos == fixed.len() {
                break;
            }
        }
    }
    parts.sort();
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mi(v: &[u32]) -> MultiIndex {
        MultiIndex(v.to_vec())
    }

    fn box_points(k: usize, b: u32) -> Vec<MultiIndex> {
        let mut out = vec![MultiIndex(vec![])];
        for _ in 0..k {
            let mut next = Vec::new();
            for p in &out {
                for v in 0..=b {
                    let mut q = p.0.clone();
                    q.push(v);
                    next.push(MultiIndex(q));
                }
            }
            out = next;
        }
        out
    }

    #[test]
    fn antichain_examples() {
        let s = [mi(&[1, 2]), mi(&[2, 1]), mi(&[2, 2])];
        assert_eq!(min_antichain(s.iter()), vec![mi(&[1, 2]), mi(&[2, 1])]);
        let s = [mi(&[0, 0]), mi(&[3, 5])];
        assert_eq!(min_antichain(s.iter()), vec![mi(&[0, 0])]);
    }

    #[test]
    fn closure_examples() {
        assert!(upward_closure_contains(&[mi(&[1, 1])], &mi(&[2, 1])));
        assert!(!upward_closure_contains(&[mi(&[1, 1])], &mi(&[0, 5])));
        assert!(!upward_closure_contains(&[], &mi(&[0, 0])));
    }

    #[test]
    fn partition_examples() {
        let p = partition_complement(&[mi(&[0, 0])]);
        assert_eq!(p.len(), 3);
        let bases: Vec<_> = p.iter().map(|x| x.base.clone()).collect();
        assert!(bases.contains(&mi(&[1, 0])));
        assert!(bases.contains(&mi(&[0, 1])));
        assert!(bases.contains(&mi(&[1, 1])));

        let p = partition_complement(&[mi(&[1, 1])]);
        let mut bases: Vec<_> = p.iter().map(|x| x.base.clone()).collect();
        bases.sort();
        assert_eq!(bases, vec![mi(&[1, 2]), mi(&[2, 1]), mi(&[2, 2])]);

        assert!(partition_complement(&[]).is_empty());
    }

    fn check_partition(m: &[MultiIndex]) -> Result<(), String> {
        let parts = partition_complement(m);
        let mins = min_antichain(m.iter());
        let k = m[0].arity();
        let b = parts.iter().flat_map(|p| p.thresholds.iter().copied()).max().unwrap_or(0)
            + 2
            + m.iter().flat_map(|a| a.0.iter().copied()).max().unwrap_or(0);
        for pt in box_points(k, b) {
            let hits: Vec<_> = parts.iter().filter(|p| p.contains(&pt)).collect();
            let in_m = m.contains(&pt);
            let in_up = upward_closure_contains(&mins, &pt);
            let want = usize::from(in_up && !in_m);
            if hits.len() != want {
                return Err(format!("{pt:?} hit by {} parts", hits.len()));
            }
            for p in hits {
                if !p.base.leq(&pt) {
                    return Err(format!("minimal member {:?} not below {pt:?}", p.base));
                }
                for a in &mins {
                    // Compatible: the whole part lies in [a] or misses it.
                    if a.leq(&p.base) != a.leq(&pt) {
                        return Err(format!("part {:?} splits [{a:?}]", p.base));
                    }
                }
            }
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn min_antichain_brute_force(pts in prop::collection::vec(prop::collection::vec(0u32..7, 3), 1..50)) {
            let s: Vec<MultiIndex> = pts.into_iter().map(MultiIndex).collect();
            let mins = min_antichain(s.iter());
            prop_assert!(is_antichain(&mins));
            for a in &s {
                let minimal = !s.iter().any(|b| b != a && b.leq(a));
                prop_assert_eq!(minimal, mins.contains(a));
            }
            for pt in box_points(3, 8) {
                prop_assert_eq!(upward_closure_contains(&mins, &pt), upward_closure_contains(&s, &pt));
            }
        }

        #[test]
        fn partition_is_exact(k in 1usize..4, pts in prop::collection::vec(prop::collection::vec(0u32..5, 3), 1..6)) {
            let m: Vec<MultiIndex> = pts.into_iter().map(|v| MultiIndex(v[..k].to_vec())).collect();
            prop_assert!(check_partition(&m).is_ok(), "{:?}", check_partition(&m));
        }
    }
}
