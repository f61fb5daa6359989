//! Index sets of the second-, third- and fourth-order moment conditions
//! implied by mutually independent shocks with unit variance.
//!
//! A condition is identified by an exponent vector `m`; the moment function
//! is `prod_i e_i^{m_i} - c(m)` where `c(m)` is zero whenever some exponent
//! equals one and one otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent vector of a single moment condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex {
    exponents: Vec<u8>,
}

impl MultiIndex {
    pub fn new(exponents: Vec<u8>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::InvalidArgument("multi-index must have length >= 1".into()));
        }
        let order: u32 = exponents.iter().map(|&m| m as u32).sum();
        let cap = match order {
            2 | 3 => 2,
            4 => 3,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "multi-index order must be 2, 3 or 4, got {order}"
                )))
            }
        };
        if exponents.iter().any(|&m| m > cap) {
            return Err(Error::InvalidArgument(format!(
                "exponent exceeds {cap} for an order-{order} condition: {exponents:?}"
            )));
        }
        Ok(Self { exponents })
    }

    pub fn exponents(&self) -> &[u8] {
        &self.exponents
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn order(&self) -> u32 {
        self.exponents.iter().map(|&m| m as u32).sum()
    }

    /// The independence-implied value of `E[prod e_i^{m_i}]` for standardized shocks.
    pub fn constant(&self) -> f64 {
        constant_c(self)
    }

    /// Non-zero `(shock, exponent)` pairs.
    pub fn support(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.exponents
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0)
            .map(|(i, &m)| (i, m))
    }
}

pub fn constant_c(m: &MultiIndex) -> f64 {
    if m.exponents.contains(&1) {
        0.0
    } else {
        1.0
    }
}

/// Ordered collection of moment conditions sharing a dimension `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSystem {
    n: usize,
    indices: Vec<MultiIndex>,
    constants: Vec<f64>,
}

impl MomentSystem {
    pub fn from_indices(n: usize, indices: Vec<MultiIndex>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dimension n must be >= 1".into()));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("moment system is empty".into()));
        }
        if let Some(bad) = indices.iter().find(|m| m.dim() != n) {
            return Err(Error::DimensionMismatch(format!(
                "index {:?} has length {} but n = {n}",
                bad.exponents(),
                bad.dim()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &indices {
            if !seen.insert(m.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate moment condition {:?}",
                    m.exponents()
                )));
            }
        }
        let constants = indices.iter().map(constant_c).collect();
        Ok(Self { n, indices, constants })
    }

    /// All second- to fourth-order conditions for dimension `n`.
    pub fn full(n: usize) -> Result<Self> {
        enumerate_moment_indices(n, &[2, 3, 4])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn constants(&self) -> &[f64] {
        &self.constants
    }

    /// Number of conditions per order, as `(second, third, fourth)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for m in &self.indices {
            match m.order() {
                2 => c.0 += 1,
                3 => c.1 += 1,
                _ => c.2 += 1,
            }
        }
        c
    }

    /// Largest exponent appearing anywhere in the system.
    pub fn max_exponent(&self) -> u8 {
        self.indices
            .iter()
            .flat_map(|m| m.exponents().iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// Enumerates the requested index sets. Orders ascend; within an order the
/// exponent vectors are sorted lexicographically in descending order, so the
/// variance conditions lead (`(2,0)` before `(1,1)` before `(0,2)`).
pub fn enumerate_moment_indices(n: usize, orders: &[u32]) -> Result<MomentSystem> {
    if n == 0 {
        return Err(Error::InvalidArgument("dimension n must be >= 1".into()));
    }
    if orders.is_empty() {
        return Err(Error::InvalidArgument("no moment orders requested".into()));
    }
    let mut wanted: Vec<u32> = orders.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if let Some(o) = wanted.iter().find(|o| !(2..=4).contains(*o)) {
        return Err(Error::InvalidArgument(format!("unsupported moment order {o}")));
    }

    let mut indices = Vec::new();
    for order in wanted {
        let cap = if order == 4 { 3 } else { 2 };
        let mut level = Vec::new();
        let mut current = vec![0u8; n];
        compositions(order as u8, cap, 0, &mut current, &mut level);
        level.sort_unstable_by(|a, b| b.cmp(a));
        indices.extend(level.into_iter().map(|exponents| MultiIndex { exponents }));
    }
    MomentSystem::from_indices(n, indices)
}

fn compositions(remaining: u8, cap: u8, pos: usize, current: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos == current.len() {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    for v in 0..=remaining.min(cap) {
        current[pos] = v;
        compositions(remaining - v, cap, pos + 1, current, out);
    }
    current[pos] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_count(n: usize, order: u32) -> usize {
        let cap: u32 = if order == 4 { 3 } else { 2 };
        let total = (cap + 1).pow(n as u32);
        (0..total)
            .filter(|&code| {
                let mut c = code;
                let mut sum = 0;
                for _ in 0..n {
                    sum += c % (cap + 1);
                    c /= cap + 1;
                }
                sum == order
            })
            .count()
    }

    #[test]
    fn counts_match_closed_form_for_small_n() {
        assert_eq!(MomentSystem::full(2).unwrap().counts(), (3, 2, 3));
        assert_eq!(MomentSystem::full(3).unwrap().counts(), (6, 7, 12));
        assert_eq!(MomentSystem::full(4).unwrap().counts(), (10, 16, 31));
        assert_eq!(MomentSystem::full(2).unwrap().len(), 8);
        assert_eq!(MomentSystem::full(4).unwrap().len(), 57);
    }

    #[test]
    fn counts_match_brute_force_up_to_six() {
        for n in 1..=6 {
            let sys = MomentSystem::full(n).unwrap();
            let (two, three, four) = sys.counts();
            assert_eq!(two, n * (n + 1) / 2);
            assert_eq!(two, brute_force_count(n, 2));
            assert_eq!(three, brute_force_count(n, 3));
            assert_eq!(four, brute_force_count(n, 4));
        }
    }

    #[test]
    fn univariate_variance_only() {
        let sys = enumerate_moment_indices(1, &[2]).unwrap();
        assert_eq!(sys.len(), 1);
        assert_eq!(sys.indices()[0].exponents(), &[2]);
        assert_eq!(sys.constants(), &[1.0]);
    }

    #[test]
    fn constants() {
        let c = |v: Vec<u8>| constant_c(&MultiIndex::new(v).unwrap());
        assert_eq!(c(vec![2, 0]), 1.0);
        assert_eq!(c(vec![3, 1]), 0.0);
        assert_eq!(c(vec![2, 2]), 1.0);
        assert_eq!(c(vec![1, 1]), 0.0);
        assert_eq!(c(vec![0, 3, 1]), 0.0);
        assert_eq!(c(vec![0, 2, 0]), 1.0);
    }

    #[test]
    fn ordering_is_deterministic() {
        let sys = MomentSystem::full(2).unwrap();
        let got: Vec<&[u8]> = sys.indices().iter().map(|m| m.exponents()).collect();
        assert_eq!(
            got,
            vec![
                &[2, 0][..],
                &[1, 1],
                &[0, 2],
                &[2, 1],
                &[1, 2],
                &[3, 1],
                &[2, 2],
                &[1, 3]
            ]
        );
        assert_eq!(sys, MomentSystem::full(2).unwrap());
        for (m, &c) in sys.indices().iter().zip(sys.constants()) {
            assert_eq!(c == 0.0, m.exponents().contains(&1));
        }
    }

    #[test]
    fn rejects_invalid() {
        assert!(enumerate_moment_indices(0, &[2]).is_err());
        assert!(enumerate_moment_indices(2, &[]).is_err());
        assert!(enumerate_moment_indices(2, &[5]).is_err());
        assert!(MultiIndex::new(vec![3, 0]).is_err());
        assert!(MultiIndex::new(vec![4, 0]).is_err());
        assert!(MultiIndex::new(vec![0, 0]).is_err());
        let m = MultiIndex::new(vec![1, 1]).unwrap();
        assert!(MomentSystem::from_indices(2, vec![m.clone(), m]).is_err());
    }
}
