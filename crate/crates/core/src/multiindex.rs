//! Multi-indices `α ∈ N^d` for partial derivatives `∂^α`.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn zero(d: usize) -> Self {
        Self(vec![0; d])
    }

    pub fn unit(d: usize, i: usize) -> Self {
        let mut m = Self::zero(d);
        m.0[i] = 1;
        m
    }

    pub fn from_slice(v: &[u32]) -> Self {
        Self(v.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Length `|α|`.
    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&a| a == 0)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn get(&self, i: usize) -> u32 {
        self.0[i]
    }

    pub fn add(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn increment(&self, i: usize) -> Self {
        let mut m = self.clone();
        m.0[i] += 1;
        m
    }

    pub fn decrement(&self, i: usize) -> Option<Self> {
        if self.0[i] == 0 {
            return None;
        }
        let mut m = self.clone();
        m.0[i] -= 1;
        Some(m)
    }

    /// `(-1)^{|α|}`.
    pub fn sign(&self) -> f64 {
        if self.order().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// All multi-indices `γ ≤ self` componentwise, paired with the
    /// multinomial coefficient `C(self, γ)` of Leibniz' rule.
    pub fn leibniz_splits(&self) -> Vec<(MultiIndex, f64)> {
        let mut out = vec![(MultiIndex(Vec::with_capacity(self.dim())), 1.0)];
        for &a in &self.0 {
            let mut next = Vec::with_capacity(out.len() * (a as usize + 1));
            for (m, c) in &out {
                for k in 0..=a {
                    let mut v = m.0.clone();
                    v.push(k);
                    next.push((MultiIndex(v), c * binomial(a, k)));
                }
            }
            out = next;
        }
        out
    }

    /// Every multi-index in dimension `d` with `lo ≤ |α| ≤ hi`, ordered by
    /// length then lexicographically.
    pub fn all_with_order(d: usize, lo: u32, hi: u32) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        for k in lo..=hi {
            let mut level = Vec::new();
            compositions(d, k, &mut Vec::new(), &mut level);
            level.sort();
            level.reverse();
            out.extend(level.into_iter().map(MultiIndex));
        }
        out
    }
}

fn compositions(d: usize, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == d {
        let mut v = prefix.clone();
        v.push(k);
        out.push(v);
        return;
    }
    if d == 0 {
        return;
    }
    for a in 0..=k {
        prefix.push(a);
        compositions(d, k - a, prefix, out);
        prefix.pop();
    }
}

pub fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<u32>> for MultiIndex {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_of_derivative_orders() {
        // number of multi-indices of length k in d dims is C(k+d-1, d-1)
        assert_eq!(MultiIndex::all_with_order(1, 1, 3).len(), 3);
        assert_eq!(MultiIndex::all_with_order(2, 1, 3).len(), 2 + 3 + 4);
        assert_eq!(MultiIndex::all_with_order(3, 1, 3).len(), 3 + 6 + 10);
    }

    #[test]
    fn leibniz_weights_sum_to_power_of_two() {
        let a = MultiIndex::from_slice(&[2, 1]);
        let total: f64 = a.leibniz_splits().iter().map(|(_, c)| c).sum();
        assert_eq!(total, 8.0);
    }
}
