//! Binary-relevance ranking metrics: P@N, average precision, and cascade ERR@N.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A ranked list (no duplicates) with its non-empty set of relevant items.
#[derive(Debug, Clone)]
pub struct JudgedRanking<T> {
    ranked: Vec<T>,
    relevant: HashSet<T>,
}

impl<T: Eq + Hash + Clone> JudgedRanking<T> {
    pub fn new(ranked: Vec<T>, relevant: HashSet<T>) -> Result<Self> {
        if relevant.is_empty() {
            return Err(Error::Data("relevant set is empty".into()));
        }
        let distinct: HashSet<&T> = ranked.iter().collect();
        if distinct.len() != ranked.len() {
            return Err(Error::Data("ranking contains duplicates".into()));
        }
        Ok(Self { ranked, relevant })
    }

    pub fn single(ranked: Vec<T>, gold: T) -> Result<Self> {
        Self::new(ranked, HashSet::from([gold]))
    }

    fn hits(&self) -> impl Iterator<Item = bool> + '_ {
        self.ranked.iter().map(|id| self.relevant.contains(id))
    }

    /// `|relevant ∩ top-n| / n`.
    pub fn precision_at_n(&self, n: usize) -> f64 {
        assert!(n >= 1, "precision cutoff must be >= 1");
        self.hits().take(n).filter(|&h| h).count() as f64 / n as f64
    }

    /// Mean over the relevant set of precision at each relevant item's rank;
    /// relevant items that were not retrieved contribute zero.
    pub fn average_precision(&self) -> f64 {
        let mut found = 0usize;
        let mut total = 0.0;
        for (i, hit) in self.hits().enumerate() {
            if hit {
                found += 1;
                total += found as f64 / (i + 1) as f64;
            }
        }
        total / self.relevant.len() as f64
    }

    /// `Σ_{r≤n} (1/r)·R_r·Π_{i<r}(1−R_i)` with `R = 1/2` for relevant items.
    pub fn err_at_n(&self, n: usize) -> f64 {
        assert!(n >= 1, "ERR cutoff must be >= 1");
        let mut not_stopped = 1.0;
        let mut err = 0.0;
        for (i, hit) in self.hits().take(n).enumerate() {
            let r = if hit { 0.5 } else { 0.0 };
            err += not_stopped * r / (i + 1) as f64;
            not_stopped *= 1.0 - r;
        }
        err
    }

    pub fn query_metrics(&self) -> QueryMetrics {
        QueryMetrics {
            p_at_1: self.precision_at_n(1),
            ap: self.average_precision(),
            err_at_5: self.err_at_n(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub p_at_1: f64,
    pub ap: f64,
    pub err_at_5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p_at_1: f64,
    pub map: f64,
    pub err_at_5: f64,
    pub count: usize,
}

/// Arithmetic mean of each metric over queries.
pub fn aggregate(per_query: &[QueryMetrics]) -> Result<MetricsReport> {
    if per_query.is_empty() {
        return Err(Error::Data("no queries to aggregate".into()));
    }
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        p_at_1: mean(|q| q.p_at_1),
        map: mean(|q| q.ap),
        err_at_5: mean(|q| q.err_at_5),
        count: per_query.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(gold_ranks: &[usize], len: usize) -> JudgedRanking<usize> {
        let rel = gold_ranks.iter().map(|r| r - 1).collect();
        JudgedRanking::new((0..len).collect(), rel).unwrap()
    }

    #[test]
    fn precision_examples() {
        assert_eq!(ranking(&[1], 5).precision_at_n(1), 1.0);
        assert_eq!(ranking(&[2], 5).precision_at_n(1), 0.0);
        assert_eq!(ranking(&[2, 4], 5).precision_at_n(5), 0.4);
    }

    #[test]
    fn average_precision_examples() {
        for r in 1..=6 {
            assert!((ranking(&[r], 6).average_precision() - 1.0 / r as f64).abs() < 1e-15);
        }
        assert!((ranking(&[1, 3], 5).average_precision() - 5.0 / 6.0).abs() < 1e-15);
        // gold not retrieved
        let missing = JudgedRanking::single(vec![1, 2], 9).unwrap();
        assert_eq!(missing.average_precision(), 0.0);
    }

    #[test]
    fn err_examples() {
        assert_eq!(ranking(&[1], 5).err_at_n(5), 0.5);
        assert_eq!(ranking(&[2], 5).err_at_n(5), 0.25);
        assert_eq!(ranking(&[6], 8).err_at_n(5), 0.0);
    }

    #[test]
    fn err_decreases_with_rank() {
        let mut prev = f64::INFINITY;
        for r in 1..=8 {
            let e = ranking(&[r], 8).err_at_n(5);
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn invalid_rankings_rejected() {
        assert!(JudgedRanking::new(vec![1, 1], HashSet::from([1])).is_err());
        assert!(JudgedRanking::<u8>::new(vec![1], HashSet::new()).is_err());
    }

    #[test]
    fn aggregate_means() {
        let q = |p| QueryMetrics {
            p_at_1: p,
            ap: p,
            err_at_5: p / 2.0,
        };
        let r = aggregate(&[q(1.0), q(0.0), q(1.0), q(0.0)]).unwrap();
        assert_eq!(r.p_at_1, 0.5);
        assert_eq!(r.count, 4);
        let one = aggregate(&[q(0.3)]).unwrap();
        assert_eq!((one.p_at_1, one.map, one.err_at_5), (0.3, 0.3, 0.15));
        assert!(aggregate(&[]).is_err());
    }
}
