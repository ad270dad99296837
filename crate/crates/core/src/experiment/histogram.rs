use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icad::PValue;

pub const DEFAULT_BINS: usize = 20;

/// Equal-width bins over `[0, 1]`. The first bin is `[0, 1/n]`, the rest are
/// `(a, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }
}

/// Bin index computed in integers, so `p = 0.1` with 10 bins lands in the
/// first bin regardless of float rounding.
pub fn bin_index(p: PValue, n_bins: usize) -> usize {
    let num = p.numerator() as u64 * n_bins as u64;
    let den = p.denominator() as u64;
    (num.div_ceil(den) as usize)
        .saturating_sub(1)
        .min(n_bins - 1)
}

pub fn histogram(p_values: &[PValue], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::param("n_bins", "need at least one bin"));
    }
    let mut counts = vec![0; n_bins];
    for &p in p_values {
        counts[bin_index(p, n_bins)] += 1;
    }
    let edges = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    Ok(Histogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(n: u32, d: u32) -> PValue {
        PValue::new(n, d).unwrap()
    }

    #[test]
    fn zeros_go_first() {
        let h = histogram(&[p(0, 100); 7], 20).unwrap();
        assert_eq!(h.counts[0], 7);
        assert_eq!(h.total(), 7);
        assert_eq!(h.edges.len(), 21);
    }

    #[test]
    fn two_bins() {
        let h = histogram(&[p(1, 10), p(9, 10)], 2).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
    }

    #[test]
    fn edges_are_right_closed() {
        let h = histogram(&[p(1, 2), p(51, 100), p(100, 100), p(5, 100)], 20).unwrap();
        assert_eq!(h.counts[9], 1);
        assert_eq!(h.counts[10], 1);
        assert_eq!(h.counts[19], 1);
        assert_eq!(h.counts[0], 1);
    }

    #[test]
    fn zero_bins_is_an_error() {
        assert!(histogram(&[], 0).is_err());
    }

    proptest! {
        #[test]
        fn counts_partition_the_input(den in 1u32..500, nums in prop::collection::vec(0u32..=1000, 0..200), bins in 1usize..50) {
            let ps: Vec<PValue> = nums.iter().map(|&n| p(n % (den + 1), den)).collect();
            let h = histogram(&ps, bins).unwrap();
            prop_assert_eq!(h.total(), ps.len());
            for q in &ps {
                let i = bin_index(*q, bins);
                let v = q.value();
                prop_assert!(v <= h.edges[i + 1] + 1e-12);
                if i > 0 {
                    prop_assert!(v > h.edges[i] - 1e-12);
                }
            }
        }
    }
}
