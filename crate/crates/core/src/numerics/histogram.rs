use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    /// Bins `values` on the given strictly increasing edges. The last bin is
    /// closed on the right.
    pub fn with_edges(edges: Vec<f64>, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "histogram edges must be strictly increasing with at least two entries".into(),
            ));
        }
        let lo = edges[0];
        let hi = edges[edges.len() - 1];
        let mut counts = vec![0u64; edges.len() - 1];
        let (mut underflow, mut overflow) = (0, 0);
        let last = counts.len() - 1;
        for v in values {
            if v < lo {
                underflow += 1;
            } else if v > hi {
                overflow += 1;
            } else {
                // first edge strictly greater than v, minus one
                let idx = edges.partition_point(|&e| e <= v).saturating_sub(1);
                counts[idx.min(last)] += 1;
            }
        }
        Ok(Self {
            edges,
            counts,
            underflow,
            overflow,
        })
    }

    /// `bins` equal-width bins spanning the data range.
    pub fn uniform(values: &[f32], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let (mut lo, mut hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        if values.is_empty() {
            (lo, hi) = (0.0, 1.0);
        } else if lo == hi {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
        edges.push(hi);
        Self::with_edges(edges, values.iter().map(|&v| v as f64))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// CSV with header `bin_lo,bin_hi,count`; under/overflow rows use infinite bounds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let lo = self.edges[0];
        let hi = self.edges[self.edges.len() - 1];
        out.push_str(&format!("-inf,{lo},{}\n", self.underflow));
        for (w, c) in self.edges.windows(2).zip(&self.counts) {
            out.push_str(&format!("{},{},{c}\n", w[0], w[1]));
        }
        out.push_str(&format!("{hi},inf,{}\n", self.overflow));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_every_element() {
        let values: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin()).collect();
        let h = Histogram::uniform(&values, 17).unwrap();
        assert_eq!(h.total(), 1000);
        assert_eq!(h.underflow + h.overflow, 0);
    }

    #[test]
    fn explicit_edges_route_out_of_range() {
        let h = Histogram::with_edges(vec![0.0, 1.0, 2.0], [-1.0, 0.0, 0.5, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!((h.underflow, h.overflow), (1, 1));
        assert!(Histogram::with_edges(vec![0.0, 0.0], []).is_err());
    }

    #[test]
    fn csv_has_header_and_all_rows() {
        let h = Histogram::uniform(&[1.0, 1.0, 1.0], 4).unwrap();
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_lo,bin_hi,count\n"));
        assert_eq!(csv.lines().count(), 1 + 4 + 2);
        assert_eq!(h.total(), 3);
    }
}
