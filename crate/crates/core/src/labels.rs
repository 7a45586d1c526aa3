//! Token difficulty labels derived from how closely each nested expert
//! reproduces the full MLP output.

use std::io::Write;

use crate::autodiff::dot;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Below this squared norm the full output counts as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// `⟨y_e, y_full⟩ / ⟨y_full, y_full⟩`, or 1 when `y_full` is (nearly) zero.
pub fn similarity<T: Real>(y_e: &[T], y_full: &[T]) -> Result<f64> {
    if y_e.len() != y_full.len() || y_e.is_empty() {
        return Err(Error::contract(format!(
            "similarity needs equal non-empty rows, got {} and {}",
            y_e.len(),
            y_full.len()
        )));
    }
    let denom = dot(y_full, y_full).as_f64();
    if denom < ZERO_NORM_EPS {
        return Ok(1.0);
    }
    Ok(dot(y_e, y_full).as_f64() / denom)
}

/// `S[b][e]` for every token `b` and expert `e`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub experts: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, experts: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * experts || experts == 0 {
            return Err(Error::Shape {
                op: "similarity_matrix",
                lhs: vec![rows, experts],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            rows,
            experts,
            data,
        })
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.data[b * self.experts..(b + 1) * self.experts]
    }

    /// Scores every expert output against the last (full) one.
    pub fn from_outputs<T: Real>(outputs: &[Tensor<T>]) -> Result<Self> {
        let full = outputs
            .last()
            .ok_or_else(|| Error::contract("no expert outputs"))?;
        let (rows, _) = full.dims2()?;
        let experts = outputs.len();
        let mut data = Vec::with_capacity(rows * experts);
        for b in 0..rows {
            let y_full = full.row(b);
            for y in outputs {
                data.push(similarity(y.row(b), y_full)?);
            }
        }
        Self::new(rows, experts, data)
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::config(format!(
            "theta must lie in (0, 1), got {theta}"
        )));
    }
    Ok(())
}

/// Smallest expert whose similarity strictly exceeds `theta`, per token.
pub fn derive_labels(s: &SimilarityMatrix, theta: f64) -> Result<Vec<usize>> {
    check_theta(theta)?;
    Ok((0..s.rows)
        .map(|b| {
            s.row(b)
                .iter()
                .position(|&v| v > theta)
                .unwrap_or(s.experts - 1)
        })
        .collect())
}

/// Labels for every layer, each over the same token order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DifficultyLabels {
    pub num_experts: usize,
    pub per_layer: Vec<Vec<usize>>,
}

impl DifficultyLabels {
    pub fn new(num_experts: usize, num_layers: usize) -> Self {
        Self {
            num_experts,
            per_layer: vec![Vec::new(); num_layers],
        }
    }

    pub fn extend(&mut self, other: &DifficultyLabels) {
        for (mine, theirs) in self.per_layer.iter_mut().zip(&other.per_layer) {
            mine.extend_from_slice(theirs);
        }
    }

    /// One line per (layer, token): `layer,token_index,label`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "layer,token_index,label")?;
        for (layer, labels) in self.per_layer.iter().enumerate() {
            for (i, l) in labels.iter().enumerate() {
                writeln!(out, "{layer},{i},{l}")?;
            }
        }
        Ok(())
    }
}

/// Per-layer fraction of tokens in each expert class. Layers without
/// tokens get an all-zero row.
pub fn label_distribution(
    labels: &DifficultyLabels,
    num_layers: usize,
    num_experts: usize,
) -> Vec<Vec<f64>> {
    (0..num_layers)
        .map(|layer| {
            let row = labels
                .per_layer
                .get(layer)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let mut counts = vec![0usize; num_experts];
            for &l in row {
                if l < num_experts {
                    counts[l] += 1;
                }
            }
            let total = row.len().max(1) as f64;
            counts.into_iter().map(|c| c as f64 / total).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn similarity_reference_cases() {
        let y = [0.3f64, -1.2, 2.0];
        assert_eq!(similarity(&y, &y).unwrap(), 1.0);
        let half: Vec<f64> = y.iter().map(|v| v * 0.5).collect();
        assert!((similarity(&half, &y).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(similarity(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(similarity(&[3.0f64, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(similarity(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    fn matrix(rows: &[[f64; 4]]) -> SimilarityMatrix {
        SimilarityMatrix::new(rows.len(), 4, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn min_index_rule() {
        let s = matrix(&[[0.65, 0.82, 0.95, 1.0]]);
        assert_eq!(derive_labels(&s, 0.8).unwrap(), vec![1]);
        assert_eq!(derive_labels(&s, 0.9).unwrap(), vec![2]);
        assert_eq!(derive_labels(&s, 0.5).unwrap(), vec![0]);
        let ones = matrix(&[[1.0; 4]]);
        assert_eq!(derive_labels(&ones, 0.99).unwrap(), vec![0]);
    }

    #[test]
    fn strict_inequality() {
        let s = matrix(&[[0.8, 0.8, 0.9, 1.0]]);
        assert_eq!(derive_labels(&s, 0.8).unwrap(), vec![2]);
    }

    #[test]
    fn theta_outside_unit_interval_is_rejected() {
        let s = matrix(&[[0.1, 0.2, 0.3, 1.0]]);
        for theta in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            assert!(matches!(derive_labels(&s, theta), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_full_output_is_easiest() {
        let outputs = vec![
            Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]),
            Tensor::from_rows(&[vec![0.0, 0.0]]),
        ];
        let s = SimilarityMatrix::from_outputs(&outputs).unwrap();
        assert_eq!(s.data, vec![1.0, 1.0]);
        assert_eq!(derive_labels(&s, 0.9).unwrap(), vec![0]);
    }

    #[test]
    fn distributions() {
        let mut l = DifficultyLabels::new(4, 2);
        l.per_layer[0] = vec![0; 5];
        l.per_layer[1] = vec![0, 1, 2, 3];
        let d = label_distribution(&l, 2, 4);
        assert_eq!(d[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(d[1], vec![0.25; 4]);

        let mut ten = DifficultyLabels::new(4, 1);
        ten.per_layer[0] = vec![0, 0, 0, 1, 1, 1, 1, 1, 2, 2];
        assert_eq!(label_distribution(&ten, 1, 4)[0], vec![0.3, 0.5, 0.2, 0.0]);
    }

    #[test]
    fn csv_dump() {
        let mut l = DifficultyLabels::new(2, 2);
        l.per_layer[0] = vec![1, 0];
        l.per_layer[1] = vec![0];
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "layer,token_index,label\n0,0,1\n0,1,0\n1,0,0\n"
        );
    }

    fn brute_force(row: &[f64], theta: f64) -> usize {
        let mut best = row.len() - 1;
        for e in (0..row.len()).rev() {
            if row[e] > theta {
                best = e;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn labels_match_scan_and_are_monotone_in_theta(
            rows in prop::collection::vec(prop::collection::vec(-0.5f64..1.5, 3), 1..40),
            t1 in 0.01f64..0.98,
            dt in 0.0f64..0.5,
        ) {
            let t2 = (t1 + dt).min(0.99);
            let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied().chain([1.0])).collect();
            let s = SimilarityMatrix::new(rows.len(), 4, data).unwrap();
            let l1 = derive_labels(&s, t1).unwrap();
            let l2 = derive_labels(&s, t2).unwrap();
            for b in 0..rows.len() {
                prop_assert_eq!(l1[b], brute_force(s.row(b), t1));
                prop_assert!(l1[b] <= l2[b]);
            }
        }

        #[test]
        fn distribution_rows_sum_to_one(labels in prop::collection::vec(0usize..4, 1..200)) {
            let mut l = DifficultyLabels::new(4, 1);
            l.per_layer[0] = labels;
            let sum: f64 = label_distribution(&l, 1, 4)[0].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
