//! Treatment coding and the linear feature map.
//!
//! A subject with covariates `o` (length `q`) receiving arm `a` is encoded as
//!
//! ```text
//! (1, dummy(a), o, dummy(a) ⊗ o)
//! ```
//!
//! where `dummy(a)` is the reference-coded indicator vector of length `K - 1`.
//! For a binary treatment this is `(1, a, o, a·o)` with `p = 2q + 2`.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RtlError};

/// Reference-arm dummy coding for a discrete treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentCoding {
    num_arms: usize,
    reference_arm: usize,
}

impl TreatmentCoding {
    pub fn new(num_arms: usize, reference_arm: usize) -> Result<Self> {
        if num_arms < 2 {
            return Err(RtlError::invalid(format!(
                "treatment coding needs at least 2 arms, got {num_arms}"
            )));
        }
        if reference_arm >= num_arms {
            return Err(RtlError::InvalidArm {
                arm: reference_arm,
                num_arms,
            });
        }
        Ok(Self {
            num_arms,
            reference_arm,
        })
    }

    /// Binary treatment with arm 0 as reference.
    pub fn binary() -> Self {
        Self {
            num_arms: 2,
            reference_arm: 0,
        }
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn reference_arm(&self) -> usize {
        self.reference_arm
    }

    /// Number of dummy columns, `K - 1`.
    pub fn num_contrasts(&self) -> usize {
        self.num_arms - 1
    }

    /// Position of `arm` among the dummy columns, `None` for the reference arm.
    pub fn dummy_index(&self, arm: usize) -> Result<Option<usize>> {
        if arm >= self.num_arms {
            return Err(RtlError::InvalidArm {
                arm,
                num_arms: self.num_arms,
            });
        }
        Ok(match arm.cmp(&self.reference_arm) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Less => Some(arm),
            std::cmp::Ordering::Greater => Some(arm - 1),
        })
    }

    /// Arm encoded by dummy column `k`.
    pub fn arm_of_dummy(&self, k: usize) -> usize {
        if k < self.reference_arm {
            k
        } else {
            k + 1
        }
    }
}

/// Index ranges of each coefficient block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoefficientLayout {
    pub intercept: usize,
    pub treatment: Range<usize>,
    pub covariates: Range<usize>,
    /// One block of length `q` per non-reference arm, in dummy order.
    pub interactions: Vec<Range<usize>>,
}

impl CoefficientLayout {
    fn new(q: usize, contrasts: usize) -> Self {
        let treatment = 1..1 + contrasts;
        let covariates = treatment.end..treatment.end + q;
        let mut start = covariates.end;
        let interactions = (0..contrasts)
            .map(|_| {
                let r = start..start + q;
                start += q;
                r
            })
            .collect();
        Self {
            intercept: 0,
            treatment,
            covariates,
            interactions,
        }
    }

    pub fn width(&self) -> usize {
        self.interactions
            .last()
            .map(|r| r.end)
            .unwrap_or(self.covariates.end)
    }

    /// All interaction coordinates in ascending order.
    pub fn interaction_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.interactions.iter().flat_map(|r| r.clone())
    }

    /// Treatment main effects followed by every interaction coordinate.
    pub fn treatment_related_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.treatment.clone().chain(self.interaction_indices())
    }

    /// Name of the block that contains coordinate `j`.
    pub fn block_of(&self, j: usize) -> Option<Block> {
        if j == self.intercept {
            Some(Block::Intercept)
        } else if self.treatment.contains(&j) {
            Some(Block::Treatment)
        } else if self.covariates.contains(&j) {
            Some(Block::Covariate)
        } else {
            self.interactions
                .iter()
                .position(|r| r.contains(&j))
                .map(Block::Interaction)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Intercept,
    Treatment,
    Covariate,
    /// Interaction block for the given dummy column.
    Interaction(usize),
}

/// The map from `(covariates, arm)` to the regressor vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    q: usize,
    coding: TreatmentCoding,
}

impl FeatureMap {
    pub fn new(q: usize, coding: TreatmentCoding) -> Self {
        Self { q, coding }
    }

    pub fn binary(q: usize) -> Self {
        Self::new(q, TreatmentCoding::binary())
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn coding(&self) -> TreatmentCoding {
        self.coding
    }

    pub fn num_arms(&self) -> usize {
        self.coding.num_arms()
    }

    /// `1 + (K-1) + q + (K-1)q`.
    pub fn p(&self) -> usize {
        let c = self.coding.num_contrasts();
        1 + c + self.q + c * self.q
    }

    pub fn layout(&self) -> CoefficientLayout {
        CoefficientLayout::new(self.q, self.coding.num_contrasts())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.q {
            return Err(RtlError::DimensionMismatch {
                context: "covariate vector",
                expected: self.q,
                received: len,
            });
        }
        Ok(())
    }

    fn fill_row(&self, o: ArrayView1<f64>, arm: usize, out: &mut [f64]) -> Result<()> {
        let dummy = self.coding.dummy_index(arm)?;
        let q = self.q;
        let c = self.coding.num_contrasts();
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
        for (dst, &x) in out[1 + c..1 + c + q].iter_mut().zip(o.iter()) {
            *dst = x;
        }
        if let Some(k) = dummy {
            out[1 + k] = 1.0;
            let start = 1 + c + q + k * q;
            for (dst, &x) in out[start..start + q].iter_mut().zip(o.iter()) {
                *dst = x;
            }
        }
        Ok(())
    }

    pub fn encode(&self, o: ArrayView1<f64>, arm: usize) -> Result<Array1<f64>> {
        self.check_len(o.len())?;
        let mut row = vec![0.0; self.p()];
        self.fill_row(o, arm, &mut row)?;
        Ok(Array1::from(row))
    }

    pub fn encode_matrix(&self, o: ArrayView2<f64>, arms: &[usize]) -> Result<Array2<f64>> {
        self.check_len(o.ncols())?;
        if arms.len() != o.nrows() {
            return Err(RtlError::DimensionMismatch {
                context: "arm vector",
                expected: o.nrows(),
                received: arms.len(),
            });
        }
        let p = self.p();
        let mut out = Array2::zeros((o.nrows(), p));
        let mut buf = vec![0.0; p];
        for (i, (row, &arm)) in o.outer_iter().zip(arms).enumerate() {
            self.fill_row(row, arm, &mut buf)?;
            out.row_mut(i)
                .iter_mut()
                .zip(&buf)
                .for_each(|(d, &s)| *d = s);
        }
        Ok(out)
    }

    /// Linear predictor `encode(o, arm) · beta` without materializing the row.
    pub fn predict(&self, o: ArrayView1<f64>, arm: usize, beta: ArrayView1<f64>) -> Result<f64> {
        self.check_len(o.len())?;
        if beta.len() != self.p() {
            return Err(RtlError::DimensionMismatch {
                context: "coefficient vector",
                expected: self.p(),
                received: beta.len(),
            });
        }
        let q = self.q;
        let c = self.coding.num_contrasts();
        let mut value = beta[0] + o.dot(&beta.slice(ndarray::s![1 + c..1 + c + q]));
        if let Some(k) = self.coding.dummy_index(arm)? {
            let start = 1 + c + q + k * q;
            value += beta[1 + k] + o.dot(&beta.slice(ndarray::s![start..start + q]));
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn reference_arm_zeroes_treatment_blocks() {
        let map = FeatureMap::binary(2);
        let row = map.encode(array![0.0, 0.0].view(), 0).unwrap();
        assert_eq!(row.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn active_arm_copies_covariates_into_interactions() {
        let map = FeatureMap::binary(2);
        let row = map.encode(array![1.0, 2.0].view(), 1).unwrap();
        assert_eq!(row.to_vec(), vec![1.0, 1.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn three_arm_layout() {
        // K = 3, q = 1: (1, d1, d2, o, d1*o, d2*o)
        let map = FeatureMap::new(1, TreatmentCoding::new(3, 0).unwrap());
        assert_eq!(map.p(), 6);
        let row = map.encode(array![3.0].view(), 2).unwrap();
        assert_eq!(row.to_vec(), vec![1.0, 0.0, 1.0, 3.0, 0.0, 3.0]);
    }

    #[test]
    fn nonzero_reference_arm() {
        let coding = TreatmentCoding::new(3, 1).unwrap();
        assert_eq!(coding.dummy_index(0).unwrap(), Some(0));
        assert_eq!(coding.dummy_index(1).unwrap(), None);
        assert_eq!(coding.dummy_index(2).unwrap(), Some(1));
        assert_eq!(coding.arm_of_dummy(0), 0);
        assert_eq!(coding.arm_of_dummy(1), 2);
    }

    #[test]
    fn dimension_errors_name_lengths() {
        let map = FeatureMap::binary(3);
        let err = map.encode(array![1.0, 2.0].view(), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 3") && msg.contains("got 2"), "{msg}");
        assert!(matches!(
            map.encode(array![1.0, 2.0, 3.0].view(), 2),
            Err(RtlError::InvalidArm { arm: 2, .. })
        ));
        assert!(TreatmentCoding::new(1, 0).is_err());
        assert!(TreatmentCoding::new(2, 2).is_err());
    }

    #[test]
    fn binary_width_is_2q_plus_2() {
        for q in [1, 5, 20] {
            assert_eq!(FeatureMap::binary(q).p(), 2 * q + 2);
        }
    }

    #[test]
    fn matrix_of_reference_rows_has_zero_treatment_columns() {
        let map = FeatureMap::binary(2);
        let o = array![[0.3, -1.0], [2.0, 0.5], [1.0, 1.0]];
        let x = map.encode_matrix(o.view(), &[0, 0, 0]).unwrap();
        let layout = map.layout();
        for j in layout.treatment_related_indices() {
            assert!(x.column(j).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_row_matrix_equals_encode() {
        let map = FeatureMap::binary(2);
        let o = array![[0.25, -4.0]];
        let x = map.encode_matrix(o.view(), &[1]).unwrap();
        assert_eq!(x.row(0), map.encode(o.row(0), 1).unwrap());
    }

    #[test]
    fn layout_partitions_coordinates() {
        for (q, k) in [(1, 2), (4, 2), (3, 3), (2, 5)] {
            let map = FeatureMap::new(q, TreatmentCoding::new(k, 0).unwrap());
            let layout = map.layout();
            assert_eq!(layout.width(), map.p());
            let mut seen = vec![0; map.p()];
            seen[layout.intercept] += 1;
            layout.treatment.clone().for_each(|j| seen[j] += 1);
            layout.covariates.clone().for_each(|j| seen[j] += 1);
            for r in &layout.interactions {
                assert_eq!(r.len(), q);
                r.clone().for_each(|j| seen[j] += 1);
            }
            assert!(seen.iter().all(|&c| c == 1));
            assert!((0..map.p()).all(|j| layout.block_of(j).is_some()));
        }
    }

    proptest! {
        #[test]
        fn matrix_rows_match_encode(
            vals in prop::collection::vec(-5.0f64..5.0, 6),
            arms in prop::collection::vec(0usize..3, 3),
        ) {
            let map = FeatureMap::new(2, TreatmentCoding::new(3, 1).unwrap());
            let o = Array2::from_shape_vec((3, 2), vals).unwrap();
            let x = map.encode_matrix(o.view(), &arms).unwrap();
            for i in 0..3 {
                prop_assert_eq!(x.row(i), map.encode(o.row(i), arms[i]).unwrap());
            }
        }

        #[test]
        fn encoding_is_linear_in_covariates(
            vals in prop::collection::vec(-5.0f64..5.0, 3),
            alpha in -3.0f64..3.0,
            arm in 0usize..2,
        ) {
            let map = FeatureMap::binary(3);
            let o = Array1::from(vals);
            let base = map.encode(o.view(), arm).unwrap();
            let scaled = map.encode((&o * alpha).view(), arm).unwrap();
            let layout = map.layout();
            prop_assert_eq!(scaled[0], base[0]);
            for j in layout.treatment.clone() {
                prop_assert_eq!(scaled[j], base[j]);
            }
            for j in layout.covariates.clone().chain(layout.interaction_indices()) {
                prop_assert!((scaled[j] - alpha * base[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn predict_matches_dot(
            vals in prop::collection::vec(-5.0f64..5.0, 2),
            beta in prop::collection::vec(-2.0f64..2.0, 9),
            arm in 0usize..3,
        ) {
            let map = FeatureMap::new(2, TreatmentCoding::new(3, 0).unwrap());
            let o = Array1::from(vals);
            let beta = Array1::from(beta);
            let direct = map.encode(o.view(), arm).unwrap().dot(&beta);
            let fast = map.predict(o.view(), arm, beta.view()).unwrap();
            prop_assert!((direct - fast).abs() < 1e-12);
        }
    }
}
