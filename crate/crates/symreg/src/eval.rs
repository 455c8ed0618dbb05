//! Registration-quality metrics: label-overlap Dice scores and
//! non-positive-Jacobian fold counts.

use crate::field::DeformationField;
use crate::loss::jacobian_det_field;
use crate::volume::LabelMap;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Per-label Dice overlap. Labels absent from both maps are listed in
/// `absent` and excluded from the mean rather than scored 0/0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiceReport {
    pub labels: Vec<u16>,
    pub scores: Vec<f64>,
    pub absent: Vec<u16>,
    pub mean: f64,
}

/// Distinct nonzero labels present in either map, ascending.
pub fn present_labels(a: &LabelMap, b: &LabelMap) -> Vec<u16> {
    let mut seen = vec![false; usize::from(u16::MAX) + 1];
    for &l in a.data().iter().chain(b.data()) {
        seen[usize::from(l)] = true;
    }
    (1..=u16::MAX).filter(|&l| seen[usize::from(l)]).collect()
}

/// Dice coefficient 2|A∩B|/(|A|+|B|) per requested label.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u16]) -> Result<DiceReport> {
    a.dims.check_match(b.dims)?;
    let max = usize::from(*labels.iter().max().unwrap_or(&0));
    let mut count_a = vec![0u64; max + 1];
    let mut count_b = vec![0u64; max + 1];
    let mut inter = vec![0u64; max + 1];
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        if usize::from(la) <= max {
            count_a[usize::from(la)] += 1;
        }
        if usize::from(lb) <= max {
            count_b[usize::from(lb)] += 1;
        }
        if la == lb && usize::from(la) <= max {
            inter[usize::from(la)] += 1;
        }
    }
    let mut scored = Vec::new();
    let mut scores = Vec::new();
    let mut absent = Vec::new();
    for &l in labels {
        let (na, nb, ni) = (
            count_a[usize::from(l)],
            count_b[usize::from(l)],
            inter[usize::from(l)],
        );
        if na + nb == 0 {
            absent.push(l);
        } else {
            scored.push(l);
            scores.push(2.0 * ni as f64 / (na + nb) as f64);
        }
    }
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok(DiceReport {
        labels: scored,
        scores,
        absent,
        mean,
    })
}

/// Fold statistics of a deformation field's Jacobian determinant volume.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub total: usize,
    pub non_positive: usize,
    pub min_det: f64,
    pub fraction: f64,
}

/// Counts voxels whose Jacobian determinant is ≤ 0.
pub fn fold_report(d: &DeformationField) -> Result<FoldReport> {
    let dets = jacobian_det_field(d)?;
    let total = dets.data().len();
    let mut non_positive = 0usize;
    let mut min_det = f64::INFINITY;
    for &v in dets.data() {
        if v <= 0.0 {
            non_positive += 1;
        }
        min_det = min_det.min(v);
    }
    Ok(FoldReport {
        total,
        non_positive,
        min_det,
        fraction: non_positive as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::identity_field;
    use crate::volume::Dims;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identical_maps_score_one() {
        let dims = Dims::new(6, 6, 6);
        let a = LabelMap::from_fn(dims, |x, y, _| ((x + y) % 3) as u16);
        let labels = present_labels(&a, &a);
        let report = dice(&a, &a, &labels).unwrap();
        assert!(report.scores.iter().all(|&s| s == 1.0));
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn disjoint_supports_score_zero() {
        let dims = Dims::new(6, 6, 6);
        let a = LabelMap::from_fn(dims, |x, _, _| u16::from(x < 3));
        let b = LabelMap::from_fn(dims, |x, _, _| u16::from(x >= 3));
        let report = dice(&a, &b, &[1]).unwrap();
        assert_eq!(report.scores, vec![0.0]);
    }

    #[test]
    fn half_overlapping_cube_scores_half() {
        // 2x2x2 cube against a copy shifted by one voxel in x: 4 of 8 voxels overlap.
        let dims = Dims::new(6, 6, 6);
        let a = LabelMap::from_fn(dims, |x, y, z| {
            u16::from((1..3).contains(&x) && (1..3).contains(&y) && (1..3).contains(&z))
        });
        let b = LabelMap::from_fn(dims, |x, y, z| {
            u16::from((2..4).contains(&x) && (1..3).contains(&y) && (1..3).contains(&z))
        });
        let report = dice(&a, &b, &[1]).unwrap();
        assert_relative_eq!(report.scores[0], 0.5);
    }

    #[test]
    fn absent_labels_are_excluded_from_mean() {
        let dims = Dims::new(4, 4, 4);
        let a = LabelMap::from_fn(dims, |x, _, _| u16::from(x == 0));
        let report = dice(&a, &a, &[1, 2, 9]).unwrap();
        assert_eq!(report.labels, vec![1]);
        assert_eq!(report.absent, vec![2, 9]);
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn fold_report_identity_and_scaling() {
        let dims = Dims::new(5, 5, 5);
        let id = identity_field(dims);
        let r = fold_report(&id).unwrap();
        assert_eq!(r.non_positive, 0);
        assert_relative_eq!(r.min_det, 1.0, epsilon = 1e-12);
        // Uniform doubling: interior determinant 8, no folds.
        let scale = DeformationField::from_fn(dims, |x, y, z| {
            [x as f64, y as f64, z as f64]
        });
        let r2 = fold_report(&scale).unwrap();
        assert_eq!(r2.non_positive, 0);
        assert!(r2.min_det >= 8.0 - 1e-12);
    }

    #[test]
    fn fold_report_counts_constructed_fold() {
        // Same fold as the loss tests: one negative-determinant yz-plane.
        let dims = Dims::new(5, 3, 3);
        let folded = DeformationField::from_fn(dims, |x, _, _| {
            [
                match x {
                    1 => 2.0,
                    3 => -2.0,
                    _ => 0.0,
                },
                0.0,
                0.0,
            ]
        });
        let r = fold_report(&folded).unwrap();
        assert_eq!(r.total, 45);
        assert_eq!(r.non_positive, 9);
        assert_relative_eq!(r.min_det, -1.0, epsilon = 1e-12);
        // Cross-check against a naive scan of the determinant volume.
        let dets = jacobian_det_field(&folded).unwrap();
        let naive = dets.data().iter().filter(|&&v| v <= 0.0).count();
        assert_eq!(r.non_positive, naive);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(seed in 0u64..300) {
            use rand::{Rng, SeedableRng};
            let dims = Dims::new(5, 5, 5);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = LabelMap::from_fn(dims, |_, _, _| rng.gen_range(0..4) as u16);
            let b = LabelMap::from_fn(dims, |_, _, _| rng.gen_range(0..4) as u16);
            let labels = present_labels(&a, &b);
            let ab = dice(&a, &b, &labels).unwrap();
            let ba = dice(&b, &a, &labels).unwrap();
            prop_assert_eq!(ab.scores, ba.scores);
        }
    }
}
