//! Importance measures and evaluation statistics: global importance, class-
//! wise relative importance, remove-and-retrain curve statistics (area
//! between curves, drop in accuracy, weighted drop), rank correlations,
//! ground-truth agreement scores, and the Calinski-Harabasz separability
//! score. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::data::GroundTruthMask;
use crate::error::{CafoError, Result};
use crate::tensor::Tensor;

// ----------------------------------------------------------------------
// global importance
// ----------------------------------------------------------------------

/// Per-feature mean attention and the induced descending ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GiReport {
    pub gi: Vec<f64>,
    /// Feature indices sorted by descending GI; ties break toward the lower index.
    pub rank_desc: Vec<usize>,
}

/// Column means of an [N, D] attention matrix.
pub fn global_importance(attentions: &Tensor) -> Result<GiReport> {
    let shape = attentions.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(CafoError::ShapeMismatch {
            op: "global_importance",
            detail: format!("expected non-empty [N, D], got {:?}", shape),
        });
    }
    let (n, d) = (shape[0], shape[1]);
    let mut gi = vec![0.0; d];
    for row in attentions.data().chunks(d) {
        for (acc, &v) in gi.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in gi.iter_mut() {
        *v /= n as f64;
    }
    let rank_desc = rank_descending(&gi);
    Ok(GiReport { gi, rank_desc })
}

/// Indices sorted by descending value; ties break toward the lower index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite importance values")
            .then(a.cmp(&b))
    });
    idx
}

// ----------------------------------------------------------------------
// class-wise relative importance
// ----------------------------------------------------------------------

/// CWRI scores and their sign-based binarization (score >= 0 is important).
#[derive(Clone, Debug, PartialEq)]
pub struct CwriMatrix {
    /// Shape [C, D]; each feature column sums to zero.
    pub scores: Tensor,
    pub binarized: Vec<Vec<bool>>,
}

/// Deviation of each class prototype from the mean of the other prototypes.
pub fn cwri(prototypes: &Tensor) -> Result<CwriMatrix> {
    let shape = prototypes.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(CafoError::ShapeMismatch {
            op: "cwri",
            detail: format!("need at least 2 class rows, got {:?}", shape),
        });
    }
    let (c, d) = (shape[0], shape[1]);
    let data = prototypes.data();
    let mut col_sums = vec![0.0; d];
    for row in data.chunks(d) {
        for (acc, &v) in col_sums.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut scores = vec![0.0; c * d];
    for ci in 0..c {
        for j in 0..d {
            let own = data[ci * d + j];
            let others = (col_sums[j] - own) / (c as f64 - 1.0);
            scores[ci * d + j] = own - others;
        }
    }
    let binarized = scores
        .chunks(d)
        .map(|row| row.iter().map(|&v| v >= 0.0).collect())
        .collect();
    Ok(CwriMatrix { scores: Tensor::from_parts(vec![c, d], scores), binarized })
}

// ----------------------------------------------------------------------
// remove-and-retrain curve statistics
// ----------------------------------------------------------------------

/// Accuracy after removing the top-d features under the truth ordering
/// (descending importance) and the inverse ordering, for d = 0..D-1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoarCurve {
    /// Number of features removed at each point; strictly increasing from 0.
    pub removed: Vec<usize>,
    pub truth_acc: Vec<f64>,
    pub inverse_acc: Vec<f64>,
}

impl RoarCurve {
    pub fn validate(&self) -> Result<()> {
        if self.removed.len() != self.truth_acc.len()
            || self.removed.len() != self.inverse_acc.len()
        {
            return Err(CafoError::ShapeMismatch {
                op: "RoarCurve",
                detail: "series lengths differ".into(),
            });
        }
        if self.removed.len() < 2 {
            return Err(CafoError::ShapeMismatch {
                op: "RoarCurve",
                detail: "need at least two removal counts".into(),
            });
        }
        if !self.removed.windows(2).all(|w| w[0] < w[1]) {
            return Err(CafoError::DataFormat("removal counts must increase".into()));
        }
        Ok(())
    }
}

/// Trapezoid-rule area between the inverse and truth curves with the x axis
/// normalized to the fraction of features removed, so values are comparable
/// across feature counts.
pub fn abc(curve: &RoarCurve) -> Result<f64> {
    curve.validate()?;
    let n = curve.removed.len();
    let dx = 1.0 / (n as f64 - 1.0);
    let mut area = 0.0;
    for i in 0..n - 1 {
        let a = curve.inverse_acc[i] - curve.truth_acc[i];
        let b = curve.inverse_acc[i + 1] - curve.truth_acc[i + 1];
        area += 0.5 * (a + b) * dx;
    }
    Ok(area)
}

/// Percentage decrease in accuracy relative to the no-removal baseline.
pub fn drop_in_accuracy(base_acc: f64, k_acc: f64) -> Result<f64> {
    if base_acc <= 0.0 {
        return Err(CafoError::InvalidConfig("base accuracy must be positive".into()));
    }
    Ok(100.0 * (base_acc - k_acc) / base_acc)
}

/// Removal count corresponding to dropping 20% of D features.
pub fn da_removal_count(d: usize) -> usize {
    (((d as f64) * 0.2).round() as usize).clamp(1, d.saturating_sub(1).max(1))
}

/// Drop in accuracy at K = 20%: the truth curve's baseline against its value
/// after removing 20% of the most important features.
pub fn da_at_20(curve: &RoarCurve) -> Result<f64> {
    curve.validate()?;
    let k = da_removal_count(curve.removed.len());
    let pos = curve
        .removed
        .iter()
        .position(|&r| r == k)
        .ok_or_else(|| CafoError::DataFormat(format!("curve has no removal count {}", k)))?;
    drop_in_accuracy(curve.truth_acc[0], curve.truth_acc[pos])
}

/// Linearly decaying removal weights: w_d = (D-d-1)/(D-1) for d = 0..D-1.
pub fn wda_weights(d: usize) -> Vec<f64> {
    (0..d).map(|i| (d - i - 1) as f64 / (d - 1) as f64).collect()
}

/// Weighted cumulative accuracy drop over sequential removals; earlier
/// removals (few features dropped) weigh the most.
pub fn weighted_drop(base_acc: f64, accs_by_removal: &[f64]) -> Result<f64> {
    let d = accs_by_removal.len();
    if d < 2 {
        return Err(CafoError::ShapeMismatch {
            op: "weighted_drop",
            detail: "need accuracies for at least 2 removal counts".into(),
        });
    }
    let weights = wda_weights(d);
    Ok(accs_by_removal
        .iter()
        .zip(&weights)
        .map(|(&acc, &w)| (base_acc - acc) * w)
        .sum())
}

// ----------------------------------------------------------------------
// rank correlations
// ----------------------------------------------------------------------

fn positions(rank: &[usize]) -> Result<Vec<f64>> {
    let n = rank.len();
    let mut pos = vec![usize::MAX; n];
    for (p, &f) in rank.iter().enumerate() {
        if f >= n || pos[f] != usize::MAX {
            return Err(CafoError::DataFormat(format!(
                "ranking is not a permutation of 0..{}",
                n
            )));
        }
        pos[f] = p;
    }
    Ok(pos.into_iter().map(|p| p as f64).collect())
}

/// Spearman rank correlation between two permutations via the
/// rank-difference formula.
pub fn spearman_rho(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CafoError::ShapeMismatch {
            op: "spearman_rho",
            detail: "rankings must be equal length >= 2".into(),
        });
    }
    let (pa, pb) = (positions(a)?, positions(b)?);
    let n = a.len() as f64;
    let d2: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Kendall tau-b between two permutations (ties handled, though permutations
/// have none).
pub fn kendall_tau_b(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CafoError::ShapeMismatch {
            op: "kendall_tau_b",
            detail: "rankings must be equal length >= 2".into(),
        });
    }
    let (pa, pb) = (positions(a)?, positions(b)?);
    let n = a.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_a, mut ties_b) = (0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pa[i] - pa[j];
            let dy = pb[i] - pb[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                ties_a += 1;
            } else if dy == 0.0 {
                ties_b += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pq = (concordant + discordant) as f64;
    let denom = ((pq + ties_a as f64) * (pq + ties_b as f64)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Mean pairwise (Spearman, Kendall) over all unordered ranking pairs.
pub fn rank_correlations(ranks: &[Vec<usize>]) -> Result<(f64, f64)> {
    if ranks.len() < 2 {
        return Err(CafoError::ShapeMismatch {
            op: "rank_correlations",
            detail: "need at least two rankings".into(),
        });
    }
    let mut rho_sum = 0.0;
    let mut tau_sum = 0.0;
    let mut pairs = 0.0;
    for i in 0..ranks.len() {
        for j in (i + 1)..ranks.len() {
            rho_sum += spearman_rho(&ranks[i], &ranks[j])?;
            tau_sum += kendall_tau_b(&ranks[i], &ranks[j])?;
            pairs += 1.0;
        }
    }
    Ok((rho_sum / pairs, tau_sum / pairs))
}

// ----------------------------------------------------------------------
// ground-truth agreement
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GtVariant {
    A,
    B,
}

/// Binary agreement scores of a prediction against the better-matching
/// ground-truth variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtAgreement {
    pub f1: f64,
    pub jaccard: f64,
    pub iacc: f64,
    pub variant: GtVariant,
}

/// F1, Jaccard and accuracy of flattened binary masks.
pub fn binary_scores(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(CafoError::ShapeMismatch {
            op: "binary_scores",
            detail: "prediction and ground truth shapes differ".into(),
        });
    }
    let (mut tp, mut fp, mut fne, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (prow, trow) in pred.iter().zip(truth) {
        for (&p, &t) in prow.iter().zip(trow) {
            match (p, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fne += 1.0,
                (false, false) => tn += 1.0,
            }
        }
    }
    let f1 = if 2.0 * tp + fp + fne == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fne) };
    let jaccard = if tp + fp + fne == 0.0 { 1.0 } else { tp / (tp + fp + fne) };
    let iacc = (tp + tn) / (tp + fp + fne + tn);
    Ok((f1, jaccard, iacc))
}

/// Score a binarized CWRI matrix against both ground-truth variants and
/// report the variant with the higher F1 (ties go to variant A).
pub fn gt_agreement(pred: &[Vec<bool>], gt: &GroundTruthMask) -> Result<GtAgreement> {
    let (f1_a, j_a, acc_a) = binary_scores(pred, &gt.variant_a)?;
    let (f1_b, j_b, acc_b) = binary_scores(pred, &gt.variant_b)?;
    if f1_a >= f1_b {
        Ok(GtAgreement { f1: f1_a, jaccard: j_a, iacc: acc_a, variant: GtVariant::A })
    } else {
        Ok(GtAgreement { f1: f1_b, jaccard: j_b, iacc: acc_b, variant: GtVariant::B })
    }
}

// ----------------------------------------------------------------------
// cluster separability
// ----------------------------------------------------------------------

/// Calinski-Harabasz score: between-class dispersion over within-class
/// dispersion, each normalized by its degrees of freedom. Zero within-class
/// dispersion with separated clusters yields +infinity.
pub fn calinski_harabasz(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = points.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CafoError::ShapeMismatch {
            op: "calinski_harabasz",
            detail: format!("points {:?} with {} labels", shape, labels.len()),
        });
    }
    let (n, d) = (shape[0], shape[1]);
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let c = classes.len();
    if c < 2 || n <= c {
        return Err(CafoError::InvalidConfig(
            "Calinski-Harabasz needs at least 2 classes and N > C".into(),
        ));
    }
    let data = points.data();
    let mut global_mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, &v) in global_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in global_mean.iter_mut() {
        *m /= n as f64;
    }
    let mut between = 0.0;
    let mut within = 0.0;
    for &cls in &classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == cls).collect();
        let nc = members.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &members {
            for (m, &v) in mean.iter_mut().zip(&data[i * d..(i + 1) * d]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= nc;
        }
        between += nc
            * mean
                .iter()
                .zip(&global_mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        for &i in &members {
            within += data[i * d..(i + 1) * d]
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    if between == 0.0 {
        return Ok(0.0);
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (c as f64 - 1.0)) / (within / (n - c) as f64))
}

/// Fraction of matching entries between predictions and labels.
pub fn classification_accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    debug_assert_eq!(pred.len(), labels.len());
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn gi_means_and_rank() {
        let report = global_importance(&t2(2, 2, vec![0.2, 0.8, 0.4, 0.6])).unwrap();
        assert!((report.gi[0] - 0.3).abs() < 1e-12);
        assert!((report.gi[1] - 0.7).abs() < 1e-12);
        assert_eq!(report.rank_desc, vec![1, 0]);

        let single = global_importance(&t2(1, 3, vec![0.1, 0.5, 0.3])).unwrap();
        assert_eq!(single.gi, vec![0.1, 0.5, 0.3]);

        let tied = global_importance(&t2(2, 3, vec![0.5; 6])).unwrap();
        assert_eq!(tied.rank_desc, vec![0, 1, 2]);
    }

    #[test]
    fn cwri_antisymmetric_for_two_classes() {
        let m = cwri(&t2(2, 2, vec![0.9, 0.2, 0.1, 0.6])).unwrap();
        for j in 0..2 {
            assert!((m.scores.at2(0, j) + m.scores.at2(1, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn cwri_three_class_column() {
        let m = cwri(&t2(3, 1, vec![0.9, 0.1, 0.2])).unwrap();
        assert!((m.scores.at2(0, 0) - 0.75).abs() < 1e-12);
        assert!((m.scores.at2(1, 0) + 0.45).abs() < 1e-12);
        assert!((m.scores.at2(2, 0) + 0.30).abs() < 1e-12);
        let sum: f64 = (0..3).map(|c| m.scores.at2(c, 0)).sum();
        assert!(sum.abs() < 1e-9);
        assert_eq!(m.binarized[0][0], true);
        assert_eq!(m.binarized[1][0], false);
    }

    #[test]
    fn abc_examples() {
        let flat = RoarCurve {
            removed: vec![0, 1],
            truth_acc: vec![0.7, 0.7],
            inverse_acc: vec![0.7, 0.7],
        };
        assert_eq!(abc(&flat).unwrap(), 0.0);

        let two = RoarCurve {
            removed: vec![0, 1],
            truth_acc: vec![0.0, 0.0],
            inverse_acc: vec![1.0, 1.0],
        };
        assert!((abc(&two).unwrap() - 1.0).abs() < 1e-12);

        let three = RoarCurve {
            removed: vec![0, 1, 2],
            truth_acc: vec![1.0, 0.0, 0.0],
            inverse_acc: vec![1.0, 0.5, 0.0],
        };
        assert!((abc(&three).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn da_examples() {
        assert!((drop_in_accuracy(0.90, 0.72).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(drop_in_accuracy(0.5, 0.5).unwrap(), 0.0);
        assert!(drop_in_accuracy(0.5, 0.6).unwrap() < 0.0);
        assert!(drop_in_accuracy(0.0, 0.5).is_err());
    }

    #[test]
    fn wda_weights_for_fourteen_features() {
        let w = wda_weights(14);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 12.0 / 13.0).abs() < 1e-12);
        assert!((w[2] - 11.0 / 13.0).abs() < 1e-12);
        assert_eq!(w.len(), 14);
        assert_eq!(*w.last().unwrap(), 0.0);
    }

    #[test]
    fn wda_examples() {
        let base = 0.9;
        assert_eq!(weighted_drop(base, &[base; 5]).unwrap(), 0.0);
        // D=2: weights [1, 0]; the drop happens where the weight is zero
        assert_eq!(weighted_drop(base, &[base, base - 0.1]).unwrap(), 0.0);
    }

    #[test]
    fn rank_correlation_examples() {
        let (rho, tau) = rank_correlations(&[vec![0, 1, 2, 3], vec![0, 1, 2, 3]]).unwrap();
        assert_eq!((rho, tau), (1.0, 1.0));

        let (rho, tau) = rank_correlations(&[vec![0, 1, 2, 3], vec![3, 2, 1, 0]]).unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
        assert!((tau + 1.0).abs() < 1e-12);

        let (rho, tau) = rank_correlations(&[vec![0, 1, 2, 3], vec![0, 2, 1, 3]]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        assert!((tau - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gt_agreement_selects_better_variant() {
        let gt = GroundTruthMask {
            variant_a: vec![vec![true, false], vec![false, true]],
            variant_b: vec![vec![false, true], vec![true, false]],
        };
        let match_a = vec![vec![true, false], vec![false, true]];
        let out = gt_agreement(&match_a, &gt).unwrap();
        assert_eq!(out, GtAgreement { f1: 1.0, jaccard: 1.0, iacc: 1.0, variant: GtVariant::A });

        let match_b = vec![vec![false, true], vec![true, false]];
        let out = gt_agreement(&match_b, &gt).unwrap();
        assert_eq!(out.variant, GtVariant::B);
        assert_eq!(out.f1, 1.0);
    }

    #[test]
    fn confusion_matrix_arithmetic() {
        // TP=2, FP=1, FN=1, TN=2
        let pred = vec![vec![true, true, true, false, false, false]];
        let truth = vec![vec![true, true, false, true, false, false]];
        let (f1, j, acc) = binary_scores(&pred, &truth).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((j - 0.5).abs() < 1e-12);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        assert!(f1 >= j);
    }

    #[test]
    fn calinski_harabasz_hand_example() {
        let points = t2(4, 1, vec![0.0, 0.2, 10.0, 10.2]);
        let ch = calinski_harabasz(&points, &[0, 0, 1, 1]).unwrap();
        assert!((ch - 5000.0).abs() < 1e-9, "ch = {ch}");

        // identical clusters share the global mean
        let same = t2(4, 1, vec![1.0, 2.0, 1.0, 2.0]);
        assert_eq!(calinski_harabasz(&same, &[0, 0, 1, 1]).unwrap(), 0.0);

        // scaling leaves the ratio unchanged
        let scaled = t2(4, 1, vec![0.0, 0.6, 30.0, 30.6]);
        let ch2 = calinski_harabasz(&scaled, &[0, 0, 1, 1]).unwrap();
        assert!((ch2 - ch).abs() < 1e-9);

        // zero within-dispersion
        let degenerate = t2(4, 1, vec![0.0, 0.0, 1.0, 1.0]);
        assert!(calinski_harabasz(&degenerate, &[0, 0, 1, 1]).unwrap().is_infinite());
    }
}
