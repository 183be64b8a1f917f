//! Evaluation metrics: argmax decoding, the unimodal-pixels fraction, the
//! contact-surface ratio of ordinally invalid transitions, and the Dice
//! coefficient.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ClassConfig, LabelMap, ProbMap};

/// Default denominator offset of the contact-surface metric.
pub const CS_EPSILON: f64 = 1e-8;

/// The three reported quantities, as percentages, plus per-class Dice.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dice_percent: f64,
    pub cs_percent: f64,
    /// Absent when only a decoded label map (no probabilities) is available.
    pub up_percent: Option<f64>,
    pub per_class_dice_percent: Vec<f64>,
}

impl MetricReport {
    pub fn new(dice: f64, cs: f64, up: Option<f64>, per_class_dice: &[f64]) -> Self {
        Self {
            dice_percent: dice * 100.0,
            cs_percent: cs * 100.0,
            up_percent: up.map(|u| u * 100.0),
            per_class_dice_percent: per_class_dice.iter().map(|d| d * 100.0).collect(),
        }
    }
}

/// Per-pixel argmax over classes; exact ties break to the lowest class index.
pub fn decode_argmax(probs: &ProbMap) -> LabelMap {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 1;
        let mut best_p = probs.prob(i, j, 1);
        for c in 2..=k {
            let p = probs.prob(i, j, c);
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        best
    });
    LabelMap::new(values, ClassConfig::new(k).expect("ProbMap has K >= 1 classes"))
        .expect("argmax indices lie in 1..=K")
}

/// Whether `p` is non-decreasing up to some peak and non-increasing after
/// (plateaus allowed). Scans the maximal non-decreasing prefix, then requires
/// the rest to be non-increasing.
pub fn is_unimodal(p: &[f64]) -> bool {
    let n = p.len();
    let mut m = 0;
    while m + 1 < n && p[m + 1] >= p[m] {
        m += 1;
    }
    while m + 1 < n {
        if p[m + 1] > p[m] {
            return false;
        }
        m += 1;
    }
    true
}

/// Fraction of pixels whose predicted distribution is unimodal.
pub fn up_metric(probs: &ProbMap) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let mut count = 0usize;
    let mut row = vec![0.0; k];
    for i in 0..h {
        for j in 0..w {
            for (c, r) in row.iter_mut().enumerate() {
                *r = probs.prob(i, j, c + 1);
            }
            if is_unimodal(&row) {
                count += 1;
            }
        }
    }
    count as f64 / (h * w) as f64
}

/// Contact-surface metric: the fraction of 4-neighbor class transitions
/// whose ordinal jump is 2 or more, averaged over the horizontal and
/// vertical directions. 0 when no transitions exist.
pub fn cs_metric(labels: &LabelMap, epsilon: f64) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (h, w) = (labels.height(), labels.width());
    let mut h_ge1 = 0usize;
    let mut h_ge2 = 0usize;
    let mut v_ge1 = 0usize;
    let mut v_ge2 = 0usize;
    for i in 0..h {
        for j in 0..w {
            let y = labels.label(i, j) as i64;
            if j + 1 < w {
                let d = (y - labels.label(i, j + 1) as i64).abs();
                h_ge1 += usize::from(d >= 1);
                h_ge2 += usize::from(d >= 2);
            }
            if i + 1 < h {
                let d = (y - labels.label(i + 1, j) as i64).abs();
                v_ge1 += usize::from(d >= 1);
                v_ge2 += usize::from(d >= 2);
            }
        }
    }
    let horizontal = h_ge2 as f64 / (h_ge1 as f64 + epsilon);
    let vertical = v_ge2 as f64 / (v_ge1 as f64 + epsilon);
    Ok(0.5 * (horizontal + vertical))
}

/// Dice coefficients: per class `2 |P ∩ G| / (|P| + |G|)`. The macro value
/// averages over classes present in the prediction or the ground truth;
/// classes absent from both report 1 but are excluded from the macro mean.
pub fn dice(pred: &LabelMap, gt: &LabelMap, config: ClassConfig) -> Result<(f64, Vec<f64>)> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Validation(format!(
            "shape mismatch: prediction {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let k = config.k_classes();
    if pred.k_classes() != k || gt.k_classes() != k {
        return Err(Error::Validation(
            "label maps do not match the class configuration".into(),
        ));
    }
    let mut inter = vec![0usize; k];
    let mut pred_count = vec![0usize; k];
    let mut gt_count = vec![0usize; k];
    for ((i, j), &p) in pred.values().indexed_iter() {
        let g = gt.label(i, j);
        pred_count[p - 1] += 1;
        gt_count[g - 1] += 1;
        if p == g {
            inter[p - 1] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for c in 0..k {
        let denom = pred_count[c] + gt_count[c];
        if denom == 0 {
            per_class.push(1.0);
        } else {
            let d = 2.0 * inter[c] as f64 / denom as f64;
            per_class.push(d);
            macro_sum += d;
            macro_n += 1;
        }
    }
    // Every pixel carries a class, so at least one class is present.
    Ok((macro_sum / macro_n as f64, per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::one_hot;
    use ndarray::{arr2, arr3};

    fn config(k: usize) -> ClassConfig {
        ClassConfig::new(k).unwrap()
    }

    fn labels(rows: &[&[usize]], k: usize) -> LabelMap {
        let h = rows.len();
        let w = rows[0].len();
        LabelMap::new(Array2::from_shape_fn((h, w), |(i, j)| rows[i][j]), config(k)).unwrap()
    }

    #[test]
    fn argmax_recovers_one_hot() {
        let lab = labels(&[&[1, 3], &[2, 2]], 3);
        let probs = one_hot(&lab, config(3)).unwrap();
        assert_eq!(decode_argmax(&probs), lab);
    }

    #[test]
    fn argmax_ties_break_low() {
        let probs = ProbMap::new(arr3(&[[[0.5, 0.5]]])).unwrap();
        assert_eq!(decode_argmax(&probs).label(0, 0), 1);
        let probs = ProbMap::new(arr3(&[[[0.2, 0.5, 0.3]]])).unwrap();
        assert_eq!(decode_argmax(&probs).label(0, 0), 2);
    }

    #[test]
    fn unimodality_hand_cases() {
        assert!(is_unimodal(&[0.1, 0.2, 0.4, 0.2, 0.1]));
        assert!(!is_unimodal(&[0.3, 0.1, 0.4, 0.2]));
        assert!(is_unimodal(&[0.0, 0.0, 1.0]));
        assert!(is_unimodal(&[0.25, 0.25, 0.25, 0.25]));
        assert!(is_unimodal(&[1.0]));
        // Dip after a plateau.
        assert!(!is_unimodal(&[0.3, 0.3, 0.1, 0.3]));
    }

    #[test]
    fn up_counts_pixels() {
        let probs = ProbMap::new(arr3(&[[[0.1, 0.8, 0.1], [0.45, 0.1, 0.45]]])).unwrap();
        assert_eq!(up_metric(&probs), 0.5);
        let lab = labels(&[&[1, 2], &[3, 1]], 3);
        let probs = one_hot(&lab, config(3)).unwrap();
        assert_eq!(up_metric(&probs), 1.0);
    }

    #[test]
    fn cs_hand_cases() {
        let constant = labels(&[&[2, 2], &[2, 2]], 3);
        assert_eq!(cs_metric(&constant, CS_EPSILON).unwrap(), 0.0);

        // One invalid transition per direction, one transition per direction.
        let m = labels(&[&[1, 3], &[1, 1]], 3);
        let cs = cs_metric(&m, CS_EPSILON).unwrap();
        assert!((cs - 1.0 / (1.0 + CS_EPSILON)).abs() < 1e-15);

        let valid = labels(&[&[1, 2], &[2, 1]], 3);
        assert_eq!(cs_metric(&valid, CS_EPSILON).unwrap(), 0.0);
    }

    #[test]
    fn dice_hand_cases() {
        let gt = labels(&[&[1, 1, 2, 2]], 3);
        let pred = labels(&[&[1, 2, 2, 2]], 3);
        let (macro_dice, per_class) = dice(&pred, &gt, config(3)).unwrap();
        assert!((per_class[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((per_class[1] - 4.0 / 5.0).abs() < 1e-15);
        // Class 3 absent from both: reported as 1, excluded from the mean.
        assert_eq!(per_class[2], 1.0);
        assert!((macro_dice - 11.0 / 15.0).abs() < 1e-15);

        let (same, _) = dice(&gt, &gt, config(3)).unwrap();
        assert_eq!(same, 1.0);

        // Disjoint equal-size masks score 0 for both classes.
        let a = labels(&[&[1, 1, 2, 2]], 2);
        let b = labels(&[&[2, 2, 1, 1]], 2);
        let (m, per) = dice(&a, &b, config(2)).unwrap();
        assert_eq!(per, vec![0.0, 0.0]);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = labels(&[&[1, 2]], 2);
        let b = labels(&[&[1], &[2]], 2);
        assert!(dice(&a, &b, config(2)).is_err());
    }

    #[test]
    fn dice_is_symmetric() {
        let a = labels(&[&[1, 2, 3], &[2, 2, 1]], 3);
        let b = labels(&[&[1, 1, 3], &[3, 2, 1]], 3);
        let (dab, _) = dice(&a, &b, config(3)).unwrap();
        let (dba, _) = dice(&b, &a, config(3)).unwrap();
        assert_eq!(dab, dba);
    }

    #[test]
    fn report_scales_to_percent() {
        let r = MetricReport::new(0.5, 0.25, Some(1.0), &[0.5, 0.75]);
        assert_eq!(r.dice_percent, 50.0);
        assert_eq!(r.cs_percent, 25.0);
        assert_eq!(r.up_percent, Some(100.0));
        assert_eq!(r.per_class_dice_percent, vec![50.0, 75.0]);
    }

    #[test]
    fn labels_via_arr2_helper() {
        let m = LabelMap::new(arr2(&[[1, 2]]), config(2)).unwrap();
        assert_eq!(m.label(0, 1), 2);
    }
}
