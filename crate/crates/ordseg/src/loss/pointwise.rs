//! Per-pixel losses: categorical cross-entropy, the quasi-unimodal loss,
//! the expectation/variance squared-error loss, and the ordering loss, plus
//! the combined objective `CE + lambda * ordinal`.
//!
//! Hinge-pair orientation follows the verbal semantics of the definitions:
//! the mode dominates its immediate neighbors; each immediate neighbor of
//! the mode dominates every probability further from the mode (QUL); the
//! distribution is non-decreasing up to the mode and non-increasing after
//! it (O2). Hinge terms whose neighbor index would fall outside `1..=K`
//! are skipped.

use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossValue};
use crate::model::{ClassConfig, LabelMap, ProbMap, PROB_CLAMP_MIN};

fn check_shapes(probs: &ProbMap, labels: &LabelMap) -> Result<()> {
    if probs.height() != labels.height()
        || probs.width() != labels.width()
        || probs.k_classes() != labels.k_classes()
    {
        return Err(Error::Validation(format!(
            "probability map {}x{}x{} does not match label map {}x{} with K={}",
            probs.height(),
            probs.width(),
            probs.k_classes(),
            labels.height(),
            labels.width(),
            labels.k_classes()
        )));
    }
    Ok(())
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Mean over pixels of `-ln p_hat` at the true class, with probabilities
/// clamped to `[1e-12, 1]` before the logarithm.
pub fn ce_loss(probs: &ProbMap, labels: &LabelMap) -> Result<LossValue> {
    check_shapes(probs, labels)?;
    let (h, w) = (probs.height(), probs.width());
    let per_pixel = Array2::from_shape_fn((h, w), |(i, j)| {
        let p = probs.prob(i, j, labels.label(i, j));
        -p.clamp(PROB_CLAMP_MIN, 1.0).ln()
    });
    Ok(LossValue::from_per_pixel(per_pixel))
}

/// The QUL dominance sets for mode `k_star`, as `(dominated, dominator)`
/// pairs. Ascending side: the mode's left neighbor dominates every class
/// further left. Descending side: the right neighbor dominates every class
/// further right.
pub fn qul_sets(
    k_star: usize,
    config: ClassConfig,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let k = config.k_classes();
    if k_star < 1 || k_star > k {
        return Err(Error::Validation(format!(
            "mode {k_star} outside 1..={k}"
        )));
    }
    let ascending = if k_star >= 3 {
        (1..=k_star - 2).map(|c| (c, k_star - 1)).collect()
    } else {
        Vec::new()
    };
    let descending = if k_star + 2 <= k {
        (k_star + 2..=k).map(|c| (c, k_star + 1)).collect()
    } else {
        Vec::new()
    };
    Ok((ascending, descending))
}

/// Quasi-unimodal loss: per pixel, margin hinges forcing the mode above its
/// immediate neighbors, plus `lambda`-weighted hinges forcing each neighbor
/// above all classes beyond it.
pub fn qul_loss(probs: &ProbMap, labels: &LabelMap, config: &LossConfig) -> Result<LossValue> {
    check_shapes(probs, labels)?;
    config.validate()?;
    let k = probs.k_classes();
    let class_config = ClassConfig::new(k)?;
    let (delta, lambda) = (config.qul_delta, config.qul_lambda);
    let (h, w) = (probs.height(), probs.width());
    let mut per_pixel = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let k_star = labels.label(i, j);
            let p = |c: usize| probs.prob(i, j, c);
            let mut acc = 0.0;
            if k_star > 1 {
                acc += hinge(delta + p(k_star - 1) - p(k_star));
            }
            if k_star < k {
                acc += hinge(delta + p(k_star + 1) - p(k_star));
            }
            let (asc, desc) = qul_sets(k_star, class_config)?;
            for (dominated, dominator) in asc.iter().chain(desc.iter()) {
                acc += lambda * hinge(delta + p(*dominated) - p(*dominator));
            }
            per_pixel[(i, j)] = acc;
        }
    }
    Ok(LossValue::from_per_pixel(per_pixel))
}

/// Expected ordinal label `sum_k k * p_k`; lies in `[1, K]`.
pub fn ordinal_expectation(p: &[f64]) -> f64 {
    p.iter()
        .enumerate()
        .map(|(c, &prob)| (c + 1) as f64 * prob)
        .sum()
}

/// Ordinal variance `sum_k p_k (k - E)^2`; zero exactly for one-hot rows.
pub fn ordinal_variance(p: &[f64]) -> f64 {
    let e = ordinal_expectation(p);
    p.iter()
        .enumerate()
        .map(|(c, &prob)| {
            let d = (c + 1) as f64 - e;
            prob * d * d
        })
        .sum()
}

/// Expectation-MSE loss: per pixel `(E - y)^2 + lambda * Var`.
pub fn expmse_loss(probs: &ProbMap, labels: &LabelMap, config: &LossConfig) -> Result<LossValue> {
    check_shapes(probs, labels)?;
    config.validate()?;
    let k = probs.k_classes();
    let (h, w) = (probs.height(), probs.width());
    let mut row = vec![0.0; k];
    let mut per_pixel = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            for (c, r) in row.iter_mut().enumerate() {
                *r = probs.prob(i, j, c + 1);
            }
            let e = ordinal_expectation(&row);
            let var = ordinal_variance(&row);
            let err = e - labels.label(i, j) as f64;
            per_pixel[(i, j)] = err * err + config.expmse_lambda * var;
        }
    }
    Ok(LossValue::from_per_pixel(per_pixel))
}

/// Ordering loss: per pixel, margin hinges charging every decrease on the
/// way up to the mode and every increase after it.
pub fn o2_loss(probs: &ProbMap, labels: &LabelMap, config: &LossConfig) -> Result<LossValue> {
    check_shapes(probs, labels)?;
    config.validate()?;
    let k = probs.k_classes();
    let delta = config.o2_delta;
    let (h, w) = (probs.height(), probs.width());
    let mut per_pixel = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let k_star = labels.label(i, j);
            let p = |c: usize| probs.prob(i, j, c);
            let mut acc = 0.0;
            for c in 2..=k_star {
                acc += hinge(delta + p(c - 1) - p(c));
            }
            for c in k_star..k {
                acc += hinge(delta + p(c + 1) - p(c));
            }
            per_pixel[(i, j)] = acc;
        }
    }
    Ok(LossValue::from_per_pixel(per_pixel))
}

/// The combined objective `total = ce + lambda * ordinal`.
pub fn combined_loss(ce: &LossValue, ordinal: &LossValue, lambda_combine: f64) -> Result<LossValue> {
    if lambda_combine < 0.0 {
        return Err(Error::Config(format!(
            "lambda_combine must be nonnegative, got {lambda_combine}"
        )));
    }
    let per_pixel = match (&ce.per_pixel, &ordinal.per_pixel) {
        (Some(a), Some(b)) if a.dim() == b.dim() => Some(a + &(b * lambda_combine)),
        _ => None,
    };
    Ok(LossValue {
        total: ce.total + lambda_combine * ordinal.total,
        per_pixel,
    })
}

// ---------------------------------------------------------------------------
// Graph builders. Each takes the probability node (an `H x W x K` variable,
// typically a softmax output) and mirrors the plain evaluator exactly.
// ---------------------------------------------------------------------------

fn probs_dims(probs: &Var<'_>) -> (usize, usize, usize) {
    let shape = probs.value().shape().to_vec();
    (shape[0], shape[1], shape[2])
}

/// Per-class indicator masks `1(label = t)` as constant arrays.
fn label_masks(labels: &LabelMap) -> Vec<Arc<ndarray::ArrayD<f64>>> {
    let (h, w, k) = (labels.height(), labels.width(), labels.k_classes());
    (1..=k)
        .map(|t| {
            let m = Array2::from_shape_fn((h, w), |(i, j)| {
                if labels.label(i, j) == t {
                    1.0
                } else {
                    0.0
                }
            });
            Arc::new(m.into_dyn())
        })
        .collect()
}

/// Cross-entropy node: `-(1/HW) * sum(one_hot * ln clamp(p))`.
pub fn ce_node<'t>(probs: Var<'t>, labels: &LabelMap) -> Result<Var<'t>> {
    let (h, w, k) = probs_dims(&probs);
    if (h, w, k) != (labels.height(), labels.width(), labels.k_classes()) {
        return Err(Error::Validation(
            "probability node does not match label map".into(),
        ));
    }
    let mut one_hot = Array3::<f64>::zeros((h, w, k));
    for ((i, j), &y) in labels.values().indexed_iter() {
        one_hot[(i, j, y - 1)] = 1.0;
    }
    Ok(probs
        .ln_clamped(PROB_CLAMP_MIN, 1.0)
        .mul_const(Arc::new(one_hot.into_dyn()))
        .sum()
        .scale(-1.0 / (h * w) as f64))
}

/// QUL node; mirrors [`qul_loss`].
pub fn qul_node<'t>(probs: Var<'t>, labels: &LabelMap, config: &LossConfig) -> Result<Var<'t>> {
    config.validate()?;
    let (h, w, k) = probs_dims(&probs);
    let class_config = ClassConfig::new(k)?;
    let (delta, lambda) = (config.qul_delta, config.qul_lambda);
    let planes: Vec<Var<'t>> = (0..k).map(|c| probs.select_plane(c)).collect();
    let masks = label_masks(labels);
    let mut total: Option<Var<'t>> = None;
    let mut add_term = |term: Var<'t>| {
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    };
    for k_star in 1..=k {
        let mask = &masks[k_star - 1];
        if mask.iter().all(|&v| v == 0.0) {
            continue;
        }
        let hinge_term = |dominated: usize, dominator: usize, weight: f64| -> Var<'t> {
            planes[dominated - 1]
                .sub(planes[dominator - 1])
                .add_scalar(delta)
                .relu()
                .mul_const(Arc::clone(mask))
                .sum()
                .scale(weight)
        };
        if k_star > 1 {
            add_term(hinge_term(k_star - 1, k_star, 1.0));
        }
        if k_star < k {
            add_term(hinge_term(k_star + 1, k_star, 1.0));
        }
        let (asc, desc) = qul_sets(k_star, class_config)?;
        for (dominated, dominator) in asc.iter().chain(desc.iter()) {
            add_term(hinge_term(*dominated, *dominator, lambda));
        }
    }
    let total = total.unwrap_or_else(|| probs.tape().scalar(0.0));
    Ok(total.scale(1.0 / (h * w) as f64))
}

/// Expectation-MSE node; mirrors [`expmse_loss`].
pub fn expmse_node<'t>(probs: Var<'t>, labels: &LabelMap, config: &LossConfig) -> Result<Var<'t>> {
    config.validate()?;
    let (h, w, k) = probs_dims(&probs);
    let tape = probs.tape();
    let planes: Vec<Var<'t>> = (0..k).map(|c| probs.select_plane(c)).collect();

    let mut expectation = planes[0].scale(1.0);
    for (c, plane) in planes.iter().enumerate().skip(1) {
        expectation = expectation.add(plane.scale((c + 1) as f64));
    }
    let y = Array2::from_shape_fn((h, w), |(i, j)| labels.label(i, j) as f64);
    let err = expectation.sub(tape.constant(y.into_dyn())).square();

    let mut variance: Option<Var<'t>> = None;
    for (c, plane) in planes.iter().enumerate() {
        let dev = expectation.neg().add_scalar((c + 1) as f64).square();
        let term = plane.mul(dev);
        variance = Some(match variance {
            Some(v) => v.add(term),
            None => term,
        });
    }
    let variance = variance.expect("K >= 1");
    Ok(err.add(variance.scale(config.expmse_lambda)).mean())
}

/// O2 node; mirrors [`o2_loss`].
pub fn o2_node<'t>(probs: Var<'t>, labels: &LabelMap, config: &LossConfig) -> Result<Var<'t>> {
    config.validate()?;
    let (h, w, k) = probs_dims(&probs);
    let delta = config.o2_delta;
    let planes: Vec<Var<'t>> = (0..k).map(|c| probs.select_plane(c)).collect();
    let masks = label_masks(labels);
    let mut total: Option<Var<'t>> = None;
    for k_star in 1..=k {
        let mask = &masks[k_star - 1];
        if mask.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut add_hinge = |lo_plane: usize, hi_plane: usize| {
            // hinge(delta + p[lo_plane] - p[hi_plane]) on pixels of class k_star
            let term = planes[lo_plane - 1]
                .sub(planes[hi_plane - 1])
                .add_scalar(delta)
                .relu()
                .mul_const(Arc::clone(mask))
                .sum();
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        };
        for c in 2..=k_star {
            add_hinge(c - 1, c);
        }
        for c in k_star..k {
            add_hinge(c + 1, c);
        }
    }
    let total = total.unwrap_or_else(|| probs.tape().scalar(0.0));
    Ok(total.scale(1.0 / (h * w) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, arr3};

    fn config(k: usize) -> ClassConfig {
        ClassConfig::new(k).unwrap()
    }

    fn probs1(row: &[f64]) -> ProbMap {
        let k = row.len();
        ProbMap::new(Array3::from_shape_fn((1, 1, k), |(_, _, c)| row[c])).unwrap()
    }

    fn labels1(y: usize, k: usize) -> LabelMap {
        LabelMap::new(arr2(&[[y]]), config(k)).unwrap()
    }

    #[test]
    fn ce_hand_values() {
        let p = probs1(&[0.5, 0.5]);
        let l = labels1(1, 2);
        let v = ce_loss(&p, &l).unwrap();
        assert!((v.total - 2.0_f64.ln()).abs() < 1e-12);

        // One-hot-correct: zero up to the clamp.
        let p = probs1(&[0.0, 1.0]);
        let l = labels1(2, 2);
        assert!(ce_loss(&p, &l).unwrap().total <= 1e-11);

        // Uniform over K = 4: ln 4 whatever the labels.
        let p = probs1(&[0.25, 0.25, 0.25, 0.25]);
        for y in 1..=4 {
            let l = labels1(y, 4);
            assert!((ce_loss(&p, &l).unwrap().total - 4.0_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_rejects_shape_mismatch() {
        let p = probs1(&[0.5, 0.5]);
        let l = LabelMap::new(arr2(&[[1, 2]]), config(2)).unwrap();
        assert!(ce_loss(&p, &l).is_err());
    }

    #[test]
    fn qul_sets_hand_values() {
        let (asc, desc) = qul_sets(3, config(5)).unwrap();
        assert_eq!(asc, vec![(1, 2)]);
        assert_eq!(desc, vec![(5, 4)]);

        let (asc, desc) = qul_sets(2, config(3)).unwrap();
        assert!(asc.is_empty() && desc.is_empty());

        let (asc, desc) = qul_sets(1, config(4)).unwrap();
        assert!(asc.is_empty());
        assert_eq!(desc, vec![(3, 2), (4, 2)]);

        assert!(qul_sets(0, config(3)).is_err());
        assert!(qul_sets(4, config(3)).is_err());
    }

    #[test]
    fn qul_hand_values() {
        let cfg = LossConfig { qul_delta: 0.05, qul_lambda: 1.0, ..Default::default() };
        let v = qul_loss(&probs1(&[0.2, 0.6, 0.2]), &labels1(2, 3), &cfg).unwrap();
        assert_eq!(v.total, 0.0);

        let cfg = LossConfig { qul_delta: 1e-9, qul_lambda: 1.0, ..Default::default() };
        let v = qul_loss(&probs1(&[0.6, 0.2, 0.2]), &labels1(2, 3), &cfg).unwrap();
        assert!((v.total - 0.4).abs() < 1e-8);

        let cfg = LossConfig { qul_delta: 0.05, ..Default::default() };
        let v = qul_loss(&probs1(&[0.9, 0.1]), &labels1(1, 2), &cfg).unwrap();
        assert_eq!(v.total, 0.0);
    }

    #[test]
    fn expectation_and_variance_hand_values() {
        assert_eq!(ordinal_expectation(&[0.0, 0.0, 1.0]), 3.0);
        assert!((ordinal_expectation(&[1.0 / 3.0; 3]) - 2.0).abs() < 1e-15);
        assert!((ordinal_expectation(&[0.25, 0.75]) - 1.75).abs() < 1e-15);

        assert_eq!(ordinal_variance(&[0.0, 1.0, 0.0]), 0.0);
        assert!((ordinal_variance(&[1.0 / 3.0; 3]) - 2.0 / 3.0).abs() < 1e-15);
        assert!((ordinal_variance(&[0.5, 0.0, 0.5]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn expmse_hand_values() {
        let cfg = LossConfig { expmse_lambda: 1.0, ..Default::default() };
        let v = expmse_loss(&probs1(&[0.0, 1.0, 0.0]), &labels1(2, 3), &cfg).unwrap();
        assert_eq!(v.total, 0.0);

        let third = 1.0 / 3.0;
        let v = expmse_loss(&probs1(&[third, third, third]), &labels1(2, 3), &cfg).unwrap();
        assert!((v.total - 2.0 / 3.0).abs() < 1e-12);

        let v = expmse_loss(&probs1(&[0.0, 0.0, 1.0]), &labels1(1, 3), &cfg).unwrap();
        assert!((v.total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn o2_hand_values() {
        let cfg = LossConfig { o2_delta: 0.05, ..Default::default() };
        let v = o2_loss(&probs1(&[0.1, 0.6, 0.2, 0.1]), &labels1(2, 4), &cfg).unwrap();
        assert_eq!(v.total, 0.0);

        let cfg = LossConfig { o2_delta: 1e-12, ..Default::default() };
        let v = o2_loss(&probs1(&[0.5, 0.2, 0.3]), &labels1(2, 3), &cfg).unwrap();
        assert!((v.total - 0.4).abs() < 1e-9);

        let cfg = LossConfig { o2_delta: 0.05, ..Default::default() };
        let v = o2_loss(&probs1(&[0.9, 0.1]), &labels1(1, 2), &cfg).unwrap();
        assert_eq!(v.total, 0.0);
    }

    #[test]
    fn combined_hand_values() {
        let ce = LossValue::scalar(0.5);
        let ord = LossValue::scalar(0.2);
        assert_eq!(combined_loss(&ce, &ord, 0.0).unwrap().total, 0.5);
        assert!((combined_loss(&ce, &ord, 10.0).unwrap().total - 2.5).abs() < 1e-15);
        let zero = LossValue::scalar(0.0);
        assert_eq!(combined_loss(&ce, &zero, 1.0).unwrap().total, 0.5);
        assert!(combined_loss(&ce, &ord, -1.0).is_err());
    }

    #[test]
    fn per_pixel_mean_matches_total() {
        let p = ProbMap::new(arr3(&[
            [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]],
            [[0.3, 0.3, 0.4], [0.25, 0.5, 0.25]],
        ]))
        .unwrap();
        let l = LabelMap::new(arr2(&[[1, 2], [3, 2]]), config(3)).unwrap();
        for v in [
            ce_loss(&p, &l).unwrap(),
            qul_loss(&p, &l, &LossConfig::default()).unwrap(),
            expmse_loss(&p, &l, &LossConfig::default()).unwrap(),
            o2_loss(&p, &l, &LossConfig::default()).unwrap(),
        ] {
            let map = v.per_pixel.as_ref().unwrap();
            assert!((map.sum() / map.len() as f64 - v.total).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_builders_match_plain_evaluators() {
        use crate::autodiff::Tape;
        let p = ProbMap::new(arr3(&[
            [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]],
            [[0.3, 0.3, 0.4], [0.25, 0.5, 0.25]],
        ]))
        .unwrap();
        let l = LabelMap::new(arr2(&[[1, 2], [3, 2]]), config(3)).unwrap();
        let cfg = LossConfig {
            qul_delta: 0.1,
            qul_lambda: 2.0,
            expmse_lambda: 0.5,
            o2_delta: 0.07,
            ..Default::default()
        };

        let tape = Tape::new();
        let probs = tape.constant(p.values().clone().into_dyn());
        let pairs: Vec<(f64, f64)> = vec![
            (ce_node(probs, &l).unwrap().scalar_value(), ce_loss(&p, &l).unwrap().total),
            (qul_node(probs, &l, &cfg).unwrap().scalar_value(), qul_loss(&p, &l, &cfg).unwrap().total),
            (expmse_node(probs, &l, &cfg).unwrap().scalar_value(), expmse_loss(&p, &l, &cfg).unwrap().total),
            (o2_node(probs, &l, &cfg).unwrap().scalar_value(), o2_loss(&p, &l, &cfg).unwrap().total),
        ];
        for (graph, plain) in pairs {
            assert!((graph - plain).abs() < 1e-12, "graph {graph} vs plain {plain}");
        }
    }
}
