//! Brute-force reference evaluations, transcribed term by term from the
//! definitions. Naive loops throughout; no shared code with the
//! implementations under test.

use ndarray::Array2;
use ordseg::model::{LabelMap, ProbMap};

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn cost(r: usize, s: usize) -> f64 {
    let d = (r as f64 - s as f64).abs() - 1.0;
    if d > 0.0 {
        d
    } else {
        0.0
    }
}

/// Mean of `-ln p` at the true class, probabilities clamped to `[1e-12, 1]`.
pub fn ce(probs: &ProbMap, labels: &LabelMap) -> f64 {
    let (h, w) = (probs.height(), probs.width());
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = probs.prob(i, j, labels.label(i, j));
            total += -p.clamp(1e-12, 1.0).ln();
        }
    }
    total / (h * w) as f64
}

/// Quasi-unimodal loss with explicitly enumerated dominance sets.
pub fn qul(probs: &ProbMap, labels: &LabelMap, delta: f64, lambda: f64) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k_star = labels.label(i, j);
            let p = |c: usize| probs.prob(i, j, c);
            if k_star >= 2 {
                total += relu(delta + p(k_star - 1) - p(k_star));
            }
            if k_star + 1 <= k {
                total += relu(delta + p(k_star + 1) - p(k_star));
            }
            // Left neighbor dominates everything further left.
            if k_star >= 3 {
                for c in 1..=(k_star - 2) {
                    total += lambda * relu(delta + p(c) - p(k_star - 1));
                }
            }
            // Right neighbor dominates everything further right.
            if k_star + 2 <= k {
                for c in (k_star + 2)..=k {
                    total += lambda * relu(delta + p(c) - p(k_star + 1));
                }
            }
        }
    }
    total / (h * w) as f64
}

/// Expectation-MSE loss: `(E - y)^2 + lambda * Var` per pixel.
pub fn expmse(probs: &ProbMap, labels: &LabelMap, lambda: f64) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut e = 0.0;
            for c in 1..=k {
                e += c as f64 * probs.prob(i, j, c);
            }
            let mut var = 0.0;
            for c in 1..=k {
                var += probs.prob(i, j, c) * (c as f64 - e) * (c as f64 - e);
            }
            let d = e - labels.label(i, j) as f64;
            total += d * d + lambda * var;
        }
    }
    total / (h * w) as f64
}

/// Ordering loss: monotone non-decrease to the mode, non-increase after.
pub fn o2(probs: &ProbMap, labels: &LabelMap, delta: f64) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k_star = labels.label(i, j);
            let p = |c: usize| probs.prob(i, j, c);
            for c in 2..=k_star {
                total += relu(delta + p(c - 1) - p(c));
            }
            for c in k_star..=(k - 1) {
                total += relu(delta + p(c + 1) - p(c));
            }
        }
    }
    total / (h * w) as f64
}

/// Neighbor-pair bilinear form, averaged over unordered 4-neighbor pairs.
pub fn csnp(probs: &ProbMap) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let n_pairs = h * (w - 1) + (h - 1) * w;
    if n_pairs == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let pair = |a: (usize, usize), b: (usize, usize)| {
        let mut acc = 0.0;
        for r in 1..=k {
            for s in 1..=k {
                acc += probs.prob(a.0, a.1, r) * cost(r, s) * probs.prob(b.0, b.1, s);
            }
        }
        acc
    };
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                total += pair((i, j), (i, j + 1));
            }
            if i + 1 < h {
                total += pair((i, j), (i + 1, j));
            }
        }
    }
    total / n_pairs as f64
}

/// Exact Euclidean distances by scanning every pixel pair. `None` when the
/// mask is empty.
pub fn edt_brute(mask: &Array2<bool>) -> Option<Array2<f64>> {
    let (h, w) = mask.dim();
    if !mask.iter().any(|&b| b) {
        return None;
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut best = f64::INFINITY;
            for ti in 0..h {
                for tj in 0..w {
                    if mask[(ti, tj)] {
                        let di = ti as f64 - i as f64;
                        let dj = tj as f64 - j as f64;
                        best = best.min((di * di + dj * dj).sqrt());
                    }
                }
            }
            out[(i, j)] = best;
        }
    }
    Some(out)
}

fn threshold(probs: &ProbMap, class: usize, delta_conf: f64) -> Array2<bool> {
    let (h, w) = (probs.height(), probs.width());
    Array2::from_shape_fn((h, w), |(i, j)| probs.prob(i, j, class) >= delta_conf)
}

/// Saturated class distance transform with the constant-`gamma` convention
/// for empty reference sets.
fn saturated_dt(probs: &ProbMap, class: usize, delta_conf: f64, gamma: f64) -> Array2<f64> {
    let mask = threshold(probs, class, delta_conf);
    match edt_brute(&mask) {
        Some(dt) => dt.mapv(|v| v.min(gamma)),
        None => Array2::from_elem((probs.height(), probs.width()), gamma),
    }
}

/// Contact-surface distance-transform loss, term by term.
pub fn csdt(probs: &ProbMap, delta_conf: f64, gamma: f64) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let mut total = 0.0;
    for k1 in 1..=k {
        for k2 in (k1 + 1)..=k {
            if k2 - k1 <= 1 {
                continue;
            }
            let dt1 = saturated_dt(probs, k1, delta_conf, gamma);
            let dt2 = saturated_dt(probs, k2, delta_conf, gamma);
            for i in 0..h {
                for j in 0..w {
                    total += cost(k1, k2)
                        * (probs.prob(i, j, k1) * dt2[(i, j)]
                            + probs.prob(i, j, k2) * dt1[(i, j)]);
                }
            }
        }
    }
    -total / (h * w) as f64
}

/// Conventional signed distance field of a region: positive inside
/// (distance to the nearest outside pixel), negative outside. `None` entries
/// never occur; degenerate regions return the clamped constant.
fn signed_field(mask: &Array2<bool>, gamma_hat: f64) -> Array2<f64> {
    let (h, w) = mask.dim();
    let inside = edt_brute(&mask.mapv(|b| !b)); // distance to outside
    let outside = edt_brute(mask); // distance to region
    match (inside, outside) {
        (Some(din), Some(dout)) => Array2::from_shape_fn((h, w), |(i, j)| {
            if mask[(i, j)] {
                din[(i, j)].min(gamma_hat)
            } else {
                -dout[(i, j)].min(gamma_hat)
            }
        }),
        // All-true region: no outside pixels.
        (None, Some(_)) => Array2::from_elem((h, w), gamma_hat),
        // All-false region.
        (Some(_), None) => Array2::from_elem((h, w), -gamma_hat),
        (None, None) => unreachable!("mask cannot be both full and empty"),
    }
}

/// Unclamped SDF magnitude for the alpha weight; the clamp constant for
/// degenerate regions.
fn sdf_magnitude(mask: &Array2<bool>, gamma_hat: f64) -> Array2<f64> {
    let (h, w) = mask.dim();
    let inside = edt_brute(&mask.mapv(|b| !b));
    let outside = edt_brute(mask);
    match (inside, outside) {
        (Some(din), Some(dout)) => Array2::from_shape_fn((h, w), |(i, j)| {
            if mask[(i, j)] {
                din[(i, j)]
            } else {
                dout[(i, j)]
            }
        }),
        _ => Array2::from_elem((h, w), gamma_hat),
    }
}

/// Contact-surface signed-distance-field loss, term by term.
pub fn cssdf(
    probs: &ProbMap,
    gt: &LabelMap,
    delta_conf: f64,
    gamma_decay: f64,
    gamma_hat: f64,
    p_exponent: u32,
) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let mut total = 0.0;
    for k1 in 1..=k {
        for k2 in (k1 + 2)..=k {
            let data = |class: usize| {
                let pred_mask = threshold(probs, class, delta_conf);
                let gt_mask =
                    Array2::from_shape_fn((h, w), |(i, j)| gt.label(i, j) == class);
                let phi_pred = signed_field(&pred_mask, gamma_hat);
                let phi_gt = signed_field(&gt_mask, gamma_hat);
                let alpha = sdf_magnitude(&pred_mask, gamma_hat)
                    .mapv(|m| (-gamma_decay * m).exp());
                let diff = Array2::from_shape_fn((h, w), |(i, j)| {
                    (phi_gt[(i, j)] - phi_pred[(i, j)])
                        .abs()
                        .powi(p_exponent as i32)
                });
                (alpha, diff)
            };
            let (alpha1, diff1) = data(k1);
            let (alpha2, diff2) = data(k2);
            for i in 0..h {
                for j in 0..w {
                    total += cost(k1, k2)
                        * (alpha1[(i, j)] * diff2[(i, j)] + alpha2[(i, j)] * diff1[(i, j)]);
                }
            }
        }
    }
    total / (h * w) as f64
}

/// Unimodality by exhaustive split-point enumeration.
pub fn is_unimodal_enumerate(p: &[f64]) -> bool {
    let n = p.len();
    (0..n).any(|m| {
        (0..m).all(|i| p[i] <= p[i + 1]) && (m..n - 1).all(|i| p[i] >= p[i + 1])
    })
}

/// Fraction of pixels with unimodal rows, via the enumerating check.
pub fn up(probs: &ProbMap) -> f64 {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let mut count = 0;
    for i in 0..h {
        for j in 0..w {
            let row: Vec<f64> = (1..=k).map(|c| probs.prob(i, j, c)).collect();
            if is_unimodal_enumerate(&row) {
                count += 1;
            }
        }
    }
    count as f64 / (h * w) as f64
}

/// Contact-surface metric by direct counting.
pub fn cs(labels: &LabelMap, epsilon: f64) -> f64 {
    let (h, w) = (labels.height(), labels.width());
    let (mut h1, mut h2, mut v1, mut v2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w - 1 {
            let d = (labels.label(i, j) as i64 - labels.label(i, j + 1) as i64).abs();
            if d >= 1 {
                h1 += 1.0;
            }
            if d >= 2 {
                h2 += 1.0;
            }
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let d = (labels.label(i, j) as i64 - labels.label(i + 1, j) as i64).abs();
            if d >= 1 {
                v1 += 1.0;
            }
            if d >= 2 {
                v2 += 1.0;
            }
        }
    }
    0.5 * (h2 / (h1 + epsilon) + v2 / (v1 + epsilon))
}

/// Macro and per-class Dice by direct counting; classes absent from both
/// maps are excluded from the macro mean.
pub fn dice(pred: &LabelMap, gt: &LabelMap, k: usize) -> (f64, Vec<f64>) {
    let (h, w) = (pred.height(), pred.width());
    let mut per_class = Vec::with_capacity(k);
    let mut macro_sum = 0.0;
    let mut macro_n = 0;
    for class in 1..=k {
        let mut inter = 0.0;
        let mut p_count = 0.0;
        let mut g_count = 0.0;
        for i in 0..h {
            for j in 0..w {
                let p = pred.label(i, j) == class;
                let g = gt.label(i, j) == class;
                if p {
                    p_count += 1.0;
                }
                if g {
                    g_count += 1.0;
                }
                if p && g {
                    inter += 1.0;
                }
            }
        }
        if p_count + g_count == 0.0 {
            per_class.push(1.0);
        } else {
            let d = 2.0 * inter / (p_count + g_count);
            per_class.push(d);
            macro_sum += d;
            macro_n += 1;
        }
    }
    (macro_sum / macro_n as f64, per_class)
}
