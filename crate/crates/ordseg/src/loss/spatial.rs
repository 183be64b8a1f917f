//! Spatial losses over the pixel grid.
//!
//! - CSNP: the mean over 4-neighbor pixel pairs of the bilinear form
//!   `p(a)^T C p(b)`, charging probability mass on ordinally non-adjacent
//!   class pairs at neighboring pixels.
//! - CSDT: a bounded reward, `-(1/HW) sum over non-adjacent class pairs of
//!   C * [p_k1 . DT_k2 + p_k2 . DT_k1]` with saturated distance transforms
//!   of each class's high-confidence region. Always nonpositive; combine it
//!   with cross-entropy.
//! - CSSDF: compares clamped signed distance fields of predicted and
//!   ground-truth class regions, weighted toward predicted boundaries by
//!   `alpha = exp(-gamma |phi_hat|)` and by the ordinal cost.
//!
//! Gradient contract: the distance geometry (thresholded masks, distance
//! transforms, signed fields) is frozen per evaluation; gradients flow only
//! through the probability maps. For CSSDF, whose value does not vary with
//! probabilities at all once the geometry is fixed, the backward pass uses a
//! straight-through surrogate: inside the alpha weight the hard mask
//! membership is replaced by the class probability itself,
//! `phi_tilde = p * d_in - (1 - p) * d_out`, with the frozen unsigned
//! distances `d_in`/`d_out` and frozen field differences. The node's value
//! is the hard loss; its gradient is the surrogate's.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::Var;
use crate::distance::{
    clamp_dt, clamp_sdf, euclidean_dt, signed_df, threshold_mask, BinaryMask, DistField,
    SignedDistField,
};
use crate::error::{Error, Result};
use crate::loss::{LossValue, SpatialLossConfig};
use crate::model::{nonadjacent_pairs, ClassConfig, CostMatrix, LabelMap, ProbMap};

/// The 4-connected neighbor pairs of an `H x W` grid, each unordered pair
/// once: `H(W-1)` horizontal plus `(H-1)W` vertical.
#[derive(Debug, Clone, Copy)]
pub struct NeighborSystem {
    height: usize,
    width: usize,
}

impl NeighborSystem {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * (self.width - 1) + (self.height - 1) * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Iterates `((i, j), (i', j'))` pairs, right neighbor then down
    /// neighbor, row-major.
    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), (usize, usize))> + '_ {
        let (h, w) = (self.height, self.width);
        (0..h).flat_map(move |i| {
            (0..w).flat_map(move |j| {
                let right = (j + 1 < w).then_some(((i, j), (i, j + 1)));
                let down = (i + 1 < h).then_some(((i, j), (i + 1, j)));
                right.into_iter().chain(down)
            })
        })
    }
}

fn check_cost(probs: &ProbMap, cost: &CostMatrix) -> Result<()> {
    if probs.k_classes() != cost.k_classes() {
        return Err(Error::Validation(format!(
            "probability map has K={}, cost matrix has K={}",
            probs.k_classes(),
            cost.k_classes()
        )));
    }
    Ok(())
}

/// Contact-surface loss over neighboring pixels. Zero when every neighbor
/// pair's mass sits on identical or ordinally adjacent classes; zero for
/// single-pixel grids (no pairs).
pub fn csnp_loss(probs: &ProbMap, cost: &CostMatrix) -> Result<LossValue> {
    check_cost(probs, cost)?;
    let neighbors = NeighborSystem::new(probs.height(), probs.width());
    if neighbors.is_empty() {
        return Ok(LossValue::scalar(0.0));
    }
    let k = probs.k_classes();
    let mut total = 0.0;
    for (a, b) in neighbors.pairs() {
        for r in 1..=k {
            let pa = probs.prob(a.0, a.1, r);
            if pa == 0.0 {
                continue;
            }
            for s in 1..=k {
                let c = cost.cost(r, s);
                if c != 0.0 {
                    total += pa * c * probs.prob(b.0, b.1, s);
                }
            }
        }
    }
    Ok(LossValue::scalar(total / neighbors.len() as f64))
}

/// CSNP graph node (fused op with the same pair enumeration).
pub fn csnp_node<'t>(probs: Var<'t>, cost: &CostMatrix) -> Result<Var<'t>> {
    let shape = probs.value().shape().to_vec();
    if shape[2] != cost.k_classes() {
        return Err(Error::Validation(format!(
            "probability node has K={}, cost matrix has K={}",
            shape[2],
            cost.k_classes()
        )));
    }
    Ok(probs.csnp(Arc::new(cost.entries().clone())))
}

/// The saturated distance transform of one class's high-confidence region;
/// the constant-`gamma` field when no pixel clears the threshold.
pub fn saturated_class_dt(
    probs: &ProbMap,
    class: usize,
    delta_conf: f64,
    gamma: f64,
) -> Result<DistField> {
    let mask = threshold_mask(probs, class, delta_conf)?;
    if mask.count_true() == 0 {
        return DistField::constant(probs.height(), probs.width(), gamma);
    }
    clamp_dt(&euclidean_dt(&mask)?, gamma)
}

/// Contact-surface distance-transform loss. Nonpositive by construction;
/// zero when K = 2 (no non-adjacent class pairs).
pub fn csdt_loss(probs: &ProbMap, cost: &CostMatrix, config: &SpatialLossConfig) -> Result<LossValue> {
    check_cost(probs, cost)?;
    config.validate()?;
    let k = probs.k_classes();
    let pairs = nonadjacent_pairs(ClassConfig::new(k)?);
    if pairs.is_empty() {
        return Ok(LossValue::scalar(0.0));
    }
    let (h, w) = (probs.height(), probs.width());
    let fields = class_dt_fields(probs, &pairs, config)?;
    let mut total = 0.0;
    for &(k1, k2) in &pairs {
        let c = cost.cost(k1, k2);
        let dt1 = fields[k1 - 1].as_ref().expect("field computed for paired class");
        let dt2 = fields[k2 - 1].as_ref().expect("field computed for paired class");
        let mut pair_sum = 0.0;
        for i in 0..h {
            for j in 0..w {
                pair_sum += probs.prob(i, j, k1) * dt2.get(i, j)
                    + probs.prob(i, j, k2) * dt1.get(i, j);
            }
        }
        total += c * pair_sum;
    }
    Ok(LossValue::scalar(-total / (h * w) as f64))
}

fn class_dt_fields(
    probs: &ProbMap,
    pairs: &[(usize, usize)],
    config: &SpatialLossConfig,
) -> Result<Vec<Option<DistField>>> {
    let k = probs.k_classes();
    let mut used = vec![false; k];
    for &(k1, k2) in pairs {
        used[k1 - 1] = true;
        used[k2 - 1] = true;
    }
    let mut fields = vec![None; k];
    for class in 1..=k {
        if used[class - 1] {
            fields[class - 1] = Some(saturated_class_dt(
                probs,
                class,
                config.delta_conf,
                config.gamma_clamp,
            )?);
        }
    }
    Ok(fields)
}

/// CSDT graph node: the distance fields are computed from the node's current
/// value and enter the graph as constants, so the gradient is the
/// frozen-geometry one (which equals the true gradient away from threshold
/// crossings, where the fields are locally constant in the probabilities).
pub fn csdt_node<'t>(
    probs: Var<'t>,
    cost: &CostMatrix,
    config: &SpatialLossConfig,
) -> Result<Var<'t>> {
    config.validate()?;
    let value = probs.value();
    let value3 = value.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
    let prob_map = ProbMap::new(value3)?;
    check_cost(&prob_map, cost)?;
    let k = prob_map.k_classes();
    let pairs = nonadjacent_pairs(ClassConfig::new(k)?);
    let (h, w) = (prob_map.height(), prob_map.width());
    if pairs.is_empty() {
        return Ok(probs.tape().scalar(0.0));
    }
    let fields = class_dt_fields(&prob_map, &pairs, config)?;
    let planes: Vec<Var<'t>> = (0..k).map(|c| probs.select_plane(c)).collect();
    let as_const = |f: &DistField| Arc::new(f.values().clone().into_dyn());
    let mut total: Option<Var<'t>> = None;
    for &(k1, k2) in &pairs {
        let c = cost.cost(k1, k2);
        let dt1 = as_const(fields[k1 - 1].as_ref().unwrap());
        let dt2 = as_const(fields[k2 - 1].as_ref().unwrap());
        let term = planes[k1 - 1]
            .mul_const(dt2)
            .sum()
            .add(planes[k2 - 1].mul_const(dt1).sum())
            .scale(c);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("nonempty pair set").scale(-1.0 / (h * w) as f64))
}

/// Boundary-emphasis weight `exp(-gamma |phi|)` of a signed distance field.
/// The field must have materialized values (proper, or degenerate after
/// clamping).
pub fn alpha_weight(sdf: &SignedDistField, gamma_decay: f64) -> Result<Array2<f64>> {
    if gamma_decay <= 0.0 {
        return Err(Error::Config(format!(
            "gamma_decay must be positive, got {gamma_decay}"
        )));
    }
    Ok(sdf.values()?.mapv(|v| (-gamma_decay * v.abs()).exp()))
}

/// Frozen per-class geometry for one CSSDF evaluation: everything derived
/// from thresholding, distance transforms, and the ground truth.
pub struct CssdfGeometry {
    /// Classes appearing in the non-adjacent pair set (1-based), with their
    /// per-pixel data; `None` for unused classes.
    per_class: Vec<Option<ClassGeometry>>,
    pairs: Vec<(usize, usize)>,
    gamma_hat: f64,
}

struct ClassGeometry {
    /// Distance to the nearest pixel outside the predicted region (0 outside).
    d_in: Array2<f64>,
    /// Distance to the nearest pixel inside the predicted region (0 inside).
    d_out: Array2<f64>,
    /// `exp(-gamma |phi_hat|)` with the unclamped magnitude where defined.
    alpha: Array2<f64>,
    /// `|phi_gt_clamped - phi_pred_clamped|^p`, the frozen field difference.
    diff_pow: Array2<f64>,
}

impl CssdfGeometry {
    pub fn new(
        probs: &ProbMap,
        gt_labels: &LabelMap,
        config: &SpatialLossConfig,
    ) -> Result<Self> {
        config.validate()?;
        let k = probs.k_classes();
        let (h, w) = (probs.height(), probs.width());
        if gt_labels.height() != h || gt_labels.width() != w || gt_labels.k_classes() != k {
            return Err(Error::Validation(
                "probability map does not match ground-truth labels".into(),
            ));
        }
        let gamma_hat = config.resolve_gamma_hat(h, w);
        let pairs = nonadjacent_pairs(ClassConfig::new(k)?);
        let mut used = vec![false; k];
        for &(k1, k2) in &pairs {
            used[k1 - 1] = true;
            used[k2 - 1] = true;
        }
        let mut per_class = Vec::with_capacity(k);
        for class in 1..=k {
            if !used[class - 1] {
                per_class.push(None);
                continue;
            }
            let pred_mask = threshold_mask(probs, class, config.delta_conf)?;
            let pred_sdf = signed_df(&pred_mask)?;
            let pred_clamped = clamp_sdf(&pred_sdf, gamma_hat)?;

            let gt_mask = BinaryMask::new(Array2::from_shape_fn((h, w), |(i, j)| {
                gt_labels.label(i, j) == class
            }))?;
            let gt_clamped = clamp_sdf(&signed_df(&gt_mask)?, gamma_hat)?;

            let alpha = if pred_sdf.is_degenerate() {
                alpha_weight(&pred_clamped, config.gamma_decay)?
            } else {
                alpha_weight(&pred_sdf, config.gamma_decay)?
            };

            let p = config.p_exponent as i32;
            let gt_v = gt_clamped.values()?;
            let pred_v = pred_clamped.values()?;
            let diff_pow =
                Array2::from_shape_fn((h, w), |(i, j)| {
                    (gt_v[(i, j)] - pred_v[(i, j)]).abs().powi(p)
                });

            let (d_in, d_out) = unsigned_distances(&pred_mask, gamma_hat)?;
            per_class.push(Some(ClassGeometry { d_in, d_out, alpha, diff_pow }));
        }
        Ok(Self { per_class, pairs, gamma_hat })
    }

    pub fn gamma_hat(&self) -> f64 {
        self.gamma_hat
    }

    /// True when the soft SDF magnitude `|p * d_in - (1 - p) * d_out|` of
    /// every used class stays above `margin` at these probabilities, keeping
    /// the surrogate's absolute-value kink away from finite-difference
    /// probes.
    pub fn soft_phi_clear_of_zero(&self, probs: &ProbMap, margin: f64) -> bool {
        for (class_idx, geometry) in self.per_class.iter().enumerate() {
            let Some(g) = geometry else { continue };
            let (h, w) = g.d_in.dim();
            for i in 0..h {
                for j in 0..w {
                    let q = probs.prob(i, j, class_idx + 1);
                    let phi = q * g.d_in[(i, j)] - (1.0 - q) * g.d_out[(i, j)];
                    if phi.abs() < margin {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Both-side unsigned distances of a region: `d_in` is the distance to the
/// nearest outside pixel (0 outside the region), `d_out` to the nearest
/// inside pixel (0 inside). Degenerate regions use the clamp constant on
/// their missing side, matching the clamped-field convention.
fn unsigned_distances(mask: &BinaryMask, gamma_hat: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = (mask.height(), mask.width());
    let n_true = mask.count_true();
    if n_true == 0 {
        return Ok((Array2::zeros((h, w)), Array2::from_elem((h, w), gamma_hat)));
    }
    if n_true == h * w {
        return Ok((Array2::from_elem((h, w), gamma_hat), Array2::zeros((h, w))));
    }
    let d_out = euclidean_dt(mask)?.values().clone();
    let d_in = euclidean_dt(&mask.complement())?.values().clone();
    Ok((d_in, d_out))
}

/// Hard CSSDF loss: nonnegative; zero when every paired class's thresholded
/// prediction reproduces its ground-truth mask.
pub fn cssdf_loss(
    probs: &ProbMap,
    gt_labels: &LabelMap,
    cost: &CostMatrix,
    config: &SpatialLossConfig,
) -> Result<LossValue> {
    check_cost(probs, cost)?;
    let geometry = CssdfGeometry::new(probs, gt_labels, config)?;
    if geometry.pairs.is_empty() {
        return Ok(LossValue::scalar(0.0));
    }
    let (h, w) = (probs.height(), probs.width());
    let mut total = 0.0;
    for &(k1, k2) in &geometry.pairs {
        let c = cost.cost(k1, k2);
        let g1 = geometry.per_class[k1 - 1].as_ref().unwrap();
        let g2 = geometry.per_class[k2 - 1].as_ref().unwrap();
        for i in 0..h {
            for j in 0..w {
                total += c
                    * (g1.alpha[(i, j)] * g2.diff_pow[(i, j)]
                        + g2.alpha[(i, j)] * g1.diff_pow[(i, j)]);
            }
        }
    }
    Ok(LossValue::scalar(total / (h * w) as f64))
}

/// The differentiable CSSDF surrogate at frozen geometry: the alpha weight
/// is rebuilt from `phi_tilde = p * d_in - (1 - p) * d_out` with the frozen
/// distances, everything else stays constant. This is the function whose
/// gradient the CSSDF node propagates, and the one finite differences must
/// probe.
pub fn cssdf_frozen(
    probs: &ProbMap,
    geometry: &CssdfGeometry,
    cost: &CostMatrix,
    gamma_decay: f64,
) -> Result<f64> {
    check_cost(probs, cost)?;
    if geometry.pairs.is_empty() {
        return Ok(0.0);
    }
    let (h, w) = (probs.height(), probs.width());
    let soft_alpha = |g: &ClassGeometry, class: usize, i: usize, j: usize| {
        let q = probs.prob(i, j, class);
        let phi = q * g.d_in[(i, j)] - (1.0 - q) * g.d_out[(i, j)];
        (-gamma_decay * phi.abs()).exp()
    };
    let mut total = 0.0;
    for &(k1, k2) in &geometry.pairs {
        let c = cost.cost(k1, k2);
        let g1 = geometry.per_class[k1 - 1].as_ref().unwrap();
        let g2 = geometry.per_class[k2 - 1].as_ref().unwrap();
        for i in 0..h {
            for j in 0..w {
                total += c
                    * (soft_alpha(g1, k1, i, j) * g2.diff_pow[(i, j)]
                        + soft_alpha(g2, k2, i, j) * g1.diff_pow[(i, j)]);
            }
        }
    }
    Ok(total / (h * w) as f64)
}

/// CSSDF graph node: value is the hard loss, gradient is the frozen-geometry
/// straight-through surrogate's.
pub fn cssdf_node<'t>(
    probs: Var<'t>,
    gt_labels: &LabelMap,
    cost: &CostMatrix,
    config: &SpatialLossConfig,
) -> Result<Var<'t>> {
    let value = probs.value();
    let value3 = value.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
    let prob_map = ProbMap::new(value3)?;
    check_cost(&prob_map, cost)?;
    let geometry = CssdfGeometry::new(&prob_map, gt_labels, config)?;
    let tape = probs.tape();
    if geometry.pairs.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let (h, w) = (prob_map.height(), prob_map.width());
    let k = prob_map.k_classes();
    let planes: Vec<Var<'t>> = (0..k).map(|c| probs.select_plane(c)).collect();

    // Soft alpha node for one class: exp(-gamma |p*(d_in + d_out) - d_out|).
    let soft_alpha = |class: usize| -> Var<'t> {
        let g = geometry.per_class[class - 1].as_ref().unwrap();
        let span = Arc::new((&g.d_in + &g.d_out).into_dyn());
        let offset = tape.constant(g.d_out.clone().into_dyn());
        planes[class - 1]
            .mul_const(span)
            .sub(offset)
            .abs()
            .scale(-config.gamma_decay)
            .exp()
    };

    let mut soft_total: Option<Var<'t>> = None;
    for &(k1, k2) in &geometry.pairs {
        let c = cost.cost(k1, k2);
        let g1 = geometry.per_class[k1 - 1].as_ref().unwrap();
        let g2 = geometry.per_class[k2 - 1].as_ref().unwrap();
        let term = soft_alpha(k1)
            .mul_const(Arc::new(g2.diff_pow.clone().into_dyn()))
            .sum()
            .add(soft_alpha(k2).mul_const(Arc::new(g1.diff_pow.clone().into_dyn())).sum())
            .scale(c);
        soft_total = Some(match soft_total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    let soft = soft_total.expect("nonempty pair set").scale(1.0 / (h * w) as f64);

    // Straight-through: shift the value to the hard loss; the shift is a
    // constant so the gradient stays the surrogate's.
    let hard = cssdf_loss(&prob_map, gt_labels, cost, config)?.total;
    Ok(soft.add_scalar(hard - soft.scalar_value()))
}
