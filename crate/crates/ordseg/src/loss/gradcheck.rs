//! Finite-difference verification harness for the losses.
//!
//! Draws random logits/labels, resamples until the instance sits at least a
//! safety margin away from every hinge kink, threshold crossing, and
//! absolute-value kink the loss can expose, then compares the graph
//! gradient with central differences of the matching scalar function:
//!
//! - geometry-free losses differentiate the plain evaluation itself;
//! - CSDT differentiates the plain evaluation too (its thresholded fields
//!   are locally constant away from crossings);
//! - CSSDF differentiates the frozen-geometry straight-through surrogate,
//!   which is the function whose gradient the node propagates.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::autodiff::{finite_diff_check, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::loss::{loss_value, spatial, LossConfig, LossKind, Objective, SpatialLossConfig};
use crate::model::{cost_matrix, softmax, ClassConfig, LabelMap, LogitMap, ProbMap};

/// Distance every hinge argument, threshold gap, and soft-SDF value must
/// keep from its kink for an instance to be accepted.
pub const KINK_MARGIN: f64 = 1e-3;

/// What to differentiate: one raw loss, or a combined objective.
#[derive(Debug, Clone, Copy)]
pub enum CheckTarget {
    Single(LossKind),
    Combined(Objective),
}

impl CheckTarget {
    fn uses(&self, kind: LossKind) -> bool {
        match self {
            CheckTarget::Single(k) => *k == kind,
            CheckTarget::Combined(o) => o.ordinal == Some(kind),
        }
    }

    fn pointwise(&self) -> LossConfig {
        match self {
            CheckTarget::Single(_) => LossConfig::default(),
            CheckTarget::Combined(o) => o.pointwise,
        }
    }

    fn spatial(&self) -> SpatialLossConfig {
        match self {
            CheckTarget::Single(_) => SpatialLossConfig::default(),
            CheckTarget::Combined(o) => o.spatial,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn draw_instance(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    k: usize,
) -> Result<(LogitMap, LabelMap)> {
    let logits = Array3::from_shape_fn((height, width, k), |_| 4.0 * uniform(rng) - 2.0);
    let labels = Array2::from_shape_fn((height, width), |_| {
        1 + ((uniform(rng) * k as f64) as usize).min(k - 1)
    });
    Ok((
        LogitMap::new(logits)?,
        LabelMap::new(labels, ClassConfig::new(k)?)?,
    ))
}

/// True when every term the target's losses evaluate is at least
/// [`KINK_MARGIN`] away from its nearest kink.
fn kink_safe(
    target: &CheckTarget,
    probs: &ProbMap,
    labels: &LabelMap,
    pointwise_cfg: &LossConfig,
    spatial_cfg: &SpatialLossConfig,
) -> bool {
    let (h, w, k) = (probs.height(), probs.width(), probs.k_classes());
    let config = ClassConfig::new(k).expect("checked K");

    if target.uses(LossKind::Qul) {
        let delta = pointwise_cfg.qul_delta;
        for i in 0..h {
            for j in 0..w {
                let k_star = labels.label(i, j);
                let p = |c: usize| probs.prob(i, j, c);
                let mut args = Vec::new();
                if k_star > 1 {
                    args.push(delta + p(k_star - 1) - p(k_star));
                }
                if k_star < k {
                    args.push(delta + p(k_star + 1) - p(k_star));
                }
                let (asc, desc) = super::pointwise::qul_sets(k_star, config).expect("valid mode");
                for (dominated, dominator) in asc.iter().chain(desc.iter()) {
                    args.push(delta + p(*dominated) - p(*dominator));
                }
                if args.iter().any(|a| a.abs() < KINK_MARGIN) {
                    return false;
                }
            }
        }
    }
    if target.uses(LossKind::O2) {
        let delta = pointwise_cfg.o2_delta;
        for i in 0..h {
            for j in 0..w {
                let k_star = labels.label(i, j);
                let p = |c: usize| probs.prob(i, j, c);
                for c in 2..=k_star {
                    if (delta + p(c - 1) - p(c)).abs() < KINK_MARGIN {
                        return false;
                    }
                }
                for c in k_star..k {
                    if (delta + p(c + 1) - p(c)).abs() < KINK_MARGIN {
                        return false;
                    }
                }
            }
        }
    }
    if target.uses(LossKind::Csdt) || target.uses(LossKind::Cssdf) {
        // Thresholded geometry must not flip under the probe step.
        for v in probs.values().iter() {
            if (v - spatial_cfg.delta_conf).abs() < KINK_MARGIN {
                return false;
            }
        }
    }
    if target.uses(LossKind::Cssdf) {
        // The surrogate's |phi_tilde| kink.
        if let Ok(geometry) =
            spatial::CssdfGeometry::new(probs, labels, spatial_cfg)
        {
            if !geometry.soft_phi_clear_of_zero(probs, KINK_MARGIN) {
                return false;
            }
        } else {
            return false;
        }
    }
    true
}

/// Evaluates the target's scalar for finite differencing, with CSSDF's
/// geometry frozen at the base instance.
struct FdFunction<'a> {
    target: CheckTarget,
    labels: &'a LabelMap,
    pointwise_cfg: LossConfig,
    spatial_cfg: SpatialLossConfig,
    frozen: Option<(spatial::CssdfGeometry, f64)>,
    dims: (usize, usize, usize),
}

impl FdFunction<'_> {
    fn eval(&self, flat: &[f64]) -> f64 {
        let (h, w, k) = self.dims;
        let logits = Array3::from_shape_vec((h, w, k), flat.to_vec()).expect("flat length");
        let probs = softmax(&LogitMap::new(logits).expect("finite probe point"));
        let single = |kind: LossKind| -> f64 {
            if kind == LossKind::Cssdf {
                let (geometry, gamma_decay) = self.frozen.as_ref().expect("frozen geometry");
                let cost = cost_matrix(ClassConfig::new(k).expect("valid K"));
                spatial::cssdf_frozen(&probs, geometry, &cost, *gamma_decay)
                    .expect("frozen evaluation")
            } else {
                loss_value(kind, &probs, self.labels, &self.pointwise_cfg, &self.spatial_cfg)
                    .expect("loss evaluation")
                    .total
            }
        };
        match self.target {
            CheckTarget::Single(kind) => single(kind),
            CheckTarget::Combined(objective) => {
                let ce = single(LossKind::Ce);
                match objective.ordinal {
                    None => ce,
                    Some(kind) => ce + objective.lambda_combine * single(kind),
                }
            }
        }
    }
}

/// Draws a kink-safe instance and verifies the target's graph gradient with
/// respect to the logits against central differences.
pub fn check_loss_gradient(
    target: CheckTarget,
    height: usize,
    width: usize,
    k: usize,
    seed: u64,
    step: f64,
    tol_rel: f64,
) -> Result<GradCheckReport> {
    let pointwise_cfg = target.pointwise();
    let spatial_cfg = target.spatial();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instance = None;
    for _ in 0..500 {
        let (logits, labels) = draw_instance(&mut rng, height, width, k)?;
        let probs = softmax(&logits);
        if kink_safe(&target, &probs, &labels, &pointwise_cfg, &spatial_cfg) {
            instance = Some((logits, labels, probs));
            break;
        }
    }
    let Some((logits, labels, probs)) = instance else {
        return Err(Error::Oracle(
            "could not sample an instance clear of hinge/threshold kinks".into(),
        ));
    };

    // Graph gradient.
    let tape = Tape::new();
    let logits_var = tape.leaf(logits.values().clone().into_dyn());
    let probs_var = logits_var.softmax();
    let cost = cost_matrix(ClassConfig::new(k)?);
    let loss = match target {
        CheckTarget::Single(kind) => {
            super::loss_node(kind, probs_var, &labels, &pointwise_cfg, &spatial_cfg, &cost)?
        }
        CheckTarget::Combined(objective) => objective.node(probs_var, &labels, &cost)?,
    };
    tape.backward(loss)?;
    let grad = tape
        .grad(logits_var)
        .ok_or_else(|| Error::Numeric("no gradient reached the logits".into()))?;
    let grad_flat: Vec<f64> = grad.iter().copied().collect();

    let frozen = if target.uses(LossKind::Cssdf) {
        Some((
            spatial::CssdfGeometry::new(&probs, &labels, &spatial_cfg)?,
            spatial_cfg.gamma_decay,
        ))
    } else {
        None
    };
    let fd = FdFunction {
        target,
        labels: &labels,
        pointwise_cfg,
        spatial_cfg,
        frozen,
        dims: (height, width, k),
    };
    let point: Vec<f64> = logits.values().iter().copied().collect();
    finite_diff_check(|x| fd.eval(x), &grad_flat, &point, step, tol_rel)
}
