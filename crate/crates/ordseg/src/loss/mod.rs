//! Loss functions, pointwise and spatial, each in two forms: a plain
//! evaluator returning a [`LossValue`], and a `_node` graph builder on an
//! [`crate::autodiff::Tape`] whose value matches the plain evaluator and
//! whose backward pass yields the training gradient.

pub mod gradcheck;
pub mod pointwise;
pub mod spatial;

use ndarray::Array2;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{cost_matrix, ClassConfig, CostMatrix, LabelMap, ProbMap};

/// A computed loss: the scalar total and, for per-pixel losses, the
/// per-pixel contribution map (whose mean equals the total).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub per_pixel: Option<Array2<f64>>,
}

impl LossValue {
    pub fn scalar(total: f64) -> Self {
        Self { total, per_pixel: None }
    }

    pub fn from_per_pixel(per_pixel: Array2<f64>) -> Self {
        let total = per_pixel.sum() / per_pixel.len() as f64;
        Self { total, per_pixel: Some(per_pixel) }
    }
}

/// Hyperparameters of the pointwise losses. The paper overloads its symbols
/// across losses; fields here are disambiguated by name:
///
/// - `lambda_combine`: the trade-off weight of the combined objective
///   `CE + lambda * ordinal`;
/// - `qul_delta` / `qul_lambda`: margin and global-constraint weight of the
///   quasi-unimodal loss;
/// - `expmse_lambda`: variance weight of the expectation-MSE loss;
/// - `o2_delta`: margin of the ordering loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_combine: f64,
    pub qul_delta: f64,
    pub qul_lambda: f64,
    pub expmse_lambda: f64,
    pub o2_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_combine: 1.0,
            qul_delta: 0.05,
            qul_lambda: 1.0,
            expmse_lambda: 1.0,
            o2_delta: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_combine < 0.0 {
            return Err(Error::Config(format!(
                "lambda_combine must be nonnegative, got {}",
                self.lambda_combine
            )));
        }
        for (name, v) in [
            ("qul_delta", self.qul_delta),
            ("qul_lambda", self.qul_lambda),
            ("expmse_lambda", self.expmse_lambda),
            ("o2_delta", self.o2_delta),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Hyperparameters of the spatial losses. Again disambiguated by name:
///
/// - `delta_conf`: the confidence threshold selecting a class's
///   high-probability pixels;
/// - `gamma_clamp`: the saturation cap on distance transforms (CSDT);
/// - `gamma_decay`: the boundary-emphasis decay rate of the CSSDF weight;
/// - `gamma_hat`: the magnitude clamp on signed distance fields (CSSDF);
///   when `None` it defaults to the image diagonal `sqrt(H^2 + W^2)`;
/// - `p_exponent`: the CSSDF penalty exponent, 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialLossConfig {
    pub delta_conf: f64,
    pub gamma_clamp: f64,
    pub gamma_decay: f64,
    pub gamma_hat: Option<f64>,
    pub p_exponent: u32,
}

impl Default for SpatialLossConfig {
    fn default() -> Self {
        Self {
            delta_conf: 0.05,
            gamma_clamp: 1.0,
            gamma_decay: 1.0,
            gamma_hat: None,
            p_exponent: 1,
        }
    }
}

impl SpatialLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.delta_conf && self.delta_conf < 1.0) {
            return Err(Error::Config(format!(
                "delta_conf must lie in (0, 1), got {}",
                self.delta_conf
            )));
        }
        if self.gamma_clamp <= 0.0 {
            return Err(Error::Config(format!(
                "gamma_clamp must be positive, got {}",
                self.gamma_clamp
            )));
        }
        if self.gamma_decay <= 0.0 {
            return Err(Error::Config(format!(
                "gamma_decay must be positive, got {}",
                self.gamma_decay
            )));
        }
        if let Some(g) = self.gamma_hat {
            if g <= 0.0 {
                return Err(Error::Config(format!("gamma_hat must be positive, got {g}")));
            }
        }
        if !(self.p_exponent == 1 || self.p_exponent == 2) {
            return Err(Error::Config(format!(
                "p_exponent must be 1 or 2, got {}",
                self.p_exponent
            )));
        }
        Ok(())
    }

    /// The SDF clamp, defaulting to the image diagonal.
    pub fn resolve_gamma_hat(&self, height: usize, width: usize) -> f64 {
        self.gamma_hat
            .unwrap_or_else(|| ((height * height + width * width) as f64).sqrt())
    }
}

/// The seven losses, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Qul,
    ExpMse,
    O2,
    Csnp,
    Csdt,
    Cssdf,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Ce,
        LossKind::Qul,
        LossKind::ExpMse,
        LossKind::O2,
        LossKind::Csnp,
        LossKind::Csdt,
        LossKind::Cssdf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Qul => "qul",
            LossKind::ExpMse => "expmse",
            LossKind::O2 => "o2",
            LossKind::Csnp => "csnp",
            LossKind::Csdt => "csdt",
            LossKind::Cssdf => "cssdf",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Validation(format!("unknown loss '{name}'")))
    }
}

/// Evaluates any loss by kind (plain path).
pub fn loss_value(
    kind: LossKind,
    probs: &ProbMap,
    labels: &LabelMap,
    pointwise_cfg: &LossConfig,
    spatial_cfg: &SpatialLossConfig,
) -> Result<LossValue> {
    let cost = cost_matrix(ClassConfig::new(probs.k_classes())?);
    match kind {
        LossKind::Ce => pointwise::ce_loss(probs, labels),
        LossKind::Qul => pointwise::qul_loss(probs, labels, pointwise_cfg),
        LossKind::ExpMse => pointwise::expmse_loss(probs, labels, pointwise_cfg),
        LossKind::O2 => pointwise::o2_loss(probs, labels, pointwise_cfg),
        LossKind::Csnp => spatial::csnp_loss(probs, &cost),
        LossKind::Csdt => spatial::csdt_loss(probs, &cost, spatial_cfg),
        LossKind::Cssdf => spatial::cssdf_loss(probs, labels, &cost, spatial_cfg),
    }
}

/// Builds any loss by kind as a graph node over a probability variable.
pub fn loss_node<'t>(
    kind: LossKind,
    probs: Var<'t>,
    labels: &LabelMap,
    pointwise_cfg: &LossConfig,
    spatial_cfg: &SpatialLossConfig,
    cost: &CostMatrix,
) -> Result<Var<'t>> {
    match kind {
        LossKind::Ce => pointwise::ce_node(probs, labels),
        LossKind::Qul => pointwise::qul_node(probs, labels, pointwise_cfg),
        LossKind::ExpMse => pointwise::expmse_node(probs, labels, pointwise_cfg),
        LossKind::O2 => pointwise::o2_node(probs, labels, pointwise_cfg),
        LossKind::Csnp => spatial::csnp_node(probs, cost),
        LossKind::Csdt => spatial::csdt_node(probs, cost, spatial_cfg),
        LossKind::Cssdf => spatial::cssdf_node(probs, labels, cost, spatial_cfg),
    }
}

/// An ordinal loss choice for the combined objective `CE + lambda * ord`;
/// `ordinal = None` trains with plain cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub ordinal: Option<LossKind>,
    pub lambda_combine: f64,
    pub pointwise: LossConfig,
    pub spatial: SpatialLossConfig,
}

impl Objective {
    pub fn ce_only() -> Self {
        Self {
            ordinal: None,
            lambda_combine: 0.0,
            pointwise: LossConfig::default(),
            spatial: SpatialLossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_combine < 0.0 {
            return Err(Error::Config(format!(
                "lambda_combine must be nonnegative, got {}",
                self.lambda_combine
            )));
        }
        if self.ordinal == Some(LossKind::Ce) {
            return Err(Error::Config(
                "the ordinal term cannot itself be cross-entropy".into(),
            ));
        }
        self.pointwise.validate()?;
        self.spatial.validate()
    }

    /// Short key for tables, e.g. `ce`, `ce+qul`.
    pub fn label(&self) -> String {
        match self.ordinal {
            None => "ce".to_string(),
            Some(kind) => format!("ce+{}", kind.name()),
        }
    }

    /// The combined objective as a graph node.
    pub fn node<'t>(
        &self,
        probs: Var<'t>,
        labels: &LabelMap,
        cost: &CostMatrix,
    ) -> Result<Var<'t>> {
        let ce = pointwise::ce_node(probs, labels)?;
        let Some(kind) = self.ordinal else { return Ok(ce) };
        let ord = loss_node(kind, probs, labels, &self.pointwise, &self.spatial, cost)?;
        Ok(ce.add(ord.scale(self.lambda_combine)))
    }

    /// Plain evaluation of the combined objective.
    pub fn value(&self, probs: &ProbMap, labels: &LabelMap) -> Result<f64> {
        let ce = pointwise::ce_loss(probs, labels)?;
        let Some(kind) = self.ordinal else { return Ok(ce.total) };
        let ord = loss_value(kind, probs, labels, &self.pointwise, &self.spatial)?;
        Ok(pointwise::combined_loss(&ce, &ord, self.lambda_combine)?.total)
    }
}
