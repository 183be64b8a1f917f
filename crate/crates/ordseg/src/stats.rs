//! Cross-validation aggregation and the pairwise interval-comparison
//! criterion.
//!
//! A run's fold scores are summarized as `I = [mu - sigma, mu + sigma]`.
//! Interval `I1` is inferior to `I2` when `mu1 < mu2` and any of:
//!
//! - (a) the intervals are disjoint;
//! - (b) `I1` is contained in `I2`;
//! - (c) `mu1 + sigma1 < mu2`;
//! - (d) `mu1 + sigma1 < mu2 + sigma2`;
//! - (e) the overlap ratio `rho = |(mu1 + sigma1) - (mu2 - sigma2)| / (2 sigma1)`
//!   falls below a configurable threshold (default 0.5).
//!
//! Scores are assumed higher-is-better; negate lower-is-better metrics
//! before comparing.

use crate::error::{Error, Result};

/// Default threshold under which the overlap ratio of condition (e) counts
/// as "small".
pub const DEFAULT_RHO_THRESHOLD: f64 = 0.5;

/// How the standard deviation over folds is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StdMode {
    /// Divisor `n`: the folds are the whole set of observations.
    #[default]
    Population,
    /// Divisor `n - 1`.
    Sample,
}

/// A `mean ± standard deviation` performance summary of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mu: f64,
    pub sigma: f64,
    pub n_folds: usize,
}

impl Interval {
    pub fn new(mu: f64, sigma: f64, n_folds: usize) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::Validation(format!(
                "standard deviation must be nonnegative, got {sigma}"
            )));
        }
        Ok(Self { mu, sigma, n_folds })
    }

    pub fn lo(&self) -> f64 {
        self.mu - self.sigma
    }

    pub fn hi(&self) -> f64 {
        self.mu + self.sigma
    }
}

/// The five inferiority conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    A,
    B,
    C,
    D,
    E,
}

impl Condition {
    pub fn letter(&self) -> char {
        match self {
            Condition::A => 'a',
            Condition::B => 'b',
            Condition::C => 'c',
            Condition::D => 'd',
            Condition::E => 'e',
        }
    }
}

/// Which interval, if either, the criterion declares inferior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    FirstInferior,
    SecondInferior,
    Indeterminate,
}

/// Outcome of a pairwise comparison: the relation, every triggered
/// condition, and the overlap ratio when it was evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonVerdict {
    pub relation: Relation,
    pub triggered: Vec<Condition>,
    pub rho: Option<f64>,
    /// Condition (e) was skipped because the candidate inferior interval has
    /// zero standard deviation.
    pub condition_e_skipped: bool,
}

/// Mean and standard deviation of fold scores. Needs at least two scores.
pub fn fold_interval(scores: &[f64], mode: StdMode) -> Result<Interval> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "interval needs at least 2 fold scores, got {n}"
        )));
    }
    let mu = scores.iter().sum::<f64>() / n as f64;
    let ss: f64 = scores.iter().map(|s| (s - mu) * (s - mu)).sum();
    let divisor = match mode {
        StdMode::Population => n as f64,
        StdMode::Sample => (n - 1) as f64,
    };
    let sigma = (ss / divisor).sqrt();
    Interval::new(mu, sigma, n)
}

/// Evaluates conditions (a)-(e) with `first` as the candidate inferior
/// interval. Caller guarantees `first.mu < second.mu`.
fn conditions(first: &Interval, second: &Interval, rho_threshold: f64) -> (Vec<Condition>, Option<f64>, bool) {
    let mut triggered = Vec::new();
    // (a) disjoint intervals.
    if first.hi() < second.lo() {
        triggered.push(Condition::A);
    }
    // (b) first contained in second.
    if second.lo() <= first.lo() && first.hi() <= second.hi() {
        triggered.push(Condition::B);
    }
    // (c).
    if first.hi() < second.mu {
        triggered.push(Condition::C);
    }
    // (d).
    if first.hi() < second.hi() {
        triggered.push(Condition::D);
    }
    // (e): overlap ratio, undefined at sigma = 0.
    if first.sigma == 0.0 {
        (triggered, None, true)
    } else {
        let rho = (first.hi() - second.lo()).abs() / (2.0 * first.sigma);
        if rho < rho_threshold {
            triggered.push(Condition::E);
        }
        (triggered, Some(rho), false)
    }
}

/// The pairwise criterion: tries `i1` as the inferior interval, then the
/// mirrored test. Equal means are always indeterminate.
pub fn compare_intervals(i1: &Interval, i2: &Interval, rho_threshold: f64) -> Result<ComparisonVerdict> {
    if rho_threshold <= 0.0 {
        return Err(Error::Config(format!(
            "rho threshold must be positive, got {rho_threshold}"
        )));
    }
    let (relation, candidate) = if i1.mu < i2.mu {
        (Relation::FirstInferior, Some((i1, i2)))
    } else if i2.mu < i1.mu {
        (Relation::SecondInferior, Some((i2, i1)))
    } else {
        (Relation::Indeterminate, None)
    };
    let Some((lower, higher)) = candidate else {
        return Ok(ComparisonVerdict {
            relation: Relation::Indeterminate,
            triggered: Vec::new(),
            rho: None,
            condition_e_skipped: false,
        });
    };
    let (triggered, rho, skipped) = conditions(lower, higher, rho_threshold);
    if triggered.is_empty() {
        return Ok(ComparisonVerdict {
            relation: Relation::Indeterminate,
            triggered,
            rho,
            condition_e_skipped: skipped,
        });
    }
    Ok(ComparisonVerdict {
        relation,
        triggered,
        rho,
        condition_e_skipped: skipped,
    })
}
