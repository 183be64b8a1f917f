//! Exact Euclidean distance transforms and signed distance fields over the
//! pixel grid.
//!
//! The transform is the two-pass separable lower-envelope method: a column
//! sweep producing per-column vertical distances, then a row pass that takes
//! the lower envelope of parabolas over squared distances. It is exact (not a
//! chamfer approximation); squared distances are integers represented exactly
//! in `f64`, so results agree bitwise with a brute-force scan.
//!
//! Pixel metric: Euclidean on integer grid coordinates, pitch 1.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::ProbMap;

/// A boolean pixel grid marking a region (e.g. a high-confidence class set).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<bool>,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::Validation("mask must be at least 1x1".into()));
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[(i, j)]
    }

    pub fn count_true(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    /// Pointwise complement.
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            values: self.values.mapv(|b| !b),
        }
    }
}

/// Nonnegative per-pixel distances to a reference region; 0 exactly on the
/// region (unsaturated case). `cap` records an applied saturation value.
#[derive(Debug, Clone, PartialEq)]
pub struct DistField {
    values: Array2<f64>,
    cap: Option<f64>,
}

impl DistField {
    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn cap(&self) -> Option<f64> {
        self.cap
    }

    /// The constant field used when the reference set is empty: every pixel
    /// sits at the saturation value.
    pub fn constant(height: usize, width: usize, gamma: f64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self {
            values: Array2::from_elem((height, width), gamma),
            cap: Some(gamma),
        })
    }
}

/// Signed per-pixel distances: positive inside a region (distance to the
/// nearest outside pixel), negative outside (distance to the nearest inside
/// pixel). Degenerate regions (all-inside / all-outside) have no finite
/// unclamped values and must be clamped before their values are read.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistField {
    state: SdfState,
    height: usize,
    width: usize,
    clamp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum SdfState {
    Proper(Array2<f64>),
    AllInside,
    AllOutside,
}

impl SignedDistField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn clamp(&self) -> Option<f64> {
        self.clamp
    }

    pub fn is_degenerate(&self) -> bool {
        !matches!(self.state, SdfState::Proper(_))
    }

    /// The field values. Degenerate unclamped fields have none.
    pub fn values(&self) -> Result<&Array2<f64>> {
        match &self.state {
            SdfState::Proper(v) => Ok(v),
            _ => Err(Error::UnboundedField),
        }
    }

    /// Pointwise magnitudes `|phi|`; a degenerate field contributes the
    /// constant `cap_for_degenerate` everywhere.
    pub fn magnitude_or(&self, cap_for_degenerate: f64) -> Array2<f64> {
        match &self.state {
            SdfState::Proper(v) => v.mapv(f64::abs),
            _ => Array2::from_elem((self.height, self.width), cap_for_degenerate),
        }
    }
}

/// Exact squared-distance transform of one row of column distances.
/// `f` holds squared vertical distances (possibly infinite); `out` receives
/// the squared 2-D distances.
fn envelope_pass(f: &[f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let first = match (0..n).find(|&q| f[q].is_finite()) {
        Some(q) => q,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    // Intersection of the parabolas rooted at p and q (q > p, both finite).
    let intersect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / ((2 * (q - p)) as f64)
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in (first + 1)..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = intersect(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (j, out_j) in out.iter_mut().enumerate() {
        while z[k + 1] < j as f64 {
            k += 1;
        }
        let p = v[k];
        let d = j as f64 - p as f64;
        *out_j = d * d + f[p];
    }
}

/// Exact Euclidean distance from every pixel to the nearest true pixel of
/// `mask`. Errors with [`Error::EmptyRegion`] when the mask has no true
/// pixel; callers that want the saturated convention substitute
/// [`DistField::constant`].
pub fn euclidean_dt(mask: &BinaryMask) -> Result<DistField> {
    if mask.count_true() == 0 {
        return Err(Error::EmptyRegion);
    }
    let (h, w) = (mask.height(), mask.width());

    // Column sweep: vertical pixel distance to the nearest true pixel in the
    // same column (infinite for columns without one).
    let mut g = Array2::from_elem((h, w), f64::INFINITY);
    for j in 0..w {
        let mut d = f64::INFINITY;
        for i in 0..h {
            d = if mask.get(i, j) { 0.0 } else { d + 1.0 };
            g[(i, j)] = d;
        }
        d = f64::INFINITY;
        for i in (0..h).rev() {
            d = if mask.get(i, j) { 0.0 } else { d + 1.0 };
            if d < g[(i, j)] {
                g[(i, j)] = d;
            }
        }
    }

    // Row pass over squared distances.
    let mut values = Array2::zeros((h, w));
    let mut f_row = vec![0.0; w];
    let mut out_row = vec![0.0; w];
    let mut v = vec![0usize; w];
    let mut z = vec![0.0; w + 1];
    for i in 0..h {
        for j in 0..w {
            let gij = g[(i, j)];
            f_row[j] = gij * gij;
        }
        envelope_pass(&f_row, &mut v, &mut z, &mut out_row);
        for j in 0..w {
            values[(i, j)] = out_row[j].sqrt();
        }
    }
    Ok(DistField { values, cap: None })
}

/// Pixels whose predicted probability of `class` (1-based) reaches
/// `delta_conf`.
pub fn threshold_mask(probs: &ProbMap, class: usize, delta_conf: f64) -> Result<BinaryMask> {
    if !(0.0 < delta_conf && delta_conf < 1.0) {
        return Err(Error::Config(format!(
            "confidence threshold must lie in (0, 1), got {delta_conf}"
        )));
    }
    if class < 1 || class > probs.k_classes() {
        return Err(Error::Validation(format!(
            "class {class} outside 1..={}",
            probs.k_classes()
        )));
    }
    let (h, w) = (probs.height(), probs.width());
    let values = Array2::from_shape_fn((h, w), |(i, j)| probs.prob(i, j, class) >= delta_conf);
    BinaryMask::new(values)
}

/// Saturates a distance field at `gamma` pointwise.
pub fn clamp_dt(field: &DistField, gamma: f64) -> Result<DistField> {
    if gamma <= 0.0 {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    Ok(DistField {
        values: field.values.mapv(|v| v.min(gamma)),
        cap: Some(gamma),
    })
}

/// Signed distance function of a region: `+d(x, outside)` inside,
/// `-d(x, region)` outside. Degenerate regions produce marker fields whose
/// values exist only after [`clamp_sdf`].
pub fn signed_df(region: &BinaryMask) -> Result<SignedDistField> {
    let (h, w) = (region.height(), region.width());
    let n_true = region.count_true();
    if n_true == 0 {
        return Ok(SignedDistField {
            state: SdfState::AllOutside,
            height: h,
            width: w,
            clamp: None,
        });
    }
    if n_true == h * w {
        return Ok(SignedDistField {
            state: SdfState::AllInside,
            height: h,
            width: w,
            clamp: None,
        });
    }
    let dt_region = euclidean_dt(region)?;
    let dt_complement = euclidean_dt(&region.complement())?;
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        if region.get(i, j) {
            dt_complement.get(i, j)
        } else {
            -dt_region.get(i, j)
        }
    });
    Ok(SignedDistField {
        state: SdfState::Proper(values),
        height: h,
        width: w,
        clamp: None,
    })
}

/// Clamps a signed distance field to magnitude `gamma_hat`, materializing
/// the degenerate conventions (`+gamma_hat` for all-inside, `-gamma_hat` for
/// all-outside).
pub fn clamp_sdf(field: &SignedDistField, gamma_hat: f64) -> Result<SignedDistField> {
    if gamma_hat <= 0.0 {
        return Err(Error::Config(format!(
            "gamma_hat must be positive, got {gamma_hat}"
        )));
    }
    let (h, w) = (field.height, field.width);
    let values = match &field.state {
        SdfState::Proper(v) => v.mapv(|x| x.signum() * x.abs().min(gamma_hat)),
        SdfState::AllInside => Array2::from_elem((h, w), gamma_hat),
        SdfState::AllOutside => Array2::from_elem((h, w), -gamma_hat),
    };
    Ok(SignedDistField {
        state: SdfState::Proper(values),
        height: h,
        width: w,
        clamp: Some(gamma_hat),
    })
}
