//! Dense-labeling data model: ordered classes, logit/probability/label maps,
//! the ordinal cost matrix, and the structural invariants they carry.
//!
//! Class indices are 1-based everywhere in the public API; any 0-based
//! storage is an internal detail. All values are `f64`.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_CLAMP_MIN: f64 = 1e-12;

/// Per-pixel probability rows must sum to 1 within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// The ordered label set: classes `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassConfig {
    k_classes: usize,
}

impl ClassConfig {
    /// A configuration with `k` ordered classes. Rejects `k < 2`: every loss
    /// and metric here compares at least two classes.
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!(
                "k_classes must be at least 2, got {k}"
            )));
        }
        Ok(Self { k_classes: k })
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    /// Iterator over the 1-based class indices.
    pub fn classes(&self) -> impl Iterator<Item = usize> {
        1..=self.k_classes
    }
}

/// Unnormalized per-pixel scores, shape `H x W x K`. All entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    values: Array3<f64>,
}

impl LogitMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        for ((i, j, k), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite logit {v} at pixel ({i}, {j}), class {}",
                    k + 1
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn k_classes(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }
}

/// Per-pixel predicted distributions over the K ordered classes,
/// shape `H x W x K`; every row sums to 1 and every entry lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    values: Array3<f64>,
}

impl ProbMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, _) = values.dim();
        for i in 0..h {
            for j in 0..w {
                let row = values.slice(ndarray::s![i, j, ..]);
                let mut sum = 0.0;
                for &p in row.iter() {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Validation(format!(
                            "probability {p} outside [0, 1] at pixel ({i}, {j})"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::Validation(format!(
                        "probabilities at pixel ({i}, {j}) sum to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn k_classes(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// Probability of `class` (1-based) at pixel `(i, j)`.
    pub fn prob(&self, i: usize, j: usize, class: usize) -> f64 {
        self.values[(i, j, class - 1)]
    }
}

/// Ground-truth or decoded class indices, shape `H x W`, entries in `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    values: Array2<usize>,
    k_classes: usize,
}

impl LabelMap {
    pub fn new(values: Array2<usize>, config: ClassConfig) -> Result<Self> {
        let k = config.k_classes();
        for ((i, j), &y) in values.indexed_iter() {
            if y < 1 || y > k {
                return Err(Error::Validation(format!(
                    "label {y} at pixel ({i}, {j}) outside 1..={k}"
                )));
            }
        }
        Ok(Self {
            values,
            k_classes: k,
        })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn values(&self) -> &Array2<usize> {
        &self.values
    }

    /// Label (1-based) at pixel `(i, j)`.
    pub fn label(&self, i: usize, j: usize) -> usize {
        self.values[(i, j)]
    }
}

/// The K x K ordinal penalty matrix with entries `max(0, |r - s| - 1)`:
/// zero on the diagonal and the first off-diagonals, growing with ordinal
/// distance beyond that.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn k_classes(&self) -> usize {
        self.entries.dim().0
    }

    /// Cost between classes `r` and `s` (1-based).
    pub fn cost(&self, r: usize, s: usize) -> f64 {
        self.entries[(r - 1, s - 1)]
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }
}

/// Builds the ordinal cost matrix for `config`.
pub fn cost_matrix(config: ClassConfig) -> CostMatrix {
    let k = config.k_classes();
    let entries = Array2::from_shape_fn((k, k), |(r, s)| {
        let gap = (r as f64 - s as f64).abs() - 1.0;
        gap.max(0.0)
    });
    CostMatrix { entries }
}

/// A labeled dataset: images (`H x W x B` arrays) with their label maps.
#[derive(Debug, Clone)]
pub struct Batch {
    images: Vec<Array3<f64>>,
    labels: Vec<LabelMap>,
}

impl Batch {
    pub fn new(images: Vec<Array3<f64>>, labels: Vec<LabelMap>) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Validation(format!(
                "batch needs matching, nonempty image/label lists (got {} images, {} labels)",
                images.len(),
                labels.len()
            )));
        }
        let (h, w, b) = images[0].dim();
        let k = labels[0].k_classes();
        for (n, (img, lab)) in images.iter().zip(&labels).enumerate() {
            if img.dim() != (h, w, b) {
                return Err(Error::Validation(format!(
                    "image {n} has shape {:?}, expected {:?}",
                    img.dim(),
                    (h, w, b)
                )));
            }
            if lab.height() != h || lab.width() != w || lab.k_classes() != k {
                return Err(Error::Validation(format!(
                    "label map {n} does not match batch dimensions"
                )));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Array3<f64>] {
        &self.images
    }

    pub fn labels(&self) -> &[LabelMap] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.images[0].dim().0
    }

    pub fn width(&self) -> usize {
        self.images[0].dim().1
    }

    pub fn k_classes(&self) -> usize {
        self.labels[0].k_classes()
    }
}

/// Numerically stabilized per-pixel softmax kernel. Shared by [`softmax`]
/// and the differentiation engine so both paths produce identical values.
pub(crate) fn softmax_kernel(logits: &Array3<f64>) -> Array3<f64> {
    let (h, w, k) = logits.dim();
    let mut out = Array3::zeros((h, w, k));
    for i in 0..h {
        for j in 0..w {
            let row = logits.slice(ndarray::s![i, j, ..]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..k {
                let e = (row[c] - max).exp();
                out[(i, j, c)] = e;
                sum += e;
            }
            for c in 0..k {
                out[(i, j, c)] /= sum;
            }
        }
    }
    out
}

/// Per-pixel softmax, stabilized by max-subtraction.
pub fn softmax(logits: &LogitMap) -> ProbMap {
    // LogitMap is finite by construction, so the kernel output satisfies
    // the ProbMap invariants.
    ProbMap {
        values: softmax_kernel(logits.values()),
    }
}

/// One-hot encoding of a label map: exactly one 1 per pixel.
pub fn one_hot(labels: &LabelMap, config: ClassConfig) -> Result<ProbMap> {
    if labels.k_classes() != config.k_classes() {
        return Err(Error::Validation(format!(
            "label map has K={}, config has K={}",
            labels.k_classes(),
            config.k_classes()
        )));
    }
    let (h, w) = (labels.height(), labels.width());
    let mut values = Array3::zeros((h, w, config.k_classes()));
    for ((i, j), &y) in labels.values().indexed_iter() {
        values[(i, j, y - 1)] = 1.0;
    }
    Ok(ProbMap { values })
}

/// All unordered class pairs `{k1, k2}` with `|k1 - k2| > 1`, each once,
/// as `(k1, k2)` with `k1 < k2`, in lexicographic order.
pub fn nonadjacent_pairs(config: ClassConfig) -> Vec<(usize, usize)> {
    let k = config.k_classes();
    let mut pairs = Vec::new();
    for k1 in 1..=k {
        for k2 in (k1 + 2)..=k {
            pairs.push((k1, k2));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn config(k: usize) -> ClassConfig {
        ClassConfig::new(k).unwrap()
    }

    #[test]
    fn class_config_rejects_k_below_two() {
        assert!(ClassConfig::new(1).is_err());
        assert!(ClassConfig::new(0).is_err());
        assert!(ClassConfig::new(2).is_ok());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let logits = LogitMap::new(arr3(&[[[0.0, 0.0, 0.0]]])).unwrap();
        let probs = softmax(&logits);
        for c in 1..=3 {
            assert!((probs.prob(0, 0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_peak_follows_largest_logit() {
        for t in [-40.0, 0.0, 3.5] {
            let logits = LogitMap::new(arr3(&[[[t, t + 2.0, t]]])).unwrap();
            let probs = softmax(&logits);
            assert!(probs.prob(0, 0, 2) > probs.prob(0, 0, 1));
            assert!(probs.prob(0, 0, 2) > probs.prob(0, 0, 3));
        }
    }

    #[test]
    fn softmax_hand_value() {
        // logits (0, ln 3): e^0 = 1, e^{ln 3} = 3, so probs (1/4, 3/4).
        let logits = LogitMap::new(arr3(&[[[0.0, 3.0_f64.ln()]]])).unwrap();
        let probs = softmax(&logits);
        assert!((probs.prob(0, 0, 1) - 0.25).abs() < 1e-12);
        assert!((probs.prob(0, 0, 2) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn logit_map_rejects_non_finite() {
        let err = LogitMap::new(arr3(&[[[0.0, f64::NAN]]])).unwrap_err();
        assert!(err.to_string().contains("(0, 0)"));
    }

    #[test]
    fn cost_matrix_hand_values() {
        let c = cost_matrix(config(4));
        assert_eq!(c.cost(1, 4), 2.0);
        assert_eq!(c.cost(2, 3), 0.0);
        assert_eq!(c.cost(3, 3), 0.0);
        let c2 = cost_matrix(config(2));
        assert!(c2.entries().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_hand_values() {
        let labels = LabelMap::new(ndarray::arr2(&[[2]]), config(3)).unwrap();
        let p = one_hot(&labels, config(3)).unwrap();
        assert_eq!(p.values().as_slice().unwrap(), &[0.0, 1.0, 0.0]);

        let labels = LabelMap::new(ndarray::arr2(&[[1], [3]]), config(3)).unwrap();
        let p = one_hot(&labels, config(3)).unwrap();
        assert_eq!(p.prob(0, 0, 1), 1.0);
        assert_eq!(p.prob(1, 0, 3), 1.0);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let err = LabelMap::new(ndarray::arr2(&[[4]]), config(3)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = LabelMap::new(ndarray::arr2(&[[0]]), config(3)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn nonadjacent_pairs_hand_values() {
        assert_eq!(nonadjacent_pairs(config(3)), vec![(1, 3)]);
        assert!(nonadjacent_pairs(config(2)).is_empty());
        assert_eq!(
            nonadjacent_pairs(config(5)),
            vec![(1, 3), (1, 4), (1, 5), (2, 4), (2, 5), (3, 5)]
        );
    }

    #[test]
    fn prob_map_rejects_bad_rows() {
        assert!(ProbMap::new(arr3(&[[[0.5, 0.6]]])).is_err());
        assert!(ProbMap::new(arr3(&[[[-0.1, 1.1]]])).is_err());
        assert!(ProbMap::new(arr3(&[[[0.25, 0.75]]])).is_ok());
    }
}
