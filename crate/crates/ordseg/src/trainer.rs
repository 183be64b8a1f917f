//! Desk-scale training harness: a small convolutional encoder-decoder,
//! Adam, early stopping on validation loss, k-fold cross-validation over a
//! fixed held-out test set, and a grid runner that aggregates fold metrics
//! into intervals and compares configurations.
//!
//! A run is deterministic given its seed and single-threaded execution:
//! model init and shuffling use ChaCha8 streams derived from the seed, and
//! every reduction happens in a fixed order.

use ndarray::{Array1, Array3, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::Objective;
use crate::metrics::{cs_metric, decode_argmax, dice, up_metric, MetricReport, CS_EPSILON};
use crate::model::{cost_matrix, softmax_kernel, Batch, ClassConfig, CostMatrix};
use crate::stats::{compare_intervals, fold_interval, ComparisonVerdict, Interval, StdMode};

/// Minimum decrease of the validation loss that counts as an improvement
/// for early stopping.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

/// Training protocol constants. Defaults follow the evaluation protocol:
/// Adam at 1e-4, batches of 16, up to 200 epochs with patience 15, 5 folds,
/// and the lambda grid {0.1, 1, 10, 100, 1000, 10000}.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            patience: 15,
            lambda_grid: vec![0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0],
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("folds", self.folds),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One named parameter tensor of the segmenter.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// A small convolutional encoder-decoder: two pooling stages, two
/// upsampling stages with skip connections, and a 1x1 projection to K
/// logits. Roughly 1e4 parameters at the default widths.
#[derive(Debug, Clone)]
pub struct SegModel {
    params: Vec<Param>,
    in_channels: usize,
    k_classes: usize,
}

impl SegModel {
    /// He-initialized model for `in_channels`-channel images and K classes.
    pub fn new(in_channels: usize, k_classes: usize, seed: u64) -> Result<Self> {
        ClassConfig::new(k_classes)?;
        let widths = (8usize, 16usize, 16usize);
        let (c1, c2, c3) = widths;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let mut params = Vec::new();
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize| {
            let scale = (2.0 / (cin * k * k) as f64).sqrt();
            let weight = Array4::from_shape_fn((cout, cin, k, k), |_| scale * normal(&mut rng));
            params.push(Param { name: format!("{name}.weight"), value: weight.into_dyn() });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Array1::<f64>::zeros(cout).into_dyn(),
            });
        };
        conv("enc1", in_channels, c1, 3);
        conv("enc2", c1, c2, 3);
        conv("bottleneck", c2, c3, 3);
        conv("dec1", c3 + c2, c2, 3);
        conv("dec2", c2 + c1, c1, 3);
        conv("head", c1, k_classes, 1);
        Ok(Self { params, in_channels, k_classes })
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    fn snapshot(&self) -> Vec<ArrayD<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    fn restore(&mut self, snapshot: &[ArrayD<f64>]) {
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value = s.clone();
        }
    }

    /// Registers the parameters on a tape for one forward/backward pass.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        BoundModel { vars, in_channels: self.in_channels }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Model parameters bound to one tape; forwards any number of images.
pub struct BoundModel<'t> {
    vars: Vec<Var<'t>>,
    in_channels: usize,
}

impl<'t> BoundModel<'t> {
    /// Forward pass for one `H x W x B` image; H and W must be multiples
    /// of 4. Returns `H x W x K` logits.
    pub fn forward(&self, tape: &'t Tape, image: &Array3<f64>) -> Result<Var<'t>> {
        let (h, w, b) = image.dim();
        if b != self.in_channels {
            return Err(Error::Validation(format!(
                "image has {b} channels, model expects {}",
                self.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Validation(format!(
                "image dimensions {h}x{w} must be multiples of 4 for two pooling stages"
            )));
        }
        let chw = image.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
        let input = tape.constant(chw.into_dyn());
        let v = &self.vars;
        let x1 = input.conv2d(v[0], v[1]).relu();
        let x2 = x1.avg_pool2().conv2d(v[2], v[3]).relu();
        let xb = x2.avg_pool2().conv2d(v[4], v[5]).relu();
        let d1 = xb.upsample2().concat_channels(x2).conv2d(v[6], v[7]).relu();
        let d2 = d1.upsample2().concat_channels(x1).conv2d(v[8], v[9]).relu();
        let logits = d2.conv2d(v[10], v[11]);
        Ok(logits.chw_to_hwc())
    }

    /// Gradients per parameter after a backward pass (zeros when a
    /// parameter is unreachable from the loss).
    pub fn gradients(&self, tape: &Tape) -> Vec<ArrayD<f64>> {
        self.vars
            .iter()
            .map(|v| tape.grad(*v).unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim())))
            .collect()
    }
}

/// Adam with the standard moment parameters (0.9, 0.999) and epsilon 1e-8.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Param]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[ArrayD<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut param.value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

/// Index partition of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `n` samples into a fixed 20% test set plus `folds` rotations of
/// the remaining 80% into train/validation. Deterministic per seed;
/// partitions are disjoint and exhaustive.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::Partition(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if n < 2 * folds {
        return Err(Error::Partition(format!(
            "{n} samples are too few for {folds} folds (need at least {})",
            2 * folds
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
    let test_size = ((n as f64) * 0.2).round().max(1.0) as usize;
    let (test, rest) = indices.split_at(test_size);
    if rest.len() < folds {
        return Err(Error::Partition(format!(
            "{} samples after the test split cannot fill {folds} folds",
            rest.len()
        )));
    }
    let base = rest.len() / folds;
    let extra = rest.len() % folds;
    let mut chunks: Vec<Vec<usize>> = Vec::with_capacity(folds);
    let mut cursor = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        chunks.push(rest[cursor..cursor + size].to_vec());
        cursor += size;
    }
    let splits = (0..folds)
        .map(|f| {
            let validation = chunks[f].clone();
            let train = chunks
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            FoldSplit { train, validation, test: test.to_vec() }
        })
        .collect();
    Ok(splits)
}

/// Train/validation losses of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of one training run: the loss curve, the restored best epoch,
/// the held-out test metrics, and the wall-clock time (never serialized
/// into result files).
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub test_metrics: MetricReport,
    pub mean_test_variance: f64,
    pub wall_clock_secs: f64,
}

fn mean_image_loss<'t>(
    tape: &'t Tape,
    bound: &BoundModel<'t>,
    data: &Batch,
    indices: &[usize],
    objective: &Objective,
    cost: &CostMatrix,
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for &index in indices {
        let logits = bound.forward(tape, &data.images()[index])?;
        let probs = logits.softmax();
        let loss = objective.node(probs, &data.labels()[index], cost)?;
        total = Some(match total {
            Some(t) => t.add(loss),
            None => loss,
        });
    }
    Ok(total
        .expect("nonempty index list")
        .scale(1.0 / indices.len() as f64))
}

/// Trains `model` on the fold's train split, early-stops on its validation
/// split, restores the best-validation parameters, and evaluates the test
/// split. Deterministic given the seed.
pub fn train(
    model: &mut SegModel,
    data: &Batch,
    split: &FoldSplit,
    objective: &Objective,
    config: &TrainConfig,
) -> Result<RunRecord> {
    config.validate()?;
    objective.validate()?;
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::Partition("fold has an empty partition".into()));
    }
    let start = std::time::Instant::now();
    let cost = cost_matrix(ClassConfig::new(model.k_classes())?);
    let mut optimizer = Adam::new(config.learning_rate, model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x2545_F491_4F6C_DD1D);

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.snapshot();
    let mut stale = 0usize;
    let mut epochs = Vec::new();

    for epoch in 1..=config.max_epochs {
        let mut order = split.train.clone();
        for i in (1..order.len()).rev() {
            let j = (shuffle_rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut train_loss_sum = 0.0;
        for minibatch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let loss = mean_image_loss(&tape, &bound, data, minibatch, objective, &cost)?;
            let loss_value = loss.scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged (non-finite) at epoch {epoch}"
                )));
            }
            train_loss_sum += loss_value * minibatch.len() as f64;
            tape.backward(loss)?;
            let grads = bound.gradients(&tape);
            optimizer.step(&mut model.params, &grads);
        }
        let train_loss = train_loss_sum / split.train.len() as f64;

        let tape = Tape::new();
        let bound = model.bind(&tape);
        let val_loss =
            mean_image_loss(&tape, &bound, data, &split.validation, objective, &cost)?
                .scalar_value();
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "validation loss diverged (non-finite) at epoch {epoch}"
            )));
        }
        epochs.push(EpochRecord { epoch, train_loss, val_loss });

        if val_loss < best_val - IMPROVEMENT_EPS {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model.snapshot();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    model.restore(&best_params);

    let (test_metrics, mean_test_variance) = evaluate(model, data, &split.test)?;
    Ok(RunRecord {
        epochs,
        selected_epoch: best_epoch,
        test_metrics,
        mean_test_variance,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Mean test metrics over a set of images, plus the mean per-pixel ordinal
/// variance of the predicted distributions.
pub fn evaluate(model: &SegModel, data: &Batch, indices: &[usize]) -> Result<(MetricReport, f64)> {
    if indices.is_empty() {
        return Err(Error::Validation("evaluation needs at least one image".into()));
    }
    let config = ClassConfig::new(model.k_classes())?;
    let mut dice_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut up_sum = 0.0;
    let mut per_class_sum = vec![0.0; model.k_classes()];
    let mut var_sum = 0.0;
    let mut var_count = 0usize;
    for &index in indices {
        let probs = predict(model, &data.images()[index])?;
        let pred = decode_argmax(&probs);
        let gt = &data.labels()[index];
        let (macro_dice, per_class) = dice(&pred, gt, config)?;
        dice_sum += macro_dice;
        for (acc, d) in per_class_sum.iter_mut().zip(&per_class) {
            *acc += d;
        }
        cs_sum += cs_metric(&pred, CS_EPSILON)?;
        up_sum += up_metric(&probs);
        let values = probs.values();
        let (h, w, k) = values.dim();
        let mut row = vec![0.0; k];
        for i in 0..h {
            for j in 0..w {
                for (c, r) in row.iter_mut().enumerate() {
                    *r = values[(i, j, c)];
                }
                var_sum += crate::loss::pointwise::ordinal_variance(&row);
                var_count += 1;
            }
        }
    }
    let n = indices.len() as f64;
    let per_class: Vec<f64> = per_class_sum.iter().map(|s| s / n).collect();
    Ok((
        MetricReport::new(dice_sum / n, cs_sum / n, Some(up_sum / n), &per_class),
        var_sum / var_count as f64,
    ))
}

/// Softmax predictions of the current model for one image (no gradients).
pub fn predict(model: &SegModel, image: &Array3<f64>) -> Result<crate::model::ProbMap> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let logits = bound.forward(&tape, image)?;
    let value = logits.value();
    let logits3 = value.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
    crate::model::ProbMap::new(softmax_kernel(&logits3))
}

/// One configuration's aggregate over all folds.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub label: String,
    pub records: Vec<RunRecord>,
    pub dice: Interval,
    pub cs: Interval,
    pub up: Interval,
}

/// Interval comparison of one candidate against the baseline on one metric,
/// evaluated on a higher-is-better scale (CS is negated).
#[derive(Debug, Clone)]
pub struct GridComparison {
    pub metric: &'static str,
    pub baseline: String,
    pub candidate: String,
    pub verdict: ComparisonVerdict,
}

/// Results of a grid run: one row per objective, plus comparisons of every
/// non-baseline row against the first row.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub comparisons: Vec<GridComparison>,
}

/// Trains every objective on every fold of a shared split and aggregates
/// fold metrics into intervals. The first objective acts as the baseline
/// for the emitted comparisons.
pub fn grid_run(data: &Batch, objectives: &[Objective], config: &TrainConfig) -> Result<GridResult> {
    if objectives.is_empty() {
        return Err(Error::Usage("grid_run needs at least one objective".into()));
    }
    config.validate()?;
    let splits = kfold_split(data.len(), config.folds, config.seed)?;
    let in_channels = data.images()[0].dim().2;
    let mut rows = Vec::with_capacity(objectives.len());
    for objective in objectives {
        let mut records = Vec::with_capacity(splits.len());
        for split in &splits {
            let mut model = SegModel::new(in_channels, data.k_classes(), config.seed)?;
            records.push(train(&mut model, data, split, objective, config)?);
        }
        let dice_scores: Vec<f64> =
            records.iter().map(|r| r.test_metrics.dice_percent).collect();
        let cs_scores: Vec<f64> = records.iter().map(|r| r.test_metrics.cs_percent).collect();
        let up_scores: Vec<f64> = records
            .iter()
            .map(|r| r.test_metrics.up_percent.expect("trainer always computes UP"))
            .collect();
        rows.push(GridRow {
            label: objective.label(),
            records,
            dice: fold_interval(&dice_scores, StdMode::Population)?,
            cs: fold_interval(&cs_scores, StdMode::Population)?,
            up: fold_interval(&up_scores, StdMode::Population)?,
        });
    }
    let mut comparisons = Vec::new();
    let baseline = &rows[0];
    for row in rows.iter().skip(1) {
        let pairs: [(&'static str, &Interval, &Interval); 3] = [
            ("dice", &baseline.dice, &row.dice),
            ("cs", &baseline.cs, &row.cs),
            ("up", &baseline.up, &row.up),
        ];
        for (metric, base, cand) in pairs {
            // Compare on a higher-is-better scale; CS flips sign.
            let (b, c) = if metric == "cs" {
                (
                    Interval::new(-base.mu, base.sigma, base.n_folds)?,
                    Interval::new(-cand.mu, cand.sigma, cand.n_folds)?,
                )
            } else {
                (*base, *cand)
            };
            comparisons.push(GridComparison {
                metric,
                baseline: baseline.label.clone(),
                candidate: row.label.clone(),
                verdict: compare_intervals(&b, &c, crate::stats::DEFAULT_RHO_THRESHOLD)?,
            });
        }
    }
    Ok(GridResult { rows, comparisons })
}
