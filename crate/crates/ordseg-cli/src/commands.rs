//! Implementations of the subcommands; thin shells over the library.

use std::fs;
use std::path::{Path, PathBuf};
use ordseg::autodiff::Tape;
use ordseg::distance::{clamp_dt, clamp_sdf, euclidean_dt, signed_df, threshold_mask, BinaryMask};
use ordseg::error::{Error, Result};
use ordseg::io::{read_labels, read_tensor, write_labels, write_tensor};
use ordseg::loss::gradcheck::{check_loss_gradient, CheckTarget};
use ordseg::loss::{loss_node, loss_value, LossConfig, LossKind, Objective, SpatialLossConfig};
use ordseg::metrics::{cs_metric, decode_argmax, dice, up_metric};
use ordseg::model::{cost_matrix, ClassConfig, LabelMap, ProbMap};
use ordseg::stats::{compare_intervals, Interval, Relation};
use ordseg::synth::{generate, make_dataset, Geometry, SceneSpec};
use ordseg::trainer::{grid_run, GridResult, TrainConfig};

use crate::format::{percent, sig12};

/// Reads a prediction that may be a probability tensor or a label map,
/// sniffing the magic bytes.
enum Prediction {
    Probs(ProbMap),
    Labels(LabelMap),
}

fn read_prediction(path: &Path) -> Result<Prediction> {
    let mut magic = [0u8; 2];
    {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        let n = f.read(&mut magic)?;
        if n < 2 {
            return Err(Error::Format { offset: 0, message: "file too short".into() });
        }
    }
    if &magic == b"P2" {
        Ok(Prediction::Labels(read_labels(path)?))
    } else {
        let tensor = read_tensor(path)?;
        let shape = tensor.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Validation(format!(
                "prediction tensor must be H x W x K, got shape {shape:?}"
            )));
        }
        let values = tensor.into_dimensionality::<ndarray::Ix3>().expect("checked 3-d");
        Ok(Prediction::Probs(ProbMap::new(values)?))
    }
}

pub fn eval(pred: &Path, gt: &Path, epsilon: f64) -> Result<()> {
    let gt_labels = read_labels(gt)?;
    let config = ClassConfig::new(gt_labels.k_classes())?;
    let (pred_labels, up) = match read_prediction(pred)? {
        Prediction::Probs(probs) => {
            if probs.k_classes() != gt_labels.k_classes() {
                return Err(Error::Validation(format!(
                    "prediction has K={}, ground truth has K={}",
                    probs.k_classes(),
                    gt_labels.k_classes()
                )));
            }
            let up = up_metric(&probs);
            (decode_argmax(&probs), Some(up))
        }
        Prediction::Labels(labels) => (labels, None),
    };
    let (macro_dice, per_class) = dice(&pred_labels, &gt_labels, config)?;
    let cs = cs_metric(&pred_labels, epsilon)?;
    match up {
        Some(up) => println!(
            "dice={} cs={} up={}",
            percent(macro_dice * 100.0),
            percent(cs * 100.0),
            percent(up * 100.0)
        ),
        None => println!("dice={} cs={}", percent(macro_dice * 100.0), percent(cs * 100.0)),
    }
    let per: Vec<String> = per_class.iter().map(|d| percent(d * 100.0)).collect();
    println!("dice_per_class={}", per.join(","));
    Ok(())
}

pub struct LossArgs {
    pub name: String,
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub delta_conf: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_decay: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub p_exponent: Option<u32>,
    pub unsafe_params: bool,
    pub grad: Option<PathBuf>,
}

/// Builds the loss configurations from flags, enforcing the published
/// hyperparameter ranges unless `--unsafe` is given.
fn loss_configs(args: &LossArgs, kind: LossKind) -> Result<(LossConfig, SpatialLossConfig)> {
    let mut pointwise = LossConfig::default();
    let mut spatial = SpatialLossConfig::default();
    if let Some(delta) = args.delta {
        pointwise.qul_delta = delta;
        pointwise.o2_delta = delta;
    }
    if let Some(lambda) = args.lambda {
        pointwise.qul_lambda = lambda;
        pointwise.expmse_lambda = lambda;
    }
    if let Some(delta_conf) = args.delta_conf {
        spatial.delta_conf = delta_conf;
    }
    if let Some(gamma) = args.gamma {
        spatial.gamma_clamp = gamma;
    }
    if let Some(gamma_decay) = args.gamma_decay {
        spatial.gamma_decay = gamma_decay;
    }
    if let Some(gamma_hat) = args.gamma_hat {
        spatial.gamma_hat = Some(gamma_hat);
    }
    if let Some(p) = args.p_exponent {
        spatial.p_exponent = p;
    }
    pointwise.validate()?;
    spatial.validate()?;
    if !args.unsafe_params {
        let range_check = |name: &str, v: f64, lo: f64, hi: f64| -> Result<()> {
            if v < lo || v > hi {
                return Err(Error::Config(format!(
                    "{name}={v} outside the published range [{lo}, {hi}] (pass --unsafe to override)"
                )));
            }
            Ok(())
        };
        match kind {
            LossKind::Qul => {
                range_check("delta", pointwise.qul_delta, 0.05, 0.7)?;
                range_check("lambda", pointwise.qul_lambda, 0.1, 1e4)?;
            }
            LossKind::O2 => range_check("delta", pointwise.o2_delta, 0.05, 0.7)?,
            LossKind::ExpMse => range_check("lambda", pointwise.expmse_lambda, 0.1, 1e4)?,
            LossKind::Cssdf => {
                range_check("gamma-decay", spatial.gamma_decay, 0.05, 1.0)?;
            }
            LossKind::Ce | LossKind::Csnp | LossKind::Csdt => {}
        }
    }
    Ok((pointwise, spatial))
}

pub fn loss(args: LossArgs) -> Result<()> {
    let kind = LossKind::parse(&args.name)?;
    let (pointwise, spatial) = loss_configs(&args, kind)?;
    let tensor = read_tensor(&args.pred)?;
    let shape = tensor.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Validation(format!(
            "prediction tensor must be H x W x K, got shape {shape:?}"
        )));
    }
    let probs = ProbMap::new(tensor.clone().into_dimensionality::<ndarray::Ix3>().unwrap())?;
    let labels = read_labels(&args.gt)?;
    let value = loss_value(kind, &probs, &labels, &pointwise, &spatial)?;
    println!("{}", sig12(value.total));

    if let Some(grad_path) = &args.grad {
        let tape = Tape::new();
        let probs_var = tape.leaf(tensor);
        let cost = cost_matrix(ClassConfig::new(probs.k_classes())?);
        let node = loss_node(kind, probs_var, &labels, &pointwise, &spatial, &cost)?;
        tape.backward(node)?;
        let grad = tape
            .grad(probs_var)
            .unwrap_or_else(|| ndarray::ArrayD::zeros(probs.values().clone().into_dyn().raw_dim()));
        write_tensor(grad_path, &grad)?;
        eprintln!("gradient written to {}", grad_path.display());
    }
    Ok(())
}

pub fn dt(
    labels: Option<&Path>,
    pred: Option<&Path>,
    class: usize,
    delta_conf: f64,
    signed: bool,
    clamp: Option<f64>,
    out: &Path,
) -> Result<()> {
    let mask: BinaryMask = match (labels, pred) {
        (Some(path), None) => {
            let map = read_labels(path)?;
            if class < 1 || class > map.k_classes() {
                return Err(Error::Validation(format!(
                    "class {class} outside 1..={}",
                    map.k_classes()
                )));
            }
            BinaryMask::new(ndarray::Array2::from_shape_fn(
                (map.height(), map.width()),
                |(i, j)| map.label(i, j) == class,
            ))?
        }
        (None, Some(path)) => {
            let tensor = read_tensor(path)?;
            let probs = ProbMap::new(tensor.into_dimensionality::<ndarray::Ix3>().map_err(
                |_| Error::Validation("prediction tensor must be H x W x K".into()),
            )?)?;
            threshold_mask(&probs, class, delta_conf)?
        }
        _ => {
            return Err(Error::Usage(
                "pass exactly one of --labels or --pred".into(),
            ))
        }
    };
    let field = if signed {
        let sdf = signed_df(&mask)?;
        let sdf = match clamp {
            Some(gamma_hat) => clamp_sdf(&sdf, gamma_hat)?,
            None => sdf,
        };
        sdf.values()?.clone()
    } else {
        match (euclidean_dt(&mask), clamp) {
            (Ok(dt), Some(gamma)) => clamp_dt(&dt, gamma)?.values().clone(),
            (Ok(dt), None) => dt.values().clone(),
            // Empty reference set: the saturated convention substitutes the
            // constant field when a cap is available.
            (Err(Error::EmptyRegion), Some(gamma)) => {
                ordseg::distance::DistField::constant(mask.height(), mask.width(), gamma)?
                    .values()
                    .clone()
            }
            (Err(e), _) => return Err(e),
        }
    };
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    write_tensor(out, &field.into_dyn())?;
    println!("min={} max={}", sig12(lo), sig12(hi));
    Ok(())
}

fn parse_interval(text: &str) -> Result<Interval> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Validation(format!(
            "interval must be \"mu,sigma\", got '{text}'"
        )));
    }
    let mu: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("bad mean '{}'", parts[0])))?;
    let sigma: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::Validation(format!("bad deviation '{}'", parts[1])))?;
    Interval::new(mu, sigma, 1)
}

pub fn compare(a: &str, b: &str, rho: f64) -> Result<()> {
    let i1 = parse_interval(a)?;
    let i2 = parse_interval(b)?;
    let verdict = compare_intervals(&i1, &i2, rho)?;
    let relation = match verdict.relation {
        Relation::FirstInferior => "first_inferior",
        Relation::SecondInferior => "second_inferior",
        Relation::Indeterminate => "indeterminate",
    };
    if verdict.triggered.is_empty() {
        println!("{relation}");
    } else {
        let letters: Vec<String> =
            verdict.triggered.iter().map(|c| c.letter().to_string()).collect();
        println!("{relation} via {}", letters.join(","));
    }
    if let Some(rho_value) = verdict.rho {
        println!("rho={}", sig12(rho_value));
    }
    if verdict.condition_e_skipped {
        println!("condition_e=skipped (zero deviation)");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn gradcheck(
    loss: &str,
    height: usize,
    width: usize,
    k: usize,
    seed: u64,
    step: f64,
    tol: f64,
    draws: u64,
) -> Result<()> {
    let kind = LossKind::parse(loss)?;
    let mut all_passed = true;
    for draw in 0..draws {
        let report = check_loss_gradient(
            CheckTarget::Single(kind),
            height,
            width,
            k,
            seed.wrapping_add(draw),
            step,
            tol,
        )?;
        println!(
            "draw={} loss={} max_rel_error={} max_abs_error={} result={}",
            draw,
            kind.name(),
            sig12(report.max_rel_error),
            sig12(report.max_abs_error),
            if report.passed { "pass" } else { "fail" }
        );
        all_passed &= report.passed;
    }
    if !all_passed {
        return Err(Error::Numeric(
            "finite-difference check failed for at least one draw".into(),
        ));
    }
    Ok(())
}

fn parse_geometry(name: &str) -> Result<Geometry> {
    match name {
        "rings" | "concentric_rings" => Ok(Geometry::ConcentricRings),
        "bands" | "horizontal_bands" => Ok(Geometry::HorizontalBands),
        "blobs" | "blob_layers" => Ok(Geometry::BlobLayers),
        other => Err(Error::Validation(format!(
            "unknown geometry '{other}' (rings, bands, blobs)"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    geometry: &str,
    height: usize,
    width: usize,
    k: usize,
    noise: f64,
    seed: u64,
    count: usize,
    out_dir: &Path,
) -> Result<()> {
    let spec = SceneSpec {
        height,
        width,
        k_classes: k,
        geometry: parse_geometry(geometry)?,
        noise_sigma: noise,
        seed,
    };
    fs::create_dir_all(out_dir)?;
    for index in 0..count {
        let scene = SceneSpec { seed: seed.wrapping_add(index as u64), ..spec };
        let (image, labels) = generate(&scene)?;
        write_tensor(&out_dir.join(format!("image_{index:04}.otsr")), &image.into_dyn())?;
        write_labels(&out_dir.join(format!("labels_{index:04}.pgm")), &labels)?;
    }
    println!("wrote {count} scenes to {}", out_dir.display());
    Ok(())
}

pub struct TrainDemoArgs {
    pub loss: String,
    pub lambda: f64,
    pub delta: Option<f64>,
    pub qul_lambda: Option<f64>,
    pub delta_conf: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_decay: Option<f64>,
    pub gamma_hat: Option<f64>,
    pub p_exponent: Option<u32>,
    pub scenes: usize,
    pub seed: u64,
    pub geometry: String,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub noise: f64,
    pub folds: usize,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub out_dir: PathBuf,
}

fn demo_objective(args: &TrainDemoArgs) -> Result<Objective> {
    let mut pointwise = LossConfig::default();
    let mut spatial = SpatialLossConfig::default();
    if let Some(delta) = args.delta {
        pointwise.qul_delta = delta;
        pointwise.o2_delta = delta;
    }
    if let Some(l) = args.qul_lambda {
        pointwise.qul_lambda = l;
    }
    if let Some(d) = args.delta_conf {
        spatial.delta_conf = d;
    }
    if let Some(g) = args.gamma {
        spatial.gamma_clamp = g;
    }
    if let Some(g) = args.gamma_decay {
        spatial.gamma_decay = g;
    }
    if let Some(g) = args.gamma_hat {
        spatial.gamma_hat = Some(g);
    }
    if let Some(p) = args.p_exponent {
        spatial.p_exponent = p;
    }
    let ordinal = match args.loss.as_str() {
        "ce" => None,
        other => Some(LossKind::parse(other)?),
    };
    let objective = Objective {
        ordinal,
        lambda_combine: if ordinal.is_some() { args.lambda } else { 0.0 },
        pointwise,
        spatial,
    };
    objective.validate()?;
    Ok(objective)
}

pub fn train_demo(args: TrainDemoArgs) -> Result<()> {
    if args.scenes < 10 {
        return Err(Error::Validation(format!(
            "train-demo needs at least 10 scenes, got {}",
            args.scenes
        )));
    }
    let objective = demo_objective(&args)?;
    let spec = SceneSpec {
        height: args.height,
        width: args.width,
        k_classes: args.k,
        geometry: parse_geometry(&args.geometry)?,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let data = make_dataset(&spec, args.scenes)?;
    let config = TrainConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        max_epochs: args.epochs,
        patience: args.patience,
        folds: args.folds,
        seed: args.seed,
        ..Default::default()
    };
    let started = std::time::Instant::now();
    let result = grid_run(&data, &[objective], &config)?;
    write_grid_result(&args.out_dir, &result)?;
    print_grid_result(&result);
    eprintln!(
        "train-demo finished in {:.1}s; records in {}",
        started.elapsed().as_secs_f64(),
        args.out_dir.display()
    );
    Ok(())
}

/// Writes per-fold records and the aggregate table. Every byte written here
/// is a deterministic function of the data and seeds (no wall-clock).
pub fn write_grid_result(out_dir: &Path, result: &GridResult) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for row in &result.rows {
        for (fold, record) in row.records.iter().enumerate() {
            let mut text = String::new();
            text.push_str(&format!("objective={}\n", row.label));
            text.push_str(&format!("fold={fold}\n"));
            text.push_str(&format!("selected_epoch={}\n", record.selected_epoch));
            text.push_str(&format!("epochs_run={}\n", record.epochs.len()));
            text.push_str(&format!("test_dice={}\n", record.test_metrics.dice_percent));
            text.push_str(&format!("test_cs={}\n", record.test_metrics.cs_percent));
            if let Some(up) = record.test_metrics.up_percent {
                text.push_str(&format!("test_up={up}\n"));
            }
            let per: Vec<String> = record
                .test_metrics
                .per_class_dice_percent
                .iter()
                .map(|d| d.to_string())
                .collect();
            text.push_str(&format!("test_dice_per_class={}\n", per.join(",")));
            text.push_str(&format!("mean_test_variance={}\n", record.mean_test_variance));
            for epoch in &record.epochs {
                text.push_str(&format!(
                    "epoch={} train_loss={} val_loss={}\n",
                    epoch.epoch, epoch.train_loss, epoch.val_loss
                ));
            }
            let name = format!("{}_fold_{fold}.txt", row.label.replace('+', "_"));
            fs::write(out_dir.join(name), text)?;
        }
    }

    let mut csv = String::from("objective,metric,mean,std,n_folds\n");
    for row in &result.rows {
        for (metric, interval) in
            [("dice", &row.dice), ("cs", &row.cs), ("up", &row.up)]
        {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.label, metric, interval.mu, interval.sigma, interval.n_folds
            ));
        }
    }
    fs::write(out_dir.join("summary.csv"), csv)?;

    fs::write(out_dir.join("summary.txt"), render_table(result))?;
    Ok(())
}

fn render_table(result: &GridResult) -> String {
    let mut text = String::new();
    text.push_str(&format!(
        "{:<14} {:>14} {:>14} {:>14}\n",
        "objective", "dice", "cs", "up"
    ));
    for row in &result.rows {
        let cell = |i: &Interval| format!("{} ± {}", percent(i.mu), percent(i.sigma));
        text.push_str(&format!(
            "{:<14} {:>14} {:>14} {:>14}\n",
            row.label,
            cell(&row.dice),
            cell(&row.cs),
            cell(&row.up)
        ));
    }
    for comparison in &result.comparisons {
        let relation = match comparison.verdict.relation {
            Relation::FirstInferior => "first_inferior",
            Relation::SecondInferior => "second_inferior",
            Relation::Indeterminate => "indeterminate",
        };
        let letters: Vec<String> = comparison
            .verdict
            .triggered
            .iter()
            .map(|c| c.letter().to_string())
            .collect();
        let via = if letters.is_empty() {
            String::new()
        } else {
            format!(" via {}", letters.join(","))
        };
        text.push_str(&format!(
            "compare {} vs {} on {}: {relation}{via}\n",
            comparison.baseline, comparison.candidate, comparison.metric
        ));
    }
    text
}

fn print_grid_result(result: &GridResult) {
    print!("{}", render_table(result));
}
