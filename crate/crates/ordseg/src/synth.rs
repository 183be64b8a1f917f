//! Deterministic synthetic ordinal scenes: nested layered structures whose
//! ground truth is structurally consistent by construction (4-neighbor label
//! jumps never exceed 1), with Gaussian observation noise on the image only.
//!
//! Randomness comes from ChaCha8 seeded per scene, with uniform doubles
//! drawn from the top 53 bits and normals via the Box-Muller transform, so
//! datasets are reproducible bit-for-bit from the seed alone.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::metrics::{cs_metric, CS_EPSILON};
use crate::model::{Batch, ClassConfig, LabelMap};

/// Layer layout of a generated scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    /// Nested circular rings around a jittered center; class K innermost.
    ConcentricRings,
    /// K horizontal bands, top to bottom, with randomized heights.
    HorizontalBands,
    /// Nested elliptical layers with a random per-scene aspect ratio.
    BlobLayers,
}

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub k_classes: usize,
    pub geometry: Geometry,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Uniform double in `[0, 1)` from the top 53 bits of one `u64` draw.
fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - uniform(rng); // in (0, 1]: keeps the log finite
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform double in `[lo, hi)`.
fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

fn validate(spec: &SceneSpec) -> Result<()> {
    ClassConfig::new(spec.k_classes)?;
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Geometry("scene needs a nonempty grid".into()));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::Geometry(format!(
            "noise_sigma must be nonnegative, got {}",
            spec.noise_sigma
        )));
    }
    Ok(())
}

/// Generates one scene: a single-channel image (`H x W x 1`) whose base
/// intensity is `(k - 1) / (K - 1)` plus Gaussian noise, and its label map.
/// Deterministic for a fixed spec.
pub fn generate(spec: &SceneSpec) -> Result<(Array3<f64>, LabelMap)> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = match spec.geometry {
        Geometry::HorizontalBands => bands_labels(spec, &mut rng)?,
        Geometry::ConcentricRings => ring_labels(spec, &mut rng)?,
        Geometry::BlobLayers => blob_labels(spec, &mut rng)?,
    };
    let config = ClassConfig::new(spec.k_classes)?;
    let label_map = LabelMap::new(labels, config)?;

    // Consistency is guaranteed by construction; verify anyway so a broken
    // layout can never leak into an experiment.
    let mut present = vec![false; spec.k_classes];
    for &y in label_map.values().iter() {
        present[y - 1] = true;
    }
    if present.iter().any(|p| !p) {
        return Err(Error::Geometry(format!(
            "grid {}x{} too small for {} layers (a class is empty)",
            spec.height, spec.width, spec.k_classes
        )));
    }
    let cs = cs_metric(&label_map, CS_EPSILON)?;
    if cs != 0.0 {
        return Err(Error::Geometry(
            "generated labels violate structural consistency".into(),
        ));
    }

    let k1 = (spec.k_classes - 1) as f64;
    let mut image = Array3::zeros((spec.height, spec.width, 1));
    for i in 0..spec.height {
        for j in 0..spec.width {
            let base = (label_map.label(i, j) - 1) as f64 / k1;
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * normal(&mut rng)
            } else {
                0.0
            };
            image[(i, j, 0)] = base + noise;
        }
    }
    Ok((image, label_map))
}

fn bands_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Array2<usize>> {
    let (h, w, k) = (spec.height, spec.width, spec.k_classes);
    if h < k {
        return Err(Error::Geometry(format!(
            "{h} rows cannot hold {k} horizontal bands"
        )));
    }
    // Every band gets one row; spare rows land in uniformly chosen bands.
    let mut heights = vec![1usize; k];
    for _ in 0..(h - k) {
        let band = (uniform(rng) * k as f64) as usize;
        heights[band.min(k - 1)] += 1;
    }
    let mut labels = Array2::zeros((h, w));
    let mut row = 0;
    for (band, &count) in heights.iter().enumerate() {
        for _ in 0..count {
            for j in 0..w {
                labels[(row, j)] = band + 1;
            }
            row += 1;
        }
    }
    Ok(labels)
}

/// Nested circular layers around a jittered center: label = 1 + number of
/// enclosing boundaries. Radius gaps stay above the largest per-step metric
/// change so 4-neighbors never cross two boundaries. Middle annuli are kept
/// thin (just above the consistency floor) so the intermediate ordinal
/// layers carry little evidence per pixel; the leftover radius budget goes
/// to the innermost disc.
fn ring_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Array2<usize>> {
    let (h, w, k) = (spec.height, spec.width, spec.k_classes);
    // One 4-neighbor step changes the distance by at most 1, so radius gaps
    // above 1.3 keep neighbors from ever crossing two boundaries; the
    // innermost radius must clear the worst-case offset of the pixel
    // nearest the center (0.71).
    let min_gap = 1.3;
    let min_inner = 1.5;

    let jitter = (h.min(w) as f64) / 16.0;
    let cy = (h as f64 - 1.0) / 2.0 + uniform_in(rng, -jitter, jitter);
    let cx = (w as f64 - 1.0) / 2.0 + uniform_in(rng, -jitter, jitter);

    // Outermost radius: stay inside the nearest border so the outer class
    // survives in every direction.
    let border = cy.min((h as f64 - 1.0) - cy).min(cx).min((w as f64 - 1.0) - cx);
    let r_outer = border - 0.7;
    let mut gaps = Vec::with_capacity(k.saturating_sub(2));
    for _ in 0..(k - 2) {
        gaps.push(min_gap * uniform_in(rng, 1.05, 1.35));
    }
    let needed = min_inner + gaps.iter().sum::<f64>();
    if r_outer < needed {
        return Err(Error::Geometry(format!(
            "grid {h}x{w} too small for {k} nested layers"
        )));
    }
    let mut radii = Vec::with_capacity(k - 1);
    let mut r = r_outer;
    radii.push(r);
    for gap in &gaps {
        r -= gap;
        radii.push(r);
    }

    let labels = Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let d = (dy * dy + dx * dx).sqrt();
        1 + radii.iter().filter(|&&r| d < r).count()
    });
    Ok(labels)
}

/// Scattered layered blobs on a class-1 background: each blob is a nested
/// stack (core of some top class `t`, annuli `t-1, ..., 2` around it) at a
/// random position. One blob always reaches class K so every class appears;
/// the others draw their depth at random, so cores of different ordinal
/// height share the same scene.
///
/// Consistency: annulus gaps stay above 1.35 (a 4-neighbor step moves the
/// center distance by at most 1), and distinct blobs keep their outer
/// circles at least 2.2 apart, leaving background between them.
fn blob_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Array2<usize>> {
    let (h, w, k) = (spec.height, spec.width, spec.k_classes);
    let n_blobs = if h.min(w) >= 28 { 3 } else { 2 };

    struct Blob {
        cy: f64,
        cx: f64,
        /// Outer radius of each layer, outermost (class 2) first.
        radii: Vec<f64>,
    }

    // Blobs land in distinct quadrants (randomly arranged) so separated
    // placements always exist; rejection sampling enforces the clearance.
    let mut quadrants = [(0usize, 0usize), (1, 1), (0, 1), (1, 0)];
    if uniform(rng) < 0.5 {
        quadrants.swap(0, 2);
        quadrants.swap(1, 3);
    }
    if uniform(rng) < 0.5 {
        quadrants.swap(0, 1);
    }

    let mut blobs: Vec<Blob> = Vec::with_capacity(n_blobs);
    for index in 0..n_blobs {
        // The first blob carries the full class stack; the rest stay
        // shallower so mixed-depth cores share the scene.
        let top = if index == 0 {
            k
        } else {
            usize_in_rng(rng, 2, k.max(3) - 1)
        };
        let core = uniform_in(rng, 1.3, 1.8);
        let mut radii = Vec::with_capacity(top - 1);
        let mut r = core;
        radii.push(r);
        for _ in 0..(top - 2) {
            r += uniform_in(rng, 1.35, 1.55);
            radii.push(r);
        }
        radii.reverse(); // outermost first
        let outer = radii[0];
        let (qy, qx) = quadrants[index % 4];
        let mid_y = (h as f64 - 1.0) / 2.0;
        let mid_x = (w as f64 - 1.0) / 2.0;
        let (lo_y, hi_y) = if qy == 0 {
            (outer + 0.8, mid_y - 1.0)
        } else {
            (mid_y + 1.0, (h as f64 - 1.0) - outer - 0.8)
        };
        let (lo_x, hi_x) = if qx == 0 {
            (outer + 0.8, mid_x - 1.0)
        } else {
            (mid_x + 1.0, (w as f64 - 1.0) - outer - 0.8)
        };
        if lo_y >= hi_y || lo_x >= hi_x {
            return Err(Error::Geometry(format!(
                "grid {h}x{w} too small for {k}-deep blobs"
            )));
        }
        let mut placed = None;
        for _ in 0..500 {
            let cy = uniform_in(rng, lo_y, hi_y);
            let cx = uniform_in(rng, lo_x, hi_x);
            let clear = blobs.iter().all(|b| {
                let b_outer = b.radii[0];
                let dy = b.cy - cy;
                let dx = b.cx - cx;
                (dy * dy + dx * dx).sqrt() >= b_outer + outer + 2.2
            });
            if clear {
                placed = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = placed else {
            return Err(Error::Geometry(format!(
                "grid {h}x{w} cannot hold {n_blobs} separated blobs"
            )));
        };
        blobs.push(Blob { cy, cx, radii });
    }

    let labels = Array2::from_shape_fn((h, w), |(i, j)| {
        for blob in &blobs {
            let dy = i as f64 - blob.cy;
            let dx = j as f64 - blob.cx;
            let d = (dy * dy + dx * dx).sqrt();
            let enclosing = blob.radii.iter().filter(|&&r| d < r).count();
            if enclosing > 0 {
                return 1 + enclosing;
            }
        }
        1
    });
    Ok(labels)
}

fn usize_in_rng(rng: &mut ChaCha8Rng, lo: usize, hi_inclusive: usize) -> usize {
    lo + (rng.next_u64() % (hi_inclusive - lo + 1) as u64) as usize
}

/// A batch of `count` scenes with per-scene seeds `seed + index`. Two calls
/// with the same spec produce identical batches.
pub fn make_dataset(spec: &SceneSpec, count: usize) -> Result<Batch> {
    if count == 0 {
        return Err(Error::Validation("dataset needs at least 1 scene".into()));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for index in 0..count {
        let scene_spec = SceneSpec {
            seed: spec.seed.wrapping_add(index as u64),
            ..*spec
        };
        let (image, label_map) = generate(&scene_spec)?;
        images.push(image);
        labels.push(label_map);
    }
    Batch::new(images, labels)
}
