//! Synthetic dataset generator: colored-rectangle images with latent-class
//! regions and unit-sphere blob features.
//!
//! Real curation pipelines mine region proposals and embed them with a
//! pretrained image/text tower; at desk scale this module stands in for
//! both. Each image contains `regions_per_image` axis-aligned rectangles,
//! one per grid cell, whose fill color is keyed to a latent class; each
//! region also receives a feature vector drawn as `normalize(μ_class + σ·g)`
//! around a fixed unit-sphere class mean. Clustering those features should
//! rediscover the latent classes, and an encoder trained on the rendered
//! pixels can separate them by color.
//!
//! Images are never stored: `render_record` deterministically regenerates
//! the pixels of any manifest record from its regions and labels, so the
//! manifest plus this module *is* the dataset.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::region::{ImageRecord, Region};
use crate::rng::{derive_seed, rng_from_seed, stream};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Background gray level of rendered images.
pub const BACKGROUND_LEVEL: f64 = 0.08;
/// Saturation/value of the class hue palette.
pub const PALETTE_SATURATION: f64 = 0.75;
pub const PALETTE_VALUE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of latent classes G.
    pub classes: usize,
    pub images: usize,
    pub regions_per_image: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Dimension of the per-region feature vectors.
    pub feature_dim: usize,
    /// Std-dev of the Gaussian perturbation around each class mean before
    /// re-normalization; smaller means tighter, easier-to-cluster blobs.
    pub feature_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 16,
            images: 250,
            regions_per_image: 4,
            image_h: 32,
            image_w: 32,
            feature_dim: 64,
            feature_noise: 0.25,
        }
    }
}

impl SynthConfig {
    /// Regions are laid out one per cell on a √N × √N grid.
    pub fn cells_per_side(&self) -> usize {
        (self.regions_per_image as f64).sqrt().ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 latent classes, got {}",
                self.classes
            )));
        }
        if self.images == 0 || self.regions_per_image == 0 {
            return Err(Error::config("images and regions_per_image must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::config("feature_noise must be finite and non-negative"));
        }
        let cps = self.cells_per_side();
        if self.image_h / cps < 4 || self.image_w / cps < 4 {
            return Err(Error::config(format!(
                "image {}x{} too small for {} regions (each grid cell needs 4+ pixels per side)",
                self.image_h, self.image_w, self.regions_per_image
            )));
        }
        Ok(())
    }
}

/// Everything the generator produces for one (config, seed) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub records: Vec<ImageRecord>,
    /// One row per region, manifest traversal order (image-major).
    pub features: Array2<f32>,
    /// The G unit-norm class means the features were drawn around.
    pub class_means: Array2<f64>,
}

/// Unit-norm Gaussian class means, fixed by (seed, dim, classes).
pub fn class_means(classes: usize, dim: usize, seed: u64) -> Result<Array2<f64>> {
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::SYNTH_CLASS_MEANS]));
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut means = Array2::from_shape_fn((classes, dim), |_| normal.sample(&mut rng));
    crate::linalg::l2_normalize_rows(&mut means)?;
    Ok(means)
}

/// Generates the full synthetic dataset. Latent classes are assigned
/// round-robin over the global region index, so classes are exactly
/// balanced and any two consecutive regions differ in class.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    config.validate()?;
    let means = class_means(config.classes, config.feature_dim, seed)?;
    let mut geom_rng = rng_from_seed(derive_seed(seed, &[stream::SYNTH_GEOMETRY]));
    let mut feat_rng = rng_from_seed(derive_seed(seed, &[stream::SYNTH_FEATURES]));
    let normal = Normal::new(0.0, 1.0).expect("valid std");

    let cps = config.cells_per_side();
    let cell_h = config.image_h / cps;
    let cell_w = config.image_w / cps;
    let total_regions = config.images * config.regions_per_image;
    let mut features = Array2::<f32>::zeros((total_regions, config.feature_dim));
    let mut records = Vec::with_capacity(config.images);

    let mut global = 0usize;
    for i in 0..config.images {
        let mut regions = Vec::with_capacity(config.regions_per_image);
        for r in 0..config.regions_per_image {
            let class = global % config.classes;
            // Rectangle inset randomly into its own grid cell; insets stay
            // below half the cell so the box never collapses.
            let cell_row = r / cps;
            let cell_col = r % cps;
            let y_base = cell_row * cell_h;
            let x_base = cell_col * cell_w;
            let y0 = y_base + geom_rng.random_range(0..=cell_h / 4);
            let y1 = y_base + cell_h - geom_rng.random_range(0..=cell_h / 4);
            let x0 = x_base + geom_rng.random_range(0..=cell_w / 4);
            let x1 = x_base + cell_w - geom_rng.random_range(0..=cell_w / 4);
            regions.push(Region::object(
                crate::region::BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32),
                class,
            ));

            let mut row = features.row_mut(global);
            let mut sq = 0.0f64;
            let raw: Vec<f64> = (0..config.feature_dim)
                .map(|d| means[[class, d]] + config.feature_noise * normal.sample(&mut feat_rng))
                .collect();
            for &v in &raw {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::numeric("degenerate synthetic feature"));
            }
            for (d, &v) in raw.iter().enumerate() {
                row[d] = (v / norm) as f32;
            }
            global += 1;
        }
        let record = ImageRecord {
            image_id: format!("synth-{seed:016x}-{i:06}"),
            h: config.image_h as u32,
            w: config.image_w as u32,
            regions,
        };
        record.validate(crate::region::DEFAULT_MAX_OCR_TOKENS)?;
        records.push(record);
    }
    Ok(SynthOutput {
        records,
        features,
        class_means: means,
    })
}

/// Hue-wheel color of one class among `classes`.
pub fn class_color(class: usize, classes: usize) -> Result<[f64; 3]> {
    if class >= classes {
        return Err(Error::validation(format!(
            "class {class} outside palette of {classes}"
        )));
    }
    Ok(hsv_to_rgb(
        class as f64 / classes as f64,
        PALETTE_SATURATION,
        PALETTE_VALUE,
    ))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministically regenerates the pixels of a manifest record: gray
/// background, then each object region filled with its label's palette
/// color in record order. The returned array is (H, W, 3) in [0, 1].
pub fn render_record<F: Real>(record: &ImageRecord, classes: usize) -> Result<Array3<F>> {
    let h = record.h as usize;
    let w = record.w as usize;
    let mut pixels = Array3::from_elem((h, w, 3), F::from_f64(BACKGROUND_LEVEL));
    for (idx, region) in record.regions.iter().enumerate() {
        let label = region.object_label.ok_or_else(|| {
            Error::validation(format!(
                "record {}: region {idx} has no object label to render",
                record.image_id
            ))
        })?;
        let rgb = class_color(label, classes)?;
        let b = &region.bbox;
        for y in b.y0 as usize..(b.y1 as usize).min(h) {
            for x in b.x0 as usize..(b.x1 as usize).min(w) {
                for (c, &v) in rgb.iter().enumerate() {
                    pixels[[y, x, c]] = F::from_f64(v);
                }
            }
        }
    }
    Ok(pixels)
}
