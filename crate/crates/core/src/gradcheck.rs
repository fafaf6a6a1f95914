//! Finite-difference audits of the hand-written gradients.
//!
//! Each audit draws a random small instance at f64, computes the analytic
//! gradient, and compares every checked coordinate against a central
//! difference of the scalar objective. The worst relative error across all
//! trials is reported; callers decide pass/fail against
//! [`CheckComponent::tolerance`]. Coordinates of large tensors are strided
//! deterministically so the audit stays fast without skipping whole tensors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::encoder::{
    encode, encode_backward, encode_with_cache, region_attention, AttnParams, EncoderConfig,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, l2_normalize_backward, l2_normalize_rows};
use crate::loss::{
    object_loss, ocr_loss, sample_negatives, ClassifierState, NegativeSample, Target,
};
use crate::mask::VisibilityMask;
use crate::region::{BBox, Region};
use crate::rng::{derive_seed, rng_from_seed, stream};

/// Largest number of coordinates probed per tensor; longer tensors are
/// sampled at a uniform stride instead of exhaustively.
const MAX_COORDS_PER_TENSOR: usize = 48;

/// Which gradient path to audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckComponent {
    /// Encoder parameters against a linear probe of the region embeddings.
    Encoder,
    /// Single-positive margin loss through L2 normalization.
    ObjectLoss,
    /// Multi-positive margin loss through L2 normalization.
    OcrLoss,
    /// Pixels-to-loss composition: encoder, normalization, and both losses.
    EndToEnd,
}

impl CheckComponent {
    pub fn all() -> [CheckComponent; 4] {
        [
            CheckComponent::Encoder,
            CheckComponent::ObjectLoss,
            CheckComponent::OcrLoss,
            CheckComponent::EndToEnd,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckComponent::Encoder => "encoder",
            CheckComponent::ObjectLoss => "object-loss",
            CheckComponent::OcrLoss => "ocr-loss",
            CheckComponent::EndToEnd => "end-to-end",
        }
    }

    /// Largest acceptable relative error for this component.
    pub fn tolerance(self) -> f64 {
        match self {
            CheckComponent::Encoder => 1e-6,
            CheckComponent::ObjectLoss | CheckComponent::OcrLoss => 1e-6,
            CheckComponent::EndToEnd => 1e-5,
        }
    }

    /// Trial count used when the caller does not pick one.
    pub fn default_trials(self) -> usize {
        match self {
            CheckComponent::Encoder => 5,
            CheckComponent::ObjectLoss | CheckComponent::OcrLoss => 20,
            CheckComponent::EndToEnd => 5,
        }
    }

    fn tag(self) -> u64 {
        match self {
            CheckComponent::Encoder => 1,
            CheckComponent::ObjectLoss => 2,
            CheckComponent::OcrLoss => 3,
            CheckComponent::EndToEnd => 4,
        }
    }
}

impl fmt::Display for CheckComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "encoder" => Ok(CheckComponent::Encoder),
            "object-loss" => Ok(CheckComponent::ObjectLoss),
            "ocr-loss" => Ok(CheckComponent::OcrLoss),
            "end-to-end" => Ok(CheckComponent::EndToEnd),
            other => Err(Error::config(format!(
                "unknown check component {other:?}; expected encoder, \
                 object-loss, ocr-loss, or end-to-end"
            ))),
        }
    }
}

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub component: CheckComponent,
    pub trials: usize,
    /// Number of gradient coordinates compared across all trials.
    pub coords_checked: usize,
    /// Worst `|analytic − fd| / max(|analytic|, |fd|, 1)` seen.
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

/// Audits one gradient path over `trials` random instances and returns the
/// worst relative error observed.
pub fn grad_check(component: CheckComponent, trials: usize, seed: u64) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::config("grad check needs at least one trial"));
    }
    let mut coords_checked = 0;
    let mut max_rel_err = 0.0f64;
    for trial in 0..trials as u64 {
        let (coords, err) = match component {
            CheckComponent::Encoder => encoder_trial(trial, seed)?,
            CheckComponent::ObjectLoss => loss_trial(false, trial, seed)?,
            CheckComponent::OcrLoss => loss_trial(true, trial, seed)?,
            CheckComponent::EndToEnd => end_to_end_trial(trial, seed)?,
        };
        coords_checked += coords;
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradCheckReport {
        component,
        trials,
        coords_checked,
        max_rel_err,
        tolerance: component.tolerance(),
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Coordinates probed for a tensor of length `len`: everything when short,
/// a uniform stride otherwise.
fn probe_coords(len: usize) -> Vec<usize> {
    if len <= MAX_COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        let stride = len.div_ceil(MAX_COORDS_PER_TENSOR);
        (0..len).step_by(stride).collect()
    }
}

/// Central difference of `f` along coordinate `k` of the tensor named `name`
/// inside a parameter clone.
fn fd_param(
    params: &EncoderParams<f64>,
    name: &str,
    k: usize,
    h: f64,
    mut f: impl FnMut(&EncoderParams<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut eval_at = |delta: f64| -> Result<f64> {
        let mut p = params.clone();
        p.for_each_mut(|n, _, slice| {
            if n == name {
                slice[k] += delta;
            }
        });
        f(&p)
    };
    let plus = eval_at(h)?;
    let minus = eval_at(-h)?;
    Ok((plus - minus) / (2.0 * h))
}

// ---------------------------------------------------------------------------
// Loss audits
// ---------------------------------------------------------------------------

struct LossInstance {
    raw: Array1<f64>,
    positives: Vec<usize>,
    negatives: NegativeSample,
    state: ClassifierState<f64>,
}

impl LossInstance {
    fn eval(&self, raw: &Array1<f64>, state: &ClassifierState<f64>, ocr: bool) -> Result<f64> {
        let (unit, _) = l2_normalize(raw.view())?;
        let (loss, _) = if ocr {
            ocr_loss(unit.view(), &self.positives, &self.negatives, state)?
        } else {
            object_loss(unit.view(), self.positives[0], &self.negatives, state)?
        };
        Ok(loss)
    }
}

fn random_loss_instance(ocr: bool, trial: u64, seed: u64) -> Result<LossInstance> {
    let tag = if ocr {
        CheckComponent::OcrLoss.tag()
    } else {
        CheckComponent::ObjectLoss.tag()
    };
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::CHECK, tag, trial]));
    let k = 8 + trial as usize % 5;
    let d = 5 + trial as usize % 4;
    let scale = [8.0, 24.0, 64.0][trial as usize % 3];
    let margin = 0.3;

    let mut centers = Array2::from_shape_fn((k, d), |_| standard_normal(&mut rng));
    l2_normalize_rows(&mut centers)?;
    let ocr_offset = if ocr { 0 } else { k };
    let state = ClassifierState::new(centers, margin, scale, ocr_offset)?;

    let raw = loop {
        let v = Array1::from_shape_fn(d, |_| standard_normal(&mut rng));
        if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 0.3 {
            break v;
        }
    };

    let positives: Vec<usize> = if ocr {
        // Sampling with replacement keeps duplicate positives in play.
        (0..1 + trial as usize % 3)
            .map(|_| rng.random_range(0..k))
            .collect()
    } else {
        vec![rng.random_range(0..k)]
    };
    let negatives = sample_negatives(
        k,
        &positives,
        0.4,
        derive_seed(seed, &[stream::CHECK, tag, trial, 1]),
    )?;
    Ok(LossInstance {
        raw,
        positives,
        negatives,
        state,
    })
}

fn loss_trial(ocr: bool, trial: u64, seed: u64) -> Result<(usize, f64)> {
    let inst = random_loss_instance(ocr, trial, seed)?;
    let h = 1e-6;

    let (unit, norm) = l2_normalize(inst.raw.view())?;
    let (_, grads) = if ocr {
        ocr_loss(unit.view(), &inst.positives, &inst.negatives, &inst.state)?
    } else {
        object_loss(unit.view(), inst.positives[0], &inst.negatives, &inst.state)?
    };
    let d_raw = l2_normalize_backward(unit.view(), norm, grads.d_embedding.view());

    let mut coords = 0;
    let mut worst = 0.0f64;

    for i in 0..inst.raw.len() {
        let mut plus = inst.raw.clone();
        plus[i] += h;
        let mut minus = inst.raw.clone();
        minus[i] -= h;
        let fd = (inst.eval(&plus, &inst.state, ocr)? - inst.eval(&minus, &inst.state, ocr)?)
            / (2.0 * h);
        worst = worst.max(rel_err(d_raw[i], fd));
        coords += 1;
    }

    // Every center coordinate, including untouched centers whose analytic
    // gradient must be exactly zero.
    for id in 0..inst.state.k_total() {
        for j in 0..inst.raw.len() {
            let analytic = grads.d_centers.get(&id).map_or(0.0, |row| row[j]);
            let mut plus = inst.state.clone();
            plus.centers[[id, j]] += h;
            let mut minus = inst.state.clone();
            minus.centers[[id, j]] -= h;
            let fd = (inst.eval(&inst.raw, &plus, ocr)? - inst.eval(&inst.raw, &minus, ocr)?)
                / (2.0 * h);
            worst = worst.max(rel_err(analytic, fd));
            coords += 1;
        }
    }
    Ok((coords, worst))
}

// ---------------------------------------------------------------------------
// Encoder audit
// ---------------------------------------------------------------------------

/// Random patch-aligned bbox on a `gw` x `gh` cell grid with `patch`-pixel
/// cells.
fn random_cell_bbox(rng: &mut impl Rng, gw: usize, gh: usize, patch: usize) -> BBox {
    let cx = rng.random_range(0..gw);
    let cy = rng.random_range(0..gh);
    let cw = 1 + rng.random_range(0..gw - cx);
    let ch = 1 + rng.random_range(0..gh - cy);
    BBox::new(
        (cx * patch) as u32,
        (cy * patch) as u32,
        ((cx + cw) * patch) as u32,
        ((cy + ch) * patch) as u32,
    )
}

fn encoder_trial(trial: u64, seed: u64) -> Result<(usize, f64)> {
    let tag = CheckComponent::Encoder.tag();
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::CHECK, tag, trial]));
    let heads = 1 + trial as usize % 2;
    let dim = heads * (4 + 2 * (trial as usize % 3));
    let layers = 2 + trial as usize % 2;
    let region_layers = if layers == 3 { 1 + trial as usize % 2 } else { 1 };
    let side = 8 + 4 * (trial as usize % 3);
    let config = EncoderConfig {
        layers,
        region_layers,
        heads,
        dim,
        patch: 4,
        channels: 3,
        image_h: side,
        image_w: side,
    };
    config.validate()?;
    let params =
        EncoderParams::<f64>::init(&config, derive_seed(seed, &[stream::CHECK, tag, trial, 1]))?;

    let pixels = Array3::from_shape_fn((side, side, 3), |_| rng.random_range(0.0..1.0));
    let (gh, gw) = config.grid();
    let n_regions = 1 + trial as usize % 2;
    let regions: Vec<Region> = (0..n_regions)
        .map(|l| Region::object(random_cell_bbox(&mut rng, gw, gh, config.patch), l))
        .collect();

    // Linear probe of the raw region embeddings with fixed random weights.
    let probe = Array2::from_shape_fn((n_regions, dim), |_| standard_normal(&mut rng));
    let eval = |p: &EncoderParams<f64>| -> Result<f64> {
        let (_, rq) = encode(&pixels, &regions, p, &config)?;
        Ok((&rq.values * &probe).sum())
    };

    let (_, _, cache) = encode_with_cache(&pixels, &regions, &params, &config)?;
    let grads = encode_backward(&params, &config, &cache, &probe)?;

    let h = 1e-5;
    let mut coords = 0;
    let mut worst = 0.0f64;
    let analytic_tensors = grads.tensors();
    for (name, _, values) in &analytic_tensors {
        for &k in &probe_coords(values.len()) {
            let fd = fd_param(&params, name, k, h, eval)?;
            worst = worst.max(rel_err(values[k], fd));
            coords += 1;
        }
    }
    Ok((coords, worst))
}

// ---------------------------------------------------------------------------
// End-to-end audit
// ---------------------------------------------------------------------------

struct EndToEndInstance {
    config: EncoderConfig,
    params: EncoderParams<f64>,
    state: ClassifierState<f64>,
    pixels: Array3<f64>,
    regions: Vec<Region>,
    targets: Vec<Target>,
    negatives: Vec<NegativeSample>,
}

impl EndToEndInstance {
    /// Sum over regions of their margin losses, from pixels.
    fn eval(&self, params: &EncoderParams<f64>, state: &ClassifierState<f64>) -> Result<f64> {
        let (_, rq) = encode(&self.pixels, &self.regions, params, &self.config)?;
        let mut total = 0.0;
        for (l, target) in self.targets.iter().enumerate() {
            let (unit, _) = l2_normalize(rq.values.row(l))?;
            let (loss, _) = match target {
                Target::Object(id) => object_loss(unit.view(), *id, &self.negatives[l], state)?,
                Target::Ocr(ids) => ocr_loss(unit.view(), ids, &self.negatives[l], state)?,
            };
            total += loss;
        }
        Ok(total)
    }
}

fn random_end_to_end_instance(trial: u64, seed: u64) -> Result<EndToEndInstance> {
    let tag = CheckComponent::EndToEnd.tag();
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::CHECK, tag, trial]));
    let config = EncoderConfig {
        layers: 2,
        region_layers: 1,
        heads: 2,
        dim: 8,
        patch: 4,
        channels: 3,
        image_h: 8,
        image_w: 8,
    };
    config.validate()?;
    let params =
        EncoderParams::<f64>::init(&config, derive_seed(seed, &[stream::CHECK, tag, trial, 1]))?;

    let object_classes = 5;
    let ocr_vocab = 4;
    let mut centers = Array2::from_shape_fn((object_classes + ocr_vocab, config.dim), |_| {
        standard_normal(&mut rng)
    });
    l2_normalize_rows(&mut centers)?;
    let state = ClassifierState::new(centers, 0.3, 16.0, object_classes)?;

    let pixels = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(0.0..1.0));
    let (gh, gw) = config.grid();

    let mut regions = Vec::new();
    let mut targets = Vec::new();
    let mut negatives = Vec::new();

    let label = rng.random_range(0..object_classes);
    regions.push(Region::object(
        random_cell_bbox(&mut rng, gw, gh, config.patch),
        label,
    ));
    targets.push(Target::Object(label));
    negatives.push(sample_negatives(
        object_classes,
        &[label],
        0.6,
        derive_seed(seed, &[stream::CHECK, tag, trial, 2]),
    )?);

    if trial % 2 == 0 {
        let label = rng.random_range(0..object_classes);
        regions.push(Region::object(
            random_cell_bbox(&mut rng, gw, gh, config.patch),
            label,
        ));
        targets.push(Target::Object(label));
        negatives.push(sample_negatives(
            object_classes,
            &[label],
            0.6,
            derive_seed(seed, &[stream::CHECK, tag, trial, 3]),
        )?);
    } else {
        let tokens = vec![
            rng.random_range(0..ocr_vocab),
            rng.random_range(0..ocr_vocab),
        ];
        regions.push(Region::ocr(
            random_cell_bbox(&mut rng, gw, gh, config.patch),
            tokens.clone(),
        ));
        targets.push(Target::Ocr(
            tokens.iter().map(|&t| t + object_classes).collect(),
        ));
        negatives.push(
            sample_negatives(
                ocr_vocab,
                &tokens,
                0.5,
                derive_seed(seed, &[stream::CHECK, tag, trial, 3]),
            )?
            .offset(object_classes),
        );
    }

    Ok(EndToEndInstance {
        config,
        params,
        state,
        pixels,
        regions,
        targets,
        negatives,
    })
}

fn end_to_end_trial(trial: u64, seed: u64) -> Result<(usize, f64)> {
    let inst = random_end_to_end_instance(trial, seed)?;

    // Analytic pass: losses on normalized rows, then back through
    // normalization and the encoder.
    let (_, rq, cache) =
        encode_with_cache(&inst.pixels, &inst.regions, &inst.params, &inst.config)?;
    let mut d_rq = Array2::zeros((inst.regions.len(), inst.config.dim));
    let mut d_centers: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    for (l, target) in inst.targets.iter().enumerate() {
        let (unit, norm) = l2_normalize(rq.values.row(l))?;
        let (_, grads) = match target {
            Target::Object(id) => object_loss(unit.view(), *id, &inst.negatives[l], &inst.state)?,
            Target::Ocr(ids) => ocr_loss(unit.view(), ids, &inst.negatives[l], &inst.state)?,
        };
        let d_raw = l2_normalize_backward(unit.view(), norm, grads.d_embedding.view());
        d_rq.row_mut(l).assign(&d_raw);
        for (id, row) in grads.d_centers {
            d_centers
                .entry(id)
                .and_modify(|acc| *acc += &row)
                .or_insert(row);
        }
    }
    let param_grads = encode_backward(&inst.params, &inst.config, &cache, &d_rq)?;

    let h = 1e-5;
    let mut coords = 0;
    let mut worst = 0.0f64;

    let analytic_tensors = param_grads.tensors();
    for (name, _, values) in &analytic_tensors {
        for &k in &probe_coords(values.len()) {
            let fd = fd_param(&inst.params, name, k, h, |p| inst.eval(p, &inst.state))?;
            worst = worst.max(rel_err(values[k], fd));
            coords += 1;
        }
    }

    let hc = 1e-6;
    for id in 0..inst.state.k_total() {
        for j in 0..inst.config.dim {
            let analytic = d_centers.get(&id).map_or(0.0, |row| row[j]);
            let mut plus = inst.state.clone();
            plus.centers[[id, j]] += hc;
            let mut minus = inst.state.clone();
            minus.centers[[id, j]] -= hc;
            let fd =
                (inst.eval(&inst.params, &plus)? - inst.eval(&inst.params, &minus)?) / (2.0 * hc);
            worst = worst.max(rel_err(analytic, fd));
            coords += 1;
        }
    }
    Ok((coords, worst))
}

// ---------------------------------------------------------------------------
// Masked-attention reference equivalence
// ---------------------------------------------------------------------------

/// Absolute tolerance for [`mask_oracle_check`]: both paths run the same f64
/// arithmetic in different orders, so they must agree to rounding error.
pub const MASK_ORACLE_TOLERANCE: f64 = 1e-6;

/// Outcome of one [`mask_oracle_check`] run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskOracleReport {
    pub cases: usize,
    /// Worst absolute output difference across all cases.
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl MaskOracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff.is_finite() && self.max_abs_diff <= self.tolerance
    }
}

/// Reference region attention: gather each region's visible keys and values,
/// run a plain dense softmax over just that slice, and scatter the result
/// back. No additive mask — visibility is realized by slicing, so this path
/// shares nothing with the production masked softmax.
fn reference_region_attention(
    params: &AttnParams<f64>,
    heads: usize,
    queries: &Array2<f64>,
    tokens: &Array2<f64>,
    mask: &VisibilityMask,
) -> Array2<f64> {
    let dim = params.wq.nrows();
    let d_k = dim / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let q = queries.dot(&params.wq.t()) + &params.bq;
    let k = tokens.dot(&params.wk.t()) + &params.bk;
    let v = tokens.dot(&params.wv.t()) + &params.bv;

    let mut concat = Array2::zeros((queries.nrows(), dim));
    for l in 0..queries.nrows() {
        let visible = mask.visible_indices(l);
        for h in 0..heads {
            let span = h * d_k..(h + 1) * d_k;
            let scores: Vec<f64> = visible
                .iter()
                .map(|&j| {
                    (0..d_k)
                        .map(|c| q[[l, span.start + c]] * k[[j, span.start + c]])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (&j, w) in visible.iter().zip(&weights) {
                for c in 0..d_k {
                    concat[[l, span.start + c]] += v[[j, span.start + c]] * (w / total);
                }
            }
        }
    }
    concat.dot(&params.wo.t()) + &params.bo
}

/// Compares production region attention against the slice-and-attend
/// reference on `cases` random shapes (heads ∈ {1, 2, 4}, dim ≤ 32, ≤ 8
/// regions, ≤ 64 patches) and reports the worst absolute difference.
pub fn mask_oracle_check(cases: usize, seed: u64) -> Result<MaskOracleReport> {
    if cases == 0 {
        return Err(Error::config("mask oracle check needs at least one case"));
    }
    let mut max_abs_diff = 0.0f64;
    for case in 0..cases as u64 {
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::CHECK, 5, case]));
        let heads = [1usize, 2, 4][case as usize % 3];
        let dim = heads * (1 + rng.random_range(0..8)).min(32 / heads);
        let regions = 1 + rng.random_range(0..8);
        let n_patches = 1 + rng.random_range(0..64);

        let mut params = AttnParams::<f64>::zeros(dim);
        for m in [
            &mut params.wq,
            &mut params.wk,
            &mut params.wv,
            &mut params.wo,
        ] {
            m.mapv_inplace(|_| standard_normal(&mut rng) * 0.4);
        }
        for b in [
            &mut params.bq,
            &mut params.bk,
            &mut params.bv,
            &mut params.bo,
        ] {
            b.mapv_inplace(|_| standard_normal(&mut rng) * 0.1);
        }
        let queries = Array2::from_shape_fn((regions, dim), |_| standard_normal(&mut rng) * 0.5);
        let tokens = Array2::from_shape_fn((n_patches, dim), |_| standard_normal(&mut rng) * 0.5);
        let mut visible = Array2::from_shape_fn((regions, n_patches), |_| rng.random_bool(0.4));
        for l in 0..regions {
            let forced = rng.random_range(0..n_patches);
            visible[[l, forced]] = true;
        }
        let mask = VisibilityMask::new(visible)?;

        let got = region_attention(&params, heads, &queries, &tokens, &mask)?;
        let want = reference_region_attention(&params, heads, &queries, &tokens, &mask);
        let diff = (&got - &want).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        max_abs_diff = max_abs_diff.max(diff);
    }
    Ok(MaskOracleReport {
        cases,
        max_abs_diff,
        tolerance: MASK_ORACLE_TOLERANCE,
    })
}

// ---------------------------------------------------------------------------
// Margin-logit reference values
// ---------------------------------------------------------------------------

/// Absolute tolerance for [`margin_reference_check`] loss values.
pub const MARGIN_REFERENCE_TOLERANCE: f64 = 1e-9;

/// Outcome of one [`margin_reference_check`] run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReferenceReport {
    pub trials: usize,
    /// Worst absolute loss difference against the direct evaluation.
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl MarginReferenceReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff.is_finite() && self.max_abs_diff <= self.tolerance
    }
}

/// Re-evaluates the object and OCR losses against a direct transcription of
/// the margin-logit formulas — positives `s·(cosθ − m)`, negatives `s·cosθ`,
/// then `log(1 + Σ_p e^{−l_p}) + log(1 + Σ_n e^{l_n})` — on random inputs
/// with non-zero margins.
///
/// `flip_margin_sign` negates the margin handed to the production side only.
/// It is a fault-injection hook: callers use it to prove the check would
/// catch a margin sign error, so a `true` run is expected to fail.
pub fn margin_reference_check(
    trials: usize,
    seed: u64,
    flip_margin_sign: bool,
) -> Result<MarginReferenceReport> {
    if trials == 0 {
        return Err(Error::config("margin reference check needs at least one trial"));
    }
    let mut max_abs_diff = 0.0f64;
    for trial in 0..trials as u64 {
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::CHECK, 6, trial]));
        let k = 6 + trial as usize % 7;
        let dim = 4 + trial as usize % 5;
        let margin = 0.15 + 0.05 * (trial % 4) as f64;
        let scale = [8.0, 24.0, 64.0][trial as usize % 3];

        let mut centers = Array2::from_shape_fn((k, dim), |_| standard_normal(&mut rng));
        l2_normalize_rows(&mut centers)?;
        let embedding = {
            let raw = Array1::from_shape_fn(dim, |_| standard_normal(&mut rng));
            l2_normalize(raw.view())?.0
        };

        let pos_ids: Vec<usize> = if trial % 2 == 0 {
            vec![rng.random_range(0..k)]
        } else {
            // Repeats allowed: tokenized text can carry the same id twice.
            (0..2 + trial as usize % 3)
                .map(|_| rng.random_range(0..k))
                .collect()
        };
        let negs = sample_negatives(
            k,
            &pos_ids,
            0.5,
            derive_seed(seed, &[stream::CHECK, 6, trial, 1]),
        )?;

        // The production side under test; a flipped sign bypasses the
        // constructor's margin-range validation on purpose.
        let state = ClassifierState {
            centers: centers.clone(),
            margin: if flip_margin_sign { -margin } else { margin },
            scale,
            ocr_offset: k,
        };
        let (produced, _) = if pos_ids.len() == 1 {
            object_loss(embedding.view(), pos_ids[0], &negs, &state)?
        } else {
            ocr_loss(embedding.view(), &pos_ids, &negs, &state)?
        };

        let cos = |id: usize| -> f64 { embedding.dot(&centers.row(id)) };
        let pos_sum: f64 = pos_ids
            .iter()
            .map(|&p| (-(scale * (cos(p) - margin))).exp())
            .sum();
        let neg_sum: f64 = negs.ids.iter().map(|&n| (scale * cos(n)).exp()).sum();
        let reference = (1.0 + pos_sum).ln() + (1.0 + neg_sum).ln();

        max_abs_diff = max_abs_diff.max((produced - reference).abs());
    }
    Ok(MarginReferenceReport {
        trials,
        max_abs_diff,
        tolerance: MARGIN_REFERENCE_TOLERANCE,
    })
}
