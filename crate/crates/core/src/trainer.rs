//! Desk-scale training loop: batching, forward/backward, Adam updates with
//! decoupled weight decay, checkpointing, and diagnostics.
//!
//! Every stochastic choice a step makes — which images enter the batch,
//! how each image's regions are resampled, which negatives are drawn — is
//! seeded by `(config.seed, step index)` through the stream-tagged seed
//! derivation, never by mutable RNG state carried across steps. That makes
//! `(config, seed)` fully determine the metrics stream and final weights,
//! and lets a run resumed from a checkpoint reproduce the uninterrupted
//! run exactly.
//!
//! Images do not live on disk: the trainer pulls pixels through an
//! `ImageProvider` callback (the synthetic generator's `render_record`, in
//! the shipped pipeline), keeping the loop independent of storage format.

use crate::checkpoint::Checkpoint;
use crate::encoder::{
    encode_backward, encode_with_cache, EncoderConfig, EncoderParams, TokenSequence,
};
use crate::error::{Error, Result};
use crate::linalg::l2_normalize_backward;
use crate::loss::{sample_negatives, ClassifierState, NegativeSample, Target};
use crate::optim::{AdamConfig, AdamState};
use crate::real::Real;
use crate::region::{balanced_sample, ImageRecord, Region, RegionKind, SampledRegions};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::shard::{shard_partition, sharded_loss, BatchSample};
use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Supplies pixel data for a manifest record: (H, W, C) in [0, 1].
pub trait ImageProvider<F>: Sync {
    fn pixels(&self, record: &ImageRecord) -> Result<Array3<F>>;
}

impl<F, T> ImageProvider<F> for T
where
    T: Fn(&ImageRecord) -> Result<Array3<F>> + Sync,
{
    fn pixels(&self, record: &ImageRecord) -> Result<Array3<F>> {
        self(record)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Regions sampled per image (N).
    pub regions_per_image: usize,
    /// Object pseudo-class count (K); ids `[0, K)` in the unified table.
    pub object_classes: usize,
    /// OCR token vocabulary size (0 for object-only data); token t maps to
    /// unified class id `object_classes + t`.
    pub ocr_vocab: usize,
    /// Negative sampling ratio ρ: each draw takes ⌊K·ρ⌋ ids.
    pub rho: f64,
    pub margin: f64,
    pub scale: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Images per step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Weight of the OCR loss in the mixed objective.
    pub lambda_ocr: f64,
    /// Simulated classifier shard count (W).
    pub shards: usize,
    /// Draw fresh negatives per region instead of one shared draw per image
    /// and kind.
    pub per_region_negatives: bool,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regions_per_image: 10,
            object_classes: 16,
            ocr_vocab: 0,
            rho: 0.1,
            margin: 0.3,
            scale: 64.0,
            lr: 0.001,
            weight_decay: 0.2,
            batch_size: 8,
            steps: 200,
            seed: 0,
            lambda_ocr: 1.0,
            shards: 1,
            per_region_negatives: false,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn k_total(&self) -> usize {
        self.object_classes + self.ocr_vocab
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.regions_per_image == 0 || self.batch_size == 0 {
            return Err(Error::config("regions_per_image and batch_size must be positive"));
        }
        if self.object_classes == 0 {
            return Err(Error::config("object_classes must be positive"));
        }
        if !(0.0 < self.rho && self.rho <= 1.0) {
            return Err(Error::config(format!("rho {} outside (0, 1]", self.rho)));
        }
        if (self.object_classes as f64 * self.rho).floor() < 1.0 {
            return Err(Error::config(
                "floor(object_classes·rho) must be at least 1 negative",
            ));
        }
        if self.ocr_vocab > 0 && (self.ocr_vocab as f64 * self.rho).floor() < 1.0 {
            return Err(Error::config("floor(ocr_vocab·rho) must be at least 1 negative"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config(format!("margin {} outside [0, 1)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("scale must be positive and finite"));
        }
        if self.shards == 0 || self.shards > self.k_total() {
            return Err(Error::config(format!(
                "shards {} outside [1, {}]",
                self.shards,
                self.k_total()
            )));
        }
        if !(self.lambda_ocr >= 0.0 && self.lambda_ocr.is_finite()) {
            return Err(Error::config("lambda_ocr must be finite and non-negative"));
        }
        AdamConfig::new(self.lr, self.weight_decay).validate()?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.weight_decay)
    }
}

/// Per-step diagnostics, one JSON line each in the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based step index.
    pub step: u64,
    /// Mean loss over the step's object regions (0 when none present).
    pub object_loss: f64,
    /// Mean loss over the step's OCR regions (0 when none present).
    pub ocr_loss: f64,
    /// L2 norm of the full parameter gradient (encoder + classifier).
    pub grad_norm: f64,
    /// Mean cosine between embeddings and their positive centers.
    pub mean_pos_cos: f64,
    /// Mean cosine between embeddings and their sampled negative centers.
    pub mean_neg_cos: f64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        self.object_loss.is_finite()
            && self.ocr_loss.is_finite()
            && self.grad_norm.is_finite()
            && self.mean_pos_cos.is_finite()
            && self.mean_neg_cos.is_finite()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Mutable training state; everything needed to resume a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams<f32>,
    pub classifier: ClassifierState<f32>,
    pub adam: AdamState<f32>,
    /// Steps completed so far (the next step runs with this index).
    pub step: u64,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(
            &config.encoder,
            derive_seed(config.seed, &[stream::INIT_ENCODER]),
        )?;
        let classifier = ClassifierState::init(
            config.object_classes,
            config.ocr_vocab,
            config.encoder.dim,
            config.margin as f32,
            config.scale as f32,
            derive_seed(config.seed, &[stream::INIT_CLASSIFIER]),
        )?;
        Ok(TrainState {
            params,
            classifier,
            adam: AdamState::new(),
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            encoder_config: config.encoder.clone(),
            params: self.params.clone(),
            classifier: self.classifier.clone(),
            adam: self.adam.clone(),
            trainer_step: self.step,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.encoder_config != config.encoder {
            return Err(Error::config(
                "checkpoint encoder configuration differs from the requested config",
            ));
        }
        if ckpt.classifier.k_total() != config.k_total()
            || ckpt.classifier.ocr_offset != config.object_classes
        {
            return Err(Error::config(
                "checkpoint classifier shape differs from the requested config",
            ));
        }
        Ok(TrainState {
            params: ckpt.params,
            classifier: ckpt.classifier,
            adam: ckpt.adam,
            step: ckpt.trainer_step,
        })
    }
}

/// The images and region samples one step trains on: `(record index,
/// sampled regions)` per batch slot, fully determined by (config, step).
pub fn sample_step_batch(
    records: &[ImageRecord],
    config: &TrainConfig,
    step: u64,
) -> Result<Vec<(usize, SampledRegions)>> {
    if records.is_empty() {
        return Err(Error::validation("cannot train on an empty record list"));
    }
    let mut rng = rng_from_seed(derive_seed(config.seed, &[stream::EPOCH_SHUFFLE, step]));
    let picks: Vec<usize> = if records.len() >= config.batch_size {
        index::sample(&mut rng, records.len(), config.batch_size).into_vec()
    } else {
        (0..config.batch_size)
            .map(|_| rng.random_range(0..records.len()))
            .collect()
    };
    picks
        .into_iter()
        .enumerate()
        .map(|(slot, idx)| {
            let sampled = balanced_sample(
                &records[idx].regions,
                config.regions_per_image,
                derive_seed(config.seed, &[stream::REGION_SAMPLE, step, slot as u64]),
            )?;
            Ok((idx, sampled))
        })
        .collect()
}

/// Forward pass of one image: encoded tokens plus row-normalized region
/// embeddings, with everything the backward pass needs.
struct ImageForward {
    record_idx: usize,
    sampled: SampledRegions,
    cache: crate::encoder::EncodeCache<f32>,
    /// Unit-norm embeddings, one row per sampled region.
    unit: Array2<f32>,
    norms: Vec<f32>,
    samples: Vec<BatchSample<f32>>,
}

fn region_target(region: &Region, config: &TrainConfig) -> Result<Target> {
    match region.kind {
        RegionKind::Object => {
            let label = region
                .object_label
                .ok_or_else(|| Error::validation("object region without label"))?;
            if label >= config.object_classes {
                return Err(Error::validation(format!(
                    "object label {label} outside [0, {})",
                    config.object_classes
                )));
            }
            Ok(Target::Object(label))
        }
        RegionKind::Ocr => {
            let tokens = region
                .ocr_labels
                .as_ref()
                .ok_or_else(|| Error::validation("ocr region without tokens"))?;
            if config.ocr_vocab == 0 {
                return Err(Error::config(
                    "ocr region in the data but ocr_vocab is 0",
                ));
            }
            for &t in tokens {
                if t >= config.ocr_vocab {
                    return Err(Error::validation(format!(
                        "ocr token {t} outside [0, {})",
                        config.ocr_vocab
                    )));
                }
            }
            Ok(Target::Ocr(
                tokens.iter().map(|&t| config.object_classes + t).collect(),
            ))
        }
    }
}

/// Negative draws for one image: by default one shared draw per kind
/// (excluding every positive of that kind in the image), or per-region
/// draws when configured.
fn image_negatives(
    targets: &[Target],
    config: &TrainConfig,
    step: u64,
    slot: usize,
) -> Result<Vec<NegativeSample>> {
    let base = |kind_tag: u64, region: u64| {
        derive_seed(
            config.seed,
            &[stream::NEGATIVES, step, slot as u64, kind_tag, region],
        )
    };
    if config.per_region_negatives {
        targets
            .iter()
            .enumerate()
            .map(|(r, target)| match target {
                Target::Object(label) => {
                    sample_negatives(config.object_classes, &[*label], config.rho, base(0, r as u64))
                }
                Target::Ocr(ids) => {
                    let local: Vec<usize> =
                        ids.iter().map(|&id| id - config.object_classes).collect();
                    Ok(sample_negatives(config.ocr_vocab, &local, config.rho, base(1, r as u64))?
                        .offset(config.object_classes))
                }
            })
            .collect()
    } else {
        let mut object_pos = Vec::new();
        let mut ocr_pos = Vec::new();
        for target in targets {
            match target {
                Target::Object(label) => object_pos.push(*label),
                Target::Ocr(ids) => {
                    ocr_pos.extend(ids.iter().map(|&id| id - config.object_classes))
                }
            }
        }
        let shared_object = if object_pos.is_empty() {
            None
        } else {
            Some(sample_negatives(
                config.object_classes,
                &object_pos,
                config.rho,
                base(0, 0),
            )?)
        };
        let shared_ocr = if ocr_pos.is_empty() {
            None
        } else {
            Some(
                sample_negatives(config.ocr_vocab, &ocr_pos, config.rho, base(1, 0))?
                    .offset(config.object_classes),
            )
        };
        targets
            .iter()
            .map(|target| match target {
                Target::Object(_) => Ok(shared_object.clone().expect("object draw exists")),
                Target::Ocr(_) => Ok(shared_ocr.clone().expect("ocr draw exists")),
            })
            .collect()
    }
}

fn forward_image<P: ImageProvider<f32>>(
    records: &[ImageRecord],
    record_idx: usize,
    sampled: SampledRegions,
    provider: &P,
    state: &TrainState,
    config: &TrainConfig,
    step: u64,
    slot: usize,
) -> Result<ImageForward> {
    let record = &records[record_idx];
    let pixels = provider.pixels(record)?;
    let (_, regions, cache) =
        encode_with_cache(&pixels, &sampled.regions, &state.params, &config.encoder)?;
    let raw = regions.values;
    let mut unit = Array2::zeros(raw.dim());
    let mut norms = Vec::with_capacity(raw.nrows());
    for (i, row) in raw.outer_iter().enumerate() {
        let (u, n) = crate::linalg::l2_normalize(row)?;
        unit.row_mut(i).assign(&u);
        norms.push(n);
    }
    let targets: Vec<Target> = sampled
        .regions
        .iter()
        .map(|r| region_target(r, config))
        .collect::<Result<_>>()?;
    let negatives = image_negatives(&targets, config, step, slot)?;
    let samples = targets
        .into_iter()
        .zip(negatives)
        .enumerate()
        .map(|(r, (target, negs))| BatchSample {
            embedding: unit.row(r).to_owned(),
            target,
            negatives: negs,
        })
        .collect();
    Ok(ImageForward {
        record_idx,
        sampled,
        cache,
        unit,
        norms,
        samples,
    })
}

/// Runs one optimization step: encode every batch image, evaluate the
/// sharded cluster-discrimination loss (per-kind means, OCR weighted by
/// λ_ocr), backpropagate, apply the AdamW update, and re-normalize the
/// classifier rows. Deterministic given (config, state.step).
pub fn train_step<P: ImageProvider<f32>>(
    state: &mut TrainState,
    records: &[ImageRecord],
    provider: &P,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let step = state.step;
    let batch = sample_step_batch(records, config, step)?;

    // Phase 1 — per-image forward passes, parallel, order-stable.
    let forwards: Vec<ImageForward> = batch
        .into_par_iter()
        .enumerate()
        .map(|(slot, (record_idx, sampled))| {
            forward_image(records, record_idx, sampled, provider, state, config, step, slot)
        })
        .collect::<Result<_>>()?;

    // Phase 2 — batch loss over all regions through the shard simulation.
    let all_samples: Vec<BatchSample<f32>> = forwards
        .iter()
        .flat_map(|f| f.samples.iter().cloned())
        .collect();
    let n_obj = all_samples
        .iter()
        .filter(|s| matches!(s.target, Target::Object(_)))
        .count();
    let n_ocr = all_samples.len() - n_obj;
    let object_weight = if n_obj > 0 { 1.0 / n_obj as f32 } else { 0.0 };
    let ocr_weight = if n_ocr > 0 {
        (config.lambda_ocr / n_ocr as f64) as f32
    } else {
        0.0
    };
    let layout = shard_partition(config.k_total(), config.shards)?;
    let batch_loss = sharded_loss(
        &all_samples,
        &layout,
        &state.classifier,
        object_weight,
        ocr_weight,
    )?;

    // Abort on non-finite loss, naming the offending region.
    for (i, &loss) in batch_loss.per_sample.iter().enumerate() {
        if !loss.is_finite() {
            let (fwd, r) = locate_sample(&forwards, i);
            return Err(Error::numeric(format!(
                "step {step}: non-finite loss {loss} on record {} region {r} (bbox {:?})",
                records[fwd.record_idx].image_id, fwd.sampled.regions[r].bbox
            )));
        }
    }

    let metrics_cos = cosine_diagnostics(&all_samples, &state.classifier);

    // Phase 3 — backward through normalization and encoder, per image.
    let d_embeddings = &batch_loss.d_embeddings;
    let mut offsets = Vec::with_capacity(forwards.len());
    let mut acc = 0usize;
    for f in &forwards {
        offsets.push(acc);
        acc += f.samples.len();
    }
    let per_image_grads: Vec<EncoderParams<f32>> = forwards
        .par_iter()
        .zip(offsets.par_iter())
        .map(|(f, &off)| {
            let mut d_raw = Array2::zeros(f.unit.dim());
            for r in 0..f.unit.nrows() {
                let d_unit = d_embeddings.row(off + r);
                let d = l2_normalize_backward(f.unit.row(r), f.norms[r], d_unit);
                d_raw.row_mut(r).assign(&d);
            }
            encode_backward(&state.params, &config.encoder, &f.cache, &d_raw)
        })
        .collect::<Result<_>>()?;
    let mut encoder_grads = EncoderParams::zeros(&config.encoder);
    for g in &per_image_grads {
        encoder_grads.add_assign(g);
    }

    // Dense classifier gradient from the sparse per-center map.
    let mut center_grads =
        Array2::<f32>::zeros((state.classifier.k_total(), state.classifier.dim()));
    for (&id, grad) in &batch_loss.d_centers {
        center_grads.row_mut(id).assign(grad);
    }

    let grad_norm = {
        let centers_sq: f64 = center_grads.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (encoder_grads.sq_l2_norm() + centers_sq).sqrt()
    };
    if !grad_norm.is_finite() {
        return Err(Error::numeric(format!(
            "step {step}: non-finite gradient norm {grad_norm}"
        )));
    }

    // Phase 4 — AdamW update over every named tensor, then classifier
    // re-normalization (skipped for the lr=0 null update so parameters
    // remain bitwise untouched).
    let adam_config = config.adam();
    state.adam.begin_step();
    let mut update_err: Option<Error> = None;
    {
        let grad_tensors = encoder_grads.tensors();
        let mut grads_iter = grad_tensors.iter();
        let adam = &mut state.adam;
        state.params.for_each_mut(|name, _, slice| {
            let (g_name, _, g_data) = grads_iter.next().expect("gradient tensor order");
            debug_assert_eq!(g_name, name);
            if update_err.is_none() {
                if let Err(e) = adam.update_tensor(&adam_config, name, slice, g_data) {
                    update_err = Some(e);
                }
            }
        });
    }
    if let Some(e) = update_err {
        return Err(e);
    }
    state.adam.update_tensor(
        &adam_config,
        "classifier.centers",
        state
            .classifier
            .centers
            .as_slice_mut()
            .expect("owned arrays are standard layout"),
        center_grads.as_slice().expect("owned arrays are standard layout"),
    )?;
    if config.lr != 0.0 {
        state.classifier.renormalize()?;
    }
    state.step += 1;

    let metrics = StepMetrics {
        step: state.step,
        object_loss: if n_obj > 0 {
            batch_loss.object_sum as f64 / n_obj as f64
        } else {
            0.0
        },
        ocr_loss: if n_ocr > 0 {
            batch_loss.ocr_sum as f64 / n_ocr as f64
        } else {
            0.0
        },
        grad_norm,
        mean_pos_cos: metrics_cos.0,
        mean_neg_cos: metrics_cos.1,
    };
    if !metrics.is_finite() {
        return Err(Error::numeric(format!("step {step}: non-finite metrics")));
    }
    Ok(metrics)
}

fn locate_sample<'a>(forwards: &'a [ImageForward], flat: usize) -> (&'a ImageForward, usize) {
    let mut rest = flat;
    for f in forwards {
        if rest < f.samples.len() {
            return (f, rest);
        }
        rest -= f.samples.len();
    }
    unreachable!("sample index within batch");
}

/// Mean positive / negative cosine over a batch, measured against the
/// pre-update classifier.
fn cosine_diagnostics(samples: &[BatchSample<f32>], classifier: &ClassifierState<f32>) -> (f64, f64) {
    let mut pos_sum = 0.0;
    let mut pos_n = 0usize;
    let mut neg_sum = 0.0;
    let mut neg_n = 0usize;
    for sample in samples {
        let e = sample.embedding.view();
        let pos_ids: Vec<usize> = match &sample.target {
            Target::Object(l) => vec![*l],
            Target::Ocr(ls) => ls.clone(),
        };
        for id in pos_ids {
            pos_sum += e.dot(&classifier.centers.row(id)) as f64;
            pos_n += 1;
        }
        for &id in &sample.negatives.ids {
            neg_sum += e.dot(&classifier.centers.row(id)) as f64;
            neg_n += 1;
        }
    }
    (
        if pos_n > 0 { pos_sum / pos_n as f64 } else { 0.0 },
        if neg_n > 0 { neg_sum / neg_n as f64 } else { 0.0 },
    )
}

/// Runs `steps` training steps, appending one JSON line per step to
/// `metrics_out` when given. Returns all step metrics.
pub fn train<P: ImageProvider<f32>>(
    state: &mut TrainState,
    records: &[ImageRecord],
    provider: &P,
    config: &TrainConfig,
    steps: usize,
    mut metrics_out: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    let mut all = Vec::with_capacity(steps);
    for _ in 0..steps {
        let metrics = train_step(state, records, provider, config)?;
        if let Some(out) = metrics_out.as_deref_mut() {
            writeln!(out, "{}", metrics.to_json_line())?;
        }
        all.push(metrics);
    }
    Ok(all)
}

/// Histogram of pairwise Euclidean distances between L2-normalized patch
/// tokens, binned uniformly over [0, 2].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenDistanceHistogram {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub total_pairs: usize,
}

pub fn token_distance_histogram<F: Real>(
    tokens: &TokenSequence<F>,
    bins: usize,
) -> Result<TokenDistanceHistogram> {
    let n = tokens.patches.nrows();
    if n < 2 {
        return Err(Error::validation("token distance needs at least 2 patch tokens"));
    }
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let mut unit = Array2::<f64>::zeros(tokens.patches.dim());
    for (i, row) in tokens.patches.outer_iter().enumerate() {
        let mut norm = 0.0f64;
        for &v in row.iter() {
            norm += v.as_f64() * v.as_f64();
        }
        let norm = norm.sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numeric(format!("patch token {i} has norm {norm}")));
        }
        for (j, &v) in row.iter().enumerate() {
            unit[[i, j]] = v.as_f64() / norm;
        }
    }
    let mut counts = vec![0usize; bins];
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sq = 0.0;
            for d in 0..unit.ncols() {
                let diff = unit[[i, d]] - unit[[j, d]];
                sq += diff * diff;
            }
            let dist = sq.sqrt();
            let bin = ((dist / 2.0) * bins as f64).floor() as usize;
            counts[bin.min(bins - 1)] += 1;
            sum += dist;
            pairs += 1;
        }
    }
    Ok(TokenDistanceHistogram {
        counts,
        mean: sum / pairs as f64,
        total_pairs: pairs,
    })
}

/// Mean pairwise distance between normalized patch tokens whose patch
/// centers fall in regions of *different* labels — the separation signal
/// training is expected to increase. Patches outside every region are
/// ignored.
pub fn cross_class_token_distance<F: Real>(
    tokens: &TokenSequence<F>,
    regions: &[Region],
) -> Result<f64> {
    let (rows, cols) = tokens.grid;
    let p = tokens.p as f64;
    let mut labels: Vec<Option<usize>> = vec![None; rows * cols];
    for (idx, label_slot) in labels.iter_mut().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        let (cx, cy) = ((c as f64 + 0.5) * p, (r as f64 + 0.5) * p);
        for region in regions {
            if region.bbox.contains_point(cx, cy) {
                if let Some(l) = region.object_label {
                    *label_slot = Some(l);
                    break;
                }
            }
        }
    }
    let mut unit = Array2::<f64>::zeros(tokens.patches.dim());
    for (i, row) in tokens.patches.outer_iter().enumerate() {
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numeric("degenerate patch token"));
        }
        for (j, &v) in row.iter().enumerate() {
            unit[[i, j]] = v.as_f64() / norm;
        }
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if let (Some(a), Some(b)) = (labels[i], labels[j]) {
                if a != b {
                    let mut sq = 0.0;
                    for d in 0..unit.ncols() {
                        let diff = unit[[i, d]] - unit[[j, d]];
                        sq += diff * diff;
                    }
                    sum += sq.sqrt();
                    pairs += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::validation(
            "no cross-class patch pairs (need two labeled regions with distinct labels)",
        ));
    }
    Ok(sum / pairs as f64)
}

/// Encodes every region of a record and returns unit-norm embeddings.
pub fn embed_regions<P: ImageProvider<f32>>(
    record: &ImageRecord,
    provider: &P,
    params: &EncoderParams<f32>,
    encoder: &EncoderConfig,
) -> Result<Array2<f32>> {
    let pixels = provider.pixels(record)?;
    let (_, regions) = crate::encoder::encode(&pixels, &record.regions, params, encoder)?;
    let mut unit = Array2::zeros(regions.values.dim());
    for (i, row) in regions.values.outer_iter().enumerate() {
        let (u, _) = crate::linalg::l2_normalize(row)?;
        unit.row_mut(i).assign(&u);
    }
    Ok(unit)
}

/// Fraction of embeddings whose nearest *object* center (by cosine) is
/// their label — the end-of-training separation measure.
pub fn nearest_center_accuracy(
    embeddings: &Array2<f32>,
    labels: &[usize],
    classifier: &ClassifierState<f32>,
) -> Result<f64> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::validation("one label per embedding required"));
    }
    if embeddings.nrows() == 0 {
        return Err(Error::validation("no embeddings to score"));
    }
    let k = classifier.object_classes();
    let mut hits = 0usize;
    for (row, &label) in embeddings.outer_iter().zip(labels) {
        if label >= k {
            return Err(Error::validation(format!("label {label} outside [0, {k})")));
        }
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for c in 0..k {
            let cos = row
                .iter()
                .zip(classifier.centers.row(c).iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
            if cos > best_cos {
                best_cos = cos;
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_record, synth_generate, SynthConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            regions_per_image: 4,
            object_classes: 8,
            rho: 0.25,
            batch_size: 2,
            encoder: EncoderConfig {
                layers: 2,
                region_layers: 1,
                heads: 2,
                dim: 16,
                patch: 8,
                channels: 3,
                image_h: 16,
                image_w: 16,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(config: &TrainConfig, seed: u64) -> (Vec<ImageRecord>, SynthConfig) {
        let synth = SynthConfig {
            classes: config.object_classes,
            images: 6,
            regions_per_image: config.regions_per_image,
            image_h: config.encoder.image_h,
            image_w: config.encoder.image_w,
            feature_dim: 8,
            feature_noise: 0.2,
        };
        (synth_generate(&synth, seed).unwrap().records, synth)
    }

    fn provider(classes: usize) -> impl Fn(&ImageRecord) -> Result<Array3<f32>> + Sync {
        move |record: &ImageRecord| render_record::<f32>(record, classes)
    }

    #[test]
    fn step_batches_have_exactly_n_regions_per_image() {
        let config = tiny_config();
        let (records, _) = tiny_dataset(&config, 1);
        for step in 0..3 {
            let batch = sample_step_batch(&records, &config, step).unwrap();
            assert_eq!(batch.len(), config.batch_size);
            for (idx, sampled) in &batch {
                assert!(*idx < records.len());
                assert_eq!(sampled.regions.len(), config.regions_per_image);
            }
        }
        // Different steps draw different batches (with high probability at
        // these sizes, and deterministically for this seed).
        let a = sample_step_batch(&records, &config, 0).unwrap();
        let b = sample_step_batch(&records, &config, 1).unwrap();
        assert_ne!(
            a.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            b.iter().map(|(i, _)| *i).collect::<Vec<_>>()
        );
    }

    #[test]
    fn lr_zero_reports_metrics_but_never_moves_parameters() {
        let mut config = tiny_config();
        config.lr = 0.0;
        let (records, _) = tiny_dataset(&config, 2);
        let prov = provider(config.object_classes);
        let mut state = TrainState::init(&config).unwrap();
        let before_params: Vec<Vec<u32>> = state
            .params
            .tensors()
            .iter()
            .map(|(_, _, d)| d.iter().map(|v| v.to_bits()).collect())
            .collect();
        let before_centers: Vec<u32> = state
            .classifier
            .centers
            .iter()
            .map(|v| v.to_bits())
            .collect();
        for _ in 0..3 {
            let metrics = train_step(&mut state, &records, &prov, &config).unwrap();
            assert!(metrics.is_finite());
            assert!(metrics.object_loss > 0.0);
        }
        let after_params: Vec<Vec<u32>> = state
            .params
            .tensors()
            .iter()
            .map(|(_, _, d)| d.iter().map(|v| v.to_bits()).collect())
            .collect();
        let after_centers: Vec<u32> = state
            .classifier
            .centers
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before_params, after_params);
        assert_eq!(before_centers, after_centers);
    }

    #[test]
    fn same_seed_runs_produce_identical_metric_streams() {
        let config = tiny_config();
        let (records, _) = tiny_dataset(&config, 3);
        let prov = provider(config.object_classes);
        let run = || {
            let mut state = TrainState::init(&config).unwrap();
            train(&mut state, &records, &prov, &config, 4, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for m in &a {
            assert!(m.is_finite());
        }
        assert_eq!(a.last().unwrap().step, 4);
    }

    #[test]
    fn rerunning_the_same_step_index_is_bit_identical() {
        let config = tiny_config();
        let (records, _) = tiny_dataset(&config, 4);
        let prov = provider(config.object_classes);
        let state = TrainState::init(&config).unwrap();
        let mut s1 = state.clone();
        let mut s2 = state.clone();
        let m1 = train_step(&mut s1, &records, &prov, &config).unwrap();
        let m2 = train_step(&mut s2, &records, &prov, &config).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn classifier_rows_stay_unit_after_every_step() {
        let config = tiny_config();
        let (records, _) = tiny_dataset(&config, 5);
        let prov = provider(config.object_classes);
        let mut state = TrainState::init(&config).unwrap();
        for _ in 0..5 {
            train_step(&mut state, &records, &prov, &config).unwrap();
            for row in state.classifier.centers.outer_iter() {
                let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() <= 1e-6, "row norm {norm}");
            }
        }
    }

    #[test]
    fn checkpoint_resume_reproduces_the_uninterrupted_stream() {
        let config = tiny_config();
        let (records, _) = tiny_dataset(&config, 6);
        let prov = provider(config.object_classes);

        let mut unbroken = TrainState::init(&config).unwrap();
        let full = train(&mut unbroken, &records, &prov, &config, 8, None).unwrap();

        let mut first = TrainState::init(&config).unwrap();
        let head = train(&mut first, &records, &prov, &config, 3, None).unwrap();
        let ckpt = first.to_checkpoint(&config);
        let mut buf = Vec::new();
        crate::checkpoint::save_checkpoint_writer(&mut buf, &ckpt).unwrap();
        let restored = crate::checkpoint::load_checkpoint_reader(&mut buf.as_slice()).unwrap();
        let mut resumed = TrainState::from_checkpoint(restored, &config).unwrap();
        let tail = train(&mut resumed, &records, &prov, &config, 5, None).unwrap();

        let stitched: Vec<StepMetrics> = head.into_iter().chain(tail).collect();
        assert_eq!(stitched, full);
    }

    #[test]
    fn ocr_regions_train_through_the_token_range() {
        let mut config = tiny_config();
        config.ocr_vocab = 10;
        config.regions_per_image = 2;
        let (mut records, _) = tiny_dataset(&config, 7);
        // Convert one region per image to OCR with token lists.
        for (i, record) in records.iter_mut().enumerate() {
            let bbox = record.regions[0].bbox;
            record.regions[0] = Region::ocr(bbox, vec![i % 10, (i + 3) % 10]);
        }
        // OCR regions carry no object label, so give them one for rendering only.
        let classes = config.object_classes;
        let prov = move |record: &ImageRecord| {
            let mut painted = record.clone();
            for region in &mut painted.regions {
                if region.object_label.is_none() {
                    let token = region
                        .ocr_labels
                        .as_ref()
                        .and_then(|t| t.first().copied())
                        .unwrap_or(0);
                    region.object_label = Some(token % classes);
                }
            }
            render_record::<f32>(&painted, classes)
        };
        let mut state = TrainState::init(&config).unwrap();
        let m = train_step(&mut state, &records, &prov, &config).unwrap();
        assert!(m.is_finite());
        assert!(m.ocr_loss > 0.0);
        assert!(m.object_loss > 0.0);
    }

    #[test]
    fn per_region_negatives_mode_also_runs() {
        let mut config = tiny_config();
        config.per_region_negatives = true;
        let (records, _) = tiny_dataset(&config, 8);
        let prov = provider(config.object_classes);
        let mut state = TrainState::init(&config).unwrap();
        let m = train_step(&mut state, &records, &prov, &config).unwrap();
        assert!(m.is_finite());
    }

    #[test]
    fn shared_negatives_exclude_every_image_positive() {
        let config = tiny_config();
        let targets = vec![
            Target::Object(0),
            Target::Object(2),
            Target::Object(0),
            Target::Object(1),
        ];
        let negs = image_negatives(&targets, &config, 0, 0).unwrap();
        assert_eq!(negs.len(), 4);
        // Shared draw: identical for all regions, and excludes labels 0-2.
        assert_eq!(negs[0], negs[1]);
        for n in &negs {
            assert!(!n.contains(0) && !n.contains(1) && !n.contains(2));
        }
    }

    #[test]
    fn mislabeled_regions_are_rejected() {
        let config = tiny_config();
        let (mut records, _) = tiny_dataset(&config, 9);
        records[0].regions[0].object_label = Some(config.object_classes + 5);
        let prov = provider(config.object_classes + 6);
        let mut state = TrainState::init(&config).unwrap();
        // The bad record may or may not be drawn into a given batch, so
        // force batches that include record 0 by shrinking the dataset.
        let only_bad = vec![records[0].clone()];
        assert!(train_step(&mut state, &only_bad, &prov, &config).is_err());
    }

    #[test]
    fn from_checkpoint_rejects_mismatched_configs() {
        let config = tiny_config();
        let state = TrainState::init(&config).unwrap();
        let ckpt = state.to_checkpoint(&config);
        let mut other = config.clone();
        other.encoder.dim = 32;
        assert!(TrainState::from_checkpoint(ckpt.clone(), &other).is_err());
        let mut other = config.clone();
        other.object_classes += 1;
        assert!(TrainState::from_checkpoint(ckpt, &other).is_err());
    }

    // -- token distance histogram --------------------------------------------

    fn tokens_from_rows(rows: Array2<f64>) -> TokenSequence<f64> {
        TokenSequence {
            cls: ndarray::Array1::zeros(rows.ncols()),
            patches: rows,
            grid: (1, 1),
            p: 8,
        }
    }

    #[test]
    fn identical_tokens_collapse_to_bin_zero() {
        let mut rows = Array2::zeros((5, 4));
        for mut r in rows.outer_iter_mut() {
            r[1] = 3.0;
        }
        let hist = token_distance_histogram(&tokens_from_rows(rows), 8).unwrap();
        assert_eq!(hist.counts[0], 10);
        assert!(hist.counts[1..].iter().all(|&c| c == 0));
        assert_eq!(hist.mean, 0.0);
        assert_eq!(hist.total_pairs, 10);
    }

    #[test]
    fn orthogonal_pair_lands_at_sqrt_two() {
        let mut rows = Array2::zeros((2, 4));
        rows[[0, 0]] = 2.0;
        rows[[1, 1]] = 5.0;
        let hist = token_distance_histogram(&tokens_from_rows(rows), 10).unwrap();
        assert!((hist.mean - 2.0f64.sqrt()).abs() < 1e-12);
        // √2/2 = 0.7071… of the range → bin 7 of 10.
        assert_eq!(hist.counts[7], 1);
        assert_eq!(hist.total_pairs, 1);
    }

    #[test]
    fn histogram_counts_all_pairs() {
        let mut rng = crate::rng::rng_from_seed(10);
        let rows = Array2::from_shape_fn((13, 6), |_| rng.random_range(-1.0..1.0));
        let hist = token_distance_histogram(&tokens_from_rows(rows), 16).unwrap();
        assert_eq!(hist.total_pairs, 13 * 12 / 2);
        assert_eq!(hist.counts.iter().sum::<usize>(), 13 * 12 / 2);
        assert!(hist.mean > 0.0 && hist.mean <= 2.0);
    }

    #[test]
    fn histogram_rejects_degenerate_inputs() {
        let rows = Array2::from_elem((1, 4), 1.0);
        assert!(token_distance_histogram(&tokens_from_rows(rows), 8).is_err());
        let rows = Array2::from_elem((3, 4), 1.0);
        assert!(token_distance_histogram(&tokens_from_rows(rows), 0).is_err());
    }

    #[test]
    fn antipodal_distance_two_stays_in_range() {
        let mut rows = Array2::zeros((2, 3));
        rows[[0, 0]] = 1.0;
        rows[[1, 0]] = -4.0;
        let hist = token_distance_histogram(&tokens_from_rows(rows), 4).unwrap();
        assert_eq!(hist.counts[3], 1); // distance 2 clamps into the last bin
        assert!((hist.mean - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_class_distance_needs_two_classes() {
        let config = tiny_config();
        let (records, synth) = tiny_dataset(&config, 11);
        let state = TrainState::init(&config).unwrap();
        let prov = provider(synth.classes);
        let pixels = prov.pixels(&records[0]).unwrap();
        let (tokens, _) =
            crate::encoder::encode(&pixels, &records[0].regions, &state.params, &config.encoder)
                .unwrap();
        let d = cross_class_token_distance(&tokens, &records[0].regions).unwrap();
        assert!(d > 0.0 && d <= 2.0);

        // Single-class region list has no cross-class pairs.
        let single = vec![records[0].regions[0].clone()];
        assert!(cross_class_token_distance(&tokens, &single).is_err());
    }

    #[test]
    fn nearest_center_accuracy_is_exact_on_planted_embeddings() {
        let classifier = ClassifierState::<f32>::init(6, 0, 8, 0.3, 64.0, 12).unwrap();
        let mut embeddings = Array2::<f32>::zeros((6, 8));
        for i in 0..6 {
            embeddings.row_mut(i).assign(&classifier.centers.row(i));
        }
        let labels: Vec<usize> = (0..6).collect();
        let acc = nearest_center_accuracy(&embeddings, &labels, &classifier).unwrap();
        assert_eq!(acc, 1.0);
        let wrong: Vec<usize> = (0..6).map(|i| (i + 1) % 6).collect();
        let acc = nearest_center_accuracy(&embeddings, &wrong, &classifier).unwrap();
        assert_eq!(acc, 0.0);
    }
}
