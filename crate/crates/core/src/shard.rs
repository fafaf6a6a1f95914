//! Sharded-classifier simulation: batch losses over a class table split
//! into contiguous shards.
//!
//! At production scale the classifier's center table is partitioned across
//! W workers, each holding a contiguous id range. Every worker scores the
//! ids it owns and publishes per-shard partial results; a deterministic
//! gather combines the partials *in shard order*, so the final loss and
//! gradients do not depend on which worker finishes first. This module
//! simulates that execution on one machine and is the trainer's only loss
//! entry point (with one shard it reproduces the plain per-sample losses
//! bit for bit, because both paths run the same grouped evaluation).

use crate::error::{Error, Result};
use crate::loss::{
    accumulate_class_grads, loss_core, score_class, validate_loss_inputs, ClassifierState,
    LossGrads, NegativeSample, ScoredClass, Target,
};
use crate::real::Real;
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;
use std::ops::Range;

/// Contiguous partition of the class id space `[0, k_total)` into shards
/// whose sizes differ by at most one (earlier shards take the remainder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardLayout {
    pub k_total: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ShardLayout {
    pub fn shards(&self) -> usize {
        self.ranges.len()
    }

    /// Index of the shard owning `id`.
    pub fn owner(&self, id: usize) -> Result<usize> {
        if id >= self.k_total {
            return Err(Error::validation(format!(
                "class id {id} outside [0, {})",
                self.k_total
            )));
        }
        Ok(self.ranges.partition_point(|r| r.end <= id))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(Error::config("shard layout has no shards"));
        }
        let mut next = 0usize;
        for (w, r) in self.ranges.iter().enumerate() {
            if r.start != next || r.end <= r.start {
                return Err(Error::config(format!(
                    "shard {w} range {}..{} is not a contiguous non-empty continuation",
                    r.start, r.end
                )));
            }
            next = r.end;
        }
        if next != self.k_total {
            return Err(Error::config(format!(
                "shard ranges cover [0, {next}) but k_total is {}",
                self.k_total
            )));
        }
        Ok(())
    }
}

/// Splits `k_total` class ids across `shards` contiguous ranges; the first
/// `k_total mod shards` ranges hold one extra id.
pub fn shard_partition(k_total: usize, shards: usize) -> Result<ShardLayout> {
    if shards == 0 {
        return Err(Error::config("shard count must be at least 1"));
    }
    if shards > k_total {
        return Err(Error::config(format!(
            "cannot split {k_total} classes across {shards} shards"
        )));
    }
    let base = k_total / shards;
    let extra = k_total % shards;
    let mut ranges = Vec::with_capacity(shards);
    let mut start = 0;
    for w in 0..shards {
        let size = base + usize::from(w < extra);
        ranges.push(start..start + size);
        start += size;
    }
    Ok(ShardLayout { k_total, ranges })
}

/// One region's contribution to a batch loss: its unit-norm embedding, what
/// it is discriminated toward, and its sampled negatives (global class ids).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample<F> {
    pub embedding: Array1<F>,
    pub target: Target,
    pub negatives: NegativeSample,
}

/// Batch loss and gradients from the sharded evaluation. Gradients are of
/// `total = object_weight · Σ_obj loss + ocr_weight · Σ_ocr loss`; passing
/// `1/n_obj` and `λ_ocr/n_ocr` as the weights yields the per-kind-mean
/// objective the trainer optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss<F> {
    /// Unweighted loss of each sample, in input order.
    pub per_sample: Vec<F>,
    pub object_sum: F,
    pub object_count: usize,
    pub ocr_sum: F,
    pub ocr_count: usize,
    /// `object_weight · object_sum + ocr_weight · ocr_sum`.
    pub total: F,
    /// (B, D) gradient of `total` w.r.t. each sample's embedding.
    pub d_embeddings: Array2<F>,
    /// Gradient of `total` w.r.t. every touched center row.
    pub d_centers: BTreeMap<usize, Array1<F>>,
}

/// Evaluates the batch with shards processed in ascending id order.
pub fn sharded_loss<F: Real>(
    samples: &[BatchSample<F>],
    layout: &ShardLayout,
    state: &ClassifierState<F>,
    object_weight: F,
    ocr_weight: F,
) -> Result<BatchLoss<F>> {
    let order: Vec<usize> = (0..layout.shards()).collect();
    sharded_loss_ordered(samples, layout, state, object_weight, ocr_weight, &order)
}

/// Evaluates the batch with shards *visited* in `eval_order` — standing in
/// for workers finishing at arbitrary times. Partial results land in
/// per-shard slots and the gather always combines them in shard-id order,
/// so the output is identical for every permutation.
pub fn sharded_loss_ordered<F: Real>(
    samples: &[BatchSample<F>],
    layout: &ShardLayout,
    state: &ClassifierState<F>,
    object_weight: F,
    ocr_weight: F,
    eval_order: &[usize],
) -> Result<BatchLoss<F>> {
    layout.validate()?;
    if layout.k_total != state.k_total() {
        return Err(Error::validation(format!(
            "shard layout covers {} classes but the classifier has {}",
            layout.k_total,
            state.k_total()
        )));
    }
    let shards = layout.shards();
    {
        let mut seen = vec![false; shards];
        for &w in eval_order {
            if w >= shards || seen[w] {
                return Err(Error::config("eval_order must be a permutation of the shards"));
            }
            seen[w] = true;
        }
        if eval_order.len() != shards {
            return Err(Error::config("eval_order must be a permutation of the shards"));
        }
    }
    for (name, w) in [("object_weight", object_weight), ("ocr_weight", ocr_weight)] {
        let w = w.as_f64();
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::config(format!("{name} must be finite and non-negative")));
        }
    }

    let dim = state.dim();
    let mut out = BatchLoss {
        per_sample: Vec::with_capacity(samples.len()),
        object_sum: F::zero(),
        object_count: 0,
        ocr_sum: F::zero(),
        ocr_count: 0,
        total: F::zero(),
        d_embeddings: Array2::zeros((samples.len(), dim)),
        d_centers: BTreeMap::new(),
    };

    for (b, sample) in samples.iter().enumerate() {
        let pos_ids: &[usize] = match &sample.target {
            Target::Object(label) => std::slice::from_ref(label),
            Target::Ocr(labels) => {
                if labels.is_empty() {
                    return Err(Error::validation(format!(
                        "sample {b}: ocr target has no positives"
                    )));
                }
                labels
            }
        };
        validate_loss_inputs(sample.embedding.view(), pos_ids, &sample.negatives, state)?;

        // Each visited shard scores the ids it owns into its own slot;
        // positives keep their listed (multiset) order, negatives their
        // sorted order.
        let mut pos_groups: Vec<Vec<ScoredClass<F>>> = vec![Vec::new(); shards];
        let mut neg_groups: Vec<Vec<ScoredClass<F>>> = vec![Vec::new(); shards];
        for &w in eval_order {
            let range = &layout.ranges[w];
            for &p in pos_ids {
                if range.contains(&p) {
                    pos_groups[w].push(score_class(sample.embedding.view(), state, p, true)?);
                }
            }
            let ids = &sample.negatives.ids;
            let lo = ids.partition_point(|&i| i < range.start);
            let hi = ids.partition_point(|&i| i < range.end);
            for &n in &ids[lo..hi] {
                neg_groups[w].push(score_class(sample.embedding.view(), state, n, false)?);
            }
        }

        // Gather: group-ordered log-sum-exp over per-shard partials.
        let neg_pos_logits: Vec<Vec<F>> = pos_groups
            .iter()
            .map(|g| g.iter().map(|s| -s.logit).collect())
            .collect();
        let neg_logits: Vec<Vec<F>> = neg_groups
            .iter()
            .map(|g| g.iter().map(|s| s.logit).collect())
            .collect();
        let core = loss_core(&neg_pos_logits, &neg_logits);

        let pos_flat: Vec<ScoredClass<F>> = pos_groups.into_iter().flatten().collect();
        let neg_flat: Vec<ScoredClass<F>> = neg_groups.into_iter().flatten().collect();
        let mut grads = LossGrads::zeros(dim);
        accumulate_class_grads(
            sample.embedding.view(),
            state,
            &pos_flat,
            &core.d_pos_logits,
            &mut grads,
        );
        accumulate_class_grads(
            sample.embedding.view(),
            state,
            &neg_flat,
            &core.d_neg_logits,
            &mut grads,
        );

        let weight = match sample.target {
            Target::Object(_) => {
                out.object_sum += core.loss;
                out.object_count += 1;
                object_weight
            }
            Target::Ocr(_) => {
                out.ocr_sum += core.loss;
                out.ocr_count += 1;
                ocr_weight
            }
        };
        out.per_sample.push(core.loss);
        out.d_embeddings
            .row_mut(b)
            .assign(&grads.d_embedding.mapv(|v| v * weight));
        for (id, grad) in grads.d_centers {
            out.d_centers
                .entry(id)
                .and_modify(|g| g.zip_mut_with(&grad, |a, &b| *a += b * weight))
                .or_insert_with(|| grad.mapv(|v| v * weight));
        }
    }
    out.total = object_weight * out.object_sum + ocr_weight * out.ocr_sum;
    Ok(out)
}
