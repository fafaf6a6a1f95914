//! Cluster-discrimination losses over margin-scaled cosine logits.
//!
//! A unified classifier holds one unit-norm center per class — object
//! pseudo-classes first, OCR token classes after `ocr_offset`. A region
//! embedding scores `s·(cosθ − m)` against positive centers and `s·cosθ`
//! against sampled negatives. The object loss pairs a single positive with
//! the sampled negatives; the OCR loss admits multiple positives:
//!
//! ```text
//! L_obj = log(1 + e^{−l_pos})        + log(1 + Σ_n e^{l_n})
//! L_ocr = log(1 + Σ_p e^{−l_p})      + log(1 + Σ_n e^{l_n})
//! ```
//!
//! Both terms are evaluated as `log(1 + Σ e^x)` with a max-shift, and the
//! evaluation is *grouped*: the helper takes the logits split into ordered
//! groups, computes per-group maxima then per-group partial sums, and
//! combines partials in group order. The unsharded losses pass a single
//! group; the sharded path passes one group per shard. A one-group call and
//! a W=1 shard evaluation therefore execute identical float operations,
//! making their agreement exact rather than approximate.

use crate::error::{Error, Result};
use crate::linalg::is_unit;
use crate::real::Real;
use crate::rng::rng_from_seed;
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index;
use std::collections::BTreeMap;

/// Unified classifier state: object class centers followed by OCR token
/// centers, with the margin and scale applied to every logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState<F> {
    /// (K_total, D); every row unit-norm.
    pub centers: Array2<F>,
    pub margin: F,
    pub scale: F,
    /// First OCR class id; ids below are object classes.
    pub ocr_offset: usize,
}

impl<F: Real> ClassifierState<F> {
    pub fn new(centers: Array2<F>, margin: F, scale: F, ocr_offset: usize) -> Result<Self> {
        let state = ClassifierState {
            centers,
            margin,
            scale,
            ocr_offset,
        };
        state.validate()?;
        Ok(state)
    }

    /// Random unit-norm centers: `object_classes` object rows then
    /// `ocr_classes` token rows.
    pub fn init(
        object_classes: usize,
        ocr_classes: usize,
        dim: usize,
        margin: F,
        scale: F,
        seed: u64,
    ) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let mut centers = Array2::from_shape_fn((object_classes + ocr_classes, dim), |_| {
            F::from_f64(normal.sample(&mut rng))
        });
        crate::linalg::l2_normalize_rows(&mut centers)?;
        ClassifierState::new(centers, margin, scale, object_classes)
    }

    pub fn k_total(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn object_classes(&self) -> usize {
        self.ocr_offset
    }

    pub fn ocr_classes(&self) -> usize {
        self.k_total() - self.ocr_offset
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.margin.as_f64();
        if !(0.0..1.0).contains(&m) {
            return Err(Error::config(format!("margin {m} outside [0, 1)")));
        }
        if self.scale.as_f64() <= 0.0 {
            return Err(Error::config("scale must be positive"));
        }
        if self.ocr_offset > self.k_total() {
            return Err(Error::config("ocr_offset exceeds class count"));
        }
        for (i, row) in self.centers.outer_iter().enumerate() {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "classifier center {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Rescales every center row back to unit norm (call after each
    /// optimizer update — the logits presume unit centers).
    pub fn renormalize(&mut self) -> Result<()> {
        crate::linalg::l2_normalize_rows(&mut self.centers)
    }
}

/// A uniform without-replacement draw of negative class ids, excluding the
/// positives it was sampled against. Ids are sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub ids: Vec<usize>,
    pub rho: f64,
    pub seed: u64,
}

impl NegativeSample {
    /// No negatives at all (degenerate but legal input to the losses).
    pub fn empty() -> Self {
        NegativeSample {
            ids: Vec::new(),
            rho: 0.0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// Shifts every id by `base` — used to map a draw over the OCR id range
    /// `[0, V)` into the unified table's global ids.
    pub fn offset(mut self, base: usize) -> Self {
        for id in &mut self.ids {
            *id += base;
        }
        self
    }
}

/// Draws exactly `⌊K·ρ⌋` distinct ids uniformly from `[0, K) \ positives`.
/// `positives` may repeat ids; the exclusion set is their union.
pub fn sample_negatives(
    k: usize,
    positives: &[usize],
    rho: f64,
    seed: u64,
) -> Result<NegativeSample> {
    if !(0.0 < rho && rho <= 1.0) {
        return Err(Error::config(format!("rho {rho} outside (0, 1]")));
    }
    let count = (k as f64 * rho).floor() as usize;
    if count == 0 {
        return Err(Error::config(format!(
            "negative sample size floor({k}·{rho}) is zero"
        )));
    }
    let mut excluded: Vec<usize> = positives.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    if excluded.iter().any(|&p| p >= k) {
        return Err(Error::validation("positive id outside [0, K)"));
    }
    let complement = k - excluded.len();
    if count > complement {
        return Err(Error::validation(format!(
            "cannot draw {count} negatives from {complement} non-positive classes"
        )));
    }
    // Draw ranks in the complement, then shift each rank past the excluded
    // ids below it; the map rank -> id is monotone, so the draw stays uniform.
    let mut rng = rng_from_seed(seed);
    let mut ids: Vec<usize> = index::sample(&mut rng, complement, count)
        .into_iter()
        .map(|rank| {
            let mut id = rank;
            for &p in &excluded {
                if p <= id {
                    id += 1;
                } else {
                    break;
                }
            }
            id
        })
        .collect();
    ids.sort_unstable();
    Ok(NegativeSample { ids, rho, seed })
}

/// What a region is discriminated against: one object pseudo-class or the
/// token classes of an OCR region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Object(usize),
    Ocr(Vec<usize>),
}

/// Gradients of one loss evaluation: dense w.r.t. the embedding, sparse
/// w.r.t. the touched centers (untouched centers carry no entry).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads<F> {
    pub d_embedding: Array1<F>,
    pub d_centers: BTreeMap<usize, Array1<F>>,
}

impl<F: Real> LossGrads<F> {
    pub(crate) fn zeros(dim: usize) -> Self {
        LossGrads {
            d_embedding: Array1::zeros(dim),
            d_centers: BTreeMap::new(),
        }
    }

    /// Accumulates `other` (scaled) into self — fixed-order batch reduction.
    pub fn add_scaled(&mut self, other: &LossGrads<F>, factor: F) {
        self.d_embedding.zip_mut_with(&other.d_embedding, |a, &b| *a += b * factor);
        for (&id, grad) in &other.d_centers {
            self.d_centers
                .entry(id)
                .and_modify(|g| g.zip_mut_with(grad, |a, &b| *a += b * factor))
                .or_insert_with(|| grad.mapv(|v| v * factor));
        }
    }
}

/// Margin-scaled cosine logit of one (embedding, center) pair:
/// `s·(cosθ − m)` for positives, `s·cosθ` for negatives, cosθ clamped to
/// [−1, 1]. Both vectors must be unit-norm.
pub fn logit<F: Real>(
    embedding: ArrayView1<'_, F>,
    center: ArrayView1<'_, F>,
    is_positive: bool,
    margin: F,
    scale: F,
) -> Result<F> {
    if !is_unit(embedding) || !is_unit(center) {
        return Err(Error::validation("logit inputs must be L2-normalized"));
    }
    let cos = clamp_cos(embedding.dot(&center)).0;
    Ok(if is_positive {
        scale * (cos - margin)
    } else {
        scale * cos
    })
}

/// Clamps a raw cosine into [−1, 1]; the flag reports whether clamping fired
/// (the gradient through a clamped cosine is zero).
fn clamp_cos<F: Real>(raw: F) -> (F, bool) {
    if raw > F::one() {
        (F::one(), true)
    } else if raw < -F::one() {
        (-F::one(), true)
    } else {
        (raw, false)
    }
}

/// `log(1 + Σ exp(x))` over logits split into ordered groups: per-group
/// maxima first, then per-group partial sums of `exp(x − shift)`, combined
/// in group order with the implicit `exp(−shift)` for the leading 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct OnePlusSumExp<F> {
    pub shift: F,
    pub total: F,
}

impl<F: Real> OnePlusSumExp<F> {
    pub(crate) fn value(&self) -> F {
        self.shift + self.total.ln()
    }

    /// Softmax-style weight of one logit against this term.
    pub(crate) fn weight(&self, x: F) -> F {
        (x - self.shift).exp() / self.total
    }
}

pub(crate) fn one_plus_sum_exp_grouped<F: Real>(groups: &[&[F]]) -> OnePlusSumExp<F> {
    let mut shift = F::zero();
    for group in groups {
        for &x in *group {
            if x > shift {
                shift = x;
            }
        }
    }
    let mut total = (-shift).exp();
    for group in groups {
        let mut partial = F::zero();
        for &x in *group {
            partial += (x - shift).exp();
        }
        total += partial;
    }
    OnePlusSumExp { shift, total }
}

/// One scored class: its id, its logit, and whether the cosine was clamped.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScoredClass<F> {
    pub id: usize,
    pub logit: F,
    pub clamped: bool,
}

pub(crate) fn score_class<F: Real>(
    embedding: ArrayView1<'_, F>,
    state: &ClassifierState<F>,
    id: usize,
    is_positive: bool,
) -> Result<ScoredClass<F>> {
    if id >= state.k_total() {
        return Err(Error::validation(format!(
            "class id {id} outside [0, {})",
            state.k_total()
        )));
    }
    let (cos, clamped) = clamp_cos(embedding.dot(&state.centers.row(id)));
    let logit = if is_positive {
        state.scale * (cos - state.margin)
    } else {
        state.scale * cos
    };
    Ok(ScoredClass { id, logit, clamped })
}

/// Core evaluation shared by the unsharded losses and the sharded simulation:
/// positive and negative logits arrive pre-grouped (one group for the plain
/// path, one group per shard otherwise). Returns the loss and, per flattened
/// group entry, the gradient weight `dL/d logit`.
pub(crate) struct LossCore<F> {
    pub loss: F,
    /// `dL/dl_p` per positive, flattened in group order (all ≤ 0).
    pub d_pos_logits: Vec<F>,
    /// `dL/dl_n` per negative, flattened in group order (all ≥ 0).
    pub d_neg_logits: Vec<F>,
}

pub(crate) fn loss_core<F: Real>(
    neg_pos_logits_groups: &[Vec<F>],
    neg_logits_groups: &[Vec<F>],
) -> LossCore<F> {
    let neg_pos_refs: Vec<&[F]> = neg_pos_logits_groups.iter().map(Vec::as_slice).collect();
    let neg_refs: Vec<&[F]> = neg_logits_groups.iter().map(Vec::as_slice).collect();
    let pos_term = one_plus_sum_exp_grouped(&neg_pos_refs);
    let neg_term = one_plus_sum_exp_grouped(&neg_refs);
    let loss = pos_term.value() + neg_term.value();
    let d_pos_logits = neg_pos_refs
        .iter()
        .flat_map(|g| g.iter().map(|&x| -pos_term.weight(x)))
        .collect();
    let d_neg_logits = neg_refs
        .iter()
        .flat_map(|g| g.iter().map(|&x| neg_term.weight(x)))
        .collect();
    LossCore {
        loss,
        d_pos_logits,
        d_neg_logits,
    }
}

/// Chains logit-level gradients into embedding/center gradients:
/// `l = s·(cos − m·[pos])`, `cos = e·c`, so `dL/de += dL/dl · s · c` and
/// `dL/dc = dL/dl · s · e` — zero when the cosine was clamped.
pub(crate) fn accumulate_class_grads<F: Real>(
    embedding: ArrayView1<'_, F>,
    state: &ClassifierState<F>,
    scored: &[ScoredClass<F>],
    d_logits: &[F],
    grads: &mut LossGrads<F>,
) {
    debug_assert_eq!(scored.len(), d_logits.len());
    for (sc, &dl) in scored.iter().zip(d_logits) {
        if sc.clamped {
            continue;
        }
        let coeff = dl * state.scale;
        grads
            .d_embedding
            .zip_mut_with(&state.centers.row(sc.id), |a, &c| *a += coeff * c);
        grads
            .d_centers
            .entry(sc.id)
            .and_modify(|g| g.zip_mut_with(&embedding, |a, &e| *a += coeff * e))
            .or_insert_with(|| embedding.mapv(|e| coeff * e));
    }
}

pub(crate) fn validate_loss_inputs<F: Real>(
    embedding: ArrayView1<'_, F>,
    pos_ids: &[usize],
    negs: &NegativeSample,
    state: &ClassifierState<F>,
) -> Result<()> {
    if embedding.len() != state.dim() {
        return Err(Error::validation(format!(
            "embedding dim {} != classifier dim {}",
            embedding.len(),
            state.dim()
        )));
    }
    if !is_unit(embedding) {
        return Err(Error::validation("embedding must be L2-normalized"));
    }
    for &p in pos_ids {
        if p >= state.k_total() {
            return Err(Error::validation(format!(
                "positive id {p} outside [0, {})",
                state.k_total()
            )));
        }
        if negs.contains(p) {
            return Err(Error::validation(format!(
                "positive id {p} appears in the negative sample"
            )));
        }
    }
    if let Some(&max) = negs.ids.last() {
        if max >= state.k_total() {
            return Err(Error::validation(format!(
                "negative id {max} outside [0, {})",
                state.k_total()
            )));
        }
    }
    Ok(())
}

/// Single-positive cluster-discrimination loss:
/// `log(1 + e^{−l_pos}) + log(1 + Σ_n e^{l_n})`.
pub fn object_loss<F: Real>(
    embedding: ArrayView1<'_, F>,
    pos_id: usize,
    negs: &NegativeSample,
    state: &ClassifierState<F>,
) -> Result<(F, LossGrads<F>)> {
    multi_positive_loss(embedding, &[pos_id], negs, state)
}

/// Multi-positive loss for OCR regions:
/// `log(1 + Σ_p e^{−l_p}) + log(1 + Σ_n e^{l_n})`. A repeated positive id
/// contributes once per occurrence (multiset semantics — tokenized text can
/// repeat tokens). With a single positive this *is* the object loss.
pub fn ocr_loss<F: Real>(
    embedding: ArrayView1<'_, F>,
    pos_ids: &[usize],
    negs: &NegativeSample,
    state: &ClassifierState<F>,
) -> Result<(F, LossGrads<F>)> {
    if pos_ids.is_empty() {
        return Err(Error::validation("ocr loss requires at least one positive"));
    }
    multi_positive_loss(embedding, pos_ids, negs, state)
}

fn multi_positive_loss<F: Real>(
    embedding: ArrayView1<'_, F>,
    pos_ids: &[usize],
    negs: &NegativeSample,
    state: &ClassifierState<F>,
) -> Result<(F, LossGrads<F>)> {
    validate_loss_inputs(embedding, pos_ids, negs, state)?;
    let pos_scored: Vec<ScoredClass<F>> = pos_ids
        .iter()
        .map(|&id| score_class(embedding, state, id, true))
        .collect::<Result<_>>()?;
    let neg_scored: Vec<ScoredClass<F>> = negs
        .ids
        .iter()
        .map(|&id| score_class(embedding, state, id, false))
        .collect::<Result<_>>()?;

    let neg_pos_logits: Vec<F> = pos_scored.iter().map(|s| -s.logit).collect();
    let neg_logits: Vec<F> = neg_scored.iter().map(|s| s.logit).collect();
    let core = loss_core(&[neg_pos_logits], &[neg_logits]);

    let mut grads = LossGrads::zeros(state.dim());
    accumulate_class_grads(embedding, state, &pos_scored, &core.d_pos_logits, &mut grads);
    accumulate_class_grads(embedding, state, &neg_scored, &core.d_neg_logits, &mut grads);
    Ok((core.loss, grads))
}
