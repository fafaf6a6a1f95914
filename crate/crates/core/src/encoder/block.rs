//! Transformer block primitives: layer normalization, the GELU feed-forward
//! network, and the composed pre-norm blocks (global and region variants).
//!
//! Every forward returns a cache holding exactly what its backward needs;
//! backwards accumulate parameter gradients into a mutable gradient struct of
//! the same shape as the parameters, so weights shared between the patch and
//! region streams sum their contributions naturally.

use crate::encoder::attention::{attention_backward, attention_forward, AttnCache, AttnParams};
use crate::error::Result;
use crate::real::Real;
use ndarray::{s, Array1, Array2, Axis};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Real> LayerNormParams<F> {
    /// gamma = 1, beta = 0: the identity-scale initialization.
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    /// All-zero container for gradient accumulation.
    pub fn zeros(dim: usize) -> Self {
        LayerNormParams {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.gamma += &other.gamma;
        self.beta += &other.beta;
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    x_hat: Array2<F>,
    inv_std: Array1<F>,
}

/// Row-wise layer norm: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn layer_norm_forward<F: Real>(
    params: &LayerNormParams<F>,
    x: &Array2<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let d = F::from_f64(x.ncols() as f64);
    let eps = F::from_f64(LAYER_NORM_EPS);
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in x_hat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(F::zero(), |a, b| a + b) / d;
        let s = (var + eps).sqrt().recip();
        row.mapv_inplace(|v| (v - mean) * s);
        *is = s;
    }
    let y = &x_hat * &params.gamma + &params.beta;
    (y, LayerNormCache { x_hat, inv_std })
}

/// Returns the input gradient and accumulates dgamma/dbeta into `grads`.
pub fn layer_norm_backward<F: Real>(
    params: &LayerNormParams<F>,
    cache: &LayerNormCache<F>,
    d_out: &Array2<F>,
    grads: &mut LayerNormParams<F>,
) -> Array2<F> {
    grads.gamma += &(d_out * &cache.x_hat).sum_axis(Axis(0));
    grads.beta += &d_out.sum_axis(Axis(0));
    let d = F::from_f64(d_out.ncols() as f64);
    let d_x_hat = d_out * &params.gamma;
    let mut dx = d_x_hat.clone();
    for ((mut row, x_hat_row), &inv_std) in dx
        .outer_iter_mut()
        .zip(cache.x_hat.outer_iter())
        .zip(cache.inv_std.iter())
    {
        let sum_d = row.sum() / d;
        let sum_dx = row
            .iter()
            .zip(x_hat_row.iter())
            .map(|(&g, &h)| g * h)
            .fold(F::zero(), |a, b| a + b)
            / d;
        for (g, &h) in row.iter_mut().zip(x_hat_row.iter()) {
            *g = inv_std * (*g - sum_d - h * sum_dx);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation — smooth, so finite differences stay well-behaved)
// ---------------------------------------------------------------------------

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu<F: Real>(x: F) -> F {
    let k = F::from_f64(GELU_K);
    let c = F::from_f64(GELU_C);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_prime<F: Real>(x: F) -> F {
    let k = F::from_f64(GELU_K);
    let c = F::from_f64(GELU_C);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (F::one() + three * c * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

// ---------------------------------------------------------------------------
// Feed-forward network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    /// (hidden, D) expansion.
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    /// (D, hidden) contraction.
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

impl<F: Real> MlpParams<F> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        MlpParams {
            w1: Array2::zeros((hidden, dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((dim, hidden)),
            b2: Array1::zeros(dim),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    x: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

/// `y = gelu(x W1^T + b1) W2^T + b2`.
pub fn mlp_forward<F: Real>(params: &MlpParams<F>, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
    let pre_act = x.dot(&params.w1.t()) + &params.b1;
    let act = pre_act.mapv(gelu);
    let y = act.dot(&params.w2.t()) + &params.b2;
    (
        y,
        MlpCache {
            x: x.clone(),
            pre_act,
            act,
        },
    )
}

pub fn mlp_backward<F: Real>(
    params: &MlpParams<F>,
    cache: &MlpCache<F>,
    d_out: &Array2<F>,
    grads: &mut MlpParams<F>,
) -> Array2<F> {
    grads.w2 += &d_out.t().dot(&cache.act);
    grads.b2 += &d_out.sum_axis(Axis(0));
    let d_act = d_out.dot(&params.w2);
    let d_pre = &d_act * &cache.pre_act.mapv(gelu_prime);
    grads.w1 += &d_pre.t().dot(&cache.x);
    grads.b1 += &d_pre.sum_axis(Axis(0));
    d_pre.dot(&params.w1)
}

// ---------------------------------------------------------------------------
// Composed blocks
// ---------------------------------------------------------------------------

/// One transformer layer's weights: pre-norm attention then pre-norm MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1: LayerNormParams<F>,
    pub attn: AttnParams<F>,
    pub ln2: LayerNormParams<F>,
    pub mlp: MlpParams<F>,
}

impl<F: Real> LayerParams<F> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        LayerParams {
            ln1: LayerNormParams::zeros(dim),
            attn: AttnParams::zeros(dim),
            ln2: LayerNormParams::zeros(dim),
            mlp: MlpParams::zeros(dim, hidden),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.ln1.add_assign(&other.ln1);
        self.attn.add_assign(&other.attn);
        self.ln2.add_assign(&other.ln2);
        self.mlp.add_assign(&other.mlp);
    }
}

#[derive(Debug, Clone)]
pub struct GlobalBlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttnCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

/// Pre-norm self-attention block over all tokens (cls + patches):
/// `x += attn(LN1(x)); x += mlp(LN2(x))`.
pub fn global_block_forward<F: Real>(
    layer: &LayerParams<F>,
    heads: usize,
    x: &Array2<F>,
) -> Result<(Array2<F>, GlobalBlockCache<F>)> {
    let (normed, ln1) = layer_norm_forward(&layer.ln1, x);
    let (attn_out, attn) = attention_forward(&layer.attn, heads, &normed, &normed, None)?;
    let x2 = x + &attn_out;
    let (normed2, ln2) = layer_norm_forward(&layer.ln2, &x2);
    let (mlp_out, mlp) = mlp_forward(&layer.mlp, &normed2);
    let x3 = &x2 + &mlp_out;
    Ok((
        x3,
        GlobalBlockCache {
            ln1,
            attn,
            ln2,
            mlp,
        },
    ))
}

pub fn global_block_backward<F: Real>(
    layer: &LayerParams<F>,
    heads: usize,
    cache: &GlobalBlockCache<F>,
    d_out: &Array2<F>,
    grads: &mut LayerParams<F>,
) -> Array2<F> {
    let d_normed2 = mlp_backward(&layer.mlp, &cache.mlp, d_out, &mut grads.mlp);
    let d_x2 = d_out + &layer_norm_backward(&layer.ln2, &cache.ln2, &d_normed2, &mut grads.ln2);
    let (d_q_in, d_kv_in) =
        attention_backward(&layer.attn, heads, &cache.attn, &d_x2, &mut grads.attn);
    let d_normed = d_q_in + d_kv_in;
    &d_x2 + &layer_norm_backward(&layer.ln1, &cache.ln1, &d_normed, &mut grads.ln1)
}

#[derive(Debug, Clone)]
pub struct RegionBlockCache<F> {
    ln1_x: LayerNormCache<F>,
    self_attn: AttnCache<F>,
    ln2_x: LayerNormCache<F>,
    mlp_x: MlpCache<F>,
    ln1_r: LayerNormCache<F>,
    region_attn: AttnCache<F>,
    ln2_r: LayerNormCache<F>,
    mlp_r: MlpCache<F>,
}

/// Region transformer layer. The patch stream runs the standard block; in
/// parallel, region queries cross-attend to this layer's normalized patch
/// tokens (cls excluded) under the visibility mask, then take their own
/// residual + MLP pass. Both streams share one set of layer weights; the
/// region stream never feeds back into the patch stream.
pub fn region_block_forward<F: Real>(
    layer: &LayerParams<F>,
    heads: usize,
    x: &Array2<F>,
    region_queries: &Array2<F>,
    visible: &Array2<bool>,
) -> Result<(Array2<F>, Array2<F>, RegionBlockCache<F>)> {
    let (normed, ln1_x) = layer_norm_forward(&layer.ln1, x);
    let (attn_out, self_attn) = attention_forward(&layer.attn, heads, &normed, &normed, None)?;
    let x2 = x + &attn_out;
    let (normed2, ln2_x) = layer_norm_forward(&layer.ln2, &x2);
    let (mlp_out, mlp_x) = mlp_forward(&layer.mlp, &normed2);
    let x3 = &x2 + &mlp_out;

    let patch_ctx = normed.slice(s![1.., ..]).to_owned();
    let (rq_normed, ln1_r) = layer_norm_forward(&layer.ln1, region_queries);
    let (region_out, region_attn) =
        attention_forward(&layer.attn, heads, &rq_normed, &patch_ctx, Some(visible))?;
    let rq2 = region_queries + &region_out;
    let (rq_normed2, ln2_r) = layer_norm_forward(&layer.ln2, &rq2);
    let (rq_mlp_out, mlp_r) = mlp_forward(&layer.mlp, &rq_normed2);
    let rq3 = &rq2 + &rq_mlp_out;

    Ok((
        x3,
        rq3,
        RegionBlockCache {
            ln1_x,
            self_attn,
            ln2_x,
            mlp_x,
            ln1_r,
            region_attn,
            ln2_r,
            mlp_r,
        },
    ))
}

/// Backward of [`region_block_forward`]; returns `(d_x, d_region_queries)`.
pub fn region_block_backward<F: Real>(
    layer: &LayerParams<F>,
    heads: usize,
    cache: &RegionBlockCache<F>,
    d_x_out: &Array2<F>,
    d_rq_out: &Array2<F>,
    grads: &mut LayerParams<F>,
) -> (Array2<F>, Array2<F>) {
    // Region stream, reversed.
    let d_rq_normed2 = mlp_backward(&layer.mlp, &cache.mlp_r, d_rq_out, &mut grads.mlp);
    let d_rq2 =
        d_rq_out + &layer_norm_backward(&layer.ln2, &cache.ln2_r, &d_rq_normed2, &mut grads.ln2);
    let (d_rq_normed, d_patch_ctx) =
        attention_backward(&layer.attn, heads, &cache.region_attn, &d_rq2, &mut grads.attn);
    let d_rq =
        &d_rq2 + &layer_norm_backward(&layer.ln1, &cache.ln1_r, &d_rq_normed, &mut grads.ln1);

    // Patch stream, reversed; the region keys/values contribute gradient to
    // the shared LN1 output on the patch rows.
    let d_normed2 = mlp_backward(&layer.mlp, &cache.mlp_x, d_x_out, &mut grads.mlp);
    let d_x2 = d_x_out + &layer_norm_backward(&layer.ln2, &cache.ln2_x, &d_normed2, &mut grads.ln2);
    let (d_q_in, d_kv_in) =
        attention_backward(&layer.attn, heads, &cache.self_attn, &d_x2, &mut grads.attn);
    let mut d_normed = d_q_in + d_kv_in;
    d_normed.slice_mut(s![1.., ..]).zip_mut_with(&d_patch_ctx, |a, &b| *a = *a + b);
    let d_x = &d_x2 + &layer_norm_backward(&layer.ln1, &cache.ln1_x, &d_normed, &mut grads.ln1);
    (d_x, d_rq)
}
