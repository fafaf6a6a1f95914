//! Vision encoder: patch embedding, global transformer layers, and region
//! transformer layers that emit one embedding per sampled region.
//!
//! The first `T − R` layers run standard self-attention over cls + patch
//! tokens. Region queries are then initialized as the mean of each region's
//! visible patch embeddings, and the last `R` layers run two parallel streams
//! with shared weights: patch tokens keep self-attending while region queries
//! cross-attend to the patch tokens under the region visibility mask.
//!
//! Forward and backward are hand-written with per-layer caches; no autograd.
//! Everything is generic over [`Real`] so tests can run oracles at `f64`.

pub mod attention;
pub mod block;

use crate::error::{Error, Result};
use crate::linalg::all_finite2;
use crate::mask::{build_visibility_mask, VisibilityMask};
use crate::real::Real;
use crate::region::Region;
use crate::rng::rng_from_seed;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_distr::{Distribution, Normal};

pub use attention::{region_attention, region_attention_batched, AttnParams};
pub use block::{LayerNormParams, LayerParams, MlpParams};

use block::{
    global_block_backward, global_block_forward, region_block_backward, region_block_forward,
    GlobalBlockCache, RegionBlockCache,
};

/// Standard deviation for weight initialization.
const INIT_STD: f64 = 0.02;

/// Hidden width of every feed-forward network, as a multiple of the model dim.
pub const MLP_RATIO: usize = 4;

/// Architecture hyperparameters. `layers` is the total depth T; the last
/// `region_layers` = R of them are region layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub region_layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub patch: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale default: 6 layers (2 of them region layers), 4 heads,
    /// dim 64, 8px patches on 32x32 RGB images.
    fn default() -> Self {
        EncoderConfig {
            layers: 6,
            region_layers: 2,
            heads: 4,
            dim: 64,
            patch: 8,
            channels: 3,
            image_h: 32,
            image_w: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::config("encoder dims must be non-zero"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.region_layers == 0 || self.region_layers >= self.layers {
            return Err(Error::config(format!(
                "need 1 <= region_layers < layers, got {} of {}",
                self.region_layers, self.layers
            )));
        }
        if self.image_h == 0
            || self.image_w == 0
            || self.image_h % self.patch != 0
            || self.image_w % self.patch != 0
        {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        Ok(())
    }

    /// Patch-grid shape (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        MLP_RATIO * self.dim
    }

    pub fn global_layers(&self) -> usize {
        self.layers - self.region_layers
    }

    /// Flattened pixel count of one patch (the patch-projection input width).
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Token state after patch embedding or a full encode: the cls token and the
/// patch tokens, separated.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F> {
    pub cls: Array1<F>,
    pub patches: Array2<F>,
    pub grid: (usize, usize),
    pub p: usize,
}

impl<F: Real> TokenSequence<F> {
    fn from_stacked(stacked: &Array2<F>, grid: (usize, usize), p: usize) -> Self {
        TokenSequence {
            cls: stacked.row(0).to_owned(),
            patches: stacked.slice(s![1.., ..]).to_owned(),
            grid,
            p,
        }
    }

    /// Rebuilds the (N_p + 1) x D matrix with cls in row 0.
    pub fn stacked(&self) -> Array2<F> {
        let mut out = Array2::zeros((1 + self.patches.nrows(), self.patches.ncols()));
        out.row_mut(0).assign(&self.cls);
        out.slice_mut(s![1.., ..]).assign(&self.patches);
        out
    }
}

/// Per-region output embeddings, L x D, rows in sampled-region order.
/// Not L2-normalized; callers normalize before computing cosine logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbeddings<F> {
    pub values: Array2<F>,
}

impl<F: Real> RegionEmbeddings<F> {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// All learnable weights of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    /// (D, p*p*C): patch projection, equivalent to a stride-p conv.
    pub patch_proj: Array2<F>,
    pub patch_bias: Array1<F>,
    pub cls: Array1<F>,
    /// (N_p + 1, D): positional embedding, row 0 for the cls token.
    pub pos: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
}

impl<F: Real> EncoderParams<F> {
    /// Gaussian(0, 0.02) weights, identity layer norms, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid init std");
        let mut gauss2 = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| F::from_f64(normal.sample(&mut rng)))
        };
        let d = config.dim;
        let patch_proj = gauss2(d, config.patch_len());
        let pos = gauss2(config.n_patches() + 1, d);
        let mut rng2 = rng_from_seed(crate::rng::derive_seed(seed, &[1]));
        let mut gauss_layer2 = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| F::from_f64(normal.sample(&mut rng2)))
        };
        let hidden = config.mlp_hidden();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1: LayerNormParams::identity(d),
                attn: AttnParams {
                    wq: gauss_layer2(d, d),
                    bq: Array1::zeros(d),
                    wk: gauss_layer2(d, d),
                    bk: Array1::zeros(d),
                    wv: gauss_layer2(d, d),
                    bv: Array1::zeros(d),
                    wo: gauss_layer2(d, d),
                    bo: Array1::zeros(d),
                },
                ln2: LayerNormParams::identity(d),
                mlp: MlpParams {
                    w1: gauss_layer2(hidden, d),
                    b1: Array1::zeros(hidden),
                    w2: gauss_layer2(d, hidden),
                    b2: Array1::zeros(d),
                },
            })
            .collect();
        let mut rng3 = rng_from_seed(crate::rng::derive_seed(seed, &[2]));
        let cls = Array1::from_shape_fn(d, |_| F::from_f64(normal.sample(&mut rng3)));
        Ok(EncoderParams {
            patch_proj,
            patch_bias: Array1::zeros(d),
            cls,
            pos,
            layers,
        })
    }

    /// Zero-filled parameters of the same shapes — a gradient container.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.dim;
        EncoderParams {
            patch_proj: Array2::zeros((d, config.patch_len())),
            patch_bias: Array1::zeros(d),
            cls: Array1::zeros(d),
            pos: Array2::zeros((config.n_patches() + 1, d)),
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(d, config.mlp_hidden()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.patch_proj += &other.patch_proj;
        self.patch_bias += &other.patch_bias;
        self.cls += &other.cls;
        self.pos += &other.pos;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: F) {
        self.for_each_mut(|_, _, slice| {
            for v in slice {
                *v = *v * factor;
            }
        });
    }

    /// Sum of squared entries over every tensor, at f64.
    pub fn sq_l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (_, _, data) in self.tensors() {
            for &v in data {
                let v = v.as_f64();
                acc += v * v;
            }
        }
        acc
    }

    /// Named tensors in a stable order: (name, dims, data). The order and the
    /// names are the checkpoint and optimizer-state contract.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out: Vec<(String, Vec<usize>, &[F])> = Vec::new();
        macro_rules! push {
            ($name:expr, $a:expr) => {
                out.push((
                    $name,
                    $a.shape().to_vec(),
                    $a.as_slice().expect("owned arrays are standard layout"),
                ));
            };
        }
        push!("encoder.patch_proj".to_string(), self.patch_proj);
        push!("encoder.patch_bias".to_string(), self.patch_bias);
        push!("encoder.cls".to_string(), self.cls);
        push!("encoder.pos".to_string(), self.pos);
        for (i, layer) in self.layers.iter().enumerate() {
            push!(format!("encoder.layer{i}.ln1.gamma"), layer.ln1.gamma);
            push!(format!("encoder.layer{i}.ln1.beta"), layer.ln1.beta);
            push!(format!("encoder.layer{i}.attn.wq"), layer.attn.wq);
            push!(format!("encoder.layer{i}.attn.bq"), layer.attn.bq);
            push!(format!("encoder.layer{i}.attn.wk"), layer.attn.wk);
            push!(format!("encoder.layer{i}.attn.bk"), layer.attn.bk);
            push!(format!("encoder.layer{i}.attn.wv"), layer.attn.wv);
            push!(format!("encoder.layer{i}.attn.bv"), layer.attn.bv);
            push!(format!("encoder.layer{i}.attn.wo"), layer.attn.wo);
            push!(format!("encoder.layer{i}.attn.bo"), layer.attn.bo);
            push!(format!("encoder.layer{i}.ln2.gamma"), layer.ln2.gamma);
            push!(format!("encoder.layer{i}.ln2.beta"), layer.ln2.beta);
            push!(format!("encoder.layer{i}.mlp.w1"), layer.mlp.w1);
            push!(format!("encoder.layer{i}.mlp.b1"), layer.mlp.b1);
            push!(format!("encoder.layer{i}.mlp.w2"), layer.mlp.w2);
            push!(format!("encoder.layer{i}.mlp.b2"), layer.mlp.b2);
        }
        out
    }

    /// Mutable view of every named tensor, same order and names as
    /// [`EncoderParams::tensors`] (asserted by a test).
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [F])) {
        macro_rules! visit {
            ($name:expr, $a:expr) => {{
                let dims = $a.shape().to_vec();
                f(
                    &$name,
                    &dims,
                    $a.as_slice_mut().expect("owned arrays are standard layout"),
                );
            }};
        }
        visit!("encoder.patch_proj", self.patch_proj);
        visit!("encoder.patch_bias", self.patch_bias);
        visit!("encoder.cls", self.cls);
        visit!("encoder.pos", self.pos);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit!(format!("encoder.layer{i}.ln1.gamma"), layer.ln1.gamma);
            visit!(format!("encoder.layer{i}.ln1.beta"), layer.ln1.beta);
            visit!(format!("encoder.layer{i}.attn.wq"), layer.attn.wq);
            visit!(format!("encoder.layer{i}.attn.bq"), layer.attn.bq);
            visit!(format!("encoder.layer{i}.attn.wk"), layer.attn.wk);
            visit!(format!("encoder.layer{i}.attn.bk"), layer.attn.bk);
            visit!(format!("encoder.layer{i}.attn.wv"), layer.attn.wv);
            visit!(format!("encoder.layer{i}.attn.bv"), layer.attn.bv);
            visit!(format!("encoder.layer{i}.attn.wo"), layer.attn.wo);
            visit!(format!("encoder.layer{i}.attn.bo"), layer.attn.bo);
            visit!(format!("encoder.layer{i}.ln2.gamma"), layer.ln2.gamma);
            visit!(format!("encoder.layer{i}.ln2.beta"), layer.ln2.beta);
            visit!(format!("encoder.layer{i}.mlp.w1"), layer.mlp.w1);
            visit!(format!("encoder.layer{i}.mlp.b1"), layer.mlp.b1);
            visit!(format!("encoder.layer{i}.mlp.w2"), layer.mlp.w2);
            visit!(format!("encoder.layer{i}.mlp.b2"), layer.mlp.b2);
        }
    }
}

// ---------------------------------------------------------------------------
// Patch embedding
// ---------------------------------------------------------------------------

/// Cuts the image into p x p patches (row-major), flattens each, applies the
/// patch projection, prepends the cls token, and adds positional embeddings.
pub fn patchify<F: Real>(
    pixels: &Array3<F>,
    params: &EncoderParams<F>,
    config: &EncoderConfig,
) -> Result<TokenSequence<F>> {
    let (stacked, _) = patchify_stacked(pixels, params, config)?;
    Ok(TokenSequence::from_stacked(&stacked, config.grid(), config.patch))
}

/// As [`patchify`] but returns the stacked (N_p+1) x D token matrix plus the
/// flattened patch pixels needed by the backward pass.
fn patchify_stacked<F: Real>(
    pixels: &Array3<F>,
    params: &EncoderParams<F>,
    config: &EncoderConfig,
) -> Result<(Array2<F>, Array2<F>)> {
    config.validate()?;
    let (h, w, c) = pixels.dim();
    if h != config.image_h || w != config.image_w || c != config.channels {
        return Err(Error::validation(format!(
            "image {h}x{w}x{c} does not match configured {}x{}x{}",
            config.image_h, config.image_w, config.channels
        )));
    }
    let p = config.patch;
    let (rows, cols) = config.grid();
    let mut flat = Array2::zeros((rows * cols, config.patch_len()));
    for r in 0..rows {
        for col in 0..cols {
            let mut k = 0;
            let mut row = flat.row_mut(r * cols + col);
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        row[k] = pixels[[r * p + dy, col * p + dx, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    let projected = flat.dot(&params.patch_proj.t()) + &params.patch_bias;
    let mut stacked = Array2::zeros((rows * cols + 1, config.dim));
    stacked.row_mut(0).assign(&params.cls);
    stacked.slice_mut(s![1.., ..]).assign(&projected);
    stacked += &params.pos;
    Ok((stacked, flat))
}

// ---------------------------------------------------------------------------
// Full encode
// ---------------------------------------------------------------------------

/// Everything the backward pass needs from one forward encode.
pub struct EncodeCache<F> {
    flat_patches: Array2<F>,
    global: Vec<GlobalBlockCache<F>>,
    region: Vec<RegionBlockCache<F>>,
    mask: VisibilityMask,
}

impl<F> EncodeCache<F> {
    pub fn mask(&self) -> &VisibilityMask {
        &self.mask
    }
}

/// Runs the encoder on one image: global layers, region-query initialization
/// (mean of visible patch embeddings), then region layers. Returns the final
/// token sequence and the unnormalized per-region embeddings.
pub fn encode<F: Real>(
    pixels: &Array3<F>,
    sampled: &[Region],
    params: &EncoderParams<F>,
    config: &EncoderConfig,
) -> Result<(TokenSequence<F>, RegionEmbeddings<F>)> {
    let (tokens, regions, _) = encode_with_cache(pixels, sampled, params, config)?;
    Ok((tokens, regions))
}

/// [`encode`] variant that also returns the activation cache for
/// [`encode_backward`].
pub fn encode_with_cache<F: Real>(
    pixels: &Array3<F>,
    sampled: &[Region],
    params: &EncoderParams<F>,
    config: &EncoderConfig,
) -> Result<(TokenSequence<F>, RegionEmbeddings<F>, EncodeCache<F>)> {
    let (mut x, flat_patches) = patchify_stacked(pixels, params, config)?;
    let mask = build_visibility_mask(sampled, config.grid(), config.patch)?;

    let mut global = Vec::with_capacity(config.global_layers());
    for layer in &params.layers[..config.global_layers()] {
        let (next, cache) = global_block_forward(layer, config.heads, &x)?;
        x = next;
        global.push(cache);
    }

    let mut rq = init_region_queries(&x, &mask);
    let mut region = Vec::with_capacity(config.region_layers);
    for layer in &params.layers[config.global_layers()..] {
        let (next_x, next_rq, cache) =
            region_block_forward(layer, config.heads, &x, &rq, mask.as_bool())?;
        x = next_x;
        rq = next_rq;
        region.push(cache);
    }

    if !all_finite2(x.view()) || !all_finite2(rq.view()) {
        return Err(Error::numeric("non-finite encoder activations"));
    }
    Ok((
        TokenSequence::from_stacked(&x, config.grid(), config.patch),
        RegionEmbeddings { values: rq },
        EncodeCache {
            flat_patches,
            global,
            region,
            mask,
        },
    ))
}

/// Mean of each region's visible patch embeddings; `x` is the stacked token
/// matrix with cls in row 0.
fn init_region_queries<F: Real>(x: &Array2<F>, mask: &VisibilityMask) -> Array2<F> {
    let mut rq = Array2::zeros((mask.num_regions(), x.ncols()));
    for l in 0..mask.num_regions() {
        let vis = mask.visible_indices(l);
        let inv = F::from_f64(1.0 / vis.len() as f64);
        let mut row = rq.row_mut(l);
        for &j in &vis {
            row.zip_mut_with(&x.row(1 + j), |a, &b| *a = *a + b * inv);
        }
    }
    rq
}

/// Backward of [`encode_with_cache`] for a gradient on the region embeddings;
/// returns parameter gradients of the same shape as the parameters.
pub fn encode_backward<F: Real>(
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    cache: &EncodeCache<F>,
    d_regions: &Array2<F>,
) -> Result<EncoderParams<F>> {
    if d_regions.nrows() != cache.mask.num_regions() || d_regions.ncols() != config.dim {
        return Err(Error::validation("region gradient shape mismatch"));
    }
    let mut grads = EncoderParams::zeros(config);
    let mut d_rq = d_regions.clone();
    let mut d_x = Array2::zeros((config.n_patches() + 1, config.dim));

    for i in (config.global_layers()..config.layers).rev() {
        let layer_cache = &cache.region[i - config.global_layers()];
        let (next_dx, next_drq) = region_block_backward(
            &params.layers[i],
            config.heads,
            layer_cache,
            &d_x,
            &d_rq,
            &mut grads.layers[i],
        );
        d_x = next_dx;
        d_rq = next_drq;
    }

    // Region-query initialization: each query was the mean of its visible
    // patch embeddings, so its gradient spreads uniformly over those rows.
    for l in 0..cache.mask.num_regions() {
        let vis = cache.mask.visible_indices(l);
        let inv = F::from_f64(1.0 / vis.len() as f64);
        for &j in &vis {
            let mut row = d_x.row_mut(1 + j);
            row.zip_mut_with(&d_rq.row(l), |a, &b| *a = *a + b * inv);
        }
    }

    for (idx, (layer, layer_cache)) in params.layers[..config.global_layers()]
        .iter()
        .zip(&cache.global)
        .enumerate()
        .rev()
    {
        d_x = global_block_backward(layer, config.heads, layer_cache, &d_x, &mut grads.layers[idx]);
    }

    // Patch embedding: x0 = [cls; flat W^T + b] + pos.
    grads.pos += &d_x;
    grads.cls += &d_x.row(0);
    let d_proj = d_x.slice(s![1.., ..]);
    grads.patch_proj += &d_proj.t().dot(&cache.flat_patches);
    grads.patch_bias += &d_proj.sum_axis(Axis(0));
    Ok(grads)
}
