//! Multi-head attention with optional patch-visibility masking.
//!
//! One kernel serves both streams: self-attention passes the same matrix as
//! query and context inputs, region attention passes region queries against
//! patch tokens plus a visibility mask. Masked positions never receive
//! weight — the softmax is computed over the visible entries only, so masked
//! weights are exactly zero rather than merely tiny.

use crate::error::{Error, Result};
use crate::mask::VisibilityMask;
use crate::real::Real;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

/// Projection weights for one attention layer. Each `w*` is (D, D) applied as
/// `x W^T + b`; heads are column slices of the projected matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<F> {
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
}

impl<F: Real> AttnParams<F> {
    pub fn zeros(dim: usize) -> Self {
        AttnParams {
            wq: Array2::zeros((dim, dim)),
            bq: Array1::zeros(dim),
            wk: Array2::zeros((dim, dim)),
            bk: Array1::zeros(dim),
            wv: Array2::zeros((dim, dim)),
            bv: Array1::zeros(dim),
            wo: Array2::zeros((dim, dim)),
            bo: Array1::zeros(dim),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.wq += &other.wq;
        self.bq += &other.bq;
        self.wk += &other.wk;
        self.bk += &other.bk;
        self.wv += &other.wv;
        self.bv += &other.bv;
        self.wo += &other.wo;
        self.bo += &other.bo;
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    q_input: Array2<F>,
    kv_input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Post-softmax weights, (heads, Nq, Nk); masked entries are exactly 0.
    weights: Array3<F>,
    /// Head concatenation before the output projection.
    concat: Array2<F>,
}

/// Stable softmax over each row, restricted to visible columns when a mask is
/// given; masked columns come out exactly zero.
fn masked_softmax_rows<F: Real>(
    scores: &mut Array2<F>,
    visible: Option<&ArrayView2<'_, bool>>,
) -> Result<()> {
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let mut max = F::neg_infinity();
        let mut any_visible = false;
        for (j, &x) in row.iter().enumerate() {
            if visible.is_none_or(|m| m[[i, j]]) {
                any_visible = true;
                if x > max {
                    max = x;
                }
            }
        }
        if !any_visible {
            return Err(Error::validation(format!(
                "attention row {i} has no visible position"
            )));
        }
        if !max.is_finite() {
            return Err(Error::numeric(format!(
                "attention row {i} has non-finite scores"
            )));
        }
        let mut sum = F::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if visible.is_none_or(|m| m[[i, j]]) {
                *x = (*x - max).exp();
                sum = sum + *x;
            } else {
                *x = F::zero();
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
    Ok(())
}

/// Multi-head attention: projects `q_input` to queries and `kv_input` to
/// keys/values, runs per-head `softmax(q k^T / sqrt(d_k) [+ mask]) v`,
/// concatenates heads, and applies the output projection.
pub fn attention_forward<F: Real>(
    params: &AttnParams<F>,
    heads: usize,
    q_input: &Array2<F>,
    kv_input: &Array2<F>,
    visible: Option<&Array2<bool>>,
) -> Result<(Array2<F>, AttnCache<F>)> {
    let dim = params.wq.nrows();
    if dim % heads != 0 {
        return Err(Error::config(format!(
            "model dim {dim} not divisible by {heads} heads"
        )));
    }
    if q_input.ncols() != dim || kv_input.ncols() != dim {
        return Err(Error::validation("attention input width != model dim"));
    }
    if let Some(m) = visible {
        if m.nrows() != q_input.nrows() || m.ncols() != kv_input.nrows() {
            return Err(Error::validation("mask shape does not match attention shape"));
        }
    }
    let d_k = dim / heads;
    let scale = F::from_f64(1.0 / (d_k as f64).sqrt());

    let q = q_input.dot(&params.wq.t()) + &params.bq;
    let k = kv_input.dot(&params.wk.t()) + &params.bk;
    let v = kv_input.dot(&params.wv.t()) + &params.bv;

    let n_q = q.nrows();
    let n_k = k.nrows();
    let mut weights = Array3::zeros((heads, n_q, n_k));
    let mut concat = Array2::zeros((n_q, dim));
    for h in 0..heads {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let q_h = q.slice(cols);
        let k_h = k.slice(cols);
        let v_h = v.slice(cols);
        let mut scores = q_h.dot(&k_h.t()) * scale;
        masked_softmax_rows(&mut scores, visible.map(|m| m.view()).as_ref())?;
        concat.slice_mut(cols).assign(&scores.dot(&v_h));
        weights.index_axis_mut(Axis(0), h).assign(&scores);
    }
    let out = concat.dot(&params.wo.t()) + &params.bo;
    Ok((
        out,
        AttnCache {
            q_input: q_input.clone(),
            kv_input: kv_input.clone(),
            q,
            k,
            v,
            weights,
            concat,
        },
    ))
}

/// Backward of [`attention_forward`]: returns `(d_q_input, d_kv_input)` and
/// accumulates parameter gradients. Masked positions held at zero weight
/// contribute no gradient, which the uniform softmax-backward formula
/// produces on its own (their weight factor is 0).
pub fn attention_backward<F: Real>(
    params: &AttnParams<F>,
    heads: usize,
    cache: &AttnCache<F>,
    d_out: &Array2<F>,
    grads: &mut AttnParams<F>,
) -> (Array2<F>, Array2<F>) {
    let dim = params.wq.nrows();
    let d_k = dim / heads;
    let scale = F::from_f64(1.0 / (d_k as f64).sqrt());

    grads.wo += &d_out.t().dot(&cache.concat);
    grads.bo += &d_out.sum_axis(Axis(0));
    let d_concat = d_out.dot(&params.wo);

    let mut d_q = Array2::zeros(cache.q.raw_dim());
    let mut d_k_mat = Array2::zeros(cache.k.raw_dim());
    let mut d_v = Array2::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let q_h = cache.q.slice(cols);
        let k_h = cache.k.slice(cols);
        let v_h = cache.v.slice(cols);
        let a = cache.weights.index_axis(Axis(0), h);
        let d_concat_h = d_concat.slice(cols);

        d_v.slice_mut(cols).assign(&a.t().dot(&d_concat_h));
        let d_a = d_concat_h.dot(&v_h.t());
        // softmax backward rowwise: ds = a ⊙ (d_a − sum(a ⊙ d_a));
        // zero weights yield zero score gradient, covering masked entries.
        let inner = (&a * &d_a).sum_axis(Axis(1));
        let d_scores = (&d_a - &inner.insert_axis(Axis(1))) * &a * scale;
        d_q.slice_mut(cols).assign(&d_scores.dot(&k_h));
        d_k_mat.slice_mut(cols).assign(&d_scores.t().dot(&q_h));
    }

    grads.wq += &d_q.t().dot(&cache.q_input);
    grads.bq += &d_q.sum_axis(Axis(0));
    grads.wk += &d_k_mat.t().dot(&cache.kv_input);
    grads.bk += &d_k_mat.sum_axis(Axis(0));
    grads.wv += &d_v.t().dot(&cache.kv_input);
    grads.bv += &d_v.sum_axis(Axis(0));

    let d_q_input = d_q.dot(&params.wq);
    let d_kv_input = d_k_mat.dot(&params.wk) + d_v.dot(&params.wv);
    (d_q_input, d_kv_input)
}

/// Mask-guided region attention over one image's patch tokens: each of the L
/// region queries attends only to its visible patches.
pub fn region_attention<F: Real>(
    params: &AttnParams<F>,
    heads: usize,
    queries: &Array2<F>,
    patch_tokens: &Array2<F>,
    mask: &VisibilityMask,
) -> Result<Array2<F>> {
    if queries.nrows() != mask.num_regions() || patch_tokens.nrows() != mask.num_patches() {
        return Err(Error::validation("mask shape does not match attention shape"));
    }
    let (out, _) = attention_forward(params, heads, queries, patch_tokens, Some(mask.as_bool()))?;
    Ok(out)
}

/// Batched region attention with queries shaped (L, B, D): image `b`
/// contributes queries `[.., b, ..]`, its own patch tokens, and its own mask.
/// Output has the same (L, B, D) shape.
pub fn region_attention_batched<F: Real>(
    params: &AttnParams<F>,
    heads: usize,
    queries: &Array3<F>,
    patch_tokens: &[Array2<F>],
    masks: &[VisibilityMask],
) -> Result<Array3<F>> {
    let (l, b, d) = queries.dim();
    if patch_tokens.len() != b || masks.len() != b {
        return Err(Error::validation(format!(
            "batched region attention: {b} query columns but {} token sets and {} masks",
            patch_tokens.len(),
            masks.len()
        )));
    }
    let mut out = Array3::zeros((l, b, d));
    for i in 0..b {
        let q_b = queries.index_axis(Axis(1), i).to_owned();
        let o_b = region_attention(params, heads, &q_b, &patch_tokens[i], &masks[i])?;
        out.index_axis_mut(Axis(1), i).assign(&o_b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_visibility_mask;
    use crate::region::{BBox, Region};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_params(dim: usize, seed: u64) -> AttnParams<f64> {
        let mut rng = rng_from_seed(seed);
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-0.5..0.5))
        };
        let wq = mat(dim, dim);
        let wk = mat(dim, dim);
        let wv = mat(dim, dim);
        let wo = mat(dim, dim);
        let mut rng2 = rng_from_seed(seed + 1);
        let mut vec = |n: usize| Array1::from_shape_fn(n, |_| rng2.random_range(-0.1..0.1));
        AttnParams {
            wq,
            bq: vec(dim),
            wk,
            bk: vec(dim),
            wv,
            bv: vec(dim),
            wo,
            bo: vec(dim),
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Independent oracle: for each region, physically gather the visible
    /// tokens into a dense context and run unmasked attention on it.
    fn slice_and_attend_oracle(
        params: &AttnParams<f64>,
        heads: usize,
        queries: &Array2<f64>,
        tokens: &Array2<f64>,
        mask: &VisibilityMask,
    ) -> Array2<f64> {
        let mut out = Array2::zeros((queries.nrows(), queries.ncols()));
        for l in 0..queries.nrows() {
            let vis = mask.visible_indices(l);
            let mut ctx = Array2::zeros((vis.len(), tokens.ncols()));
            for (row, &j) in vis.iter().enumerate() {
                ctx.row_mut(row).assign(&tokens.row(j));
            }
            let q = queries.slice(s![l..l + 1, ..]).to_owned();
            let (o, _) = attention_forward(params, heads, &q, &ctx, None).unwrap();
            out.row_mut(l).assign(&o.row(0));
        }
        out
    }

    #[test]
    fn all_visible_mask_equals_unmasked_attention() {
        let params = random_params(8, 1);
        let queries = random_matrix(3, 8, 2);
        let tokens = random_matrix(16, 8, 3);
        let mask = build_visibility_mask(
            &[
                Region::object(BBox::new(0, 0, 32, 32), 0),
                Region::object(BBox::new(0, 0, 32, 32), 0),
                Region::object(BBox::new(0, 0, 32, 32), 0),
            ],
            (4, 4),
            8,
        )
        .unwrap();
        let masked = region_attention(&params, 2, &queries, &tokens, &mask).unwrap();
        let (unmasked, _) = attention_forward(&params, 2, &queries, &tokens, None).unwrap();
        for (a, b) in masked.iter().zip(unmasked.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_visibility_projects_that_value_row() {
        let params = random_params(8, 4);
        let queries = random_matrix(1, 8, 5);
        let tokens = random_matrix(4, 8, 6);
        // Region inside patch 2 only (2x2 grid, p=16): bbox in patch (1,0).
        let mask = build_visibility_mask(
            &[Region::object(BBox::new(0, 16, 16, 32), 0)],
            (2, 2),
            16,
        )
        .unwrap();
        assert_eq!(mask.visible_indices(0), vec![2]);
        let out = region_attention(&params, 2, &queries, &tokens, &mask).unwrap();
        // softmax over a singleton is 1 -> output = Wo^T applied to v_2 + bo.
        let v = tokens.dot(&params.wv.t()) + &params.bv;
        let expected = v.row(2).dot(&params.wo.t()) + &params.bo;
        for (a, b) in out.row(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_attention_matches_slice_and_attend_oracle() {
        let params = random_params(8, 7);
        let queries = random_matrix(5, 8, 8);
        let tokens = random_matrix(16, 8, 9);
        let regions = vec![
            Region::object(BBox::new(0, 0, 32, 32), 0),
            Region::object(BBox::new(0, 0, 16, 16), 0),
            Region::object(BBox::new(8, 8, 24, 24), 0),
            Region::object(BBox::new(2, 2, 6, 6), 0),
            Region::object(BBox::new(16, 0, 32, 32), 0),
        ];
        let mask = build_visibility_mask(&regions, (4, 4), 8).unwrap();
        let got = region_attention(&params, 2, &queries, &tokens, &mask).unwrap();
        let want = slice_and_attend_oracle(&params, 2, &queries, &tokens, &mask);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-6, "oracle mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn masked_weights_are_exactly_zero_and_rows_sum_to_one() {
        let params = random_params(8, 10);
        let queries = random_matrix(2, 8, 11);
        let tokens = random_matrix(16, 8, 12);
        let regions = vec![
            Region::object(BBox::new(0, 0, 16, 16), 0),
            Region::object(BBox::new(8, 8, 24, 24), 0),
        ];
        let mask = build_visibility_mask(&regions, (4, 4), 8).unwrap();
        let (_, cache) =
            attention_forward(&params, 2, &queries, &tokens, Some(mask.as_bool())).unwrap();
        for h in 0..2 {
            let a = cache.weights.index_axis(Axis(0), h);
            for l in 0..2 {
                let mut sum = 0.0;
                for j in 0..16 {
                    if mask.is_visible(l, j) {
                        assert!(a[[l, j]] >= 0.0);
                        sum += a[[l, j]];
                    } else {
                        assert_eq!(a[[l, j]], 0.0, "masked weight must be exactly zero");
                    }
                }
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dim = 6;
        let heads = 2;
        let params = random_params(dim, 13);
        let q_input = random_matrix(3, dim, 14);
        let kv_input = random_matrix(5, dim, 15);
        let probe = random_matrix(3, dim, 16);
        let visible = Array2::from_shape_fn((3, 5), |(i, j)| (i + j) % 2 == 0 || j == 0);

        let loss = |p: &AttnParams<f64>, qi: &Array2<f64>, kv: &Array2<f64>| {
            let (y, _) = attention_forward(p, heads, qi, kv, Some(&visible)).unwrap();
            (&y * &probe).sum()
        };

        let (_, cache) =
            attention_forward(&params, heads, &q_input, &kv_input, Some(&visible)).unwrap();
        let mut grads = AttnParams::zeros(dim);
        let (d_q_input, d_kv_input) =
            attention_backward(&params, heads, &cache, &probe, &mut grads);

        let h = 1e-6;
        for i in 0..3 {
            for j in 0..dim {
                let mut xp = q_input.clone();
                xp[[i, j]] += h;
                let mut xm = q_input.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&params, &xp, &kv_input) - loss(&params, &xm, &kv_input)) / (2.0 * h);
                assert!((d_q_input[[i, j]] - fd).abs() < 1e-6, "d_q_input[{i},{j}]");
            }
        }
        for i in 0..5 {
            for j in 0..dim {
                let mut xp = kv_input.clone();
                xp[[i, j]] += h;
                let mut xm = kv_input.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&params, &q_input, &xp) - loss(&params, &q_input, &xm)) / (2.0 * h);
                assert!((d_kv_input[[i, j]] - fd).abs() < 1e-6, "d_kv_input[{i},{j}]");
            }
        }
        // Spot-check each weight family.
        let check_w = |get: &dyn Fn(&mut AttnParams<f64>) -> &mut Array2<f64>,
                           grad: &Array2<f64>| {
            for &(i, j) in &[(0usize, 0usize), (1, 3), (dim - 1, dim - 1)] {
                let mut pp = params.clone();
                *get(&mut pp).get_mut([i, j]).unwrap() += h;
                let mut pm = params.clone();
                *get(&mut pm).get_mut([i, j]).unwrap() -= h;
                let fd = (loss(&pp, &q_input, &kv_input) - loss(&pm, &q_input, &kv_input)) / (2.0 * h);
                assert!((grad[[i, j]] - fd).abs() < 1e-6);
            }
        };
        check_w(&|p| &mut p.wq, &grads.wq);
        check_w(&|p| &mut p.wk, &grads.wk);
        check_w(&|p| &mut p.wv, &grads.wv);
        check_w(&|p| &mut p.wo, &grads.wo);
    }

    #[test]
    fn batched_queries_keep_their_shape_and_per_image_results() {
        let params = random_params(8, 20);
        let heads = 2;
        let l = 3;
        let b = 2;
        let queries = {
            let mut q = Array3::zeros((l, b, 8));
            for i in 0..b {
                q.index_axis_mut(Axis(1), i)
                    .assign(&random_matrix(l, 8, 21 + i as u64));
            }
            q
        };
        let tokens: Vec<Array2<f64>> =
            (0..b).map(|i| random_matrix(16, 8, 30 + i as u64)).collect();
        let region = Region::object(BBox::new(0, 0, 24, 24), 0);
        let masks: Vec<VisibilityMask> = (0..b)
            .map(|_| {
                build_visibility_mask(&vec![region.clone(); l], (4, 4), 8).unwrap()
            })
            .collect();
        let out = region_attention_batched(&params, heads, &queries, &tokens, &masks).unwrap();
        assert_eq!(out.dim(), (l, b, 8));
        for i in 0..b {
            let q_b = queries.index_axis(Axis(1), i).to_owned();
            let want = region_attention(&params, heads, &q_b, &tokens[i], &masks[i]).unwrap();
            let got = out.index_axis(Axis(1), i);
            for (a, w) in got.iter().zip(want.iter()) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_visible_position_errors() {
        let params = random_params(4, 22);
        let queries = random_matrix(1, 4, 23);
        let tokens = random_matrix(4, 4, 24);
        let visible = Array2::from_elem((1, 4), false);
        assert!(attention_forward(&params, 2, &queries, &tokens, Some(&visible)).is_err());
    }
}
