//! Small vector/matrix helpers shared by the encoder, losses, and clustering.

use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// L2 norm of a vector.
pub fn l2_norm<F: Real>(v: ArrayView1<F>) -> F {
    v.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b).sqrt()
}

/// Returns the unit vector and the original norm. Zero-norm input is an error.
pub fn l2_normalize<F: Real>(v: ArrayView1<F>) -> Result<(Array1<F>, F)> {
    let n = l2_norm(v);
    if n == F::zero() || !n.is_finite() {
        return Err(Error::numeric(format!("cannot normalize vector with norm {n}")));
    }
    Ok((v.mapv(|x| x / n), n))
}

/// Normalizes every row of a matrix in place. Zero-norm rows are an error.
pub fn l2_normalize_rows<F: Real>(m: &mut Array2<F>) -> Result<()> {
    for mut row in m.rows_mut() {
        let n = l2_norm(row.view());
        if n == F::zero() || !n.is_finite() {
            return Err(Error::numeric(format!("cannot normalize row with norm {n}")));
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(())
}

/// Backward pass of `y = x / ||x||`: given `d_y`, the unit output `y`, and the
/// input norm, produces `d_x = (d_y - y (y . d_y)) / ||x||`.
pub fn l2_normalize_backward<F: Real>(
    unit: ArrayView1<F>,
    norm: F,
    d_unit: ArrayView1<F>,
) -> Array1<F> {
    let proj = unit.dot(&d_unit);
    let mut d = d_unit.to_owned();
    d.zip_mut_with(&unit, |g, &u| *g = (*g - u * proj) / norm);
    d
}

/// Cosine similarity of two vectors (not assumed normalized).
pub fn cosine<F: Real>(a: ArrayView1<F>, b: ArrayView1<F>) -> F {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == F::zero() || nb == F::zero() {
        return F::zero();
    }
    a.dot(&b) / (na * nb)
}

/// True when `||v| - 1|` is within the normalization tolerance.
pub fn is_unit<F: Real>(v: ArrayView1<F>) -> bool {
    (l2_norm(v) - F::one()).abs() <= F::norm_tolerance()
}

pub fn all_finite1<F: Real>(v: ArrayView1<F>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite2<F: Real>(m: ArrayView2<F>) -> bool {
    m.iter().all(|x| x.is_finite())
}
