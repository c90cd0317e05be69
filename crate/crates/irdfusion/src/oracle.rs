//! Relation-map oracle: an independent reconstruction of the differential
//! feature through explicit coefficient matrices.
//!
//! The direct path computes F'_v − β·F'_t from the two pre-norm refinements;
//! this module reaches the same tensor by first combining the attention
//! maps into relation coefficients C and then applying them to the raw
//! value projections. The two routes share no code — every product here is
//! a plain scalar triple loop — so their agreement is evidence that the
//! fusion arithmetic is right, not a tautology.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relation coefficient matrices tying the fused differential directly to
/// the value projections: C_v2v = A_v − β·λ_t·A_t and C_t2t = β·A_t − λ_v·A_v.
#[derive(Debug, Clone)]
pub struct RelationCoeffs {
    pub c_v2v: Tensor,
    pub c_t2t: Tensor,
    pub beta: f64,
    pub lambda_v: f64,
    pub lambda_t: f64,
}

/// Matrix product by scalar loops, deliberately not sharing the tuned
/// kernel used by the model path.
fn scalar_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "oracle_matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.at2(i, l) * b.at2(l, j);
            }
            out.set2(i, j, acc);
        }
    }
    Ok(out)
}

/// Builds the relation coefficients from the two self-attention maps and
/// the gate/damping scalars.
pub fn relation_coeffs(
    a_v: &Tensor,
    a_t: &Tensor,
    lambda_v: f64,
    lambda_t: f64,
    beta: f64,
) -> Result<RelationCoeffs> {
    if a_v.ndim() != 2 || a_v.rows() != a_v.cols() || a_v.shape() != a_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "relation_coeffs",
            left: a_v.shape().to_vec(),
            right: a_t.shape().to_vec(),
        });
    }
    let n = a_v.rows();
    let mut c_v2v = Tensor::zeros(&[n, n]);
    let mut c_t2t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            c_v2v.set2(i, j, a_v.at2(i, j) - beta * lambda_t * a_t.at2(i, j));
            c_t2t.set2(i, j, beta * a_t.at2(i, j) - lambda_v * a_v.at2(i, j));
        }
    }
    Ok(RelationCoeffs { c_v2v, c_t2t, beta, lambda_v, lambda_t })
}

/// The differential feature along the relation route: C_v2v·V_v − C_t2t·V_t.
pub fn differential_via_relation(c: &RelationCoeffs, v_v: &Tensor, v_t: &Tensor) -> Result<Tensor> {
    if v_v.shape() != v_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "differential_via_relation",
            left: v_v.shape().to_vec(),
            right: v_t.shape().to_vec(),
        });
    }
    let left = scalar_matmul(&c.c_v2v, v_v)?;
    let right = scalar_matmul(&c.c_t2t, v_t)?;
    let mut out = left;
    for (o, r) in out.data_mut().iter_mut().zip(right.data()) {
        *o -= r;
    }
    Ok(out)
}

/// The feedback reconstruction: F_vt + β·F'_t. Analytically this recovers
/// the refined feature A_v·(V_v + λ_v·V_t) when F_vt came from
/// `differential_via_relation` with the same β.
pub fn feedback_update_relation(f_vt: &Tensor, fp_t: &Tensor, beta: f64) -> Result<Tensor> {
    if f_vt.shape() != fp_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "feedback_update_relation",
            left: f_vt.shape().to_vec(),
            right: fp_t.shape().to_vec(),
        });
    }
    let mut out = f_vt.clone();
    for (o, f) in out.data_mut().iter_mut().zip(fp_t.data()) {
        *o += beta * f;
    }
    Ok(out)
}

/// Maximum relative deviation between two same-shaped tensors, normalized
/// by the largest magnitude of the reference: max_i |a_i − b_i| / (max|a| + 1e-12).
/// Returns the deviation, or an exceedance error naming the worst element
/// when it crosses `tol`.
pub fn assert_equivalence(direct: &Tensor, oracle: &Tensor, tol: f64) -> Result<f64> {
    if direct.shape() != oracle.shape() {
        return Err(Error::ShapeMismatch {
            op: "assert_equivalence",
            left: direct.shape().to_vec(),
            right: oracle.shape().to_vec(),
        });
    }
    let scale = direct.max_abs() + 1e-12;
    let mut worst = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &b)) in direct.data().iter().zip(oracle.data()).enumerate() {
        let dev = (a - b).abs() / scale;
        if dev > worst {
            worst = dev;
            worst_index = i;
        }
    }
    if worst >= tol {
        return Err(Error::Exceedance { deviation: worst, tol, index: worst_index });
    }
    Ok(worst)
}

/// Reference computation of one pre-norm refined feature A·(V_self + λ·V_other)
/// along the direct reading, again via scalar loops only.
pub fn refined_prenorm_reference(a: &Tensor, v_self: &Tensor, v_other: &Tensor, lambda: f64) -> Result<Tensor> {
    if v_self.shape() != v_other.shape() {
        return Err(Error::ShapeMismatch {
            op: "refined_prenorm_reference",
            left: v_self.shape().to_vec(),
            right: v_other.shape().to_vec(),
        });
    }
    let mut fused = v_self.clone();
    for (f, o) in fused.data_mut().iter_mut().zip(v_other.data()) {
        *f += lambda * o;
    }
    scalar_matmul(a, &fused)
}
