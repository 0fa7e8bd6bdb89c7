//! Cosine similarity and the bidirectional hinge objective.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::l2_normalize;

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

fn check_nonzero(t: &Tensor) -> Result<()> {
    let norms: Vec<f64> = t.sqr()?.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1()?;
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(())
}

/// Row-wise cosine similarity of two (B, D) tensors.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((l2_normalize(a)? * l2_normalize(b)?)?.sum(D::Minus1)?)
}

/// Mean hinge `max(eps - (cos(p+, q+) - cos(p+, q-)), 0)` plus the mean
/// hinge `max(eps - (cos(p+, q+) - cos(p-, q+)), 0)` over a batch of
/// (B, D) rows.
pub fn association_loss(p_pos: &Tensor, q_pos: &Tensor, q_neg: &Tensor, p_neg: &Tensor, margin: f64) -> Result<Tensor> {
    for t in [p_pos, q_pos, q_neg, p_neg] {
        check_nonzero(t)?;
    }
    let pos = cosine_rows(p_pos, q_pos)?;
    let neg_image = cosine_rows(p_pos, q_neg)?;
    let neg_recipe = cosine_rows(p_neg, q_pos)?;
    let hinge = |neg: Tensor| -> Result<Tensor> { Ok((neg - &pos)?.affine(1.0, margin)?.relu()?.mean_all()?) };
    Ok((hinge(neg_image)? + hinge(neg_recipe)?)?)
}

/// The same objective with every other batch element used as a negative in
/// both directions. Equal to [`association_loss`] over the B(B-1) tuples
/// `(p_i, q_i, q_j, p_j)`, i != j.
pub fn in_batch_loss(p: &Tensor, q: &Tensor, margin: f64) -> Result<Tensor> {
    check_nonzero(p)?;
    check_nonzero(q)?;
    let b = p.dim(0)?;
    if b < 2 {
        return Err(Error::InsufficientData("in-batch negatives need at least 2 pairs".into()));
    }
    let sim = l2_normalize(p)?.matmul(&l2_normalize(q)?.t()?)?;
    let eye = Tensor::eye(b, sim.dtype(), sim.device())?;
    let off = eye.affine(-1.0, 1.0)?;
    let diag = (&sim * &eye)?.sum_keepdim(1)?;
    let pairs = (b * (b - 1)) as f64;
    // Row i, column j: recipe i against image j, and image i against recipe j.
    let neg_image = sim.broadcast_sub(&diag)?.affine(1.0, margin)?.relu()?;
    let neg_recipe = sim.t()?.broadcast_sub(&diag)?.affine(1.0, margin)?.relu()?;
    let total = ((neg_image * &off)?.sum_all()? + (neg_recipe * &off)?.sum_all()?)?;
    Ok((total / pairs)?)
}
