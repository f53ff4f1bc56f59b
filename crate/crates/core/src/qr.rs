//! Class-prototype construction and the QR orthogonality loss.
//!
//! The prototype matrix stacks per-class mean attention vectors row-wise.
//! Factorizing it by modified Gram-Schmidt over its columns yields an
//! orthonormal matrix Q and an upper-triangular-pattern matrix R whose
//! strictly-upper entries measure the non-orthogonality between feature
//! columns; their mean absolute value is the regularization loss. The same
//! elimination is expressed in graph primitives so the loss participates in
//! end-to-end differentiation. Columns whose residual norm falls below a
//! small guard contribute a zero direction and zero subsequent projections,
//! so rank deficiency mid-training never aborts optimization.

use crate::error::{CafoError, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Residual norms below this are treated as rank deficiency.
pub const DEGENERACY_GUARD: f64 = 1e-8;

/// Per-class mean attention vectors; one row per class present in the batch,
/// ascending class id.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    /// Shape [C', D].
    pub matrix: Tensor,
    pub class_ids: Vec<usize>,
}

/// Mean attention vector per class present in the batch.
pub fn class_prototypes(attentions: &Tensor, labels: &[usize]) -> Result<PrototypeMatrix> {
    let shape = attentions.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(CafoError::ShapeMismatch {
            op: "class_prototypes",
            detail: format!("attentions {:?} with {} labels", shape, labels.len()),
        });
    }
    let (class_ids, weights) = prototype_weights(labels);
    let d = shape[1];
    let mut matrix = vec![0.0; class_ids.len() * d];
    let data = attentions.data();
    for (row, wrow) in weights.chunks(labels.len()).enumerate() {
        for (i, &w) in wrow.iter().enumerate() {
            if w != 0.0 {
                for j in 0..d {
                    matrix[row * d + j] += w * data[i * d + j];
                }
            }
        }
    }
    Ok(PrototypeMatrix {
        matrix: Tensor::from_parts(vec![class_ids.len(), d], matrix),
        class_ids,
    })
}

/// Selection matrix [C', B]: entry (c, i) is 1/|class c| when labels[i] == c.
/// Multiplying it onto a batch of attention rows yields the prototypes, which
/// keeps prototype construction inside the differentiation graph.
fn prototype_weights(labels: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut class_ids: Vec<usize> = labels.to_vec();
    class_ids.sort_unstable();
    class_ids.dedup();
    let b = labels.len();
    let mut weights = vec![0.0; class_ids.len() * b];
    for (row, &c) in class_ids.iter().enumerate() {
        let count = labels.iter().filter(|&&y| y == c).count() as f64;
        for (i, &y) in labels.iter().enumerate() {
            if y == c {
                weights[row * b + i] = 1.0 / count;
            }
        }
    }
    (class_ids, weights)
}

/// Graph version of [`class_prototypes`]: the result participates in
/// differentiation with respect to the attention batch.
pub fn class_prototypes_graph(
    g: &mut Graph,
    attentions: Var,
    labels: &[usize],
) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(attentions);
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(CafoError::ShapeMismatch {
            op: "class_prototypes_graph",
            detail: format!("attentions {:?} with {} labels", shape, labels.len()),
        });
    }
    let (class_ids, weights) = prototype_weights(labels);
    let m = g.constant(Tensor::from_parts(vec![class_ids.len(), labels.len()], weights));
    let proto = g.matmul(m, attentions)?;
    Ok((proto, class_ids))
}

/// Q with orthonormal (or guarded zero) columns and the projection matrix R.
#[derive(Clone, Debug)]
pub struct QrFactors {
    /// Shape [rows, p] with p = min(rows, cols).
    pub q: Tensor,
    /// Shape [p, cols]; entries below the diagonal are zero.
    pub r: Tensor,
}

/// Modified Gram-Schmidt over the columns of `a`.
///
/// For a wide matrix only the first min(rows, cols) columns yield pivot
/// directions; every column still receives R entries, so Q*R reconstructs a
/// full-rank input exactly.
pub fn qr_decompose(a: &Tensor) -> Result<QrFactors> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(CafoError::ShapeMismatch {
            op: "qr_decompose",
            detail: format!("expected non-empty rank-2 input, got {:?}", shape),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let p = rows.min(cols);
    // working columns
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.at2(i, j)).collect())
        .collect();
    let mut q = vec![0.0; rows * p];
    let mut r = vec![0.0; p * cols];
    for i in 0..p {
        let norm = v[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        r[i * cols + i] = norm;
        if norm < DEGENERACY_GUARD {
            continue; // zero direction; projections stay zero
        }
        let qi: Vec<f64> = v[i].iter().map(|x| x / norm).collect();
        for j in (i + 1)..cols {
            let rij: f64 = qi.iter().zip(&v[j]).map(|(x, y)| x * y).sum();
            r[i * cols + j] = rij;
            for (vj, &qk) in v[j].iter_mut().zip(&qi) {
                *vj -= rij * qk;
            }
        }
        for (row, &val) in qi.iter().enumerate() {
            q[row * p + i] = val;
        }
    }
    Ok(QrFactors {
        q: Tensor::from_parts(vec![rows, p], q),
        r: Tensor::from_parts(vec![p, cols], r),
    })
}

/// Number of strictly-upper entries of R for a rows-by-cols input.
pub fn strict_upper_count(rows: usize, cols: usize) -> usize {
    let p = rows.min(cols);
    (0..p).map(|i| cols - 1 - i).sum()
}

/// Mean absolute strictly-upper entry of R.
pub fn qr_ortho_loss(a: &Tensor) -> Result<f64> {
    let shape = a.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(CafoError::ShapeMismatch {
            op: "qr_ortho_loss",
            detail: format!("need at least 2 feature columns, got {:?}", shape),
        });
    }
    let f = qr_decompose(a)?;
    let (p, cols) = (f.r.shape()[0], f.r.shape()[1]);
    let count = strict_upper_count(shape[0], cols);
    let mut acc = 0.0;
    for i in 0..p {
        for j in (i + 1)..cols {
            acc += f.r.at2(i, j).abs();
        }
    }
    Ok(acc / count as f64)
}

/// Graph version of [`qr_ortho_loss`]: the same elimination built from
/// differentiable primitives, returning a scalar node.
pub fn qr_ortho_loss_graph(g: &mut Graph, a: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(CafoError::ShapeMismatch {
            op: "qr_ortho_loss_graph",
            detail: format!("need at least 2 feature columns, got {:?}", shape),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let p = rows.min(cols);
    let at = g.transpose(a)?;
    let mut v: Vec<Var> = (0..cols).map(|j| g.row(at, j)).collect::<Result<_>>()?;
    let mut terms: Vec<Var> = Vec::new();
    for i in 0..p {
        let norm = g.l2_norm(v[i])?;
        if g.value(norm).data()[0] < DEGENERACY_GUARD {
            continue; // guard: no direction, no projections from this pivot
        }
        let qi = g.div_scalar_node(v[i], norm)?;
        for j in (i + 1)..cols {
            let rij = g.dot(qi, v[j])?;
            let a_term = g.abs(rij);
            terms.push(a_term);
            let proj = g.scale(qi, rij)?;
            v[j] = g.sub(v[j], proj)?;
        }
    }
    let count = strict_upper_count(rows, cols) as f64;
    let total = match terms.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
    };
    Ok(g.mul_scalar(total, 1.0 / count))
}

/// Cross-entropy plus lambda-weighted orthogonality penalty on the
/// prototypes. With lambda = 0 the QR subgraph is not built at all.
///
/// The penalty is Sum|R_ij| / sqrt(r) over the r strictly-upper entries.
/// Dividing by r makes the regularizer's gradient shrink with the feature
/// count and it never separates the attention distributions within a small
/// step budget; the raw sum over-penalizes and collapses the attention
/// scale. The square-root normalization keeps the penalty's pull per entry
/// balanced against the cross-entropy term across feature counts.
pub fn total_loss_graph(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    prototypes: Var,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(CafoError::InvalidConfig("lambda must be >= 0".into()));
    }
    let ce = g.softmax_cross_entropy(logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let shape = g.shape(prototypes);
    let count = strict_upper_count(shape[0], shape[1]) as f64;
    let qr = qr_ortho_loss_graph(g, prototypes)?;
    let weighted = g.mul_scalar(qr, lambda * count.sqrt());
    g.add(ce, weighted)
}
