//! Memory-mediated graph learning: node similarity from a shared memory
//! bank, Gumbel-sampled adjacency, symmetric-normalized graph convolution,
//! and softmax memory addressing.
//!
//! Everything here is built from tape primitives so the whole chain stays
//! differentiable end to end. None of these operations read a node count
//! from the memory bank, which is what lets one bank serve cities with
//! different sensor counts.

use crate::error::{Result, SsmtError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Clamp bound keeping ξ strictly inside (0, 1) for the logit in the
/// Gumbel sample.
pub const XI_EPS: f64 = 1e-6;
/// Floor for cosine-normalization denominators.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Differentiable relaxation, used throughout training.
    Soft,
    /// Binarized forward with straight-through backward; used for
    /// evaluation and graph export.
    Hard,
}

/// Sampled adjacency snapshot (for export / inspection).
#[derive(Debug, Clone)]
pub struct LearnedAdjacency {
    pub a: Tensor,
    pub tau: f64,
    pub mode: SampleMode,
}

/// L2-normalize rows with a clamped denominator, so positive rescaling of a
/// row is an exact no-op up to roundoff.
fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let sumsq = tape.sum_cols(sq);
    let norm = tape.sqrt(sumsq)?;
    let guarded = tape.clamp(norm, NORM_EPS, f64::INFINITY);
    tape.div_broadcast_col(x, guarded)
}

/// Row-normalized cosine Gram of `q`, mapped affinely from [−1,1] into
/// (0,1) and clamped to [XI_EPS, 1−XI_EPS].
pub fn cosine_gram_squash(tape: &mut Tape, q: Var) -> Result<Var> {
    let q_hat = normalize_rows(tape, q)?;
    let q_hat_t = tape.transpose(q_hat);
    let gram = tape.matmul(q_hat, q_hat_t)?;
    let shifted = tape.add_scalar(gram, 1.0);
    let xi = tape.scale(shifted, 0.5);
    Ok(tape.clamp(xi, XI_EPS, 1.0 - XI_EPS))
}

/// Inter-node similarity ξ ∈ (0,1)^{N×N} from the memory-projected
/// embeddings: Q = E·Mᵀ squashed by [`cosine_gram_squash`].
pub fn node_similarity(tape: &mut Tape, embedding: Var, memory: Var) -> Result<Var> {
    let (_, ed) = tape.value(embedding).shape();
    let (_, md) = tape.value(memory).shape();
    if ed != md {
        return Err(SsmtError::ShapeMismatch {
            op: "node_similarity",
            lhs: tape.value(embedding).shape(),
            rhs: tape.value(memory).shape(),
        });
    }
    let mt = tape.transpose(memory);
    let q = tape.matmul(embedding, mt)?;
    cosine_gram_squash(tape, q)
}

/// Difference of two i.i.d. standard Gumbel draws per entry (a Logistic(0,1)
/// variable, which is what makes hard sampling exactly Bernoulli(ξ)).
pub fn sample_gumbel_diff<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    let gumbel = |rng: &mut R| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    };
    let data = (0..n * n).map(|_| gumbel(rng) - gumbel(rng)).collect();
    Tensor::new(n, n, data)
}

/// A = σ((logit(ξ) + g¹−g²)/τ), optionally binarized with a
/// straight-through backward.
pub fn gumbel_adjacency(
    tape: &mut Tape,
    xi: Var,
    tau: f64,
    noise: Var,
    mode: SampleMode,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(SsmtError::Domain {
            op: "gumbel_adjacency",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    tape.value(xi).check_same_shape(tape.value(noise), "gumbel_adjacency")?;
    let ln_xi = tape.ln(xi)?;
    let neg = tape.scale(xi, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let ln_one_minus = tape.ln(one_minus)?;
    let logit = tape.sub(ln_xi, ln_one_minus)?;
    let noisy = tape.add(logit, noise)?;
    let scaled = tape.scale(noisy, 1.0 / tau);
    let soft = tape.sigmoid(scaled);
    Ok(match mode {
        SampleMode::Soft => soft,
        SampleMode::Hard => tape.hard_threshold(soft),
    })
}

/// Self-loop-augmented symmetric-normalized propagation:
/// Â = I + D^{−1/2}AD^{−1/2} with D^{−1/2} zeroed for zero-degree nodes.
pub fn propagate(tape: &mut Tape, adjacency: Var, x: Var) -> Result<Var> {
    let (n, _) = tape.value(adjacency).shape();
    let (xn, _) = tape.value(x).shape();
    if xn != n {
        return Err(SsmtError::ShapeMismatch {
            op: "propagate",
            lhs: tape.value(adjacency).shape(),
            rhs: tape.value(x).shape(),
        });
    }
    let degree = tape.sum_cols(adjacency);
    let d_inv_sqrt = tape.rsqrt_guard(degree, 0.0);
    let row_scaled = tape.mul_broadcast_col(adjacency, d_inv_sqrt)?;
    let d_row = tape.transpose(d_inv_sqrt);
    let norm_a = tape.mul_broadcast_row(row_scaled, d_row)?;
    let mixed = tape.matmul(norm_a, x)?;
    tape.add(x, mixed)
}

/// O = (I + D^{−1/2}AD^{−1/2})·X·W.
pub fn gcn_forward(tape: &mut Tape, adjacency: Var, x: Var, weight: Var) -> Result<Var> {
    let propagated = propagate(tape, adjacency, x)?;
    tape.matmul(propagated, weight)
}

/// Indices of the largest and second-largest entry per row, ties broken by
/// lower index.
pub fn top2_rows(weights: &Tensor) -> Vec<(usize, usize)> {
    let (n, b) = weights.shape();
    debug_assert!(b >= 2);
    (0..n)
        .map(|r| {
            let (mut p, mut s) = if weights.at(r, 0) >= weights.at(r, 1) {
                (0, 1)
            } else {
                (1, 0)
            };
            for j in 2..b {
                let v = weights.at(r, j);
                if v > weights.at(r, p) {
                    s = p;
                    p = j;
                } else if v > weights.at(r, s) {
                    s = j;
                }
            }
            (p, s)
        })
        .collect()
}

/// Inverse temperature applied to the cosine similarities before the
/// addressing softmax.
pub const ADDRESS_SHARPNESS: f64 = 8.0;

/// Memory addressing (softmax over sharpened cosine similarities) and the
/// recalled per-node embeddings P = w·M. Also reports each node's top-2
/// memory item indices for the triplet losses.
pub fn memory_address(
    tape: &mut Tape,
    gcn_out: Var,
    memory: Var,
) -> Result<(Var, Var, Vec<(usize, usize)>)> {
    let (b, _) = tape.value(memory).shape();
    if b < 2 {
        return Err(SsmtError::Config(format!(
            "memory bank needs at least 2 items, has {b}"
        )));
    }
    let o_hat = normalize_rows(tape, gcn_out)?;
    let m_hat = normalize_rows(tape, memory)?;
    let m_hat_t = tape.transpose(m_hat);
    let sims = tape.matmul(o_hat, m_hat_t)?;
    // Cosine similarities live in [-1, 1], so a plain softmax flattens toward
    // uniform as the bank grows and the recalled rows collapse to the bank
    // mean. Sharpening before the softmax keeps retrieval selective at any
    // bank size while preserving row-stochasticity, convexity, and
    // invariance to positive rescaling of the query rows.
    let sharpened = tape.scale(sims, ADDRESS_SHARPNESS);
    let weights = tape.softmax_rows(sharpened);
    let recalled = tape.matmul(weights, memory)?;
    let top2 = top2_rows(tape.value(weights));
    Ok((weights, recalled, top2))
}
