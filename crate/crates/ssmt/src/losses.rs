//! Forecast objective (MAE), memory triplet/compactness regularizers, and
//! the weighted total loss; RMSE as an evaluation metric.

use crate::error::{Result, SsmtError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Balancing factors for the total loss and the triplet margin.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { c1: 0.5, c2: 0.2, c3: 0.3, lambda: 1.0 }
    }
}

/// Mean absolute error over all N·T′ predicted entries.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same_shape(target, "mae")?;
    Ok(pred.zip(target, |a, b| (a - b).abs()).mean())
}

/// Root mean squared error over all predicted entries.
pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same_shape(target, "rmse")?;
    Ok(pred.zip(target, |a, b| (a - b) * (a - b)).mean().sqrt())
}

/// L_total = C1·mae + C2·separate + C3·compact.
pub fn total_loss(mae: f64, separate: f64, compact: f64, w: &LossWeights) -> f64 {
    w.c1 * mae + w.c2 * separate + w.c3 * compact
}

/// Tape-side MAE.
pub fn mae_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean_all(abs))
}

fn row_distances(
    tape: &mut Tape,
    gcn_out: Var,
    memory: Var,
    indices: &[usize],
) -> Result<Var> {
    let picked = tape.gather_rows(memory, indices);
    let diff = tape.sub(gcn_out, picked)?;
    let sq = tape.mul(diff, diff)?;
    let sumsq = tape.sum_cols(sq);
    tape.sqrt(sumsq)
}

/// Contrastive hinge over one sample: Σ_a [‖O⁽ᵃ⁾−M_p‖ − ‖O⁽ᵃ⁾−M_n‖ + λ]_+
/// with p the most similar and n the runner-up memory item.
pub fn separate_loss_on_tape(
    tape: &mut Tape,
    gcn_out: Var,
    memory: Var,
    top2: &[(usize, usize)],
    lambda: f64,
) -> Result<Var> {
    if tape.value(memory).rows() < 2 {
        return Err(SsmtError::Config("separate loss needs b >= 2".into()));
    }
    let pos: Vec<usize> = top2.iter().map(|&(p, _)| p).collect();
    let neg: Vec<usize> = top2.iter().map(|&(_, n)| n).collect();
    let d_pos = row_distances(tape, gcn_out, memory, &pos)?;
    let d_neg = row_distances(tape, gcn_out, memory, &neg)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, lambda);
    let hinge = tape.relu(shifted);
    Ok(tape.sum_all(hinge))
}

/// Consistency term over one sample: Σ_a ‖O⁽ᵃ⁾ − M_p‖.
pub fn compact_loss_on_tape(
    tape: &mut Tape,
    gcn_out: Var,
    memory: Var,
    top2: &[(usize, usize)],
) -> Result<Var> {
    let pos: Vec<usize> = top2.iter().map(|&(p, _)| p).collect();
    let d_pos = row_distances(tape, gcn_out, memory, &pos)?;
    Ok(tape.sum_all(d_pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(tape: &Tape, v: Var) -> f64 {
        tape.value(v).scalar_value()
    }

    #[test]
    fn mae_hand_case() {
        let y = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let yhat = Tensor::new(2, 2, vec![2.0, 2.0, 3.0, 2.0]);
        assert!((mae(&yhat, &y).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&yhat, &y).unwrap(), mae(&y, &yhat).unwrap());
    }

    #[test]
    fn rmse_hand_case_and_dominates_mae() {
        let y = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let yhat = Tensor::new(2, 2, vec![2.0, 2.0, 3.0, 2.0]);
        let r = rmse(&yhat, &y).unwrap();
        assert!((r - (5.0f64 / 4.0).sqrt()).abs() < 1e-12);
        assert!(r >= mae(&yhat, &y).unwrap());
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn mae_shape_mismatch() {
        let a = Tensor::zeros(2, 2);
        let b = Tensor::zeros(2, 3);
        assert!(mae(&a, &b).is_err());
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        let t = total_loss(0.75, 0.5, 0.2, &w);
        assert!((t - 0.535).abs() < 1e-15);
        let only_mae = LossWeights { c1: 1.0, c2: 0.0, c3: 0.0, lambda: 1.0 };
        assert_eq!(total_loss(0.75, 9.0, 9.0, &only_mae), 0.75);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn separate_loss_zero_at_margin() {
        // O = M_p exactly and ‖M_p − M_n‖ = 2λ → [0 − 2λ + λ]_+ = 0
        let lambda = 1.0;
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(2, 2, vec![0.0, 0.0, 2.0, 0.0]));
        let o = tape.constant(Tensor::new(1, 2, vec![0.0, 0.0]));
        let l = separate_loss_on_tape(&mut tape, o, m, &[(0, 1)], lambda).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.0);
    }

    #[test]
    fn separate_loss_equidistant_is_lambda() {
        let lambda = 0.7;
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]));
        let o = tape.constant(Tensor::new(1, 2, vec![0.0, 5.0]));
        let l = separate_loss_on_tape(&mut tape, o, m, &[(0, 1)], lambda).unwrap();
        assert!((scalar_of(&tape, l) - lambda).abs() < 1e-12);
    }

    #[test]
    fn separate_loss_nonnegative() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let m = tape.constant(Tensor::randn(4, 3, 1.0, &mut rng));
            let o = tape.constant(Tensor::randn(5, 3, 1.0, &mut rng));
            let l = separate_loss_on_tape(&mut tape, o, m, &[(0, 1); 5], 0.5).unwrap();
            assert!(scalar_of(&tape, l) >= 0.0);
        }
    }

    #[test]
    fn compact_loss_cases() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(2, 2, vec![3.0, 4.0, 0.0, 0.0]));
        let o = tape.constant(Tensor::new(1, 2, vec![0.0, 0.0]));
        let l = compact_loss_on_tape(&mut tape, o, m, &[(0, 1)]).unwrap();
        assert!((scalar_of(&tape, l) - 5.0).abs() < 1e-12);

        let mut tape2 = Tape::new();
        let m2 = tape2.constant(Tensor::new(2, 2, vec![3.0, 4.0, 0.0, 0.0]));
        let o2 = tape2.constant(Tensor::new(1, 2, vec![3.0, 4.0]));
        let l2 = compact_loss_on_tape(&mut tape2, o2, m2, &[(0, 1)]).unwrap();
        assert_eq!(scalar_of(&tape2, l2), 0.0);
    }

    #[test]
    fn triplet_losses_gradcheck_away_from_kinks() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let m0 = Tensor::randn(4, 3, 1.0, &mut rng);
        let o0 = Tensor::randn(3, 3, 1.0, &mut rng);
        let top2 = vec![(1, 3), (0, 2), (2, 1)];
        let lambda = 0.5;

        let build = |tape: &mut Tape, o: Var, m: Var| {
            let sep = separate_loss_on_tape(tape, o, m, &top2, lambda).unwrap();
            let comp = compact_loss_on_tape(tape, o, m, &top2).unwrap();
            tape.add(sep, comp).unwrap()
        };

        let mut tape = Tape::new();
        let o = tape.leaf(o0.clone(), true);
        let m = tape.leaf(m0.clone(), true);
        let loss = build(&mut tape, o, m);
        let grads = tape.backward(loss).unwrap();
        let go = grads.get(o).unwrap().clone();
        let gm = grads.get(m).unwrap().clone();

        let h = 1e-6;
        let eval = |ov: &Tensor, mv: &Tensor| {
            let mut t = Tape::new();
            let o = t.constant(ov.clone());
            let m = t.constant(mv.clone());
            let l = build(&mut t, o, m);
            t.value(l).scalar_value()
        };
        for k in 0..o0.len() {
            let mut up = o0.clone();
            let mut dn = o0.clone();
            up.data_mut()[k] += h;
            dn.data_mut()[k] -= h;
            let fd = (eval(&up, &m0) - eval(&dn, &m0)) / (2.0 * h);
            let a = go.data()[k];
            assert!((a - fd).abs() / f64::max(1.0, fd.abs()) < 1e-4, "O[{k}]: {a} vs {fd}");
        }
        for k in 0..m0.len() {
            let mut up = m0.clone();
            let mut dn = m0.clone();
            up.data_mut()[k] += h;
            dn.data_mut()[k] -= h;
            let fd = (eval(&o0, &up) - eval(&o0, &dn)) / (2.0 * h);
            let a = gm.data()[k];
            assert!((a - fd).abs() / f64::max(1.0, fd.abs()) < 1e-4, "M[{k}]: {a} vs {fd}");
        }
    }
}
