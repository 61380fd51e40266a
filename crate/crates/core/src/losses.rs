//! Segmentation objective: soft Dice plus cross-entropy on class softmax.

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Result};
use crate::tensor::{Real, Tensor};

/// Added to every Dice denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped below by this before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Which classes enter the Dice term.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassSet {
    /// Every class except 0.
    Foreground,
    All,
    Only(Vec<usize>),
}

impl ClassSet {
    pub fn resolve(&self, classes: usize) -> Vec<usize> {
        match self {
            ClassSet::Foreground => (1..classes).collect(),
            ClassSet::All => (0..classes).collect(),
            ClassSet::Only(v) => v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// One-hot encoding of labels `(N, H, W, D)` into `(N, classes, H, W, D)`.
pub fn one_hot<T: Real>(labels: &[u8], batch: usize, spatial: [usize; 3], classes: usize) -> Result<Tensor<T>> {
    let vol: usize = spatial.iter().product();
    ensure_shape!(labels.len() == batch * vol, "one_hot: {} labels for {batch}x{vol} voxels", labels.len());
    let mut out = Tensor::zeros(&[batch, classes, spatial[0], spatial[1], spatial[2]]);
    let data = out.data_mut();
    for n in 0..batch {
        for i in 0..vol {
            let c = labels[n * vol + i] as usize;
            ensure_shape!(c < classes, "label {c} out of range for {classes} classes");
            data[(n * classes + c) * vol + i] = T::one();
        }
    }
    Ok(out)
}

fn check(tape: &Tape<impl Real>, probs: Var, target: &Tensor<impl Real>) -> Result<usize> {
    ensure_shape!(
        tape.shape(probs) == target.shape(),
        "prediction {:?} and target {:?} differ",
        tape.shape(probs),
        target.shape()
    );
    ensure_shape!(tape.shape(probs).len() >= 2, "loss needs a class axis");
    Ok(tape.shape(probs)[1])
}

/// `1 − (2/|S|) Σ_{j∈S} Σ_i X_ij Y_ij / (Σ_i X_ij + Σ_i Y_ij + ε)`, sums over
/// batch and space, with ε = [`DICE_EPS`].
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: &Tensor<T>, classes: &ClassSet) -> Result<Var> {
    dice_loss_eps(tape, probs, target, classes, DICE_EPS)
}

/// [`dice_loss`] with an explicit denominator ε.
pub fn dice_loss_eps<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    classes: &ClassSet,
    eps: f64,
) -> Result<Var> {
    let c = check(tape, probs, target)?;
    let set = classes.resolve(c);
    ensure_shape!(!set.is_empty(), "dice_loss: empty class set");
    ensure_shape!(set.iter().all(|&j| j < c), "dice_loss: class set {set:?} exceeds {c} classes");
    let y = tape.constant(target.clone());
    let xy = tape.mul(probs, y)?;
    let inter = tape.sum_keep(xy, 1)?;
    let psum = tape.sum_keep(probs, 1)?;
    let ysum = sum_per_class(target);
    let ysum = tape.constant(Tensor::new(&[c], ysum.iter().map(|&v| v + T::lit(eps)).collect())?);
    let denom = tape.add(psum, ysum)?;
    let ratio = tape.div(inter, denom)?;
    let mut w = Tensor::zeros(&[c]);
    for &j in &set {
        w.data_mut()[j] = T::lit(-2.0 / set.len() as f64);
    }
    let s = tape.dot_const(ratio, &w)?;
    Ok(tape.add_scalar(s, T::one()))
}

fn sum_per_class<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let c = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    let mut out = vec![T::zero(); c];
    for (k, chunk) in t.data().chunks(inner).enumerate() {
        out[k % c] += chunk.iter().copied().sum::<T>();
    }
    out
}

/// Mean over voxels of `−Σ_j Y_ij log max(X_ij, 1e-12)`.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    let c = check(tape, probs, target)?;
    let voxels = target.numel() / c;
    let logp = tape.log_clamped(probs, T::lit(LOG_FLOOR));
    let w = target.scale(T::lit(-1.0 / voxels as f64));
    tape.dot_const(logp, &w)
}

/// Dice plus cross-entropy on `softmax(logits)` over the class axis.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &Tensor<T>,
    classes: &ClassSet,
) -> Result<LossParts> {
    let probs = tape.softmax(logits, 1)?;
    total_loss_from_probs(tape, probs, target, classes)
}

pub fn total_loss_from_probs<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    classes: &ClassSet,
) -> Result<LossParts> {
    let dice = dice_loss(tape, probs, target, classes)?;
    let ce = ce_loss(tape, probs, target)?;
    let total = tape.add(dice, ce)?;
    Ok(LossParts { total, dice, ce })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.value(v).data()[0]
    }

    fn masks(pred: &[u8], gt: &[u8], classes: usize) -> (Tensor<f64>, Tensor<f64>) {
        let s = [1, 1, pred.len()];
        (one_hot(pred, 1, s, classes).unwrap(), one_hot(gt, 1, s, classes).unwrap())
    }

    #[test]
    fn perfect_prediction() {
        let (p, y) = masks(&[0, 1, 2, 1, 0, 2], &[0, 1, 2, 1, 0, 2], 3);
        let d = value(|t| {
            let pv = t.constant(p.clone());
            dice_loss(t, pv, &y, &ClassSet::Foreground).unwrap()
        });
        assert!(d <= 1e-4, "{d}");
        let ce = value(|t| {
            let pv = t.constant(p.clone());
            ce_loss(t, pv, &y).unwrap()
        });
        assert!(ce <= 1e-6);
    }

    #[test]
    fn half_overlap_single_class() {
        // pred covers voxels {0,1}, target {1,2}: 1 − 2·1/(2+2)
        let (p, y) = masks(&[1, 1, 0, 0], &[0, 1, 1, 0], 2);
        let d = value(|t| {
            let pv = t.constant(p.clone());
            dice_loss(t, pv, &y, &ClassSet::Only(vec![1])).unwrap()
        });
        let want = 1.0 - 2.0 * 1.0 / (4.0 + DICE_EPS);
        assert!((d - want).abs() < 1e-12);
        let exact = value(|t| {
            let pv = t.constant(p.clone());
            dice_loss_eps(t, pv, &y, &ClassSet::Only(vec![1]), 0.0).unwrap()
        });
        assert_eq!(exact, 0.5);
    }

    #[test]
    fn disjoint_masks() {
        let (p, y) = masks(&[1, 1, 0, 0], &[0, 0, 1, 1], 2);
        let d = value(|t| {
            let pv = t.constant(p.clone());
            dice_loss(t, pv, &y, &ClassSet::Foreground).unwrap()
        });
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_prediction_is_ln_c() {
        for c in [2usize, 3, 5] {
            let p = Tensor::<f64>::full(&[2, c, 2, 2, 1], 1.0 / c as f64);
            let labels: Vec<u8> = (0..8).map(|i| (i % c) as u8).collect();
            let y = one_hot(&labels, 2, [2, 2, 1], c).unwrap();
            let ce = value(|t| {
                let pv = t.constant(p.clone());
                ce_loss(t, pv, &y).unwrap()
            });
            assert!((ce - (c as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_voxel_ce() {
        let p = Tensor::new(&[1, 2, 1, 1, 2], vec![0.8, 0.8, 0.2, 0.2]).unwrap();
        let y = one_hot::<f64>(&[0, 1], 1, [1, 1, 2], 2).unwrap();
        let ce = value(|t| {
            let pv = t.constant(p.clone());
            ce_loss(t, pv, &y).unwrap()
        });
        let want = -(0.8f64.ln() + 0.2f64.ln()) / 2.0;
        assert!((ce - want).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::<f64>::uniform(&[1, 3, 2, 2, 2], -2.0, 2.0, &mut r);
        let labels: Vec<u8> = (0..8).map(|_| r.gen_range(0..3)).collect();
        let y = one_hot(&labels, 1, [2, 2, 2], 3).unwrap();
        let mut t = Tape::new();
        let l = t.constant(logits);
        let parts = total_loss(&mut t, l, &y, &ClassSet::Foreground).unwrap();
        let (a, b, c) = (t.value(parts.dice).data()[0], t.value(parts.ce).data()[0], t.value(parts.total).data()[0]);
        assert_eq!(a + b, c);
        assert!(b >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let logits = Tensor::<f64>::uniform(&[1, 3, 2, 2, 2], -2.0, 2.0, &mut r);
        let labels: Vec<u8> = (0..8).map(|_| r.gen_range(0..3)).collect();
        let y = one_hot(&labels, 1, [2, 2, 2], 3).unwrap();
        for set in [ClassSet::Foreground, ClassSet::All] {
            let report =
                grad_check(|t, v| Ok(total_loss(t, v[0], &y, &set)?.total), std::slice::from_ref(&logits), 1e-4).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        let y = Tensor::zeros(&[1, 3, 2, 2, 2]);
        assert!(dice_loss(&mut t, p, &y, &ClassSet::Foreground).is_err());
        assert!(ce_loss(&mut t, p, &y).is_err());
    }
}
