//! Learned convex combination of the three per-plane branches.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Fixed uniform weights.
    Mean,
    /// Softmax over three learnable logits, initialized to zero.
    Learned,
}

#[derive(Clone, Debug)]
pub struct AxisFusion {
    logits: Option<ParamId>,
}

impl AxisFusion {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, mode: FusionMode) -> Self {
        let logits = match mode {
            FusionMode::Mean => None,
            FusionMode::Learned => Some(store.add(format!("{name}.logits"), Tensor::zeros(&[3]))),
        };
        Self { logits }
    }

    pub fn logits_param(&self) -> Option<ParamId> {
        self.logits
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, branches: [Var; 3]) -> Result<Var> {
        let logits = match self.logits {
            Some(id) => ctx.param(id),
            None => ctx.tape.constant(Tensor::zeros(&[3])),
        };
        fuse_axes(&mut ctx.tape, branches, logits)
    }

    /// Current `(sagittal, axial, coronal)` weights.
    pub fn weights<T: Real>(&self, store: &ParamStore<T>) -> [f64; 3] {
        let logits = match self.logits {
            Some(id) => store.value(id).data().iter().map(|v| v.to_f64_lossy()).collect(),
            None => vec![0.0; 3],
        };
        softmax3([logits[0], logits[1], logits[2]])
    }
}

pub fn softmax3(l: [f64; 3]) -> [f64; 3] {
    let m = l[0].max(l[1]).max(l[2]);
    let e = l.map(|v| (v - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

/// `Σ_a softmax(logits)_a · branch_a`.
pub fn fuse_axes<T: Real>(tape: &mut Tape<T>, branches: [Var; 3], logits: Var) -> Result<Var> {
    let shape = tape.shape(branches[0]).to_vec();
    for b in &branches[1..] {
        ensure_shape!(
            tape.shape(*b) == shape.as_slice(),
            "fuse_axes: branch shapes differ {:?} vs {:?}",
            shape,
            tape.shape(*b)
        );
    }
    ensure_shape!(tape.shape(logits) == [3], "fuse_axes needs 3 logits, got {:?}", tape.shape(logits));
    let w = tape.softmax(logits, 0)?;
    let mut acc = tape.scale_by_element(branches[0], w, 0)?;
    for (a, &b) in branches.iter().enumerate().skip(1) {
        let term = tape.scale_by_element(b, w, a)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn branches(tape: &mut Tape<f64>, r: &mut ChaCha8Rng) -> ([Var; 3], [Tensor<f64>; 3]) {
        let ts: [Tensor<f64>; 3] = std::array::from_fn(|_| Tensor::uniform(&[1, 2, 2, 2, 2], -1.0, 1.0, r));
        (ts.clone().map(|t| tape.constant(t)), ts)
    }

    #[test]
    fn zero_logits_give_the_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(31);
        let mut tape = Tape::new();
        let (b, ts) = branches(&mut tape, &mut r);
        let l = tape.constant(Tensor::zeros(&[3]));
        let y = fuse_axes(&mut tape, b, l).unwrap();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            let mean = (ts[0].data()[i] + ts[1].data()[i] + ts[2].data()[i]) / 3.0;
            assert!((v - mean).abs() < 1e-15);
        }
        assert_eq!(softmax3([0.0; 3]), [1.0 / 3.0; 3]);
    }

    #[test]
    fn saturated_logits_select_one_branch() {
        let mut r = ChaCha8Rng::seed_from_u64(32);
        let mut tape = Tape::new();
        let (b, ts) = branches(&mut tape, &mut r);
        let l = tape.constant(Tensor::new(&[3], vec![20.0, 0.0, 0.0]).unwrap());
        let y = fuse_axes(&mut tape, b, l).unwrap();
        for (v, t) in tape.value(y).data().iter().zip(ts[0].data()) {
            assert!((v - t).abs() <= 1e-6 * t.abs().max(1e-3));
        }
    }

    #[test]
    fn softmax_of_one_two_three() {
        // e^k / (e + e^2 + e^3), evaluated independently
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let got = softmax3([1.0, 2.0, 3.0]);
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        for (g, w) in got.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((g - w).abs() < 5e-6);
        }
    }

    #[test]
    fn argmax_invariant_to_logit_shift() {
        let base = [0.3, -1.2, 0.9];
        let shifted = base.map(|v| v + 17.5);
        let (a, b) = (softmax3(base), softmax3(shifted));
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_branches_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 1]));
        let l = tape.constant(Tensor::zeros(&[3]));
        assert!(fuse_axes(&mut tape, [a, a, b], l).is_err());
    }
}
