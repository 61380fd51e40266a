//! Selective-kernel fusion of the hybrid attention map with the block input.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure_shape, Result};
use crate::kernels::ConvSpec;
use crate::params::{ConvKind, ConvLayer, Ctx, ParamStore};
use crate::tensor::Real;

/// Channel reduction ratio of the squeeze step.
pub const SK_REDUCTION: usize = 4;

#[derive(Clone, Debug)]
pub struct SkFusion {
    pub channels: usize,
    squeeze: ConvLayer,
    select: ConvLayer,
}

impl SkFusion {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = (channels / SK_REDUCTION).max(1);
        let pw = ConvKind::Conv3(ConvSpec::pointwise());
        let squeeze =
            ConvLayer::new(store, &format!("{name}.squeeze"), channels, hidden, &[1, 1, 1], pw, rng)?;
        let select =
            ConvLayer::new(store, &format!("{name}.select"), hidden, 2 * channels, &[1, 1, 1], pw, rng)?;
        Ok(Self { channels, squeeze, select })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, h: Var, x: Var) -> Result<Var> {
        let sw = ctx.param(self.squeeze.weight);
        let sb = ctx.param(self.squeeze.bias);
        let bw = ctx.param(self.select.weight);
        let bb = ctx.param(self.select.bias);
        sk_fuse(&mut ctx.tape, h, x, [sw, sb, bw, bb]).map(|(y, _)| y)
    }
}

/// Mixes two same-shape maps with per-channel softmax weights:
/// `s = GAP(h + x)`, `z = squeeze(s)`, `(w_h, w_x) = softmax(select(z))`,
/// output `w_h ⊙ h + w_x ⊙ x`. The squeeze is linear: a rectifier on the
/// one or two hidden units of a narrow block dies at initialization.
///
/// `params` is `[squeeze.weight, squeeze.bias, select.weight, select.bias]`.
/// Also returns the branch weights with shape `(N, 2, C)`.
pub fn sk_fuse<T: Real>(tape: &mut Tape<T>, h: Var, x: Var, params: [Var; 4]) -> Result<(Var, Var)> {
    ensure_shape!(
        tape.shape(h) == tape.shape(x),
        "sk_fuse: branch shapes differ {:?} vs {:?}",
        tape.shape(h),
        tape.shape(x)
    );
    let [n, c, _, _, _] = tape.value(h).dims5()?;
    let [sw, sb, bw, bb] = params;
    let sum = tape.add(h, x)?;
    let s = tape.global_avg_pool3d(sum)?;
    let z = tape.conv3d(s, sw, Some(sb), ConvSpec::pointwise())?;
    let logits = tape.conv3d(z, bw, Some(bb), ConvSpec::pointwise())?;
    ensure_shape!(
        tape.shape(logits)[1] == 2 * c,
        "sk_fuse: selector emits {} logits for {c} channels",
        tape.shape(logits)[1]
    );
    let logits = tape.reshape(logits, &[n, 2, c])?;
    let weights = tape.softmax(logits, 1)?;
    let wh = tape.narrow(weights, 1, 0, 1)?;
    let wh = tape.reshape(wh, &[n, c, 1, 1, 1])?;
    let wx = tape.narrow(weights, 1, 1, 1)?;
    let wx = tape.reshape(wx, &[n, c, 1, 1, 1])?;
    let a = tape.mul_broadcast(h, wh)?;
    let b = tape.mul_broadcast(x, wx)?;
    Ok((tape.add(a, b)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(c: usize, r: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
        let hidden = (c / SK_REDUCTION).max(1);
        [
            Tensor::uniform(&[hidden, c, 1, 1, 1], -1.0, 1.0, r),
            Tensor::uniform(&[hidden], -1.0, 1.0, r),
            Tensor::uniform(&[2 * c, hidden, 1, 1, 1], -1.0, 1.0, r),
            Tensor::uniform(&[2 * c], -1.0, 1.0, r),
        ]
    }

    fn run(h: &Tensor<f64>, x: &Tensor<f64>, p: &[Tensor<f64>; 4]) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let xv = tape.constant(x.clone());
        let pv = p.clone().map(|t| tape.constant(t));
        let (y, w) = sk_fuse(&mut tape, hv, xv, pv).unwrap();
        (tape.value(y).clone(), tape.value(w).clone())
    }

    /// Straight-line re-derivation of the fusion rule.
    fn oracle(h: &Tensor<f64>, x: &Tensor<f64>, p: &[Tensor<f64>; 4]) -> Tensor<f64> {
        let [n, c, a, b, d] = h.dims5().unwrap();
        let vol = a * b * d;
        let hidden = p[1].numel();
        let mut out = Tensor::zeros(h.shape());
        for s in 0..n {
            let desc: Vec<f64> = (0..c)
                .map(|ch| {
                    let base = (s * c + ch) * vol;
                    (0..vol).map(|i| h.data()[base + i] + x.data()[base + i]).sum::<f64>() / vol as f64
                })
                .collect();
            let z: Vec<f64> = (0..hidden)
                .map(|j| {
                    p[1].data()[j] + (0..c).map(|ch| p[0].data()[j * c + ch] * desc[ch]).sum::<f64>()
                })
                .collect();
            let logit = |o: usize| p[3].data()[o] + (0..hidden).map(|j| p[2].data()[o * hidden + j] * z[j]).sum::<f64>();
            for ch in 0..c {
                let (lh, lx) = (logit(ch), logit(c + ch));
                let m = lh.max(lx);
                let (eh, ex) = ((lh - m).exp(), (lx - m).exp());
                let (wh, wx) = (eh / (eh + ex), ex / (eh + ex));
                let base = (s * c + ch) * vol;
                for i in 0..vol {
                    out.data_mut()[base + i] = wh * h.data()[base + i] + wx * x.data()[base + i];
                }
            }
        }
        out
    }

    #[test]
    fn equal_inputs_pass_through() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let h = Tensor::<f64>::uniform(&[1, 8, 2, 3, 2], -1.0, 1.0, &mut r);
        let p = random_params(8, &mut r);
        let (y, _) = run(&h, &h, &p);
        for (a, b) in y.data().iter().zip(h.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn branch_weights_sum_to_one() {
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let h = Tensor::<f64>::uniform(&[2, 4, 2, 2, 2], -1.0, 1.0, &mut r);
        let x = Tensor::<f64>::uniform(&[2, 4, 2, 2, 2], -1.0, 1.0, &mut r);
        let (_, w) = run(&h, &x, &random_params(4, &mut r));
        for s in 0..2 {
            for c in 0..4 {
                assert!((w.at(&[s, 0, c]) + w.at(&[s, 1, c]) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_reference_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(23);
        for c in [4, 8] {
            let h = Tensor::<f64>::uniform(&[2, c, 2, 3, 2], -1.0, 1.0, &mut r);
            let x = Tensor::<f64>::uniform(&[2, c, 2, 3, 2], -1.0, 1.0, &mut r);
            let p = random_params(c, &mut r);
            let (y, _) = run(&h, &x, &p);
            let o = oracle(&h, &x, &p);
            let err = y.data().iter().zip(o.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "c={c}: {err}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut r = ChaCha8Rng::seed_from_u64(24);
        let p = random_params(4, &mut r);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::<f64>::zeros(&[1, 4, 2, 2, 2]));
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 4, 2, 2, 3]));
        let pv = p.map(|t| tape.constant(t));
        assert!(sk_fuse(&mut tape, h, x, pv).is_err());
    }
}
