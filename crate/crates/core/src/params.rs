//! Learnable parameters, layers built from them, and the per-forward
//! binding of parameters onto a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{ConvSpec, TransposeSpec};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

/// Flat, insertion-ordered parameter tree. The order is the stable
/// enumeration order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad, requires_grad: true });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds `(id, gradient)` pairs into the accumulators.
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor<T>)>) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.requires_grad {
                p.grad.add_assign(&g);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }
}

/// A tape plus the parameters bound onto it for one forward pass.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// `track = false` binds parameters as constants (inference).
    pub fn new(store: &'a ParamStore<T>, track: bool) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], track }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), self.track && p.requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Runs `f` on `tape` with every parameter bound to the matching var in
    /// `vars` (store order). Used to differentiate through parameters that
    /// are ordinary tape inputs.
    pub fn on_tape<R>(
        tape: &mut Tape<T>,
        store: &'a ParamStore<T>,
        vars: &[Var],
        f: impl FnOnce(&mut Ctx<'a, T>) -> R,
    ) -> R {
        let mut ctx = Ctx {
            tape: std::mem::take(tape),
            store,
            bound: vars.iter().map(|&v| Some(v)).collect(),
            track: true,
        };
        ctx.bound.resize(store.len(), None);
        let out = f(&mut ctx);
        *tape = ctx.tape;
        out
    }

    /// Backpropagates `loss` and returns the gradient of every bound parameter.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv2(ConvSpec<2>),
    Conv3(ConvSpec<3>),
    Transpose2(TransposeSpec<2>),
    Transpose3(TransposeSpec<3>),
}

/// A convolution (plain or transposed, 2D or 3D) with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kind: ConvKind,
}

impl ConvLayer {
    /// Creates the weight with uniform `±sqrt(1 / fan_in)` initialization,
    /// `fan_in = weight.shape[1] * kernel volume`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: &[usize],
        kind: ConvKind,
        rng: &mut R,
    ) -> Result<Self> {
        let (groups, transposed, dims) = match kind {
            ConvKind::Conv2(s) => (s.groups, false, 2),
            ConvKind::Conv3(s) => (s.groups, false, 3),
            ConvKind::Transpose2(s) => (s.groups, true, 2),
            ConvKind::Transpose3(s) => (s.groups, true, 3),
        };
        if kernel.len() != dims {
            return Err(Error::config(format!("{name}: kernel rank {} != {dims}", kernel.len())));
        }
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "{name}: channels {cin}->{cout} not divisible by {groups} groups"
            )));
        }
        let mut shape = if transposed {
            vec![cin, cout / groups]
        } else {
            vec![cout, cin / groups]
        };
        shape.extend_from_slice(kernel);
        let fan_in = shape[1] * kernel.iter().product::<usize>();
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = Tensor::uniform(&shape, -bound, bound, rng);
        let b = Tensor::uniform(&[cout], -bound, bound, rng);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            kind,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = Some(ctx.param(self.bias));
        match self.kind {
            ConvKind::Conv2(s) => ctx.tape.conv2d(x, w, b, s),
            ConvKind::Conv3(s) => ctx.tape.conv3d(x, w, b, s),
            ConvKind::Transpose2(s) => ctx.tape.conv_transpose2d(x, w, b, s),
            ConvKind::Transpose3(s) => ctx.tape.conv_transpose3d(x, w, b, s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_grad_clears_accumulators() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::ones(&[2, 2]));
        store.accumulate(vec![(id, Tensor::full(&[2, 2], 3.0))]);
        store.accumulate(vec![(id, Tensor::full(&[2, 2], 1.0))]);
        assert!(store.get(id).grad.data().iter().all(|&g| g == 4.0));
        store.zero_grad();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(id).grad.shape(), store.get(id).value.shape());
    }

    #[test]
    fn frozen_parameters_ignore_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::ones(&[1]));
        store.get_mut(id).requires_grad = false;
        store.accumulate(vec![(id, Tensor::ones(&[1]))]);
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = ConvLayer::new(
            &mut store,
            "c",
            8,
            4,
            &[3, 3],
            ConvKind::Conv2(ConvSpec::new(1, 1, 2)),
            &mut rng,
        )
        .unwrap();
        let w = store.value(layer.weight);
        assert_eq!(w.shape(), &[4, 4, 3, 3]);
        let bound = (1.0f64 / 36.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn indivisible_groups_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = ConvLayer::new(
            &mut store,
            "c",
            6,
            4,
            &[3, 3],
            ConvKind::Conv2(ConvSpec::new(1, 1, 4)),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
