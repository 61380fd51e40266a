//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and, when any
//! input needs a gradient, a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] walks the tape once in reverse.

use std::collections::HashMap;

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::{inner_size, outer_size, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(inputs, output, output_grad) -> one optional gradient per input`.
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Running hash of every piecewise branch taken, when recording.
    branches: Option<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the tape's gradient-requiring leaves.
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_node.remove(&v.0)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), branches: None }
    }

    /// Starts hashing the branch decisions of piecewise ops (rectifier
    /// masks, max-pool winners, log clamping). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn record_branches(&mut self) {
        self.branches.get_or_insert(0xcbf2_9ce4_8422_2325);
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub(crate) fn note_branches(&mut self, decisions: impl Iterator<Item = u64>) {
        if let Some(h) = self.branches.as_mut() {
            for d in decisions {
                *h = (*h ^ d).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The closure is dropped when no input needs a
    /// gradient, so inference-only graphs carry values alone.
    pub fn push<F>(&mut self, value: Tensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>
            + Send
            + Sync
            + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one. Leaves the loss does not depend on get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure_shape!(
            self.nodes[loss.0].value.numel() == 1,
            "backward needs a scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        let mut by_node = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                by_node.insert(idx, g);
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = backward(&inputs, &node.value, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&src, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[src].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[src].value.shape());
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { by_node })
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        ensure_shape!(
            self.shape(a) == self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |_, _, g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], |_, _, g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, &[a, b], |ins, _, g| {
            vec![
                Some(g.zip_map(ins[1], |g, y| g * y).unwrap()),
                Some(g.zip_map(ins[0], |g, x| g * x).unwrap()),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(out, &[a, b], |ins, out, g| {
            vec![
                Some(g.zip_map(ins[1], |g, y| g / y).unwrap()),
                Some(
                    g.zip_map(out, |g, q| g * q)
                        .unwrap()
                        .zip_map(ins[1], |gq, y| -gq / y)
                        .unwrap(),
                ),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |_, _, g| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], |_, _, g| vec![Some(g.clone())])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.branches.is_some() {
            let mask: Vec<u64> = self.value(a).data().iter().map(|&v| (v > T::zero()) as u64).collect();
            self.note_branches(mask.into_iter());
        }
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, &[a], |ins, _, g| {
            vec![Some(
                g.zip_map(ins[0], |g, x| if x > T::zero() { g } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: T) -> Var {
        if self.branches.is_some() {
            let mask: Vec<u64> = self.value(a).data().iter().map(|&v| (v > floor) as u64).collect();
            self.note_branches(mask.into_iter());
        }
        let out = self.value(a).map(|v| v.max(floor).ln());
        self.push(out, &[a], move |ins, _, g| {
            vec![Some(
                g.zip_map(ins[0], |g, x| if x > floor { g / x } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    // ---- shape plumbing -----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let orig = self.shape(a).to_vec();
        Ok(self.push(out, &[a], move |_, _, g| vec![Some(g.clone().reshape(&orig).unwrap())]))
    }

    /// Broadcasts `a` to `shape`; every dimension of `a` must equal the
    /// target or be 1. Backward sums over the broadcast dimensions.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        ensure_shape!(
            src.len() == shape.len()
                && src.iter().zip(shape).all(|(&s, &t)| s == t || s == 1),
            "cannot broadcast {src:?} to {shape:?}"
        );
        let map = broadcast_index_map(&src, shape);
        let value = self.value(a);
        let out = Tensor::from_fn(shape, |i| value.data()[map[i]]);
        Ok(self.push(out, &[a], move |ins, _, g| {
            let mut acc = Tensor::zeros(ins[0].shape());
            let d = acc.data_mut();
            for (gi, &m) in g.data().iter().zip(&map) {
                d[m] += *gi;
            }
            vec![Some(acc)]
        }))
    }

    /// Elementwise product with broadcasting of `b` onto `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let target = self.shape(a).to_vec();
        let b = if self.shape(b) == target.as_slice() { b } else { self.broadcast_to(b, &target)? };
        self.mul(a, b)
    }

    /// Concatenation along `dim`.
    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        ensure_shape!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        ensure_shape!(dim < first.len(), "concat dim {dim} out of range for {first:?}");
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            ensure_shape!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == dim || a == b),
                "concat shape mismatch {first:?} vs {s:?} along dim {dim}"
            );
            sizes.push(s[dim]);
        }
        let outer = outer_size(&first, dim);
        let inner = inner_size(&first, dim);
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[dim] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, parts, move |ins, _, g| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(ins)
                .map(|(&sz, inp)| {
                    let mut d = Vec::with_capacity(inp.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + sz * inner]);
                    }
                    offset += sz;
                    Some(Tensor::new(inp.shape(), d).unwrap())
                })
                .collect()
        }))
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&mut self, a: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure_shape!(
            dim < shape.len() && len >= 1 && start + len <= shape[dim],
            "narrow [{start}, {}) out of range for dim {dim} of {shape:?}",
            start + len
        );
        let outer = outer_size(&shape, dim);
        let inner = inner_size(&shape, dim);
        let full = shape[dim];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, &[a], move |ins, _, g| {
            let mut acc = Tensor::zeros(ins[0].shape());
            let d = acc.data_mut();
            for o in 0..outer {
                let s = (o * full + start) * inner;
                d[s..s + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(acc)]
        }))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |ins, _, g| vec![Some(Tensor::full(ins[0].shape(), g.data()[0]))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sums every dimension except `dim`, giving a vector of length `shape[dim]`.
    pub fn sum_keep(&mut self, a: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure_shape!(dim < shape.len(), "sum_keep dim {dim} out of range for {shape:?}");
        let outer = outer_size(&shape, dim);
        let inner = inner_size(&shape, dim);
        let n = shape[dim];
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for o in 0..outer {
            for (c, acc) in out.iter_mut().enumerate() {
                let s = (o * n + c) * inner;
                *acc += src[s..s + inner].iter().copied().sum::<T>();
            }
        }
        let out = Tensor::new(&[n], out)?;
        Ok(self.push(out, &[a], move |ins, _, g| {
            let mut acc = Tensor::zeros(ins[0].shape());
            let d = acc.data_mut();
            for o in 0..outer {
                for c in 0..n {
                    let s = (o * n + c) * inner;
                    d[s..s + inner].fill(g.data()[c]);
                }
            }
            vec![Some(acc)]
        }))
    }

    /// Scalar dot product of `a` with a fixed tensor of the same shape.
    pub fn dot_const(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        ensure_shape!(
            self.shape(a) == weights.shape(),
            "dot_const shape mismatch {:?} vs {:?}",
            self.shape(a),
            weights.shape()
        );
        let out = Tensor::scalar(self.value(a).dot(weights));
        let w = weights.clone();
        Ok(self.push(out, &[a], move |_, _, g| vec![Some(w.scale(g.data()[0]))]))
    }

    /// Softmax along `dim`.
    pub fn softmax(&mut self, a: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure_shape!(dim < shape.len(), "softmax dim {dim} out of range for {shape:?}");
        let outer = outer_size(&shape, dim);
        let inner = inner_size(&shape, dim);
        let n = shape[dim];
        let mut out = self.value(a).clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut m = T::neg_infinity();
                    for c in 0..n {
                        m = m.max(d[base + c * inner]);
                    }
                    let mut z = T::zero();
                    for c in 0..n {
                        let e = (d[base + c * inner] - m).exp();
                        d[base + c * inner] = e;
                        z += e;
                    }
                    for c in 0..n {
                        d[base + c * inner] /= z;
                    }
                }
            }
        }
        Ok(self.push(out, &[a], move |_, y, g| {
            let mut dx = Tensor::zeros(y.shape());
            let (yd, gd) = (y.data(), g.data());
            let dd = dx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dotp = T::zero();
                    for c in 0..n {
                        dotp += yd[base + c * inner] * gd[base + c * inner];
                    }
                    for c in 0..n {
                        let k = base + c * inner;
                        dd[k] = yd[k] * (gd[k] - dotp);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// `s[index] * a` for a vector-valued `s` (used for per-branch weights).
    pub fn scale_by_element(&mut self, a: Var, s: Var, index: usize) -> Result<Var> {
        ensure_shape!(
            index < self.value(s).numel(),
            "scale index {index} out of range for {:?}",
            self.shape(s)
        );
        let w = self.value(s).data()[index];
        let out = self.value(a).scale(w);
        Ok(self.push(out, &[a, s], move |ins, _, g| {
            let mut ds = Tensor::zeros(ins[1].shape());
            ds.data_mut()[index] = g.dot(ins[0]);
            vec![Some(g.scale(ins[1].data()[index])), Some(ds)]
        }))
    }
}

/// For every flat index of `dst`, the flat index of `src` it reads from.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Converts a missing-gradient lookup into an error with context.
pub fn require_grad<'a, T: Real>(grads: &'a Gradients<T>, v: Var, what: &str) -> Result<&'a Tensor<T>> {
    grads
        .get(v)
        .ok_or_else(|| Error::Invalid(format!("no gradient reached {what}")))
}
