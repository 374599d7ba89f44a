//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Operations are recorded in insertion order, which is also topological
//! order; `backward` replays them in strict reverse to accumulate gradients.
//! The tape is immutable once built, so repeated backward passes over the
//! same tape give identical results.

use super::kernels;
use super::kernels::Conv3dDims;
use super::ndarray::NdArray;
use crate::error::{Result, SdgError};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExtremeMode {
    Max,
    Min,
}

/// An operation whose forward and backward rules live outside the core op
/// set (fused losses, row normalization). `backward` returns one optional
/// gradient per input, aligned with the `inputs` it was recorded with.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&NdArray]) -> Result<NdArray>;
    fn backward(
        &self,
        inputs: &[&NdArray],
        output: &NdArray,
        gout: &NdArray,
    ) -> Vec<Option<NdArray>>;
}

enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        pad: Option<NodeId>,
        dims: Conv3dDims,
    },
    ReduceExtreme {
        input: NodeId,
        axis: usize,
        winners: Vec<u32>,
    },
    MaxPool2 {
        input: NodeId,
        winners: Vec<u32>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    MatvecAffine {
        features: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Neg {
        a: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Clamp {
        a: NodeId,
        lo: f64,
        hi: f64,
    },
    Log {
        a: NodeId,
    },
    Exp {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
        len: usize,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<NodeId>,
    },
}

struct Node {
    value: NdArray,
    op: Op,
}

/// Gradient map produced by [`Tape::backward`]. Only leaves retain their
/// gradients; interior buffers are released during the reverse sweep.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&NdArray> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, densified to exact zeros when the node does not
    /// reach the root.
    pub fn take_or_zeros(&mut self, tape: &Tape, id: NodeId) -> NdArray {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| NdArray::zeros(tape.value(id).shape()))
    }

    pub fn or_zeros(&self, tape: &Tape, id: NodeId) -> NdArray {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| NdArray::zeros(tape.value(id).shape()))
    }
}

enum Broadcast {
    Same,
    ScalarLeft,
    ScalarRight,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NdArray {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: NdArray, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: NdArray) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(NdArray::scalar(value))
    }

    /// Same-padded 3D cross-correlation. Out-of-bounds taps read the `pad`
    /// node's value (a differentiable scalar) or zero when absent.
    pub fn conv3d_same(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        pad: Option<NodeId>,
    ) -> Result<NodeId> {
        let dims = kernels::conv3d_dims(self.value(input).shape(), self.value(kernels).shape())?;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [dims.cout] {
                return Err(SdgError::contract(format!(
                    "conv3d bias must be [{}], got {bs:?}",
                    dims.cout
                )));
            }
        }
        let pad_value = match pad {
            Some(p) => self.value(p).item()?,
            None => 0.0,
        };
        let out = kernels::conv3d_forward(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
            pad_value,
            &dims,
        );
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernels,
                bias,
                pad,
                dims,
            },
        ))
    }

    /// Extreme along `axis`; the axis is removed from the shape. Backward
    /// routes the incoming gradient to the winning element of each group,
    /// lowest index on ties.
    pub fn reduce_extreme(
        &mut self,
        input: NodeId,
        axis: usize,
        mode: ExtremeMode,
    ) -> Result<NodeId> {
        let (out, winners) =
            kernels::reduce_extreme(self.value(input), axis, mode == ExtremeMode::Max)?;
        Ok(self.push(
            out,
            Op::ReduceExtreme {
                input,
                axis,
                winners,
            },
        ))
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, winners) = kernels::max_pool2(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, winners }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool { input }))
    }

    pub fn matvec_affine(
        &mut self,
        features: NodeId,
        weights: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let out = kernels::matvec_affine(self.value(features), self.value(weights), self.value(bias))?;
        Ok(self.push(
            out,
            Op::MatvecAffine {
                features,
                weights,
                bias,
            },
        ))
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId, opname: &str) -> Result<Broadcast> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Broadcast::ScalarRight)
        } else if self.value(a).len() == 1 {
            Ok(Broadcast::ScalarLeft)
        } else {
            Err(SdgError::contract(format!(
                "{opname}: shapes {sa:?} and {sb:?} broadcast only when identical or one side is a scalar"
            )))
        }
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        opname: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let kind = self.broadcast_kind(a, b, opname)?;
        let va = self.value(a);
        let vb = self.value(b);
        let out = match kind {
            Broadcast::Same => {
                let data = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                NdArray::new(va.shape().to_vec(), data)?
            }
            Broadcast::ScalarRight => {
                let s = vb.data()[0];
                va.map(|x| f(x, s))
            }
            Broadcast::ScalarLeft => {
                let s = va.data()[0];
                vb.map(|y| f(s, y))
            }
        };
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg { a })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale { a, c })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(SdgError::contract(format!(
                "clamp interval [{lo}, {hi}] is empty"
            )));
        }
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(out, Op::Clamp { a, lo, hi }))
    }

    /// `max(0, x)` with subgradient 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.clamp(a, 0.0, f64::INFINITY)
            .expect("relu interval is valid")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(SdgError::domain(format!(
                "log of non-positive value {v}"
            )));
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log { a }))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp { a })
    }

    /// Sum of all elements, yielding a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(NdArray::scalar(total), Op::Sum { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Concatenate along the first axis. All parts must agree on the
    /// remaining extents.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(SdgError::contract("concat of zero parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() {
            return Err(SdgError::contract("concat parts must have rank >= 1"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != first[1..] {
                return Err(SdgError::contract(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    v.shape(),
                    first
                )));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = rows;
        let out = NdArray::new(shape, data)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// `len` rows starting at `start` along the first axis.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() == 0 || start + len > v.shape()[0] {
            return Err(SdgError::contract(format!(
                "slice rows {start}..{} out of range for shape {:?}",
                start + len,
                v.shape()
            )));
        }
        let inner: usize = v.shape()[1..].iter().product();
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let out = NdArray::new(shape, data)?;
        Ok(self.push(out, Op::SliceRows { a, start, len }))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&NdArray> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar-valued root. Returns the gradient of the
    /// root with respect to every leaf; leaves not on any path to the root
    /// get exact zeros (densified by [`Gradients::take_or_zeros`]).
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(SdgError::contract(format!(
                "backward root must be scalar-valued, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(NdArray::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue; // leaf gradients stay for the caller
            }
            let gout = grads[i].take().expect("checked above");
            self.step_backward(node, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<NdArray>], id: NodeId, delta: NdArray) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (slot, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *slot += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Gradient for the scalar-broadcast side of a binary op: fold `delta`
    /// down to the scalar's own shape.
    fn accumulate_folded(
        &self,
        grads: &mut [Option<NdArray>],
        id: NodeId,
        delta_sum: f64,
    ) {
        let shape = self.value(id).shape().to_vec();
        let mut d = NdArray::zeros(&shape);
        d.data_mut()[0] = delta_sum;
        Self::accumulate(grads, id, d);
    }

    fn step_backward(&self, node: &Node, gout: &NdArray, grads: &mut [Option<NdArray>]) {
        match &node.op {
            Op::Leaf => unreachable!("handled by caller"),
            Op::Conv3d {
                input,
                kernels: kern,
                bias,
                pad,
                dims,
            } => {
                let gin = kernels::conv3d_backward_input(gout, self.value(*kern), dims);
                Self::accumulate(grads, *input, gin);
                let pad_value = pad.map_or(0.0, |p| self.value(p).data()[0]);
                let gw =
                    kernels::conv3d_backward_kernels(self.value(*input), gout, pad_value, dims);
                Self::accumulate(grads, *kern, gw);
                if let Some(b) = bias {
                    Self::accumulate(grads, *b, kernels::conv3d_backward_bias(gout, dims));
                }
                if let Some(p) = pad {
                    let gp = kernels::conv3d_backward_pad(gout, self.value(*kern), dims);
                    self.accumulate_folded(grads, *p, gp);
                }
            }
            Op::ReduceExtreme {
                input,
                axis,
                winners,
            } => {
                let gin = kernels::reduce_extreme_backward(
                    gout,
                    winners,
                    self.value(*input).shape(),
                    *axis,
                );
                Self::accumulate(grads, *input, gin);
            }
            Op::MaxPool2 { input, winners } => {
                let gin =
                    kernels::max_pool2_backward(gout, winners, self.value(*input).shape());
                Self::accumulate(grads, *input, gin);
            }
            Op::GlobalAvgPool { input } => {
                let gin = kernels::global_avg_pool_backward(gout, self.value(*input).shape());
                Self::accumulate(grads, *input, gin);
            }
            Op::MatvecAffine {
                features,
                weights,
                bias,
            } => {
                let (gf, gw, gb) = kernels::matvec_affine_backward(
                    self.value(*features),
                    self.value(*weights),
                    gout,
                );
                Self::accumulate(grads, *features, gf);
                Self::accumulate(grads, *weights, gw);
                Self::accumulate(grads, *bias, gb);
            }
            Op::Add { a, b } => {
                self.binary_grad(grads, *a, *b, gout, |_, _, g| (g, g));
            }
            Op::Sub { a, b } => {
                self.binary_grad(grads, *a, *b, gout, |_, _, g| (g, -g));
            }
            Op::Mul { a, b } => {
                self.binary_grad(grads, *a, *b, gout, |x, y, g| (g * y, g * x));
            }
            Op::Neg { a } => {
                Self::accumulate(grads, *a, gout.map(|g| -g));
            }
            Op::Scale { a, c } => {
                let c = *c;
                Self::accumulate(grads, *a, gout.map(|g| c * g));
            }
            Op::Clamp { a, lo, hi } => {
                let va = self.value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&x, &g)| if x > *lo && x < *hi { g } else { 0.0 })
                    .collect();
                Self::accumulate(
                    grads,
                    *a,
                    NdArray::new(va.shape().to_vec(), data).expect("clamp gradient shape"),
                );
            }
            Op::Log { a } => {
                let va = self.value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&x, &g)| g / x)
                    .collect();
                Self::accumulate(
                    grads,
                    *a,
                    NdArray::new(va.shape().to_vec(), data).expect("log gradient shape"),
                );
            }
            Op::Exp { a } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&y, &g)| g * y)
                    .collect();
                Self::accumulate(
                    grads,
                    *a,
                    NdArray::new(node.value.shape().to_vec(), data).expect("exp gradient shape"),
                );
            }
            Op::Sum { a } => {
                let g = gout.data()[0];
                Self::accumulate(grads, *a, NdArray::filled(self.value(*a).shape(), g));
            }
            Op::Reshape { a } => {
                let ga = gout
                    .reshaped(self.value(*a).shape())
                    .expect("reshape gradient shape");
                Self::accumulate(grads, *a, ga);
            }
            Op::ConcatRows { parts } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    let slice = &gout.data()[offset * inner..(offset + rows) * inner];
                    let ga = NdArray::new(self.value(p).shape().to_vec(), slice.to_vec())
                        .expect("concat gradient shape");
                    Self::accumulate(grads, p, ga);
                    offset += rows;
                }
            }
            Op::SliceRows { a, start, len } => {
                let shape = self.value(*a).shape();
                let inner: usize = shape[1..].iter().product();
                let mut ga = NdArray::zeros(shape);
                ga.data_mut()[start * inner..(start + len) * inner]
                    .copy_from_slice(gout.data());
                Self::accumulate(grads, *a, ga);
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&NdArray> = inputs.iter().map(|&i| self.value(i)).collect();
                let deltas = op.backward(&values, &node.value, gout);
                debug_assert_eq!(deltas.len(), inputs.len());
                for (input, delta) in inputs.iter().zip(deltas) {
                    if let Some(d) = delta {
                        Self::accumulate(grads, *input, d);
                    }
                }
            }
        }
    }

    /// Shared gradient plumbing for elementwise binary ops: `rule` maps
    /// `(a_value, b_value, gout)` to the two local gradient contributions.
    fn binary_grad(
        &self,
        grads: &mut [Option<NdArray>],
        a: NodeId,
        b: NodeId,
        gout: &NdArray,
        rule: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let va = self.value(a);
        let vb = self.value(b);
        let (a_scalar, b_scalar) = if va.shape() == vb.shape() {
            (false, false)
        } else if vb.len() == 1 {
            (false, true)
        } else {
            (true, false)
        };

        let fetch = |v: &NdArray, scalar: bool, i: usize| {
            if scalar {
                v.data()[0]
            } else {
                v.data()[i]
            }
        };

        if a_scalar {
            let mut asum = 0.0;
            let mut gb = NdArray::zeros(vb.shape());
            for i in 0..gout.len() {
                let (da, db) = rule(va.data()[0], vb.data()[i], gout.data()[i]);
                asum += da;
                gb.data_mut()[i] = db;
            }
            self.accumulate_folded(grads, a, asum);
            Self::accumulate(grads, b, gb);
        } else if b_scalar {
            let mut bsum = 0.0;
            let mut ga = NdArray::zeros(va.shape());
            for i in 0..gout.len() {
                let (da, db) = rule(va.data()[i], vb.data()[0], gout.data()[i]);
                ga.data_mut()[i] = da;
                bsum += db;
            }
            Self::accumulate(grads, a, ga);
            self.accumulate_folded(grads, b, bsum);
        } else {
            let mut ga = NdArray::zeros(va.shape());
            let mut gb = NdArray::zeros(vb.shape());
            for i in 0..gout.len() {
                let (da, db) = rule(fetch(va, false, i), fetch(vb, false, i), gout.data()[i]);
                ga.data_mut()[i] = da;
                gb.data_mut()[i] = db;
            }
            Self::accumulate(grads, a, ga);
            Self::accumulate(grads, b, gb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_array(shape: &[usize], rng: &mut SplitMix64) -> NdArray {
        let len = shape.iter().product();
        NdArray::new(shape.to_vec(), (0..len).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central finite differences of a scalar function of flat data.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            grad[i] = (hi - lo) / (2.0 * eps);
        }
        grad
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn root_equals_leaf_gives_gradient_one() {
        let mut tape = Tape::new();
        let x = tape.scalar_leaf(2.5);
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_vec(vec![1.0, -2.0, 3.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut rng = SplitMix64::new(4);
        let mut tape = Tape::new();
        let x = tape.leaf(random_array(&[6], &mut rng));
        let e = tape.exp(x);
        let s = tape.sum(e);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.scalar_leaf(1.0);
        let y = tape.scalar_leaf(2.0);
        let loss = tape.mul(x, x).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.take_or_zeros(&tape, y).data(), &[0.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_vec(vec![1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn three_op_composition_matches_finite_differences() {
        let mut rng = SplitMix64::new(7);
        let x0 = random_array(&[5], &mut rng).map(|v| v.abs() + 0.5);
        let f = |data: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(NdArray::from_vec(data.to_vec()));
            let lg = tape.log(x).unwrap();
            let sc = tape.scale(lg, 1.75);
            let ex = tape.exp(sc);
            tape.value(tape.sum(ex)).item().unwrap()
        };
        let fd = numeric_grad(f, x0.data(), 1e-6);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let lg = tape.log(x).unwrap();
        let sc = tape.scale(lg, 1.75);
        let ex = tape.exp(sc);
        let loss = tape.sum(ex);
        let grads = tape.backward(loss).unwrap();
        let err = max_rel_err(grads.get(x).unwrap().data(), &fd);
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(8);
        let input0 = random_array(&[1, 2, 3, 3, 3], &mut rng);
        let kern0 = random_array(&[2, 2, 3, 3, 3], &mut rng);
        let bias0 = random_array(&[2], &mut rng);
        let pad0 = 0.4;
        let coeffs = random_array(&[2 * 27], &mut rng);

        let run = |inp: &[f64], ker: &[f64], bia: &[f64], pad: f64| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(NdArray::new(vec![1, 2, 3, 3, 3], inp.to_vec()).unwrap());
            let w = tape.leaf(NdArray::new(vec![2, 2, 3, 3, 3], ker.to_vec()).unwrap());
            let b = tape.leaf(NdArray::from_vec(bia.to_vec()));
            let p = tape.scalar_leaf(pad);
            let y = tape.conv3d_same(x, w, Some(b), Some(p)).unwrap();
            let yr = tape.reshape(y, &[2 * 27]).unwrap();
            let c = tape.leaf(coeffs.clone());
            let prod = tape.mul(yr, c).unwrap();
            tape.value(tape.sum(prod)).item().unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(input0.clone());
        let w = tape.leaf(kern0.clone());
        let b = tape.leaf(bias0.clone());
        let p = tape.scalar_leaf(pad0);
        let y = tape.conv3d_same(x, w, Some(b), Some(p)).unwrap();
        let yr = tape.reshape(y, &[2 * 27]).unwrap();
        let c = tape.leaf(coeffs.clone());
        let prod = tape.mul(yr, c).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();

        let fd_x = numeric_grad(
            |d| run(d, kern0.data(), bias0.data(), pad0),
            input0.data(),
            1e-6,
        );
        assert!(max_rel_err(grads.get(x).unwrap().data(), &fd_x) <= 1e-6);

        let fd_w = numeric_grad(
            |d| run(input0.data(), d, bias0.data(), pad0),
            kern0.data(),
            1e-6,
        );
        assert!(max_rel_err(grads.get(w).unwrap().data(), &fd_w) <= 1e-6);

        let fd_b = numeric_grad(
            |d| run(input0.data(), kern0.data(), d, pad0),
            bias0.data(),
            1e-6,
        );
        assert!(max_rel_err(grads.get(b).unwrap().data(), &fd_b) <= 1e-6);

        let fd_p = numeric_grad(
            |d| run(input0.data(), kern0.data(), bias0.data(), d[0]),
            &[pad0],
            1e-6,
        );
        assert!(max_rel_err(grads.get(p).unwrap().data(), &fd_p) <= 1e-6);
    }

    #[test]
    fn reduce_gradient_matches_finite_differences_away_from_ties() {
        let mut rng = SplitMix64::new(9);
        let x0 = random_array(&[2, 3, 3], &mut rng);
        let f = |data: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(NdArray::new(vec![2, 3, 3], data.to_vec()).unwrap());
            let m = tape.reduce_extreme(x, 1, ExtremeMode::Max).unwrap();
            tape.value(tape.sum(m)).item().unwrap()
        };
        let fd = numeric_grad(f, x0.data(), 1e-6);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let m = tape.reduce_extreme(x, 1, ExtremeMode::Max).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        let err = max_rel_err(grads.get(x).unwrap().data(), &fd);
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn pool_gap_matvec_pipeline_matches_finite_differences() {
        let mut rng = SplitMix64::new(10);
        let x0 = random_array(&[2, 2, 4, 4, 4], &mut rng);
        let w0 = random_array(&[3, 2], &mut rng);
        let b0 = random_array(&[3], &mut rng);

        let run = |inp: &[f64], wt: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(NdArray::new(vec![2, 2, 4, 4, 4], inp.to_vec()).unwrap());
            let p = tape.max_pool2(x).unwrap();
            let g = tape.global_avg_pool(p).unwrap();
            let w = tape.leaf(NdArray::new(vec![3, 2], wt.to_vec()).unwrap());
            let b = tape.leaf(b0.clone());
            let y = tape.matvec_affine(g, w, b).unwrap();
            let e = tape.exp(y);
            tape.value(tape.sum(e)).item().unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let p = tape.max_pool2(x).unwrap();
        let g = tape.global_avg_pool(p).unwrap();
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.matvec_affine(g, w, b).unwrap();
        let e = tape.exp(y);
        let loss = tape.sum(e);
        let grads = tape.backward(loss).unwrap();

        let fd_x = numeric_grad(|d| run(d, w0.data()), x0.data(), 1e-6);
        assert!(max_rel_err(grads.get(x).unwrap().data(), &fd_x) <= 1e-6);
        let fd_w = numeric_grad(|d| run(x0.data(), d), w0.data(), 1e-6);
        assert!(max_rel_err(grads.get(w).unwrap().data(), &fd_w) <= 1e-6);
    }

    #[test]
    fn clamp_gradient_zero_outside_interval() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_vec(vec![-1.0, 0.5, 2.0]));
        let c = tape.clamp(x, 0.0, 1.0).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip_gradients() {
        let mut rng = SplitMix64::new(11);
        let x0 = random_array(&[4, 3], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let top = tape.slice_rows(x, 0, 2).unwrap();
        let bottom = tape.slice_rows(x, 2, 2).unwrap();
        let back = tape.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let doubled = tape.scale(back, 2.0);
        let loss = tape.sum(doubled);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn scalar_broadcast_mul_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_vec(vec![1.0, 2.0, 3.0]));
        let s = tape.scalar_leaf(4.0);
        let y = tape.mul(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 8.0, 12.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0, 4.0]);
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]); // sum of x
    }
}
