//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child and the backward sweep is a single reverse pass. Quantizer
//! nodes use straight-through gradients from [`crate::quant`].

use crate::error::{Error, Result};
use crate::linalg;
use crate::quant::{quantize_value, round_half_even, ste_grad_input, ste_grad_scale, ste_grad_zero_point};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, eps: f32 },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BlockDiag { x: Var, count: usize },
    Sum(Var),
    SumSquares(Var),
    Mse(Var, Var),
    FakeQuant(Box<FakeQuantNode>),
    Cayley { theta: Var, inv: Tensor },
}

#[derive(Debug, Clone)]
struct FakeQuantNode {
    x: Var,
    scale: Var,
    zero_point: Option<Var>,
    q_min: i32,
    q_max: i32,
    /// `(stride, channels)` of the channel axis; `(1, 1)` for per-tensor.
    layout: (usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any tracked leaf reaches this node.
    tracked: bool,
}

/// Per-tensor or per-channel layout of a fake-quant node.
#[derive(Debug, Clone, Copy)]
pub enum QuantAxis {
    PerTensor,
    PerChannel(usize),
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; nodes the loss does not depend on get zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = parents(&op).iter().any(|p| self.nodes[p.0].tracked);
        self.push_node(value, op, tracked)
    }

    fn push_node(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Leaf that gradients never reach; its gradient reads as zeros.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Row-wise softmax; with `causal`, entries right of the diagonal are masked out.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &x.data()[i * c..i * c + width];
            let m = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for o in &mut out[i * c..i * c + width] {
                *o /= z;
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Row-wise `x / √(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        let mut out = x.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f32>() / c as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            for v in row {
                *v *= inv;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x: a, eps }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols { x: a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { x: a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&ts)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&ts)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn block_diag(&mut self, a: Var, count: usize) -> Result<Var> {
        let v = Tensor::block_diag(self.value(a), count)?;
        Ok(self.push(v, Op::BlockDiag { x: a, count }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sq_norm());
        self.push(v, Op::SumSquares(a))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let v = Tensor::scalar(d.sq_norm() / d.len() as f32);
        Ok(self.push(v, Op::Mse(a, b)))
    }

    /// Fake quantization with learnable scale (and optional zero-point) nodes.
    ///
    /// `scale` holds one entry per channel along `axis`. The zero-point node is
    /// real-valued; its forward value is rounded to the integer grid.
    pub fn fake_quant(
        &mut self,
        x: Var,
        scale: Var,
        zero_point: Option<Var>,
        q_min: i32,
        q_max: i32,
        axis: QuantAxis,
    ) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(scale);
        let layout = match axis {
            QuantAxis::PerTensor => (1, 1),
            QuantAxis::PerChannel(a) => {
                let shape = xv.shape();
                if a >= shape.len() {
                    return Err(Error::Dimension(format!("fake_quant axis {a} of rank {}", shape.len())));
                }
                (shape[a + 1..].iter().product(), shape[a])
            }
        };
        if sv.len() != layout.1 {
            return Err(Error::Dimension(format!(
                "fake_quant scale has {} entries for {} channels",
                sv.len(),
                layout.1
            )));
        }
        let zps: Vec<f32> = match zero_point {
            Some(z) => {
                let zv = self.value(z);
                if zv.len() != layout.1 {
                    return Err(Error::Dimension("fake_quant zero-point size".into()));
                }
                zv.data().iter().map(|&v| round_half_even(v)).collect()
            }
            None => vec![0.0; layout.1],
        };
        let (lo, hi) = (q_min as f32, q_max as f32);
        let (stride, channels) = layout;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / stride) % channels;
                let s = sv.data()[c];
                let z = zps[c];
                s * (quantize_value(v, s, z, lo, hi) - z)
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::FakeQuant(Box::new(FakeQuantNode { x, scale, zero_point, q_min, q_max, layout })),
        ))
    }

    /// `R = (I − A)(I + A)⁻¹` where `A` is skew-symmetric with its strictly upper
    /// triangle taken row-major from `theta`.
    pub fn cayley(&mut self, theta: Var, n: usize) -> Result<Var> {
        let th = self.value(theta);
        if n < 2 {
            return Err(Error::Dimension("cayley rotation needs n >= 2".into()));
        }
        if th.len() != n * (n - 1) / 2 {
            return Err(Error::Dimension(format!(
                "cayley parameters: {} values for n = {n}",
                th.len()
            )));
        }
        let (r, inv) = linalg::cayley_forward(th.data(), n)?;
        Ok(self.push(r, Op::Cayley { theta, inv }))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for p in parents(&node.op) {
                if p.0 >= i {
                    return Err(Error::Internal(format!("tape cycle: node {i} depends on {}", p.0)));
                }
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    add_grad(&mut grads[a.0], g.matmul_nt(val(*b))?)?;
                }
                if self.tracked(*b) {
                    add_grad(&mut grads[b.0], val(*a).transpose()?.matmul(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: ga = g b, gb = gᵀ a
                if self.tracked(*a) {
                    add_grad(&mut grads[a.0], g.matmul(val(*b))?)?;
                }
                if self.tracked(*b) {
                    add_grad(&mut grads[b.0], g.transpose()?.matmul(val(*a))?)?;
                }
            }
            Op::Transpose(a) => add_grad(&mut grads[a.0], g.transpose()?)?,
            Op::Add(a, b) => {
                add_grad(&mut grads[a.0], g.clone())?;
                add_grad(&mut grads[b.0], g.clone())?;
            }
            Op::Sub(a, b) => {
                add_grad(&mut grads[a.0], g.clone())?;
                add_grad(&mut grads[b.0], g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                add_grad(&mut grads[a.0], g.mul(val(*b))?)?;
                add_grad(&mut grads[b.0], g.mul(val(*a))?)?;
            }
            Op::Scale(a, k) => add_grad(&mut grads[a.0], g.scale(*k))?,
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                add_grad(&mut grads[a.0], g.mul(&d)?)?;
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut out = vec![0.0f32; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(vec![r, c], out)?)?;
            }
            Op::RmsNorm { x, eps } => {
                let xv = val(*x);
                let (r, c) = xv.dims2()?;
                let mut out = vec![0.0f32; r * c];
                for i in 0..r {
                    let xr = &xv.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let ms = xr.iter().map(|v| v * v).sum::<f32>() / c as f32;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gx: f32 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let k = gx * inv * inv * inv / c as f32;
                    for j in 0..c {
                        out[i * c + j] = gr[j] * inv - xr[j] * k;
                    }
                }
                add_grad(&mut grads[x.0], Tensor::new(vec![r, c], out)?)?;
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let (_, w) = g.dims2()?;
                let mut out = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    out.data_mut()[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                add_grad(&mut grads[x.0], out)?;
            }
            Op::SliceRows { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let mut out = Tensor::zeros(&[r, c]);
                out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                add_grad(&mut grads[x.0], out)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (_, w) = val(*p).dims2()?;
                    add_grad(&mut grads[p.0], g.slice_cols(offset, w)?)?;
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (h, _) = val(*p).dims2()?;
                    add_grad(&mut grads[p.0], g.slice_rows(offset, h)?)?;
                    offset += h;
                }
            }
            Op::BlockDiag { x, count } => {
                let (n, _) = val(*x).dims2()?;
                let size = n * count;
                let mut out = Tensor::zeros(&[n, n]);
                for b in 0..*count {
                    for i in 0..n {
                        for j in 0..n {
                            out.data_mut()[i * n + j] += g.data()[(b * n + i) * size + b * n + j];
                        }
                    }
                }
                add_grad(&mut grads[x.0], out)?;
            }
            Op::Sum(a) => {
                let shape = val(*a).shape().to_vec();
                add_grad(&mut grads[a.0], Tensor::full(&shape, g.data()[0]))?;
            }
            Op::SumSquares(a) => add_grad(&mut grads[a.0], val(*a).scale(2.0 * g.data()[0]))?,
            Op::Mse(a, b) => {
                let d = val(*a).sub(val(*b))?;
                let k = 2.0 * g.data()[0] / d.len() as f32;
                add_grad(&mut grads[a.0], d.scale(k))?;
                add_grad(&mut grads[b.0], d.scale(-k))?;
            }
            Op::FakeQuant(fq) => self.fake_quant_backward(fq, g, grads)?,
            Op::Cayley { theta, inv } => {
                let gt = linalg::cayley_backward(&node.value, inv, g)?;
                add_grad(&mut grads[theta.0], gt)?;
            }
        }
        Ok(())
    }

    fn fake_quant_backward(&self, fq: &FakeQuantNode, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let xv = &self.nodes[fq.x.0].value;
        let sv = &self.nodes[fq.scale.0].value;
        let zps: Vec<i32> = match fq.zero_point {
            Some(z) => self.nodes[z.0].value.data().iter().map(|&v| round_half_even(v) as i32).collect(),
            None => vec![0; fq.layout.1],
        };
        let (stride, channels) = fq.layout;
        let mut gx = vec![0.0f32; xv.len()];
        let mut gs = vec![0.0f32; channels];
        let mut gz = vec![0.0f32; channels];
        for (i, (&x, &gi)) in xv.data().iter().zip(g.data()).enumerate() {
            let c = (i / stride) % channels;
            let s = sv.data()[c];
            let z = zps[c];
            gx[i] = gi * ste_grad_input(x, s, z, fq.q_min, fq.q_max);
            gs[c] += gi * ste_grad_scale(x, s, z, fq.q_min, fq.q_max);
            gz[c] += gi * ste_grad_zero_point(x, s, z, fq.q_min, fq.q_max);
        }
        add_grad(&mut grads[fq.x.0], Tensor::new(xv.shape().to_vec(), gx)?)?;
        add_grad(&mut grads[fq.scale.0], Tensor::new(sv.shape().to_vec(), gs)?)?;
        if let Some(z) = fq.zero_point {
            let shape = self.nodes[z.0].value.shape().to_vec();
            add_grad(&mut grads[z.0], Tensor::new(shape, gz)?)?;
        }
        Ok(())
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a) | Op::Scale(a, _) | Op::Silu(a) | Op::Sum(a) | Op::SumSquares(a) => vec![*a],
        Op::Softmax(x)
        | Op::RmsNorm { x, .. }
        | Op::SliceCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::BlockDiag { x, .. } => vec![*x],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        Op::FakeQuant(fq) => {
            let mut v = vec![fq.x, fq.scale];
            v.extend(fq.zero_point);
            v
        }
        Op::Cayley { theta, .. } => vec![*theta],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` around `x` in f64 around f32 evaluations.
    fn check_grad(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = f(&mut tape, v);
        let g = tape.backward(loss).unwrap().get(v);
        let h = 1e-2f32;
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone());
            let l = f(&mut tape, v);
            tape.value(l).data()[0] as f64
        };
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h as f64);
            let an = g.data()[i] as f64;
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
            assert!(err < tol, "element {i}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let l = tape.sum(x);
        assert_eq!(tape.backward(l).unwrap().get(x), Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn silu_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4]));
        let s = tape.silu(x);
        let l = tape.sum(s);
        assert_eq!(tape.backward(l).unwrap().get(x), Tensor::full(&[4], 0.5));
    }

    #[test]
    fn unused_parameter_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let unused = tape.leaf(Tensor::full(&[2, 2], 5.0));
        let l = tape.sum_squares(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_t(&mut rng, &[4, 3]);
        let x = rand_t(&mut rng, &[3, 4]);
        let w2 = w.clone();
        check_grad(&x, move |t, v| {
            let wv = t.leaf(w2.clone());
            let y = t.matmul(v, wv).unwrap();
            t.sum_squares(y)
        }, 1e-3);
        let w3 = w.clone();
        check_grad(&x, move |t, v| {
            let wv = t.leaf(w3.transpose().unwrap());
            let y = t.matmul_nt(v, wv).unwrap();
            let s = t.silu(y);
            t.sum_squares(s)
        }, 1e-3);
        let target = rand_t(&mut rng, &[3, 4]);
        check_grad(&x, move |t, v| {
            let n = t.rms_norm(v, 1e-5).unwrap();
            let sm = t.softmax_rows(n, true).unwrap();
            let tg = t.leaf(target.clone());
            t.mse(sm, tg).unwrap()
        }, 1e-3);
        check_grad(&x, |t, v| {
            let a = t.slice_cols(v, 1, 2).unwrap();
            let b = t.slice_cols(v, 0, 1).unwrap();
            let c = t.concat_cols(&[a, b]).unwrap();
            let r = t.slice_rows(c, 1, 2).unwrap();
            let rr = t.concat_rows(&[r, r]).unwrap();
            let tr = t.transpose(rr).unwrap();
            let m = t.mul(tr, tr).unwrap();
            let s = t.scale(m, 0.3);
            t.sum(s)
        }, 1e-3);
        let sq = rand_t(&mut rng, &[2, 2]);
        check_grad(&sq, |t, v| {
            let bd = t.block_diag(v, 3).unwrap();
            let y = t.matmul(bd, bd).unwrap();
            let s = t.sub(y, bd).unwrap();
            let a = t.add(s, bd).unwrap();
            let a = t.silu(a);
            t.sum_squares(a)
        }, 1e-3);
    }

    #[test]
    fn fake_quant_scale_gradient_uses_ste() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.3, 500.0, -0.4]).unwrap());
        let s = tape.leaf(Tensor::scalar(1.0));
        let y = tape.fake_quant(x, s, None, -128, 127, QuantAxis::PerTensor).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        let expect = ste_grad_scale(2.3, 1.0, 0, -128, 127) + 127.0 + ste_grad_scale(-0.4, 1.0, 0, -128, 127);
        assert!((g.get(s).data()[0] - expect).abs() < 1e-6);
        assert_eq!(g.get(x).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn fake_quant_per_channel_and_zero_point() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, 99.0, -0.2, -99.0]).unwrap());
        let s = tape.leaf(Tensor::from_vec(vec![0.1, 0.5]).unwrap());
        let z = tape.leaf(Tensor::from_vec(vec![3.0, 1.0]).unwrap());
        let y = tape.fake_quant(x, s, Some(z), 0, 15, QuantAxis::PerChannel(0)).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        // one clipped element per row contributes −s
        assert_eq!(g.get(z).data(), &[-0.1, -0.5]);
        let g1 = ste_grad_scale(-0.2, 0.5, 1, 0, 15) + (0 - 1) as f32;
        assert_eq!(g.get(s).data()[1], g1);
        assert_eq!(g.get(x).data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
