//! Reverse-mode gradient computation on a per-loss tape.
//!
//! The tape is rebuilt for every loss evaluation: constants and parameters
//! are pushed as leaves, operations append nodes, and `backward` walks the
//! recorded ops in reverse. `detach` and `grad_mask` implement
//! stop-gradient semantics (the value passes through, gradient does not).

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub type VarId = usize;

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    MulElem(VarId, VarId),
    Matmul(VarId, VarId),
    /// (n,m) + (1,m) broadcast over rows.
    AddRow(VarId, VarId),
    Tanh(VarId),
    Gelu(VarId),
    /// a*x + b elementwise.
    Affine(VarId, f64),
    Square(VarId),
    /// c - x.
    SubFromConst(VarId),
    /// x ⊙ c.
    MulConst(VarId, Box<Tensor>),
    /// gate (n,1) broadcast-multiplied into constant rows (n,d).
    ScaleRowsConst(VarId, Box<Tensor>),
    /// per-row sum of squares -> (n,1).
    RowSumSq(VarId),
    /// (n,1) -> (n/k,1), sums of consecutive groups of k.
    SumGroups(VarId, usize),
    /// (n,1) + (1,1) broadcast.
    AddVecScalar(VarId, VarId),
    MeanAll(VarId),
    SumAll(VarId),
    /// value = x, backward multiplies incoming gradient by the mask.
    GradMask(VarId, Box<Tensor>),
    Detach,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul_elem",
            Op::Matmul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Affine(..) => "affine",
            Op::Square(..) => "square",
            Op::SubFromConst(..) => "sub_from_const",
            Op::MulConst(..) => "mul_const",
            Op::ScaleRowsConst(..) => "scale_rows_const",
            Op::RowSumSq(..) => "row_sum_sq",
            Op::SumGroups(..) => "sum_groups",
            Op::AddVecScalar(..) => "add_vec_scalar",
            Op::MeanAll(..) => "mean_all",
            Op::SumAll(..) => "sum_all",
            Op::GradMask(..) => "grad_mask",
            Op::Detach => "detach",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::numeric(op.name(), "non-finite intermediate value"));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(self.nodes.len() - 1)
    }

    fn ng(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Result<VarId> {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Result<VarId> {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.sub(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul_elem(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.mul_elem(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MulElem(a, b), g)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ar, ac) = self.nodes[a].value.shape();
        let (br, _) = self.nodes[b].value.shape();
        if ac != br {
            return Err(Error::Config(format!(
                "matmul shape mismatch: ({ar},{ac}) x ({br},..)"
            )));
        }
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.add_row_broadcast(&self.nodes[row].value);
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.map(f64::tanh);
        let g = self.ng(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.map(gelu);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn affine(&mut self, a: VarId, scale: f64, shift: f64) -> Result<VarId> {
        let v = self.nodes[a].value.map(|x| scale * x + shift);
        let g = self.ng(a);
        self.push(v, Op::Affine(a, scale), g)
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.map(|x| x * x);
        let g = self.ng(a);
        self.push(v, Op::Square(a), g)
    }

    pub fn sub_from_const(&mut self, c: Tensor, a: VarId) -> Result<VarId> {
        let v = c.sub(&self.nodes[a].value);
        let g = self.ng(a);
        self.push(v, Op::SubFromConst(a), g)
    }

    pub fn mul_const(&mut self, a: VarId, c: Tensor) -> Result<VarId> {
        let v = self.nodes[a].value.mul_elem(&c);
        let g = self.ng(a);
        self.push(v, Op::MulConst(a, Box::new(c)), g)
    }

    /// value[i, j] = gate[i, 0] * c[i, j]
    pub fn scale_rows_const(&mut self, gate: VarId, c: Tensor) -> Result<VarId> {
        let gv = &self.nodes[gate].value;
        assert_eq!(gv.cols(), 1);
        assert_eq!(gv.rows(), c.rows());
        let mut v = c.clone();
        for i in 0..c.rows() {
            let g = gv.get(i, 0);
            for j in 0..c.cols() {
                v.set(i, j, g * c.get(i, j));
            }
        }
        let g = self.ng(gate);
        self.push(v, Op::ScaleRowsConst(gate, Box::new(c)), g)
    }

    pub fn row_sum_sq(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.row_sum_sq();
        let g = self.ng(a);
        self.push(v, Op::RowSumSq(a), g)
    }

    pub fn sum_groups(&mut self, a: VarId, k: usize) -> Result<VarId> {
        let av = &self.nodes[a].value;
        assert_eq!(av.cols(), 1);
        assert_eq!(av.rows() % k, 0, "sum_groups: rows not divisible by group size");
        let n = av.rows() / k;
        let mut data = vec![0.0; n];
        for (i, chunk) in av.data().chunks(k).enumerate() {
            data[i] = chunk.iter().sum();
        }
        let g = self.ng(a);
        self.push(Tensor::col_vec(data), Op::SumGroups(a, k), g)
    }

    pub fn add_vec_scalar(&mut self, vec: VarId, scalar: VarId) -> Result<VarId> {
        let s = self.nodes[scalar].value.item();
        let v = self.nodes[vec].value.map(|x| x + s);
        let g = self.ng(vec) || self.ng(scalar);
        self.push(v, Op::AddVecScalar(vec, scalar), g)
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let av = &self.nodes[a].value;
        let v = Tensor::scalar(av.sum() / av.len() as f64);
        let g = self.ng(a);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let v = Tensor::scalar(self.nodes[a].value.sum());
        let g = self.ng(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn grad_mask(&mut self, a: VarId, mask: Tensor) -> Result<VarId> {
        assert_eq!(self.nodes[a].value.shape(), mask.shape());
        let v = self.nodes[a].value.clone();
        let g = self.ng(a);
        self.push(v, Op::GradMask(a, Box::new(mask)), g)
    }

    pub fn detach(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.clone();
        let _ = a;
        self.push(v, Op::Detach, false)
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// callers read the slots of their parameter leaves.
    pub fn backward(&self, loss: VarId) -> Result<Vec<Option<Tensor>>> {
        let lv = &self.nodes[loss].value;
        if lv.len() != 1 {
            return Err(Error::Config(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.all_finite() {
                return Err(Error::numeric(node.op.name(), "non-finite gradient"));
            }
            let accum = |grads: &mut Vec<Option<Tensor>>, target: VarId, inc: Tensor| {
                if !self.nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(t) => t.add_assign(&inc),
                    slot @ None => *slot = Some(inc),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.scale(-1.0));
                }
                Op::MulElem(a, b) => {
                    accum(&mut grads, *a, g.mul_elem(&self.nodes[*b].value));
                    accum(&mut grads, *b, g.mul_elem(&self.nodes[*a].value));
                }
                Op::Matmul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accum(&mut grads, *a, g.matmul_nt(&self.nodes[*b].value));
                    }
                    if self.nodes[*b].needs_grad {
                        accum(&mut grads, *b, self.nodes[*a].value.matmul_tn(&g));
                    }
                }
                Op::AddRow(a, row) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *row, g.col_sums());
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accum(&mut grads, *a, g.zip(y, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    accum(&mut grads, *a, g.zip(x, |gi, xi| gi * gelu_grad(xi)));
                }
                Op::Affine(a, scale) => {
                    accum(&mut grads, *a, g.scale(*scale));
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    accum(&mut grads, *a, g.zip(x, |gi, xi| 2.0 * gi * xi));
                }
                Op::SubFromConst(a) => {
                    accum(&mut grads, *a, g.scale(-1.0));
                }
                Op::MulConst(a, c) => {
                    accum(&mut grads, *a, g.mul_elem(c));
                }
                Op::ScaleRowsConst(gate, c) => {
                    let mut dgate = vec![0.0; c.rows()];
                    for i in 0..c.rows() {
                        let mut acc = 0.0;
                        for j in 0..c.cols() {
                            acc += g.get(i, j) * c.get(i, j);
                        }
                        dgate[i] = acc;
                    }
                    accum(&mut grads, *gate, Tensor::col_vec(dgate));
                }
                Op::RowSumSq(a) => {
                    let x = &self.nodes[*a].value;
                    let mut dx = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let gi = g.get(i, 0);
                        for j in 0..x.cols() {
                            dx.set(i, j, 2.0 * gi * x.get(i, j));
                        }
                    }
                    accum(&mut grads, *a, dx);
                }
                Op::SumGroups(a, k) => {
                    let n = self.nodes[*a].value.rows();
                    let mut dx = vec![0.0; n];
                    for (i, v) in dx.iter_mut().enumerate() {
                        *v = g.get(i / k, 0);
                    }
                    accum(&mut grads, *a, Tensor::col_vec(dx));
                }
                Op::AddVecScalar(vec, scalar) => {
                    accum(&mut grads, *vec, g.clone());
                    accum(&mut grads, *scalar, Tensor::scalar(g.sum()));
                }
                Op::MeanAll(a) => {
                    let av = &self.nodes[*a].value;
                    let s = g.item() / av.len() as f64;
                    accum(&mut grads, *a, av.map(|_| s));
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[*a].value;
                    let s = g.item();
                    accum(&mut grads, *a, av.map(|_| s));
                }
                Op::GradMask(a, mask) => {
                    accum(&mut grads, *a, g.mul_elem(mask));
                }
                Op::Detach => {}
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // loss = w^2 at w = 3 -> dloss/dw = 6
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0)).unwrap();
        let sq = tape.square(w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[w].as_ref().unwrap().item(), 6.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0)).unwrap();
        let sq = tape.square(w).unwrap();
        let d = tape.detach(sq).unwrap();
        let loss = tape.sum_all(d).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads[w].is_none());
        assert_eq!(tape.value(loss).item(), 9.0);
    }

    #[test]
    fn grad_mask_scales_gradient_not_value() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::col_vec(vec![1.0, 2.0])).unwrap();
        let sq = tape.square(w).unwrap();
        let masked = tape
            .grad_mask(sq, Tensor::col_vec(vec![0.0, 1.0]))
            .unwrap();
        let loss = tape.sum_all(masked).unwrap();
        assert_eq!(tape.value(loss).item(), 5.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[w].as_ref().unwrap().data(), &[0.0, 4.0]);
    }

    #[test]
    fn matmul_chain_matches_manual() {
        // loss = sum((x W)^2), x constant.
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        let w = tape
            .param(Tensor::new(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap())
            .unwrap();
        let y = tape.matmul(x, w).unwrap(); // [4.5, -0.5]
        let sq = tape.square(y).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        assert!((tape.value(loss).item() - 20.5).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        // dloss/dW = x^T * 2y
        let gw = grads[w].as_ref().unwrap();
        assert_eq!(gw.data(), &[9.0, -1.0, 18.0, -2.0]);
    }

    #[test]
    fn nonfinite_intermediate_reports_op() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(1e308)).unwrap();
        let err = tape.affine(w, 1e10, 0.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("affine"), "message should identify op: {msg}");
    }
}
