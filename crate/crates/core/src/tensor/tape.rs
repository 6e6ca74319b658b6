use super::conv::{self, ConvGeometry};
use super::gemm::{gemm, Layout};
use super::{numel, same_shape, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<E> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Var, rows: usize, fan_in: usize, fan_out: usize },
    Conv2d { x: Var, w: Var, b: Var, geo: ConvGeometry, batch: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, geo: ConvGeometry, batch: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    Mse(Var, Var),
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
}

#[derive(Clone, Debug)]
struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    op: Op<E>,
    requires_grad: bool,
    /// Accumulated gradient, only kept for leaves.
    grad: Option<Vec<E>>,
}

/// Records operations in execution order and replays them in reverse to
/// compute gradients.
///
/// A tape and everything recorded on it belongs to one thread. Leaf
/// gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
#[derive(Clone, Debug, Default)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, op: Op<E>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<E> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a copy of `t` as a trainable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(shape.to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// A non-differentiable copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.node(v).grad.as_deref()
    }

    /// Sign pattern (`input > 0`) of every recorded ReLU, in recording order.
    ///
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every ReLU in the graph.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.nodes[a.0].value.iter().map(|&v| v > E::zero()));
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape(format!("matmul expects 2-D operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner dimensions of {sa:?} and {sb:?} differ")));
        }
        let mut out = vec![E::zero(); m * n];
        gemm(m, k, n, self.value(a), Layout::Normal, self.value(b), Layout::Normal, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Fully connected layer: `x [N, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[rows, fan_in], &[fan_out, wi]) = (sx, sw) else {
            return Err(Error::shape(format!("linear expects 2-D input and weight, got {sx:?} and {sw:?}")));
        };
        if wi != fan_in || sb != [fan_out] {
            return Err(Error::shape(format!("linear: input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let mut out = vec![E::zero(); rows * fan_out];
        gemm(rows, fan_in, fan_out, self.value(x), Layout::Normal, self.value(w), Layout::Transposed, &mut out, false);
        let bias = self.value(b);
        for row in out.chunks_mut(fan_out) {
            add_into(row, bias);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![rows, fan_out], out, Op::Linear { x, w, b, rows, fan_in, fan_out }, rg))
    }

    fn batch_dims(&self, x: Var, op: &str) -> Result<(usize, usize, usize, usize, bool)> {
        match *self.shape(x) {
            [c, h, w] => Ok((1, c, h, w, false)),
            [n, c, h, w] => Ok((n, c, h, w, true)),
            ref s => Err(Error::shape(format!("{op} expects [C,H,W] or [N,C,H,W], got {s:?}"))),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, h, wd, batched) = self.batch_dims(x, "conv2d")?;
        let &[c_out, wc, kh, kw] = self.shape(w) else {
            return Err(Error::shape(format!("conv2d weight must be 4-D, got {:?}", self.shape(w))));
        };
        if wc != c_in || self.shape(b) != [c_out] {
            return Err(Error::shape(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let geo = ConvGeometry::new(c_in, h, wd, c_out, kh, kw, stride, pad)?;
        let out = conv::conv2d_forward(self.value(x), batch, &geo, self.value(w), self.value(b));
        let mut shape = vec![c_out, geo.out_h(), geo.out_w()];
        if batched {
            shape.insert(0, batch);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, geo, batch }, rg))
    }

    /// Transposed convolution with weight `[C_in, C_out, kH, kW]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, h, wd, batched) = self.batch_dims(x, "conv_transpose2d")?;
        let &[wc, c_out, kh, kw] = self.shape(w) else {
            return Err(Error::shape(format!(
                "conv_transpose2d weight must be 4-D, got {:?}",
                self.shape(w)
            )));
        };
        if wc != c_in || self.shape(b) != [c_out] {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let geo = ConvGeometry::for_transposed(c_in, h, wd, c_out, kh, kw, stride, pad)?;
        let out = conv::conv_transpose2d_forward(self.value(x), batch, &geo, self.value(w), self.value(b));
        let mut shape = vec![c_out, geo.in_h, geo.in_w];
        if batched {
            shape.insert(0, batch);
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(shape, out, Op::ConvTranspose2d { x, w, b, geo, batch }, rg))
    }

    fn unary(&mut self, a: Var, op: Op<E>, f: impl Fn(E) -> E) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > E::zero() { v } else { E::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |v| E::one() / (E::one() + (-v).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |v| v.exp())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let s = E::lit(factor);
        self.unary(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let s = E::lit(offset);
        self.unary(a, Op::AddScalar(a), |v| v + s)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op<E>, f: impl Fn(E, E) -> E) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().copied().sum::<E>() / E::lit(v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![m], Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<E>();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().any(|&d| d == 0) || numel(shape) != self.value(a).len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// Collapses every dimension after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let lead = shape[0];
        let rest = numel(&shape[1..]).max(1);
        self.reshape(a, &[lead, rest]).expect("flatten preserves length")
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mse_loss", self.shape(pred), self.shape(target))?;
        let (p, t) = (self.value(pred), self.value(target));
        let total: E = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let m = total / E::lit(p.len() as f64);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![m], Op::Mse(pred, target), rg))
    }

    /// Concatenates `[N, d_i]` matrices along the second dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first().map(|&p| self.shape(p)) {
            Some(&[r, _]) => r,
            _ => return Err(Error::shape("concat_cols expects at least one 2-D operand")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [r, w] if r == rows => widths.push((p, w)),
                ref s => {
                    return Err(Error::shape(format!("concat_cols: operand {s:?} does not have {rows} rows")))
                }
            }
        }
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: widths, rows }, rg))
    }

    /// Backpropagates from a scalar `loss`, accumulating into every
    /// differentiable leaf it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let leaf = &mut self.nodes[i];
                match leaf.grad.as_mut() {
                    Some(acc) => add_into(acc, &g),
                    None => leaf.grad = Some(g),
                }
                continue;
            }
            let mut deltas: Vec<(Var, Vec<E>)> = Vec::new();
            let wants = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| self.nodes[v.0].value.as_slice();
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if wants(a) {
                        let mut d = vec![E::zero(); m * k];
                        gemm(m, n, k, &g, Layout::Normal, val(b), Layout::Transposed, &mut d, false);
                        deltas.push((a, d));
                    }
                    if wants(b) {
                        let mut d = vec![E::zero(); k * n];
                        gemm(k, m, n, val(a), Layout::Transposed, &g, Layout::Normal, &mut d, false);
                        deltas.push((b, d));
                    }
                }
                &Op::Linear { x, w, b, rows, fan_in, fan_out } => {
                    if wants(x) {
                        let mut d = vec![E::zero(); rows * fan_in];
                        gemm(rows, fan_out, fan_in, &g, Layout::Normal, val(w), Layout::Normal, &mut d, false);
                        deltas.push((x, d));
                    }
                    if wants(w) {
                        let mut d = vec![E::zero(); fan_out * fan_in];
                        gemm(fan_out, rows, fan_in, &g, Layout::Transposed, val(x), Layout::Normal, &mut d, false);
                        deltas.push((w, d));
                    }
                    if wants(b) {
                        let mut d = vec![E::zero(); fan_out];
                        for row in g.chunks(fan_out) {
                            add_into(&mut d, row);
                        }
                        deltas.push((b, d));
                    }
                }
                &Op::Conv2d { x, w, b, geo, batch } => {
                    let mut gx = wants(x).then(|| vec![E::zero(); val(x).len()]);
                    let mut gw = wants(w).then(|| vec![E::zero(); val(w).len()]);
                    let mut gb = wants(b).then(|| vec![E::zero(); val(b).len()]);
                    conv::conv2d_backward(
                        val(x),
                        batch,
                        &geo,
                        val(w),
                        &g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    deltas.extend([(x, gx), (w, gw), (b, gb)].into_iter().filter_map(|(v, d)| d.map(|d| (v, d))));
                }
                &Op::ConvTranspose2d { x, w, b, geo, batch } => {
                    let mut gx = wants(x).then(|| vec![E::zero(); val(x).len()]);
                    let mut gw = wants(w).then(|| vec![E::zero(); val(w).len()]);
                    let mut gb = wants(b).then(|| vec![E::zero(); val(b).len()]);
                    conv::conv_transpose2d_backward(
                        val(x),
                        batch,
                        &geo,
                        val(w),
                        &g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    deltas.extend([(x, gx), (w, gw), (b, gb)].into_iter().filter_map(|(v, d)| d.map(|d| (v, d))));
                }
                &Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(val(a))
                        .map(|(&gi, &xi)| if xi > E::zero() { gi } else { E::zero() })
                        .collect();
                    deltas.push((a, d));
                }
                &Op::Sigmoid(a) => {
                    let d = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gi, &y)| gi * y * (E::one() - y))
                        .collect();
                    deltas.push((a, d));
                }
                &Op::Exp(a) => {
                    let d = g.iter().zip(&node.value).map(|(&gi, &y)| gi * y).collect();
                    deltas.push((a, d));
                }
                &Op::Square(a) => {
                    let two = E::lit(2.0);
                    let d = g.iter().zip(val(a)).map(|(&gi, &x)| two * x * gi).collect();
                    deltas.push((a, d));
                }
                &Op::Add(a, b) => {
                    deltas.push((a, g.clone()));
                    deltas.push((b, g));
                }
                &Op::Sub(a, b) => {
                    deltas.push((b, g.iter().map(|&v| -v).collect()));
                    deltas.push((a, g));
                }
                &Op::Mul(a, b) => {
                    if wants(a) {
                        deltas.push((a, g.iter().zip(val(b)).map(|(&gi, &y)| gi * y).collect()));
                    }
                    if wants(b) {
                        deltas.push((b, g.iter().zip(val(a)).map(|(&gi, &x)| gi * x).collect()));
                    }
                }
                &Op::Scale(a, s) => deltas.push((a, g.iter().map(|&v| v * s).collect())),
                &Op::AddScalar(a) | &Op::Reshape(a) => deltas.push((a, g)),
                &Op::Mean(a) => {
                    let n = val(a).len();
                    deltas.push((a, vec![g[0] / E::lit(n as f64); n]));
                }
                &Op::Sum(a) => deltas.push((a, vec![g[0]; val(a).len()])),
                &Op::Mse(p, t) => {
                    let n = val(p).len();
                    let c = E::lit(2.0) * g[0] / E::lit(n as f64);
                    let d: Vec<E> = val(p).iter().zip(val(t)).map(|(&a, &b)| c * (a - b)).collect();
                    if wants(t) {
                        deltas.push((t, d.iter().map(|&v| -v).collect()));
                    }
                    deltas.push((p, d));
                }
                Op::ConcatCols { parts, rows } => {
                    let total: usize = parts.iter().map(|(_, w)| w).sum();
                    let mut offset = 0;
                    for &(p, w) in parts {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            d.extend_from_slice(&g[r * total + offset..][..w]);
                        }
                        offset += w;
                        deltas.push((p, d));
                    }
                }
            }
            for (v, d) in deltas {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => add_into(acc, &d),
                    None => grads[v.0] = Some(d),
                }
            }
        }
        Ok(())
    }
}
