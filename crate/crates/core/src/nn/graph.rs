//! Tape of tensor operations and its reverse sweep.

use super::conv::{conv2d_backward, conv2d_impl, conv_transpose2d_backward, conv_transpose2d_impl};
use super::{gemm_portable, NnError, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize },
    MulConst { x: Var, c: Tensor<T> },
    LeakyRelu { x: Var, slope: T },
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool },
    Add { a: Var, b: Var },
    Pass { x: Var },
    Scale { x: Var, k: T },
    Square { x: Var },
    Softplus { x: Var },
    Slice { x: Var, start: usize },
    Concat { xs: Vec<Var> },
    Crop { x: Var },
    WeightedMse { x: Var, target: Tensor<T>, weights: Vec<T> },
    Sum { x: Var },
    Fused { inputs: Vec<Var>, grads: Vec<Tensor<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one backward sweep. A graph created
/// with [`Graph::portable`] evaluates convolutions with the fixed-order
/// kernel, which the coding path relies on.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    portable: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), portable: false }
    }

    pub fn portable() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), portable: true }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, NnError> {
        let out = conv2d_impl(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, self.portable)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, &ins))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var, NnError> {
        let out = conv_transpose2d_impl(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
            self.portable,
        )?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::ConvT { x, w, b, stride, pad, out_pad }, &ins))
    }

    /// Elementwise product with a constant tensor (used for kernel masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var, NnError> {
        if c.shape != self.shape(x) {
            return Err(NnError::ShapeError("mul_const shape mismatch".into()));
        }
        let mut out = self.value(x).clone();
        for (o, &m) in out.data.iter_mut().zip(&c.data) {
            *o = *o * m;
        }
        Ok(self.push(out, Op::MulConst { x, c }, &[x]))
    }

    /// Convolution whose kernel is `w` multiplied by a fixed mask.
    pub fn masked_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, mask: Tensor<T>, pad: usize) -> Result<Var, NnError> {
        let wm = self.mul_const(w, mask)?;
        self.conv2d(x, wm, b, 1, pad)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let out = self.value(x).map(|v| if v >= T::ZERO { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    /// `y_i = x_i · (β_i + Σ_j γ_ij x_j²)^(∓½)`; `inverse` selects the
    /// multiplicative form. `beta` is (1, C, 1, 1), `gamma` is (C, C, 1, 1).
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var, NnError> {
        let [n, c, h, w] = self.shape(x);
        if self.value(beta).len() != c || self.shape(gamma) != [c, c, 1, 1] {
            return Err(NnError::ShapeError(format!("GDN parameters do not match {c} channels")));
        }
        let hw = h * w;
        let xv = self.value(x);
        let d = gdn_denominator(xv, self.value(beta), self.value(gamma), self.portable);
        let a = if inverse { 0.5 } else { -0.5 };
        let mut out = xv.clone();
        for i in 0..n * c * hw {
            out.data[i] = out.data[i] * pow(d[i], a);
        }
        Ok(self.push(out, Op::Gdn { x, beta, gamma, inverse }, &[x, beta, gamma]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeError(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// `x + c` for a constant `c`; the gradient passes straight through.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, NnError> {
        if c.shape != self.shape(x) {
            return Err(NnError::ShapeError("add_const shape mismatch".into()));
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        Ok(self.push(out, Op::Pass { x }, &[x]))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Pass { x }, &[x])
    }

    /// Rounds half to even in the forward pass and passes the gradient
    /// through unchanged.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.round_even());
        self.push(out, Op::Pass { x }, &[x])
    }

    /// Rounds half to even; the result is a constant.
    pub fn round(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.round_even());
        self.constant(out)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::from_f64(k);
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale { x, k }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square { x }, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus { x }, &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c {
            return Err(NnError::ShapeError(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let src = self.value(x);
        let mut out = Tensor::zeros([n, len, h, w]);
        for b in 0..n {
            let s = (b * c + start) * hw;
            out.data[b * len * hw..(b + 1) * len * hw].copy_from_slice(&src.data[s..s + len * hw]);
        }
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let [n, _, h, w] = self.shape(xs[0]);
        if xs.iter().any(|&v| {
            let s = self.shape(v);
            s[0] != n || s[2] != h || s[3] != w
        }) {
            return Err(NnError::ShapeError("concat inputs differ in batch or spatial size".into()));
        }
        let total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let hw = h * w;
        let mut out = Tensor::zeros([n, total, h, w]);
        for b in 0..n {
            let mut off = 0;
            for &v in xs {
                let c = self.shape(v)[1];
                let src = &self.value(v).data[b * c * hw..(b + 1) * c * hw];
                let dst = (b * total + off) * hw;
                out.data[dst..dst + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// Keeps the top-left `h × w` sites.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var, NnError> {
        let s = self.shape(x);
        if h > s[2] || w > s[3] {
            return Err(NnError::ShapeError(format!("crop {h}×{w} of {:?}", s)));
        }
        let out = self.value(x).crop(0, 0, h, w);
        Ok(self.push(out, Op::Crop { x }, &[x]))
    }

    /// Mean over all elements of `weights[c] · (x − target)²`.
    pub fn weighted_mse(&mut self, x: Var, target: Tensor<T>, weights: &[f64]) -> Result<Var, NnError> {
        let [n, c, h, w] = self.shape(x);
        if target.shape != [n, c, h, w] || weights.len() != c {
            return Err(NnError::ShapeError("weighted_mse operands disagree".into()));
        }
        let weights: Vec<T> = weights.iter().map(|&v| T::from_f64(v)).collect();
        let xv = self.value(x);
        let mut acc = 0.0f64;
        for (i, (&a, &b)) in xv.data.iter().zip(&target.data).enumerate() {
            let d = (a - b).to_f64();
            acc += weights[(i / (h * w)) % c].to_f64() * d * d;
        }
        let out = Tensor::scalar(T::from_f64(acc / xv.len() as f64));
        Ok(self.push(out, Op::WeightedMse { x, target, weights }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(T::from_f64(self.value(x).sum()));
        self.push(out, Op::Sum { x }, &[x])
    }

    /// Scalar node whose value and input gradients were computed by the
    /// caller in one fused pass.
    pub fn fused(&mut self, inputs: &[Var], value: f64, grads: Vec<Tensor<T>>) -> Result<Var, NnError> {
        if grads.len() != inputs.len() || inputs.iter().zip(&grads).any(|(&v, g)| g.shape != self.shape(v)) {
            return Err(NnError::ShapeError("fused gradient shapes disagree with inputs".into()));
        }
        let out = Tensor::scalar(T::from_f64(value));
        Ok(self.push(out, Op::Fused { inputs: inputs.to_vec(), grads }, inputs))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape, self.nodes[v.0].value.shape);
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) {
        // Temporarily detach the op so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Conv { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(x), self.value(w), g, stride, pad, self.needs(x));
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let Some(b) = b {
                    let shape = self.shape(b);
                    self.accumulate(b, Tensor { shape, data: db.data });
                }
            }
            &Op::ConvT { x, w, b, stride, pad, out_pad } => {
                let (dx, dw, db) = conv_transpose2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    out_pad,
                    self.needs(x),
                );
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let Some(b) = b {
                    let shape = self.shape(b);
                    self.accumulate(b, Tensor { shape, data: db.data });
                }
            }
            Op::MulConst { x, c } => {
                let mut d = g.clone();
                for (v, &m) in d.data.iter_mut().zip(&c.data) {
                    *v = *v * m;
                }
                self.accumulate(*x, d);
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let mut d = g.clone();
                for (v, &xi) in d.data.iter_mut().zip(&xv.data) {
                    if xi < T::ZERO {
                        *v = *v * slope;
                    }
                }
                self.accumulate(x, d);
            }
            &Op::Gdn { x, beta, gamma, inverse } => {
                let (dx, dbeta, dgamma) =
                    gdn_backward(self.value(x), self.value(beta), self.value(gamma), g, inverse);
                self.accumulate(x, dx);
                self.accumulate(beta, dbeta);
                self.accumulate(gamma, dgamma);
            }
            &Op::Add { a, b } => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            &Op::Pass { x } => self.accumulate(x, g.clone()),
            &Op::Scale { x, k } => self.accumulate(x, g.map(|v| v * k)),
            &Op::Square { x } => {
                let xv = self.value(x);
                let mut d = g.clone();
                for (v, &xi) in d.data.iter_mut().zip(&xv.data) {
                    *v = *v * (xi + xi);
                }
                self.accumulate(x, d);
            }
            &Op::Softplus { x } => {
                let xv = self.value(x);
                let mut d = g.clone();
                for (v, &xi) in d.data.iter_mut().zip(&xv.data) {
                    *v = *v * sigmoid(xi);
                }
                self.accumulate(x, d);
            }
            &Op::Slice { x, start } => {
                let [n, c, h, w] = self.shape(x);
                let len = g.shape[1];
                let hw = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    let s = (b * c + start) * hw;
                    d.data[s..s + len * hw].copy_from_slice(&g.data[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(x, d);
            }
            Op::Concat { xs } => {
                let [n, total, h, w] = g.shape;
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut d = Tensor::zeros([n, c, h, w]);
                    for b in 0..n {
                        let s = (b * total + off) * hw;
                        d.data[b * c * hw..(b + 1) * c * hw].copy_from_slice(&g.data[s..s + c * hw]);
                    }
                    self.accumulate(v, d);
                    off += c;
                }
            }
            &Op::Crop { x } => {
                let [_, _, h, w] = self.shape(x);
                self.accumulate(x, g.pad_to(h, w));
            }
            Op::WeightedMse { x, target, weights } => {
                let xv = self.value(*x);
                let [_, c, h, w] = xv.shape;
                let k = g.data[0] * T::from_f64(2.0 / xv.len() as f64);
                let mut d = xv.clone();
                for (i, (v, &t)) in d.data.iter_mut().zip(&target.data).enumerate() {
                    *v = k * weights[(i / (h * w)) % c] * (*v - t);
                }
                self.accumulate(*x, d);
            }
            &Op::Sum { x } => {
                let shape = self.shape(x);
                self.accumulate(x, Tensor::full(shape, g.data[0]));
            }
            Op::Fused { inputs, grads } => {
                let k = g.data[0];
                for (&v, gi) in inputs.iter().zip(grads) {
                    self.accumulate(v, gi.map(|e| e * k));
                }
            }
        }
        self.nodes[id].op = op;
    }
}

#[inline]
fn pow<T: Real>(d: T, a: f64) -> T {
    if a < 0.0 {
        T::ONE / d.sqrt()
    } else {
        d.sqrt()
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    let m = if x > T::ZERO { x } else { T::ZERO };
    m + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// `D = β + γ·x²` for every site, laid out like `x`.
fn gdn_denominator<T: Real>(x: &Tensor<T>, beta: &Tensor<T>, gamma: &Tensor<T>, portable: bool) -> Vec<T> {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let mut d = vec![T::ZERO; n * c * hw];
    let sq: Vec<T> = x.data.iter().map(|&v| v * v).collect();
    for b in 0..n {
        let s = b * c * hw;
        let dn = &mut d[s..s + c * hw];
        for ch in 0..c {
            dn[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = beta.data[ch]);
        }
        if portable {
            gemm_portable(c, c, hw, &gamma.data, c, 1, &sq[s..s + c * hw], dn, true);
        } else {
            T::gemm(c, c, hw, T::ONE, &gamma.data, c as isize, 1, &sq[s..s + c * hw], hw as isize, 1, T::ONE, dn, hw as isize, 1);
        }
    }
    d
}

fn gdn_backward<T: Real>(
    x: &Tensor<T>,
    beta: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    inverse: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let a = if inverse { 0.5 } else { -0.5 };
    let at = T::from_f64(a);
    let d = gdn_denominator(x, beta, gamma, false);
    let sq: Vec<T> = x.data.iter().map(|&v| v * v).collect();
    // t_i = g_i · x_i · a · D_i^(a−1)
    let mut t = vec![T::ZERO; d.len()];
    let mut dx = Tensor::zeros(x.shape);
    for i in 0..d.len() {
        let da = pow(d[i], a);
        t[i] = g.data[i] * x.data[i] * at * da / d[i];
        dx.data[i] = g.data[i] * da;
    }
    let mut dbeta = Tensor::zeros(beta.shape);
    let mut dgamma = Tensor::zeros(gamma.shape);
    let two = T::from_f64(2.0);
    let mut gt = vec![T::ZERO; c * hw];
    for b in 0..n {
        let s = b * c * hw;
        let tb = &t[s..s + c * hw];
        for ch in 0..c {
            let mut acc = T::ZERO;
            for &v in &tb[ch * hw..(ch + 1) * hw] {
                acc += v;
            }
            dbeta.data[ch] += acc;
        }
        // dγ_ij += Σ_sites t_i x_j²
        T::gemm(c, hw, c, T::ONE, tb, hw as isize, 1, &sq[s..s + c * hw], 1, hw as isize, T::ONE, &mut dgamma.data, c as isize, 1);
        // dx_k += 2 x_k (γᵀ t)_k
        T::gemm(c, c, hw, T::ONE, &gamma.data, 1, c as isize, tb, hw as isize, 1, T::ZERO, &mut gt, hw as isize, 1);
        for i in 0..c * hw {
            dx.data[s + i] += two * x.data[s + i] * gt[i];
        }
    }
    (dx, dbeta, dgamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![2.0, -2.0]).unwrap(), true);
        let y = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(y).data, vec![2.0, -0.02]);
    }

    #[test]
    fn gdn_closed_forms() {
        let x = Tensor::from_vec([1, 2, 1, 2], vec![1.0, -3.0, 0.5, 8.0]).unwrap();
        for (b, expect) in [(1.0, 1.0), (4.0, 0.5)] {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x.clone());
            let beta = g.constant(Tensor::full([1, 2, 1, 1], b));
            let gamma = g.constant(Tensor::zeros([2, 2, 1, 1]));
            let y = g.gdn(xv, beta, gamma, false).unwrap();
            let yi = g.gdn(xv, beta, gamma, true).unwrap();
            for i in 0..4 {
                assert!((g.value(y).data[i] - x.data[i] * expect).abs() < 1e-15);
                assert!((g.value(yi).data[i] - x.data[i] / expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn round_ste_is_ties_to_even_with_identity_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 1, 4], vec![2.5, 3.5, -0.5, 1.2]).unwrap(), true);
        let q = g.round_ste(x);
        assert_eq!(g.value(q).data, vec![2.0, 4.0, -0.0, 1.0]);
        let s = g.sum(q);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn slice_concat_crop_round_trip_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 3, 2, 2], (0..12).map(|v| v as f64).collect()).unwrap(), true);
        let a = g.slice_channels(x, 0, 1).unwrap();
        let b = g.slice_channels(x, 1, 2).unwrap();
        let c = g.concat_channels(&[b, a]).unwrap();
        assert_eq!(g.value(c).data[..4], [4.0, 5.0, 6.0, 7.0]);
        let d = g.crop(c, 1, 2).unwrap();
        let s = g.sum(d);
        g.backward(s);
        let grad = g.grad(x).unwrap();
        assert_eq!(grad.data, vec![1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0.]);
    }
}
