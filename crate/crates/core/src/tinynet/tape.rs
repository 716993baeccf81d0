//! Reverse-mode autodiff on a Wengert tape.
//!
//! Every op appends a node holding its output values; nodes only reference
//! earlier nodes, so the tape order is a topological order and `backward`
//! is a single reverse sweep.

use super::kernels::{col2im, im2col, max_pool, Window};
use super::scalar::Scalar;
use super::NetError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp used inside the binary cross-entropy term.
pub const BCE_CLAMP: f64 = 1e-7;
/// Smoothing constant of the soft Dice term.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        batch: usize,
        out_channels: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        batch: usize,
        in_channels: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat {
        a: Var,
        b: Var,
        batch: usize,
        a_block: usize,
        b_block: usize,
    },
    Sum(Var),
    Mul(Var, Var),
    DiceBce {
        pred: Var,
        target: Var,
    },
}

/// One recorded value: shape, samples, accumulated gradient and the edge back
/// to the op that produced it.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
    op: Op,
}

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Gradient after [`Tape::backward`]; empty if the node does not require
    /// gradients or no backward pass has run.
    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Tensor<T>>,
}

fn shape_err(msg: impl Into<String>) -> NetError {
    NetError::ShapeMismatch(msg.into())
}

/// Splits `[N, C, s...]` into `(N, C, [d, h, w])`; 2D tensors get `d = 1`.
fn split_nc(shape: &[usize]) -> Result<(usize, usize, [usize; 3]), NetError> {
    match *shape {
        [n, c, h, w] => Ok((n, c, [1, h, w])),
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        _ => Err(shape_err(format!(
            "expected [N, C, H, W] or [N, C, D, H, W], got {shape:?}"
        ))),
    }
}

fn join_nc(n: usize, c: usize, ext: [usize; 3], rank: usize) -> Vec<usize> {
    if rank == 4 {
        vec![n, c, ext[1], ext[2]]
    } else {
        vec![n, c, ext[0], ext[1], ext[2]]
    }
}

/// Per-axis stride/padding: the depth axis of 2D data is left alone.
fn spatial(value: usize, rank: usize, neutral: usize) -> [usize; 3] {
    if rank == 4 {
        [neutral, value, value]
    } else {
        [value; 3]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> &[T] {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Tensor {
            shape,
            values,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input or parameter.
    pub fn leaf(
        &mut self,
        shape: &[usize],
        values: Vec<T>,
        requires_grad: bool,
    ) -> Result<Var, NetError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Cross-correlation of `x: [N, Cin, s...]` with `w: [Cout, Cin, k...]`,
    /// plus optional bias `[Cout]`. Output extent per axis is
    /// `(n + 2·padding − k) / stride + 1`.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NetError> {
        let rank = self.shape(x).len();
        let (batch, cin, ext) = split_nc(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != rank || ws[1] != cin {
            return Err(shape_err(format!(
                "kernel {ws:?} does not fit input {:?}",
                self.shape(x)
            )));
        }
        if stride == 0 {
            return Err(shape_err("stride must be positive"));
        }
        let cout = ws[0];
        let (_, _, kernel) = split_nc(&ws)?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let stride3 = spatial(stride, rank, 1);
        let pad3 = spatial(padding, rank, 0);
        let mut cols_ext = [0; 3];
        for a in 0..3 {
            let span = ext[a] + 2 * pad3[a];
            if span < kernel[a] {
                return Err(shape_err(format!(
                    "kernel {kernel:?} larger than padded input {ext:?}"
                )));
            }
            cols_ext[a] = (span - kernel[a]) / stride3[a] + 1;
        }
        let win = Window {
            channels: cin,
            image: ext,
            cols: cols_ext,
            kernel,
            stride: stride3,
            pad: pad3,
        };
        let (in_vol, out_vol, rows) = (win.image_volume(), win.col_volume(), win.rows());
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![T::zero(); batch * cout * out_vol];
        let mut cols = if win.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * out_vol]
        };
        for n in 0..batch {
            let xn = &xv[n * cin * in_vol..(n + 1) * cin * in_vol];
            let unfolded: &[T] = if win.is_pointwise() {
                xn
            } else {
                im2col(&win, xn, &mut cols);
                &cols
            };
            let yn = &mut out[n * cout * out_vol..(n + 1) * cout * out_vol];
            T::gemm(cout, rows, out_vol, wv, false, unfolded, false, yn, false);
            if let Some(b) = b {
                for (co, &bias) in self.value(b).iter().enumerate() {
                    for y in &mut yn[co * out_vol..(co + 1) * out_vol] {
                        *y += bias;
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            join_nc(batch, cout, cols_ext, rank),
            out,
            rg,
            Op::Conv {
                x,
                w,
                b,
                win,
                batch,
                out_channels: cout,
            },
        ))
    }

    /// Transposed convolution ("up-convolution") of `x: [N, Cin, s...]` with
    /// `w: [Cin, Cout, k...]`; output extent per axis is `(n − 1)·stride + k`.
    pub fn conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, NetError> {
        let rank = self.shape(x).len();
        let (batch, cin, ext) = split_nc(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != rank || ws[0] != cin {
            return Err(shape_err(format!(
                "transposed kernel {ws:?} does not fit input {:?}",
                self.shape(x)
            )));
        }
        if stride == 0 {
            return Err(shape_err("stride must be positive"));
        }
        let cout = ws[1];
        let (_, _, kernel) = split_nc(&ws)?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let stride3 = spatial(stride, rank, 1);
        let out_ext = [0, 1, 2].map(|a| (ext[a] - 1) * stride3[a] + kernel[a]);
        let win = Window {
            channels: cout,
            image: out_ext,
            cols: ext,
            kernel,
            stride: stride3,
            pad: [0; 3],
        };
        let (in_vol, out_vol, rows) = (win.col_volume(), win.image_volume(), win.rows());
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![T::zero(); batch * cout * out_vol];
        let mut cols = vec![T::zero(); rows * in_vol];
        for n in 0..batch {
            let xn = &xv[n * cin * in_vol..(n + 1) * cin * in_vol];
            T::gemm(rows, cin, in_vol, wv, true, xn, false, &mut cols, false);
            let yn = &mut out[n * cout * out_vol..(n + 1) * cout * out_vol];
            col2im(&win, &cols, yn);
            if let Some(b) = b {
                for (co, &bias) in self.value(b).iter().enumerate() {
                    for y in &mut yn[co * out_vol..(co + 1) * out_vol] {
                        *y += bias;
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            join_nc(batch, cout, out_ext, rank),
            out,
            rg,
            Op::ConvTranspose {
                x,
                w,
                b,
                win,
                batch,
                in_channels: cin,
            },
        ))
    }

    /// Non-overlapping max pooling over the spatial axes (window = stride).
    /// Ties route to the first element of the window in scan order.
    pub fn max_pool(&mut self, x: Var, window: usize) -> Result<Var, NetError> {
        let rank = self.shape(x).len();
        let (batch, c, ext) = split_nc(self.shape(x))?;
        if window == 0 {
            return Err(shape_err("pool window must be positive"));
        }
        let win = spatial(window, rank, 1);
        if (0..3).any(|a| ext[a] < win[a]) {
            return Err(shape_err(format!("pool window {window} exceeds extent {ext:?}")));
        }
        let (values, argmax) = max_pool(self.value(x), batch * c, ext, win);
        let out_ext = [0, 1, 2].map(|a| ext[a] / win[a]);
        let rg = self.needs(x);
        Ok(self.push(
            join_nc(batch, c, out_ext, rank),
            values,
            rg,
            Op::MaxPool { x, argmax },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, values, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let values = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, values, rg, Op::Sigmoid(x))
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let batch = sa[0];
        let vol: usize = sa[2..].iter().product();
        let (a_block, b_block) = (sa[1] * vol, sb[1] * vol);
        let mut values = Vec::with_capacity(batch * (a_block + b_block));
        for n in 0..batch {
            values.extend_from_slice(&self.value(a)[n * a_block..(n + 1) * a_block]);
            values.extend_from_slice(&self.value(b)[n * b_block..(n + 1) * b_block]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            shape,
            values,
            rg,
            Op::Concat {
                a,
                b,
                batch,
                a_block,
                b_block,
            },
        ))
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.needs(x);
        self.push(Vec::new(), vec![s], rg, Op::Sum(x))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "cannot multiply {:?} by {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, values, rg, Op::Mul(a, b)))
    }

    /// `0.5·softDice + 0.5·BCE` of probabilities `pred` against binary
    /// `target`, both reduced over every element.
    pub fn dice_bce(&mut self, pred: Var, target: Var) -> Result<Var, NetError> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(format!(
                "prediction {:?} vs target {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let loss = dice_bce_value(self.value(pred), self.value(target));
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Vec::new(), vec![loss], rg, Op::DiceBce { pred, target }))
    }

    /// Fills gradients of every node reachable from the scalar `loss`.
    /// Gradients from earlier backward passes are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), NetError> {
        let root = &self.nodes[loss.0];
        if root.values.len() != 1 {
            return Err(NetError::NonScalarLoss(root.shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                vec![T::zero(); node.values.len()]
            } else {
                Vec::new()
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            propagate(head, &tail[0]);
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn dice_terms<T: Scalar>(pred: &[T], target: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut total = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    (inter, total)
}

fn dice_bce_value<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let eps = T::of(DICE_EPS);
    let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
    let (inter, total) = dice_terms(pred, target);
    let dice = T::one() - (T::of(2.0) * inter + eps) / (total + eps);
    let mut bce = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        let pc = p.max(lo).min(hi);
        bce += -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
    }
    let bce = bce / T::of(pred.len() as f64);
    T::of(0.5) * dice + T::of(0.5) * bce
}

fn accumulate<T: Scalar>(node: &mut Tensor<T>, delta: &[T]) {
    if node.requires_grad {
        for (g, &d) in node.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Pushes `out.grad` into the gradients of `out`'s inputs (all in `head`).
fn propagate<T: Scalar>(head: &mut [Tensor<T>], out: &Tensor<T>) {
    let dy = &out.grad;
    match &out.op {
        Op::Leaf => {}
        Op::Relu(x) => {
            let node = &mut head[x.0];
            for ((g, &v), &d) in node.grad.iter_mut().zip(&node.values).zip(dy) {
                if v > T::zero() {
                    *g += d;
                }
            }
        }
        Op::Sigmoid(x) => {
            let node = &mut head[x.0];
            for ((g, &y), &d) in node.grad.iter_mut().zip(&out.values).zip(dy) {
                *g += d * y * (T::one() - y);
            }
        }
        Op::Sum(x) => {
            let d = dy[0];
            for g in &mut head[x.0].grad {
                *g += d;
            }
        }
        Op::Mul(a, b) => {
            let da: Vec<T> = dy.iter().zip(&head[b.0].values).map(|(&d, &v)| d * v).collect();
            let db: Vec<T> = dy.iter().zip(&head[a.0].values).map(|(&d, &v)| d * v).collect();
            accumulate(&mut head[a.0], &da);
            accumulate(&mut head[b.0], &db);
        }
        Op::Concat {
            a,
            b,
            batch,
            a_block,
            b_block,
        } => {
            let stride = a_block + b_block;
            for n in 0..*batch {
                let chunk = &dy[n * stride..(n + 1) * stride];
                let node = &mut head[a.0];
                if node.requires_grad {
                    for (g, &d) in node.grad[n * a_block..(n + 1) * a_block]
                        .iter_mut()
                        .zip(&chunk[..*a_block])
                    {
                        *g += d;
                    }
                }
                let node = &mut head[b.0];
                if node.requires_grad {
                    for (g, &d) in node.grad[n * b_block..(n + 1) * b_block]
                        .iter_mut()
                        .zip(&chunk[*a_block..])
                    {
                        *g += d;
                    }
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            let node = &mut head[x.0];
            for (&i, &d) in argmax.iter().zip(dy) {
                node.grad[i] += d;
            }
        }
        Op::DiceBce { pred, target } => {
            let scale = dy[0];
            let (p, t) = (&head[pred.0].values, &head[target.0].values);
            let eps = T::of(DICE_EPS);
            let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
            let (inter, total) = dice_terms(p, t);
            let num = T::of(2.0) * inter + eps;
            let den = total + eps;
            let inv_n = T::one() / T::of(p.len() as f64);
            let half = T::of(0.5);
            // d(dice)/dp_i = -(2 t_i den - num) / den², d(dice)/dt_i likewise with p_i.
            let dp: Vec<T> = p
                .iter()
                .zip(t)
                .map(|(&pi, &ti)| {
                    let g_dice = -(T::of(2.0) * ti * den - num) / (den * den);
                    let g_bce = if pi > lo && pi < hi {
                        (-(ti / pi) + (T::one() - ti) / (T::one() - pi)) * inv_n
                    } else {
                        T::zero()
                    };
                    scale * half * (g_dice + g_bce)
                })
                .collect();
            let dt: Vec<T> = if head[target.0].requires_grad {
                p.iter()
                    .map(|&pi| {
                        let g_dice = -(T::of(2.0) * pi * den - num) / (den * den);
                        let pc = pi.max(lo).min(hi);
                        let g_bce = -(pc.ln() - (T::one() - pc).ln()) * inv_n;
                        scale * half * (g_dice + g_bce)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            accumulate(&mut head[pred.0], &dp);
            if !dt.is_empty() {
                accumulate(&mut head[target.0], &dt);
            }
        }
        Op::Conv {
            x,
            w,
            b,
            win,
            batch,
            out_channels,
        } => {
            let cout = *out_channels;
            let (in_vol, out_vol, rows) = (win.image_volume(), win.col_volume(), win.rows());
            let cin = win.channels;
            let (need_x, need_w) = (head[x.0].requires_grad, head[w.0].requires_grad);
            let mut dw = if need_w { vec![T::zero(); cout * rows] } else { Vec::new() };
            let mut dx = if need_x { vec![T::zero(); head[x.0].values.len()] } else { Vec::new() };
            let mut cols = vec![T::zero(); if win.is_pointwise() { 0 } else { rows * out_vol }];
            let mut dcols = vec![T::zero(); if need_x { rows * out_vol } else { 0 }];
            {
                let xv = &head[x.0].values;
                let wv = &head[w.0].values;
                for n in 0..*batch {
                    let dy_n = &dy[n * cout * out_vol..(n + 1) * cout * out_vol];
                    let xn = &xv[n * cin * in_vol..(n + 1) * cin * in_vol];
                    if need_w {
                        let unfolded: &[T] = if win.is_pointwise() {
                            xn
                        } else {
                            im2col(win, xn, &mut cols);
                            &cols
                        };
                        T::gemm(cout, out_vol, rows, dy_n, false, unfolded, true, &mut dw, true);
                    }
                    if need_x {
                        let dxn = &mut dx[n * cin * in_vol..(n + 1) * cin * in_vol];
                        if win.is_pointwise() {
                            T::gemm(rows, cout, out_vol, wv, true, dy_n, false, dxn, true);
                        } else {
                            T::gemm(rows, cout, out_vol, wv, true, dy_n, false, &mut dcols, false);
                            col2im(win, &dcols, dxn);
                        }
                    }
                }
            }
            if let Some(b) = b {
                let db = bias_grad(dy, *batch, cout, out_vol);
                accumulate(&mut head[b.0], &db);
            }
            if need_w {
                accumulate(&mut head[w.0], &dw);
            }
            if need_x {
                accumulate(&mut head[x.0], &dx);
            }
        }
        Op::ConvTranspose {
            x,
            w,
            b,
            win,
            batch,
            in_channels,
        } => {
            let cin = *in_channels;
            let cout = win.channels;
            let (in_vol, out_vol, rows) = (win.col_volume(), win.image_volume(), win.rows());
            let (need_x, need_w) = (head[x.0].requires_grad, head[w.0].requires_grad);
            let mut dw = if need_w { vec![T::zero(); cin * rows] } else { Vec::new() };
            let mut dx = if need_x { vec![T::zero(); head[x.0].values.len()] } else { Vec::new() };
            let mut dcols = vec![T::zero(); rows * in_vol];
            {
                let xv = &head[x.0].values;
                let wv = &head[w.0].values;
                for n in 0..*batch {
                    let dy_n = &dy[n * cout * out_vol..(n + 1) * cout * out_vol];
                    im2col(win, dy_n, &mut dcols);
                    if need_x {
                        let dxn = &mut dx[n * cin * in_vol..(n + 1) * cin * in_vol];
                        T::gemm(cin, rows, in_vol, wv, false, &dcols, false, dxn, true);
                    }
                    if need_w {
                        let xn = &xv[n * cin * in_vol..(n + 1) * cin * in_vol];
                        T::gemm(cin, in_vol, rows, xn, false, &dcols, true, &mut dw, true);
                    }
                }
            }
            if let Some(b) = b {
                let db = bias_grad(dy, *batch, cout, out_vol);
                accumulate(&mut head[b.0], &db);
            }
            if need_w {
                accumulate(&mut head[w.0], &dw);
            }
            if need_x {
                accumulate(&mut head[x.0], &dx);
            }
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], batch: usize, channels: usize, vol: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, g) in db.iter_mut().enumerate() {
            let start = (n * channels + c) * vol;
            *g += dy[start..start + vol].iter().copied().sum::<T>();
        }
    }
    db
}
