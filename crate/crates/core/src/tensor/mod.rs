//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] records every differentiable op executed through it. Calling
//! [`Tape::backward`] on a scalar loss replays the record in reverse and
//! accumulates adjoints into the `grad` buffer of every input tensor.
//! Gradients accumulate additively across backward calls; callers zero them
//! explicitly before an optimizer step. All execution is single-threaded and
//! all reductions run in a fixed order, so identical inputs give bitwise
//! identical results on the same platform.

pub(crate) mod kernels;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense n-dimensional f64 array, row-major, optionally carrying a gradient.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// Working adjoint of the in-flight backward pass; folded into `grad`
    /// when consumed, so repeated backward calls accumulate cleanly.
    pending: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                pending: None,
                requires_grad,
            })),
        })
    }

    /// Constant tensor (no gradient requested).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, data, false)
    }

    /// Trainable parameter: participates in gradient accumulation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel], false).expect("zeros: consistent by construction")
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(Vec::new(), vec![value], false).expect("scalar: consistent by construction")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub(crate) fn borrow_data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.inner.borrow(), |d| &d.data)
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "scalar_value called on a non-scalar tensor");
        d.data[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Drops any accumulated gradient.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replaces the stored values; shape must be preserved.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut d = self.inner.borrow_mut();
        if data.len() != d.data.len() {
            return Err(Error::Dimension(format!(
                "set_data: expected {} elements, got {}",
                d.data.len(),
                data.len()
            )));
        }
        d.data = data;
        Ok(())
    }

    /// Mutates the stored values in place (used by the optimizer).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.inner.borrow_mut();
        debug_assert_eq!(delta.len(), d.data.len());
        match &mut d.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    fn take_pending(&self) -> Option<Vec<f64>> {
        self.inner.borrow_mut().pending.take()
    }

    fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, grad={})",
            d.shape,
            d.requires_grad,
            if d.grad.is_some() { "set" } else { "none" }
        )
    }
}

enum Op {
    Matmul,
    Transpose2,
    Reshape,
    Add,
    Mul,
    Scale(f64),
    BiasCh,
    Softmax { axis: usize },
    ReduceSum { keep: Vec<bool> },
    Gelu,
    Sigmoid,
    LayerNormCh { mean: Vec<f64>, rstd: Vec<f64> },
    DepthwiseConv { stride: usize, padding: usize },
    DenseConv { stride: usize, padding: usize },
    BceWithLogits { targets: Vec<f64> },
    RowDivShift { eps: f64 },
}

struct Step {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of executed ops, replayed in reverse by [`Tape::backward`].
pub struct Tape {
    steps: Vec<Step>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Recording tape for training / gradient checks.
    pub fn new() -> Self {
        Tape {
            steps: Vec::new(),
            recording: true,
        }
    }

    /// Non-recording tape for inference; backward is unavailable.
    pub fn inference() -> Self {
        Tape {
            steps: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn finish(&mut self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let track = self.recording && inputs.iter().any(Tensor::requires_grad);
        let out = Tensor::new(shape, data, track).expect("op output: consistent by construction");
        if track {
            self.steps.push(Step {
                op,
                inputs,
                output: out.clone(),
            });
        }
        out
    }

    /// c = a ⊗ b for rank-2 operands.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(&a.borrow_data(), &b.borrow_data(), m, k, n);
        Ok(self.finish(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    /// y = xᵀ for rank-2 x.
    pub fn transpose2(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose2: expected rank 2, got shape {s:?}"
            )));
        }
        let data = kernels::transpose(&x.borrow_data(), s[0], s[1]);
        Ok(self.finish(Op::Transpose2, vec![x.clone()], vec![s[1], s[0]], data))
    }

    /// Same elements, new shape.
    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Dimension(format!(
                "reshape: shape {:?} incompatible with {:?}",
                shape,
                x.shape()
            )));
        }
        let data = x.to_vec();
        Ok(self.finish(Op::Reshape, vec![x.clone()], shape, data))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "add: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        let data = a
            .borrow_data()
            .iter()
            .zip(b.borrow_data().iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.finish(Op::Add, vec![a.clone(), b.clone()], sa, data))
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "mul: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        let data = a
            .borrow_data()
            .iter()
            .zip(b.borrow_data().iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.finish(Op::Mul, vec![a.clone(), b.clone()], sa, data))
    }

    /// y = factor · x.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let data = x.borrow_data().iter().map(|v| v * factor).collect();
        Ok(self.finish(Op::Scale(factor), vec![x.clone()], x.shape(), data))
    }

    /// Adds a per-channel bias to a [c×h×w] tensor.
    pub fn bias_ch(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (sx, sb) = (x.shape(), bias.shape());
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::Dimension(format!(
                "bias_ch: expected [c,h,w] and [c], got {sx:?} and {sb:?}"
            )));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let xd = x.borrow_data();
        let bd = bias.borrow_data();
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let b = bd[ch];
            data.extend(xd[ch * hw..(ch + 1) * hw].iter().map(|v| v + b));
        }
        drop((xd, bd));
        Ok(self.finish(Op::BiasCh, vec![x.clone(), bias.clone()], sx, data))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let xd = x.borrow_data();
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "softmax: input contains non-finite values".into(),
            ));
        }
        let extent = shape[axis];
        let mut data = vec![0.0; xd.len()];
        kernels::for_each_lane(&shape, axis, |base, stride| {
            let mut max = f64::NEG_INFINITY;
            for j in 0..extent {
                max = max.max(xd[base + j * stride]);
            }
            let mut sum = 0.0;
            for j in 0..extent {
                let e = (xd[base + j * stride] - max).exp();
                data[base + j * stride] = e;
                sum += e;
            }
            for j in 0..extent {
                data[base + j * stride] /= sum;
            }
        });
        drop(xd);
        Ok(self.finish(Op::Softmax { axis }, vec![x.clone()], shape, data))
    }

    /// Sums out the listed axes; the summed extents are removed from the shape.
    pub fn reduce_sum(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = x.shape();
        let mut keep = vec![true; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Dimension(format!(
                    "reduce_sum: axis {a} out of range for shape {shape:?}"
                )));
            }
            if !keep[a] {
                return Err(Error::Dimension(format!("reduce_sum: duplicate axis {a}")));
            }
            keep[a] = false;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&d, _)| d)
            .collect();
        let out_numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; out_numel];
        let xd = x.borrow_data();
        for_each_reduced(&shape, &keep, |in_idx, out_idx| {
            data[out_idx] += xd[in_idx];
        });
        drop(xd);
        Ok(self.finish(Op::ReduceSum { keep }, vec![x.clone()], out_shape, data))
    }

    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.borrow_data().iter().map(|&v| kernels::gelu(v)).collect();
        Ok(self.finish(Op::Gelu, vec![x.clone()], x.shape(), data))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x
            .borrow_data()
            .iter()
            .map(|&v| kernels::sigmoid(v))
            .collect();
        Ok(self.finish(Op::Sigmoid, vec![x.clone()], x.shape(), data))
    }

    /// Layer normalization across the channel axis of a [c×h×w] tensor,
    /// with per-channel scale and shift.
    pub fn layer_norm_ch(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (sx, sg, sb) = (x.shape(), gamma.shape(), beta.shape());
        if sx.len() != 3 || sg != vec![sx[0]] || sb != vec![sx[0]] {
            return Err(Error::Dimension(format!(
                "layer_norm_ch: expected [c,h,w] with [c] scale/shift, got {sx:?}, {sg:?}, {sb:?}"
            )));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let xd = x.borrow_data();
        let gd = gamma.borrow_data();
        let bd = beta.borrow_data();
        let mut data = vec![0.0; c * hw];
        let mut mean = vec![0.0; hw];
        let mut rstd = vec![0.0; hw];
        for p in 0..hw {
            let mut m = 0.0;
            for ch in 0..c {
                m += xd[ch * hw + p];
            }
            m /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = xd[ch * hw + p] - m;
                var += d * d;
            }
            var /= c as f64;
            let r = 1.0 / (var + EPS).sqrt();
            mean[p] = m;
            rstd[p] = r;
            for ch in 0..c {
                let xhat = (xd[ch * hw + p] - m) * r;
                data[ch * hw + p] = gd[ch] * xhat + bd[ch];
            }
        }
        drop((xd, gd, bd));
        Ok(self.finish(
            Op::LayerNormCh { mean, rstd },
            vec![x.clone(), gamma.clone(), beta.clone()],
            sx,
            data,
        ))
    }

    /// Per-channel spatial convolution: x [c×h×w] with kernels [c×k×k].
    pub fn depthwise_conv2d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (sx, sk) = (x.shape(), kernel.shape());
        if sx.len() != 3 || sk.len() != 3 || sk[0] != sx[0] {
            return Err(Error::Dimension(format!(
                "depthwise_conv2d: expected [c,h,w] and [c,kh,kw], got {sx:?} and {sk:?}"
            )));
        }
        let (c, h, w, kh, kw) = (sx[0], sx[1], sx[2], sk[1], sk[2]);
        let (oh, ow) = conv_extents(h, w, kh, kw, stride, padding, "depthwise_conv2d")?;
        let data = kernels::dw_conv_forward(
            &x.borrow_data(),
            &kernel.borrow_data(),
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        );
        Ok(self.finish(
            Op::DepthwiseConv { stride, padding },
            vec![x.clone(), kernel.clone()],
            vec![c, oh, ow],
            data,
        ))
    }

    /// Dense convolution: x [cin×h×w] with weights [cout×cin×kh×kw].
    pub fn dense_conv2d(
        &mut self,
        x: &Tensor,
        weight: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (sx, sw) = (x.shape(), weight.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::Dimension(format!(
                "dense_conv2d: expected [cin,h,w] and [cout,cin,kh,kw], got {sx:?} and {sw:?}"
            )));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = conv_extents(h, w, kh, kw, stride, padding, "dense_conv2d")?;
        let data = kernels::dense_conv_forward(
            &x.borrow_data(),
            &weight.borrow_data(),
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        );
        Ok(self.finish(
            Op::DenseConv { stride, padding },
            vec![x.clone(), weight.clone()],
            vec![cout, oh, ow],
            data,
        ))
    }

    /// 1×1 channel-mixing convolution expressed as a matmul over channels.
    pub fn pointwise_conv2d(&mut self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let (sx, sw) = (x.shape(), weight.shape());
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(Error::Dimension(format!(
                "pointwise_conv2d: expected [c,h,w] and [cout,c], got {sx:?} and {sw:?}"
            )));
        }
        let flat = self.reshape(x, vec![sx[0], sx[1] * sx[2]])?;
        let mixed = self.matmul(weight, &flat)?;
        self.reshape(&mixed, vec![sw[0], sx[1], sx[2]])
    }

    /// Depthwise spatial convolution followed by 1×1 channel mixing.
    pub fn depthwise_separable_conv2d(
        &mut self,
        x: &Tensor,
        depthwise: &Tensor,
        pointwise: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let sk = depthwise.shape();
        if sk.len() != 3 || sk[1] != sk[2] || sk[1] % 2 == 0 {
            return Err(Error::Dimension(format!(
                "depthwise_separable_conv2d: kernel must be [c,k,k] with odd k, got {sk:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension(
                "depthwise_separable_conv2d: stride must be >= 1".into(),
            ));
        }
        let spatial = self.depthwise_conv2d(x, depthwise, stride, padding)?;
        self.pointwise_conv2d(&spatial, pointwise)
    }

    /// Mean binary cross-entropy over classes, computed from logits in the
    /// stable log-sum-exp form. Targets are constants in {0,1}.
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let (sl, st) = (logits.shape(), targets.shape());
        if sl != st {
            return Err(Error::Dimension(format!(
                "bce_with_logits: shape mismatch {sl:?} vs {st:?}"
            )));
        }
        let td = targets.to_vec();
        if td.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Contract(
                "bce_with_logits: targets must be exactly 0 or 1".into(),
            ));
        }
        if td.is_empty() {
            return Err(Error::Contract("bce_with_logits: empty target vector".into()));
        }
        let ld = logits.borrow_data();
        let n = ld.len() as f64;
        let loss = ld
            .iter()
            .zip(&td)
            .map(|(&l, &t)| kernels::bce_logit_term(l, t))
            .sum::<f64>()
            / n;
        drop(ld);
        Ok(self.finish(
            Op::BceWithLogits { targets: td },
            vec![logits.clone()],
            Vec::new(),
            vec![loss],
        ))
    }

    /// y[i][c] = q[i][c] / (s[i] + eps) for q [l×d] and s [l].
    pub fn row_div_shift(&mut self, q: &Tensor, s: &Tensor, eps: f64) -> Result<Tensor> {
        let (sq, ss) = (q.shape(), s.shape());
        if sq.len() != 2 || ss.len() != 1 || ss[0] != sq[0] {
            return Err(Error::Dimension(format!(
                "row_div_shift: expected [l,d] and [l], got {sq:?} and {ss:?}"
            )));
        }
        let (l, d) = (sq[0], sq[1]);
        let qd = q.borrow_data();
        let sd = s.borrow_data();
        let mut data = Vec::with_capacity(l * d);
        for i in 0..l {
            let denom = sd[i] + eps;
            data.extend(qd[i * d..(i + 1) * d].iter().map(|v| v / denom));
        }
        drop((qd, sd));
        Ok(self.finish(
            Op::RowDivShift { eps },
            vec![q.clone(), s.clone()],
            sq,
            data,
        ))
    }

    /// Replays the tape in reverse, accumulating adjoints of `loss` into the
    /// grad buffers of every recorded input. Repeated calls accumulate.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut touched: Vec<Tensor> = Vec::new();
        add_pending(&mut touched, loss, &[1.0]);
        for step in self.steps.iter().rev() {
            let dy = match step.output.take_pending() {
                Some(g) => g,
                None => continue,
            };
            step.output.accumulate_grad(&dy);
            backward_step(step, &dy, &mut touched);
        }
        // Whatever is left pending sits on leaves.
        for t in touched {
            if let Some(pend) = t.take_pending() {
                t.accumulate_grad(&pend);
            }
        }
        Ok(())
    }
}

fn add_pending(touched: &mut Vec<Tensor>, t: &Tensor, delta: &[f64]) {
    let fresh = {
        let mut d = t.inner.borrow_mut();
        debug_assert_eq!(delta.len(), d.data.len());
        match &mut d.pending {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
                false
            }
            None => {
                d.pending = Some(delta.to_vec());
                true
            }
        }
    };
    if fresh {
        touched.push(t.clone());
    }
}

fn conv_extents(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    what: &str,
) -> Result<(usize, usize)> {
    let oh = kernels::conv_out_extent(h, kh, stride, padding);
    let ow = kernels::conv_out_extent(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
        _ => Err(Error::Dimension(format!(
            "{what}: non-positive output extent for input {h}x{w}, kernel {kh}x{kw}, \
             stride {stride}, padding {padding}"
        ))),
    }
}

/// Calls `f(input_flat_index, output_flat_index)` for every element of a
/// row-major tensor, where the output index skips the axes with keep=false.
fn for_each_reduced(shape: &[usize], keep: &[bool], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    // Output strides aligned to input dims (0 for reduced dims).
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        if keep[d] {
            out_strides[d] = acc;
            acc *= shape[d];
        }
    }
    let mut idx = vec![0usize; rank];
    let mut out_idx = 0usize;
    for in_idx in 0..numel {
        f(in_idx, out_idx);
        // Odometer increment.
        for d in (0..rank).rev() {
            idx[d] += 1;
            out_idx += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            out_idx -= out_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn backward_step(step: &Step, dy: &[f64], touched: &mut Vec<Tensor>) {
    match &step.op {
        Op::Matmul => {
            let a = &step.inputs[0];
            let b = &step.inputs[1];
            let (sa, sb) = (a.shape(), b.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let bt = kernels::transpose(&b.borrow_data(), k, n);
            let da = kernels::matmul(dy, &bt, m, n, k);
            add_pending(touched, a, &da);
            let at = kernels::transpose(&a.borrow_data(), m, k);
            let db = kernels::matmul(&at, dy, k, m, n);
            add_pending(touched, b, &db);
        }
        Op::Transpose2 => {
            let x = &step.inputs[0];
            let s = step.output.shape();
            add_pending(touched, x, &kernels::transpose(dy, s[0], s[1]));
        }
        Op::Reshape => add_pending(touched, &step.inputs[0], dy),
        Op::Add => {
            add_pending(touched, &step.inputs[0], dy);
            add_pending(touched, &step.inputs[1], dy);
        }
        Op::Mul => {
            let a = &step.inputs[0];
            let b = &step.inputs[1];
            let da: Vec<f64> = dy
                .iter()
                .zip(b.borrow_data().iter())
                .map(|(g, v)| g * v)
                .collect();
            let db: Vec<f64> = dy
                .iter()
                .zip(a.borrow_data().iter())
                .map(|(g, v)| g * v)
                .collect();
            add_pending(touched, a, &da);
            add_pending(touched, b, &db);
        }
        Op::Scale(factor) => {
            let dx: Vec<f64> = dy.iter().map(|g| g * factor).collect();
            add_pending(touched, &step.inputs[0], &dx);
        }
        Op::BiasCh => {
            let bias = &step.inputs[1];
            let c = bias.numel();
            let hw = dy.len() / c;
            add_pending(touched, &step.inputs[0], dy);
            let mut db = vec![0.0; c];
            for ch in 0..c {
                db[ch] = dy[ch * hw..(ch + 1) * hw].iter().sum();
            }
            add_pending(touched, bias, &db);
        }
        Op::Softmax { axis } => {
            let shape = step.output.shape();
            let y = step.output.borrow_data();
            let extent = shape[*axis];
            let mut dx = vec![0.0; dy.len()];
            kernels::for_each_lane(&shape, *axis, |base, stride| {
                let mut dot = 0.0;
                for j in 0..extent {
                    let i = base + j * stride;
                    dot += dy[i] * y[i];
                }
                for j in 0..extent {
                    let i = base + j * stride;
                    dx[i] = y[i] * (dy[i] - dot);
                }
            });
            drop(y);
            add_pending(touched, &step.inputs[0], &dx);
        }
        Op::ReduceSum { keep } => {
            let x = &step.inputs[0];
            let shape = x.shape();
            let mut dx = vec![0.0; x.numel()];
            for_each_reduced(&shape, keep, |in_idx, out_idx| {
                dx[in_idx] = dy[out_idx];
            });
            add_pending(touched, x, &dx);
        }
        Op::Gelu => {
            let x = &step.inputs[0];
            let dx: Vec<f64> = dy
                .iter()
                .zip(x.borrow_data().iter())
                .map(|(g, &v)| g * kernels::gelu_grad(v))
                .collect();
            add_pending(touched, x, &dx);
        }
        Op::Sigmoid => {
            let y = step.output.borrow_data();
            let dx: Vec<f64> = dy.iter().zip(y.iter()).map(|(g, &s)| g * s * (1.0 - s)).collect();
            drop(y);
            add_pending(touched, &step.inputs[0], &dx);
        }
        Op::LayerNormCh { mean, rstd } => {
            let x = &step.inputs[0];
            let gamma = &step.inputs[1];
            let beta = &step.inputs[2];
            let sx = x.shape();
            let (c, hw) = (sx[0], sx[1] * sx[2]);
            let xd = x.borrow_data();
            let gd = gamma.borrow_data();
            let mut dx = vec![0.0; c * hw];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for p in 0..hw {
                let (m, r) = (mean[p], rstd[p]);
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for ch in 0..c {
                    let xhat = (xd[ch * hw + p] - m) * r;
                    let dyh = dy[ch * hw + p] * gd[ch];
                    m1 += dyh;
                    m2 += dyh * xhat;
                    dgamma[ch] += dy[ch * hw + p] * xhat;
                    dbeta[ch] += dy[ch * hw + p];
                }
                m1 /= c as f64;
                m2 /= c as f64;
                for ch in 0..c {
                    let xhat = (xd[ch * hw + p] - m) * r;
                    let dyh = dy[ch * hw + p] * gd[ch];
                    dx[ch * hw + p] = r * (dyh - m1 - xhat * m2);
                }
            }
            drop((xd, gd));
            add_pending(touched, x, &dx);
            add_pending(touched, gamma, &dgamma);
            add_pending(touched, beta, &dbeta);
        }
        Op::DepthwiseConv { stride, padding } => {
            let x = &step.inputs[0];
            let kern = &step.inputs[1];
            let (sx, sk, so) = (x.shape(), kern.shape(), step.output.shape());
            let mut dx = vec![0.0; x.numel()];
            let mut dk = vec![0.0; kern.numel()];
            kernels::dw_conv_backward(
                dy,
                &x.borrow_data(),
                &kern.borrow_data(),
                sx[0],
                sx[1],
                sx[2],
                sk[1],
                sk[2],
                *stride,
                *padding,
                so[1],
                so[2],
                &mut dx,
                &mut dk,
            );
            add_pending(touched, x, &dx);
            add_pending(touched, kern, &dk);
        }
        Op::DenseConv { stride, padding } => {
            let x = &step.inputs[0];
            let wgt = &step.inputs[1];
            let (sx, sw, so) = (x.shape(), wgt.shape(), step.output.shape());
            let mut dx = vec![0.0; x.numel()];
            let mut dw = vec![0.0; wgt.numel()];
            kernels::dense_conv_backward(
                dy,
                &x.borrow_data(),
                &wgt.borrow_data(),
                sx[0],
                sx[1],
                sx[2],
                sw[0],
                sw[2],
                sw[3],
                *stride,
                *padding,
                so[1],
                so[2],
                &mut dx,
                &mut dw,
            );
            add_pending(touched, x, &dx);
            add_pending(touched, wgt, &dw);
        }
        Op::BceWithLogits { targets } => {
            let logits = &step.inputs[0];
            let n = targets.len() as f64;
            let g = dy[0];
            let dl: Vec<f64> = logits
                .borrow_data()
                .iter()
                .zip(targets)
                .map(|(&l, &t)| g * (kernels::sigmoid(l) - t) / n)
                .collect();
            add_pending(touched, logits, &dl);
        }
        Op::RowDivShift { eps } => {
            let q = &step.inputs[0];
            let s = &step.inputs[1];
            let sq = q.shape();
            let (l, d) = (sq[0], sq[1]);
            let qd = q.borrow_data();
            let sd = s.borrow_data();
            let mut dq = vec![0.0; l * d];
            let mut ds = vec![0.0; l];
            for i in 0..l {
                let denom = sd[i] + eps;
                for c in 0..d {
                    let g = dy[i * d + c];
                    dq[i * d + c] = g / denom;
                    ds[i] -= g * qd[i * d + c] / (denom * denom);
                }
            }
            drop((qd, sd));
            add_pending(touched, q, &dq);
            add_pending(touched, s, &ds);
        }
    }
}

/// True when two tensors share storage (used by purity checks).
pub fn same_tensor(a: &Tensor, b: &Tensor) -> bool {
    a.same_storage(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "element {i}: got {a}, expected {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[0.0, 1.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), vec![2, 1]);
        assert_eq!(out.to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut tape = Tape::new();
        let x = t(&[2], &[0.0, 0.0]);
        assert_close(&tape.softmax(&x, 0).unwrap().to_vec(), &[0.5, 0.5], 1e-12);
        let y = t(&[2], &[3.0f64.ln(), 0.0]);
        assert_close(&tape.softmax(&y, 0).unwrap().to_vec(), &[0.75, 0.25], 1e-12);
    }

    #[test]
    fn softmax_saturates_without_overflow() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1000.0, 0.0]);
        let out = tape.softmax(&x, 0).unwrap().to_vec();
        assert!(out.iter().all(|v| v.is_finite()));
        assert_close(&out, &[1.0, 0.0], 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = t(&[2], &[f64::NAN, 0.0]);
        assert!(matches!(tape.softmax(&x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn reduce_sum_all_axes() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.reduce_sum(&x, &[0, 1]).unwrap();
        assert_eq!(s.shape(), Vec::<usize>::new());
        assert_eq!(s.scalar_value(), 10.0);
    }

    #[test]
    fn reduce_sum_empty_extent_is_zero() {
        let mut tape = Tape::new();
        let x = t(&[3, 0], &[]);
        let s = tape.reduce_sum(&x, &[1]).unwrap();
        assert_eq!(s.shape(), vec![3]);
        assert_eq!(s.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_sum_invalid_axis() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            tape.reduce_sum(&x, &[2]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bce_analytic_and_saturated() {
        let mut tape = Tape::new();
        let l0 = t(&[1], &[0.0]);
        let t1 = t(&[1], &[1.0]);
        let loss = tape.bce_with_logits(&l0, &t1).unwrap();
        assert!((loss.scalar_value() - 2.0f64.ln()).abs() < 1e-12);

        let l50 = t(&[1], &[50.0]);
        let loss = tape.bce_with_logits(&l50, &t1).unwrap();
        assert!(loss.scalar_value() >= 0.0 && loss.scalar_value() < 1e-20);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let l = t(&[1], &[0.0]);
        let bad = t(&[1], &[0.5]);
        assert!(matches!(
            tape.bce_with_logits(&l, &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = p(&[3], &[1.0, -2.0, 0.5]);
        let loss = tape.reduce_sum(&w, &[0]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad_vec().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_norm_is_w() {
        let mut tape = Tape::new();
        let w = p(&[3], &[1.0, -2.0, 0.5]);
        let sq = tape.mul(&w, &w).unwrap();
        let sum = tape.reduce_sum(&sq, &[0]).unwrap();
        let loss = tape.scale(&sum, 0.5).unwrap();
        tape.backward(&loss).unwrap();
        assert_close(&w.grad_vec().unwrap(), &[1.0, -2.0, 0.5], 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = p(&[2], &[1.0, 2.0]);
        let y = tape.scale(&w, 2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let w = p(&[2], &[1.0, 2.0]);
        let loss = tape.reduce_sum(&w, &[0]).unwrap();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad_vec().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn depthwise_separable_identity_kernel() {
        let mut tape = Tape::new();
        // Centered delta depthwise kernel + identity pointwise = identity map.
        let x = t(&[2, 3, 3], &(0..18).map(|v| v as f64 * 0.1).collect::<Vec<_>>());
        let mut delta = vec![0.0; 2 * 9];
        delta[4] = 1.0;
        delta[9 + 4] = 1.0;
        let dw = t(&[2, 3, 3], &delta);
        let pw = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = tape
            .depthwise_separable_conv2d(&x, &dw, &pw, 1, 1)
            .unwrap();
        assert_close(&y.to_vec(), &x.to_vec(), 1e-15);
    }

    #[test]
    fn depthwise_separable_zero_kernels() {
        let mut tape = Tape::new();
        let x = t(&[1, 4, 4], &[0.3; 16]);
        let dw = t(&[1, 3, 3], &[0.0; 9]);
        let pw = t(&[2, 1], &[0.0; 2]);
        let y = tape
            .depthwise_separable_conv2d(&x, &dw, &pw, 1, 1)
            .unwrap();
        assert_eq!(y.shape(), vec![2, 4, 4]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_separable_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = t(&[1, 4, 4], &[0.0; 16]);
        let dw = t(&[1, 2, 2], &[0.0; 4]);
        let pw = t(&[1, 1], &[0.0]);
        assert!(matches!(
            tape.depthwise_separable_conv2d(&x, &dw, &pw, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_rejects_non_positive_output() {
        let mut tape = Tape::new();
        let x = t(&[1, 2, 2], &[0.0; 4]);
        let k = t(&[1, 5, 5], &[0.0; 25]);
        assert!(matches!(
            tape.depthwise_conv2d(&x, &k, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn layer_norm_ch_normalizes_channels() {
        let mut tape = Tape::new();
        let x = t(&[2, 1, 2], &[1.0, 3.0, 5.0, 7.0]);
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        let y = tape.layer_norm_ch(&x, &gamma, &beta).unwrap().to_vec();
        // Per pixel, the two channel values are symmetric around the mean.
        assert!((y[0] + y[2]).abs() < 1e-9);
        assert!((y[1] + y[3]).abs() < 1e-9);
        assert!(y[2] > 0.0 && y[3] > 0.0);
    }

    #[test]
    fn row_div_shift_divides_rows() {
        let mut tape = Tape::new();
        let q = t(&[2, 2], &[2.0, 4.0, 9.0, 3.0]);
        let s = t(&[2], &[1.0, 2.0]);
        let y = tape.row_div_shift(&q, &s, 0.0).unwrap();
        assert_close(&y.to_vec(), &[2.0, 4.0, 4.5, 1.5], 1e-12);
    }

    #[test]
    fn reshape_transpose_round_trip() {
        let mut tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xt = tape.transpose2(&x).unwrap();
        assert_eq!(xt.shape(), vec![3, 2]);
        assert_eq!(xt.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.transpose2(&xt).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        let flat = tape.reshape(&x, vec![6]).unwrap();
        assert_eq!(flat.shape(), vec![6]);
        assert_eq!(flat.to_vec(), x.to_vec());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let w = p(&[2], &[1.0, 2.0]);
        let _ = tape.scale(&w, 3.0).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = p(&[3, 3], &[0.1, -0.2, 0.3, 0.7, 0.5, -0.6, 0.7, 0.8, 0.9]);
            let b = t(&[3, 3], &[0.31, 0.1, -0.77, 0.2, 0.11, 0.3, -0.4, 0.01, 0.5]);
            let c = tape.matmul(&a, &b).unwrap();
            let s = tape.softmax(&c, 1).unwrap();
            s.to_vec()
        };
        let x = run();
        let y = run();
        let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}
