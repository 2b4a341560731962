//! Reverse-mode automatic differentiation on a replayable op record.
//!
//! A [`Tape`] owns every tensor produced during one forward pass, in
//! topological order. [`Tape::backward`] walks the record once in reverse and
//! accumulates gradients into each node that needs them. A record can be
//! differentiated exactly once; a second `backward` is a contract error so
//! gradients are never double counted.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Padding mode for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial extent is `ceil(in/stride)`; symmetric zero padding with
    /// the extra pixel on the bottom/right when the total is odd.
    Same,
    /// No padding; kernel must fit inside the input.
    Valid,
}

/// Resolved convolution geometry, shared by forward and backward.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_h: usize,
    in_w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    DivRow { a: Var, div: Var },
    Affine { x: Var, mul: T },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Ln { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Gather { x: Var, idx: Vec<usize> },
    SumAll { x: Var },
    MeanAll { x: Var },
    MeanAxis { x: Var, axis: usize },
    Upsample2x { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf tensor. Gradient is tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that participates in optimization.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from gradient tracking (inputs, labels, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by [`Tape::backward`], `None` before it runs or for
    /// nodes excluded from tracking.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient has value shape")
        })
    }

    // ---- elementwise and linear-algebra ops ------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul expects [m x k] by [k x n], got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            needs,
            Op::MatMul { a, b },
        ))
    }

    fn binary_shape(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Dimension(format!(
                "{} requires equal shapes or a scalar operand, got {:?} and {:?}",
                name, sa, sb
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "add")?;
        let out = zip_broadcast(self.value(a), self.value(b), &shape, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -T::one(), T::zero())?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "mul")?;
        let out = zip_broadcast(self.value(a), self.value(b), &shape, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "div")?;
        let out = zip_broadcast(self.value(a), self.value(b), &shape, |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Div { a, b }))
    }

    /// Adds a vector over the last axis (bias for linear layers).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        let last = *sa.last().ok_or_else(|| {
            Error::Dimension("add_row requires a non-scalar left operand".into())
        })?;
        if sb != [last] {
            return Err(Error::Dimension(format!(
                "add_row bias shape {:?} does not match last extent of {:?}",
                sb, sa
            )));
        }
        let bv = self.value(bias).values().to_vec();
        let data: Vec<T> = self
            .value(a)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % last])
            .collect();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(sa, data)?, needs, Op::AddRow { a, bias }))
    }

    /// Divides each row of a 2-D tensor elementwise by a vector of column
    /// divisors (used for L1 normalization over the token axis).
    pub fn div_row(&mut self, a: Var, div: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sd = self.shape(div).to_vec();
        if sa.len() != 2 || sd != [sa[1]] {
            return Err(Error::Dimension(format!(
                "div_row expects [n x c] over [c], got {:?} and {:?}",
                sa, sd
            )));
        }
        let c = sa[1];
        let dv = self.value(div).values().to_vec();
        let data: Vec<T> = self
            .value(a)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x / dv[i % c])
            .collect();
        let needs = self.needs(a) || self.needs(div);
        Ok(self.push(Tensor::new(sa, data)?, needs, Op::DivRow { a, div }))
    }

    /// `mul * x + add` with compile-time constants.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Result<Var> {
        let out = self.value(x).map(|v| mul * v + add);
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Affine { x, mul }))
    }

    pub fn scale(&mut self, x: Var, mul: T) -> Result<Var> {
        self.affine(x, mul, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Relu { x }))
    }

    /// Exact GELU, `0.5 * x * (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Gelu { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_scalar);
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Sigmoid { x }))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.ln());
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Ln { x }))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo >= hi {
            return Err(Error::Contract(format!("clamp bounds inverted: {} >= {}", lo, hi)));
        }
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Clamp { x, lo, hi }))
    }

    /// Max-subtracted softmax along `axis`; slices sum to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let data = softmax_raw(self.value(x).values(), &shape, axis);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, needs, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis followed by a learned affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::Dimension("layer_norm requires at least one axis".into())
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must be [{}], got {:?} and {:?}",
                d,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x).values();
        let gv = self.value(gamma).values();
        let bv = self.value(beta).values();
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::from_f64(d as f64);
        for row in 0..xv.len() / d {
            let s = row * d;
            let slice = &xv[s..s + d];
            let mean = slice.iter().fold(T::zero(), |acc, &v| acc + v) / dn;
            let var = slice
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                / dn;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                out[s + j] = (slice[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            needs,
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    // ---- convolution ------------------------------------------------------

    /// Cross-correlation of an `H x W x Cin` map with a `kh x kw x Cin x Cout`
    /// kernel plus per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = self.conv_geometry(x, w, b, stride, padding)?;
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let col = im2col(xv, &geom);
        let rows = geom.out_h * geom.out_w;
        let kcin = geom.kh * geom.kw * geom.cin;
        let mut out = matmul_raw(&col, wv, rows, kcin, geom.cout);
        for r in 0..rows {
            for oc in 0..geom.cout {
                out[r * geom.cout + oc] += bv[oc];
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![geom.out_h, geom.out_w, geom.cout], out)?,
            needs,
            Op::Conv2d { x, w, b, geom },
        ))
    }

    fn conv_geometry(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects [h x w x cin] input and [kh x kw x cin x cout] kernel, got {:?} and {:?}",
                sx, sw
            )));
        }
        let (in_h, in_w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, wcin, cout) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {} input channels, input has {} (kernel {:?}, input {:?})",
                wcin, cin, sw, sx
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d bias must be [{}], got {:?}",
                cout,
                self.shape(b)
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > in_h || kw > in_w {
                    return Err(Error::Dimension(format!(
                        "conv2d kernel {}x{} larger than input {}x{} with valid padding",
                        kh, kw, in_h, in_w
                    )));
                }
                ((in_h - kh) / stride + 1, (in_w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            in_h,
            in_w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Transposed convolution with output extent `h*stride`; the forward map
    /// is the adjoint of [`Tape::conv2d`] with same padding and this stride.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv_transpose2d expects [h x w x cin] input and [kh x kw x cin x cout] kernel, got {:?} and {:?}",
                sx, sw
            )));
        }
        let (h, w_in, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, wcin, cout) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv_transpose2d kernel expects {} input channels, input has {}",
                wcin, cin
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::Dimension(format!(
                "conv_transpose2d bias must be [{}], got {:?}",
                cout,
                self.shape(b)
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv_transpose2d stride must be >= 1".into()));
        }
        if kh < stride || kw < stride {
            return Err(Error::Dimension(format!(
                "conv_transpose2d kernel {}x{} must cover stride {}",
                kh, kw, stride
            )));
        }
        // Geometry of the conv this op is the adjoint of.
        let geom = ConvGeom {
            in_h: h * stride,
            in_w: w_in * stride,
            cin: cout,
            kh,
            kw,
            cout: cin,
            stride,
            pad_top: (kh - stride) / 2,
            pad_left: (kw - stride) / 2,
            out_h: h,
            out_w: w_in,
        };
        let xv = self.value(x).values();
        // The adjoint scatter expects the matching conv's kernel layout
        // [kh x kw x cout x cin]; the stored kernel is [kh x kw x cin x cout].
        let wt = swap_kernel_channels(self.value(w).values(), kh, kw, cin, cout);
        let bv = self.value(b).values();
        let mut out = vec![T::zero(); geom.in_h * geom.in_w * cout];
        for r in 0..geom.in_h {
            for c in 0..geom.in_w {
                for oc in 0..cout {
                    out[(r * geom.in_w + c) * cout + oc] = bv[oc];
                }
            }
        }
        scatter_conv_adjoint(&mut out, xv, &wt, &geom);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![geom.in_h, geom.in_w, cout], out)?,
            needs,
            Op::ConvT2d { x, w, b, geom },
        ))
    }

    // ---- data movement ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Reshape { x }))
    }

    /// Reorders axes; `perm[d]` names the input axis that becomes output axis `d`.
    pub fn permute(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "permute {:?} does not match rank of {:?}",
                perm, shape
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Dimension(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let (data, out_shape) = permute_raw(self.value(x).values(), &shape, &perm);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, data)?, needs, Op::Permute { x, perm }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose expects a matrix, got {:?}",
                self.shape(x)
            )));
        }
        self.permute(x, vec![1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {} out of range for {:?}",
                axis, first
            )));
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat parts {:?} and {:?} differ off axis {}",
                    first, s, axis
                )));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let ext = self.shape(p)[axis];
            let pv = self.value(p).values();
            for o in 0..outer {
                let src = o * ext * inner;
                let dst = (o * total + offset) * inner;
                data[dst..dst + ext * inner].copy_from_slice(&pv[src..src + ext * inner]);
            }
            offset += ext;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Dimension(format!(
                "narrow [{}, {}) on axis {} invalid for {:?}",
                start,
                start + len,
                axis,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let xv = self.value(x).values();
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * ext + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            needs,
            Op::Narrow { x, axis, start, len },
        ))
    }

    /// Splits along an axis into equal parts.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || parts == 0 || shape[axis] % parts != 0 {
            return Err(Error::Dimension(format!(
                "cannot split {:?} on axis {} into {} parts",
                shape, axis, parts
            )));
        }
        let len = shape[axis] / parts;
        (0..parts)
            .map(|i| self.narrow(x, axis, i * len, len))
            .collect()
    }

    /// Flat permutation gather; `idx` must index valid elements.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let numel = self.value(x).numel();
        if idx.iter().any(|&i| i >= numel) {
            return Err(Error::Dimension(format!(
                "gather index out of range for {} elements",
                numel
            )));
        }
        let xv = self.value(x).values();
        let data: Vec<T> = idx.iter().map(|&i| xv[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![idx.len()], data)?,
            needs,
            Op::Gather { x, idx },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().fold(T::zero(), |a, &v| a + v);
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), needs, Op::SumAll { x }))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).numel() as f64);
        let s = self.value(x).values().iter().fold(T::zero(), |a, &v| a + v) / n;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), needs, Op::MeanAll { x }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "mean axis {} out of range for {:?}",
                axis, shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let inv = T::from_f64(1.0 / ext as f64);
        let xv = self.value(x).values();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                for i in 0..inner {
                    data[o * inner + i] += xv[(o * ext + e) * inner + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            needs,
            Op::MeanAxis { x, axis },
        ))
    }

    /// Doubles both spatial extents of an `H x W x C` map by bilinear
    /// interpolation (constant maps stay constant).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "upsample2x expects [h x w x c], got {:?}",
                shape
            )));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x).values();
        let mut data = vec![T::zero(); 4 * h * w * c];
        for oi in 0..2 * h {
            let (i0, i1, fi) = bilinear_taps(oi, h);
            for oj in 0..2 * w {
                let (j0, j1, fj) = bilinear_taps(oj, w);
                let dst = (oi * 2 * w + oj) * c;
                for ch in 0..c {
                    let v00 = xv[(i0 * w + j0) * c + ch];
                    let v01 = xv[(i0 * w + j1) * c + ch];
                    let v10 = xv[(i1 * w + j0) * c + ch];
                    let v11 = xv[(i1 * w + j1) * c + ch];
                    let top = v00 + (v01 - v00) * fj;
                    let bot = v10 + (v11 - v10) * fj;
                    data[dst + ch] = top + (bot - top) * fi;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![2 * h, 2 * w, c], data)?,
            needs,
            Op::Upsample2x { x },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients for every tracked node reachable from `loss`.
    /// The record is consumed: calling backward twice is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this record; rebuild the graph to differentiate again"
                    .into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &grad, &op);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, update: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let grad = self.nodes[v.0]
            .grad
            .get_or_insert_with(|| vec![T::zero(); numel]);
        update(grad);
    }

    fn add_to(&mut self, v: Var, delta: &[T]) {
        self.accumulate(v, |g| {
            for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                *gi += d;
            }
        });
    }

    fn propagate(&mut self, out: usize, grad: &[T], op: &Op<T>) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = g . B^T
                    let bv = self.value(*b).values();
                    let mut bt = vec![T::zero(); k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    let da = matmul_raw(grad, &bt, m, n, k);
                    self.add_to(*a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let av = self.value(*a).values();
                    let mut at = vec![T::zero(); m * k];
                    for r in 0..m {
                        for p in 0..k {
                            at[p * m + r] = av[r * k + p];
                        }
                    }
                    let db = matmul_raw(&at, grad, k, m, n);
                    self.add_to(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate_reduced(*a, grad);
                self.accumulate_reduced(*b, grad);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let other = self.value(b).clone();
                    self.accumulate_scaled(a, grad, &other, |y| y);
                }
                if self.needs(b) {
                    let other = self.value(a).clone();
                    self.accumulate_scaled(b, grad, &other, |y| y);
                }
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let other = self.value(b).clone();
                    self.accumulate_scaled(a, grad, &other, |y| y.recip());
                }
                if self.needs(b) {
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    // d(a/b)/db = -a / b^2, with a broadcast against b's slot
                    let out_numel = grad.len();
                    let an = av.numel();
                    let bn = bv.numel();
                    let mut delta = vec![T::zero(); bn];
                    for i in 0..out_numel {
                        let x = av.values()[if an == 1 { 0 } else { i }];
                        let y = bv.values()[if bn == 1 { 0 } else { i }];
                        let d = -grad[i] * x / (y * y);
                        delta[if bn == 1 { 0 } else { i }] += d;
                    }
                    self.add_to(b, &delta);
                }
            }
            Op::AddRow { a, bias } => {
                if self.needs(*a) {
                    self.add_to(*a, grad);
                }
                if self.needs(*bias) {
                    let last = self.value(*bias).numel();
                    let mut delta = vec![T::zero(); last];
                    for (i, &g) in grad.iter().enumerate() {
                        delta[i % last] += g;
                    }
                    self.add_to(*bias, &delta);
                }
            }
            Op::DivRow { a, div } => {
                let c = self.value(*div).numel();
                let dv = self.value(*div).values().to_vec();
                if self.needs(*a) {
                    let delta: Vec<T> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g / dv[i % c])
                        .collect();
                    self.add_to(*a, &delta);
                }
                if self.needs(*div) {
                    let av = self.value(*a).values().to_vec();
                    let mut delta = vec![T::zero(); c];
                    for (i, &g) in grad.iter().enumerate() {
                        let j = i % c;
                        delta[j] += -g * av[i] / (dv[j] * dv[j]);
                    }
                    self.add_to(*div, &delta);
                }
            }
            Op::Affine { x, mul, .. } => {
                if self.needs(*x) {
                    let m = *mul;
                    let delta: Vec<T> = grad.iter().map(|&g| g * m).collect();
                    self.add_to(*x, &delta);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).values().to_vec();
                    let delta: Vec<T> = grad
                        .iter()
                        .zip(xv.iter())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    self.add_to(*x, &delta);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).values().to_vec();
                    let half = T::from_f64(0.5);
                    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let delta: Vec<T> = grad
                        .iter()
                        .zip(xv.iter())
                        .map(|(&g, &v)| {
                            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                            let pdf = inv_sqrt2pi * (-half * v * v).exp();
                            g * (cdf + v * pdf)
                        })
                        .collect();
                    self.add_to(*x, &delta);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let ov = self.nodes[out].value.values().to_vec();
                    let delta: Vec<T> = grad
                        .iter()
                        .zip(ov.iter())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect();
                    self.add_to(*x, &delta);
                }
            }
            Op::Ln { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).values().to_vec();
                    let delta: Vec<T> = grad
                        .iter()
                        .zip(xv.iter())
                        .map(|(&g, &v)| g / v)
                        .collect();
                    self.add_to(*x, &delta);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let xv = self.value(*x).values().to_vec();
                    let delta: Vec<T> = grad
                        .iter()
                        .zip(xv.iter())
                        .map(|(&g, &v)| if v >= lo && v <= hi { g } else { T::zero() })
                        .collect();
                    self.add_to(*x, &delta);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let shape = self.nodes[out].value.shape().to_vec();
                    let ov = self.nodes[out].value.values().to_vec();
                    let ext = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let mut delta = vec![T::zero(); ov.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = T::zero();
                            for e in 0..ext {
                                let f = (o * ext + e) * inner + i;
                                dot += grad[f] * ov[f];
                            }
                            for e in 0..ext {
                                let f = (o * ext + e) * inner + i;
                                delta[f] = ov[f] * (grad[f] - dot);
                            }
                        }
                    }
                    self.add_to(*x, &delta);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.value(*gamma).numel();
                let xv = self.value(*x).values().to_vec();
                let gv = self.value(*gamma).values().to_vec();
                let dn = T::from_f64(d as f64);
                let rows = xv.len() / d;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for row in 0..rows {
                    let s = row * d;
                    let slice = &xv[s..s + d];
                    let gs = &grad[s..s + d];
                    let mean = slice.iter().fold(T::zero(), |a, &v| a + v) / dn;
                    let var = slice
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                        / dn;
                    let inv_std = (var + *eps).sqrt().recip();
                    let xhat: Vec<T> = slice.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![T::zero(); d];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                        dxhat[j] = gs[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    for j in 0..d {
                        dx[s + j] = inv_std / dn * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    self.add_to(*x, &dx);
                }
                if self.needs(*gamma) {
                    self.add_to(*gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.add_to(*beta, &dbeta);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let rows = geom.out_h * geom.out_w;
                let kcin = geom.kh * geom.kw * geom.cin;
                if self.needs(*b) {
                    let mut db = vec![T::zero(); geom.cout];
                    for r in 0..rows {
                        for oc in 0..geom.cout {
                            db[oc] += grad[r * geom.cout + oc];
                        }
                    }
                    self.add_to(*b, &db);
                }
                if self.needs(*w) {
                    let xv = self.value(*x).values();
                    let col = im2col(xv, geom);
                    let mut colt = vec![T::zero(); kcin * rows];
                    for r in 0..rows {
                        for c in 0..kcin {
                            colt[c * rows + r] = col[r * kcin + c];
                        }
                    }
                    let dw = matmul_raw(&colt, grad, kcin, rows, geom.cout);
                    self.add_to(*w, &dw);
                }
                if self.needs(*x) {
                    let wv = self.value(*w).values().to_vec();
                    let mut dx = vec![T::zero(); geom.in_h * geom.in_w * geom.cin];
                    scatter_conv_adjoint(&mut dx, grad, &wv, geom);
                    self.add_to(*x, &dx);
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                // geom describes the conv this op is the adjoint of, so the
                // roles of input and output swap relative to Conv2d.
                if self.needs(*b) {
                    let cout = geom.cin;
                    let mut db = vec![T::zero(); cout];
                    for (i, &g) in grad.iter().enumerate() {
                        db[i % cout] += g;
                    }
                    self.add_to(*b, &db);
                }
                if self.needs(*x) {
                    // grad wrt x is the forward conv applied to the incoming
                    // gradient: dX = conv(grad) with the recorded geometry.
                    let wv = self.value(*w).values();
                    let col = im2col(grad, geom);
                    let rows = geom.out_h * geom.out_w;
                    let kcin = geom.kh * geom.kw * geom.cin;
                    // Weight layout is [kh x kw x x_cin x cout] where x_cin is
                    // geom.cout; reorder to [kh x kw x geom.cin x geom.cout].
                    let wt = swap_kernel_channels(wv, geom.kh, geom.kw, geom.cout, geom.cin);
                    let dx = matmul_raw(&col, &wt, rows, kcin, geom.cout);
                    self.add_to(*x, &dx);
                }
                if self.needs(*w) {
                    // dW[ki,kj,c,oc] = sum over positions of x * grad at the
                    // scattered location; reuse im2col on the gradient map.
                    let xv = self.value(*x).values();
                    let col = im2col(grad, geom); // rows x (kh*kw*cout)
                    let rows = geom.out_h * geom.out_w;
                    let kc = geom.kh * geom.kw * geom.cin;
                    let mut colt = vec![T::zero(); kc * rows];
                    for r in 0..rows {
                        for c in 0..kc {
                            colt[c * rows + r] = col[r * kc + c];
                        }
                    }
                    // [kh*kw*cout x rows] . [rows x cin] -> [kh*kw*cout x cin]
                    let dwt = matmul_raw(&colt, xv, kc, rows, geom.cout);
                    let dw = swap_kernel_channels(&dwt, geom.kh, geom.kw, geom.cin, geom.cout);
                    self.add_to(*w, &dw);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    self.add_to(*x, grad);
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let out_shape = self.nodes[out].value.shape().to_vec();
                    let mut inverse = vec![0usize; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inverse[p] = d;
                    }
                    let (delta, _) = permute_raw(grad, &out_shape, &inverse);
                    self.add_to(*x, &delta);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[out].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut delta = vec![T::zero(); outer * ext * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            delta[dst..dst + ext * inner]
                                .copy_from_slice(&grad[src..src + ext * inner]);
                        }
                        self.add_to(p, &delta);
                    }
                    offset += ext;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                if self.needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let ext = shape[*axis];
                    let mut delta = vec![T::zero(); self.value(*x).numel()];
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            delta[dst + i] += grad[src + i];
                        }
                    }
                    self.add_to(*x, &delta);
                }
            }
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let mut delta = vec![T::zero(); self.value(*x).numel()];
                    for (o, &i) in idx.iter().enumerate() {
                        delta[i] += grad[o];
                    }
                    self.add_to(*x, &delta);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let g = grad[0];
                    let delta = vec![g; self.value(*x).numel()];
                    self.add_to(*x, &delta);
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let g = grad[0] / T::from_f64(n as f64);
                    let delta = vec![g; n];
                    self.add_to(*x, &delta);
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let ext = shape[*axis];
                    let inv = T::from_f64(1.0 / ext as f64);
                    let mut delta = vec![T::zero(); self.value(*x).numel()];
                    for o in 0..outer {
                        for e in 0..ext {
                            for i in 0..inner {
                                delta[(o * ext + e) * inner + i] = grad[o * inner + i] * inv;
                            }
                        }
                    }
                    self.add_to(*x, &delta);
                }
            }
            Op::Upsample2x { x } => {
                if self.needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    let mut delta = vec![T::zero(); h * w * c];
                    for oi in 0..2 * h {
                        let (i0, i1, fi) = bilinear_taps::<T>(oi, h);
                        for oj in 0..2 * w {
                            let (j0, j1, fj) = bilinear_taps::<T>(oj, w);
                            let src = (oi * 2 * w + oj) * c;
                            for ch in 0..c {
                                let g = grad[src + ch];
                                let one = T::one();
                                delta[(i0 * w + j0) * c + ch] += g * (one - fi) * (one - fj);
                                delta[(i0 * w + j1) * c + ch] += g * (one - fi) * fj;
                                delta[(i1 * w + j0) * c + ch] += g * fi * (one - fj);
                                delta[(i1 * w + j1) * c + ch] += g * fi * fj;
                            }
                        }
                    }
                    self.add_to(*x, &delta);
                }
            }
        }
    }

    /// Gradient for Add operands: pass through, summed onto broadcast scalars.
    fn accumulate_reduced(&mut self, target: Var, grad: &[T]) {
        if !self.needs(target) {
            return;
        }
        let tn = self.value(target).numel();
        if tn == grad.len() {
            self.add_to(target, grad);
        } else {
            debug_assert_eq!(tn, 1);
            let s = grad.iter().fold(T::zero(), |a, &g| a + g);
            self.add_to(target, &[s]);
        }
    }

    /// Gradient for Mul/Div left-style operands: delta = g * f(other), reduced
    /// onto the target if it is a broadcast scalar.
    fn accumulate_scaled(&mut self, target: Var, grad: &[T], other: &Tensor<T>, f: impl Fn(T) -> T) {
        let tn = self.value(target).numel();
        let on = other.numel();
        let mut delta = vec![T::zero(); tn];
        for (i, &g) in grad.iter().enumerate() {
            let y = other.values()[if on == 1 { 0 } else { i }];
            delta[if tn == 1 { 0 } else { i }] += g * f(y);
        }
        self.add_to(target, &delta);
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Naive cache-friendly matmul used by every linear op.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let (an, bn) = (a.numel(), b.numel());
    (0..numel)
        .map(|i| {
            let x = a.values()[if an == 1 { 0 } else { i }];
            let y = b.values()[if bn == 1 { 0 } else { i }];
            f(x, y)
        })
        .collect()
}

fn softmax_raw<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let ext = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut max = T::neg_infinity();
            for e in 0..ext {
                max = max.max(x[(o * ext + e) * inner + i]);
            }
            let mut sum = T::zero();
            for e in 0..ext {
                let f = (o * ext + e) * inner + i;
                let v = (x[f] - max).exp();
                out[f] = v;
                sum += v;
            }
            for e in 0..ext {
                out[(o * ext + e) * inner + i] /= sum;
            }
        }
    }
    out
}

fn permute_raw<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mut out = vec![T::zero(); x.len()];
    let rank = shape.len();
    let mut coords = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += coords[d] * in_strides[perm[d]];
        }
        *slot = x[src];
    }
    (out, out_shape)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kcin = g.kh * g.kw * g.cin;
    let mut col = vec![T::zero(); g.out_h * g.out_w * kcin];
    for oi in 0..g.out_h {
        for oj in 0..g.out_w {
            let row = (oi * g.out_w + oj) * kcin;
            for ki in 0..g.kh {
                let si = (oi * g.stride + ki) as isize - g.pad_top as isize;
                if si < 0 || si as usize >= g.in_h {
                    continue;
                }
                for kj in 0..g.kw {
                    let sj = (oj * g.stride + kj) as isize - g.pad_left as isize;
                    if sj < 0 || sj as usize >= g.in_w {
                        continue;
                    }
                    let src = ((si as usize) * g.in_w + sj as usize) * g.cin;
                    let dst = row + (ki * g.kw + kj) * g.cin;
                    col[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    col
}

/// Scatters `src` (laid out as the conv output `out_h x out_w x cout`) through
/// the adjoint of the convolution described by `g`, adding into `dst` (laid
/// out as the conv input `in_h x in_w x cin`).
fn scatter_conv_adjoint<T: Scalar>(dst: &mut [T], src: &[T], w: &[T], g: &ConvGeom) {
    for oi in 0..g.out_h {
        for oj in 0..g.out_w {
            let srow = (oi * g.out_w + oj) * g.cout;
            for ki in 0..g.kh {
                let si = (oi * g.stride + ki) as isize - g.pad_top as isize;
                if si < 0 || si as usize >= g.in_h {
                    continue;
                }
                for kj in 0..g.kw {
                    let sj = (oj * g.stride + kj) as isize - g.pad_left as isize;
                    if sj < 0 || sj as usize >= g.in_w {
                        continue;
                    }
                    let drow = ((si as usize) * g.in_w + sj as usize) * g.cin;
                    let wrow = (ki * g.kw + kj) * g.cin * g.cout;
                    for c in 0..g.cin {
                        let mut acc = T::zero();
                        let wbase = wrow + c * g.cout;
                        for oc in 0..g.cout {
                            acc += src[srow + oc] * w[wbase + oc];
                        }
                        dst[drow + c] += acc;
                    }
                }
            }
        }
    }
}

/// Reorders a `[kh x kw x c1 x c2]` kernel to `[kh x kw x c2 x c1]`.
fn swap_kernel_channels<T: Scalar>(w: &[T], kh: usize, kw: usize, c1: usize, c2: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for k in 0..kh * kw {
        for a in 0..c1 {
            for b in 0..c2 {
                out[(k * c2 + b) * c1 + a] = w[(k * c1 + a) * c2 + b];
            }
        }
    }
    out
}

/// Source taps and interpolation weight for 2x bilinear upsampling with
/// half-pixel centers.
fn bilinear_taps<T: Scalar>(o: usize, extent: usize) -> (usize, usize, T) {
    let s = 0.5 * o as f64 - 0.25;
    let floor = s.floor();
    let frac = s - floor;
    let i0 = floor.max(0.0) as usize;
    let i0 = i0.min(extent - 1);
    let i1 = (floor as isize + 1).clamp(0, extent as isize - 1) as usize;
    (i0, i1, T::from_f64(frac))
}
