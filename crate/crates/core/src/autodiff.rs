//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward sweep. Nodes built only from constants are not
//! tracked, so their backward work is skipped. The graph is rebuilt for every
//! minibatch; nothing here is shared between threads.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Geometry of a 2-D convolution, described from the side of the larger
/// ("image") tensor: a conv maps image -> patches, a transposed conv maps
/// patches -> image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel} stride {stride} pad {pad} does not fit {height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn patch_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn patch_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Output columns `ox` whose input column `ox * stride + kj - pad` lies
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.width + p > kj {
            ((self.width + p - kj - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Unfold one `[C, H, W]` image into `[C*k*k, out_h*out_w]` columns.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let ncols = self.patch_cols();
        let s = self.stride;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let base = (c * self.height + iy as usize) * self.width + kj;
                        // first valid input column is lo * s + kj - pad
                        let src = &img[base + lo * s - self.pad..];
                        for (v, x) in line[lo..hi].iter_mut().zip(src.iter().step_by(s)) {
                            *v = *x;
                        }
                    }
                }
            }
        }
    }

    /// Fold columns back into an image, accumulating overlaps.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let k = self.kernel;
        let ncols = self.patch_cols();
        let s = self.stride;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize || lo == hi {
                            continue;
                        }
                        let base = (c * self.height + iy as usize) * self.width + kj;
                        let dst = &mut img[base + lo * s - self.pad..];
                        let line = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        for (x, v) in dst.iter_mut().step_by(s).zip(line) {
                            *x += *v;
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    /// Elementwise unary op with its local derivative.
    Map {
        x: Var,
        deriv: Vec<T>,
    },
    /// Elementwise binary op on equal shapes with both local derivatives.
    Map2 {
        a: Var,
        b: Var,
        da: Vec<T>,
        db: Vec<T>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        x: Var,
        c: T,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    SumLast {
        x: Var,
    },
    CumsumLast {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    SoftmaxLast {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Elementwise map with `f(x) -> (value, derivative)`.
    pub fn map(&mut self, x: Var, f: impl Fn(T) -> (T, T)) -> Var {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let mut out = Vec::with_capacity(src.len());
        let mut deriv = Vec::with_capacity(src.len());
        for &v in src.data() {
            let (y, d) = f(v);
            out.push(y);
            deriv.push(d);
        }
        let tracked = self.tracked(x);
        let value = Tensor::new(&shape, out).expect("map preserves shape");
        let deriv = if tracked { deriv } else { Vec::new() };
        self.push(value, Op::Map { x, deriv }, tracked)
    }

    /// Elementwise map of two equally shaped inputs with
    /// `f(a, b) -> (value, d/da, d/db)`.
    pub fn map2(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> (T, T, T)) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::ShapeMismatch(format!(
                "map2 on {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let shape = va.shape().to_vec();
        let n = va.len();
        let (mut out, mut da, mut db) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let (v, dx, dy) = f(x, y);
            out.push(v);
            da.push(dx);
            db.push(dy);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Map2 { a, b, da, db }, tracked))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (la, lb) = (va.len(), vb.len());
        let (big, small) = if la >= lb { (va, vb) } else { (vb, va) };
        if small.is_empty() || big.len() % small.len() != 0 || !trailing_match(big, small) {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let shape = big.shape().to_vec();
        let n = big.len();
        let (da, db) = (va.data(), vb.data());
        let out: Vec<T> = if la == lb {
            let f = match kind {
                BinaryKind::Add => |x: T, y: T| x + y,
                BinaryKind::Sub => |x: T, y: T| x - y,
                BinaryKind::Mul => |x: T, y: T| x * y,
                BinaryKind::Div => |x: T, y: T| x / y,
            };
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            match kind {
                BinaryKind::Add => (0..n).map(|i| da[i % la] + db[i % lb]).collect(),
                BinaryKind::Sub => (0..n).map(|i| da[i % la] - db[i % lb]).collect(),
                BinaryKind::Mul => (0..n).map(|i| da[i % la] * db[i % lb]).collect(),
                BinaryKind::Div => (0..n).map(|i| da[i % la] / db[i % lb]).collect(),
            }
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Binary { a, b, kind },
            tracked,
        ))
    }

    /// Broadcasting add; the smaller operand must match the trailing dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| v * c).collect())
            .expect("scale preserves shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Scale { x, c }, tracked)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| (v + c, T::one()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, |v| (v.ln(), v.recip()))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| (v * v, v + v))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            if v > T::zero() {
                (v, T::one())
            } else {
                (T::zero(), T::zero())
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let s = sigmoid(v);
            (s, s * (T::one() - s))
        })
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, |v| (softplus(v), sigmoid(v)))
    }

    /// `ln(1 - e^x)` for `x < 0`.
    pub fn log1mexp(&mut self, x: Var) -> Var {
        self.map(x, |v| (log1mexp(v), -(-v).exp_m1().recip()))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.map(x, |v| {
            if v < lo {
                (lo, T::zero())
            } else if v > hi {
                (hi, T::zero())
            } else {
                (v, T::one())
            }
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if va.shape().len() != 2 || vb.shape().len() != 2 || k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            va.data(),
            k as isize,
            1,
            vb.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Sum over the last dimension: `[.., c] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let out: Vec<T> = src
            .data()
            .chunks(c.max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        let mut shape = src.shape().to_vec();
        shape.pop();
        let tracked = self.tracked(x);
        self.push(
            Tensor::new(&shape, out).expect("row sums"),
            Op::SumLast { x },
            tracked,
        )
    }

    /// Running sum along the last dimension.
    pub fn cumsum_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols().max(1);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            for j in 1..row.len() {
                let prev = row[j - 1];
                row[j] += prev;
            }
        }
        let value = Tensor::new(src.shape(), out).expect("cumsum preserves shape");
        let tracked = self.tracked(x);
        self.push(value, Op::CumsumLast { x }, tracked)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols().max(1);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor::new(src.shape(), out).expect("softmax preserves shape");
        let tracked = self.tracked(x);
        self.push(value, Op::SoftmaxLast { x }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    /// Concatenate two `[r, ·]` tensors along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, cb) = (va.cols(), vb.cols());
        if va.rows() != vb.rows() || va.shape().len() != vb.shape().len() {
            return Err(Error::ShapeMismatch(format!(
                "concat {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let rows = va.rows();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = ca + cb;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatLast { a, b }, tracked))
    }

    /// 2-D convolution. `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || vb.len() != ws[0] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input {xs:?} weight {ws:?} bias {:?}",
                vb.shape()
            )));
        }
        let (n, o) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)?;
        let (prow, pcol) = (geom.patch_rows(), geom.patch_cols());
        let mut cols = vec![T::zero(); prow * pcol];
        let mut out = vec![T::zero(); n * o * pcol];
        for (img, dst) in vx
            .data()
            .chunks(geom.image_len())
            .zip(out.chunks_mut(o * pcol))
        {
            geom.im2col(img, &mut cols);
            for (ch, row) in dst.chunks_mut(pcol).enumerate() {
                row.iter_mut().for_each(|v| *v = vb.data()[ch]);
            }
            T::gemm(
                o,
                prow,
                pcol,
                T::one(),
                vw.data(),
                prow as isize,
                1,
                &cols,
                pcol as isize,
                1,
                T::one(),
                dst,
                pcol as isize,
                1,
            );
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::new(&[n, o, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, tracked))
    }

    /// Transposed 2-D convolution. `x: [n, c_in, h, w]`, `w: [c_in, c_out, k, k]`,
    /// `b: [c_out]`; output side is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] || vb.len() != ws[1] {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d input {xs:?} weight {ws:?} bias {:?}",
                vb.shape()
            )));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[1], ws[2]);
        let big_h = (h - 1) * stride + k;
        let big_w = (wd - 1) * stride + k;
        if big_h < 2 * pad || big_w < 2 * pad {
            return Err(Error::ShapeMismatch(
                "transposed conv padding too large".into(),
            ));
        }
        let geom = ConvGeom::new(c_out, big_h - 2 * pad, big_w - 2 * pad, k, stride, pad)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let (prow, pcol) = (geom.patch_rows(), geom.patch_cols());
        let mut cols = vec![T::zero(); prow * pcol];
        let img_len = geom.image_len();
        let mut out = vec![T::zero(); n * img_len];
        for (src, dst) in vx.data().chunks(c_in * pcol).zip(out.chunks_mut(img_len)) {
            // cols = W^T x, with W viewed as [c_in, c_out*k*k]
            T::gemm(
                prow,
                c_in,
                pcol,
                T::one(),
                vw.data(),
                1,
                prow as isize,
                src,
                pcol as isize,
                1,
                T::zero(),
                &mut cols,
                pcol as isize,
                1,
            );
            let plane = geom.height * geom.width;
            for (ch, p) in dst.chunks_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v = vb.data()[ch]);
            }
            geom.col2im(&cols, dst);
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::new(&[n, c_out, geom.height, geom.width], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, tracked))
    }

    /// Per-row softmax cross-entropy: `[n, c]` logits and `n` labels -> `[n]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (n, c) = (v.rows(), v.cols());
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for logits {:?}",
                labels.len(),
                v.shape()
            )));
        }
        let mut probs = vec![T::zero(); n * c];
        let mut out = Vec::with_capacity(n);
        for (r, &label) in labels.iter().enumerate() {
            let row = v.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p = *p / z;
            }
            out.push(m + z.ln() - row[label]);
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::new(&[n], out)?,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_value = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.tracked(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Map { x, deriv } => self.accumulate(grads, *x, |gx| {
                for ((a, &d), &gi) in gx.iter_mut().zip(deriv).zip(gd) {
                    *a += gi * d;
                }
            }),
            Op::Map2 { a, b, da, db } => {
                self.accumulate(grads, *a, |ga| {
                    for ((acc, &d), &gi) in ga.iter_mut().zip(da).zip(gd) {
                        *acc += gi * d;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((acc, &d), &gi) in gb.iter_mut().zip(db).zip(gd) {
                        *acc += gi * d;
                    }
                });
            }
            Op::Binary { a, b, kind } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (va.len(), vb.len());
                let n = gd.len();
                // Output element i reads a[i % la] and b[i % lb]; one of the
                // two lengths equals n, so iterate in tiles of the smaller one.
                let tiled = |f: &mut dyn FnMut(usize, usize, usize)| {
                    let l = la.min(lb);
                    for base in (0..n).step_by(l) {
                        for j in 0..l {
                            let i = base + j;
                            let (ia, ib) = if la == n { (i, j) } else { (j, i) };
                            f(i, ia, ib);
                        }
                    }
                };
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        let sign = if *kind == BinaryKind::Sub {
                            -T::one()
                        } else {
                            T::one()
                        };
                        self.accumulate(grads, *a, |ga| tiled(&mut |i, ia, _| ga[ia] += gd[i]));
                        self.accumulate(grads, *b, |gb| {
                            tiled(&mut |i, _, ib| gb[ib] += sign * gd[i])
                        });
                    }
                    BinaryKind::Mul => {
                        self.accumulate(grads, *a, |ga| {
                            tiled(&mut |i, ia, ib| ga[ia] += gd[i] * vb[ib])
                        });
                        self.accumulate(grads, *b, |gb| {
                            tiled(&mut |i, ia, ib| gb[ib] += gd[i] * va[ia])
                        });
                    }
                    BinaryKind::Div => {
                        self.accumulate(grads, *a, |ga| {
                            tiled(&mut |i, ia, ib| ga[ia] += gd[i] / vb[ib])
                        });
                        self.accumulate(grads, *b, |gb| {
                            tiled(&mut |i, ia, ib| {
                                let d = vb[ib];
                                gb[ib] -= gd[i] * va[ia] / (d * d);
                            })
                        });
                    }
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, |gx| {
                for (a, &gi) in gx.iter_mut().zip(gd) {
                    *a += gi * *c;
                }
            }),
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G B^T
                self.accumulate(grads, *a, |ga| {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    )
                });
                // dB = A^T G
                self.accumulate(grads, *b, |gb| {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k as isize,
                        gd,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    )
                });
            }
            Op::Sum { x } => {
                let gi = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += gi));
            }
            Op::SumLast { x } => {
                let c = self.value(*x).cols().max(1);
                self.accumulate(grads, *x, |gx| {
                    for (row, &gi) in gx.chunks_mut(c).zip(gd) {
                        row.iter_mut().for_each(|a| *a += gi);
                    }
                });
            }
            Op::CumsumLast { x } => {
                let c = out.cols().max(1);
                self.accumulate(grads, *x, |gx| {
                    for (row, grow) in gx.chunks_mut(c).zip(gd.chunks(c)) {
                        let mut run = T::zero();
                        for j in (0..row.len()).rev() {
                            run += grow[j];
                            row[j] += run;
                        }
                    }
                });
            }
            Op::Reshape { x } => self.accumulate(grads, *x, |gx| {
                for (a, &gi) in gx.iter_mut().zip(gd) {
                    *a += gi;
                }
            }),
            Op::ConcatLast { a, b } => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let width = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for (dst, src) in ga.chunks_mut(ca.max(1)).zip(gd.chunks(width)) {
                        for (d, &s) in dst.iter_mut().zip(&src[..ca]) {
                            *d += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (dst, src) in gb.chunks_mut(cb.max(1)).zip(gd.chunks(width)) {
                        for (d, &s) in dst.iter_mut().zip(&src[ca..]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, gd, grads),
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_transpose2d_backward(*x, *w, *b, geom, gd, grads)
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let c = self.value(*logits).cols();
                self.accumulate(grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        let gi = gd[r];
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * c + j] += gi * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SoftmaxLast { x } => {
                let y = out;
                let c = y.cols().max(1);
                self.accumulate(grads, *x, |gx| {
                    for ((gr, yr), dr) in gx.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c))
                    {
                        let dot = yr
                            .iter()
                            .zip(dr)
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let o = vw.shape()[0];
        let (prow, pcol) = (geom.patch_rows(), geom.patch_cols());
        let img_len = geom.image_len();
        let mut cols = vec![T::zero(); prow * pcol];

        self.accumulate(grads, b, |gb| {
            for gn in gd.chunks(o * pcol) {
                for (ch, row) in gn.chunks(pcol).enumerate() {
                    gb[ch] += row.iter().copied().sum();
                }
            }
        });
        if self.tracked(w) {
            let mut gw = vec![T::zero(); o * prow];
            for (img, gn) in vx.data().chunks(img_len).zip(gd.chunks(o * pcol)) {
                geom.im2col(img, &mut cols);
                // dW += G_n cols^T
                T::gemm(
                    o,
                    pcol,
                    prow,
                    T::one(),
                    gn,
                    pcol as isize,
                    1,
                    &cols,
                    1,
                    pcol as isize,
                    T::one(),
                    &mut gw,
                    prow as isize,
                    1,
                );
            }
            self.accumulate(grads, w, |acc| {
                for (a, &v) in acc.iter_mut().zip(&gw) {
                    *a += v;
                }
            });
        }
        if self.tracked(x) {
            let mut gx = vec![T::zero(); vx.len()];
            for (dst, gn) in gx.chunks_mut(img_len).zip(gd.chunks(o * pcol)) {
                // dcols = W^T G_n
                T::gemm(
                    prow,
                    o,
                    pcol,
                    T::one(),
                    vw.data(),
                    1,
                    prow as isize,
                    gn,
                    pcol as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    pcol as isize,
                    1,
                );
                geom.col2im(&cols, dst);
            }
            self.accumulate(grads, x, |acc| {
                for (a, &v) in acc.iter_mut().zip(&gx) {
                    *a += v;
                }
            });
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let c_in = vw.shape()[0];
        let (prow, pcol) = (geom.patch_rows(), geom.patch_cols());
        let img_len = geom.image_len();
        let plane = geom.height * geom.width;
        let mut cols = vec![T::zero(); prow * pcol];

        self.accumulate(grads, b, |gb| {
            for gn in gd.chunks(img_len) {
                for (ch, p) in gn.chunks(plane).enumerate() {
                    gb[ch] += p.iter().copied().sum();
                }
            }
        });
        let need_w = self.tracked(w);
        let need_x = self.tracked(x);
        if !need_w && !need_x {
            return;
        }
        let mut gw = vec![T::zero(); if need_w { c_in * prow } else { 0 }];
        let mut gx = vec![T::zero(); if need_x { vx.len() } else { 0 }];
        for (n, gn) in gd.chunks(img_len).enumerate() {
            geom.im2col(gn, &mut cols);
            let xn = &vx.data()[n * c_in * pcol..(n + 1) * c_in * pcol];
            if need_w {
                // dW += x_n cols^T : [c_in, pcol] x [pcol, prow]
                T::gemm(
                    c_in,
                    pcol,
                    prow,
                    T::one(),
                    xn,
                    pcol as isize,
                    1,
                    &cols,
                    1,
                    pcol as isize,
                    T::one(),
                    &mut gw,
                    prow as isize,
                    1,
                );
            }
            if need_x {
                // dx_n = W cols : [c_in, prow] x [prow, pcol]
                T::gemm(
                    c_in,
                    prow,
                    pcol,
                    T::one(),
                    vw.data(),
                    prow as isize,
                    1,
                    &cols,
                    pcol as isize,
                    1,
                    T::zero(),
                    &mut gx[n * c_in * pcol..(n + 1) * c_in * pcol],
                    pcol as isize,
                    1,
                );
            }
        }
        if need_w {
            self.accumulate(grads, w, |acc| {
                for (a, &v) in acc.iter_mut().zip(&gw) {
                    *a += v;
                }
            });
        }
        if need_x {
            self.accumulate(grads, x, |acc| {
                for (a, &v) in acc.iter_mut().zip(&gx) {
                    *a += v;
                }
            });
        }
    }
}

fn trailing_match<T: Real>(big: &Tensor<T>, small: &Tensor<T>) -> bool {
    let bs = big.shape();
    let ss: Vec<usize> = small
        .shape()
        .iter()
        .copied()
        .skip_while(|&d| d == 1)
        .collect();
    if small.len() == 1 {
        return true;
    }
    ss.len() <= bs.len() && bs[bs.len() - ss.len()..] == ss[..]
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - e^x)` for `x <= 0`.
#[inline]
pub fn log1mexp<T: Real>(x: T) -> T {
    if x > -T::lit(std::f64::consts::LN_2) {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}
