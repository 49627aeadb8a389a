//! Dense matrices and a reverse-mode tape.
//!
//! Every value on the tape is a row-major 2-D matrix. Image batches are
//! stored NHWC with one row per pixel (rows = B·H·W, cols = C) and token
//! batches with one row per token, so linear layers are plain matrix
//! products. The tape is generic over `f32` and `f64`; training uses `f32`,
//! numerical sanity checks re-run the same graph in `f64`.

use std::collections::HashMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

pub trait Real:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a · b + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: slice lengths cover the strided extents asserted above; all
        // callers pass contiguous row- or column-major views.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn matmul<T: Real>(a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool) -> Mat<T> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension");
    let mut c = Mat::zeros(m, n);
    gemm_acc(a, ta, b, tb, &mut c.data, T::zero());
    c
}

/// `c = op(a) · op(b) + beta * c`.
fn gemm_acc<T: Real>(a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool, c: &mut [T], beta: T) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of an NHWC batch stored one pixel per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spatial {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Spatial {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        qkv: Var,
        tokens: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Assemble {
        sources: Vec<Var>,
        index: Vec<(u32, u32)>,
    },
    Im2Col {
        x: Var,
        input: Spatial,
        stride: usize,
    },
    AvgPool2 {
        x: Var,
        input: Spatial,
    },
    MeanRows {
        x: Var,
        group: usize,
    },
    L2Norm {
        x: Var,
        norms: Vec<T>,
    },
    Loss {
        x: Var,
        grad: Mat<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// Source of named parameter values for [`Graph::param`].
pub trait ParamSource {
    /// Returns the (rows, cols) view and the data of parameter `name`.
    fn lookup(&self, name: &str) -> Option<(usize, usize, &[f32])>;
}

/// A single-use reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Loads parameter `name`, reusing the node if it was already loaded.
    pub fn param(&mut self, source: &impl ParamSource, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let (rows, cols, data) = source
            .lookup(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        let value = Mat::from_vec(rows, cols, data.iter().map(|&x| T::of(x as f64)).collect());
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                va.rows, va.cols, vb.rows, vb.cols
            )));
        }
        let out = matmul(va, false, vb, false);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a 1×n bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows * vb.cols != vx.cols {
            return Err(Error::shape(format!(
                "bias of {} entries for {} columns",
                vb.rows * vb.cols,
                vx.cols
            )));
        }
        let mut out = vx.clone();
        let cols = out.cols;
        for row in out.data.chunks_mut(cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows != vb.rows || va.cols != vb.cols {
            return Err(Error::shape(format!(
                "add {}x{} and {}x{}",
                va.rows, va.cols, vb.rows, vb.cols
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x))
    }

    /// Affine linear layer: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Normalizes every row to zero mean and unit variance, then applies
    /// the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows, vx.cols);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        if g.len() != cols || b.len() != cols {
            return Err(Error::shape("layer norm affine length".to_string()));
        }
        let eps = T::of(1e-5);
        let n = T::of(cols as f64);
        let mut out = Mat::zeros(rows, cols);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head self-attention over packed `[q | k | v]` rows. Rows are
    /// grouped into sequences of `tokens` consecutive rows.
    pub fn attention(&mut self, qkv: Var, tokens: usize, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        if v.cols % (3 * heads) != 0 || tokens == 0 || v.rows % tokens != 0 {
            return Err(Error::shape(format!(
                "attention over {}x{} with {tokens} tokens and {heads} heads",
                v.rows, v.cols
            )));
        }
        let dim = v.cols / 3;
        let hd = dim / heads;
        let seqs = v.rows / tokens;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut out = Mat::zeros(v.rows, dim);
        let mut probs = vec![T::zero(); seqs * heads * tokens * tokens];
        let stride = v.cols;
        for s in 0..seqs {
            let base = s * tokens;
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
                let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
                for i in 0..tokens {
                    let q = &v.data[(base + i) * stride + qo..][..hd];
                    let prow = &mut p[i * tokens..(i + 1) * tokens];
                    let mut mx = T::neg_infinity();
                    for j in 0..tokens {
                        let k = &v.data[(base + j) * stride + ko..][..hd];
                        let d = dot(q, k) * scale;
                        prow[j] = d;
                        mx = mx.max(d);
                    }
                    let mut z = T::zero();
                    for e in prow.iter_mut() {
                        *e = (*e - mx).exp();
                        z += *e;
                    }
                    for e in prow.iter_mut() {
                        *e = *e / z;
                    }
                    let orow = &mut out.data[(base + i) * dim + h * hd..][..hd];
                    for j in 0..tokens {
                        let w = prow[j];
                        let vv = &v.data[(base + j) * stride + vo..][..hd];
                        for (o, &x) in orow.iter_mut().zip(vv) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                tokens,
                heads,
                probs,
            },
        ))
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of
    /// `sources[index[r].0]`. Covers gathers, concatenation, broadcasting
    /// of shared rows and scatter into placeholders.
    pub fn assemble(&mut self, sources: &[Var], index: Vec<(u32, u32)>) -> Result<Var> {
        let cols = match sources.first() {
            Some(&s) => self.value(s).cols,
            None => return Err(Error::shape("assemble without sources".to_string())),
        };
        for &s in sources {
            if self.value(s).cols != cols {
                return Err(Error::shape("assemble sources differ in width".to_string()));
            }
        }
        let mut out = Mat::zeros(index.len(), cols);
        for (r, &(s, i)) in index.iter().enumerate() {
            let src = self
                .value(*sources.get(s as usize).ok_or_else(|| Error::shape("assemble source"))?);
            if i as usize >= src.rows {
                return Err(Error::shape(format!("assemble row {i} of {}", src.rows)));
            }
            out.row_mut(r).copy_from_slice(src.row(i as usize));
        }
        Ok(self.push(
            out,
            Op::Assemble {
                sources: sources.to_vec(),
                index,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.assemble(&[x], rows.iter().map(|&r| (0, r as u32)).collect())
    }

    /// 3×3, padding 1 patch extraction for convolution. Output columns are
    /// ordered (ky, kx, channel).
    pub fn im2col(&mut self, x: Var, input: Spatial, stride: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rows != input.rows() || stride == 0 {
            return Err(Error::shape(format!(
                "im2col input has {} rows, geometry implies {}",
                v.rows,
                input.rows()
            )));
        }
        let c = v.cols;
        let out_s = conv_output(input, stride);
        let mut out = Mat::zeros(out_s.rows(), 9 * c);
        for_each_tap(input, stride, |orow, tap, irow| {
            out.data[orow * 9 * c + tap * c..][..c].copy_from_slice(&v.data[irow * c..][..c]);
        });
        Ok(self.push(out, Op::Im2Col { x, input, stride }))
    }

    pub fn avg_pool2(&mut self, x: Var, input: Spatial) -> Result<Var> {
        let v = self.value(x);
        if v.rows != input.rows() || input.height % 2 != 0 || input.width % 2 != 0 {
            return Err(Error::shape("avg_pool2 geometry".to_string()));
        }
        let c = v.cols;
        let (oh, ow) = (input.height / 2, input.width / 2);
        let mut out = Mat::zeros(input.batch * oh * ow, c);
        let q = T::of(0.25);
        for (orow, irow) in pool_taps(input) {
            for k in 0..c {
                let val = v.data[irow * c + k] * q;
                out.data[orow * c + k] += val;
            }
        }
        Ok(self.push(out, Op::AvgPool2 { x, input }))
    }

    /// Averages consecutive groups of `group` rows.
    pub fn mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let v = self.value(x);
        if group == 0 || v.rows % group != 0 {
            return Err(Error::shape(format!("mean over groups of {group} rows")));
        }
        let inv = T::of(1.0 / group as f64);
        let mut out = Mat::zeros(v.rows / group, v.cols);
        for r in 0..v.rows {
            let o = r / group;
            for c in 0..v.cols {
                out.data[o * v.cols + c] += v.data[r * v.cols + c] * inv;
            }
        }
        Ok(self.push(out, Op::MeanRows { x, group }))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let n = dot(v.row(r), v.row(r)).sqrt().max(T::of(1e-12));
            norms.push(n);
            for e in out.row_mut(r) {
                *e = *e / n;
            }
        }
        self.push(out, Op::L2Norm { x, norms })
    }

    /// Attaches an externally evaluated scalar loss whose gradient with
    /// respect to `x` is already known.
    pub fn loss(&mut self, x: Var, value: f64, grad: Mat<T>) -> Result<Var> {
        let v = self.value(x);
        if v.rows != grad.rows || v.cols != grad.cols {
            return Err(Error::shape("loss gradient shape".to_string()));
        }
        Ok(self.push(Mat::from_vec(1, 1, vec![T::of(value)]), Op::Loss { x, grad }))
    }

    /// Runs the reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Mat::from_vec(rv.rows, rv.cols, vec![T::one(); rv.data.len()]));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, id: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, delta: Mat<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, matmul(g, false, vb, true));
                acc(*b, matmul(va, true, g, false));
            }
            Op::AddRow(x, b) => {
                let vb = self.value(*b);
                let mut gb = Mat::zeros(vb.rows, vb.cols);
                for row in g.data.chunks(g.cols.max(1)) {
                    for (o, &v) in gb.data.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Relu(x) => {
                let vx = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data.iter_mut().zip(&vx.data) {
                    if v <= T::zero() {
                        *o = T::zero();
                    }
                }
                acc(*x, gx);
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data.iter_mut().zip(&vx.data) {
                    *o *= gelu(v).1;
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = &self.value(*gamma).data;
                let (rows, cols) = (g.rows, g.cols);
                let n = T::of(cols as f64);
                let mut gx = Mat::zeros(rows, cols);
                let mut gg = Mat::zeros(1, cols);
                let mut gbeta = Mat::zeros(1, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..cols {
                        let dh = gr[c] * gm[c];
                        m1 += dh;
                        m2 += dh * hr[c];
                        gg.data[c] += gr[c] * hr[c];
                        gbeta.data[c] += gr[c];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        out[c] = rstd[r] * (gr[c] * gm[c] - m1 - hr[c] * m2);
                    }
                }
                let gshape = self.value(*gamma);
                gg.rows = gshape.rows;
                gg.cols = gshape.cols;
                gbeta.rows = gshape.rows;
                gbeta.cols = gshape.cols;
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
            Op::Attention {
                qkv,
                tokens,
                heads,
                probs,
            } => {
                let v = self.value(*qkv);
                let (tokens, heads) = (*tokens, *heads);
                let stride = v.cols;
                let dim = stride / 3;
                let hd = dim / heads;
                let scale = T::of(1.0 / (hd as f64).sqrt());
                let seqs = v.rows / tokens;
                let mut gq = Mat::zeros(v.rows, stride);
                let mut dp = vec![T::zero(); tokens];
                for s in 0..seqs {
                    let base = s * tokens;
                    for h in 0..heads {
                        let p = &probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
                        let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
                        for i in 0..tokens {
                            let go = &g.data[(base + i) * dim + h * hd..][..hd];
                            let prow = &p[i * tokens..(i + 1) * tokens];
                            let mut inner = T::zero();
                            for j in 0..tokens {
                                let vv = &v.data[(base + j) * stride + vo..][..hd];
                                dp[j] = dot(go, vv);
                                inner += dp[j] * prow[j];
                                // dV_j += p_ij * dO_i
                                let gv = &mut gq.data[(base + j) * stride + vo..][..hd];
                                for (o, &x) in gv.iter_mut().zip(go) {
                                    *o += prow[j] * x;
                                }
                            }
                            for j in 0..tokens {
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let (qrow, krow) = ((base + i) * stride, (base + j) * stride);
                                for d in 0..hd {
                                    let kv = v.data[krow + ko + d];
                                    let qv = v.data[qrow + qo + d];
                                    gq.data[qrow + qo + d] += ds * kv;
                                    gq.data[krow + ko + d] += ds * qv;
                                }
                            }
                        }
                    }
                }
                acc(*qkv, gq);
            }
            Op::Assemble { sources, index } => {
                let mut parts: Vec<Mat<T>> = sources
                    .iter()
                    .map(|&s| {
                        let v = self.value(s);
                        Mat::zeros(v.rows, v.cols)
                    })
                    .collect();
                for (r, &(s, i)) in index.iter().enumerate() {
                    let dst = parts[s as usize].row_mut(i as usize);
                    for (o, &x) in dst.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                for (&s, part) in sources.iter().zip(parts) {
                    acc(s, part);
                }
            }
            Op::Im2Col { x, input, stride } => {
                let c = self.value(*x).cols;
                let mut gx = Mat::zeros(input.rows(), c);
                for_each_tap(*input, *stride, |orow, tap, irow| {
                    let src = &g.data[orow * 9 * c + tap * c..][..c];
                    for (o, &v) in gx.data[irow * c..][..c].iter_mut().zip(src) {
                        *o += v;
                    }
                });
                acc(*x, gx);
            }
            Op::AvgPool2 { x, input } => {
                let c = g.cols;
                let mut gx = Mat::zeros(input.rows(), c);
                let q = T::of(0.25);
                for (orow, irow) in pool_taps(*input) {
                    for k in 0..c {
                        gx.data[irow * c + k] += g.data[orow * c + k] * q;
                    }
                }
                acc(*x, gx);
            }
            Op::MeanRows { x, group } => {
                let vx = self.value(*x);
                let inv = T::of(1.0 / *group as f64);
                let mut gx = Mat::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let src = g.row(r / group);
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(src) {
                        *o = v * inv;
                    }
                }
                acc(*x, gx);
            }
            Op::L2Norm { x, norms } => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let d = dot(yr, gr);
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * d) / norms[r];
                    }
                }
                acc(*x, gx);
            }
            Op::Loss { x, grad } => {
                let s = g.data[0];
                acc(*x, grad.map(|v| v * s));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter loaded into the graph. Parameters that
    /// did not influence the root get no entry.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.wrt(*v).map(|g| (name.as_str(), g)))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// tanh-approximated GELU and its derivative.
fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

pub fn conv_output(input: Spatial, stride: usize) -> Spatial {
    Spatial {
        batch: input.batch,
        height: (input.height - 1) / stride + 1,
        width: (input.width - 1) / stride + 1,
    }
}

fn for_each_tap(input: Spatial, stride: usize, mut f: impl FnMut(usize, usize, usize)) {
    let out = conv_output(input, stride);
    let (h, w) = (input.height as isize, input.width as isize);
    for b in 0..input.batch {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let orow = (b * out.height + oy) * out.width + ox;
                for ky in 0..3isize {
                    let iy = (oy * stride) as isize + ky - 1;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..3isize {
                        let ix = (ox * stride) as isize + kx - 1;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let irow = (b * input.height + iy as usize) * input.width + ix as usize;
                        f(orow, (ky * 3 + kx) as usize, irow);
                    }
                }
            }
        }
    }
}

fn pool_taps(input: Spatial) -> impl Iterator<Item = (usize, usize)> {
    let (oh, ow) = (input.height / 2, input.width / 2);
    (0..input.batch).flat_map(move |b| {
        (0..input.height).flat_map(move |y| {
            (0..input.width).map(move |x| {
                let orow = (b * oh + y / 2) * ow + x / 2;
                let irow = (b * input.height + y) * input.width + x;
                (orow, irow)
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    struct Params(HashMap<String, (usize, usize, Vec<f32>)>);

    impl ParamSource for Params {
        fn lookup(&self, name: &str) -> Option<(usize, usize, &[f32])> {
            self.0.get(name).map(|(r, c, d)| (*r, *c, d.as_slice()))
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences.
    fn check(x: Mat<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = f(&mut g, xv);
        let w = random(g.value(y).rows, g.value(y).cols, &mut rng);
        let eval = |x: &Mat<f64>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = f(&mut g, xv);
            dot(&g.value(y).data, &w.data)
        };
        let total = dot(&g.value(y).data, &w.data);
        let root = g.loss(y, total, w.clone()).unwrap();
        let grads = g.backward(root);
        let analytic = grads.wrt(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.data[i];
            assert!(
                (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_transposes() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let c = matmul(&a, false, &b, true);
        assert_eq!(c.data, vec![4.0, 2.0, 10.0, 5.0]);
        let d = matmul(&a, true, &b, false);
        assert_eq!(d.rows, 3);
        assert_eq!(d.data, vec![1.0, 4.0, 1.0, 2.0, 5.0, 2.0, 3.0, 6.0, 3.0]);
    }

    #[test]
    fn gradient_of_linear_gelu_layernorm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = random(4, 5, &mut rng);
        let gam = random(1, 5, &mut rng);
        let bet = random(1, 5, &mut rng);
        check(random(3, 4, &mut rng), move |g, x| {
            let w = g.input(w.clone());
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            let ga = g.input(gam.clone());
            let be = g.input(bet.clone());
            g.layer_norm(y, ga, be).unwrap()
        });
    }

    #[test]
    fn gradient_of_attention() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        check(random(6, 12, &mut rng), |g, x| g.attention(x, 3, 2).unwrap());
    }

    #[test]
    fn gradient_of_conv_pool_and_norms() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let s = Spatial {
            batch: 2,
            height: 4,
            width: 4,
        };
        let w = random(18, 3, &mut rng);
        check(random(s.rows(), 2, &mut rng), move |g, x| {
            let cols = g.im2col(x, s, 1).unwrap();
            let w = g.input(w.clone());
            let y = g.matmul(cols, w).unwrap();
            let y = g.relu(y);
            let y = g.avg_pool2(y, s).unwrap();
            let y = g.mean_rows(y, 2).unwrap();
            g.l2_normalize(y)
        });
        let w2 = random(18, 2, &mut rng);
        check(random(s.rows(), 2, &mut rng), move |g, x| {
            let cols = g.im2col(x, s, 2).unwrap();
            let w = g.input(w2.clone());
            g.matmul(cols, w).unwrap()
        });
    }

    #[test]
    fn gradient_of_assemble_and_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let extra = random(2, 3, &mut rng);
        let bias = random(1, 3, &mut rng);
        check(random(4, 3, &mut rng), move |g, x| {
            let e = g.input(extra.clone());
            let a = g
                .assemble(&[x, e], vec![(1, 0), (0, 3), (0, 3), (0, 1), (1, 1)])
                .unwrap();
            let b = g.input(bias.clone());
            let y = g.add_row(a, b).unwrap();
            let z = g.scale(y, 0.5);
            g.add(z, y).unwrap()
        });
    }

    #[test]
    fn params_are_loaded_once_and_receive_gradients() {
        let mut map = HashMap::new();
        map.insert("w".to_string(), (2, 2, vec![1.0f32, 2.0, 3.0, 4.0]));
        let p = Params(map);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Mat::from_vec(1, 2, vec![1.0, 1.0]));
        let w1 = g.param(&p, "w").unwrap();
        let w2 = g.param(&p, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.matmul(x, w1).unwrap();
        let root = g.loss(y, 0.0, Mat::from_vec(1, 2, vec![1.0, 1.0])).unwrap();
        let grads = g.backward(root);
        let (name, gw) = grads.params().next().unwrap();
        assert_eq!(name, "w");
        assert_eq!(gw.data, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(g.param(&p, "missing").is_err());
    }
}
