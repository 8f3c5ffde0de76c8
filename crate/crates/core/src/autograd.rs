//! A small reverse-mode automatic differentiation tape.
//!
//! Each forward pass records its operations in a [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse. Only the operations the model needs are
//! provided. Convolutions go through im2col and a blocked GEMM.
//!
//! Layout conventions: images are `[B, C, H, W]`, token sequences are
//! `[B, N, C]`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows - 1) * rs + (cols - 1) * cs + 1
                    }
                };
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<F>,
    },
    Upsample2(Var),
    Add(Var, Var),
    AddBcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Silu(Var),
    ChannelSlice {
        x: Var,
        start: usize,
    },
    ToTokens(Var),
    FromTokens(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    ColNormalize {
        a: Var,
        eps: F,
    },
    LayerNorm {
        a: Var,
        rstd: Vec<F>,
    },
    SlotInit {
        bg: Option<Var>,
        mu: Var,
        log_std: Var,
        noise: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// The tape of one forward pass.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [F],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(F::ZERO);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize { F::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [F],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws, vec![o, c, k, k], "conv2d weight must be [O, C, k, k]");
        assert_eq!(self.shape(b), &[o]);
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let ckk = c * k * k;
        let hw_out = ho * wo;
        let mut cols = vec![F::ZERO; bsz * ckk * hw_out];
        let mut out = vec![F::ZERO; bsz * o * hw_out];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for bi in 0..bsz {
                let col = &mut cols[bi * ckk * hw_out..(bi + 1) * ckk * hw_out];
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, col);
                let dst = &mut out[bi * o * hw_out..(bi + 1) * o * hw_out];
                for (oi, row) in dst.chunks_exact_mut(hw_out).enumerate() {
                    row.fill(bv[oi]);
                }
                F::gemm(o, ckk, hw_out, wv, (ckk, 1), col, (hw_out, 1), F::ONE, dst, (hw_out, 1));
            }
        }
        self.push(
            Tensor::new(vec![bsz, o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &[x, w, b],
        )
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![F::ZERO; bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2(x), &[x])
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, data), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.ends_with(&sb), "cannot broadcast {sb:?} onto {sa:?}");
        let bv = &self.nodes[b.0].value.data;
        let data = self.nodes[a.0]
            .value
            .data
            .chunks_exact(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        self.push(Tensor::new(sa, data), Op::AddBcast(a, b), &[a, b])
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor::new(av.shape.clone(), av.data.iter().map(|&x| f(x)).collect());
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > F::ZERO { x } else { F::ZERO }, Op::Relu(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// Channels `start..start + len` of a `[B, C, H, W]` tensor.
    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[1]);
        let plane = s[2] * s[3];
        let xv = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(s[0] * len * plane);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * plane;
            data.extend_from_slice(&xv[base..base + len * plane]);
        }
        self.push(
            Tensor::new(vec![s[0], len, s[2], s[3]], data),
            Op::ChannelSlice { x, start },
            &[x],
        )
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![F::ZERO; b * n * c];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..n {
                    data[(bi * n + p) * c + ci] = xv[(bi * c + ci) * n + p];
                }
            }
        }
        self.push(Tensor::new(vec![b, n, c], data), Op::ToTokens(x), &[x])
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        assert_eq!(n, h * w);
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![F::ZERO; b * n * c];
        for bi in 0..b {
            for p in 0..n {
                for ci in 0..c {
                    data[(bi * c + ci) * n + p] = xv[(bi * n + p) * c + ci];
                }
            }
        }
        self.push(Tensor::new(vec![b, c, h, w], data), Op::FromTokens(x), &[x])
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), din, "linear input width");
        assert_eq!(self.shape(b), &[dout]);
        let rows = self.nodes[x.0].value.len() / din;
        let mut out = Vec::with_capacity(rows * dout);
        let bv = &self.nodes[b.0].value.data;
        for _ in 0..rows {
            out.extend_from_slice(bv);
        }
        F::gemm(
            rows,
            din,
            dout,
            &self.nodes[x.0].value.data,
            (din, 1),
            &self.nodes[w.0].value.data,
            (dout, 1),
            F::ONE,
            &mut out,
            (dout, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Batched `op(a) @ op(b)` where `op` optionally transposes the last two axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0], "batch sizes differ");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "inner dimensions differ");
        let batch = sa[0];
        let mut out = vec![F::ZERO; batch * m * n];
        let a_str = if ta { (1, sa[2]) } else { (sa[2], 1) };
        let b_str = if tb { (1, sb[2]) } else { (sb[2], 1) };
        for bi in 0..batch {
            let av = &self.nodes[a.0].value.data[bi * sa[1] * sa[2]..(bi + 1) * sa[1] * sa[2]];
            let bv = &self.nodes[b.0].value.data[bi * sb[1] * sb[2]..(bi + 1) * sb[1] * sb[2]];
            F::gemm(m, k, n, av, a_str, bv, b_str, F::ZERO, &mut out[bi * m * n..(bi + 1) * m * n], (n, 1));
        }
        self.push(Tensor::new(vec![batch, m, n], out), Op::BatchMatMul { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let d = *av.shape.last().unwrap();
        let mut data = Vec::with_capacity(av.len());
        for row in av.data.chunks_exact(d) {
            let max = row.iter().copied().fold(row[0], |m, x| if x > m { x } else { m });
            let start = data.len();
            let mut z = F::ZERO;
            for &x in row {
                let e = (x - max).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / z;
            }
        }
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, data), Op::Softmax(a), &[a])
    }

    /// For `[B, N, S]`, divides each column by its sum over `N` (plus `eps`).
    pub fn col_normalize(&mut self, a: Var, eps: F) -> Var {
        let s = self.shape(a).to_vec();
        let (b, n, k) = (s[0], s[1], s[2]);
        let av = &self.nodes[a.0].value.data;
        let mut data = av.clone();
        for bi in 0..b {
            let block = &mut data[bi * n * k..(bi + 1) * n * k];
            let mut sums = vec![eps; k];
            for row in block.chunks_exact(k) {
                for (s, &v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
            for row in block.chunks_exact_mut(k) {
                for (v, &s) in row.iter_mut().zip(&sums) {
                    *v = *v / s;
                }
            }
        }
        self.push(Tensor::new(s, data), Op::ColNormalize { a, eps }, &[a])
    }

    /// Normalization to zero mean, unit variance over the last axis.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let eps = F::from_f64(1e-5);
        let av = &self.nodes[a.0].value;
        let d = *av.shape.last().unwrap();
        let df = F::from_f64(d as f64);
        let mut data = Vec::with_capacity(av.len());
        let mut rstd = Vec::with_capacity(av.len() / d);
        for row in av.data.chunks_exact(d) {
            let mean = row.iter().fold(F::ZERO, |s, &x| s + x) / df;
            let var = row.iter().fold(F::ZERO, |s, &x| s + (x - mean) * (x - mean)) / df;
            let r = F::ONE / (var + eps).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|&x| (x - mean) * r));
        }
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, data), Op::LayerNorm { a, rstd }, &[a])
    }

    /// Initial slots `[B, S, D]`: optional background row from `bg`, then
    /// `mu + exp(log_std) * noise` for each row of `noise` (`[B, S_obj, D]`).
    pub fn slot_init(&mut self, bg: Option<Var>, mu: Var, log_std: Var, noise: Tensor<F>) -> Var {
        let d = self.shape(mu)[0];
        let (b, objects) = (noise.shape[0], noise.shape[1]);
        assert_eq!(noise.shape[2], d);
        let slots = objects + usize::from(bg.is_some());
        let muv = &self.nodes[mu.0].value.data;
        let sv: Vec<F> = self.nodes[log_std.0].value.data.iter().map(|x| x.exp()).collect();
        let mut data = Vec::with_capacity(b * slots * d);
        for bi in 0..b {
            if let Some(bg) = bg {
                data.extend_from_slice(&self.nodes[bg.0].value.data);
            }
            for o in 0..objects {
                let row = &noise.data[(bi * objects + o) * d..(bi * objects + o + 1) * d];
                data.extend((0..d).map(|j| muv[j] + sv[j] * row[j]));
            }
        }
        let mut parents = vec![mu, log_std];
        parents.extend(bg);
        self.push(
            Tensor::new(vec![b, slots, d], data),
            Op::SlotInit {
                bg,
                mu,
                log_std,
                noise: noise.data,
            },
            &parents,
        )
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&mut self, seeds: &[(Var, &[F])]) {
        for (v, g) in seeds {
            assert_eq!(self.nodes[v.0].value.len(), g.len(), "seed gradient size");
            self.accumulate(*v, g.to_vec());
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (var, contribution) in self.node_backward(i, &g) {
                if self.nodes[var.0].requires_grad {
                    self.accumulate(var, contribution);
                }
            }
            self.nodes[i].grad = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<F>) {
        match &mut self.nodes[v.0].grad {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = &val(*x).shape;
                let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = &val(*w).shape;
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.value.shape[2], node.value.shape[3]);
                let (ckk, hw_out) = (c * k * k, ho * wo);
                let mut dw = vec![F::ZERO; o * ckk];
                let mut db = vec![F::ZERO; o];
                let mut dx = self.wants(*x).then(|| vec![F::ZERO; bsz * c * h * wd]);
                let mut dcols = vec![F::ZERO; ckk * hw_out];
                let wv = &val(*w).data;
                for bi in 0..bsz {
                    let gb = &g[bi * o * hw_out..(bi + 1) * o * hw_out];
                    let col = &cols[bi * ckk * hw_out..(bi + 1) * ckk * hw_out];
                    F::gemm(o, hw_out, ckk, gb, (hw_out, 1), col, (1, hw_out), F::ONE, &mut dw, (ckk, 1));
                    for (oi, row) in gb.chunks_exact(hw_out).enumerate() {
                        db[oi] += row.iter().fold(F::ZERO, |s, &v| s + v);
                    }
                    if let Some(dx) = dx.as_mut() {
                        F::gemm(ckk, o, hw_out, wv, (1, ckk), gb, (hw_out, 1), F::ZERO, &mut dcols, (hw_out, 1));
                        col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Upsample2(x) => {
                let s = &val(*x).shape;
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![F::ZERO; bc * h * w];
                for p in 0..bc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
                }
            }
            Op::AddBcast(a, b) => {
                out.push((*a, g.to_vec()));
                if self.wants(*b) {
                    let n = val(*b).len();
                    let mut db = vec![F::ZERO; n];
                    for chunk in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::Sigmoid(a) => out.push((
                *a,
                g.iter().zip(&node.value.data).map(|(&gi, &y)| gi * y * (F::ONE - y)).collect(),
            )),
            Op::Tanh(a) => out.push((
                *a,
                g.iter().zip(&node.value.data).map(|(&gi, &y)| gi * (F::ONE - y * y)).collect(),
            )),
            Op::Relu(a) => out.push((
                *a,
                g.iter()
                    .zip(&node.value.data)
                    .map(|(&gi, &y)| if y > F::ZERO { gi } else { F::ZERO })
                    .collect(),
            )),
            Op::Silu(a) => out.push((
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(&gi, &x)| {
                        let s = sigmoid(x);
                        gi * s * (F::ONE + x * (F::ONE - s))
                    })
                    .collect(),
            )),
            Op::ChannelSlice { x, start } => {
                let s = &val(*x).shape;
                let plane = s[2] * s[3];
                let len = node.value.shape[1];
                let mut dx = vec![F::ZERO; val(*x).len()];
                for b in 0..s[0] {
                    let dst = (b * s[1] + start) * plane;
                    let src = b * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                out.push((*x, dx));
            }
            Op::ToTokens(x) => {
                let s = &val(*x).shape;
                let (b, c, n) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![F::ZERO; b * c * n];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..n {
                            dx[(bi * c + ci) * n + p] = g[(bi * n + p) * c + ci];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::FromTokens(x) => {
                let s = &val(*x).shape;
                let (b, n, c) = (s[0], s[1], s[2]);
                let mut dx = vec![F::ZERO; b * c * n];
                for bi in 0..b {
                    for p in 0..n {
                        for ci in 0..c {
                            dx[(bi * n + p) * c + ci] = g[(bi * c + ci) * n + p];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let ws = &val(*w).shape;
                let (din, dout) = (ws[0], ws[1]);
                let xv = &val(*x).data;
                let rows = xv.len() / din;
                if self.wants(*x) {
                    let mut dx = vec![F::ZERO; rows * din];
                    F::gemm(rows, dout, din, g, (dout, 1), &val(*w).data, (1, dout), F::ZERO, &mut dx, (din, 1));
                    out.push((*x, dx));
                }
                let mut dw = vec![F::ZERO; din * dout];
                F::gemm(din, rows, dout, xv, (1, din), g, (dout, 1), F::ZERO, &mut dw, (dout, 1));
                out.push((*w, dw));
                let mut db = vec![F::ZERO; dout];
                for row in g.chunks_exact(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                out.push((*b, db));
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let (la, lb) = (sa[1] * sa[2], sb[1] * sb[2]);
                // Strides of op(a) [m, k] and op(b) [k, n] inside their stored blocks.
                let a_str = if *ta { (1, sa[2]) } else { (sa[2], 1) };
                let b_str = if *tb { (1, sb[2]) } else { (sb[2], 1) };
                if self.wants(*a) {
                    let mut da = vec![F::ZERO; val(*a).len()];
                    for bi in 0..sa[0] {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bv = &val(*b).data[bi * lb..(bi + 1) * lb];
                        // d op(a) = g @ op(b)^T, written through op(a)'s strides.
                        F::gemm(m, n, k, gb, (n, 1), bv, (b_str.1, b_str.0), F::ZERO, &mut da[bi * la..(bi + 1) * la], a_str);
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![F::ZERO; val(*b).len()];
                    for bi in 0..sa[0] {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let av = &val(*a).data[bi * la..(bi + 1) * la];
                        // d op(b) = op(a)^T @ g.
                        F::gemm(k, m, n, av, (a_str.1, a_str.0), gb, (n, 1), F::ZERO, &mut db[bi * lb..(bi + 1) * lb], b_str);
                    }
                    out.push((*b, db));
                }
            }
            Op::Softmax(a) => {
                let d = *node.value.shape.last().unwrap();
                let mut da = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(d).zip(node.value.data.chunks_exact(d)) {
                    let dot = gr.iter().zip(yr).fold(F::ZERO, |s, (&gi, &y)| s + gi * y);
                    da.extend(gr.iter().zip(yr).map(|(&gi, &y)| y * (gi - dot)));
                }
                out.push((*a, da));
            }
            Op::ColNormalize { a, eps } => {
                let s = &node.value.shape;
                let (b, n, k) = (s[0], s[1], s[2]);
                let av = &val(*a).data;
                let mut da = vec![F::ZERO; av.len()];
                for bi in 0..b {
                    let range = bi * n * k..(bi + 1) * n * k;
                    let (ab, gb, yb) = (&av[range.clone()], &g[range.clone()], &node.value.data[range.clone()]);
                    let mut sums = vec![*eps; k];
                    let mut gy = vec![F::ZERO; k];
                    for p in 0..n {
                        for s in 0..k {
                            sums[s] += ab[p * k + s];
                            gy[s] += gb[p * k + s] * yb[p * k + s];
                        }
                    }
                    let dab = &mut da[range];
                    for p in 0..n {
                        for s in 0..k {
                            dab[p * k + s] = (gb[p * k + s] - gy[s]) / sums[s];
                        }
                    }
                }
                out.push((*a, da));
            }
            Op::LayerNorm { a, rstd } => {
                let d = *node.value.shape.last().unwrap();
                let df = F::from_f64(d as f64);
                let mut da = Vec::with_capacity(g.len());
                for ((gr, yr), &r) in g.chunks_exact(d).zip(node.value.data.chunks_exact(d)).zip(rstd) {
                    let mean_g = gr.iter().fold(F::ZERO, |s, &v| s + v) / df;
                    let mean_gy = gr.iter().zip(yr).fold(F::ZERO, |s, (&gi, &y)| s + gi * y) / df;
                    da.extend(gr.iter().zip(yr).map(|(&gi, &y)| r * (gi - mean_g - y * mean_gy)));
                }
                out.push((*a, da));
            }
            Op::SlotInit { bg, mu, log_std, noise } => {
                let d = val(*mu).len();
                let s = &node.value.shape;
                let (b, slots) = (s[0], s[1]);
                let offset = usize::from(bg.is_some());
                let objects = slots - offset;
                let sv: Vec<F> = val(*log_std).data.iter().map(|x| x.exp()).collect();
                let mut dbg = vec![F::ZERO; d];
                let mut dmu = vec![F::ZERO; d];
                let mut dls = vec![F::ZERO; d];
                for bi in 0..b {
                    if bg.is_some() {
                        for j in 0..d {
                            dbg[j] += g[bi * slots * d + j];
                        }
                    }
                    for o in 0..objects {
                        let grow = &g[(bi * slots + offset + o) * d..(bi * slots + offset + o + 1) * d];
                        let nrow = &noise[(bi * objects + o) * d..(bi * objects + o + 1) * d];
                        for j in 0..d {
                            dmu[j] += grow[j];
                            dls[j] += grow[j] * sv[j] * nrow[j];
                        }
                    }
                }
                if let Some(bg) = bg {
                    out.push((*bg, dbg));
                }
                out.push((*mu, dmu));
                out.push((*log_std, dls));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks the tape gradient of `sum(out * probe)` against central differences.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let probe: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.backward(&[(out, &probe)]);
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();

        let eval = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data[j] += h;
                let mut minus = inputs.clone();
                minus[i].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i].get(j).copied().unwrap_or(0.0);
                assert!((a - fd).abs() <= 1e-7 + 1e-5 * a.abs().max(fd.abs()),"input {i} entry {j}: analytic {a} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn conv2d_strided_and_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(&mut rng, &[2, 3, 5, 6]), random(&mut rng, &[4, 3, 3, 3]), random(&mut rng, &[4])];
        check(inputs.clone(), |g, v| g.conv2d(v[0], v[1], v[2], 2, 1));
        check(inputs, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1));
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, w, b) = (random(&mut rng, &[1, 2, 4, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3]));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1);
        assert_eq!(g.shape(y), &[1, 3, 2, 2]);
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = b.data[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    s += w.data[((o * 2 + c) * 3 + ky) * 3 + kx] * x.data[(c * 4 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((g.value(y).data[(o * 2 + oy) * 2 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[2, 3, 2, 2]);
        let b = random(&mut rng, &[2, 3, 2, 2]);
        check(vec![a.clone(), b.clone()], |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[1]);
            let m = g.mul(s, t);
            let d = g.sub(m, v[0]);
            let u = g.upsample2(d);
            let r = g.relu(u);
            let r = g.silu(r);
            let sc = g.scale(r, 0.7);
            let sl = g.channel_slice(sc, 1, 2);
            g.add(sl, sl)
        });
        check(vec![a, random(&mut rng, &[3, 2, 2])], |g, v| g.add_bcast(v[0], v[1]));
    }

    #[test]
    fn token_reshapes_linear_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(&mut rng, &[2, 3, 2, 3]), random(&mut rng, &[3, 4]), random(&mut rng, &[4])];
        check(inputs, |g, v| {
            let t = g.to_tokens(v[0]);
            let n = g.layer_norm(t);
            let l = g.linear(n, v[1], v[2]);
            let s = g.softmax(l);
            let c = g.col_normalize(s, 1e-8);
            g.from_tokens(c, 2, 3)
        });
    }

    #[test]
    fn batch_matmul_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { random(&mut rng, &[2, 4, 3]) } else { random(&mut rng, &[2, 3, 4]) };
            let b = if tb { random(&mut rng, &[2, 5, 4]) } else { random(&mut rng, &[2, 4, 5]) };
            check(vec![a, b], move |g, v| g.batch_matmul(v[0], v[1], ta, tb));
        }
    }

    #[test]
    fn slot_init_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = random(&mut rng, &[2, 3, 4]);
        let inputs = vec![random(&mut rng, &[4]), random(&mut rng, &[4]), random(&mut rng, &[4])];
        let n2 = noise.clone();
        check(inputs.clone(), move |g, v| g.slot_init(Some(v[0]), v[1], v[2], n2.clone()));
        check(inputs, move |g, v| g.slot_init(None, v[1], v[2], noise.clone()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let p = g.param(Tensor::new(vec![2], vec![3.0, 4.0]));
        let y = g.mul(c, p);
        g.backward(&[(y, &[1.0, 1.0])]);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }
}
