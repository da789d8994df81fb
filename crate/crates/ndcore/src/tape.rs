//! Reverse-mode automatic differentiation over a fixed set of tensor ops.
//!
//! A [`Tape`] records every op applied during one forward pass. Nodes are
//! addressed by [`Var`] handles; [`Tape::backward`] walks the tape in reverse
//! and returns a gradient for every node that influences the loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::tensor::Tensor;

/// Epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    MulBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Tanh { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<f64> },
    DepthwiseConv1d { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    Permute0213 { a: Var },
    Reshape { a: Var },
    SliceRows { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    SumAll { a: Var },
    MeanAll { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zero-filled when `v` does not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl Tape {
    /// Eval-mode tape: dropout is the identity.
    pub fn eval() -> Self {
        Tape { nodes: Vec::new(), training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Train-mode tape: dropout masks are drawn from a ChaCha stream seeded
    /// with `seed`.
    pub fn train(seed: u64) -> Self {
        Tape { nodes: Vec::new(), training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// `a[.., K] x b[K, N] -> [.., N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D, got {sb:?}");
        let k = *sa.last().unwrap();
        assert_eq!(k, sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let m = leading(&sa);
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(&shape, out).unwrap(), Op::MatMul { a, b })
    }

    /// Batched matmul: `a[G, M, K] x b[G, K, N] -> [G, M, N]`, or with
    /// `trans_b`, `a[G, M, K] x b[G, N, K]^T -> [G, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm needs 3-D operands, got {sa:?} {sb:?}");
        assert_eq!(sa[0], sb[0], "bmm batch dims");
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "bmm inner dims {sa:?} x {sb:?} (trans_b={trans_b})");
        let mut out = vec![0.0; g * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for gi in 0..g {
                let am = Mat::new(&ad[gi * m * k..(gi + 1) * m * k], m, k);
                let bm = if trans_b {
                    Mat::new(&bd[gi * n * k..(gi + 1) * n * k], n, k).t()
                } else {
                    Mat::new(&bd[gi * k * n..(gi + 1) * k * n], k, n)
                };
                gemm(am, bm, &mut out[gi * m * n..(gi + 1) * m * n], false);
            }
        }
        self.push(Tensor::new(&[g, m, n], out).unwrap(), Op::BatchMatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::Add { a, b })
    }

    fn check_suffix(&self, a: Var, b: Var) -> usize {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "broadcast operand {sb:?} is not a suffix of {sa:?}"
        );
        sb.iter().product()
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let inner = self.check_suffix(a, b);
        let bd = self.value(b).data();
        let out: Vec<f64> =
            self.value(a).data().iter().enumerate().map(|(i, x)| x + bd[i % inner]).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::AddBroadcast { a, b })
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let inner = self.check_suffix(a, b);
        let bd = self.value(b).data();
        let out: Vec<f64> =
            self.value(a).data().iter().enumerate().map(|(i, x)| x * bd[i % inner]).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::MulBroadcast { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale { a, s })
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid { a })
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape(), out).unwrap();
        self.push(t, Op::Softmax { a })
    }

    /// Layer normalization over the last axis without affine parameters,
    /// using the population variance.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(v.shape(), out).unwrap();
        self.push(t, Op::LayerNorm { a, rstd })
    }

    /// Depthwise 1-D convolution along time with zero "same" padding.
    ///
    /// `x` is `[B, T, C]` (or `[T, C]`), `w` is `[C, k]` with odd `k`, and
    /// `b` is `[C]`. Channel `c` only sees its own kernel row.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape(format!("conv input must be [.., T, C], got {sx:?}")));
        }
        let c = sx[sx.len() - 1];
        let t = sx[sx.len() - 2];
        let batch: usize = sx[..sx.len() - 2].iter().product();
        if sw.len() != 2 || sw[0] != c {
            return Err(Error::Shape(format!("conv weights {sw:?} do not match {c} channels")));
        }
        let k = sw[1];
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
        }
        if self.shape(b) != [c] {
            return Err(Error::Shape(format!("conv bias {:?} vs {c} channels", self.shape(b))));
        }
        let half = (k / 2) as isize;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            let base = bi * t * c;
            for ti in 0..t {
                let orow = &mut out[base + ti * c..base + (ti + 1) * c];
                orow.copy_from_slice(bd);
                for j in 0..k {
                    let src = ti as isize + j as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &xd[base + src as usize * c..base + (src as usize + 1) * c];
                    for ci in 0..c {
                        orow[ci] += wd[ci * k + j] * xrow[ci];
                    }
                }
            }
        }
        let value = Tensor::new(&sx, out).unwrap();
        Ok(self.push(value, Op::DepthwiseConv1d { x, w, b }))
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let lead_shape = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s[..s.len() - 1], lead_shape[..], "concat leading dims");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead_shape.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wdt) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wdt].copy_from_slice(&d[r * wdt..(r + 1) * wdt]);
            }
            off += wdt;
        }
        let mut shape = lead_shape;
        shape.push(total);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Concat { parts: parts.to_vec() })
    }

    /// `[A, B, C, D] -> [A, C, B, D]`
    pub fn permute_0213(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "permute_0213 needs 4-D input");
        let out = permute_0213(self.value(a).data(), &s);
        self.push(Tensor::new(&[s[0], s[2], s[1], s[3]], out).unwrap(), Op::Permute0213 { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape).expect("reshape element count");
        self.push(t, Op::Reshape { a })
    }

    /// First `n` entries along axis 0.
    pub fn slice_rows(&mut self, a: Var, n: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(n >= 1 && n <= s[0], "slice_rows {n} of {s:?}");
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[..n * inner].to_vec();
        let mut shape = s;
        shape[0] = n;
        self.push(Tensor::new(&shape, data).unwrap(), Op::SliceRows { a })
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        if !self.training || p == 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out: Vec<f64> = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::Dropout { a, mask })
    }

    /// Mean binary cross-entropy with logits over a batch of scalar logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() {
            return Err(Error::Shape(format!("{} logits vs {} labels", z.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Config(format!("label {bad} is not 0 or 1")));
        }
        let loss = z.iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum::<f64>() / z.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, labels: labels.to_vec() }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll { a })
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() }
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (leading(sa), sb[0], sb[1]);
                let ga = acc(grads, *a, m * k);
                gemm(Mat::new(gy, m, n), Mat::new(self.value(*b).data(), k, n).t(), ga, true);
                let gb = acc(grads, *b, k * n);
                gemm(Mat::new(self.value(*a).data(), m, k).t(), Mat::new(gy, m, n), gb, true);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (g, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                {
                    let ga = acc(grads, *a, g * m * k);
                    for gi in 0..g {
                        let gym = Mat::new(&gy[gi * m * n..(gi + 1) * m * n], m, n);
                        let bslice = &bd[gi * k * n..(gi + 1) * k * n];
                        // dA = dY B^T (plain) or dY B (trans_b)
                        let bm = if *trans_b { Mat::new(bslice, n, k) } else { Mat::new(bslice, k, n).t() };
                        gemm(gym, bm, &mut ga[gi * m * k..(gi + 1) * m * k], true);
                    }
                }
                let gb = acc(grads, *b, g * k * n);
                for gi in 0..g {
                    let gym = Mat::new(&gy[gi * m * n..(gi + 1) * m * n], m, n);
                    let am = Mat::new(&ad[gi * m * k..(gi + 1) * m * k], m, k);
                    let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // dB = dY^T A  -> [n, k]
                        gemm(gym.t(), am, out, true);
                    } else {
                        // dB = A^T dY  -> [k, n]
                        gemm(am.t(), gym, out, true);
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(acc(grads, *a, gy.len()), gy);
                add_into(acc(grads, *b, gy.len()), gy);
            }
            Op::AddBroadcast { a, b } => {
                add_into(acc(grads, *a, gy.len()), gy);
                let inner = self.value(*b).len();
                let gb = acc(grads, *b, inner);
                for chunk in gy.chunks(inner) {
                    add_into(gb, chunk);
                }
            }
            Op::MulBroadcast { a, b } => {
                let bd = self.value(*b).data();
                let inner = bd.len();
                {
                    let ga = acc(grads, *a, gy.len());
                    for (idx, g) in gy.iter().enumerate() {
                        ga[idx] += g * bd[idx % inner];
                    }
                }
                let ad = self.value(*a).data();
                let gb = acc(grads, *b, inner);
                for (idx, g) in gy.iter().enumerate() {
                    gb[idx % inner] += g * ad[idx];
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                {
                    let ga = acc(grads, *a, gy.len());
                    for idx in 0..gy.len() {
                        ga[idx] += gy[idx] * bd[idx];
                    }
                }
                let gb = acc(grads, *b, gy.len());
                for idx in 0..gy.len() {
                    gb[idx] += gy[idx] * ad[idx];
                }
            }
            Op::Scale { a, s } => {
                let ga = acc(grads, *a, gy.len());
                for (g, d) in ga.iter_mut().zip(gy) {
                    *g += d * s;
                }
            }
            Op::Tanh { a } => {
                let ga = acc(grads, *a, gy.len());
                for idx in 0..gy.len() {
                    ga[idx] += gy[idx] * (1.0 - y[idx] * y[idx]);
                }
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, gy.len());
                for idx in 0..gy.len() {
                    if x[idx] > 0.0 {
                        ga[idx] += gy[idx];
                    }
                }
            }
            Op::Sigmoid { a } => {
                let ga = acc(grads, *a, gy.len());
                for idx in 0..gy.len() {
                    ga[idx] += gy[idx] * y[idx] * (1.0 - y[idx]);
                }
            }
            Op::Softmax { a } => {
                let n = node.value.last_dim();
                let ga = acc(grads, *a, gy.len());
                for ((grow, yrow), out) in gy.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                    for j in 0..n {
                        out[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let n = node.value.last_dim();
                let ga = acc(grads, *a, gy.len());
                for (r, ((grow, yrow), out)) in
                    rstd.iter().zip(gy.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)))
                {
                    let mean_g = grow.iter().sum::<f64>() / n as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>() / n as f64;
                    for j in 0..n {
                        out[j] += r * (grow[j] - mean_g - yrow[j] * mean_gy);
                    }
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let c = sx[sx.len() - 1];
                let t = sx[sx.len() - 2];
                let batch = gy.len() / (t * c);
                let k = self.shape(*w)[1];
                let half = (k / 2) as isize;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                {
                    let gx = acc(grads, *x, gy.len());
                    for bi in 0..batch {
                        let base = bi * t * c;
                        for ti in 0..t {
                            let grow = &gy[base + ti * c..base + (ti + 1) * c];
                            for j in 0..k {
                                let src = ti as isize + j as isize - half;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let off = base + src as usize * c;
                                for ci in 0..c {
                                    gx[off + ci] += wd[ci * k + j] * grow[ci];
                                }
                            }
                        }
                    }
                }
                {
                    let gw = acc(grads, *w, c * k);
                    for bi in 0..batch {
                        let base = bi * t * c;
                        for ti in 0..t {
                            let grow = &gy[base + ti * c..base + (ti + 1) * c];
                            for j in 0..k {
                                let src = ti as isize + j as isize - half;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let off = base + src as usize * c;
                                for ci in 0..c {
                                    gw[ci * k + j] += xd[off + ci] * grow[ci];
                                }
                            }
                        }
                    }
                }
                let gb = acc(grads, *b, c);
                for chunk in gy.chunks(c) {
                    add_into(gb, chunk);
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = gy.len() / total;
                let mut off = 0;
                for &p in parts {
                    let wdt = self.value(p).last_dim();
                    let gp = acc(grads, p, rows * wdt);
                    for r in 0..rows {
                        add_into(&mut gp[r * wdt..(r + 1) * wdt], &gy[r * total + off..r * total + off + wdt]);
                    }
                    off += wdt;
                }
            }
            Op::Permute0213 { a } => {
                // the permutation is its own inverse on the swapped shape
                let s = node.value.shape();
                let back = permute_0213(gy, s);
                add_into(acc(grads, *a, gy.len()), &back);
            }
            Op::Reshape { a } => add_into(acc(grads, *a, gy.len()), gy),
            Op::SliceRows { a } => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                add_into(&mut ga[..gy.len()], gy);
            }
            Op::Dropout { a, mask } => {
                let ga = acc(grads, *a, gy.len());
                for idx in 0..gy.len() {
                    ga[idx] += gy[idx] * mask[idx];
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.value(*logits).data();
                let scale = gy[0] / z.len() as f64;
                let gz = acc(grads, *logits, z.len());
                for idx in 0..z.len() {
                    gz[idx] += scale * (sigmoid(z[idx]) - labels[idx]);
                }
            }
            Op::SumAll { a } => {
                let n = self.value(*a).len();
                for g in acc(grads, *a, n).iter_mut() {
                    *g += gy[0];
                }
            }
            Op::MeanAll { a } => {
                let n = self.value(*a).len();
                let d = gy[0] / n as f64;
                for g in acc(grads, *a, n).iter_mut() {
                    *g += d;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_0213(data: &[f64], s: &[usize]) -> Vec<f64> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; data.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let src = ((ai * b + bi) * c + ci) * d;
                let dst = ((ai * c + ci) * b + bi) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(z, 0) - z*y + ln(1 + e^{-|z|})`
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
