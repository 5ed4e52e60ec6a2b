//! Layers with explicit forward caches and backward passes. Activations are
//! flat row-major `rows x features` buffers.

use rayon::prelude::*;

use crate::params::impl_parameters;
use crate::tensor::{gemm, Scalar, Strides, Tensor};

/// Affine map `y = x·W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}
impl_parameters!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.input_dim(), self.output_dim());
        debug_assert_eq!(x.len(), rows * i);
        let mut y: Vec<T> = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.data);
        }
        gemm(rows, i, o, T::one(), x, Strides::rm(i), &self.weight.data, Strides::rm(o), T::one(), &mut y, Strides::rm(o));
        y
    }

    /// Accumulates parameter gradients into `grad`; writes (or adds, when
    /// `accumulate`) the input gradient into `dx` if given.
    pub fn backward(&self, grad: &mut Linear<T>, x: &[T], dy: &[T], rows: usize, dx: Option<(&mut [T], bool)>) {
        let (i, o) = (self.input_dim(), self.output_dim());
        gemm(i, rows, o, T::one(), x, Strides::tr(i), dy, Strides::rm(o), T::one(), &mut grad.weight.data, Strides::rm(o));
        for row in dy.chunks_exact(o) {
            for (g, &d) in grad.bias.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        if let Some((dx, accumulate)) = dx {
            let beta = if accumulate { T::one() } else { T::zero() };
            gemm(rows, o, i, T::one(), dy, Strides::rm(o), &self.weight.data, Strides::tr(o), beta, dx, Strides::rm(i));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}
impl_parameters!(LayerNorm { gamma, beta });

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise normalization to zero mean and unit (biased) variance.
pub fn normalize_rows<T: Scalar>(x: &[T], dim: usize, eps: T) -> LayerNormCache<T> {
    let rows = x.len() / dim;
    let n = T::from_usize(dim).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (src, dst) in x.chunks_exact(dim).zip(xhat.chunks_exact_mut(dim)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = (var + eps).sqrt().recip();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    LayerNormCache { xhat, rstd }
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(dim: usize) -> Self {
        let mut gamma = Tensor::zeros(&[dim]);
        gamma.fill(T::one());
        LayerNorm { gamma, beta: Tensor::zeros(&[dim]) }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &[T], eps: T) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim();
        let cache = normalize_rows(x, d, eps);
        let mut y = cache.xhat.clone();
        for row in y.chunks_exact_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(&self.gamma.data).zip(&self.beta.data) {
                *v = *v * g + b;
            }
        }
        (y, cache)
    }

    pub fn backward(&self, grad: &mut LayerNorm<T>, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let d = self.dim();
        let n = T::from_usize(d).unwrap();
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for (((dyr, xh), &r), dxr) in dy
            .chunks_exact(d)
            .zip(cache.xhat.chunks_exact(d))
            .zip(&cache.rstd)
            .zip(dx.chunks_exact_mut(d))
        {
            let mut sum = T::zero();
            let mut sum_x = T::zero();
            for c in 0..d {
                grad.gamma.data[c] += dyr[c] * xh[c];
                grad.beta.data[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gamma.data[c];
                sum += dxhat[c];
                sum_x += dxhat[c] * xh[c];
            }
            let mean = sum / n;
            let mean_x = sum_x / n;
            for c in 0..d {
                dxr[c] = r * (dxhat[c] - mean - xh[c] * mean_x);
            }
        }
        dx
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-T::lit(0.5) * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Numerically stable in-place softmax over `row`; `-inf` entries get zero mass.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head scaled dot-product self-attention over `seqs` independent
/// sequences of `seq_len` contiguous rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct Mhsa<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}
impl_parameters!(Mhsa { q, k, v, o });

#[derive(Debug, Clone, Copy)]
pub struct SeqLayout {
    pub seqs: usize,
    pub seq_len: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MhsaCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `seqs x heads x seq_len x seq_len` attention weights.
    pub probs: Vec<T>,
    ctx: Vec<T>,
}

impl<T: Scalar> Mhsa<T> {
    pub fn zeros(dim: usize) -> Self {
        Mhsa { q: Linear::zeros(dim, dim), k: Linear::zeros(dim, dim), v: Linear::zeros(dim, dim), o: Linear::zeros(dim, dim) }
    }

    /// `key_mask[s * seq_len + t]` set means key `t` of sequence `s` cannot be
    /// attended to. Returns the output, the cache and the number of
    /// multiply-accumulates spent on scores and value mixing.
    pub fn forward(&self, x: &[T], lay: SeqLayout, key_mask: Option<&[bool]>) -> (Vec<T>, MhsaCache<T>, u64) {
        let d = self.q.input_dim();
        let SeqLayout { seqs, seq_len: t, heads } = lay;
        let dh = d / heads;
        let rows = seqs * t;
        let scale = T::from_usize(dh).unwrap().sqrt().recip();
        let q = self.q.forward(x, rows);
        let k = self.k.forward(x, rows);
        let v = self.v.forward(x, rows);
        let mut probs = vec![T::zero(); seqs * heads * t * t];
        let mut ctx = vec![T::zero(); rows * d];

        let macs: u64 = ctx
            .par_chunks_mut(t * d)
            .zip(probs.par_chunks_mut(heads * t * t))
            .enumerate()
            .map(|(s, (ctx_s, probs_s))| {
                let base = s * t * d;
                let mut macs = 0u64;
                for h in 0..heads {
                    let off = base + h * dh;
                    let p = &mut probs_s[h * t * t..(h + 1) * t * t];
                    gemm(t, dh, t, scale, &q[off..], Strides::rm(d), &k[off..], Strides::tr(d), T::zero(), p, Strides::rm(t));
                    macs += (t * t * dh) as u64;
                    if let Some(mask) = key_mask {
                        let m = &mask[s * t..(s + 1) * t];
                        for row in p.chunks_exact_mut(t) {
                            for (v, &masked) in row.iter_mut().zip(m) {
                                if masked {
                                    *v = T::neg_infinity();
                                }
                            }
                        }
                    }
                    p.chunks_exact_mut(t).for_each(softmax_in_place);
                    gemm(t, t, dh, T::one(), p, Strides::rm(t), &v[off..], Strides::rm(d), T::zero(), &mut ctx_s[h * dh..], Strides::rm(d));
                    macs += (t * t * dh) as u64;
                }
                macs
            })
            .sum();

        let y = self.o.forward(&ctx, rows);
        (y, MhsaCache { q, k, v, probs, ctx }, macs)
    }

    pub fn backward(&self, grad: &mut Mhsa<T>, cache: &MhsaCache<T>, x: &[T], dy: &[T], lay: SeqLayout) -> Vec<T> {
        let d = self.q.input_dim();
        let SeqLayout { seqs, seq_len: t, heads } = lay;
        let dh = d / heads;
        let rows = seqs * t;
        let scale = T::from_usize(dh).unwrap().sqrt().recip();

        let mut dctx = vec![T::zero(); rows * d];
        self.o.backward(&mut grad.o, &cache.ctx, dy, rows, Some((&mut dctx, false)));

        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let (q, k, v) = (&cache.q, &cache.k, &cache.v);
        dq.par_chunks_mut(t * d)
            .zip(dk.par_chunks_mut(t * d))
            .zip(dv.par_chunks_mut(t * d))
            .enumerate()
            .for_each(|(s, ((dq_s, dk_s), dv_s))| {
                let base = s * t * d;
                let mut ds = vec![T::zero(); t * t];
                for h in 0..heads {
                    let off = base + h * dh;
                    let p = &cache.probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
                    let dc = &dctx[off..];
                    // dP = dctx · Vᵀ
                    gemm(t, dh, t, T::one(), dc, Strides::rm(d), &v[off..], Strides::tr(d), T::zero(), &mut ds, Strides::rm(t));
                    // dV = Pᵀ · dctx
                    gemm(t, t, dh, T::one(), p, Strides::tr(t), dc, Strides::rm(d), T::zero(), &mut dv_s[h * dh..], Strides::rm(d));
                    for (dsr, pr) in ds.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                        let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (g, &pv) in dsr.iter_mut().zip(pr) {
                            *g = pv * (*g - dot) * scale;
                        }
                    }
                    gemm(t, t, dh, T::one(), &ds, Strides::rm(t), &k[off..], Strides::rm(d), T::zero(), &mut dq_s[h * dh..], Strides::rm(d));
                    gemm(t, t, dh, T::one(), &ds, Strides::tr(t), &q[off..], Strides::rm(d), T::zero(), &mut dk_s[h * dh..], Strides::rm(d));
                }
            });

        let mut dx = vec![T::zero(); rows * d];
        self.q.backward(&mut grad.q, x, &dq, rows, Some((&mut dx, false)));
        self.k.backward(&mut grad.k, x, &dk, rows, Some((&mut dx, true)));
        self.v.backward(&mut grad.v, x, &dv, rows, Some((&mut dx, true)));
        dx
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
impl_parameters!(Mlp { fc1, fc2 });

#[derive(Debug, Clone, Default)]
pub struct MlpCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Mlp { fc1: Linear::zeros(dim, hidden), fc2: Linear::zeros(hidden, dim) }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.fc2.forward(&act, rows);
        (y, MlpCache { pre, act })
    }

    pub fn backward(&self, grad: &mut Mlp<T>, cache: &MlpCache<T>, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        let mut dact = vec![T::zero(); cache.act.len()];
        self.fc2.backward(&mut grad.fc2, &cache.act, dy, rows, Some((&mut dact, false)));
        for (g, &p) in dact.iter_mut().zip(&cache.pre) {
            *g *= gelu_grad(p);
        }
        let mut dx = vec![T::zero(); x.len()];
        self.fc1.backward(&mut grad.fc1, x, &dact, rows, Some((&mut dx, false)));
        dx
    }
}

/// Post-norm transformer block:
/// `h = LN1(x + MHSA(x))`, `y = LN2(h + MLP(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub mhsa: Mhsa<T>,
    pub ln1: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub ln2: LayerNorm<T>,
}
impl_parameters!(Block { mhsa, ln1, mlp, ln2 });

#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    x: Vec<T>,
    pub attn: MhsaCache<T>,
    ln1: LayerNormCache<T>,
    h: Vec<T>,
    mlp: MlpCache<T>,
    ln2: LayerNormCache<T>,
}

impl<T: Scalar> Block<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Block { mhsa: Mhsa::zeros(dim), ln1: LayerNorm::identity(dim), mlp: Mlp::zeros(dim, hidden), ln2: LayerNorm::identity(dim) }
    }

    pub fn forward(&self, x: Vec<T>, lay: SeqLayout, key_mask: Option<&[bool]>, eps: T) -> (Vec<T>, BlockCache<T>, u64) {
        let rows = lay.seqs * lay.seq_len;
        let (mut a, attn, macs) = self.mhsa.forward(&x, lay, key_mask);
        for (s, &xi) in a.iter_mut().zip(&x) {
            *s += xi;
        }
        let (h, ln1) = self.ln1.forward(&a, eps);
        let (mut m, mlp) = self.mlp.forward(&h, rows);
        for (s, &hi) in m.iter_mut().zip(&h) {
            *s += hi;
        }
        let (y, ln2) = self.ln2.forward(&m, eps);
        (y, BlockCache { x, attn, ln1, h, mlp, ln2 }, macs)
    }

    pub fn backward(&self, grad: &mut Block<T>, cache: &BlockCache<T>, dy: &[T], lay: SeqLayout) -> Vec<T> {
        let rows = lay.seqs * lay.seq_len;
        let dm = self.ln2.backward(&mut grad.ln2, &cache.ln2, dy);
        let mut dh = self.mlp.backward(&mut grad.mlp, &cache.mlp, &cache.h, &dm, rows);
        for (g, &r) in dh.iter_mut().zip(&dm) {
            *g += r;
        }
        let da = self.ln1.backward(&mut grad.ln1, &cache.ln1, &dh);
        let mut dx = self.mhsa.backward(&mut grad.mhsa, &cache.attn, &cache.x, &da, lay);
        for (g, &r) in dx.iter_mut().zip(&da) {
            *g += r;
        }
        dx
    }
}
