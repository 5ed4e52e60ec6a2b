//! Self-supervised objectives: masked-token prediction over the whole flow,
//! pairwise packet-order prediction from `[CLS]` vectors, and a cosine
//! contrastive loss that pulls packets of one flow together and pushes the
//! same positions of other flows away. The total is
//! `mfp + alpha * prpp + beta * fcl`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_backward, encode_flow_cached, extract_cls, scatter_cls_grad, FlowTensor, ModelParams, ProjectionHead, TokenBatch};
use crate::nn::{gelu, gelu_grad, softmax_in_place, LayerNormCache};
use crate::tensor::{gemm, Scalar, Strides, Tensor};
use crate::tokenizer::{is_content, TokenGrid, CONTENT_VOCAB, MASK};

pub const DEFAULT_MASK_RATIO: f64 = 0.15;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_BETA: f64 = 0.2;
/// Added to cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// How selected tokens are replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Always `[MASK]`.
    #[default]
    AlwaysMask,
    /// 80% `[MASK]`, 10% a random content token, 10% unchanged.
    Bert,
}

/// Which tokens of a grid were hidden and what they were.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    /// `(packet row, position)` pairs in row-major order.
    pub masked: Vec<(usize, usize)>,
    pub original_ids: Vec<u32>,
    pub content_tokens: usize,
}

impl MaskingPlan {
    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.content_tokens.max(1) as f64
    }
}

/// Selects each content token independently with probability `ratio`.
/// `[CLS]` and `[PAD]` are never selected.
pub fn apply_mfp_mask<R: Rng>(grid: &TokenGrid, ratio: f64, policy: MaskPolicy, rng: &mut R) -> Result<(TokenGrid, MaskingPlan)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let content_tokens = grid.content_tokens();
    if content_tokens == 0 {
        return Err(Error::NoContentTokens);
    }
    let mut out = grid.clone();
    let len = grid.len();
    let mut plan = MaskingPlan { content_tokens, ..Default::default() };
    for (n, id) in out.ids_mut().iter_mut().enumerate() {
        if !is_content(*id) || !rng.gen_bool(ratio) {
            continue;
        }
        plan.masked.push((n / len, n % len));
        plan.original_ids.push(*id);
        *id = match policy {
            MaskPolicy::AlwaysMask => MASK,
            MaskPolicy::Bert => {
                let r: f64 = rng.gen();
                if r < 0.8 {
                    MASK
                } else if r < 0.9 {
                    rng.gen_range(0..CONTENT_VOCAB)
                } else {
                    *id
                }
            }
        };
    }
    Ok((out, plan))
}

/// Cross-entropy of `hidden · tableᵀ + bias` against `targets`, averaged over
/// rows. With `grads`, accumulates `scale * ∂loss` into the table and bias
/// gradients and returns `scale * ∂loss/∂hidden`.
pub fn tied_softmax_cross_entropy<T: Scalar>(
    table: &Tensor<T>,
    bias: &Tensor<T>,
    hidden: &[T],
    targets: &[u32],
    grads: Option<(&mut Tensor<T>, &mut Tensor<T>, T)>,
) -> Result<(f64, Vec<T>)> {
    const CHUNK: usize = 64;
    let (vocab, d) = (table.shape[0], table.shape[1]);
    let rows = targets.len();
    if rows == 0 {
        return Err(Error::EmptyPlan);
    }
    if hidden.len() != rows * d {
        return Err(Error::ShapeMismatch(format!("{} hidden values for {rows} rows of {d}", hidden.len())));
    }
    let mut loss = 0.0f64;
    let mut d_hidden = Vec::new();
    let mut grads = grads;
    if grads.is_some() {
        d_hidden = vec![T::zero(); rows * d];
    }
    let inv_rows = T::from_usize(rows).unwrap().recip();
    let mut logits = vec![T::zero(); CHUNK.min(rows) * vocab];
    for start in (0..rows).step_by(CHUNK) {
        let c = CHUNK.min(rows - start);
        let h = &hidden[start * d..(start + c) * d];
        let lg = &mut logits[..c * vocab];
        for row in lg.chunks_exact_mut(vocab) {
            row.copy_from_slice(&bias.data);
        }
        gemm(c, d, vocab, T::one(), h, Strides::rm(d), &table.data, Strides::tr(d), T::one(), lg, Strides::rm(vocab));
        for (row, &target) in lg.chunks_exact_mut(vocab).zip(&targets[start..start + c]) {
            let target = target as usize;
            if target >= vocab {
                return Err(Error::IdOutOfRange { id: target as u32, vocab_size: vocab });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: f64 = row.iter().map(|&v| (v - max).to_f64().unwrap().exp()).sum();
            loss += max.to_f64().unwrap() + sum.ln() - row[target].to_f64().unwrap();
            if grads.is_some() {
                softmax_in_place(row);
                row[target] -= T::one();
            }
        }
        if let Some((d_table, d_bias, scale)) = grads.as_mut() {
            let s = *scale * inv_rows;
            for v in lg.iter_mut() {
                *v *= s;
            }
            for row in lg.chunks_exact(vocab) {
                for (g, &v) in d_bias.data.iter_mut().zip(row) {
                    *g += v;
                }
            }
            gemm(c, vocab, d, T::one(), lg, Strides::rm(vocab), &table.data, Strides::rm(d), T::zero(), &mut d_hidden[start * d..], Strides::rm(d));
            gemm(vocab, c, d, T::one(), lg, Strides::tr(vocab), h, Strides::rm(d), T::one(), &mut d_table.data, Strides::rm(d));
        }
    }
    Ok((loss / rows as f64, d_hidden))
}

/// Encoder outputs at the masked positions of each flow, with their targets.
pub fn gather_masked<T: Scalar>(x: &FlowTensor<T>, plans: &[MaskingPlan]) -> Result<(Vec<T>, Vec<u32>, Vec<usize>)> {
    if plans.len() != x.batch {
        return Err(Error::ShapeMismatch(format!("{} plans for a batch of {}", plans.len(), x.batch)));
    }
    let mut hidden = Vec::new();
    let mut targets = Vec::new();
    let mut rows = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        for (&(i, j), &id) in plan.masked.iter().zip(&plan.original_ids) {
            hidden.extend_from_slice(x.at(b, i, j));
            targets.push(id);
            rows.push((b * x.packets + i) * x.len + j);
        }
    }
    Ok((hidden, targets, rows))
}

/// Mean masked-token cross-entropy using the tied output layer.
pub fn mfp_loss<T: Scalar>(params: &ModelParams<T>, x: &FlowTensor<T>, plans: &[MaskingPlan]) -> Result<f64> {
    let (hidden, targets, _) = gather_masked(x, plans)?;
    tied_softmax_cross_entropy(&params.embeddings.value, &params.heads.mlm.bias, &hidden, &targets, None).map(|(l, _)| l)
}

/// Intermediate values of `LayerNorm(GELU(x·W1 + b1))`.
#[derive(Debug, Clone, Default)]
pub struct ProjectionCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    ln: LayerNormCache<T>,
    /// Post-LayerNorm representation.
    pub hidden: Vec<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn hidden_forward(&self, x: &[T], rows: usize, eps: T) -> ProjectionCache<T> {
        let pre = self.fc1.forward(x, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let (hidden, ln) = self.ln.forward(&act, eps);
        ProjectionCache { input: x.to_vec(), pre, ln, hidden }
    }

    pub fn hidden_backward(&self, grad: &mut ProjectionHead<T>, cache: &ProjectionCache<T>, d_hidden: &[T], rows: usize) -> Vec<T> {
        let mut d_act = self.ln.backward(&mut grad.ln, &cache.ln, d_hidden);
        for (g, &p) in d_act.iter_mut().zip(&cache.pre) {
            *g *= gelu_grad(p);
        }
        let mut dx = vec![T::zero(); cache.input.len()];
        self.fc1.backward(&mut grad.fc1, &cache.input, &d_act, rows, Some((&mut dx, false)));
        dx
    }
}

/// Order-prediction logits, `(batch, packets, packets, 2)`. Entry `[b, i, j]`
/// is `(P_i − P_j)·W2 + b2` with `P = LayerNorm(GELU(cls·W1 + b1))`; class 1
/// means packet `i` precedes packet `j`. Diagonal entries hold `b2` and are
/// never used.
pub fn prpp_logits<T: Scalar>(cls: &[T], batch: usize, packets: usize, head: &ProjectionHead<T>, eps: T) -> Result<(Vec<T>, ProjectionCache<T>)> {
    let d = head.fc1.input_dim();
    if packets < 2 {
        return Err(Error::ShapeMismatch(format!("order prediction needs 2 packets, got {packets}")));
    }
    if cls.len() != batch * packets * d || head.fc2.output_dim() != 2 {
        return Err(Error::ShapeMismatch(format!("{} cls values for ({batch}, {packets}, {d})", cls.len())));
    }
    let rows = batch * packets;
    let cache = head.hidden_forward(cls, rows, eps);
    let mut u = vec![T::zero(); rows * 2];
    gemm(rows, d, 2, T::one(), &cache.hidden, Strides::rm(d), &head.fc2.weight.data, Strides::rm(2), T::zero(), &mut u, Strides::rm(2));
    let b2 = &head.fc2.bias.data;
    let mut logits = vec![T::zero(); batch * packets * packets * 2];
    for b in 0..batch {
        for i in 0..packets {
            for j in 0..packets {
                let o = ((b * packets + i) * packets + j) * 2;
                let (ui, uj) = ((b * packets + i) * 2, (b * packets + j) * 2);
                for c in 0..2 {
                    logits[o + c] = u[ui + c] - u[uj + c] + b2[c];
                }
            }
        }
    }
    Ok((logits, cache))
}

/// Checks that `order` is a permutation of `0..n`.
pub fn validate_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::InvalidPermutation(order.to_vec()));
    }
    for &r in order {
        if r >= n || std::mem::replace(&mut seen[r], true) {
            return Err(Error::InvalidPermutation(order.to_vec()));
        }
    }
    Ok(())
}

/// `z_ij = 1` iff the packet in row `i` arrived before the one in row `j`.
pub fn prpp_labels(order: &[usize]) -> Vec<Vec<bool>> {
    order.iter().map(|&ri| order.iter().map(|&rj| ri < rj).collect()).collect()
}

/// Binary cross-entropy summed over ordered pairs `i != j`, averaged over the
/// batch. `orders[b][i]` is the arrival rank of row `i` of flow `b`. Returns
/// the loss and `scale * ∂loss/∂logits`.
pub fn prpp_loss<T: Scalar>(logits: &[T], orders: &[Vec<usize>], packets: usize, scale: T) -> Result<(f64, Vec<T>)> {
    let batch = orders.len();
    if logits.len() != batch * packets * packets * 2 {
        return Err(Error::ShapeMismatch(format!("{} logits for {batch} flows of {packets}", logits.len())));
    }
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); logits.len()];
    let g_scale = scale / T::from_usize(batch).unwrap();
    for (b, order) in orders.iter().enumerate() {
        validate_order(order, packets)?;
        let z = prpp_labels(order);
        for i in 0..packets {
            for j in 0..packets {
                if i == j {
                    continue;
                }
                let o = ((b * packets + i) * packets + j) * 2;
                let mut p = [logits[o], logits[o + 1]];
                let target = usize::from(z[i][j]);
                let (l0, l1) = (p[0].to_f64().unwrap(), p[1].to_f64().unwrap());
                let m = l0.max(l1);
                let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                loss -= [l0, l1][target] - lse;
                softmax_in_place(&mut p);
                p[target] -= T::one();
                grad[o] = p[0] * g_scale;
                grad[o + 1] = p[1] * g_scale;
            }
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Back-propagates order-prediction logit gradients through the head into
/// the `[CLS]` inputs.
pub fn prpp_backward<T: Scalar>(
    head: &ProjectionHead<T>,
    grad: &mut ProjectionHead<T>,
    cache: &ProjectionCache<T>,
    d_logits: &[T],
    batch: usize,
    packets: usize,
) -> Vec<T> {
    let d = head.fc1.input_dim();
    let rows = batch * packets;
    let mut du = vec![T::zero(); rows * 2];
    for b in 0..batch {
        for i in 0..packets {
            for j in 0..packets {
                if i == j {
                    continue;
                }
                let o = ((b * packets + i) * packets + j) * 2;
                for c in 0..2 {
                    let g = d_logits[o + c];
                    du[(b * packets + i) * 2 + c] += g;
                    du[(b * packets + j) * 2 + c] -= g;
                    grad.fc2.bias.data[c] += g;
                }
            }
        }
    }
    gemm(d, rows, 2, T::one(), &cache.hidden, Strides::tr(d), &du, Strides::rm(2), T::one(), &mut grad.fc2.weight.data, Strides::rm(2));
    let mut dp = vec![T::zero(); rows * d];
    gemm(rows, 2, d, T::one(), &du, Strides::rm(2), &head.fc2.weight.data, Strides::tr(2), T::zero(), &mut dp, Strides::rm(d));
    head.hidden_backward(grad, cache, &dp, rows)
}

/// `LayerNorm(GELU(cls·W3 + b3))·W4 + b4` for every `[CLS]` vector.
pub fn fcl_projection<T: Scalar>(cls: &[T], rows: usize, head: &ProjectionHead<T>, eps: T) -> Result<(Vec<T>, ProjectionCache<T>)> {
    let d = head.fc1.input_dim();
    if cls.len() != rows * d {
        return Err(Error::ShapeMismatch(format!("{} cls values for {rows} rows of {d}", cls.len())));
    }
    let cache = head.hidden_forward(cls, rows, eps);
    let c = head.fc2.forward(&cache.hidden, rows);
    Ok((c, cache))
}

/// Contrastive loss value: `sum` is the canonical objective; `mean` divides it
/// by the `terms = batch · packets · (packets − 1)` anchor/positive pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FclLoss {
    pub sum: f64,
    pub mean: f64,
    pub terms: usize,
}

/// For each flow `i1` and ordered position pair `j1 != j2`, the positive is
/// `S(i1 j1, i1 j2)` and the negatives are `S(i1 j1, i2 j2)` over the other
/// flows `i2`; the loss is the summed softmax cross-entropy of picking the
/// positive. `S` is cosine similarity without temperature. With `scale`
/// given, also returns `scale * ∂loss/∂C`.
pub fn fcl_loss<T: Scalar>(c: &[T], batch: usize, packets: usize, dim: usize, scale: Option<T>) -> Result<(FclLoss, Vec<T>)> {
    if batch < 2 || packets < 2 {
        return Err(Error::DegenerateBatch { batch, packets });
    }
    if c.len() != batch * packets * dim {
        return Err(Error::ShapeMismatch(format!("{} values for ({batch}, {packets}, {dim})", c.len())));
    }
    let count = batch * packets;
    let eps = T::lit(COSINE_EPS);
    let vec_at = |a: usize| &c[a * dim..(a + 1) * dim];
    let norms: Vec<T> = (0..count).map(|a| vec_at(a).iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
    let mut sim = vec![T::zero(); count * count];
    gemm(count, dim, count, T::one(), c, Strides::rm(dim), c, Strides::tr(dim), T::zero(), &mut sim, Strides::rm(count));
    let dots = sim.clone();
    for a in 0..count {
        for b in 0..count {
            sim[a * count + b] = dots[a * count + b] / (norms[a] * norms[b] + eps);
        }
    }

    let mut total = 0.0;
    let mut d_sim = vec![T::zero(); if scale.is_some() { count * count } else { 0 }];
    let mut logits = vec![T::zero(); batch];
    let mut targets = vec![0usize; batch];
    for i1 in 0..batch {
        for j1 in 0..packets {
            let a = i1 * packets + j1;
            for j2 in 0..packets {
                if j2 == j1 {
                    continue;
                }
                // slot 0 is the positive, then the other flows in order
                targets[0] = i1 * packets + j2;
                let mut k = 1;
                for i2 in (0..batch).filter(|&i2| i2 != i1) {
                    targets[k] = i2 * packets + j2;
                    k += 1;
                }
                for (l, &t) in logits.iter_mut().zip(&targets) {
                    *l = sim[a * count + t];
                }
                let vals: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
                let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - vals[0];
                if let Some(s) = scale {
                    softmax_in_place(&mut logits);
                    logits[0] -= T::one();
                    for (&g, &t) in logits.iter().zip(&targets) {
                        d_sim[a * count + t] += g * s;
                    }
                }
            }
        }
    }

    let mut d_c = Vec::new();
    if scale.is_some() {
        d_c = vec![T::zero(); c.len()];
        for a in 0..count {
            for b in 0..count {
                let g = d_sim[a * count + b];
                if g == T::zero() {
                    continue;
                }
                let denom = norms[a] * norms[b] + eps;
                let dot = dots[a * count + b];
                let coef = dot / (denom * denom);
                // ∂S/∂c_a = c_b/D − dot·n_b·ĉ_a/D²
                let sa = if norms[a] > T::zero() { coef * norms[b] / norms[a] } else { T::zero() };
                let sb = if norms[b] > T::zero() { coef * norms[a] / norms[b] } else { T::zero() };
                for k in 0..dim {
                    let (ca, cb) = (c[a * dim + k], c[b * dim + k]);
                    d_c[a * dim + k] += g * (cb / denom - sa * ca);
                    d_c[b * dim + k] += g * (ca / denom - sb * cb);
                }
            }
        }
    }
    let terms = batch * packets * (packets - 1);
    Ok((FclLoss { sum: total, mean: total / terms as f64, terms }, d_c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mfp: f64,
    pub prpp: f64,
    pub fcl: f64,
    /// Contrastive loss divided by its term count, for logging.
    pub fcl_mean: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn combined_pretrain_loss(mfp: f64, prpp: f64, fcl: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        mfp,
        prpp,
        fcl,
        fcl_mean: f64::NAN,
        total: mfp + weights.alpha * prpp + weights.beta * fcl,
        alpha: weights.alpha,
        beta: weights.beta,
    }
}

/// A pre-training batch: rows shuffled, tokens masked.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub tokens: TokenBatch,
    pub plans: Vec<MaskingPlan>,
    /// `orders[b][i]`: arrival rank of the packet now in row `i` of flow `b`.
    pub orders: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub policy: MaskPolicy,
    pub shuffle_packets: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { ratio: DEFAULT_MASK_RATIO, policy: MaskPolicy::AlwaysMask, shuffle_packets: true }
    }
}

impl PretrainBatch {
    pub fn prepare<R: Rng>(grids: &[TokenGrid], cfg: &MaskingConfig, rng: &mut R) -> Result<Self> {
        let mut masked = Vec::with_capacity(grids.len());
        let mut plans = Vec::with_capacity(grids.len());
        let mut orders = Vec::with_capacity(grids.len());
        for g in grids {
            let mut order: Vec<usize> = (0..g.packets()).collect();
            if cfg.shuffle_packets {
                order.shuffle(rng);
            }
            let shuffled = g.permute_rows(&order);
            let (m, plan) = apply_mfp_mask(&shuffled, cfg.ratio, cfg.policy, rng)?;
            masked.push(m);
            plans.push(plan);
            orders.push(order);
        }
        Ok(PretrainBatch { tokens: TokenBatch::from_grids(&masked)?, plans, orders })
    }
}

/// Forward pass of the combined objective; with `grads`, also accumulates the
/// gradient of `total` into every parameter it touches.
pub fn pretrain_objective<T: Scalar>(
    params: &ModelParams<T>,
    batch: &PretrainBatch,
    weights: LossWeights,
    grads: Option<&mut ModelParams<T>>,
) -> Result<LossBreakdown> {
    let cfg = params.config;
    let (b, n, l, d) = (batch.tokens.batch, cfg.packets, cfg.len, cfg.dim);
    let eps = T::lit(cfg.layernorm_eps);
    let want = grads.is_some();
    let (x, cache) = encode_flow_cached(params, &batch.tokens)?;

    let (hidden, targets, rows) = gather_masked(&x, &batch.plans)?;
    let mut grads = grads;
    let (mfp, d_hidden) = {
        let g = grads.as_deref_mut().map(|g| (&mut g.embeddings.value, &mut g.heads.mlm.bias, T::one()));
        tied_softmax_cross_entropy(&params.embeddings.value, &params.heads.mlm.bias, &hidden, &targets, g)?
    };

    let cls = extract_cls(&x);
    let (prpp_lg, prpp_cache) = prpp_logits(&cls, b, n, &params.heads.prpp, eps)?;
    let (prpp, d_prpp) = prpp_loss(&prpp_lg, &batch.orders, n, T::lit(weights.alpha))?;
    let (c, fcl_cache) = fcl_projection(&cls, b * n, &params.heads.fcl, eps)?;
    let (fcl, d_c) = fcl_loss(&c, b, n, d, want.then(|| T::lit(weights.beta)))?;

    let mut out = combined_pretrain_loss(mfp, prpp, fcl.sum, weights);
    out.fcl_mean = fcl.mean;

    if let Some(g) = grads {
        let mut d_out = vec![T::zero(); b * n * l * d];
        for (r, dh) in rows.iter().zip(d_hidden.chunks_exact(d)) {
            for (o, &v) in d_out[r * d..(r + 1) * d].iter_mut().zip(dh) {
                *o += v;
            }
        }
        let d_cls_prpp = prpp_backward(&params.heads.prpp, &mut g.heads.prpp, &prpp_cache, &d_prpp, b, n);
        let mut d_proj = vec![T::zero(); b * n * d];
        params.heads.fcl.fc2.backward(&mut g.heads.fcl.fc2, &fcl_cache.hidden, &d_c, b * n, Some((&mut d_proj, false)));
        let d_cls_fcl = params.heads.fcl.hidden_backward(&mut g.heads.fcl, &fcl_cache, &d_proj, b * n);
        let d_cls: Vec<T> = d_cls_prpp.iter().zip(&d_cls_fcl).map(|(&a, &c)| a + c).collect();
        scatter_cls_grad(&mut d_out, &d_cls, b, n, l, d);
        encode_backward(params, g, &cache, d_out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_token_grid, CLS, PAD, VOCAB_SIZE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masking_skips_specials_and_is_seeded() {
        let g = build_token_grid(&[vec![1u8; 40], vec![2u8; 3]], 4, 16).unwrap();
        let run = |seed| apply_mfp_mask(&g, 0.5, MaskPolicy::AlwaysMask, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (m, plan) = run(3);
        assert_eq!(run(3), (m.clone(), plan.clone()));
        assert_eq!(plan.content_tokens, 15 + 2);
        for (&(i, j), &orig) in plan.masked.iter().zip(&plan.original_ids) {
            assert_eq!(m.get(i, j), MASK);
            assert_eq!(g.get(i, j), orig);
            assert!(is_content(orig));
        }
        for (a, b) in g.ids().iter().zip(m.ids()) {
            if *a == CLS || *a == PAD {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn masking_needs_content() {
        let g = build_token_grid(&[vec![7u8]], 2, 4).unwrap();
        let r = apply_mfp_mask(&g, 0.15, MaskPolicy::AlwaysMask, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::NoContentTokens)));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let table = Tensor::<f64>::zeros(&[VOCAB_SIZE, 4]);
        let bias = Tensor::<f64>::zeros(&[VOCAB_SIZE]);
        let (loss, _) = tied_softmax_cross_entropy(&table, &bias, &[0.3; 12], &[5, 65_000, 9], None).unwrap();
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-9);
        let bad = tied_softmax_cross_entropy(&table, &bias, &[0.3; 4], &[70_000], None);
        assert!(matches!(bad, Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn empty_plan_rejected() {
        let t = Tensor::<f32>::zeros(&[10, 2]);
        let b = Tensor::<f32>::zeros(&[10]);
        assert!(matches!(tied_softmax_cross_entropy(&t, &b, &[], &[], None), Err(Error::EmptyPlan)));
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut table = Tensor::<f64>::zeros(&[6, 2]);
        table.data[3 * 2] = 50.0;
        let bias = Tensor::<f64>::zeros(&[6]);
        let (loss, _) = tied_softmax_cross_entropy(&table, &bias, &[1.0, 0.0], &[3], None).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn combined_arithmetic() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta), (0.2, 0.2));
        assert!((combined_pretrain_loss(1.0, 2.0, 3.0, w).total - 2.0).abs() < 1e-15);
        assert_eq!(combined_pretrain_loss(1.5, 2.0, 3.0, LossWeights { alpha: 0.0, beta: 0.0 }).total, 1.5);
    }

    #[test]
    fn prpp_labels_are_antisymmetric() {
        let z = prpp_labels(&[2, 0, 3, 1]);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(u8::from(z[i][j]) + u8::from(z[j][i]), 1);
                }
            }
        }
        assert!(z[1][0] && !z[0][1]);
        assert!(matches!(validate_order(&[0, 0, 1], 3), Err(Error::InvalidPermutation(_))));
        assert!(validate_order(&[0, 1], 3).is_err());
    }

    #[test]
    fn uninformative_prpp_is_pairs_ln2() {
        let n = 5;
        let logits = vec![0.0f64; 2 * n * n * 2];
        let orders = vec![vec![0, 1, 2, 3, 4], vec![4, 2, 0, 1, 3]];
        let (loss, _) = prpp_loss(&logits, &orders, n, 1.0).unwrap();
        assert!((loss - 20.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fcl_closed_forms() {
        let (b, n, d) = (4, 5, 3);
        let same = vec![0.5f64; b * n * d];
        let (l, _) = fcl_loss(&same, b, n, d, None).unwrap();
        assert!((l.sum - (b * n * (n - 1)) as f64 * (b as f64).ln()).abs() < 1e-9);
        assert_eq!(l.terms, 80);

        let mut ortho = vec![0.0f64; 2 * 3 * 2];
        for j in 0..3 {
            ortho[j * 2] = 1.0;
            ortho[(3 + j) * 2 + 1] = 2.0;
        }
        let (l, _) = fcl_loss(&ortho, 2, 3, 2, None).unwrap();
        let per = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l.mean - per).abs() < 1e-7);
        assert!(matches!(fcl_loss(&[0.0f64; 4], 1, 2, 2, None), Err(Error::DegenerateBatch { .. })));
    }

    #[test]
    fn fcl_gradient_matches_finite_differences() {
        let (b, n, d) = (3, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c: Vec<f64> = (0..b * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = fcl_loss(&c, b, n, d, Some(1.0)).unwrap();
        for k in 0..c.len() {
            let f = |delta: f64| {
                let mut cc = c.clone();
                cc[k] += delta;
                fcl_loss(&cc, b, n, d, None).unwrap().0.sum
            };
            let num = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((num - g[k]).abs() < 1e-7 * num.abs().max(1.0), "{k}: {num} vs {}", g[k]);
        }
    }
}
