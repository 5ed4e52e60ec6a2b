//! Flow classification: mean-pool the per-packet `[CLS]` vectors, apply a
//! two-layer head, train with softmax cross-entropy, and score with accuracy
//! and F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_backward, encode_flow, encode_flow_cached, extract_cls, scatter_cls_grad, ClassifierHead, FlowTensor, ModelParams, TokenBatch};
use crate::nn::{gelu, gelu_grad, softmax_in_place};
use crate::tensor::Scalar;
use crate::tokenizer::{TokenDataset, TokenGrid};

/// Which packet rows enter the `[CLS]` mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every row, padding included.
    #[default]
    AllRows,
    /// Only rows holding a real packet.
    RealRows,
}

/// Per-flow number of rows to average over.
pub fn pooling_counts(grids: &[TokenGrid], pooling: Pooling) -> Vec<usize> {
    grids
        .iter()
        .map(|g| match pooling {
            Pooling::AllRows => g.packets(),
            Pooling::RealRows => g.real_rows().max(1),
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ClassifierCache<T> {
    pooled: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    counts: Vec<usize>,
}

/// Averages the first `counts[b]` `[CLS]` vectors of each flow.
pub fn mean_pool<T: Scalar>(cls: &[T], packets: usize, dim: usize, counts: &[usize]) -> Result<Vec<T>> {
    let batch = counts.len();
    if cls.len() != batch * packets * dim {
        return Err(Error::ShapeMismatch(format!("{} cls values for ({batch}, {packets}, {dim})", cls.len())));
    }
    let mut out = vec![T::zero(); batch * dim];
    for (b, &n) in counts.iter().enumerate() {
        if n == 0 || n > packets {
            return Err(Error::ShapeMismatch(format!("pooling {n} of {packets} rows")));
        }
        let inv = T::from_usize(n).unwrap().recip();
        let dst = &mut out[b * dim..(b + 1) * dim];
        for i in 0..n {
            for (o, &v) in dst.iter_mut().zip(&cls[(b * packets + i) * dim..]) {
                *o += v * inv;
            }
        }
    }
    Ok(out)
}

/// `(batch, classes)` logits for encoded flows. `counts` defaults to pooling
/// every row.
pub fn classify_flow<T: Scalar>(x: &FlowTensor<T>, head: &ClassifierHead<T>, counts: Option<&[usize]>) -> Result<(Vec<T>, ClassifierCache<T>)> {
    if head.fc1.input_dim() != x.dim {
        return Err(Error::ShapeMismatch(format!("head expects dim {}, encoder gives {}", head.fc1.input_dim(), x.dim)));
    }
    let counts = counts.map_or_else(|| vec![x.packets; x.batch], <[usize]>::to_vec);
    if counts.len() != x.batch {
        return Err(Error::ShapeMismatch(format!("{} pooling counts for a batch of {}", counts.len(), x.batch)));
    }
    let pooled = mean_pool(&extract_cls(x), x.packets, x.dim, &counts)?;
    let pre = head.fc1.forward(&pooled, x.batch);
    let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
    let logits = head.fc2.forward(&act, x.batch);
    Ok((logits, ClassifierCache { pooled, pre, act, counts }))
}

/// Returns the `(batch, packets, dim)` gradient on the `[CLS]` vectors.
pub fn classifier_backward<T: Scalar>(
    head: &ClassifierHead<T>,
    grad: &mut ClassifierHead<T>,
    cache: &ClassifierCache<T>,
    d_logits: &[T],
    packets: usize,
) -> Vec<T> {
    let batch = cache.counts.len();
    let dim = head.fc1.input_dim();
    let mut d_act = vec![T::zero(); batch * dim];
    head.fc2.backward(&mut grad.fc2, &cache.act, d_logits, batch, Some((&mut d_act, false)));
    for (g, &p) in d_act.iter_mut().zip(&cache.pre) {
        *g *= gelu_grad(p);
    }
    let mut d_pooled = vec![T::zero(); batch * dim];
    head.fc1.backward(&mut grad.fc1, &cache.pooled, &d_act, batch, Some((&mut d_pooled, false)));
    let mut d_cls = vec![T::zero(); batch * packets * dim];
    for (b, &n) in cache.counts.iter().enumerate() {
        let inv = T::from_usize(n).unwrap().recip();
        for i in 0..n {
            for (o, &g) in d_cls[(b * packets + i) * dim..].iter_mut().zip(&d_pooled[b * dim..(b + 1) * dim]) {
                *o = g * inv;
            }
        }
    }
    d_cls
}

/// Softmax cross-entropy averaged over the batch, with `∂loss/∂logits`.
pub fn finetune_loss<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> Result<(f64, Vec<T>)> {
    if labels.is_empty() || logits.len() != labels.len() * classes {
        return Err(Error::ShapeMismatch(format!("{} logits for {} labels of {classes} classes", logits.len(), labels.len())));
    }
    let inv = T::from_usize(labels.len()).unwrap().recip();
    let mut loss = 0.0;
    let mut grad = logits.to_vec();
    for (row, &y) in grad.chunks_exact_mut(classes).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y as i64, classes });
        }
        let vals: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        loss += m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - vals[y];
        softmax_in_place(row);
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss / labels.len() as f64, grad))
}

/// Cross-entropy of the classifier on a labeled batch; with `grads`,
/// accumulates the full gradient.
pub fn finetune_objective<T: Scalar>(
    params: &ModelParams<T>,
    grids: &[TokenGrid],
    labels: &[usize],
    pooling: Pooling,
    grads: Option<&mut ModelParams<T>>,
) -> Result<f64> {
    let head = params.classifier.as_ref().ok_or_else(|| Error::InvalidConfig("model has no classifier head".into()))?;
    let batch = TokenBatch::from_grids(grids)?;
    let counts = pooling_counts(grids, pooling);
    let (x, cache) = encode_flow_cached(params, &batch)?;
    let (logits, head_cache) = classify_flow(&x, head, Some(&counts))?;
    let (loss, d_logits) = finetune_loss(&logits, labels, head.classes())?;
    if let Some(g) = grads {
        let g_head = g.classifier.as_mut().ok_or_else(|| Error::InvalidConfig("gradient buffer has no classifier head".into()))?;
        let d_cls = classifier_backward(head, g_head, &head_cache, &d_logits, x.packets);
        let mut d_out = vec![T::zero(); x.data.len()];
        scatter_cls_grad(&mut d_out, &d_cls, x.batch, x.packets, x.len, x.dim);
        encode_backward(params, g, &cache, d_out);
    }
    Ok(loss)
}

/// Arg-max class of every record, in dataset order.
pub fn predict<T: Scalar>(params: &ModelParams<T>, dataset: &TokenDataset, batch_size: usize, pooling: Pooling) -> Result<Vec<usize>> {
    let head = params.classifier.as_ref().ok_or_else(|| Error::InvalidConfig("model has no classifier head".into()))?;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.records.chunks(batch_size.max(1)) {
        let grids: Vec<TokenGrid> = chunk.iter().map(|r| r.grid.clone()).collect();
        let x = encode_flow(params, &TokenBatch::from_grids(&grids)?)?;
        let counts = pooling_counts(&grids, pooling);
        let (logits, _) = classify_flow(&x, head, Some(&counts))?;
        out.extend(logits.chunks_exact(head.classes()).map(argmax));
    }
    Ok(out)
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification metrics. Macro-F1 averages only classes with nonzero
/// support; those without are listed in `unsupported`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: usize,
    pub total: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub unsupported: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != predictions.len() {
            return Err(Error::ShapeMismatch(format!("{} labels, {} predictions", labels.len(), predictions.len())));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= classes || p >= classes {
                return Err(Error::LabelOutOfRange { label: y.max(p) as i64, classes });
            }
            confusion[y][p] += 1;
        }
        let total = labels.len();
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<usize> = (0..classes).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision: Vec<f64> = (0..classes).map(|c| ratio(confusion[c][c], predicted[c])).collect();
        let recall: Vec<f64> = (0..classes).map(|c| ratio(confusion[c][c], support[c])).collect();
        let f1: Vec<f64> = precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            .collect();
        let supported: Vec<usize> = (0..classes).filter(|&c| support[c] > 0).collect();
        let unsupported = (0..classes).filter(|&c| support[c] == 0).collect();
        let macro_f1 = supported.iter().map(|&c| f1[c]).sum::<f64>() / supported.len() as f64;
        let weighted_f1 = (0..classes).map(|c| f1[c] * support[c] as f64).sum::<f64>() / total as f64;
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(EvalReport {
            classes,
            total,
            accuracy: correct as f64 / total as f64,
            macro_f1,
            weighted_f1,
            precision,
            recall,
            f1,
            support,
            confusion,
            unsupported,
        })
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "flows        {}", self.total);
        let _ = writeln!(s, "accuracy     {:.4}", self.accuracy);
        let _ = writeln!(s, "macro_f1     {:.4}", self.macro_f1);
        let _ = writeln!(s, "weighted_f1  {:.4}", self.weighted_f1);
        let _ = writeln!(s, "\nclass  precision  recall  f1      support");
        for c in 0..self.classes {
            let _ = writeln!(
                s,
                "{c:<5}  {:<9.4}  {:<6.4}  {:<6.4}  {}",
                self.precision[c], self.recall[c], self.f1[c], self.support[c]
            );
        }
        if !self.unsupported.is_empty() {
            let _ = writeln!(s, "\nno support (excluded from macro_f1): {:?}", self.unsupported);
        }
        let _ = writeln!(s, "\nconfusion (rows: true, cols: predicted)");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
        s
    }

    /// One `key=value` pair per line.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total={}", self.total);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "macro_f1={}", self.macro_f1);
        let _ = writeln!(s, "weighted_f1={}", self.weighted_f1);
        for c in 0..self.classes {
            let _ = writeln!(s, "class.{c}.precision={}", self.precision[c]);
            let _ = writeln!(s, "class.{c}.recall={}", self.recall[c]);
            let _ = writeln!(s, "class.{c}.f1={}", self.f1[c]);
            let _ = writeln!(s, "class.{c}.support={}", self.support[c]);
            let row: Vec<String> = self.confusion[c].iter().map(usize::to_string).collect();
            let _ = writeln!(s, "confusion.{c}={}", row.join(","));
        }
        s
    }
}

/// Scores the classifier on every labeled record.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, dataset: &TokenDataset, batch_size: usize, pooling: Pooling) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = params.classifier.as_ref().map_or(0, ClassifierHead::classes);
    let labels = dataset_labels(dataset, classes)?;
    let preds = predict(params, dataset, batch_size, pooling)?;
    EvalReport::from_predictions(&labels, &preds, classes)
}

/// Labels of a dataset as class indices, checked against `classes`.
pub fn dataset_labels(dataset: &TokenDataset, classes: usize) -> Result<Vec<usize>> {
    dataset
        .records
        .iter()
        .map(|r| match r.label {
            Some(l) if (l as usize) < classes => Ok(l as usize),
            Some(l) => Err(Error::LabelOutOfRange { label: l as i64, classes }),
            None => Err(Error::Dataset("record without a label".into())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_cost_log_classes() {
        let (loss, _) = finetune_loss(&[0.25f64; 12], &[0, 5], 6).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!(matches!(finetune_loss(&[0.0f64; 6], &[6], 6), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 17.5).collect();
        let (a, _) = finetune_loss(&logits, &[1, 2, 0], 4).unwrap();
        let (b, _) = finetune_loss(&shifted, &[1, 2, 0], 4).unwrap();
        assert!((a - b).abs() < 1e-6);
        for (r, s) in logits.chunks(4).zip(shifted.chunks(4)) {
            assert_eq!(argmax(r), argmax(s));
        }
    }

    #[test]
    fn constant_predictor_metrics() {
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        let trace: usize = (0..2).map(|c| r.confusion[c][c]).sum();
        assert_eq!(trace as f64 / r.total as f64, r.accuracy);
        assert_eq!(r.support, vec![2, 2]);
    }

    #[test]
    fn unsupported_classes_leave_macro_mean() {
        let r = EvalReport::from_predictions(&[0, 0, 0], &[0, 0, 0], 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.unsupported, vec![1, 2]);
        assert!(r.to_key_values().contains("accuracy=1\n"));
        assert!(EvalReport::from_predictions(&[], &[], 2).is_err());
    }

    #[test]
    fn zero_head_returns_output_bias() {
        let cfg = ModelConfig { packets: 3, len: 4, dim: 8, layers: 1, heads: 2, mlp_hidden: 16, ..ModelConfig::desk() };
        let mut head = ClassifierHead::<f64>::zeros(8, 3);
        head.fc2.bias.data = vec![0.5, -1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 3 * 4 * 8).map(|_| rng.gen()).collect();
        let x = FlowTensor::new(2, cfg.packets, cfg.len, cfg.dim, data).unwrap();
        let (logits, _) = classify_flow(&x, &head, None).unwrap();
        assert_eq!(logits, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn pooling_of_equal_vectors() {
        let cls = [1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert_eq!(mean_pool(&cls, 3, 2, &[3]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mean_pool(&[1.0f64, 3.0, 5.0, 7.0], 2, 2, &[1]).unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn head_matches_scalar_oracle() {
        let mut head = ClassifierHead::<f64>::zeros(2, 2);
        head.fc1.weight.data = vec![0.5, -1.0, 2.0, 0.25];
        head.fc1.bias.data = vec![0.1, -0.2];
        head.fc2.weight.data = vec![1.0, -1.0, 0.5, 2.0];
        head.fc2.bias.data = vec![0.0, 0.3];
        // two packets, len 1, CLS vectors (1, 2) and (3, -2): mean (2, 0)
        let x = FlowTensor::new(1, 2, 1, 2, vec![1.0, 2.0, 3.0, -2.0]).unwrap();
        let (logits, _) = classify_flow(&x, &head, None).unwrap();
        let phi = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let h0 = phi(2.0 * 0.5 + 0.0 * 2.0 + 0.1);
        let h1 = phi(2.0 * -1.0 + 0.0 * 0.25 - 0.2);
        let expect = [h0 * 1.0 + h1 * 0.5, h0 * -1.0 + h1 * 2.0 + 0.3];
        for (a, b) in logits.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
