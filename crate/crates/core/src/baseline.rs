//! Multinomial logistic regression on bag-of-token counts. Used as a
//! learnability check for a dataset before the transformer is trained on it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::finetune::{argmax, dataset_labels, EvalReport};
use crate::tokenizer::{is_content, TokenDataset, TokenGrid, CONTENT_VOCAB};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { epochs: 20, learning_rate: 0.1, seed: 0 }
    }
}

/// Sparse `log(1 + count)` features over content token ids.
pub fn bag_of_tokens(grid: &TokenGrid) -> Vec<(u32, f64)> {
    let mut ids: Vec<u32> = grid.ids().iter().copied().filter(|&id| is_content(id)).collect();
    ids.sort_unstable();
    let mut out: Vec<(u32, f64)> = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some((last, n)) if *last == id => *n += 1.0,
            _ => out.push((id, 1.0)),
        }
    }
    for (_, v) in &mut out {
        *v = v.ln_1p();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagOfTokensClassifier {
    classes: usize,
    /// `(CONTENT_VOCAB, classes)` row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl BagOfTokensClassifier {
    pub fn fit(train: &TokenDataset, cfg: &BaselineConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes = train.class_count().max(2);
        let labels = dataset_labels(train, classes)?;
        let feats: Vec<Vec<(u32, f64)>> = train.records.iter().map(|r| bag_of_tokens(&r.grid)).collect();
        let mut model = BagOfTokensClassifier { classes, weights: vec![0.0; CONTENT_VOCAB as usize * classes], bias: vec![0.0; classes] };
        let mut order: Vec<usize> = (0..feats.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let mut p = model.logits(&feats[i]);
                let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = p.iter_mut().map(|v| {
                    *v = (*v - m).exp();
                    *v
                }).sum();
                for (c, v) in p.iter_mut().enumerate() {
                    *v = *v / z - f64::from(u8::from(c == labels[i]));
                }
                for (c, g) in p.iter().enumerate() {
                    model.bias[c] -= cfg.learning_rate * g;
                }
                for &(id, x) in &feats[i] {
                    let row = &mut model.weights[id as usize * classes..(id as usize + 1) * classes];
                    for (w, g) in row.iter_mut().zip(&p) {
                        *w -= cfg.learning_rate * g * x;
                    }
                }
            }
        }
        Ok(model)
    }

    fn logits(&self, feats: &[(u32, f64)]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for &(id, x) in feats {
            for (o, w) in out.iter_mut().zip(&self.weights[id as usize * self.classes..]) {
                *o += w * x;
            }
        }
        out
    }

    pub fn predict(&self, grid: &TokenGrid) -> usize {
        argmax(&self.logits(&bag_of_tokens(grid)))
    }

    pub fn evaluate(&self, test: &TokenDataset) -> Result<EvalReport> {
        let labels = dataset_labels(test, self.classes)?;
        let preds: Vec<usize> = test.records.iter().map(|r| self.predict(&r.grid)).collect();
        EvalReport::from_predictions(&labels, &preds, self.classes)
    }
}
