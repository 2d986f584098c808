use crate::error::{Error, Result};

/// User-item pairs (as graph ordinals) with the explanation token ids to be
/// predicted for each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<Vec<u32>>,
}

impl TrainBatch {
    pub fn new(pairs: Vec<(usize, usize)>, targets: Vec<Vec<u32>>) -> Result<Self> {
        if pairs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} pairs but {} target sequences",
                pairs.len(),
                targets.len()
            )));
        }
        if pairs.is_empty() {
            return Err(Error::Shape("empty training batch".into()));
        }
        if let Some(k) = targets.iter().position(Vec::is_empty) {
            return Err(Error::Shape(format!("pair {k} has no target tokens")));
        }
        Ok(Self { pairs, targets })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for seq in &self.targets {
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::TokenOutOfVocab { token: t, vocab });
            }
        }
        Ok(())
    }
}

/// Negative log-likelihood of the target tokens:
/// `-(1/N) Σ_i Σ_c log ŷ_{i,c}[y_{i,c}]`.
///
/// `predictions[i][c]` is the probability row for pair `i` at position `c`.
/// The inner sum is not divided by the sequence length unless
/// `per_token` is set.
pub fn nll_loss(predictions: &[Vec<Vec<f64>>], batch: &TrainBatch, per_token: bool) -> Result<f64> {
    if predictions.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} prediction sequences for {} pairs",
            predictions.len(),
            batch.len()
        )));
    }
    let mut total = 0.0;
    for (i, (rows, targets)) in predictions.iter().zip(&batch.targets).enumerate() {
        if rows.len() != targets.len() {
            return Err(Error::Shape(format!(
                "pair {i}: {} probability rows for {} target tokens",
                rows.len(),
                targets.len()
            )));
        }
        let mut pair_sum = 0.0;
        for (c, (row, &t)) in rows.iter().zip(targets).enumerate() {
            let p = *row.get(t as usize).ok_or(Error::TokenOutOfVocab {
                token: t,
                vocab: row.len(),
            })?;
            if p <= 0.0 {
                return Err(Error::ZeroProbability { pair: i, position: c });
            }
            pair_sum += p.ln();
        }
        if per_token {
            pair_sum /= targets.len() as f64;
        }
        total += pair_sum;
    }
    Ok(-total / batch.len() as f64)
}
