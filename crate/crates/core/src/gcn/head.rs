use rand::Rng;

use crate::linalg::{dot, Matrix};

/// The frozen language model, reduced to what training needs: a next-token
/// distribution conditioned on a projected embedding and the token prefix.
pub trait TokenLikelihoodHead {
    fn vocab_size(&self) -> usize;

    fn input_width(&self) -> usize;

    /// Probability row over the vocabulary; sums to 1.
    fn probabilities(&self, context: &[f64], prefix: &[u32]) -> Vec<f64>;

    /// `log p(target | context, prefix)` and its gradient w.r.t. `context`.
    /// Parameters of the head itself are never updated.
    fn log_prob_grad(&self, context: &[f64], prefix: &[u32], target: u32) -> (f64, Vec<f64>);
}

/// Fixed random linear-softmax map: `logits = W·context + T[last token]`,
/// with a separate start row when the prefix is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxHead {
    weight: Matrix,
    transition: Matrix,
    start: Vec<f64>,
}

impl LinearSoftmaxHead {
    pub fn random<R: Rng + ?Sized>(input_width: usize, vocab: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input_width.max(1) as f64).sqrt();
        Self {
            weight: Matrix::random_normal(vocab, input_width, scale, rng),
            transition: Matrix::random_normal(vocab, vocab, 0.5, rng),
            start: Matrix::random_normal(1, vocab, 0.5, rng).as_slice().to_vec(),
        }
    }

    /// Uniform over the vocabulary regardless of input.
    pub fn uniform(input_width: usize, vocab: usize) -> Self {
        Self {
            weight: Matrix::zeros(vocab, input_width),
            transition: Matrix::zeros(vocab, vocab),
            start: vec![0.0; vocab],
        }
    }

    fn logits(&self, context: &[f64], prefix: &[u32]) -> Vec<f64> {
        let offset = match prefix.last() {
            Some(&t) => self.transition.row(t as usize),
            None => &self.start,
        };
        (0..self.weight.rows())
            .map(|v| dot(self.weight.row(v), context) + offset[v])
            .collect()
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl TokenLikelihoodHead for LinearSoftmaxHead {
    fn vocab_size(&self) -> usize {
        self.weight.rows()
    }

    fn input_width(&self) -> usize {
        self.weight.cols()
    }

    fn probabilities(&self, context: &[f64], prefix: &[u32]) -> Vec<f64> {
        log_softmax(&self.logits(context, prefix))
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    fn log_prob_grad(&self, context: &[f64], prefix: &[u32], target: u32) -> (f64, Vec<f64>) {
        let logp = log_softmax(&self.logits(context, prefix));
        // d log p_t / d logits = onehot(t) - p
        let mut coeff: Vec<f64> = logp.iter().map(|l| -l.exp()).collect();
        coeff[target as usize] += 1.0;
        (logp[target as usize], self.weight.tr_mul_vec(&coeff))
    }
}
