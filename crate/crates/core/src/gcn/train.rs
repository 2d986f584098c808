use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nll_loss, Activation, EmbeddingTable, ProjectionNet, TokenLikelihoodHead, TrainBatch};
use crate::corpus::InteractionGraph;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    /// Width of the collaborative embeddings (d_gcn).
    pub embedding_width: usize,
    /// Number of propagation layers (L).
    pub layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub init_std: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Divide each pair's token sum by its length.
    pub per_token_loss: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            embedding_width: 64,
            layers: 3,
            hidden_width: 256,
            activation: Activation::Relu,
            init_std: 0.01,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 1,
            seed: 0,
            per_token_loss: false,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_width == 0 || self.hidden_width == 0 {
            return Err(Error::Config("gcn widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("gcn batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("gcn learning_rate must be finite and >= 0".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("gcn init_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Trainable part of the collaborative branch: layer-0 embeddings and the
/// projection into the generator's width.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoder {
    pub table: EmbeddingTable,
    pub projection: ProjectionNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub users: Matrix,
    pub items: Matrix,
    pub projection: ProjectionNet,
}

impl GraphEncoder {
    pub fn init(graph: &InteractionGraph, config: &GcnConfig, output_width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = EmbeddingTable::random(graph, config.embedding_width, config.layers, config.init_std, &mut rng);
        let projection = ProjectionNet::new(
            config.embedding_width,
            config.hidden_width,
            output_width,
            config.activation,
            &mut rng,
        );
        Self { table, projection }
    }

    /// Projected `(user, item)` embeddings for one pair.
    pub fn project_pair(&self, graph: &InteractionGraph, user: usize, item: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (users, items) = self.table.encode(graph)?;
        Ok((
            self.projection.forward(users.row(user))?,
            self.projection.forward(items.row(item))?,
        ))
    }

    /// Head context for a pair: the mean of the projected user and item rows.
    fn contexts(&self, users: &Matrix, items: &Matrix, batch: &TrainBatch) -> Result<Vec<Vec<f64>>> {
        batch
            .pairs
            .iter()
            .map(|&(u, i)| {
                let pu = self.projection.forward(users.row(u))?;
                let pi = self.projection.forward(items.row(i))?;
                Ok(pu.iter().zip(&pi).map(|(a, b)| 0.5 * (a + b)).collect())
            })
            .collect()
    }

    fn check_batch(&self, graph: &InteractionGraph, head: &dyn TokenLikelihoodHead, batch: &TrainBatch) -> Result<()> {
        batch.check_vocab(head.vocab_size())?;
        if head.input_width() != self.projection.output_width() {
            return Err(Error::Shape(format!(
                "head expects width {}, projection produces {}",
                head.input_width(),
                self.projection.output_width()
            )));
        }
        if let Some(&(u, i)) = batch
            .pairs
            .iter()
            .find(|(u, i)| *u >= graph.num_users() || *i >= graph.num_items())
        {
            return Err(Error::Shape(format!("pair ({u}, {i}) outside the graph")));
        }
        Ok(())
    }

    /// Batch loss computed from full probability rows through [`nll_loss`].
    pub fn loss(&self, graph: &InteractionGraph, head: &dyn TokenLikelihoodHead, batch: &TrainBatch, per_token: bool) -> Result<f64> {
        self.check_batch(graph, head, batch)?;
        let (users, items) = self.table.encode(graph)?;
        let contexts = self.contexts(&users, &items, batch)?;
        let predictions: Vec<Vec<Vec<f64>>> = contexts
            .iter()
            .zip(&batch.targets)
            .map(|(ctx, targets)| {
                (0..targets.len())
                    .map(|c| head.probabilities(ctx, &targets[..c]))
                    .collect()
            })
            .collect();
        nll_loss(&predictions, batch, per_token)
    }

    pub fn loss_and_grad(
        &self,
        graph: &InteractionGraph,
        head: &dyn TokenLikelihoodHead,
        batch: &TrainBatch,
        per_token: bool,
    ) -> Result<(f64, EncoderGrads)> {
        self.check_batch(graph, head, batch)?;
        let (users, items) = self.table.encode(graph)?;
        let n = batch.len() as f64;
        let mut grad_users = Matrix::zeros(users.rows(), users.cols());
        let mut grad_items = Matrix::zeros(items.rows(), items.cols());
        let mut grad_proj = self.projection.zeros_like();
        let mut loss = 0.0;

        for (&(u, i), targets) in batch.pairs.iter().zip(&batch.targets) {
            let (pu, cache_u) = self.projection.forward_cached(users.row(u))?;
            let (pi, cache_i) = self.projection.forward_cached(items.row(i))?;
            let ctx: Vec<f64> = pu.iter().zip(&pi).map(|(a, b)| 0.5 * (a + b)).collect();

            let scale = if per_token { 1.0 / targets.len() as f64 } else { 1.0 };
            let mut pair_logp = 0.0;
            let mut grad_ctx = vec![0.0; ctx.len()];
            for c in 0..targets.len() {
                let (lp, g) = head.log_prob_grad(&ctx, &targets[..c], targets[c]);
                pair_logp += lp;
                for (a, b) in grad_ctx.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            loss -= scale * pair_logp / n;

            // d loss / d ctx, then split evenly onto both projected rows.
            let coeff = -0.5 * scale / n;
            let grad_half: Vec<f64> = grad_ctx.iter().map(|g| coeff * g).collect();
            let gu = self.projection.backward(&cache_u, &grad_half, &mut grad_proj);
            let gi = self.projection.backward(&cache_i, &grad_half, &mut grad_proj);
            crate::linalg::axpy(grad_users.row_mut(u), 1.0, &gu);
            crate::linalg::axpy(grad_items.row_mut(i), 1.0, &gi);
        }

        let (users0, items0) = self.table.backward(graph, &grad_users, &grad_items)?;
        Ok((
            loss,
            EncoderGrads {
                users: users0,
                items: items0,
                projection: grad_proj,
            },
        ))
    }

    pub fn apply(&mut self, grads: &EncoderGrads, learning_rate: f64) {
        self.table.users.axpy(-learning_rate, &grads.users);
        self.table.items.axpy(-learning_rate, &grads.items);
        self.projection.axpy(-learning_rate, &grads.projection);
    }

    pub fn is_finite(&self) -> bool {
        self.table.is_finite() && self.projection.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub encoder: GraphEncoder,
    /// Mean batch loss before the first update.
    pub initial_loss: f64,
    /// Mean batch loss after the last update.
    pub final_loss: f64,
    /// Loss of every step, in order.
    pub history: Vec<f64>,
}

fn mean_loss(
    encoder: &GraphEncoder,
    graph: &InteractionGraph,
    head: &dyn TokenLikelihoodHead,
    batches: &[TrainBatch],
    per_token: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += encoder.loss(graph, head, b, per_token)?;
    }
    Ok(total / batches.len() as f64)
}

/// Plain SGD over the embedding table and projection; the head stays frozen.
pub fn train_adaptor(
    graph: &InteractionGraph,
    head: &dyn TokenLikelihoodHead,
    batches: &[TrainBatch],
    config: &GcnConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if batches.is_empty() {
        return Err(Error::Config("no training batches".into()));
    }
    let mut encoder = GraphEncoder::init(graph, config, head.input_width());
    for b in batches {
        encoder.check_batch(graph, head, b)?;
    }
    let initial_loss = mean_loss(&encoder, graph, head, batches, config.per_token_loss)?;
    let mut history = Vec::with_capacity(config.epochs * batches.len());
    for _ in 0..config.epochs {
        for batch in batches {
            let (loss, grads) = encoder.loss_and_grad(graph, head, batch, config.per_token_loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: history.len(),
                    loss,
                });
            }
            encoder.apply(&grads, config.learning_rate);
            history.push(loss);
        }
    }
    if !encoder.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: history.len(),
            loss: f64::NAN,
        });
    }
    let final_loss = mean_loss(&encoder, graph, head, batches, config.per_token_loss)?;
    log::info!(
        "gcn training: {} steps, loss {initial_loss:.6} -> {final_loss:.6}",
        history.len()
    );
    Ok(TrainReport {
        encoder,
        initial_loss,
        final_loss,
        history,
    })
}
