//! Collaborative signal extraction.
//!
//! LightGCN propagation over the user-item graph, layer averaging, a
//! three-layer projection into the generator's embedding width, and training
//! of both against a frozen token-likelihood head.

mod checkpoint;
mod head;
mod loss;
mod projection;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use head::{LinearSoftmaxHead, TokenLikelihoodHead};
pub use loss::{nll_loss, TrainBatch};
pub use projection::{Activation, Dense, ProjectionNet};
pub use train::{train_adaptor, EncoderGrads, GcnConfig, GraphEncoder, TrainReport};

use rand::Rng;

use crate::corpus::InteractionGraph;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// One LightGCN step: each user receives the degree-normalized sum of its
/// items' embeddings and vice versa. Inputs are left untouched.
pub fn propagate_layer(graph: &InteractionGraph, users: &Matrix, items: &Matrix) -> Result<(Matrix, Matrix)> {
    if users.rows() != graph.num_users() || items.rows() != graph.num_items() {
        return Err(Error::Shape(format!(
            "embedding rows ({}, {}) do not match graph nodes ({}, {})",
            users.rows(),
            items.rows(),
            graph.num_users(),
            graph.num_items()
        )));
    }
    if users.cols() != items.cols() {
        return Err(Error::Shape(format!(
            "user width {} differs from item width {}",
            users.cols(),
            items.cols()
        )));
    }
    let user_norm = inv_sqrt_degrees(graph.num_users(), |u| graph.user_degree(u), "user")?;
    let item_norm = inv_sqrt_degrees(graph.num_items(), |i| graph.item_degree(i), "item")?;

    let width = users.cols();
    let mut next_users = Matrix::zeros(graph.num_users(), width);
    for (u, &nu) in user_norm.iter().enumerate() {
        let out = next_users.row_mut(u);
        for &i in graph.user_neighbors(u) {
            let w = nu * item_norm[i];
            for (o, &x) in out.iter_mut().zip(items.row(i)) {
                *o += w * x;
            }
        }
    }
    let mut next_items = Matrix::zeros(graph.num_items(), width);
    for (i, &ni) in item_norm.iter().enumerate() {
        let out = next_items.row_mut(i);
        for &u in graph.item_neighbors(i) {
            let w = ni * user_norm[u];
            for (o, &x) in out.iter_mut().zip(users.row(u)) {
                *o += w * x;
            }
        }
    }
    Ok((next_users, next_items))
}

fn inv_sqrt_degrees(n: usize, degree: impl Fn(usize) -> usize, kind: &'static str) -> Result<Vec<f64>> {
    (0..n)
        .map(|k| match degree(k) {
            0 => Err(Error::ZeroDegree { kind, index: k }),
            d => Ok(1.0 / (d as f64).sqrt()),
        })
        .collect()
}

/// Mean of the `num_layers + 1` per-layer embeddings (layer 0 included).
pub fn aggregate_layers(per_layer: &[Matrix], num_layers: usize) -> Result<Matrix> {
    if per_layer.len() != num_layers + 1 {
        return Err(Error::Shape(format!(
            "expected {} layers (L = {num_layers}), got {}",
            num_layers + 1,
            per_layer.len()
        )));
    }
    let shape = per_layer[0].shape();
    if let Some(bad) = per_layer.iter().find(|m| m.shape() != shape) {
        return Err(Error::Shape(format!(
            "layer shape {:?} differs from {:?}",
            bad.shape(),
            shape
        )));
    }
    if num_layers == 0 {
        return Ok(per_layer[0].clone());
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for layer in per_layer {
        out.axpy(1.0, layer);
    }
    out.scale(1.0 / (num_layers + 1) as f64);
    Ok(out)
}

/// Layer-0 user and item embeddings plus the propagation depth.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Matrix,
    pub items: Matrix,
    pub layers: usize,
}

impl EmbeddingTable {
    pub fn random<R: Rng + ?Sized>(graph: &InteractionGraph, width: usize, layers: usize, std: f64, rng: &mut R) -> Self {
        Self {
            users: Matrix::random_normal(graph.num_users(), width, std, rng),
            items: Matrix::random_normal(graph.num_items(), width, std, rng),
            layers,
        }
    }

    pub fn width(&self) -> usize {
        self.users.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }

    /// Final layer-averaged `(users, items)` embeddings.
    pub fn encode(&self, graph: &InteractionGraph) -> Result<(Matrix, Matrix)> {
        let mut user_layers = vec![self.users.clone()];
        let mut item_layers = vec![self.items.clone()];
        for _ in 0..self.layers {
            let (u, i) = propagate_layer(graph, user_layers.last().unwrap(), item_layers.last().unwrap())?;
            user_layers.push(u);
            item_layers.push(i);
        }
        Ok((
            aggregate_layers(&user_layers, self.layers)?,
            aggregate_layers(&item_layers, self.layers)?,
        ))
    }

    /// Pulls gradients w.r.t. the final embeddings back onto layer 0.
    ///
    /// The normalized bipartite operator is symmetric, so its adjoint is
    /// another forward propagation step.
    pub fn backward(&self, graph: &InteractionGraph, grad_users: &Matrix, grad_items: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut acc_u = grad_users.clone();
        let mut acc_i = grad_items.clone();
        let mut cur = (grad_users.clone(), grad_items.clone());
        for _ in 0..self.layers {
            cur = propagate_layer(graph, &cur.0, &cur.1)?;
            acc_u.axpy(1.0, &cur.0);
            acc_i.axpy(1.0, &cur.1);
        }
        let s = 1.0 / (self.layers + 1) as f64;
        acc_u.scale(s);
        acc_i.scale(s);
        Ok((acc_u, acc_i))
    }
}
