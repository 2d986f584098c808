use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{embed_checked, EmbedderPort, UnitVector};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::profiler::Profile;
use crate::retry::RetryPolicy;

/// Which terms make up the softmax denominator of the contrastive loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Each anchor's positive against the other pairs' positive similarities
    /// `sim(a_j, p_j)`.
    #[default]
    Diagonal,
    /// Each anchor against every positive in the batch, `sim(a_i, p_j)`.
    InBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub denominator: Denominator,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 32,
            learning_rate: 0.05,
            steps: 300,
            seed: 0,
            denominator: Denominator::Diagonal,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_batch(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<()> {
    if anchors.len() != positives.len() {
        return Err(Error::Shape(format!("{} anchors but {} positives", anchors.len(), positives.len())));
    }
    if anchors.len() < 2 {
        return Err(Error::BatchTooSmall(anchors.len()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Mean over anchors of `-log softmax` of the anchor's own similarity.
pub fn contrastive_loss(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64, denominator: Denominator) -> Result<f64> {
    Ok(contrastive_loss_grad(anchors, positives, tau, denominator)?.0)
}

/// Loss and its gradient with respect to each anchor vector.
pub fn contrastive_loss_grad(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    tau: f64,
    denominator: Denominator,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(anchors, positives, tau)?;
    let n = anchors.len();
    let nf = n as f64;
    let mut grads = vec![vec![0.0; anchors[0].len()]; n];
    let mut loss = 0.0;
    match denominator {
        Denominator::Diagonal => {
            let diag: Vec<f64> = (0..n).map(|i| dot(&anchors[i], &positives[i]) / tau).collect();
            let lse = log_sum_exp(&diag);
            for i in 0..n {
                loss += lse - diag[i];
                // d/ds_i of Σ_k (lse - s_k) / N  =  softmax_i - 1/N
                let w = ((diag[i] - lse).exp() - 1.0 / nf) / tau;
                axpy(&mut grads[i], w, &positives[i]);
            }
        }
        Denominator::InBatch => {
            for i in 0..n {
                let row: Vec<f64> = positives.iter().map(|p| dot(&anchors[i], p) / tau).collect();
                let lse = log_sum_exp(&row);
                loss += lse - row[i];
                for (j, p) in positives.iter().enumerate() {
                    let w = ((row[j] - lse).exp() - f64::from(u8::from(i == j))) / (nf * tau);
                    axpy(&mut grads[i], w, p);
                }
            }
        }
    }
    Ok((loss / nf, grads))
}

/// Affine map `x ↦ normalize(W x + b)` over frozen base embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AdapterParams {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for k in 0..dim {
            weight[k * dim + k] = 1.0;
        }
        Self {
            dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|x| x.is_finite())
    }

    /// `W x + b` before normalization.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|r| dot(&self.weight[r * self.dim..(r + 1) * self.dim], x) + self.bias[r])
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Result<UnitVector> {
        if x.len() != self.dim {
            return Err(Error::WidthDrift {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(UnitVector::new(self.affine(x)))
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Weights row-major, then bias.
    pub fn parameters(&self) -> Vec<f64> {
        self.weight.iter().chain(&self.bias).copied().collect()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_slice(&bytes)?;
        if p.weight.len() != p.dim * p.dim || p.bias.len() != p.dim || !p.is_finite() {
            return Err(Error::Format {
                format: "adapter",
                message: "inconsistent or non-finite parameters".into(),
            });
        }
        Ok(p)
    }
}

/// Contrastive loss of adapted anchors against fixed positives, with the
/// gradient in [`AdapterParams::parameters`] order.
pub fn adapter_loss_grad(
    params: &AdapterParams,
    inputs: &[Vec<f64>],
    positives: &[Vec<f64>],
    tau: f64,
    denominator: Denominator,
) -> Result<(f64, Vec<f64>)> {
    let d = params.dim;
    let z: Vec<Vec<f64>> = inputs.iter().map(|x| params.affine(x)).collect();
    let norms: Vec<f64> = z.iter().map(|v| norm(v)).collect();
    if let Some(k) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Shape(format!("adapter maps input {k} to the zero vector")));
    }
    let anchors: Vec<Vec<f64>> = z.iter().zip(&norms).map(|(v, n)| v.iter().map(|x| x / n).collect()).collect();
    let (loss, g_anchor) = contrastive_loss_grad(&anchors, positives, tau, denominator)?;

    let mut grad = vec![0.0; d * d + d];
    for ((x, a), (g, n)) in inputs.iter().zip(&anchors).zip(g_anchor.iter().zip(&norms)) {
        // back through a = z / |z|
        let ag = dot(a, g);
        let gz: Vec<f64> = g.iter().zip(a).map(|(gi, ai)| (gi - ai * ag) / n).collect();
        for r in 0..d {
            axpy(&mut grad[r * d..(r + 1) * d], gz[r], x);
            grad[d * d + r] += gz[r];
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterFit {
    pub params: AdapterParams,
    /// Full-set loss before the first step.
    pub initial_loss: f64,
    /// Full-set loss after the last step.
    pub final_loss: f64,
    /// Loss of the batch used at each step, before that step's update.
    pub history: Vec<f64>,
}

/// SGD on an identity-initialized adapter. `inputs` are base embeddings of
/// the profile texts, `positives` the unit opinion embeddings.
pub fn fit_adapter_vectors(inputs: &[Vec<f64>], positives: &[Vec<f64>], config: &ContrastiveConfig) -> Result<AdapterFit> {
    config.validate()?;
    check_batch(inputs, positives, config.temperature)?;
    let n = inputs.len();
    let dim = inputs[0].len();
    let mut params = AdapterParams::identity(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tau = config.temperature;
    let initial_loss = adapter_loss_grad(&params, inputs, positives, tau, config.denominator)?.0;

    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grad) = if config.batch_size >= n {
            adapter_loss_grad(&params, inputs, positives, tau, config.denominator)?
        } else {
            let mut picks = sample(&mut rng, n, config.batch_size).into_vec();
            picks.sort_unstable();
            let xs: Vec<Vec<f64>> = picks.iter().map(|&k| inputs[k].clone()).collect();
            let ps: Vec<Vec<f64>> = picks.iter().map(|&k| positives[k].clone()).collect();
            adapter_loss_grad(&params, &xs, &ps, tau, config.denominator)?
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        history.push(loss);
        for (p, g) in params.parameters_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: f64::NAN });
        }
    }
    let final_loss = adapter_loss_grad(&params, inputs, positives, tau, config.denominator)?.0;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: config.steps,
            loss: final_loss,
        });
    }
    Ok(AdapterFit {
        params,
        initial_loss,
        final_loss,
        history,
    })
}

/// Embeds `(profile text, opinion text)` pairs with the frozen base and
/// trains the adapter on them.
pub fn fit_adapter(
    pairs: &[(String, String)],
    base: &dyn EmbedderPort,
    config: &ContrastiveConfig,
    retry: &RetryPolicy,
) -> Result<AdapterFit> {
    if pairs.len() < 2 {
        return Err(Error::BatchTooSmall(pairs.len()));
    }
    let profiles: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    let opinions: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
    let xs: Vec<Vec<f64>> = embed_checked(base, &profiles, retry)?
        .into_iter()
        .map(|v| UnitVector::new(v).into_vec())
        .collect();
    let ps: Vec<Vec<f64>> = embed_checked(base, &opinions, retry)?
        .into_iter()
        .map(|v| UnitVector::new(v).into_vec())
        .collect();
    fit_adapter_vectors(&xs, &ps, config)
}

/// Text embedded for a profile query.
pub fn profile_query_text(user_profile: &str, item_profile: &str) -> String {
    format!("{user_profile}\n\n{item_profile}")
}

/// Embeds the pair's concatenated profiles through the base model and the
/// adapter.
pub fn profile_query(
    adapter: &AdapterParams,
    base: &dyn EmbedderPort,
    user_profile: &Profile,
    item_profile: &Profile,
    retry: &RetryPolicy,
) -> Result<UnitVector> {
    if user_profile.text.trim().is_empty() || item_profile.text.trim().is_empty() {
        return Err(Error::EmptyInput("profile text"));
    }
    let text = profile_query_text(&user_profile.text, &item_profile.text);
    let v = embed_checked(base, std::slice::from_ref(&text), retry)?.remove(0);
    adapter.apply(UnitVector::new(v).as_slice())
}
