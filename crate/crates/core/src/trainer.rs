//! Minibatch training of the contrastive discriminator and gradient checking.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::{minibatches, resample_negatives, Batch, ContrastiveSet};
use crate::model::{correct_count, Model, ModelError};
use crate::numerics::SeededRng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub optimizer: Optimizer,
    /// Draw a fresh negative permutation at the start of every epoch.
    pub resample_negatives: bool,
    /// Abort once the epoch loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 512,
            lr: 1e-3,
            l2: 1e-4,
            optimizer: Optimizer::default(),
            resample_negatives: true,
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad("batch_size must be even and at least 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be finite and non-negative");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1");
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => bad("momentum must lie in [0, 1)"),
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad("adam betas must lie in [0, 1) and eps must be positive")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub param_norm: f64,
    /// Wall time of the epoch; not reproducible across runs.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Loss and accuracy of the untrained model on the input set.
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    /// Loss and accuracy of the trained model on the input set.
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub warnings: Vec<String>,
}

impl TrainTrace {
    /// The trace with wall times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainTrace {
        let mut t = self.clone();
        t.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        t
    }

    /// CSV with header `epoch,loss,accuracy,param_norm,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy,param_norm,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch, e.loss, e.accuracy, e.param_norm, e.seconds
            ));
        }
        out
    }
}

enum OptState {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl OptState {
    fn new(opt: &Optimizer, n: usize) -> Self {
        match opt {
            Optimizer::Sgd { .. } => OptState::Sgd { velocity: vec![0.0; n] },
            Optimizer::Adam { .. } => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, opt: &Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        match (self, opt) {
            (OptState::Sgd { velocity }, Optimizer::Sgd { momentum }) => {
                for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            (OptState::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for k in 0..params.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
                    params[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                }
            }
            _ => unreachable!("optimizer state matches configuration"),
        }
    }
}

/// Loss and accuracy over the whole set, evaluated in chunks.
pub fn evaluate(model: &Model, cs: &ContrastiveSet, l2: f64) -> Result<(f64, f64), TrainError> {
    const CHUNK: usize = 8192;
    let n = cs.len();
    let mut total = 0.0;
    let mut correct = 0;
    let mut start = 0;
    while start < n {
        let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let batch = cs.batch(&rows);
        let r = model.regression(&batch)?;
        total += model.loss(&batch, 0.0)? * rows.len() as f64;
        correct += correct_count(&r, &batch.labels);
        start += CHUNK;
    }
    Ok((total / n as f64 + model.penalty(l2), correct as f64 / n as f64))
}

/// Trains `model` in place. Batch order and negative resampling draw from
/// child streams of `config.seed`, so equal inputs give equal parameters.
pub fn train(model: &mut Model, cs: &ContrastiveSet, config: &TrainConfig) -> Result<TrainTrace, TrainError> {
    config.validate()?;
    if cs.is_empty() {
        return Err(TrainError::InvalidConfig("empty contrastive set".into()));
    }
    let root = SeededRng::new(config.seed);
    let mut batch_rng = root.split(0);
    let mut negative_rng = root.split(1);
    let mut warnings = Vec::new();
    if cs.half_len() < 2 && config.resample_negatives {
        warnings.push("a single positive pair admits no distinct negatives".to_string());
    }
    let (initial_loss, initial_accuracy) = evaluate(model, cs, config.l2)?;
    let threshold = config.divergence_factor * initial_loss.max(f64::MIN_POSITIVE);
    let mut state = OptState::new(&config.optimizer, model.n_params());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut resampled;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let set = if config.resample_negatives && epoch > 0 {
            resampled = resample_negatives(cs, &mut negative_rng);
            &resampled
        } else {
            cs
        };
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        for rows in minibatches(set, config.batch_size, &mut batch_rng) {
            let batch = set.batch(&rows);
            let ((loss, grad), hits) = model.backward_with_stats(&batch, config.l2)?;
            if !loss.is_finite() || grad.0.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence { epoch, loss });
            }
            state.step(&config.optimizer, config.lr, model.params_mut(), &grad.0);
            loss_sum += loss * rows.len() as f64;
            correct += hits;
            seen += rows.len();
        }
        let loss = loss_sum / seen as f64;
        if !loss.is_finite() || loss > threshold {
            return Err(TrainError::Divergence { epoch, loss });
        }
        let record = EpochRecord {
            epoch,
            loss,
            accuracy: correct as f64 / seen as f64,
            param_norm: model.param_norm(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} accuracy {:.4} ({:.2}s)",
            record.loss,
            record.accuracy,
            record.seconds
        );
        epochs.push(record);
    }
    let (final_loss, final_accuracy) = evaluate(model, cs, config.l2)?;
    Ok(TrainTrace {
        epochs,
        initial_loss,
        initial_accuracy,
        final_loss,
        final_accuracy,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Coordinates skipped because `θ ± eps` crossed a maxout tie or an abs kink.
    pub excluded: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic gradient with central differences at `n_points`
/// random coordinates. Relative error is `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn grad_check(
    model: &Model,
    batch: &Batch,
    l2: f64,
    n_points: usize,
    eps: f64,
    rng: &mut SeededRng,
) -> Result<GradCheckReport, TrainError> {
    let (_, grad) = model.backward(batch, l2)?;
    let base_sig = model.kink_signature(batch.x.view())?;
    let n = model.n_params();
    let picks = rng.sample_distinct(n, n_points.min(n));
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(picks.len());
    let mut excluded = 0;
    for index in picks {
        let orig = model.params()[index];
        probe.params_mut()[index] = orig + eps;
        let sig_plus = probe.kink_signature(batch.x.view())?;
        let plus = probe.loss(batch, l2)?;
        probe.params_mut()[index] = orig - eps;
        let sig_minus = probe.kink_signature(batch.x.view())?;
        let minus = probe.loss(batch, l2)?;
        probe.params_mut()[index] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad.0[index];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        entries.push(GradCheckEntry {
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        excluded,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_batch_rejected() {
        let cfg = TrainConfig {
            batch_size: 7,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let sgd: TrainConfig = serde_json::from_str(r#"{"optimizer":{"kind":"sgd"}}"#).unwrap();
        assert_eq!(sgd.optimizer, Optimizer::Sgd { momentum: 0.0 });
    }
}
