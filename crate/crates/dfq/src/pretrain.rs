//! Full-precision teacher pretraining on a labeled dataset.
//!
//! Train-mode forwards with an EMA update (momentum 0.1) of each BN
//! layer's stored statistics; the finished graph is left in eval mode with
//! frozen statistics.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, Mode};
use crate::losses::ce_loss;
use crate::opt::Momentum;
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub bn_momentum: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 20, batch_size: 64, lr: 0.1, momentum: 0.9, bn_momentum: 0.1, seed: 1 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_train_loss: f32,
    pub test_accuracy_eval: f32,
    pub test_accuracy_train_mode: f32,
}

/// Top-1 accuracy of `graph` run in `mode` over the whole dataset.
pub fn accuracy(graph: &LayerGraph, data: &Dataset, mode: Mode, batch_size: usize) -> Result<f32> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut i = 0;
    while i < data.len() {
        let hi = (i + batch_size).min(data.len());
        if mode == Mode::Train && hi - i < 2 {
            break; // a trailing singleton cannot be normalized in train mode
        }
        let idx: Vec<usize> = (i..hi).collect();
        let (batch, labels) = data.batch(&idx);
        let logits = graph.forward(&batch, mode, false)?.logits;
        for (pred, label) in logits.argmax_rows().into_iter().zip(labels) {
            correct += usize::from(pred == label);
            total += 1;
        }
        i = hi;
    }
    Ok(correct as f32 / total.max(1) as f32)
}

/// Train a fresh graph of the given architecture; returns the eval-mode
/// teacher with populated running statistics.
pub fn pretrain_teacher(
    train: &Dataset,
    test: &Dataset,
    arch: &str,
    cfg: &PretrainConfig,
) -> Result<(LayerGraph, PretrainReport)> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("pretraining needs batch size >= 2".into()));
    }
    let mut graph = crate::arch::build_target_net(arch, train.num_classes, cfg.seed)?;
    let mut opt = Momentum::new(cfg.lr, cfg.momentum);
    let mut rng = SeedStream::new(cfg.seed ^ 0x5eed);
    let mut last_loss = f32::NAN;

    for epoch in 0..cfg.epochs {
        // reference schedule: drop twice over the run
        let drops = (epoch * 2 >= cfg.epochs) as u32 + (epoch * 4 >= cfg.epochs * 3) as u32;
        opt.set_lr(cfg.lr * 0.1f32.powi(drops as i32));

        let order = rng.permutation(train.len());
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (batch, labels) = train.batch(chunk);
            let rec = graph.forward(&batch, Mode::Train, true)?;
            let loss = ce_loss(&rec.logits, &labels)?;
            last_loss = loss.item();
            if !last_loss.is_finite() {
                return Err(Error::NonFinite { context: format!("pretraining loss at epoch {epoch}") });
            }
            loss.backward()?;
            graph.visit_params_mut(&mut |name, t| opt.step_param(name, t));
            graph.update_running_stats(rec.stats.as_ref().unwrap(), cfg.bn_momentum)?;
        }
    }
    graph.set_mode(Mode::Eval);
    let report = PretrainReport {
        epochs: cfg.epochs,
        final_train_loss: last_loss,
        test_accuracy_eval: accuracy(&graph, test, Mode::Eval, 100)?,
        test_accuracy_train_mode: accuracy(&graph, test, Mode::Train, 16)?,
    };
    Ok((graph, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesConfig};

    /// A short run on a small split must already separate the classes
    /// far beyond chance and keep stored stats near the data stats.
    #[test]
    fn short_pretrain_learns_and_tracks_stats() {
        let (train, test) = generate_shapes(&ShapesConfig {
            train: 400,
            test: 100,
            classes: 4,
            seed: 21,
        })
        .unwrap();
        let cfg = PretrainConfig { epochs: 4, batch_size: 32, lr: 0.05, ..Default::default() };
        let (teacher, report) = pretrain_teacher(&train, &test, "tiny-resnet", &cfg).unwrap();
        assert!(
            report.test_accuracy_eval > 0.6,
            "expected well above 0.25 chance, got {}",
            report.test_accuracy_eval
        );

        // stored stats vs full-data batch stats, fairly loose for a short run
        let idx: Vec<usize> = (0..train.len()).collect();
        let (all, _) = train.batch(&idx);
        let rec = teacher.forward(&all, Mode::Eval, true).unwrap();
        let stored = teacher.stored_bn_stats();
        for (obs, (site, mean, std)) in rec.stats.unwrap().layers.iter().zip(&stored) {
            for c in 0..mean.len() {
                let m_obs = obs.mean.data()[c];
                let s_obs = obs.std.data()[c];
                let rel_m = (m_obs - mean[c]).abs() / s_obs.max(0.1);
                let rel_s = (s_obs - std[c]).abs() / s_obs.max(0.1);
                assert!(rel_m < 0.5, "{site} mean channel {c}: {m_obs} vs stored {}", mean[c]);
                assert!(rel_s < 0.5, "{site} std channel {c}: {s_obs} vs stored {}", std[c]);
            }
        }
    }
}
