//! Diagnostics and experiment harnesses: the mode-consistency audit
//! (accuracy and BN-statistics error of the same samples under eval- and
//! train-mode forwards), parameter sweeps, and the component ablation
//! grid. All reports are plain serde structs, deterministic under seed.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_matrix, map_distance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generator::GeneratorNet;
use crate::graph::{BatchStatsRecord, LayerGraph, Mode};
use crate::pretrain::accuracy;
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use crate::train::{run, TrainConfig};

/// Pooled mean absolute deviation over every (layer, channel) mean and
/// std entry of a batch-statistics record against the stored statistics.
pub fn bns_error(stats: &BatchStatsRecord, stored: &[(String, Vec<f32>, Vec<f32>)]) -> Result<f32> {
    if stats.layers.len() != stored.len() {
        return Err(Error::invalid(
            "bns_error",
            format!("{} observed BN layers vs {} stored", stats.layers.len(), stored.len()),
        ));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (obs, (site, mean, std)) in stats.layers.iter().zip(stored) {
        if obs.mean.numel() != mean.len() {
            return Err(Error::invalid("bns_error", format!("channel mismatch at {site}")));
        }
        for (o, s) in obs.mean.data().iter().zip(mean) {
            acc += (o - s).abs() as f64;
            count += 1;
        }
        for (o, s) in obs.std.data().iter().zip(std) {
            acc += (o - s).abs() as f64;
            count += 1;
        }
    }
    Ok((acc / count.max(1) as f64) as f32)
}

/// A labeled bag of images, batched for the audit.
#[derive(Clone)]
pub struct SampleSet {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub hw: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        3 * self.hw * self.hw
    }

    pub fn batch(&self, lo: usize, hi: usize) -> (Tensor, &[usize]) {
        let s = self.sample_len();
        (
            Tensor::from_vec(self.images[lo * s..hi * s].to_vec(), &[hi - lo, 3, self.hw, self.hw]),
            &self.labels[lo..hi],
        )
    }

    pub fn from_dataset(ds: &Dataset, limit: usize) -> SampleSet {
        let n = ds.len().min(limit);
        let mut images = Vec::new();
        for i in 0..n {
            images.extend_from_slice(ds.image(i));
        }
        SampleSet {
            images,
            labels: ds.labels[..n].iter().map(|&l| l as usize).collect(),
            hw: crate::data::IMAGE_HW,
        }
    }

    /// Draw `count` synthetic samples; labels are the condition classes.
    pub fn synthesize(gen: &GeneratorNet, count: usize, batch: usize, seed: u64) -> Result<SampleSet> {
        let mut rng = SeedStream::new(seed);
        let classes = gen.config.num_classes;
        let hw_grid = gen.config.grid_h * gen.config.grid_w;
        let (oh, _) = gen.output_hw();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut done = 0;
        while done < count {
            let n = batch.min(count - done);
            let y: Vec<usize> = (0..n).map(|_| rng.uniform_int(classes)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.uniform_int(hw_grid)).collect();
            let z = rng.normal_tensor(&[n, gen.config.z_dim]);
            let x = gen.generate(&z, &y, &p)?;
            images.extend_from_slice(x.data());
            labels.extend(y);
            done += n;
        }
        Ok(SampleSet { images, labels, hw: oh })
    }

    /// Keep only samples the network classifies correctly in eval mode.
    pub fn filter_eval_correct(&self, net: &LayerGraph, batch: usize) -> Result<SampleSet> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let s = self.sample_len();
        let mut lo = 0;
        while lo < self.len() {
            let hi = (lo + batch).min(self.len());
            let (x, y) = self.batch(lo, hi);
            let logits = net.forward(&x, Mode::Eval, false)?.logits;
            for (row, (&label, pred)) in y.iter().zip(logits.argmax_rows()).enumerate() {
                if pred == label {
                    let i = lo + row;
                    images.extend_from_slice(&self.images[i * s..(i + 1) * s]);
                    labels.push(label);
                }
            }
            lo = hi;
        }
        Ok(SampleSet { images, labels, hw: self.hw })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModeConsistencyReport {
    pub sample_count: usize,
    pub acc_eval: f32,
    pub acc_train: f32,
    pub bns_err_eval: f32,
    pub bns_err_train: f32,
    /// Mean attention-map MAE between the two modes.
    pub attention_mae: f32,
}

/// Batched dual-mode audit of an eval-mode-correct sample set.
pub fn mode_consistency(
    teacher: &LayerGraph,
    samples: &SampleSet,
    batch_size: usize,
) -> Result<ModeConsistencyReport> {
    if samples.len() < batch_size {
        return Err(Error::invalid(
            "mode_consistency",
            format!("{} samples < batch size {batch_size}", samples.len()),
        ));
    }
    let stored = teacher.stored_bn_stats();
    let batches = samples.len() / batch_size;
    let mut correct_eval = 0usize;
    let mut correct_train = 0usize;
    let mut err_eval = 0.0f64;
    let mut err_train = 0.0f64;
    let mut attn = 0.0f64;
    let mut counted = 0usize;

    for b in 0..batches {
        let (x, y) = samples.batch(b * batch_size, (b + 1) * batch_size);
        let ev = teacher.forward(&x, Mode::Eval, true)?;
        let tr = teacher.forward(&x, Mode::Train, true)?;
        for (&label, pred) in y.iter().zip(ev.logits.argmax_rows()) {
            correct_eval += usize::from(pred == label);
        }
        for (&label, pred) in y.iter().zip(tr.logits.argmax_rows()) {
            correct_train += usize::from(pred == label);
        }
        err_eval += bns_error(ev.stats.as_ref().unwrap(), &stored)? as f64;
        err_train += bns_error(tr.stats.as_ref().unwrap(), &stored)? as f64;
        let maps_e = attention_matrix(&ev.backbone, Mode::Eval)?;
        let maps_t = attention_matrix(&tr.backbone, Mode::Train)?;
        for (me, mt) in maps_e.iter().zip(&maps_t) {
            attn += map_distance(mt, me)? as f64;
        }
        counted += batch_size;
    }
    Ok(ModeConsistencyReport {
        sample_count: counted,
        acc_eval: correct_eval as f32 / counted as f32,
        acc_train: correct_train as f32 / counted as f32,
        bns_err_eval: (err_eval / batches as f64) as f32,
        bns_err_train: (err_train / batches as f64) as f32,
        attention_mae: (attn / counted as f64) as f32,
    })
}

// ── experiment harnesses ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Cacm,
    Ad,
    Penalty,
}

impl std::str::FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cacm" => Ok(Component::Cacm),
            "ad" => Ok(Component::Ad),
            "penalty" => Ok(Component::Penalty),
            other => Err(Error::invalid("component", format!("unknown `{other}` (cacm, ad, penalty)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationRow {
    pub cacm: bool,
    pub ad: bool,
    pub penalty: bool,
    pub accuracies: Vec<f32>,
    pub mean: f32,
    pub std: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AblationReport {
    pub bits: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Row layout of the component grid. The full set reproduces the
/// reference five-row structure: all off, matching only, matching +
/// adversarial, penalty only, everything on.
pub fn ablation_rows(components: &[Component]) -> Vec<(bool, bool, bool)> {
    let has = |c: Component| components.contains(&c);
    if has(Component::Cacm) && has(Component::Ad) && has(Component::Penalty) {
        return vec![
            (false, false, false),
            (true, false, false),
            (true, true, false),
            (false, false, true),
            (true, true, true),
        ];
    }
    let mut rows = vec![(false, false, false)];
    for &c in components {
        let mut row = (false, false, false);
        match c {
            Component::Cacm => row.0 = true,
            Component::Ad => row.1 = true,
            Component::Penalty => row.2 = true,
        }
        if !rows.contains(&row) {
            rows.push(row);
        }
    }
    let all = (has(Component::Cacm), has(Component::Ad), has(Component::Penalty));
    if !rows.contains(&all) {
        rows.push(all);
    }
    rows
}

fn mean_std(values: &[f32]) -> (f32, f32) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var.sqrt() as f32)
}

/// Train once per (row, seed) and measure student test accuracy. Rows and
/// seeds fan out over worker threads, one run per worker with its own
/// stream, so results never depend on scheduling.
pub fn ablation_harness(
    base: &TrainConfig,
    teacher: &LayerGraph,
    test: &Dataset,
    components: &[Component],
    seeds: &[u64],
) -> Result<AblationReport> {
    let rows = ablation_rows(components);
    let jobs: Vec<(usize, u64)> = rows
        .iter()
        .enumerate()
        .flat_map(|(r, _)| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results = crate::parallel::map_indexed(jobs.len(), |j| -> Result<f32> {
        let (r, seed) = jobs[j];
        let (cacm, ad, penalty) = rows[r];
        let mut cfg = base.clone();
        cfg.enable_cacm = cacm;
        cfg.enable_ad = ad;
        cfg.enable_penalty = penalty;
        cfg.seed = seed;
        let outcome = run(&cfg, teacher, None)?;
        accuracy(&outcome.student, test, Mode::Eval, 100)
    });
    let mut per_row: Vec<Vec<f32>> = vec![Vec::new(); rows.len()];
    for (j, res) in results.into_iter().enumerate() {
        per_row[jobs[j].0].push(res?);
    }
    let rows = rows
        .into_iter()
        .zip(per_row)
        .map(|((cacm, ad, penalty), accuracies)| {
            let (mean, std) = mean_std(&accuracies);
            AblationRow { cacm, ad, penalty, accuracies, mean, std }
        })
        .collect();
    Ok(AblationReport {
        bits: format!("{}w{}a", base.bits_w, base.bits_a),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub value: f32,
    pub accuracies: Vec<f32>,
    pub mean: f32,
    pub std: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepReport {
    pub param: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

pub const SWEEPABLE: [&str; 8] =
    ["gamma", "alpha", "beta", "pen-ce", "pen-bns", "pen-cacm", "tau", "relax-cacm"];

fn apply_sweep_param(cfg: &mut TrainConfig, param: &str, value: f32) -> Result<()> {
    match param {
        "gamma" => cfg.weights.gamma = value,
        "alpha" => cfg.weights.alpha = value,
        "beta" => cfg.weights.beta = value,
        "pen-ce" => cfg.weights.pen_ce = value,
        "pen-bns" => cfg.weights.pen_bns = value,
        "pen-cacm" => cfg.weights.pen_cacm = value,
        "tau" => cfg.weights.tau = value,
        "relax-cacm" => cfg.weights.relax_cacm = value,
        other => {
            return Err(Error::invalid(
                "sweep",
                format!("unknown parameter `{other}`; known: {}", SWEEPABLE.join(", ")),
            ))
        }
    }
    Ok(())
}

/// One accuracy row per swept value, averaged over seeds.
pub fn sweep_harness(
    base: &TrainConfig,
    teacher: &LayerGraph,
    test: &Dataset,
    param: &str,
    values: &[f32],
    seeds: &[u64],
) -> Result<SweepReport> {
    // validate the name before spawning anything
    apply_sweep_param(&mut base.clone(), param, values.first().copied().unwrap_or(0.0))?;
    let jobs: Vec<(usize, u64)> = values
        .iter()
        .enumerate()
        .flat_map(|(r, _)| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results = crate::parallel::map_indexed(jobs.len(), |j| -> Result<f32> {
        let (r, seed) = jobs[j];
        let mut cfg = base.clone();
        apply_sweep_param(&mut cfg, param, values[r])?;
        cfg.seed = seed;
        let outcome = run(&cfg, teacher, None)?;
        accuracy(&outcome.student, test, Mode::Eval, 100)
    });
    let mut per_row: Vec<Vec<f32>> = vec![Vec::new(); values.len()];
    for (j, res) in results.into_iter().enumerate() {
        per_row[jobs[j].0].push(res?);
    }
    let rows = values
        .iter()
        .zip(per_row)
        .map(|(&value, accuracies)| {
            let (mean, std) = mean_std(&accuracies);
            SweepRow { value, accuracies, mean, std }
        })
        .collect();
    Ok(SweepReport { param: param.to_string(), seeds: seeds.to_vec(), rows })
}
