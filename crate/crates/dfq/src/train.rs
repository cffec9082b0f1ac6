//! The alternating data-free quantization training loop.
//!
//! Per iteration: draw per-sample labels y and attention positions p, two
//! noise groups z₁/z₂ sharing those conditions, synthesize both batches,
//! run the frozen teacher in eval mode (and train mode when consistency
//! penalties are on), combine the generator objective and step the
//! generator. During warm-up the quantized student only observes its
//! activation bounds on the fresh samples; afterwards every iteration also
//! takes one student step against the teacher's eval-mode judgment.
//!
//! Everything is driven by one seeded stream, so a (seed, config) pair
//! fixes the whole trajectory bitwise.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attention::attention_map_tensor;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorNet};
use crate::graph::{LayerGraph, Mode};
use crate::losses::{
    adversarial_loss, bns_loss, cacm_loss, cacm_penalty, ce_loss, generator_objective,
    student_objective, GeneratorLossBreakdown, GeneratorLossParts, LossValues, LossWeights,
};
use crate::opt::{Adam, Momentum};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bits_w: u8,
    pub bits_a: u8,
    /// Exempt the first and last weight layers from quantization.
    pub skip_first_last: bool,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub gen_lr: f32,
    pub student_lr: f32,
    pub student_momentum: f32,
    pub lr_decay: f32,
    /// Epochs between learning-rate decays; `None` scales the reference
    /// schedule (a decay every quarter of the run).
    pub lr_step_epochs: Option<usize>,
    pub enable_cacm: bool,
    pub enable_ad: bool,
    pub enable_penalty: bool,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// The desk-scale profile: 50 epochs × 50 iterations, batch 16,
    /// 2 warm-up epochs, 4-bit weights and activations.
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            iters_per_epoch: 50,
            warmup_epochs: 2,
            batch_size: 16,
            seed: 0,
            bits_w: 4,
            bits_a: 4,
            skip_first_last: false,
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            gen_lr: 1e-3,
            student_lr: 1e-4,
            student_momentum: 0.9,
            lr_decay: 0.1,
            lr_step_epochs: None,
            enable_cacm: true,
            enable_ad: true,
            enable_penalty: true,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// The reference full-scale schedule (400 epochs × 200 iterations,
    /// generator lr 1e-3 decayed ×0.1 every 100 epochs).
    pub fn reference_profile() -> Self {
        TrainConfig {
            epochs: 400,
            iters_per_epoch: 200,
            warmup_epochs: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.iters_per_epoch == 0 {
            return Err(Error::Config("iters_per_epoch must be positive".into()));
        }
        self.weights.validate()
    }

    /// Generator learning rate at an epoch: lr₀ · decay^k with k stepping
    /// every quarter of the run (exactly every 100 epochs at 400), or at
    /// the explicit `lr_step_epochs` interval.
    pub fn lr_at(&self, base: f32, epoch: usize) -> f32 {
        let k = match self.lr_step_epochs {
            Some(step) => (epoch / step.max(1)) as i32,
            None => (4.0 * epoch as f64 / self.epochs as f64).floor() as i32,
        };
        base * self.lr_decay.powi(k)
    }

    pub fn total_iters(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    pub fn warmup_iters(&self) -> usize {
        self.warmup_epochs * self.iters_per_epoch
    }
}

/// One emitted log record per iteration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossValues,
    pub student_loss: Option<f32>,
    pub lr_generator: f32,
    pub lr_student: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub iterations: usize,
    pub final_generator_loss: LossValues,
    pub final_student_loss: f32,
    pub teacher_digest: String,
    pub student_digest: String,
    pub generator_digest: String,
}

pub struct RunOutcome {
    pub generator: GeneratorNet,
    pub student: LayerGraph,
    pub report: RunReport,
    pub history: Vec<IterRecord>,
}

pub struct RunState {
    pub iteration: usize,
    pub teacher: LayerGraph,
    pub student: LayerGraph,
    pub generator: GeneratorNet,
    pub rng: SeedStream,
    pub gen_opt: Adam,
    pub student_opt: Momentum,
    grid_hw: (usize, usize),
}

impl RunState {
    /// Prepare a run: freeze the teacher, fake-quantize a student copy,
    /// and size the generator's position grid off the teacher's backbone.
    pub fn new(cfg: &TrainConfig, teacher: &LayerGraph) -> Result<Self> {
        cfg.validate()?;
        let mut student = crate::quant::quantize_graph(teacher, cfg.bits_w, cfg.bits_a, cfg.skip_first_last)?;
        student.make_trainable();
        let mut frozen_teacher = teacher.clone();
        frozen_teacher.freeze_params();

        // probe the backbone grid
        let probe = Tensor::zeros(&[2, 3, crate::data::IMAGE_HW, crate::data::IMAGE_HW]);
        let backbone = frozen_teacher.forward(&probe, Mode::Eval, false)?.backbone;
        let (gh, gw) = (backbone.shape()[2], backbone.shape()[3]);

        let mut gen_cfg = cfg.generator.clone();
        gen_cfg.num_classes = teacher.num_classes;
        gen_cfg.grid_h = gh;
        gen_cfg.grid_w = gw;
        let generator = GeneratorNet::new(gen_cfg, cfg.seed ^ 0x9e00)?;

        Ok(RunState {
            iteration: 0,
            teacher: frozen_teacher,
            student,
            generator,
            rng: SeedStream::new(cfg.seed),
            gen_opt: Adam::new(cfg.gen_lr),
            student_opt: Momentum::new(cfg.student_lr, cfg.student_momentum),
            grid_hw: (gh, gw),
        })
    }

    fn draw_conditions(&mut self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let classes = self.teacher.num_classes;
        let hw = self.grid_hw.0 * self.grid_hw.1;
        let y = (0..n).map(|_| self.rng.uniform_int(classes)).collect();
        let p = (0..n).map(|_| self.rng.uniform_int(hw)).collect();
        (y, p)
    }

    /// One generator update on a paired batch; the teacher is untouched.
    /// Returns the loss breakdown plus the two detached sample batches
    /// (the warm-up branch feeds exactly these to the student observers).
    pub fn train_step_generator(
        &mut self,
        cfg: &TrainConfig,
    ) -> Result<(GeneratorLossBreakdown, Tensor, Tensor)> {
        let n = cfg.batch_size;
        let zdim = self.generator.config.z_dim;
        let (y, p) = self.draw_conditions(n);
        let z1 = self.rng.normal_tensor(&[n, zdim]);
        let z2 = self.rng.normal_tensor(&[n, zdim]);
        let x1 = self.generator.generate(&z1, &y, &p)?;
        let x2 = self.generator.generate(&z2, &y, &p)?;

        let stored = self.teacher.stored_bn_stats();
        let eval1 = self.teacher.forward(&x1, Mode::Eval, true)?;
        let eval2 = self.teacher.forward(&x2, Mode::Eval, true)?;

        let half = |a: Tensor, b: Tensor| -> Result<Tensor> { a.add(&b).map(|s| s.mul_scalar(0.5)) };

        let ce_eval = half(ce_loss(&eval1.logits, &y)?, ce_loss(&eval2.logits, &y)?)?;
        let bns_eval = half(
            bns_loss(eval1.stats.as_ref().unwrap(), &stored)?,
            bns_loss(eval2.stats.as_ref().unwrap(), &stored)?,
        )?;

        let need_maps = cfg.enable_cacm || cfg.enable_penalty;
        let maps_eval = if need_maps {
            Some((attention_map_tensor(&eval1.backbone)?, attention_map_tensor(&eval2.backbone)?))
        } else {
            None
        };

        let cacm = if cfg.enable_cacm {
            let (m1, m2) = maps_eval.as_ref().unwrap();
            half(
                cacm_loss(m1, &p, cfg.weights.relax_cacm)?,
                cacm_loss(m2, &p, cfg.weights.relax_cacm)?,
            )?
        } else {
            Tensor::scalar(0.0)
        };

        let adversarial = if cfg.enable_ad {
            adversarial_loss(&z1, &z2, &eval1.logits, &eval2.logits, cfg.weights.js_guard)?
        } else {
            Tensor::scalar(0.0)
        };

        let (ce_train_penalty, bns_train_penalty, cacm_pen) = if cfg.enable_penalty {
            let train1 = self.teacher.forward(&x1, Mode::Train, true)?;
            let train2 = self.teacher.forward(&x2, Mode::Train, true)?;
            let ce_tr = half(ce_loss(&train1.logits, &y)?, ce_loss(&train2.logits, &y)?)?;
            let bns_tr = half(
                bns_loss(train1.stats.as_ref().unwrap(), &stored)?,
                bns_loss(train2.stats.as_ref().unwrap(), &stored)?,
            )?;
            let (me1, me2) = maps_eval.as_ref().unwrap();
            let mt1 = attention_map_tensor(&train1.backbone)?;
            let mt2 = attention_map_tensor(&train2.backbone)?;
            let pen = half(
                cacm_penalty(&mt1, me1, cfg.weights.relax_penalty)?,
                cacm_penalty(&mt2, me2, cfg.weights.relax_penalty)?,
            )?;
            (ce_tr, bns_tr, pen)
        } else {
            (Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0))
        };

        let breakdown = generator_objective(
            GeneratorLossParts {
                ce_eval,
                ce_train_penalty,
                bns_eval,
                bns_train_penalty,
                cacm,
                cacm_penalty: cacm_pen,
                adversarial,
            },
            &cfg.weights,
        )?;
        breakdown.total.backward()?;
        self.gen_opt.begin_step();
        let opt = &mut self.gen_opt;
        self.generator.visit_params_mut(&mut |name, t| opt.step_param(name, t));
        Ok((breakdown, x1.detach(), x2.detach()))
    }

    /// Warm-up branch: feed a fresh paired batch through the student's
    /// open activation observers. No parameter moves.
    pub fn warmup_observe(&mut self, x1: &Tensor, x2: &Tensor) -> Result<()> {
        self.student.calibrate(x1)?;
        self.student.calibrate(x2)
    }

    /// One student update on a fresh synthetic batch.
    pub fn train_step_student(&mut self, cfg: &TrainConfig) -> Result<f32> {
        let n = cfg.batch_size;
        let zdim = self.generator.config.z_dim;
        let (y, p) = self.draw_conditions(n);
        let z = self.rng.normal_tensor(&[n, zdim]);
        let x = self.generator.generate(&z, &y, &p)?.detach();
        let teacher_logits = self.teacher.forward(&x, Mode::Eval, false)?.logits;
        let student_logits = self.student.forward(&x, Mode::Eval, false)?.logits;
        let loss = student_objective(&student_logits, &teacher_logits, &cfg.weights)?;
        let value = loss.item();
        loss.backward()?;
        let opt = &mut self.student_opt;
        self.student.visit_params_mut(&mut |name, t| opt.step_param(name, t));
        Ok(value)
    }
}

/// Run the full pipeline on a pretrained teacher. `iter_log`, when given,
/// receives one JSON line per iteration.
pub fn run(
    cfg: &TrainConfig,
    teacher: &LayerGraph,
    mut iter_log: Option<&mut dyn Write>,
) -> Result<RunOutcome> {
    let mut state = RunState::new(cfg, teacher)?;
    let teacher_digest = state.teacher.digest();
    let student_bn_digest = state.student.bn_digest();
    let warmup_iters = cfg.warmup_iters();
    let mut history = Vec::with_capacity(cfg.total_iters());
    let mut last_breakdown: Option<LossValues> = None;
    let mut last_student_loss = f32::NAN;

    for t in 0..cfg.total_iters() {
        let epoch = t / cfg.iters_per_epoch;
        state.gen_opt.set_lr(cfg.lr_at(cfg.gen_lr, epoch));
        state.student_opt.set_lr(cfg.lr_at(cfg.student_lr, epoch));

        state.iteration = t;
        let (breakdown, x1, x2) = state.train_step_generator(cfg)?;
        let losses = breakdown.values();

        let student_loss = if t < warmup_iters {
            state.warmup_observe(&x1, &x2)?;
            if t + 1 == warmup_iters {
                state.student.freeze_activation_quantizers()?;
            }
            None
        } else {
            let v = state.train_step_student(cfg)?;
            last_student_loss = v;
            Some(v)
        };

        let record = IterRecord {
            t,
            epoch,
            losses,
            student_loss,
            lr_generator: state.gen_opt.lr(),
            lr_student: state.student_opt.lr(),
        };
        if let Some(w) = iter_log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        history.push(record);
        last_breakdown = Some(losses);

        let end_of_epoch = (t + 1) % cfg.iters_per_epoch == 0;
        if end_of_epoch {
            if state.teacher.digest() != teacher_digest {
                return Err(Error::Config("teacher parameters changed during the run".into()));
            }
            if state.student.bn_digest() != student_bn_digest {
                return Err(Error::Config("student stored BN statistics changed during the run".into()));
            }
            if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) {
                let epoch_now = epoch + 1;
                if epoch_now % every == 0 && epoch_now < cfg.epochs {
                    let base = dir.join(format!("epoch_{epoch_now:04}"));
                    crate::archive::save_graph(&state.student, &base.join("student"))?;
                    crate::archive::save_generator(&state.generator, &base.join("generator"))?;
                }
            }
        }
    }

    let report = RunReport {
        config: cfg.clone(),
        iterations: cfg.total_iters(),
        final_generator_loss: last_breakdown.expect("at least one iteration"),
        final_student_loss: last_student_loss,
        teacher_digest,
        student_digest: state.student.digest(),
        generator_digest: state.generator.digest(),
    };
    Ok(RunOutcome { generator: state.generator, student: state.student, report, history })
}
