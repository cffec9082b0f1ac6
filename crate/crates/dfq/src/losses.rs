//! Loss terms for generator and student training.
//!
//! Generator side: eval-mode cross-entropy and BN-statistics matching,
//! coarse-grained attention-center matching, the paired-sample adversarial
//! ratio, and train-mode consistency penalties on all three. Student side:
//! cross-entropy against the teacher's eval-mode judgment plus a KL
//! distillation term. All logs are natural-base; every term is a scalar
//! tape tensor so one backward covers the whole objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BatchStatsRecord;
use crate::tensor::{stack_scalars, Tensor};

/// Relaxation factors, penalty coefficients and trade-off weights.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    /// Relaxation added to the attention value before the BCE (ε₁).
    pub relax_cacm: f32,
    /// Dead band of the train/eval attention-distance hinge (ε₂).
    pub relax_penalty: f32,
    /// Train-mode cross-entropy penalty coefficient (ϵ₁).
    pub pen_ce: f32,
    /// Train-mode BN-statistics penalty coefficient (ϵ₂).
    pub pen_bns: f32,
    /// Attention-consistency penalty coefficient (ϵ₃).
    pub pen_cacm: f32,
    /// BN-statistics trade-off (α).
    pub alpha: f32,
    /// Attention-center trade-off (β).
    pub beta: f32,
    /// Adversarial trade-off (γ).
    pub gamma: f32,
    /// Distillation weight in the student objective (τ).
    pub tau: f32,
    /// Additive guard in the adversarial denominator.
    pub js_guard: f32,
}

impl Default for LossWeights {
    /// The small-image profile.
    fn default() -> Self {
        LossWeights {
            relax_cacm: 0.2,
            relax_penalty: 0.1,
            pen_ce: 0.5,
            pen_bns: 1.0,
            pen_cacm: 1.0,
            alpha: 0.5,
            beta: 1.0,
            gamma: 1.0,
            tau: 1.0,
            js_guard: 1e-4,
        }
    }
}

impl LossWeights {
    /// Profile used for large-image runs.
    pub fn imagenet() -> Self {
        LossWeights {
            pen_ce: 0.05,
            pen_bns: 0.5,
            pen_cacm: 1.0,
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("relax_cacm", self.relax_cacm),
            ("relax_penalty", self.relax_penalty),
            ("pen_ce", self.pen_ce),
            ("pen_bns", self.pen_bns),
            ("pen_cacm", self.pen_cacm),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("tau", self.tau),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be nonnegative, got {v}")));
            }
        }
        if !(self.js_guard > 0.0) {
            return Err(Error::Config(format!("js_guard must be positive, got {}", self.js_guard)));
        }
        Ok(())
    }
}

/// Σ over BN layers of ‖μ_batch − μ_stored‖₂² + ‖σ_batch − σ_stored‖₂².
pub fn bns_loss(
    stats: &BatchStatsRecord,
    stored: &[(String, Vec<f32>, Vec<f32>)],
) -> Result<Tensor> {
    if stats.layers.len() != stored.len() {
        return Err(Error::invalid(
            "bns_loss",
            format!("{} observed BN layers vs {} stored", stats.layers.len(), stored.len()),
        ));
    }
    let mut total = Tensor::scalar(0.0);
    for (observed, (site, mean, std)) in stats.layers.iter().zip(stored) {
        if observed.mean.numel() != mean.len() {
            return Err(Error::invalid(
                "bns_loss",
                format!("channel mismatch at {site}: {} vs {}", observed.mean.numel(), mean.len()),
            ));
        }
        let stored_mean = Tensor::from_vec(mean.clone(), &[mean.len()]);
        let stored_std = Tensor::from_vec(std.clone(), &[std.len()]);
        let dm = observed.mean.sub(&stored_mean)?.square().sum();
        let ds = observed.std.sub(&stored_std)?.square().sum();
        total = total.add(&dm)?.add(&ds)?;
    }
    Ok(total)
}

/// Mean over the batch of −log softmax(logits)[label].
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        other => {
            return Err(Error::BadShape {
                op: "ce_loss",
                expected: "N×C logits".into(),
                got: other.to_vec(),
            })
        }
    };
    if labels.len() != n {
        return Err(Error::invalid("ce_loss", "one label per row"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid("ce_loss", format!("label {bad} >= {c} classes")));
    }
    let flat: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    Ok(logits.log_softmax()?.gather(&flat)?.mean().neg())
}

/// Mean over the batch of KL(softmax(teacher) ‖ softmax(student)).
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<Tensor> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            lhs: student_logits.shape().to_vec(),
            rhs: teacher_logits.shape().to_vec(),
        });
    }
    let ls_t = teacher_logits.log_softmax()?;
    let ls_s = student_logits.log_softmax()?;
    let p_t = ls_t.exp();
    Ok(p_t.mul(&ls_t.sub(&ls_s)?)?.sum_rows()?.mean())
}

/// Coarse-grained attention-center matching: the map value at the
/// conditioned cell, relaxed by ε₁ and clamped from above at 1, scored
/// against the "is the center" target: BCE(v, 1) = −ln v, batch-averaged.
pub fn cacm_loss(maps: &Tensor, positions: &[usize], relax: f32) -> Result<Tensor> {
    let (n, hw) = match maps.shape() {
        [n, hw] => (*n, *hw),
        other => {
            return Err(Error::BadShape {
                op: "cacm_loss",
                expected: "N×(h·w) attention maps".into(),
                got: other.to_vec(),
            })
        }
    };
    if positions.len() != n {
        return Err(Error::invalid("cacm_loss", "one position per sample"));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= hw) {
        return Err(Error::invalid("cacm_loss", format!("position {bad} outside grid of {hw}")));
    }
    let flat: Vec<usize> = positions.iter().enumerate().map(|(i, &p)| i * hw + p).collect();
    let v = maps.gather(&flat)?.add_scalar(relax).clamp_max(1.0);
    Ok(v.log()?.mean().neg())
}

/// Hinge on the train/eval attention-map mean absolute difference:
/// max(MAE − ε₂, 0).
pub fn cacm_penalty(maps_train: &Tensor, maps_eval: &Tensor, relax: f32) -> Result<Tensor> {
    if maps_train.shape() != maps_eval.shape() {
        return Err(Error::ShapeMismatch {
            op: "cacm_penalty",
            lhs: maps_train.shape().to_vec(),
            rhs: maps_eval.shape().to_vec(),
        });
    }
    Ok(maps_train.sub(maps_eval)?.abs().mean().add_scalar(-relax).relu())
}

/// Paired-sample adversarial loss: mean over pairs of
/// MAE(z₁, z₂) / (JS(y₁, y₂) + guard), where y₁/y₂ are the softmax of the
/// teacher's eval-mode logits with both judged classes {o₁, o₂} removed.
pub fn adversarial_loss(
    z1: &Tensor,
    z2: &Tensor,
    teacher_logits1: &Tensor,
    teacher_logits2: &Tensor,
    guard: f32,
) -> Result<Tensor> {
    if z1.shape() != z2.shape() {
        return Err(Error::ShapeMismatch {
            op: "adversarial_loss",
            lhs: z1.shape().to_vec(),
            rhs: z2.shape().to_vec(),
        });
    }
    if teacher_logits1.shape() != teacher_logits2.shape() {
        return Err(Error::ShapeMismatch {
            op: "adversarial_loss",
            lhs: teacher_logits1.shape().to_vec(),
            rhs: teacher_logits2.shape().to_vec(),
        });
    }
    let (n, c) = (teacher_logits1.shape()[0], teacher_logits1.shape()[1]);
    if z1.shape()[0] != n {
        return Err(Error::invalid("adversarial_loss", "noise/logits batch mismatch"));
    }
    let o1 = teacher_logits1.argmax_rows();
    let o2 = teacher_logits2.argmax_rows();

    let mut js_per_pair = Vec::with_capacity(n);
    for j in 0..n {
        let keep: Vec<usize> = (0..c).filter(|&k| k != o1[j] && k != o2[j]).collect();
        if keep.len() < 2 {
            return Err(Error::invalid(
                "adversarial_loss",
                format!("non-target distribution degenerate: {} classes left of {c}", keep.len()),
            ));
        }
        let idx: Vec<usize> = keep.iter().map(|&k| j * c + k).collect();
        let ls1 = teacher_logits1.gather(&idx)?.reshape(&[1, keep.len()])?.log_softmax()?;
        let ls2 = teacher_logits2.gather(&idx)?.reshape(&[1, keep.len()])?.log_softmax()?;
        let y1 = ls1.exp();
        let y2 = ls2.exp();
        let m = y1.add(&y2)?.mul_scalar(0.5);
        let log_m = m.log()?;
        let kl1 = y1.mul(&ls1.sub(&log_m)?)?.sum();
        let kl2 = y2.mul(&ls2.sub(&log_m)?)?.sum();
        js_per_pair.push(kl1.add(&kl2)?.mul_scalar(0.5));
    }
    let js = stack_scalars(&js_per_pair)?;
    let mae = z1.sub(z2)?.abs().mean_rows()?;
    Ok(mae.div(&js.add_scalar(guard))?.mean())
}

/// The seven generator loss parts on one paired batch.
#[derive(Debug)]
pub struct GeneratorLossParts {
    pub ce_eval: Tensor,
    pub ce_train_penalty: Tensor,
    pub bns_eval: Tensor,
    pub bns_train_penalty: Tensor,
    pub cacm: Tensor,
    pub cacm_penalty: Tensor,
    pub adversarial: Tensor,
}

/// Plain numbers for logging and reports.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossValues {
    pub ce_eval: f32,
    pub ce_train_penalty: f32,
    pub bns_eval: f32,
    pub bns_train_penalty: f32,
    pub cacm: f32,
    pub cacm_penalty: f32,
    pub adversarial: f32,
    pub total: f32,
}

#[derive(Debug)]
pub struct GeneratorLossBreakdown {
    pub parts: GeneratorLossParts,
    pub total: Tensor,
}

impl GeneratorLossBreakdown {
    pub fn values(&self) -> LossValues {
        LossValues {
            ce_eval: self.parts.ce_eval.item(),
            ce_train_penalty: self.parts.ce_train_penalty.item(),
            bns_eval: self.parts.bns_eval.item(),
            bns_train_penalty: self.parts.bns_train_penalty.item(),
            cacm: self.parts.cacm.item(),
            cacm_penalty: self.parts.cacm_penalty.item(),
            adversarial: self.parts.adversarial.item(),
            total: self.total.item(),
        }
    }
}

/// Weighted combination:
/// total = ce_eval + ϵ₁·ce_train + α·(bns_eval + ϵ₂·bns_train)
///       + β·(cacm + ϵ₃·cacm_penalty) + γ·adversarial.
/// Every part must be finite; the offending term is named otherwise.
pub fn generator_objective(
    parts: GeneratorLossParts,
    weights: &LossWeights,
) -> Result<GeneratorLossBreakdown> {
    for (name, t) in [
        ("ce_eval", &parts.ce_eval),
        ("ce_train_penalty", &parts.ce_train_penalty),
        ("bns_eval", &parts.bns_eval),
        ("bns_train_penalty", &parts.bns_train_penalty),
        ("cacm", &parts.cacm),
        ("cacm_penalty", &parts.cacm_penalty),
        ("adversarial", &parts.adversarial),
    ] {
        if !t.all_finite() {
            return Err(Error::NonFinite { context: format!("generator loss term {name}") });
        }
    }
    let ce = parts.ce_eval.add(&parts.ce_train_penalty.mul_scalar(weights.pen_ce))?;
    let bns = parts
        .bns_eval
        .add(&parts.bns_train_penalty.mul_scalar(weights.pen_bns))?
        .mul_scalar(weights.alpha);
    let attn = parts
        .cacm
        .add(&parts.cacm_penalty.mul_scalar(weights.pen_cacm))?
        .mul_scalar(weights.beta);
    let adv = parts.adversarial.mul_scalar(weights.gamma);
    let total = ce.add(&bns)?.add(&attn)?.add(&adv)?;
    Ok(GeneratorLossBreakdown { parts, total })
}

/// Student objective: CE against the teacher's eval-mode argmax (not the
/// generator's condition label) plus τ-weighted distillation.
pub fn student_objective(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    let hard_targets = teacher_logits.argmax_rows();
    let ce = ce_loss(student_logits, &hard_targets)?;
    let kd = kd_loss(student_logits, teacher_logits)?;
    let total = ce.add(&kd.mul_scalar(weights.tau))?;
    if !total.all_finite() {
        return Err(Error::NonFinite { context: "student objective".into() });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, probe};
    use crate::graph::{BnStats, Mode};
    use crate::rng::SeedStream;

    fn close(a: f32, b: f32, tol: f32) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn record(mean: Vec<f32>, std: Vec<f32>) -> BatchStatsRecord {
        let c = mean.len();
        BatchStatsRecord {
            mode: Mode::Eval,
            layers: vec![BnStats {
                site: "l1".into(),
                mean: Tensor::from_vec(mean, &[c]),
                std: Tensor::from_vec(std, &[c]),
            }],
        }
    }

    #[test]
    fn bns_zero_when_matching() {
        let rec = record(vec![0.3, -0.1], vec![1.2, 0.9]);
        let stored = vec![("l1".to_string(), vec![0.3, -0.1], vec![1.2, 0.9])];
        close(bns_loss(&rec, &stored).unwrap().item(), 0.0, 1e-7);
    }

    #[test]
    fn bns_hand_value_and_quadratic_scaling() {
        // μ^s=[1,0], μ=[0,0], σ equal → ‖·‖² = 1
        let rec = record(vec![1.0, 0.0], vec![1.0, 1.0]);
        let stored = vec![("l1".to_string(), vec![0.0, 0.0], vec![1.0, 1.0])];
        close(bns_loss(&rec, &stored).unwrap().item(), 1.0, 1e-6);

        let rec2 = record(vec![2.0, 0.0], vec![1.0, 1.0]);
        close(bns_loss(&rec2, &stored).unwrap().item(), 4.0, 1e-6);
    }

    #[test]
    fn bns_rejects_structure_mismatch() {
        let rec = record(vec![0.0], vec![1.0]);
        let stored = vec![("l1".to_string(), vec![0.0, 0.0], vec![1.0, 1.0])];
        assert!(bns_loss(&rec, &stored).is_err());
        assert!(bns_loss(&rec, &[]).is_err());
    }

    #[test]
    fn ce_known_values() {
        // strongly peaked → ~0
        let peaked = Tensor::from_vec(vec![30.0, 0.0, 0.0], &[1, 3]);
        assert!(ce_loss(&peaked, &[0]).unwrap().item() < 1e-6);

        // uniform logits over 10 classes → ln 10
        let uniform = Tensor::from_vec(vec![0.5; 10], &[1, 10]);
        close(ce_loss(&uniform, &[3]).unwrap().item(), 10f32.ln(), 1e-6);

        // logits [2,0], label 0 → −ln(e²/(e²+1)) ≈ 0.126928
        let two = Tensor::from_vec(vec![2.0, 0.0], &[1, 2]);
        close(ce_loss(&two, &[0]).unwrap().item(), 0.126928, 1e-5);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(ce_loss(&logits, &[0, 3]).is_err());
        assert!(ce_loss(&logits, &[0]).is_err());
    }

    #[test]
    fn kd_known_values() {
        let mut rng = SeedStream::new(1);
        let logits = rng.normal_tensor(&[4, 6]);
        close(kd_loss(&logits, &logits).unwrap().item(), 0.0, 1e-7);

        // teacher ≈ one-hot (1,0), student uniform → KL ≈ ln 2
        let teacher = Tensor::from_vec(vec![40.0, 0.0], &[1, 2]);
        let student = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]);
        close(kd_loss(&student, &teacher).unwrap().item(), 2f32.ln(), 1e-5);
    }

    #[test]
    fn kd_nonnegative_on_random_pairs() {
        let mut rng = SeedStream::new(2);
        for _ in 0..1000 {
            let a = rng.normal_tensor(&[2, 5]).mul_scalar(3.0);
            let b = rng.normal_tensor(&[2, 5]).mul_scalar(3.0);
            assert!(kd_loss(&a, &b).unwrap().item() >= -1e-6);
        }
    }

    #[test]
    fn cacm_known_values() {
        let maps = Tensor::from_vec(vec![1.0, 0.0, 0.6, 0.0, 0.9, 0.0], &[3, 2]);
        // M(p)=1 → v=1 → 0
        close(cacm_loss(&maps.slice_rows_for_test(0), &[0], 0.2).unwrap().item(), 0.0, 1e-6);
        // M(p)=0.6, ε₁=0.2 → −ln 0.8
        close(cacm_loss(&maps.slice_rows_for_test(1), &[0], 0.2).unwrap().item(), -(0.8f32.ln()), 1e-5);
        // M(p)=0.9, ε₁=0.2 → clamped at 1 → 0
        close(cacm_loss(&maps.slice_rows_for_test(2), &[0], 0.2).unwrap().item(), 0.0, 1e-6);
        // out-of-range position
        assert!(cacm_loss(&maps, &[0, 0, 2], 0.2).is_err());
    }

    #[test]
    fn cacm_penalty_hinge() {
        let a = Tensor::from_vec(vec![0.5; 4], &[2, 2]);
        close(cacm_penalty(&a, &a, 0.1).unwrap().item(), 0.0, 1e-7);
        // MAE 0.3, ε₂=0.1 → 0.2
        let b = a.add_scalar(0.3);
        close(cacm_penalty(&b, &a, 0.1).unwrap().item(), 0.2, 1e-6);
        // MAE 0.05 inside the band → 0
        let c = a.add_scalar(0.05);
        close(cacm_penalty(&c, &a, 0.1).unwrap().item(), 0.0, 1e-7);
        let tall = Tensor::zeros(&[4, 1]);
        assert!(cacm_penalty(&a, &tall, 0.1).is_err());
    }

    #[test]
    fn adversarial_known_values() {
        let n = 2;
        // identical noise → MAE 0 → loss 0
        let z = Tensor::from_vec(vec![0.3, -0.4, 0.1, 0.9], &[n, 2]);
        let logits = Tensor::from_vec(vec![5.0, 0.0, 1.0, 2.0, 0.0, 5.0, 2.0, 1.0], &[n, 4]);
        close(adversarial_loss(&z, &z, &logits, &logits, 1e-4).unwrap().item(), 0.0, 1e-6);

        // identical remainders → JS 0 → MAE/guard
        let z2 = z.add_scalar(0.5);
        let v = adversarial_loss(&z, &z2, &logits, &logits, 1e-4).unwrap().item();
        close(v, 0.5 / 1e-4, 1.0);

        // remainders (1,0) vs (0,1): JS = ln 2; MAE(z)=0.5 → 0.5/ln 2
        let l1 = Tensor::from_vec(vec![50.0, 0.0, 40.0, 0.0], &[1, 4]);
        let l2 = Tensor::from_vec(vec![0.0, 50.0, 0.0, 40.0], &[1, 4]);
        let za = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]);
        let zb = Tensor::from_vec(vec![0.5, 0.5], &[1, 2]);
        let v = adversarial_loss(&za, &zb, &l1, &l2, 0.0).unwrap().item();
        close(v, 0.5 / 2f32.ln(), 1e-4);
    }

    #[test]
    fn adversarial_rejects_degenerate_remainder() {
        // C=3 with distinct argmaxes leaves a single class
        let l1 = Tensor::from_vec(vec![9.0, 0.0, 1.0], &[1, 3]);
        let l2 = Tensor::from_vec(vec![0.0, 9.0, 1.0], &[1, 3]);
        let z = Tensor::zeros(&[1, 2]);
        assert!(adversarial_loss(&z, &z, &l1, &l2, 1e-4).is_err());
    }

    #[test]
    fn js_symmetry_and_upper_bound() {
        let mut rng = SeedStream::new(3);
        for _ in 0..200 {
            let l1 = rng.normal_tensor(&[1, 6]).mul_scalar(2.0);
            let l2 = rng.normal_tensor(&[1, 6]).mul_scalar(2.0);
            let z1 = Tensor::zeros(&[1, 3]);
            let z2 = Tensor::from_vec(vec![1.0, 1.0, 1.0], &[1, 3]);
            // loss = 1/(JS+g): symmetric iff JS symmetric
            let a = adversarial_loss(&z1, &z2, &l1, &l2, 1e-4).unwrap().item();
            let b = adversarial_loss(&z1, &z2, &l2, &l1, 1e-4).unwrap().item();
            close(a, b, a.abs() * 1e-4 + 1e-4);
            // JS ≤ ln 2 ⇒ loss ≥ MAE/(ln2 + g)
            assert!(a >= 1.0 / (2f32.ln() + 1e-4) - 1e-3);
        }
    }

    #[test]
    fn objective_combination() {
        let zero = || Tensor::scalar(0.0);
        let parts = GeneratorLossParts {
            ce_eval: zero(),
            ce_train_penalty: zero(),
            bns_eval: zero(),
            bns_train_penalty: zero(),
            cacm: zero(),
            cacm_penalty: zero(),
            adversarial: zero(),
        };
        let w = LossWeights::default();
        close(generator_objective(parts, &w).unwrap().total.item(), 0.0, 0.0);

        // all parts 1 with the small-image profile:
        // 1 + 0.5 + 0.5·(1 + 1) + 1·(1 + 1) + 1 = 5.5
        let one = || Tensor::scalar(1.0);
        let parts = GeneratorLossParts {
            ce_eval: one(),
            ce_train_penalty: one(),
            bns_eval: one(),
            bns_train_penalty: one(),
            cacm: one(),
            cacm_penalty: one(),
            adversarial: one(),
        };
        let bd = generator_objective(parts, &w).unwrap();
        close(bd.total.item(), 5.5, 1e-6);

        // breakdown recombines to the total
        let v = bd.values();
        let recombined = v.ce_eval
            + w.pen_ce * v.ce_train_penalty
            + w.alpha * (v.bns_eval + w.pen_bns * v.bns_train_penalty)
            + w.beta * (v.cacm + w.pen_cacm * v.cacm_penalty)
            + w.gamma * v.adversarial;
        close(v.total, recombined, 1e-6);
    }

    #[test]
    fn imagenet_profile_constants() {
        let w = LossWeights::imagenet();
        assert_eq!((w.pen_ce, w.pen_bns, w.pen_cacm), (0.05, 0.5, 1.0));
        assert_eq!((w.alpha, w.beta, w.gamma), (0.1, 1.0, 0.5));
        let d = LossWeights::default();
        assert_eq!((d.pen_ce, d.pen_bns, d.pen_cacm), (0.5, 1.0, 1.0));
        assert_eq!((d.alpha, d.beta, d.gamma), (0.5, 1.0, 1.0));
        assert_eq!((d.relax_cacm, d.relax_penalty), (0.2, 0.1));
    }

    #[test]
    fn objective_names_non_finite_term() {
        let parts = GeneratorLossParts {
            ce_eval: Tensor::scalar(0.0),
            ce_train_penalty: Tensor::scalar(0.0),
            bns_eval: Tensor::scalar(f32::NAN),
            bns_train_penalty: Tensor::scalar(0.0),
            cacm: Tensor::scalar(0.0),
            cacm_penalty: Tensor::scalar(0.0),
            adversarial: Tensor::scalar(0.0),
        };
        let err = generator_objective(parts, &LossWeights::default()).unwrap_err().to_string();
        assert!(err.contains("bns_eval"), "{err}");
    }

    #[test]
    fn student_objective_cases() {
        let w = LossWeights::default();
        let mut rng = SeedStream::new(4);
        let teacher = rng.normal_tensor(&[3, 5]).mul_scalar(3.0);
        // student == teacher → KD = 0, total = CE against argmax
        let total = student_objective(&teacher, &teacher, &w).unwrap().item();
        let ce = ce_loss(&teacher, &teacher.argmax_rows()).unwrap().item();
        close(total, ce, 1e-6);

        // τ = 0 → pure CE
        let student = rng.normal_tensor(&[3, 5]);
        let w0 = LossWeights { tau: 0.0, ..w };
        let total = student_objective(&student, &teacher, &w0).unwrap().item();
        let ce = ce_loss(&student, &teacher.argmax_rows()).unwrap().item();
        close(total, ce, 1e-6);

        // the hard target is the teacher's judgment, not the condition label
        let t = Tensor::from_vec(vec![0.0, 0.0, 9.0], &[1, 3]);
        let s = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]);
        let total = student_objective(&s, &t, &w0).unwrap().item();
        close(total, ce_loss(&s, &[2]).unwrap().item(), 1e-6);
    }

    #[test]
    fn all_losses_nonnegative_on_random_inputs() {
        let mut rng = SeedStream::new(5);
        for _ in 0..50 {
            let maps = {
                let raw = rng.normal_tensor(&[2, 9]).square();
                let mx = raw.row_max().unwrap();
                raw.div_rows(&mx.add_scalar(1e-6)).unwrap()
            };
            assert!(cacm_loss(&maps, &[1, 7], 0.2).unwrap().item() >= 0.0);
            let a = rng.normal_tensor(&[2, 9]);
            let b = rng.normal_tensor(&[2, 9]);
            assert!(cacm_penalty(&a, &b, 0.1).unwrap().item() >= 0.0);
            let logits = rng.normal_tensor(&[2, 6]);
            assert!(ce_loss(&logits, &[0, 5]).unwrap().item() >= 0.0);
        }
    }

    #[test]
    fn gradcheck_loss_terms() {
        let mut rng = SeedStream::new(6);
        // cross-entropy w.r.t. logits
        let logits = rng.normal_tensor(&[3, 5]).to_param();
        assert_grads_match("ce_loss", &|i: &[Tensor]| ce_loss(&i[0], &[0, 3, 2]), &[logits], 1e-3, 1e-3);

        // distillation w.r.t. both logit sets
        let s = rng.normal_tensor(&[3, 5]).to_param();
        let t = rng.normal_tensor(&[3, 5]).to_param();
        assert_grads_match("kd_loss", &|i: &[Tensor]| kd_loss(&i[0], &i[1]), &[s, t], 1e-3, 1e-3);

        // attention-center matching w.r.t. map values (away from the clamp corner)
        let maps = Tensor::param(vec![0.1, 0.4, 0.2, 0.55, 0.3, 0.05], &[2, 3]);
        assert_grads_match("cacm_loss", &|i: &[Tensor]| cacm_loss(&i[0], &[1, 0], 0.2), &[maps], 1e-3, 1e-3);

        // consistency hinge away from the corner
        let a = Tensor::param(vec![0.9, 0.1, 0.8, 0.3], &[2, 2]);
        let b = Tensor::param(vec![0.2, 0.6, 0.1, 0.9], &[2, 2]);
        assert_grads_match("cacm_penalty", &|i: &[Tensor]| cacm_penalty(&i[0], &i[1], 0.1), &[a, b], 1e-3, 1e-3);

        // adversarial w.r.t. the teacher logits (argmaxes stay fixed under
        // the probe steps because the margins are large)
        let l1 = Tensor::param(vec![6.0, 0.1, 0.5, -0.4, 0.2, 6.0, -0.3, 0.6], &[2, 4]);
        let l2 = Tensor::param(vec![6.0, 0.3, -0.2, 0.4, 0.5, 6.0, 0.2, -0.6], &[2, 4]);
        let z1 = rng.normal_tensor(&[2, 3]);
        let z2 = rng.normal_tensor(&[2, 3]);
        assert_grads_match(
            "adversarial_loss",
            &|i: &[Tensor]| adversarial_loss(&z1, &z2, &i[0], &i[1], 1e-2),
            &[l1, l2],
            1e-3,
            1e-3,
        );

        // statistics matching w.r.t. batch stats
        let mean = rng.normal_tensor(&[4]).to_param();
        let std = rng.normal_tensor(&[4]).square().add_scalar(0.5);
        let std = Tensor::param(std.data().to_vec(), &[4]);
        let stored = vec![("l1".to_string(), vec![0.1, -0.2, 0.0, 0.4], vec![1.0, 0.8, 1.2, 1.1])];
        assert_grads_match(
            "bns_loss",
            &|i: &[Tensor]| {
                let rec = BatchStatsRecord {
                    mode: Mode::Eval,
                    layers: vec![BnStats { site: "l1".into(), mean: i[0].clone(), std: i[1].clone() }],
                };
                bns_loss(&rec, &stored)
            },
            &[mean, std],
            1e-3,
            1e-3,
        );

        // student objective w.r.t. student logits
        let st = rng.normal_tensor(&[3, 5]).to_param();
        let te = rng.normal_tensor(&[3, 5]).mul_scalar(2.0);
        assert_grads_match(
            "student_objective",
            &|i: &[Tensor]| student_objective(&i[0], &te, &LossWeights::default()),
            &[st],
            1e-3,
            1e-3,
        );
    }

    impl Tensor {
        // row view helper for the hand-value tests
        fn slice_rows_for_test(&self, row: usize) -> Tensor {
            let cols = self.shape()[1];
            Tensor::from_vec(self.data()[row * cols..(row + 1) * cols].to_vec(), &[1, cols])
        }
    }
}
