//! Central finite-difference gradient oracle.
//!
//! Rebuilds the forward computation at perturbed inputs and never touches
//! the reverse-mode path it is checking. The comparison is relative above a
//! magnitude floor of 1: forward values are f32, so at step 1e-3 the
//! difference quotient carries a few 1e-4 of absolute noise and a pure
//! relative test would be meaningless for near-zero entries. A wrong
//! backward rule moves gradients at their own magnitude, far above the
//! floor-scaled tolerance.

use crate::error::Result;
use crate::tensor::Tensor;

/// Scalarize an arbitrary tensor through a fixed random ±1 weighting.
///
/// Keeps the probed value O(1) while leaving per-element gradients at full
/// magnitude, which is what keeps the f32 difference quotient accurate.
pub fn probe(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = crate::rng::SeedStream::new(seed ^ 0x9e37_79b9);
    let signs: Vec<f32> = (0..t.numel())
        .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    Ok(t.mul(&Tensor::from_vec(signs, t.shape()))?.sum())
}

/// d(f)/d(inputs[i]) by central differences, one Vec per input.
pub fn finite_diff(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    step: f32,
) -> Result<Vec<Vec<f32>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut gi = vec![0.0f32; input.numel()];
        for j in 0..input.numel() {
            let eval = |delta: f32| -> Result<f32> {
                let perturbed: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k == i {
                            let mut d = t.data().to_vec();
                            d[j] += delta;
                            Tensor::param(d, t.shape())
                        } else {
                            t.clone()
                        }
                    })
                    .collect();
                let out = f(&perturbed)?;
                Ok(out.item())
            };
            let hi = eval(step)?;
            let lo = eval(-step)?;
            gi[j] = (hi - lo) / (2.0 * step);
        }
        grads.push(gi);
    }
    Ok(grads)
}

/// Run `f`, backpropagate, and compare every input gradient against the
/// finite-difference oracle. Panics with op context on mismatch.
pub fn assert_grads_match(
    name: &str,
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    step: f32,
    rel_tol: f32,
) {
    let out = f(inputs).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
    assert_eq!(out.numel(), 1, "{name}: gradcheck needs a scalar output");
    for t in inputs {
        t.zero_grad();
    }
    out.backward().unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));
    let fd = finite_diff(f, inputs, step).unwrap_or_else(|e| panic!("{name}: oracle failed: {e}"));

    for (i, input) in inputs.iter().enumerate() {
        let an = input
            .grad()
            .unwrap_or_else(|| panic!("{name}: input {i} has no gradient after backward"));
        for j in 0..an.len() {
            let (a, b) = (an[j], fd[i][j]);
            let scale = a.abs().max(b.abs()).max(1.0);
            assert!(
                (a - b).abs() <= rel_tol * scale,
                "{name}: grad mismatch at input {i}[{j}]: reverse {a} vs finite-diff {b}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_matching_and_simple_case() {
        // d/dx of sum(x·x) = 2x
        let x = Tensor::param(vec![0.5, -1.5, 2.0], &[3]);
        let f = |ins: &[Tensor]| Ok(ins[0].square().sum());
        assert_grads_match("square", &f, &[x], 1e-3, 1e-3);
    }
}
