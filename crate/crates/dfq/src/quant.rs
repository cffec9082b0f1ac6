//! Asymmetric uniform fake quantization.
//!
//! A site holds the bit width n and bounds (l, u); the derived scale is
//! s = (u−l)/(2ⁿ−1) and the offset b = l/s + 2ⁿ⁻¹. Quantization maps
//! x → clip(round(x/s − b), −2ⁿ⁻¹, 2ⁿ⁻¹−1) and back to (q + b)·s.
//! The backward rule is straight-through with bound clamping: gradient 1
//! for l ≤ x ≤ u, 0 outside.
//!
//! Weight sites are per-channel (bounds from the current weights, frozen
//! immediately); activation sites are per-layer with running min/max
//! observers that stay open until warm-up calibration ends.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerGraph};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerLayer,
    PerChannel,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QuantParams {
    pub l: f32,
    pub u: f32,
    pub s: f32,
    pub b: f32,
}

impl QuantParams {
    fn from_bounds(l: f32, u: f32, bits: u8) -> Self {
        let levels = (1u32 << bits) as f32 - 1.0;
        let s = (u - l) / levels;
        let b = l / s + (1u32 << (bits - 1)) as f32;
        QuantParams { l, u, s, b }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantizerState {
    bits: u8,
    granularity: Granularity,
    /// running (min, max) per channel while open; one entry for per-layer
    observer: Vec<(f32, f32)>,
    observed: bool,
    params: Option<Vec<QuantParams>>,
    frozen: bool,
}

impl QuantizerState {
    pub fn per_layer(bits: u8) -> Self {
        assert!((1..=16).contains(&bits));
        QuantizerState {
            bits,
            granularity: Granularity::PerLayer,
            observer: vec![(f32::INFINITY, f32::NEG_INFINITY)],
            observed: false,
            params: None,
            frozen: false,
        }
    }

    pub fn per_channel(bits: u8, channels: usize) -> Self {
        assert!((1..=16).contains(&bits));
        assert!(channels > 0);
        QuantizerState {
            bits,
            granularity: Granularity::PerChannel,
            observer: vec![(f32::INFINITY, f32::NEG_INFINITY); channels],
            observed: false,
            params: None,
            frozen: false,
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Frozen (l, u) per channel; one entry for per-layer states.
    pub fn bounds(&self) -> Option<Vec<(f32, f32)>> {
        self.params.as_ref().map(|p| p.iter().map(|q| (q.l, q.u)).collect())
    }

    /// Update running min/max from a value tensor. Per-channel states treat
    /// the first axis as the channel axis.
    pub fn observe(&mut self, x: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Quantizer("observe on a frozen state".into()));
        }
        match self.granularity {
            Granularity::PerLayer => {
                let (mn, mx) = &mut self.observer[0];
                for &v in x.data() {
                    *mn = mn.min(v);
                    *mx = mx.max(v);
                }
            }
            Granularity::PerChannel => {
                let channels = self.observer.len();
                if x.shape().first() != Some(&channels) || x.numel() % channels != 0 {
                    return Err(Error::Quantizer(format!(
                        "observe: shape {:?} does not split into {channels} channels",
                        x.shape()
                    )));
                }
                let row = x.numel() / channels;
                for (ch, (mn, mx)) in self.observer.iter_mut().enumerate() {
                    for &v in &x.data()[ch * row..(ch + 1) * row] {
                        *mn = mn.min(v);
                        *mx = mx.max(v);
                    }
                }
            }
        }
        self.observed = true;
        Ok(())
    }

    /// Fix (l, u) from the observed extrema and derive (s, b).
    pub fn freeze(&mut self, site: &str) -> Result<()> {
        if self.frozen {
            return Err(Error::Quantizer(format!("{site}: already frozen")));
        }
        if !self.observed {
            return Err(Error::Quantizer(format!("{site}: freeze without any observation")));
        }
        let mut params = Vec::with_capacity(self.observer.len());
        for (ch, &(l, u)) in self.observer.iter().enumerate() {
            if !(u > l) {
                return Err(Error::Quantizer(format!(
                    "{site}: degenerate bounds l={l} u={u} in channel {ch}"
                )));
            }
            params.push(QuantParams::from_bounds(l, u, self.bits));
        }
        self.params = Some(params);
        self.frozen = true;
        Ok(())
    }

    /// Observe one tensor and freeze — how weight sites are initialized.
    pub fn freeze_from(&mut self, x: &Tensor, site: &str) -> Result<()> {
        self.observe(x)?;
        self.freeze(site)
    }

    /// Eq-style fake quantization with the straight-through backward rule.
    pub fn fake_quantize(&self, x: &Tensor) -> Result<Tensor> {
        let Some(params) = &self.params else {
            return Err(Error::Quantizer("fake_quantize on an unfrozen state".into()));
        };
        let qmin = -((1i64 << (self.bits - 1)) as f32);
        let qmax = (1i64 << (self.bits - 1)) as f32 - 1.0;
        let quantize = |v: f32, p: &QuantParams| -> f32 {
            let q = (v / p.s - p.b).round().clamp(qmin, qmax);
            (q + p.b) * p.s
        };
        let (data, per_channel) = match self.granularity {
            Granularity::PerLayer => {
                let p = &params[0];
                (x.data().iter().map(|&v| quantize(v, p)).collect::<Vec<_>>(), false)
            }
            Granularity::PerChannel => {
                let channels = params.len();
                if x.shape().first() != Some(&channels) || x.numel() % channels != 0 {
                    return Err(Error::Quantizer(format!(
                        "fake_quantize: shape {:?} does not split into {channels} channels",
                        x.shape()
                    )));
                }
                let row = x.numel() / channels;
                let mut out = Vec::with_capacity(x.numel());
                for (ch, p) in params.iter().enumerate() {
                    out.extend(x.data()[ch * row..(ch + 1) * row].iter().map(|&v| quantize(v, p)));
                }
                (out, true)
            }
        };
        let bounds = Arc::new(params.iter().map(|p| (p.l, p.u)).collect::<Vec<_>>());
        Ok(crate::tensor::fake_quant(x, data, bounds, per_channel))
    }
}

/// Parse the `NwMa` bit-width grammar, e.g. `4w4a`.
pub fn parse_bits(s: &str) -> Result<(u8, u8)> {
    let parse = || -> Option<(u8, u8)> {
        let w_pos = s.find('w')?;
        let a_pos = s.find('a')?;
        if a_pos != s.len() - 1 || w_pos == 0 {
            return None;
        }
        let nw: u8 = s[..w_pos].parse().ok()?;
        let na: u8 = s[w_pos + 1..a_pos].parse().ok()?;
        Some((nw, na))
    };
    parse().ok_or_else(|| Error::invalid("bits", format!("expected e.g. `4w4a`, got `{s}`")))
}

/// Deep-copy a pretrained graph into its fake-quantized counterpart:
/// per-channel weight quantizers frozen from the current weights, per-layer
/// activation observers left open for warm-up, stored BN statistics fixed.
pub fn quantize_graph(fp: &LayerGraph, n_w: u8, n_a: u8, skip_first_last: bool) -> Result<LayerGraph> {
    if !(2..=8).contains(&n_w) || !(2..=8).contains(&n_a) {
        return Err(Error::Quantizer(format!(
            "bit widths must lie in [2,8], got {n_w}w{n_a}a"
        )));
    }
    let mut q = fp.clone();
    let total = q.weight_layer_count();
    let mut idx = 0usize;
    q.visit_weight_layers_mut(&mut |layer: &mut Layer, site: &str| {
        let exempt = skip_first_last && (idx == 0 || idx + 1 == total);
        idx += 1;
        if exempt {
            return Ok(());
        }
        match layer {
            Layer::Conv { weight, wq, aq, .. } => {
                let channels = weight.shape()[0];
                let mut w_state = QuantizerState::per_channel(n_w, channels);
                w_state.freeze_from(weight, site)?;
                *wq = Some(w_state);
                *aq = Some(QuantizerState::per_layer(n_a));
            }
            Layer::Linear { weight, wq, aq, .. } => {
                let channels = weight.shape()[0];
                let mut w_state = QuantizerState::per_channel(n_w, channels);
                w_state.freeze_from(weight, site)?;
                *wq = Some(w_state);
                *aq = Some(QuantizerState::per_layer(n_a));
            }
            _ => {}
        }
        Ok(())
    })?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    fn frozen_state(bits: u8, l: f32, u: f32) -> QuantizerState {
        let mut s = QuantizerState::per_layer(bits);
        s.observe(&Tensor::from_vec(vec![l, u], &[2])).unwrap();
        s.freeze("test").unwrap();
        s
    }

    #[test]
    fn grid_point_maps_to_itself() {
        // n=4, l=0, u=15 ⇒ s=1, b=8; x=0 → q=−8 → fake 0
        let s = frozen_state(4, 0.0, 15.0);
        let y = s.fake_quantize(&Tensor::from_vec(vec![0.0], &[1])).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn hand_evaluated_asymmetric_case() {
        // n=4, l=−1, u=1 ⇒ s=2/15, b=0.5; x=1 → q=7 → fake 1.0
        let s = frozen_state(4, -1.0, 1.0);
        let y = s.fake_quantize(&Tensor::from_vec(vec![1.0], &[1])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6, "{}", y.data()[0]);
        // x=2 out of range → clipped to q=7 → fake 1.0
        let y = s.fake_quantize(&Tensor::from_vec(vec![2.0], &[1])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn observer_tracks_running_extrema() {
        let mut s = QuantizerState::per_layer(4);
        s.observe(&Tensor::from_vec(vec![-2.0, 3.0], &[2])).unwrap();
        s.observe(&Tensor::from_vec(vec![-1.0, 5.0], &[2])).unwrap();
        s.freeze("act").unwrap();
        assert_eq!(s.bounds().unwrap(), vec![(-2.0, 5.0)]);
    }

    #[test]
    fn per_channel_bounds_are_independent() {
        let mut s = QuantizerState::per_channel(4, 2);
        let w = Tensor::from_vec(vec![-1.0, 0.5, 2.0, 8.0], &[2, 2]);
        s.freeze_from(&w, "w").unwrap();
        assert_eq!(s.bounds().unwrap(), vec![(-1.0, 0.5), (2.0, 8.0)]);
    }

    #[test]
    fn freeze_rejects_degenerate_and_unobserved() {
        let mut s = QuantizerState::per_layer(4);
        assert!(s.freeze("site-x").is_err());
        s.observe(&Tensor::from_vec(vec![3.0, 3.0], &[2])).unwrap();
        let err = s.freeze("site-x").unwrap_err().to_string();
        assert!(err.contains("site-x") && err.contains("degenerate"), "{err}");
    }

    #[test]
    fn frozen_state_rejects_observe_and_unfrozen_rejects_quantize() {
        let mut s = frozen_state(4, -1.0, 1.0);
        assert!(s.observe(&Tensor::from_vec(vec![0.0], &[1])).is_err());
        let open = QuantizerState::per_layer(4);
        assert!(open.fake_quantize(&Tensor::from_vec(vec![0.0], &[1])).is_err());
    }

    #[test]
    fn ste_gradient_is_the_bound_mask() {
        let s = frozen_state(4, -1.0, 1.0);
        let x = Tensor::param(vec![-2.0, -0.99, 0.0, 0.3, 0.99, 1.5], &[6]);
        let y = s.fake_quantize(&x).unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn codebook_cardinality() {
        let s = frozen_state(3, -0.7, 1.3);
        let mut rng = SeedStream::new(5);
        let x = rng.normal_tensor(&[4096]);
        let y = s.fake_quantize(&x).unwrap();
        let mut distinct: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= 8, "3-bit codebook has {} values", distinct.len());
    }

    #[test]
    fn bit_grammar() {
        assert_eq!(parse_bits("4w4a").unwrap(), (4, 4));
        assert_eq!(parse_bits("2w8a").unwrap(), (2, 8));
        assert!(parse_bits("4w4").is_err());
        assert!(parse_bits("w4a").is_err());
        assert!(parse_bits("4x4a").is_err());
    }

    proptest! {
        /// |fake(x) − x| ≤ s/2 + 1e−6 inside [l, u]
        #[test]
        fn round_trip_bound(bits in 2u8..=8, l in -10.0f32..9.0, span in 0.1f32..10.0, t in 0.0f32..1.0) {
            let u = l + span;
            let st = frozen_state(bits, l, u);
            let s = (u - l) / ((1u32 << bits) as f32 - 1.0);
            let x = l + t * span;
            let y = st.fake_quantize(&Tensor::from_vec(vec![x], &[1])).unwrap().data()[0];
            prop_assert!((y - x).abs() <= s / 2.0 + 1e-6, "x={x} fake={y} s={s}");
        }

        /// fake(fake(x)) is bitwise fake(x)
        #[test]
        fn idempotence(bits in 2u8..=8, l in -10.0f32..9.0, span in 0.1f32..10.0, x in -20.0f32..20.0) {
            let st = frozen_state(bits, l, l + span);
            let once = st.fake_quantize(&Tensor::from_vec(vec![x], &[1])).unwrap();
            let twice = st.fake_quantize(&once).unwrap();
            prop_assert_eq!(once.data()[0].to_bits(), twice.data()[0].to_bits());
        }

        /// x₁ ≤ x₂ ⇒ fake(x₁) ≤ fake(x₂)
        #[test]
        fn monotonicity(bits in 2u8..=8, l in -10.0f32..9.0, span in 0.1f32..10.0, a in -20.0f32..20.0, b in -20.0f32..20.0) {
            let st = frozen_state(bits, l, l + span);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let y = st.fake_quantize(&Tensor::from_vec(vec![lo, hi], &[2])).unwrap();
            prop_assert!(y.data()[0] <= y.data()[1]);
        }
    }
}
