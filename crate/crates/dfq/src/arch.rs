//! Desk-scale target network descriptors.
//!
//! `tiny-resnet`: stem conv + three residual stages (identity shortcuts,
//! 1×1 projection on channel change) + global average pooling + linear
//! head. 32×32 inputs, backbone tap after the last stage at 8×8.
//! `tiny-plain`: four conv-BN-relu blocks with the same tap geometry.

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Layer, LayerGraph};
use crate::rng::SeedStream;

pub const KNOWN_ARCHS: [&str; 2] = ["tiny-resnet", "tiny-plain"];

/// Spatial size of the backbone activation for 32×32 inputs.
pub const BACKBONE_HW: (usize, usize) = (8, 8);

fn kaiming_conv(rng: &mut SeedStream, o: usize, c: usize, k: usize) -> crate::tensor::Tensor {
    let std = (2.0 / (c * k * k) as f32).sqrt();
    rng.normal_tensor_scaled(&[o, c, k, k], std).to_param()
}

fn conv(rng: &mut SeedStream, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Layer {
    Layer::Conv {
        weight: kaiming_conv(rng, c_out, c_in, k),
        bias: None,
        stride,
        pad,
        wq: None,
        aq: None,
    }
}

fn linear(rng: &mut SeedStream, c_in: usize, c_out: usize) -> Layer {
    let std = (2.0 / c_in as f32).sqrt();
    Layer::Linear {
        weight: rng.normal_tensor_scaled(&[c_out, c_in], std).to_param(),
        bias: crate::tensor::Tensor::param(vec![0.0; c_out], &[c_out]),
        wq: None,
        aq: None,
    }
}

fn residual_block(rng: &mut SeedStream, c_in: usize, c_out: usize, stride: usize) -> Layer {
    let body = vec![
        conv(rng, c_in, c_out, 3, stride, 1),
        Layer::BatchNorm(BatchNorm::new(c_out)),
        Layer::Relu,
        conv(rng, c_out, c_out, 3, 1, 1),
        Layer::BatchNorm(BatchNorm::new(c_out)),
    ];
    let shortcut = if c_in == c_out && stride == 1 {
        Vec::new()
    } else {
        vec![conv(rng, c_in, c_out, 1, stride, 0), Layer::BatchNorm(BatchNorm::new(c_out))]
    };
    Layer::Residual { body, shortcut }
}

/// Build an initialized target network. Same seed, same parameters.
pub fn build_target_net(spec: &str, num_classes: usize, seed: u64) -> Result<LayerGraph> {
    let mut rng = SeedStream::new(seed);
    match spec {
        "tiny-resnet" => {
            let (w0, w1, w2) = (16, 32, 64);
            let layers = vec![
                conv(&mut rng, 3, w0, 3, 1, 1),
                Layer::BatchNorm(BatchNorm::new(w0)),
                Layer::Relu,
                residual_block(&mut rng, w0, w0, 1),
                Layer::Relu,
                residual_block(&mut rng, w0, w1, 2),
                Layer::Relu,
                residual_block(&mut rng, w1, w2, 2),
                Layer::Relu,
                Layer::GlobalAvgPool,
                linear(&mut rng, w2, num_classes),
            ];
            Ok(LayerGraph::new(spec, num_classes, layers, 8))
        }
        "tiny-plain" => {
            let widths = [(3usize, 16usize, 1usize), (16, 32, 2), (32, 64, 2), (64, 64, 1)];
            let mut layers = Vec::new();
            for &(c_in, c_out, stride) in &widths {
                layers.push(conv(&mut rng, c_in, c_out, 3, stride, 1));
                layers.push(Layer::BatchNorm(BatchNorm::new(c_out)));
                layers.push(Layer::Relu);
            }
            let tap = layers.len() - 1;
            layers.push(Layer::GlobalAvgPool);
            layers.push(linear(&mut rng, 64, num_classes));
            Ok(LayerGraph::new(spec, num_classes, layers, tap))
        }
        other => Err(Error::UnknownArch(other.to_string(), KNOWN_ARCHS.join(", "))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;

    #[test]
    fn tiny_resnet_shape_contract() {
        let net = build_target_net("tiny-resnet", 10, 7).unwrap();
        let mut rng = SeedStream::new(1);
        let x = rng.normal_tensor(&[16, 3, 32, 32]);
        let rec = net.forward(&x, Mode::Eval, false).unwrap();
        assert_eq!(rec.logits.shape(), &[16, 10]);
        assert_eq!(&rec.backbone.shape()[2..], &[8, 8]);
        assert_eq!(rec.backbone.shape()[0], 16);
    }

    #[test]
    fn tiny_plain_shape_contract() {
        let net = build_target_net("tiny-plain", 10, 7).unwrap();
        let mut rng = SeedStream::new(1);
        let x = rng.normal_tensor(&[4, 3, 32, 32]);
        let rec = net.forward(&x, Mode::Eval, false).unwrap();
        assert_eq!(rec.logits.shape(), &[4, 10]);
        assert_eq!(&rec.backbone.shape()[2..], &[8, 8]);
    }

    #[test]
    fn unknown_arch_lists_known_specs() {
        let err = build_target_net("mega-net", 10, 7).unwrap_err().to_string();
        assert!(err.contains("mega-net") && err.contains("tiny-resnet") && err.contains("tiny-plain"));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_target_net("tiny-resnet", 10, 42).unwrap();
        let b = build_target_net("tiny-resnet", 10, 42).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = build_target_net("tiny-resnet", 10, 43).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn param_count_is_stable() {
        let a = build_target_net("tiny-resnet", 10, 1).unwrap();
        let b = build_target_net("tiny-resnet", 10, 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(a.param_count() > 0);
    }
}
