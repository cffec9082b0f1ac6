//! Conditional sample generator.
//!
//! Maps a noise vector plus a class label y and an attention-center
//! position label p to a synthetic image in [−1, 1]. The low-spatial path
//! blends conditions into the latent directly:
//! i = (Embedding_class(y) + z) ⊙ Embedding_position(p). The high-spatial
//! path blends a smoothed one-hot position grid with pooled stem features
//! and adds the result back residually; it is built and unit-tested at
//! reduced width.
//!
//! Body: linear stem → reshape → [upsample ×2, conv, class-conditional BN,
//! leaky-relu] per block → conv → tanh.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::class_conditional_bn;
use crate::rng::SeedStream;
use crate::tensor::{concat_channels, conv2d, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum ConditionKind {
    /// Eq-style latent blending; position embedding table of size h·w.
    LowDim,
    /// Pooled-feature fusion with a smoothed one-hot position grid.
    /// The stem emits `fusion_factor`-times larger spatial maps that are
    /// pooled down to the position grid and upsampled back.
    HighDim { fusion_factor: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub z_dim: usize,
    /// Position grid; equals the target network's backbone attention grid
    /// so p labels share the attention map's coordinate system.
    pub grid_h: usize,
    pub grid_w: usize,
    pub stem_channels: usize,
    /// Output channel count of each upsample+conv+CCBN+leaky block.
    pub block_channels: Vec<usize>,
    pub label_smooth: f32,
    pub leaky_slope: f32,
    pub condition: ConditionKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 10,
            z_dim: 100,
            grid_h: 8,
            grid_w: 8,
            stem_channels: 64,
            block_channels: vec![64, 32],
            label_smooth: 0.1,
            leaky_slope: 0.2,
            condition: ConditionKind::LowDim,
        }
    }
}

#[derive(Clone)]
struct GenBlock {
    conv_w: Tensor,
    conv_b: Tensor,
    /// Per-class CCBN affine tables, each num_classes × channels.
    gammas: Tensor,
    betas: Tensor,
}

#[derive(Clone)]
enum ConditionPath {
    LowDim {
        class_embed: Tensor, // num_classes × z_dim
        pos_embed: Tensor,   // (h·w) × z_dim
    },
    HighDim {
        fusion_factor: usize,
        /// 3×3 conv over [max-pooled half, avg-pooled half, position grid].
        fuse_w: Tensor,
        fuse_b: Tensor,
    },
}

#[derive(Clone)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    condition: ConditionPath,
    stem_w: Tensor,
    stem_b: Tensor,
    blocks: Vec<GenBlock>,
    final_w: Tensor,
    final_b: Tensor,
}

impl GeneratorNet {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.block_channels.is_empty() {
            return Err(Error::Config("generator needs at least one block".into()));
        }
        let mut rng = SeedStream::new(seed);
        let hw = config.grid_h * config.grid_w;
        let c0 = config.stem_channels;

        let (condition, stem_h, stem_w_dim) = match config.condition {
            ConditionKind::LowDim => {
                let class_embed = rng.normal_tensor(&[config.num_classes, config.z_dim]).to_param();
                let pos_embed = rng.normal_tensor(&[hw, config.z_dim]).to_param();
                (ConditionPath::LowDim { class_embed, pos_embed }, config.grid_h, config.grid_w)
            }
            ConditionKind::HighDim { fusion_factor } => {
                if fusion_factor == 0 {
                    return Err(Error::Config("fusion_factor must be positive".into()));
                }
                if c0 % 2 != 0 {
                    return Err(Error::Config("high-dim fusion needs an even stem width".into()));
                }
                let in_ch = c0 / 2 + c0 / 2 + 1;
                let std = (2.0 / (in_ch * 9) as f32).sqrt();
                (
                    ConditionPath::HighDim {
                        fusion_factor,
                        fuse_w: rng.normal_tensor_scaled(&[c0, in_ch, 3, 3], std).to_param(),
                        fuse_b: Tensor::param(vec![0.0; c0], &[c0]),
                    },
                    config.grid_h * fusion_factor,
                    config.grid_w * fusion_factor,
                )
            }
        };

        let stem_out = c0 * stem_h * stem_w_dim;
        let stem_std = (2.0 / config.z_dim as f32).sqrt();
        let stem_w = rng.normal_tensor_scaled(&[stem_out, config.z_dim], stem_std).to_param();
        let stem_b = Tensor::param(vec![0.0; stem_out], &[stem_out]);

        let mut blocks = Vec::new();
        let mut c_in = c0;
        for &c_out in &config.block_channels {
            let std = (2.0 / (c_in * 9) as f32).sqrt();
            blocks.push(GenBlock {
                conv_w: rng.normal_tensor_scaled(&[c_out, c_in, 3, 3], std).to_param(),
                conv_b: Tensor::param(vec![0.0; c_out], &[c_out]),
                gammas: Tensor::param(vec![1.0; config.num_classes * c_out], &[config.num_classes, c_out]),
                betas: Tensor::param(vec![0.0; config.num_classes * c_out], &[config.num_classes, c_out]),
            });
            c_in = c_out;
        }
        let std = (2.0 / (c_in * 9) as f32).sqrt();
        let final_w = rng.normal_tensor_scaled(&[3, c_in, 3, 3], std).to_param();
        let final_b = Tensor::param(vec![0.0; 3], &[3]);

        Ok(GeneratorNet {
            config,
            condition,
            stem_w,
            stem_b,
            blocks,
            final_w,
            final_b,
        })
    }

    /// Output image height/width: the stem grid doubled per block.
    pub fn output_hw(&self) -> (usize, usize) {
        let scale = 1usize << self.blocks.len();
        (self.config.grid_h * scale, self.config.grid_w * scale)
    }

    fn check_conditions(&self, n: usize, y: &[usize], p: &[usize]) -> Result<()> {
        if y.len() != n || p.len() != n {
            return Err(Error::invalid("generate", "one (y, p) pair per sample"));
        }
        let hw = self.config.grid_h * self.config.grid_w;
        if let Some(&bad) = y.iter().find(|&&v| v >= self.config.num_classes) {
            return Err(Error::invalid("generate", format!("class label {bad} out of range")));
        }
        if let Some(&bad) = p.iter().find(|&&v| v >= hw) {
            return Err(Error::invalid("generate", format!("position label {bad} outside grid of {hw}")));
        }
        Ok(())
    }

    /// Latent blending of Eq-style low-spatial conditioning:
    /// (Embedding_class(y) + z) ⊙ Embedding_position(p).
    pub fn condition_fuse_lowdim(&self, z: &Tensor, y: &[usize], p: &[usize]) -> Result<Tensor> {
        let n = z.shape()[0];
        self.check_conditions(n, y, p)?;
        let ConditionPath::LowDim { class_embed, pos_embed } = &self.condition else {
            return Err(Error::Config("generator was built with the high-dim path".into()));
        };
        let ec = class_embed.embed(y)?;
        let ep = pos_embed.embed(p)?;
        ec.add(z)?.mul(&ep)
    }

    /// High-spatial conditioning: stem features pooled to the position
    /// grid, fused with the smoothed one-hot grid, upsampled and added
    /// back. Returns a tensor shaped like the stem features.
    pub fn condition_fuse_highdim(&self, z: &Tensor, p: &[usize]) -> Result<Tensor> {
        let n = z.shape()[0];
        if p.len() != n {
            return Err(Error::invalid("condition_fuse_highdim", "one position per sample"));
        }
        let ConditionPath::HighDim { fusion_factor, fuse_w, fuse_b } = &self.condition else {
            return Err(Error::Config("generator was built with the low-dim path".into()));
        };
        let (gh, gw) = (self.config.grid_h, self.config.grid_w);
        let c0 = self.config.stem_channels;
        let (fh, fw) = (gh * fusion_factor, gw * fusion_factor);

        let f = z
            .matmul_nt(&self.stem_w)?
            .add_bias(&self.stem_b)?
            .reshape(&[n, c0, fh, fw])?;
        let half = c0 / 2;
        let f1 = f.slice_channels(0, half)?.adaptive_max_pool(gh, gw)?;
        let f2 = f.slice_channels(half, c0)?.adaptive_avg_pool(gh, gw)?;
        let grid = smoothed_position_grid(p, gh, gw, self.config.label_smooth)?;
        let fused = concat_channels(&[f1, f2, grid])?;
        let f_prime = conv2d(&fused, fuse_w, Some(fuse_b), 1, 1)?;
        f_prime.upsample_nearest(*fusion_factor)?.add(&f)
    }

    /// Synthesize a batch: N×3×H×W in [−1, 1], deterministic in (z, y, p).
    pub fn generate(&self, z: &Tensor, y: &[usize], p: &[usize]) -> Result<Tensor> {
        let n = z.shape()[0];
        if z.shape() != [n, self.config.z_dim] {
            return Err(Error::BadShape {
                op: "generate",
                expected: format!("N×{} latent", self.config.z_dim),
                got: z.shape().to_vec(),
            });
        }
        self.check_conditions(n, y, p)?;
        let c0 = self.config.stem_channels;
        let mut x = match &self.condition {
            ConditionPath::LowDim { .. } => {
                let latent = self.condition_fuse_lowdim(z, y, p)?;
                latent
                    .matmul_nt(&self.stem_w)?
                    .add_bias(&self.stem_b)?
                    .reshape(&[n, c0, self.config.grid_h, self.config.grid_w])?
            }
            ConditionPath::HighDim { .. } => self.condition_fuse_highdim(z, p)?,
        };
        for block in &self.blocks {
            x = x.upsample_nearest(2)?;
            x = conv2d(&x, &block.conv_w, Some(&block.conv_b), 1, 1)?;
            x = class_conditional_bn(&x, y, &block.gammas, &block.betas, 1e-5)?;
            x = x.leaky_relu(self.config.leaky_slope);
        }
        Ok(conv2d(&x, &self.final_w, Some(&self.final_b), 1, 1)?.tanh())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.condition {
            ConditionPath::LowDim { class_embed, pos_embed } => {
                f("class_embed", class_embed);
                f("pos_embed", pos_embed);
            }
            ConditionPath::HighDim { fuse_w, fuse_b, .. } => {
                f("fuse.weight", fuse_w);
                f("fuse.bias", fuse_b);
            }
        }
        f("stem.weight", &self.stem_w);
        f("stem.bias", &self.stem_b);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.weight"), &b.conv_w);
            f(&format!("block{i}.bias"), &b.conv_b);
            f(&format!("block{i}.gammas"), &b.gammas);
            f(&format!("block{i}.betas"), &b.betas);
        }
        f("final.weight", &self.final_w);
        f("final.bias", &self.final_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.condition {
            ConditionPath::LowDim { class_embed, pos_embed } => {
                f("class_embed", class_embed);
                f("pos_embed", pos_embed);
            }
            ConditionPath::HighDim { fuse_w, fuse_b, .. } => {
                f("fuse.weight", fuse_w);
                f("fuse.bias", fuse_b);
            }
        }
        f("stem.weight", &mut self.stem_w);
        f("stem.bias", &mut self.stem_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.weight"), &mut b.conv_w);
            f(&format!("block{i}.bias"), &mut b.conv_b);
            f(&format!("block{i}.gammas"), &mut b.gammas);
            f(&format!("block{i}.betas"), &mut b.betas);
        }
        f("final.weight", &mut self.final_w);
        f("final.bias", &mut self.final_b);
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit_params(&mut |name, t| {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One-hot position grids with label smoothing: the labeled cell carries
/// 1 − s + s/(h·w), every other cell s/(h·w); each grid sums to 1.
pub fn smoothed_position_grid(p: &[usize], gh: usize, gw: usize, smooth: f32) -> Result<Tensor> {
    if !(0.0..1.0).contains(&smooth) {
        return Err(Error::Config(format!("label smoothing {smooth} outside [0, 1)")));
    }
    let hw = gh * gw;
    let base = smooth / hw as f32;
    let mut data = vec![0.0f32; p.len() * hw];
    for (i, &pos) in p.iter().enumerate() {
        if pos >= hw {
            return Err(Error::invalid("smoothed_position_grid", format!("position {pos} outside grid")));
        }
        let grid = &mut data[i * hw..(i + 1) * hw];
        grid.fill(base);
        grid[pos] = 1.0 - smooth + base;
    }
    Ok(Tensor::from_vec(data, &[p.len(), 1, gh, gw]))
}
