//! Bit-exact model serialization.
//!
//! An archive is a directory: a `model.json` manifest (architecture
//! descriptor, tensor list with shapes and per-blob digests, BN-statistics
//! entries, quantizer states, format version) plus one raw little-endian
//! f32 blob per tensor. Loading rebuilds the network skeleton from its
//! descriptor and overwrites every tensor byte for byte, so
//! `load(save(g))` reproduces `g` exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::build_target_net;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorNet};
use crate::graph::{Layer, LayerGraph, Mode};
use crate::quant::QuantizerState;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    LayerGraph,
    Generator,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    site: String,
    mean_file: String,
    std_file: String,
    mean_sha256: String,
    std_sha256: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct QuantEntry {
    site: String,
    weight: Option<QuantizerState>,
    activation: Option<QuantizerState>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: ModelKind,
    arch: Option<String>,
    num_classes: Option<usize>,
    mode: Option<Mode>,
    generator: Option<GeneratorConfig>,
    tensors: Vec<TensorEntry>,
    bn_stats: Vec<BnEntry>,
    quantizers: Vec<QuantEntry>,
}

fn blob_name(name: &str) -> String {
    format!("{}.bin", name.replace('/', "_"))
}

fn write_blob(dir: &Path, file: &str, values: &[f32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = hex(&Sha256::digest(&bytes));
    fs::write(dir.join(file), bytes)?;
    Ok(digest)
}

fn read_blob(dir: &Path, file: &str, expect_len: usize, sha: &str, name: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(dir.join(file))
        .map_err(|e| Error::ArchiveFormat(format!("blob `{file}` unreadable: {e}")))?;
    if bytes.len() != expect_len * 4 {
        return Err(Error::ArchiveTruncated {
            name: name.to_string(),
            got: bytes.len(),
            expected: expect_len * 4,
        });
    }
    if hex(&Sha256::digest(&bytes)) != sha {
        return Err(Error::ArchiveDigest(name.to_string()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Save a teacher or student graph (quantizer states included).
pub fn save_graph(graph: &LayerGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut failed = None;
    graph.visit_params(&mut |name, t| {
        if failed.is_some() {
            return;
        }
        let file = blob_name(name);
        match write_blob(dir, &file, t.data()) {
            Ok(sha256) => tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
                sha256,
            }),
            Err(e) => failed = Some(e),
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }

    let mut bn_stats = Vec::new();
    let mut failed = None;
    graph.visit_bn(&mut |site, bn| {
        if failed.is_some() {
            return;
        }
        let mean_file = blob_name(&format!("{site}.running_mean"));
        let std_file = blob_name(&format!("{site}.running_std"));
        let res = write_blob(dir, &mean_file, &bn.stored_mean).and_then(|mean_sha| {
            write_blob(dir, &std_file, &bn.stored_std).map(|std_sha| (mean_sha, std_sha))
        });
        match res {
            Ok((mean_sha256, std_sha256)) => bn_stats.push(BnEntry {
                site: site.to_string(),
                mean_file,
                std_file,
                mean_sha256,
                std_sha256,
                channels: bn.stored_mean.len(),
            }),
            Err(e) => failed = Some(e),
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }

    let mut quantizers = Vec::new();
    let mut graph_copy = graph.clone();
    graph_copy.visit_weight_layers_mut(&mut |layer, site| {
        let (wq, aq) = match layer {
            Layer::Conv { wq, aq, .. } | Layer::Linear { wq, aq, .. } => (wq.clone(), aq.clone()),
            _ => (None, None),
        };
        if wq.is_some() || aq.is_some() {
            quantizers.push(QuantEntry { site: site.to_string(), weight: wq, activation: aq });
        }
        Ok(())
    })?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ModelKind::LayerGraph,
        arch: Some(graph.arch.clone()),
        num_classes: Some(graph.num_classes),
        mode: Some(graph.mode),
        generator: None,
        tensors,
        bn_stats,
        quantizers,
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Save a generator network.
pub fn save_generator(gen: &GeneratorNet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut failed = None;
    gen.visit_params(&mut |name, t| {
        if failed.is_some() {
            return;
        }
        let file = blob_name(name);
        match write_blob(dir, &file, t.data()) {
            Ok(sha256) => tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
                sha256,
            }),
            Err(e) => failed = Some(e),
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ModelKind::Generator,
        arch: None,
        num_classes: None,
        mode: None,
        generator: Some(gen.config.clone()),
        tensors,
        bn_stats: Vec::new(),
        quantizers: Vec::new(),
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("model.json"))
        .map_err(|e| Error::ArchiveFormat(format!("{}: {e}", dir.join("model.json").display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::ArchiveVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

/// Load a teacher/student graph archive.
pub fn load_graph(dir: &Path) -> Result<LayerGraph> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != ModelKind::LayerGraph {
        return Err(Error::ArchiveFormat("archive holds a generator, not a layer graph".into()));
    }
    let arch = manifest.arch.as_deref().ok_or_else(|| Error::ArchiveFormat("missing arch".into()))?;
    let classes = manifest.num_classes.ok_or_else(|| Error::ArchiveFormat("missing num_classes".into()))?;
    let mut graph = build_target_net(arch, classes, 0)?;
    if let Some(mode) = manifest.mode {
        graph.set_mode(mode);
    }

    // parameters by name
    let mut loaded: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let data = read_blob(dir, &entry.file, numel, &entry.sha256, &entry.name)?;
        loaded.insert(entry.name.clone(), Tensor::param(data, &entry.shape));
    }
    let mut missing = Vec::new();
    graph.visit_params_mut(&mut |name, t| match loaded.remove(name) {
        Some(new) => {
            if new.shape() == t.shape() {
                *t = new;
            } else {
                missing.push(format!("{name}: shape {:?} vs {:?}", new.shape(), t.shape()));
            }
        }
        None => missing.push(format!("{name}: absent from archive")),
    });
    if !missing.is_empty() {
        return Err(Error::ArchiveFormat(missing.join("; ")));
    }

    // stored BN statistics by site
    let bn_map: std::collections::HashMap<&str, &BnEntry> =
        manifest.bn_stats.iter().map(|e| (e.site.as_str(), e)).collect();
    let mut bn_err = None;
    let mut bn_loaded: std::collections::HashMap<String, (Vec<f32>, Vec<f32>)> = Default::default();
    for (site, entry) in &bn_map {
        let mean = read_blob(dir, &entry.mean_file, entry.channels, &entry.mean_sha256, site)?;
        let std = read_blob(dir, &entry.std_file, entry.channels, &entry.std_sha256, site)?;
        bn_loaded.insert(site.to_string(), (mean, std));
    }
    graph.visit_bn_mut(&mut |site, bn| {
        if bn_err.is_some() {
            return;
        }
        match bn_loaded.remove(site) {
            Some((mean, std)) if mean.len() == bn.stored_mean.len() => {
                bn.stored_mean = mean;
                bn.stored_std = std;
            }
            Some(_) => bn_err = Some(format!("{site}: BN channel mismatch")),
            None => bn_err = Some(format!("{site}: BN stats absent from archive")),
        }
    });
    if let Some(e) = bn_err {
        return Err(Error::ArchiveFormat(e));
    }

    // quantizer states by site
    let mut quant: std::collections::HashMap<String, (Option<QuantizerState>, Option<QuantizerState>)> =
        manifest
            .quantizers
            .into_iter()
            .map(|q| (q.site, (q.weight, q.activation)))
            .collect();
    graph.visit_weight_layers_mut(&mut |layer, site| {
        if let Some((wq_new, aq_new)) = quant.remove(site) {
            match layer {
                Layer::Conv { wq, aq, .. } | Layer::Linear { wq, aq, .. } => {
                    *wq = wq_new;
                    *aq = aq_new;
                }
                _ => {}
            }
        }
        Ok(())
    })?;
    if !quant.is_empty() {
        let sites: Vec<String> = quant.into_keys().collect();
        return Err(Error::ArchiveFormat(format!("quantizer sites not in graph: {}", sites.join(", "))));
    }
    Ok(graph)
}

/// Load a generator archive.
pub fn load_generator(dir: &Path) -> Result<GeneratorNet> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != ModelKind::Generator {
        return Err(Error::ArchiveFormat("archive holds a layer graph, not a generator".into()));
    }
    let config = manifest.generator.clone().ok_or_else(|| Error::ArchiveFormat("missing generator config".into()))?;
    let mut gen = GeneratorNet::new(config, 0)?;
    let mut loaded: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let data = read_blob(dir, &entry.file, numel, &entry.sha256, &entry.name)?;
        loaded.insert(entry.name.clone(), Tensor::param(data, &entry.shape));
    }
    let mut missing = Vec::new();
    gen.visit_params_mut(&mut |name, t| match loaded.remove(name) {
        Some(new) if new.shape() == t.shape() => *t = new,
        Some(new) => missing.push(format!("{name}: shape {:?} vs {:?}", new.shape(), t.shape())),
        None => missing.push(format!("{name}: absent from archive")),
    });
    if !missing.is_empty() {
        return Err(Error::ArchiveFormat(missing.join("; ")));
    }
    Ok(gen)
}

/// Which kind of model an archive directory holds.
pub fn archive_kind(dir: &Path) -> Result<&'static str> {
    Ok(match load_manifest(dir)?.kind {
        ModelKind::LayerGraph => "layer_graph",
        ModelKind::Generator => "generator",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::quant::quantize_graph;
    use crate::rng::SeedStream;

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        entries.sort();
        entries
    }

    #[test]
    fn graph_round_trip_is_bitwise() {
        let mut teacher = build_target_net("tiny-resnet", 10, 3).unwrap();
        // non-trivial BN stats
        let mut rng = SeedStream::new(4);
        teacher.visit_bn_mut(&mut |_, bn| {
            for v in bn.stored_mean.iter_mut() {
                *v = rng.normal();
            }
            for v in bn.stored_std.iter_mut() {
                *v = rng.normal().abs() + 0.5;
            }
        });
        let tmp = tempfile::tempdir().unwrap();
        let d1 = tmp.path().join("a");
        save_graph(&teacher, &d1).unwrap();
        let back = load_graph(&d1).unwrap();
        assert_eq!(back.digest(), teacher.digest());

        // save → load → save produces byte-identical archives
        let d2 = tmp.path().join("b");
        save_graph(&back, &d2).unwrap();
        assert_eq!(dir_bytes(&d1), dir_bytes(&d2));

        // identical logits on a fixed batch
        let x = rng.normal_tensor(&[4, 3, 32, 32]);
        let a = teacher.forward(&x, Mode::Eval, false).unwrap().logits;
        let b = back.forward(&x, Mode::Eval, false).unwrap().logits;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn quantized_graph_round_trip_keeps_states() {
        let teacher = build_target_net("tiny-plain", 10, 5).unwrap();
        let mut student = quantize_graph(&teacher, 4, 6, false).unwrap();
        let mut rng = SeedStream::new(6);
        student.calibrate(&rng.normal_tensor(&[4, 3, 32, 32])).unwrap();
        student.freeze_activation_quantizers().unwrap();

        let tmp = tempfile::tempdir().unwrap();
        save_graph(&student, tmp.path()).unwrap();
        let back = load_graph(tmp.path()).unwrap();

        let x = rng.normal_tensor(&[2, 3, 32, 32]);
        let a = student.forward(&x, Mode::Eval, false).unwrap().logits;
        let b = back.forward(&x, Mode::Eval, false).unwrap().logits;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn generator_round_trip_is_bitwise() {
        let cfg = GeneratorConfig { num_classes: 4, z_dim: 16, grid_h: 4, grid_w: 4, stem_channels: 8, block_channels: vec![8, 6], ..Default::default() };
        let gen = GeneratorNet::new(cfg, 9).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_generator(&gen, tmp.path()).unwrap();
        let back = load_generator(tmp.path()).unwrap();
        assert_eq!(gen.digest(), back.digest());

        let mut rng = SeedStream::new(10);
        let z = rng.normal_tensor(&[3, 16]);
        let a = gen.generate(&z, &[0, 1, 2], &[0, 5, 15]).unwrap();
        let b = back.generate(&z, &[0, 1, 2], &[0, 5, 15]).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn corrupted_blob_fails_digest_check() {
        let teacher = build_target_net("tiny-plain", 10, 7).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_graph(&teacher, tmp.path()).unwrap();
        let blob = tmp.path().join("l0.weight.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 0x01;
        fs::write(&blob, bytes).unwrap();
        match load_graph(tmp.path()) {
            Err(Error::ArchiveDigest(name)) => assert!(name.contains("l0.weight")),
            other => panic!("expected digest error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_and_version_mismatch_are_distinct() {
        let teacher = build_target_net("tiny-plain", 10, 8).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_graph(&teacher, tmp.path()).unwrap();
        let blob = tmp.path().join("l0.weight.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_graph(tmp.path()), Err(Error::ArchiveTruncated { .. })));

        // fresh save, then bump the version field
        save_graph(&teacher, tmp.path()).unwrap();
        let manifest_path = tmp.path().join("model.json");
        let text = fs::read_to_string(&manifest_path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&manifest_path, text).unwrap();
        assert!(matches!(load_graph(tmp.path()), Err(Error::ArchiveVersion { found: 99, .. })));
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let teacher = build_target_net("tiny-plain", 10, 8).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_graph(&teacher, tmp.path()).unwrap();
        assert!(load_generator(tmp.path()).is_err());
        assert_eq!(archive_kind(tmp.path()).unwrap(), "layer_graph");
    }
}
