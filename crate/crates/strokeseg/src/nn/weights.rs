//! Versioned named-tensor archive for network weights and checkpoints.
//!
//! Layout: 4-byte magic, u32 format version, u64 header length, JSON header
//! (network config snapshot, tensor manifest with name/shape/dtype/offset,
//! free-form metadata), then the little-endian f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::segresnet::{NetworkConfig, SegResNet};
use super::Scalar;

const MAGIC: &[u8; 4] = b"SSGW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset and length in f32 elements within the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// An archive read fully into memory.
pub struct Archive {
    pub network: NetworkConfig,
    pub meta: serde_json::Value,
    entries: BTreeMap<String, TensorEntry>,
    payload: Vec<f32>,
}

impl Archive {
    pub fn read(path: impl AsRef<Path>) -> Result<Archive> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Weights(format!("{}: not a weights archive", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Weights(format!(
                "{}: bad magic, not a weights archive",
                path.display()
            )));
        }
        let version = f
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        if version != FORMAT_VERSION {
            return Err(Error::Weights(format!(
                "{}: unsupported archive version {version}",
                path.display()
            )));
        }
        let hlen = f
            .read_u64::<LittleEndian>()
            .map_err(|e| Error::io(path, e))? as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)
            .map_err(|_| Error::Weights(format!("{}: truncated header", path.display())))?;
        let header: Header = serde_json::from_slice(&hbuf)
            .map_err(|e| Error::Weights(format!("{}: malformed header: {e}", path.display())))?;
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        let mut payload = vec![0f32; total];
        for v in payload.iter_mut() {
            *v = f.read_f32::<LittleEndian>().map_err(|_| {
                Error::Weights(format!("{}: truncated tensor payload", path.display()))
            })?;
        }
        let mut entries = BTreeMap::new();
        for t in header.tensors {
            if t.offset + t.len > total {
                return Err(Error::Weights(format!(
                    "{}: tensor {} overruns the payload",
                    path.display(),
                    t.name
                )));
            }
            entries.insert(t.name.clone(), t);
        }
        Ok(Archive {
            network: header.network,
            meta: header.meta,
            entries,
            payload,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries.get(name).map(|t| {
            (
                t.shape.as_slice(),
                &self.payload[t.offset..t.offset + t.len],
            )
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

/// Write an archive from (name, shape, values) sections.
pub fn write_archive(
    path: impl AsRef<Path>,
    network: &NetworkConfig,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
    meta: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, shape, values) in tensors {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Weights(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            offset,
            len: values.len(),
        });
        offset += values.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        network: network.clone(),
        tensors: entries,
        meta,
    };
    let hbuf = serde_json::to_vec(&header)
        .map_err(|e| Error::Weights(format!("header serialization: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?,
        );
        w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)
            .map_err(|e| Error::io(path, e))?;
        w.write_u64::<LittleEndian>(hbuf.len() as u64)
            .map_err(|e| Error::io(path, e))?;
        w.write_all(&hbuf).map_err(|e| Error::io(path, e))?;
        for (_, _, values) in tensors {
            for &v in values {
                w.write_f32::<LittleEndian>(v).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Extract every parameter of a network as archive sections.
pub fn network_sections<T: Scalar>(net: &mut SegResNet<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut sections = Vec::new();
    net.for_each_param(&mut |p| {
        sections.push((
            p.name.clone(),
            p.shape.clone(),
            p.value.iter().map(|v| v.as_f64() as f32).collect(),
        ));
    });
    sections
}

pub fn save_weights<T: Scalar>(
    net: &mut SegResNet<T>,
    path: impl AsRef<Path>,
    meta: serde_json::Value,
) -> Result<()> {
    let cfg = net.cfg.clone();
    let sections = network_sections(net);
    write_archive(path, &cfg, &sections, meta)
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    /// Parameters left at fresh initialization because the archive entry was
    /// absent or had a different shape (lenient mode only).
    pub skipped: Vec<String>,
    /// Archive tensors that matched no network parameter.
    pub unused: Vec<String>,
}

/// Copy archive tensors into an already-built network.
///
/// Strict mode requires an exact bijection of names and shapes and reports
/// every offender; lenient mode skips mismatches so a checkpoint trained
/// with, say, a different input channel count can still seed the rest.
pub fn load_into<T: Scalar>(
    net: &mut SegResNet<T>,
    archive: &Archive,
    strict: bool,
) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut problems = Vec::new();
    let mut used: std::collections::HashSet<String> = Default::default();
    net.for_each_param(&mut |p| match archive.tensor(&p.name) {
        Some((shape, values)) if shape == p.shape.as_slice() => {
            for (dst, &src) in p.value.iter_mut().zip(values) {
                *dst = T::of_f64(src as f64);
            }
            used.insert(p.name.clone());
            report.loaded += 1;
        }
        Some((shape, _)) => {
            problems.push(format!(
                "{}: archive shape {:?} vs network shape {:?}",
                p.name, shape, p.shape
            ));
            report.skipped.push(p.name.clone());
        }
        None => {
            problems.push(format!("{}: missing from archive", p.name));
            report.skipped.push(p.name.clone());
        }
    });
    for name in archive.names() {
        // Optimizer state rides along in checkpoints under its own
        // namespace; it is not part of the weight bijection.
        if name.starts_with("optim.") {
            continue;
        }
        if !used.contains(name) && !report.skipped.iter().any(|s| s == name) {
            report.unused.push(name.to_string());
        }
    }
    if strict && (!problems.is_empty() || !report.unused.is_empty()) {
        let mut msg = problems;
        msg.extend(report.unused.iter().map(|n| format!("{n}: not in network")));
        return Err(Error::Weights(format!(
            "strict load failed:\n  {}",
            msg.join("\n  ")
        )));
    }
    Ok(report)
}

/// Build a network from `cfg` (seeded init) and load `path` into it.
pub fn load_weights<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &NetworkConfig,
    strict: bool,
    init_seed: u64,
) -> Result<(SegResNet<T>, LoadReport)> {
    use rand::SeedableRng;
    let archive = Archive::read(path)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(init_seed);
    let mut net = SegResNet::build(cfg.clone(), &mut rng)?;
    let report = load_into(&mut net, &archive, strict)?;
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(in_channels: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            out_channels: 2,
            init_filters: 4,
            blocks_down: vec![1, 1],
            blocks_up: vec![1],
            ds_heads: 1,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn save_then_strict_load_reproduces_forward_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = SegResNet::<f32>::build(tiny_cfg(2), &mut rng).unwrap();
        let path = dir.path().join("w.ckpt");
        save_weights(&mut net, &path, serde_json::json!({"kind": "weights"})).unwrap();

        let (other, report) = load_weights::<f32>(&path, &tiny_cfg(2), true, 999).unwrap();
        assert!(report.skipped.is_empty());
        let x = Array4::from_shape_simple_fn((2, 8, 8, 8), || rng.random_range(-1.0..1.0f32));
        let a = net.forward(&x).unwrap();
        let b = other.forward(&x).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            assert_eq!(la, lb, "forward must be bit-identical after round trip");
        }
    }

    #[test]
    fn lenient_load_skips_shape_mismatches_and_reports_them() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Pretrained with 4 input channels; current task uses 2.
        let mut pretrained = SegResNet::<f32>::build(tiny_cfg(4), &mut rng).unwrap();
        let path = dir.path().join("pre.ckpt");
        save_weights(&mut pretrained, &path, serde_json::Value::Null).unwrap();

        let err = load_weights::<f32>(&path, &tiny_cfg(2), true, 0);
        assert!(err.is_err(), "strict load across channel counts must fail");
        let msg = err.err().unwrap().to_string();
        assert!(msg.contains("stem.conv.weight"), "got: {msg}");

        let (_, report) = load_weights::<f32>(&path, &tiny_cfg(2), false, 0).unwrap();
        assert_eq!(report.skipped, vec!["stem.conv.weight".to_string()]);
        assert!(report.loaded > 0);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = SegResNet::<f32>::build(tiny_cfg(2), &mut rng).unwrap();
        let path = dir.path().join("w.ckpt");
        save_weights(&mut net, &path, serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 64]).unwrap();
        match Archive::read(&cut) {
            Err(Error::Weights(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected weights error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(Archive::read(&path).is_err());
    }
}
