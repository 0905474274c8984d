//! Checkpoint serialization.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CPNN" | version u32 | config_hash 32 bytes
//! | meta_len u32 | meta (UTF-8 TOML: arch config, provenance, step count)
//! | blob_count u32
//! per blob: name_len u16 | name | ndim u8 | dims u64 x ndim | f32 data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, CoordScaler, Sequential};
use super::optim::{OptimSpec, Optimizer};
use crate::error::{Error, Result};
use crate::hashes;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CPNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    /// Training stage provenance, e.g. "stage1" or "stage3/round-2".
    pub stage_tag: String,
    /// Hex digest of the dataset the model was trained on; empty if unknown.
    pub dataset_hash: String,
    pub step_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimSpec>,
    pub scaler: CoordScaler,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config_hash: String,
    /// Named weight (and optimizer state) tensors, in save order.
    pub blobs: Vec<(String, Vec<u64>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, blobs: Vec<(String, Vec<u64>, Vec<f32>)>) -> Checkpoint {
        let config_hash = meta.arch.hash_hex();
        Checkpoint { meta, config_hash, blobs }
    }

    /// Snapshot a sequential model (and optionally its optimizer state).
    pub fn from_sequential(
        model: &Sequential<f32>,
        stage_tag: &str,
        dataset_hash: &str,
        scaler: CoordScaler,
        optimizer: Option<&Optimizer<f32>>,
    ) -> Checkpoint {
        let mut blobs = Vec::new();
        let mut names = Vec::new();
        for p in model.params_ref() {
            let dims: Vec<u64> = p.value.shape().iter().map(|&d| d as u64).collect();
            blobs.push((p.name.clone(), dims, p.value.iter().cloned().collect()));
            names.push(p.name);
        }
        let (step_count, optim) = match optimizer {
            Some(o) => {
                blobs.extend(o.export_state(&names));
                (o.step_count(), Some(o.spec))
            }
            None => (0, None),
        };
        Checkpoint::new(
            CheckpointMeta {
                arch: ArchConfig::Sequential(model.config.clone()),
                stage_tag: stage_tag.to_string(),
                dataset_hash: dataset_hash.to_string(),
                step_count,
                optim,
                scaler,
            },
            blobs,
        )
    }

    /// Rebuild the sequential model stored in this checkpoint.
    pub fn to_sequential(&self) -> Result<Sequential<f32>> {
        let cfg = match &self.meta.arch {
            ArchConfig::Sequential(c) => c.clone(),
            ArchConfig::Decoupled(_) => {
                return Err(Error::format(
                    "checkpoint holds a decoupled-head model, not a sequential one",
                ))
            }
        };
        let mut model = Sequential::new(cfg)?;
        self.load_params_into(&mut model, "")?;
        Ok(model)
    }

    /// Copy named blobs into a model's parameters. `prefix` selects a blob
    /// namespace (used by multi-part models).
    pub fn load_params_into(&self, model: &mut Sequential<f32>, prefix: &str) -> Result<()> {
        for p in model.params_mut() {
            let name = format!("{prefix}{}", p.name);
            let (_, dims, data) = self
                .blobs
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::format(format!("checkpoint missing blob '{name}'")))?;
            let expect: Vec<u64> = p.value.shape().iter().map(|&d| d as u64).collect();
            if *dims != expect {
                return Err(Error::ShapeMismatch {
                    context: format!("blob '{name}'"),
                    expected: expect.iter().map(|&d| d as usize).collect(),
                    actual: dims.iter().map(|&d| d as usize).collect(),
                });
            }
            let mut value = p.value;
            for (w, &v) in value.iter_mut().zip(data.iter()) {
                *w = v;
            }
        }
        Ok(())
    }

    /// Look up a named blob.
    pub fn get_blob(&self, name: &str) -> Result<(&str, &[u64], &[f32])> {
        self.blobs
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(n, d, v)| (n.as_str(), d.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::format(format!("checkpoint missing blob '{name}'")))
    }

    /// Fail unless the checkpoint was produced for `expected`.
    pub fn ensure_arch(&self, expected: &ArchConfig) -> Result<()> {
        let want = expected.hash_hex();
        if self.config_hash != want {
            return Err(Error::ConfigHashMismatch {
                expected: want,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    /// Digest over weight blob contents; stable identity for a set of weights.
    pub fn weight_hash_hex(&self) -> String {
        let mut bytes = Vec::new();
        for (name, dims, data) in &self.blobs {
            bytes.extend_from_slice(name.as_bytes());
            for d in dims {
                bytes.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hashes::sha256_hex(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let hash_bytes = hex_to_bytes(&self.config_hash)?;
        w.write_all(&hash_bytes)?;
        let meta = toml::to_string(&self.meta)
            .map_err(|e| Error::format(format!("checkpoint meta serialization: {e}")))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for (name, dims, data) in &self.blobs {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[dims.len() as u8])?;
            for d in dims {
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(data.len() * 4);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_or_truncated(&mut r, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "bad magic {magic:?}, not a checkpoint file"
            )));
        }
        let mut v4 = [0u8; 4];
        read_or_truncated(&mut r, &mut v4, "version")?;
        let version = u32::from_le_bytes(v4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut hash = [0u8; 32];
        read_or_truncated(&mut r, &mut hash, "config hash")?;
        let stored_hash: String = hash.iter().map(|b| format!("{b:02x}")).collect();

        read_or_truncated(&mut r, &mut v4, "meta length")?;
        let meta_len = u32::from_le_bytes(v4) as usize;
        let mut meta_buf = vec![0u8; meta_len];
        read_or_truncated(&mut r, &mut meta_buf, "meta blob")?;
        let meta: CheckpointMeta = toml::from_str(
            std::str::from_utf8(&meta_buf)
                .map_err(|e| Error::format(format!("checkpoint meta not UTF-8: {e}")))?,
        )
        .map_err(|e| Error::format(format!("checkpoint meta parse: {e}")))?;

        // stored hash must match the embedded architecture
        let computed = meta.arch.hash_hex();
        if computed != stored_hash {
            return Err(Error::ConfigHashMismatch { expected: computed, found: stored_hash });
        }

        read_or_truncated(&mut r, &mut v4, "blob count")?;
        let blob_count = u32::from_le_bytes(v4);
        let mut blobs = Vec::with_capacity(blob_count as usize);
        for _ in 0..blob_count {
            let mut l2 = [0u8; 2];
            read_or_truncated(&mut r, &mut l2, "blob name length")?;
            let name_len = u16::from_le_bytes(l2) as usize;
            let mut name_buf = vec![0u8; name_len];
            read_or_truncated(&mut r, &mut name_buf, "blob name")?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::format(format!("blob name not UTF-8: {e}")))?;
            let mut n1 = [0u8; 1];
            read_or_truncated(&mut r, &mut n1, "blob ndim")?;
            let mut dims = Vec::with_capacity(n1[0] as usize);
            for _ in 0..n1[0] {
                let mut d8 = [0u8; 8];
                read_or_truncated(&mut r, &mut d8, "blob dims")?;
                dims.push(u64::from_le_bytes(d8));
            }
            let len: usize =
                if dims.is_empty() { 0 } else { dims.iter().product::<u64>() as usize };
            let mut buf = vec![0u8; len * 4];
            read_or_truncated(&mut r, &mut buf, "blob data")?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blobs.push((name, dims, data));
        }
        // trailing garbage means the file was corrupted or concatenated
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("checkpoint has trailing bytes past final blob"));
        }
        Ok(Checkpoint { meta, config_hash: stored_hash, blobs })
    }
}

fn read_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("truncated checkpoint while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn hex_to_bytes(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(Error::format(format!("config hash must be 64 hex chars, got {}", hex.len())));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in hex.as_bytes().chunks_exact(2).enumerate() {
        let s = std::str::from_utf8(chunk).unwrap();
        out[i] = u8::from_str_radix(s, 16)
            .map_err(|e| Error::format(format!("bad hex in config hash: {e}")))?;
    }
    Ok(out)
}
