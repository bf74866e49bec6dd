//! Versioned binary checkpoint container.
//!
//! Layout, all little-endian: `"VGDM"` magic, `u32` version, the denoiser
//! config and schedule settings as fixed fields, `u64` step counter, a
//! 32-byte RNG state digest, presence flags, then length-prefixed
//! name/shape/payload records with 32-bit float payloads. Loading audits
//! every parameter record against the shapes implied by the embedded config
//! and names the first mismatching array.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::AdamState;
use crate::denoiser::DenoiserConfig;
use crate::params::{ParamLayout, ParamVec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VGDM";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_OPT: u32 = 1;
const FLAG_EMA: u32 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unknown checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("shape audit failed: {0}")]
    ShapeAudit(String),
    #[error("invalid embedded config: {0}")]
    BadConfig(String),
}

/// Everything needed to resume sampling/evaluation: config, schedule
/// settings, parameters, and optionally optimizer moments and EMA shadows.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: DenoiserConfig,
    pub schedule_timesteps: usize,
    pub schedule_beta_start: f64,
    pub schedule_beta_end: f64,
    pub step: u64,
    /// Digest of the training RNG state at save time.
    pub rng_digest: [u8; 32],
    pub params: ParamVec<f32>,
    pub opt: Option<AdamState<f32>>,
    pub ema: Option<ParamVec<f32>>,
}

impl Checkpoint {
    /// Parameters to sample/evaluate with: the EMA shadow when present,
    /// otherwise the raw parameters.
    pub fn eval_params(&self) -> &ParamVec<f32> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.data().len()
    }
}

fn write_record<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[f32],
) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(shape.len() as u32)?;
    for d in shape {
        w.write_u32::<LittleEndian>(*d as u32)?;
    }
    for v in data {
        w.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn write_param_vec<W: Write>(w: &mut W, prefix: &str, p: &ParamVec<f32>) -> std::io::Result<()> {
    for e in p.layout().entries() {
        let name = format!("{prefix}{}", e.name);
        write_record(w, &name, &e.shape, p.slice(&e.name))?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(ckpt.version)?;
    let c = &ckpt.config;
    for v in [
        c.image_size,
        c.in_channels,
        c.patch_size,
        c.embed_dim,
        c.depth,
        c.num_heads,
        c.window_size,
    ] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    w.write_f64::<LittleEndian>(c.mlp_ratio)?;
    w.write_u32::<LittleEndian>(ckpt.schedule_timesteps as u32)?;
    w.write_f64::<LittleEndian>(ckpt.schedule_beta_start)?;
    w.write_f64::<LittleEndian>(ckpt.schedule_beta_end)?;
    w.write_u64::<LittleEndian>(ckpt.step)?;
    w.write_all(&ckpt.rng_digest)?;

    let mut flags = 0u32;
    if ckpt.opt.is_some() {
        flags |= FLAG_OPT;
    }
    if ckpt.ema.is_some() {
        flags |= FLAG_EMA;
    }
    w.write_u32::<LittleEndian>(flags)?;

    let n_entries = ckpt.params.layout().entries().len() as u32;
    let mut record_count = n_entries;
    if let Some(opt) = &ckpt.opt {
        record_count += 2 * opt.m.layout().entries().len() as u32;
    }
    if ckpt.ema.is_some() {
        record_count += n_entries;
    }
    w.write_u32::<LittleEndian>(record_count)?;
    if let Some(opt) = &ckpt.opt {
        w.write_u64::<LittleEndian>(opt.step)?;
    }

    write_param_vec(&mut w, "", &ckpt.params)?;
    if let Some(opt) = &ckpt.opt {
        write_param_vec(&mut w, "adam.m.", &opt.m)?;
        write_param_vec(&mut w, "adam.v.", &opt.v)?;
    }
    if let Some(ema) = &ckpt.ema {
        write_param_vec(&mut w, "ema.", ema)?;
    }
    w.flush()?;
    Ok(())
}

struct RecordReader<R> {
    inner: R,
}

impl<R: Read> RecordReader<R> {
    fn read_record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), CheckpointError> {
        let name_len = self.inner.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Truncated);
        }
        let mut name_bytes = vec![0u8; name_len];
        self.inner.read_exact(&mut name_bytes).map_err(trunc)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::Truncated)?;
        let ndim = self.inner.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Truncated);
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.inner.read_u32::<LittleEndian>().map_err(trunc)? as usize);
        }
        // Overflow-safe, bounded record size; corrupt headers must error
        // before any allocation.
        let len = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .filter(|len| *len <= (1 << 30))
            .ok_or(CheckpointError::Truncated)?;
        let mut data = vec![0f32; len];
        self.inner
            .read_f32_into::<LittleEndian>(&mut data)
            .map_err(trunc)?;
        Ok((name, shape, data))
    }
}

fn trunc(_: std::io::Error) -> CheckpointError {
    CheckpointError::Truncated
}

fn read_param_vec<R: Read>(
    r: &mut RecordReader<R>,
    prefix: &str,
    layout: &Arc<ParamLayout>,
) -> Result<ParamVec<f32>, CheckpointError> {
    let mut data = vec![0f32; layout.total_len()];
    for e in layout.entries() {
        let (name, shape, values) = r.read_record()?;
        let expected = format!("{prefix}{}", e.name);
        if name != expected {
            return Err(CheckpointError::ShapeAudit(format!(
                "found array '{name}', expected '{expected}'"
            )));
        }
        if shape != e.shape {
            return Err(CheckpointError::ShapeAudit(format!(
                "array '{name}' has shape {shape:?}, expected {:?}",
                e.shape
            )));
        }
        data[e.offset..e.offset + e.len()].copy_from_slice(&values);
    }
    Ok(ParamVec::from_data(Arc::clone(layout), data))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnknownVersion(version));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    }
    let mlp_ratio = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let config = DenoiserConfig {
        image_size: dims[0],
        in_channels: dims[1],
        patch_size: dims[2],
        embed_dim: dims[3],
        depth: dims[4],
        num_heads: dims[5],
        window_size: dims[6],
        mlp_ratio,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let schedule_timesteps = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let schedule_beta_start = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let schedule_beta_end = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let step = r.read_u64::<LittleEndian>().map_err(trunc)?;
    let mut rng_digest = [0u8; 32];
    r.read_exact(&mut rng_digest).map_err(trunc)?;
    let flags = r.read_u32::<LittleEndian>().map_err(trunc)?;
    let _record_count = r.read_u32::<LittleEndian>().map_err(trunc)?;
    let opt_step = if flags & FLAG_OPT != 0 {
        r.read_u64::<LittleEndian>().map_err(trunc)?
    } else {
        0
    };

    let layout = Arc::new(config.param_layout());
    let mut rr = RecordReader { inner: r };
    let params = read_param_vec(&mut rr, "", &layout)?;
    let opt = if flags & FLAG_OPT != 0 {
        let m = read_param_vec(&mut rr, "adam.m.", &layout)?;
        let v = read_param_vec(&mut rr, "adam.v.", &layout)?;
        Some(AdamState {
            m,
            v,
            step: opt_step,
        })
    } else {
        None
    };
    let ema = if flags & FLAG_EMA != 0 {
        Some(read_param_vec(&mut rr, "ema.", &layout)?)
    } else {
        None
    };

    Ok(Checkpoint {
        version,
        config,
        schedule_timesteps,
        schedule_beta_start,
        schedule_beta_end,
        step,
        rng_digest,
        params,
        opt,
        ema,
    })
}

/// SHA-256 of a file's bytes, hex-encoded. Used for checkpoint digests.
pub fn sha256_hex(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let out = hasher.finalize();
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let config = DenoiserConfig {
            image_size: 8,
            in_channels: 3,
            patch_size: 2,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            window_size: 2,
            mlp_ratio: 2.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params: ParamVec<f32> = init_params(&config, &mut rng).unwrap();
        let mut opt = AdamState::new(params.layout_arc());
        opt.step = 17;
        for v in opt.m.data_mut().iter_mut() {
            *v = 0.125;
        }
        let ema = params.clone();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            schedule_timesteps: 50,
            schedule_beta_start: 1e-4,
            schedule_beta_end: 0.02,
            step: 321,
            rng_digest: [7u8; 32],
            params,
            opt: Some(opt),
            ema: Some(ema),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.vgdm");
        let ckpt = sample_checkpoint(1);
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.step, 321);
        assert_eq!(back.rng_digest, ckpt.rng_digest);
        assert_eq!(back.schedule_timesteps, 50);
        assert!(back
            .params
            .data()
            .iter()
            .zip(ckpt.params.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let opt = back.opt.unwrap();
        assert_eq!(opt.step, 17);
        assert_eq!(opt.m.data(), ckpt.opt.as_ref().unwrap().m.data());
        assert_eq!(back.ema.unwrap().data(), ckpt.ema.as_ref().unwrap().data());

        // Identical checkpoints serialize to identical bytes.
        let path2 = dir.path().join("c2.vgdm");
        save_checkpoint(&path2, &ckpt).unwrap();
        assert_eq!(sha256_hex(&path).unwrap(), sha256_hex(&path2).unwrap());
    }

    #[test]
    fn error_cases_are_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.vgdm");
        let ckpt = sample_checkpoint(2);
        save_checkpoint(&path, &ckpt).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated)
        ));

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));

        let mut bad = good.clone();
        bad[4] = 200;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnknownVersion(200))
        ));
    }

    #[test]
    fn foreign_config_fails_shape_audit_naming_the_array() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.vgdm");
        let ckpt = sample_checkpoint(3);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bump embed_dim in the embedded config: the parameter records no
        // longer match the implied shapes.
        let off = 4 + 4 + 4 * 3; // magic, version, image_size, in_channels, patch_size
        bytes[off..off + 4].copy_from_slice(&16u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::ShapeAudit(msg)) => {
                assert!(msg.contains("patch_embed.weight"), "{msg}");
            }
            other => panic!("expected shape audit failure, got {other:?}"),
        }
    }
}
