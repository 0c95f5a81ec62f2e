//! Binary checkpoints: model configuration, every parameter tensor, and the
//! per-layer sparsity running averages, round-tripping bit-exactly.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "GSACKPT1" (8 bytes)
//! u32     format version (currently 1)
//! u32     config length, then that many bytes of TOML for the model config
//! u8      element width in bits (32 or 64)
//! u64     tensor count, then per tensor:
//!           u16 name length, name bytes (UTF-8)
//!           u8 rank, u64 per dimension
//!           raw element bytes
//! u64     sparsity-state count, then per state: f64 average, f64 decay,
//!         u8 initialized flag
//! ```
//!
//! Tensors are written in canonical traversal order and the names are
//! stored anyway, so a reader can both stream and audit. The batch stream
//! and optimizer moments are deliberately not stored: resuming restarts
//! data and optimizer state from the seed, which keeps checkpoints small
//! and the format stable; the parameters and sparsity averages are the
//! state the schedule cannot reconstruct.

use crate::error::{Error, Result};
use crate::indexer::SparsityState;
use crate::model::{visit_params, visit_params_mut, ModelConfig, ModelParams};
use crate::real::Real;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"GSACKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub model_cfg: ModelConfig,
    pub params: ModelParams<F>,
    pub states: Vec<SparsityState>,
}

fn write_all(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(Error::Io)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        Error::Parse(format!("checkpoint truncated or unreadable: {e}"))
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_elems<F: Real>(w: &mut impl Write, xs: &[F]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * (F::BITS as usize / 8));
    if F::BITS == 32 {
        for x in xs {
            buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    } else {
        for x in xs {
            buf.extend_from_slice(&x.to_f64().to_le_bytes());
        }
    }
    write_all(w, &buf)
}

fn read_elems<F: Real>(r: &mut impl Read, out: &mut [F]) -> Result<()> {
    let width = F::BITS as usize / 8;
    let mut buf = vec![0u8; out.len() * width];
    read_exact(r, &mut buf)?;
    if F::BITS == 32 {
        for (x, chunk) in out.iter_mut().zip(buf.chunks_exact(4)) {
            *x = F::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    } else {
        for (x, chunk) in out.iter_mut().zip(buf.chunks_exact(8)) {
            *x = F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    Ok(())
}

/// Serialize a checkpoint into `w`.
pub fn write_checkpoint<F: Real>(
    w: &mut impl Write,
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    states: &[SparsityState],
) -> Result<()> {
    cfg.validate()?;
    params.validate(cfg)?;
    write_all(w, MAGIC)?;
    write_all(w, &FORMAT_VERSION.to_le_bytes())?;
    let cfg_toml = toml::to_string(cfg)
        .map_err(|e| Error::Config(format!("model config does not serialize: {e}")))?;
    let cfg_bytes = cfg_toml.as_bytes();
    write_all(w, &(cfg_bytes.len() as u32).to_le_bytes())?;
    write_all(w, cfg_bytes)?;
    write_all(w, &[F::BITS as u8])?;

    let mut count = 0u64;
    visit_params(params, &mut |_, _| count += 1);
    write_all(w, &count.to_le_bytes())?;
    let mut failure: Option<Error> = None;
    let mut body: Vec<u8> = Vec::new();
    visit_params(params, &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let mut emit = || -> Result<()> {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Invariant(format!("parameter name too long: {name}")));
            }
            body.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            body.extend_from_slice(nb);
            body.push(t.shape().len() as u8);
            for &dim in t.shape() {
                body.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            write_elems(&mut body, t.as_slice())
        };
        if let Err(e) = emit() {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    write_all(w, &body)?;

    write_all(w, &(states.len() as u64).to_le_bytes())?;
    for s in states {
        write_all(w, &s.v_bar.to_le_bytes())?;
        write_all(w, &s.decay.to_le_bytes())?;
        write_all(w, &[u8::from(s.initialized)])?;
    }
    Ok(())
}

/// Parse a checkpoint from `r`. The element width in the file must match
/// `F`; a 32-bit checkpoint does not silently widen into a 64-bit run.
pub fn read_checkpoint<F: Real>(r: &mut impl Read) -> Result<Checkpoint<F>> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!(
            "bad checkpoint magic {:?} (expected {:?})",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let cfg_len = read_u32(r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact(r, &mut cfg_bytes)?;
    let cfg_toml = String::from_utf8(cfg_bytes)
        .map_err(|e| Error::Parse(format!("checkpoint config is not UTF-8: {e}")))?;
    let model_cfg: ModelConfig = toml::from_str(&cfg_toml)
        .map_err(|e| Error::Parse(format!("checkpoint config does not parse: {e}")))?;
    model_cfg.validate()?;
    let bits = read_u8(r)? as u32;
    if bits != F::BITS {
        return Err(Error::Parse(format!(
            "checkpoint stores {bits}-bit elements but this run uses {}-bit",
            F::BITS
        )));
    }

    // Materialize a parameter set of the right shapes (every element is
    // overwritten below), then fill it in file order, insisting names and
    // shapes line up.
    let mut params: ModelParams<F> = ModelParams::init(&model_cfg, &mut crate::rng::Rng::new(0));
    let mut expect = 0u64;
    visit_params(&params, &mut |_, _| expect += 1);
    let count = read_u64(r)?;
    if count != expect {
        return Err(Error::Parse(format!(
            "checkpoint holds {count} tensors, the config implies {expect}"
        )));
    }
    struct Entry<F> {
        name: String,
        shape: Vec<usize>,
        data: Vec<F>,
    }
    let mut entries: Vec<Entry<F>> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut nb = vec![0u8; name_len];
        read_exact(r, &mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|e| Error::Parse(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![F::zero(); numel];
        read_elems(r, &mut data)?;
        entries.push(Entry { name, shape, data });
    }
    let mut i = 0usize;
    let mut failure: Option<Error> = None;
    visit_params_mut(&mut params, &mut |name, t| {
        if failure.is_some() {
            return;
        }
        let e = &entries[i];
        i += 1;
        if e.name != name {
            failure = Some(Error::Parse(format!(
                "tensor {} is named {:?} in the checkpoint, expected {:?}",
                i - 1,
                e.name,
                name
            )));
            return;
        }
        if e.shape != t.shape() {
            failure = Some(Error::Parse(format!(
                "tensor {name} has shape {:?} in the checkpoint, expected {:?}",
                e.shape,
                t.shape()
            )));
            return;
        }
        t.as_mut_slice().copy_from_slice(&e.data);
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let n_states = read_u64(r)? as usize;
    if n_states != model_cfg.n_layers {
        return Err(Error::Parse(format!(
            "checkpoint holds {n_states} sparsity states for {} layers",
            model_cfg.n_layers
        )));
    }
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let v_bar = read_f64(r)?;
        let decay = read_f64(r)?;
        let flag = read_u8(r)?;
        if flag > 1 {
            return Err(Error::Parse(format!("bad initialized flag {flag}")));
        }
        let mut s = SparsityState::new(decay)?;
        s.v_bar = v_bar;
        s.initialized = flag == 1;
        states.push(s);
    }
    let mut tail = [0u8; 1];
    match r.read(&mut tail) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Parse("trailing bytes after checkpoint".to_string())),
        Err(e) => return Err(Error::Io(e)),
    }
    Ok(Checkpoint { model_cfg, params, states })
}

/// Write a checkpoint file.
pub fn save_checkpoint<F: Real>(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    states: &[SparsityState],
) -> Result<()> {
    let file = File::create(path.as_ref()).map_err(Error::Io)?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, cfg, params, states)?;
    w.flush().map_err(Error::Io)
}

/// Read a checkpoint file.
pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    let file = File::open(path.as_ref()).map_err(Error::Io)?;
    let mut r = BufReader::new(file);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionMode, GsaConfig};
    use crate::rng::Rng;

    fn cfg(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            vocab_size: 17,
            ffn_width: 12,
            attention: GsaConfig {
                d: 8,
                n_h: 2,
                n_kv: 1,
                d_k: 4,
                d_i: 4,
                h_i: 2,
                k_base: 3,
                k_min: 2,
                k_max: 6,
                mode,
                adaptive_k_enabled: true,
                ema_decay: 0.99,
                rope: true,
            },
        }
    }

    fn random_state<F: Real>(mode: AttentionMode) -> (ModelConfig, ModelParams<F>, Vec<SparsityState>) {
        let c = cfg(mode);
        let mut rng = Rng::new(99);
        let params = ModelParams::init(&c, &mut rng);
        let mut states = vec![SparsityState::new(0.99).unwrap(); c.n_layers];
        states[0].v_bar = 0.123456789;
        states[0].initialized = true;
        (c, params, states)
    }

    fn bits_of<F: Real>(params: &ModelParams<F>) -> Vec<(String, Vec<u64>)> {
        let mut out = Vec::new();
        visit_params(params, &mut |name, t| {
            out.push((
                name.to_string(),
                t.as_slice().iter().map(|x| x.to_f64().to_bits()).collect(),
            ));
        });
        out
    }

    #[test]
    fn round_trip_is_bit_exact_f64() {
        let (c, params, states) = random_state::<f64>(AttentionMode::Gsa);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &params, &states).unwrap();
        let ck = read_checkpoint::<f64>(&mut buf.as_slice()).unwrap();
        assert_eq!(ck.model_cfg, c);
        assert_eq!(bits_of(&ck.params), bits_of(&params));
        assert_eq!(ck.states.len(), 2);
        assert_eq!(ck.states[0].v_bar.to_bits(), 0.123456789f64.to_bits());
        assert!(ck.states[0].initialized);
        assert!(!ck.states[1].initialized);
    }

    #[test]
    fn round_trip_is_bit_exact_f32() {
        let (c, params, states) = random_state::<f32>(AttentionMode::SparseOnly);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &params, &states).unwrap();
        let ck = read_checkpoint::<f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(bits_of(&ck.params), bits_of(&params));
    }

    #[test]
    fn file_round_trip() {
        let (c, params, states) = random_state::<f64>(AttentionMode::GatedOnly);
        let dir = std::env::temp_dir().join(format!("gsa-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &c, &params, &states).unwrap();
        let ck = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(bits_of(&ck.params), bits_of(&params));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_bad_magic_version_truncation_and_width() {
        let (c, params, states) = random_state::<f64>(AttentionMode::Gsa);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &params, &states).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64>(&mut bad.as_slice()), Err(Error::Parse(_))));

        let mut bad = buf.clone();
        bad[8] = 9; // version
        let err = read_checkpoint::<f64>(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));

        let truncated = &buf[..buf.len() / 2];
        assert!(read_checkpoint::<f64>(&mut &truncated[..]).is_err());

        // A 64-bit file refuses to load into a 32-bit run.
        let err = read_checkpoint::<f32>(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("64-bit"), "{err}");

        let mut extended = buf.clone();
        extended.push(0);
        let err = read_checkpoint::<f64>(&mut extended.as_slice()).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn mode_determines_stored_tensor_set() {
        // A standard-mode checkpoint has no indexer or gate tensors, and is
        // structurally incompatible with a gsa config of the same sizes.
        let (c, params, states) = random_state::<f64>(AttentionMode::Standard);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c, &params, &states).unwrap();
        let ck = read_checkpoint::<f64>(&mut buf.as_slice()).unwrap();
        let names: Vec<String> = bits_of(&ck.params).into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.contains(".indexer.") && !n.contains(".gates.")));
        let (_, gsa_params, _) = random_state::<f64>(AttentionMode::Gsa);
        let gsa_names: Vec<String> =
            bits_of(&gsa_params).into_iter().map(|(n, _)| n).collect();
        assert!(gsa_names.iter().any(|n| n.contains(".indexer.")));
        assert!(gsa_names.len() > names.len());
    }
}
