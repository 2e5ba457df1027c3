//! Binary parameter container and checkpoint manifests.
//!
//! Container layout (little endian):
//!
//! ```text
//! b"RATENETP" u32 version=1 u64 count
//! count x { u32 name_len, name (utf-8), u32 rank, rank x u64 dim, numel x f32 }
//! ```
//!
//! Entries are written in name order, so equal parameter sets produce equal
//! bytes. A checkpoint is such a file plus a JSON manifest next to it.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ratenet_autograd::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RATENETP";
const VERSION: u32 = 1;

pub fn encode_params(ps: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * ps.numel() + 64 * ps.len());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u64::<LittleEndian>(ps.len() as u64).unwrap();
    for (name, t) in ps.iter() {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in t.data() {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_params(mut r: impl Read, origin: &Path) -> Result<ParamSet<f32>> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", origin.display()));
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: truncated or unreadable ({e})", origin.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a parameter file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LittleEndian>().map_err(io)?;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if n > 4096 {
            return Err(bad(format!("implausible name length {n}")));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8".into()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if rank > 8 {
            return Err(bad(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(format!("{name}: shape overflow")))?;
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        if ps.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    Ok(ps)
}

pub fn write_params(path: &Path, ps: &ParamSet<f32>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode_params(ps)).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ParamSet<f32>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_params(BufReader::new(f), path)
}

/// Sidecar JSON of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Full run configuration the parameters belong to.
    pub config: serde_json::Value,
    /// Optimizer updates performed so far.
    pub iteration: u64,
    /// Completed training cycles.
    pub cycle: u64,
    /// Digest of everything that determines future random draws.
    pub rng_state_digest: String,
    /// Container file name, relative to the manifest.
    pub params_file: String,
    pub params_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    params: &ParamSet<f32>,
    config: serde_json::Value,
    iteration: u64,
    cycle: u64,
    rng_state_digest: String,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_params(params);
    let params_file = format!("{stem}.bin");
    write_atomic(&dir.join(&params_file), &bytes)?;
    let manifest = Manifest {
        config,
        iteration,
        cycle,
        rng_state_digest,
        params_file,
        params_sha256: sha256_hex(&bytes),
    };
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    write_atomic(&path, &json)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Loads a checkpoint by manifest path, verifying the container digest.
pub fn load_checkpoint(manifest_path: &Path) -> Result<(Manifest, ParamSet<f32>)> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bin = dir.join(&manifest.params_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&bytes) != manifest.params_sha256 {
        return Err(Error::Checkpoint(format!("{}: digest does not match its manifest", bin.display())));
    }
    let ps = decode_params(bytes.as_slice(), &bin)?;
    Ok((manifest, ps))
}

/// Fails unless `saved` and `current` configurations are identical.
pub fn ensure_same_config(saved: &serde_json::Value, current: &serde_json::Value) -> Result<()> {
    if saved == current {
        return Ok(());
    }
    let mut diffs = Vec::new();
    diff_json("", saved, current, &mut diffs);
    Err(Error::Checkpoint(format!("configuration mismatch: {}", diffs.join(", "))))
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_json(&p, u, v, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(format!("{} ({a} vs {b})", if path.is_empty() { "<root>" } else { path })),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.insert("b/w", Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 * 0.5 - 1.0));
        ps.insert("a/bias", Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        ps.insert("s", Tensor::scalar(3.25));
        ps
    }

    #[test]
    fn round_trip_is_exact_and_canonical() {
        let ps = sample();
        let bytes = encode_params(&ps);
        let back = decode_params(bytes.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, ps);
        assert_eq!(encode_params(&back), bytes);
        assert!(back.get("a/bias").unwrap().data()[1].is_sign_negative());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_params(&sample());
        let p = Path::new("mem");
        assert!(decode_params(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_params(extra.as_slice(), p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_params(magic.as_slice(), p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"a": 1, "b": {"c": 2}});
        let m = save_checkpoint(dir.path(), "ckpt", &sample(), cfg.clone(), 10, 2, "d".into()).unwrap();
        let (man, ps) = load_checkpoint(&m).unwrap();
        assert_eq!(ps, sample());
        assert_eq!((man.iteration, man.cycle), (10, 2));
        ensure_same_config(&man.config, &cfg).unwrap();
        let other = serde_json::json!({"a": 1, "b": {"c": 3}});
        let err = ensure_same_config(&man.config, &other).unwrap_err().to_string();
        assert!(err.contains("b.c"), "{err}");

        let bin = dir.path().join("ckpt.bin");
        let mut bytes = fs::read(&bin).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(load_checkpoint(&m).is_err());
    }
}
