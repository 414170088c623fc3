//! Snapshot directories: `manifest.txt` plus `weights.bin`.
//!
//! The manifest holds the run config (keys prefixed `config.`), counters,
//! RNG positions and the SHA-256 of `weights.bin`. The weight file is a
//! sequence of named tensors:
//!
//! ```text
//! u32 name_len | name | u8 dtype (0 = f32) | u32 rank | u64 dims[rank] | f32 data (LE)
//! ```
//!
//! Spectral-norm state is stored as `<layer>.sn_u` and `<layer>.sn_sigma`.
//! Snapshots hold the online network only; replay, target network and
//! optimizer moments are not saved.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{build_network, RunState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::{QNetwork, Tensor, Weights};

const MANIFEST: &str = "manifest.txt";
const WEIGHTS: &str = "weights.bin";
const DTYPE_F32: u8 = 0;

/// Everything written next to the weights.
#[derive(Debug, Clone)]
pub struct SnapshotMeta {
    pub config: RunConfig,
    pub state: RunState,
    pub updates: u64,
    pub sync_periods: u64,
    pub rngs: Vec<(String, ChaCha8Rng)>,
}

#[derive(Debug, Clone)]
pub struct LoadedSnapshot {
    pub meta: SnapshotMeta,
    pub net: QNetwork,
    pub weights: Weights<f32>,
}

impl LoadedSnapshot {
    pub fn rng(&self, name: &str) -> Option<&ChaCha8Rng> {
        self.meta.rngs.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Serializes named tensors in the format above.
pub fn encode_tensors(tensors: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Parses bytes written by [`encode_tensors`].
pub fn decode_tensors(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut c = Cursor { buf, pos: 0 };
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let at = c.pos;
        let truncated = || format!("truncated record at byte {at}");
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(truncated)?)
            .map_err(|_| format!("tensor name at byte {at} is not UTF-8"))?
            .to_string();
        let dtype = c.take(1).ok_or_else(truncated)?[0];
        if dtype != DTYPE_F32 {
            return Err(format!("{name}: unsupported dtype {dtype}"));
        }
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64().ok_or_else(truncated)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("{name}: shape overflows"))?;
        let bytes = c
            .take(count.checked_mul(4).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&buf).map_err(|m| Error::format(path, m))
}

fn weight_records(net: &QNetwork, weights: &Weights<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = net
        .params()
        .iter()
        .zip(&weights.tensors)
        .map(|(p, t)| (p.name.clone(), t.clone()))
        .collect();
    for (info, st) in net.sn_layers().iter().zip(&weights.sn) {
        out.push((
            format!("{}.sn_u", info.name),
            Tensor {
                shape: vec![st.u.len()],
                data: st.u.clone(),
            },
        ));
        out.push((
            format!("{}.sn_sigma", info.name),
            Tensor {
                shape: vec![1],
                data: vec![st.sigma],
            },
        ));
    }
    out
}

fn rng_line(name: &str, rng: &ChaCha8Rng) -> String {
    format!(
        "rng.{name} = {} {} {}\n",
        hex::encode(rng.get_seed()),
        rng.get_stream(),
        rng.get_word_pos()
    )
}

fn parse_rng(value: &str) -> Option<ChaCha8Rng> {
    let mut parts = value.split_whitespace();
    let seed: [u8; 32] = hex::decode(parts.next()?).ok()?.try_into().ok()?;
    let stream: u64 = parts.next()?.parse().ok()?;
    let word: u128 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word);
    Some(rng)
}

fn state_lines(state: &RunState) -> Vec<(&'static str, String)> {
    vec![
        ("frames", state.frames.to_string()),
        ("transitions", state.transitions.to_string()),
        ("vector_steps", state.vector_steps.to_string()),
        ("train_steps", state.train_steps.to_string()),
        ("samples", state.samples.to_string()),
        ("episodes", state.episodes.to_string()),
        ("timed_secs", state.timed_secs.to_string()),
        ("timed_frames", state.timed_frames.to_string()),
        ("wall_secs", state.wall_secs.to_string()),
        ("transition_digest", state.transition_digest.clone()),
    ]
}

/// Writes the snapshot into a sibling temp directory, then renames it over `dir`.
pub fn save_snapshot(dir: &Path, meta: &SnapshotMeta, net: &QNetwork, weights: &Weights<f32>) -> Result<()> {
    let records = weight_records(net, weights);
    let refs: Vec<(String, &Tensor<f32>)> = records.iter().map(|(n, t)| (n.clone(), t)).collect();
    let blob = encode_tensors(&refs);

    let mut manifest = String::new();
    manifest.push_str(&format!("weights_sha256 = {}\n", hex::encode(Sha256::digest(&blob))));
    manifest.push_str(&format!("updates = {}\n", meta.updates));
    manifest.push_str(&format!("sync_periods = {}\n", meta.sync_periods));
    for (k, v) in state_lines(&meta.state) {
        manifest.push_str(&format!("state.{k} = {v}\n"));
    }
    for (name, rng) in &meta.rngs {
        manifest.push_str(&rng_line(name, rng));
    }
    for (k, v) in meta.config.entries() {
        manifest.push_str(&format!("config.{k} = {v}\n"));
    }

    let file_name = dir
        .file_name()
        .ok_or_else(|| Error::Input(format!("snapshot path {} has no final component", dir.display())))?;
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{}.tmp", file_name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = tmp.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
        f.sync_all().map_err(|e| Error::io(&path, e))
    };
    write(WEIGHTS, &blob)?;
    write(MANIFEST, manifest.as_bytes())?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn parse_num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format(path, format!("bad value `{v}` for {key}")))
}

/// Reads a snapshot written by [`save_snapshot`], checking its digest and
/// that every tensor matches the architecture described by its config.
pub fn load_snapshot(dir: &Path) -> Result<LoadedSnapshot> {
    let manifest_path = dir.join(MANIFEST);
    let mut text = String::new();
    fs::File::open(&manifest_path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(&manifest_path, e))?;

    let mut config = RunConfig::default();
    let mut state = RunState::default();
    let mut kv: HashMap<String, String> = HashMap::new();
    let mut rngs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format(&manifest_path, format!("line {}: expected `key = value`", i + 1)))?;
        if let Some(key) = k.strip_prefix("config.") {
            config
                .set(key, v)
                .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", i + 1)))?;
        } else if let Some(name) = k.strip_prefix("rng.") {
            let rng = parse_rng(v)
                .ok_or_else(|| Error::format(&manifest_path, format!("line {}: bad rng state", i + 1)))?;
            rngs.push((name.to_string(), rng));
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |key: &str| -> Result<&str> {
        kv.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(&manifest_path, format!("missing `{key}`")))
    };
    let p = manifest_path.as_path();
    state.frames = parse_num(p, "state.frames", get("state.frames")?)?;
    state.transitions = parse_num(p, "state.transitions", get("state.transitions")?)?;
    state.vector_steps = parse_num(p, "state.vector_steps", get("state.vector_steps")?)?;
    state.train_steps = parse_num(p, "state.train_steps", get("state.train_steps")?)?;
    state.samples = parse_num(p, "state.samples", get("state.samples")?)?;
    state.episodes = parse_num(p, "state.episodes", get("state.episodes")?)?;
    state.timed_secs = parse_num(p, "state.timed_secs", get("state.timed_secs")?)?;
    state.timed_frames = parse_num(p, "state.timed_frames", get("state.timed_frames")?)?;
    state.wall_secs = parse_num(p, "state.wall_secs", get("state.wall_secs")?)?;
    state.transition_digest = get("state.transition_digest")?.to_string();
    let updates = parse_num(p, "updates", get("updates")?)?;
    let sync_periods = parse_num(p, "sync_periods", get("sync_periods")?)?;
    let digest = get("weights_sha256")?.to_string();

    let weights_path = dir.join(WEIGHTS);
    let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != digest {
        return Err(Error::format(
            &weights_path,
            format!("digest mismatch: manifest {digest}, file {actual}"),
        ));
    }
    let records = decode_tensors(&blob).map_err(|m| Error::format(&weights_path, m))?;
    let mut by_name: HashMap<String, Tensor<f32>> = HashMap::with_capacity(records.len());
    for (name, t) in records {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::format(&weights_path, format!("duplicate tensor {name}")));
        }
    }

    let (net, _) = build_network(&config)?;
    let mut weights = net.zeroed::<f32>().online;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::format(&weights_path, format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::format(
                &weights_path,
                format!("{name}: shape {:?}, expected {shape:?}", t.shape),
            ));
        }
        Ok(t)
    };
    for (p, slot) in net.params().iter().zip(weights.tensors.iter_mut()) {
        *slot = take(&p.name, &p.shape)?;
    }
    for (info, st) in net.sn_layers().iter().zip(weights.sn.iter_mut()) {
        st.u = take(&format!("{}.sn_u", info.name), &[info.rows])?.data;
        st.sigma = take(&format!("{}.sn_sigma", info.name), &[1])?.data[0];
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::format(&weights_path, format!("unexpected tensor {extra}")));
    }
    Ok(LoadedSnapshot {
        meta: SnapshotMeta {
            config,
            state,
            updates,
            sync_periods,
            rngs,
        },
        net,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_codec_round_trip() {
        let a = Tensor {
            shape: vec![2, 3],
            data: vec![1.0f32, -2.5, 0.0, f32::MIN_POSITIVE, 7.0, -0.0],
        };
        let b = Tensor {
            shape: vec![],
            data: vec![3.5f32],
        };
        let bytes = encode_tensors(&[("a".into(), &a), ("bias".into(), &b)]);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("bias".to_string(), b)]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let a = Tensor {
            shape: vec![4],
            data: vec![1.0f32; 4],
        };
        let bytes = encode_tensors(&[("a".into(), &a)]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rng_line_round_trip() {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(9);
        r.set_stream(5);
        let _: u64 = r.random();
        let line = rng_line("x", &r);
        let value = line.trim().split_once(" = ").unwrap().1;
        let mut back = parse_rng(value).unwrap();
        assert_eq!(back.random::<u64>(), r.random::<u64>());
    }
}
