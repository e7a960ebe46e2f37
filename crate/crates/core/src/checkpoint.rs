//! Binary tensor files and checkpoint directories.
//!
//! A tensor file is the magic `FPTW`, a little-endian `u32` version, then
//! entries until end of file: name length `u32`, UTF-8 name, rank `u32`,
//! `rank` dims as `u32`, and the row-major `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, SoftPrompt};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FPTW";
pub const VERSION: u32 = 1;
const PROMPT_NAME: &str = "prompt";

pub fn encode_tensors<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4, &name)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_tensors<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_tensors(entries))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensors(&bytes)
}

pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<()> {
    let named = weights.named();
    write_tensors(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
}

pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<ModelWeights> {
    ModelWeights::from_named(config, read_tensors(path)?)
}

pub fn save_prompt(path: &Path, prompt: &SoftPrompt) -> Result<()> {
    write_tensors(path, [(PROMPT_NAME, prompt.matrix())])
}

pub fn load_prompt(path: &Path) -> Result<SoftPrompt> {
    let mut entries = read_tensors(path)?;
    match entries.as_slice() {
        [(name, _)] if name == PROMPT_NAME => SoftPrompt::new(entries.remove(0).1),
        _ => Err(Error::Checkpoint(format!("{} does not hold a single prompt tensor", path.display()))),
    }
}

pub fn save_config(path: &Path, config: &ModelConfig) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(config)? + "\n")?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    config.validate()?;
    Ok(config)
}

/// Writes `config.json`, `weights.bin` and, when given, `prompt.bin`.
pub fn save_checkpoint(dir: &Path, weights: &ModelWeights, prompt: Option<&SoftPrompt>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_config(&dir.join("config.json"), &weights.config)?;
    save_weights(&dir.join("weights.bin"), weights)?;
    if let Some(p) = prompt {
        save_prompt(&dir.join("prompt.bin"), p)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelWeights, Option<SoftPrompt>)> {
    let config = load_config(&dir.join("config.json"))?;
    let weights = load_weights(&dir.join("weights.bin"), &config)?;
    let prompt_path = dir.join("prompt.bin");
    let prompt = if prompt_path.exists() {
        let p = load_prompt(&prompt_path)?;
        p.check(&config)?;
        Some(p)
    } else {
        None
    };
    Ok((weights, prompt))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::rng::seeded_rng;

    #[test]
    fn layout_is_byte_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_tensors([("ab", &t)]);
        let mut want = b"FPTW".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(2u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back[0].0, "ab");
        assert!(back[0].1.bit_eq(&t));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let bytes = encode_tensors([("x", &t)]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensors(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(decode_tensors(&bad).is_err());
        assert!(decode_tensors(b"FPTW\x01\x00\x00\x00").unwrap().is_empty());
    }

    #[test]
    fn checkpoint_directory_round_trip() {
        let cfg = ModelConfig::tiny();
        let rng = seeded_rng(1, "ckpt");
        let w = init_weights(&cfg, &rng).unwrap();
        let p = SoftPrompt::random(&cfg, &mut rng.child("p"), 0.5);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &w, Some(&p)).unwrap();
        let (w2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(w2.digest(), w.digest());
        assert_eq!(p2.unwrap(), p);
        let d1 = file_digest(&dir.path().join("weights.bin")).unwrap();
        save_weights(&dir.path().join("again.bin"), &w2).unwrap();
        assert_eq!(file_digest(&dir.path().join("again.bin")).unwrap(), d1);
        assert!(load_prompt(&dir.path().join("weights.bin")).is_err());
    }
}
