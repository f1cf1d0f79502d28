//! Named-tensor checkpoints: a text header carrying a configuration and
//! its SHA-256 digest, then a flat little-endian binary body.

use std::io::{BufRead, BufReader, Read, Write};

use sha2::{Digest, Sha256};

use super::{AutodiffError, ParamSet, Tensor};

const MAGIC: &str = "specsep-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Serialized model configuration (single-line JSON).
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params(config: String, params: &ParamSet<f32>) -> Self {
        let tensors = params.named_values().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { config, tensors }
    }

    pub fn digest(&self) -> String {
        config_digest(&self.config)
    }
}

/// Hex SHA-256 of a configuration string.
pub fn config_digest(config: &str) -> String {
    Sha256::digest(config.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

fn u32_of(n: usize) -> Result<[u8; 4], AutodiffError> {
    u32::try_from(n).map(u32::to_le_bytes).map_err(|_| bad(format!("{n} exceeds u32")))
}

pub fn write_checkpoint(ck: &Checkpoint, mut w: impl Write) -> Result<(), AutodiffError> {
    if ck.config.contains('\n') {
        return Err(bad("configuration must be a single line"));
    }
    write!(w, "{MAGIC}\ndigest {}\n{}\n\n", ck.digest(), ck.config)?;
    w.write_all(&u32_of(ck.tensors.len())?)?;
    for (name, t) in &ck.tensors {
        w.write_all(&u32_of(name.len())?)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(t.rank())?)?;
        for &d in t.shape() {
            w.write_all(&u32_of(d)?)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize, AutodiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated body: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Parses a checkpoint and verifies the header digest against its config.
pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint, AutodiffError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<_>| -> Result<String, AutodiffError> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("missing checkpoint header"));
    }
    let digest_line = next_line(&mut r)?;
    let digest = digest_line.strip_prefix("digest ").ok_or_else(|| bad("missing digest line"))?.to_string();
    let config = next_line(&mut r)?;
    if !next_line(&mut r)?.is_empty() {
        return Err(bad("header not terminated by a blank line"));
    }
    if config_digest(&config) != digest {
        return Err(bad("config digest does not match header"));
    }
    let count = read_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)?;
        let shape = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(|e| bad(format!("truncated data of {name}: {e}")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(Checkpoint { config, tensors })
}
