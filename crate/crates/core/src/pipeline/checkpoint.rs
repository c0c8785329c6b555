//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "STGA" | version u32 | config_len u32 | config JSON
//! | entries u32 | { name_len u32 | name | rank u32 | extents u32* }*
//! | payload_len u64 | payload (f32*) | crc32(payload) u32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::TrainConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::model::StegoModelParams;

pub const MAGIC: [u8; 4] = *b"STGA";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &StegoModelParams, config: &TrainConfig, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, config, &mut bytes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(StegoModelParams, TrainConfig)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

pub fn write_checkpoint(params: &StegoModelParams, config: &TrainConfig, out: &mut impl Write) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let json = serde_json::to_vec(config).map_err(|e| Error::Data(format!("cannot encode config: {e}")))?;
    let tensors = params.named_tensors();

    let mut header = Vec::new();
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_len(&mut header, json.len());
    header.extend_from_slice(&json);
    put_len(&mut header, tensors.len());
    let mut payload_len = 0u64;
    for (name, t) in &tensors {
        put_len(&mut header, name.len());
        header.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        put_len(&mut header, dims.len());
        for d in dims {
            put_len(&mut header, d);
        }
        payload_len += 4 * t.len() as u64;
    }
    header.extend_from_slice(&payload_len.to_le_bytes());
    out.write_all(&header).map_err(io)?;

    let mut payload = Vec::with_capacity(payload_len as usize);
    for (_, t) in &tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&payload).map_err(io)?;
    out.write_all(&crc32fast::hash(&payload).to_le_bytes()).map_err(io)?;
    Ok(())
}

fn put_len(buf: &mut Vec<u8>, n: usize) {
    buf.extend_from_slice(&(n as u32).to_le_bytes());
}

struct Header<R> {
    inner: R,
}

impl<R: Read> Header<R> {
    fn bytes(&mut self, n: usize, what: &'static str) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = Vec::new();
        (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|_| CheckpointError::TruncatedHeader(what))?;
        if buf.len() != n {
            return Err(CheckpointError::TruncatedHeader(what));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Header strings are bounded so a corrupt length cannot trigger a huge allocation.
const MAX_HEADER_FIELD: u32 = 1 << 20;

/// Parse a checkpoint and rebuild the parameters it describes.
///
/// The manifest's total size is checked against the declared payload length
/// before any payload byte is read.
pub fn read_checkpoint(input: impl Read) -> Result<(StegoModelParams, TrainConfig)> {
    let mut r = Header { inner: input };
    let magic: [u8; 4] = r.bytes(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let config_len = bounded(r.u32("config length")?, "config")?;
    let config: TrainConfig = serde_json::from_slice(&r.bytes(config_len, "config")?)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;

    let entries = r.u32("entry count")?;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    let mut manifest_bytes = 0u64;
    for _ in 0..entries {
        let len = bounded(r.u32("name length")?, "name")?;
        let name = String::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")).into());
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<_, _>>()?;
        manifest_bytes += 4 * dims.iter().map(|&d| d as u64).product::<u64>();
        manifest.push((name, dims));
    }
    let declared = r.u64("payload length")?;
    if declared != manifest_bytes {
        return Err(CheckpointError::ManifestMismatch {
            manifest_bytes,
            declared_bytes: declared,
        }
        .into());
    }

    let mut params = StegoModelParams::init(0, config.model_config());
    check_manifest(&params, &manifest)?;

    let mut rest = Vec::new();
    r.inner
        .read_to_end(&mut rest)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let expected = declared + 4;
    if rest.len() as u64 != expected {
        return Err(CheckpointError::PayloadLength {
            expected,
            found: rest.len() as u64,
        }
        .into());
    }
    let (payload, crc) = rest.split_at(declared as usize);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    params.for_each_mut(&mut |_, t| {
        for (dst, src) in t.data_mut().iter_mut().zip(&mut values) {
            *dst = src;
        }
    });
    Ok((params, config))
}

fn bounded(len: u32, what: &str) -> Result<usize, CheckpointError> {
    if len > MAX_HEADER_FIELD {
        return Err(CheckpointError::Malformed(format!("{what} length {len} is implausible")));
    }
    Ok(len as usize)
}

fn check_manifest(params: &StegoModelParams, manifest: &[(String, Vec<usize>)]) -> Result<(), CheckpointError> {
    let expected = params.named_tensors();
    if expected.len() != manifest.len() {
        return Err(CheckpointError::ParameterSet(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.len(),
            expected.len()
        )));
    }
    for ((name, t), (got_name, got_dims)) in expected.iter().zip(manifest) {
        if name != got_name {
            return Err(CheckpointError::ParameterSet(format!("expected {name}, found {got_name}")));
        }
        let dims = t.shape().dims().to_vec();
        if &dims != got_dims {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                checkpoint: got_dims.clone(),
                model: dims,
            });
        }
    }
    Ok(())
}
