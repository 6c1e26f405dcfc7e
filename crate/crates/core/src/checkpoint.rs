//! Binary checkpoint format.
//!
//! ```text
//! "AMDM" | version u32 | header_len u32 | header (UTF-8) | crc32(header) u32
//!        | payload (f32 LE, manifest order) | crc32(payload) u32
//! ```
//!
//! The header holds `key=value` lines for the architecture and free-form
//! metadata, then one `tensor <name> <shape> <byte offset>` line per tensor.
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Architecture, ScoreNet, TimeEmbedding};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMDM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: ScoreNet,
    /// Extra settings persisted alongside the weights (SDE, STFT, training step...).
    pub metadata: BTreeMap<String, String>,
}

fn arch_lines(a: &Architecture) -> Vec<(String, String)> {
    vec![
        ("num_mics".into(), a.num_mics.to_string()),
        ("levels".into(), a.levels.to_string()),
        ("base_width".into(), a.base_width.to_string()),
        ("attention".into(), if a.attention { "on" } else { "off" }.into()),
        ("attention_hidden".into(), a.attention_hidden.to_string()),
        ("shared_aux".into(), a.shared_aux.to_string()),
        ("temb_dim".into(), a.time_embedding.dim.to_string()),
        ("temb_scale".into(), format!("{:?}", a.time_embedding.scale)),
    ]
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn take<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| bad(format!("header lacks {key:?}")))
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = take(map, key)?;
    v.parse()
        .map_err(|_| bad(format!("header field {key}={v:?} is malformed")))
}

fn parse_arch(map: &BTreeMap<String, String>) -> Result<Architecture> {
    let attention = match take(map, "attention")? {
        "on" => true,
        "off" => false,
        v => return Err(bad(format!("header field attention={v:?} is malformed"))),
    };
    Ok(Architecture {
        num_mics: parse(map, "num_mics")?,
        levels: parse(map, "levels")?,
        base_width: parse(map, "base_width")?,
        attention,
        attention_hidden: parse(map, "attention_hidden")?,
        shared_aux: parse(map, "shared_aux")?,
        time_embedding: TimeEmbedding {
            dim: parse(map, "temb_dim")?,
            scale: parse(map, "temb_scale")?,
        },
    })
}

impl Checkpoint {
    pub fn new(net: ScoreNet) -> Self {
        Checkpoint {
            net,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in arch_lines(&self.net.arch) {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n', ' ']) || v.contains('\n') || k.starts_with("tensor") {
                return Err(bad(format!("metadata key {k:?} or its value cannot be stored")));
            }
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.net.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} {offset}\n", dims.join("x")));
            offset += 4 * t.len();
        }
        let mut out = Vec::with_capacity(20 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&crc32fast::hash(header.as_bytes()).to_le_bytes());
        let start = out.len();
        for t in self.net.params.tensors() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let u32_at = |pos: usize| -> Result<u32> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("file truncated"))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic, not a checkpoint file"));
        }
        let version = u32_at(4)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u32_at(8)? as usize;
        let header = bytes.get(12..12 + hlen).ok_or_else(|| bad("file truncated"))?;
        if crc32fast::hash(header) != u32_at(12 + hlen)? {
            return Err(bad("header checksum mismatch"));
        }
        let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;

        let mut fields = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut manifest = Vec::new();
        for line in header.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, shape, offset] = parts[..] else {
                    return Err(bad(format!("malformed tensor line {line:?}")));
                };
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("malformed shape in {line:?}")))?;
                let offset: usize = offset
                    .parse()
                    .map_err(|_| bad(format!("malformed offset in {line:?}")))?;
                manifest.push((name.to_string(), shape, offset));
            } else if let Some((k, v)) = line.split_once('=') {
                match k.strip_prefix("meta.") {
                    Some(m) => metadata.insert(m.to_string(), v.to_string()),
                    None => fields.insert(k.to_string(), v.to_string()),
                };
            } else {
                return Err(bad(format!("malformed header line {line:?}")));
            }
        }
        let arch = parse_arch(&fields)?;

        let payload_start = 16 + hlen;
        let total: usize = manifest.iter().map(|(_, s, _)| 4 * s.iter().product::<usize>()).sum();
        let payload = bytes
            .get(payload_start..payload_start + total)
            .ok_or_else(|| bad("payload truncated"))?;
        if crc32fast::hash(payload) != u32_at(payload_start + total)? {
            return Err(bad("payload checksum mismatch"));
        }
        if bytes.len() != payload_start + total + 4 {
            return Err(bad("trailing bytes after payload"));
        }
        let mut params = ParamSet::new();
        let mut expected_offset = 0;
        for (name, shape, offset) in manifest {
            if offset != expected_offset {
                return Err(bad(format!(
                    "tensor {name} at offset {offset}, expected {expected_offset}"
                )));
            }
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            params.insert(name, t)?;
            expected_offset += 4 * n;
        }
        let net = validate_layout(arch, params)?;
        Ok(Checkpoint { net, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored architecture equals `expected`.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        let stored = arch_lines(&ck.net.arch);
        let wanted = arch_lines(expected);
        let diffs: Vec<String> = stored
            .iter()
            .zip(&wanted)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{} is {} in checkpoint but {} requested", a.0, a.1, b.1))
            .collect();
        if !diffs.is_empty() {
            return Err(bad(format!("architecture mismatch: {}", diffs.join("; "))));
        }
        Ok(ck)
    }
}

/// Checks that `params` has exactly the tensors and shapes `arch` implies.
fn validate_layout(arch: Architecture, params: ParamSet) -> Result<ScoreNet> {
    let reference = ScoreNet::zeros(arch).map_err(|e| bad(format!("architecture: {e}")))?;
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, architecture needs {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(bad(format!("tensor {name} missing"))),
        }
    }
    if params.len() != reference.params.len() {
        let extra: Vec<&str> = params
            .names()
            .iter()
            .filter(|n| reference.params.get(n).is_err())
            .map(String::as_str)
            .collect();
        return Err(bad(format!("unexpected tensors {extra:?}")));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter values"));
    }
    // reorder to the canonical layout
    let mut ordered = ParamSet::new();
    for name in reference.params.names() {
        ordered.insert(name.clone(), params.get(name)?.clone())?;
    }
    Ok(ScoreNet {
        arch: reference.arch,
        params: ordered,
    })
}
