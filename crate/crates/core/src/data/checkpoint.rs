//! Binary model checkpoints.
//!
//! Layout:
//!
//! ```text
//! AMMSNN1
//! format_version=1
//! model.<field>=<value>          one line per model config field
//! run.<key>=<value>              free-form run settings, sorted by key
//! vocab.size=<n>
//! vocab.sha256=<hex digest of the vocabulary file>
//! tensor=<name> shape=<a,b,..> offset=<byte> count=<n>
//! ...
//! payload.bytes=<n>
//! end
//! <payload: little-endian f64 values, tensors in manifest order>
//! ```
//!
//! The vocabulary lives next to the checkpoint in `<path>.vocab`. Loading
//! checks its digest, so a checkpoint never runs against a different
//! vocabulary.

use crate::embedding::Vocabulary;
use crate::encoder::{format_branches, parse_branches, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MAGIC: &[u8] = b"AMMSNN1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    /// Training settings recorded alongside the weights.
    pub run: BTreeMap<String, String>,
}

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn vocab_bytes(vocab: &Vocabulary) -> Vec<u8> {
    let mut buf = Vec::new();
    vocab.write_to(&mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn model_fields(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    let e = &cfg.encoder;
    vec![
        ("vocab_size", cfg.vocab_size.to_string()),
        ("embed_dim", cfg.embed_dim.to_string()),
        ("seq_len", cfg.seq_len.to_string()),
        ("embed_init_range", cfg.embed_init_range.to_string()),
        ("variant", e.variant.to_string()),
        ("branches", format_branches(&e.branches)),
        ("width", e.width.to_string()),
        ("channels", e.channels.to_string()),
        ("layers", e.layers.to_string()),
        ("activation", e.activation.to_string()),
        ("attention", cfg.attention.to_string()),
    ]
}

/// Serializes the model. `vocab` must be the vocabulary the model was
/// built for.
pub fn encode_checkpoint(model: &Model, vocab: &Vocabulary, run: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut head = String::new();
    head.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    for (k, v) in model_fields(&model.config) {
        head.push_str(&format!("model.{k}={v}\n"));
    }
    for (k, v) in run {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("run setting {k:?} cannot be stored")));
        }
        head.push_str(&format!("run.{k}={v}\n"));
    }
    head.push_str(&format!("vocab.size={}\n", vocab.len()));
    head.push_str(&format!("vocab.sha256={}\n", sha256_hex(&vocab_bytes(vocab))));
    let mut payload = Vec::new();
    for (_, name, t) in model.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!(
            "tensor={name} shape={} offset={} count={}\n",
            shape.join(","),
            payload.len(),
            t.len()
        ));
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    head.push_str(&format!("payload.bytes={}\nend\n", payload.len()));
    let mut out = Vec::with_capacity(MAGIC.len() + head.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(head.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("invalid value {v:?} for {key}")))
}

fn parse_tensor_line(v: &str) -> Result<TensorEntry> {
    let mut parts = v.split(' ');
    let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("tensor entry without a name"))?;
    let mut field = |key: &str| -> Result<&str> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(key))
            .and_then(|p| p.strip_prefix('='))
            .ok_or_else(|| bad(format!("tensor {name}: missing {key}")))
    };
    let shape_s = field("shape")?;
    let offset_s = field("offset")?;
    let count_s = field("count")?;
    if parts.next().is_some() {
        return Err(bad(format!("tensor {name}: trailing fields")));
    }
    let shape = shape_s
        .split(',')
        .map(|d| parse_num::<usize>("shape", d))
        .collect::<Result<Vec<_>>>()?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape,
        offset: parse_num("offset", offset_s)?,
        count: parse_num("count", count_s)?,
    })
}

/// Parses checkpoint bytes against `vocab`. Nothing is returned unless the
/// whole file checks out.
pub fn decode_checkpoint(bytes: &[u8], vocab: Vocabulary) -> Result<Checkpoint> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad("not a checkpoint file (bad magic)"))?;
    // The manifest is ASCII text ending with an `end` line.
    let end = rest
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("manifest is not terminated"))?;
    let head = std::str::from_utf8(&rest[..end + 1]).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &rest[end + 5..];

    let mut version = None;
    let mut model: BTreeMap<String, String> = BTreeMap::new();
    let mut run = BTreeMap::new();
    let mut vocab_size = None;
    let mut vocab_digest = None;
    let mut tensors = Vec::new();
    let mut payload_bytes = None;
    for line in head.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
        if k == "format_version" {
            version = Some(parse_num::<u32>(k, v)?);
            if version != Some(FORMAT_VERSION) {
                return Err(bad(format!(
                    "unsupported format version {v} (this build reads {FORMAT_VERSION})"
                )));
            }
        } else if let Some(key) = k.strip_prefix("model.") {
            if model.insert(key.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate manifest key {k}")));
            }
        } else if let Some(key) = k.strip_prefix("run.") {
            run.insert(key.to_string(), v.to_string());
        } else if k == "vocab.size" {
            vocab_size = Some(parse_num::<usize>(k, v)?);
        } else if k == "vocab.sha256" {
            vocab_digest = Some(v.to_string());
        } else if k == "tensor" {
            tensors.push(parse_tensor_line(v)?);
        } else if k == "payload.bytes" {
            payload_bytes = Some(parse_num::<usize>(k, v)?);
        } else {
            return Err(bad(format!("unknown manifest key {k}")));
        }
    }
    if version.is_none() {
        return Err(bad("manifest lacks format_version"));
    }
    let payload_bytes = payload_bytes.ok_or_else(|| bad("manifest lacks payload.bytes"))?;
    if payload.len() != payload_bytes {
        return Err(bad(format!(
            "payload holds {} bytes, manifest declares {payload_bytes} (truncated or padded file)",
            payload.len()
        )));
    }

    let get = |key: &str| -> Result<&str> {
        model
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("manifest lacks model.{key}")))
    };
    let cfg = ModelConfig {
        vocab_size: parse_num("model.vocab_size", get("vocab_size")?)?,
        embed_dim: parse_num("model.embed_dim", get("embed_dim")?)?,
        seq_len: parse_num("model.seq_len", get("seq_len")?)?,
        embed_init_range: parse_num("model.embed_init_range", get("embed_init_range")?)?,
        encoder: EncoderConfig {
            variant: get("variant")?.parse().map_err(|e: Error| bad(e.to_string()))?,
            branches: parse_branches(get("branches")?).map_err(|e| bad(e.to_string()))?,
            width: parse_num("model.width", get("width")?)?,
            channels: parse_num("model.channels", get("channels")?)?,
            layers: parse_num("model.layers", get("layers")?)?,
            activation: get("activation")?.parse().map_err(|e: Error| bad(e.to_string()))?,
        },
        attention: parse_num("model.attention", get("attention")?)?,
    };
    if model.len() != model_fields(&cfg).len() {
        return Err(bad("manifest holds unknown model fields"));
    }

    let vocab_size = vocab_size.ok_or_else(|| bad("manifest lacks vocab.size"))?;
    let digest = vocab_digest.ok_or_else(|| bad("manifest lacks vocab.sha256"))?;
    if vocab_size != vocab.len() || vocab_size != cfg.vocab_size {
        return Err(bad(format!(
            "vocabulary size mismatch: manifest {vocab_size}, model {}, vocabulary file {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    if digest != sha256_hex(&vocab_bytes(&vocab)) {
        return Err(bad("vocabulary file does not match the checkpoint digest"));
    }

    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for t in &tensors {
        let product: usize = t.shape.iter().product();
        if product != t.count {
            return Err(bad(format!(
                "tensor {}: shape {:?} does not hold {} values",
                t.name, t.shape, t.count
            )));
        }
        if t.offset != expected_offset {
            return Err(bad(format!("tensor {}: unexpected offset {}", t.name, t.offset)));
        }
        let end = t.offset + 8 * t.count;
        let raw = payload
            .get(t.offset..end)
            .ok_or_else(|| bad(format!("tensor {} runs past the payload", t.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
        store.add(t.name.clone(), tensor).map_err(|e| bad(e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(bad("payload holds bytes not described by the manifest"));
    }
    let model = Model::from_params(cfg, store).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => bad(other.to_string()),
    })?;
    Ok(Checkpoint { model, vocab, run })
}

/// Writes the checkpoint and its vocabulary sidecar.
pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary, run: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode_checkpoint(model, vocab, run)?;
    let vpath = vocab_path(path);
    std::fs::write(&vpath, vocab_bytes(vocab)).map_err(|e| Error::io(&vpath, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let vpath = vocab_path(path);
    let vocab = Vocabulary::load(&vpath)?;
    decode_checkpoint(&bytes, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::parse_branches;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Model, Vocabulary) {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 3,
            seq_len: 4,
            embed_init_range: 0.1,
            encoder: EncoderConfig::msnn(parse_branches("1:2,3:2").unwrap()),
            attention: true,
        };
        (Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap(), vocab)
    }

    #[test]
    fn round_trip_in_memory() {
        let (m, v) = sample();
        let run = BTreeMap::from([("seed".to_string(), "7".to_string())]);
        let bytes = encode_checkpoint(&m, &v, &run).unwrap();
        let ck = decode_checkpoint(&bytes, v.clone()).unwrap();
        assert_eq!(ck.model.config, m.config);
        assert_eq!(ck.run, run);
        for ((_, n1, t1), (_, n2, t2)) in m.params.iter().zip(ck.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn manifest_lists_each_tensor() {
        let (m, v) = sample();
        let bytes = encode_checkpoint(&m, &v, &BTreeMap::new()).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let names: Vec<&str> = text
            .lines()
            .filter_map(|l| l.strip_prefix("tensor="))
            .map(|l| l.split(' ').next().unwrap())
            .collect();
        assert_eq!(
            names,
            vec![
                "embedding.W",
                "encoder.branch_k1.filters",
                "encoder.branch_k1.bias",
                "encoder.branch_k3.filters",
                "encoder.branch_k3.bias",
                "attention.U"
            ]
        );
    }

    #[test]
    fn rejects_damage() {
        let (m, v) = sample();
        let bytes = encode_checkpoint(&m, &v, &BTreeMap::new()).unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode_checkpoint(&wrong_magic, v.clone()).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], v.clone()).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, v.clone()).is_err());
        let text = String::from_utf8_lossy(&bytes).replacen("format_version=1", "format_version=2", 1);
        let err = decode_checkpoint(text.as_bytes(), v.clone()).unwrap_err();
        assert!(err.to_string().contains("version"));
        let other = Vocabulary::from_tokens(["a", "b", "d"]).unwrap();
        assert!(decode_checkpoint(&bytes, other).is_err());
    }
}
