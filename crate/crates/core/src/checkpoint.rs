//! The `LNCR` binary container.
//!
//! Layout: magic `LNCR`, a `u32` version, a `u32` length followed by that
//! many bytes of UTF-8 JSON metadata, then every tensor as row-major `f32`
//! values and every string list as `u32`-length-prefixed UTF-8 entries, all
//! little-endian and in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{DualEncoder, EncoderConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"LNCR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StringEntry {
    name: String,
    count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: Value,
    tensors: Vec<TensorEntry>,
    strings: Vec<StringEntry>,
}

/// Decoded contents of one checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub tensors: Vec<(String, Tensor)>,
    pub strings: Vec<(String, Vec<String>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, config: Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            tensors: Vec::new(),
            strings: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn string_list(&self, name: &str) -> Result<&[String]> {
        self.strings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing string list `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            strings: self
                .strings
                .iter()
                .map(|(name, s)| StringEntry {
                    name: name.clone(),
                    count: s.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out =
            Vec::with_capacity(12 + json.len() + 4 * self.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for (_, list) in &self.strings {
            for s in list {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an LNCR file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("corrupt metadata: {e}")))?;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for entry in meta.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
            tensors.push((entry.name, t));
        }
        let mut strings = Vec::with_capacity(meta.strings.len());
        for entry in meta.strings {
            let mut list = Vec::with_capacity(entry.count.min(1 << 20));
            for _ in 0..entry.count {
                let n = r.u32()? as usize;
                let s = std::str::from_utf8(r.take(n)?)
                    .map_err(|_| Error::Checkpoint(format!("invalid UTF-8 in `{}`", entry.name)))?;
                list.push(s.to_string());
            }
            strings.push((entry.name, list));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind: meta.kind,
            config: meta.config,
            tensors,
            strings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file: wanted {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Copies named tensors from `c` into `params`, checking every shape.
pub fn fill_params<'a>(c: &Container, params: impl IntoIterator<Item = &'a mut crate::encoder::Param>) -> Result<()> {
    for p in params {
        let t = c.tensor(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, config implies {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

const ENCODER_KIND: &str = "dual-encoder";

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    encoder: EncoderConfig,
    frozen: bool,
}

/// Writes both towers, the temperature and the vocabulary.
pub fn save_encoder(path: &Path, model: &DualEncoder, vocab: &Vocabulary) -> Result<()> {
    encoder_container(model, vocab)?.save(path)
}

pub fn encoder_container(model: &DualEncoder, vocab: &Vocabulary) -> Result<Container> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, encoder expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let meta = EncoderMeta {
        encoder: model.config.clone(),
        frozen: model.is_frozen(),
    };
    let mut c = Container::new(ENCODER_KIND, serde_json::to_value(meta)?);
    c.tensors = model
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    c.strings.push((
        "vocab".into(),
        vocab.to_file_string().lines().map(str::to_string).collect(),
    ));
    Ok(c)
}

pub fn load_encoder(path: &Path) -> Result<(DualEncoder, Vocabulary)> {
    encoder_from_container(&Container::load(path)?)
}

pub fn encoder_from_container(c: &Container) -> Result<(DualEncoder, Vocabulary)> {
    c.expect_kind(ENCODER_KIND)?;
    let meta: EncoderMeta =
        serde_json::from_value(c.config.clone()).map_err(|e| Error::Checkpoint(format!("bad encoder config: {e}")))?;
    let mut model = DualEncoder::init(meta.encoder, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fill_params(c, model.params_mut())?;
    if meta.frozen {
        model.freeze();
    }
    let mut words = String::new();
    for w in c.string_list("vocab")? {
        words.push_str(w);
        words.push('\n');
    }
    let vocab = Vocabulary::parse(&words).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint("stored vocabulary does not match config".into()));
    }
    Ok((model, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        c.tensors
            .push(("w".into(), Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 3.0]).unwrap()));
        c.strings.push(("ids".into(), vec!["x".into(), "yz".into()]));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LNCR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Container::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn encoder_round_trip() {
        let vocab = Vocabulary::new(["gray", "cat"]);
        let mut model = DualEncoder::init(EncoderConfig::desk(vocab.len()), 3).unwrap();
        model.quantize();
        model.freeze();
        let c = encoder_container(&model, &vocab).unwrap();
        let (back, v2) = encoder_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(v2, vocab);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let vocab = Vocabulary::new(["gray"]);
        let model = DualEncoder::init(EncoderConfig::desk(vocab.len()), 0).unwrap();
        let mut c = encoder_container(&model, &vocab).unwrap();
        c.tensors[0].1 = Tensor::zeros(&[2, 2]);
        let err = encoder_from_container(&c).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }
}
