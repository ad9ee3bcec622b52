//! Versioned binary checkpoints.
//!
//! Layout: magic, format version, kind string, vocab hash, named integer
//! metadata, named f64 arrays, then an FNV-1a checksum of everything before
//! it. Floats are written as little-endian bit patterns, so a save/load
//! round trip is exact and two identical training runs produce identical
//! files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gru::BiGruParams;
use crate::model::{ModelDims, PromptModel};
use crate::retrieval::SentenceEncoder;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LXPCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub vocab_hash: u64,
    pub meta: Vec<(String, i64)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, name: &str) -> Result<i64> {
        self.meta
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata field {name}")))
    }

    pub fn take_array(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter array {name}")))?;
        Ok(self.arrays.remove(idx).1)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, &ckpt.kind);
    buf.extend_from_slice(&ckpt.vocab_hash.to_le_bytes());
    buf.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (name, value) in &ckpt.meta {
        put_str(&mut buf, name);
        buf.extend_from_slice(&value.to_le_bytes());
    }
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.arrays {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in name".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupted file)".into()));
    }
    let mut cur = Cursor { bytes: payload, at: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let kind = cur.str()?;
    let vocab_hash = cur.u64()?;
    let n_meta = cur.u32()? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let name = cur.str()?;
        let value = cur.i64()?;
        meta.push((name, value));
    }
    let n_arrays = cur.u32()? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name = cur.str()?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint {
        kind,
        vocab_hash,
        meta,
        arrays,
    })
}

/// Exact serialized form; two equal checkpoints produce identical bytes.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    encode(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(ckpt)).map_err(|e| Error::io(path, e))
}

/// Load and verify. When `expected_vocab_hash` is given, a different stored
/// hash is rejected — parameters are meaningless under another vocabulary.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<u64>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let ckpt = decode(&bytes)?;
    if let Some(expected) = expected_vocab_hash {
        if ckpt.vocab_hash != expected {
            return Err(Error::Checkpoint(format!(
                "vocab hash mismatch: checkpoint {:#018x}, current vocabulary {:#018x}",
                ckpt.vocab_hash, expected
            )));
        }
    }
    Ok(ckpt)
}

pub fn retriever_to_checkpoint(encoder: &SentenceEncoder, vocab_hash: u64) -> Checkpoint {
    Checkpoint {
        kind: "retriever".into(),
        vocab_hash,
        meta: vec![
            ("dim".into(), encoder.dim() as i64),
            ("vocab_size".into(), encoder.embed.rows() as i64),
        ],
        arrays: vec![
            ("embed".into(), encoder.embed.clone()),
            ("proj".into(), encoder.proj.clone()),
        ],
    }
}

pub fn retriever_from_checkpoint(mut ckpt: Checkpoint) -> Result<SentenceEncoder> {
    if ckpt.kind != "retriever" {
        return Err(Error::Checkpoint(format!(
            "expected a retriever checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let embed = ckpt.take_array("embed")?;
    let proj = ckpt.take_array("proj")?;
    if proj.rows() != proj.cols() || embed.cols() != proj.rows() {
        return Err(Error::Checkpoint("inconsistent retriever shapes".into()));
    }
    Ok(SentenceEncoder { embed, proj })
}

pub fn model_to_checkpoint(model: &PromptModel) -> Checkpoint {
    Checkpoint {
        kind: "model".into(),
        vocab_hash: model.vocab_hash,
        meta: vec![
            ("d_h".into(), model.dims.d_h as i64),
            ("layers".into(), model.dims.layers as i64),
            ("heads".into(), model.dims.heads as i64),
            ("ff".into(), model.dims.ff as i64),
            ("cap".into(), model.dims.cap as i64),
            ("vocab_size".into(), model.vocab_size() as i64),
        ],
        arrays: model
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, t.clone()))
            .collect(),
    }
}

pub fn model_from_checkpoint(mut ckpt: Checkpoint) -> Result<PromptModel> {
    if ckpt.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "expected a model checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let dims = ModelDims {
        d_h: ckpt.meta_value("d_h")? as usize,
        layers: ckpt.meta_value("layers")? as usize,
        heads: ckpt.meta_value("heads")? as usize,
        ff: ckpt.meta_value("ff")? as usize,
        cap: ckpt.meta_value("cap")? as usize,
    };
    dims.validate()
        .map_err(|e| Error::Checkpoint(format!("bad stored dims: {e}")))?;
    let vocab_size = ckpt.meta_value("vocab_size")? as usize;
    let vocab_hash = ckpt.vocab_hash;

    // template model with the right shapes, then overwrite every array
    let mut model = template_model(dims, vocab_size, vocab_hash);
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let loaded = ckpt.take_array(&name)?;
        let mut params = model.named_params_mut();
        let (_, slot) = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .expect("template has every named param");
        if slot.shape() != loaded.shape() {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        **slot = loaded;
    }
    Ok(model)
}

fn template_model(dims: ModelDims, vocab_size: usize, vocab_hash: u64) -> PromptModel {
    use crate::model::EncoderLayer;
    let d = dims.d_h;
    let zero_heads = || (0..dims.heads).map(|_| Tensor::zeros(d, dims.head_dim())).collect();
    PromptModel {
        dims,
        embed: Tensor::zeros(vocab_size, d),
        soft: Tensor::zeros(2, d),
        layers: (0..dims.layers)
            .map(|_| EncoderLayer {
                wq: zero_heads(),
                wk: zero_heads(),
                wv: zero_heads(),
                wo: Tensor::zeros(d, d),
                bo: Tensor::zeros(1, d),
                ln1_g: Tensor::zeros(1, d),
                ln1_b: Tensor::zeros(1, d),
                w1: Tensor::zeros(d, dims.ff),
                b1: Tensor::zeros(1, dims.ff),
                w2: Tensor::zeros(dims.ff, d),
                b2: Tensor::zeros(1, d),
                ln2_g: Tensor::zeros(1, d),
                ln2_b: Tensor::zeros(1, d),
            })
            .collect(),
        lnf_g: Tensor::zeros(1, d),
        lnf_b: Tensor::zeros(1, d),
        gru: BiGruParams::zeros(d),
        pos: crate::model::sinusoidal_positions(dims.cap, d),
        vocab_hash,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Case, Dataset, TokenMode, Verbalizer};

    fn vocab() -> crate::corpus::Vocab {
        let ds = Dataset {
            cases: vec![Case {
                id: "c".into(),
                text: "abcdefgh".into(),
                charge: 0,
                articles: vec![],
            }],
            articles: vec![],
            verbalizer: Verbalizer::new(vec![(0, "a".into())], TokenMode::Char).unwrap(),
        };
        build_vocab(&ds, 1, TokenMode::Char)
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let vocab = vocab();
        let model = PromptModel::init(
            &vocab,
            ModelDims {
                d_h: 8,
                layers: 2,
                heads: 2,
                ff: 12,
                cap: 32,
            },
            1234,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model_to_checkpoint(&model), &path).unwrap();
        let loaded =
            model_from_checkpoint(load_checkpoint(&path, Some(vocab.hash())).unwrap()).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn retriever_round_trip_is_bit_exact() {
        let encoder = SentenceEncoder::init(9, 6, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("retriever.ckpt");
        save_checkpoint(&retriever_to_checkpoint(&encoder, 42), &path).unwrap();
        let loaded = retriever_from_checkpoint(load_checkpoint(&path, Some(42)).unwrap()).unwrap();
        assert_eq!(encoder, loaded);
    }

    #[test]
    fn vocab_hash_mismatch_rejected() {
        let encoder = SentenceEncoder::init(4, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        save_checkpoint(&retriever_to_checkpoint(&encoder, 1), &path).unwrap();
        let err = load_checkpoint(&path, Some(2)).unwrap_err();
        assert!(err.to_string().contains("vocab hash mismatch"));
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let encoder = SentenceEncoder::init(4, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        save_checkpoint(&retriever_to_checkpoint(&encoder, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let encoder = SentenceEncoder::init(4, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        save_checkpoint(&retriever_to_checkpoint(&encoder, 1), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let encoder = SentenceEncoder::init(4, 4, 1);
        let ckpt = retriever_to_checkpoint(&encoder, 1);
        let mut bytes = encode(&ckpt);
        // bump the stored version and fix the checksum
        bytes[8] = 99;
        let body_len = bytes.len() - 8;
        let checksum = fnv1a(&bytes[..body_len]);
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&checksum.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn wrong_kind_rejected() {
        let encoder = SentenceEncoder::init(4, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        save_checkpoint(&retriever_to_checkpoint(&encoder, 1), &path).unwrap();
        let ckpt = load_checkpoint(&path, None).unwrap();
        assert!(model_from_checkpoint(ckpt).is_err());
    }
}
