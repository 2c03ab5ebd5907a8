//! Versioned model files.
//!
//! Layout: magic `BDTC`, format version (u32 LE), a key=value config
//! block, the vocabulary word/relation lists, every named parameter
//! tensor as `(name, shape, little-endian f64 data)`, and a trailing
//! SHA-256 checksum of everything before it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::bidtree::WeightSharing;
use crate::corpus::Vocabulary;
use crate::pipeline::{allocate_model, Ablation, Model, ModelConfig};

const MAGIC: &[u8; 4] = b"BDTC";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch (file corrupted or truncated)")]
    ChecksumMismatch,
    #[error("model file truncated")]
    Truncated,
    #[error("malformed model file: {0}")]
    Malformed(String),
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_string_list(out: &mut Vec<u8>, items: &[String]) {
    out.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for item in items {
        put_bytes(out, item.as_bytes());
    }
}

fn config_text(c: &ModelConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("dim={}\n", c.dim));
    s.push_str(&format!("variant={}\n", c.variant.index()));
    s.push_str(&format!("ablation={}\n", c.ablation.as_str()));
    s.push_str(&format!(
        "use_relation_terms={}\n",
        u8::from(c.use_relation_terms)
    ));
    s.push_str(&format!("dropout={}\n", c.dropout));
    s.push_str(&format!("l2={}\n", c.l2));
    s.push_str(&format!("lr={}\n", c.lr));
    s.push_str(&format!("batch_size={}\n", c.batch_size));
    s.push_str(&format!("clip_norm={}\n", c.clip_norm));
    s.push_str(&format!("patience={}\n", c.patience));
    s.push_str(&format!("max_epochs={}\n", c.max_epochs));
    s.push_str(&format!("seed={}\n", c.seed));
    s.push_str(&format!("max_sentence_len={}\n", c.max_sentence_len));
    s
}

fn parse_config(text: &str) -> Result<ModelConfig, LoadError> {
    let mut map = HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LoadError::Malformed(format!("bad config line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    fn get<T: std::str::FromStr>(map: &HashMap<String, String>, k: &str) -> Result<T, LoadError> {
        map.get(k)
            .ok_or_else(|| LoadError::Malformed(format!("missing config key {k:?}")))?
            .parse()
            .map_err(|_| LoadError::Malformed(format!("bad value for config key {k:?}")))
    }
    let variant_idx: u8 = get(&map, "variant")?;
    let variant = WeightSharing::from_index(variant_idx)
        .ok_or_else(|| LoadError::Malformed(format!("bad variant {variant_idx}")))?;
    let ablation_str: String = get(&map, "ablation")?;
    let ablation = Ablation::parse(&ablation_str)
        .ok_or_else(|| LoadError::Malformed(format!("bad ablation {ablation_str:?}")))?;
    let use_rel: u8 = get(&map, "use_relation_terms")?;
    Ok(ModelConfig {
        dim: get(&map, "dim")?,
        variant,
        ablation,
        use_relation_terms: use_rel != 0,
        dropout: get(&map, "dropout")?,
        l2: get(&map, "l2")?,
        lr: get(&map, "lr")?,
        batch_size: get(&map, "batch_size")?,
        clip_norm: get(&map, "clip_norm")?,
        patience: get(&map, "patience")?,
        max_epochs: get(&map, "max_epochs")?,
        seed: get(&map, "seed")?,
        max_sentence_len: get(&map, "max_sentence_len")?,
    })
}

fn model_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, config_text(&model.config).as_bytes());
    put_string_list(&mut out, model.vocab.words());
    put_string_list(&mut out, model.vocab.fwd_relations());
    put_string_list(&mut out, model.vocab.inv_relations());

    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, entry) in model.store.iter() {
        put_bytes(&mut out, entry.name.as_bytes());
        out.extend_from_slice(&(entry.tensor.shape().len() as u32).to_le_bytes());
        for &dim in entry.tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in entry.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Write the model to `path`. The same model always produces the same
/// bytes.
pub fn save_model(model: &Model, path: &Path) -> std::io::Result<()> {
    fs::write(path, model_bytes(model))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        if self.pos + n > self.buf.len() {
            return Err(LoadError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], LoadError> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, LoadError> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| LoadError::Malformed("non-UTF-8 string".into()))
    }

    fn string_list(&mut self) -> Result<Vec<String>, LoadError> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.string()).collect()
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Read a model back. The file's config wins over whatever the caller
/// expected; corruption anywhere fails the checksum.
pub fn load_model(path: &Path) -> Result<Model, LoadError> {
    let raw = fs::read(path)?;
    if raw.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(LoadError::Truncated);
    }
    let (body, checksum) = raw.split_at(raw.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(LoadError::ChecksumMismatch);
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(LoadError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(LoadError::UnsupportedVersion(version));
    }
    let config = parse_config(&cur.string()?)?;
    let words = cur.string_list()?;
    let fwd = cur.string_list()?;
    let inv = cur.string_list()?;
    let vocab = Vocabulary::from_lists(words, fwd, inv);

    let mut model = allocate_model(config, vocab);
    let by_name: HashMap<String, crate::autodiff::ParamId> = model
        .store
        .iter()
        .map(|(id, e)| (e.name.clone(), id))
        .collect();

    let count = cur.u64()? as usize;
    if count != model.store.len() {
        return Err(LoadError::Malformed(format!(
            "file has {count} tensors, architecture expects {}",
            model.store.len()
        )));
    }
    let mut filled = vec![false; count];
    for _ in 0..count {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let bytes: [u8; 8] = cur.take(8)?.try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        let id = *by_name
            .get(&name)
            .ok_or_else(|| LoadError::Malformed(format!("unexpected tensor {name:?}")))?;
        if model.store.tensor(id).shape() != shape.as_slice() {
            return Err(LoadError::Malformed(format!(
                "tensor {name:?} has shape {shape:?}, architecture expects {:?}",
                model.store.tensor(id).shape()
            )));
        }
        if std::mem::replace(&mut filled[id.index()], true) {
            return Err(LoadError::Malformed(format!("duplicate tensor {name:?}")));
        }
        *model.store.tensor_mut(id) = Tensor::from_shape_data(shape, data);
    }
    if !cur.done() {
        return Err(LoadError::Malformed("trailing bytes after tensors".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, random_embeddings, Vocabulary};
    use crate::pipeline::build_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let corpus =
            parse_corpus("1\ta\t2\tdet\tO\n2\tb\t0\troot\tB-AP\n3\tc\t2\tobj\tO\n\n".as_bytes())
                .unwrap();
        let vocab = Vocabulary::build(&corpus);
        let config = ModelConfig {
            dim: 4,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = random_embeddings(&vocab, 4, &mut rng);
        build_model(config, vocab, &table).unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, m.config);
        assert_eq!(loaded.vocab, m.vocab);
        assert_eq!(loaded.store.len(), m.store.len());
        for (id, e) in m.store.iter() {
            assert_eq!(*loaded.store.tensor(id), e.tensor, "{}", e.name);
        }
    }

    #[test]
    fn save_is_deterministic() {
        let m = model();
        assert_eq!(model_bytes(&m), model_bytes(&m));
    }

    #[test]
    fn tampered_byte_fails_checksum() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&m, &path).unwrap();
        let mut raw = fs::read(&path).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0xff;
        fs::write(&path, &raw).unwrap();
        assert!(matches!(
            load_model(&path).unwrap_err(),
            LoadError::ChecksumMismatch
        ));
    }

    #[test]
    fn truncated_and_garbage_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        fs::write(&path, b"short").unwrap();
        assert!(matches!(load_model(&path).unwrap_err(), LoadError::Truncated));

        // valid checksum over a non-model body still fails on magic
        let mut body = b"XXXXYYYY padding padding".to_vec();
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        fs::write(&path, &body).unwrap();
        assert!(matches!(load_model(&path).unwrap_err(), LoadError::BadMagic));
    }
}
