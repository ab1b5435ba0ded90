//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `LOGSDCKP`, `u32` version, `u64` header
//! length followed by a UTF-8 `key=value` header, `u64` tensor count, then
//! per tensor: `u32` name length, name, `u32` rank, `u64` dims, `f64` data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::embedder::{EmbeddingSource, EmbeddingTable};
use crate::error::{Error, Result};
use crate::masking::{FrequencyTable, KappaMode, MaskConfig, MaskScheme};
use crate::model::{ModelConfig, ModelState, Network, Variant};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"LOGSDCKP";
const VERSION: u32 = 1;

fn scheme_name(s: MaskScheme) -> &'static str {
    match s {
        MaskScheme::None => "none",
        MaskScheme::Random => "random",
        MaskScheme::Frequency => "frequency",
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn header_of(state: &ModelState) -> Vec<(String, String)> {
    let cfg = state.network.config();
    let mut h: Vec<(String, String)> = vec![
        ("variant".into(), cfg.variant.code()),
        ("embed_dim".into(), cfg.embed_dim.to_string()),
        ("hidden".into(), cfg.hidden.to_string()),
        ("kernels".into(), join(&cfg.kernels)),
        ("alpha".into(), format!("{:e}", cfg.alpha)),
        ("init_seed".into(), state.network.params().init_seed().to_string()),
        ("mask_scheme".into(), scheme_name(state.mask.scheme).into()),
        ("kappa_set".into(), join(&state.mask.kappa_set)),
        (
            "kappa_mode".into(),
            match state.mask.kappa_mode {
                KappaMode::Sampled => "sampled".into(),
                KappaMode::Fixed(k) => format!("fixed:{k:e}"),
            },
        ),
        ("mask_seed".into(), state.mask.seed.to_string()),
        ("l_max".into(), state.l_max.to_string()),
        ("epochs_trained".into(), state.epochs_trained.to_string()),
        ("token_seed".into(), state.embedding.token_seed().to_string()),
        (
            "embedding_source".into(),
            match state.embedding.source() {
                EmbeddingSource::Hashed => "hashed".into(),
                EmbeddingSource::ExternalFile => "external_file".into(),
            },
        ),
    ];
    h.extend(state.snapshot.iter().map(|(k, v)| (format!("snapshot.{k}"), v.clone())));
    h
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let header: String = header_of(state).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header.as_bytes());

    let params = state.network.params();
    let emb = state.embedding.rows();
    let freq = state.frequencies.counts();
    out.extend(((params.len() + 3) as u64).to_le_bytes());
    for (name, t) in params.iter() {
        put_tensor(&mut out, &format!("param.{name}"), t);
    }
    let center = Tensor::from_vec(&[state.center.len()], state.center.clone()).expect("1-D");
    put_tensor(&mut out, "center", &center);
    let flat: Vec<f64> = emb.iter().flatten().copied().collect();
    let table = Tensor::from_vec(&[emb.len(), state.embedding.dim()], flat).expect("rectangular");
    put_tensor(&mut out, "embedding", &table);
    let pairs: Vec<f64> = freq.iter().flat_map(|(&id, &c)| [id as f64, c as f64]).collect();
    let freq_t = Tensor::from_vec(&[freq.len(), 2], pairs).expect("pairs");
    put_tensor(&mut out, "train_freq", &freq_t);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::data("checkpoint is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::data("checkpoint length overflows"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::data("tensor name is not UTF-8"))?
            .to_owned();
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::data("tensor size overflows"))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::data("tensor size overflows"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.parse().map_err(|_| Error::data(format!("checkpoint header {key}: bad value {v:?}"))))
        .collect()
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.len()?;
    let header_text = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::data("checkpoint header is not UTF-8"))?;
    let mut header = BTreeMap::new();
    let mut snapshot = Vec::new();
    for line in header_text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::data(format!("bad checkpoint header line {line:?}")))?;
        match k.strip_prefix("snapshot.") {
            Some(key) => snapshot.push((key.to_owned(), v.to_owned())),
            None => {
                header.insert(k.to_owned(), v.to_owned());
            }
        }
    }
    let get = |k: &str| header.get(k).map(String::as_str).ok_or_else(|| Error::data(format!("checkpoint header lacks {k}")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::data(format!("checkpoint header {k} is not a number"))) };

    let config = ModelConfig {
        embed_dim: num("embed_dim")? as usize,
        hidden: num("hidden")? as usize,
        kernels: parse_list(get("kernels")?, "kernels")?,
        alpha: get("alpha")?.parse().map_err(|_| Error::data("checkpoint alpha is not a number"))?,
        variant: Variant::parse(get("variant")?).map_err(|e| Error::data(e.to_string()))?,
    };
    let kappa_mode = match get("kappa_mode")? {
        "sampled" => KappaMode::Sampled,
        other => {
            let v = other.strip_prefix("fixed:").and_then(|v| v.parse().ok());
            KappaMode::Fixed(v.ok_or_else(|| Error::data(format!("bad kappa_mode {other:?}")))?)
        }
    };
    let mask = MaskConfig {
        scheme: config.variant.masking,
        kappa_set: parse_list(get("kappa_set")?, "kappa_set")?,
        kappa_mode,
        seed: num("mask_seed")?,
    };
    let source = match get("embedding_source")? {
        "hashed" => EmbeddingSource::Hashed,
        "external_file" => EmbeddingSource::ExternalFile,
        other => return Err(Error::data(format!("unknown embedding source {other:?}"))),
    };

    let count = r.len()?;
    let mut params = ParamSet::new(num("init_seed")?);
    let mut center = None;
    let mut embedding = None;
    let mut freq = None;
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        match name.as_str() {
            "center" => center = Some(t.into_data()),
            "embedding" => embedding = Some(t),
            "train_freq" => freq = Some(t),
            other => {
                let pname = other.strip_prefix("param.").ok_or_else(|| Error::data(format!("unknown tensor {other:?}")))?;
                params.push(pname, t)?;
            }
        }
    }
    if r.pos != buf.len() {
        return Err(Error::data("trailing bytes after checkpoint"));
    }
    let network = Network::from_params(config, params)?;
    let center = center.ok_or_else(|| Error::data("checkpoint lacks center"))?;
    if center.len() != network.config().repr_dim() || center.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("checkpoint center is malformed"));
    }
    let emb = embedding.ok_or_else(|| Error::data("checkpoint lacks embedding table"))?;
    if emb.shape().len() != 2 {
        return Err(Error::data("embedding tensor must be 2-D"));
    }
    let rows: Vec<Vec<f64>> = emb.data().chunks(emb.shape()[1].max(1)).map(<[f64]>::to_vec).collect();
    let embedding = EmbeddingTable::from_rows(rows, num("token_seed")?, source)?;
    let freq = freq.ok_or_else(|| Error::data("checkpoint lacks frequency table"))?;
    let counts = freq.data().chunks(2).map(|p| (p[0] as u32, p[1] as u64)).collect();

    Ok(ModelState {
        network,
        center,
        frequencies: FrequencyTable::from_counts(counts),
        embedding,
        mask,
        l_max: num("l_max")? as usize,
        epochs_trained: num("epochs_trained")? as usize,
        snapshot,
    })
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use crate::model::sequence_scores;
    use crate::sequencer::EventSequence;
    use crate::trainer::{train, TrainConfig};

    #[test]
    fn roundtrip_preserves_state_and_scores() {
        let seqs: Vec<EventSequence> = (0..12)
            .map(|i| EventSequence::new(format!("s{i}"), vec![1, 2, (i % 3) as u32 + 3], Label::Normal))
            .collect();
        let table = EmbeddingTable::from_templates(["a b", "c", "d", "e", "f"], 4, 2, None);
        let model = ModelConfig {
            embed_dim: 4,
            hidden: 2,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let state = train(&seqs, table, model, MaskConfig::default(), &cfg).unwrap().state;
        let bytes = to_bytes(&state);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(sequence_scores(&back, &seqs).unwrap(), sequence_scores(&state, &seqs).unwrap());

        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
    }
}
