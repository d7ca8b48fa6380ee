//! Weights file format.
//!
//! Layout: magic `MAOW1\n`, an ASCII decimal byte length of the text header
//! followed by `\n`, the header itself (one `name dtype d0xd1` line per
//! tensor), then raw little-endian tensor blobs in header order. The encoder
//! architecture rides along as a synthetic `meta` tensor so a file is
//! self-describing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Tensor;

use super::{EncoderConfig, WeightStore};

const MAGIC: &[u8] = b"MAOW1\n";
const META_NAME: &str = "meta";
const META_FORMAT: f64 = 1.0;

fn meta_tensor(config: &EncoderConfig) -> Tensor {
    let values = vec![
        META_FORMAT,
        config.image_side as f64,
        config.patch_side as f64,
        config.layers as f64,
        config.heads as f64,
        config.embed_dim as f64,
        config.mlp_ratio,
        config.channels as f64,
        (config.seed & 0xffff_ffff) as f64,
        (config.seed >> 32) as f64,
    ];
    Tensor::from_vec(&[values.len()], values).expect("fixed length")
}

fn config_from_meta(t: &Tensor) -> Result<EncoderConfig> {
    let d = t.data();
    if d.len() != 10 || d[0] != META_FORMAT {
        return Err(Error::WeightsFormat("unsupported meta tensor".into()));
    }
    Ok(EncoderConfig {
        image_side: d[1] as usize,
        patch_side: d[2] as usize,
        layers: d[3] as usize,
        heads: d[4] as usize,
        embed_dim: d[5] as usize,
        mlp_ratio: d[6],
        channels: d[7] as usize,
        seed: (d[8] as u64) | ((d[9] as u64) << 32),
    })
}

/// Writes the store to `path`; `load_weights` restores it byte-for-byte.
pub fn persist_weights(store: &WeightStore, path: &Path) -> Result<()> {
    let mut all: BTreeMap<&str, &Tensor> = store
        .tensors()
        .iter()
        .map(|(k, v)| (k.as_str(), v))
        .collect();
    let meta = meta_tensor(store.config());
    all.insert(META_NAME, &meta);

    let mut header = String::new();
    for (name, t) in &all {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{} f64 {}\n", name, dims.join("x")));
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(format!("{}\n", header.len()).as_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, t) in &all {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn expected_shape(name: &str, cfg: &EncoderConfig) -> Option<Vec<usize>> {
    let d = cfg.embed_dim;
    let m = cfg.mlp_dim();
    match name {
        "cls" | "patch_proj.b" | "final_ln.g" | "final_ln.b" => Some(vec![d]),
        "pos" => Some(vec![cfg.n_tokens(), d]),
        "patch_proj.w" => Some(vec![cfg.patch_dim(), d]),
        _ => {
            let rest = name.strip_prefix("layer")?;
            let (idx, field) = rest.split_once('.')?;
            let l: usize = idx.parse().ok()?;
            if l >= cfg.layers {
                return None;
            }
            match field {
                "ln1.g" | "ln1.b" | "ln2.g" | "ln2.b" | "attn.bq" | "attn.bk" | "attn.bv"
                | "attn.bo" | "mlp.b2" => Some(vec![d]),
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => Some(vec![d, d]),
                "mlp.w1" => Some(vec![d, m]),
                "mlp.b1" => Some(vec![m]),
                "mlp.w2" => Some(vec![m, d]),
                _ => None,
            }
        }
    }
}

fn validate_tensor_shape(name: &str, t: &Tensor, cfg: &EncoderConfig) -> Result<()> {
    let d = cfg.embed_dim;
    if let Some(base) = name.strip_suffix(".lora_a") {
        if expected_shape(base, cfg) != Some(vec![d, d]) {
            return Err(Error::WeightsFormat(format!("{name}: unexpected adapter")));
        }
        if t.shape().len() != 2 || t.shape()[1] != d || t.shape()[0] == 0 {
            return Err(Error::WeightsFormat(format!(
                "{name}: bad adapter shape {:?}",
                t.shape()
            )));
        }
        return Ok(());
    }
    if let Some(base) = name.strip_suffix(".lora_b") {
        if expected_shape(base, cfg) != Some(vec![d, d]) {
            return Err(Error::WeightsFormat(format!("{name}: unexpected adapter")));
        }
        if t.shape().len() != 2 || t.shape()[0] != d || t.shape()[1] == 0 {
            return Err(Error::WeightsFormat(format!(
                "{name}: bad adapter shape {:?}",
                t.shape()
            )));
        }
        return Ok(());
    }
    match expected_shape(name, cfg) {
        Some(shape) if shape == t.shape() => Ok(()),
        Some(shape) => Err(Error::WeightsFormat(format!(
            "{name}: shape {:?} does not match config ({:?})",
            t.shape(),
            shape
        ))),
        None => Err(Error::WeightsFormat(format!("{name}: unknown tensor"))),
    }
}

pub fn load_weights(path: &Path) -> Result<WeightStore> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::WeightsFormat("bad magic".into()));
    }
    let mut pos = MAGIC.len();
    let nl = bytes[pos..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::WeightsFormat("missing header length".into()))?;
    let len_str = std::str::from_utf8(&bytes[pos..pos + nl])
        .map_err(|_| Error::WeightsFormat("header length is not ascii".into()))?;
    let header_len: usize = len_str
        .parse()
        .map_err(|_| Error::WeightsFormat(format!("bad header length {len_str:?}")))?;
    pos += nl + 1;
    if pos + header_len > bytes.len() {
        return Err(Error::WeightsFormat("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[pos..pos + header_len])
        .map_err(|_| Error::WeightsFormat("header is not utf-8".into()))?;
    pos += header_len;

    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    for line in header.lines() {
        let mut parts = line.split(' ');
        let name = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::WeightsFormat(format!("bad header line {line:?}")))?;
        let dtype = parts
            .next()
            .ok_or_else(|| Error::WeightsFormat(format!("{name}: missing dtype")))?;
        if dtype != "f64" {
            return Err(Error::WeightsFormat(format!("{name}: unsupported dtype {dtype}")));
        }
        let dims = parts
            .next()
            .ok_or_else(|| Error::WeightsFormat(format!("{name}: missing shape")))?;
        if parts.next().is_some() {
            return Err(Error::WeightsFormat(format!("{name}: trailing header fields")));
        }
        let shape: Vec<usize> = dims
            .split('x')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::WeightsFormat(format!("{name}: bad dim {s:?}")))
            })
            .collect::<Result<_>>()?;
        entries.push((name.to_string(), shape));
    }

    let mut tensors = BTreeMap::new();
    for (name, shape) in entries {
        let count: usize = shape.iter().product();
        let nbytes = count * 8;
        if pos + nbytes > bytes.len() {
            return Err(Error::WeightsFormat(format!("{name}: truncated data")));
        }
        let data: Vec<f64> = bytes[pos..pos + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        pos += nbytes;
        if tensors
            .insert(name.clone(), Tensor::from_vec(&shape, data)?)
            .is_some()
        {
            return Err(Error::WeightsFormat(format!("{name}: duplicate tensor")));
        }
    }
    if pos != bytes.len() {
        return Err(Error::WeightsFormat("trailing bytes after tensor data".into()));
    }

    let meta = tensors
        .remove(META_NAME)
        .ok_or_else(|| Error::WeightsFormat("missing meta tensor".into()))?;
    let config = config_from_meta(&meta)?;
    config.validate().map_err(|e| {
        Error::WeightsFormat(format!("meta describes an invalid config: {e}"))
    })?;

    for required in super::init_encoder(&config)?.names() {
        if !tensors.contains_key(required) {
            return Err(Error::WeightsFormat(format!("{required}: missing tensor")));
        }
    }
    for (name, t) in &tensors {
        validate_tensor_shape(name, t, &config)?;
    }

    Ok(WeightStore::from_parts(config, tensors))
}
