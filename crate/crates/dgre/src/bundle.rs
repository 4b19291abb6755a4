//! Binary tensor bundles: model checkpoints and exact stage state.
//!
//! Layout: the magic `DGRE1\n`, a little-endian `u64` header length, a JSON
//! header `{kind, meta, tensors: [{name, rows, cols}]}`, then every tensor's
//! values as little-endian `f64` in header order.

use std::path::Path;

use dgre_core::gnn::{Activation, EmbeddingTable, SageLayer, SageParameters, TrainedEmbedding};
use dgre_core::heads::{Dense, Factors, HeadKind, HeadParameters, PrototypeContext, TrainedHead};
use dgre_core::numerics::Tensor2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 6] = b"DGRE1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor2)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Bundle {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor2) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or("not a DGRE1 file (bad magic)")?;
        let (len, rest) = rest.split_at_checked(8).ok_or("truncated header length")?;
        let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let (header, mut data) = rest.split_at_checked(len).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(header).map_err(|e| format!("bad header: {e}"))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows.checked_mul(e.cols).ok_or("tensor too large")?;
            let (chunk, tail) = data
                .split_at_checked(n * 8)
                .ok_or_else(|| format!("truncated tensor `{}`", e.name))?;
            let values = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor2::new(e.rows, e.cols, values).map_err(|x| x.to_string())?));
            data = tail;
        }
        if !data.is_empty() {
            return Err(format!("{} trailing bytes", data.len()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::Missing(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let b = Self::from_bytes(&bytes).map_err(|r| CliError::format(path, r))?;
        if b.kind != kind {
            return Err(CliError::format(path, format!("expected a `{kind}` bundle, found `{}`", b.kind)));
        }
        Ok(b)
    }

    pub fn tensor(&self, name: &str) -> std::result::Result<&Tensor2, String> {
        self.get(name).ok_or_else(|| format!("missing tensor `{name}`"))
    }
}

fn meta_field<T: for<'de> Deserialize<'de>>(meta: &Value, key: &str) -> std::result::Result<T, String> {
    serde_json::from_value(meta.get(key).cloned().ok_or_else(|| format!("missing `{key}`"))?)
        .map_err(|e| format!("bad `{key}`: {e}"))
}

/// A prototype context under `prefix`.
pub fn push_context(b: &mut Bundle, prefix: &str, ctx: &PrototypeContext) -> Value {
    b.push(format!("{prefix}.user_vectors"), &ctx.user_vectors);
    b.push(format!("{prefix}.market_vectors"), &ctx.market_vectors);
    json!({
        "user_market": ctx.user_market,
        "shared_enabled": ctx.shared_enabled,
        "market_enabled": ctx.market_enabled,
    })
}

pub fn read_context(b: &Bundle, prefix: &str, meta: &Value) -> std::result::Result<PrototypeContext, String> {
    PrototypeContext::new(
        b.tensor(&format!("{prefix}.user_vectors"))?.clone(),
        b.tensor(&format!("{prefix}.market_vectors"))?.clone(),
        meta_field(meta, "user_market")?,
        meta_field(meta, "shared_enabled")?,
        meta_field(meta, "market_enabled")?,
    )
    .map_err(|e| e.to_string())
}

/// Checkpoint of a trained head together with the context it was trained with.
pub fn checkpoint(head: &TrainedHead, ctx: &PrototypeContext) -> Bundle {
    let p = &head.params;
    let mut b = Bundle::new("head", Value::Null);
    if let Some(f) = &p.gmf {
        b.push("gmf.p", &f.p);
        b.push("gmf.q", &f.q);
    }
    if let Some(f) = &p.mlp {
        b.push("mlp.p", &f.p);
        b.push("mlp.q", &f.q);
    }
    for (i, l) in p.layers.iter().enumerate() {
        b.push(format!("layer{i}.w"), &l.w);
        b.push(format!("layer{i}.b"), &l.b);
    }
    if let Some(m) = &p.market {
        b.push("market", m);
    }
    b.push("h", &p.h);
    let ctx_meta = push_context(&mut b, "ctx", ctx);
    b.meta = json!({
        "head": p.kind.to_string(),
        "dim": p.dim(),
        "n_users": p.n_users(),
        "n_items": p.n_items(),
        "n_markets": p.n_markets,
        "n_layers": p.layers.len(),
        "loss_trace": head.loss_trace,
        "ctx": ctx_meta,
    });
    b
}

pub fn read_checkpoint(b: &Bundle) -> std::result::Result<(TrainedHead, PrototypeContext), String> {
    let kind: HeadKind = meta_field::<String>(&b.meta, "head")?
        .parse()
        .map_err(|e: dgre_core::Error| e.to_string())?;
    let factors = |name: &str| -> std::result::Result<Option<Factors>, String> {
        match (b.get(&format!("{name}.p")), b.get(&format!("{name}.q"))) {
            (Some(p), Some(q)) => Ok(Some(Factors { p: p.clone(), q: q.clone() })),
            (None, None) => Ok(None),
            _ => Err(format!("incomplete `{name}` tables")),
        }
    };
    let n_layers: usize = meta_field(&b.meta, "n_layers")?;
    let layers = (0..n_layers)
        .map(|i| {
            Ok(Dense {
                w: b.tensor(&format!("layer{i}.w"))?.clone(),
                b: b.tensor(&format!("layer{i}.b"))?.clone(),
            })
        })
        .collect::<std::result::Result<_, String>>()?;
    let params = HeadParameters {
        kind,
        gmf: factors("gmf")?,
        mlp: factors("mlp")?,
        layers,
        market: b.get("market").cloned(),
        h: b.tensor("h")?.clone(),
        n_markets: meta_field(&b.meta, "n_markets")?,
    };
    let ctx_meta = b.meta.get("ctx").ok_or("missing `ctx`")?;
    let ctx = read_context(b, "ctx", ctx_meta)?;
    let head = TrainedHead {
        params,
        loss_trace: meta_field(&b.meta, "loss_trace")?,
    };
    Ok((head, ctx))
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

/// Adds one trained embedding under `prefix` and returns its metadata.
pub fn push_embedding(b: &mut Bundle, prefix: &str, e: &TrainedEmbedding) -> Value {
    b.push(format!("{prefix}.embeddings"), e.embeddings.as_tensor());
    b.push(format!("{prefix}.input"), e.input.as_tensor());
    for (i, l) in e.params.layers.iter().enumerate() {
        b.push(format!("{prefix}.layer{i}"), &l.weight);
    }
    json!({
        "activations": e.params.layers.iter().map(|l| activation_name(l.activation)).collect::<Vec<_>>(),
        "sample_size": e.params.sample_size,
        "loss_trace": e.loss_trace,
        "untrained": e.untrained,
    })
}

pub fn read_embedding(b: &Bundle, prefix: &str, meta: &Value) -> std::result::Result<TrainedEmbedding, String> {
    let table = |name: &str| -> std::result::Result<EmbeddingTable, String> {
        EmbeddingTable::new(b.tensor(&format!("{prefix}.{name}"))?.clone()).map_err(|e| e.to_string())
    };
    let activations: Vec<String> = meta_field(meta, "activations")?;
    let layers = activations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let activation = match a.as_str() {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                other => return Err(format!("unknown activation `{other}`")),
            };
            Ok(SageLayer {
                weight: b.tensor(&format!("{prefix}.layer{i}"))?.clone(),
                activation,
            })
        })
        .collect::<std::result::Result<_, String>>()?;
    Ok(TrainedEmbedding {
        embeddings: table("embeddings")?,
        input: table("input")?,
        params: SageParameters {
            layers,
            sample_size: meta_field(meta, "sample_size")?,
        },
        loss_trace: meta_field(meta, "loss_trace")?,
        untrained: meta_field(meta, "untrained")?,
    })
}
