//! Run configuration: a flat TOML file with `[data] [graph] [embed] [proto]
//! [head] [eval]` sections. Every field has a default; `--set section.field=value`
//! overrides single fields on the command line.

use std::path::Path;

use dgre_core::data::SynthConfig;
use dgre_core::eval::EvalConfig;
use dgre_core::gnn::SageConfig;
use dgre_core::heads::{HeadConfig, HeadKind, SharedChoice};
use dgre_core::market_proto::{DiscriminatorConfig, MarketProtoConfig};
use dgre_core::pipeline::{GateTransform, PipelineConfig};
use dgre_core::user_proto::RefineConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "DGRE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synth`, or a path to an interaction file (or a directory of per-market files).
    pub source: String,
    /// `tsv` (canonical five-column file) or `per-market` (`<market>.tsv` files).
    pub format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub min_interactions: usize,
    pub markets: usize,
    pub users_per_market: usize,
    pub items: usize,
    pub groups: usize,
    pub items_per_group: usize,
    pub p_in: f64,
    pub p_out: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            source: "synth".into(),
            format: "tsv".into(),
            seed: None,
            min_interactions: 5,
            markets: s.markets,
            users_per_market: s.users_per_market,
            items: s.items,
            groups: s.groups,
            items_per_group: s.items_per_group,
            p_in: s.p_in,
            p_out: s.p_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub min_common_items: usize,
    pub min_common_users: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            min_common_items: 2,
            min_common_users: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub dim: usize,
    pub layers: usize,
    pub sample_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub neg_per_pos: usize,
    pub batch_edges: usize,
    pub init_std: f64,
    /// `adam` or `sgd`.
    pub optimizer: String,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let s = SageConfig::default();
        Self {
            dim: s.dim,
            layers: s.n_layers,
            sample_size: s.sample_size,
            epochs: s.epochs,
            lr: s.lr,
            neg_per_pos: s.neg_per_pos,
            batch_edges: s.batch_edges,
            init_std: s.init_std,
            optimizer: "adam".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoSection {
    pub k_proto: usize,
    pub alpha: f64,
    pub refine_steps: usize,
    pub refine_lr: f64,
    pub refresh_every: usize,
    /// `argmax` or `soft`.
    pub shared_choice: String,
    /// `magnitude` or `raw`.
    pub gate: String,
    pub k_s: usize,
    pub disc_epochs: usize,
    pub disc_lr: f64,
    pub disc_neg_per_pos: usize,
    pub score_samples: usize,
}

impl Default for ProtoSection {
    fn default() -> Self {
        let r = RefineConfig::default();
        let m = MarketProtoConfig::default();
        Self {
            k_proto: 10,
            alpha: 1.0,
            refine_steps: r.steps,
            refine_lr: r.lr,
            refresh_every: r.refresh_every,
            shared_choice: "argmax".into(),
            gate: "magnitude".into(),
            k_s: m.k_s,
            disc_epochs: m.discriminator.epochs,
            disc_lr: m.discriminator.lr,
            disc_neg_per_pos: m.discriminator.neg_per_pos,
            score_samples: m.score_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    /// `gmf`, `gmf-dgre`, `mlp-ma`, `nmf-dgre`, ...
    pub kind: String,
    pub dim: usize,
    pub mlp_layers: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub neg_per_pos: usize,
    pub init_std: f64,
}

impl Default for HeadSection {
    fn default() -> Self {
        let h = HeadConfig::default();
        Self {
            kind: "gmf-dgre".into(),
            dim: h.dim,
            mlp_layers: h.mlp_layers,
            epochs: h.epochs,
            lr: h.lr,
            batch_size: h.batch_size,
            neg_per_pos: h.neg_per_pos,
            init_std: h.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub n_negatives: usize,
    /// `k_proto` values swept by `ablate`.
    pub ablate_k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 10,
            n_negatives: 99,
            ablate_k: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub graph: GraphSection,
    pub embed: EmbedSection,
    pub proto: ProtoSection,
    pub head: HeadSection,
    pub eval: EvalSection,
}

fn toml_error(e: toml::de::Error) -> CliError {
    // Serde reports unknown or mistyped keys in the message; the span gives the key path.
    let msg = e.message().to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<file>".to_string());
    CliError::config(field, msg.trim())
}

/// Applies `section.field=value` to a TOML table. The value is parsed as a
/// TOML value and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "expected section.field=value"))?;
    let key = key.trim();
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| CliError::config(key, "expected section.field"))?;
    let raw = raw.trim();
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(CliError::config(section, "not a section")),
    }
}

impl RunConfig {
    /// Defaults, then the file, then `--set` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>().map_err(toml_error)?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(toml_error)?;
        Ok(cfg)
    }

    /// Fills the seed from `flag`, the file, `DGRE_SEED` and finally 0, in that order.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.data.seed = Some(s);
        }
        if self.data.seed.is_none() {
            let from_env = match env {
                Some(v) => Some(
                    v.trim()
                        .parse::<u64>()
                        .map_err(|_| CliError::config(SEED_ENV, format!("not an unsigned integer: `{v}`")))?,
                ),
                None => None,
            };
            self.data.seed = Some(from_env.unwrap_or(0));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.data.seed.unwrap_or(0)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            markets: d.markets,
            users_per_market: d.users_per_market,
            items: d.items,
            groups: d.groups,
            items_per_group: d.items_per_group,
            p_in: d.p_in,
            p_out: d.p_out,
        }
    }

    pub fn head_kind(&self) -> Result<HeadKind> {
        self.head.kind.parse().map_err(|_| {
            CliError::config(
                "head.kind",
                format!("unknown head `{}` (expected gmf|mlp|nmf, optionally with -base|-dgre|-ma)", self.head.kind),
            )
        })
    }

    /// Core configuration, validated. Errors name the offending field.
    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let adam = match self.embed.optimizer.as_str() {
            "adam" => true,
            "sgd" => false,
            other => return Err(CliError::config("embed.optimizer", format!("`{other}` is not adam|sgd"))),
        };
        let shared_choice = match self.proto.shared_choice.as_str() {
            "argmax" => SharedChoice::Argmax,
            "soft" => SharedChoice::SoftMixture,
            other => return Err(CliError::config("proto.shared_choice", format!("`{other}` is not argmax|soft"))),
        };
        let gate = match self.proto.gate.as_str() {
            "magnitude" => GateTransform::Magnitude,
            "raw" => GateTransform::Raw,
            other => return Err(CliError::config("proto.gate", format!("`{other}` is not magnitude|raw"))),
        };
        if !matches!(self.data.format.as_str(), "tsv" | "per-market") {
            return Err(CliError::config("data.format", format!("`{}` is not tsv|per-market", self.data.format)));
        }
        if self.data.source.is_empty() {
            return Err(CliError::config("data.source", "empty"));
        }
        if self.data.min_interactions == 0 {
            return Err(CliError::config("data.min_interactions", "must be at least 1"));
        }
        if self.data.source == "synth" {
            self.synth().validate().map_err(|e| core_field_error(e, "data"))?;
        }
        if self.embed.layers == 0 {
            return Err(CliError::config("embed.layers", "must be at least 1"));
        }
        if self.embed.sample_size == 0 {
            return Err(CliError::config("embed.sample_size", "must be at least 1"));
        }
        if self.embed.batch_edges == 0 {
            return Err(CliError::config("embed.batch_edges", "must be at least 1"));
        }
        if !(self.embed.lr > 0.0) {
            return Err(CliError::config("embed.lr", "must be positive"));
        }
        if self.proto.refresh_every == 0 {
            return Err(CliError::config("proto.refresh_every", "must be at least 1"));
        }
        if !(self.proto.disc_lr > 0.0) {
            return Err(CliError::config("proto.disc_lr", "must be positive"));
        }
        if self.eval.ablate_k.is_empty() || self.eval.ablate_k.contains(&0) {
            return Err(CliError::config("eval.ablate_k", "needs at least one positive value"));
        }
        let cfg = PipelineConfig {
            min_interactions: self.data.min_interactions,
            min_common_items: self.graph.min_common_items,
            min_common_users: self.graph.min_common_users,
            embed: SageConfig {
                dim: self.embed.dim,
                n_layers: self.embed.layers,
                sample_size: self.embed.sample_size,
                epochs: self.embed.epochs,
                lr: self.embed.lr,
                neg_per_pos: self.embed.neg_per_pos,
                batch_edges: self.embed.batch_edges,
                init_std: self.embed.init_std,
                adam,
            },
            k_proto: self.proto.k_proto,
            alpha: self.proto.alpha,
            refine: RefineConfig {
                steps: self.proto.refine_steps,
                lr: self.proto.refine_lr,
                refresh_every: self.proto.refresh_every,
            },
            shared_choice,
            gate,
            market: MarketProtoConfig {
                discriminator: DiscriminatorConfig {
                    epochs: self.proto.disc_epochs,
                    lr: self.proto.disc_lr,
                    neg_per_pos: self.proto.disc_neg_per_pos,
                },
                k_s: self.proto.k_s,
                score_samples: self.proto.score_samples,
            },
            head: HeadConfig {
                dim: self.head.dim,
                mlp_layers: self.head.mlp_layers.clone(),
                epochs: self.head.epochs,
                lr: self.head.lr,
                batch_size: self.head.batch_size,
                neg_per_pos: self.head.neg_per_pos,
                init_std: self.head.init_std,
            },
            head_kind: self.head_kind()?,
            eval: EvalConfig {
                k: self.eval.k,
                n_negatives: self.eval.n_negatives,
                seed: 0,
            },
            seed: self.seed(),
        };
        cfg.validate().map_err(|e| core_field_error(e, "head"))?;
        Ok(cfg)
    }
}

/// Maps a core validation error to the config key it came from. `default`
/// is the section for names that do not identify one on their own.
fn core_field_error(e: dgre_core::Error, default: &str) -> CliError {
    match e {
        dgre_core::Error::InvalidArgument { name, reason } => {
            let field = match name {
                "min_common_items" | "min_common_users" => format!("graph.{name}"),
                "k_proto" | "alpha" | "k_s" => format!("proto.{name}"),
                "d_graph" => "embed.dim".into(),
                "k_cutoff" => "eval.k".into(),
                "markets/users_per_market/items" | "groups" | "items_per_group" | "p_in/p_out" | "p_in" => {
                    format!("data.{name}")
                }
                other => format!("{default}.{other}"),
            };
            CliError::config(field, reason)
        }
        other => CliError::Core(other),
    }
}
