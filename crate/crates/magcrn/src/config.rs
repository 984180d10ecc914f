//! Model and run configuration, with strict key=value (de)serialization.

use std::fmt;

use crate::error::{Error, Result};

/// Which assembly of the model to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Hypernetwork feature maps re-weighted by cross-attention.
    Full,
    /// Attention applied directly to the hidden sequence; no hypernetwork.
    NoNmpl,
    /// Hypernetwork feature maps mapped straight to predictions; no attention.
    NoNawg,
    /// Hypernetwork output feeds the query path instead of the value path.
    Query,
    /// Hypernetwork output feeds the key path instead of the value path.
    Key,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoNawg,
        Variant::NoNmpl,
        Variant::Query,
        Variant::Key,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNmpl => "no_nmpl",
            Variant::NoNawg => "no_nawg",
            Variant::Query => "query",
            Variant::Key => "key",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_nmpl" => Ok(Variant::NoNmpl),
            "no_nawg" => Ok(Variant::NoNawg),
            "query" => Ok(Variant::Query),
            "key" => Ok(Variant::Key),
            other => Err(Error::Config(vec![format!(
                "variant: unknown tag `{other}` (expected full|no_nmpl|no_nawg|query|key)"
            )])),
        }
    }

    /// Does this assembly contain the attention stack?
    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::NoNawg)
    }

    /// Does this assembly contain the hypernetwork?
    pub fn uses_hypernetwork(self) -> bool {
        !matches!(self, Variant::NoNmpl)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Numeric precision of the value/gradient carrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(vec![format!(
                "precision: unknown value `{other}`"
            )])),
        }
    }
}

/// Which gate's node parameters seed the hypernetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmplGate {
    Candidate,
    Update,
}

impl NmplGate {
    pub fn as_str(self) -> &'static str {
        match self {
            NmplGate::Candidate => "candidate",
            NmplGate::Update => "update",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "candidate" => Ok(NmplGate::Candidate),
            "update" => Ok(NmplGate::Update),
            other => Err(Error::Config(vec![format!(
                "nmpl_gate: unknown value `{other}`"
            )])),
        }
    }
}

/// Normalization style inside the attention stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Per-channel statistics over all (sample, node, time) positions;
    /// running averages at evaluation.
    Batch,
    /// Per-position statistics over channels.
    Layer,
    /// No normalization; diagnostic mode.
    Identity,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            "identity" => Ok(NormKind::Identity),
            other => Err(Error::Config(vec![format!(
                "norm: unknown value `{other}`"
            )])),
        }
    }
}

/// All structural hyperparameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of graph nodes (N).
    pub nodes: usize,
    /// Node embedding width (C).
    pub embed_dim: usize,
    /// Hidden state width (D).
    pub hidden_dim: usize,
    /// Input features per node per step (F_in).
    pub input_dim: usize,
    /// Input window length.
    pub t_in: usize,
    /// Forecast horizon count.
    pub t_out: usize,
    /// Per-node convolutional filter length (odd).
    pub filter_len: usize,
    /// Attention heads (j).
    pub heads: usize,
    /// Attention layers (L).
    pub attn_layers: usize,
    /// Feedforward width inside each attention layer.
    pub ffn_dim: usize,
    /// Model assembly.
    pub variant: Variant,
    /// Base seed for parameter initialization.
    pub seed: u64,
    pub precision: Precision,
    /// Add an identity matrix on top of the learned adjacency.
    pub self_loops: bool,
    /// Which gate's node parameters feed the hypernetwork.
    pub nmpl_gate: NmplGate,
    /// Apply an output projection after head concatenation.
    pub output_proj: bool,
    pub norm: NormKind,
    /// One output head per horizon instead of a single shared head.
    pub per_horizon_heads: bool,
    /// Stacked recurrent depth.
    pub gru_depth: usize,
}

impl ModelConfig {
    /// Protocol defaults (12-in/12-out, D=64, C=8, L_F=9, L=2, 4 heads).
    pub fn protocol(nodes: usize) -> Self {
        ModelConfig {
            nodes,
            embed_dim: 8,
            hidden_dim: 64,
            input_dim: 1,
            t_in: 12,
            t_out: 12,
            filter_len: 9,
            heads: 4,
            attn_layers: 2,
            ffn_dim: 64,
            variant: Variant::Full,
            seed: 1,
            precision: Precision::F64,
            self_loops: false,
            nmpl_gate: NmplGate::Candidate,
            output_proj: true,
            norm: NormKind::Batch,
            per_horizon_heads: false,
            gru_depth: 1,
        }
    }

    /// Small configuration used by the gradient checker.
    pub fn tiny() -> Self {
        ModelConfig {
            nodes: 4,
            embed_dim: 3,
            hidden_dim: 6,
            input_dim: 1,
            t_in: 3,
            t_out: 3,
            filter_len: 3,
            heads: 2,
            attn_layers: 1,
            ffn_dim: 6,
            ..ModelConfig::protocol(4)
        }
    }

    /// Gate input width for a recurrent layer: step input concatenated with
    /// the previous hidden state.
    pub fn gate_input_dim(&self, depth: usize) -> usize {
        if depth == 0 {
            self.input_dim + self.hidden_dim
        } else {
            2 * self.hidden_dim
        }
    }

    /// Per-head attention width.
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Collect every violated constraint; empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.nodes == 0 {
            v.push("nodes must be >= 1".into());
        }
        if self.embed_dim == 0 {
            v.push("embed_dim must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            v.push("hidden_dim must be >= 1".into());
        }
        if self.input_dim == 0 {
            v.push("input_dim must be >= 1".into());
        }
        if self.t_in == 0 {
            v.push("t_in must be >= 1".into());
        }
        if self.t_out == 0 {
            v.push("t_out must be >= 1".into());
        }
        if self.filter_len % 2 == 0 {
            v.push(format!("filter_len must be odd, got {}", self.filter_len));
        }
        if self.hidden_dim > 0 && self.filter_len > 2 * self.hidden_dim - 1 {
            v.push(format!(
                "filter_len must be <= 2*hidden_dim-1 ({} > {})",
                self.filter_len,
                2 * self.hidden_dim - 1
            ));
        }
        if self.heads == 0 {
            v.push("heads must be >= 1".into());
        } else if self.hidden_dim % self.heads != 0 {
            v.push(format!(
                "hidden_dim must be divisible by heads ({} % {} != 0)",
                self.hidden_dim, self.heads
            ));
        }
        if self.attn_layers == 0 && self.variant.uses_attention() {
            v.push("attn_layers must be >= 1".into());
        }
        if self.ffn_dim == 0 && self.variant.uses_attention() {
            v.push("ffn_dim must be >= 1".into());
        }
        if self.variant.uses_attention() && self.t_in != self.t_out {
            v.push(format!(
                "attention couples the input window to the horizons: t_in ({}) must equal t_out ({}) for variant {}",
                self.t_in, self.t_out, self.variant
            ));
        }
        if self.precision == Precision::F32 {
            v.push("precision f32 is not supported by this build; use f64".into());
        }
        if self.gru_depth == 0 {
            v.push("gru_depth must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// A full reproducible run: model config plus data, optimization and output
/// settings. Round-trips losslessly through `to_kv` / `from_kv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub manifest: Option<String>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Global z-score statistics (default) or per-node.
    pub per_node_scaling: bool,
    /// Optional gradient-clipping max norm; 0 disables.
    pub clip_norm: f64,
}

impl RunConfig {
    /// Protocol defaults: 6:2:2 split, batch 64, lr 0.003, 100 epochs,
    /// patience 15.
    pub fn protocol(nodes: usize) -> Self {
        RunConfig {
            model: ModelConfig::protocol(nodes),
            manifest: None,
            train_ratio: 0.6,
            val_ratio: 0.2,
            batch_size: 64,
            learning_rate: 0.003,
            epochs: 100,
            patience: 15,
            per_node_scaling: false,
            clip_norm: 0.0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            v.push("learning_rate must be > 0".into());
        }
        if self.epochs == 0 {
            v.push("epochs must be >= 1".into());
        }
        if !(self.train_ratio > 0.0
            && self.val_ratio > 0.0
            && self.train_ratio + self.val_ratio < 1.0)
        {
            v.push(format!(
                "split ratios must satisfy 0 < train, 0 < val, train+val < 1 (got {} and {})",
                self.train_ratio, self.val_ratio
            ));
        }
        if self.clip_norm < 0.0 {
            v.push("clip_norm must be >= 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Serialize as `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("nodes", m.nodes.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("hidden_dim", m.hidden_dim.to_string());
        kv("input_dim", m.input_dim.to_string());
        kv("t_in", m.t_in.to_string());
        kv("t_out", m.t_out.to_string());
        kv("filter_len", m.filter_len.to_string());
        kv("heads", m.heads.to_string());
        kv("attn_layers", m.attn_layers.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("variant", m.variant.as_str().to_string());
        kv("seed", m.seed.to_string());
        kv("precision", m.precision.as_str().to_string());
        kv("self_loops", m.self_loops.to_string());
        kv("nmpl_gate", m.nmpl_gate.as_str().to_string());
        kv("output_proj", m.output_proj.to_string());
        kv("norm", m.norm.as_str().to_string());
        kv("per_horizon_heads", m.per_horizon_heads.to_string());
        kv("gru_depth", m.gru_depth.to_string());
        if let Some(path) = &self.manifest {
            kv("manifest", path.clone());
        }
        kv("train_ratio", format_f64(self.train_ratio));
        kv("val_ratio", format_f64(self.val_ratio));
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", format_f64(self.learning_rate));
        kv("epochs", self.epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("per_node_scaling", self.per_node_scaling.to_string());
        kv("clip_norm", format_f64(self.clip_norm));
        s
    }

    /// Parse `key=value` lines. Missing keys keep their defaults; unknown
    /// keys are rejected, all violations reported together.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::protocol(1);
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if let Err(e) = cfg.apply_kv(key, value) {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Apply one key; returns a description of the problem on failure.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("{key}: cannot parse `{value}`"))
        }
        let m = &mut self.model;
        match key {
            "nodes" => m.nodes = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "hidden_dim" => m.hidden_dim = num(key, value)?,
            "input_dim" => m.input_dim = num(key, value)?,
            "t_in" => m.t_in = num(key, value)?,
            "t_out" => m.t_out = num(key, value)?,
            "filter_len" => m.filter_len = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "attn_layers" => m.attn_layers = num(key, value)?,
            "ffn_dim" => m.ffn_dim = num(key, value)?,
            "variant" => m.variant = Variant::parse(value).map_err(|e| e.to_string())?,
            "seed" => m.seed = num(key, value)?,
            "precision" => m.precision = Precision::parse(value).map_err(|e| e.to_string())?,
            "self_loops" => m.self_loops = num(key, value)?,
            "nmpl_gate" => m.nmpl_gate = NmplGate::parse(value).map_err(|e| e.to_string())?,
            "output_proj" => m.output_proj = num(key, value)?,
            "norm" => m.norm = NormKind::parse(value).map_err(|e| e.to_string())?,
            "per_horizon_heads" => m.per_horizon_heads = num(key, value)?,
            "gru_depth" => m.gru_depth = num(key, value)?,
            "manifest" => self.manifest = Some(value.to_string()),
            "train_ratio" => self.train_ratio = num(key, value)?,
            "val_ratio" => self.val_ratio = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "per_node_scaling" => self.per_node_scaling = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

/// Shortest representation that parses back to the identical f64.
pub fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().map(f64::to_bits), Ok(v.to_bits()));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_is_lossless() {
        let mut cfg = RunConfig::protocol(307);
        cfg.model.variant = Variant::Query;
        cfg.model.seed = 1234567;
        cfg.manifest = Some("data/series.manifest".into());
        cfg.learning_rate = 0.0031415926535897933;
        cfg.model.norm = NormKind::Layer;
        let text = cfg.to_kv();
        let back = RunConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_kv("nodes=3\nbogus_key=1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "{msg}");
    }

    #[test]
    fn all_violations_reported_at_once() {
        let mut cfg = RunConfig::protocol(0);
        cfg.model.filter_len = 4;
        cfg.model.heads = 3; // 64 % 3 != 0
        cfg.batch_size = 0;
        let v = cfg.violations();
        assert!(v.len() >= 4, "expected several violations, got {v:?}");
    }

    #[test]
    fn even_filter_rejected_at_configuration_time() {
        let mut cfg = ModelConfig::tiny();
        cfg.filter_len = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn f32_precision_rejected_by_this_build() {
        let mut cfg = ModelConfig::tiny();
        cfg.precision = Precision::F32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tiny_and_protocol_are_valid() {
        ModelConfig::tiny().validate().unwrap();
        RunConfig::protocol(307).validate().unwrap();
    }

    #[test]
    fn protocol_defaults_match_the_reference_row() {
        let run = RunConfig::protocol(307);
        assert_eq!(run.model.embed_dim, 8);
        assert_eq!(run.model.filter_len, 9);
        assert_eq!(run.model.attn_layers, 2);
        assert_eq!(run.model.hidden_dim, 64);
        assert_eq!(run.model.heads, 4);
        assert_eq!((run.model.t_in, run.model.t_out), (12, 12));
        assert_eq!(run.batch_size, 64);
        assert!((run.learning_rate - 0.003).abs() < 1e-15);
        assert_eq!(run.epochs, 100);
        assert_eq!(run.patience, 15);
        assert!((run.train_ratio, run.val_ratio) == (0.6, 0.2));
    }
}
