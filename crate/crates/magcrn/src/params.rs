//! Named trainable tensors, seeded initialization, and the checkpoint
//! container.

use std::collections::HashMap;
use std::path::Path;

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// Ordered collection of named trainable tensors. Registration order is the
/// canonical iteration order for gradients and optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count over all registered tensors.
    pub fn count_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalar counts grouped by the first dotted path segment.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in &self.entries {
            let head = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == head) {
                Some((_, c)) => *c += t.numel(),
                None => groups.push((head, t.numel())),
            }
        }
        groups
    }
}

/// Running normalization statistics for one site (non-trainable state).
#[derive(Debug, Clone, PartialEq)]
pub struct NormSite {
    pub name: String,
    pub mean: Tensor,
    pub var: Tensor,
    /// False until the first training batch has been folded in.
    pub initialized: bool,
}

/// All normalization state of a model, keyed by site name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormState {
    pub sites: Vec<NormSite>,
}

impl NormState {
    pub fn site(&self, name: &str) -> Option<&NormSite> {
        self.sites.iter().find(|s| s.name == name)
    }

    pub fn site_mut(&mut self, name: &str) -> Option<&mut NormSite> {
        self.sites.iter_mut().find(|s| s.name == name)
    }

    /// Fold observed batch statistics into the running averages.
    pub fn update(&mut self, name: &str, mean: &Tensor, var: &Tensor, momentum: f64) {
        let site = self
            .site_mut(name)
            .unwrap_or_else(|| panic!("unknown norm site `{name}`"));
        if site.initialized {
            for (r, &b) in site.mean.data_mut().iter_mut().zip(mean.data()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, &b) in site.var.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        } else {
            site.mean = mean.clone();
            site.var = var.clone();
            site.initialized = true;
        }
    }
}

/// Trainable parameters plus the non-trainable normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParameterSet,
    pub norms: NormState,
}

/// Deterministic seeded initialization. Every tensor draws from its own
/// labeled stream, so a given tensor's values depend only on (seed, name).
pub fn init(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let seed = config.seed;
    let mut params = ParameterSet::new();
    let mut norms = NormState::default();

    let uniform = |name: &str, shape: Vec<usize>, bound: f64| {
        let mut r = rng::stream(seed, name);
        Tensor::uniform(shape, -bound, bound, &mut r)
    };

    let n = config.nodes;
    let c = config.embed_dim;
    let d = config.hidden_dim;

    params.insert(
        "embeddings",
        uniform("embeddings", vec![n, c], 1.0 / (c as f64).sqrt()),
    );

    for depth in 0..config.gru_depth {
        let d_in = config.gate_input_dim(depth);
        let bound = 1.0 / ((c * d_in) as f64).sqrt();
        for gate in ["update", "reset", "candidate"] {
            let w = format!("gru.l{depth}.{gate}.weight_pool");
            let b = format!("gru.l{depth}.{gate}.bias_pool");
            params.insert(w.clone(), uniform(&w, vec![c, d_in, d], bound));
            params.insert(b.clone(), uniform(&b, vec![c, d], bound));
        }
    }

    if config.variant.uses_hypernetwork() {
        let d_in = config.gate_input_dim(config.gru_depth - 1);
        let bound = 1.0 / ((d_in * d) as f64).sqrt();
        params.insert(
            "nmpl.u",
            uniform(
                "nmpl.u",
                vec![d_in * d, config.t_out * config.filter_len],
                bound,
            ),
        );
    }

    if config.variant.uses_attention() {
        let bound = 1.0 / (d as f64).sqrt();
        for l in 0..config.attn_layers {
            for w in ["wq", "wk", "wv"] {
                let name = format!("nawg.l{l}.{w}");
                params.insert(name.clone(), uniform(&name, vec![d, d], bound));
            }
            if config.output_proj {
                let name = format!("nawg.l{l}.wo");
                params.insert(name.clone(), uniform(&name, vec![d, d], bound));
            }
            let w1 = format!("nawg.l{l}.ffn.w1");
            params.insert(w1.clone(), uniform(&w1, vec![d, config.ffn_dim], bound));
            params.insert(
                format!("nawg.l{l}.ffn.b1"),
                Tensor::zeros(vec![config.ffn_dim]),
            );
            let w2 = format!("nawg.l{l}.ffn.w2");
            params.insert(
                w2.clone(),
                uniform(
                    &w2,
                    vec![config.ffn_dim, d],
                    1.0 / (config.ffn_dim as f64).sqrt(),
                ),
            );
            params.insert(format!("nawg.l{l}.ffn.b2"), Tensor::zeros(vec![d]));
            for site in ["norm1", "norm2"] {
                params.insert(
                    format!("nawg.l{l}.{site}.gamma"),
                    Tensor::full(vec![d], 1.0),
                );
                params.insert(format!("nawg.l{l}.{site}.beta"), Tensor::zeros(vec![d]));
                norms.sites.push(NormSite {
                    name: format!("nawg.l{l}.{site}"),
                    mean: Tensor::zeros(vec![d]),
                    var: Tensor::full(vec![d], 1.0),
                    initialized: false,
                });
            }
        }
    }

    let bound = 1.0 / (d as f64).sqrt();
    if config.per_horizon_heads {
        params.insert(
            "output.weight",
            uniform("output.weight", vec![config.t_out, d], bound),
        );
        params.insert("output.bias", Tensor::zeros(vec![config.t_out]));
    } else {
        params.insert("output.weight", uniform("output.weight", vec![d, 1], bound));
        params.insert("output.bias", Tensor::zeros(vec![1]));
    }

    Ok(ModelState { params, norms })
}

// ── checkpoint container ───────────────────────────────────────────────
//
// Self-describing binary layout, all integers little-endian u64:
//   magic "MGRNCKP1"
//   config block:   len, UTF-8 key=value text (the full run config)
//   parameters:     count, then per tensor: name(len,bytes), rank, dims, f64 LE data
//   norm sites:     count, then per site: name(len,bytes), initialized u8,
//                   len, mean f64 LE, var f64 LE

const MAGIC: &[u8; 8] = b"MGRNCKP1";

pub fn save_checkpoint(path: &Path, run: &RunConfig, state: &ModelState) -> Result<()> {
    let bytes = checkpoint_bytes(run, state);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn checkpoint_bytes(run: &RunConfig, state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = run.to_kv();
    write_u64(&mut out, cfg.len() as u64);
    out.extend_from_slice(cfg.as_bytes());

    write_u64(&mut out, state.params.len() as u64);
    for (name, t) in state.params.iter() {
        write_str(&mut out, name);
        write_u64(&mut out, t.rank() as u64);
        for &d in t.shape() {
            write_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    write_u64(&mut out, state.norms.sites.len() as u64);
    for site in &state.norms.sites {
        write_str(&mut out, &site.name);
        out.push(u8::from(site.initialized));
        write_u64(&mut out, site.mean.numel() as u64);
        for &v in site.mean.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in site.var.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, ModelState)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(RunConfig, ModelState)> {
    let mut r = Cursor { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg_len = r.u64()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let run = RunConfig::from_kv(cfg_text)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;

    let mut params = ParameterSet::new();
    let n_params = r.u64()? as usize;
    for _ in 0..n_params {
        let name = r.string()?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        params.insert(name, Tensor::new(shape, data));
    }

    let mut norms = NormState::default();
    let n_sites = r.u64()? as usize;
    for _ in 0..n_sites {
        let name = r.string()?;
        let initialized = r.take(1)?[0] != 0;
        let len = r.u64()? as usize;
        let mean = Tensor::new(vec![len], r.f64s(len)?);
        let var = Tensor::new(vec![len], r.f64s(len)?);
        norms.sites.push(NormSite {
            name,
            mean,
            var,
            initialized,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((run, ModelState { params, norms }))
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    write_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("bad string".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
