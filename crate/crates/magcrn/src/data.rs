//! Series ingestion, missing-value repair, normalization, chronological
//! splitting, sliding windows, and synthetic node-heterogeneous series for
//! verification.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::config::format_f64;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Flow,
    Speed,
}

impl SeriesKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SeriesKind::Flow => "flow",
            SeriesKind::Speed => "speed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(SeriesKind::Flow),
            "speed" => Ok(SeriesKind::Speed),
            other => Err(Error::Config(vec![format!(
                "kind: unknown value `{other}`"
            )])),
        }
    }
}

/// A `[T_total, N]` series; missing entries are NaN sentinels.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub values: Tensor,
    pub interval_minutes: u32,
    pub kind: SeriesKind,
}

impl RawSeries {
    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Z-score statistics fitted on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub enum Scaler {
    Global { mean: f64, std: f64 },
    PerNode { mean: Vec<f64>, std: Vec<f64> },
}

impl Scaler {
    pub fn fit(train: &Tensor, per_node: bool) -> Result<Self> {
        let (steps, nodes) = (train.shape()[0], train.shape()[1]);
        if per_node {
            let mut mean = vec![0.0; nodes];
            let mut std = vec![0.0; nodes];
            for n in 0..nodes {
                let col: Vec<f64> = (0..steps).map(|t| train.at2(t, n)).collect();
                let m = col.iter().sum::<f64>() / steps as f64;
                let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / steps as f64;
                if v <= 0.0 {
                    return Err(Error::data(
                        "<scaler>",
                        format!("node {n} has zero variance"),
                    ));
                }
                mean[n] = m;
                std[n] = v.sqrt();
            }
            Ok(Scaler::PerNode { mean, std })
        } else {
            let m = train.data().iter().sum::<f64>() / train.numel() as f64;
            let v =
                train.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / train.numel() as f64;
            if v <= 0.0 {
                return Err(Error::data("<scaler>", "training split has zero variance"));
            }
            Ok(Scaler::Global {
                mean: m,
                std: v.sqrt(),
            })
        }
    }

    pub fn normalize(&self, value: f64, node: usize) -> f64 {
        match self {
            Scaler::Global { mean, std } => (value - mean) / std,
            Scaler::PerNode { mean, std } => (value - mean[node]) / std[node],
        }
    }

    pub fn denormalize(&self, value: f64, node: usize) -> f64 {
        match self {
            Scaler::Global { mean, std } => value * std + mean,
            Scaler::PerNode { mean, std } => value * std[node] + mean[node],
        }
    }
}

/// One training sample: normalized inputs, original-scale targets.
#[derive(Debug, Clone)]
pub struct ForecastWindow {
    /// `[T_in, N, 1]`, normalized.
    pub x: Tensor,
    /// `[T_out, N]`, original scale.
    pub y: Tensor,
}

// ── series file format ─────────────────────────────────────────────────
//
// Line 1: "rows cols". Each following line: one time step, whitespace- or
// comma-delimited. Empty cells (comma form) and na/nan tokens are missing
// values. Finite values are written in shortest round-trip form, so
// write-then-read reproduces the exact bits.

pub fn save_series(path: &Path, series: &RawSeries) -> Result<()> {
    let t = &series.values;
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = String::with_capacity(rows * cols * 8);
    out.push_str(&format!("{rows} {cols}\n"));
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(' ');
            }
            let v = t.at2(r, c);
            if v.is_nan() {
                out.push_str("na");
            } else {
                out.push_str(&format_f64(v));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_series(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    parse_series(&text, &path.display().to_string())
}

pub fn parse_series(text: &str, origin: &str) -> Result<Tensor> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(origin, "empty file"))?;
    let mut hp = header.split_whitespace();
    let rows: usize = hp
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data(origin, "line 1: expected `rows cols` header"))?;
    let cols: usize = hp
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data(origin, "line 1: expected `rows cols` header"))?;
    if cols == 0 || rows == 0 {
        return Err(Error::data(origin, "header declares an empty matrix"));
    }

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0usize;
    for (lineno, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let cells: Vec<&str> = if trimmed.contains(',') {
            trimmed.split(',').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        if cells.len() != cols {
            return Err(Error::data(
                origin,
                format!(
                    "line {}: expected {cols} cells, found {}",
                    lineno + 1,
                    cells.len()
                ),
            ));
        }
        for cell in cells {
            data.push(parse_cell(cell));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::data(
            origin,
            format!(
                "header declares {rows} rows but file has {seen} (line {})",
                seen + 1
            ),
        ));
    }
    Ok(Tensor::new(vec![rows, cols], data))
}

fn parse_cell(cell: &str) -> f64 {
    if cell.is_empty() {
        return f64::NAN;
    }
    match cell.to_ascii_lowercase().as_str() {
        "na" | "nan" => f64::NAN,
        _ => cell.parse().unwrap_or(f64::NAN),
    }
}

// ── manifest ───────────────────────────────────────────────────────────

/// Dataset pointer: series path (relative paths resolve against the manifest
/// location), kind, and sampling interval.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub kind: SeriesKind,
    pub interval_minutes: u32,
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = format!(
        "path={}\nkind={}\ninterval={}\n",
        manifest.path.display(),
        manifest.kind.as_str(),
        manifest.interval_minutes
    );
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut series_path: Option<PathBuf> = None;
    let mut kind = SeriesKind::Flow;
    let mut interval = 5u32;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::data(
                &origin,
                format!("line {}: expected key=value", lineno + 1),
            ));
        };
        match key.trim() {
            "path" => series_path = Some(PathBuf::from(value.trim())),
            "kind" => kind = SeriesKind::parse(value.trim())?,
            "interval" => {
                interval = value.trim().parse().map_err(|_| {
                    Error::data(&origin, format!("line {}: bad interval", lineno + 1))
                })?;
            }
            other => {
                return Err(Error::data(
                    &origin,
                    format!("unknown manifest key `{other}`"),
                ));
            }
        }
    }
    let mut series_path = series_path.ok_or_else(|| Error::data(&origin, "missing `path` key"))?;
    if series_path.is_relative() {
        if let Some(dir) = path.parent() {
            series_path = dir.join(series_path);
        }
    }
    Ok(Manifest {
        path: series_path,
        kind,
        interval_minutes: interval,
    })
}

/// Load the series a manifest points to.
pub fn load_from_manifest(path: &Path) -> Result<RawSeries> {
    let manifest = load_manifest(path)?;
    let values = load_series(&manifest.path)?;
    Ok(RawSeries {
        values,
        interval_minutes: manifest.interval_minutes,
        kind: manifest.kind,
    })
}

// ── repair, split, window ──────────────────────────────────────────────

/// Replace NaN sentinels per node column: interior runs linearly
/// interpolated between the nearest observed neighbors, leading/trailing
/// runs filled with the nearest observed value.
pub fn interpolate_missing(raw: &RawSeries) -> Result<RawSeries> {
    let (steps, nodes) = (raw.steps(), raw.nodes());
    let mut data = raw.values.data().to_vec();
    for n in 0..nodes {
        let observed: Vec<usize> = (0..steps)
            .filter(|&t| !data[t * nodes + n].is_nan())
            .collect();
        if observed.is_empty() {
            return Err(Error::data(
                "<series>",
                format!("node {n} has no observed values; cannot interpolate"),
            ));
        }
        // leading run
        let first = observed[0];
        for t in 0..first {
            data[t * nodes + n] = data[first * nodes + n];
        }
        // trailing run
        let last = *observed.last().unwrap();
        for t in last + 1..steps {
            data[t * nodes + n] = data[last * nodes + n];
        }
        // interior runs
        for pair in observed.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            if hi > lo + 1 {
                let a = data[lo * nodes + n];
                let b = data[hi * nodes + n];
                let span = (hi - lo) as f64;
                for t in lo + 1..hi {
                    let frac = (t - lo) as f64 / span;
                    data[t * nodes + n] = a + (b - a) * frac;
                }
            }
        }
    }
    Ok(RawSeries {
        values: Tensor::new(vec![steps, nodes], data),
        interval_minutes: raw.interval_minutes,
        kind: raw.kind,
    })
}

/// Chronological split. Train gets `floor(train_ratio * T)` steps,
/// validation `floor(val_ratio * T)`, test the remainder.
pub fn split(
    raw: &RawSeries,
    train_ratio: f64,
    val_ratio: f64,
    min_len: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let steps = raw.steps();
    let train_len = (train_ratio * steps as f64).floor() as usize;
    let val_len = (val_ratio * steps as f64).floor() as usize;
    let test_len = steps - train_len - val_len;
    for (name, len) in [("train", train_len), ("val", val_len), ("test", test_len)] {
        if len < min_len {
            return Err(Error::data(
                "<series>",
                format!("{name} split has {len} steps, need at least {min_len}"),
            ));
        }
    }
    let segment = |start: usize, len: usize| -> RawSeries {
        let nodes = raw.nodes();
        let data = raw.values.data()[start * nodes..(start + len) * nodes].to_vec();
        RawSeries {
            values: Tensor::new(vec![len, nodes], data),
            interval_minutes: raw.interval_minutes,
            kind: raw.kind,
        }
    };
    Ok((
        segment(0, train_len),
        segment(train_len, val_len),
        segment(train_len + val_len, test_len),
    ))
}

/// Slide a `T_in + T_out` window with stride 1 over one split. Inputs are
/// normalized with the provided scaler; targets stay in the original scale.
/// Windows never cross split boundaries.
pub fn windows(
    segment: &RawSeries,
    scaler: &Scaler,
    t_in: usize,
    t_out: usize,
) -> Vec<ForecastWindow> {
    let (steps, nodes) = (segment.steps(), segment.nodes());
    let span = t_in + t_out;
    if steps < span {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(steps - span + 1);
    for start in 0..=steps - span {
        let mut x = Vec::with_capacity(t_in * nodes);
        for t in start..start + t_in {
            for n in 0..nodes {
                x.push(scaler.normalize(segment.values.at2(t, n), n));
            }
        }
        let mut y = Vec::with_capacity(t_out * nodes);
        for t in start + t_in..start + span {
            for n in 0..nodes {
                y.push(segment.values.at2(t, n));
            }
        }
        out.push(ForecastWindow {
            x: Tensor::new(vec![t_in, nodes, 1], x),
            y: Tensor::new(vec![t_out, nodes], y),
        });
    }
    out
}

// ── synthetic series ───────────────────────────────────────────────────

/// Generator settings for node-heterogeneous synthetic traffic.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// Gaussian noise standard deviation, in value units.
    pub noise: f64,
    /// Strength of the contribution of node n+1's signal to node n.
    pub coupling: f64,
    /// 1 = single daily harmonic, 2 = adds a half-day harmonic.
    pub harmonics: u8,
    /// Maximum absolute linear drift over the full length, in value units.
    pub trend: f64,
}

impl SynthSpec {
    pub fn new(nodes: usize, steps: usize, seed: u64) -> Self {
        SynthSpec {
            nodes,
            steps,
            seed,
            noise: 5.0,
            coupling: 0.1,
            harmonics: 2,
            trend: 20.0,
        }
    }
}

/// Daily period in steps at 5-minute sampling.
pub const STEPS_PER_DAY: f64 = 288.0;

/// Per-node series: offset + daily/half-day harmonics + linear trend +
/// neighbor coupling + Gaussian noise. Amplitudes and phases are drawn per
/// node, so every node fluctuates in its own range with its own pattern.
pub fn synth_generate(spec: &SynthSpec) -> Result<RawSeries> {
    if spec.nodes == 0 || spec.steps == 0 {
        return Err(Error::Config(vec![
            "synthetic series needs nodes >= 1 and steps >= 1".into(),
        ]));
    }
    let mut r = rng::stream(spec.seed, "synth");
    struct NodeParams {
        base: f64,
        amp1: f64,
        phase1: f64,
        amp2: f64,
        phase2: f64,
        drift: f64,
    }
    let params: Vec<NodeParams> = (0..spec.nodes)
        .map(|_| NodeParams {
            base: rng::next_uniform(&mut r, 50.0, 300.0),
            amp1: rng::next_uniform(&mut r, 10.0, 100.0),
            phase1: rng::next_uniform(&mut r, 0.0, std::f64::consts::TAU),
            amp2: rng::next_uniform(&mut r, 0.1, 0.5),
            phase2: rng::next_uniform(&mut r, 0.0, std::f64::consts::TAU),
            drift: rng::next_uniform(&mut r, -1.0, 1.0),
        })
        .collect();

    let clean = |n: usize, t: usize| -> f64 {
        let p = &params[n];
        let w = std::f64::consts::TAU * t as f64 / STEPS_PER_DAY;
        let mut v = p.base + p.amp1 * (w + p.phase1).sin();
        if spec.harmonics >= 2 {
            v += p.amp1 * p.amp2 * (2.0 * w + p.phase2).sin();
        }
        v + spec.trend * p.drift * t as f64 / spec.steps as f64
    };

    let mut data = vec![0.0; spec.steps * spec.nodes];
    let mut noise_rng: ChaCha8Rng = rng::stream(spec.seed, "synth.noise");
    for t in 0..spec.steps {
        for n in 0..spec.nodes {
            let neighbor = (n + 1) % spec.nodes;
            let coupled = if spec.coupling != 0.0 && spec.nodes > 1 {
                spec.coupling * (clean(neighbor, t) - params[neighbor].base)
            } else {
                0.0
            };
            let noise = if spec.noise != 0.0 {
                spec.noise * rng::next_gaussian(&mut noise_rng)
            } else {
                0.0
            };
            data[t * spec.nodes + n] = clean(n, t) + coupled + noise;
        }
    }
    Ok(RawSeries {
        values: Tensor::new(vec![spec.steps, spec.nodes], data),
        interval_minutes: 5,
        kind: SeriesKind::Flow,
    })
}
