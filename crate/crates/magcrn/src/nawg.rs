//! Cross-attention re-weighting: attention weights derived from the full
//! hidden sequence are assigned to the node-specific feature maps, each node
//! attended independently, followed by feedforward, residual and
//! normalization sublayers. No positional encoding anywhere: order
//! information comes from the recurrent encoder.

use crate::config::NormKind;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::params::NormState;

/// Epsilon inside the normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

/// Scale/shift parameters of one normalization site.
#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Tape handles for one attention layer.
#[derive(Debug, Clone)]
pub struct AttnLayerIds {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    /// Output projection after head concatenation; absent when disabled.
    pub wo: Option<NodeId>,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub norm1: NormIds,
    pub norm2: NormIds,
    /// Dotted prefix of this layer's normalization sites.
    pub site_prefix: String,
}

/// Batch statistics observed at one normalization site during a training
/// pass; folded into the running averages after the step.
#[derive(Debug, Clone)]
pub struct NormObs {
    pub site: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Forward-pass mode: training normalizes with differentiable batch
/// statistics and reports them; evaluation uses frozen running averages.
pub enum Mode<'a> {
    Train {
        observed: &'a mut Vec<NormObs>,
    },
    Eval {
        norms: &'a NormState,
        used_identity_stats: &'a mut bool,
    },
}

/// Normalize `x` (shape `[.., D]`) at the given site.
pub fn normalize(
    tape: &mut Tape,
    x: NodeId,
    ids: NormIds,
    kind: NormKind,
    mode: &mut Mode,
    site: &str,
) -> Result<NodeId> {
    match kind {
        NormKind::Identity => Ok(x),
        NormKind::Layer => {
            let mu = tape.row_mean(x)?;
            let centered = tape.sub_row(x, mu)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.row_mean(sq)?;
            let var_eps = tape.affine(var, 1.0, NORM_EPS)?;
            let inv_std = tape.rsqrt(var_eps)?;
            let normed = tape.mul_row(centered, inv_std)?;
            let scaled = tape.mul_col(normed, ids.gamma)?;
            tape.add_col(scaled, ids.beta)
        }
        NormKind::Batch => match mode {
            Mode::Train { observed } => {
                let mu = tape.col_mean(x)?;
                let centered = tape.sub_col(x, mu)?;
                let sq = tape.mul(centered, centered)?;
                let var = tape.col_mean(sq)?;
                observed.push(NormObs {
                    site: site.to_string(),
                    mean: tape.value(mu).clone(),
                    var: tape.value(var).clone(),
                });
                let var_eps = tape.affine(var, 1.0, NORM_EPS)?;
                let inv_std = tape.rsqrt(var_eps)?;
                let normed = tape.mul_col(centered, inv_std)?;
                let scaled = tape.mul_col(normed, ids.gamma)?;
                tape.add_col(scaled, ids.beta)
            }
            Mode::Eval {
                norms,
                used_identity_stats,
            } => {
                let d = *tape.shape(x).last().unwrap();
                let (mean, var) = match norms.site(site) {
                    Some(s) if s.initialized => (s.mean.clone(), s.var.clone()),
                    _ => {
                        **used_identity_stats = true;
                        (Tensor::zeros(vec![d]), Tensor::full(vec![d], 1.0))
                    }
                };
                let inv = Tensor::new(
                    vec![d],
                    var.data()
                        .iter()
                        .map(|&v| 1.0 / (v + NORM_EPS).sqrt())
                        .collect(),
                );
                let mean_id = tape.input(mean);
                let inv_id = tape.input(inv);
                let centered = tape.sub_col(x, mean_id)?;
                let normed = tape.mul_col(centered, inv_id)?;
                let scaled = tape.mul_col(normed, ids.gamma)?;
                tape.add_col(scaled, ids.beta)
            }
        },
    }
}

/// Output of one attention application.
pub struct AttnOutput {
    pub out: NodeId,
    /// Per-head attention weights, each `[B*N, T, T]`; every row is a
    /// distribution over key positions.
    pub weights: Vec<NodeId>,
}

/// Multihead scaled dot-product attention over `[B*N, T, D]` streams.
/// Queries/keys/values may come from different streams; heads are slices of
/// the projected width.
pub fn cross_attention(
    tape: &mut Tape,
    q_src: NodeId,
    k_src: NodeId,
    v_src: NodeId,
    ids: &AttnLayerIds,
    heads: usize,
) -> Result<AttnOutput> {
    let d = *tape.shape(q_src).last().unwrap();
    if d % heads != 0 {
        return Err(Error::shape(
            "cross_attention",
            format!("{d} not divisible by {heads} heads"),
        ));
    }
    let dk = d / heads;
    let q = tape.matmul_rhs(q_src, ids.wq)?;
    let k = tape.matmul_rhs(k_src, ids.wk)?;
    let v = tape.matmul_rhs(v_src, ids.wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_last(q, h * dk, dk)?;
        let kh = tape.slice_last(k, h * dk, dk)?;
        let vh = tape.slice_last(v, h * dk, dk)?;
        let scores = tape.bmm_nt(qh, kh)?;
        let scaled = tape.affine(scores, scale, 0.0)?;
        let attn = tape.softmax_last(scaled)?;
        weights.push(attn);
        head_outs.push(tape.bmm(attn, vh)?);
    }
    let concat = tape.concat_last(&head_outs)?;
    let out = match ids.wo {
        Some(wo) => tape.matmul_rhs(concat, wo)?,
        None => concat,
    };
    Ok(AttnOutput { out, weights })
}

/// Residual + normalization around the attention output, then a two-layer
/// ReLU feedforward with its own residual + normalization:
///   r1 = norm(attended + value_input); r2 = norm(r1 + FFN(r1)).
pub fn ffn_residual_norm(
    tape: &mut Tape,
    attended: NodeId,
    value_input: NodeId,
    ids: &AttnLayerIds,
    kind: NormKind,
    mode: &mut Mode,
) -> Result<NodeId> {
    let r = tape.add(attended, value_input)?;
    let n1 = normalize(
        tape,
        r,
        ids.norm1,
        kind,
        mode,
        &format!("{}.norm1", ids.site_prefix),
    )?;
    let f = tape.matmul_rhs(n1, ids.ffn_w1)?;
    let f = tape.add_col(f, ids.ffn_b1)?;
    let f = tape.relu(f)?;
    let f = tape.matmul_rhs(f, ids.ffn_w2)?;
    let f = tape.add_col(f, ids.ffn_b2)?;
    let r2 = tape.add(n1, f)?;
    normalize(
        tape,
        r2,
        ids.norm2,
        kind,
        mode,
        &format!("{}.norm2", ids.site_prefix),
    )
}

/// Which stream the hypernetwork-derived features feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wiring {
    /// Default: feature maps are the values, hidden sequence is queries/keys.
    ValueFromStream,
    /// Feature maps are the queries; hidden sequence supplies keys and values.
    QueryFromStream,
    /// Feature maps are the keys; hidden sequence supplies queries and values.
    KeyFromStream,
}

pub struct StackOutput {
    pub out: NodeId,
    /// Attention weights per layer, per head.
    pub weights: Vec<Vec<NodeId>>,
}

/// Stack of attention layers. Layer 0 consumes `stream0` on the wired path;
/// deeper layers consume the previous layer's output there. The residual of
/// each layer adds the value-path input.
#[allow(clippy::too_many_arguments)]
pub fn nawg_stack(
    tape: &mut Tape,
    hidden: NodeId,
    stream0: NodeId,
    layers: &[AttnLayerIds],
    wiring: Wiring,
    heads: usize,
    kind: NormKind,
    mode: &mut Mode,
) -> Result<StackOutput> {
    assert!(
        !layers.is_empty(),
        "attention stack needs at least one layer"
    );
    let mut stream = stream0;
    let mut weights = Vec::with_capacity(layers.len());
    let mut out = stream0;
    for ids in layers {
        let (q_src, k_src, v_src) = match wiring {
            Wiring::ValueFromStream => (hidden, hidden, stream),
            Wiring::QueryFromStream => (stream, hidden, hidden),
            Wiring::KeyFromStream => (hidden, stream, hidden),
        };
        let attn = cross_attention(tape, q_src, k_src, v_src, ids, heads)?;
        out = ffn_residual_norm(tape, attn.out, v_src, ids, kind, mode)?;
        weights.push(attn.weights);
        stream = out;
    }
    Ok(StackOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_relative_error, DEFAULT_STEP};
    use crate::rng;

    struct LayerFixture {
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Option<Tensor>,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        gamma: Tensor,
        beta: Tensor,
    }

    impl LayerFixture {
        fn random(d: usize, seed: u64, with_wo: bool) -> Self {
            let mut r = rng::stream(seed, "nawg-fixture");
            LayerFixture {
                wq: Tensor::uniform(vec![d, d], -0.5, 0.5, &mut r),
                wk: Tensor::uniform(vec![d, d], -0.5, 0.5, &mut r),
                wv: Tensor::uniform(vec![d, d], -0.5, 0.5, &mut r),
                wo: with_wo.then(|| Tensor::uniform(vec![d, d], -0.5, 0.5, &mut r)),
                w1: Tensor::uniform(vec![d, d], -0.5, 0.5, &mut r),
                b1: Tensor::uniform(vec![d], -0.1, 0.1, &mut r),
                w2: Tensor::uniform(vec![d, d], -0.5, 0.5, &mut r),
                b2: Tensor::uniform(vec![d], -0.1, 0.1, &mut r),
                gamma: Tensor::full(vec![d], 1.0),
                beta: Tensor::zeros(vec![d]),
            }
        }

        fn zero_ffn(mut self) -> Self {
            let d = self.w1.shape()[0];
            self.w1 = Tensor::zeros(vec![d, d]);
            self.b1 = Tensor::zeros(vec![d]);
            self.w2 = Tensor::zeros(vec![d, d]);
            self.b2 = Tensor::zeros(vec![d]);
            self
        }

        fn bind(&self, tape: &mut Tape, prefix: &str) -> AttnLayerIds {
            AttnLayerIds {
                wq: tape.param(self.wq.clone()),
                wk: tape.param(self.wk.clone()),
                wv: tape.param(self.wv.clone()),
                wo: self.wo.as_ref().map(|w| tape.param(w.clone())),
                ffn_w1: tape.param(self.w1.clone()),
                ffn_b1: tape.param(self.b1.clone()),
                ffn_w2: tape.param(self.w2.clone()),
                ffn_b2: tape.param(self.b2.clone()),
                norm1: NormIds {
                    gamma: tape.param(self.gamma.clone()),
                    beta: tape.param(self.beta.clone()),
                },
                norm2: NormIds {
                    gamma: tape.param(self.gamma.clone()),
                    beta: tape.param(self.beta.clone()),
                },
                site_prefix: prefix.to_string(),
            }
        }
    }

    #[test]
    fn single_position_attention_is_the_identity_weight() {
        let d = 4;
        let fx = LayerFixture::random(d, 70, true);
        let mut tape = Tape::new();
        let ids = fx.bind(&mut tape, "t");
        let mut r = rng::stream(71, "t1");
        let h = tape.input(Tensor::uniform(vec![3, 1, d], -1.0, 1.0, &mut r));
        let m_t = Tensor::uniform(vec![3, 1, d], -1.0, 1.0, &mut r);
        let m = tape.input(m_t.clone());
        let out = cross_attention(&mut tape, h, h, m, &ids, 2).unwrap();
        for w in &out.weights {
            assert!(tape.value(*w).data().iter().all(|&v| v == 1.0));
        }
        // output = (M Wv) Wo
        let mut want = Tensor::zeros(vec![3, 1, d]);
        for b in 0..3 {
            for j in 0..d {
                let mut v = 0.0;
                for i in 0..d {
                    v += m_t.at3(b, 0, i) * fx.wv.at2(i, j);
                }
                want.data_mut()[b * d + j] = v;
            }
        }
        let mut projected = Tensor::zeros(vec![3, 1, d]);
        for b in 0..3 {
            for j in 0..d {
                let mut v = 0.0;
                for i in 0..d {
                    v += want.at3(b, 0, i) * fx.wo.as_ref().unwrap().at2(i, j);
                }
                projected.data_mut()[b * d + j] = v;
            }
        }
        assert!(tape.value(out.out).max_abs_diff(&projected) < 1e-12);
    }

    #[test]
    fn zero_projections_give_uniform_attention() {
        let (d, t, heads) = (4, 5, 2);
        let mut fx = LayerFixture::random(d, 72, false);
        fx.wq = Tensor::zeros(vec![d, d]);
        fx.wk = Tensor::zeros(vec![d, d]);
        let mut tape = Tape::new();
        let ids = fx.bind(&mut tape, "t");
        let mut r = rng::stream(73, "uniform");
        let h = tape.input(Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r));
        let m_t = Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r);
        let m = tape.input(m_t.clone());
        let out = cross_attention(&mut tape, h, h, m, &ids, heads).unwrap();
        for w in &out.weights {
            for &v in tape.value(*w).data() {
                assert!((v - 1.0 / t as f64).abs() < 1e-15);
            }
        }
        // each output row is the position-mean of V = M Wv
        for bn in 0..2 {
            for j in 0..d {
                let mut mean = 0.0;
                for s in 0..t {
                    let mut v = 0.0;
                    for i in 0..d {
                        v += m_t.at3(bn, s, i) * fx.wv.at2(i, j);
                    }
                    mean += v;
                }
                mean /= t as f64;
                for q in 0..t {
                    let got = tape.value(out.out).at3(bn, q, j);
                    assert!((got - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn multihead_matches_per_head_reference() {
        let (n, t, d, heads) = (2, 3, 4, 2);
        let dk = d / heads;
        let fx = LayerFixture::random(d, 74, false);
        let mut r = rng::stream(75, "mh-ref");
        let h_t = Tensor::uniform(vec![n, t, d], -1.0, 1.0, &mut r);
        let m_t = Tensor::uniform(vec![n, t, d], -1.0, 1.0, &mut r);

        let mut tape = Tape::new();
        let ids = fx.bind(&mut tape, "t");
        let h = tape.input(h_t.clone());
        let m = tape.input(m_t.clone());
        let out = cross_attention(&mut tape, h, h, m, &ids, heads).unwrap();

        // Scripted single-head attention per head slice.
        let project = |x: &Tensor, w: &Tensor, node: usize, pos: usize, j: usize| -> f64 {
            (0..d).map(|i| x.at3(node, pos, i) * w.at2(i, j)).sum()
        };
        for node in 0..n {
            for head in 0..heads {
                let mut attn = vec![vec![0.0; t]; t];
                for qpos in 0..t {
                    let mut row = vec![0.0; t];
                    for kpos in 0..t {
                        let mut dot = 0.0;
                        for j in head * dk..(head + 1) * dk {
                            dot += project(&h_t, &fx.wq, node, qpos, j)
                                * project(&h_t, &fx.wk, node, kpos, j);
                        }
                        row[kpos] = dot / (dk as f64).sqrt();
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (k, e) in exps.iter().enumerate() {
                        attn[qpos][k] = e / sum;
                    }
                }
                for qpos in 0..t {
                    for kpos in 0..t {
                        let got = tape.value(out.weights[head]).at3(node, qpos, kpos);
                        assert!((got - attn[qpos][kpos]).abs() < 1e-12);
                    }
                    for j in 0..dk {
                        let mut want = 0.0;
                        for kpos in 0..t {
                            want +=
                                attn[qpos][kpos] * project(&m_t, &fx.wv, node, kpos, head * dk + j);
                        }
                        let got = tape.value(out.out).at3(node, qpos, head * dk + j);
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut r = rng::stream(76, "rows");
        for trial in 0..100 {
            let fx = LayerFixture::random(4, 200 + trial, true);
            let mut tape = Tape::new();
            let ids = fx.bind(&mut tape, "t");
            let h = tape.input(Tensor::uniform(vec![3, 4, 4], -2.0, 2.0, &mut r));
            let m = tape.input(Tensor::uniform(vec![3, 4, 4], -2.0, 2.0, &mut r));
            let out = cross_attention(&mut tape, h, h, m, &ids, 2).unwrap();
            for w in &out.weights {
                for row in tape.value(*w).data().chunks(4) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn node_isolation_of_attention() {
        let (n, t, d) = (3, 3, 4);
        let fx = LayerFixture::random(d, 77, true);
        let mut r = rng::stream(78, "isolation");
        let h_t = Tensor::uniform(vec![n, t, d], -1.0, 1.0, &mut r);
        let m_t = Tensor::uniform(vec![n, t, d], -1.0, 1.0, &mut r);
        let run = |h: &Tensor, m: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let ids = fx.bind(&mut tape, "t");
            let hid = tape.input(h.clone());
            let mid = tape.input(m.clone());
            let out = cross_attention(&mut tape, hid, hid, mid, &ids, 2).unwrap();
            tape.value(out.out).clone()
        };
        let base = run(&h_t, &m_t);
        let mut h_mod = h_t.clone();
        let mut m_mod = m_t.clone();
        for i in 0..t * d {
            h_mod.data_mut()[2 * t * d + i] = 9.0; // clobber node 2
            m_mod.data_mut()[2 * t * d + i] = -9.0;
        }
        let out = run(&h_mod, &m_mod);
        for pos in 0..t {
            for j in 0..d {
                for node in 0..2 {
                    let a = base.at3(node, pos, j);
                    let b = out.at3(node, pos, j);
                    assert_eq!(a.to_bits(), b.to_bits(), "node {node} output moved");
                }
            }
        }
    }

    #[test]
    fn residual_only_when_ffn_zero_and_identity_norm() {
        let d = 4;
        let fx = LayerFixture::random(d, 79, false).zero_ffn();
        let mut tape = Tape::new();
        let ids = fx.bind(&mut tape, "t");
        let mut r = rng::stream(80, "residual");
        let attended_t = Tensor::uniform(vec![2, 3, d], -1.0, 1.0, &mut r);
        let value_t = Tensor::uniform(vec![2, 3, d], -1.0, 1.0, &mut r);
        let attended = tape.input(attended_t.clone());
        let value = tape.input(value_t.clone());
        let mut observed = Vec::new();
        let mut mode = Mode::Train {
            observed: &mut observed,
        };
        let out = ffn_residual_norm(
            &mut tape,
            attended,
            value,
            &ids,
            NormKind::Identity,
            &mut mode,
        )
        .unwrap();
        for i in 0..attended_t.numel() {
            let want = attended_t.data()[i] + value_t.data()[i];
            assert_eq!(tape.value(out).data()[i], want);
        }

        // attended = -value collapses to zero
        let neg = tape.affine(value, -1.0, 0.0).unwrap();
        let out2 =
            ffn_residual_norm(&mut tape, neg, value, &ids, NormKind::Identity, &mut mode).unwrap();
        assert!(tape.value(out2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_matches_explicit_statistics() {
        let (rows, d) = (6, 3);
        let mut r = rng::stream(81, "bn-ref");
        let x_t = Tensor::uniform(vec![rows, d], -2.0, 2.0, &mut r);
        let gamma_t = Tensor::uniform(vec![d], 0.5, 1.5, &mut r);
        let beta_t = Tensor::uniform(vec![d], -0.5, 0.5, &mut r);

        let mut tape = Tape::new();
        let ids = NormIds {
            gamma: tape.param(gamma_t.clone()),
            beta: tape.param(beta_t.clone()),
        };
        let x = tape.input(x_t.clone());
        let mut observed = Vec::new();
        let mut mode = Mode::Train {
            observed: &mut observed,
        };
        let y = normalize(&mut tape, x, ids, NormKind::Batch, &mut mode, "site").unwrap();

        for j in 0..d {
            let col: Vec<f64> = (0..rows).map(|i| x_t.at2(i, j)).collect();
            let mean: f64 = col.iter().sum::<f64>() / rows as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
            for i in 0..rows {
                let want = gamma_t.data()[j] * (x_t.at2(i, j) - mean) / (var + NORM_EPS).sqrt()
                    + beta_t.data()[j];
                let got = tape.value(y).at2(i, j);
                assert!((got - want).abs() < 1e-12);
            }
            assert!((observed[0].mean.data()[j] - mean).abs() < 1e-12);
            assert!((observed[0].var.data()[j] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_before_training_uses_identity_stats_and_flags() {
        let d = 3;
        let mut tape = Tape::new();
        let ids = NormIds {
            gamma: tape.param(Tensor::full(vec![d], 1.0)),
            beta: tape.param(Tensor::zeros(vec![d])),
        };
        let mut r = rng::stream(82, "bn-eval");
        let x_t = Tensor::uniform(vec![4, d], -1.0, 1.0, &mut r);
        let x = tape.input(x_t.clone());
        let norms = NormState::default();
        let mut flagged = false;
        let mut mode = Mode::Eval {
            norms: &norms,
            used_identity_stats: &mut flagged,
        };
        let y = normalize(&mut tape, x, ids, NormKind::Batch, &mut mode, "missing").unwrap();
        assert!(flagged, "identity-statistics fallback must be reported");
        for i in 0..x_t.numel() {
            let want = x_t.data()[i] / (1.0 + NORM_EPS).sqrt();
            assert!((tape.value(y).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn stack_second_layer_consumes_first_layer_output_as_values() {
        // Layer 2: uniform attention (Wq=Wk=0), identity-ish Wv/Wo, zero FFN,
        // identity norm -> out[t] = mean_s(prev[s]) + prev[t].
        let (t, d, heads) = (3, 4, 2);
        let fx1 = LayerFixture::random(d, 83, false).zero_ffn();
        let mut fx2 = LayerFixture::random(d, 84, false).zero_ffn();
        fx2.wq = Tensor::zeros(vec![d, d]);
        fx2.wk = Tensor::zeros(vec![d, d]);
        fx2.wv = Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });

        let mut tape = Tape::new();
        let l1 = fx1.bind(&mut tape, "l0");
        let l2 = fx2.bind(&mut tape, "l1");
        let mut r = rng::stream(85, "stack");
        let h = tape.input(Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r));
        let m = tape.input(Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r));
        let mut observed = Vec::new();
        let mut mode = Mode::Train {
            observed: &mut observed,
        };
        let stack = nawg_stack(
            &mut tape,
            h,
            m,
            &[l1.clone(), l2],
            Wiring::ValueFromStream,
            heads,
            NormKind::Identity,
            &mut mode,
        )
        .unwrap();

        // first layer alone
        let attn1 = cross_attention(&mut tape, h, h, m, &l1, heads).unwrap();
        let prev =
            ffn_residual_norm(&mut tape, attn1.out, m, &l1, NormKind::Identity, &mut mode).unwrap();
        let prev_v = tape.value(prev).clone();
        for bn in 0..2 {
            for j in 0..d {
                let mean: f64 = (0..t).map(|s| prev_v.at3(bn, s, j)).sum::<f64>() / t as f64;
                for q in 0..t {
                    let want = mean + prev_v.at3(bn, q, j);
                    let got = tape.value(stack.out).at3(bn, q, j);
                    assert!((got - want).abs() < 1e-12, "({bn},{q},{j})");
                }
            }
        }
    }

    #[test]
    fn single_layer_stack_is_attention_plus_sublayers() {
        let (t, d, heads) = (3, 4, 2);
        let fx = LayerFixture::random(d, 86, true);
        let mut tape = Tape::new();
        let ids = fx.bind(&mut tape, "l0");
        let mut r = rng::stream(87, "stack1");
        let h = tape.input(Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r));
        let m = tape.input(Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r));
        let mut obs1 = Vec::new();
        let mut mode = Mode::Train {
            observed: &mut obs1,
        };
        let stack = nawg_stack(
            &mut tape,
            h,
            m,
            std::slice::from_ref(&ids),
            Wiring::ValueFromStream,
            heads,
            NormKind::Batch,
            &mut mode,
        )
        .unwrap();
        let attn = cross_attention(&mut tape, h, h, m, &ids, heads).unwrap();
        let direct =
            ffn_residual_norm(&mut tape, attn.out, m, &ids, NormKind::Batch, &mut mode).unwrap();
        assert!(tape.value(stack.out).bits_eq(tape.value(direct)));
        assert_eq!(stack.weights.len(), 1);
        assert_eq!(stack.weights[0].len(), heads);
    }

    #[test]
    fn time_permutation_equivariance_without_positional_encoding() {
        // Nothing in the stack reads positions, so permuting the time axis
        // of both inputs permutes outputs identically. Softmax sums and
        // attention-weighted sums accumulate in permuted order, so equality
        // is up to rounding, not bitwise.
        let (t, d, heads) = (4, 4, 2);
        let fx = LayerFixture::random(d, 88, true);
        let mut r = rng::stream(89, "timeperm");
        let h_t = Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r);
        let m_t = Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r);
        let mut norms = NormState::default();
        for site in ["l0.norm1", "l0.norm2"] {
            norms.sites.push(crate::params::NormSite {
                name: site.to_string(),
                mean: Tensor::uniform(vec![d], -0.2, 0.2, &mut r),
                var: Tensor::uniform(vec![d], 0.5, 1.5, &mut r),
                initialized: true,
            });
        }
        let perm = [2_usize, 0, 3, 1];
        let permute_time = |x: &Tensor| {
            let mut out = x.clone();
            for bn in 0..2 {
                for (q, &p) in perm.iter().enumerate() {
                    for j in 0..d {
                        let v = x.at3(bn, p, j);
                        out.data_mut()[(bn * t + q) * d + j] = v;
                    }
                }
            }
            out
        };
        let run = |h: &Tensor, m: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let ids = fx.bind(&mut tape, "l0");
            let hid = tape.input(h.clone());
            let mid = tape.input(m.clone());
            let mut flagged = false;
            let mut mode = Mode::Eval {
                norms: &norms,
                used_identity_stats: &mut flagged,
            };
            let stack = nawg_stack(
                &mut tape,
                hid,
                mid,
                std::slice::from_ref(&ids),
                Wiring::ValueFromStream,
                heads,
                NormKind::Batch,
                &mut mode,
            )
            .unwrap();
            assert!(!flagged);
            tape.value(stack.out).clone()
        };
        let base = run(&h_t, &m_t);
        let out = run(&permute_time(&h_t), &permute_time(&m_t));
        let expected = permute_time(&base);
        let diff = out.max_abs_diff(&expected);
        assert!(diff < 1e-12, "max abs diff {diff}");
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let (t, d, heads) = (3, 4, 2);
        let fx = LayerFixture::random(d, 90, true);
        let mut r = rng::stream(91, "nawg-grad");
        let h_t = Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r);
        let m_t = Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r);
        let wsum = Tensor::uniform(vec![2, t, d], -1.0, 1.0, &mut r);

        let params = vec![
            fx.wq.clone(),
            fx.wk.clone(),
            fx.wv.clone(),
            fx.wo.clone().unwrap(),
            fx.w1.clone(),
            fx.b1.clone(),
            fx.w2.clone(),
            fx.b2.clone(),
            fx.gamma.clone(),
            fx.beta.clone(),
            fx.gamma.clone(),
            fx.beta.clone(),
        ];
        let run = |p: &[Tensor]| -> crate::error::Result<(Tape, Vec<NodeId>, NodeId)> {
            let mut tape = Tape::new();
            let ids = AttnLayerIds {
                wq: tape.param(p[0].clone()),
                wk: tape.param(p[1].clone()),
                wv: tape.param(p[2].clone()),
                wo: Some(tape.param(p[3].clone())),
                ffn_w1: tape.param(p[4].clone()),
                ffn_b1: tape.param(p[5].clone()),
                ffn_w2: tape.param(p[6].clone()),
                ffn_b2: tape.param(p[7].clone()),
                norm1: NormIds {
                    gamma: tape.param(p[8].clone()),
                    beta: tape.param(p[9].clone()),
                },
                norm2: NormIds {
                    gamma: tape.param(p[10].clone()),
                    beta: tape.param(p[11].clone()),
                },
                site_prefix: "l0".to_string(),
            };
            let param_ids = vec![
                ids.wq,
                ids.wk,
                ids.wv,
                ids.wo.unwrap(),
                ids.ffn_w1,
                ids.ffn_b1,
                ids.ffn_w2,
                ids.ffn_b2,
                ids.norm1.gamma,
                ids.norm1.beta,
                ids.norm2.gamma,
                ids.norm2.beta,
            ];
            let h = tape.input(h_t.clone());
            let m = tape.input(m_t.clone());
            let mut observed = Vec::new();
            let mut mode = Mode::Train {
                observed: &mut observed,
            };
            let stack = nawg_stack(
                &mut tape,
                h,
                m,
                std::slice::from_ref(&ids),
                Wiring::ValueFromStream,
                heads,
                NormKind::Batch,
                &mut mode,
            )?;
            let w = tape.input(wsum.clone());
            let weighted = tape.mul(stack.out, w)?;
            let loss = tape.sum_all(weighted)?;
            Ok((tape, param_ids, loss))
        };

        let (tape, ids, loss) = run(&params).unwrap();
        let grads = tape.gradients(loss, &ids).unwrap();
        let fd = finite_diff_gradient(
            |p| {
                let (tape, _, loss) = run(p)?;
                Ok(tape.value(loss).item())
            },
            &params,
            DEFAULT_STEP,
        )
        .unwrap();
        for (i, (g, f)) in grads.iter().zip(&fd).enumerate() {
            let err = max_relative_error(g, f);
            assert!(err < 1e-4, "param {i}: max rel err {err}");
        }
    }
}
