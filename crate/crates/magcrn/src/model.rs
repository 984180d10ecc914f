//! Full forward map: adaptive adjacency -> recurrent encoding -> per-node
//! filter maps -> cross-attention re-weighting -> affine output head, plus
//! the ablation wirings and the end-to-end gradient checker.

use crate::agl;
use crate::config::{ModelConfig, NmplGate, Variant};
use crate::error::{Error, Result};
use crate::gcrn::{self, GatePoolIds, GruLayerIds};
use crate::nawg::{self, AttnLayerIds, Mode, NormIds, Wiring};
use crate::nmpl;
use crate::numerics::{NodeId, Tape, Tensor};
use crate::params::{self, ModelState};
use crate::rng;
use crate::trainer;

/// Tape handles of every registered parameter, in registration order.
pub struct BoundModel {
    pub embeddings: NodeId,
    pub gru: Vec<GruLayerIds>,
    pub hypernet: Option<NodeId>,
    pub attn: Vec<AttnLayerIds>,
    pub out_weight: NodeId,
    pub out_bias: NodeId,
    /// (name, node) pairs matching the parameter set's iteration order.
    pub param_ids: Vec<(String, NodeId)>,
}

/// Insert the current parameter values as tape leaves and resolve them into
/// the structural handles the forward pass needs.
pub fn bind(tape: &mut Tape, state: &ModelState, config: &ModelConfig) -> Result<BoundModel> {
    let mut param_ids = Vec::with_capacity(state.params.len());
    for (name, tensor) in state.params.iter() {
        let id = tape.param(tensor.clone());
        param_ids.push((name.to_string(), id));
    }
    let lookup = |name: String| -> Result<NodeId> {
        param_ids
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    };

    let mut gru = Vec::with_capacity(config.gru_depth);
    for l in 0..config.gru_depth {
        let gate = |g: &str| -> Result<GatePoolIds> {
            Ok(GatePoolIds {
                weight: lookup(format!("gru.l{l}.{g}.weight_pool"))?,
                bias: lookup(format!("gru.l{l}.{g}.bias_pool"))?,
            })
        };
        gru.push(GruLayerIds {
            update: gate("update")?,
            reset: gate("reset")?,
            candidate: gate("candidate")?,
        });
    }

    let hypernet = if config.variant.uses_hypernetwork() {
        Some(lookup("nmpl.u".to_string())?)
    } else {
        None
    };

    let mut attn = Vec::new();
    if config.variant.uses_attention() {
        for l in 0..config.attn_layers {
            attn.push(AttnLayerIds {
                wq: lookup(format!("nawg.l{l}.wq"))?,
                wk: lookup(format!("nawg.l{l}.wk"))?,
                wv: lookup(format!("nawg.l{l}.wv"))?,
                wo: if config.output_proj {
                    Some(lookup(format!("nawg.l{l}.wo"))?)
                } else {
                    None
                },
                ffn_w1: lookup(format!("nawg.l{l}.ffn.w1"))?,
                ffn_b1: lookup(format!("nawg.l{l}.ffn.b1"))?,
                ffn_w2: lookup(format!("nawg.l{l}.ffn.w2"))?,
                ffn_b2: lookup(format!("nawg.l{l}.ffn.b2"))?,
                norm1: NormIds {
                    gamma: lookup(format!("nawg.l{l}.norm1.gamma"))?,
                    beta: lookup(format!("nawg.l{l}.norm1.beta"))?,
                },
                norm2: NormIds {
                    gamma: lookup(format!("nawg.l{l}.norm2.gamma"))?,
                    beta: lookup(format!("nawg.l{l}.norm2.beta"))?,
                },
                site_prefix: format!("nawg.l{l}"),
            });
        }
    }

    Ok(BoundModel {
        embeddings: lookup("embeddings".to_string())?,
        gru,
        hypernet,
        attn,
        out_weight: lookup("output.weight".to_string())?,
        out_bias: lookup("output.bias".to_string())?,
        param_ids,
    })
}

/// Intermediate handles of one forward pass.
pub struct ForwardTrace {
    /// `[B, T_out, N]`.
    pub prediction: NodeId,
    pub adjacency: NodeId,
    /// Hidden states per step, each `[B, N, D]`.
    pub h_seq: Vec<NodeId>,
    pub h_last: NodeId,
    /// Node-specific feature maps `[B*N, T_out, D]` when the hypernetwork runs.
    pub feature_maps: Option<NodeId>,
    /// Attention weights per layer, per head, each `[B*N, T, T]`.
    pub attention: Vec<Vec<NodeId>>,
}

/// Run the configured assembly on a batch `x` of shape `[B, T_in, N, F_in]`.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundModel,
    x: &Tensor,
    config: &ModelConfig,
    mode: &mut Mode,
) -> Result<ForwardTrace> {
    let shape = x.shape();
    if shape.len() != 4
        || shape[1] != config.t_in
        || shape[2] != config.nodes
        || shape[3] != config.input_dim
    {
        return Err(Error::shape(
            "forward",
            format!(
                "input {:?}, expected [B, {}, {}, {}]",
                shape, config.t_in, config.nodes, config.input_dim
            ),
        ));
    }
    let (b, t_in, n, f) = (shape[0], shape[1], shape[2], shape[3]);
    let d = config.hidden_dim;

    // Per-step input slices [B, N, F].
    let mut steps = Vec::with_capacity(t_in);
    for t in 0..t_in {
        let mut data = Vec::with_capacity(b * n * f);
        for bi in 0..b {
            let base = ((bi * t_in) + t) * n * f;
            data.extend_from_slice(&x.data()[base..base + n * f]);
        }
        steps.push(tape.input(Tensor::new(vec![b, n, f], data)));
    }

    let adjacency = agl::adaptive_adjacency(tape, bound.embeddings, config.self_loops)?;
    let encoded = gcrn::encode_sequence(tape, &steps, adjacency, bound.embeddings, &bound.gru)?;

    // [T,B,N,D] -> [B,N,T,D] -> [B*N, T, D]
    let stacked = tape.stack0(&encoded.h_seq)?;
    let by_node = tape.permute(stacked, &[1, 2, 0, 3])?;
    let hidden = tape.reshape(by_node, vec![b * n, t_in, d])?;

    let feature_maps = match bound.hypernet {
        Some(u) => {
            let gate = match config.nmpl_gate {
                NmplGate::Candidate => encoded.theta_candidate,
                NmplGate::Update => encoded.theta_update,
            };
            let filters = nmpl::generate_filters(tape, gate.theta, u)?;
            let maps = nmpl::node_specific_maps(
                tape,
                encoded.h_last,
                filters,
                config.t_out,
                config.filter_len,
            )?;
            Some(tape.reshape(maps, vec![b * n, config.t_out, d])?)
        }
        None => None,
    };

    let (value_stream, attention) = match config.variant {
        Variant::NoNawg => (feature_maps.unwrap(), Vec::new()),
        Variant::Full | Variant::NoNmpl | Variant::Query | Variant::Key => {
            let stream0 = match config.variant {
                Variant::NoNmpl => hidden,
                _ => feature_maps.unwrap(),
            };
            let wiring = match config.variant {
                Variant::Query => Wiring::QueryFromStream,
                Variant::Key => Wiring::KeyFromStream,
                _ => Wiring::ValueFromStream,
            };
            let stack = nawg::nawg_stack(
                tape,
                hidden,
                stream0,
                &bound.attn,
                wiring,
                config.heads,
                config.norm,
                mode,
            )?;
            (stack.out, stack.weights)
        }
    };

    // Output head: affine map D -> 1 per (node, horizon).
    let flat_pred = if config.per_horizon_heads {
        let t_out = config.t_out;
        let v_flat = tape.reshape(value_stream, vec![b * n, t_out * d])?;
        let w_flat = tape.reshape(bound.out_weight, vec![t_out * d])?;
        let weighted = tape.mul_col(v_flat, w_flat)?;
        let grouped = tape.reshape(weighted, vec![b * n * t_out, d])?;
        let means = tape.row_mean(grouped)?;
        let sums = tape.affine(means, d as f64, 0.0)?;
        let by_horizon = tape.reshape(sums, vec![b * n, t_out])?;
        tape.add_col(by_horizon, bound.out_bias)?
    } else {
        let z = tape.matmul_rhs(value_stream, bound.out_weight)?;
        let zb = tape.add_col(z, bound.out_bias)?;
        tape.reshape(zb, vec![b * n, config.t_out])?
    };
    let by_sample = tape.reshape(flat_pred, vec![b, n, config.t_out])?;
    let prediction = tape.permute(by_sample, &[0, 2, 1])?;

    Ok(ForwardTrace {
        prediction,
        adjacency,
        h_seq: encoded.h_seq,
        h_last: encoded.h_last,
        feature_maps,
        attention,
    })
}

/// Total trainable scalar count for a configuration.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(params::init(config)?.params.count_params())
}

/// One row of the gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare reverse-mode gradients of the L1 training loss against central
/// finite differences for every parameter tensor of the configured variant.
///
/// `inject_fault` corrupts one reverse-mode gradient entry before the
/// comparison; the checker must then report a failure (negative control).
pub fn grad_check(
    config: &ModelConfig,
    batch: usize,
    step: f64,
    tolerance: f64,
    inject_fault: bool,
) -> Result<Vec<GradCheckRow>> {
    config.validate()?;
    let state = params::init(config)?;
    let mut r = rng::stream(config.seed, "gradcheck.data");
    let x = Tensor::uniform(
        vec![batch, config.t_in, config.nodes, config.input_dim],
        -1.0,
        1.0,
        &mut r,
    );
    let y = Tensor::uniform(vec![batch, config.t_out, config.nodes], -1.0, 1.0, &mut r);

    let names: Vec<String> = state.params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = state.params.iter().map(|(_, t)| t.clone()).collect();

    let run = |values: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let mut rebuilt = crate::params::ParameterSet::new();
        for (name, t) in names.iter().zip(values) {
            rebuilt.insert(name.clone(), t.clone());
        }
        let rebuilt_state = ModelState {
            params: rebuilt,
            norms: state.norms.clone(),
        };
        let bound = bind(&mut tape, &rebuilt_state, config)?;
        let mut observed = Vec::new();
        let mut mode = Mode::Train {
            observed: &mut observed,
        };
        let trace = forward(&mut tape, &bound, &x, config, &mut mode)?;
        let target = tape.input(y.clone());
        let loss = trainer::l1_loss(&mut tape, trace.prediction, target)?;
        let ids = bound.param_ids.iter().map(|(_, id)| *id).collect();
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = run(&tensors)?;
    let mut reverse = tape.gradients(loss, &ids)?;
    if inject_fault {
        reverse[0].data_mut()[0] += 1e-2;
    }

    let numeric = crate::numerics::finite_diff_gradient(
        |p| {
            let (tape, _, loss) = run(p)?;
            Ok(tape.value(loss).item())
        },
        &tensors,
        step,
    )?;

    Ok(names
        .into_iter()
        .zip(reverse.iter().zip(&numeric))
        .map(|(name, (rev, num))| {
            let err = crate::numerics::max_relative_error(rev, num);
            GradCheckRow {
                name,
                max_rel_err: err,
                pass: err < tolerance,
            }
        })
        .collect())
}
