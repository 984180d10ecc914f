//! Recurrent encoder whose gate transforms are node-adaptive graph
//! convolutions: per-node weights are synthesized from the embedding matrix
//! and shared weight/bias pools, and the gated update runs over the learned
//! adjacency.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Tape handles for one gate's pools: weight `[C, D_in, D]`, bias `[C, D]`.
#[derive(Debug, Clone, Copy)]
pub struct GatePoolIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// The three gates of one recurrent layer.
#[derive(Debug, Clone, Copy)]
pub struct GruLayerIds {
    pub update: GatePoolIds,
    pub reset: GatePoolIds,
    pub candidate: GatePoolIds,
}

/// Per-node parameters extracted from a pool: theta `[N, D_in*D]` (row-major
/// over `(D_in, D)`) and omega `[N, D]`.
#[derive(Debug, Clone, Copy)]
pub struct NodeParamIds {
    pub theta: NodeId,
    pub omega: NodeId,
}

pub enum Activation {
    Sigmoid,
    Tanh,
    Identity,
}

/// theta[n] = sum_c E[n,c] W[c]; omega[n] = sum_c E[n,c] b[c].
pub fn node_params(
    tape: &mut Tape,
    embeddings: NodeId,
    pool: &GatePoolIds,
) -> Result<NodeParamIds> {
    let ws = tape.shape(pool.weight).to_vec();
    if ws.len() != 3 {
        return Err(Error::shape(
            "node_params",
            format!("weight pool rank {:?}", ws),
        ));
    }
    let (c, d_in, d_out) = (ws[0], ws[1], ws[2]);
    if tape.shape(embeddings)[1] != c || tape.shape(pool.bias) != [c, d_out] {
        return Err(Error::shape(
            "node_params",
            format!(
                "embeddings {:?}, weight pool {:?}, bias pool {:?}",
                tape.shape(embeddings),
                ws,
                tape.shape(pool.bias)
            ),
        ));
    }
    let w_flat = tape.reshape(pool.weight, vec![c, d_in * d_out])?;
    let theta = tape.matmul(embeddings, w_flat)?;
    let omega = tape.matmul(embeddings, pool.bias)?;
    Ok(NodeParamIds { theta, omega })
}

/// Node-adaptive graph convolution:
/// out[b,n] = act((A . X_cat)[b,n] . theta[n] + omega[n]).
pub fn napl_gcn(
    tape: &mut Tape,
    adjacency: NodeId,
    x_cat: NodeId,
    params: NodeParamIds,
    activation: Activation,
) -> Result<NodeId> {
    let mixed = tape.bmm_shared_a(adjacency, x_cat)?;
    let linear = tape.per_node_linear(mixed, params.theta, params.omega)?;
    match activation {
        Activation::Sigmoid => tape.sigmoid(linear),
        Activation::Tanh => tape.tanh(linear),
        Activation::Identity => Ok(linear),
    }
}

/// Node parameters of all three gates, extracted once per forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodeParams {
    pub update: NodeParamIds,
    pub reset: NodeParamIds,
    pub candidate: NodeParamIds,
}

pub fn layer_node_params(
    tape: &mut Tape,
    embeddings: NodeId,
    layer: &GruLayerIds,
) -> Result<LayerNodeParams> {
    Ok(LayerNodeParams {
        update: node_params(tape, embeddings, &layer.update)?,
        reset: node_params(tape, embeddings, &layer.reset)?,
        candidate: node_params(tape, embeddings, &layer.candidate)?,
    })
}

/// One gated update:
///   Z = sigmoid(gcn(A, [X_t, H_prev]))
///   R = sigmoid(gcn(A, [X_t, H_prev]))
///   Hhat = tanh(gcn(A, [X_t, R (.) H_prev]))
///   H_t = Z (.) H_prev + (1 - Z) (.) Hhat
fn gru_step_with(
    tape: &mut Tape,
    x_t: NodeId,
    h_prev: NodeId,
    adjacency: NodeId,
    gates: &LayerNodeParams,
) -> Result<NodeId> {
    let xh = tape.concat_last(&[x_t, h_prev])?;
    let z = napl_gcn(tape, adjacency, xh, gates.update, Activation::Sigmoid)?;
    let r = napl_gcn(tape, adjacency, xh, gates.reset, Activation::Sigmoid)?;
    let rh = tape.mul(r, h_prev)?;
    let xrh = tape.concat_last(&[x_t, rh])?;
    let h_hat = napl_gcn(tape, adjacency, xrh, gates.candidate, Activation::Tanh)?;
    let keep = tape.mul(z, h_prev)?;
    let gate_inv = tape.one_minus(z)?;
    let write = tape.mul(gate_inv, h_hat)?;
    tape.add(keep, write)
}

/// Standalone gated step; extracts node parameters from the pools first.
pub fn gru_step(
    tape: &mut Tape,
    x_t: NodeId,
    h_prev: NodeId,
    adjacency: NodeId,
    layer: &GruLayerIds,
    embeddings: NodeId,
) -> Result<NodeId> {
    let gates = layer_node_params(tape, embeddings, layer)?;
    gru_step_with(tape, x_t, h_prev, adjacency, &gates)
}

/// Hidden states of the unrolled encoder.
pub struct GcrnOutput {
    /// One `[B, N, D]` state per input step, in time order.
    pub h_seq: Vec<NodeId>,
    /// Alias of the final entry of `h_seq`.
    pub h_last: NodeId,
    /// Node parameters of the candidate gate of the last layer.
    pub theta_candidate: NodeParamIds,
    /// Node parameters of the update gate of the last layer.
    pub theta_update: NodeParamIds,
}

/// Unroll the recurrent cell over `x_steps`, sharing parameters across steps.
/// `H_0` is zero. With depth > 1 each extra layer consumes the previous
/// layer's hidden sequence as its input.
pub fn encode_sequence(
    tape: &mut Tape,
    x_steps: &[NodeId],
    adjacency: NodeId,
    embeddings: NodeId,
    layers: &[GruLayerIds],
) -> Result<GcrnOutput> {
    assert!(!x_steps.is_empty(), "need at least one input step");
    assert!(!layers.is_empty(), "need at least one recurrent layer");
    let batch = tape.shape(x_steps[0])[0];
    let n = tape.shape(x_steps[0])[1];
    let d = tape.shape(layers[0].update.bias)[1];

    let mut inputs: Vec<NodeId> = x_steps.to_vec();
    let mut h_seq: Vec<NodeId> = Vec::new();
    let mut last_gates = None;
    for layer in layers {
        let gates = layer_node_params(tape, embeddings, layer)?;
        let mut h = tape.input(Tensor::zeros(vec![batch, n, d]));
        h_seq = Vec::with_capacity(inputs.len());
        for &x_t in &inputs {
            h = gru_step_with(tape, x_t, h, adjacency, &gates)?;
            h_seq.push(h);
        }
        inputs = h_seq.clone();
        last_gates = Some(gates);
    }
    let gates = last_gates.unwrap();
    Ok(GcrnOutput {
        h_last: *h_seq.last().unwrap(),
        h_seq,
        theta_candidate: gates.candidate,
        theta_update: gates.update,
    })
}
