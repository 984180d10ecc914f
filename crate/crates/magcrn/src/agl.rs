//! Adaptive graph learning: the adjacency matrix is derived from trainable
//! node embeddings instead of a pre-defined distance graph.

use crate::error::Result;
use crate::numerics::{NodeId, Tape, Tensor};

/// A = softmax_rows(relu(E E^T)), differentiable through `embeddings`.
///
/// With `self_loops` an identity matrix is added on top of the normalized
/// matrix; the default relies on the non-negative diagonal of relu(E E^T)
/// already contributing a self-loop before normalization.
pub fn adaptive_adjacency(tape: &mut Tape, embeddings: NodeId, self_loops: bool) -> Result<NodeId> {
    let n = tape.shape(embeddings)[0];
    let e_t = tape.permute(embeddings, &[1, 0])?;
    let gram = tape.matmul(embeddings, e_t)?;
    let pos = tape.relu(gram)?;
    let adj = tape.softmax_last(pos)?;
    if self_loops {
        let eye = tape.input(Tensor::from_fn(vec![n, n], |i| {
            if i / n == i % n {
                1.0
            } else {
                0.0
            }
        }));
        tape.add(adj, eye)
    } else {
        Ok(adj)
    }
}
