//! Hypernetwork head: maps node-adaptive parameters to per-node, per-horizon
//! convolutional filters, then convolves them with the final hidden state to
//! produce node-specific feature maps.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape};

/// F = reshape(theta_flat . U, [N, T, L_F]) kept flat as `[N, T*L_F]`.
///
/// `theta` is `[N, D_in*D]` (row-major over `(D_in, D)`), `u` is
/// `[D_in*D, T*L_F]`. No bias: the map introduces no parameters besides `u`.
pub fn generate_filters(tape: &mut Tape, theta: NodeId, u: NodeId) -> Result<NodeId> {
    let (st, su) = (tape.shape(theta).to_vec(), tape.shape(u).to_vec());
    if st.len() != 2 || su.len() != 2 || st[1] != su[0] {
        return Err(Error::shape(
            "generate_filters",
            format!("{:?} x {:?}", st, su),
        ));
    }
    tape.matmul(theta, u)
}

/// M[b,n,t] = conv1d_same(H_last[b,n], F[n,t]) for every node and horizon;
/// output `[B, N, T*D]` (row-major over `(T, D)`).
pub fn node_specific_maps(
    tape: &mut Tape,
    h_last: NodeId,
    filters: NodeId,
    t_out: usize,
    filter_len: usize,
) -> Result<NodeId> {
    tape.node_conv1d(h_last, filters, t_out, filter_len)
}
