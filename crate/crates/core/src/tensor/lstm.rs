use super::graph::{Graph, NodeId};
use super::param::{ParamId, ParamStore};

/// Recurrent weights of one LSTM layer. The input projection is supplied by
/// the caller so one-hot inputs can use row gathers instead of a matmul.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub hidden: usize,
    /// `4H x H`, gate order input, forget, cell, output.
    pub w_h: ParamId,
    /// `1 x 4H`.
    pub bias: ParamId,
}

impl LstmParams {
    pub fn register(store: &mut ParamStore, prefix: &str, hidden: usize) -> Self {
        Self {
            hidden,
            w_h: store.add(format!("{prefix}.w_h"), 4 * hidden, hidden),
            bias: store.add(format!("{prefix}.bias"), 1, 4 * hidden),
        }
    }
}

/// One LSTM step: gates from `x_proj + W_h h + b`, returns `(h', c')`.
pub fn lstm_cell(g: &mut Graph<'_>, p: &LstmParams, x_proj: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
    let hd = p.hidden;
    let rec = g.matvec(p.w_h, h);
    let b = g.param(p.bias);
    let pre = g.add_n(&[x_proj, rec, b]);
    let i = g.slice(pre, 0, hd);
    let f = g.slice(pre, hd, hd);
    let z = g.slice(pre, 2 * hd, hd);
    let o = g.slice(pre, 3 * hd, hd);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let z = g.tanh(z);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c);
    let write = g.mul(i, z);
    let c_next = g.add(keep, write);
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed);
    (h_next, c_next)
}
