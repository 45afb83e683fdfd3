use super::param::{GradBuffer, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    /// `W x` with `W` a parameter matrix.
    MatVec(ParamId, NodeId),
    /// One row of a parameter matrix.
    Gather(ParamId, usize),
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LogSoftmax(NodeId, Option<Vec<bool>>),
    LogSumExp(NodeId),
    Slice(NodeId, usize),
    Concat(Vec<NodeId>),
    Pick(NodeId, usize),
    Dot(NodeId, NodeId),
    Entropy(NodeId),
    Gmm(Box<GmmSpec>),
}

#[derive(Debug, Clone)]
struct GmmSpec {
    logits: NodeId,
    means: NodeId,
    targets: Vec<f64>,
    dim: usize,
    sigma: f64,
    /// Per-target component responsibilities, cached for backward.
    resp: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// A recorded computation over one [`ParamStore`].
///
/// Operations never fail eagerly. A shape mismatch or a non-finite result
/// is recorded as the graph's first fault and reported by [`Graph::check`]
/// and [`Graph::backward`].
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    fault: Option<Error>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// First recorded fault, if any.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(Error::Shape(s)) => Err(Error::Shape(s.clone())),
            Some(Error::NonFinite { node, what }) => Err(Error::NonFinite {
                node: *node,
                what: what.clone(),
            }),
            Some(e) => Err(Error::InvalidArgument(e.to_string())),
        }
    }

    fn shape_fault(&mut self, msg: String) {
        if self.fault.is_none() {
            self.fault = Some(Error::Shape(msg));
        }
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        let id = self.nodes.len();
        if self.fault.is_none() {
            let masked = |i: usize| match &op {
                Op::LogSoftmax(_, Some(mask)) => !mask[i],
                _ => false,
            };
            if let Some(i) = value.iter().enumerate().position(|(i, v)| !v.is_finite() && !masked(i)) {
                self.fault = Some(Error::NonFinite {
                    node: id,
                    what: format!("{:?} produced {} at index {i}", op_name(&op), value[i]),
                });
            }
        }
        self.nodes.push(Node { op, value });
        NodeId(id)
    }

    fn same_len(&mut self, a: NodeId, b: NodeId, what: &str) -> usize {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la != lb {
            self.shape_fault(format!("{what}: lengths {la} and {lb}"));
        }
        la.min(lb)
    }

    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.input(vec![0.0; len])
    }

    /// The whole block as a vector.
    pub fn param(&mut self, p: ParamId) -> NodeId {
        let v = self.store.get(p).values.clone();
        self.push(Op::Param(p), v)
    }

    pub fn matvec(&mut self, w: ParamId, x: NodeId) -> NodeId {
        let b = self.store.get(w);
        let xv = &self.nodes[x.0].value;
        if xv.len() != b.cols {
            let msg = format!("matvec `{}`: {}x{} times {}", b.name, b.rows, b.cols, xv.len());
            self.shape_fault(msg);
            let v = vec![f64::NAN; b.rows];
            return self.push(Op::MatVec(w, x), v);
        }
        let mut out = vec![0.0; b.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &b.values[r * b.cols..(r + 1) * b.cols];
            *o = row.iter().zip(xv).map(|(a, c)| a * c).sum();
        }
        self.push(Op::MatVec(w, x), out)
    }

    pub fn gather(&mut self, w: ParamId, row: usize) -> NodeId {
        let b = self.store.get(w);
        if row >= b.rows {
            let msg = format!("gather `{}`: row {row} of {}", b.name, b.rows);
            self.shape_fault(msg);
            let v = vec![f64::NAN; b.cols];
            return self.push(Op::Gather(w, 0), v);
        }
        let v = b.values[row * b.cols..(row + 1) * b.cols].to_vec();
        self.push(Op::Gather(w, row), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.same_len(a, b, "add");
        let v = (0..n).map(|i| self.nodes[a.0].value[i] + self.nodes[b.0].value[i]).collect();
        self.push(Op::Add(a, b), v)
    }

    /// Elementwise sum of equally sized nodes.
    pub fn add_n(&mut self, xs: &[NodeId]) -> NodeId {
        let n = xs.first().map_or(0, |x| self.nodes[x.0].value.len());
        let mut v = vec![0.0; n];
        for &x in xs {
            if self.nodes[x.0].value.len() != n {
                self.shape_fault(format!("add_n: length {} vs {n}", self.nodes[x.0].value.len()));
                continue;
            }
            for (o, a) in v.iter_mut().zip(&self.nodes[x.0].value) {
                *o += a;
            }
        }
        self.push(Op::AddN(xs.to_vec()), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.same_len(a, b, "sub");
        let v = (0..n).map(|i| self.nodes[a.0].value[i] - self.nodes[b.0].value[i]).collect();
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.same_len(a, b, "mul");
        let v = (0..n).map(|i| self.nodes[a.0].value[i] * self.nodes[b.0].value[i]).collect();
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), v)
    }

    /// `ln(max(x, PROB_FLOOR))`; the gradient is zero below the floor.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .iter()
            .map(|x| x.max(super::PROB_FLOOR).ln())
            .collect();
        self.push(Op::Log(a), v)
    }

    /// Log-probabilities of a softmax, restricted to `mask` when given.
    /// Masked entries are `-inf`.
    pub fn log_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> NodeId {
        let n = self.nodes[a.0].value.len();
        if let Some(m) = mask {
            if m.len() != n {
                let msg = format!("log_softmax mask {} for {} logits", m.len(), n);
                self.shape_fault(msg);
                let v = vec![f64::NAN; n];
                return self.push(Op::LogSoftmax(a, None), v);
            }
            if !m.iter().any(|&l| l) {
                self.shape_fault("log_softmax with an empty mask".into());
            }
        }
        let x = &self.nodes[a.0].value;
        let legal = |i: usize| mask.map_or(true, |m| m[i]);
        let lse = log_sum_exp((0..x.len()).filter(|&i| legal(i)).map(|i| x[i]));
        let v = (0..x.len())
            .map(|i| if legal(i) { x[i] - lse } else { f64::NEG_INFINITY })
            .collect();
        self.push(Op::LogSoftmax(a, mask.map(<[bool]>::to_vec)), v)
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = log_sum_exp(self.nodes[a.0].value.iter().copied());
        self.push(Op::LogSumExp(a), vec![v])
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = &self.nodes[a.0].value;
        if start + len > x.len() {
            let msg = format!("slice {start}..{} of {}", start + len, x.len());
            self.shape_fault(msg);
            return self.push(Op::Slice(a, 0), vec![f64::NAN; len]);
        }
        let v = x[start..start + len].to_vec();
        self.push(Op::Slice(a, start), v)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let v = xs.iter().flat_map(|x| self.nodes[x.0].value.iter().copied()).collect();
        self.push(Op::Concat(xs.to_vec()), v)
    }

    /// Element `i` as a scalar node.
    pub fn pick(&mut self, a: NodeId, i: usize) -> NodeId {
        match self.nodes[a.0].value.get(i) {
            Some(&v) => self.push(Op::Pick(a, i), vec![v]),
            None => {
                let msg = format!("pick {i} of {}", self.nodes[a.0].value.len());
                self.shape_fault(msg);
                self.push(Op::Pick(a, 0), vec![f64::NAN])
            }
        }
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.same_len(a, b, "dot");
        let v = (0..n).map(|i| self.nodes[a.0].value[i] * self.nodes[b.0].value[i]).sum();
        self.push(Op::Dot(a, b), vec![v])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let ones = self.input(vec![1.0; n]);
        self.dot(a, ones)
    }

    /// Entropy of a distribution given as log-probabilities (`-inf` entries
    /// are treated as zero probability).
    pub fn entropy(&mut self, log_p: NodeId) -> NodeId {
        let h = -self.nodes[log_p.0]
            .value
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>();
        self.push(Op::Entropy(log_p), vec![h])
    }

    /// Sum over `targets` of the log-density of an isotropic Gaussian
    /// mixture with component logits `logits` (n) and means `means` (n*dim),
    /// shared standard deviation `sigma`. `targets` holds `k*dim` values.
    pub fn gmm_log_density(
        &mut self,
        logits: NodeId,
        means: NodeId,
        targets: Vec<f64>,
        dim: usize,
        sigma: f64,
    ) -> NodeId {
        let w = self.nodes[logits.0].value.clone();
        let mu = &self.nodes[means.0].value;
        let n = w.len();
        if dim == 0 || mu.len() != n * dim || targets.len() % dim != 0 || !(sigma > 0.0) {
            let msg = format!(
                "gmm: {n} logits, {} means, {} targets, dim {dim}, sigma {sigma}",
                mu.len(),
                targets.len()
            );
            self.shape_fault(msg);
            let spec = GmmSpec { logits, means, targets, dim, sigma, resp: Vec::new() };
            return self.push(Op::Gmm(Box::new(spec)), vec![f64::NAN]);
        }
        let lse_w = log_sum_exp(w.iter().copied());
        let norm = -(dim as f64) * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let k = targets.len() / dim;
        let mut resp = vec![0.0; k * n];
        let mut comp = vec![0.0; n];
        let mut total = 0.0;
        for t in 0..k {
            let x = &targets[t * dim..(t + 1) * dim];
            for i in 0..n {
                let d2: f64 = (0..dim).map(|j| (x[j] - mu[i * dim + j]).powi(2)).sum();
                comp[i] = w[i] - lse_w - d2 * inv2s2;
            }
            let l = log_sum_exp(comp.iter().copied());
            for i in 0..n {
                resp[t * n + i] = (comp[i] - l).exp();
            }
            total += l + norm;
        }
        let spec = GmmSpec { logits, means, targets, dim, sigma, resp };
        self.push(Op::Gmm(Box::new(spec)), vec![total])
    }

    /// Backpropagates `seed * d(loss)` into `grads`.
    pub fn backward(&self, loss: NodeId, seed: f64, grads: &mut GradBuffer) -> Result<()> {
        self.check()?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, has {} entries",
                self.nodes[loss.0].value.len()
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => add_into(&mut grads.grads[p.0], &gi),
                Op::MatVec(p, x) => {
                    let b = self.store.get(*p);
                    let xv = &self.nodes[x.0].value;
                    let gw = &mut grads.grads[p.0];
                    let mut gx = vec![0.0; b.cols];
                    for (r, &gr) in gi.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &b.values[r * b.cols..(r + 1) * b.cols];
                        let grow = &mut gw[r * b.cols..(r + 1) * b.cols];
                        for c in 0..b.cols {
                            grow[c] += gr * xv[c];
                            gx[c] += gr * row[c];
                        }
                    }
                    accumulate(&mut g, *x, &gx);
                }
                Op::Gather(p, row) => {
                    let cols = self.store.get(*p).cols;
                    add_into(&mut grads.grads[p.0][row * cols..(row + 1) * cols], &gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, &gi);
                    accumulate(&mut g, *b, &gi);
                }
                Op::AddN(xs) => {
                    for x in xs {
                        accumulate(&mut g, *x, &gi);
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, &gi);
                    let neg: Vec<f64> = gi.iter().map(|v| -v).collect();
                    accumulate(&mut g, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = gi.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = gi.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut g, *a, &ga);
                    accumulate(&mut g, *b, &gb);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = gi.iter().map(|x| x * k).collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = gi.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = gi.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = gi.iter().zip(&node.value).map(|(x, y)| x * y).collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga: Vec<f64> = gi
                        .iter()
                        .zip(av)
                        .map(|(x, &y)| if y > super::PROB_FLOOR { x / y } else { 0.0 })
                        .collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::LogSoftmax(a, _) => {
                    let total: f64 = gi
                        .iter()
                        .zip(&node.value)
                        .filter(|(_, l)| l.is_finite())
                        .map(|(x, _)| x)
                        .sum();
                    let ga: Vec<f64> = gi
                        .iter()
                        .zip(&node.value)
                        .map(|(x, l)| if l.is_finite() { x - l.exp() * total } else { 0.0 })
                        .collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::LogSumExp(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga: Vec<f64> = av.iter().map(|x| gi[0] * (x - node.value[0]).exp()).collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Slice(a, start) => {
                    let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                    ga[*start..start + gi.len()].copy_from_slice(&gi);
                    accumulate(&mut g, *a, &ga);
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let n = self.nodes[x.0].value.len();
                        let part = gi[off..off + n].to_vec();
                        accumulate(&mut g, *x, &part);
                        off += n;
                    }
                }
                Op::Pick(a, idx) => {
                    let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                    ga[*idx] = gi[0];
                    accumulate(&mut g, *a, &ga);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = bv.iter().map(|y| gi[0] * y).collect();
                    let gb: Vec<f64> = av.iter().map(|y| gi[0] * y).collect();
                    accumulate(&mut g, *a, &ga);
                    accumulate(&mut g, *b, &gb);
                }
                Op::Entropy(a) => {
                    let ga: Vec<f64> = self.nodes[a.0]
                        .value
                        .iter()
                        .map(|&l| if l.is_finite() { -gi[0] * l.exp() * (l + 1.0) } else { 0.0 })
                        .collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Gmm(spec) => {
                    let w = &self.nodes[spec.logits.0].value;
                    let mu = &self.nodes[spec.means.0].value;
                    let (n, dim) = (w.len(), spec.dim);
                    let k = spec.targets.len() / dim;
                    let lse_w = log_sum_exp(w.iter().copied());
                    let inv_s2 = 1.0 / (spec.sigma * spec.sigma);
                    let mut gw = vec![0.0; n];
                    let mut gmu = vec![0.0; n * dim];
                    for t in 0..k {
                        let x = &spec.targets[t * dim..(t + 1) * dim];
                        for i in 0..n {
                            let r = spec.resp[t * n + i];
                            gw[i] += gi[0] * (r - (w[i] - lse_w).exp());
                            for j in 0..dim {
                                gmu[i * dim + j] += gi[0] * r * (x[j] - mu[i * dim + j]) * inv_s2;
                            }
                        }
                    }
                    accumulate(&mut g, spec.logits, &gw);
                    accumulate(&mut g, spec.means, &gmu);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatVec(..) => "matvec",
        Op::Gather(..) => "gather",
        Op::Add(..) => "add",
        Op::AddN(_) => "add_n",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LogSumExp(_) => "log_sum_exp",
        Op::Slice(..) => "slice",
        Op::Concat(_) => "concat",
        Op::Pick(..) => "pick",
        Op::Dot(..) => "dot",
        Op::Entropy(_) => "entropy",
        Op::Gmm(_) => "gmm_log_density",
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(g: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut g[id.0] {
        Some(v) => add_into(v, delta),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `ln(sum(exp(x)))`; `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
