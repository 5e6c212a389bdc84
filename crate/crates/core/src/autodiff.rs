//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records a forward computation as an arena of nodes; each node
//! stores its value, an accumulated gradient of the same shape, and a
//! backward closure that maps the node's output adjoint to one gradient
//! contribution per parent. [`Graph::backward`] sweeps the arena in reverse
//! creation order (a reverse topological order, since parents always precede
//! children) and invokes every reachable node's rule exactly once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type BackwardRule = Box<dyn Fn(&Matrix, &Matrix, &[&Matrix]) -> Vec<Matrix>>;

struct Node {
    value: Matrix,
    grad: Matrix,
    parents: Vec<NodeId>,
    backward: Option<BackwardRule>,
}

/// Single-threaded computation graph. Values are immutable once recorded.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, value: Matrix, parents: Vec<NodeId>, backward: Option<BackwardRule>) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by graph op");
        let grad = value.zeros_like();
        self.nodes.push(Node {
            value,
            grad,
            parents,
            backward,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a constant or parameter value with no parents.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, vec![], None)
    }

    /// `a * b` with dA = G Bᵀ, dB = Aᵀ G.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rule: BackwardRule = Box::new(|g, _v, parents| {
            let da = g.matmul(&parents[1].transposed()).expect("matmul backward dA");
            let db = parents[0].transposed().matmul(g).expect("matmul backward dB");
            vec![da, db]
        });
        Ok(self.push(value, vec![a, b], Some(rule)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transposed();
        let rule: BackwardRule = Box::new(|g, _v, _p| vec![g.transposed()]);
        self.push(value, vec![a], Some(rule))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim {
                op: "add",
                lhs: self.value(a).shape(),
                rhs: self.value(b).shape(),
            });
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rule: BackwardRule = Box::new(|g, _v, _p| vec![g.clone(), g.clone()]);
        Ok(self.push(value, vec![a, b], Some(rule)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_assign(factor);
        let rule: BackwardRule = Box::new(move |g, _v, _p| {
            let mut da = g.clone();
            da.scale_assign(factor);
            vec![da]
        });
        self.push(value, vec![a], Some(rule))
    }

    /// Row-wise softmax of `scale * x` with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> NodeId {
        let input = self.value(x);
        let mut value = input.zeros_like();
        for r in 0..input.rows() {
            let row = input.row(r);
            let max = row
                .iter()
                .map(|&v| v * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v * scale - max).exp();
                value.set(r, c, e);
                sum += e;
            }
            for c in 0..input.cols() {
                value.set(r, c, value.get(r, c) / sum);
            }
        }
        // d x_rc = scale * s_rc * (g_rc - sum_k g_rk s_rk)
        let rule: BackwardRule = Box::new(move |g, v, _p| {
            let mut dx = v.zeros_like();
            for r in 0..v.rows() {
                let dot: f64 = g.row(r).iter().zip(v.row(r)).map(|(a, b)| a * b).sum();
                for c in 0..v.cols() {
                    dx.set(r, c, scale * v.get(r, c) * (g.get(r, c) - dot));
                }
            }
            vec![dx]
        });
        self.push(value, vec![x], Some(rule))
    }

    /// Per-row layer normalization with trainable gain and bias (both 1 x cols).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let d = self.value(x).cols();
        assert!(eps > 0.0, "layer_norm eps must be positive");
        assert_eq!(self.value(gain).shape(), (1, d), "layer_norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, d), "layer_norm bias shape");
        let input = self.value(x);
        let gain_v = self.value(gain);
        let bias_v = self.value(bias);
        let mut value = input.zeros_like();
        for r in 0..input.rows() {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (c, &x) in row.iter().enumerate() {
                let xhat = (x - mean) * inv_std;
                value.set(r, c, gain_v.get(0, c) * xhat + bias_v.get(0, c));
            }
        }
        let rule: BackwardRule = Box::new(move |g, _v, parents| {
            let x_v = parents[0];
            let gain_v = parents[1];
            let d_f = x_v.cols() as f64;
            let mut dx = x_v.zeros_like();
            let mut dgain = Matrix::zeros(1, x_v.cols());
            let mut dbias = Matrix::zeros(1, x_v.cols());
            for r in 0..x_v.rows() {
                let row = x_v.row(r);
                let mean = row.iter().sum::<f64>() / d_f;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d_f;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                let gxh: Vec<f64> = (0..x_v.cols())
                    .map(|c| g.get(r, c) * gain_v.get(0, c))
                    .collect();
                let sum_gxh: f64 = gxh.iter().sum();
                let sum_gxh_xhat: f64 = gxh.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for c in 0..x_v.cols() {
                    dgain.set(0, c, dgain.get(0, c) + g.get(r, c) * xhat[c]);
                    dbias.set(0, c, dbias.get(0, c) + g.get(r, c));
                    let v = inv_std / d_f * (d_f * gxh[c] - sum_gxh - xhat[c] * sum_gxh_xhat);
                    dx.set(r, c, v);
                }
            }
            vec![dx, dgain, dbias]
        });
        self.push(value, vec![x, gain, bias], Some(rule))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        assert!(slope > 0.0 && slope < 1.0, "leaky_relu slope must be in (0,1)");
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rule: BackwardRule = Box::new(move |g, _v, parents| {
            let x_v = parents[0];
            let mut dx = g.clone();
            for (d, x) in dx.data_mut().iter_mut().zip(x_v.data()) {
                if *x <= 0.0 {
                    *d *= slope;
                }
            }
            vec![dx]
        });
        self.push(value, vec![x], Some(rule))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); in eval
    /// mode the op is an identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if !self.training || rate == 0.0 {
            let value = self.value(x).clone();
            let rule: BackwardRule = Box::new(|g, _v, _p| vec![g.clone()]);
            return self.push(value, vec![x], Some(rule));
        }
        let keep = 1.0 - rate;
        let input = self.value(x);
        let mask: Vec<f64> = (0..input.data().len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let mut value = input.clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rule: BackwardRule = Box::new(move |g, _v, _p| {
            let mut dx = g.clone();
            for (d, m) in dx.data_mut().iter_mut().zip(&mask) {
                *d *= m;
            }
            vec![dx]
        });
        self.push(value, vec![x], Some(rule))
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols requires at least one part".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dim {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape(),
                    rhs: self.value(p).shape(),
                });
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let rule: BackwardRule = Box::new(move |g, _v, parents| {
            let mut out = Vec::with_capacity(parents.len());
            let mut offset = 0;
            for p in parents {
                let mut dp = p.zeros_like();
                for r in 0..dp.rows() {
                    let c = dp.cols();
                    dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                }
                offset += dp.cols();
                out.push(dp);
            }
            out
        });
        Ok(self.push(value, parts.to_vec(), Some(rule)))
    }

    /// Columns `[start, start+len)` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let input = self.value(x);
        assert!(start + len <= input.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(input.rows(), len);
        for r in 0..input.rows() {
            value.row_mut(r).copy_from_slice(&input.row(r)[start..start + len]);
        }
        let rule: BackwardRule = Box::new(move |g, _v, parents| {
            let mut dx = parents[0].zeros_like();
            for r in 0..g.rows() {
                dx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
            }
            vec![dx]
        });
        self.push(value, vec![x], Some(rule))
    }

    /// Rows of `x` selected by `indices` (repetition allowed); the backward
    /// pass scatter-adds gradients into the source rows.
    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let input = self.value(x);
        for &i in &indices {
            assert!(i < input.rows(), "gather_rows index out of range");
        }
        let mut value = Matrix::zeros(indices.len(), input.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(input.row(i));
        }
        let rule: BackwardRule = Box::new(move |g, _v, parents| {
            let mut dx = parents[0].zeros_like();
            for (r, &i) in indices.iter().enumerate() {
                for (d, gv) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                    *d += gv;
                }
            }
            vec![dx]
        });
        self.push(value, vec![x], Some(rule))
    }

    /// Mean over rows of -log softmax(logits)[row, target], log-sum-exp
    /// stabilized. Returns a 1x1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let input = self.value(logits);
        if targets.len() != input.rows() {
            return Err(Error::Usage(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                input.rows()
            )));
        }
        for &t in targets {
            if t >= input.cols() {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: input.cols(),
                });
            }
        }
        let n = input.rows() as f64;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = input.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - lse;
        }
        let value = Matrix::from_vec(1, 1, vec![total / n])?;
        let targets = targets.to_vec();
        let rule: BackwardRule = Box::new(move |g, _v, parents| {
            let logits_v = parents[0];
            let scale = g.get(0, 0) / logits_v.rows() as f64;
            let mut dl = logits_v.zeros_like();
            for (r, &t) in targets.iter().enumerate() {
                let row = logits_v.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                for (c, &logit) in row.iter().enumerate() {
                    let p = (logit - max).exp() / sum;
                    let ind = if c == t { 1.0 } else { 0.0 };
                    dl.set(r, c, scale * (p - ind));
                }
            }
            vec![dl]
        });
        Ok(self.push(value, vec![logits], Some(rule)))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![total]).expect("1x1");
        let rule: BackwardRule = Box::new(|g, _v, parents| {
            vec![Matrix::filled(parents[0].rows(), parents[0].cols(), g.get(0, 0))]
        });
        self.push(value, vec![x], Some(rule))
    }

    /// Propagate d loss / d node into every node reachable from `loss`,
    /// accumulating additively into each node's stored gradient. Backward
    /// rules fire exactly once per pass, in reverse topological order;
    /// calling backward again without re-running the forward pass adds the
    /// same gradients a second time.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            for p in &self.nodes[i].parents {
                stack.push(p.0);
            }
        }
        let mut adjoint: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            let adj = match adjoint[i].take() {
                Some(a) => a,
                None => self.nodes[i].value.zeros_like(),
            };
            if let Some(rule) = &self.nodes[i].backward {
                let parent_values: Vec<&Matrix> = self.nodes[i]
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                let contribs = rule(&adj, &self.nodes[i].value, &parent_values);
                debug_assert_eq!(contribs.len(), self.nodes[i].parents.len());
                let parents = self.nodes[i].parents.clone();
                for (p, contrib) in parents.iter().zip(contribs) {
                    debug_assert_eq!(contrib.shape(), self.nodes[p.0].value.shape());
                    match &mut adjoint[p.0] {
                        Some(a) => a.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            self.nodes[i].grad.add_assign(&adj);
        }
        Ok(())
    }
}

/// Named, flat storage for trainable parameter matrices. Order of insertion
/// is the canonical order used by optimizers, gradients and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    mats: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.mats.push(m);
        ParamId(self.mats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|s| s.as_str()).zip(self.mats.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.mats.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.data().len()).sum()
    }
}

/// Per-parameter gradient accumulator, aligned with a `ParamSet`.
#[derive(Debug, Clone)]
pub struct GradStore {
    mats: Vec<Matrix>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradStore {
            mats: params.mats.iter().map(|m| m.zeros_like()).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn zero(&mut self) {
        for m in &mut self.mats {
            m.data_mut().fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.mats {
            m.scale_assign(factor);
        }
    }

    pub fn any_nonzero(&self) -> bool {
        self.mats
            .iter()
            .any(|m| m.data().iter().any(|&v| v != 0.0))
    }
}

/// Node ids for every parameter of a `ParamSet` inserted as graph leaves.
pub struct ParamBinding {
    ids: Vec<NodeId>,
}

impl ParamBinding {
    pub fn bind(graph: &mut Graph, params: &ParamSet) -> Self {
        let ids = params
            .mats
            .iter()
            .map(|m| graph.leaf(m.clone()))
            .collect();
        ParamBinding { ids }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }

    /// Add the graph gradients of every bound parameter into `grads`.
    pub fn accumulate_grads(&self, graph: &Graph, grads: &mut GradStore) {
        for (node, slot) in self.ids.iter().zip(&mut grads.mats) {
            slot.add_assign(graph.grad(*node));
        }
    }
}

/// SGD-with-momentum state: one velocity matrix per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, params: &ParamSet) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        OptimizerState {
            lr,
            momentum,
            velocity: params.mats.iter().map(|m| m.zeros_like()).collect(),
        }
    }
}

/// v <- momentum v + grad; p <- p - lr v; grads are zeroed afterwards.
pub fn sgd_momentum_step(params: &mut ParamSet, grads: &mut GradStore, state: &mut OptimizerState) {
    for ((p, g), v) in params
        .mats
        .iter_mut()
        .zip(&mut grads.mats)
        .zip(&mut state.velocity)
    {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = state.momentum * *vv + gv;
            *pv -= state.lr * *vv;
        }
        g.data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            out.push((f(&xp) - f(&xm)) / (2.0 * h));
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn seeded(vals: &[f64]) -> Vec<f64> {
        vals.to_vec()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = seeded(&[0.3, -1.2, 0.8, 2.1, -0.4, 0.6]);
        let b0 = seeded(&[1.1, -0.7, 0.2, 0.9, -1.5, 0.4]);
        let loss_of = |a: &[f64], b: &[f64]| {
            let mut g = Graph::new(false);
            let an = g.leaf(Matrix::from_vec(2, 3, a.to_vec()).unwrap());
            let bn = g.leaf(Matrix::from_vec(3, 2, b.to_vec()).unwrap());
            let c = g.matmul(an, bn).unwrap();
            let l = g.sum(c);
            g.value(l).get(0, 0)
        };
        let mut g = Graph::new(false);
        let an = g.leaf(Matrix::from_vec(2, 3, a0.clone()).unwrap());
        let bn = g.leaf(Matrix::from_vec(3, 2, b0.clone()).unwrap());
        let c = g.matmul(an, bn).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();

        let fa = fd_grad(|a| loss_of(a, &b0), &a0, 1e-5);
        let fb = fd_grad(|b| loss_of(&a0, b), &b0, 1e-5);
        for (an_g, fd) in g.grad(an).data().iter().zip(&fa) {
            assert!(rel_err(*an_g, *fd) < 1e-6, "{an_g} vs {fd}");
        }
        for (bn_g, fd) in g.grad(bn).data().iter().zip(&fb) {
            assert!(rel_err(*bn_g, *fd) < 1e-6, "{bn_g} vs {fd}");
        }
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::from_vec(1, 4, vec![2.5; 4]).unwrap());
        let s = g.softmax_rows(x, 1.0);
        for c in 0..4 {
            assert!((g.value(s).get(0, c) - 0.25).abs() < 1e-15);
        }
        let y = g.leaf(Matrix::from_vec(1, 2, vec![0.0, 3.0_f64.ln()]).unwrap());
        let sy = g.softmax_rows(y, 1.0);
        assert!((g.value(sy).get(0, 0) - 0.25).abs() < 1e-12);
        assert!((g.value(sy).get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let vals = vec![0.3, -2.0, 1.7, 0.0, 5.0, -5.0];
        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::from_vec(2, 3, vals.clone()).unwrap());
        let s = g.softmax_rows(x, 0.7);
        for r in 0..2 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = vals.iter().map(|v| v + 11.0).collect();
        let xs = g.leaf(Matrix::from_vec(2, 3, shifted).unwrap());
        let ss = g.softmax_rows(xs, 0.7);
        for i in 0..6 {
            let (r, c) = (i / 3, i % 3);
            assert!((g.value(s).get(r, c) - g.value(ss).get(r, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x0 = seeded(&[0.4, -0.9, 1.3, 0.1, 2.0, -1.1]);
        let loss_of = |x: &[f64]| {
            let mut g = Graph::new(false);
            let xn = g.leaf(Matrix::from_vec(2, 3, x.to_vec()).unwrap());
            let s = g.softmax_rows(xn, 0.5);
            // weight entries unevenly so the Jacobian is exercised
            let w = g.leaf(Matrix::from_vec(3, 1, vec![1.0, -2.0, 3.0]).unwrap());
            let p = g.matmul(s, w).unwrap();
            let l = g.sum(p);
            g.value(l).get(0, 0)
        };
        let mut g = Graph::new(false);
        let xn = g.leaf(Matrix::from_vec(2, 3, x0.clone()).unwrap());
        let s = g.softmax_rows(xn, 0.5);
        let w = g.leaf(Matrix::from_vec(3, 1, vec![1.0, -2.0, 3.0]).unwrap());
        let p = g.matmul(s, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let fd = fd_grad(loss_of, &x0, 1e-5);
        for (a, f) in g.grad(xn).data().iter().zip(&fd) {
            assert!(rel_err(*a, *f) < 1e-6, "{a} vs {f}");
        }
    }

    #[test]
    fn layer_norm_constant_and_two_point_rows() {
        let mut g = Graph::new(false);
        let gain = g.leaf(Matrix::filled(1, 4, 1.0));
        let bias = g.leaf(Matrix::zeros(1, 4));
        let x = g.leaf(Matrix::filled(1, 4, 1.0));
        let y = g.layer_norm(x, gain, bias, 1e-5);
        for c in 0..4 {
            assert_eq!(g.value(y).get(0, c), 0.0);
        }
        let gain2 = g.leaf(Matrix::filled(1, 2, 1.0));
        let bias2 = g.leaf(Matrix::zeros(1, 2));
        let x2 = g.leaf(Matrix::from_vec(1, 2, vec![0.0, 2.0]).unwrap());
        let y2 = g.layer_norm(x2, gain2, bias2, 1e-12);
        assert!((g.value(y2).get(0, 0) + 1.0).abs() < 1e-6);
        assert!((g.value(y2).get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_row_stats() {
        let mut g = Graph::new(false);
        let gain = g.leaf(Matrix::filled(1, 8, 1.0));
        let bias = g.leaf(Matrix::zeros(1, 8));
        let x = g.leaf(
            Matrix::from_vec(1, 8, vec![0.3, -1.2, 4.0, 2.2, -0.5, 1.9, 0.0, -3.3]).unwrap(),
        );
        let y = g.layer_norm(x, gain, bias, 1e-9);
        let row = g.value(y).row(0);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x0 = seeded(&[0.5, -1.0, 2.0, 0.3, 1.1, -0.2]);
        let g0 = seeded(&[1.2, 0.8, -0.5]);
        let b0 = seeded(&[0.1, -0.3, 0.6]);
        let loss_of = |x: &[f64], gn: &[f64], bs: &[f64]| {
            let mut g = Graph::new(false);
            let xn = g.leaf(Matrix::from_vec(2, 3, x.to_vec()).unwrap());
            let gain = g.leaf(Matrix::from_vec(1, 3, gn.to_vec()).unwrap());
            let bias = g.leaf(Matrix::from_vec(1, 3, bs.to_vec()).unwrap());
            let y = g.layer_norm(xn, gain, bias, 1e-5);
            let w = g.leaf(Matrix::from_vec(3, 1, vec![0.7, -1.3, 2.2]).unwrap());
            let p = g.matmul(y, w).unwrap();
            let l = g.sum(p);
            g.value(l).get(0, 0)
        };
        let mut g = Graph::new(false);
        let xn = g.leaf(Matrix::from_vec(2, 3, x0.clone()).unwrap());
        let gain = g.leaf(Matrix::from_vec(1, 3, g0.clone()).unwrap());
        let bias = g.leaf(Matrix::from_vec(1, 3, b0.clone()).unwrap());
        let y = g.layer_norm(xn, gain, bias, 1e-5);
        let w = g.leaf(Matrix::from_vec(3, 1, vec![0.7, -1.3, 2.2]).unwrap());
        let p = g.matmul(y, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        for (an, fd) in g
            .grad(xn)
            .data()
            .iter()
            .zip(fd_grad(|x| loss_of(x, &g0, &b0), &x0, 1e-5))
        {
            assert!(rel_err(*an, fd) < 1e-5, "{an} vs {fd}");
        }
        for (an, fd) in g
            .grad(gain)
            .data()
            .iter()
            .zip(fd_grad(|gn| loss_of(&x0, gn, &b0), &g0, 1e-5))
        {
            assert!(rel_err(*an, fd) < 1e-5, "{an} vs {fd}");
        }
        for (an, fd) in g
            .grad(bias)
            .data()
            .iter()
            .zip(fd_grad(|bs| loss_of(&x0, &g0, bs), &b0, 1e-5))
        {
            assert!(rel_err(*an, fd) < 1e-5, "{an} vs {fd}");
        }
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[-0.1, 0.0, 2.0]);

        let x0 = vec![-1.5, 0.7, 2.3, -0.2];
        let loss_of = |x: &[f64]| {
            let mut g = Graph::new(false);
            let xn = g.leaf(Matrix::from_vec(1, 4, x.to_vec()).unwrap());
            let y = g.leaky_relu(xn, 0.01);
            let l = g.sum(y);
            g.value(l).get(0, 0)
        };
        let mut g = Graph::new(false);
        let xn = g.leaf(Matrix::from_vec(1, 4, x0.clone()).unwrap());
        let y = g.leaky_relu(xn, 0.01);
        let l = g.sum(y);
        g.backward(l).unwrap();
        for (an, fd) in g.grad(xn).data().iter().zip(fd_grad(loss_of, &x0, 1e-5)) {
            assert!(rel_err(*an, fd) < 1e-6);
        }
        // identity on all-positive input
        let mut g = Graph::new(false);
        let xp = g.leaf(Matrix::from_vec(1, 3, vec![0.5, 1.0, 9.0]).unwrap());
        let yp = g.leaky_relu(xp, 0.01);
        assert_eq!(g.value(yp).data(), &[0.5, 1.0, 9.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals = vec![1.0, -2.0, 3.0, 4.5];
        let mut g = Graph::new(true);
        let x = g.leaf(Matrix::from_vec(1, 4, vals.clone()).unwrap());
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(g.value(y).data(), vals.as_slice());

        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::from_vec(1, 4, vals.clone()).unwrap());
        let y = g.dropout(x, 0.25, &mut rng);
        assert_eq!(g.value(y).data(), vals.as_slice());
    }

    #[test]
    fn dropout_zero_fraction_near_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut g = Graph::new(true);
        let x = g.leaf(Matrix::filled(100, 1000, 1.0));
        let y = g.dropout(x, 0.25, &mut rng);
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((0.24..=0.26).contains(&frac), "zero fraction {frac}");
        // survivors carry the inverted scale
        let survivor = g.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.75).abs() < 1e-12);
    }

    #[test]
    fn concat_cols_single_and_ordered() {
        let mut g = Graph::new(false);
        let a = g.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let only = g.concat_cols(&[a]).unwrap();
        assert_eq!(g.value(only).data(), &[1.0, 2.0]);
        let b = g.leaf(Matrix::from_vec(1, 3, vec![3.0, 4.0, 5.0]).unwrap());
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let bad = g.leaf(Matrix::zeros(2, 2));
        assert!(g.concat_cols(&[a, bad]).is_err());
    }

    #[test]
    fn concat_cols_gradient_routes_to_slices() {
        let a0 = vec![0.3, -0.8];
        let b0 = vec![1.5, 2.5, -0.5];
        let loss_of = |a: &[f64], b: &[f64]| {
            let mut g = Graph::new(false);
            let an = g.leaf(Matrix::from_vec(1, 2, a.to_vec()).unwrap());
            let bn = g.leaf(Matrix::from_vec(1, 3, b.to_vec()).unwrap());
            let c = g.concat_cols(&[an, bn]).unwrap();
            let w = g.leaf(Matrix::from_vec(5, 1, vec![1.0, -1.0, 2.0, 0.5, -2.0]).unwrap());
            let p = g.matmul(c, w).unwrap();
            g.value(p).get(0, 0)
        };
        let mut g = Graph::new(false);
        let an = g.leaf(Matrix::from_vec(1, 2, a0.clone()).unwrap());
        let bn = g.leaf(Matrix::from_vec(1, 3, b0.clone()).unwrap());
        let c = g.concat_cols(&[an, bn]).unwrap();
        let w = g.leaf(Matrix::from_vec(5, 1, vec![1.0, -1.0, 2.0, 0.5, -2.0]).unwrap());
        let p = g.matmul(c, w).unwrap();
        g.backward(p).unwrap();
        for (an_g, fd) in g
            .grad(an)
            .data()
            .iter()
            .zip(fd_grad(|a| loss_of(a, &b0), &a0, 1e-5))
        {
            assert!(rel_err(*an_g, fd) < 1e-6);
        }
        for (bn_g, fd) in g
            .grad(bn)
            .data()
            .iter()
            .zip(fd_grad(|b| loss_of(&a0, b), &b0, 1e-5))
        {
            assert!(rel_err(*bn_g, fd) < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new(false);
        let logits = g.leaf(Matrix::zeros(2, 5));
        let l = g.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((g.value(l).get(0, 0) - 5.0_f64.ln()).abs() < 1e-12);

        let mut g = Graph::new(false);
        let logits = g.leaf(Matrix::from_vec(1, 2, vec![10.0, -10.0]).unwrap());
        let l = g.cross_entropy(logits, &[0]).unwrap();
        let expected = (1.0 + (-20.0_f64).exp()).ln();
        assert!((g.value(l).get(0, 0) - expected).abs() < 1e-15);
        assert!(g.value(l).get(0, 0) < 3e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new(false);
        let logits = g.leaf(Matrix::zeros(1, 3));
        assert!(matches!(
            g.cross_entropy(logits, &[3]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let x0 = seeded(&[0.2, -1.4, 0.9, 2.2, 0.1, -0.6]);
        let targets = [2usize, 0];
        let loss_of = |x: &[f64]| {
            let mut g = Graph::new(false);
            let xn = g.leaf(Matrix::from_vec(2, 3, x.to_vec()).unwrap());
            let l = g.cross_entropy(xn, &targets).unwrap();
            g.value(l).get(0, 0)
        };
        let mut g = Graph::new(false);
        let xn = g.leaf(Matrix::from_vec(2, 3, x0.clone()).unwrap());
        let l = g.cross_entropy(xn, &targets).unwrap();
        g.backward(l).unwrap();
        for (an, fd) in g.grad(xn).data().iter().zip(fd_grad(loss_of, &x0, 1e-5)) {
            assert!(rel_err(*an, fd) < 1e-5, "{an} vs {fd}");
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_diamond_accumulates() {
        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0; 4]);

        // diamond: y = 2x + 3x, dy/dx = 5
        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::filled(1, 1, 1.5));
        let f = g.scale(x, 2.0);
        let h = g.scale(x, 3.0);
        let y = g.add(f, h).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).get(0, 0), 5.0);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.leaky_relu(x, 0.01);
        let l = g.sum(y);
        g.backward(l).unwrap();
        let first = g.grad(x).clone();
        g.backward(l).unwrap();
        for (two, one) in g.grad(x).data().iter().zip(first.data()) {
            assert_eq!(*two, 2.0 * one);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new(false);
        let x = g.leaf(Matrix::zeros(2, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gather_and_slice_gradients() {
        let x0 = seeded(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss_of = |x: &[f64]| {
            let mut g = Graph::new(false);
            let xn = g.leaf(Matrix::from_vec(3, 2, x.to_vec()).unwrap());
            let gat = g.gather_rows(xn, vec![0, 2, 0]);
            let sl = g.slice_cols(gat, 1, 1);
            let w = g.leaf(Matrix::from_vec(1, 1, vec![2.0]).unwrap());
            let p = g.matmul(sl, w).unwrap();
            let l = g.sum(p);
            g.value(l).get(0, 0)
        };
        let mut g = Graph::new(false);
        let xn = g.leaf(Matrix::from_vec(3, 2, x0.clone()).unwrap());
        let gat = g.gather_rows(xn, vec![0, 2, 0]);
        let sl = g.slice_cols(gat, 1, 1);
        let w = g.leaf(Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        let p = g.matmul(sl, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        for (an, fd) in g.grad(xn).data().iter().zip(fd_grad(loss_of, &x0, 1e-5)) {
            assert!(rel_err(*an, fd) < 1e-6);
        }
    }

    #[test]
    fn sgd_momentum_basics() {
        let mut params = ParamSet::new();
        let id = params.push("w", Matrix::filled(1, 1, 1.0));
        let mut grads = GradStore::zeros_like(&params);
        let mut state = OptimizerState::new(0.1, 0.0, &params);
        grads.mats[0].set(0, 0, 1.0);
        sgd_momentum_step(&mut params, &mut grads, &mut state);
        assert!((params.get(id).get(0, 0) - 0.9).abs() < 1e-15);
        assert_eq!(grads.get(id).get(0, 0), 0.0);

        // zero grad, zero velocity leaves parameters unchanged
        sgd_momentum_step(&mut params, &mut grads, &mut state);
        assert!((params.get(id).get(0, 0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_step_unroll() {
        // v1 = g1, p1 = p0 - lr g1; v2 = m g1 + g2, p2 = p1 - lr (m g1 + g2)
        let (lr, m) = (0.05, 0.9);
        let (g1, g2) = (2.0, -1.0);
        let mut params = ParamSet::new();
        let id = params.push("w", Matrix::filled(1, 1, 0.25));
        let mut grads = GradStore::zeros_like(&params);
        let mut state = OptimizerState::new(lr, m, &params);
        grads.mats[0].set(0, 0, g1);
        sgd_momentum_step(&mut params, &mut grads, &mut state);
        grads.mats[0].set(0, 0, g2);
        sgd_momentum_step(&mut params, &mut grads, &mut state);
        let expected = 0.25 - lr * g1 - lr * (m * g1 + g2);
        assert!((params.get(id).get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn determinism_same_seed_same_values_and_grads() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new(true);
            let x = g.leaf(Matrix::from_vec(4, 4, (0..16).map(|i| i as f64 / 7.0).collect()).unwrap());
            let d = g.dropout(x, 0.25, &mut rng);
            let s = g.softmax_rows(d, 1.3);
            let l = g.sum(s);
            g.backward(l).unwrap();
            (g.value(s).data().to_vec(), g.grad(x).data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
