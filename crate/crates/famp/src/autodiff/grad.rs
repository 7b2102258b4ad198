//! Backward pass: computes `∂output/∂wrt` over a recorded tape.
//!
//! Two modes share the same traversal. The plain mode accumulates adjoint
//! arrays and returns them as constant leaves. The `create_graph` mode
//! expresses every adjoint contribution with tape primitives, so the
//! returned gradients are ordinary differentiable nodes and `grad` can be
//! applied to them again for second and higher order derivatives.

use super::{Dims, Node, NodeId, Op, Tape};
use crate::error::{Error, Result};

impl Tape {
    /// Gradient of a scalar `output` with respect to each node in `wrt`.
    ///
    /// Nodes unreachable from `output` (and untracked `wrt` nodes) receive
    /// exact zeros. With `create_graph` the results are differentiable tape
    /// nodes; without it they are constant leaves holding the numbers.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<Vec<NodeId>> {
        self.grad_check_inputs(output, wrt)?;
        let n = output.idx() + 1;

        // Ancestors of the output, walking parent edges.
        let mut anc = vec![false; n];
        anc[output.idx()] = true;
        for i in (0..n).rev() {
            if anc[i] {
                for &p in &self.node(NodeId(i as u32)).parents {
                    anc[p.idx()] = true;
                }
            }
        }

        // Nodes whose value depends differentiably on some wrt node.
        let mut dep = vec![false; n];
        for &w in wrt {
            if w.idx() < n && self.node(w).tracked {
                dep[w.idx()] = true;
            }
        }
        for i in 0..n {
            if dep[i] {
                continue;
            }
            let node = self.node(NodeId(i as u32));
            if matches!(node.op, Op::StopGrad | Op::Leaf) {
                continue;
            }
            dep[i] = node.parents.iter().any(|p| dep[p.idx()]);
        }

        let active: Vec<bool> = (0..n).map(|i| anc[i] && dep[i]).collect();

        if create_graph {
            let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
            if active[output.idx()] {
                adjoint[output.idx()] = Some(self.leaf_scalar(1.0, false)?);
                for i in (0..n).rev() {
                    let Some(g) = adjoint[i] else { continue };
                    if !active[i] {
                        continue;
                    }
                    self.emit_vjp(NodeId(i as u32), g, &active, &mut adjoint)?;
                }
            }
            wrt.iter()
                .map(|&w| match adjoint.get(w.idx()).copied().flatten() {
                    Some(g) => Ok(g),
                    None => self.zeros_like(self.node(w).dims),
                })
                .collect()
        } else {
            let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; n];
            if active[output.idx()] {
                adjoint[output.idx()] = Some(vec![1.0]);
                for i in (0..n).rev() {
                    let Some(g) = adjoint[i].take() else { continue };
                    if !active[i] {
                        continue;
                    }
                    self.numeric_vjp(NodeId(i as u32), &g, &active, &mut adjoint);
                    if wrt.contains(&NodeId(i as u32)) {
                        adjoint[i] = Some(g);
                    }
                }
            }
            wrt.iter()
                .map(|&w| {
                    let dims = self.node(w).dims;
                    match adjoint.get(w.idx()).and_then(|a| a.as_ref()) {
                        Some(g) => self.constant(g.clone(), dims),
                        None => self.zeros_like(dims),
                    }
                })
                .collect()
        }
    }

    fn grad_check_inputs(&self, output: NodeId, wrt: &[NodeId]) -> Result<()> {
        if output.idx() >= self.len() {
            return Err(Error::NodeOutOfRange { id: output.0, len: self.len() });
        }
        let out_dims = self.node(output).dims;
        if out_dims != Dims::Scalar {
            return Err(Error::NonScalarGrad { len: out_dims.len() });
        }
        for &w in wrt {
            if w.idx() >= self.len() {
                return Err(Error::NodeOutOfRange { id: w.0, len: self.len() });
            }
        }
        Ok(())
    }

    fn constant(&mut self, values: Vec<f64>, dims: Dims) -> Result<NodeId> {
        match dims {
            Dims::Scalar => self.leaf_scalar(values[0], false),
            Dims::Vector(_) => self.leaf(&values, false),
            Dims::Matrix(r, c) => self.leaf_mat(r as usize, c as usize, &values, false),
        }
    }

    pub(super) fn zeros_like(&mut self, dims: Dims) -> Result<NodeId> {
        self.constant(vec![0.0; dims.len()], dims)
    }

    // ---- graph-emitting mode ------------------------------------------

    fn accumulate_emit(
        &mut self,
        target: NodeId,
        contrib: NodeId,
        active: &[bool],
        adjoint: &mut [Option<NodeId>],
    ) -> Result<()> {
        if !active[target.idx()] {
            return Ok(());
        }
        adjoint[target.idx()] = Some(match adjoint[target.idx()] {
            Some(old) => self.add(old, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    fn emit_vjp(
        &mut self,
        id: NodeId,
        g: NodeId,
        active: &[bool],
        adjoint: &mut [Option<NodeId>],
    ) -> Result<()> {
        let node = self.node(id);
        let op = node.op.clone();
        let parents = node.parents.clone();
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add => {
                self.accumulate_emit(parents[0], g, active, adjoint)?;
                self.accumulate_emit(parents[1], g, active, adjoint)?;
            }
            Op::Sub => {
                self.accumulate_emit(parents[0], g, active, adjoint)?;
                if active[parents[1].idx()] {
                    let ng = self.neg(g)?;
                    self.accumulate_emit(parents[1], ng, active, adjoint)?;
                }
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if active[a.idx()] {
                    let c = self.mul(g, b)?;
                    self.accumulate_emit(a, c, active, adjoint)?;
                }
                if active[b.idx()] {
                    let c = self.mul(g, a)?;
                    self.accumulate_emit(b, c, active, adjoint)?;
                }
            }
            Op::Div => {
                let (a, b) = (parents[0], parents[1]);
                if active[a.idx()] {
                    let c = self.div(g, b)?;
                    self.accumulate_emit(a, c, active, adjoint)?;
                }
                if active[b.idx()] {
                    // d(a/b)/db = -y/b with y = a/b.
                    let yb = self.div(id, b)?;
                    let gy = self.mul(g, yb)?;
                    let c = self.neg(gy)?;
                    self.accumulate_emit(b, c, active, adjoint)?;
                }
            }
            Op::Neg => {
                if active[parents[0].idx()] {
                    let c = self.neg(g)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::Exp => {
                if active[parents[0].idx()] {
                    let c = self.mul(g, id)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::Log => {
                if active[parents[0].idx()] {
                    let c = self.div(g, parents[0])?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::PowScalar(p) => {
                if active[parents[0].idx()] {
                    let xp = self.pow_scalar(parents[0], p - 1.0)?;
                    let s = self.scale(xp, p)?;
                    let c = self.mul(g, s)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::ScaleConst(k) => {
                if active[parents[0].idx()] {
                    let c = self.scale(g, k)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::Sum => {
                if active[parents[0].idx()] {
                    let n = self.node(parents[0]).dims.len();
                    let c = match self.node(parents[0]).dims {
                        Dims::Scalar => g,
                        _ => self.broadcast_to(g, n)?,
                    };
                    let c = self.reshape_like(c, parents[0])?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::Mean => {
                if active[parents[0].idx()] {
                    let n = self.node(parents[0]).dims.len();
                    let gs = self.scale(g, 1.0 / n as f64)?;
                    let c = match self.node(parents[0]).dims {
                        Dims::Scalar => gs,
                        _ => self.broadcast_to(gs, n)?,
                    };
                    let c = self.reshape_like(c, parents[0])?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::IndexSelect(idx) => {
                if active[parents[0].idx()] {
                    let len = self.node(parents[0]).dims.len();
                    let gv = self.as_vector(g)?;
                    let c = self.scatter_to(gv, len, &idx)?;
                    let c = self.reshape_like(c, parents[0])?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::ScatterTo(idx) => {
                if active[parents[0].idx()] {
                    let indices: Vec<usize> = idx.iter().map(|&i| i as usize).collect();
                    let c = self.index_select(g, &indices)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::BroadcastTo => {
                if active[parents[0].idx()] {
                    let c = self.sum(g)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::MatVec => {
                let (m, v) = (parents[0], parents[1]);
                if active[m.idx()] {
                    let c = self.outer(g, v)?;
                    self.accumulate_emit(m, c, active, adjoint)?;
                }
                if active[v.idx()] {
                    let c = self.matvec_t(m, g)?;
                    self.accumulate_emit(v, c, active, adjoint)?;
                }
            }
            Op::MatVecT => {
                let (m, v) = (parents[0], parents[1]);
                if active[m.idx()] {
                    let c = self.outer(v, g)?;
                    self.accumulate_emit(m, c, active, adjoint)?;
                }
                if active[v.idx()] {
                    let c = self.matvec(m, g)?;
                    self.accumulate_emit(v, c, active, adjoint)?;
                }
            }
            Op::Outer => {
                let (u, w) = (parents[0], parents[1]);
                if active[u.idx()] {
                    let c = self.matvec(g, w)?;
                    self.accumulate_emit(u, c, active, adjoint)?;
                }
                if active[w.idx()] {
                    let c = self.matvec_t(g, u)?;
                    self.accumulate_emit(w, c, active, adjoint)?;
                }
            }
            Op::Concat => {
                let mut offset = 0usize;
                for &p in parents.iter() {
                    let len = self.node(p).dims.len();
                    if active[p.idx()] {
                        let indices: Vec<usize> = (offset..offset + len).collect();
                        let seg = self.index_select(g, &indices)?;
                        let seg = self.reshape_like(seg, p)?;
                        self.accumulate_emit(p, seg, active, adjoint)?;
                    }
                    offset += len;
                }
            }
            Op::Softmax => {
                if active[parents[0].idx()] {
                    // gx = y ⊙ (g - <g, y>)
                    let n = self.node(id).dims.len();
                    let d = self.dot(g, id)?;
                    let db = self.broadcast_to(d, n)?;
                    let gd = self.sub(g, db)?;
                    let c = self.mul(id, gd)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::LogSumExp => {
                if active[parents[0].idx()] {
                    // gx = g · softmax(x)
                    let n = self.node(parents[0]).dims.len();
                    let sm = self.softmax(parents[0])?;
                    let gb = self.broadcast_to(g, n)?;
                    let c = self.mul(gb, sm)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::Sigmoid => {
                if active[parents[0].idx()] {
                    // gx = g ⊙ y ⊙ (1 - y)
                    let dims = self.node(id).dims;
                    let ones = self.constant(vec![1.0; dims.len()], dims)?;
                    let om = self.sub(ones, id)?;
                    let yom = self.mul(id, om)?;
                    let c = self.mul(g, yom)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
            Op::Softplus => {
                if active[parents[0].idx()] {
                    let s = self.sigmoid(parents[0])?;
                    let c = self.mul(g, s)?;
                    self.accumulate_emit(parents[0], c, active, adjoint)?;
                }
            }
        }
        Ok(())
    }

    /// Reinterpret a vector node as the dims of `like` (same element count).
    /// Scalars and vectors of length 1 interconvert; matrices are viewed as
    /// their flat vector. Element order never changes.
    fn reshape_like(&mut self, id: NodeId, like: NodeId) -> Result<NodeId> {
        let have = self.node(id).dims;
        let want = self.node(like).dims;
        if have == want {
            return Ok(id);
        }
        debug_assert_eq!(have.len(), want.len());
        let vals = self.node(id).values.as_slice().to_vec();
        self.push_view(id, vals, want)
    }

    fn as_vector(&mut self, id: NodeId) -> Result<NodeId> {
        match self.node(id).dims {
            Dims::Vector(_) => Ok(id),
            d => {
                let vals = self.node(id).values.as_slice().to_vec();
                self.push_view(id, vals, Dims::Vector(d.len() as u32))
            }
        }
    }

    /// Identity node that only changes the recorded dims.
    fn push_view(&mut self, parent: NodeId, vals: Vec<f64>, dims: Dims) -> Result<NodeId> {
        let len = vals.len();
        let indices: Vec<usize> = (0..len).collect();
        let node = Node {
            op: Op::IndexSelect(indices.iter().map(|&i| i as u32).collect()),
            parents: smallvec::SmallVec::from_slice(&[parent]),
            values: match dims {
                Dims::Scalar => super::Val::Scalar(vals[0]),
                _ => super::Val::Arr(vals.into_boxed_slice()),
            },
            dims,
            tracked: self.node(parent).tracked,
        };
        let id = self.push_node(node)?;
        Ok(id)
    }

    fn push_node(&mut self, node: Node) -> Result<NodeId> {
        let id = self.len();
        if id > u32::MAX as usize {
            return Err(Error::InstanceTooLarge { detail: "tape exceeds u32 node limit".into() });
        }
        self.push_raw(node);
        Ok(NodeId(id as u32))
    }

    // ---- numeric mode ----------------------------------------------------

    fn accumulate_numeric(
        contrib: &[f64],
        target: usize,
        active: &[bool],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        if !active[target] {
            return;
        }
        match &mut adjoint[target] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            None => adjoint[target] = Some(contrib.to_vec()),
        }
    }

    fn numeric_vjp(&self, id: NodeId, g: &[f64], active: &[bool], adjoint: &mut [Option<Vec<f64>>]) {
        let node = self.node(id);
        let parents = &node.parents;
        let pv = |i: usize| self.node(parents[i]).values.as_slice();
        let yv = node.values.as_slice();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add => {
                Self::accumulate_numeric(g, parents[0].idx(), active, adjoint);
                Self::accumulate_numeric(g, parents[1].idx(), active, adjoint);
            }
            Op::Sub => {
                Self::accumulate_numeric(g, parents[0].idx(), active, adjoint);
                if active[parents[1].idx()] {
                    let c: Vec<f64> = g.iter().map(|&x| -x).collect();
                    Self::accumulate_numeric(&c, parents[1].idx(), active, adjoint);
                }
            }
            Op::Mul => {
                if active[parents[0].idx()] {
                    let b = pv(1);
                    let c: Vec<f64> = g.iter().zip(b).map(|(x, y)| x * y).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
                if active[parents[1].idx()] {
                    let a = pv(0);
                    let c: Vec<f64> = g.iter().zip(a).map(|(x, y)| x * y).collect();
                    Self::accumulate_numeric(&c, parents[1].idx(), active, adjoint);
                }
            }
            Op::Div => {
                if active[parents[0].idx()] {
                    let b = pv(1);
                    let c: Vec<f64> = g.iter().zip(b).map(|(x, y)| x / y).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
                if active[parents[1].idx()] {
                    let b = pv(1);
                    let c: Vec<f64> = g
                        .iter()
                        .zip(yv)
                        .zip(b)
                        .map(|((&x, &y), &bb)| -x * y / bb)
                        .collect();
                    Self::accumulate_numeric(&c, parents[1].idx(), active, adjoint);
                }
            }
            Op::Neg => {
                if active[parents[0].idx()] {
                    let c: Vec<f64> = g.iter().map(|&x| -x).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::Exp => {
                if active[parents[0].idx()] {
                    let c: Vec<f64> = g.iter().zip(yv).map(|(x, y)| x * y).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::Log => {
                if active[parents[0].idx()] {
                    let a = pv(0);
                    let c: Vec<f64> = g.iter().zip(a).map(|(x, y)| x / y).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::PowScalar(p) => {
                if active[parents[0].idx()] {
                    let a = pv(0);
                    let c: Vec<f64> = g
                        .iter()
                        .zip(a)
                        .map(|(x, y)| x * p * y.powf(p - 1.0))
                        .collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::ScaleConst(k) => {
                if active[parents[0].idx()] {
                    let c: Vec<f64> = g.iter().map(|x| x * k).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::Sum => {
                if active[parents[0].idx()] {
                    let n = self.node(parents[0]).dims.len();
                    let c = vec![g[0]; n];
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::Mean => {
                if active[parents[0].idx()] {
                    let n = self.node(parents[0]).dims.len();
                    let c = vec![g[0] / n as f64; n];
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::IndexSelect(idx) => {
                if active[parents[0].idx()] {
                    let n = self.node(parents[0]).dims.len();
                    let mut c = vec![0.0; n];
                    for (&i, &gv) in idx.iter().zip(g) {
                        c[i as usize] += gv;
                    }
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::ScatterTo(idx) => {
                if active[parents[0].idx()] {
                    let c: Vec<f64> = idx.iter().map(|&i| g[i as usize]).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::BroadcastTo => {
                if active[parents[0].idx()] {
                    let c = vec![g.iter().sum::<f64>()];
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::MatVec => {
                let (r, c_dim) = match self.node(parents[0]).dims {
                    Dims::Matrix(r, c) => (r as usize, c as usize),
                    _ => unreachable!(),
                };
                if active[parents[0].idx()] {
                    let v = pv(1);
                    let mut c = Vec::with_capacity(r * c_dim);
                    for &gi in g.iter().take(r) {
                        for &vj in v.iter().take(c_dim) {
                            c.push(gi * vj);
                        }
                    }
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
                if active[parents[1].idx()] {
                    let m = pv(0);
                    let mut c = vec![0.0; c_dim];
                    for i in 0..r {
                        for j in 0..c_dim {
                            c[j] += m[i * c_dim + j] * g[i];
                        }
                    }
                    Self::accumulate_numeric(&c, parents[1].idx(), active, adjoint);
                }
            }
            Op::MatVecT => {
                let (r, c_dim) = match self.node(parents[0]).dims {
                    Dims::Matrix(r, c) => (r as usize, c as usize),
                    _ => unreachable!(),
                };
                if active[parents[0].idx()] {
                    let v = pv(1);
                    let mut c = Vec::with_capacity(r * c_dim);
                    for &vi in v.iter().take(r) {
                        for &gj in g.iter().take(c_dim) {
                            c.push(vi * gj);
                        }
                    }
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
                if active[parents[1].idx()] {
                    let m = pv(0);
                    let mut c = vec![0.0; r];
                    for (i, ci) in c.iter_mut().enumerate() {
                        *ci = (0..c_dim).map(|j| m[i * c_dim + j] * g[j]).sum();
                    }
                    Self::accumulate_numeric(&c, parents[1].idx(), active, adjoint);
                }
            }
            Op::Outer => {
                let (r, c_dim) = match node.dims {
                    Dims::Matrix(r, c) => (r as usize, c as usize),
                    _ => unreachable!(),
                };
                if active[parents[0].idx()] {
                    let w = pv(1);
                    let mut c = vec![0.0; r];
                    for (i, ci) in c.iter_mut().enumerate() {
                        *ci = (0..c_dim).map(|j| g[i * c_dim + j] * w[j]).sum();
                    }
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
                if active[parents[1].idx()] {
                    let u = pv(0);
                    let mut c = vec![0.0; c_dim];
                    for (j, cj) in c.iter_mut().enumerate() {
                        *cj = (0..r).map(|i| g[i * c_dim + j] * u[i]).sum();
                    }
                    Self::accumulate_numeric(&c, parents[1].idx(), active, adjoint);
                }
            }
            Op::Concat => {
                let mut offset = 0usize;
                for &p in parents.iter() {
                    let len = self.node(p).dims.len();
                    if active[p.idx()] {
                        Self::accumulate_numeric(&g[offset..offset + len], p.idx(), active, adjoint);
                    }
                    offset += len;
                }
            }
            Op::Softmax => {
                if active[parents[0].idx()] {
                    let d: f64 = g.iter().zip(yv).map(|(x, y)| x * y).sum();
                    let c: Vec<f64> = g.iter().zip(yv).map(|(x, y)| y * (x - d)).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::LogSumExp => {
                if active[parents[0].idx()] {
                    let x = pv(0);
                    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let c: Vec<f64> = e.iter().map(|&v| g[0] * v / z).collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::Sigmoid => {
                if active[parents[0].idx()] {
                    let c: Vec<f64> = g
                        .iter()
                        .zip(yv)
                        .map(|(x, y)| x * y * (1.0 - y))
                        .collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
            Op::Softplus => {
                if active[parents[0].idx()] {
                    let a = pv(0);
                    let c: Vec<f64> = g
                        .iter()
                        .zip(a)
                        .map(|(&x, &xx)| {
                            let s = if xx >= 0.0 {
                                1.0 / (1.0 + (-xx).exp())
                            } else {
                                let e = xx.exp();
                                e / (1.0 + e)
                            };
                            x * s
                        })
                        .collect();
                    Self::accumulate_numeric(&c, parents[0].idx(), active, adjoint);
                }
            }
        }
    }
}
