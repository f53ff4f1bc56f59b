//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! Each operation appends a node holding its output value, its parent node
//! ids, and a backward rule mapping the output gradient to one gradient per
//! parent. The tape is created fresh for every optimization step; gradients
//! accumulate additively across fan-out within a single backward pass.
//!
//! The graph is single-threaded. Independent graphs may run concurrently.

use crate::error::{CafoError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule: (node value, output gradient, parent values, per-parent
/// wanted flags) -> one gradient per parent; `None` for parents whose
/// gradient nobody consumes. Rules may ignore the flags and return `Some`
/// everywhere; expensive rules use them to skip dead work.
type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    /// True when a trainable leaf is reachable through this node, i.e. its
    /// gradient is worth computing.
    towards_params: bool,
}

/// Computation tape. Nodes are appended in topological order by construction.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Graph {
    /// Tape that records backward rules.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// Forward-only tape; backward rules are discarded.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a trainable leaf holding `value`; it receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, vec![], None, true)
    }

    /// Insert a non-trainable leaf (data, fixed matrices). No gradient is
    /// computed for it or for subgraphs that lead only to constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, vec![], None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Remove and return the accumulated gradient of `v`.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let towards = parents.iter().any(|&p| self.nodes[p].towards_params);
        self.push_node(value, parents, backward, towards)
    }

    fn push_node(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        towards_params: bool,
    ) -> Var {
        let node = if self.recording {
            Node { value, grad: None, parents, backward, towards_params }
        } else {
            Node { value, grad: None, parents: vec![], backward: None, towards_params }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Every node reachable from the root
    /// receives dRoot/dNode; unreachable nodes keep `None`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(CafoError::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        let seed_shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::filled(&seed_shape, 1.0));

        for i in (0..=root.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if node.grad.is_none() || node.backward.is_none() {
                continue;
            }
            let grads = {
                let parent_values: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &head[p].value).collect();
                let wants: Vec<bool> =
                    node.parents.iter().map(|&p| head[p].towards_params).collect();
                let bw = node.backward.as_ref().unwrap();
                bw(&node.value, node.grad.as_ref().unwrap(), &parent_values, &wants)
            };
            debug_assert_eq!(grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(grads.into_iter()) {
                let Some(g) = g else { continue };
                if !head[p].towards_params {
                    continue;
                }
                match &mut head[p].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // elementwise binary ops (matching shapes)
    // ------------------------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CafoError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _, _| vec![Some(g.clone()), Some(g.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _, _| {
                let neg = map(g, |x| -x);
                vec![Some(g.clone()), Some(neg)]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, g, p, _| {
                vec![
                    Some(zip_map(g, p[1], |gv, bv| gv * bv)),
                    Some(zip_map(g, p[0], |gv, av| gv * av)),
                ]
            })),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(CafoError::DivisionByZero { op: "div" });
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, g, p, _| {
                let da = zip_map(g, p[1], |gv, bv| gv / bv);
                let mut db = vec![0.0; g.len()];
                for (((d, gv), av), bv) in
                    db.iter_mut().zip(g.data()).zip(p[0].data()).zip(p[1].data())
                {
                    *d = -gv * av / (bv * bv);
                }
                vec![Some(da), Some(Tensor::from_parts(g.shape().to_vec(), db))]
            })),
        ))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| x + c);
        self.push(out, vec![a.0], Some(Box::new(|_, g, _, _| vec![Some(g.clone())])))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| x * c);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, g, _, _| vec![Some(map(g, |x| x * c))])),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    // ------------------------------------------------------------------
    // activations and pointwise nonlinearities
    // ------------------------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid_stable);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|v, g, _, _| vec![Some(zip_map(g, v, |gv, s| gv * s * (1.0 - s)))])),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|_, g, p, _| {
                vec![Some(zip_map(g, p[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))]
            })),
        )
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::abs);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|_, g, p, _| {
                vec![Some(zip_map(g, p[0], |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }))]
            })),
        )
    }

    // ------------------------------------------------------------------
    // reductions
    // ------------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::scalar(s),
            vec![a.0],
            Some(Box::new(move |_, g, _, _| {
                vec![Some(Tensor::filled(&shape, g.data()[0]))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::scalar(s / n),
            vec![a.0],
            Some(Box::new(move |_, g, _, _| {
                vec![Some(Tensor::filled(&shape, g.data()[0] / n))]
            })),
        )
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(CafoError::ShapeMismatch {
                op: "reduce_axis",
                detail: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean { 1.0 / mid as f64 } else { 1.0 };
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &x[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let t = Tensor::from_parts(out_shape, out);
        Ok(self.push(
            t,
            vec![a.0],
            Some(Box::new(move |_, g, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let dst = &mut dx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        let src = &gd[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), dx))]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // shape manipulation
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(new_shape)?;
        let old_shape = self.shape(a).to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, g, _, _| {
                vec![Some(g.reshaped(old_shape.clone()).expect("reshape grad"))]
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shp = self.shape(a);
        if shp.len() != 2 {
            return Err(CafoError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", shp),
            });
        }
        let (m, n) = (shp[0], shp[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            vec![a.0],
            Some(Box::new(move |_, g, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = gd[j * m + i];
                    }
                }
                vec![Some(Tensor::from_parts(vec![m, n], dx))]
            })),
        ))
    }

    /// Row `i` of a 2-D tensor as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let shp = self.shape(a);
        if shp.len() != 2 || i >= shp[0] {
            return Err(CafoError::ShapeMismatch {
                op: "row",
                detail: format!("row {} of shape {:?}", i, shp),
            });
        }
        let (m, n) = (shp[0], shp[1]);
        let out = self.value(a).data()[i * n..(i + 1) * n].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            vec![a.0],
            Some(Box::new(move |_, g, _, _| {
                let mut dx = vec![0.0; m * n];
                dx[i * n..(i + 1) * n].copy_from_slice(g.data());
                vec![Some(Tensor::from_parts(vec![m, n], dx))]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // vector / scalar-node ops
    // ------------------------------------------------------------------

    /// Dot product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("dot", a, b)?;
        if self.shape(a).len() != 1 {
            return Err(CafoError::ShapeMismatch {
                op: "dot",
                detail: format!("expected rank 1, got {:?}", self.shape(a)),
            });
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            vec![a.0, b.0],
            Some(Box::new(|_, g, p, _| {
                let gs = g.data()[0];
                vec![Some(map(p[1], |y| gs * y)), Some(map(p[0], |x| gs * x))]
            })),
        ))
    }

    /// Euclidean norm of a vector. Gradient is x/||x||; defined as 0 at the origin.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(CafoError::ShapeMismatch {
                op: "l2_norm",
                detail: format!("expected rank 1, got {:?}", self.shape(a)),
            });
        }
        let n = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(self.push(
            Tensor::scalar(n),
            vec![a.0],
            Some(Box::new(|v, g, p, _| {
                let norm = v.data()[0];
                let gs = g.data()[0];
                if norm == 0.0 {
                    vec![Some(Tensor::zeros(p[0].shape()))]
                } else {
                    vec![Some(map(p[0], |x| gs * x / norm))]
                }
            })),
        ))
    }

    /// Multiply a tensor by a scalar node (broadcast).
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(CafoError::ShapeMismatch {
                op: "scale",
                detail: format!("scale factor must be scalar, got {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s).data()[0];
        let out = map(self.value(a), |x| x * sv);
        Ok(self.push(
            out,
            vec![a.0, s.0],
            Some(Box::new(|_, g, p, _| {
                let sv = p[1].data()[0];
                let da = map(g, |x| x * sv);
                let ds: f64 = g.data().iter().zip(p[0].data()).map(|(gv, av)| gv * av).sum();
                vec![Some(da), Some(Tensor::from_parts(p[1].shape().to_vec(), vec![ds]))]
            })),
        ))
    }

    /// Divide a tensor by a scalar node (broadcast).
    pub fn div_scalar_node(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(CafoError::ShapeMismatch {
                op: "div_scalar_node",
                detail: format!("divisor must be scalar, got {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s).data()[0];
        if sv == 0.0 {
            return Err(CafoError::DivisionByZero { op: "div_scalar_node" });
        }
        let out = map(self.value(a), |x| x / sv);
        Ok(self.push(
            out,
            vec![a.0, s.0],
            Some(Box::new(|_, g, p, _| {
                let sv = p[1].data()[0];
                let da = map(g, |x| x / sv);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .map(|(gv, av)| -gv * av / (sv * sv))
                    .sum();
                vec![Some(da), Some(Tensor::from_parts(p[1].shape().to_vec(), vec![ds]))]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // linear algebra
    // ------------------------------------------------------------------

    /// Matrix product [M,K] x [K,N] -> [M,N].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CafoError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            vec![a.0, b.0],
            Some(Box::new(move |_, g, p, wants| {
                let gd = g.data();
                let (ad, bd) = (p[0].data(), p[1].data());
                // dA[i,k] = sum_j g[i,j] * B[k,j]
                let da = wants[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            da[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    Tensor::from_parts(vec![m, k], da)
                });
                // dB[k,j] = sum_i A[i,k] * g[i,j]
                let db = wants[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for (d, gv) in dbrow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    Tensor::from_parts(vec![k, n], db)
                });
                vec![da, db]
            })),
        ))
    }

    /// Row-wise broadcast add: [N,C] + [C].
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(CafoError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", sa, sb),
            });
        }
        let (n, c) = (sa[0], sa[1]);
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bd) {
                *o += b;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            vec![a.0, bias.0],
            Some(Box::new(move |_, g, _, _| {
                let gd = g.data();
                let mut db = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_parts(vec![c], db))]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // convolutions
    // ------------------------------------------------------------------

    /// Standard 2-D convolution: x [B,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] {
            return Err(CafoError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}, bias {:?}", sx, sw, sb),
            });
        }
        let geom = ConvGeom::new(sx, sw[2], sw[3], stride, pad, sw[0], "conv2d")?;
        let (b, cin) = (sx[0], sx[1]);
        let cout = sw[0];
        let patch = cin * geom.kh * geom.kw;
        let hw_out = geom.ho * geom.wo;
        // lowered to a matrix product per instance: W [cout, patch] times
        // the im2col patch matrix [patch, ho*wo]
        let mut out = vec![0.0; b * cout * hw_out];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(bias).data();
            let mut cols = vec![0.0; patch * hw_out];
            for bi in 0..b {
                geom.im2col(&xd[bi * cin * geom.h * geom.w..], cin, &mut cols);
                let orow = &mut out[bi * cout * hw_out..(bi + 1) * cout * hw_out];
                for oc in 0..cout {
                    orow[oc * hw_out..(oc + 1) * hw_out].fill(bd[oc]);
                }
                matmul_into(wd, &cols, cout, patch, hw_out, orow);
            }
        }
        let shape_out = vec![b, cout, geom.ho, geom.wo];
        Ok(self.push(
            Tensor::from_parts(shape_out, out),
            vec![x.0, w.0, bias.0],
            Some(Box::new(move |_, g, p, wants| {
                let gd = g.data();
                let (xd, wd) = (p[0].data(), p[1].data());
                let mut dx = if wants[0] { vec![0.0; b * cin * geom.h * geom.w] } else { vec![] };
                let mut dw = vec![0.0; cout * patch];
                let mut db = vec![0.0; cout];
                let mut cols = vec![0.0; patch * hw_out];
                let mut dcols = vec![0.0; patch * hw_out];
                for bi in 0..b {
                    geom.im2col(&xd[bi * cin * geom.h * geom.w..], cin, &mut cols);
                    let grows = &gd[bi * cout * hw_out..(bi + 1) * cout * hw_out];
                    for oc in 0..cout {
                        let grow = &grows[oc * hw_out..(oc + 1) * hw_out];
                        db[oc] += grow.iter().sum::<f64>();
                        // dW[oc, r] += <grow, cols[r, :]>
                        for r in 0..patch {
                            let crow = &cols[r * hw_out..(r + 1) * hw_out];
                            dw[oc * patch + r] +=
                                grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    if wants[0] {
                        // dcols = W^T * g, then scatter back to image layout
                        dcols.fill(0.0);
                        for oc in 0..cout {
                            let grow = &grows[oc * hw_out..(oc + 1) * hw_out];
                            for r in 0..patch {
                                let wv = wd[oc * patch + r];
                                if wv == 0.0 {
                                    continue;
                                }
                                let drow = &mut dcols[r * hw_out..(r + 1) * hw_out];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        geom.col2im_add(&dcols, cin, &mut dx[bi * cin * geom.h * geom.w..]);
                    }
                }
                vec![
                    wants[0].then(|| Tensor::from_parts(vec![b, cin, geom.h, geom.w], dx)),
                    Some(Tensor::from_parts(vec![cout, cin, geom.kh, geom.kw], dw)),
                    Some(Tensor::from_parts(vec![cout], db)),
                ]
            })),
        ))
    }

    /// Depthwise 2-D convolution: x [B,C,H,W], w [G,C,kh,kw], bias [G*C].
    ///
    /// Each input channel c is convolved with G filters; output channel
    /// g*C + c holds filter g of channel c, so a reshape to [G, C] groups
    /// outputs by originating channel.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] * sw[1]
        {
            return Err(CafoError::ShapeMismatch {
                op: "depthwise_conv2d",
                detail: format!("x {:?}, w {:?}, bias {:?}", sx, sw, sb),
            });
        }
        let (b, c) = (sx[0], sx[1]);
        let g_filters = sw[0];
        let geom = ConvGeom::new(sx, sw[2], sw[3], stride, pad, g_filters * c, "depthwise_conv2d")?;
        let mut out = vec![0.0; b * g_filters * c * geom.ho * geom.wo];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(bias).data();
            for bi in 0..b {
                for gf in 0..g_filters {
                    for ch in 0..c {
                        let oc = gf * c + ch;
                        let o_base = (bi * g_filters * c + oc) * geom.ho * geom.wo;
                        out[o_base..o_base + geom.ho * geom.wo].fill(bd[oc]);
                        let x_base = (bi * c + ch) * geom.h * geom.w;
                        let w_base = (gf * c + ch) * geom.kh * geom.kw;
                        geom.accumulate_forward(
                            &xd[x_base..x_base + geom.h * geom.w],
                            &wd[w_base..w_base + geom.kh * geom.kw],
                            &mut out[o_base..o_base + geom.ho * geom.wo],
                        );
                    }
                }
            }
        }
        let shape_out = vec![b, g_filters * c, geom.ho, geom.wo];
        Ok(self.push(
            Tensor::from_parts(shape_out, out),
            vec![x.0, w.0, bias.0],
            Some(Box::new(move |_, g, p, wants| {
                let gd = g.data();
                let (xd, wd) = (p[0].data(), p[1].data());
                let mut dx = if wants[0] { vec![0.0; b * c * geom.h * geom.w] } else { vec![] };
                let mut dw = vec![0.0; g_filters * c * geom.kh * geom.kw];
                let mut db = vec![0.0; g_filters * c];
                let mut dx_scratch = vec![0.0; geom.h * geom.w];
                for bi in 0..b {
                    for gf in 0..g_filters {
                        for ch in 0..c {
                            let oc = gf * c + ch;
                            let o_base = (bi * g_filters * c + oc) * geom.ho * geom.wo;
                            let grow = &gd[o_base..o_base + geom.ho * geom.wo];
                            db[oc] += grow.iter().sum::<f64>();
                            let x_base = (bi * c + ch) * geom.h * geom.w;
                            let w_base = (gf * c + ch) * geom.kh * geom.kw;
                            let dx_slice: &mut [f64] = if wants[0] {
                                &mut dx[x_base..x_base + geom.h * geom.w]
                            } else {
                                &mut dx_scratch
                            };
                            geom.accumulate_backward(
                                &xd[x_base..x_base + geom.h * geom.w],
                                &wd[w_base..w_base + geom.kh * geom.kw],
                                grow,
                                dx_slice,
                                &mut dw[w_base..w_base + geom.kh * geom.kw],
                                wants[0],
                            );
                        }
                    }
                }
                vec![
                    wants[0].then(|| Tensor::from_parts(vec![b, c, geom.h, geom.w], dx)),
                    Some(Tensor::from_parts(vec![g_filters, c, geom.kh, geom.kw], dw)),
                    Some(Tensor::from_parts(vec![g_filters * c], db)),
                ]
            })),
        ))
    }

    /// Depthwise convolution fused with channel-wise global average and max
    /// pooling: x [B,C,H,W], w [G,C,kh,kw], bias [G*C] -> [B, G*C] holding
    /// avgpool + maxpool of each convolved channel.
    ///
    /// Equivalent to `depthwise_conv2d` followed by `global_avg_pool` plus
    /// `global_max_pool` and an add, without materializing the [B,G*C,H,W]
    /// intermediate; the attention head only consumes the pooled statistics.
    pub fn depthwise_conv_avgmax_sum(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] * sw[1]
        {
            return Err(CafoError::ShapeMismatch {
                op: "depthwise_conv_avgmax_sum",
                detail: format!("x {:?}, w {:?}, bias {:?}", sx, sw, sb),
            });
        }
        let (b, c) = (sx[0], sx[1]);
        let g_filters = sw[0];
        let geom = ConvGeom::new(sx, sw[2], sw[3], stride, pad, g_filters * c, "depthwise_conv_avgmax_sum")?;
        let hw = geom.ho * geom.wo;
        let inv_hw = 1.0 / hw as f64;
        let mut out = vec![0.0; b * g_filters * c];
        let mut argmax = vec![0usize; b * g_filters * c];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(bias).data();
            let mut channel = vec![0.0; hw];
            for bi in 0..b {
                for gf in 0..g_filters {
                    for ch in 0..c {
                        let oc = gf * c + ch;
                        channel.fill(bd[oc]);
                        let x_base = (bi * c + ch) * geom.h * geom.w;
                        let w_base = (gf * c + ch) * geom.kh * geom.kw;
                        geom.accumulate_forward(
                            &xd[x_base..x_base + geom.h * geom.w],
                            &wd[w_base..w_base + geom.kh * geom.kw],
                            &mut channel,
                        );
                        let mut sum = 0.0;
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for (i, &v) in channel.iter().enumerate() {
                            sum += v;
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                        out[bi * g_filters * c + oc] = sum * inv_hw + best;
                        argmax[bi * g_filters * c + oc] = best_i;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, g_filters * c], out),
            vec![x.0, w.0, bias.0],
            Some(Box::new(move |_, g, p, wants| {
                let gd = g.data();
                let (xd, wd) = (p[0].data(), p[1].data());
                let mut dx = if wants[0] { vec![0.0; b * c * geom.h * geom.w] } else { vec![] };
                let mut dw = vec![0.0; g_filters * c * geom.kh * geom.kw];
                let mut db = vec![0.0; g_filters * c];
                let mut dx_scratch = vec![0.0; geom.h * geom.w];
                let mut grout = vec![0.0; hw];
                for bi in 0..b {
                    for gf in 0..g_filters {
                        for ch in 0..c {
                            let oc = gf * c + ch;
                            let gv = gd[bi * g_filters * c + oc];
                            if gv == 0.0 {
                                continue;
                            }
                            // the pooled-output gradient spreads uniformly
                            // through the average and lands once on the max
                            grout.fill(gv * inv_hw);
                            grout[argmax[bi * g_filters * c + oc]] += gv;
                            db[oc] += 2.0 * gv;
                            let x_base = (bi * c + ch) * geom.h * geom.w;
                            let w_base = (gf * c + ch) * geom.kh * geom.kw;
                            let dx_slice: &mut [f64] = if wants[0] {
                                &mut dx[x_base..x_base + geom.h * geom.w]
                            } else {
                                &mut dx_scratch
                            };
                            geom.accumulate_backward(
                                &xd[x_base..x_base + geom.h * geom.w],
                                &wd[w_base..w_base + geom.kh * geom.kw],
                                &grout,
                                dx_slice,
                                &mut dw[w_base..w_base + geom.kh * geom.kw],
                                wants[0],
                            );
                        }
                    }
                }
                vec![
                    wants[0].then(|| Tensor::from_parts(vec![b, c, geom.h, geom.w], dx)),
                    Some(Tensor::from_parts(vec![g_filters, c, geom.kh, geom.kw], dw)),
                    Some(Tensor::from_parts(vec![g_filters * c], db)),
                ]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // pooling
    // ------------------------------------------------------------------

    /// Windowed average pooling over spatial dims, no padding.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let geom = PoolGeom::new(&sx, k, stride, "avg_pool2d")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; geom.out_len()];
        let inv = 1.0 / (k * k) as f64;
        for bc in 0..geom.bc {
            let x_base = bc * geom.h * geom.w;
            let o_base = bc * geom.ho * geom.wo;
            for oh in 0..geom.ho {
                for ow in 0..geom.wo {
                    let mut acc = 0.0;
                    for dh in 0..k {
                        let row = x_base + (oh * stride + dh) * geom.w + ow * stride;
                        acc += xd[row..row + k].iter().sum::<f64>();
                    }
                    out[o_base + oh * geom.wo + ow] = acc * inv;
                }
            }
        }
        let out_shape = vec![sx[0], sx[1], geom.ho, geom.wo];
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            vec![x.0],
            Some(Box::new(move |_, g, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; geom.bc * geom.h * geom.w];
                for bc in 0..geom.bc {
                    let x_base = bc * geom.h * geom.w;
                    let o_base = bc * geom.ho * geom.wo;
                    for oh in 0..geom.ho {
                        for ow in 0..geom.wo {
                            let gv = gd[o_base + oh * geom.wo + ow] * inv;
                            for dh in 0..k {
                                let row = x_base + (oh * stride + dh) * geom.w + ow * stride;
                                for slot in &mut dx[row..row + k] {
                                    *slot += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![sx[0], sx[1], geom.h, geom.w], dx))]
            })),
        ))
    }

    /// Windowed max pooling; the gradient routes to the first (lowest flat
    /// index) maximum of each window.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let geom = PoolGeom::new(&sx, k, stride, "max_pool2d")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; geom.out_len()];
        let mut argmax = vec![0usize; geom.out_len()];
        for bc in 0..geom.bc {
            let x_base = bc * geom.h * geom.w;
            let o_base = bc * geom.ho * geom.wo;
            for oh in 0..geom.ho {
                for ow in 0..geom.wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dh in 0..k {
                        let row = x_base + (oh * stride + dh) * geom.w + ow * stride;
                        for dw in 0..k {
                            let v = xd[row + dw];
                            if v > best {
                                best = v;
                                best_idx = row + dw;
                            }
                        }
                    }
                    out[o_base + oh * geom.wo + ow] = best;
                    argmax[o_base + oh * geom.wo + ow] = best_idx;
                }
            }
        }
        let out_shape = vec![sx[0], sx[1], geom.ho, geom.wo];
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            vec![x.0],
            Some(Box::new(move |_, g, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; geom.bc * geom.h * geom.w];
                for (gi, &xi) in argmax.iter().enumerate() {
                    dx[xi] += gd[gi];
                }
                vec![Some(Tensor::from_parts(vec![sx[0], sx[1], geom.h, geom.w], dx))]
            })),
        ))
    }

    /// Spatial mean per channel: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(CafoError::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("expected rank 4, got {:?}", sx),
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..b * c)
            .map(|bc| xd[bc * hw..(bc + 1) * hw].iter().sum::<f64>() * inv)
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![b, c], out),
            vec![x.0],
            Some(Box::new(move |_, g, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; b * c * hw];
                for bc in 0..b * c {
                    let gv = gd[bc] * inv;
                    dx[bc * hw..(bc + 1) * hw].fill(gv);
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], dx))]
            })),
        ))
    }

    /// Spatial max per channel: [B,C,H,W] -> [B,C]; first-index tie-break.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(CafoError::ShapeMismatch {
                op: "global_max_pool",
                detail: format!("expected rank 4, got {:?}", sx),
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let mut argmax = vec![0usize; b * c];
        for bc in 0..b * c {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for (i, &v) in xd[bc * hw..(bc + 1) * hw].iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = i;
                }
            }
            out[bc] = best;
            argmax[bc] = bc * hw + best_idx;
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c], out),
            vec![x.0],
            Some(Box::new(move |_, g, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; b * c * hw];
                for (bc, &xi) in argmax.iter().enumerate() {
                    dx[xi] = gd[bc];
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], dx))]
            })),
        ))
    }

    // ------------------------------------------------------------------
    // broadcasting helpers and losses
    // ------------------------------------------------------------------

    /// Gate [B,C,H,W] by per-channel scalars [B,C].
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        if sx.len() != 4 || sa.len() != 2 || sx[0] != sa[0] || sx[1] != sa[1] {
            return Err(CafoError::ShapeMismatch {
                op: "mul_channel",
                detail: format!("x {:?}, gate {:?}", sx, sa),
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let xd = self.value(x).data();
        let ad = self.value(a).data();
        let mut out = vec![0.0; xd.len()];
        for bc in 0..b * c {
            let gate = ad[bc];
            let src = &xd[bc * hw..(bc + 1) * hw];
            let dst = &mut out[bc * hw..(bc + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * gate;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, h, w], out),
            vec![x.0, a.0],
            Some(Box::new(move |_, g, p, wants| {
                let gd = g.data();
                let (xd, ad) = (p[0].data(), p[1].data());
                let mut dx = if wants[0] { vec![0.0; xd.len()] } else { vec![] };
                let mut da = vec![0.0; b * c];
                for bc in 0..b * c {
                    let gate = ad[bc];
                    let gslice = &gd[bc * hw..(bc + 1) * hw];
                    let xslice = &xd[bc * hw..(bc + 1) * hw];
                    let mut acc = 0.0;
                    if wants[0] {
                        let dslice = &mut dx[bc * hw..(bc + 1) * hw];
                        for ((d, gv), xv) in dslice.iter_mut().zip(gslice).zip(xslice) {
                            *d = gv * gate;
                            acc += gv * xv;
                        }
                    } else {
                        for (gv, xv) in gslice.iter().zip(xslice) {
                            acc += gv * xv;
                        }
                    }
                    da[bc] = acc;
                }
                vec![
                    wants[0].then(|| Tensor::from_parts(vec![b, c, h, w], dx)),
                    Some(Tensor::from_parts(vec![b, c], da)),
                ]
            })),
        ))
    }

    /// Mean softmax cross-entropy over a batch of logits [B,C] with integer labels.
    ///
    /// The value equals the mean of -log(p_true); per-row input gradients sum to zero.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(CafoError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?}, {} labels", sl, labels.len()),
            });
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(CafoError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("label {} out of range for {} classes", bad, c),
            });
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (bi, &y) in labels.iter().enumerate() {
            let row = &xd[bi * c..(bi + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[bi * c + j] = e;
                denom += e;
            }
            for p in &mut probs[bi * c..(bi + 1) * c] {
                *p /= denom;
            }
            loss += denom.ln() + m - row[y];
        }
        loss /= b as f64;
        let labels_owned = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Some(Box::new(move |_, g, _, _| {
                let gs = g.data()[0] / b as f64;
                let mut dx = probs.clone();
                for (bi, &y) in labels_owned.iter().enumerate() {
                    dx[bi * c + y] -= 1.0;
                }
                for v in dx.iter_mut() {
                    *v *= gs;
                }
                vec![Some(Tensor::from_parts(vec![b, c], dx))]
            })),
        ))
    }

    /// Softmax probabilities of the node value (forward-only helper).
    pub fn softmax_values(&self, logits: Var) -> Result<Tensor> {
        let sl = self.shape(logits);
        if sl.len() != 2 {
            return Err(CafoError::ShapeMismatch {
                op: "softmax_values",
                detail: format!("expected rank 2, got {:?}", sl),
            });
        }
        let (b, c) = (sl[0], sl[1]);
        let xd = self.value(logits).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let row = &xd[bi * c..(bi + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[bi * c + j] = e;
                denom += e;
            }
            for p in &mut out[bi * c..(bi + 1) * c] {
                *p /= denom;
            }
        }
        Tensor::new(vec![b, c], out)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

// ----------------------------------------------------------------------
// kernels
// ----------------------------------------------------------------------

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// C += A * B with C caller-initialized; rows of B and C are contiguous.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Shared geometry for both convolution variants (single channel pair).
#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(
        sx: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        _cout: usize,
        op: &'static str,
    ) -> Result<Self> {
        let (h, w) = (sx[2], sx[3]);
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(CafoError::ShapeMismatch {
                op,
                detail: format!(
                    "kernel {}x{} stride {} pad {} on {}x{} input",
                    kh, kw, stride, pad, h, w
                ),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { h, w, kh, kw, stride, pad, ho, wo })
    }

    /// out[oh,ow] += sum_{dh,dw} w[dh,dw] * x[oh*s+dh-p, ow*s+dw-p]
    fn accumulate_forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        for dh in 0..self.kh {
            for dw in 0..self.kw {
                let wv = w[dh * self.kw + dw];
                if wv == 0.0 {
                    continue;
                }
                self.for_valid_rows(dh, dw, |oh, ow_lo, ow_hi, ih| {
                    let xrow = &x[ih * self.w..(ih + 1) * self.w];
                    let orow = &mut out[oh * self.wo..(oh + 1) * self.wo];
                    if self.stride == 1 {
                        // contiguous axpy over the valid span
                        let iw_lo = (ow_lo as isize + dw as isize - self.pad as isize) as usize;
                        let len = ow_hi - ow_lo;
                        let xs = &xrow[iw_lo..iw_lo + len];
                        let os = &mut orow[ow_lo..ow_hi];
                        for (o, xv) in os.iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            let iw = ow * self.stride + dw - self.pad;
                            orow[ow] += wv * xrow[iw];
                        }
                    }
                });
            }
        }
    }

    /// dx[ih,iw] += w * g[oh,ow];  dw[dh,dw] += x[ih,iw] * g[oh,ow].
    /// Skips the dx accumulation when the input gradient is not wanted.
    fn accumulate_backward(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        dx: &mut [f64],
        dw: &mut [f64],
        want_dx: bool,
    ) {
        for dh in 0..self.kh {
            for dwi in 0..self.kw {
                let wv = w[dh * self.kw + dwi];
                let mut w_acc = 0.0;
                self.for_valid_rows(dh, dwi, |oh, ow_lo, ow_hi, ih| {
                    let grow = &g[oh * self.wo..(oh + 1) * self.wo];
                    let xrow = &x[ih * self.w..(ih + 1) * self.w];
                    if self.stride == 1 {
                        let iw_lo = (ow_lo as isize + dwi as isize - self.pad as isize) as usize;
                        let len = ow_hi - ow_lo;
                        let gs = &grow[ow_lo..ow_hi];
                        let xs = &xrow[iw_lo..iw_lo + len];
                        if want_dx {
                            let dxs = &mut dx[ih * self.w + iw_lo..ih * self.w + iw_lo + len];
                            for ((d, gv), xv) in dxs.iter_mut().zip(gs).zip(xs) {
                                *d += wv * gv;
                                w_acc += xv * gv;
                            }
                        } else {
                            for (gv, xv) in gs.iter().zip(xs) {
                                w_acc += xv * gv;
                            }
                        }
                    } else {
                        let dxrow = &mut dx[ih * self.w..(ih + 1) * self.w];
                        if want_dx {
                            for ow in ow_lo..ow_hi {
                                let iw = ow * self.stride + dwi - self.pad;
                                dxrow[iw] += wv * grow[ow];
                                w_acc += xrow[iw] * grow[ow];
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ow * self.stride + dwi - self.pad;
                                w_acc += xrow[iw] * grow[ow];
                            }
                        }
                    }
                });
                dw[dh * self.kw + dwi] += w_acc;
            }
        }
    }

    /// Write the patch matrix for one instance: row (ic, kh, kw), column
    /// (oh, ow); out-of-bounds taps are zero.
    fn im2col(&self, x: &[f64], cin: usize, cols: &mut [f64]) {
        let hw_out = self.ho * self.wo;
        cols.fill(0.0);
        for ic in 0..cin {
            let xc = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for dh in 0..self.kh {
                for dw in 0..self.kw {
                    let r = (ic * self.kh + dh) * self.kw + dw;
                    let crow = &mut cols[r * hw_out..(r + 1) * hw_out];
                    self.for_valid_rows(dh, dw, |oh, ow_lo, ow_hi, ih| {
                        let xrow = &xc[ih * self.w..(ih + 1) * self.w];
                        let dst = &mut crow[oh * self.wo + ow_lo..oh * self.wo + ow_hi];
                        if self.stride == 1 {
                            let iw_lo =
                                (ow_lo as isize + dw as isize - self.pad as isize) as usize;
                            dst.copy_from_slice(&xrow[iw_lo..iw_lo + ow_hi - ow_lo]);
                        } else {
                            for (slot, ow) in dst.iter_mut().zip(ow_lo..ow_hi) {
                                *slot = xrow[ow * self.stride + dw - self.pad];
                            }
                        }
                    });
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back into image layout.
    fn col2im_add(&self, cols: &[f64], cin: usize, dx: &mut [f64]) {
        let hw_out = self.ho * self.wo;
        for ic in 0..cin {
            let dxc = &mut dx[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for dh in 0..self.kh {
                for dw in 0..self.kw {
                    let r = (ic * self.kh + dh) * self.kw + dw;
                    let crow = &cols[r * hw_out..(r + 1) * hw_out];
                    self.for_valid_rows(dh, dw, |oh, ow_lo, ow_hi, ih| {
                        let dxrow = &mut dxc[ih * self.w..(ih + 1) * self.w];
                        let src = &crow[oh * self.wo + ow_lo..oh * self.wo + ow_hi];
                        if self.stride == 1 {
                            let iw_lo =
                                (ow_lo as isize + dw as isize - self.pad as isize) as usize;
                            for (d, v) in dxrow[iw_lo..iw_lo + ow_hi - ow_lo].iter_mut().zip(src)
                            {
                                *d += v;
                            }
                        } else {
                            for (v, ow) in src.iter().zip(ow_lo..ow_hi) {
                                dxrow[ow * self.stride + dw - self.pad] += v;
                            }
                        }
                    });
                }
            }
        }
    }

    /// Enumerate output rows whose input row is in bounds, with the valid
    /// output-column range for kernel offset (dh, dw).
    fn for_valid_rows(&self, dh: usize, dw: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let ow_lo = ceil_div_nonneg(p - dw as isize, s);
        let ow_hi_excl = {
            // ow*s + dw - p <= w-1
            let hi = (self.w as isize - 1 - dw as isize + p).div_euclid(s) + 1;
            hi.clamp(0, self.wo as isize) as usize
        };
        let ow_lo = ow_lo.clamp(0, self.wo as isize) as usize;
        if ow_lo >= ow_hi_excl {
            return;
        }
        for oh in 0..self.ho {
            let ih = oh as isize * s + dh as isize - p;
            if ih < 0 || ih >= self.h as isize {
                continue;
            }
            f(oh, ow_lo, ow_hi_excl, ih as usize);
        }
    }
}

fn ceil_div_nonneg(a: isize, b: isize) -> isize {
    if a <= 0 {
        0
    } else {
        (a + b - 1) / b
    }
}

struct PoolGeom {
    bc: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl PoolGeom {
    fn new(sx: &[usize], k: usize, stride: usize, op: &'static str) -> Result<Self> {
        if sx.len() != 4 || k == 0 || stride == 0 || sx[2] < k || sx[3] < k {
            return Err(CafoError::ShapeMismatch {
                op,
                detail: format!("window {} stride {} on shape {:?}", k, stride, sx),
            });
        }
        let (h, w) = (sx[2], sx[3]);
        Ok(Self {
            bc: sx[0] * sx[1],
            h,
            w,
            ho: (h - k) / stride + 1,
            wo: (w - k) / stride + 1,
        })
    }

    fn out_len(&self) -> usize {
        self.bc * self.ho * self.wo
    }
}
