//! Static computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a list of op records in insertion order, which is also
//! its execution order. Leaves are named parameters bound at forward time
//! through a [`LeafSource`]; inputs are named tensors passed to
//! [`Graph::forward`]. The forward pass caches every node value, and
//! [`Graph::backward`] consumes that cache.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::kernels::{conv2d_backward, conv2d_forward, ConvShape};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Anything that can resolve a leaf name to its current value.
pub trait LeafSource {
    fn leaf(&self, name: &str) -> Option<&Tensor>;
}

impl LeafSource for HashMap<String, Tensor> {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl LeafSource for BTreeMap<String, Tensor> {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl LeafSource for [(String, Tensor)] {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Leaf(String),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// Concatenation along axis 1 of rank-4 tensors.
    ConcatChannels(Vec<NodeId>),
    Mean(NodeId),
    Sum(NodeId),
    L1Loss(NodeId, NodeId),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Leaf(_) => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(a) | Op::Scale(a, _) | Op::Mean(a) | Op::Sum(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L1Loss(a, b) => vec![*a, *b],
            Op::ConcatChannels(v) => v.clone(),
        }
    }
}

/// Per-leaf gradients in leaf declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    output: Option<NodeId>,
    cache: Option<Vec<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(operand.0 < self.nodes.len(), "operand from another graph");
        }
        self.cache = None;
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    /// Declare a named trainable leaf.
    pub fn leaf(&mut self, name: &str) -> NodeId {
        assert!(
            !self.leaf_names().any(|n| n == name),
            "duplicate leaf name {name}"
        );
        self.push(Op::Leaf(name.to_string()))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, b, pad })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        self.push(Op::ConcatChannels(parts.to_vec()))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::L1Loss(pred, target))
    }

    pub fn set_output(&mut self, node: NodeId) {
        assert!(node.0 < self.nodes.len());
        self.output = Some(node);
        self.cache = None;
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|op| match op {
            Op::Leaf(n) => Some(n.as_str()),
            _ => None,
        })
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|op| match op {
            Op::Input(n) => Some(n.as_str()),
            _ => None,
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Evaluate every node in order and return the output value.
    pub fn forward(
        &mut self,
        leaves: &(impl LeafSource + ?Sized),
        inputs: &[(&str, &Tensor)],
    ) -> Result<Tensor> {
        let out = self
            .output
            .ok_or_else(|| Error::State("graph has no output node".into()))?;
        self.cache = None;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for op in &self.nodes {
            let v = eval(op, &values, leaves, inputs)?;
            values.push(v);
        }
        let result = values[out.0].clone();
        self.cache = Some(values);
        Ok(result)
    }

    /// Gradients of the scalar output with respect to every leaf.
    pub fn backward(&mut self) -> Result<Gradients> {
        self.backward_for(None)
    }

    /// Like [`Graph::backward`], but only differentiates the named leaves;
    /// every other leaf reports an all-zero gradient.
    pub fn backward_for(&mut self, wanted: Option<&HashSet<String>>) -> Result<Gradients> {
        let values = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let out = self.output.expect("cache implies an output");
        if values[out.0].numel() != 1 {
            return Err(Error::dim("backward", "scalar output", values[out.0].dims()));
        }

        // needs[i]: node i depends on a wanted leaf.
        let mut needs = vec![false; self.nodes.len()];
        for (i, op) in self.nodes.iter().enumerate() {
            needs[i] = match op {
                Op::Leaf(n) => wanted.map_or(true, |w| w.contains(n)),
                Op::Input(_) => false,
                other => other.operands().iter().any(|o| needs[o.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            if let Op::Leaf(_) = self.nodes[i] {
                grads[i] = Some(g);
                continue;
            }
            for (operand, contribution) in backprop(&self.nodes[i], values, i, &g, &needs)? {
                match grads[operand.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    None => grads[operand.0] = Some(contribution),
                }
            }
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Leaf(name) => {
                    let dims = values[i].dims();
                    let t = match grads[i].take() {
                        Some(g) => Tensor::new(dims.to_vec(), g).expect("gradient dims"),
                        None => Tensor::zeros(dims),
                    };
                    Some((name.clone(), t))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { entries })
    }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(op, format!("{:?}", a.dims()), b.dims()));
    }
    Ok(())
}

fn zip_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    same_dims(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims().to_vec(), data)
}

fn eval(
    op: &Op,
    values: &[Tensor],
    leaves: &(impl LeafSource + ?Sized),
    inputs: &[(&str, &Tensor)],
) -> Result<Tensor> {
    let v = |id: &NodeId| &values[id.0];
    Ok(match op {
        Op::Input(name) => (*inputs
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::State(format!("missing input `{name}`")))?
            .1)
            .clone(),
        Op::Leaf(name) => leaves
            .leaf(name)
            .ok_or_else(|| Error::State(format!("unbound leaf `{name}`")))?
            .clone(),
        Op::Conv2d { x, w, b, pad } => {
            let (x, w) = (v(x), v(w));
            let s = ConvShape::from_dims(x.dims(), w.dims(), *pad)?;
            let bias = match b {
                Some(b) => {
                    let b = v(b);
                    if b.dims() != [s.out_channels] {
                        return Err(Error::dim("conv2d", format!("bias [{}]", s.out_channels), b.dims()));
                    }
                    Some(b.data())
                }
                None => None,
            };
            Tensor::new(s.out_dims().to_vec(), conv2d_forward(x.data(), w.data(), bias, &s))?
        }
        Op::Relu(a) => v(a).map(|x| if x < 0.0 { 0.0 } else { x }),
        Op::Add(a, b) => zip_map("add", v(a), v(b), |x, y| x + y)?,
        Op::Sub(a, b) => zip_map("sub", v(a), v(b), |x, y| x - y)?,
        Op::Mul(a, b) => zip_map("mul", v(a), v(b), |x, y| x * y)?,
        Op::Scale(a, f) => v(a).map(|x| x * f),
        Op::ConcatChannels(parts) => {
            let first = v(&parts[0]).dims();
            if first.len() != 4 {
                return Err(Error::dim("concat", "[N, C, H, W]", first));
            }
            let (n, h, w) = (first[0], first[2], first[3]);
            let mut channels = 0;
            for p in parts {
                let d = v(p).dims();
                if d.len() != 4 || d[0] != n || d[2] != h || d[3] != w {
                    return Err(Error::dim("concat", format!("[{n}, C, {h}, {w}]"), d));
                }
                channels += d[1];
            }
            let mut data = Vec::with_capacity(n * channels * h * w);
            for i in 0..n {
                for p in parts {
                    let t = v(p);
                    let per = t.dims()[1] * h * w;
                    data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
            }
            Tensor::new(vec![n, channels, h, w], data)?
        }
        Op::Mean(a) => Tensor::scalar(v(a).mean() as f32),
        Op::Sum(a) => Tensor::scalar(v(a).data().iter().map(|&x| x as f64).sum::<f64>() as f32),
        Op::L1Loss(a, b) => {
            let (a, b) = (v(a), v(b));
            same_dims("l1_loss", a, b)?;
            let total: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y).abs() as f64)
                .sum();
            Tensor::scalar((total / a.numel() as f64) as f32)
        }
    })
}

/// Vector-Jacobian products of one node onto its operands that need them.
fn backprop(
    op: &Op,
    values: &[Tensor],
    index: usize,
    g: &[f32],
    needs: &[bool],
) -> Result<Vec<(NodeId, Vec<f32>)>> {
    let v = |id: &NodeId| &values[id.0];
    let want = |id: &NodeId| needs[id.0];
    let mut out = Vec::new();
    match op {
        Op::Input(_) | Op::Leaf(_) => {}
        Op::Conv2d { x, w, b, pad } => {
            let s = ConvShape::from_dims(v(x).dims(), v(w).dims(), *pad)?;
            let grads = conv2d_backward(
                v(x).data(),
                v(w).data(),
                g,
                &s,
                want(x),
                want(w),
                b.is_some_and(|b| want(&b)),
            );
            if let Some(gx) = grads.input {
                out.push((*x, gx));
            }
            if let Some(gw) = grads.weight {
                out.push((*w, gw));
            }
            if let (Some(b), Some(gb)) = (b, grads.bias) {
                out.push((*b, gb));
            }
        }
        Op::Relu(a) => {
            let x = v(a).data();
            out.push((*a, x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect()));
        }
        Op::Add(a, b) => {
            if want(a) {
                out.push((*a, g.to_vec()));
            }
            if want(b) {
                out.push((*b, g.to_vec()));
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                out.push((*a, g.to_vec()));
            }
            if want(b) {
                out.push((*b, g.iter().map(|&x| -x).collect()));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                out.push((*a, g.iter().zip(v(b).data()).map(|(&g, &y)| g * y).collect()));
            }
            if want(b) {
                out.push((*b, g.iter().zip(v(a).data()).map(|(&g, &x)| g * x).collect()));
            }
        }
        Op::Scale(a, f) => out.push((*a, g.iter().map(|&x| x * f).collect())),
        Op::ConcatChannels(parts) => {
            let d = values[index].dims();
            let (n, c_total, plane) = (d[0], d[1], d[2] * d[3]);
            let mut offset = 0;
            for p in parts {
                let c = v(p).dims()[1];
                if want(p) {
                    let mut gp = Vec::with_capacity(n * c * plane);
                    for i in 0..n {
                        let start = (i * c_total + offset) * plane;
                        gp.extend_from_slice(&g[start..start + c * plane]);
                    }
                    out.push((*p, gp));
                }
                offset += c;
            }
        }
        Op::Mean(a) => {
            let n = v(a).numel();
            out.push((*a, vec![g[0] / n as f32; n]));
        }
        Op::Sum(a) => out.push((*a, vec![g[0]; v(a).numel()])),
        Op::L1Loss(a, b) => {
            let (x, y) = (v(a).data(), v(b).data());
            let scale = g[0] / x.len() as f32;
            let sign: Vec<f32> = x
                .iter()
                .zip(y)
                .map(|(&p, &t)| {
                    if p > t {
                        scale
                    } else if p < t {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            if want(b) {
                out.push((*b, sign.iter().map(|&s| -s).collect()));
            }
            if want(a) {
                out.push((*a, sign));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(entries: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        entries.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.set_output(x);
        let t = Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5);
        let y = g.forward(&HashMap::new(), &[("x", &t)]).unwrap();
        assert!(y.bit_eq(&t));
    }

    #[test]
    fn l1_of_equal_operands_is_zero() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let l = g.l1_loss(a, b);
        g.set_output(l);
        let t = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f32).sin());
        let y = g.forward(&HashMap::new(), &[("a", &t), ("b", &t)]).unwrap();
        assert_eq!(y.item(), Some(0.0));
    }

    #[test]
    fn conv_graph_center_value() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.leaf("w");
        let y = g.conv2d(x, w, None, 1);
        g.set_output(y);
        let src = leaves(&[("w", Tensor::full(&[1, 1, 3, 3], 1.0))]);
        let out = g.forward(&src, &[("x", &Tensor::full(&[1, 1, 5, 5], 1.0))]).unwrap();
        assert_eq!(out.data()[12], 9.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf("w");
        let s = g.sum(w);
        g.set_output(s);
        let src = leaves(&[("w", Tensor::from_fn(&[3, 2], |i| i as f32 * 0.3 - 1.0))]);
        g.forward(&src, &[]).unwrap();
        let grads = g.backward().unwrap();
        assert!(grads.get("w").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::new();
        let w = g.leaf("w");
        let sq = g.mul(w, w);
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.set_output(half);
        let wt = Tensor::from_fn(&[4], |i| i as f32 * 0.7 - 1.2);
        g.forward(&leaves(&[("w", wt.clone())]), &[]).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads.get("w").unwrap(), &wt);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = Graph::new();
        let w = g.leaf("w");
        let s = g.sum(w);
        g.set_output(s);
        assert!(matches!(g.backward(), Err(Error::State(_))));
        g.forward(&leaves(&[("w", Tensor::zeros(&[2]))]), &[]).unwrap();
        g.clear_cache();
        assert!(matches!(g.backward(), Err(Error::State(_))));
    }

    #[test]
    fn backward_needs_scalar_output() {
        let mut g = Graph::new();
        let w = g.leaf("w");
        let r = g.relu(w);
        g.set_output(r);
        g.forward(&leaves(&[("w", Tensor::zeros(&[2]))]), &[]).unwrap();
        assert!(matches!(g.backward(), Err(Error::Dim { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf("a");
        let _b = g.leaf("b");
        let s = g.sum(a);
        g.set_output(s);
        let src = leaves(&[("a", Tensor::full(&[2], 3.0)), ("b", Tensor::full(&[3], 5.0))]);
        g.forward(&src, &[]).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads.get("b").unwrap(), &Tensor::zeros(&[3]));
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn dim_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let s = g.add(a, b);
        g.set_output(s);
        let err = g
            .forward(&HashMap::new(), &[("a", &Tensor::zeros(&[2])), ("b", &Tensor::zeros(&[3]))])
            .unwrap_err();
        match err {
            Error::Dim { op, got, .. } => {
                assert_eq!(op, "add");
                assert_eq!(got, vec![3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let build = || {
            let mut g = Graph::new();
            let x = g.input("x");
            let w = g.leaf("w");
            let b = g.leaf("b");
            let c = g.conv2d(x, w, Some(b), 1);
            let r = g.relu(c);
            let m = g.mean(r);
            g.set_output(m);
            g
        };
        let src = leaves(&[
            ("w", Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 31 % 17) as f32 - 8.0) * 0.05)),
            ("b", Tensor::from_fn(&[3], |i| i as f32 * 0.1)),
        ]);
        let x = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 7 % 13) as f32) * 0.1);
        let mut g = build();
        let first = g.forward(&src, &[("x", &x)]).unwrap();
        g.clear_cache();
        let again = g.forward(&src, &[("x", &x)]).unwrap();
        let fresh = build().forward(&src, &[("x", &x)]).unwrap();
        assert!(first.bit_eq(&again) && first.bit_eq(&fresh));
    }

    #[test]
    fn masked_backward_matches_full_on_wanted_leaves() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w0 = g.leaf("w0");
        let w1 = g.leaf("w1");
        let h = g.conv2d(x, w0, None, 1);
        let h = g.relu(h);
        let y = g.conv2d(h, w1, None, 1);
        let t = g.input("t");
        let l = g.l1_loss(y, t);
        g.set_output(l);
        let src = leaves(&[
            ("w0", Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f32 * 0.37).sin())),
            ("w1", Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f32 * 0.91).cos())),
        ]);
        let xin = Tensor::from_fn(&[1, 1, 5, 5], |i| (i as f32 * 0.13).sin());
        let tgt = Tensor::zeros(&[1, 1, 5, 5]);
        g.forward(&src, &[("x", &xin), ("t", &tgt)]).unwrap();
        let full = g.backward().unwrap();
        let wanted: HashSet<String> = ["w0".to_string()].into();
        let part = g.backward_for(Some(&wanted)).unwrap();
        assert!(part.get("w0").unwrap().bit_eq(full.get("w0").unwrap()));
        assert_eq!(part.get("w1").unwrap(), &Tensor::zeros(&[1, 2, 3, 3]));
    }
}
