use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::graph::{concat_geometry, with_grad_mode, OpKind, Origin, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar root with respect to the `requires_grad` leaves it depends on.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<u64, Var>,
}

impl GradientMap {
    pub fn get(&self, leaf: &Var) -> Option<&Var> {
        self.grads.get(&leaf.id())
    }

    pub fn tensor(&self, leaf: &Var) -> Option<&Tensor> {
        self.get(leaf).map(Var::value)
    }

    /// Gradient for `leaf`, or zeros of its shape when the root does not depend on it.
    pub fn get_or_zeros(&self, leaf: &Var) -> Var {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Var::constant(Tensor::zeros(leaf.shape())))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, leaf: &Var) -> bool {
        self.grads.contains_key(&leaf.id())
    }
}

/// Nodes reachable from `root` through `requires_grad` edges, parents before children.
pub(crate) fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut seen = HashSet::new();
    let mut stack: Vec<(Var, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.id());
    while let Some((node, next)) = stack.pop() {
        if next < node.parents().len() {
            let parent = node.parents()[next].clone();
            stack.push((node, next + 1));
            if parent.requires_grad() && seen.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Reverse-mode derivatives of the scalar `root`.
///
/// With `create_graph` the gradients are themselves graph nodes extending the original
/// graph, so differentiating them again yields second-order terms.
pub fn backward(root: &Var, create_graph: bool) -> Result<GradientMap> {
    propagate(root, create_graph, None)
}

/// Gradients of `root` for each of `wrt`, zeros where the root does not depend on one.
///
/// Unlike [`backward`], the targets may be interior nodes; only the part of the graph
/// between the targets and the root is traversed.
pub fn grad(root: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    let targets: HashSet<u64> = wrt.iter().map(Var::id).collect();
    let map = propagate(root, create_graph, Some(&targets))?;
    Ok(wrt.iter().map(|l| map.get_or_zeros(l)).collect())
}

fn propagate(root: &Var, create_graph: bool, targets: Option<&HashSet<u64>>) -> Result<GradientMap> {
    if !root.value().is_scalar() {
        return Err(Error::NotScalar { shape: root.shape().to_vec() });
    }
    with_grad_mode(create_graph, || {
        let mut order = topo_order(root);
        if let Some(targets) = targets {
            // Keep nodes lying on some target → root path.
            let mut relevant: HashSet<u64> = HashSet::new();
            for node in &order {
                if targets.contains(&node.id()) || node.parents().iter().any(|p| relevant.contains(&p.id())) {
                    relevant.insert(node.id());
                }
            }
            order.retain(|n| relevant.contains(&n.id()));
        }
        let mut pending: HashMap<u64, Var> = HashMap::new();
        let mut out = GradientMap::default();
        if let Some(last) = order.last() {
            if last.id() == root.id() {
                pending.insert(last.id(), Var::constant(Tensor::ones(last.shape())));
            }
        }
        let keep: HashSet<u64> = order.iter().map(Var::id).collect();
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            let is_target = targets.map_or(node.is_leaf(), |t| t.contains(&node.id()));
            if is_target {
                out.grads.insert(node.id(), g.clone());
            }
            let Origin::Op(op) = &node.0.origin else { continue };
            for (parent, contribution) in node.parents().iter().zip(adjoint(op, node, &g)) {
                let Some(c) = contribution else { continue };
                if !parent.requires_grad() || !keep.contains(&parent.id()) {
                    continue;
                }
                let acc = match pending.remove(&parent.id()) {
                    Some(prev) => prev.add_(&c),
                    None => c,
                };
                pending.insert(parent.id(), acc);
            }
        }
        Ok(out)
    })
}

fn ones_like(shape: &[usize]) -> Var {
    Var::constant(Tensor::ones(shape))
}

/// Per-parent contributions `∂L/∂parent` given `g = ∂L/∂out`, expressed with graph ops
/// so they can be differentiated again.
fn adjoint(op: &OpKind, out: &Var, g: &Var) -> Vec<Option<Var>> {
    let parents = out.parents();
    let needs = |k: usize| parents[k].requires_grad();
    match op {
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), needs(1).then(|| g.neg())],
        OpKind::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![needs(0).then(|| g.mul_(b)), needs(1).then(|| g.mul_(a))]
        }
        OpKind::MatMul { ta, tb } => {
            let (a, b) = (&parents[0], &parents[1]);
            let da = needs(0).then(|| match (ta, tb) {
                (false, false) => g.matmul_(b, false, true),
                (false, true) => g.matmul_(b, false, false),
                (true, false) => b.matmul_(g, false, true),
                (true, true) => b.matmul_(g, true, true),
            });
            let db = needs(1).then(|| match (ta, tb) {
                (false, false) => a.matmul_(g, true, false),
                (false, true) => g.matmul_(a, true, false),
                (true, false) => a.matmul_(g, false, false),
                (true, true) => g.matmul_(a, true, true),
            });
            vec![da, db]
        }
        OpKind::Relu => {
            let mask = parents[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![Some(g.mul_(&Var::constant(mask)))]
        }
        OpKind::Tanh => {
            let one_minus_sq = ones_like(out.shape()).sub_(&out.mul_(out));
            vec![Some(g.mul_(&one_minus_sq))]
        }
        OpKind::Exp => vec![Some(g.mul_(out))],
        // d/da log a = 1/a = exp(-log a)
        OpKind::Log => vec![Some(g.mul_(&out.neg().exp()))],
        OpKind::Sum => vec![Some(g.expand_(parents[0].shape().to_vec()))],
        OpKind::Mean => {
            let n = parents[0].value().numel().max(1) as f64;
            vec![Some(g.expand_(parents[0].shape().to_vec()).scalar_mul(1.0 / n))]
        }
        OpKind::ScalarMul(c) => vec![Some(g.scalar_mul(*c))],
        OpKind::IndexSelect { indices, .. } => {
            vec![Some(g.scatter_(indices.clone(), parents[0].shape().to_vec()))]
        }
        OpKind::Scatter { indices, .. } => {
            vec![Some(g.index_select_(indices.clone(), parents[0].shape().to_vec()))]
        }
        OpKind::Expand { .. } => vec![Some(g.sum())],
        OpKind::Concat { axis } => {
            let (outer, inner, dims) = concat_geometry(parents.iter().map(|p| p.shape()), *axis);
            let total: usize = dims.iter().sum();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parents.len());
            for (p, &d) in parents.iter().zip(&dims) {
                if p.requires_grad() {
                    let mut idx = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        idx.extend(start..start + d * inner);
                    }
                    let idx: Rc<[usize]> = idx.into();
                    grads.push(Some(g.index_select_(idx, p.shape().to_vec())));
                } else {
                    grads.push(None);
                }
                offset += d;
            }
            grads
        }
        OpKind::SoftmaxLogits => {
            // dx = y ⊙ (g − rowsum(g ⊙ y)), row sums and broadcast via matmul with ones.
            let shape = out.shape().to_vec();
            let cols = *shape.last().unwrap_or(&1);
            let rows = out.value().numel() / cols.max(1);
            let flat = [rows, cols];
            let y = out.index_select_((0..rows * cols).collect::<Vec<_>>().into(), flat.to_vec());
            let gm = g.index_select_((0..rows * cols).collect::<Vec<_>>().into(), flat.to_vec());
            let row_dot = gm.mul_(&y).matmul_(&ones_like(&[cols, 1]), false, false);
            let spread = row_dot.matmul_(&ones_like(&[1, cols]), false, false);
            let dx = y.mul_(&gm.sub_(&spread));
            vec![Some(dx.index_select_((0..rows * cols).collect::<Vec<_>>().into(), shape))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(v: f64) -> Var {
        Var::leaf(Tensor::scalar(v), true)
    }

    #[test]
    fn square_derivative() {
        let a = x(3.0);
        let g = backward(&a.mul(&a).unwrap(), false).unwrap();
        assert_eq!(g.tensor(&a).unwrap().data(), &[6.0]);
    }

    #[test]
    fn cube_second_derivative() {
        let a = x(2.0);
        let cube = a.mul(&a).unwrap().mul(&a).unwrap();
        let first = backward(&cube, true).unwrap();
        let da = first.get(&a).unwrap().clone();
        assert_eq!(da.item(), 12.0);
        let second = backward(&da, false).unwrap();
        assert_eq!(second.tensor(&a).unwrap().data(), &[12.0]);
    }

    #[test]
    fn detached_factor_is_constant() {
        let a = x(3.0);
        let y = a.detach().mul(&a).unwrap();
        let g = backward(&y, false).unwrap();
        assert_eq!(g.tensor(&a).unwrap().data(), &[3.0]);
    }

    #[test]
    fn fully_detached_path_contributes_nothing() {
        let a = x(3.0);
        let y = a.detach().exp();
        let g = backward(&y.add(&Var::scalar(1.0)).unwrap(), false).unwrap();
        assert!(!g.contains(&a));
        assert_eq!(g.get_or_zeros(&a).item(), 0.0);
    }

    #[test]
    fn zero_leaf_gets_zero_gradient_through_product() {
        let a = Var::leaf(Tensor::zeros(&[3]), true);
        let b = Var::leaf(Tensor::zeros(&[3]), true);
        let g = backward(&a.mul(&b).unwrap().sum(), false).unwrap();
        assert_eq!(g.tensor(&a).unwrap().data(), &[0.0; 3]);
        assert_eq!(g.tensor(&b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let a = Var::leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(backward(&a.tanh(), false), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn without_create_graph_gradients_are_constants() {
        let a = x(1.5);
        let g = backward(&a.mul(&a).unwrap(), false).unwrap();
        assert!(!g.get(&a).unwrap().requires_grad());
        let g2 = backward(&a.mul(&a).unwrap(), true).unwrap();
        assert!(g2.get(&a).unwrap().requires_grad());
    }

    #[test]
    fn topological_order_puts_parents_first() {
        let a = x(0.3);
        let b = a.tanh();
        let c = b.mul(&a).unwrap().exp();
        let order = topo_order(&c);
        let pos = |v: &Var| order.iter().position(|n| n.id() == v.id()).unwrap();
        for n in &order {
            for p in n.parents() {
                if p.requires_grad() {
                    assert!(pos(p) < pos(n));
                }
            }
        }
        assert_eq!(order.last().unwrap().id(), c.id());
    }

    #[test]
    fn grad_at_interior_nodes() {
        // y = 3a, z = y² + y: dz/dy = 2y + 1 = 19 at a = 3.
        let a = x(3.0);
        let y = a.scalar_mul(3.0);
        let z = y.mul(&y).unwrap().add(&y).unwrap();
        let g = grad(&z, &[y.clone(), a.clone()], false).unwrap();
        assert_eq!(g[0].item(), 19.0);
        assert_eq!(g[1].item(), 57.0);
        let unrelated = x(1.0);
        assert_eq!(grad(&z, &[unrelated], false).unwrap()[0].item(), 0.0);
    }
}
