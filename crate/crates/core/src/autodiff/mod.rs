//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! Backward passes are themselves recorded as graph operations when requested, so a
//! gradient can be differentiated again (needed to differentiate through inner SGD
//! steps). Graphs are reference-counted and confined to the thread that built them.

mod backward;
pub mod gradcheck;
mod graph;
mod tensor;

pub use backward::{backward, grad, GradientMap};
pub use graph::{apply, no_grad, with_grad_mode, OpKind, Var};
pub use tensor::Tensor;

/// Structural acyclicity check: every recorded parent was created before its child.
pub fn is_acyclic(root: &Var) -> bool {
    let mut stack = vec![root.clone()];
    let mut seen = std::collections::HashSet::new();
    while let Some(n) = stack.pop() {
        if !seen.insert(n.id()) {
            continue;
        }
        for p in n.parents() {
            if p.id() >= n.id() {
                return false;
            }
            stack.push(p.clone());
        }
    }
    true
}
