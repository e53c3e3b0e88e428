//! Central finite-difference checks of first- and second-order gradients for every op.
//!
//! First order: `f(x) = Σ w ⊙ op(x)` against `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
//! Second order: Hessian-vector products of `f(x) = Σ w ⊙ tanh(op(x))` obtained by
//! differentiating `v · ∇f` again, against central differences of the first-order
//! gradient. The `tanh` keeps curvature non-zero for ops that are linear.

use rand::Rng as _;

use super::{backward, no_grad, Tensor, Var};
use crate::error::Result;
use crate::seed;

type Apply = fn(&[Var]) -> Result<Var>;
type Generate = fn(&mut seed::Rng) -> Vec<Tensor>;

/// An op under test: an input generator and the op applied to graph inputs.
pub struct OpSpec {
    pub name: &'static str,
    pub generate: Generate,
    pub apply: Apply,
}

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub first_rel: f64,
    pub first_abs: f64,
    pub second_rel: f64,
    pub second_abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { first_rel: 1e-4, first_abs: 1e-7, second_rel: 1e-3, second_abs: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub op: &'static str,
    pub cases: usize,
    /// Largest relative error seen (first, second order).
    pub worst_first: f64,
    pub worst_second: f64,
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const H_FIRST: f64 = 1e-6;
const H_SECOND: f64 = 1e-5;

fn uniform(rng: &mut seed::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero (relu kink).
fn away_from_zero(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn dims(rng: &mut seed::Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=4), rng.gen_range(1..=4)]
}

fn pair(rng: &mut seed::Rng) -> Vec<Tensor> {
    let s = dims(rng);
    vec![uniform(rng, &s, -1.5, 1.5), uniform(rng, &s, -1.5, 1.5)]
}

fn one(rng: &mut seed::Rng) -> Vec<Tensor> {
    let s = dims(rng);
    vec![uniform(rng, &s, -1.5, 1.5)]
}

fn kinked(rng: &mut seed::Rng) -> Vec<Tensor> {
    let s = dims(rng);
    vec![away_from_zero(rng, &s)]
}

fn positive(rng: &mut seed::Rng) -> Vec<Tensor> {
    let s = dims(rng);
    vec![uniform(rng, &s, 0.5, 2.0)]
}

fn matmul_inputs(rng: &mut seed::Rng) -> Vec<Tensor> {
    let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
    vec![uniform(rng, &[m, k], -1.5, 1.5), uniform(rng, &[k, n], -1.5, 1.5)]
}

fn transposed_matmul_inputs(rng: &mut seed::Rng) -> Vec<Tensor> {
    let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
    vec![uniform(rng, &[k, m], -1.5, 1.5), uniform(rng, &[n, k], -1.5, 1.5)]
}

fn concat_inputs(rng: &mut seed::Rng) -> Vec<Tensor> {
    let r = rng.gen_range(1..=3);
    let (c1, c2) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    vec![uniform(rng, &[r, c1], -1.5, 1.5), uniform(rng, &[r, c2], -1.5, 1.5)]
}

fn row_concat_inputs(rng: &mut seed::Rng) -> Vec<Tensor> {
    let c = rng.gen_range(1..=3);
    let (r1, r2) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    vec![uniform(rng, &[r1, c], -1.5, 1.5), uniform(rng, &[r2, c], -1.5, 1.5)]
}

/// Index pattern derived from the input size: repeated and permuted positions.
fn gather_indices(n: usize) -> Vec<usize> {
    (0..n + 2).map(|i| (i * 7 + 3) % n).collect()
}

/// The full op set.
pub fn op_suite() -> Vec<OpSpec> {
    vec![
        OpSpec { name: "add", generate: pair, apply: |x| x[0].add(&x[1]) },
        OpSpec { name: "sub", generate: pair, apply: |x| x[0].sub(&x[1]) },
        OpSpec { name: "mul", generate: pair, apply: |x| x[0].mul(&x[1]) },
        OpSpec { name: "matmul", generate: matmul_inputs, apply: |x| x[0].matmul(&x[1]) },
        OpSpec { name: "matmul_t", generate: transposed_matmul_inputs, apply: |x| x[0].matmul_t(&x[1], true, true) },
        OpSpec { name: "relu", generate: kinked, apply: |x| Ok(x[0].relu()) },
        OpSpec { name: "tanh", generate: one, apply: |x| Ok(x[0].tanh()) },
        OpSpec { name: "exp", generate: one, apply: |x| Ok(x[0].exp()) },
        OpSpec { name: "log", generate: positive, apply: |x| Ok(x[0].log()) },
        OpSpec { name: "sum", generate: one, apply: |x| Ok(x[0].sum()) },
        OpSpec { name: "mean", generate: one, apply: |x| Ok(x[0].mean()) },
        OpSpec { name: "scalar_mul", generate: one, apply: |x| Ok(x[0].scalar_mul(-1.7)) },
        OpSpec {
            name: "index_select",
            generate: one,
            apply: |x| {
                let idx = gather_indices(x[0].value().numel());
                x[0].index_select(&idx, &[idx.len()])
            },
        },
        OpSpec { name: "concat_cols", generate: concat_inputs, apply: |x| Var::concat(x, 1) },
        OpSpec { name: "concat_rows", generate: row_concat_inputs, apply: |x| Var::concat(x, 0) },
        OpSpec { name: "softmax", generate: one, apply: |x| Ok(x[0].softmax_logits()) },
    ]
}

fn weights(rng: &mut seed::Rng, like: &Tensor) -> Var {
    Var::constant(uniform(rng, like.shape(), -1.0, 1.0))
}

fn objective(spec: &OpSpec, inputs: &[Var], w: &Var, curved: bool) -> Result<Var> {
    let mut y = (spec.apply)(inputs)?;
    if curved {
        y = y.tanh();
    }
    Ok(y.mul(w)?.sum())
}

fn value_at(spec: &OpSpec, inputs: &[Tensor], w: &Var, curved: bool) -> Result<f64> {
    no_grad(|| {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(objective(spec, &vars, w, curved)?.item())
    })
}

/// Flat gradient of the objective with respect to all inputs.
fn gradient_at(spec: &OpSpec, inputs: &[Tensor], w: &Var, curved: bool) -> Result<Vec<f64>> {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let f = objective(spec, &vars, w, curved)?;
    let g = backward(&f, false)?;
    Ok(vars.iter().flat_map(|v| g.get_or_zeros(v).value().data().to_vec()).collect())
}

fn perturbed(inputs: &[Tensor], flat: usize, delta: f64) -> Vec<Tensor> {
    let mut out = inputs.to_vec();
    let mut k = flat;
    for t in out.iter_mut() {
        if k < t.numel() {
            let mut data = t.data().to_vec();
            data[k] += delta;
            *t = Tensor::new(t.shape().to_vec(), data).expect("shape");
            break;
        }
        k -= t.numel();
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn within(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs || rel_err(a, b) <= rel
}

/// Run `cases` random cases of one op.
pub fn check_op(spec: &OpSpec, cases: usize, seed: u64, tol: Tolerance) -> Result<CheckReport> {
    let mut rng = seed::rng_for(seed, &[spec.name.len() as u64, spec.name.bytes().map(u64::from).sum()]);
    let mut report = CheckReport { op: spec.name, cases, worst_first: 0.0, worst_second: 0.0, failures: Vec::new() };
    for case in 0..cases {
        let inputs = (spec.generate)(&mut rng);
        let out_shape = no_grad(|| {
            let vars: Vec<Var> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
            (spec.apply)(&vars).map(|y| y.value().clone())
        })?;
        let w = weights(&mut rng, &out_shape);
        let n: usize = inputs.iter().map(Tensor::numel).sum();

        // First order.
        let analytic = gradient_at(spec, &inputs, &w, false)?;
        for i in 0..n {
            let fd = (value_at(spec, &perturbed(&inputs, i, H_FIRST), &w, false)?
                - value_at(spec, &perturbed(&inputs, i, -H_FIRST), &w, false)?)
                / (2.0 * H_FIRST);
            if (analytic[i] - fd).abs() > tol.first_abs {
                report.worst_first = report.worst_first.max(rel_err(analytic[i], fd));
            }
            if !within(analytic[i], fd, tol.first_rel, tol.first_abs) {
                report.failures.push(format!("case {case} d/dx[{i}]: {} vs {fd}", analytic[i]));
            }
        }

        // Second order: H v through double backward.
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
        let f = objective(spec, &vars, &w, true)?;
        let g = backward(&f, true)?;
        let mut offset = 0;
        let mut gv: Option<Var> = None;
        for var in &vars {
            let gi = g.get_or_zeros(var);
            let k = var.value().numel();
            let vi = Var::constant(Tensor::new(var.shape().to_vec(), v[offset..offset + k].to_vec())?);
            offset += k;
            let term = gi.mul(&vi)?.sum();
            gv = Some(match gv {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let gv = gv.expect("at least one input");
        let hv_map = backward(&gv, false)?;
        let hv: Vec<f64> = vars.iter().flat_map(|x| hv_map.get_or_zeros(x).value().data().to_vec()).collect();
        for i in 0..n {
            let gp = gradient_at(spec, &perturbed(&inputs, i, H_SECOND), &w, true)?;
            let gm = gradient_at(spec, &perturbed(&inputs, i, -H_SECOND), &w, true)?;
            let fd: f64 = (0..n).map(|j| (gp[j] - gm[j]) / (2.0 * H_SECOND) * v[j]).sum();
            if (hv[i] - fd).abs() > tol.second_abs {
                report.worst_second = report.worst_second.max(rel_err(hv[i], fd));
            }
            if !within(hv[i], fd, tol.second_rel, tol.second_abs) {
                report.failures.push(format!("case {case} (Hv)[{i}]: {} vs {fd}", hv[i]));
            }
        }
    }
    Ok(report)
}

/// Check every op in the suite.
pub fn check_all(cases: usize, seed: u64, tol: Tolerance) -> Result<Vec<CheckReport>> {
    op_suite().iter().map(|spec| check_op(spec, cases, seed, tol)).collect()
}
