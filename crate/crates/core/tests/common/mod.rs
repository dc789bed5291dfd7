//! Test-only oracles shared by the integration suites. Nothing here calls
//! into the backward pass: finite differences only ever evaluate forward
//! values.
#![allow(dead_code)]

use curriculum_lab::diffcore::{DiffTensor, Graph, ParamSet, Var};
use curriculum_lab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> DiffTensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DiffTensor::new(shape.to_vec(), v).unwrap()
}

/// Central difference of a scalar function of flat inputs.
pub fn central_difference<F>(inputs: &[DiffTensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&[DiffTensor]) -> f64,
{
    let mut work: Vec<DiffTensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[t].len()];
        for i in 0..inputs[t].len() {
            let orig = inputs[t].values()[i];
            work[t].values_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work[t].values_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work[t].values_mut()[i] = orig;
            grad[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    out
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS_TOL || diff <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

#[derive(Debug)]
pub struct FdMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Largest relative error over all checked entries, and the first entry
/// outside tolerance (if any).
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> (f64, Option<FdMismatch>) {
    let mut worst = 0.0f64;
    let mut first = None;
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.len(), n.len());
        for (i, (&x, &y)) in a.iter().zip(n).enumerate() {
            let diff = (x - y).abs();
            if diff > FD_ABS_TOL {
                worst = worst.max(diff / x.abs().max(y.abs()));
            }
            if !close(x, y) && first.is_none() {
                first = Some(FdMismatch {
                    input: t,
                    index: i,
                    analytic: x,
                    numeric: y,
                });
            }
        }
    }
    (worst, first)
}

/// Builds the scalar graph once with tracked inputs for the analytic
/// gradient, and repeatedly with constants for the numeric one.
pub fn check_graph_fn<B>(inputs: &[DiffTensor], build: B) -> (f64, Option<FdMismatch>)
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().tracked())).collect();
    let root = build(&mut g, &vars).unwrap();
    let grads = g.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let eval = |ts: &[DiffTensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t)).collect();
        let root = build(&mut g, &vars).unwrap();
        g.scalar(root)
    };
    let untracked: Vec<DiffTensor> = inputs
        .iter()
        .map(|t| DiffTensor::new(t.shape().to_vec(), t.values().to_vec()).unwrap())
        .collect();
    let numeric = central_difference(&untracked, &eval);
    compare(&analytic, &numeric)
}

/// Central differences of `f` over every value in `params`, checked against
/// the gradients stored in `analytic` (same paths; a missing gradient counts
/// as zero).
pub fn check_params<F>(params: &ParamSet, analytic: &ParamSet, f: F) -> (f64, Option<FdMismatch>)
where
    F: Fn(&ParamSet) -> f64,
{
    let mut work = params.clone();
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for path in &paths {
        let n = params.get(path).unwrap().len();
        let a = analytic.get(path).unwrap().grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut num = vec![0.0; n];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = params.get(path).unwrap().values()[i];
            work.get_mut(path).unwrap().values_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work.get_mut(path).unwrap().values_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work.get_mut(path).unwrap().values_mut()[i] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        a_all.push(a);
        n_all.push(num);
    }
    compare(&a_all, &n_all)
}

/// Fixed random projection turning any tensor output into a scalar, so every
/// output element contributes a distinct weight to the checked gradient.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(&mut r, &shape, -1.0, 1.0);
    let c = g.constant(shape, w.into_values())?;
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}
