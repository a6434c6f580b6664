//! Backward-vs-central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding compare in absolute terms.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-3,
            floor: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    /// Some finite-difference estimate was NaN/Inf or the function failed.
    pub non_finite: bool,
}

impl InputCheck {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error <= tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed(self.tol))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().requires_grad())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NotScalar(g.shape(out).to_vec()));
    }
    Ok((g.scalar(out), g, vars, out))
}

/// Compares graph gradients of the scalar `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        return Err(TensorError::InvalidArgument {
            kind: "grad_check",
            message: format!("step must be positive, got {}", opts.h),
        });
    }
    let (_, mut g, vars, out) = eval(&f, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = InputCheck {
            index: i,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_coord: None,
            analytic: 0.0,
            numeric: 0.0,
            non_finite: false,
        };
        for &c in &coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + opts.h;
            let plus = eval(&f, &work).map(|r| r.0);
            work[i].data_mut()[c] = orig - opts.h;
            let minus = eval(&f, &work).map(|r| r.0);
            work[i].data_mut()[c] = orig;
            let numeric = match (plus, minus) {
                (Ok(p), Ok(m)) => (p - m) / (2.0 * opts.h),
                _ => f64::NAN,
            };
            if !numeric.is_finite() {
                check.non_finite = true;
                continue;
            }
            let a = grad[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            if rel > check.max_rel_error || check.worst_coord.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst_coord = Some(c);
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        inputs: checks,
    })
}
