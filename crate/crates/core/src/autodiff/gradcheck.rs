//! Central finite-difference certification of reverse-mode gradients.

use super::tape::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::{Rng, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many coordinates per input, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(1, |a|, |n|)` over checked coordinates.
    pub max_rel_err: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Checks `d f(x) / dx` for a scalar-valued `f` of one tensor.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let cfg = GradCheckConfig {
        eps,
        ..Default::default()
    };
    grad_check_many(|tape, vars| f(tape, vars[0].clone()), std::slice::from_ref(x), &cfg)
}

fn sample_coords(n: usize, limit: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    match limit {
        Some(k) if k < n => {
            for i in 0..k {
                let j = i + rng.below(n - i);
                all.swap(i, j);
            }
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => all,
    }
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
///
/// Straight-through ops inside `f` are frozen at the hard values of the
/// unperturbed pass, so the differences follow the soft path whose gradient
/// the tape propagates. Any randomness inside `f` must be seeded from within.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(invalid("grad_check", format!("eps {} outside [1e-6, 1e-3]", cfg.eps)));
    }
    let tape = Tape::new();
    tape.st_begin_record();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let refs = tape.st_take_record();
    if !loss.value().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let t = Tape::no_grad();
        t.st_begin_replay(refs.clone());
        let vs: Vec<Var<'_, T>> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&t, &vs)?;
        let v = out.value().item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut rng = Rng::new(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for j in sample_coords(x.numel(), cfg.max_coords, &mut rng) {
            let x0 = x.data()[j];
            let h = T::lit(cfg.eps);
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            // Use the step actually representable in T.
            let step = ((x0 + h) - (x0 - h)).as_f64();
            let numeric = (fp - fm) / step;
            let a = analytic[i].data()[j].as_f64();
            let e = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
