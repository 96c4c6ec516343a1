//! Central finite-difference checks of recorded gradients (64-bit only).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on checked coordinates per tensor; larger tensors are probed at
    /// evenly strided coordinates.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `name[coordinate]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = format!("{name}[{coord}]");
        }
    }
}

fn probe_coords(n: usize, max: usize) -> impl Iterator<Item = usize> {
    let step = if n <= max { 1 } else { n.div_ceil(max) };
    (0..n).step_by(step)
}

fn scalar_value(tape: &Tape<f64>, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(x)
}

/// Checks the gradient of a scalar function with respect to its inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(check_inputs(f, inputs, opts)?.max_rel_error)
}

pub fn check_inputs<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.input(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        scalar_value(&tape, loss)
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.input(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    scalar_value(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for j in probe_coords(inputs[k].numel(), opts.max_coords) {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            report.record(&format!("input{k}"), j, analytic.data()[j], numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar function with respect to every parameter
/// in `store`.
pub fn check_params<F>(f: F, store: &ParamStore<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    scalar_value(&tape, loss)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.backward(loss)?.accumulate_into(&mut analytic);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        scalar_value(&tape, loss)
    };

    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        for j in probe_coords(store.get(id).value.numel(), opts.max_coords) {
            let orig = store.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            report.record(&name, j, analytic.get(id).grad.data()[j], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_f64(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap();
        let x = Tensor::from_f64(&[3], &[1.0, -0.5, 0.25]).unwrap();
        let b = Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.linear(v[1], v[0], Some(v[2]))?;
                t.sum(y)
            },
            &[w, x, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detached_factor_is_caught() {
        // d/dx (x * x) computed as if one factor were constant: off by x.
        let x = Tensor::from_f64(&[3], &[0.5, -1.5, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let d = t.detach(v[0])?;
                let y = t.mul(v[0], d)?;
                t.sum(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn deterministic() {
        let x = Tensor::from_f64(&[4], &[0.1, 0.2, -0.3, 0.9]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.tanh(v[0])?;
            let y = t.mul(y, v[0])?;
            t.sum(y)
        };
        let a = grad_check(f, &[x.clone()], 1e-5).unwrap();
        let b = grad_check(f, &[x], 1e-5).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn probing_is_strided() {
        assert_eq!(probe_coords(10, 4).collect::<Vec<_>>(), vec![0, 3, 6, 9]);
        assert_eq!(probe_coords(3, 4).count(), 3);
    }
}
