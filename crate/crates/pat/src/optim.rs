//! Named parameter storage, the Adam optimizer, and the finite-difference
//! gradient checker.

use std::collections::HashMap;

use crate::error::{PatError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub struct Param<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Option<Tensor<E>>,
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Named parameter tensors with per-parameter Adam state and a shared,
/// monotone step counter.
pub struct ParamSet<E: Scalar> {
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, value: Tensor<E>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value, grad: None, m, v });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        let i = self.idx(name)?;
        Ok(&self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        let i = self.idx(name)?;
        Ok(&mut self.params[i].value)
    }

    pub fn grad_of(&self, name: &str) -> Result<Option<&Tensor<E>>> {
        let i = self.idx(name)?;
        Ok(self.params[i].grad.as_ref())
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| PatError::UnknownParam(name.to_string()))
    }

    pub fn total_coords(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter as a leaf on `tape`; returns handles usable by
    /// name via [`BoundParams::var`].
    pub fn bind<'a>(&'a self, tape: &mut Tape<E>) -> Result<BoundParams<'a, E>> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(tape.leaf(p.value.clone(), true)?);
        }
        Ok(BoundParams { set: self, vars })
    }

    /// Pull gradients off a tape after `backward`, accumulating additively
    /// into each parameter's grad buffer.
    pub fn harvest_grads(&mut self, tape: &Tape<E>, bound_vars: &[Var]) {
        for (p, &var) in self.params.iter_mut().zip(bound_vars) {
            if let Some(g) = tape.grad(var) {
                match &mut p.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => p.grad = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale_grads(&mut self, factor: E) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v = *v * factor;
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One Adam update with bias correction; gradients are cleared afterwards.
    /// Every parameter must carry a gradient.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for p in &self.params {
            if p.grad.is_none() {
                return Err(PatError::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let (b1, b2) = (E::from_f64(beta1), E::from_f64(beta2));
        let one = E::one();
        for p in &mut self.params {
            let g = p.grad.take().unwrap();
            for k in 0..g.numel() {
                let gk = g.data()[k];
                let m = b1 * p.m.data()[k] + (one - b1) * gk;
                let v = b2 * p.v.data()[k] + (one - b2) * gk * gk;
                p.m.data_mut()[k] = m;
                p.v.data_mut()[k] = v;
                let m_hat = m.to_f64() / bc1;
                let v_hat = v.to_f64() / bc2;
                let upd = lr * m_hat / (v_hat.sqrt() + eps);
                p.value.data_mut()[k] = p.value.data_mut()[k] - E::from_f64(upd);
            }
        }
        Ok(())
    }

    pub fn to_f64_set(&self) -> ParamSet<f64> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(&p.name, p.value.to_f64_tensor());
        }
        out
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct BoundParams<'a, E: Scalar> {
    set: &'a ParamSet<E>,
    pub vars: Vec<Var>,
}

impl<'a, E: Scalar> BoundParams<'a, E> {
    pub fn var(&self, name: &str) -> Result<Var> {
        let i = self.set.idx(name)?;
        Ok(self.vars[i])
    }
}

pub struct GradCheckReport {
    /// (parameter name, per-coordinate relative error)
    pub per_param: Vec<(String, Vec<f64>)>,
}

impl GradCheckReport {
    pub fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_param.iter().flat_map(|(_, e)| e.iter().copied())
    }

    pub fn max_error(&self) -> f64 {
        self.errors().fold(0.0, f64::max)
    }

    pub fn fraction_within(&self, tol: f64) -> f64 {
        let total: usize = self.per_param.iter().map(|(_, e)| e.len()).sum();
        if total == 0 {
            return 1.0;
        }
        let ok = self.errors().filter(|&e| e <= tol).count();
        ok as f64 / total as f64
    }

    pub fn coords(&self) -> usize {
        self.per_param.iter().map(|(_, e)| e.len()).sum()
    }
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences, coordinate by coordinate, in 64-bit arithmetic.
///
/// `model_fn(params, with_grad)` evaluates the loss; when `with_grad` is true
/// it must also populate `params` gradients. Reported error per coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(params: &mut ParamSet<f64>, h: f64, mut model_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet<f64>, bool) -> Result<f64>,
{
    params.clear_grads();
    let loss0 = model_fn(params, true)?;
    if !loss0.is_finite() {
        return Err(PatError::NonFinite { op: "grad_check base loss".into() });
    }
    let analytic: Vec<Vec<f64>> = params
        .params
        .iter()
        .map(|p| {
            p.grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();
    params.clear_grads();

    let mut report = Vec::new();
    for pi in 0..params.params.len() {
        let name = params.params[pi].name.clone();
        let n = params.params[pi].value.numel();
        let mut errs = Vec::with_capacity(n);
        for k in 0..n {
            let orig = params.params[pi].value.data()[k];
            params.params[pi].value.data_mut()[k] = orig + h;
            let lp = model_fn(params, false)?;
            params.params[pi].value.data_mut()[k] = orig - h;
            let lm = model_fn(params, false)?;
            params.params[pi].value.data_mut()[k] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(PatError::NonFinite {
                    op: format!("grad_check perturbation of {name}[{k}]"),
                });
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[pi][k];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            errs.push((a - numeric).abs() / denom);
        }
        report.push((name, errs));
    }
    Ok(GradCheckReport { per_param: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        ps.params[0].grad = Some(Tensor::zeros(&[2]));
        ps.adam_step(1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_recurrence() {
        // g=1: bias-corrected m̂=v̂=1, so Δw ≈ −lr.
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::scalar(0.5));
        ps.params[0].grad = Some(Tensor::scalar(1.0));
        ps.adam_step(1e-4, 0.9, 0.999, 1e-8).unwrap();
        let w = ps.get("w").unwrap().data()[0];
        assert!((w - (0.5 - 1e-4)).abs() < 1e-8);
        assert_eq!(ps.step_count(), 1);
    }

    #[test]
    fn adam_missing_gradient_names_parameter() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("conv.weight", Tensor::scalar(0.0));
        let err = ps.adam_step(1e-3, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("conv.weight"));
    }

    #[test]
    fn grad_check_quadratic_and_linear() {
        // f(w) = w^2 at w=3: analytic 6, exact for central differences.
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::scalar(3.0));
        let report = grad_check(&mut ps, 1e-3, |ps, with_grad| {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape)?;
            let w = bound.var("w")?;
            let sq = tape.mul(w, w)?;
            let s = tape.sum_all(sq)?;
            if with_grad {
                tape.backward(s)?;
                let vars = bound.vars.clone();
                drop(bound);
                ps.harvest_grads(&tape, &vars);
            }
            Ok(tape.value(s).data()[0])
        })
        .unwrap();
        assert!(report.max_error() <= 1e-6);

        // f(w) = 5w: central difference exact for affine maps.
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::scalar(2.0));
        let report = grad_check(&mut ps, 1e-3, |ps, with_grad| {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape)?;
            let w = bound.var("w")?;
            let y = tape.scale(w, 5.0)?;
            let s = tape.sum_all(y)?;
            if with_grad {
                tape.backward(s)?;
                let vars = bound.vars.clone();
                drop(bound);
                ps.harvest_grads(&tape, &vars);
            }
            Ok(tape.value(s).data()[0])
        })
        .unwrap();
        assert!(report.max_error() <= 1e-10);
    }
}
