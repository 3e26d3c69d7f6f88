//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::numeric::params::ParamStore;
use crate::numeric::tensor::Tensor;

/// A deterministic scalar function of a parameter store.
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;

    /// Loss plus one gradient tensor per parameter, in store order.
    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, Vec<Tensor>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Central difference formula used for the numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ+ε) − f(θ−ε)) / 2ε`, error O(ε²).
    ThreePoint,
    /// `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`, error O(ε⁴).
    FivePoint,
    /// `(f(θ+3ε) − 9f(θ+2ε) + 45f(θ+ε) − 45f(θ−ε) + 9f(θ−2ε) − f(θ−3ε)) / 60ε`,
    /// error O(ε⁶).
    #[default]
    SevenPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub stencil: Stencil,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tensors {
            out.push_str(&format!(
                "{}\t{}\t{:.3e}\t{:.3e}\n",
                t.name, t.numel, t.max_rel_error, t.max_abs_error
            ));
        }
        out.push_str(&format!(
            "max_rel_error\t{:.3e}\ttolerance\t{:.1e}\t{}\n",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients against the seven-point central difference
/// for every element of every parameter tensor.
pub fn gradient_check<O: Objective>(
    objective: &O,
    params: &ParamStore,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    gradient_check_with(objective, params, epsilon, tolerance, Stencil::SevenPoint)
}

pub fn gradient_check_with<O: Objective>(
    objective: &O,
    params: &ParamStore,
    epsilon: f64,
    tolerance: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.loss_and_grad(params)?;
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..grad.numel() {
            let orig = work.get(i).data()[j];
            let mut at = |delta: f64| {
                work.get_mut(i).data_mut()[j] = orig + delta;
                objective.loss(&work)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(epsilon)? - at(-epsilon)?) / (2.0 * epsilon),
                Stencil::FivePoint => {
                    let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
                    let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon)
                }
                Stencil::SevenPoint => {
                    let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
                    let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
                    let (p3, m3) = (at(3.0 * epsilon)?, at(-3.0 * epsilon)?);
                    (45.0 * (p1 - m1) - 9.0 * (p2 - m2) + (p3 - m3)) / (60.0 * epsilon)
                }
            };
            work.get_mut(i).data_mut()[j] = orig;
            let g = grad.data()[j];
            max_rel = max_rel.max(relative_error(g, numeric));
            max_abs = max_abs.max((g - numeric).abs());
        }
        tensors.push(TensorCheck {
            name: params.name(i).to_string(),
            numel: grad.numel(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        stencil,
        tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tape::Tape;
    use crate::rng::{Purpose, SeedStream};

    struct Linear {
        x: Tensor,
    }

    impl Objective for Linear {
        fn loss(&self, p: &ParamStore) -> Result<f64> {
            Ok(self.loss_and_grad(p)?.0)
        }

        fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, Vec<Tensor>)> {
            let mut t = Tape::new();
            let w = t.param(p.get(0));
            let x = t.constant(self.x.clone());
            let y = t.matmul(x, w)?;
            let l = t.sum(y);
            let mut g = t.backward(l)?;
            Ok((t.scalar_value(l), vec![g.take(w)]))
        }
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let mut rng = SeedStream::new(11).derive(Purpose::Test, 0);
        let mut params = ParamStore::new();
        params.push("w", Tensor::randn(&[3, 2], 1.0, &mut rng));
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let report = gradient_check(&Linear { x }, &params, 1e-3, 1e-4).unwrap();
        assert_eq!(report.tensors.len(), 1);
        assert!(report.max_rel_error() < 1e-9, "{}", report.render());
        assert!(report.passed());
    }

    /// Two-layer MLP exercising matmul, bias, gelu, layer norm, softmax and
    /// cross entropy.
    struct Mlp {
        x: Tensor,
    }

    impl Objective for Mlp {
        fn loss(&self, p: &ParamStore) -> Result<f64> {
            Ok(self.loss_and_grad(p)?.0)
        }

        fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, Vec<Tensor>)> {
            let mut t = Tape::new();
            let vars: Vec<_> = p.tensors().iter().map(|x| t.param(x)).collect();
            let x = t.constant(self.x.clone());
            let h = t.matmul(x, vars[0])?;
            let h = t.add_row(h, vars[1])?;
            let h = t.layer_norm(h, vars[4], vars[5], 1e-5)?;
            let h = t.gelu(h);
            let o = t.matmul(h, vars[2])?;
            let o = t.add_row(o, vars[3])?;
            let s = t.softmax(o, 1)?;
            let first = t.slice(s, 0, 0, 1)?;
            let sq = t.mul(first, first)?;
            let extra = t.sum(sq);
            let row = t.slice(o, 0, 1, 2)?;
            let ce = t.cross_entropy(row, 1)?;
            let l = t.add(ce, extra)?;
            let mut g = t.backward(l)?;
            Ok((t.scalar_value(l), vars.iter().map(|&v| g.take(v)).collect()))
        }
    }

    #[test]
    fn mlp_matches_central_differences() {
        let mut rng = SeedStream::new(12).derive(Purpose::Test, 0);
        let mut params = ParamStore::new();
        params.push("w1", Tensor::randn(&[4, 5], 0.7, &mut rng));
        params.push("b1", Tensor::randn(&[5], 0.3, &mut rng));
        params.push("w2", Tensor::randn(&[5, 3], 0.7, &mut rng));
        params.push("b2", Tensor::randn(&[3], 0.3, &mut rng));
        params.push("gain", Tensor::randn(&[5], 1.0, &mut rng));
        params.push("bias", Tensor::randn(&[5], 0.3, &mut rng));
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let report = gradient_check(&Mlp { x }, &params, 1e-3, 1e-4).unwrap();
        assert_eq!(report.tensors.len(), 6);
        assert!(report.passed(), "{}", report.render());
    }

    struct Sin;

    impl Objective for Sin {
        fn loss(&self, p: &ParamStore) -> Result<f64> {
            Ok(p.get(0).data()[0].sin())
        }

        fn loss_and_grad(&self, p: &ParamStore) -> Result<(f64, Vec<Tensor>)> {
            let x = p.get(0).data()[0];
            Ok((x.sin(), vec![Tensor::new(vec![1], vec![x.cos()])?]))
        }
    }

    #[test]
    fn stencil_error_orders() {
        let mut params = ParamStore::new();
        params.push("x", Tensor::new(vec![1], vec![0.7]).unwrap());
        let err = |stencil, eps| {
            gradient_check_with(&Sin, &params, eps, 1.0, stencil).unwrap().tensors[0].max_abs_error
        };
        for (stencil, order) in [(Stencil::ThreePoint, 2), (Stencil::FivePoint, 4), (Stencil::SevenPoint, 6)] {
            let ratio = err(stencil, 0.1) / err(stencil, 0.05);
            let expected = 2f64.powi(order);
            assert!((ratio / expected - 1.0).abs() < 0.05, "{stencil:?}: {ratio}");
        }
    }
}
