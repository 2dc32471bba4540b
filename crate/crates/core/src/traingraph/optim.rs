use crate::error::{Error, Result};

use super::params::ModelParams;

/// Central difference `(f(θ + h·e) − f(θ − h·e)) / 2h` along one coordinate.
pub fn finite_diff_grad<F>(f: F, params: &ModelParams, name: &str, index: usize, h: f64) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let plus = f(&params.perturbed(name, index, h)?)?;
    let minus = f(&params.perturbed(name, index, -h)?)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`. With `μ = 0` this is the plain rule.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            momentum,
            velocity: None,
        })
    }

    pub fn velocity(&self) -> Option<&ModelParams> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        let v = match self.velocity.as_mut() {
            Some(v) => {
                v.scale(self.momentum);
                v.add_scaled(1.0, grads)?;
                v
            }
            None => self.velocity.insert(grads.clone()),
        };
        params.add_scaled(-lr, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("t", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    fn value(p: &ModelParams) -> f64 {
        p.get("t").unwrap().data()[0]
    }

    #[test]
    fn central_difference_of_square() {
        let f = |p: &ModelParams| Ok(value(p) * value(p));
        let g = finite_diff_grad(f, &single(3.0), "t", 0, 1e-4).unwrap();
        assert!((g - 6.0).abs() < 1e-6);
        let c = finite_diff_grad(|_: &ModelParams| Ok(4.2), &single(3.0), "t", 0, 1e-4).unwrap();
        assert_eq!(c, 0.0);
        assert!(finite_diff_grad(f, &single(3.0), "t", 0, 0.0).is_err());
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = single(5.0);
        Sgd::new(0.0).unwrap().step(&mut p, &single(2.0), 1.0).unwrap();
        assert_eq!(value(&p), 3.0);

        let mut q = single(5.0);
        Sgd::new(0.9).unwrap().step(&mut q, &single(0.0), 0.3).unwrap();
        assert_eq!(value(&q), 5.0);
    }

    #[test]
    fn momentum_matches_scalar_recursion() {
        let (lr, mu) = (0.1, 0.9);
        let (g1, g2) = (0.5, -1.25);
        let mut p = single(2.0);
        let mut opt = Sgd::new(mu).unwrap();
        opt.step(&mut p, &single(g1), lr).unwrap();
        opt.step(&mut p, &single(g2), lr).unwrap();

        let v1 = g1;
        let t1 = 2.0 - lr * v1;
        let v2 = mu * v1 + g2;
        let t2 = t1 - lr * v2;
        assert!((value(&p) - t2).abs() < 1e-12);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(Sgd::new(1.0).is_err());
        assert!(Sgd::new(-0.1).is_err());
        let mut p = single(1.0);
        assert!(Sgd::new(0.0).unwrap().step(&mut p, &single(1.0), -1.0).is_err());
    }
}
