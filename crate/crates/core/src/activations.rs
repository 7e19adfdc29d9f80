//! Pointwise nonlinearities and their analytic derivatives.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SOFTRELU_ALPHA: f64 = 0.1;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu { slope: f64 },
    /// Exact Gaussian-CDF form.
    Gelu,
    /// `(x + sqrt(x² + α²) − α) / 2`; identical to ReLU at `α = 0`.
    SoftRelu { alpha: f64 },
}


impl Activation {
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!("leaky slope {slope} outside (0, 1)")));
        }
        Ok(Activation::LeakyRelu { slope })
    }

    pub fn soft_relu(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::config(format!("SoftReLU shape {alpha} must be >= 0")));
        }
        Ok(Activation::SoftRelu { alpha })
    }

    /// Parses `relu`, `gelu`, `leaky[:ω]` and `softrelu[:α]`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let arg = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| Error::config(format!("bad activation parameter `{a}`")))
            })
        };
        match name.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "leaky" | "leakyrelu" => Activation::leaky_relu(arg(DEFAULT_LEAKY_SLOPE)?),
            "softrelu" => Activation::soft_relu(arg(DEFAULT_SOFTRELU_ALPHA)?),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::SoftRelu { alpha } => (x + (x * x + alpha * alpha).sqrt() - alpha) / 2.0,
        }
    }

    /// Derivative at `x`; kinks take the right-hand value.
    #[inline]
    pub fn derivative_at(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
            Activation::SoftRelu { alpha } => {
                // x / |x| is undefined at the origin when α = 0
                if alpha == 0.0 {
                    if x >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    (1.0 + x / (x * x + alpha * alpha).sqrt()) / 2.0
                }
            }
        }
    }

    #[inline]
    pub fn eval_f32(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            _ => self.eval(x as f64) as f32,
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        x.map(|v| self.eval_f32(v))
    }

    pub fn derivative(self, x: &Tensor) -> Tensor {
        x.map(|v| self.derivative_at(v as f64) as f32)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOFT: Activation = Activation::SoftRelu { alpha: 0.1 };

    #[test]
    fn softrelu_values() {
        assert_eq!(SOFT.eval(0.0), 0.0);
        // (0.9 + sqrt(1.01)) / 2
        assert!((SOFT.eval(1.0) - 0.952_493_8).abs() < 1e-6);
        assert_eq!(SOFT.derivative_at(0.0), 0.5);
        // (1 + 1/sqrt(1.01)) / 2
        assert!((SOFT.derivative_at(1.0) - 0.997_518_6).abs() < 1e-6);
    }

    #[test]
    fn piecewise_linear_values() {
        let leaky = Activation::leaky_relu(0.1).unwrap();
        assert!((leaky.eval(-2.0) + 0.2).abs() < 1e-15);
        assert_eq!(Activation::Relu.derivative_at(-1.0), 0.0);
        assert_eq!(Activation::Relu.derivative_at(0.0), 1.0);
    }

    #[test]
    fn softrelu_tails() {
        // f(x) → max(x, 0) − α/2, approached from above by about α²/(4|x|)
        let gap = 0.1f64 * 0.1 / 40.0;
        for (x, asymptote) in [(10.0, 9.95), (-10.0, -0.05)] {
            let above = SOFT.eval(x) - asymptote;
            assert!(above > 0.0 && (above - gap).abs() < 1e-8, "{x}: {above}");
        }
    }

    #[test]
    fn parameter_validation() {
        assert!(Activation::leaky_relu(0.0).is_err());
        assert!(Activation::leaky_relu(1.0).is_err());
        assert!(Activation::soft_relu(-0.1).is_err());
        assert_eq!(Activation::parse("softrelu").unwrap(), SOFT);
        assert_eq!(
            Activation::parse("leaky:0.2").unwrap(),
            Activation::LeakyRelu { slope: 0.2 }
        );
        assert!(Activation::parse("swish").is_err());
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(Activation::Gelu.eval(0.0), 0.0);
        // x·Φ(x) at x = 1: Φ(1) = 0.841344746...
        assert!((Activation::Gelu.eval(1.0) - 0.841_344_746).abs() < 1e-8);
        assert!((Activation::Gelu.derivative_at(0.0) - 0.5).abs() < 1e-15);
    }
}
