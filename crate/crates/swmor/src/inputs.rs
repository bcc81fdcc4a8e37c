//! Symbolic input families with analytic derivatives.
//!
//! The jump-flow output feeds on derivatives of the input up to one below
//! the nilpotency index, so inputs are supplied as closed-form families
//! rather than samples; finite differencing is deliberately not offered.

use nalgebra::DVector;
use thiserror::Error;

/// Highest derivative order available from every family.
pub const MAX_DERIVATIVE: usize = 4;

#[derive(Debug, Error)]
pub enum InputError {
    #[error("derivative order {0} exceeds supported maximum {MAX_DERIVATIVE}")]
    MissingDerivative(usize),
    #[error("unknown input family '{0}'")]
    UnknownFamily(String),
}

/// Built-in scalar input families, broadcast over all input channels.
#[derive(Debug, Clone, PartialEq)]
pub enum InputFamily {
    Zero,
    /// sin(a·t + b)
    Sin { a: f64, b: f64 },
    /// sin(2π·e^{t/8})
    SinExp,
    /// sin(t² + t)
    SinQuad,
    /// c₀ + c₁ t + c₂ t² + ...
    Poly(Vec<f64>),
}

impl InputFamily {
    /// Parse the CLI spelling of a family.
    pub fn parse(name: &str) -> Result<Self, InputError> {
        match name {
            "zero" => Ok(Self::Zero),
            "sin" => Ok(Self::Sin { a: 1.0, b: 0.0 }),
            "sin-exp" => Ok(Self::SinExp),
            "sin-quad" => Ok(Self::SinQuad),
            "one" => Ok(Self::Poly(vec![1.0])),
            "ramp" => Ok(Self::Poly(vec![0.0, 1.0])),
            other => Err(InputError::UnknownFamily(other.to_string())),
        }
    }

    /// k-th derivative at time t.
    pub fn eval(&self, t: f64, order: usize) -> Result<f64, InputError> {
        if order > MAX_DERIVATIVE {
            return Err(InputError::MissingDerivative(order));
        }
        Ok(match self {
            Self::Zero => 0.0,
            Self::Sin { a, b } => {
                a.powi(order as i32) * (a * t + b + order as f64 * std::f64::consts::FRAC_PI_2).sin()
            }
            Self::SinExp => {
                let g = 2.0 * std::f64::consts::PI * (t / 8.0).exp();
                // g^{(k)} = g / 8^k
                let dg: Vec<f64> = (0..=4).map(|k| g / 8f64.powi(k as i32)).collect();
                chain_sin(&dg, order)
            }
            Self::SinQuad => {
                let dg = [t * t + t, 2.0 * t + 1.0, 2.0, 0.0, 0.0];
                chain_sin(&dg, order)
            }
            Self::Poly(c) => {
                let mut acc = 0.0;
                for (k, &ck) in c.iter().enumerate() {
                    if k >= order {
                        let mut fall = 1.0;
                        for j in 0..order {
                            fall *= (k - j) as f64;
                        }
                        acc += ck * fall * t.powi((k - order) as i32);
                    }
                }
                acc
            }
        })
    }
}

/// Derivatives of sin(g(t)) up to order 4 via Faa di Bruno, given
/// dg = [g, g', g'', g''', g''''].
fn chain_sin(dg: &[f64], order: usize) -> f64 {
    let f = |k: usize| (dg[0] + k as f64 * std::f64::consts::FRAC_PI_2).sin();
    let (g1, g2, g3, g4) = (dg[1], dg[2], dg[3], dg[4]);
    match order {
        0 => f(0),
        1 => g1 * f(1),
        2 => g2 * f(1) + g1 * g1 * f(2),
        3 => g3 * f(1) + 3.0 * g1 * g2 * f(2) + g1.powi(3) * f(3),
        4 => {
            g4 * f(1)
                + (4.0 * g1 * g3 + 3.0 * g2 * g2) * f(2)
                + 6.0 * g1 * g1 * g2 * f(3)
                + g1.powi(4) * f(4)
        }
        _ => unreachable!("guarded by MAX_DERIVATIVE"),
    }
}

/// An m-channel input: the scalar family replicated on every channel.
#[derive(Debug, Clone)]
pub struct InputSignal {
    pub family: InputFamily,
    pub channels: usize,
}

impl InputSignal {
    pub fn new(family: InputFamily, channels: usize) -> Self {
        Self { family, channels }
    }

    pub fn eval_vec(&self, t: f64, order: usize) -> Result<DVector<f64>, InputError> {
        let v = self.family.eval(t, order)?;
        Ok(DVector::from_element(self.channels, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(fam: &InputFamily, t: f64, order: usize, h: f64, tol: f64) {
        // central difference of the (order-1)-th derivative
        let lo = fam.eval(t - h, order - 1).unwrap();
        let hi = fam.eval(t + h, order - 1).unwrap();
        let fd = (hi - lo) / (2.0 * h);
        let an = fam.eval(t, order).unwrap();
        assert!(
            (fd - an).abs() < tol * (1.0 + an.abs()),
            "family {fam:?} order {order}: fd {fd} vs analytic {an}"
        );
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let fams = [
            InputFamily::Sin { a: 1.3, b: 0.4 },
            InputFamily::SinExp,
            InputFamily::SinQuad,
            InputFamily::Poly(vec![1.0, -2.0, 0.5, 0.25]),
        ];
        for fam in &fams {
            for t in [0.3, 1.7, 4.2] {
                for order in 1..=4 {
                    fd_check(fam, t, order, 1e-5, 1e-6);
                }
            }
        }
    }

    #[test]
    fn order_cap_enforced() {
        assert!(InputFamily::SinQuad.eval(1.0, 5).is_err());
    }
}
