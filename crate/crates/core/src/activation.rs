//! Activation functions with the derivative chain and the Lipschitz/bound
//! constants consumed by the consistency bounds.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

type ScalarMap = fn(f64) -> f64;

/// Lipschitz constants of `σ, σ', σ''` and sup-norm bounds of the same.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationConstants {
    pub lip: f64,
    pub lip_d1: f64,
    pub lip_d2: f64,
    pub bound: f64,
    pub bound_d1: f64,
    pub bound_d2: f64,
}

impl ActivationConstants {
    pub fn uniform(value: f64) -> Self {
        ActivationConstants {
            lip: value,
            lip_d1: value,
            lip_d2: value,
            bound: value,
            bound_d1: value,
            bound_d2: value,
        }
    }

    fn as_array(&self) -> [f64; 6] {
        [
            self.lip,
            self.lip_d1,
            self.lip_d2,
            self.bound,
            self.bound_d1,
            self.bound_d2,
        ]
    }
}

/// The constants `(C1, C2, C)` of the consistency inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremConstants {
    pub c1: f64,
    pub c2: f64,
    pub c: f64,
}

/// An activation together with its first three derivatives.
///
/// The third derivative is not part of the separated loss itself, but the
/// gradient of that loss with respect to `a1` and `a2` differentiates
/// `σ''`, and so does the parameter gradient of the PINN loss.
///
/// `smooth` marks activations meeting the Lipschitz/boundedness hypotheses
/// up to `σ''`; only those may be used with the consistency checker.
#[derive(Debug, Clone, Copy)]
pub struct ActivationBundle {
    pub name: &'static str,
    pub eval: ScalarMap,
    pub d1: ScalarMap,
    pub d2: ScalarMap,
    pub d3: ScalarMap,
    pub constants: ActivationConstants,
    pub smooth: bool,
}

impl ActivationBundle {
    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        broadcast(self.eval, z)
    }

    pub fn apply_d1(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        broadcast(self.d1, z)
    }

    pub fn apply_d2(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        broadcast(self.d2, z)
    }

    pub fn apply_d3(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        broadcast(self.d3, z)
    }

    /// Evaluates `σ, σ', σ'', σ'''` elementwise in one pass.
    pub fn apply_all(&self, z: &DMatrix<f64>) -> [DMatrix<f64>; 4] {
        [self.apply(z), self.apply_d1(z), self.apply_d2(z), self.apply_d3(z)]
    }
}

/// Applies a scalar map elementwise.
pub fn broadcast(f: ScalarMap, z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(f)
}

pub fn make_sin_activation() -> ActivationBundle {
    ActivationBundle {
        name: "sin",
        eval: f64::sin,
        d1: f64::cos,
        d2: |z| -z.sin(),
        d3: |z| -z.cos(),
        constants: ActivationConstants::uniform(1.0),
        smooth: true,
    }
}

fn sech2(z: f64) -> f64 {
    let c = z.cosh();
    1.0 / (c * c)
}

/// `tanh`, with `sup|σ''| = 4/(3√3)` and `sup|σ'''| = 2`.
pub fn make_tanh_activation() -> ActivationBundle {
    let max_d2 = 4.0 / (3.0 * 3f64.sqrt());
    ActivationBundle {
        name: "tanh",
        eval: f64::tanh,
        d1: sech2,
        d2: |z| -2.0 * z.tanh() * sech2(z),
        d3: |z| {
            let t = z.tanh();
            let s = sech2(z);
            -2.0 * s * (s - 2.0 * t * t)
        },
        constants: ActivationConstants {
            lip: 1.0,
            lip_d1: max_d2,
            lip_d2: 2.0,
            bound: 1.0,
            bound_d1: 1.0,
            bound_d2: max_d2,
        },
        smooth: true,
    }
}

/// ReLU for the baseline trainer only; its second derivative vanishes almost
/// everywhere and it fails the smoothness hypotheses.
pub fn make_relu_activation() -> ActivationBundle {
    ActivationBundle {
        name: "relu",
        eval: |z| z.max(0.0),
        d1: |z| if z > 0.0 { 1.0 } else { 0.0 },
        d2: |_| 0.0,
        d3: |_| 0.0,
        constants: ActivationConstants {
            lip: 1.0,
            lip_d1: f64::INFINITY,
            lip_d2: 0.0,
            bound: f64::INFINITY,
            bound_d1: 1.0,
            bound_d2: 0.0,
        },
        smooth: false,
    }
}

pub fn activation_by_name(name: &str) -> Result<ActivationBundle> {
    match name {
        "sin" => Ok(make_sin_activation()),
        "tanh" => Ok(make_tanh_activation()),
        "relu" => Ok(make_relu_activation()),
        other => Err(Error::UnknownName {
            what: "activation",
            name: other.to_string(),
        }),
    }
}

/// `C1`, `C2` and `C` from the six activation constants.
pub fn theorem_constants(b: &ActivationBundle) -> Result<TheoremConstants> {
    if !b.smooth {
        return Err(Error::NonSmoothActivation(b.name));
    }
    constants_from(&b.constants)
}

pub fn constants_from(k: &ActivationConstants) -> Result<TheoremConstants> {
    if k.as_array().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidConstants(*k));
    }
    let ActivationConstants {
        lip: cs,
        lip_d1: cs1,
        lip_d2: cs2,
        bound_d1: bs1,
        bound_d2: bs2,
        ..
    } = *k;

    let c1 = f64::max(bs1 * f64::max(1.0, bs1), cs1 * max_of(&[1.0, bs1, cs]));
    let c2 = f64::max(
        bs2 * max_of(&[1.0, bs1, cs1, bs1 * bs1, bs1 * cs1]),
        f64::max(1.0, cs1) * f64::max(cs1, bs1 * cs2),
    );
    let c = max_of(&[
        1.0,
        2.0 * cs * cs,
        2.0 * cs.powi(4),
        5.0 * c1 * c1,
        14.0 * c2 * c2,
    ]);
    Ok(TheoremConstants { c1, c2, c })
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
