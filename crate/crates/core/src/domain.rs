//! Model parameters, phase-space points, weights and relativistic kinematics.
//!
//! Units have `c = e = 1`; only the species masses, gravity and inverse
//! temperature are free.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Largest weight exponent accepted before `weight_w` reports overflow.
pub const WEIGHT_EXP_CAP: f64 = 700.0;

/// Default exclusion tolerance around the grazing set `x3 = 0, v3 = 0`.
pub const EPS_GRAZE: f64 = 1e-10;

/// Particle species. Ions carry charge `+1`, electrons `-1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Plus,
    Minus,
}

impl Species {
    pub const BOTH: [Species; 2] = [Species::Plus, Species::Minus];

    pub fn charge(self) -> f64 {
        match self {
            Species::Plus => 1.0,
            Species::Minus => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Species::Plus => 0,
            Species::Minus => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Species::Plus => "plus",
            Species::Minus => "minus",
        }
    }
}

/// Physical parameters of the two-species system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub g: f64,
    pub beta: f64,
    /// Lower bound on `-F3` at the wall used by the kinetic weight.
    #[serde(default = "default_c0")]
    pub c0: f64,
    /// Cap on `max(|E|, |B|)` assumed by the exit-time and weight bounds.
    /// Defaults to `min(m) g / 8`.
    #[serde(default)]
    pub field_bound: Option<f64>,
    #[serde(default)]
    pub ext_e: [f64; 3],
    #[serde(default)]
    pub ext_b: [f64; 3],
}

fn default_c0() -> f64 {
    1.0
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            m_plus: 1.0,
            m_minus: 1.0,
            g: 8.0,
            beta: 8.0,
            c0: 1.0,
            field_bound: None,
            ext_e: [0.0; 3],
            ext_b: [0.0; 3],
        }
    }
}

impl ModelParams {
    pub fn mass(&self, s: Species) -> f64 {
        match s {
            Species::Plus => self.m_plus,
            Species::Minus => self.m_minus,
        }
    }

    pub fn min_mass(&self) -> f64 {
        self.m_plus.min(self.m_minus)
    }

    pub fn field_bound(&self) -> f64 {
        self.field_bound.unwrap_or(self.min_mass() * self.g / 8.0)
    }

    pub fn ext_e(&self) -> Vec3 {
        Vec3::from(self.ext_e)
    }

    pub fn ext_b(&self) -> Vec3 {
        Vec3::from(self.ext_b)
    }

    pub fn has_ambient(&self) -> bool {
        self.ext_e
            .iter()
            .chain(self.ext_b.iter())
            .any(|c| *c != 0.0)
    }

    pub fn weight_spec(&self, s: Species) -> WeightSpec {
        WeightSpec {
            beta: self.beta,
            m: self.mass(s),
            g: self.g,
        }
    }

    pub fn energy(&self, s: Species, v: &Vec3) -> f64 {
        energy(self.mass(s), v)
    }

    pub fn vhat(&self, s: Species, v: &Vec3) -> Vec3 {
        vhat(self.mass(s), v)
    }

    pub fn mechanical_energy(&self, s: Species, x: &Vec3, v: &Vec3) -> f64 {
        mechanical_energy(self.mass(s), self.g, x, v)
    }

    /// Checks positivity and the ambient smallness conditions.
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("m_plus", self.m_plus),
            ("m_minus", self.m_minus),
            ("g", self.g),
            ("beta", self.beta),
            ("c0", self.c0),
        ];
        for (name, val) in pos {
            if !(val.is_finite() && val > 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "{name} must be finite and > 0, got {val}"
                )));
            }
        }
        if self.beta <= 1.0 {
            return Err(Error::ConfigInvalid(format!(
                "beta must exceed 1, got {}",
                self.beta
            )));
        }
        if let Some(fb) = self.field_bound {
            if !(fb.is_finite() && fb >= 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "field_bound must be finite and >= 0, got {fb}"
                )));
            }
        }
        if self
            .ext_e
            .iter()
            .chain(self.ext_b.iter())
            .any(|c| !c.is_finite())
        {
            return Err(Error::ConfigInvalid("ambient fields must be finite".into()));
        }
        let cap = self.min_mass() * self.g / 16.0;
        if self.ext_e[2].abs() > cap {
            return Err(Error::ConfigInvalid(format!(
                "|ext_E3| = {} exceeds min(m) g / 16 = {cap}",
                self.ext_e[2].abs()
            )));
        }
        if self.ext_b[0].abs() > cap || self.ext_b[1].abs() > cap {
            return Err(Error::ConfigInvalid(format!(
                "|ext_B1|, |ext_B2| must not exceed min(m) g / 16 = {cap}"
            )));
        }
        Ok(())
    }
}

/// A phase-space point tagged with its species.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseState {
    pub species: Species,
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

impl PhaseState {
    pub fn new(species: Species, t: f64, x: Vec3, v: Vec3) -> Result<Self> {
        if x[2] < 0.0 || !(t >= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "phase state outside domain: t = {t}, x3 = {}",
                x[2]
            )));
        }
        Ok(PhaseState { species, t, x, v })
    }

    pub fn energy(&self, params: &ModelParams) -> f64 {
        params.energy(self.species, &self.v)
    }

    pub fn vhat(&self, params: &ModelParams) -> Vec3 {
        params.vhat(self.species, &self.v)
    }
}

/// Relativistic energy `sqrt(m^2 + |v|^2)`.
#[inline]
pub fn energy(m: f64, v: &Vec3) -> f64 {
    (m * m + v.norm_squared()).sqrt()
}

/// Relativistic velocity `v / v0`.
#[inline]
pub fn vhat(m: f64, v: &Vec3) -> Vec3 {
    v / energy(m, v)
}

/// Mechanical energy `v0 + m g x3`.
#[inline]
pub fn mechanical_energy(m: f64, g: f64, x: &Vec3, v: &Vec3) -> f64 {
    energy(m, v) + m * g * x[2]
}

/// `1 - |vhat|` evaluated without cancellation: `m^2 / (v0 (v0 + |v|))`.
#[inline]
pub fn one_minus_speed(m: f64, v: &Vec3) -> f64 {
    let v0 = energy(m, v);
    m * m / (v0 * (v0 + v.norm()))
}

/// Exponential weight parameters for one species.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub beta: f64,
    pub m: f64,
    pub g: f64,
}

impl WeightSpec {
    /// Exponent `beta (v0 + m g x3) + beta |x_par| / 2`.
    #[inline]
    pub fn log_w(&self, x: &Vec3, v: &Vec3) -> f64 {
        let xpar = (x[0] * x[0] + x[1] * x[1]).sqrt();
        self.beta * mechanical_energy(self.m, self.g, x, v) + 0.5 * self.beta * xpar
    }

    pub fn w(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        let e = self.log_w(x, v);
        if e > WEIGHT_EXP_CAP {
            return Err(Error::WeightOverflow {
                exponent: e,
                cap: WEIGHT_EXP_CAP,
            });
        }
        Ok(e.exp())
    }
}

/// `exp(beta (v0 + m g x3) + beta |x_par| / 2)` for the given species.
pub fn weight_w(params: &ModelParams, s: Species, x: &Vec3, v: &Vec3) -> Result<f64> {
    params.weight_spec(s).w(x, v)
}

/// Normal force at the wall, `F3(t, x1, x2, v)` evaluated on `x3 = 0`.
pub type BoundaryForce = Arc<dyn Fn(f64, f64, f64, &Vec3) -> f64 + Send + Sync>;

/// Boundary-degenerate kinetic weight built from the wall normal force.
#[derive(Clone)]
pub struct KineticWeight {
    pub species: Species,
    pub m: f64,
    pub c0: f64,
    pub force3: BoundaryForce,
}

impl std::fmt::Debug for KineticWeight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KineticWeight")
            .field("species", &self.species)
            .field("m", &self.m)
            .field("c0", &self.c0)
            .finish_non_exhaustive()
    }
}

impl KineticWeight {
    pub fn new(species: Species, m: f64, c0: f64, force3: BoundaryForce) -> Self {
        KineticWeight {
            species,
            m,
            c0,
            force3,
        }
    }

    /// Weight with a constant wall force.
    pub fn constant(species: Species, m: f64, c0: f64, f3: f64) -> Self {
        Self::new(species, m, c0, Arc::new(move |_, _, _, _| f3))
    }

    /// `alpha = sqrt(x3^2 + vhat3^2 - 2 F3(x_par, 0, v) x3 / v0)`.
    pub fn alpha(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64> {
        let f3 = (self.force3)(t, x[0], x[1], v);
        if !(-f3 > self.c0) {
            return Err(Error::NegativeRadicand {
                force3: f3,
                neg_c0: -self.c0,
            });
        }
        let v0 = energy(self.m, v);
        let vh3 = v[2] / v0;
        let rad = x[2] * x[2] + vh3 * vh3 - 2.0 * f3 * x[2] / v0;
        if rad < 0.0 {
            return Err(Error::NegativeRadicand {
                force3: f3,
                neg_c0: -self.c0,
            });
        }
        Ok(rad.sqrt())
    }

    /// `alpha_tilde = sqrt(alpha^2 / (1 + alpha^2))`, in `[0, 1)`.
    pub fn alpha_tilde(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64> {
        let a = self.alpha(t, x, v)?;
        Ok(tilde(a))
    }

    /// Alternate form `sqrt(x3^2 + vhat3^2 + x3 / (2 v0))`, kept for cross-checks.
    pub fn alpha_bar_alt(m: f64, x: &Vec3, v: &Vec3) -> f64 {
        let v0 = energy(m, v);
        let vh3 = v[2] / v0;
        (x[2] * x[2] + vh3 * vh3 + x[2] / (2.0 * v0)).sqrt()
    }

    /// Normalized alternate form.
    pub fn alpha_tilde_alt(m: f64, x: &Vec3, v: &Vec3) -> f64 {
        tilde(Self::alpha_bar_alt(m, x, v))
    }
}

#[inline]
fn tilde(a: f64) -> f64 {
    let a2 = a * a;
    (a2 / (1.0 + a2)).sqrt()
}

/// True when `(x, v)` lies within `eps` of the grazing set.
pub fn is_grazing(m: f64, x: &Vec3, v: &Vec3, eps: f64) -> bool {
    x[2].abs() + (v[2] / energy(m, v)).abs() < eps
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn energy_examples() {
        assert_eq!(energy(1.0, &Vec3::zeros()), 1.0);
        assert_relative_eq!(
            energy(1.0, &Vec3::new(0.0, 0.0, 2.0)),
            5f64.sqrt(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            energy(2.0, &Vec3::new(3.0, 0.0, 0.0)),
            13f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn vhat_examples() {
        assert_eq!(vhat(1.0, &Vec3::zeros()), Vec3::zeros());
        let vh = vhat(1.0, &Vec3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(vh[2], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn weight_examples() {
        let mut p = ModelParams {
            beta: 2.0,
            g: 1.0,
            ..Default::default()
        };
        let w = weight_w(&p, Species::Plus, &Vec3::zeros(), &Vec3::zeros()).unwrap();
        assert_relative_eq!(w, 2f64.exp(), max_relative = 1e-14);
        p.beta = 1.0;
        let w = weight_w(&p, Species::Plus, &Vec3::new(1.0, 0.0, 1.0), &Vec3::zeros()).unwrap();
        assert_relative_eq!(w, 2.5f64.exp(), max_relative = 1e-14);
        let big = weight_w(&p, Species::Plus, &Vec3::new(0.0, 0.0, 1e4), &Vec3::zeros());
        assert!(matches!(big, Err(Error::WeightOverflow { .. })));
    }

    #[test]
    fn mechanical_energy_examples() {
        assert_eq!(
            mechanical_energy(1.0, 1.0, &Vec3::zeros(), &Vec3::zeros()),
            1.0
        );
        assert_eq!(
            mechanical_energy(1.0, 2.0, &Vec3::new(0.0, 0.0, 3.0), &Vec3::zeros()),
            7.0
        );
    }

    #[test]
    fn alpha_tilde_examples() {
        let kw = KineticWeight::constant(Species::Plus, 1.0, 0.5, -1.0);
        let v = Vec3::new(0.3, -0.2, 0.7);
        let at = kw.alpha_tilde(0.0, &Vec3::new(1.0, 2.0, 0.0), &v).unwrap();
        let vh3 = v[2] / energy(1.0, &v);
        assert_relative_eq!(at, vh3.abs() / (1.0 + vh3 * vh3).sqrt(), epsilon = 1e-15);
        let at0 = kw
            .alpha_tilde(0.0, &Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert_eq!(at0, 0.0);
        // x3^2 + vh3^2 - 2 F3 x3 / v0 = 1 + 0 + 2.
        let ai = kw
            .alpha(0.0, &Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros())
            .unwrap();
        assert_relative_eq!(ai, 3f64.sqrt(), epsilon = 1e-15);
        let ati = kw
            .alpha_tilde(0.0, &Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros())
            .unwrap();
        assert_relative_eq!(ati, 0.75f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn force_condition_violation() {
        let kw = KineticWeight::constant(Species::Minus, 1.0, 1.0, -0.5);
        assert!(matches!(
            kw.alpha(0.0, &Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros()),
            Err(Error::NegativeRadicand { .. })
        ));
    }

    #[test]
    fn ambient_smallness_enforced() {
        let mut p = ModelParams::default();
        p.validate().unwrap();
        p.ext_e = [0.0, 0.0, p.min_mass() * p.g / 16.0 * 1.01];
        assert!(p.validate().is_err());
        p.ext_e = [5.0, 5.0, 0.0];
        p.ext_b = [0.0, 0.0, 7.0];
        p.validate().unwrap();
        p.beta = 0.9;
        assert!(p.validate().is_err());
    }

    #[test]
    fn one_minus_speed_matches_direct() {
        let v = Vec3::new(0.3, 0.4, -1.2);
        let direct = 1.0 - vhat(1.5, &v).norm();
        assert_relative_eq!(one_minus_speed(1.5, &v), direct, max_relative = 1e-13);
    }
}
