//! Momentum-direction kernels of the retarded field representations, their
//! cancellation identities and sup-norm bound checks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::greens::reflect;
use crate::{Mat3, Vec3};

/// Evaluation point of a momentum-direction kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelPoint {
    pub m: f64,
    pub omega: Vec3,
    pub v: Vec3,
    /// Use the mirrored velocity `(vh1, vh2, -vh3)` in place of `vh`.
    pub reflected: bool,
}

impl KernelPoint {
    pub fn new(m: f64, omega: Vec3, v: Vec3) -> Self {
        KernelPoint {
            m,
            omega,
            v,
            reflected: false,
        }
    }

    pub fn reflected(m: f64, omega: Vec3, v: Vec3) -> Self {
        KernelPoint {
            m,
            omega,
            v,
            reflected: true,
        }
    }

    pub fn v0(&self) -> f64 {
        (self.m * self.m + self.v.norm_squared()).sqrt()
    }

    /// Relativistic velocity, mirrored if requested.
    pub fn vhat(&self) -> Vec3 {
        let vh = self.v / self.v0();
        if self.reflected {
            reflect(&vh)
        } else {
            vh
        }
    }

    /// `1 + vh . omega`, evaluated without cancellation near `omega = -vh/|vh|`.
    pub fn denom(&self) -> f64 {
        let vn = self.v.norm();
        if vn == 0.0 {
            return 1.0;
        }
        let v0 = self.v0();
        let u = vn / v0;
        let one_minus_u = self.m * self.m / (v0 * (v0 + vn));
        let mut n = self.v / vn;
        if self.reflected {
            n = reflect(&n);
        }
        one_minus_u + 0.5 * u * (self.omega + n).norm_squared()
    }

    /// Unreflected point seen through the mirror: `omega -> M omega`.
    fn mirrored(&self) -> KernelPoint {
        KernelPoint {
            m: self.m,
            omega: reflect(&self.omega),
            v: self.v,
            reflected: false,
        }
    }
}

#[inline]
fn mirror_diag() -> Vec3 {
    Vec3::new(1.0, 1.0, -1.0)
}

/// `K_ij = delta_ij - (omega_i + vh_i) vh_j / (1 + vh . omega)`.
pub fn kernel_k(p: &KernelPoint) -> Mat3 {
    let vh = p.vhat();
    let d = p.denom();
    Mat3::identity() - (p.omega + vh) * vh.transpose() / d
}

/// Largest Euclidean row norm of `K`.
pub fn kernel_k_row_sup(p: &KernelPoint) -> f64 {
    let k = kernel_k(p);
    (0..3).map(|i| k.row(i).norm()).fold(0.0, f64::max)
}

/// `(omega + vh)/(1 + vh . omega)`.
pub fn kernel_direction(p: &KernelPoint) -> Vec3 {
    (p.omega + p.vhat()) / p.denom()
}

/// Split velocity gradient `grad_v ((omega_i + vh_i)/(1 + vh . omega))`: row `i` of
/// the first matrix is the part from differentiating the numerator, row `i` of
/// the second the part from the denominator. Their sum is the full gradient.
pub fn kernel_ae_split(p: &KernelPoint) -> (Mat3, Mat3) {
    if p.reflected {
        // Row i of the mirrored kernel is s_i times row i at M omega.
        let (a1, a2) = kernel_ae_split(&p.mirrored());
        let s = Mat3::from_diagonal(&mirror_diag());
        return (s * a1, s * a2);
    }
    let v0 = p.v0();
    let vh = p.v / v0;
    let d = p.denom();
    let w = p.omega;
    let dd = w - w.dot(&vh) * vh;
    let mut a1 = Mat3::zeros();
    let mut a2 = Mat3::zeros();
    for i in 0..3 {
        let mut ei = Vec3::zeros();
        ei[i] = 1.0;
        let r1 = (ei - vh[i] * vh) / (v0 * d);
        let r2 = -(w[i] + vh[i]) * dd / (v0 * d * d);
        a1.set_row(i, &r1.transpose());
        a2.set_row(i, &r2.transpose());
    }
    (a1, a2)
}

/// Full velocity gradient; row `i` is `a^E_i`.
pub fn kernel_ae(p: &KernelPoint) -> Mat3 {
    let (a1, a2) = kernel_ae_split(p);
    a1 + a2
}

/// `(|vh|^2 - 1)(vh + omega)/(1 + vh . omega)^2`.
pub fn kernel_et(p: &KernelPoint) -> Vec3 {
    let vh = p.vhat();
    let d = p.denom();
    (vh.norm_squared() - 1.0) * (vh + p.omega) / (d * d)
}

/// `(|vh|^2 - 1)/(1 + vh . omega)`, bounded by 2.
pub fn kernel_cancellation_ratio(p: &KernelPoint) -> f64 {
    let vh = p.vhat();
    (vh.norm_squared() - 1.0) / p.denom()
}

/// `e3 - (omega + vh) vh_3/(1 + vh . omega)`.
pub fn kernel_b2(p: &KernelPoint) -> Vec3 {
    let vh = p.vhat();
    Vec3::new(0.0, 0.0, 1.0) - (p.omega + vh) * vh[2] / p.denom()
}

fn unit(y: &Vec3) -> Result<(Vec3, f64)> {
    let r = y.norm();
    if r == 0.0 || !r.is_finite() {
        return Err(Error::ZeroY);
    }
    Ok((y / r, r))
}

/// `(Y x vh)(1 - |vh|^2)/(|Y|^3 (1 + vh . Y/|Y|)^2)`.
pub fn kernel_bt(m: f64, y: &Vec3, v: &Vec3) -> Result<Vec3> {
    bt_with(m, y, v, false)
}

/// Same kernel with the mirrored velocity.
pub fn kernel_bt_reflected(m: f64, y: &Vec3, v: &Vec3) -> Result<Vec3> {
    bt_with(m, y, v, true)
}

fn bt_with(m: f64, y: &Vec3, v: &Vec3, reflected: bool) -> Result<Vec3> {
    let (om, r) = unit(y)?;
    let p = KernelPoint {
        m,
        omega: om,
        v: *v,
        reflected,
    };
    let vh = p.vhat();
    let d = p.denom();
    Ok(y.cross(&vh) * (1.0 - vh.norm_squared()) / (r * r * r * d * d))
}

/// `(Y/|Y|^2) x vh/(1 + vh . Y/|Y|)`: the b1 magnetic kernel.
pub fn kernel_b1_magnetic(m: f64, y: &Vec3, v: &Vec3) -> Result<Vec3> {
    let (om, r) = unit(y)?;
    let p = KernelPoint::new(m, om, *v);
    Ok((y / (r * r)).cross(&p.vhat()) / p.denom())
}

/// Triple product `a . (b x a)` evaluated pairwise so that the repeated
/// factor cancels exactly.
pub fn triple_product_repeated(a: &Vec3, b: &Vec3) -> f64 {
    b[0] * (a[2] * a[1] - a[1] * a[2])
        + b[1] * (a[0] * a[2] - a[2] * a[0])
        + b[2] * (a[1] * a[0] - a[0] * a[1])
}

/// Residuals of the vanishing velocity divergence of the b1 magnetic kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceResidual {
    /// Closed form `Y . (v x Y)/(|Y|^2 v0 + v . Y)^2`.
    pub analytic: f64,
    /// Finite-difference divergence.
    pub fd: f64,
    /// Frobenius norm of the finite-difference Jacobian.
    pub scale: f64,
}

impl DivergenceResidual {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.fd.abs() / self.scale
        } else {
            self.fd.abs()
        }
    }
}

/// Length scale on which the kernels vary in `v` near `(omega, v)`.
fn velocity_scale(m: f64, v: &Vec3, d: f64) -> f64 {
    let v0 = (m * m + v.norm_squared()).sqrt();
    let ang = v.norm().max(m) * d.sqrt();
    let rad = d * v0 * v0 * v0 / (m * m);
    v0.min(ang).min(rad).max(1e-6 * m)
}

/// Fourth-order central-difference Jacobian `J[k][j] = d f_k / d x_j`.
fn fd_jacobian<F: Fn(&Vec3) -> Vec3>(f: F, x: &Vec3, h: f64) -> Mat3 {
    let mut jac = Mat3::zeros();
    for j in 0..3 {
        let mut e = Vec3::zeros();
        e[j] = h;
        let d = (8.0 * (f(&(x + e)) - f(&(x - e))) - (f(&(x + 2.0 * e)) - f(&(x - 2.0 * e))))
            / (12.0 * h);
        jac.set_column(j, &d);
    }
    jac
}

/// Velocity divergence of `(Y/|Y|^2) x vh/(1 + vh . Y/|Y|)`.
pub fn check_div_v_vanish(y: &Vec3, v: &Vec3, m: f64) -> Result<DivergenceResidual> {
    let (om, _) = unit(y)?;
    let v0 = (m * m + v.norm_squared()).sqrt();
    let den = y.norm_squared() * v0 + v.dot(y);
    let analytic = triple_product_repeated(y, v) / (den * den);
    let d = KernelPoint::new(m, om, *v).denom();
    let h = 1e-3 * velocity_scale(m, v, d);
    let jac = fd_jacobian(
        |w| kernel_b1_magnetic(m, y, w).unwrap_or_else(|_| Vec3::zeros()),
        v,
        h,
    );
    Ok(DivergenceResidual {
        analytic,
        fd: jac.trace(),
        scale: jac.norm(),
    })
}

/// Right side of the directional-derivative identity:
/// `-(omega x vh)/(|Y|^2 D^2) (2 vh . omega + |vh|^2 + (vh . omega)^2)`.
pub fn kernel_b1_identity_rhs(m: f64, y: &Vec3, v: &Vec3) -> Result<Vec3> {
    let (om, r) = unit(y)?;
    let p = KernelPoint::new(m, om, *v);
    let vh = p.vhat();
    let d = p.denom();
    let c = vh.dot(&om);
    Ok(-om.cross(&vh) / (r * r * d * d) * (2.0 * c + vh.norm_squared() + c * c))
}

/// Residual of `vh . grad_Y` of the b1 magnetic kernel against its closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityResidual {
    pub lhs_fd: [f64; 3],
    pub rhs: [f64; 3],
    pub abs: f64,
    pub scale: f64,
}

impl IdentityResidual {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.abs / self.scale
        } else {
            self.abs
        }
    }
}

pub fn check_kernel_b1_identity(y: &Vec3, v: &Vec3, m: f64) -> Result<IdentityResidual> {
    let (om, r) = unit(y)?;
    let p = KernelPoint::new(m, om, *v);
    let vh = p.vhat();
    let d = p.denom();
    // Angular variation of the kernel in Y happens on the scale |Y| sqrt(D).
    let h = 1e-3 * r * d.sqrt().min(1.0);
    let jac = fd_jacobian(
        |w| kernel_b1_magnetic(m, w, v).unwrap_or_else(|_| Vec3::zeros()),
        y,
        h,
    );
    let lhs = jac * vh;
    let rhs = kernel_b1_identity_rhs(m, y, v)?;
    // Scale: the Y-gradient magnitude times |vh|.
    let scale = jac.norm() * vh.norm();
    Ok(IdentityResidual {
        lhs_fd: lhs.into(),
        rhs: rhs.into(),
        abs: (lhs - rhs).norm(),
        scale,
    })
}

/// Residual of `(Y x vh)/|Y|^3 + rhs = kernel_bt`, relative to the largest term.
pub fn check_t_kernel_identity(y: &Vec3, v: &Vec3, m: f64) -> Result<f64> {
    let (om, r) = unit(y)?;
    let vh = KernelPoint::new(m, om, *v).vhat();
    let first = y.cross(&vh) / (r * r * r);
    let rhs = kernel_b1_identity_rhs(m, y, v)?;
    let bt = kernel_bt(m, y, v)?;
    let scale = first.norm().max(rhs.norm()).max(bt.norm());
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok((first + rhs - bt).norm() / scale)
}

/// Boundary integrand of the direct magnetic term on `Y3 = -x3`: `-(e3 x J)` with `J = vh F`.
pub fn boundary_integrand_direct(vh: &Vec3, density: f64) -> Vec3 {
    -Vec3::new(0.0, 0.0, 1.0).cross(&(vh * density))
}

/// Boundary integrand of the image magnetic term on `Y3 = -x3`: `-(e3 x R J)` with `R J = (-J1, -J2, J3)`.
pub fn boundary_integrand_image(vh: &Vec3, density: f64) -> Vec3 {
    let j = vh * density;
    -Vec3::new(0.0, 0.0, 1.0).cross(&Vec3::new(-j[0], -j[1], j[2]))
}

/// Stratified sampler of `(omega, v)`: half the directions uniform on the
/// sphere, half inside the cone of angle `1/v0` about `-v/|v|`.
pub struct KernelSampler {
    rng: ChaCha8Rng,
    pub v_max: f64,
    pub m: f64,
}

impl KernelSampler {
    pub fn new(seed: u64, m: f64, v_max: f64) -> Self {
        KernelSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            v_max,
            m,
        }
    }

    pub fn unit_vector(&mut self) -> Vec3 {
        let c: f64 = self.rng.gen_range(-1.0..1.0);
        let p: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
        let s = (1.0 - c * c).sqrt();
        Vec3::new(s * p.cos(), s * p.sin(), c)
    }

    /// Momentum with log-uniform magnitude in `[1e-3 m, v_max]` and uniform direction.
    pub fn momentum(&mut self) -> Vec3 {
        let lo = (1e-3 * self.m).ln();
        let hi = self.v_max.ln();
        let r = self.rng.gen_range(lo..hi).exp();
        r * self.unit_vector()
    }

    /// Direction within angle `max_angle` of `axis`.
    pub fn near(&mut self, axis: &Vec3, max_angle: f64) -> Vec3 {
        let a = axis.normalize();
        let helper = if a[0].abs() < 0.9 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let e1 = a.cross(&helper).normalize();
        let e2 = a.cross(&e1);
        let cmin = max_angle.min(std::f64::consts::PI).cos();
        let c: f64 = self.rng.gen_range(cmin..=1.0);
        let s = (1.0 - c * c).max(0.0).sqrt();
        let p: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
        (c * a + s * (p.cos() * e1 + p.sin() * e2)).normalize()
    }

    pub fn sample(&mut self) -> (Vec3, Vec3) {
        let v = self.momentum();
        let om = if self.rng.gen_bool(0.5) {
            self.unit_vector()
        } else {
            let v0 = (self.m * self.m + v.norm_squared()).sqrt();
            self.near(&-v, self.m / v0)
        };
        (om, v)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen_range(0.0..1.0)
    }
}

/// Outcome of a sup-bound check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kernel: String,
    pub samples: u64,
    pub max_ratio: f64,
    pub violations: u64,
}

/// Kernel bounds with their closed-form right-hand sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelBound {
    /// Row norm of `K` against `2 v0/m`.
    ProjectionRow,
    /// Numerator part of `a^E` against `4 v0/m^2`.
    AccelerationNumerator,
    /// Denominator part of `a^E` against `3 v0/m^2`.
    AccelerationDenominator,
    /// Wall kernel against `1 + |vh_3| v0/m`.
    Wall,
    /// Scaled magnetic transport kernel `|Y|^2 |BT|` against `2 v0/m`.
    MagneticTransport,
    /// `|(|vh|^2 - 1)/(1 + vh . omega)|` against 2.
    Cancellation,
    /// Electric transport kernel against `6 v0/m`.
    ElectricTransport,
}

impl KernelBound {
    pub const ALL: [KernelBound; 7] = [
        KernelBound::ProjectionRow,
        KernelBound::AccelerationNumerator,
        KernelBound::AccelerationDenominator,
        KernelBound::Wall,
        KernelBound::MagneticTransport,
        KernelBound::Cancellation,
        KernelBound::ElectricTransport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelBound::ProjectionRow => "projection_row",
            KernelBound::AccelerationNumerator => "acceleration_numerator",
            KernelBound::AccelerationDenominator => "acceleration_denominator",
            KernelBound::Wall => "wall",
            KernelBound::MagneticTransport => "magnetic_transport",
            KernelBound::Cancellation => "cancellation",
            KernelBound::ElectricTransport => "electric_transport",
        }
    }

    /// `(value, bound)` at one point; every kernel is checked for both `omega` and its mirror.
    pub fn evaluate(self, p: &KernelPoint) -> (f64, f64) {
        let v0 = p.v0();
        let m = p.m;
        match self {
            KernelBound::ProjectionRow => (kernel_k_row_sup(p), 2.0 * v0 / m),
            KernelBound::AccelerationNumerator => {
                let (a1, _) = kernel_ae_split(p);
                (
                    (0..3).map(|i| a1.row(i).norm()).fold(0.0, f64::max),
                    4.0 * v0 / (m * m),
                )
            }
            KernelBound::AccelerationDenominator => {
                let (_, a2) = kernel_ae_split(p);
                (
                    (0..3).map(|i| a2.row(i).norm()).fold(0.0, f64::max),
                    3.0 * v0 / (m * m),
                )
            }
            KernelBound::Wall => (kernel_b2(p).norm(), 1.0 + p.vhat()[2].abs() * v0 / m),
            KernelBound::MagneticTransport => {
                let bt = bt_with(m, &p.omega, &p.v, p.reflected).unwrap_or_else(|_| Vec3::zeros());
                (bt.norm(), 2.0 * v0 / m)
            }
            KernelBound::Cancellation => (kernel_cancellation_ratio(p).abs(), 2.0),
            KernelBound::ElectricTransport => (kernel_et(p).norm(), 6.0 * v0 / m),
        }
    }
}

/// Samples `n` stratified points per mass and checks `bound` at `omega` and its mirror.
pub fn check_bound(
    bound: KernelBound,
    masses: &[f64],
    n: u64,
    v_max: f64,
    seed: u64,
) -> BoundReport {
    let mut samples = 0;
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for (k, &m) in masses.iter().enumerate() {
        let mut s = KernelSampler::new(seed.wrapping_add(k as u64), m, v_max);
        for _ in 0..n {
            let (om, v) = s.sample();
            for p in [KernelPoint::new(m, om, v), KernelPoint::reflected(m, om, v)] {
                let (val, b) = bound.evaluate(&p);
                let ratio = val / b;
                samples += 1;
                if !(ratio <= 1.0) {
                    violations += 1;
                }
                if ratio.is_finite() {
                    max_ratio = max_ratio.max(ratio);
                } else {
                    max_ratio = f64::INFINITY;
                }
            }
        }
    }
    BoundReport {
        kernel: bound.name().to_string(),
        samples,
        max_ratio,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn k_identity_at_rest() {
        let p = KernelPoint::new(1.0, Vec3::new(0.0, 0.6, 0.8), Vec3::zeros());
        assert_relative_eq!(kernel_k(&p), Mat3::identity());
        assert_relative_eq!(kernel_et(&p), -p.omega);
        assert_relative_eq!(kernel_b2(&p), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn worst_direction_direction_kernel_is_unit() {
        let v = Vec3::new(3.0, -1.0, 2.0);
        let om = -v.normalize();
        let p = KernelPoint::new(1.0, om, v);
        assert_relative_eq!(kernel_direction(&p).norm(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn safe_denominator_matches_direct() {
        let v = Vec3::new(0.3, 0.2, -0.4);
        let om = Vec3::new(0.0, 0.6, 0.8);
        let p = KernelPoint::new(1.3, om, v);
        assert_relative_eq!(p.denom(), 1.0 + p.vhat().dot(&om), max_relative = 1e-14);
        let q = KernelPoint::reflected(1.3, om, v);
        assert_relative_eq!(q.denom(), 1.0 + q.vhat().dot(&om), max_relative = 1e-14);
    }

    #[test]
    fn ae_matches_finite_difference() {
        let m = 0.7;
        let om = Vec3::new(0.48, -0.6, 0.64);
        let v = Vec3::new(0.4, 1.1, -0.3);
        for refl in [false, true] {
            let p = KernelPoint {
                m,
                omega: om,
                v,
                reflected: refl,
            };
            let a = kernel_ae(&p);
            let jac = fd_jacobian(
                |w| {
                    kernel_direction(&KernelPoint {
                        m,
                        omega: om,
                        v: *w,
                        reflected: refl,
                    })
                },
                &v,
                1e-3,
            );
            assert_relative_eq!(a, jac, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn bt_mirror_antisymmetry() {
        let y = Vec3::new(0.3, -0.5, 0.9);
        let v = Vec3::new(1.0, 0.2, -0.7);
        let a = kernel_bt(1.0, &y, &v).unwrap();
        let b = kernel_bt_reflected(1.0, &reflect(&y), &v).unwrap();
        assert_relative_eq!(b, -reflect(&a), max_relative = 1e-13);
        assert_eq!(kernel_bt(1.0, &y, &(2.0 * y)).unwrap().norm(), 0.0);
        assert!(matches!(
            kernel_bt(1.0, &Vec3::zeros(), &v),
            Err(Error::ZeroY)
        ));
    }

    #[test]
    fn divergence_analytic_is_zero() {
        let r = check_div_v_vanish(&Vec3::new(0.3, -1.2, 0.5), &Vec3::new(2.0, 0.1, -0.4), 1.0)
            .unwrap();
        assert_eq!(r.analytic, 0.0);
        assert!(r.relative() < 1e-8, "{r:?}");
    }

    #[test]
    fn b1_identity_small_case() {
        let r = check_kernel_b1_identity(&Vec3::new(0.0, 1.0, 0.0), &Vec3::new(0.8, 0.0, 0.0), 1.0)
            .unwrap();
        assert!(r.relative() < 1e-8, "{r:?}");
        assert!(
            check_t_kernel_identity(&Vec3::new(0.2, 1.0, -0.3), &Vec3::new(0.8, 0.4, 0.1), 1.0)
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn wall_kernel_third_component_when_v3_zero() {
        let p = KernelPoint::new(1.0, Vec3::new(0.0, 0.6, -0.8), Vec3::new(0.5, 0.3, 0.0));
        assert_eq!(kernel_b2(&p)[2], 1.0);
    }
}
