//! Half-space Green functions by images, Kirchhoff spherical means with parity
//! reflection, retarded-sphere quadrature and whole-space ray transforms.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{GaussRule, Hemisphere, SphereRule};
use crate::Vec3;

/// Distance below which the image kernels are treated as singular.
pub const EPS_SING: f64 = 1e-12;

/// Parity of a half-space extension across `x3 = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    /// `u(ybar) = -u(y)`: homogeneous Dirichlet data on the wall.
    Odd,
    /// `u(ybar) = u(y)`: homogeneous Neumann data on the wall.
    Even,
}

impl Parity {
    pub fn sign(self) -> f64 {
        match self {
            Parity::Odd => -1.0,
            Parity::Even => 1.0,
        }
    }
}

/// Variable the image-kernel gradient is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    X,
    Y,
}

/// Mirror image `(y1, y2, -y3)`.
#[inline]
pub fn reflect(y: &Vec3) -> Vec3 {
    Vec3::new(y[0], y[1], -y[2])
}

fn check_distance(d: f64) -> Result<()> {
    if d < EPS_SING || !d.is_finite() {
        Err(Error::Singular { dist: d })
    } else {
        Ok(())
    }
}

/// `1/|x-y| -+ 1/|x-ybar|` for odd/even parity.
pub fn g_image(parity: Parity, x: &Vec3, y: &Vec3) -> Result<f64> {
    let d = (x - y).norm();
    let di = (x - reflect(y)).norm();
    check_distance(d)?;
    check_distance(di)?;
    Ok(1.0 / d + parity.sign() / di)
}

/// Analytic gradient of [`g_image`] in `x` or `y`.
pub fn grad_g_image(parity: Parity, x: &Vec3, y: &Vec3, wrt: Wrt) -> Result<Vec3> {
    let r = x - y;
    let ri = x - reflect(y);
    let d = r.norm();
    let di = ri.norm();
    check_distance(d)?;
    check_distance(di)?;
    let direct = -r / (d * d * d);
    let image = -ri / (di * di * di);
    let s = parity.sign();
    Ok(match wrt {
        Wrt::X => direct + s * image,
        // d/dy of |x - ybar| flips the sign of the tangential part only.
        Wrt::Y => -direct + s * Vec3::new(-image[0], -image[1], image[2]),
    })
}

/// Solid angle of the directions `omega` with `|x + t omega| <= r0`, in the
/// closed form valid while the cap is partial, clamped at zero.
pub fn spherical_cap_area(r0: f64, t: f64, x_norm: f64) -> f64 {
    let d = t - x_norm;
    (PI * (r0 * r0 - d * d) / (t * x_norm)).max(0.0)
}

/// Exact solid angle of the same set, including the fully covered and empty cases.
pub fn spherical_cap_area_exact(r0: f64, t: f64, x_norm: f64) -> f64 {
    if t <= 0.0 {
        return if x_norm <= r0 { 4.0 * PI } else { 0.0 };
    }
    if x_norm == 0.0 {
        return if t <= r0 { 4.0 * PI } else { 0.0 };
    }
    let c = (r0 * r0 - x_norm * x_norm - t * t) / (2.0 * t * x_norm);
    2.0 * PI * (c.clamp(-1.0, 1.0) + 1.0)
}

/// `t^2 * integral over the chosen part of the sphere |y - x| = t of f(y, omega)`.
pub fn retarded_surface_integral<F>(
    rule: &SphereRule,
    t: f64,
    x: &Vec3,
    hemisphere: Hemisphere,
    mut integrand: F,
) -> Result<f64>
where
    F: FnMut(&Vec3, &Vec3) -> f64,
{
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::QuadratureFailure(format!(
            "retarded sphere radius {t} is not admissible"
        )));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let Some((a, b)) = SphereRule::cos_range(hemisphere, x[2], t) else {
        return Ok(0.0);
    };
    let mut acc = 0.0;
    rule.for_each_in_band(a, b, |om, w| {
        let y = x + t * om;
        acc += w * integrand(&y, &om);
    });
    if !acc.is_finite() {
        return Err(Error::QuadratureFailure(
            "non-finite surface integral".into(),
        ));
    }
    Ok(t * t * acc)
}

pub type ScalarFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&Vec3) -> Vec3 + Send + Sync>;

/// Cauchy data `(u0, u1)` for the wave equation, supported in the ball of radius `r0`.
#[derive(Clone)]
pub struct InitialWaveData {
    pub u0: ScalarFn,
    pub u1: ScalarFn,
    pub grad_u0: VectorFn,
    pub r0: f64,
}

impl InitialWaveData {
    pub fn zero() -> Self {
        InitialWaveData {
            u0: Arc::new(|_| 0.0),
            u1: Arc::new(|_| 0.0),
            grad_u0: Arc::new(|_| Vec3::zeros()),
            r0: 0.0,
        }
    }

    /// Kirchhoff integrand `t u1 + u0 + grad u0 . (y - x)` at a sphere point.
    #[inline]
    fn integrand(&self, t: f64, y: &Vec3, x: &Vec3) -> f64 {
        t * (self.u1)(y) + (self.u0)(y) + (self.grad_u0)(y).dot(&(y - x))
    }

    /// Same integrand for the reflected data at a lower-hemisphere point `y`.
    #[inline]
    fn integrand_reflected(&self, t: f64, y: &Vec3, x: &Vec3) -> f64 {
        let yb = reflect(y);
        let g = (self.grad_u0)(&yb);
        t * (self.u1)(&yb) + (self.u0)(&yb) + reflect(&g).dot(&(y - x))
    }
}

/// Kirchhoff spherical mean. With `Some(parity)` the data live on the upper
/// half-space and the lower hemisphere sees their reflection with the parity
/// sign; with `None` the whole sphere sees the data directly.
pub fn kirchhoff_hom(
    rule: &SphereRule,
    data: &InitialWaveData,
    t: f64,
    x: &Vec3,
    parity: Option<Parity>,
) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::QuadratureFailure(format!(
            "Kirchhoff formula needs t > 0, got {t}"
        )));
    }
    let norm = 1.0 / (4.0 * PI * t * t);
    let Some(parity) = parity else {
        let v = retarded_surface_integral(rule, t, x, Hemisphere::Full, |y, _| {
            data.integrand(t, y, x)
        })?;
        return Ok(norm * v);
    };
    // Directions that cannot reach the support are skipped by the cap test.
    let reach = |y: &Vec3| data.r0 <= 0.0 || y.norm() <= data.r0 + 1e-12;
    let upper = retarded_surface_integral(rule, t, x, Hemisphere::Upper, |y, _| {
        if reach(y) {
            data.integrand(t, y, x)
        } else {
            0.0
        }
    })?;
    let lower = retarded_surface_integral(rule, t, x, Hemisphere::Lower, |y, _| {
        if reach(&reflect(y)) {
            data.integrand_reflected(t, y, x)
        } else {
            0.0
        }
    })?;
    Ok(norm * (upper + parity.sign() * lower))
}

/// Whole-space ray transform of a half-space source extended by parity:
/// for each direction `omega` of `rule`, `L(omega)` integrates `src_ext(x + r omega)` in `r`
/// over the part of the ray inside the mirror-symmetric box
/// `|y1|,|y2| <= half_par`, `|y3| <= height` that holds the source. The ray is
/// split at the wall crossing, and each piece into `2 n_sub` panels graded
/// geometrically towards both ends so thin wall layers are resolved. Calls `visit(omega, weight, L)` per direction.
pub struct RayTransform {
    pub rule: SphereRule,
    pub radial: GaussRule,
    pub n_sub: usize,
    pub first_piece: f64,
}

impl RayTransform {
    pub fn new(
        n_theta: usize,
        n_phi: usize,
        n_radial: usize,
        n_sub: usize,
        first_piece: f64,
    ) -> Self {
        RayTransform {
            rule: SphereRule::new(n_theta, n_phi),
            radial: GaussRule::new(n_radial),
            n_sub: n_sub.max(1),
            first_piece,
        }
    }

    /// Parameter interval `[r_in, r_out]` (with `r_in >= 0`) of the ray inside the box.
    fn box_interval(x: &Vec3, om: &Vec3, half_par: f64, height: f64) -> Option<(f64, f64)> {
        let bounds = [half_par, half_par, height];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if om[a] != 0.0 {
                let r1 = (-bounds[a] - x[a]) / om[a];
                let r2 = (bounds[a] - x[a]) / om[a];
                lo = lo.max(r1.min(r2));
                hi = hi.min(r1.max(r2));
            } else if x[a].abs() > bounds[a] {
                return None;
            }
        }
        (hi > lo).then_some((lo, hi))
    }

    /// Geometric panel breakpoints on `[0, len]` refined towards both ends.
    fn graded_breaks(&self, len: f64) -> Vec<f64> {
        let n = self.n_sub;
        let half = 0.5 * len;
        let h0 = self.first_piece.min(half / n as f64);
        let q = if n > 1 && h0 * (n as f64) < half {
            let total = |q: f64| h0 * (q.powi(n as i32) - 1.0) / (q - 1.0);
            let (mut lo, mut hi) = (1.0, 2.0);
            while total(hi) < half {
                hi *= 2.0;
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if total(mid) < half {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        } else {
            1.0
        };
        let mut left = vec![0.0];
        let mut s = 0.0;
        let mut h = if q == 1.0 { half / n as f64 } else { h0 };
        for _ in 0..n - 1 {
            s += h;
            left.push(s.min(half));
            h *= q;
        }
        let mut breaks = left.clone();
        breaks.push(half);
        for b in left.iter().rev() {
            breaks.push(len - b);
        }
        breaks
    }

    fn segment<const N: usize, S: Fn(&Vec3) -> [f64; N]>(
        &self,
        x: &Vec3,
        om: &Vec3,
        a: f64,
        b: f64,
        parity: &[Parity; N],
        src: &S,
        out: &mut [f64; N],
    ) {
        if b <= a {
            return;
        }
        let breaks = self.graded_breaks(b - a);
        for pair in breaks.windows(2) {
            if pair[1] <= pair[0] {
                continue;
            }
            for (r, w) in self.radial.on(a + pair[0], a + pair[1]) {
                let y = x + r * om;
                let v = if y[2] >= 0.0 {
                    src(&y)
                } else {
                    let mut v = src(&reflect(&y));
                    for c in 0..N {
                        v[c] *= parity[c].sign();
                    }
                    v
                };
                for c in 0..N {
                    out[c] += w * v[c];
                }
            }
        }
    }

    pub fn transform<const N: usize, S, V>(
        &self,
        x: &Vec3,
        half_par: f64,
        height: f64,
        parity: &[Parity; N],
        src: S,
        mut visit: V,
    ) where
        S: Fn(&Vec3) -> [f64; N],
        V: FnMut(&Vec3, f64, &[f64; N]),
    {
        self.rule.for_each_in_band(-1.0, 1.0, |om, w| {
            let mut line = [0.0; N];
            if let Some((r_in, r_out)) = Self::box_interval(x, &om, half_par, height) {
                let r_wall = if om[2] < 0.0 && x[2] > 0.0 {
                    x[2] / -om[2]
                } else {
                    f64::NEG_INFINITY
                };
                if r_wall > r_in && r_wall < r_out {
                    self.segment(x, &om, r_in, r_wall, parity, &src, &mut line);
                    self.segment(x, &om, r_wall, r_out, parity, &src, &mut line);
                } else {
                    self.segment(x, &om, r_in, r_out, parity, &src, &mut line);
                }
            }
            visit(&om, w, &line);
        });
    }

    /// `E(x) = -grad_x integral G_odd(x,y) rho(y) dy` with `rho` given on the upper half-space.
    pub fn electric_field<S: Fn(&Vec3) -> f64>(
        &self,
        x: &Vec3,
        half_par: f64,
        height: f64,
        rho: S,
    ) -> Vec3 {
        let mut e = Vec3::zeros();
        self.transform(
            x,
            half_par,
            height,
            &[Parity::Odd],
            |y| [rho(y)],
            |om, w, l| e -= w * l[0] * om,
        );
        e
    }

    /// `B(x) = curl_x integral J_ext(y)/|x-y| dy`, with tangential current odd and normal current even.
    pub fn magnetic_field<S: Fn(&Vec3) -> Vec3>(
        &self,
        x: &Vec3,
        half_par: f64,
        height: f64,
        current: S,
    ) -> Vec3 {
        let mut b = Vec3::zeros();
        let parity = [Parity::Odd, Parity::Odd, Parity::Even];
        self.transform(
            x,
            half_par,
            height,
            &parity,
            |y| {
                let j = current(y);
                [j[0], j[1], j[2]]
            },
            |om, w, l| b += w * om.cross(&Vec3::new(l[0], l[1], l[2])),
        );
        b
    }

    /// Both fields from a combined source `[rho, J1, J2, J3]`.
    pub fn fields<S: Fn(&Vec3) -> [f64; 4]>(
        &self,
        x: &Vec3,
        half_par: f64,
        height: f64,
        src: S,
    ) -> (Vec3, Vec3) {
        let mut e = Vec3::zeros();
        let mut b = Vec3::zeros();
        let parity = [Parity::Odd, Parity::Odd, Parity::Odd, Parity::Even];
        self.transform(x, half_par, height, &parity, src, |om, w, l| {
            e -= w * l[0] * om;
            b += w * om.cross(&Vec3::new(l[1], l[2], l[3]));
        });
        (e, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn image_kernel_examples() {
        let x = Vec3::new(0.0, 0.0, 1.0);
        let y = Vec3::new(0.0, 0.0, 2.0);
        assert_relative_eq!(
            g_image(Parity::Odd, &x, &y).unwrap(),
            2.0 / 3.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            g_image(Parity::Even, &x, &y).unwrap(),
            4.0 / 3.0,
            max_relative = 1e-15
        );
        let yw = Vec3::new(0.3, -0.2, 0.0);
        assert_eq!(g_image(Parity::Odd, &x, &yw).unwrap(), 0.0);
        assert!(matches!(
            g_image(Parity::Odd, &x, &x),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn cap_area_example() {
        assert_relative_eq!(
            spherical_cap_area(1.0, 2.0, 2.0),
            PI / 4.0,
            max_relative = 1e-15
        );
        assert_eq!(spherical_cap_area(1.0, 5.0, 2.0), 0.0);
        assert_relative_eq!(
            spherical_cap_area_exact(1.0, 2.0, 2.0),
            PI / 4.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn kirchhoff_constant_data() {
        let rule = SphereRule::new(16, 32);
        let data = InitialWaveData {
            u0: Arc::new(|_| 2.5),
            u1: Arc::new(|_| 0.0),
            grad_u0: Arc::new(|_| Vec3::zeros()),
            r0: 0.0,
        };
        let x = Vec3::new(0.1, 0.2, 3.0);
        assert_relative_eq!(
            kirchhoff_hom(&rule, &data, 1.0, &x, Some(Parity::Odd)).unwrap(),
            2.5,
            max_relative = 1e-13
        );
        let data1 = InitialWaveData {
            u0: Arc::new(|_| 0.0),
            u1: Arc::new(|_| 1.5),
            grad_u0: Arc::new(|_| Vec3::zeros()),
            r0: 0.0,
        };
        assert_relative_eq!(
            kirchhoff_hom(&rule, &data1, 2.0, &x, None).unwrap(),
            3.0,
            max_relative = 1e-13
        );
    }

    #[test]
    fn ray_transform_boundary_symmetry() {
        let rt = RayTransform::new(8, 16, 6, 3, 0.05);
        let rho = |y: &Vec3| (-(y - Vec3::new(0.3, 0.1, 0.4)).norm_squared()).exp();
        let j = |y: &Vec3| Vec3::new(y[1], -y[0], 0.5) * (-(y.norm_squared())).exp();
        let x = Vec3::new(0.2, -0.3, 0.0);
        let e = rt.electric_field(&x, 4.0, 4.0, rho);
        let b = rt.magnetic_field(&x, 4.0, 4.0, j);
        assert!(e[0].abs() < 1e-14 && e[1].abs() < 1e-14, "{e:?}");
        assert!(b[2].abs() < 1e-14, "{b:?}");
    }
}
