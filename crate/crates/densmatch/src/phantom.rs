//! Analytic phantoms: radial deformations with closed-form Jacobians and
//! inverses, plus density pairs linked by them. Everything here has an exact
//! continuum description, so registration output can be compared against
//! known ground truth instead of against another discretization.

use crate::density::Density;
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarGrid, VectorGrid};
use crate::matching::{InverseTransform, Penalty};

/// Quintic smoothstep: 0 below 0, 1 above 1, C^2 across both ends.
fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    }
}

/// A Gaussian-profile radial push centered at `center`:
///
/// ```text
/// psi(x) = x + amplitude * exp(-r^2 / width^2) * (x - center),   r = |x - center|
/// ```
///
/// The radial profile is `rho(r) = r * (1 + amplitude * exp(-r^2/width^2))`,
/// giving the closed-form forward Jacobian `rho'(r) * (rho(r)/r)^2`. The
/// displacement form makes `psi` the exact identity when `amplitude == 0`.
#[derive(Debug, Clone, Copy)]
pub struct RadialBump {
    pub amplitude: f64,
    pub width: f64,
    pub center: [f64; 3],
}

impl RadialBump {
    pub fn new(amplitude: f64, width: f64, center: [f64; 3]) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bump width must be positive, got {width}"
            )));
        }
        if !(amplitude.is_finite() && amplitude > -1.0) {
            return Err(Error::InvalidParameter(format!(
                "bump amplitude must be finite and > -1, got {amplitude}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bump center must be finite, got {center:?}"
            )));
        }
        Ok(Self {
            amplitude,
            width,
            center,
        })
    }

    fn gauss(&self, r2: f64) -> f64 {
        (-r2 / (self.width * self.width)).exp()
    }

    fn rho(&self, r: f64) -> f64 {
        r * (1.0 + self.amplitude * self.gauss(r * r))
    }

    fn rho_prime(&self, r: f64) -> f64 {
        let w2 = self.width * self.width;
        1.0 + self.amplitude * self.gauss(r * r) * (1.0 - 2.0 * r * r / w2)
    }

    pub fn forward(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let s = self.amplitude * self.gauss(r2);
        [p[0] + s * d[0], p[1] + s * d[1], p[2] + s * d[2]]
    }

    /// Determinant of the forward differential at `p`; `(1+amplitude)^3` at
    /// the center.
    pub fn jacobian_forward(&self, p: [f64; 3]) -> f64 {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let ratio = 1.0 + self.amplitude * self.gauss(r2);
        self.rho_prime(r2.sqrt()) * ratio * ratio
    }

    /// Invert the radial profile by safeguarded Newton iteration. Assumes
    /// parameters for which `rho` is strictly increasing (see
    /// [`make_pair`] for the gate).
    fn inverse_radius(&self, ry: f64) -> f64 {
        if ry == 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = if self.amplitude >= 0.0 {
            (ry / (1.0 + self.amplitude), ry)
        } else {
            (ry, ry / (1.0 + self.amplitude))
        };
        let tol = 1e-14 * (1.0 + ry);
        let mut r = 0.5 * (lo + hi);
        for _ in 0..100 {
            let g = self.rho(r) - ry;
            if g.abs() <= tol {
                return r;
            }
            if g > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let gp = self.rho_prime(r);
            let newton = r - g / gp;
            r = if gp > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        r
    }

    pub fn inverse(&self, q: [f64; 3]) -> [f64; 3] {
        let d = [
            q[0] - self.center[0],
            q[1] - self.center[1],
            q[2] - self.center[2],
        ];
        let ry = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if ry == 0.0 {
            return self.center;
        }
        let r = self.inverse_radius(ry);
        let s = r / ry;
        [
            self.center[0] + s * d[0],
            self.center[1] + s * d[1],
            self.center[2] + s * d[2],
        ]
    }

    /// Determinant of the inverse differential at `q`, i.e.
    /// `1 / jacobian_forward(inverse(q))`.
    pub fn jacobian_inverse(&self, q: [f64; 3]) -> f64 {
        1.0 / self.jacobian_forward(self.inverse(q))
    }

    /// Smallest forward Jacobian over the nodes of `geometry` (the profile is
    /// radial and smooth, so a node scan is an adequate invertibility probe).
    pub fn min_forward_jacobian(&self, geometry: &GridGeometry) -> f64 {
        let mut min = f64::INFINITY;
        for k in 0..geometry.dims[2] {
            for j in 0..geometry.dims[1] {
                for i in 0..geometry.dims[0] {
                    min = min.min(self.jacobian_forward(geometry.node_position(i, j, k)));
                }
            }
        }
        min
    }
}

/// Discretize the bump's inverse as an [`InverseTransform`]: map nodes through
/// the exact inverse and store the exact inverse Jacobian.
pub fn radial_map(geometry: GridGeometry, bump: &RadialBump) -> Result<InverseTransform> {
    let n = geometry.len();
    let mut mx = Vec::with_capacity(n);
    let mut my = Vec::with_capacity(n);
    let mut mz = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n);
    for k in 0..geometry.dims[2] {
        for j in 0..geometry.dims[1] {
            for i in 0..geometry.dims[0] {
                let q = geometry.node_position(i, j, k);
                let p = bump.inverse(q);
                mx.push(p[0]);
                my.push(p[1]);
                mz.push(p[2]);
                jac.push(1.0 / bump.jacobian_forward(p));
            }
        }
    }
    InverseTransform::new(
        VectorGrid::new(geometry, [mx, my, mz])?,
        ScalarGrid::new(geometry, jac)?,
    )
}

/// Gaussian blob on a constant background, sampled without truncation.
pub fn gaussian_blob(
    geometry: GridGeometry,
    center: [f64; 3],
    width: f64,
    peak: f64,
    background: f64,
) -> Result<Density> {
    if !(width.is_finite() && width > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "blob width must be positive, got {width}"
        )));
    }
    Density::from_fn(geometry, |p| {
        let r2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
        background + peak * (-r2 / (width * width)).exp()
    })
}

/// Build a registration pair with exact ground truth: the source sampled from
/// `i0_fn`, the target sampled from the analytic pushforward of `i0_fn`
/// through `bump`, and the discretized true transform. Rejects bumps whose
/// forward Jacobian drops below 0.1 anywhere on the grid.
pub fn make_pair(
    geometry: GridGeometry,
    i0_fn: impl Fn([f64; 3]) -> f64,
    bump: &RadialBump,
) -> Result<(Density, Density, InverseTransform)> {
    let min_jac = bump.min_forward_jacobian(&geometry);
    const REQUIRED: f64 = 0.1;
    if !(min_jac >= REQUIRED) {
        return Err(Error::NonInvertibleParameters {
            min_jac,
            required: REQUIRED,
        });
    }
    let i0 = Density::from_fn(geometry, &i0_fn)?;
    let i1 = Density::from_fn(geometry, |q| {
        let p = bump.inverse(q);
        i0_fn(p) / bump.jacobian_forward(p)
    })?;
    let truth = radial_map(geometry, bump)?;
    Ok((i0, i1, truth))
}

/// A compressing-core phantom built from a radially symmetric volume
/// displacement, designed for a unit-extent domain around `center`.
///
/// The map is defined through `V(r) = r^3 + delta(r)` with `rho(r) =
/// V(r)^{1/3}` and Jacobian `J(r) = 1 + delta'(r) / (3 r^2)`, where the
/// displacement `delta` is a C^2 piecewise polynomial:
///
/// * `[0, core_r]` — `delta = (core_jacobian - 1) r^3`, so `J` is exactly
///   `core_jacobian`: the core expands uniformly;
/// * `[core_r, shell_r]` — quintic Hermite blend up to the constant
///   `delta_max`;
/// * `[shell_r, outer_r]` — `delta` constant, so `J == 1` exactly: the shell
///   is carried outward rigidly in volume (incompressible);
/// * `[outer_r, far_r]` — quintic taper back to zero;
/// * beyond `far_r` — exact identity.
///
/// The source density `i0` places material of value 2 in a spherical shell
/// (radii `[0.22, 0.28]`) around a unit core, and the matching target is the
/// exact analytic pushforward `i0(rho^{-1}) / J(rho^{-1})`. The built-in
/// penalty is a smooth band that is `high` over the material shell and `low`
/// elsewhere, following the mean-intensity convention `low = 0.1 * sigma`,
/// `high = 10 * sigma` with `sigma` the mean of `i0` over its support.
#[derive(Debug, Clone, Copy)]
pub struct TwoCompartment {
    pub center: [f64; 3],
    pub core_jacobian: f64,
    pub core_r: f64,
    pub shell_r: f64,
    pub outer_r: f64,
    pub far_r: f64,
    pub delta_max: f64,
}

impl TwoCompartment {
    /// The standard configuration: core expanding 1.5x inside an
    /// incompressible shell.
    pub fn standard(center: [f64; 3]) -> Self {
        let core_jacobian = 1.5;
        Self {
            center,
            core_jacobian,
            core_r: 0.14,
            shell_r: 0.20,
            outer_r: 0.30,
            far_r: 0.44,
            delta_max: (core_jacobian - 1.0) * 0.17_f64.powi(3),
        }
    }

    /// Volume displacement and its derivative at radius `r`.
    fn delta(&self, r: f64) -> (f64, f64) {
        let a = self.core_jacobian - 1.0;
        if r <= self.core_r {
            return (a * r * r * r, 3.0 * a * r * r);
        }
        if r < self.shell_r {
            // Quintic Hermite: value/slope/curvature of the core cubic at
            // core_r, flat (delta_max, 0, 0) at shell_r.
            let l = self.shell_r - self.core_r;
            let t = (r - self.core_r) / l;
            let v0 = a * self.core_r.powi(3);
            let d0 = 3.0 * a * self.core_r * self.core_r;
            let s0 = 6.0 * a * self.core_r;
            let v1 = self.delta_max;
            let t2 = t * t;
            let t3 = t2 * t;
            let t4 = t3 * t;
            let t5 = t4 * t;
            let h00 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
            let h10 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
            let h20 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
            let h01 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
            let d_h00 = -30.0 * t2 + 60.0 * t3 - 30.0 * t4;
            let d_h10 = 1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4;
            let d_h20 = 0.5 * (2.0 * t - 9.0 * t2 + 12.0 * t3 - 5.0 * t4);
            let d_h01 = 30.0 * t2 - 60.0 * t3 + 30.0 * t4;
            let value = v0 * h00 + d0 * l * h10 + s0 * l * l * h20 + v1 * h01;
            let deriv = (v0 * d_h00 + d0 * l * d_h10 + s0 * l * l * d_h20 + v1 * d_h01) / l;
            return (value, deriv);
        }
        if r <= self.outer_r {
            return (self.delta_max, 0.0);
        }
        if r < self.far_r {
            let l = self.far_r - self.outer_r;
            let t = (r - self.outer_r) / l;
            let t2 = t * t;
            let t3 = t2 * t;
            let w = t3 * (10.0 + t * (-15.0 + 6.0 * t));
            let dw = 30.0 * t2 * (1.0 - t) * (1.0 - t);
            return (self.delta_max * (1.0 - w), -self.delta_max * dw / l);
        }
        (0.0, 0.0)
    }

    /// Jacobian of the forward map at source radius `r`; exactly
    /// `core_jacobian` in the core and exactly 1 on the shell and far field.
    pub fn jacobian(&self, r: f64) -> f64 {
        if r <= self.core_r {
            return self.core_jacobian;
        }
        let (_, dd) = self.delta(r);
        if dd == 0.0 {
            return 1.0;
        }
        1.0 + dd / (3.0 * r * r)
    }

    /// Forward radial profile `rho(r) = (r^3 + delta(r))^{1/3}`.
    pub fn forward_radius(&self, r: f64) -> f64 {
        if r >= self.far_r {
            return r;
        }
        let (d, _) = self.delta(r);
        (r * r * r + d).cbrt()
    }

    /// Inverse of [`forward_radius`](Self::forward_radius) by safeguarded
    /// Newton iteration on the volume coordinate.
    pub fn inverse_radius(&self, ry: f64) -> f64 {
        if ry >= self.far_r {
            return ry;
        }
        let target = ry * ry * ry;
        let mut lo = (target - self.delta_max).max(0.0).cbrt();
        let mut hi = ry;
        let tol = 1e-14 * (1.0 + ry);
        let mut r = 0.5 * (lo + hi);
        for _ in 0..100 {
            let (d, dd) = self.delta(r);
            let g = r * r * r + d - target;
            if g.abs() <= tol * (1.0 + target) {
                return r;
            }
            if g > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let gp = 3.0 * r * r + dd;
            let newton = r - g / gp;
            r = if gp > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        r
    }

    /// Source intensity at radius `r`: 1 in the core, 2 in the material
    /// shell `[0.22, 0.28]`, 0.1 background, with C^2 transitions.
    pub fn profile(&self, r: f64) -> f64 {
        const R0: f64 = 0.16;
        const R1: f64 = 0.22;
        const R2: f64 = 0.28;
        const R3: f64 = 0.34;
        if r <= R0 {
            1.0
        } else if r < R1 {
            1.0 + smoothstep((r - R0) / (R1 - R0))
        } else if r <= R2 {
            2.0
        } else if r < R3 {
            2.0 - 1.9 * smoothstep((r - R2) / (R3 - R2))
        } else {
            0.1
        }
    }

    /// Target intensity at radius `ry`: the analytic pushforward of
    /// [`profile`](Self::profile) through the radial map.
    pub fn target_profile(&self, ry: f64) -> f64 {
        let r = self.inverse_radius(ry);
        self.profile(r) / self.jacobian(r)
    }

    /// Smooth, radial band equal to 1 over the material shell and 0 away
    /// from it.
    pub fn shell_band(&self, r: f64) -> f64 {
        smoothstep((r - 0.19) / 0.03) * (1.0 - smoothstep((r - 0.28) / 0.03))
    }

    /// Smooth window that is 1 on the core region and falls to 0 across
    /// `[0.23, 0.27]`, used to track core mass.
    pub fn core_window(&self, r: f64) -> f64 {
        1.0 - smoothstep((r - 0.23) / 0.04)
    }

    /// The core window carried to target coordinates by the map, so that the
    /// continuum masses `integral i0 * core_window` and `integral i1 *
    /// pushed_core_window` are equal exactly.
    pub fn pushed_core_window(&self, ry: f64) -> f64 {
        self.core_window(self.inverse_radius(ry))
    }

    fn radius(&self, p: [f64; 3]) -> f64 {
        ((p[0] - self.center[0]).powi(2)
            + (p[1] - self.center[1]).powi(2)
            + (p[2] - self.center[2]).powi(2))
        .sqrt()
    }

    /// Sample the source, target, and shell-weighted penalty on `geometry`.
    pub fn build(&self, geometry: GridGeometry) -> Result<(Density, Density, Penalty)> {
        let i0 = Density::from_fn(geometry, |p| self.profile(self.radius(p)))?;
        let i1 = Density::from_fn(geometry, |p| self.target_profile(self.radius(p)))?;
        let vals = i0.grid().values();
        let support: Vec<f64> = vals.iter().copied().filter(|&v| v > 0.0).collect();
        let sigma = support.iter().sum::<f64>() / support.len() as f64;
        let (low, high) = (0.1 * sigma, 10.0 * sigma);
        let f = Penalty::from_fn(geometry, |p| {
            low + (high - low) * self.shell_band(self.radius(p))
        })?;
        Ok((i0, i1, f))
    }

    /// Discretize the exact transform (inverse map plus inverse Jacobian) on
    /// `geometry`.
    pub fn true_transform(&self, geometry: GridGeometry) -> Result<InverseTransform> {
        let n = geometry.len();
        let mut mx = Vec::with_capacity(n);
        let mut my = Vec::with_capacity(n);
        let mut mz = Vec::with_capacity(n);
        let mut jac = Vec::with_capacity(n);
        for k in 0..geometry.dims[2] {
            for j in 0..geometry.dims[1] {
                for i in 0..geometry.dims[0] {
                    let q = geometry.node_position(i, j, k);
                    let ry = self.radius(q);
                    let r = self.inverse_radius(ry);
                    let s = if ry > 0.0 { r / ry } else { 1.0 };
                    mx.push(self.center[0] + s * (q[0] - self.center[0]));
                    my.push(self.center[1] + s * (q[1] - self.center[1]));
                    mz.push(self.center[2] + s * (q[2] - self.center[2]));
                    jac.push(1.0 / self.jacobian(r));
                }
            }
        }
        InverseTransform::new(
            VectorGrid::new(geometry, [mx, my, mz])?,
            ScalarGrid::new(geometry, jac)?,
        )
    }
}
