//! Densities on a grid and the operations the registration energy is built
//! from: the mass-preserving pushforward/pullback actions and the two
//! distances between densities.
//!
//! A density is a non-negative scalar field `I` understood as the measure
//! `I dx`. The pushforward under a map `phi` with stored inverse `phi^{-1}`
//! and Jacobian determinant `|D phi^{-1}|` is
//!
//! ```text
//! (phi_* I)(y) = |D phi^{-1}|(y) * I(phi^{-1}(y))
//! ```
//!
//! which preserves total mass exactly in the continuum. The squared Hellinger
//! distance
//!
//! ```text
//! d^2(I0, I1) = integral (sqrt(I0) - sqrt(I1))^2 dx
//! ```
//!
//! is the small-angle form of the spherical distance computed by
//! [`fisher_rao_sphere`] and is invariant under pushing both densities
//! forward by the same transform. All integrals use the midpoint rule: one
//! voxel volume per node.

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarGrid, VectorGrid};
use crate::matching::InverseTransform;

/// Non-negative scalar field interpreted as a volume density.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    grid: ScalarGrid,
}

impl Density {
    pub fn new(grid: ScalarGrid) -> Result<Self> {
        if let Some(i) = grid.values().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidField(format!(
                "negative density {} at linear index {i}",
                grid.values()[i]
            )));
        }
        Ok(Self { grid })
    }

    pub fn from_fn(geometry: GridGeometry, f: impl FnMut([f64; 3]) -> f64) -> Result<Self> {
        Self::new(ScalarGrid::from_fn(geometry, f)?)
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Result<Self> {
        Self::new(ScalarGrid::constant(geometry, value)?)
    }

    pub fn grid(&self) -> &ScalarGrid {
        &self.grid
    }

    pub fn into_grid(self) -> ScalarGrid {
        self.grid
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.grid.geometry()
    }

    /// Total mass under the midpoint rule.
    pub fn mass(&self) -> f64 {
        self.grid.values().iter().sum::<f64>() * self.geometry().voxel_volume()
    }

    /// Pointwise square root, used wherever the energy needs `sqrt(I)`.
    pub fn sqrt_grid(&self) -> ScalarGrid {
        let vals = self.grid.values().iter().map(|v| v.sqrt()).collect();
        ScalarGrid::new(*self.grid.geometry(), vals).expect("sqrt of finite non-negative is finite")
    }
}

fn check_positive_jacdet(jacdet: &ScalarGrid) -> Result<()> {
    let mut min = f64::INFINITY;
    let mut at = 0;
    for (i, &v) in jacdet.values().iter().enumerate() {
        if v < min {
            min = v;
            at = i;
        }
    }
    if min <= 0.0 {
        Err(Error::NonPositiveJacobian { min, index: at })
    } else {
        Ok(())
    }
}

/// Pushforward of `d` by the transform whose inverse is stored in `t`:
/// `out(y) = jacdet(y) * d(map(y))`. Preserves mass up to interpolation and
/// quadrature error for deformations supported inside the domain.
pub fn pushforward(d: &Density, t: &InverseTransform) -> Result<Density> {
    d.geometry().check_match(t.geometry())?;
    check_positive_jacdet(t.jacdet())?;
    let n = d.geometry().len();
    let mut vals = Vec::with_capacity(n);
    let jd = t.jacdet().values();
    for idx in 0..n {
        let p = t.map().value_at(idx);
        vals.push(jd[idx] * d.grid.sample_trilinear(p));
    }
    Density::new(ScalarGrid::new(*d.geometry(), vals)?)
}

/// Pullback of `d` by the map `phi` given as a position grid:
/// `out(x) = det(D phi)(x) * d(phi(x))`, with the determinant taken by
/// finite differences of the map grid.
pub fn pullback(d: &Density, map: &VectorGrid) -> Result<Density> {
    d.geometry().check_match(map.geometry())?;
    let det = map.jacobian_determinant_fd();
    check_positive_jacdet(&det)?;
    let n = d.geometry().len();
    let mut vals = Vec::with_capacity(n);
    for idx in 0..n {
        let p = map.value_at(idx);
        vals.push(det.values()[idx] * d.grid.sample_trilinear(p));
    }
    Density::new(ScalarGrid::new(*d.geometry(), vals)?)
}

/// Squared Hellinger distance `integral (sqrt(a) - sqrt(b))^2 dx`.
pub fn hellinger_sq(a: &Density, b: &Density) -> Result<f64> {
    a.geometry().check_match(b.geometry())?;
    let s: f64 = a
        .grid
        .values()
        .iter()
        .zip(b.grid.values())
        .map(|(x, y)| {
            let d = x.sqrt() - y.sqrt();
            d * d
        })
        .sum();
    Ok(s * a.geometry().voxel_volume())
}

/// Geodesic Fisher-Rao distance on the finite-volume sphere of densities.
///
/// Inputs are normalized to unit mass internally; the distance is
/// `sqrt(vol) * arccos(B)` where `B` is the Bhattacharyya coefficient
/// `integral sqrt(a_n * b_n) dx` of the normalized densities and `vol` is the
/// domain volume. Identical densities give 0; densities with disjoint support
/// give `sqrt(vol) * pi/2`. The arccos argument is clamped to `[-1, 1]`
/// against quadrature roundoff.
pub fn fisher_rao_sphere(a: &Density, b: &Density) -> Result<f64> {
    a.geometry().check_match(b.geometry())?;
    let (ma, mb) = (a.mass(), b.mass());
    if ma <= 0.0 || mb <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let s: f64 = a
        .grid
        .values()
        .iter()
        .zip(b.grid.values())
        .map(|(x, y)| (x * y).sqrt())
        .sum();
    let bc = s * a.geometry().voxel_volume() / (ma * mb).sqrt();
    Ok(a.geometry().domain_volume().sqrt() * bc.clamp(-1.0, 1.0).acos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use crate::matching::InverseTransform;
    use proptest::prelude::*;

    #[test]
    fn density_rejects_negative_values() {
        let g = GridGeometry::unit_cube(4).unwrap();
        let mut v = vec![1.0; g.len()];
        v[3] = -0.5;
        assert!(Density::new(ScalarGrid::new(g, v).unwrap()).is_err());
    }

    #[test]
    fn mass_of_constant_density() {
        let g = GridGeometry::cube(10, 1.0).unwrap();
        let d = Density::constant(g, 2.0).unwrap();
        assert_eq!(d.mass(), 2000.0);
    }

    #[test]
    fn mass_of_gaussian_matches_closed_form() {
        let g = GridGeometry::unit_cube(64).unwrap();
        let c = g.center();
        let w = 0.08;
        let peak = 3.0;
        let d = Density::from_fn(g, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            peak * (-r2 / (w * w)).exp()
        })
        .unwrap();
        let want = peak * (std::f64::consts::PI * w * w).powf(1.5);
        assert!(
            ((d.mass() - want) / want).abs() <= 1e-3,
            "mass {} vs {}",
            d.mass(),
            want
        );
    }

    #[test]
    fn pushforward_by_identity_is_bitwise() {
        let g = GridGeometry::new([6, 5, 7], [0.19, 0.23, 0.11], [0.3, -0.2, 0.7]).unwrap();
        let d = Density::from_fn(g, |p| (p[0] * 5.0).sin().abs() + 0.1 * p[1]).unwrap();
        let t = InverseTransform::identity(g);
        let out = pushforward(&d, &t).unwrap();
        assert_eq!(out.grid().values(), d.grid().values());
    }

    #[test]
    fn pushforward_of_uniform_scaling_dilutes_by_eight() {
        let g = GridGeometry::unit_cube(48).unwrap();
        let c = g.center();
        let radius = 0.15;
        let value = 1.6;
        let d = Density::from_fn(g, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            if r2.sqrt() <= radius {
                value
            } else {
                0.0
            }
        })
        .unwrap();
        // phi(x) = c + 2(x - c), so phi^{-1}(y) = c + (y - c)/2, |D phi^{-1}| = 1/8.
        let map = VectorGrid::from_fn(g, |p| {
            [
                c[0] + 0.5 * (p[0] - c[0]),
                c[1] + 0.5 * (p[1] - c[1]),
                c[2] + 0.5 * (p[2] - c[2]),
            ]
        })
        .unwrap();
        let jac = ScalarGrid::constant(g, 0.125).unwrap();
        let t = InverseTransform::new(map, jac).unwrap();
        let out = pushforward(&d, &t).unwrap();
        // Strictly inside the doubled ball the value is exactly value/8.
        let h = g.spacing[0];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let p = g.node_position(i, j, k);
                    let r: f64 = (0..3)
                        .map(|a| (p[a] - c[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if r <= 2.0 * radius - 3.0 * h {
                        let got = out.grid().get(i, j, k);
                        assert!(
                            (got - value / 8.0).abs() <= 1e-12,
                            "at r={r}: {got}"
                        );
                    }
                }
            }
        }
        // Mass is preserved up to the jagged-edge quadrature error of the ball.
        let rel = (out.mass() - d.mass()).abs() / d.mass();
        assert!(rel <= 2e-2, "mass error {rel}");
    }

    #[test]
    fn pullback_then_pushforward_converges_at_second_order() {
        // Smooth radial warp with analytic inverse supplied by the phantom
        // module would be circular here; use a mild analytic shear instead,
        // whose inverse is known in closed form.
        let shear = 0.15;
        let fwd = |p: [f64; 3]| [p[0] + shear * (p[1] * std::f64::consts::PI).sin(), p[1], p[2]];
        let inv = |p: [f64; 3]| [p[0] - shear * (p[1] * std::f64::consts::PI).sin(), p[1], p[2]];
        let err = |n: usize| {
            let g = GridGeometry::unit_cube(n).unwrap();
            let c = g.center();
            let d = Density::from_fn(g, |p| {
                let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                1.0 + (-r2 / 0.04).exp()
            })
            .unwrap();
            let fwd_map = VectorGrid::from_fn(g, fwd).unwrap();
            let inv_map = VectorGrid::from_fn(g, inv).unwrap();
            let jac = inv_map.jacobian_determinant_fd();
            let t = InverseTransform::new(inv_map, jac).unwrap();
            let pushed = pushforward(&d, &t).unwrap();
            // Pulling the pushforward back by the forward map reproduces d.
            let back = pullback(&pushed, &fwd_map).unwrap();
            // The shear displaces by up to `shear` along x, so sampling near
            // the x faces clamps to the domain; keep the error scan on the
            // band where every lookup stays strictly inside.
            let mut worst = 0.0f64;
            for k in 2..n - 2 {
                for j in 2..n - 2 {
                    for i in 2..n - 2 {
                        let x = g.node_position(i, j, k)[0];
                        if !(shear + 0.01..=1.0 - shear - 0.01).contains(&x) {
                            continue;
                        }
                        worst = worst
                            .max((back.grid().get(i, j, k) - d.grid().get(i, j, k)).abs());
                    }
                }
            }
            worst
        };
        let ratio = err(24) / err(48);
        assert!(
            (3.0..=7.0).contains(&ratio),
            "expected ~4x error reduction, got {ratio}"
        );
    }

    #[test]
    fn pullback_of_uniform_scaling_concentrates_by_eight() {
        let g = GridGeometry::unit_cube(12).unwrap();
        let d = Density::constant(g, 1.0).unwrap();
        let map = VectorGrid::from_fn(g, |p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).unwrap();
        let out = pullback(&d, &map).unwrap();
        for &v in out.grid().values() {
            assert!((v - 8.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn pullback_rejects_folding_maps() {
        let g = GridGeometry::unit_cube(8).unwrap();
        let d = Density::constant(g, 1.0).unwrap();
        let map = VectorGrid::from_fn(g, |p| [-p[0], p[1], p[2]]).unwrap();
        match pullback(&d, &map) {
            Err(Error::NonPositiveJacobian { .. }) => {}
            other => panic!("expected NonPositiveJacobian, got {other:?}"),
        }
    }

    #[test]
    fn hellinger_of_equal_densities_is_zero() {
        let g = GridGeometry::unit_cube(6).unwrap();
        let d = Density::from_fn(g, |p| 1.0 + p[0] + 2.0 * p[1] * p[2]).unwrap();
        assert_eq!(hellinger_sq(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn hellinger_of_constants_on_unit_volume() {
        let g = GridGeometry::cube(10, 0.1).unwrap(); // domain volume 1
        let a = Density::constant(g, 1.0).unwrap();
        let b = Density::constant(g, 4.0).unwrap();
        let d = hellinger_sq(&a, &b).unwrap();
        assert!((d - 1.0).abs() <= 1e-12, "got {d}");
    }

    #[test]
    fn hellinger_rejects_mismatched_grids() {
        let a = Density::constant(GridGeometry::unit_cube(6).unwrap(), 1.0).unwrap();
        let b = Density::constant(GridGeometry::unit_cube(7).unwrap(), 1.0).unwrap();
        match hellinger_sq(&a, &b) {
            Err(Error::GeometryMismatch { .. }) => {}
            other => panic!("expected GeometryMismatch, got {other:?}"),
        }
    }

    #[test]
    fn sphere_distance_of_equal_densities_is_zero() {
        let g = GridGeometry::unit_cube(6).unwrap();
        let d = Density::from_fn(g, |p| 0.5 + p[2]).unwrap();
        assert_eq!(fisher_rao_sphere(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn sphere_distance_of_disjoint_supports_is_quarter_circle() {
        let g = GridGeometry::cube(8, 0.5).unwrap();
        let a = Density::from_fn(g, |p| if p[0] < 1.7 { 2.0 } else { 0.0 }).unwrap();
        let b = Density::from_fn(g, |p| if p[0] > 1.8 { 0.7 } else { 0.0 }).unwrap();
        let want = g.domain_volume().sqrt() * std::f64::consts::FRAC_PI_2;
        let got = fisher_rao_sphere(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn sphere_distance_rejects_zero_mass() {
        let g = GridGeometry::unit_cube(4).unwrap();
        let a = Density::constant(g, 0.0).unwrap();
        let b = Density::constant(g, 1.0).unwrap();
        match fisher_rao_sphere(&a, &b) {
            Err(Error::ZeroMass) => {}
            other => panic!("expected ZeroMass, got {other:?}"),
        }
    }

    #[test]
    fn sphere_distance_matches_naive_quadrature() {
        use rand::{Rng, SeedableRng};
        let g = GridGeometry::new([9, 7, 8], [0.2, 0.3, 0.25], [0.0; 3]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let av: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..5.0)).collect();
        let bv: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..5.0)).collect();
        let a = Density::new(ScalarGrid::new(g, av.clone()).unwrap()).unwrap();
        let b = Density::new(ScalarGrid::new(g, bv.clone()).unwrap()).unwrap();

        // Independent oracle: normalize to total mass vol and apply the
        // spherical formula term by term.
        let vv = g.voxel_volume();
        let vol = g.len() as f64 * vv;
        let ma: f64 = av.iter().sum::<f64>() * vv;
        let mb: f64 = bv.iter().sum::<f64>() * vv;
        let mut acc = 0.0;
        for i in 0..g.len() {
            let na = av[i] * vol / ma;
            let nb = bv[i] * vol / mb;
            acc += (na * nb).sqrt() * vv;
        }
        let want = vol.sqrt() * (acc / vol).clamp(-1.0, 1.0).acos();
        let got = fisher_rao_sphere(&a, &b).unwrap();
        assert!(
            (got - want).abs() <= 1e-12 * want.max(1.0),
            "got {got}, want {want}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Hellinger is a squared metric: its square root obeys the triangle
        /// inequality on random density triples.
        #[test]
        fn hellinger_sqrt_triangle_inequality(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let g = GridGeometry::cube(5, 0.3).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut mk = || {
                let v: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..4.0)).collect();
                Density::new(ScalarGrid::new(g, v).unwrap()).unwrap()
            };
            let (a, b, c) = (mk(), mk(), mk());
            let dab = hellinger_sq(&a, &b).unwrap().sqrt();
            let dbc = hellinger_sq(&b, &c).unwrap().sqrt();
            let dac = hellinger_sq(&a, &c).unwrap().sqrt();
            prop_assert!(dac <= dab + dbc + 1e-12);
        }

        /// Pushforward by a mild random radial contraction keeps values
        /// non-negative and keeps mass within quadrature error.
        #[test]
        fn pushforward_stays_nonnegative(amp in 0.0f64..0.1) {
            let g = GridGeometry::unit_cube(16).unwrap();
            let c = g.center();
            let d = Density::from_fn(g, |p| {
                let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                (-r2 / 0.02).exp()
            })
            .unwrap();
            let map = VectorGrid::from_fn(g, |p| {
                let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                let s = 1.0 - amp * (-r2 / 0.04).exp();
                [
                    c[0] + (p[0] - c[0]) * s,
                    c[1] + (p[1] - c[1]) * s,
                    c[2] + (p[2] - c[2]) * s,
                ]
            })
            .unwrap();
            let jac = map.jacobian_determinant_fd();
            let t = InverseTransform::new(map, jac).unwrap();
            let out = pushforward(&d, &t).unwrap();
            prop_assert!(out.grid().min_value() >= 0.0);
        }
    }
}
