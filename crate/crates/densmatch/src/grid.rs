//! Regular-grid field containers, trilinear interpolation, and the discrete
//! differential operators every other module builds on.
//!
//! Fields live on a regular 3D grid with physical spacing and origin. Values
//! are stored x-fastest: linear index `i + nx*(j + ny*k)`. All public
//! interfaces speak physical coordinates; index coordinates never leave this
//! module. Derivatives use second-order central differences in the interior
//! and first-order one-sided differences on the boundary faces, which makes
//! gradient and divergence exact negative adjoints of each other for fields
//! supported away from the boundary.

use crate::error::{Error, Result};
use std::fmt;

/// Snap tolerance, in ulps of the index coordinate, for treating a sample
/// point as lying exactly on a grid node. Physical positions typically went
/// through one extra rounding (`origin + i*h` followed by the inverse), and
/// snapping keeps node queries bitwise exact without affecting genuine
/// off-node samples.
const NODE_SNAP_ULPS: f64 = 8.0;

/// Dimensions, spacing, and origin of a regular grid.
///
/// `dims` counts nodes per axis (at least 2 each); `spacing` is the physical
/// node distance per axis; `origin` is the physical position of node
/// `(0,0,0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl fmt::Display for GridGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} @ ({}, {}, {}) from ({}, {}, {})",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing[0],
            self.spacing[1],
            self.spacing[2],
            self.origin[0],
            self.origin[1],
            self.origin[2],
        )
    }
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if dims[a] < 2 {
                return Err(Error::InvalidGeometry(format!(
                    "axis {a} has {} nodes, need at least 2",
                    dims[a]
                )));
            }
            if !(spacing[a].is_finite() && spacing[a] > 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "axis {a} spacing {} must be finite and positive",
                    spacing[a]
                )));
            }
            if !origin[a].is_finite() {
                return Err(Error::InvalidGeometry(format!(
                    "axis {a} origin {} must be finite",
                    origin[a]
                )));
            }
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Cube of `n` nodes per axis with spacing `h` and origin at zero.
    pub fn cube(n: usize, h: f64) -> Result<Self> {
        Self::new([n, n, n], [h, h, h], [0.0; 3])
    }

    /// Cube of `n` nodes per axis spanning `[0, 1]^3` node to node.
    pub fn unit_cube(n: usize) -> Result<Self> {
        Self::cube(n, 1.0 / (n as f64 - 1.0))
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one voxel cell (midpoint-rule weight of one node).
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Volume of the whole domain under the midpoint rule: every node owns
    /// one voxel cell.
    pub fn domain_volume(&self) -> f64 {
        self.len() as f64 * self.voxel_volume()
    }

    /// Physical lengths of one period per axis (`n*h`), the lattice the
    /// spectral solver is periodic on.
    pub fn periodic_lengths(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Diagonal length of the node bounding box.
    pub fn diameter(&self) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let l = (self.dims[a] - 1) as f64 * self.spacing[a];
            s += l * l;
        }
        s.sqrt()
    }

    /// Physical center of the node bounding box.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + 0.5 * (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        c
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Errors with [`Error::GeometryMismatch`] unless `self == other`.
    pub fn check_match(&self, other: &GridGeometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch {
                left: self.to_string(),
                right: other.to_string(),
            })
        }
    }

    /// Cell base index and fractional offset for a physical point, clamped to
    /// the node bounding box. Points within a few ulps of a node snap onto it.
    fn locate(&self, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let mut u = (p[a] - self.origin[a]) / self.spacing[a];
            let r = u.round();
            if (u - r).abs() <= NODE_SNAP_ULPS * f64::EPSILON * r.abs().max(1.0) {
                u = r;
            }
            u = u.clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        (base, frac)
    }
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    // Both endpoints reproduce exactly at f = 0 and f = 1.
    (1.0 - f) * a + f * b
}

fn trilinear(values: &[f64], geom: &GridGeometry, base: [usize; 3], frac: [f64; 3]) -> f64 {
    let [ix, iy, iz] = base;
    let [fx, fy, fz] = frac;
    let nx = geom.dims[0];
    let nxy = nx * geom.dims[1];
    let o = ix + nx * iy + nxy * iz;
    let c00 = lerp(values[o], values[o + 1], fx);
    let c10 = lerp(values[o + nx], values[o + nx + 1], fx);
    let c01 = lerp(values[o + nxy], values[o + nxy + 1], fx);
    let c11 = lerp(values[o + nxy + nx], values[o + nxy + nx + 1], fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

fn check_values(geom: &GridGeometry, values: &[f64]) -> Result<()> {
    if values.len() != geom.len() {
        return Err(Error::InvalidField(format!(
            "value count {} does not match grid size {}",
            values.len(),
            geom.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidField(format!(
            "non-finite value {} at linear index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// One scalar value per node, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        check_values(&geometry, &values)?;
        Ok(Self { geometry, values })
    }

    /// Construct without scanning values; callers guarantee finiteness.
    pub(crate) fn from_raw(geometry: GridGeometry, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), geometry.len());
        Self { geometry, values }
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidField(format!("non-finite constant {value}")));
        }
        Ok(Self::from_raw(geometry, vec![value; geometry.len()]))
    }

    /// Evaluate `f` at every node position.
    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut([f64; 3]) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(geometry.len());
        for k in 0..geometry.dims[2] {
            for j in 0..geometry.dims[1] {
                for i in 0..geometry.dims[0] {
                    values.push(f(geometry.node_position(i, j, k)));
                }
            }
        }
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.geometry.index(i, j, k)]
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Trilinear interpolation at a physical point, clamped to the node
    /// bounding box. Exact at nodes; exact for globally affine fields at
    /// interior points up to roundoff.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let (base, frac) = self.geometry.locate(p);
        trilinear(&self.values, &self.geometry, base, frac)
    }

    /// Central-difference gradient (one-sided on boundary faces).
    pub fn gradient(&self) -> VectorGrid {
        let components = [
            axis_derivative(&self.geometry, &self.values, 0),
            axis_derivative(&self.geometry, &self.values, 1),
            axis_derivative(&self.geometry, &self.values, 2),
        ];
        VectorGrid {
            geometry: self.geometry,
            components,
        }
    }

    /// Midpoint-rule L2 inner product `sum(a*b) * voxel_volume`.
    pub fn l2_inner(&self, other: &ScalarGrid) -> Result<f64> {
        self.geometry.check_match(&other.geometry)?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        Ok(s * self.geometry.voxel_volume())
    }
}

/// One 3-vector per node, stored as three scalar planes (x-fastest each).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid {
    geometry: GridGeometry,
    components: [Vec<f64>; 3],
}

impl VectorGrid {
    pub fn new(geometry: GridGeometry, components: [Vec<f64>; 3]) -> Result<Self> {
        for c in &components {
            check_values(&geometry, c)?;
        }
        Ok(Self {
            geometry,
            components,
        })
    }

    pub(crate) fn from_raw(geometry: GridGeometry, components: [Vec<f64>; 3]) -> Self {
        debug_assert!(components.iter().all(|c| c.len() == geometry.len()));
        Self {
            geometry,
            components,
        }
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self::from_raw(geometry, [vec![0.0; n], vec![0.0; n], vec![0.0; n]])
    }

    /// Evaluate `f` at every node position.
    pub fn from_fn(
        geometry: GridGeometry,
        mut f: impl FnMut([f64; 3]) -> [f64; 3],
    ) -> Result<Self> {
        let n = geometry.len();
        let mut cx = Vec::with_capacity(n);
        let mut cy = Vec::with_capacity(n);
        let mut cz = Vec::with_capacity(n);
        for k in 0..geometry.dims[2] {
            for j in 0..geometry.dims[1] {
                for i in 0..geometry.dims[0] {
                    let v = f(geometry.node_position(i, j, k));
                    cx.push(v[0]);
                    cy.push(v[1]);
                    cz.push(v[2]);
                }
            }
        }
        Self::new(geometry, [cx, cy, cz])
    }

    /// The map `y -> y`: every node stores its own physical position.
    pub fn identity_map(geometry: GridGeometry) -> Self {
        Self::from_fn(geometry, |p| p).expect("node positions are finite")
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub(crate) fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.components[axis]
    }

    #[inline]
    pub fn value_at(&self, linear: usize) -> [f64; 3] {
        [
            self.components[0][linear],
            self.components[1][linear],
            self.components[2][linear],
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Componentwise trilinear interpolation at a physical point.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> [f64; 3] {
        let (base, frac) = self.geometry.locate(p);
        [
            trilinear(&self.components[0], &self.geometry, base, frac),
            trilinear(&self.components[1], &self.geometry, base, frac),
            trilinear(&self.components[2], &self.geometry, base, frac),
        ]
    }

    /// Central-difference divergence (one-sided on boundary faces). Adjoint
    /// of the negative gradient for fields supported away from the boundary.
    pub fn divergence(&self) -> ScalarGrid {
        let mut out = axis_derivative(&self.geometry, &self.components[0], 0);
        let dy = axis_derivative(&self.geometry, &self.components[1], 1);
        let dz = axis_derivative(&self.geometry, &self.components[2], 2);
        for i in 0..out.len() {
            out[i] += dy[i] + dz[i];
        }
        ScalarGrid::from_raw(self.geometry, out)
    }

    /// Pointwise determinant of the finite-difference Jacobian of a map grid
    /// (this grid read as positions). Central differences in the interior,
    /// one-sided on boundary faces; exact for affine maps everywhere.
    pub fn jacobian_determinant_fd(&self) -> ScalarGrid {
        let mut d = Vec::with_capacity(9);
        for comp in &self.components {
            for axis in 0..3 {
                d.push(axis_derivative(&self.geometry, comp, axis));
            }
        }
        let n = self.geometry.len();
        let mut det = Vec::with_capacity(n);
        for i in 0..n {
            let m = [
                d[0][i], d[1][i], d[2][i], // d map_x / d(x,y,z)
                d[3][i], d[4][i], d[5][i],
                d[6][i], d[7][i], d[8][i],
            ];
            det.push(
                m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                    + m[2] * (m[3] * m[7] - m[4] * m[6]),
            );
        }
        ScalarGrid::from_raw(self.geometry, det)
    }

    /// Midpoint-rule L2 inner product summed over components.
    pub fn l2_inner(&self, other: &VectorGrid) -> Result<f64> {
        self.geometry.check_match(&other.geometry)?;
        let mut s = 0.0;
        for a in 0..3 {
            s += self.components[a]
                .iter()
                .zip(&other.components[a])
                .map(|(x, y)| x * y)
                .sum::<f64>();
        }
        Ok(s * self.geometry.voxel_volume())
    }
}

/// Partial derivative of a scalar plane along one axis.
fn axis_derivative(geom: &GridGeometry, values: &[f64], axis: usize) -> Vec<f64> {
    let [nx, ny, nz] = geom.dims;
    let n = geom.dims[axis];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let inv_h = 1.0 / geom.spacing[axis];
    let inv_2h = 0.5 * inv_h;
    let mut out = vec![0.0; values.len()];
    for k in 0..nz {
        for j in 0..ny {
            let row = nx * (j + ny * k);
            for i in 0..nx {
                let idx = row + i;
                let q = match axis {
                    0 => i,
                    1 => j,
                    _ => k,
                };
                out[idx] = if q == 0 {
                    (values[idx + stride] - values[idx]) * inv_h
                } else if q == n - 1 {
                    (values[idx] - values[idx - stride]) * inv_h
                } else {
                    (values[idx + stride] - values[idx - stride]) * inv_2h
                };
            }
        }
    }
    out
}
