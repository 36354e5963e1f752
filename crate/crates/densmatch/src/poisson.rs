//! Spectral inversion of the (negative) Laplacian on the grid, used as the
//! Sobolev H^1 preconditioner of the descent flow.
//!
//! Boundary conditions are periodic on the `n*h` lattice per axis. The
//! operator being inverted is the standard 7-point stencil, so its exact
//! eigenvalues under the DFT are
//!
//! ```text
//! lambda(k) = sum_axis (2 - 2 cos(2 pi k_a / n_a)) / h_a^2
//! ```
//!
//! and [`SpectralSolver::inv_neg_laplacian`] divides each Fourier
//! coefficient by `lambda + gamma`. With `gamma = 0` the zero-frequency
//! coefficient is set to zero (zero-mean convention); with `gamma > 0` the
//! operator is `(-Laplacian + gamma)^{-1}` and the mean survives scaled by
//! `1/gamma`. Because the stencil applied by
//! [`SpectralSolver::apply_neg_laplacian`] has exactly the symbol above, the
//! two operations are mutual inverses on zero-mean fields to roundoff.

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, VectorGrid};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Plans and the stencil symbol for one grid geometry.
pub struct SpectralSolver {
    geometry: GridGeometry,
    gamma: f64,
    /// Symbol of the 7-point stencil per frequency, x-fastest like fields.
    eigenvalues: Vec<f64>,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl SpectralSolver {
    /// Precompute FFT plans and the stencil symbol. `gamma >= 0` is the
    /// Tikhonov term added to every eigenvalue.
    pub fn new(geometry: GridGeometry, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be finite and >= 0, got {gamma}"
            )));
        }
        let mut planner = FftPlanner::new();
        let forward = [
            planner.plan_fft_forward(geometry.dims[0]),
            planner.plan_fft_forward(geometry.dims[1]),
            planner.plan_fft_forward(geometry.dims[2]),
        ];
        let inverse = [
            planner.plan_fft_inverse(geometry.dims[0]),
            planner.plan_fft_inverse(geometry.dims[1]),
            planner.plan_fft_inverse(geometry.dims[2]),
        ];
        let axis_symbol = |axis: usize| -> Vec<f64> {
            let n = geometry.dims[axis];
            let h2 = geometry.spacing[axis] * geometry.spacing[axis];
            (0..n)
                .map(|k| {
                    let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    (2.0 - 2.0 * th.cos()) / h2
                })
                .collect()
        };
        let (sx, sy, sz) = (axis_symbol(0), axis_symbol(1), axis_symbol(2));
        let mut eigenvalues = Vec::with_capacity(geometry.len());
        for &ez in &sz {
            for &ey in &sy {
                for &ex in &sx {
                    eigenvalues.push(ex + ey + ez);
                }
            }
        }
        Ok(Self {
            geometry,
            gamma,
            eigenvalues,
            forward,
            inverse,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Stencil symbol per frequency (without `gamma`), x-fastest.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// In-place 3D FFT along all axes. `plans` picks forward or inverse.
    fn fft3(&self, data: &mut [Complex<f64>], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let [nx, ny, nz] = self.geometry.dims;
        // Axis 0: lines are contiguous; one bulk call processes all of them.
        plans[0].process(data);
        // Axes 1 and 2: gather strided lines into a scratch buffer, transform
        // in bulk, scatter back.
        let mut scratch = vec![Complex::default(); data.len()];
        // Axis 1: one line per (k, i), stride nx.
        let mut line = 0;
        for k in 0..nz {
            for i in 0..nx {
                let base = i + nx * ny * k;
                for q in 0..ny {
                    scratch[line * ny + q] = data[base + q * nx];
                }
                line += 1;
            }
        }
        plans[1].process(&mut scratch);
        line = 0;
        for k in 0..nz {
            for i in 0..nx {
                let base = i + nx * ny * k;
                for q in 0..ny {
                    data[base + q * nx] = scratch[line * ny + q];
                }
                line += 1;
            }
        }
        // Axis 2: one line per (j, i), stride nx*ny.
        line = 0;
        for j in 0..ny {
            for i in 0..nx {
                let base = i + nx * j;
                for q in 0..nz {
                    scratch[line * nz + q] = data[base + q * nx * ny];
                }
                line += 1;
            }
        }
        plans[2].process(&mut scratch);
        line = 0;
        for j in 0..ny {
            for i in 0..nx {
                let base = i + nx * j;
                for q in 0..nz {
                    data[base + q * nx * ny] = scratch[line * nz + q];
                }
                line += 1;
            }
        }
    }

    /// Solve `(-Laplacian + gamma) v = u` per component in Fourier space.
    pub fn inv_neg_laplacian(&self, u: &VectorGrid) -> Result<VectorGrid> {
        self.geometry.check_match(u.geometry())?;
        let n = self.geometry.len();
        let norm = 1.0 / n as f64;
        let mut out = VectorGrid::zeros(self.geometry);
        let mut buf = vec![Complex::default(); n];
        for axis in 0..3 {
            let src = u.component(axis);
            for i in 0..n {
                buf[i] = Complex::new(src[i], 0.0);
            }
            self.fft3(&mut buf, &self.forward);
            if self.gamma == 0.0 {
                buf[0] = Complex::default();
                for i in 1..n {
                    buf[i] *= 1.0 / self.eigenvalues[i];
                }
            } else {
                for i in 0..n {
                    buf[i] *= 1.0 / (self.eigenvalues[i] + self.gamma);
                }
            }
            self.fft3(&mut buf, &self.inverse);
            let dst = out.component_mut(axis);
            for i in 0..n {
                dst[i] = buf[i].re * norm;
            }
        }
        Ok(out)
    }

    /// Apply `(-Laplacian + gamma)` per component with the periodic 7-point
    /// stencil directly (no FFT).
    pub fn apply_neg_laplacian(&self, v: &VectorGrid) -> Result<VectorGrid> {
        self.geometry.check_match(v.geometry())?;
        let [nx, ny, nz] = self.geometry.dims;
        let inv_h2 = [
            1.0 / (self.geometry.spacing[0] * self.geometry.spacing[0]),
            1.0 / (self.geometry.spacing[1] * self.geometry.spacing[1]),
            1.0 / (self.geometry.spacing[2] * self.geometry.spacing[2]),
        ];
        let mut out = VectorGrid::zeros(self.geometry);
        for axis in 0..3 {
            let src = v.component(axis);
            let dst = out.component_mut(axis);
            for k in 0..nz {
                let kp = if k + 1 == nz { 0 } else { k + 1 };
                let km = if k == 0 { nz - 1 } else { k - 1 };
                for j in 0..ny {
                    let jp = if j + 1 == ny { 0 } else { j + 1 };
                    let jm = if j == 0 { ny - 1 } else { j - 1 };
                    for i in 0..nx {
                        let ip = if i + 1 == nx { 0 } else { i + 1 };
                        let im = if i == 0 { nx - 1 } else { i - 1 };
                        let at = |ii: usize, jj: usize, kk: usize| {
                            src[ii + nx * (jj + ny * kk)]
                        };
                        let c = at(i, j, k);
                        let mut acc = (2.0 * c - at(ip, j, k) - at(im, j, k)) * inv_h2[0];
                        acc += (2.0 * c - at(i, jp, k) - at(i, jm, k)) * inv_h2[1];
                        acc += (2.0 * c - at(i, j, kp) - at(i, j, km)) * inv_h2[2];
                        dst[i + nx * (j + ny * k)] = acc + self.gamma * c;
                    }
                }
            }
        }
        Ok(out)
    }
}
