//! The registration energy, its Sobolev descent field, the incremental step
//! rule, and the outer registration loop.
//!
//! A transform is stored through its inverse: a position grid `map(y) =
//! phi^{-1}(y)` plus the Jacobian determinant field `jacdet(y) =
//! |D phi^{-1}|(y)`. For source `i0`, target `i1`, and a non-negative
//! compressibility penalty `f`, the energy of a transform is
//!
//! ```text
//! E = integral f(map(y)) * (sqrt(jacdet) - 1)^2 dy          (regularity)
//!   + integral (sqrt(jacdet * i0(map(y))) - sqrt(i1))^2 dy  (dissimilarity)
//! ```
//!
//! i.e. penalized volume change plus the squared Hellinger distance between
//! the pushed-forward source and the target. The first variation of `E`
//! under the inner update `map(y) -> map(y + eps*w(y))` is `-<u, w>` with
//!
//! ```text
//! u = -grad(f(map) * (1 - sqrt(jacdet)))
//!   - sqrt(jacdet * i0(map)) * grad(sqrt(i1))
//!   + grad(sqrt(jacdet * i0(map))) * sqrt(i1)
//! ```
//!
//! so stepping along `v = (-Laplacian)^{-1} u` decreases `E` to first order
//! (the H^1 preconditioning of `poisson`). One step composes the stored
//! inverse with `y + eps*v(y)` and updates the determinant multiplicatively:
//!
//! ```text
//! map'(y)    = map(y + eps*v(y))
//! jacdet'(y) = jacdet(y + eps*v(y)) * exp(eps * div(v)(y))
//! ```
//!
//! where `exp(eps*div v) = det(I + eps*Dv) + O(eps^2)` is exactly the
//! determinant factor of the composition, keeping `jacdet` consistent with
//! the finite-difference Jacobian of `map` and mass conservation of the
//! pushforward along the whole flow.

use crate::density::Density;
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarGrid, VectorGrid};
use crate::poisson::SpectralSolver;

/// Displacements below this fraction of the domain diameter count as "no
/// movement": the flow is at a stationary point and iteration stops.
const STATIONARY_FACTOR: f64 = 1e-14;

/// A diffeomorphism stored through its inverse.
///
/// `map` holds absolute physical positions `phi^{-1}(y)`; `jacdet` holds
/// `|D phi^{-1}|(y) > 0`. Both live on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseTransform {
    map: VectorGrid,
    jacdet: ScalarGrid,
}

impl InverseTransform {
    pub fn new(map: VectorGrid, jacdet: ScalarGrid) -> Result<Self> {
        map.geometry().check_match(jacdet.geometry())?;
        let mut min = f64::INFINITY;
        let mut at = 0;
        for (i, &v) in jacdet.values().iter().enumerate() {
            if v < min {
                min = v;
                at = i;
            }
        }
        if min <= 0.0 {
            return Err(Error::NonPositiveJacobian { min, index: at });
        }
        Ok(Self { map, jacdet })
    }

    /// The identity transform: every node maps to itself with unit Jacobian.
    pub fn identity(geometry: GridGeometry) -> Self {
        Self {
            map: VectorGrid::identity_map(geometry),
            jacdet: ScalarGrid::constant(geometry, 1.0).expect("1 is finite"),
        }
    }

    pub fn map(&self) -> &VectorGrid {
        &self.map
    }

    pub fn jacdet(&self) -> &ScalarGrid {
        &self.jacdet
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.map.geometry()
    }

    pub fn into_parts(self) -> (VectorGrid, ScalarGrid) {
        (self.map, self.jacdet)
    }
}

/// Non-negative weight field for the regularity term.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    grid: ScalarGrid,
}

impl Penalty {
    pub fn new(grid: ScalarGrid) -> Result<Self> {
        if let Some(i) = grid.values().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidField(format!(
                "negative penalty {} at linear index {i}",
                grid.values()[i]
            )));
        }
        Ok(Self { grid })
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Result<Self> {
        Self::new(ScalarGrid::constant(geometry, value)?)
    }

    pub fn from_fn(geometry: GridGeometry, f: impl FnMut([f64; 3]) -> f64) -> Result<Self> {
        Self::new(ScalarGrid::from_fn(geometry, f)?)
    }

    pub fn grid(&self) -> &ScalarGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.grid.geometry()
    }
}

/// The two energy terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    /// Penalized volume change (the `e1` trace column).
    pub regularity: f64,
    /// Squared Hellinger mismatch of the pushed-forward source (`e2`).
    pub dissimilarity: f64,
    pub total: f64,
}

/// One row of the energy trace; field names mirror the CSV columns
/// `iter,e1,e2,total,step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub e1: f64,
    pub e2: f64,
    pub total: f64,
    pub step: f64,
}

/// Controls for [`register`].
#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    /// Base step size; with backtracking, the largest step ever attempted.
    pub step_size: f64,
    pub max_iters: usize,
    /// Accept a step only on strict energy decrease, shrinking the step until
    /// one is found. Off means fixed-step fidelity mode: every step is taken.
    pub backtracking: bool,
    /// Step shrink factor in (0, 1) used while backtracking.
    pub backtrack_shrink: f64,
    /// Backtracking gives up once the step falls below
    /// `step_size * min_step_factor`; exhaustion on the very first iteration
    /// is reported as divergence.
    pub min_step_factor: f64,
    /// Stop when the relative total-energy decrease over a 10-iteration
    /// window falls below this; 0 disables the check.
    pub stop_tol: f64,
    /// Every this many iterations, recompute `jacdet` from the map by finite
    /// differences to cancel accumulated drift; 0 disables.
    pub jacdet_refresh_period: usize,
    /// Tikhonov term of the spectral solver.
    pub gamma: f64,
    /// Emit a trace row every this many accepted iterations (plus the initial
    /// and final rows); 0 keeps only initial and final.
    pub trace_every: usize,
    /// Zero-padding margin in voxels applied to all inputs before iterating,
    /// so the periodic solver does not couple opposite faces. The returned
    /// transform is cropped back to the input grid.
    pub pad_margin: usize,
    /// Keep a cropped copy of the transform every this many iterations in
    /// [`RegistrationResult::snapshots`]; 0 keeps none.
    pub snapshot_every: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_iters: 200,
            backtracking: true,
            backtrack_shrink: 0.5,
            min_step_factor: 1e-12,
            stop_tol: 0.0,
            jacdet_refresh_period: 0,
            gamma: 0.0,
            trace_every: 1,
            pad_margin: 8,
            snapshot_every: 0,
        }
    }
}

impl RegistrationConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "backtrack_shrink must lie in (0, 1), got {}",
                self.backtrack_shrink
            )));
        }
        if !(self.min_step_factor > 0.0 && self.min_step_factor <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "min_step_factor must lie in (0, 1], got {}",
                self.min_step_factor
            )));
        }
        if !(self.stop_tol.is_finite() && self.stop_tol >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "stop_tol must be >= 0, got {}",
                self.stop_tol
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Output of [`register`].
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Final transform on the input grid (padding cropped away).
    pub transform: InverseTransform,
    /// Energy trace; always contains the initial state and the final state.
    pub trace: Vec<TraceRow>,
    /// `(iteration, transform)` pairs captured every
    /// [`RegistrationConfig::snapshot_every`] iterations.
    pub snapshots: Vec<(usize, InverseTransform)>,
    /// Number of accepted iterations.
    pub iterations: usize,
}

fn check_common_geometry(t: &InverseTransform, f: &Penalty, i0: &Density, g1: &GridGeometry) -> Result<()> {
    t.geometry().check_match(f.geometry())?;
    t.geometry().check_match(i0.geometry())?;
    t.geometry().check_match(g1)
}

fn energy_with_sqrt_target(
    t: &InverseTransform,
    f: &Penalty,
    i0: &Density,
    sqrt_i1: &ScalarGrid,
) -> EnergyBreakdown {
    let g = t.geometry();
    let jd = t.jacdet().values();
    let s1 = sqrt_i1.values();
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    for idx in 0..g.len() {
        let p = t.map().value_at(idx);
        let w = f.grid().sample_trilinear(p);
        let i0c = i0.grid().sample_trilinear(p);
        let dv = jd[idx].sqrt() - 1.0;
        e1 += w * dv * dv;
        let dh = (jd[idx] * i0c).sqrt() - s1[idx];
        e2 += dh * dh;
    }
    let vv = g.voxel_volume();
    e1 *= vv;
    e2 *= vv;
    EnergyBreakdown {
        regularity: e1,
        dissimilarity: e2,
        total: e1 + e2,
    }
}

/// Evaluate both energy terms for a transform.
pub fn energy(
    t: &InverseTransform,
    f: &Penalty,
    i0: &Density,
    i1: &Density,
) -> Result<EnergyBreakdown> {
    check_common_geometry(t, f, i0, i1.geometry())?;
    Ok(energy_with_sqrt_target(t, f, i0, &i1.sqrt_grid()))
}

/// [`update_field`] with a precomputed `sqrt(i1)` grid; the descent field
/// depends on the target only through this square root.
pub fn update_field_with_sqrt_target(
    t: &InverseTransform,
    f: &Penalty,
    i0: &Density,
    sqrt_i1: &ScalarGrid,
) -> Result<VectorGrid> {
    check_common_geometry(t, f, i0, sqrt_i1.geometry())?;
    let g = *t.geometry();
    let n = g.len();
    let jd = t.jacdet().values();
    let mut a_vals = Vec::with_capacity(n);
    let mut b_vals = Vec::with_capacity(n);
    for idx in 0..n {
        let p = t.map().value_at(idx);
        let w = f.grid().sample_trilinear(p);
        let i0c = i0.grid().sample_trilinear(p);
        a_vals.push(w * (1.0 - jd[idx].sqrt()));
        b_vals.push((jd[idx] * i0c).sqrt());
    }
    let a = ScalarGrid::new(g, a_vals)?;
    let b = ScalarGrid::new(g, b_vals)?;
    let grad_a = a.gradient();
    let grad_b = b.gradient();
    let grad_c = sqrt_i1.gradient();
    let mut u = VectorGrid::zeros(g);
    for axis in 0..3 {
        let ga = grad_a.component(axis);
        let gb = grad_b.component(axis);
        let gc = grad_c.component(axis);
        let bb = b.values();
        let cc = sqrt_i1.values();
        let dst = u.component_mut(axis);
        for idx in 0..n {
            dst[idx] = -ga[idx] - bb[idx] * gc[idx] + gb[idx] * cc[idx];
        }
    }
    Ok(u)
}

/// The L2 representative `u` of the energy's first variation: the
/// directional derivative of `E` under `map(y) -> map(y + eps*w(y))` at
/// `eps = 0` is `-<u, w>` for every smooth `w`.
pub fn update_field(
    t: &InverseTransform,
    f: &Penalty,
    i0: &Density,
    i1: &Density,
) -> Result<VectorGrid> {
    update_field_with_sqrt_target(t, f, i0, &i1.sqrt_grid())
}

/// Compose the stored inverse with the incremental map `y + eps*v(y)` and
/// update the determinant multiplicatively. Errors with
/// [`Error::StepTooLarge`] when the incremental map folds (its
/// finite-difference determinant is not positive everywhere) or the update
/// overflows.
pub fn step(t: &InverseTransform, v: &VectorGrid, eps: f64) -> Result<InverseTransform> {
    t.geometry().check_match(v.geometry())?;
    if !eps.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step size must be finite, got {eps}"
        )));
    }
    let g = *t.geometry();
    let n = g.len();
    let mut wx = Vec::with_capacity(n);
    let mut wy = Vec::with_capacity(n);
    let mut wz = Vec::with_capacity(n);
    let mut idx = 0;
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                let p = g.node_position(i, j, k);
                let vv = v.value_at(idx);
                wx.push(p[0] + eps * vv[0]);
                wy.push(p[1] + eps * vv[1]);
                wz.push(p[2] + eps * vv[2]);
                idx += 1;
            }
        }
    }
    let w = VectorGrid::new(g, [wx, wy, wz])?;
    let wdet = w.jacobian_determinant_fd();
    let min_det = wdet.min_value();
    if min_det <= 0.0 {
        return Err(Error::StepTooLarge { min_det });
    }
    let div_v = v.divergence();
    let mut map_x = Vec::with_capacity(n);
    let mut map_y = Vec::with_capacity(n);
    let mut map_z = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n);
    for idx in 0..n {
        let p = w.value_at(idx);
        let m = t.map().sample_trilinear(p);
        map_x.push(m[0]);
        map_y.push(m[1]);
        map_z.push(m[2]);
        let next = t.jacdet().sample_trilinear(p) * (eps * div_v.values()[idx]).exp();
        if !next.is_finite() {
            return Err(Error::StepTooLarge { min_det });
        }
        jac.push(next);
    }
    InverseTransform::new(
        VectorGrid::new(g, [map_x, map_y, map_z])?,
        ScalarGrid::new(g, jac)?,
    )
}

fn pad_geometry(g: &GridGeometry, m: usize) -> GridGeometry {
    let mf = m as f64;
    GridGeometry::new(
        [g.dims[0] + 2 * m, g.dims[1] + 2 * m, g.dims[2] + 2 * m],
        g.spacing,
        [
            g.origin[0] - mf * g.spacing[0],
            g.origin[1] - mf * g.spacing[1],
            g.origin[2] - mf * g.spacing[2],
        ],
    )
    .expect("padding preserves geometry validity")
}

fn pad_scalar(src: &ScalarGrid, m: usize) -> ScalarGrid {
    let g = src.geometry();
    let pg = pad_geometry(g, m);
    let mut vals = vec![0.0; pg.len()];
    let [nx, ny, nz] = g.dims;
    let pnx = pg.dims[0];
    let pny = pg.dims[1];
    for k in 0..nz {
        for j in 0..ny {
            let src_base = nx * (j + ny * k);
            let dst_base = m + pnx * ((j + m) + pny * (k + m));
            vals[dst_base..dst_base + nx].copy_from_slice(&src.values()[src_base..src_base + nx]);
        }
    }
    ScalarGrid::new(pg, vals).expect("padded values stay finite")
}

fn crop_scalar(src: &ScalarGrid, target: GridGeometry, m: usize) -> ScalarGrid {
    let [nx, ny, nz] = target.dims;
    let pnx = src.geometry().dims[0];
    let pny = src.geometry().dims[1];
    let mut vals = Vec::with_capacity(target.len());
    for k in 0..nz {
        for j in 0..ny {
            let src_base = m + pnx * ((j + m) + pny * (k + m));
            vals.extend_from_slice(&src.values()[src_base..src_base + nx]);
        }
    }
    ScalarGrid::new(target, vals).expect("cropped values stay finite")
}

fn crop_transform(t: &InverseTransform, target: GridGeometry, m: usize) -> InverseTransform {
    if m == 0 {
        return t.clone();
    }
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|axis| {
            let tmp = ScalarGrid::new(*t.geometry(), t.map().component(axis).to_vec())
                .expect("map components are finite");
            crop_scalar(&tmp, target, m).values().to_vec()
        })
        .collect();
    let map = VectorGrid::new(
        target,
        [comps[0].clone(), comps[1].clone(), comps[2].clone()],
    )
    .expect("cropped map stays finite");
    let jac = crop_scalar(t.jacdet(), target, m);
    InverseTransform::new(map, jac).expect("cropping preserves positivity")
}

/// Gradient-descent registration of `i0` onto `i1` under penalty `f`.
///
/// Returns the final transform on the input grid together with the energy
/// trace. Stops on `max_iters`, on a stationary descent field, on backtrack
/// exhaustion after the first iteration, or once the relative energy decrease
/// over a 10-iteration window falls below `stop_tol`. Backtrack exhaustion
/// *on* the first iteration is [`Error::Diverged`].
pub fn register(
    i0: &Density,
    i1: &Density,
    f: &Penalty,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    i0.geometry().check_match(i1.geometry())?;
    i0.geometry().check_match(f.geometry())?;
    let original = *i0.geometry();
    let m = cfg.pad_margin;
    let (wi0, wi1, wf) = if m > 0 {
        (
            Density::new(pad_scalar(i0.grid(), m))?,
            Density::new(pad_scalar(i1.grid(), m))?,
            Penalty::new(pad_scalar(f.grid(), m))?,
        )
    } else {
        (i0.clone(), i1.clone(), f.clone())
    };
    let work = *wi0.geometry();
    let solver = SpectralSolver::new(work, cfg.gamma)?;
    let sqrt_i1 = wi1.sqrt_grid();
    let diam = work.diameter();
    let min_step = cfg.step_size * cfg.min_step_factor;

    let mut t = InverseTransform::identity(work);
    let mut ebd = energy_with_sqrt_target(&t, &wf, &wi0, &sqrt_i1);
    let mut trace = vec![TraceRow {
        iter: 0,
        e1: ebd.regularity,
        e2: ebd.dissimilarity,
        total: ebd.total,
        step: 0.0,
    }];
    let mut snapshots = Vec::new();
    let mut totals = vec![ebd.total];
    let mut cur_eps = cfg.step_size;
    let mut last_eps = 0.0;
    let mut iterations = 0usize;
    let mut moved = false;

    'outer: for iter in 1..=cfg.max_iters {
        if ebd.total == 0.0 {
            break;
        }
        let u = update_field_with_sqrt_target(&t, &wf, &wi0, &sqrt_i1)?;
        let v = solver.inv_neg_laplacian(&u)?;
        if cfg.step_size * v.max_abs() <= STATIONARY_FACTOR * diam {
            break;
        }
        let (next_t, next_e, used) = if cfg.backtracking {
            loop {
                if cur_eps < min_step {
                    if iter == 1 {
                        return Err(Error::Diverged);
                    }
                    break 'outer;
                }
                match step(&t, &v, cur_eps) {
                    Err(Error::StepTooLarge { .. }) => cur_eps *= cfg.backtrack_shrink,
                    Err(e) => return Err(e),
                    Ok(tt) => {
                        let e = energy_with_sqrt_target(&tt, &wf, &wi0, &sqrt_i1);
                        if e.total < ebd.total {
                            break (tt, e, cur_eps);
                        }
                        cur_eps *= cfg.backtrack_shrink;
                    }
                }
            }
        } else {
            let tt = step(&t, &v, cur_eps)?;
            let e = energy_with_sqrt_target(&tt, &wf, &wi0, &sqrt_i1);
            (tt, e, cur_eps)
        };
        t = next_t;
        ebd = next_e;
        last_eps = used;
        iterations = iter;
        moved = true;
        if cfg.backtracking {
            // Recover toward the configured base step after a successful try.
            cur_eps = (cur_eps / cfg.backtrack_shrink).min(cfg.step_size);
        }
        if cfg.jacdet_refresh_period > 0 && iter % cfg.jacdet_refresh_period == 0 {
            let fd = t.map().jacobian_determinant_fd();
            let (map, _) = t.into_parts();
            t = InverseTransform::new(map, fd)?;
            ebd = energy_with_sqrt_target(&t, &wf, &wi0, &sqrt_i1);
        }
        totals.push(ebd.total);
        if cfg.trace_every > 0 && iter % cfg.trace_every == 0 {
            trace.push(TraceRow {
                iter,
                e1: ebd.regularity,
                e2: ebd.dissimilarity,
                total: ebd.total,
                step: used,
            });
        }
        if cfg.snapshot_every > 0 && iter % cfg.snapshot_every == 0 {
            snapshots.push((iter, crop_transform(&t, original, m)));
        }
        if cfg.stop_tol > 0.0 && totals.len() >= 11 {
            let prev = totals[totals.len() - 11];
            let now = totals[totals.len() - 1];
            if prev > 0.0 && (prev - now) / prev < cfg.stop_tol {
                break;
            }
        }
    }

    if trace.last().map(|r| r.iter) != Some(iterations) {
        trace.push(TraceRow {
            iter: iterations,
            e1: ebd.regularity,
            e2: ebd.dissimilarity,
            total: ebd.total,
            step: last_eps,
        });
    }
    let transform = if moved {
        crop_transform(&t, original, m)
    } else {
        // Nothing moved: return the identity on the input grid exactly.
        InverseTransform::identity(original)
    };
    Ok(RegistrationResult {
        transform,
        trace,
        snapshots,
        iterations,
    })
}

/// Logistic soft threshold of the source intensity:
/// `f = low + (high - low) / (1 + exp(-steepness * (i0 - midpoint)))`.
///
/// Monotone non-decreasing in the intensity with values in `[low, high]`;
/// equals `(low + high) / 2` exactly at the midpoint.
pub fn sigmoid_penalty(
    i0: &Density,
    low: f64,
    high: f64,
    midpoint: f64,
    steepness: f64,
) -> Result<Penalty> {
    if !(low.is_finite() && high.is_finite() && low >= 0.0 && high >= low) {
        return Err(Error::InvalidParameter(format!(
            "penalty bounds must satisfy 0 <= low <= high, got low={low}, high={high}"
        )));
    }
    if !(steepness.is_finite() && steepness > 0.0) || !midpoint.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "need finite midpoint and positive steepness, got midpoint={midpoint}, steepness={steepness}"
        )));
    }
    let vals = i0
        .grid()
        .values()
        .iter()
        .map(|&v| low + (high - low) / (1.0 + (-steepness * (v - midpoint)).exp()))
        .collect();
    Penalty::new(ScalarGrid::new(*i0.geometry(), vals)?)
}

/// Data-driven defaults for [`sigmoid_penalty`]: with `sigma` the mean
/// intensity over the support of `i0`, the penalty swings from `0.1*sigma`
/// on low intensities to `10*sigma` on high ones, switching at the Otsu
/// threshold with steepness `10 / intensity range`.
pub fn sigmoid_penalty_auto(i0: &Density) -> Result<Penalty> {
    let vals = i0.grid().values();
    let support: Vec<f64> = vals.iter().copied().filter(|&v| v > 0.0).collect();
    if support.is_empty() {
        return Penalty::constant(*i0.geometry(), 0.0);
    }
    let sigma = support.iter().sum::<f64>() / support.len() as f64;
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let steepness = if range > 0.0 { 10.0 / range } else { 1.0 };
    sigmoid_penalty(i0, 0.1 * sigma, 10.0 * sigma, otsu_threshold(vals), steepness)
}

/// Otsu's threshold over a 256-bin histogram of the values.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return lo;
    }
    let mut hist = [0u64; BINS];
    let scale = BINS as f64 / (hi - lo);
    for &v in values {
        let b = (((v - lo) * scale) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total: u64 = values.len() as u64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0;
    let mut best_bin = 0;
    let mut best_var = -1.0;
    for (bin, &count) in hist.iter().enumerate() {
        w0 += count;
        if w0 == 0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0 {
            break;
        }
        sum0 += bin as f64 * count as f64;
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_bin = bin;
        }
    }
    lo + (best_bin as f64 + 0.5) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{hellinger_sq, pushforward};

    fn blob(g: GridGeometry, center: [f64; 3], width: f64, peak: f64, bg: f64) -> Density {
        Density::from_fn(g, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
            bg + peak * (-r2 / (width * width)).exp()
        })
        .unwrap()
    }

    fn smooth_velocity(g: GridGeometry) -> VectorGrid {
        let l = (g.dims[0] - 1) as f64 * g.spacing[0];
        VectorGrid::from_fn(g, |p| {
            let s: Vec<f64> = (0..3).map(|a| (p[a] - g.origin[a]) / l).collect();
            let env: f64 = s
                .iter()
                .map(|&x| (std::f64::consts::PI * x).sin().powi(2))
                .product();
            [
                env * (2.0 * std::f64::consts::PI * s[1]).cos(),
                env * (2.0 * std::f64::consts::PI * s[2]).sin(),
                -env * (2.0 * std::f64::consts::PI * s[0]).cos(),
            ]
        })
        .unwrap()
    }

    #[test]
    fn transform_rejects_nonpositive_jacdet() {
        let g = GridGeometry::unit_cube(4).unwrap();
        let map = VectorGrid::identity_map(g);
        let mut v = vec![1.0; g.len()];
        v[7] = 0.0;
        match InverseTransform::new(map, ScalarGrid::new(g, v).unwrap()) {
            Err(Error::NonPositiveJacobian { index: 7, .. }) => {}
            other => panic!("expected NonPositiveJacobian at 7, got {other:?}"),
        }
    }

    #[test]
    fn energy_is_exactly_zero_for_matched_identity() {
        let g = GridGeometry::unit_cube(12).unwrap();
        let d = blob(g, g.center(), 0.2, 1.0, 0.1);
        let f = Penalty::constant(g, 3.0).unwrap();
        let t = InverseTransform::identity(g);
        let e = energy(&t, &f, &d, &d).unwrap();
        assert_eq!(e.regularity, 0.0);
        assert_eq!(e.dissimilarity, 0.0);
        assert_eq!(e.total, 0.0);
    }

    #[test]
    fn energy_at_identity_reduces_to_hellinger() {
        let g = GridGeometry::unit_cube(14).unwrap();
        let a = blob(g, [0.4, 0.5, 0.5], 0.18, 1.0, 0.05);
        let b = blob(g, [0.6, 0.5, 0.5], 0.22, 0.8, 0.05);
        let f = Penalty::constant(g, 7.0).unwrap();
        let t = InverseTransform::identity(g);
        let e = energy(&t, &f, &a, &b).unwrap();
        let h = hellinger_sq(&a, &b).unwrap();
        assert_eq!(e.regularity, 0.0);
        assert!(
            (e.dissimilarity - h).abs() <= 1e-15 * h,
            "{} vs {h}",
            e.dissimilarity
        );
    }

    #[test]
    fn energy_matches_independent_quadrature() {
        // Deformed state, constant penalty; the oracle reimplements sampling
        // and summation from scratch.
        let g = GridGeometry::unit_cube(10).unwrap();
        let c = g.center();
        let i0 = blob(g, c, 0.25, 1.0, 0.2);
        let i1 = blob(g, [0.55, 0.45, 0.5], 0.2, 0.9, 0.2);
        let f = Penalty::constant(g, 1.3).unwrap();
        let map = VectorGrid::from_fn(g, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            let s = 1.0 - 0.07 * (-r2 / 0.05).exp();
            [
                c[0] + (p[0] - c[0]) * s,
                c[1] + (p[1] - c[1]) * s,
                c[2] + (p[2] - c[2]) * s,
            ]
        })
        .unwrap();
        let jac = map.jacobian_determinant_fd();
        let t = InverseTransform::new(map, jac).unwrap();
        let e = energy(&t, &f, &i0, &i1).unwrap();

        // Oracle.
        let n = g.dims[0];
        let h = g.spacing[0];
        let tri = |vals: &[f64], p: [f64; 3]| -> f64 {
            let mut base = [0usize; 3];
            let mut fr = [0.0f64; 3];
            for a in 0..3 {
                let u = (p[a] / h).clamp(0.0, (n - 1) as f64);
                let i = (u.floor() as usize).min(n - 2);
                base[a] = i;
                fr[a] = u - i as f64;
            }
            let mut acc = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wgt = (if dx == 1 { fr[0] } else { 1.0 - fr[0] })
                            * (if dy == 1 { fr[1] } else { 1.0 - fr[1] })
                            * (if dz == 1 { fr[2] } else { 1.0 - fr[2] });
                        acc += wgt
                            * vals[(base[0] + dx)
                                + n * ((base[1] + dy) + n * (base[2] + dz))];
                    }
                }
            }
            acc
        };
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for idx in 0..g.len() {
            let p = t.map().value_at(idx);
            let jd = t.jacdet().values()[idx];
            let w = 1.3;
            let i0c = tri(i0.grid().values(), p);
            e1 += w * (jd.sqrt() - 1.0).powi(2);
            e2 += ((jd * i0c).sqrt() - i1.grid().values()[idx].sqrt()).powi(2);
        }
        e1 *= g.voxel_volume();
        e2 *= g.voxel_volume();
        assert!((e.regularity - e1).abs() <= 1e-12 * e1.max(1.0));
        assert!((e.dissimilarity - e2).abs() <= 1e-12 * e2.max(1.0));
    }

    #[test]
    fn update_field_vanishes_bitwise_for_matched_identity() {
        let g = GridGeometry::unit_cube(10).unwrap();
        let d = blob(g, g.center(), 0.2, 1.0, 0.3);
        let f = Penalty::constant(g, 2.0).unwrap();
        let t = InverseTransform::identity(g);
        let u = update_field(&t, &f, &d, &d).unwrap();
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn update_field_uses_target_only_through_its_square_root() {
        let g = GridGeometry::unit_cube(9).unwrap();
        let i0 = blob(g, [0.45, 0.5, 0.55], 0.2, 1.0, 0.1);
        let i1 = blob(g, [0.55, 0.5, 0.45], 0.25, 0.7, 0.1);
        let f = Penalty::constant(g, 0.5).unwrap();
        let t = InverseTransform::identity(g);
        let direct = update_field(&t, &f, &i0, &i1).unwrap();
        let sqrt_i1 = ScalarGrid::new(
            g,
            i1.grid().values().iter().map(|v| v.sqrt()).collect(),
        )
        .unwrap();
        let via_sqrt = update_field_with_sqrt_target(&t, &f, &i0, &sqrt_i1).unwrap();
        for axis in 0..3 {
            assert_eq!(direct.component(axis), via_sqrt.component(axis));
        }
    }

    #[test]
    fn zero_velocity_step_changes_nothing() {
        let g = GridGeometry::unit_cube(8).unwrap();
        let t = InverseTransform::identity(g);
        let out = step(&t, &VectorGrid::zeros(g), 0.37).unwrap();
        assert_eq!(out.map(), t.map());
        assert_eq!(out.jacdet(), t.jacdet());
    }

    #[test]
    fn constant_velocity_translates_the_interior() {
        let g = GridGeometry::unit_cube(12).unwrap();
        let t = InverseTransform::identity(g);
        let c = [0.2, -0.1, 0.05];
        let v = VectorGrid::from_fn(g, |_| c).unwrap();
        let eps = 0.1;
        let out = step(&t, &v, eps).unwrap();
        let h = g.spacing[0];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let idx = g.index(i, j, k);
                    // Jacobian of a translation is 1 everywhere.
                    assert!((out.jacdet().values()[idx] - 1.0).abs() <= 1e-14);
                    let p = g.node_position(i, j, k);
                    let inside = (0..3).all(|a| {
                        let q = p[a] + eps * c[a];
                        q >= g.origin[a] && q <= g.origin[a] + (g.dims[a] - 1) as f64 * h
                    });
                    if inside {
                        let m = out.map().value_at(idx);
                        for a in 0..3 {
                            assert!((m[a] - (p[a] + eps * c[a])).abs() <= 1e-13);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn step_jacdet_agrees_with_fd_jacobian_of_the_composed_map() {
        // The update differs from the exact determinant of `y + eps*v` by
        // O(eps^2) (exp vs. det) plus O(h^2 * eps) (finite differences), so
        // halving h while quartering eps must cut the error ~16x.
        let err = |n: usize, eps: f64| {
            let g = GridGeometry::unit_cube(n).unwrap();
            let t = InverseTransform::identity(g);
            let v = smooth_velocity(g);
            let out = step(&t, &v, eps).unwrap();
            let fd = out.map().jacobian_determinant_fd();
            let mut worst = 0.0f64;
            for k in 1..n - 1 {
                for j in 1..n - 1 {
                    for i in 1..n - 1 {
                        let idx = g.index(i, j, k);
                        worst = worst.max((out.jacdet().values()[idx] - fd.values()[idx]).abs());
                    }
                }
            }
            worst
        };
        let coarse = err(24, 1e-3);
        let fine = err(48, 2.5e-4);
        let ratio = coarse / fine;
        assert!(
            (9.0..=28.0).contains(&ratio),
            "expected ~16x reduction, got {ratio} ({coarse} -> {fine})"
        );
    }

    #[test]
    fn step_rejects_folding_increments() {
        let g = GridGeometry::unit_cube(10).unwrap();
        let t = InverseTransform::identity(g);
        let v = smooth_velocity(g);
        match step(&t, &v, 50.0) {
            Err(Error::StepTooLarge { .. }) => {}
            other => panic!("expected StepTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn register_with_equal_inputs_returns_identity_and_flat_trace() {
        let g = GridGeometry::unit_cube(12).unwrap();
        let d = blob(g, g.center(), 0.2, 1.0, 0.1);
        let f = Penalty::constant(g, 1.0).unwrap();
        let cfg = RegistrationConfig {
            max_iters: 10,
            step_size: 0.5,
            ..Default::default()
        };
        let out = register(&d, &d, &f, &cfg).unwrap();
        assert_eq!(out.iterations, 0);
        let id = InverseTransform::identity(g);
        assert_eq!(out.transform.map(), id.map());
        assert_eq!(out.transform.jacdet(), id.jacdet());
        assert!(out.trace.iter().all(|r| r.total == 0.0));
    }

    #[test]
    fn register_with_zero_iterations_reports_initial_energy() {
        let g = GridGeometry::unit_cube(12).unwrap();
        let a = blob(g, [0.45, 0.5, 0.5], 0.2, 1.0, 0.1);
        let b = blob(g, [0.55, 0.5, 0.5], 0.2, 1.0, 0.1);
        let f = Penalty::constant(g, 1.0).unwrap();
        let cfg = RegistrationConfig {
            max_iters: 0,
            pad_margin: 0,
            ..Default::default()
        };
        let out = register(&a, &b, &f, &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        let want = hellinger_sq(&a, &b).unwrap();
        assert!((out.trace[0].total - want).abs() <= 1e-12 * want);
        let id = InverseTransform::identity(g);
        assert_eq!(out.transform.map(), id.map());
    }

    #[test]
    fn register_padding_contributes_no_energy_at_identity() {
        let g = GridGeometry::unit_cube(10).unwrap();
        let a = blob(g, [0.45, 0.5, 0.5], 0.15, 1.0, 0.0);
        let b = blob(g, [0.55, 0.5, 0.5], 0.15, 1.0, 0.0);
        let f = Penalty::constant(g, 1.0).unwrap();
        let run = |pad: usize| {
            let cfg = RegistrationConfig {
                max_iters: 0,
                pad_margin: pad,
                ..Default::default()
            };
            register(&a, &b, &f, &cfg).unwrap().trace[0].total
        };
        let unpadded = run(0);
        let padded = run(6);
        assert!((unpadded - padded).abs() <= 1e-12 * unpadded);
    }

    #[test]
    fn register_descends_and_reduces_mismatch_on_a_warped_pair() {
        let g = GridGeometry::unit_cube(24).unwrap();
        let c = g.center();
        let i0 = blob(g, c, 0.18, 1.0, 0.02);
        // Target: the same blob pushed through a mild radial expansion.
        let map = VectorGrid::from_fn(g, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            let s = 1.0 - 0.10 * (-r2 / 0.06).exp();
            [
                c[0] + (p[0] - c[0]) * s,
                c[1] + (p[1] - c[1]) * s,
                c[2] + (p[2] - c[2]) * s,
            ]
        })
        .unwrap();
        let jac = map.jacobian_determinant_fd();
        let truth = InverseTransform::new(map, jac).unwrap();
        let i1 = pushforward(&i0, &truth).unwrap();
        let mean = i0.grid().values().iter().sum::<f64>() / g.len() as f64;
        let f = Penalty::constant(g, 0.1 * mean).unwrap();
        let cfg = RegistrationConfig {
            step_size: 2.0,
            max_iters: 60,
            pad_margin: 4,
            ..Default::default()
        };
        let out = register(&i0, &i1, &f, &cfg).unwrap();
        // Strict descent along the accepted trace.
        for w in out.trace.windows(2) {
            assert!(w[1].total < w[0].total, "{} !< {}", w[1].total, w[0].total);
        }
        let first = out.trace.first().unwrap().e2;
        let last = out.trace.last().unwrap().e2;
        assert!(
            last <= 0.5 * first,
            "dissimilarity only went {first} -> {last}"
        );
        assert_eq!(out.transform.geometry(), &g);
        assert!(out.transform.jacdet().min_value() > 0.0);
    }

    #[test]
    fn register_diverges_when_no_decrease_is_reachable() {
        let g = GridGeometry::unit_cube(10).unwrap();
        let a = blob(g, [0.45, 0.5, 0.5], 0.2, 1.0, 0.1);
        let b = blob(g, [0.55, 0.5, 0.5], 0.2, 1.0, 0.1);
        let f = Penalty::constant(g, 1.0).unwrap();
        // A giant base step with an immediate minimum-step floor: the first
        // backtrack already exhausts the budget.
        let cfg = RegistrationConfig {
            step_size: 1e9,
            min_step_factor: 1.0,
            max_iters: 5,
            pad_margin: 0,
            ..Default::default()
        };
        match register(&a, &b, &f, &cfg) {
            Err(Error::Diverged) => {}
            other => panic!("expected Diverged, got {other:?}"),
        }
    }

    #[test]
    fn trace_every_zero_keeps_first_and_last_rows_only() {
        let g = GridGeometry::unit_cube(12).unwrap();
        let a = blob(g, [0.45, 0.5, 0.5], 0.18, 1.0, 0.05);
        let b = blob(g, [0.55, 0.5, 0.5], 0.18, 1.0, 0.05);
        let f = Penalty::constant(g, 0.5).unwrap();
        let cfg = RegistrationConfig {
            step_size: 1.0,
            max_iters: 7,
            trace_every: 0,
            pad_margin: 0,
            ..Default::default()
        };
        let out = register(&a, &b, &f, &cfg).unwrap();
        assert_eq!(out.trace.len(), 2);
        assert_eq!(out.trace[0].iter, 0);
        assert_eq!(out.trace[1].iter, out.iterations);
    }

    #[test]
    fn sigmoid_penalty_hits_midpoint_and_limits() {
        let g = GridGeometry::unit_cube(4).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|i| i as f64 / 10.0).collect();
        let d = Density::new(ScalarGrid::new(g, vals.clone()).unwrap()).unwrap();
        let f = sigmoid_penalty(&d, 0.2, 4.0, 3.0, 50.0).unwrap();
        for (i, &v) in vals.iter().enumerate() {
            let got = f.grid().values()[i];
            assert!(got >= 0.2 && got <= 4.0);
            if v == 3.0 {
                assert_eq!(got, (0.2 + 4.0) / 2.0);
            }
            if v < 2.5 {
                assert!((got - 0.2).abs() < 1e-8);
            }
            if v > 3.5 {
                assert!((got - 4.0).abs() < 1e-8);
            }
        }
        // Monotone in the intensity.
        let mut last = -1.0;
        for &v in &vals {
            let fv = 0.2 + 3.8 / (1.0 + (-50.0 * (v - 3.0)).exp());
            assert!(fv >= last);
            last = fv;
        }
    }

    #[test]
    fn sigmoid_penalty_rejects_bad_parameters() {
        let g = GridGeometry::unit_cube(4).unwrap();
        let d = Density::constant(g, 1.0).unwrap();
        assert!(sigmoid_penalty(&d, -0.1, 1.0, 0.5, 1.0).is_err());
        assert!(sigmoid_penalty(&d, 2.0, 1.0, 0.5, 1.0).is_err());
        assert!(sigmoid_penalty(&d, 0.1, 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn otsu_separates_bimodal_values() {
        let mut vals = vec![0.1; 300];
        vals.extend(vec![0.9; 200]);
        let t = otsu_threshold(&vals);
        assert!(t > 0.1 && t < 0.9, "threshold {t}");
    }
}
