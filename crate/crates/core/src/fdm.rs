//! Finite-difference reference solvers.
//!
//! Grids are `n × n` node layouts stored as `[n, n]` fields indexed `[i, j]`
//! with `x_i = iΔ` and `y_j = jΔ`. Wall-bounded grids keep their boundary
//! nodes in the field; the unknowns are the `(n-2)²` interior nodes.
//!
//! Sign convention: the Poisson solver works with the SPD operator and solves
//! `-∇²_h u = f`. The residual builders in [`crate::msr`] use the same
//! convention so that solver outputs are exact zeros of their residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

/// Default relative tolerance for every conjugate-gradient solve.
pub const DEFAULT_CG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    DirichletZero,
    /// Cavity with three resting walls and a lid at `j = n-1` sliding at `lid_speed`.
    LidDriven { lid_speed: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub delta: f64,
    pub boundary: Boundary,
}

impl GridSpec {
    /// Unit-square grid with the mesh width implied by the boundary type.
    pub fn new(n: usize, boundary: Boundary) -> Result<Self> {
        if n < 3 {
            return Err(Error::config("grid.n", format!("need n ≥ 3, got {n}")));
        }
        let delta = match boundary {
            Boundary::Periodic => 1.0 / n as f64,
            _ => 1.0 / (n - 1) as f64,
        };
        Ok(GridSpec { n, delta, boundary })
    }

    pub fn periodic(n: usize) -> Result<Self> {
        Self::new(n, Boundary::Periodic)
    }

    pub fn dirichlet(n: usize) -> Result<Self> {
        Self::new(n, Boundary::DirichletZero)
    }

    pub fn lid_driven(n: usize, lid_speed: f64) -> Result<Self> {
        Self::new(n, Boundary::LidDriven { lid_speed })
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.boundary, Boundary::Periodic)
    }

    pub fn lid_speed(&self) -> f64 {
        match self.boundary {
            Boundary::LidDriven { lid_speed } => lid_speed,
            _ => 0.0,
        }
    }

    /// Side length of the block of unknowns (`n` periodic, `n - 2` otherwise).
    pub fn unknown_side(&self) -> usize {
        if self.is_periodic() {
            self.n
        } else {
            self.n - 2
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.delta
    }

    pub(crate) fn check_field(&self, f: &Field, op: &'static str) -> Result<()> {
        if f.shape() != [self.n, self.n] {
            return Err(Error::shape(
                op,
                format!("expected [{0}, {0}] grid field, got {1:?}", self.n, f.shape()),
            ));
        }
        Ok(())
    }
}

/// Navier–Stokes time-stepping constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsParams {
    pub reynolds: f64,
    pub dt: f64,
    pub steps: usize,
}

impl NsParams {
    pub fn new(reynolds: f64, dt: f64, steps: usize) -> Result<Self> {
        if !(reynolds > 0.0) {
            return Err(Error::config("problem.reynolds", "must be > 0"));
        }
        if !(dt > 0.0) {
            return Err(Error::config("problem.dt", "must be > 0"));
        }
        Ok(NsParams {
            reynolds,
            dt,
            steps,
        })
    }

    /// Explicit viscous stability guard `dt ≤ Δ² Re / 4`.
    pub fn is_stable(&self, grid: &GridSpec) -> bool {
        self.dt <= grid.delta * grid.delta * self.reynolds / 4.0
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Field,
    /// Final relative residual `‖b − Ax‖₂ / ‖b‖₂`, recomputed from `x`.
    pub residual: f64,
    pub iters: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients for `A x = b` with a matrix-free SPD operator.
///
/// Stops once the true residual satisfies `‖b − Ax‖₂ ≤ tol ‖b‖₂`; when the
/// recursive residual claims convergence but the true one disagrees, the
/// iteration restarts from the true residual.
pub fn cg_solve<F>(mut apply_a: F, b: &Field, tol: f64, max_iter: usize) -> Result<CgSolution>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(tol > 0.0) {
        return Err(Error::contract("cg_solve", "tolerance must be positive"));
    }
    let bd = b.data();
    let n = bd.len();
    let bnorm = dot(bd, bd).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgSolution {
            x: Field::zeros(b.shape()),
            residual: 0.0,
            iters: 0,
        });
    }
    let target = tol * bnorm;
    let mut r = bd.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut iters = 0;
    while iters < max_iter {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!(
                "operator is not positive definite along a search direction (pᵀAp = {pap:e})"
            )));
        }
        let alpha = rr / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        iters += 1;
        let mut rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            apply_a(&x, &mut ap);
            for k in 0..n {
                r[k] = bd[k] - ap[k];
            }
            rr_new = dot(&r, &r);
            if rr_new.sqrt() <= target {
                return Ok(CgSolution {
                    x: Field::new(b.shape().to_vec(), x)?,
                    residual: rr_new.sqrt() / bnorm,
                    iters,
                });
            }
            p.copy_from_slice(&r);
            rr = rr_new;
            continue;
        }
        let beta = rr_new / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
    }
    apply_a(&x, &mut ap);
    let res = bd
        .iter()
        .zip(&ap)
        .map(|(b, a)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    if res <= target {
        Ok(CgSolution {
            x: Field::new(b.shape().to_vec(), x)?,
            residual: res / bnorm,
            iters,
        })
    } else {
        Err(Error::NotConverged {
            residual: res / bnorm,
            iters,
        })
    }
}

/// `-∇²_h` on an `m × m` block of unknowns with zero values outside it.
pub(crate) fn neg_laplacian_dirichlet(u: &[f64], out: &mut [f64], m: usize, delta: f64) {
    let s = 1.0 / (delta * delta);
    for i in 0..m {
        for j in 0..m {
            let c = u[i * m + j];
            let mut acc = 4.0 * c;
            if i > 0 {
                acc -= u[(i - 1) * m + j];
            }
            if i + 1 < m {
                acc -= u[(i + 1) * m + j];
            }
            if j > 0 {
                acc -= u[i * m + j - 1];
            }
            if j + 1 < m {
                acc -= u[i * m + j + 1];
            }
            out[i * m + j] = s * acc;
        }
    }
}

/// `-∇²_h` on an `n × n` periodic grid.
pub(crate) fn neg_laplacian_periodic(u: &[f64], out: &mut [f64], n: usize, delta: f64) {
    let s = 1.0 / (delta * delta);
    for i in 0..n {
        let (im, ip) = ((i + n - 1) % n, (i + 1) % n);
        for j in 0..n {
            let (jm, jp) = ((j + n - 1) % n, (j + 1) % n);
            let acc = 4.0 * u[i * n + j]
                - u[im * n + j]
                - u[ip * n + j]
                - u[i * n + jm]
                - u[i * n + jp];
            out[i * n + j] = s * acc;
        }
    }
}

/// Interior block `[1..n-1, 1..n-1]` of an `[n, n]` field.
pub fn interior(f: &Field) -> Result<Field> {
    if f.ndim() != 2 || f.shape()[0] < 3 || f.shape()[1] < 3 {
        return Err(Error::shape(
            "interior",
            format!("expected a 2D grid of side ≥ 3, got {:?}", f.shape()),
        ));
    }
    let (h, w) = (f.shape()[0], f.shape()[1]);
    Ok(Field::from_fn(&[h - 2, w - 2], |ix| f.get(&[ix[0] + 1, ix[1] + 1])))
}

/// Places an `[m, m]` interior block into an `[m+2, m+2]` grid with zero boundary.
pub fn embed_interior(u: &Field) -> Result<Field> {
    if u.ndim() != 2 {
        return Err(Error::shape(
            "embed_interior",
            format!("expected a 2D block, got {:?}", u.shape()),
        ));
    }
    let (h, w) = (u.shape()[0], u.shape()[1]);
    Ok(Field::from_fn(&[h + 2, w + 2], |ix| {
        let (i, j) = (ix[0], ix[1]);
        if i == 0 || j == 0 || i == h + 1 || j == w + 1 {
            0.0
        } else {
            u.get(&[i - 1, j - 1])
        }
    }))
}

/// Subtracts the arithmetic mean.
pub(crate) fn subtract_mean(f: &Field) -> Field {
    let m = f.mean();
    f.map(|v| v - m)
}

/// Solves `-∇²_h u = f` on `grid`.
///
/// Wall-bounded grids return `u` with a zero boundary ring; `f` is read on the
/// interior only. Periodic grids mean-project `f` and return the zero-mean solution.
pub fn poisson_solve(f: &Field, grid: &GridSpec, tol: f64) -> Result<Field> {
    grid.check_field(f, "poisson_solve")?;
    let n = grid.n;
    let max_iter = 10 * n * n;
    let delta = grid.delta;
    if grid.is_periodic() {
        let rhs = subtract_mean(f);
        let sol = cg_solve(
            |u, out| neg_laplacian_periodic(u, out, n, delta),
            &rhs,
            tol,
            max_iter,
        )?;
        Ok(subtract_mean(&sol.x))
    } else {
        let rhs = interior(f)?;
        let m = n - 2;
        let sol = cg_solve(
            |u, out| neg_laplacian_dirichlet(u, out, m, delta),
            &rhs,
            tol,
            max_iter,
        )?;
        embed_interior(&sol.x)
    }
}

/// Vorticity `ω = -∇²_h ψ`, with wall values from the no-slip stream-function
/// formulas on wall-bounded grids.
///
/// Wall rows are written left, right, bottom, then top, so the corners of the
/// moving lid row carry the lid term.
pub fn vorticity_from_stream(psi: &Field, grid: &GridSpec) -> Result<Field> {
    grid.check_field(psi, "vorticity_from_stream")?;
    let n = grid.n;
    let d = grid.delta;
    let p = psi.data();
    let mut w = vec![0.0; n * n];
    if grid.is_periodic() {
        neg_laplacian_periodic(p, &mut w, n, d);
        return Field::new(vec![n, n], w);
    }
    let s = 1.0 / (d * d);
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            w[i * n + j] = s
                * (4.0 * p[i * n + j]
                    - p[(i - 1) * n + j]
                    - p[(i + 1) * n + j]
                    - p[i * n + j - 1]
                    - p[i * n + j + 1]);
        }
    }
    let u = grid.lid_speed();
    let wall = -2.0 * s;
    for j in 0..n {
        w[j] = wall * p[n + j];
        w[(n - 1) * n + j] = wall * p[(n - 2) * n + j];
    }
    for i in 0..n {
        w[i * n] = wall * p[i * n + 1];
        w[i * n + n - 1] = wall * p[i * n + n - 2] - 2.0 * u / d;
    }
    Field::new(vec![n, n], w)
}

/// Forward-Euler vorticity update with central-difference advection and a
/// 5-point viscous term.
///
/// Updates the interior of wall-bounded grids (boundary entries are copied
/// from `omega`) and every node of periodic grids.
pub fn euler_update(omega: &Field, psi: &Field, grid: &GridSpec, p: &NsParams) -> Result<Field> {
    grid.check_field(omega, "euler_update")?;
    grid.check_field(psi, "euler_update")?;
    let n = grid.n;
    let d2 = grid.delta * grid.delta;
    let adv = p.dt / (4.0 * d2);
    let visc = p.dt / (p.reynolds * d2);
    let (w, s) = (omega.data(), psi.data());
    let mut out = w.to_vec();
    let (lo, hi) = if grid.is_periodic() { (0, n) } else { (1, n - 1) };
    for i in lo..hi {
        let (im, ip) = ((i + n - 1) % n, (i + 1) % n);
        for j in lo..hi {
            let (jm, jp) = ((j + n - 1) % n, (j + 1) % n);
            let c = w[i * n + j];
            let jac = (s[i * n + jp] - s[i * n + jm]) * (w[ip * n + j] - w[im * n + j])
                - (s[ip * n + j] - s[im * n + j]) * (w[i * n + jp] - w[i * n + jm]);
            let lap = w[ip * n + j] + w[im * n + j] + w[i * n + jp] + w[i * n + jm] - 4.0 * c;
            out[i * n + j] = c - adv * jac + visc * lap;
        }
    }
    Field::new(vec![n, n], out)
}

/// One vorticity step: solves `ψᵗ` from `ωᵗ`, refreshes wall vorticity from
/// `ψᵗ`, then applies the Euler update. Returns `(ωᵗ⁺¹, ψᵗ)`.
pub fn ns_step(omega_t: &Field, grid: &GridSpec, p: &NsParams, tol: f64) -> Result<(Field, Field)> {
    let psi_t = poisson_solve(omega_t, grid, tol)?;
    let omega_full = if grid.is_periodic() {
        omega_t.clone()
    } else {
        let mut full = vorticity_from_stream(&psi_t, grid)?;
        let n = grid.n;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                full.set(&[i, j], omega_t.get(&[i, j]));
            }
        }
        full
    };
    let omega_next = euler_update(&omega_full, &psi_t, grid, p)?;
    Ok((omega_next, psi_t))
}

/// Advances a stream function by one step: `ψ ↦ solve(Euler(ω(ψ), ψ))`.
///
/// This is the map whose fixed points the NS residual in [`crate::msr`] measures,
/// and the step used by [`ns_trajectory`].
pub fn ns_advance(psi_t: &Field, grid: &GridSpec, p: &NsParams, tol: f64) -> Result<Field> {
    let omega = vorticity_from_stream(psi_t, grid)?;
    let omega_next = euler_update(&omega, psi_t, grid, p)?;
    poisson_solve(&omega_next, grid, tol)
}

/// Stream-function trajectory `[ψ⁰, …, ψ^steps]` from an initial vorticity.
pub fn ns_trajectory(omega_0: &Field, grid: &GridSpec, p: &NsParams, tol: f64) -> Result<Vec<Field>> {
    if p.steps == 0 {
        return Err(Error::contract("ns_trajectory", "steps must be ≥ 1"));
    }
    if !p.is_stable(grid) {
        log::warn!(
            "dt = {} exceeds the explicit viscous limit Δ²Re/4 = {}",
            p.dt,
            grid.delta * grid.delta * p.reynolds / 4.0
        );
    }
    let mut out = Vec::with_capacity(p.steps + 1);
    out.push(poisson_solve(omega_0, grid, tol)?);
    for _ in 0..p.steps {
        let next = ns_advance(out.last().expect("non-empty"), grid, p, tol)?;
        out.push(next);
    }
    Ok(out)
}

/// Dense inverse-operator row for grid node `(i, j)`: the row of `(∇²_h)⁻¹`
/// coupling that node to every forcing value, reshaped to the grid.
///
/// Wall-bounded grids return a zero boundary ring. Periodic grids use the
/// pseudo-inverse on the mean-zero subspace.
pub fn inverse_operator_row(index: (usize, usize), grid: &GridSpec) -> Result<Field> {
    let n = grid.n;
    if n > 64 {
        return Err(Error::size(
            "inverse_operator_row",
            format!("dense inverse limited to n ≤ 64, got {n}"),
        ));
    }
    let (i, j) = index;
    let periodic = grid.is_periodic();
    let valid = if periodic {
        i < n && j < n
    } else {
        (1..n - 1).contains(&i) && (1..n - 1).contains(&j)
    };
    if !valid {
        return Err(Error::contract(
            "inverse_operator_row",
            format!("({i}, {j}) is not an unknown of a {n}×{n} grid"),
        ));
    }
    let m = grid.unknown_side();
    let size = m * m;
    let mut lap = DMatrix::<f64>::zeros(size, size);
    let mut unit = vec![0.0; size];
    let mut col = vec![0.0; size];
    for k in 0..size {
        unit[k] = 1.0;
        if periodic {
            neg_laplacian_periodic(&unit, &mut col, m, grid.delta);
        } else {
            neg_laplacian_dirichlet(&unit, &mut col, m, grid.delta);
        }
        for (r, v) in col.iter().enumerate() {
            lap[(r, k)] = -v;
        }
        unit[k] = 0.0;
    }
    let target = if periodic { i * m + j } else { (i - 1) * m + (j - 1) };
    let mut rhs = DVector::<f64>::zeros(size);
    rhs[target] = 1.0;
    if periodic {
        let inv_n = 1.0 / size as f64;
        lap.add_scalar_mut(inv_n);
        rhs.add_scalar_mut(-inv_n);
    }
    let row = lap
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("discrete Laplacian is singular".into()))?;
    let block = Field::new(vec![m, m], row.as_slice().to_vec())?;
    if periodic {
        Ok(block)
    } else {
        embed_interior(&block)
    }
}
