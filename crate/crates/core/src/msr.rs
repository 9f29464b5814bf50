//! Differentiable discretized residuals and the mean-square losses built on them.
//!
//! Network predictions enter as `[1, m, m]` fields where `m` is the unknown
//! side of the grid: the interior for wall-bounded problems (the frozen zero
//! boundary is padded back before any stencil), the whole grid for periodic ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdm::{self, Boundary, GridSpec, NsParams};
use crate::field::Field;
use crate::tensor::{StencilBoundary, StencilKernel, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    PoissonDirichlet,
    PoissonPeriodic,
    NsLiddriven,
    NsPeriodic,
}

impl ResidualKind {
    pub fn is_navier_stokes(self) -> bool {
        matches!(self, ResidualKind::NsLiddriven | ResidualKind::NsPeriodic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSpec {
    pub kind: ResidualKind,
    pub grid: GridSpec,
    pub ns: Option<NsParams>,
}

impl ResidualSpec {
    pub fn new(kind: ResidualKind, grid: GridSpec, ns: Option<NsParams>) -> Result<Self> {
        let ok = match (kind, grid.boundary) {
            (ResidualKind::PoissonDirichlet, Boundary::DirichletZero) => true,
            (ResidualKind::PoissonPeriodic, Boundary::Periodic) => true,
            (ResidualKind::NsLiddriven, Boundary::LidDriven { .. }) => true,
            (ResidualKind::NsPeriodic, Boundary::Periodic) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::config(
                "problem",
                format!("{kind:?} residual cannot use a {:?} grid", grid.boundary),
            ));
        }
        if kind.is_navier_stokes() != ns.is_some() {
            return Err(Error::config(
                "problem",
                "time-stepping parameters are required for, and only for, Navier-Stokes residuals",
            ));
        }
        Ok(ResidualSpec { kind, grid, ns })
    }

    /// Shape of a network prediction, `[1, m, m]`.
    pub fn prediction_shape(&self) -> [usize; 3] {
        let m = self.grid.unknown_side();
        [1, m, m]
    }

    fn kernel(&self) -> StencilKernel {
        if self.grid.is_periodic() {
            StencilKernel::laplacian_5pt(StencilBoundary::PeriodicWrap)
        } else {
            StencilKernel::laplacian_5pt(StencilBoundary::DirichletInteriorOnly)
        }
    }

    fn check_prediction(&self, tape: &Tape, v: Var, op: &'static str) -> Result<()> {
        let shape = tape.value(v).shape();
        if shape != self.prediction_shape() {
            return Err(Error::shape(
                op,
                format!(
                    "prediction {:?} does not match {:?}",
                    shape,
                    self.prediction_shape()
                ),
            ));
        }
        Ok(())
    }

    /// Restricts an `[n, n]` grid field to a `[1, m, m]` prediction-shaped field.
    pub fn to_unknowns(&self, full: &Field) -> Result<Field> {
        self.grid.check_field(full, "to_unknowns")?;
        let block = if self.grid.is_periodic() {
            full.clone()
        } else {
            fdm::interior(full)?
        };
        Ok(block.with_channel_axis())
    }

    /// Expands a `[1, m, m]` prediction to an `[n, n]` grid field.
    pub fn to_grid(&self, pred: &Field) -> Result<Field> {
        if pred.shape() != self.prediction_shape() {
            return Err(Error::shape(
                "to_grid",
                format!(
                    "prediction {:?} does not match {:?}",
                    pred.shape(),
                    self.prediction_shape()
                ),
            ));
        }
        let m = self.grid.unknown_side();
        let block = pred.clone().reshape(&[m, m])?;
        if self.grid.is_periodic() {
            Ok(block)
        } else {
            fdm::embed_interior(&block)
        }
    }
}

/// `∇²_h û` on the equation set, padding the zero boundary for wall-bounded grids.
fn laplacian(tape: &mut Tape, u: Var, spec: &ResidualSpec) -> Result<Var> {
    let x = if spec.grid.is_periodic() {
        u
    } else {
        tape.pad_zero(u, 1)?
    };
    tape.stencil(x, &spec.kernel(), spec.grid.delta)
}

/// Poisson residual `r = ∇²_h û + f` on the equation set.
///
/// `f` is an `[n, n]` grid field; periodic problems use its mean projection.
pub fn poisson_residual(tape: &mut Tape, u_hat: Var, f: &Field, spec: &ResidualSpec) -> Result<Var> {
    if spec.kind.is_navier_stokes() {
        return Err(Error::contract("poisson_residual", "spec is a Navier-Stokes residual"));
    }
    spec.check_prediction(tape, u_hat, "poisson_residual")?;
    spec.grid.check_field(f, "poisson_residual")?;
    let lap = laplacian(tape, u_hat, spec)?;
    let rhs = if spec.grid.is_periodic() {
        fdm::subtract_mean(f)
    } else {
        fdm::interior(f)?
    };
    let rhs = tape.constant(rhs.with_channel_axis());
    tape.add(lap, rhs)
}

/// Explicit Euler target `EulerUpdate(ω(ψᵗ), ψᵗ)` on the equation set, as `[1, m, m]`.
pub fn ns_target(psi_t: &Field, spec: &ResidualSpec) -> Result<Field> {
    let p = spec
        .ns
        .ok_or_else(|| Error::contract("ns_residual", "spec is a Poisson residual"))?;
    let omega = fdm::vorticity_from_stream(psi_t, &spec.grid)?;
    let next = fdm::euler_update(&omega, psi_t, &spec.grid, &p)?;
    let next = if spec.grid.is_periodic() {
        fdm::subtract_mean(&next)
    } else {
        next
    };
    spec.to_unknowns(&next)
}

/// Navier–Stokes residual `r = ω(ψ̂ᵗ⁺¹) − EulerUpdate(ω(ψᵗ), ψᵗ)` on the equation set.
///
/// `psi_t` is an `[n, n]` grid field and carries no gradient. Wall vorticity of
/// `ψ̂ᵗ⁺¹` never enters an interior equation, so only `−∇²_h ψ̂ᵗ⁺¹` is formed.
pub fn ns_residual(tape: &mut Tape, psi_t: &Field, psi_next: Var, spec: &ResidualSpec) -> Result<Var> {
    spec.grid.check_field(psi_t, "ns_residual")?;
    spec.check_prediction(tape, psi_next, "ns_residual")?;
    let target = ns_target(psi_t, spec)?;
    ns_residual_with_target(tape, &target, psi_next, spec)
}

/// [`ns_residual`] with a precomputed [`ns_target`].
pub fn ns_residual_with_target(
    tape: &mut Tape,
    target: &Field,
    psi_next: Var,
    spec: &ResidualSpec,
) -> Result<Var> {
    spec.check_prediction(tape, psi_next, "ns_residual")?;
    if target.shape() != spec.prediction_shape() {
        return Err(Error::shape("ns_residual", "target does not match the equation set"));
    }
    let lap = laplacian(tape, psi_next, spec)?;
    let omega = tape.scale(lap, -1.0);
    let t = tape.constant(target.clone());
    tape.sub(omega, t)
}

/// Mean of squared residuals.
pub fn msr_loss(tape: &mut Tape, residual: Var) -> Result<Var> {
    tape.mean_square(residual)
}

/// Mean squared error against a fixed target.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Field) -> Result<Var> {
    tape.value(pred).expect_same_shape(target, "mse_loss")?;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    tape.mean_square(d)
}

/// Max-norm residual bound implied by a relative CG tolerance:
/// `10 · tol · max(1, ‖rhs‖₂)`.
pub fn oracle_bound(tol: f64, rhs_norm: f64) -> f64 {
    10.0 * tol * rhs_norm.max(1.0)
}

/// Max-norm residual of a solver output against the bound its tolerance implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Audit {
    pub residual: f64,
    pub bound: f64,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.residual <= self.bound
    }
}

/// Plugs `output` (a grid field) into the residual for `input`: the forcing for
/// Poisson kinds, the current stream function for Navier–Stokes kinds.
pub fn audit(input: &Field, output: &Field, spec: &ResidualSpec, tol: f64) -> Result<Audit> {
    let mut tape = Tape::new();
    let v = tape.constant(spec.to_unknowns(output)?);
    let (r, rhs_norm) = if spec.kind.is_navier_stokes() {
        let target = ns_target(input, spec)?;
        (ns_residual_with_target(&mut tape, &target, v, spec)?, target.norm2())
    } else {
        (poisson_residual(&mut tape, v, input, spec)?, input.norm2())
    };
    Ok(Audit {
        residual: tape.value(r).max_abs(),
        bound: oracle_bound(tol, rhs_norm),
    })
}
