//! Fixed-coefficient finite-difference stencils.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilBoundary {
    /// Indices wrap around both spatial axes; output has the input's shape.
    PeriodicWrap,
    /// Output is produced only where the whole stencil fits; the outer ring of
    /// width `reach` is consumed as boundary data.
    DirichletInteriorOnly,
}

/// Constant cross-correlation kernel over a 2D grid.
///
/// The applied value at a point is `delta^-p * Σ coeff_q * x[point + offset_q]`
/// where `p = inverse_delta_power`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilKernel {
    offsets: Vec<(isize, isize)>,
    coefficients: Vec<f64>,
    boundary: StencilBoundary,
    inverse_delta_power: i32,
}

impl StencilKernel {
    pub fn new(
        offsets: Vec<(isize, isize)>,
        coefficients: Vec<f64>,
        boundary: StencilBoundary,
        inverse_delta_power: i32,
    ) -> Result<Self> {
        if offsets.len() != coefficients.len() {
            return Err(Error::shape(
                "StencilKernel::new",
                format!(
                    "{} offsets but {} coefficients",
                    offsets.len(),
                    coefficients.len()
                ),
            ));
        }
        Ok(StencilKernel {
            offsets,
            coefficients,
            boundary,
            inverse_delta_power,
        })
    }

    /// Second-order central 5-point Laplacian, `(u_W + u_E + u_S + u_N - 4u) / Δ²`.
    pub fn laplacian_5pt(boundary: StencilBoundary) -> Self {
        StencilKernel {
            offsets: vec![(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
            coefficients: vec![-4.0, 1.0, 1.0, 1.0, 1.0],
            boundary,
            inverse_delta_power: 2,
        }
    }

    pub fn boundary(&self) -> StencilBoundary {
        self.boundary
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Largest absolute offset component.
    pub fn reach(&self) -> usize {
        self.offsets
            .iter()
            .map(|&(a, b)| a.unsigned_abs().max(b.unsigned_abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn scale(&self, delta: f64) -> f64 {
        delta.powi(-self.inverse_delta_power)
    }

    /// Output spatial shape for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.boundary {
            StencilBoundary::PeriodicWrap => Ok((h, w)),
            StencilBoundary::DirichletInteriorOnly => {
                let r = self.reach();
                if h < 2 * r + 1 || w < 2 * r + 1 {
                    return Err(Error::size(
                        "stencil_apply",
                        format!("{h}×{w} grid is smaller than a stencil of reach {r}"),
                    ));
                }
                Ok((h - 2 * r, w - 2 * r))
            }
        }
    }

    /// Applies the kernel to every channel of a `[C, h, w]` block.
    pub(crate) fn apply(&self, x: &[f64], c: usize, h: usize, w: usize, scale: f64) -> Vec<f64> {
        let (oh, ow) = self.output_dims(h, w).expect("checked by caller");
        let mut out = vec![0.0; c * oh * ow];
        let r = self.reach() as isize;
        for ch in 0..c {
            let xin = &x[ch * h * w..(ch + 1) * h * w];
            let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (&(di, dj), &k) in self.offsets.iter().zip(&self.coefficients) {
                let k = k * scale;
                for i in 0..oh {
                    let si = self.source_index(i as isize, di, r, h);
                    let row = &xin[si * w..(si + 1) * w];
                    let orow = &mut o[i * ow..(i + 1) * ow];
                    match self.boundary {
                        StencilBoundary::DirichletInteriorOnly => {
                            let start = (r + dj) as usize;
                            for (ov, &xv) in orow.iter_mut().zip(&row[start..start + ow]) {
                                *ov += k * xv;
                            }
                        }
                        StencilBoundary::PeriodicWrap => {
                            for (j, ov) in orow.iter_mut().enumerate() {
                                let sj = (j as isize + dj).rem_euclid(w as isize) as usize;
                                *ov += k * row[sj];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatters output gradients back onto the input grid.
    pub(crate) fn apply_adjoint(
        &self,
        g: &[f64],
        c: usize,
        h: usize,
        w: usize,
        scale: f64,
    ) -> Vec<f64> {
        let (oh, ow) = self.output_dims(h, w).expect("checked by caller");
        let mut gx = vec![0.0; c * h * w];
        let r = self.reach() as isize;
        for ch in 0..c {
            let go = &g[ch * oh * ow..(ch + 1) * oh * ow];
            let gi = &mut gx[ch * h * w..(ch + 1) * h * w];
            for (&(di, dj), &k) in self.offsets.iter().zip(&self.coefficients) {
                let k = k * scale;
                for i in 0..oh {
                    let si = self.source_index(i as isize, di, r, h);
                    let grow = &go[i * ow..(i + 1) * ow];
                    let irow = &mut gi[si * w..(si + 1) * w];
                    match self.boundary {
                        StencilBoundary::DirichletInteriorOnly => {
                            let start = (r + dj) as usize;
                            for (iv, &gv) in irow[start..start + ow].iter_mut().zip(grow) {
                                *iv += k * gv;
                            }
                        }
                        StencilBoundary::PeriodicWrap => {
                            for (j, &gv) in grow.iter().enumerate() {
                                let sj = (j as isize + dj).rem_euclid(w as isize) as usize;
                                irow[sj] += k * gv;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    fn source_index(&self, i: isize, di: isize, r: isize, h: usize) -> usize {
        match self.boundary {
            StencilBoundary::DirichletInteriorOnly => (i + r + di) as usize,
            StencilBoundary::PeriodicWrap => (i + di).rem_euclid(h as isize) as usize,
        }
    }
}
