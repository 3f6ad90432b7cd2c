//! Offline-online reduced model for the steady incompressible problem.
//!
//! Offline, the saddle system is split into affine terms `sum Theta_i(mu) A_i`
//! plus the advection operator, which depends linearly on the frozen velocity.
//! Projecting each `A_i` and the per-mode advection submatrices `N(phi_j)`
//! once makes the online Oseen iteration independent of the full-order size:
//! every online object is N x N or N, and the full-order dimension is touched
//! only when lifting the final reduced coordinates back.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::field::{Discretization, DofLevel, FieldSpace, FieldState};
use crate::oseen::{
    assemble_part, load_vector, AssembledOperator, BoundaryConditions, FlowParameters,
    OperatorPart, SteadySolution, SystemLayout,
};
use crate::pod::PodBasis;
use ndarray::prelude::*;
use ndarray_linalg::Solve;
use sha2::{Digest, Sha256};

/// One affine term: a scalar coefficient expression over the parameter
/// vector and a parameter-independent matrix (with its Dirichlet lift).
#[derive(Debug)]
pub struct AffineTerm {
    pub theta: Expr,
    pub matrix: Array2<f64>,
    pub lift: Array1<f64>,
}

/// Affine decomposition `A(mu) = sum Theta_i(mu) A_i` of the non-advective
/// system, plus the parameter-independent load vector.
#[derive(Debug)]
pub struct AffineOperator {
    pub terms: Vec<AffineTerm>,
    pub rhs_base: Array1<f64>,
    pub n: usize,
}

impl AffineOperator {
    pub fn q(&self) -> usize {
        self.terms.len()
    }

    pub fn theta_values(&self, mu: &[f64]) -> Result<Vec<f64>> {
        self.terms.iter().map(|t| t.theta.eval_mu(mu)).collect()
    }

    pub fn assemble_matrix(&self, mu: &[f64]) -> Result<Array2<f64>> {
        let thetas = self.theta_values(mu)?;
        let mut out = Array2::zeros((self.n, self.n));
        for (theta, term) in thetas.iter().zip(&self.terms) {
            out.scaled_add(*theta, &term.matrix);
        }
        Ok(out)
    }

    pub fn assemble_rhs(&self, mu: &[f64]) -> Result<Array1<f64>> {
        let thetas = self.theta_values(mu)?;
        let mut out = self.rhs_base.clone();
        for (theta, term) in thetas.iter().zip(&self.terms) {
            out.scaled_add(*theta, &term.lift);
        }
        Ok(out)
    }
}

/// Drop the pressure-pin row and column so affine matrices act on the bare
/// unknown vector.
fn core_of(op: AssembledOperator, layout: &SystemLayout) -> (Array2<f64>, Array1<f64>) {
    let n = layout.n_unknowns();
    (
        op.matrix.slice(s![..n, ..n]).to_owned(),
        op.lift.slice(s![..n]).to_owned(),
    )
}

/// Built-in viscosity decomposition: Theta_1(nu) = nu with the viscous
/// blocks, Theta_2 = 1 with the pressure-velocity couplings. Advection is
/// excluded (handled by the per-mode tensor).
pub fn affine_decompose_viscosity(
    disc: &Discretization,
    layout: &SystemLayout,
    params: &FlowParameters,
    bc: &BoundaryConditions,
) -> Result<AffineOperator> {
    let dirichlet = layout.dirichlet_values(disc, bc);
    let (visc, visc_lift) = core_of(
        assemble_part(disc, layout, &dirichlet, OperatorPart::Viscous)?,
        layout,
    );
    let (div, div_lift) = core_of(
        assemble_part(disc, layout, &dirichlet, OperatorPart::Divergence)?,
        layout,
    );
    let rhs_base = load_vector(disc, layout, params, bc)
        .slice(s![..layout.n_unknowns()])
        .to_owned();
    Ok(AffineOperator {
        n: layout.n_unknowns(),
        terms: vec![
            AffineTerm {
                theta: Expr::parse("mu0")?,
                matrix: visc,
                lift: visc_lift,
            },
            AffineTerm {
                theta: Expr::parse("1")?,
                matrix: div,
                lift: div_lift,
            },
        ],
        rhs_base,
    })
}

/// A user-specified matrix source for `affine_decompose_user`.
pub enum MatrixSource {
    /// The built-in viscous blocks.
    Viscous,
    /// The built-in pressure-velocity couplings.
    Divergence,
    /// An explicit matrix with its Dirichlet lift vector.
    Matrix(Array2<f64>, Array1<f64>),
}

/// Affine decomposition from user configuration: Q coefficient expressions
/// over `mu0, mu1, ...` paired with Q matrix sources.
pub fn affine_decompose_user(
    disc: &Discretization,
    layout: &SystemLayout,
    params: &FlowParameters,
    bc: &BoundaryConditions,
    thetas: &[String],
    sources: Vec<MatrixSource>,
) -> Result<AffineOperator> {
    if thetas.len() != sources.len() {
        return Err(Error::invalid(format!(
            "{} coefficient expressions but {} matrix sources",
            thetas.len(),
            sources.len()
        )));
    }
    if thetas.is_empty() {
        return Err(Error::invalid("affine specification needs Q >= 1 terms"));
    }
    let dirichlet = layout.dirichlet_values(disc, bc);
    let mut n: Option<usize> = None;
    let mut terms = Vec::with_capacity(thetas.len());
    for (expr_src, source) in thetas.iter().zip(sources) {
        let theta = Expr::parse(expr_src)?;
        let (matrix, lift) = match source {
            MatrixSource::Viscous => core_of(
                assemble_part(disc, layout, &dirichlet, OperatorPart::Viscous)?,
                layout,
            ),
            MatrixSource::Divergence => core_of(
                assemble_part(disc, layout, &dirichlet, OperatorPart::Divergence)?,
                layout,
            ),
            MatrixSource::Matrix(m, l) => {
                if m.nrows() != m.ncols() || l.len() != m.nrows() {
                    return Err(Error::DimensionMismatch(
                        "affine matrix must be square with a matching lift vector".into(),
                    ));
                }
                (m, l)
            }
        };
        match n {
            None => n = Some(matrix.nrows()),
            Some(expect) if expect != matrix.nrows() => {
                return Err(Error::DimensionMismatch(format!(
                    "affine term dimension {} differs from {}",
                    matrix.nrows(),
                    expect
                )))
            }
            _ => {}
        }
        terms.push(AffineTerm {
            theta,
            matrix,
            lift,
        });
    }
    let n = n.unwrap();
    let rhs_base = if n == layout.n_unknowns() {
        load_vector(disc, layout, params, bc)
            .slice(s![..n])
            .to_owned()
    } else {
        Array1::zeros(n)
    };
    Ok(AffineOperator {
        terms,
        rhs_base,
        n,
    })
}

/// Offline-projected reduced model. Every field the online solve touches is
/// N-sized; `lifting` and `basis` exist only for the final lift back to the
/// full space.
pub struct ReducedModel {
    /// Q reduced affine matrices with their coefficient expressions.
    pub reduced_affine: Vec<(Expr, Array2<f64>)>,
    /// Q reduced RHS vectors: V^T (lift_i - A_i x_L).
    pub reduced_affine_rhs: Vec<Array1<f64>>,
    /// V^T rhs_base.
    pub reduced_rhs_base: Array1<f64>,
    /// Per-mode reduced advection matrices V^T N(phi_j) V.
    pub advection_modes: Vec<Array2<f64>>,
    /// Reduced advection matrix of the lifting field.
    pub advection_lifting: Array2<f64>,
    /// Per-mode reduced advection RHS: V^T (lift_N(phi_j) - N(phi_j) x_L).
    pub advection_rhs_modes: Vec<Array1<f64>>,
    /// Lifting-field advection RHS: V^T (lift_N(u_L) - N(u_L) x_L).
    pub advection_rhs_lifting: Array1<f64>,
    pub lifting: Array1<f64>,
    pub basis: PodBasis,
    /// Projected snapshot coordinates (N x M) and their parameters, kept as
    /// online warm-start fallbacks.
    pub snapshot_params: Vec<f64>,
    pub snapshot_coords: Array2<f64>,
    pub param_domain: (f64, f64),
    pub basis_checksum: String,
}

impl ReducedModel {
    pub fn n_modes(&self) -> usize {
        self.reduced_affine
            .first()
            .map(|(_, m)| m.nrows())
            .unwrap_or(0)
    }

    /// Restrict to the leading `n` modes by slicing the cached projections;
    /// nothing is re-assembled.
    pub fn truncate(&self, n: usize) -> Result<ReducedModel> {
        let full = self.n_modes();
        if n > full {
            return Err(Error::invalid(format!(
                "requested {n} modes but only {full} are available"
            )));
        }
        Ok(ReducedModel {
            reduced_affine: self
                .reduced_affine
                .iter()
                .map(|(e, m)| (e.clone(), m.slice(s![..n, ..n]).to_owned()))
                .collect(),
            reduced_affine_rhs: self
                .reduced_affine_rhs
                .iter()
                .map(|v| v.slice(s![..n]).to_owned())
                .collect(),
            reduced_rhs_base: self.reduced_rhs_base.slice(s![..n]).to_owned(),
            advection_modes: self.advection_modes[..n]
                .iter()
                .map(|m| m.slice(s![..n, ..n]).to_owned())
                .collect(),
            advection_lifting: self.advection_lifting.slice(s![..n, ..n]).to_owned(),
            advection_rhs_modes: self.advection_rhs_modes[..n]
                .iter()
                .map(|v| v.slice(s![..n]).to_owned())
                .collect(),
            advection_rhs_lifting: self.advection_rhs_lifting.slice(s![..n]).to_owned(),
            lifting: self.lifting.clone(),
            basis: PodBasis {
                modes_local: self.basis.modes_local.slice(s![.., ..n]).to_owned(),
                modes_physical: self.basis.modes_physical.slice(s![.., ..n]).to_owned(),
                singular_values: self.basis.singular_values.clone(),
                energy_threshold: self.basis.energy_threshold,
            },
            snapshot_params: self.snapshot_params.clone(),
            snapshot_coords: self.snapshot_coords.slice(s![..n, ..]).to_owned(),
            param_domain: self.param_domain,
            basis_checksum: self.basis_checksum.clone(),
        })
    }

    /// Warm-start coordinates: the projected snapshot nearest in parameter.
    pub fn nearest_snapshot_coords(&self, mu0: f64) -> Option<Array1<f64>> {
        let idx = self
            .snapshot_params
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - mu0).abs().total_cmp(&(b.1 - mu0).abs()))?
            .0;
        Some(self.snapshot_coords.column(idx).to_owned())
    }

    /// Assemble the reduced Oseen operator and RHS at coefficients `thetas`
    /// and advection state `a`. Everything here is N-sized.
    pub fn assemble_reduced(
        &self,
        thetas: &[f64],
        a: &Array1<f64>,
    ) -> (Array2<f64>, Array1<f64>) {
        let n = self.n_modes();
        let mut mat = Array2::zeros((n, n));
        let mut rhs = self.reduced_rhs_base.clone();
        for ((_, m), (theta, r)) in self
            .reduced_affine
            .iter()
            .zip(thetas.iter().zip(&self.reduced_affine_rhs))
        {
            mat.scaled_add(*theta, m);
            rhs.scaled_add(*theta, r);
        }
        mat += &self.advection_lifting;
        rhs += &self.advection_rhs_lifting;
        for (j, (t_j, s_j)) in self
            .advection_modes
            .iter()
            .zip(&self.advection_rhs_modes)
            .enumerate()
        {
            mat.scaled_add(a[j], t_j);
            rhs.scaled_add(a[j], s_j);
        }
        (mat, rhs)
    }

    /// Lift reduced coordinates to the full unknown vector.
    pub fn lift(&self, x_r: &Array1<f64>) -> Result<Array1<f64>> {
        crate::pod::lift(&self.basis, x_r, &self.lifting)
    }
}

/// Build the reduced model: project the affine terms, the load, and the
/// advection submatrices of every basis function plus the lifting field.
pub fn offline_build(
    disc: &Discretization,
    layout: &SystemLayout,
    bc: &BoundaryConditions,
    affine: &AffineOperator,
    basis: &PodBasis,
    lifting: &Array1<f64>,
    snapshot_params: &[f64],
    snapshots_lifted: &Array2<f64>,
) -> Result<ReducedModel> {
    let n_full = layout.n_unknowns();
    if affine.n != n_full || basis.n_full() != n_full || lifting.len() != n_full {
        return Err(Error::DimensionMismatch(
            "affine terms, basis and lifting must share the layout dimension".into(),
        ));
    }
    let v = &basis.modes_local;
    let n = basis.n_modes();

    let mut reduced_affine = Vec::with_capacity(affine.q());
    let mut reduced_affine_rhs = Vec::with_capacity(affine.q());
    for term in &affine.terms {
        reduced_affine.push((term.theta.clone(), v.t().dot(&term.matrix.dot(v))));
        reduced_affine_rhs.push(v.t().dot(&(&term.lift - &term.matrix.dot(lifting))));
    }
    let reduced_rhs_base = v.t().dot(&affine.rhs_base);

    // Advection of the lifting field (with its true Dirichlet data) and of
    // each mode (homogeneous data).
    let dirichlet = layout.dirichlet_values(disc, bc);
    let lifting_vel = layout.velocity_field(disc, lifting, &dirichlet);
    let lifting_phys = disc.velocity_to_physical(&lifting_vel)?;
    let project_advection = |field: &FieldState| -> Result<(Array2<f64>, Array1<f64>)> {
        let op = assemble_part(disc, layout, &dirichlet, OperatorPart::Advection(field))?;
        let (m, l) = core_of(op, layout);
        Ok((
            v.t().dot(&m.dot(v)),
            v.t().dot(&(&l - &m.dot(lifting))),
        ))
    };
    let (advection_lifting, advection_rhs_lifting) = project_advection(&lifting_phys)?;
    let mut advection_modes = Vec::with_capacity(n);
    let mut advection_rhs_modes = Vec::with_capacity(n);
    for j in 0..n {
        let phys = FieldState {
            level: DofLevel::Physical,
            space: FieldSpace::Velocity,
            components: 2,
            values: basis.modes_physical.column(j).to_owned(),
        };
        let (t_j, s_j) = project_advection(&phys)?;
        advection_modes.push(t_j);
        advection_rhs_modes.push(s_j);
    }

    let snapshot_coords = v.t().dot(snapshots_lifted);
    let (lo, hi) = snapshot_params
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            (lo.min(p), hi.max(p))
        });

    let mut hasher = Sha256::new();
    for value in basis.modes_local.iter() {
        hasher.update(value.to_le_bytes());
    }
    let basis_checksum = hex_string(&hasher.finalize());

    Ok(ReducedModel {
        reduced_affine,
        reduced_affine_rhs,
        reduced_rhs_base,
        advection_modes,
        advection_lifting,
        advection_rhs_modes,
        advection_rhs_lifting,
        lifting: lifting.clone(),
        basis: basis.clone(),
        snapshot_params: snapshot_params.to_vec(),
        snapshot_coords,
        param_domain: (lo, hi),
        basis_checksum,
    })
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Result of one online solve.
#[derive(Debug, Clone)]
pub struct OnlineSolution {
    pub coords: Array1<f64>,
    pub iterations: usize,
    pub history: Vec<f64>,
}

/// Reduced Oseen iteration at parameter `mu`. No full-order-sized object is
/// touched; the caller lifts the coordinates when a full field is needed.
pub fn online_solve(
    model: &ReducedModel,
    mu: &[f64],
    tol: f64,
    max_iter: usize,
    warm_start: Option<&Array1<f64>>,
) -> Result<OnlineSolution> {
    if tol <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let (lo, hi) = model.param_domain;
    let slack = 1e-9 * (1.0 + hi.abs());
    if mu.is_empty() || mu[0] < lo - slack || mu[0] > hi + slack {
        return Err(Error::invalid(format!(
            "parameter {:?} outside the declared domain [{lo}, {hi}]",
            mu
        )));
    }
    let n = model.n_modes();
    if n == 0 {
        return Ok(OnlineSolution {
            coords: Array1::zeros(0),
            iterations: 0,
            history: Vec::new(),
        });
    }
    let thetas: Vec<f64> = model
        .reduced_affine
        .iter()
        .map(|(e, _)| e.eval_mu(mu))
        .collect::<Result<_>>()?;
    let mut a = match warm_start {
        Some(w) if w.len() == n => w.clone(),
        Some(_) => return Err(Error::DimensionMismatch("warm start has wrong length".into())),
        None => model
            .nearest_snapshot_coords(mu[0])
            .unwrap_or_else(|| Array1::zeros(n)),
    };
    let mut history = Vec::new();
    for k in 1..=max_iter {
        let (mat, rhs) = model.assemble_reduced(&thetas, &a);
        let x = mat.solve(&rhs).map_err(|e| {
            Error::Solve(format!(
                "reduced system singular at mu = {:?} with N = {n}: {e}",
                mu
            ))
        })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite reduced iterate at mu = {:?}",
                mu
            )));
        }
        let norm: f64 = x.dot(&x).sqrt();
        let diff = (&x - &a).dot(&(&x - &a)).sqrt();
        let rel = diff / norm.max(f64::MIN_POSITIVE);
        history.push(rel);
        if rel < tol {
            return Ok(OnlineSolution {
                coords: x,
                iterations: k,
                history,
            });
        }
        a = x;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// One row of the error table.
#[derive(Debug, Clone)]
pub struct ErrorRow {
    pub n_modes: usize,
    pub mean_error: f64,
    pub max_error: f64,
    pub online_seconds: f64,
}

/// Relative L2 velocity error of a lifted reduced solution against a
/// full-order solution.
pub fn velocity_error(
    disc: &Discretization,
    layout: &SystemLayout,
    bc: &BoundaryConditions,
    full_unknowns: &Array1<f64>,
    reference: &SteadySolution,
) -> Result<f64> {
    let dirichlet = layout.dirichlet_values(disc, bc);
    let v = layout.velocity_field(disc, full_unknowns, &dirichlet);
    let vp = disc.velocity_to_physical(&v)?;
    let rp = disc.velocity_to_physical(&reference.velocity)?;
    let mut diff = vp.clone();
    diff.values = &vp.values - &rp.values;
    Ok(disc.l2_norm(&diff)? / disc.l2_norm(&rp)?.max(f64::MIN_POSITIVE))
}

/// Sweep basis sizes: truncate the cached projections, solve at every
/// validation parameter, and report mean/max relative velocity errors with
/// online wall time.
#[allow(clippy::too_many_arguments)]
pub fn error_sweep(
    disc: &Discretization,
    layout: &SystemLayout,
    bc: &BoundaryConditions,
    model: &ReducedModel,
    validation: &[SteadySolution],
    basis_sizes: &[usize],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<ErrorRow>> {
    if validation.is_empty() {
        return Err(Error::invalid("error sweep needs validation solutions"));
    }
    let mut rows = Vec::with_capacity(basis_sizes.len());
    for &n in basis_sizes {
        let truncated = model.truncate(n)?;
        let mut errors = Vec::with_capacity(validation.len());
        let mut warm: Option<Array1<f64>> = None;
        let mut online = 0.0;
        for sol in validation {
            let t0 = std::time::Instant::now();
            let result = online_solve(&truncated, &[sol.nu], tol, max_iter, warm.as_ref())?;
            online += t0.elapsed().as_secs_f64();
            warm = Some(result.coords.clone());
            let lifted = truncated.lift(&result.coords)?;
            errors.push(velocity_error(disc, layout, bc, &lifted, sol)?);
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let max = errors.iter().copied().fold(0.0, f64::max);
        rows.push(ErrorRow {
            n_modes: n,
            mean_error: mean,
            max_error: max,
            online_seconds: online,
        });
    }
    Ok(rows)
}
