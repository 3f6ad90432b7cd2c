//! Miniature 1D discontinuous-Galerkin advection-diffusion model.
//!
//! Periodic domain [0, 1], K cells, nodal GLL basis of degree P per cell.
//! The semi-discrete system is du/dt = L u with L built from the weak form:
//! upwind or central interface fluxes for advection, and a local-DG
//! (two-pass gradient with central fluxes) discretization of diffusion.
//! Trajectories are generated with the classical fourth-order Runge-Kutta
//! scheme, matching the reduced-model integrator downstream.

use crate::element::ReferenceElement;
use crate::error::{Error, Result};
use ndarray::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluxScheme {
    Upwind,
    Central,
}

/// Dense semi-discrete DG operator du/dt = L u on the periodic unit interval.
#[derive(Debug, Clone)]
pub struct DgOperator {
    pub matrix: Array2<f64>,
    pub cells: usize,
    pub order: usize,
    pub speed: f64,
    pub diffusivity: f64,
    pub flux: FluxScheme,
    /// Diagonal of the global mass matrix (GLL collocation).
    pub mass: Array1<f64>,
}

impl DgOperator {
    pub fn n_dof(&self) -> usize {
        self.cells * (self.order + 1)
    }

    /// Stable explicit step size: 0.5 h / ((2P+1)|c|) with a diffusive cap.
    pub fn cfl_dt(&self) -> f64 {
        let h = 1.0 / self.cells as f64;
        let p = self.order as f64;
        let mut dt = f64::INFINITY;
        if self.speed.abs() > 0.0 {
            dt = dt.min(0.5 * h / ((2.0 * p + 1.0) * self.speed.abs()));
        }
        if self.diffusivity > 0.0 {
            dt = dt.min(0.25 * h * h / ((2.0 * p + 1.0).powi(2) * self.diffusivity));
        }
        if !dt.is_finite() {
            // Neither transport nor diffusion: any step works.
            dt = h;
        }
        dt
    }

    /// Nodal coordinates of every DOF.
    pub fn nodes(&self) -> Array1<f64> {
        let re = ReferenceElement::new(self.order).expect("order checked in constructor");
        let h = 1.0 / self.cells as f64;
        let n1 = self.order + 1;
        let mut x = Array1::zeros(self.cells * n1);
        for k in 0..self.cells {
            for i in 0..n1 {
                x[k * n1 + i] = h * (k as f64 + 0.5 * (re.nodes[i] + 1.0));
            }
        }
        x
    }

    /// Total integral of a state vector (mass functional).
    pub fn total_mass(&self, u: &Array1<f64>) -> f64 {
        self.mass.dot(u)
    }
}

/// Build the periodic DG operator.
pub fn build_dg_operator(
    cells: usize,
    order: usize,
    speed: f64,
    diffusivity: f64,
    flux: FluxScheme,
) -> Result<DgOperator> {
    if cells < 2 {
        return Err(Error::invalid("periodic DG needs at least 2 cells"));
    }
    if order < 1 {
        return Err(Error::invalid("DG order must be >= 1"));
    }
    if diffusivity < 0.0 {
        return Err(Error::invalid("diffusivity must be nonnegative"));
    }
    let re = ReferenceElement::new(order)?;
    let n1 = order + 1;
    let n = cells * n1;
    let h = 1.0 / cells as f64;

    // Global diagonal mass and the weak-derivative building blocks.
    let mut mass = Array1::zeros(n);
    for k in 0..cells {
        for i in 0..n1 {
            mass[k * n1 + i] = 0.5 * h * re.weights[i];
        }
    }
    // S^T with S[i][j] = integral phi_i phi_j' (reference scale cancels the
    // h factors: integral over cell of phi_i' v = sum_q w_q D[q][i] v_q).
    let dtw = {
        let mut m = Array2::zeros((n1, n1));
        for i in 0..n1 {
            for q in 0..n1 {
                m[(i, q)] = re.diff[(q, i)] * re.weights[q];
            }
        }
        m
    };

    // Weak derivative with a chosen interface-value rule:
    //   (M w)_cell = faces(v_hat) - DtW v_cell
    // acting on the global vector with periodic wrap.
    let weak_derivative = |interface: &dyn Fn(f64, f64) -> f64, u: &Array1<f64>| -> Array1<f64> {
        let mut out = Array1::zeros(n);
        for k in 0..cells {
            let left_cell = (k + cells - 1) % cells;
            let right_cell = (k + 1) % cells;
            let u_cell = u.slice(s![k * n1..(k + 1) * n1]);
            // Volume part.
            for i in 0..n1 {
                let mut acc = 0.0;
                for q in 0..n1 {
                    acc += dtw[(i, q)] * u_cell[q];
                }
                out[k * n1 + i] -= acc;
            }
            // Interface values.
            let v_left = interface(u[left_cell * n1 + n1 - 1], u[k * n1]);
            let v_right = interface(u[k * n1 + n1 - 1], u[right_cell * n1]);
            out[k * n1] -= v_left;
            out[k * n1 + n1 - 1] += v_right;
        }
        for i in 0..n {
            out[i] /= mass[i];
        }
        out
    };

    let central = |minus: f64, plus: f64| 0.5 * (minus + plus);
    let apply = |u: &Array1<f64>| -> Array1<f64> {
        let mut du = Array1::zeros(n);
        if speed != 0.0 {
            // Advective flux f = c u with upwind or central interface states.
            let interface: Box<dyn Fn(f64, f64) -> f64> = match flux {
                FluxScheme::Upwind => Box::new(move |minus: f64, plus: f64| {
                    speed * if speed >= 0.0 { minus } else { plus }
                }),
                FluxScheme::Central => Box::new(move |minus: f64, plus: f64| {
                    speed * central(minus, plus)
                }),
            };
            let div = weak_derivative(&*interface, u);
            du -= &div;
        }
        if diffusivity > 0.0 {
            // Local DG: q = u_x then (nu q)_x, central interface states twice.
            let q = weak_derivative(&|a, b| central(a, b), u);
            let lap = weak_derivative(&|a, b| central(a, b), &q);
            du.scaled_add(diffusivity, &lap);
        }
        du
    };

    let mut matrix = Array2::zeros((n, n));
    let mut e = Array1::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        matrix.column_mut(j).assign(&apply(&e));
        e[j] = 0.0;
    }
    Ok(DgOperator {
        matrix,
        cells,
        order,
        speed,
        diffusivity,
        flux,
        mass,
    })
}

/// Uniform-step trajectory of a linear system.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    /// One state per column, including the initial state.
    pub states: Array2<f64>,
}

impl Trajectory {
    pub fn times(&self) -> Array1<f64> {
        Array1::from_iter((0..self.states.ncols()).map(|k| self.t0 + self.dt * k as f64))
    }

    pub fn n_snapshots(&self) -> usize {
        self.states.ncols()
    }
}

/// Classical four-stage Runge-Kutta on du/dt = L u.
///
/// Aborts with a diagnostic when the state norm grows by 1000x over the
/// initial state (instability detector).
pub fn rk4_run(
    matrix: &Array2<f64>,
    u0: &Array1<f64>,
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    if matrix.nrows() != matrix.ncols() || matrix.nrows() != u0.len() {
        return Err(Error::DimensionMismatch(
            "RK4 needs a square operator matching the state length".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("time step must be positive"));
    }
    let n = u0.len();
    let mut states = Array2::zeros((n, steps + 1));
    states.column_mut(0).assign(u0);
    let norm0 = u0.dot(u0).sqrt().max(f64::MIN_POSITIVE);
    let mut u = u0.clone();
    for step in 0..steps {
        let k1 = matrix.dot(&u);
        let k2 = matrix.dot(&(&u + &(0.5 * dt * &k1)));
        let k3 = matrix.dot(&(&u + &(0.5 * dt * &k2)));
        let k4 = matrix.dot(&(&u + &(dt * &k3)));
        u = &u + &((dt / 6.0) * (&k1 + &(2.0 * &k2) + &(2.0 * &k3) + &k4));
        let norm = u.dot(&u).sqrt();
        if !norm.is_finite() || norm > 1e3 * norm0 {
            return Err(Error::Diverged(format!(
                "RK4 state norm {norm:.3e} exceeded 1000x the initial norm at step {}",
                step + 1
            )));
        }
        states.column_mut(step + 1).assign(&u);
    }
    Ok(Trajectory {
        t0: 0.0,
        dt,
        states,
    })
}

/// Convenience: run the DG operator from a nodal initial condition.
pub fn rk4_run_operator(
    op: &DgOperator,
    u0: &Array1<f64>,
    dt: f64,
    steps: usize,
) -> Result<Trajectory> {
    rk4_run(&op.matrix, u0, dt, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray_linalg::Eig;
    use num_complex::Complex64;

    #[test]
    fn invalid_inputs_rejected() {
        assert!(build_dg_operator(1, 3, 1.0, 0.0, FluxScheme::Upwind).is_err());
        assert!(build_dg_operator(4, 0, 1.0, 0.0, FluxScheme::Upwind).is_err());
        assert!(build_dg_operator(4, 2, 1.0, -0.1, FluxScheme::Upwind).is_err());
    }

    #[test]
    fn constant_state_is_in_the_kernel() {
        for flux in [FluxScheme::Upwind, FluxScheme::Central] {
            let op = build_dg_operator(6, 3, 1.0, 0.05, flux).unwrap();
            let ones = Array1::ones(op.n_dof());
            let du = op.matrix.dot(&ones);
            let max = du.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(max < 1e-12, "{flux:?}: L*1 = {max:.3e}");
        }
    }

    #[test]
    fn upwind_spectrum_in_left_half_plane() {
        let op = build_dg_operator(8, 4, 1.0, 0.0, FluxScheme::Upwind).unwrap();
        let (eigs, _): (Array1<Complex64>, _) = op.matrix.eig().unwrap();
        let max_re = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        assert!(max_re <= 1e-10, "max Re = {max_re:.3e}");
    }

    #[test]
    fn diffusion_operator_symmetric_negative_semidefinite() {
        // Symmetry holds in the mass inner product; check the
        // mass-symmetrized similar operator M^{1/2} L M^{-1/2}.
        let op = build_dg_operator(5, 3, 0.0, 0.3, FluxScheme::Upwind).unwrap();
        let n = op.n_dof();
        let mut sym = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                sym[(i, j)] = op.mass[i].sqrt() * op.matrix[(i, j)] / op.mass[j].sqrt();
            }
        }
        let asym = (&sym - &sym.t()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        let scale = sym.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(asym <= 1e-10 * scale, "asymmetry {asym:.3e}");
        let (eigs, _): (Array1<Complex64>, _) = sym.eig().unwrap();
        let max_re = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        assert!(max_re <= 1e-10 * scale, "max eigenvalue {max_re:.3e}");
    }

    #[test]
    fn rk4_single_step_matches_exponential() {
        let matrix = array![[-1.0]];
        let traj = rk4_run(&matrix, &array![1.0], 0.1, 1).unwrap();
        let got = traj.states[(0, 1)];
        assert!((got - 0.90483750).abs() < 1e-8);
        assert!((got - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn zero_operator_keeps_trajectory_constant() {
        let matrix = Array2::zeros((3, 3));
        let u0 = array![1.0, -2.0, 3.0];
        let traj = rk4_run(&matrix, &u0, 0.5, 7).unwrap();
        for col in traj.states.columns() {
            assert_eq!(col.to_owned(), u0);
        }
        let times = traj.times();
        assert_eq!(times.len(), 8);
        assert!((times[7] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn instability_detector_aborts() {
        let matrix = array![[10.0]];
        let err = rk4_run(&matrix, &array![1.0], 1.0, 100).unwrap_err();
        assert!(err.to_string().contains("1000x"));
    }

    fn advected_sine_error(op: &DgOperator, dt_scale: f64) -> f64 {
        use std::f64::consts::PI;
        let x = op.nodes();
        let u0 = x.mapv(|x| (2.0 * PI * x).sin());
        let dt = op.cfl_dt() * dt_scale;
        let steps = (1.0 / dt).ceil() as usize;
        let dt = 1.0 / steps as f64;
        let traj = rk4_run_operator(op, &u0, dt, steps).unwrap();
        let u_final = traj.states.column(steps).to_owned();
        let diff = &u_final - &u0;
        (op.mass.dot(&diff.mapv(|v| v * v)) / op.mass.dot(&u0.mapv(|v| v * v))).sqrt()
    }

    #[test]
    fn one_period_advection_error_small() {
        let op = build_dg_operator(8, 6, 1.0, 0.0, FluxScheme::Upwind).unwrap();
        let err = advected_sine_error(&op, 1.0);
        assert!(err < 1e-4, "one-period error {err:.3e}");
    }

    #[test]
    fn rk4_order_factor_between_12_and_20() {
        // Temporal error isolated against a reference run at dt/16 on the
        // same spatial operator.
        let op = build_dg_operator(4, 5, 1.0, 0.0, FluxScheme::Upwind).unwrap();
        let x = op.nodes();
        let u0 = x.mapv(|x| (2.0 * std::f64::consts::PI * x).sin());
        let t_final = 0.4;
        let run = |steps: usize| -> Array1<f64> {
            let traj = rk4_run_operator(&op, &u0, t_final / steps as f64, steps).unwrap();
            traj.states.column(steps).to_owned()
        };
        let base_steps = (t_final / op.cfl_dt()).ceil() as usize;
        let reference = run(base_steps * 16);
        let err = |steps: usize| {
            let d = &run(steps) - &reference;
            d.dot(&d).sqrt()
        };
        let e1 = err(base_steps);
        let e2 = err(base_steps * 2);
        let factor = e1 / e2;
        assert!(
            (12.0..=20.0).contains(&factor),
            "convergence factor {factor:.2} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    #[test]
    fn spectral_accuracy_in_order() {
        let mut errors = Vec::new();
        for order in [2, 4, 6] {
            let op = build_dg_operator(4, order, 1.0, 0.0, FluxScheme::Upwind).unwrap();
            errors.push(advected_sine_error(&op, 0.2));
        }
        assert!(
            errors[1] < 0.2 * errors[0] && errors[2] < 0.2 * errors[1],
            "no spectral decay: {errors:?}"
        );
    }

    #[test]
    fn mass_conserved_over_period() {
        let op = build_dg_operator(6, 4, 1.0, 0.0, FluxScheme::Upwind).unwrap();
        let x = op.nodes();
        let u0 = x.mapv(|x| 0.7 + (2.0 * std::f64::consts::PI * x).cos());
        let dt = op.cfl_dt();
        let steps = (1.0 / dt).ceil() as usize;
        let traj = rk4_run_operator(&op, &u0, 1.0 / steps as f64, steps).unwrap();
        let m0 = op.total_mass(&u0);
        for k in 0..=steps {
            let m = op.total_mass(&traj.states.column(k).to_owned());
            assert!((m - m0).abs() <= 1e-10 * m0.abs().max(1.0), "step {k}");
        }
    }

    #[test]
    fn cfl_respects_both_limits() {
        let adv = build_dg_operator(8, 4, 2.0, 0.0, FluxScheme::Upwind).unwrap();
        assert!((adv.cfl_dt() - 0.5 * 0.125 / (9.0 * 2.0)).abs() < 1e-15);
        let diff = build_dg_operator(8, 4, 0.0, 0.5, FluxScheme::Central).unwrap();
        assert!(diff.cfl_dt() < adv.cfl_dt());
    }
}
