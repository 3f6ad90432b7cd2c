//! Steady incompressible full-order solver.
//!
//! Each fixed-point step freezes the convective velocity at the previous
//! iterate and solves the linear Oseen problem
//!
//! ```text
//!   -nu Lap(u) + (u_k . grad) u + grad p = f,   div u = 0
//! ```
//!
//! discretized as the saddle-point block system
//!
//! ```text
//!   [ A       -D_bnd^T   B     ] [ v_bnd ]   [ f_bnd ]
//!   [ -D_bnd   0         -D_int] [ p     ] = [ 0     ]
//!   [ B~       -D_int^T   C    ] [ v_int ]   [ f_int ]
//! ```
//!
//! where velocity DOFs are split into element-boundary and element-interior
//! unknowns. Dirichlet data is lifted into the load vectors. The system is
//! solved monolithically by dense LU; the block structure stays available
//! through accessors.

use crate::error::{Error, Result};
use crate::field::{Discretization, DofLevel, FieldSpace, FieldState};
use crate::mesh::BoundaryTag;
use ndarray::prelude::*;
use ndarray_linalg::{Norm, OperationNorm, Solve};
use std::sync::Arc;

pub type VectorFn = Arc<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>;

/// Flow parameters: kinematic viscosity, reference scales and body force.
#[derive(Clone)]
pub struct FlowParameters {
    pub nu: f64,
    pub velocity_scale: f64,
    pub length_scale: f64,
    pub body_force: Option<VectorFn>,
}

impl FlowParameters {
    pub fn new(nu: f64) -> Self {
        Self {
            nu,
            velocity_scale: 1.0,
            length_scale: 1.0,
            body_force: None,
        }
    }

    pub fn with_body_force(mut self, f: VectorFn) -> Self {
        self.body_force = Some(f);
        self
    }

    pub fn reynolds(&self) -> Result<f64> {
        reynolds(self.velocity_scale, self.length_scale, self.nu)
    }
}

/// Re = U L / nu.
pub fn reynolds(velocity_scale: f64, length_scale: f64, nu: f64) -> Result<f64> {
    if velocity_scale <= 0.0 || length_scale <= 0.0 || nu <= 0.0 {
        return Err(Error::invalid(
            "Reynolds number requires positive U, L and nu",
        ));
    }
    Ok(velocity_scale * length_scale / nu)
}

/// Boundary data: Dirichlet velocity trace, Neumann flux trace, and an
/// optional initial velocity guess for the fixed-point loop.
#[derive(Clone)]
pub struct BoundaryConditions {
    pub dirichlet: VectorFn,
    pub neumann: VectorFn,
    pub initial_guess: Option<FieldState>,
}

impl BoundaryConditions {
    pub fn dirichlet_only(d: VectorFn) -> Self {
        Self {
            dirichlet: d,
            neumann: Arc::new(|_, _| [0.0, 0.0]),
            initial_guess: None,
        }
    }

    /// The study channel: parabolic inflow 4 y (1 - y) imposed through the
    /// global Dirichlet trace (it vanishes on the walls), natural outflow.
    pub fn channel() -> Self {
        Self::dirichlet_only(Arc::new(|_, y| [4.0 * y * (1.0 - y), 0.0]))
    }

    pub fn homogeneous() -> Self {
        Self::dirichlet_only(Arc::new(|_, _| [0.0, 0.0]))
    }
}

/// Unknown layout of the saddle system: `[v_bnd | p | v_int]` with the
/// velocity component blocks `[u_x ..., u_y ...]` inside each velocity
/// section. Dirichlet nodes are excluded from the unknowns.
#[derive(Debug, Clone)]
pub struct SystemLayout {
    /// Free element-boundary scalar nodes (global ids).
    pub free_bnd_nodes: Vec<usize>,
    /// Element-interior scalar nodes (global ids).
    pub interior_nodes: Vec<usize>,
    /// Dirichlet scalar nodes (global ids).
    pub dirichlet_nodes: Vec<usize>,
    bnd_slot: Vec<Option<usize>>,
    int_slot: Vec<Option<usize>>,
    dir_slot: Vec<Option<usize>>,
    pub n_pressure: usize,
    pub pressure_per_element: usize,
    pub pinned: bool,
}

impl SystemLayout {
    pub fn new(disc: &Discretization) -> Result<Self> {
        let numbering = &disc.numbering;
        let has_dirichlet = disc
            .mesh
            .boundary_tags
            .values()
            .any(|&t| t == BoundaryTag::Dirichlet);
        if !has_dirichlet {
            return Err(Error::invalid(
                "system needs at least one Dirichlet velocity edge",
            ));
        }
        let n = numbering.n_global;
        let mut free_bnd_nodes = Vec::new();
        let mut interior_nodes = Vec::new();
        let mut dirichlet_nodes = Vec::new();
        let mut bnd_slot = vec![None; n];
        let mut int_slot = vec![None; n];
        let mut dir_slot = vec![None; n];
        for g in 0..n {
            if numbering.is_dirichlet[g] {
                dir_slot[g] = Some(dirichlet_nodes.len());
                dirichlet_nodes.push(g);
            } else if numbering.is_interior[g] {
                int_slot[g] = Some(interior_nodes.len());
                interior_nodes.push(g);
            } else {
                bnd_slot[g] = Some(free_bnd_nodes.len());
                free_bnd_nodes.push(g);
            }
        }
        Ok(Self {
            free_bnd_nodes,
            interior_nodes,
            dirichlet_nodes,
            bnd_slot,
            int_slot,
            dir_slot,
            n_pressure: disc.num_elements() * disc.pressure.n_per_element,
            pressure_per_element: disc.pressure.n_per_element,
            pinned: disc.mesh.is_pure_dirichlet(),
        })
    }

    pub fn n_bnd(&self) -> usize {
        2 * self.free_bnd_nodes.len()
    }

    pub fn n_int(&self) -> usize {
        2 * self.interior_nodes.len()
    }

    /// Unknown count without the pressure-pin multiplier.
    pub fn n_unknowns(&self) -> usize {
        self.n_bnd() + self.n_pressure + self.n_int()
    }

    /// Matrix dimension (adds one row/column for the pressure mean pin).
    pub fn n_system(&self) -> usize {
        self.n_unknowns() + usize::from(self.pinned)
    }

    /// Slot of velocity DOF (global node, component) in the system vector.
    pub fn velocity_slot(&self, node: usize, comp: usize) -> VelocitySlot {
        if let Some(k) = self.dir_slot[node] {
            VelocitySlot::Prescribed(comp * self.dirichlet_nodes.len() + k)
        } else if let Some(k) = self.bnd_slot[node] {
            VelocitySlot::Free(comp * self.free_bnd_nodes.len() + k)
        } else {
            let k = self.int_slot[node].expect("node classified");
            VelocitySlot::Free(
                self.n_bnd() + self.n_pressure + comp * self.interior_nodes.len() + k,
            )
        }
    }

    pub fn pressure_slot(&self, element: usize, dof: usize) -> usize {
        self.n_bnd() + element * self.pressure_per_element + dof
    }

    /// Dirichlet values at the prescribed nodes, `[u_x ..., u_y ...]`.
    pub fn dirichlet_values(&self, disc: &Discretization, bc: &BoundaryConditions) -> Array1<f64> {
        let nd = self.dirichlet_nodes.len();
        let mut d = Array1::zeros(2 * nd);
        for (k, &g) in self.dirichlet_nodes.iter().enumerate() {
            let xy = disc.numbering.node_coords[g];
            let v = (bc.dirichlet)(xy[0], xy[1]);
            d[k] = v[0];
            d[nd + k] = v[1];
        }
        d
    }

    /// Expand system unknowns plus Dirichlet data into a global velocity field.
    pub fn velocity_field(
        &self,
        disc: &Discretization,
        unknowns: &Array1<f64>,
        dirichlet: &Array1<f64>,
    ) -> FieldState {
        let n = disc.numbering.n_global;
        let mut values = Array1::zeros(2 * n);
        for g in 0..n {
            for comp in 0..2 {
                values[comp * n + g] = match self.velocity_slot(g, comp) {
                    VelocitySlot::Free(idx) => unknowns[idx],
                    VelocitySlot::Prescribed(idx) => dirichlet[idx],
                };
            }
        }
        FieldState {
            level: DofLevel::Global,
            space: FieldSpace::Velocity,
            components: 2,
            values,
        }
    }

    pub fn pressure_field(&self, unknowns: &Array1<f64>) -> FieldState {
        FieldState {
            level: DofLevel::Global,
            space: FieldSpace::Pressure,
            components: 1,
            values: unknowns
                .slice(s![self.n_bnd()..self.n_bnd() + self.n_pressure])
                .to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum VelocitySlot {
    Free(usize),
    Prescribed(usize),
}

/// Which physical part of the Oseen operator to assemble.
pub enum OperatorPart<'a> {
    /// Vector Laplacian blocks at unit viscosity.
    Viscous,
    /// Pressure-velocity coupling blocks (plus the mean-pressure pin row on
    /// pure-Dirichlet meshes).
    Divergence,
    /// Advection blocks linearized at the given physical velocity field.
    Advection(&'a FieldState),
}

/// A matrix part together with its Dirichlet lift contribution to the RHS.
pub struct AssembledOperator {
    pub matrix: Array2<f64>,
    pub lift: Array1<f64>,
}

/// The assembled Oseen saddle system.
pub struct BlockSystem {
    pub matrix: Array2<f64>,
    pub rhs: Array1<f64>,
    pub n_bnd: usize,
    pub n_pressure: usize,
    pub n_int: usize,
    pub pinned: bool,
}

impl BlockSystem {
    pub fn a(&self) -> ArrayView2<'_, f64> {
        self.matrix.slice(s![..self.n_bnd, ..self.n_bnd])
    }

    pub fn b(&self) -> ArrayView2<'_, f64> {
        let i0 = self.n_bnd + self.n_pressure;
        self.matrix.slice(s![..self.n_bnd, i0..i0 + self.n_int])
    }

    /// Interior-boundary velocity block.
    pub fn b_tilde(&self) -> ArrayView2<'_, f64> {
        let i0 = self.n_bnd + self.n_pressure;
        self.matrix.slice(s![i0..i0 + self.n_int, ..self.n_bnd])
    }

    pub fn c(&self) -> ArrayView2<'_, f64> {
        let i0 = self.n_bnd + self.n_pressure;
        self.matrix.slice(s![i0..i0 + self.n_int, i0..i0 + self.n_int])
    }

    pub fn d_bnd(&self) -> Array2<f64> {
        let p0 = self.n_bnd;
        -&self.matrix.slice(s![p0..p0 + self.n_pressure, ..self.n_bnd])
    }

    pub fn d_int(&self) -> Array2<f64> {
        let p0 = self.n_bnd;
        let i0 = self.n_bnd + self.n_pressure;
        -&self
            .matrix
            .slice(s![p0..p0 + self.n_pressure, i0..i0 + self.n_int])
    }

    pub fn f_bnd(&self) -> ArrayView1<'_, f64> {
        self.rhs.slice(s![..self.n_bnd])
    }

    pub fn f_int(&self) -> ArrayView1<'_, f64> {
        let i0 = self.n_bnd + self.n_pressure;
        self.rhs.slice(s![i0..i0 + self.n_int])
    }

    /// Discrete divergence residual `D_bnd v_bnd + D_int v_int` of a solution.
    pub fn divergence_residual(&self, unknowns: &Array1<f64>) -> Array1<f64> {
        let p0 = self.n_bnd;
        let mut r = Array1::zeros(self.n_pressure);
        let rows = self.matrix.slice(s![p0..p0 + self.n_pressure, ..]);
        let n = self.n_bnd + self.n_pressure + self.n_int;
        for (k, row) in rows.outer_iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * unknowns[j];
            }
            // Pressure rows store -D; pin column (if any) excluded above.
            r[k] = -acc;
        }
        r
    }
}

/// Per-element dense kernels shared by all operator parts.
struct ElementKernels {
    /// Physical gradient matrices, (n_q x n_nodes).
    gx: Array2<f64>,
    gy: Array2<f64>,
}

fn element_kernels(disc: &Discretization, e: usize) -> ElementKernels {
    let n1 = disc.order + 1;
    let npe = n1 * n1;
    let d = &disc.elem.diff;
    let geo = &disc.geometry[e];
    let mut gx = Array2::zeros((npe, npe));
    let mut gy = Array2::zeros((npe, npe));
    for qj in 0..n1 {
        for qi in 0..n1 {
            let q = qj * n1 + qi;
            let jit = geo.jac_inv_t[q];
            // d phi_(i,j) / d xi  at q: D[qi][i] when j == qj
            for i in 0..n1 {
                let l = qj * n1 + i;
                let dxi = d[(qi, i)];
                gx[(q, l)] += jit[0][0] * dxi;
                gy[(q, l)] += jit[1][0] * dxi;
            }
            // d phi_(i,j) / d eta at q: D[qj][j] when i == qi
            for j in 0..n1 {
                let l = j * n1 + qi;
                let deta = d[(qj, j)];
                gx[(q, l)] += jit[0][1] * deta;
                gy[(q, l)] += jit[1][1] * deta;
            }
        }
    }
    ElementKernels { gx, gy }
}

/// Scalar viscous element matrix, assembled with an explicitly symmetric
/// loop so transposed entries are bitwise equal.
fn viscous_element(disc: &Discretization, e: usize, ker: &ElementKernels) -> Array2<f64> {
    let npe = disc.nodes_per_element();
    let nq = npe;
    let geo = &disc.geometry[e];
    let mut k = Array2::zeros((npe, npe));
    for l1 in 0..npe {
        for l2 in l1..npe {
            let mut acc = 0.0;
            for q in 0..nq {
                acc += geo.jac_w[q]
                    * (ker.gx[(q, l1)] * ker.gx[(q, l2)] + ker.gy[(q, l1)] * ker.gy[(q, l2)]);
            }
            k[(l1, l2)] = acc;
            k[(l2, l1)] = acc;
        }
    }
    k
}

/// Scalar advection element matrix at the frozen velocity (physical values
/// `ux`, `uy` at this element's quadrature points). Collocation makes the
/// test-function factor a Kronecker delta, so row q is weighted by the
/// quadrature point q.
fn advection_element(
    disc: &Discretization,
    e: usize,
    ker: &ElementKernels,
    ux: &[f64],
    uy: &[f64],
) -> Array2<f64> {
    let npe = disc.nodes_per_element();
    let geo = &disc.geometry[e];
    let mut k = Array2::zeros((npe, npe));
    for q in 0..npe {
        let w = geo.jac_w[q];
        for l2 in 0..npe {
            k[(q, l2)] = w * (ux[q] * ker.gx[(q, l2)] + uy[q] * ker.gy[(q, l2)]);
        }
    }
    k
}

/// Divergence coupling element matrices D_c[k][l] = (psi_k, d phi_l / d x_c).
fn divergence_element(
    disc: &Discretization,
    e: usize,
    ker: &ElementKernels,
) -> (Array2<f64>, Array2<f64>) {
    let npe = disc.nodes_per_element();
    let npb = disc.pressure.n_per_element;
    let geo = &disc.geometry[e];
    let psi = &disc.pressure.eval;
    let mut dx = Array2::zeros((npb, npe));
    let mut dy = Array2::zeros((npb, npe));
    for k in 0..npb {
        for l in 0..npe {
            let mut ax = 0.0;
            let mut ay = 0.0;
            for q in 0..npe {
                let w = geo.jac_w[q] * psi[(q, k)];
                ax += w * ker.gx[(q, l)];
                ay += w * ker.gy[(q, l)];
            }
            dx[(k, l)] = ax;
            dy[(k, l)] = ay;
        }
    }
    (dx, dy)
}

struct Assembler<'a> {
    disc: &'a Discretization,
    layout: &'a SystemLayout,
    dirichlet: &'a Array1<f64>,
    matrix: Array2<f64>,
    lift: Array1<f64>,
}

impl<'a> Assembler<'a> {
    fn new(disc: &'a Discretization, layout: &'a SystemLayout, dirichlet: &'a Array1<f64>) -> Self {
        let n = layout.n_system();
        Self {
            disc,
            layout,
            dirichlet,
            matrix: Array2::zeros((n, n)),
            lift: Array1::zeros(n),
        }
    }

    fn add(&mut self, row: usize, col_slot: VelocitySlot, value: f64) {
        match col_slot {
            VelocitySlot::Free(col) => self.matrix[(row, col)] += value,
            VelocitySlot::Prescribed(k) => self.lift[row] -= value * self.dirichlet[k],
        }
    }

    /// Add the velocity-velocity scalar matrix `k_e` (same for both
    /// components) for element `e`.
    fn add_velocity_block(&mut self, e: usize, k_e: &Array2<f64>) {
        let npe = self.disc.nodes_per_element();
        let l2g = &self.disc.numbering.local_to_global[e];
        for comp in 0..2 {
            for l1 in 0..npe {
                let row = match self.layout.velocity_slot(l2g[l1], comp) {
                    VelocitySlot::Free(r) => r,
                    VelocitySlot::Prescribed(_) => continue,
                };
                for l2 in 0..npe {
                    self.add(row, self.layout.velocity_slot(l2g[l2], comp), k_e[(l1, l2)]);
                }
            }
        }
    }

    /// Add the pressure-velocity couplings of element `e` with Eq.-(8) signs:
    /// `-D` into the pressure rows and `-D^T` into the momentum rows.
    fn add_divergence_block(&mut self, e: usize, dx: &Array2<f64>, dy: &Array2<f64>) {
        let npe = self.disc.nodes_per_element();
        let npb = self.disc.pressure.n_per_element;
        let l2g = &self.disc.numbering.local_to_global[e];
        for k in 0..npb {
            let prow = self.layout.pressure_slot(e, k);
            for l in 0..npe {
                for (comp, d) in [dx, dy].into_iter().enumerate() {
                    let val = d[(k, l)];
                    // Pressure row: -D v.
                    self.add(prow, self.layout.velocity_slot(l2g[l], comp), -val);
                    // Momentum row: -D^T p.
                    if let VelocitySlot::Free(vrow) = self.layout.velocity_slot(l2g[l], comp) {
                        self.matrix[(vrow, prow)] -= val;
                    }
                }
            }
        }
    }

    /// Mean-pressure pin row/column for pure-Dirichlet meshes.
    fn add_pressure_pin(&mut self) {
        let pin = self.layout.n_unknowns();
        for e in 0..self.disc.num_elements() {
            let geo = &self.disc.geometry[e];
            let psi = &self.disc.pressure.eval;
            for k in 0..self.disc.pressure.n_per_element {
                let mut mass = 0.0;
                for q in 0..self.disc.quad_points_per_element() {
                    mass += geo.jac_w[q] * psi[(q, k)];
                }
                let col = self.layout.pressure_slot(e, k);
                self.matrix[(pin, col)] += mass;
                self.matrix[(col, pin)] += mass;
            }
        }
    }

    fn finish(self) -> AssembledOperator {
        AssembledOperator {
            matrix: self.matrix,
            lift: self.lift,
        }
    }
}

/// Physical velocity values of `u_k` per element, `([ux], [uy])` layout.
fn physical_velocity(disc: &Discretization, u_k: &FieldState) -> Result<Array1<f64>> {
    let phys = match u_k.level {
        DofLevel::Local => disc.to_physical(u_k)?,
        DofLevel::Physical => u_k.clone(),
        DofLevel::Global => {
            return Err(Error::invalid(
                "advection field must be at local or physical level",
            ))
        }
    };
    if phys.space != FieldSpace::Velocity || phys.components != 2 {
        return Err(Error::invalid("advection field must be a velocity field"));
    }
    Ok(phys.values)
}

/// Assemble a single operator part (used by the affine decomposition).
pub fn assemble_part(
    disc: &Discretization,
    layout: &SystemLayout,
    dirichlet: &Array1<f64>,
    part: OperatorPart<'_>,
) -> Result<AssembledOperator> {
    let mut asm = Assembler::new(disc, layout, dirichlet);
    match part {
        OperatorPart::Viscous => {
            for e in 0..disc.num_elements() {
                let ker = element_kernels(disc, e);
                let k_e = viscous_element(disc, e, &ker);
                asm.add_velocity_block(e, &k_e);
            }
        }
        OperatorPart::Divergence => {
            for e in 0..disc.num_elements() {
                let ker = element_kernels(disc, e);
                let (dx, dy) = divergence_element(disc, e, &ker);
                asm.add_divergence_block(e, &dx, &dy);
            }
            if layout.pinned {
                asm.add_pressure_pin();
            }
        }
        OperatorPart::Advection(u_k) => {
            let u_phys = physical_velocity(disc, u_k)?;
            let nq = disc.quad_points_per_element();
            let n_scal = disc.num_elements() * nq;
            for e in 0..disc.num_elements() {
                let ker = element_kernels(disc, e);
                let ux = &u_phys.as_slice().unwrap()[e * nq..(e + 1) * nq];
                let uy = &u_phys.as_slice().unwrap()[n_scal + e * nq..n_scal + (e + 1) * nq];
                let k_e = advection_element(disc, e, &ker, ux, uy);
                asm.add_velocity_block(e, &k_e);
            }
        }
    }
    Ok(asm.finish())
}

/// Body-force and Neumann load vector (parameter independent).
pub fn load_vector(
    disc: &Discretization,
    layout: &SystemLayout,
    params: &FlowParameters,
    bc: &BoundaryConditions,
) -> Array1<f64> {
    let mut rhs = Array1::zeros(layout.n_system());
    if let Some(f) = &params.body_force {
        for e in 0..disc.num_elements() {
            let geo = &disc.geometry[e];
            let l2g = &disc.numbering.local_to_global[e];
            for (l, &g) in l2g.iter().enumerate() {
                let xy = geo.coords[l];
                let fv = f(xy[0], xy[1]);
                for comp in 0..2 {
                    if let VelocitySlot::Free(row) = layout.velocity_slot(g, comp) {
                        rhs[row] += geo.jac_w[l] * fv[comp];
                    }
                }
            }
        }
    }
    // Neumann flux trace on tagged edges.
    let n1 = disc.order + 1;
    for (&(e, le), &tag) in &disc.mesh.boundary_tags {
        if tag != BoundaryTag::Neumann {
            continue;
        }
        let nodes = crate::field::edge_node_indices(disc.order, le);
        for (k, &local) in nodes.iter().enumerate() {
            let (i, j) = (local % n1, local / n1);
            let (xi, eta) = (disc.elem.nodes[i], disc.elem.nodes[j]);
            let jac = disc.mesh.jacobian(e, xi, eta);
            // Tangent along the edge direction: xi for edges 0/2, eta for 1/3.
            let t = if le % 2 == 0 {
                [jac[0][0], jac[1][0]]
            } else {
                [jac[0][1], jac[1][1]]
            };
            let ds = (t[0] * t[0] + t[1] * t[1]).sqrt();
            let w = disc.elem.weights[if le % 2 == 0 { i } else { j }] * ds;
            let xy = disc.mesh.map(e, xi, eta);
            let h = (bc.neumann)(xy[0], xy[1]);
            let g = disc.numbering.local_to_global[e][local];
            let _ = k;
            for comp in 0..2 {
                if let VelocitySlot::Free(row) = layout.velocity_slot(g, comp) {
                    rhs[row] += w * h[comp];
                }
            }
        }
    }
    rhs
}

/// Assemble the full Oseen system at frozen velocity `u_k` (None for Stokes).
pub fn assemble_oseen(
    disc: &Discretization,
    layout: &SystemLayout,
    u_k: Option<&FieldState>,
    params: &FlowParameters,
    bc: &BoundaryConditions,
) -> Result<BlockSystem> {
    let dirichlet = layout.dirichlet_values(disc, bc);
    let mut asm = Assembler::new(disc, layout, &dirichlet);
    let u_phys = match u_k {
        Some(u) => Some(physical_velocity(disc, u)?),
        None => None,
    };
    let nq = disc.quad_points_per_element();
    let n_scal = disc.num_elements() * nq;
    for e in 0..disc.num_elements() {
        let ker = element_kernels(disc, e);
        let mut k_e = viscous_element(disc, e, &ker);
        // nu scales each entry before assembly so that viscosity linearity
        // holds exactly blockwise.
        k_e.mapv_inplace(|v| v * params.nu);
        if let Some(u) = &u_phys {
            let ux = &u.as_slice().unwrap()[e * nq..(e + 1) * nq];
            let uy = &u.as_slice().unwrap()[n_scal + e * nq..n_scal + (e + 1) * nq];
            let k_a = advection_element(disc, e, &ker, ux, uy);
            k_e += &k_a;
        }
        asm.add_velocity_block(e, &k_e);
        let (dx, dy) = divergence_element(disc, e, &ker);
        asm.add_divergence_block(e, &dx, &dy);
    }
    if layout.pinned {
        asm.add_pressure_pin();
    }
    let assembled = asm.finish();
    let mut rhs = load_vector(disc, layout, params, bc);
    rhs += &assembled.lift;
    Ok(BlockSystem {
        matrix: assembled.matrix,
        rhs,
        n_bnd: layout.n_bnd(),
        n_pressure: layout.n_pressure,
        n_int: layout.n_int(),
        pinned: layout.pinned,
    })
}

/// Solve the assembled saddle system by dense LU with a residual check.
pub fn solve_block(system: &BlockSystem) -> Result<Array1<f64>> {
    let x = system.matrix.solve(&system.rhs).map_err(|e| {
        Error::Solve(format!(
            "LU factorization failed (dimension {}): {e}",
            system.matrix.nrows()
        ))
    })?;
    let residual = &system.matrix.dot(&x) - &system.rhs;
    let scale = system
        .rhs
        .norm_l2()
        .max(system.matrix.opnorm_one().unwrap_or(1.0) * x.norm_l2())
        .max(f64::MIN_POSITIVE);
    let rel = residual.norm_l2() / scale;
    if !rel.is_finite() || rel > 1e-10 {
        return Err(Error::Solve(format!(
            "solution residual {rel:.3e} exceeds 1e-10 (matrix likely singular or ill-conditioned)"
        )));
    }
    // Strip the pin multiplier.
    Ok(x.slice(s![..system.n_bnd + system.n_pressure + system.n_int])
        .to_owned())
}

/// A converged steady state.
#[derive(Debug, Clone)]
pub struct SteadySolution {
    pub nu: f64,
    pub velocity: FieldState,
    pub pressure: FieldState,
    /// Raw system unknowns `[v_bnd | p | v_int]`.
    pub unknowns: Array1<f64>,
    /// Relative velocity change per iterate.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Oseen fixed-point iteration to a steady state.
///
/// The initial state is the Stokes solution unless `bc.initial_guess`
/// provides a velocity field. Stops when the relative L2 velocity change
/// between iterates falls below `tol`.
pub fn oseen_iterate(
    disc: &Discretization,
    layout: &SystemLayout,
    params: &FlowParameters,
    bc: &BoundaryConditions,
    tol: f64,
    max_iter: usize,
) -> Result<SteadySolution> {
    if tol <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let dirichlet = layout.dirichlet_values(disc, bc);
    let mut u_prev = match &bc.initial_guess {
        Some(u0) => disc.velocity_to_physical(u0)?,
        None => {
            let stokes = assemble_oseen(disc, layout, None, params, bc)?;
            let x0 = solve_block(&stokes)?;
            let v = layout.velocity_field(disc, &x0, &dirichlet);
            disc.velocity_to_physical(&v)?
        }
    };
    let guard_norm = disc.l2_norm(&u_prev)?.max(1e-8);
    let mut history = Vec::new();
    for k in 1..=max_iter {
        let system = assemble_oseen(disc, layout, Some(&u_prev), params, bc)?;
        let x = solve_block(&system)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite iterate at step {k} (nu = {})",
                params.nu
            )));
        }
        let v_new = layout.velocity_field(disc, &x, &dirichlet);
        let u_new = disc.velocity_to_physical(&v_new)?;
        let norm_new = disc.l2_norm(&u_new)?;
        if norm_new > 1e3 * guard_norm {
            return Err(Error::Diverged(format!(
                "velocity norm grew 1000x over the initial guess at step {k} (nu = {})",
                params.nu
            )));
        }
        let mut diff = u_new.clone();
        diff.values = &u_new.values - &u_prev.values;
        let rel = disc.l2_norm(&diff)? / norm_new.max(f64::MIN_POSITIVE);
        history.push(rel);
        if rel < tol {
            let pressure = layout.pressure_field(&x);
            return Ok(SteadySolution {
                nu: params.nu,
                velocity: v_new,
                pressure,
                unknowns: x,
                history,
                iterations: k,
            });
        }
        u_prev = u_new;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Outcome of a viscosity continuation sweep: converged solutions in sweep
/// order, plus the first failure if one occurred (partial results retained).
pub struct SweepOutcome {
    pub solutions: Vec<SteadySolution>,
    pub failure: Option<(f64, Error)>,
}

/// Sweep a descending viscosity list, warm-starting each solve from the
/// previous solution. The initial state at the largest viscosity is the
/// Stokes solution.
pub fn continuation_sweep(
    disc: &Discretization,
    layout: &SystemLayout,
    nu_list: &[f64],
    base: &FlowParameters,
    bc: &BoundaryConditions,
    tol: f64,
    max_iter: usize,
) -> Result<SweepOutcome> {
    if nu_list.is_empty() {
        return Err(Error::invalid("viscosity list is empty"));
    }
    if nu_list.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::invalid(
            "viscosity list must be strictly descending for warm starts",
        ));
    }
    let mut solutions: Vec<SteadySolution> = Vec::with_capacity(nu_list.len());
    let mut bc_k = bc.clone();
    for &nu in nu_list {
        let params = FlowParameters {
            nu,
            ..(*base).clone()
        };
        if let Some(prev) = solutions.last() {
            bc_k.initial_guess = Some(prev.velocity.clone());
        }
        match oseen_iterate(disc, layout, &params, &bc_k, tol, max_iter) {
            Ok(sol) => solutions.push(sol),
            Err(err) => {
                return Ok(SweepOutcome {
                    solutions,
                    failure: Some((nu, err)),
                })
            }
        }
    }
    Ok(SweepOutcome {
        solutions,
        failure: None,
    })
}

/// Log-spaced viscosity samples, descending from `max` to `min`.
pub fn log_spaced_descending(min: f64, max: f64, count: usize) -> Result<Vec<f64>> {
    if min <= 0.0 || max <= min || count < 2 {
        return Err(Error::invalid(
            "log spacing needs 0 < min < max and count >= 2",
        ));
    }
    let (lmin, lmax) = (min.ln(), max.ln());
    Ok((0..count)
        .map(|k| (lmax + (lmin - lmax) * k as f64 / (count - 1) as f64).exp())
        .collect())
}

/// Linearly spaced viscosity samples, descending.
pub fn lin_spaced_descending(min: f64, max: f64, count: usize) -> Result<Vec<f64>> {
    if max <= min || count < 2 {
        return Err(Error::invalid("linear spacing needs min < max, count >= 2"));
    }
    Ok((0..count)
        .map(|k| max + (min - max) * k as f64 / (count - 1) as f64)
        .collect())
}
