//! Discrete fields at the three DOF levels and the maps between them.
//!
//! A field lives at one of three levels:
//! - `Global`: uniquely numbered continuous degrees of freedom,
//! - `Local`: per-element coefficients, with shared-edge DOFs duplicated,
//! - `Physical`: values at the quadrature points of every element.
//!
//! The velocity space is the nodal GLL space of degree P; quadrature is
//! collocated at the same points, so the local-to-physical map is the
//! identity per element. The pressure space is discontinuous of degree P-2
//! (nodal tensor GLL for P >= 3, the span of {1, xi, eta} for P = 2) and is
//! evaluated at the velocity quadrature points when a physical
//! representation is needed.

use crate::element::{lagrange_eval, ReferenceElement};
use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Mesh};
use ndarray::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofLevel {
    Global,
    Local,
    Physical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSpace {
    Velocity,
    Pressure,
}

/// A discrete field: coefficient vector at one representation level.
/// Multi-component fields store component blocks contiguously:
/// `[comp 0 dofs..., comp 1 dofs...]`.
#[derive(Debug, Clone)]
pub struct FieldState {
    pub level: DofLevel,
    pub space: FieldSpace,
    pub components: usize,
    pub values: Array1<f64>,
}

/// How duplicated shared-edge DOFs are combined by `gather`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatherMode {
    /// Restriction for solution vectors: average of the copies (exact when
    /// the copies agree bitwise).
    Average,
    /// Assembly dual of `scatter` (summation), for residual-type vectors.
    Sum,
}

#[derive(Debug, Clone)]
pub enum PressureKind {
    /// Nodal tensor basis at the GLL points of degree P-2.
    TensorGll { order: usize },
    /// {1, xi, eta} per element (used at P = 2).
    LinearDisc,
}

#[derive(Debug, Clone)]
pub struct PressureSpace {
    pub kind: PressureKind,
    pub n_per_element: usize,
    /// Basis values at the velocity quadrature points, (n_quad x n_per_element).
    pub eval: Array2<f64>,
}

/// Global numbering of the velocity DOFs.
#[derive(Debug, Clone)]
pub struct DofNumbering {
    pub n_global: usize,
    /// Per element: local tensor index -> global node id.
    pub local_to_global: Vec<Vec<usize>>,
    /// Number of element copies of each global node.
    pub multiplicity: Vec<usize>,
    pub node_coords: Vec<[f64; 2]>,
    /// Element-interior nodes (owned by exactly one element, never on an edge).
    pub is_interior: Vec<bool>,
    /// Nodes lying on a Dirichlet-tagged boundary edge.
    pub is_dirichlet: Vec<bool>,
}

/// Per-element geometry factors at the quadrature points.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub coords: Vec<[f64; 2]>,
    /// w_q * |J_q|
    pub jac_w: Vec<f64>,
    /// J^{-T} at each quadrature point.
    pub jac_inv_t: Vec<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone)]
pub struct Discretization {
    pub mesh: Mesh,
    pub order: usize,
    pub elem: ReferenceElement,
    pub pressure: PressureSpace,
    pub numbering: DofNumbering,
    pub geometry: Vec<ElementGeometry>,
}

impl Discretization {
    pub fn new(mesh: Mesh, order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::invalid(
                "velocity order must be >= 2 (pressure space is degree P-2)",
            ));
        }
        let elem = ReferenceElement::new(order)?;
        let pressure = build_pressure_space(&elem, order)?;
        let numbering = build_numbering(&mesh, &elem)?;
        let geometry = build_geometry(&mesh, &elem)?;
        Ok(Self {
            mesh,
            order,
            elem,
            pressure,
            numbering,
            geometry,
        })
    }

    pub fn nodes_per_element(&self) -> usize {
        (self.order + 1) * (self.order + 1)
    }

    pub fn quad_points_per_element(&self) -> usize {
        self.nodes_per_element()
    }

    pub fn num_elements(&self) -> usize {
        self.mesh.num_elements()
    }

    /// Scalar DOF count at a level for a given space.
    pub fn scalar_len(&self, space: FieldSpace, level: DofLevel) -> usize {
        match space {
            FieldSpace::Velocity => match level {
                DofLevel::Global => self.numbering.n_global,
                DofLevel::Local | DofLevel::Physical => {
                    self.num_elements() * self.nodes_per_element()
                }
            },
            FieldSpace::Pressure => match level {
                DofLevel::Global | DofLevel::Local => {
                    self.num_elements() * self.pressure.n_per_element
                }
                DofLevel::Physical => self.num_elements() * self.quad_points_per_element(),
            },
        }
    }

    fn check(&self, field: &FieldState, level: DofLevel) -> Result<()> {
        if field.level != level {
            return Err(Error::invalid(format!(
                "expected field at {level:?} level, got {:?}",
                field.level
            )));
        }
        let expect = field.components * self.scalar_len(field.space, level);
        if field.values.len() != expect {
            return Err(Error::DimensionMismatch(format!(
                "field has {} values, expected {expect}",
                field.values.len()
            )));
        }
        Ok(())
    }

    /// Duplicate shared-edge DOFs: global -> local.
    pub fn scatter(&self, global: &FieldState) -> Result<FieldState> {
        self.check(global, DofLevel::Global)?;
        if global.space == FieldSpace::Pressure {
            // Discontinuous space: global and local coincide.
            let mut out = global.clone();
            out.level = DofLevel::Local;
            return Ok(out);
        }
        let n_loc = self.scalar_len(FieldSpace::Velocity, DofLevel::Local);
        let n_glob = self.numbering.n_global;
        let npe = self.nodes_per_element();
        let mut values = Array1::zeros(global.components * n_loc);
        for c in 0..global.components {
            for (e, l2g) in self.numbering.local_to_global.iter().enumerate() {
                for (l, &g) in l2g.iter().enumerate() {
                    if g >= n_glob {
                        return Err(Error::Mesh("local-to-global index out of range".into()));
                    }
                    values[c * n_loc + e * npe + l] = global.values[c * n_glob + g];
                }
            }
        }
        Ok(FieldState {
            level: DofLevel::Local,
            space: global.space,
            components: global.components,
            values,
        })
    }

    /// Combine duplicated DOFs: local -> global.
    pub fn gather(&self, local: &FieldState, mode: GatherMode) -> Result<FieldState> {
        self.check(local, DofLevel::Local)?;
        if local.space == FieldSpace::Pressure {
            let mut out = local.clone();
            out.level = DofLevel::Global;
            return Ok(out);
        }
        let n_loc = self.scalar_len(FieldSpace::Velocity, DofLevel::Local);
        let n_glob = self.numbering.n_global;
        let npe = self.nodes_per_element();
        let mut values = Array1::zeros(local.components * n_glob);
        for c in 0..local.components {
            match mode {
                GatherMode::Sum => {
                    for (e, l2g) in self.numbering.local_to_global.iter().enumerate() {
                        for (l, &g) in l2g.iter().enumerate() {
                            values[c * n_glob + g] += local.values[c * n_loc + e * npe + l];
                        }
                    }
                }
                GatherMode::Average => {
                    let mut first = vec![f64::NAN; n_glob];
                    let mut sum = vec![0.0; n_glob];
                    let mut consistent = vec![true; n_glob];
                    for (e, l2g) in self.numbering.local_to_global.iter().enumerate() {
                        for (l, &g) in l2g.iter().enumerate() {
                            let v = local.values[c * n_loc + e * npe + l];
                            if first[g].is_nan() && !v.is_nan() {
                                first[g] = v;
                            } else if v.to_bits() != first[g].to_bits() {
                                consistent[g] = false;
                            }
                            sum[g] += v;
                        }
                    }
                    for g in 0..n_glob {
                        values[c * n_glob + g] = if consistent[g] {
                            first[g]
                        } else {
                            sum[g] / self.numbering.multiplicity[g] as f64
                        };
                    }
                }
            }
        }
        Ok(FieldState {
            level: DofLevel::Global,
            space: local.space,
            components: local.components,
            values,
        })
    }

    /// Evaluate the expansion at every quadrature point: local -> physical.
    ///
    /// For the collocated velocity basis this is the identity per element;
    /// pressure coefficients are interpolated to the velocity quadrature
    /// points through the pressure basis evaluation matrix.
    pub fn to_physical(&self, local: &FieldState) -> Result<FieldState> {
        self.check(local, DofLevel::Local)?;
        match local.space {
            FieldSpace::Velocity => {
                let mut out = local.clone();
                out.level = DofLevel::Physical;
                Ok(out)
            }
            FieldSpace::Pressure => {
                let nq = self.quad_points_per_element();
                let npb = self.pressure.n_per_element;
                let ne = self.num_elements();
                let mut values = Array1::zeros(local.components * ne * nq);
                for c in 0..local.components {
                    for e in 0..ne {
                        let coeffs = local
                            .values
                            .slice(s![c * ne * npb + e * npb..c * ne * npb + (e + 1) * npb]);
                        let vals = self.pressure.eval.dot(&coeffs);
                        values
                            .slice_mut(s![c * ne * nq + e * nq..c * ne * nq + (e + 1) * nq])
                            .assign(&vals);
                    }
                }
                Ok(FieldState {
                    level: DofLevel::Physical,
                    space: FieldSpace::Pressure,
                    components: local.components,
                    values,
                })
            }
        }
    }

    /// Discrete L2 inner product of two physical fields:
    /// sum over elements and quadrature points of w_q |J_q| a_q b_q, summed
    /// over components.
    pub fn integrate_l2(&self, a: &FieldState, b: &FieldState) -> Result<f64> {
        self.check(a, DofLevel::Physical)?;
        self.check(b, DofLevel::Physical)?;
        if a.values.len() != b.values.len() || a.components != b.components {
            return Err(Error::DimensionMismatch(
                "integrate_l2 requires matching field shapes".into(),
            ));
        }
        let nq = self.quad_points_per_element();
        let ne = self.num_elements();
        let n_scal = a.values.len() / a.components;
        let mut total = 0.0;
        for c in 0..a.components {
            for e in 0..ne {
                let geo = &self.geometry[e];
                let base = c * n_scal + e * nq;
                for q in 0..nq {
                    total += geo.jac_w[q] * a.values[base + q] * b.values[base + q];
                }
            }
        }
        Ok(total)
    }

    /// L2 norm of a physical field.
    pub fn l2_norm(&self, a: &FieldState) -> Result<f64> {
        Ok(self.integrate_l2(a, a)?.max(0.0).sqrt())
    }

    /// Build a global velocity field by sampling `f` at the global nodes.
    pub fn velocity_from_fn(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> FieldState {
        let n = self.numbering.n_global;
        let mut values = Array1::zeros(2 * n);
        for (g, c) in self.numbering.node_coords.iter().enumerate() {
            let v = f(c[0], c[1]);
            values[g] = v[0];
            values[n + g] = v[1];
        }
        FieldState {
            level: DofLevel::Global,
            space: FieldSpace::Velocity,
            components: 2,
            values,
        }
    }

    /// Physical-level velocity field from a global one.
    pub fn velocity_to_physical(&self, global: &FieldState) -> Result<FieldState> {
        let local = self.scatter(global)?;
        self.to_physical(&local)
    }

    /// Local tensor index of node (i, j) on the reference square.
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.order + 1) + i
    }
}

fn build_pressure_space(elem: &ReferenceElement, order: usize) -> Result<PressureSpace> {
    let n1 = order + 1;
    let nq = n1 * n1;
    if order >= 3 {
        let p_order = order - 2;
        let (p_nodes, _) = crate::element::gll_rule(p_order)?;
        let e1 = lagrange_eval(&p_nodes, &elem.nodes); // (n1, p_order+1)
        let npb1 = p_order + 1;
        let npb = npb1 * npb1;
        let mut eval = Array2::zeros((nq, npb));
        for qj in 0..n1 {
            for qi in 0..n1 {
                let q = qj * n1 + qi;
                for bj in 0..npb1 {
                    for bi in 0..npb1 {
                        eval[(q, bj * npb1 + bi)] = e1[(qi, bi)] * e1[(qj, bj)];
                    }
                }
            }
        }
        Ok(PressureSpace {
            kind: PressureKind::TensorGll { order: p_order },
            n_per_element: npb,
            eval,
        })
    } else {
        // P = 2: discontinuous linear pressure {1, xi, eta} (the classical
        // Q2/P1 pair), which keeps linear pressures representable.
        let mut eval = Array2::zeros((nq, 3));
        for qj in 0..n1 {
            for qi in 0..n1 {
                let q = qj * n1 + qi;
                eval[(q, 0)] = 1.0;
                eval[(q, 1)] = elem.nodes[qi];
                eval[(q, 2)] = elem.nodes[qj];
            }
        }
        Ok(PressureSpace {
            kind: PressureKind::LinearDisc,
            n_per_element: 3,
            eval,
        })
    }
}

/// Node sequence along local edge `le`, traversed from vertex `le` to vertex
/// `(le+1) % 4`, as local tensor indices.
pub fn edge_node_indices(order: usize, le: usize) -> Vec<usize> {
    edge_nodes(order, le)
}

fn edge_nodes(order: usize, le: usize) -> Vec<usize> {
    let p = order;
    let idx = |i: usize, j: usize| j * (p + 1) + i;
    match le {
        0 => (0..=p).map(|i| idx(i, 0)).collect(),
        1 => (0..=p).map(|j| idx(p, j)).collect(),
        2 => (0..=p).rev().map(|i| idx(i, p)).collect(),
        3 => (0..=p).rev().map(|j| idx(0, j)).collect(),
        _ => unreachable!(),
    }
}

fn build_numbering(mesh: &Mesh, elem: &ReferenceElement) -> Result<DofNumbering> {
    let p = elem.order;
    let n1 = p + 1;
    let npe = n1 * n1;
    let ne = mesh.num_elements();
    let corner_local = [0, p, p * n1 + p, p * n1];

    let mut l2g: Vec<Vec<usize>> = vec![vec![usize::MAX; npe]; ne];
    let mut node_coords: Vec<[f64; 2]> = Vec::new();
    let mut is_interior: Vec<bool> = Vec::new();
    let mut next_id = 0usize;

    // Mesh vertices.
    let mut vertex_gid: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for (e, quad) in mesh.elements.iter().enumerate() {
        for (lv, &v) in quad.vertices.iter().enumerate() {
            let gid = *vertex_gid.entry(v).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                node_coords.push(mesh.vertices[v]);
                is_interior.push(false);
                id
            });
            l2g[e][corner_local[lv]] = gid;
        }
    }

    // Edge-interior nodes, shared with canonical orientation from the smaller
    // mesh-vertex id to the larger.
    let mut edge_gids: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (e, quad) in mesh.elements.iter().enumerate() {
        for le in 0..4 {
            let a = quad.vertices[le];
            let b = quad.vertices[(le + 1) % 4];
            let key = if a < b { (a, b) } else { (b, a) };
            let nodes = edge_nodes(p, le);
            let interior_nodes = &nodes[1..p];
            let gids = edge_gids.entry(key).or_insert_with(|| {
                let mut ids = Vec::with_capacity(p.saturating_sub(1));
                // Coordinates along the canonical direction.
                let forward = a < b;
                for k in 1..p {
                    let local = if forward {
                        interior_nodes[k - 1]
                    } else {
                        interior_nodes[p - 1 - k]
                    };
                    let (i, j) = (local % n1, local / n1);
                    let xy = mesh.map(e, elem.nodes[i], elem.nodes[j]);
                    ids.push(next_id);
                    node_coords.push(xy);
                    is_interior.push(false);
                    next_id += 1;
                }
                ids
            });
            let forward = a < b;
            for k in 1..p {
                let local = interior_nodes[k - 1];
                let canonical = if forward { k - 1 } else { p - 1 - k };
                l2g[e][local] = gids[canonical];
            }
        }
    }

    // Element-interior nodes.
    for (e, _) in mesh.elements.iter().enumerate() {
        for j in 1..p {
            for i in 1..p {
                let local = j * n1 + i;
                let xy = mesh.map(e, elem.nodes[i], elem.nodes[j]);
                l2g[e][local] = next_id;
                node_coords.push(xy);
                is_interior.push(true);
                next_id += 1;
            }
        }
    }

    for (e, map) in l2g.iter().enumerate() {
        if map.iter().any(|&g| g == usize::MAX) {
            return Err(Error::Mesh(format!("element {e} has unnumbered nodes")));
        }
    }

    let mut multiplicity = vec![0usize; next_id];
    for map in &l2g {
        for &g in map {
            multiplicity[g] += 1;
        }
    }
    if multiplicity.iter().any(|&m| m == 0) {
        return Err(Error::Mesh("numbering is not surjective".into()));
    }

    // Dirichlet nodes.
    let mut is_dirichlet = vec![false; next_id];
    for (&(e, le), &tag) in &mesh.boundary_tags {
        if tag == BoundaryTag::Dirichlet {
            for &local in &edge_nodes(p, le) {
                is_dirichlet[l2g[e][local]] = true;
            }
        }
    }

    Ok(DofNumbering {
        n_global: next_id,
        local_to_global: l2g,
        multiplicity,
        node_coords,
        is_interior,
        is_dirichlet,
    })
}

fn build_geometry(mesh: &Mesh, elem: &ReferenceElement) -> Result<Vec<ElementGeometry>> {
    let n1 = elem.order + 1;
    let mut out = Vec::with_capacity(mesh.num_elements());
    for e in 0..mesh.num_elements() {
        let mut coords = Vec::with_capacity(n1 * n1);
        let mut jac_w = Vec::with_capacity(n1 * n1);
        let mut jac_inv_t = Vec::with_capacity(n1 * n1);
        for j in 0..n1 {
            for i in 0..n1 {
                let (xi, eta) = (elem.nodes[i], elem.nodes[j]);
                let jac = mesh.jacobian(e, xi, eta);
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                if det <= 0.0 {
                    return Err(Error::Assembly(format!(
                        "element {e} has non-positive Jacobian {det:.3e} at quadrature point ({i},{j})"
                    )));
                }
                // J^{-T} = (1/det) [[j11, -j10], [-j01, j00]]
                jac_inv_t.push([
                    [jac[1][1] / det, -jac[1][0] / det],
                    [-jac[0][1] / det, jac[0][0] / det],
                ]);
                jac_w.push(det * elem.weights[i] * elem.weights[j]);
                coords.push(mesh.map(e, xi, eta));
            }
        }
        out.push(ElementGeometry {
            coords,
            jac_w,
            jac_inv_t,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disc(nx: usize, ny: usize, order: usize) -> Discretization {
        Discretization::new(Mesh::rectangle(nx, ny, nx as f64, ny as f64).unwrap(), order).unwrap()
    }

    #[test]
    fn single_element_scatter_is_identity() {
        let d = disc(1, 1, 4);
        assert_eq!(d.numbering.n_global, 25);
        let g = d.velocity_from_fn(|x, y| [x + 2.0 * y, x * y]);
        let l = d.scatter(&g).unwrap();
        // One element: local and global coincide up to the permutation, which
        // is the identity by construction order... verify via round trip.
        let back = d.gather(&l, GatherMode::Average).unwrap();
        assert_eq!(back.values, g.values);
    }

    #[test]
    fn shared_edge_duplicates_p_plus_one_nodes() {
        let order = 3;
        let d = disc(2, 1, order);
        let local_len = d.scalar_len(FieldSpace::Velocity, DofLevel::Local);
        let global_len = d.numbering.n_global;
        assert_eq!(local_len - global_len, order + 1);
    }

    #[test]
    fn multiplicity_counts() {
        let d = disc(2, 2, 2);
        // Center mesh vertex shared by 4 elements.
        assert!(d.numbering.multiplicity.iter().any(|&m| m == 4));
        assert!(d.numbering.multiplicity.iter().any(|&m| m == 2));
        assert!(d.numbering.multiplicity.iter().any(|&m| m == 1));
    }

    #[test]
    fn shared_nodes_get_identical_coordinates() {
        let d = disc(3, 2, 5);
        // Re-derive coordinates from each element and compare.
        let n1 = d.order + 1;
        for (e, l2g) in d.numbering.local_to_global.iter().enumerate() {
            for (l, &g) in l2g.iter().enumerate() {
                let (i, j) = (l % n1, l / n1);
                let xy = d.mesh.map(e, d.elem.nodes[i], d.elem.nodes[j]);
                let stored = d.numbering.node_coords[g];
                assert!(
                    (xy[0] - stored[0]).abs() < 1e-12 && (xy[1] - stored[1]).abs() < 1e-12,
                    "element {e} node {l}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn gather_scatter_identity(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let d = disc(3, 2, 3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 2 * d.numbering.n_global;
            let g = FieldState {
                level: DofLevel::Global,
                space: FieldSpace::Velocity,
                components: 2,
                values: Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0))),
            };
            let l = d.scatter(&g).unwrap();
            let back = d.gather(&l, GatherMode::Average).unwrap();
            prop_assert_eq!(back.values.as_slice().unwrap(), g.values.as_slice().unwrap());
        }
    }

    #[test]
    fn scatter_gather_on_consistent_local() {
        let d = disc(2, 2, 3);
        let g = d.velocity_from_fn(|x, y| [(x * y).sin(), x - y]);
        let l = d.scatter(&g).unwrap();
        let g2 = d.gather(&l, GatherMode::Average).unwrap();
        let l2 = d.scatter(&g2).unwrap();
        assert_eq!(l2.values, l.values);
    }

    #[test]
    fn gather_sum_is_transpose_of_scatter() {
        // <scatter(g), l> == <g, gather_sum(l)> exactly in structure.
        use rand::{Rng, SeedableRng};
        let d = disc(2, 2, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ng = d.numbering.n_global;
        let nl = d.scalar_len(FieldSpace::Velocity, DofLevel::Local);
        let g = FieldState {
            level: DofLevel::Global,
            space: FieldSpace::Velocity,
            components: 1,
            values: Array1::from_iter((0..ng).map(|_| rng.random_range(-1.0..1.0))),
        };
        let l = FieldState {
            level: DofLevel::Local,
            space: FieldSpace::Velocity,
            components: 1,
            values: Array1::from_iter((0..nl).map(|_| rng.random_range(-1.0..1.0))),
        };
        let sg = d.scatter(&g).unwrap();
        let gl = d.gather(&l, GatherMode::Sum).unwrap();
        let lhs: f64 = sg.values.dot(&l.values);
        let rhs: f64 = g.values.dot(&gl.values);
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn to_physical_constant_partition_of_unity() {
        let d = disc(2, 1, 4);
        let g = d.velocity_from_fn(|_, _| [1.0, 1.0]);
        let phys = d.velocity_to_physical(&g).unwrap();
        for v in phys.values.iter() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn to_physical_collocation_identity() {
        let d = disc(2, 2, 3);
        let g = d.velocity_from_fn(|x, y| [x * x - y, y * x]);
        let l = d.scatter(&g).unwrap();
        let phys = d.to_physical(&l).unwrap();
        assert_eq!(phys.values, l.values);
    }

    #[test]
    fn to_physical_linear_field_gives_quad_coordinates() {
        // Skewed quadrilateral: values of the field x at quadrature points
        // must equal the x-coordinates of the mapped points.
        let vertices = vec![[0.0, 0.0], [2.0, 0.3], [2.4, 1.7], [-0.2, 1.2]];
        let mesh = Mesh::new(
            vertices,
            vec![crate::mesh::Quad {
                vertices: [0, 1, 2, 3],
            }],
            vec![
                (0, 0, BoundaryTag::Dirichlet),
                (0, 1, BoundaryTag::Dirichlet),
                (0, 2, BoundaryTag::Dirichlet),
                (0, 3, BoundaryTag::Dirichlet),
            ],
        )
        .unwrap();
        let d = Discretization::new(mesh, 3).unwrap();
        let g = d.velocity_from_fn(|x, _| [x, 0.0]);
        let phys = d.velocity_to_physical(&g).unwrap();
        let nq = d.quad_points_per_element();
        for q in 0..nq {
            assert!((phys.values[q] - d.geometry[0].coords[q][0]).abs() < 1e-13);
        }
    }

    #[test]
    fn to_physical_is_linear() {
        use rand::{Rng, SeedableRng};
        let d = disc(2, 2, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let nl = 2 * d.scalar_len(FieldSpace::Velocity, DofLevel::Local);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| FieldState {
            level: DofLevel::Local,
            space: FieldSpace::Velocity,
            components: 2,
            values: Array1::from_iter((0..nl).map(|_| rng.random_range(-1.0..1.0))),
        };
        let u = mk(&mut rng);
        let v = mk(&mut rng);
        let (alpha, beta) = (0.3, -1.7);
        let mut comb = u.clone();
        comb.values = alpha * &u.values + beta * &v.values;
        let lhs = d.to_physical(&comb).unwrap();
        let rhs = alpha * &d.to_physical(&u).unwrap().values + beta * &d.to_physical(&v).unwrap().values;
        for (a, b) in lhs.values.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn integrate_area_of_channel() {
        let d = Discretization::new(Mesh::channel(4, 1, 8.0, 1.0).unwrap(), 3).unwrap();
        let ones = d.velocity_from_fn(|_, _| [1.0, 0.0]);
        let phys = d.velocity_to_physical(&ones).unwrap();
        let area = d.integrate_l2(&phys, &phys).unwrap();
        assert!((area - 8.0).abs() < 1e-12);
        let zero = d.velocity_from_fn(|_, _| [0.0, 0.0]);
        let zphys = d.velocity_to_physical(&zero).unwrap();
        assert_eq!(d.integrate_l2(&phys, &zphys).unwrap(), 0.0);
    }

    #[test]
    fn integrate_sin_profile() {
        let d = disc(1, 1, 8);
        let f = d.velocity_from_fn(|_, y| [(std::f64::consts::PI * y).sin(), 0.0]);
        let phys = d.velocity_to_physical(&f).unwrap();
        let val = d.integrate_l2(&phys, &phys).unwrap();
        assert!((val - 0.5).abs() < 1e-10, "{val}");
    }

    #[test]
    fn integrate_matches_symbolic_on_affine_map() {
        // a = x^2 y, b = x^(2P-3) on [0,2]x[0,1]: product degree (2P-1, 1).
        let p = 4;
        let d = Discretization::new(Mesh::rectangle(2, 1, 2.0, 1.0).unwrap(), p).unwrap();
        let e1 = 2;
        let e2 = 2 * p as i32 - 3;
        let a = d.velocity_from_fn(|x, y| [x.powi(e1) * y, 0.0]);
        let b = d.velocity_from_fn(|x, _| [x.powi(e2), 0.0]);
        let (pa, pb) = (
            d.velocity_to_physical(&a).unwrap(),
            d.velocity_to_physical(&b).unwrap(),
        );
        let got = d.integrate_l2(&pa, &pb).unwrap();
        // integral of x^(2P-1) y over [0,2]x[0,1] = 2^(2P)/(2P) * 1/2
        let deg = (e1 + e2) as f64;
        let exact = 2.0f64.powf(deg + 1.0) / (deg + 1.0) * 0.5;
        assert!((got - exact).abs() < 1e-10 * exact.abs(), "{got} vs {exact}");
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let d = disc(2, 1, 3);
        let d2 = disc(1, 1, 3);
        let a = d.velocity_to_physical(&d.velocity_from_fn(|_, _| [1.0, 0.0])).unwrap();
        let b = d2
            .velocity_to_physical(&d2.velocity_from_fn(|_, _| [1.0, 0.0]))
            .unwrap();
        assert!(d.integrate_l2(&a, &b).is_err());
    }

    #[test]
    fn pressure_space_dimensions() {
        let d = disc(2, 1, 5);
        assert_eq!(d.pressure.n_per_element, 16);
        let d2 = disc(2, 1, 2);
        assert_eq!(d2.pressure.n_per_element, 3);
    }

    #[test]
    fn flipped_element_rejected() {
        let vertices = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]; // clockwise
        let mesh = Mesh::new(
            vertices,
            vec![crate::mesh::Quad {
                vertices: [0, 1, 2, 3],
            }],
            vec![
                (0, 0, BoundaryTag::Dirichlet),
                (0, 1, BoundaryTag::Dirichlet),
                (0, 2, BoundaryTag::Dirichlet),
                (0, 3, BoundaryTag::Dirichlet),
            ],
        )
        .unwrap();
        let err = Discretization::new(mesh, 2).unwrap_err();
        assert!(err.to_string().contains("Jacobian"));
    }
}
