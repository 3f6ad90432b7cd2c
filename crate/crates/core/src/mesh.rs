//! Quadrilateral meshes: topology, boundary tags and the plain-text mesh file.
//!
//! Elements are straight-sided quadrilaterals with counterclockwise vertex
//! ordering and bilinear geometry maps. Local edge `e` of an element connects
//! its local vertices `e` and `(e+1) % 4`. Every boundary edge carries a
//! Dirichlet or Neumann tag; interior edges are shared by exactly two
//! elements.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

/// One quadrilateral element: indices into the mesh vertex list, CCW order.
#[derive(Debug, Clone, Copy)]
pub struct Quad {
    pub vertices: [usize; 4],
}

/// Interior edge adjacency: the two (element, local edge) incidences.
#[derive(Debug, Clone, Copy)]
pub struct SharedEdge {
    pub first: (usize, usize),
    pub second: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    pub elements: Vec<Quad>,
    /// Interior shared edges.
    pub interior_edges: Vec<SharedEdge>,
    /// Boundary tags keyed by (element, local edge).
    pub boundary_tags: BTreeMap<(usize, usize), BoundaryTag>,
}

impl Mesh {
    /// Build a mesh from raw vertices, elements and boundary tags, validating
    /// the topology: interior edges shared by exactly two elements, every
    /// boundary edge tagged, no tags on interior edges.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        elements: Vec<Quad>,
        tags: Vec<(usize, usize, BoundaryTag)>,
    ) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Mesh("mesh has no elements".into()));
        }
        for (e, quad) in elements.iter().enumerate() {
            for &v in &quad.vertices {
                if v >= vertices.len() {
                    return Err(Error::Mesh(format!(
                        "element {e} references vertex {v} out of range"
                    )));
                }
            }
        }
        // Edge incidence by undirected vertex pair.
        let mut incidence: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (e, quad) in elements.iter().enumerate() {
            for le in 0..4 {
                let a = quad.vertices[le];
                let b = quad.vertices[(le + 1) % 4];
                if a == b {
                    return Err(Error::Mesh(format!("element {e} has a degenerate edge")));
                }
                incidence.entry(key(a, b)).or_default().push((e, le));
            }
        }
        let mut interior_edges = Vec::new();
        let mut boundary_edges = Vec::new();
        for (k, inc) in &incidence {
            match inc.len() {
                1 => boundary_edges.push(inc[0]),
                2 => interior_edges.push(SharedEdge {
                    first: inc[0],
                    second: inc[1],
                }),
                n => {
                    return Err(Error::Mesh(format!(
                        "edge {k:?} shared by {n} elements (non-manifold)"
                    )))
                }
            }
        }
        let mut boundary_tags = BTreeMap::new();
        for (e, le, tag) in tags {
            if e >= elements.len() || le >= 4 {
                return Err(Error::Mesh(format!(
                    "boundary tag references invalid edge ({e}, {le})"
                )));
            }
            let a = elements[e].vertices[le];
            let b = elements[e].vertices[(le + 1) % 4];
            if incidence[&key(a, b)].len() != 1 {
                return Err(Error::Mesh(format!(
                    "boundary tag on interior edge ({e}, {le})"
                )));
            }
            if boundary_tags.insert((e, le), tag).is_some() {
                return Err(Error::Mesh(format!("duplicate tag on edge ({e}, {le})")));
            }
        }
        for &(e, le) in &boundary_edges {
            if !boundary_tags.contains_key(&(e, le)) {
                return Err(Error::Mesh(format!(
                    "boundary edge ({e}, {le}) has no dirichlet/neumann tag"
                )));
            }
        }
        Ok(Self {
            vertices,
            elements,
            interior_edges,
            boundary_tags,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// Coordinates of the four corners of element `e`.
    pub fn corners(&self, e: usize) -> [[f64; 2]; 4] {
        let q = &self.elements[e];
        [
            self.vertices[q.vertices[0]],
            self.vertices[q.vertices[1]],
            self.vertices[q.vertices[2]],
            self.vertices[q.vertices[3]],
        ]
    }

    /// Bilinear map of element `e` at reference coordinates (xi, eta).
    pub fn map(&self, e: usize, xi: f64, eta: f64) -> [f64; 2] {
        let c = self.corners(e);
        let n = shape(xi, eta);
        [
            n[0] * c[0][0] + n[1] * c[1][0] + n[2] * c[2][0] + n[3] * c[3][0],
            n[0] * c[0][1] + n[1] * c[1][1] + n[2] * c[2][1] + n[3] * c[3][1],
        ]
    }

    /// Jacobian matrix of the bilinear map at (xi, eta), rows d(x,y)/d(xi,eta).
    pub fn jacobian(&self, e: usize, xi: f64, eta: f64) -> [[f64; 2]; 2] {
        let c = self.corners(e);
        let dn_dxi = [
            -(1.0 - eta) / 4.0,
            (1.0 - eta) / 4.0,
            (1.0 + eta) / 4.0,
            -(1.0 + eta) / 4.0,
        ];
        let dn_deta = [
            -(1.0 - xi) / 4.0,
            -(1.0 + xi) / 4.0,
            (1.0 + xi) / 4.0,
            (1.0 - xi) / 4.0,
        ];
        let mut j = [[0.0; 2]; 2];
        for v in 0..4 {
            j[0][0] += dn_dxi[v] * c[v][0];
            j[0][1] += dn_deta[v] * c[v][0];
            j[1][0] += dn_dxi[v] * c[v][1];
            j[1][1] += dn_deta[v] * c[v][1];
        }
        j
    }

    /// True when every boundary edge is tagged Dirichlet.
    pub fn is_pure_dirichlet(&self) -> bool {
        self.boundary_tags
            .values()
            .all(|&t| t == BoundaryTag::Dirichlet)
    }

    /// Apply a permutation to the element order (topology-preserving relabeling).
    pub fn permute_elements(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.elements.len() {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let elements: Vec<Quad> = perm.iter().map(|&e| self.elements[e]).collect();
        let mut inv = vec![0usize; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let tags = self
            .boundary_tags
            .iter()
            .map(|(&(e, le), &tag)| (inv[e], le, tag))
            .collect();
        Mesh::new(self.vertices.clone(), elements, tags)
    }

    /// Axis-aligned rectangular grid on [0, lx] x [0, ly] with nx-by-ny elements.
    /// All boundary edges tagged Dirichlet.
    pub fn rectangle(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        Self::rectangle_tagged(nx, ny, lx, ly, |_side| BoundaryTag::Dirichlet)
    }

    /// The study channel [0, length] x [0, height]: Dirichlet on the left
    /// (inflow) and on the walls, Neumann (natural outflow) on the right.
    pub fn channel(nx: usize, ny: usize, length: f64, height: f64) -> Result<Self> {
        Self::rectangle_tagged(nx, ny, length, height, |side| match side {
            Side::Right => BoundaryTag::Neumann,
            _ => BoundaryTag::Dirichlet,
        })
    }

    fn rectangle_tagged(
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
        tag_of: impl Fn(Side) -> BoundaryTag,
    ) -> Result<Self> {
        if nx == 0 || ny == 0 || lx <= 0.0 || ly <= 0.0 {
            return Err(Error::invalid("rectangle mesh needs positive extents"));
        }
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([lx * i as f64 / nx as f64, ly * j as f64 / ny as f64]);
            }
        }
        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        let mut elements = Vec::with_capacity(nx * ny);
        let mut tags = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let e = elements.len();
                elements.push(Quad {
                    vertices: [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)],
                });
                if j == 0 {
                    tags.push((e, 0, tag_of(Side::Bottom)));
                }
                if i + 1 == nx {
                    tags.push((e, 1, tag_of(Side::Right)));
                }
                if j + 1 == ny {
                    tags.push((e, 2, tag_of(Side::Top)));
                }
                if i == 0 {
                    tags.push((e, 3, tag_of(Side::Left)));
                }
            }
        }
        Mesh::new(vertices, elements, tags)
    }

    /// Serialize to the plain-text mesh format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("semrom-mesh v1\n");
        writeln!(s, "vertices {}", self.vertices.len()).unwrap();
        for v in &self.vertices {
            writeln!(s, "{:.17e} {:.17e}", v[0], v[1]).unwrap();
        }
        writeln!(s, "elements {}", self.elements.len()).unwrap();
        for q in &self.elements {
            writeln!(
                s,
                "{} {} {} {}",
                q.vertices[0], q.vertices[1], q.vertices[2], q.vertices[3]
            )
            .unwrap();
        }
        writeln!(s, "boundary {}", self.boundary_tags.len()).unwrap();
        for (&(e, le), tag) in &self.boundary_tags {
            let name = match tag {
                BoundaryTag::Dirichlet => "dirichlet",
                BoundaryTag::Neumann => "neumann",
            };
            writeln!(s, "{e} {le} {name}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| {
                let t = l.trim();
                !t.is_empty() && !t.starts_with('#')
            })
            .collect();
        let bad = |line: usize, msg: &str| Error::Mesh(format!("line {}: {msg}", line + 1));
        struct Cursor<'a> {
            lines: &'a [(usize, &'a str)],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
                let item = self
                    .lines
                    .get(self.pos)
                    .copied()
                    .ok_or_else(|| Error::Mesh(format!("truncated file: missing {what}")))?;
                self.pos += 1;
                Ok(item)
            }
            fn section(&mut self, keyword: &str) -> Result<usize> {
                let (ln, line) = self.next(keyword)?;
                let mut parts = line.split_whitespace();
                if parts.next() != Some(keyword) {
                    return Err(Error::Mesh(format!(
                        "line {}: expected `{keyword} <count>`",
                        ln + 1
                    )));
                }
                parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Mesh(format!("line {}: invalid count", ln + 1)))
            }
        }
        let mut cur = Cursor {
            lines: &lines,
            pos: 0,
        };
        let (ln, header) = cur.next("header")?;
        if header.trim() != "semrom-mesh v1" {
            return Err(bad(ln, "expected header `semrom-mesh v1`"));
        }
        let nv = cur.section("vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, line) = cur.next("vertex")?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(ln, "invalid vertex coordinates"))?;
            if vals.len() != 2 {
                return Err(bad(ln, "vertex line needs two coordinates"));
            }
            vertices.push([vals[0], vals[1]]);
        }
        let ne = cur.section("elements")?;
        let mut elements = Vec::with_capacity(ne);
        for _ in 0..ne {
            let (ln, line) = cur.next("element")?;
            let ids: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(ln, "invalid element vertex indices"))?;
            if ids.len() != 4 {
                return Err(bad(ln, "element line needs four vertex indices"));
            }
            elements.push(Quad {
                vertices: [ids[0], ids[1], ids[2], ids[3]],
            });
        }
        let nb = cur.section("boundary")?;
        let mut tags = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (ln, line) = cur.next("boundary tag")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad(ln, "boundary line needs `elem edge tag`"));
            }
            let e: usize = parts[0].parse().map_err(|_| bad(ln, "invalid element index"))?;
            let le: usize = parts[1].parse().map_err(|_| bad(ln, "invalid edge index"))?;
            let tag = match parts[2] {
                "dirichlet" => BoundaryTag::Dirichlet,
                "neumann" => BoundaryTag::Neumann,
                other => return Err(bad(ln, &format!("unknown tag `{other}`"))),
            };
            tags.push((e, le, tag));
        }
        Mesh::new(vertices, elements, tags)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Mesh(m) => Error::Mesh(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        crate::archive::atomic_write(path, self.to_text().as_bytes())
    }

    /// A stable byte signature of the geometry and topology, for grid checksums.
    pub fn signature_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for v in &self.vertices {
            bytes.extend_from_slice(&v[0].to_le_bytes());
            bytes.extend_from_slice(&v[1].to_le_bytes());
        }
        for q in &self.elements {
            for &v in &q.vertices {
                bytes.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        for (&(e, le), &tag) in &self.boundary_tags {
            bytes.extend_from_slice(&(e as u64).to_le_bytes());
            bytes.push(le as u8);
            bytes.push(match tag {
                BoundaryTag::Dirichlet => 0,
                BoundaryTag::Neumann => 1,
            });
        }
        bytes
    }
}

#[derive(Debug, Clone, Copy)]
enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Bilinear shape functions on the reference square, CCW vertex order.
pub fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        (1.0 - xi) * (1.0 - eta) / 4.0,
        (1.0 + xi) * (1.0 - eta) / 4.0,
        (1.0 + xi) * (1.0 + eta) / 4.0,
        (1.0 - xi) * (1.0 + eta) / 4.0,
    ]
}
