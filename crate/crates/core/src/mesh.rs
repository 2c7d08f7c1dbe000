//! Structured hexahedral meshes for layered builds on a substrate slab.
//!
//! Corner ordering of an element (local coordinates in `[-1, 1]^3`):
//!
//! ```text
//!   0: (-,-,-)  1: (+,-,-)  2: (+,+,-)  3: (-,+,-)
//!   4: (-,-,+)  5: (+,-,+)  6: (+,+,+)  7: (-,+,+)
//! ```
//!
//! Local faces are ordered `-x, +x, -y, +y, -z, +z`. The four nodes of each
//! face (see [`FACE_NODES`]) run counterclockwise when viewed from outside, so
//! `(p1 - p0) x (p3 - p0)` points along the outward normal.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::shape::{gauss_points_3d, shape_eval};

pub type NodeId = usize;
pub type ElementId = usize;

/// Local node indices of the six faces, outward-facing counterclockwise.
pub const FACE_NODES: [[usize; 4]; 6] = [
    [0, 4, 7, 3],
    [1, 2, 6, 5],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 3, 2, 1],
    [4, 5, 6, 7],
];

/// Outward unit normal of each local face on an axis-aligned element.
pub const FACE_NORMALS: [[f64; 3]; 6] = [
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0],
];

pub const FACE_NEG_Z: u8 = 4;
pub const FACE_POS_Z: u8 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate element {element}: jacobian determinant {det:e}")]
    Degenerate { element: ElementId, det: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementTag {
    Substrate,
    Build,
}

/// An element face: the element and its local face index (0..6).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaceKey {
    pub element: ElementId,
    pub face: u8,
}

/// A free (exposed) face of an active element set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeFace {
    pub key: FaceKey,
    /// Bottom face of the substrate slab; eligible for the fixed-temperature boundary.
    pub dirichlet_eligible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexMesh {
    pub nodes: Vec<[f64; 3]>,
    pub elements: Vec<[NodeId; 8]>,
    pub tags: Vec<ElementTag>,
    pub element_size: [f64; 3],
}

/// Layered build profile. Each entry of `layer_half_widths` is measured in
/// half-element units, so layer `i` occupies a centered square footprint of
/// `layer_half_widths[i]` x `layer_half_widths[i]` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct HourglassSpec {
    pub layer_half_widths: Vec<usize>,
    pub substrate_extent: [usize; 3],
    pub element_size: [f64; 3],
}

impl HourglassSpec {
    pub fn n_layers(&self) -> usize {
        self.layer_half_widths.len()
    }
}

fn check_size(size: [f64; 3]) -> Result<(), MeshError> {
    if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(MeshError::InvalidArgument(format!(
            "element size must be positive and finite, got {size:?}"
        )));
    }
    Ok(())
}

/// Builder over integer grid coordinates. Nodes are numbered in `(k, j, i)`
/// lexicographic order of the grid nodes actually referenced, elements in
/// `(k, j, i)` order of their lower corner.
struct GridBuilder {
    size: [f64; 3],
    z_base: i64,
    cells: Vec<([i64; 3], ElementTag)>,
}

impl GridBuilder {
    fn finish(mut self) -> HexMesh {
        self.cells.sort_by_key(|(c, _)| (c[2], c[1], c[0]));
        let mut used = BTreeSet::new();
        for (c, _) in &self.cells {
            for corner in cell_corners(*c) {
                used.insert((corner[2], corner[1], corner[0]));
            }
        }
        let mut ids = HashMap::with_capacity(used.len());
        let mut nodes = Vec::with_capacity(used.len());
        for (id, &(k, j, i)) in used.iter().enumerate() {
            ids.insert([i, j, k], id);
            nodes.push([
                i as f64 * self.size[0],
                j as f64 * self.size[1],
                (k - self.z_base) as f64 * self.size[2],
            ]);
        }
        let mut elements = Vec::with_capacity(self.cells.len());
        let mut tags = Vec::with_capacity(self.cells.len());
        for (c, tag) in &self.cells {
            let corners = cell_corners(*c);
            let mut conn = [0; 8];
            for (a, corner) in corners.iter().enumerate() {
                conn[a] = ids[corner];
            }
            elements.push(conn);
            tags.push(*tag);
        }
        HexMesh {
            nodes,
            elements,
            tags,
            element_size: self.size,
        }
    }
}

fn cell_corners(c: [i64; 3]) -> [[i64; 3]; 8] {
    let [i, j, k] = c;
    [
        [i, j, k],
        [i + 1, j, k],
        [i + 1, j + 1, k],
        [i, j + 1, k],
        [i, j, k + 1],
        [i + 1, j, k + 1],
        [i + 1, j + 1, k + 1],
        [i, j + 1, k + 1],
    ]
}

/// Axis-aligned block of `nx * ny * nz` elements. Substrate blocks occupy
/// `z in [-nz dz, 0]`, build blocks `z in [0, nz dz]`.
pub fn build_block_mesh(
    nx: usize,
    ny: usize,
    nz: usize,
    size: [f64; 3],
    tag: ElementTag,
) -> Result<HexMesh, MeshError> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(MeshError::InvalidArgument(format!(
            "block counts must be >= 1, got ({nx}, {ny}, {nz})"
        )));
    }
    check_size(size)?;
    let z_base = match tag {
        ElementTag::Substrate => nz as i64,
        ElementTag::Build => 0,
    };
    let mut cells = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz as i64 {
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                cells.push(([i, j, k], tag));
            }
        }
    }
    Ok(GridBuilder {
        size,
        z_base,
        cells,
    }
    .finish())
}

/// Substrate slab plus layers of rectangular footprints `(sx, sy)` elements,
/// each centered on the substrate (offset rounded down when the parity of the
/// substrate and footprint differ).
pub fn build_layered_mesh(
    substrate: [usize; 3],
    layers: &[(usize, usize)],
    size: [f64; 3],
) -> Result<HexMesh, MeshError> {
    let [nx, ny, nz] = substrate;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(MeshError::InvalidArgument(format!(
            "substrate counts must be >= 1, got {substrate:?}"
        )));
    }
    check_size(size)?;
    let mut cells = Vec::new();
    for k in 0..nz as i64 {
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                cells.push(([i, j, k], ElementTag::Substrate));
            }
        }
    }
    for (layer, &(sx, sy)) in layers.iter().enumerate() {
        if sx == 0 || sy == 0 {
            return Err(MeshError::InvalidArgument(format!(
                "layer {layer} has an empty footprint"
            )));
        }
        if sx > nx || sy > ny {
            return Err(MeshError::InvalidArgument(format!(
                "layer {layer} footprint {sx}x{sy} is wider than the {nx}x{ny} substrate"
            )));
        }
        let ox = ((nx - sx) / 2) as i64;
        let oy = ((ny - sy) / 2) as i64;
        let k = (nz + layer) as i64;
        for j in 0..sy as i64 {
            for i in 0..sx as i64 {
                cells.push(([ox + i, oy + j, k], ElementTag::Build));
            }
        }
    }
    Ok(GridBuilder {
        size,
        z_base: nz as i64,
        cells,
    }
    .finish())
}

/// Hourglass build: a substrate slab with one centered square footprint per layer.
pub fn build_hourglass_mesh(spec: &HourglassSpec) -> Result<HexMesh, MeshError> {
    let widths = &spec.layer_half_widths;
    if widths.is_empty() {
        return Err(MeshError::InvalidArgument(
            "hourglass needs at least one layer".into(),
        ));
    }
    if widths.contains(&0) {
        return Err(MeshError::InvalidArgument(
            "layer half-widths must be >= 1".into(),
        ));
    }
    // non-increasing prefix followed by a non-decreasing suffix
    let mut rising = false;
    for pair in widths.windows(2) {
        if pair[1] > pair[0] {
            rising = true;
        } else if pair[1] < pair[0] && rising {
            return Err(MeshError::InvalidArgument(format!(
                "half-widths {widths:?} are not an hourglass profile"
            )));
        }
    }
    let layers: Vec<_> = widths.iter().map(|&w| (w, w)).collect();
    build_layered_mesh(spec.substrate_extent, &layers, spec.element_size)
}

impl HexMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_coords(&self, e: ElementId) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (a, &n) in self.elements[e].iter().enumerate() {
            out[a] = self.nodes[n];
        }
        out
    }

    pub fn element_center(&self, e: ElementId) -> [f64; 3] {
        let mut c = [0.0; 3];
        for n in self.elements[e] {
            for d in 0..3 {
                c[d] += self.nodes[n][d];
            }
        }
        c.map(|v| v / 8.0)
    }

    pub fn face_nodes(&self, key: FaceKey) -> [NodeId; 4] {
        let conn = &self.elements[key.element];
        FACE_NODES[key.face as usize].map(|a| conn[a])
    }

    pub fn build_elements(&self) -> impl Iterator<Item = ElementId> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == ElementTag::Build)
            .map(|(e, _)| e)
    }

    /// Lowest node z, the plane of the substrate bottom.
    pub fn z_min(&self) -> f64 {
        self.nodes
            .iter()
            .map(|p| p[2])
            .fold(f64::INFINITY, f64::min)
    }

    /// For every element face, the element across it (if any).
    pub fn face_adjacency(&self) -> Vec<[Option<ElementId>; 6]> {
        let mut owners: HashMap<[NodeId; 4], FaceKey> =
            HashMap::with_capacity(self.elements.len() * 6);
        let mut adj = vec![[None; 6]; self.elements.len()];
        for e in 0..self.elements.len() {
            for f in 0..6u8 {
                let key = FaceKey {
                    element: e,
                    face: f,
                };
                let mut sorted = self.face_nodes(key);
                sorted.sort_unstable();
                if let Some(other) = owners.remove(&sorted) {
                    adj[e][f as usize] = Some(other.element);
                    adj[other.element][other.face as usize] = Some(e);
                } else {
                    owners.insert(sorted, key);
                }
            }
        }
        adj
    }

    fn is_bottom_face(&self, key: FaceKey, z_min: f64) -> bool {
        if key.face != FACE_NEG_Z || self.tags[key.element] != ElementTag::Substrate {
            return false;
        }
        let tol = 1e-9 * self.element_size[2];
        self.face_nodes(key)
            .iter()
            .all(|&n| (self.nodes[n][2] - z_min).abs() <= tol)
    }

    /// Faces of the active elements that are not shared with another active
    /// element, sorted by `(element, face)`.
    pub fn free_faces(&self, active: &[ElementId]) -> Result<Vec<FreeFace>, MeshError> {
        let adj = self.face_adjacency();
        self.free_faces_with(&adj, active)
    }

    pub fn free_faces_with(
        &self,
        adjacency: &[[Option<ElementId>; 6]],
        active: &[ElementId],
    ) -> Result<Vec<FreeFace>, MeshError> {
        let mut mask = vec![false; self.elements.len()];
        for &e in active {
            if e >= self.elements.len() {
                return Err(MeshError::InvalidArgument(format!(
                    "unknown element id {e}"
                )));
            }
            mask[e] = true;
        }
        let z_min = self.z_min();
        let mut out = Vec::new();
        for e in (0..self.elements.len()).filter(|&e| mask[e]) {
            for f in 0..6u8 {
                let covered = adjacency[e][f as usize].is_some_and(|o| mask[o]);
                if !covered {
                    let key = FaceKey {
                        element: e,
                        face: f,
                    };
                    out.push(FreeFace {
                        key,
                        dirichlet_eligible: self.is_bottom_face(key, z_min),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Checks connectivity and the jacobian sign at every 2x2x2 Gauss point.
    pub fn validate(&self) -> Result<(), MeshError> {
        check_size(self.element_size)?;
        if self.tags.len() != self.elements.len() {
            return Err(MeshError::InvalidArgument(format!(
                "{} tags for {} elements",
                self.tags.len(),
                self.elements.len()
            )));
        }
        for (e, conn) in self.elements.iter().enumerate() {
            let mut s = *conn;
            s.sort_unstable();
            if s.windows(2).any(|w| w[0] == w[1]) || s[7] >= self.nodes.len() {
                return Err(MeshError::InvalidArgument(format!(
                    "element {e} has repeated or out-of-range nodes"
                )));
            }
            let x = self.element_coords(e);
            for (xi, _) in gauss_points_3d() {
                let det = jacobian_det(&x, xi);
                if !(det > 0.0) {
                    return Err(MeshError::Degenerate { element: e, det });
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn jacobian_det(x: &[[f64; 3]; 8], xi: [f64; 3]) -> f64 {
    let (_, dn) = shape_eval(xi);
    let mut j = [[0.0; 3]; 3];
    for a in 0..8 {
        for r in 0..3 {
            for c in 0..3 {
                j[r][c] += x[a][r] * dn[a][c];
            }
        }
    }
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

/// Integer grid coordinates of a structured mesh, recovered from node
/// positions and the element size.
#[derive(Debug, Clone)]
pub struct GridIndex {
    pub origin: [f64; 3],
    pub size: [f64; 3],
    node_at: HashMap<[i64; 3], NodeId>,
    coords: Vec<[i64; 3]>,
}

impl GridIndex {
    pub fn new(mesh: &HexMesh) -> Self {
        let mut origin = [f64::INFINITY; 3];
        for p in &mesh.nodes {
            for d in 0..3 {
                origin[d] = origin[d].min(p[d]);
            }
        }
        let size = mesh.element_size;
        let mut node_at = HashMap::with_capacity(mesh.nodes.len());
        let mut coords = Vec::with_capacity(mesh.nodes.len());
        for (id, p) in mesh.nodes.iter().enumerate() {
            let c = [0, 1, 2].map(|d| ((p[d] - origin[d]) / size[d]).round() as i64);
            node_at.insert(c, id);
            coords.push(c);
        }
        GridIndex {
            origin,
            size,
            node_at,
            coords,
        }
    }

    pub fn node(&self, c: [i64; 3]) -> Option<NodeId> {
        self.node_at.get(&c).copied()
    }

    pub fn coords(&self, n: NodeId) -> [i64; 3] {
        self.coords[n]
    }

    /// Grid plane index of a z coordinate (rounded).
    pub fn plane_of(&self, z: f64) -> i64 {
        ((z - self.origin[2]) / self.size[2]).round() as i64
    }

    pub fn plane_z(&self, k: i64) -> f64 {
        self.origin[2] + k as f64 * self.size[2]
    }

    /// Lower-corner grid coordinates of an element.
    pub fn element_cell(&self, mesh: &HexMesh, e: ElementId) -> [i64; 3] {
        self.coords[mesh.elements[e][0]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MM: [f64; 3] = [1e-3, 1e-3, 1e-3];

    fn brute_free_face_count(mesh: &HexMesh, active: &[ElementId]) -> usize {
        let mut shared = 0;
        for (ia, &a) in active.iter().enumerate() {
            for &b in &active[ia + 1..] {
                for fa in 0..6u8 {
                    let mut na = mesh.face_nodes(FaceKey {
                        element: a,
                        face: fa,
                    });
                    na.sort_unstable();
                    for fb in 0..6u8 {
                        let mut nb = mesh.face_nodes(FaceKey {
                            element: b,
                            face: fb,
                        });
                        nb.sort_unstable();
                        if na == nb {
                            shared += 1;
                        }
                    }
                }
            }
        }
        6 * active.len() - 2 * shared
    }

    #[test]
    fn block_counts() {
        let m = build_block_mesh(1, 1, 1, MM, ElementTag::Build).unwrap();
        assert_eq!((m.n_nodes(), m.n_elements()), (8, 1));
        let m = build_block_mesh(2, 2, 1, MM, ElementTag::Build).unwrap();
        assert_eq!((m.n_nodes(), m.n_elements()), (18, 4));
        let m = build_block_mesh(10, 10, 2, MM, ElementTag::Substrate).unwrap();
        assert_eq!((m.n_nodes(), m.n_elements()), (363, 200));
        assert!(m.nodes.iter().all(|p| p[2] <= 0.0));
        m.validate().unwrap();
    }

    #[test]
    fn block_rejects_bad_arguments() {
        assert!(build_block_mesh(0, 1, 1, MM, ElementTag::Build).is_err());
        assert!(build_block_mesh(1, 1, 1, [1e-3, -1e-3, 1e-3], ElementTag::Build).is_err());
    }

    #[test]
    fn hourglass_counts() {
        let spec = HourglassSpec {
            layer_half_widths: vec![1],
            substrate_extent: [3, 3, 1],
            element_size: MM,
        };
        let m = build_hourglass_mesh(&spec).unwrap();
        let build = m.build_elements().count();
        assert_eq!((m.n_elements() - build, build), (9, 1));

        let spec = HourglassSpec {
            layer_half_widths: vec![2, 1, 2],
            substrate_extent: [5, 5, 1],
            element_size: MM,
        };
        let m = build_hourglass_mesh(&spec).unwrap();
        assert_eq!(m.build_elements().count(), 9);
        m.validate().unwrap();
        for e in m.build_elements() {
            assert!(m.element_center(e)[2] > 0.0);
        }
    }

    #[test]
    fn hourglass_rejects_bad_profiles() {
        let mut spec = HourglassSpec {
            layer_half_widths: vec![],
            substrate_extent: [5, 5, 1],
            element_size: MM,
        };
        assert!(build_hourglass_mesh(&spec).is_err());
        spec.layer_half_widths = vec![6];
        assert!(build_hourglass_mesh(&spec).is_err());
        spec.layer_half_widths = vec![1, 2, 1];
        assert!(build_hourglass_mesh(&spec).is_err());
    }

    #[test]
    fn free_face_examples() {
        let m = build_block_mesh(1, 1, 2, MM, ElementTag::Build).unwrap();
        assert_eq!(m.free_faces(&[0]).unwrap().len(), 6);
        assert_eq!(m.free_faces(&[0, 1]).unwrap().len(), 10);
        let m = build_block_mesh(2, 2, 2, MM, ElementTag::Build).unwrap();
        let all: Vec<_> = (0..8).collect();
        assert_eq!(m.free_faces(&all).unwrap().len(), 24);
        assert!(m.free_faces(&[8]).is_err());
    }

    #[test]
    fn bottom_faces_are_dirichlet_eligible() {
        let m = build_block_mesh(2, 1, 2, MM, ElementTag::Substrate).unwrap();
        let all: Vec<_> = (0..m.n_elements()).collect();
        let faces = m.free_faces(&all).unwrap();
        let bottom: Vec<_> = faces.iter().filter(|f| f.dirichlet_eligible).collect();
        assert_eq!(bottom.len(), 2);
        assert!(bottom.iter().all(|f| f.key.face == FACE_NEG_Z));
    }

    #[test]
    fn face_normals_point_outward() {
        let m = build_block_mesh(1, 1, 1, [1.0, 2.0, 3.0], ElementTag::Build).unwrap();
        let c = m.element_center(0);
        for f in 0..6u8 {
            let n = m.face_nodes(FaceKey {
                element: 0,
                face: f,
            });
            let p: Vec<[f64; 3]> = n.iter().map(|&i| m.nodes[i]).collect();
            let u = [0, 1, 2].map(|d| p[1][d] - p[0][d]);
            let v = [0, 1, 2].map(|d| p[3][d] - p[0][d]);
            let cross = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let centroid = [0, 1, 2].map(|d| p.iter().map(|q| q[d]).sum::<f64>() / 4.0);
            let out = [0, 1, 2].map(|d| centroid[d] - c[d]);
            let dot: f64 = (0..3).map(|d| cross[d] * out[d]).sum();
            assert!(dot > 0.0, "face {f}");
            let norm = cross.iter().map(|v| v * v).sum::<f64>().sqrt();
            for d in 0..3 {
                assert!((cross[d] / norm - FACE_NORMALS[f as usize][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = HourglassSpec {
            layer_half_widths: vec![4, 3, 2, 3, 4],
            substrate_extent: [6, 6, 2],
            element_size: [5e-4, 5e-4, 2.5e-4],
        };
        let a = build_hourglass_mesh(&spec).unwrap();
        let b = build_hourglass_mesh(&spec).unwrap();
        assert_eq!(a, b);
        let bits = |m: &HexMesh| {
            m.nodes
                .iter()
                .flatten()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn free_face_count_matches_pairwise_matching(
            nx in 1usize..4, ny in 1usize..4, nz in 1usize..4,
            mask in proptest::collection::vec(any::<bool>(), 27),
        ) {
            let m = build_block_mesh(nx, ny, nz, MM, ElementTag::Build).unwrap();
            let active: Vec<_> = (0..m.n_elements()).filter(|&e| mask[e]).collect();
            let faces = m.free_faces(&active).unwrap();
            prop_assert_eq!(faces.len(), brute_free_face_count(&m, &active));
            let mut keys: Vec<_> = faces.iter().map(|f| f.key).collect();
            keys.dedup();
            prop_assert_eq!(keys.len(), faces.len());
        }
    }
}
