//! Marching cubes over a cubic scalar field.
//!
//! The 256-entry case table is generated once at first use instead of being
//! transcribed: for every corner configuration, cut edges are paired on each
//! face around maximal arcs of inside corners (which keeps diagonal inside
//! corners separated on ambiguous faces), chained into closed polygon loops,
//! and fan-triangulated. Pairing depends only on the face's own corner
//! signs, so neighboring cubes always agree on shared faces and the output
//! is watertight wherever the field is unambiguous; orientation follows
//! "inside = value > iso" with outward normals.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::Mesh;

/// A `res^3` scalar field sampled at cell centers `(i + 0.5) / res`,
/// row-major (x outermost).
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub res: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(res: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), res * res * res, "field size mismatch");
        ScalarField { res, values }
    }

    pub fn from_fn(res: usize, f: impl Fn([f64; 3]) -> f64) -> Self {
        let mut values = Vec::with_capacity(res * res * res);
        for x in 0..res {
            for y in 0..res {
                for z in 0..res {
                    values.push(f([
                        (x as f64 + 0.5) / res as f64,
                        (y as f64 + 0.5) / res as f64,
                        (z as f64 + 0.5) / res as f64,
                    ]));
                }
            }
        }
        ScalarField { res, values }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(x * self.res + y) * self.res + z]
    }

    fn pos(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            (x as f64 + 0.5) / self.res as f64,
            (y as f64 + 0.5) / self.res as f64,
            (z as f64 + 0.5) / self.res as f64,
        ]
    }
}

/// Corner offset bits: bit0 = x, bit1 = y, bit2 = z.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as (low corner, high corner), grouped by axis.
fn edge_list() -> [(usize, usize, usize); 12] {
    let mut edges = [(0, 0, 0); 12];
    let mut idx = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                edges[idx] = (c, c | (1 << axis), axis);
                idx += 1;
            }
        }
    }
    edges
}

/// Face corner cycles, ordered so the triangle fans come out with outward
/// normals for "inside = high values".
fn face_cycles() -> [[usize; 4]; 6] {
    // (u, v) bases per face axis chosen right-handed with the outward normal.
    let uv = [(1usize, 2usize), (2, 0), (0, 1)];
    let mut faces = [[0usize; 4]; 6];
    for axis in 0..3 {
        for side in 0..2 {
            let (u, v) = uv[axis];
            let order: [(usize, usize); 4] = if side == 1 {
                [(0, 0), (1, 0), (1, 1), (0, 1)]
            } else {
                [(0, 0), (0, 1), (1, 1), (1, 0)]
            };
            let mut cycle = [0usize; 4];
            for (k, (bu, bv)) in order.iter().enumerate() {
                cycle[k] = (side << axis) | (bu << u) | (bv << v);
            }
            faces[axis * 2 + side] = cycle;
        }
    }
    faces
}

/// Triangles (as edge-id triples) for each of the 256 configurations.
fn build_tables() -> Vec<Vec<[u8; 3]>> {
    let edges = edge_list();
    let mut edge_of_pair = [[usize::MAX; 8]; 8];
    for (i, &(a, b, _)) in edges.iter().enumerate() {
        edge_of_pair[a][b] = i;
        edge_of_pair[b][a] = i;
    }
    let faces = face_cycles();
    let mut table = Vec::with_capacity(256);
    for config in 0..256usize {
        let inside = |c: usize| config & (1 << c) != 0;
        // Directed segments between cut edges, one per inside-arc per face.
        let mut next: HashMap<usize, usize> = HashMap::new();
        for cycle in &faces {
            let flags: Vec<bool> = cycle.iter().map(|&c| inside(c)).collect();
            if flags.iter().all(|&f| f) || !flags.iter().any(|&f| f) {
                continue;
            }
            for start in 0..4 {
                // Maximal arcs begin where an inside corner follows an
                // outside one.
                if !flags[start] || flags[(start + 3) % 4] {
                    continue;
                }
                let mut end = start;
                while flags[(end + 1) % 4] {
                    end = (end + 1) % 4;
                }
                let entering = edge_of_pair[cycle[(start + 3) % 4]][cycle[start]];
                let leaving = edge_of_pair[cycle[end]][cycle[(end + 1) % 4]];
                let prev = next.insert(entering, leaving);
                debug_assert!(prev.is_none(), "config {config}: duplicate segment start");
            }
        }
        // Chain segments into closed loops and fan-triangulate.
        let mut tris: Vec<[u8; 3]> = Vec::new();
        let mut visited: Vec<usize> = Vec::new();
        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        for &s in &starts {
            if visited.contains(&s) {
                continue;
            }
            let mut loop_edges = vec![s];
            let mut cur = next[&s];
            while cur != s {
                loop_edges.push(cur);
                cur = next[&cur];
            }
            visited.extend(&loop_edges);
            for i in 1..loop_edges.len() - 1 {
                tris.push([loop_edges[0] as u8, loop_edges[i] as u8, loop_edges[i + 1] as u8]);
            }
        }
        table.push(tris);
    }
    table
}

fn tables() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLES: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLES.get_or_init(build_tables)
}

/// Extracts the `iso` level set as an indexed triangle mesh with vertices
/// interpolated along lattice edges and welded across cubes.
pub fn marching_cubes(field: &ScalarField, iso: f64) -> Mesh {
    let res = field.res;
    let mut mesh = Mesh::default();
    if res < 2 {
        return mesh;
    }
    let edges = edge_list();
    let table = tables();
    // Global edge key (lattice point of the low corner, axis) -> vertex id.
    let mut vertex_ids: HashMap<(usize, usize, usize, usize), u32> = HashMap::new();
    for x in 0..res - 1 {
        for y in 0..res - 1 {
            for z in 0..res - 1 {
                let mut vals = [0.0f64; 8];
                let mut config = 0usize;
                for (c, v) in vals.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    *v = field.at(x + o[0], y + o[1], z + o[2]);
                    if *v > iso {
                        config |= 1 << c;
                    }
                }
                let tris = &table[config];
                if tris.is_empty() {
                    continue;
                }
                let mut local_vertex = |e: usize, mesh: &mut Mesh| -> u32 {
                    let (c0, c1, axis) = edges[e];
                    let o0 = corner_offset(c0);
                    let key = (x + o0[0], y + o0[1], z + o0[2], axis);
                    if let Some(&id) = vertex_ids.get(&key) {
                        return id;
                    }
                    let o1 = corner_offset(c1);
                    let p0 = field.pos(x + o0[0], y + o0[1], z + o0[2]);
                    let p1 = field.pos(x + o1[0], y + o1[1], z + o1[2]);
                    let (v0, v1) = (vals[c0], vals[c1]);
                    // Clamping keeps vertices distinct when the iso level
                    // grazes a lattice value.
                    let t = ((iso - v0) / (v1 - v0)).clamp(1e-6, 1.0 - 1e-6);
                    let p = [
                        p0[0] + t * (p1[0] - p0[0]),
                        p0[1] + t * (p1[1] - p0[1]),
                        p0[2] + t * (p1[2] - p0[2]),
                    ];
                    let id = mesh.vertices.len() as u32;
                    mesh.vertices.push(p);
                    vertex_ids.insert(key, id);
                    id
                };
                for t in tris {
                    let a = local_vertex(t[0] as usize, &mut mesh);
                    let b = local_vertex(t[1] as usize, &mut mesh);
                    let c = local_vertex(t[2] as usize, &mut mesh);
                    mesh.triangles.push([a, b, c]);
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImplicitShape;

    #[test]
    fn generated_table_has_classic_counts() {
        let t = tables();
        assert_eq!(t.len(), 256);
        assert!(t[0].is_empty());
        assert!(t[255].is_empty());
        // Single corner inside (or outside) is one triangle.
        assert_eq!(t[1].len(), 1);
        assert_eq!(t[254].len(), 1);
        // Two adjacent corners along x: a quad = 2 triangles.
        assert_eq!(t[0b11].len(), 2);
    }

    #[test]
    fn empty_field_gives_empty_mesh() {
        let f = ScalarField::new(8, vec![0.0; 512]);
        let m = marching_cubes(&f, 0.5);
        assert!(m.is_empty());
    }

    #[test]
    fn sphere_mesh_topology_and_orientation() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        let f = ScalarField::from_fn(32, |p| 0.5 - s.sdf(p));
        let m = marching_cubes(&f, 0.5);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        let vol = m.signed_volume();
        let truth = 4.0 / 3.0 * std::f64::consts::PI * 0.3f64.powi(3);
        assert!(vol > 0.0, "signed volume {vol} should be positive (outward)");
        assert!((vol - truth).abs() / truth < 0.05, "volume {vol} vs {truth}");
    }

    #[test]
    fn torus_mesh_has_genus_one() {
        let t = ImplicitShape::torus([0.5, 0.5, 0.5], 0.24, 0.08).unwrap();
        let f = ScalarField::from_fn(48, |p| 0.5 - t.sdf(p));
        let m = marching_cubes(&f, 0.5);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 0);
    }

    #[test]
    fn binary_occupancy_field_still_meshes() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.25).unwrap();
        let f = ScalarField::from_fn(24, |p| if s.occupied(p) { 1.0 } else { 0.0 });
        let m = marching_cubes(&f, 0.5);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
    }
}
