//! Category template: SDF network on a tetrahedral lattice, extracted to a
//! triangle mesh with marching tetrahedra.
//!
//! Vertex positions are linear zero crossings `a + t (b - a)` with
//! `t = s_a / (s_a - s_b)`, recorded on the tape so gradients reach the SDF
//! values (and through them the SDF network). Topology is recomputed from
//! the current signs on every extraction and is treated as constant.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Activation, Mlp, Module, Real, Tape, Tensor, Var};

/// Regular lattice over `[-1, 1]^3`, each cube split into 6 tetrahedra that
/// share the cube's main diagonal (Freudenthal split, same in every cube so
/// faces conform across neighbours).
#[derive(Clone, Debug, PartialEq)]
pub struct TetGrid {
    resolution: usize,
    positions: Vec<[f64; 3]>,
    tets: Vec<[u32; 4]>,
    boundary: Vec<bool>,
}

fn signed_volume(p: &[[f64; 3]], t: &[u32; 4]) -> f64 {
    let o = p[t[0] as usize];
    let d = |i: usize| {
        let q = p[t[i] as usize];
        [q[0] - o[0], q[1] - o[1], q[2] - o[2]]
    };
    let (a, b, c) = (d(1), d(2), d(3));
    (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0]))
        / 6.0
}

impl TetGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Invalid("tet grid resolution must be positive".into()));
        }
        let r = resolution;
        let n = r + 1;
        let id = |i: usize, j: usize, k: usize| (i + n * (j + n * k)) as u32;
        let mut positions = Vec::with_capacity(n * n * n);
        let mut boundary = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let c = |v: usize| -1.0 + 2.0 * v as f64 / r as f64;
                    positions.push([c(i), c(j), c(k)]);
                    boundary.push(i == 0 || j == 0 || k == 0 || i == r || j == r || k == r);
                }
            }
        }
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut tets = Vec::with_capacity(6 * r * r * r);
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    for perm in PERMS {
                        let mut c = [i, j, k];
                        let mut t = [id(c[0], c[1], c[2]), 0, 0, 0];
                        for (s, &axis) in perm.iter().enumerate() {
                            c[axis] += 1;
                            t[s + 1] = id(c[0], c[1], c[2]);
                        }
                        if signed_volume(&positions, &t) < 0.0 {
                            t.swap(2, 3);
                        }
                        tets.push(t);
                    }
                }
            }
        }
        Ok(TetGrid {
            resolution,
            positions,
            tets,
            boundary,
        })
    }

    /// Arbitrary tetrahedra (used for case-table checks).
    pub fn from_parts(positions: Vec<[f64; 3]>, tets: Vec<[u32; 4]>) -> Result<Self> {
        let mut tets = tets;
        for t in &mut tets {
            if t.iter().any(|&i| i as usize >= positions.len()) {
                return Err(Error::Invalid("tet references a missing node".into()));
            }
            let v = signed_volume(&positions, t);
            if v.abs() < 1e-15 {
                return Err(Error::Invalid("degenerate tetrahedron".into()));
            }
            if v < 0.0 {
                t.swap(2, 3);
            }
        }
        let boundary = vec![false; positions.len()];
        Ok(TetGrid {
            resolution: 0,
            positions,
            tets,
            boundary,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Edge length of a lattice cube.
    pub fn cell_size(&self) -> f64 {
        2.0 / self.resolution.max(1) as f64
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn tets(&self) -> &[[u32; 4]] {
        &self.tets
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    pub fn tet_volume(&self, i: usize) -> f64 {
        signed_volume(&self.positions, &self.tets[i])
    }

    pub fn node_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.positions.iter().flat_map(|p| p.iter().map(|&x| T::c(x))).collect();
        Tensor::new(vec![self.positions.len(), 3], data).expect("shape")
    }
}

/// Where an extracted vertex came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VertexOrigin {
    /// Grid nodes of the crossing edge, lower id first.
    pub nodes: (u32, u32),
    /// Interpolation weight from the first node.
    pub t: f64,
}

/// Triangle surface with optional per-vertex features.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh<T> {
    /// `[N, 3]` positions.
    pub vertices: Tensor<T>,
    pub faces: Vec<[u32; 3]>,
    pub edges: Vec<[u32; 2]>,
    /// `[N, D]` unit-norm rows once filled by the feature field.
    pub features: Option<Tensor<T>>,
    pub provenance: Vec<VertexOrigin>,
}

impl<T: Real> Mesh<T> {
    pub fn new(vertices: Tensor<T>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.ndim() != 2 || vertices.cols() != 3 {
            return Err(Error::Shape(format!("vertices must be [N, 3], got {:?}", vertices.shape())));
        }
        let n = vertices.rows() as u32;
        if faces.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Invalid("face references a missing vertex".into()));
        }
        let edges = edge_list(&faces);
        Ok(Mesh {
            vertices,
            faces,
            edges,
            features: None,
            provenance: Vec::new(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        let r = self.vertices.row(i);
        [r[0].f64(), r[1].f64(), r[2].f64()]
    }

    /// Same topology with new positions.
    pub fn with_vertices(&self, vertices: Tensor<T>) -> Self {
        assert_eq!(vertices.shape(), self.vertices.shape(), "vertex shape changed");
        Mesh {
            vertices,
            ..self.clone()
        }
    }

    /// Every undirected edge is used by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !count.is_empty() && count.values().all(|&c| c == 2)
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertex_count()];
        self.faces.iter().flatten().for_each(|&i| used[i as usize] = true);
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// Wavefront OBJ with `v` and 1-indexed `f` records.
    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.vertex_count() {
            let p = self.vertex(i);
            writeln!(w, "v {} {} {}", p[0], p[1], p[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    pub fn export_obj(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_obj(&mut buf)
            .and_then(|_| buf.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Unique undirected edges of a face set, sorted.
pub fn edge_list(faces: &[[u32; 3]]) -> Vec<[u32; 2]> {
    let mut e: Vec<[u32; 2]> = faces
        .iter()
        .flat_map(|f| (0..3).map(move |k| (f[k], f[(k + 1) % 3])))
        .filter(|(a, b)| a != b)
        .map(|(a, b)| [a.min(b), a.max(b)])
        .collect();
    e.sort_unstable();
    e.dedup();
    e
}

/// Sign-crossing structure of one extraction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Topology {
    /// Grid edge `(a, b)`, `a < b`, per output vertex.
    pub crossings: Vec<(u32, u32)>,
    pub faces: Vec<[u32; 3]>,
}

#[inline]
fn inside(s: f64) -> bool {
    // zero counts as outside
    s < 0.0
}

/// Classify nodes and emit the triangle list for a set of SDF samples.
pub fn extract_topology(grid: &TetGrid, sdf: &[f64]) -> Topology {
    assert_eq!(sdf.len(), grid.node_count(), "one SDF value per grid node");
    let mut index: HashMap<(u32, u32), u32> = HashMap::new();
    let mut topo = Topology::default();
    let pos = &grid.positions;
    let mut vertex = |a: u32, b: u32, topo: &mut Topology| -> u32 {
        let key = (a.min(b), a.max(b));
        *index.entry(key).or_insert_with(|| {
            topo.crossings.push(key);
            (topo.crossings.len() - 1) as u32
        })
    };
    let mid = |a: u32, b: u32| {
        let (p, q) = (pos[a as usize], pos[b as usize]);
        [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]
    };
    let centroid = |ids: &[u32]| {
        let mut c = [0.0; 3];
        for &i in ids {
            for k in 0..3 {
                c[k] += pos[i as usize][k] / ids.len() as f64;
            }
        }
        c
    };
    for tet in &grid.tets {
        let ins: Vec<u32> = tet.iter().copied().filter(|&n| inside(sdf[n as usize])).collect();
        let outs: Vec<u32> = tet.iter().copied().filter(|&n| !inside(sdf[n as usize])).collect();
        // triangles as crossing-edge pairs
        let tris: Vec<[(u32, u32); 3]> = match ins.len() {
            1 => vec![[(ins[0], outs[0]), (ins[0], outs[1]), (ins[0], outs[2])]],
            3 => vec![[(outs[0], ins[0]), (outs[0], ins[1]), (outs[0], ins[2])]],
            2 => {
                let (a, b, c, d) = (ins[0], ins[1], outs[0], outs[1]);
                vec![[(a, c), (a, d), (b, d)], [(a, c), (b, d), (b, c)]]
            }
            _ => continue,
        };
        let dir = {
            let (ci, co) = (centroid(&ins), centroid(&outs));
            [co[0] - ci[0], co[1] - ci[1], co[2] - ci[2]]
        };
        for tri in tris {
            let m: Vec<[f64; 3]> = tri.iter().map(|&(a, b)| mid(a, b)).collect();
            let u = [m[1][0] - m[0][0], m[1][1] - m[0][1], m[1][2] - m[0][2]];
            let v = [m[2][0] - m[0][0], m[2][1] - m[0][1], m[2][2] - m[0][2]];
            let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
            let flip = n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2] < 0.0;
            let ids = [
                vertex(tri[0].0, tri[0].1, &mut topo),
                vertex(tri[1].0, tri[1].1, &mut topo),
                vertex(tri[2].0, tri[2].1, &mut topo),
            ];
            topo.faces.push(if flip { [ids[0], ids[2], ids[1]] } else { ids });
        }
    }
    topo
}

fn crossing_t(sa: f64, sb: f64) -> f64 {
    sa / (sa - sb)
}

/// Mesh from precomputed SDF values at the grid nodes (no gradients).
pub fn marching_tets_values<T: Real>(grid: &TetGrid, sdf: &[f64]) -> Mesh<T> {
    let topo = extract_topology(grid, sdf);
    let pos = grid.positions();
    let mut data = Vec::with_capacity(topo.crossings.len() * 3);
    let mut provenance = Vec::with_capacity(topo.crossings.len());
    for &(a, b) in &topo.crossings {
        let t = crossing_t(sdf[a as usize], sdf[b as usize]);
        let (p, q) = (pos[a as usize], pos[b as usize]);
        for k in 0..3 {
            data.push(T::c(p[k] + t * (q[k] - p[k])));
        }
        provenance.push(VertexOrigin { nodes: (a, b), t });
    }
    let n = topo.crossings.len();
    let mut mesh = Mesh::new(Tensor::new(vec![n, 3], data).expect("shape"), topo.faces).expect("valid");
    mesh.provenance = provenance;
    mesh
}

/// Record vertex interpolation on the tape given node SDF values `[n, 1]`.
pub fn interpolate_vertices<T: Real>(tape: &mut Tape<T>, grid: &TetGrid, sdf: Var, topo: &Topology) -> Var {
    let ia: Arc<Vec<usize>> = Arc::new(topo.crossings.iter().map(|c| c.0 as usize).collect());
    let ib: Arc<Vec<usize>> = Arc::new(topo.crossings.iter().map(|c| c.1 as usize).collect());
    let n = topo.crossings.len();
    let pos = grid.positions();
    let mut a = Vec::with_capacity(3 * n);
    let mut d = Vec::with_capacity(3 * n);
    for &(i, j) in &topo.crossings {
        let (p, q) = (pos[i as usize], pos[j as usize]);
        for k in 0..3 {
            a.push(T::c(p[k]));
            d.push(T::c(q[k] - p[k]));
        }
    }
    let sa = tape.gather_rows(sdf, ia);
    let sb = tape.gather_rows(sdf, ib);
    let den = tape.sub(sa, sb);
    let t = tape.div(sa, den);
    let dv = tape.constant(Tensor::new(vec![n, 3], d).expect("shape"));
    let av = tape.constant(Tensor::new(vec![n, 3], a).expect("shape"));
    let step = tape.mul_col(dv, t);
    tape.add(av, step)
}

/// The template's signed distance network, `R^3 -> R`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfField<T> {
    pub mlp: Mlp<T>,
}

impl<T: Real> SdfField<T> {
    /// `layers` linear layers of width `hidden`, softplus in between.
    pub fn new<R: Rng>(layers: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut widths = vec![3];
        widths.extend(std::iter::repeat(hidden).take(layers.saturating_sub(1)));
        widths.push(1);
        Ok(SdfField {
            mlp: Mlp::new(&widths, Activation::Softplus, rng)?,
        })
    }

    /// SDF values at `[N, 3]` points.
    pub fn evaluate(&self, points: &Tensor<T>) -> Result<Tensor<T>> {
        self.mlp.eval(points)
    }

    pub fn evaluate_on(&self, tape: &mut Tape<T>, bound: &[Var], points: Var) -> Result<Var> {
        self.mlp.forward(tape, bound, points)
    }
}

impl<T: Real> Module<T> for SdfField<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.mlp.params_mut()
    }
}

/// Differentiable extraction result.
pub struct Extraction<T> {
    pub mesh: Mesh<T>,
    /// `[N, 3]` vertex positions on the tape.
    pub vertices: Var,
    /// `[nodes, 1]` SDF values on the tape.
    pub node_sdf: Var,
}

/// Evaluate the SDF network on every grid node and extract the surface.
///
/// `bound` are the SDF parameters already registered on `tape` (frozen or
/// trainable).
pub fn marching_tets<T: Real>(
    tape: &mut Tape<T>,
    grid: &TetGrid,
    sdf: &SdfField<T>,
    bound: &[Var],
) -> Result<Extraction<T>> {
    let nodes = tape.constant(grid.node_tensor());
    let s = sdf.evaluate_on(tape, bound, nodes)?;
    if !tape.value(s).all_finite() {
        return Err(Error::Numeric("SDF produced non-finite values".into()));
    }
    Ok(extract_from_node_values(tape, grid, s))
}

/// Extraction from node SDF values already on the tape.
pub fn extract_from_node_values<T: Real>(tape: &mut Tape<T>, grid: &TetGrid, s: Var) -> Extraction<T> {
    let values: Vec<f64> = tape.value(s).data().iter().map(|x| x.f64()).collect();
    let topo = extract_topology(grid, &values);
    let v = interpolate_vertices(tape, grid, s, &topo);
    let provenance = topo
        .crossings
        .iter()
        .map(|&(a, b)| VertexOrigin {
            nodes: (a, b),
            t: crossing_t(values[a as usize], values[b as usize]),
        })
        .collect();
    let mut mesh = Mesh::new(tape.value(v).clone(), topo.faces).expect("valid extraction");
    mesh.provenance = provenance;
    Extraction {
        mesh,
        vertices: v,
        node_sdf: s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(grid: &TetGrid, r: f64) -> Vec<f64> {
        grid.positions()
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r)
            .collect()
    }

    #[test]
    fn lattice_is_non_degenerate_and_in_cube() {
        let g = TetGrid::new(4).unwrap();
        assert_eq!(g.node_count(), 125);
        assert_eq!(g.tets().len(), 6 * 64);
        for i in 0..g.tets().len() {
            assert!(g.tet_volume(i) > 0.0);
        }
        let total: f64 = (0..g.tets().len()).map(|i| g.tet_volume(i)).sum();
        assert!((total - 8.0).abs() < 1e-12);
        assert!(g.positions().iter().flatten().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn all_positive_gives_empty_mesh() {
        let g = TetGrid::new(3).unwrap();
        let m = marching_tets_values::<f64>(&g, &vec![1.0; g.node_count()]);
        assert!(m.is_empty());
        assert_eq!(m.vertex_count(), 0);
    }

    #[test]
    fn single_negative_node_gives_one_triangle() {
        let g = TetGrid::from_parts(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        let m = marching_tets_values::<f64>(&g, &[-1.0, 1.0, 1.0, 1.0]);
        assert_eq!(m.faces.len(), 1);
        assert_eq!(m.vertex_count(), 3);
        // normal points away from the negative node
        let (a, b, c) = (m.vertex(m.faces[0][0] as usize), m.vertex(m.faces[0][1] as usize), m.vertex(m.faces[0][2] as usize));
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        assert!(n[0] + n[1] + n[2] > 0.0);
        for o in &m.provenance {
            assert!((o.t - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_negative_nodes_give_a_quad() {
        let g = TetGrid::from_parts(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        let m = marching_tets_values::<f64>(&g, &[-1.0, -0.5, 1.0, 2.0]);
        assert_eq!(m.faces.len(), 2);
        assert_eq!(m.vertex_count(), 4);
    }

    #[test]
    fn zero_is_outside() {
        let g = TetGrid::from_parts(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
        )
        .unwrap();
        assert!(marching_tets_values::<f64>(&g, &[0.0; 4]).is_empty());
        assert_eq!(marching_tets_values::<f64>(&g, &[-1.0, 0.0, 0.0, 0.0]).faces.len(), 1);
    }

    #[test]
    fn sphere_is_closed_genus_zero_and_near_level_set() {
        let g = TetGrid::new(16).unwrap();
        let m = marching_tets_values::<f64>(&g, &sphere(&g, 0.53));
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        for i in 0..m.vertex_count() {
            let p = m.vertex(i);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.53).abs() < 2.0 * g.cell_size());
        }
        // no crossing edge is split twice
        let mut seen = std::collections::HashSet::new();
        assert!(m.provenance.iter().all(|o| seen.insert(o.nodes)));
    }

    #[test]
    fn edge_counts() {
        assert_eq!(edge_list(&[[0, 1, 2]]).len(), 3);
        assert_eq!(edge_list(&[[0, 1, 2], [2, 1, 3]]).len(), 5);
    }

    #[test]
    fn obj_is_one_indexed() {
        let m = Mesh::new(Tensor::<f64>::zeros(&[3, 3]), vec![[0, 1, 2]]).unwrap();
        let mut buf = Vec::new();
        m.write_obj(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.ends_with("f 1 2 3\n"));
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
    }
}
