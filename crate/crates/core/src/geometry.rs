//! Structured brick meshes and trilinear finite element assembly.
//!
//! Sign convention: the stiffness matrix is assembled with a leading minus,
//! `S_ij = -∫ ∇ψ_i · D ∇ψ_j`, so the semi-discrete system reads
//! `M dΦ/dt = S Φ + ...` with S negative semidefinite.

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

pub const LEFT_EDGE: &str = "left_edge";
pub const S2_REGION: &str = "s2_region";

pub type NodeSets = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    nodes: Vec<[f64; 3]>,
    elements: Vec<[usize; 8]>,
    node_sets: NodeSets,
}

impl Mesh {
    /// Builds a mesh after checking connectivity and node-set indices.
    pub fn new(nodes: Vec<[f64; 3]>, elements: Vec<[usize; 8]>, node_sets: NodeSets) -> Result<Self> {
        let n = nodes.len();
        for (e, conn) in elements.iter().enumerate() {
            for (a, &i) in conn.iter().enumerate() {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "element {e} references node {i} but mesh has {n} nodes"
                    )));
                }
                if conn[..a].contains(&i) {
                    return Err(Error::InvalidArgument(format!("element {e} repeats node {i}")));
                }
            }
        }
        for (name, set) in &node_sets {
            if let Some(&bad) = set.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "node set '{name}' references node {bad} but mesh has {n} nodes"
                )));
            }
        }
        Ok(Self {
            nodes,
            elements,
            node_sets,
        })
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 8]] {
        &self.elements
    }

    pub fn node_sets(&self) -> &NodeSets {
        &self.node_sets
    }

    pub fn node_set(&self, name: &str) -> Option<&[usize]> {
        self.node_sets.get(name).map(Vec::as_slice)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }
}

/// Regular `nx × ny × nz` brick mesh of the box `[0, lx] × [0, ly] × [0, lz]`
/// (lengths in mm). Nodes are numbered x-fastest.
///
/// Node sets: `left_edge` holds the x = 0 face, `s2_region` the nodes with
/// `x <= lx/2` and `y <= ly/2`.
pub fn build_block_mesh(nx: usize, ny: usize, nz: usize, lengths: [f64; 3]) -> Result<Mesh> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidArgument(format!(
            "element counts must be positive, got {nx}x{ny}x{nz}"
        )));
    }
    if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "block extents must be positive, got {lengths:?}"
        )));
    }
    let (px, py, pz) = (nx + 1, ny + 1, nz + 1);
    let id = |i: usize, j: usize, k: usize| i + px * (j + py * k);
    let mut nodes = Vec::with_capacity(px * py * pz);
    for k in 0..pz {
        for j in 0..py {
            for i in 0..px {
                nodes.push([
                    lengths[0] * i as f64 / nx as f64,
                    lengths[1] * j as f64 / ny as f64,
                    lengths[2] * k as f64 / nz as f64,
                ]);
            }
        }
    }
    let mut elements = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                elements.push([
                    id(i, j, k),
                    id(i + 1, j, k),
                    id(i + 1, j + 1, k),
                    id(i, j + 1, k),
                    id(i, j, k + 1),
                    id(i + 1, j, k + 1),
                    id(i + 1, j + 1, k + 1),
                    id(i, j + 1, k + 1),
                ]);
            }
        }
    }

    let eps = 1e-12;
    let left: Vec<usize> = (0..nodes.len())
        .filter(|&n| nodes[n][0].abs() <= eps * lengths[0])
        .collect();
    let quadrant: Vec<usize> = (0..nodes.len())
        .filter(|&n| nodes[n][0] <= 0.5 * lengths[0] * (1.0 + eps) && nodes[n][1] <= 0.5 * lengths[1] * (1.0 + eps))
        .collect();
    let mut sets = NodeSets::new();
    sets.insert(LEFT_EDGE.to_string(), left);
    sets.insert(S2_REGION.to_string(), quadrant);
    Mesh::new(nodes, elements, sets)
}

/// Finite element operators of the monodomain equations on a mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledOperators {
    /// Consistent mass matrix `∫ ψ_i ψ_j`.
    pub mass: CsrMatrix,
    /// Negative conduction matrix `-∫ ∇ψ_i · D ∇ψ_j`.
    pub stiffness: CsrMatrix,
    /// Load vector `∫ ψ_i`.
    pub input: DVector<f64>,
    /// Flux functional: `y = output · Φ` approximates `∫ (D∇Φ) · n`.
    pub output: DVector<f64>,
    pub node_sets: NodeSets,
}

impl AssembledOperators {
    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let n = self.mass.nrows();
        let shapes = [
            ("mass", self.mass.nrows(), self.mass.ncols()),
            ("stiffness", self.stiffness.nrows(), self.stiffness.ncols()),
            ("input", self.input.len(), n),
            ("output", self.output.len(), n),
        ];
        for (name, r, c) in shapes {
            if r != n || c != n {
                return Err(Error::Dimension(format!(
                    "{name} has shape {r}x{c}, expected consistency with N = {n}"
                )));
            }
        }
        for (name, set) in &self.node_sets {
            if let Some(&bad) = set.iter().find(|&&i| i >= n) {
                return Err(Error::Dimension(format!(
                    "node set '{name}' references node {bad} >= N = {n}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over all operator values and sparsity patterns; identifies
    /// the discretization a reduced model was built from.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.mass, &self.stiffness] {
            h.update((m.nrows() as u64).to_le_bytes());
            for (i, j, v) in m.triplets() {
                h.update((i as u64).to_le_bytes());
                h.update((j as u64).to_le_bytes());
                h.update(v.to_le_bytes());
            }
        }
        for v in [&self.input, &self.output] {
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

const GAUSS: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
const CORNERS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

fn shape(xi: &[f64; 3]) -> ([f64; 8], [Vector3<f64>; 8]) {
    let mut n = [0.0; 8];
    let mut dn = [Vector3::zeros(); 8];
    for (a, c) in CORNERS.iter().enumerate() {
        let fx = 0.5 * (1.0 + c[0] * xi[0]);
        let fy = 0.5 * (1.0 + c[1] * xi[1]);
        let fz = 0.5 * (1.0 + c[2] * xi[2]);
        n[a] = fx * fy * fz;
        dn[a] = Vector3::new(0.5 * c[0] * fy * fz, 0.5 * c[1] * fx * fz, 0.5 * c[2] * fx * fy);
    }
    (n, dn)
}

struct ElementContribution {
    conn: [usize; 8],
    mass: [[f64; 8]; 8],
    stiffness: [[f64; 8]; 8],
    load: [f64; 8],
    flux: [f64; 8],
}

fn element_matrices(id: usize, mesh: &Mesh, d_iso: f64, direction: &Vector3<f64>) -> Result<ElementContribution> {
    let conn = mesh.elements[id];
    let x: Vec<Vector3<f64>> = conn.iter().map(|&i| Vector3::from(mesh.nodes[i])).collect();
    let scale = x.iter().map(|p| (p - x[0]).norm()).fold(0.0, f64::max);
    let mut out = ElementContribution {
        conn,
        mass: [[0.0; 8]; 8],
        stiffness: [[0.0; 8]; 8],
        load: [0.0; 8],
        flux: [0.0; 8],
    };
    for gx in [-GAUSS, GAUSS] {
        for gy in [-GAUSS, GAUSS] {
            for gz in [-GAUSS, GAUSS] {
                let (n, dn) = shape(&[gx, gy, gz]);
                let mut jac = Matrix3::zeros();
                for a in 0..8 {
                    jac += x[a] * dn[a].transpose();
                }
                let det = jac.determinant();
                if !(det > 1e-12 * scale.powi(3)) {
                    return Err(Error::AssemblyFailure {
                        element: id,
                        reason: format!("Jacobian determinant {det:e} is not positive"),
                    });
                }
                let inv_t = jac
                    .try_inverse()
                    .ok_or_else(|| Error::AssemblyFailure {
                        element: id,
                        reason: "singular Jacobian".into(),
                    })?
                    .transpose();
                let grads: Vec<Vector3<f64>> = dn.iter().map(|g| inv_t * g).collect();
                for a in 0..8 {
                    out.load[a] += n[a] * det;
                    out.flux[a] += d_iso * grads[a].dot(direction) * det;
                    for b in 0..8 {
                        out.mass[a][b] += n[a] * n[b] * det;
                        out.stiffness[a][b] -= d_iso * grads[a].dot(&grads[b]) * det;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Assembles mass, stiffness, load and flux operators with trilinear
/// hexahedra and 2×2×2 Gauss quadrature.
pub fn assemble_operators(mesh: &Mesh, d_iso: f64, flux_direction: [f64; 3]) -> Result<AssembledOperators> {
    if !(d_iso > 0.0) || !d_iso.is_finite() {
        return Err(Error::InvalidArgument(format!("d_iso must be positive, got {d_iso}")));
    }
    let direction = Vector3::from(flux_direction);
    if (direction.norm() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "flux direction must be a unit vector, got norm {}",
            direction.norm()
        )));
    }
    let contributions: Vec<ElementContribution> = (0..mesh.num_elements())
        .into_par_iter()
        .map(|e| element_matrices(e, mesh, d_iso, &direction))
        .collect::<Result<_>>()?;

    let n = mesh.num_nodes();
    let mut mass = Vec::with_capacity(64 * contributions.len());
    let mut stiff = Vec::with_capacity(64 * contributions.len());
    let mut input = DVector::zeros(n);
    let mut output = DVector::zeros(n);
    for c in &contributions {
        for a in 0..8 {
            input[c.conn[a]] += c.load[a];
            output[c.conn[a]] += c.flux[a];
            for b in 0..8 {
                mass.push((c.conn[a], c.conn[b], c.mass[a][b]));
                stiff.push((c.conn[a], c.conn[b], c.stiffness[a][b]));
            }
        }
    }
    Ok(AssembledOperators {
        mass: CsrMatrix::from_triplets(n, n, &mass)?,
        stiffness: CsrMatrix::from_triplets(n, n, &stiff)?,
        input,
        output,
        node_sets: mesh.node_sets.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mesh_counts() {
        let m = build_block_mesh(1, 1, 1, [1.0; 3]).unwrap();
        assert_eq!((m.num_nodes(), m.num_elements()), (8, 1));
        let m = build_block_mesh(31, 31, 2, [31.0, 31.0, 2.0]).unwrap();
        assert_eq!((m.num_nodes(), m.num_elements()), (3072, 1922));
    }

    #[test]
    fn left_edge_of_two_element_bar() {
        let m = build_block_mesh(2, 1, 1, [2.0, 1.0, 1.0]).unwrap();
        let left = m.node_set(LEFT_EDGE).unwrap();
        assert_eq!(left.len(), 4);
        assert!(left.iter().all(|&i| m.nodes()[i][0] == 0.0));
    }

    #[test]
    fn quadrant_node_set() {
        let m = build_block_mesh(4, 4, 1, [4.0, 4.0, 1.0]).unwrap();
        // 3 x 3 nodes in the quadrant per layer, 2 layers
        assert_eq!(m.node_set(S2_REGION).unwrap().len(), 18);
    }

    #[test]
    fn invalid_mesh_arguments() {
        assert!(matches!(
            build_block_mesh(0, 1, 1, [1.0; 3]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_block_mesh(1, 1, 1, [1.0, -1.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
        let bad = Mesh::new(vec![[0.0; 3]; 8], vec![[0, 1, 2, 3, 4, 5, 6, 6]], NodeSets::new());
        assert!(bad.is_err());
        let bad = Mesh::new(vec![[0.0; 3]; 8], vec![[0, 1, 2, 3, 4, 5, 6, 8]], NodeSets::new());
        assert!(bad.is_err());
    }

    #[test]
    fn unit_cube_mass_rows() {
        let m = build_block_mesh(1, 1, 1, [1.0; 3]).unwrap();
        let ops = assemble_operators(&m, 1.0, [1.0, 0.0, 0.0]).unwrap();
        let ones = DVector::from_element(8, 1.0);
        let rows = ops.mass.mul_vec(&ones);
        for r in rows.iter() {
            assert_relative_eq!(*r, 0.125, epsilon = 1e-15);
        }
        // tensor products of the 1-D element mass [1/3 1/6; 1/6 1/3]
        assert_relative_eq!(ops.mass.get(0, 0), 8.0 / 216.0, epsilon = 1e-15);
        assert_relative_eq!(ops.mass.get(0, 6), 2.0 / 216.0, epsilon = 1e-15);
        assert_relative_eq!(ops.mass.get(0, 7), 1.0 / 216.0, epsilon = 1e-15);
    }

    #[test]
    fn operator_invariants() {
        let m = build_block_mesh(3, 2, 2, [3.0, 1.5, 0.7]).unwrap();
        let ops = assemble_operators(&m, 0.8, [1.0, 0.0, 0.0]).unwrap();
        let volume = 3.0 * 1.5 * 0.7;
        assert_relative_eq!(ops.input.sum(), volume, max_relative = 1e-13);
        assert_relative_eq!(ops.mass.sum(), volume, max_relative = 1e-13);
        assert_eq!(ops.mass.max_asymmetry(), 0.0);
        let ones = DVector::from_element(m.num_nodes(), 1.0);
        assert!(ops.stiffness.mul_vec(&ones).amax() <= 1e-12 * ops.stiffness.max_abs());
        // constant field carries no flux; the linear field x carries d_iso * volume
        assert!(ops.output.sum().abs() < 1e-12);
        let xs = DVector::from_iterator(m.num_nodes(), m.nodes().iter().map(|p| p[0]));
        assert_relative_eq!(ops.output.dot(&xs), 0.8 * volume, max_relative = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = DVector::from_fn(m.num_nodes(), |_, _| rng.gen_range(-1.0..1.0));
            assert!(x.dot(&ops.mass.mul_vec(&x)) > 0.0);
            assert!(x.dot(&ops.stiffness.mul_vec(&x)) <= 1e-12);
        }
    }

    #[test]
    fn total_mass_equals_volume_for_any_refinement() {
        for (nx, ny, nz) in [(1, 1, 1), (2, 3, 1), (4, 1, 3)] {
            let m = build_block_mesh(nx, ny, nz, [1.3, 0.4, 2.0]).unwrap();
            let ops = assemble_operators(&m, 1.0, [0.0, 1.0, 0.0]).unwrap();
            assert_relative_eq!(ops.mass.sum(), 1.3 * 0.4 * 2.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn degenerate_element_reported() {
        let mut nodes: Vec<[f64; 3]> = CORNERS.iter().map(|c| [c[0], c[1], c[2]]).collect();
        for p in nodes.iter_mut() {
            p[2] = 0.0; // flatten
        }
        let mesh = Mesh::new(nodes, vec![[0, 1, 2, 3, 4, 5, 6, 7]], NodeSets::new()).unwrap();
        let err = assemble_operators(&mesh, 1.0, [1.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::AssemblyFailure { element: 0, .. }));
    }

    #[test]
    fn rejects_bad_physics() {
        let m = build_block_mesh(1, 1, 1, [1.0; 3]).unwrap();
        assert!(assemble_operators(&m, 0.0, [1.0, 0.0, 0.0]).is_err());
        assert!(assemble_operators(&m, 1.0, [1.0, 1.0, 0.0]).is_err());
    }
}
