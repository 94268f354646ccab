//! Matrix Market coordinate files and plain-text vector files.
//!
//! Matrices use the `%%MatrixMarket matrix coordinate real general|symmetric`
//! layout with 1-based indices. Vectors hold one decimal value per line;
//! blank lines and lines starting with `%` or `#` are skipped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geometry::{AssembledOperators, NodeSets};
use crate::linalg::CsrMatrix;

/// Relative tolerance for the mass-matrix symmetry check on import.
pub const SYMMETRY_TOL: f64 = 1e-12;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_matrix(path: &Path) -> Result<CsrMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, path)
}

pub fn parse_matrix(text: &str, path: &Path) -> Result<CsrMatrix> {
    let mut lines = text.lines().enumerate();
    let mut symmetric = false;
    let mut header_seen = false;
    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();

    for (no, raw) in lines.by_ref() {
        let line = raw.trim();
        let lineno = no + 1;
        if line.starts_with("%%MatrixMarket") {
            if header_seen || no != 0 {
                return Err(parse_err(path, lineno, "misplaced MatrixMarket header"));
            }
            header_seen = true;
            let words: Vec<String> = line.split_whitespace().map(str::to_ascii_lowercase).collect();
            if words.len() < 5 || words[1] != "matrix" || words[2] != "coordinate" {
                return Err(parse_err(path, lineno, "only 'matrix coordinate' files are supported"));
            }
            if words[3] != "real" && words[3] != "integer" {
                return Err(parse_err(path, lineno, format!("unsupported field '{}'", words[3])));
            }
            symmetric = match words[4].as_str() {
                "general" => false,
                "symmetric" => true,
                other => return Err(parse_err(path, lineno, format!("unsupported symmetry '{other}'"))),
            };
            continue;
        }
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(parse_err(path, lineno, "expected 'rows cols nnz'"));
                }
                let v: Vec<usize> = fields
                    .iter()
                    .map(|f| f.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                size = Some((v[0], v[1], v[2]));
                triplets.reserve(if symmetric { 2 * v[2] } else { v[2] });
            }
            Some((nr, nc, _)) => {
                if fields.len() != 3 {
                    return Err(parse_err(path, lineno, "expected 'row col value'"));
                }
                let i: usize = fields[0]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad row index"))?;
                let j: usize = fields[1]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad column index"))?;
                let v: f64 = fields[2].parse().map_err(|_| parse_err(path, lineno, "bad value"))?;
                if i == 0 || j == 0 || i > nr || j > nc {
                    return Err(parse_err(path, lineno, format!("index ({i}, {j}) outside {nr}x{nc}")));
                }
                if !v.is_finite() {
                    return Err(parse_err(path, lineno, "non-finite value"));
                }
                triplets.push((i - 1, j - 1, v));
                if symmetric && i != j {
                    triplets.push((j - 1, i - 1, v));
                }
            }
        }
    }
    let (nr, nc, nnz) = size.ok_or_else(|| parse_err(path, 0, "missing size line"))?;
    let stored = if symmetric {
        triplets.iter().filter(|t| t.0 >= t.1).count()
    } else {
        triplets.len()
    };
    if stored != nnz {
        return Err(parse_err(
            path,
            0,
            format!("header declares {nnz} entries, found {stored}"),
        ));
    }
    CsrMatrix::from_triplets(nr, nc, &triplets)
}

pub fn write_matrix(path: &Path, m: &CsrMatrix) -> Result<()> {
    let mut out = String::with_capacity(32 * m.nnz() + 64);
    out.push_str("%%MatrixMarket matrix coordinate real general\n");
    out.push_str(&format!("{} {} {}\n", m.nrows(), m.ncols(), m.nnz()));
    for (i, j, v) in m.triplets() {
        // {:e} with Rust's shortest round-trip formatting keeps values exact
        out.push_str(&format!("{} {} {:e}\n", i + 1, j + 1, v));
    }
    write_text(path, &out)
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') || line.starts_with('#') {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| parse_err(path, no + 1, format!("not a number: '{line}'")))?;
        values.push(v);
    }
    Ok(DVector::from_vec(values))
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut out = String::with_capacity(24 * v.len());
    for x in v.iter() {
        out.push_str(&format!("{x:e}\n"));
    }
    write_text(path, &out)
}

/// Node index list, one 0-based index per line.
pub fn read_index_set(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') || line.starts_with('#') {
            continue;
        }
        out.push(
            line.parse()
                .map_err(|_| parse_err(path, no + 1, format!("not an index: '{line}'")))?,
        );
    }
    Ok(out)
}

pub fn write_index_set(path: &Path, set: &[usize]) -> Result<()> {
    let text: String = set.iter().map(|i| format!("{i}\n")).collect();
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Paths of an operator set on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorFiles {
    pub mass: PathBuf,
    pub stiffness: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Named node sets, one index file each.
    pub node_sets: Vec<(String, PathBuf)>,
}

impl OperatorFiles {
    /// Conventional file names inside a directory.
    pub fn in_dir(dir: &Path, set_names: &[&str]) -> Self {
        Self {
            mass: dir.join("mass.mtx"),
            stiffness: dir.join("stiffness.mtx"),
            input: dir.join("input.vec"),
            output: dir.join("output.vec"),
            node_sets: set_names
                .iter()
                .map(|n| (n.to_string(), dir.join(format!("{n}.idx"))))
                .collect(),
        }
    }
}

/// Loads and validates an externally assembled operator set. The stiffness
/// matrix must follow the negative semidefinite sign convention of
/// [`crate::geometry::assemble_operators`].
pub fn load_operators(files: &OperatorFiles) -> Result<AssembledOperators> {
    let mass = read_matrix(&files.mass)?;
    let stiffness = read_matrix(&files.stiffness)?;
    let input = read_vector(&files.input)?;
    let output = read_vector(&files.output)?;
    let mut node_sets = NodeSets::new();
    for (name, p) in &files.node_sets {
        node_sets.insert(name.clone(), read_index_set(p)?);
    }
    let ops = AssembledOperators {
        mass,
        stiffness,
        input,
        output,
        node_sets,
    };
    ops.check_shapes()?;
    let asym = ops.mass.max_asymmetry();
    if asym > SYMMETRY_TOL * ops.mass.max_abs() {
        return Err(Error::Validation(format!(
            "mass matrix asymmetric: max |M - M^T| = {asym:e} exceeds {SYMMETRY_TOL:e} relative"
        )));
    }
    Ok(ops)
}

pub fn save_operators(ops: &AssembledOperators, files: &OperatorFiles) -> Result<()> {
    write_matrix(&files.mass, &ops.mass)?;
    write_matrix(&files.stiffness, &ops.stiffness)?;
    write_vector(&files.input, &ops.input)?;
    write_vector(&files.output, &ops.output)?;
    for (name, p) in &files.node_sets {
        let set = ops
            .node_sets
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no node set named '{name}'")))?;
        write_index_set(p, set)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assemble_operators, build_block_mesh, LEFT_EDGE, S2_REGION};

    #[test]
    fn identity_file() {
        let text = "%%MatrixMarket matrix coordinate real general\n% comment\n2 2 2\n1 1 1.0\n2 2 1\n";
        let m = parse_matrix(text, Path::new("id.mtx")).unwrap();
        assert_eq!(m, CsrMatrix::identity(2));
    }

    #[test]
    fn symmetric_storage_is_expanded() {
        let text = "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 2\n2 1 -1\n";
        let m = parse_matrix(text, Path::new("s.mtx")).unwrap();
        assert_eq!(m.get(0, 1), -1.0);
        assert_eq!(m.get(1, 0), -1.0);
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n";
        match parse_matrix(text, Path::new("bad.mtx")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "2 2 2\n1 1 1.0\n";
        assert!(parse_matrix(text, Path::new("short.mtx")).is_err());
    }

    #[test]
    fn round_trip_block_operators() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = build_block_mesh(2, 1, 1, [2.0, 1.0, 1.0]).unwrap();
        let ops = assemble_operators(&mesh, 1.3, [1.0, 0.0, 0.0]).unwrap();
        let files = OperatorFiles::in_dir(dir.path(), &[LEFT_EDGE, S2_REGION]);
        save_operators(&ops, &files).unwrap();
        let back = load_operators(&files).unwrap();
        assert_eq!(back, ops);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let files = OperatorFiles::in_dir(dir.path(), &[]);
        write_matrix(&files.mass, &CsrMatrix::identity(3)).unwrap();
        write_matrix(&files.stiffness, &CsrMatrix::zeros(2, 2)).unwrap();
        write_vector(&files.input, &DVector::zeros(3)).unwrap();
        write_vector(&files.output, &DVector::zeros(3)).unwrap();
        assert!(matches!(load_operators(&files), Err(Error::Dimension(_))));
    }

    #[test]
    fn asymmetric_mass_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let files = OperatorFiles::in_dir(dir.path(), &[]);
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 1.0), (0, 1, 0.1)]).unwrap();
        write_matrix(&files.mass, &m).unwrap();
        write_matrix(&files.stiffness, &CsrMatrix::zeros(2, 2)).unwrap();
        write_vector(&files.input, &DVector::zeros(2)).unwrap();
        write_vector(&files.output, &DVector::zeros(2)).unwrap();
        assert!(matches!(load_operators(&files), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_matrix(Path::new("/nonexistent/mass.mtx")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/mass.mtx"));
    }
}
