//! Solution files and report documents.
//!
//! Solution CSV: header `t,regime,row,col,P,Lambda` (tree solutions insert a
//! `node` column after `t`, holding the number of up moves). Times use 17
//! significant digits, values the shortest round-trip form. Regimes, rows and
//! columns are numbered from 1.

use regimelq_core::esre::{Diagnostics, EsreSolution};
use regimelq_core::lattice::Lattice;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const GRID_HEADER: &str = "t,regime,row,col,P,Lambda";
pub const TREE_HEADER: &str = "t,node,regime,row,col,P,Lambda";

#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct IoError {
    pub path: PathBuf,
    pub message: String,
}

impl IoError {
    fn new(path: &Path, message: impl ToString) -> Self {
        IoError {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::new(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| IoError::new(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| IoError::new(path, e))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = toml::to_string(value).map_err(|e| IoError::new(path, e))?;
    write_text(path, &text)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::new(path, e))?;
    toml::from_str(&text).map_err(|e| IoError::new(path, e))
}

/// `solution.csv` → `solution.meta.toml`
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.toml")
}

pub fn write_solution_csv(solution: &EsreSolution, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    let io = |e: std::io::Error| IoError::new(path, e);
    let tree = matches!(solution.lattice, Lattice::Tree(_));
    writeln!(w, "{}", if tree { TREE_HEADER } else { GRID_HEADER }).map_err(io)?;
    let times = solution.times();
    for (idx, t) in times.iter().enumerate() {
        let node = solution.lattice.tree_node(idx).map(|nd| format!("{},", nd.up));
        for regime in 0..solution.ell() {
            let p = &solution.p[regime][idx];
            let lam = &solution.lambda[regime][idx];
            for row in 0..p.dim() {
                for col in 0..p.dim() {
                    writeln!(
                        w,
                        "{t:.16e},{}{},{},{},{:e},{:e}",
                        node.as_deref().unwrap_or(""),
                        regime + 1,
                        row + 1,
                        col + 1,
                        p.get(row, col),
                        lam.get(row, col)
                    )
                    .map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionRow {
    pub t: f64,
    pub node: Option<usize>,
    pub regime: usize,
    pub row: usize,
    pub col: usize,
    pub p: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionTable {
    pub tree: bool,
    pub rows: Vec<SolutionRow>,
}

impl SolutionTable {
    /// Entry `(row, col)` of `P` at the first time in the file (1-based indices).
    pub fn initial(&self, regime: usize, row: usize, col: usize) -> Option<f64> {
        let t0 = self.rows.first()?.t;
        self.rows
            .iter()
            .take_while(|r| r.t == t0)
            .find(|r| r.regime == regime && r.row == row && r.col == col)
            .map(|r| r.p)
    }

    pub fn regimes(&self) -> usize {
        self.rows.iter().map(|r| r.regime).max().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.rows.iter().map(|r| r.row).max().unwrap_or(0)
    }
}

pub fn read_solution_csv(path: &Path) -> Result<SolutionTable, IoError> {
    let file = File::open(path).map_err(|e| IoError::new(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| IoError::new(path, "empty file"))?
        .map_err(|e| IoError::new(path, e))?;
    let tree = match header.as_str() {
        GRID_HEADER => false,
        TREE_HEADER => true,
        other => return Err(IoError::new(path, format!("unexpected header `{other}`"))),
    };
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| IoError::new(path, e))?;
        let bad = || IoError::new(path, format!("malformed line {}", k + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != if tree { 7 } else { 6 } {
            return Err(bad());
        }
        let off = usize::from(tree);
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(SolutionRow {
            t: real(f[0])?,
            node: if tree { Some(int(f[1])?) } else { None },
            regime: int(f[1 + off])?,
            row: int(f[2 + off])?,
            col: int(f[3 + off])?,
            p: real(f[4 + off])?,
            lambda: real(f[5 + off])?,
        });
    }
    Ok(SolutionTable { tree, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsMeta {
    pub k_estimate: f64,
    pub rho: f64,
    pub apriori_bound: f64,
    pub measured_sup: f64,
    pub bound_holds: bool,
    pub lambda_l2: f64,
    pub smallness: f64,
    pub smallness_exceeded: bool,
}

impl From<&Diagnostics> for DiagnosticsMeta {
    fn from(d: &Diagnostics) -> Self {
        DiagnosticsMeta {
            k_estimate: d.k_estimate,
            rho: d.rho,
            apriori_bound: d.apriori_bound,
            measured_sup: d.measured_sup,
            bound_holds: d.bound_holds(),
            lambda_l2: d.lambda_l2,
            smallness: d.smallness,
            smallness_exceeded: d.smallness_exceeded,
        }
    }
}

/// Sibling metadata of a solution file; written also when the solver fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionMeta {
    pub backend: String,
    pub n: usize,
    pub m: usize,
    pub regimes: usize,
    pub horizon: f64,
    pub grid_steps: usize,
    pub tree_depth: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub psd_tol: f64,
    pub cond_threshold: f64,
    pub smallness_threshold: f64,
    pub assumption_tol: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsMeta>,
}
