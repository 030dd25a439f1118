//! Problem definition: per-regime coefficient fields, the generator, the
//! horizon, and checks of the standing positivity assumptions.
//!
//! The state equation is
//! `dX = (A X + B u) dt + (C X + D u) dW` with all coefficients read in the
//! current regime; the cost is
//! `E[ Xᵀ G X (T) + ∫ (Xᵀ Q X + 2 uᵀ S X + uᵀ R u) dt ]`.

use crate::error::{Error, Result};
use crate::lattice::{BinomialTree, TreeNode};
use crate::matcore::{sym_inverse, Mat, SymMatrix, DEFAULT_ASYM_TOL};
use crate::regime_chain::Generator;
use std::fmt;

/// A coefficient as a function of (time or tree node, regime).
#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientField {
    /// One matrix per regime.
    Constant(Vec<Mat>),
    /// Per regime, samples `(t_k, M_k)` on a strictly increasing grid starting
    /// at 0. Piecewise constant: `M_k` applies on `[t_k, t_{k+1})`, and the last
    /// sample also at `T`.
    TimeTable(Vec<Vec<(f64, Mat)>>),
    /// Per regime, `values[regime][level][up]` for every node of a tree of the
    /// given depth (levels `0..=depth`).
    TreeNode { depth: usize, values: Vec<Vec<Vec<Mat>>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Constant,
    TimeTable,
    TreeNode,
}

impl CoefficientField {
    pub fn zeros(ell: usize, rows: usize, cols: usize) -> Self {
        CoefficientField::Constant(vec![Mat::zeros(rows, cols); ell])
    }

    /// The same matrix in every regime.
    pub fn uniform(ell: usize, value: Mat) -> Self {
        CoefficientField::Constant(vec![value; ell])
    }

    pub fn kind(&self) -> FieldKind {
        match self {
            CoefficientField::Constant(_) => FieldKind::Constant,
            CoefficientField::TimeTable(_) => FieldKind::TimeTable,
            CoefficientField::TreeNode { .. } => FieldKind::TreeNode,
        }
    }

    pub fn regimes(&self) -> usize {
        match self {
            CoefficientField::Constant(v) => v.len(),
            CoefficientField::TimeTable(v) => v.len(),
            CoefficientField::TreeNode { values, .. } => values.len(),
        }
    }

    fn matrices(&self) -> Box<dyn Iterator<Item = &Mat> + '_> {
        match self {
            CoefficientField::Constant(v) => Box::new(v.iter()),
            CoefficientField::TimeTable(v) => Box::new(v.iter().flatten().map(|(_, m)| m)),
            CoefficientField::TreeNode { values, .. } => {
                Box::new(values.iter().flatten().flatten())
            }
        }
    }

    fn map_matrices(&self, f: impl Fn(&Mat) -> Mat) -> Self {
        match self {
            CoefficientField::Constant(v) => CoefficientField::Constant(v.iter().map(&f).collect()),
            CoefficientField::TimeTable(v) => CoefficientField::TimeTable(
                v.iter()
                    .map(|table| table.iter().map(|(t, m)| (*t, f(m))).collect())
                    .collect(),
            ),
            CoefficientField::TreeNode { depth, values } => CoefficientField::TreeNode {
                depth: *depth,
                values: values
                    .iter()
                    .map(|lv| lv.iter().map(|row| row.iter().map(&f).collect()).collect())
                    .collect(),
            },
        }
    }

    fn check(&self, name: &str, rows: usize, cols: usize, ell: usize, horizon: f64) -> Result<()> {
        if self.regimes() != ell {
            return Err(Error::StructuralError(format!(
                "{name}: {} regimes given, generator has {ell}",
                self.regimes()
            )));
        }
        if let Some(bad) = self.matrices().find(|m| m.nrows() != rows || m.ncols() != cols) {
            return Err(Error::StructuralError(format!(
                "{name}: expected {rows}x{cols}, found {}x{}",
                bad.nrows(),
                bad.ncols()
            )));
        }
        if self.matrices().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::StructuralError(format!("{name}: non-finite entry")));
        }
        match self {
            CoefficientField::Constant(_) => {}
            CoefficientField::TimeTable(tables) => {
                for (i, table) in tables.iter().enumerate() {
                    let Some(first) = table.first() else {
                        return Err(Error::StructuralError(format!(
                            "{name}: empty time table for regime {}",
                            i + 1
                        )));
                    };
                    if first.0 != 0.0 {
                        return Err(Error::StructuralError(format!(
                            "{name}: time table for regime {} must start at t = 0",
                            i + 1
                        )));
                    }
                    if table.windows(2).any(|w| w[0].0 >= w[1].0) {
                        return Err(Error::StructuralError(format!(
                            "{name}: time table for regime {} is not strictly increasing",
                            i + 1
                        )));
                    }
                    if table.last().map(|s| s.0 > horizon).unwrap_or(false) {
                        return Err(Error::StructuralError(format!(
                            "{name}: time table for regime {} extends past the horizon",
                            i + 1
                        )));
                    }
                }
            }
            CoefficientField::TreeNode { depth, values } => {
                for (i, levels) in values.iter().enumerate() {
                    if levels.len() != depth + 1
                        || levels.iter().enumerate().any(|(k, row)| row.len() != k + 1)
                    {
                        return Err(Error::StructuralError(format!(
                            "{name}: tree values for regime {} do not cover every node of depth {depth}",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads a coefficient at `(t, regime)` and, for tree fields, at `node`.
pub fn eval_coefficient<'a>(
    field: &'a CoefficientField,
    t: f64,
    regime: usize,
    node: Option<TreeNode>,
    horizon: f64,
) -> Result<&'a Mat> {
    let slack = 1e-12 * horizon.max(1.0);
    if !(t >= -slack && t <= horizon + slack) {
        return Err(Error::OutOfRange(format!("time {t} outside [0, {horizon}]")));
    }
    if regime >= field.regimes() {
        return Err(Error::OutOfRange(format!(
            "regime {regime} outside 0..{}",
            field.regimes()
        )));
    }
    match field {
        CoefficientField::Constant(v) => Ok(&v[regime]),
        CoefficientField::TimeTable(tables) => {
            let table = &tables[regime];
            let k = table.partition_point(|(s, _)| *s <= t + slack);
            Ok(&table[k.saturating_sub(1)].1)
        }
        CoefficientField::TreeNode { depth, values } => {
            let node = node.ok_or_else(|| {
                Error::OutOfRange("tree-node coefficient evaluated without a node".into())
            })?;
            if node.level > *depth || node.up > node.level {
                return Err(Error::OutOfRange(format!(
                    "node ({}, {}) not in a tree of depth {depth}",
                    node.level, node.up
                )));
            }
            Ok(&values[regime][node.level][node.up])
        }
    }
}

/// Coefficients of one regime at one time/node.
#[derive(Clone, Debug)]
pub struct NodeCoeffs {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub q: SymMatrix,
    pub s: Mat,
    pub r: SymMatrix,
}

impl NodeCoeffs {
    /// Scales the cost weights: `(Q, R, S) → factor·(Q, R, S)`.
    pub fn tilde(&self, factor: f64) -> NodeCoeffs {
        NodeCoeffs {
            q: self.q.scale(factor),
            r: self.r.scale(factor),
            s: &self.s * factor,
            ..self.clone()
        }
    }

    pub fn d_is_zero(&self) -> bool {
        self.d.iter().all(|v| *v == 0.0)
    }
}

/// A fully specified control problem.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub delta: f64,
    pub generator: Generator,
    pub a: CoefficientField,
    pub b: CoefficientField,
    pub c: CoefficientField,
    pub d: CoefficientField,
    pub q: CoefficientField,
    pub s: CoefficientField,
    pub r: CoefficientField,
    pub g: CoefficientField,
}

/// Builder with zero defaults for A, B, C, D, Q, S and G, identity R.
#[derive(Clone, Debug)]
pub struct ProblemBuilder {
    spec: ProblemSpec,
    asym_tol: f64,
}

impl ProblemSpec {
    pub fn builder(n: usize, m: usize, generator: Generator, horizon: f64) -> ProblemBuilder {
        let ell = generator.ell();
        ProblemBuilder {
            spec: ProblemSpec {
                n,
                m,
                horizon,
                delta: 1.0,
                a: CoefficientField::zeros(ell, n, n),
                b: CoefficientField::zeros(ell, n, m),
                c: CoefficientField::zeros(ell, n, n),
                d: CoefficientField::zeros(ell, n, m),
                q: CoefficientField::zeros(ell, n, n),
                s: CoefficientField::zeros(ell, m, n),
                r: CoefficientField::uniform(ell, Mat::identity(m, m)),
                g: CoefficientField::zeros(ell, n, n),
                generator,
            },
            asym_tol: DEFAULT_ASYM_TOL,
        }
    }

    pub fn ell(&self) -> usize {
        self.generator.ell()
    }

    fn fields(&self) -> [(&'static str, &CoefficientField); 8] {
        [
            ("A", &self.a),
            ("B", &self.b),
            ("C", &self.c),
            ("D", &self.d),
            ("Q", &self.q),
            ("S", &self.s),
            ("R", &self.r),
            ("G", &self.g),
        ]
    }

    /// Depth of the tree the coefficients are adapted to, if any field is tree-valued.
    pub fn tree_depth(&self) -> Option<usize> {
        self.fields().iter().find_map(|(_, f)| match f {
            CoefficientField::TreeNode { depth, .. } => Some(*depth),
            _ => None,
        })
    }

    pub fn is_deterministic(&self) -> bool {
        self.tree_depth().is_none()
    }

    pub fn d_is_zero(&self) -> bool {
        self.d.matrices().all(|m| m.iter().all(|v| *v == 0.0))
    }

    /// Copy of the problem with `D ≡ 0`.
    pub fn with_zero_d(&self) -> ProblemSpec {
        ProblemSpec {
            d: self.d.map_matrices(|m| Mat::zeros(m.nrows(), m.ncols())),
            ..self.clone()
        }
    }

    /// Copy with `Q` and `G` scaled by `c`.
    pub fn with_scaled_cost(&self, c: f64) -> ProblemSpec {
        ProblemSpec {
            q: self.q.map_matrices(|m| m * c),
            g: self.g.map_matrices(|m| m * c),
            ..self.clone()
        }
    }

    /// Copy with `D → cD`, `R → c²R` (and `S → c S` so the cost is unchanged in `u/c`).
    pub fn with_control_rescaled(&self, c: f64) -> ProblemSpec {
        ProblemSpec {
            d: self.d.map_matrices(|m| m * c),
            r: self.r.map_matrices(|m| m * (c * c)),
            ..self.clone()
        }
    }

    fn check_structure(&self, asym_tol: f64) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::StructuralError("state and control dimensions must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::StructuralError(format!("horizon {} must be > 0", self.horizon)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::StructuralError(format!("delta {} must be > 0", self.delta)));
        }
        let (n, m, ell, t) = (self.n, self.m, self.ell(), self.horizon);
        self.a.check("A", n, n, ell, t)?;
        self.b.check("B", n, m, ell, t)?;
        self.c.check("C", n, n, ell, t)?;
        self.d.check("D", n, m, ell, t)?;
        self.q.check("Q", n, n, ell, t)?;
        self.s.check("S", m, n, ell, t)?;
        self.r.check("R", m, m, ell, t)?;
        self.g.check("G", n, n, ell, t)?;
        for (name, f) in [("Q", &self.q), ("R", &self.r), ("G", &self.g)] {
            for mat in f.matrices() {
                SymMatrix::make_symmetric(mat, asym_tol).map_err(|e| {
                    Error::StructuralError(format!("{name} is not symmetric: {e}"))
                })?;
            }
        }
        let depths: Vec<usize> = self
            .fields()
            .iter()
            .filter_map(|(_, f)| match f {
                CoefficientField::TreeNode { depth, .. } => Some(*depth),
                _ => None,
            })
            .collect();
        if depths.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::StructuralError(
                "tree-valued coefficients declare different depths".into(),
            ));
        }
        if depths.first() == Some(&0) {
            return Err(Error::StructuralError("tree depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Coefficients of `regime` at time `t` (and `node` for tree fields).
    pub fn coeffs_at(&self, t: f64, regime: usize, node: Option<TreeNode>) -> Result<NodeCoeffs> {
        let h = self.horizon;
        let get = |f| eval_coefficient(f, t, regime, node, h);
        Ok(NodeCoeffs {
            a: get(&self.a)?.clone(),
            b: get(&self.b)?.clone(),
            c: get(&self.c)?.clone(),
            d: get(&self.d)?.clone(),
            q: SymMatrix::symmetric_part(get(&self.q)?),
            s: get(&self.s)?.clone(),
            r: SymMatrix::symmetric_part(get(&self.r)?),
        })
    }

    /// Terminal weight `G(regime)` (at a leaf for tree-valued `G`).
    pub fn terminal(&self, regime: usize, node: Option<TreeNode>) -> Result<SymMatrix> {
        let g = eval_coefficient(&self.g, self.horizon, regime, node, self.horizon)?;
        Ok(SymMatrix::symmetric_part(g))
    }

    /// Breakpoints of all time tables (plus 0), sorted.
    fn table_times(&self) -> Vec<f64> {
        let mut times = vec![0.0];
        for (_, f) in self.fields() {
            if let CoefficientField::TimeTable(tables) = f {
                times.extend(tables.iter().flatten().map(|(t, _)| *t));
            }
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }

    /// Points at which the running coefficients take distinct values:
    /// `(time, end of validity interval, node)`.
    fn sample_points(&self) -> Vec<(f64, f64, Option<TreeNode>)> {
        match self.tree_depth() {
            Some(depth) => {
                let tree = BinomialTree::new(self.horizon, depth);
                tree.nodes()
                    .map(|nd| {
                        let end = tree.time((nd.level + 1).min(depth));
                        (tree.time(nd.level), end, Some(nd))
                    })
                    .collect()
            }
            None => {
                let times = self.table_times();
                times
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| (t, times.get(k + 1).copied().unwrap_or(self.horizon), None))
                    .collect()
            }
        }
    }

    fn terminal_points(&self) -> Vec<Option<TreeNode>> {
        match self.tree_depth() {
            Some(depth) => (0..=depth).map(|up| Some(TreeNode { level: depth, up })).collect(),
            None => vec![None],
        }
    }
}

impl ProblemBuilder {
    pub fn a(mut self, f: CoefficientField) -> Self {
        self.spec.a = f;
        self
    }
    pub fn b(mut self, f: CoefficientField) -> Self {
        self.spec.b = f;
        self
    }
    pub fn c(mut self, f: CoefficientField) -> Self {
        self.spec.c = f;
        self
    }
    pub fn d(mut self, f: CoefficientField) -> Self {
        self.spec.d = f;
        self
    }
    pub fn q(mut self, f: CoefficientField) -> Self {
        self.spec.q = f;
        self
    }
    pub fn s(mut self, f: CoefficientField) -> Self {
        self.spec.s = f;
        self
    }
    pub fn r(mut self, f: CoefficientField) -> Self {
        self.spec.r = f;
        self
    }
    pub fn g(mut self, f: CoefficientField) -> Self {
        self.spec.g = f;
        self
    }
    pub fn delta(mut self, delta: f64) -> Self {
        self.spec.delta = delta;
        self
    }
    pub fn asym_tol(mut self, tol: f64) -> Self {
        self.asym_tol = tol;
        self
    }

    /// Checks dimensions, table coverage and symmetry; symmetric fields are
    /// symmetrized.
    pub fn build(self) -> Result<ProblemSpec> {
        let mut spec = self.spec;
        spec.check_structure(self.asym_tol)?;
        let symmetrize = |m: &Mat| SymMatrix::symmetric_part(m).into_mat();
        spec.q = spec.q.map_matrices(symmetrize);
        spec.r = spec.r.map_matrices(symmetrize);
        spec.g = spec.g.map_matrices(symmetrize);
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assumption {
    /// `R ≥ δ I`
    ControlWeightPositive,
    /// `Q − Sᵀ R⁻¹ S ≥ 0`
    StateWeightSchur,
    /// `G ≥ 0`
    TerminalPsd,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assumption::ControlWeightPositive => "R - delta*I >= 0",
            Assumption::StateWeightSchur => "Q - S'R^-1 S >= 0",
            Assumption::TerminalPsd => "G >= 0",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub assumption: Assumption,
    pub regime: usize,
    pub time: f64,
    pub node: Option<TreeNode>,
    /// Offending minimum eigenvalue (`-inf` if R could not be inverted).
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed {
            return write!(f, "all assumptions hold");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{} fails in regime {} at t = {}", v.assumption, v.regime + 1, v.time)?;
            if let Some(nd) = v.node {
                write!(f, " node ({}, {})", nd.level, nd.up)?;
            }
            write!(f, " (min eigenvalue {:e})", v.value)?;
        }
        Ok(())
    }
}

/// Checks `R ≥ δI`, `Q − SᵀR⁻¹S ≥ 0` and `G ≥ 0` at every sample and regime.
pub fn validate_assumptions(spec: &ProblemSpec, tol: f64) -> Result<ValidationReport> {
    spec.check_structure(DEFAULT_ASYM_TOL)?;
    let mut violations = Vec::new();
    for regime in 0..spec.ell() {
        for (t, _, node) in spec.sample_points() {
            let c = spec.coeffs_at(t, regime, node)?;
            let shifted = c.r.axpy(-spec.delta, &SymMatrix::identity(spec.m));
            let margin = shifted.min_eigenvalue();
            if margin < -tol {
                violations.push(Violation {
                    assumption: Assumption::ControlWeightPositive,
                    regime,
                    time: t,
                    node,
                    value: margin,
                });
            }
            let schur = match sym_inverse(&c.r, f64::INFINITY) {
                Ok(r_inv) => Some(&c.q - &r_inv.congruence(&c.s)),
                Err(_) => None,
            };
            let value = schur.map(|s| s.min_eigenvalue()).unwrap_or(f64::NEG_INFINITY);
            if value < -tol {
                violations.push(Violation {
                    assumption: Assumption::StateWeightSchur,
                    regime,
                    time: t,
                    node,
                    value,
                });
            }
        }
        for node in spec.terminal_points() {
            let g = spec.terminal(regime, node)?;
            let value = g.min_eigenvalue();
            if value < -tol {
                violations.push(Violation {
                    assumption: Assumption::TerminalPsd,
                    regime,
                    time: spec.horizon,
                    node,
                    value,
                });
            }
        }
    }
    Ok(ValidationReport {
        passed: violations.is_empty(),
        violations,
    })
}

/// Measured smallness quantity `max_{i,t} e^{−q_ii t} |D R⁻¹ Dᵀ|_F`.
///
/// Coefficients are piecewise constant, so on each validity interval the
/// supremum sits at the interval's right end.
pub fn check_smallness(spec: &ProblemSpec, cond_threshold: f64) -> Result<f64> {
    let mut worst = 0.0_f64;
    for regime in 0..spec.ell() {
        for (t, end, node) in spec.sample_points() {
            let c = spec.coeffs_at(t, regime, node)?;
            let r_inv = sym_inverse(&c.r, cond_threshold)?;
            let drd = &c.d * r_inv.as_mat() * c.d.transpose();
            let value = (-spec.generator.diag(regime) * end).exp() * drd.norm();
            worst = worst.max(value);
        }
    }
    Ok(worst)
}

/// The problem viewed in the coordinates `P̃(t,i) = e^{q_ii t} P(t,i)`:
/// `Q̃ = e^{q_ii t} Q`, `R̃ = e^{q_ii t} R`, `S̃ = e^{q_ii t} S`, `G̃ = e^{q_ii T} G`,
/// with `A, B, C, D` unchanged.
#[derive(Clone, Copy, Debug)]
pub struct TildeSpec<'a> {
    pub spec: &'a ProblemSpec,
}

pub fn tilde_transform(spec: &ProblemSpec) -> TildeSpec<'_> {
    TildeSpec { spec }
}

impl TildeSpec<'_> {
    pub fn factor(&self, regime: usize, t: f64) -> f64 {
        self.spec.generator.tilde_factor(regime, t)
    }

    pub fn coeffs_at(&self, t: f64, regime: usize, node: Option<TreeNode>) -> Result<NodeCoeffs> {
        Ok(self.spec.coeffs_at(t, regime, node)?.tilde(self.factor(regime, t)))
    }

    pub fn terminal(&self, regime: usize, node: Option<TreeNode>) -> Result<SymMatrix> {
        Ok(self
            .spec
            .terminal(regime, node)?
            .scale(self.factor(regime, self.spec.horizon)))
    }
}

/// Maps a field `[regime][node]` with node times `times` by `e^{sign·q_ii t}`.
fn rescale_field(
    field: &[Vec<SymMatrix>],
    generator: &Generator,
    times: &[f64],
    sign: f64,
) -> Vec<Vec<SymMatrix>> {
    field
        .iter()
        .enumerate()
        .map(|(i, values)| {
            values
                .iter()
                .zip(times)
                .map(|(v, &t)| v.scale((sign * generator.diag(i) * t).exp()))
                .collect()
        })
        .collect()
}

/// `P(t,i) = e^{−q_ii t} P̃(t,i)`, `Λ(t,i) = e^{−q_ii t} Λ̃(t,i)`.
pub fn untilde_solution(
    p_tilde: &[Vec<SymMatrix>],
    lambda_tilde: &[Vec<SymMatrix>],
    generator: &Generator,
    times: &[f64],
) -> (Vec<Vec<SymMatrix>>, Vec<Vec<SymMatrix>>) {
    (
        rescale_field(p_tilde, generator, times, -1.0),
        rescale_field(lambda_tilde, generator, times, -1.0),
    )
}

/// Inverse of [`untilde_solution`] for a single field.
pub fn tilde_field(field: &[Vec<SymMatrix>], generator: &Generator, times: &[f64]) -> Vec<Vec<SymMatrix>> {
    rescale_field(field, generator, times, 1.0)
}
