//! Block-separable least squares with linear inequality constraints.
//!
//! The objective is `f(W) = Σ_m ‖X_m w_m − y_m‖² + ridge·‖W‖²` subject to
//! `A·W + b ≥ 0`. Multipliers follow `∇f(W) = Aᵀλ`, `λ ≥ 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
/// Normal matrices with a larger condition estimate count as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest constraint count accepted by [`oracle_solve`].
pub const ORACLE_MAX_CONSTRAINTS: usize = 12;

const DUPLICATE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("ridge must be finite and non-negative, got {0}")]
    InvalidRidge(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("max_iter must be at least 1")]
    InvalidMaxIter,
    #[error(
        "normal matrix of block {block} is singular (condition estimate {condition:.3e}); use a positive ridge"
    )]
    SingularNormalMatrix { block: usize, condition: f64 },
    #[error("KKT system is ill-conditioned for constraints {constraints:?}")]
    IllConditioned { constraints: Vec<usize> },
    #[error("oracle supports at most {max} constraints, got {count}")]
    TooManyConstraints { count: usize, max: usize },
}

/// One mode's design matrix (N_m×K_m) and response (N_m).
#[derive(Debug, Clone, PartialEq)]
pub struct QpBlock {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
}

impl QpBlock {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>) -> Result<Self, QpError> {
        if design.nrows() != response.len() {
            return Err(QpError::DimensionMismatch(format!(
                "design has {} rows, response has {}",
                design.nrows(),
                response.len()
            )));
        }
        Ok(Self { design, response })
    }

    pub fn n_coefficients(&self) -> usize {
        self.design.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub blocks: Vec<QpBlock>,
    /// p'×ΣK_m; each row is a constraint gradient.
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_offset: DVector<f64>,
    pub ridge: f64,
}

impl QpProblem {
    pub fn new(
        blocks: Vec<QpBlock>,
        constraint_matrix: DMatrix<f64>,
        constraint_offset: DVector<f64>,
        ridge: f64,
    ) -> Result<Self, QpError> {
        let p = Self {
            blocks,
            constraint_matrix,
            constraint_offset,
            ridge,
        };
        p.validate()?;
        Ok(p)
    }

    /// A problem with no constraints.
    pub fn unconstrained(blocks: Vec<QpBlock>, ridge: f64) -> Result<Self, QpError> {
        let n: usize = blocks.iter().map(QpBlock::n_coefficients).sum();
        Self::new(blocks, DMatrix::zeros(0, n), DVector::zeros(0), ridge)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        for (i, b) in self.blocks.iter().enumerate() {
            if b.design.nrows() != b.response.len() {
                return Err(QpError::DimensionMismatch(format!(
                    "block {i}: design has {} rows, response has {}",
                    b.design.nrows(),
                    b.response.len()
                )));
            }
        }
        if self.constraint_matrix.ncols() != self.n_coefficients() {
            return Err(QpError::DimensionMismatch(format!(
                "constraint matrix has {} columns, coefficients total {}",
                self.constraint_matrix.ncols(),
                self.n_coefficients()
            )));
        }
        if self.constraint_matrix.nrows() != self.constraint_offset.len() {
            return Err(QpError::DimensionMismatch(format!(
                "constraint matrix has {} rows, offset has {}",
                self.constraint_matrix.nrows(),
                self.constraint_offset.len()
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(QpError::InvalidRidge(self.ridge));
        }
        Ok(())
    }

    pub fn n_coefficients(&self) -> usize {
        self.blocks.iter().map(QpBlock::n_coefficients).sum()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraint_matrix.nrows()
    }

    /// Start offset of each block in the stacked coefficient vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = acc;
                acc += b.n_coefficients();
                o
            })
            .collect()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let mut total = self.ridge * w.norm_squared();
        for (b, o) in self.blocks.iter().zip(self.block_offsets()) {
            let wm = w.rows(o, b.n_coefficients());
            total += (&b.design * wm - &b.response).norm_squared();
        }
        total
    }

    /// `∇f(W) = 2(HW − Xᵀy)`.
    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(w.len());
        for (b, o) in self.blocks.iter().zip(self.block_offsets()) {
            let k = b.n_coefficients();
            let wm = w.rows(o, k);
            let r = &b.design * wm - &b.response;
            g.rows_mut(o, k).copy_from(&(b.design.transpose() * r * 2.0));
        }
        g + w * (2.0 * self.ridge)
    }

    /// Constraint values `A·W + b`.
    pub fn slacks(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.constraint_matrix * w + &self.constraint_offset
    }

    /// Block-diagonal `XᵀX + ridge·I` and the stacked `Xᵀy`.
    fn normal_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_coefficients();
        let mut h = DMatrix::identity(n, n) * self.ridge;
        let mut g = DVector::zeros(n);
        for (b, o) in self.blocks.iter().zip(self.block_offsets()) {
            let k = b.n_coefficients();
            let xt = b.design.transpose();
            let mut hb = h.view_mut((o, o), (k, k));
            hb += &xt * &b.design;
            g.rows_mut(o, k).copy_from(&(&xt * &b.response));
        }
        (h, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Converged,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub coefficients: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Sorted constraint indices.
    pub active_set: Vec<usize>,
    pub objective_value: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

/// Worst violation of each KKT condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `max(0, −min(A·W + b))`
    pub primal: f64,
    /// `max(0, −min(λ))`
    pub dual: f64,
    /// `max |λ_ℓ·(A·W + b)_ℓ|`
    pub complementarity: f64,
    /// `‖∇f(W) − Aᵀλ‖_∞`
    pub stationarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal
            .max(self.dual)
            .max(self.complementarity)
            .max(self.stationarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

pub fn kkt_residuals(problem: &QpProblem, w: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let s = problem.slacks(w);
    let primal = s.iter().fold(0.0_f64, |acc, v| acc.max(-v));
    let dual = lambda.iter().fold(0.0_f64, |acc, v| acc.max(-v));
    let complementarity = s
        .iter()
        .zip(lambda.iter())
        .fold(0.0_f64, |acc, (s, l)| acc.max((s * l).abs()));
    let stat = problem.gradient(w) - problem.constraint_matrix.transpose() * lambda;
    KktResiduals {
        primal,
        dual,
        complementarity,
        stationarity: stat.amax(),
    }
}

/// Ridge selection for the normal matrices.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RidgePolicy {
    /// Zero unless some block is numerically singular, then
    /// `1e-10·trace(XᵀX)/K` of the worst such block.
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for RidgePolicy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RidgePolicy::Auto => s.serialize_str("auto"),
            RidgePolicy::Fixed(r) => s.serialize_f64(*r),
        }
    }
}

impl<'de> Deserialize<'de> for RidgePolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(r) if r >= 0.0 && r.is_finite() => Ok(RidgePolicy::Fixed(r)),
            Repr::Num(r) => Err(serde::de::Error::custom(format!("ridge must be non-negative, got {r}"))),
            Repr::Str(s) if s == "auto" => Ok(RidgePolicy::Auto),
            Repr::Str(s) => Err(serde::de::Error::custom(format!(
                "ridge must be \"auto\" or a number, got \"{s}\""
            ))),
        }
    }
}

/// Condition number of `XᵀX + ridge·I` from its eigenvalues; infinite when
/// the smallest is not positive.
pub fn normal_condition(design: &DMatrix<f64>, ridge: f64) -> f64 {
    let k = design.ncols();
    if k == 0 {
        return 1.0;
    }
    let h = design.transpose() * design + DMatrix::identity(k, k) * ridge;
    let ev = SymmetricEigen::new(h).eigenvalues;
    let max = ev.max();
    let min = ev.min();
    if min > 0.0 && max.is_finite() {
        max / min
    } else {
        f64::INFINITY
    }
}

pub fn resolve_ridge(blocks: &[QpBlock], policy: RidgePolicy) -> f64 {
    match policy {
        RidgePolicy::Fixed(r) => r,
        RidgePolicy::Auto => blocks
            .iter()
            .filter(|b| b.n_coefficients() > 0 && normal_condition(&b.design, 0.0) > MAX_CONDITION)
            .map(|b| 1e-10 * b.design.norm_squared() / b.n_coefficients() as f64)
            .fold(0.0, f64::max),
    }
}

fn block_cholesky(b: &QpBlock, index: usize, ridge: f64) -> Result<Cholesky<f64, Dyn>, QpError> {
    let condition = normal_condition(&b.design, ridge);
    let k = b.n_coefficients();
    let h = b.design.transpose() * &b.design + DMatrix::identity(k, k) * ridge;
    if condition > MAX_CONDITION {
        return Err(QpError::SingularNormalMatrix { block: index, condition });
    }
    Cholesky::new(h).ok_or(QpError::SingularNormalMatrix { block: index, condition })
}

/// Solves `(XᵀX + ridge·I) w = Xᵀy` per block and concatenates the results.
pub fn solve_unconstrained(blocks: &[QpBlock], ridge: f64) -> Result<DVector<f64>, QpError> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(QpError::InvalidRidge(ridge));
    }
    let mut parts = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        if b.design.nrows() != b.response.len() {
            return Err(QpError::DimensionMismatch(format!(
                "block {i}: design has {} rows, response has {}",
                b.design.nrows(),
                b.response.len()
            )));
        }
        if b.n_coefficients() == 0 {
            continue;
        }
        let chol = block_cholesky(b, i, ridge)?;
        parts.push(chol.solve(&(b.design.transpose() * &b.response)));
    }
    let values: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(DVector::from_vec(values))
}

pub fn default_max_iter(n_constraints: usize) -> usize {
    10 * (n_constraints + 1)
}

/// Indices of rows of `[A b]` that are not duplicates of an earlier row.
fn unique_constraints(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..a.nrows() {
        let dup = kept.iter().any(|&j| {
            (b[i] - b[j]).abs() <= DUPLICATE_TOL && (a.row(i) - a.row(j)).amax() <= DUPLICATE_TOL
        });
        if !dup {
            kept.push(i);
        }
    }
    kept
}

/// Solves `[Q −N; Nᵀ 0][x; u] = [rhs_x; rhs_u]`, with `N` the active rows of
/// `A` as columns.
fn kkt_solve(
    q: &DMatrix<f64>,
    a: &DMatrix<f64>,
    active: &[usize],
    rhs_x: &DVector<f64>,
    rhs_u: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = q.nrows();
    let m = active.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(q);
    for (j, &c) in active.iter().enumerate() {
        for i in 0..n {
            k[(i, n + j)] = -a[(c, i)];
            k[(n + j, i)] = a[(c, i)];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(rhs_x);
    rhs.rows_mut(n, m).copy_from(rhs_u);
    let lu = k.full_piv_lu();
    let u = lu.u();
    let diag = u.diagonal().abs();
    if diag.is_empty() || !(diag.min() > 1e-14 * diag.max()) {
        return None;
    }
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

fn ill_conditioned(active: &[usize], extra: Option<usize>) -> QpError {
    let mut constraints: Vec<usize> = active.iter().copied().chain(extra).collect();
    constraints.sort_unstable();
    QpError::IllConditioned { constraints }
}

fn finish(
    problem: &QpProblem,
    w: DVector<f64>,
    active: &[(usize, f64)],
    iterations: usize,
    status: QpStatus,
) -> QpSolution {
    let mut multipliers = DVector::zeros(problem.n_constraints());
    let mut active_set = Vec::with_capacity(active.len());
    for &(i, u) in active {
        multipliers[i] = u.max(0.0);
        active_set.push(i);
    }
    active_set.sort_unstable();
    QpSolution {
        objective_value: problem.objective(&w),
        coefficients: w,
        multipliers,
        active_set,
        iterations,
        status,
    }
}

/// Active-set solve started from the unconstrained minimizer.
///
/// Each outer step adds the most-violated constraint (lowest index on ties)
/// and moves along the KKT direction that keeps the working set tight. A
/// working constraint whose multiplier would turn negative before the new
/// one is satisfied is dropped first (lowest index on ties). When the new
/// constraint's normal lies in the span of the working normals and no
/// working constraint can be dropped, the system is infeasible.
///
/// `iterations` counts KKT solves. The final point is polished with one
/// equality-constrained KKT solve on the active set; with an empty active
/// set the unconstrained minimizer is returned unchanged.
pub fn solve(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    problem.validate()?;
    if !(tol > 0.0) {
        return Err(QpError::InvalidTolerance(tol));
    }
    if max_iter == 0 {
        return Err(QpError::InvalidMaxIter);
    }
    let w0 = solve_unconstrained(&problem.blocks, problem.ridge)?;
    let a = &problem.constraint_matrix;
    let b = &problem.constraint_offset;
    let candidates = unique_constraints(a, b);

    let (h, g) = problem.normal_system();
    let q = &h * 2.0;
    let q_chol = Cholesky::new(q.clone()).ok_or(QpError::SingularNormalMatrix {
        block: 0,
        condition: f64::INFINITY,
    })?;
    let neg_c = &g * 2.0;

    let mut w = w0.clone();
    // (constraint index, multiplier)
    let mut active: Vec<(usize, f64)> = Vec::new();
    let mut iterations = 0;

    loop {
        let s = problem.slacks(&w);
        let mut worst: Option<usize> = None;
        for &i in &candidates {
            if s[i] < -tol && worst.is_none_or(|j| s[i] < s[j]) && !active.iter().any(|&(k, _)| k == i) {
                worst = Some(i);
            }
        }
        let Some(p) = worst else { break };
        let n_p: DVector<f64> = a.row(p).transpose();
        let mut u_p = 0.0;

        loop {
            if iterations >= max_iter {
                return Ok(finish(problem, w, &active, iterations, QpStatus::IterationLimit));
            }
            iterations += 1;
            let ids: Vec<usize> = active.iter().map(|&(i, _)| i).collect();
            let (z, r) = kkt_solve(&q, a, &ids, &n_p, &DVector::zeros(ids.len()))
                .ok_or_else(|| ill_conditioned(&ids, Some(p)))?;

            // partial step: first working multiplier to reach zero
            let mut t1: Option<(f64, usize)> = None;
            for (j, &(_, u)) in active.iter().enumerate() {
                if r[j] < 0.0 {
                    let t = u / -r[j];
                    if t1.is_none_or(|(best, _)| t < best) {
                        t1 = Some((t, j));
                    }
                }
            }

            let curvature = n_p.dot(&z);
            let reference = n_p.dot(&q_chol.solve(&n_p));
            let s_p = n_p.dot(&w) + b[p];
            let t2 = (curvature > 1e-10 * reference).then(|| -s_p / curvature);

            let (t, drop) = match (t1, t2) {
                (None, None) => {
                    return Ok(finish(problem, w, &active, iterations, QpStatus::Infeasible));
                }
                (Some((t, j)), None) => (t, Some(j)),
                (None, Some(t)) => (t, None),
                (Some((ta, j)), Some(tb)) if ta < tb => (ta, Some(j)),
                (_, Some(t)) => (t, None),
            };

            if t2.is_some() {
                w += &z * t;
            }
            for (j, entry) in active.iter_mut().enumerate() {
                entry.1 += t * r[j];
            }
            u_p += t;

            match drop {
                Some(j) => {
                    active.remove(j);
                }
                None => {
                    active.push((p, u_p));
                    break;
                }
            }
        }
    }

    if active.is_empty() {
        return Ok(finish(problem, w0, &active, iterations, QpStatus::Converged));
    }

    // polish: equality-constrained solve on the final active set
    active.sort_by_key(|&(i, _)| i);
    let ids: Vec<usize> = active.iter().map(|&(i, _)| i).collect();
    let rhs_u = DVector::from_iterator(ids.len(), ids.iter().map(|&i| -b[i]));
    if let Some((x, u)) = kkt_solve(&q, a, &ids, &neg_c, &rhs_u) {
        let polished: Vec<(usize, f64)> = ids.iter().copied().zip(u.iter().copied()).collect();
        let before = kkt_residuals(problem, &w, &multipliers_of(problem, &active)).max();
        let after = kkt_residuals(problem, &x, &multipliers_of(problem, &polished)).max();
        if after <= before {
            w = x;
            active = polished;
        }
    }
    // second candidate: project onto the active constraints, then refit the
    // multipliers from stationarity; better when the KKT matrix is badly scaled
    if let Some((x, u)) = project_active(problem, &w, &ids) {
        let projected: Vec<(usize, f64)> = ids.iter().copied().zip(u.iter().copied()).collect();
        let before = kkt_residuals(problem, &w, &multipliers_of(problem, &active)).max();
        let after = kkt_residuals(problem, &x, &multipliers_of(problem, &projected)).max();
        if after < before {
            w = x;
            active = projected;
        }
    }
    Ok(finish(problem, w, &active, iterations, QpStatus::Converged))
}

/// Minimum-norm correction making the active rows tight, with multipliers
/// from the least-squares fit of `∇f = Nλ`.
fn project_active(problem: &QpProblem, w: &DVector<f64>, ids: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let a = &problem.constraint_matrix;
    let n_t = DMatrix::from_fn(ids.len(), w.len(), |r, c| a[(ids[r], c)]);
    let slack = DVector::from_iterator(ids.len(), ids.iter().map(|&i| problem.slacks(w)[i]));
    let svd_t = n_t.clone().svd(true, true);
    let x = w - svd_t.solve(&slack, 1e-14 * svd_t.singular_values.max()).ok()?;
    let n = n_t.transpose();
    let svd = n.svd(true, true);
    let u = svd.solve(&problem.gradient(&x), 1e-14 * svd.singular_values.max()).ok()?;
    (x.iter().chain(u.iter()).all(|v| v.is_finite())).then_some((x, u))
}

fn multipliers_of(problem: &QpProblem, active: &[(usize, f64)]) -> DVector<f64> {
    let mut l = DVector::zeros(problem.n_constraints());
    for &(i, u) in active {
        l[i] = u;
    }
    l
}

/// Exhaustive reference solver: tries every subset of constraints as the
/// active set and keeps the best KKT point.
///
/// The Hessian and linear term are assembled here directly from the block
/// data, independent of [`solve`].
pub fn oracle_solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let pc = problem.n_constraints();
    if pc > ORACLE_MAX_CONSTRAINTS {
        return Err(QpError::TooManyConstraints {
            count: pc,
            max: ORACLE_MAX_CONSTRAINTS,
        });
    }
    let n = problem.n_coefficients();
    // Hessian of f is 2·blockdiag(XᵀX) + 2·ridge·I; −(linear term) is 2·Xᵀy
    let mut hess = DMatrix::<f64>::zeros(n, n);
    let mut lin = DVector::<f64>::zeros(n);
    let mut offset = 0;
    for blk in &problem.blocks {
        let k = blk.n_coefficients();
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for r in 0..blk.design.nrows() {
                    acc += blk.design[(r, i)] * blk.design[(r, j)];
                }
                hess[(offset + i, offset + j)] = 2.0 * acc;
            }
            let mut acc = 0.0;
            for r in 0..blk.design.nrows() {
                acc += blk.design[(r, i)] * blk.response[r];
            }
            lin[offset + i] = 2.0 * acc;
        }
        offset += k;
    }
    for i in 0..n {
        hess[(i, i)] += 2.0 * problem.ridge;
    }

    let a = &problem.constraint_matrix;
    let b = &problem.constraint_offset;
    let feas_tol = 1e-9;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, Vec<usize>)> = None;
    for mask in 0u32..(1u32 << pc) {
        let set: Vec<usize> = (0..pc).filter(|i| mask & (1 << i) != 0).collect();
        let m = set.len();
        let mut k = DMatrix::<f64>::zeros(n + m, n + m);
        let mut rhs = DVector::<f64>::zeros(n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&hess);
        rhs.rows_mut(0, n).copy_from(&lin);
        for (j, &c) in set.iter().enumerate() {
            for i in 0..n {
                k[(i, n + j)] = -a[(c, i)];
                k[(n + j, i)] = a[(c, i)];
            }
            rhs[n + j] = -b[c];
        }
        let Some(sol) = k.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let w = sol.rows(0, n).into_owned();
        let mut lambda = DVector::<f64>::zeros(pc);
        for (j, &c) in set.iter().enumerate() {
            lambda[c] = sol[n + j];
        }
        if lambda.iter().any(|&l| l < -feas_tol) {
            continue;
        }
        if problem.slacks(&w).iter().any(|&s| s < -feas_tol) {
            continue;
        }
        let obj = problem.objective(&w);
        if best.as_ref().is_none_or(|(o, ..)| obj < *o - 1e-14 * o.abs().max(1.0)) {
            best = Some((obj, w, lambda.map(|l| l.max(0.0)), set));
        }
    }
    Ok(match best {
        Some((objective_value, coefficients, multipliers, active_set)) => QpSolution {
            coefficients,
            multipliers,
            active_set,
            objective_value,
            iterations: 1 << pc,
            status: QpStatus::Converged,
        },
        None => QpSolution {
            objective_value: f64::INFINITY,
            coefficients: DVector::zeros(n),
            multipliers: DVector::zeros(pc),
            active_set: Vec::new(),
            iterations: 1 << pc,
            status: QpStatus::Infeasible,
        },
    })
}
