//! Variable-step multistep coefficients.
//!
//! For Adams-Bashforth, Adams-Moulton and BDF at orders 1-3, the per-step
//! coefficient rows `(a_jn, b_jn)` realizing
//! `sum_j a_jn x_{n+j} = sum_j b_jn f(x_{n+j})` on an arbitrary grid are
//! obtained by solving the order conditions
//! `sum_j a_jn q(t_{n+j}) = sum_j b_jn q'(t_{n+j})` for monomials
//! `q(t) = ((t - t_n)/s_n)^p`, `p = 0..P`, where `s_n` is the mean local
//! step. The scaling keeps the small Vandermonde-like systems
//! well-conditioned on irregular grids.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynsys::TimeGrid;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("unsupported ({kind:?}, order {order}); orders 1-3 are available")]
    UnsupportedOrder { kind: SchemeKind, order: usize },
    #[error("Taylor integrators carry no multistep coefficients")]
    TaylorBypassed,
    #[error("grid too short: scheme needs {needed} points, grid has {got}")]
    GridTooShort { needed: usize, got: usize },
    #[error("degenerate grid: singular order-condition system at row {row}")]
    SingularSystem { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    AdamsBashforth,
    AdamsMoulton,
    Bdf,
    /// Handled by the Taylor pipeline; has no coefficient rows.
    Taylor,
}

impl SchemeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ab" => Some(Self::AdamsBashforth),
            "am" => Some(Self::AdamsMoulton),
            "bdf" => Some(Self::Bdf),
            "taylor" => Some(Self::Taylor),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::AdamsBashforth => "ab",
            Self::AdamsMoulton => "am",
            Self::Bdf => "bdf",
            Self::Taylor => "taylor",
        }
    }
}

/// One coefficient row; `a` and `b` have length `M + 1` and are normalized
/// to `a[M] = 1`. The `b` entries carry time units.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeRow {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Coefficient rows of an M-step method over a concrete grid; row `n`
/// combines the window `t_n ..= t_{n+M}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultistepScheme {
    pub(crate) kind: SchemeKind,
    pub(crate) order: usize,
    pub(crate) steps: usize,
    pub(crate) rows: Vec<SchemeRow>,
    pub(crate) grid: TimeGrid,
}

impl MultistepScheme {
    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Window size M.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rows(&self) -> &[SchemeRow] {
        &self.rows
    }

    pub fn row(&self, n: usize) -> &SchemeRow {
        &self.rows[n]
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Number of steps M for a supported (kind, order) pair.
///
/// AM 1 keeps the implicit-Euler template with M = 1; AM 2 is the
/// trapezoidal rule (M = 1); AM 3 uses M = 2.
pub fn steps_for(kind: SchemeKind, order: usize) -> Result<usize, SchemeError> {
    match kind {
        SchemeKind::Taylor => Err(SchemeError::TaylorBypassed),
        _ if !(1..=3).contains(&order) => Err(SchemeError::UnsupportedOrder { kind, order }),
        SchemeKind::AdamsBashforth | SchemeKind::Bdf => Ok(order),
        SchemeKind::AdamsMoulton => Ok(if order <= 2 { 1 } else { 2 }),
    }
}

/// Coefficient template: fixed entries are `Some`, unknowns `None`;
/// `p_lo..=p_hi` are the order conditions solved for the unknowns.
struct Template {
    m: usize,
    a: Vec<Option<f64>>,
    b: Vec<Option<f64>>,
    p_lo: usize,
    p_hi: usize,
}

fn template(kind: SchemeKind, order: usize) -> Result<Template, SchemeError> {
    let m = steps_for(kind, order)?;
    let adams_a = |m: usize| {
        let mut a = vec![Some(0.0); m + 1];
        a[m - 1] = Some(-1.0);
        a[m] = Some(1.0);
        a
    };
    Ok(match kind {
        SchemeKind::AdamsBashforth => {
            let mut b = vec![None; m + 1];
            b[m] = Some(0.0);
            Template {
                m,
                a: adams_a(m),
                b,
                p_lo: 1,
                p_hi: order,
            }
        }
        SchemeKind::AdamsMoulton if order == 1 => Template {
            m,
            a: adams_a(m),
            b: vec![Some(0.0), None],
            p_lo: 1,
            p_hi: 1,
        },
        SchemeKind::AdamsMoulton => Template {
            m,
            a: adams_a(m),
            b: vec![None; m + 1],
            p_lo: 1,
            p_hi: order,
        },
        SchemeKind::Bdf => {
            let mut a = vec![None; m + 1];
            a[m] = Some(1.0);
            let mut b = vec![Some(0.0); m + 1];
            b[m] = None;
            Template {
                m,
                a,
                b,
                p_lo: 0,
                p_hi: order,
            }
        }
        SchemeKind::Taylor => unreachable!("steps_for rejects Taylor"),
    })
}

/// Generate the per-row coefficients of the given method on `grid`.
pub fn generate_scheme(
    kind: SchemeKind,
    order: usize,
    grid: &TimeGrid,
) -> Result<MultistepScheme, SchemeError> {
    let tpl = template(kind, order)?;
    let m = tpl.m;
    if grid.len() < m + 1 {
        return Err(SchemeError::GridTooShort {
            needed: m + 1,
            got: grid.len(),
        });
    }

    let times = grid.times();
    let steps = grid.steps();
    let n_rows = grid.len() - m;
    let n_unknowns = tpl.a.iter().chain(&tpl.b).filter(|c| c.is_none()).count();
    debug_assert_eq!(n_unknowns, tpl.p_hi - tpl.p_lo + 1);

    let mut rows = Vec::with_capacity(n_rows);
    for n in 0..n_rows {
        let t0 = times[n];
        let scale = steps[n..n + m].iter().sum::<f64>() / m as f64;
        // u_j = (t_{n+j} - t_n)/s_n; q_p(t) = u^p, q_p'(t) = p u^{p-1}/s_n.
        let u: Vec<f64> = (0..=m).map(|j| (times[n + j] - t0) / scale).collect();
        let q = |p: usize, j: usize| u[j].powi(p as i32);
        let qp = |p: usize, j: usize| {
            if p == 0 {
                0.0
            } else {
                p as f64 * u[j].powi(p as i32 - 1) / scale
            }
        };

        let mut mat = DMatrix::zeros(n_unknowns, n_unknowns);
        let mut rhs = DVector::zeros(n_unknowns);
        for (eq, p) in (tpl.p_lo..=tpl.p_hi).enumerate() {
            let mut col = 0;
            for j in 0..=m {
                match tpl.a[j] {
                    None => {
                        mat[(eq, col)] = q(p, j);
                        col += 1;
                    }
                    Some(aj) => rhs[eq] -= aj * q(p, j),
                }
            }
            for j in 0..=m {
                match tpl.b[j] {
                    None => {
                        mat[(eq, col)] = -qp(p, j);
                        col += 1;
                    }
                    Some(bj) => rhs[eq] += bj * qp(p, j),
                }
            }
        }

        let sol = mat
            .lu()
            .solve(&rhs)
            .ok_or(SchemeError::SingularSystem { row: n })?;

        let mut a = vec![0.0; m + 1];
        let mut b = vec![0.0; m + 1];
        let mut col = 0;
        for j in 0..=m {
            a[j] = match tpl.a[j] {
                None => {
                    col += 1;
                    sol[col - 1]
                }
                Some(v) => v,
            };
        }
        for j in 0..=m {
            b[j] = match tpl.b[j] {
                None => {
                    col += 1;
                    sol[col - 1]
                }
                Some(v) => v,
            };
        }
        // The p = 0 condition (sum_j a_j = 0) holds exactly by correcting
        // a_0; this leaves all p >= 1 conditions untouched since q_p(t_n) = 0.
        let sum: f64 = a.iter().sum();
        a[0] -= sum;
        rows.push(SchemeRow { a, b });
    }

    Ok(MultistepScheme {
        kind,
        order,
        steps: m,
        rows,
        grid: grid.clone(),
    })
}

/// Maximum order-condition residual over all rows and all degrees
/// `p = 0..P`, evaluated on the same scaled monomials used for generation.
pub fn verify_consistency(scheme: &MultistepScheme) -> f64 {
    consistency_residual(scheme, scheme.order)
}

/// Residual of the degree-`p_max` conditions; exceeding the scheme's order
/// gives a nonzero value on generic grids.
pub fn consistency_residual(scheme: &MultistepScheme, p_max: usize) -> f64 {
    let m = scheme.steps;
    let times = scheme.grid.times();
    let steps = scheme.grid.steps();
    let mut worst: f64 = 0.0;
    for (n, row) in scheme.rows.iter().enumerate() {
        let t0 = times[n];
        let scale = steps[n..n + m].iter().sum::<f64>() / m as f64;
        let u: Vec<f64> = (0..=m).map(|j| (times[n + j] - t0) / scale).collect();
        for p in 0..=p_max {
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for j in 0..=m {
                lhs += row.a[j] * u[j].powi(p as i32);
                if p > 0 {
                    rhs += row.b[j] * p as f64 * u[j].powi(p as i32 - 1) / scale;
                }
            }
            worst = worst.max((lhs - rhs).abs());
        }
    }
    worst
}

/// True iff the newest dynamics coefficient vanishes in every row.
pub fn is_explicit(scheme: &MultistepScheme) -> bool {
    let m = scheme.steps;
    scheme.rows.iter().all(|r| r.b[m] == 0.0)
}

/// Debug dump: `n,a_0..a_M,b_0..b_M` per row.
pub fn scheme_to_csv(scheme: &MultistepScheme) -> String {
    let m = scheme.steps;
    let mut out = String::from("n");
    for j in 0..=m {
        let _ = write!(out, ",a_{j}");
    }
    for j in 0..=m {
        let _ = write!(out, ",b_{j}");
    }
    out.push('\n');
    for (n, row) in scheme.rows.iter().enumerate() {
        let _ = write!(out, "{n}");
        for v in row.a.iter().chain(&row.b) {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}
