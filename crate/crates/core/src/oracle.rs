//! Brute-force influence: perturb every input cell to each value of its
//! perturbation domain, re-run the operation and record which output entities
//! change or disappear.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::container::{Container, ContainerError, Scalar};
use crate::lineage::{
    Completeness, InfluenceKind, KindCompleteness, LineageError, LineageRecord, LineageTable, Origin,
    OriginKind,
};
use crate::ops::OpError;
use crate::par;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("operation is not deterministic: two runs on the same input differ")]
    NonDeterministicOp,
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Lineage(#[from] LineageError),
}

/// Finite stand-in for the domain of possible values of one cell.
pub trait PerturbationDomain: Sync {
    /// Alternatives for the cell at row-major `offset` of `a`. Never contains
    /// the current value.
    fn alternatives(&self, a: &Container, offset: usize) -> Vec<Scalar>;
}

/// Non-null values sharing the cell's position on every dimension but the
/// first (the cell's column, for tables), the cell itself included.
fn column_peers(a: &Container, offset: usize) -> Vec<&Scalar> {
    let shape = a.shape();
    let stride: usize = shape.iter().skip(1).product();
    let base = offset % stride.max(1);
    (0..shape[0])
        .map(|r| &a.values()[r * stride + base])
        .filter(|v| !v.is_null())
        .collect()
}

fn numeric_span(peers: &[&Scalar]) -> Option<(f64, f64)> {
    peers
        .iter()
        .filter_map(|v| v.as_f64())
        .fold(None, |acc, x| match acc {
            None => Some((x, x)),
            Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
        })
}

fn sentinel(offset: usize) -> Scalar {
    Scalar::Str(format!("⊥#{offset}"))
}

fn finish(v: &Scalar, candidates: Vec<Scalar>) -> Vec<Scalar> {
    let mut out: Vec<Scalar> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c != *v && !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Small typed domain: zero, negation, successor, values just outside the
/// column range, the empty string and a fresh string for text, and Null.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardDomain;

impl PerturbationDomain for StandardDomain {
    fn alternatives(&self, a: &Container, offset: usize) -> Vec<Scalar> {
        let v = &a.values()[offset];
        let peers = column_peers(a, offset);
        let span = numeric_span(&peers);
        let mut c = Vec::with_capacity(6);
        match v {
            Scalar::Int(i) => {
                let (lo, hi) = span.unwrap_or((*i as f64, *i as f64));
                c.push(Scalar::Int(0));
                c.extend(i.checked_neg().map(Scalar::Int));
                c.extend(i.checked_add(1).map(Scalar::Int));
                c.extend(below(lo).map(Scalar::Int));
                c.extend(above(hi).map(Scalar::Int));
                c.push(Scalar::Null);
            }
            Scalar::Float(f) => {
                let (lo, hi) = span.unwrap_or((*f, *f));
                for x in [0.0, -f, f + 1.0, lo - 1.0, hi + 1.0] {
                    c.extend(Scalar::float(x).ok());
                }
                c.push(Scalar::Null);
            }
            Scalar::Str(_) => {
                c.push(sentinel(offset));
                c.push(Scalar::str(""));
                c.push(Scalar::Null);
            }
            Scalar::Bool(b) => {
                c.push(Scalar::Bool(!b));
                c.push(Scalar::Null);
            }
            Scalar::Null => {
                if let Some((lo, hi)) = span {
                    if peers.iter().all(|p| matches!(p, Scalar::Int(_))) {
                        c.extend(below(lo).map(Scalar::Int));
                        c.extend(above(hi).map(Scalar::Int));
                    } else {
                        c.extend(Scalar::float(lo - 1.0).ok());
                        c.extend(Scalar::float(hi + 1.0).ok());
                    }
                }
                if peers.iter().any(|p| matches!(p, Scalar::Str(_))) {
                    c.push(sentinel(offset));
                    c.push(Scalar::str(""));
                }
                if peers.iter().any(|p| matches!(p, Scalar::Bool(_))) {
                    c.push(Scalar::Bool(true));
                    c.push(Scalar::Bool(false));
                }
                if c.is_empty() {
                    c.push(Scalar::Int(0));
                }
            }
        }
        finish(v, c)
    }
}

fn below(lo: f64) -> Option<i64> {
    let x = lo.floor() - 1.0;
    (x >= i64::MIN as f64).then_some(x as i64)
}

fn above(hi: f64) -> Option<i64> {
    let x = hi.ceil() + 1.0;
    (x < i64::MAX as f64).then_some(x as i64)
}

/// Every integer from two below to two above the column range, plus Null.
/// Non-numeric cells fall back to the standard domain.
#[derive(Debug, Clone, Copy, Default)]
pub struct IntervalDomain;

impl PerturbationDomain for IntervalDomain {
    fn alternatives(&self, a: &Container, offset: usize) -> Vec<Scalar> {
        let v = &a.values()[offset];
        let peers = column_peers(a, offset);
        let numeric = match v {
            Scalar::Int(_) | Scalar::Float(_) => true,
            Scalar::Null => peers.is_empty() || peers.iter().all(|p| p.is_numeric()),
            _ => false,
        };
        if !numeric {
            return StandardDomain.alternatives(a, offset);
        }
        let (lo, hi) = numeric_span(&peers).unwrap_or((0.0, 0.0));
        let (lo, hi) = (lo.floor() as i64 - 2, hi.ceil() as i64 + 2);
        let mut c: Vec<Scalar> = (lo..=hi).map(Scalar::Int).collect();
        c.push(Scalar::Null);
        finish(v, c)
    }
}

/// The standard domain for the cell at `offset`.
pub fn standard_domain(a: &Container, offset: usize) -> Vec<Scalar> {
    StandardDomain.alternatives(a, offset)
}

/// True when entity `b` of `before` is missing from `after` or holds a
/// different value there. Entities are matched by label.
pub fn output_changed(b: &crate::container::IndexTuple, before: &Container, after: &Container) -> bool {
    match (before.get_cell(b), after.get_cell(b)) {
        (Ok(x), Ok(y)) => x != y,
        (Ok(_), Err(_)) => true,
        (Err(_), _) => false,
    }
}

/// Change flags for every entity of `before` (row-major).
fn changed_flags(before: &Container, after: &Container) -> Vec<bool> {
    if before.dims() == after.dims() {
        return before.values().iter().zip(after.values()).map(|(x, y)| x != y).collect();
    }
    // map each dim's positions of `before` into `after`
    let maps: Vec<Vec<Option<usize>>> = if before.dim_count() == after.dim_count() {
        before
            .dims()
            .iter()
            .zip(after.dims())
            .map(|(d, e)| d.labels().map(|l| e.position(l)).collect())
            .collect()
    } else {
        return vec![true; before.cell_count()];
    };
    before
        .positioned_cells()
        .map(|(pos, x)| {
            let mapped: Option<Vec<usize>> = pos.iter().enumerate().map(|(d, &p)| maps[d][p]).collect();
            match mapped {
                Some(q) => after.get_at(&q) != x,
                None => true,
            }
        })
        .collect()
}

/// Oracle lineage for `run` on `a`. Runs the operation twice on `a` to check
/// determinism, then once per perturbation.
pub fn influence_oracle<F>(run: &F, a: &Container, domain: &dyn PerturbationDomain) -> Result<LineageTable, OracleError>
where
    F: Fn(&Container) -> Result<Container, OpError> + Sync,
{
    let b = run(a)?;
    if run(a)? != b {
        return Err(OracleError::NonDeterministicOp);
    }
    influence_oracle_with_output(run, a, &b, domain)
}

/// Oracle lineage when the unperturbed output `b` is already known. Executes
/// `run` exactly once per (cell, alternative) pair.
pub fn influence_oracle_with_output<F>(
    run: &F,
    a: &Container,
    b: &Container,
    domain: &dyn PerturbationDomain,
) -> Result<LineageTable, OracleError>
where
    F: Fn(&Container) -> Result<Container, OpError> + Sync,
{
    let jobs: Vec<(usize, Scalar)> = (0..a.cell_count())
        .flat_map(|off| domain.alternatives(a, off).into_iter().map(move |x| (off, x)))
        .collect();
    let flags = par::try_map(&jobs, |(off, x)| -> Result<Vec<bool>, OracleError> {
        let perturbed = a.with_value_at(*off, x.clone())?;
        Ok(changed_flags(b, &run(&perturbed)?))
    })?;

    let in_pos: Vec<Vec<usize>> = a.positioned_cells().map(|(p, _)| p).collect();
    let out_idx: Vec<_> = b.indices().collect();
    let n_out = out_idx.len();
    let mut any = vec![vec![false; n_out]; a.cell_count()];
    let mut all = vec![vec![true; n_out]; a.cell_count()];
    for ((off, _), changed) in jobs.iter().zip(&flags) {
        for (j, &c) in changed.iter().enumerate() {
            any[*off][j] |= c;
            all[*off][j] &= c;
        }
    }
    let mut seen = vec![false; a.cell_count()];
    for (off, _) in &jobs {
        seen[*off] = true;
    }
    let mut records = BTreeSet::new();
    for off in 0..a.cell_count() {
        if !seen[off] {
            continue;
        }
        let in_idx = a.index_at(&in_pos[off]);
        for (j, out) in out_idx.iter().enumerate() {
            if any[off][j] {
                records.insert(LineageRecord::new(out.clone(), 0, in_idx.clone(), InfluenceKind::Indirect));
            }
            if all[off][j] {
                records.insert(LineageRecord::new(out.clone(), 0, in_idx.clone(), InfluenceKind::Direct));
            }
        }
    }
    Ok(LineageTable::build(
        records,
        KindCompleteness {
            direct: Completeness::OverApprox,
            indirect: Completeness::Exact,
        },
        Origin::now(OriginKind::Oracle),
        b.schema(),
        vec![a.schema()],
    )?)
}
