//! Learnt lineage for black-box operations: run the operation on small
//! perturbed subsets of the real input, keep the tags every example
//! satisfies, and extrapolate by intersecting their maximum-constraint
//! tables on the full container.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::lineage::{intersect_tables, LineageError, LineageTable, Origin, OriginKind};
use crate::ops::{OpError, OperationSignature};
use crate::oracle::{influence_oracle_with_output, IntervalDomain, OracleError, PerturbationDomain, StandardDomain};
use crate::par;
use crate::tags::{all_candidates, assert_on_instance, max_constraint_lineage, ConstraintTag, TagError};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("subset size {size} exceeds dimension {dim:?} of length {len}")]
    SubsetTooLarge { dim: String, size: usize, len: usize },
    #[error("invalid learn configuration: {0}")]
    InvalidConfig(String),
    #[error("the operation failed on all {0} example inputs")]
    AllExecutionsFailed(usize),
    #[error("no examples to learn from")]
    NoExamples,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Lineage(#[from] LineageError),
}

pub type Result<T, E = LearnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainChoice {
    #[default]
    Standard,
    Interval,
}

impl DomainChoice {
    pub fn domain(self) -> &'static dyn PerturbationDomain {
        match self {
            DomainChoice::Standard => &StandardDomain,
            DomainChoice::Interval => &IntervalDomain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub n_subsets: usize,
    pub subset_size: usize,
    pub n_perturbations: usize,
    pub rng_seed: u64,
    pub domain: DomainChoice,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            n_subsets: 3,
            subset_size: 3,
            n_perturbations: 8,
            rng_seed: 42,
            domain: DomainChoice::Standard,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subsets == 0 {
            return Err(LearnError::InvalidConfig("n_subsets must be at least 1".into()));
        }
        if self.subset_size < 2 {
            return Err(LearnError::InvalidConfig("subset_size must be at least 2".into()));
        }
        if self.n_perturbations == 0 {
            return Err(LearnError::InvalidConfig("n_perturbations must be at least 1".into()));
        }
        Ok(())
    }
}

/// `n_subsets` order-preserving subsets of `input` with `subset_size` labels
/// per dimension. Labels named in the operation's parameters are always
/// kept.
pub fn generate_small_containers(input: &Container, op: &OperationSignature, cfg: &LearnConfig) -> Result<Vec<Container>> {
    cfg.validate()?;
    for dim in input.dims() {
        if cfg.subset_size > dim.len() {
            return Err(LearnError::SubsetTooLarge {
                dim: dim.name().to_string(),
                size: cfg.subset_size,
                len: dim.len(),
            });
        }
    }
    let referenced = op.referenced_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::with_capacity(cfg.n_subsets);
    for s in 0..cfg.n_subsets {
        let mut keep = Vec::with_capacity(input.dim_count());
        for dim in input.dims() {
            let (pinned, free): (Vec<usize>, Vec<usize>) =
                (0..dim.len()).partition(|&p| referenced.contains(dim.label(p).unwrap()));
            let want = cfg.subset_size.saturating_sub(pinned.len()).min(free.len());
            let mut chosen: Vec<usize> = index::sample(&mut rng, free.len(), want)
                .into_iter()
                .map(|i| free[i])
                .chain(pinned)
                .collect();
            chosen.sort_unstable();
            keep.push(chosen.into_iter().map(|p| dim.label(p).unwrap().to_string()).collect());
        }
        out.push(input.subset(&keep)?.with_id(format!("{}~s{s}", input.id())));
    }
    Ok(out)
}

/// `n_perturbations` single-cell variants of every base container, with the
/// new value drawn from the configured domain.
pub fn perturb_containers(bases: &[Container], cfg: &LearnConfig) -> Result<Vec<Container>> {
    let domain = cfg.domain.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(1));
    let mut out = Vec::with_capacity(bases.len() * cfg.n_perturbations);
    for base in bases {
        if base.cell_count() == 0 {
            continue;
        }
        for p in 0..cfg.n_perturbations {
            let offset = rng.gen_range(0..base.cell_count());
            let alternatives = domain.alternatives(base, offset);
            let Some(x) = alternatives.choose(&mut rng) else { continue };
            out.push(base.with_value_at(offset, x.clone())?.with_id(format!("{}~p{p}", base.id())));
        }
    }
    Ok(out)
}

/// Runs the operation on every example input. Failing inputs are skipped
/// (a black box may reject some of them).
pub fn collect_examples<F>(run: &F, containers: &[Container]) -> Result<Vec<(Container, Container)>>
where
    F: Fn(&Container) -> Result<Container, OpError> + Sync,
{
    let results = par::map(containers, |c| run(c).map(|out| (c.clone(), out)));
    let mut pairs = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(pair) => pairs.push(pair),
            Err(e) => log::debug!("example rejected: {e}"),
        }
    }
    if pairs.is_empty() && !containers.is_empty() {
        return Err(LearnError::AllExecutionsFailed(containers.len()));
    }
    Ok(pairs)
}

/// Candidates that hold on the oracle lineage of every example, each with a
/// learnt origin counting the examples.
pub fn infer_tags<F>(
    run: &F,
    op: &OperationSignature,
    examples: &[(Container, Container)],
    candidates: &[ConstraintTag],
    cfg: &LearnConfig,
) -> Result<Vec<(ConstraintTag, Origin)>>
where
    F: Fn(&Container) -> Result<Container, OpError> + Sync,
{
    if examples.is_empty() {
        return Err(LearnError::NoExamples);
    }
    let domain = cfg.domain.domain();
    let per_example = par::try_map(examples, |(input, output)| -> Result<BTreeSet<ConstraintTag>> {
        let lin = influence_oracle_with_output(run, input, output, domain)?;
        let mut ok = BTreeSet::new();
        for tag in all_candidates(input, op) {
            if assert_on_instance(&tag, &lin, input, output)? {
                ok.insert(tag);
            }
        }
        Ok(ok)
    })?;
    let origin = Origin::now(OriginKind::Learnt {
        example_count: examples.len(),
    });
    Ok(candidates
        .iter()
        .filter(|t| per_example.iter().all(|ok| ok.contains(t)))
        .map(|t| (t.clone(), origin))
        .collect())
}

/// Intersection of the maximum-constraint tables of `tags` on the full
/// container. With no tags nothing is claimed: the table is empty with
/// unknown completeness.
pub fn extrapolate_lineage(
    tags: &[ConstraintTag],
    full_input: &Container,
    full_output: &Container,
    example_count: usize,
) -> Result<LineageTable> {
    let origin = Origin::now(OriginKind::Learnt { example_count });
    if tags.is_empty() {
        return Ok(LineageTable::unknown(origin, full_output.schema(), vec![full_input.schema()]));
    }
    let tables = tags
        .iter()
        .map(|t| max_constraint_lineage(t, full_input, full_output))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(intersect_tables(&tables)?.with_origin(origin))
}

/// What one learning pass produced.
#[derive(Debug, Clone)]
pub struct Learnt {
    pub tags: Vec<(ConstraintTag, Origin)>,
    pub table: LineageTable,
    pub example_count: usize,
}

/// The whole pipeline for one node. `full_output` is the node's recorded
/// output; the operation is not re-run on the full input.
pub fn learn_lineage<F>(
    run: &F,
    op: &OperationSignature,
    full_input: &Container,
    full_output: &Container,
    cfg: &LearnConfig,
) -> Result<Learnt>
where
    F: Fn(&Container) -> Result<Container, OpError> + Sync,
{
    let bases = generate_small_containers(full_input, op, cfg)?;
    let variants = perturb_containers(&bases, cfg)?;
    let examples = collect_examples(run, &variants)?;
    let candidates = all_candidates(full_input, op);
    let tags = infer_tags(run, op, &examples, &candidates, cfg)?;
    let names: Vec<ConstraintTag> = tags.iter().map(|(t, _)| t.clone()).collect();
    let table = extrapolate_lineage(&names, full_input, full_output, examples.len())?;
    Ok(Learnt {
        tags,
        table,
        example_count: examples.len(),
    })
}
