//! Lineage-constraint tags: an assertion over one (lineage, input, output)
//! instance and the loosest lineage table a tagged operation can have.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, IndexTuple, Scalar};
use crate::lineage::{
    Completeness, InfluenceKind, KindCompleteness, LineageError, LineageRecord, LineageTable, Origin,
    OriginKind,
};
use crate::ops::{Builtin, Cmp, OperationSignature};

/// Dimensions at most this long contribute all their labels as Condition
/// candidates.
pub const CONDITION_LABEL_BOUND: usize = 8;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("lineage for {0} influence is unknown")]
    InsufficientLineage(InfluenceKind),
    #[error("cannot parse tag {0:?}")]
    Parse(String),
    #[error(transparent)]
    Lineage(#[from] LineageError),
}

pub type Result<T, E = TagError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TagKind {
    OneToOne,
    Slice,
    Identity,
    Condition,
}

impl TagKind {
    pub const ALL: [TagKind; 4] = [TagKind::OneToOne, TagKind::Slice, TagKind::Identity, TagKind::Condition];
}

impl FromStr for TagKind {
    type Err = TagError;

    fn from_str(s: &str) -> Result<TagKind> {
        match s {
            "OneToOne" => Ok(TagKind::OneToOne),
            "Slice" => Ok(TagKind::Slice),
            "Identity" => Ok(TagKind::Identity),
            "Condition" => Ok(TagKind::Condition),
            _ => Err(TagError::Parse(s.to_string())),
        }
    }
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagKind::OneToOne => "OneToOne",
            TagKind::Slice => "Slice",
            TagKind::Identity => "Identity",
            TagKind::Condition => "Condition",
        })
    }
}

/// A tag with its parameters. Text form: `OneToOne`, `Slice[0]`, `Identity`,
/// `Condition[1,Age]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintTag {
    OneToOne,
    Slice(usize),
    Identity,
    Condition(usize, String),
}

impl ConstraintTag {
    pub fn kind(&self) -> TagKind {
        match self {
            ConstraintTag::OneToOne => TagKind::OneToOne,
            ConstraintTag::Slice(_) => TagKind::Slice,
            ConstraintTag::Identity => TagKind::Identity,
            ConstraintTag::Condition(..) => TagKind::Condition,
        }
    }

    /// Parameters in text form, e.g. `0` or `1,Age`.
    pub fn params(&self) -> Option<String> {
        match self {
            ConstraintTag::Slice(d) => Some(d.to_string()),
            ConstraintTag::Condition(d, i) => Some(format!("{d},{i}")),
            _ => None,
        }
    }

    /// Builds a tag from a kind and its text parameters.
    pub fn with_params(kind: TagKind, params: Option<&str>) -> Result<ConstraintTag> {
        let bad = || TagError::Parse(format!("{kind}[{}]", params.unwrap_or("")));
        let dim = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        match (kind, params) {
            (TagKind::OneToOne, None) => Ok(ConstraintTag::OneToOne),
            (TagKind::Identity, None) => Ok(ConstraintTag::Identity),
            (TagKind::Slice, Some(p)) => Ok(ConstraintTag::Slice(dim(p)?)),
            (TagKind::Condition, Some(p)) => {
                let (d, label) = p.split_once(',').ok_or_else(bad)?;
                Ok(ConstraintTag::Condition(dim(d)?, label.trim().to_string()))
            }
            _ => Err(bad()),
        }
    }

    fn constrained_kinds(&self) -> &'static [InfluenceKind] {
        match self {
            ConstraintTag::OneToOne | ConstraintTag::Slice(_) => &InfluenceKind::ALL,
            ConstraintTag::Identity => &[InfluenceKind::Direct],
            ConstraintTag::Condition(..) => &[InfluenceKind::Indirect],
        }
    }
}

impl fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.params() {
            Some(p) => write!(f, "{}[{p}]", self.kind()),
            None => write!(f, "{}", self.kind()),
        }
    }
}

impl FromStr for ConstraintTag {
    type Err = TagError;

    fn from_str(s: &str) -> Result<ConstraintTag> {
        let s = s.trim();
        match s.split_once('[') {
            Some((kind, rest)) => {
                let params = rest
                    .strip_suffix(']')
                    .ok_or_else(|| TagError::Parse(s.to_string()))?;
                ConstraintTag::with_params(kind.parse()?, Some(params))
            }
            None => ConstraintTag::with_params(s.parse()?, None),
        }
    }
}

impl Serialize for ConstraintTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConstraintTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

fn check_schemas(lin: &LineageTable, input: &Container, output: &Container) -> Result<()> {
    if *lin.output_schema() != output.schema() {
        return Err(TagError::SchemaMismatch("lineage output schema differs from the output".into()));
    }
    if lin.input_schemas() != [input.schema()] {
        return Err(TagError::SchemaMismatch("lineage input schema differs from the input".into()));
    }
    Ok(())
}

#[derive(Default)]
struct Influencers<'a> {
    direct: BTreeSet<&'a IndexTuple>,
    indirect: BTreeSet<&'a IndexTuple>,
}

fn influencers(lin: &LineageTable) -> BTreeMap<&IndexTuple, Influencers<'_>> {
    let mut by_out: BTreeMap<&IndexTuple, Influencers<'_>> = BTreeMap::new();
    for r in lin.records() {
        let entry = by_out.entry(&r.out_idx).or_default();
        match r.kind {
            InfluenceKind::Direct => entry.direct.insert(&r.in_idx),
            InfluenceKind::Indirect => entry.indirect.insert(&r.in_idx),
        };
    }
    by_out
}

fn is_subsequence<'a>(sub: impl Iterator<Item = &'a str>, full: &[&'a str]) -> bool {
    let mut rest = full.iter();
    sub.into_iter().all(|x| rest.any(|y| *y == x))
}

/// Whether one execution instance satisfies `tag`.
pub fn assert_on_instance(tag: &ConstraintTag, lin: &LineageTable, input: &Container, output: &Container) -> Result<bool> {
    check_schemas(lin, input, output)?;
    for &kind in tag.constrained_kinds() {
        if lin.completeness().get(kind) == Completeness::Unknown {
            return Err(TagError::InsufficientLineage(kind));
        }
    }
    let empty = Influencers::default();
    let by_out = influencers(lin);
    let of = |b: &IndexTuple| by_out.get(b).unwrap_or(&empty);
    let ndim = input.dim_count();
    Ok(match tag {
        ConstraintTag::OneToOne => output.indices().all(|b| {
            let inf = of(&b);
            inf.direct.len() == 1 && inf.direct.contains(&b) && inf.indirect.len() == 1 && inf.indirect.contains(&b)
        }),
        ConstraintTag::Slice(d) => {
            let d = *d;
            if d >= ndim || output.dim_count() != ndim {
                return Ok(false);
            }
            let others_same = (0..ndim).filter(|&e| e != d).all(|e| input.dim(e) == output.dim(e));
            let in_labels: Vec<&str> = input.dim(d).labels().collect();
            others_same
                && input.dim(d).name() == output.dim(d).name()
                && is_subsequence(output.dim(d).labels(), &in_labels)
                && lin.records().iter().all(|r| r.in_idx.get(d) == r.out_idx.get(d))
        }
        ConstraintTag::Identity => output.indices().all(|b| {
            let inf = of(&b);
            match inf.direct.iter().next() {
                Some(a) if inf.direct.len() == 1 => {
                    input.get_cell(a).ok() == output.get_cell(&b).ok()
                }
                _ => false,
            }
        }),
        ConstraintTag::Condition(d, label) => {
            let d = *d;
            if d >= ndim || output.dim_count() != ndim || !input.dim(d).contains(label) {
                return Ok(false);
            }
            let allowed = lin.records_of(InfluenceKind::Indirect).all(|r| {
                (0..ndim).all(|e| {
                    let (a, b) = (r.in_idx.get(e), r.out_idx.get(e));
                    if e == d {
                        a == Some(label.as_str()) || a == b
                    } else {
                        a == b
                    }
                })
            });
            let witnessed = output.cell_count() == 0
                || by_out.values().any(|inf| {
                    inf.indirect.len() > 1 && inf.indirect.iter().any(|a| a.get(d) == Some(label.as_str()))
                });
            allowed && witnessed
        }
    })
}

/// The loosest lineage consistent with `tag` for this input and output. Every
/// Direct record is paired with an Indirect one.
pub fn max_constraint_lineage(tag: &ConstraintTag, input: &Container, output: &Container) -> Result<LineageTable> {
    let ndim = input.dim_count();
    if output.dim_count() != ndim {
        return Err(TagError::SchemaMismatch(format!(
            "input has {ndim} dims, output has {}",
            output.dim_count()
        )));
    }
    match tag {
        ConstraintTag::Slice(d) | ConstraintTag::Condition(d, _) if *d >= ndim => {
            return Err(TagError::SchemaMismatch(format!("dimension {d} out of range")));
        }
        _ => {}
    }
    let ins: Vec<(IndexTuple, &Scalar)> = input.indices().zip(input.values()).collect();
    let mut records = Vec::new();
    let mut both = |b: &IndexTuple, a: &IndexTuple, direct: bool| {
        records.push(LineageRecord::new(b.clone(), 0, a.clone(), InfluenceKind::Indirect));
        if direct {
            records.push(LineageRecord::new(b.clone(), 0, a.clone(), InfluenceKind::Direct));
        }
    };
    for (b, bv) in output.indices().zip(output.values()) {
        match tag {
            ConstraintTag::OneToOne => {
                if input.contains(&b) {
                    both(&b, &b, true);
                }
            }
            ConstraintTag::Slice(d) => {
                for (a, _) in ins.iter().filter(|(a, _)| a.get(*d) == b.get(*d)) {
                    both(&b, a, true);
                }
            }
            ConstraintTag::Identity => {
                for (a, av) in &ins {
                    both(&b, a, *av == bv);
                }
            }
            ConstraintTag::Condition(d, label) => {
                for (a, _) in &ins {
                    let ok = (0..ndim).all(|e| {
                        if e == *d {
                            a.get(e) == Some(label.as_str()) || a.get(e) == b.get(e)
                        } else {
                            a.get(e) == b.get(e)
                        }
                    });
                    if ok {
                        both(&b, a, true);
                    }
                }
            }
        }
    }
    Ok(LineageTable::build(
        records,
        KindCompleteness::both(Completeness::OverApprox),
        Origin::now(OriginKind::Declared),
        output.schema(),
        vec![input.schema()],
    )?)
}

/// Parameterized candidates of one tag kind for an operation on `input`.
pub fn enumerate_candidate_params(kind: TagKind, input: &Container, op: &OperationSignature) -> Vec<ConstraintTag> {
    match kind {
        TagKind::OneToOne => vec![ConstraintTag::OneToOne],
        TagKind::Identity => vec![ConstraintTag::Identity],
        TagKind::Slice => (0..input.dim_count()).map(ConstraintTag::Slice).collect(),
        TagKind::Condition => {
            let referenced = op.referenced_labels();
            let mut out = Vec::new();
            for (d, dim) in input.dims().iter().enumerate() {
                let mut labels: Vec<&str> = dim.labels().filter(|l| referenced.contains(l)).collect();
                if dim.len() <= CONDITION_LABEL_BOUND {
                    labels.extend(dim.labels().filter(|l| !referenced.contains(l)));
                }
                out.extend(labels.into_iter().map(|l| ConstraintTag::Condition(d, l.to_string())));
            }
            out
        }
    }
}

/// Candidates of every kind.
pub fn all_candidates(input: &Container, op: &OperationSignature) -> Vec<ConstraintTag> {
    TagKind::ALL
        .iter()
        .flat_map(|&k| enumerate_candidate_params(k, input, op))
        .collect()
}

/// Tags the builtin catalog declares for an operation, valid for every input
/// it accepts. Only Slice and Identity are declared exhaustively; OneToOne is
/// declared where it holds but Condition never is.
pub fn declared_tags(builtin: &Builtin) -> BTreeSet<ConstraintTag> {
    use ConstraintTag::*;
    match builtin {
        Builtin::DropNullRows => [Slice(0), Identity].into(),
        Builtin::FilterRows { cmp, value, .. } => {
            let unique_match = *cmp == Cmp::Eq
                || matches!(value, Scalar::Bool(_))
                || (*cmp == Cmp::Lt && matches!(value, Scalar::Str(k) if k.as_str() <= "\u{0}"));
            if unique_match {
                [Slice(0)].into()
            } else {
                [Slice(0), Identity].into()
            }
        }
        Builtin::MinMaxScaleColumns { .. } => [Slice(1)].into(),
        Builtin::MapAddConstant { k } => {
            let mut tags: BTreeSet<_> = [OneToOne, Slice(0), Slice(1)].into();
            if *k == Scalar::Int(0) {
                tags.insert(Identity);
            }
            tags
        }
        Builtin::SortByColumn { .. } | Builtin::ProjectColumns { .. } => [OneToOne, Identity].into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{d0, int_grid, people_pipeline, random_builtin, random_table};
    use crate::ops::{capture_exact_lineage, execute};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact(op: &OperationSignature, input: &Container) -> (LineageTable, Container) {
        let out = execute(op, std::slice::from_ref(input)).unwrap();
        (capture_exact_lineage(op, input, &out).unwrap(), out)
    }

    fn holds(tag: &str, op: &OperationSignature, input: &Container) -> bool {
        let (lin, out) = exact(op, input);
        assert_on_instance(&tag.parse().unwrap(), &lin, input, &out).unwrap()
    }

    #[test]
    fn text_round_trip() {
        for text in ["OneToOne", "Slice[0]", "Identity", "Condition[1,Age]"] {
            let tag: ConstraintTag = text.parse().unwrap();
            assert_eq!(tag.to_string(), text);
        }
        assert!("Slice".parse::<ConstraintTag>().is_err());
        assert!("Slice[x]".parse::<ConstraintTag>().is_err());
        assert!("Sliced[0]".parse::<ConstraintTag>().is_err());
    }

    #[test]
    fn people_pipeline_tags() {
        let [dropna, filter, scale] = people_pipeline();
        let d = d0();
        assert!(holds("Slice[0]", &dropna, &d));
        assert!(holds("Identity", &dropna, &d));
        assert!(holds("Slice[0]", &filter, &d));
        assert!(holds("Identity", &filter, &d));
        assert!(holds("Condition[1,Age]", &filter, &d));
        assert!(holds("Slice[1]", &scale, &d));
        assert!(!holds("Slice[0]", &scale, &d));
        assert!(!holds("Identity", &scale, &d));
    }

    #[test]
    fn add_one_is_one_to_one_not_identity() {
        let g = int_grid("g", 2, 2, &[0, 0, 0, 0]);
        let add = OperationSignature::new("np", "add_constant").param("k", 1);
        assert!(holds("OneToOne", &add, &g));
        assert!(!holds("Identity", &add, &g));
    }

    #[test]
    fn sort_is_identity_but_not_a_slice() {
        let sort = OperationSignature::new("pandas", "sort_values").param("column", "Age");
        assert!(holds("Identity", &sort, &d0()));
        assert!(!holds("Slice[0]", &sort, &d0()));
    }

    #[test]
    fn unknown_lineage_is_insufficient() {
        let d = d0();
        let unknown = LineageTable::unknown(Origin::now(OriginKind::Declared), d.schema(), vec![d.schema()]);
        assert!(matches!(
            assert_on_instance(&ConstraintTag::Identity, &unknown, &d, &d),
            Err(TagError::InsufficientLineage(_))
        ));
    }

    #[test]
    fn max_constraint_sizes() {
        let g = int_grid("g", 2, 2, &[1, 2, 3, 4]);
        let one = max_constraint_lineage(&ConstraintTag::OneToOne, &g, &g).unwrap();
        assert_eq!(one.records_of(InfluenceKind::Direct).count(), 4);
        assert_eq!(one.records_of(InfluenceKind::Indirect).count(), 4);
        let slice = max_constraint_lineage(&ConstraintTag::Slice(0), &g, &g).unwrap();
        assert_eq!(slice.records_of(InfluenceKind::Direct).count(), 8);
        assert_eq!(slice.records_of(InfluenceKind::Indirect).count(), 8);
    }

    #[test]
    fn one_to_one_is_tight_for_add() {
        let g = int_grid("g", 2, 3, &[1, 2, 3, 4, 5, 6]);
        let add = OperationSignature::new("np", "add_constant").param("k", 1);
        let (lin, out) = exact(&add, &g);
        let max = max_constraint_lineage(&ConstraintTag::OneToOne, &g, &out).unwrap();
        assert_eq!(lin.records(), max.records());
    }

    #[test]
    fn candidates() {
        let d = d0();
        let [_, filter, _] = people_pipeline();
        assert_eq!(
            enumerate_candidate_params(TagKind::Slice, &d, &filter),
            [ConstraintTag::Slice(0), ConstraintTag::Slice(1)]
        );
        let conds = enumerate_candidate_params(TagKind::Condition, &d, &filter);
        assert_eq!(conds[0], ConstraintTag::Condition(0, "0".into()));
        assert!(conds.contains(&ConstraintTag::Condition(1, "Age".into())));
        assert_eq!(enumerate_candidate_params(TagKind::OneToOne, &d, &filter), [ConstraintTag::OneToOne]);
    }

    #[test]
    fn declared_tags_hold_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = random_table(&mut rng, 4, 4);
            for kind in 0..6 {
                let op = random_builtin(&mut rng, kind, &t);
                let Ok(out) = execute(&op, std::slice::from_ref(&t)) else { continue };
                let lin = capture_exact_lineage(&op, &t, &out).unwrap();
                for tag in declared_tags(&Builtin::from_signature(&op).unwrap()) {
                    assert!(assert_on_instance(&tag, &lin, &t, &out).unwrap(), "{op} {tag}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn satisfied_tags_bound_the_exact_lineage(seed in any::<u64>(), kind in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_table(&mut rng, 4, 4);
            let op = random_builtin(&mut rng, kind, &t);
            let Ok(out) = execute(&op, std::slice::from_ref(&t)) else { return Ok(()) };
            let lin = capture_exact_lineage(&op, &t, &out).unwrap();
            for tag in all_candidates(&t, &op) {
                if assert_on_instance(&tag, &lin, &t, &out).unwrap() {
                    let max = max_constraint_lineage(&tag, &t, &out).unwrap();
                    prop_assert!(lin.records().is_subset(max.records()), "{} {}", op, tag);
                }
            }
        }
    }
}
