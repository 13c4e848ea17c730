//! Fine-grained lineage for array operations: containers, lineage tables,
//! exact capture, perturbation oracles, constraint tags, tag learning,
//! workflow execution with a knowledge base, and lineage queries.

pub mod container;
pub mod kb;
pub mod learn;
pub mod lineage;
pub mod ops;
pub mod oracle;
pub mod par;
pub mod query;
pub mod tags;
pub mod workflow;

#[doc(hidden)]
pub mod fixtures;

pub use container::{Container, ContainerError, ContainerSchema, Dimension, IndexTuple, Scalar};
pub use lineage::{
    Completeness, InfluenceKind, KindCompleteness, LineageError, LineageRecord, LineageTable, Origin, OriginKind,
};
pub use ops::{Builtin, ExternalOpSpec, NodeSignature, OpError, OperationSignature, ParamValue};
