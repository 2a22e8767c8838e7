//! Schema-driven information extraction with a single encoder pass.
//!
//! A [`Schema`] bundles entity types, classification tasks and hierarchical
//! structures. [`compose_tasks`] compiles it with the input text into one
//! token sequence, the encoder runs once, and task heads decode entities,
//! labels and structure instances from the shared hidden states.
//!
//! ```
//! use schemex::{parse_field_dsl, FieldKind};
//!
//! let f = parse_field_dsl("price::str::amount in dollars").unwrap();
//! assert_eq!(f.kind, FieldKind::Str);
//! assert_eq!(f.description.as_deref(), Some("amount in dollars"));
//! ```

pub mod decode;
pub mod encoder;
pub mod evalbench;
pub mod heads;
pub mod model;
pub mod prompt;
pub mod schema;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use decode::{
    run_schema, run_schema_with, ClassificationResult, DecodeOptions, ExtractError, ExtractionResult, FieldValue,
    Instance, SpanHit,
};
pub use encoder::{ModelConfig, ModelError, ModelFileError};
pub use model::Model;
pub use prompt::{compose_tasks, PromptError, PromptPlan};
pub use schema::{
    dsl_golden_vectors, json_to_schema, parse_field_dsl, schema_to_json, validate_schema, ClassificationSpec, DslError,
    EntitySpec, FieldKind, FieldSpec, LabelSpec, Schema, SchemaDoc, SchemaError, StructureSpec, Violation,
};
pub use tokenizer::{TokenSeq, Vocabulary};
