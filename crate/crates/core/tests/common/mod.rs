#![allow(dead_code)]

use std::collections::HashSet;

use proptest::prelude::*;
use schemex::training::{build_training_vocab, canonical_examples, Example};
use schemex::{
    validate_schema, ClassificationSpec, EntitySpec, FieldKind, FieldSpec, LabelSpec, Model, ModelConfig, Schema,
    StructureSpec,
};

/// A small model configuration that keeps randomised tests fast.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        heads: 2,
        ffn_dim: 32,
        max_positions: 160,
        ..ModelConfig::desk(0)
    }
}

pub fn tiny_model(corpus: &[Example]) -> Model {
    Model::new(tiny_config(), build_training_vocab(corpus)).expect("valid config")
}

pub fn canonical_tiny_model() -> Model {
    tiny_model(&canonical_examples())
}

pub fn product_schema() -> Schema {
    Schema::new().with_structure(StructureSpec::from_dsl("product", ["name", "price"]).expect("fields parse"))
}

pub fn sentiment_spec() -> ClassificationSpec {
    ClassificationSpec::single_label("sentiment", ["positive", "negative", "neutral"])
}

/// One schema per task kind plus the full composition.
pub fn schema_suite() -> Vec<(Schema, &'static str)> {
    let composed = Schema::new()
        .with_entities(["person", "product"])
        .with_classification(sentiment_spec())
        .with_structure(StructureSpec::from_dsl("product", ["name", "price::list"]).expect("fields parse"));
    vec![
        (product_schema(), "iPhone costs $999. Galaxy is $899."),
        (
            Schema::new().with_entities(["person", "location"]),
            "John works in Paris",
        ),
        (
            Schema::new().with_classification(sentiment_spec()),
            "This movie is amazing!",
        ),
        (
            Schema::new()
                .with_entities(["person", "product"])
                .with_classification(sentiment_spec()),
            "Steve Jobs loved the iPhone",
        ),
        (composed, "Steve Jobs loved the iPhone. It costs $999."),
    ]
}

/// Proptest settings with `cases` cases and no persisted failure files.
pub fn cases(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}

pub const DSL_ATOMS: &[&str] = &[
    "::",
    "::",
    ":",
    "[",
    "]",
    "|",
    "(",
    ")",
    "str",
    "list",
    " ",
    "  ",
    "\t",
    "a",
    "b",
    "name",
    "x y",
    "é",
    "✓",
    "\n",
    "[a|b]",
    "[a]",
    "[|]",
    "::str",
    "::list",
    "::[p|q|r]",
];

pub fn dsl_input() -> impl Strategy<Value = String> {
    prop_oneof![
        prop::collection::vec(prop::sample::select(DSL_ATOMS), 0..10).prop_map(|v| v.concat()),
        any::<String>(),
        "[a-z:\\[\\]| ]{0,24}",
    ]
}

pub fn ident() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

pub fn description() -> impl Strategy<Value = Option<String>> {
    prop::option::of("[a-z ]{1,12}[a-z]")
}

pub fn field() -> impl Strategy<Value = FieldSpec> {
    (
        ident(),
        any::<bool>(),
        description(),
        prop::option::of(prop::collection::btree_set("[a-z]{1,5}", 2..4)),
    )
        .prop_map(|(name, list, desc, choices)| FieldSpec {
            name,
            kind: if list { FieldKind::List } else { FieldKind::Str },
            description: desc,
            choices: choices.map(|c| c.into_iter().collect()),
        })
}

pub fn classification() -> impl Strategy<Value = ClassificationSpec> {
    (
        ident(),
        prop::collection::btree_map(ident(), description(), 2..5),
        any::<bool>(),
        0.05f64..0.95,
    )
        .prop_map(|(task, labels, multi, threshold)| ClassificationSpec {
            task_name: task,
            labels: labels
                .into_iter()
                .map(|(label, description)| LabelSpec { label, description })
                .collect(),
            multi_label: multi,
            threshold: if multi { threshold } else { 0.5 },
        })
}

pub fn structure() -> impl Strategy<Value = StructureSpec> {
    (ident(), prop::collection::vec(field(), 1..4)).prop_map(|(name, mut fields)| {
        let mut seen = HashSet::new();
        fields.retain(|f| seen.insert(f.name.clone()));
        StructureSpec::new(name, fields)
    })
}

pub fn schema() -> impl Strategy<Value = Schema> {
    (
        prop::option::of(prop::collection::btree_map(ident(), description(), 1..4)),
        prop::collection::vec(classification(), 0..3),
        prop::collection::vec(structure(), 0..3),
    )
        .prop_map(|(entities, classifications, structures)| Schema {
            entities: entities.map(|m| {
                m.into_iter()
                    .map(|(label, description)| EntitySpec { label, description })
                    .collect()
            }),
            classifications,
            structures,
        })
        .prop_filter("valid schema", |s| validate_schema(s).is_empty())
}

pub fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(
            &[
                "John", "works", "in", "Paris", "iPhone", "costs", "$999", ".", "Galaxy", "is", "$899", "naïve",
                "café", ",", "!", "  ", "Steve", "Jobs", "loved", "the",
            ][..],
        ),
        1..14,
    )
    .prop_map(|w| w.join(" "))
}
