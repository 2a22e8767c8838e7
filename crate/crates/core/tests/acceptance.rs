//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{RngAlgorithm, TestRng, TestRunner};
use schemex::decode::decode_classification;
use schemex::encoder::MODEL_MAGIC;
use schemex::evalbench::{evaluate, latency_bench, result_spans, TypedSpan};
use schemex::heads::{predict_count, spans_for_len, PromptEmbeds};
use schemex::tensor::{sigmoid, softmax};
use schemex::tokenizer::slice_chars;
use schemex::training::{
    build_training_vocab, canonical_examples, fit, generate_synthetic, gradient_check, Example, TrainConfig,
};
use schemex::*;

const GRAD_EPS: f64 = 1e-5;
const GRAD_MAX_REL: f64 = 1e-4;
const GRAD_MAX_ABS_NEAR_ZERO: f64 = 1e-8;
const GRAD_MIN_SAMPLES: usize = 200;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const CORPUS_SEED: u64 = 1;
const CORPUS_SIZE: usize = 200;
const MAX_EPOCHS: usize = 10;
const TRAIN_BUDGET: Duration = Duration::from_secs(300);
const MIN_SPAN_F1: f64 = 0.99;
const MIN_ACCURACY: f64 = 0.99;
const BENCH_LABELS: [usize; 4] = [5, 10, 20, 50];
const BENCH_REPEATS: usize = 60;
const MAX_COMPOSED_RATIO: f64 = 3.0;
const MIN_BASELINE_RATIO: f64 = 8.0;
const BENCH_BUDGET: Duration = Duration::from_secs(180);
const DSL_FUZZ_CASES: u32 = 10_000;
const SOFTMAX_TOLERANCE: f64 = 1e-9;

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, criterion: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS {criterion}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL {criterion}: {detail}");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut examples = canonical_examples();
    // add a multi-label task so every head is exercised
    examples.extend(
        generate_synthetic(CORPUS_SEED, CORPUS_SIZE)
            .into_iter()
            .filter(|e| e.schema.classifications.iter().any(|c| c.multi_label))
            .take(1),
    );
    let model = Model::new(ModelConfig::desk(0), build_training_vocab(&examples)).map_err(|e| e.to_string())?;
    let report = gradient_check(&model, &examples, 4, GRAD_EPS, 7).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let tensors: HashSet<&str> = report.samples.iter().map(|s| s.tensor.as_str()).collect();
    let heads = [
        "heads.span",
        "heads.count",
        "heads.occurrence.table",
        "heads.occurrence_ffn",
        "heads.classifier",
    ];
    let missing: Vec<&&str> = heads
        .iter()
        .filter(|h| !tensors.iter().any(|t| t.starts_with(**h)))
        .collect();
    let near_zero = report
        .samples
        .iter()
        .filter(|s| s.analytic.abs().max(s.numeric.abs()) < training::GRAD_NEAR_ZERO)
        .count();
    check(
        report.max_rel_error < GRAD_MAX_REL
            && report.max_abs_error_near_zero < GRAD_MAX_ABS_NEAR_ZERO
            && report.samples.len() >= GRAD_MIN_SAMPLES
            && missing.is_empty()
            && elapsed < GRAD_BUDGET,
        format!(
            "d=64 desk model, {} samples over {} tensors, max rel error {:.2e} (< {GRAD_MAX_REL:.0e}), \
             {near_zero} zero-gradient coordinates with max abs error {:.2e} (< {GRAD_MAX_ABS_NEAR_ZERO:.0e}), \
             missing heads {missing:?}, {:.1}s (< {}s)",
            report.samples.len(),
            tensors.len(),
            report.max_rel_error,
            report.max_abs_error_near_zero,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn structure_count(model: &Model, schema: &Schema, text: &str) -> Result<usize, String> {
    let plan = compose_tasks(schema, text, &model.vocab, model.config.max_positions).map_err(|e| e.to_string())?;
    let hidden = model.encode(&plan).map_err(|e| e.to_string())?;
    let embeds = PromptEmbeds::gather(&hidden, &plan, schema.classifications.len(), schema.structures.len());
    Ok(predict_count(&embeds.structure_prompts[0], &model.params.count).k_hat)
}

fn worked_examples(model: &Model, train_time: Duration) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = train_time < TRAIN_BUDGET;
    let mut note = |pass: bool, s: String| {
        ok &= pass;
        notes.push(format!("{} {s}", if pass { "ok" } else { "MISS" }));
    };
    let run = |schema: &Schema, text: &str| run_schema(model, schema, text).map_err(|e| e.to_string());

    let text = "iPhone costs $999. Galaxy is $899.";
    let schema = common::product_schema();
    let r = run(&schema, text)?;
    let k = structure_count(model, &schema, text)?;
    let got: Vec<(Option<&str>, Option<&str>)> = r.structures["product"]
        .iter()
        .map(|i| {
            (
                i.get("name").and_then(FieldValue::text),
                i.get("price").and_then(FieldValue::text),
            )
        })
        .collect();
    let want = vec![(Some("iPhone"), Some("$999")), (Some("Galaxy"), Some("$899"))];
    note(got == want && k == 2, format!("(a) k_hat={k} instances={got:?}"));

    let r = run(
        &Schema::new().with_entities(["person", "location"]),
        "John works in Paris",
    )?;
    let (p, l) = (r.entity_texts("person"), r.entity_texts("location"));
    note(
        p == ["John"] && l == ["Paris"],
        format!("(b) person={p:?} location={l:?}"),
    );

    let r = run(
        &Schema::new().with_classification(common::sentiment_spec()),
        "This movie is amazing!",
    )?;
    let label = r.classifications["sentiment"].label().map(String::from);
    note(label.as_deref() == Some("positive"), format!("(c) sentiment={label:?}"));

    let composed = Schema::new()
        .with_entities(["person", "product"])
        .with_classification(common::sentiment_spec());
    let before = model.passes();
    let r = run(&composed, "Steve Jobs loved the iPhone")?;
    let passes = model.passes() - before;
    let (p, q) = (r.entity_texts("person"), r.entity_texts("product"));
    let label = r.classifications["sentiment"].label().map(String::from);
    note(
        p == ["Steve Jobs"] && q == ["iPhone"] && label.as_deref() == Some("positive") && passes == 1,
        format!("(d) person={p:?} product={q:?} sentiment={label:?} passes={passes}"),
    );
    check(
        ok,
        format!(
            "{}; trained {CORPUS_SIZE} examples (seed {CORPUS_SEED}, {MAX_EPOCHS} epochs) in {:.1}s (< {}s)",
            notes.join("; "),
            train_time.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    )
}

fn overfit_metric(model: &Model, corpus: &[Example]) -> Outcome {
    let r = evaluate(model, corpus).map_err(|e| e.to_string())?;
    check(
        r.spans.f1 >= MIN_SPAN_F1 && r.classification_accuracy >= MIN_ACCURACY,
        format!(
            "span F1 {:.4} (>= {MIN_SPAN_F1}, {} of {} predicted / {} gold), classification accuracy {:.4} (>= {MIN_ACCURACY}, {} decisions)",
            r.spans.f1,
            r.spans.true_positives,
            r.spans.predicted,
            r.spans.gold,
            r.classification_accuracy,
            r.classification_decisions
        ),
    )
}

fn single_pass(model: &Model, corpus: &[Example]) -> Outcome {
    let mut schemas: Vec<(Schema, String)> = common::schema_suite()
        .into_iter()
        .map(|(s, t)| (s, t.to_string()))
        .collect();
    schemas.extend(corpus.iter().map(|e| (e.schema.clone(), e.text.clone())));
    let mut bad = 0;
    for (schema, text) in &schemas {
        let before = model.passes();
        let r = run_schema(model, schema, text).map_err(|e| e.to_string())?;
        if model.passes() - before != 1 || r.encoder_passes != 1 {
            bad += 1;
        }
    }
    let bench = latency_bench(model, &BENCH_LABELS, 10);
    let counts: Vec<String> = bench
        .rows
        .iter()
        .map(|r| format!("L={}: {}/{}", r.labels, r.composed_passes, r.baseline_passes))
        .collect();
    let bench_ok = bench
        .rows
        .iter()
        .all(|r| r.composed_passes == 1 && r.baseline_passes == r.labels as u64);
    check(
        bad == 0 && bench_ok,
        format!(
            "{} schemas, {bad} with a pass count other than 1; composed/baseline passes {}",
            schemas.len(),
            counts.join(", ")
        ),
    )
}

fn latency_shape(model: &Model) -> Outcome {
    let start = Instant::now();
    let r = latency_bench(model, &BENCH_LABELS, BENCH_REPEATS);
    let elapsed = start.elapsed();
    let medians: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("L={} {:.2}/{:.2}ms", row.labels, row.composed_ms, row.baseline_ms))
        .collect();
    check(
        r.composed_ratio <= MAX_COMPOSED_RATIO && r.baseline_ratio >= MIN_BASELINE_RATIO && elapsed < BENCH_BUDGET,
        format!(
            "composed ratio {:.2} (<= {MAX_COMPOSED_RATIO}), baseline ratio {:.2} (>= {MIN_BASELINE_RATIO}); \
             medians composed/baseline {}; {} repeats, {}-token text, {:.1}s (< {}s); {}",
            r.composed_ratio,
            r.baseline_ratio,
            medians.join(", "),
            r.repeats,
            r.text_tokens,
            elapsed.as_secs_f64(),
            BENCH_BUDGET.as_secs(),
            r.hardware
        ),
    )
}

fn prop<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(common::cases(cases), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn property_suites(model: &Model, corpus: &[Example]) -> Outcome {
    let mut done = Vec::new();
    let mut step = |name: &str, r: Result<(), String>| -> Result<(), String> {
        r.map_err(|e| format!("{name}: {e}"))?;
        done.push(name.to_string());
        Ok(())
    };

    step(
        &format!("dsl fuzz x{DSL_FUZZ_CASES}"),
        prop(DSL_FUZZ_CASES, common::dsl_input(), |input| {
            if let Ok(f) = parse_field_dsl(&input) {
                prop_assert!(!f.name.is_empty() && !f.name.contains("::"));
                if let Some(c) = &f.choices {
                    prop_assert!(c.len() >= 2 && c.iter().all(|o| !o.is_empty()));
                }
                prop_assert_eq!(parse_field_dsl(&f.to_dsl()), Ok(f));
            }
            Ok(())
        }),
    )?;
    step(
        "schema json round trip x512",
        prop(512, common::schema(), |s| {
            prop_assert_eq!(json_to_schema(&schema_to_json(&s)), Ok(s));
            Ok(())
        }),
    )?;
    step(
        "softmax sums to 1 within 1e-9",
        prop(2048, prop::collection::vec(-700.0f64..700.0, 1..64), |z| {
            prop_assert!((softmax(&z).iter().sum::<f64>() - 1.0).abs() <= SOFTMAX_TOLERANCE);
            Ok(())
        }),
    )?;
    step(
        "sigmoid bounds",
        prop(2048, -1e4f64..1e4, |x| {
            let s = sigmoid(x);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(x.abs() >= 30.0 || (s > 0.0 && s < 1.0));
            Ok(())
        }),
    )?;
    step(
        "argmax shift invariance",
        prop(
            2048,
            (prop::collection::vec(-50.0f64..50.0, 2..12), -1e3f64..1e3),
            |(z, c)| {
                let names: Vec<String> = (0..z.len()).map(|i| format!("l{i}")).collect();
                let spec = ClassificationSpec::single_label("t", names.iter());
                let mut sorted = z.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                if sorted[0] - sorted[1] > 1e-9 {
                    let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                    prop_assert_eq!(
                        decode_classification(&z, &spec).labels,
                        decode_classification(&shifted, &spec).labels
                    );
                }
                Ok(())
            },
        ),
    )?;
    step(
        "threshold monotonicity",
        prop(
            64,
            (common::text_strategy(), 0.2f64..0.7, 0.0f64..0.3),
            |(text, lo, delta)| {
                for (schema, _) in common::schema_suite() {
                    let run = |t: f64| {
                        let opts = DecodeOptions {
                            threshold: t,
                            ..Default::default()
                        };
                        run_schema_with(model, &schema, &text, &opts).expect("runs")
                    };
                    let key = |s: TypedSpan| {
                        let k = match s.0.split_once("].") {
                            Some((parent, field)) => {
                                format!("{}.{field}", parent.split('[').next().unwrap_or_default())
                            }
                            None => s.0,
                        };
                        (k, s.1, s.2)
                    };
                    let low: HashSet<_> = result_spans(&run(lo)).into_iter().map(key).collect();
                    for s in result_spans(&run(lo + delta)) {
                        prop_assert!(low.contains(&key(s)));
                    }
                }
                Ok(())
            },
        ),
    )?;
    let mut hits = 0;
    for ex in corpus {
        let r = run_schema(model, &ex.schema, &ex.text).map_err(|e| e.to_string())?;
        for h in r.all_hits() {
            hits += 1;
            if slice_chars(&ex.text, h.start, h.end) != Some(h.text.as_str()) {
                return Err(format!(
                    "span-text fidelity: {:?} at {}..{} in {:?}",
                    h.text, h.start, h.end, ex.text
                ));
            }
        }
    }
    step(&format!("span-text fidelity over {hits} decoded spans"), Ok(()))?;
    step(
        "span-text fidelity on random text",
        prop(64, (common::text_strategy(), 0.0f64..0.5), |(text, t)| {
            for (schema, _) in common::schema_suite() {
                let opts = DecodeOptions {
                    threshold: t,
                    ..Default::default()
                };
                for h in run_schema_with(model, &schema, &text, &opts).expect("runs").all_hits() {
                    prop_assert_eq!(slice_chars(&text, h.start, h.end), Some(h.text.as_str()));
                }
            }
            Ok(())
        }),
    )?;
    step(
        "enumerate count",
        prop(2048, (0usize..300, 1usize..32), |(n, w)| {
            let expected: usize = (1..=w.min(n)).map(|k| n - k + 1).sum();
            prop_assert_eq!(spans_for_len(n, w).len(), expected);
            Ok(())
        }),
    )?;
    Ok(done.join(", "))
}

fn model_file(model: &Model) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.bin");
    model.save(&path).map_err(|e| e.to_string())?;
    let loaded = Model::load(&path).map_err(|e| e.to_string())?;
    let bits = |m: &Model| -> Vec<u64> {
        m.params
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    let exact = bits(model) == bits(&loaded) && loaded.config == model.config && loaded.vocab == model.vocab;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let load_edited = |edit: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        edit(&mut b);
        let p = dir.path().join("edited.bin");
        std::fs::write(&p, b).expect("temp write");
        Model::load(&p).err()
    };
    let magic = load_edited(&|b| b[0] ^= 0xff);
    let version = load_edited(&|b| b[MODEL_MAGIC.len()] = 2);
    let truncated = load_edited(&|b| b.truncate(b.len() / 2));
    let typed = matches!(magic, Some(ModelFileError::BadMagic))
        && matches!(version, Some(ModelFileError::VersionMismatch { .. }))
        && matches!(truncated, Some(ModelFileError::TruncatedFile(_)));
    check(
        exact && typed,
        format!(
            "{} bytes, bit-exact reload {exact}; corrupted magic -> {magic:?}; version -> {version:?}; truncated -> {truncated:?}",
            bytes.len()
        ),
    )
}

fn main() {
    let mut report = Report { failed: 0 };
    report.line("gradient oracle", gradient_oracle());

    let corpus = generate_synthetic(CORPUS_SEED, CORPUS_SIZE);
    let cfg = TrainConfig {
        epochs: MAX_EPOCHS,
        seed: CORPUS_SEED,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let model = match fit(&corpus, ModelConfig::desk(0), &cfg) {
        Ok((model, _)) => model,
        Err(e) => {
            println!("FAIL training: {e}");
            std::process::exit(1);
        }
    };
    let train_time = start.elapsed();

    report.line("overfit worked examples", worked_examples(&model, train_time));
    report.line("overfit metric", overfit_metric(&model, &corpus));
    report.line("single-pass contract", single_pass(&model, &corpus));
    report.line("latency scaling shape", latency_shape(&model));
    report.line("dsl and property suites", property_suites(&model, &corpus));
    report.line("model file round trip", model_file(&model));

    if report.failed > 0 {
        println!("{} criteria failed", report.failed);
        std::process::exit(1);
    }
}
