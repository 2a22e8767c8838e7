use std::time::Instant;

use serde::Serialize;

use crate::decode::run_schema;
use crate::heads::classification_logits;
use crate::model::Model;
use crate::prompt::{assemble, compile_classification_prompt, DEFAULT_MAX_LEN};
use crate::schema::{ClassificationSpec, Schema};

/// Timed runs discarded before measuring.
pub const WARMUP_RUNS: usize = 3;
/// Input length of the benchmark text, in tokens.
pub const BENCH_TEXT_TOKENS: usize = 64;

const FILLER: &str = "the new phone from the company sells well in many cities and the market \
expects strong growth next year while reviewers praise the screen battery and camera";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub labels: usize,
    pub composed_ms: f64,
    pub baseline_ms: f64,
    pub composed_passes: u64,
    pub baseline_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub hardware: String,
    pub text_tokens: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// Median latency at the largest label count over the smallest.
    pub composed_ratio: f64,
    pub baseline_ratio: f64,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>12} {:>8} {:>12} {:>8}\n",
            "labels", "composed_ms", "passes", "baseline_ms", "passes"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6} {:>12.3} {:>8} {:>12.3} {:>8}\n",
                r.labels, r.composed_ms, r.composed_passes, r.baseline_ms, r.baseline_passes
            ));
        }
        out.push_str(&format!(
            "ratio  composed {:.2}x  baseline {:.2}x  ({})\n",
            self.composed_ratio, self.baseline_ratio, self.hardware
        ));
        out
    }
}

fn hardware() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {threads} threads; {}-{}; single-threaded run",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

fn bench_text() -> String {
    FILLER
        .split_whitespace()
        .cycle()
        .take(BENCH_TEXT_TOKENS)
        .collect::<Vec<_>>()
        .join(" ")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

type Runner<'a> = Box<dyn FnMut() + 'a>;

/// Median wall time in ms and encoder passes per run for each runner.
/// Repeats are interleaved round-robin so drift in machine speed hits every
/// runner alike; each runner first gets [`WARMUP_RUNS`] discarded runs, the
/// first of which counts its passes.
fn time_interleaved(model: &Model, runners: &mut [Runner<'_>], repeats: usize) -> Vec<(f64, u64)> {
    let mut passes = Vec::with_capacity(runners.len());
    for run in runners.iter_mut() {
        let before = model.passes();
        run();
        passes.push(model.passes() - before);
        for _ in 1..WARMUP_RUNS {
            run();
        }
    }
    let mut times = vec![Vec::with_capacity(repeats); runners.len()];
    for _ in 0..repeats {
        for (run, t) in runners.iter_mut().zip(&mut times) {
            let start = Instant::now();
            run();
            t.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.into_iter().map(median).zip(passes).collect()
}

/// For each label count `L`, times one composed run (a single
/// classification task with `L` labels) against `L` single-label runs,
/// each its own encoder pass. `repeats` is raised to at least 10.
pub fn latency_bench(model: &Model, label_counts: &[usize], repeats: usize) -> BenchReport {
    let repeats = repeats.max(10);
    let text = bench_text();
    let tokens = model.vocab.tokenize(&text);
    let max_len = model.config.max_positions.max(DEFAULT_MAX_LEN);
    let mut runners: Vec<Runner<'_>> = Vec::with_capacity(2 * label_counts.len());
    for &l in label_counts {
        let labels: Vec<String> = (0..l).map(|i| format!("label{i}")).collect();
        let composed = Schema::new().with_classification(ClassificationSpec::multi_label("topic", labels.iter()));
        let text = text.clone();
        runners.push(Box::new(move || {
            let r = run_schema(model, &composed, &text).expect("benchmark schema runs");
            std::hint::black_box(r);
        }));

        let singles: Vec<ClassificationSpec> = labels
            .iter()
            .map(|label| ClassificationSpec::multi_label("topic", [label]))
            .collect();
        let tokens = tokens.clone();
        runners.push(Box::new(move || {
            for spec in &singles {
                let seg = compile_classification_prompt(spec, 0, &model.vocab).expect("label compiles");
                let plan = assemble(vec![seg], tokens.clone(), max_len).expect("fits");
                let hidden = model.encode(&plan).expect("encodes");
                let row = hidden.row(plan.label_positions(0)[0]).to_vec();
                std::hint::black_box(classification_logits(&[row], &model.params.classifier));
            }
        }));
    }
    let timed = time_interleaved(model, &mut runners, repeats);
    let rows: Vec<BenchRow> = label_counts
        .iter()
        .zip(timed.chunks_exact(2))
        .map(|(&labels, pair)| BenchRow {
            labels,
            composed_ms: pair[0].0,
            baseline_ms: pair[1].0,
            composed_passes: pair[0].1,
            baseline_passes: pair[1].1,
        })
        .collect();
    let ratio = |f: fn(&BenchRow) -> f64| match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if f(a) > 0.0 => f(b) / f(a),
        _ => 1.0,
    };
    BenchReport {
        hardware: hardware(),
        text_tokens: tokens.len(),
        repeats,
        composed_ratio: ratio(|r| r.composed_ms),
        baseline_ratio: ratio(|r| r.baseline_ms),
        rows,
    }
}
