mod common;

use std::f64::consts::LN_2;

use approx::assert_abs_diff_eq;
use schemex::encoder::EncoderParams;
use schemex::training::*;
use schemex::*;

fn zero_model() -> Model {
    let m = common::canonical_tiny_model();
    Model::from_parts(m.params.zeros_like(), m.config.clone(), m.vocab.clone())
}

fn worked(i: usize) -> Example {
    canonical_examples().swap_remove(i)
}

fn tensor<'a>(p: &'a EncoderParams, name: &str) -> &'a [f64] {
    p.named()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.data())
        .expect("known tensor")
}

#[test]
fn uniform_count_logits_give_ln_20() {
    let loss = total_loss(&zero_model(), &worked(0)).unwrap();
    let (count, fields) = loss.structures[0];
    assert_abs_diff_eq!(count, 20f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(fields, LN_2, epsilon = 1e-12);
}

#[test]
fn half_probabilities_give_ln_2() {
    let model = zero_model();
    let ner = total_loss(&model, &worked(1)).unwrap();
    assert_abs_diff_eq!(ner.entities.unwrap(), LN_2, epsilon = 1e-12);
    let sentiment = total_loss(&model, &worked(2)).unwrap();
    assert_abs_diff_eq!(sentiment.classifications[0], 3f64.ln(), epsilon = 1e-12);
    for targets in [[1.0, 0.0, 0.0, 0.0], [0.0; 4], [1.0, 1.0, 0.0, 1.0]] {
        assert_abs_diff_eq!(balanced_bce(&[0.0; 4], &targets), LN_2, epsilon = 1e-15);
    }
}

#[test]
fn saturated_predictions_cost_almost_nothing() {
    assert!(balanced_bce(&[40.0, -40.0, -40.0, 40.0], &[1.0, 0.0, 0.0, 1.0]) < 1e-3);
    assert!(softmax_cross_entropy(&[40.0, 0.0, -3.0], 0) < 1e-3);
    assert!(balanced_bce(&[-40.0], &[1.0]) > 30.0);
}

#[test]
fn loss_is_non_negative_and_additive() {
    let corpus = generate_synthetic(3, 40);
    let model = common::tiny_model(&corpus);
    for ex in &corpus {
        let l = total_loss(&model, ex).unwrap();
        let parts = l.entities.unwrap_or(0.0)
            + l.classifications.iter().sum::<f64>()
            + l.structures.iter().map(|(c, f)| c + f).sum::<f64>();
        assert!(l.total >= 0.0);
        assert_abs_diff_eq!(l.total, parts, epsilon = 1e-12);
    }
}

#[test]
fn unused_heads_get_exactly_zero_gradient() {
    let model = common::canonical_tiny_model();
    let (_, g) = backward(&model, &worked(1)).unwrap();
    for (name, t) in g.named() {
        let unused = ["heads.classifier", "heads.count", "heads.occurrence"]
            .iter()
            .any(|p| name.starts_with(p));
        if unused {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name} has gradient");
        }
    }
    assert!(tensor(&g, "heads.span.w1").iter().any(|&x| x != 0.0));

    let (_, g) = backward(&model, &worked(2)).unwrap();
    assert!(tensor(&g, "heads.span.w1").iter().all(|&x| x == 0.0));
    assert!(tensor(&g, "heads.classifier.w1").iter().any(|&x| x != 0.0));
}

#[test]
fn doubling_the_loss_doubles_every_gradient() {
    let model = common::canonical_tiny_model();
    for ex in canonical_examples() {
        let p = prepare(&ex, &model.vocab, &model.config).unwrap();
        let mut once = model.params.zeros_like();
        accumulate(&model.params, &model.config, &p, Some(&mut once), 1.0).unwrap();
        let mut twice = model.params.zeros_like();
        accumulate(&model.params, &model.config, &p, Some(&mut twice), 1.0).unwrap();
        accumulate(&model.params, &model.config, &p, Some(&mut twice), 1.0).unwrap();
        for ((name, a), (_, b)) in once.named().into_iter().zip(twice.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-12 * x.abs().max(1.0));
            }
            assert!(b.is_finite(), "{name}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_on_a_small_model() {
    let model = common::canonical_tiny_model();
    let report = gradient_check(&model, &canonical_examples(), 3, 1e-5, 11).unwrap();
    assert!(report.max_rel_error < 1e-4, "max rel error {}", report.max_rel_error);
    assert!(report.max_abs_error_near_zero < 1e-8);
    let names: std::collections::HashSet<&str> = report.samples.iter().map(|s| s.tensor.as_str()).collect();
    assert_eq!(names.len(), model.params.named().len());
}

#[test]
fn zero_gradient_without_decay_leaves_parameters_unchanged() {
    let model = common::canonical_tiny_model();
    let mut params = model.params.clone();
    let mut opt = AdamW::new(&params, 1e-3, 1e-3, 0.0, 10);
    let mut grads = params.zeros_like();
    opt.update(&mut params, &grads);
    assert_eq!(params, model.params);
    // a tensor with zero gradient stays put while others move
    grads.span.b2.fill(1.0);
    opt.update(&mut params, &grads);
    assert_ne!(params.span.b2, model.params.span.b2);
    assert_eq!(params.count, model.params.count);
}

#[test]
fn first_warmup_step_uses_a_thousandth_of_the_rate() {
    let p = common::canonical_tiny_model().params;
    let opt = AdamW::new(&p, 1e-3, 2e-3, 0.01, 1000);
    assert_abs_diff_eq!(opt.warmup_factor(), 1e-3, epsilon = 1e-18);
}

#[test]
fn norm_ten_gradient_is_clipped_to_one() {
    let mut g = common::canonical_tiny_model().params.zeros_like();
    g.span.b2.data_mut()[0] = 6.0;
    g.final_ln.bias.data_mut()[1] = 8.0;
    assert_abs_diff_eq!(clip_grad_norm(&mut g, 1.0), 10.0, epsilon = 1e-12);
    assert_abs_diff_eq!(grad_norm(&g), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(g.span.b2.data()[0], 0.6, epsilon = 1e-12);
}

#[test]
fn one_example_two_hundred_steps_overfits() {
    let corpus = vec![worked(0)];
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let (model, report) = fit(&corpus, ModelConfig::desk(0), &cfg).unwrap();
    assert_eq!(report.steps, 200);
    let loss = total_loss(&model, &corpus[0]).unwrap().total;
    assert!(loss < 0.05, "final loss {loss}");
}

#[test]
fn fixed_seed_gives_identical_weights() {
    let corpus = generate_synthetic(5, 24);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = common::tiny_model(&corpus);
        let r = train(&mut m, &corpus, &cfg).unwrap();
        (m.params, r.epoch_losses)
    };
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 2, ..cfg.clone() };
    let mut m = common::tiny_model(&corpus);
    train(&mut m, &corpus, &other).unwrap();
    assert_ne!(m.params, run().0);
}

#[test]
fn invalid_configs_and_empty_corpora_are_rejected() {
    let corpus = generate_synthetic(1, 4);
    let mut m = common::tiny_model(&corpus);
    for bad in [
        TrainConfig {
            epochs: 0,
            ..Default::default()
        },
        TrainConfig {
            lr_heads: -1.0,
            ..Default::default()
        },
        TrainConfig {
            ema_decay: 1.0,
            ..Default::default()
        },
        TrainConfig {
            weight_decay: f64::NAN,
            ..Default::default()
        },
    ] {
        assert!(matches!(
            train(&mut m, &corpus, &bad),
            Err(TrainError::InvalidConfig(_))
        ));
    }
    assert_eq!(
        train(&mut m, &[], &TrainConfig::default()),
        Err(TrainError::EmptyCorpus)
    );
}

#[test]
fn overlong_examples_are_skipped() {
    let mut corpus = generate_synthetic(1, 6);
    let mut long = corpus[0].clone();
    long.text = format!("{} {}", long.text, "word ".repeat(400));
    corpus.push(long);
    let mut m = common::tiny_model(&corpus);
    let report = train(
        &mut m,
        &corpus,
        &TrainConfig {
            epochs: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(report.skipped, 1);
    assert_eq!(report.steps, 6);
}

#[test]
fn corpus_jsonl_round_trip() {
    let corpus = generate_synthetic(1, 200);
    assert_eq!(corpus.len(), 200);
    let text = write_jsonl(&corpus);
    assert_eq!(read_jsonl(&text).unwrap(), corpus);
    assert!(corpus
        .iter()
        .any(|e| e.structures.iter().any(|s| s.instances.len() == 2)));
    let broken = text.replacen("\"text\"", "\"txet\"", 1);
    assert!(matches!(read_jsonl(&broken), Err(CorpusError::Json { line: 1, .. })));
}

#[test]
fn loss_trace_on_the_overfit_corpus_does_not_rise_after_warmup() {
    let corpus = generate_synthetic(1, 200);
    let cfg = TrainConfig::default();
    let (_, report) = fit(&corpus, ModelConfig::desk(0), &cfg).unwrap();
    let first_full = cfg.warmup_steps.div_ceil(corpus.len());
    let trace = &report.epoch_losses[first_full..];
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "trace {:?}", report.epoch_losses);
    }
}
