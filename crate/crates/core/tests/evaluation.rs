use revmux_core::adapters::{AdapterConfig, RevMuxAdapters};
use revmux_core::backbone::{EncoderConfig, EncoderModel, TokenBatch};
use revmux_core::data::Encoded;
use revmux_core::evaluation::*;
use revmux_core::numerics::Tape;
use revmux_core::pipeline::{revmux_forward, CompositeBatch};
use revmux_core::Error;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        n_layers: 3,
        ffn_dim: 12,
        max_seq_len: 6,
        n_classes: 3,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

fn full_length_data(count: usize, t: usize) -> Vec<Encoded> {
    (0..count)
        .map(|i| Encoded {
            ids: (0..t).map(|p| 4 + (i * 7 + p * 3) % 12).collect(),
            mask: vec![true; t],
            label: i % 3,
        })
        .collect()
}

#[test]
fn analytic_counts_match_the_tape_tally() {
    let cfg = tiny();
    let model = EncoderModel::<f32>::new(cfg.clone(), 1).unwrap();
    let (b, t) = (3, 5);
    let data = full_length_data(16, t);
    for (n, per_slot, hidden) in [(2, false, None), (4, true, Some(3)), (8, false, None)] {
        let acfg = AdapterConfig {
            per_slot_projection: per_slot,
            hidden,
            ..AdapterConfig::new(n, 8)
        };
        let adapters = RevMuxAdapters::<f32>::new(acfg.clone(), 2).unwrap();
        for l in 0..=cfg.n_layers {
            let groups: Vec<Vec<usize>> = (0..b).map(|g| (0..n).map(|k| (g * n + k) % 16).collect()).collect();
            let batch = CompositeBatch::new(&data, &groups, l).unwrap();
            let mut tape = Tape::new();
            revmux_forward(&mut tape, &model, Some(&adapters), &batch, None).unwrap();
            let report = count_flops(&cfg, Some(&acfg), n, l, b, t).unwrap();
            assert_eq!(tape.flops(), report.flops_composite, "n={n} l={l}");
            assert_eq!(report.composite.total(), report.flops_composite);
        }
    }
    let tokens = TokenBatch::from_rows(data[..b].iter().map(|e| (e.ids.as_slice(), e.mask.as_slice())), t).unwrap();
    let mut tape = Tape::new();
    let h = model.forward_full(&mut tape, &tokens, None).unwrap();
    model.pool_and_classify(&mut tape, h, &tokens.mask).unwrap();
    let report = count_flops(&cfg, None, 1, 0, b, t).unwrap();
    assert_eq!(tape.flops(), report.flops_single);
}

#[test]
fn speedup_falls_with_every_prefill_layer() {
    let cfg = EncoderConfig::default();
    for n in [2, 4, 8] {
        let acfg = AdapterConfig::new(n, cfg.d_model);
        let sweep = flops_sweep(&cfg, Some(&acfg), n, DEFAULT_FLOPS_BATCH, DEFAULT_FLOPS_SEQ_LEN).unwrap();
        for w in sweep.windows(2) {
            assert!(w[1].speedup_pct < w[0].speedup_pct);
        }
        assert!(sweep[cfg.n_layers].speedup_pct < 100.0);
        assert!(sweep[0].speedup_pct > 100.0);
    }
}

#[test]
fn cdf_matches_a_sort_oracle() {
    let values = [0.81, 0.79, 0.81, 0.80, 0.78, 0.79, 0.83];
    let pts = cdf(&values);
    for p in &pts {
        let below = values.iter().filter(|&&v| v <= p.accuracy).count() as f64 / values.len() as f64;
        assert_eq!(p.cumulative, below);
    }
    assert!(pts
        .windows(2)
        .all(|w| w[0].accuracy < w[1].accuracy && w[0].cumulative <= w[1].cumulative));
    assert_eq!(pts.last().unwrap().cumulative, 1.0);
}

fn eval_fixture() -> (EncoderModel<f32>, RevMuxAdapters<f32>, Vec<Encoded>) {
    let cfg = tiny();
    let model = EncoderModel::<f32>::new(cfg, 5).unwrap();
    let adapters = RevMuxAdapters::<f32>::new(
        AdapterConfig {
            zero_init_couplings: false,
            ..AdapterConfig::new(2, 8)
        },
        6,
    )
    .unwrap();
    let data: Vec<Encoded> = full_length_data(41, 6)
        .into_iter()
        .enumerate()
        .map(|(i, mut e)| {
            for p in (2 + i % 4)..6 {
                e.ids[p] = 0;
                e.mask[p] = false;
            }
            e
        })
        .collect();
    (model, adapters, data)
}

#[test]
fn reports_are_reproducible_and_consistent() {
    let (model, adapters, data) = eval_fixture();
    let spec = EvalSpec {
        batch_groups: 5,
        ..EvalSpec::new(2, 1, 42)
    };
    let a = evaluate_rounds(&model, Some(&adapters), &data, &spec, None).unwrap();
    let b = evaluate_rounds(&model, Some(&adapters), &data, &spec, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rounds.len(), DEFAULT_ROUNDS);
    let mean = a.rounds.iter().sum::<f64>() / a.rounds.len() as f64;
    assert!((a.mean - mean).abs() < 1e-9);
    assert!(a.correct.iter().all(|c| c.len() == data.len()));

    // Batch size does not change predictions.
    let wide = EvalSpec {
        batch_groups: 64,
        ..spec.clone()
    };
    assert_eq!(
        evaluate_rounds(&model, Some(&adapters), &data, &wide, None)
            .unwrap()
            .rounds,
        a.rounds
    );

    let single = evaluate_rounds(&model, None, &data, &EvalSpec::new(1, 0, 3), None).unwrap();
    assert!(single.rounds.iter().all(|&r| r == single.rounds[0]));
    assert!(single.std < 1e-12);
}

#[test]
fn too_few_examples_or_rounds_rejected() {
    let (model, adapters, data) = eval_fixture();
    let spec = EvalSpec::new(2, 1, 0);
    assert!(matches!(
        evaluate_rounds(&model, Some(&adapters), &data[..1], &spec, None),
        Err(Error::Data(_))
    ));
    let none = EvalSpec { rounds: 0, ..spec };
    assert!(matches!(
        evaluate_rounds(&model, Some(&adapters), &data, &none, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn merged_report_averages_rounds() {
    let (model, adapters, data) = eval_fixture();
    let spec = EvalSpec {
        rounds: 3,
        ..EvalSpec::new(2, 1, 9)
    };
    let a = evaluate_rounds(
        &model,
        Some(&adapters),
        &data[..20],
        &EvalSpec {
            dataset: "a".into(),
            ..spec.clone()
        },
        None,
    )
    .unwrap();
    let b = evaluate_rounds(
        &model,
        Some(&adapters),
        &data[20..],
        &EvalSpec {
            dataset: "b".into(),
            ..spec
        },
        None,
    )
    .unwrap();
    let m = EvalReport::merge(vec![a.clone(), b.clone()]).unwrap();
    assert_eq!(m.per_dataset.len(), 2);
    for r in 0..3 {
        assert!((m.rounds[r] - (a.rounds[r] + b.rounds[r]) / 2.0).abs() < 1e-12);
    }
}
