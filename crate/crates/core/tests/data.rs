use revmux_core::data::*;

/// Bag-of-words logistic regression trained by plain gradient descent.
fn logistic_accuracy(train: &[Example], eval: &[Example]) -> f64 {
    let vocab = Vocab::build(train, 1, 1000).unwrap();
    let features = |e: &Example| {
        let mut x = vec![0.0f64; vocab.len()];
        for w in e.text_a.split_whitespace() {
            x[vocab.id(w)] += 1.0;
        }
        x
    };
    let xs: Vec<Vec<f64>> = train.iter().map(features).collect();
    let mut w = vec![0.0; vocab.len()];
    let mut b = 0.0;
    for _ in 0..200 {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (x, e) in xs.iter().zip(train) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - e.label as f64;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * g / n;
        }
        b -= 0.5 * gb / n;
    }
    let hits = eval
        .iter()
        .filter(|e| {
            let z: f64 = features(e).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            usize::from(z > 0.0) == e.label
        })
        .count();
    hits as f64 / eval.len() as f64
}

#[test]
fn keyword_task_is_linearly_learnable() {
    let d = synth_task(SynthKind::Keyword, 2000, 500, 11).unwrap();
    let acc = logistic_accuracy(&d.train, &d.eval);
    assert!(acc >= 0.9, "bag-of-words baseline reached {acc}");
}

#[test]
fn splits_are_balanced_for_many_seeds() {
    for seed in 0..5 {
        for kind in [SynthKind::Keyword, SynthKind::Pair] {
            let d = synth_task(kind, 300, 120, seed).unwrap();
            for split in [&d.train, &d.eval] {
                let pos = split.iter().filter(|e| e.label == 1).count() as f64 / split.len() as f64;
                assert!((0.45..=0.55).contains(&pos));
            }
        }
    }
}

#[test]
fn pair_examples_tokenize_with_separator() {
    let d = synth_task(SynthKind::Pair, 20, 4, 0).unwrap();
    let vocab = Vocab::build(&d.train, 1, 128).unwrap();
    for e in &d.train {
        let enc = tokenize(e, &vocab, 16);
        assert_eq!(enc.ids.iter().filter(|&&i| i == SEP).count(), 1);
        let (a, b) = detokenize(&vocab, &enc.ids);
        assert_eq!(a, e.text_a);
        assert_eq!(b, e.text_b);
    }
}

#[test]
fn tokenization_is_deterministic() {
    let d = synth_task(SynthKind::Keyword, 50, 10, 4).unwrap();
    let v1 = Vocab::build(&d.train, 1, 64).unwrap();
    let v2 = Vocab::build(&d.train, 1, 64).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(tokenize_all(&d.eval, &v1, 16), tokenize_all(&d.eval, &v2, 16));
}

#[test]
fn empty_splits_rejected() {
    assert!(synth_task(SynthKind::Keyword, 0, 10, 0).is_err());
}
