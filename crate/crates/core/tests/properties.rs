use proptest::prelude::*;
use revmux_core::adapters::{AdapterConfig, RevMuxAdapters};
use revmux_core::data::{tokenize, Example, Vocab};
use revmux_core::numerics::gradcheck::random_tensor;
use revmux_core::numerics::{Tape, Tensor};
use revmux_core::objectives::infonce_loss;

fn live(n: usize, d: usize) -> AdapterConfig {
    AdapterConfig {
        zero_init_couplings: false,
        ..AdapterConfig::new(n, d)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn demultiplex_inverts_multiplex(
        n in prop::sample::select(vec![2usize, 4, 8]),
        d_mult in 1usize..4,
        seed in any::<u64>(),
        scale in 0.1f64..4.0,
    ) {
        let d = n * 4 * d_mult;
        let a = RevMuxAdapters::<f64>::new(live(n, d), seed).unwrap();
        let mut tape = Tape::new();
        let w = d / n;
        let inputs: Vec<_> = (0..n)
            .map(|k| tape.constant(random_tensor(&[2, 3, w], scale, seed.wrapping_add(k as u64))))
            .collect();
        let o = a.multiplex(&mut tape, &inputs).unwrap();
        let back = a.demultiplex(&mut tape, o).unwrap();
        for (x, y) in inputs.iter().zip(&back) {
            prop_assert!(tape.value(*x).max_abs_diff(tape.value(*y)).unwrap() < 1e-10);
        }
    }

    #[test]
    fn infonce_is_permutation_equivariant_and_nonnegative(
        n in 2usize..6,
        seed in any::<u64>(),
        rot in 1usize..5,
    ) {
        let s = random_tensor(&[n, 4], 1.5, seed);
        let t = random_tensor(&[n, 4], 1.5, seed ^ 1);
        let permute = |x: &Tensor<f64>| {
            let rows: Vec<f64> = (0..n).flat_map(|k| x.data()[((k + rot) % n) * 4..((k + rot) % n) * 4 + 4].to_vec()).collect();
            Tensor::new(vec![n, 4], rows).unwrap()
        };
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(s.clone()), tape.constant(t.clone()));
        let l1 = infonce_loss(&mut tape, a, b, 1.0).unwrap();
        let (pa, pb) = (tape.constant(permute(&s)), tape.constant(permute(&t)));
        let l2 = infonce_loss(&mut tape, pa, pb, 1.0).unwrap();
        let (v1, v2) = (tape.value(l1).data()[0], tape.value(l2).data()[0]);
        prop_assert!((v1 - v2).abs() < 1e-7);
        prop_assert!(v1 >= 0.0);
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in any::<u64>(), c in 2usize..6) {
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[3, c], 5.0, seed));
        let l = tape.softmax_cross_entropy(x, &[0, c - 1, 1]).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn tokenized_length_is_exact(words in prop::collection::vec("[a-e]{1,3}", 1..30), t in 1usize..20) {
        let ex = Example::new(words.join(" "), None, 0, 2).unwrap();
        let vocab = Vocab::build(core::slice::from_ref(&ex), 1, 50).unwrap();
        let enc = tokenize(&ex, &vocab, t);
        prop_assert_eq!(enc.ids.len(), t);
        prop_assert_eq!(enc.len(), (words.len() + 1).min(t));
    }
}

#[test]
fn demultiplex_recovers_inputs_in_single_precision() {
    for seed in 0..50 {
        let a = RevMuxAdapters::<f32>::new(live(4, 32), seed).unwrap();
        let mut tape = Tape::new();
        let inputs: Vec<_> = (0..4)
            .map(|k| tape.constant(random_tensor(&[2, 5, 8], 1.0, seed * 8 + k).cast::<f32>()))
            .collect();
        let o = a.multiplex(&mut tape, &inputs).unwrap();
        let back = a.demultiplex(&mut tape, o).unwrap();
        for (x, y) in inputs.iter().zip(&back) {
            assert!(tape.value(*x).max_abs_diff(tape.value(*y)).unwrap() <= 1e-5);
        }
    }
}
