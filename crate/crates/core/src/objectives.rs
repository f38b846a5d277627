//! Task cross-entropy over the recovered instances, InfoNCE alignment with
//! one-by-one teacher representations, and their weighted sum.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

/// Weight of the InfoNCE term when none is given.
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub infonce: f64,
    pub total: f64,
    pub lambda: f64,
}

/// InfoNCE between student rows `ĥ` and teacher rows `h`, shaped `[N, d]`
/// (one group) or `[G, N, d]`. For each group,
/// `Σ_k −log(exp(ĥ_k·h_k) / Σ_j exp(ĥ_k·h_j))`, negatives restricted to the
/// group; the result is averaged over groups. Similarities are raw dot
/// products divided by `temperature`.
pub fn infonce_loss<S: Scalar>(tape: &mut Tape<S>, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    let ss = tape.shape(student).to_vec();
    if ss != tape.shape(teacher) {
        return Err(Error::shape("infonce", &ss, tape.shape(teacher)));
    }
    let (groups, n, d) = match ss.as_slice() {
        [n, d] => (1, *n, *d),
        [g, n, d] => (*g, *n, *d),
        _ => return Err(Error::shape("infonce", &ss, &[0, 0, 0])),
    };
    if n < 2 {
        return Err(Error::config("InfoNCE needs at least two instances per group"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("InfoNCE temperature must be positive"));
    }
    let (s3, t3) = if ss.len() == 2 {
        (tape.reshape(student, &[1, n, d])?, tape.reshape(teacher, &[1, n, d])?)
    } else {
        (student, teacher)
    };
    let mut sims = tape.bmm(s3, t3, true)?;
    if temperature != 1.0 {
        sims = tape.scale(sims, S::from_f64(1.0 / temperature));
    }
    let rows = tape.reshape(sims, &[groups * n, n])?;
    let labels: Vec<usize> = (0..groups * n).map(|r| r % n).collect();
    let mean_row = tape.softmax_cross_entropy(rows, &labels)?;
    Ok(tape.scale(mean_row, S::from_f64(n as f64)))
}

/// `ce + λ·infonce`, with `ce` averaged over every recovered instance.
/// `logits[k]` is `[B, C]` for slot `k` with labels `labels[k]`. The InfoNCE
/// term is skipped entirely when `lambda` is zero.
pub fn combined_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &[Var],
    labels: &[&[usize]],
    student: Var,
    teacher: Var,
    lambda: f64,
    temperature: f64,
) -> Result<(Var, LossBreakdown)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::shape("combined_loss", &[logits.len()], &[labels.len()]));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda must be non-negative"));
    }
    let mut ce = tape.softmax_cross_entropy(logits[0], labels[0])?;
    for (&l, y) in logits.iter().zip(labels).skip(1) {
        let c = tape.softmax_cross_entropy(l, y)?;
        ce = tape.add(ce, c)?;
    }
    let ce = tape.scale(ce, S::from_f64(1.0 / logits.len() as f64));
    let ce_value = tape.value(ce).data()[0].to_f64_lossy();

    if lambda == 0.0 {
        return Ok((
            ce,
            LossBreakdown {
                ce: ce_value,
                infonce: 0.0,
                total: ce_value,
                lambda,
            },
        ));
    }
    let info = infonce_loss(tape, student, teacher, temperature)?;
    let weighted = tape.scale(info, S::from_f64(lambda));
    let total = tape.add(ce, weighted)?;
    Ok((
        total,
        LossBreakdown {
            ce: ce_value,
            infonce: tape.value(info).data()[0].to_f64_lossy(),
            total: tape.value(total).data()[0].to_f64_lossy(),
            lambda,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::random_tensor;
    use crate::numerics::Tensor;

    /// Direct evaluation of the per-group sum, no max-subtraction.
    fn direct(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let n = student.len();
        (0..n)
            .map(|k| {
                let pos = dot(&student[k], &teacher[k]).exp();
                let neg: f64 = (0..n)
                    .filter(|&j| j != k)
                    .map(|j| dot(&student[k], &teacher[j]).exp())
                    .sum();
                -(pos / (pos + neg)).ln()
            })
            .sum()
    }

    #[test]
    fn uniform_similarity_gives_n_ln_n() {
        for n in [2usize, 3, 5] {
            let mut tape = Tape::<f64>::new();
            let s = tape.constant(Tensor::filled(&[n, 4], 0.25));
            let t = tape.constant(Tensor::filled(&[n, 4], -1.0));
            let l = infonce_loss(&mut tape, s, t, 1.0).unwrap();
            let want = n as f64 * (n as f64).ln();
            assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_positives_vanish() {
        let mut tape = Tape::<f64>::new();
        let h = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let s = tape.constant(Tensor::from_fn(&[3, 3], |i| h.data()[i] * 60.0));
        let t = tape.constant(h);
        let l = infonce_loss(&mut tape, s, t, 1.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-20);
    }

    #[test]
    fn matches_direct_formula() {
        let st = random_tensor(&[3, 4], 1.0, 11);
        let te = random_tensor(&[3, 4], 1.0, 12);
        let rows = |t: &Tensor<f64>| t.data().chunks(4).map(|c| c.to_vec()).collect::<Vec<_>>();
        let want = direct(&rows(&st), &rows(&te));
        let mut tape = Tape::new();
        let s = tape.constant(st);
        let t = tape.constant(te);
        let l = infonce_loss(&mut tape, s, t, 1.0).unwrap();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn grouped_form_averages_groups() {
        let st = random_tensor(&[2, 3, 4], 1.0, 1);
        let te = random_tensor(&[2, 3, 4], 1.0, 2);
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(st.clone());
        let t = tape.constant(te.clone());
        let both = infonce_loss(&mut tape, s, t, 1.0).unwrap();
        let mut per = 0.0;
        for g in 0..2 {
            let s = tape.constant(st.narrow0(g, 1).unwrap().reshape(&[3, 4]).unwrap());
            let t = tape.constant(te.narrow0(g, 1).unwrap().reshape(&[3, 4]).unwrap());
            let l = infonce_loss(&mut tape, s, t, 1.0).unwrap();
            per += tape.value(l).data()[0] / 2.0;
        }
        assert!((tape.value(both).data()[0] - per).abs() < 1e-12);
    }

    #[test]
    fn single_instance_has_no_negatives() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(infonce_loss(&mut tape, s, s, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lambda_is_pure_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let l1 = tape.constant(random_tensor(&[2, 3], 1.0, 5));
        let l2 = tape.constant(random_tensor(&[2, 3], 1.0, 6));
        let s = tape.constant(random_tensor(&[2, 2, 4], 1.0, 7));
        let (total, b) = combined_loss(&mut tape, &[l1, l2], &[&[0, 2], &[1, 1]], s, s, 0.0, 1.0).unwrap();
        assert_eq!(b.total, b.ce);
        assert_eq!(b.infonce, 0.0);
        assert_eq!(tape.value(total).data()[0], b.ce);
    }
}
