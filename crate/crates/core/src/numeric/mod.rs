//! Minimal differentiable compute substrate.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use graph::{Grads, Graph, Segment, Var};
pub use params::{init, Bound, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Mean softmax cross-entropy of `logits: [T, V]` against `targets` and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f32, Tensor)> {
    let (t, v) = logits.dims2()?;
    if t == 0 || targets.len() != t {
        return Err(Error::shape("softmax_cross_entropy", format!("{t} rows, {} targets", targets.len())));
    }
    let opt: Vec<Option<usize>> = targets.iter().map(|x| Some(*x)).collect();
    let (loss, mut probs, count) = graph::ce_forward(logits.data(), v, &opt)?;
    for (r, tgt) in targets.iter().enumerate() {
        probs[r * v + tgt] -= 1.0;
    }
    let inv = 1.0 / count as f32;
    probs.iter_mut().for_each(|p| *p *= inv);
    Ok((loss, Tensor::new(vec![t, v], probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of -mean log softmax[target] in f64.
    fn brute_ce(logits: &[f32], v: usize, targets: &[usize]) -> f64 {
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &logits[r * v..(r + 1) * v];
            let denom: f64 = row.iter().map(|x| (*x as f64).exp()).sum();
            total -= ((row[*t] as f64).exp() / denom).ln();
        }
        total / targets.len() as f64
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[4, 370]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 5, 99, 369]).unwrap();
        assert!((loss as f64 - 370f64.ln()).abs() < 1e-5, "{loss}");
        assert!((370f64.ln() - 5.9135).abs() < 1e-4);
    }

    #[test]
    fn confident_logit_gives_near_zero_loss() {
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[3] = 20.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Tensor::new(vec![3, 5], data.clone()).unwrap();
        let targets = [1, 4, 0];
        let (loss, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
        assert!((loss as f64 - brute_ce(&data, 5, &targets)).abs() < 1e-6);
        // gradient rows sum to zero and equal (softmax - onehot)/T
        for r in 0..3 {
            let row = &data[r * 5..(r + 1) * 5];
            let denom: f64 = row.iter().map(|x| (*x as f64).exp()).sum();
            for c in 0..5 {
                let p = (row[c] as f64).exp() / denom;
                let expect = (p - if c == targets[r] { 1.0 } else { 0.0 }) / 3.0;
                assert!((grad.data()[r * 5 + c] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 4]),
            Err(Error::OutOfRange { .. })
        ));
        let mut bad = Tensor::zeros(&[1, 4]);
        bad.data_mut()[2] = f32::NAN;
        assert!(matches!(softmax_cross_entropy(&bad, &[0]), Err(Error::NonFinite(_))));
        let inf = Tensor::new(vec![1, 2], vec![f32::INFINITY, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&inf, &[0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        p[0].set_grad(vec![0.0; 3]).unwrap();
        let before = p[0].data().to_vec();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &mut st, None).unwrap();
        assert_eq!(p[0].data(), &before[..]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()];
        p[0].set_grad(vec![3.0, -0.2, 7.5]).unwrap();
        let mut st = AdamState::new(cfg, &p);
        adam_step(&mut p, &mut st, None).unwrap();
        let expect = [-0.01, 0.01, -0.01];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(cfg, &p);
        let mut prev = 1.0f32;
        for _ in 0..10 {
            let w = p[0].data()[0];
            p[0].set_grad(vec![2.0 * w]).unwrap();
            adam_step(&mut p, &mut st, None).unwrap();
            let now = p[0].data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
        assert_eq!(st.steps(), 10);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let p = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let mut other = vec![Tensor::zeros(&[4])];
        assert!(adam_step(&mut other, &mut st, None).is_err());
    }

    #[test]
    fn grad_check_linear_loss_is_exact() {
        // analytic gradient from the graph, numeric side evaluated in f64
        let w = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let c = Tensor::new(vec![4, 1], vec![1.5, -0.5, 0.25, 2.0]).unwrap();
        let g = Graph::new();
        let wv = g.leaf(w.clone());
        let cv = g.constant(c.clone());
        let y = g.matmul(wv, cv).unwrap();
        let loss = g.sum(y);
        let analytic = g.backward(loss).unwrap().get(wv).unwrap().to_vec();
        let f = |ps: &[Tensor]| -> Result<f64> {
            Ok(ps[0].data().iter().zip(c.data()).map(|(a, b)| *a as f64 * *b as f64).sum())
        };
        let report = compare_gradients(f, &[w], &[analytic], 1e-2, 1e-7, 16).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn grad_check_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Tensor::new(vec![4, 8], data).unwrap();
        let report = grad_check(
            |g, v| g.cross_entropy(v[0], &[Some(1), Some(7), Some(0), Some(3)]),
            &[logits],
            1e-2,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn grad_check_catches_corrupted_coordinate() {
        let logits = Tensor::new(vec![1, 3], vec![0.1, 0.2, -0.3]).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        let mut analytic = grad.data().to_vec();
        analytic[1] += 0.5;
        let f = |ps: &[Tensor]| -> Result<f64> { Ok(softmax_cross_entropy(&ps[0], &[2])?.0 as f64) };
        let report = compare_gradients(f, &[logits], &[analytic], 1e-3, 1e-4, 16).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst, Some((0, 1)));
    }

    #[test]
    fn grad_check_rejects_bad_epsilon_and_nan() {
        let t = Tensor::scalar(1.0);
        let f = |_: &[Tensor]| -> Result<f64> { Ok(0.0) };
        assert!(compare_gradients(f, &[t.clone()], &[vec![0.0]], 0.5, 1e-4, 1).is_err());
        let nan = |_: &[Tensor]| -> Result<f64> { Ok(f64::NAN) };
        assert!(matches!(
            compare_gradients(nan, &[t], &[vec![0.0]], 1e-3, 1e-4, 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        assert!(checkpoint::decode(b"NOPE").is_err());
        let bytes = checkpoint::encode(&[("w".into(), Tensor::zeros(&[2, 2]))]);
        assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(&bytes[..4], b"C3F1");
    }

    proptest::proptest! {
        #[test]
        fn checkpoint_round_trips(
            names in proptest::collection::vec("[a-z._0-9]{1,12}", 1..4),
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tensors: Vec<(String, Tensor)> = names
                .iter()
                .map(|n| {
                    let len: usize = dims.iter().product();
                    let data = (0..len).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
                    (n.clone(), Tensor::new(dims.clone(), data).unwrap())
                })
                .collect();
            let back = checkpoint::decode(&checkpoint::encode(&tensors)).unwrap();
            proptest::prop_assert_eq!(back, tensors);
        }
    }
}
