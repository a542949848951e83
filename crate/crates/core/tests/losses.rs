use proptest::prelude::*;
use proptest::strategy::ValueTree;
use tempt::autodiff::Tape;
use tempt::losses::{cross_entropy, entropy_loss, jacobian_fd_approx, ldam_loss, temporal_consistency_loss, ClassCounts, RegionSet};
use tempt::Tensor;

/// Unstabilized f64 softmax cross-entropy with the true logit reduced by
/// its class margin.
fn xent_oracle(z: &[f32], k: usize, labels: &[usize], margins: &[f64]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = (0..k).map(|j| z[s * k + j] as f64 - if j == y { margins[j] } else { 0.0 }).collect();
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / denom).ln();
    }
    total / n as f64
}

fn entropy_oracle(z: &[f32], k: usize) -> f64 {
    let n = z.len() / k;
    (0..n)
        .map(|s| {
            let e: Vec<f64> = (0..k).map(|j| (z[s * k + j] as f64).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.iter().map(|v| -(v / sum) * (v / sum).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

fn batch(k: usize, max_n: usize) -> impl Strategy<Value = (Vec<f32>, Vec<usize>)> {
    (1..=max_n).prop_flat_map(move |n| (prop::collection::vec(-8.0f32..8.0, n * k), prop::collection::vec(0..k, n)))
}

fn scalar_loss(z: &[f32], k: usize, f: impl FnOnce(&mut Tape, tempt::autodiff::Var) -> tempt::Result<tempt::autodiff::Var>) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::new([z.len() / k, k], z.to_vec()).unwrap(), false);
    let l = f(&mut tape, v).unwrap();
    tape.value(l).item().unwrap() as f64
}

proptest! {
    #[test]
    fn ldam_matches_f64_oracle(
        (z, labels) in batch(6, 12),
        counts in prop::collection::vec(1usize..500, 6),
        c in 0.0f32..3.0,
    ) {
        let cc = ClassCounts::new(counts.clone(), c).unwrap();
        let margins: Vec<f64> = counts.iter().map(|&n| c as f64 / (n as f64).powf(0.25)).collect();
        let got = scalar_loss(&z, 6, |t, v| ldam_loss(t, v, &labels, &cc));
        let want = xent_oracle(&z, 6, &labels, &margins);
        prop_assert!((got - want).abs() < 1e-5 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn cross_entropy_and_entropy_match_f64_oracle((z, labels) in batch(5, 10)) {
        let ce = scalar_loss(&z, 5, |t, v| cross_entropy(t, v, &labels));
        let want = xent_oracle(&z, 5, &labels, &[0.0; 5]);
        prop_assert!((ce - want).abs() < 1e-6 * want.abs().max(1.0), "{} vs {}", ce, want);
        let h = scalar_loss(&z, 5, |t, v| entropy_loss(t, v));
        let want = entropy_oracle(&z, 5);
        prop_assert!((h - want).abs() < 1e-6 * want.abs().max(1.0), "{} vs {}", h, want);
    }

    #[test]
    fn rarer_classes_get_larger_margins(counts in prop::collection::vec(1usize..1000, 2..10), c in 0.01f32..5.0) {
        let m = ClassCounts::new(counts.clone(), c).unwrap().margins();
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(m[i] > m[j]);
                }
            }
        }
    }
}

#[test]
fn zero_temperature_ldam_is_cross_entropy_on_random_batches() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = (batch(8, 32), prop::collection::vec(1usize..300, 8));
    for _ in 0..100 {
        let ((z, labels), counts) = strategy.new_tree(&mut runner).unwrap().current();
        let cc = ClassCounts::new(counts, 0.0).unwrap();
        let a = scalar_loss(&z, 8, |t, v| ldam_loss(t, v, &labels, &cc));
        let b = scalar_loss(&z, 8, |t, v| cross_entropy(t, v, &labels));
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn uniform_logits_give_ln_k() {
    let z = vec![0.3f32; 16];
    let ce = scalar_loss(&z, 8, |t, v| cross_entropy(t, v, &[2, 5]));
    let h = scalar_loss(&z, 8, |t, v| entropy_loss(t, v));
    assert!((ce - 8f64.ln()).abs() < 1e-6);
    assert!((h - 8f64.ln()).abs() < 1e-6);
}

#[test]
fn temporal_loss_fixed_point_has_zero_gradient() {
    let y = Tensor::new([6, 3], (0..18).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    for regions in [RegionSet::All, RegionSet::Ranges(vec![1..3, 4..6])] {
        let mut tape = Tape::new();
        let v = tape.leaf(y.clone(), true);
        let l = temporal_consistency_loss(&mut tape, v, &y, &regions).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.0));
        let g = tape.backward(l).unwrap();
        assert!(g.of(v).unwrap().data().iter().all(|&x| x == 0.0));
    }
}

fn matvec(a: &[f64], k: usize, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..k).map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum()).collect()
}

#[test]
fn linear_map_columns_recovered_from_unit_steps() {
    let (k, d) = (4, 5);
    let a: Vec<f64> = (0..k * d).map(|i| ((i * 7919) % 97) as f64 / 13.0 - 3.5).collect();
    let x0: Vec<f64> = (0..d).map(|j| j as f64 * 0.3 - 0.7).collect();
    for j in 0..d {
        for eps in [1.0, 1e-3] {
            let mut x1 = x0.clone();
            x1[j] += eps;
            let est = jacobian_fd_approx(&matvec(&a, k, &x0), &matvec(&a, k, &x1), &x0, &x1).unwrap();
            for i in 0..k {
                assert!((est.get(i, j).unwrap() - a[i * d + j]).abs() < 1e-4);
            }
            // Only the moved coordinate defines a column.
            for jj in (0..d).filter(|&jj| jj != j) {
                assert!(est.column(jj).iter().all(Option::is_none));
            }
        }
    }
}

#[test]
fn difference_to_jacobian_ratio_is_scale_free() {
    let (k, d) = (3, 4);
    let a0: Vec<f64> = (0..k * d).map(|i| ((i * 31) % 11) as f64 / 5.0 - 1.0).collect();
    let frames: Vec<Vec<f64>> = (0..6).map(|t| (0..d).map(|j| ((t * d + j) as f64 * 0.77).sin() * 2.0).collect()).collect();
    let ratio = |alpha: f64| {
        let a: Vec<f64> = a0.iter().map(|v| v * alpha).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for w in frames.windows(2) {
            let (f0, f1) = (matvec(&a, k, &w[0]), matvec(&a, k, &w[1]));
            num += f0.iter().zip(&f1).map(|(p, q)| (q - p).powi(2)).sum::<f64>();
            den += jacobian_fd_approx(&f0, &f1, &w[0], &w[1]).unwrap().frobenius_sq();
        }
        num / den
    };
    let base = ratio(1.0);
    for alpha in [0.01, 0.5, 3.0, 250.0] {
        assert!((ratio(alpha) - base).abs() < 1e-5 * base.max(1.0), "alpha {alpha}");
    }
}

#[test]
fn quadratic_jacobian_within_step_order() {
    // f_i(x) = Σ_j q_ij x_j², so ∂f_i/∂x_j = 2 q_ij x_j.
    let (k, d) = (3, 4);
    let q: Vec<f64> = (0..k * d).map(|i| (i as f64 * 0.61).cos()).collect();
    let f = |x: &[f64]| -> Vec<f64> { (0..k).map(|i| (0..d).map(|j| q[i * d + j] * x[j] * x[j]).sum()).collect() };
    let x0: Vec<f64> = (0..d).map(|j| 0.5 + j as f64 * 0.25).collect();
    for step in [1e-2, 1e-3] {
        for j in 0..d {
            let mut x1 = x0.clone();
            x1[j] += step;
            let est = jacobian_fd_approx(&f(&x0), &f(&x1), &x0, &x1).unwrap();
            for i in 0..k {
                let exact = 2.0 * q[i * d + j] * x0[j];
                // Forward difference error is exactly q_ij · step here.
                assert!((est.get(i, j).unwrap() - exact).abs() <= q[i * d + j].abs() * step * 1.001 + 1e-9);
            }
        }
    }
}
