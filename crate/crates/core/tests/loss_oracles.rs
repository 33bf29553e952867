#![allow(clippy::needless_range_loop)]

use confrank_core::losses::{
    ce_loss, cr_loss, kd_loss, rcr_loss, rkd_logit_loss, BatchLogits, LossOutput, ScoringFunction,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Batch {
    ids: Vec<u64>,
    u: Vec<f64>,
    v: Vec<Option<f64>>,
    y: Vec<bool>,
}

impl Batch {
    fn random(rng: &mut ChaCha8Rng, max_len: usize) -> Self {
        let n = rng.random_range(1..=max_len);
        Batch {
            ids: (0..n as u64).collect(),
            u: (0..n).map(|_| rng.random_range(-4.0..4.0)).collect(),
            v: (0..n).map(|_| Some(rng.random_range(-4.0..4.0))).collect(),
            y: (0..n).map(|_| rng.random_bool(0.3)).collect(),
        }
    }

    fn logits(&self) -> BatchLogits<'_> {
        BatchLogits::new(&self.ids, &self.u, &self.v, &self.y).unwrap()
    }

    fn teacher(&self, i: usize) -> f64 {
        self.v[i].unwrap()
    }
}

fn assert_close(got: &LossOutput, value: f64, grad: &[f64], tol: f64) {
    assert!((got.value - value).abs() <= tol, "value {} vs {value}", got.value);
    for (i, (a, b)) in got.grad.iter().zip(grad).enumerate() {
        assert!((a - b).abs() <= tol, "grad[{i}] {a} vs {b}");
    }
}

fn rcr_double_loop(b: &Batch, phi: ScoringFunction) -> (f64, Vec<f64>) {
    let n = b.u.len();
    let pos: Vec<usize> = (0..n).filter(|&i| b.y[i]).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| !b.y[i]).collect();
    let mut grad = vec![0.0; n];
    if pos.is_empty() || neg.is_empty() {
        return (0.0, grad);
    }
    let pairs = (pos.len() * neg.len()) as f64;
    let mut value = 0.0;
    for &i in &pos {
        for &j in &neg {
            let m = (b.u[i] - b.u[j]) - (b.teacher(i) - b.teacher(j));
            value += phi.value(m) / pairs;
            grad[i] += phi.derivative(m) / pairs;
            grad[j] -= phi.derivative(m) / pairs;
        }
    }
    (value, grad)
}

fn rkd_double_loop(b: &Batch) -> (f64, Vec<f64>) {
    let n = b.u.len();
    let mut grad = vec![0.0; n];
    if n < 2 {
        return (0.0, grad);
    }
    let pairs = (n * (n - 1)) as f64;
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = (b.u[i] - b.u[j]) - (b.teacher(i) - b.teacher(j));
            value += 0.5 * d * d / pairs;
            grad[i] += d / pairs;
            grad[j] -= d / pairs;
        }
    }
    (value, grad)
}

#[test]
fn relational_losses_match_double_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..300 {
        let b = Batch::random(&mut rng, 64);
        for phi in [ScoringFunction::Logistic, ScoringFunction::Square] {
            let (value, grad) = rcr_double_loop(&b, phi);
            assert_close(&rcr_loss(&b.logits(), phi).unwrap(), value, &grad, 1e-9);
        }
        let (value, grad) = rkd_double_loop(&b);
        assert_close(&rkd_logit_loss(&b.logits()).unwrap(), value, &grad, 1e-9);
    }
}

#[test]
fn pointwise_losses_match_per_example_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    for _ in 0..200 {
        let b = Batch::random(&mut rng, 32);
        let n = b.u.len() as f64;

        let (mut value, mut grad) = (0.0, vec![0.0; b.u.len()]);
        for i in 0..b.u.len() {
            let p = sigmoid(b.u[i]);
            let y = if b.y[i] { 1.0 } else { 0.0 };
            value -= (y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / n;
            grad[i] = (p - y) / n;
        }
        assert_close(&ce_loss(&b.logits()).unwrap(), value, &grad, 1e-9);

        let (mut value, mut grad) = (0.0, vec![0.0; b.u.len()]);
        for i in 0..b.u.len() {
            let s = if b.y[i] { 1.0 } else { -1.0 };
            let m = s * (b.u[i] - b.teacher(i));
            value += (1.0 + (-m).exp()).ln() / n;
            grad[i] = -s * sigmoid(-m) / n;
        }
        assert_close(
            &cr_loss(&b.logits(), ScoringFunction::Logistic).unwrap(),
            value,
            &grad,
            1e-9,
        );

        let t = 2.0;
        let (mut value, mut grad) = (0.0, vec![0.0; b.u.len()]);
        for i in 0..b.u.len() {
            let q = sigmoid(b.teacher(i) / t);
            let p = sigmoid(b.u[i] / t);
            value -= t * t * (q * p.ln() + (1.0 - q) * (1.0 - p).ln()) / n;
            grad[i] = t * (p - q) / n;
        }
        assert_close(&kd_loss(&b.logits(), t).unwrap(), value, &grad, 1e-9);
    }
}
