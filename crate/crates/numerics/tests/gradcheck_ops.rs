//! Finite-difference verification for every differentiable op: analytic
//! gradients must match central differences (h = 1e-6) within rel-err 1e-5
//! on random inputs in [-1, 1].

use numerics::gradcheck::{max_rel_err, numeric_grad, rel_err};
use numerics::{
    additive_scores, backward, bce_with_logits, conv2d, cross_entropy_logits, embedding,
    global_avg_pool, layer_norm, scatter_cols, Tensor,
};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// xorshift64* — deterministic test inputs without external dependencies.
struct Rng(u64);

impl Rng {
    fn new(seed: u64) -> Rng {
        Rng(seed.max(1))
    }
    fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }
    /// Uniform in [-1, 1].
    fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
    fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.unit()).collect()
    }
    /// Uniform in [-1, 1] but bounded away from zero, for kinked ops.
    fn vec_off_zero(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = self.unit();
                if v.abs() < 1e-2 {
                    v + 0.05_f64.copysign(if v == 0.0 { 1.0 } else { v })
                } else {
                    v
                }
            })
            .collect()
    }
}

fn param(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(rng.vec(n), shape).unwrap()
}

/// Runs backward on `build()` once for the analytic gradient, then compares
/// every coordinate of every listed parameter against central differences.
fn check(params: &[&Tensor], mut build: impl FnMut() -> Tensor) {
    let loss = build();
    backward(&loss).unwrap();
    for p in params {
        let analytic = p.grad().expect("parameter missing grad");
        let coords: Vec<usize> = (0..p.numel()).collect();
        let worst = max_rel_err(&mut || build().item(), p, &analytic, &coords, H);
        assert!(worst <= TOL, "rel-err {worst} exceeds {TOL}");
        p.zero_grad();
    }
}

#[test]
fn matmul_identity_case() {
    let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let v = Tensor::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
    assert_eq!(eye.matmul(&v).unwrap().data(), vec![3.0, 4.0]);
}

#[test]
fn matmul_hand_computed() {
    let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = Tensor::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), vec![11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::from_vec(vec![0.0; 6], &[2, 3]).unwrap();
    let b = Tensor::from_vec(vec![0.0; 8], &[4, 2]).unwrap();
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(42);
    let a = param(&mut rng, &[4, 5]);
    let b = param(&mut rng, &[5, 2]);
    check(&[&a, &b], || a.matmul(&b).unwrap().sum());
}

#[test]
fn add_broadcast_gradients() {
    let mut rng = Rng::new(7);
    let x = param(&mut rng, &[3, 4]);
    let row = param(&mut rng, &[4]);
    let scalar = param(&mut rng, &[1]);
    let w = Tensor::from_vec(rng.vec(12), &[3, 4]).unwrap();
    check(&[&x, &row, &scalar], || {
        x.add(&row)
            .unwrap()
            .add(&scalar)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum()
    });
}

#[test]
fn mul_and_scale_gradients() {
    let mut rng = Rng::new(8);
    let a = param(&mut rng, &[2, 5]);
    let b = param(&mut rng, &[2, 5]);
    check(&[&a, &b], || a.mul(&b).unwrap().scale(1.7).sum());
}

#[test]
fn tanh_at_zero_has_unit_gradient() {
    let x = Tensor::param(vec![0.0], &[1]).unwrap();
    let y = x.tanh();
    assert_eq!(y.item(), 0.0);
    backward(&y).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0]);
}

#[test]
fn tanh_gradient_matches_finite_differences() {
    let mut rng = Rng::new(9);
    let x = param(&mut rng, &[3, 3]);
    let w = Tensor::from_vec(rng.vec(9), &[3, 3]).unwrap();
    check(&[&x], || x.tanh().mul(&w).unwrap().sum());
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut rng = Rng::new(10);
    let x = Tensor::param(rng.vec_off_zero(12), &[3, 4]).unwrap();
    let w = Tensor::from_vec(rng.vec(12), &[3, 4]).unwrap();
    check(&[&x], || x.relu().mul(&w).unwrap().sum());
}

#[test]
fn sigmoid_gradient_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let x = param(&mut rng, &[2, 6]);
    let w = Tensor::from_vec(rng.vec(12), &[2, 6]).unwrap();
    check(&[&x], || x.sigmoid().mul(&w).unwrap().sum());
}

#[test]
fn ln_gradient_matches_finite_differences() {
    let mut rng = Rng::new(12);
    let data: Vec<f64> = rng.vec(8).iter().map(|v| v.abs() + 0.5).collect();
    let x = Tensor::param(data, &[8]).unwrap();
    check(&[&x], || x.ln().unwrap().sum());
}

#[test]
fn ln_rejects_nonpositive_input() {
    let x = Tensor::from_vec(vec![1.0, 0.0], &[2]).unwrap();
    assert!(x.ln().is_err());
}

#[test]
fn softmax_uniform_on_constant_row() {
    let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
    let y = x.softmax_last().unwrap().data();
    for v in y {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = Rng::new(13);
    for _ in 0..50 {
        let x = Tensor::from_vec(rng.vec(40).iter().map(|v| v * 8.0).collect(), &[5, 8]).unwrap();
        let y = x.softmax_last().unwrap().data();
        for row in y.chunks(8) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn softmax_rejects_non_finite_input() {
    let x = Tensor::from_vec(vec![1.0, f64::NAN], &[2]).unwrap();
    assert!(x.softmax_last().is_err());
    let x = Tensor::from_vec(vec![1.0, f64::INFINITY], &[2]).unwrap();
    assert!(x.softmax_last().is_err());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::new(14);
    let x = param(&mut rng, &[3, 5]);
    let w = Tensor::from_vec(rng.vec(15), &[3, 5]).unwrap();
    check(&[&x], || x.softmax_last().unwrap().mul(&w).unwrap().sum());
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(15);
    let x = param(&mut rng, &[4, 6]);
    let gamma = Tensor::param(rng.vec(6).iter().map(|v| v + 1.5).collect(), &[6]).unwrap();
    let beta = param(&mut rng, &[6]);
    let w = Tensor::from_vec(rng.vec(24), &[4, 6]).unwrap();
    check(&[&x, &gamma, &beta], || {
        layer_norm(&x, &gamma, &beta, 1e-5)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum()
    });
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut rng = Rng::new(16);
    let table = param(&mut rng, &[7, 4]);
    let ids = [3usize, 0, 3, 6];
    let w = Tensor::from_vec(rng.vec(16), &[4, 4]).unwrap();
    check(&[&table], || {
        embedding(&table, &ids).unwrap().mul(&w).unwrap().sum()
    });
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    // Spec case: 1×6×6 input, 2 filters of 3×3.
    let mut rng = Rng::new(17);
    let x = param(&mut rng, &[1, 6, 6]);
    let w = param(&mut rng, &[2, 1, 3, 3]);
    let b = param(&mut rng, &[2]);
    check(&[&x, &w, &b], || {
        conv2d(&x, &w, &b, 1, 1).unwrap().sum()
    });
}

#[test]
fn conv2d_strided_gradient_matches_finite_differences() {
    let mut rng = Rng::new(18);
    let x = param(&mut rng, &[2, 8, 8]);
    let w = param(&mut rng, &[3, 2, 3, 3]);
    let b = param(&mut rng, &[3]);
    check(&[&x, &w, &b], || {
        conv2d(&x, &w, &b, 2, 1).unwrap().sum()
    });
}

#[test]
fn global_avg_pool_gradient_matches_finite_differences() {
    let mut rng = Rng::new(19);
    let x = param(&mut rng, &[3, 4, 4]);
    let w = Tensor::from_vec(rng.vec(3), &[1, 3]).unwrap();
    check(&[&x], || global_avg_pool(&x).unwrap().mul(&w).unwrap().sum());
}

#[test]
fn bce_with_logits_gradient_matches_finite_differences() {
    let mut rng = Rng::new(20);
    let z = param(&mut rng, &[1, 6]);
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    check(&[&z], || bce_with_logits(&z, &targets).unwrap());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = Rng::new(21);
    let z = param(&mut rng, &[4, 9]);
    let targets = [2usize, 0, 8, 5];
    check(&[&z], || cross_entropy_logits(&z, &targets).unwrap());
}

#[test]
fn additive_scores_gradient_matches_finite_differences() {
    let mut rng = Rng::new(22);
    let keys = param(&mut rng, &[5, 4]);
    let queries = param(&mut rng, &[3, 4]);
    let v = param(&mut rng, &[4]);
    let w = Tensor::from_vec(rng.vec(15), &[3, 5]).unwrap();
    check(&[&keys, &queries, &v], || {
        additive_scores(&keys, &queries, &v)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum()
    });
}

#[test]
fn scatter_and_gather_gradients_match_finite_differences() {
    let mut rng = Rng::new(23);
    let attn = param(&mut rng, &[2, 5]);
    let ids = [4usize, 1, 4, 0, 2];
    let w = Tensor::from_vec(rng.vec(12), &[2, 6]).unwrap();
    check(&[&attn], || {
        scatter_cols(&attn, &ids, 6).unwrap().mul(&w).unwrap().sum()
    });

    let x = param(&mut rng, &[3, 4]);
    let rows = [1usize, 3, 0];
    check(&[&x], || x.gather_rows(&rows).unwrap().sum());
}

#[test]
fn structural_ops_gradients_match_finite_differences() {
    let mut rng = Rng::new(24);
    let a = param(&mut rng, &[3, 2]);
    let b = param(&mut rng, &[3, 4]);
    let w = Tensor::from_vec(rng.vec(18), &[3, 6]).unwrap();
    check(&[&a, &b], || {
        a.concat_cols(&b).unwrap().mul(&w).unwrap().sum()
    });

    let x = param(&mut rng, &[4, 6]);
    let w2 = Tensor::from_vec(rng.vec(8), &[4, 2]).unwrap();
    check(&[&x], || {
        x.slice_cols(2, 4).unwrap().mul(&w2).unwrap().sum()
    });

    let y = param(&mut rng, &[3, 5]);
    let w3 = Tensor::from_vec(rng.vec(15), &[5, 3]).unwrap();
    check(&[&y], || y.transpose2d().unwrap().mul(&w3).unwrap().sum());

    let z = param(&mut rng, &[2, 6]);
    let w4 = Tensor::from_vec(rng.vec(12), &[3, 4]).unwrap();
    check(&[&z], || z.reshape(&[3, 4]).unwrap().mul(&w4).unwrap().sum());

    let r1 = param(&mut rng, &[2, 3]);
    let r2 = param(&mut rng, &[4, 3]);
    let w5 = Tensor::from_vec(rng.vec(18), &[6, 3]).unwrap();
    check(&[&r1, &r2], || {
        r1.concat_rows(&r2).unwrap().mul(&w5).unwrap().sum()
    });

    let s = param(&mut rng, &[5, 3]);
    let w6 = Tensor::from_vec(rng.vec(6), &[2, 3]).unwrap();
    check(&[&s], || s.slice_rows(1, 3).unwrap().mul(&w6).unwrap().sum());
}

#[test]
fn backward_of_sum_gives_ones() {
    let w = Tensor::param(vec![5.0, -1.0, 2.0], &[3]).unwrap();
    let loss = w.sum();
    backward(&loss).unwrap();
    assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum_is_two_x() {
    let w = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let loss = w.mul(&w).unwrap().sum();
    backward(&loss).unwrap();
    assert_eq!(w.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn repeated_backward_accumulates_additively() {
    let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let loss = w.mul(&w).unwrap().sum();
    backward(&loss).unwrap();
    backward(&loss).unwrap();
    assert_eq!(w.grad().unwrap(), vec![4.0, 8.0]);
}

#[test]
fn shared_parameter_collects_grads_from_all_uses() {
    let w = Tensor::param(vec![1.0, 2.0], &[1, 2]).unwrap();
    // loss = sum(w·wᵀ) = w0² + w1² through two distinct uses of w
    let loss = w.matmul(&w.transpose2d().unwrap()).unwrap().sum();
    backward(&loss).unwrap();
    assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let err = backward(&w.tanh()).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = Rng::new(77);
    let data = rng.vec(30);
    let run = |d: &[f64]| {
        let x = Tensor::from_vec(d.to_vec(), &[5, 6]).unwrap();
        let y = x.tanh().softmax_last().unwrap();
        y.data()
    };
    assert_eq!(run(&data), run(&data));
}

#[test]
fn rel_err_floor_handles_zeros() {
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert!(rel_err(1.0, 1.0 + 1e-9) < 1e-8);
}

#[test]
fn numeric_grad_probes_restore_the_parameter() {
    let x = Tensor::param(vec![0.3], &[1]).unwrap();
    let g = numeric_grad(&mut || x.tanh().sum().item(), &x, 0, 1e-6);
    assert_eq!(x.value_at(0), 0.3);
    assert!(rel_err(g, 1.0 - 0.3f64.tanh().powi(2)) < 1e-6);
}
