mod common;

use fedpda::algorithms::{
    erm, finetune, pcgrad_combine, pcgrad_surgery, staralign_pair, tent_supervised, AlignConfig,
};
use fedpda::data::DomainDataset;
use fedpda::model::{LinearLeastSquares, Model};
use fedpda::numerics::{dot_slices, GradientVector, Matrix, ParamVector, Rng};

use common::{blobs, jittered, mlp};
use proptest::prelude::*;

fn full_batch(alpha: f64, tau: usize) -> AlignConfig {
    AlignConfig {
        alpha,
        beta: 1.0,
        tau,
        rounds: 1,
        batch_size: 10_000,
        first_order_per_step: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pair_update_lies_on_the_segment(seed in 0u64..10_000, beta in 0.01f64..=1.0) {
        let model = mlp(3, &[5], 2);
        let mut rng = Rng::new(seed);
        let p = jittered(&model, &mut rng, 0.2);
        let t = blobs(&mut rng, "t", 8, 3, 2, 0.0).as_batch().unwrap();
        let s = blobs(&mut rng, "s", 9, 3, 2, 1.0).as_batch().unwrap();
        let full = staralign_pair(&model, &p, &t, &s, 0.1, 1.0).unwrap();
        let part = staralign_pair(&model, &p, &t, &s, 0.1, beta).unwrap();
        let d_full = p.delta_to(&full).unwrap();
        let d_part = p.delta_to(&part).unwrap();
        prop_assert!((d_part.norm() - beta * d_full.norm()).abs() <= 1e-12 * d_full.norm().max(1.0));
        for i in 0..p.len() {
            prop_assert!((d_part[i] - beta * d_full[i]).abs() <= 1e-14 * (1.0 + p[i].abs()));
        }
    }

    #[test]
    fn surgered_gradients_never_conflict(seed in 0u64..100_000, k in 2usize..6, dim in 1usize..10) {
        let mut rng = Rng::new(seed);
        let grads: Vec<GradientVector> = (0..k)
            .map(|_| GradientVector::new(rng.gaussian_vec(dim, 0.0, 1.0).unwrap()))
            .collect();
        for s in pcgrad_surgery(&grads, &mut rng).unwrap() {
            for &j in &s.projected_against {
                prop_assert!(dot_slices(s.grad.as_slice(), grads[j].as_slice()).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn aligned_gradients_pass_through(seed in 0u64..100_000, k in 2usize..6, dim in 1usize..10) {
        let mut rng = Rng::new(seed);
        let grads: Vec<GradientVector> = (0..k)
            .map(|_| GradientVector::new((0..dim).map(|_| rng.uniform()).collect()))
            .collect();
        let combined = pcgrad_combine(&grads, &mut rng).unwrap();
        prop_assert!(combined.bit_eq(&GradientVector::mean(&grads).unwrap()));
    }
}

#[test]
fn tent_moves_only_batch_norm_affine() {
    let model = mlp(3, &[6, 4], 3);
    let mut rng = Rng::new(2);
    let p = jittered(&model, &mut rng, 0.2);
    let data = blobs(&mut rng, "t", 15, 3, 3, 0.5);
    let alpha = 1e-3;
    let out = tent_supervised(&model, &p, &data, &full_batch(alpha, 1), &mut Rng::new(0)).unwrap();
    let layout = model.layout();
    let affine = layout.bn_affine_mask();
    let stats: Vec<bool> = {
        let mut m = vec![false; p.len()];
        for r in layout.running_stat_ranges() {
            m[r].iter_mut().for_each(|b| *b = true);
        }
        m
    };
    let batch = data.as_batch().unwrap();
    let h = 1e-6;
    let mut probe = p.clone();
    for i in 0..p.len() {
        if affine[i] {
            // the step is −α times the loss gradient in that coordinate
            probe.as_mut_slice()[i] = p[i] + h;
            let up = model.loss_and_grad(&probe, &batch).unwrap().0;
            probe.as_mut_slice()[i] = p[i] - h;
            let down = model.loss_and_grad(&probe, &batch).unwrap().0;
            probe.as_mut_slice()[i] = p[i];
            let fd = (up - down) / (2.0 * h);
            let step = (p[i] - out[i]) / alpha;
            assert!((step - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "coord {i}: {step} vs {fd}");
        } else if !stats[i] {
            assert_eq!(out[i].to_bits(), p[i].to_bits(), "coord {i} moved");
        }
    }
}

fn linear_data(rng: &mut Rng, n: usize, d: usize, c: usize) -> DomainDataset {
    let x = Matrix::from_vec(n, d, rng.gaussian_vec(n * d, 0.2, 1.0).unwrap()).unwrap();
    let y = (0..n).map(|_| rng.below(c)).collect();
    DomainDataset::new("lin", x, y, c).unwrap()
}

fn mean_loss(model: &LinearLeastSquares, p: &ParamVector, data: &DomainDataset) -> f64 {
    model.loss_and_grad(p, &data.as_batch().unwrap()).unwrap().0
}

#[test]
fn finetune_loss_never_increases_on_a_convex_model() {
    let model = LinearLeastSquares::new(4, 3);
    let mut rng = Rng::new(1);
    let data = linear_data(&mut rng, 40, 4, 3);
    let mut p = ParamVector::new(rng.gaussian_vec(model.num_params(), 0.0, 1.0).unwrap());
    let mut prev = mean_loss(&model, &p, &data);
    for _ in 0..200 {
        p = finetune(&model, &p, &data, &full_batch(0.05, 1), &mut rng).unwrap();
        let now = mean_loss(&model, &p, &data);
        assert!(now <= prev, "{now} > {prev}");
        prev = now;
    }
}

/// Least-squares solution of `[X 1] Wᵀ = Y` through the normal equations.
fn closed_form(data: &DomainDataset) -> Vec<f64> {
    let (n, d, c) = (data.len(), data.feature_dim(), data.num_classes());
    let k = d + 1;
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k * c];
    for i in 0..n {
        let mut z = data.features().row(i).to_vec();
        z.push(1.0);
        for a in 0..k {
            for b in 0..k {
                gram[a * k + b] += z[a] * z[b];
            }
            rhs[a * c + data.labels()[i]] += z[a];
        }
    }
    // Gauss-Jordan on [gram | rhs]
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| gram[a * k + col].abs().total_cmp(&gram[b * k + col].abs())).unwrap();
        for j in 0..k {
            gram.swap(col * k + j, piv * k + j);
        }
        for j in 0..c {
            rhs.swap(col * c + j, piv * c + j);
        }
        let diag = gram[col * k + col];
        for row in 0..k {
            if row != col {
                let f = gram[row * k + col] / diag;
                for j in 0..k {
                    gram[row * k + j] -= f * gram[col * k + j];
                }
                for j in 0..c {
                    rhs[row * c + j] -= f * rhs[col * c + j];
                }
            }
        }
    }
    // flat layout: weights row-major (class, feature), then biases
    let mut out = vec![0.0; c * d + c];
    for o in 0..c {
        for j in 0..d {
            out[o * d + j] = rhs[j * c + o] / gram[j * k + j];
        }
        out[c * d + o] = rhs[d * c + o] / gram[d * k + d];
    }
    out
}

#[test]
fn full_batch_training_reaches_the_least_squares_solution() {
    let model = LinearLeastSquares::new(3, 2);
    let mut rng = Rng::new(4);
    let target = linear_data(&mut rng, 30, 3, 2);
    let sources = [linear_data(&mut rng, 25, 3, 2), linear_data(&mut rng, 35, 3, 2)];
    let p0 = ParamVector::new(vec![0.0; model.num_params()]);

    let tuned = finetune(&model, &p0, &target, &full_batch(0.3, 4000), &mut rng).unwrap();
    for (a, b) in tuned.iter().zip(closed_form(&target)) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    let refs: Vec<&DomainDataset> = sources.iter().collect();
    let pooled = DomainDataset::concat("pooled", &refs).unwrap();
    let trained = erm(&model, &p0, &refs, 0.3, 10_000, 4000, &mut rng).unwrap();
    for (a, b) in trained.iter().zip(closed_form(&pooled)) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn zero_learning_rate_is_identity() {
    let model = mlp(3, &[5], 2);
    let mut rng = Rng::new(9);
    let p = model.init_params(&mut rng);
    let data = blobs(&mut rng, "t", 12, 3, 2, 0.0);
    let cfg = AlignConfig { alpha: 0.0, batch_size: 4, ..full_batch(0.0, 7) };
    assert!(finetune(&model, &p, &data, &cfg, &mut rng).unwrap().bit_eq(&p));
    assert!(tent_supervised(&model, &p, &data, &cfg, &mut rng).unwrap().bit_eq(&p));
}
