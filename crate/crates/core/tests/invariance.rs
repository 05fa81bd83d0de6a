use irm_core::invariance::*;
use irm_core::numkit::{gaussian_matrix, Matrix, Rng};
use irm_core::sem::{example1_moments, sample_example1, Dataset, Example1Spec, Moments};
use proptest::prelude::*;

fn random_moments(d: usize, rng: &mut Rng) -> Moments {
    let a = gaussian_matrix(d + 3, d, 0.0, 1.0, rng);
    let sxx = a.gram().scale(1.0 / (d + 3) as f64).add_diagonal(0.1);
    let sxy = (0..d).map(|_| rng.standard_normal()).collect();
    Moments { sxx, sxy, syy: 3.0 }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn d_lin_gradient_matches_finite_differences(seed in any::<u64>(), p in 1usize..4, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let m = random_moments(d, &mut rng);
        let phi = gaussian_matrix(p, d, 0.0, 1.0, &mut rng);
        let w: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
        let grad = d_lin(&w, &LinearRepresentation::new(phi.clone()).unwrap(), &m).unwrap().gradient.unwrap();
        let h = 1e-5;
        for k in 0..p * d {
            let mut plus = phi.clone().into_vec();
            let mut minus = plus.clone();
            plus[k] += h;
            minus[k] -= h;
            let f = |data: Vec<f64>| {
                d_lin(&w, &LinearRepresentation::new(Matrix::new(p, d, data).unwrap()).unwrap(), &m).unwrap().value
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            prop_assert!(rel_err(grad[k], fd) < 1e-5 || (grad[k] - fd).abs() < 1e-7, "k={k} {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn linear_penalty_is_four_times_d_lin(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let m = random_moments(d, &mut rng);
        let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let pen = irm_penalty_linear(&v, &m).value;
        let dl = d_lin(&[1.0], &LinearRepresentation::row(&v).unwrap(), &m).unwrap().value;
        prop_assert!(rel_err(pen, 4.0 * dl) < 1e-10);
    }

    #[test]
    fn linear_penalty_gradient_matches_finite_differences(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let m = random_moments(d, &mut rng);
        let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let grad = irm_penalty_linear(&v, &m).gradient.unwrap();
        let h = 1e-5;
        for k in 0..d {
            let mut a = v.clone();
            let mut b = v.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (irm_penalty_linear(&a, &m).value - irm_penalty_linear(&b, &m).value) / (2.0 * h);
            prop_assert!(rel_err(grad[k], fd) < 1e-5 || (grad[k] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn sample_penalty_matches_moment_form(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let x = gaussian_matrix(50, d, 0.0, 1.0, &mut rng);
        let y: Vec<f64> = (0..50).map(|_| rng.standard_normal()).collect();
        let data = Dataset::new(x, y, "e").unwrap();
        let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let from_outputs = irm_penalty(&LinearRepresentation::row(&v).unwrap(), &data, Loss::Squared).unwrap().value;
        let from_moments = irm_penalty_linear(&v, &data.moments()).value;
        prop_assert!(rel_err(from_outputs, from_moments) < 1e-9);
    }

    #[test]
    fn d_lin_vanishes_exactly_at_optimal_classifier(seed in any::<u64>(), p in 1usize..4, d in 1usize..5) {
        prop_assume!(p <= d);
        let mut rng = Rng::new(seed);
        let m = random_moments(d, &mut rng);
        let phi = LinearRepresentation::new(gaussian_matrix(p, d, 0.0, 1.0, &mut rng)).unwrap();
        let opt = optimal_classifier(&phi, &m, 0.0).unwrap();
        prop_assert!(d_lin(&opt, &phi, &m).unwrap().value < 1e-16);
        // the risk in w is a convex quadratic; minimizing it numerically by
        // conjugate gradients must land on the same zero of d_lin
        let gram = phi.phi().matmul(&m.sxx).unwrap().matmul(&phi.phi().transpose()).unwrap();
        let b = phi.phi().matvec(&m.sxy).unwrap();
        let mut w = vec![0.0; p];
        let mut r = b.clone();
        let mut dir = r.clone();
        for _ in 0..4 * p {
            let rr: f64 = r.iter().map(|x| x * x).sum();
            if rr < 1e-30 {
                break;
            }
            let gd = gram.matvec(&dir).unwrap();
            let alpha = rr / dir.iter().zip(&gd).map(|(a, c)| a * c).sum::<f64>();
            for k in 0..p {
                w[k] += alpha * dir[k];
                r[k] -= alpha * gd[k];
            }
            let beta = r.iter().map(|x| x * x).sum::<f64>() / rr;
            for k in 0..p {
                dir[k] = r[k] + beta * dir[k];
            }
        }
        prop_assert!(d_lin(&w, &phi, &m).unwrap().value < 1e-12);
        let mut off = opt.clone();
        off[0] += 0.1;
        prop_assert!(d_lin(&off, &phi, &m).unwrap().value > 0.0);
    }
}

#[test]
fn exact_conditional_mean_has_zero_penalty() {
    let mut rng = Rng::new(4);
    let x = gaussian_matrix(200, 3, 0.0, 1.0, &mut rng);
    let v = [0.5, -1.0, 2.0];
    let y = x.matvec(&v).unwrap();
    let data = Dataset::new(x, y, "e").unwrap();
    let pen = irm_penalty(&LinearRepresentation::row(&v).unwrap(), &data, Loss::Squared).unwrap();
    assert!(pen.value < 1e-20);
}

#[test]
fn minibatch_with_full_batches_is_the_squared_gradient() {
    let mut rng = Rng::new(8);
    let data = sample_example1(&Example1Spec::new(2.0, 500).unwrap(), &mut rng);
    let model = LinearRepresentation::row(&[0.3, 0.8]).unwrap();
    let full = irm_penalty(&model, &data, Loss::Squared).unwrap().value;
    let mb = irm_penalty_minibatch(&model, &data, &data, Loss::Squared).unwrap();
    assert!(rel_err(full, mb) < 1e-12);
    let logistic = irm_penalty(&model, &data, Loss::Logistic).unwrap().value;
    assert!(rel_err(logistic, irm_penalty_minibatch(&model, &data, &data, Loss::Logistic).unwrap()) < 1e-12);
}

#[test]
fn minibatch_of_zero_model_is_zero() {
    let mut rng = Rng::new(9);
    let data = sample_example1(&Example1Spec::new(1.0, 64).unwrap(), &mut rng);
    let model = LinearRepresentation::row(&[0.0, 0.0]).unwrap();
    let a = data.subset(&(0..32).collect::<Vec<_>>());
    let b = data.subset(&(32..64).collect::<Vec<_>>());
    assert_eq!(irm_penalty_minibatch(&model, &a, &b, Loss::Squared).unwrap(), 0.0);
}

fn monte_carlo(products: &[f64]) -> (f64, f64) {
    let n = products.len() as f64;
    let mean = products.iter().sum::<f64>() / n;
    let var = products.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn minibatch_estimator_is_unbiased_for_the_full_sample_penalty() {
    let mut rng = Rng::new(21);
    let data = sample_example1(&Example1Spec::new(1.0, 2000).unwrap(), &mut rng);
    let model = LinearRepresentation::row(&[0.4, 0.7]).unwrap();
    let full = irm_penalty(&model, &data, Loss::Squared).unwrap().value;
    let b = 16;
    let products: Vec<f64> = (0..10_000)
        .map(|_| {
            let ia: Vec<usize> = (0..b).map(|_| rng.index(data.len())).collect();
            let ib: Vec<usize> = (0..b).map(|_| rng.index(data.len())).collect();
            irm_penalty_minibatch(&model, &data.subset(&ia), &data.subset(&ib), Loss::Squared).unwrap()
        })
        .collect();
    let (mean, se) = monte_carlo(&products);
    assert!((mean - full).abs() <= 3.0 * se, "mean {mean} full {full} se {se}");
    // the plain squared batch gradient is biased upwards by the batch variance
    let squared: Vec<f64> = (0..2000)
        .map(|_| {
            let ia: Vec<usize> = (0..b).map(|_| rng.index(data.len())).collect();
            irm_penalty(&model, &data.subset(&ia), Loss::Squared).unwrap().value
        })
        .collect();
    let (biased, bse) = monte_carlo(&squared);
    assert!(biased - full > 3.0 * bse);
}

#[test]
fn minibatch_estimator_is_unbiased_for_the_population_penalty() {
    let sigma_sq = 1.0;
    let v = [0.4, 0.7];
    let population = irm_penalty_linear(&v, &example1_moments(sigma_sq)).value;
    let model = LinearRepresentation::row(&v).unwrap();
    let mut rng = Rng::new(22);
    let spec = Example1Spec::new(sigma_sq, 32).unwrap();
    let products: Vec<f64> = (0..10_000)
        .map(|_| {
            let batch = sample_example1(&spec, &mut rng);
            let a = batch.subset(&(0..16).collect::<Vec<_>>());
            let b = batch.subset(&(16..32).collect::<Vec<_>>());
            irm_penalty_minibatch(&model, &a, &b, Loss::Squared).unwrap()
        })
        .collect();
    let (mean, se) = monte_carlo(&products);
    assert!((mean - population).abs() <= 3.0 * se, "mean {mean} population {population} se {se}");
}

#[test]
fn landscape_curves() {
    let grid: Vec<f64> = (0..=800).map(|i| -4.0 + 0.01 * i as f64).collect();
    let lin = landscape_sweep(1.0, &grid, Variant::DLin, 1.0).unwrap();
    for r in &lin {
        assert!((r.penalty - r.c * r.c).abs() <= 1e-12);
    }
    let dist = landscape_sweep(1.0, &grid, Variant::DDist, 1.0).unwrap();
    let argmax = dist.iter().max_by(|a, b| a.penalty.partial_cmp(&b.penalty).unwrap()).unwrap();
    let smallest = grid.iter().filter(|c| **c != 0.0).map(|c| c.abs()).fold(f64::INFINITY, f64::min);
    assert!((argmax.c.abs() - smallest).abs() < 1e-9);
    // decays towards 1/4 away from the origin, proportional to 1 + 1/c²
    for r in dist.iter().filter(|r| r.c.abs() > 0.5) {
        assert!((r.penalty - 0.25 * (1.0 + 1.0 / (r.c * r.c))).abs() < 1e-10);
    }
    let at = |v: Variant, c: f64| landscape_sweep(1.0, &[c], v, 1.0).unwrap()[0].penalty;
    assert_eq!(at(Variant::DDist, 0.0), 0.0);
    assert!(at(Variant::DDist, 1e-3) >= 1e3 * at(Variant::DDist, 1.0));
    let ridged_jump = (at(Variant::DDistRidged, 1e-3) - at(Variant::DDistRidged, 0.0)).abs();
    assert!(ridged_jump >= 10.0 * at(Variant::DDistRidged, 1.0));
}

#[test]
fn landscape_csv_layout() {
    let rows = landscape_sweep(2.0, &[0.0, 1.0], Variant::DLin, 1.0).unwrap();
    let mut buf = Vec::new();
    write_landscape_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text, "c,penalty,variant,sigma_sq\n0,0,d_lin,2\n1,4,d_lin,2\n");
}
