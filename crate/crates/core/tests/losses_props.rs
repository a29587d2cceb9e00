use affordance_core::autodiff::gradcheck::{max_rel_error, numeric_grad};
use affordance_core::autodiff::{Graph, Tensor};
use affordance_core::dataset::{ClassCounts, CountGranularity};
use affordance_core::losses::*;
use affordance_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct textbook BCE.
fn bce_ref(x: &[f64], y: &[u8]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&x, &y)| {
            let p = sig(x);
            -(y as f64 * p.ln() + (1 - y) as f64 * (1.0 - p).ln())
        })
        .sum::<f64>()
        / x.len() as f64
}

fn dice_ref(x: &[f64], y: &[u8], eps: f64) -> f64 {
    let s: Vec<f64> = x.iter().map(|&v| sig(v)).collect();
    let inter: f64 = s.iter().zip(y).map(|(a, &b)| a * b as f64).sum();
    let ys: f64 = y.iter().map(|&b| b as f64).sum();
    1.0 - (2.0 * inter + eps) / (s.iter().sum::<f64>() + ys + eps)
}

fn case(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
    (x, y)
}

fn eval<F: for<'g> Fn(affordance_core::autodiff::Var<'g>) -> affordance_core::autodiff::Var<'g>>(
    x: &[f64],
    f: F,
) -> f64 {
    let g = Graph::new();
    f(g.constant(Tensor::new(&[x.len()], x.to_vec()).unwrap())).item()
}

#[test]
fn bce_examples() {
    let zero = vec![0.0; 9];
    for y in [vec![1u8; 9], vec![0u8; 9], vec![1, 0, 1, 0, 1, 0, 1, 0, 1]] {
        let l = eval(&zero, |v| bce_loss(v, &y).unwrap());
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-12);
    }
    let sat = vec![20.0; 10];
    assert!(eval(&sat, |v| bce_loss(v, &[1; 10]).unwrap()) <= 1e-8);
    let (x, y) = case(50, 1);
    assert!((eval(&x, |v| bce_loss(v, &y).unwrap()) - bce_ref(&x, &y)).abs() <= 1e-12);
}

#[test]
fn bce_stays_finite_for_large_logits() {
    let x = [800.0, -800.0, 50.0];
    let l = eval(&x, |v| bce_loss(v, &[0, 1, 1]).unwrap());
    assert!(l.is_finite());
    assert!((l - 1600.0 / 3.0).abs() < 1e-9);
}

#[test]
fn dice_examples() {
    let y: Vec<u8> = (0..20).map(|i| (i < 7) as u8).collect();
    let x: Vec<f64> = y
        .iter()
        .map(|&b| if b == 1 { 40.0 } else { -40.0 })
        .collect();
    assert!(eval(&x, |v| dice_loss(v, &y, 1.0).unwrap()) <= 1e-6);
    let ones = vec![40.0; 100];
    let l = eval(&ones, |v| dice_loss(v, &[0; 100], 1.0).unwrap());
    assert!((l - (1.0 - 1.0 / 101.0)).abs() <= 1e-6);
    assert!((l - 0.990099).abs() <= 1e-6);
    let (x, y) = case(40, 2);
    assert!((eval(&x, |v| dice_loss(v, &y, 1.0).unwrap()) - dice_ref(&x, &y, 1.0)).abs() <= 1e-12);
}

#[test]
fn mask_losses_reject_bad_input() {
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, f64::NAN, 1.0]).unwrap());
    assert!(matches!(
        dice_loss(x, &[1, 0, 1], 1.0),
        Err(Error::NonFinite(_))
    ));
    let x = g.constant(Tensor::zeros(&[3]));
    assert!(bce_loss(x, &[1, 0]).is_err());
    assert!(bce_loss(x, &[1, 0, 2]).is_err());
}

#[test]
fn mask_loss_gradients_match_differences() {
    for seed in 0..4 {
        let (x, y) = case(25, seed);
        let xt = Tensor::new(&[25], x).unwrap();
        for which in 0..2 {
            let f = |t: &Tensor| {
                let g = Graph::new();
                let v = g.constant(t.clone());
                if which == 0 {
                    bce_loss(v, &y).unwrap().item()
                } else {
                    dice_loss(v, &y, 1.0).unwrap().item()
                }
            };
            let g = Graph::new();
            let p = g.param(xt.clone());
            let l = if which == 0 {
                bce_loss(p, &y)
            } else {
                dice_loss(p, &y, 1.0)
            }
            .unwrap();
            g.backward(l).unwrap();
            let e = max_rel_error(&p.grad().unwrap(), &numeric_grad(f, &xt, 1e-5), 1e-7);
            assert!(e <= 1e-4, "seed {seed} loss {which}: {e}");
        }
    }
}

#[test]
fn text_ce_examples() {
    let v = 37;
    let uniform = vec![vec![1.0 / v as f64; v]; 4];
    assert!((text_ce(&uniform, &[0, 5, 36, 2]).unwrap() - (v as f64).ln()).abs() <= 1e-12);
    let mut onehot = vec![vec![0.0; v]; 3];
    for (i, row) in onehot.iter_mut().enumerate() {
        row[i * 3] = 1.0;
    }
    assert_eq!(text_ce(&onehot, &[0, 3, 6]).unwrap(), 0.0);
    assert!(matches!(
        text_ce(&uniform, &[0, 1]),
        Err(Error::Contract(_))
    ));

    // Graph version on logits agrees with the distribution form.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Tensor::randn(&[5, 11], 2.0, &mut rng);
    let targets = [3, 0, 10, 7, 7];
    let dists: Vec<Vec<f64>> = (0..5)
        .map(|r| {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(|x| x.exp() / z).collect()
        })
        .collect();
    let g = Graph::new();
    let l = text_ce_loss(g.constant(logits.clone()), &targets)
        .unwrap()
        .item();
    assert!((l - text_ce(&dists, &targets).unwrap()).abs() <= 1e-12);
    assert!(matches!(
        text_ce_loss(g.constant(logits), &targets[..4]),
        Err(Error::Contract(_))
    ));
}

fn counts(per: &[(&str, u64)], bg: u64) -> ClassCounts {
    ClassCounts {
        granularity: CountGranularity::Dataset,
        per_class: per.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        background: bg,
    }
}

#[test]
fn omega_ratios_are_exact() {
    let c = counts(&[("grasp", 1296), ("cut", 81), ("sit", 16)], 200);
    assert_eq!(unbalanced_weight("grasp", &c).unwrap(), 1.0);
    assert_eq!(unbalanced_weight("cut", &c).unwrap(), 2.0);
    assert_eq!(unbalanced_weight("sit", &c).unwrap(), 3.0);
    // Background takes part in the max but gets no weight of its own.
    let c = counts(&[("grasp", 100)], 1600);
    assert_eq!(unbalanced_weight("grasp", &c).unwrap(), 2.0);
    let t = unbalanced_table(&c).unwrap();
    assert_eq!(t.len(), 1);
    assert!(unbalanced_weight("none", &c).is_err());
    assert!(matches!(
        unbalanced_weight("z", &counts(&[("z", 0)], 4)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn stage1_is_the_weighted_sum() {
    let (x, y) = case(30, 7);
    let only_bce = LossWeights {
        lambda2: 0.0,
        ..Default::default()
    };
    let only_dice = LossWeights {
        lambda1: 0.0,
        ..Default::default()
    };
    let b = eval(&x, |v| stage1_loss(v, &y, 1, &only_bce).unwrap());
    let d = eval(&x, |v| stage1_loss(v, &y, 1, &only_dice).unwrap());
    assert!((b - bce_ref(&x, &y)).abs() <= 1e-12);
    assert!((d - dice_ref(&x, &y, 1.0)).abs() <= 1e-12);
    let both = eval(&x, |v| {
        stage1_loss(v, &y, 1, &LossWeights::default()).unwrap()
    });
    assert!((both - b - d).abs() <= 1e-12);
    // Batched form averages the per-sample values.
    let (x2, y2) = case(30, 8);
    let xs = [x.clone(), x2.clone()].concat();
    let ys = [y.clone(), y2.clone()].concat();
    let batched = eval(&xs, |v| {
        stage1_loss(v, &ys, 2, &LossWeights::default()).unwrap()
    });
    let expect =
        (bce_ref(&x, &y) + dice_ref(&x, &y, 1.0) + bce_ref(&x2, &y2) + dice_ref(&x2, &y2, 1.0))
            / 2.0;
    assert!((batched - expect).abs() <= 1e-12);
}

struct Batch {
    text: Tensor,
    targets: Vec<usize>,
    x: Vec<f64>,
    y: Vec<u8>,
    n: usize,
}

fn batch(seed: u64, b: usize, n: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = case(b * n, seed + 100);
    Batch {
        text: Tensor::randn(&[6, 9], 1.0, &mut rng),
        targets: (0..6).map(|_| rng.random_range(0..9)).collect(),
        x,
        y,
        n,
    }
}

fn s2(bt: &Batch, omegas: &[f64], w: &LossWeights) -> (f64, f64, f64) {
    let g = Graph::new();
    let l = stage2_loss(
        g.constant(bt.text.clone()),
        &bt.targets,
        g.constant(Tensor::new(&[bt.x.len()], bt.x.clone()).unwrap()),
        &bt.y,
        omegas,
        w,
    )
    .unwrap();
    (l.total.item(), l.text, l.mask)
}

#[test]
fn stage2_matches_per_sample_oracle() {
    let bt = batch(3, 3, 20);
    let om = [1.0, 2.0, 1.5];
    let w = LossWeights {
        lambda_txt: 0.7,
        lambda_mask: 1.3,
        lambda_bce: 0.4,
        lambda_dice: 2.0,
        ..Default::default()
    };
    let (total, text, mask) = s2(&bt, &om, &w);
    let mut expect = 0.0;
    for (i, o) in om.iter().enumerate() {
        let (xs, ys) = (
            &bt.x[i * bt.n..(i + 1) * bt.n],
            &bt.y[i * bt.n..(i + 1) * bt.n],
        );
        expect += o * (0.4 * bce_ref(xs, ys) + 2.0 * dice_ref(xs, ys, 1.0));
    }
    expect /= 3.0;
    assert!((mask - expect).abs() <= 1e-12);
    assert!((total - (0.7 * text + 1.3 * mask)).abs() <= 1e-12);
}

#[test]
fn stage2_omega_scales_the_mask_term() {
    let bt = batch(4, 2, 16);
    let w = LossWeights::default();
    let (_, t1, m1) = s2(&bt, &[1.0, 1.0], &w);
    let (_, t2, m2) = s2(&bt, &[2.0, 2.0], &w);
    assert_eq!(t1, t2);
    assert!((m2 - 2.0 * m1).abs() <= 1e-12);
}

#[test]
fn stage2_gradient_matches_differences() {
    let bt = batch(5, 2, 12);
    let om = [1.0, 3.0];
    let w = LossWeights::default();
    let xt = Tensor::new(&[bt.x.len()], bt.x.clone()).unwrap();
    let g = Graph::new();
    let tp = g.param(bt.text.clone());
    let xp = g.param(xt.clone());
    let l = stage2_loss(tp, &bt.targets, xp, &bt.y, &om, &w).unwrap();
    g.backward(l.total).unwrap();
    let fx = |t: &Tensor| {
        let g = Graph::new();
        stage2_loss(
            g.constant(bt.text.clone()),
            &bt.targets,
            g.constant(t.clone()),
            &bt.y,
            &om,
            &w,
        )
        .unwrap()
        .total
        .item()
    };
    let ft = |t: &Tensor| {
        let g = Graph::new();
        stage2_loss(
            g.constant(t.clone()),
            &bt.targets,
            g.constant(xt.clone()),
            &bt.y,
            &om,
            &w,
        )
        .unwrap()
        .total
        .item()
    };
    assert!(max_rel_error(&xp.grad().unwrap(), &numeric_grad(fx, &xt, 1e-5), 1e-7) <= 1e-4);
    assert!(max_rel_error(&tp.grad().unwrap(), &numeric_grad(ft, &bt.text, 1e-5), 1e-7) <= 1e-4);
}

#[test]
fn weight_config_validation() {
    assert!(LossWeights::default().check().is_ok());
    assert!(LossWeights {
        lambda_bce: 0.0,
        lambda_dice: 0.0,
        ..Default::default()
    }
    .check()
    .is_err());
    assert!(LossWeights {
        lambda_txt: -1.0,
        ..Default::default()
    }
    .check()
    .is_err());
}

proptest! {
    #[test]
    fn losses_nonnegative_and_bounded(seed in 0u64..10_000, n in 1usize..40, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        let b = eval(&x, |v| bce_loss(v, &y).unwrap());
        let d = eval(&x, |v| dice_loss(v, &y, 1.0).unwrap());
        prop_assert!(b >= 0.0 && b.is_finite());
        prop_assert!(d >= 0.0 && d < 1.0);
    }

    #[test]
    fn stage2_linear_in_lambdas(seed in 0u64..1000, a in 0.1f64..4.0, c in 0.1f64..4.0) {
        let bt = batch(seed, 2, 8);
        let om = [1.0, 2.0];
        let base = LossWeights::default();
        let (t0, text, mask) = s2(&bt, &om, &base);
        let (t1, _, _) = s2(&bt, &om, &LossWeights { lambda_txt: a, lambda_mask: c, ..base.clone() });
        prop_assert!((t0 - text - mask).abs() <= 1e-12);
        prop_assert!((t1 - (a * text + c * mask)).abs() <= 1e-10);
    }
}
