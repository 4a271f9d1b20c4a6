//! Gradient checks, accumulation equivalence, the optimizer and the schedule.

use std::sync::Arc;

use endoreport::autograd::Graph;
use endoreport::gradcheck::grad_check;
use endoreport::model::{example_loss, Example, ModelConfig, Stage};
use endoreport::params::ParamStore;
use endoreport::tensor::Tensor;
use endoreport::tokenizer::SpecialIds;
use endoreport::train::{
    accumulate_micro_batch, adam_step, lr_at, prepare_example, train, OptimizerState, TrainConfig, TrainItem,
    TrainProgress, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
use endoreport::vision::{patchify, preprocess, RawImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPECIAL: SpecialIds = SpecialIds {
    bos: 61,
    eos: 62,
    pad: 63,
};

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Arc<RawImage> {
    Arc::new(RawImage::rgb(size, size, (0..size * size * 3).map(|_| rng.random()).collect()))
}

fn random_items(rng: &mut ChaCha8Rng, n: usize, images: usize, size: usize) -> Vec<TrainItem> {
    (0..n)
        .map(|i| TrainItem {
            id: format!("item{i}"),
            images: (0..images).map(|_| random_image(rng, size)).collect(),
            tokens: (0..rng.random_range(1..8)).map(|_| rng.random_range(0..61)).collect(),
        })
        .collect()
}

#[test]
fn backward_matches_finite_differences_on_tiny_model() {
    let cfg = ModelConfig::tiny(64);
    let mut params: ParamStore<f64> = cfg.init_params(17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let two = random_items(&mut rng, 1, 2, 32).remove(0);
    let one = random_items(&mut rng, 1, 1, 32).remove(0);
    let ex2: Example<f64> = prepare_example(&two, &cfg).unwrap();
    let ex1: Example<f64> = prepare_example(&one, &cfg).unwrap();
    let report = grad_check(
        |g: &mut Graph<f64>| {
            let a = example_loss(g, &ex2, &cfg, Stage::Findings, SPECIAL)?;
            let b = example_loss(g, &ex1, &cfg, Stage::Findings, SPECIAL)?;
            let c = example_loss(g, &ex1, &cfg, Stage::Caption, SPECIAL)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &mut params,
        1e-5,
        240,
        5,
    )
    .unwrap();
    assert!(report.checks.len() >= 200, "{} coordinates", report.checks.len());
    assert_eq!(report.params_covered(), params.len());
    let worst = report.worst().unwrap();
    assert!(report.max_rel_err < 1e-4, "worst coordinate {worst:?}");
}

/// Relative difference with a floor at `1e-6 * scale`, where `scale` is the
/// largest magnitude anywhere in the store being compared.
fn max_rel_diff(a: &[f64], b: &[f64], scale: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / x.abs().max(y.abs()).max(1e-6 * scale)
            }
        })
        .fold(0.0, f64::max)
}

#[test]
fn micro_batches_accumulate_to_the_full_batch_gradient() {
    let cfg = ModelConfig::tiny(64);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let items = random_items(&mut rng, 32, 1, 32);
    let examples: Vec<Example<f64>> = items.iter().map(|it| prepare_example(it, &cfg).unwrap()).collect();
    let init: ParamStore<f64> = cfg.init_params(23).unwrap();

    let mut whole = init.clone();
    accumulate_micro_batch(&mut whole, &examples, &cfg, Stage::Caption, SPECIAL, 1.0).unwrap();
    let mut parts = init.clone();
    for ex in &examples {
        accumulate_micro_batch(&mut parts, std::slice::from_ref(ex), &cfg, Stage::Caption, SPECIAL, 1.0 / 32.0).unwrap();
    }
    let gscale = whole.entries().iter().flat_map(|e| e.grad.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = gscale;
    for (a, b) in whole.entries().iter().zip(parts.entries()) {
        let d = max_rel_diff(a.grad.data(), b.grad.data(), scale);
        assert!(d < 1e-10, "{}: gradient differs by {d:e}", a.name);
    }

    // The same through the training loop: one update either way.
    let run = |micro: usize, accum: usize| {
        let mut p = init.clone();
        let mut opt = OptimizerState::new(&p);
        let tc = TrainConfig {
            micro_batch: micro,
            accum_steps: accum,
            epochs: 1,
            select_best_val: false,
            ..TrainConfig::stage1()
        };
        let rep = train(&mut p, &mut opt, TrainProgress::start(), &items, &[], &cfg, &tc, SPECIAL, &mut |_| Ok(())).unwrap();
        assert_eq!(rep.curve.len(), 1);
        (p, rep.curve[0].loss)
    };
    let (a, la) = run(32, 1);
    let (b, lb) = run(1, 32);
    let scale = a
        .entries()
        .iter()
        .zip(init.entries())
        .flat_map(|(x, base)| x.value.data().iter().zip(base.value.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0f64, f64::max);
    assert!((la - lb).abs() <= 1e-10 * la.abs());
    // A first Adam step is about lr * g / (|g| + eps), so rounding noise of a
    // few ulps of the largest gradient on a coordinate whose true gradient is
    // zero moves its update by up to lr * noise / eps.
    let noise_floor = scale * 1e-15 * gscale / ADAM_EPS;
    for ((x, y), base) in a.entries().iter().zip(b.entries()).zip(init.entries()) {
        for ((p, q), o) in x.value.data().iter().zip(y.value.data()).zip(base.value.data()) {
            let (dx, dy) = (p - o, q - o);
            let tol = 1e-10 * dx.abs().max(dy.abs()) + noise_floor;
            assert!((dx - dy).abs() <= tol, "{}: update {dx:e} vs {dy:e}", x.name);
        }
    }
}

#[test]
fn adam_follows_the_reference_recurrence_on_a_quadratic() {
    let mut params = ParamStore::<f64>::new();
    params.insert("w", Tensor::from_f64(&[2], &[1.5, -0.5]).unwrap()).unwrap();
    let mut state = OptimizerState::new(&params);
    let lr = 0.1;
    let (mut w, mut m, mut v) = ([1.5f64, -0.5], [0.0f64; 2], [0.0f64; 2]);
    for t in 1..=10 {
        let cur = params.get("w").unwrap().data().to_vec();
        params.entries_mut()[0].grad = Tensor::from_f64(&[2], &[2.0 * cur[0], 2.0 * cur[1]]).unwrap();
        adam_step(&mut params, &mut state, lr).unwrap();
        for j in 0..2 {
            let g = 2.0 * w[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[j] / (1.0 - ADAM_BETA1.powi(t));
            let vh = v[j] / (1.0 - ADAM_BETA2.powi(t));
            w[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        let got = params.get("w").unwrap().data();
        for j in 0..2 {
            assert!((got[j] - w[j]).abs() <= 1e-14 * w[j].abs().max(1.0));
        }
        assert!(params.entries()[0].grad.data().iter().all(|&g| g == 0.0));
    }
    // First Adam steps move by about lr per step toward zero.
    assert!(w[0].abs() < 1.5 && w[1].abs() < 0.5);
}

#[test]
fn adam_rejects_non_finite_gradients_without_side_effects() {
    let mut params = ParamStore::<f64>::new();
    params.insert("a", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
    params.insert("b", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
    params.entries_mut()[0].grad = Tensor::from_f64(&[1], &[0.5]).unwrap();
    params.entries_mut()[1].grad = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
    let mut state = OptimizerState::new(&params);
    let before = (params.clone(), state.clone());
    assert!(adam_step(&mut params, &mut state, 0.1).is_err());
    assert_eq!(params.get("a"), before.0.get("a"));
    assert_eq!(state, before.1);
}

#[test]
fn loss_falls_steadily_while_overfitting_a_fixed_batch() {
    let cfg = ModelConfig::tiny(64);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let items = random_items(&mut rng, 8, 1, 32);
    let mut params: ParamStore<f64> = cfg.init_params(31).unwrap();
    let mut opt = OptimizerState::new(&params);
    let tc = TrainConfig {
        micro_batch: 8,
        accum_steps: 1,
        epochs: 50,
        peak_lr: 1e-3,
        select_best_val: false,
        ..TrainConfig::stage1()
    };
    let rep = train(&mut params, &mut opt, TrainProgress::start(), &items, &[], &cfg, &tc, SPECIAL, &mut |_| Ok(())).unwrap();
    assert_eq!(rep.curve.len(), 50);
    for w in rep.curve.windows(2) {
        assert!(w[1].loss < w[0].loss, "loss rose at update {}: {} -> {}", w[1].update, w[0].loss, w[1].loss);
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let cfg = ModelConfig::tiny(64);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let items = random_items(&mut rng, 6, 2, 32);
    let tc = TrainConfig {
        micro_batch: 2,
        accum_steps: 1,
        epochs: 3,
        peak_lr: 1e-3,
        select_best_val: false,
        seed: 41,
        ..TrainConfig::stage2()
    };
    let init: ParamStore<f32> = cfg.init_params(41).unwrap();
    let full = || {
        let mut p = init.clone();
        let mut o = OptimizerState::new(&p);
        let r = train(&mut p, &mut o, TrainProgress::start(), &items, &[], &cfg, &tc, SPECIAL, &mut |_| Ok(())).unwrap();
        (p, o, r.curve)
    };
    let (pa, oa, ca) = full();
    let (pb, ob, cb) = full();
    assert_eq!(pa, pb);
    assert_eq!(oa, ob);
    assert_eq!(ca, cb);

    // Stop after the first epoch, then resume from the saved state.
    let mut p = init.clone();
    let mut o = OptimizerState::new(&p);
    let mut saved = None;
    let _ = train(&mut p, &mut o, TrainProgress::start(), &items, &[], &cfg, &tc, SPECIAL, &mut |e| {
        if e.epoch == 0 {
            saved = Some((e.params.clone(), e.optimizer.clone(), e.progress.clone()));
            return Err(endoreport::Error::Config("interrupted".into()));
        }
        Ok(())
    });
    let (mut p, mut o, progress) = saved.unwrap();
    let r = train(&mut p, &mut o, progress, &items, &[], &cfg, &tc, SPECIAL, &mut |_| Ok(())).unwrap();
    assert_eq!(p, pa);
    assert_eq!(o, oa);
    assert_eq!(r.curve[..], ca[3..]);
}

#[test]
fn overlong_examples_are_rejected() {
    let cfg = ModelConfig::tiny(64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut items = random_items(&mut rng, 1, 1, 32);
    items[0].tokens = vec![1; 20];
    let mut p: ParamStore<f32> = cfg.init_params(1).unwrap();
    let mut o = OptimizerState::new(&p);
    let tc = TrainConfig::stage1();
    assert!(train(&mut p, &mut o, TrainProgress::start(), &items, &[], &cfg, &tc, SPECIAL, &mut |_| Ok(())).is_err());

    let img = preprocess::<f32>(&items[0].images[0], &cfg.encoder).unwrap();
    assert_eq!(patchify(&img, &cfg.encoder).unwrap().shape(), &[4, 768]);
}

#[test]
fn schedule_anchors() {
    let cfg = TrainConfig::stage1();
    let total = 1000;
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    assert!(rel(lr_at(0, total, &cfg).unwrap(), 6e-4 / 50.0) < 1e-12);
    assert!(rel(lr_at(49, total, &cfg).unwrap(), 6e-4) < 1e-12);
    assert!(rel(lr_at(525, total, &cfg).unwrap(), 3.3e-4) < 1e-12);
    let last = lr_at(999, total, &cfg).unwrap();
    let closed = 6e-5 + 0.5 * 5.4e-4 * (1.0 + (std::f64::consts::PI * 949.0 / 950.0).cos());
    assert!(rel(last, closed) < 1e-12);
    assert!(rel(last, 6e-5) < 1e-4);
    assert!(lr_at(1000, total, &cfg).is_err());
}

proptest! {
    #[test]
    fn schedule_is_continuous_and_then_non_increasing(
        total in 2usize..5000,
        warmup in 0.01f64..0.5,
        floor in 0.01f64..1.0,
        peak in 1e-6f64..1e-1,
    ) {
        let cfg = TrainConfig { warmup_frac: warmup, lr_floor_frac: floor, peak_lr: peak, ..TrainConfig::stage1() };
        let w = (warmup * total as f64).ceil() as usize;
        prop_assume!(w < total);
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(s, total, &cfg).unwrap()).collect();
        prop_assert!((lrs[w - 1] - peak).abs() <= 1e-12 * peak);
        prop_assert!((lrs[w] - peak).abs() <= 1e-12 * peak);
        for s in 1..w {
            prop_assert!(lrs[s] > lrs[s - 1]);
        }
        for s in w + 1..total {
            prop_assert!(lrs[s] <= lrs[s - 1]);
        }
        for &l in &lrs {
            prop_assert!(l > 0.0 && l <= peak * (1.0 + 1e-12));
            prop_assert!(l >= floor * peak * (1.0 - 1e-12) || lrs.iter().position(|&x| x == l).unwrap() < w);
        }
    }
}
