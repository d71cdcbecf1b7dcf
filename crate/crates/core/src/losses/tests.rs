use super::*;
use crate::autodiff::fd::{numeric_grad, rel_err};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

fn single(trajs: Vec<Vec<Vec2>>, scores: Vec<f64>) -> Prediction {
    Prediction {
        trajectories: trajs,
        scores,
    }
}

#[test]
fn best_mode_examples() {
    let gt = [0.0, 0.0];
    assert_eq!(best_mode(&[[3.0, 0.0], [1.0, 0.0], [0.0, 2.0]], gt), 1);
    assert_eq!(best_mode(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], gt), 0);
    assert_eq!(best_mode(&[[5.0, 5.0]], gt), 0);
}

#[test]
fn cls_examples() {
    let cfg = LossConfig::default();
    assert!(close(cls_loss(&[vec![0.8, 0.3]], &[0], &cfg).unwrap(), 0.08));
    assert!(close(cls_loss(&[vec![0.5, 0.5]], &[0], &cfg).unwrap(), 0.6));
    assert!(close(cls_loss(&[vec![0.0, 1.0, 0.0]], &[1], &cfg).unwrap(), 0.0));
    assert!(cls_loss(&[vec![0.5, 0.5]], &[2], &cfg).is_err());
}

#[test]
fn regression_examples() {
    let gt1 = Future::fully_observed(vec![[1.0, 1.0]]);
    let p1 = single(vec![vec![[1.5, 1.0]]], vec![1.0]);
    assert!(close(reg_l1(&[p1], &[gt1]).unwrap(), 0.125));

    let gt2 = Future::fully_observed(vec![[0.0, 0.0], [1.0, 0.0]]);
    let p2 = single(vec![vec![[2.0, 0.0], [1.0, 0.0]]], vec![1.0]);
    assert!(close(
        reg_l1(std::slice::from_ref(&p2), std::slice::from_ref(&gt2)).unwrap(),
        0.75
    ));
    let exact = single(vec![gt2.positions.clone()], vec![1.0]);
    assert!(close(reg_l1(&[exact], &[gt2]).unwrap(), 0.0));

    // An invalid step is dropped from both the sum and the count.
    let masked = Future {
        positions: vec![[0.0, 0.0], [9.0, 9.0]],
        validity: vec![true, false],
    };
    let p = single(vec![vec![[0.5, 0.0], [0.0, 0.0]]], vec![1.0]);
    assert!(close(reg_l1(&[p], &[masked]).unwrap(), 0.125));
}

#[test]
fn endpoint_examples() {
    let gt = Future::fully_observed(vec![[0.0, 0.0]]);
    assert!(close(
        reg_endpoint(&[single(vec![vec![[3.0, 4.0]]], vec![1.0])], std::slice::from_ref(&gt)).unwrap(),
        25.0
    ));
    let preds = [
        single(vec![vec![[1.0, 0.0]]], vec![1.0]),
        single(vec![vec![[0.0, 2.0]]], vec![1.0]),
    ];
    assert!(close(reg_endpoint(&preds, &[gt.clone(), gt.clone()]).unwrap(), 2.5));
    assert!(close(
        reg_endpoint(&[single(vec![vec![[0.0, 0.0]]], vec![1.0])], &[gt]).unwrap(),
        0.0
    ));
    // An invalid endpoint skips the agent.
    let open = Future {
        positions: vec![[0.0, 0.0], [0.0, 0.0]],
        validity: vec![true, false],
    };
    let p = single(vec![vec![[1.0, 0.0], [7.0, 7.0]]], vec![1.0]);
    assert!(close(reg_endpoint(&[p], &[open]).unwrap(), 0.0));
}

#[test]
fn allocation_weight_examples() {
    let cfg = LossConfig::default();
    let w = allocation_weights(&[0.0, 2.0], &cfg);
    let e = std::f64::consts::E;
    assert!(close(w[0], e * e / (e * e + e)));
    assert!((w[0] - 0.7311).abs() < 5e-5 && (w[1] - 0.2689).abs() < 5e-5);
    let w = allocation_weights(&[0.0, 1e6], &cfg);
    assert!((w[0] - 0.8808).abs() < 5e-5 && (w[1] - 0.1192).abs() < 5e-5);
    let w = allocation_weights(&[1.5; 4], &cfg);
    assert!(w.iter().all(|v| close(*v, 0.25)));
}

#[test]
fn allocation_regression_reductions() {
    let cfg = LossConfig::default();
    let gt = Future::fully_observed(vec![[0.0, 0.0], [1.0, 1.0]]);
    let one = single(vec![vec![[0.3, -0.2], [2.5, 1.0]]], vec![1.0]);
    assert!(close(
        reg_allocation(std::slice::from_ref(&one), std::slice::from_ref(&gt), &cfg).unwrap(),
        reg_l1(&[one], std::slice::from_ref(&gt)).unwrap()
    ));
    let tr = vec![[0.3, -0.2], [2.5, 1.0]];
    let same = single(vec![tr.clone(), tr.clone(), tr], vec![0.2, 0.3, 0.5]);
    assert!(close(
        reg_allocation(std::slice::from_ref(&same), std::slice::from_ref(&gt), &cfg).unwrap(),
        reg_l1(&[same], &[gt]).unwrap() / 3.0
    ));
}

#[test]
fn total_by_stage() {
    let gt = Future::fully_observed(vec![[0.0, 0.0], [1.0, 0.0]]);
    let perfect = single(vec![gt.positions.clone(), vec![[5.0, 5.0], [6.0, 6.0]]], vec![1.0, 0.0]);
    let warm = LossConfig::default();
    let alloc = warm.with_stage(LossStage::Allocation);
    assert!(close(
        total_loss(std::slice::from_ref(&perfect), std::slice::from_ref(&gt), &warm).unwrap(),
        0.0
    ));
    // The allocation term still weights the far branch.
    assert!(total_loss(&[perfect], std::slice::from_ref(&gt), &alloc).unwrap() > 0.0);
    let exact = single(vec![gt.positions.clone()], vec![1.0]);
    assert!(close(
        total_loss(&[exact], std::slice::from_ref(&gt), &alloc).unwrap(),
        0.0
    ));

    let p = single(
        vec![vec![[0.5, 0.0], [1.0, 2.0]], vec![[3.0, 0.0], [2.0, 0.0]]],
        vec![0.4, 0.6],
    );
    let off = LossConfig {
        alpha: 0.0,
        beta: 0.0,
        ..alloc.clone()
    };
    assert_eq!(
        total_loss(std::slice::from_ref(&p), std::slice::from_ref(&gt), &off).unwrap(),
        total_loss(std::slice::from_ref(&p), std::slice::from_ref(&gt), &warm).unwrap()
    );
    let b = loss_breakdown(&[p], &[gt], &alloc).unwrap();
    assert!(close(b.total, b.cls + b.reg + b.alloc + 0.2 * b.endpoint));
}

#[test]
fn agents_without_targets_are_skipped() {
    let cfg = LossConfig::default().with_stage(LossStage::Allocation);
    let gt = Future::fully_observed(vec![[0.0, 0.0], [1.0, 0.0]]);
    let none = Future {
        positions: vec![[0.0, 0.0]; 2],
        validity: vec![false; 2],
    };
    let a = single(
        vec![vec![[0.5, 0.0], [1.0, 2.0]], vec![[3.0, 0.0], [2.0, 0.0]]],
        vec![0.4, 0.6],
    );
    let b = single(
        vec![vec![[9.0, 9.0], [9.0, 9.0]], vec![[8.0, 8.0], [8.0, 8.0]]],
        vec![0.9, 0.1],
    );
    let alone = loss_breakdown(std::slice::from_ref(&a), std::slice::from_ref(&gt), &cfg).unwrap();
    let with = loss_breakdown(&[a, b], &[gt, none], &cfg).unwrap();
    assert_eq!(alone, with);
}

#[test]
fn config_validation() {
    assert!(LossConfig {
        eta: 0.0,
        ..LossConfig::default()
    }
    .validate()
    .is_err());
    assert!(LossConfig {
        alpha: -1.0,
        ..LossConfig::default()
    }
    .validate()
    .is_err());
    assert_eq!("allocation".parse::<LossStage>().unwrap(), LossStage::Allocation);
    assert!("stage3".parse::<LossStage>().is_err());
}

/// Random trajectories `[K·N, 2F]`, score logits `[N, K]` and targets with
/// some invalid steps.
fn random_case(rng: &mut ChaCha8Rng, n: usize, k: usize, f: usize) -> (Tensor, Tensor, Vec<Future>) {
    let traj = Tensor::matrix(
        n * k,
        2 * f,
        (0..n * k * 2 * f).map(|_| rng.random_range(-3.0..3.0)).collect(),
    );
    let logits = Tensor::matrix(n, k, (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect());
    let targets = (0..n)
        .map(|_| Future {
            positions: (0..f)
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                .collect(),
            validity: (0..f).map(|_| rng.random_bool(0.8)).collect(),
        })
        .collect();
    (traj, logits, targets)
}

fn total_of(traj: &Tensor, logits: &Tensor, targets: &[Future], plan: &LossPlan, cfg: &LossConfig) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(traj.clone());
    let l = t.constant(logits.clone());
    let s = t.row_softmax(l).unwrap();
    let targets: Vec<Option<&Future>> = targets.iter().map(Some).collect();
    loss_with_plan(&mut t, x, s, &targets, plan, cfg)
        .unwrap()
        .breakdown
        .total
}

#[test]
fn gradients_match_finite_differences() {
    // The oracle holds k̂ and the allocation weights at their base-point
    // values, matching their no-gradient contract.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for stage in [LossStage::Warmup, LossStage::Allocation] {
        let cfg = LossConfig::default().with_stage(stage);
        let (traj, logits, targets) = random_case(&mut rng, 3, 4, 5);
        let mut t = Tape::new();
        let x = t.leaf(traj.clone());
        let l = t.leaf(logits.clone());
        let s = t.row_softmax(l).unwrap();
        let refs: Vec<Option<&Future>> = targets.iter().map(Some).collect();
        let plan = LossPlan::new(&traj, &refs, &cfg).unwrap();
        let loss = loss_on_tape(&mut t, x, s, &refs, &cfg).unwrap().total;
        let g = t.backward(loss).unwrap();
        // Hinge and smooth-L1 kinks are not hit at random points.
        let h = 1e-6;
        let nx = numeric_grad(&traj, h, |v| total_of(v, &logits, &targets, &plan, &cfg));
        let nl = numeric_grad(&logits, h, |v| total_of(&traj, v, &targets, &plan, &cfg));
        for (a, b) in g.get(x).unwrap().data().iter().zip(&nx) {
            assert!(rel_err(*a, *b, 1e-8) < 1e-5, "{stage}: {a} vs {b}");
        }
        for (a, b) in g.get(l).unwrap().data().iter().zip(&nl) {
            assert!(rel_err(*a, *b, 1e-8) < 1e-5, "{stage}: {a} vs {b}");
        }
    }
}

#[test]
fn allocation_weights_are_frozen() {
    // d(alloc)/d(traj) is exactly w^k φ'(Δ) / (K·steps), with no term from
    // the dependence of w on the trajectories.
    let cfg = LossConfig::default();
    let only_alloc = LossConfig {
        beta: 0.0,
        stage: LossStage::Allocation,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (traj, _, targets) = random_case(&mut rng, 1, 3, 2);
    let gt = Future::fully_observed(targets[0].positions.clone());
    let refs = [Some(&gt)];
    let grad = |c: &LossConfig| {
        let mut t = Tape::new();
        let x = t.leaf(traj.clone());
        let s = t.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]));
        let total = loss_on_tape(&mut t, x, s, &refs, c).unwrap().total;
        t.backward(total).unwrap().get(x).unwrap().clone()
    };
    let (with, without) = (grad(&only_alloc), grad(&cfg));
    let errors: Vec<f64> = (0..3)
        .map(|m| {
            let r = traj.row(m);
            (r[2] - gt.positions[1][0]).hypot(r[3] - gt.positions[1][1])
        })
        .collect();
    let w = allocation_weights(&errors, &cfg);
    for (m, wm) in w.iter().enumerate() {
        for c in 0..4 {
            let d = traj.row(m)[c] - gt.positions[c / 2][c % 2];
            let expect = wm * d.clamp(-1.0, 1.0) / (3.0 * 2.0);
            let got = with.row(m)[c] - without.row(m)[c];
            assert!((got - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn non_best_branches_get_gradient_only_with_allocation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (traj, logits, targets) = random_case(&mut rng, 1, 4, 3);
        let targets = [Future::fully_observed(targets[0].positions.clone())];
        let refs: Vec<Option<&Future>> = targets.iter().map(Some).collect();
        let ends: Vec<Vec2> = (0..4).map(|m| [traj.row(m)[4], traj.row(m)[5]]).collect();
        let best = best_mode(&ends, targets[0].positions[2]);
        for stage in [LossStage::Warmup, LossStage::Allocation] {
            let mut t = Tape::new();
            let x = t.leaf(traj.clone());
            let l = t.constant(logits.clone());
            let s = t.row_softmax(l).unwrap();
            let loss = loss_on_tape(&mut t, x, s, &refs, &LossConfig::default().with_stage(stage))
                .unwrap()
                .total;
            let g = t.backward(loss).unwrap().get(x).unwrap().clone();
            for m in (0..4).filter(|m| *m != best) {
                let norm: f64 = g.row(m).iter().map(|v| v * v).sum();
                match stage {
                    LossStage::Warmup => assert_eq!(norm, 0.0),
                    LossStage::Allocation => assert!(norm > 0.0),
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn allocation_weights_properties(errors in prop::collection::vec(0.0f64..50.0, 1..8)) {
        let cfg = LossConfig::default();
        let w = allocation_weights(&errors, &cfg);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..errors.len() {
            for j in 0..errors.len() {
                if errors[i] < errors[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
        let ends: Vec<Vec2> = errors.iter().map(|e| [*e, 0.0]).collect();
        let best = best_mode(&ends, [0.0, 0.0]);
        let argmax = (0..w.len()).fold(0, |b, i| if w[i] > w[b] { i } else { b });
        prop_assert_eq!(errors[best], errors[argmax]);
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000, n in 1usize..4, k in 1usize..5, f in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (traj, logits, targets) = random_case(&mut rng, n, k, f);
        let mut t = Tape::new();
        let x = t.constant(traj);
        let l = t.constant(logits);
        let s = t.row_softmax(l).unwrap();
        let refs: Vec<Option<&Future>> = targets.iter().map(Some).collect();
        let b = loss_on_tape(&mut t, x, s, &refs, &LossConfig::default().with_stage(LossStage::Allocation)).unwrap().breakdown;
        for v in [b.cls, b.reg, b.alloc, b.endpoint, b.total] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}
