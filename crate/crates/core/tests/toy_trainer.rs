use mmshift::ft::{Method, MethodConfig};
use mmshift::toy::{self, evaluate, fine_tune, pretrain, run_benchmark, SyntheticTask, ToyError};

fn small_task(seed: u64) -> SyntheticTask {
    let mut t = SyntheticTask::question_shift(seed);
    t.n_pretrain = 1000;
    t.pretrain_epochs = 10;
    t.n_test = 300;
    t
}

#[test]
fn l2sp_with_zero_lambda_is_vanilla() {
    let task = small_task(2);
    let pre = pretrain(&task).unwrap();
    let vanilla = fine_tune(&task, &pre, &MethodConfig::new(Method::VanillaFT), 8, 0.1).unwrap();
    let l2sp = fine_tune(&task, &pre, &MethodConfig::new(Method::L2SP).with_lambda(0.0), 8, 0.1).unwrap();
    assert_eq!(vanilla.model, l2sp.model);
    assert_eq!(vanilla.id_acc, l2sp.id_acc);
    assert_eq!(vanilla.ood_acc, l2sp.ood_acc);
}

#[test]
fn l2sp_huge_lambda_stays_at_anchor() {
    let task = small_task(2);
    let pre = pretrain(&task).unwrap();
    let out = fine_tune(&task, &pre, &MethodConfig::new(Method::L2SP).with_lambda(1e6), 8, 0.1).unwrap();
    assert!(out.max_deviation() < 1e-3, "{}", out.max_deviation());
}

#[test]
fn l2sp_deviation_shrinks_with_lambda() {
    let task = small_task(4);
    let pre = pretrain(&task).unwrap();
    let devs: Vec<f64> = [0.0, 0.1, 1.0, 10.0]
        .iter()
        .map(|&l| {
            fine_tune(&task, &pre, &MethodConfig::new(Method::L2SP).with_lambda(l), 8, 0.1)
                .unwrap()
                .total_deviation()
        })
        .collect();
    assert!(devs.windows(2).all(|w| w[1] < w[0]), "{devs:?}");
}

#[test]
fn constrained_methods_respect_their_radius() {
    let task = small_task(6);
    let pre = pretrain(&task).unwrap();
    for m in [Method::TPGM, Method::FTP, Method::SPD] {
        let out = fine_tune(&task, &pre, &MethodConfig::new(m), 8, 0.1).unwrap();
        assert!(out.max_constraint_ratio <= 1.0 + 1e-9, "{m}: {}", out.max_constraint_ratio);
        for (trace, layer) in out.gamma_history.iter().zip(&out.model.layers) {
            assert_eq!(trace.gamma.len(), 8);
            assert!(trace.gamma.iter().all(|g| *g >= 0.0), "{m} {}", layer.name);
        }
    }
}

#[test]
fn wise_endpoints_and_midpoint() {
    let task = small_task(8);
    let pre = pretrain(&task).unwrap();
    let run = |a: f64| fine_tune(&task, &pre, &MethodConfig::new(Method::WiSE).with_alpha(a), 8, 0.1).unwrap();
    let vanilla = fine_tune(&task, &pre, &MethodConfig::new(Method::VanillaFT), 8, 0.1).unwrap();
    let (w0, w5, w1) = (run(0.0), run(0.5), run(1.0));

    assert_eq!(w0.id_acc, evaluate(&pre, &task.id_test_split()));
    assert_eq!(w0.ood_acc[0].1, evaluate(&pre, &task.ood_split(0)));
    assert_eq!(w0.total_deviation(), 0.0);
    assert_eq!(w1.model, vanilla.model);
    assert_eq!(w1.id_acc, vanilla.id_acc);
    for (mid, full) in w5.model.layers.iter().zip(&vanilla.model.layers) {
        let expect = 0.5 * full.deviation_norm();
        assert!((mid.deviation_norm() - expect).abs() <= 1e-12 * (1.0 + expect));
    }
}

#[test]
fn benchmark_is_deterministic() {
    let task = small_task(3);
    let methods: Vec<MethodConfig> = Method::ALL.into_iter().map(MethodConfig::new).collect();
    let a = run_benchmark(&task, &methods, 4, 0.1).unwrap();
    let b = run_benchmark(&task, &methods, 4, 0.1).unwrap();
    assert_eq!(a.table, b.table);
    for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
        let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
        assert_eq!(x.gamma_history, y.gamma_history);
        assert_eq!(x.loss_history, y.loss_history);
    }
}

#[test]
fn seven_method_table() {
    let task = small_task(5);
    let methods: Vec<MethodConfig> = Method::ALL
        .into_iter()
        .filter(|m| *m != Method::TPGM)
        .map(MethodConfig::new)
        .collect();
    assert_eq!(methods.len(), 7);
    let run = run_benchmark(&task, &methods, 3, 0.1).unwrap();
    assert_eq!(run.table.rows.len(), 7);
    assert_eq!(run.table.ood_names, vec!["question", "image"]);
    for row in &run.table.rows {
        assert!(row.error.is_none(), "{}", row.method);
        let id = row.id_acc.unwrap();
        assert!((0.0..=100.0).contains(&id));
        assert_eq!(row.ood_acc.len(), 2);
    }
    assert_eq!(run.table.pretrained.method, "pretrained");
}

#[test]
fn zero_shift_control_matches_id() {
    let task = SyntheticTask::no_shift(11);
    let out = toy::train(&task, &MethodConfig::new(Method::VanillaFT), 20, 0.1).unwrap();
    let gap = (out.id_acc - out.ood_acc[0].1).abs();
    assert!(gap < 2.0, "id {} ood {}", out.id_acc, out.ood_acc[0].1);
}

#[test]
fn divergence_is_reported() {
    let task = small_task(1);
    let pre = pretrain(&task).unwrap();
    let err = fine_tune(&task, &pre, &MethodConfig::new(Method::VanillaFT), 3, 1e308).unwrap_err();
    assert!(matches!(err, ToyError::DivergedLoss { .. }), "{err}");
}

#[test]
fn invalid_arguments() {
    let task = small_task(1);
    let pre = pretrain(&task).unwrap();
    let cfg = MethodConfig::new(Method::VanillaFT);
    assert!(matches!(fine_tune(&task, &pre, &cfg, 0, 0.1), Err(ToyError::InvalidArgument(_))));
    assert!(matches!(fine_tune(&task, &pre, &cfg, 2, -1.0), Err(ToyError::InvalidArgument(_))));
    let bad = MethodConfig::new(Method::WiSE).with_alpha(1.5);
    assert!(matches!(fine_tune(&task, &pre, &bad, 2, 0.1), Err(ToyError::Ft(_))));
}

#[test]
fn linear_probe_only_moves_the_head() {
    let task = small_task(9);
    let pre = pretrain(&task).unwrap();
    let out = fine_tune(&task, &pre, &MethodConfig::new(Method::LinearProbe), 4, 0.1).unwrap();
    for (i, layer) in out.model.layers.iter().enumerate() {
        if i == toy::HEAD {
            assert!(layer.deviation_norm() > 0.0);
        } else {
            assert_eq!(layer.theta, layer.theta0, "{}", layer.name);
        }
    }
}
