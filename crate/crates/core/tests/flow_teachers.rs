use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use svarfm::flow_match::{flow_ace, sample_flow, train_cfm, CfmDataset, TrainConfig, VectorField};
use svarfm::rng;
use svarfm::stats;

fn mean_col(m: &DMatrix<f64>, j: usize) -> f64 {
    stats::mean(&m.column(j).iter().copied().collect::<Vec<_>>())
}

/// Sorted-sample 1-Wasserstein distance between equal-size samples.
fn w1(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn constant_shift_teacher() {
    let mut r = rng::rng(1);
    let x1 = DMatrix::from_fn(4000, 1, |_, _| 2.0 + r.sample::<f64, _>(StandardNormal));
    let data = CfmDataset::unconditional(x1).unwrap();
    let (model, report) = train_cfm(&data, &TrainConfig::default()).unwrap();
    assert!(report.final_loss <= report.initial_loss);
    let s = sample_flow(&model, &[], 1000, 100, 7).unwrap();
    let m = mean_col(&s, 0);
    assert!((1.8..=2.2).contains(&m), "{m}");
    let target: Vec<f64> = (0..1000).map(|_| 2.0 + r.sample::<f64, _>(StandardNormal)).collect();
    let dist = w1(s.as_slice(), &target);
    assert!(dist < 0.15, "W1 {dist}");
}

#[test]
fn identity_teacher_with_coupling() {
    let mut r = rng::rng(2);
    let x1 = DMatrix::from_fn(4000, 1, |_, _| r.sample(StandardNormal));
    let data = CfmDataset::unconditional(x1).unwrap();
    let cfg = TrainConfig {
        ot_coupling: true,
        ..Default::default()
    };
    let (model, _) = train_cfm(&data, &cfg).unwrap();
    let x = DMatrix::from_fn(1, 2000, |_, _| r.sample(StandardNormal));
    let mut total = 0.0;
    for k in 0..10 {
        let t = (k as f64 + 0.5) / 10.0;
        total += model.eval(&x, t, &[]).abs().mean();
    }
    let mean_speed = total / 10.0;
    assert!(mean_speed < 0.2, "{mean_speed}");
}

#[test]
fn two_cluster_conditional_teacher() {
    let mut r = rng::rng(3);
    let n = 4000;
    let c = DMatrix::from_fn(n, 1, |_, _| if r.random::<bool>() { 1.0 } else { 0.0 });
    let x1 = DMatrix::from_fn(n, 1, |i, _| 3.0 * c[(i, 0)] + r.sample::<f64, _>(StandardNormal));
    let data = CfmDataset::new(x1, c, vec!["switch".into()]).unwrap();
    let (model, _) = train_cfm(&data, &TrainConfig::default()).unwrap();
    for (cv, want) in [(0.0, 0.0), (1.0, 3.0)] {
        let s = sample_flow(&model, &[cv], 1000, 100, 4).unwrap();
        let m = mean_col(&s, 0);
        assert!((m - want).abs() <= 0.3, "c={cv}: {m}");
    }
}

#[test]
fn linear_teacher_ace() {
    let mut r = rng::rng(4);
    let n = 4000;
    let c = DMatrix::from_fn(n, 1, |_, _| r.random_range(0.0..3.0));
    let x1 = DMatrix::from_fn(n, 1, |i, _| 2.0 * c[(i, 0)] + 0.5 * r.sample::<f64, _>(StandardNormal));
    let data = CfmDataset::new(x1, c, vec!["dose".into()]).unwrap();
    let (model, _) = train_cfm(&data, &TrainConfig::default()).unwrap();
    let ace = flow_ace(&model, &[2.0], &[1.0], 2000, 0, 100, 5).unwrap();
    assert!((1.7..=2.3).contains(&ace.point), "{ace:?}");
}
