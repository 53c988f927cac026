use super::*;
use crate::synth::{generate_corpus, CorpusConfig, SynthConfig};
use proptest::prelude::*;

fn flat_stack(times: &[f64]) -> ExposureStack {
    let images = times
        .iter()
        .enumerate()
        .map(|(i, _)| Image::filled(16, 16, [0.1 + 0.1 * i as f64; 3]))
        .collect();
    ExposureStack::new(images, times.to_vec()).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::new(Case::One);
    cfg.net.base_channels = 4;
    cfg.net.levels = 2;
    cfg.epochs = 2;
    cfg.lr0 = 1e-3;
    cfg
}

fn tiny_corpus(n: usize, seed: u64) -> Vec<CorpusScene> {
    generate_corpus(&CorpusConfig {
        seed,
        scenes: n,
        synth: SynthConfig {
            size: 16,
            ..SynthConfig::default()
        },
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn case1_from_one_eight_sixty_four() {
    let sets = make_case1_sets(flat_stack(&[1.0 / 640.0, 1.0 / 80.0, 1.0 / 10.0])).unwrap();
    assert_eq!(sets.fuse_idx(), &[0, 2]);
    assert_eq!(sets.measure_idx(), &[0, 1, 2]);
    assert!(matches!(make_case1_sets(flat_stack(&[1.0, 2.0])), Err(Error::InvalidSets(_))));
    let sets = make_case1_sets(flat_stack(&[1.0, 8.0, 64.0, 512.0])).unwrap();
    assert_eq!(sets.fuse_idx(), &[0, 2]);
    assert_eq!(sets.measure_idx(), &[0, 1, 2]);
}

fn triple_oracle(times: &[f64]) -> Option<(usize, usize, usize)> {
    let close = |r: f64, t: f64| (r - t).abs() <= 0.05 * t;
    let n = times.len();
    let mut all = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i < j && j < k && close(times[j] / times[i], 8.0) && close(times[k] / times[i], 64.0) {
                    all.push((i, j, k));
                }
            }
        }
    }
    all.into_iter().min()
}

proptest! {
    #[test]
    fn case1_triple_search_matches_exhaustive(
        steps in proptest::collection::vec(prop_oneof![Just(2.0), Just(4.0), Just(8.0), Just(1.5), Just(7.9)], 1..7)
    ) {
        let mut times = vec![1.0];
        for s in steps {
            let last = *times.last().unwrap();
            times.push(last * s);
        }
        prop_assert_eq!(find_case1_triple(&times), triple_oracle(&times));
    }
}

#[test]
fn case2_median_window() {
    let sets = make_case2_sets(flat_stack(&[1.0, 2.0, 4.0, 8.0, 16.0])).unwrap();
    assert_eq!(sets.fuse_idx(), &[1, 2, 3]);
    assert_eq!(sets.measure_idx(), &[0, 1, 2, 3, 4]);
    assert!(make_case2_sets(flat_stack(&[1.0, 2.0, 4.0, 8.0])).is_err());
    let seven: Vec<f64> = (0..7).map(|i| 2f64.powi(i)).collect();
    let sets = make_case2_sets(flat_stack(&seven)).unwrap();
    assert_eq!(sets.fuse_idx(), &[2, 3, 4]);
    assert_eq!(sets.measure_idx(), &[1, 2, 3, 4, 5]);
}

#[test]
fn cosine_schedule() {
    assert_eq!(cosine_lr(0, 200, 1e-4), 1e-4);
    assert!((cosine_lr(100, 200, 1e-4) - 5e-5).abs() < 1e-18);
    let last = cosine_lr(199, 200, 1e-4);
    let hand = 1e-4 * 0.5 * (1.0 - (std::f64::consts::PI / 200.0).cos());
    assert!((last - hand).abs() < 1e-20);
    assert!((last - 6.2e-9).abs() < 1e-10);
    let trace: Vec<f64> = (0..200).map(|e| cosine_lr(e, 200, 1e-4)).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
}

fn scalar_map(name: &str, v: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
}

#[test]
fn adam_basics() {
    let mut p = scalar_map("x", 3.0);
    let mut adam = Adam::new(AdamConfig::default());
    adam.step_tensors(&mut p, &scalar_map("x", 0.0), 0.1).unwrap();
    assert_eq!(p["x"].item(), 3.0);

    let mut adam = Adam::new(AdamConfig::default());
    adam.step_tensors(&mut p, &scalar_map("x", 0.37), 0.01).unwrap();
    assert!((p["x"].item() - (3.0 - 0.01)).abs() < 1e-9);

    let bad = BTreeMap::from([("x".to_string(), Tensor::zeros(&[2]))]);
    assert!(adam.step_tensors(&mut p, &bad, 0.01).is_err());
}

#[test]
fn adam_on_quadratic() {
    // f(x) = Σ a_i (x_i - c_i)², minimized from a fixed start.
    let a = [1.0, 4.0, 0.5];
    let c = [0.3, -1.2, 2.0];
    let f = |x: &[f64]| (0..3).map(|i| a[i] * (x[i] - c[i]).powi(2)).sum::<f64>();
    let mut p = BTreeMap::from([("x".to_string(), Tensor::new(&[3], vec![2.0, 1.0, -1.0]).unwrap())]);
    let mut adam = Adam::new(AdamConfig::default());
    let mut trace = vec![f(p["x"].data())];
    for _ in 0..100 {
        let x = p["x"].data().to_vec();
        let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect();
        let grads = BTreeMap::from([("x".to_string(), Tensor::new(&[3], g).unwrap())]);
        adam.step_tensors(&mut p, &grads, 0.01).unwrap();
        trace.push(f(p["x"].data()));
    }
    assert!(trace[10..].windows(2).all(|w| w[1] < w[0]));
    assert!(trace[100] < trace[0]);
}

#[test]
fn one_epoch_one_scene_is_one_step() {
    let corpus = tiny_corpus(1, 1);
    let mut cfg = tiny_cfg();
    cfg.epochs = 1;
    let (params, report) = train(&corpus, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.total_steps(), 1);
    assert_ne!(params, NetParams::init(&cfg.net, cfg.seed).unwrap());
}

#[test]
fn batches_set_step_count() {
    let corpus = tiny_corpus(5, 2);
    let mut cfg = tiny_cfg();
    cfg.batch = 2;
    let (_, report) = train(&corpus, &cfg).unwrap();
    assert!(report.epochs.iter().all(|e| e.steps == 3));
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus(3, 3);
    let val = tiny_corpus(2, 4);
    let cfg = tiny_cfg();
    let (a, ra) = train_with_validation(&corpus, &val, &cfg).unwrap();
    let (b, rb) = train_with_validation(&corpus, &val, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.to_csv().unwrap(), rb.to_csv().unwrap());
    assert!(ra.epochs.iter().all(|e| e.val_mef_ssim.is_some()));
    let lr: Vec<f64> = ra.epochs.iter().map(|e| e.lr).collect();
    assert!(lr.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn failing_scene_is_named() {
    let mut corpus = tiny_corpus(2, 5);
    let bad = corpus[1].stack.images()[..2].to_vec();
    corpus[1].stack = ExposureStack::new(bad, vec![1.0, 2.0]).unwrap();
    let err = train(&corpus, &tiny_cfg()).unwrap_err();
    match err {
        Error::Scene { scene, source } => {
            assert_eq!(scene, corpus[1].name);
            assert!(matches!(*source, Error::InvalidSets(_)));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn config_validation() {
    let mut cfg = tiny_cfg();
    cfg.net.inputs = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_cfg();
    cfg.epochs = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_cfg();
    cfg.lr0 = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn deep_supervision_adds_scales() {
    let corpus = tiny_corpus(1, 6);
    let mut cfg = tiny_cfg();
    cfg.deep_supervision = true;
    let scenes = prepare(&corpus, &cfg).unwrap();
    assert_eq!(scenes[0].objectives.len(), 2);
    let params = NetParams::init(&cfg.net, 0).unwrap();
    let (lb, grads) = loss_and_grads(&params, &scenes[0]).unwrap();
    let plain = scene_loss(&params, &scenes[0]).unwrap();
    assert!((lb.total - plain.total).abs() < 1e-12);
    assert_eq!(grads.len(), params.tensors().len());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let corpus = tiny_corpus(1, 7);
    let cfg = tiny_cfg();
    let scenes = prepare(&corpus, &cfg).unwrap();
    let params = NetParams::init(&cfg.net, 1).unwrap();
    let (_, grads) = loss_and_grads(&params, &scenes[0]).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for name in ["fe.conv1.w", "s1.g1.dab1.conv2.w", "s2.head.b", "s2.g1.half.sa.w"] {
        for idx in [0, 1] {
            let mut plus = params.clone();
            let mut t = plus.get(name).unwrap().clone();
            t.data_mut()[idx] += eps;
            plus.set(name, t).unwrap();
            let mut minus = params.clone();
            let mut t = minus.get(name).unwrap().clone();
            t.data_mut()[idx] -= eps;
            minus.set(name, t).unwrap();
            let num = (scene_loss(&plus, &scenes[0]).unwrap().total - scene_loss(&minus, &scenes[0]).unwrap().total)
                / (2.0 * eps);
            worst = worst.max(crate::autodiff::relative_error(grads[name].data()[idx], num));
        }
    }
    assert!(worst < 1e-3, "{worst:e}");
}

#[test]
fn sampled_end_to_end_check() {
    let net = NetConfig {
        base_channels: 4,
        levels: 2,
        ..NetConfig::default()
    };
    assert!(end_to_end_grad_check(3, 10, &net).unwrap() < 1e-3);
}

#[test]
fn evaluation_table_shape() {
    let corpus = tiny_corpus(3, 8);
    let cfg = tiny_cfg();
    let params = NetParams::init(&cfg.net, 2).unwrap();
    let table = evaluate(&corpus, &params, &cfg).unwrap();
    assert_eq!(table.rows.len(), 3);
    let csv = table.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(table.to_text().lines().last().unwrap().starts_with("mean"));
    for r in &table.rows {
        assert!(r.net > 0.0 && r.net <= 1.0);
        assert!(r.mertens > 0.0 && r.mertens <= 1.0);
    }
    let again = evaluate(&corpus, &params, &cfg).unwrap();
    for (a, b) in table.rows.iter().zip(&again.rows) {
        assert!((a.mertens - b.mertens).abs() <= 1e-9);
    }
}

#[test]
fn order_report_cases() {
    let corpus = generate_corpus(&CorpusConfig {
        scenes: 1,
        synth: SynthConfig {
            size: 32,
            ..SynthConfig::default()
        },
        ..CorpusConfig::default()
    })
    .unwrap();
    let scene = &corpus[0];
    let labels = scene.labels.as_ref().unwrap();
    let sets = make_case1_sets(scene.stack.clone()).unwrap();
    for img in sets.fuse_images() {
        let r = brightness_order_report(&sets, img, labels).unwrap();
        assert!(!r.pairs.is_empty());
        assert_eq!(r.fraction(), Some(1.0));
    }
    assert!(brightness_order_report(&sets, sets.stack().image(0), &labels[1..]).is_err());
    assert!(brightness_order_report(&sets, sets.stack().image(0), &vec![0; labels.len()]).is_err());
}

#[test]
fn constructed_reversal_is_flagged() {
    // Left half "sky" (label 1) bright, right half "tree" (label 2) dark in
    // both inputs; the fused image makes the tree brighter.
    let (w, h) = (16, 16);
    let labels: Vec<u8> = (0..w * h).map(|p| if p % w < w / 2 { 1 } else { 2 }).collect();
    let make = |sky: f64, tree: f64| {
        let data = (0..w * h).flat_map(|p| [if p % w < w / 2 { sky } else { tree }; 3]).collect();
        Image::new(w, h, data).unwrap()
    };
    let stack = ExposureStack::new(vec![make(0.6, 0.1), make(0.9, 0.4)], vec![1.0, 2.0]).unwrap();
    let sets = SceneSets::all(stack);
    let r = brightness_order_report(&sets, &make(0.3, 0.7), &labels).unwrap();
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.reversed(), 1);
    assert_eq!((r.pairs[0].brighter, r.pairs[0].darker), (1, 2));
    assert_eq!(r.fraction(), Some(0.0));
    let ok = brightness_order_report(&sets, &make(0.5, 0.5), &labels).unwrap();
    assert_eq!(ok.fraction(), Some(1.0));
}

#[test]
fn split_is_80_10_10() {
    let (a, b, c) = split_indices(50, 9);
    assert_eq!((a.len(), b.len(), c.len()), (40, 5, 5));
    let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!(split_indices(50, 9), (a, b, c));
}

#[test]
fn ablation_grid_reports() {
    let train = tiny_corpus(2, 10);
    let val = tiny_corpus(2, 11);
    let mut cfg = tiny_cfg();
    cfg.epochs = 1;
    let report = ablation(&train, &val, &cfg).unwrap();
    assert_eq!(report.cells.len(), 4);
    let text = report.to_text();
    for v in ["0.9460", "0.9452", "0.9468", "not comparable"] {
        assert!(text.contains(v), "{text}");
    }
    assert_eq!(report.to_csv().unwrap().lines().count(), 5);
    assert!(report.delta(true, false).is_some() && report.delta(false, true).is_some());
}
