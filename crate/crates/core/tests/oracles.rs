mod support;

use fuselab::image::{ExposureStack, Image, SceneSets};
use fuselab::mef_ssim::{loss_w, mef_ssim_index, LossConfig};
use fuselab::msfnet::NetParams;
use fuselab::pyramid::{default_levels, mertens_fuse, mertens_fuse_unclamped};
use fuselab::synth::{generate_corpus, CorpusConfig};
use fuselab::training::{fuse_scene, Case, TrainConfig};
use proptest::prelude::*;

fn stack_from(data: Vec<Vec<f64>>, w: usize, h: usize) -> ExposureStack {
    let times = (0..data.len()).map(|i| 2f64.powi(i as i32)).collect();
    let images = data.into_iter().map(|d| Image::new(w, h, d).unwrap()).collect();
    ExposureStack::new(images, times).unwrap()
}

fn stack_strategy() -> impl Strategy<Value = (ExposureStack, Image)> {
    (1usize..=4, 8usize..=20, 8usize..=20).prop_flat_map(|(k, w, h)| {
        let n = w * h * 3;
        (
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, n), k),
            proptest::collection::vec(0.0f64..1.0, n),
        )
            .prop_map(move |(imgs, fused)| (stack_from(imgs, w, h), Image::new(w, h, fused).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_match_loop_oracle((stack, fused) in stack_strategy()) {
        let k = stack.len();
        let sets = SceneSets::new(stack, vec![0], (0..k).collect()).unwrap();
        let images: Vec<&Image> = sets.measure_images().collect();
        let score = mef_ssim_index(&sets, &fused, &LossConfig::default()).unwrap();
        prop_assert!((score - support::mef_ssim(&images, &fused)).abs() < 1e-9);
        let lw = loss_w(&sets, &fused).unwrap();
        prop_assert!((lw - support::loss_w(&images, &fused)).abs() < 1e-9);
    }

    #[test]
    fn mertens_matches_loop_oracle((stack, _) in stack_strategy()) {
        let (w, h) = stack.dims();
        let sets = SceneSets::all(stack);
        let images: Vec<&Image> = sets.fuse_images().collect();
        let levels = default_levels(w, h);
        let fused = mertens_fuse_unclamped(&sets, levels).unwrap();
        let oracle = support::mertens(&images, levels);
        for c in 0..3 {
            prop_assert!(support::max_abs_diff(&support::grid_of(&fused[c]), &oracle[c]) < 1e-6);
        }
    }
}

#[test]
fn untrained_network_scores_below_mertens() {
    let scenes = generate_corpus(&CorpusConfig {
        scenes: 4,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig::new(Case::One);
    let mut below = 0;
    let mut total = 0;
    for seed in 0..20 {
        let params = NetParams::init(&cfg.net, seed).unwrap();
        for s in &scenes {
            let sets = cfg.sets_for(s.stack.clone()).unwrap();
            let net = mef_ssim_index(&sets, &fuse_scene(&params, &sets).unwrap(), &cfg.loss).unwrap();
            let (w, h) = sets.dims();
            let mertens = mertens_fuse(&sets, default_levels(w, h)).unwrap();
            let base = mef_ssim_index(&sets, &mertens, &cfg.loss).unwrap();
            below += usize::from(net < base);
            total += 1;
        }
    }
    assert_eq!(below, total);
}
