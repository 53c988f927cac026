//! Set construction, the optimization loop and evaluation harnesses.

mod eval;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Kernel, ResamplePlan, Tensor};
use crate::error::{Error, Result};
use crate::image::{ExposureStack, Image, SceneSets};
use crate::mef_ssim::{LossBreakdown, LossConfig, MefReference, SceneObjective};
use crate::msfnet::{self, forward_graph, stack_tensor, Heads, NetConfig, NetParams, ParamVars};
use crate::synth::CorpusScene;

pub use eval::{
    ablation, brightness_order_report, evaluate, order_preservation, AblationCell, AblationReport, EvalRow,
    EvalTable, OrderReport, PairOrder, PUBLISHED_ABLATION,
};
pub use optim::{cosine_lr, Adam, AdamConfig};

const RATIO_TOLERANCE: f64 = 0.05;

/// How the fused and measurement sets are drawn from a bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// Shortest and longest of a {1, 8, 64} ratio triple are fused; the
    /// middle exposure joins the measurement set.
    One,
    /// Three middle exposures are fused; their darker and brighter
    /// neighbours join the measurement set.
    Two,
}

impl Case {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Case::One),
            2 => Ok(Case::Two),
            _ => Err(Error::InvalidArgument(format!("case must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Case::One => 1,
            Case::Two => 2,
        }
    }

    pub fn fuse_count(self) -> usize {
        match self {
            Case::One => 2,
            Case::Two => 3,
        }
    }

    pub fn make_sets(self, stack: ExposureStack) -> Result<SceneSets> {
        match self {
            Case::One => make_case1_sets(stack),
            Case::Two => make_case2_sets(stack),
        }
    }
}

fn ratio_close(r: f64, target: f64) -> bool {
    (r / target - 1.0).abs() <= RATIO_TOLERANCE
}

/// Finds the first index triple `(i, j, k)` in lexicographic order with
/// `t_j / t_i ≈ 8` and `t_k / t_i ≈ 64` (5% tolerance).
pub fn find_case1_triple(times: &[f64]) -> Option<(usize, usize, usize)> {
    let n = times.len();
    for i in 0..n {
        for j in i + 1..n {
            if !ratio_close(times[j] / times[i], 8.0) {
                continue;
            }
            for k in j + 1..n {
                if ratio_close(times[k] / times[i], 64.0) {
                    return Some((i, j, k));
                }
            }
        }
    }
    None
}

pub fn make_case1_sets(stack: ExposureStack) -> Result<SceneSets> {
    let (i, j, k) = find_case1_triple(stack.times()).ok_or_else(|| {
        Error::InvalidSets(format!(
            "case 1 needs exposures at ratios 1:8:64 (within 5%), got times {:?}",
            stack.times()
        ))
    })?;
    SceneSets::new(stack, vec![i, k], vec![i, j, k])
}

pub fn make_case2_sets(stack: ExposureStack) -> Result<SceneSets> {
    let n = stack.len();
    if n < 5 {
        return Err(Error::InvalidSets(format!(
            "case 2 needs at least 5 exposures, got {n}"
        )));
    }
    let k = (n - 1) / 2;
    SceneSets::new(stack, vec![k - 1, k, k + 1], (k - 2..=k + 2).collect())
}

/// Whether the measurement set extends the fused set or equals it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureSet {
    Decoupled,
    Coupled,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch: usize,
    pub seed: u64,
    pub case: Case,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Adds a loss term at every coarser scale against bicubically
    /// downsampled measurement images.
    pub deep_supervision: bool,
    pub measure: MeasureSet,
}

impl TrainConfig {
    pub fn new(case: Case) -> Self {
        Self {
            epochs: 200,
            lr0: 1e-4,
            batch: 1,
            seed: 0,
            case,
            net: NetConfig {
                inputs: case.fuse_count(),
                ..NetConfig::default()
            },
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            deep_supervision: false,
            measure: MeasureSet::Decoupled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr0));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.net.inputs != self.case.fuse_count() {
            return bad(format!(
                "case {} fuses {} images but the network takes {}",
                self.case.number(),
                self.case.fuse_count(),
                self.net.inputs
            ));
        }
        self.net.validate()?;
        self.loss.validate()?;
        self.adam.validate()
    }

    /// Builds the scene sets this configuration trains on.
    pub fn sets_for(&self, stack: ExposureStack) -> Result<SceneSets> {
        let sets = self.case.make_sets(stack)?;
        Ok(match self.measure {
            MeasureSet::Decoupled => sets,
            MeasureSet::Coupled => sets.coupled(),
        })
    }
}

/// A scene with its network input and loss references precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub name: String,
    pub sets: SceneSets,
    input: Tensor,
    /// `(scale index, objective)`; the finest scale is always present.
    objectives: Vec<(usize, SceneObjective)>,
}

/// Resizes every image of a bracket with a bicubic plan, clamping to [0, 1].
fn resize_stack(stack: &ExposureStack, h: usize, w: usize) -> Result<ExposureStack> {
    let (w0, h0) = stack.dims();
    let plan = ResamplePlan::new(Kernel::Bicubic, h0, w0, h, w);
    let images = stack
        .images()
        .iter()
        .map(|img| {
            let planar = img.to_planar();
            let mut out = vec![0.0; 3 * h * w];
            for c in 0..3 {
                plan.apply(&planar[c * h0 * w0..(c + 1) * h0 * w0], &mut out[c * h * w..(c + 1) * h * w]);
            }
            out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Image::from_planar(w, h, &out)
        })
        .collect::<Result<Vec<_>>>()?;
    ExposureStack::new(images, stack.times().to_vec())
}

impl PreparedScene {
    pub fn new(name: impl Into<String>, sets: SceneSets, cfg: &TrainConfig) -> Result<Self> {
        let name = name.into();
        let wrap = |e: Error| Error::Scene {
            scene: name.clone(),
            source: Box::new(e),
        };
        let fuse: Vec<&Image> = sets.fuse_images().collect();
        let input = stack_tensor(&fuse).map_err(wrap)?;
        let levels = cfg.net.levels;
        let mut objectives = vec![(levels - 1, SceneObjective::new(&sets, &cfg.loss).map_err(wrap)?)];
        if cfg.deep_supervision {
            let (mut w, mut h) = sets.dims();
            for scale in (0..levels - 1).rev() {
                w = w.div_ceil(2);
                h = h.div_ceil(2);
                if w.min(h) < cfg.loss.patch_size {
                    break;
                }
                let small = resize_stack(sets.stack(), h, w).map_err(wrap)?;
                let small_sets = SceneSets::new(small, sets.fuse_idx().to_vec(), sets.measure_idx().to_vec())
                    .map_err(wrap)?;
                objectives.push((scale, SceneObjective::new(&small_sets, &cfg.loss).map_err(wrap)?));
            }
        }
        Ok(Self {
            name,
            sets,
            input,
            objectives,
        })
    }

    fn heads(&self) -> Heads {
        if self.objectives.len() > 1 {
            Heads::All
        } else {
            Heads::Finest
        }
    }
}

/// Builds prepared scenes for `cfg`, naming the first scene that fails.
pub fn prepare(scenes: &[CorpusScene], cfg: &TrainConfig) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| {
            let sets = cfg.sets_for(s.stack.clone()).map_err(|e| Error::Scene {
                scene: s.name.clone(),
                source: Box::new(e),
            })?;
            PreparedScene::new(s.name.clone(), sets, cfg)
        })
        .collect()
}

fn sum_breakdowns(parts: &[LossBreakdown]) -> LossBreakdown {
    let mut out = LossBreakdown {
        loss_s: 0.0,
        loss_w: 0.0,
        total: 0.0,
        mef_ssim: parts[0].mef_ssim,
    };
    for p in parts {
        out.loss_s += p.loss_s;
        out.loss_w += p.loss_w;
        out.total += p.total;
    }
    out
}

/// Total loss of one scene and its gradient for every parameter.
pub fn loss_and_grads(params: &NetParams, scene: &PreparedScene) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let cfg = params.config();
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, params, true)?;
    let x = g.constant(scene.input.clone())?;
    let out = forward_graph(&mut g, &p, cfg, x, scene.heads())?;
    let mut parts = Vec::new();
    let mut terms = Vec::new();
    for (scale, obj) in &scene.objectives {
        let z = out.scales[if scene.heads() == Heads::All { *scale } else { 0 }];
        let [_, _, h, w] = g.value(z).dims4()?;
        let (lb, grad) = obj.evaluate_planar_with_grad(w, h, g.value(z).data())?;
        terms.push(g.external_scalar(z, lb.total, grad)?);
        parts.push(lb);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    let grads = g.backward(loss)?;
    let named = p.iter().map(|(n, &v)| (n.clone(), grads.wrt(v))).collect();
    Ok((sum_breakdowns(&parts), named))
}

/// Total loss of one scene without gradients.
pub fn scene_loss(params: &NetParams, scene: &PreparedScene) -> Result<LossBreakdown> {
    let cfg = params.config();
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, params, false)?;
    let x = g.constant(scene.input.clone())?;
    let out = forward_graph(&mut g, &p, cfg, x, scene.heads())?;
    let parts = scene
        .objectives
        .iter()
        .map(|(scale, obj)| {
            let z = out.scales[if scene.heads() == Heads::All { *scale } else { 0 }];
            obj.evaluate(&msfnet::tensor_to_image(g.value(z))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_breakdowns(&parts))
}

/// Fuses a scene's fused set with the network.
pub fn fuse_scene(params: &NetParams, sets: &SceneSets) -> Result<Image> {
    let fuse: Vec<&Image> = sets.fuse_images().collect();
    msfnet::forward(&fuse, params)
}

/// One record per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_w: f64,
    /// Mean network MEF-SSIM over the validation scenes' measurement sets.
    pub val_mef_ssim: Option<f64>,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: f64,
}

impl TrainReport {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    /// Per-epoch CSV without wall-clock columns, so identical runs give
    /// identical files.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "lr", "loss_total", "loss_s", "loss_w", "val_mef_ssim", "steps"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.lr),
                format!("{:.12}", e.loss_total),
                format!("{:.12}", e.loss_s),
                format!("{:.12}", e.loss_w),
                e.val_mef_ssim.map(|v| format!("{v:.12}")).unwrap_or_default(),
                e.steps.to_string(),
            ])?;
        }
        csv_string(w)
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Mean MEF-SSIM of the network over each scene's measurement set.
pub fn mean_scene_score(params: &NetParams, scenes: &[(SceneSets, MefReference)]) -> Result<f64> {
    let scores = crate::par::map_slice(scenes, |(sets, mef)| {
        let fused = fuse_scene(params, sets)?;
        mef.score(&crate::image::to_luminance(&fused))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Trains from scratch on `train` scenes.
pub fn train(dataset: &[CorpusScene], cfg: &TrainConfig) -> Result<(NetParams, TrainReport)> {
    train_with_validation(dataset, &[], cfg)
}

pub fn train_with_validation(
    dataset: &[CorpusScene],
    validation: &[CorpusScene],
    cfg: &TrainConfig,
) -> Result<(NetParams, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let scenes = prepare(dataset, cfg)?;
    let val = validation
        .iter()
        .map(|s| {
            let sets = cfg.case.make_sets(s.stack.clone()).map_err(|e| Error::Scene {
                scene: s.name.clone(),
                source: Box::new(e),
            })?;
            let mef = MefReference::new(&sets, &cfg.loss)?;
            Ok((sets, mef))
        })
        .collect::<Result<Vec<_>>>()?;
    let params = NetParams::init(&cfg.net, cfg.seed)?;
    train_prepared(params, &scenes, &val, cfg)
}

/// The optimization loop proper, from given initial parameters.
pub fn train_prepared(
    mut params: NetParams,
    scenes: &[PreparedScene],
    validation: &[(SceneSets, MefReference)],
    cfg: &TrainConfig,
) -> Result<(NetParams, TrainReport)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4531);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(scenes.len());
        let mut steps = 0;
        for batch in order.chunks(cfg.batch) {
            let mut acc: Option<BTreeMap<String, Tensor>> = None;
            for &i in batch {
                let (lb, grads) = loss_and_grads(&params, &scenes[i]).map_err(|e| Error::Scene {
                    scene: scenes[i].name.clone(),
                    source: Box::new(e),
                })?;
                parts.push(lb);
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (name, g) in grads {
                            let slot = a.get_mut(&name).expect("same parameter set");
                            slot.data_mut().iter_mut().zip(g.data()).for_each(|(s, v)| *s += v);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("nonempty batch");
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f64;
                grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= k));
            }
            adam.step(&mut params, &grads, lr)?;
            steps += 1;
        }
        let n = parts.len() as f64;
        let val_mef_ssim = if validation.is_empty() {
            None
        } else {
            Some(mean_scene_score(&params, validation)?)
        };
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_total: parts.iter().map(|p| p.total).sum::<f64>() / n,
            loss_s: parts.iter().map(|p| p.loss_s).sum::<f64>() / n,
            loss_w: parts.iter().map(|p| p.loss_w).sum::<f64>() / n,
            val_mef_ssim,
            steps,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Sampled central-difference check of the full network plus total loss on
/// a 16×16 synthetic Case 1 scene: `samples` parameters drawn at random
/// from every tensor. Tensors that start at zero are filled with small
/// random values first, so every path carries gradient. Returns the
/// largest relative error.
pub fn end_to_end_grad_check(seed: u64, samples: usize, net: &NetConfig) -> Result<f64> {
    use rand::Rng;
    let corpus = crate::synth::generate_corpus(&crate::synth::CorpusConfig {
        seed,
        scenes: 1,
        synth: crate::synth::SynthConfig {
            size: 16,
            ..crate::synth::SynthConfig::default()
        },
        ..crate::synth::CorpusConfig::default()
    })?;
    let mut cfg = TrainConfig::new(Case::One);
    cfg.net = NetConfig {
        inputs: Case::One.fuse_count(),
        ..net.clone()
    };
    let scenes = prepare(&corpus, &cfg)?;
    let mut params = NetParams::init(&cfg.net, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    for (_, t) in params.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            let fan_in: usize = t.shape().iter().skip(1).product();
            let bound = 0.5 / (fan_in.max(1) as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
    }
    let (_, grads) = loss_and_grads(&params, &scenes[0])?;
    let names: Vec<&String> = params.tensors().keys().collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let name = names[rng.random_range(0..names.len())];
        let len = params.tensors()[name].len();
        let idx = rng.random_range(0..len);
        let shifted = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let mut t = p.tensors()[name].clone();
            t.data_mut()[idx] += delta;
            p.set(name, t)?;
            Ok(scene_loss(&p, &scenes[0])?.total)
        };
        let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
        worst = worst.max(crate::autodiff::relative_error(grads[name].data()[idx], numeric));
    }
    Ok(worst)
}

/// Seeded 80/10/10 split of `n` items into (train, validation, test)
/// index lists, each sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

#[cfg(test)]
mod tests;
