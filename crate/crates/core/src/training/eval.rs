use std::fmt::Write as _;

use super::{csv_string, fuse_scene, train_with_validation, TrainConfig};
use crate::error::{Error, Result};
use crate::image::{to_luminance, Image, SceneSets};
use crate::mef_ssim::MefReference;
use crate::msfnet::NetParams;
use crate::par;
use crate::pyramid::{default_levels, mertens_fuse};
use crate::synth::CorpusScene;

const CLIP_LOW: f64 = 0.02;
const CLIP_HIGH: f64 = 0.98;
const ORDER_MARGIN: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub scene: String,
    pub net: f64,
    pub mertens: f64,
}

/// Per-scene MEF-SSIM of the network and of pyramid fusion, both scored
/// over the measurement set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub mean_net: f64,
    pub mean_mertens: f64,
}

impl EvalTable {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len() as f64;
        let mean_net = rows.iter().map(|r| r.net).sum::<f64>() / n;
        let mean_mertens = rows.iter().map(|r| r.mertens).sum::<f64>() / n;
        Self {
            rows,
            mean_net,
            mean_mertens,
        }
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.scene.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  {:>8}  {:>8}\n", "scene", "msfnet", "mertens");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>8.4}  {:>8.4}", r.scene, r.net, r.mertens);
        }
        let _ = writeln!(s, "{:<width$}  {:>8.4}  {:>8.4}", "mean", self.mean_net, self.mean_mertens);
        s
    }

    /// Scene rows followed by a `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scene", "msfnet_mef_ssim", "mertens_mef_ssim"])?;
        for r in &self.rows {
            w.write_record([r.scene.clone(), format!("{:.12}", r.net), format!("{:.12}", r.mertens)])?;
        }
        w.write_record([
            "mean".to_string(),
            format!("{:.12}", self.mean_net),
            format!("{:.12}", self.mean_mertens),
        ])?;
        csv_string(w)
    }
}

/// Scores the network and pyramid fusion on every scene. Scenes are sets
/// built by `cfg.case` (always with the full measurement set).
pub fn evaluate(scenes: &[CorpusScene], params: &NetParams, cfg: &TrainConfig) -> Result<EvalTable> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to evaluate".into()));
    }
    let rows = par::map_slice(scenes, |s| {
        let wrap = |e: Error| Error::Scene {
            scene: s.name.clone(),
            source: Box::new(e),
        };
        let sets = cfg.case.make_sets(s.stack.clone()).map_err(wrap)?;
        let mef = MefReference::new(&sets, &cfg.loss).map_err(wrap)?;
        let net = fuse_scene(params, &sets).map_err(wrap)?;
        let (w, h) = sets.dims();
        let mertens = mertens_fuse(&sets, default_levels(w, h)).map_err(wrap)?;
        Ok(EvalRow {
            scene: s.name.clone(),
            net: mef.score(&to_luminance(&net)).map_err(wrap)?,
            mertens: mef.score(&to_luminance(&mertens)).map_err(wrap)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalTable::from_rows(rows))
}

/// Verdict for one region pair. `a` is the region the inputs show as
/// brighter.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOrder {
    pub brighter: u8,
    pub darker: u8,
    pub fused_brighter: f64,
    pub fused_darker: f64,
    pub preserved: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OrderReport {
    /// Pairs whose order the fused inputs determine.
    pub pairs: Vec<PairOrder>,
    /// Pairs no input could order (both clipped alike or equal).
    pub undetermined: usize,
    /// Pairs the inputs order inconsistently.
    pub conflicting: usize,
}

impl OrderReport {
    pub fn preserved(&self) -> usize {
        self.pairs.iter().filter(|p| p.preserved).count()
    }

    pub fn reversed(&self) -> usize {
        self.pairs.len() - self.preserved()
    }

    /// Preserved fraction of ordered pairs, `None` without any.
    pub fn fraction(&self) -> Option<f64> {
        (!self.pairs.is_empty()).then(|| self.preserved() as f64 / self.pairs.len() as f64)
    }
}

fn region_means(lum: &[f64], labels: &[u8], regions: &[u8]) -> Vec<f64> {
    let mut sum = [0.0f64; 256];
    let mut count = [0usize; 256];
    for (&l, &v) in labels.iter().zip(lum) {
        sum[l as usize] += v;
        count[l as usize] += 1;
    }
    regions
        .iter()
        .map(|&r| sum[r as usize] / count[r as usize] as f64)
        .collect()
}

/// Checks whether the fused image keeps the brightness order of labeled
/// regions (label 0 is ignored) that the fused-set inputs establish.
///
/// An input orders a pair when the two region means differ by more than
/// 1/255 and are not both clipped on the same side (below 0.02 or above
/// 0.98). The fused image reverses a pair when its means are ordered the
/// other way by more than 1/255.
pub fn brightness_order_report(sets: &SceneSets, fused: &Image, labels: &[u8]) -> Result<OrderReport> {
    let (w, h) = sets.dims();
    if fused.dims() != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "fused image is {:?}, scene {w}x{h}",
            fused.dims()
        )));
    }
    if labels.len() != w * h {
        return Err(Error::DimensionMismatch(format!(
            "label map has {} entries for {w}x{h}",
            labels.len()
        )));
    }
    let mut present = [false; 256];
    labels.iter().for_each(|&l| present[l as usize] = true);
    let regions: Vec<u8> = (1..=255u8).filter(|&l| present[l as usize]).collect();
    if regions.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "brightness order needs at least two labeled regions, found {}",
            regions.len()
        )));
    }
    let inputs: Vec<Vec<f64>> = sets
        .fuse_images()
        .map(|img| region_means(to_luminance(img).data(), labels, &regions))
        .collect();
    let fused_means = region_means(to_luminance(fused).data(), labels, &regions);
    let clip_side = |v: f64| {
        if v < CLIP_LOW {
            -1
        } else if v > CLIP_HIGH {
            1
        } else {
            0
        }
    };
    let mut report = OrderReport::default();
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            let mut votes = (0, 0);
            for m in &inputs {
                let (a, b) = (m[i], m[j]);
                let (ca, cb) = (clip_side(a), clip_side(b));
                if ca != 0 && ca == cb {
                    continue;
                }
                if a - b > ORDER_MARGIN {
                    votes.0 += 1;
                } else if b - a > ORDER_MARGIN {
                    votes.1 += 1;
                }
            }
            let (hi, lo) = match votes {
                (0, 0) => {
                    report.undetermined += 1;
                    continue;
                }
                (_, 0) => (i, j),
                (0, _) => (j, i),
                _ => {
                    report.conflicting += 1;
                    continue;
                }
            };
            let (fh, fl) = (fused_means[hi], fused_means[lo]);
            report.pairs.push(PairOrder {
                brighter: regions[hi],
                darker: regions[lo],
                fused_brighter: fh,
                fused_darker: fl,
                preserved: fl - fh <= ORDER_MARGIN,
            });
        }
    }
    Ok(report)
}

/// Brightness-order reports of the network on labeled scenes.
pub fn order_preservation(
    scenes: &[CorpusScene],
    params: &NetParams,
    cfg: &TrainConfig,
) -> Result<Vec<(String, OrderReport)>> {
    par::map_slice(scenes, |s| {
        let wrap = |e: Error| Error::Scene {
            scene: s.name.clone(),
            source: Box::new(e),
        };
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| wrap(Error::InvalidArgument("scene has no region labels".into())))?;
        let sets = cfg.case.make_sets(s.stack.clone()).map_err(wrap)?;
        let fused = fuse_scene(params, &sets).map_err(wrap)?;
        Ok((s.name.clone(), brightness_order_report(&sets, &fused, labels).map_err(wrap)?))
    })
    .into_iter()
    .collect()
}

/// Published ablation values as `(multi-scale, L_W, MEF-SSIM)`.
pub const PUBLISHED_ABLATION: [(bool, bool, f64); 3] = [(true, false, 0.9460), (false, true, 0.9452), (true, true, 0.9468)];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub lambda: f64,
    pub levels: usize,
    pub mean_mef_ssim: f64,
}

impl AblationCell {
    fn multi_scale(&self) -> bool {
        self.levels > 1
    }

    fn uses_wae(&self) -> bool {
        self.lambda != 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub full_levels: usize,
    pub full_lambda: f64,
}

impl AblationReport {
    fn cell(&self, multi_scale: bool, wae: bool) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.multi_scale() == multi_scale && c.uses_wae() == wae)
    }

    /// Delta of the full configuration over the cell without `component`.
    pub fn delta(&self, drop_multi_scale: bool, drop_wae: bool) -> Option<f64> {
        let full = self.cell(true, true)?;
        let ablated = self.cell(!drop_multi_scale, !drop_wae)?;
        Some(full.mean_mef_ssim - ablated.mean_mef_ssim)
    }

    pub fn to_text(&self) -> String {
        let yn = |b: bool| if b { "Y" } else { "N" };
        let mut s = String::from("Ablation on the synthetic validation set\n");
        let _ = writeln!(
            s,
            "{:<6} {:<12} {:<5} {:>10} {:>10}",
            "case", "multi-scale", "L_W", "MEF-SSIM", "published"
        );
        for (i, c) in self.cells.iter().enumerate() {
            let published = PUBLISHED_ABLATION
                .iter()
                .find(|(ms, lw, _)| *ms == c.multi_scale() && *lw == c.uses_wae())
                .map(|(_, _, v)| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<6} {:<12} {:<5} {:>10.4} {:>10}",
                i + 1,
                format!("{} (L={})", yn(c.multi_scale()), c.levels),
                format!("{} ({})", yn(c.uses_wae()), c.lambda),
                c.mean_mef_ssim,
                published
            );
        }
        for (label, ms, lw) in [("multi-scale", true, false), ("L_W", false, true)] {
            if let Some(d) = self.delta(ms, lw) {
                let sign = if d > 0.0 { "+" } else if d < 0.0 { "-" } else { "0" };
                let _ = writeln!(s, "delta from {label}: {d:+.4} (sign {sign})");
            }
        }
        s.push_str("published column: reported values on a real dataset, not comparable - different dataset\n");
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["multi_scale", "levels", "l_w", "lambda", "mef_ssim", "published_reference"])?;
        for c in &self.cells {
            let published = PUBLISHED_ABLATION
                .iter()
                .find(|(ms, lw, _)| *ms == c.multi_scale() && *lw == c.uses_wae())
                .map(|(_, _, v)| format!("{v:.4}"))
                .unwrap_or_default();
            w.write_record([
                c.multi_scale().to_string(),
                c.levels.to_string(),
                c.uses_wae().to_string(),
                c.lambda.to_string(),
                format!("{:.12}", c.mean_mef_ssim),
                published,
            ])?;
        }
        csv_string(w)
    }
}

/// Trains the 2×2 grid λ ∈ {0, base λ} × L ∈ {1, base L} with otherwise
/// identical settings and scores each network on `validation`.
pub fn ablation(train: &[CorpusScene], validation: &[CorpusScene], base: &TrainConfig) -> Result<AblationReport> {
    if base.net.levels < 2 || base.loss.lambda == 0.0 {
        return Err(Error::InvalidArgument(
            "ablation needs a multi-scale base network with a nonzero WAE weight".into(),
        ));
    }
    let mut cells = Vec::new();
    for levels in [base.net.levels, 1] {
        for lambda in [base.loss.lambda, 0.0] {
            let mut cfg = base.clone();
            cfg.net.levels = levels;
            cfg.loss.lambda = lambda;
            let (params, _) = train_with_validation(train, &[], &cfg)?;
            let table = evaluate(validation, &params, &cfg)?;
            cells.push(AblationCell {
                lambda,
                levels,
                mean_mef_ssim: table.mean_net,
            });
        }
    }
    Ok(AblationReport {
        cells,
        full_levels: base.net.levels,
        full_lambda: base.loss.lambda,
    })
}
