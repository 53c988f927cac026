//! Deterministic synthetic HDR scenes and exposure brackets.
//!
//! Scenes are built in log-radiance space and rescaled so the dynamic range
//! (max over min of all channel values) is exactly the configured ratio.
//! Disk regions carry constant levels at least a factor of two apart with
//! bounded texture, so their per-channel radiance order holds pixelwise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{load_labels, load_manifest, save_image, save_labels, write_manifest, ExposureStack, Image};
use crate::par;

pub const DEFAULT_GAMMA: f64 = 2.2;
pub const DEFAULT_DYNAMIC_RANGE: f64 = 1000.0;
/// Exposure time of the shortest image in generated corpora; the
/// brightest radiance (1.0) then records at 0.7^(1/2.2).
pub const DEFAULT_BASE_TIME: f64 = 0.7;

const MIN_LEVEL_GAP: f64 = 0.301;
const TEXTURE: f64 = 0.1;
const TINT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Gradient,
    Disks,
    ValueNoise,
    Composite,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Self::Gradient),
            "disks" => Ok(Self::Disks),
            "value-noise" => Ok(Self::ValueNoise),
            "composite" => Ok(Self::Composite),
            _ => Err(Error::InvalidArgument(format!("unknown scene kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub size: usize,
    pub kind: SceneKind,
    pub dynamic_range: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            kind: SceneKind::Composite,
            dynamic_range: DEFAULT_DYNAMIC_RANGE,
        }
    }
}

/// Linear scene radiance with optional labeled regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceMap {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, nonnegative.
    pub radiance: Vec<f64>,
    /// Per-pixel region label; 0 is unlabeled background.
    pub labels: Option<Vec<u8>>,
    /// Nominal radiance of each labeled region, `(label, level)`.
    pub region_levels: Vec<(u8, f64)>,
}

impl RadianceMap {
    pub fn dynamic_range(&self) -> f64 {
        let (lo, hi) = self
            .radiance
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi / lo
    }
}

/// Smoothly interpolated lattice noise in [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |gx: usize, gy: usize| lattice[gy * gw + gx];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn tint(rng: &mut ChaCha8Rng, grey: bool) -> [f64; 3] {
    if grey {
        [0.0; 3]
    } else {
        std::array::from_fn(|_| (1.0 + rng.random_range(-TINT..TINT)).log10())
    }
}

/// Generates a scene of `size × size` pixels with the default dynamic range.
pub fn synth_radiance(seed: u64, size: usize, kind: SceneKind) -> Result<RadianceMap> {
    synth_radiance_with(
        seed,
        &SynthConfig {
            size,
            kind,
            ..SynthConfig::default()
        },
    )
}

pub fn synth_radiance_with(seed: u64, cfg: &SynthConfig) -> Result<RadianceMap> {
    let n = cfg.size;
    if n < 16 {
        return Err(Error::InvalidArgument(format!("scene size {n} is below 16")));
    }
    if !(cfg.dynamic_range.is_finite() && cfg.dynamic_range > 1.0 && cfg.dynamic_range <= 1e4) {
        return Err(Error::InvalidArgument(format!(
            "dynamic range {} outside (1, 1e4]",
            cfg.dynamic_range
        )));
    }
    let d = cfg.dynamic_range.log10();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = cfg.kind;

    let mut log_y = vec![0.0; n * n];
    match kind {
        SceneKind::Gradient => {
            for y in 0..n {
                for x in 0..n {
                    log_y[y * n + x] = -d + d * x as f64 / (n - 1) as f64;
                }
            }
        }
        SceneKind::Disks => log_y.fill(-0.5 * d),
        SceneKind::ValueNoise => {
            let noise = value_noise(&mut rng, n, n, (n / 4).max(2));
            for (o, v) in log_y.iter_mut().zip(noise) {
                *o = -d * v;
            }
        }
        SceneKind::Composite => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let noise = value_noise(&mut rng, n, n, (n / 4).max(2));
            let half = (n - 1) as f64 / 2.0;
            let reach = half * std::f64::consts::SQRT_2;
            for y in 0..n {
                for x in 0..n {
                    let t = ((x as f64 - half) * dx + (y as f64 - half) * dy) / reach * 0.5 + 0.5;
                    let v = 0.7 * t + 0.3 * noise[y * n + x];
                    log_y[y * n + x] = -d * (0.15 + 0.7 * v);
                }
            }
        }
    }
    let bg_tint = tint(&mut rng, kind == SceneKind::Gradient);
    let mut log_rgb: Vec<f64> = log_y
        .iter()
        .flat_map(|&l| bg_tint.map(|t| l + t))
        .collect();

    let mut labels = None;
    let mut levels = Vec::new();
    if matches!(kind, SceneKind::Disks | SceneKind::Composite) {
        let span = 0.9 * d;
        let fit = (span / (MIN_LEVEL_GAP + 4.0 * (1.0 + TEXTURE).log10())).floor() as usize + 1;
        let count = rng.random_range(3..=5usize).min(fit);
        let mut disk_levels: Vec<f64> = (0..count)
            .map(|i| {
                if count == 1 {
                    -0.5 * d
                } else {
                    -0.95 * d + span * i as f64 / (count - 1) as f64
                }
            })
            .collect();
        disk_levels.shuffle(&mut rng);
        let texture = value_noise(&mut rng, n, n, (n / 8).max(2));
        let mut map = vec![0u8; n * n];
        for (i, &level) in disk_levels.iter().enumerate() {
            let label = (i + 1) as u8;
            let r = rng.random_range(n as f64 * 0.08..n as f64 * 0.18);
            let cx = rng.random_range(r..n as f64 - r);
            let cy = rng.random_range(r..n as f64 - r);
            let tint = tint(&mut rng, false);
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if px * px + py * py <= r * r {
                        let p = y * n + x;
                        map[p] = label;
                        let tex = (1.0 + TEXTURE * (2.0 * texture[p] - 1.0)).log10();
                        for c in 0..3 {
                            log_rgb[3 * p + c] = level + tex + tint[c];
                        }
                    }
                }
            }
            levels.push((label, level));
        }
        let present: Vec<u8> = {
            let mut seen = [false; 256];
            map.iter().for_each(|&l| seen[l as usize] = true);
            (1..=count as u8).filter(|&l| seen[l as usize]).collect()
        };
        levels.retain(|(l, _)| present.contains(l));
        labels = Some(map);
    }

    let (lo, hi) = log_rgb
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let b = d / (hi - lo);
    let radiance = log_rgb.iter().map(|&l| 10f64.powf(b * (l - hi))).collect();
    let region_levels = levels
        .into_iter()
        .map(|(l, level)| (l, 10f64.powf(b * (level - hi))))
        .collect();
    Ok(RadianceMap {
        width: n,
        height: n,
        radiance,
        labels,
        region_levels,
    })
}

/// 8-bit capture: round(clip((dt·r)^(1/gamma)) · 255) / 255.
pub fn expose(r: &RadianceMap, dt: f64, gamma: f64) -> Result<Image> {
    check_capture(dt, gamma)?;
    let data = r
        .radiance
        .iter()
        .map(|&v| ((dt * v).powf(1.0 / gamma).clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Image::new(r.width, r.height, data)
}

fn check_capture(dt: f64, gamma: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("exposure time {dt} must be positive")));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must be positive")));
    }
    Ok(())
}

/// Like [`expose`], with zero-mean Gaussian noise of standard deviation
/// `sigma` (in output units) added before clipping and quantization.
pub fn expose_noisy(r: &RadianceMap, dt: f64, gamma: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    let bad = || Error::InvalidArgument(format!("noise level {sigma} must be finite and ≥ 0"));
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(bad());
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| bad())?;
    check_capture(dt, gamma)?;
    let data = r
        .radiance
        .iter()
        .map(|&v| {
            let x = (dt * v).powf(1.0 / gamma) + normal.sample(rng);
            (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    Image::new(r.width, r.height, data)
}

/// Exposes `r` at each of `times` (strictly increasing) with the default gamma.
pub fn make_bracket(r: &RadianceMap, times: &[f64]) -> Result<ExposureStack> {
    make_noisy_bracket(r, times, 0.0, 0)
}

/// [`make_bracket`] with per-exposure noise drawn from `noise_seed`; a
/// `sigma` of zero gives the clean bracket.
pub fn make_noisy_bracket(r: &RadianceMap, times: &[f64], sigma: f64, noise_seed: u64) -> Result<ExposureStack> {
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bracket times must be strictly increasing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let images = times
        .iter()
        .map(|&t| {
            if sigma == 0.0 {
                expose(r, t, DEFAULT_GAMMA)
            } else {
                expose_noisy(r, t, DEFAULT_GAMMA, sigma, &mut rng)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ExposureStack::new(images, times.to_vec())
}

/// One scene of an on-disk corpus.
#[derive(Debug, Clone)]
pub struct CorpusScene {
    pub name: String,
    pub stack: ExposureStack,
    pub labels: Option<Vec<u8>>,
}

/// Corpus generation parameters.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub seed: u64,
    pub scenes: usize,
    pub synth: SynthConfig,
    /// Exposure ratios relative to `base_time`.
    pub ratios: Vec<f64>,
    pub base_time: f64,
    /// Capture noise standard deviation in output units; 0 disables it.
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 10,
            synth: SynthConfig::default(),
            ratios: vec![1.0, 8.0, 64.0],
            base_time: DEFAULT_BASE_TIME,
            noise: 0.0,
        }
    }
}

impl CorpusConfig {
    fn times(&self) -> Vec<f64> {
        self.ratios.iter().map(|r| r * self.base_time).collect()
    }

    fn bracket(&self, r: &RadianceMap, index: usize) -> Result<ExposureStack> {
        let noise_seed = scene_seed(self.seed, index) ^ 0x4e4f_4953_4520_5345;
        make_noisy_bracket(r, &self.times(), self.noise, noise_seed)
    }
}

/// Scene seeds are derived from the corpus seed so corpora of different
/// sizes share their leading scenes.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Generates a corpus in memory.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusScene>> {
    par::map_range(cfg.scenes, |i| {
        let r = synth_radiance_with(scene_seed(cfg.seed, i), &cfg.synth)?;
        Ok(CorpusScene {
            name: scene_name(i),
            stack: cfg.bracket(&r, i)?,
            labels: r.labels,
        })
    })
    .into_iter()
    .collect()
}

/// Writes a corpus: one directory per scene holding the exposures,
/// `manifest.txt`, and for labeled kinds `labels.png` plus `regions.txt`.
/// Returns the scene directories.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    par::map_range(cfg.scenes, |i| {
        let r = synth_radiance_with(scene_seed(cfg.seed, i), &cfg.synth)?;
        let stack = cfg.bracket(&r, i)?;
        let scene_dir = dir.join(scene_name(i));
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let mut entries = Vec::new();
        for (k, (img, &t)) in stack.images().iter().zip(stack.times()).enumerate() {
            let file = PathBuf::from(format!("exp_{k}.png"));
            save_image(img, scene_dir.join(&file))?;
            entries.push((file, t));
        }
        write_manifest(scene_dir.join("manifest.txt"), &entries)?;
        if let Some(labels) = &r.labels {
            save_labels(r.width, r.height, labels, scene_dir.join("labels.png"))?;
            let text: String = r
                .region_levels
                .iter()
                .map(|(l, v)| format!("{l} {v:e}\n"))
                .collect();
            let p = scene_dir.join("regions.txt");
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(scene_dir)
    })
    .into_iter()
    .collect()
}

/// Loads every scene directory under `dir` (sorted by name) that holds a
/// `manifest.txt`.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusScene>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no scene directories with manifest.txt under {}",
            dir.display()
        )));
    }
    dirs.iter()
        .map(|d| {
            let name = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let wrap = |e: Error| Error::Scene {
                scene: name.clone(),
                source: Box::new(e),
            };
            let stack = load_manifest(d.join("manifest.txt")).map_err(wrap)?;
            let labels_path = d.join("labels.png");
            let labels = if labels_path.is_file() {
                let (w, h, l) = load_labels(&labels_path).map_err(wrap)?;
                if (w, h) != stack.dims() {
                    return Err(wrap(Error::DimensionMismatch(format!(
                        "labels are {w}x{h}, images {:?}",
                        stack.dims()
                    ))));
                }
                Some(l)
            } else {
                None
            };
            Ok(CorpusScene {
                name: name.clone(),
                stack,
                labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::to_luminance;

    #[test]
    fn same_seed_same_map() {
        for kind in [SceneKind::Gradient, SceneKind::Disks, SceneKind::ValueNoise, SceneKind::Composite] {
            assert_eq!(synth_radiance(5, 32, kind).unwrap(), synth_radiance(5, 32, kind).unwrap());
        }
        assert_ne!(
            synth_radiance(5, 32, SceneKind::Composite).unwrap(),
            synth_radiance(6, 32, SceneKind::Composite).unwrap()
        );
    }

    #[test]
    fn gradient_is_monotone_along_x() {
        let r = synth_radiance(1, 20, SceneKind::Gradient).unwrap();
        for y in 0..20 {
            for x in 1..20 {
                for c in 0..3 {
                    let a = r.radiance[3 * (y * 20 + x - 1) + c];
                    let b = r.radiance[3 * (y * 20 + x) + c];
                    assert!(b > a);
                }
            }
        }
    }

    #[test]
    fn dynamic_range_is_hit() {
        for seed in 0..10 {
            let r = synth_radiance(seed, 64, SceneKind::Composite).unwrap();
            let (lo, hi) = r
                .radiance
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(lo > 0.0);
            let ratio = hi / lo;
            assert!((900.0..=1100.0).contains(&ratio), "seed {seed}: {ratio}");
            assert!((hi - 1.0).abs() < 1e-12);
        }
        let cfg = SynthConfig {
            dynamic_range: 1e4,
            ..SynthConfig::default()
        };
        assert!((synth_radiance_with(3, &cfg).unwrap().dynamic_range() / 1e4 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn regions_are_pixelwise_ordered() {
        for seed in 0..10 {
            let r = synth_radiance(seed, 64, SceneKind::Composite).unwrap();
            let labels = r.labels.as_ref().unwrap();
            assert!(r.region_levels.len() >= 2);
            for &(a, la) in &r.region_levels {
                for &(b, lb) in &r.region_levels {
                    if la <= lb {
                        continue;
                    }
                    for c in 0..3 {
                        let min_a = (0..labels.len())
                            .filter(|&p| labels[p] == a)
                            .map(|p| r.radiance[3 * p + c])
                            .fold(f64::INFINITY, f64::min);
                        let max_b = (0..labels.len())
                            .filter(|&p| labels[p] == b)
                            .map(|p| r.radiance[3 * p + c])
                            .fold(0.0, f64::max);
                        assert!(min_a > max_b, "seed {seed} regions {a}/{b}");
                    }
                }
            }
        }
    }

    #[test]
    fn expose_examples() {
        let map = |v: f64| RadianceMap {
            width: 1,
            height: 1,
            radiance: vec![v; 3],
            labels: None,
            region_levels: vec![],
        };
        assert_eq!(expose(&map(1.0), 1.0, 2.2).unwrap().data()[0], 1.0);
        assert_eq!(expose(&map(0.0), 1.0, 2.2).unwrap().data()[0], 0.0);
        let v = expose(&map(0.25), 1.0, 2.2).unwrap().data()[0];
        let raw = 0.25f64.powf(1.0 / 2.2);
        assert!((raw - 0.5326).abs() < 1e-4);
        assert_eq!(v, (raw * 255.0).round() / 255.0);
        assert!(expose(&map(1.0), 0.0, 2.2).is_err());
    }

    #[test]
    fn brackets_are_monotone() {
        let r = synth_radiance(9, 32, SceneKind::Composite).unwrap();
        let stack = make_bracket(&r, &[0.1, 0.2, 0.4, 0.8, 1.6]).unwrap();
        for k in 1..stack.len() {
            for (a, b) in stack.image(k - 1).data().iter().zip(stack.image(k).data()) {
                assert!(b >= a);
            }
        }
        assert!(make_bracket(&r, &[1.0, 0.5]).is_err());
        assert!(make_bracket(&r, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn region_luminance_order_matches_radiance() {
        let r = synth_radiance(2, 64, SceneKind::Composite).unwrap();
        let stack = make_bracket(&r, &[0.7, 5.6, 44.8]).unwrap();
        let labels = r.labels.as_ref().unwrap();
        for img in stack.images() {
            let y = to_luminance(img);
            let mean = |l: u8| {
                let v: Vec<f64> = (0..labels.len()).filter(|&p| labels[p] == l).map(|p| y.data()[p]).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            for &(a, la) in &r.region_levels {
                for &(b, lb) in &r.region_levels {
                    if la > lb {
                        assert!(mean(a) >= mean(b));
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            scenes: 3,
            synth: SynthConfig {
                size: 16,
                ..SynthConfig::default()
            },
            ..CorpusConfig::default()
        };
        let dirs = write_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(dirs.len(), 3);
        let loaded = load_corpus(dir.path()).unwrap();
        let memory = generate_corpus(&cfg).unwrap();
        for (a, b) in loaded.iter().zip(&memory) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.stack, b.stack);
            assert_eq!(a.labels, b.labels);
        }
        assert!(load_corpus(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn noise_is_seeded_and_off_by_default() {
        let clean = CorpusConfig {
            scenes: 2,
            synth: SynthConfig {
                size: 16,
                ..SynthConfig::default()
            },
            ..CorpusConfig::default()
        };
        let noisy = CorpusConfig {
            noise: 0.02,
            ..clean.clone()
        };
        let a = generate_corpus(&clean).unwrap();
        let b = generate_corpus(&noisy).unwrap();
        let c = generate_corpus(&noisy).unwrap();
        for ((a, b), c) in a.iter().zip(&b).zip(&c) {
            assert_eq!(b.stack, c.stack);
            let diff = a.stack.image(1).max_abs_diff(b.stack.image(1));
            assert!(diff > 0.0 && diff < 0.2, "{diff}");
        }
        let r = synth_radiance(3, 16, SceneKind::Gradient).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(expose_noisy(&r, 1.0, 2.2, -1.0, &mut rng).is_err());
    }
}
