//! Patch-based MEF-SSIM against a measurement set, the weighted absolute
//! error term, and their combination into the training objective.
//!
//! Each measurement patch is split into mean intensity `l`, contrast
//! `c = ‖x − l‖₂` and unit structure `s = (x − l)/c`. The desired patch takes
//! the highest contrast, an ∞-norm weighted average structure and a
//! Gaussian-weighted mean intensity over all measurement images, and the
//! fused patch is scored against it with the SSIM formula.

use crate::error::{Error, Result};
use crate::image::{to_luminance, Image, Plane, SceneSets, LUMA};
use crate::par;
use crate::weights::smoothed_weights;

/// Contrast below which a patch counts as flat and gets a zero structure.
pub const DEGENERATE_CONTRAST: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the weighted-absolute-error term.
    pub lambda: f64,
    pub patch_size: usize,
    pub stride: usize,
    /// Width of the global-mean term in the intensity weight.
    pub sigma_g: f64,
    /// Width of the local-mean term in the intensity weight.
    pub sigma_l: f64,
    /// Target mid intensity.
    pub tau: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            patch_size: 8,
            stride: 4,
            sigma_g: 0.2,
            sigma_l: 0.5,
            tau: 0.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.patch_size >= 2
            && self.stride >= 1
            && self.stride <= self.patch_size
            && self.sigma_g > 0.0
            && self.sigma_l > 0.0
            && self.c1 > 0.0
            && self.c2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid loss config {self:?}")))
        }
    }
}

/// Intensity / contrast / structure decomposition of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStats {
    pub l: f64,
    pub c: f64,
    pub s: Vec<f64>,
    pub patch: Vec<f64>,
    /// Set when `c` is below [`DEGENERATE_CONTRAST`]; `s` is then all zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesiredPatch {
    pub c_hat: f64,
    pub s_hat: Vec<f64>,
    pub l_hat: f64,
    pub patch: Vec<f64>,
}

/// Top-left corners of the sliding windows, row-major.
pub fn patch_origins(width: usize, height: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be ≥ 1".into()));
    }
    if size > width.min(height) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} larger than {width}x{height} image"
        )));
    }
    let ny = (height - size) / stride + 1;
    let nx = (width - size) / stride + 1;
    Ok((0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i * stride, j * stride)))
        .collect())
}

fn copy_patch(p: &Plane, (x0, y0): (usize, usize), size: usize, out: &mut Vec<f64>) {
    out.clear();
    let w = p.width();
    for y in y0..y0 + size {
        out.extend_from_slice(&p.data()[y * w + x0..y * w + x0 + size]);
    }
}

/// All sliding-window patches of `p`, each flattened row-major.
pub fn extract_patches(p: &Plane, size: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    let origins = patch_origins(p.width(), p.height(), size, stride)?;
    Ok(origins
        .into_iter()
        .map(|o| {
            let mut v = Vec::with_capacity(size * size);
            copy_patch(p, o, size, &mut v);
            v
        })
        .collect())
}

pub fn decompose_patch(patch: &[f64]) -> PatchStats {
    assert!(!patch.is_empty(), "empty patch");
    let n = patch.len() as f64;
    let l = patch.iter().sum::<f64>() / n;
    let c = patch.iter().map(|v| (v - l) * (v - l)).sum::<f64>().sqrt();
    let degenerate = c < DEGENERATE_CONTRAST;
    let s = if degenerate {
        vec![0.0; patch.len()]
    } else {
        patch.iter().map(|v| (v - l) / c).collect()
    };
    PatchStats {
        l,
        c,
        s,
        patch: patch.to_vec(),
        degenerate,
    }
}

/// exp(−(μ − τ)²/(2σ_g²) − (l − τ)²/(2σ_l²)).
pub fn intensity_weight(global_mean: f64, local_mean: f64, cfg: &LossConfig) -> f64 {
    let g = (global_mean - cfg.tau).powi(2) / (2.0 * cfg.sigma_g * cfg.sigma_g);
    let l = (local_mean - cfg.tau).powi(2) / (2.0 * cfg.sigma_l * cfg.sigma_l);
    (-g - l).exp()
}

/// Desired patch from co-located patches of every measurement image.
/// `global_means[k]` is the mean luminance of image k.
pub fn desired_patch(patches: &[&[f64]], global_means: &[f64], cfg: &LossConfig) -> DesiredPatch {
    assert!(!patches.is_empty(), "no patches");
    assert_eq!(patches.len(), global_means.len(), "one global mean per image");
    let stats: Vec<PatchStats> = patches.iter().map(|p| decompose_patch(p)).collect();
    desired_from_stats(&stats, global_means, cfg)
}

fn desired_from_stats(stats: &[PatchStats], global_means: &[f64], cfg: &LossConfig) -> DesiredPatch {
    let n = stats[0].patch.len();
    let c_hat = stats.iter().map(|s| s.c).fold(0.0, f64::max);

    let mut s_bar = vec![0.0; n];
    let mut norm_sum = 0.0;
    for st in stats {
        let inf = st.patch.iter().map(|v| (v - st.l).abs()).fold(0.0, f64::max);
        norm_sum += inf;
        for (acc, s) in s_bar.iter_mut().zip(&st.s) {
            *acc += inf * s;
        }
    }
    let s_hat = if norm_sum > 0.0 {
        let len = s_bar.iter().map(|v| (v / norm_sum).powi(2)).sum::<f64>().sqrt();
        if len > DEGENERATE_CONTRAST {
            s_bar.iter().map(|v| v / norm_sum / len).collect()
        } else {
            vec![0.0; n]
        }
    } else {
        vec![0.0; n]
    };

    let (mut num, mut den) = (0.0, 0.0);
    for (st, &mu) in stats.iter().zip(global_means) {
        let w = intensity_weight(mu, st.l, cfg);
        num += w * st.l;
        den += w;
    }
    let l_hat = num / den;
    let patch = s_hat.iter().map(|s| c_hat * s + l_hat).collect();
    DesiredPatch {
        c_hat,
        s_hat,
        l_hat,
        patch,
    }
}

/// SSIM of a fused patch against a desired patch, population statistics.
pub fn patch_similarity(desired: &[f64], fused: &[f64], c1: f64, c2: f64) -> f64 {
    let n = desired.len() as f64;
    let mz = desired.iter().sum::<f64>() / n;
    let mf = fused.iter().sum::<f64>() / n;
    let (mut vz, mut vf, mut cov) = (0.0, 0.0, 0.0);
    for (z, f) in desired.iter().zip(fused) {
        let (dz, df) = (z - mz, f - mf);
        vz += dz * dz;
        vf += df * df;
        cov += dz * df;
    }
    vz /= n;
    vf /= n;
    cov /= n;
    ((2.0 * mz * mf + c1) / (mf * mf + mz * mz + c1)) * ((2.0 * cov + c2) / (vf + vz + c2))
}

/// Value and gradient of [`patch_similarity`] with respect to `fused`.
fn patch_similarity_grad(desired: &[f64], fused: &[f64], c1: f64, c2: f64, grad: &mut [f64]) -> f64 {
    let n = desired.len() as f64;
    let mz = desired.iter().sum::<f64>() / n;
    let mf = fused.iter().sum::<f64>() / n;
    let (mut vz, mut vf, mut cov) = (0.0, 0.0, 0.0);
    for (z, f) in desired.iter().zip(fused) {
        let (dz, df) = (z - mz, f - mf);
        vz += dz * dz;
        vf += df * df;
        cov += dz * df;
    }
    vz /= n;
    vf /= n;
    cov /= n;
    let (na, da) = (2.0 * mz * mf + c1, mf * mf + mz * mz + c1);
    let (nb, db) = (2.0 * cov + c2, vf + vz + c2);
    let a = na / da;
    let b = nb / db;
    let da_dmf = (2.0 * mz * da - na * 2.0 * mf) / (da * da);
    for ((g, z), f) in grad.iter_mut().zip(desired).zip(fused) {
        let db_dy = (2.0 * (z - mz) / n * db - nb * 2.0 * (f - mf) / n) / (db * db);
        *g = da_dmf / n * b + a * db_dy;
    }
    a * b
}

/// Desired patches of a scene's measurement set, precomputed once so that
/// many candidate fusions can be scored against them.
#[derive(Debug, Clone)]
pub struct MefReference {
    width: usize,
    height: usize,
    size: usize,
    origins: Vec<(usize, usize)>,
    desired: Vec<Vec<f64>>,
    c1: f64,
    c2: f64,
}

impl MefReference {
    pub fn new(sets: &SceneSets, cfg: &LossConfig) -> Result<Self> {
        let lum: Vec<Plane> = sets.measure_images().map(to_luminance).collect();
        Self::from_luminance(&lum, cfg)
    }

    /// Builds the reference from the measurement images' luminance planes.
    pub fn from_luminance(lum: &[Plane], cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let first = lum
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty measurement set".into()))?;
        for p in &lum[1..] {
            first.check_same_dims(p)?;
        }
        let (w, h) = first.dims();
        let origins = patch_origins(w, h, cfg.patch_size, cfg.stride)?;
        let means: Vec<f64> = lum.iter().map(Plane::mean).collect();
        let desired = par::map_slice(&origins, |&o| {
            let stats: Vec<PatchStats> = lum
                .iter()
                .map(|p| {
                    let mut buf = Vec::with_capacity(cfg.patch_size * cfg.patch_size);
                    copy_patch(p, o, cfg.patch_size, &mut buf);
                    decompose_patch(&buf)
                })
                .collect();
            desired_from_stats(&stats, &means, cfg).patch
        });
        Ok(Self {
            width: w,
            height: h,
            size: cfg.patch_size,
            origins,
            desired,
            c1: cfg.c1,
            c2: cfg.c2,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.origins.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn desired_patches(&self) -> &[Vec<f64>] {
        &self.desired
    }

    fn check(&self, lum: &Plane) -> Result<()> {
        if lum.dims() != (self.width, self.height) {
            return Err(Error::DimensionMismatch(format!(
                "fused {}x{} vs measurement {}x{}",
                lum.width(),
                lum.height(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }

    /// Mean patch similarity of a fused luminance plane.
    pub fn score(&self, fused_lum: &Plane) -> Result<f64> {
        self.check(fused_lum)?;
        let scores = par::map_range(self.origins.len(), |i| {
            let mut buf = Vec::with_capacity(self.size * self.size);
            copy_patch(fused_lum, self.origins[i], self.size, &mut buf);
            patch_similarity(&self.desired[i], &buf, self.c1, self.c2)
        });
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Mean patch similarity and its gradient with respect to every pixel of
    /// the fused luminance plane.
    pub fn score_with_grad(&self, fused_lum: &Plane) -> Result<(f64, Plane)> {
        self.check(fused_lum)?;
        let per_patch = par::map_range(self.origins.len(), |i| {
            let mut buf = Vec::with_capacity(self.size * self.size);
            copy_patch(fused_lum, self.origins[i], self.size, &mut buf);
            let mut g = vec![0.0; buf.len()];
            let s = patch_similarity_grad(&self.desired[i], &buf, self.c1, self.c2, &mut g);
            (s, g)
        });
        let m = per_patch.len() as f64;
        let mut grad = vec![0.0; self.width * self.height];
        let mut total = 0.0;
        for ((s, g), &(x0, y0)) in per_patch.iter().zip(&self.origins) {
            total += s;
            for dy in 0..self.size {
                let row = (y0 + dy) * self.width + x0;
                for dx in 0..self.size {
                    grad[row + dx] += g[dy * self.size + dx] / m;
                }
            }
        }
        Ok((total / m, Plane::new(self.width, self.height, grad)?))
    }
}

/// The MEF-SSIM score of `fused` against the measurement set, on luminance.
pub fn mef_ssim_index(sets: &SceneSets, fused: &Image, cfg: &LossConfig) -> Result<f64> {
    check_dims(sets, fused)?;
    MefReference::new(sets, cfg)?.score(&to_luminance(fused))
}

/// 1 − MEF-SSIM.
pub fn loss_s(sets: &SceneSets, fused: &Image, cfg: &LossConfig) -> Result<f64> {
    Ok(1.0 - mef_ssim_index(sets, fused, cfg)?)
}

fn check_dims(sets: &SceneSets, fused: &Image) -> Result<()> {
    if sets.dims() != fused.dims() {
        return Err(Error::DimensionMismatch(format!(
            "fused {:?} vs stack {:?}",
            fused.dims(),
            sets.dims()
        )));
    }
    Ok(())
}

/// Smoothed measurement weights and images for the weighted absolute error.
#[derive(Debug, Clone)]
pub struct WaeReference {
    weights: Vec<Plane>,
    images: Vec<Image>,
}

impl WaeReference {
    pub fn new(sets: &SceneSets) -> Result<Self> {
        let ws = smoothed_weights(sets)?;
        Ok(Self {
            weights: ws.smoothed,
            images: sets.measure_images().cloned().collect(),
        })
    }

    pub fn from_parts(weights: Vec<Plane>, images: Vec<Image>) -> Result<Self> {
        if weights.len() != images.len() || weights.is_empty() {
            return Err(Error::InvalidArgument("one weight plane per image required".into()));
        }
        for (w, im) in weights.iter().zip(&images) {
            if w.dims() != im.dims() || im.dims() != images[0].dims() {
                return Err(Error::DimensionMismatch("weights vs images".into()));
            }
        }
        Ok(Self { weights, images })
    }

    pub fn weights(&self) -> &[Plane] {
        &self.weights
    }

    /// Σ_k Σ_p W_k(p) ‖F(p) − Z_k(p)‖₁ / (pixel count).
    pub fn value(&self, fused: &Image) -> Result<f64> {
        Ok(self.eval(fused.dims(), fused.data(), false)?.0)
    }

    /// Value and gradient with respect to the interleaved fused values.
    pub fn value_with_grad(&self, fused: &Image) -> Result<(f64, Vec<f64>)> {
        self.eval(fused.dims(), fused.data(), true)
    }

    fn eval(&self, dims: (usize, usize), fused: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        if dims != self.images[0].dims() {
            return Err(Error::DimensionMismatch(format!(
                "fused {dims:?} vs measurement {:?}",
                self.images[0].dims()
            )));
        }
        let npix = (dims.0 * dims.1) as f64;
        let mut grad = if want_grad { vec![0.0; fused.len()] } else { Vec::new() };
        let mut total = 0.0;
        for (w, im) in self.weights.iter().zip(&self.images) {
            let mut acc = 0.0;
            for (p, &wp) in w.data().iter().enumerate() {
                let mut l1 = 0.0;
                for c in 0..3 {
                    let d = fused[3 * p + c] - im.data()[3 * p + c];
                    l1 += d.abs();
                    if want_grad {
                        grad[3 * p + c] += wp * sign(d) / npix;
                    }
                }
                acc += wp * l1;
            }
            total += acc;
        }
        Ok((total / npix, grad))
    }
}

/// Subgradient of |d|, zero at the kink.
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn loss_w(sets: &SceneSets, fused: &Image) -> Result<f64> {
    check_dims(sets, fused)?;
    WaeReference::new(sets)?.value(fused)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loss_s: f64,
    pub loss_w: f64,
    pub total: f64,
    pub mef_ssim: f64,
}

/// loss_S + λ · loss_W.
pub fn total_loss(sets: &SceneSets, fused: &Image, cfg: &LossConfig) -> Result<LossBreakdown> {
    SceneObjective::new(sets, cfg)?.evaluate(fused)
}

/// Both loss references for one scene, reusable across many evaluations.
#[derive(Debug, Clone)]
pub struct SceneObjective {
    pub mef: MefReference,
    pub wae: WaeReference,
    pub lambda: f64,
}

impl SceneObjective {
    pub fn new(sets: &SceneSets, cfg: &LossConfig) -> Result<Self> {
        Ok(Self {
            mef: MefReference::new(sets, cfg)?,
            wae: WaeReference::new(sets)?,
            lambda: cfg.lambda,
        })
    }

    pub fn evaluate(&self, fused: &Image) -> Result<LossBreakdown> {
        let mef_ssim = self.mef.score(&to_luminance(fused))?;
        let loss_w = self.wae.value(fused)?;
        let loss_s = 1.0 - mef_ssim;
        Ok(LossBreakdown {
            loss_s,
            loss_w,
            total: loss_s + self.lambda * loss_w,
            mef_ssim,
        })
    }

    /// Loss and its gradient with respect to a planar (CHW) fused image.
    pub fn evaluate_planar_with_grad(
        &self,
        width: usize,
        height: usize,
        planar: &[f64],
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let fused = Image::from_planar(width, height, planar)?;
        let lum = to_luminance(&fused);
        let (score, g_lum) = self.mef.score_with_grad(&lum)?;
        let (loss_w, g_wae) = if self.lambda != 0.0 {
            self.wae.value_with_grad(&fused)?
        } else {
            (self.wae.value(&fused)?, vec![0.0; planar.len()])
        };
        let n = width * height;
        let mut grad = vec![0.0; 3 * n];
        for c in 0..3 {
            for p in 0..n {
                grad[c * n + p] = -LUMA[c] * g_lum.data()[p] + self.lambda * g_wae[3 * p + c];
            }
        }
        let loss_s = 1.0 - score;
        Ok((
            LossBreakdown {
                loss_s,
                loss_w,
                total: loss_s + self.lambda * loss_w,
                mef_ssim: score,
            },
            grad,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ExposureStack;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn window_counts() {
        let count = |w, h, s, st| patch_origins(w, h, s, st).unwrap().len();
        assert_eq!(count(8, 8, 8, 1), 1);
        assert_eq!(count(8, 10, 8, 1), 3);
        assert_eq!(count(16, 16, 8, 4), 9);
        assert!(patch_origins(7, 20, 8, 1).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let flat = decompose_patch(&[0.3; 4]);
        assert!(flat.degenerate);
        assert_eq!(flat.c, 0.0);
        assert!(flat.s.iter().all(|&v| v == 0.0));

        let d = decompose_patch(&[0.0, 1.0]);
        assert_abs_diff_eq!(d.l, 0.5);
        assert_abs_diff_eq!(d.c, 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(d.s[0], -1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(d.s[1], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn desired_patch_examples() {
        let cfg = LossConfig::default();
        let a = [0.5, 0.55, 0.45, 0.5];
        let b = [0.2, 0.5, 0.1, 0.4];
        let c = [0.1, 0.3, 0.2, 0.25];
        let cs: Vec<f64> = [&a[..], &b, &c].iter().map(|p| decompose_patch(p).c).collect();
        let d = desired_patch(&[&a, &b, &c], &[0.4, 0.5, 0.6], &cfg);
        assert_eq!(d.c_hat, cs.iter().cloned().fold(0.0, f64::max));
        assert_abs_diff_eq!(d.s_hat.iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-12);

        let single = desired_patch(&[&b], &[0.3], &cfg);
        let st = decompose_patch(&b);
        assert_abs_diff_eq!(single.c_hat, st.c);
        assert_abs_diff_eq!(single.l_hat, st.l, epsilon = 1e-15);
        for (x, y) in single.s_hat.iter().zip(&st.s) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        for (x, y) in single.patch.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        assert_eq!(intensity_weight(0.5, 0.5, &cfg), 1.0);

        let flat = desired_patch(&[&[0.2; 4], &[0.6; 4]], &[0.2, 0.6], &cfg);
        assert_eq!(flat.c_hat, 0.0);
        assert!(flat.s_hat.iter().all(|&v| v == 0.0));
        assert!(flat.patch.iter().all(|&v| v == flat.l_hat));
    }

    #[test]
    fn single_image_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 24, 20);
        let sets = SceneSets::all(ExposureStack::new(vec![img.clone()], vec![1.0]).unwrap());
        let cfg = LossConfig::default();
        assert_abs_diff_eq!(mef_ssim_index(&sets, &img, &cfg).unwrap(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(loss_w(&sets, &img).unwrap(), 0.0);
        assert_abs_diff_eq!(total_loss(&sets, &img, &cfg).unwrap().total, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_pair_gives_zero_wae() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 16, 16);
        let sets = SceneSets::all(ExposureStack::new(vec![img.clone(), img.clone()], vec![1.0, 2.0]).unwrap());
        assert_eq!(loss_w(&sets, &img).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sets = SceneSets::all(ExposureStack::new(vec![Image::filled(16, 16, [0.5; 3])], vec![1.0]).unwrap());
        let wrong = Image::filled(16, 8, [0.5; 3]);
        let cfg = LossConfig::default();
        assert!(matches!(mef_ssim_index(&sets, &wrong, &cfg), Err(Error::DimensionMismatch(_))));
        assert!(matches!(loss_w(&sets, &wrong), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn loss_arithmetic() {
        let b = LossBreakdown { loss_s: 0.05, loss_w: 0.002, total: 0.05 + 10.0 * 0.002, mef_ssim: 0.95 };
        assert_abs_diff_eq!(b.total, 0.07, epsilon = 1e-15);
        assert_abs_diff_eq!(1.0 - 0.9468, 0.0532, epsilon = 1e-12);
    }

    #[test]
    fn lambda_zero_reduces_to_ssim_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let f = random_image(&mut rng, 16, 16);
        let sets = SceneSets::all(ExposureStack::new(vec![a, b], vec![1.0, 2.0]).unwrap());
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let l = total_loss(&sets, &f, &cfg).unwrap();
        assert_eq!(l.total, l.loss_s);
    }

    #[test]
    fn planar_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (12, 12);
        let imgs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, w, h)).collect();
        let sets = SceneSets::new(ExposureStack::new(imgs, vec![1.0, 2.0, 4.0]).unwrap(), vec![0, 2], vec![0, 1, 2]).unwrap();
        let cfg = LossConfig::default();
        let obj = SceneObjective::new(&sets, &cfg).unwrap();
        let x: Vec<f64> = (0..3 * w * h).map(|_| rng.random_range(0.1..0.9)).collect();
        let (_, g) = obj.evaluate_planar_with_grad(w, h, &x).unwrap();
        let eps = 1e-6;
        for _ in 0..40 {
            let i = rng.random_range(0..x.len());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fp = obj.evaluate_planar_with_grad(w, h, &xp).unwrap().0.total;
            let fm = obj.evaluate_planar_with_grad(w, h, &xm).unwrap().0.total;
            let num = (fp - fm) / (2.0 * eps);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {i}: analytic {} numeric {num}", g[i]);
        }
    }

    proptest::proptest! {
        #[test]
        fn decomposition_reconstructs(v in proptest::collection::vec(0.0..1.0f64, 2..64)) {
            let st = decompose_patch(&v);
            for (x, s) in v.iter().zip(&st.s) {
                proptest::prop_assert!((st.c * s + st.l - x).abs() < 1e-6);
            }
            if !st.degenerate {
                let n: f64 = st.s.iter().map(|s| s * s).sum();
                proptest::prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn contrast_hat_is_monotone(seed in 0u64..500, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = LossConfig::default();
            let patches: Vec<Vec<f64>> = (0..=k).map(|_| (0..16).map(|_| rng.random()).collect()).collect();
            let means: Vec<f64> = (0..=k).map(|_| rng.random()).collect();
            let refs: Vec<&[f64]> = patches.iter().map(Vec::as_slice).collect();
            let fewer = desired_patch(&refs[..k], &means[..k], &cfg);
            let more = desired_patch(&refs, &means, &cfg);
            proptest::prop_assert!(more.c_hat >= fewer.c_hat);
            let mut rev = refs.clone();
            rev.reverse();
            let mut rev_means = means.clone();
            rev_means.reverse();
            proptest::prop_assert_eq!(desired_patch(&rev, &rev_means, &cfg).c_hat, more.c_hat);
        }

        #[test]
        fn index_in_unit_interval(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let imgs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 16, 16)).collect();
            let f = random_image(&mut rng, 16, 16);
            let sets = SceneSets::all(ExposureStack::new(imgs, vec![1.0, 2.0, 3.0]).unwrap());
            let s = mef_ssim_index(&sets, &f, &LossConfig::default()).unwrap();
            proptest::prop_assert!(s > -1.0 && s <= 1.0 + 1e-12);
        }
    }
}
