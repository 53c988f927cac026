//! Per-pixel quality weights and their edge-preserving smoothing.
//!
//! The raw weight of an exposure is contrast × saturation × well-exposedness.
//! Weights are normalized to a per-pixel partition of unity, smoothed with a
//! guided filter steered by each image's luminance, and normalized again.

use crate::error::{Error, Result};
use crate::image::{to_luminance, Image, Plane, SceneSets};
use crate::par;

/// Floor added to every raw weight so that pixels where all images are flat
/// normalize to uniform weights instead of 0/0.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Width of the well-exposedness Gaussian around mid-gray.
pub const EXPOSEDNESS_SIGMA: f64 = 0.2;

/// Raw, normalized and smoothed weights for the measurement set of a scene,
/// in measurement-set order.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub raw: Vec<Plane>,
    pub normalized: Vec<Plane>,
    pub smoothed: Vec<Plane>,
}

/// Guided filter window radius and regularization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedParams {
    pub radius: usize,
    pub eps: f64,
}

impl GuidedParams {
    /// r = max(2, min(w, h) / 16), eps = 1e-2.
    pub fn for_dims(width: usize, height: usize) -> Self {
        Self {
            radius: (width.min(height) / 16).max(2),
            eps: 1e-2,
        }
    }
}

/// |∇²Y| with the 4-neighbour Laplacian on luminance, replicate padding.
pub fn contrast_map(img: &Image) -> Plane {
    let y = to_luminance(img);
    let (w, h) = y.dims();
    Plane::from_fn(w, h, |x, yy| {
        let (xi, yi) = (x as isize, yy as isize);
        let lap = y.get_clamped(xi - 1, yi)
            + y.get_clamped(xi + 1, yi)
            + y.get_clamped(xi, yi - 1)
            + y.get_clamped(xi, yi + 1)
            - 4.0 * y.get(x, yy);
        lap.abs()
    })
}

/// Population standard deviation of (R, G, B) per pixel.
pub fn saturation_map(img: &Image) -> Plane {
    let data = img
        .pixels()
        .map(|[r, g, b]| {
            let mu = (r + g + b) / 3.0;
            (((r - mu).powi(2) + (g - mu).powi(2) + (b - mu).powi(2)) / 3.0).sqrt()
        })
        .collect();
    Plane::new(img.width(), img.height(), data).expect("dims from image")
}

/// Product over channels of exp(-(v - 0.5)² / (2 · 0.2²)).
pub fn well_exposedness_map(img: &Image) -> Plane {
    let denom = 2.0 * EXPOSEDNESS_SIGMA * EXPOSEDNESS_SIGMA;
    let data = img
        .pixels()
        .map(|p| {
            let s: f64 = p.iter().map(|v| (v - 0.5).powi(2)).sum();
            (-s / denom).exp()
        })
        .collect();
    Plane::new(img.width(), img.height(), data).expect("dims from image")
}

/// C · S · E + floor.
pub fn raw_weight(img: &Image) -> Plane {
    let c = contrast_map(img);
    let s = saturation_map(img);
    let e = well_exposedness_map(img);
    let data = c
        .data()
        .iter()
        .zip(s.data())
        .zip(e.data())
        .map(|((c, s), e)| c * s * e + WEIGHT_FLOOR)
        .collect();
    Plane::new(img.width(), img.height(), data).expect("dims from image")
}

/// Divides each plane by the per-pixel sum over planes.
pub fn normalize_weights(raws: &[Plane]) -> Result<Vec<Plane>> {
    let first = raws
        .first()
        .ok_or_else(|| Error::InvalidArgument("no weight planes to normalize".into()))?;
    for p in &raws[1..] {
        first.check_same_dims(p)?;
    }
    if raws.iter().any(|p| p.data().iter().any(|&v| v < 0.0)) {
        return Err(Error::InvalidArgument("negative weight".into()));
    }
    let mut sums = vec![0.0; first.len()];
    for p in raws {
        for (s, v) in sums.iter_mut().zip(p.data()) {
            *s += v;
        }
    }
    raws.iter()
        .map(|p| {
            let data = p.data().iter().zip(&sums).map(|(v, s)| v / s).collect();
            Plane::new(p.width(), p.height(), data)
        })
        .collect()
}

/// Normalized raw weights of a list of images (no smoothing): the classic
/// exposure-fusion weights.
pub fn normalized_weights<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Vec<Plane>> {
    let images: Vec<&Image> = images.into_iter().collect();
    let raws = par::map_slice(&images, |im| raw_weight(im));
    normalize_weights(&raws)
}

/// Mean over the (2r+1)² window centred on each pixel; samples outside the
/// plane replicate the nearest edge pixel.
pub fn box_mean(p: &Plane, radius: usize) -> Plane {
    let (w, h) = p.dims();
    let r = radius as isize;
    let n = (2 * radius + 1) as f64;
    let mut horiz = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xi = x as isize;
            let mut s = 0.0;
            for dx in -r..=r {
                s += p.get_clamped(xi + dx, y as isize);
            }
            horiz[y * w + x] = s;
        }
    }
    let horiz = Plane::new(w, h, horiz).expect("same dims");
    Plane::from_fn(w, h, |x, y| {
        let yi = y as isize;
        let mut s = 0.0;
        for dy in -r..=r {
            s += horiz.get_clamped(x as isize, yi + dy);
        }
        s / (n * n)
    })
}

/// Classical guided image filter: per window, `input ≈ a·guide + b` with
/// ridge `eps` on `a`; the output averages the window coefficients.
pub fn guided_filter(guide: &Plane, input: &Plane, radius: usize, eps: f64) -> Result<Plane> {
    guide.check_same_dims(input)?;
    if radius == 0 {
        return Err(Error::InvalidArgument("guided filter radius must be ≥ 1".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("guided filter eps must be > 0".into()));
    }
    let mean_g = box_mean(guide, radius);
    let mean_i = box_mean(input, radius);
    let gg = guide.zip_map(guide, |a, b| a * b)?;
    let gi = guide.zip_map(input, |a, b| a * b)?;
    let corr_gg = box_mean(&gg, radius);
    let corr_gi = box_mean(&gi, radius);

    let n = guide.len();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for k in 0..n {
        let mg = mean_g.data()[k];
        let mi = mean_i.data()[k];
        let var = corr_gg.data()[k] - mg * mg;
        let cov = corr_gi.data()[k] - mg * mi;
        a[k] = cov / (var + eps);
        b[k] = mi - a[k] * mg;
    }
    let (w, h) = guide.dims();
    let mean_a = box_mean(&Plane::new(w, h, a)?, radius);
    let mean_b = box_mean(&Plane::new(w, h, b)?, radius);
    let out = guide
        .data()
        .iter()
        .zip(mean_a.data().iter().zip(mean_b.data()))
        .map(|(g, (a, b))| a * g + b)
        .collect();
    Plane::new(w, h, out)
}

/// Weights over the measurement set: raw → normalized → guided-filtered
/// with each image's luminance as guide → normalized again.
pub fn smoothed_weights(sets: &SceneSets) -> Result<WeightSet> {
    let (w, h) = sets.dims();
    smoothed_weights_with(sets, GuidedParams::for_dims(w, h))
}

pub fn smoothed_weights_with(sets: &SceneSets, params: GuidedParams) -> Result<WeightSet> {
    let images: Vec<&Image> = sets.measure_images().collect();
    let raw = par::map_slice(&images, |im| raw_weight(im));
    let normalized = normalize_weights(&raw)?;
    let pairs: Vec<(&Image, &Plane)> = images.iter().copied().zip(&normalized).collect();
    let filtered = par::map_slice(&pairs, |(im, wgt)| {
        guided_filter(&to_luminance(im), wgt, params.radius, params.eps)
    })
    .into_iter()
    .map(|r| r.map(|p| p.map(|v| v.max(0.0))))
    .collect::<Result<Vec<_>>>()?;
    let smoothed = renormalize(&filtered);
    Ok(WeightSet {
        raw,
        normalized,
        smoothed,
    })
}

/// Per-pixel renormalization of filtered weights. Filtering can push weights
/// slightly negative (clipped before this call) and can, in principle, zero
/// every weight at a pixel; such pixels fall back to uniform weights.
fn renormalize(planes: &[Plane]) -> Vec<Plane> {
    let n = planes[0].len();
    let k = planes.len() as f64;
    let mut sums = vec![0.0; n];
    for p in planes {
        for (s, v) in sums.iter_mut().zip(p.data()) {
            *s += v;
        }
    }
    planes
        .iter()
        .map(|p| {
            let data = p
                .data()
                .iter()
                .zip(&sums)
                .map(|(v, &s)| if s > WEIGHT_FLOOR { v / s } else { 1.0 / k })
                .collect();
            Plane::new(p.width(), p.height(), data).expect("same dims")
        })
        .collect()
}
