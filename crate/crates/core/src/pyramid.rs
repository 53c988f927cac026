//! Gaussian/Laplacian pyramids and classical multi-scale exposure fusion.

use crate::error::{Error, Result};
use crate::image::{Image, Plane, SceneSets};
use crate::par;
use crate::weights::normalized_weights;

/// The 5-tap binomial kernel (1, 4, 6, 4, 1) / 16.
pub const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Ordered levels, finest first. Each level has ceil-halved dimensions of
/// the one before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Plane>,
}

impl Pyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Largest level count for which every level but the coarsest can still be
/// halved (min dimension ≥ 2).
pub fn max_levels(width: usize, height: usize) -> usize {
    let mut m = width.min(height);
    let mut n = 1;
    while m >= 2 {
        m = m.div_ceil(2);
        n += 1;
    }
    n
}

/// floor(log2(min(w, h))) − 1, at least 1.
pub fn default_levels(width: usize, height: usize) -> usize {
    let m = width.min(height).max(1);
    let log2 = usize::BITS as usize - 1 - m.leading_zeros() as usize;
    log2.saturating_sub(1).max(1)
}

fn check_levels(p: &Plane, levels: usize) -> Result<()> {
    let max = max_levels(p.width(), p.height());
    if levels == 0 || levels > max {
        return Err(Error::InvalidArgument(format!(
            "{levels} pyramid levels infeasible for {}x{} (1..={max})",
            p.width(),
            p.height()
        )));
    }
    Ok(())
}

/// Separable 5-tap blur with replicate padding.
pub fn blur5(p: &Plane) -> Plane {
    let (w, h) = p.dims();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, c) in KERNEL.iter().enumerate() {
                s += c * p.get_clamped(x as isize + k as isize - 2, y as isize);
            }
            tmp[y * w + x] = s;
        }
    }
    let tmp = Plane::new(w, h, tmp).expect("same dims");
    Plane::from_fn(w, h, |x, y| {
        KERNEL
            .iter()
            .enumerate()
            .map(|(k, c)| c * tmp.get_clamped(x as isize, y as isize + k as isize - 2))
            .sum()
    })
}

/// Keeps every second pixel starting at 0; output dims are ceil(dims / 2).
fn decimate(p: &Plane) -> Plane {
    let (w, h) = (p.width().div_ceil(2), p.height().div_ceil(2));
    Plane::from_fn(w, h, |x, y| p.get(2 * x, 2 * y))
}

/// Fine sample `fine` receives coarse sample j with weight 2·KERNEL[fine − 2j + 2].
#[inline]
fn expand_tap(fine: usize, get: impl Fn(isize) -> f64) -> f64 {
    let fx = fine as isize;
    let mut s = 0.0;
    for j in (fx - 2).div_euclid(2)..=(fx + 2).div_euclid(2) {
        let off = fx - 2 * j + 2;
        if (0..5).contains(&off) {
            s += 2.0 * KERNEL[off as usize] * get(j);
        }
    }
    s
}

/// Expands `p` to `width × height`: zero insertion on the replicate-extended
/// coarse grid, blurred by 2 × KERNEL along each axis, then cropped.
pub fn upsample2(p: &Plane, width: usize, height: usize) -> Plane {
    let ch = p.height();
    let mut rows = vec![0.0; width * ch];
    for y in 0..ch {
        for x in 0..width {
            rows[y * width + x] = expand_tap(x, |j| p.get_clamped(j, y as isize));
        }
    }
    let rows = Plane::new(width, ch, rows).expect("dims");
    Plane::from_fn(width, height, |x, y| {
        expand_tap(y, |j| rows.get_clamped(x as isize, j))
    })
}

pub fn gaussian_pyramid(p: &Plane, levels: usize) -> Result<Pyramid> {
    check_levels(p, levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(p.clone());
    for _ in 1..levels {
        let next = decimate(&blur5(out.last().expect("nonempty")));
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

pub fn laplacian_pyramid(p: &Plane, levels: usize) -> Result<Pyramid> {
    let g = gaussian_pyramid(p, levels)?;
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels - 1 {
        let (w, h) = g.levels[l].dims();
        let up = upsample2(&g.levels[l + 1], w, h);
        out.push(g.levels[l].zip_map(&up, |a, b| a - b)?);
    }
    out.push(g.levels[levels - 1].clone());
    Ok(Pyramid { levels: out })
}

/// Upsample-and-add from the coarsest level down to level 0.
pub fn collapse(pyr: &Pyramid) -> Result<Plane> {
    let mut acc = pyr
        .levels
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty pyramid".into()))?
        .clone();
    for level in pyr.levels.iter().rev().skip(1) {
        let (w, h) = level.dims();
        let up = upsample2(&acc, w, h);
        acc = level.zip_map(&up, |a, b| a + b)?;
    }
    Ok(acc)
}

/// Multi-scale fusion of the fused subset with normalized, unsmoothed
/// contrast·saturation·exposedness weights. Returns the per-channel result
/// before clamping.
pub fn mertens_fuse_unclamped(sets: &SceneSets, levels: usize) -> Result<[Plane; 3]> {
    let images: Vec<&Image> = sets.fuse_images().collect();
    let weights = normalized_weights(images.iter().copied())?;
    let jobs: Vec<(&Image, &Plane)> = images.iter().copied().zip(&weights).collect();
    // Per image: weight Gaussian pyramid and per-channel Laplacian pyramids.
    let pyramids = par::map_slice(&jobs, |(img, w)| -> Result<_> {
        let gw = gaussian_pyramid(w, levels)?;
        let lz = img
            .channels()
            .iter()
            .map(|c| laplacian_pyramid(c, levels))
            .collect::<Result<Vec<_>>>()?;
        Ok((gw, lz))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let fuse_channel = |c: usize| -> Result<Plane> {
        let mut fused = Vec::with_capacity(levels);
        for l in 0..levels {
            let (w, h) = pyramids[0].0.levels[l].dims();
            let mut acc = vec![0.0; w * h];
            for (gw, lz) in &pyramids {
                let wl = gw.levels[l].data();
                let zl = lz[c].levels[l].data();
                for i in 0..acc.len() {
                    acc[i] += wl[i] * zl[i];
                }
            }
            fused.push(Plane::new(w, h, acc)?);
        }
        collapse(&Pyramid { levels: fused })
    };
    let [r, g, b]: [Result<Plane>; 3] = [fuse_channel(0), fuse_channel(1), fuse_channel(2)];
    Ok([r?, g?, b?])
}

pub fn mertens_fuse(sets: &SceneSets, levels: usize) -> Result<Image> {
    let [r, g, b] = mertens_fuse_unclamped(sets, levels)?;
    Ok(Image::from_channels([&r, &g, &b])?.clamped())
}
