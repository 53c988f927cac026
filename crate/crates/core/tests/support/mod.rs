//! Straightforward nested-loop reference implementations. They share no code
//! with the library beyond plain data access.

#![allow(dead_code)]

use fuselab::image::{Image, Plane};

pub type Grid = Vec<Vec<f64>>;

pub fn grid_of(p: &Plane) -> Grid {
    (0..p.height()).map(|y| (0..p.width()).map(|x| p.get(x, y)).collect()).collect()
}

fn at(g: &Grid, x: isize, y: isize) -> f64 {
    let h = g.len() as isize;
    let w = g[0].len() as isize;
    g[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize]
}

pub fn luminance(img: &Image) -> Grid {
    (0..img.height())
        .map(|y| {
            (0..img.width())
                .map(|x| {
                    let [r, g, b] = img.pixel(x, y);
                    0.299 * r + 0.587 * g + 0.114 * b
                })
                .collect()
        })
        .collect()
}

pub fn raw_weight(img: &Image) -> Grid {
    let y = luminance(img);
    let kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let mut out = vec![vec![0.0; img.width()]; img.height()];
    for (py, row) in out.iter_mut().enumerate() {
        for (px, o) in row.iter_mut().enumerate() {
            let mut lap = 0.0;
            for (ky, krow) in kernel.iter().enumerate() {
                for (kx, k) in krow.iter().enumerate() {
                    lap += k * at(&y, px as isize + kx as isize - 1, py as isize + ky as isize - 1);
                }
            }
            let rgb = img.pixel(px, py);
            let mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
            let var = rgb.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            let mut e = 1.0;
            for v in rgb {
                e *= (-(v - 0.5).powi(2) / (2.0 * 0.2 * 0.2)).exp();
            }
            *o = lap.abs() * var.sqrt() * e + 1e-12;
        }
    }
    out
}

pub fn normalize(raws: &[Grid]) -> Vec<Grid> {
    let (h, w) = (raws[0].len(), raws[0][0].len());
    let mut out = raws.to_vec();
    for y in 0..h {
        for x in 0..w {
            let s: f64 = raws.iter().map(|r| r[y][x]).sum();
            for o in out.iter_mut() {
                o[y][x] /= s;
            }
        }
    }
    out
}

/// Guided filter by explicit least squares in every window.
pub fn guided_filter(guide: &Grid, input: &Grid, r: usize, eps: f64) -> Grid {
    let (h, w) = (guide.len(), guide[0].len());
    let r = r as isize;
    let window = |x: usize, y: usize| {
        let mut pts = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                pts.push((x as isize + dx, y as isize + dy));
            }
        }
        pts
    };
    let mut a = vec![vec![0.0; w]; h];
    let mut b = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let pts = window(x, y);
            let n = pts.len() as f64;
            let mg = pts.iter().map(|&(i, j)| at(guide, i, j)).sum::<f64>() / n;
            let mi = pts.iter().map(|&(i, j)| at(input, i, j)).sum::<f64>() / n;
            let var = pts.iter().map(|&(i, j)| (at(guide, i, j) - mg).powi(2)).sum::<f64>() / n;
            let cov = pts
                .iter()
                .map(|&(i, j)| (at(guide, i, j) - mg) * (at(input, i, j) - mi))
                .sum::<f64>()
                / n;
            a[y][x] = cov / (var + eps);
            b[y][x] = mi - a[y][x] * mg;
        }
    }
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let pts = window(x, y);
            let n = pts.len() as f64;
            let ma = pts.iter().map(|&(i, j)| at(&a, i, j)).sum::<f64>() / n;
            let mb = pts.iter().map(|&(i, j)| at(&b, i, j)).sum::<f64>() / n;
            out[y][x] = ma * guide[y][x] + mb;
        }
    }
    out
}

pub fn smoothed_weights(images: &[&Image]) -> Vec<Grid> {
    let (w, h) = images[0].dims();
    let r = (w.min(h) / 16).max(2);
    let raws: Vec<Grid> = images.iter().map(|im| raw_weight(im)).collect();
    let norm = normalize(&raws);
    let filtered: Vec<Grid> = images
        .iter()
        .zip(&norm)
        .map(|(im, wgt)| {
            guided_filter(&luminance(im), wgt, r, 1e-2)
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
                .collect()
        })
        .collect();
    let mut out = filtered.clone();
    let k = images.len() as f64;
    for y in 0..h {
        for x in 0..w {
            let s: f64 = filtered.iter().map(|f| f[y][x]).sum();
            for o in out.iter_mut() {
                o[y][x] = if s > 1e-12 { o[y][x] / s } else { 1.0 / k };
            }
        }
    }
    out
}

pub fn loss_w(images: &[&Image], fused: &Image) -> f64 {
    let weights = smoothed_weights(images);
    let (w, h) = fused.dims();
    let mut total = 0.0;
    for (im, wgt) in images.iter().zip(&weights) {
        for y in 0..h {
            for x in 0..w {
                let (f, z) = (fused.pixel(x, y), im.pixel(x, y));
                let l1: f64 = (0..3).map(|c| (f[c] - z[c]).abs()).sum();
                total += wgt[y][x] * l1;
            }
        }
    }
    total / (w * h) as f64
}

pub const PATCH: usize = 8;
pub const STRIDE: usize = 4;

fn patch(g: &Grid, x0: usize, y0: usize, size: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for row in &g[y0..y0 + size] {
        v.extend_from_slice(&row[x0..x0 + size]);
    }
    v
}

/// Desired patch from co-located measurement patches.
pub fn desired(patches: &[Vec<f64>], global_means: &[f64]) -> Vec<f64> {
    let n = patches[0].len();
    let mut c_hat: f64 = 0.0;
    let mut s_bar = vec![0.0; n];
    let mut inf_sum = 0.0;
    let (mut l_num, mut l_den) = (0.0, 0.0);
    for (p, &mu) in patches.iter().zip(global_means) {
        let l = p.iter().sum::<f64>() / n as f64;
        let mut c = 0.0;
        for v in p {
            c += (v - l) * (v - l);
        }
        let c = c.sqrt();
        c_hat = c_hat.max(c);
        let mut inf: f64 = 0.0;
        for v in p {
            inf = inf.max((v - l).abs());
        }
        inf_sum += inf;
        if c >= 1e-12 {
            for (sb, v) in s_bar.iter_mut().zip(p) {
                *sb += inf * (v - l) / c;
            }
        }
        let wl = (-(mu - 0.5).powi(2) / (2.0 * 0.2 * 0.2) - (l - 0.5).powi(2) / (2.0 * 0.5 * 0.5)).exp();
        l_num += wl * l;
        l_den += wl;
    }
    let l_hat = l_num / l_den;
    let mut s_hat = vec![0.0; n];
    if inf_sum > 0.0 {
        let avg: Vec<f64> = s_bar.iter().map(|v| v / inf_sum).collect();
        let len = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len > 1e-12 {
            for (s, v) in s_hat.iter_mut().zip(&avg) {
                *s = v / len;
            }
        }
    }
    s_hat.iter().map(|s| c_hat * s + l_hat).collect()
}

pub fn ssim(z: &[f64], f: &[f64]) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = z.len() as f64;
    let mz = z.iter().sum::<f64>() / n;
    let mf = f.iter().sum::<f64>() / n;
    let mut vz = 0.0;
    let mut vf = 0.0;
    let mut cov = 0.0;
    for i in 0..z.len() {
        vz += (z[i] - mz).powi(2) / n;
        vf += (f[i] - mf).powi(2) / n;
        cov += (z[i] - mz) * (f[i] - mf) / n;
    }
    (2.0 * mz * mf + c1) / (mf * mf + mz * mz + c1) * (2.0 * cov + c2) / (vf + vz + c2)
}

pub fn mef_ssim(images: &[&Image], fused: &Image) -> f64 {
    let lums: Vec<Grid> = images.iter().map(|im| luminance(im)).collect();
    let means: Vec<f64> = lums
        .iter()
        .map(|g| g.iter().flatten().sum::<f64>() / (g.len() * g[0].len()) as f64)
        .collect();
    let f = luminance(fused);
    let (w, h) = fused.dims();
    let mut total = 0.0;
    let mut m = 0;
    let mut y0 = 0;
    while y0 + PATCH <= h {
        let mut x0 = 0;
        while x0 + PATCH <= w {
            let ps: Vec<Vec<f64>> = lums.iter().map(|g| patch(g, x0, y0, PATCH)).collect();
            total += ssim(&desired(&ps, &means), &patch(&f, x0, y0, PATCH));
            m += 1;
            x0 += STRIDE;
        }
        y0 += STRIDE;
    }
    total / m as f64
}

const K5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Blur with the full 5×5 outer-product kernel, then keep even samples.
pub fn reduce(g: &Grid) -> Grid {
    let (h, w) = (g.len(), g[0].len());
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![vec![0.0; w2]; h2];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, o) in row.iter_mut().enumerate() {
            for (b, kb) in K5.iter().enumerate() {
                for (a, ka) in K5.iter().enumerate() {
                    *o += ka * kb * at(g, 2 * x as isize + a as isize - 2, 2 * y as isize + b as isize - 2);
                }
            }
        }
    }
    out
}

/// Zero-insert on an unbounded replicate-extended coarse grid, filter with
/// 4 × the 5×5 kernel, crop to `w × h`.
pub fn expand(g: &Grid, w: usize, h: usize) -> Grid {
    let mut out = vec![vec![0.0; w]; h];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, o) in row.iter_mut().enumerate() {
            for (b, kb) in K5.iter().enumerate() {
                for (a, ka) in K5.iter().enumerate() {
                    let fx = x as isize + a as isize - 2;
                    let fy = y as isize + b as isize - 2;
                    if fx.rem_euclid(2) == 0 && fy.rem_euclid(2) == 0 {
                        *o += 4.0 * ka * kb * at(g, fx.div_euclid(2), fy.div_euclid(2));
                    }
                }
            }
        }
    }
    out
}

pub fn gaussian(g: &Grid, levels: usize) -> Vec<Grid> {
    let mut out = vec![g.clone()];
    for _ in 1..levels {
        let next = reduce(out.last().unwrap());
        out.push(next);
    }
    out
}

pub fn laplacian(g: &Grid, levels: usize) -> Vec<Grid> {
    let gp = gaussian(g, levels);
    let mut out = Vec::new();
    for l in 0..levels - 1 {
        let (h, w) = (gp[l].len(), gp[l][0].len());
        let up = expand(&gp[l + 1], w, h);
        out.push(
            gp[l].iter()
                .zip(&up)
                .map(|(a, b)| a.iter().zip(b).map(|(a, b)| a - b).collect())
                .collect(),
        );
    }
    out.push(gp[levels - 1].clone());
    out
}

pub fn collapse(pyr: &[Grid]) -> Grid {
    let mut acc = pyr.last().unwrap().clone();
    for level in pyr.iter().rev().skip(1) {
        let (h, w) = (level.len(), level[0].len());
        let up = expand(&acc, w, h);
        acc = level
            .iter()
            .zip(&up)
            .map(|(a, b)| a.iter().zip(b).map(|(a, b)| a + b).collect())
            .collect();
    }
    acc
}

/// Classic exposure fusion, unclamped, one grid per channel.
pub fn mertens(images: &[&Image], levels: usize) -> [Grid; 3] {
    let raws: Vec<Grid> = images.iter().map(|im| raw_weight(im)).collect();
    let weights = normalize(&raws);
    let (w, h) = images[0].dims();
    let channel = |im: &Image, c: usize| -> Grid {
        (0..h).map(|y| (0..w).map(|x| im.pixel(x, y)[c]).collect()).collect()
    };
    std::array::from_fn(|c| {
        let mut fused: Option<Vec<Grid>> = None;
        for (im, wgt) in images.iter().zip(&weights) {
            let gw = gaussian(wgt, levels);
            let lz = laplacian(&channel(im, c), levels);
            let term: Vec<Grid> = gw
                .iter()
                .zip(&lz)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).collect())
                        .collect()
                })
                .collect();
            fused = Some(match fused {
                None => term,
                Some(acc) => acc
                    .iter()
                    .zip(&term)
                    .map(|(a, b)| {
                        a.iter()
                            .zip(b)
                            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
                            .collect()
                    })
                    .collect(),
            });
        }
        collapse(&fused.unwrap())
    })
}

pub fn max_abs_diff(a: &Grid, b: &Grid) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
