//! Separable linear resampling plans (bilinear and Catmull-Rom bicubic).
//!
//! Output pixel i samples the input at `(i + 0.5) · in/out − 0.5`; taps
//! outside the input replicate the edge. Every row of taps sums to one, so
//! constants are preserved exactly.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Bilinear,
    /// Catmull-Rom, a = −0.5.
    Bicubic,
}

/// Taps of a 1-D linear map: for each output index, (input index, weight).
#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub len_in: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

impl Taps {
    pub fn new(kernel: Kernel, len_in: usize, len_out: usize) -> Self {
        let scale = len_in as f64 / len_out as f64;
        let clamp = |j: isize| j.clamp(0, len_in as isize - 1) as usize;
        let taps = (0..len_out)
            .map(|i| {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                let mut push = |j: usize, w: f64| {
                    if w == 0.0 {
                        return;
                    }
                    match row.iter_mut().find(|(k, _)| *k == j) {
                        Some(e) => e.1 += w,
                        None => row.push((j, w)),
                    }
                };
                match kernel {
                    Kernel::Bilinear => {
                        let src = src.max(0.0);
                        let f = src.floor();
                        let t = src - f;
                        let j = f as isize;
                        push(clamp(j), 1.0 - t);
                        push(clamp(j + 1), t);
                    }
                    Kernel::Bicubic => {
                        let f = src.floor();
                        let t = src - f;
                        let j = f as isize;
                        for o in -1..=2isize {
                            push(clamp(j + o), cubic(t - o as f64));
                        }
                    }
                }
                row
            })
            .collect();
        Self { len_in, taps }
    }

    pub fn len_out(&self) -> usize {
        self.taps.len()
    }
}

/// A separable 2-D resampling plan from `in_h × in_w` to `out_h × out_w`.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    pub(crate) rows: Taps,
    pub(crate) cols: Taps,
}

impl ResamplePlan {
    pub fn new(kernel: Kernel, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            rows: Taps::new(kernel, in_h, out_h),
            cols: Taps::new(kernel, in_w, out_w),
        }
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.rows.len_in, self.cols.len_in)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.rows.len_out(), self.cols.len_out())
    }

    /// Applies the plan to one `in_h × in_w` plane.
    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        let (ih, iw) = self.in_dims();
        let (oh, ow) = self.out_dims();
        debug_assert_eq!(src.len(), ih * iw);
        debug_assert_eq!(dst.len(), oh * ow);
        let mut tmp = vec![0.0; ih * ow];
        for y in 0..ih {
            let row = &src[y * iw..(y + 1) * iw];
            for (x, taps) in self.cols.taps.iter().enumerate() {
                tmp[y * ow + x] = taps.iter().map(|&(j, w)| w * row[j]).sum();
            }
        }
        dst.iter_mut().for_each(|v| *v = 0.0);
        for (y, taps) in self.rows.taps.iter().enumerate() {
            let out = &mut dst[y * ow..(y + 1) * ow];
            for &(j, w) in taps {
                let t = &tmp[j * ow..(j + 1) * ow];
                for (o, v) in out.iter_mut().zip(t) {
                    *o += w * v;
                }
            }
        }
    }

    /// Adds the transpose of the plan applied to `grad_out` into `grad_in`.
    pub fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let (ih, iw) = self.in_dims();
        let (_, ow) = self.out_dims();
        let mut tmp = vec![0.0; ih * ow];
        for (y, taps) in self.rows.taps.iter().enumerate() {
            let g = &grad_out[y * ow..(y + 1) * ow];
            for &(j, w) in taps {
                let t = &mut tmp[j * ow..(j + 1) * ow];
                for (o, v) in t.iter_mut().zip(g) {
                    *o += w * v;
                }
            }
        }
        for y in 0..ih {
            let out = &mut grad_in[y * iw..(y + 1) * iw];
            for (x, taps) in self.cols.taps.iter().enumerate() {
                let g = tmp[y * ow + x];
                for &(j, w) in taps {
                    out[j] += w * g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_partition_unity() {
        for kernel in [Kernel::Bilinear, Kernel::Bicubic] {
            for (a, b) in [(16, 8), (8, 16), (9, 5), (5, 10), (7, 7)] {
                for row in Taps::new(kernel, a, b).taps {
                    let s: f64 = row.iter().map(|t| t.1).sum();
                    assert!((s - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn bicubic_half_uses_catmull_rom_midpoint_weights() {
        let t = Taps::new(Kernel::Bicubic, 8, 4);
        let mut row = t.taps[1].clone();
        row.sort_by_key(|e| e.0);
        let w: Vec<f64> = row.iter().map(|e| e.1).collect();
        assert_eq!(row.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        for (got, want) in w.iter().zip([-0.0625, 0.5625, 0.5625, -0.0625]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let plan = ResamplePlan::new(Kernel::Bicubic, 6, 5, 3, 9);
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..27).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut ax = vec![0.0; 27];
        plan.apply(&x, &mut ax);
        let mut aty = vec![0.0; 30];
        plan.apply_transpose(&y, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
