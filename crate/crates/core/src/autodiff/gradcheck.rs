use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative disagreement of an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, over every coordinate of `x`.
/// Returns the largest relative error.
pub fn grad_check<F>(x: &Tensor, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(x, eps, &coords, f)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_at<F>(x: &Tensor, eps: f64, coords: &[usize], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let out = f(&mut g, xv)?;
    let analytic = g.backward(out)?.wrt(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(t)?;
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Result of checking one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so the kinks of `abs` and leaky ReLU sit
/// outside the difference stencil.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Values whose channels differ by at least 0.1 at every pixel, so a max
/// over channels has no ties within the finite-difference step.
fn channel_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut data = vec![0.0; n * c * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut levels: Vec<f64> = (0..c).map(|k| k as f64 * 0.3 - 0.4).collect();
            levels.shuffle(rng);
            for (k, l) in levels.into_iter().enumerate() {
                data[(b * c + k) * hw + p] = l + rng.random_range(0.0..0.1);
            }
        }
    }
    Tensor::new(shape, data).expect("shape")
}

/// Contracts `y` with fixed random weights into a scalar.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case<'a> = (&'static str, &'a Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>);

/// Central-difference check (step 1e-5) of every differentiable operation
/// on random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 5, 6];
    let x = random_off_zero(&mut rng, &shape);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let b = random(&mut rng, &[4]);
    let other = random(&mut rng, &shape);
    let per_channel = random(&mut rng, &[2, 3, 1, 1]);
    let per_pixel = random(&mut rng, &[2, 1, 5, 6]);
    let small_x = random(&mut rng, &[1, 3, 4, 4]);
    let separated = channel_separated(&mut rng, &shape);

    let cases: Vec<Case> = vec![
        ("conv2d input", &x, Box::new(|g, v| {
            let (w, b) = (g.constant(w.clone())?, g.constant(b.clone())?);
            let y = g.conv2d(v, w, Some(b), 1)?;
            project(g, y, 10)
        })),
        ("conv2d input unpadded", &x, Box::new(|g, v| {
            let w = g.constant(w.clone())?;
            let y = g.conv2d(v, w, None, 0)?;
            project(g, y, 11)
        })),
        ("conv2d weight", &w, Box::new(|g, v| {
            let (xv, b) = (g.constant(small_x.clone())?, g.constant(b.clone())?);
            let y = g.conv2d(xv, v, Some(b), 1)?;
            let y = g.sigmoid(y)?;
            project(g, y, 30)
        })),
        ("conv2d bias", &b, Box::new(|g, v| {
            let (xv, wv) = (g.constant(small_x.clone())?, g.constant(w.clone())?);
            let y = g.conv2d(xv, wv, Some(v), 1)?;
            let y = g.sigmoid(y)?;
            project(g, y, 31)
        })),
        ("leaky_relu", &x, Box::new(|g, v| {
            let y = g.leaky_relu(v, 0.2)?;
            project(g, y, 12)
        })),
        ("sigmoid", &x, Box::new(|g, v| {
            let y = g.sigmoid(v)?;
            project(g, y, 13)
        })),
        ("add", &x, Box::new(|g, v| {
            let o = g.constant(other.clone())?;
            let y = g.add(v, o)?;
            let y = g.mul(y, y)?;
            project(g, y, 14)
        })),
        ("sub", &x, Box::new(|g, v| {
            let o = g.constant(other.clone())?;
            let y = g.sub(o, v)?;
            let y = g.mul(y, y)?;
            project(g, y, 15)
        })),
        ("mul", &x, Box::new(|g, v| {
            let o = g.constant(other.clone())?;
            let y = g.mul(v, o)?;
            project(g, y, 16)
        })),
        ("mul broadcast channel", &x, Box::new(|g, v| {
            let o = g.constant(per_channel.clone())?;
            let y = g.mul(v, o)?;
            project(g, y, 17)
        })),
        ("mul broadcast pixel", &x, Box::new(|g, v| {
            let o = g.constant(per_pixel.clone())?;
            let y = g.mul(o, v)?;
            project(g, y, 18)
        })),
        ("mul broadcast operand", &per_channel, Box::new(|g, v| {
            let o = g.constant(x.clone())?;
            let y = g.mul(o, v)?;
            project(g, y, 28)
        })),
        ("concat", &x, Box::new(|g, v| {
            let o = g.constant(other.clone())?;
            let y = g.concat(&[o, v, o])?;
            let y = g.mul(y, y)?;
            project(g, y, 19)
        })),
        ("bilinear upsample", &x, Box::new(|g, v| {
            let y = g.bilinear_resample(v, 2.0)?;
            project(g, y, 20)
        })),
        ("bilinear downsample", &x, Box::new(|g, v| {
            let y = g.bilinear_resample(v, 0.5)?;
            project(g, y, 21)
        })),
        ("bicubic downsample", &x, Box::new(|g, v| {
            let y = g.bicubic_downsample(v, 2)?;
            project(g, y, 22)
        })),
        ("global_avg_pool", &x, Box::new(|g, v| {
            let y = g.global_avg_pool(v)?;
            let y = g.mul(y, y)?;
            project(g, y, 23)
        })),
        ("channel_max_pool", &separated, Box::new(|g, v| {
            let y = g.channel_max_pool(v)?;
            project(g, y, 24)
        })),
        ("channel_avg_pool", &x, Box::new(|g, v| {
            let y = g.channel_avg_pool(v)?;
            project(g, y, 25)
        })),
        ("mean", &x, Box::new(|g, v| {
            let y = g.mul(v, v)?;
            g.mean(y)
        })),
        ("sum", &x, Box::new(|g, v| {
            let y = g.mul(v, v)?;
            g.sum(y)
        })),
        ("abs", &x, Box::new(|g, v| {
            let y = g.abs(v)?;
            project(g, y, 26)
        })),
        ("scale and add_scalar", &x, Box::new(|g, v| {
            let y = g.scale(v, -1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            let y = g.mul(y, y)?;
            project(g, y, 27)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, input, f)| {
            Ok(OpCheck {
                name: name.to_string(),
                max_rel_error: grad_check(input, 1e-5, |g, v| f(g, v))?,
            })
        })
        .collect()
}
