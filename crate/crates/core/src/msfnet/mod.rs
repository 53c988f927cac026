//! The multi-scale fusion network.
//!
//! Inputs are concatenated along channels, lifted to features, and a
//! feature pyramid is built by bicubic halving. Each scale runs a fusion
//! network over its own features plus the upsampled features carried from
//! the coarser scale, and a sigmoid head emits that scale's image.

mod params;

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Kernel, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

pub use params::{param_layout, residual_branch_finals, NetParams};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Number of fused input exposures.
    pub inputs: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub msrrg_per_scale: usize,
    pub dabs_per_msrrg: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub channel_attention_reduction: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            inputs: 2,
            levels: 3,
            base_channels: 16,
            msrrg_per_scale: 1,
            dabs_per_msrrg: 2,
            kernel: 3,
            leaky_slope: 0.2,
            channel_attention_reduction: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("net config: {m}")));
        if self.inputs == 0 || self.levels == 0 || self.msrrg_per_scale == 0 || self.dabs_per_msrrg == 0 {
            return bad("counts must be at least 1");
        }
        if self.base_channels < 4 {
            return bad("base_channels must be at least 4");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.channel_attention_reduction == 0 {
            return bad("channel attention reduction must be at least 1");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky slope must be finite and nonnegative");
        }
        Ok(())
    }

    pub(crate) fn reduced_channels(&self) -> usize {
        (self.base_channels / self.channel_attention_reduction).max(1)
    }

    /// One-line `key=value` rendering, stored in parameter files.
    pub fn to_echo(&self) -> String {
        format!(
            "inputs={} levels={} base_channels={} msrrg_per_scale={} dabs_per_msrrg={} kernel={} leaky_slope={:?} channel_attention_reduction={}",
            self.inputs,
            self.levels,
            self.base_channels,
            self.msrrg_per_scale,
            self.dabs_per_msrrg,
            self.kernel,
            self.leaky_slope,
            self.channel_attention_reduction
        )
    }

    pub fn from_echo(s: &str) -> Result<Self> {
        let mut cfg = NetConfig::default();
        for item in s.split_whitespace() {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::ParamFormat(format!("bad config item {item:?}")))?;
            cfg.set(k, v).map_err(|e| Error::ParamFormat(e.to_string()))?;
        }
        cfg.validate().map_err(|e| Error::ParamFormat(e.to_string()))?;
        Ok(cfg)
    }

    /// Sets a field by name from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("{key}: expected an integer, got {value:?}")))
        };
        match key {
            "inputs" => self.inputs = int()?,
            "levels" => self.levels = int()?,
            "base_channels" => self.base_channels = int()?,
            "msrrg_per_scale" => self.msrrg_per_scale = int()?,
            "dabs_per_msrrg" => self.dabs_per_msrrg = int()?,
            "kernel" => self.kernel = int()?,
            "channel_attention_reduction" => self.channel_attention_reduction = int()?,
            "leaky_slope" => {
                self.leaky_slope = value
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("leaky_slope: bad number {value:?}")))?
            }
            _ => return Err(Error::InvalidArgument(format!("unknown net config key {key:?}"))),
        }
        Ok(())
    }
}

/// Parameters registered on a graph, addressed by name.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Records every parameter tensor as a leaf of `g`.
    pub fn register(g: &mut Graph, params: &NetParams, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.tensors() {
            vars.insert(name.clone(), g.leaf(t.clone(), trainable)?);
        }
        Ok(Self { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Which scale images to materialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    Finest,
    All,
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Finest-scale image `[1, 3, H, W]`.
    pub fused: Var,
    /// Per-scale images, coarse to fine. Only the finest is present with
    /// [`Heads::Finest`].
    pub scales: Vec<Var>,
}

/// Builds a `[1, 3k, H, W]` tensor from `k` images.
pub fn stack_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no input images".into()))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dims() != (w, h) {
            return Err(Error::DimensionMismatch(format!(
                "input images are {w}x{h} and {}x{}",
                img.dims().0,
                img.dims().1
            )));
        }
        data.extend(img.to_planar());
    }
    Tensor::new(&[1, 3 * images.len(), h, w], data)
}

/// Converts a `[1, 3, H, W]` tensor to an image.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let [n, c, h, w] = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("expected [1, 3, h, w], got {:?}", t.shape())));
    }
    Image::from_planar(w, h, t.data())
}

struct Net<'a> {
    g: &'a mut Graph,
    p: &'a ParamVars,
    cfg: &'a NetConfig,
}

impl Net<'_> {
    fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        let k = self.g.shape(w)[2];
        self.g.conv2d(x, w, Some(b), k / 2)
    }

    fn lrelu(&mut self, x: Var) -> Result<Var> {
        self.g.leaky_relu(x, self.cfg.leaky_slope)
    }

    fn feature_extract(&mut self, x: Var) -> Result<Var> {
        let y = self.conv("fe.conv1", x)?;
        let y = self.lrelu(y)?;
        self.conv("fe.conv2", y)
    }

    fn dab(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let u = self.conv(&format!("{prefix}.conv1"), x)?;
        let u = self.lrelu(u)?;
        let u = self.conv(&format!("{prefix}.conv2"), u)?;

        let gate = self.g.global_avg_pool(u)?;
        let gate = self.conv(&format!("{prefix}.ca.reduce"), gate)?;
        let gate = self.lrelu(gate)?;
        let gate = self.conv(&format!("{prefix}.ca.restore"), gate)?;
        let gate = self.g.sigmoid(gate)?;
        let ca = self.g.mul(u, gate)?;

        let avg = self.g.channel_avg_pool(u)?;
        let max = self.g.channel_max_pool(u)?;
        let pooled = self.g.concat(&[avg, max])?;
        let mask = self.conv(&format!("{prefix}.sa"), pooled)?;
        let mask = self.g.sigmoid(mask)?;
        let sa = self.g.mul(u, mask)?;

        let both = self.g.concat(&[ca, sa])?;
        let branch = self.conv(&format!("{prefix}.compress"), both)?;
        self.g.add(x, branch)
    }

    fn msrrg(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let [_, _, h, w] = self.g.value(x).dims4()?;
        let half = self.g.bilinear_resample(x, 0.5)?;
        let half = self.dab(&format!("{prefix}.half"), half)?;
        let up = self.g.resample(half, Kernel::Bilinear, h, w)?;
        let merged = self.g.concat(&[x, up])?;
        let mut y = self.conv(&format!("{prefix}.merge"), merged)?;
        for d in 1..=self.cfg.dabs_per_msrrg {
            y = self.dab(&format!("{prefix}.dab{d}"), y)?;
        }
        let branch = self.conv(&format!("{prefix}.out"), y)?;
        self.g.add(x, branch)
    }

    /// Runs scale `l` (1 = coarsest). Returns the carried features and,
    /// when requested, the scale image.
    fn fuse_scale(&mut self, l: usize, feat: Var, prev: Option<Var>, head: bool) -> Result<(Var, Option<Var>)> {
        let v = match prev {
            None => feat,
            Some(p) => {
                let [_, _, h, w] = self.g.value(feat).dims4()?;
                let up = self.g.resample(p, Kernel::Bilinear, h, w)?;
                self.g.concat(&[feat, up])?
            }
        };
        let mut y = self.conv(&format!("s{l}.entry"), v)?;
        for gi in 1..=self.cfg.msrrg_per_scale {
            y = self.msrrg(&format!("s{l}.g{gi}"), y)?;
        }
        let img = if head {
            let z = self.conv(&format!("s{l}.head"), y)?;
            Some(self.g.sigmoid(z)?)
        } else {
            None
        };
        Ok((y, img))
    }
}

fn check_input(g: &Graph, x: Var, cfg: &NetConfig) -> Result<()> {
    let [n, c, h, w] = g.value(x).dims4()?;
    if n != 1 || c != 3 * cfg.inputs {
        return Err(Error::Shape(format!(
            "network expects [1, {}, h, w] input, got {:?}",
            3 * cfg.inputs,
            g.shape(x)
        )));
    }
    let min_side = 1usize << (cfg.levels - 1);
    if h < min_side || w < min_side {
        return Err(Error::InvalidArgument(format!(
            "{w}x{h} input is too small for {} pyramid levels",
            cfg.levels
        )));
    }
    Ok(())
}

/// Conv → leaky ReLU → conv over the channel-stacked inputs.
pub fn feature_extract(g: &mut Graph, p: &ParamVars, cfg: &NetConfig, x: Var) -> Result<Var> {
    check_input(g, x, cfg)?;
    Net { g, p, cfg }.feature_extract(x)
}

/// Feature pyramid by repeated bicubic halving, ordered coarse to fine.
pub fn build_feature_pyramid(g: &mut Graph, features: Var, levels: usize) -> Result<Vec<Var>> {
    let [_, _, h, w] = g.value(features).dims4()?;
    if levels == 0 || levels > usize::BITS as usize || h.min(w) < 1usize << (levels - 1) {
        return Err(Error::InvalidArgument(format!("{levels} levels infeasible for {w}x{h}")));
    }
    let mut out = vec![features];
    for _ in 1..levels {
        let next = g.bicubic_downsample(*out.last().expect("nonempty"), 2)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// One dual-attention block with parameters under `prefix`.
pub fn dab_forward(g: &mut Graph, p: &ParamVars, cfg: &NetConfig, prefix: &str, x: Var) -> Result<Var> {
    Net { g, p, cfg }.dab(prefix, x)
}

/// One multi-scale residual group with parameters under `prefix`.
pub fn msrrg_forward(g: &mut Graph, p: &ParamVars, cfg: &NetConfig, prefix: &str, x: Var) -> Result<Var> {
    Net { g, p, cfg }.msrrg(prefix, x)
}

/// Scale `l` of the coarse-to-fine fusion. `prev` must be present exactly
/// when `l > 1`. Returns the scale image and the carried features.
pub fn fuse_scale(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &NetConfig,
    l: usize,
    feat: Var,
    prev: Option<Var>,
) -> Result<(Var, Var)> {
    if (l == 1) != prev.is_none() || l == 0 || l > cfg.levels {
        return Err(Error::InvalidArgument(format!(
            "scale {l} of {} with{} carried features",
            cfg.levels,
            if prev.is_some() { "" } else { "out" }
        )));
    }
    let (carry, img) = Net { g, p, cfg }.fuse_scale(l, feat, prev, true)?;
    Ok((img.expect("head requested"), carry))
}

/// Full network on a `[1, 3·inputs, H, W]` input.
pub fn forward_graph(g: &mut Graph, p: &ParamVars, cfg: &NetConfig, x: Var, heads: Heads) -> Result<ForwardOutput> {
    let feats = feature_extract(g, p, cfg, x)?;
    let pyramid = build_feature_pyramid(g, feats, cfg.levels)?;
    let mut net = Net { g, p, cfg };
    let mut prev = None;
    let mut scales = Vec::new();
    for (i, &feat) in pyramid.iter().enumerate() {
        let l = i + 1;
        let head = heads == Heads::All || l == cfg.levels;
        let (carry, img) = net.fuse_scale(l, feat, prev, head)?;
        scales.extend(img);
        prev = Some(carry);
    }
    Ok(ForwardOutput {
        fused: *scales.last().expect("finest head"),
        scales,
    })
}

/// Fuses `images` (the fused set, in exposure order) with fixed parameters.
pub fn forward(images: &[&Image], params: &NetParams) -> Result<Image> {
    let cfg = params.config();
    if images.len() != cfg.inputs {
        return Err(Error::InvalidArgument(format!(
            "network was built for {} inputs, got {}",
            cfg.inputs,
            images.len()
        )));
    }
    let mut g = Graph::new();
    let p = ParamVars::register(&mut g, params, false)?;
    let x = g.constant(stack_tensor(images)?)?;
    let out = forward_graph(&mut g, &p, cfg, x, Heads::Finest)?;
    tensor_to_image(g.value(out.fused))
}
