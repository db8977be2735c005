//! Aggregation heads turning an `h x w x c` feature map into one global
//! descriptor.
//!
//! Conv-AP projects every spatial descriptor with a 1x1 convolution
//! (`c -> d` channels), average-pools the result onto an `s1 x s2` grid,
//! flattens and L2-normalizes. AVG (global average pooling) and GeM
//! (generalized mean) are the baselines.
//!
//! Layouts are fixed: feature maps are row-major over space with the
//! channel index fastest, `idx = (i * w + j) * c + ch`; flattened Conv-AP
//! descriptors use the same order over the pooled grid,
//! `idx = (i * s2 + j) * d + ch`.

use std::ops::Range;

use rand::Rng;

use crate::embedding::{l2_normalize, normalize_backward, Descriptor};
use crate::{Error, Result};

/// Dense `h x w x c` tensor of backbone activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!(
                "feature map dims must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "{} values for a {h}x{w}x{c} feature map",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature map entry".into()));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.data[(i * self.w + j) * self.c + ch]
    }

    /// The `c`-dimensional descriptor at spatial cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.w + j) * self.c;
        &self.data[start..start + self.c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Parameters of the Conv-AP head.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvAPParams {
    /// `d x c` projection, row-major (`weight[o * c + ch]`).
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub s1: usize,
    pub s2: usize,
}

impl ConvAPParams {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
        s1: usize,
        s2: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || s1 == 0 || s2 == 0 {
            return Err(Error::InvalidParam(format!(
                "Conv-AP sizes must be positive (c={in_channels}, d={out_channels}, s={s1}x{s2})"
            )));
        }
        if weight.len() != in_channels * out_channels {
            return Err(Error::Shape(format!(
                "weight has {} entries, expected {out_channels}x{in_channels}",
                weight.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::Shape(format!(
                    "bias has {} entries, expected {out_channels}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            s1,
            s2,
        })
    }

    /// Uniform `[-1/sqrt(c), 1/sqrt(c)]` weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        s1: usize,
        s2: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_channels.max(1) as f64).sqrt();
        let weight = (0..in_channels * out_channels)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let bias = with_bias.then(|| vec![0.0; out_channels]);
        Self::new(in_channels, out_channels, weight, bias, s1, s2)
    }

    /// `W = I`, no bias, which turns Conv-AP into plain adaptive pooling.
    pub fn identity(channels: usize, s1: usize, s2: usize) -> Result<Self> {
        let mut weight = vec![0.0; channels * channels];
        for k in 0..channels {
            weight[k * channels + k] = 1.0;
        }
        Self::new(channels, channels, weight, None, s1, s2)
    }

    pub fn output_dim(&self) -> usize {
        self.s1 * self.s2 * self.out_channels
    }
}

/// Trainable generalized-mean exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemParams {
    pub p: f64,
    pub p_min: f64,
}

impl Default for GemParams {
    fn default() -> Self {
        Self { p: 3.0, p_min: 1e-3 }
    }
}

impl GemParams {
    pub fn new(p: f64) -> Result<Self> {
        let params = Self {
            p,
            ..Self::default()
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.p.is_finite() || self.p < self.p_min {
            return Err(Error::InvalidParam(format!(
                "GeM exponent p={} must be finite and >= {}",
                self.p, self.p_min
            )));
        }
        Ok(())
    }
}

/// Applies `W f_ij + b` at every spatial cell.
pub fn conv1x1_forward(input: &FeatureMap, params: &ConvAPParams) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    if c != params.in_channels {
        return Err(Error::Shape(format!(
            "feature map depth {c} does not match kernel input depth {}",
            params.in_channels
        )));
    }
    let d = params.out_channels;
    let mut out = Vec::with_capacity(h * w * d);
    for cell in input.data.chunks_exact(c) {
        for o in 0..d {
            let row = &params.weight[o * c..(o + 1) * c];
            let mut acc: f64 = row.iter().zip(cell).map(|(a, b)| a * b).sum();
            if let Some(b) = &params.bias {
                acc += b[o];
            }
            out.push(acc);
        }
    }
    FeatureMap::new(h, w, d, out)
}

/// Boundaries of `bins` adaptive-pooling windows over `len` positions.
///
/// Window `i` covers `[floor(i*len/bins), floor((i+1)*len/bins))`, so the
/// windows partition the axis and each is nonempty whenever `bins <= len`.
pub fn pool_bins(len: usize, bins: usize) -> Vec<Range<usize>> {
    (0..bins)
        .map(|i| (i * len / bins)..((i + 1) * len / bins))
        .collect()
}

/// Averages the map over an `s1 x s2` grid of sub-regions.
pub fn adaptive_avg_pool(input: &FeatureMap, s1: usize, s2: usize) -> Result<FeatureMap> {
    let (h, w, c) = input.shape();
    if s1 == 0 || s2 == 0 || s1 > h || s2 > w {
        return Err(Error::Shape(format!(
            "pooling grid {s1}x{s2} does not fit a {h}x{w} map"
        )));
    }
    let rows = pool_bins(h, s1);
    let cols = pool_bins(w, s2);
    let mut out = Vec::with_capacity(s1 * s2 * c);
    for r in &rows {
        for q in &cols {
            let mut acc = vec![0.0; c];
            for i in r.clone() {
                for j in q.clone() {
                    for (a, x) in acc.iter_mut().zip(input.cell(i, j)) {
                        *a += x;
                    }
                }
            }
            let count = (r.len() * q.len()) as f64;
            out.extend(acc.into_iter().map(|a| a / count));
        }
    }
    FeatureMap::new(s1, s2, c, out)
}

/// Flattened, un-normalized Conv-AP output.
fn conv_ap_raw(input: &FeatureMap, params: &ConvAPParams) -> Result<Vec<f64>> {
    let projected = conv1x1_forward(input, params)?;
    Ok(adaptive_avg_pool(&projected, params.s1, params.s2)?.into_vec())
}

/// `l2_normalize(flatten(AAP(Conv1x1(F))))`.
pub fn conv_ap_forward(input: &FeatureMap, params: &ConvAPParams) -> Result<Descriptor> {
    l2_normalize(&conv_ap_raw(input, params)?)
}

/// Gradients of a scalar objective through Conv-AP.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvApGrads {
    /// Same layout as [`ConvAPParams::weight`].
    pub weight: Vec<f64>,
    /// Present iff the parameters carry a bias.
    pub bias: Option<Vec<f64>>,
    /// Same layout as the input feature map.
    pub input: Vec<f64>,
}

/// Backpropagates `upstream = dL/dz` through Conv-AP.
pub fn conv_ap_backward(
    input: &FeatureMap,
    params: &ConvAPParams,
    upstream: &[f64],
) -> Result<ConvApGrads> {
    let (h, w, c) = input.shape();
    let d = params.out_channels;
    if upstream.len() != params.output_dim() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, descriptor has {}",
            upstream.len(),
            params.output_dim()
        )));
    }
    let raw = conv_ap_raw(input, params)?;
    let grad_pooled = normalize_backward(&raw, upstream);

    // AAP backward: each pooled cell spreads its gradient evenly over its window.
    let rows = pool_bins(h, params.s1);
    let cols = pool_bins(w, params.s2);
    let mut grad_proj = vec![0.0; h * w * d];
    for (bi, r) in rows.iter().enumerate() {
        for (bj, q) in cols.iter().enumerate() {
            let g = &grad_pooled[(bi * params.s2 + bj) * d..][..d];
            let inv = 1.0 / (r.len() * q.len()) as f64;
            for i in r.clone() {
                for j in q.clone() {
                    let dst = &mut grad_proj[(i * w + j) * d..][..d];
                    for (o, gv) in dst.iter_mut().zip(g) {
                        *o += gv * inv;
                    }
                }
            }
        }
    }

    let mut grad_w = vec![0.0; d * c];
    let mut grad_b = vec![0.0; d];
    let mut grad_in = vec![0.0; h * w * c];
    for (cell_idx, f) in input.data.chunks_exact(c).enumerate() {
        let gp = &grad_proj[cell_idx * d..][..d];
        let gi = &mut grad_in[cell_idx * c..][..c];
        for (o, &g) in gp.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad_b[o] += g;
            let wrow = &params.weight[o * c..(o + 1) * c];
            let gw = &mut grad_w[o * c..(o + 1) * c];
            for k in 0..c {
                gw[k] += g * f[k];
                gi[k] += g * wrow[k];
            }
        }
    }
    Ok(ConvApGrads {
        weight: grad_w,
        bias: params.bias.as_ref().map(|_| grad_b),
        input: grad_in,
    })
}

/// Per-channel spatial mean, before normalization.
pub fn channel_means(input: &FeatureMap) -> Vec<f64> {
    let c = input.channels();
    let mut acc = vec![0.0; c];
    for cell in input.data.chunks_exact(c) {
        for (a, x) in acc.iter_mut().zip(cell) {
            *a += x;
        }
    }
    let n = (input.h * input.w) as f64;
    acc.into_iter().map(|a| a / n).collect()
}

/// Global average pooling followed by L2 normalization.
pub fn avg_pool(input: &FeatureMap) -> Result<Descriptor> {
    l2_normalize(&channel_means(input))
}

/// Per-channel generalized mean `(mean x^p)^(1/p)` of the map clamped at
/// zero, before normalization.
pub fn gem_raw(input: &FeatureMap, params: &GemParams) -> Result<Vec<f64>> {
    params.validate()?;
    let p = params.p;
    let c = input.channels();
    let mut acc = vec![0.0; c];
    for cell in input.data.chunks_exact(c) {
        for (a, &x) in acc.iter_mut().zip(cell) {
            *a += pow_clamped(x, p);
        }
    }
    let n = (input.h * input.w) as f64;
    Ok(acc.into_iter().map(|a| (a / n).powf(1.0 / p)).collect())
}

/// GeM pooling followed by L2 normalization.
pub fn gem_pool(input: &FeatureMap, params: &GemParams) -> Result<Descriptor> {
    l2_normalize(&gem_raw(input, params)?)
}

#[inline]
fn pow_clamped(x: f64, p: f64) -> f64 {
    if x > 0.0 {
        x.powf(p)
    } else {
        0.0
    }
}

/// Gradients of a scalar objective through GeM pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct GemGrads {
    pub p: f64,
    /// Same layout as the input feature map; zero where the input was clamped.
    pub input: Vec<f64>,
}

/// Backpropagates `upstream = dL/dz` through GeM pooling.
pub fn gem_backward(input: &FeatureMap, params: &GemParams, upstream: &[f64]) -> Result<GemGrads> {
    params.validate()?;
    let c = input.channels();
    if upstream.len() != c {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, descriptor has {c}",
            upstream.len()
        )));
    }
    let p = params.p;
    let n = (input.h * input.w) as f64;
    let mut power_mean = vec![0.0; c];
    let mut log_moment = vec![0.0; c];
    for cell in input.data.chunks_exact(c) {
        for k in 0..c {
            let x = cell[k];
            if x > 0.0 {
                let xp = x.powf(p);
                power_mean[k] += xp;
                log_moment[k] += xp * x.ln();
            }
        }
    }
    for k in 0..c {
        power_mean[k] /= n;
        log_moment[k] /= n;
    }
    let pooled: Vec<f64> = power_mean.iter().map(|m| m.powf(1.0 / p)).collect();
    let g = normalize_backward(&pooled, upstream);

    // g_k = M_k^(1/p), M_k = mean x^p
    //   dg_k/dx = M_k^(1/p - 1) x^(p-1) / n
    //   dg_k/dp = g_k (-ln M_k / p^2 + E[x^p ln x] / (p M_k))
    let mut grad_p = 0.0;
    let mut scale = vec![0.0; c];
    for k in 0..c {
        let m = power_mean[k];
        if m <= 0.0 {
            continue;
        }
        scale[k] = g[k] * m.powf(1.0 / p - 1.0) / n;
        grad_p += g[k] * pooled[k] * (-m.ln() / (p * p) + log_moment[k] / (p * m));
    }
    let mut grad_in = vec![0.0; input.data.len()];
    for (cell, gi) in input.data.chunks_exact(c).zip(grad_in.chunks_exact_mut(c)) {
        for k in 0..c {
            if cell[k] > 0.0 {
                gi[k] = scale[k] * cell[k].powf(p - 1.0);
            }
        }
    }
    Ok(GemGrads {
        p: grad_p,
        input: grad_in,
    })
}

/// The aggregation head used by the trainer and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    ConvAp(ConvAPParams),
    Gem(GemParams),
    Avg,
}

/// Parameter gradients of an [`Aggregator`], aligned with
/// [`Aggregator::param_slices_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::ConvAp(_) => "conv-ap",
            Aggregator::Gem(_) => "gem",
            Aggregator::Avg => "avg",
        }
    }

    /// Short human label, e.g. `Conv64-AP2x2`.
    pub fn label(&self) -> String {
        match self {
            Aggregator::ConvAp(p) => format!("Conv{}-AP{}x{}", p.out_channels, p.s1, p.s2),
            Aggregator::Gem(_) => "GeM".into(),
            Aggregator::Avg => "AVG".into(),
        }
    }

    pub fn output_dim(&self, in_channels: usize) -> usize {
        match self {
            Aggregator::ConvAp(p) => p.output_dim(),
            _ => in_channels,
        }
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<Descriptor> {
        match self {
            Aggregator::ConvAp(p) => conv_ap_forward(input, p),
            Aggregator::Gem(p) => gem_pool(input, p),
            Aggregator::Avg => avg_pool(input),
        }
    }

    /// Gradients w.r.t. the trainable parameters only.
    pub fn backward(&self, input: &FeatureMap, upstream: &[f64]) -> Result<ParamGrads> {
        Ok(match self {
            Aggregator::ConvAp(p) => {
                let g = conv_ap_backward(input, p, upstream)?;
                let mut out = vec![g.weight];
                out.extend(g.bias);
                ParamGrads(out)
            }
            Aggregator::Gem(p) => ParamGrads(vec![vec![gem_backward(input, p, upstream)?.p]]),
            Aggregator::Avg => ParamGrads(Vec::new()),
        })
    }

    /// Names of the parameter tensors, aligned with [`Self::param_slices`].
    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Aggregator::ConvAp(p) if p.bias.is_some() => vec!["weight", "bias"],
            Aggregator::ConvAp(_) => vec!["weight"],
            Aggregator::Gem(_) => vec!["p"],
            Aggregator::Avg => vec![],
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            Aggregator::ConvAp(p) => {
                let mut v = vec![p.weight.as_slice()];
                v.extend(p.bias.as_deref());
                v
            }
            Aggregator::Gem(p) => vec![std::slice::from_ref(&p.p)],
            Aggregator::Avg => vec![],
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Aggregator::ConvAp(p) => {
                let mut v = vec![p.weight.as_mut_slice()];
                v.extend(p.bias.as_deref_mut());
                v
            }
            Aggregator::Gem(p) => vec![std::slice::from_mut(&mut p.p)],
            Aggregator::Avg => vec![],
        }
    }

    /// Re-establishes parameter constraints after an update (GeM's `p_min`).
    pub fn project(&mut self) {
        if let Aggregator::Gem(p) = self {
            p.p = p.p.max(p.p_min);
        }
    }
}
