//! Lossless coding of the integer residual `r = x − x̂` with a
//! context-conditioned discretized mixture model.
//!
//! Per site the parameter network sees features `u` of the lossy
//! reconstruction and masked-convolution context over residual sites that
//! precede it in raster order. Within a site the components of a coding
//! unit are coded in order, each later component's means shifted by
//! `β · r` of the earlier ones at the same frequency channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dct_image::{normalize, DctImage, NormStats};
use crate::entropy::{decode_value, encode_value, quantize_cdf, EntropyError, QuantizedCdf, RangeDecoder, RangeEncoder};
use crate::lossy::{add_conv, apply_conv, ConvLayer, LEAKY_SLOPE};
use crate::nn::{strict_past_mask, Graph, NnError, ParamStore, Real, Tensor, Var};
use crate::prob::{self, LogBin};

pub const RESIDUAL_MIN: i32 = -4095;
pub const RESIDUAL_MAX: i32 = 4095;
pub const DEFAULT_MIXTURES: usize = 5;
pub const FEATURES: usize = 64;
pub const HIDDEN: usize = 128;
const CONTEXT_KERNEL: usize = 5;
/// Lower clamp of the predicted log-scale, `ln 0.01`.
pub const LOG_SCALE_MIN: f64 = -4.605170185988091;
/// Components with a smaller weight do not widen the coding window.
const WINDOW_WEIGHT: f64 = 1e-4;
const WINDOW_SPAN: f64 = 16.0;

#[derive(Debug, thiserror::Error)]
pub enum ResidualError {
    #[error("component {component} needs component {missing} coded first")]
    ComponentOrderViolation { component: usize, missing: usize },
    #[error("residual {0} outside [-4095, 4095]")]
    OutOfRange(i32),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

impl From<crate::dct_image::DctError> for ResidualError {
    fn from(e: crate::dct_image::DctError) -> Self {
        ResidualError::Shape(e.to_string())
    }
}

/// Components coded together, in coding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    /// A single plane (grayscale, or luma of a subsampled image).
    Luma,
    /// Two equal-sized chroma planes, coded Cr then Cb.
    Chroma,
    /// Three equal-sized planes, coded Y, Cr, Cb.
    Full,
}

impl UnitKind {
    pub fn components(self) -> usize {
        match self {
            UnitKind::Luma => 1,
            UnitKind::Chroma => 2,
            UnitKind::Full => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnitKind::Luma => "luma",
            UnitKind::Chroma => "chroma",
            UnitKind::Full => "full",
        }
    }

    pub fn from_components(n: usize) -> Option<Self> {
        match n {
            1 => Some(UnitKind::Luma),
            2 => Some(UnitKind::Chroma),
            3 => Some(UnitKind::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Logistic,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualConfig {
    pub kind: UnitKind,
    pub mixtures: usize,
    pub family: Family,
}

impl ResidualConfig {
    pub fn new(kind: UnitKind) -> Self {
        ResidualConfig { kind, mixtures: DEFAULT_MIXTURES, family: Family::Logistic }
    }

    /// Single Laplace component per channel, used when coding coefficients
    /// without the lossy branch.
    pub fn direct(kind: UnitKind) -> Self {
        ResidualConfig { kind, mixtures: 1, family: Family::Laplace }
    }

    pub fn input_channels(&self) -> usize {
        64 * self.kind.components()
    }

    /// Raw outputs of component `j`: `[π K | μ K·64 | log s K·64 | β K·64 per
    /// earlier component]`.
    pub fn block_len(&self, j: usize) -> usize {
        self.mixtures * (1 + 128 + 64 * j)
    }

    pub fn block_offset(&self, j: usize) -> usize {
        (0..j).map(|i| self.block_len(i)).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.block_offset(self.kind.components())
    }
}

/// Mixture parameters of one component at one site. Channel `c` of mixture
/// `k` is at index `k·64 + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub family: Family,
    /// Softmax-normalized weights, shared by the 64 channels.
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_scale: Vec<f64>,
    /// `beta[i]` multiplies the residual of earlier component `i`.
    pub beta: Vec<Vec<f64>>,
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(x.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
    x.iter().map(|&v| v - lse).collect()
}

impl MixtureParams {
    /// Applies the output activations to the raw block of component `j`.
    /// `std` holds that component's 64 per-channel scales.
    pub fn from_raw(raw: &[f64], j: usize, cfg: &ResidualConfig, std: &[f64]) -> Self {
        let k = cfg.mixtures;
        let b = &raw[cfg.block_offset(j)..cfg.block_offset(j) + cfg.block_len(j)];
        let pi = log_softmax(&b[..k]).into_iter().map(libm::exp).collect();
        let mut mu = vec![0.0; k * 64];
        let mut log_scale = vec![0.0; k * 64];
        for m in 0..k {
            for c in 0..64 {
                mu[m * 64 + c] = std[c] * b[k + m * 64 + c];
                log_scale[m * 64 + c] = (b[k + 64 * k + m * 64 + c] + libm::log(std[c])).max(LOG_SCALE_MIN);
            }
        }
        let beta = (0..j)
            .map(|i| {
                let off = k + 128 * k + i * 64 * k;
                b[off..off + 64 * k].iter().map(|&v| libm::tanh(v)).collect()
            })
            .collect();
        MixtureParams { family: cfg.family, pi, mu, log_scale, beta }
    }

    pub fn mixtures(&self) -> usize {
        self.pi.len()
    }

    /// Shifts the means by `β · r` of every earlier component; each entry
    /// of `earlier` is that component's 64 residuals at this site, or
    /// `None` if it has not been coded yet.
    pub fn autoregress_means(&mut self, earlier: &[Option<&[i32]>]) -> Result<(), ResidualError> {
        let component = self.beta.len();
        for (i, beta) in self.beta.iter().enumerate() {
            let r = earlier
                .get(i)
                .copied()
                .flatten()
                .ok_or(ResidualError::ComponentOrderViolation { component, missing: i })?;
            for m in 0..self.pi.len() {
                for c in 0..64 {
                    self.mu[m * 64 + c] += beta[m * 64 + c] * r[c] as f64;
                }
            }
        }
        Ok(())
    }

    /// Probability of `v` in channel `c`, the alphabet ends absorbing the
    /// tails.
    pub fn pmf(&self, c: usize, v: i32) -> f64 {
        let (lo, hi) = (v <= RESIDUAL_MIN, v >= RESIDUAL_MAX);
        (0..self.mixtures())
            .map(|m| {
                let lb = family_log_bin(self.family, v as f64, self.mu[m * 64 + c], self.log_scale[m * 64 + c], lo, hi);
                self.pi[m] * libm::exp(lb.logp)
            })
            .sum()
    }

    fn cdf(&self, c: usize, x: f64) -> f64 {
        (0..self.mixtures())
            .map(|m| {
                let (mu, ls) = (self.mu[m * 64 + c], self.log_scale[m * 64 + c]);
                self.pi[m]
                    * match self.family {
                        Family::Logistic => prob::logistic_cdf(x, mu, ls),
                        Family::Laplace => prob::laplace_cdf(x, mu, ls),
                    }
            })
            .sum()
    }

    /// Quantized CDF of channel `c` over a window covering every component
    /// with non-negligible weight.
    pub fn coding_cdf(&self, c: usize) -> Result<QuantizedCdf, EntropyError> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in 0..self.mixtures() {
            if self.pi[m] < WINDOW_WEIGHT {
                continue;
            }
            let (mu, s) = (self.mu[m * 64 + c], libm::exp(self.log_scale[m * 64 + c]));
            lo = lo.min(mu - WINDOW_SPAN * s);
            hi = hi.max(mu + WINDOW_SPAN * s);
        }
        let (lo, hi) = prob::window(lo, hi, RESIDUAL_MIN, RESIDUAL_MAX);
        quantize_cdf(&prob::pmf_from_cdf(lo, hi, |x| self.cdf(c, x)), lo)
    }
}

fn family_log_bin(family: Family, v: f64, mu: f64, log_scale: f64, lo: bool, hi: bool) -> LogBin {
    match family {
        Family::Logistic => prob::logistic_log_bin(v, mu, log_scale, lo, hi),
        Family::Laplace => prob::laplace_log_bin(v, mu, log_scale, lo, hi),
    }
}

/// `Σ_k π_k [σ((v+½−μ_k)/s_k) − σ((v−½−μ_k)/s_k)]` with the alphabet ends
/// absorbing the tails.
pub fn logistic_mixture_pmf(v: i32, pi: &[f64], mu: &[f64], s: &[f64]) -> f64 {
    let (lo, hi) = (v <= RESIDUAL_MIN, v >= RESIDUAL_MAX);
    pi.iter()
        .zip(mu.iter().zip(s))
        .map(|(&p, (&m, &s))| p * libm::exp(prob::logistic_log_bin(v as f64, m, libm::log(s), lo, hi).logp))
        .sum()
}

/// `F(v+½) − F(v−½)` under a Laplace law, the alphabet ends absorbing the
/// tails.
pub fn laplace_pmf(v: i32, mu: f64, b: f64) -> f64 {
    let (lo, hi) = (v <= RESIDUAL_MIN, v >= RESIDUAL_MAX);
    libm::exp(prob::laplace_log_bin(v as f64, mu, libm::log(b), lo, hi).logp)
}

/// Bits of all components at one site given the raw parameter vector, in
/// coding order with the cross-component mean updates applied. `floored`
/// charges at most 16 bits per symbol; otherwise the exact negative
/// log-likelihood is returned. When `grad` is given, `d bits / d raw` is
/// accumulated into it.
pub fn site_bits(
    raw: &[f64],
    r: &[&[i32]],
    std: &[f64],
    cfg: &ResidualConfig,
    floored: bool,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let k = cfg.mixtures;
    let mut total = 0.0;
    let mut lp = vec![LogBin { logp: 0.0, d_loc: 0.0, d_scale: 0.0 }; k];
    for (j, rj) in r.iter().enumerate() {
        let off = cfg.block_offset(j);
        let b = &raw[off..off + cfg.block_len(j)];
        let lw = log_softmax(&b[..k]);
        let std_j = &std[j * 64..(j + 1) * 64];
        let mut d_logit = vec![0.0; k];
        for c in 0..64 {
            let v = rj[c];
            let (lo, hi) = (v <= RESIDUAL_MIN, v >= RESIDUAL_MAX);
            let mut best = f64::NEG_INFINITY;
            for (m, slot) in lp.iter_mut().enumerate() {
                let mut mu = std_j[c] * b[k + m * 64 + c];
                for (i, ri) in r[..j].iter().enumerate() {
                    mu += libm::tanh(b[k + 128 * k + i * 64 * k + m * 64 + c]) * ri[c] as f64;
                }
                let ls = (b[k + 64 * k + m * 64 + c] + libm::log(std_j[c])).max(LOG_SCALE_MIN);
                *slot = family_log_bin(cfg.family, v as f64, mu, ls, lo, hi);
                best = best.max(lw[m] + slot.logp);
            }
            let lse = best + libm::log(lp.iter().zip(&lw).map(|(l, &w)| libm::exp(w + l.logp - best)).sum::<f64>());
            let (bits, kf) = if floored { prob::floored_bits(lse) } else { (-lse / std::f64::consts::LN_2, 1.0) };
            total += bits;
            let Some(gr) = grad.as_deref_mut() else { continue };
            let gb = &mut gr[off..off + cfg.block_len(j)];
            let gl = -kf / std::f64::consts::LN_2;
            for m in 0..k {
                let resp = libm::exp(lw[m] + lp[m].logp - lse);
                d_logit[m] += gl * (resp - libm::exp(lw[m]));
                let d_mu = gl * resp * lp[m].d_loc;
                gb[k + m * 64 + c] += d_mu * std_j[c];
                let raw_ls = b[k + 64 * k + m * 64 + c];
                if raw_ls + libm::log(std_j[c]) > LOG_SCALE_MIN {
                    gb[k + 64 * k + m * 64 + c] += gl * resp * lp[m].d_scale;
                }
                for (i, ri) in r[..j].iter().enumerate() {
                    let idx = k + 128 * k + i * 64 * k + m * 64 + c;
                    let t = libm::tanh(b[idx]);
                    gb[idx] += d_mu * ri[c] as f64 * (1.0 - t * t);
                }
            }
        }
        if let Some(gr) = grad.as_deref_mut() {
            for m in 0..k {
                gr[off + m] += d_logit[m];
            }
        }
    }
    total
}

/// Layer slots of one residual coder inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ResidualNet {
    pub config: ResidualConfig,
    recon: [ConvLayer; 2],
    context: ConvLayer,
    context_out: ConvLayer,
    entropy: [ConvLayer; 3],
}

impl ResidualNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: ResidualConfig, rng: &mut impl Rng) -> Self {
        let cin = config.input_channels();
        let p = |s: &str| format!("{prefix}.{s}");
        let recon = [
            add_conv(store, rng, &p("recon.0"), cin, FEATURES, 3, 1, 1, 0, false),
            add_conv(store, rng, &p("recon.1"), FEATURES, FEATURES, 3, 1, 1, 0, false),
        ];
        let context = add_conv(store, rng, &p("context.masked"), cin, FEATURES, CONTEXT_KERNEL, 1, 2, 0, false);
        let context_out = add_conv(store, rng, &p("context.out"), FEATURES, FEATURES, 1, 1, 0, 0, false);
        let entropy = [
            add_conv(store, rng, &p("entropy.0"), 2 * FEATURES, HIDDEN, 1, 1, 0, 0, false),
            add_conv(store, rng, &p("entropy.1"), HIDDEN, HIDDEN, 1, 1, 0, 0, false),
            add_conv(store, rng, &p("entropy.2"), HIDDEN, config.out_channels(), 1, 1, 0, 0, false),
        ];
        // Fresh context weights are scaled as if every tap were live; only
        // the strictly-past ones are.
        let live = (CONTEXT_KERNEL * CONTEXT_KERNEL) as f64 / ((CONTEXT_KERNEL * CONTEXT_KERNEL) / 2) as f64;
        let w = &mut store.get_mut(context.w).value;
        *w = w.map(|v| v * T::from_f64(live.sqrt()));
        ResidualNet { config, recon, context, context_out, entropy }
    }

    /// `u` from the normalized reconstruction.
    pub fn recon_features<T: Real>(&self, g: &mut Graph<T>, v: &[Var], x_hat: Var) -> Result<Var, NnError> {
        let h = apply_conv(g, v, &self.recon[0], x_hat)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = apply_conv(g, v, &self.recon[1], h)?;
        Ok(g.leaky_relu(h, LEAKY_SLOPE))
    }

    /// `CT_r` from the scaled residual; strictly causal in raster order.
    pub fn context_features<T: Real>(&self, g: &mut Graph<T>, v: &[Var], r: Var) -> Result<Var, NnError> {
        let mask = strict_past_mask(FEATURES, self.config.input_channels(), CONTEXT_KERNEL);
        let h = g.masked_conv2d(r, v[self.context.w], Some(v[self.context.b]), mask, CONTEXT_KERNEL / 2)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        apply_conv(g, v, &self.context_out, h)
    }

    /// Raw parameter maps from `u` and `CT_r`.
    pub fn entropy_params<T: Real>(&self, g: &mut Graph<T>, v: &[Var], u: Var, ct: Var) -> Result<Var, NnError> {
        let h = g.concat_channels(&[u, ct])?;
        let h = apply_conv(g, v, &self.entropy[0], h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = apply_conv(g, v, &self.entropy[1], h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        apply_conv(g, v, &self.entropy[2], h)
    }

    /// Residual bits of a batch as a differentiable node. `x_hat` is the
    /// normalized reconstruction; `r` holds `N` stacks of per-component
    /// residuals in coding order; `std` the unit's per-channel scales.
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        v: &[Var],
        x_hat: Var,
        r: &[Vec<DctImage>],
        std: &[f64],
    ) -> Result<Var, ResidualError> {
        let r_scaled = g.constant(scaled_residual(r, std)?);
        let u = self.recon_features(g, v, x_hat)?;
        let ct = self.context_features(g, v, r_scaled)?;
        let raw = self.entropy_params(g, v, u, ct)?;
        Ok(rate_node(g, raw, r, std, &self.config)?)
    }
}

/// `r / std` as an `(N, 64·n, H, W)` tensor.
pub fn scaled_residual<T: Real>(r: &[Vec<DctImage>], std: &[f64]) -> Result<Tensor<T>, ResidualError> {
    let stats = NormStats { mean: vec![0.0; std.len()], std: std.to_vec() };
    let mut parts = Vec::with_capacity(r.len());
    for stack in r {
        parts.push(normalize::<T>(stack, &stats)?);
    }
    let [_, c, h, w] = parts[0].shape;
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        if p.shape != [1, c, h, w] {
            return Err(ResidualError::Shape("batch residuals differ in shape".into()));
        }
        data.extend(p.data);
    }
    Ok(Tensor::from_vec([r.len(), c, h, w], data)?)
}

/// Exact negative log-likelihood of `r` in bits under the raw parameter
/// maps `raw`, as a fused node.
pub fn rate_node<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    r: &[Vec<DctImage>],
    std: &[f64],
    cfg: &ResidualConfig,
) -> Result<Var, NnError> {
    let [n, oc, h, w] = g.shape(raw);
    if oc != cfg.out_channels() || n != r.len() {
        return Err(NnError::ShapeError(format!("raw parameters {:?} do not fit {n} residual stacks", g.shape(raw))));
    }
    let hw = h * w;
    let mut grad = Tensor::zeros([n, oc, h, w]);
    let mut total = 0.0;
    let mut site_raw = vec![0.0; oc];
    let mut site_grad = vec![0.0; oc];
    for (b, stack) in r.iter().enumerate() {
        for site in 0..hw {
            let rv = g.value(raw);
            for (ch, s) in site_raw.iter_mut().enumerate() {
                *s = rv.data[(b * oc + ch) * hw + site].to_f64();
            }
            let rs: Vec<&[i32]> = stack.iter().map(|d| &d.data[site * 64..site * 64 + 64]).collect();
            site_grad.iter_mut().for_each(|v| *v = 0.0);
            total += site_bits(&site_raw, &rs, std, cfg, false, Some(&mut site_grad));
            for (ch, &d) in site_grad.iter().enumerate() {
                grad.data[(b * oc + ch) * hw + site] = T::from_f64(d);
            }
        }
    }
    g.fused(&[raw], total, vec![grad])
}

/// Inference-time parameter evaluation one site at a time, in `f32` with a
/// fixed summation order. Encoder and decoder both go through it, so they
/// see bit-identical parameters.
pub struct SiteEvaluator {
    cfg: ResidualConfig,
    height: usize,
    width: usize,
    /// `u` laid out site-major: `(i·W + j)·64 + c`.
    u: Vec<f32>,
    /// Live context taps as `(dy, dx)` offsets and their weights
    /// `[tap][out][in]`.
    taps: Vec<(isize, isize)>,
    ctx_w: Vec<f32>,
    ctx_b: Vec<f32>,
    out_w: Vec<f32>,
    out_b: Vec<f32>,
    ent_w: [Vec<f32>; 3],
    ent_b: [Vec<f32>; 3],
    /// `1 / std` per input channel.
    inv_std: Vec<f32>,
}

fn leaky(v: f32) -> f32 {
    if v >= 0.0 {
        v
    } else {
        v * LEAKY_SLOPE as f32
    }
}

fn matvec(w: &[f32], b: &[f32], x: &[f32], out: &mut [f32]) {
    let n = x.len();
    for (o, dst) in out.iter_mut().enumerate() {
        let row = &w[o * n..(o + 1) * n];
        let mut acc = b[o];
        for (a, &v) in row.iter().zip(x) {
            acc += a * v;
        }
        *dst = acc;
    }
}

impl SiteEvaluator {
    /// Computes `u` over the whole plane and gathers the weights.
    pub fn new(
        net: &ResidualNet,
        store: &ParamStore<f32>,
        x_hat_norm: &Tensor<f32>,
        std: &[f64],
    ) -> Result<Self, ResidualError> {
        let [_, cin, height, width] = x_hat_norm.shape;
        if cin != net.config.input_channels() || std.len() != cin {
            return Err(ResidualError::Shape(format!("reconstruction has {cin} channels, unit expects {}", net.config.input_channels())));
        }
        let mut g = Graph::portable();
        let v = store.bind(&mut g);
        let x = g.constant(x_hat_norm.clone());
        let uv = net.recon_features(&mut g, &v, x)?;
        let ut = g.value(uv);
        let hw = height * width;
        let mut u = vec![0.0; hw * FEATURES];
        for c in 0..FEATURES {
            for s in 0..hw {
                u[s * FEATURES + c] = ut.data[c * hw + s];
            }
        }
        let k = CONTEXT_KERNEL;
        let half = (k / 2) as isize;
        let taps: Vec<(isize, isize)> =
            (0..(k * k) / 2).map(|t| ((t / k) as isize - half, (t % k) as isize - half)).collect();
        let cw = store.value(net.context.w);
        let mut ctx_w = Vec::with_capacity(taps.len() * FEATURES * cin);
        for t in 0..taps.len() {
            for o in 0..FEATURES {
                for i in 0..cin {
                    ctx_w.push(cw.data[(o * cin + i) * k * k + t]);
                }
            }
        }
        let flat = |l: &ConvLayer| (store.value(l.w).data.clone(), store.value(l.b).data.clone());
        let (ctx_b, (out_w, out_b)) = (store.value(net.context.b).data.clone(), flat(&net.context_out));
        let e: Vec<(Vec<f32>, Vec<f32>)> = net.entropy.iter().map(flat).collect();
        let [(w0, b0), (w1, b1), (w2, b2)]: [(Vec<f32>, Vec<f32>); 3] = e.try_into().unwrap();
        Ok(SiteEvaluator {
            cfg: net.config,
            height,
            width,
            u,
            taps,
            ctx_w,
            ctx_b,
            out_w,
            out_b,
            ent_w: [w0, w1, w2],
            ent_b: [b0, b1, b2],
            inv_std: std.iter().map(|&s| 1.0 / s as f32).collect(),
        })
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    /// Raw parameters at `site` from the residuals `r` (site-major,
    /// `(site · n + comp) · 64 + c`) of earlier sites.
    pub fn eval(&self, r: &[i32], site: usize) -> Vec<f64> {
        let cin = self.cfg.input_channels();
        let (i, j) = ((site / self.width) as isize, (site % self.width) as isize);
        let mut h = self.ctx_b.clone();
        let mut x = vec![0.0f32; cin];
        for (t, &(dy, dx)) in self.taps.iter().enumerate() {
            let (y, xx) = (i + dy, j + dx);
            if y < 0 || xx < 0 || xx >= self.width as isize {
                continue;
            }
            let s = y as usize * self.width + xx as usize;
            for (ci, xv) in x.iter_mut().enumerate() {
                *xv = r[s * cin + ci] as f32 * self.inv_std[ci];
            }
            let wt = &self.ctx_w[t * FEATURES * cin..(t + 1) * FEATURES * cin];
            for (o, acc) in h.iter_mut().enumerate() {
                let row = &wt[o * cin..(o + 1) * cin];
                let mut sum = 0.0f32;
                for (a, &v) in row.iter().zip(&x) {
                    sum += a * v;
                }
                *acc += sum;
            }
        }
        h.iter_mut().for_each(|v| *v = leaky(*v));
        let mut feat = vec![0.0f32; 2 * FEATURES];
        feat[..FEATURES].copy_from_slice(&self.u[site * FEATURES..(site + 1) * FEATURES]);
        matvec(&self.out_w, &self.out_b, &h, &mut feat[FEATURES..]);
        let mut a = vec![0.0f32; HIDDEN];
        matvec(&self.ent_w[0], &self.ent_b[0], &feat, &mut a);
        a.iter_mut().for_each(|v| *v = leaky(*v));
        let mut b = vec![0.0f32; HIDDEN];
        matvec(&self.ent_w[1], &self.ent_b[1], &a, &mut b);
        b.iter_mut().for_each(|v| *v = leaky(*v));
        let mut out = vec![0.0f32; self.cfg.out_channels()];
        matvec(&self.ent_w[2], &self.ent_b[2], &b, &mut out);
        out.into_iter().map(|v| v as f64).collect()
    }
}

/// Site-major interleaving `(site · n + comp) · 64 + c` of a component
/// stack.
pub fn interleave(stack: &[DctImage]) -> Vec<i32> {
    let n = stack.len();
    let hw = stack[0].height * stack[0].width;
    let mut out = vec![0; hw * n * 64];
    for (ci, d) in stack.iter().enumerate() {
        for s in 0..hw {
            out[(s * n + ci) * 64..(s * n + ci + 1) * 64].copy_from_slice(&d.data[s * 64..(s + 1) * 64]);
        }
    }
    out
}

fn check_residual(stack: &[DctImage], cfg: &ResidualConfig) -> Result<(), ResidualError> {
    if stack.len() != cfg.kind.components() {
        return Err(ResidualError::Shape(format!("{} components for a {} unit", stack.len(), cfg.kind.name())));
    }
    let (h, w) = (stack[0].height, stack[0].width);
    if stack.iter().any(|d| d.height != h || d.width != w) {
        return Err(ResidualError::Shape("unit components differ in size".into()));
    }
    if let Some(&v) = stack.iter().flat_map(|d| &d.data).find(|v| !(RESIDUAL_MIN..=RESIDUAL_MAX).contains(*v)) {
        return Err(ResidualError::OutOfRange(v));
    }
    Ok(())
}

/// Per-site parameters of every component with the cross-component means
/// applied.
fn site_params(
    raw: &[f64],
    r_site: &[i32],
    std: &[f64],
    cfg: &ResidualConfig,
    j: usize,
) -> Result<MixtureParams, ResidualError> {
    let mut p = MixtureParams::from_raw(raw, j, cfg, &std[j * 64..(j + 1) * 64]);
    let earlier: Vec<Option<&[i32]>> = (0..j).map(|i| Some(&r_site[i * 64..(i + 1) * 64])).collect();
    p.autoregress_means(&earlier)?;
    Ok(p)
}

/// Model bits of `r` computed with the coding-path evaluator.
pub fn residual_rate(eval: &SiteEvaluator, r: &[DctImage], std: &[f64]) -> Result<f64, ResidualError> {
    check_residual(r, &eval.cfg)?;
    let flat = interleave(r);
    let n = r.len();
    let mut total = 0.0;
    for site in 0..eval.sites() {
        let raw = eval.eval(&flat, site);
        let rs: Vec<&[i32]> = (0..n).map(|j| &flat[(site * n + j) * 64..(site * n + j + 1) * 64]).collect();
        total += site_bits(&raw, &rs, std, &eval.cfg, true, None);
    }
    Ok(total)
}

/// Codes `r` (components in coding order) site by site.
pub fn encode_residual(eval: &SiteEvaluator, r: &[DctImage], std: &[f64]) -> Result<Vec<u8>, ResidualError> {
    Ok(encode_residual_measured(eval, r, std)?.0)
}

/// [`encode_residual`] that also returns the model bits of `r`, as
/// [`residual_rate`] would.
pub fn encode_residual_measured(
    eval: &SiteEvaluator,
    r: &[DctImage],
    std: &[f64],
) -> Result<(Vec<u8>, f64), ResidualError> {
    check_residual(r, &eval.cfg)?;
    if r[0].height != eval.height || r[0].width != eval.width {
        return Err(ResidualError::Shape("residual and reconstruction differ in size".into()));
    }
    let flat = interleave(r);
    let n = r.len();
    let mut enc = RangeEncoder::new();
    let mut bits = 0.0;
    for site in 0..eval.sites() {
        let raw = eval.eval(&flat, site);
        let r_site = &flat[site * n * 64..(site + 1) * n * 64];
        let rs: Vec<&[i32]> = r_site.chunks_exact(64).collect();
        bits += site_bits(&raw, &rs, std, &eval.cfg, true, None);
        for j in 0..n {
            let p = site_params(&raw, r_site, std, &eval.cfg, j)?;
            for c in 0..64 {
                encode_value(&mut enc, &p.coding_cdf(c)?, RESIDUAL_MIN, RESIDUAL_MAX, r_site[j * 64 + c]);
            }
        }
    }
    Ok((enc.finish(), bits))
}

/// Exact mirror of [`encode_residual`].
pub fn decode_residual(
    eval: &SiteEvaluator,
    bytes: &[u8],
    std: &[f64],
    component_ids: &[u8],
) -> Result<Vec<DctImage>, ResidualError> {
    let n = eval.cfg.kind.components();
    if component_ids.len() != n {
        return Err(ResidualError::Shape(format!("{} component ids for a {} unit", component_ids.len(), eval.cfg.kind.name())));
    }
    let mut flat = vec![0i32; eval.sites() * n * 64];
    let mut dec = RangeDecoder::new(bytes)?;
    for site in 0..eval.sites() {
        let raw = eval.eval(&flat, site);
        for j in 0..n {
            let p = site_params(&raw, &flat[site * n * 64..(site + 1) * n * 64], std, &eval.cfg, j)?;
            for c in 0..64 {
                flat[(site * n + j) * 64 + c] = decode_value(&mut dec, &p.coding_cdf(c)?, RESIDUAL_MIN, RESIDUAL_MAX)?;
            }
        }
    }
    let mut out: Vec<DctImage> =
        component_ids.iter().map(|&id| DctImage::zeros(eval.height, eval.width, id)).collect();
    for site in 0..eval.sites() {
        for (j, d) in out.iter_mut().enumerate() {
            d.data[site * 64..(site + 1) * 64].copy_from_slice(&flat[(site * n + j) * 64..(site * n + j + 1) * 64]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_sizes() {
        let c = ResidualConfig::new(UnitKind::Full);
        assert_eq!(c.block_len(0), 5 * 129);
        assert_eq!(c.block_len(2), 5 * (129 + 128));
        assert_eq!(c.out_channels(), 5 * (3 * 129 + 64 * 3));
        assert_eq!(ResidualConfig::direct(UnitKind::Luma).out_channels(), 129);
    }

    #[test]
    fn autoregression_examples() {
        let blank = |j: usize| MixtureParams {
            family: Family::Logistic,
            pi: vec![1.0],
            mu: vec![0.0; 64],
            log_scale: vec![0.0; 64],
            beta: vec![vec![0.0; 64]; j],
        };
        let mut cr = blank(1);
        cr.mu[0] = 1.0;
        cr.beta[0][0] = 0.5;
        let ry = [4; 64];
        cr.autoregress_means(&[Some(&ry)]).unwrap();
        assert_eq!(cr.mu[0], 3.0);
        assert_eq!(cr.mu[1], 0.0);

        let mut cb = blank(2);
        cb.beta[0][0] = 0.25;
        cb.beta[1][0] = -0.5;
        let rcr = [2; 64];
        cb.autoregress_means(&[Some(&ry), Some(&rcr)]).unwrap();
        assert_eq!(cb.mu[0], 0.0);

        let mut zero = blank(2);
        zero.mu = (0..64).map(|c| c as f64).collect();
        let before = zero.mu.clone();
        zero.autoregress_means(&[Some(&ry), Some(&rcr)]).unwrap();
        assert_eq!(zero.mu, before);

        let mut early = blank(2);
        assert!(matches!(
            early.autoregress_means(&[Some(&ry), None]),
            Err(ResidualError::ComponentOrderViolation { component: 2, missing: 1 })
        ));
    }

    #[test]
    fn pmf_examples() {
        let p = logistic_mixture_pmf(0, &[1.0], &[0.0], &[1.0]);
        assert!((p - 0.2449187).abs() < 5e-8);
        let q = laplace_pmf(0, 0.0, 1.0);
        assert!((q - 0.3934693).abs() < 5e-8);
        for v in 1..50 {
            let (a, b) = (
                logistic_mixture_pmf(v, &[0.3, 0.7], &[0.0, 0.0], &[1.0, 6.0]),
                logistic_mixture_pmf(-v, &[0.3, 0.7], &[0.0, 0.0], &[1.0, 6.0]),
            );
            assert!((a - b).abs() < 1e-15);
        }
        let total: f64 =
            (RESIDUAL_MIN..=RESIDUAL_MAX).map(|v| logistic_mixture_pmf(v, &[0.2, 0.5, 0.3], &[-30.0, 2.5, 900.0], &[0.5, 40.0, 3.0])).sum();
        assert!((total - 1.0).abs() <= 1e-9, "{total}");
    }

    #[test]
    fn site_bits_matches_pmf() {
        let cfg = ResidualConfig::new(UnitKind::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..cfg.out_channels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let std: Vec<f64> = (0..192).map(|c| 1.0 + (c % 7) as f64).collect();
        let r: Vec<Vec<i32>> = (0..3).map(|_| (0..64).map(|_| rng.gen_range(-6..6)).collect()).collect();
        let flat: Vec<i32> = r.concat();
        let rs: Vec<&[i32]> = r.iter().map(|v| v.as_slice()).collect();
        let bits = site_bits(&raw, &rs, &std, &cfg, true, None);
        let mut expect = 0.0;
        for j in 0..3 {
            let p = site_params(&raw, &flat, &std, &cfg, j).unwrap();
            for c in 0..64 {
                expect += prob::bits(p.pmf(c, r[j][c]));
            }
        }
        assert!((bits - expect).abs() < 1e-9 * expect, "{bits} vs {expect}");
    }

    #[test]
    fn site_bits_gradient() {
        for cfg in [ResidualConfig::new(UnitKind::Full), ResidualConfig::direct(UnitKind::Chroma)] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let n = cfg.kind.components();
            let raw: Vec<f64> = (0..cfg.out_channels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let std: Vec<f64> = (0..64 * n).map(|c| 0.5 + (c % 5) as f64).collect();
            let r: Vec<Vec<i32>> = (0..n).map(|_| (0..64).map(|_| rng.gen_range(-8..8)).collect()).collect();
            let rs: Vec<&[i32]> = r.iter().map(|v| v.as_slice()).collect();
            let mut grad = vec![0.0; raw.len()];
            site_bits(&raw, &rs, &std, &cfg, false, Some(&mut grad));
            for idx in (0..raw.len()).step_by(37) {
                let mut up = raw.clone();
                up[idx] += 1e-6;
                let mut down = raw.clone();
                down[idx] -= 1e-6;
                let fd = (site_bits(&up, &rs, &std, &cfg, false, None) - site_bits(&down, &rs, &std, &cfg, false, None)) / 2e-6;
                assert!((fd - grad[idx]).abs() <= 1e-5 * fd.abs().max(1.0), "{idx}: {fd} vs {}", grad[idx]);
            }
        }
    }
}
