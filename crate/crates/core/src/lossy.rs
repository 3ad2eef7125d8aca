//! Learned lossy transform coder over normalized DCT images: analysis and
//! synthesis transforms, a hyperprior path, rate estimation, latent entropy
//! coding and integer reconstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dct_image::{denormalize, DctError, DctImage, NormStats};
use crate::entropy::{decode_value, encode_value, quantize_cdf, EntropyError, QuantizedCdf, RangeDecoder, RangeEncoder};
use crate::jpeg::{AC_MAX, AC_MIN, DC_MAX, DC_MIN};
use crate::nn::{uniform_init, Graph, NnError, ParamStore, Real, Tensor, Var};
use crate::prob;

pub const SIGMA_FLOOR: f64 = 0.01;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const LATENT_MIN: i32 = -32768;
pub const LATENT_MAX: i32 = 32767;
/// Spatial inputs are padded to a multiple of this many sites so both
/// stride-4 stages divide evenly.
pub const SITE_MULTIPLE: usize = 16;
const GAUSSIAN_SPAN: f64 = 6.0;
const LOGISTIC_SPAN: f64 = 12.0;
const GDN_BETA_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum LossyError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dct(#[from] DctError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossyConfig {
    pub input_channels: usize,
    /// M
    pub latent_channels: usize,
    /// N
    pub hyper_channels: usize,
    pub lambda: f64,
}

impl LossyConfig {
    pub fn new(input_channels: usize) -> Self {
        LossyConfig { input_channels, latent_channels: 192, hyper_channels: 128, lambda: 0.03 }
    }

    pub fn validate(&self) -> Result<(), LossyError> {
        if self.input_channels == 0 || self.latent_channels == 0 || self.hyper_channels == 0 {
            return Err(LossyError::InvalidConfig("channel counts must be positive".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(LossyError::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// How latents are quantized when measuring their rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Round,
    /// Additive uniform noise in `[−½, ½)` drawn from the given seed.
    Noise { seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvLayer {
    pub w: usize,
    pub b: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    transpose: bool,
}

#[derive(Debug, Clone, Copy)]
struct GdnLayer {
    beta: usize,
    gamma: usize,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    transpose: bool,
) -> ConvLayer {
    let (shape, fan_in) =
        if transpose { ([cin, cout, k, k], (cin * k * k / (stride * stride)).max(1)) } else { ([cout, cin, k, k], cin * k * k) };
    let w = store.add(format!("{name}.weight"), uniform_init(rng, shape, fan_in));
    let b = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
    ConvLayer { w, b, stride, pad, out_pad, transpose }
}

pub(crate) fn apply_conv<T: Real>(g: &mut Graph<T>, v: &[Var], l: &ConvLayer, x: Var) -> Result<Var, NnError> {
    if l.transpose {
        g.conv_transpose2d(x, v[l.w], Some(v[l.b]), l.stride, l.pad, l.out_pad)
    } else {
        g.conv2d(x, v[l.w], Some(v[l.b]), l.stride, l.pad)
    }
}

fn add_gdn<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> GdnLayer {
    let beta = store.add(format!("{name}.beta"), Tensor::full([1, c, 1, 1], T::ONE));
    // γ = γ_raw²: 0.1 on the diagonal, small but non-zero elsewhere so the
    // off-diagonal terms receive gradient.
    let mut gamma = Tensor::full([c, c, 1, 1], T::from_f64(1e-2));
    for i in 0..c {
        gamma.data[i * c + i] = T::from_f64(0.1f64.sqrt());
    }
    let gamma = store.add(format!("{name}.gamma"), gamma);
    GdnLayer { beta, gamma }
}

fn apply_gdn<T: Real>(g: &mut Graph<T>, v: &[Var], l: &GdnLayer, x: Var, inverse: bool) -> Result<Var, NnError> {
    let b2 = g.square(v[l.beta]);
    let beta = g.offset(b2, GDN_BETA_EPS);
    let gamma = g.square(v[l.gamma]);
    g.gdn(x, beta, gamma, inverse)
}

/// Layer slots of one lossy coder inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct LossyNet {
    pub config: LossyConfig,
    analysis: [ConvLayer; 3],
    analysis_gdn: [GdnLayer; 2],
    synthesis: [ConvLayer; 3],
    synthesis_gdn: [GdnLayer; 2],
    hyper_analysis: [ConvLayer; 2],
    hyper_synthesis: [ConvLayer; 2],
    z_loc: usize,
    z_log_scale: usize,
}

/// Values produced by [`LossyNet::forward_train`].
#[derive(Debug, Clone, Copy)]
pub struct TrainForward {
    /// Normalized reconstruction, same shape as the input.
    pub x_hat: Var,
    pub bits_y: Var,
    pub bits_z: Var,
}

/// Quantized latents and the distribution parameters they are coded with.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub y: Tensor<f32>,
    pub y_hat: Tensor<f32>,
    pub z: Tensor<f32>,
    pub z_hat: Tensor<f32>,
    pub mu_y: Tensor<f32>,
    pub sigma_y: Tensor<f32>,
    pub z_loc: Vec<f32>,
    pub z_log_scale: Vec<f32>,
}

impl LossyNet {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: LossyConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, LossyError> {
        config.validate()?;
        let (c, m, n) = (config.input_channels, config.latent_channels, config.hyper_channels);
        let p = |s: &str| format!("{prefix}.{s}");
        let analysis = [
            add_conv(store, rng, &p("g_a.0"), c, n, 5, 2, 2, 0, false),
            add_conv(store, rng, &p("g_a.1"), n, n, 5, 2, 2, 0, false),
            add_conv(store, rng, &p("g_a.2"), n, m, 3, 1, 1, 0, false),
        ];
        let analysis_gdn = [add_gdn(store, &p("g_a.gdn0"), n), add_gdn(store, &p("g_a.gdn1"), n)];
        let synthesis = [
            add_conv(store, rng, &p("g_s.0"), m, n, 3, 1, 1, 0, true),
            add_conv(store, rng, &p("g_s.1"), n, n, 5, 2, 2, 1, true),
            add_conv(store, rng, &p("g_s.2"), n, c, 5, 2, 2, 1, true),
        ];
        let synthesis_gdn = [add_gdn(store, &p("g_s.igdn0"), n), add_gdn(store, &p("g_s.igdn1"), n)];
        let hyper_analysis = [
            add_conv(store, rng, &p("h_a.0"), m, n, 3, 2, 1, 0, false),
            add_conv(store, rng, &p("h_a.1"), n, n, 3, 2, 1, 0, false),
        ];
        let hyper_synthesis = [
            add_conv(store, rng, &p("h_s.0"), n, n, 3, 2, 1, 1, true),
            add_conv(store, rng, &p("h_s.1"), n, 2 * m, 3, 2, 1, 1, true),
        ];
        let z_loc = store.add(p("z_prior.loc"), Tensor::zeros([1, n, 1, 1]));
        let z_log_scale = store.add(p("z_prior.log_scale"), Tensor::zeros([1, n, 1, 1]));
        Ok(LossyNet {
            config,
            analysis,
            analysis_gdn,
            synthesis,
            synthesis_gdn,
            hyper_analysis,
            hyper_synthesis,
            z_loc,
            z_log_scale,
        })
    }

    pub fn analysis<T: Real>(&self, g: &mut Graph<T>, v: &[Var], x: Var) -> Result<Var, LossyError> {
        let c = g.shape(x)[1];
        if c != self.config.input_channels {
            return Err(NnError::ShapeError(format!("analysis expects {} channels, got {c}", self.config.input_channels)).into());
        }
        let mut h = apply_conv(g, v, &self.analysis[0], x)?;
        h = apply_gdn(g, v, &self.analysis_gdn[0], h, false)?;
        h = apply_conv(g, v, &self.analysis[1], h)?;
        h = apply_gdn(g, v, &self.analysis_gdn[1], h, false)?;
        Ok(apply_conv(g, v, &self.analysis[2], h)?)
    }

    pub fn synthesis<T: Real>(&self, g: &mut Graph<T>, v: &[Var], y: Var) -> Result<Var, LossyError> {
        let mut h = apply_conv(g, v, &self.synthesis[0], y)?;
        h = apply_gdn(g, v, &self.synthesis_gdn[0], h, true)?;
        h = apply_conv(g, v, &self.synthesis[1], h)?;
        h = apply_gdn(g, v, &self.synthesis_gdn[1], h, true)?;
        Ok(apply_conv(g, v, &self.synthesis[2], h)?)
    }

    pub fn hyper_analysis<T: Real>(&self, g: &mut Graph<T>, v: &[Var], y: Var) -> Result<Var, LossyError> {
        let h = apply_conv(g, v, &self.hyper_analysis[0], y)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        Ok(apply_conv(g, v, &self.hyper_analysis[1], h)?)
    }

    /// `(μ_y, σ_y)` with `σ_y = 0.01 + softplus(·)`.
    pub fn hyper_synthesis<T: Real>(&self, g: &mut Graph<T>, v: &[Var], z: Var) -> Result<(Var, Var), LossyError> {
        let m = self.config.latent_channels;
        let h = apply_conv(g, v, &self.hyper_synthesis[0], z)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let out = apply_conv(g, v, &self.hyper_synthesis[1], h)?;
        let mu = g.slice_channels(out, 0, m)?;
        let raw = g.slice_channels(out, m, m)?;
        let sp = g.softplus(raw);
        Ok((mu, g.offset(sp, SIGMA_FLOOR)))
    }

    /// Training pass: rates on noisy latents, reconstruction from
    /// straight-through rounded latents. `x` must already be padded to a
    /// multiple of [`SITE_MULTIPLE`].
    pub fn forward_train<T: Real>(
        &self,
        g: &mut Graph<T>,
        v: &[Var],
        x: Var,
        rng: &mut impl Rng,
    ) -> Result<TrainForward, LossyError> {
        let y = self.analysis(g, v, x)?;
        let noise_y = uniform_noise(rng, g.shape(y));
        let y_tilde = g.add_const(y, &noise_y)?;
        let y_ste = g.round_ste(y);
        let z = self.hyper_analysis(g, v, y)?;
        let noise_z = uniform_noise(rng, g.shape(z));
        let z_tilde = g.add_const(z, &noise_z)?;
        let (mu, sigma) = self.hyper_synthesis(g, v, z_tilde)?;
        let x_hat = self.synthesis(g, v, y_ste)?;
        let bits_y = gaussian_rate_node(g, y_tilde, mu, sigma)?;
        let bits_z = logistic_rate_node(g, z_tilde, v[self.z_loc], v[self.z_log_scale])?;
        Ok(TrainForward { x_hat, bits_y, bits_z })
    }

    fn z_prior(&self, store: &ParamStore<f32>) -> (Vec<f32>, Vec<f32>) {
        (store.value(self.z_loc).data.clone(), store.value(self.z_log_scale).data.clone())
    }

    /// ROUND-mode latents of a normalized input of shape `(1, C, H, W)`.
    /// The input is zero-padded to a multiple of [`SITE_MULTIPLE`] sites.
    pub fn compress(&self, store: &ParamStore<f32>, x_norm: &Tensor<f32>) -> Result<LatentBundle, LossyError> {
        let [_, _, h, w] = x_norm.shape;
        let (hp, wp) = (padded(h), padded(w));
        let mut g = Graph::portable();
        let v = store.bind(&mut g);
        let x = g.constant(x_norm.pad_to(hp, wp));
        let y = self.analysis(&mut g, &v, x)?;
        let z = self.hyper_analysis(&mut g, &v, y)?;
        let y = g.value(y).clone();
        let z = g.value(z).clone();
        let y_hat = quantize(&y);
        let z_hat = quantize(&z);
        let (mu_y, sigma_y) = self.hyper_decode_with(&mut g, &v, &z_hat)?;
        let (z_loc, z_log_scale) = self.z_prior(store);
        Ok(LatentBundle { y, y_hat, z, z_hat, mu_y, sigma_y, z_loc, z_log_scale })
    }

    fn hyper_decode_with(
        &self,
        g: &mut Graph<f32>,
        v: &[Var],
        z_hat: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Tensor<f32>), LossyError> {
        let z = g.constant(z_hat.clone());
        let (mu, sigma) = self.hyper_synthesis(g, v, z)?;
        Ok((g.value(mu).clone(), g.value(sigma).clone()))
    }

    /// Normalized reconstruction cropped to `h × w` sites.
    pub fn decompress(&self, store: &ParamStore<f32>, y_hat: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>, LossyError> {
        let mut g = Graph::portable();
        let v = store.bind(&mut g);
        let y = g.constant(y_hat.clone());
        let x = self.synthesis(&mut g, &v, y)?;
        let x = g.crop(x, h, w)?;
        Ok(g.take_value(x))
    }

    /// Shapes of `ŷ` and `ẑ` for an input of `h × w` sites.
    pub fn latent_shapes(&self, h: usize, w: usize) -> ([usize; 4], [usize; 4]) {
        let (hp, wp) = (padded(h), padded(w));
        (
            [1, self.config.latent_channels, hp / 4, wp / 4],
            [1, self.config.hyper_channels, hp / SITE_MULTIPLE, wp / SITE_MULTIPLE],
        )
    }

    /// Decodes `ẑ` then `ŷ` for an input of `h × w` sites.
    pub fn decode_latents(
        &self,
        store: &ParamStore<f32>,
        bytes_z: &[u8],
        bytes_y: &[u8],
        h: usize,
        w: usize,
    ) -> Result<LatentBundle, LossyError> {
        let (y_shape, z_shape) = self.latent_shapes(h, w);
        let (z_loc, z_log_scale) = self.z_prior(store);
        let cdfs = z_prior_cdfs(&z_loc, &z_log_scale)?;
        let mut dec = RangeDecoder::new(bytes_z)?;
        let mut z_hat = Tensor::zeros(z_shape);
        let hw = z_shape[2] * z_shape[3];
        for (i, v) in z_hat.data.iter_mut().enumerate() {
            *v = decode_value(&mut dec, &cdfs[i / hw], LATENT_MIN, LATENT_MAX)? as f32;
        }
        let mut g = Graph::portable();
        let v = store.bind(&mut g);
        let (mu_y, sigma_y) = self.hyper_decode_with(&mut g, &v, &z_hat)?;
        let mut dec = RangeDecoder::new(bytes_y)?;
        let mut y_hat = Tensor::zeros(y_shape);
        for (i, v) in y_hat.data.iter_mut().enumerate() {
            let cdf = gaussian_cdf(mu_y.data[i] as f64, sigma_y.data[i] as f64)?;
            *v = decode_value(&mut dec, &cdf, LATENT_MIN, LATENT_MAX)? as f32;
        }
        Ok(LatentBundle {
            y: y_hat.clone(),
            y_hat,
            z: z_hat.clone(),
            z_hat,
            mu_y,
            sigma_y,
            z_loc,
            z_log_scale,
        })
    }
}

pub fn padded(n: usize) -> usize {
    n.div_ceil(SITE_MULTIPLE).max(1) * SITE_MULTIPLE
}

fn uniform_noise<T: Real>(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| T::from_f64(rng.gen_range(-0.5..0.5))).collect() }
}

fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.round_ties_even().clamp(LATENT_MIN as f32, LATENT_MAX as f32))
}

/// Gaussian-bin bits of `v` under `(mu, sigma)` as a differentiable node.
pub fn gaussian_rate_node<T: Real>(g: &mut Graph<T>, v: Var, mu: Var, sigma: Var) -> Result<Var, NnError> {
    let shape = g.shape(v);
    if g.shape(mu) != shape || g.shape(sigma) != shape {
        return Err(NnError::ShapeError("rate operands disagree".into()));
    }
    let n = g.value(v).len();
    let (mut gv, mut gm, mut gs) = (Tensor::zeros(shape), Tensor::zeros(shape), Tensor::zeros(shape));
    let mut total = 0.0;
    for i in 0..n {
        let (x, m, s) = (g.value(v).data[i].to_f64(), g.value(mu).data[i].to_f64(), g.value(sigma).data[i].to_f64());
        let (p, dm, ds) = prob::gaussian_bin_grad(x, m, s, false, false);
        let (bits, _) = prob::floored_bits(libm::log(p));
        total += bits;
        // d bits / dθ = −(dP/dθ) / (max(P, floor) · ln 2)
        let k = -1.0 / (p.max(prob::PROB_FLOOR) * std::f64::consts::LN_2);
        gm.data[i] = T::from_f64(k * dm);
        gs.data[i] = T::from_f64(k * ds);
        gv.data[i] = T::from_f64(-k * dm);
    }
    g.fused(&[v, mu, sigma], total, vec![gv, gm, gs])
}

/// Bits of `z` under the per-channel logistic prior `(loc, log_scale)`,
/// each of shape `(1, C, 1, 1)`.
pub fn logistic_rate_node<T: Real>(g: &mut Graph<T>, z: Var, loc: Var, log_scale: Var) -> Result<Var, NnError> {
    let [n, c, h, w] = g.shape(z);
    if g.value(loc).len() != c || g.value(log_scale).len() != c {
        return Err(NnError::ShapeError("prior parameters do not match latent channels".into()));
    }
    let (mut gz, mut gl, mut gs) = (Tensor::zeros([n, c, h, w]), Tensor::zeros([1, c, 1, 1]), Tensor::zeros([1, c, 1, 1]));
    let mut total = 0.0;
    let hw = h * w;
    let mut dl = vec![0.0; c];
    let mut ds = vec![0.0; c];
    for i in 0..n * c * hw {
        let ch = (i / hw) % c;
        let r = prob::logistic_log_bin(
            g.value(z).data[i].to_f64(),
            g.value(loc).data[ch].to_f64(),
            g.value(log_scale).data[ch].to_f64(),
            false,
            false,
        );
        let (bits, k) = prob::floored_bits(r.logp);
        total += bits;
        let k = -k / std::f64::consts::LN_2;
        dl[ch] += k * r.d_loc;
        ds[ch] += k * r.d_scale;
        gz.data[i] = T::from_f64(-k * r.d_loc);
    }
    for ch in 0..c {
        gl.data[ch] = T::from_f64(dl[ch]);
        gs.data[ch] = T::from_f64(ds[ch]);
    }
    g.fused(&[z, loc, log_scale], total, vec![gz, gl, gs])
}

fn gaussian_bits(v: f64, mu: f64, sigma: f64) -> f64 {
    prob::floored_bits(libm::log(prob::gaussian_bin(v, mu, sigma, false, false))).0
}

fn logistic_bits(v: f64, loc: f64, log_scale: f64) -> f64 {
    prob::floored_bits(prob::logistic_log_bin(v, loc, log_scale, false, false).logp).0
}

/// `(R_y, R_z)` in bits.
pub fn rate_estimate(bundle: &LatentBundle, mode: QuantMode) -> (f64, f64) {
    let (y, z) = match mode {
        QuantMode::Round => (bundle.y_hat.clone(), bundle.z_hat.clone()),
        QuantMode::Noise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut y = bundle.y.clone();
            y.add_assign(&uniform_noise(&mut rng, y.shape));
            let mut z = bundle.z.clone();
            z.add_assign(&uniform_noise(&mut rng, z.shape));
            (y, z)
        }
    };
    let ry = y
        .data
        .iter()
        .zip(bundle.mu_y.data.iter().zip(&bundle.sigma_y.data))
        .map(|(&v, (&m, &s))| gaussian_bits(v as f64, m as f64, s as f64))
        .sum();
    let [_, c, h, w] = z.shape;
    let hw = h * w;
    let rz = z
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            logistic_bits(v as f64, bundle.z_loc[ch] as f64, bundle.z_log_scale[ch] as f64)
        })
        .sum();
    (ry, rz)
}

fn z_prior_cdfs(loc: &[f32], log_scale: &[f32]) -> Result<Vec<QuantizedCdf>, EntropyError> {
    loc.iter()
        .zip(log_scale)
        .map(|(&l, &ls)| {
            let (l, ls) = (l as f64, ls as f64);
            let s = libm::exp(ls);
            let (lo, hi) = prob::window(l - LOGISTIC_SPAN * s, l + LOGISTIC_SPAN * s, LATENT_MIN, LATENT_MAX);
            quantize_cdf(&prob::pmf_from_cdf(lo, hi, |x| prob::logistic_cdf(x, l, ls)), lo)
        })
        .collect()
}

fn gaussian_cdf(mu: f64, sigma: f64) -> Result<QuantizedCdf, EntropyError> {
    let (lo, hi) = prob::window(mu - GAUSSIAN_SPAN * sigma, mu + GAUSSIAN_SPAN * sigma, LATENT_MIN, LATENT_MAX);
    quantize_cdf(&prob::pmf_from_cdf(lo, hi, |x| prob::phi((x - mu) / sigma)), lo)
}

/// `(bytes_z, bytes_y)`: `ẑ` under its factorized prior, then `ŷ` under the
/// Gaussians predicted from `ẑ`.
pub fn encode_latents(bundle: &LatentBundle) -> Result<(Vec<u8>, Vec<u8>), EntropyError> {
    let cdfs = z_prior_cdfs(&bundle.z_loc, &bundle.z_log_scale)?;
    let [_, _, h, w] = bundle.z_hat.shape;
    let mut enc = RangeEncoder::new();
    for (i, &v) in bundle.z_hat.data.iter().enumerate() {
        encode_value(&mut enc, &cdfs[i / (h * w) % cdfs.len()], LATENT_MIN, LATENT_MAX, v as i32);
    }
    let bytes_z = enc.finish();
    let mut enc = RangeEncoder::new();
    for (i, &v) in bundle.y_hat.data.iter().enumerate() {
        let cdf = gaussian_cdf(bundle.mu_y.data[i] as f64, bundle.sigma_y.data[i] as f64)?;
        encode_value(&mut enc, &cdf, LATENT_MIN, LATENT_MAX, v as i32);
    }
    Ok((bytes_z, enc.finish()))
}

/// Denormalizes, rounds half to even and clamps each channel to the JPEG
/// coefficient range. `x_hat` holds `component_ids.len()` stacked
/// components of 64 channels each.
pub fn reconstruct_int<T: Real>(
    x_hat: &Tensor<T>,
    stats: &NormStats,
    component_ids: &[u8],
) -> Result<Vec<DctImage>, LossyError> {
    let [n, c, h, w] = x_hat.shape;
    if n != 1 || c != 64 * component_ids.len() {
        return Err(NnError::ShapeError(format!("{:?} is not a stack of {} components", x_hat.shape, component_ids.len())).into());
    }
    let den = denormalize(x_hat, stats)?;
    let hw = h * w;
    Ok(component_ids
        .iter()
        .enumerate()
        .map(|(ci, &id)| {
            let mut img = DctImage::zeros(h, w, id);
            for ch in 0..64 {
                let (lo, hi) = if ch == 0 { (DC_MIN, DC_MAX) } else { (AC_MIN, AC_MAX) };
                let plane = &den.data[(ci * 64 + ch) * hw..(ci * 64 + ch + 1) * hw];
                for (site, &v) in plane.iter().enumerate() {
                    let r = v.round_even().to_f64().clamp(lo as f64, hi as f64) as i32;
                    img.data[site * 64 + ch] = r;
                }
            }
            img
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct_image::normalize;
    use crate::prob::floored_bits;

    fn small(input: usize) -> (ParamStore<f32>, LossyNet) {
        let mut store = ParamStore::new();
        let cfg = LossyConfig { input_channels: input, latent_channels: 8, hyper_channels: 6, lambda: 0.03 };
        let net = LossyNet::new(&mut store, "lossy", cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, net)
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f32> {
        uniform_noise::<f32>(rng, shape).map(|v| 4.0 * v)
    }

    #[test]
    fn shapes() {
        let (store, net) = small(64);
        let mut g = Graph::new();
        let v = store.bind(&mut g);
        let x = g.constant(Tensor::zeros([1, 64, 8, 8]));
        let y = net.analysis(&mut g, &v, x).unwrap();
        assert_eq!(g.shape(y), [1, 8, 2, 2]);
        let xr = net.synthesis(&mut g, &v, y).unwrap();
        assert_eq!(g.shape(xr), [1, 64, 8, 8]);
        let y4 = g.constant(Tensor::zeros([1, 8, 4, 4]));
        let z = net.hyper_analysis(&mut g, &v, y4).unwrap();
        assert_eq!(g.shape(z), [1, 6, 1, 1]);
        let bad = g.constant(Tensor::zeros([1, 63, 8, 8]));
        assert!(matches!(net.analysis(&mut g, &v, bad), Err(LossyError::Nn(NnError::ShapeError(_)))));
    }

    #[test]
    fn config_validation() {
        assert!(LossyConfig::new(64).validate().is_ok());
        let mut c = LossyConfig::new(64);
        c.lambda = 0.0;
        assert!(c.validate().is_err());
        c = LossyConfig::new(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn sigma_floor_holds() {
        let (mut store, net) = small(64);
        // Push the scale pre-activations strongly negative.
        let slot = store.slot("lossy.h_s.1.bias").unwrap();
        for (i, b) in store.get_mut(slot).value.data.iter_mut().enumerate() {
            if i >= 8 {
                *b = -80.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_input(&mut rng, [1, 6, 2, 2]);
        let mut g = Graph::new();
        let v = store.bind(&mut g);
        let zv = g.constant(z);
        let (_, s) = net.hyper_synthesis(&mut g, &v, zv).unwrap();
        assert!(g.value(s).data.iter().all(|&s| s >= SIGMA_FLOOR as f32));
    }

    #[test]
    fn half_probability_is_one_bit() {
        assert_eq!(floored_bits(0.5f64.ln()).0, 1.0);
        let total: f64 = (0..8).map(|_| floored_bits(0.5f64.ln()).0).sum();
        assert_eq!(total, 8.0);
        // Floor: anything below 2^-16 costs 16 bits.
        assert_eq!(floored_bits(-100.0).0, 16.0);
    }

    #[test]
    fn latents_round_trip_and_truncation() {
        let (store, net) = small(64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input(&mut rng, [1, 64, 20, 13]);
        let mut b = net.compress(&store, &x).unwrap();
        // Random integer latents exercise the windows and escapes.
        for v in b.y_hat.data.iter_mut() {
            *v = rng.gen_range(-40..40) as f32;
        }
        for v in b.z_hat.data.iter_mut().step_by(3) {
            *v = rng.gen_range(-3000..3000) as f32;
        }
        let (mu, sigma) = {
            let mut g = Graph::portable();
            let v = store.bind(&mut g);
            net.hyper_decode_with(&mut g, &v, &b.z_hat).unwrap()
        };
        b.mu_y = mu;
        b.sigma_y = sigma;
        let (bz, by) = encode_latents(&b).unwrap();
        let d = net.decode_latents(&store, &bz, &by, 20, 13).unwrap();
        assert_eq!(d.z_hat, b.z_hat);
        assert_eq!(d.y_hat, b.y_hat);
        assert_eq!(d.mu_y, b.mu_y);
        let cut = &by[..by.len() / 2];
        assert!(matches!(
            net.decode_latents(&store, &bz, cut, 20, 13),
            Err(LossyError::Entropy(EntropyError::StreamCorrupt(_)))
        ));
    }

    #[test]
    fn zero_latents_cost_close_to_their_rate() {
        let (store, net) = small(64);
        let (ys, zs) = net.latent_shapes(64, 64);
        let z_hat = Tensor::zeros(zs);
        let mut g = Graph::portable();
        let v = store.bind(&mut g);
        let (mu_y, sigma_y) = net.hyper_decode_with(&mut g, &v, &z_hat).unwrap();
        let (z_loc, z_log_scale) = net.z_prior(&store);
        let b = LatentBundle {
            y: Tensor::zeros(ys),
            y_hat: Tensor::zeros(ys),
            z: z_hat.clone(),
            z_hat,
            mu_y,
            sigma_y,
            z_loc,
            z_log_scale,
        };
        let (ry, rz) = rate_estimate(&b, QuantMode::Round);
        let (bz, by) = encode_latents(&b).unwrap();
        let coded = 8.0 * (bz.len() + by.len()) as f64;
        assert!((coded - (ry + rz)).abs() <= 0.1 * (ry + rz), "{coded} vs {}", ry + rz);
    }

    #[test]
    fn reconstruct_int_rounds_and_clamps() {
        let mut img = DctImage::zeros(2, 3, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as i32 % 200) - 100;
        }
        let stats = NormStats { mean: (0..64).map(|c| c as f64).collect(), std: vec![4.0; 64] };
        let x = normalize::<f64>(std::slice::from_ref(&img), &stats).unwrap();
        let back = reconstruct_int(&x, &stats, &[1]).unwrap();
        assert_eq!(back[0], img);

        let mut t = Tensor::<f64>::zeros([1, 64, 1, 1]);
        t.data[0] = 3000.0;
        t.data[1] = -5000.0;
        t.data[2] = 2.5;
        let r = reconstruct_int(&t, &NormStats::identity(64), &[1]).unwrap();
        assert_eq!(&r[0].data[..3], &[2047, -1023, 2]);
    }

    #[test]
    fn identity_layers_pass_input_through() {
        // One analysis-like stage with a 1×1 identity kernel and γ = 0 GDN,
        // mirrored by an identity transposed kernel and IGDN.
        let c = 3;
        let mut eye = Tensor::<f64>::zeros([c, c, 1, 1]);
        for i in 0..c {
            eye.data[i * c + i] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = uniform_noise::<f64>(&mut rng, [1, c, 4, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(eye.clone());
        let beta = g.constant(Tensor::full([1, c, 1, 1], 1.0));
        let gamma = g.constant(Tensor::zeros([c, c, 1, 1]));
        let h = g.conv2d(xv, w, None, 1, 0).unwrap();
        let h = g.gdn(h, beta, gamma, false).unwrap();
        let h = g.gdn(h, beta, gamma, true).unwrap();
        let out = g.conv_transpose2d(h, w, None, 1, 0, 0).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn compress_is_deterministic() {
        let (store, net) = small(64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_input(&mut rng, [1, 64, 9, 17]);
        let a = net.compress(&store, &x).unwrap();
        let b = net.compress(&store, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.y_hat.shape, [1, 8, 4, 8]);
        let xr = net.decompress(&store, &a.y_hat, 9, 17).unwrap();
        assert_eq!(xr.shape, [1, 64, 9, 17]);
    }
}
