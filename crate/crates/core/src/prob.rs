//! Discretized continuous distributions over unit-width integer bins.
//!
//! Each `*_log_bin` returns `log P(v)` for the bin `[v − ½, v + ½]` together
//! with its derivatives. `low_edge` / `high_edge` make the bin absorb the
//! whole left / right tail. All arithmetic is `f64` through `libm`.

use libm::{erfc, exp, expm1, log, log1p};

/// Smallest probability any symbol is charged for when measuring rates.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogBin {
    pub logp: f64,
    /// ∂ log P / ∂ location.
    pub d_loc: f64,
    /// ∂ log P / ∂ scale parameter (see each function for which one).
    pub d_scale: f64,
}

/// `−log2 max(p, floor)`.
pub fn bits(p: f64) -> f64 {
    -p.max(PROB_FLOOR).log2()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -log1p(exp(-x))
    } else {
        x - log1p(exp(x))
    }
}

/// Logistic with location `mu` and log-scale `log_s`; `d_scale` is with
/// respect to `log_s`.
pub fn logistic_log_bin(v: f64, mu: f64, log_s: f64, low_edge: bool, high_edge: bool) -> LogBin {
    let w = exp(-log_s);
    let a = (v + 0.5 - mu) * w;
    let b = (v - 0.5 - mu) * w;
    match (low_edge, high_edge) {
        (true, true) => LogBin { logp: 0.0, d_loc: 0.0, d_scale: 0.0 },
        (true, false) => {
            let sa = sigmoid(-a);
            LogBin { logp: log_sigmoid(a), d_loc: -w * sa, d_scale: -a * sa }
        }
        (false, true) => {
            let sb = sigmoid(b);
            LogBin { logp: log_sigmoid(-b), d_loc: w * sb, d_scale: b * sb }
        }
        (false, false) => {
            // σ(a) − σ(b) = σ(a)·σ(−b)·(1 − e^{−w})
            let (sa, sb) = (sigmoid(-a), sigmoid(b));
            let logp = log_sigmoid(a) + log_sigmoid(-b) + log(-expm1(-w));
            LogBin { logp, d_loc: w * (sb - sa), d_scale: -a * sa + b * sb - w / expm1(w) }
        }
    }
}

/// Logistic CDF at `x`.
pub fn logistic_cdf(x: f64, mu: f64, log_s: f64) -> f64 {
    sigmoid((x - mu) * exp(-log_s))
}

/// Laplace with location `mu` and log-scale `log_b`; `d_scale` is with
/// respect to `log_b`.
pub fn laplace_log_bin(v: f64, mu: f64, log_b: f64, low_edge: bool, high_edge: bool) -> LogBin {
    let w = exp(-log_b);
    let (l, h) = (v - 0.5 - mu, v + 0.5 - mu);
    let ln_half = -LN_2;
    let left = !low_edge;
    let right = !high_edge;
    match (left, right) {
        (false, false) => LogBin { logp: 0.0, d_loc: 0.0, d_scale: 0.0 },
        // P = F(h)
        (false, true) => {
            if h <= 0.0 {
                LogBin { logp: ln_half + h * w, d_loc: -w, d_scale: -h * w }
            } else {
                let e = 0.5 * exp(-h * w);
                let p = 1.0 - e;
                LogBin { logp: log1p(-e), d_loc: -e * w / p, d_scale: -e * h * w / p }
            }
        }
        // P = 1 − F(l)
        (true, false) => {
            if l >= 0.0 {
                LogBin { logp: ln_half - l * w, d_loc: w, d_scale: l * w }
            } else {
                let e = 0.5 * exp(l * w);
                let p = 1.0 - e;
                LogBin { logp: log1p(-e), d_loc: e * w / p, d_scale: e * l * w / p }
            }
        }
        (true, true) => {
            let tail = log(-expm1(-w));
            if l >= 0.0 {
                LogBin { logp: ln_half - l * w + tail, d_loc: w, d_scale: l * w - w / expm1(w) }
            } else if h <= 0.0 {
                LogBin { logp: ln_half + h * w + tail, d_loc: -w, d_scale: -h * w - w / expm1(w) }
            } else {
                // Bin straddles the mode: P = 1 − ½e^{−hw} − ½e^{lw}.
                let (eh, el) = (0.5 * exp(-h * w), 0.5 * exp(l * w));
                let p = 1.0 - eh - el;
                // dP/dμ = −f(h) + f(l), f(x) = w·½e^{−|x|w}
                let dmu = (-eh + el) * w;
                // dF(x)/dlog b = −(x−μ)·f(x)
                let dlb = -h * w * eh + l * w * el;
                LogBin { logp: log(p), d_loc: dmu / p, d_scale: dlb / p }
            }
        }
    }
}

pub fn laplace_cdf(x: f64, mu: f64, log_b: f64) -> f64 {
    let z = (x - mu) * exp(-log_b);
    if z < 0.0 {
        0.5 * exp(z)
    } else {
        1.0 - 0.5 * exp(-z)
    }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    exp(-0.5 * x * x) / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability of the bin under N(mu, sigma²), computed on the side of the
/// mean where the CDF difference does not cancel.
pub fn gaussian_bin(v: f64, mu: f64, sigma: f64, low_edge: bool, high_edge: bool) -> f64 {
    let d = v - mu;
    // Reflect so the bin lies at or left of the mean.
    let (d, lo_edge, hi_edge) = if d > 0.0 { (-d, high_edge, low_edge) } else { (d, low_edge, high_edge) };
    let upper = if hi_edge { 1.0 } else { phi((d + 0.5) / sigma) };
    let lower = if lo_edge { 0.0 } else { phi((d - 0.5) / sigma) };
    (upper - lower).max(0.0)
}

/// Gaussian bin; `d_scale` is with respect to `sigma` itself.
pub fn gaussian_log_bin(v: f64, mu: f64, sigma: f64, low_edge: bool, high_edge: bool) -> LogBin {
    let (p, dmu, dsig) = gaussian_bin_grad(v, mu, sigma, low_edge, high_edge);
    LogBin { logp: log(p), d_loc: dmu / p, d_scale: dsig / p }
}

/// Gaussian bin probability with `∂P/∂mu` and `∂P/∂sigma`.
pub fn gaussian_bin_grad(v: f64, mu: f64, sigma: f64, low_edge: bool, high_edge: bool) -> (f64, f64, f64) {
    let p = gaussian_bin(v, mu, sigma, low_edge, high_edge);
    let a = (v + 0.5 - mu) / sigma;
    let b = (v - 0.5 - mu) / sigma;
    let fa = if high_edge { 0.0 } else { normal_pdf(a) };
    let fb = if low_edge { 0.0 } else { normal_pdf(b) };
    (p, (fb - fa) / sigma, (-a * fa + b * fb) / sigma)
}

/// Bits charged for a symbol whose log-probability is `logp`, and the
/// factor its log-probability gradient is scaled by. Below the floor the
/// charge is constant but the gradient is kept, scaled by `P / floor`, so
/// training can still pull outliers back.
pub fn floored_bits(logp: f64) -> (f64, f64) {
    let lf = log(PROB_FLOOR);
    if logp >= lf {
        (-logp / LN_2, 1.0)
    } else {
        (-lf / LN_2, exp(logp - lf))
    }
}

/// Window `[lo, hi]` wide enough that the tails beyond it carry negligible
/// mass, with one extra symbol on each side so the edge symbols (which
/// absorb the tails) are never the likely ones. Clamped to the alphabet.
pub fn window(centre_lo: f64, centre_hi: f64, amin: i32, amax: i32) -> (i32, i32) {
    let lo = (centre_lo.floor() - 1.0).clamp(amin as f64, amax as f64) as i32;
    let hi = (centre_hi.ceil() + 1.0).clamp(amin as f64, amax as f64) as i32;
    (lo.min(hi), hi.max(lo))
}

/// Bin probabilities over `[lo, hi]` from a CDF, the first and last bins
/// absorbing the tails. Sums to exactly 1 up to rounding.
pub fn pmf_from_cdf(lo: i32, hi: i32, cdf: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = (hi - lo + 1) as usize;
    let mut out = Vec::with_capacity(n);
    let mut prev = 0.0;
    for i in 0..n {
        let next = if i + 1 == n { 1.0 } else { cdf(lo as f64 + i as f64 + 0.5) };
        out.push((next - prev).max(0.0));
        prev = next;
    }
    out
}

/// Converts a natural-log probability to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}
