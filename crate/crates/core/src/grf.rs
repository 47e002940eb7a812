//! Gaussian random field baseline.
//!
//! A centered field on a periodic `n^d` grid whose Fourier coefficients are
//! independent with variance `γ‖k‖^{-a}`. Each coefficient diffuses on its
//! own, so forward noising and the exact posterior are closed-form per mode.
//! Changes `z = x̂_0 - x_0` are measured through `σ = z²`.
//!
//! Mode arrays use the unitary convention: `X = FFT(x)/√N`, `x = IFFT(X)·√N/N`,
//! so that white noise of unit variance in real space has `E|X_k|² = 1`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Parallelism};
use crate::rng::{Purpose, StreamKey};
use crate::statistics::{jackknife_se, radial_bin, radial_bin_count, Binning, CorrelationProfile, ProfileBin, DEGENERATE_C0};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrfConfig {
    /// Spatial dimension.
    pub d: usize,
    /// Grid side.
    pub n: usize,
    /// Spectral exponent, `0 < a < d`.
    pub a: f64,
    /// Spectral amplitude.
    pub gamma: f64,
    /// Diffusion horizon `T`.
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for GrfConfig {
    fn default() -> Self {
        GrfConfig { d: 2, n: 128, a: 1.0, gamma: 1.0, horizon: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl GrfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.d == 0 || self.n < 2 {
            return bad(format!("grid needs d >= 1 and n >= 2, got d={} n={}", self.d, self.n));
        }
        if self.n.checked_pow(self.d as u32).is_none_or(|s| s > 1 << 26) {
            return bad(format!("grid {}^{} is too large", self.n, self.d));
        }
        if !(self.a > 0.0 && self.a < self.d as f64) {
            return bad(format!("spectral exponent must lie in (0, d), got {}", self.a));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("amplitude must be positive, got {}", self.gamma));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!("need 0 < beta_start <= beta_end < 1, got {} and {}", self.beta_start, self.beta_end));
        }
        Ok(())
    }
}

/// Noise schedule `β_t` and `ᾱ_t = Π_{t'≤t}(1-β_{t'})`, with `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// `β_t` linear from `start` at `t=1` to `end` at `t=T`.
    pub fn linear(horizon: usize, start: f64, end: f64) -> Self {
        let beta: Vec<f64> = (0..horizon)
            .map(|i| if horizon == 1 { start } else { start + (end - start) * i as f64 / (horizon - 1) as f64 })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Schedule { beta, alpha_bar }
    }

    pub fn horizon(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Grid geometry, spectrum, schedule and FFT plans.
#[derive(Clone)]
pub struct SpectralGrid {
    config: GrfConfig,
    size: usize,
    k_norm: Vec<f64>,
    sigma2: Vec<f64>,
    /// Squared minimum-image length of each lag vector.
    lag_r2: Vec<usize>,
    schedule: Schedule,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralGrid").field("config", &self.config).field("size", &self.size).finish()
    }
}

impl SpectralGrid {
    pub fn new(config: GrfConfig) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.d, config.n);
        let size = n.pow(d as u32);
        let mut k_norm = Vec::with_capacity(size);
        let mut lag_r2 = Vec::with_capacity(size);
        for idx in 0..size {
            let (mut rest, mut k2, mut r2) = (idx, 0i64, 0usize);
            for _ in 0..d {
                let c = rest % n;
                rest /= n;
                // Integer frequency in (-n/2, n/2].
                let k = if c > n / 2 { c as i64 - n as i64 } else { c as i64 };
                k2 += k * k;
                let m = c.min(n - c);
                r2 += m * m;
            }
            k_norm.push((k2 as f64).sqrt());
            lag_r2.push(r2);
        }
        let sigma2 = k_norm.iter().map(|&k| if k > 0.0 { config.gamma * k.powf(-config.a) } else { 0.0 }).collect();
        let schedule = Schedule::linear(config.horizon, config.beta_start, config.beta_end);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        Ok(SpectralGrid { config, size, k_norm, sigma2, lag_r2, schedule, forward, inverse })
    }

    pub fn config(&self) -> &GrfConfig {
        &self.config
    }

    /// Number of grid points `N = n^d`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn k_norm(&self) -> &[f64] {
        &self.k_norm
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn binning(&self) -> Binning {
        Binning::Radial { d: self.config.d, n: self.config.n }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.horizon {
            return Err(Error::OutOfRange { index: t, size: self.config.horizon });
        }
        Ok(())
    }

    /// Unnormalized in-place FFT over all axes.
    pub fn fft(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.size);
        let plan = if inverse { &self.inverse } else { &self.forward };
        let n = self.config.n;
        let mut line = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        for axis in 0..self.config.d {
            let stride = n.pow(axis as u32);
            let block = n * stride;
            for start in (0..self.size).step_by(block) {
                for offset in 0..stride {
                    let base = start + offset;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, slot) in line.iter().enumerate() {
                        data[base + j * stride] = *slot;
                    }
                }
            }
        }
    }

    /// Modes of unit-variance real white noise.
    pub fn white_modes<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Complex64> {
        let mut data: Vec<Complex64> =
            (0..self.size).map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0)).collect();
        self.fft(&mut data, false);
        let s = 1.0 / (self.size as f64).sqrt();
        data.iter_mut().for_each(|c| *c *= s);
        data
    }

    /// Real-space field of a mode array, and the largest imaginary residue.
    pub fn to_real(&self, modes: &[Complex64]) -> (Vec<f64>, f64) {
        let mut data = modes.to_vec();
        self.fft(&mut data, true);
        let s = 1.0 / (self.size as f64).sqrt();
        let max_imag = data.iter().map(|c| (c.im * s).abs()).fold(0.0, f64::max);
        (data.iter().map(|c| c.re * s).collect(), max_imag)
    }

    /// Periodic autocorrelation `A(Δ) = Σ_u f(u+Δ) f(u)`.
    pub fn autocorrelation(&self, field: &[f64]) -> Vec<f64> {
        let mut data: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft(&mut data, false);
        data.iter_mut().for_each(|c| *c = Complex64::new(c.norm_sqr(), 0.0));
        self.fft(&mut data, true);
        let s = 1.0 / self.size as f64;
        data.iter().map(|c| c.re * s).collect()
    }

    /// Per-mode signal-to-noise ratio `ᾱσ_k²/(1-ᾱ)`.
    pub fn mode_snr(&self, mode: usize, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        self.sigma2[mode] * ab / (1.0 - ab)
    }

    pub fn snr(&self, kappa: f64, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        self.config.gamma * kappa.powf(-self.config.a) / (1.0 / ab - 1.0)
    }

    /// `κ*` with `SNR(κ*, t) = 1`.
    pub fn kappa_star(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        (self.config.gamma / (1.0 / ab - 1.0)).powf(1.0 / self.config.a)
    }

    fn max_radial_bin(&self) -> usize {
        radial_bin_count(self.config.d, self.config.n)
    }
}

/// Original, noised and regenerated modes at one inversion time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeEnsemble {
    pub t: usize,
    pub x0: Vec<Complex64>,
    pub xt: Vec<Complex64>,
    pub xhat0: Vec<Complex64>,
}

impl ModeEnsemble {
    pub fn difference(&self) -> Vec<Complex64> {
        self.xhat0.iter().zip(&self.x0).map(|(a, b)| a - b).collect()
    }

    /// `E_k = |X̂_0 - X_0| / σ_k`; zero for the zero mode.
    pub fn modal_errors(&self, grid: &SpectralGrid) -> Vec<f64> {
        self.xhat0
            .iter()
            .zip(&self.x0)
            .zip(grid.sigma2())
            .map(|((a, b), &s2)| if s2 > 0.0 { (a - b).norm() / s2.sqrt() } else { 0.0 })
            .collect()
    }
}

/// Posterior mean coefficient and variance of `X_0` given `X_t`.
pub fn posterior(sigma2: f64, alpha_bar: f64) -> (f64, f64) {
    let denom = alpha_bar * sigma2 + 1.0 - alpha_bar;
    if denom == 0.0 {
        return (0.0, 0.0);
    }
    (alpha_bar.sqrt() * sigma2 / denom, sigma2 * (1.0 - alpha_bar) / denom)
}

/// Samples `X_0`, then for each `t` the forward noising and a posterior
/// regeneration. The same noise draws are shared across `ts`.
pub fn sample_and_diffuse_many<R: Rng + ?Sized>(
    grid: &SpectralGrid,
    ts: &[usize],
    rng: &mut R,
) -> Result<Vec<ModeEnsemble>> {
    for &t in ts {
        grid.check_t(t)?;
    }
    let w = grid.white_modes(rng);
    let eta = grid.white_modes(rng);
    let xi = grid.white_modes(rng);
    let x0: Vec<Complex64> = w.iter().zip(grid.sigma2()).map(|(w, s2)| w * s2.sqrt()).collect();
    Ok(ts
        .iter()
        .map(|&t| {
            let ab = grid.schedule().alpha_bar(t);
            let xt: Vec<Complex64> =
                x0.iter().zip(&eta).map(|(x, e)| x * ab.sqrt() + e * (1.0 - ab).sqrt()).collect();
            let xhat0 = xt
                .iter()
                .zip(&xi)
                .zip(grid.sigma2())
                .map(|((x, z), &s2)| {
                    let (mean, var) = posterior(s2, ab);
                    x * mean + z * var.sqrt()
                })
                .collect();
            ModeEnsemble { t, x0: x0.clone(), xt, xhat0 }
        })
        .collect())
}

pub fn sample_and_diffuse<R: Rng + ?Sized>(grid: &SpectralGrid, t: usize, rng: &mut R) -> Result<ModeEnsemble> {
    Ok(sample_and_diffuse_many(grid, &[t], rng)?.pop().expect("one time"))
}

/// Backward coefficient `(1 - β_τ/(ᾱ_τσ²+1-ᾱ_τ)) / √(1-β_τ)` of one step.
fn backward_gain(schedule: &Schedule, sigma2: f64, tau: usize) -> f64 {
    let b = schedule.beta(tau);
    let ab = schedule.alpha_bar(tau);
    (1.0 - b / (ab * sigma2 + 1.0 - ab)) / (1.0 - b).sqrt()
}

/// Discretized reverse chain from `X_t` down to `X_0` with the exact score.
pub fn backward_chain<R: Rng + ?Sized>(
    grid: &SpectralGrid,
    xt: &[Complex64],
    t: usize,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    grid.check_t(t)?;
    if xt.len() != grid.size() {
        return Err(Error::LengthMismatch { expected: grid.size(), got: xt.len() });
    }
    let mut x = xt.to_vec();
    for tau in (1..=t).rev() {
        let noise = grid.white_modes(rng);
        let sb = grid.schedule().beta(tau).sqrt();
        for ((x, z), &s2) in x.iter_mut().zip(&noise).zip(grid.sigma2()) {
            *x = *x * backward_gain(grid.schedule(), s2, tau) + z * sb;
        }
    }
    Ok(x)
}

/// Second moments of a regenerated mode: `E|X̂_0|²` and `E[X̂_0 X_0*]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeMoments {
    pub second: f64,
    pub cross: f64,
}

pub fn posterior_moments(sigma2: f64, alpha_bar: f64) -> ModeMoments {
    let (mean, _) = posterior(sigma2, alpha_bar);
    ModeMoments { second: sigma2, cross: mean * alpha_bar.sqrt() * sigma2 }
}

/// Exact moments of [`backward_chain`] for one mode, propagated step by step.
pub fn backward_chain_moments(schedule: &Schedule, sigma2: f64, t: usize) -> ModeMoments {
    let ab = schedule.alpha_bar(t);
    let mut second = ab * sigma2 + 1.0 - ab;
    let mut cross = ab.sqrt() * sigma2;
    for tau in (1..=t).rev() {
        let g = backward_gain(schedule, sigma2, tau);
        second = g * g * second + schedule.beta(tau);
        cross *= g;
    }
    ModeMoments { second, cross }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDiagnostics {
    pub t: usize,
    pub alpha_bar: f64,
    pub kappa_star: f64,
    /// `(κ, SNR(κ, t))` at integer `κ` up to the grid corner.
    pub snr: Vec<(f64, f64)>,
}

pub fn mode_diagnostics(grid: &SpectralGrid, t: usize) -> Result<ModeDiagnostics> {
    grid.check_t(t)?;
    let snr = (1..grid.max_radial_bin()).map(|k| (k as f64, grid.snr(k as f64, t))).collect();
    Ok(ModeDiagnostics { t, alpha_bar: grid.schedule().alpha_bar(t), kappa_star: grid.kappa_star(t), snr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalErrorBin {
    /// Annulus `round(‖k‖)`.
    pub kappa: usize,
    pub n_modes: usize,
    pub mean_e2: f64,
    pub stderr: f64,
    /// Mean of `2/(1+SNR_k)` over the annulus.
    pub predicted: f64,
}

/// Sample-wise sums for one inversion time.
#[derive(Debug, Clone)]
struct Accumulator {
    n: usize,
    sigma_sum: Vec<f64>,
    autocorr_sum: Vec<f64>,
    e2_sum: Vec<f64>,
    e2_sq_sum: Vec<f64>,
    max_imag: f64,
}

impl Accumulator {
    fn single(grid: &SpectralGrid, ens: &ModeEnsemble) -> Self {
        let (z, max_imag) = grid.to_real(&ens.difference());
        let sigma: Vec<f64> = z.iter().map(|x| x * x).collect();
        let autocorr = grid.autocorrelation(&sigma);
        let nb = grid.max_radial_bin();
        let mut e2 = vec![0.0; nb];
        let mut count = vec![0usize; nb];
        for (k, e) in ens.modal_errors(grid).iter().enumerate() {
            if grid.sigma2()[k] > 0.0 {
                let b = radial_bin_of(grid.k_norm()[k]);
                e2[b] += e * e;
                count[b] += 1;
            }
        }
        e2.iter_mut().zip(&count).for_each(|(s, &c)| *s /= c.max(1) as f64);
        let e2_sq = e2.iter().map(|x| x * x).collect();
        Accumulator { n: 1, sigma_sum: sigma, autocorr_sum: autocorr, e2_sum: e2, e2_sq_sum: e2_sq, max_imag }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.combine(other, 1.0);
        self.max_imag = self.max_imag.max(other.max_imag);
    }

    /// The same sums with the samples of `other` removed.
    fn without(&self, other: &Accumulator) -> Accumulator {
        let mut out = self.clone();
        out.combine(other, -1.0);
        out
    }

    fn combine(&mut self, other: &Accumulator, sign: f64) {
        self.n = if sign > 0.0 { self.n + other.n } else { self.n - other.n };
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += sign * y);
        add(&mut self.sigma_sum, &other.sigma_sum);
        add(&mut self.autocorr_sum, &other.autocorr_sum);
        add(&mut self.e2_sum, &other.e2_sum);
        add(&mut self.e2_sq_sum, &other.e2_sq_sum);
    }
}

/// Jackknife groups; sample `i` belongs to group `i % JACKKNIFE_GROUPS`.
pub const JACKKNIFE_GROUPS: usize = 32;

/// Per-group accumulators in group order.
#[derive(Debug, Clone)]
struct Groups(Vec<Option<Accumulator>>);

impl Groups {
    fn new(n_samples: usize) -> Self {
        Groups(vec![None; JACKKNIFE_GROUPS.min(n_samples).max(1)])
    }

    fn add(&mut self, sample: usize, one: Accumulator) {
        let k = self.0.len();
        match &mut self.0[sample % k] {
            slot @ None => *slot = Some(one),
            Some(a) => a.merge(&one),
        }
    }

    fn total(&self) -> Option<Accumulator> {
        let mut it = self.0.iter().flatten();
        let mut total = it.next()?.clone();
        it.for_each(|g| total.merge(g));
        Some(total)
    }
}

fn radial_bin_of(k: f64) -> usize {
    (k + 0.5).floor() as usize
}

/// Empirical and predicted statistics at one inversion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrfPoint {
    pub t: usize,
    pub t_over_t: f64,
    pub alpha_bar: f64,
    pub kappa_star: f64,
    pub n_samples: usize,
    /// Radially binned `C(r)/C(0)` of `σ = z²`, with `χ`.
    pub profile: CorrelationProfile,
    pub correlation_length: f64,
    pub correlation_length_stderr: Option<f64>,
    /// Leave-one-group-out `χ` and `ξ`; groups are the same samples at
    /// every `t`, so differences across `t` can be jackknifed too.
    #[serde(skip)]
    pub chi_replicates: Vec<f64>,
    #[serde(skip)]
    pub length_replicates: Vec<f64>,
    /// Predictions from the exact difference spectrum.
    pub chi_exact: f64,
    pub correlation_length_exact: f64,
    /// Predictions keeping only `‖k‖ > κ*` with variance `2σ_k²`.
    pub chi_cutoff: f64,
    pub modal: Vec<ModalErrorBin>,
    /// Largest imaginary residue of the real-space difference fields.
    pub max_imag: f64,
}

/// Lags entering the correlation length, in lattice units.
pub const LENGTH_WINDOW: usize = 8;

/// Second-moment correlation length `sqrt(Σ|Δ|²C' / ΣC')` over lags with
/// `|Δ| ≤ LENGTH_WINDOW`, where `C'` is `C` minus its mean beyond the window.
/// Without the baseline the sampling error of the spatial total of `σ`,
/// spread evenly over all lags, swamps the sum.
fn second_moment_length(grid: &SpectralGrid, c: &[f64]) -> f64 {
    let w2 = LENGTH_WINDOW.min(grid.config().n / 4).pow(2);
    let (far_sum, far_n) =
        c.iter().zip(&grid.lag_r2).filter(|(_, &r2)| r2 > w2).fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
    let base = if far_n > 0 { far_sum / far_n as f64 } else { 0.0 };
    let (mut total, mut m) = (0.0, 0.0);
    for (x, &r2) in c.iter().zip(&grid.lag_r2) {
        if r2 <= w2 {
            total += x - base;
            m += (x - base) * r2 as f64;
        }
    }
    if !(total > 0.0) {
        return 0.0;
    }
    (m / total).max(0.0).sqrt()
}

fn radial_profile(grid: &SpectralGrid, c: &[f64]) -> Vec<ProfileBin> {
    let nb = grid.max_radial_bin();
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for (x, &r2) in c.iter().zip(&grid.lag_r2) {
        let b = radial_bin(r2);
        sums[b] += x;
        counts[b] += 1;
    }
    let c0 = c[0];
    sums.iter()
        .zip(&counts)
        .enumerate()
        .filter(|(_, (_, &n))| n > 0)
        .map(|(b, (&s, &n))| ProfileBin {
            bin: b,
            r: b,
            c_over_c0: if c0 > DEGENERATE_C0 { s / n as f64 / c0 } else { 0.0 },
            pair_count: n * grid.size(),
            stderr: None,
        })
        .collect()
}

/// Covariance `C(Δ)` of `σ` pooled over positions.
fn covariance(grid: &SpectralGrid, acc: &Accumulator) -> Vec<f64> {
    let n = acc.n as f64;
    let size = grid.size() as f64;
    let mean: Vec<f64> = acc.sigma_sum.iter().map(|s| s / n).collect();
    let mean_ac = grid.autocorrelation(&mean);
    acc.autocorr_sum.iter().zip(&mean_ac).map(|(a, m)| (a - n * m) / ((n - 1.0) * size)).collect()
}

/// `(χ, ξ, profile)` of one covariance; `None` when degenerate.
fn summarize(grid: &SpectralGrid, c: &[f64]) -> Option<(f64, f64, Vec<ProfileBin>)> {
    (c[0] > DEGENERATE_C0).then(|| (c.iter().sum::<f64>() / c[0], second_moment_length(grid, c), radial_profile(grid, c)))
}

fn finish(grid: &SpectralGrid, t: usize, groups: &Groups) -> Result<GrfPoint> {
    let acc = groups.total().ok_or(Error::InsufficientTrajectories { needed: 2, got: 0 })?;
    if acc.n < 2 {
        return Err(Error::InsufficientTrajectories { needed: 2, got: acc.n });
    }
    let n = acc.n as f64;
    let c = covariance(grid, &acc);
    let c0 = c[0];
    let full = summarize(grid, &c);
    let degenerate = full.is_none();
    // Leave-one-group-out replicates; a group holding every sample but one
    // leaves too little to estimate a covariance.
    let replicates: Vec<(f64, f64, Vec<ProfileBin>)> = if degenerate || groups.0.len() < 2 || acc.n < 3 {
        Vec::new()
    } else {
        groups.0.iter().flatten().filter_map(|g| summarize(grid, &covariance(grid, &acc.without(g)))).collect()
    };
    let jack = replicates.len() == groups.0.len();
    let (chi, correlation_length, mut bins) = full.unwrap_or((f64::NAN, 0.0, radial_profile(grid, &c)));
    let (chi_replicates, length_replicates): (Vec<f64>, Vec<f64>) =
        if jack { replicates.iter().map(|r| (r.0, r.1)).unzip() } else { (Vec::new(), Vec::new()) };
    if jack {
        for (i, bin) in bins.iter_mut().enumerate() {
            let loo: Vec<f64> = replicates.iter().map(|r| r.2[i].c_over_c0).collect();
            bin.stderr = Some(jackknife_se(&loo));
        }
    }
    let profile = CorrelationProfile {
        binning: grid.binning(),
        bins,
        c0,
        chi: (!degenerate).then_some(chi),
        chi_stderr: jack.then(|| jackknife_se(&chi_replicates)),
        window: None,
        n_data: acc.n,
        n_traj: 1,
        noise: t as f64 / grid.config().horizon as f64,
        degenerate,
    };
    let correlation_length_stderr = jack.then(|| jackknife_se(&length_replicates));

    let nb = grid.max_radial_bin();
    let mut predicted = vec![0.0; nb];
    let mut n_modes = vec![0usize; nb];
    for k in 0..grid.size() {
        if grid.sigma2()[k] > 0.0 {
            let b = radial_bin_of(grid.k_norm()[k]);
            predicted[b] += 2.0 / (1.0 + grid.mode_snr(k, t));
            n_modes[b] += 1;
        }
    }
    let modal = (0..nb)
        .filter(|&b| n_modes[b] > 0)
        .map(|b| {
            let m = acc.e2_sum[b] / n;
            let var = (acc.e2_sq_sum[b] / n - m * m).max(0.0) * n / (n - 1.0);
            ModalErrorBin {
                kappa: b,
                n_modes: n_modes[b],
                mean_e2: m,
                stderr: (var / n).sqrt(),
                predicted: predicted[b] / n_modes[b] as f64,
            }
        })
        .collect();
    let exact = predicted_profile(grid, t, SpectrumModel::Exact)?;
    let cutoff = predicted_profile(grid, t, SpectrumModel::Cutoff)?;
    Ok(GrfPoint {
        t,
        t_over_t: t as f64 / grid.config().horizon as f64,
        alpha_bar: grid.schedule().alpha_bar(t),
        kappa_star: grid.kappa_star(t),
        n_samples: acc.n,
        profile,
        correlation_length,
        correlation_length_stderr,
        chi_replicates,
        length_replicates,
        chi_exact: exact.chi,
        correlation_length_exact: exact.correlation_length,
        chi_cutoff: cutoff.chi,
        modal,
        max_imag: acc.max_imag,
    })
}

/// Statistics of the difference field over a batch of ensembles at one `t`.
pub fn diff_field_correlations(batch: &[ModeEnsemble], grid: &SpectralGrid) -> Result<GrfPoint> {
    let first = batch.first().ok_or(Error::InsufficientTrajectories { needed: 2, got: 0 })?;
    let t = first.t;
    let mut groups = Groups::new(batch.len());
    for (i, ens) in batch.iter().enumerate() {
        if ens.t != t {
            return Err(Error::InvalidParams("batch mixes inversion times".into()));
        }
        if ens.x0.len() != grid.size() {
            return Err(Error::LengthMismatch { expected: grid.size(), got: ens.x0.len() });
        }
        groups.add(i, Accumulator::single(grid, ens));
    }
    finish(grid, t, &groups)
}

/// Samples processed per parallel round; bounds peak memory.
const CHUNK: usize = 16;

/// Full sweep over inversion times with shared noise across `ts`.
pub fn run_grf(
    grid: &SpectralGrid,
    ts: &[usize],
    n_samples: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<GrfPoint>> {
    if n_samples < 2 {
        return Err(Error::InsufficientTrajectories { needed: 2, got: n_samples });
    }
    for &t in ts {
        grid.check_t(t)?;
    }
    let mut accs: Vec<Groups> = vec![Groups::new(n_samples); ts.len()];
    for start in (0..n_samples).step_by(CHUNK) {
        let len = CHUNK.min(n_samples - start);
        let round = map_indexed(len, par, |i| {
            let mut rng = StreamKey::new(seed, Purpose::Field).datum(start + i).rng();
            sample_and_diffuse_many(grid, ts, &mut rng)
                .map(|ens| ens.iter().map(|e| Accumulator::single(grid, e)).collect::<Vec<_>>())
        });
        for (i, per_t) in round.into_iter().enumerate() {
            for (groups, one) in accs.iter_mut().zip(per_t?) {
                groups.add(start + i, one);
            }
        }
    }
    ts.iter().zip(&accs).map(|(&t, groups)| finish(grid, t, groups)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumModel {
    /// `E|Z_k|² = 2σ_k²/(1+SNR_k)`.
    Exact,
    /// `2σ_k²` for `‖k‖ > κ*`, zero below.
    Cutoff,
}

/// Expected `E|Z_k|²` of the difference field.
pub fn difference_spectrum(grid: &SpectralGrid, t: usize, model: SpectrumModel) -> Result<Vec<f64>> {
    grid.check_t(t)?;
    let ks = grid.kappa_star(t);
    Ok((0..grid.size())
        .map(|k| {
            let s2 = grid.sigma2()[k];
            match model {
                SpectrumModel::Exact => 2.0 * s2 / (1.0 + grid.mode_snr(k, t)),
                SpectrumModel::Cutoff if grid.k_norm()[k] > ks => 2.0 * s2,
                SpectrumModel::Cutoff => 0.0,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedProfile {
    pub t: usize,
    pub model: SpectrumModel,
    /// `(r, C(r)/C(0))` by annulus.
    pub profile: Vec<(usize, f64)>,
    pub chi: f64,
    pub correlation_length: f64,
}

/// Gaussian prediction `C(Δ) = 2K(Δ)²` with `K` the covariance of `z`.
pub fn predicted_profile(grid: &SpectralGrid, t: usize, model: SpectrumModel) -> Result<PredictedProfile> {
    let s = difference_spectrum(grid, t, model)?;
    let total: f64 = s.iter().sum();
    if !(total > 0.0) {
        return Ok(PredictedProfile { t, model, profile: Vec::new(), chi: f64::NAN, correlation_length: 0.0 });
    }
    let mut k: Vec<Complex64> = s.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    grid.fft(&mut k, true);
    let size = grid.size() as f64;
    let c: Vec<f64> = k.iter().map(|z| 2.0 * (z.re / size).powi(2)).collect();
    // Parseval: Σ_Δ K(Δ)² / K(0)² = N Σ S² / (Σ S)².
    let chi = size * s.iter().map(|x| x * x).sum::<f64>() / (total * total);
    let profile = radial_profile(grid, &c).into_iter().map(|b| (b.r, b.c_over_c0)).collect();
    Ok(PredictedProfile { t, model, profile, chi, correlation_length: second_moment_length(grid, &c) })
}
