//! Dynamical correlation estimators.
//!
//! A forward-backward experiment yields one spin per position: `+1` if the
//! token changed, `-1` otherwise (or, for continuous tokens, the norm of the
//! change). For each starting datum the covariance of spins across its
//! trajectories is estimated with the `1/(n-1)` correction, and these
//! matrices are averaged over data. Profiles bin the averaged matrix by
//! distance and normalize by the mean autocorrelation `C(0)`; the
//! susceptibility is the total correlation over the total autocorrelation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::tree_distance;
use crate::meanfield::PhaseDiagnosis;
use crate::parallel::{map_indexed, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinMode {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSample {
    pub values: Vec<f64>,
    pub mode: SpinMode,
}

/// `+1` where the token changed, `-1` where it was kept.
pub fn make_spins<T: PartialEq>(x0: &[T], xhat0: &[T]) -> Result<SpinSample> {
    if x0.len() != xhat0.len() {
        return Err(Error::LengthMismatch { expected: x0.len(), got: xhat0.len() });
    }
    let values = x0.iter().zip(xhat0).map(|(a, b)| if a == b { -1.0 } else { 1.0 }).collect();
    Ok(SpinSample { values, mode: SpinMode::Discrete })
}

/// Euclidean norm of the per-position change of an embedding sequence.
pub fn make_spins_continuous(x0: &[Vec<f64>], xhat0: &[Vec<f64>]) -> Result<SpinSample> {
    if x0.len() != xhat0.len() {
        return Err(Error::LengthMismatch { expected: x0.len(), got: xhat0.len() });
    }
    let mut values = Vec::with_capacity(x0.len());
    for (a, b) in x0.iter().zip(xhat0) {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
        }
        values.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
    }
    Ok(SpinSample { values, mode: SpinMode::Continuous })
}

/// Dense symmetric `dim × dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                values.push(f(i, j));
            }
        }
        CorrelationMatrix { dim, values }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// Covariance of spins across the trajectories of one datum.
pub fn datum_covariance(trajectories: &[SpinSample]) -> Result<CorrelationMatrix> {
    let n = trajectories.len();
    if n < 2 {
        return Err(Error::InsufficientTrajectories { needed: 2, got: n });
    }
    let dim = trajectories[0].values.len();
    if let Some(bad) = trajectories.iter().find(|t| t.values.len() != dim) {
        return Err(Error::LengthMismatch { expected: dim, got: bad.values.len() });
    }
    let mut mean = vec![0.0; dim];
    for t in trajectories {
        mean.iter_mut().zip(&t.values).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut values = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for t in trajectories {
        centered.iter_mut().zip(&t.values).zip(&mean).for_each(|((c, x), m)| *c = x - m);
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut values[i * dim..(i + 1) * dim];
            // Upper triangle only; mirrored below.
            for j in i..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for i in 0..dim {
        for j in i..dim {
            let x = values[i * dim + j] * norm;
            values[i * dim + j] = x;
            values[j * dim + i] = x;
        }
    }
    Ok(CorrelationMatrix { dim, values })
}

/// Per-datum covariances averaged over data.
pub fn ensemble_correlations(groups: &[Vec<SpinSample>], par: Parallelism) -> Result<CorrelationMatrix> {
    if groups.is_empty() {
        return Err(Error::InsufficientData("no data".into()));
    }
    let mats = map_indexed(groups.len(), par, |d| datum_covariance(&groups[d]));
    let mut acc: Option<CorrelationMatrix> = None;
    for m in mats {
        let m = m?;
        match &mut acc {
            None => acc = Some(m),
            Some(a) => {
                if a.dim != m.dim {
                    return Err(Error::LengthMismatch { expected: a.dim, got: m.dim });
                }
                a.values.iter_mut().zip(&m.values).for_each(|(x, y)| *x += y);
            }
        }
    }
    let mut out = acc.expect("non-empty");
    let inv = 1.0 / groups.len() as f64;
    out.values.iter_mut().for_each(|x| *x *= inv);
    Ok(out)
}

/// How pairs of positions are grouped by distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Binning {
    /// By tree distance `ℓ̃` on a regular tree; reported at `r = s^ℓ̃ - 1`.
    Tree { s: usize, depth: usize },
    /// By index distance `r = |i - j|`.
    Index,
    /// By rounded Euclidean distance on a periodic `n^d` grid (row-major).
    Radial { d: usize, n: usize },
}

impl Binning {
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if let Binning::Tree { s, depth } = *self {
            let expected = s.checked_pow(depth as u32).unwrap_or(usize::MAX);
            if expected != dim {
                return Err(Error::LengthMismatch { expected, got: dim });
            }
        }
        if let Binning::Radial { d, n } = *self {
            let expected = n.checked_pow(d as u32).unwrap_or(usize::MAX);
            if expected != dim {
                return Err(Error::LengthMismatch { expected, got: dim });
            }
        }
        Ok(())
    }

    pub fn num_bins(&self, dim: usize) -> usize {
        match *self {
            Binning::Tree { depth, .. } => depth + 1,
            Binning::Index => dim.max(1),
            Binning::Radial { d, n } => radial_bin_count(d, n),
        }
    }

    #[inline]
    pub fn bin(&self, i: usize, j: usize) -> usize {
        match *self {
            Binning::Tree { s, .. } => tree_distance(i, j, s),
            Binning::Index => i.abs_diff(j),
            Binning::Radial { d, n } => {
                let (mut a, mut b, mut r2) = (i, j, 0usize);
                for _ in 0..d {
                    let delta = (a % n).abs_diff(b % n);
                    let delta = delta.min(n - delta);
                    r2 += delta * delta;
                    a /= n;
                    b /= n;
                }
                radial_bin(r2)
            }
        }
    }

    /// Real-space distance of a bin.
    pub fn distance(&self, bin: usize) -> usize {
        match *self {
            Binning::Tree { s, .. } => s.pow(bin as u32) - 1,
            Binning::Index | Binning::Radial { .. } => bin,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Binning::Tree { .. } => "tree",
            Binning::Index => "index",
            Binning::Radial { .. } => "radial",
        }
    }
}

/// Unit-width annulus of a squared distance: `round(sqrt(r2))`.
#[inline]
pub fn radial_bin(r2: usize) -> usize {
    ((r2 as f64).sqrt() + 0.5).floor() as usize
}

pub fn radial_bin_count(d: usize, n: usize) -> usize {
    let half = n / 2;
    radial_bin(d * half * half) + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub bin: usize,
    pub r: usize,
    /// `C(r)/C(0)`.
    pub c_over_c0: f64,
    /// Ordered pairs `(i, j)` in the bin, `i = j` included at `r = 0`.
    pub pair_count: usize,
    /// Jackknife standard error over data, when available.
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationProfile {
    pub binning: Binning,
    pub bins: Vec<ProfileBin>,
    /// Mean autocorrelation.
    pub c0: f64,
    pub chi: Option<f64>,
    pub chi_stderr: Option<f64>,
    /// Largest distance included in `chi`; `None` for unbounded.
    pub window: Option<usize>,
    pub n_data: usize,
    pub n_traj: usize,
    pub noise: f64,
    /// No change anywhere: normalized values are reported as 0.
    pub degenerate: bool,
}

impl CorrelationProfile {
    pub fn value(&self, bin: usize) -> f64 {
        self.bins[bin].c_over_c0
    }
}

/// Autocorrelation below which a matrix counts as "no change anywhere".
pub const DEGENERATE_C0: f64 = 1e-14;

/// Bin sums of one matrix.
#[derive(Debug, Clone, PartialEq)]
struct BinSums {
    sums: Vec<f64>,
    counts: Vec<usize>,
    diag: f64,
    windowed: f64,
}

fn bin_sums(c: &CorrelationMatrix, binning: Binning, window: Option<usize>) -> BinSums {
    let nb = binning.num_bins(c.dim);
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    let mut windowed = 0.0;
    for i in 0..c.dim {
        let row = &c.values[i * c.dim..(i + 1) * c.dim];
        for (j, &x) in row.iter().enumerate() {
            let b = binning.bin(i, j);
            sums[b] += x;
            counts[b] += 1;
            if window.is_none_or(|w| binning.distance(b) <= w) {
                windowed += x;
            }
        }
    }
    let diag = (0..c.dim).map(|i| c.get(i, i)).sum();
    BinSums { sums, counts, diag, windowed }
}

fn profile_from_sums(
    sums: &BinSums,
    dim: usize,
    binning: Binning,
    window: Option<usize>,
) -> (Vec<ProfileBin>, f64, Option<f64>, bool) {
    let c0 = sums.diag / dim as f64;
    let degenerate = !(c0 > DEGENERATE_C0);
    let bins = sums
        .sums
        .iter()
        .zip(&sums.counts)
        .enumerate()
        .filter(|(_, (_, &n))| n > 0)
        .map(|(b, (&s, &n))| ProfileBin {
            bin: b,
            r: binning.distance(b),
            c_over_c0: if degenerate { 0.0 } else { s / n as f64 / c0 },
            pair_count: n,
            stderr: None,
        })
        .collect();
    let chi = (!degenerate).then(|| sums.windowed / sums.diag);
    let _ = window;
    (bins, c0, chi, degenerate)
}

/// Distance-binned profile `C(r)/C(0)` of a correlation matrix.
pub fn bin_profile(c: &CorrelationMatrix, binning: Binning) -> Result<CorrelationProfile> {
    if !c.is_symmetric(1e-9) {
        return Err(Error::InvalidParams("correlation matrix is not symmetric".into()));
    }
    binning.check_dim(c.dim)?;
    let sums = bin_sums(c, binning, None);
    let (bins, c0, _, degenerate) = profile_from_sums(&sums, c.dim, binning, None);
    Ok(CorrelationProfile {
        binning,
        bins,
        c0,
        chi: None,
        chi_stderr: None,
        window: None,
        n_data: 0,
        n_traj: 0,
        noise: f64::NAN,
        degenerate,
    })
}

/// `χ = Σ_{dist(i,j) ≤ r_max} C_ij / Σ_i C_ii`; `None` when the
/// autocorrelation sum vanishes.
pub fn susceptibility(c: &CorrelationMatrix, binning: Binning, window: Option<usize>) -> Result<Option<f64>> {
    if !c.is_symmetric(1e-9) {
        return Err(Error::InvalidParams("correlation matrix is not symmetric".into()));
    }
    binning.check_dim(c.dim)?;
    let sums = bin_sums(c, binning, window);
    Ok((sums.diag / c.dim as f64 > DEGENERATE_C0).then(|| sums.windowed / sums.diag))
}

/// Full ensemble analysis with jackknife errors over data.
///
/// Produces the same point estimates as `ensemble_correlations` followed by
/// `bin_profile` and `susceptibility`, but keeps per-datum bin sums so that
/// standard errors of the ratios can be estimated.
pub fn analyze_ensemble(
    groups: &[Vec<SpinSample>],
    binning: Binning,
    window: Option<usize>,
    noise: f64,
    par: Parallelism,
) -> Result<CorrelationProfile> {
    if groups.is_empty() {
        return Err(Error::InsufficientData("no data".into()));
    }
    let n_traj = groups[0].len();
    let per_datum: Vec<Result<(usize, BinSums)>> = map_indexed(groups.len(), par, |d| {
        let c = datum_covariance(&groups[d])?;
        binning.check_dim(c.dim)?;
        Ok((c.dim, bin_sums(&c, binning, window)))
    });
    let per_datum: Vec<(usize, BinSums)> = per_datum.into_iter().collect::<Result<_>>()?;
    let dim = per_datum[0].0;
    if let Some((bad, _)) = per_datum.iter().find(|(d, _)| *d != dim) {
        return Err(Error::LengthMismatch { expected: dim, got: *bad });
    }
    let sums: Vec<&BinSums> = per_datum.iter().map(|(_, s)| s).collect();
    let total = mean_sums(&sums, None);
    let (mut bins, c0, chi, degenerate) = profile_from_sums(&total, dim, binning, window);

    let n = sums.len();
    let mut chi_stderr = None;
    if n >= 2 && !degenerate {
        let loo: Vec<BinSums> = (0..n).map(|k| mean_sums(&sums, Some(k))).collect();
        for bin in bins.iter_mut() {
            let vals: Vec<f64> = loo
                .iter()
                .map(|s| s.sums[bin.bin] / s.counts[bin.bin] as f64 / (s.diag / dim as f64))
                .collect();
            bin.stderr = Some(jackknife_se(&vals));
        }
        let chis: Vec<f64> = loo.iter().map(|s| s.windowed / s.diag).collect();
        chi_stderr = Some(jackknife_se(&chis));
    }
    Ok(CorrelationProfile {
        binning,
        bins,
        c0,
        chi,
        chi_stderr,
        window,
        n_data: n,
        n_traj,
        noise,
        degenerate,
    })
}

fn mean_sums(all: &[&BinSums], skip: Option<usize>) -> BinSums {
    let nb = all[0].sums.len();
    let mut out = BinSums { sums: vec![0.0; nb], counts: all[0].counts.clone(), diag: 0.0, windowed: 0.0 };
    let mut n = 0.0;
    for (k, s) in all.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        out.sums.iter_mut().zip(&s.sums).for_each(|(a, b)| *a += b);
        out.diag += s.diag;
        out.windowed += s.windowed;
        n += 1.0;
    }
    out.sums.iter_mut().for_each(|x| *x /= n);
    out.diag /= n;
    out.windowed /= n;
    out
}

/// Jackknife standard error from leave-one-out estimates.
pub fn jackknife_se(loo: &[f64]) -> f64 {
    let n = loo.len() as f64;
    let mean = loo.iter().sum::<f64>() / n;
    ((n - 1.0) / n * loo.iter().map(|x| (x - mean).powi(2)).sum::<f64>()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseFit {
    /// Critical decay exponent from `C(r, ε*) ~ r^{-a}`.
    pub a: f64,
    /// Mean squared log-deviation of the rescaled curves.
    pub score: f64,
    /// Noise of the profile used for the critical fit.
    pub critical_noise: f64,
    /// Rescaled `(ln(r/ξ), ln(C ξ^a))` points per non-critical profile.
    pub curves: Vec<(f64, Vec<(f64, f64)>)>,
}

/// Minimum pair count for a bin to enter the collapse.
pub const COLLAPSE_MIN_PAIRS: usize = 30;

fn valid_points(p: &CorrelationProfile) -> Vec<(f64, f64)> {
    p.bins
        .iter()
        .filter(|b| b.r > 0 && b.pair_count >= COLLAPSE_MIN_PAIRS && b.c_over_c0 > 0.0)
        .map(|b| ((b.r as f64).ln(), b.c_over_c0.ln()))
        .collect()
}

/// Least-squares slope and intercept.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn interpolate(curve: &[(f64, f64)], x: f64) -> f64 {
    let k = curve.partition_point(|p| p.0 < x).clamp(1, curve.len() - 1);
    let (a, b) = (curve[k - 1], curve[k]);
    a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
}

/// Data collapse around the critical point of a [`PhaseDiagnosis`].
pub fn collapse_fit(profiles: &[CorrelationProfile], diagnosis: &PhaseDiagnosis) -> Result<CollapseFit> {
    let (eps_star, nu) = match (diagnosis.eps_star, diagnosis.nu) {
        (Some(e), Some(n)) => (e, n),
        _ => return Err(Error::InvalidParams("diagnosis has no transition".into())),
    };
    collapse_fit_at(profiles, eps_star, nu)
}

/// Fits `a` on the profile closest to `ε*`, rescales the others by
/// `ξ = |ε-ε*|^{-ν}` (`r → r/ξ`, `C → C ξ^a`) and scores their overlap.
pub fn collapse_fit_at(profiles: &[CorrelationProfile], eps_star: f64, nu: f64) -> Result<CollapseFit> {
    let below = profiles.iter().any(|p| p.noise < eps_star);
    let above = profiles.iter().any(|p| p.noise > eps_star);
    if !(below && above) {
        return Err(Error::NotBracketing(eps_star));
    }
    let critical = profiles
        .iter()
        .min_by(|a, b| (a.noise - eps_star).abs().total_cmp(&(b.noise - eps_star).abs()))
        .expect("non-empty");
    let (slope, _) = linear_fit(&valid_points(critical))
        .ok_or_else(|| Error::InsufficientData("fewer than two valid bins in the critical profile".into()))?;
    let a = -slope;

    let mut curves = Vec::new();
    for p in profiles {
        let gap = (p.noise - eps_star).abs();
        if gap < 1e-12 {
            continue;
        }
        let ln_xi = -nu * gap.ln();
        let pts: Vec<(f64, f64)> = valid_points(p).into_iter().map(|(lx, ly)| (lx - ln_xi, ly + a * ln_xi)).collect();
        if pts.len() >= 2 {
            curves.push((p.noise, pts));
        }
    }
    if curves.len() < 2 {
        return Err(Error::InsufficientData("need two non-critical profiles with valid bins".into()));
    }
    let lo = curves.iter().map(|(_, c)| c[0].0).fold(f64::MIN, f64::max);
    let hi = curves.iter().map(|(_, c)| c[c.len() - 1].0).fold(f64::MAX, f64::min);
    if !(hi > lo) {
        return Err(Error::InsufficientData("rescaled profiles do not overlap".into()));
    }
    const GRID: usize = 64;
    let mut score = 0.0;
    for g in 0..GRID {
        let x = lo + (hi - lo) * g as f64 / (GRID - 1) as f64;
        let ys: Vec<f64> = curves.iter().map(|(_, c)| interpolate(c, x)).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        score += ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    }
    score /= GRID as f64;
    Ok(CollapseFit { a, score, critical_noise: critical.noise, curves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn spins(v: &[f64]) -> SpinSample {
        SpinSample { values: v.to_vec(), mode: SpinMode::Discrete }
    }

    #[test]
    fn discrete_spins() {
        assert_eq!(make_spins(&[1, 2, 3], &[1, 2, 3]).unwrap().values, vec![-1.0; 3]);
        assert_eq!(make_spins(&[1, 2, 3], &[4, 5, 6]).unwrap().values, vec![1.0; 3]);
        assert!(make_spins(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn continuous_spins() {
        let x0 = vec![vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 0.0]];
        let mut xh = x0.clone();
        xh[1][0] += 0.6;
        xh[1][1] += 0.8;
        let s = make_spins_continuous(&x0, &xh).unwrap();
        assert_eq!(s.mode, SpinMode::Continuous);
        assert_abs_diff_eq!(s.values[0], 0.0);
        assert_abs_diff_eq!(s.values[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.values[2], 0.0);
        assert!(make_spins_continuous(&x0, &[vec![0.0], vec![0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn deterministic_dynamics_have_no_correlation() {
        let group = vec![spins(&[1.0, -1.0, 1.0]); 5];
        let c = ensemble_correlations(&[group.clone(), group], Parallelism::Sequential).unwrap();
        assert!(c.values.iter().all(|&x| x == 0.0));
        let p = bin_profile(&c, Binning::Index).unwrap();
        assert!(p.degenerate);
        assert_eq!(susceptibility(&c, Binning::Index, None).unwrap(), None);
    }

    #[test]
    fn insufficient_trajectories() {
        assert!(matches!(
            ensemble_correlations(&[vec![spins(&[1.0])]], Parallelism::Sequential),
            Err(Error::InsufficientTrajectories { needed: 2, got: 1 })
        ));
    }

    fn coin_flip_groups(dim: usize, n_data: usize, n_traj: usize, block: usize, seed: u64) -> Vec<Vec<SpinSample>> {
        let mut rng = seeded(seed);
        (0..n_data)
            .map(|_| {
                (0..n_traj)
                    .map(|_| {
                        let flips: Vec<f64> =
                            (0..dim.div_ceil(block)).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                        spins(&(0..dim).map(|i| flips[i / block]).collect::<Vec<_>>())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn independent_coin_flips() {
        let (n_data, n_traj) = (40, 100);
        let c = ensemble_correlations(&coin_flip_groups(16, n_data, n_traj, 1, 3), Parallelism::Rayon).unwrap();
        // Var of a product of independent ±1 coins is 1; average of n_data*(n_traj-1)-ish terms.
        let se = 1.0 / ((n_data * (n_traj - 1)) as f64).sqrt();
        for i in 0..16 {
            assert!((c.get(i, i) - 1.0).abs() < 4.0 * se * 2f64.sqrt());
            for j in 0..i {
                assert!(c.get(i, j).abs() < 3.0 * se * 1.2, "{i},{j}: {}", c.get(i, j));
            }
        }
    }

    #[test]
    fn planted_blocks() {
        let c = ensemble_correlations(&coin_flip_groups(32, 40, 100, 4, 9), Parallelism::Rayon).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                if i / 4 == j / 4 {
                    assert_abs_diff_eq!(c.get(i, j), c.get(i, i), epsilon = 1e-12);
                } else {
                    assert!(c.get(i, j).abs() < 0.06);
                }
            }
        }
    }

    #[test]
    fn trivial_matrices() {
        let id = CorrelationMatrix::from_fn(8, |i, j| (i == j) as u8 as f64);
        let p = bin_profile(&id, Binning::Tree { s: 2, depth: 3 }).unwrap();
        assert_eq!(p.c0, 1.0);
        assert_eq!(p.bins[0].c_over_c0, 1.0);
        assert!(p.bins[1..].iter().all(|b| b.c_over_c0 == 0.0));
        assert_eq!(susceptibility(&id, Binning::Index, None).unwrap(), Some(1.0));

        let ones = CorrelationMatrix::from_fn(8, |_, _| 1.0);
        let p = bin_profile(&ones, Binning::Index).unwrap();
        assert!(p.bins.iter().all(|b| b.c_over_c0 == 1.0));
        assert_eq!(susceptibility(&ones, Binning::Index, None).unwrap(), Some(8.0));
        assert_eq!(susceptibility(&ones, Binning::Index, Some(2)).unwrap(), Some((8.0 + 14.0 + 12.0) / 8.0));
    }

    #[test]
    fn tree_pair_counts() {
        let id = CorrelationMatrix::from_fn(8, |i, j| (i == j) as u8 as f64);
        let p = bin_profile(&id, Binning::Tree { s: 2, depth: 3 }).unwrap();
        let per_leaf: Vec<usize> = p.bins.iter().map(|b| b.pair_count / 8).collect();
        assert_eq!(per_leaf, vec![1, 1, 2, 4]);
        let rs: Vec<usize> = p.bins.iter().map(|b| b.r).collect();
        assert_eq!(rs, vec![0, 1, 3, 7]);
    }

    #[test]
    fn binning_dimension_checked() {
        let id = CorrelationMatrix::from_fn(6, |i, j| (i == j) as u8 as f64);
        assert!(bin_profile(&id, Binning::Tree { s: 2, depth: 3 }).is_err());
        let asym = CorrelationMatrix::from_fn(3, |i, j| i as f64 - j as f64);
        assert!(bin_profile(&asym, Binning::Index).is_err());
    }

    #[test]
    fn analysis_matches_matrix_route() {
        let groups = coin_flip_groups(16, 12, 30, 2, 4);
        let c = ensemble_correlations(&groups, Parallelism::Sequential).unwrap();
        let b = Binning::Tree { s: 2, depth: 4 };
        let direct = bin_profile(&c, b).unwrap();
        let chi = susceptibility(&c, b, None).unwrap().unwrap();
        let full = analyze_ensemble(&groups, b, None, 0.5, Parallelism::Rayon).unwrap();
        for (x, y) in direct.bins.iter().zip(&full.bins) {
            assert_abs_diff_eq!(x.c_over_c0, y.c_over_c0, epsilon = 1e-12);
            assert!(y.stderr.is_some());
        }
        assert_abs_diff_eq!(full.chi.unwrap(), chi, epsilon = 1e-12);
        assert!(full.chi_stderr.unwrap() > 0.0);
    }

    #[test]
    fn jackknife_of_mean_is_standard_error() {
        let xs = [1.0, 2.0, 4.0, 7.0, 11.0];
        let n = xs.len() as f64;
        let loo: Vec<f64> = (0..xs.len())
            .map(|k| xs.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, x)| x).sum::<f64>() / (n - 1.0))
            .collect();
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_abs_diff_eq!(jackknife_se(&loo), sd / n.sqrt(), epsilon = 1e-12);
    }

    fn synthetic_profile(noise: f64, eps_star: f64, nu: f64, a: f64) -> CorrelationProfile {
        let xi = (noise - eps_star).abs().powf(-nu);
        let bins = (0..10)
            .map(|l| {
                let r = (1usize << l) - 1;
                let c = if r == 0 { 1.0 } else { (r as f64).powf(-a) * (-(r as f64) / xi).exp() };
                ProfileBin { bin: l, r, c_over_c0: c, pair_count: 1000, stderr: None }
            })
            .collect();
        CorrelationProfile {
            binning: Binning::Tree { s: 2, depth: 9 },
            bins,
            c0: 1.0,
            chi: None,
            chi_stderr: None,
            window: None,
            n_data: 1,
            n_traj: 1,
            noise,
            degenerate: false,
        }
    }

    #[test]
    fn planted_scaling_collapses() {
        let (eps_star, nu, a) = (0.73, 1.9, 1.0);
        let profiles: Vec<_> =
            [0.6, 0.68, 0.73, 0.78, 0.85].iter().map(|&e| synthetic_profile(e, eps_star, nu, a)).collect();
        let fit = collapse_fit_at(&profiles, eps_star, nu).unwrap();
        assert!((fit.a - a).abs() < 0.02 * a, "{}", fit.a);
        // Residual comes from linear interpolation between log-spaced bins.
        assert!(fit.score < 1e-3, "{}", fit.score);
        let bad = collapse_fit_at(&profiles, eps_star, 0.5).unwrap();
        assert!(bad.score > 20.0 * fit.score, "{} vs {}", bad.score, fit.score);
    }

    #[test]
    fn collapse_needs_bracketing() {
        let profiles: Vec<_> = (0..3).map(|_| synthetic_profile(0.5, 0.73, 1.9, 1.0)).collect();
        assert!(matches!(collapse_fit_at(&profiles, 0.73, 1.9), Err(Error::NotBracketing(_))));
    }
}
