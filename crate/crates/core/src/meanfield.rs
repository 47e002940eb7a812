//! Mean-field theory of the ε-process.
//!
//! Averaging BP messages over the random rules gives scalar recursions for
//! the belief in the original symbol, upward `p_{ℓ+1} = F(p_ℓ)` and downward
//! `q_{ℓ-1} = G(q_ℓ, p_{ℓ-1})`. The non-trivial repulsive fixed point of `F`
//! locates the class transition and its slope fixes the correlation-length
//! exponent. Leaf-pair statistics at tree distance `ℓ̃` come from the 2×2
//! product `P = T C Tᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rule statistics of a grammar family, independent of the depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanField {
    pub v: usize,
    pub m: usize,
    pub s: usize,
}

impl MeanField {
    pub fn new(v: usize, m: usize, s: usize) -> Result<Self> {
        if v < 2 || s < 2 || m < 1 {
            return Err(Error::InvalidParams(format!("need v >= 2, s >= 2, m >= 1 (got {v}, {m}, {s})")));
        }
        let space = (v as f64).powi(s as i32);
        if (m * v) as f64 > space {
            return Err(Error::InvalidParams(format!("m*v = {} exceeds v^s = {space}", m * v)));
        }
        Ok(MeanField { v, m, s })
    }

    /// `f = (mv-1)/(v^s-1)`.
    pub fn f(&self) -> f64 {
        (self.mv() - 1.0) / ((self.v as f64).powi(self.s as i32) - 1.0)
    }

    fn mv(&self) -> f64 {
        (self.m * self.v) as f64
    }

    /// Upward map.
    pub fn upward(&self, p: f64) -> f64 {
        let f = self.f();
        let c = (self.m as f64 - 1.0) / (self.mv() - 1.0);
        let ps = p.powi(self.s as i32);
        (ps + f * c * (1.0 - ps)) / (ps + f * (1.0 - ps))
    }

    /// Analytic derivative of [`MeanField::upward`].
    pub fn upward_slope(&self, p: f64) -> f64 {
        let f = self.f();
        let c = (self.m as f64 - 1.0) / (self.mv() - 1.0);
        let s = self.s as f64;
        let ps = p.powi(self.s as i32);
        let dps = s * p.powi(self.s as i32 - 1);
        let num = ps + f * c * (1.0 - ps);
        let den = ps + f * (1.0 - ps);
        let dnum = dps * (1.0 - f * c);
        let dden = dps * (1.0 - f);
        (dnum * den - num * dden) / (den * den)
    }

    /// Downward map `G(q, p)`, with `p` the upward belief of the child level.
    pub fn downward(&self, q: f64, p: f64) -> f64 {
        let f = self.f();
        let w = f * (self.m as f64 - q) / (self.mv() - 1.0);
        let ps1 = p.powi(self.s as i32 - 1);
        let num = q * ps1 + w * (1.0 - ps1);
        num / (num + (self.v as f64 - 1.0) * w)
    }

    /// Average marginal of reconstructing a node from its two messages.
    pub fn marginal(&self, p: f64, q: f64) -> f64 {
        let a = p * q;
        let b = (1.0 - p) * (1.0 - q) / (self.v as f64 - 1.0);
        if a + b > 0.0 {
            a / (a + b)
        } else {
            // Contradictory evidence (certain upward, excluded downward); the
            // callers only hit this where the result carries zero weight.
            0.0
        }
    }

    /// `s·m·(v-1)/(v^s-1)`; a transition exists when it is below 1.
    pub fn condition_value(&self) -> f64 {
        let s = self.s as f64;
        s * self.m as f64 * (self.v as f64 - 1.0) / ((self.v as f64).powi(self.s as i32) - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapState {
    /// `p[ℓ]`, `ℓ = 0..=L`.
    pub p: Vec<f64>,
    /// `q[ℓ]`, `ℓ = 0..=L`.
    pub q: Vec<f64>,
    pub f: f64,
}

impl MapState {
    pub fn depth(&self) -> usize {
        self.p.len() - 1
    }
}

/// Runs the upward map from `p_0 = 1-ε+ε/v` and the downward map from
/// `q_L = 1/v`. With `q_override = Some((ℓ̂, c))` the downward recursion is
/// restarted at level `ℓ̂` from `q_ℓ̂ = c`.
pub fn iterate_maps(mf: &MeanField, depth: usize, epsilon: f64, q_override: Option<(usize, f64)>) -> Result<MapState> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidParams(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if depth < 1 {
        return Err(Error::InvalidParams("depth must be at least 1".into()));
    }
    if let Some((level, c)) = q_override {
        if level > depth || !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidParams(format!("override ({level}, {c}) invalid for depth {depth}")));
        }
    }
    let v = mf.v as f64;
    let mut p = vec![0.0; depth + 1];
    p[0] = 1.0 - epsilon + epsilon / v;
    for l in 1..=depth {
        p[l] = mf.upward(p[l - 1]);
    }
    let mut q = vec![0.0; depth + 1];
    q[depth] = 1.0 / v;
    for l in (1..=depth).rev() {
        if let Some((level, c)) = q_override {
            if level == l {
                q[l] = c;
            }
        }
        q[l - 1] = mf.downward(q[l], p[l - 1]);
    }
    if let Some((0, c)) = q_override {
        q[0] = c;
    }
    Ok(MapState { p, q, f: mf.f() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagnosis {
    pub v: usize,
    pub m: usize,
    pub s: usize,
    pub condition_value: f64,
    pub transition_exists: bool,
    pub p_star: Option<f64>,
    pub eps_star: Option<f64>,
    pub f_prime_star: Option<f64>,
    /// Central finite-difference slope at `p*`, as a cross-check.
    pub f_prime_star_fd: Option<f64>,
    pub nu: Option<f64>,
}

/// Bracket margin around the trivial fixed points.
pub const BISECTION_MARGIN: f64 = 1e-9;

/// Bisection for `g(lo) < 0 < g(hi)`.
pub fn bisect<G: Fn(f64) -> f64>(g: G, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (glo, ghi) = (g(lo), g(hi));
    if !(glo < 0.0 && ghi > 0.0) {
        return Err(Error::Bisection(format!("no sign change: g({lo}) = {glo}, g({hi}) = {ghi}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm == 0.0 {
            return Ok(mid);
        }
        if gm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= tol * 1e-3 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Locates the class transition: `p*`, `ε* = (1-p*)/(1-1/v)`, `F'(p*)` and
/// `ν = ln s / ln F'(p*)`.
pub fn phase_diagnosis(mf: &MeanField, tol: f64) -> Result<PhaseDiagnosis> {
    let condition_value = mf.condition_value();
    let mut out = PhaseDiagnosis {
        v: mf.v,
        m: mf.m,
        s: mf.s,
        condition_value,
        transition_exists: condition_value < 1.0,
        p_star: None,
        eps_star: None,
        f_prime_star: None,
        f_prime_star_fd: None,
        nu: None,
    };
    if !out.transition_exists {
        return Ok(out);
    }
    let v = mf.v as f64;
    let p_star = bisect(|p| mf.upward(p) - p, 1.0 / v + BISECTION_MARGIN, 1.0 - BISECTION_MARGIN, tol)?;
    let slope = mf.upward_slope(p_star);
    let h = 1e-6;
    let fd = (mf.upward(p_star + h) - mf.upward(p_star - h)) / (2.0 * h);
    if ((slope - fd) / slope).abs() > 1e-6 {
        return Err(Error::Bisection(format!("analytic slope {slope} disagrees with finite difference {fd}")));
    }
    if slope <= 1.0 {
        return Err(Error::Bisection(format!("fixed point {p_star} is not repulsive (slope {slope})")));
    }
    out.p_star = Some(p_star);
    out.eps_star = Some((1.0 - p_star) / (1.0 - 1.0 / v));
    out.f_prime_star = Some(slope);
    out.f_prime_star_fd = Some(fd);
    out.nu = Some((mf.s as f64).ln() / slope.ln());
    Ok(out)
}

/// 2×2 reconstruct/not-reconstruct matrices for a leaf pair at tree distance `ℓ̃`.
/// Index 0 is "reconstructed", index 1 "changed".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfJoint {
    pub tree_distance: usize,
    /// `t[a][b]`: leaf state `a` given state `b` of the level-`ℓ̃-1` ancestor.
    pub t: [[f64; 2]; 2],
    /// Joint state of the two level-`ℓ̃-1` ancestors.
    pub c: [[f64; 2]; 2],
    /// Joint state of the two leaves, `T C Tᵀ`.
    pub p: [[f64; 2]; 2],
}

impl MfJoint {
    /// Covariance of the ±1 change spins (`+1` = changed).
    pub fn spin_covariance(&self) -> f64 {
        let p = &self.p;
        let same = p[0][0] + p[1][1] - p[0][1] - p[1][0];
        let mean_i = (p[1][0] + p[1][1]) - (p[0][0] + p[0][1]);
        let mean_j = (p[0][1] + p[1][1]) - (p[0][0] + p[1][0]);
        same - mean_i * mean_j
    }
}

fn mat_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn transpose(a: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Leaf-pair joint statistics at tree distance `ℓ̃ ∈ 1..=L`.
pub fn mf_pair_joint(mf: &MeanField, depth: usize, epsilon: f64, tree_distance: usize) -> Result<MfJoint> {
    let ell = tree_distance;
    if ell < 1 || ell > depth {
        return Err(Error::InvalidParams(format!("tree distance {ell} outside 1..={depth}")));
    }
    let state = iterate_maps(mf, depth, epsilon, None)?;
    let f = state.f;
    let mv1 = (mf.m * mf.v) as f64 - 1.0;
    let m = mf.m as f64;

    // Ancestor marginal at the common ancestor level.
    let parent = mf.marginal(state.p[ell], state.q[ell]);

    // Joint of the two children given the parent kept / changed.
    let p = state.p[ell - 1];
    let same_w = f * (m - 1.0) / mv1;
    let diff_w = f * m / mv1;
    let z_same = p * p + same_w * (1.0 - p * p);
    let z_diff = diff_w * (1.0 - p * p);
    let mut c = [[0.0; 2]; 2];
    let keep = [p * p, same_w * p * (1.0 - p), same_w * (1.0 - p) * (1.0 - p)];
    let change = [0.0, diff_w * p * (1.0 - p), diff_w * (1.0 - p) * (1.0 - p)];
    for (k, slot) in [(0usize, 0usize), (0, 1), (1, 1)].into_iter().enumerate() {
        let mut val = 0.0;
        if parent > 0.0 {
            val += parent * keep[k] / z_same;
        }
        if parent < 1.0 && z_diff > 0.0 {
            val += (1.0 - parent) * change[k] / z_diff;
        }
        c[slot.0][slot.1] = val;
    }
    c[1][0] = c[0][1];

    // Leaf given level-(ℓ̃-1) ancestor kept / changed.
    let leaf_given = |anchor: f64| -> Result<f64> {
        let s = iterate_maps(mf, depth, epsilon, Some((ell - 1, anchor)))?;
        Ok(mf.marginal(s.p[0], s.q[0]))
    };
    let t11 = leaf_given(1.0)?;
    let t12 = leaf_given(0.0)?;
    let t = [[t11, t12], [1.0 - t11, 1.0 - t12]];
    let joint = mat_mul(&mat_mul(&t, &c), &transpose(&t));
    Ok(MfJoint { tree_distance: ell, t, c, p: joint })
}

/// Mean-field correlation profile at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfProfile {
    pub epsilon: f64,
    /// Spin autocorrelation `1 - ⟨σ⟩²` of a single leaf.
    pub c0: f64,
    /// `C(ℓ̃)/C(0)` for `ℓ̃ = 0..=L`.
    pub normalized: Vec<f64>,
    /// `1 + Σ_ℓ̃ (s-1) s^{ℓ̃-1} C(ℓ̃)/C(0)`.
    pub chi: f64,
}

pub fn mf_profile(mf: &MeanField, depth: usize, epsilon: f64) -> Result<MfProfile> {
    let state = iterate_maps(mf, depth, epsilon, None)?;
    let leaf = mf.marginal(state.p[0], state.q[0]);
    let mean = 1.0 - 2.0 * leaf;
    let c0 = 1.0 - mean * mean;
    let mut normalized = vec![0.0; depth + 1];
    let mut chi = 1.0;
    let s = mf.s as f64;
    if c0 > 1e-300 {
        normalized[0] = 1.0;
        for (ell, slot) in normalized.iter_mut().enumerate().skip(1) {
            let cov = mf_pair_joint(mf, depth, epsilon, ell)?.spin_covariance();
            *slot = cov / c0;
            chi += (s - 1.0) * s.powi(ell as i32 - 1) * *slot;
        }
    }
    Ok(MfProfile { epsilon, c0, normalized, chi })
}

/// Theory profiles over an ε grid.
pub fn mf_profiles(mf: &MeanField, depth: usize, grid: &[f64]) -> Result<Vec<MfProfile>> {
    grid.iter().map(|&e| mf_profile(mf, depth, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rhm() -> MeanField {
        MeanField::new(32, 8, 2).unwrap()
    }

    #[test]
    fn trivial_fixed_points() {
        let mf = rhm();
        assert_abs_diff_eq!(mf.upward(1.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mf.upward(1.0 / 32.0), 1.0 / 32.0, epsilon = 1e-15);
    }

    #[test]
    fn maps_at_noise_endpoints() {
        let mf = rhm();
        let s = iterate_maps(&mf, 9, 0.0, None).unwrap();
        assert!(s.p.iter().all(|&p| (p - 1.0).abs() < 1e-15));
        let s = iterate_maps(&mf, 9, 1.0, None).unwrap();
        assert!(s.p.iter().all(|&p| (p - 1.0 / 32.0).abs() < 1e-12));
        assert_abs_diff_eq!(s.q[9], 1.0 / 32.0);
        // Without upward information the marginal is the downward belief.
        for l in 0..=9 {
            assert_abs_diff_eq!(mf.marginal(s.p[l], s.q[l]), s.q[l], epsilon = 1e-12);
        }
    }

    #[test]
    fn deep_limit_on_both_sides() {
        let mf = rhm();
        let below = iterate_maps(&mf, 50, 0.6, None).unwrap();
        assert!((below.p[50] - 1.0).abs() < 1e-6, "{}", below.p[50]);
        let above = iterate_maps(&mf, 50, 0.9, None).unwrap();
        assert!((above.p[50] - 1.0 / 32.0).abs() < 1e-6, "{}", above.p[50]);
    }

    #[test]
    fn condition_arithmetic() {
        let mf = rhm();
        assert_abs_diff_eq!(mf.condition_value(), 2.0 * 8.0 * 31.0 / 1023.0, epsilon = 1e-15);
        let d = phase_diagnosis(&mf, 1e-12).unwrap();
        assert!(d.transition_exists);
        let p = d.p_star.unwrap();
        assert!((mf.upward(p) - p).abs() < 1e-12);
        assert!(d.f_prime_star.unwrap() > 1.0);
        assert_abs_diff_eq!(d.eps_star.unwrap(), (1.0 - p) / (1.0 - 1.0 / 32.0), epsilon = 1e-15);
    }

    #[test]
    fn no_transition_when_condition_fails() {
        // v=4, m=4, s=2: 2*4*3/15 = 1.6
        let d = phase_diagnosis(&MeanField::new(4, 4, 2).unwrap(), 1e-12).unwrap();
        assert!(!d.transition_exists);
        assert!(d.p_star.is_none() && d.nu.is_none());
    }

    #[test]
    fn bisection_requires_bracket() {
        assert!(bisect(|x| x * x + 1.0, 0.0, 1.0, 1e-12).is_err());
        let r = bisect(|x| x - 0.3, 0.0, 1.0, 1e-14).unwrap();
        assert_abs_diff_eq!(r, 0.3, epsilon = 1e-14);
    }

    #[test]
    fn joint_matrices_are_sane() {
        let mf = rhm();
        for &eps in &[0.1, 0.5, 0.73, 0.9] {
            for ell in 1..=7 {
                let j = mf_pair_joint(&mf, 7, eps, ell).unwrap();
                let total: f64 = j.p.iter().flatten().sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
                assert_abs_diff_eq!(j.p[0][1], j.p[1][0], epsilon = 1e-12);
                for m in [&j.t, &j.c, &j.p] {
                    assert!(m.iter().flatten().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
                }
            }
        }
    }

    #[test]
    fn noiseless_pair_is_always_reconstructed() {
        let j = mf_pair_joint(&rhm(), 9, 0.0, 3).unwrap();
        assert_abs_diff_eq!(j.p[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j.spin_covariance(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_noise_siblings_follow_parents() {
        let j = mf_pair_joint(&rhm(), 9, 1.0, 1).unwrap();
        assert_abs_diff_eq!(j.t[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j.t[0][1], 0.0, epsilon = 1e-12);
        for a in 0..2 {
            for b in 0..2 {
                assert_abs_diff_eq!(j.p[a][b], j.c[a][b], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn chi_tends_to_one_without_noise() {
        let p = mf_profile(&rhm(), 9, 1e-6).unwrap();
        assert!((p.chi - 1.0).abs() < 1e-3, "{}", p.chi);
        let p = mf_profile(&rhm(), 9, 0.0).unwrap();
        assert_eq!(p.chi, 1.0);
    }

    #[test]
    fn normalized_profile_bounded() {
        let mf = rhm();
        for k in 1..20 {
            let p = mf_profile(&mf, 9, k as f64 / 20.0).unwrap();
            assert!(p.normalized.iter().all(|c| c.abs() <= 1.0 + 1e-9), "{p:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn slope_matches_finite_difference(p in 0.05f64..0.99) {
            let mf = rhm();
            let h = 1e-6;
            let fd = (mf.upward(p + h) - mf.upward(p - h)) / (2.0 * h);
            let an = mf.upward_slope(p);
            proptest::prop_assert!(((an - fd) / an).abs() < 1e-6);
        }
    }
}
