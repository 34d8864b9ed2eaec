//! Rerandomization: Mahalanobis balance, acceptance thresholds and
//! rejection sampling of complete randomizations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::numerics::linalg::{cholesky_with_ridge, column_means, invert_lower, sample_covariance};
use crate::numerics::{chi2_inv, Rng};

/// Draws without acceptance before ReM gives up.
pub const MAX_DRAWS: usize = 1_000_000;

/// A treatment assignment with exact group sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub indicator: Vec<u8>,
    pub m1: usize,
    pub m0: usize,
}

impl Assignment {
    pub fn new(indicator: Vec<u8>) -> Result<Self> {
        if indicator.iter().any(|&v| v > 1) {
            return domain_err("assignment entries must be 0 or 1");
        }
        let m1 = indicator.iter().filter(|&&v| v == 1).count();
        let m0 = indicator.len() - m1;
        Ok(Self { indicator, m1, m0 })
    }

    pub fn m(&self) -> usize {
        self.indicator.len()
    }

    /// A complete randomization: a shuffle of `m1` ones and `m − m1` zeros.
    pub fn complete_randomization(m: usize, m1: usize, rng: &mut Rng) -> Result<Self> {
        if m1 > m {
            return domain_err(format!("cannot treat {m1} of {m} units"));
        }
        let mut indicator: Vec<u8> = (0..m).map(|i| u8::from(i < m1)).collect();
        rng.shuffle(&mut indicator);
        Ok(Self { indicator, m1, m0: m - m1 })
    }

    fn check_groups(&self) -> Result<()> {
        if self.m1 < 2 || self.m0 < 2 {
            return Err(Error::DegenerateGroups { m1: self.m1, m0: self.m0 });
        }
        Ok(())
    }
}

/// Covariate balance of an assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStat {
    /// Mahalanobis distance `M`.
    pub m_dist: f64,
    /// Treated-minus-control covariate means `τ̂_X`.
    pub tau_x: Array1<f64>,
    pub threshold: f64,
    pub accepted: bool,
}

fn group_mean_difference(z: ArrayView2<f64>, a: &Assignment) -> Array1<f64> {
    let q = z.ncols();
    let mut t = Array1::zeros(q);
    let mut c = Array1::zeros(q);
    for (row, &ind) in z.rows().into_iter().zip(&a.indicator) {
        if ind == 1 {
            t += &row;
        } else {
            c += &row;
        }
    }
    t / a.m1 as f64 - c / a.m0 as f64
}

/// `M = (√m τ̂_X)ᵀ V_xx⁻¹ (√m τ̂_X)` with `V_xx = S_X² / (r1 r0)`.
/// Returns `(M, τ̂_X)`.
pub fn mahalanobis(z: ArrayView2<f64>, assignment: &Assignment) -> Result<(f64, Array1<f64>)> {
    let (m, q) = z.dim();
    if m != assignment.m() {
        return shape_err(format!("{m} covariate rows but an assignment of {} units", assignment.m()));
    }
    if q == 0 {
        return shape_err("need at least one covariate");
    }
    assignment.check_groups()?;
    let s = sample_covariance(z)?;
    let (l, _) = cholesky_with_ridge(s.view())?;
    let tau = group_mean_difference(z, assignment);
    let w = invert_lower(l.view())?.dot(&tau);
    let (r1, r0) = (assignment.m1 as f64 / m as f64, assignment.m0 as f64 / m as f64);
    Ok((m as f64 * r1 * r0 * w.dot(&w), tau))
}

/// How the acceptance threshold `a` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum ThresholdMode {
    /// `a = F⁻¹_{χ²_q}(p_a)`, the asymptotic law of `M`.
    ChiSquare,
    /// Empirical `p_a`-quantile of `M` over `draws` complete randomizations.
    MonteCarlo { draws: usize },
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::ChiSquare
    }
}

/// Precomputed whitening of a fixed covariate matrix, so each candidate
/// assignment costs one pass over the treated rows.
#[derive(Debug, Clone)]
pub struct RemSampler {
    white: Array2<f64>,
    total: Array1<f64>,
    m1: usize,
    m0: usize,
    /// Ridge added to a singular covariance, 0 when none was needed.
    pub ridge: f64,
}

impl RemSampler {
    pub fn new(z: ArrayView2<f64>, m1: usize) -> Result<Self> {
        let (m, q) = z.dim();
        if m < 4 {
            return Err(Error::DegenerateGroups { m1, m0: m.saturating_sub(m1) });
        }
        if q == 0 {
            return shape_err("need at least one covariate");
        }
        if m1 < 2 || m - m1 < 2 {
            return Err(Error::DegenerateGroups { m1, m0: m.saturating_sub(m1) });
        }
        let s = sample_covariance(z)?;
        let (l, ridge) = cholesky_with_ridge(s.view())?;
        if ridge > 0.0 {
            log::warn!("covariate covariance is singular (q = {q}, m = {m}); added ridge {ridge:.3e}");
        }
        let centered = &z - &column_means(z)?;
        let white = centered.dot(&invert_lower(l.view())?.t()).as_standard_layout().into_owned();
        let total = white.sum_axis(Axis(0));
        Ok(Self { white, total, m1, m0: m - m1, ridge })
    }

    pub fn m(&self) -> usize {
        self.white.nrows()
    }

    pub fn q(&self) -> usize {
        self.white.ncols()
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    /// Mahalanobis distance of the assignment treating `treated`.
    fn distance_of(&self, treated: &[usize]) -> f64 {
        let q = self.q();
        let white = self.white.as_slice().expect("whitened covariates are stored in standard layout");
        let mut t = vec![0.0; q];
        for &i in treated {
            for (acc, v) in t.iter_mut().zip(&white[i * q..(i + 1) * q]) {
                *acc += v;
            }
        }
        let (m1, m0) = (self.m1 as f64, self.m0 as f64);
        let m = m1 + m0;
        let mut ss = 0.0;
        for (j, tj) in t.iter().enumerate() {
            let diff = tj / m1 - (self.total[j] - tj) / m0;
            ss += diff * diff;
        }
        m * (m1 / m) * (m0 / m) * ss
    }

    pub fn distance(&self, a: &Assignment) -> Result<f64> {
        if a.m() != self.m() || a.m1 != self.m1 {
            return shape_err("assignment does not match the sampler");
        }
        let treated: Vec<usize> = (0..a.m()).filter(|&i| a.indicator[i] == 1).collect();
        Ok(self.distance_of(&treated))
    }

    /// Draws one complete randomization; returns its treated set.
    fn draw_treated(&self, order: &mut [usize], rng: &mut Rng) -> Vec<usize> {
        // Partial Fisher-Yates over the first m1 positions.
        let m = order.len();
        for i in 0..self.m1 {
            let j = i + rng.index(m - i);
            order.swap(i, j);
        }
        order[..self.m1].to_vec()
    }

    /// Acceptance threshold for probability `p_a`.
    pub fn threshold(&self, p_a: f64, mode: ThresholdMode, rng: &mut Rng) -> Result<f64> {
        check_accept_prob(p_a)?;
        if p_a == 1.0 {
            return Ok(f64::INFINITY);
        }
        match mode {
            ThresholdMode::ChiSquare => chi2_inv(p_a, self.q() as u32),
            ThresholdMode::MonteCarlo { draws } => {
                if draws == 0 {
                    return Err(Error::Config("Monte Carlo threshold needs at least one draw".into()));
                }
                let mut order: Vec<usize> = (0..self.m()).collect();
                let mut dists: Vec<f64> = (0..draws)
                    .map(|_| {
                        let t = self.draw_treated(&mut order, rng);
                        self.distance_of(&t)
                    })
                    .collect();
                dists.sort_by(f64::total_cmp);
                let k = ((p_a * draws as f64).ceil() as usize).clamp(1, draws) - 1;
                Ok(dists[k])
            }
        }
    }

    /// Draws complete randomizations until one has `M ≤ threshold`. The
    /// callback sees every candidate (accepted or not) with its treated set.
    pub fn sample_with(
        &self,
        threshold: f64,
        rng: &mut Rng,
        mut on_candidate: impl FnMut(&[usize]),
    ) -> Result<(Vec<usize>, f64, usize)> {
        let mut order: Vec<usize> = (0..self.m()).collect();
        for draw in 1..=MAX_DRAWS {
            let treated = self.draw_treated(&mut order, rng);
            on_candidate(&treated);
            let dist = self.distance_of(&treated);
            if dist <= threshold {
                return Ok((treated, dist, draw));
            }
        }
        Err(Error::ThresholdTooTight { draws: MAX_DRAWS, threshold })
    }

    pub fn sample(&self, threshold: f64, rng: &mut Rng) -> Result<(Assignment, BalanceStat, usize)> {
        let (treated, dist, draws) = self.sample_with(threshold, rng, |_| {})?;
        let mut indicator = vec![0u8; self.m()];
        treated.iter().for_each(|&i| indicator[i] = 1);
        let assignment = Assignment { indicator, m1: self.m1, m0: self.m0 };
        Ok((assignment, BalanceStat { m_dist: dist, tau_x: Array1::zeros(0), threshold, accepted: true }, draws))
    }
}

fn check_accept_prob(p_a: f64) -> Result<()> {
    if !(p_a > 0.0 && p_a <= 1.0) {
        return domain_err(format!("acceptance probability must lie in (0, 1], got {p_a}"));
    }
    Ok(())
}

/// Acceptance threshold `a` for covariates `z` and `m1` treated units.
pub fn threshold(z: ArrayView2<f64>, m1: usize, p_a: f64, mode: ThresholdMode, rng: &mut Rng) -> Result<f64> {
    check_accept_prob(p_a)?;
    if p_a == 1.0 {
        return Ok(f64::INFINITY);
    }
    if mode == ThresholdMode::ChiSquare {
        return chi2_inv(p_a, z.ncols() as u32);
    }
    RemSampler::new(z, m1)?.threshold(p_a, mode, rng)
}

/// One rerandomized assignment: complete randomizations are drawn until
/// the Mahalanobis distance is at most the threshold.
pub fn rem_sample(
    z: ArrayView2<f64>,
    m1: usize,
    p_a: f64,
    rng: &mut Rng,
    mode: ThresholdMode,
) -> Result<(Assignment, BalanceStat)> {
    let sampler = RemSampler::new(z, m1)?;
    let a = sampler.threshold(p_a, mode, rng)?;
    let (assignment, mut stat, _) = sampler.sample(a, rng)?;
    stat.tau_x = group_mean_difference(z, &assignment);
    Ok((assignment, stat))
}

/// Treated mean minus control mean of `y`.
pub fn diff_in_means(assignment: &Assignment, y: ArrayView1<f64>) -> Result<f64> {
    if y.len() != assignment.m() {
        return shape_err(format!("{} outcomes for an assignment of {} units", y.len(), assignment.m()));
    }
    if assignment.m1 == 0 || assignment.m0 == 0 {
        return Err(Error::DegenerateGroups { m1: assignment.m1, m0: assignment.m0 });
    }
    let (mut t, mut c) = (0.0, 0.0);
    for (&ind, &v) in assignment.indicator.iter().zip(y) {
        if ind == 1 {
            t += v;
        } else {
            c += v;
        }
    }
    Ok(t / assignment.m1 as f64 - c / assignment.m0 as f64)
}
