//! Variance-preserving noise schedule and the closed-form stride algebra used
//! by coarse denoising.
//!
//! All arrays are precomputed once in double precision. Transition and
//! posterior parameters are derived from the stored arrays, never from the
//! schedule formula, so the composition identities hold to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum ratio between consecutive raw `alpha^2` values.
const CLIP_RATIO: f64 = 0.001;

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 500;
/// Default precision (floor on `alpha^2` and `sigma^2`).
pub const DEFAULT_PRECISION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    precision: f64,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    alpha2: Vec<f64>,
    sigma2: Vec<f64>,
    snr: Vec<f64>,
}

/// Parameters of `q(z_t | z_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    pub s: usize,
    pub t: usize,
    pub alpha_ts: f64,
    pub sigma2_ts: f64,
}

impl TransitionParams {
    /// The identity transition `s == t`.
    pub fn identity(t: usize) -> Self {
        Self { s: t, t, alpha_ts: 1.0, sigma2_ts: 0.0 }
    }
}

/// Parameters of the true denoising posterior `q(z_s | z_t, m)`.
///
/// The mean is `coef_zt * z_t + coef_m * m`, the standard deviation `sigma_q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub s: usize,
    pub t: usize,
    pub coef_zt: f64,
    pub coef_m: f64,
    pub sigma_q: f64,
}

/// Metadata sufficient to rebuild a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub precision: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, precision: DEFAULT_PRECISION }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::polynomial(self.steps, self.precision)
    }
}

impl Schedule {
    /// Polynomial schedule `raw(t) = (1 - (t/T)^2)^2` with cumulative ratio
    /// clipping, then `alpha_t^2 = (1 - 2p) raw(t) + p`.
    pub fn polynomial(steps: usize, precision: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(precision > 0.0 && precision < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "schedule precision must lie in (0, 0.5), got {precision}"
            )));
        }
        let n = steps as f64;
        let raw: Vec<f64> = (0..=steps)
            .map(|t| {
                let x = t as f64 / n;
                (1.0 - x * x).powi(2)
            })
            .collect();

        let mut clipped = Vec::with_capacity(steps + 1);
        let mut prev_raw = 1.0;
        let mut acc = 1.0;
        for &r in &raw {
            let ratio = (r / prev_raw).clamp(CLIP_RATIO, 1.0);
            acc *= ratio;
            clipped.push(acc);
            prev_raw = r;
        }

        let scale = 1.0 - 2.0 * precision;
        let alpha2: Vec<f64> = clipped.iter().map(|c| scale * c + precision).collect();
        let sigma2: Vec<f64> = alpha2.iter().map(|a| 1.0 - a).collect();
        let alpha = alpha2.iter().map(|a| a.sqrt()).collect();
        let sigma = sigma2.iter().map(|s| s.sqrt()).collect();
        let snr = alpha2.iter().zip(&sigma2).map(|(a, s)| a / s).collect();

        Ok(Self { steps, precision, alpha, sigma, alpha2, sigma2, snr })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec { steps: self.steps, precision: self.precision }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha2(&self, t: usize) -> f64 {
        self.alpha2[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.snr[t]
    }

    fn check_pair(&self, s: usize, t: usize) -> Result<()> {
        if s >= t || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= s < t <= {}, got s={s}, t={t}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn transition_params(&self, s: usize, t: usize) -> Result<TransitionParams> {
        self.check_pair(s, t)?;
        let alpha_ts = self.alpha[t] / self.alpha[s];
        // sigma_t^2 - alpha_ts^2 sigma_s^2 == 1 - alpha_t^2 / alpha_s^2 under alpha^2 + sigma^2 = 1
        let sigma2_ts = (1.0 - self.alpha2[t] / self.alpha2[s]).max(0.0);
        Ok(TransitionParams { s, t, alpha_ts, sigma2_ts })
    }

    /// Like [`Schedule::transition_params`] but returns the identity for `s == t`.
    pub fn transition_params_or_identity(&self, s: usize, t: usize) -> Result<TransitionParams> {
        if s == t && t <= self.steps {
            return Ok(TransitionParams::identity(t));
        }
        self.transition_params(s, t)
    }

    pub fn posterior_params(&self, s: usize, t: usize) -> Result<PosteriorParams> {
        let tr = self.transition_params(s, t)?;
        let sigma2_t = self.sigma2[t];
        let coef_zt = tr.alpha_ts * self.sigma2[s] / sigma2_t;
        let coef_m = self.alpha[s] * tr.sigma2_ts / sigma2_t;
        let sigma_q = tr.sigma2_ts.sqrt() * self.sigma[s] / self.sigma[t];
        Ok(PosteriorParams { s, t, coef_zt, coef_m, sigma_q })
    }

    /// Transition pairs `(t, s)` of the coarse reverse grid, from `T` down to 0.
    ///
    /// The grid is `T, T - stride, ...`; when `stride` does not divide `T` the
    /// last transition is shortened so the chain always ends at 0.
    pub fn coarse_grid(&self, stride: usize) -> Result<Vec<(usize, usize)>> {
        if stride == 0 || stride > self.steps {
            return Err(Error::InvalidArgument(format!(
                "stride must lie in 1..={}, got {stride}",
                self.steps
            )));
        }
        let mut pairs = Vec::with_capacity(self.steps.div_ceil(stride));
        let mut t = self.steps;
        while t > 0 {
            let s = t.saturating_sub(stride);
            pairs.push((t, s));
            t = s;
        }
        Ok(pairs)
    }

    /// `sigma_q` for every transition of the coarse grid at `stride`.
    pub fn variance_profile(&self, stride: usize) -> Result<Vec<ProfilePoint>> {
        self.coarse_grid(stride)?
            .into_iter()
            .map(|(t, s)| {
                let post = self.posterior_params(s, t)?;
                Ok(ProfilePoint { t, s, sigma_q: post.sigma_q })
            })
            .collect()
    }
}

/// One transition of a variance profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub t: usize,
    pub s: usize,
    pub sigma_q: f64,
}

/// Writes profiles as CSV with header `t,stride,sigma_q`, ordered by stride
/// then by descending `t`.
pub fn write_profiles_csv<W: std::io::Write>(
    mut out: W,
    profiles: &[(usize, Vec<ProfilePoint>)],
) -> std::io::Result<()> {
    let mut sorted: Vec<&(usize, Vec<ProfilePoint>)> = profiles.iter().collect();
    sorted.sort_by_key(|(stride, _)| *stride);
    writeln!(out, "t,stride,sigma_q")?;
    for (stride, points) in sorted {
        for p in points {
            writeln!(out, "{},{},{:e}", p.t, stride, p.sigma_q)?;
        }
    }
    Ok(())
}

/// Checks that longer transitions give strictly larger `sigma_q` at every
/// transition target `s` shared by two profiles.
///
/// Returns the first violating `(s, smaller_stride, larger_stride)` if any.
pub fn check_stride_ordering(
    profiles: &[(usize, Vec<ProfilePoint>)],
) -> Option<(usize, usize, usize)> {
    use std::collections::BTreeMap;
    let mut sorted: Vec<&(usize, Vec<ProfilePoint>)> = profiles.iter().collect();
    sorted.sort_by_key(|(stride, _)| *stride);
    for (i, (small, small_pts)) in sorted.iter().enumerate() {
        let by_s: BTreeMap<usize, &ProfilePoint> = small_pts.iter().map(|p| (p.s, p)).collect();
        for (large, large_pts) in &sorted[i + 1..] {
            for p in large_pts {
                let Some(q) = by_s.get(&p.s) else { continue };
                if p.t > q.t && p.sigma_q <= q.sigma_q {
                    return Some((p.s, *small, *large));
                }
            }
        }
    }
    None
}

/// Index of the maximum of a profile, and whether it is strictly interior.
pub fn profile_peak(points: &[ProfilePoint]) -> (usize, bool) {
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.sigma_q > points[best].sigma_q {
            best = i;
        }
    }
    (best, best > 0 && best + 1 < points.len())
}
