//! Euler–Maruyama simulation with boundary-aware stepping, and the two
//! verification experiments: the time-change identity and the zero-one law.
//!
//! Normals come from ChaCha8 keyed by `(seed, domain)` on stream `path_id`;
//! step `k` consumes words `4k..4k+4`, so every draw is a function of
//! `(seed, domain, path_id, k)` and results do not depend on scheduling.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expression;
use crate::feller::{scale_profile, Boundary, CoefficientSet};
use crate::timechange::{accumulate_phi, time_change_path, transformed_coefficients, Exit, PathRecord};
use crate::zeroone::Functional;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: f64,
    pub base_step: f64,
    /// Exit band width relative to `R - L`.
    pub boundary_band: f64,
    /// Numerical state window `(L, R)`.
    pub truncation: (f64, f64),
    pub n_paths: usize,
    pub seed: u64,
    pub step_shrink: f64,
    /// Hard cap on steps per path.
    pub max_steps: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 50.0,
            base_step: 1e-3,
            boundary_band: 1e-6,
            truncation: (-10.0, 10.0),
            n_paths: 10_000,
            seed: 0,
            step_shrink: 0.5,
            max_steps: 50_000_000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, cs: &CoefficientSet) -> Result<(), SimError> {
        let (l, r) = self.truncation;
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.base_step > 0.0 && self.base_step.is_finite()) {
            return bad(format!("base_step must be positive, got {}", self.base_step));
        }
        if !(self.boundary_band > 0.0 && self.boundary_band < 1.0) {
            return bad(format!("boundary_band must lie in (0, 1), got {}", self.boundary_band));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink <= 1.0) {
            return bad(format!("step_shrink must lie in (0, 1], got {}", self.step_shrink));
        }
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if !(l.is_finite() && r.is_finite() && cs.ell < l && l < r && r < cs.r) {
            return bad(format!("truncation ({l}, {r}) must satisfy ell < L < R < r"));
        }
        let eps = match cs.sigma.evaluate(cs.x0) {
            Ok(s) => self.base_step * s.abs(),
            Err(e) => return bad(format!("sigma(x0): {e}")),
        };
        if !(l < cs.x0 - eps && cs.x0 + eps < r) {
            return bad(format!("x0 = {} too close to the truncation window", cs.x0));
        }
        Ok(())
    }

    fn band(&self) -> f64 {
        self.boundary_band * (self.truncation.1 - self.truncation.0)
    }
}

/// Independent random-number domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Y,
    X,
    NullY,
    Permutation,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Y => 0x59,
            Domain::X => 0x58,
            Domain::NullY => 0x4e59,
            Domain::Permutation => 0x5045,
        }
    }
}

fn rng_for(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.tag().to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// One standard normal per call, from exactly two `u64` draws.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let a = rng.next_u64();
    let b = rng.next_u64();
    let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// How a simulated path ended.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub exit: Exit,
    pub exit_time: Option<f64>,
    pub end_time: f64,
    pub end_state: f64,
    pub steps: u64,
    pub clamped: u32,
    pub failure: Option<String>,
}

/// Step one path, calling `visit(t, y)` at every knot including `t = 0`.
///
/// Steps are cut to land exactly on each time in `stops` (ascending).
/// `visit` may return an error message to abort the path.
pub fn run_path<F>(
    cs: &CoefficientSet,
    cfg: &SimConfig,
    domain: Domain,
    path_id: u64,
    stops: &[f64],
    mut visit: F,
) -> PathOutcome
where
    F: FnMut(f64, f64) -> Result<(), String>,
{
    let mut rng = rng_for(cfg.seed, domain, path_id);
    let (l, r) = cfg.truncation;
    let band = cfg.band();
    let h = cfg.base_step;
    let sqrt_h = h.sqrt();
    let mut t = 0.0;
    let mut y = cs.x0;
    let mut steps = 0u64;
    let mut clamped = 0u32;
    let mut stop_idx = 0usize;
    let fail = |t: f64, y: f64, steps: u64, clamped: u32, msg: String| PathOutcome {
        exit: Exit::None,
        exit_time: None,
        end_time: t,
        end_state: y,
        steps,
        clamped,
        failure: Some(msg),
    };
    if let Err(m) = visit(t, y) {
        return fail(t, y, steps, clamped, m);
    }
    loop {
        while stop_idx < stops.len() && stops[stop_idx] <= t {
            stop_idx += 1;
        }
        let next_stop = stops.get(stop_idx).copied().unwrap_or(cfg.horizon).min(cfg.horizon);
        if t >= cfg.horizon {
            return PathOutcome {
                exit: Exit::None,
                exit_time: None,
                end_time: t,
                end_state: y,
                steps,
                clamped,
                failure: None,
            };
        }
        if steps >= cfg.max_steps {
            return fail(t, y, steps, clamped, format!("step budget {} exhausted", cfg.max_steps));
        }
        let mu = match cs.mu.evaluate(y) {
            Ok(v) => v,
            Err(e) => return fail(t, y, steps, clamped, format!("drift: {e}")),
        };
        let sigma = match cs.sigma.evaluate(y) {
            Ok(v) => v,
            Err(e) => return fail(t, y, steps, clamped, format!("diffusion: {e}")),
        };
        let dist = (y - l).min(r - y);
        let scale = sigma.abs() * sqrt_h + mu.abs() * h;
        let mut dt = if scale > 0.0 { h * (cfg.step_shrink * dist / scale).min(1.0) } else { h };
        let mut landed = false;
        if t + dt >= next_stop {
            dt = next_stop - t;
            landed = true;
        }
        let z = normal(&mut rng);
        steps += 1;
        let y_new = y + mu * dt + sigma * dt.sqrt() * z;
        let t_new = if landed { next_stop } else { t + dt };
        if !y_new.is_finite() {
            return fail(t, y, steps, clamped, format!("non-finite state after step at t = {t}"));
        }
        let exit = if y_new <= l + band {
            Some((Exit::Left, l))
        } else if y_new >= r - band {
            Some((Exit::Right, r))
        } else {
            None
        };
        if let Some((side, level)) = exit {
            let outside = match side {
                Exit::Left => y_new < l,
                _ => y_new > r,
            };
            let (t_exit, y_exit) = if outside {
                clamped += 1;
                let frac = (level - y) / (y_new - y);
                (t + frac * (t_new - t), level)
            } else {
                (t_new, y_new)
            };
            if let Err(m) = visit(t_exit, y_exit) {
                return fail(t_exit, y_exit, steps, clamped, m);
            }
            return PathOutcome {
                exit: side,
                exit_time: Some(t_exit),
                end_time: t_exit,
                end_state: y_exit,
                steps,
                clamped,
                failure: None,
            };
        }
        t = t_new;
        y = y_new;
        if let Err(m) = visit(t, y) {
            return fail(t, y, steps, clamped, m);
        }
    }
}

/// Simulate one path of `Y` and keep the full trajectory.
pub fn simulate_path(cs: &CoefficientSet, cfg: &SimConfig, path_id: u64) -> PathRecord {
    simulate_path_in(cs, cfg, Domain::Y, path_id)
}

pub fn simulate_path_in(cs: &CoefficientSet, cfg: &SimConfig, domain: Domain, path_id: u64) -> PathRecord {
    let mut times = Vec::new();
    let mut states = Vec::new();
    let out = run_path(cs, cfg, domain, path_id, &[], |t, y| {
        times.push(t);
        states.push(y);
        Ok(())
    });
    PathRecord {
        seed: cfg.seed,
        path_id,
        times,
        states,
        phi: Vec::new(),
        exit: out.exit,
        exit_time: out.exit_time,
        censored: out.exit == Exit::None && out.failure.is_none(),
        clamped: out.clamped,
        one_sided: 0,
        failure: out.failure,
    }
}

/// Simulate `cfg.n_paths` paths in parallel, ordered by path id.
pub fn simulate_paths(cs: &CoefficientSet, cfg: &SimConfig, domain: Domain) -> Vec<PathRecord> {
    (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|id| simulate_path_in(cs, cfg, domain, id))
        .collect()
}

// ---------------------------------------------------------------------------
// Statistics

pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub count: usize,
    pub n: usize,
    pub frequency: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

impl Proportion {
    pub fn contains(&self, p: f64) -> bool {
        self.wilson_low <= p && p <= self.wilson_high
    }

    pub fn overlaps(&self, other: &Proportion) -> bool {
        self.wilson_low <= other.wilson_high && other.wilson_low <= self.wilson_high
    }
}

/// Wilson score interval at 95%.
pub fn wilson(count: usize, n: usize) -> Proportion {
    if n == 0 {
        return Proportion { count, n, frequency: 0.0, wilson_low: 0.0, wilson_high: 1.0 };
    }
    let nf = n as f64;
    let p = count as f64 / nf;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z_95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Proportion {
        count,
        n,
        frequency: p,
        wilson_low: if count == 0 { 0.0 } else { (center - half).max(0.0) },
        wilson_high: if count == n { 1.0 } else { (center + half).min(1.0) },
    }
}

/// Two-sample Kolmogorov–Smirnov distance. Sorts both inputs.
pub fn ks_distance(a: &mut [f64], b: &mut [f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Nearest-rank quantile of unsorted data.
pub fn quantile(data: &[f64], q: f64) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

pub const NULL_PERMUTATIONS: usize = 200;
pub const NULL_QUANTILE: f64 = 0.99;
pub const THRESHOLD_FACTOR: f64 = 1.5;
pub const MIN_EFFECTIVE: usize = 100;

/// `THRESHOLD_FACTOR` times the 0.99 quantile of KS distances between
/// random splits of the pooled null sample into sizes `n1` and `n2`.
pub fn null_threshold(pool: &[f64], n1: usize, n2: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, Domain::Permutation, 0);
    let mut work = pool.to_vec();
    let mut stats = Vec::with_capacity(NULL_PERMUTATIONS);
    let n1 = n1.min(work.len().saturating_sub(1)).max(1);
    let n2 = n2.min(work.len() - n1).max(1);
    for _ in 0..NULL_PERMUTATIONS {
        for i in (1..work.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            work.swap(i, j);
        }
        let (mut a, mut b) = (work[..n1].to_vec(), work[n1..n1 + n2].to_vec());
        stats.push(ks_distance(&mut a, &mut b));
    }
    THRESHOLD_FACTOR * quantile(&stats, NULL_QUANTILE).unwrap_or(1.0)
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTable {
    pub n_paths: usize,
    pub exit_left: Proportion,
    pub exit_right: Proportion,
    pub censored: Proportion,
    pub failed: usize,
    pub clamped_steps: u64,
}

/// Empirical exit-left / exit-right / censored frequencies.
pub fn estimate_event_probabilities(cs: &CoefficientSet, cfg: &SimConfig) -> Result<EventTable, SimError> {
    cfg.validate(cs)?;
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|id| run_path(cs, cfg, Domain::Y, id, &[], |_, _| Ok(())))
        .collect();
    let count = |side: Exit| outcomes.iter().filter(|o| o.failure.is_none() && o.exit == side).count();
    let failed = outcomes.iter().filter(|o| o.failure.is_some()).count();
    let n = outcomes.len() - failed;
    Ok(EventTable {
        n_paths: outcomes.len(),
        exit_left: wilson(count(Exit::Left), n),
        exit_right: wilson(count(Exit::Right), n),
        censored: wilson(count(Exit::None), n),
        failed,
        clamped_steps: outcomes.iter().map(|o| o.clamped as u64).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Agreement {
    Consistent,
    Contradicts,
    Underpowered,
    /// No boundary carries a definite non-vacuous verdict to test.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: f64,
    pub tending: usize,
    pub mean: Option<f64>,
    pub q90: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitComparison {
    pub y_right: Proportion,
    pub x_right: Proportion,
    pub y_left: Proportion,
    pub x_left: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub experiment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Boundary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_threshold: Option<f64>,
    pub n_effective: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_side_agreement: Option<f64>,
    /// Largest `|ζ^X - φ_ζ|` over path-by-path time-changed paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_exit_max_deviation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_frequencies: Option<ExitComparison>,
    pub functional_diagnostics: Vec<HorizonRow>,
    pub failed_paths: usize,
    pub clamped_steps: u64,
    pub verdict_agreement: Agreement,
    pub notes: Vec<String>,
}

fn signed_exit(exit: Exit, t: f64) -> Option<f64> {
    match exit {
        Exit::Right => Some(t),
        Exit::Left => Some(-t),
        Exit::None => None,
    }
}

struct YSample {
    // signed φ_ζ for exits with φ_ζ <= horizon
    signed: Vec<f64>,
    right: usize,
    left: usize,
    exited: usize,
    side_agree: usize,
    max_dev: f64,
    failed: usize,
    clamped: u64,
    n: usize,
}

fn phi_sample(cs: &CoefficientSet, b: &Expression, cfg: &SimConfig, domain: Domain, check_paths: bool) -> YSample {
    let per_path: Vec<(Option<(Exit, f64)>, Option<(bool, f64)>, bool, u32)> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|id| {
            let path = simulate_path_in(cs, cfg, domain, id);
            if path.failure.is_some() {
                return (None, None, true, path.clamped);
            }
            let Ok(with_phi) = accumulate_phi(&path, b) else {
                return (None, None, true, path.clamped);
            };
            if !with_phi.exited() {
                return (None, None, false, path.clamped);
            }
            let phi_zeta = with_phi.phi_end().unwrap();
            let check = if check_paths {
                let knots = &with_phi.phi[..with_phi.phi.len() - 1];
                let mut grid: Vec<f64> = Vec::with_capacity(knots.len());
                for &p in knots {
                    if grid.last().is_none_or(|&g| p > g) {
                        grid.push(p);
                    }
                }
                match time_change_path(&with_phi, &grid) {
                    Ok(x) => {
                        let same = x.exit == with_phi.exit && x.final_state() == with_phi.final_state();
                        Some((same, (x.exit_time.unwrap_or(f64::NAN) - phi_zeta).abs()))
                    }
                    Err(_) => Some((false, f64::INFINITY)),
                }
            } else {
                None
            };
            (Some((with_phi.exit, phi_zeta)), check, false, with_phi.clamped)
        })
        .collect();
    let mut s = YSample {
        signed: Vec::new(),
        right: 0,
        left: 0,
        exited: 0,
        side_agree: 0,
        max_dev: 0.0,
        failed: 0,
        clamped: 0,
        n: 0,
    };
    for (exit, check, failed, clamped) in per_path {
        s.clamped += clamped as u64;
        if failed {
            s.failed += 1;
            continue;
        }
        s.n += 1;
        if let Some((same, dev)) = check {
            s.exited += 1;
            s.side_agree += same as usize;
            s.max_dev = s.max_dev.max(dev);
        }
        if let Some((side, phi)) = exit {
            if phi <= cfg.horizon {
                s.signed.push(signed_exit(side, phi).unwrap());
                match side {
                    Exit::Right => s.right += 1,
                    _ => s.left += 1,
                }
            }
        }
    }
    s
}

/// Compare `φ_ζ` from `Y` with `ζ^X` from a direct simulation of `X`.
pub fn verify_time_change_identity(
    cs: &CoefficientSet,
    b: &Expression,
    cfg: &SimConfig,
) -> Result<VerificationSummary, SimError> {
    verify_time_change_identity_with(cs, b, b, cfg)
}

/// As above, with `X` built from `b_x` while `φ` uses `b_y`.
pub fn verify_time_change_identity_with(
    cs: &CoefficientSet,
    b_y: &Expression,
    b_x: &Expression,
    cfg: &SimConfig,
) -> Result<VerificationSummary, SimError> {
    cfg.validate(cs)?;
    let cs_x = transformed_coefficients(cs, b_x);
    let y = phi_sample(cs, b_y, cfg, Domain::Y, true);
    let null = phi_sample(cs, b_y, cfg, Domain::NullY, false);
    let x_out: Vec<PathOutcome> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|id| run_path(&cs_x, cfg, Domain::X, id, &[], |_, _| Ok(())))
        .collect();
    let x_failed = x_out.iter().filter(|o| o.failure.is_some()).count();
    let x_ok: Vec<&PathOutcome> = x_out.iter().filter(|o| o.failure.is_none()).collect();
    let x_signed: Vec<f64> =
        x_ok.iter().filter_map(|o| o.exit_time.and_then(|t| signed_exit(o.exit, t))).collect();
    let x_right = x_ok.iter().filter(|o| o.exit == Exit::Right).count();
    let x_left = x_ok.iter().filter(|o| o.exit == Exit::Left).count();

    let freqs = ExitComparison {
        y_right: wilson(y.right, y.n),
        x_right: wilson(x_right, x_ok.len()),
        y_left: wilson(y.left, y.n),
        x_left: wilson(x_left, x_ok.len()),
    };
    let n_eff = (y.signed.len(), x_signed.len());
    let ks = ks_distance(&mut y.signed.clone(), &mut x_signed.clone());
    let mut pool = y.signed.clone();
    pool.extend_from_slice(&null.signed);
    let threshold = null_threshold(&pool, n_eff.0, n_eff.1, cfg.seed);
    let side_agreement = if y.exited > 0 { y.side_agree as f64 / y.exited as f64 } else { 1.0 };

    let mut notes = Vec::new();
    let verdict = if n_eff.0 < MIN_EFFECTIVE || n_eff.1 < MIN_EFFECTIVE || null.signed.len() < MIN_EFFECTIVE {
        notes.push(format!("fewer than {MIN_EFFECTIVE} exits in a sample"));
        Agreement::Underpowered
    } else {
        let ks_ok = ks < threshold;
        let freq_ok = freqs.y_right.overlaps(&freqs.x_right) && freqs.y_left.overlaps(&freqs.x_left);
        let side_ok = side_agreement == 1.0;
        if !ks_ok {
            notes.push(format!("KS distance {ks:.4} at or above threshold {threshold:.4}"));
        }
        if !freq_ok {
            notes.push("exit-side frequencies disagree beyond Wilson intervals".into());
        }
        if !side_ok {
            notes.push("path-by-path time change changed an exit side".into());
        }
        if ks_ok && freq_ok && side_ok {
            Agreement::Consistent
        } else {
            Agreement::Contradicts
        }
    };
    Ok(VerificationSummary {
        experiment: "time_change".into(),
        boundary: None,
        ks_distance: Some(ks),
        ks_threshold: Some(threshold),
        n_effective: n_eff,
        exit_side_agreement: Some(side_agreement),
        phi_exit_max_deviation: Some(y.max_dev),
        exit_frequencies: Some(freqs),
        functional_diagnostics: Vec::new(),
        failed_paths: y.failed + null.failed + x_failed,
        clamped_steps: y.clamped + null.clamped + x_out.iter().map(|o| o.clamped as u64).sum::<u64>(),
        verdict_agreement: verdict,
        notes,
    })
}

pub const STABILIZATION_TOL: f64 = 0.05;
pub const GROWTH_FACTOR: f64 = 1.5;
/// Outer fraction of the window, in scale coordinates, that counts as tending.
pub const TENDING_FRACTION: f64 = 0.1;

/// Per-rung functional values of one path: `(tending, value)`.
fn functional_track(
    cs: &CoefficientSet,
    f: &Expression,
    cfg: &SimConfig,
    path_id: u64,
    ladder: &[f64],
    side: Boundary,
    tending_state: &dyn Fn(f64) -> bool,
) -> Result<Vec<(bool, f64)>, String> {
    let mut acc = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut rows: Vec<(bool, f64)> = Vec::with_capacity(ladder.len());
    let mut rung = 0usize;
    let out = run_path(cs, cfg, Domain::Y, path_id, ladder, |t, y| {
        let fy = f.evaluate(y).map_err(|e| format!("f: {e}"))?;
        if let Some((pt, pf)) = prev {
            acc += 0.5 * (t - pt) * (pf + fy);
        }
        prev = Some((t, fy));
        while rung < ladder.len() && t >= ladder[rung] {
            rows.push((tending_state(y), acc));
            rung += 1;
        }
        Ok(())
    });
    if let Some(m) = out.failure {
        return Err(m);
    }
    let exited_toward = matches!((out.exit, side), (Exit::Right, Boundary::R) | (Exit::Left, Boundary::Ell));
    if out.exit != Exit::None {
        // frozen after exit
        while rows.len() < ladder.len() {
            rows.push((exited_toward, acc));
        }
        for r in rows.iter_mut() {
            r.0 = r.0 || exited_toward;
        }
    }
    while rows.len() < ladder.len() {
        rows.push((tending_state(out.end_state), acc));
    }
    Ok(rows)
}

/// Track `∫_0^{t∧ζ} f(Y_u) du` over a horizon ladder among paths tending to
/// `side` and compare its behaviour with the classifier verdict.
pub fn verify_zero_one_law(
    cs: &CoefficientSet,
    f: &Expression,
    cfg: &SimConfig,
    ladder: &[f64],
    side: Boundary,
    expected: Functional,
) -> Result<VerificationSummary, SimError> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0]) || ladder[0] <= 0.0 {
        return Err(SimError::Config("horizon ladder must be positive and increasing".into()));
    }
    let cfg = SimConfig { horizon: *ladder.last().unwrap(), ..cfg.clone() };
    cfg.validate(cs)?;
    let (l, r) = cfg.truncation;
    // tending = outer decile of (s(L), s(R)) toward the boundary
    let profile = scale_profile(cs, 1e-9).map_err(|e| SimError::Config(e.to_string()))?;
    let s_l = profile.s(l).unwrap_or(f64::NEG_INFINITY);
    let s_r = profile.s(r).unwrap_or(f64::INFINITY);
    let cut = match side {
        Boundary::R => s_r - TENDING_FRACTION * (s_r - s_l),
        Boundary::Ell => s_l + TENDING_FRACTION * (s_r - s_l),
    };
    let tending_state = |y: f64| -> bool {
        let Ok(s) = profile.s(y) else { return false };
        match side {
            Boundary::R => !cut.is_finite() || s >= cut,
            Boundary::Ell => !cut.is_finite() || s <= cut,
        }
    };

    let tracks: Vec<Result<Vec<(bool, f64)>, String>> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|id| functional_track(cs, f, &cfg, id, ladder, side, &tending_state))
        .collect();
    let failed = tracks.iter().filter(|t| t.is_err()).count();
    let mut rows = Vec::with_capacity(ladder.len());
    for (j, &h) in ladder.iter().enumerate() {
        let vals: Vec<f64> = tracks
            .iter()
            .filter_map(|t| t.as_ref().ok())
            .filter(|t| t[j].0)
            .map(|t| t[j].1)
            .collect();
        let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        rows.push(HorizonRow { horizon: h, tending: vals.len(), mean, q90: quantile(&vals, 0.9) });
    }
    let min_tending = rows.iter().map(|r| r.tending).min().unwrap_or(0);
    let mut notes = Vec::new();
    let verdict = match expected {
        Functional::Vacuous | Functional::Indeterminate => {
            notes.push(format!("classifier verdict {expected:?} has no empirical signature"));
            Agreement::NotApplicable
        }
        _ if min_tending < MIN_EFFECTIVE => {
            notes.push(format!("fewer than {MIN_EFFECTIVE} boundary-tending paths at some rung"));
            Agreement::Underpowered
        }
        Functional::ConvergesAs => {
            let q: Vec<f64> = rows.iter().map(|r| r.q90.unwrap()).collect();
            let stable = q.windows(2).all(|w| (w[1] - w[0]).abs() < STABILIZATION_TOL * w[0].abs());
            if stable {
                Agreement::Consistent
            } else {
                notes.push("0.9-quantile does not stabilize across the ladder".into());
                Agreement::Contradicts
            }
        }
        Functional::DivergesAs => {
            let q: Vec<f64> = rows.iter().map(|r| r.q90.unwrap()).collect();
            let grows = q.windows(2).all(|w| w[1] >= GROWTH_FACTOR * w[0]);
            if grows {
                Agreement::Consistent
            } else {
                notes.push(format!("0.9-quantile grows by less than {GROWTH_FACTOR}x per rung"));
                Agreement::Contradicts
            }
        }
    };
    Ok(VerificationSummary {
        experiment: "zero_one".into(),
        boundary: Some(side),
        ks_distance: None,
        ks_threshold: None,
        n_effective: (min_tending, cfg.n_paths - failed),
        exit_side_agreement: None,
        phi_exit_max_deviation: None,
        exit_frequencies: None,
        functional_diagnostics: rows,
        failed_paths: failed,
        clamped_steps: 0,
        verdict_agreement: verdict,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub level: f64,
    pub exits: usize,
    pub mean: Option<f64>,
    pub q90: Option<f64>,
}

/// Functional at exit through `side` as the truncation level on that side
/// moves toward the boundary.
pub fn truncation_study(
    cs: &CoefficientSet,
    f: &Expression,
    cfg: &SimConfig,
    side: Boundary,
    levels: &[f64],
) -> Result<Vec<TruncationRow>, SimError> {
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let truncation = match side {
            Boundary::Ell => (level, cfg.truncation.1),
            Boundary::R => (cfg.truncation.0, level),
        };
        let c = SimConfig { truncation, ..cfg.clone() };
        c.validate(cs)?;
        let vals: Vec<Option<f64>> = (0..c.n_paths as u64)
            .into_par_iter()
            .map(|id| {
                let mut acc = 0.0;
                let mut prev: Option<(f64, f64)> = None;
                let o = run_path(cs, &c, Domain::Y, id, &[], |t, y| {
                    let fy = f.evaluate(y).map_err(|e| format!("f: {e}"))?;
                    if let Some((pt, pf)) = prev {
                        acc += 0.5 * (t - pt) * (pf + fy);
                    }
                    prev = Some((t, fy));
                    Ok(())
                });
                let through = matches!((o.exit, side), (Exit::Left, Boundary::Ell) | (Exit::Right, Boundary::R));
                (o.failure.is_none() && through).then_some(acc)
            })
            .collect();
        let v: Vec<f64> = vals.into_iter().flatten().collect();
        let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        out.push(TruncationRow { level, exits: v.len(), mean, q90: quantile(&v, 0.9) });
    }
    Ok(out)
}
