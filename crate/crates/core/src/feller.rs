//! Scale function, Feller test functions, and the standing-condition checks.
//!
//! The log scale density `I(y) = ∫_c^y 2μ/σ²` is tabulated once on a grid
//! that is geometric toward each endpoint; queries integrate from the
//! nearest node, so every later evaluation costs one local quadrature panel.
//!
//! Test-function integrands are never formed as `(s(r) - s(y)) / s'(y)`.
//! That quotient is evaluated as `∫_y^r exp(I(y) - I(z)) dz`, which keeps
//! full precision where both factors under- or overflow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, EvalErrorKind, Expression};
use crate::quad::{
    gk15, integrate, integrate_improper, tanh_sinh, tanh_sinh_to_infinity, ClassifierConfig,
    IntegrabilityVerdict, QuadError, SingularEnds, Status,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FellerError {
    #[error("invalid coefficient set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One end of the state interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Boundary {
    Ell,
    R,
}

impl Boundary {
    pub fn other(self) -> Boundary {
        match self {
            Boundary::Ell => Boundary::R,
            Boundary::R => Boundary::Ell,
        }
    }
}

/// Serde for extended reals: finite values as numbers, `±inf` as strings.
pub mod bound_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.trim() {
                "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => other
                    .parse::<f64>()
                    .map_err(|_| serde::de::Error::custom(format!("invalid bound `{other}`"))),
            },
        }
    }
}

/// Drift, diffusion, state interval `(ell, r)`, reference point and start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub mu: Expression,
    pub sigma: Expression,
    #[serde(with = "bound_serde")]
    pub ell: f64,
    #[serde(with = "bound_serde")]
    pub r: f64,
    pub c: f64,
    pub x0: f64,
}

impl CoefficientSet {
    /// `c = None` picks the midpoint of a finite interval, otherwise `x0`.
    pub fn new(
        mu: Expression,
        sigma: Expression,
        ell: f64,
        r: f64,
        x0: f64,
        c: Option<f64>,
    ) -> Result<Self, FellerError> {
        let c = c.unwrap_or_else(|| default_reference(ell, r, x0));
        let cs = CoefficientSet { mu, sigma, ell, r, c, x0 };
        cs.check_interval()?;
        Ok(cs)
    }

    pub fn parse(mu: &str, sigma: &str, ell: f64, r: f64, x0: f64) -> Result<Self, FellerError> {
        let mu = Expression::parse(mu).map_err(|e| FellerError::Invalid(e.to_string()))?;
        let sigma = Expression::parse(sigma).map_err(|e| FellerError::Invalid(e.to_string()))?;
        Self::new(mu, sigma, ell, r, x0, None)
    }

    pub fn with_reference(&self, c: f64) -> Result<Self, FellerError> {
        let cs = CoefficientSet { c, ..self.clone() };
        cs.check_interval()?;
        Ok(cs)
    }

    pub fn check_interval(&self) -> Result<(), FellerError> {
        let CoefficientSet { ell, r, c, x0, .. } = *self;
        if ell.is_nan() || r.is_nan() || !(ell < r) {
            return Err(FellerError::Invalid(format!("need ell < r, got ({ell}, {r})")));
        }
        if !(c.is_finite() && ell < c && c < r) {
            return Err(FellerError::Invalid(format!("reference point c = {c} not inside J")));
        }
        if !(x0.is_finite() && ell < x0 && x0 < r) {
            return Err(FellerError::Invalid(format!("x0 = {x0} not inside J")));
        }
        Ok(())
    }

    pub fn endpoint(&self, side: Boundary) -> f64 {
        match side {
            Boundary::Ell => self.ell,
            Boundary::R => self.r,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ell < x && x < self.r
    }

    /// `2μ/σ²` at `x`.
    pub fn log_density_rate(&self, x: f64) -> Result<f64, EvalError> {
        let mu = self.mu.evaluate(x)?;
        let sigma = self.sigma.evaluate(x)?;
        ratio_checked(2.0 * mu, sigma * sigma, x)
    }
}

pub fn default_reference(ell: f64, r: f64, x0: f64) -> f64 {
    if ell.is_finite() && r.is_finite() {
        0.5 * (ell + r)
    } else {
        x0
    }
}

fn ratio_checked(num: f64, den: f64, x: f64) -> Result<f64, EvalError> {
    // a subnormal σ² has lost its precision
    if den.abs() < f64::MIN_POSITIVE {
        return Err(EvalError { kind: EvalErrorKind::DivisionByZero, op: "/σ²", x });
    }
    let v = num / den;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError { kind: EvalErrorKind::Overflow, op: "/σ²", x })
    }
}

/// Map `t ∈ (0, 1)` onto the state interval; used for probe grids.
pub fn probe_point(ell: f64, r: f64, t: f64) -> f64 {
    match (ell.is_finite(), r.is_finite()) {
        (true, true) => ell + (r - ell) * t,
        (true, false) => ell + t / (1.0 - t),
        (false, true) => r - (1.0 - t) / t,
        (false, false) => {
            let s = 2.0 * t - 1.0;
            s / (1.0 - s.abs())
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub condition: String,
    pub status: CheckStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<f64>,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ConditionEntry>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.status == CheckStatus::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConditionEntry> {
        self.entries.iter().filter(|e| e.status != CheckStatus::Pass)
    }
}

pub const PROBE_POINTS: usize = 10_000;
const COMPACT_LEVELS: i32 = 20;
// below this magnitude a zero next to it is read as underflow (sqrt of a subnormal is ~1e-162)
const UNDERFLOW_FLOOR: f64 = 1e-100;
// beyond this magnitude an overflow is read as leaving the representable range
const FAR_OUT: f64 = 64.0;

/// Outcome of scanning a function over the probe grid of `J`.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeScan {
    /// Constant sign on every informative probe.
    Signed { sign: f64, informative: usize, out_of_range: usize },
    /// A zero, sign change, or evaluation error at `x`.
    Fail { x: f64, reason: String },
}

fn is_far(x: f64, ell: f64, r: f64) -> bool {
    (x > FAR_OUT && r.is_infinite()) || (x < -FAR_OUT && ell.is_infinite())
}

/// Evaluate `h` on the probe grid of `J`.
///
/// Far-out probes toward an infinite endpoint where `h` overflows, and runs
/// of zeros reaching a grid end next to a value below 1e-100, are counted as
/// out of range rather than as zeros. Sign changes are bisected.
pub fn scan_probe_grid(h: impl Fn(f64) -> Result<f64, EvalError>, ell: f64, r: f64) -> ProbeScan {
    let xs: Vec<f64> = (0..PROBE_POINTS)
        .map(|i| probe_point(ell, r, (i as f64 + 0.5) / PROBE_POINTS as f64))
        .collect();
    let mut vals: Vec<Option<f64>> = Vec::with_capacity(xs.len());
    for &x in &xs {
        match h(x) {
            Ok(v) => vals.push(Some(v)),
            Err(e) if e.kind == EvalErrorKind::Overflow && is_far(x, ell, r) => vals.push(None),
            Err(e) => return ProbeScan::Fail { x, reason: format!("evaluation error: {e}") },
        }
    }
    // zero runs touching either end of the grid next to a tiny value
    let n = vals.len();
    let blank = |v: &Option<f64>| matches!(v, None | Some(0.0));
    let mut lead = 0;
    while lead < n && blank(&vals[lead]) {
        lead += 1;
    }
    let mut trail = n;
    while trail > lead && blank(&vals[trail - 1]) {
        trail -= 1;
    }
    let tiny = |i: usize| matches!(vals.get(i), Some(Some(v)) if v.abs() < UNDERFLOW_FLOOR);
    let lead_ok = lead == 0 || tiny(lead);
    let trail_ok = trail == n || tiny(trail - 1);
    let mut out_of_range = vals.iter().filter(|v| v.is_none()).count();
    for i in (0..lead).chain(trail..n) {
        if let Some(v) = vals[i] {
            let ok = if i < lead { lead_ok } else { trail_ok };
            if v == 0.0 && !ok {
                return ProbeScan::Fail { x: xs[i], reason: format!("zero at x = {}", xs[i]) };
            }
            out_of_range += 1;
        }
    }
    let mut prev: Option<(f64, f64)> = None;
    let mut informative = 0;
    for i in lead..trail {
        let Some(v) = vals[i] else { continue };
        let x = xs[i];
        if v == 0.0 {
            return ProbeScan::Fail { x, reason: format!("zero at x = {x}") };
        }
        informative += 1;
        if let Some((px, pv)) = prev {
            if pv.signum() != v.signum() {
                let (mut lo, mut hi, lo_sign) = (px, x, pv.signum());
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    match h(mid) {
                        Ok(m) if m == 0.0 => {
                            lo = mid;
                            hi = mid;
                            break;
                        }
                        Ok(m) if m.signum() == lo_sign => lo = mid,
                        Ok(_) => hi = mid,
                        Err(e) => return ProbeScan::Fail { x: mid, reason: format!("evaluation error: {e}") },
                    }
                }
                let at = 0.5 * (lo + hi);
                return ProbeScan::Fail { x: at, reason: format!("sign change; zero located at x = {at}") };
            }
        }
        prev = Some((x, v));
    }
    match prev {
        Some((_, v)) => ProbeScan::Signed { sign: v.signum(), informative, out_of_range },
        None => ProbeScan::Fail { x: xs[n / 2], reason: "no probe point in representable range".into() },
    }
}

/// Check that `h` has no zero on a dense probe grid of `J`.
pub fn nonzero_on_grid(
    name: &str,
    h: impl Fn(f64) -> Result<f64, EvalError>,
    ell: f64,
    r: f64,
) -> ConditionEntry {
    match scan_probe_grid(h, ell, r) {
        ProbeScan::Signed { informative, out_of_range, .. } => ConditionEntry {
            condition: name.to_string(),
            status: CheckStatus::Pass,
            location: None,
            evidence: format!("no zero on {informative} probe points ({out_of_range} out of range)"),
        },
        ProbeScan::Fail { x, reason } => ConditionEntry {
            condition: name.to_string(),
            status: CheckStatus::Fail,
            location: Some(x),
            evidence: reason,
        },
    }
}

/// Nested compacts exhausting `J`, innermost first.
pub fn nested_compacts(ell: f64, r: f64) -> Vec<(f64, f64)> {
    let width = if ell.is_finite() && r.is_finite() { r - ell } else { 1.0 };
    let mut out: Vec<(f64, f64)> = Vec::new();
    for k in 1..=COMPACT_LEVELS {
        let step = 2f64.powi(-k);
        let lo = if ell.is_finite() { ell + width * step } else { -(2f64.powi(k)) };
        let hi = if r.is_finite() { r - width * step } else { 2f64.powi(k) };
        if lo < hi && lo > ell && hi < r {
            if let Some(&(plo, phi)) = out.last() {
                out.push((lo.min(plo), hi.max(phi)));
            } else {
                out.push((lo, hi));
            }
        }
    }
    out
}

/// Local integrability of `h` on the compact exhaustion of `J`.
///
/// Overflow far out toward an infinite endpoint ends the exhaustion there.
pub fn locally_integrable(
    name: &str,
    h: impl Fn(f64) -> Result<f64, EvalError>,
    ell: f64,
    r: f64,
    tol: f64,
) -> ConditionEntry {
    let entry = |status, location, evidence| ConditionEntry {
        condition: name.to_string(),
        status,
        location,
        evidence,
    };
    let mut total = 0.0;
    let mut covered: Option<(f64, f64)> = None;
    let mut passed = 0usize;
    let mut stopped: Option<f64> = None;
    'outer: for (lo, hi) in nested_compacts(ell, r) {
        let strips: Vec<(f64, f64)> = match covered {
            None => vec![(lo, hi)],
            Some((clo, chi)) => vec![(lo, clo), (chi, hi)],
        };
        for (a, b) in strips {
            if a >= b {
                continue;
            }
            match integrate(|x| Ok(h(x)?.abs()), a, b, tol) {
                Ok(est) => total += est.value,
                Err(QuadError::Evaluation { x, source })
                    if source.kind == EvalErrorKind::Overflow && is_far(x, ell, r) && passed > 0 =>
                {
                    stopped = Some(x);
                    break 'outer;
                }
                Err(QuadError::Evaluation { x, source }) => {
                    return entry(
                        CheckStatus::Fail,
                        Some(x),
                        format!("evaluation error on [{a}, {b}]: {source}"),
                    )
                }
                Err(QuadError::NonConvergence { location, error_estimate, .. }) => {
                    return entry(
                        CheckStatus::Fail,
                        Some(location),
                        format!(
                            "integral over [{a}, {b}] does not settle (error {error_estimate:e}); non-integrable near x = {location}"
                        ),
                    )
                }
                Err(other) => return entry(CheckStatus::Indeterminate, None, other.to_string()),
            }
        }
        if !total.is_finite() {
            if is_far(lo, ell, r) || is_far(hi, ell, r) {
                stopped = Some(if is_far(hi, ell, r) { hi } else { lo });
                break;
            }
            return entry(CheckStatus::Fail, None, format!("integral over [{lo}, {hi}] overflows"));
        }
        covered = Some((lo, hi));
        passed += 1;
    }
    let (lo, hi) = covered.unwrap_or((f64::NAN, f64::NAN));
    let mut evidence = format!("finite on {passed} nested compacts; over [{lo:e}, {hi:e}]: {total:e}");
    if let Some(x) = stopped {
        evidence.push_str(&format!("; representable range ends near x = {x:e}"));
    }
    entry(CheckStatus::Pass, None, evidence)
}

/// Engelbert–Schmidt conditions for `(μ, σ)` and, when `b` is given, the
/// time-change conditions `b ≠ 0` and `b²/σ² ∈ L¹_loc(J)`.
pub fn validate_conditions(cs: &CoefficientSet, b: Option<&Expression>) -> ValidationReport {
    let tol = 1e-8;
    let (ell, r) = (cs.ell, cs.r);
    let mut entries = Vec::new();
    if let Err(e) = cs.check_interval() {
        entries.push(ConditionEntry {
            condition: "interval".into(),
            status: CheckStatus::Fail,
            location: None,
            evidence: e.to_string(),
        });
        return ValidationReport { entries };
    }
    let sigma = |x: f64| cs.sigma.evaluate(x);
    entries.push(nonzero_on_grid("sigma_nonzero", sigma, ell, r));
    let inv_sigma2 = |x: f64| {
        let s = cs.sigma.evaluate(x)?;
        ratio_checked(1.0, s * s, x)
    };
    entries.push(locally_integrable("inv_sigma2_locally_integrable", inv_sigma2, ell, r, tol));
    let mu_sigma2 = |x: f64| {
        let m = cs.mu.evaluate(x)?;
        let s = cs.sigma.evaluate(x)?;
        ratio_checked(m, s * s, x)
    };
    entries.push(locally_integrable("mu_over_sigma2_locally_integrable", mu_sigma2, ell, r, tol));
    if let Some(b) = b {
        entries.push(nonzero_on_grid("b_nonzero", |x| b.evaluate(x), ell, r));
        let b2_sigma2 = |x: f64| {
            let bv = b.evaluate(x)?;
            let s = cs.sigma.evaluate(x)?;
            ratio_checked(bv * bv, s * s, x)
        };
        entries.push(locally_integrable("b2_over_sigma2_locally_integrable", b2_sigma2, ell, r, tol));
    }
    ValidationReport { entries }
}

// ---------------------------------------------------------------------------
// Scale profile

const GRID_MAX_NODES: usize = 2400;
const LOCAL_TOL: f64 = 1e-13;
const INNER_TOL: f64 = 1e-11;

/// Scale function of a coefficient set, with its endpoint limits.
#[derive(Debug, Clone)]
pub struct ScaleProfile {
    cs: CoefficientSet,
    cfg: ClassifierConfig,
    nodes: Vec<f64>,
    log_density: Vec<f64>,
    // s at nodes[scale_lo..scale_hi]
    scale: Vec<f64>,
    scale_lo: usize,
    pub s_at_ell: IntegrabilityVerdict,
    pub s_at_r: IntegrabilityVerdict,
}

fn overflow(op: &'static str, x: f64) -> QuadError {
    QuadError::from(EvalError { kind: EvalErrorKind::Overflow, op, x })
}

/// Build the profile: tabulate `I`, then `s`, then the endpoint limits of `s`.
pub fn scale_profile(cs: &CoefficientSet, tol: f64) -> Result<ScaleProfile, FellerError> {
    let cfg = ClassifierConfig { tol, ..ClassifierConfig::default() };
    scale_profile_with(cs, &cfg)
}

pub fn scale_profile_with(cs: &CoefficientSet, cfg: &ClassifierConfig) -> Result<ScaleProfile, FellerError> {
    cs.check_interval()?;
    let rate = |x: f64| -> Result<f64, QuadError> { Ok(cs.log_density_rate(x)?) };
    let c = cs.c;

    let mut right: Vec<(f64, f64)> = Vec::new();
    let mut prev = (c, 0.0);
    let scale_inf = c.abs().max(1.0);
    for j in 1..=GRID_MAX_NODES {
        let node = if cs.r.is_finite() {
            cs.r - (cs.r - c) * 2f64.powf(-(j as f64) / 2.0)
        } else {
            c + scale_inf * (2f64.powf(j as f64 / 2.0) - 1.0)
        };
        if !(node.is_finite() && node > prev.0 && node < cs.r) {
            break;
        }
        let Ok(cell) = integrate(rate, prev.0, node, LOCAL_TOL) else { break };
        let next = prev.1 + cell.value;
        if !next.is_finite() {
            break;
        }
        prev = (node, next);
        right.push(prev);
    }
    let mut left: Vec<(f64, f64)> = Vec::new();
    let mut prev = (c, 0.0);
    for j in 1..=GRID_MAX_NODES {
        let node = if cs.ell.is_finite() {
            cs.ell + (c - cs.ell) * 2f64.powf(-(j as f64) / 2.0)
        } else {
            c - scale_inf * (2f64.powf(j as f64 / 2.0) - 1.0)
        };
        if !(node.is_finite() && node < prev.0 && node > cs.ell) {
            break;
        }
        let Ok(cell) = integrate(rate, node, prev.0, LOCAL_TOL) else { break };
        let next = prev.1 - cell.value;
        if !next.is_finite() {
            break;
        }
        prev = (node, next);
        left.push(prev);
    }
    let c_idx = left.len();
    let mut nodes = Vec::with_capacity(left.len() + right.len() + 1);
    let mut log_density = Vec::with_capacity(nodes.capacity());
    for &(x, i) in left.iter().rev() {
        nodes.push(x);
        log_density.push(i);
    }
    nodes.push(c);
    log_density.push(0.0);
    for &(x, i) in &right {
        nodes.push(x);
        log_density.push(i);
    }

    let mut profile = ScaleProfile {
        cs: cs.clone(),
        cfg: *cfg,
        nodes,
        log_density,
        scale: vec![0.0],
        scale_lo: c_idx,
        s_at_ell: IntegrabilityVerdict::finite(0.0, 0.0),
        s_at_r: IntegrabilityVerdict::finite(0.0, 0.0),
    };

    // s at nodes, outward from c while finite
    let mut up = Vec::new();
    let mut acc = 0.0;
    for k in c_idx..profile.nodes.len() - 1 {
        let (a, b) = (profile.nodes[k], profile.nodes[k + 1]);
        let Ok(cell) = profile.integrate_s_prime_cell(k, a, b) else { break };
        acc += cell;
        if !acc.is_finite() {
            break;
        }
        up.push(acc);
    }
    let mut down = Vec::new();
    let mut acc = 0.0;
    for k in (1..=c_idx).rev() {
        let (a, b) = (profile.nodes[k - 1], profile.nodes[k]);
        let Ok(cell) = profile.integrate_s_prime_cell(k, a, b) else { break };
        acc -= cell;
        if !acc.is_finite() {
            break;
        }
        down.push(acc);
    }
    profile.scale_lo = c_idx - down.len();
    let mut scale: Vec<f64> = down.into_iter().rev().collect();
    scale.push(0.0);
    scale.extend(up);
    profile.scale = scale;

    let s_prime = |y: f64| profile.s_prime(y);
    let s_at_r = integrate_improper(s_prime, c, cs.r, SingularEnds::RIGHT, cfg)?;
    let s_at_ell = integrate_improper(s_prime, cs.ell, c, SingularEnds::LEFT, cfg)?;
    profile.s_at_r = s_at_r;
    // ∫_ell^c s' = s(c) - s(ell) = -s(ell)
    profile.s_at_ell = negate(s_at_ell);
    Ok(profile)
}

fn negate(mut v: IntegrabilityVerdict) -> IntegrabilityVerdict {
    v.value = v.value.map(|x| -x);
    v.evidence.iter_mut().for_each(|e| e.1 = -e.1);
    v
}

impl ScaleProfile {
    pub fn coefficients(&self) -> &CoefficientSet {
        &self.cs
    }

    pub fn classifier(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn grid_len(&self) -> usize {
        self.nodes.len()
    }

    pub fn s_at(&self, side: Boundary) -> &IntegrabilityVerdict {
        match side {
            Boundary::Ell => &self.s_at_ell,
            Boundary::R => &self.s_at_r,
        }
    }

    fn rate(&self, x: f64) -> Result<f64, QuadError> {
        Ok(self.cs.log_density_rate(x)?)
    }

    // index of the node nearest to y
    fn anchor(&self, y: f64) -> usize {
        let idx = self.nodes.partition_point(|&n| n <= y);
        if idx == 0 {
            0
        } else if idx == self.nodes.len() {
            idx - 1
        } else if (y - self.nodes[idx - 1]) <= (self.nodes[idx] - y) {
            idx - 1
        } else {
            idx
        }
    }

    // ∫_a^b of the rate; one panel when it is accurate enough.
    fn local_rate_integral(&self, a: f64, b: f64) -> Result<f64, QuadError> {
        if a == b {
            return Ok(0.0);
        }
        let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
        let mut g = |x| self.rate(x);
        let panel = gk15(&mut g, lo, hi)?;
        let est = if panel.error <= LOCAL_TOL * panel.value.abs().max(1.0) {
            panel
        } else if lo > 0.0 && hi > 16.0 * lo {
            let h = |u: f64| -> Result<f64, QuadError> {
                let x = u.exp();
                Ok(self.rate(x)? * x)
            };
            integrate(h, lo.ln(), hi.ln(), LOCAL_TOL)?
        } else if hi < 0.0 && lo < 16.0 * hi {
            let h = |u: f64| -> Result<f64, QuadError> {
                let x = -u.exp();
                Ok(self.rate(x)? * -x)
            };
            integrate(h, (-hi).ln(), (-lo).ln(), LOCAL_TOL)?
        } else {
            integrate(g, lo, hi, LOCAL_TOL)?
        };
        Ok(sign * est.value)
    }

    /// `I(y) = ∫_c^y 2μ/σ²`.
    pub fn log_density(&self, y: f64) -> Result<f64, QuadError> {
        if !self.cs.contains(y) {
            return Err(QuadError::InvalidInterval { a: self.cs.ell, b: y });
        }
        let k = self.anchor(y);
        Ok(self.log_density[k] + self.local_rate_integral(self.nodes[k], y)?)
    }

    /// `I(z) - I(y)`, integrated directly when the two points share a cell.
    pub fn log_density_increment(&self, y: f64, z: f64) -> Result<f64, QuadError> {
        let (ky, kz) = (self.anchor(y), self.anchor(z));
        if ky == kz || ky.abs_diff(kz) == 1 {
            return self.local_rate_integral(y, z);
        }
        Ok(self.log_density(z)? - self.log_density(y)?)
    }

    /// `s'(y) = exp(-I(y))`.
    pub fn s_prime(&self, y: f64) -> Result<f64, QuadError> {
        let v = (-self.log_density(y)?).exp();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(overflow("s'", y))
        }
    }

    fn integrate_s_prime_cell(&self, anchor: usize, a: f64, b: f64) -> Result<f64, QuadError> {
        let base = self.nodes[anchor];
        let i0 = self.log_density[anchor];
        let g = |y: f64| -> Result<f64, QuadError> {
            let v = (-(i0 + self.local_rate_integral(base, y)?)).exp();
            if v.is_finite() { Ok(v) } else { Err(overflow("s'", y)) }
        };
        Ok(integrate(g, a, b, LOCAL_TOL)?.value)
    }

    /// `s(x) = ∫_c^x s'(y) dy`.
    pub fn s(&self, x: f64) -> Result<f64, QuadError> {
        if !self.cs.contains(x) {
            return Err(QuadError::InvalidInterval { a: self.cs.ell, b: x });
        }
        let scale_hi = self.scale_lo + self.scale.len() - 1;
        // anchor on the c side of x so the table bounds the result
        let k = if x >= self.cs.c {
            self.nodes.partition_point(|&n| n <= x) - 1
        } else {
            self.nodes.partition_point(|&n| n < x)
        };
        let k = k.clamp(self.scale_lo, scale_hi);
        let base = self.nodes[k];
        let s0 = self.scale[k - self.scale_lo];
        let (lo, hi, sign) = if x >= base { (base, x, 1.0) } else { (x, base, -1.0) };
        let tail = integrate(|y| self.s_prime(y), lo, hi, LOCAL_TOL)?;
        let mut v = s0 + sign * tail.value;
        let next = if sign > 0.0 { k + 1 } else { k.wrapping_sub(1) };
        if next >= self.scale_lo && next <= scale_hi {
            let s1 = self.scale[next - self.scale_lo];
            v = v.clamp(s0.min(s1), s0.max(s1));
        }
        if v.is_finite() { Ok(v) } else { Err(overflow("s", x)) }
    }

    fn inner_length(&self, y: f64) -> f64 {
        let reach = y.abs().max(1.0);
        match self.rate(y) {
            Ok(q) if q != 0.0 => (1.0 / q.abs()).min(reach),
            _ => reach,
        }
    }

    /// `(s(r) - s(y)) / s'(y)` toward `R`, `(s(y) - s(ell)) / s'(y)` toward `Ell`.
    ///
    /// Meaningful only when `s` is finite at that endpoint.
    pub fn scale_ratio(&self, y: f64, side: Boundary) -> Result<f64, QuadError> {
        let i_y = self.log_density(y)?;
        let ky = self.anchor(y);
        let kernel = |z: f64| -> Result<f64, QuadError> {
            let kz = self.anchor(z);
            let delta = if ky.abs_diff(kz) <= 1 {
                self.local_rate_integral(y, z)?
            } else {
                self.log_density(z)? - i_y
            };
            let v = (-delta).exp();
            if v.is_finite() { Ok(v) } else { Err(overflow("s'(z)/s'(y)", z)) }
        };
        let end = self.cs.endpoint(side);
        let res = match (side, end.is_finite()) {
            (Boundary::R, true) => tanh_sinh(|z, _, _| kernel(z), y, end, INNER_TOL)?,
            (Boundary::Ell, true) => tanh_sinh(|z, _, _| kernel(z), end, y, INNER_TOL)?,
            (Boundary::R, false) => tanh_sinh_to_infinity(kernel, y, self.inner_length(y), 1.0, INNER_TOL)?,
            (Boundary::Ell, false) => tanh_sinh_to_infinity(kernel, y, self.inner_length(y), -1.0, INNER_TOL)?,
        };
        Ok(res.estimate.value)
    }

    /// `s'(z) ∫_c^z w(y)/s'(y) dy` (absolute orientation) for the nested test-function form.
    pub fn nested_density(
        &self,
        z: f64,
        weight: &dyn Fn(f64) -> Result<f64, QuadError>,
    ) -> Result<f64, QuadError> {
        let c = self.cs.c;
        if z == c {
            return Ok(0.0);
        }
        let i_z = self.log_density(z)?;
        let g = |y: f64| -> Result<f64, QuadError> {
            let v = (self.log_density(y)? - i_z).exp() * weight(y)?;
            if v.is_finite() { Ok(v) } else { Err(overflow("nested", y)) }
        };
        let (lo, hi) = if z > c { (c, z) } else { (z, c) };
        Ok(integrate(g, lo, hi, INNER_TOL)?.value)
    }
}

/// `v(endpoint)` when `b_squared` is absent, `v_X(endpoint)` otherwise.
pub fn test_function_limit(
    profile: &ScaleProfile,
    b_squared: Option<&Expression>,
    side: Boundary,
) -> Result<IntegrabilityVerdict, FellerError> {
    let cs = profile.coefficients();
    let cfg = profile.classifier();
    let weight = |y: f64| -> Result<f64, QuadError> {
        let b2 = match b_squared {
            Some(e) => e.evaluate(y)?,
            None => 1.0,
        };
        let s = cs.sigma.evaluate(y)?;
        Ok(ratio_checked(2.0 * b2, s * s, y)?)
    };
    let (a, b, ends) = match side {
        Boundary::R => (cs.c, cs.r, SingularEnds::RIGHT),
        Boundary::Ell => (cs.ell, cs.c, SingularEnds::LEFT),
    };
    match profile.s_at(side).status {
        Status::Finite | Status::Indeterminate => {
            let g = |y: f64| Ok(profile.scale_ratio(y, side)? * weight(y)?);
            Ok(integrate_improper(g, a, b, ends, cfg)?)
        }
        Status::Infinite => {
            let g = |z: f64| profile.nested_density(z, &weight);
            let nested = integrate_improper(g, a, b, ends, cfg);
            match nested {
                Ok(v) if v.status == Status::Infinite => Ok(v),
                other => {
                    // v(x) >= |s(x) - s(x1)| * ∫_c^{x1} w/s' for x beyond x1,
                    // so an infinite scale limit forces v = ∞.
                    let mut v = profile.s_at(side).clone();
                    if let Ok(n) = other {
                        v.divergence_exponent = n.divergence_exponent.or(v.divergence_exponent);
                        if !n.evidence.is_empty() {
                            v.evidence = n.evidence;
                        }
                    }
                    v.status = Status::Infinite;
                    v.value = None;
                    v.error_estimate = None;
                    Ok(v)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Tri {
    True,
    False,
    Indeterminate,
}

impl Tri {
    pub fn from_status_finite(s: Status) -> Tri {
        match s {
            Status::Finite => Tri::True,
            Status::Infinite => Tri::False,
            Status::Indeterminate => Tri::Indeterminate,
        }
    }

    pub fn and(self, other: Tri) -> Tri {
        match (self, other) {
            (Tri::False, _) | (_, Tri::False) => Tri::False,
            (Tri::True, Tri::True) => Tri::True,
            _ => Tri::Indeterminate,
        }
    }

    pub fn or(self, other: Tri) -> Tri {
        match (self, other) {
            (Tri::True, _) | (_, Tri::True) => Tri::True,
            (Tri::False, Tri::False) => Tri::False,
            _ => Tri::Indeterminate,
        }
    }

    pub fn not(self) -> Tri {
        match self {
            Tri::True => Tri::False,
            Tri::False => Tri::True,
            Tri::Indeterminate => Tri::Indeterminate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExplosionStatus {
    NoExplosionAs,
    ExplodesWithPositiveProb,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplosionReport {
    pub status: ExplosionStatus,
    pub ell_attainable: Tri,
    pub r_attainable: Tri,
}

/// Feller's test: no explosion almost surely iff `v(ell) = v(r) = ∞`.
pub fn feller_test(v_ell: &IntegrabilityVerdict, v_r: &IntegrabilityVerdict) -> ExplosionReport {
    let ell_attainable = Tri::from_status_finite(v_ell.status);
    let r_attainable = Tri::from_status_finite(v_r.status);
    let status = match (v_ell.status, v_r.status) {
        (Status::Indeterminate, _) | (_, Status::Indeterminate) => ExplosionStatus::Indeterminate,
        (Status::Infinite, Status::Infinite) => ExplosionStatus::NoExplosionAs,
        _ => ExplosionStatus::ExplodesWithPositiveProb,
    };
    ExplosionReport { status, ell_attainable, r_attainable }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Certainty {
    Certain,
    NotCertain,
    Indeterminate,
}

/// Sufficient conditions for `P(ζ^X < ∞) = 1`:
/// (a) `v_X(r), v_X(ell) < ∞`; (b) `v_X(r) < ∞, s(ell) = -∞`; (c) `v_X(ell) < ∞, s(r) = ∞`.
pub fn certain_explosion(
    profile: &ScaleProfile,
    vx_ell: &IntegrabilityVerdict,
    vx_r: &IntegrabilityVerdict,
) -> Certainty {
    let vr = Tri::from_status_finite(vx_r.status);
    let vl = Tri::from_status_finite(vx_ell.status);
    let s_ell_infinite = Tri::from_status_finite(profile.s_at_ell.status).not();
    let s_r_infinite = Tri::from_status_finite(profile.s_at_r.status).not();
    let any = vr.and(vl).or(vr.and(s_ell_infinite)).or(vl.and(s_r_infinite));
    match any {
        Tri::True => Certainty::Certain,
        Tri::False => Certainty::NotCertain,
        Tri::Indeterminate => Certainty::Indeterminate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(mu: &str, sigma: &str, ell: f64, r: f64, x0: f64, c: f64) -> CoefficientSet {
        CoefficientSet::new(
            Expression::parse(mu).unwrap(),
            Expression::parse(sigma).unwrap(),
            ell,
            r,
            x0,
            Some(c),
        )
        .unwrap()
    }

    const INF: f64 = f64::INFINITY;

    #[test]
    fn interval_checks() {
        let mu = Expression::parse("0").unwrap();
        let sigma = Expression::parse("1").unwrap();
        assert!(CoefficientSet::new(mu.clone(), sigma.clone(), 1.0, 0.0, 0.5, None).is_err());
        assert!(CoefficientSet::new(mu.clone(), sigma.clone(), 0.0, 1.0, 2.0, None).is_err());
        let c = CoefficientSet::new(mu.clone(), sigma.clone(), 0.0, 2.0, 0.3, None).unwrap();
        assert_eq!(c.c, 1.0);
        let c = CoefficientSet::new(mu, sigma, 0.0, INF, 0.3, None).unwrap();
        assert_eq!(c.c, 0.3);
    }

    #[test]
    fn brownian_motion_passes() {
        let report = validate_conditions(&cs("0", "1", -INF, INF, 0.0, 0.0), None);
        assert!(report.all_pass(), "{report:?}");
    }

    #[test]
    fn interior_zero_of_sigma() {
        let report = validate_conditions(&cs("0", "x", -1.0, 1.0, 0.5, 0.5), None);
        let entry = &report.entries[0];
        assert_eq!(entry.status, CheckStatus::Fail);
        assert!(entry.location.unwrap().abs() < 1e-12);
    }

    #[test]
    fn bessel_drift_locally_integrable() {
        let report = validate_conditions(&cs("(3-1)/(2*x)", "1", 0.0, INF, 1.0, 1.0), None);
        assert!(report.all_pass(), "{report:?}");
    }

    #[test]
    fn underflowing_weight_passes() {
        let b = Expression::parse("sqrt(exp(-x))").unwrap();
        let report = validate_conditions(&cs("1", "1", -INF, INF, 0.0, 0.0), Some(&b));
        assert!(report.all_pass(), "{report:?}");
        let scan = scan_probe_grid(|x| Expression::parse("x").unwrap().evaluate(x), -INF, INF);
        assert!(matches!(scan, ProbeScan::Fail { .. }));
    }

    #[test]
    fn interior_pole_fails() {
        let report = validate_conditions(&cs("1/x", "1", -1.0, 1.0, 0.5, 0.5), None);
        assert!(!report.all_pass());
        let b = Expression::parse("x").unwrap();
        let report = validate_conditions(&cs("0", "1", -1.0, 1.0, 0.5, 0.5), Some(&b));
        assert!(!report.all_pass());
    }

    #[test]
    fn brownian_scale_is_identity() {
        let p = scale_profile(&cs("0", "1", -INF, INF, 0.0, 0.0), 1e-9).unwrap();
        for x in [-3.0, -0.5, 0.0, 0.7, 12.0] {
            assert!((p.s(x).unwrap() - x).abs() < 1e-10);
        }
        assert_eq!(p.s_at_r.status, Status::Infinite);
        assert_eq!(p.s_at_ell.status, Status::Infinite);
    }

    #[test]
    fn drifted_scale() {
        let p = scale_profile(&cs("1", "1", -INF, INF, 0.0, 0.0), 1e-9).unwrap();
        for x in [-2.0, 0.3, 4.0] {
            let exact = (1.0 - (-2.0 * x as f64).exp()) / 2.0;
            assert!((p.s(x).unwrap() - exact).abs() < 1e-9);
        }
        assert_eq!(p.s_at_r.status, Status::Finite);
        assert!((p.s_at_r.value.unwrap() - 0.5).abs() < 1e-8);
        assert_eq!(p.s_at_ell.status, Status::Infinite);
    }

    #[test]
    fn scale_ratio_drifted() {
        let p = scale_profile(&cs("1", "1", -INF, INF, 0.0, 0.0), 1e-9).unwrap();
        for y in [-3.0, 0.0, 5.0, 200.0] {
            assert!((p.scale_ratio(y, Boundary::R).unwrap() - 0.5).abs() < 1e-9, "y={y}");
        }
    }

    #[test]
    fn test_functions_drifted_bm() {
        let p = scale_profile(&cs("1", "1", -INF, INF, 0.0, 0.0), 1e-9).unwrap();
        let v_r = test_function_limit(&p, None, Boundary::R).unwrap();
        assert_eq!(v_r.status, Status::Infinite);
        let b2 = Expression::parse("exp(-x)").unwrap();
        let vx_r = test_function_limit(&p, Some(&b2), Boundary::R).unwrap();
        assert_eq!(vx_r.status, Status::Finite);
        assert!((vx_r.value.unwrap() - 1.0).abs() < 1e-7, "{vx_r:?}");
        let v_ell = test_function_limit(&p, None, Boundary::Ell).unwrap();
        assert_eq!(v_ell.status, Status::Infinite);
    }

    #[test]
    fn feller_and_certainty() {
        let p = scale_profile(&cs("0", "1", -INF, INF, 0.0, 0.0), 1e-9).unwrap();
        let v_r = test_function_limit(&p, None, Boundary::R).unwrap();
        let v_ell = test_function_limit(&p, None, Boundary::Ell).unwrap();
        assert_eq!(feller_test(&v_ell, &v_r).status, ExplosionStatus::NoExplosionAs);
        assert_eq!(certain_explosion(&p, &v_ell, &v_r), Certainty::NotCertain);
    }

    #[test]
    fn bessel_three_scale() {
        let p = scale_profile(&cs("1/x", "1", 0.0, INF, 1.0, 1.0), 1e-9).unwrap();
        assert_eq!(p.s(1.0).unwrap(), 0.0);
        assert!((p.s_prime(1.0).unwrap() - 1.0).abs() < 1e-14);
        for x in [0.1, 0.5, 2.0, 10.0, 50.0] {
            assert!((p.s(x).unwrap() - (1.0 - 1.0 / x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(p.s_at_r.status, Status::Finite);
        assert_eq!(p.s_at_ell.status, Status::Infinite);
    }

    #[test]
    fn cir_feller_condition() {
        for (s2, attainable) in [(1.5, false), (1.9, false), (2.1, true), (2.5, true)] {
            let sigma = format!("sqrt({s2}*x)");
            let p = scale_profile(&cs("1-x", &sigma, 0.0, INF, 1.0, 1.0), 1e-9).unwrap();
            let v = test_function_limit(&p, None, Boundary::Ell).unwrap();
            assert_eq!(v.is_finite(), attainable, "sigma^2={s2}: {v:?}");
            assert_ne!(v.status, Status::Indeterminate);
        }
    }

    #[test]
    fn reflected_bm_hits_zero() {
        let p = scale_profile(&cs("0", "1", 0.0, INF, 1.0, 1.0), 1e-9).unwrap();
        let v_ell = test_function_limit(&p, None, Boundary::Ell).unwrap();
        let v_r = test_function_limit(&p, None, Boundary::R).unwrap();
        assert_eq!(v_ell.status, Status::Finite);
        assert!((v_ell.value.unwrap() - 1.0).abs() < 1e-7);
        let report = feller_test(&v_ell, &v_r);
        assert_eq!(report.status, ExplosionStatus::ExplodesWithPositiveProb);
        assert_eq!(report.ell_attainable, Tri::True);
    }

    #[test]
    fn unit_weight_matches_plain_test_function() {
        let p = scale_profile(&cs("1/x", "1", 0.0, INF, 1.0, 1.0), 1e-9).unwrap();
        let one = Expression::parse("1").unwrap();
        for side in [Boundary::Ell, Boundary::R] {
            let a = test_function_limit(&p, None, side).unwrap();
            let b = test_function_limit(&p, Some(&one), side).unwrap();
            assert_eq!(a.status, b.status);
            if let (Some(x), Some(y)) = (a.value, b.value) {
                let budget = 2.0 * (a.error_estimate.unwrap() + b.error_estimate.unwrap());
                assert!((x - y).abs() <= budget.max(1e-12));
            }
        }
    }

    #[test]
    fn reference_point_invariance() {
        let base = cs("1-x", "sqrt(2.5*x)", 0.0, INF, 1.0, 1.0);
        let b2 = Expression::parse("x").unwrap();
        let statuses = |c: f64| {
            let p = scale_profile(&base.with_reference(c).unwrap(), 1e-9).unwrap_or_else(|e| panic!("c={c}: {e}"));
            let mut out = vec![p.s_at_ell.status, p.s_at_r.status];
            for side in [Boundary::Ell, Boundary::R] {
                out.push(test_function_limit(&p, None, side).unwrap().status);
                out.push(test_function_limit(&p, Some(&b2), side).unwrap().status);
            }
            out
        };
        assert_eq!(statuses(1.0), statuses(0.3));
        assert_eq!(statuses(1.0), statuses(4.0));
    }

    #[test]
    fn monotone_on_probe_grid() {
        let p = scale_profile(&cs("1", "1", -INF, INF, 0.0, 0.0), 1e-9).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..2000 {
            let x = probe_point(-30.0, 30.0, (i as f64 + 0.5) / 2000.0);
            assert!(p.s_prime(x).unwrap() > 0.0);
            let s = p.s(x).unwrap();
            assert!(s >= prev, "x={x} s={s:e} prev={prev:e}");
            prev = s;
        }
    }

    #[test]
    fn bound_serde_round_trip() {
        let c = cs("0", "1", -INF, INF, 0.0, 0.0);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"-inf\"") && text.contains("\"inf\""));
        let back: CoefficientSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn tri_logic() {
        assert_eq!(Tri::True.and(Tri::Indeterminate), Tri::Indeterminate);
        assert_eq!(Tri::False.and(Tri::Indeterminate), Tri::False);
        assert_eq!(Tri::True.or(Tri::Indeterminate), Tri::True);
        assert_eq!(Tri::False.or(Tri::Indeterminate), Tri::Indeterminate);
    }
}
