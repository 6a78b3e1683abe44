//! Time change `φ_t = ∫_0^t b²(Y_u) du` along discrete paths, and the
//! coefficients of the time-changed diffusion `X_t = Y_{T_t}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expression};
use crate::feller::CoefficientSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimeChangeError {
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("path has no accumulated clock")]
    MissingPhi,
    #[error("b² not evaluable on either side of step {step}: {source}")]
    Evaluation { step: usize, source: EvalError },
    #[error("time grid must start at 0 and increase strictly")]
    InvalidGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Exit {
    None,
    Left,
    Right,
}

/// A discretized trajectory, optionally with its accumulated clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub seed: u64,
    pub path_id: u64,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    #[serde(default)]
    pub phi: Vec<f64>,
    pub exit: Exit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_time: Option<f64>,
    pub censored: bool,
    /// Steps whose final state was clamped onto a truncation level.
    #[serde(default)]
    pub clamped: u32,
    /// Clock increments that used a one-sided value of b².
    #[serde(default)]
    pub one_sided: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl PathRecord {
    pub fn exited(&self) -> bool {
        self.exit != Exit::None
    }

    pub fn final_state(&self) -> f64 {
        *self.states.last().expect("path has at least one state")
    }

    /// `φ` at the last knot: `φ_ζ` on exited paths.
    pub fn phi_end(&self) -> Option<f64> {
        self.phi.last().copied()
    }
}

/// `X` has drift `μ/b²` and diffusion `σ/b` on the same interval.
pub fn transformed_coefficients(cs: &CoefficientSet, b: &Expression) -> CoefficientSet {
    CoefficientSet {
        mu: cs.mu.div(&b.square()),
        sigma: cs.sigma.div(b),
        ..cs.clone()
    }
}

/// Trapezoidal `φ` on the path grid.
///
/// If `b²` fails at one end of a step the other end's value is used for
/// the whole step and the record counts it in `one_sided`.
pub fn accumulate_phi(path: &PathRecord, b: &Expression) -> Result<PathRecord, TimeChangeError> {
    let b2 = |x: f64| b.evaluate(x).map(|v| v * v);
    let mut out = path.clone();
    out.phi = Vec::with_capacity(path.times.len());
    out.phi.push(0.0);
    out.one_sided = 0;
    let mut prev = b2(path.states[0]);
    let mut acc = 0.0;
    for k in 0..path.times.len().saturating_sub(1) {
        let next = b2(path.states[k + 1]);
        let dt = path.times[k + 1] - path.times[k];
        let avg = match (&prev, &next) {
            (Ok(a), Ok(c)) => 0.5 * (a + c),
            (Ok(a), Err(_)) => {
                out.one_sided += 1;
                *a
            }
            (Err(_), Ok(c)) => {
                out.one_sided += 1;
                *c
            }
            (Err(e), Err(_)) => return Err(TimeChangeError::Evaluation { step: k, source: e.clone() }),
        };
        acc += dt * avg;
        out.phi.push(acc);
        prev = next;
    }
    Ok(out)
}

/// Value of `T_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InverseTime {
    Time(f64),
    /// `t ≥ φ_ζ`: `T_t = ∞`.
    Infinite,
    /// Beyond the simulated clock of a path that did not exit.
    Censored,
}

impl InverseTime {
    pub fn time(self) -> Option<f64> {
        match self {
            InverseTime::Time(t) => Some(t),
            _ => None,
        }
    }
}

// index k with phi[k] <= t < phi[k+1], or None past the end
fn bracket(phi: &[f64], t: f64) -> Option<usize> {
    let idx = phi.partition_point(|&p| p <= t);
    if idx == 0 || idx >= phi.len() {
        None
    } else {
        Some(idx - 1)
    }
}

/// `T_t = inf{u ≥ 0 : φ_{u∧ζ} > t}` by linear interpolation of `φ`.
pub fn inverse_time(path: &PathRecord, t: f64) -> Result<InverseTime, TimeChangeError> {
    if t < 0.0 || t.is_nan() {
        return Err(TimeChangeError::NegativeTime(t));
    }
    if path.phi.len() != path.times.len() || path.phi.is_empty() {
        return Err(TimeChangeError::MissingPhi);
    }
    let last = *path.phi.last().unwrap();
    if t >= last {
        return Ok(if path.exited() {
            InverseTime::Infinite
        } else if t == last {
            InverseTime::Time(*path.times.last().unwrap())
        } else {
            InverseTime::Censored
        });
    }
    let k = bracket(&path.phi, t).expect("t inside the clock range");
    let (p0, p1) = (path.phi[k], path.phi[k + 1]);
    let (t0, t1) = (path.times[k], path.times[k + 1]);
    let w = if p1 > p0 { (t - p0) / (p1 - p0) } else { 0.0 };
    Ok(InverseTime::Time(t0 + w * (t1 - t0)))
}

fn state_at(path: &PathRecord, u: f64) -> f64 {
    let idx = path.times.partition_point(|&s| s <= u);
    if idx == 0 {
        return path.states[0];
    }
    if idx >= path.times.len() {
        return path.final_state();
    }
    let k = idx - 1;
    let (t0, t1) = (path.times[k], path.times[k + 1]);
    let w = (u - t0) / (t1 - t0);
    path.states[k] + w * (path.states[k + 1] - path.states[k])
}

/// Sample `X_t = Y_{T_t}` on `grid`.
///
/// The output clock `phi` holds `T_t`. Exited paths end with a knot at
/// `φ_ζ` carrying the exit state; grid points past the simulated clock of a
/// censored path are dropped and the output is marked censored.
pub fn time_change_path(path: &PathRecord, grid: &[f64]) -> Result<PathRecord, TimeChangeError> {
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TimeChangeError::InvalidGrid);
    }
    let mut times = Vec::with_capacity(grid.len() + 1);
    let mut states = Vec::with_capacity(grid.len() + 1);
    let mut clock = Vec::with_capacity(grid.len() + 1);
    let mut censored = path.censored;
    for &t in grid {
        match inverse_time(path, t)? {
            InverseTime::Time(u) => {
                times.push(t);
                states.push(state_at(path, u));
                clock.push(u);
            }
            InverseTime::Infinite => break,
            InverseTime::Censored => {
                censored = true;
                break;
            }
        }
    }
    let mut exit_time = None;
    if path.exited() {
        let zeta_x = path.phi_end().unwrap();
        if times.last().is_some_and(|&t| t < zeta_x) {
            times.push(zeta_x);
            states.push(path.final_state());
            clock.push(*path.times.last().unwrap());
        }
        exit_time = Some(zeta_x);
    }
    Ok(PathRecord {
        seed: path.seed,
        path_id: path.path_id,
        times,
        states,
        phi: clock,
        exit: path.exit,
        exit_time,
        censored: censored && !path.exited(),
        clamped: path.clamped,
        one_sided: path.one_sided,
        failure: path.failure.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feller::CoefficientSet;

    fn record(times: Vec<f64>, states: Vec<f64>, exit: Exit) -> PathRecord {
        PathRecord {
            seed: 1,
            path_id: 0,
            exit_time: (exit != Exit::None).then(|| *times.last().unwrap()),
            censored: exit == Exit::None,
            times,
            states,
            phi: Vec::new(),
            exit,
            clamped: 0,
            one_sided: 0,
            failure: None,
        }
    }

    fn e(text: &str) -> Expression {
        Expression::parse(text).unwrap()
    }

    fn wiggly(n: usize) -> PathRecord {
        let times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        let states = times.iter().map(|t| (7.0 * t).sin() + 0.3 * t).collect();
        record(times, states, Exit::Right)
    }

    #[test]
    fn identity_coefficients() {
        let cs = CoefficientSet::parse("1/x", "x+2", 0.0, f64::INFINITY, 1.0).unwrap();
        let out = transformed_coefficients(&cs, &e("1"));
        for k in 0..100 {
            let x = 0.01 + k as f64 * 0.37;
            assert_eq!(out.mu.evaluate(x).unwrap(), cs.mu.evaluate(x).unwrap());
            assert_eq!(out.sigma.evaluate(x).unwrap(), cs.sigma.evaluate(x).unwrap());
        }
    }

    #[test]
    fn substituted_coefficients() {
        let cs = CoefficientSet::parse("1", "1", f64::NEG_INFINITY, f64::INFINITY, 0.0).unwrap();
        let out = transformed_coefficients(&cs, &e("exp(-x/2)"));
        for x in [-2.0, 0.0, 1.5] {
            assert!((out.mu.evaluate(x).unwrap() - f64::exp(x)).abs() < 1e-12 * f64::exp(x));
            assert!((out.sigma.evaluate(x).unwrap() - f64::exp(x / 2.0)).abs() < 1e-12 * f64::exp(x));
        }
        let cs = CoefficientSet::parse("1/x", "1", 0.0, f64::INFINITY, 1.0).unwrap();
        let out = transformed_coefficients(&cs, &e("x"));
        assert!((out.mu.evaluate(2.0).unwrap() - 0.125).abs() < 1e-15);
        assert!((out.sigma.evaluate(2.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn phi_examples() {
        let p = accumulate_phi(&wiggly(50), &e("1")).unwrap();
        assert_eq!(p.phi, p.times);
        let n = 20;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        let constant = record(times.clone(), vec![0.4; n + 1], Exit::None);
        let p = accumulate_phi(&constant, &e("sqrt(2)")).unwrap();
        for (phi, t) in p.phi.iter().zip(&p.times) {
            assert!((phi - 2.0 * t).abs() < 1e-14);
        }
        let linear = record(times.clone(), times, Exit::None);
        let p = accumulate_phi(&linear, &e("sqrt(x)")).unwrap();
        assert!((p.phi_end().unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn one_sided_fallback() {
        let path = record(vec![0.0, 1.0, 2.0], vec![1.0, 4.0, -1.0], Exit::Left);
        let p = accumulate_phi(&path, &e("sqrt(x)")).unwrap();
        assert_eq!(p.one_sided, 1);
        assert_eq!(p.phi, vec![0.0, 2.5, 6.5]);
    }

    #[test]
    fn inverse_examples() {
        let p = accumulate_phi(&wiggly(64), &e("1")).unwrap();
        for t in [0.0, 0.1, 0.55, 0.99] {
            assert!((inverse_time(&p, t).unwrap().time().unwrap() - t).abs() < 1e-15);
        }
        let p = accumulate_phi(&wiggly(64), &e("exp(x)")).unwrap();
        for k in 0..p.phi.len() - 1 {
            assert_eq!(inverse_time(&p, p.phi[k]).unwrap(), InverseTime::Time(p.times[k]));
        }
        assert_eq!(inverse_time(&p, p.phi_end().unwrap()).unwrap(), InverseTime::Infinite);
        assert_eq!(inverse_time(&p, 1e9).unwrap(), InverseTime::Infinite);
        assert!(inverse_time(&p, -1.0).is_err());
        let mut last = 0.0;
        for k in 0..500 {
            let t = k as f64 * p.phi_end().unwrap() / 500.0;
            let u = inverse_time(&p, t).unwrap().time().unwrap();
            assert!(u >= last);
            last = u;
        }
    }

    #[test]
    fn censored_inverse() {
        let mut path = wiggly(10);
        path.exit = Exit::None;
        path.exit_time = None;
        path.censored = true;
        let p = accumulate_phi(&path, &e("1")).unwrap();
        assert_eq!(inverse_time(&p, 2.0).unwrap(), InverseTime::Censored);
        let grid: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
        let x = time_change_path(&p, &grid).unwrap();
        assert!(x.censored);
        assert_eq!(x.times.len(), 11);
    }

    #[test]
    fn time_change_examples() {
        let p = accumulate_phi(&wiggly(40), &e("1")).unwrap();
        let x = time_change_path(&p, &p.times[..40]).unwrap();
        assert_eq!(x.times, p.times);
        for (a, b) in x.states.iter().zip(&p.states) {
            assert!((a - b).abs() < 1e-15);
        }

        let p = accumulate_phi(&wiggly(40), &e("exp(x/2)")).unwrap();
        let grid: Vec<f64> = (0..100).map(|k| k as f64 * 0.05).collect();
        let x = time_change_path(&p, &grid).unwrap();
        assert_eq!(x.exit, p.exit);
        assert_eq!(x.exit_time, p.phi_end());
        assert_eq!(x.final_state(), p.final_state());
    }

    #[test]
    fn round_trip_converges() {
        let err = |n: usize| {
            let p = accumulate_phi(&wiggly(n), &e("exp(x/2)")).unwrap();
            let x = time_change_path(&p, &p.phi[..p.phi.len() - 1]).unwrap();
            let back = accumulate_phi(&x, &e("exp(-x/2)")).unwrap();
            back.phi
                .iter()
                .zip(&x.phi)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(200), err(400));
        assert!(coarse < 1e-3);
        assert!(fine <= 0.5 * coarse * 1.05, "{coarse} {fine}");
    }
}
