//! Zero-one law for `∫_0^ζ f(Y_u) du` on each boundary-limit event.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expression;
use crate::feller::{
    certain_explosion, feller_test, scale_profile, scan_probe_grid, test_function_limit, validate_conditions,
    Boundary, Certainty, CoefficientSet, ExplosionReport, FellerError, ProbeScan, ScaleProfile, Tri,
    ValidationReport,
};
use crate::quad::{integrate_improper, IntegrabilityVerdict, QuadError, SingularEnds, Status};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZeroOneError {
    #[error("f must be positive on J; f({x}) fails: {reason}")]
    NonPositive { x: f64, reason: String },
    #[error("standing conditions fail: {}", summarize(.0))]
    Validation(Box<ValidationReport>),
    #[error(transparent)]
    Feller(#[from] FellerError),
}

impl From<QuadError> for ZeroOneError {
    fn from(e: QuadError) -> Self {
        ZeroOneError::Feller(FellerError::Quad(e))
    }
}

fn summarize(r: &ValidationReport) -> String {
    r.failures()
        .map(|e| match e.location {
            Some(x) => format!("{} at x = {x}", e.condition),
            None => e.condition.clone(),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Which limit events are possible at one boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundaryEvents {
    /// `P(lim Y = boundary) = 0`.
    None,
    /// `Y` tends to the boundary without exploding.
    BOnly,
    /// `Y` reaches the boundary in finite time.
    COnly,
    Indeterminate,
}

impl BoundaryEvents {
    pub fn has_positive_probability(self) -> Tri {
        match self {
            BoundaryEvents::None => Tri::False,
            BoundaryEvents::BOnly | BoundaryEvents::COnly => Tri::True,
            BoundaryEvents::Indeterminate => Tri::Indeterminate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStructure {
    pub s_r_finite: Tri,
    pub s_ell_finite: Tri,
    /// `P(A) = 1` for the oscillation event A.
    pub a_certain: Tri,
    pub r_events: BoundaryEvents,
    pub ell_events: BoundaryEvents,
}

impl EventStructure {
    pub fn events(&self, side: Boundary) -> BoundaryEvents {
        match side {
            Boundary::Ell => self.ell_events,
            Boundary::R => self.r_events,
        }
    }
}

fn side_events(s_end: Status, v_end: Status) -> (Tri, BoundaryEvents) {
    match (s_end, v_end) {
        (Status::Infinite, _) => (Tri::False, BoundaryEvents::None),
        (_, Status::Finite) => (Tri::True, BoundaryEvents::COnly),
        (Status::Finite, Status::Infinite) => (Tri::True, BoundaryEvents::BOnly),
        (Status::Finite, Status::Indeterminate) => (Tri::True, BoundaryEvents::Indeterminate),
        (Status::Indeterminate, _) => (Tri::Indeterminate, BoundaryEvents::Indeterminate),
    }
}

/// Event structure from the scale limits and the test functions `v`.
///
/// `v(endpoint) < ∞` forces `s(endpoint)` finite, which settles an
/// indeterminate scale limit.
pub fn event_structure(
    profile: &ScaleProfile,
    v_ell: &IntegrabilityVerdict,
    v_r: &IntegrabilityVerdict,
) -> EventStructure {
    let (s_r_finite, r_events) = side_events(profile.s_at_r.status, v_r.status);
    let (s_ell_finite, ell_events) = side_events(profile.s_at_ell.status, v_ell.status);
    let a_certain = r_events
        .has_positive_probability()
        .not()
        .and(ell_events.has_positive_probability().not());
    EventStructure { s_r_finite, s_ell_finite, a_certain, r_events, ell_events }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventProbability {
    Zero,
    Positive,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Functional {
    ConvergesAs,
    DivergesAs,
    Vacuous,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroOneVerdict {
    pub boundary: Boundary,
    pub event_probability: EventProbability,
    pub functional: Functional,
    /// Absent when the event has probability zero.
    pub criterion_verdict: Option<IntegrabilityVerdict>,
}

/// Reject `f` unless it is positive on the probe grid of `J`.
pub fn check_positive(cs: &CoefficientSet, f: &Expression) -> Result<(), ZeroOneError> {
    match scan_probe_grid(|x| f.evaluate(x), cs.ell, cs.r) {
        ProbeScan::Signed { sign, .. } if sign > 0.0 => Ok(()),
        ProbeScan::Signed { .. } => {
            let x = cs.x0;
            Err(ZeroOneError::NonPositive { x, reason: "negative on J".into() })
        }
        ProbeScan::Fail { x, reason } => Err(ZeroOneError::NonPositive { x, reason }),
    }
}

/// Verdict at one boundary given a precomputed profile and event structure.
pub fn classify_with(
    profile: &ScaleProfile,
    events: &EventStructure,
    f: &Expression,
    side: Boundary,
) -> Result<ZeroOneVerdict, ZeroOneError> {
    let event_probability = match events.events(side).has_positive_probability() {
        Tri::False => EventProbability::Zero,
        Tri::True => EventProbability::Positive,
        Tri::Indeterminate => EventProbability::Indeterminate,
    };
    match event_probability {
        EventProbability::Zero => {
            return Ok(ZeroOneVerdict {
                boundary: side,
                event_probability,
                functional: Functional::Vacuous,
                criterion_verdict: None,
            })
        }
        EventProbability::Indeterminate => {
            return Ok(ZeroOneVerdict {
                boundary: side,
                event_probability,
                functional: Functional::Indeterminate,
                criterion_verdict: None,
            })
        }
        EventProbability::Positive => {}
    }
    let cs = profile.coefficients();
    let g = |y: f64| -> Result<f64, QuadError> {
        let s = cs.sigma.evaluate(y)?;
        Ok(profile.scale_ratio(y, side)? * f.evaluate(y)? / (s * s))
    };
    let verdict = match side {
        Boundary::R => integrate_improper(g, cs.c, cs.r, SingularEnds::RIGHT, profile.classifier())?,
        Boundary::Ell => integrate_improper(g, cs.ell, cs.c, SingularEnds::LEFT, profile.classifier())?,
    };
    let functional = match verdict.status {
        Status::Finite => Functional::ConvergesAs,
        Status::Infinite => Functional::DivergesAs,
        Status::Indeterminate => Functional::Indeterminate,
    };
    Ok(ZeroOneVerdict { boundary: side, event_probability, functional, criterion_verdict: Some(verdict) })
}

/// Verdict for `∫_0^ζ f(Y_u) du` on `{lim Y = boundary}`.
pub fn classify_functional(
    cs: &CoefficientSet,
    f: &Expression,
    side: Boundary,
    tol: f64,
) -> Result<ZeroOneVerdict, ZeroOneError> {
    check_positive(cs, f)?;
    let profile = scale_profile(cs, tol)?;
    let v_ell = test_function_limit(&profile, None, Boundary::Ell)?;
    let v_r = test_function_limit(&profile, None, Boundary::R)?;
    let events = event_structure(&profile, &v_ell, &v_r);
    classify_with(&profile, &events, f, side)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctions {
    pub v_ell: IntegrabilityVerdict,
    pub v_r: IntegrabilityVerdict,
    pub vx_ell: IntegrabilityVerdict,
    pub vx_r: IntegrabilityVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub ok: bool,
    pub contradictions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub validation: ValidationReport,
    pub s_at_ell: IntegrabilityVerdict,
    pub s_at_r: IntegrabilityVerdict,
    pub test_functions: TestFunctions,
    pub explosion_y: ExplosionReport,
    pub explosion_x: ExplosionReport,
    pub x_certain_explosion: Certainty,
    pub events: EventStructure,
    pub ell: ZeroOneVerdict,
    pub r: ZeroOneVerdict,
    pub consistency: Consistency,
}

impl BoundaryReport {
    pub fn verdict(&self, side: Boundary) -> &ZeroOneVerdict {
        match side {
            Boundary::Ell => &self.ell,
            Boundary::R => &self.r,
        }
    }

    /// True if any status in the report is indeterminate.
    pub fn has_indeterminate(&self) -> bool {
        let tf = &self.test_functions;
        [&self.s_at_ell, &self.s_at_r, &tf.v_ell, &tf.v_r, &tf.vx_ell, &tf.vx_r]
            .iter()
            .any(|v| v.status == Status::Indeterminate)
            || self.ell.functional == Functional::Indeterminate
            || self.r.functional == Functional::Indeterminate
            || self.x_certain_explosion == Certainty::Indeterminate
    }
}

/// Cross-check the per-boundary verdicts against the explosion tests for X.
///
/// `X` reaches a boundary in finite time exactly when `Y` tends to it with a
/// finite functional, so `v_X(side) < ∞` must match `CONVERGES_AS` there, and
/// certain explosion of `X` rules out any `DIVERGES_AS` or a certain event A.
pub fn consistency_check(
    events: &EventStructure,
    ell: &ZeroOneVerdict,
    r: &ZeroOneVerdict,
    tf: &TestFunctions,
    certainty: Certainty,
) -> Consistency {
    let mut contradictions = Vec::new();
    for (v, vx) in [(ell, &tf.vx_ell), (r, &tf.vx_r)] {
        let name = match v.boundary {
            Boundary::Ell => "ell",
            Boundary::R => "r",
        };
        match (v.functional, vx.status) {
            (Functional::ConvergesAs, Status::Infinite) => contradictions.push(format!(
                "{name}: functional converges on a positive-probability event but v_X({name}) = inf"
            )),
            (Functional::DivergesAs | Functional::Vacuous, Status::Finite) => contradictions.push(format!(
                "{name}: v_X({name}) < inf but the functional does not converge there"
            )),
            _ => {}
        }
    }
    if certainty == Certainty::Certain {
        for v in [ell, r] {
            if v.functional == Functional::DivergesAs {
                contradictions.push(format!(
                    "explosion of X is certain but the functional diverges at {:?}",
                    v.boundary
                ));
            }
        }
        if events.a_certain == Tri::True {
            contradictions.push("explosion of X is certain but Y oscillates almost surely".into());
        }
    }
    Consistency { ok: contradictions.is_empty(), contradictions }
}

/// Everything the classifier knows about `(μ, σ, J)` and `f`.
pub fn full_report(cs: &CoefficientSet, f: &Expression, tol: f64) -> Result<BoundaryReport, ZeroOneError> {
    check_positive(cs, f)?;
    let b = f.sqrt();
    let validation = validate_conditions(cs, Some(&b));
    if !validation.all_pass() {
        return Err(ZeroOneError::Validation(Box::new(validation)));
    }
    let profile = scale_profile(cs, tol)?;
    let tf = TestFunctions {
        v_ell: test_function_limit(&profile, None, Boundary::Ell)?,
        v_r: test_function_limit(&profile, None, Boundary::R)?,
        vx_ell: test_function_limit(&profile, Some(f), Boundary::Ell)?,
        vx_r: test_function_limit(&profile, Some(f), Boundary::R)?,
    };
    let events = event_structure(&profile, &tf.v_ell, &tf.v_r);
    let ell = classify_with(&profile, &events, f, Boundary::Ell)?;
    let r = classify_with(&profile, &events, f, Boundary::R)?;
    let certainty = certain_explosion(&profile, &tf.vx_ell, &tf.vx_r);
    let consistency = consistency_check(&events, &ell, &r, &tf, certainty);
    Ok(BoundaryReport {
        validation,
        s_at_ell: profile.s_at_ell.clone(),
        s_at_r: profile.s_at_r.clone(),
        explosion_y: feller_test(&tf.v_ell, &tf.v_r),
        explosion_x: feller_test(&tf.vx_ell, &tf.vx_r),
        x_certain_explosion: certainty,
        test_functions: tf,
        events,
        ell,
        r,
        consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const INF: f64 = f64::INFINITY;
    const TOL: f64 = 1e-9;

    fn cs(mu: &str, sigma: &str, ell: f64, r: f64, x0: f64) -> CoefficientSet {
        CoefficientSet::new(Expression::parse(mu).unwrap(), Expression::parse(sigma).unwrap(), ell, r, x0, None)
            .unwrap()
    }

    fn f(text: &str) -> Expression {
        Expression::parse(text).unwrap()
    }

    #[test]
    fn brownian_events() {
        let c = cs("0", "1", -INF, INF, 0.0);
        let p = scale_profile(&c, TOL).unwrap();
        let v_ell = test_function_limit(&p, None, Boundary::Ell).unwrap();
        let v_r = test_function_limit(&p, None, Boundary::R).unwrap();
        let e = event_structure(&p, &v_ell, &v_r);
        assert_eq!(e.r_events, BoundaryEvents::None);
        assert_eq!(e.ell_events, BoundaryEvents::None);
        assert_eq!(e.a_certain, Tri::True);
    }

    #[test]
    fn drifted_events() {
        let c = cs("1", "1", -INF, INF, 0.0);
        let p = scale_profile(&c, TOL).unwrap();
        let v_ell = test_function_limit(&p, None, Boundary::Ell).unwrap();
        let v_r = test_function_limit(&p, None, Boundary::R).unwrap();
        let e = event_structure(&p, &v_ell, &v_r);
        assert_eq!(e.r_events, BoundaryEvents::BOnly);
        assert_eq!(e.ell_events, BoundaryEvents::None);
        assert_eq!(e.a_certain, Tri::False);
    }

    #[test]
    fn reflected_bm_reaches_zero() {
        let c = cs("0", "1", 0.0, INF, 1.0);
        let p = scale_profile(&c, TOL).unwrap();
        let v_ell = test_function_limit(&p, None, Boundary::Ell).unwrap();
        let v_r = test_function_limit(&p, None, Boundary::R).unwrap();
        let e = event_structure(&p, &v_ell, &v_r);
        assert_eq!(e.ell_events, BoundaryEvents::COnly);
        assert_eq!(e.r_events, BoundaryEvents::None);
    }

    #[test]
    fn drifted_functionals() {
        let c = cs("1", "1", -INF, INF, 0.0);
        let v = classify_functional(&c, &f("exp(-x)"), Boundary::R, TOL).unwrap();
        assert_eq!(v.functional, Functional::ConvergesAs);
        let crit = v.criterion_verdict.unwrap();
        // ∫_0^∞ e^{-y}/2 dy
        assert!((crit.value.unwrap() - 0.5).abs() < 1e-7, "{crit:?}");
        let v = classify_functional(&c, &f("1"), Boundary::R, TOL).unwrap();
        assert_eq!(v.functional, Functional::DivergesAs);
        let v = classify_functional(&c, &f("1"), Boundary::Ell, TOL).unwrap();
        assert_eq!(v.functional, Functional::Vacuous);
        assert!(v.criterion_verdict.is_none());
    }

    #[test]
    fn reflected_power_family() {
        let c = cs("0", "1", 0.0, INF, 1.0);
        for (p, converges) in [(-3.0, false), (-2.5, false), (-2.0, false), (-1.9, true), (-1.0, true), (0.0, true)] {
            let v = classify_functional(&c, &f(&format!("x^({p})")), Boundary::Ell, TOL).unwrap();
            let expected = if converges { Functional::ConvergesAs } else { Functional::DivergesAs };
            assert_eq!(v.functional, expected, "p = {p}: {v:?}");
        }
    }

    #[test]
    fn nonpositive_f_rejected() {
        let c = cs("0", "1", -1.0, 1.0, 0.0);
        let err = classify_functional(&c, &f("x"), Boundary::R, TOL).unwrap_err();
        match err {
            ZeroOneError::NonPositive { x, .. } => assert!(x.abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        assert!(classify_functional(&c, &f("-1"), Boundary::R, TOL).is_err());
    }

    #[test]
    fn reports() {
        let r = full_report(&cs("0", "1", -INF, INF, 0.0), &f("1"), TOL).unwrap();
        assert_eq!(r.ell.functional, Functional::Vacuous);
        assert_eq!(r.r.functional, Functional::Vacuous);
        assert_eq!(r.events.a_certain, Tri::True);
        assert!(r.consistency.ok);

        let r = full_report(&cs("1", "1", -INF, INF, 0.0), &f("exp(-x)"), TOL).unwrap();
        assert_eq!(r.r.functional, Functional::ConvergesAs);
        assert_eq!(r.ell.functional, Functional::Vacuous);
        assert_eq!(r.x_certain_explosion, Certainty::Certain);
        assert!(r.consistency.ok, "{:?}", r.consistency);
        assert!(!r.has_indeterminate());

        let r = full_report(&cs("0", "1", 0.0, INF, 1.0), &f("1"), TOL).unwrap();
        assert_eq!(r.ell.functional, Functional::ConvergesAs);
        assert!(r.consistency.ok);
    }

    #[test]
    fn contradiction_is_flagged() {
        let c = cs("1", "1", -INF, INF, 0.0);
        let p = scale_profile(&c, TOL).unwrap();
        let tf = TestFunctions {
            v_ell: test_function_limit(&p, None, Boundary::Ell).unwrap(),
            v_r: test_function_limit(&p, None, Boundary::R).unwrap(),
            vx_ell: test_function_limit(&p, None, Boundary::Ell).unwrap(),
            vx_r: test_function_limit(&p, None, Boundary::R).unwrap(),
        };
        let events = event_structure(&p, &tf.v_ell, &tf.v_r);
        let ell = classify_with(&p, &events, &f("1"), Boundary::Ell).unwrap();
        let r = classify_with(&p, &events, &f("exp(-x)"), Boundary::R).unwrap();
        let check = consistency_check(&events, &ell, &r, &tf, Certainty::NotCertain);
        assert!(!check.ok);
    }
}
