//! Calibration targets and a derivative-free coordinate descent over
//! scenario constants.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hammer::{run_test, summarize, Comparison, HammerError, RunReport};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid target `{metric}`: {reason}")]
    InvalidTarget { metric: String, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("no scenario named `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Run(#[from] HammerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// Within `tolerance` relative of `value`.
    Approx,
    Gt,
    Ge,
    Lt,
    Le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTarget {
    pub metric: String,
    pub numerator: String,
    /// When set the target applies to `numerator / denominator`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denominator: Option<String>,
    #[serde(default = "approx")]
    pub relation: Relation,
    pub value: f64,
    pub tolerance: f64,
}

fn approx() -> Relation {
    Relation::Approx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsFile {
    #[serde(rename = "target")]
    pub targets: Vec<CalibrationTarget>,
}

impl TargetsFile {
    pub fn from_toml(text: &str) -> Result<Self, CalibrationError> {
        let t: Self = toml::from_str(text).map_err(|e| CalibrationError::Parse(e.to_string()))?;
        for x in &t.targets {
            x.validate()?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
            .map_err(|e| CalibrationError::Parse(format!("{}: {e}", path.display())))
    }
}

impl CalibrationTarget {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |reason: &str| CalibrationError::InvalidTarget {
            metric: self.metric.clone(),
            reason: reason.to_owned(),
        };
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(bad("tolerance must be > 0"));
        }
        if !self.value.is_finite() {
            return Err(bad("value must be finite"));
        }
        if self.relation == Relation::Approx && self.value == 0.0 {
            return Err(bad("approx targets need a non-zero value"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match &self.denominator {
            Some(d) => format!("{}/{}:{}", self.numerator, d, self.metric),
            None => format!("{}:{}", self.numerator, self.metric),
        }
    }

    pub fn observe(&self, c: &Comparison) -> Option<f64> {
        match &self.denominator {
            Some(d) => c.ratio(&self.numerator, d, &self.metric),
            None => c
                .summaries
                .iter()
                .find(|s| s.name == self.numerator)?
                .metric(&self.metric),
        }
    }

    /// Relative shortfall: 0 when an inequality holds, `|v/value - 1|` for
    /// approximate targets.
    pub fn error(&self, v: f64) -> f64 {
        if v.is_nan() {
            return f64::INFINITY;
        }
        let scale = self.value.abs().max(f64::MIN_POSITIVE);
        let short = |d: f64| if d > 0.0 { d / scale } else { 0.0 };
        match self.relation {
            Relation::Approx => (v / self.value - 1.0).abs(),
            Relation::Gt | Relation::Ge => short(self.value - v),
            Relation::Lt | Relation::Le => short(v - self.value),
        }
    }

    pub fn passes(&self, v: f64) -> bool {
        match self.relation {
            Relation::Approx => self.error(v) <= self.tolerance,
            Relation::Gt => v > self.value,
            Relation::Ge => v >= self.value,
            Relation::Lt => v < self.value,
            Relation::Le => v <= self.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: String,
    pub observed: f64,
    pub wanted: f64,
    pub relation: Relation,
    pub error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub results: Vec<TargetResult>,
    pub max_error: f64,
    pub all_pass: bool,
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let rel = match r.relation {
                Relation::Approx => "≈",
                Relation::Gt => ">",
                Relation::Ge => "≥",
                Relation::Lt => "<",
                Relation::Le => "≤",
            };
            writeln!(
                f,
                "{} {:<44} {:>10.4} {rel} {:<8} err {:.4}",
                if r.pass { "PASS" } else { "FAIL" },
                r.target,
                r.observed,
                r.wanted,
                r.error
            )?;
        }
        Ok(())
    }
}

pub fn evaluate(targets: &[CalibrationTarget], c: &Comparison) -> Evaluation {
    let results: Vec<TargetResult> = targets
        .iter()
        .map(|t| {
            let v = t.observe(c).unwrap_or(f64::NAN);
            TargetResult {
                target: t.label(),
                observed: v,
                wanted: t.value,
                relation: t.relation,
                error: t.error(v),
                pass: !v.is_nan() && t.passes(v),
            }
        })
        .collect();
    Evaluation {
        max_error: results.iter().map(|r| r.error).fold(0.0, f64::max),
        all_pass: results.iter().all(|r| r.pass),
        results,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOptions {
    /// Initial multiplicative step.
    pub step: f64,
    pub min_step: f64,
    pub max_evals: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            step: 0.25,
            min_step: 1e-3,
            max_evals: 200,
        }
    }
}

/// Minimises `f` over positive parameters by trying `x·(1+s)` and
/// `x/(1+s)` one coordinate at a time, halving `s` when no move helps.
pub fn coordinate_descent(
    x0: &[f64],
    opts: &DescentOptions,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64, usize) {
    let mut x = x0.to_vec();
    let mut best = f(&x);
    let mut evals = 1;
    let mut s = opts.step;
    while !x.is_empty() && s >= opts.min_step && evals < opts.max_evals && best > 0.0 {
        let mut moved = false;
        for i in 0..x.len() {
            for factor in [1.0 + s, 1.0 / (1.0 + s)] {
                if evals >= opts.max_evals {
                    break;
                }
                let mut y = x.clone();
                y[i] *= factor;
                let v = f(&y);
                evals += 1;
                if v < best {
                    best = v;
                    x = y;
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            s /= 2.0;
        }
    }
    (x, best, evals)
}

/// A free parameter: `name` on every scenario, or `scenario:name` on one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreeParam {
    pub scenario: Option<String>,
    pub name: String,
}

impl FreeParam {
    pub fn parse(s: &str) -> Self {
        match s.split_once(':') {
            Some((sc, n)) => Self {
                scenario: Some(sc.to_owned()),
                name: n.to_owned(),
            },
            None => Self {
                scenario: None,
                name: s.to_owned(),
            },
        }
    }

    pub fn label(&self) -> String {
        match &self.scenario {
            Some(s) => format!("{s}:{}", self.name),
            None => self.name.clone(),
        }
    }

    fn applies(&self, cfg: &ScenarioConfig) -> bool {
        self.scenario.as_ref().is_none_or(|s| *s == cfg.name)
    }

    pub fn get(&self, cfgs: &[ScenarioConfig]) -> Result<f64, CalibrationError> {
        let cfg = cfgs
            .iter()
            .find(|c| self.applies(c))
            .ok_or_else(|| CalibrationError::UnknownScenario(self.scenario.clone().unwrap_or_default()))?;
        cfg.param(&self.name)
            .ok_or_else(|| CalibrationError::UnknownParam(self.name.clone()))
    }

    pub fn set(&self, cfgs: &mut [ScenarioConfig], v: f64) {
        for c in cfgs.iter_mut().filter(|c| self.applies(c)) {
            c.set_param(&self.name, v);
        }
    }
}

/// Runs every scenario (in parallel threads) and compares the reports in
/// the given order.
pub fn run_all(cfgs: &[ScenarioConfig]) -> Result<(Vec<RunReport>, Comparison), CalibrationError> {
    let results: Vec<Result<RunReport, HammerError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfgs
            .iter()
            .map(|c| s.spawn(move || run_test(c, c.seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread"))
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&RunReport> = reports.iter().collect();
    let c = summarize(&refs);
    Ok((reports, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub scenarios: Vec<ScenarioConfig>,
    pub params: Vec<(String, f64)>,
    pub evaluation: Evaluation,
    pub evals: usize,
}

/// Fits the free parameters so the targets' maximum relative error is as
/// small as possible.
pub fn calibrate(
    scenarios: &[ScenarioConfig],
    targets: &[CalibrationTarget],
    free: &[FreeParam],
    opts: &DescentOptions,
) -> Result<Fit, CalibrationError> {
    let mut cfgs = scenarios.to_vec();
    let x0 = free
        .iter()
        .map(|p| p.get(&cfgs))
        .collect::<Result<Vec<_>, _>>()?;
    let mut failure = None;
    let (x, _, evals) = coordinate_descent(&x0, opts, |x| {
        let mut trial = cfgs.clone();
        for (p, v) in free.iter().zip(x) {
            p.set(&mut trial, *v);
        }
        match run_all(&trial) {
            Ok((_, c)) => evaluate(targets, &c).max_error,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    });
    if let Some(e) = failure {
        if x == x0 {
            return Err(e);
        }
    }
    for (p, v) in free.iter().zip(&x) {
        p.set(&mut cfgs, *v);
    }
    let (_, c) = run_all(&cfgs)?;
    let evaluation = evaluate(targets, &c);
    Ok(Fit {
        params: free
            .iter()
            .map(|p| Ok((p.label(), p.get(&cfgs)?)))
            .collect::<Result<_, CalibrationError>>()?,
        scenarios: cfgs,
        evaluation,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(relation: Relation, value: f64) -> CalibrationTarget {
        CalibrationTarget {
            metric: "m".into(),
            numerator: "a".into(),
            denominator: None,
            relation,
            value,
            tolerance: 0.1,
        }
    }

    #[test]
    fn two_target_linear_toy_fits_exactly() {
        // metrics 2p and 3p with targets 4 and 6: p = 2 satisfies both
        let f = |x: &[f64]| {
            let p = x[0];
            let e1: f64 = (2.0 * p / 4.0 - 1.0).abs();
            let e2: f64 = (3.0 * p / 6.0 - 1.0).abs();
            e1.max(e2)
        };
        let opts = DescentOptions {
            step: 0.5,
            min_step: 1e-12,
            max_evals: 10_000,
        };
        let (x, err, _) = coordinate_descent(&[0.3], &opts, f);
        assert!((x[0] - 2.0).abs() < 1e-9, "{x:?}");
        assert!(err < 1e-9);
    }

    #[test]
    fn empty_parameter_list_only_evaluates() {
        let mut calls = 0;
        let (x, err, evals) = coordinate_descent(&[], &DescentOptions::default(), |_| {
            calls += 1;
            0.5
        });
        assert!(x.is_empty());
        assert_eq!((err, evals, calls), (0.5, 1, 1));
    }

    #[test]
    fn relations() {
        let t = target(Relation::Approx, 1.4);
        assert!(t.passes(1.5));
        assert!(!t.passes(1.0));
        assert!((t.error(1.54) - 0.1).abs() < 1e-12);
        let g = target(Relation::Gt, 1.0);
        assert!(g.passes(f64::INFINITY));
        assert!(!g.passes(1.0));
        assert_eq!(g.error(2.0), 0.0);
        assert!((g.error(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_tolerance_is_rejected() {
        let text = "[[target]]\nmetric = \"m\"\nnumerator = \"a\"\nvalue = 1.0\ntolerance = 0.0\n";
        assert!(matches!(
            TargetsFile::from_toml(text),
            Err(CalibrationError::InvalidTarget { .. })
        ));
        let ok = text.replace("tolerance = 0.0", "tolerance = 0.1");
        assert_eq!(TargetsFile::from_toml(&ok).unwrap().targets.len(), 1);
    }

    #[test]
    fn free_param_syntax() {
        assert_eq!(
            FreeParam::parse("hc38:slots"),
            FreeParam {
                scenario: Some("hc38".into()),
                name: "slots".into()
            }
        );
        assert_eq!(FreeParam::parse("t_disk").scenario, None);
    }
}
