//! `bcq report`: merges whatever artifacts a run directory holds.

use crate::artifacts::read_json;
use crate::config::ConfigError;
use crate::pipeline::{
    DeviationArtifact, SpectrumArtifact, DEVIATION_JSON, INDUCED_JSON, LEGENDRE_JSON, PARTITION_JSON, RATE_JSON, SPECTRUM_JSON,
};
use bcq_core::binding::CriticalPartition;
use bcq_core::certify::ConditionReport;
use bcq_core::inducing::InducedSystem;
use bcq_core::ldp::{LegendreReport, RateCurve};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::fmt::Write as _;
use std::path::Path;

pub const CONDITION_REPORT: &str = "condition_report.json";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InducedOverview {
    pub branches: usize,
    pub coverage: f64,
    pub explicit_coverage: f64,
    pub tail_zeta: Option<f64>,
    pub tail_r2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    /// Stage name → whether its artifacts were found.
    pub stages: Vec<(String, bool)>,
    pub certification: Option<ConditionReport>,
    pub induced: Option<InducedOverview>,
    pub spectrum: Option<SpectrumArtifact>,
    pub rates: Option<Vec<RateCurve>>,
    pub legendre: Option<LegendreReport>,
    pub deviation: Option<DeviationArtifact>,
    pub checks: Vec<Check>,
}

fn load<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<Option<T>, ConfigError> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(None);
    }
    read_json::<T>(&path).map(|a| Some(a.data)).map_err(ConfigError)
}

fn check(checks: &mut Vec<Check>, name: &str, pass: bool, detail: String) {
    checks.push(Check { name: name.into(), pass, detail });
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn build(dir: &Path) -> Result<Report, ConfigError> {
    let certification: Option<ConditionReport> = load(dir, CONDITION_REPORT)?;
    let partition: Option<CriticalPartition> = load(dir, PARTITION_JSON)?;
    let system: Option<InducedSystem> = load(dir, INDUCED_JSON)?;
    let spectrum: Option<SpectrumArtifact> = load(dir, SPECTRUM_JSON)?;
    let rates: Option<Vec<RateCurve>> = load(dir, RATE_JSON)?;
    let legendre: Option<LegendreReport> = load(dir, LEGENDRE_JSON)?;
    let deviation: Option<DeviationArtifact> = load(dir, DEVIATION_JSON)?;

    let stages = vec![
        ("certify".to_string(), certification.is_some()),
        ("partition".to_string(), partition.is_some()),
        ("induce".to_string(), system.is_some()),
        ("spectrum".to_string(), spectrum.is_some()),
        ("ldp".to_string(), rates.is_some() && legendre.is_some() && deviation.is_some()),
    ];
    if stages.iter().all(|s| !s.1) {
        return Err(ConfigError(format!("no artifacts in {}", dir.display())));
    }

    let mut checks = Vec::new();
    if let Some(c) = &certification {
        check(&mut checks, "certification", c.passed, format!("A2 {:.3e}, A3 {:.3e}, A4 {:?}", c.a2_margin, c.a3_margin, c.a4_heuristic.status));
    }
    if let Some(p) = &partition {
        let d = &p.table.deltas;
        // The bound is a large-p statement; report where it starts to hold.
        let from = (0..d.len()).rev().find(|&i| d[i] * d[i] < 5f64.powi(-(i as i32 + 1))).map_or(1, |i| i + 2);
        check(
            &mut checks,
            "δ_p table decreasing",
            strictly_decreasing(d),
            format!("{} values; δ_p² ≥ 5^(−p) for p ≥ {from}", d.len()),
        );
    }
    let induced = system.as_ref().map(|s| InducedOverview {
        branches: s.branches.len(),
        coverage: s.coverage(),
        explicit_coverage: s.explicit_coverage(),
        tail_zeta: s.tail_fit.map(|f| f.zeta),
        tail_r2: s.tail_fit.map(|f| f.r2),
    });
    if let (Some(s), Some(o)) = (&system, &induced) {
        let monotone = s.tail.windows(2).all(|w| w[1] <= w[0]);
        let fit = o.tail_zeta.is_some_and(|z| z < 1.0) && o.tail_r2.is_some_and(|r| r >= 0.9);
        check(&mut checks, "induced coverage ≥ 0.99", o.coverage >= 0.99, format!("{:.5}", o.coverage));
        check(&mut checks, "tail decay", monotone && fit, format!("ζ = {:?}, R² = {:?}", o.tail_zeta, o.tail_r2));
    }
    if let Some(sp) = &spectrum {
        let l = sp.family.acip.lyapunov;
        check(&mut checks, "acip Lyapunov exponent = log 2 ± 5e-3", (l - LN_2).abs() <= 5e-3, format!("{l:.6}"));
        for e in &sp.spectra {
            let name = &e.curve.observable;
            check(&mut checks, &format!("B(μ({name})) = 1 ± 0.05"), (e.b_at_mean - 1.0).abs() <= 0.05, format!("{:.4}", e.b_at_mean));
            check(&mut checks, &format!("{name} spectrum monotone"), e.check.monotone_ok, format!("{} violations", e.check.monotone_violations.len()));
            check(&mut checks, &format!("{name} spectrum jumps ≤ 0.1"), e.check.jump_ok, format!("max jump {:.3}", e.check.max_jump));
        }
    }
    if let Some(l) = &legendre {
        for r in &l.rows {
            check(&mut checks, &format!("Legendre Δ({}) ≤ {}", r.observable, l.threshold), r.pass, format!("{:.4}", r.delta));
        }
    }
    if let Some(rs) = &rates {
        let top = rs.iter().flat_map(|c| &c.points).map(|p| p.value).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        check(&mut checks, "F ≤ 1e-2", top <= 1e-2, format!("max {top:.4}"));
    }
    if let Some(d) = &deviation {
        let diff = (d.importance.log_measure_rate - d.rate_max_on_window).abs();
        check(
            &mut checks,
            "deviation rate vs max F on window",
            diff <= 0.05,
            format!("IS {:.4}, max F {:.4}", d.importance.log_measure_rate, d.rate_max_on_window),
        );
    }
    Ok(Report { stages, certification, induced, spectrum, rates, legendre, deviation, checks })
}

fn summary(r: &Report) -> String {
    let mut s = String::new();
    for (stage, present) in &r.stages {
        if !present {
            let _ = writeln!(s, "[stage missing] {stage}");
        }
    }
    if let Some(c) = &r.certification {
        let _ = writeln!(s, "certify a = {}: {}", c.a, c.statement);
    }
    if let Some(o) = &r.induced {
        let _ = writeln!(s, "induced map: {} branches, coverage {:.5} (explicit {:.5})", o.branches, o.coverage, o.explicit_coverage);
    }
    if let Some(sp) = &r.spectrum {
        for e in &sp.spectra {
            let _ = writeln!(
                s,
                "B(μ(φ)) ≈ 1: φ = {}, B = {:.4} at μ(φ) = {:.3e}; [c, d] = [{:.4}, {:.4}]",
                e.curve.observable, e.b_at_mean, e.acip_mean, e.curve.c_phi, e.curve.d_phi
            );
        }
    }
    if let Some(l) = &r.legendre {
        for row in &l.rows {
            let _ = writeln!(s, "Legendre {}: P_n = {:.5}, family max = {:.5}, Δ = {:.4}", row.observable, row.p_n, row.family_max, row.delta);
        }
    }
    if let Some(d) = &r.deviation {
        let _ = writeln!(
            s,
            "deviation n = {}, window [{}, {}]: plain {:.4}, importance {:.4}, covering {:.4}, max F {:.4}",
            d.plain.n, d.plain.window.0, d.plain.window.1, d.plain.log_measure_rate, d.importance.log_measure_rate, d.covering.rate, d.rate_max_on_window
        );
    }
    let _ = writeln!(s, "\nchecks:");
    for c in &r.checks {
        let _ = writeln!(s, "  {:4}  {}  ({})", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    s
}

/// Writes report.json and summary.txt into `dir` and returns the summary.
pub fn run_report(dir: &Path) -> Result<String, ConfigError> {
    if !dir.is_dir() {
        return Err(ConfigError(format!("{} is not a directory", dir.display())));
    }
    let report = build(dir)?;
    let text = summary(&report);
    let json = serde_json::to_string_pretty(&report).map_err(|e| ConfigError(e.to_string()))?;
    std::fs::write(dir.join(REPORT_JSON), json + "\n").map_err(|e| ConfigError(e.to_string()))?;
    std::fs::write(dir.join(SUMMARY_TXT), &text).map_err(|e| ConfigError(e.to_string()))?;
    Ok(text)
}
