//! JSON documents written by the CLI. Their schemas live in `schemas/`.

use kbse::barrier::Certificate;
use kbse::kbse_loop::{EvalReport, RunOutput, ShieldCounts};
use serde::Serialize;

pub const REPORT_VERSION: u32 = 1;

/// Published pendulum results, printed next to ours for comparison only.
#[derive(Debug, Clone, Serialize)]
pub struct Reference {
    pub safety_probability: f64,
    pub violation_p90_pct: f64,
    pub avg_reward: f64,
    pub avg_cost: f64,
    pub avg_length: f64,
}

pub fn reference_for(env: &str) -> Option<Reference> {
    (env == "pendulum").then_some(Reference {
        safety_probability: 0.643,
        violation_p90_pct: 81.60,
        avg_reward: -164.68,
        avg_cost: 7.8,
        avg_length: 200.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub valid: bool,
    pub vacuous: bool,
    pub delta: Option<f64>,
    pub safety_probability: Option<f64>,
    pub confidence: f64,
    pub eta: Option<f64>,
    pub nu: Option<f64>,
    pub c: Option<f64>,
    pub c_minmax: Option<f64>,
    pub b_bar: Option<f64>,
    pub epsilon: Option<f64>,
    pub zeta: f64,
    pub horizon_t: usize,
    pub statement: String,
}

impl CertificateReport {
    pub fn from_certificate(cert: &Certificate) -> Self {
        let known = cert.valid;
        let opt = |v: f64| known.then_some(v);
        Self {
            valid: cert.valid,
            vacuous: cert.vacuous,
            delta: cert.delta,
            safety_probability: cert.safety_probability,
            confidence: cert.confidence,
            eta: opt(cert.eta),
            nu: opt(cert.nu),
            c: opt(cert.c),
            c_minmax: opt(cert.c_minmax),
            b_bar: opt(cert.b_bar),
            epsilon: opt(cert.epsilon),
            zeta: cert.zeta,
            horizon_t: cert.horizon_t,
            statement: cert.statement(),
        }
    }

    pub fn missing(zeta: f64, horizon_t: usize) -> Self {
        Self {
            valid: false,
            vacuous: true,
            delta: None,
            safety_probability: None,
            confidence: 1.0 - zeta,
            eta: None,
            nu: None,
            c: None,
            c_minmax: None,
            b_bar: None,
            epsilon: None,
            zeta,
            horizon_t,
            statement: "no valid barrier: no safety guarantee".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub version: u32,
    pub env: String,
    pub seed: u64,
    pub horizon: usize,
    pub steps: usize,
    pub interrupted: bool,
    pub episodes: usize,
    pub total_violations: usize,
    /// Step below which 90% of violations occurred, as % of the horizon.
    pub violation_p90_pct: Option<f64>,
    pub mean_reward_last_10: Option<f64>,
    pub shield: ShieldCounts,
    pub skipped_updates: u64,
    pub certificate: CertificateReport,
    pub reference: Option<Reference>,
    pub wall_clock_seconds: f64,
}

impl TrainSummary {
    pub fn new(out: &RunOutput, seed: u64, zeta: f64) -> Self {
        let m = &out.metrics;
        let tail: Vec<f64> = m.episodes.iter().rev().take(10).map(|e| e.reward).collect();
        let certificate = match out.certificate() {
            Some(c) => CertificateReport::from_certificate(&c),
            None => CertificateReport::missing(zeta, out.env.spec.horizon_t),
        };
        Self {
            version: REPORT_VERSION,
            env: out.env.name().to_string(),
            seed,
            horizon: m.horizon,
            steps: m.steps,
            interrupted: out.interrupted,
            episodes: m.episodes.len(),
            total_violations: m.total_violations(),
            violation_p90_pct: m.violation_percentile_pct(90.0),
            mean_reward_last_10: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
            shield: m.shield.clone(),
            skipped_updates: m.skipped_updates,
            certificate,
            reference: reference_for(out.env.name()),
            wall_clock_seconds: m.wall_clock_seconds,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub version: u32,
    pub env: String,
    pub seed: u64,
    pub shielded: bool,
    pub certified_delta: Option<f64>,
    #[serde(flatten)]
    pub report: EvalReport,
}
