use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use super::{EvalError, EvalReport};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolSummary {
    pub train_mode: String,
    pub n_reports: usize,
    pub success_rate: f64,
    pub steps_to_goal: f64,
    pub icl_slope: Option<f64>,
    /// Last populated bucket rate minus the first.
    pub icl_gain: Option<f64>,
    pub rsd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub protocols: Vec<ProtocolSummary>,
    /// Stateful minus stateless.
    pub delta_success_rate: Option<f64>,
    pub delta_steps_to_goal: Option<f64>,
    /// Stateful over stateless.
    pub rsd_ratio: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed-averaged comparison of reports grouped by training protocol.
pub fn analyze(reports: &[EvalReport]) -> Result<Analysis, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Contract("nothing to analyze".into()));
    }
    let mut groups: BTreeMap<(u8, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        let rank = match r.train_mode.as_str() {
            "stateful" => 0,
            "stateless" => 1,
            _ => 2,
        };
        groups.entry((rank, r.train_mode.clone())).or_default().push(r);
    }
    let protocols: Vec<ProtocolSummary> = groups
        .into_iter()
        .map(|((_, mode), rs)| {
            let n = rs.len() as f64;
            ProtocolSummary {
                train_mode: mode,
                n_reports: rs.len(),
                success_rate: rs.iter().map(|r| r.success_rate).sum::<f64>() / n,
                steps_to_goal: rs.iter().map(|r| r.steps_to_goal).sum::<f64>() / n,
                icl_slope: mean_of(rs.iter().map(|r| r.icl.slope)),
                icl_gain: mean_of(rs.iter().map(|r| Some(r.icl.last_rate? - r.icl.first_rate?))),
                rsd: mean_of(rs.iter().map(|r| r.memory.rsd)),
            }
        })
        .collect();
    let find = |m: &str| protocols.iter().find(|p| p.train_mode == m);
    let (sf, sl) = (find("stateful"), find("stateless"));
    let both = sf.zip(sl);
    Ok(Analysis {
        delta_success_rate: both.map(|(a, b)| a.success_rate - b.success_rate),
        delta_steps_to_goal: both.map(|(a, b)| a.steps_to_goal - b.steps_to_goal),
        rsd_ratio: both.and_then(|(a, b)| Some(a.rsd? / b.rsd?)),
        protocols,
    })
}

fn cell(x: Option<f64>, prec: usize) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.prec$}"))
}

impl Analysis {
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "| metric |");
        for p in &self.protocols {
            let _ = write!(s, " {} (n={}) |", p.train_mode, p.n_reports);
        }
        s.push('\n');
        s.push_str("|---|");
        s.push_str(&"---|".repeat(self.protocols.len()));
        s.push('\n');
        let rows: [(&str, Box<dyn Fn(&ProtocolSummary) -> String>); 5] = [
            ("Success rate", Box::new(|p| format!("{:.3}", p.success_rate))),
            ("Steps to goal", Box::new(|p| format!("{:.1}", p.steps_to_goal))),
            ("ICL slope (per 1k steps)", Box::new(|p| cell(p.icl_slope.map(|x| x * 1000.0), 4))),
            ("ICL last - first bucket", Box::new(|p| cell(p.icl_gain, 3))),
            ("Memory RSD", Box::new(|p| cell(p.rsd, 4))),
        ];
        for (name, f) in rows.iter() {
            let _ = write!(s, "| {name} |");
            for p in &self.protocols {
                let _ = write!(s, " {} |", f(p));
            }
            s.push('\n');
        }
        s.push('\n');
        s.push_str("| comparison | value |\n|---|---|\n");
        let _ = writeln!(s, "| ΔSR (stateful - stateless) | {} |", cell(self.delta_success_rate, 3));
        let _ = writeln!(s, "| ΔSteps (stateful - stateless) | {} |", cell(self.delta_steps_to_goal, 1));
        let _ = writeln!(s, "| RSD ratio (stateful / stateless) | {} |", cell(self.rsd_ratio, 3));
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("analysis serializes");
        s.push('\n');
        s
    }
}
