use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{icl_curve, icl_slope, memory_rsd, steps_to_goal, success_rate, Bucket, EvalConfig, EvalError, Rollout};

pub const REPORT_FILE: &str = "eval_report.json";
pub const ICL_FILE: &str = "icl_curve.csv";
pub const NORMS_FILE: &str = "memory_norms.csv";
pub const TASKS_FILE: &str = "tasks.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclSummary {
    pub bucket_width: usize,
    pub buckets: Vec<BucketRow>,
    pub slope: Option<f64>,
    pub first_rate: Option<f64>,
    pub last_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub start: usize,
    pub count: usize,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub burn_in: usize,
    pub mean_norm: f64,
    /// Mean over environments of the per-rollout RSD.
    pub rsd: Option<f64>,
    pub rsd_per_env: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub train_mode: String,
    pub state_mode: String,
    pub checkpoint: String,
    pub config_hash: String,
    pub n_envs: usize,
    pub max_steps: usize,
    pub task_cap: usize,
    pub n_tasks: usize,
    pub n_successes: usize,
    pub n_truncated: usize,
    pub success_rate: f64,
    pub steps_to_goal: f64,
    /// Mean shortest-path length over the same tasks.
    pub optimal_steps: f64,
    pub icl: IclSummary,
    pub memory: MemorySummary,
    pub config: String,
}

/// Who was evaluated and under which configuration.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub policy: String,
    pub train_mode: String,
    pub checkpoint: String,
    pub config: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn build(ro: &Rollout, cfg: &EvalConfig, meta: ReportMeta) -> Result<EvalReport, EvalError> {
        let buckets: Vec<Bucket> = icl_curve(&ro.tasks, cfg.bucket_width, cfg.max_steps);
        let populated: Vec<f64> = buckets.iter().filter_map(|b| b.success_rate).collect();
        let rsd_per_env: Vec<Option<f64>> = ro.norms.iter().map(|t| memory_rsd(t, cfg.burn_in).ok()).collect();
        let defined: Vec<f64> = rsd_per_env.iter().flatten().copied().collect();
        let all: Vec<f64> = ro.norms.iter().flat_map(|t| t.iter().skip(cfg.burn_in)).copied().collect();
        Ok(EvalReport {
            policy: meta.policy,
            train_mode: meta.train_mode,
            state_mode: cfg.state_mode.name().into(),
            checkpoint: meta.checkpoint,
            config_hash: meta.config_hash,
            n_envs: ro.norms.len(),
            max_steps: cfg.max_steps,
            task_cap: cfg.task_cap,
            n_tasks: ro.tasks.len(),
            n_successes: ro.tasks.iter().filter(|t| t.success).count(),
            n_truncated: ro.tasks.iter().filter(|t| t.truncated).count(),
            success_rate: success_rate(&ro.tasks)?,
            steps_to_goal: steps_to_goal(&ro.tasks, cfg.task_cap)?,
            optimal_steps: ro.tasks.iter().map(|t| t.shortest as f64).sum::<f64>() / ro.tasks.len() as f64,
            icl: IclSummary {
                bucket_width: cfg.bucket_width,
                slope: icl_slope(&buckets),
                first_rate: populated.first().copied(),
                last_rate: populated.last().copied(),
                buckets: buckets
                    .iter()
                    .map(|b| BucketRow {
                        start: b.start,
                        count: b.count,
                        success_rate: b.success_rate,
                    })
                    .collect(),
            },
            memory: MemorySummary {
                burn_in: cfg.burn_in,
                mean_norm: if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 },
                rsd: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                rsd_per_env,
            },
            config: meta.config,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<EvalReport, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Config(format!("bad report: {e}")))
    }

    pub fn load(path: &Path) -> Result<EvalReport, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        Self::from_json(&text)
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<(), EvalError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    w.write_record(header).map_err(|e| io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

/// Write the JSON report and its three CSV companions into `dir`.
pub fn write_outputs(dir: &Path, report: &EvalReport, ro: &Rollout) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let p = dir.join(REPORT_FILE);
    std::fs::write(&p, report.to_json()).map_err(|e| io(&p, e))?;
    write_csv(
        &dir.join(ICL_FILE),
        &["bucket_start", "count", "success_rate"],
        report.icl.buckets.iter().map(|b| {
            vec![
                b.start.to_string(),
                b.count.to_string(),
                b.success_rate.map(|r| r.to_string()).unwrap_or_default(),
            ]
        }),
    )?;
    write_csv(
        &dir.join(NORMS_FILE),
        &["env", "step", "frobenius_norm"],
        ro.norms.iter().enumerate().flat_map(|(e, trace)| {
            trace
                .iter()
                .enumerate()
                .map(move |(t, n)| vec![e.to_string(), t.to_string(), n.to_string()])
        }),
    )?;
    write_csv(
        &dir.join(TASKS_FILE),
        &["env", "ordinal", "goal_id", "start_step", "steps", "success", "truncated", "shortest"],
        ro.tasks.iter().map(|t| {
            vec![
                t.env.to_string(),
                t.ordinal.to_string(),
                t.goal_id.to_string(),
                t.start_step.to_string(),
                t.steps.to_string(),
                (t.success as u8).to_string(),
                (t.truncated as u8).to_string(),
                t.shortest.to_string(),
            ]
        }),
    )
}
