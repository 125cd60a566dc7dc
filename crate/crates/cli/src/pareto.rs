use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use dms_core::baselines::PolicyKind;
use dms_core::hyperscale::{
    frontier_rows, improvement_rows, read_sweep_csv, sweep, write_sweep_csv, write_sweep_jsonl, BudgetConfig,
    ScaleError, SweepPoint, SweepSpec, TaskSuite,
};

use crate::{config_err, create_dir, load_config, write_file, write_json, CliError, Common};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoConfig {
    pub seed: u64,
    /// Seeds of the sweep; `[seed]` when absent.
    pub seeds: Option<Vec<u64>>,
    /// Existing sweep table; the sweep is run inline when absent.
    pub sweep_csv: Option<PathBuf>,
    pub suite: TaskSuite,
    pub methods: Vec<SweepSpec>,
}

fn grid(cr: f64) -> Vec<BudgetConfig> {
    let mut out = Vec::new();
    for l in [96, 128, 192, 256] {
        for w in [1, 3, 5, 9] {
            out.push(BudgetConfig { l, w, cr });
        }
    }
    out
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: None,
            sweep_csv: None,
            suite: TaskSuite::default(),
            methods: vec![
                SweepSpec {
                    policy: PolicyKind::Vanilla,
                    configs: grid(1.0),
                },
                SweepSpec {
                    policy: PolicyKind::Dms,
                    configs: grid(4.0),
                },
            ],
        }
    }
}

fn scale_error(e: ScaleError) -> CliError {
    match e {
        ScaleError::Numerics(n) => CliError::Numerical(n.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn csv_bytes(rows: impl FnOnce(&mut Vec<u8>) -> Result<(), ScaleError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    rows(&mut buf).map_err(scale_error)?;
    Ok(buf)
}

fn table<T: Serialize>(header: &str, rows: &[T], fields: impl Fn(&T) -> String) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&fields(r));
        s.push('\n');
    }
    s
}

pub(crate) fn run(common: &Common) -> Result<(), CliError> {
    let mut cfg: ParetoConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.seeds = None;
    }
    if let Some(p) = &common.policy {
        let kind: PolicyKind = p.parse().map_err(config_err)?;
        for m in cfg.methods.iter_mut().filter(|m| m.policy != PolicyKind::Vanilla) {
            m.policy = kind;
        }
    }
    if common.profile.is_some() {
        return Err(CliError::Config("pareto takes no --profile".into()));
    }
    let seeds = cfg.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    if seeds.is_empty() {
        return Err(CliError::Config("seeds must not be empty".into()));
    }
    let points: Vec<SweepPoint> = match &cfg.sweep_csv {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| CliError::Config(format!("sweep_csv {}: {e}", path.display())))?;
            read_sweep_csv(f).map_err(scale_error)?
        }
        None => {
            cfg.suite.validate().map_err(scale_error)?;
            for m in &cfg.methods {
                for c in &m.configs {
                    c.validate().map_err(scale_error)?;
                }
            }
            let mut pts = Vec::new();
            for m in &cfg.methods {
                for rec in sweep(&cfg.suite, m, &seeds).map_err(scale_error)? {
                    pts.extend(rec.points());
                }
            }
            pts
        }
    };
    let out = common.out_dir();
    create_dir(&out)?;
    if cfg.sweep_csv.is_none() {
        write_file(&out.join("sweep.csv"), csv_bytes(|b| write_sweep_csv(&points, b))?)?;
        write_file(&out.join("sweep.jsonl"), csv_bytes(|b| write_sweep_jsonl(&points, b))?)?;
    }
    let frontier = frontier_rows(&points);
    let improvements = improvement_rows(&points);
    let frontier_csv = table("method,axis,budget,score,L,W,CR", &frontier, |r| {
        format!("{},{},{},{},{},{},{}", r.method, r.axis.name(), r.budget, r.score, r.l, r.w, r.cr)
    });
    let improvement_csv = table("axis,method_a,method_b,improvement", &improvements, |r| {
        format!("{},{},{},{}", r.axis.name(), r.method_a, r.method_b, r.improvement)
    });
    write_file(&out.join("frontier.csv"), &frontier_csv)?;
    write_file(&out.join("improvement.csv"), &improvement_csv)?;
    write_json(
        &out.join("run.json"),
        &serde_json::json!({"command": "pareto", "seed": cfg.seed, "seeds": seeds, "config": cfg}),
    )?;
    print!("{improvement_csv}");
    Ok(())
}
