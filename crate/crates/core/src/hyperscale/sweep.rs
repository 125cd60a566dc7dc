//! Running budget grids and turning them into frontier and improvement tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::baselines::PolicyKind;
use crate::kvcache::ReadLedger;

use super::tasks::run_chain;
use super::{avg_improvement, majority, pareto_extract, BudgetConfig, FrontierPoint, Improvement, ScaleError, TaskSuite};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    KvReads,
    PeakTokens,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::KvReads, Axis::PeakTokens];

    pub fn name(self) -> &'static str {
        match self {
            Axis::KvReads => "kv_reads",
            Axis::PeakTokens => "peak_tokens",
        }
    }
}

/// A method and the configurations it is run at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub policy: PolicyKind,
    pub configs: Vec<BudgetConfig>,
}

/// Outcome of one method at one configuration and seed.
#[derive(Clone, Debug)]
pub struct SweepRecord {
    pub method: String,
    pub config: BudgetConfig,
    pub seed: u64,
    /// Mean over task instances of the W-chain merged decode reads.
    pub kv_reads: f64,
    /// Mean over task instances of the W-chain merged peak residency.
    pub peak_tokens: f64,
    /// Fraction of task instances whose majority answer is correct.
    pub score: f64,
    pub chain_failures: usize,
    /// Merged ledger of each task instance.
    pub ledgers: Vec<ReadLedger>,
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: String,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "CR")]
    pub cr: f64,
    pub seed: u64,
    pub axis: Axis,
    pub budget: f64,
    pub score: f64,
}

impl SweepRecord {
    pub fn points(&self) -> [SweepPoint; 2] {
        Axis::ALL.map(|axis| SweepPoint {
            method: self.method.clone(),
            l: self.config.l,
            w: self.config.w,
            cr: self.config.cr,
            seed: self.seed,
            axis,
            budget: match axis {
                Axis::KvReads => self.kv_reads,
                Axis::PeakTokens => self.peak_tokens,
            },
            score: self.score,
        })
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs every configuration of `spec` for every seed over the task suite.
/// Chain errors are counted in the record and score as wrong answers.
pub fn sweep(suite: &TaskSuite, spec: &SweepSpec, seeds: &[u64]) -> Result<Vec<SweepRecord>, ScaleError> {
    suite.validate()?;
    let mut out = Vec::new();
    for cfg in &spec.configs {
        cfg.validate()?;
        if spec.policy == PolicyKind::Vanilla && cfg.cr != 1.0 {
            return Err(ScaleError::Config(format!("vanilla runs need CR = 1 (got {cfg})")));
        }
        for &seed in seeds {
            let mut correct = 0usize;
            let mut failures = 0usize;
            let mut ledgers = Vec::new();
            for &kind in &suite.tasks {
                for index in 0..suite.instances_per_task {
                    let inst = suite.instance(kind, index, seed);
                    let mut answers = Vec::new();
                    let mut merged: Option<ReadLedger> = None;
                    for chain in 0..cfg.w {
                        match run_chain(suite, &inst, spec.policy, cfg, seed ^ ((index as u64) << 20), chain) {
                            Ok(o) => {
                                if o.failed.is_some() {
                                    failures += 1;
                                }
                                if let Some(a) = o.answer {
                                    answers.push(a);
                                }
                                merged = Some(match merged {
                                    None => o.ledger,
                                    Some(m) => m.merge(&o.ledger)?,
                                });
                            }
                            Err(e @ ScaleError::Config(_)) => return Err(e),
                            Err(_) => failures += 1,
                        }
                    }
                    if majority(&answers).is_ok_and(|a| a == inst.answer) {
                        correct += 1;
                    }
                    ledgers.push(merged.unwrap_or_default());
                }
            }
            let n = ledgers.len();
            out.push(SweepRecord {
                method: spec.policy.name().to_string(),
                config: *cfg,
                seed,
                kv_reads: mean(ledgers.iter().map(ReadLedger::reads_tokens)),
                peak_tokens: mean(ledgers.iter().map(ReadLedger::peak_tokens)),
                score: correct as f64 / n as f64,
                chain_failures: failures,
                ledgers,
            });
        }
    }
    Ok(out)
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<(), ScaleError> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p).map_err(|e| ScaleError::Table(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_sweep_jsonl<W: Write>(points: &[SweepPoint], mut w: W) -> Result<(), ScaleError> {
    for p in points {
        let line = serde_json::to_string(p).map_err(|e| ScaleError::Table(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepPoint>, ScaleError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| ScaleError::Table(e.to_string())))
        .collect()
}

/// One frontier point of one method on one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub method: String,
    pub axis: Axis,
    pub budget: f64,
    pub score: f64,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "CR")]
    pub cr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImprovementRow {
    pub axis: Axis,
    pub method_a: String,
    pub method_b: String,
    pub improvement: Improvement,
}

type Key = (String, Axis);

/// Seed-averaged points grouped by method and axis.
fn grouped(points: &[SweepPoint]) -> BTreeMap<Key, Vec<FrontierPoint>> {
    let mut cells: BTreeMap<(String, Axis, usize, usize, u64), Vec<&SweepPoint>> = BTreeMap::new();
    for p in points {
        cells
            .entry((p.method.clone(), p.axis, p.l, p.w, p.cr.to_bits()))
            .or_default()
            .push(p);
    }
    let mut out: BTreeMap<Key, Vec<FrontierPoint>> = BTreeMap::new();
    for ((method, axis, l, w, cr), ps) in cells {
        let cfg = BudgetConfig {
            l,
            w,
            cr: f64::from_bits(cr),
        };
        let budget = mean(ps.iter().map(|p| p.budget));
        let score = mean(ps.iter().map(|p| p.score));
        out.entry((method.clone(), axis))
            .or_default()
            .push(FrontierPoint::new(budget, score, cfg, method));
    }
    out
}

pub fn frontier_rows(points: &[SweepPoint]) -> Vec<FrontierRow> {
    grouped(points)
        .into_iter()
        .flat_map(|((method, axis), pts)| {
            pareto_extract(&pts).into_iter().map(move |p| FrontierRow {
                method: method.clone(),
                axis,
                budget: p.budget,
                score: p.accuracy,
                l: p.config.l,
                w: p.config.w,
                cr: p.config.cr,
            })
        })
        .collect()
}

/// `avg_improvement` of every ordered pair of distinct methods, per axis.
pub fn improvement_rows(points: &[SweepPoint]) -> Vec<ImprovementRow> {
    let groups = grouped(points);
    let frontiers: BTreeMap<&Key, Vec<FrontierPoint>> = groups.iter().map(|(k, v)| (k, pareto_extract(v))).collect();
    let mut rows = Vec::new();
    for axis in Axis::ALL {
        let methods: Vec<&String> = frontiers.keys().filter(|k| k.1 == axis).map(|k| &k.0).collect();
        for a in &methods {
            for b in &methods {
                if a == b {
                    continue;
                }
                let fa = &frontiers[&((*a).clone(), axis)];
                let fb = &frontiers[&((*b).clone(), axis)];
                rows.push(ImprovementRow {
                    axis,
                    method_a: (*a).clone(),
                    method_b: (*b).clone(),
                    improvement: avg_improvement(fa, fb),
                });
            }
        }
    }
    rows
}
