use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SchedulerKind};
use super::trainer::{run_training, FinalReport};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub scheduler: String,
    pub seed: u64,
    /// `None` when the run failed; see `error`.
    pub report: Option<FinalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteAggregate {
    pub scheduler: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_accuracy: f64,
    pub mean_accuracy_std: f64,
    /// Seeds on which this scheduler had the lowest across-class standard
    /// deviation (ties go to the scheduler listed first).
    pub wins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
    pub aggregates: Vec<SuiteAggregate>,
}

impl SuiteReport {
    pub fn row(&self, scheduler: &str, seed: u64) -> Option<&FinalReport> {
        self.rows
            .iter()
            .find(|r| r.scheduler == scheduler && r.seed == seed)
            .and_then(|r| r.report.as_ref())
    }

    pub fn table(&self) -> String {
        let mut out = String::from("scheduler\truns\tfailures\tmean_accuracy\tmean_std\twins\n");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                a.scheduler, a.runs, a.failures, a.mean_accuracy, a.mean_accuracy_std, a.wins
            );
        }
        out.push_str("\nscheduler\tseed\tmean_accuracy\taccuracy_std\tstatus\n");
        for r in &self.rows {
            match &r.report {
                Some(rep) => {
                    let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}\tok", r.scheduler, r.seed, rep.mean_accuracy, rep.accuracy_std);
                }
                None => {
                    let _ = writeln!(out, "{}\t{}\t-\t-\tfailed: {}", r.scheduler, r.seed, r.error.as_deref().unwrap_or(""));
                }
            }
        }
        out
    }
}

fn aggregate(kinds: &[SchedulerKind], seeds: &[u64], rows: &[SuiteRow]) -> Vec<SuiteAggregate> {
    let names: Vec<String> = kinds.iter().map(ToString::to_string).collect();
    let mut wins: BTreeMap<&str, usize> = BTreeMap::new();
    for &seed in seeds {
        let mut best: Option<(&str, f64)> = None;
        for n in &names {
            let Some(rep) = rows.iter().find(|r| &r.scheduler == n && r.seed == seed).and_then(|r| r.report.as_ref()) else {
                continue;
            };
            if best.is_none_or(|(_, s)| rep.accuracy_std < s) {
                best = Some((n, rep.accuracy_std));
            }
        }
        if let Some((n, _)) = best {
            *wins.entry(n).or_default() += 1;
        }
    }
    names
        .iter()
        .map(|n| {
            let ok: Vec<&FinalReport> = rows.iter().filter(|r| &r.scheduler == n).filter_map(|r| r.report.as_ref()).collect();
            let failures = rows.iter().filter(|r| &r.scheduler == n && r.report.is_none()).count();
            let k = ok.len().max(1) as f64;
            SuiteAggregate {
                scheduler: n.clone(),
                runs: ok.len(),
                failures,
                mean_accuracy: ok.iter().map(|r| r.mean_accuracy).sum::<f64>() / k,
                mean_accuracy_std: ok.iter().map(|r| r.accuracy_std).sum::<f64>() / k,
                wins: wins.get(n.as_str()).copied().unwrap_or(0),
            }
        })
        .collect()
}

/// One training run per (scheduler, seed). Runs share only `template` and
/// may execute in parallel. Failed runs are recorded, not dropped.
pub fn run_baseline_suite(template: &RunConfig, seeds: &[u64], kinds: &[SchedulerKind], out_dir: Option<&Path>) -> Result<SuiteReport> {
    if kinds.is_empty() || seeds.is_empty() {
        return Err(Error::Config("suite needs at least one scheduler and one seed".into()));
    }
    let jobs: Vec<(SchedulerKind, u64)> = kinds.iter().flat_map(|k| seeds.iter().map(move |&s| (k.clone(), s))).collect();
    let rows = par::map(&jobs, |(kind, seed)| {
        let mut cfg = template.clone();
        cfg.scheduler = kind.clone();
        cfg.seed = *seed;
        let dir = out_dir.map(|d| d.join(kind.to_string()).join(format!("seed{seed}")));
        let result = run_training(cfg, dir.as_deref());
        SuiteRow {
            scheduler: kind.to_string(),
            seed: *seed,
            error: result.as_ref().err().map(ToString::to_string),
            report: result.ok(),
        }
    });
    let report = SuiteReport {
        seeds: seeds.to_vec(),
        aggregates: aggregate(kinds, seeds, &rows),
        rows,
    };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let table = d.join("suite.tsv");
        std::fs::write(&table, report.table()).map_err(|e| Error::io(&table, e))?;
        let json = d.join("suite.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    }
    Ok(report)
}
