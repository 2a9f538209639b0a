//! Module ablations: the same seeded stream trained under several module
//! toggles, summarised as a per-task table.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::{ExperimentConfig, Modules};
use crate::error::{PdpError, Result};
use crate::harness::Experiment;
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablate {
    Ppg,
    SharedPool,
    Ddl,
    /// Every row of the module table.
    All,
}

impl FromStr for Ablate {
    type Err = PdpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppg" => Ok(Self::Ppg),
            "shared-pool" => Ok(Self::SharedPool),
            "ddl" => Ok(Self::Ddl),
            "all" => Ok(Self::All),
            _ => Err(PdpError::Config(format!("unknown module {s:?}; expected ppg, shared-pool, ddl or all"))),
        }
    }
}

const FULL: Modules = Modules { shared_pool: true, ppg: true, ddl: true };

/// Toggle sets to compare, baseline first. Single-module ablations pair the
/// full model with the module switched off.
pub fn variants(a: Ablate) -> Vec<Modules> {
    match a {
        Ablate::Ppg => vec![Modules { ppg: false, ..FULL }, FULL],
        Ablate::SharedPool => vec![Modules { shared_pool: false, ..FULL }, FULL],
        Ablate::Ddl => vec![Modules { ddl: false, ..FULL }, FULL],
        Ablate::All => vec![
            Modules { shared_pool: false, ppg: false, ddl: false },
            Modules { shared_pool: true, ppg: false, ddl: true },
            Modules { shared_pool: false, ppg: true, ddl: false },
            Modules { shared_pool: true, ppg: true, ddl: false },
            FULL,
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub modules: Modules,
    /// One report per seed, in seed order.
    pub reports: Vec<MetricsReport>,
}

impl AblationRow {
    /// Mean over seeds of `pick` applied to task `t` (zero-based).
    pub fn mean(&self, t: usize, pick: impl Fn(&crate::metrics::TaskMetrics) -> f64) -> f64 {
        self.reports.iter().map(|r| pick(&r.tasks[t])).sum::<f64>() / self.reports.len() as f64
    }

    /// Mean final-task mAP over previous classes.
    pub fn final_previous(&self) -> f64 {
        let last = self.reports[0].tasks.len() - 1;
        self.mean(last, |m| m.map.previous.unwrap_or(f64::NAN))
    }
}

/// Trains every variant on every seed, one thread per run. Each run derives
/// its streams from its own seed only, so results do not depend on
/// scheduling.
pub fn run(base: &ExperimentConfig, variants: &[Modules], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, ExperimentConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(v, m)| {
            seeds.iter().map(move |&seed| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.modules = *m;
                (v, cfg)
            })
        })
        .collect();
    let results: Vec<Result<MetricsReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(_, cfg)| s.spawn(move || Experiment::new(cfg.clone())?.run(None)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation run panicked")).collect()
    });
    let mut rows: Vec<AblationRow> =
        variants.iter().map(|m| AblationRow { modules: *m, reports: Vec::new() }).collect();
    for ((v, _), r) in jobs.iter().zip(results) {
        rows[*v].reports.push(r?);
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

/// Fixed-width table in percent: task 1 reports current classes only,
/// later tasks previous, current and all.
pub fn table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first().and_then(|r| r.reports.first()) else {
        return out;
    };
    let stages = first.tasks.len();
    write!(out, "PP SP PPG DDL |   T1 C").unwrap();
    for t in 2..=stages {
        write!(out, " |   T{t} P   T{t} C   T{t} A").unwrap();
    }
    out.push('\n');
    for row in rows {
        let m = row.modules;
        write!(out, " {}  {}   {}   {}  | {:6.1}", mark(true), mark(m.shared_pool), mark(m.ppg), mark(m.ddl && m.shared_pool), 100.0 * row.mean(0, |x| x.map.current))
            .unwrap();
        for t in 1..stages {
            write!(
                out,
                " | {:6.1} {:6.1} {:6.1}",
                100.0 * row.mean(t, |x| x.map.previous.unwrap_or(f64::NAN)),
                100.0 * row.mean(t, |x| x.map.current),
                100.0 * row.mean(t, |x| x.map.all)
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// Long-form per-run data: `shared_pool,ppg,ddl,seed,task,metric,value`.
pub fn to_csv(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut out = String::from("shared_pool,ppg,ddl,seed,task,metric,value\n");
    for row in rows {
        let m = row.modules;
        for (seed, report) in seeds.iter().zip(&row.reports) {
            for line in report.to_csv().lines().skip(1) {
                writeln!(out, "{},{},{},{seed},{line}", m.shared_pool, m.ppg, m.ddl).unwrap();
            }
        }
    }
    out
}
