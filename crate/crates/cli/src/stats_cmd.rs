use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use augloop_core::controller::Attempt;
use augloop_core::repository::{QueryFilter, Source};
use augloop_core::stats::{loop_report, stats_csv, EpochStats};
use augloop_core::Repository;

use crate::args::StatsArgs;
use crate::output::{resolve, summarize};

/// Rebuilds per-epoch stats from an attempts log.
pub fn stats_from_attempts(text: &str) -> Result<Vec<EpochStats>> {
    let mut by_epoch: BTreeMap<u32, Vec<Attempt>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let a: Attempt = serde_json::from_str(line).with_context(|| format!("attempts line {}", i + 1))?;
        by_epoch.entry(a.epoch).or_default().push(a);
    }
    Ok(by_epoch
        .into_iter()
        .map(|(epoch, attempts)| {
            let accuracies = attempts.iter().filter(|a| a.violations.is_empty()).filter_map(|a| a.accuracy).collect();
            let mut s = EpochStats::from_accuracies(epoch, attempts.len(), accuracies, f64::INFINITY);
            s.n_admitted = attempts.iter().filter(|a| a.admitted).count();
            s
        })
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn run(workdir: &Path, args: &StatsArgs) -> Result<()> {
    match (&args.run, &args.store) {
        (Some(run), None) => run_stats(workdir, run),
        (None, Some(store)) => store_stats(&resolve(workdir, store), args.top_k),
        (None, None) => store_stats(&workdir.join("store.jsonl"), args.top_k),
        (Some(_), Some(_)) => bail!("pass either --run or --store"),
    }
}

fn run_stats(workdir: &Path, run: &str) -> Result<()> {
    let dir = workdir.join("runs").join(run);
    let attempts_path = dir.join("attempts.jsonl");
    let text = std::fs::read_to_string(&attempts_path).with_context(|| format!("reading {}", attempts_path.display()))?;
    let stats = stats_from_attempts(&text)?;
    let csv = stats_csv(&stats);
    print!("{csv}");
    match std::fs::read_to_string(dir.join("stats.csv")) {
        Ok(saved) if saved == csv => println!("stats.csv agrees with attempts.jsonl"),
        Ok(_) => println!("warning: stats.csv differs from the recomputation above"),
        Err(_) => println!("no stats.csv in {}", dir.display()),
    }
    let report = loop_report(&stats);
    println!(
        "epochs {}  generated {}  valid {}  admitted {}",
        report.epochs, report.total_generated, report.total_valid, report.total_admitted
    );
    println!("r(epoch, mean) = {}  r(epoch, candidate) = {}", fmt_opt(report.r_epoch_means), fmt_opt(report.r_all_candidates));
    for (name, curve) in [("early", &report.early_density), ("late", &report.late_density)] {
        if let Some(c) = curve {
            println!("{name} density: mode {:.4}, bandwidth {:.4}", c.mode(), c.bandwidth);
        }
    }
    Ok(())
}

fn source_label(s: &Source) -> String {
    match s {
        Source::Brute { arity } => format!("brute/{arity}"),
        Source::Llm { .. } => "llm".into(),
    }
}

fn store_stats(path: &Path, top_k: usize) -> Result<()> {
    if !path.exists() {
        bail!("store {} not found", path.display());
    }
    let repo = Repository::open(path)?;
    let mut groups: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
    for r in repo.records() {
        let g = groups.entry(source_label(&r.source)).or_default();
        g.0 += 1;
        if r.is_error() {
            g.1 += 1;
        } else if let Some(a) = r.accuracy {
            g.2.push(a);
        }
    }
    println!("{} records in {}", repo.len(), path.display());
    println!("source    n      errors  mean    best    95% CI");
    for (label, (n, errors, accs)) in &groups {
        match summarize(accs) {
            Some(s) => println!(
                "{label:<9} {n:<6} {errors:<7} {:.4}  {:.4}  [{:.4}, {:.4}]",
                s.mean, s.max, s.ci95.0, s.ci95.1
            ),
            None => println!("{label:<9} {n:<6} {errors:<7} -       -       -"),
        }
    }
    let top = repo.query(&QueryFilter { top_k: Some(top_k), valid_only: true, ..Default::default() });
    if !top.is_empty() {
        println!("top {}:", top.len());
        for r in top {
            println!("  #{:<6} {}  {}", r.record_id, fmt_opt(r.accuracy), source_label(&r.source));
        }
    }
    Ok(())
}
