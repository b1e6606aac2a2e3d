use std::collections::BTreeMap;
use std::path::Path;

use dul_core::experiments::{aggregate, SplitAggregate, UniversalityRow, UNIVERSALITY_CSV, UNIVERSALITY_JSON};
use dul_core::io::{read_csv, read_json, write_json, TrajectoryRow};
use serde::Serialize;
use serde_json::Value;

use crate::{CliError, CliResult};

const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Serialize)]
struct UniversalitySummary {
    aggregates: Vec<SplitAggregate>,
    max_abs_gap: f64,
    all_within_two_sigma: bool,
    /// Whether aggregates/universality.json agrees with the CSV; None if absent.
    matches_aggregate_file: Option<bool>,
}

#[derive(Debug, Serialize)]
struct ContractionSummary {
    trajectories: usize,
    fraction_decreasing: f64,
    fraction_decreasing_after_first: f64,
    matches_aggregate_file: Option<bool>,
}

#[derive(Debug, Default, Serialize)]
struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    universality: Option<UniversalitySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    power_law_fits: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spectra_comparison: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    contraction: Option<ContractionSummary>,
}

fn close(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= TOLERANCE * a.abs().max(1.0)
}

fn load_json(path: &Path) -> CliResult<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    read_json(path).map(Some).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn universality(dir: &Path) -> CliResult<Option<UniversalitySummary>> {
    let csv = dir.join("results").join(UNIVERSALITY_CSV);
    if !csv.exists() {
        return Ok(None);
    }
    let rows: Vec<UniversalityRow> = read_csv(&csv).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?;
    if rows.is_empty() {
        return Ok(None);
    }
    let aggregates = aggregate(&rows);
    let max_abs_gap = aggregates.iter().map(|a| a.abs_gap).fold(0.0, f64::max);
    let all_within_two_sigma = aggregates.iter().all(|a| a.within_two_sigma);
    let stored = load_json(&dir.join("aggregates").join(UNIVERSALITY_JSON))?;
    let matches_aggregate_file = stored.map(|v| {
        let recorded: Vec<SplitAggregate> = serde_json::from_value(v["aggregates"].clone()).unwrap_or_default();
        recorded.len() == aggregates.len()
            && recorded.iter().zip(&aggregates).all(|(r, a)| {
                r.split == a.split
                    && close(r.gap, a.gap)
                    && close(r.run_spread, a.run_spread)
                    && close(r.diffusion.mean, a.diffusion.mean)
                    && close(r.gmm.mean, a.gmm.mean)
                    && r.within_two_sigma == a.within_two_sigma
            })
            && v["max_abs_gap"].as_f64().is_some_and(|g| close(g, max_abs_gap))
    });
    Ok(Some(UniversalitySummary { aggregates, max_abs_gap, all_within_two_sigma, matches_aggregate_file }))
}

fn contraction(dir: &Path) -> CliResult<Option<ContractionSummary>> {
    let csv = dir.join("results").join("trajectories.csv");
    if !csv.exists() {
        return Ok(None);
    }
    let rows: Vec<TrajectoryRow> = read_csv(&csv).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?;
    let mut norms: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        norms.entry(r.trajectory_id).or_default().push((r.step, r.norm));
    }
    if norms.is_empty() {
        return Ok(None);
    }
    let (mut dec, mut total, mut dec_after, mut total_after) = (0usize, 0usize, 0usize, 0usize);
    for seq in norms.values_mut() {
        seq.sort_by_key(|&(s, _)| s);
        for (i, w) in seq.windows(2).enumerate() {
            let down = w[1].1 <= w[0].1;
            dec += down as usize;
            total += 1;
            if i > 0 {
                dec_after += down as usize;
                total_after += 1;
            }
        }
    }
    let fraction_decreasing = dec as f64 / total as f64;
    let fraction_decreasing_after_first = if total_after > 0 { dec_after as f64 / total_after as f64 } else { 1.0 };
    let stored = load_json(&dir.join("aggregates").join("concentration.json"))?;
    let matches_aggregate_file = stored.map(|v| {
        v["overall"]["fraction_decreasing"].as_f64().is_some_and(|f| close(f, fraction_decreasing))
            && v["overall"]["fraction_decreasing_after_first"]
                .as_f64()
                .is_some_and(|f| close(f, fraction_decreasing_after_first))
    });
    Ok(Some(ContractionSummary {
        trajectories: norms.len(),
        fraction_decreasing,
        fraction_decreasing_after_first,
        matches_aggregate_file,
    }))
}

fn print_table(s: &Summary) {
    if let Some(u) = &s.universality {
        println!("{:>6} {:>10} {:>10} {:>9} {:>9} {:>7}", "split", "diffusion", "gmm", "gap", "2sigma", "ok");
        for a in &u.aggregates {
            println!(
                "{:>6} {:>10.4} {:>10.4} {:>+9.4} {:>9.4} {:>7}",
                a.split,
                a.diffusion.mean,
                a.gmm.mean,
                a.gap,
                2.0 * a.run_spread,
                if a.within_two_sigma { "yes" } else { "no" }
            );
        }
        println!("max |gap| {:.4}, all within 2 sigma {}", u.max_abs_gap, u.all_within_two_sigma);
    }
    if let Some(Value::Array(fits)) = &s.power_law_fits {
        println!("{:>10} {:>11} {:>6} {:>9}", "dataset", "source", "class", "exponent");
        for f in fits {
            println!(
                "{:>10} {:>11} {:>6} {:>9.3}",
                f["dataset"].as_str().unwrap_or("?"),
                f["source"].as_str().unwrap_or("?"),
                f["class_id"].as_u64().map(|c| c.to_string()).unwrap_or_else(|| "all".into()),
                f["exponent"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }
    if let Some(c) = &s.spectra_comparison {
        if let Some(g) = c["gram"]["max_relative_gap"].as_f64() {
            println!("Gram top-k max relative gap {g:.4}");
        }
    }
    if let Some(c) = &s.contraction {
        println!(
            "contraction over {} trajectories: decreasing fraction {:.5} ({:.5} after the first step)",
            c.trajectories, c.fraction_decreasing, c.fraction_decreasing_after_first
        );
    }
}

/// Recomputes summaries from the result CSVs, prints them and writes
/// `<dir>/report.json`.
pub fn cmd_report(dir: &Path, json_only: bool) -> CliResult<()> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{}: not a directory", dir.display())));
    }
    let aggregates = dir.join("aggregates");
    let summary = Summary {
        universality: universality(dir)?,
        power_law_fits: load_json(&aggregates.join("power_law_fits.json"))?,
        spectra_comparison: load_json(&aggregates.join("spectra_comparison.json"))?,
        contraction: contraction(dir)?,
    };
    if summary.universality.is_none()
        && summary.power_law_fits.is_none()
        && summary.spectra_comparison.is_none()
        && summary.contraction.is_none()
    {
        return Err(CliError::Data(format!("{}: no results", dir.display())));
    }
    write_json(&dir.join("report.json"), &summary)?;
    if json_only {
        println!("{}", serde_json::to_string_pretty(&summary).map_err(dul_core::Error::from)?);
    } else {
        print_table(&summary);
    }
    let consistent = [
        summary.universality.as_ref().and_then(|u| u.matches_aggregate_file),
        summary.contraction.as_ref().and_then(|c| c.matches_aggregate_file),
    ];
    if consistent.contains(&Some(false)) {
        return Err(CliError::Data("stored aggregates disagree with the result CSVs".into()));
    }
    Ok(())
}
