//! Merges the `results.csv` of several runs into one comparison table
//! (one row per run, Old/New/All per task, in percent) plus plain x/y
//! series: All mAP by task, and final All mAP against the parameters a
//! strategy stores.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latentcl::train::{parse_csv, CsvRow, CSV_HEADER};

struct Run {
    label: String,
    rows: Vec<CsvRow>,
}

/// A run directory holds `results.csv`; a suite directory holds run
/// directories one level down.
fn collect(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("results.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if !dir.is_dir() {
        bail!("{} is not a run directory", dir.display());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.join("results.csv").is_file() {
            found.push(path);
        }
    }
    if found.is_empty() {
        bail!("no results.csv in {} or its subdirectories", dir.display());
    }
    found.sort();
    Ok(found)
}

fn load(dir: &Path) -> Result<Run> {
    let path = dir.join("results.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let strategy = rows[0].strategy.name();
    let label = if name == strategy { name } else { format!("{name}:{strategy}") };
    Ok(Run { label, rows })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn table(runs: &[Run]) -> String {
    let tasks = runs.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    let mut out = String::from("| run |");
    for t in 0..tasks {
        let _ = write!(out, " T{t} Old | T{t} New | T{t} All |");
    }
    out.push_str(" overhead params | fwd MACs | bwd MACs | buffer bytes |\n|---|");
    out.push_str(&"---|".repeat(3 * tasks + 4));
    out.push('\n');
    for r in runs {
        let _ = write!(out, "| {} |", r.label);
        for t in 0..tasks {
            match r.rows.get(t) {
                Some(row) => {
                    let _ = write!(out, " {} | {} | {} |", pct(row.old_map), pct(row.new_map), pct(row.all_map));
                }
                None => out.push_str(" | | |"),
            }
        }
        let last = r.rows.last().expect("non-empty");
        let _ = writeln!(
            out,
            " {} | {} | {} | {} |",
            last.overhead_params, last.fwd_macs, last.bwd_macs, last.buffer_bytes
        );
    }
    out
}

fn all_by_task(runs: &[Run]) -> String {
    let tasks = runs.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    let mut out = String::from("task");
    for r in runs {
        let _ = write!(out, "\t{}", r.label);
    }
    out.push('\n');
    for t in 0..tasks {
        let _ = write!(out, "{t}");
        for r in runs {
            let v = r.rows.get(t).and_then(|row| row.all_map).map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Stored parameters are the model plus whatever the strategy keeps on top.
fn map_vs_params(runs: &[Run]) -> String {
    let mut out = String::from("run\tstored_params\tall_map\n");
    for r in runs {
        let last = r.rows.last().expect("non-empty");
        let v = last.all_map.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{}\t{}\t{v}", r.label, last.total_params + last.overhead_params);
    }
    out
}

pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut runs = Vec::new();
    for d in dirs {
        for run in collect(d)? {
            runs.push(load(&run)?);
        }
    }
    let md = table(&runs);
    print!("{md}");
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut merged = format!("run,{CSV_HEADER}\n");
        for r in &runs {
            for row in &r.rows {
                let _ = writeln!(merged, "{},{}", r.label, row.to_csv_line());
            }
        }
        for (name, text) in [
            ("comparison.md", md),
            ("merged.csv", merged),
            ("all_map_by_task.tsv", all_by_task(&runs)),
            ("map_vs_params.tsv", map_vs_params(&runs)),
        ] {
            let path = out.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        eprintln!("wrote comparison.md, merged.csv and plot series to {}", out.display());
    }
    Ok(())
}
