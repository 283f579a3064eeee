//! Files written into run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::decomp::{trivial_flags, DecompositionParams, LogEntry};
use crate::error::{Error, Result};
use crate::mdp::{GridworldSpec, Move, TabularMdp};
use crate::planner::DeterministicPolicy;
use crate::policy::Policy;

pub const LOG_FILE: &str = "log.csv";
pub const RESULT_FILE: &str = "result.json";
pub const DECOMPOSITION_FILE: &str = "decomposition.csv";
pub const PARTITION_FILE: &str = "partition.txt";

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Column names of the training log, in file order.
pub fn log_header(n_factors: usize) -> Vec<String> {
    let mut header: Vec<String> = ["step", "j_disentangled", "j_nontrivial", "j_independent"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_factors).map(|i| format!("diag_{i}")));
    header.push("avg_saturation".into());
    header.extend((0..n_factors).map(|i| format!("trivial_{i}")));
    header
}

/// One row per logged step. `mdp` must carry the training discount.
pub fn write_log_csv(path: &Path, history: &[LogEntry], mdp: &TabularMdp) -> Result<()> {
    let n = history.first().map_or(0, |e| e.report.value_matrix.len());
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|entry| {
            let report = &entry.report;
            let mut row = vec![
                entry.step.to_string(),
                report.j_disentangled.to_string(),
                report.j_nontrivial.to_string(),
                report.j_independent.to_string(),
            ];
            row.extend(report.diagonal_values().iter().map(f64::to_string));
            row.push(entry.avg_saturation.map_or(String::new(), |v| v.to_string()));
            row.extend(trivial_flags(report, mdp).iter().map(|&t| u8::from(t).to_string()));
            row
        })
        .collect();
    write_rows(path, &log_header(n), &rows)
}

/// Per-state shares and argmax owner.
pub fn write_decomposition_csv(
    path: &Path,
    params: &DecompositionParams,
    spec: &GridworldSpec,
    mdp: &TabularMdp,
) -> Result<()> {
    let n = params.n_factors();
    let mut header: Vec<String> = ["state", "x", "y", "reward"].iter().map(|s| s.to_string()).collect();
    header.extend((0..n).map(|i| format!("share_{i}")));
    header.push("argmax".into());
    let rows: Vec<Vec<String>> = (0..mdp.n_states())
        .map(|s| {
            let (x, y) = spec.cell_of(s);
            let mut row = vec![s.to_string(), x.to_string(), y.to_string(), mdp.reward()[s].to_string()];
            row.extend(params.shares(s).iter().map(f64::to_string));
            row.push(params.argmax_factor(s).to_string());
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Plain (P2) grayscale image, one pixel per cell.
fn pgm(spec: &GridworldSpec, shade: impl Fn(usize) -> u8) -> String {
    let mut out = format!("P2\n{} {}\n255\n", spec.width, spec.height);
    for y in 0..spec.height {
        let line: Vec<String> = (0..spec.width)
            .map(|x| shade(spec.state_of(x, y)).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn text_grid(spec: &GridworldSpec, cell: impl Fn(usize) -> String) -> String {
    let mut out = String::new();
    for y in 0..spec.height {
        let line: Vec<String> = (0..spec.width).map(|x| cell(spec.state_of(x, y))).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Per-factor share images and the argmax partition, as `.pgm` rasters and
/// `.txt` grids. Cells without reward stay unshaded (`.` in text).
pub fn emit_heatmaps(
    params: &DecompositionParams,
    spec: &GridworldSpec,
    mdp: &TabularMdp,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let reward = mdp.reward();
    let n = params.n_factors();
    let mut written = Vec::new();
    for i in 0..n {
        let image = pgm(spec, |s| {
            if reward[s] == 0.0 {
                0
            } else {
                (params.share(s, i) * 255.0).round() as u8
            }
        });
        let grid = text_grid(spec, |s| {
            if reward[s] == 0.0 {
                "  .  ".into()
            } else {
                format!("{:.3}", params.share(s, i))
            }
        });
        for (name, body) in [(format!("factor_{i}.pgm"), image), (format!("factor_{i}.txt"), grid)] {
            let path = out_dir.join(name);
            write_text(&path, &body)?;
            written.push(path);
        }
    }
    let width = (n.max(1) - 1).to_string().len();
    let partition = text_grid(spec, |s| {
        if reward[s] == 0.0 {
            format!("{:>width$}", ".")
        } else {
            format!("{:>width$}", params.argmax_factor(s))
        }
    });
    let image = pgm(spec, |s| {
        if reward[s] == 0.0 {
            0
        } else {
            ((params.argmax_factor(s) + 1) * 255 / n) as u8
        }
    });
    for (name, body) in [
        (PARTITION_FILE.to_string(), partition),
        ("partition.pgm".to_string(), image),
    ] {
        let path = out_dir.join(name);
        write_text(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a partition grid back into `None` (no reward) or owner labels.
pub fn parse_partition(text: &str) -> Vec<Vec<Option<usize>>> {
    text.lines()
        .map(|line| line.split_whitespace().map(|tok| tok.parse().ok()).collect())
        .collect()
}

pub fn action_glyph(action: usize) -> char {
    match Move::from_index(action) {
        Some(mv) => mv.glyph(),
        None => char::from_digit(action as u32 % 36, 36).unwrap_or('?'),
    }
}

/// One arrow grid per policy.
pub fn emit_policy_maps(
    policies: &[DeterministicPolicy],
    spec: &GridworldSpec,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (i, pi) in policies.iter().enumerate() {
        if pi.n_states() != spec.n_cells() {
            return Err(Error::LengthMismatch {
                left: pi.n_states(),
                right: spec.n_cells(),
            });
        }
        let grid = text_grid(spec, |s| action_glyph(pi.action(s)).to_string());
        let path = out_dir.join(format!("policy_{i}.txt"));
        write_text(&path, &grid)?;
        written.push(path);
    }
    Ok(written)
}

/// Fraction of cells from which following `policy`'s arrows, without
/// teleports, reaches one of `targets` within `n_cells` moves.
pub fn arrow_reachability(spec: &GridworldSpec, policy: &DeterministicPolicy, targets: &[usize]) -> f64 {
    let n = spec.n_cells();
    let reached = (0..n)
        .filter(|&start| {
            let mut s = start;
            for _ in 0..=n {
                if targets.contains(&s) {
                    return true;
                }
                match Move::from_index(policy.action(s)) {
                    Some(mv) => s = spec.step(s, mv),
                    None => return false,
                }
            }
            false
        })
        .count();
    reached as f64 / n as f64
}
