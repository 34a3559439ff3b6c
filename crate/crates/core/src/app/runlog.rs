//! CSV training logs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ppo::UpdateLog;

pub const CMAES_HEADER: &str = "generation,best_fitness,median_fitness,p25_fitness,p75_fitness,sigma,elapsed_seconds";
pub const PPO_HEADER: &str = "update_index,mean_episode_score,policy_loss,value_loss,entropy,grad_norm";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationRow {
    pub generation: u64,
    pub best_fitness: f64,
    pub median_fitness: f64,
    pub p25_fitness: f64,
    pub p75_fitness: f64,
    /// Step size the generation was sampled with.
    pub sigma: f64,
    pub elapsed_seconds: f64,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl GenerationRow {
    pub fn from_fitness(generation: u64, fitness: &[f64], sigma: f64, elapsed_seconds: f64) -> Self {
        let mut sorted = fitness.to_vec();
        sorted.sort_by(f64::total_cmp);
        GenerationRow {
            generation,
            best_fitness: *sorted.last().expect("non-empty population"),
            median_fitness: percentile(&sorted, 0.5),
            p25_fitness: percentile(&sorted, 0.25),
            p75_fitness: percentile(&sorted, 0.75),
            sigma,
            elapsed_seconds,
        }
    }
}

pub fn format_cmaes_log(rows: &[GenerationRow]) -> String {
    let mut s = String::from(CMAES_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:e},{:.3}",
            r.generation, r.best_fitness, r.median_fitness, r.p25_fitness, r.p75_fitness, r.sigma, r.elapsed_seconds
        )
        .unwrap();
    }
    s
}

pub fn format_ppo_log(rows: &[UpdateLog]) -> String {
    let mut s = String::from(PPO_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{:e},{:e},{:e},{:e}",
            r.update_index, r.mean_episode_score, r.policy_loss, r.value_loss, r.entropy, r.grad_norm
        )
        .unwrap();
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("unexpected header `{0}`")]
    Header(String),
    #[error("line {0}: {1}")]
    Row(usize, String),
}

pub fn write_log(path: &Path, text: &str) -> Result<(), LogError> {
    fs::write(path, text).map_err(|e| LogError::Io(path.display().to_string(), e))
}

pub fn read_cmaes_log(path: &Path) -> Result<Vec<GenerationRow>, LogError> {
    let text = fs::read_to_string(path).map_err(|e| LogError::Io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CMAES_HEADER {
        return Err(LogError::Header(header.to_string()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(LogError::Row(i + 2, format!("{} fields", f.len())));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|e| LogError::Row(i + 2, e.to_string()));
            Ok(GenerationRow {
                generation: f[0].parse().map_err(|e: std::num::ParseIntError| LogError::Row(i + 2, e.to_string()))?,
                best_fitness: num(1)?,
                median_fitness: num(2)?,
                p25_fitness: num(3)?,
                p75_fitness: num(4)?,
                sigma: num(5)?,
                elapsed_seconds: num(6)?,
            })
        })
        .collect()
}

/// The log without its wall-clock column, for reproducibility checks.
pub fn without_elapsed(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}
