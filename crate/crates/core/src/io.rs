//! Run artifacts: CSV tables, occupancy heatmaps and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const HEATMAP_SIZE: usize = 40;

/// Occupancy counts on a `size x size` grid over `[-h, h]^2`; row 0 is the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    size: usize,
    counts: Vec<u64>,
}

impl Heatmap {
    pub fn from_points<I: IntoIterator<Item = [f64; 2]>>(points: I, half_side: f64, size: usize) -> Result<Self> {
        if size == 0 || !(half_side > 0.0) {
            return Err(Error::invalid("heatmap needs a positive size and extent"));
        }
        let mut counts = vec![0u64; size * size];
        let mut seen = false;
        let cell = |v: f64| {
            let c = ((v + half_side) / (2.0 * half_side) * size as f64).floor();
            (c.max(0.0) as usize).min(size - 1)
        };
        for [x, y] in points {
            let col = cell(x);
            let row = size - 1 - cell(y);
            counts[row * size + col] += 1;
            seen = true;
        }
        if !seen {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { size, counts })
    }

    pub fn from_trajectories(trajectories: &[Trajectory], half_side: f64, size: usize) -> Result<Self> {
        Self::from_points(trajectories.iter().flat_map(|t| t.points()), half_side, size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `round(255 * count / max count)`.
    pub fn levels(&self) -> Vec<u8> {
        let max = *self.counts.iter().max().unwrap_or(&1) as f64;
        self.counts
            .iter()
            .map(|&c| (255.0 * c as f64 / max).round() as u8)
            .collect()
    }

    /// Plain-text PGM (P2) with maxval 255.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.size, self.size);
        for row in self.levels().chunks(self.size) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn emit_heatmap(trajectories: &[Trajectory], half_side: f64, size: usize, path: &Path) -> Result<()> {
    let map = Heatmap::from_trajectories(trajectories, half_side, size)?;
    fs::write(path, map.to_pgm())?;
    Ok(())
}

/// Comma-separated table with a header row; floats use the shortest exact form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<String>,
}

pub enum Cell<'a> {
    Int(u64),
    Float(f64),
    Text(&'a str),
    Bool(bool),
}

impl CsvTable {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: &[Cell]) {
        assert_eq!(cells.len(), self.header.len(), "row width must match the header");
        let mut line = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            match c {
                Cell::Int(v) => write!(line, "{v}"),
                Cell::Float(v) => write!(line, "{v:?}"),
                Cell::Text(s) => {
                    assert!(!s.contains([',', '"', '\n']), "text cells are plain identifiers");
                    write!(line, "{s}")
                }
                Cell::Bool(b) => write!(line, "{b}"),
            }
            .expect("writing to a string");
        }
        self.rows.push(line);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// Everything needed to re-run a command: its arguments and the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub started_unix: u64,
    pub outputs: Vec<PathBuf>,
    /// Resolved run file (TOML), absent for commands without one.
    pub config: Option<String>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config_hash: String, seed: u64, config: Option<String>) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command,
            config_hash,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix,
            outputs: Vec::new(),
            config,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }
}
