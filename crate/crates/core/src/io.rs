//! CSV and JSON artifacts.
//!
//! CSV files are comma-separated UTF-8 with LF line ends, a header row and
//! metadata as leading `# key: value` lines. Every float is written with 17
//! significant digits, so reading an artifact back reproduces the numbers
//! bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dual_solver::{DualDiagnostics, DualSolution, LogGrid};
use crate::model::MarketModel;
use crate::primal::PrimalSolution;
use crate::simulate::TracePoint;

pub const DUAL_SCHEMA: &str = "dual_solution/1";
pub const PRIMAL_SCHEMA: &str = "primal_solution/1";
pub const TRACE_SCHEMA: &str = "path_traces/1";

pub const DUAL_COLUMNS: [&str; 5] = ["t", "y", "W", "W_y", "W_yy"];
pub const PRIMAL_COLUMNS: [&str; 11] = [
    "t",
    "x",
    "V",
    "V_x",
    "V_xx",
    "C_feedback",
    "Pi_feedback",
    "duality_gap",
    "V_t",
    "grid_tol",
    "y_star",
];
pub const TRACE_COLUMNS: [&str; 5] = ["path", "t", "X", "c", "pi"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArtifactError {
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed CSV: {0}")]
    Malformed(String),
    #[error("expected schema {expected}, found {found}")]
    Schema {
        expected: &'static str,
        found: String,
    },
    #[error("missing metadata key `{0}`")]
    MissingMeta(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
}

/// Shortest round-trip form with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    let err = |e: std::io::Error| ArtifactError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| err(std::io::Error::other("no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(err)?;
        f.write_all(bytes).map_err(err)?;
        f.sync_all().map_err(err)?;
    }
    fs::rename(&tmp, path).map_err(err)
}

pub fn read_text(path: &Path) -> Result<String, ArtifactError> {
    fs::read_to_string(path).map_err(|e| ArtifactError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// JSON with struct field order preserved and a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

struct CsvWriter {
    out: String,
}

impl CsvWriter {
    fn new(schema: &str, meta: &[(&str, String)], columns: &[&str]) -> Self {
        let mut out = String::new();
        let _ = writeln!(out, "# schema: {schema}");
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str(&columns.join(","));
        out.push('\n');
        Self { out }
    }

    fn row(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.out.push(',');
            }
            self.out.push_str(&fmt_f64(*v));
        }
        self.out.push('\n');
    }
}

/// A parsed artifact: metadata, header and numeric rows.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub meta: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<Self, ArtifactError> {
        let mut meta = BTreeMap::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some((k, v)) = line.trim_start_matches('#').split_once(':') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(text.as_bytes());
        let columns = reader
            .headers()
            .map_err(|e| ArtifactError::Malformed(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| ArtifactError::Malformed(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| ArtifactError::Malformed(format!("`{f}`: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Self {
            meta,
            columns,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize, ArtifactError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| ArtifactError::MissingColumn(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Result<&str, ArtifactError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ArtifactError::MissingMeta(key.to_string()))
    }

    fn meta_f64(&self, key: &str) -> Result<f64, ArtifactError> {
        self.meta(key)?
            .parse()
            .map_err(|_| ArtifactError::Malformed(format!("metadata `{key}` is not a number")))
    }

    fn meta_usize(&self, key: &str) -> Result<usize, ArtifactError> {
        self.meta(key)?
            .parse()
            .map_err(|_| ArtifactError::Malformed(format!("metadata `{key}` is not an integer")))
    }

    fn expect_schema(&self, expected: &'static str) -> Result<(), ArtifactError> {
        let found = self.meta("schema")?;
        if found != expected {
            return Err(ArtifactError::Schema {
                expected,
                found: found.to_string(),
            });
        }
        Ok(())
    }

    /// Column values reshaped to `[slice][node]`.
    fn field(
        &self,
        name: &str,
        slices: usize,
        nodes: usize,
    ) -> Result<Vec<Vec<f64>>, ArtifactError> {
        let c = self.column(name)?;
        if self.rows.len() != slices * nodes {
            return Err(ArtifactError::Malformed(format!(
                "expected {} rows, found {}",
                slices * nodes,
                self.rows.len()
            )));
        }
        Ok(self
            .rows
            .chunks(nodes)
            .map(|chunk| chunk.iter().map(|r| r[c]).collect())
            .collect())
    }
}

/// Dual solution as CSV, one row per `(t, y)` node, time-major.
pub fn dual_csv(sol: &DualSolution, model_hash: &str) -> String {
    let g = &sol.grid;
    let meta = [
        (
            "grid",
            format!(
                "y_min={} y_max={} n_y={} n_t={} horizon={}",
                fmt_f64(g.y_min),
                fmt_f64(g.y_max),
                g.n_y,
                g.n_t,
                fmt_f64(g.horizon)
            ),
        ),
        ("y_min", fmt_f64(g.y_min)),
        ("y_max", fmt_f64(g.y_max)),
        ("n_y", g.n_y.to_string()),
        ("n_t", g.n_t.to_string()),
        ("horizon", fmt_f64(g.horizon)),
        ("q", fmt_f64(sol.q)),
        ("model_hash", model_hash.to_string()),
        ("residual", fmt_f64(sol.diagnostics.max_residual)),
    ];
    let mut w = CsvWriter::new(DUAL_SCHEMA, &meta, &DUAL_COLUMNS);
    for n in 0..=g.n_t {
        for j in 0..g.n_y {
            w.row(&[g.t(n), g.y(j), sol.w[n][j], sol.w_y[n][j], sol.w_yy[n][j]]);
        }
    }
    w.out
}

/// Rebuilds a dual solution from its CSV; `lambda` comes from `market`.
pub fn read_dual(text: &str, market: &MarketModel) -> Result<DualSolution, ArtifactError> {
    let table = CsvTable::parse(text)?;
    table.expect_schema(DUAL_SCHEMA)?;
    let grid = LogGrid::new(
        table.meta_f64("y_min")?,
        table.meta_f64("y_max")?,
        table.meta_usize("n_y")?,
        table.meta_usize("n_t")?,
        table.meta_f64("horizon")?,
    )
    .map_err(|e| ArtifactError::Malformed(e.to_string()))?;
    let (slices, nodes) = (grid.n_t + 1, grid.n_y);
    Ok(DualSolution {
        grid,
        q: table.meta_f64("q")?,
        w: table.field("W", slices, nodes)?,
        w_y: table.field("W_y", slices, nodes)?,
        w_yy: table.field("W_yy", slices, nodes)?,
        clamp_bounds: vec![None; grid.n_t],
        lambda: grid.times().iter().map(|&t| market.lambda(t)).collect(),
        diagnostics: DualDiagnostics {
            max_residual: table.meta_f64("residual")?,
            ..Default::default()
        },
    })
}

pub fn primal_csv(sol: &PrimalSolution, model_hash: &str) -> String {
    let meta = [
        ("n_t", sol.n_t().to_string()),
        ("n_x", sol.x_grid.len().to_string()),
        ("model_hash", model_hash.to_string()),
        ("max_gap", fmt_f64(sol.max_gap())),
    ];
    let mut w = CsvWriter::new(PRIMAL_SCHEMA, &meta, &PRIMAL_COLUMNS);
    for (n, &t) in sol.times.iter().enumerate() {
        for (i, &x) in sol.x_grid.iter().enumerate() {
            w.row(&[
                t,
                x,
                sol.v[n][i],
                sol.v_x[n][i],
                sol.v_xx[n][i],
                sol.consumption[n][i],
                sol.investment[n][i],
                sol.duality_gap[n][i],
                sol.v_t[n][i],
                sol.grid_tol[n][i],
                sol.argmin[n][i],
            ]);
        }
    }
    w.out
}

pub fn read_primal(text: &str) -> Result<PrimalSolution, ArtifactError> {
    let table = CsvTable::parse(text)?;
    table.expect_schema(PRIMAL_SCHEMA)?;
    let (slices, nodes) = (table.meta_usize("n_t")? + 1, table.meta_usize("n_x")?);
    let t = table.field("t", slices, nodes)?;
    let x = table.field("x", slices, nodes)?;
    Ok(PrimalSolution {
        times: t.iter().map(|row| row[0]).collect(),
        x_grid: x[0].clone(),
        v: table.field("V", slices, nodes)?,
        v_x: table.field("V_x", slices, nodes)?,
        v_xx: table.field("V_xx", slices, nodes)?,
        v_t: table.field("V_t", slices, nodes)?,
        consumption: table.field("C_feedback", slices, nodes)?,
        investment: table.field("Pi_feedback", slices, nodes)?,
        duality_gap: table.field("duality_gap", slices, nodes)?,
        grid_tol: table.field("grid_tol", slices, nodes)?,
        argmin: table.field("y_star", slices, nodes)?,
    })
}

pub fn trace_csv(traces: &[TracePoint], seed: u64) -> String {
    let mut w = CsvWriter::new(TRACE_SCHEMA, &[("seed", seed.to_string())], &TRACE_COLUMNS);
    for p in traces {
        w.row(&[p.path as f64, p.t, p.x, p.c, p.pi]);
    }
    w.out
}

/// Provenance record written next to every artifact set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub grid: Option<LogGrid>,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    /// Set when the model has a closed-form value to compare against.
    pub oracle: bool,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert(
            "dualhjb-core".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        );
        versions.insert("csv_schema_dual".to_string(), DUAL_SCHEMA.to_string());
        versions.insert("csv_schema_primal".to_string(), PRIMAL_SCHEMA.to_string());
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            grid: None,
            seeds: Vec::new(),
            versions,
            timings: BTreeMap::new(),
            outputs: Vec::new(),
            oracle: false,
        }
    }
}
