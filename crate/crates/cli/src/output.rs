use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub struct Manifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub seed: u64,
    pub started: Instant,
}

impl Manifest {
    fn version() -> String {
        format!("lossylqr {}", env!("CARGO_PKG_VERSION"))
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("command", self.command.clone()),
            ("arguments", self.arguments.join(" ")),
            ("seed", self.seed.to_string()),
            ("version", Self::version()),
            ("wall_time_s", format!("{:.6}", self.started.elapsed().as_secs_f64())),
        ]
    }

    fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("command".into(), self.command.clone().into());
        m.insert("arguments".into(), self.arguments.clone().into());
        m.insert("seed".into(), self.seed.into());
        m.insert("version".into(), Self::version().into());
        m.insert("wall_time_s".into(), self.started.elapsed().as_secs_f64().into());
        Value::Object(m)
    }
}

/// `%.12g`-style formatting: 12 significant digits, trailing zeros trimmed.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Self::Num(x) => fmt_num(*x),
            Self::Int(n) => n.to_string(),
            Self::Text(s) => s.clone(),
            Self::Empty => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Self::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Self::Text(s.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Self::Empty, Self::Num)
    }
}

impl From<Option<u64>> for Cell {
    fn from(x: Option<u64>) -> Self {
        x.map_or(Self::Empty, Self::Int)
    }
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, manifest: &Manifest) -> Result<String, CliError> {
        let mut out = String::new();
        for (k, v) in manifest.fields() {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::Input(format!("csv: {e}"));
        w.write_record(&self.header).map_err(fail)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Input(format!("csv: {e}")))?;
        out.push_str(&String::from_utf8(bytes).expect("utf-8 fields"));
        Ok(out)
    }
}

/// Serializes `result` with a `manifest` key. Objects are merged; other
/// values go under `result`. Keys come out sorted.
pub fn render_json<T: Serialize>(result: &T, manifest: &Manifest) -> Result<String, CliError> {
    let value = serde_json::to_value(result).map_err(|e| CliError::Input(format!("serialize: {e}")))?;
    let mut obj = match value {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("result".into(), other);
            m
        }
    };
    obj.insert("manifest".into(), manifest.to_json());
    let mut text = serde_json::to_string_pretty(&Value::Object(obj))
        .map_err(|e| CliError::Input(format!("serialize: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display()))),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(CliError::Input(format!("cannot write output: {e}")))
                }
                _ => Ok(()),
            }
        }
    }
}

/// Plot description for `--gnuplot`.
pub struct Plot {
    pub title: String,
    pub xlabel: String,
    pub ylabel: String,
    pub logscale_y: bool,
    /// Each entry is a full gnuplot plot clause using `$csv` as the data file.
    pub series: Vec<String>,
}

pub fn gnuplot_script(plot: &Plot, csv: &Path) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set datafile commentschars '#'");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set title '{}'", plot.title);
    let _ = writeln!(s, "set xlabel '{}'", plot.xlabel);
    let _ = writeln!(s, "set ylabel '{}'", plot.ylabel);
    if plot.logscale_y {
        let _ = writeln!(s, "set logscale y");
    }
    let file = csv.display().to_string().replace('\'', "''");
    let clauses: Vec<String> = plot
        .series
        .iter()
        .map(|c| c.replace("$csv", &format!("'{file}'")))
        .collect();
    let _ = writeln!(s, "plot {}", clauses.join(", \\\n     "));
    s
}
