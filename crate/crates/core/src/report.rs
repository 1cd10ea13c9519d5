//! CSV tables and SVG plots emitted by experiment runs.
//!
//! Every table written to disk starts with `config_hash` and `seed` columns
//! and can be read back with [`Table::read`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Outcome;
use crate::tensor::Tensor;

/// Identifies the run a table belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub seed: u64,
}

pub const STAMP_COLUMNS: [&str; 2] = ["config_hash", "seed"];

/// Shortest decimal form that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.headers.len() {
            return Err(Error::Schema(format!(
                "row has {} fields, table has {} columns",
                row.len(),
                self.headers.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn get(&self, row: usize, name: &str) -> Result<&str> {
        let c = self
            .column(name)
            .ok_or_else(|| Error::Schema(format!("no column `{name}`")))?;
        Ok(&self.rows[row][c])
    }

    pub fn get_f64(&self, row: usize, name: &str) -> Result<f64> {
        let v = self.get(row, name)?;
        v.parse()
            .map_err(|_| Error::Schema(format!("column `{name}` row {row}: `{v}` is not a number")))
    }

    /// Writes the table with the stamp columns prepended.
    pub fn write(&self, path: &Path, stamp: &RunStamp) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = STAMP_COLUMNS.to_vec();
        header.extend(self.headers.iter().map(String::as_str));
        w.write_record(&header)?;
        let seed = stamp.seed.to_string();
        for row in &self.rows {
            let mut rec: Vec<&str> = vec![&stamp.config_hash, &seed];
            rec.extend(row.iter().map(String::as_str));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`Table::write`]; the stamp columns are kept.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if headers.len() < 2 || headers[..2] != STAMP_COLUMNS {
            return Err(Error::Schema(format!(
                "{}: missing config_hash/seed columns",
                path.display()
            )));
        }
        let mut t = Table {
            headers,
            rows: Vec::new(),
        };
        for rec in r.records() {
            t.push(rec?.iter().map(str::to_string).collect())?;
        }
        Ok(t)
    }

    /// Drops the stamp columns from a table read back from disk.
    pub fn unstamped(&self) -> Self {
        let strip = usize::from(self.column("config_hash") == Some(0))
            + usize::from(self.column("seed") == Some(1));
        Self {
            headers: self.headers[strip..].to_vec(),
            rows: self.rows.iter().map(|r| r[strip..].to_vec()).collect(),
        }
    }
}

/// Steps-to-goal counts per series over bins `0..=horizon` plus a final
/// overflow bin for episodes that never reached the goal.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub horizon: usize,
    pub series: Vec<(String, Vec<usize>)>,
}

impl Histogram {
    pub fn new(horizon: usize, series: &[(&str, &[Option<usize>])]) -> Result<Self> {
        if series.iter().all(|(_, v)| v.is_empty()) {
            return Err(Error::Config("histogram needs at least one episode".into()));
        }
        let series = series
            .iter()
            .map(|(name, lengths)| {
                let mut counts = vec![0; horizon + 2];
                for l in lengths.iter() {
                    match l {
                        Some(k) if *k <= horizon => counts[*k] += 1,
                        _ => counts[horizon + 1] += 1,
                    }
                }
                (name.to_string(), counts)
            })
            .collect();
        Ok(Self { horizon, series })
    }

    pub fn bin_label(&self, bin: usize) -> String {
        if bin > self.horizon {
            "inf".into()
        } else {
            bin.to_string()
        }
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["series", "steps", "count", "fraction"]);
        for (name, counts) in &self.series {
            let total: usize = counts.iter().sum();
            for (b, &c) in counts.iter().enumerate() {
                let frac = if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                };
                t.push(vec![
                    name.clone(),
                    self.bin_label(b),
                    c.to_string(),
                    fmt_f64(frac),
                ])
                .expect("fixed width");
            }
        }
        t
    }

    /// Grouped bar chart of the per-series fractions.
    pub fn svg(&self, title: &str) -> String {
        const W: f64 = 640.0;
        const H: f64 = 360.0;
        const LEFT: f64 = 50.0;
        const BOTTOM: f64 = 40.0;
        const TOP: f64 = 40.0;
        const COLORS: [&str; 4] = ["#8c8c8c", "#2b6cb0", "#c05621", "#2f855a"];
        let bins = self.horizon + 2;
        let plot_w = W - LEFT - 20.0;
        let plot_h = H - TOP - BOTTOM;
        let group = plot_w / bins as f64;
        let bar = group * 0.8 / self.series.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let base = H - BOTTOM;
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            W - 20.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#
        );
        for tick in 0..=4 {
            let frac = tick as f64 / 4.0;
            let y = base - frac * plot_h;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{frac}</text>"#,
                LEFT - 4.0,
                y + 4.0
            );
        }
        for (i, (name, counts)) in self.series.iter().enumerate() {
            let total: usize = counts.iter().sum::<usize>().max(1);
            let color = COLORS[i % COLORS.len()];
            for (b, &c) in counts.iter().enumerate() {
                let h = c as f64 / total as f64 * plot_h;
                let x = LEFT + b as f64 * group + group * 0.1 + i as f64 * bar;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="{bar:.1}" height="{h:.1}" fill="{color}"/>"#,
                    base - h
                );
            }
            let ly = TOP + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#,
                W - 150.0,
                ly - 9.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}">{}</text>"#,
                W - 135.0,
                escape(name)
            );
        }
        for b in 0..bins {
            let x = LEFT + (b as f64 + 0.5) * group;
            let _ = writeln!(
                s,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
                base + 14.0,
                self.bin_label(b)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">steps to goal</text>"#,
            LEFT + plot_w / 2.0,
            H - 8.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Per-timestep mean of running success probabilities within each outcome
/// group. Groups without episodes are left out; their names are returned.
pub fn return_trace_table(traces: &[(Outcome, Vec<f64>)]) -> (Table, Vec<Outcome>) {
    let mut groups: BTreeMap<Outcome, Vec<&[f64]>> = BTreeMap::new();
    for (o, tr) in traces {
        groups.entry(*o).or_default().push(tr);
    }
    let mut t = Table::new(&["outcome", "timestep", "mean_probability", "episodes"]);
    for (o, trs) in &groups {
        let len = trs.iter().map(|t| t.len()).max().unwrap_or(0);
        for step in 0..len {
            let vals: Vec<f64> = trs.iter().filter_map(|t| t.get(step).copied()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            t.push(vec![
                outcome_name(*o).into(),
                step.to_string(),
                fmt_f64(mean),
                vals.len().to_string(),
            ])
            .expect("fixed width");
        }
    }
    let missing = [Outcome::Success, Outcome::DoorWithoutKey, Outcome::NoDoor]
        .into_iter()
        .filter(|o| !groups.contains_key(o))
        .collect();
    (t, missing)
}

pub fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Success => "success",
        Outcome::DoorWithoutKey => "door_without_key",
        Outcome::NoDoor => "no_door",
    }
}

/// Long-format `[query, source]` attention matrix.
pub fn attention_table(matrix: &Tensor) -> Table {
    let n = matrix.rows();
    let mut t = Table::new(&["query", "source", "weight"]);
    for q in 0..n {
        for (src, &w) in matrix.row(q).iter().enumerate().take(q + 1) {
            t.push(vec![q.to_string(), src.to_string(), fmt_f64(w)])
                .expect("fixed width");
        }
    }
    t
}
