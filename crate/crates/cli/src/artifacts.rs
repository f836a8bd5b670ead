//! In-memory artifact set written once at the end of a run: CSVs, the
//! resolved config, an optional gnuplot script and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use hyperspde::grid::Field;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Round-trip float formatting used in every CSV.
pub fn num(x: f64) -> String {
    format!("{x:.17e}")
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Small CSV builder over the `csv` writer.
pub struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Self { w }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).expect("in-memory write");
    }

    pub fn finish(self) -> Vec<u8> {
        self.w.into_inner().expect("in-memory flush")
    }
}

/// `(component, node_index, re, im)`
pub fn field_csv(u: &Field) -> Vec<u8> {
    let mut t = Table::new(&["component", "node_index", "re", "im"]);
    let n = u.grid().n();
    for c in 0..u.ncomp() {
        for (j, v) in u.component(c).iter().enumerate().take(n) {
            t.row([c.to_string(), j.to_string(), num(v.re), num(v.im)]);
        }
    }
    t.finish()
}

pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
    summary: Vec<(String, String)>,
    plot: Option<String>,
    inconclusive: bool,
    status: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self::new()
    }
}

impl Artifacts {
    pub fn new() -> Self {
        Self {
            files: Vec::new(),
            summary: Vec::new(),
            plot: None,
            inconclusive: false,
            status: "ok".into(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn summary(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn summaries(&self) -> &[(String, String)] {
        &self.summary
    }

    pub fn plot(&mut self, script: String) {
        self.plot = Some(script);
    }

    pub fn set_inconclusive(&mut self) {
        self.inconclusive = true;
    }

    pub fn inconclusive(&self) -> bool {
        self.inconclusive
    }

    pub fn set_status(&mut self, status: &str) {
        self.status = status.into();
    }

    pub fn status(&self) -> &str {
        &self.status
    }

    pub fn files(&self) -> &[(String, Vec<u8>)] {
        &self.files
    }

    /// Write everything under `dir`, manifest last.
    pub fn write(&self, dir: &Path, header: &[(String, String)]) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (k, v) in header {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        manifest.push_str(&format!("status={}\n", self.status));
        manifest.push_str(&format!("inconclusive={}\n", self.inconclusive));
        for (k, v) in &self.summary {
            manifest.push_str(&format!("summary.{k}={v}\n"));
        }
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
            manifest.push_str(&format!("artifact.{name}={}\n", content_hash(bytes)));
        }
        if let Some(script) = &self.plot {
            fs::write(dir.join("plot.gp"), script)?;
            manifest.push_str(&format!("artifact.plot.gp={}\n", content_hash(script.as_bytes())));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest)?;
        Ok(path)
    }
}

/// Parse a `key=value` manifest.
pub fn read_manifest(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
