//! Line-oriented metrics stream.
//!
//! The file starts with one header line. Every following line is one event:
//! `step=<int> kind=<name>` followed by `key=value` pairs in sorted key
//! order, floats written with 17 significant digits so they parse back
//! bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "# curriculum-lab metrics v1";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsEvent {
    pub step: usize,
    pub kind: String,
    pub fields: BTreeMap<String, f64>,
}

impl MetricsEvent {
    pub fn new(step: usize, kind: &str) -> Self {
        Self {
            step,
            kind: kind.to_string(),
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: f64) -> Self {
        self.fields.insert(key.into(), value);
        self
    }

    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.fields.insert(key.into(), value);
    }

    /// `prefix.{c:02}` for every entry of `values`.
    pub fn set_vec(&mut self, prefix: &str, values: &[f64]) {
        for (c, v) in values.iter().enumerate() {
            self.fields.insert(format!("{prefix}.{c:02}"), *v);
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.get(key).copied()
    }

    pub fn to_line(&self) -> String {
        let mut line = format!("step={} kind={}", self.step, self.kind);
        for (k, v) in &self.fields {
            line.push_str(&format!(" {k}={v:.16e}"));
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |detail: String| Error::invalid("metrics", detail);
        let mut parts = line.split_whitespace();
        let step = parts
            .next()
            .and_then(|p| p.strip_prefix("step="))
            .ok_or_else(|| bad(format!("missing step in `{line}`")))?
            .parse::<usize>()
            .map_err(|e| bad(e.to_string()))?;
        let kind = parts
            .next()
            .and_then(|p| p.strip_prefix("kind="))
            .ok_or_else(|| bad(format!("missing kind in `{line}`")))?;
        let mut ev = MetricsEvent::new(step, kind);
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad(format!("malformed field `{p}`")))?;
            ev.set(k, v.parse::<f64>().map_err(|e| bad(format!("`{p}`: {e}")))?);
        }
        Ok(ev)
    }
}

/// Appends events to `metrics.txt` in a run directory and keeps them in
/// memory.
#[derive(Debug)]
pub struct MetricsSink {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    pub events: Vec<MetricsEvent>,
    last_step: usize,
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self {
            path: None,
            writer: None,
            events: Vec::new(),
            last_step: 0,
        }
    }

    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.txt");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{HEADER}").map_err(|e| Error::io(&path, e))?;
        writer.flush().map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path: Some(path),
            writer: Some(writer),
            events: Vec::new(),
            last_step: 0,
        })
    }

    pub fn emit(&mut self, event: MetricsEvent) -> Result<()> {
        if event.step < self.last_step {
            return Err(Error::invalid("metrics", format!("step {} after {}", event.step, self.last_step)));
        }
        self.last_step = event.step;
        if let (Some(w), Some(p)) = (self.writer.as_mut(), self.path.as_ref()) {
            writeln!(w, "{}", event.to_line()).map_err(|e| Error::io(p, e))?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(w), Some(p)) = (self.writer.as_mut(), self.path.as_ref()) {
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == HEADER => {}
        _ => return Err(Error::invalid("metrics", format!("{}: missing header", path.display()))),
    }
    lines
        .map(|l| MetricsEvent::parse_line(&l.map_err(|e| Error::io(path, e))?))
        .collect()
}
