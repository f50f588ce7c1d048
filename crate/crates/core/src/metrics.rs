//! JSONL metrics: one flat JSON object per step.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const VERSION_TAG: &str = concat!("ctxlab-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
    pub seed: u64,
    pub version: String,
    /// Free-form label such as the run or phase name.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tag: Option<String>,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(step: usize, seed: u64) -> Self {
        Self { step, wall_ms: None, seed, version: VERSION_TAG.into(), tag: None, metrics: BTreeMap::new() }
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Appends records to a JSONL file, or just collects them in memory.
/// In canonical mode wall-clock time is never written.
pub struct MetricsSink {
    file: Option<File>,
    canonical: bool,
    started: Instant,
    records: Vec<MetricsRecord>,
}

impl MetricsSink {
    pub fn memory(canonical: bool) -> Self {
        Self { file: None, canonical, started: Instant::now(), records: Vec::new() }
    }

    /// Starts a fresh file, replacing any previous contents.
    pub fn create(path: &Path, canonical: bool) -> Result<Self> {
        let file = File::create(path)?;
        Ok(Self { file: Some(file), ..Self::memory(canonical) })
    }

    pub fn to_file(path: &Path, canonical: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Some(file), ..Self::memory(canonical) })
    }

    pub fn push(&mut self, mut record: MetricsRecord) -> Result<()> {
        record.wall_ms = (!self.canonical).then(|| self.started.elapsed().as_millis() as u64);
        if let Some(file) = &mut self.file {
            // one write per record keeps lines whole
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
