use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::PcaResult;
use crate::extraction::TaskTag;
use crate::probe::LayerResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStat {
    pub bytes: u64,
    /// Where the number came from, e.g. `"VmHWM (/proc/self/status)"`.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub n: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub created_unix: u64,
    pub tool_version: String,
}

/// Everything a run produced, as one JSON document.
///
/// Every field is always serialized (absent values as `null` or empty
/// collections) so the key set only depends on the schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskTag,
    pub metrics: BTreeMap<String, f64>,
    pub selected_layer: Option<usize>,
    pub selection_rule: Option<String>,
    pub layers: Vec<LayerResult>,
    pub sizes: Vec<SizePoint>,
    pub sample_counts: BTreeMap<String, usize>,
    pub stages: Vec<StageTiming>,
    pub peak_memory: Option<MemoryStat>,
    pub config: serde_json::Value,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn new(task: TaskTag, config: serde_json::Value) -> Self {
        EvalReport {
            task,
            metrics: BTreeMap::new(),
            selected_layer: None,
            selection_rule: None,
            layers: Vec::new(),
            sizes: Vec::new(),
            sample_counts: BTreeMap::new(),
            stages: Vec::new(),
            peak_memory: None,
            config,
            metadata: ReportMetadata {
                created_unix: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                tool_version: env!("CARGO_PKG_VERSION").into(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_json() + "\n")
    }
}

/// Accumulates wall time per named stage.
#[derive(Debug, Default)]
pub struct StageTimer {
    stages: Vec<StageTiming>,
}

impl StageTimer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn finish(self) -> Vec<StageTiming> {
        self.stages
    }
}

/// Peak resident set size of this process, where the platform reports it.
pub fn peak_memory() -> Option<MemoryStat> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(MemoryStat {
        bytes: kb * 1024,
        source: "VmHWM (/proc/self/status), peak resident set size".into(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_layers_csv(mut w: impl Write, layers: &[LayerResult]) -> io::Result<()> {
    writeln!(w, "layer,valid_acc,test_acc")?;
    for e in layers {
        writeln!(
            w,
            "{},{},{}",
            e.layer,
            e.valid_accuracy,
            opt(e.test_accuracy)
        )?;
    }
    Ok(())
}

pub fn write_sizes_csv(mut w: impl Write, sizes: &[SizePoint]) -> io::Result<()> {
    writeln!(w, "n,accuracy,seed")?;
    for s in sizes {
        writeln!(w, "{},{},{}", s.n, s.accuracy, s.seed)?;
    }
    Ok(())
}

/// Writes the first three projected coordinates; missing ones are left blank.
pub fn write_pca_csv(
    mut w: impl Write,
    ids: &[u64],
    labels: &[i32],
    pca: &PcaResult,
) -> io::Result<()> {
    writeln!(w, "id,label,x,y,z")?;
    let k = pca.coords.ncols();
    for (i, (id, label)) in ids.iter().zip(labels).enumerate() {
        let c = |j: usize| {
            if j < k {
                format!("{}", pca.coords[(i, j)])
            } else {
                String::new()
            }
        };
        writeln!(w, "{id},{label},{},{},{}", c(0), c(1), c(2))?;
    }
    Ok(())
}
