use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{PipelineConfig, Stage};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Record of one invocation: what ran, with which settings, what it wrote and
/// what it measured.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    /// Flattened effective configuration, without the output directory.
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub stages: Vec<Stage>,
    /// Wall-clock seconds per completed stage.
    pub timings: Vec<(Stage, f64)>,
    /// Artifact path relative to the run directory -> hex SHA-256.
    pub digests: BTreeMap<String, String>,
    /// `stage.metric` -> value.
    pub metrics: BTreeMap<String, f64>,
    pub failure: Option<(Stage, String)>,
}

impl RunManifest {
    pub fn new(config: &PipelineConfig, stages: &[Stage]) -> Self {
        let value = toml::Value::try_from(config.effective()).expect("config converts to toml");
        let mut flat = Vec::new();
        flatten("config", &value, &mut flat);
        flat.retain(|(k, _)| k != "config.paths.output");
        Self {
            config: flat,
            seeds: config.seeds().iter().map(|&(n, s)| (n.to_string(), s)).collect(),
            stages: stages.to_vec(),
            ..Self::default()
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.timings.len() == self.stages.len()
    }

    pub fn metric(&self, stage: Stage, name: &str) -> Option<f64> {
        self.metrics.get(&format!("{}.{name}", stage.name())).copied()
    }

    pub fn set_metric(&mut self, stage: Stage, name: &str, value: f64) {
        self.metrics.insert(format!("{}.{name}", stage.name()), value);
    }

    /// `key = value` text. Lines starting with `time.` are the only ones that
    /// vary between identical runs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let status = if self.is_complete() { "complete" } else { "partial" };
        let _ = writeln!(s, "status = {status}");
        let names: Vec<&str> = self.stages.iter().map(|st| st.name()).collect();
        let _ = writeln!(s, "stages = {}", names.join(","));
        if let Some((stage, msg)) = &self.failure {
            let _ = writeln!(s, "failed_stage = {}", stage.name());
            let _ = writeln!(s, "error = {}", msg.replace('\n', " "));
        }
        for (name, seed) in &self.seeds {
            let _ = writeln!(s, "seed.{name} = {seed}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "metric.{k} = {v}");
        }
        for (k, v) in &self.digests {
            let _ = writeln!(s, "digest.{k} = {v}");
        }
        for (stage, secs) in &self.timings {
            let _ = writeln!(s, "time.{}.seconds = {secs:.3}", stage.name());
        }
        s
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text())
    }
}

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn read_manifest(path: &Path) -> io::Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("malformed manifest line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// Manifest text without the wall-clock lines.
pub fn stable_lines(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("time.")).map(|l| format!("{l}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(file_digest(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn text_round_trips_through_the_reader() {
        let mut m = RunManifest::new(&PipelineConfig::default(), &[Stage::DistanceMap, Stage::TransferInitial]);
        m.timings.push((Stage::DistanceMap, 0.5));
        m.set_metric(Stage::TransferInitial, "nnf_mean_cost", 0.25);
        m.failure = Some((Stage::TransferInitial, "boom".into()));
        let dir = tempfile::tempdir().unwrap();
        m.write(dir.path()).unwrap();
        let map = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(map["status"], "partial");
        assert_eq!(map["failed_stage"], "transfer-initial");
        assert_eq!(map["metric.transfer-initial.nnf_mean_cost"], "0.25");
        assert_eq!(map["config.forecaster.layers"], "6");
        assert_eq!(map["seed.global"], "0");
        assert!(!map.contains_key("config.paths.output"));
        assert!(!stable_lines(&m.to_text()).contains("time."));
    }
}
