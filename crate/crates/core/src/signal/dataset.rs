//! Trial records and the on-disk dataset layout (`manifest.json` plus one
//! CSV of raw intensities per trial).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 5.08625;

/// Outcome label. Positive class is a failed trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Pass = 0,
    Fail = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn is_positive(self) -> bool {
        self == Label::Fail
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Pass),
            1 => Ok(Label::Fail),
            other => Err(format!("label must be 0 (pass) or 1 (fail), got {other}")),
        }
    }
}

/// Half-open interval of timestep indices.
pub type Interval = (usize, usize);

/// One task repetition: a `channels x len` signal matrix plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub trial_id: String,
    pub subject_id: String,
    pub task_id: String,
    pub label: Label,
    pub repetition: u32,
    pub sample_rate_hz: f64,
    pub subtask_bounds: Option<Vec<Interval>>,
    channels: usize,
    len: usize,
    /// Channel-major: `signal[c * len + t]`.
    signal: Vec<f64>,
}

impl Trial {
    pub fn new(
        trial_id: impl Into<String>,
        subject_id: impl Into<String>,
        task_id: impl Into<String>,
        label: Label,
        repetition: u32,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let c = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if c == 0 || len == 0 {
            return Err(Error::Format("a trial needs at least one channel and one timestep".into()));
        }
        if channels.iter().any(|ch| ch.len() != len) {
            return Err(Error::shape("all channels of a trial must share a length"));
        }
        Ok(Trial {
            trial_id: trial_id.into(),
            subject_id: subject_id.into(),
            task_id: task_id.into(),
            label,
            repetition,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            subtask_bounds: None,
            channels: c,
            len,
            signal: channels.concat(),
        })
    }

    pub fn with_subtasks(mut self, bounds: Vec<Interval>) -> Result<Self> {
        validate_intervals(&bounds, self.len)?;
        self.subtask_bounds = Some(bounds);
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.signal[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.signal[c * self.len..(c + 1) * self.len]
    }

    pub fn at(&self, c: usize, t: usize) -> f64 {
        self.signal[c * self.len + t]
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    /// Same metadata, new signal of identical shape.
    pub fn map_channels(&self, mut f: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>) -> Result<Trial> {
        let mut out = self.clone();
        for c in 0..self.channels {
            let ch = f(c, self.channel(c))?;
            if ch.len() != self.len {
                return Err(Error::shape("channel transform changed the trial length"));
            }
            out.channel_mut(c).copy_from_slice(&ch);
        }
        Ok(out)
    }

    /// Replaces the whole signal, possibly with a different channel count.
    pub fn with_signal(&self, channels: Vec<Vec<f64>>) -> Result<Trial> {
        let mut t = Trial::new(
            self.trial_id.clone(),
            self.subject_id.clone(),
            self.task_id.clone(),
            self.label,
            self.repetition,
            channels,
        )?;
        t.sample_rate_hz = self.sample_rate_hz;
        t.subtask_bounds = self.subtask_bounds.clone();
        Ok(t)
    }
}

/// Intervals must be non-empty, ordered, disjoint and inside `[0, len)`.
pub fn validate_intervals(bounds: &[Interval], len: usize) -> Result<()> {
    let mut prev_end = 0;
    for (i, &(s, e)) in bounds.iter().enumerate() {
        if s >= e || e > len {
            return Err(Error::Format(format!(
                "subtask interval {i} [{s}, {e}) is empty or outside [0, {len})"
            )));
        }
        if i > 0 && s < prev_end {
            return Err(Error::Format(format!(
                "subtask interval {i} [{s}, {e}) overlaps or precedes its predecessor"
            )));
        }
        prev_end = e;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub trial_id: String,
    pub subject_id: String,
    pub label: Label,
    pub repetition: u32,
    pub file: String,
    #[serde(default)]
    pub subtask_bounds: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub task_id: String,
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    pub trials: Vec<TrialEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "manifest schema_version {} is not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.channels.is_empty() {
        return Err(Error::Format("manifest lists no channels".into()));
    }
    Ok(manifest)
}

/// Loads every trial listed in `dir/manifest.json`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest
        .trials
        .iter()
        .map(|entry| load_trial(dir, &manifest, entry))
        .collect()
}

fn load_trial(dir: &Path, manifest: &Manifest, entry: &TrialEntry) -> Result<Trial> {
    let path = dir.join(&entry.file);
    if !path.is_file() {
        return Err(Error::NotFound(path));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(&path).map_err(|e| {
        Error::Format(format!("{}: {e}", path.display()))
    })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() != manifest.channels.len() {
        return Err(Error::Format(format!(
            "{} has {} channels, task {} declares {}",
            path.display(),
            header.len(),
            manifest.task_id,
            manifest.channels.len()
        )));
    }
    if header != manifest.channels {
        return Err(Error::Format(format!(
            "{} channel names differ from the manifest",
            path.display()
        )));
    }
    let mut channels = vec![Vec::new(); header.len()];
    for (r, record) in reader.records().enumerate() {
        // Row numbers are 1-based counting the header as row 1.
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            file: path.clone(),
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != channels.len() {
            return Err(Error::Parse {
                file: path.clone(),
                row,
                column: record.len() + 1,
                message: format!("expected {} cells", channels.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                file: path.clone(),
                row,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: path.clone(),
                    row,
                    column: c + 1,
                    message: "non-finite value".into(),
                });
            }
            channels[c].push(v);
        }
    }
    let mut trial = Trial::new(
        entry.trial_id.clone(),
        entry.subject_id.clone(),
        manifest.task_id.clone(),
        entry.label,
        entry.repetition,
        channels,
    )
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    trial.sample_rate_hz = manifest.sample_rate_hz;
    if !entry.subtask_bounds.is_empty() {
        let bounds = entry.subtask_bounds.iter().map(|b| (b[0], b[1])).collect();
        trial = trial.with_subtasks(bounds)?;
    }
    Ok(trial)
}

/// Writes `trials` in the dataset layout. All trials must share a task and a
/// channel count; `channel_names` names the CSV columns.
pub fn write_dataset(dir: impl AsRef<Path>, channel_names: &[String], trials: &[Trial]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let task_id = trials.first().map_or_else(|| "task".to_string(), |t| t.task_id.clone());
    let sample_rate_hz = trials.first().map_or(DEFAULT_SAMPLE_RATE_HZ, |t| t.sample_rate_hz);
    let mut entries = Vec::with_capacity(trials.len());
    for t in trials {
        if t.channels() != channel_names.len() || t.task_id != task_id {
            return Err(Error::Format(format!(
                "trial {} does not match the dataset's task or channel count",
                t.trial_id
            )));
        }
        let file = format!("{}.csv", t.trial_id);
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(channel_names).map_err(io)?;
        for step in 0..t.len() {
            w.write_record((0..t.channels()).map(|c| t.at(c, step).to_string()))
                .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        crate::io::write_atomic(&dir.join(&file), &bytes)?;
        entries.push(TrialEntry {
            trial_id: t.trial_id.clone(),
            subject_id: t.subject_id.clone(),
            label: t.label,
            repetition: t.repetition,
            file,
            subtask_bounds: t
                .subtask_bounds
                .as_ref()
                .map(|b| b.iter().map(|&(s, e)| [s, e]).collect())
                .unwrap_or_default(),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        task_id,
        sample_rate_hz,
        channels: channel_names.to_vec(),
        trials: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    crate::io::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(id: &str, values: Vec<Vec<f64>>) -> Trial {
        Trial::new(id, "s1", "task", Label::Fail, 0, values).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ch{i}")).collect()
    }

    #[test]
    fn empty_manifest_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &names(2), &[]).unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let a = trial("a", vec![vec![1.0 / 3.0, 2.5e-7, 1e12], vec![0.1, 0.2, 0.30000000000000004]])
            .with_subtasks(vec![(0, 1), (1, 3)])
            .unwrap();
        let mut b = trial("b", vec![vec![4.0, 5.0], vec![6.0, std::f64::consts::PI]]);
        b.label = Label::Pass;
        b.repetition = 3;
        write_dataset(dir.path(), &names(2), &[a.clone(), b.clone()]).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, vec![a, b]);
    }

    #[test]
    fn missing_manifest_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::NotFound(_))));
    }

    #[test]
    fn missing_csv_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &names(1), &[trial("gone", vec![vec![1.0]])]).unwrap();
        fs::remove_file(dir.path().join("gone.csv")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::NotFound(p)) => assert!(p.ends_with("gone.csv")),
            other => panic!("expected not-found, got {other:?}"),
        }
    }

    #[test]
    fn channel_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &names(2), &[trial("a", vec![vec![1.0], vec![2.0]])]).unwrap();
        fs::write(dir.path().join("a.csv"), "ch0\n1.0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn non_numeric_cell_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &names(2), &[trial("a", vec![vec![1.0, 2.0], vec![3.0, 4.0]])]).unwrap();
        fs::write(dir.path().join("a.csv"), "ch0,ch1\n1.0,2.0\n3.0,abc\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn interval_validation() {
        assert!(validate_intervals(&[(0, 2), (2, 4)], 4).is_ok());
        assert!(validate_intervals(&[(0, 3), (2, 4)], 4).is_err());
        assert!(validate_intervals(&[(0, 5)], 4).is_err());
        assert!(validate_intervals(&[(2, 2)], 4).is_err());
    }
}
