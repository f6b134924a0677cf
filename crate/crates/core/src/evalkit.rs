//! Score an external model's predictions against manifest ground truth,
//! and turn systematic disagreements into map-review recommendations.
//!
//! Predictions arrive as JSON Lines (`{"sample_id":...,"task":...,
//! "value":...}`): for flag tasks the value is the positive-class
//! probability in [0, 1], for numeric tasks it is the predicted quantity.
//!
//! Metrics follow the task's label type: percentage accuracy for
//! categorical label spaces (flags, lane counts, posted speed values) and
//! mean absolute error for numeric ones. Balanced manifests contain
//! duplicated samples with derived ids; a duplicate with no prediction of
//! its own falls back to its original's prediction, and every metric is
//! also reported over originals only ("unbalanced") for transparency.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::datasetio::Manifest;
use crate::error::{Error, Result};
use crate::labelgen::{AttributeLabel, LabeledSample, Task};

/// One model output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub task: Task,
    /// Positive-class probability for flag tasks, predicted quantity
    /// otherwise.
    pub value: f64,
}

/// Classification decision rule: predicted positive iff probability is at
/// or above the threshold. Ties go to positive.
pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;
/// Speed-limit review triggers at this absolute disagreement (mph).
pub const DEFAULT_SPEED_DELTA_MPH: f64 = 10.0;
/// Two-way-marking review triggers at this one-way probability.
pub const DEFAULT_ONEWAY_PROB: f64 = 0.9;

/// Read a predictions file; every malformed line is reported with its
/// 1-based line number. Duplicate sample ids and out-of-range
/// probabilities are rejected.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let err = |message: String| Error::JsonLine {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        if line.trim().is_empty() {
            return Err(err("blank line in predictions file".into()));
        }
        let v: Value =
            serde_json::from_str(line).map_err(|e| err(format!("bad prediction: {e}")))?;
        let sample_id = v
            .get("sample_id")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing string field \"sample_id\"".into()))?
            .to_string();
        let task_name = v
            .get("task")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing string field \"task\"".into()))?;
        let task = Task::from_str(task_name)
            .ok_or_else(|| err(format!("unknown task {task_name:?}")))?;
        let value = v
            .get("value")
            .and_then(Value::as_f64)
            .ok_or_else(|| err("missing numeric field \"value\"".into()))?;
        if !value.is_finite() {
            return Err(err("prediction value must be finite".into()));
        }
        if task.is_binary() && !(0.0..=1.0).contains(&value) {
            return Err(err(format!(
                "probability {value} outside [0, 1] for flag task {}",
                task.as_str()
            )));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(err(format!("duplicate prediction for sample {sample_id}")));
        }
        out.push(PredictionRecord {
            sample_id,
            task,
            value,
        });
    }
    Ok(out)
}

/// Write predictions in the same JSONL format `load_predictions` reads.
pub fn write_predictions(preds: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&format!(
            "{{\"sample_id\":{},\"task\":{},\"value\":{}}}\n",
            serde_json::to_string(&p.sample_id).expect("strings serialize"),
            serde_json::to_string(p.task.as_str()).expect("strings serialize"),
            p.value
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Strip one `-dupNN` suffix, if present.
fn strip_dup_suffix(id: &str) -> Option<&str> {
    let pos = id.rfind("-dup")?;
    let digits = &id[pos + 4..];
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())).then(|| &id[..pos])
}

/// Prediction lookup keyed by sample id, with validation that every
/// prediction points at a real manifest sample of the right task.
struct PredIndex<'a> {
    by_id: BTreeMap<&'a str, &'a PredictionRecord>,
}

impl<'a> PredIndex<'a> {
    fn build(preds: &'a [PredictionRecord], manifest: &Manifest) -> Result<PredIndex<'a>> {
        let samples: BTreeMap<&str, &LabeledSample> = manifest
            .samples()
            .iter()
            .map(|s| (s.sample_id.as_str(), s))
            .collect();
        let mut by_id = BTreeMap::new();
        for p in preds {
            let sample = samples.get(p.sample_id.as_str()).ok_or_else(|| {
                Error::Data(format!(
                    "prediction for unknown sample id {}",
                    p.sample_id
                ))
            })?;
            let expected = sample.label.task();
            if expected != p.task {
                return Err(Error::Data(format!(
                    "prediction for sample {} says task {} but the manifest sample is task {}",
                    p.sample_id,
                    p.task.as_str(),
                    expected.as_str()
                )));
            }
            if by_id.insert(p.sample_id.as_str(), p).is_some() {
                return Err(Error::Data(format!(
                    "duplicate prediction for sample {}",
                    p.sample_id
                )));
            }
        }
        Ok(PredIndex { by_id })
    }

    /// Resolve a manifest sample to a prediction: exact id first, then the
    /// original a balanced duplicate was copied from.
    fn resolve(&self, sample_id: &str) -> Option<&PredictionRecord> {
        if let Some(p) = self.by_id.get(sample_id) {
            return Some(p);
        }
        let mut id = sample_id;
        while let Some(base) = strip_dup_suffix(id) {
            id = base;
            if let Some(p) = self.by_id.get(id) {
                return Some(p);
            }
        }
        None
    }
}

/// (sample, predicted value) pairs for one task. `include_dups = false`
/// restricts to original samples.
fn scored<'m>(
    index: &PredIndex,
    manifest: &'m Manifest,
    task: Task,
    include_dups: bool,
) -> Vec<(&'m LabeledSample, f64)> {
    manifest
        .samples()
        .iter()
        .filter(|s| s.label.task() == task)
        .filter(|s| include_dups || strip_dup_suffix(&s.sample_id).is_none())
        .filter_map(|s| index.resolve(&s.sample_id).map(|p| (s, p.value)))
        .collect()
}

fn is_correct(label: &AttributeLabel, value: f64, decision_threshold: f64) -> bool {
    match label.as_flag() {
        Some(actual) => (value >= decision_threshold) == actual,
        None => {
            let truth = label.as_number().expect("non-flag labels are numeric");
            (value - truth).abs() < 1e-9
        }
    }
}

/// Percentage accuracy of predictions for one categorical task. Flag tasks
/// threshold the probability (at-or-above means positive); lane counts and
/// speed values must match the label exactly.
pub fn accuracy(
    preds: &[PredictionRecord],
    manifest: &Manifest,
    task: Task,
    decision_threshold: f64,
) -> Result<f64> {
    if !task.is_categorical() {
        return Err(Error::Validation(format!(
            "accuracy is undefined for continuous task {}",
            task.as_str()
        )));
    }
    let index = PredIndex::build(preds, manifest)?;
    let pairs = scored(&index, manifest, task, true);
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no predictions match any manifest sample of task {}",
            task.as_str()
        )));
    }
    let correct = pairs
        .iter()
        .filter(|(s, v)| is_correct(&s.label, *v, decision_threshold))
        .count();
    Ok(100.0 * correct as f64 / pairs.len() as f64)
}

/// Mean absolute error of predictions for one numeric-valued task.
pub fn mae(preds: &[PredictionRecord], manifest: &Manifest, task: Task) -> Result<f64> {
    if task.is_binary() {
        return Err(Error::Validation(format!(
            "mean absolute error is undefined for flag task {}",
            task.as_str()
        )));
    }
    let index = PredIndex::build(preds, manifest)?;
    let pairs = scored(&index, manifest, task, true);
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no predictions match any manifest sample of task {}",
            task.as_str()
        )));
    }
    let total: f64 = pairs
        .iter()
        .map(|(s, v)| (v - s.label.as_number().expect("numeric task")).abs())
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Metrics for one task over one scope.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    pub count: usize,
    /// Percentage accuracy; present for categorical tasks.
    pub accuracy_pct: Option<f64>,
    /// Mean absolute error; present for numeric-valued tasks.
    pub mae: Option<f64>,
}

/// Per-task metrics over the full manifest (duplicates included, i.e. the
/// balanced view) and over original samples only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub balanced: Vec<TaskMetrics>,
    pub unbalanced: Vec<TaskMetrics>,
}

fn metrics_for_scope(
    index: &PredIndex,
    manifest: &Manifest,
    decision_threshold: f64,
    include_dups: bool,
) -> Vec<TaskMetrics> {
    let mut out = Vec::new();
    for task in Task::ALL {
        let pairs = scored(index, manifest, task, include_dups);
        if pairs.is_empty() {
            continue;
        }
        let accuracy_pct = task.is_categorical().then(|| {
            let correct = pairs
                .iter()
                .filter(|(s, v)| is_correct(&s.label, *v, decision_threshold))
                .count();
            100.0 * correct as f64 / pairs.len() as f64
        });
        let mae = (!task.is_binary()).then(|| {
            let total: f64 = pairs
                .iter()
                .map(|(s, v)| (v - s.label.as_number().expect("numeric task")).abs())
                .sum();
            total / pairs.len() as f64
        });
        out.push(TaskMetrics {
            task,
            count: pairs.len(),
            accuracy_pct,
            mae,
        });
    }
    out
}

/// Score all tasks that have predictions.
pub fn evaluate(
    preds: &[PredictionRecord],
    manifest: &Manifest,
    decision_threshold: f64,
) -> Result<MetricsReport> {
    let index = PredIndex::build(preds, manifest)?;
    let balanced = metrics_for_scope(&index, manifest, decision_threshold, true);
    if balanced.is_empty() {
        return Err(Error::Data(
            "no predictions match any manifest sample".into(),
        ));
    }
    let unbalanced = metrics_for_scope(&index, manifest, decision_threshold, false);
    Ok(MetricsReport {
        balanced,
        unbalanced,
    })
}

impl MetricsReport {
    /// Machine-readable JSON rendering (single line).
    pub fn to_json(&self) -> String {
        let render = |list: &[TaskMetrics]| -> Value {
            let mut map = serde_json::Map::new();
            for m in list {
                let mut obj = serde_json::Map::new();
                obj.insert("count".into(), m.count.into());
                if let Some(a) = m.accuracy_pct {
                    obj.insert("accuracy_pct".into(), a.into());
                }
                if let Some(e) = m.mae {
                    obj.insert("mae".into(), e.into());
                }
                map.insert(m.task.as_str().to_string(), obj.into());
            }
            map.into()
        };
        serde_json::json!({
            "balanced": render(&self.balanced),
            "unbalanced": render(&self.unbalanced),
        })
        .to_string()
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (name, list) in [("balanced", &self.balanced), ("originals only", &self.unbalanced)] {
            out.push_str(&format!("{name}:\n"));
            for m in list {
                out.push_str(&format!("  {:<22} n={:<6}", m.task.as_str(), m.count));
                if let Some(a) = m.accuracy_pct {
                    out.push_str(&format!(" accuracy {a:.2}%"));
                }
                if let Some(e) = m.mae {
                    out.push_str(&format!(" mae {e:.4}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// What kind of map review a disagreement suggests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecommendationKind {
    /// Model and posted speed limit disagree strongly: the posted limit may
    /// be wrong for how the road reads.
    SpeedLimitReview,
    /// Model is confident a mapped two-way road is one-way: markings may be
    /// missing or the map wrong — either way, worth a look.
    TwoWayMarkingReview,
}

impl RecommendationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecommendationKind::SpeedLimitReview => "speed-limit-review",
            RecommendationKind::TwoWayMarkingReview => "two-way-marking-review",
        }
    }
}

/// One flagged sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationRecord {
    pub sample_id: String,
    pub way_id: i64,
    pub kind: RecommendationKind,
    pub ground_truth: f64,
    pub model_value: f64,
    /// Absolute speed deviation, or the one-way probability.
    pub severity: f64,
}

impl RecommendationRecord {
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"sample_id\":{},\"way_id\":{},\"kind\":{},\"ground_truth\":{},\"model_value\":{},\"severity\":{}}}",
            serde_json::to_string(&self.sample_id).expect("strings serialize"),
            self.way_id,
            serde_json::to_string(self.kind.as_str()).expect("strings serialize"),
            self.ground_truth,
            self.model_value,
            self.severity
        )
    }
}

/// Flag samples whose predictions disagree with the map strongly enough to
/// warrant review: speed-limit predictions at least `speed_delta_mph` away
/// from the posted value, and two-way roads the model calls one-way with
/// probability at least `oneway_prob`. Only original samples are scanned —
/// balanced duplicates would repeat the same road. Sorted by severity,
/// most severe first.
pub fn recommend(
    preds: &[PredictionRecord],
    manifest: &Manifest,
    speed_delta_mph: f64,
    oneway_prob: f64,
) -> Result<Vec<RecommendationRecord>> {
    if speed_delta_mph < 0.0 || !(0.0..=1.0).contains(&oneway_prob) {
        return Err(Error::Validation(
            "speed delta must be non-negative and the one-way probability in [0, 1]".into(),
        ));
    }
    let index = PredIndex::build(preds, manifest)?;
    let mut out = Vec::new();
    for (s, value) in scored(&index, manifest, Task::SpeedLimit, false) {
        let truth = s.label.as_number().expect("speed labels are numeric");
        let deviation = (value - truth).abs();
        if deviation >= speed_delta_mph {
            out.push(RecommendationRecord {
                sample_id: s.sample_id.clone(),
                way_id: s.way_id,
                kind: RecommendationKind::SpeedLimitReview,
                ground_truth: truth,
                model_value: value,
                severity: deviation,
            });
        }
    }
    for (s, value) in scored(&index, manifest, Task::OneWay, false) {
        let one_way = s.label.as_flag().expect("one-way labels are flags");
        if !one_way && value >= oneway_prob {
            out.push(RecommendationRecord {
                sample_id: s.sample_id.clone(),
                way_id: s.way_id,
                kind: RecommendationKind::TwoWayMarkingReview,
                ground_truth: 0.0,
                model_value: value,
                severity: value,
            });
        }
    }
    out.sort_by(|a, b| {
        b.severity
            .partial_cmp(&a.severity)
            .expect("finite severities")
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use crate::datasetio::ManifestHeader;
    use crate::labelgen::{sample_id, CropSpec, Split};
    use crate::roadmatch::ThresholdConfig;

    use super::*;

    fn sample(pano: &str, task: Task, ordinal: u32, label: AttributeLabel) -> LabeledSample {
        let heading = ordinal as f64;
        LabeledSample {
            sample_id: sample_id(pano, task, ordinal, heading),
            crop: CropSpec {
                pano_id: pano.into(),
                heading_deg: heading,
                pitch_deg: 0.0,
                fov_deg: 100.0,
                width_px: 227,
                height_px: 227,
            },
            label,
            way_id: 70 + ordinal as i64,
            split: Split::Test,
            provenance: String::new(),
        }
    }

    fn manifest(samples: Vec<LabeledSample>) -> Manifest {
        Manifest::new(ManifestHeader::new(1, ThresholdConfig::default()), samples).unwrap()
    }

    fn pred(id: &str, task: Task, value: f64) -> PredictionRecord {
        PredictionRecord {
            sample_id: id.into(),
            task,
            value,
        }
    }

    #[test]
    fn predictions_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let preds = vec![
            pred("s1", Task::OneWay, 0.25),
            pred("s2", Task::SpeedLimit, 32.5),
        ];
        write_predictions(&preds, &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "{\"sample_id\":\"s1\",\"task\":\"one_way\",\"value\":0.25}\n\
             {\"sample_id\":\"s2\",\"task\":\"speed_limit\",\"value\":32.5}\n"
        );
        assert_eq!(load_predictions(&path).unwrap(), preds);

        fs::write(&path, "{\"sample_id\":\"s1\",\"task\":\"one_way\",\"value\":1.5}\n").unwrap();
        let err = load_predictions(&path).unwrap_err();
        assert!(matches!(err, Error::JsonLine { line: 1, .. }));
        assert!(err.to_string().contains("[0, 1]"));

        fs::write(
            &path,
            "{\"sample_id\":\"s1\",\"task\":\"one_way\",\"value\":0.5}\nnot json\n",
        )
        .unwrap();
        assert!(matches!(
            load_predictions(&path).unwrap_err(),
            Error::JsonLine { line: 2, .. }
        ));

        fs::write(
            &path,
            "{\"sample_id\":\"s1\",\"task\":\"one_way\",\"value\":0.5}\n\
             {\"sample_id\":\"s1\",\"task\":\"one_way\",\"value\":0.6}\n",
        )
        .unwrap();
        let err = load_predictions(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"));

        fs::write(&path, "{\"sample_id\":\"s1\",\"task\":\"zebra\",\"value\":0.5}\n").unwrap();
        assert!(load_predictions(&path)
            .unwrap_err()
            .to_string()
            .contains("zebra"));
    }

    #[test]
    fn accuracy_hand_fixture() {
        // 10 one-way samples: 6 true, 4 false.
        let mut samples = Vec::new();
        for i in 0..10u32 {
            samples.push(sample("p", Task::OneWay, i, AttributeLabel::OneWay(i < 6)));
        }
        let m = manifest(samples.clone());
        // Predict correctly for all but one (the last true one gets 0.1).
        let preds: Vec<PredictionRecord> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = if i == 5 {
                    0.1
                } else if i < 6 {
                    0.9
                } else {
                    0.2
                };
                pred(&s.sample_id, Task::OneWay, p)
            })
            .collect();
        let acc = accuracy(&preds, &m, Task::OneWay, 0.5).unwrap();
        assert_eq!(acc, 90.0);

        // Perfect predictions.
        let perfect: Vec<PredictionRecord> = samples
            .iter()
            .map(|s| {
                let truth = s.label.as_flag().unwrap();
                pred(&s.sample_id, Task::OneWay, if truth { 1.0 } else { 0.0 })
            })
            .collect();
        assert_eq!(accuracy(&perfect, &m, Task::OneWay, 0.5).unwrap(), 100.0);

        // All probabilities exactly at the threshold classify positive.
        let ties: Vec<PredictionRecord> = samples
            .iter()
            .map(|s| pred(&s.sample_id, Task::OneWay, 0.5))
            .collect();
        assert_eq!(accuracy(&ties, &m, Task::OneWay, 0.5).unwrap(), 60.0);
    }

    #[test]
    fn accuracy_is_invariant_under_monotone_probability_transforms() {
        let samples: Vec<LabeledSample> = (0..8u32)
            .map(|i| sample("p", Task::BikeLane, i, AttributeLabel::BikeLane(i % 3 == 0)))
            .collect();
        let m = manifest(samples.clone());
        let raw: Vec<f64> = vec![0.1, 0.4, 0.5, 0.55, 0.62, 0.7, 0.9, 0.97];
        let preds: Vec<PredictionRecord> = samples
            .iter()
            .zip(&raw)
            .map(|(s, p)| pred(&s.sample_id, Task::BikeLane, *p))
            .collect();
        // Strictly monotone, fixes 0.5, keeps [0,1]: cubic bend around the
        // threshold.
        let bent: Vec<PredictionRecord> = samples
            .iter()
            .zip(&raw)
            .map(|(s, p)| {
                let q = 0.5 + 4.0 * (p - 0.5).powi(3);
                pred(&s.sample_id, Task::BikeLane, q)
            })
            .collect();
        let a = accuracy(&preds, &m, Task::BikeLane, 0.5).unwrap();
        let b = accuracy(&bent, &m, Task::BikeLane, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_errors() {
        let samples = vec![sample("p", Task::OneWay, 0, AttributeLabel::OneWay(true))];
        let m = manifest(samples.clone());
        let err = accuracy(
            &[pred("nope", Task::OneWay, 0.5)],
            &m,
            Task::OneWay,
            0.5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown sample id"));

        let err = accuracy(&[], &m, Task::OneWay, 0.5).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "empty intersection: {err}");

        // Prediction whose task disagrees with the manifest sample.
        let err = accuracy(
            &[pred(&samples[0].sample_id, Task::BikeLane, 0.5)],
            &m,
            Task::BikeLane,
            0.5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("task"));

        let err = accuracy(&[], &m, Task::HeadingAngle, 0.5).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "continuous task");
    }

    #[test]
    fn exact_match_rule_for_lanes_and_speed_classes() {
        let samples = vec![
            sample("p", Task::NumLanes, 0, AttributeLabel::NumLanes(2)),
            sample("p", Task::NumLanes, 1, AttributeLabel::NumLanes(3)),
            sample("p", Task::SpeedLimit, 2, AttributeLabel::SpeedLimit(49.709680)),
        ];
        let m = manifest(samples.clone());
        let preds = vec![
            pred(&samples[0].sample_id, Task::NumLanes, 2.0),
            pred(&samples[1].sample_id, Task::NumLanes, 2.0),
        ];
        assert_eq!(accuracy(&preds, &m, Task::NumLanes, 0.5).unwrap(), 50.0);
        let preds = vec![pred(&samples[2].sample_id, Task::SpeedLimit, 49.709680)];
        assert_eq!(accuracy(&preds, &m, Task::SpeedLimit, 0.5).unwrap(), 100.0);
        let preds = vec![pred(&samples[2].sample_id, Task::SpeedLimit, 50.0)];
        assert_eq!(accuracy(&preds, &m, Task::SpeedLimit, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn mae_hand_fixture_and_translation() {
        let samples = vec![
            sample("p", Task::HeadingAngle, 0, AttributeLabel::HeadingAngle(10.0)),
            sample("p", Task::HeadingAngle, 1, AttributeLabel::HeadingAngle(20.0)),
        ];
        let m = manifest(samples.clone());
        let preds = vec![
            pred(&samples[0].sample_id, Task::HeadingAngle, 12.0),
            pred(&samples[1].sample_id, Task::HeadingAngle, 16.0),
        ];
        assert_eq!(mae(&preds, &m, Task::HeadingAngle).unwrap(), 3.0);

        let exact = vec![
            pred(&samples[0].sample_id, Task::HeadingAngle, 10.0),
            pred(&samples[1].sample_id, Task::HeadingAngle, 20.0),
        ];
        assert_eq!(mae(&exact, &m, Task::HeadingAngle).unwrap(), 0.0);

        // Translating perfect predictions by c moves MAE to exactly |c|.
        let c = -7.25;
        let shifted = vec![
            pred(&samples[0].sample_id, Task::HeadingAngle, 10.0 + c),
            pred(&samples[1].sample_id, Task::HeadingAngle, 20.0 + c),
        ];
        assert_eq!(mae(&shifted, &m, Task::HeadingAngle).unwrap(), c.abs());

        let err = mae(&exact, &m, Task::OneWay).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "flag task has no mae");
    }

    #[test]
    fn balanced_duplicates_fall_back_to_original_predictions() {
        let orig = sample("p", Task::OneWay, 0, AttributeLabel::OneWay(true));
        let mut dup = orig.clone();
        dup.sample_id = format!("{}-dup01", orig.sample_id);
        let other = sample("p", Task::OneWay, 1, AttributeLabel::OneWay(false));
        let m = manifest(vec![orig.clone(), dup, other.clone()]);
        let preds = vec![
            pred(&orig.sample_id, Task::OneWay, 0.9),
            pred(&other.sample_id, Task::OneWay, 0.8), // wrong
        ];
        let report = evaluate(&preds, &m, 0.5).unwrap();
        let bal = &report.balanced[0];
        assert_eq!(bal.task, Task::OneWay);
        assert_eq!(bal.count, 3, "duplicate resolved via its original");
        assert!((bal.accuracy_pct.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let unbal = &report.unbalanced[0];
        assert_eq!(unbal.count, 2, "originals only");
        assert_eq!(unbal.accuracy_pct.unwrap(), 50.0);
        let json = report.to_json();
        assert!(json.contains("\"balanced\""));
        assert!(report.render_table().contains("one_way"));
    }

    #[test]
    fn recommendations_worked_examples() {
        let speed = sample("p", Task::SpeedLimit, 0, AttributeLabel::SpeedLimit(50.0));
        let near = sample("p", Task::SpeedLimit, 1, AttributeLabel::SpeedLimit(25.0));
        let twoway = sample("p", Task::OneWay, 2, AttributeLabel::OneWay(false));
        let oneway = sample("p", Task::OneWay, 3, AttributeLabel::OneWay(true));
        let m = manifest(vec![speed.clone(), near.clone(), twoway.clone(), oneway.clone()]);
        let preds = vec![
            pred(&speed.sample_id, Task::SpeedLimit, 30.0), // |Δ| = 20 → review
            pred(&near.sample_id, Task::SpeedLimit, 27.0),  // |Δ| = 2 → quiet
            pred(&twoway.sample_id, Task::OneWay, 0.95),    // confident wrong → review
            pred(&oneway.sample_id, Task::OneWay, 0.99),    // confident right → quiet
        ];
        let recs = recommend(&preds, &m, DEFAULT_SPEED_DELTA_MPH, DEFAULT_ONEWAY_PROB).unwrap();
        assert_eq!(recs.len(), 2);
        // Sorted by severity descending: 20 before 0.95.
        assert_eq!(recs[0].kind, RecommendationKind::SpeedLimitReview);
        assert_eq!(recs[0].severity, 20.0);
        assert_eq!(recs[0].ground_truth, 50.0);
        assert_eq!(recs[0].model_value, 30.0);
        assert_eq!(recs[0].way_id, speed.way_id);
        assert_eq!(recs[1].kind, RecommendationKind::TwoWayMarkingReview);
        assert_eq!(recs[1].severity, 0.95);
        let line = recs[0].to_json_line();
        assert!(line.contains("\"kind\":\"speed-limit-review\""));
        assert!(line.contains("\"severity\":20"));
    }

    #[test]
    fn recommendation_thresholds_are_inclusive_and_perfect_predictions_are_quiet() {
        let speed = sample("p", Task::SpeedLimit, 0, AttributeLabel::SpeedLimit(40.0));
        let twoway = sample("p", Task::OneWay, 1, AttributeLabel::OneWay(false));
        let m = manifest(vec![speed.clone(), twoway.clone()]);

        let preds = vec![
            pred(&speed.sample_id, Task::SpeedLimit, 30.0), // exactly 10 off
            pred(&twoway.sample_id, Task::OneWay, 0.9),     // exactly at 0.9
        ];
        let recs = recommend(&preds, &m, 10.0, 0.9).unwrap();
        assert_eq!(recs.len(), 2, "boundaries are inclusive");

        let perfect = vec![
            pred(&speed.sample_id, Task::SpeedLimit, 40.0),
            pred(&twoway.sample_id, Task::OneWay, 0.0),
        ];
        assert!(recommend(&perfect, &m, 10.0, 0.9).unwrap().is_empty());

        // Duplicates never produce their own recommendations.
        let mut dup = speed.clone();
        dup.sample_id = format!("{}-dup01", speed.sample_id);
        let m2 = manifest(vec![speed.clone(), dup, twoway.clone()]);
        let recs = recommend(&preds, &m2, 10.0, 0.9).unwrap();
        assert_eq!(recs.len(), 2, "duplicate did not double-report");
    }
}
