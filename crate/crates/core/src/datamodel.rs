//! Samples, manifests and task indexing.
//!
//! A sample is one captioning instance: every view of a scenario, the target
//! object, the phase being described, its time window and the reference
//! caption. Times are whole seconds; frames are sampled at 1 fps so a second
//! index is also a frame index.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Number of distinct (object, segment) tasks.
pub const NUM_TASKS: usize = 10;

/// The only supported frame rate.
pub const FPS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    PreRecognition = 0,
    Recognition = 1,
    Judgment = 2,
    Action = 3,
    Avoidance = 4,
}

impl Segment {
    pub const ALL: [Segment; 5] = [
        Segment::PreRecognition,
        Segment::Recognition,
        Segment::Judgment,
        Segment::Action,
        Segment::Avoidance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::PreRecognition => "pre-recognition",
            Segment::Recognition => "recognition",
            Segment::Judgment => "judgment",
            Segment::Action => "action",
            Segment::Avoidance => "avoidance",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|seg| seg.as_str() == lower)
            .ok_or_else(|| Error::invalid(format!("unknown segment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetObject {
    Pedestrian = 0,
    Vehicle = 1,
}

impl TargetObject {
    pub const ALL: [TargetObject; 2] = [TargetObject::Pedestrian, TargetObject::Vehicle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetObject::Pedestrian => "pedestrian",
            TargetObject::Vehicle => "vehicle",
        }
    }
}

impl fmt::Display for TargetObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetObject {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pedestrian" => Ok(TargetObject::Pedestrian),
            "vehicle" => Ok(TargetObject::Vehicle),
            _ => Err(Error::invalid(format!("unknown object `{s}`"))),
        }
    }
}

/// Index of the (object, segment) pair in the task embedding table.
pub fn task_id(object: TargetObject, segment: Segment) -> usize {
    object.index() * Segment::ALL.len() + segment.index()
}

/// Inverse of [`task_id`].
pub fn task_from_id(id: usize) -> Option<(TargetObject, Segment)> {
    if id >= NUM_TASKS {
        return None;
    }
    let object = TargetObject::ALL[id / Segment::ALL.len()];
    let segment = Segment::from_index(id % Segment::ALL.len())?;
    Some((object, segment))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub video_refs: Vec<String>,
    pub caption: String,
    pub object: TargetObject,
    pub segment: Segment,
    pub start_s: u64,
    pub end_s: u64,
}

impl Sample {
    pub fn task_id(&self) -> usize {
        task_id(self.object, self.segment)
    }

    pub fn num_views(&self) -> usize {
        self.video_refs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: &str| Error::Validation {
            sample: self.id.clone(),
            field: field.to_string(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(fail("id", "must be non-empty"));
        }
        if self.video_refs.is_empty() {
            return Err(fail("videos", "at least one video is required"));
        }
        if self.caption.trim().is_empty() {
            return Err(fail("caption", "must be non-empty"));
        }
        if self.start_s > self.end_s {
            return Err(fail(
                "start_s",
                &format!("start_s {} exceeds end_s {}", self.start_s, self.end_s),
            ));
        }
        Ok(())
    }
}

/// Inclusive frame-index window `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventWindow {
    pub start: usize,
    pub end: usize,
}

impl EventWindow {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::EmptyWindow(format!("start {start} after end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start..=self.end).contains(&index)
    }
}

/// Frame indices of the sample's event, clamped to the available frames.
///
/// Windows that run past the end of the video are clamped (videos may stop
/// early); a window that starts after the last frame is an error.
pub fn slice_event(sample: &Sample, total_frames: usize) -> Result<EventWindow> {
    if total_frames == 0 {
        return Err(Error::invalid("total_frames must be at least 1"));
    }
    let start = sample.start_s as usize;
    if start >= total_frames || sample.start_s > sample.end_s {
        return Err(Error::EmptyWindow(format!(
            "sample `{}`: window [{}, {}] starts beyond last frame {}",
            sample.id,
            sample.start_s,
            sample.end_s,
            total_frames - 1
        )));
    }
    let end = (sample.end_s as usize).min(total_frames - 1);
    EventWindow::new(start, end)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dataset: String,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn new(dataset: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let manifest = Self {
            dataset: dataset.into(),
            samples,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for sample in &self.samples {
            sample.validate()?;
            if !seen.insert(sample.id.as_str()) {
                return Err(Error::Validation {
                    sample: sample.id.clone(),
                    field: "id".into(),
                    message: "duplicate sample id".into(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let top = |field: &str, message: &str| Error::Validation {
        sample: "<manifest>".into(),
        field: field.into(),
        message: message.into(),
    };
    let obj = root
        .as_object()
        .ok_or_else(|| top("<root>", "expected a JSON object"))?;
    let dataset = obj
        .get("dataset")
        .and_then(Value::as_str)
        .ok_or_else(|| top("dataset", "missing or not a string"))?
        .to_string();
    match obj.get("fps").and_then(Value::as_u64) {
        Some(FPS) => {}
        Some(other) => return Err(top("fps", &format!("only fps=1 is supported, got {other}"))),
        None => return Err(top("fps", "missing or not an integer")),
    }
    let records = obj
        .get("samples")
        .and_then(Value::as_array)
        .ok_or_else(|| top("samples", "missing or not an array"))?;

    let samples = records
        .iter()
        .enumerate()
        .map(|(i, record)| parse_sample(i, record))
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(dataset, samples)
}

fn parse_sample(index: usize, record: &Value) -> Result<Sample> {
    let fallback = format!("#{index}");
    let obj = record.as_object().ok_or_else(|| Error::Validation {
        sample: fallback.clone(),
        field: "<record>".into(),
        message: "expected an object".into(),
    })?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Validation {
            sample: fallback,
            field: "id".into(),
            message: "missing or not a string".into(),
        })?;
    let fail = |field: &str, message: String| Error::Validation {
        sample: id.clone(),
        field: field.into(),
        message,
    };
    let string = |field: &str| -> Result<&str> {
        obj.get(field)
            .and_then(Value::as_str)
            .ok_or_else(|| fail(field, "missing or not a string".into()))
    };
    let seconds = |field: &str| -> Result<u64> {
        obj.get(field)
            .and_then(Value::as_u64)
            .ok_or_else(|| fail(field, "missing or not a non-negative integer".into()))
    };

    let video_refs = obj
        .get("videos")
        .and_then(Value::as_array)
        .ok_or_else(|| fail("videos", "missing or not an array".into()))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| fail("videos", "entries must be strings".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let caption = string("caption")?.to_string();
    let object = string("object")?
        .parse()
        .map_err(|e: Error| fail("object", e.to_string()))?;
    let segment = string("segment")?
        .parse()
        .map_err(|e: Error| fail("segment", e.to_string()))?;
    let sample = Sample {
        video_refs,
        caption,
        object,
        segment,
        start_s: seconds("start_s")?,
        end_s: seconds("end_s")?,
        id,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn manifest_to_json(manifest: &Manifest) -> Value {
    let samples: Vec<Value> = manifest
        .samples
        .iter()
        .map(|s| {
            let mut m = Map::new();
            m.insert("id".into(), json!(s.id));
            m.insert("videos".into(), json!(s.video_refs));
            m.insert("caption".into(), json!(s.caption));
            m.insert("object".into(), json!(s.object.as_str()));
            m.insert("segment".into(), json!(s.segment.as_str()));
            m.insert("start_s".into(), json!(s.start_s));
            m.insert("end_s".into(), json!(s.end_s));
            Value::Object(m)
        })
        .collect();
    json!({ "dataset": manifest.dataset, "fps": FPS, "samples": samples })
}

pub fn serialize_manifest(manifest: &Manifest) -> String {
    serde_json::to_string_pretty(&manifest_to_json(manifest)).expect("manifest serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json(id: &str, start: u64, end: u64) -> String {
        format!(
            r#"{{"id": "{id}", "videos": ["a.pnfr", "b.pnfr", "c.pnfr"], "caption": "the vehicle brakes",
                "object": "vehicle", "segment": "action", "start_s": {start}, "end_s": {end}}}"#
        )
    }

    fn manifest_text(samples: &[String]) -> String {
        format!(
            r#"{{"dataset": "toy", "fps": 1, "samples": [{}]}}"#,
            samples.join(",")
        )
    }

    #[test]
    fn parses_one_sample() {
        let m = parse_manifest(&manifest_text(&[sample_json("s0", 1, 4)])).unwrap();
        assert_eq!(m.len(), 1);
        let s = &m.samples[0];
        assert_eq!(s.num_views(), 3);
        assert_eq!(s.segment, Segment::Action);
        assert_eq!(s.object, TargetObject::Vehicle);
        assert_eq!((s.start_s, s.end_s), (1, 4));
    }

    #[test]
    fn reversed_window_is_rejected() {
        let err = parse_manifest(&manifest_text(&[sample_json("bad", 7, 5)])).unwrap_err();
        match err {
            Error::Validation { sample, field, .. } => {
                assert_eq!(sample, "bad");
                assert_eq!(field, "start_s");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_sample_list_is_valid() {
        let m = parse_manifest(&manifest_text(&[])).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn malformed_json_reports_offset() {
        let text = "{\"dataset\": \"x\",\n \"fps\": 1, \"samples\": [}";
        match parse_manifest(text).unwrap_err() {
            Error::Parse { offset, .. } => {
                assert!(offset < text.len());
                assert_eq!(&text[offset..offset + 1], "}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_sample_and_field() {
        let text = manifest_text(&[r#"{"id": "x1", "videos": ["a"], "caption": "c",
            "object": "vehicle", "start_s": 0, "end_s": 1}"#
            .to_string()]);
        match parse_manifest(&text).unwrap_err() {
            Error::Validation { sample, field, .. } => {
                assert_eq!(sample, "x1");
                assert_eq!(field, "segment");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = manifest_text(&[sample_json("d", 0, 1), sample_json("d", 0, 2)]);
        assert!(matches!(
            parse_manifest(&text).unwrap_err(),
            Error::Validation { .. }
        ));
    }

    #[test]
    fn wrong_fps_is_rejected() {
        let text = r#"{"dataset": "x", "fps": 30, "samples": []}"#;
        assert!(parse_manifest(text).is_err());
    }

    #[test]
    fn segment_parsing_is_case_insensitive() {
        for seg in Segment::ALL {
            assert_eq!(seg.as_str().parse::<Segment>().unwrap(), seg);
            assert_eq!(seg.as_str().to_uppercase().parse::<Segment>().unwrap(), seg);
        }
        assert!("Pre-Recognition".parse::<Segment>().is_ok());
        assert!("landing".parse::<Segment>().is_err());
        assert_eq!("VEHICLE".parse::<TargetObject>().unwrap(), TargetObject::Vehicle);
    }

    #[test]
    fn task_ids_cover_ten_slots() {
        assert_eq!(task_id(TargetObject::Pedestrian, Segment::PreRecognition), 0);
        assert_eq!(task_id(TargetObject::Vehicle, Segment::Avoidance), 9);
        let mut ids = HashSet::new();
        for object in TargetObject::ALL {
            for segment in Segment::ALL {
                let id = task_id(object, segment);
                assert!(id < NUM_TASKS);
                assert_eq!(task_from_id(id), Some((object, segment)));
                ids.insert(id);
            }
        }
        assert_eq!(ids.len(), NUM_TASKS);
        assert_eq!(task_from_id(10), None);
    }

    fn window_sample(start: u64, end: u64) -> Sample {
        Sample {
            id: "w".into(),
            video_refs: vec!["v".into()],
            caption: "c".into(),
            object: TargetObject::Pedestrian,
            segment: Segment::Judgment,
            start_s: start,
            end_s: end,
        }
    }

    #[test]
    fn slice_event_cases() {
        assert_eq!(
            slice_event(&window_sample(0, 9), 10).unwrap(),
            EventWindow { start: 0, end: 9 }
        );
        assert_eq!(
            slice_event(&window_sample(4, 4), 10).unwrap(),
            EventWindow { start: 4, end: 4 }
        );
        assert_eq!(
            slice_event(&window_sample(3, 100), 10).unwrap(),
            EventWindow { start: 3, end: 9 }
        );
        assert!(matches!(
            slice_event(&window_sample(10, 12), 10),
            Err(Error::EmptyWindow(_))
        ));
        assert!(slice_event(&window_sample(0, 0), 0).is_err());
    }

    #[test]
    fn serialize_then_parse_is_identity() {
        let text = manifest_text(&[sample_json("a", 0, 3), sample_json("b", 2, 2)]);
        let m = parse_manifest(&text).unwrap();
        let again = parse_manifest(&serialize_manifest(&m)).unwrap();
        assert_eq!(m, again);
    }
}
