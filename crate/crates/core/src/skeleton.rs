//! Pose sequences: the `.skel.jsonl` session format, confidence imputation,
//! per-part standardisation, and fixed-length frame sampling.

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// COCO-17 keypoint count.
pub const NUM_JOINTS: usize = 17;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Default confidence below which a joint is imputed.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

/// Standard deviations at or below this are treated as a constant channel.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonFrame {
    pub joints: [Joint; NUM_JOINTS],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Asd,
    Td,
    Unlabeled,
}

impl Label {
    /// Class index used by the classifier (ASD = 0, TD = 1).
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Asd => Some(0),
            Label::Td => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class_index(i: usize) -> Label {
        if i == 0 {
            Label::Asd
        } else {
            Label::Td
        }
    }

    fn as_json(self) -> Option<&'static str> {
        match self {
            Label::Asd => Some("ASD"),
            Label::Td => Some("TD"),
            Label::Unlabeled => None,
        }
    }

    pub fn parse(s: Option<&str>) -> Option<Label> {
        match s {
            Some("ASD") => Some(Label::Asd),
            Some("TD") => Some(Label::Td),
            None => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_json().unwrap_or("unlabeled"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub session_id: String,
    pub fps: f64,
    pub frames: Vec<SkeletonFrame>,
    pub label: Label,
}

impl SkeletonSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }
}

/// Joint index sets for the two streams. Part 1 is the upper body, part 2 the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartAssignment {
    pub upper_body: Vec<usize>,
    pub head: Vec<usize>,
}

impl Default for PartAssignment {
    fn default() -> Self {
        Self {
            upper_body: (5..=12).collect(),
            head: (0..=4).collect(),
        }
    }
}

impl PartAssignment {
    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("upper_body", &self.upper_body), ("head", &self.head)] {
            if set.is_empty() {
                return Err(Error::Config(format!("part `{name}` is empty")));
            }
            if let Some(&j) = set.iter().find(|&&j| j >= NUM_JOINTS) {
                return Err(Error::Config(format!("part `{name}` has joint {j} >= 17")));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::Config(format!("part `{name}` repeats a joint")));
            }
        }
        if let Some(j) = self.head.iter().find(|j| self.upper_body.contains(j)) {
            return Err(Error::Config(format!("joint {j} belongs to both parts")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    session_id: String,
    fps: serde_json::Number,
    label: Option<String>,
}

fn fps_number(fps: f64) -> serde_json::Number {
    if fps.fract() == 0.0 && fps > 0.0 && fps < 1e15 {
        serde_json::Number::from(fps as u64)
    } else {
        serde_json::Number::from_f64(fps).expect("finite fps")
    }
}

/// Parses a session from its text lines.
pub fn parse_session<R: BufRead>(reader: R) -> Result<SkeletonSequence> {
    let mut lines = reader.lines();
    let io_err = |line: usize, e: std::io::Error| Error::Format {
        line,
        msg: e.to_string(),
    };
    let header = match lines.next() {
        Some(l) => l.map_err(|e| io_err(1, e))?,
        None => {
            return Err(Error::Format {
                line: 1,
                msg: "missing metadata record".into(),
            })
        }
    };
    let meta: Meta = serde_json::from_str(&header).map_err(|e| Error::Format {
        line: 1,
        msg: format!("bad metadata: {e}"),
    })?;
    let fps = meta.fps.as_f64().unwrap_or(f64::NAN);
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Format {
            line: 1,
            msg: format!("fps must be positive, got {}", meta.fps),
        });
    }
    let label = Label::parse(meta.label.as_deref()).ok_or_else(|| Error::Format {
        line: 1,
        msg: format!("unknown label {:?}", meta.label.unwrap_or_default()),
    })?;

    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| io_err(lineno, e))?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(parse_frame(&line, lineno)?);
    }
    if frames.len() < 2 {
        return Err(Error::Format {
            line: frames.len() + 2,
            msg: format!("a session needs at least 2 frames, found {}", frames.len()),
        });
    }
    Ok(SkeletonSequence {
        session_id: meta.session_id,
        fps,
        frames,
        label,
    })
}

fn parse_frame(line: &str, lineno: usize) -> Result<SkeletonFrame> {
    let fmt_err = |msg: String| Error::Format { line: lineno, msg };
    let raw: Vec<Vec<f64>> =
        serde_json::from_str(line).map_err(|e| fmt_err(format!("bad frame: {e}")))?;
    if raw.len() != NUM_JOINTS {
        return Err(fmt_err(format!(
            "expected 17 joints, found {}",
            raw.len()
        )));
    }
    let mut joints = [Joint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    }; NUM_JOINTS];
    for (j, triple) in raw.iter().enumerate() {
        let [x, y, c] = triple[..] else {
            return Err(fmt_err(format!(
                "joint {j}: expected [x, y, c], found {} values",
                triple.len()
            )));
        };
        if !(x.is_finite() && y.is_finite() && c.is_finite()) {
            return Err(fmt_err(format!("joint {j}: non-finite value")));
        }
        if !(0.0..=1.0).contains(&c) {
            return Err(fmt_err(format!("joint {j}: confidence {c} outside [0, 1]")));
        }
        joints[j] = Joint {
            x,
            y,
            confidence: c,
        };
    }
    Ok(SkeletonFrame { joints })
}

pub fn parse_session_str(text: &str) -> Result<SkeletonSequence> {
    parse_session(text.as_bytes())
}

pub fn read_session(path: &Path) -> Result<SkeletonSequence> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_session(std::io::BufReader::new(file))
}

/// Serialises a session; floats use shortest round-trip formatting.
pub fn write_session(seq: &SkeletonSequence) -> String {
    let meta = Meta {
        session_id: seq.session_id.clone(),
        fps: fps_number(seq.fps),
        label: seq.label.as_json().map(str::to_string),
    };
    let mut out = serde_json::to_string(&meta).expect("metadata serialises");
    out.push('\n');
    for frame in &seq.frames {
        let triples: Vec<[f64; 3]> = frame
            .joints
            .iter()
            .map(|j| [j.x, j.y, j.confidence])
            .collect();
        out.push_str(&serde_json::to_string(&triples).expect("finite frame"));
        out.push('\n');
    }
    out
}

pub fn write_session_file(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    std::fs::write(path, write_session(seq)).map_err(|e| Error::io(path, e))
}

/// Standardises each coordinate channel of the given joints using the mean and
/// population standard deviation over all frames and those joints.
///
/// Output shape is `[T, joints.len(), 2]`. A channel whose deviation is at most
/// [`STD_GUARD`] is returned as zeros.
pub fn normalize_part(seq: &SkeletonSequence, joints: &[usize]) -> Result<Tensor> {
    if seq.frames.len() < 2 {
        return Err(Error::Data("normalisation needs at least 2 frames".into()));
    }
    if joints.is_empty() || joints.iter().any(|&j| j >= NUM_JOINTS) {
        return Err(Error::Config(format!("invalid joint set {joints:?}")));
    }
    let t = seq.frames.len();
    let n = joints.len();
    let mut data = vec![0.0; t * n * 2];
    for (fi, frame) in seq.frames.iter().enumerate() {
        for (k, &j) in joints.iter().enumerate() {
            data[(fi * n + k) * 2] = frame.joints[j].x;
            data[(fi * n + k) * 2 + 1] = frame.joints[j].y;
        }
    }
    for ch in 0..2 {
        let count = (t * n) as f64;
        let mean = data.iter().skip(ch).step_by(2).sum::<f64>() / count;
        let var = data
            .iter()
            .skip(ch)
            .step_by(2)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / count;
        let std = var.sqrt();
        let degenerate = std <= STD_GUARD;
        if degenerate {
            log::warn!(
                "session {}: constant channel {} over joints {:?}, emitting zeros",
                seq.session_id,
                ch,
                joints
            );
        }
        for v in data.iter_mut().skip(ch).step_by(2) {
            *v = if degenerate { 0.0 } else { (*v - mean) / std };
        }
    }
    Tensor::new(vec![t, n, 2], data)
}

/// Replaces joints whose confidence is below `threshold` with the last valid
/// observation of that joint (or the first later one when none precedes it),
/// and sets their confidence to 0.
pub fn impute_low_confidence(seq: &SkeletonSequence, threshold: f64) -> Result<SkeletonSequence> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let mut out = seq.clone();
    for j in 0..NUM_JOINTS {
        let valid = |f: &SkeletonFrame| f.joints[j].confidence >= threshold;
        let Some(first) = seq.frames.iter().position(valid) else {
            return Err(Error::Imputation { joint: j });
        };
        let mut last = seq.frames[first].joints[j];
        for (fi, frame) in seq.frames.iter().enumerate() {
            if valid(frame) {
                last = frame.joints[j];
            } else {
                out.frames[fi].joints[j] = Joint {
                    x: last.x,
                    y: last.y,
                    confidence: 0.0,
                };
            }
        }
    }
    Ok(out)
}

/// Frame indices picked by [`sample_frames`]: `floor(i * t_in / t_out)`.
pub fn sample_indices(t_in: usize, t_out: usize) -> Vec<usize> {
    (0..t_out).map(|i| i * t_in / t_out).collect()
}

pub fn sample_frames(seq: &SkeletonSequence, t_out: usize) -> Result<SkeletonSequence> {
    if seq.frames.is_empty() || t_out == 0 {
        return Err(Error::Parameter(
            "sampling needs a nonempty sequence and a positive frame count".into(),
        ));
    }
    let frames = sample_indices(seq.frames.len(), t_out)
        .into_iter()
        .map(|i| seq.frames[i].clone())
        .collect();
    Ok(SkeletonSequence {
        frames,
        ..seq.clone()
    })
}

/// Normalised `(head, upper_body)` coordinate tensors, shapes `[T, |head|, 2]`
/// and `[T, |upper_body|, 2]`.
pub fn split_streams(seq: &SkeletonSequence, parts: &PartAssignment) -> Result<(Tensor, Tensor)> {
    parts.validate()?;
    Ok((
        normalize_part(seq, &parts.head)?,
        normalize_part(seq, &parts.upper_body)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_with(f: impl Fn(usize) -> (f64, f64, f64)) -> SkeletonFrame {
        let mut joints = [Joint {
            x: 0.0,
            y: 0.0,
            confidence: 1.0,
        }; NUM_JOINTS];
        for (j, joint) in joints.iter_mut().enumerate() {
            let (x, y, c) = f(j);
            *joint = Joint { x, y, confidence: c };
        }
        SkeletonFrame { joints }
    }

    fn seq_of(frames: Vec<SkeletonFrame>) -> SkeletonSequence {
        SkeletonSequence {
            session_id: "s".into(),
            fps: 17.0,
            frames,
            label: Label::Asd,
        }
    }

    fn ramp(t: usize) -> SkeletonSequence {
        seq_of(
            (0..t)
                .map(|i| frame_with(|j| (i as f64 + j as f64 * 0.5, 2.0 * j as f64 - i as f64, 0.9)))
                .collect(),
        )
    }

    #[test]
    fn metadata_fps_parses() {
        let mut text = String::from("{\"session_id\": \"a\", \"fps\": 17, \"label\": \"TD\"}\n");
        let frame = serde_json::to_string(&vec![[1.0, 2.0, 0.5]; 17]).unwrap();
        text.push_str(&frame);
        text.push('\n');
        text.push_str(&frame);
        let s = parse_session_str(&text).unwrap();
        assert_eq!(s.fps, 17.0);
        assert_eq!(s.label, Label::Td);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn sixteen_joints_rejected_with_line() {
        let good = serde_json::to_string(&vec![[1.0, 2.0, 0.5]; 17]).unwrap();
        let bad = serde_json::to_string(&vec![[1.0, 2.0, 0.5]; 16]).unwrap();
        let text = format!("{{\"session_id\":\"a\",\"fps\":17,\"label\":null}}\n{good}\n{bad}\n");
        match parse_session_str(&text) {
            Err(Error::Format { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("expected 17 joints"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let good = serde_json::to_string(&vec![[1.0, 2.0, 0.5]; 17]).unwrap();
        let text = format!("{{\"session_id\":\"a\",\"fps\":17,\"label\":\"XX\"}}\n{good}\n{good}\n");
        assert!(matches!(parse_session_str(&text), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn overflowing_number_rejected() {
        let mut triples = vec![[1.0, 2.0, 0.5]; 17];
        triples[0][0] = 1.0;
        let good = serde_json::to_string(&triples).unwrap();
        let bad = good.replacen("1.0", "1e999", 1);
        let text = format!("{{\"session_id\":\"a\",\"fps\":17,\"label\":null}}\n{good}\n{bad}\n");
        assert!(matches!(parse_session_str(&text), Err(Error::Format { line: 3, .. })));
    }

    #[test]
    fn write_parse_roundtrip_is_byte_stable() {
        let mut s = ramp(5);
        s.frames[2].joints[3].x = 0.1 + 0.2;
        s.frames[1].joints[9].confidence = 1.0 / 3.0;
        s.label = Label::Unlabeled;
        let text = write_session(&s);
        assert!(text.starts_with("{\"session_id\":\"s\",\"fps\":17,\"label\":null}\n"));
        let back = parse_session_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(write_session(&back), text);
    }

    #[test]
    fn normalize_hand_values() {
        // one joint, x = [1, 2, 3]
        let s = seq_of((0..3).map(|i| frame_with(|_| (1.0 + i as f64, 5.0, 1.0))).collect());
        let t = normalize_part(&s, &[0]).unwrap();
        let xs: Vec<f64> = t.data().iter().step_by(2).copied().collect();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in xs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // constant y channel
        assert!(t.data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent() {
        let s = ramp(7);
        let joints = [5, 6, 7, 8];
        let once = normalize_part(&s, &joints).unwrap();
        let mut s2 = s.clone();
        for (fi, frame) in s2.frames.iter_mut().enumerate() {
            for (k, &j) in joints.iter().enumerate() {
                frame.joints[j].x = once.data()[(fi * 4 + k) * 2];
                frame.joints[j].y = once.data()[(fi * 4 + k) * 2 + 1];
            }
        }
        let twice = normalize_part(&s2, &joints).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-9);
    }

    #[test]
    fn impute_noop_when_confident() {
        let s = ramp(6);
        assert_eq!(impute_low_confidence(&s, 0.3).unwrap(), s);
    }

    #[test]
    fn impute_copies_previous_frame() {
        let mut s = ramp(8);
        s.frames[5].joints[9].confidence = 0.1;
        let out = impute_low_confidence(&s, 0.3).unwrap();
        assert_eq!(out.frames[5].joints[9].x, s.frames[4].joints[9].x);
        assert_eq!(out.frames[5].joints[9].y, s.frames[4].joints[9].y);
        assert_eq!(out.frames[5].joints[9].confidence, 0.0);
        assert_eq!(out.frames[6], s.frames[6]);
    }

    #[test]
    fn impute_leading_gap_uses_next_valid() {
        let mut s = ramp(5);
        s.frames[0].joints[2].confidence = 0.0;
        s.frames[1].joints[2].confidence = 0.2;
        let out = impute_low_confidence(&s, 0.3).unwrap();
        assert_eq!(out.frames[0].joints[2].x, s.frames[2].joints[2].x);
        assert_eq!(out.frames[1].joints[2].x, s.frames[2].joints[2].x);
    }

    #[test]
    fn impute_fails_when_joint_never_valid() {
        let mut s = ramp(4);
        for f in &mut s.frames {
            f.joints[11].confidence = 0.05;
        }
        assert!(matches!(
            impute_low_confidence(&s, 0.3),
            Err(Error::Imputation { joint: 11 })
        ));
    }

    #[test]
    fn sample_index_formula() {
        assert_eq!(sample_indices(4, 2), vec![0, 2]);
        let idx = sample_indices(340, 64);
        assert_eq!(idx.len(), 64);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*idx.last().unwrap(), 334);
        let s = ramp(9);
        assert_eq!(sample_frames(&s, 9).unwrap(), s);
    }

    #[test]
    fn default_streams_shapes_and_means() {
        let s = ramp(10);
        let (head, body) = split_streams(&s, &PartAssignment::default()).unwrap();
        assert_eq!(head.shape(), &[10, 5, 2]);
        assert_eq!(body.shape(), &[10, 8, 2]);
        for t in [&head, &body] {
            for ch in 0..2 {
                let vals: Vec<f64> = t.data().iter().skip(ch).step_by(2).copied().collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn overlapping_parts_rejected() {
        let parts = PartAssignment {
            upper_body: vec![4, 5, 6],
            head: vec![0, 4],
        };
        assert!(parts.validate().is_err());
    }
}
