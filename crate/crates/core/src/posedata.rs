//! Pose-sequence data model: detector-output ingestion (pose-JSON), crop
//! normalization, and frame sampling.
//!
//! Joint order everywhere: wrist, then thumb/index/middle/ring/pinky, each
//! finger base to tip. Coordinates are pixels in the source image until
//! [`normalize_to_crop`] maps them into the 256x256 crop frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINT_COUNT: usize = 21;
/// Side of the normalized crop in pixels.
pub const CROP_SIZE: f64 = 256.0;

#[derive(Debug, Error)]
pub enum PoseDataError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("degenerate crop box (zero area)")]
    DegenerateCrop,
    #[error("invalid frame sampling: {0}")]
    Sampling(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chirality {
    Left,
    Right,
}

impl Chirality {
    pub fn index(self) -> usize {
        match self {
            Chirality::Left => 0,
            Chirality::Right => 1,
        }
    }
}

/// One hand at one timestep: 21 joints with per-joint confidence.
/// A missing hand is all-zero joints with zero confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct HandPoseFrame {
    pub joints: [[f64; 2]; JOINT_COUNT],
    pub confidence: [f64; JOINT_COUNT],
    pub chirality: Chirality,
    pub time_index: usize,
}

impl HandPoseFrame {
    pub fn missing(chirality: Chirality, time_index: usize) -> Self {
        HandPoseFrame {
            joints: [[0.0; 2]; JOINT_COUNT],
            confidence: [0.0; JOINT_COUNT],
            chirality,
            time_index,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.confidence.iter().all(|&c| c == 0.0)
            && self.joints.iter().all(|j| j[0] == 0.0 && j[1] == 0.0)
    }
}

/// Two-hand pose sequence. For every time index that appears, both hands are
/// present internally (a missing hand as the all-zero frame).
#[derive(Debug, Clone, PartialEq)]
pub struct HandSequence {
    /// ordered by time index, left before right at equal times
    pub frames: Vec<HandPoseFrame>,
    pub label: Option<usize>,
    pub source_id: String,
    pub fps: f64,
}

impl HandSequence {
    /// Distinct time indices, ascending.
    pub fn time_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for f in &self.frames {
            if out.last() != Some(&f.time_index) {
                out.push(f.time_index);
            }
        }
        out
    }

    pub fn frame(&self, time_index: usize, chirality: Chirality) -> Option<&HandPoseFrame> {
        self.frames
            .iter()
            .find(|f| f.time_index == time_index && f.chirality == chirality)
    }

    /// Number of distinct time indices.
    pub fn len(&self) -> usize {
        self.time_indices().len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

// ---- pose-JSON ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDoc {
    source_id: String,
    fps: f64,
    label: Option<i64>,
    frames: Vec<PoseDocFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDocFrame {
    t: i64,
    left: Option<Vec<[f64; 3]>>,
    right: Option<Vec<[f64; 3]>>,
}

fn parse_hand(
    raw: &Option<Vec<[f64; 3]>>,
    chirality: Chirality,
    t: usize,
) -> Result<HandPoseFrame, PoseDataError> {
    let name = match chirality {
        Chirality::Left => "left",
        Chirality::Right => "right",
    };
    match raw {
        None => Ok(HandPoseFrame::missing(chirality, t)),
        Some(rows) => {
            if rows.len() != JOINT_COUNT {
                return Err(PoseDataError::Schema(format!(
                    "frame t={t} hand {name}: expected {JOINT_COUNT} joints, got {}",
                    rows.len()
                )));
            }
            let mut frame = HandPoseFrame::missing(chirality, t);
            for (j, row) in rows.iter().enumerate() {
                let [x, y, c] = *row;
                if !x.is_finite() || !y.is_finite() {
                    return Err(PoseDataError::Schema(format!(
                        "frame t={t} hand {name} joint {j}: non-finite coordinate"
                    )));
                }
                if !(0.0..=1.0).contains(&c) {
                    return Err(PoseDataError::Schema(format!(
                        "frame t={t} hand {name} joint {j}: confidence {c} outside [0,1]"
                    )));
                }
                frame.joints[j] = [x, y];
                frame.confidence[j] = c;
            }
            Ok(frame)
        }
    }
}

/// Parse one pose-JSON document into a [`HandSequence`].
pub fn parse_sequence(json: &str) -> Result<HandSequence, PoseDataError> {
    let doc: PoseDoc = serde_json::from_str(json)?;
    let label = match doc.label {
        None => None,
        Some(l) if l < 0 => {
            return Err(PoseDataError::Schema(format!("negative label {l}")));
        }
        Some(l) => Some(l as usize),
    };
    let mut frames = Vec::with_capacity(doc.frames.len() * 2);
    let mut prev_t: Option<i64> = None;
    for df in &doc.frames {
        if df.t < 0 {
            return Err(PoseDataError::Schema(format!("negative time index {}", df.t)));
        }
        if let Some(p) = prev_t {
            if df.t <= p {
                return Err(PoseDataError::Schema(format!(
                    "time indices must be strictly increasing per document: {p} then {}",
                    df.t
                )));
            }
        }
        prev_t = Some(df.t);
        let t = df.t as usize;
        frames.push(parse_hand(&df.left, Chirality::Left, t)?);
        frames.push(parse_hand(&df.right, Chirality::Right, t)?);
    }
    Ok(HandSequence {
        frames,
        label,
        source_id: doc.source_id,
        fps: doc.fps,
    })
}

/// Serialize to pose-JSON. Hands that are all-zero with zero confidence are
/// written as `null` (the canonical missing form).
pub fn serialize_sequence(seq: &HandSequence) -> String {
    let mut doc_frames: Vec<PoseDocFrame> = Vec::new();
    for t in seq.time_indices() {
        let to_raw = |f: Option<&HandPoseFrame>| -> Option<Vec<[f64; 3]>> {
            match f {
                None => None,
                Some(f) if f.is_missing() => None,
                Some(f) => Some(
                    (0..JOINT_COUNT)
                        .map(|j| [f.joints[j][0], f.joints[j][1], f.confidence[j]])
                        .collect(),
                ),
            }
        };
        doc_frames.push(PoseDocFrame {
            t: t as i64,
            left: to_raw(seq.frame(t, Chirality::Left)),
            right: to_raw(seq.frame(t, Chirality::Right)),
        });
    }
    serde_json::to_string(&PoseDoc {
        source_id: seq.source_id.clone(),
        fps: seq.fps,
        label: seq.label.map(|l| l as i64),
        frames: doc_frames,
    })
    .expect("pose doc serialization")
}

// ---- crop normalization ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropBox {
    pub fn center(&self) -> [f64; 2] {
        [self.x0 + self.width / 2.0, self.y0 + self.height / 2.0]
    }
}

/// Square crop box centered on the confident-joint centroid with side
/// 2.2x the larger joint extent. `None` when no joint is confident or the
/// hand is a single point.
pub fn crop_box_for(frame: &HandPoseFrame) -> Option<CropBox> {
    let pts: Vec<[f64; 2]> = frame
        .joints
        .iter()
        .zip(frame.confidence.iter())
        .filter(|(_, &c)| c > 0.0)
        .map(|(p, _)| *p)
        .collect();
    if pts.is_empty() {
        return None;
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut cx = 0.0;
    let mut cy = 0.0;
    for p in &pts {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
        cx += p[0];
        cy += p[1];
    }
    cx /= pts.len() as f64;
    cy /= pts.len() as f64;
    let extent = (max_x - min_x).max(max_y - min_y);
    if extent < 1e-9 {
        return None;
    }
    let side = 2.2 * extent;
    Some(CropBox {
        x0: cx - side / 2.0,
        y0: cy - side / 2.0,
        width: side,
        height: side,
    })
}

/// Affine map sending `crop_box` into [0,256]^2, aspect preserved by padding
/// the shorter side symmetrically. Confidences are unchanged.
pub fn normalize_to_crop(
    frame: &HandPoseFrame,
    crop_box: &CropBox,
) -> Result<HandPoseFrame, PoseDataError> {
    if crop_box.width <= 0.0 || crop_box.height <= 0.0 {
        return Err(PoseDataError::DegenerateCrop);
    }
    let side = crop_box.width.max(crop_box.height);
    let [cx, cy] = crop_box.center();
    let scale = CROP_SIZE / side;
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let mut out = frame.clone();
    for j in 0..JOINT_COUNT {
        out.joints[j][0] = (frame.joints[j][0] - x0) * scale;
        out.joints[j][1] = (frame.joints[j][1] - y0) * scale;
    }
    Ok(out)
}

// ---- frame sampling ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Random,
    Center,
}

/// Stratified sampling of `t_count` time indices: the sequence's distinct
/// time axis is split into `t_count` equal strata; center mode takes each
/// stratum's midpoint, random mode draws uniformly within the stratum.
/// Sequences shorter than `t_count` repeat indices.
pub fn sample_frames(
    seq: &HandSequence,
    t_count: usize,
    mode: SamplingMode,
    rng: &mut impl rand::Rng,
) -> Result<Vec<usize>, PoseDataError> {
    if t_count == 0 {
        return Err(PoseDataError::Sampling("T must be positive".into()));
    }
    let times = seq.time_indices();
    if times.is_empty() {
        return Err(PoseDataError::Sampling("empty sequence".into()));
    }
    let len = times.len() as f64;
    let mut out = Vec::with_capacity(t_count);
    for i in 0..t_count {
        let u = match mode {
            SamplingMode::Center => 0.5,
            SamplingMode::Random => rng.gen_range(0.0..1.0),
        };
        let pos = (((i as f64 + u) * len) / t_count as f64).floor() as usize;
        out.push(times[pos.min(times.len() - 1)]);
    }
    Ok(out)
}
