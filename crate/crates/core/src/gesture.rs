//! Synthetic two-arm waving gestures: joint trajectories, a rendered
//! silhouette of the demonstrator, population-coded joints, and the
//! dataset and observation-stream files.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::binio::{f32_exact, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IMAGE_HEIGHT: usize = 48;
pub const IMAGE_WIDTH: usize = 64;
pub const JOINTS: usize = 2;
pub const UNITS_PER_JOINT: usize = 10;

/// Peak-to-peak elbow swing at amplitude 1, in radians.
pub const FULL_SWING: f64 = 0.8;
pub const DEFAULT_PERIOD: usize = 20;
pub const DEFAULT_PHASE_OFFSET: usize = 5;
pub const DEFAULT_STEPS: usize = 100;
pub const DESK_STEPS: usize = 40;

// ---------------------------------------------------------------------------
// population coding

/// Gaussian population code over fixed reference angles, one softmax group
/// per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingConfig {
    pub groups: usize,
    pub units: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl Default for CodingConfig {
    /// Joint range [-1, 1] rad. The centers extend 0.8 rad past both ends of
    /// the range so that decoding stays unbiased near the limits.
    fn default() -> Self {
        Self::with_span(-1.0, 1.0, -1.8, 1.8, JOINTS, UNITS_PER_JOINT, 1.0)
    }
}

impl CodingConfig {
    /// Centers evenly spaced over `[c_first, c_last]`, `sigma = width * spacing`.
    pub fn with_span(
        theta_min: f64,
        theta_max: f64,
        c_first: f64,
        c_last: f64,
        groups: usize,
        units: usize,
        width: f64,
    ) -> Self {
        let spacing = (c_last - c_first) / (units - 1) as f64;
        CodingConfig {
            groups,
            units,
            theta_min,
            theta_max,
            centers: (0..units).map(|i| c_first + spacing * i as f64).collect(),
            sigma: width * spacing,
        }
    }

    pub fn range(&self) -> f64 {
        self.theta_max - self.theta_min
    }

    pub fn code_len(&self) -> usize {
        self.groups * self.units
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.units < 2 || self.centers.len() != self.units {
            return Err(Error::Config("coding needs >= 2 centers per group".into()));
        }
        if !self.centers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "coding centers must be strictly increasing".into(),
            ));
        }
        if !(self.sigma > 0.0) || !(self.theta_max > self.theta_min) {
            return Err(Error::Config(
                "coding width and range must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.theta_min, self.theta_max)
    }

    /// Population code of one angle, appended to `out`.
    pub fn encode_one(&self, theta: f64, out: &mut Vec<f64>) {
        let theta = self.clamp(theta);
        let start = out.len();
        let s2 = self.sigma * self.sigma;
        // subtracting the peak exponent keeps the normalizer away from underflow
        let e: Vec<f64> = self
            .centers
            .iter()
            .map(|c| -(theta - c) * (theta - c) / s2)
            .collect();
        let peak = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend(e.iter().map(|v| (v - peak).exp()));
        let sum: f64 = out[start..].iter().sum();
        for p in &mut out[start..] {
            *p /= sum;
        }
    }

    /// Concatenated codes of every joint.
    pub fn encode(&self, joints: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.code_len());
        for &t in joints {
            self.encode_one(t, &mut out);
        }
        out
    }

    /// Probability-weighted mean center of each group.
    pub fn decode(&self, code: &[f64]) -> Vec<f64> {
        code.chunks(self.units)
            .map(|g| {
                let mass: f64 = g.iter().sum();
                g.iter().zip(&self.centers).map(|(p, c)| p * c).sum::<f64>() / mass
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// rendering

// The palette stays inside the open range of the tanh output layer.
const BACKGROUND_GRAY: f64 = 0.1;
const BODY_GRAY: f64 = 0.5;
const ARM_GRAY: f64 = 0.9;
const AXIS_X: f64 = (IMAGE_WIDTH as f64 - 1.0) / 2.0;
const HEAD: (f64, f64, f64) = (AXIS_X, 10.0, 5.0);
const TORSO_HALF_WIDTH: f64 = 8.0;
const TORSO_Y: (f64, f64) = (15.5, 40.5);
const SHOULDER: (f64, f64) = (AXIS_X - TORSO_HALF_WIDTH, 18.0);
const UPPER_ARM: f64 = 8.0;
const FOREARM: f64 = 13.0;
const LIMB_HALF_WIDTH: f64 = 1.5;

fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Coverage of the arm attached on the image-left shoulder, elbow angle
/// `theta` measured from vertical, positive outward.
fn arm_coverage(x: f64, y: f64, theta: f64) -> f64 {
    let elbow = (SHOULDER.0 - UPPER_ARM, SHOULDER.1);
    let hand = (
        elbow.0 - FOREARM * theta.sin(),
        elbow.1 - FOREARM * theta.cos(),
    );
    let d = segment_distance((x, y), SHOULDER, elbow).min(segment_distance((x, y), elbow, hand));
    coverage(d - LIMB_HALF_WIDTH)
}

fn body_coverage(x: f64, y: f64) -> f64 {
    let (hx, hy, r) = HEAD;
    let head = coverage(((x - hx).powi(2) + (y - hy).powi(2)).sqrt() - r);
    let dx = (x - AXIS_X).abs() - TORSO_HALF_WIDTH;
    let dy = (y - (TORSO_Y.0 + TORSO_Y.1) / 2.0).abs() - (TORSO_Y.1 - TORSO_Y.0) / 2.0;
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    let torso = coverage(outside + dx.max(dy).min(0.0));
    head.max(torso)
}

/// Renders the demonstrator with elbow angles `joints` (image-left arm
/// first), returning the frame in [-1, 1] and whether any angle was
/// clamped into range.
pub fn render_frame(coding: &CodingConfig, joints: [f64; 2]) -> (Vec<f64>, bool) {
    let clamped = joints.iter().any(|&t| t != coding.clamp(t));
    let (left, right) = (coding.clamp(joints[0]), coding.clamp(joints[1]));
    let mut frame = Vec::with_capacity(IMAGE_HEIGHT * IMAGE_WIDTH);
    for yi in 0..IMAGE_HEIGHT {
        for xi in 0..IMAGE_WIDTH {
            let (x, y) = (xi as f64, yi as f64);
            let mirrored = (IMAGE_WIDTH - 1 - xi) as f64;
            let arms = arm_coverage(x, y, left).max(arm_coverage(mirrored, y, right));
            let body = BACKGROUND_GRAY + (BODY_GRAY - BACKGROUND_GRAY) * body_coverage(x, y);
            let level = body + (ARM_GRAY - body) * arms;
            frame.push(gray_to_value((255.0 * level).round() as u8));
        }
    }
    (frame, clamped)
}

/// `v = 2 gray / 255 - 1`, held at 32-bit precision.
pub fn gray_to_value(gray: u8) -> f64 {
    f32_exact(2.0 * gray as f64 / 255.0 - 1.0)
}

// ---------------------------------------------------------------------------
// gestures

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lead {
    Left,
    Right,
    Both,
}

impl Lead {
    fn to_u8(self) -> u8 {
        match self {
            Lead::Left => 0,
            Lead::Right => 1,
            Lead::Both => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Lead::Left),
            1 => Ok(Lead::Right),
            2 => Ok(Lead::Both),
            _ => Err(Error::Format(format!("unknown lead code {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lead::Left => "left",
            Lead::Right => "right",
            Lead::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GestureSpec {
    pub lead: Lead,
    pub amp_left: f64,
    pub amp_right: f64,
    pub period: usize,
    pub steps: usize,
    /// Delay of the trailing arm when one arm leads.
    pub phase_offset: usize,
}

impl GestureSpec {
    pub fn new(lead: Lead, amp_left: f64, amp_right: f64, steps: usize) -> Self {
        GestureSpec {
            lead,
            amp_left,
            amp_right,
            period: DEFAULT_PERIOD,
            steps,
            phase_offset: DEFAULT_PHASE_OFFSET,
        }
    }

    pub fn is_null(&self) -> bool {
        self.amp_left == 0.0 && self.amp_right == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.period == 0 {
            return Err(Error::Config(
                "gesture needs positive length and period".into(),
            ));
        }
        for a in [self.amp_left, self.amp_right] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("amplitude {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn onsets(&self) -> (usize, usize) {
        match self.lead {
            Lead::Left => (0, self.phase_offset),
            Lead::Right => (self.phase_offset, 0),
            Lead::Both => (0, 0),
        }
    }

    /// Elbow angles at step `t`; the home position is 0.
    pub fn joints_at(&self, t: usize) -> [f64; 2] {
        let (on_l, on_r) = self.onsets();
        let wave = |amp: f64, onset: usize| {
            if t < onset {
                0.0
            } else {
                let phase = 2.0 * PI * (t - onset) as f64 / self.period as f64;
                f32_exact(0.5 * FULL_SWING * amp * phase.sin())
            }
        };
        [wave(self.amp_left, on_l), wave(self.amp_right, on_r)]
    }
}

/// One training pattern with its aligned frames, joints and codes.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair {
    /// Primitive id in the pattern table.
    pub id: usize,
    pub spec: GestureSpec,
    pub frames: Vec<Vec<f64>>,
    pub joints: Vec<[f64; 2]>,
    pub codes: Vec<Vec<f64>>,
}

impl SequencePair {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Frame and code of the home posture every primitive starts from.
pub fn home_input(coding: &CodingConfig) -> (Vec<f64>, Vec<f64>) {
    (render_frame(coding, [0.0; 2]).0, coding.encode(&[0.0; 2]))
}

pub fn synth_sequence(
    id: usize,
    spec: &GestureSpec,
    coding: &CodingConfig,
) -> Result<SequencePair> {
    spec.validate()?;
    let joints: Vec<[f64; 2]> = (0..spec.steps).map(|t| spec.joints_at(t)).collect();
    let frames = joints.iter().map(|j| render_frame(coding, *j).0).collect();
    let codes = joints.iter().map(|j| coding.encode(j)).collect();
    Ok(SequencePair {
        id,
        spec: *spec,
        frames,
        joints,
        codes,
    })
}

/// The 16 primitives: left- and right-led gestures at each full/half
/// amplitude pair, then the eight non-null amplitude pairs from {0, 0.5, 1}
/// with both arms starting together.
pub fn pattern_table(steps: usize) -> Vec<GestureSpec> {
    let mut out = Vec::with_capacity(16);
    let lead_amps = [(1.0, 1.0), (1.0, 0.5), (0.5, 1.0), (0.5, 0.5)];
    for lead in [Lead::Left, Lead::Right] {
        for (al, ar) in lead_amps {
            out.push(GestureSpec::new(lead, al, ar, steps));
        }
    }
    for (al, ar) in [
        (1.0, 1.0),
        (1.0, 0.5),
        (0.5, 1.0),
        (0.5, 0.5),
        (1.0, 0.0),
        (0.5, 0.0),
        (0.0, 1.0),
        (0.0, 0.5),
    ] {
        out.push(GestureSpec::new(Lead::Both, al, ar, steps));
    }
    out
}

/// Table ids in subset order: the four desk primitives come first.
pub const SUBSET_ORDER: [usize; 16] = [0, 3, 4, 7, 1, 2, 5, 6, 8, 9, 10, 11, 12, 13, 14, 15];

/// A synthesized corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub coding: CodingConfig,
    pub height: usize,
    pub width: usize,
    pub sequences: Vec<SequencePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// All 16 primitives of length `steps`. Rendering is table-driven and
/// noise-free; the seed only matters for derived observation streams.
pub fn build_dataset(seed: u64, steps: usize) -> Result<Dataset> {
    let _ = seed;
    let coding = CodingConfig::default();
    let sequences = pattern_table(steps)
        .iter()
        .enumerate()
        .map(|(id, spec)| synth_sequence(id, spec, &coding))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        coding,
        height: IMAGE_HEIGHT,
        width: IMAGE_WIDTH,
        sequences,
    })
}

/// The first `n` primitives of [`SUBSET_ORDER`].
pub fn subset(dataset: &Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n > dataset.len() {
        return Err(Error::Config(format!(
            "subset size {n} outside 1..={}",
            dataset.len()
        )));
    }
    let mut sequences = Vec::with_capacity(n);
    for id in SUBSET_ORDER
        .iter()
        .filter(|&&id| dataset.sequences.iter().any(|s| s.id == id))
    {
        if sequences.len() == n {
            break;
        }
        sequences.push(
            dataset
                .sequences
                .iter()
                .find(|s| s.id == *id)
                .expect("present")
                .clone(),
        );
    }
    Ok(Dataset {
        sequences,
        ..dataset.clone()
    })
}

/// The desk-scale corpus: four primitives of 40 steps.
pub fn desk_dataset(seed: u64) -> Result<Dataset> {
    subset(&build_dataset(seed, DESK_STEPS)?, 4)
}

// ---------------------------------------------------------------------------
// dataset file

const DATASET_MAGIC: &[u8; 7] = b"PVMD-DS";
pub const DATASET_VERSION: u16 = 1;
const CODE_TOLERANCE: f64 = 1e-6;

fn write_coding(w: &mut Writer, c: &CodingConfig) {
    w.u16(c.groups as u16);
    w.u16(c.units as u16);
    w.f64(c.theta_min);
    w.f64(c.theta_max);
    w.f64(c.centers[0]);
    w.f64(*c.centers.last().expect("validated"));
    w.f64(c.sigma);
}

fn read_coding(r: &mut Reader) -> Result<CodingConfig> {
    let groups = r.u16()? as usize;
    let units = r.u16()? as usize;
    let (theta_min, theta_max, c_first, c_last, sigma) =
        (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    if units < 2 {
        return Err(Error::Format("coding needs >= 2 units".into()));
    }
    let mut c = CodingConfig::with_span(theta_min, theta_max, c_first, c_last, groups, units, 1.0);
    c.sigma = sigma;
    c.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(c)
}

/// Bytes of a dataset file with `count` sequences of `steps` steps each.
pub fn dataset_file_size(
    count: usize,
    steps: usize,
    height: usize,
    width: usize,
    code_len: usize,
) -> usize {
    const HEADER: usize = 7 + 2 + 2 + 2 + (2 + 2 + 5 * 8) + 4;
    const MANIFEST: usize = 4 + 4 + 1 + 4 + 4 + 4 + 4;
    HEADER + count * MANIFEST + count * steps * (height * width + JOINTS + code_len) * 4 + 4
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    d.coding.validate()?;
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u16(d.height as u16);
    w.u16(d.width as u16);
    write_coding(&mut w, &d.coding);
    w.u32(d.sequences.len() as u32);
    for s in &d.sequences {
        w.u32(s.id as u32);
        w.u32(s.len() as u32);
        w.u8(s.spec.lead.to_u8());
        w.f32(s.spec.amp_left);
        w.f32(s.spec.amp_right);
        w.u32(s.spec.period as u32);
        w.u32(s.spec.phase_offset as u32);
    }
    for s in &d.sequences {
        if s.frames.iter().any(|f| f.len() != d.height * d.width) {
            return Err(Error::Shape(format!(
                "sequence {} has a frame of the wrong size",
                s.id
            )));
        }
        for f in &s.frames {
            w.f32s(f);
        }
        for j in &s.joints {
            w.f32s(j);
        }
        for c in &s.codes {
            w.f32s(c);
        }
    }
    Ok(w.finish_crc())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let mut r = Reader::with_crc(bytes)?;
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let coding = read_coding(&mut r)?;
    let count = r.u32()? as usize;
    let mut heads = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u32()? as usize;
        let steps = r.u32()? as usize;
        let lead = Lead::from_u8(r.u8()?)?;
        let (amp_left, amp_right) = (r.f32()?, r.f32()?);
        let period = r.u32()? as usize;
        let phase_offset = r.u32()? as usize;
        heads.push((
            id,
            GestureSpec {
                lead,
                amp_left,
                amp_right,
                period,
                steps,
                phase_offset,
            },
        ));
    }
    let mut sequences = Vec::with_capacity(count);
    for (id, spec) in heads {
        let frames = (0..spec.steps)
            .map(|_| r.f32s(height * width))
            .collect::<Result<Vec<_>>>()?;
        let joints = (0..spec.steps)
            .map(|_| r.f32s(JOINTS).map(|j| [j[0], j[1]]))
            .collect::<Result<Vec<_>>>()?;
        let mut codes = Vec::with_capacity(spec.steps);
        for (t, j) in joints.iter().enumerate() {
            let stored = r.f32s(coding.code_len())?;
            let exact = coding.encode(j);
            if stored
                .iter()
                .zip(&exact)
                .any(|(a, b)| (a - b).abs() > CODE_TOLERANCE)
            {
                return Err(Error::Format(format!(
                    "sequence {id} step {t}: codes disagree with joints"
                )));
            }
            codes.push(exact);
        }
        sequences.push(SequencePair {
            id,
            spec,
            frames,
            joints,
            codes,
        });
    }
    r.finish()?;
    Ok(Dataset {
        coding,
        height,
        width,
        sequences,
    })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(d)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// observation streams

/// Concatenated primitives as seen by an observer, with jittered joint
/// readings. `joints` keeps the clean angles for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationStream {
    pub coding: CodingConfig,
    /// Dataset index of the primitive playing at each step.
    pub labels: Vec<usize>,
    pub frames: Vec<Vec<f64>>,
    pub codes: Vec<Vec<f64>>,
    pub joints: Vec<[f64; 2]>,
}

impl ObservationStream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Plays the dataset sequences at `order` back to back, adding Gaussian
/// noise of `jitter` x joint range to the observed joint angles.
pub fn build_stream(
    dataset: &Dataset,
    order: &[usize],
    jitter: f64,
    seed: u64,
) -> Result<ObservationStream> {
    let c = &dataset.coding;
    let noise =
        Normal::new(0.0, jitter * c.range()).map_err(|e| Error::Config(format!("jitter: {e}")))?;
    let mut rng = stream_rng(seed, Stream::Jitter);
    let mut s = ObservationStream {
        coding: c.clone(),
        labels: vec![],
        frames: vec![],
        codes: vec![],
        joints: vec![],
    };
    for &i in order {
        let seq = dataset
            .sequences
            .get(i)
            .ok_or_else(|| Error::Config(format!("stream refers to missing sequence {i}")))?;
        for t in 0..seq.len() {
            let clean = seq.joints[t];
            let observed = clean.map(|j| c.clamp(j + noise.sample(&mut rng)));
            s.labels.push(i);
            s.frames.push(seq.frames[t].clone());
            s.codes
                .push(c.encode(&observed).into_iter().map(f32_exact).collect());
            s.joints.push(clean);
        }
    }
    Ok(s)
}

const STREAM_MAGIC: &[u8; 7] = b"PVMD-ST";
pub const STREAM_VERSION: u16 = 1;

pub fn encode_stream(s: &ObservationStream) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(STREAM_MAGIC);
    w.u16(STREAM_VERSION);
    w.u16(IMAGE_HEIGHT as u16);
    w.u16(IMAGE_WIDTH as u16);
    write_coding(&mut w, &s.coding);
    w.u32(s.len() as u32);
    for &l in &s.labels {
        w.u32(l as u32);
    }
    for f in &s.frames {
        w.f32s(f);
    }
    for c in &s.codes {
        w.f32s(c);
    }
    for j in &s.joints {
        w.f32s(j);
    }
    w.finish_crc()
}

pub fn decode_stream(bytes: &[u8]) -> Result<ObservationStream> {
    let mut r = Reader::new(bytes);
    r.magic(STREAM_MAGIC)?;
    let mut r = Reader::with_crc(bytes)?;
    r.magic(STREAM_MAGIC)?;
    r.version(STREAM_VERSION)?;
    let (h, w) = (r.u16()? as usize, r.u16()? as usize);
    let coding = read_coding(&mut r)?;
    let n = r.u32()? as usize;
    let labels = (0..n)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let frames = (0..n).map(|_| r.f32s(h * w)).collect::<Result<_>>()?;
    let codes = (0..n)
        .map(|_| r.f32s(coding.code_len()))
        .collect::<Result<_>>()?;
    let joints = (0..n)
        .map(|_| r.f32s(JOINTS).map(|j| [j[0], j[1]]))
        .collect::<Result<_>>()?;
    r.finish()?;
    Ok(ObservationStream {
        coding,
        labels,
        frames,
        codes,
        joints,
    })
}

pub fn save_stream(path: &Path, s: &ObservationStream) -> Result<()> {
    fs::write(path, encode_stream(s))?;
    Ok(())
}

pub fn load_stream(path: &Path) -> Result<ObservationStream> {
    decode_stream(&fs::read(path)?)
}
