//! PCA of states, per-step error metrics, intent classification and frame export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::gesture::CodingConfig;
use crate::network::{HiddenState, Layer, Parameters};
use crate::tensor::kl_value;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// Column means removed before the decomposition.
    pub mean: Vec<f64>,
    /// k unit vectors of length d.
    pub components: Vec<Vec<f64>>,
    /// n rows of k coordinates.
    pub projections: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaResult {
    /// Coordinates of new rows in this basis.
    pub fn project(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                if r.len() != self.mean.len() {
                    return shape_err(format!(
                        "row of {} values in a {}-d basis",
                        r.len(),
                        self.mean.len()
                    ));
                }
                Ok(self
                    .components
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(r)
                            .zip(&self.mean)
                            .map(|((c, x), m)| c * (x - m))
                            .sum()
                    })
                    .collect())
            })
            .collect()
    }
}

pub fn pca(data: &[Vec<f64>], k: usize) -> Result<PcaResult> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Config(format!("pca needs at least 2 rows, got {n}")));
    }
    let d = data[0].len();
    if data.iter().any(|r| r.len() != d) {
        return shape_err("pca rows differ in length");
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Config(format!(
            "pca k = {k} must be in 1..={}",
            n.min(d)
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let total: f64 = x.iter().map(|v| v * v).sum();

    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut c: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = c.iter().copied().fold(
            0.0f64,
            |best, v| if v.abs() > best.abs() { v } else { best },
        );
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        let s = svd.singular_values[i];
        ratios.push(if total > 0.0 { s * s / total } else { 0.0 });
    }
    let mut out = PcaResult {
        mean,
        components,
        projections: vec![],
        explained_variance_ratio: ratios,
    };
    out.projections = out.project(data)?;
    Ok(out)
}

/// Which rows a PCA basis is fitted on when projecting test activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaBasis {
    Train,
    Joint,
}

impl PcaBasis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(PcaBasis::Train),
            "joint" => Ok(PcaBasis::Joint),
            _ => Err(Error::Config(format!(
                "unknown pca basis {s:?} (train|joint)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPca {
    pub pca: PcaResult,
    pub train: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
}

pub fn activation_pca(
    train: &[Vec<f64>],
    test: &[Vec<f64>],
    basis: PcaBasis,
    k: usize,
) -> Result<ActivationPca> {
    let pca = match basis {
        PcaBasis::Train => pca(train, k)?,
        PcaBasis::Joint => pca(&[train, test].concat(), k)?,
    };
    Ok(ActivationPca {
        train: pca.project(train)?,
        test: pca.project(test)?,
        pca,
    })
}

/// Labeled CSV of projected rows: `label,pc1,...,pck`.
pub fn projection_csv(labels: &[String], rows: &[Vec<f64>]) -> String {
    let k = rows.first().map_or(0, Vec::len);
    let mut s = String::from("label");
    for i in 1..=k {
        write!(s, ",pc{i}").unwrap();
    }
    s.push('\n');
    for (l, r) in labels.iter().zip(rows) {
        s.push_str(l);
        for v in r {
            write!(s, ",{v:.9}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// 2-D PCA of the per-sequence initial states of the top layers.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialStateProjection {
    pub vs: PcaResult,
    pub ps: PcaResult,
}

pub fn project_initial_states(params: &Parameters) -> Result<InitialStateProjection> {
    if params.initial.len() < 2 {
        return Err(Error::Config(format!(
            "projecting initial states needs at least 2 sequences, checkpoint has {}",
            params.initial.len()
        )));
    }
    let rows = |l: Layer| {
        params
            .initial
            .iter()
            .map(|h| h.layer(l).to_vec())
            .collect::<Vec<_>>()
    };
    Ok(InitialStateProjection {
        vs: pca(&rows(Layer::VS), 2)?,
        ps: pca(&rows(Layer::PS), 2)?,
    })
}

pub const INITIAL_PCA_HEADER: &str = "pathway,primitive,pc1,pc2";

pub fn initial_states_csv(p: &InitialStateProjection) -> String {
    let mut s = format!("{INITIAL_PCA_HEADER}\n");
    for (name, r) in [("vs", &p.vs), ("ps", &p.ps)] {
        for (i, xy) in r.projections.iter().enumerate() {
            writeln!(s, "{name},{i},{:.9},{:.9}", xy[0], xy[1]).unwrap();
        }
    }
    s
}

/// Mean distance between points sharing a class and between points that do not.
pub fn class_separation(points: &[Vec<f64>], classes: &[usize]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = distance(&points[i], &points[j]);
            if classes[i] == classes[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub visual_mse: f64,
    pub proprio_kl: f64,
    /// Absolute error of the decoded joint angles, one per joint.
    pub joint_abs_err: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMetrics {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

/// Per-step errors of predicted `(frame, code)` pairs against targets.
pub fn error_metrics(
    predicted: &[(Vec<f64>, Vec<f64>)],
    target: &[(Vec<f64>, Vec<f64>)],
    coding: &CodingConfig,
) -> Result<ErrorMetrics> {
    if predicted.len() != target.len() {
        return shape_err(format!(
            "{} predictions for {} targets",
            predicted.len(),
            target.len()
        ));
    }
    let mut rows = Vec::with_capacity(predicted.len());
    for (step, (p, t)) in predicted.iter().zip(target).enumerate() {
        if p.0.len() != t.0.len() || p.1.len() != t.1.len() || p.1.len() != coding.code_len() {
            return shape_err(format!("step {step} prediction and target differ in shape"));
        }
        let mse =
            p.0.iter()
                .zip(&t.0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / p.0.len().max(1) as f64;
        let joints = coding
            .decode(&p.1)
            .iter()
            .zip(coding.decode(&t.1))
            .map(|(a, b)| (a - b).abs())
            .collect();
        rows.push(MetricRow {
            step,
            visual_mse: mse,
            proprio_kl: kl_value(&t.1, &p.1),
            joint_abs_err: joints,
        });
    }
    let n = rows.len().max(1) as f64;
    let mean = MetricRow {
        step: rows.len(),
        visual_mse: rows.iter().map(|r| r.visual_mse).sum::<f64>() / n,
        proprio_kl: rows.iter().map(|r| r.proprio_kl).sum::<f64>() / n,
        joint_abs_err: (0..coding.groups)
            .map(|j| rows.iter().map(|r| r.joint_abs_err[j]).sum::<f64>() / n)
            .collect(),
    };
    Ok(ErrorMetrics { rows, mean })
}

pub const METRICS_HEADER: &str = "step,visual_mse,proprio_kl,left_abs_err,right_abs_err";

/// Per-step rows followed by a `mean` row.
pub fn metrics_csv(m: &ErrorMetrics) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    let mut row = |label: String, r: &MetricRow| {
        write!(s, "{label},{:.9e},{:.9e}", r.visual_mse, r.proprio_kl).unwrap();
        for e in &r.joint_abs_err {
            write!(s, ",{e:.9e}").unwrap();
        }
        s.push('\n');
    };
    for r in &m.rows {
        row(r.step.to_string(), r);
    }
    row("mean".into(), &m.mean);
    s
}

/// Concatenated V_S and P_S internal states.
pub fn top_state(h: &HiddenState) -> Vec<f64> {
    [h.layer(Layer::VS), h.layer(Layer::PS)].concat()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentReport {
    pub labels: Vec<usize>,
    /// Fraction of steps from `burn_in` on whose label matches the truth.
    pub accuracy: f64,
    pub burn_in: usize,
}

fn nearest(x: &[f64], refs: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, r) in refs.iter().enumerate() {
        let d = distance(x, r);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn reference_rows(trained: &[HiddenState], width: usize) -> Result<Vec<Vec<f64>>> {
    if trained.is_empty() {
        return Err(Error::Config("no reference initial states".into()));
    }
    let refs: Vec<Vec<f64>> = trained.iter().map(top_state).collect();
    if refs.iter().any(|r| r.len() != width) {
        return shape_err("reference states do not match the inferred states");
    }
    Ok(refs)
}

/// Labels each inferred state with the index of the nearest trained initial
/// state. Ties go to the lowest index.
pub fn classify_inferred_intent(
    inferred: &[HiddenState],
    trained: &[HiddenState],
    truth: &[usize],
    burn_in: usize,
) -> Result<IntentReport> {
    if inferred.len() != truth.len() {
        return shape_err(format!(
            "{} inferred states for {} labels",
            inferred.len(),
            truth.len()
        ));
    }
    let width = inferred.first().map_or(0, |h| top_state(h).len());
    let refs = reference_rows(trained, width)?;
    let labels: Vec<usize> = inferred
        .iter()
        .map(|h| {
            let x = top_state(h);
            if x.len() != width {
                return shape_err("inferred states differ in shape");
            }
            Ok(nearest(&x, &refs))
        })
        .collect::<Result<_>>()?;
    let scored = labels.len().saturating_sub(burn_in);
    let correct = labels
        .iter()
        .zip(truth)
        .skip(burn_in)
        .filter(|(a, b)| a == b)
        .count();
    Ok(IntentReport {
        accuracy: if scored == 0 {
            0.0
        } else {
            correct as f64 / scored as f64
        },
        labels,
        burn_in,
    })
}

pub const INTENT_HEADER: &str = "t,truth,label";

pub fn intent_csv(r: &IntentReport, truth: &[usize]) -> String {
    let mut s = format!("{INTENT_HEADER}\n");
    for (t, (l, g)) in r.labels.iter().zip(truth).enumerate() {
        writeln!(s, "{t},{g},{l}").unwrap();
    }
    writeln!(s, "accuracy,{},{:.6}", r.burn_in, r.accuracy).unwrap();
    s
}

/// For every primitive present after `burn_in`: its label and the index of
/// the trained state nearest to its mean inferred state.
pub fn centroid_matches(
    inferred: &[HiddenState],
    trained: &[HiddenState],
    truth: &[usize],
    burn_in: usize,
) -> Result<Vec<(usize, usize)>> {
    let width = inferred.first().map_or(0, |h| top_state(h).len());
    let refs = reference_rows(trained, width)?;
    let mut ids: Vec<usize> = truth.iter().skip(burn_in).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids
        .into_iter()
        .map(|id| {
            let members: Vec<Vec<f64>> = inferred
                .iter()
                .zip(truth)
                .skip(burn_in)
                .filter(|(_, &g)| g == id)
                .map(|(h, _)| top_state(h))
                .collect();
            let mean: Vec<f64> = (0..width)
                .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                .collect();
            (id, nearest(&mean, &refs))
        })
        .collect())
}

/// Gray level of a value in [-1, 1], rounding half up.
pub fn to_gray(v: f64) -> u8 {
    (127.5 * (v + 1.0) + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_gray(g: u8) -> f64 {
    g as f64 / 127.5 - 1.0
}

pub fn encode_pgm(frame: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if frame.len() != height * width {
        return shape_err(format!(
            "frame of {} values is not {height}x{width}",
            frame.len()
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&v| to_gray(v)));
    Ok(out)
}

/// Height, width and values of a P5 graymap with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header is not text"))?);
    }
    at += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only P5 with maxval 255 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let data = bytes
        .get(at..)
        .filter(|d| d.len() == w * h)
        .ok_or_else(|| bad("pixel count mismatch"))?;
    Ok((h, w, data.iter().map(|&g| from_gray(g)).collect()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_pgm(&fs::read(path)?)
}

/// Writes `frame_0000.pgm`, `frame_0001.pgm`, ... into `dir`.
pub fn dump_frames(
    frames: &[Vec<f64>],
    height: usize,
    width: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let path = dir.join(format!("frame_{t:04}.pgm"));
            fs::write(&path, encode_pgm(f, height, width)?)?;
            Ok(path)
        })
        .collect()
}
