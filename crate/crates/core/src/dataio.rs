//! JSON-Lines gait datasets with a TOML manifest sidecar, CSV keypoint import,
//! temporal crop/noise augmentation, and P x K batch sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::rng;
use crate::skeleton::{PoseSequence, COCO_JOINTS};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    NM,
    BG,
    CL,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::NM, Condition::BG, Condition::CL];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::NM => "NM",
            Condition::BG => "BG",
            Condition::CL => "CL",
        };
        f.write_str(s)
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NM" | "nm" => Ok(Condition::NM),
            "BG" | "bg" => Ok(Condition::BG),
            "CL" | "cl" => Ok(Condition::CL),
            other => Err(Error::Config(format!("unknown condition {other:?}"))),
        }
    }
}

/// Marks a record produced by cross-view generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub source_view: f64,
    pub target_view: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitSample {
    pub identity: String,
    pub view_degrees: f64,
    pub condition: Condition,
    pub run: u32,
    /// Records rendered from the same 3D walk share a group.
    pub aligned_group: Option<u64>,
    pub sequence: PoseSequence,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    view_deg: f64,
    cond: Condition,
    #[serde(default)]
    run: u32,
    aligned_group: Option<u64>,
    frames: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_view: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_view: Option<f64>,
}

impl RecordLine {
    fn from_sample(s: &GaitSample) -> Self {
        let seq = &s.sequence;
        let frames = (0..seq.frames())
            .map(|t| (0..seq.joints()).map(|i| {
                let p = seq.point(t, i);
                [p[0], p[1], seq.conf(t, i)]
            }).collect())
            .collect();
        RecordLine {
            id: s.identity.clone(),
            view_deg: s.view_degrees,
            cond: s.condition,
            run: s.run,
            aligned_group: s.aligned_group,
            frames,
            generated: s.provenance.map(|_| true),
            source_view: s.provenance.map(|p| p.source_view),
            target_view: s.provenance.map(|p| p.target_view),
        }
    }

    fn into_sample(self) -> std::result::Result<GaitSample, String> {
        let t = self.frames.len();
        if t == 0 {
            return Err("record has no frames".into());
        }
        let n = self.frames[0].len();
        let mut xy = Vec::with_capacity(t * n);
        let mut conf = Vec::with_capacity(t * n);
        for (k, frame) in self.frames.iter().enumerate() {
            if frame.len() != n {
                return Err(format!("frame {k} has {} joints, frame 0 has {n}", frame.len()));
            }
            for p in frame {
                xy.push([p[0], p[1]]);
                conf.push(p[2]);
            }
        }
        let sequence = PoseSequence::from_xy(n, &xy, Some(conf)).map_err(|e| e.to_string())?;
        let provenance = match (self.generated, self.source_view, self.target_view) {
            (Some(true), Some(source_view), Some(target_view)) => Some(Provenance { source_view, target_view }),
            (Some(true), _, _) => return Err("generated record lacks source_view/target_view".into()),
            _ => None,
        };
        Ok(GaitSample {
            identity: self.id,
            view_degrees: self.view_deg,
            condition: self.cond,
            run: self.run,
            aligned_group: self.aligned_group,
            sequence,
            provenance,
        })
    }
}

/// Inclusive bounds of the uniform ranges walker parameters were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub record_count: usize,
    pub identity_count: usize,
    pub view_list: Vec<f64>,
    pub condition_list: Vec<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig_preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub walker_ranges: Vec<ParamRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<CameraRig>,
}

impl DatasetManifest {
    /// Counts derived from the records; provenance fields left empty.
    pub fn describe(records: &[GaitSample]) -> Self {
        let mut ids: Vec<&str> = records.iter().map(|r| r.identity.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut views: Vec<f64> = records.iter().map(|r| r.view_degrees).collect();
        views.sort_by(f64::total_cmp);
        views.dedup();
        let mut conds: Vec<Condition> = records.iter().map(|r| r.condition).collect();
        conds.sort();
        conds.dedup();
        DatasetManifest {
            format_version: FORMAT_VERSION,
            record_count: records.len(),
            identity_count: ids.len(),
            view_list: views,
            condition_list: conds,
            seed: None,
            frames: None,
            fps: None,
            rig_preset: None,
            walker_ranges: Vec::new(),
            rig: None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }
}

/// `data.jsonl` -> `data.manifest.toml`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.toml")
}

pub fn encode_record(sample: &GaitSample) -> String {
    serde_json::to_string(&RecordLine::from_sample(sample)).expect("record serializes")
}

/// Writes the records file and its manifest. Manifest counts are recomputed
/// from `records`; other manifest fields are taken from `manifest`.
pub fn save_dataset(records: &[GaitSample], path: &Path, manifest: Option<DatasetManifest>) -> Result<DatasetManifest> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        w.write_all(encode_record(r).as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let counted = DatasetManifest::describe(records);
    let manifest = match manifest {
        Some(m) => DatasetManifest {
            format_version: FORMAT_VERSION,
            record_count: counted.record_count,
            identity_count: counted.identity_count,
            view_list: counted.view_list,
            condition_list: counted.condition_list,
            ..m
        },
        None => counted,
    };
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest.to_toml()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn load_records(path: &Path) -> Result<Vec<GaitSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: k + 1, message: e.to_string() })?;
        let sample = parsed
            .into_sample()
            .map_err(|message| Error::Parse { path: path.to_path_buf(), line: k + 1, message })?;
        records.push(sample);
    }
    Ok(records)
}

/// Loads records and the sidecar manifest (synthesized from the records when
/// the sidecar is absent).
pub fn load_dataset(path: &Path) -> Result<(Vec<GaitSample>, DatasetManifest)> {
    let records = load_records(path)?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m = DatasetManifest::from_toml(&text)?;
        if m.record_count != records.len() {
            return Err(Error::Config(format!(
                "manifest lists {} records, {} holds {}",
                m.record_count,
                path.display(),
                records.len()
            )));
        }
        m
    } else {
        DatasetManifest::describe(&records)
    };
    Ok((records, manifest))
}

/// Imports detector output in CSV form:
/// `id,view_deg,cond,frame,j0x,j0y,j0c,...,j16x,j16y,j16c`.
/// Without the `jNc` columns every confidence is 1. Rows of one sequence are
/// consecutive and share `(id, view_deg, cond)`; a `run` column is optional.
pub fn import_keypoints(path: &Path, id_map: &BTreeMap<String, String>) -> Result<Vec<GaitSample>> {
    let fmt_err = |line: usize, message: String| Error::Format { path: path.to_path_buf(), line, message };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let headers = reader.headers().map_err(|e| fmt_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (c_id, c_view, c_cond, c_frame) = match (col("id"), col("view_deg"), col("cond"), col("frame")) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Err(fmt_err(1, "header must contain id, view_deg, cond, frame".into())),
    };
    let c_run = col("run");
    let has_conf = col("j0c").is_some();
    let mut joint_cols = Vec::new();
    for j in 0..COCO_JOINTS {
        let x = col(&format!("j{j}x"));
        let y = col(&format!("j{j}y"));
        let c = if has_conf { col(&format!("j{j}c")) } else { None };
        match (x, y) {
            (Some(x), Some(y)) if !has_conf || c.is_some() => joint_cols.push((x, y, c)),
            _ => return Err(fmt_err(1, format!("header lacks columns for keypoint {j} (expected {COCO_JOINTS})"))),
        }
    }
    if col(&format!("j{COCO_JOINTS}x")).is_some() {
        return Err(fmt_err(1, format!("header has more than {COCO_JOINTS} keypoints")));
    }

    struct Pending {
        key: (String, String, String, u32),
        rows: Vec<(i64, Vec<[f64; 2]>, Vec<f64>)>,
    }
    let mut out = Vec::new();
    let flush = |p: Pending, out: &mut Vec<GaitSample>| -> Result<()> {
        let mut rows = p.rows;
        rows.sort_by_key(|r| r.0);
        let xy: Vec<[f64; 2]> = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
        let conf: Vec<f64> = rows.iter().flat_map(|r| r.2.iter().copied()).collect();
        let (id, view, cond, run) = p.key;
        let identity = id_map.get(&id).cloned().unwrap_or(id);
        out.push(GaitSample {
            identity,
            view_degrees: view.parse().map_err(|_| Error::Config(format!("bad view {view:?}")))?,
            condition: cond.parse()?,
            run,
            aligned_group: None,
            sequence: PoseSequence::from_xy(COCO_JOINTS, &xy, Some(conf))?,
            provenance: None,
        });
        Ok(())
    };

    let mut pending: Option<Pending> = None;
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            fmt_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != headers.len() {
            return Err(fmt_err(line, format!("row has {} fields, header has {}", row.len(), headers.len())));
        }
        let num = |c: usize| -> Result<f64> {
            row[c].trim().parse::<f64>().map_err(|_| fmt_err(line, format!("column {} is not numeric: {:?}", &headers[c], &row[c])))
        };
        let view = row[c_view].trim().to_string();
        num(c_view)?;
        let cond = row[c_cond].trim().to_string();
        cond.parse::<Condition>().map_err(|e| fmt_err(line, e.to_string()))?;
        let run = match c_run {
            Some(c) => num(c)? as u32,
            None => 0,
        };
        let key = (row[c_id].trim().to_string(), view, cond, run);
        let frame = num(c_frame)? as i64;
        let mut xy = Vec::with_capacity(COCO_JOINTS);
        let mut conf = Vec::with_capacity(COCO_JOINTS);
        for &(x, y, c) in &joint_cols {
            xy.push([num(x)?, num(y)?]);
            let cv = match c {
                Some(c) => num(c)?,
                None => 1.0,
            };
            if !(0.0..=1.0).contains(&cv) {
                return Err(fmt_err(line, format!("confidence {cv} outside [0, 1]")));
            }
            conf.push(cv);
        }
        match pending.as_mut() {
            Some(p) if p.key == key => p.rows.push((frame, xy, conf)),
            _ => {
                if let Some(p) = pending.take() {
                    flush(p, &mut out)?;
                }
                pending = Some(Pending { key, rows: vec![(frame, xy, conf)] });
            }
        }
    }
    if let Some(p) = pending.take() {
        flush(p, &mut out)?;
    }
    Ok(out)
}

/// Per-sequence centering and isotropic scaling of the image coordinates:
/// returns `(mean_x, mean_y, scale)` with `scale` the RMS deviation per axis.
pub fn standardization(seq: &PoseSequence) -> (f64, f64, f64) {
    let n = seq.coords().len() as f64;
    let (sx, sy) = seq.coords().iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (mx, my) = (sx / n, sy / n);
    let var = seq.coords().iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum::<f64>() / (2.0 * n);
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mx, my, scale)
}

/// Random contiguous crop to `target_len` frames (loop-padded from the start
/// when shorter), then Gaussian noise of `noise_std` in standardized units.
pub fn augment(seq: &PoseSequence, target_len: usize, noise_std: f64, seed: u64) -> PoseSequence {
    let mut rng = rng::stream(seed, "augment", &[]);
    let t = seq.frames();
    let cropped = if t > target_len {
        let start = rng.random_range(0..=t - target_len);
        seq.window_looped(start, target_len)
    } else if t == target_len {
        seq.clone()
    } else {
        seq.window_looped(0, target_len)
    };
    if noise_std == 0.0 {
        return cropped;
    }
    let (_, _, scale) = standardization(&cropped);
    let sigma = noise_std * scale;
    let noisy: Vec<[f64; 3]> = cropped
        .coords()
        .iter()
        .map(|p| {
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            [p[0] + sigma * nx, p[1] + sigma * ny, p[2]]
        })
        .collect();
    PoseSequence::new(cropped.joints(), noisy, cropped.confidence().to_vec()).expect("shape preserved")
}

/// Batches of `p` identities times `k` records. Labels are any per-record
/// identity keys; returns indices into `labels`.
pub fn pk_sampler<L: Ord + Clone>(labels: &[L], p: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if p < 2 || k < 2 {
        return Err(Error::Config(format!("P x K sampling needs P >= 2 and K >= 2, got {p} x {k}")));
    }
    let mut by_id: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_id.entry(l.clone()).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Config(format!("P = {p} identities requested, dataset has {}", by_id.len())));
    }
    if let Some(small) = by_id.values().find(|v| v.len() < k) {
        return Err(Error::Config(format!(
            "an identity has {} records, fewer than K = {k}",
            small.len()
        )));
    }
    let mut rng = rng::stream(seed, "pk_sampler", &[]);
    let mut pools: Vec<Vec<Vec<usize>>> = by_id
        .into_values()
        .map(|mut idx| {
            idx.shuffle(&mut rng);
            idx.chunks_exact(k).map(|c| c.to_vec()).collect()
        })
        .collect();
    let mut batches = Vec::new();
    loop {
        let mut avail: Vec<usize> = (0..pools.len()).filter(|&i| !pools[i].is_empty()).collect();
        if avail.len() < p {
            break;
        }
        avail.shuffle(&mut rng);
        // Prefer identities with more remaining groups so coverage is even.
        avail.sort_by_key(|&i| std::cmp::Reverse(pools[i].len()));
        let mut batch = Vec::with_capacity(p * k);
        for &i in &avail[..p] {
            batch.extend(pools[i].pop().expect("non-empty"));
        }
        batches.push(batch);
    }
    Ok(batches)
}
