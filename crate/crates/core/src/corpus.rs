//! Corpus construction and preprocessing: center-crop view chunks, min-max
//! normalization, train-time augmentation, subject-level 8:1:1 splits, and
//! the on-disk corpus layout (per-scan tensor files + JSON records, one
//! manifest at the root).
//!
//! Subjects are split 8:1:1 within the CN group; MCI/AD subjects are an
//! evaluation cohort and live entirely in the test split, mirroring how
//! the disease groups are used (never trained on).

use crate::error::{Error, Result};
use crate::model::{Group, PseudoSample, VolumeStats};
use crate::rng::{hash64, mix_streams, DeterministicRng};
use crate::synth::{generate_phantom, generate_reference, Phantom, RegionLayout, SynthConfig};
use crate::tensor::{Dtype, Tensor};
use crate::train::SampleSource;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "valid")]
    Valid,
    #[serde(rename = "test")]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMix {
    pub cn: f64,
    pub mci: f64,
    pub ad: f64,
}

impl GroupMix {
    pub fn cn_only() -> Self {
        Self {
            cn: 1.0,
            mci: 0.0,
            ad: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub grid: usize,
    pub regions: usize,
    pub subjects: usize,
    /// Inclusive range of scans per subject.
    pub scans_per_subject: (usize, usize),
    pub group_mix: GroupMix,
    pub age_range: (f64, f64),
    pub noise_sigma: f64,
    pub voxel_mm: f64,
    pub chunk: (usize, usize, usize),
    pub seed: u64,
}

impl CorpusConfig {
    pub fn desk() -> Self {
        Self {
            grid: 64,
            regions: 24,
            subjects: 240,
            scans_per_subject: (1, 3),
            group_mix: GroupMix::cn_only(),
            age_range: (42.0, 95.0),
            noise_sigma: 2.0,
            voxel_mm: 2.0,
            chunk: (32, 32, 8),
            seed: 11,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            grid: self.grid,
            regions: self.regions,
            chunk: self.chunk,
            noise_sigma: self.noise_sigma,
            voxel_mm: self.voxel_mm,
            age_range: self.age_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if let Err(e) = self.synth().validate() {
            violations.push(e.to_string());
        }
        if let Err(e) = CropGeometry::new(self.grid, self.chunk) {
            violations.push(e.to_string());
        }
        let sum = self.group_mix.cn + self.group_mix.mci + self.group_mix.ad;
        if (sum - 1.0).abs() > 1e-9 {
            violations.push(format!("group mix must sum to 1, got {sum}"));
        }
        if self.group_mix.cn <= 0.0 {
            violations.push("group mix needs a CN share (the model trains on CN)".into());
        }
        let cn_subjects = (self.group_mix.cn * self.subjects as f64).round() as usize;
        if cn_subjects < 10 {
            violations.push(format!(
                "need at least 10 CN subjects to split 8:1:1, got {cn_subjects}"
            ));
        }
        if self.scans_per_subject.0 == 0 || self.scans_per_subject.0 > self.scans_per_subject.1 {
            violations.push(format!(
                "bad scans_per_subject range {:?}",
                self.scans_per_subject
            ));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }
}

// ── crop geometry ───────────────────────────────────────────────────

/// Index mapping between the G^3 frame and the three centered view
/// chunks. Both chunk extraction and gradient scattering go through
/// [`CropGeometry::source_index`], so they are exact inverses.
///
/// Views slice along one axis each: sagittal = x, coronal = y, axial = z.
/// A chunk is `[c1, c2, t]` where `t` counts slices along the view axis
/// and `(c1, c2)` spans the centered window in the orthogonal plane
/// (remaining axes in x,y,z order). Every start index is
/// `floor((G - extent) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub grid: usize,
    pub chunk: (usize, usize, usize),
}

impl CropGeometry {
    pub fn new(grid: usize, chunk: (usize, usize, usize)) -> Result<Self> {
        if chunk.0 > grid || chunk.1 > grid || chunk.2 > grid || chunk.0 * chunk.1 * chunk.2 == 0 {
            return Err(Error::Config(format!(
                "chunk {chunk:?} does not fit a {grid}^3 volume"
            )));
        }
        Ok(Self { grid, chunk })
    }

    fn start(&self, extent: usize) -> usize {
        (self.grid - extent) / 2
    }

    /// Slice range along the view axis, `[start, start + t)`.
    pub fn view_axis_range(&self) -> (usize, usize) {
        let s = self.start(self.chunk.2);
        (s, s + self.chunk.2)
    }

    /// Source (x, y, z) of chunk element (i, j, s) for view 0/1/2.
    pub fn source_index(&self, view: usize, i: usize, j: usize, s: usize) -> (usize, usize, usize) {
        let (c1, c2, t) = self.chunk;
        debug_assert!(i < c1 && j < c2 && s < t);
        let p1 = self.start(c1);
        let p2 = self.start(c2);
        let pv = self.start(t);
        match view {
            0 => (pv + s, p1 + i, p2 + j),
            1 => (p1 + i, pv + s, p2 + j),
            2 => (p1 + i, p2 + j, pv + s),
            _ => unreachable!("view index"),
        }
    }

    fn extract_with<T: Copy + Default>(&self, src: &[T], view: usize) -> Vec<T> {
        let g = self.grid;
        let (c1, c2, t) = self.chunk;
        let mut out = vec![T::default(); c1 * c2 * t];
        for i in 0..c1 {
            for j in 0..c2 {
                for s in 0..t {
                    let (x, y, z) = self.source_index(view, i, j, s);
                    out[(i * c2 + j) * t + s] = src[(x * g + y) * g + z];
                }
            }
        }
        out
    }
}

/// Centered crops along the three anatomical axes; pure index remapping.
pub fn extract_view_chunks(
    volume: &Tensor,
    chunk: (usize, usize, usize),
) -> Result<[Tensor; 3]> {
    let shape = volume.shape();
    if shape.len() != 3 || shape[0] != shape[1] || shape[1] != shape[2] {
        return Err(Error::BadShape {
            op: "extract_view_chunks",
            shape: shape.to_vec(),
            why: "expected a cubic [G,G,G] volume".into(),
        });
    }
    let geom = CropGeometry::new(shape[0], chunk)?;
    let (c1, c2, t) = chunk;
    let mk = |view: usize| {
        Tensor::new(vec![c1, c2, t], geom.extract_with(volume.data(), view))
            .expect("sized by construction")
    };
    Ok([mk(0), mk(1), mk(2)])
}

/// Label-map crops with the same geometry, for occlusion tests.
pub fn extract_label_chunks(
    labels: &[u16],
    grid: usize,
    chunk: (usize, usize, usize),
) -> Result<[Vec<u16>; 3]> {
    let geom = CropGeometry::new(grid, chunk)?;
    Ok([
        geom.extract_with(labels, 0),
        geom.extract_with(labels, 1),
        geom.extract_with(labels, 2),
    ])
}

/// (x - min) / (max - min); a constant input maps to all zeros.
pub fn minmax_normalize(chunk: &Tensor) -> Tensor {
    let lo = chunk.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = chunk
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span == 0.0 {
        return Tensor::zeros(chunk.shape().to_vec());
    }
    Tensor::new(
        chunk.shape().to_vec(),
        chunk.data().iter().map(|v| (v - lo) / span).collect(),
    )
    .expect("same length")
}

// ── augmentation ────────────────────────────────────────────────────

const AUGMENT_MAX_DEG: f64 = 20.0;
const AUGMENT_MAX_SHIFT_AT_128: f64 = 20.0;

/// Rotate about one principal axis with trilinear resampling, zero fill.
pub fn rotate_volume(volume: &Tensor, axis: usize, angle_rad: f64) -> Tensor {
    let g = volume.shape()[0];
    let c = (g as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_rad.sin_cos();
    let src = volume.data();
    let mut out = vec![0.0; src.len()];
    // The two in-plane axes rotate; the fixed axis passes through.
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut p = [0f64; 3];
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                p[0] = x as f64 - c;
                p[1] = y as f64 - c;
                p[2] = z as f64 - c;
                // Inverse rotation of the output coordinate.
                let (pa, pb) = (p[a], p[b]);
                p[a] = cos * pa + sin * pb;
                p[b] = -sin * pa + cos * pb;
                let sx = p[0] + c;
                let sy = p[1] + c;
                let sz = p[2] + c;
                out[(x * g + y) * g + z] = trilinear(src, g, sx, sy, sz);
            }
        }
    }
    Tensor::new(volume.shape().to_vec(), out).expect("same length")
}

fn trilinear(src: &[f64], g: usize, x: f64, y: f64, z: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let z0 = z.floor();
    let (tx, ty, tz) = (x - x0, y - y0, z - z0);
    let mut acc = 0.0;
    for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
        for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
            for (dz, wz) in [(0i64, 1.0 - tz), (1, tz)] {
                let w = wx * wy * wz;
                if w == 0.0 {
                    continue;
                }
                let xi = x0 as i64 + dx;
                let yi = y0 as i64 + dy;
                let zi = z0 as i64 + dz;
                let inside = xi >= 0
                    && yi >= 0
                    && zi >= 0
                    && (xi as usize) < g
                    && (yi as usize) < g
                    && (zi as usize) < g;
                if inside {
                    acc += w * src[((xi as usize) * g + yi as usize) * g + zi as usize];
                }
            }
        }
    }
    acc
}

/// Integer shift per axis, zero fill.
pub fn translate_volume(volume: &Tensor, shift: [i64; 3]) -> Tensor {
    let g = volume.shape()[0] as i64;
    let src = volume.data();
    let mut out = vec![0.0; src.len()];
    let gu = g as usize;
    for x in 0..g {
        let sx = x - shift[0];
        if sx < 0 || sx >= g {
            continue;
        }
        for y in 0..g {
            let sy = y - shift[1];
            if sy < 0 || sy >= g {
                continue;
            }
            for z in 0..g {
                let sz = z - shift[2];
                if sz < 0 || sz >= g {
                    continue;
                }
                out[((x as usize) * gu + y as usize) * gu + z as usize] =
                    src[((sx as usize) * gu + sy as usize) * gu + sz as usize];
            }
        }
    }
    Tensor::new(volume.shape().to_vec(), out).expect("same length")
}

/// Train-split augmentation on the full volume before chunk extraction:
/// with p=0.5 rotate +/-20 deg about a random principal axis (trilinear,
/// zero fill), and independently with p=0.5 translate each axis by an
/// integer in +/- round(20 * G / 128) voxels.
pub fn augment(volume: &Tensor, rng: &mut DeterministicRng) -> Tensor {
    let g = volume.shape()[0];
    let mut out: Option<Tensor> = None;
    if rng.next_f64() < 0.5 {
        let axis = rng.below(3);
        let angle = rng.uniform(-AUGMENT_MAX_DEG, AUGMENT_MAX_DEG).to_radians();
        out = Some(rotate_volume(volume, axis, angle));
    }
    if rng.next_f64() < 0.5 {
        let t_max = (AUGMENT_MAX_SHIFT_AT_128 * g as f64 / 128.0).round() as i64;
        let mut draw = || rng.below((2 * t_max + 1) as usize) as i64 - t_max;
        let shift = [draw(), draw(), draw()];
        let base = out.as_ref().unwrap_or(volume);
        out = Some(translate_volume(base, shift));
    }
    out.unwrap_or_else(|| volume.clone())
}

// ── splits ──────────────────────────────────────────────────────────

/// Shuffle subjects with the seed and partition by the given ratios;
/// every scan of a subject inherits its split.
pub fn split_subjects(
    ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
    }
    if ids.len() < 10 {
        return Err(Error::Data(format!(
            "refusing to split {} subjects: need at least 10 for a subject-level 8:1:1 split",
            ids.len()
        )));
    }
    let mut shuffled: Vec<&String> = ids.iter().collect();
    let mut rng = DeterministicRng::new(seed, hash64(b"split"));
    rng.shuffle(&mut shuffled);
    let n = shuffled.len();
    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_valid = (ratios.1 * n as f64).floor() as usize;
    let mut out = BTreeMap::new();
    for (i, id) in shuffled.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        out.insert(id.clone(), split);
    }
    Ok(out)
}

// ── corpus building ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanEntry {
    pub subject_id: String,
    pub scan_id: String,
    pub split: Split,
    pub group: Group,
    pub age: f64,
    pub cog_score: f64,
    /// Directory of this scan's files, relative to the corpus root.
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: CorpusConfig,
    pub scans: Vec<ScanEntry>,
    /// Per-feature standardization computed on the train split.
    pub volume_stats: VolumeStats,
    /// Mean chronological age of the train split (reference-frame age).
    pub train_mean_age: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScanRecord {
    subject_id: String,
    scan_id: String,
    age: f64,
    group: Group,
    cog_score: f64,
    region_volumes: Vec<f64>,
}

/// Cheap per-scan metadata decided before any rasterization.
struct ScanPlan {
    subject_id: String,
    scan_index: usize,
    age: f64,
    group: Group,
    split: Split,
}

fn plan_corpus(cfg: &CorpusConfig) -> Result<Vec<ScanPlan>> {
    cfg.validate()?;
    // Group counts by largest remainder over the subject count.
    let n = cfg.subjects;
    let shares = [cfg.group_mix.cn, cfg.group_mix.mci, cfg.group_mix.ad];
    let mut counts = shares.map(|s| (s * n as f64).floor() as usize);
    let mut remainders: Vec<(usize, f64)> = shares
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s * n as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = n - counts.iter().sum::<usize>();
    for (i, _) in remainders {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }

    let mut plans = Vec::new();
    let mut cn_ids = Vec::new();
    let mut subject_meta = Vec::new();
    for idx in 0..n {
        let subject_id = format!("subj-{idx:04}");
        let group = if idx < counts[0] {
            Group::Cn
        } else if idx < counts[0] + counts[1] {
            Group::Mci
        } else {
            Group::Ad
        };
        let mut rng = DeterministicRng::new(
            cfg.seed,
            mix_streams(&[hash64(b"subject"), hash64(subject_id.as_bytes())]),
        );
        let age = rng.uniform(cfg.age_range.0, cfg.age_range.1);
        let (lo, hi) = cfg.scans_per_subject;
        let n_scans = lo + rng.below(hi - lo + 1);
        if group == Group::Cn {
            cn_ids.push(subject_id.clone());
        }
        subject_meta.push((subject_id, group, age, n_scans));
    }

    let cn_splits = split_subjects(&cn_ids, SPLIT_RATIOS, cfg.seed)?;
    for (subject_id, group, age, n_scans) in subject_meta {
        // Disease groups are evaluation-only cohorts: all scans go to the
        // test split, mirroring how they are analyzed.
        let split = match group {
            Group::Cn => cn_splits[&subject_id],
            _ => Split::Test,
        };
        for scan_index in 0..n_scans {
            plans.push(ScanPlan {
                subject_id: subject_id.clone(),
                scan_index,
                age,
                group,
                split,
            });
        }
    }
    Ok(plans)
}

fn generate_scan(
    cfg: &CorpusConfig,
    layout: &RegionLayout,
    plan: &ScanPlan,
) -> Result<(Phantom, PseudoSample, [Vec<u16>; 3])> {
    // Per-sample stream: hash(corpus_seed, subject_id, scan_index).
    let mut rng = DeterministicRng::new(
        cfg.seed,
        mix_streams(&[
            hash64(plan.subject_id.as_bytes()),
            plan.scan_index as u64,
        ]),
    );
    let phantom = generate_phantom(
        &cfg.synth(),
        layout,
        &mut rng,
        &plan.subject_id,
        plan.age,
        plan.group,
    )?;
    let scan_id = format!("{}-s{}", plan.subject_id, plan.scan_index);
    let sample = sample_from_volume(&phantom.volume, cfg.chunk, &phantom, &scan_id)?;
    let label_chunks = extract_label_chunks(&phantom.label_map, cfg.grid, cfg.chunk)?;
    Ok((phantom, sample, label_chunks))
}

/// Chunk extraction + normalization for a (possibly augmented) volume.
pub fn sample_from_volume(
    volume: &Tensor,
    chunk: (usize, usize, usize),
    phantom: &Phantom,
    scan_id: &str,
) -> Result<PseudoSample> {
    let [s, c, a] = extract_view_chunks(volume, chunk)?;
    Ok(PseudoSample {
        subject_id: phantom.subject_id.clone(),
        scan_id: scan_id.to_string(),
        view_s: minmax_normalize(&s),
        view_c: minmax_normalize(&c),
        view_a: minmax_normalize(&a),
        region_volumes: phantom.region_volumes.clone(),
        age: phantom.age,
        group: phantom.group,
        cog_score: phantom.cog_score,
    })
}

/// Generate the corpus to disk: `scans/<scan_id>/{volume,labels,view_*}.tsr`
/// plus `record.json` per scan and one `manifest.json` at the root.
pub fn build_corpus(cfg: &CorpusConfig, root: &Path) -> Result<DatasetManifest> {
    let layout = RegionLayout::build(&cfg.synth())?;
    let plans = plan_corpus(cfg)?;
    std::fs::create_dir_all(root.join("scans"))?;

    let mut entries = Vec::with_capacity(plans.len());
    let mut train_vol_rows = Vec::new();
    let mut train_age_sum = 0.0;
    let mut train_count = 0usize;

    for plan in &plans {
        let (phantom, sample, _) = generate_scan(cfg, &layout, plan)?;
        let dir_rel = format!("scans/{}", sample.scan_id);
        let dir = root.join(&dir_rel);
        std::fs::create_dir_all(&dir)?;

        phantom.volume.write(&dir.join("volume.tsr"), Dtype::F32)?;
        let labels_f: Vec<f64> = phantom.label_map.iter().map(|&l| l as f64).collect();
        Tensor::new(vec![cfg.grid, cfg.grid, cfg.grid], labels_f)?
            .write(&dir.join("labels.tsr"), Dtype::F32)?;
        sample.view_s.write(&dir.join("view_s.tsr"), Dtype::F32)?;
        sample.view_c.write(&dir.join("view_c.tsr"), Dtype::F32)?;
        sample.view_a.write(&dir.join("view_a.tsr"), Dtype::F32)?;

        let record = ScanRecord {
            subject_id: sample.subject_id.clone(),
            scan_id: sample.scan_id.clone(),
            age: sample.age,
            group: sample.group,
            cog_score: sample.cog_score,
            region_volumes: sample.region_volumes.clone(),
        };
        std::fs::write(
            dir.join("record.json"),
            serde_json::to_string_pretty(&record).map_err(|e| Error::Format {
                path: dir_rel.clone(),
                why: e.to_string(),
            })?,
        )?;

        if plan.split == Split::Train {
            train_vol_rows.push(sample.region_volumes.clone());
            train_age_sum += sample.age;
            train_count += 1;
        }
        entries.push(ScanEntry {
            subject_id: sample.subject_id.clone(),
            scan_id: sample.scan_id.clone(),
            split: plan.split,
            group: sample.group,
            age: sample.age,
            cog_score: sample.cog_score,
            dir: dir_rel,
        });
    }

    let manifest = DatasetManifest {
        config: cfg.clone(),
        scans: entries,
        volume_stats: VolumeStats::from_train_rows(&train_vol_rows)?,
        train_mean_age: train_age_sum / train_count.max(1) as f64,
    };
    std::fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
            path: "manifest.json".into(),
            why: e.to_string(),
        })?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let json = std::fs::read_to_string(&path)?;
    serde_json::from_str(&json).map_err(|e| Error::Format {
        path: path.display().to_string(),
        why: e.to_string(),
    })
}

// ── corpus views for the trainer / evaluator ────────────────────────

/// Disk-backed corpus. Train samples re-derive chunks from the stored
/// volume (augmentation permitting); eval samples reuse the stored chunks.
pub struct DiskCorpus {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

impl DiskCorpus {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let pick = |split: Split| -> Vec<usize> {
            manifest
                .scans
                .iter()
                .enumerate()
                .filter(|(_, e)| e.split == split)
                .map(|(i, _)| i)
                .collect()
        };
        Ok(Self {
            train: pick(Split::Train),
            valid: pick(Split::Valid),
            test: pick(Split::Test),
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entry(&self, idx: usize) -> &ScanEntry {
        &self.manifest.scans[idx]
    }

    /// Stored (normalized) sample for evaluation.
    pub fn load_sample(&self, idx: usize) -> Result<PseudoSample> {
        let entry = &self.manifest.scans[idx];
        let dir = self.root.join(&entry.dir);
        let record: ScanRecord = serde_json::from_str(&std::fs::read_to_string(
            dir.join("record.json"),
        )?)
        .map_err(|e| Error::Format {
            path: entry.dir.clone(),
            why: e.to_string(),
        })?;
        Ok(PseudoSample {
            subject_id: record.subject_id,
            scan_id: record.scan_id,
            view_s: Tensor::read(&dir.join("view_s.tsr"))?,
            view_c: Tensor::read(&dir.join("view_c.tsr"))?,
            view_a: Tensor::read(&dir.join("view_a.tsr"))?,
            region_volumes: record.region_volumes,
            age: record.age,
            group: record.group,
            cog_score: record.cog_score,
        })
    }

    pub fn load_volume(&self, idx: usize) -> Result<Tensor> {
        let entry = &self.manifest.scans[idx];
        Tensor::read(&self.root.join(&entry.dir).join("volume.tsr"))
    }

    pub fn load_labels(&self, idx: usize) -> Result<Vec<u16>> {
        let entry = &self.manifest.scans[idx];
        let t = Tensor::read(&self.root.join(&entry.dir).join("labels.tsr"))?;
        Ok(t.data().iter().map(|&v| v as u16).collect())
    }

    /// Noise-free reference phantom at the train-split mean age; the shared
    /// frame every gradient map is averaged in.
    pub fn reference(&self) -> Result<Phantom> {
        let synth = self.manifest.config.synth();
        let layout = RegionLayout::build(&synth)?;
        let age = self
            .manifest
            .train_mean_age
            .clamp(synth.age_range.0, synth.age_range.1);
        generate_reference(&synth, &layout, age)
    }

    pub fn geometry(&self) -> Result<CropGeometry> {
        CropGeometry::new(self.manifest.config.grid, self.manifest.config.chunk)
    }

    fn sample_for_training(
        &self,
        idx: usize,
        rng: &mut DeterministicRng,
        augment_on: bool,
    ) -> Result<PseudoSample> {
        if !augment_on {
            return self.load_sample(idx);
        }
        let volume = self.load_volume(idx)?;
        let augmented = augment(&volume, rng);
        let sample = self.load_sample(idx)?;
        let [s, c, a] = extract_view_chunks(&augmented, self.manifest.config.chunk)?;
        Ok(PseudoSample {
            view_s: minmax_normalize(&s),
            view_c: minmax_normalize(&c),
            view_a: minmax_normalize(&a),
            ..sample
        })
    }
}

impl SampleSource for DiskCorpus {
    fn train_len(&self) -> usize {
        self.train.len()
    }
    fn valid_len(&self) -> usize {
        self.valid.len()
    }
    fn train_sample(
        &self,
        idx: usize,
        rng: &mut DeterministicRng,
        augment_on: bool,
    ) -> Result<PseudoSample> {
        self.sample_for_training(self.train[idx], rng, augment_on)
    }
    fn valid_sample(&self, idx: usize) -> Result<PseudoSample> {
        self.load_sample(self.valid[idx])
    }
}

/// Fully in-memory corpus; used by tests and fast experiments.
pub struct MemScan {
    pub sample: PseudoSample,
    pub split: Split,
    /// Raw volume, retained for train-split augmentation only.
    pub volume: Option<Tensor>,
    pub label_chunks: [Vec<u16>; 3],
}

pub struct MemCorpus {
    pub config: CorpusConfig,
    pub scans: Vec<MemScan>,
    pub volume_stats: VolumeStats,
    pub train_mean_age: f64,
    pub reference: Phantom,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

impl MemCorpus {
    pub fn build(cfg: &CorpusConfig) -> Result<Self> {
        let layout = RegionLayout::build(&cfg.synth())?;
        let plans = plan_corpus(cfg)?;
        let mut scans = Vec::with_capacity(plans.len());
        let mut train_vol_rows = Vec::new();
        let mut train_age_sum = 0.0;
        let mut train_count = 0usize;
        for plan in &plans {
            let (phantom, sample, label_chunks) = generate_scan(cfg, &layout, plan)?;
            if plan.split == Split::Train {
                train_vol_rows.push(sample.region_volumes.clone());
                train_age_sum += sample.age;
                train_count += 1;
            }
            scans.push(MemScan {
                sample,
                split: plan.split,
                volume: (plan.split == Split::Train).then_some(phantom.volume),
                label_chunks,
            });
        }
        let train_mean_age = train_age_sum / train_count.max(1) as f64;
        let reference = generate_reference(
            &cfg.synth(),
            &layout,
            train_mean_age.clamp(cfg.age_range.0, cfg.age_range.1),
        )?;
        let pick = |split: Split, scans: &[MemScan]| -> Vec<usize> {
            scans
                .iter()
                .enumerate()
                .filter(|(_, s)| s.split == split)
                .map(|(i, _)| i)
                .collect()
        };
        Ok(Self {
            train: pick(Split::Train, &scans),
            valid: pick(Split::Valid, &scans),
            test: pick(Split::Test, &scans),
            config: cfg.clone(),
            scans,
            volume_stats: VolumeStats::from_train_rows(&train_vol_rows)?,
            train_mean_age,
            reference,
        })
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn geometry(&self) -> CropGeometry {
        CropGeometry::new(self.config.grid, self.config.chunk).expect("validated at build")
    }

    /// Drop the raw train volumes once training is done; evaluation and
    /// attribution only need the preprocessed samples.
    pub fn release_train_volumes(&mut self) {
        for scan in self.scans.iter_mut() {
            scan.volume = None;
        }
    }
}

impl SampleSource for MemCorpus {
    fn train_len(&self) -> usize {
        self.train.len()
    }
    fn valid_len(&self) -> usize {
        self.valid.len()
    }
    fn train_sample(
        &self,
        idx: usize,
        rng: &mut DeterministicRng,
        augment_on: bool,
    ) -> Result<PseudoSample> {
        let scan = &self.scans[self.train[idx]];
        if !augment_on {
            return Ok(scan.sample.clone());
        }
        let volume = scan
            .volume
            .as_ref()
            .ok_or_else(|| Error::Data("train scan lost its raw volume".into()))?;
        let augmented = augment(volume, rng);
        let [s, c, a] = extract_view_chunks(&augmented, self.config.chunk)?;
        Ok(PseudoSample {
            view_s: minmax_normalize(&s),
            view_c: minmax_normalize(&c),
            view_a: minmax_normalize(&a),
            ..scan.sample.clone()
        })
    }
    fn valid_sample(&self, idx: usize) -> Result<PseudoSample> {
        Ok(self.scans[self.valid[idx]].sample.clone())
    }
}
