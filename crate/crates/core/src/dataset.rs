//! Corpus ingestion and deterministic joint batching of 2D and 3D data.
//!
//! A scan produces a [`CorpusManifest`]. [`plan_epoch`] turns a manifest and a
//! [`BatchPlan`] into a shuffled schedule of sample descriptors, and
//! [`materialize`] turns one descriptor into two augmented `64×64×32` views.
//! 2D images go through random crop, the pseudo-3D transform, and a resize
//! before augmentation, so both kinds leave the pipeline with the same shape.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::augment::{
    augment_global_with, augment_local_with, random_crop_3d, random_crop_resize_2d, AugmentSpec,
};
use crate::error::{Error, Result};
use crate::io::{self, AnyTensor};
use crate::p3d::{pseudo3d_for_model, P3DConfig};
use crate::rng::{self, stage};
use crate::tensor::{shape_str, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "2d")]
    Image2d,
    #[serde(rename = "3d")]
    Volume3d,
}

/// Decides the intensity normalization applied on load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Clipped to [-1000, 1000] HU, then min-max scaled.
    Ct,
    /// Per-volume min-max.
    Mri,
    /// Per-image min-max.
    Xray,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub n_2d: usize,
    pub n_3d: usize,
    #[serde(default)]
    pub rejects: Vec<Reject>,
}

/// How files found during a scan are classified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KindRules {
    /// Extensions read as 2D grayscale images.
    pub image_extensions: Vec<String>,
    /// Path tokens that mark a volume as CT. Tokens are the lowercase
    /// alphanumeric runs of the relative path.
    pub ct_markers: Vec<String>,
}

impl Default for KindRules {
    fn default() -> Self {
        Self {
            image_extensions: vec!["pgm".into(), "png".into()],
            ct_markers: vec!["ct".into()],
        }
    }
}

impl KindRules {
    fn is_image(&self, path: &Path) -> bool {
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| {
                self.image_extensions
                    .iter()
                    .any(|x| x.eq_ignore_ascii_case(e))
            })
            .unwrap_or(false)
    }

    fn is_ct(&self, rel: &str) -> bool {
        rel.to_ascii_lowercase()
            .split(|c: char| !c.is_ascii_alphanumeric())
            .any(|tok| self.ct_markers.iter().any(|m| m == tok))
    }
}

impl CorpusManifest {
    pub fn from_entries(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        let n_2d = entries.iter().filter(|e| e.kind == Kind::Image2d).count();
        let n_3d = entries.len() - n_2d;
        Self {
            root: root.into(),
            entries,
            n_2d,
            n_3d,
            rejects: Vec::new(),
        }
    }

    pub fn count(&self, kind: Kind) -> usize {
        match kind {
            Kind::Image2d => self.n_2d,
            Kind::Volume3d => self.n_3d,
        }
    }

    pub fn indices_of(&self, kind: Kind) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn absolute_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: bad manifest: {e}", path.display())))?;
        let fresh = Self::from_entries(m.root.clone(), m.entries.clone());
        if (fresh.n_2d, fresh.n_3d) != (m.n_2d, m.n_3d) {
            return Err(Error::data(format!(
                "{}: counts ({}, {}) disagree with entries ({}, {})",
                path.display(),
                m.n_2d,
                m.n_3d,
                fresh.n_2d,
                fresh.n_3d
            )));
        }
        Ok(m)
    }
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn probe(root: &Path, path: &Path, rules: &KindRules) -> std::result::Result<ManifestEntry, String> {
    let rel = relative(root, path);
    if rules.is_image(path) {
        let (h, w) = io::image_dims(path).map_err(|e| e.to_string())?;
        return Ok(ManifestEntry {
            path: rel,
            kind: Kind::Image2d,
            shape: vec![h, w],
            modality: Modality::Xray,
        });
    }
    let header = io::read_header(path).map_err(|e| e.to_string())?;
    let (bin, _) = io::raw_paths(path);
    let len = fs::metadata(&bin)
        .map_err(|e| format!("missing buffer {}: {e}", bin.display()))?
        .len() as usize;
    let expected = header.shape.iter().product::<usize>() * header.dtype.size();
    if len != expected {
        return Err(format!("buffer has {len} bytes, header implies {expected}"));
    }
    let bin_rel = relative(root, &bin);
    let (kind, modality) = match header.shape.len() {
        2 => (Kind::Image2d, Modality::Xray),
        3 if rules.is_ct(&bin_rel) => (Kind::Volume3d, Modality::Ct),
        3 => (Kind::Volume3d, Modality::Mri),
        r => return Err(format!("rank {r} tensor is neither an image nor a volume")),
    };
    Ok(ManifestEntry {
        path: bin_rel,
        kind,
        shape: header.shape,
        modality,
    })
}

/// Walks `root` and classifies every image and raw tensor it finds.
///
/// Entries are ordered lexicographically by relative path. Files that fail to
/// parse are collected in `rejects`; only an unreadable root is an error.
pub fn scan_corpus(root: &Path, rules: &KindRules) -> Result<CorpusManifest> {
    fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut candidates = Vec::new();
    let mut rejects = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        match item {
            Ok(e) if e.file_type().is_file() => {
                let p = e.path();
                let ext = p.extension().and_then(|x| x.to_str()).unwrap_or("");
                if rules.is_image(p) || ext == "json" {
                    candidates.push(p.to_path_buf());
                }
            }
            Ok(_) => {}
            Err(e) => rejects.push(Reject {
                path: e
                    .path()
                    .map(|p| relative(root, p))
                    .unwrap_or_default(),
                reason: e.to_string(),
            }),
        }
    }
    let probed: Vec<_> = candidates
        .par_iter()
        .map(|p| (relative(root, p), probe(root, p, rules)))
        .collect();
    let mut entries = Vec::new();
    for (path, r) in probed {
        match r {
            Ok(e) => entries.push(e),
            Err(reason) => rejects.push(Reject { path, reason }),
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let mut m = CorpusManifest::from_entries(root, entries);
    m.rejects = rejects;
    Ok(m)
}

fn min_max(t: &mut Tensor<f32>) {
    let (lo, hi) = (t.min_value(), t.max_value());
    let span = hi - lo;
    for x in t.data_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

/// Applies the modality's intensity normalization, mapping into `[0, 1]`.
pub fn normalize(t: &mut Tensor<f32>, modality: Modality) {
    if modality == Modality::Ct {
        for x in t.data_mut() {
            *x = x.clamp(-1000.0, 1000.0);
        }
    }
    min_max(t);
}

/// Reads an entry from disk, checks it against the manifest, and normalizes it.
pub fn load_entry(manifest: &CorpusManifest, entry: &ManifestEntry) -> Result<Tensor<f32>> {
    let path = manifest.absolute_path(entry);
    let mut t = if io::is_image_path(&path) {
        io::read_gray_image(&path)?
    } else {
        match io::read_tensor(&path)? {
            AnyTensor::F32(t) => t,
            other => other.to_f32(),
        }
    };
    if t.shape() != entry.shape.as_slice() {
        return Err(Error::data(format!(
            "{}: shape {} differs from manifest {}",
            entry.path,
            shape_str(t.shape()),
            shape_str(&entry.shape)
        )));
    }
    normalize(&mut t, entry.modality);
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    #[serde(default = "default_mix")]
    pub mix_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    pub epoch_length: usize,
}

fn default_mix() -> f64 {
    0.5
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epoch_length == 0 {
            return Err(Error::config("batch_size and epoch_length must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::config(format!(
                "mix_ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.batch_size * self.epoch_length
    }

    /// `(2D, 3D)` sample counts for one epoch.
    pub fn split(&self) -> (usize, usize) {
        let total = self.total();
        let n2 = ((self.mix_ratio * total as f64).round() as usize).min(total);
        (n2, total - n2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    /// Index into the manifest's entries.
    pub entry: usize,
    /// Position in the epoch schedule; keys all of the sample's randomness.
    pub item_index: u64,
    pub kind: Kind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub descriptors: Vec<SampleDescriptor>,
    pub count_2d: usize,
    pub count_3d: usize,
    /// Set when a corpus was smaller than its share and was sampled with
    /// replacement.
    pub replacement_2d: bool,
    pub replacement_3d: bool,
}

impl Schedule {
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[SampleDescriptor]> {
        self.descriptors.chunks(batch_size)
    }
}

fn draw(rng: &mut rng::Stream, pool: &[usize], n: usize) -> (Vec<usize>, bool) {
    if n <= pool.len() {
        let picked = index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        (picked, false)
    } else {
        let picked = (0..n)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        (picked, true)
    }
}

/// Builds the shuffled sample schedule for one epoch.
pub fn plan_epoch(manifest: &CorpusManifest, plan: &BatchPlan) -> Result<Schedule> {
    plan.validate()?;
    let (n2, n3) = plan.split();
    let pool2 = manifest.indices_of(Kind::Image2d);
    let pool3 = manifest.indices_of(Kind::Volume3d);
    for (n, pool, name) in [(n2, &pool2, "2D"), (n3, &pool3, "3D")] {
        if n > 0 && pool.is_empty() {
            return Err(Error::config(format!(
                "plan needs {n} {name} samples but the {name} corpus is empty"
            )));
        }
    }
    let mut rng = rng::stream(plan.seed, &[stage::PLAN]);
    let (pick2, rep2) = draw(&mut rng, &pool2, n2);
    let (pick3, rep3) = draw(&mut rng, &pool3, n3);
    let mut order: Vec<(usize, Kind)> = pick2
        .into_iter()
        .map(|e| (e, Kind::Image2d))
        .chain(pick3.into_iter().map(|e| (e, Kind::Volume3d)))
        .collect();
    order.shuffle(&mut rng);
    let descriptors = order
        .into_iter()
        .enumerate()
        .map(|(i, (entry, kind))| SampleDescriptor {
            entry,
            item_index: i as u64,
            kind,
        })
        .collect();
    Ok(Schedule {
        descriptors,
        count_2d: n2,
        count_3d: n3,
        replacement_2d: rep2,
        replacement_3d: rep3,
    })
}

/// Produces the two augmented views of one scheduled sample.
///
/// The crop is shared by both views; every view then gets its own global and
/// local augmentation. All randomness is keyed by `(plan_seed, item_index,
/// view)` on top of the augmentation seed.
pub fn materialize(
    descriptor: &SampleDescriptor,
    manifest: &CorpusManifest,
    aug: &AugmentSpec,
    p3d: &P3DConfig,
    plan_seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    aug.validate()?;
    let entry = manifest.entries.get(descriptor.entry).ok_or_else(|| {
        Error::data(format!(
            "descriptor points at entry {} of a {}-entry manifest",
            descriptor.entry,
            manifest.entries.len()
        ))
    })?;
    if entry.kind != descriptor.kind {
        return Err(Error::data(format!(
            "descriptor kind {:?} does not match entry {}",
            descriptor.kind, entry.path
        )));
    }
    let item = descriptor.item_index;
    let base = load_entry(manifest, entry)?;
    let mut crop_rng = rng::stream(aug.seed, &[plan_seed, item, stage::CROP]);
    let sample = match entry.kind {
        Kind::Volume3d => random_crop_3d(&base, &mut crop_rng, &aug.crop)?,
        Kind::Image2d => {
            let img = random_crop_resize_2d(&base, &mut crop_rng, &aug.crop)?;
            pseudo3d_for_model(&img, p3d, aug.crop.target_3d)?
        }
    };
    let view = |v: u64| -> Result<Tensor<f32>> {
        let mut g = rng::stream(aug.seed, &[plan_seed, item, v, stage::GLOBAL]);
        let mut l = rng::stream(aug.seed, &[plan_seed, item, v, stage::LOCAL]);
        let out = augment_global_with(&sample, aug, &mut g)?;
        augment_local_with(&out, aug, &mut l)
    };
    Ok((view(0)?, view(1)?))
}

/// Materializes every scheduled sample in parallel; results keep schedule order.
pub fn materialize_all(
    schedule: &Schedule,
    manifest: &CorpusManifest,
    aug: &AugmentSpec,
    p3d: &P3DConfig,
    plan_seed: u64,
) -> Vec<Result<(Tensor<f32>, Tensor<f32>)>> {
    schedule
        .descriptors
        .par_iter()
        .map(|d| materialize(d, manifest, aug, p3d, plan_seed))
        .collect()
}

/// Sample-level record written to the schedule audit log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditRecord {
    pub batch: usize,
    pub item_index: u64,
    pub entry: usize,
    pub path: String,
    pub kind: Kind,
    pub status: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditLog {
    pub plan: BatchPlan,
    pub pseudo3d: P3DConfig,
    pub augment: AugmentSpec,
    pub count_2d: usize,
    pub count_3d: usize,
    pub replacement_2d: bool,
    pub replacement_3d: bool,
    pub realized_2d: usize,
    pub realized_3d: usize,
    pub skipped: usize,
    pub batches: Vec<String>,
    pub samples: Vec<AuditRecord>,
}

/// Plans one epoch, materializes it, and writes `batch_NNNNN_view{0,1}`
/// tensors of shape `n×H×W×D` plus `schedule.json` into `out_dir`.
///
/// Samples that fail to load are skipped and recorded in the audit log.
pub fn export_epoch(
    manifest: &CorpusManifest,
    plan: &BatchPlan,
    aug: &AugmentSpec,
    p3d: &P3DConfig,
    out_dir: &Path,
) -> Result<AuditLog> {
    let schedule = plan_epoch(manifest, plan)?;
    let results = materialize_all(&schedule, manifest, aug, p3d, plan.seed);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut samples = Vec::with_capacity(results.len());
    let mut batches = Vec::new();
    let mut realized = (0, 0);
    let mut results = results.into_iter();
    for (b, chunk) in schedule.batches(plan.batch_size).enumerate() {
        let mut views: [Vec<f32>; 2] = [Vec::new(), Vec::new()];
        let mut n = 0;
        for d in chunk {
            let entry = &manifest.entries[d.entry];
            let status = match results.next().expect("one result per descriptor") {
                Ok((a, bview)) => {
                    views[0].extend_from_slice(a.data());
                    views[1].extend_from_slice(bview.data());
                    n += 1;
                    match d.kind {
                        Kind::Image2d => realized.0 += 1,
                        Kind::Volume3d => realized.1 += 1,
                    }
                    "ok".to_string()
                }
                Err(e) => {
                    warn!("skipping {} (item {}): {e}", entry.path, d.item_index);
                    format!("skipped: {e}")
                }
            };
            samples.push(AuditRecord {
                batch: b,
                item_index: d.item_index,
                entry: d.entry,
                path: entry.path.clone(),
                kind: d.kind,
                status,
            });
        }
        if n == 0 {
            continue;
        }
        let name = format!("batch_{b:05}");
        let mut shape = vec![n];
        shape.extend_from_slice(&aug.crop.target_3d);
        for (v, data) in views.into_iter().enumerate() {
            let t = Tensor::new(shape.clone(), data)?;
            io::write_tensor(&out_dir.join(format!("{name}_view{v}")), &t)?;
        }
        batches.push(name);
    }

    let log = AuditLog {
        plan: plan.clone(),
        pseudo3d: *p3d,
        augment: aug.clone(),
        count_2d: schedule.count_2d,
        count_3d: schedule.count_3d,
        replacement_2d: schedule.replacement_2d,
        replacement_3d: schedule.replacement_3d,
        realized_2d: realized.0,
        realized_3d: realized.1,
        skipped: samples.iter().filter(|s| s.status != "ok").count(),
        batches,
        samples,
    };
    let path = out_dir.join("schedule.json");
    let json = serde_json::to_string_pretty(&log).expect("audit log serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n2: usize, n3: usize) -> CorpusManifest {
        let entries = (0..n2)
            .map(|i| ManifestEntry {
                path: format!("xray/{i:06}.pgm"),
                kind: Kind::Image2d,
                shape: vec![256, 256],
                modality: Modality::Xray,
            })
            .chain((0..n3).map(|i| ManifestEntry {
                path: format!("ct/{i:05}.bin"),
                kind: Kind::Volume3d,
                shape: vec![128, 128, 64],
                modality: Modality::Ct,
            }))
            .collect();
        CorpusManifest::from_entries("/data", entries)
    }

    fn plan(batch_size: usize, epoch_length: usize, mix_ratio: f64) -> BatchPlan {
        BatchPlan {
            batch_size,
            mix_ratio,
            seed: 17,
            epoch_length,
        }
    }

    #[test]
    fn counts_from_entries() {
        let m = synthetic(2, 3);
        assert_eq!((m.n_2d, m.n_3d), (2, 3));
    }

    #[test]
    fn reported_corpus_sizes() {
        let m = synthetic(377_088, 6_453);
        assert_eq!(m.n_3d, 6453);
        assert_eq!(m.n_2d, 377_088);
        let s = plan_epoch(&m, &plan(96, 100, 0.5)).unwrap();
        assert_eq!((s.count_2d, s.count_3d), (4800, 4800));
        assert!(!s.replacement_2d);
        assert!(!s.replacement_3d);
    }

    #[test]
    fn mixing_arithmetic() {
        let m = synthetic(7, 5);
        let s = plan_epoch(&m, &plan(4, 10, 0.5)).unwrap();
        let n2 = s.descriptors.iter().filter(|d| d.kind == Kind::Image2d).count();
        let n3 = s.descriptors.iter().filter(|d| d.kind == Kind::Volume3d).count();
        assert_eq!((n2, n3), (20, 20));
        assert!(s.replacement_2d && s.replacement_3d);
        for d in &s.descriptors {
            assert_eq!(m.entries[d.entry].kind, d.kind);
        }

        let pure3 = plan_epoch(&m, &plan(4, 10, 0.0)).unwrap();
        assert!(pure3.descriptors.iter().all(|d| d.kind == Kind::Volume3d));
        let pure2 = plan_epoch(&m, &plan(4, 10, 1.0)).unwrap();
        assert!(pure2.descriptors.iter().all(|d| d.kind == Kind::Image2d));
    }

    #[test]
    fn schedule_is_seed_stable() {
        let m = synthetic(30, 12);
        let a = plan_epoch(&m, &plan(3, 5, 0.3)).unwrap();
        assert_eq!(a, plan_epoch(&m, &plan(3, 5, 0.3)).unwrap());
        let mut other = plan(3, 5, 0.3);
        other.seed += 1;
        assert_ne!(a, plan_epoch(&m, &other).unwrap());
        let idx: Vec<u64> = a.descriptors.iter().map(|d| d.item_index).collect();
        assert_eq!(idx, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn empty_corpus_with_share_is_config_error() {
        let m = synthetic(0, 4);
        assert!(matches!(
            plan_epoch(&m, &plan(2, 2, 0.5)),
            Err(Error::Config(_))
        ));
        assert!(plan_epoch(&m, &plan(2, 2, 0.0)).is_ok());
        assert!(matches!(
            plan_epoch(&m, &plan(0, 2, 0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ct_markers_match_tokens() {
        let rules = KindRules::default();
        assert!(rules.is_ct("luna16/CT/scan_1.bin"));
        assert!(rules.is_ct("ct_001.bin"));
        assert!(!rules.is_ct("project/scan.bin"));
    }

    #[test]
    fn ct_normalization_clips() {
        let mut t = Tensor::new(vec![4], vec![-3000.0, -1000.0, 0.0, 2500.0]).unwrap();
        normalize(&mut t, Modality::Ct);
        assert_eq!(t.data(), &[0.0, 0.0, 0.5, 1.0]);
        let mut c = Tensor::full(&[3], 5.0f32).unwrap();
        normalize(&mut c, Modality::Mri);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_directory_scan() {
        let dir = tempfile::tempdir().unwrap();
        let m = scan_corpus(dir.path(), &KindRules::default()).unwrap();
        assert_eq!((m.n_2d, m.n_3d), (0, 0));
        assert!(scan_corpus(&dir.path().join("missing"), &KindRules::default()).is_err());
    }
}
