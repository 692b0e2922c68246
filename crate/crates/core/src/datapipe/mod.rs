//! Dataset indexing, identity-balanced batch sampling and the synthetic
//! two-modality generator.
//!
//! Two on-disk layouts are understood:
//!
//! * `id_dirs`: `root/{visible,infrared,grayscale}/<identity>/<image>.png`,
//!   with an optional camera encoded as a `c<cam>_` file-name prefix;
//! * `flat_manifest`: `root/manifest.csv` with columns
//!   `path,identity,modality,camera` and paths relative to `root`.

mod sampler;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AgmError, Result};
use crate::imaging::{self, Image, Modality};

pub use sampler::{batches_per_epoch, PkSampler};
pub use synth::{generate_synthetic, Desaturation, SynthConfig, SYNTH_KEYS};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    IdDirs,
    FlatManifest,
}

impl Layout {
    /// Manifest when `root/manifest.csv` exists, identity directories
    /// otherwise.
    pub fn detect(root: &Path) -> Layout {
        if root.join(MANIFEST).is_file() {
            Layout::FlatManifest
        } else {
            Layout::IdDirs
        }
    }
}

impl FromStr for Layout {
    type Err = AgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id_dirs" => Ok(Layout::IdDirs),
            "flat_manifest" | "manifest" => Ok(Layout::FlatManifest),
            other => Err(AgmError::Config(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    /// Contiguous class index.
    pub identity: u32,
    pub original_id: u32,
    pub modality: Modality,
    pub camera: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<Record>,
    /// `original_ids[class]` is the on-disk identity of a class index.
    pub original_ids: Vec<u32>,
}

impl DatasetIndex {
    /// Builds an index from `(path, original id, modality, camera)` tuples,
    /// mapping identities to `[0, C)` in ascending original order.
    pub fn from_entries(root: PathBuf, entries: Vec<(PathBuf, u32, Modality, Option<u32>)>) -> Self {
        let original_ids: Vec<u32> = entries.iter().map(|e| e.1).collect::<BTreeSet<_>>().into_iter().collect();
        let remap: BTreeMap<u32, u32> = original_ids.iter().enumerate().map(|(i, &o)| (o, i as u32)).collect();
        let records = entries
            .into_iter()
            .map(|(path, original_id, modality, camera)| Record {
                path,
                identity: remap[&original_id],
                original_id,
                modality,
                camera,
            })
            .collect();
        DatasetIndex {
            root,
            records,
            original_ids,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.original_ids.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.records.iter().filter(|r| r.modality == modality).count()
    }

    pub fn identities_in(&self, modality: Modality) -> BTreeSet<u32> {
        self.records
            .iter()
            .filter(|r| r.modality == modality)
            .map(|r| r.identity)
            .collect()
    }

    /// Sub-index of one modality; class indices are recomputed.
    pub fn filter_modality(&self, modality: Modality) -> DatasetIndex {
        let entries = self
            .records
            .iter()
            .filter(|r| r.modality == modality)
            .map(|r| (r.path.clone(), r.original_id, r.modality, r.camera))
            .collect();
        DatasetIndex::from_entries(self.root.clone(), entries)
    }

    /// Training splits need every identity in both an RGB-like modality
    /// (visible or grayscale) and infrared.
    pub fn validate_paired(&self) -> Result<()> {
        let ir = self.identities_in(Modality::Infrared);
        let mut rgb = self.identities_in(Modality::Visible);
        rgb.extend(self.identities_in(Modality::Grayscale));
        let lonely: Vec<String> = rgb
            .symmetric_difference(&ir)
            .map(|&c| self.original_ids[c as usize].to_string())
            .collect();
        if !lonely.is_empty() {
            return Err(AgmError::Data(format!(
                "identities present in only one modality: {}",
                lonely.join(", ")
            )));
        }
        Ok(())
    }

    pub fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["path", "identity", "modality", "camera"])
            .map_err(|e| csv_error(&path, e))?;
        for r in &self.records {
            let rel = r.path.strip_prefix(&self.root).unwrap_or(&r.path);
            w.write_record([
                rel.to_string_lossy().as_ref(),
                &r.original_id.to_string(),
                &r.modality.to_string(),
                &r.camera.map(|c| c.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| AgmError::io(&path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> AgmError {
    AgmError::Data(format!("{}: {e}", path.display()))
}

fn parse_identity(s: &str, context: &Path) -> Result<u32> {
    s.trim()
        .parse()
        .map_err(|_| AgmError::Data(format!("non-numeric identity {s:?} at {}", context.display())))
}

/// Camera from a `c<digits>_` file-name prefix.
fn camera_from_name(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    let rest = stem.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() || !rest[digits.len()..].starts_with('_') {
        return None;
    }
    digits.parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AgmError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| AgmError::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).map_or(false, |e| e.eq_ignore_ascii_case("png"))
}

fn load_id_dirs(root: &Path) -> Result<Vec<(PathBuf, u32, Modality, Option<u32>)>> {
    let mut entries = Vec::new();
    for modality in [Modality::Visible, Modality::Infrared, Modality::Grayscale] {
        let mdir = root.join(modality.to_string());
        if !mdir.is_dir() {
            continue;
        }
        for id_dir in sorted_entries(&mdir)?.into_iter().filter(|p| p.is_dir()) {
            let name = id_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let id = parse_identity(&name, &id_dir)?;
            for file in sorted_entries(&id_dir)?.into_iter().filter(|p| is_png(p)) {
                let camera = camera_from_name(&file);
                entries.push((file, id, modality, camera));
            }
        }
    }
    Ok(entries)
}

fn load_manifest(root: &Path) -> Result<Vec<(PathBuf, u32, Modality, Option<u32>)>> {
    let path = root.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => AgmError::MissingFile(path.clone()),
        _ => csv_error(&path, e),
    })?;
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(&path, e))?;
        let field = |i: usize, name: &str| {
            row.get(i)
                .ok_or_else(|| AgmError::Data(format!("{}: row lacks column {name}", path.display())))
        };
        let file = root.join(field(0, "path")?);
        if !file.is_file() {
            return Err(AgmError::MissingFile(file));
        }
        let id = parse_identity(field(1, "identity")?, &path)?;
        let modality: Modality = field(2, "modality")?.parse()?;
        let camera = match row.get(3).map(str::trim) {
            None | Some("") => None,
            Some(c) => Some(
                c.parse()
                    .map_err(|_| AgmError::Data(format!("{}: bad camera {c:?}", path.display())))?,
            ),
        };
        entries.push((file, id, modality, camera));
    }
    Ok(entries)
}

/// Indexes a dataset root. With `require_paired`, identities present in
/// only one modality are rejected.
pub fn load_dataset(root: &Path, layout: Layout, require_paired: bool) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(AgmError::MissingFile(root.to_path_buf()));
    }
    let entries = match layout {
        Layout::IdDirs => load_id_dirs(root)?,
        Layout::FlatManifest => load_manifest(root)?,
    };
    if entries.is_empty() {
        return Err(AgmError::Data(format!("no images found under {}", root.display())));
    }
    let index = DatasetIndex::from_entries(root.to_path_buf(), entries);
    if require_paired {
        index.validate_paired()?;
    }
    Ok(index)
}

/// Every PNG below `dir`, in sorted path order.
pub fn collect_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(AgmError::MissingFile(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for p in sorted_entries(&d)? {
            if p.is_dir() {
                stack.push(p);
            } else if is_png(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// An index together with its decoded images, `images[i]` belonging to
/// `index.records[i]` and labelled with the contiguous class index.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub index: DatasetIndex,
    pub images: Vec<Image>,
}

impl ImageSet {
    pub fn load(index: DatasetIndex) -> Result<Self> {
        let images = index
            .records
            .iter()
            .map(|r| Ok(imaging::read_png(&r.path, r.modality, r.identity)?.with_camera(r.camera)))
            .collect::<Result<_>>()?;
        Ok(ImageSet { index, images })
    }

    /// Resizes every image to `h × w`.
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        let images = self
            .images
            .iter()
            .map(|img| imaging::resize(img, h, w))
            .collect::<Result<_>>()?;
        Ok(ImageSet {
            index: self.index.clone(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images whose record matches `keep`, with the records re-indexed.
    pub fn select(&self, keep: impl Fn(&Record) -> bool) -> ImageSet {
        let picked: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.index.records[i])).collect();
        let entries = picked
            .iter()
            .map(|&i| {
                let r = &self.index.records[i];
                (r.path.clone(), r.original_id, r.modality, r.camera)
            })
            .collect();
        let index = DatasetIndex::from_entries(self.index.root.clone(), entries);
        let images = picked
            .iter()
            .zip(&index.records)
            .map(|(&i, r)| {
                let mut img = self.images[i].clone();
                img.identity = r.identity;
                img
            })
            .collect();
        ImageSet { index, images }
    }
}
