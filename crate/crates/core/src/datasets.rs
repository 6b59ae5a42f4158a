//! Folder-format segmentation datasets, the Cityscapes adapter, the
//! colour-biased shapes generator and order-preserving splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{class_histogram, CategoryMap};

pub const IGNORE_ID: u8 = 255;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One RGB image and its class mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

impl Sample {
    pub fn validate(&self, num_classes: usize, ignore_id: u8) -> Result<()> {
        if self.image.dimensions() != self.mask.dimensions() {
            return Err(Error::Dataset(format!(
                "{}: image is {:?} but mask is {:?}",
                self.id,
                self.image.dimensions(),
                self.mask.dimensions()
            )));
        }
        let bad: BTreeMap<u8, u64> = class_histogram(self.mask.as_raw(), ignore_id)
            .into_iter()
            .filter(|(v, _)| *v as usize >= num_classes)
            .collect();
        if !bad.is_empty() {
            let listing: Vec<String> = bad.iter().map(|(v, n)| format!("{v} ({n} px)")).collect();
            return Err(Error::Dataset(format!(
                "{}: mask contains class ids outside [0, {num_classes}) and != {ignore_id}: {}",
                self.id,
                listing.join(", ")
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Where a dataset lives and what its labels mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub num_classes: usize,
    pub ignore_id: u8,
    pub class_names: Vec<String>,
    pub category_map: CategoryMap,
}

impl DatasetSpec {
    pub fn new(
        root: impl Into<PathBuf>,
        split: Split,
        class_names: Vec<String>,
        category_map: CategoryMap,
    ) -> Result<Self> {
        let spec = DatasetSpec {
            root: root.into(),
            split,
            num_classes: class_names.len(),
            ignore_id: IGNORE_ID,
            class_names,
            category_map,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Reads class information from `root/<split>/manifest.json`.
    pub fn from_manifest(root: impl Into<PathBuf>, split: Split) -> Result<Self> {
        let root = root.into();
        let manifest = DatasetManifest::read(&root.join(split.as_str()))?;
        let spec = DatasetSpec {
            root,
            split,
            num_classes: manifest.num_classes,
            ignore_id: manifest.ignore_id,
            class_names: manifest.class_names,
            category_map: manifest.categories,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(Error::Dataset(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.num_classes == 0 || self.num_classes > self.ignore_id as usize {
            return Err(Error::Dataset(format!(
                "class count {} must be in 1..={}",
                self.num_classes, self.ignore_id
            )));
        }
        self.category_map.validate_for(self.num_classes)
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.as_str())
    }
}

/// Sidecar written next to every generated or corrupted split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub kind: String,
    pub num_classes: usize,
    pub ignore_id: u8,
    pub class_names: Vec<String>,
    pub categories: CategoryMap,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<BiasedShapesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub variant: String,
    pub seed: u64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_manifest: Option<Box<DatasetManifest>>,
}

impl DatasetManifest {
    pub fn read(split_dir: &Path) -> Result<Self> {
        let path = split_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "{}: unsupported manifest schema version {}",
                path.display(),
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, split_dir: &Path) -> Result<PathBuf> {
        let path = split_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

/// Masks must be 8-bit single channel so class ids survive untouched.
pub fn read_mask(path: &Path) -> Result<GrayImage> {
    match image::open(path).map_err(|e| Error::image(path, e))? {
        DynamicImage::ImageLuma8(m) => Ok(m),
        other => Err(Error::Dataset(format!(
            "{}: masks must be 8-bit single-channel PNGs, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `root/<split>/images/*.png` with masks of the same name under `masks/`.
pub fn load_folder_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let dir = spec.split_dir();
    let mask_dir = dir.join("masks");
    let mut samples = Vec::new();
    for image_path in png_files(&dir.join("images"))? {
        let name = image_path.file_name().expect("listed file has a name");
        let mask_path = mask_dir.join(name);
        if !mask_path.is_file() {
            return Err(Error::Dataset(format!(
                "missing mask for image {}: expected {}",
                image_path.display(),
                mask_path.display()
            )));
        }
        let sample = Sample {
            id: stem(&image_path),
            image: read_rgb(&image_path)?,
            mask: read_mask(&mask_path)?,
        };
        sample.validate(spec.num_classes, spec.ignore_id)?;
        samples.push(sample);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// Writes samples in the folder format plus the manifest; returns every file written.
pub fn write_folder_dataset(split_dir: &Path, samples: &[Sample], manifest: &DatasetManifest) -> Result<Vec<PathBuf>> {
    let images = split_dir.join("images");
    let masks = split_dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut written = Vec::with_capacity(2 * samples.len() + 1);
    for s in samples {
        let ip = images.join(format!("{}.png", s.id));
        s.image.save(&ip).map_err(|e| Error::image(&ip, e))?;
        let mp = masks.join(format!("{}.png", s.id));
        s.mask.save(&mp).map_err(|e| Error::image(&mp, e))?;
        written.push(ip);
        written.push(mp);
    }
    written.push(manifest.write(split_dir)?);
    Ok(written)
}

/// One row of the Cityscapes label definition table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CityscapesLabel {
    pub name: String,
    pub label_id: u8,
    pub train_id: u8,
    pub category: String,
}

const CITYSCAPES_TABLE: &str = include_str!("../data/cityscapes_labels.csv");

pub fn cityscapes_labels() -> Vec<CityscapesLabel> {
    CITYSCAPES_TABLE
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            CityscapesLabel {
                name: cols[0].to_string(),
                label_id: cols[1].parse().expect("bundled table is well formed"),
                train_id: cols[2].parse().expect("bundled table is well formed"),
                category: cols[3].to_string(),
            }
        })
        .collect()
}

/// Lookup from raw label id to train id (255 for ignored labels).
pub fn cityscapes_remap_table() -> [Option<u8>; 256] {
    let mut table = [None; 256];
    for l in cityscapes_labels() {
        table[l.label_id as usize] = Some(l.train_id);
    }
    table
}

/// The 19 evaluation classes in train-id order.
pub fn cityscapes_class_names() -> Vec<String> {
    let mut named: Vec<(u8, String)> = cityscapes_labels()
        .into_iter()
        .filter(|l| l.train_id != IGNORE_ID)
        .map(|l| (l.train_id, l.name))
        .collect();
    named.sort();
    named.into_iter().map(|(_, n)| n).collect()
}

pub fn cityscapes_spec(root: impl Into<PathBuf>, split: Split) -> DatasetSpec {
    DatasetSpec::new(root, split, cityscapes_class_names(), CategoryMap::cityscapes())
        .expect("bundled Cityscapes definition is consistent")
}

pub fn remap_cityscapes_mask(raw: &GrayImage, table: &[Option<u8>; 256]) -> Result<GrayImage> {
    let mut out = raw.clone();
    for p in out.pixels_mut() {
        p.0[0] = table[p.0[0] as usize]
            .ok_or_else(|| Error::Dataset(format!("unknown Cityscapes label id {}", p.0[0])))?;
    }
    Ok(out)
}

/// Reads `leftImg8bit/<split>/<city>/*_leftImg8bit.png` with
/// `gtFine/<split>/<city>/*_gtFine_labelIds.png`, remapped to train ids.
pub fn adapt_cityscapes(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let table = cityscapes_remap_table();
    let img_root = root.join("leftImg8bit").join(split.as_str());
    let gt_root = root.join("gtFine").join(split.as_str());
    let mut cities: Vec<PathBuf> = fs::read_dir(&img_root)
        .map_err(|e| Error::io(&img_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cities.sort();
    let mut samples = Vec::new();
    for city in cities {
        let name = city.file_name().expect("directory has a name");
        let gt_city = gt_root.join(name);
        if !gt_city.is_dir() {
            return Err(Error::Dataset(format!(
                "missing annotation directory for city {}: {}",
                name.to_string_lossy(),
                gt_city.display()
            )));
        }
        for image_path in png_files(&city)? {
            let file = stem(&image_path);
            let Some(prefix) = file.strip_suffix("_leftImg8bit") else {
                continue;
            };
            let label_path = gt_city.join(format!("{prefix}_gtFine_labelIds.png"));
            if !label_path.is_file() {
                return Err(Error::Dataset(format!(
                    "missing label file for {}: expected {}",
                    image_path.display(),
                    label_path.display()
                )));
            }
            let raw = read_mask(&label_path)?;
            let mask = remap_cityscapes_mask(&raw, &table)
                .map_err(|e| Error::Dataset(format!("{}: {e}", label_path.display())))?;
            let sample = Sample {
                id: prefix.to_string(),
                image: read_rgb(&image_path)?,
                mask,
            };
            sample.validate(19, IGNORE_ID)?;
            samples.push(sample);
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// First `floor(N * train_fraction)` items train, the rest validate; order is kept.
pub fn temporal_split<T>(mut samples: Vec<T>, train_fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty collection".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    // The tolerance keeps decimal fractions such as 0.7 from flooring one short.
    let cut = ((samples.len() as f64 * train_fraction) + 1e-9).floor() as usize;
    let val = samples.split_off(cut.min(samples.len()));
    Ok((samples, val))
}

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// Synthetic shapes whose colour predicts their class with probability `colour_correlation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasedShapesConfig {
    /// `(height, width)`.
    pub image_size: (u32, u32),
    pub num_shape_classes: usize,
    /// Inclusive range.
    pub shapes_per_image: (usize, usize),
    pub colour_correlation: f64,
    pub signature_colours: Vec<[u8; 3]>,
    pub background_noise_std: f64,
    /// Inclusive range of the per-image grey background level.
    pub background_level: (u8, u8),
    /// Inclusive range of the shape half-extent in pixels.
    pub shape_radius: (u32, u32),
    pub count: usize,
}

impl Default for BiasedShapesConfig {
    fn default() -> Self {
        BiasedShapesConfig {
            image_size: (64, 64),
            num_shape_classes: 4,
            shapes_per_image: (2, 4),
            colour_correlation: 0.95,
            signature_colours: vec![[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]],
            background_noise_std: 8.0,
            background_level: (64, 192),
            shape_radius: (6, 11),
            count: 1000,
        }
    }
}

impl BiasedShapesConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.colour_correlation) {
            return err(format!(
                "colour_correlation must be in [0, 1], got {}",
                self.colour_correlation
            ));
        }
        if self.count == 0 {
            return err("count must be > 0".into());
        }
        if !(1..=SHAPE_NAMES.len()).contains(&self.num_shape_classes) {
            return err(format!(
                "num_shape_classes must be in 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_shape_classes
            ));
        }
        if self.signature_colours.len() != self.num_shape_classes {
            return err(format!(
                "{} signature colours for {} shape classes",
                self.signature_colours.len(),
                self.num_shape_classes
            ));
        }
        for (i, a) in self.signature_colours.iter().enumerate() {
            if self.signature_colours[..i].contains(a) {
                return err(format!("signature colour {a:?} is used twice"));
            }
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return err(format!("shapes_per_image must satisfy 1 <= min <= max, got ({lo}, {hi})"));
        }
        let (rlo, rhi) = self.shape_radius;
        let (h, w) = self.image_size;
        if rlo < 2 || rlo > rhi || 2 * rhi + 1 > h.min(w) {
            return err(format!(
                "shape_radius ({rlo}, {rhi}) must satisfy 2 <= min <= max and fit a {h}x{w} image"
            ));
        }
        if !(self.background_noise_std >= 0.0) || !self.background_noise_std.is_finite() {
            return err("background_noise_std must be finite and >= 0".into());
        }
        if self.background_level.0 > self.background_level.1 {
            return err("background_level must be an ordered range".into());
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_shape_classes + 1
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("background")
            .chain(SHAPE_NAMES.iter().copied().take(self.num_shape_classes))
            .map(str::to_string)
            .collect()
    }

    pub fn manifest(&self, seed: u64) -> DatasetManifest {
        let class_names = self.class_names();
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            kind: "biased_shapes".into(),
            num_classes: self.num_classes(),
            ignore_id: IGNORE_ID,
            categories: CategoryMap::identity(&class_names),
            class_names,
            count: self.count,
            seed: Some(seed),
            generator: Some(self.clone()),
            corruption: None,
        }
    }
}

/// Shape class index (0-based) occupies pixel offset `(dx, dy)` from its centre.
fn shape_contains(kind: usize, r: i64, dx: i64, dy: i64) -> bool {
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => {
            let s = (r * 4 + 2) / 5;
            dx.abs() <= s && dy.abs() <= s
        }
        2 => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        _ => {
            let t = (r / 3).max(1);
            (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
        }
    }
}

const PLACEMENT_RETRIES: usize = 200;

pub fn generate_biased_shapes(cfg: &BiasedShapesConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.background_noise_std).expect("validated std");
    let (h, w) = cfg.image_size;
    let digits = cfg.count.to_string().len().max(5);
    let mut samples = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let level = rng.random_range(cfg.background_level.0..=cfg.background_level.1) as f64;
        let mut image = RgbImage::new(w, h);
        for p in image.pixels_mut() {
            let mut px = [0u8; 3];
            for v in px.iter_mut() {
                let n = if cfg.background_noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *v = (level + n).round().clamp(0.0, 255.0) as u8;
            }
            *p = Rgb(px);
        }
        let mut mask = GrayImage::new(w, h);
        let n_shapes = rng.random_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
        let mut boxes: Vec<(i64, i64, i64, i64)> = Vec::new();
        for _ in 0..n_shapes {
            let kind = rng.random_range(0..cfg.num_shape_classes);
            let colour = if rng.random_bool(cfg.colour_correlation) {
                cfg.signature_colours[kind]
            } else {
                [rng.random(), rng.random(), rng.random()]
            };
            let mut placed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let r = rng.random_range(cfg.shape_radius.0..=cfg.shape_radius.1) as i64;
                let cx = rng.random_range(r..w as i64 - r);
                let cy = rng.random_range(r..h as i64 - r);
                let bx = (cx - r, cy - r, cx + r, cy + r);
                // One pixel of background between shapes.
                let clear = boxes
                    .iter()
                    .all(|b| bx.2 + 1 < b.0 || b.2 + 1 < bx.0 || bx.3 + 1 < b.1 || b.3 + 1 < bx.1);
                if clear {
                    placed = Some((cx, cy, r, bx));
                    break;
                }
            }
            let Some((cx, cy, r, bx)) = placed else {
                return Err(Error::Dataset(format!(
                    "could not place {n_shapes} non-overlapping shapes in image {index} after \
                     {PLACEMENT_RETRIES} attempts; use fewer or smaller shapes"
                )));
            };
            boxes.push(bx);
            for y in bx.1..=bx.3 {
                for x in bx.0..=bx.2 {
                    if shape_contains(kind, r, x - cx, y - cy) {
                        image.put_pixel(x as u32, y as u32, Rgb(colour));
                        mask.put_pixel(x as u32, y as u32, image::Luma([kind as u8 + 1]));
                    }
                }
            }
        }
        samples.push(Sample {
            id: format!("shapes_{index:0digits$}"),
            image,
            mask,
        });
    }
    Ok(samples)
}
