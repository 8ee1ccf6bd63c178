//! Dataset manifests, image/label loading, the synthetic street-scene set and
//! segmentation metrics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Image, LabelMap, IGNORE_LABEL, NUM_CLASSES};

/// Short names of the 19 categories in trainId order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Maps a raw Cityscapes label id to its trainId (255 when unused).
pub fn cityscapes_train_id(raw: u8) -> u8 {
    match raw {
        7 => 0,
        8 => 1,
        11 => 2,
        12 => 3,
        13 => 4,
        17 => 5,
        19 => 6,
        20 => 7,
        21 => 8,
        22 => 9,
        23 => 10,
        24 => 11,
        25 => 12,
        26 => 13,
        27 => 14,
        28 => 15,
        31 => 16,
        32 => 17,
        33 => 18,
        _ => IGNORE_LABEL,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    TargetDay,
    TargetNight,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::TargetDay => "target-day",
            Role::TargetNight => "target-night",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub pair_key: Option<String>,
}

/// Parsed list of samples. Relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub role: Role,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses tab-separated `image, label-or-dash, key-or-dash` lines.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, root: &Path, split: &str, role: Role) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.is_empty() || cols.len() > 3 || cols[0].is_empty() {
                return Err(DialError::Data(format!(
                    "manifest line {}: expected 1 to 3 tab-separated fields",
                    lineno + 1
                )));
            }
            let opt = |i: usize| cols.get(i).filter(|s| !s.is_empty() && **s != "-").map(|s| s.to_string());
            entries.push(ManifestEntry {
                image: PathBuf::from(cols[0]),
                label: opt(1).map(PathBuf::from),
                pair_key: opt(2),
            });
        }
        let m = DatasetManifest {
            root: root.to_path_buf(),
            split: split.to_string(),
            role,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest file; entries resolve relative to its directory.
    pub fn load(path: &Path, role: Role) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DialError::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let split = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&text, &root, &split, role)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let label = e.label.as_ref().map(|p| p.display().to_string());
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                e.image.display(),
                label.as_deref().unwrap_or("-"),
                e.pair_key.as_deref().unwrap_or("-")
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(DialError::Data(format!("{} manifest '{}' has no entries", self.role, self.split)));
        }
        if self.role == Role::Source {
            if let Some(e) = self.entries.iter().find(|e| e.label.is_none()) {
                return Err(DialError::Data(format!(
                    "source entry {} has no label",
                    e.image.display()
                )));
            }
        }
        Ok(())
    }

    /// Checks that every listed label file exists.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.image).chain(e.label.as_ref()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(DialError::Data(format!("missing file {}", full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_sample<T: Scalar>(&self, i: usize) -> Result<(Image<T>, Option<LabelMap>)> {
        let e = &self.entries[i];
        let resolved = ManifestEntry {
            image: self.resolve(&e.image),
            label: e.label.as_ref().map(|p| self.resolve(p)),
            pair_key: e.pair_key.clone(),
        };
        load_sample(&resolved)
    }
}

/// Index pairs `(day, night)` of target entries sharing a key, in day order.
pub fn pair_by_key(day: &DatasetManifest, night: &DatasetManifest) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (i, d) in day.entries.iter().enumerate() {
        let key = d.pair_key.as_ref().ok_or_else(|| {
            DialError::Config(format!("target-day entry {} has no pairing key", d.image.display()))
        })?;
        let j = night
            .entries
            .iter()
            .position(|n| n.pair_key.as_ref() == Some(key))
            .ok_or_else(|| DialError::Config(format!("no target-night entry with key '{key}'")))?;
        pairs.push((i, j));
    }
    if pairs.is_empty() {
        return Err(DialError::Config("no day/night pairs".into()));
    }
    Ok(pairs)
}

fn image_error(path: &Path, e: image::ImageError) -> DialError {
    match e {
        image::ImageError::IoError(io) => DialError::io(path, io),
        other => DialError::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

pub fn read_rgb<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_rgb8(h as usize, w as usize, img.as_raw())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    if img.color().channel_count() != 1 {
        return Err(DialError::Image {
            path: path.to_path_buf(),
            message: "labels must be single-channel 8-bit".into(),
        });
    }
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    LabelMap::new(h as usize, w as usize, g.into_raw()).map_err(|e| DialError::Data(format!("{}: {e}", path.display())))
}

/// Loads an 8-bit RGB image scaled to [0, 1] and its optional trainId label map.
pub fn load_sample<T: Scalar>(entry: &ManifestEntry) -> Result<(Image<T>, Option<LabelMap>)> {
    let img = read_rgb(&entry.image)?;
    let labels = match &entry.label {
        Some(p) => {
            let l = read_labels(p)?;
            if (l.height(), l.width()) != (img.height(), img.width()) {
                return Err(DialError::Data(format!(
                    "label {} is {}x{} but image is {}x{}",
                    p.display(),
                    l.height(),
                    l.width(),
                    img.height(),
                    img.width()
                )));
            }
            if l.valid_pixels() == 0 {
                log::warn!("{} has no valid pixels", p.display());
            }
            Some(l)
        }
        None => None,
    };
    Ok((img, labels))
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| DialError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DialError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| DialError::io(path, e))?;
    tmp.persist(path).map_err(|e| DialError::io(path, e.error))?;
    Ok(())
}

fn encode_png(write: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    write(&mut buf).map_err(|e| image_error(path, e))?;
    write_atomic(path, buf.get_ref())
}

pub fn write_rgb_png<T: Scalar>(img: &Image<T>, path: &Path) -> Result<()> {
    let rgb = RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8()).expect("buffer size");
    encode_png(|c| rgb.write_to(c, image::ImageFormat::Png), path)
}

pub fn write_label_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let g = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, labels.data().to_vec())
        .expect("buffer size");
    encode_png(|c| g.write_to(c, image::ImageFormat::Png), path)
}

/// Side length of synthetic scenes.
pub const SYNTH_SIZE: usize = 64;

/// Base colors of the synthetic categories. Several pairs differ mainly in
/// brightness (road/sidewalk, building/wall, vegetation/terrain, car/truck),
/// so telling them apart requires knowing the scene illumination.
const SYNTH_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.30, 0.30, 0.32],
    [0.58, 0.57, 0.58],
    [0.42, 0.36, 0.33],
    [0.70, 0.61, 0.56],
    [0.55, 0.48, 0.30],
    [0.22, 0.22, 0.22],
    [0.90, 0.70, 0.10],
    [0.85, 0.80, 0.25],
    [0.20, 0.42, 0.15],
    [0.38, 0.70, 0.30],
    [0.55, 0.70, 0.90],
    [0.70, 0.20, 0.25],
    [0.90, 0.45, 0.30],
    [0.15, 0.20, 0.50],
    [0.28, 0.38, 0.88],
    [0.20, 0.60, 0.60],
    [0.10, 0.33, 0.33],
    [0.45, 0.10, 0.55],
    [0.70, 0.30, 0.85],
];

/// One rendered scene: a day image, its darkened night counterpart and the
/// shared labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair<T> {
    pub day: Image<T>,
    pub night: Image<T>,
    pub labels: LabelMap,
    /// Exposure and gamma used for the night rendering.
    pub night_exposure: f64,
    pub night_gamma: f64,
}

struct Canvas {
    labels: Vec<u8>,
    color: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, y0: i64, y1: i64, x0: i64, x1: i64, class: u8, rgb: [f64; 3]) {
        let n = SYNTH_SIZE as i64;
        for y in y0.max(0)..y1.min(n) {
            for x in x0.max(0)..x1.min(n) {
                let i = (y * n + x) as usize;
                self.labels[i] = class;
                self.color[i] = rgb;
            }
        }
    }
}

fn jittered(rng: &mut ChaCha8Rng, class: u8) -> [f64; 3] {
    let base = SYNTH_COLORS[class as usize];
    let k = rng.random_range(0.93..1.07);
    base.map(|c| c * k + rng.random_range(-0.025..0.025))
}

fn render_layout(rng: &mut ChaCha8Rng) -> Canvas {
    let n = SYNTH_SIZE as i64;
    let mut cv = Canvas {
        labels: vec![10; SYNTH_SIZE * SYNTH_SIZE],
        color: vec![SYNTH_COLORS[10]; SYNTH_SIZE * SYNTH_SIZE],
    };
    let horizon = rng.random_range(26..36i64);
    let sky = jittered(rng, 10);
    cv.paint(0, horizon, 0, n, 10, sky);

    let mut x = 0;
    while x < n {
        let w = rng.random_range(8..22i64);
        let class = [2u8, 2, 8, 3, 4, 2, 8][rng.random_range(0..7)];
        let top = match class {
            2 => rng.random_range(2..horizon - 8),
            8 => rng.random_range(horizon - 16..horizon - 5),
            3 => rng.random_range(horizon - 10..horizon - 4),
            _ => rng.random_range(horizon - 6..horizon - 2),
        };
        let rgb = jittered(rng, class);
        cv.paint(top, horizon, x, x + w, class, rgb);
        x += w;
    }

    let center = 32 + rng.random_range(-8..=8i64);
    let road = jittered(rng, 0);
    let walk = jittered(rng, 1);
    let side_l = if rng.random_bool(0.5) { 9u8 } else { 8 };
    let side_r = if rng.random_bool(0.5) { 9u8 } else { 8 };
    let (sl, sr) = (jittered(rng, side_l), jittered(rng, side_r));
    for y in horizon..n {
        let t = (y - horizon) as f64 / (n - horizon) as f64;
        let half = (5.0 + t * 26.0) as i64;
        let walk_w = (2.0 + t * 9.0) as i64;
        cv.paint(y, y + 1, 0, center - half - walk_w, side_l, sl);
        cv.paint(y, y + 1, center + half + walk_w, n, side_r, sr);
        cv.paint(y, y + 1, center - half - walk_w, center - half, 1, walk);
        cv.paint(y, y + 1, center + half, center + half + walk_w, 1, walk);
        cv.paint(y, y + 1, center - half, center + half, 0, road);
    }

    for _ in 0..rng.random_range(1..3) {
        let px = rng.random_range(2..n - 3);
        let top = horizon - rng.random_range(10..20i64);
        let rgb = jittered(rng, 5);
        cv.paint(top, horizon + rng.random_range(2..6), px, px + 2, 5, rgb);
        let (class, h) = if rng.random_bool(0.5) { (7u8, 3) } else { (6u8, 4) };
        let rgb = jittered(rng, class);
        cv.paint(top - h, top, px - 1, px + 3, class, rgb);
    }

    for _ in 0..rng.random_range(1..4) {
        let y1 = rng.random_range(horizon + 6..n + 2);
        let t = (y1 - horizon) as f64 / (n - horizon) as f64;
        let class = [13u8, 13, 13, 14, 15, 16][rng.random_range(0..6)];
        let scale = if class == 13 { 1.0 } else { 1.5 };
        let w = ((5.0 + t * 12.0) * scale) as i64;
        let h = ((3.0 + t * 7.0) * scale) as i64;
        let cx = center + rng.random_range(-12..=12i64);
        let rgb = jittered(rng, class);
        cv.paint(y1 - h, y1, cx - w / 2, cx + w / 2, class, rgb);
    }

    for _ in 0..rng.random_range(0..3) {
        let y1 = rng.random_range(horizon + 4..n);
        let t = (y1 - horizon) as f64 / (n - horizon) as f64;
        let h = (4.0 + t * 8.0) as i64;
        let x0 = if rng.random_bool(0.5) {
            center - (5.0 + t * 26.0) as i64 - 2
        } else {
            center + (5.0 + t * 26.0) as i64
        };
        if rng.random_bool(0.7) {
            let rgb = jittered(rng, 11);
            cv.paint(y1 - h, y1, x0, x0 + 2, 11, rgb);
        } else {
            let rgb = jittered(rng, 12);
            cv.paint(y1 - h, y1 - h / 2, x0, x0 + 2, 12, rgb);
            let cycle = if rng.random_bool(0.5) { 17u8 } else { 18 };
            let rgb = jittered(rng, cycle);
            cv.paint(y1 - h / 2, y1, x0 - 1, x0 + 3, cycle, rgb);
        }
    }
    cv
}

fn quantize<T: Scalar>(rgb: &[[f64; 3]]) -> Image<T> {
    let n = SYNTH_SIZE * SYNTH_SIZE;
    let mut bytes = vec![0u8; 3 * n];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            bytes[3 * i + c] = (px[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Image::from_rgb8(SYNTH_SIZE, SYNTH_SIZE, &bytes).expect("synthetic image")
}

/// Renders scene `index` of the set identified by `seed`.
pub fn synth_scene<T: Scalar>(seed: u64, index: usize) -> SynthPair<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let cv = render_layout(&mut rng);
    let n = SYNTH_SIZE;
    let illum: f64 = rng.random_range(0.55..1.15);
    let shade_dir = rng.random_range(-0.1..0.1);
    let day: Vec<[f64; 3]> = cv
        .color
        .iter()
        .enumerate()
        .map(|(i, rgb)| {
            let x = (i % n) as f64 / n as f64 - 0.5;
            let k = illum * (1.0 + shade_dir * x);
            rgb.map(|c| c * k + rng.random_range(-0.03..0.03))
        })
        .collect();

    let exposure: f64 = rng.random_range(-2.3..-0.7);
    let gamma: f64 = rng.random_range(1.2..1.7);
    let mut night: Vec<[f64; 3]> = day
        .iter()
        .map(|rgb| rgb.map(|c| (c.clamp(0.0, 1.0) * exposure.exp2()).powf(gamma)))
        .collect();
    for _ in 0..rng.random_range(1..4) {
        let (cy, cx) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let amp = rng.random_range(0.3..0.7);
        let sigma: f64 = rng.random_range(1.5..4.0);
        for (i, px) in night.iter_mut().enumerate() {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            px[0] += v;
            px[1] += 0.85 * v;
            px[2] += 0.5 * v;
        }
    }
    for px in night.iter_mut() {
        for c in px.iter_mut() {
            *c += rng.random_range(-0.01..0.01);
        }
    }
    SynthPair {
        day: quantize(&day),
        night: quantize(&night),
        labels: LabelMap::new(n, n, cv.labels).expect("synthetic labels"),
        night_exposure: exposure,
        night_gamma: gamma,
    }
}

pub fn synth_pairs<T: Scalar>(n: usize, seed: u64) -> Result<Vec<SynthPair<T>>> {
    if n == 0 {
        return Err(DialError::invalid("synthetic set needs at least one scene"));
    }
    Ok((0..n).map(|i| synth_scene(seed, i)).collect())
}

/// Manifests of a synthetic set written to disk.
#[derive(Clone, Debug)]
pub struct SynthManifests {
    /// Day and night images with labels.
    pub mixed: DatasetManifest,
    pub day: DatasetManifest,
    pub night: DatasetManifest,
}

/// Writes `n` day/night pairs under `dir` with manifests `mixed.tsv`,
/// `day.tsv` and `night.tsv`.
pub fn synth_dataset(n: usize, seed: u64, dir: &Path) -> Result<SynthManifests> {
    let pairs = synth_pairs::<f32>(n, seed)?;
    let (mut mixed, mut day, mut night) = (Vec::new(), Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        let key = format!("{i:05}");
        let d = PathBuf::from(format!("day/{key}.png"));
        let nt = PathBuf::from(format!("night/{key}.png"));
        let l = PathBuf::from(format!("labels/{key}.png"));
        write_rgb_png(&p.day, &dir.join(&d))?;
        write_rgb_png(&p.night, &dir.join(&nt))?;
        write_label_png(&p.labels, &dir.join(&l))?;
        let entry = |img: &PathBuf| ManifestEntry {
            image: img.clone(),
            label: Some(l.clone()),
            pair_key: Some(key.clone()),
        };
        day.push(entry(&d));
        night.push(entry(&nt));
        mixed.push(entry(&d));
        mixed.push(entry(&nt));
    }
    let make = |split: &str, role, entries| DatasetManifest {
        root: dir.to_path_buf(),
        split: split.to_string(),
        role,
        entries,
    };
    let out = SynthManifests {
        mixed: make("mixed", Role::Source, mixed),
        day: make("day", Role::TargetDay, day),
        night: make("night", Role::TargetNight, night),
    };
    out.mixed.save(&dir.join("mixed.tsv"))?;
    out.day.save(&dir.join("day.tsv"))?;
    out.night.save(&dir.join("night.tsv"))?;
    Ok(out)
}

/// Confusion counts and per-category IoU.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `confusion[gt][pred]` over non-ignored pixels.
    pub confusion: Vec<Vec<u64>>,
    /// `None` for categories absent from both prediction and ground truth.
    pub iou: Vec<Option<f64>>,
    pub mean: f64,
    pub pixel_accuracy: f64,
}

pub fn compute_miou(preds: &[&LabelMap], gts: &[&LabelMap], k: usize) -> Result<MiouReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(DialError::invalid(format!(
            "mIoU needs matching non-empty inputs ({} predictions, {} ground truths)",
            preds.len(),
            gts.len()
        )));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (p, g) in preds.iter().zip(gts) {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(DialError::invalid("prediction and ground-truth shapes differ"));
        }
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            if gv == IGNORE_LABEL || pv == IGNORE_LABEL {
                continue;
            }
            if gv as usize >= k || pv as usize >= k {
                return Err(DialError::invalid(format!("label {} outside {k} categories", gv.max(pv))));
            }
            confusion[gv as usize][pv as usize] += 1;
        }
    }
    let mut iou = Vec::with_capacity(k);
    for m in 0..k {
        let tp = confusion[m][m];
        let fn_: u64 = confusion[m].iter().sum::<u64>() - tp;
        let fp: u64 = (0..k).map(|g| confusion[g][m]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        iou.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..k).map(|m| confusion[m][m]).sum();
    Ok(MiouReport {
        confusion,
        iou,
        mean,
        pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}

/// Accuracy over labeled pixels within `band` pixels (Chebyshev distance) of a
/// ground-truth category boundary.
pub fn boundary_accuracy(preds: &[&LabelMap], gts: &[&LabelMap], band: usize) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(DialError::invalid("boundary accuracy needs matching non-empty inputs"));
    }
    let (mut hit, mut total) = (0u64, 0u64);
    for (p, g) in preds.iter().zip(gts) {
        let (h, w) = (g.height(), g.width());
        if (p.height(), p.width()) != (h, w) {
            return Err(DialError::invalid("prediction and ground-truth shapes differ"));
        }
        for y in 0..h {
            for x in 0..w {
                let v = g.get(y, x);
                if v == IGNORE_LABEL {
                    continue;
                }
                let near = (y.saturating_sub(band)..=(y + band).min(h - 1)).any(|yy| {
                    (x.saturating_sub(band)..=(x + band).min(w - 1)).any(|xx| {
                        let u = g.get(yy, xx);
                        u != v && u != IGNORE_LABEL
                    })
                });
                if near {
                    total += 1;
                    hit += u64::from(p.get(y, x) == v);
                }
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}
