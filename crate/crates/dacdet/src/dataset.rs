//! On-disk paired dataset.
//!
//! ```text
//! <root>/manifest.json
//! <root>/train/<idx>_hcm.png  <idx>_lcm.png  <idx>_hcm.txt
//! <root>/test/<idx>_lcm.png   <idx>_lcm.txt
//! <root>/debug/<idx>_hcm.png  <idx>_hcm.txt     (clean renders of test scenes)
//! ```
//!
//! Images are 8-bit RGB PNG. Annotation files hold one `class_id cx cy w h`
//! line per box with six decimals. Degraded training images carry no labels.

use std::collections::BTreeSet;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use dacdet_core::boxes::{BBox, Detection, ParasiteClass};
use dacdet_core::image::Image;
use dacdet_core::synth::{synthesize_pair, DegradationParams, GenConfig, Split, CHANNELS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub files: Vec<FileRef>,
    /// Parameters that produced the degraded render (test split only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub count: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: GenConfig,
    pub splits: Vec<SplitManifest>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&SplitManifest> {
        self.splits.iter().find(|s| s.name == name)
    }
}

/// Which images and labels to score against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// Degraded test images with shift-adjusted labels.
    Test,
    /// Clean renders of the test scenes.
    Debug,
    /// Clean training images with their labels.
    TrainHcm,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(EvalSplit::Test),
            "debug" | "test-hcm" => Ok(EvalSplit::Debug),
            "train-hcm" => Ok(EvalSplit::TrainHcm),
            other => Err(Error::Config(format!("unknown split {other:?} (expected test, debug or train-hcm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub index: usize,
    pub x_h: Image,
    pub y_h: Vec<BBox>,
    pub x_l: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub index: usize,
    pub image: Image,
    pub boxes: Vec<BBox>,
}

// ---- annotation text --------------------------------------------------

pub fn format_boxes(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class.id(), b.cx, b.cy, b.w, b.h))
        .collect()
}

pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| {
            let b = &d.bbox;
            format!("{} {:.6} {:.6} {:.6} {:.6} {:.6}\n", b.class.id(), b.cx, b.cy, b.w, b.h, d.confidence)
        })
        .collect()
}

fn parse_fields(record: &str, text: &str, n: usize) -> Result<Vec<(ParasiteClass, Vec<f64>)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |d: String| Error::corrupt(format!("{record} line {}", k + 1), d);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != n {
            return Err(at(format!("expected {n} fields, found {}", fields.len())));
        }
        let class = fields[0]
            .parse::<usize>()
            .ok()
            .and_then(ParasiteClass::from_id)
            .ok_or_else(|| at(format!("bad class id {:?}", fields[0])))?;
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| at(format!("bad number {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(at("non-finite value".into()));
        }
        out.push((class, nums));
    }
    Ok(out)
}

/// Parses `class_id cx cy w h` lines; `record` names the source in errors.
pub fn parse_boxes(record: &str, text: &str) -> Result<Vec<BBox>> {
    parse_fields(record, text, 5)?
        .into_iter()
        .enumerate()
        .map(|(k, (class, v))| {
            let b = BBox::new(class, v[0], v[1], v[2], v[3]);
            // six-decimal rounding may push a corner past the border by < 1e-6
            let [x1, y1, x2, y2] = b.corners();
            let slack = 1e-6;
            if b.w > 0.0 && b.h > 0.0 && x1.min(y1) >= -slack && x2.max(y2) <= 1.0 + slack {
                Ok(b)
            } else {
                Err(Error::corrupt(format!("{record} box {}", k + 1), "box outside the unit square or degenerate"))
            }
        })
        .collect()
}

/// Parses `class_id cx cy w h conf` lines.
pub fn parse_detections(record: &str, text: &str) -> Result<Vec<Detection>> {
    Ok(parse_fields(record, text, 6)?
        .into_iter()
        .map(|(class, v)| Detection { bbox: BBox::new(class, v[0], v[1], v[2], v[3]), confidence: v[4] })
        .collect())
}

// ---- images ---------------------------------------------------------------

pub fn encode_png(img: &Image) -> Vec<u8> {
    assert_eq!(img.channels, CHANNELS, "PNG storage is RGB");
    let (h, w) = (img.height, img.width);
    let planar = img.to_u8();
    let mut rgb = vec![0u8; planar.len()];
    for c in 0..CHANNELS {
        for p in 0..h * w {
            rgb[p * CHANNELS + c] = planar[c * h * w + p];
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(&rgb).expect("in-memory PNG body");
    }
    out
}

pub fn decode_png(record: &str, bytes: &[u8]) -> Result<Image> {
    let bad = |d: String| Error::corrupt(record, d);
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| bad(format!("unreadable PNG: {e}")))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(format!("unreadable PNG: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let rgb = &buf[..info.buffer_size()];
    let mut planar = vec![0u8; rgb.len()];
    for c in 0..CHANNELS {
        for p in 0..h * w {
            planar[c * h * w + p] = rgb[p * CHANNELS + c];
        }
    }
    Image::from_u8(CHANNELS, h, w, &planar).ok_or_else(|| bad("pixel count does not match dimensions".into()))
}

// ---- writing ----------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<FileRef> {
    let path = root.join(rel);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef { path: rel.to_string(), sha256: sha256_hex(bytes) })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn stem(split: &str, index: usize, kind: &str) -> String {
    format!("{split}/{index:04}_{kind}")
}

/// Renders every sample of `cfg` and writes the dataset under `root`.
pub fn generate_dataset(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    create_dir(root)?;
    let mut splits = Vec::new();

    create_dir(&root.join("train"))?;
    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        let s = synthesize_pair(cfg, Split::Train, i)?;
        let base = |k: &str| stem("train", i, k);
        let files = vec![
            write_file(root, &format!("{}.png", base("hcm")), &encode_png(&s.x_h))?,
            write_file(root, &format!("{}.png", base("lcm")), &encode_png(&s.x_l))?,
            write_file(root, &format!("{}.txt", base("hcm")), format_boxes(&s.y_h).as_bytes())?,
        ];
        train.push(SampleEntry { index: i, files, degradation: None });
    }
    splits.push(SplitManifest { name: "train".into(), count: train.len(), samples: train });

    create_dir(&root.join("test"))?;
    if cfg.write_test_hcm {
        create_dir(&root.join("debug"))?;
    }
    let mut test = Vec::with_capacity(cfg.n_test);
    let mut debug = Vec::new();
    for i in 0..cfg.n_test {
        let s = synthesize_pair(cfg, Split::Test, i)?;
        let files = vec![
            write_file(root, &format!("{}.png", stem("test", i, "lcm")), &encode_png(&s.x_l))?,
            write_file(root, &format!("{}.txt", stem("test", i, "lcm")), format_boxes(&s.y_l).as_bytes())?,
        ];
        test.push(SampleEntry { index: i, files, degradation: Some(s.degradation) });
        if cfg.write_test_hcm {
            let files = vec![
                write_file(root, &format!("{}.png", stem("debug", i, "hcm")), &encode_png(&s.x_h))?,
                write_file(root, &format!("{}.txt", stem("debug", i, "hcm")), format_boxes(&s.y_h).as_bytes())?,
            ];
            debug.push(SampleEntry { index: i, files, degradation: None });
        }
    }
    splits.push(SplitManifest { name: "test".into(), count: test.len(), samples: test });
    if cfg.write_test_hcm {
        splits.push(SplitManifest { name: "debug".into(), count: debug.len(), samples: debug });
    }

    let manifest = DatasetManifest { format_version: DATASET_FORMAT_VERSION, generator: cfg.clone(), splits };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

// ---- reading ----------------------------------------------------------------

/// Reads the manifest and checks its version and per-split counts.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::corrupt(MANIFEST_FILE, e))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch { what: "dataset", found, supported: DATASET_FORMAT_VERSION });
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| Error::corrupt(MANIFEST_FILE, e))?;
    for s in &manifest.splits {
        if s.count != s.samples.len() {
            return Err(Error::ManifestIntegrity(format!(
                "split {} declares {} samples but lists {}",
                s.name,
                s.count,
                s.samples.len()
            )));
        }
    }
    Ok(manifest)
}

/// Cross-checks a split against the directory: every listed file must exist
/// and no unlisted sample files may sit beside them.
fn check_split_files(root: &Path, split: &SplitManifest) -> Result<()> {
    let listed: BTreeSet<&str> = split.samples.iter().flat_map(|s| s.files.iter().map(|f| f.path.as_str())).collect();
    for rel in &listed {
        let p = root.join(rel);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
    }
    let dir = root.join(&split.name);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut extra = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let rel = format!("{}/{name}", split.name);
        let sample_file = name.ends_with(".png") || name.ends_with(".txt");
        if sample_file && !listed.contains(rel.as_str()) {
            extra.push(rel);
        }
    }
    if !extra.is_empty() {
        extra.sort();
        return Err(Error::ManifestIntegrity(format!(
            "split {} has {} sample files on disk that the manifest does not list: {}",
            split.name,
            extra.len(),
            extra.join(", ")
        )));
    }
    Ok(())
}

struct SampleFiles<'a> {
    root: &'a Path,
    entry: &'a SampleEntry,
    split: &'a str,
}

impl SampleFiles<'_> {
    fn name(&self) -> String {
        format!("{} sample {}", self.split, self.entry.index)
    }

    fn bytes(&self, suffix: &str) -> Result<(String, Vec<u8>)> {
        let f = self
            .entry
            .files
            .iter()
            .find(|f| f.path.ends_with(suffix))
            .ok_or_else(|| Error::ManifestIntegrity(format!("{} lists no *{suffix} file", self.name())))?;
        let path = self.root.join(&f.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::corrupt(format!("{} ({})", self.name(), f.path), "checksum mismatch"));
        }
        Ok((format!("{} ({})", self.name(), f.path), bytes))
    }

    fn image(&self, suffix: &str, size: usize) -> Result<Image> {
        let (record, bytes) = self.bytes(suffix)?;
        let img = decode_png(&record, &bytes)?;
        if img.height != size || img.width != size {
            return Err(Error::corrupt(record, format!("expected {size}x{size}, found {}x{}", img.width, img.height)));
        }
        Ok(img)
    }

    fn boxes(&self, suffix: &str) -> Result<Vec<BBox>> {
        let (record, bytes) = self.bytes(suffix)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::corrupt(record.clone(), "not UTF-8"))?;
        parse_boxes(&record, &text)
    }
}

fn split_of<'a>(m: &'a DatasetManifest, name: &str) -> Result<&'a SplitManifest> {
    m.split(name).ok_or_else(|| Error::ManifestIntegrity(format!("manifest has no {name} split")))
}

pub fn load_train(root: &Path) -> Result<Vec<TrainRecord>> {
    let m = load_manifest(root)?;
    let split = split_of(&m, "train")?;
    check_split_files(root, split)?;
    let size = m.generator.image_size;
    split
        .samples
        .iter()
        .map(|entry| {
            let f = SampleFiles { root, entry, split: "train" };
            Ok(TrainRecord {
                index: entry.index,
                x_h: f.image("_hcm.png", size)?,
                y_h: f.boxes("_hcm.txt")?,
                x_l: f.image("_lcm.png", size)?,
            })
        })
        .collect()
}

pub fn load_eval(root: &Path, which: EvalSplit) -> Result<Vec<EvalRecord>> {
    if which == EvalSplit::TrainHcm {
        return Ok(load_train(root)?
            .into_iter()
            .map(|r| EvalRecord { index: r.index, image: r.x_h, boxes: r.y_h })
            .collect());
    }
    let m = load_manifest(root)?;
    let (name, kind) = match which {
        EvalSplit::Test => ("test", "lcm"),
        _ => ("debug", "hcm"),
    };
    let split = split_of(&m, name)?;
    check_split_files(root, split)?;
    let size = m.generator.image_size;
    split
        .samples
        .iter()
        .map(|entry| {
            let f = SampleFiles { root, entry, split: name };
            Ok(EvalRecord {
                index: entry.index,
                image: f.image(&format!("_{kind}.png"), size)?,
                boxes: f.boxes(&format!("_{kind}.txt"))?,
            })
        })
        .collect()
}
