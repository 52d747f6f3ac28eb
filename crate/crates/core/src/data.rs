//! Synthetic multi-label shapes dataset.
//!
//! Each image holds 1–3 non-overlapping shapes (disk, square, triangle,
//! ring, cross) with random colours, sizes and rotations on a textured
//! background. With probability `context_bias` the background carries a
//! texture tied to one of the classes present, so background pixels become
//! spurious evidence for that class.
//!
//! On disk:
//!
//! ```text
//! images/<id>.ppm   binary P6, 8-bit RGB
//! masks/<id>.pgm    binary P5, 0 = background, k = class index + 1
//! labels.csv        id,<class names...>   (0/1 per class)
//! boxes.csv         id,class,row0,col0,row1,col1   (class index, half-open)
//! meta.json         the DatasetSpec
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{BBox, SegMask};
use crate::rng;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["disk", "square", "triangle", "ring", "cross"];
const PLACEMENT_TRIES: usize = 64;
const GAP: usize = 4;
const MANIFEST: &str = "manifest.json";
/// Object hue is `(class + U(-j, j)) / classes`, so neighbouring classes
/// share part of the colour wheel.
const HUE_JITTER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_images: usize,
    pub classes: usize,
    pub size: usize,
    pub objects: (usize, usize),
    pub context_bias: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_images: 200,
            classes: 5,
            size: 336,
            objects: (1, 3),
            context_bias: 0.7,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(text).map_err(|e| {
            Error::Validation(format!("dataset spec line {} column {}: {e}", e.line(), e.column()))
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(2..=CLASS_NAMES.len()).contains(&self.classes) {
            return bad(format!("classes must be in 2..={}, got {}", CLASS_NAMES.len(), self.classes));
        }
        if self.size == 0 || self.size % 16 != 0 {
            return bad(format!("size {} is not a positive multiple of 16", self.size));
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return bad(format!("objects range {:?} is empty or allows zero objects", self.objects));
        }
        if !(0.0..=1.0).contains(&self.context_bias) {
            return bad(format!("context_bias {} outside [0, 1]", self.context_bias));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub id: String,
    /// `3×S×S`, values are multiples of 1/255.
    pub image: Tensor,
    pub mask: SegMask,
    pub labels: Vec<u8>,
    pub boxes: Vec<BBox>,
}

impl ToySample {
    pub fn present(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == 1).collect()
    }

    pub fn label_row(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<ToySample>,
}

impl Dataset {
    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Whether the pixel centre `(dy, dx)` relative to the shape centre lies
/// inside a shape of class `class`, radius `r`, rotation `theta`. Every shape
/// fits in the radius-`r` circle.
fn inside(class: usize, dy: f64, dx: f64, r: f64, theta: f64) -> bool {
    let (s, c) = theta.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    let d = (dy * dy + dx * dx).sqrt();
    match class {
        0 => d <= r,
        1 => u.abs() <= 0.7 * r && v.abs() <= 0.7 * r,
        2 => {
            // equilateral triangle inscribed in the radius-r circle, apex up
            let half = r * 3f64.sqrt() / 2.0;
            v >= -r && v <= r / 2.0 && u.abs() <= (v + r) / (1.5 * r) * half
        }
        3 => d <= r && d >= 0.55 * r,
        _ => (u.abs() <= 0.95 * r && v.abs() <= 0.3 * r) || (v.abs() <= 0.95 * r && u.abs() <= 0.3 * r),
    }
}

/// Background value at `(y, x)` for one channel.
fn texture(kind: Option<usize>, y: f64, x: f64, phase: f64) -> f64 {
    match kind {
        None => 0.5 * ((x / 37.0 + phase).sin() * (y / 53.0 - phase).cos() + 1.0),
        Some(0) => 0.5 * ((2.0 * PI * y / 10.0 + phase).sin() + 1.0),
        Some(1) => 0.5 * ((2.0 * PI * x / 10.0 + phase).sin() + 1.0),
        Some(2) => {
            let cell = ((y / 12.0).floor() + (x / 12.0).floor()) as i64;
            if cell.rem_euclid(2) == 0 { 1.0 } else { 0.0 }
        }
        Some(3) => 0.5 * ((2.0 * PI * (x + y) / 14.0 + phase).sin() + 1.0),
        Some(_) => {
            let (fy, fx) = ((y / 12.0).fract() - 0.5, (x / 12.0).fract() - 0.5);
            if fy * fy + fx * fx < 0.09 { 1.0 } else { 0.0 }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Sample `index` of the dataset; depends only on `(spec, index)`.
pub fn generate_one(spec: &DatasetSpec, index: usize) -> ToySample {
    let mut rng = rng::stream(spec.seed, "data", index as u64);
    let s = spec.size;
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut placed: Vec<(usize, f64, f64, f64, f64, [f64; 3])> = Vec::new();
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(0..spec.classes);
        let hue = (class as f64 + rng.random_range(-HUE_JITTER..HUE_JITTER)) / spec.classes as f64;
        let colour = hsv(hue.rem_euclid(1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(s as f64 / 10.0..s as f64 / 5.0);
            let theta = rng.random_range(0.0..PI);
            let cy = rng.random_range(r + 1.0..s as f64 - r - 1.0);
            let cx = rng.random_range(r + 1.0..s as f64 - r - 1.0);
            let rect = (
                (cy - r) as usize,
                (cx - r) as usize,
                (cy + r).ceil() as usize + 1,
                (cx + r).ceil() as usize + 1,
            );
            let clear = rects.iter().all(|o| {
                rect.2 + GAP <= o.0 || o.2 + GAP <= rect.0 || rect.3 + GAP <= o.1 || o.3 + GAP <= rect.1
            });
            if clear {
                rects.push(rect);
                placed.push((class, cy, cx, r, theta, colour));
                break;
            }
        }
    }
    let present: Vec<usize> = {
        let mut p: Vec<usize> = placed.iter().map(|o| o.0).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    let bg_kind = if rng.random_bool(spec.context_bias) {
        Some(present[rng.random_range(0..present.len())])
    } else {
        None
    };
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let amp = rng.random_range(0.1..0.2);
    let phase = rng.random_range(0.0..2.0 * PI);

    let mut image = vec![0.0; 3 * s * s];
    let mut labels = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let t = texture(bg_kind, y as f64, x as f64, phase) - 0.5;
            for ch in 0..3 {
                image[ch * s * s + y * s + x] = base[ch] + amp * t;
            }
        }
    }
    let mut boxes = Vec::new();
    for (k, &(class, cy, cx, r, theta, colour)) in placed.iter().enumerate() {
        let (r0, c0, r1, c1) = rects[k];
        let mut bounds = (usize::MAX, usize::MAX, 0, 0);
        for y in r0..r1.min(s) {
            for x in c0..c1.min(s) {
                if inside(class, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r, theta) {
                    labels[y * s + x] = class as u8 + 1;
                    for ch in 0..3 {
                        image[ch * s * s + y * s + x] = colour[ch];
                    }
                    bounds = (bounds.0.min(y), bounds.1.min(x), bounds.2.max(y + 1), bounds.3.max(x + 1));
                }
            }
        }
        if bounds.0 < bounds.2 {
            boxes.push(BBox::new(bounds.0, bounds.1, bounds.2, bounds.3, class).expect("non-empty"));
        }
    }
    let image = image.into_iter().map(quantize).collect();
    let mut label_row = vec![0u8; spec.classes];
    for &v in &labels {
        if v > 0 {
            label_row[v as usize - 1] = 1;
        }
    }
    ToySample {
        id: sample_id(index),
        image: Tensor::new(vec![3, s, s], image).expect("consistent extents"),
        mask: SegMask::new(s, s, labels).expect("consistent extents"),
        labels: label_row,
        boxes,
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples: (0..spec.num_images).map(|i| generate_one(spec, i)).collect(),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("encode_ppm", format!("expected 3×H×W, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        out.extend((0..3).map(|c| to_u8(d[c * h * w + i])));
    }
    Ok(out)
}

pub fn encode_pgm(mask: &SegMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend_from_slice(&mask.labels);
    out
}

/// Header fields and payload offset of a binary PNM file.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let fail = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fail(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, format!("expected header field {}", ["width", "height", "maxval"][k])))?;
    }
    if fields[2] != 255 {
        return Err(fail(pos, format!("maxval {} is not 255", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected whitespace after header".into()));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (w, h, payload) = parse_pnm(bytes, b"P6", path)?;
    if payload.len() != 3 * w * h {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: (bytes.len() - payload.len() + payload.len().min(3 * w * h)) as u64, // end of the valid payload
            msg: format!("expected {} pixel bytes, found {}", 3 * w * h, payload.len()),
        });
    }
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<SegMask> {
    let (w, h, payload) = parse_pnm(bytes, b"P5", path)?;
    if payload.len() != w * h {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: (bytes.len() - payload.len() + payload.len().min(w * h)) as u64, // end of the valid payload
            msg: format!("expected {} pixel bytes, found {}", w * h, payload.len()),
        });
    }
    SegMask::new(h, w, payload.to_vec())
}

/// Writes the dataset under `dir`, creating it if needed.
pub fn save(data: &Dataset, dir: &Path) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    mkdir(&images)?;
    mkdir(&masks)?;
    let names = &CLASS_NAMES[..data.spec.classes];
    let labels_path = dir.join("labels.csv");
    let boxes_path = dir.join("boxes.csv");
    let mut labels = csv::Writer::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    let mut boxes = csv::Writer::from_path(&boxes_path).map_err(|e| csv_err(&boxes_path, e))?;
    labels
        .write_record(std::iter::once("id").chain(names.iter().copied()))
        .map_err(|e| csv_err(&labels_path, e))?;
    boxes
        .write_record(["id", "class", "row0", "col0", "row1", "col1"])
        .map_err(|e| csv_err(&boxes_path, e))?;
    for s in &data.samples {
        write(&images.join(format!("{}.ppm", s.id)), &encode_ppm(&s.image)?)?;
        write(&masks.join(format!("{}.pgm", s.id)), &encode_pgm(&s.mask))?;
        let row: Vec<String> = std::iter::once(s.id.clone()).chain(s.labels.iter().map(u8::to_string)).collect();
        labels.write_record(&row).map_err(|e| csv_err(&labels_path, e))?;
        for b in &s.boxes {
            boxes
                .write_record([s.id.clone(), b.class.to_string(), b.row0.to_string(), b.col0.to_string(), b.row1.to_string(), b.col1.to_string()])
                .map_err(|e| csv_err(&boxes_path, e))?;
        }
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    boxes.flush().map_err(|e| Error::io(&boxes_path, e))?;
    let meta = serde_json::to_vec_pretty(&data.spec).expect("spec serializes");
    write(&dir.join("meta.json"), &meta)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn csv_rows(path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let bytes = read(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(&bytes[..]);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: e.position().map_or(0, |p| p.byte()),
            msg: e.to_string(),
        })?;
        let offset = rec.position().map_or(0, |p| p.byte());
        rows.push((offset, rec));
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, offset: u64, path: &Path) -> Result<T> {
    rec.get(i).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: format!("bad or missing field {i}"),
    })
}

/// Reads a dataset written by [`save`] and validates its consistency.
pub fn load(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta = read(&meta_path)?;
    let spec: DatasetSpec = serde_json::from_slice(&meta).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        offset: byte_offset(&meta, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    spec.validate()?;
    let c = spec.classes;

    let labels_path = dir.join("labels.csv");
    let mut samples = Vec::new();
    for (offset, rec) in csv_rows(&labels_path)? {
        if rec.len() != c + 1 {
            return Err(Error::Parse {
                path: labels_path.clone(),
                offset,
                msg: format!("expected {} columns, found {}", c + 1, rec.len()),
            });
        }
        let id = rec[0].to_string();
        let labels = (1..=c)
            .map(|i| field::<u8>(&rec, i, offset, &labels_path))
            .collect::<Result<Vec<u8>>>()?;
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::Validation(format!("{}: labels of `{id}` are not 0/1", labels_path.display())));
        }
        let img_path = dir.join("images").join(format!("{id}.ppm"));
        let image = decode_ppm(&read(&img_path)?, &img_path)?;
        let mask_path = dir.join("masks").join(format!("{id}.pgm"));
        let mask = decode_pgm(&read(&mask_path)?, &mask_path)?;
        mask.validate(c)
            .map_err(|e| Error::Validation(format!("{}: {e}", mask_path.display())))?;
        samples.push(ToySample {
            id,
            image,
            mask,
            labels,
            boxes: Vec::new(),
        });
    }

    let boxes_path = dir.join("boxes.csv");
    for (offset, rec) in csv_rows(&boxes_path)? {
        let id = rec.get(0).unwrap_or_default();
        let sample = samples.iter_mut().find(|s| s.id == id).ok_or_else(|| Error::Parse {
            path: boxes_path.clone(),
            offset,
            msg: format!("unknown id `{id}`"),
        })?;
        let f = |i| field::<usize>(&rec, i, offset, &boxes_path);
        let b = BBox::new(f(2)?, f(3)?, f(4)?, f(5)?, f(1)?)?;
        if b.class >= c {
            return Err(Error::Validation(format!("{}: class {} out of range", boxes_path.display(), b.class)));
        }
        sample.boxes.push(b);
    }

    for s in &samples {
        validate_sample(s, c)?;
    }
    Ok(Dataset { spec, samples })
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    let start: usize = bytes
        .split(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (start + column.saturating_sub(1)) as u64
}

/// Labels must list exactly the classes present in the mask.
pub fn validate_sample(s: &ToySample, classes: usize) -> Result<()> {
    let mut seen = vec![0u8; classes];
    for &v in &s.mask.labels {
        if v as usize > classes {
            return Err(Error::Validation(format!("{}: mask value {v} outside 0..={classes}", s.id)));
        }
        if v > 0 {
            seen[v as usize - 1] = 1;
        }
    }
    if seen != s.labels {
        return Err(Error::Validation(format!(
            "{}: labels {:?} disagree with mask classes {:?}",
            s.id, s.labels, seen
        )));
    }
    Ok(())
}

/// SHA-256 over the relative paths and bytes of every file under `dir`,
/// in path order, except a top-level `manifest.json`.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if d != dir || p.file_name() != Some(MANIFEST.as_ref()) {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        let bytes = read(&f)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
