//! Synthetic person images with known identities, cameras, attributes and
//! ground-truth attribute regions.
//!
//! Every identity draws one binary attribute vector. Each of its images
//! renders that vector on a simple pedestrian silhouette, with
//! camera-dependent photometric shifts, per-image noise and small
//! geometric jitter. Pixels are quantized to 8 bits so that a saved dataset
//! reloads bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

/// Axis-aligned rectangle in normalized image coordinates (`x` across, `y` down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Region { x0, y0, x1, y1 }
    }

    fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.x0)
            && (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y0)
            && (0.0..=1.0).contains(&self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }
}

/// How an attribute bit changes the picture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RenderRule {
    /// Region is always painted; the bit selects the color.
    Recolor { on: Rgb, off: Rgb },
    /// Region is painted only when the bit is set.
    Patch { color: Rgb },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub region: Region,
    pub render: RenderRule,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub height: usize,
    pub width: usize,
    pub attributes: Vec<AttributeSpec>,
}

fn attr(name: &str, region: Region, render: RenderRule, frequency: f64) -> AttributeSpec {
    AttributeSpec {
        name: name.to_string(),
        region,
        render,
        frequency,
    }
}

impl AttributeSchema {
    /// 64×32 images with eight attributes: two large clothing colors near 50%
    /// frequency and six small accessories between 10% and 40%.
    pub fn desk_scale() -> Self {
        use RenderRule::*;
        AttributeSchema {
            height: 64,
            width: 32,
            attributes: vec![
                attr(
                    "upper_red",
                    Region::new(0.22, 0.22, 0.78, 0.55),
                    Recolor { on: [0.80, 0.15, 0.15], off: [0.15, 0.25, 0.75] },
                    0.5,
                ),
                attr(
                    "lower_dark",
                    Region::new(0.28, 0.55, 0.72, 0.91),
                    Recolor { on: [0.12, 0.12, 0.16], off: [0.72, 0.66, 0.52] },
                    0.5,
                ),
                attr("hat", Region::new(0.28, 0.02, 0.72, 0.10), Patch { color: [0.95, 0.85, 0.10] }, 0.2),
                attr("backpack", Region::new(0.72, 0.24, 0.97, 0.48), Patch { color: [0.10, 0.60, 0.20] }, 0.3),
                attr("handbag", Region::new(0.03, 0.50, 0.25, 0.66), Patch { color: [0.85, 0.20, 0.75] }, 0.25),
                attr("long_hair", Region::new(0.30, 0.14, 0.70, 0.27), Patch { color: [0.32, 0.18, 0.06] }, 0.35),
                attr("white_shoes", Region::new(0.28, 0.91, 0.72, 0.99), Patch { color: [0.97, 0.97, 0.97] }, 0.4),
                attr("logo", Region::new(0.40, 0.30, 0.60, 0.40), Patch { color: [0.10, 0.90, 0.90] }, 0.1),
            ],
        }
    }

    pub fn m(&self) -> usize {
        self.attributes.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m() < 2 {
            return Err(AmdError::Config("schema needs at least 2 attributes".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(AmdError::Config("image must be at least 8×8".into()));
        }
        for a in &self.attributes {
            if !a.region.is_valid() {
                return Err(AmdError::Config(format!("attribute {} region outside [0,1]²", a.name)));
            }
            if !(a.frequency > 0.0 && a.frequency < 1.0) {
                return Err(AmdError::Config(format!(
                    "attribute {} frequency {} outside (0,1)",
                    a.name, a.frequency
                )));
            }
        }
        Ok(())
    }
}

/// One synthetic image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    /// Unique image index within the generated set.
    pub index: usize,
    pub id: usize,
    pub camera: usize,
    pub attributes: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// `3×H×W` channel-major 8-bit pixels.
    pub pixels: Vec<u8>,
    /// `M×H×W` binary maps, 1 where a positive attribute is visible.
    pub masks: Vec<u8>,
}

impl PersonRecord {
    /// The image as a `3×H×W` tensor with values in `[0,1]`.
    pub fn image<T: Real>(&self) -> Tensor<T> {
        let inv = T::one() / T::of(255.0);
        let data = self.pixels.iter().map(|&b| T::of(b as f64) * inv).collect();
        Tensor::from_vec(&[3, self.height, self.width], data).expect("pixel buffer is 3×H×W")
    }

    pub fn mask(&self, k: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.masks[k * n..(k + 1) * n]
    }

    pub fn m(&self) -> usize {
        self.attributes.len()
    }
}

fn camera_gain(camera: usize) -> (f64, Rgb) {
    let phase = (camera as f64 * 0.618_033_988_75).fract();
    let gain = 0.85 + 0.3 * phase;
    let tint = [
        0.06 * (phase * 6.283).sin(),
        0.04 * (phase * 6.283 + 2.1).sin(),
        0.06 * (phase * 6.283 + 4.2).sin(),
    ];
    (gain, tint)
}

const SKIN_TONES: [Rgb; 4] = [
    [0.93, 0.78, 0.65],
    [0.80, 0.62, 0.48],
    [0.62, 0.45, 0.33],
    [0.45, 0.31, 0.22],
];

fn draw_attribute_vector(
    schema: &AttributeSchema,
    rng: &mut ChaCha8Rng,
    taken: &BTreeSet<Vec<u8>>,
    distinct: bool,
) -> Vec<u8> {
    let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        schema
            .attributes
            .iter()
            .map(|a| u8::from(rng.gen_bool(a.frequency)))
            .collect()
    };
    if !distinct {
        return draw(rng);
    }
    for _ in 0..10_000 {
        let v = draw(rng);
        if !taken.contains(&v) {
            return v;
        }
    }
    // Marginals too skewed for rejection sampling: take a uniformly random free vector.
    let m = schema.m();
    let free: Vec<Vec<u8>> = (0u64..(1u64 << m))
        .map(|bits| (0..m).map(|k| ((bits >> k) & 1) as u8).collect::<Vec<u8>>())
        .filter(|v| !taken.contains(v))
        .collect();
    free.choose(rng).expect("capacity checked by caller").clone()
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
    owner: Vec<Option<usize>>,
}

impl Canvas {
    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb, owner: Option<usize>) {
        let (h, w) = (self.h as i64, self.w as i64);
        let (x0, x1) = (x0.clamp(0, w), x1.clamp(0, w));
        let (y0, y1) = (y0.clamp(0, h), y1.clamp(0, h));
        let plane = self.h * self.w;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y as usize * self.w + x as usize;
                for c in 0..3 {
                    self.rgb[c * plane + p] = color[c];
                }
                self.owner[p] = owner;
            }
        }
    }
}

fn px(v: f64, extent: usize) -> i64 {
    (v * extent as f64).round() as i64
}

fn render(
    schema: &AttributeSchema,
    attributes: &[u8],
    skin: Rgb,
    camera: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = (schema.height, schema.width);
    let plane = h * w;
    let bg = 0.35 + rng.gen_range(0.0..0.25);
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![bg; 3 * plane],
        owner: vec![None; plane],
    };
    // Background texture: a few faint vertical bands.
    for x in 0..w {
        let shade = 0.04 * ((x as f64 * 0.7 + bg * 10.0).sin());
        for y in 0..h {
            for c in 0..3 {
                canvas.rgb[c * plane + y * w + x] += shade;
            }
        }
    }
    let dx = rng.gen_range(-2i64..=2);
    let dy = rng.gen_range(-2i64..=2);
    let body = |canvas: &mut Canvas, r: Region, color: Rgb| {
        canvas.fill(px(r.x0, w) + dx, px(r.y0, h) + dy, px(r.x1, w) + dx, px(r.y1, h) + dy, color, None);
    };
    // Neutral silhouette under the attribute layers.
    body(&mut canvas, Region::new(0.36, 0.06, 0.64, 0.22), skin);
    body(&mut canvas, Region::new(0.24, 0.22, 0.76, 0.55), [0.5, 0.5, 0.5]);
    body(&mut canvas, Region::new(0.30, 0.55, 0.70, 0.92), [0.4, 0.4, 0.4]);
    body(&mut canvas, Region::new(0.30, 0.92, 0.70, 0.98), [0.08, 0.06, 0.05]);

    for (k, spec) in schema.attributes.iter().enumerate() {
        let on = attributes[k] == 1;
        let color = match (&spec.render, on) {
            (RenderRule::Recolor { on: c, .. }, true) => Some(*c),
            (RenderRule::Recolor { off: c, .. }, false) => Some(*c),
            (RenderRule::Patch { color }, true) => Some(*color),
            (RenderRule::Patch { .. }, false) => None,
        };
        let Some(color) = color else { continue };
        let jx = rng.gen_range(-1i64..=1);
        let jy = rng.gen_range(-1i64..=1);
        let r = spec.region;
        let shade = rng.gen_range(-0.05..0.05);
        let color = [color[0] + shade, color[1] + shade, color[2] + shade];
        canvas.fill(
            px(r.x0, w) + dx + jx,
            px(r.y0, h) + dy + jy,
            px(r.x1, w) + dx + jx,
            px(r.y1, h) + dy + jy,
            color,
            on.then_some(k),
        );
    }

    let (gain, tint) = camera_gain(camera);
    let brightness = rng.gen_range(-0.06..0.06);
    let mut pixels = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        for p in 0..plane {
            let noise = rng.gen_range(-0.03..0.03);
            let v = canvas.rgb[c * plane + p] * gain + tint[c] + brightness + noise;
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let m = schema.m();
    let mut masks = vec![0u8; m * plane];
    for (p, o) in canvas.owner.iter().enumerate() {
        if let Some(k) = o {
            masks[k * plane + p] = 1;
        }
    }
    (pixels, masks)
}

/// Generates `n_ids × images_per_id` records, deterministic in `seed`.
///
/// Identities receive pairwise-distinct attribute vectors; this requires
/// `2^M ≥ n_ids`.
pub fn generate_dataset(
    schema: &AttributeSchema,
    n_ids: usize,
    images_per_id: usize,
    n_cameras: usize,
    seed: u64,
) -> Result<Vec<PersonRecord>> {
    schema.validate()?;
    if n_ids < 2 || images_per_id < 2 || n_cameras < 2 {
        return Err(AmdError::Config(
            "need n_ids >= 2, images_per_id >= 2 and n_cameras >= 2".into(),
        ));
    }
    let m = schema.m();
    if m < 63 && (1u64 << m) < n_ids as u64 {
        return Err(AmdError::Capacity(format!(
            "{} attributes give {} distinct vectors, fewer than {} identities",
            m,
            1u64 << m,
            n_ids
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let mut identities = Vec::with_capacity(n_ids);
    for _ in 0..n_ids {
        let v = draw_attribute_vector(schema, &mut rng, &taken, true);
        taken.insert(v.clone());
        let skin = SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())];
        identities.push((v, skin));
    }
    let mut records = Vec::with_capacity(n_ids * images_per_id);
    for (id, (attributes, skin)) in identities.iter().enumerate() {
        let cam_offset = rng.gen_range(0..n_cameras);
        for j in 0..images_per_id {
            let camera = (j + cam_offset) % n_cameras;
            let (pixels, masks) = render(schema, attributes, *skin, camera, &mut rng);
            records.push(PersonRecord {
                index: records.len(),
                id,
                camera,
                attributes: attributes.clone(),
                height: schema.height,
                width: schema.width,
                pixels,
                masks,
            });
        }
    }
    Ok(records)
}

/// Train/query/gallery partition with identity-disjoint train and test sides.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub schema: AttributeSchema,
    pub train: Vec<PersonRecord>,
    pub query: Vec<PersonRecord>,
    pub gallery: Vec<PersonRecord>,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn empty(schema: AttributeSchema) -> Self {
        DatasetSplit {
            schema,
            train: vec![],
            query: vec![],
            gallery: vec![],
            warnings: vec![],
        }
    }

    /// Looks up a record by image index in any partition.
    pub fn find(&self, index: usize) -> Option<&PersonRecord> {
        self.train
            .iter()
            .chain(&self.query)
            .chain(&self.gallery)
            .find(|r| r.index == index)
    }

    pub fn test_records(&self) -> impl Iterator<Item = &PersonRecord> {
        self.query.iter().chain(&self.gallery)
    }
}

/// Splits by identity, then picks at most one query per test identity and
/// camera such that each query keeps a gallery match under another camera.
pub fn split_dataset(
    schema: &AttributeSchema,
    records: Vec<PersonRecord>,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(AmdError::Config(format!(
            "test fraction {} outside (0,1)",
            test_fraction
        )));
    }
    let mut by_id: BTreeMap<usize, Vec<PersonRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.id).or_default().push(r);
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    if n_test < 2 || ids.len() - n_test < 2 {
        return Err(AmdError::Config(format!(
            "{} identities cannot give at least 2 train and 2 test identities at fraction {}",
            ids.len(),
            test_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut test_ids: Vec<usize> = ids[..n_test].to_vec();
    test_ids.sort_unstable();
    let mut train_ids: Vec<usize> = ids[n_test..].to_vec();
    train_ids.sort_unstable();

    let mut split = DatasetSplit::empty(schema.clone());
    for id in &train_ids {
        split.train.extend(by_id.remove(id).unwrap());
    }
    for id in test_ids {
        let mut recs = by_id.remove(&id).unwrap();
        recs.shuffle(&mut rng);
        let cameras: BTreeSet<usize> = recs.iter().map(|r| r.camera).collect();
        if cameras.len() < 2 {
            split.warnings.push(format!(
                "identity {} appears under a single camera; excluded from the query set",
                id
            ));
            recs.sort_by_key(|r| r.index);
            split.gallery.extend(recs);
            continue;
        }
        let mut is_query = vec![false; recs.len()];
        for &cam in &cameras {
            let Some(pick) = recs.iter().position(|r| r.camera == cam) else { continue };
            is_query[pick] = true;
            let valid = recs.iter().enumerate().filter(|(i, _)| is_query[*i]).all(|(_, q)| {
                recs.iter()
                    .enumerate()
                    .any(|(j, g)| !is_query[j] && g.camera != q.camera)
            });
            if !valid {
                is_query[pick] = false;
            }
        }
        let mut q = vec![];
        let mut g = vec![];
        for (r, flag) in recs.into_iter().zip(is_query) {
            if flag {
                q.push(r);
            } else {
                g.push(r);
            }
        }
        q.sort_by_key(|r| r.index);
        g.sort_by_key(|r| r.index);
        split.query.extend(q);
        split.gallery.extend(g);
    }
    split.query.sort_by_key(|r| r.index);
    split.gallery.sort_by_key(|r| r.index);
    Ok(split)
}

// ---- persistence ------------------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;
const IMAGES_MAGIC: &[u8; 4] = b"AMDI";
const MASKS_MAGIC: &[u8; 4] = b"AMDM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMeta {
    pub index: usize,
    pub id: usize,
    pub camera: usize,
    pub attributes: Vec<u8>,
    pub partition: Partition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub schema: AttributeSchema,
    pub records: Vec<RecordMeta>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn blob(magic: &[u8; 4], count: usize, payload: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&MANIFEST_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend(payload);
    out
}

fn open_blob<'a>(bytes: &'a [u8], magic: &[u8; 4], count: usize, per: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(AmdError::Format(format!("{} has a bad header", what)));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MANIFEST_VERSION {
        return Err(AmdError::Format(format!("{} version {} unsupported", what, version)));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n != count || bytes.len() != 12 + count * per {
        return Err(AmdError::Format(format!(
            "{} holds {} bytes for {} records, expected {}",
            what,
            bytes.len() - 12,
            n,
            count * per
        )));
    }
    Ok(&bytes[12..])
}

/// Writes `manifest.json`, `images.bin` and `masks.bin` into `dir`.
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tagged: Vec<(&PersonRecord, Partition)> = split
        .train
        .iter()
        .map(|r| (r, Partition::Train))
        .chain(split.query.iter().map(|r| (r, Partition::Query)))
        .chain(split.gallery.iter().map(|r| (r, Partition::Gallery)))
        .collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        schema: split.schema.clone(),
        records: tagged
            .iter()
            .map(|(r, p)| RecordMeta {
                index: r.index,
                id: r.id,
                camera: r.camera,
                attributes: r.attributes.clone(),
                partition: *p,
            })
            .collect(),
        warnings: split.warnings.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    let images = blob(
        IMAGES_MAGIC,
        tagged.len(),
        tagged.iter().flat_map(|(r, _)| r.pixels.iter().copied()),
    );
    fs::File::create(dir.join("images.bin"))?.write_all(&images)?;
    let masks = blob(
        MASKS_MAGIC,
        tagged.len(),
        tagged.iter().flat_map(|(r, _)| r.masks.iter().copied()),
    );
    fs::File::create(dir.join("masks.bin"))?.write_all(&masks)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| AmdError::Format(format!("manifest: {}", e)))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(AmdError::Format(format!(
            "manifest version {} unsupported",
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest = load_manifest(dir)?;
    let schema = manifest.schema;
    let n = manifest.records.len();
    let mut split = DatasetSplit::empty(schema.clone());
    split.warnings = manifest.warnings;
    if n == 0 {
        return Ok(split);
    }
    schema.validate()?;
    let (h, w, m) = (schema.height, schema.width, schema.m());
    let img_bytes = fs::read(dir.join("images.bin"))?;
    let mask_bytes = fs::read(dir.join("masks.bin"))?;
    let images = open_blob(&img_bytes, IMAGES_MAGIC, n, 3 * h * w, "images.bin")?;
    let masks = open_blob(&mask_bytes, MASKS_MAGIC, n, m * h * w, "masks.bin")?;
    for (i, meta) in manifest.records.into_iter().enumerate() {
        if meta.attributes.len() != m || meta.attributes.iter().any(|&a| a > 1) {
            return Err(AmdError::Format(format!("record {} has a bad attribute vector", meta.index)));
        }
        let rec = PersonRecord {
            index: meta.index,
            id: meta.id,
            camera: meta.camera,
            attributes: meta.attributes,
            height: h,
            width: w,
            pixels: images[i * 3 * h * w..(i + 1) * 3 * h * w].to_vec(),
            masks: masks[i * m * h * w..(i + 1) * m * h * w].to_vec(),
        };
        match meta.partition {
            Partition::Train => split.train.push(rec),
            Partition::Query => split.query.push(rec),
            Partition::Gallery => split.gallery.push(rec),
        }
    }
    Ok(split)
}

/// Binary PPM (P6) of a record's image.
pub fn write_ppm(record: &PersonRecord, path: &Path) -> Result<()> {
    let (h, w) = (record.height, record.width);
    let plane = h * w;
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push(record.pixels[c * plane + p]);
        }
    }
    fs::write(path, out)?;
    Ok(())
}
