//! Dataset plumbing: RGB images, annotation manifests, prompt-grouped
//! splitting, min-max target normalization, crop sampling, and a seeded
//! synthetic dataset for desk-scale runs.
//!
//! The canonical manifest is UTF-8 CSV with header
//! `image_path,user_prompt,mos_percept,mos_align,generator`; an empty
//! user_prompt or mos_align field means absent. Adapters for the two
//! dataset-release layouts map their columns onto the same records.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::{derive_seed, seeded_rng};

// ── images ───────────────────────────────────────────────────────────

/// Interleaved RGB raster with values in [0,1], row-major from the top-left.
#[derive(Debug, Clone)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image("image dimensions must be >= 1".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} values for {width}x{height}x3 image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Bilinear resample to a new size (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> Result<RgbImage> {
        if new_width == 0 || new_height == 0 {
            return Err(Error::Image("resize target must be >= 1".into()));
        }
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        let mut out = vec![0.0; new_width * new_height * 3];
        for y in 0..new_height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.pixel(x0, y0, c) * (1.0 - wx) + self.pixel(x1, y0, c) * wx;
                    let bottom = self.pixel(x0, y1, c) * (1.0 - wx) + self.pixel(x1, y1, c) * wx;
                    out[(y * new_width + x) * 3 + c] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        RgbImage::new(new_width, new_height, out)
    }

    /// Snap every channel to the u8 grid used by the PNG container, so
    /// in-memory pixels equal their disk round-trip exactly.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> =
            self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Image("raster buffer size mismatch".into()))?;
        img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        RgbImage::new(w as usize, h as usize, data)
    }
}

/// Resolves manifest image paths to pixel data. Disk for real datasets,
/// memory for generated fixtures.
pub trait ImageProvider {
    fn load(&self, image_path: &str) -> Result<RgbImage>;
}

/// Reads raster files relative to a root directory.
pub struct DiskProvider {
    pub root: PathBuf,
}

impl ImageProvider for DiskProvider {
    fn load(&self, image_path: &str) -> Result<RgbImage> {
        let p = Path::new(image_path);
        let full = if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) };
        RgbImage::load_png(&full)
    }
}

/// Serves images generated in memory.
pub struct MemoryProvider {
    pub images: HashMap<String, RgbImage>,
}

impl ImageProvider for MemoryProvider {
    fn load(&self, image_path: &str) -> Result<RgbImage> {
        self.images
            .get(image_path)
            .cloned()
            .ok_or_else(|| Error::Image(format!("no such generated image: {image_path}")))
    }
}

// ── records and manifests ────────────────────────────────────────────

/// One annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_path: String,
    pub user_prompt: Option<String>,
    pub mos_percept: f64,
    pub mos_align: Option<f64>,
    pub generator_tag: String,
    pub prompt_group_id: String,
}

/// Which manifest layout a file uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestFormat {
    Canonical,
    Agiqa3k,
    Aigciqa2023,
}

impl std::str::FromStr for ManifestFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(ManifestFormat::Canonical),
            "agiqa3k" => Ok(ManifestFormat::Agiqa3k),
            "aigciqa2023" => Ok(ManifestFormat::Aigciqa2023),
            other => Err(Error::InvalidConfig(format!(
                "unknown manifest format {other} (expected canonical, agiqa3k, or aigciqa2023)"
            ))),
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
        Error::Manifest(format!(
            "{}: missing column {name} (header is {:?})",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        ))
    })
}

fn parse_score(field: &str, row: usize, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Manifest(format!("row {row} column {column}: unparseable score {field:?}"))
    })
}

/// Generator tag taken from the file-name prefix before the first `_`
/// (the naming convention of the release layouts), else "unknown".
fn generator_from_name(name: &str) -> String {
    let base = name.rsplit('/').next().unwrap_or(name);
    match base.split('_').next() {
        Some(prefix) if !prefix.is_empty() && prefix != base => prefix.to_string(),
        _ => "unknown".to_string(),
    }
}

/// Parse an annotation manifest into records. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?
        .clone();

    let mut records = Vec::new();
    match format {
        ManifestFormat::Canonical => {
            let ip = column_index(&headers, "image_path", path)?;
            let up = column_index(&headers, "user_prompt", path)?;
            let mp = column_index(&headers, "mos_percept", path)?;
            let ma = column_index(&headers, "mos_align", path)?;
            let gen = column_index(&headers, "generator", path)?;
            for (i, row) in reader.records().enumerate() {
                let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
                let image_path = row[ip].trim().to_string();
                if image_path.is_empty() {
                    return Err(Error::Manifest(format!("row {}: empty image_path", i + 1)));
                }
                let prompt = row[up].trim();
                let user_prompt =
                    if prompt.is_empty() { None } else { Some(prompt.to_string()) };
                let align_field = row[ma].trim();
                let mos_align = if align_field.is_empty() {
                    None
                } else {
                    Some(parse_score(align_field, i + 1, "mos_align")?)
                };
                let prompt_group_id = match &user_prompt {
                    Some(p) => p.clone(),
                    None => image_path.clone(),
                };
                records.push(SampleRecord {
                    mos_percept: parse_score(&row[mp], i + 1, "mos_percept")?,
                    generator_tag: row[gen].trim().to_string(),
                    image_path,
                    user_prompt,
                    mos_align,
                    prompt_group_id,
                });
            }
        }
        ManifestFormat::Agiqa3k => {
            // Release layout: name,prompt,...,mos_quality,...,mos_align,...
            let name = column_index(&headers, "name", path)?;
            let prompt = column_index(&headers, "prompt", path)?;
            let mq = column_index(&headers, "mos_quality", path)?;
            let ma = column_index(&headers, "mos_align", path)?;
            for (i, row) in reader.records().enumerate() {
                let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
                let image_path = row[name].trim().to_string();
                let p = row[prompt].trim().to_string();
                if p.is_empty() {
                    return Err(Error::Manifest(format!("row {}: empty prompt", i + 1)));
                }
                records.push(SampleRecord {
                    mos_percept: parse_score(&row[mq], i + 1, "mos_quality")?,
                    mos_align: Some(parse_score(&row[ma], i + 1, "mos_align")?),
                    generator_tag: generator_from_name(&image_path),
                    prompt_group_id: p.clone(),
                    user_prompt: Some(p),
                    image_path,
                });
            }
        }
        ManifestFormat::Aigciqa2023 => {
            // Release layout with no prompt text; prompt_index is the
            // scene/prompt number shared by images generated from the
            // same (unavailable) prompt and serves as the group key.
            let name = column_index(&headers, "name", path)?;
            let pi = column_index(&headers, "prompt_index", path)?;
            let mq = column_index(&headers, "mos_quality", path)?;
            let ma = column_index(&headers, "mos_align", path)?;
            for (i, row) in reader.records().enumerate() {
                let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1)))?;
                let image_path = row[name].trim().to_string();
                let group = row[pi].trim();
                if group.is_empty() {
                    return Err(Error::Manifest(format!("row {}: empty prompt_index", i + 1)));
                }
                records.push(SampleRecord {
                    mos_percept: parse_score(&row[mq], i + 1, "mos_quality")?,
                    mos_align: Some(parse_score(&row[ma], i + 1, "mos_align")?),
                    generator_tag: generator_from_name(&image_path),
                    prompt_group_id: format!("group-{group}"),
                    user_prompt: None,
                    image_path,
                });
            }
        }
    }
    Ok(records)
}

/// Write records in the canonical layout.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    w.write_record(["image_path", "user_prompt", "mos_percept", "mos_align", "generator"])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    for r in records {
        let align = r.mos_align.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.image_path.as_str(),
            r.user_prompt.as_deref().unwrap_or(""),
            &r.mos_percept.to_string(),
            &align,
            r.generator_tag.as_str(),
        ])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

// ── normalization ────────────────────────────────────────────────────

/// Min-max range fitted on training targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRange {
    pub min: f64,
    pub max: f64,
}

impl AffineRange {
    fn fit(values: impl Iterator<Item = f64>) -> Option<AffineRange> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for v in values {
            any = true;
            min = min.min(v);
            max = max.max(v);
        }
        if any && min < max {
            Some(AffineRange { min, max })
        } else {
            None
        }
    }

    /// Map into [0,1]; out-of-range inputs (test split) clamp.
    pub fn normalize(&self, raw: f64) -> f64 {
        ((raw - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

/// Per-target normalizers fitted on the training split. A missing align
/// range means alignment targets were absent or constant on train.
#[derive(Debug, Clone, Copy)]
pub struct Normalizer {
    pub percept: AffineRange,
    pub align: Option<AffineRange>,
}

impl Normalizer {
    pub fn fit(train: &[SampleRecord]) -> Result<Normalizer> {
        let percept = AffineRange::fit(train.iter().map(|r| r.mos_percept)).ok_or_else(|| {
            Error::Degenerate("training perceptual targets are constant or absent".into())
        })?;
        let align = AffineRange::fit(train.iter().filter_map(|r| r.mos_align));
        Ok(Normalizer { percept, align })
    }

    pub fn normalize_percept(&self, raw: f64) -> f64 {
        self.percept.normalize(raw)
    }

    pub fn normalize_align(&self, raw: f64) -> Result<f64> {
        let range = self.align.ok_or_else(|| {
            Error::Degenerate("alignment targets absent or constant on the training split".into())
        })?;
        Ok(range.normalize(raw))
    }
}

// ── splitting ────────────────────────────────────────────────────────

/// Prompt-grouped train/test partition with its fitted normalizer.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub normalizer: Normalizer,
}

/// Shuffle prompt groups by seed, put the leading `ratio` share of groups
/// in train (at least one group stays in test), fit the normalizer on the
/// training targets.
pub fn split_by_prompt(records: &[SampleRecord], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} outside (0,1)")));
    }
    let mut groups: Vec<&str> = Vec::new();
    for r in records {
        if !groups.contains(&r.prompt_group_id.as_str()) {
            groups.push(&r.prompt_group_id);
        }
    }
    if groups.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} prompt group(s); need at least 2 to split",
            groups.len()
        )));
    }
    let mut rng = seeded_rng(seed, "split");
    // Fisher-Yates over the group list.
    for i in (1..groups.len()).rev() {
        let j = rng.random_range(0..=i);
        groups.swap(i, j);
    }
    let n_train = ((ratio * groups.len() as f64).ceil() as usize)
        .clamp(1, groups.len() - 1);
    let train_groups: Vec<&str> = groups[..n_train].to_vec();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if train_groups.contains(&r.prompt_group_id.as_str()) {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    let normalizer = Normalizer::fit(&train)?;
    Ok(DatasetSplit { train, test, normalizer })
}

// ── cropping ─────────────────────────────────────────────────────────

/// Uniformly random crop_size x crop_size crop. Images smaller than the
/// crop on either side are first upscaled bilinearly so the short side
/// reaches crop_size.
pub fn sample_crop(image: &RgbImage, crop_size: usize, rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    if crop_size == 0 {
        return Err(Error::InvalidConfig("crop_size must be >= 1".into()));
    }
    let scaled;
    let src = if image.width < crop_size || image.height < crop_size {
        let f = crop_size as f64 / image.width.min(image.height) as f64;
        let nw = ((image.width as f64 * f).round() as usize).max(crop_size);
        let nh = ((image.height as f64 * f).round() as usize).max(crop_size);
        scaled = image.resize_bilinear(nw, nh)?;
        &scaled
    } else {
        image
    };
    let max_x = src.width - crop_size;
    let max_y = src.height - crop_size;
    let x0 = if max_x == 0 { 0 } else { rng.random_range(0..=max_x) };
    let y0 = if max_y == 0 { 0 } else { rng.random_range(0..=max_y) };
    let mut out = vec![0.0; crop_size * crop_size * 3];
    for y in 0..crop_size {
        for x in 0..crop_size {
            for c in 0..3 {
                out[(y * crop_size + x) * 3 + c] = src.pixel(x0 + x, y0 + y, c);
            }
        }
    }
    RgbImage::new(crop_size, crop_size, out)
}

/// Fresh crop stream for one image path: independent of draw order across
/// images, identical across commands that score the same path.
pub fn crop_rng(seed: u64, image_path: &str) -> ChaCha8Rng {
    seeded_rng(derive_seed(seed, "crops"), image_path)
}

// ── synthetic dataset ────────────────────────────────────────────────

/// Generated records plus their pixel data.
pub struct SyntheticDataset {
    pub records: Vec<SampleRecord>,
    pub images: HashMap<String, RgbImage>,
}

pub const SYNTH_IMAGE_SIDE: usize = 48;

/// Per-channel means over a 2x2 spatial grid: the 12 statistics the hidden
/// scorer reads.
fn quadrant_means(img: &RgbImage) -> [f64; 12] {
    let hw = img.width / 2;
    let hh = img.height / 2;
    let mut out = [0.0; 12];
    let mut idx = 0;
    for qy in 0..2 {
        for qx in 0..2 {
            let (x0, x1) = (qx * hw, if qx == 0 { hw } else { img.width });
            let (y0, y1) = (qy * hh, if qy == 0 { hh } else { img.height });
            let count = ((x1 - x0) * (y1 - y0)) as f64;
            for c in 0..3 {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img.pixel(x, y, c);
                    }
                }
                out[idx] = acc / count;
                idx += 1;
            }
        }
    }
    out
}

fn synth_logistic(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Deterministic desk-scale dataset: coarse color-grid images upsampled
/// with noise, scored by a hidden seeded linear functional of quadrant
/// color statistics (perceptual target) and a correlated functional
/// (alignment target). Raw MOS values live in [1,5].
pub fn make_synthetic_dataset(seed: u64, n_images: usize, n_groups: usize) -> Result<SyntheticDataset> {
    if n_images == 0 || n_groups == 0 || n_groups > n_images {
        return Err(Error::InvalidConfig(format!(
            "invalid synthetic sizes: {n_images} images in {n_groups} groups"
        )));
    }
    // Hidden scorer directions: unit-scale weights over the 12 statistics,
    // alignment correlated with perception at rho ~ 0.7.
    let mut scorer_rng = seeded_rng(seed, "synth.scorer");
    let w_percept: Vec<f64> = (0..12).map(|_| scorer_rng.random_range(-1.0..1.0)).collect();
    let w_other: Vec<f64> = (0..12).map(|_| scorer_rng.random_range(-1.0..1.0)).collect();
    let rho = 0.7f64;
    let w_align: Vec<f64> = w_percept
        .iter()
        .zip(&w_other)
        .map(|(p, o)| rho * p + (1.0 - rho * rho).sqrt() * o)
        .collect();
    let gain = 6.0;

    let mut records = Vec::with_capacity(n_images);
    let mut images = HashMap::new();
    for i in 0..n_images {
        let mut rng = seeded_rng(seed, &format!("synth.img.{i}"));
        let coarse_data: Vec<f64> = (0..3 * 3 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let coarse = RgbImage::new(3, 3, coarse_data)?;
        let mut img = coarse.resize_bilinear(SYNTH_IMAGE_SIDE, SYNTH_IMAGE_SIDE)?;
        for v in &mut img.data {
            *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
        }
        // Snap to the PNG byte grid so disk and memory pipelines see the
        // same pixels the targets were computed from.
        img.quantize_u8();

        let phi = quadrant_means(&img);
        let centered: Vec<f64> = phi.iter().map(|v| v - 0.5).collect();
        let score = |w: &[f64]| -> f64 {
            let s: f64 = w.iter().zip(&centered).map(|(a, b)| a * b).sum();
            synth_logistic(gain * s)
        };
        let g_percept = score(&w_percept);
        let g_align = score(&w_align);

        let group = i % n_groups;
        let path = format!("synthetic/img_{i:03}.png");
        records.push(SampleRecord {
            image_path: path.clone(),
            user_prompt: Some(format!("synthetic scene {group}")),
            mos_percept: 1.0 + 4.0 * g_percept,
            mos_align: Some(1.0 + 4.0 * g_align),
            generator_tag: format!("gen{}", i % 2),
            prompt_group_id: format!("synthetic scene {group}"),
        });
        images.insert(path, img);
    }
    Ok(SyntheticDataset { records, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn record(path: &str, group: &str, mp: f64, ma: Option<f64>) -> SampleRecord {
        SampleRecord {
            image_path: path.to_string(),
            user_prompt: Some(group.to_string()),
            mos_percept: mp,
            mos_align: ma,
            generator_tag: "gen".to_string(),
            prompt_group_id: group.to_string(),
        }
    }

    #[test]
    fn canonical_manifest_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let records = vec![
            record("a.png", "cat on mat", 3.5, Some(2.0)),
            SampleRecord {
                image_path: "b.png".into(),
                user_prompt: None,
                mos_percept: 4.25,
                mos_align: None,
                generator_tag: "sd".into(),
                prompt_group_id: "b.png".into(),
            },
            record("c.png", "cat on mat", 1.0, Some(4.5)),
        ];
        write_manifest(&path, &records).unwrap();
        let back = load_manifest(&path, ManifestFormat::Canonical).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].user_prompt.as_deref(), Some("cat on mat"));
        assert_eq!(back[1].user_prompt, None);
        assert_eq!(back[1].mos_align, None);
        assert_eq!(back[1].prompt_group_id, "b.png");
        assert_eq!(back[0].prompt_group_id, back[2].prompt_group_id);
        assert_eq!(back[0].mos_percept, 3.5);
    }

    #[test]
    fn bad_score_names_row_and_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "image_path,user_prompt,mos_percept,mos_align,generator\na.png,p,oops,2.0,g\n",
        )
        .unwrap();
        let err = load_manifest(&path, ManifestFormat::Canonical).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("mos_percept"), "{err}");
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "image_path,mos_percept\na.png,3.0\n").unwrap();
        let err = load_manifest(&path, ManifestFormat::Canonical).unwrap_err().to_string();
        assert!(err.contains("user_prompt"), "{err}");
    }

    #[test]
    fn agiqa3k_adapter_groups_by_prompt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "name,prompt,style,mos_quality,mos_align\n\
             midjourney_000.jpg,a red fox,photo,3.1,2.9\n\
             midjourney_001.jpg,a red fox,photo,2.8,3.0\n\
             sd15_000.jpg,a tall ship,art,4.0,4.1\n\
             sd15_001.jpg,a tall ship,art,3.9,3.8\n\
             glide_000.jpg,small robot,photo,1.5,1.2\n\
             glide_001.jpg,small robot,photo,1.7,1.6\n",
        )
        .unwrap();
        let records = load_manifest(&path, ManifestFormat::Agiqa3k).unwrap();
        assert_eq!(records.len(), 6);
        let mut groups: Vec<&str> = records.iter().map(|r| r.prompt_group_id.as_str()).collect();
        groups.sort_unstable();
        groups.dedup();
        assert_eq!(groups.len(), 3);
        assert_eq!(records[0].generator_tag, "midjourney");
        assert_eq!(records[2].generator_tag, "sd15");
    }

    #[test]
    fn aigciqa2023_adapter_uses_prompt_index_groups() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "name,prompt_index,mos_quality,mos_align\n\
             dalle_7.png,7,55.0,60.0\n\
             sdxl_7.png,7,48.0,52.0\n\
             dalle_8.png,8,61.5,59.0\n",
        )
        .unwrap();
        let records = load_manifest(&path, ManifestFormat::Aigciqa2023).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.user_prompt.is_none()));
        assert_eq!(records[0].prompt_group_id, records[1].prompt_group_id);
        assert_ne!(records[0].prompt_group_id, records[2].prompt_group_id);
    }

    #[test]
    fn split_five_groups_of_two() {
        let records: Vec<SampleRecord> = (0..10)
            .map(|i| record(&format!("{i}.png"), &format!("g{}", i / 2), i as f64, None))
            .collect();
        let split = split_by_prompt(&records, 0.8, 1).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);
        let again = split_by_prompt(&records, 0.8, 1).unwrap();
        let paths = |rs: &[SampleRecord]| rs.iter().map(|r| r.image_path.clone()).collect::<Vec<_>>();
        assert_eq!(paths(&split.train), paths(&again.train));
        assert_eq!(paths(&split.test), paths(&again.test));
    }

    #[test]
    fn split_groups_stay_disjoint_and_every_group_reaches_test() {
        let records: Vec<SampleRecord> = (0..40)
            .map(|i| record(&format!("{i}.png"), &format!("g{}", i / 2), (i % 7) as f64, None))
            .collect();
        let mut seen_in_test: std::collections::HashSet<String> = Default::default();
        for seed in 0..100 {
            let split = split_by_prompt(&records, 0.8, seed).unwrap();
            let train_groups: std::collections::HashSet<_> =
                split.train.iter().map(|r| r.prompt_group_id.clone()).collect();
            let test_groups: std::collections::HashSet<_> =
                split.test.iter().map(|r| r.prompt_group_id.clone()).collect();
            assert!(train_groups.is_disjoint(&test_groups), "seed {seed} leaked a group");
            assert_eq!(train_groups.len(), 16);
            assert_eq!(test_groups.len(), 4);
            seen_in_test.extend(test_groups);
        }
        assert_eq!(seen_in_test.len(), 20, "some group never reached test over 100 seeds");
    }

    #[test]
    fn split_needs_two_groups() {
        let records = vec![record("a.png", "g", 1.0, None), record("b.png", "g", 2.0, None)];
        assert!(matches!(split_by_prompt(&records, 0.8, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalizer_endpoints_midpoint_clamp() {
        let train = vec![
            record("a.png", "g0", 1.0, Some(2.0)),
            record("b.png", "g1", 5.0, Some(4.0)),
        ];
        let n = Normalizer::fit(&train).unwrap();
        assert_eq!(n.normalize_percept(1.0), 0.0);
        assert_eq!(n.normalize_percept(5.0), 1.0);
        assert_eq!(n.normalize_percept(3.0), 0.5);
        assert_eq!(n.normalize_percept(5.2), 1.0);
        assert_eq!(n.normalize_percept(0.5), 0.0);
        assert_eq!(n.normalize_align(3.0).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_ranges_error() {
        let constant = vec![record("a.png", "g0", 3.0, None), record("b.png", "g1", 3.0, None)];
        assert!(Normalizer::fit(&constant).is_err());
        let no_align = vec![record("a.png", "g0", 1.0, None), record("b.png", "g1", 2.0, None)];
        let n = Normalizer::fit(&no_align).unwrap();
        assert!(n.normalize_align(1.0).is_err());
    }

    proptest! {
        #[test]
        fn normalization_preserves_order(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let train = vec![
                record("a.png", "g0", 0.0, None),
                record("b.png", "g1", 5.0, None),
            ];
            let n = Normalizer::fit(&train).unwrap();
            if a < b {
                prop_assert!(n.normalize_percept(a) <= n.normalize_percept(b));
            }
        }
    }

    fn gradient_image(w: usize, h: usize) -> RgbImage {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                data.push(x as f64 / w as f64);
                data.push(y as f64 / h as f64);
                data.push(0.25);
            }
        }
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = gradient_image(16, 16);
        let mut rng = seeded_rng(1, "crop");
        let crop = sample_crop(&img, 16, &mut rng).unwrap();
        assert_eq!(crop.data, img.data);
    }

    #[test]
    fn crops_are_reproducible_per_seeded_stream() {
        let img = gradient_image(32, 24);
        let mut a = crop_rng(5, "x.png");
        let mut b = crop_rng(5, "x.png");
        let mut c = crop_rng(5, "y.png");
        let ca = sample_crop(&img, 16, &mut a).unwrap();
        let cb = sample_crop(&img, 16, &mut b).unwrap();
        let cc = sample_crop(&img, 16, &mut c).unwrap();
        assert_eq!(ca.data, cb.data);
        assert_ne!(ca.data, cc.data);
    }

    #[test]
    fn small_images_upscale_before_cropping() {
        let img = gradient_image(8, 12);
        let mut rng = seeded_rng(2, "crop");
        let crop = sample_crop(&img, 16, &mut rng).unwrap();
        assert_eq!((crop.width, crop.height), (16, 16));
        assert!(crop.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_corners_are_uniform() {
        // 4x4 corner-bin histogram over 10k draws; chi-squared vs uniform
        // with 15 degrees of freedom stays under the far tail. Sides chosen
        // so each bin covers exactly 8 corner positions.
        let img = gradient_image(63, 63);
        let mut rng = seeded_rng(3, "corners");
        let crop_size = 32;
        let mut counts = [0usize; 16];
        for _ in 0..10_000 {
            let crop = sample_crop(&img, crop_size, &mut rng).unwrap();
            // Recover the corner from the crop's top-left pixel value.
            let x0 = (crop.pixel(0, 0, 0) * img.width as f64).round() as usize;
            let y0 = (crop.pixel(0, 0, 1) * img.height as f64).round() as usize;
            counts[(y0 / 8) * 4 + x0 / 8] += 1;
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 45.0, "chi-squared {chi2} too high: {counts:?}");
    }

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = gradient_image(20, 10);
        img.quantize_u8();
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!((back.width, back.height), (20, 10));
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn synthetic_dataset_is_deterministic_and_seed_sensitive() {
        let a = make_synthetic_dataset(7, 12, 4).unwrap();
        let b = make_synthetic_dataset(7, 12, 4).unwrap();
        let c = make_synthetic_dataset(8, 12, 4).unwrap();
        assert_eq!(a.records, b.records);
        for (path, img) in &a.images {
            assert_eq!(img.data, b.images[path].data);
        }
        assert!(a.records.iter().zip(&c.records).any(|(x, y)| x.mos_percept != y.mos_percept));
    }

    #[test]
    fn synthetic_groups_are_balanced() {
        let ds = make_synthetic_dataset(1, 14, 4).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &ds.records {
            *counts.entry(r.prompt_group_id.as_str()).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        let min = counts.values().min().unwrap();
        let max = counts.values().max().unwrap();
        assert!(max - min <= 1);
    }

    #[test]
    fn synthetic_targets_vary_and_stay_in_range() {
        let ds = make_synthetic_dataset(3, 16, 8).unwrap();
        let mps: Vec<f64> = ds.records.iter().map(|r| r.mos_percept).collect();
        assert!(mps.iter().all(|v| (1.0..=5.0).contains(v)));
        let spread = mps.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - mps.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.3, "targets nearly constant: spread {spread}");
        assert!(ds.records.iter().all(|r| r.mos_align.is_some()));
        assert!(make_synthetic_dataset(1, 4, 5).is_err());
    }

    #[test]
    fn memory_provider_serves_generated_images() {
        let ds = make_synthetic_dataset(2, 4, 2).unwrap();
        let provider = MemoryProvider { images: ds.images };
        let img = provider.load(&ds.records[0].image_path).unwrap();
        assert_eq!((img.width, img.height), (SYNTH_IMAGE_SIDE, SYNTH_IMAGE_SIDE));
        assert!(provider.load("missing.png").is_err());
    }
}
