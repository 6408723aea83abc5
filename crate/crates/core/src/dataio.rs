//! Batch sources and artifact sinks.
//!
//! Binary dataset readers (IDX and CIFAR records), a deterministic synthetic
//! batch generator for hermetic desk-scale runs, PGM/PPM image dumps, and
//! the CSV report writer. The parsers work on byte slices so they can be
//! fuzzed without touching the filesystem; every malformed input maps to an
//! error carrying a byte offset or record index.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::victim::{Label, LabeledBatch};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A decoded dataset: images in [0,1], integer labels, class count.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset.checked_add(4).ok_or_else(|| Error::Parse {
        offset,
        detail: format!("offset overflow reading {what}"),
    })?;
    if bytes.len() < end {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated while reading {what} (need bytes {offset}..{end})"),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX image file (magic 0x00000803, big-endian dims, u8 pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = read_be_u32(bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, "column count")? as usize;
    let per_image = rows.checked_mul(cols).ok_or_else(|| Error::Parse {
        offset: 8,
        detail: format!("dimension overflow: {rows} x {cols}"),
    })?;
    let total = count.checked_mul(per_image).ok_or_else(|| Error::Parse {
        offset: 4,
        detail: format!("dimension overflow: {count} x {rows} x {cols}"),
    })?;
    let expected_end = 16usize.checked_add(total).ok_or_else(|| Error::Parse {
        offset: 4,
        detail: "dimension overflow in total size".to_string(),
    })?;
    if bytes.len() < expected_end {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated pixel data: expected {expected_end} bytes total, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected_end {
        return Err(Error::Parse {
            offset: expected_end,
            detail: format!("{} trailing bytes after pixel data", bytes.len() - expected_end),
        });
    }
    if count > 0 && per_image == 0 {
        return Err(Error::Parse {
            offset: 8,
            detail: format!("degenerate image dimensions {rows} x {cols}"),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * per_image;
        let data: Vec<f64> = bytes[start..start + per_image].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    Ok(images)
}

/// Parse an IDX label file (magic 0x00000801, u8 labels).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    let expected_end = 8usize.checked_add(count).ok_or_else(|| Error::Parse {
        offset: 4,
        detail: "label count overflow".to_string(),
    })?;
    if bytes.len() < expected_end {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated labels: expected {expected_end} bytes total, found {}", bytes.len()),
        });
    }
    if bytes.len() > expected_end {
        return Err(Error::Parse {
            offset: expected_end,
            detail: format!("{} trailing bytes after labels", bytes.len() - expected_end),
        });
    }
    Ok(bytes[8..8 + count].iter().map(|&b| b as usize).collect())
}

/// Read an IDX image/label file pair from disk.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<ImageSet> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if images.len() != labels.len() {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(ImageSet { images, labels, num_classes })
}

/// CIFAR binary record flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn record_size(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + 3072,
            CifarVariant::Cifar100 => 2 + 3072,
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Parse CIFAR binary records: label byte(s), then three 32x32 color planes.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<ImageSet> {
    let record = variant.record_size();
    if bytes.len() % record != 0 {
        return Err(Error::Record {
            record: bytes.len() / record,
            detail: format!(
                "file length {} is not a multiple of the {record}-byte record size",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * record;
        let label = match variant {
            CifarVariant::Cifar10 => bytes[start] as usize,
            // coarse label first, fine label second; the fine one is used
            CifarVariant::Cifar100 => bytes[start + 1] as usize,
        };
        if label >= variant.num_classes() {
            return Err(Error::Record {
                record: i,
                detail: format!("label {label} exceeds {} classes", variant.num_classes()),
            });
        }
        let pixel_start = start + record - 3072;
        let data: Vec<f64> = bytes[pixel_start..pixel_start + 3072].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, 32, 32], data)?);
        labels.push(label);
    }
    Ok(ImageSet { images, labels, num_classes: variant.num_classes() })
}

/// Read a CIFAR binary file from disk.
pub fn read_cifar_bin(path: &Path, variant: CifarVariant) -> Result<ImageSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cifar(&bytes, variant)
}

/// Synthetic image families for hermetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthPattern {
    /// Class-indexed solid rectangles over a gently textured background.
    Blocks,
    /// Linear gradient backgrounds with a class-keyed disc or cross.
    GradientsAndShapes,
}

impl SynthPattern {
    pub fn parse(s: &str) -> Result<SynthPattern> {
        match s {
            "blocks" => Ok(SynthPattern::Blocks),
            "gradients-and-shapes" => Ok(SynthPattern::GradientsAndShapes),
            other => Err(Error::invalid(format!(
                "unknown pattern `{other}`; allowed: blocks, gradients-and-shapes"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SynthPattern::Blocks => "blocks",
            SynthPattern::GradientsAndShapes => "gradients-and-shapes",
        }
    }
}

/// Parameters of a synthetic batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub shape: (usize, usize, usize),
    pub num_classes: usize,
    pub pattern: SynthPattern,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.shape;
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::invalid(format!(
                "synthetic images need (channels >= 1, H >= 4, W >= 4), got {:?}",
                self.shape
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        Ok(())
    }
}

/// Deterministic synthetic batch; labels assigned round-robin over classes.
pub fn synth_batch(spec: &SynthSpec, b: usize) -> Result<LabeledBatch> {
    spec.validate()?;
    if b == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let (c, h, w) = spec.shape;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let class_span = spec.num_classes.max(2) - 1;

    let mut images = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    for i in 0..b {
        let class = i % spec.num_classes;
        let class_frac = class as f64 / class_span as f64;
        let mut data = vec![0.0; c * h * w];
        match spec.pattern {
            SynthPattern::Blocks => {
                // Textured background: a gentle ramp plus low-amplitude
                // pixel noise.
                let base = rng.random_range(0.08..0.3);
                let ramp = rng.random_range(0.05..0.15);
                let noise_amp = 0.0;
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let t = (x as f64 / w as f64 + y as f64 / h as f64) / 2.0;
                            let v = base + ramp * t + noise_amp * rng.random_range(-1.0..1.0);
                            data[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
                        }
                    }
                }
                // Solid rectangle with class-keyed intensity and placement:
                // each class leans toward its own quadrant (with jitter), so
                // classes occupy mostly distinct pixel supports.
                let bh = rng.random_range(h / 3..=h / 2);
                let bw = rng.random_range(w / 3..=w / 2);
                let (qy, qx) = (class % 2, (class / 2) % 2);
                let max_jy = (h / 2).saturating_sub(bh).max(0);
                let max_jx = (w / 2).saturating_sub(bw).max(0);
                let top = (qy * (h - h / 2) + rng.random_range(0..=max_jy)).min(h - bh);
                let left = (qx * (w - w / 2) + rng.random_range(0..=max_jx)).min(w - bw);
                let value = 0.55 + 0.4 * class_frac;
                for ch in 0..c {
                    let tint = (value - 0.08 * ch as f64).clamp(0.0, 1.0);
                    for y in top..top + bh {
                        for x in left..left + bw {
                            data[(ch * h + y) * w + x] = tint;
                        }
                    }
                }
            }
            SynthPattern::GradientsAndShapes => {
                let horizontal = rng.random_range(0..2u32) == 0;
                let lo = rng.random_range(0.05..0.25);
                let hi = rng.random_range(0.45..0.7);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let t = if horizontal { x as f64 / (w - 1) as f64 } else { y as f64 / (h - 1) as f64 };
                            data[(ch * h + y) * w + x] = lo + (hi - lo) * t;
                        }
                    }
                }
                let value = 0.6 + 0.35 * class_frac;
                let cy = rng.random_range(h / 4..3 * h / 4) as f64;
                let cx = rng.random_range(w / 4..3 * w / 4) as f64;
                let radius = (h.min(w) as f64 / 5.0).max(1.5);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let inside = if class % 2 == 0 {
                                // disc
                                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                                (dy * dy + dx * dx).sqrt() <= radius
                            } else {
                                // cross
                                (y as f64 - cy).abs() <= 1.0 || (x as f64 - cx).abs() <= 1.0
                            };
                            if inside {
                                data[(ch * h + y) * w + x] = value.clamp(0.0, 1.0);
                            }
                        }
                    }
                }
            }
        }
        images.push(Tensor::new(vec![c, h, w], data)?);
        labels.push(Label::Class(class));
    }
    LabeledBatch::new(images, labels)
}

/// Write a [0,1] image as binary PGM (one channel) or PPM (three channels),
/// maxval 255, rounding half-up.
pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("write_image expects (C,H,W), got {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("write_image supports 1 or 3 channels, got {c}")));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("write_image input must lie in [0,1]"));
    }
    let quantize = |v: f64| -> u8 { ((v * 255.0 + 0.5).floor() as i64).clamp(0, 255) as u8 };

    let mut bytes = Vec::with_capacity(32 + c * h * w);
    let tag = if c == 1 { "P5" } else { "P6" };
    bytes.extend_from_slice(format!("{tag}\n{w} {h}\n255\n").as_bytes());
    // PGM stores a single plane; PPM interleaves RGB per pixel.
    if c == 1 {
        bytes.extend(image.data().iter().map(|&v| quantize(v)));
    } else {
        let plane = h * w;
        for p in 0..plane {
            for ch in 0..3 {
                bytes.push(quantize(image.data()[ch * plane + p]));
            }
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// One experiment result row. Field order matches the CSV column contract.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub run_id: String,
    pub method: String,
    pub dataset: String,
    pub batch_size: usize,
    pub arch: String,
    pub strategy: String,
    pub schedule_param: String,
    pub alpha: f64,
    pub tv_weight: f64,
    pub iterations: usize,
    pub optimizer: String,
    pub seed: u64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub recr: f64,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: &str = "run_id,method,dataset,batch_size,arch,strategy,schedule_param,alpha,tv_weight,\
iterations,optimizer,seed,rmse_mean,rmse_std,psnr_mean,psnr_std,ssim_mean,ssim_std,recr,final_loss,wall_time_s";

/// Format with six significant digits, plain decimal notation.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".to_string() } else if x > 0.0 { "inf".to_string() } else { "-inf".to_string() };
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = 5 - exponent;
    if decimals >= 0 {
        format!("{:.*}", decimals as usize, x)
    } else {
        let scale = 10f64.powi(-decimals);
        format!("{:.0}", (x / scale).round() * scale)
    }
}

fn csv_field(s: &str) -> Result<&str> {
    if s.contains(',') || s.contains('\n') || s.contains('\r') {
        return Err(Error::invalid(format!("CSV field `{s}` contains a separator character")));
    }
    Ok(s)
}

fn render_row(row: &ReportRow) -> Result<String> {
    Ok(format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        csv_field(&row.run_id)?,
        csv_field(&row.method)?,
        csv_field(&row.dataset)?,
        row.batch_size,
        csv_field(&row.arch)?,
        csv_field(&row.strategy)?,
        csv_field(&row.schedule_param)?,
        fmt_sig6(row.alpha),
        fmt_sig6(row.tv_weight),
        row.iterations,
        csv_field(&row.optimizer)?,
        row.seed,
        fmt_sig6(row.rmse_mean),
        fmt_sig6(row.rmse_std),
        fmt_sig6(row.psnr_mean),
        fmt_sig6(row.psnr_std),
        fmt_sig6(row.ssim_mean),
        fmt_sig6(row.ssim_std),
        fmt_sig6(row.recr),
        fmt_sig6(row.final_loss),
        fmt_sig6(row.wall_time_s),
    ))
}

/// Render the full report: header plus rows sorted by (method, seed).
pub fn render_csv_report(rows: &[ReportRow]) -> Result<String> {
    let mut ordered: Vec<&ReportRow> = rows.iter().collect();
    ordered.sort_by(|a, b| (a.method.as_str(), a.seed).cmp(&(b.method.as_str(), b.seed)));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in ordered {
        out.push_str(&render_row(row)?);
        out.push('\n');
    }
    Ok(out)
}

/// Write the report to disk (UTF-8, sorted, header first).
pub fn write_csv_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let content = render_csv_report(rows)?;
    std::fs::write(path, content.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}
