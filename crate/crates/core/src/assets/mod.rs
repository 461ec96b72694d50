//! PNG images, masks and heatmaps, the run configuration file and per-step
//! loss logs. Every write goes through a temporary file in the target
//! directory followed by a rename.

mod config;
mod log;

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::Array2;

pub use self::config::{
    BackendSection, BackendSelector, CompositionSection, ConditionKind, ConditionsSection,
    HarmonizationSection, IoSection, RemovalSection, RunConfig,
};
pub use self::log::{sig6, LossLog, LossRow, LOG_HEADER};

use crate::error::{Error, Result};
use crate::pipeline::{Phase, Stage};
use crate::tensor::{resize_bilinear, resize_nearest, ImageTensor, PixelMask};

pub const BACKGROUND_FILE: &str = "background.png";
pub const PASTE_FILE: &str = "paste.png";
pub const PASTE_MASK_FILE: &str = "paste_mask.png";
pub const HARMONIZED_FILE: &str = "harmonized.png";
pub const RESULT_FILE: &str = "result.png";
pub const ERROR_MANIFEST_FILE: &str = "error.json";

pub fn log_file(phase: Phase) -> &'static str {
    match phase {
        Phase::Removal => "removal_loss.csv",
        Phase::Harmonization => "harmonization_loss.csv",
        Phase::Composition => "composition_loss.csv",
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            source: image::ImageError::Unsupported(
                image::error::UnsupportedError::from_format_and_kind(
                    image::error::ImageFormatHint::PathExtension(path.to_path_buf()),
                    image::error::UnsupportedErrorKind::GenericFeature("only PNG input is supported".into()),
                ),
            ),
        });
    }
    reader.decode().map_err(|e| image_err(path, e))
}

/// Reads an 8- or 16-bit PNG as RGB in [0, 1], dropping alpha, resized
/// bilinearly to `resolution` when given.
pub fn read_image(path: impl AsRef<Path>, resolution: Option<(usize, usize)>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let rgb = open(path)?.into_rgb16();
    let (w, h) = rgb.dimensions();
    let img = ImageTensor::from_fn(h as usize, w as usize, |y, x, c| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 65535.0
    });
    Ok(match resolution {
        Some((rh, rw)) => resize_bilinear(&img, rh, rw).clamped(),
        None => img,
    })
}

/// Reads a grayscale PNG mask, resizes nearest-neighbor to `resolution` and
/// binarizes at pixel value > 127. An empty result is allowed but logged.
pub fn read_mask(path: impl AsRef<Path>, resolution: Option<(usize, usize)>) -> Result<PixelMask> {
    let path = path.as_ref();
    let gray = open(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    let raw = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(gray.get_pixel(x as u32, y as u32)[0])
    });
    let raw = match resolution {
        Some((rh, rw)) => resize_nearest(&raw, rh, rw),
        None => raw,
    };
    let mask = PixelMask::new(raw.mapv(|v| if v > 127.0 { 1.0 } else { 0.0 }));
    if mask.is_empty() {
        ::log::warn!("mask {} selects no pixels", path.display());
    }
    Ok(mask)
}

/// Writes through a temporary file in the destination directory, renamed
/// into place only after `fill` succeeds.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut fs::File) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    fill(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.as_file_mut().flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_png(path: &Path, image: DynamicImage) -> Result<()> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, |f| f.write_all(&bytes))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG, values clamped to [0, 1].
pub fn write_image(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let (h, w) = img.resolution();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|c| quantize(img.data[[y, x, c]])))
    });
    write_png(path.as_ref(), DynamicImage::ImageRgb8(buf))
}

/// Grayscale PNG, 0 or 255.
pub fn write_mask(path: impl AsRef<Path>, mask: &PixelMask) -> Result<()> {
    let (h, w) = mask.resolution();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.data[[y as usize, x as usize]] > 0.5 { 255 } else { 0 }])
    });
    write_png(path.as_ref(), DynamicImage::ImageLuma8(buf))
}

/// Grayscale PNG of the min-max normalized map; a constant map becomes
/// uniform mid-gray.
pub fn write_heatmap(path: impl AsRef<Path>, map: &Array2<f64>) -> Result<()> {
    let norm = crate::pipeline::normalize_map(map);
    let (h, w) = norm.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([quantize(norm[[y as usize, x as usize]])])
    });
    write_png(path.as_ref(), DynamicImage::ImageLuma8(buf))
}

#[derive(serde::Serialize)]
struct ErrorManifest<'a> {
    stage: Stage,
    kind: &'a str,
    message: String,
}

/// `error.json` describing why a run stopped.
pub fn write_error_manifest(dir: &Path, stage: Stage, error: &Error) -> Result<()> {
    let kind = if error.is_validation() { "validation" } else { "runtime" };
    let manifest = ErrorManifest {
        stage,
        kind,
        message: error.to_string(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(ERROR_MANIFEST_FILE), |f| f.write_all(text.as_bytes()))
}
