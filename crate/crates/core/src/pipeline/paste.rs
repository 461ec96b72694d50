use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bilinear_sample, check_same_resolution, nearest_index, BBox, ImageTensor, PixelMask};

/// Where the object lands in the background.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum PlacementSpec {
    /// Scale the object's bounding box to fit inside the region's bounding
    /// box, aspect ratio preserved, centered.
    #[default]
    BboxFit,
    /// Top-left corner `(y, x)` of the scaled object box and a scale factor.
    Explicit { offset: (usize, usize), scale: f64 },
}

/// Copy-paste composite `(I_p, M_p)` of the masked object onto `background`.
///
/// Object pixels are resampled bilinearly; the mask footprint is transported
/// nearest-neighbor so it stays binary.
pub fn paste_object(
    background: &ImageTensor,
    object: &ImageTensor,
    object_mask: &PixelMask,
    region_mask: &PixelMask,
    placement: PlacementSpec,
) -> Result<(ImageTensor, PixelMask)> {
    check_same_resolution(object.resolution(), object_mask.resolution(), "object and its mask")?;
    check_same_resolution(background.resolution(), region_mask.resolution(), "background and region mask")?;
    let src = object_mask
        .bbox()
        .ok_or_else(|| Error::EmptyMask("object mask selects no pixels".into()))?;
    let (bh, bw) = background.resolution();

    let (oy, ox, oh, ow) = match placement {
        PlacementSpec::BboxFit => {
            let dst = region_mask
                .bbox()
                .ok_or_else(|| Error::EmptyMask("region mask selects no pixels".into()))?;
            let scale = (dst.height as f64 / src.height as f64).min(dst.width as f64 / src.width as f64);
            let oh = scaled_len(src.height, scale).min(dst.height);
            let ow = scaled_len(src.width, scale).min(dst.width);
            (dst.y + (dst.height - oh) / 2, dst.x + (dst.width - ow) / 2, oh, ow)
        }
        PlacementSpec::Explicit { offset, scale } => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::Config(format!("placement scale must be > 0, got {scale}")));
            }
            let oh = scaled_len(src.height, scale);
            let ow = scaled_len(src.width, scale);
            if offset.0 + oh > bh || offset.1 + ow > bw {
                return Err(Error::Config(format!(
                    "placed object {oh}×{ow} at {offset:?} leaves the {bh}×{bw} image"
                )));
            }
            (offset.0, offset.1, oh, ow)
        }
    };

    let mut image = background.clone();
    let mut footprint = PixelMask::zeros(bh, bw);
    let BBox { y: sy, x: sx, height: sh, width: sw } = src;
    let ry = sh as f64 / oh as f64;
    let rx = sw as f64 / ow as f64;
    for i in 0..oh {
        let my = sy + nearest_index(i, sh, oh);
        let fy = sy as f64 + (i as f64 + 0.5) * ry - 0.5;
        for j in 0..ow {
            let mx = sx + nearest_index(j, sw, ow);
            if object_mask.data[[my, mx]] <= 0.5 {
                continue;
            }
            let fx = sx as f64 + (j as f64 + 0.5) * rx - 0.5;
            let (y, x) = (oy + i, ox + j);
            footprint.data[[y, x]] = 1.0;
            for c in 0..3 {
                image.data[[y, x, c]] = bilinear_sample(&object.data, fy, fx, c);
            }
        }
    }
    Ok((image, footprint))
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}
