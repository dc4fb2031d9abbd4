//! Shapes-world data, masked crops and the teacher embedding store.

pub mod dataset;
pub mod shapes;
pub mod store;

use crate::error::{Error, Result};
use crate::raster::{Mask, Rgb, RgbImage};
use crate::teacher::SyntheticTeacher;

pub use dataset::Dataset;
pub use shapes::{generate_shapes_dataset, ImageRecord, Region, SynthConfig};
pub use store::{EmbeddingRecord, EmbeddingStore, EmbeddingStoreWriter};

/// Square window covering the mask's tight bounding box.
///
/// The window side is `max(bbox width, bbox height, crop_size)`: small regions
/// are padded with background rather than magnified. The window is centered
/// on the bounding box and may extend past the image border.
fn crop_window(mask: &Mask, crop_size: usize) -> Result<(i64, i64, usize)> {
    let bb = mask
        .bbox()
        .ok_or_else(|| Error::DegenerateRegion("empty mask".into()))?;
    let side = bb.width().max(bb.height()).max(crop_size);
    let x0 = bb.x0 as i64 - ((side - bb.width()) / 2) as i64;
    let y0 = bb.y0 as i64 - ((side - bb.height()) / 2) as i64;
    Ok((x0, y0, side))
}

/// Masked crop: square window around the mask, pixels outside the mask
/// zeroed, nearest-neighbor sampled to `crop_size × crop_size`.
pub fn crop_and_mask(image: &RgbImage, mask: &Mask, crop_size: usize) -> Result<RgbImage> {
    if mask.width() != image.width() as usize || mask.height() != image.height() as usize {
        return Err(Error::DimensionMismatch {
            expected: image.width() as usize * image.height() as usize,
            got: mask.width() * mask.height(),
        });
    }
    if crop_size == 0 {
        return Err(Error::InvalidConfig("crop size must be positive".into()));
    }
    let (x0, y0, side) = crop_window(mask, crop_size)?;
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    Ok(RgbImage::from_fn(crop_size as u32, crop_size as u32, |u, v| {
        let sx = x0 + ((2 * u as usize + 1) * side / (2 * crop_size)) as i64;
        let sy = y0 + ((2 * v as usize + 1) * side / (2 * crop_size)) as i64;
        if sx < 0 || sy < 0 || sx >= w || sy >= h || !mask.get(sx as usize, sy as usize) {
            Rgb([0, 0, 0])
        } else {
            *image.get_pixel(sx as u32, sy as u32)
        }
    }))
}

/// Computes one teacher embedding per region (crop → teacher) and writes
/// them to `writer`. Returns the number of records written.
pub fn precompute_embeddings(
    dataset: &Dataset,
    teacher: &SyntheticTeacher,
    writer: &mut EmbeddingStoreWriter,
) -> Result<usize> {
    let mut n = 0;
    for rec in dataset.records() {
        for region in &rec.regions {
            let emb = teacher
                .encode_masked_crop(&rec.image, &region.mask)
                .map_err(|e| match e {
                    Error::DegenerateRegion(r) => {
                        Error::DegenerateRegion(format!("{}: {r}", region.region_id))
                    }
                    other => other,
                })?;
            writer.push(&region.region_id, &emb.0)?;
            n += 1;
        }
    }
    Ok(n)
}
