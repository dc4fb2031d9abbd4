//! On-disk shapes-world dataset.
//!
//! ```text
//! <dir>/manifest.json          image/region metadata (see `Manifest`)
//! <dir>/images/<image_id>.png  8-bit RGB
//! <dir>/masks-NNNNN.bin        RLE counts, little-endian u32, concatenated
//! ```
//!
//! Mask blobs are sharded by image: image `i` writes to shard
//! `i / images_per_shard`. A region's `mask` entry gives the shard, the byte
//! offset and the number of runs; runs are row-major and start with a
//! background run.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::shapes::{concept_specs, generate_shapes_dataset, ImageRecord, Region, SynthConfig};
use crate::error::{Error, Result};
use crate::raster::{BBox, Rle};

pub const MANIFEST_FORMAT: &str = "tap-shapes-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: SynthConfig,
    pub concepts: Vec<String>,
    pub images_per_shard: usize,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub regions: Vec<RegionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionEntry {
    pub region_id: String,
    pub concept: String,
    pub caption: String,
    pub area: usize,
    pub bbox: BBox,
    pub mask: MaskRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRef {
    pub shard: usize,
    pub offset: u64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    config: SynthConfig,
    concepts: Vec<String>,
    records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn synthesize(config: SynthConfig) -> Result<Self> {
        let records = generate_shapes_dataset(&config)?;
        let mut concepts: Vec<String> = concept_specs(config.num_concepts)?
            .iter()
            .map(|s| s.name())
            .collect();
        concepts.sort();
        Ok(Self {
            config,
            concepts,
            records,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// Sorted class list of the generator.
    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn regions(&self) -> impl Iterator<Item = (&ImageRecord, &Region)> {
        self.records
            .iter()
            .flat_map(|r| r.regions.iter().map(move |g| (r, g)))
    }

    pub fn num_regions(&self) -> usize {
        self.records.iter().map(|r| r.regions.len()).sum()
    }

    pub fn save(&self, dir: &Path, images_per_shard: usize) -> Result<()> {
        if images_per_shard == 0 {
            return Err(Error::InvalidConfig("images_per_shard must be positive".into()));
        }
        fs::create_dir_all(dir.join("images"))?;
        let mut images = Vec::with_capacity(self.records.len());
        let mut shard_bufs: Vec<Vec<u8>> = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            let shard = i / images_per_shard;
            if shard_bufs.len() <= shard {
                shard_bufs.push(Vec::new());
            }
            let file = format!("images/{}.png", rec.image_id);
            rec.image.save_with_format(dir.join(&file), image::ImageFormat::Png)?;
            let mut regions = Vec::with_capacity(rec.regions.len());
            for r in &rec.regions {
                let rle = r.mask.to_rle();
                let buf = &mut shard_bufs[shard];
                let offset = buf.len() as u64;
                for c in &rle.counts {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
                regions.push(RegionEntry {
                    region_id: r.region_id.clone(),
                    concept: r.concept.clone(),
                    caption: r.caption.clone(),
                    area: r.mask.area(),
                    bbox: r
                        .mask
                        .bbox()
                        .ok_or_else(|| Error::DegenerateRegion(r.region_id.clone()))?,
                    mask: MaskRef {
                        shard,
                        offset,
                        runs: rle.counts.len(),
                    },
                });
            }
            images.push(ImageEntry {
                image_id: rec.image_id.clone(),
                file,
                width: rec.image.width() as usize,
                height: rec.image.height() as usize,
                regions,
            });
        }
        for (s, buf) in shard_bufs.iter().enumerate() {
            fs::write(dir.join(mask_shard_name(s)), buf)?;
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            config: self.config.clone(),
            concepts: self.concepts.clone(),
            images_per_shard,
            images,
        };
        let mut f = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Corrupt {
                path: dir.join("manifest.json"),
                reason: format!("unknown format {:?}", manifest.format),
            });
        }
        let mut shards: Vec<Option<Vec<u8>>> = Vec::new();
        let mut records = Vec::with_capacity(manifest.images.len());
        for entry in &manifest.images {
            let image = image::open(dir.join(&entry.file))?.to_rgb8();
            let mut regions = Vec::with_capacity(entry.regions.len());
            for r in &entry.regions {
                let s = r.mask.shard;
                if shards.len() <= s {
                    shards.resize(s + 1, None);
                }
                if shards[s].is_none() {
                    shards[s] = Some(fs::read(dir.join(mask_shard_name(s)))?);
                }
                let blob = shards[s].as_ref().expect("loaded above");
                let start = r.mask.offset as usize;
                let end = start + r.mask.runs * 4;
                let bytes = blob.get(start..end).ok_or_else(|| Error::Corrupt {
                    path: dir.join(mask_shard_name(s)),
                    reason: format!("mask of {} out of range", r.region_id),
                })?;
                let counts = bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let mask = Rle {
                    size: [entry.height, entry.width],
                    counts,
                }
                .decode()?;
                regions.push(Region {
                    region_id: r.region_id.clone(),
                    mask,
                    concept: r.concept.clone(),
                    caption: r.caption.clone(),
                });
            }
            records.push(ImageRecord {
                image_id: entry.image_id.clone(),
                image,
                regions,
            });
        }
        Ok(Self {
            config: manifest.config,
            concepts: manifest.concepts,
            records,
        })
    }
}

fn mask_shard_name(shard: usize) -> String {
    format!("masks-{shard:05}.bin")
}
