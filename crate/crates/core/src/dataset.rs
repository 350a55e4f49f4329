//! In-memory training/evaluation samples.

use std::path::Path;

use rayon::prelude::*;

use crate::annotations::AnnotationSet;
use crate::boxgeom::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::Raster;

/// Mean and spread used to normalize `[0, 1]` pixel intensities.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub gts: Vec<BoundingBox>,
    /// Masked areas that must not be sampled as background.
    pub ignore: Vec<BoundingBox>,
}

impl Sample {
    /// Normalized `(1, H, W)` network input.
    pub fn input(&self) -> Tensor {
        let data = self.pixels.iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("pixel buffer matches size")
    }
}

/// Load every image of `set` from `images_dir`, ordered by image id.
pub fn load_samples(set: &AnnotationSet, images_dir: &Path) -> Result<Vec<Sample>> {
    set.validate()?;
    let mut images: Vec<_> = set.images.iter().collect();
    images.sort_by_key(|im| im.id);
    images
        .par_iter()
        .map(|im| {
            let path = images_dir.join(&im.file_name);
            let raster = Raster::load_png(&path)?;
            if raster.width != im.width || raster.height != im.height {
                return Err(Error::format(
                    &path,
                    format!(
                        "pixel size {}x{} disagrees with annotation {}x{}",
                        raster.width, raster.height, im.width, im.height
                    ),
                ));
            }
            let gts = set.instances_of(im.id).map(|i| i.to_box()).collect::<Result<_>>()?;
            let ignore = im
                .ignore_regions
                .iter()
                .map(|r| BoundingBox::from_corners(r[0], r[1], r[2], r[3]))
                .collect::<Result<_>>()?;
            Ok(Sample {
                id: im.id,
                width: im.width,
                height: im.height,
                pixels: raster.luma_f64(),
                gts,
                ignore,
            })
        })
        .collect()
}
