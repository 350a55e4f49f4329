//! JSON annotation documents shared by the generator, the tiler and training.
//!
//! ```json
//! {
//!   "images": [{"id": 1, "file_name": "img_0000.png", "width": 256, "height": 256}],
//!   "instances": [{"id": 1, "image_id": 1, "category": "lesion", "bbox": [x1, y1, x2, y2]}]
//! }
//! ```
//!
//! Boxes are corner form in pixels. Tile images additionally carry `parent`
//! (source image id and tile origin) and `ignore_regions` (masked areas).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub images: Vec<ImageRecord>,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<TileOrigin>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignore_regions: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileOrigin {
    pub image_id: u64,
    pub x0: usize,
    pub y0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: u64,
    pub image_id: u64,
    pub category: String,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<[f64; 2]>>,
}

impl Instance {
    pub fn to_box(&self) -> Result<BoundingBox> {
        let [x1, y1, x2, y2] = self.bbox;
        BoundingBox::from_corners(x1, y1, x2, y2)
    }
}

impl AnnotationSet {
    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn instances_of(&self, image_id: u64) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.image_id == image_id)
    }

    /// Every instance references a known image and lies inside its bounds
    /// with positive area.
    pub fn validate(&self) -> Result<()> {
        for inst in &self.instances {
            let im = self.image(inst.image_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "instance {} references unknown image {}",
                    inst.id, inst.image_id
                ))
            })?;
            let [x1, y1, x2, y2] = inst.bbox;
            let inside =
                x1 >= 0.0 && y1 >= 0.0 && x2 <= im.width as f64 && y2 <= im.height as f64 && x2 > x1 && y2 > y1;
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "instance {} box {:?} is empty or outside image {} ({}x{})",
                    inst.id, inst.bbox, im.id, im.width, im.height
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        set.validate().map_err(|e| Error::format(path, e))?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("annotation set serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
