//! Masked-crop tiling of large annotated images.
//!
//! An image of size `W x H` is cut into `ceil(W/t) * ceil(H/t)` square tiles
//! of side `t` whose origins are spread evenly along each axis, first and
//! last tile flush with the image edges. An instance is kept in a tile only
//! when its box lies entirely inside it; any instance cut by a tile border is
//! painted over with the mask value in that tile (or, in keep-partial mode,
//! kept as a clipped annotation).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationSet, ImageRecord, Instance, TileOrigin};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const DEFAULT_TILE_SIZE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub image_w: usize,
    pub image_h: usize,
    pub tile_size: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl Tile {
    fn bounds(&self) -> [f64; 4] {
        let (x0, y0, s) = (self.x0 as f64, self.y0 as f64, self.size as f64);
        [x0, y0, x0 + s, y0 + s]
    }
}

/// Origins along one axis: `round(i * (len - tile) / (n - 1))`.
fn axis_origins(len: usize, tile: usize) -> Vec<usize> {
    let n = len.div_ceil(tile);
    if n <= 1 {
        return vec![0];
    }
    let span = len - tile;
    let d = n - 1;
    // integer round-half-up of i * span / d
    (0..n).map(|i| (2 * i * span + d) / (2 * d)).collect()
}

pub fn plan_tiles(width: usize, height: usize, tile_size: usize) -> Result<TileGrid> {
    if width == 0 || height == 0 || tile_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "tiling needs positive dimensions, got {width}x{height} tile {tile_size}"
        )));
    }
    Ok(TileGrid {
        image_w: width,
        image_h: height,
        tile_size,
        xs: axis_origins(width, tile_size),
        ys: axis_origins(height, tile_size),
    })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tiles in row-major order.
    pub fn tiles(&self) -> Vec<Tile> {
        let mut out = Vec::with_capacity(self.len());
        for (row, &y0) in self.ys.iter().enumerate() {
            for (col, &x0) in self.xs.iter().enumerate() {
                out.push(Tile {
                    row,
                    col,
                    x0,
                    y0,
                    size: self.tile_size,
                });
            }
        }
        out
    }

    /// Smallest overlap between neighbouring tiles along x and y. An axis
    /// with a single tile reports the tile size.
    pub fn min_overlap(&self) -> (usize, usize) {
        let ov = |o: &[usize]| {
            o.windows(2)
                .map(|w| self.tile_size - (w[1] - w[0]))
                .min()
                .unwrap_or(self.tile_size)
        };
        (ov(&self.xs), ov(&self.ys))
    }
}

/// Half-open integer pixel rectangle in tile coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeptInstance {
    pub instance: usize,
    /// Corner box in tile coordinates.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInstance {
    pub instance: usize,
    /// Overlapping part of the box, in tile coordinates.
    pub clipped: [f64; 4],
    /// Pixels covering `clipped`, rounded outward.
    pub region: PixelRect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileDisposition {
    pub tile: Tile,
    pub kept: Vec<KeptInstance>,
    pub masked: Vec<MaskedInstance>,
}

fn contains(outer: &[f64; 4], b: &[f64; 4]) -> bool {
    b[0] >= outer[0] && b[1] >= outer[1] && b[2] <= outer[2] && b[3] <= outer[3]
}

fn intersect(a: &[f64; 4], b: &[f64; 4]) -> Option<[f64; 4]> {
    let r = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
    (r[2] > r[0] && r[3] > r[1]).then_some(r)
}

/// Sort each instance into kept / masked / absent for every tile.
/// `boxes` are corner-form boxes in image coordinates.
pub fn dispose_instances(grid: &TileGrid, boxes: &[[f64; 4]]) -> Vec<TileDisposition> {
    grid.tiles()
        .into_iter()
        .map(|tile| {
            let t = tile.bounds();
            let (ox, oy) = (t[0], t[1]);
            let mut kept = Vec::new();
            let mut masked = Vec::new();
            for (i, b) in boxes.iter().enumerate() {
                let shifted = |r: [f64; 4]| [r[0] - ox, r[1] - oy, r[2] - ox, r[3] - oy];
                if contains(&t, b) {
                    kept.push(KeptInstance {
                        instance: i,
                        bbox: shifted(*b),
                    });
                } else if let Some(part) = intersect(&t, b) {
                    let clipped = shifted(part);
                    let lim = tile.size as f64;
                    let region = PixelRect {
                        x0: clipped[0].floor().max(0.0) as usize,
                        y0: clipped[1].floor().max(0.0) as usize,
                        x1: clipped[2].ceil().min(lim) as usize,
                        y1: clipped[3].ceil().min(lim) as usize,
                    };
                    masked.push(MaskedInstance {
                        instance: i,
                        clipped,
                        region,
                    });
                }
            }
            TileDisposition { tile, kept, masked }
        })
        .collect()
}

/// Paint every region with `value` (all channels).
pub fn apply_masks(tile: &mut Raster, regions: &[PixelRect], value: u8) -> Result<()> {
    for r in regions {
        if r.x0 > r.x1 || r.y0 > r.y1 || r.x1 > tile.width || r.y1 > tile.height {
            return Err(Error::InvalidArgument(format!(
                "mask region {r:?} outside {}x{} tile",
                tile.width, tile.height
            )));
        }
    }
    let c = tile.channels;
    for r in regions {
        for y in r.y0..r.y1 {
            let start = (y * tile.width + r.x0) * c;
            let end = (y * tile.width + r.x1) * c;
            tile.data[start..end].fill(value);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    #[default]
    Masked,
    KeepPartial,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(MaskMode::Masked),
            "keep-partial" => Ok(MaskMode::KeepPartial),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask mode {other:?} (expected masked or keep-partial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileOptions {
    pub tile_size: usize,
    pub mode: MaskMode,
    pub mask_value: u8,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            mode: MaskMode::Masked,
            mask_value: 0,
        }
    }
}

/// Sutherland-Hodgman clip of a polygon against an axis-aligned rectangle.
fn clip_polygon(poly: &[[f64; 2]], rect: &[f64; 4]) -> Vec<[f64; 2]> {
    let mut pts = poly.to_vec();
    // (axis, bound, keep when coordinate >= bound)
    for (axis, bound, lower) in [
        (0, rect[0], true),
        (0, rect[2], false),
        (1, rect[1], true),
        (1, rect[3], false),
    ] {
        if pts.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| if lower { p[axis] >= bound } else { p[axis] <= bound };
        let mut out = Vec::with_capacity(pts.len() + 2);
        for i in 0..pts.len() {
            let cur = pts[i];
            let prev = pts[(i + pts.len() - 1) % pts.len()];
            let cross = |a: [f64; 2], b: [f64; 2]| {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            };
            match (inside(&prev), inside(&cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
        pts = out;
    }
    pts
}

/// One tile produced from a source image.
#[derive(Debug, Clone)]
pub struct TiledImage {
    pub record: ImageRecord,
    pub instances: Vec<Instance>,
    pub mask_regions: Vec<PixelRect>,
    pub source_id: u64,
    pub tile: Tile,
}

fn tile_file_name(source: &str, tile: &Tile) -> String {
    let stem = Path::new(source)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| source.to_string());
    format!("{stem}_r{}_c{}.png", tile.row, tile.col)
}

/// Tile-level annotation records for one source image; ids are assigned later.
fn tile_image(image: &ImageRecord, instances: &[&Instance], opts: &TileOptions) -> Result<Vec<TiledImage>> {
    let grid = plan_tiles(image.width, image.height, opts.tile_size)?;
    let boxes: Vec<[f64; 4]> = instances.iter().map(|i| i.bbox).collect();
    let mut out = Vec::with_capacity(grid.len());
    for disp in dispose_instances(&grid, &boxes) {
        let tile = disp.tile;
        let (ox, oy) = (tile.x0 as f64, tile.y0 as f64);
        let shift_poly = |poly: &[[f64; 2]]| -> Vec<[f64; 2]> { poly.iter().map(|p| [p[0] - ox, p[1] - oy]).collect() };
        let mut tile_instances: Vec<(usize, Instance)> = disp
            .kept
            .iter()
            .map(|k| {
                let src = instances[k.instance];
                (
                    k.instance,
                    Instance {
                        id: 0,
                        image_id: 0,
                        category: src.category.clone(),
                        bbox: k.bbox,
                        polygon: src.polygon.as_deref().map(shift_poly),
                    },
                )
            })
            .collect();
        let mut ignore_regions = Vec::new();
        let mut mask_regions = Vec::new();
        match opts.mode {
            MaskMode::Masked => {
                for m in &disp.masked {
                    ignore_regions.push(m.clipped);
                    mask_regions.push(m.region);
                }
            }
            MaskMode::KeepPartial => {
                let local = [0.0, 0.0, tile.size as f64, tile.size as f64];
                for m in &disp.masked {
                    let src = instances[m.instance];
                    let polygon = src
                        .polygon
                        .as_deref()
                        .map(|p| clip_polygon(&shift_poly(p), &local))
                        .filter(|p| p.len() >= 3);
                    tile_instances.push((
                        m.instance,
                        Instance {
                            id: 0,
                            image_id: 0,
                            category: src.category.clone(),
                            bbox: m.clipped,
                            polygon,
                        },
                    ));
                }
                tile_instances.sort_by_key(|(i, _)| *i);
            }
        }
        out.push(TiledImage {
            record: ImageRecord {
                id: 0,
                file_name: tile_file_name(&image.file_name, &tile),
                width: tile.size,
                height: tile.size,
                parent: Some(TileOrigin {
                    image_id: image.id,
                    x0: tile.x0,
                    y0: tile.y0,
                }),
                ignore_regions,
            },
            instances: tile_instances.into_iter().map(|(_, i)| i).collect(),
            mask_regions,
            source_id: image.id,
            tile,
        });
    }
    Ok(out)
}

/// Tile every image of `set`, ordered by (source image id, tile row, tile column).
/// Tile images and instances are renumbered from 1.
pub fn plan_dataset(set: &AnnotationSet, opts: &TileOptions) -> Result<Vec<TiledImage>> {
    set.validate()?;
    let mut images: Vec<&ImageRecord> = set.images.iter().collect();
    images.sort_by_key(|im| im.id);
    let per_image: Vec<Vec<TiledImage>> = images
        .par_iter()
        .map(|im| {
            let inst: Vec<&Instance> = set.instances_of(im.id).collect();
            tile_image(im, &inst, opts)
        })
        .collect::<Result<_>>()?;
    let mut next_image = 1;
    let mut next_instance = 1;
    let mut tiles: Vec<TiledImage> = per_image.into_iter().flatten().collect();
    for t in &mut tiles {
        t.record.id = next_image;
        for inst in &mut t.instances {
            inst.id = next_instance;
            inst.image_id = next_image;
            next_instance += 1;
        }
        next_image += 1;
    }
    Ok(tiles)
}

/// Annotation document for the tiled dataset.
pub fn emit_tiled_dataset(set: &AnnotationSet, opts: &TileOptions) -> Result<AnnotationSet> {
    Ok(collect_annotations(&plan_dataset(set, opts)?))
}

fn collect_annotations(tiles: &[TiledImage]) -> AnnotationSet {
    AnnotationSet {
        images: tiles.iter().map(|t| t.record.clone()).collect(),
        instances: tiles.iter().flat_map(|t| t.instances.clone()).collect(),
    }
}

/// Summary of a tiling run written to disk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileSummary {
    pub source_images: usize,
    pub tiles: usize,
    pub source_instances: usize,
    pub emitted_instances: usize,
    pub masked_regions: usize,
}

/// Tile a dataset on disk: reads source PNGs from `images_dir`, writes tile
/// PNGs under `out_dir/images/` and `out_dir/annotations.json`.
pub fn tile_directory(
    set: &AnnotationSet,
    images_dir: &Path,
    out_dir: &Path,
    opts: &TileOptions,
) -> Result<TileSummary> {
    let tiles = plan_dataset(set, opts)?;
    let img_out = out_dir.join("images");
    std::fs::create_dir_all(&img_out).map_err(|e| Error::io(&img_out, e))?;

    let mut sources: Vec<&ImageRecord> = set.images.iter().collect();
    sources.sort_by_key(|im| im.id);
    sources.par_iter().try_for_each(|src| -> Result<()> {
        let path = images_dir.join(&src.file_name);
        let raster = Raster::load_png(&path)?;
        if raster.width != src.width || raster.height != src.height {
            return Err(Error::format(
                &path,
                format!(
                    "pixel size {}x{} disagrees with annotation {}x{}",
                    raster.width, raster.height, src.width, src.height
                ),
            ));
        }
        for t in tiles.iter().filter(|t| t.source_id == src.id) {
            let mut crop = raster.crop_padded(t.tile.x0, t.tile.y0, t.tile.size, opts.mask_value);
            apply_masks(&mut crop, &t.mask_regions, opts.mask_value)?;
            crop.save_png(&img_out.join(&t.record.file_name))?;
        }
        Ok(())
    })?;

    let ann = collect_annotations(&tiles);
    ann.save(&out_dir.join("annotations.json"))?;
    Ok(TileSummary {
        source_images: set.images.len(),
        tiles: tiles.len(),
        source_instances: set.instances.len(),
        emitted_instances: ann.instances.len(),
        masked_regions: tiles.iter().map(|t| t.mask_regions.len()).sum(),
    })
}
