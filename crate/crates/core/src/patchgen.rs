//! Compact watershed segmentation and bounding-box patch cropping.
//!
//! Seeds sit at cell centres of a near-square grid. Pixels are flooded from
//! the seeds in order of `gradient + compactness * distance_to_seed`, so high
//! compactness drives the segments toward the grid cells while low compactness
//! lets them follow image edges.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SEGMENTS: usize = 9;
pub const DEFAULT_COMPACTNESS: f64 = 1.0;
/// Patches smaller than this on either side are zero-padded.
pub const MIN_PATCH_SIDE: usize = 16;

/// An `height x width x channels` intensity array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut r = Raster::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    r.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        r
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0 || self.channels == 0
    }

    pub fn from_image(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        Raster {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            channels: 3,
            data: rgb.into_raw().into_iter().map(f32::from).collect(),
        }
    }

    /// Convert to 8-bit RGB, replicating a single channel if needed.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                let v = self.get(x, y, c.min(self.channels - 1));
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl SegmentLabelMap {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn n_segments(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| *m as usize + 1)
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.n_segments()];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }
}

/// Inclusive-exclusive bounding box of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub segment_id: u32,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Seed pixels for `n` segments: `ceil(sqrt(n))` columns, as many rows as
/// needed, the last row holding the remainder spread across the width.
pub fn grid_seeds(width: usize, height: usize, n: usize) -> Vec<(usize, usize)> {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut seeds = Vec::with_capacity(n);
    for r in 0..rows {
        let in_row = cols.min(n - r * cols);
        let y = (((r as f64 + 0.5) * height as f64 / rows as f64) as usize).min(height - 1);
        for c in 0..in_row {
            let x = (((c as f64 + 0.5) * width as f64 / in_row as f64) as usize).min(width - 1);
            if !seeds.contains(&(x, y)) {
                seeds.push((x, y));
            }
        }
    }
    seeds
}

/// Channel-max magnitude of forward differences; zero difference past the
/// last row/column.
pub fn gradient_magnitude(image: &Raster) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let mut g = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0.0f64;
            for c in 0..image.channels {
                let v = image.get(x, y, c) as f64;
                let dx = if x + 1 < w { image.get(x + 1, y, c) as f64 - v } else { 0.0 };
                let dy = if y + 1 < h { image.get(x, y + 1, c) as f64 - v } else { 0.0 };
                best = best.max((dx * dx + dy * dy).sqrt());
            }
            g[y * w + x] = best;
        }
    }
    g
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    priority: f64,
    age: u64,
    pixel: usize,
    label: u32,
}

impl Entry {
    fn before(&self, other: &Entry) -> bool {
        if self.priority != other.priority {
            self.priority < other.priority
        } else {
            self.age < other.age
        }
    }
}

/// Binary min-heap on (priority, age). Equal entries are never swapped, so
/// seeds that share priority and age leave in the same order as in the
/// scikit-image flooding.
#[derive(Default)]
struct FloodQueue {
    items: Vec<Entry>,
}

impl FloodQueue {
    fn push(&mut self, e: Entry) {
        self.items.push(e);
        let mut child = self.items.len() - 1;
        while child > 0 {
            let parent = (child - 1) / 2;
            if !self.items[child].before(&self.items[parent]) {
                break;
            }
            self.items.swap(child, parent);
            child = parent;
        }
    }

    fn pop(&mut self) -> Option<Entry> {
        let last = self.items.len().checked_sub(1)?;
        self.items.swap(0, last);
        let top = self.items.pop();
        let n = self.items.len();
        let mut i = 0;
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            if l >= n {
                break;
            }
            let mut smallest = if self.items[l].before(&self.items[i]) { l } else { i };
            if r < n && self.items[r].before(&self.items[smallest]) {
                smallest = r;
            }
            if smallest == i {
                break;
            }
            self.items.swap(i, smallest);
            i = smallest;
        }
        top
    }
}

pub fn compact_watershed(image: &Raster, n_segments: usize, compactness: f64) -> Result<SegmentLabelMap> {
    if image.is_empty() {
        return Err(Error::InvalidArgument("image is empty".into()));
    }
    if n_segments == 0 {
        return Err(Error::InvalidArgument("n_segments must be at least 1".into()));
    }
    let (w, h) = (image.width, image.height);
    if n_segments > w * h {
        return Err(Error::InvalidArgument(format!(
            "{n_segments} segments requested for a {w}x{h} image"
        )));
    }
    if !(compactness >= 0.0 && compactness.is_finite()) {
        return Err(Error::InvalidArgument(format!("compactness {compactness} must be finite and >= 0")));
    }

    let grad = gradient_magnitude(image);
    let seeds = grid_seeds(w, h, n_segments);
    const UNLABELED: u32 = u32::MAX;
    let mut labels = vec![UNLABELED; w * h];
    let mut heap = FloodQueue::default();
    let mut age = 1u64;

    let push_neighbors = |heap: &mut FloodQueue, age: &mut u64, labels: &[u32], p: usize, label: u32, floor: f64| {
        let (x, y) = (p % w, p / w);
        let (sx, sy) = seeds[label as usize];
        let mut visit = |nx: usize, ny: usize| {
            let q = ny * w + nx;
            if labels[q] == UNLABELED {
                let dx = nx as f64 - sx as f64;
                let dy = ny as f64 - sy as f64;
                // Never cheaper than the pixel it spreads from.
                heap.push(Entry {
                    priority: (grad[q] + compactness * (dx * dx + dy * dy).sqrt()).max(floor),
                    age: *age,
                    pixel: q,
                    label,
                });
                *age += 1;
            }
        };
        // Raster order of the neighbour offsets; ties go to the earlier push.
        if y > 0 {
            visit(x, y - 1);
        }
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    };

    // Seeds enter the queue keyed by their own gradient and flood outwards
    // as they are popped, so a low-gradient region can be claimed before a
    // seed sitting on an edge expands.
    for (label, &(x, y)) in seeds.iter().enumerate() {
        let p = y * w + x;
        labels[p] = label as u32;
        heap.push(Entry { priority: grad[p], age: 0, pixel: p, label: label as u32 });
    }
    while let Some(e) = heap.pop() {
        let (sx, sy) = seeds[e.label as usize];
        let is_seed = e.pixel == sy * w + sx;
        if labels[e.pixel] != UNLABELED && !is_seed {
            continue;
        }
        labels[e.pixel] = e.label;
        push_neighbors(&mut heap, &mut age, &labels, e.pixel, e.label, e.priority);
    }
    debug_assert!(labels.iter().all(|&l| l != UNLABELED));
    Ok(SegmentLabelMap {
        width: w,
        height: h,
        labels,
    })
}

/// Tight bounding box of every segment, ordered by segment id.
pub fn segment_boxes(labelmap: &SegmentLabelMap) -> Vec<PatchBox> {
    let mut boxes: Vec<Option<PatchBox>> = vec![None; labelmap.n_segments()];
    for y in 0..labelmap.height {
        for x in 0..labelmap.width {
            let l = labelmap.label(x, y);
            let b = boxes[l as usize].get_or_insert(PatchBox {
                segment_id: l,
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            });
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x + 1);
            b.y1 = b.y1.max(y + 1);
        }
    }
    boxes.into_iter().flatten().collect()
}

/// Crop the bounding box of every segment. Crops smaller than
/// `MIN_PATCH_SIDE` are zero-padded on the right and bottom.
pub fn bbox_crop(image: &Raster, labelmap: &SegmentLabelMap) -> Result<Vec<(PatchBox, Raster)>> {
    if image.width != labelmap.width || image.height != labelmap.height {
        return Err(Error::InvalidArgument(format!(
            "label map is {}x{} but image is {}x{}",
            labelmap.width, labelmap.height, image.width, image.height
        )));
    }
    Ok(segment_boxes(labelmap)
        .into_iter()
        .map(|b| {
            let pw = b.width().max(MIN_PATCH_SIDE);
            let ph = b.height().max(MIN_PATCH_SIDE);
            let mut patch = Raster::new(pw, ph, image.channels);
            for y in 0..b.height() {
                for x in 0..b.width() {
                    for c in 0..image.channels {
                        patch.data[(y * pw + x) * image.channels + c] = image.get(b.x0 + x, b.y0 + y, c);
                    }
                }
            }
            (b, patch)
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: u64,
    pub patch_index: u32,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Segment every image in `images_dir` and write `<image_id>_<patch>.png`
/// crops plus `boxes.jsonl` to `out_dir`. Image ids come from numeric file
/// stems; otherwise from the file's position in sorted order.
pub fn patchify_dir(images_dir: &Path, n_segments: usize, compactness: f64, out_dir: &Path) -> Result<Vec<BoxRecord>> {
    let files = image_files(images_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_image: Vec<Result<Vec<BoxRecord>>> = files
        .par_iter()
        .enumerate()
        .map(|(pos, path)| {
            let image_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok())
                .unwrap_or(pos as u64);
            let img = image::open(path)?;
            let raster = Raster::from_image(&img);
            let labels = compact_watershed(&raster, n_segments, compactness)?;
            let mut records = Vec::new();
            for (t, (b, patch)) in bbox_crop(&raster, &labels)?.into_iter().enumerate() {
                let out = out_dir.join(format!("{image_id}_{t}.png"));
                patch.to_rgb8().save(&out)?;
                records.push(BoxRecord {
                    image_id,
                    patch_index: t as u32,
                    bbox: [b.x0, b.y0, b.x1, b.y1],
                });
            }
            Ok(records)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_image {
        all.extend(r?);
    }
    let boxes_path = out_dir.join("boxes.jsonl");
    let mut f = fs::File::create(&boxes_path).map_err(|e| Error::io(&boxes_path, e))?;
    for r in &all {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&boxes_path, e))?;
    }
    Ok(all)
}
