//! Image segmentation port and a color-clustering stub.

use std::collections::HashMap;
use std::io::Cursor;

use image::RgbImage;

use crate::ingest::SourceImage;
use crate::vision::VisionError;
use crate::BackendIdentity;

pub const STUB_CLUSTERS: usize = 4;
const STUB_ITERATIONS: usize = 20;

/// Per-pixel class ids with a display palette; ids are `< palette.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    width: u32,
    height: u32,
    labels: Vec<u8>,
    palette: Vec<[u8; 3]>,
    pub model_id: BackendIdentity,
}

impl SegmentationMap {
    pub fn new(
        width: u32,
        height: u32,
        labels: Vec<u8>,
        palette: Vec<[u8; 3]>,
        model_id: BackendIdentity,
    ) -> Result<Self, VisionError> {
        if labels.len() != (width * height) as usize {
            return Err(VisionError::InvalidMap("label count does not match dimensions".into()));
        }
        if palette.is_empty() || palette.len() > 256 {
            return Err(VisionError::InvalidMap("palette must hold 1..=256 colors".into()));
        }
        if labels.iter().any(|&l| l as usize >= palette.len()) {
            return Err(VisionError::InvalidMap("label outside palette".into()));
        }
        Ok(Self {
            width,
            height,
            labels,
            palette,
            model_id,
        })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            image::Rgb(self.palette[self.label(x, y) as usize])
        })
    }

    /// Indexed-color PNG.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(self.palette.iter().flatten().copied().collect::<Vec<u8>>());
            let mut writer = enc.write_header().expect("in-memory png header");
            writer
                .write_image_data(&self.labels)
                .expect("in-memory png write");
        }
        out
    }

    pub fn from_png_bytes(bytes: &[u8], model_id: BackendIdentity) -> Result<Self, VisionError> {
        let bad = |e: png::DecodingError| VisionError::InvalidMap(e.to_string());
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(bad)?;
        let info = reader.info();
        if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
            return Err(VisionError::InvalidMap("expected 8-bit indexed png".into()));
        }
        let palette: Vec<[u8; 3]> = info
            .palette
            .as_ref()
            .ok_or_else(|| VisionError::InvalidMap("missing palette".into()))?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| VisionError::InvalidMap("png too large".into()))?;
        let mut buf = vec![0; size];
        let frame = reader.next_frame(&mut buf).map_err(bad)?;
        buf.truncate(frame.buffer_size());
        Self::new(frame.width, frame.height, buf, palette, model_id)
    }
}

pub trait SegmenterPort: Send + Sync {
    fn identity(&self) -> BackendIdentity;
    fn segment(&self, image: &SourceImage) -> Result<SegmentationMap, VisionError>;
}

pub fn segment_image(
    image: &SourceImage,
    backend: &dyn SegmenterPort,
) -> Result<SegmentationMap, VisionError> {
    let map = backend.segment(image)?;
    if map.dimensions() != (image.width(), image.height()) {
        return Err(VisionError::InvalidMap("segmentation size differs from image".into()));
    }
    Ok(map)
}

/// Lloyd's k-means over the image's distinct colors (weighted by pixel
/// count). Initialization is farthest-point from the most frequent color, so
/// the result is fully deterministic and never produces more clusters than
/// there are distinct colors. Empty clusters are dropped and labels
/// compacted.
#[derive(Debug, Clone)]
pub struct StubSegmenter {
    pub k: usize,
}

impl Default for StubSegmenter {
    fn default() -> Self {
        Self { k: STUB_CLUSTERS }
    }
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn nearest(c: [f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    for (j, m) in centroids.iter().enumerate() {
        if d2(c, *m) < d2(c, centroids[best]) {
            best = j;
        }
    }
    best
}

pub fn kmeans_colors(img: &RgbImage, k: usize) -> (Vec<u8>, Vec<[u8; 3]>) {
    let mut counts: HashMap<[u8; 3], u64> = HashMap::new();
    for p in img.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    let mut colors: Vec<([u8; 3], u64)> = counts.into_iter().collect();
    colors.sort();
    let as_f = |c: [u8; 3]| c.map(f64::from);

    let first = colors
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| as_f(*c))
        .unwrap_or([0.0; 3]);
    let mut centroids = vec![first];
    while centroids.len() < k.max(1) {
        let far = colors
            .iter()
            .map(|(c, _)| {
                let c = as_f(*c);
                (centroids.iter().map(|m| d2(c, *m)).fold(f64::MAX, f64::min), c)
            })
            .fold((0.0, [0.0; 3]), |best, cand| if cand.0 > best.0 { cand } else { best });
        if far.0 == 0.0 {
            break;
        }
        centroids.push(far.1);
    }

    let mut assign = vec![usize::MAX; colors.len()];
    for _ in 0..STUB_ITERATIONS {
        let mut changed = false;
        for (i, (c, _)) in colors.iter().enumerate() {
            let j = nearest(as_f(*c), &centroids);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; 3]; centroids.len()];
        let mut weights = vec![0.0f64; centroids.len()];
        for (i, (c, n)) in colors.iter().enumerate() {
            for ch in 0..3 {
                sums[assign[i]][ch] += c[ch] as f64 * *n as f64;
            }
            weights[assign[i]] += *n as f64;
        }
        for (j, m) in centroids.iter_mut().enumerate() {
            if weights[j] > 0.0 {
                *m = sums[j].map(|s| s / weights[j]);
            }
        }
    }

    // compact away empty clusters
    let mut used = vec![false; centroids.len()];
    for &a in &assign {
        used[a] = true;
    }
    let mut remap = vec![0u8; centroids.len()];
    let mut palette = Vec::new();
    for (j, m) in centroids.iter().enumerate() {
        if used[j] {
            remap[j] = palette.len() as u8;
            palette.push(m.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    let lookup: HashMap<[u8; 3], u8> = colors
        .iter()
        .zip(&assign)
        .map(|((c, _), &a)| (*c, remap[a]))
        .collect();
    let labels = img.pixels().map(|p| lookup[&p.0]).collect();
    (labels, palette)
}

impl SegmenterPort for StubSegmenter {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("stub-kmeans-segmenter", format!("k{}", self.k))
    }

    fn segment(&self, image: &SourceImage) -> Result<SegmentationMap, VisionError> {
        let (labels, palette) = kmeans_colors(image.pixels(), self.k);
        SegmentationMap::new(image.width(), image.height(), labels, palette, self.identity())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineSegmenter;

impl SegmenterPort for OfflineSegmenter {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("offline", "0")
    }

    fn segment(&self, _: &SourceImage) -> Result<SegmentationMap, VisionError> {
        Err(VisionError::BackendUnavailable("segmenter offline".into()))
    }
}
