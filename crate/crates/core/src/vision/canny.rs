//! Canny edge detection: grayscale, 5×5 Gaussian (σ = 1.4), Sobel
//! gradients, non-maximum suppression, double threshold and hysteresis.

use std::collections::VecDeque;
use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, RgbImage};

use crate::ingest::SourceImage;
use crate::vision::VisionError;

pub const DEFAULT_LOW: f32 = 50.0;
pub const DEFAULT_HIGH: f32 = 150.0;
pub const GAUSSIAN_SIGMA: f32 = 1.4;
const KERNEL_RADIUS: isize = 2;

/// Binary edge mask, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub low_threshold: f32,
    pub high_threshold: f32,
}

impl EdgeMap {
    /// Build from an arbitrary binary mask (non-zero means edge). Used for
    /// conditioning channels that are not Canny output, such as a QR module
    /// grid.
    pub fn from_mask(width: u32, height: u32, mask: Vec<u8>) -> Result<Self, VisionError> {
        if mask.len() != (width * height) as usize {
            return Err(VisionError::InvalidMap(format!(
                "mask has {} pixels, expected {}x{}",
                mask.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: mask.into_iter().map(|v| u8::from(v != 0)).collect(),
            low_threshold: 0.0,
            high_threshold: 1.0,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.pixels[(y * self.width + x) as usize] != 0
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// Fraction of pixels that are edges.
    pub fn density(&self) -> f64 {
        self.count() as f64 / self.pixels.len().max(1) as f64
    }

    /// 8-bit grayscale, edges at 255.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_gray()
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory png encode");
        out.into_inner()
    }

    /// Inverse of [`EdgeMap::to_png_bytes`]; any pixel above 127 is an edge.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, VisionError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| VisionError::InvalidMap(e.to_string()))?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::from_mask(w, h, img.pixels().map(|p| u8::from(p[0] > 127)).collect())
    }
}

pub fn canny_edges(image: &SourceImage, low: f32, high: f32) -> Result<EdgeMap, VisionError> {
    canny_rgb(image.pixels(), low, high)
}

pub fn canny_rgb(image: &RgbImage, low: f32, high: f32) -> Result<EdgeMap, VisionError> {
    let (w, h) = image.dimensions();
    let luma: Vec<f32> = image
        .pixels()
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect();
    canny_luma(&luma, w, h, low, high)
}

pub fn canny_gray(image: &GrayImage, low: f32, high: f32) -> Result<EdgeMap, VisionError> {
    let (w, h) = image.dimensions();
    let luma: Vec<f32> = image.pixels().map(|p| p[0] as f32).collect();
    canny_luma(&luma, w, h, low, high)
}

fn gaussian_kernel() -> [f32; 5] {
    let mut k = [0f32; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f32 - KERNEL_RADIUS as f32;
        *v = (-(x * x) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
    }
    let sum: f32 = k.iter().sum();
    k.map(|v| v / sum)
}

#[inline]
fn clamp_idx(i: isize, n: u32) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn blur(src: &[f32], w: u32, h: u32) -> Vec<f32> {
    let k = gaussian_kernel();
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h as usize {
        for x in 0..w as isize {
            tmp[y * w as usize + x as usize] = (-KERNEL_RADIUS..=KERNEL_RADIUS)
                .map(|d| k[(d + KERNEL_RADIUS) as usize] * src[y * w as usize + clamp_idx(x + d, w)])
                .sum();
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h as isize {
        for x in 0..w as usize {
            out[y as usize * w as usize + x] = (-KERNEL_RADIUS..=KERNEL_RADIUS)
                .map(|d| k[(d + KERNEL_RADIUS) as usize] * tmp[clamp_idx(y + d, h) * w as usize + x])
                .sum();
        }
    }
    out
}

fn canny_luma(luma: &[f32], w: u32, h: u32, low: f32, high: f32) -> Result<EdgeMap, VisionError> {
    if !(low.is_finite() && high.is_finite() && low > 0.0 && low < high) {
        return Err(VisionError::BadThresholds { low, high });
    }
    let smooth = blur(luma, w, h);
    let at = |x: isize, y: isize| smooth[clamp_idx(y, h) * w as usize + clamp_idx(x, w)];

    let n = (w * h) as usize;
    let mut mag = vec![0f32; n];
    let mut dir = vec![0u8; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w as usize + x as usize;
            mag[i] = gx.hypot(gy);
            // quantize gradient direction to 0/45/90/135 degrees
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    let m = |x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w as usize + x as usize]
        }
    };
    let mut thin = vec![0f32; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w as usize + x as usize;
            let v = mag[i];
            if v == 0.0 {
                continue;
            }
            let (a, b) = match dir[i] {
                0 => (m(x - 1, y), m(x + 1, y)),
                1 => (m(x - 1, y - 1), m(x + 1, y + 1)),
                2 => (m(x, y - 1), m(x, y + 1)),
                _ => (m(x + 1, y - 1), m(x - 1, y + 1)),
            };
            if v >= a && v >= b {
                thin[i] = v;
            }
        }
    }

    let mut edges = vec![0u8; n];
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            edges[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w as usize) as isize, (i / w as usize) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w as usize + nx as usize;
                if edges[j] == 0 && thin[j] >= low {
                    edges[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }

    Ok(EdgeMap {
        width: w,
        height: h,
        pixels: edges,
        low_threshold: low,
        high_threshold: high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn square(size: u32, side: u32, ox: u32, oy: u32) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| {
            let inside = x >= ox && x < ox + side && y >= oy && y < oy + side;
            Luma([if inside { 255 } else { 0 }])
        })
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = SourceImage::from_rgb(RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]))).unwrap();
        let e = canny_edges(&img, DEFAULT_LOW, DEFAULT_HIGH).unwrap();
        assert_eq!(e.count(), 0);
        assert_eq!(e.dimensions(), (64, 64));
    }

    #[test]
    fn threshold_validation() {
        let img = GrayImage::new(8, 8);
        assert!(matches!(
            canny_gray(&img, 100.0, 50.0),
            Err(VisionError::BadThresholds { .. })
        ));
        assert!(canny_gray(&img, 0.0, 50.0).is_err());
        assert!(canny_gray(&img, 50.0, 50.0).is_err());
    }

    #[test]
    fn output_is_binary() {
        let e = canny_gray(&square(32, 16, 8, 8), DEFAULT_LOW, DEFAULT_HIGH).unwrap();
        assert!(e.as_slice().iter().all(|&v| v <= 1));
        assert!(e.count() > 0);
    }

    #[test]
    fn png_round_trip() {
        let e = canny_gray(&square(32, 16, 8, 8), DEFAULT_LOW, DEFAULT_HIGH).unwrap();
        let back = EdgeMap::from_png_bytes(&e.to_png_bytes()).unwrap();
        assert_eq!(back.as_slice(), e.as_slice());
    }

    #[test]
    fn mask_size_checked() {
        assert!(EdgeMap::from_mask(4, 4, vec![0; 15]).is_err());
    }
}
