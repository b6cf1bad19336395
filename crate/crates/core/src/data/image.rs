//! 8-bit RGB raster with the few drawing primitives the generator needs.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(color, width * height).flatten().collect();
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Paint every pixel whose center satisfies `inside`, scanning only the given bounds.
    fn paint(&mut self, bounds: [f64; 4], color: [u8; 3], inside: impl Fn(f64, f64) -> bool) {
        let x0 = bounds[0].floor().max(0.0) as usize;
        let y0 = bounds[1].floor().max(0.0) as usize;
        let x1 = (bounds[2].ceil().max(0.0) as usize).min(self.width);
        let y1 = (bounds[3].ceil().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.put(x, y, color);
                }
            }
        }
    }

    pub fn fill_circle(&mut self, cx: f64, cy: f64, r: f64, color: [u8; 3]) {
        self.paint([cx - r, cy - r, cx + r, cy + r], color, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r);
    }

    /// Segment `a`–`b` drawn with the given total thickness and round caps.
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), thickness: f64, color: [u8; 3]) {
        let r = thickness / 2.0;
        let bounds = [a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r];
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        self.paint(bounds, color, |x, y| {
            let t = if len2 > 0.0 { (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (px, py) = (a.0 + t * dx - x, a.1 + t * dy - y);
            px * px + py * py <= r * r
        });
    }

    /// Convex polygon, vertices in either winding order.
    pub fn fill_convex(&mut self, pts: &[(f64, f64)], color: [u8; 3]) {
        let xs = pts.iter().map(|p| p.0);
        let ys = pts.iter().map(|p| p.1);
        let bounds = [
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        ];
        self.paint(bounds, color, |x, y| {
            let mut sign = 0.0f64;
            for (i, a) in pts.iter().enumerate() {
                let b = pts[(i + 1) % pts.len()];
                let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                if cross != 0.0 {
                    if sign != 0.0 && cross.signum() != sign {
                        return false;
                    }
                    sign = cross.signum();
                }
            }
            true
        });
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    /// Decode any 8-bit or 16-bit PNG into RGB (alpha dropped, gray replicated).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img_err = |message: String| Error::Image { path: path.to_path_buf(), message };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(img_err(format!("unsupported color type {other:?}"))),
        };
        let mut data = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            let row = &buf[y * info.line_size..y * info.line_size + w * channels];
            for px in row.chunks_exact(channels) {
                if channels < 3 {
                    data.extend_from_slice(&[px[0]; 3]);
                } else {
                    data.extend_from_slice(&px[..3]);
                }
            }
        }
        Ok(Self { width: w, height: h, data })
    }
}

/// Single-channel 8-bit PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, data)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let img_err = |message: String| Error::Image { path: path.to_path_buf(), message };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| img_err(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| img_err(e.to_string()))?;
    writer.finish().map_err(|e| img_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_cover_expected_pixels() {
        let mut im = RgbImage::filled(20, 20, [0; 3]);
        im.fill_circle(10.0, 10.0, 2.0, [255, 0, 0]);
        assert_eq!(im.get(10, 10), [255, 0, 0]);
        assert_eq!(im.get(13, 10), [0; 3]);
        im.line((0.0, 0.5), (20.0, 0.5), 1.0, [0, 255, 0]);
        assert!((0..20).all(|x| im.get(x, 0) == [0, 255, 0]));
        im.fill_convex(&[(15.0, 15.0), (20.0, 15.0), (20.0, 20.0), (15.0, 20.0)], [0, 0, 255]);
        assert_eq!(im.get(17, 17), [0, 0, 255]);
        assert_eq!(im.get(14, 17), [0; 3]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut im = RgbImage::filled(7, 5, [1, 2, 3]);
        im.put(6, 4, [200, 100, 50]);
        let p = dir.path().join("x.png");
        im.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), im);
        save_gray_png(&p, 2, 1, &[0, 255]).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap().data, vec![0, 0, 0, 255, 255, 255]);
    }
}
