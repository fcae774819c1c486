use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Planar image with intensities in `[0, 1]`, channel-major (`C × H × W`).
#[derive(Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({}×{}×{})", self.channels, self.height, self.width)
    }
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "frame {channels}×{height}×{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-channel mean intensity.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| {
                let p = self.plane(c);
                p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64
            })
            .collect()
    }

    /// Mirror left to right.
    pub fn flip_horizontal(&mut self) {
        let w = self.width;
        for row in self.data.chunks_mut(w) {
            row.reverse();
        }
    }

    /// Snap every value to the nearest multiple of 1/255 so that 8-bit
    /// export is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize(*v);
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => {
                return Err(Error::invalid(format!(
                    "cannot write {c}-channel frame as PNG"
                )))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut bytes = Vec::with_capacity(self.data.len());
        let n = self.width * self.height;
        for i in 0..n {
            for c in 0..self.channels {
                bytes.push(to_byte(self.data[c * n + i]));
            }
        }
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        w.finish().map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = dec
            .read_info()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path, "only 8-bit images are supported"));
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(Error::format(
                    path,
                    format!("unsupported color type {other:?}"),
                ))
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let n = w * h;
        let mut data = vec![0.0f32; n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = buf[i * channels + c] as f32 / 255.0;
            }
        }
        Frame::new(w, h, channels, data)
    }
}

pub fn quantize(v: f32) -> f32 {
    to_byte(v) as f32 / 255.0
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Frame::new(5, 3, 1, (0..15).map(|i| i as f32 / 14.0).collect()).unwrap();
        f.quantize();
        let p = dir.path().join("a.png");
        f.write_png(&p).unwrap();
        assert_eq!(Frame::read_png(&p).unwrap(), f);
    }

    #[test]
    fn flip_reverses_rows() {
        let mut f = Frame::new(3, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        f.flip_horizontal();
        assert_eq!(f.data, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}
