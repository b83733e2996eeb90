//! Planar float images and 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use featinv_tensor::Tensor;

use crate::error::{Error, IoContext, Result};

/// A `[channels, height, width]` image with nominal pixel range `[0, 1]`.
///
/// Values outside the range are kept as-is; quantization and the metrics
/// clamp when they need to.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let tensor = Tensor::try_new(vec![channels, height, width], data)
            .map_err(|e| Error::input(format!("image: {e}")))?;
        Self::from_tensor(tensor)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 || tensor.numel() == 0 {
            return Err(Error::input(format!(
                "image tensor must be non-empty [C, H, W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            tensor: Tensor::full(vec![channels, height, width], value),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn clamped(&self) -> Image {
        Image {
            tensor: self.tensor.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Round to the nearest of the 256 levels an 8-bit PNG can hold.
    pub fn quantized(&self) -> Image {
        Image {
            tensor: self.tensor.map(|v| to_level(v) as f64 / 255.0),
        }
    }

    /// Interleaved 8-bit samples (`HWC` order).
    pub fn to_u8(&self) -> Vec<u8> {
        let [c, h, w] = self.shape();
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(to_level(self.get(ch, y, x)));
                }
            }
        }
        out
    }

    pub fn from_u8(channels: usize, height: usize, width: usize, hwc: &[u8]) -> Result<Self> {
        if hwc.len() != channels * height * width {
            return Err(Error::input(format!(
                "expected {} samples for a {channels}x{height}x{width} image, got {}",
                channels * height * width,
                hwc.len()
            )));
        }
        let mut data = vec![0.0; hwc.len()];
        for y in 0..height {
            for x in 0..width {
                for ch in 0..channels {
                    data[(ch * height + y) * width + x] =
                        hwc[(y * width + x) * channels + ch] as f64 / 255.0;
                }
            }
        }
        Image::new(channels, height, width, data)
    }

    /// Luma (BT.601) on the `[0, 255]` scale, row-major. Single-channel
    /// images pass through.
    pub fn luma255(&self) -> Vec<f64> {
        let [c, h, w] = self.shape();
        let plane = h * w;
        let d = self.data();
        let clamp = |v: f64| v.clamp(0.0, 1.0) * 255.0;
        match c {
            1 => d.iter().map(|&v| clamp(v)).collect(),
            3 => (0..plane)
                .map(|i| {
                    0.299 * clamp(d[i]) + 0.587 * clamp(d[plane + i]) + 0.114 * clamp(d[2 * plane + i])
                })
                .collect(),
            _ => (0..plane)
                .map(|i| (0..c).map(|ch| clamp(d[ch * plane + i])).sum::<f64>() / c as f64)
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels() {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::input(format!("cannot write a {c}-channel PNG"))),
        };
        let file = File::create(path).at(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width() as u32, self.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).at(path)?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        buf.truncate(info.buffer_size());
        let (w, h) = (info.width as usize, info.height as usize);
        let img = match info.color_type {
            png::ColorType::Grayscale => Image::from_u8(1, h, w, &buf)?,
            png::ColorType::Rgb => Image::from_u8(3, h, w, &buf)?,
            png::ColorType::GrayscaleAlpha => {
                let g: Vec<u8> = buf.chunks(2).map(|p| p[0]).collect();
                Image::from_u8(1, h, w, &g)?
            }
            png::ColorType::Rgba => {
                let rgb: Vec<u8> = buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
                Image::from_u8(3, h, w, &rgb)?
            }
            png::ColorType::Indexed => {
                return Err(Error::format(path, "palette PNG was not expanded"));
            }
        };
        Ok(img)
    }
}

fn to_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tile equally-sized images into a grid, `pad` pixels of white between cells.
pub fn image_grid(rows: &[Vec<Image>], pad: usize) -> Result<Image> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::input("image grid needs at least one image"))?;
    let [c, h, w] = first.shape();
    if rows.iter().flatten().any(|im| im.shape() != [c, h, w]) {
        return Err(Error::input("image grid cells must share one shape"));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * h + (rows.len() + 1) * pad;
    let gw = cols * w + (cols + 1) * pad;
    let mut data = vec![1.0; c * gh * gw];
    for (r, row) in rows.iter().enumerate() {
        for (k, im) in row.iter().enumerate() {
            let oy = pad + r * (h + pad);
            let ox = pad + k * (w + pad);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[(ch * gh + oy + y) * gw + ox + x] = im.get(ch, y, x);
                    }
                }
            }
        }
    }
    Image::new(c, gh, gw, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(3, 4, 5, (0..60).map(|i| (i * 4) as f64 / 255.0).collect()).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn grid_dimensions() {
        let a = Image::filled(3, 2, 3, 0.0);
        let g = image_grid(&[vec![a.clone(), a.clone()], vec![a]], 1).unwrap();
        assert_eq!(g.shape(), [3, 7, 9]);
        assert_eq!(g.get(0, 0, 0), 1.0);
        assert_eq!(g.get(0, 1, 1), 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::new(3, 2, 2, vec![0.0; 11]).is_err());
        assert!(Image::from_tensor(Tensor::zeros(vec![4, 4])).is_err());
    }
}
