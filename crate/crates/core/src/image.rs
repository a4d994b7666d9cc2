use std::io::Cursor;

use ndarray::{Array2, Array3, ArrayView1};

use crate::error::{Error, Result};

pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_CHANNELS: usize = 3;

/// An `H×W×C` image in `[-1, 1]`. Noised intermediates reuse the type and may
/// leave that range; [`ImageSample::is_in_range`] tells them apart.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pixels: Array3<f32>,
}

impl ImageSample {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite pixel {v}")));
        }
        Ok(Self { pixels })
    }

    pub(crate) fn from_array_unchecked(pixels: Array3<f32>) -> Self {
        Self { pixels }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            pixels: Array3::zeros((height, width, channels)),
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            pixels: Array3::from_elem((height, width, channels), value),
        }
    }

    /// Rebuilds an image from a flattened row in `H, W, C` order.
    pub fn from_flat(row: ArrayView1<f32>, height: usize, width: usize, channels: usize) -> Self {
        let pixels = Array3::from_shape_vec((height, width, channels), row.to_vec())
            .expect("row length matches image shape");
        Self { pixels }
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn is_in_range(&self) -> bool {
        self.pixels.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| v.clamp(-1.0, 1.0)),
        }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.pixels.iter().copied().collect()
    }

    /// Stacks images into a `batch × (H·W·C)` matrix.
    pub fn stack(images: &[ImageSample]) -> Result<Array2<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("empty image batch".into()))?;
        let len = first.len();
        let mut out = Array2::zeros((images.len(), len));
        for (mut row, img) in out.rows_mut().into_iter().zip(images) {
            if img.pixels.dim() != first.pixels.dim() {
                return Err(Error::Shape(format!(
                    "{:?} vs {:?}",
                    img.pixels.dim(),
                    first.pixels.dim()
                )));
            }
            row.iter_mut()
                .zip(img.pixels.iter())
                .for_each(|(o, v)| *o = *v);
        }
        Ok(out)
    }

    /// 8-bit PNG encoding of the clamped image (RGB for three channels).
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (h, w, c) = self.pixels.dim();
        let color = match c {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            _ => return Err(Error::Shape(format!("cannot encode {c} channels as PNG"))),
        };
        let data: Vec<u8> = self.pixels.iter().map(|v| quantize(*v)).collect();
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Format(e.to_string()))?;
            writer
                .write_image_data(&data)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Format(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        let c = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => return Err(Error::Format(format!("unsupported color type {other:?}"))),
        };
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format("only 8-bit PNG supported".into()));
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let pixels = Array3::from_shape_vec(
            (h, w, c),
            buf[..h * w * c].iter().map(|b| dequantize(*b)).collect(),
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { pixels })
    }

    /// Contact sheet: images row-major in `cols` columns, each upscaled by
    /// `scale` (nearest neighbour), separated by one black line.
    pub fn grid(images: &[ImageSample], cols: usize, scale: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Argument("empty image grid".into()))?;
        if cols == 0 || scale == 0 {
            return Err(Error::Argument("grid needs cols and scale >= 1".into()));
        }
        let (h, w, c) = first.pixels.dim();
        let rows = images.len().div_ceil(cols);
        let (ch, cw) = (h * scale + 1, w * scale + 1);
        let mut out = Array3::from_elem((rows * ch - 1, cols.min(images.len()) * cw - 1, c), -1.0f32);
        for (k, img) in images.iter().enumerate() {
            if img.pixels.dim() != (h, w, c) {
                return Err(Error::Shape(format!("{:?} vs {:?}", img.pixels.dim(), (h, w, c))));
            }
            let (oy, ox) = ((k / cols) * ch, (k % cols) * cw);
            for ((y, x, ch_), v) in out
                .slice_mut(ndarray::s![oy..oy + h * scale, ox..ox + w * scale, ..])
                .indexed_iter_mut()
            {
                *v = img.pixels[[y / scale, x / scale, ch_]];
            }
        }
        Ok(Self { pixels: out })
    }

    /// The image as it survives an 8-bit PNG round trip.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| dequantize(quantize(v))),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let mut img = ImageSample::zeros(4, 5, 3);
        img.pixels[[1, 2, 0]] = 0.5;
        img.pixels[[3, 4, 2]] = -1.0;
        img.pixels[[0, 0, 1]] = 1.0;
        let bytes = img.to_png().unwrap();
        let back = ImageSample::from_png(&bytes).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(back.quantized(), back);
    }

    #[test]
    fn stack_checks_shapes() {
        let a = ImageSample::zeros(2, 2, 3);
        let b = ImageSample::zeros(2, 3, 3);
        assert!(ImageSample::stack(&[a.clone(), b]).is_err());
        assert!(ImageSample::stack(&[]).is_err());
        let m = ImageSample::stack(&[a.clone(), a]).unwrap();
        assert_eq!(m.dim(), (2, 12));
    }

    #[test]
    fn grid_layout() {
        let a = ImageSample::filled(2, 2, 3, 0.5);
        let b = ImageSample::filled(2, 2, 3, 0.25);
        let g = ImageSample::grid(&[a.clone(), b, a], 2, 2).unwrap();
        assert_eq!(g.pixels.dim(), (9, 9, 3));
        assert_eq!(g.pixels[[0, 0, 0]], 0.5);
        assert_eq!(g.pixels[[3, 8, 1]], 0.25);
        assert_eq!(g.pixels[[4, 0, 0]], -1.0, "separator");
        assert_eq!(g.pixels[[5, 5, 0]], -1.0, "empty cell");
        assert_eq!(g.pixels[[8, 3, 2]], 0.5);
        assert!(ImageSample::grid(&[], 2, 1).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = Array3::zeros((1, 1, 3));
        p[[0, 0, 0]] = f32::NAN;
        assert!(ImageSample::new(p).is_err());
    }
}
