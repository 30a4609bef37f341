use std::ops::{Index, IndexMut};

use ::image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};

/// Row-major `width × height` buffer of per-pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> ImageBuf<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> ImageBuf<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn same_shape<U>(&self, other: &ImageBuf<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T> Index<(usize, usize)> for ImageBuf<T> {
    type Output = T;
    fn index(&self, (x, y): (usize, usize)) -> &T {
        self.at(x, y)
    }
}

impl<T> IndexMut<(usize, usize)> for ImageBuf<T> {
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut T {
        self.at_mut(x, y)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(path: &std::path::Path, bytes: &[u8], w: usize, h: usize, subtype: PnmSubtype) -> crate::Result<()> {
    let color = match subtype {
        PnmSubtype::Pixmap(_) => ::image::ExtendedColorType::Rgb8,
        _ => ::image::ExtendedColorType::L8,
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file).with_subtype(subtype).encode(bytes, w as u32, h as u32, color)?;
    Ok(())
}

/// Writes an RGB image with channels in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &std::path::Path, img: &ImageBuf<nalgebra::Vector3<f64>>) -> crate::Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|c| [to_byte(c.x), to_byte(c.y), to_byte(c.z)]).collect();
    write_pnm(path, &bytes, img.width, img.height, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

/// Writes `img / scale` clamped to `[0, 1]` as binary PGM.
pub fn write_pgm(path: &std::path::Path, img: &ImageBuf<f64>, scale: f64) -> crate::Result<()> {
    let s = if scale > 0.0 { scale } else { 1.0 };
    let bytes: Vec<u8> = img.data.iter().map(|v| to_byte(v / s)).collect();
    write_pnm(path, &bytes, img.width, img.height, PnmSubtype::Graymap(SampleEncoding::Binary))
}
