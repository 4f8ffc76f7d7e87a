//! 8-bit RGB rasters, the binary PPM (P6) codec and bilinear resizing.

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("bad magic: expected a binary P6 pixmap")]
    BadMagic,
    #[error("unexpected end of data")]
    Truncated,
    #[error("unsupported maxval {0} (only 255 is supported)")]
    BadMaxval(u32),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("image has zero size")]
    ZeroSize,
    #[error("pixel buffer holds {actual} bytes, {width}x{height} RGB needs {expected}")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Rgb = [u8; 3];

/// Row-major RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        let expected = 3 * width * height;
        if pixels.len() != expected {
            return Err(ImageError::BufferSize {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(RasterImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        RasterImage { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Fills the half-open rectangle `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: Rgb) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(x, y, c);
            }
        }
    }

    /// `(1, 3, h, w)` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0f32; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new([1, 3, self.height, self.width], data).expect("shape matches pixel count")
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Result<RasterImage, ImageError> {
        if self.is_empty() || new_w == 0 || new_h == 0 {
            return Err(ImageError::ZeroSize);
        }
        if new_w == self.width && new_h == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let xs: Vec<_> = (0..new_w).map(|x| taps(x, sx, self.width)).collect();
        let mut out = Vec::with_capacity(3 * new_w * new_h);
        for y in 0..new_h {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for &(x0, x1, fx) in &xs {
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                    let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                    let v = top * (1.0 - fy) + bot * fy;
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Ok(RasterImage {
            width: new_w,
            height: new_h,
            pixels: out,
        })
    }

    /// Encodes as binary PPM with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let header = parse_ppm_header(bytes)?;
        let need = 3 * header.width * header.height;
        let payload = bytes
            .get(header.data_offset..header.data_offset + need)
            .ok_or(ImageError::Truncated)?;
        RasterImage::new(header.width, header.height, payload.to_vec())
    }
}

pub struct PpmHeader {
    pub width: usize,
    pub height: usize,
    pub data_offset: usize,
}

/// Parses the P6 header: magic, width, height, maxval, separated by
/// whitespace (with `#` comments), then exactly one whitespace byte.
pub fn parse_ppm_header(bytes: &[u8]) -> Result<PpmHeader, ImageError> {
    if bytes.len() < 2 {
        return Err(if bytes.is_empty() || bytes[0] == b'P' {
            ImageError::Truncated
        } else {
            ImageError::BadMagic
        });
    }
    if &bytes[..2] != b"P6" {
        return Err(ImageError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                None => return Err(ImageError::Truncated),
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::BadHeader(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| ImageError::BadHeader(format!("number '{text}' out of range")))?;
    }
    match bytes.get(pos) {
        None => return Err(ImageError::Truncated),
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(ImageError::BadHeader("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::BadMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::ZeroSize);
    }
    Ok(PpmHeader {
        width: width as usize,
        height: height as usize,
        data_offset: pos,
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage, ImageError> {
    RasterImage::from_ppm(&std::fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, img: &RasterImage) -> Result<(), ImageError> {
    std::fs::write(path, img.to_ppm())?;
    Ok(())
}

/// Width and height from the header alone.
pub fn read_image_size(path: impl AsRef<Path>) -> Result<(usize, usize), ImageError> {
    use std::io::Read;
    let mut head = Vec::with_capacity(256);
    std::fs::File::open(path)?.take(256).read_to_end(&mut head)?;
    let h = parse_ppm_header(&head)?;
    Ok((h.width, h.height))
}
