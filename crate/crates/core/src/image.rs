//! 8-bit RGB images, pixel/network-domain conversion and file codecs.

use std::io::Cursor;
use std::path::Path;

use naturalize_autodiff::{Float, Tensor, TensorError};
use thiserror::Error;

/// Raw network outputs are clamped to this magnitude before denormalizing.
pub const OUTPUT_CLAMP: f64 = 1.8;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("PNM: {0}")]
    Pnm(String),
    #[error("PNG: {0}")]
    Png(String),
    #[error("unrecognized image format")]
    UnknownFormat,
    #[error("bad image: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interleaved RGB, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PixelImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for PixelImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PixelImage({}x{})", self.width, self.height)
    }
}

impl PixelImage {
    pub fn from_rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(ImageError::Invalid(format!("{} bytes for {width}x{height} RGB", data.len())));
        }
        Ok(PixelImage { width, height, data })
    }

    /// Replicates each gray value into all three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self, ImageError> {
        if gray.len() != width * height {
            return Err(ImageError::Invalid(format!("{} bytes for {width}x{height} gray", gray.len())));
        }
        PixelImage::from_rgb(width, height, gray.iter().flat_map(|&g| [g, g, g]).collect())
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        PixelImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn is_grayscale(&self) -> bool {
        self.data.chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2])
    }

    /// `round(0.299 R + 0.587 G + 0.114 B)` per pixel; gray pixels map to themselves.
    pub fn luma(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .map(|p| {
                if p[0] == p[1] && p[1] == p[2] {
                    return p[0];
                }
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                round_half_up(y).clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    pub fn mirror_horizontal(&self) -> Self {
        PixelImage::from_fn(self.width, self.height, |x, y| self.pixel(self.width - 1 - x, y))
    }

    /// Bilinear resampling with half-pixel centers; a no-op at native size.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sample = |pos: usize, out: usize, src: usize| {
            let f = ((pos as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i = f.floor() as usize;
            (i, (i + 1).min(src - 1), f - i as f64)
        };
        PixelImage::from_fn(width, height, |x, y| {
            let (x0, x1, fx) = sample(x, width, self.width);
            let (y0, y1, fy) = sample(y, height, self.height);
            let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
            std::array::from_fn(|ch| {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                round_half_up(top * (1.0 - fy) + bottom * fy).clamp(0.0, 255.0) as u8
            })
        })
    }
}

pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// `[0,255] -> [-1,1]`.
pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Clamp to `±OUTPUT_CLAMP`, invert [`normalize`], round half up, clip to `[0,255]`.
pub fn denormalize(x: f64) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP) };
    round_half_up((x + 1.0) * 127.5).clamp(0.0, 255.0) as u8
}

/// Stacks equally sized images into a normalized `[N,3,H,W]` batch.
pub fn to_batch<T: Float>(images: &[&PixelImage]) -> Result<Tensor<T>, TensorError> {
    let Some(first) = images.first() else {
        return Err(TensorError::Dimension { op: "to_batch", detail: "empty image list".into() });
    };
    let (w, h) = (first.width, first.height);
    if let Some(bad) = images.iter().find(|im| im.width != w || im.height != h) {
        return Err(TensorError::Dimension {
            op: "to_batch",
            detail: format!("image {}x{} in a {w}x{h} batch", bad.width, bad.height),
        });
    }
    let plane = w * h;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    for (n, im) in images.iter().enumerate() {
        for (p, px) in im.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * plane + p] = T::from_f64_lossy(normalize(px[c]));
            }
        }
    }
    Tensor::new([images.len(), 3, h, w], data)
}

/// Inverse of [`to_batch`] through [`denormalize`].
pub fn from_batch<T: Float>(batch: &Tensor<T>) -> Result<Vec<PixelImage>, TensorError> {
    let &[n, 3, h, w] = batch.shape() else {
        return Err(TensorError::Dimension {
            op: "from_batch",
            detail: format!("expected [N,3,H,W], got {:?}", batch.shape()),
        });
    };
    let plane = h * w;
    let d = batch.data();
    Ok((0..n)
        .map(|i| {
            let mut rgb = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    rgb.push(denormalize(d[(i * 3 + c) * plane + p].to_f64_lossy()));
                }
            }
            PixelImage { width: w, height: h, data: rgb }
        })
        .collect())
}

/// Binary PPM (P6) or PGM (P5) with maxval up to 255; gray becomes 3 equal channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<PixelImage, ImageError> {
    let err = |m: &str| ImageError::Pnm(m.to_string());
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(err("not a binary PPM/PGM")),
    };
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in &mut header {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *slot = digits.parse().map_err(|_| err("bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("missing whitespace after header"));
    }
    pos += 1;
    let [width, height, maxval] = header;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(err("unsupported dimensions or maxval"));
    }
    let count =
        width.checked_mul(height).and_then(|n| n.checked_mul(channels)).ok_or_else(|| err("dimensions overflow"))?;
    let raster = bytes.get(pos..).filter(|r| r.len() >= count).ok_or_else(|| err("truncated raster"))?;
    let scale = |v: u8| -> Result<u8, ImageError> {
        if v as usize > maxval {
            return Err(err("sample exceeds maxval"));
        }
        Ok(if maxval == 255 { v } else { round_half_up(v as f64 * 255.0 / maxval as f64) as u8 })
    };
    let samples = raster[..count].iter().map(|&v| scale(v)).collect::<Result<Vec<u8>, _>>()?;
    if channels == 1 {
        PixelImage::from_gray(width, height, &samples)
    } else {
        PixelImage::from_rgb(width, height, samples)
    }
}

pub fn encode_ppm(image: &PixelImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn encode_pgm(gray: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<PixelImage, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Png(e.to_string()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    PixelImage::from_rgb(w as usize, h as usize, img.into_raw())
}

pub fn encode_png(image: &PixelImage) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    image::write_buffer_with_format(
        &mut Cursor::new(&mut out),
        &image.data,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| ImageError::Png(e.to_string()))?;
    Ok(out)
}

/// Sniffs PNG or PNM from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<PixelImage, ImageError> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(ImageError::UnknownFormat)
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<PixelImage, ImageError> {
    decode_image(&std::fs::read(path)?)
}

/// Writes PNG, or PPM when the extension is `.ppm`.
pub fn write_image(path: impl AsRef<Path>, image: &PixelImage) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(image),
        _ => encode_png(image)?,
    };
    Ok(std::fs::write(path, bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PixelImage {
        PixelImage::from_fn(5, 3, |x, y| [(x * 50) as u8, (y * 90) as u8, (x * y * 17) as u8])
    }

    #[test]
    fn denormalize_fixed_points() {
        let px: Vec<u8> = [-2.5, -1.8, 0.0, 1.0, 1.8, 2.5].iter().map(|&x| denormalize(x)).collect();
        assert_eq!(px, [0, 0, 128, 255, 255, 255]);
        assert_eq!(denormalize(-1.0), 0);
        assert_eq!(denormalize(f64::NAN), 128);
    }

    #[test]
    fn normalize_round_trips_every_level() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
            assert_eq!(denormalize(normalize(v) as f32 as f64), v);
        }
    }

    #[test]
    fn batch_round_trip() {
        let a = sample();
        let b = a.mirror_horizontal();
        let t = to_batch::<f32>(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 3, 5]);
        assert_eq!(from_batch(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let a = sample();
        assert_eq!(decode_image(&encode_ppm(&a)).unwrap(), a);
        assert_eq!(decode_image(&encode_png(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn pgm_loads_as_three_equal_channels() {
        let gray = [0u8, 10, 200, 255, 7, 9];
        let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&gray);
        let im = decode_pnm(&bytes).unwrap();
        assert!(im.is_grayscale());
        assert_eq!(im.luma(), gray);
        assert_eq!(decode_pnm(&encode_pgm(&gray, 3, 2)).unwrap(), im);
    }

    #[test]
    fn pnm_rejects_garbage() {
        for bad in [&b"P6\n2 2\n255\n\x01"[..], b"P6 0 2 255 ", b"P3\n1 1\n255\n", b"P5\n1 1\n300\n\x00", b"P5\n1 1\n"]
        {
            assert!(decode_pnm(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn luma_weights() {
        let im = PixelImage::from_rgb(2, 1, vec![255, 0, 0, 10, 20, 30]).unwrap();
        assert_eq!(im.luma(), [76, 18]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let a = sample();
        assert_eq!(a.resize(5, 3), a);
        let c = PixelImage::from_fn(7, 5, |_, _| [9, 99, 199]);
        assert!(c.resize(16, 16).rgb().chunks_exact(3).all(|p| p == [9, 99, 199]));
    }
}
