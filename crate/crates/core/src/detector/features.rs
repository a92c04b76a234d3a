use crate::image::PixelImage;

use super::DetectorError;

pub const CENTRAL_BINS: i32 = 12;
pub const DIRECTIONS: usize = 4;
pub const PER_DIRECTION: usize = 2 * CENTRAL_BINS as usize + 1 + 4;
pub const FEATURE_LEN: usize = DIRECTIONS * PER_DIRECTION;

/// Pixel offsets `(dx, dy)` of the second operand: each difference is
/// `I(x+dx, y+dy) - I(x, y)`, except anti-diagonal which is `I(x, y+1) - I(x+1, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

impl Direction {
    pub const ALL: [Direction; DIRECTIONS] =
        [Direction::Horizontal, Direction::Vertical, Direction::Diagonal, Direction::AntiDiagonal];
}

/// Full `[-255, 255]` histogram of one directional difference image, as counts.
pub fn difference_histogram(luma: &[u8], width: usize, height: usize, dir: Direction) -> [u64; 511] {
    let mut hist = [0u64; 511];
    let at = |x: usize, y: usize| luma[y * width + x] as i32;
    let (xs, ys) = match dir {
        Direction::Horizontal => (width - 1, height),
        Direction::Vertical => (width, height - 1),
        Direction::Diagonal | Direction::AntiDiagonal => (width - 1, height - 1),
    };
    for y in 0..ys {
        for x in 0..xs {
            let d = match dir {
                Direction::Horizontal => at(x + 1, y) - at(x, y),
                Direction::Vertical => at(x, y + 1) - at(x, y),
                Direction::Diagonal => at(x + 1, y + 1) - at(x, y),
                Direction::AntiDiagonal => at(x, y + 1) - at(x + 1, y),
            };
            hist[(d + 255) as usize] += 1;
        }
    }
    hist
}

/// Per direction: normalized bins `-12..=12`, then mean, variance, skewness
/// and kurtosis of the whole difference distribution. Skewness and kurtosis
/// are zero for a zero-variance distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffHistFeatures(pub [f64; FEATURE_LEN]);

impl DiffHistFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn direction(&self, dir: Direction) -> &[f64] {
        let i = Direction::ALL.iter().position(|&d| d == dir).unwrap();
        &self.0[i * PER_DIRECTION..(i + 1) * PER_DIRECTION]
    }

    /// Normalized mass of difference value `d` (`|d| <= 12`) in one direction.
    pub fn bin(&self, dir: Direction, d: i32) -> f64 {
        self.direction(dir)[(d + CENTRAL_BINS) as usize]
    }

    pub fn moments(&self, dir: Direction) -> [f64; 4] {
        self.direction(dir)[PER_DIRECTION - 4..].try_into().unwrap()
    }
}

pub fn extract_features(image: &PixelImage) -> Result<DiffHistFeatures, DetectorError> {
    let (w, h) = (image.width(), image.height());
    if w < 2 || h < 2 {
        return Err(DetectorError::ImageTooSmall { width: w, height: h });
    }
    let luma = image.luma();
    let mut out = [0.0; FEATURE_LEN];
    for (k, dir) in Direction::ALL.into_iter().enumerate() {
        let hist = difference_histogram(&luma, w, h, dir);
        let chunk = &mut out[k * PER_DIRECTION..(k + 1) * PER_DIRECTION];
        let n = hist.iter().sum::<u64>() as f64;
        let value = |i: usize| i as f64 - 255.0;
        for d in -CENTRAL_BINS..=CENTRAL_BINS {
            chunk[(d + CENTRAL_BINS) as usize] = hist[(d + 255) as usize] as f64 / n;
        }
        let mean = hist.iter().enumerate().map(|(i, &c)| value(i) * c as f64).sum::<f64>() / n;
        let central =
            |p: i32| hist.iter().enumerate().map(|(i, &c)| (value(i) - mean).powi(p) * c as f64).sum::<f64>() / n;
        let var = central(2);
        let (skew, kurt) = if var > 0.0 { (central(3) / var.powf(1.5), central(4) / (var * var)) } else { (0.0, 0.0) };
        chunk[PER_DIRECTION - 4..].copy_from_slice(&[mean, var, skew, kurt]);
    }
    Ok(DiffHistFeatures(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_has_all_mass_at_zero() {
        let f = extract_features(&PixelImage::from_fn(6, 5, |_, _| [40, 90, 200])).unwrap();
        for dir in Direction::ALL {
            assert_eq!(f.bin(dir, 0), 1.0);
            assert_eq!(f.direction(dir)[..25].iter().sum::<f64>(), 1.0);
            assert_eq!(f.moments(dir), [0.0; 4]);
        }
    }

    #[test]
    fn stripes_split_mass_between_plus_and_minus_ten() {
        let im = PixelImage::from_fn(9, 4, |x, _| if x % 2 == 0 { [0; 3] } else { [10; 3] });
        let f = extract_features(&im).unwrap();
        // Eight horizontal differences per row: four +10, four -10.
        assert_eq!(f.bin(Direction::Horizontal, 10), 0.5);
        assert_eq!(f.bin(Direction::Horizontal, -10), 0.5);
        assert_eq!(f.bin(Direction::Horizontal, 0), 0.0);
        assert_eq!(f.bin(Direction::Vertical, 0), 1.0);
    }

    #[test]
    fn mirror_flips_horizontal_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let im = PixelImage::from_fn(8, 8, |_, _| [rng.random_range(100..110); 3]);
        let (a, b) = (extract_features(&im).unwrap(), extract_features(&im.mirror_horizontal()).unwrap());
        for d in -CENTRAL_BINS..=CENTRAL_BINS {
            assert_eq!(a.bin(Direction::Horizontal, d), b.bin(Direction::Horizontal, -d));
        }
        let [m, v, s, k] = a.moments(Direction::Horizontal);
        let [mb, vb, sb, kb] = b.moments(Direction::Horizontal);
        assert!((m + mb).abs() < 1e-12 && (v - vb).abs() < 1e-9 && (s + sb).abs() < 1e-9 && (k - kb).abs() < 1e-9);
    }

    #[test]
    fn intensity_shift_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<u8> = (0..100).map(|_| rng.random_range(0..200)).collect();
        let a = PixelImage::from_gray(10, 10, &base).unwrap();
        let b = PixelImage::from_gray(10, 10, &base.iter().map(|v| v + 37).collect::<Vec<_>>()).unwrap();
        assert_eq!(extract_features(&a).unwrap(), extract_features(&b).unwrap());
    }

    #[test]
    fn tiny_images_are_rejected() {
        assert!(extract_features(&PixelImage::from_fn(1, 9, |_, _| [0; 3])).is_err());
        assert!(extract_features(&PixelImage::from_fn(2, 2, |_, _| [0; 3])).is_ok());
    }
}
