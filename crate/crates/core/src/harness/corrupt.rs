//! Image corruptions for building target domains.
//!
//! Four families at six severities. Severity 0 is the identity (kept for
//! tests); 1..5 are increasingly harsh. Every transform is a pure function of
//! (image, kind, severity, seed) and keeps pixels inside [0, 1].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::{Real, Tensor4};

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    /// Directional (horizontal) box blur.
    Motion,
    /// Seeded additive Gaussian noise.
    Noise,
    /// Disk blur with a normalized kernel.
    Defocus,
    /// Linear range compression about the image mean.
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::Motion,
        CorruptionKind::Noise,
        CorruptionKind::Defocus,
        CorruptionKind::Contrast,
    ];
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorruptionKind::Motion => "motion",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Defocus => "defocus",
            CorruptionKind::Contrast => "contrast",
        };
        f.write_str(s)
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "motion" => Ok(CorruptionKind::Motion),
            "noise" => Ok(CorruptionKind::Noise),
            "defocus" => Ok(CorruptionKind::Defocus),
            "contrast" => Ok(CorruptionKind::Contrast),
            other => Err(Error::Config(format!(
                "unknown corruption kind {other:?} (expected motion, noise, defocus, or contrast)"
            ))),
        }
    }
}

/// Horizontal blur window per severity (odd, so the image stays centered).
const MOTION_LEN: [usize; 6] = [1, 3, 5, 7, 9, 11];
/// Disk-blur radius per severity.
const DEFOCUS_RADIUS: [usize; 6] = [0, 1, 2, 3, 4, 5];
/// Contrast retention factor per severity.
const CONTRAST_KEEP: [Real; 6] = [1.0, 0.75, 0.6, 0.45, 0.3, 0.2];
/// Gaussian noise sigma per severity.
const NOISE_SIGMA: [Real; 6] = [0.0, 0.04, 0.08, 0.12, 0.16, 0.2];

/// Apply `kind` at `severity` to a (N, C, S, S) image tensor.
pub fn corrupt(
    image: &Tensor4,
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
) -> Result<Tensor4, Error> {
    if severity > MAX_SEVERITY {
        return Err(Error::Config(format!(
            "corruption severity {severity} out of range 0..={MAX_SEVERITY}"
        )));
    }
    let s = severity as usize;
    let out = match kind {
        CorruptionKind::Motion => horizontal_blur(image, MOTION_LEN[s]),
        CorruptionKind::Defocus => disk_blur(image, DEFOCUS_RADIUS[s]),
        CorruptionKind::Contrast => compress_contrast(image, CONTRAST_KEEP[s]),
        CorruptionKind::Noise => add_noise(image, NOISE_SIGMA[s], seed),
    };
    Ok(out)
}

fn horizontal_blur(image: &Tensor4, len: usize) -> Tensor4 {
    if len <= 1 {
        return image.clone();
    }
    let shape = image.shape();
    let (h, w) = (shape.h, shape.w);
    let half = len / 2;
    let mut out = image.clone();
    let dst = out.data_mut();
    for n in 0..shape.n {
        for c in 0..shape.c {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    let mut taps = 0usize;
                    for dx in -(half as isize)..=(half as isize) {
                        let sx = x as isize + dx;
                        if sx >= 0 && (sx as usize) < w {
                            sum += image.at(n, c, y, sx as usize);
                            taps += 1;
                        }
                    }
                    dst[shape.index(n, c, y, x)] = sum / taps as Real;
                }
            }
        }
    }
    out
}

/// Offsets and weights of a normalized disk kernel. The weights sum to one,
/// so a fully interior convolution conserves the pixel sum.
fn disk_kernel(radius: usize) -> Vec<(isize, isize, Real)> {
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r2 {
                taps.push((dy, dx));
            }
        }
    }
    let w = 1.0 / taps.len() as Real;
    taps.into_iter().map(|(dy, dx)| (dy, dx, w)).collect()
}

fn disk_blur(image: &Tensor4, radius: usize) -> Tensor4 {
    if radius == 0 {
        return image.clone();
    }
    let kernel = disk_kernel(radius);
    let shape = image.shape();
    let (h, w) = (shape.h, shape.w);
    let mut out = image.clone();
    let dst = out.data_mut();
    for n in 0..shape.n {
        for c in 0..shape.c {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    let mut weight = 0.0;
                    for &(dy, dx, kw) in &kernel {
                        let sy = y as isize + dy;
                        let sx = x as isize + dx;
                        if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                            sum += kw * image.at(n, c, sy as usize, sx as usize);
                            weight += kw;
                        }
                    }
                    // renormalize at the border instead of inventing pixels
                    dst[shape.index(n, c, y, x)] = sum / weight;
                }
            }
        }
    }
    out
}

fn compress_contrast(image: &Tensor4, keep: Real) -> Tensor4 {
    if keep == 1.0 {
        return image.clone();
    }
    let shape = image.shape();
    let plane = shape.c * shape.h * shape.w;
    let mut out = image.clone();
    let dst = out.data_mut();
    for n in 0..shape.n {
        let start = n * plane;
        let slice = &image.data()[start..start + plane];
        let mean: Real = slice.iter().sum::<Real>() / plane as Real;
        for (d, &v) in dst[start..start + plane].iter_mut().zip(slice) {
            *d = mean + keep * (v - mean);
        }
    }
    out
}

fn add_noise(image: &Tensor4, sigma: Real, seed: u64) -> Tensor4 {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut out = image.clone();
    for v in out.data_mut().iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::Rng;

    fn test_image(seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape4::new(2, 3, 16, 16);
        let data = (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor4::new(shape, data).unwrap()
    }

    #[test]
    fn severity_zero_is_the_identity_for_every_kind() {
        let img = test_image(1);
        for kind in CorruptionKind::ALL {
            let out = corrupt(&img, kind, 0, 7).unwrap();
            assert_eq!(out.data(), img.data(), "{kind}");
        }
    }

    #[test]
    fn severities_above_the_range_are_rejected() {
        let img = test_image(2);
        assert!(corrupt(&img, CorruptionKind::Motion, 6, 0).is_err());
    }

    #[test]
    fn every_kind_keeps_pixels_in_range_and_is_deterministic() {
        let img = test_image(3);
        for kind in CorruptionKind::ALL {
            for severity in 1..=MAX_SEVERITY {
                let a = corrupt(&img, kind, severity, 11).unwrap();
                let b = corrupt(&img, kind, severity, 11).unwrap();
                assert_eq!(a.data(), b.data(), "{kind} severity {severity}");
                assert!(
                    a.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                    "{kind} severity {severity} out of range"
                );
                assert_ne!(a.data(), img.data(), "{kind} severity {severity} did nothing");
            }
        }
    }

    #[test]
    fn noise_depends_on_the_seed_and_nothing_else_does() {
        let img = test_image(4);
        for kind in CorruptionKind::ALL {
            let a = corrupt(&img, kind, 3, 1).unwrap();
            let b = corrupt(&img, kind, 3, 2).unwrap();
            if kind == CorruptionKind::Noise {
                assert_ne!(a.data(), b.data());
            } else {
                assert_eq!(a.data(), b.data(), "{kind}");
            }
        }
    }

    #[test]
    fn contrast_leaves_a_constant_image_alone() {
        let shape = Shape4::new(1, 3, 8, 8);
        let img = Tensor4::new(shape, vec![0.37; shape.numel()]).unwrap();
        let out = corrupt(&img, CorruptionKind::Contrast, 5, 0).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!((o - i).abs() < 1e-12, "constant image must be a fixed point");
        }
    }

    #[test]
    fn contrast_compresses_toward_the_mean_linearly() {
        let img = test_image(5);
        let out = corrupt(&img, CorruptionKind::Contrast, 5, 0).unwrap();
        let shape = img.shape();
        let plane = shape.c * shape.h * shape.w;
        let mean: Real = img.data()[..plane].iter().sum::<Real>() / plane as Real;
        for (o, i) in out.data()[..plane].iter().zip(&img.data()[..plane]) {
            assert!((o - (mean + 0.2 * (i - mean))).abs() < 1e-12);
        }
    }

    #[test]
    fn defocus_spreads_a_dot_into_a_disk_and_conserves_energy() {
        let shape = Shape4::new(1, 1, 31, 31);
        let mut data = vec![0.0; shape.numel()];
        data[shape.index(0, 0, 15, 15)] = 1.0;
        let img = Tensor4::new(shape, data).unwrap();
        for severity in 1..=MAX_SEVERITY {
            let out = corrupt(&img, CorruptionKind::Defocus, severity, 0).unwrap();
            let sum: Real = out.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-3, "severity {severity} energy {sum}");
            // the dot spread: the center pixel no longer holds everything
            assert!(out.at(0, 0, 15, 15) < 1.0);
            let radius = DEFOCUS_RADIUS[severity as usize] as isize;
            // support is exactly the disk
            for y in 0..31isize {
                for x in 0..31isize {
                    let inside = (y - 15).pow(2) + (x - 15).pow(2) <= radius.pow(2);
                    let v = out.at(0, 0, y as usize, x as usize);
                    assert_eq!(v > 0.0, inside, "severity {severity} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn motion_blur_is_purely_horizontal() {
        let shape = Shape4::new(1, 1, 9, 9);
        let mut data = vec![0.0; shape.numel()];
        data[shape.index(0, 0, 4, 4)] = 1.0;
        let img = Tensor4::new(shape, data).unwrap();
        let out = corrupt(&img, CorruptionKind::Motion, 2, 0).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let v = out.at(0, 0, y, x);
                if y == 4 && (2..=6).contains(&x) {
                    assert!((v - 0.2).abs() < 1e-12);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in CorruptionKind::ALL {
            assert_eq!(kind.to_string().parse::<CorruptionKind>().unwrap(), kind);
        }
        assert!("sleet".parse::<CorruptionKind>().is_err());
    }
}
