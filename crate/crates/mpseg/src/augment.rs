//! Training-set augmentation: in-plane rotation (k * 45 degrees,
//! k in {-1,0,1}) and zoom-in (scale in [1.1, 1.3]) with paired label
//! transformation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::derive_seed;
use crate::volume::{LabelSlice2D, Slice2D};

pub const ZOOM_MIN: f64 = 1.1;
pub const ZOOM_MAX: f64 = 1.3;

/// Parameters of one generated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub rotation_k: i8,
    pub zoom_scale: f64,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-1..=1).contains(&self.rotation_k) {
            return Err(Error::Param(format!(
                "rotation k must be in {{-1,0,1}}, got {}",
                self.rotation_k
            )));
        }
        if !(ZOOM_MIN..=ZOOM_MAX).contains(&self.zoom_scale) {
            return Err(Error::Param(format!(
                "zoom scale must be in [{ZOOM_MIN},{ZOOM_MAX}], got {}",
                self.zoom_scale
            )));
        }
        Ok(())
    }
}

fn bilinear_sample(data: &[f64], nx: usize, ny: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (tx, ty) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (cx, cy, w) in [
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x0 + 1.0, y0, tx * (1.0 - ty)),
        (x0, y0 + 1.0, (1.0 - tx) * ty),
        (x0 + 1.0, y0 + 1.0, tx * ty),
    ] {
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < nx && (cy as usize) < ny {
            acc += w * data[cx as usize + nx * cy as usize];
        }
    }
    acc
}

fn nearest_sample(data: &[u8], nx: usize, ny: usize, x: f64, y: f64) -> u8 {
    let xi = x.round();
    let yi = y.round();
    if xi >= 0.0 && yi >= 0.0 && (xi as usize) < nx && (yi as usize) < ny {
        data[xi as usize + nx * yi as usize]
    } else {
        0
    }
}

fn check_paired(image: &Slice2D, labels: &LabelSlice2D) -> Result<()> {
    if image.nx != labels.nx || image.ny != labels.ny {
        return Err(Error::Dim(format!(
            "image is {}x{}, labels are {}x{}",
            image.nx, image.ny, labels.nx, labels.ny
        )));
    }
    Ok(())
}

/// Resamples both buffers through an inverse map from output pixel to
/// source coordinates; bilinear for the image (zero fill), nearest for
/// the labels (background fill).
fn resample(
    image: &Slice2D,
    labels: &LabelSlice2D,
    inverse: impl Fn(f64, f64) -> (f64, f64),
) -> (Slice2D, LabelSlice2D) {
    let (nx, ny) = (image.nx, image.ny);
    let mut out_img = vec![0.0; nx * ny];
    let mut out_lab = vec![0u8; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let (sx, sy) = inverse(i as f64, j as f64);
            out_img[i + nx * j] = bilinear_sample(&image.data, nx, ny, sx, sy);
            out_lab[i + nx * j] = nearest_sample(&labels.data, nx, ny, sx, sy);
        }
    }
    (
        Slice2D {
            nx,
            ny,
            data: out_img,
        },
        LabelSlice2D {
            nx,
            ny,
            data: out_lab,
        },
    )
}

/// Rotates an image/label pair about the image center by k * 45 degrees.
pub fn rotate(image: &Slice2D, labels: &LabelSlice2D, k: i8) -> Result<(Slice2D, LabelSlice2D)> {
    if !(-1..=1).contains(&k) {
        return Err(Error::Param(format!("rotation k must be in {{-1,0,1}}, got {k}")));
    }
    check_paired(image, labels)?;
    if k == 0 {
        return Ok((image.clone(), labels.clone()));
    }
    let theta = f64::from(k) * std::f64::consts::FRAC_PI_4;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let cx = (image.nx - 1) as f64 / 2.0;
    let cy = (image.ny - 1) as f64 / 2.0;
    Ok(resample(image, labels, |x, y| {
        let (u, v) = (x - cx, y - cy);
        // Inverse rotation of the output grid into the source image.
        (
            cx + u * cos_t + v * sin_t,
            cy - u * sin_t + v * cos_t,
        )
    }))
}

/// Magnifies about the center by `scale` and center-crops back to the
/// original size (zoom-in semantics).
pub fn zoom_in(
    image: &Slice2D,
    labels: &LabelSlice2D,
    scale: f64,
) -> Result<(Slice2D, LabelSlice2D)> {
    if !(ZOOM_MIN..=ZOOM_MAX).contains(&scale) {
        return Err(Error::Param(format!(
            "zoom scale must be in [{ZOOM_MIN},{ZOOM_MAX}], got {scale}"
        )));
    }
    check_paired(image, labels)?;
    let cx = (image.nx - 1) as f64 / 2.0;
    let cy = (image.ny - 1) as f64 / 2.0;
    Ok(resample(image, labels, |x, y| {
        (cx + (x - cx) / scale, cy + (y - cy) / scale)
    }))
}

/// One training sample; `spec` is `None` for unmodified originals.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub image: Slice2D,
    pub labels: LabelSlice2D,
    pub spec: Option<AugmentSpec>,
}

/// Expands a slice set to `multiplier` times its size: the originals plus
/// `multiplier - 1` generated variants per slice, each with rotation and
/// zoom parameters drawn from a seed-derived stream.
pub fn build_augmented_set(
    pairs: &[(Slice2D, LabelSlice2D)],
    multiplier: usize,
    seed: u64,
) -> Result<Vec<AugmentedSample>> {
    if multiplier == 0 {
        return Err(Error::Param("augmentation multiplier must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(pairs.len() * multiplier);
    for (image, labels) in pairs {
        check_paired(image, labels)?;
        out.push(AugmentedSample {
            image: image.clone(),
            labels: labels.clone(),
            spec: None,
        });
    }
    for round in 1..multiplier {
        for (idx, (image, labels)) in pairs.iter().enumerate() {
            let sample_seed = derive_seed(seed, (round * pairs.len() + idx) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let spec = AugmentSpec {
                rotation_k: rng.gen_range(-1i8..=1),
                zoom_scale: rng.gen_range(ZOOM_MIN..=ZOOM_MAX),
                seed: sample_seed,
            };
            let (img, lab) = rotate(image, labels, spec.rotation_k)?;
            let (img, lab) = zoom_in(&img, &lab, spec.zoom_scale)?;
            out.push(AugmentedSample {
                image: img,
                labels: lab,
                spec: Some(spec),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(nx: usize, ny: usize, r: f64) -> (Slice2D, LabelSlice2D) {
        let cx = (nx - 1) as f64 / 2.0;
        let cy = (ny - 1) as f64 / 2.0;
        let mut img = vec![0.0; nx * ny];
        let mut lab = vec![0u8; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
                if d2 <= r * r {
                    img[i + nx * j] = 100.0;
                    lab[i + nx * j] = 3;
                }
            }
        }
        (
            Slice2D { nx, ny, data: img },
            LabelSlice2D { nx, ny, data: lab },
        )
    }

    fn mask_dice(a: &[u8], b: &[u8], class: u8) -> f64 {
        let inter = a
            .iter()
            .zip(b)
            .filter(|(x, y)| **x == class && **y == class)
            .count();
        let na = a.iter().filter(|&&x| x == class).count();
        let nb = b.iter().filter(|&&x| x == class).count();
        2.0 * inter as f64 / (na + nb) as f64
    }

    #[test]
    fn k_zero_is_identity() {
        let (img, lab) = disk(20, 24, 6.0);
        let (ri, rl) = rotate(&img, &lab, 0).unwrap();
        assert_eq!(ri, img);
        assert_eq!(rl, lab);
    }

    #[test]
    fn rotation_round_trip_on_disk() {
        let (img, lab) = disk(64, 64, 20.0);
        let (ri, rl) = rotate(&img, &lab, 1).unwrap();
        let (_, rl) = rotate(&ri, &rl, -1).unwrap();
        let dice = mask_dice(&rl.data, &lab.data, 3);
        assert!(dice >= 0.98, "round-trip dice {dice}");
    }

    #[test]
    fn centered_voxel_is_a_fixed_point() {
        let (nx, ny) = (33, 33);
        let img = Slice2D {
            nx,
            ny,
            data: vec![0.0; nx * ny],
        };
        let mut lab = LabelSlice2D {
            nx,
            ny,
            data: vec![0u8; nx * ny],
        };
        lab.data[16 + nx * 16] = 5;
        for k in [-1i8, 0, 1] {
            let (_, rl) = rotate(&img, &lab, k).unwrap();
            assert_eq!(rl.data[16 + nx * 16], 5, "k = {k}");
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let (img, lab) = disk(8, 8, 2.0);
        assert!(matches!(rotate(&img, &lab, 2), Err(Error::Param(_))));
        assert!(matches!(zoom_in(&img, &lab, 1.0), Err(Error::Param(_))));
        assert!(matches!(zoom_in(&img, &lab, 1.31), Err(Error::Param(_))));
    }

    #[test]
    fn zoom_grows_a_square_by_the_scale() {
        let (nx, ny) = (32, 32);
        let mut lab = vec![0u8; nx * ny];
        let mut img = vec![0.0; nx * ny];
        // Centered square of side 10: columns/rows 11..=20.
        for j in 11..21 {
            for i in 11..21 {
                lab[i + nx * j] = 1;
                img[i + nx * j] = 50.0;
            }
        }
        let img = Slice2D { nx, ny, data: img };
        let lab = LabelSlice2D { nx, ny, data: lab };
        let (_, zl) = zoom_in(&img, &lab, 1.2).unwrap();
        // Width of the labeled run through the center row.
        let row = 15;
        let width = (0..nx).filter(|i| zl.data[i + nx * row] == 1).count();
        assert!(
            (width as f64 - 12.0).abs() <= 1.0,
            "zoomed side {width}, expected about 12"
        );
    }

    #[test]
    fn zoom_of_constant_image_is_constant() {
        let (nx, ny) = (17, 13);
        let img = Slice2D {
            nx,
            ny,
            data: vec![7.25; nx * ny],
        };
        let lab = LabelSlice2D {
            nx,
            ny,
            data: vec![2u8; nx * ny],
        };
        let (zi, _) = zoom_in(&img, &lab, 1.25).unwrap();
        assert!(zi.data.iter().all(|&v| (v - 7.25).abs() < 1e-12));
    }

    #[test]
    fn multiplier_one_returns_originals_only() {
        let pairs = vec![disk(12, 12, 3.0), disk(12, 12, 4.0)];
        let set = build_augmented_set(&pairs, 1, 9).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.iter().all(|s| s.spec.is_none()));
        assert_eq!(set[0].image, pairs[0].0);
    }

    #[test]
    fn same_seed_reproduces_bit_identical_sets() {
        let pairs: Vec<_> = (0..10).map(|i| disk(16, 16, 3.0 + i as f64 * 0.2)).collect();
        let a = build_augmented_set(&pairs, 3, 1234).unwrap();
        let b = build_augmented_set(&pairs, 3, 1234).unwrap();
        assert_eq!(a.len(), 30);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.spec, y.spec);
        }
        for s in a.iter().skip(10) {
            s.spec.expect("generated sample has a spec").validate().unwrap();
        }
    }

    #[test]
    fn labels_never_invent_classes() {
        let pairs = vec![disk(24, 24, 7.0)];
        let set = build_augmented_set(&pairs, 5, 77).unwrap();
        for s in &set {
            assert_eq!((s.image.nx, s.image.ny), (24, 24));
            assert!(s.labels.data.iter().all(|&l| l == 0 || l == 3));
        }
    }
}
