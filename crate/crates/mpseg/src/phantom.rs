//! Deterministic synthetic phantoms with seven labeled pseudo-cardiac
//! structures: two ventricle ellipsoids, two atrium ellipsoids, a
//! myocardium shell around the left ventricle, and two vessel tubes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::util::derive_seed;
use crate::volume::{LabelVolume, Volume3D, NUM_STRUCTURES};

/// Geometry of one structure, in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum StructureShape {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
    /// Voxels inside `outer` but outside `inner` (both about `center`).
    Shell {
        center: [f64; 3],
        inner: [f64; 3],
        outer: [f64; 3],
    },
    /// Cylinder along z.
    TubeZ {
        center_xy: [f64; 2],
        radius: f64,
        z_range: [f64; 2],
    },
}

impl StructureShape {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        fn inside(center: &[f64; 3], radii: &[f64; 3], x: f64, y: f64, z: f64) -> bool {
            let u = (x - center[0]) / radii[0];
            let v = (y - center[1]) / radii[1];
            let w = (z - center[2]) / radii[2];
            u * u + v * v + w * w <= 1.0
        }
        match self {
            StructureShape::Ellipsoid { center, radii } => inside(center, radii, x, y, z),
            StructureShape::Shell {
                center,
                inner,
                outer,
            } => inside(center, outer, x, y, z) && !inside(center, inner, x, y, z),
            StructureShape::TubeZ {
                center_xy,
                radius,
                z_range,
            } => {
                let u = x - center_xy[0];
                let v = y - center_xy[1];
                u * u + v * v <= radius * radius && z >= z_range[0] && z <= z_range[1]
            }
        }
    }
}

/// One labeled structure with its base intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSpec {
    pub label: u8,
    pub shape: StructureShape,
    pub intensity: f64,
}

/// Full phantom description; `Default` produces seven non-overlapping
/// structures on a 48^3 grid whose intensities are separated by 20 units
/// against a noise sigma of 4 and a background gradient of amplitude 6.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub seed: u64,
    pub noise_sigma: f64,
    pub background_intensity: f64,
    pub gradient_amplitude: f64,
    pub structures: Vec<StructureSpec>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let lv_center = [15.0, 30.0, 14.0];
        let lv_radii = [6.5, 7.5, 8.0];
        PhantomSpec {
            size: (48, 48, 48),
            spacing: (1.0, 1.0, 1.0),
            seed: 0,
            noise_sigma: 4.0,
            background_intensity: 20.0,
            gradient_amplitude: 6.0,
            structures: vec![
                StructureSpec {
                    label: 1, // Myo: shell around the LV
                    shape: StructureShape::Shell {
                        center: lv_center,
                        inner: lv_radii,
                        outer: [9.5, 10.5, 11.0],
                    },
                    intensity: 40.0,
                },
                StructureSpec {
                    label: 2, // LA
                    shape: StructureShape::Ellipsoid {
                        center: [15.0, 30.0, 36.0],
                        radii: [5.5, 6.0, 5.5],
                    },
                    intensity: 60.0,
                },
                StructureSpec {
                    label: 3, // LV
                    shape: StructureShape::Ellipsoid {
                        center: lv_center,
                        radii: lv_radii,
                    },
                    intensity: 80.0,
                },
                StructureSpec {
                    label: 4, // RA
                    shape: StructureShape::Ellipsoid {
                        center: [34.0, 30.0, 36.0],
                        radii: [5.5, 6.0, 5.5],
                    },
                    intensity: 100.0,
                },
                StructureSpec {
                    label: 5, // RV
                    shape: StructureShape::Ellipsoid {
                        center: [34.0, 30.0, 14.0],
                        radii: [6.0, 7.0, 7.0],
                    },
                    intensity: 120.0,
                },
                StructureSpec {
                    label: 6, // Ao
                    shape: StructureShape::TubeZ {
                        center_xy: [17.0, 11.0],
                        radius: 3.0,
                        z_range: [24.0, 44.0],
                    },
                    intensity: 140.0,
                },
                StructureSpec {
                    label: 7, // PA
                    shape: StructureShape::TubeZ {
                        center_xy: [31.0, 11.0],
                        radius: 3.0,
                        z_range: [24.0, 44.0],
                    },
                    intensity: 160.0,
                },
            ],
        }
    }
}

impl PhantomSpec {
    /// The default layout rescaled from its native 48^3 grid to `size`
    /// (anisotropic sizes scale each axis independently).
    pub fn scaled_default(size: (usize, usize, usize)) -> PhantomSpec {
        let mut spec = PhantomSpec::default();
        let s = [
            size.0 as f64 / 48.0,
            size.1 as f64 / 48.0,
            size.2 as f64 / 48.0,
        ];
        let sxy = (s[0] + s[1]) / 2.0;
        for st in &mut spec.structures {
            st.shape = match &st.shape {
                StructureShape::Ellipsoid { center, radii } => StructureShape::Ellipsoid {
                    center: std::array::from_fn(|a| center[a] * s[a]),
                    radii: std::array::from_fn(|a| radii[a] * s[a]),
                },
                StructureShape::Shell {
                    center,
                    inner,
                    outer,
                } => StructureShape::Shell {
                    center: std::array::from_fn(|a| center[a] * s[a]),
                    inner: std::array::from_fn(|a| inner[a] * s[a]),
                    outer: std::array::from_fn(|a| outer[a] * s[a]),
                },
                StructureShape::TubeZ {
                    center_xy,
                    radius,
                    z_range,
                } => StructureShape::TubeZ {
                    center_xy: [center_xy[0] * s[0], center_xy[1] * s[1]],
                    radius: radius * sxy,
                    z_range: [z_range[0] * s[2], z_range[1] * s[2]],
                },
            };
        }
        spec.size = size;
        spec
    }

    fn validate(&self) -> Result<()> {
        let (dx, dy, dz) = self.size;
        if dx == 0 || dy == 0 || dz == 0 {
            return Err(Error::Param(format!("phantom size must be positive, got {:?}", self.size)));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Param(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.structures.len() != NUM_STRUCTURES {
            return Err(Error::Param(format!(
                "phantom needs exactly {NUM_STRUCTURES} structures, got {}",
                self.structures.len()
            )));
        }
        for s in &self.structures {
            if s.label == 0 || s.label as usize > NUM_STRUCTURES {
                return Err(Error::Param(format!("structure label {} out of 1..=7", s.label)));
            }
        }
        Ok(())
    }
}

/// Rasterizes the phantom: exact labels from geometry, intensity =
/// structure base + smooth background gradient + seeded Gaussian noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, LabelVolume)> {
    spec.validate()?;
    let (dx, dy, dz) = spec.size;
    let nvox = dx * dy * dz;
    let mut labels = vec![0u8; nvox];
    let mut base = vec![spec.background_intensity; nvox];
    let grad_scale = spec.gradient_amplitude / ((dx + dy + dz) as f64 - 3.0).max(1.0);

    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let idx = x + dx * (y + dy * z);
                for s in &spec.structures {
                    if s.shape.contains(x as f64, y as f64, z as f64) {
                        labels[idx] = s.label;
                        base[idx] = s.intensity;
                        break;
                    }
                }
                base[idx] += grad_scale * (x + y + z) as f64;
            }
        }
    }

    for s in &spec.structures {
        if !labels.contains(&s.label) {
            return Err(Error::Param(format!(
                "structure {} vanished: geometry lies outside the grid or is empty",
                s.label
            )));
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Param(format!("bad noise sigma: {e}")))?;
        for v in &mut base {
            *v += normal.sample(&mut rng);
        }
    }

    Ok((
        Volume3D::new(spec.size, spec.spacing, base)?,
        LabelVolume::new(spec.size, spec.spacing, labels)?,
    ))
}

fn jittered(shape: &StructureShape, rng: &mut ChaCha8Rng, jitter: f64) -> StructureShape {
    let mut j = |magnitude: f64| rng.gen_range(-jitter..=jitter) * magnitude;
    match shape {
        StructureShape::Ellipsoid { center, radii } => {
            // Centers move by at most `jitter` of the matching radius so the
            // default layout's inter-structure gaps cannot close.
            let center = [
                center[0] + j(radii[0]),
                center[1] + j(radii[1]),
                center[2] + j(radii[2]),
            ];
            let radii = [
                radii[0] * (1.0 + j(1.0)),
                radii[1] * (1.0 + j(1.0)),
                radii[2] * (1.0 + j(1.0)),
            ];
            StructureShape::Ellipsoid { center, radii }
        }
        StructureShape::Shell {
            center,
            inner,
            outer,
        } => {
            let shift = [j(inner[0]), j(inner[1]), j(inner[2])];
            let grow = 1.0 + j(1.0);
            StructureShape::Shell {
                center: [
                    center[0] + shift[0],
                    center[1] + shift[1],
                    center[2] + shift[2],
                ],
                inner: *inner,
                outer: [outer[0] * grow, outer[1] * grow, outer[2] * grow],
            }
        }
        StructureShape::TubeZ {
            center_xy,
            radius,
            z_range,
        } => StructureShape::TubeZ {
            center_xy: [center_xy[0] + j(*radius), center_xy[1] + j(*radius)],
            radius: radius * (1.0 + j(1.0)),
            z_range: [z_range[0] + j(2.0), z_range[1] + j(2.0)],
        },
    }
}

/// Generates `n` phantoms from a template, jittering centers and radii by
/// up to `jitter` (fraction, default 0.1) with per-sample derived seeds.
pub fn generate_dataset(
    n: usize,
    base_seed: u64,
    template: &PhantomSpec,
    jitter: f64,
) -> Result<Vec<(Volume3D, LabelVolume)>> {
    if n == 0 {
        return Err(Error::Param("dataset size must be >= 1".into()));
    }
    if !(0.0..=0.5).contains(&jitter) {
        return Err(Error::Param(format!("jitter must be in [0, 0.5], got {jitter}")));
    }
    (0..n)
        .map(|i| {
            let mut spec = template.clone();
            if jitter > 0.0 {
                let sample_seed = derive_seed(base_seed, i as u64);
                spec.seed = derive_seed(sample_seed, 1);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, 0));
                for s in &mut spec.structures {
                    // Shells keep the LV inner boundary so Myo and LV stay
                    // disjoint under jitter.
                    s.shape = jittered(&s.shape, &mut rng, jitter);
                }
            }
            // jitter 0 degenerates to n copies of the template phantom.
            generate_phantom(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_phantom_has_all_structures() {
        let (vol, lab) = generate_phantom(&PhantomSpec::default()).unwrap();
        assert_eq!(vol.dims(), (48, 48, 48));
        for class in 1..=7u8 {
            let count = lab.labels().iter().filter(|&&l| l == class).count();
            assert!(count >= 50, "structure {class} has only {count} voxels");
        }
    }

    #[test]
    fn deterministic_given_spec() {
        let spec = PhantomSpec {
            seed: 99,
            ..Default::default()
        };
        let (a_vol, a_lab) = generate_phantom(&spec).unwrap();
        let (b_vol, b_lab) = generate_phantom(&spec).unwrap();
        assert_eq!(a_vol.values(), b_vol.values());
        assert_eq!(a_lab.labels(), b_lab.labels());
    }

    #[test]
    fn noiseless_intensities_are_base_plus_gradient() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (vol, lab) = generate_phantom(&spec).unwrap();
        let (dx, dy, _) = vol.dims();
        let grad_scale = spec.gradient_amplitude / (48.0 * 3.0 - 3.0);
        for (idx, (&v, &l)) in vol.values().iter().zip(lab.labels()).enumerate() {
            let x = idx % dx;
            let y = (idx / dx) % dy;
            let z = idx / (dx * dy);
            let base = if l == 0 {
                spec.background_intensity
            } else {
                spec.structures
                    .iter()
                    .find(|s| s.label == l)
                    .unwrap()
                    .intensity
            };
            let expect = base + grad_scale * (x + y + z) as f64;
            assert!((v - expect).abs() < 1e-9);
        }
    }

    /// Nearest-base-intensity thresholding recovers the exact labels on a
    /// noiseless phantom, so the learning task is solvable by construction.
    #[test]
    fn noiseless_phantom_is_threshold_separable() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (vol, lab) = generate_phantom(&spec).unwrap();
        let mut bases = vec![(0u8, spec.background_intensity)];
        bases.extend(spec.structures.iter().map(|s| (s.label, s.intensity)));
        for (&v, &l) in vol.values().iter().zip(lab.labels()) {
            let nearest = bases
                .iter()
                .min_by(|a, b| {
                    (a.1 - v).abs().partial_cmp(&(b.1 - v).abs()).unwrap()
                })
                .unwrap()
                .0;
            assert_eq!(nearest, l);
        }
    }

    #[test]
    fn vanishing_structure_is_an_error() {
        let mut spec = PhantomSpec::default();
        if let StructureShape::Ellipsoid { center, .. } = &mut spec.structures[1].shape {
            center[0] = 500.0; // off the grid
        }
        assert!(matches!(generate_phantom(&spec), Err(Error::Param(_))));
    }

    #[test]
    fn dataset_jitter_and_determinism() {
        let template = PhantomSpec::default();
        let a = generate_dataset(4, 7, &template, 0.1).unwrap();
        let b = generate_dataset(4, 7, &template, 0.1).unwrap();
        for ((av, al), (bv, bl)) in a.iter().zip(&b) {
            assert_eq!(av.values(), bv.values());
            assert_eq!(al.labels(), bl.labels());
        }
        // Pairwise different under jitter.
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i].0.values(), a[j].0.values());
            }
        }
        // All structures survive jitter.
        for (_, lab) in &a {
            for class in 1..=7u8 {
                assert!(lab.labels().contains(&class));
            }
        }
    }

    #[test]
    fn zero_jitter_gives_identical_copies() {
        let template = PhantomSpec::default();
        let set = generate_dataset(3, 5, &template, 0.0).unwrap();
        for (v, l) in &set[1..] {
            assert_eq!(v.values(), set[0].0.values());
            assert_eq!(l.labels(), set[0].1.labels());
        }
    }
}
