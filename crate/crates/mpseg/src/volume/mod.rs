//! 3D volume and label data model, plane decomposition, and file I/O.
//!
//! Axis convention: x = left-right, y = anterior-posterior, z =
//! inferior-superior; voxel values are stored row-major with x fastest.

mod io;

pub use io::{
    load_label_volume, load_prob_volume, load_scalar_volume, load_volume, save_labels,
    save_prob_volume, save_volume, LoadedVolume,
};

use crate::error::{Error, Result};

/// Background plus seven structures.
pub const NUM_CLASSES: usize = 8;
pub const NUM_STRUCTURES: usize = 7;

/// Structure display names in fixed label order (labels 1..=7).
pub const STRUCTURE_NAMES: [&str; NUM_STRUCTURES] = ["Myo", "LA", "LV", "RA", "RV", "Aorta", "PA"];

/// The three perpendicular slicing planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(&self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    pub fn from_name(name: &str) -> Option<Plane> {
        Plane::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Number of slices this plane produces from a volume of `dims`.
    pub fn slice_count(&self, dims: (usize, usize, usize)) -> usize {
        match self {
            Plane::Axial => dims.2,
            Plane::Coronal => dims.1,
            Plane::Sagittal => dims.0,
        }
    }

    /// In-plane dimensions (nx, ny) of one slice.
    pub fn slice_dims(&self, dims: (usize, usize, usize)) -> (usize, usize) {
        match self {
            Plane::Axial => (dims.0, dims.1),
            Plane::Coronal => (dims.0, dims.2),
            Plane::Sagittal => (dims.1, dims.2),
        }
    }

    /// Maps (slice index, in-plane i, in-plane j) back to volume (x, y, z).
    pub fn voxel_of(&self, k: usize, i: usize, j: usize) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (i, j, k),
            Plane::Coronal => (i, k, j),
            Plane::Sagittal => (k, i, j),
        }
    }
}

fn validate_dims_spacing(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::Dim(format!("volume dims must be positive, got {dims:?}")));
    }
    let (sx, sy, sz) = spacing;
    if !(sx > 0.0 && sy > 0.0 && sz > 0.0 && sx.is_finite() && sy.is_finite() && sz.is_finite()) {
        return Err(Error::Param(format!(
            "voxel spacing must be strictly positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Scalar 3D image with physical voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    values: Vec<f64>,
}

impl Volume3D {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        values: Vec<f64>,
    ) -> Result<Self> {
        validate_dims_spacing(dims, spacing)?;
        if values.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Dim(format!(
                "dims {dims:?} imply {} voxels, got {}",
                dims.0 * dims.1 * dims.2,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("volume contains non-finite values".into()));
        }
        Ok(Volume3D {
            dims,
            spacing,
            values,
        })
    }

    pub fn filled(dims: (usize, usize, usize), spacing: (f64, f64, f64), value: f64) -> Self {
        Volume3D::new(dims, spacing, vec![value; dims.0 * dims.1 * dims.2])
            .expect("constant volume is valid")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_voxels(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    /// Replaces the values, keeping geometry; used by filters that map
    /// intensities voxel-for-voxel.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Volume3D> {
        Volume3D::new(self.dims, self.spacing, values)
    }
}

/// Integer class labels per voxel, 0 = background, 1..=7 the structures.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        labels: Vec<u8>,
    ) -> Result<Self> {
        validate_dims_spacing(dims, spacing)?;
        if labels.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Dim(format!(
                "dims {dims:?} imply {} voxels, got {}",
                dims.0 * dims.1 * dims.2,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!(
                "label {bad} out of range 0..{}",
                NUM_CLASSES - 1
            )));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }
}

/// Per-voxel categorical distribution over the eight classes, stored with
/// the class axis fastest: `probs[voxel * 8 + class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    probs: Vec<f64>,
}

impl ProbVolume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        probs: Vec<f64>,
    ) -> Result<Self> {
        validate_dims_spacing(dims, spacing)?;
        let nvox = dims.0 * dims.1 * dims.2;
        if probs.len() != nvox * NUM_CLASSES {
            return Err(Error::Dim(format!(
                "dims {dims:?} imply {} probabilities, got {}",
                nvox * NUM_CLASSES,
                probs.len()
            )));
        }
        for vox in 0..nvox {
            let p = &probs[vox * NUM_CLASSES..(vox + 1) * NUM_CLASSES];
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Validation(format!(
                    "voxel {vox} probabilities not a distribution (sum {sum})"
                )));
            }
        }
        Ok(ProbVolume {
            dims,
            spacing,
            probs,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_voxels(&self) -> usize {
        self.probs.len() / NUM_CLASSES
    }

    #[inline]
    pub fn voxel_probs(&self, vox: usize) -> &[f64] {
        &self.probs[vox * NUM_CLASSES..(vox + 1) * NUM_CLASSES]
    }
}

/// One extracted 2D scalar slice; `data[i + nx*j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

/// One extracted 2D label slice; `data[i + nx*j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSlice2D {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<u8>,
}

/// Per-slice class probabilities, `probs[(c*ny + j)*nx + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSlice2D {
    pub nx: usize,
    pub ny: usize,
    pub probs: Vec<f64>,
}

/// Decomposes a volume into the ordered slice stack of one plane; voxel
/// values are preserved exactly.
pub fn extract_slices(vol: &Volume3D, plane: Plane) -> Vec<Slice2D> {
    let dims = vol.dims();
    let (nx, ny) = plane.slice_dims(dims);
    (0..plane.slice_count(dims))
        .map(|k| {
            let mut data = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let (x, y, z) = plane.voxel_of(k, i, j);
                    data.push(vol.at(x, y, z));
                }
            }
            Slice2D { nx, ny, data }
        })
        .collect()
}

/// Label counterpart of [`extract_slices`].
pub fn extract_label_slices(lab: &LabelVolume, plane: Plane) -> Vec<LabelSlice2D> {
    let dims = lab.dims();
    let (nx, ny) = plane.slice_dims(dims);
    (0..plane.slice_count(dims))
        .map(|k| {
            let mut data = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let (x, y, z) = plane.voxel_of(k, i, j);
                    data.push(lab.at(x, y, z));
                }
            }
            LabelSlice2D { nx, ny, data }
        })
        .collect()
}

/// Decomposes a probability volume into per-plane probability slices
/// (the exact inverse of [`restack_probs`]).
pub fn extract_prob_slices(pv: &ProbVolume, plane: Plane) -> Vec<ProbSlice2D> {
    let dims = pv.dims();
    let (nx, ny) = plane.slice_dims(dims);
    (0..plane.slice_count(dims))
        .map(|k| {
            let mut probs = vec![0.0; NUM_CLASSES * nx * ny];
            for j in 0..ny {
                for i in 0..nx {
                    let (x, y, z) = plane.voxel_of(k, i, j);
                    let vox = x + dims.0 * (y + dims.1 * z);
                    for c in 0..NUM_CLASSES {
                        probs[(c * ny + j) * nx + i] = pv.voxel_probs(vox)[c];
                    }
                }
            }
            ProbSlice2D { nx, ny, probs }
        })
        .collect()
}

/// Reassembles per-slice probability maps into a [`ProbVolume`], placing
/// each probability at its original voxel coordinate.
pub fn restack_probs(
    slices: &[ProbSlice2D],
    plane: Plane,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<ProbVolume> {
    let (nx, ny) = plane.slice_dims(dims);
    if slices.len() != plane.slice_count(dims) {
        return Err(Error::Dim(format!(
            "{} slices given, {} plane of {dims:?} needs {}",
            slices.len(),
            plane.name(),
            plane.slice_count(dims)
        )));
    }
    let nvox = dims.0 * dims.1 * dims.2;
    let mut probs = vec![0.0; nvox * NUM_CLASSES];
    for (k, slice) in slices.iter().enumerate() {
        if slice.nx != nx || slice.ny != ny || slice.probs.len() != NUM_CLASSES * nx * ny {
            return Err(Error::Dim(format!(
                "slice {k} is {}x{} with {} values; expected {nx}x{ny} with {}",
                slice.nx,
                slice.ny,
                slice.probs.len(),
                NUM_CLASSES * nx * ny
            )));
        }
        for j in 0..ny {
            for i in 0..nx {
                let (x, y, z) = plane.voxel_of(k, i, j);
                let vox = x + dims.0 * (y + dims.1 * z);
                for c in 0..NUM_CLASSES {
                    probs[vox * NUM_CLASSES + c] = slice.probs[(c * ny + j) * nx + i];
                }
            }
        }
    }
    ProbVolume::new(dims, spacing, probs)
}

/// Original slice size recorded when padding, so the inverse crop is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub nx: usize,
    pub ny: usize,
}

fn padded_extent(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Zero-pads the bottom/right of a 2D buffer to the next multiple of `m`.
fn pad_buffer<T: Copy + Default>(data: &[T], nx: usize, ny: usize, m: usize) -> (Vec<T>, usize, usize) {
    let (px, py) = (padded_extent(nx, m), padded_extent(ny, m));
    let mut out = vec![T::default(); px * py];
    for j in 0..ny {
        out[j * px..j * px + nx].copy_from_slice(&data[j * nx..(j + 1) * nx]);
    }
    (out, px, py)
}

/// Pads a scalar slice to the next multiple of `m` in each dimension.
pub fn pad_to_multiple(slice: &Slice2D, m: usize) -> Result<(Slice2D, PadRecord)> {
    if m == 0 {
        return Err(Error::Param("pad multiple must be >= 1".into()));
    }
    let (data, px, py) = pad_buffer(&slice.data, slice.nx, slice.ny, m);
    Ok((
        Slice2D {
            nx: px,
            ny: py,
            data,
        },
        PadRecord {
            nx: slice.nx,
            ny: slice.ny,
        },
    ))
}

/// Label counterpart of [`pad_to_multiple`]; padding is background (0).
pub fn pad_labels_to_multiple(
    slice: &LabelSlice2D,
    m: usize,
) -> Result<(LabelSlice2D, PadRecord)> {
    if m == 0 {
        return Err(Error::Param("pad multiple must be >= 1".into()));
    }
    let (data, px, py) = pad_buffer(&slice.data, slice.nx, slice.ny, m);
    Ok((
        LabelSlice2D {
            nx: px,
            ny: py,
            data,
        },
        PadRecord {
            nx: slice.nx,
            ny: slice.ny,
        },
    ))
}

/// Crops a padded probability slice back to its recorded original size.
pub fn crop_prob_slice(slice: &ProbSlice2D, rec: PadRecord) -> ProbSlice2D {
    let (nx, ny) = (rec.nx, rec.ny);
    let mut probs = Vec::with_capacity(NUM_CLASSES * nx * ny);
    for c in 0..NUM_CLASSES {
        for j in 0..ny {
            let row = (c * slice.ny + j) * slice.nx;
            probs.extend_from_slice(&slice.probs[row..row + nx]);
        }
    }
    ProbSlice2D { nx, ny, probs }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: (usize, usize, usize)) -> Volume3D {
        let n = dims.0 * dims.1 * dims.2;
        Volume3D::new(
            dims,
            (1.0, 1.0, 1.0),
            (0..n).map(|i| i as f64 * 0.5 - 7.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn slice_counts_and_shapes() {
        let vol = ramp_volume((4, 5, 6));
        let ax = extract_slices(&vol, Plane::Axial);
        assert_eq!(ax.len(), 6);
        assert_eq!((ax[0].nx, ax[0].ny), (4, 5));

        let sag = extract_slices(&vol, Plane::Sagittal);
        assert_eq!(sag.len(), 4);
        assert_eq!((sag[0].nx, sag[0].ny), (5, 6));

        let cor = extract_slices(&vol, Plane::Coronal);
        assert_eq!(cor.len(), 5);
        assert_eq!((cor[0].nx, cor[0].ny), (4, 6));

        // All three slice counts together cover each axis once.
        assert_eq!(ax.len() + sag.len() + cor.len(), 4 + 5 + 6);
    }

    #[test]
    fn extraction_preserves_values_at_computed_positions() {
        let vol = ramp_volume((3, 4, 5));
        for plane in Plane::ALL {
            let slices = extract_slices(&vol, plane);
            for (k, s) in slices.iter().enumerate() {
                for j in 0..s.ny {
                    for i in 0..s.nx {
                        let (x, y, z) = plane.voxel_of(k, i, j);
                        assert_eq!(s.data[i + s.nx * j], vol.at(x, y, z));
                    }
                }
            }
        }
    }

    #[test]
    fn one_voxel_prob_round_trip() {
        let probs = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let pv = ProbVolume::new((1, 1, 1), (1.0, 1.0, 1.0), probs.clone()).unwrap();
        for plane in Plane::ALL {
            let slices = extract_prob_slices(&pv, plane);
            let back = restack_probs(&slices, plane, (1, 1, 1), (1.0, 1.0, 1.0)).unwrap();
            assert_eq!(back.probs(), &probs[..]);
        }
    }

    #[test]
    fn restack_rejects_wrong_slice_count() {
        let pv = ProbVolume::new(
            (2, 2, 2),
            (1.0, 1.0, 1.0),
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0].repeat(8),
        )
        .unwrap();
        let mut slices = extract_prob_slices(&pv, Plane::Axial);
        slices.pop();
        assert!(matches!(
            restack_probs(&slices, Plane::Axial, (2, 2, 2), (1.0, 1.0, 1.0)),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn label_volume_rejects_out_of_range() {
        let r = LabelVolume::new((2, 1, 1), (1.0, 1.0, 1.0), vec![0, 9]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn padding_arithmetic() {
        let s = Slice2D {
            nx: 350,
            ny: 350,
            data: vec![1.0; 350 * 350],
        };
        let (p, rec) = pad_to_multiple(&s, 4).unwrap();
        assert_eq!((p.nx, p.ny), (352, 352));
        assert_eq!(rec, PadRecord { nx: 350, ny: 350 });

        // 288x160 is already divisible by 4.
        let s = Slice2D {
            nx: 288,
            ny: 160,
            data: vec![0.0; 288 * 160],
        };
        let (p, _) = pad_to_multiple(&s, 4).unwrap();
        assert_eq!((p.nx, p.ny), (288, 160));

        let s = Slice2D {
            nx: 8,
            ny: 8,
            data: vec![2.0; 64],
        };
        let (p, _) = pad_to_multiple(&s, 4).unwrap();
        assert_eq!(p.data, s.data);
    }
}
