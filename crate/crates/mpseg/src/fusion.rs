//! Multi-object adaptive fusion: argmax labeling, per-class connected
//! component analysis, reliability weighting, and the weighted combination
//! of per-plane probability volumes.
//!
//! The reliability of a plane for one class is the ratio of its largest
//! connected component to its total predicted size, summed over a
//! calibration set: w = sum_i max_j |o_ij| / sum_ij |o_ij|. Planes whose
//! predictions form a single blob are trusted; fragmented predictions are
//! discounted. The weights are estimated once on the calibration set and
//! fixed at test time.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Plane, ProbVolume, NUM_CLASSES, NUM_STRUCTURES};

/// Neighborhood used by the connected component analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Face6,
    Full26,
}

impl Connectivity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Connectivity::Face6 => "6",
            Connectivity::Full26 => "26",
        }
    }

    pub fn from_str(s: &str) -> Option<Connectivity> {
        match s {
            "6" => Some(Connectivity::Face6),
            "26" => Some(Connectivity::Full26),
            _ => None,
        }
    }
}

/// Per-voxel argmax over the eight classes; exact ties go to the lowest
/// class index, so background wins a tie against any structure.
pub fn argmax_labels(p: &ProbVolume) -> LabelVolume {
    let mut labels = Vec::with_capacity(p.num_voxels());
    for vox in 0..p.num_voxels() {
        let probs = p.voxel_probs(vox);
        let mut best = 0usize;
        for (c, &v) in probs.iter().enumerate().skip(1) {
            if v > probs[best] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    LabelVolume::new(p.dims(), p.spacing(), labels).expect("argmax labels are in range")
}

/// The connected components of one class's predicted region: pairwise
/// disjoint, jointly covering the region, each connected under the chosen
/// connectivity. Components are ordered by decreasing size (ties by first
/// voxel index); voxel indices inside each component are ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSet {
    pub class_id: u8,
    pub components: Vec<Vec<usize>>,
}

impl ComponentSet {
    /// Total predicted size, sum over components.
    pub fn total_size(&self) -> usize {
        self.components.iter().map(Vec::len).sum()
    }

    /// Largest component size; 0 when the prediction is empty.
    pub fn largest_size(&self) -> usize {
        self.components.first().map_or(0, Vec::len)
    }
}

/// Flood-fill connected component analysis over the voxels labeled
/// `class_id`.
pub fn connected_components(
    labels: &LabelVolume,
    class_id: u8,
    conn: Connectivity,
) -> Result<ComponentSet> {
    if !(1..=NUM_STRUCTURES as u8).contains(&class_id) {
        return Err(Error::Param(format!(
            "connected components run on structure classes 1..=7, got {class_id}"
        )));
    }
    let (dx, dy, dz) = labels.dims();
    let data = labels.labels();
    let mut visited = vec![false; data.len()];
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..data.len() {
        if data[start] != class_id || visited[start] {
            continue;
        }
        let mut component = Vec::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            component.push(idx);
            let x = idx % dx;
            let y = (idx / dx) % dy;
            let z = idx / (dx * dy);
            let mut try_push = |nx: i64, ny: i64, nz: i64| {
                if nx < 0 || ny < 0 || nz < 0 {
                    return;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if nx >= dx || ny >= dy || nz >= dz {
                    return;
                }
                let nidx = nx + dx * (ny + dy * nz);
                if data[nidx] == class_id && !visited[nidx] {
                    visited[nidx] = true;
                    queue.push_back(nidx);
                }
            };
            let (xi, yi, zi) = (x as i64, y as i64, z as i64);
            match conn {
                Connectivity::Face6 => {
                    try_push(xi - 1, yi, zi);
                    try_push(xi + 1, yi, zi);
                    try_push(xi, yi - 1, zi);
                    try_push(xi, yi + 1, zi);
                    try_push(xi, yi, zi - 1);
                    try_push(xi, yi, zi + 1);
                }
                Connectivity::Full26 => {
                    for ox in -1..=1i64 {
                        for oy in -1..=1i64 {
                            for oz in -1..=1i64 {
                                if ox != 0 || oy != 0 || oz != 0 {
                                    try_push(xi + ox, yi + oy, zi + oz);
                                }
                            }
                        }
                    }
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(ComponentSet {
        class_id,
        components,
    })
}

/// Trusted and total voxel counts over a calibration set for one plane and
/// class: (sum of largest components, sum of all components).
pub fn plane_reliability_counts(per_volume: &[ComponentSet]) -> (u64, u64) {
    let trusted = per_volume.iter().map(|s| s.largest_size() as u64).sum();
    let total = per_volume.iter().map(|s| s.total_size() as u64).sum();
    (trusted, total)
}

/// Raw reliability weight w = sum_i max_j |o_ij| / sum_ij |o_ij|; `None`
/// when no calibration volume predicted the class at all.
pub fn plane_reliability(per_volume: &[ComponentSet]) -> Option<f64> {
    let (trusted, total) = plane_reliability_counts(per_volume);
    (total > 0).then(|| trusted as f64 / total as f64)
}

/// Per-(plane, class) reliability weights; per class the normalized
/// weights across the three planes sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// Raw reliability ratios, `raw[plane][class]`; 0 for classes the
    /// plane never predicted.
    pub raw: [[f64; NUM_CLASSES]; 3],
    /// Normalized convex weights, `norm[plane][class]`.
    pub norm: [[f64; NUM_CLASSES]; 3],
    /// Trusted (largest-component) voxel counts behind each raw weight.
    pub trusted: [[u64; NUM_CLASSES]; 3],
    /// Total predicted voxel counts behind each raw weight.
    pub total: [[u64; NUM_CLASSES]; 3],
    /// Classes that fell back to uniform weights (no prediction anywhere).
    pub flagged: [bool; NUM_CLASSES],
    pub connectivity: Connectivity,
    pub calibration_hash: String,
}

impl FusionWeights {
    /// Uniform 1/3 weights for every class.
    pub fn uniform() -> FusionWeights {
        FusionWeights::from_raw(
            [[1.0; NUM_CLASSES]; 3],
            [[0; NUM_CLASSES]; 3],
            [[0; NUM_CLASSES]; 3],
            Connectivity::Face6,
            String::new(),
        )
    }

    /// Normalizes raw reliabilities per class across the planes. A class
    /// with zero raw weight on every plane is flagged and falls back to
    /// uniform 1/3.
    pub fn from_raw(
        raw: [[f64; NUM_CLASSES]; 3],
        trusted: [[u64; NUM_CLASSES]; 3],
        total: [[u64; NUM_CLASSES]; 3],
        connectivity: Connectivity,
        calibration_hash: String,
    ) -> FusionWeights {
        let mut raw = raw;
        // Background is not a CCA structure; every plane contributes equally.
        for plane in raw.iter_mut() {
            plane[0] = 1.0;
        }
        let mut norm = [[0.0; NUM_CLASSES]; 3];
        let mut flagged = [false; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let sum: f64 = (0..3).map(|p| raw[p][c]).sum();
            if sum > 0.0 {
                for p in 0..3 {
                    norm[p][c] = raw[p][c] / sum;
                }
            } else {
                flagged[c] = true;
                for p in 0..3 {
                    norm[p][c] = 1.0 / 3.0;
                }
            }
        }
        FusionWeights {
            raw,
            norm,
            trusted,
            total,
            flagged,
            connectivity,
            calibration_hash,
        }
    }

    /// Writes the weights file: a commented header (calibration hash,
    /// connectivity, trusted/non-trusted residuals) and one data line per
    /// (plane, structure class): plane, class, raw, normalized.
    pub fn save(&self, path: &Path, run_id: &str) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "# mpseg fusion weights").expect("string write");
        writeln!(out, "# run_id = {run_id}").expect("string write");
        writeln!(out, "# connectivity = {}", self.connectivity.as_str()).expect("string write");
        writeln!(out, "# calibration_sha256 = {}", self.calibration_hash).expect("string write");
        writeln!(out, "# columns: plane,class,raw_weight,normalized_weight").expect("string write");
        for (p, plane) in Plane::ALL.iter().enumerate() {
            for c in 1..=NUM_STRUCTURES {
                writeln!(
                    out,
                    "{},{},{:?},{:?}",
                    plane.name(),
                    c,
                    self.raw[p][c],
                    self.norm[p][c]
                )
                .expect("string write");
            }
        }
        // Residual volumes (trusted vs non-trusted) per plane/class, kept
        // for inspection alongside the ratio actually used.
        for (p, plane) in Plane::ALL.iter().enumerate() {
            for c in 1..=NUM_STRUCTURES {
                let t = self.trusted[p][c];
                let nt = self.total[p][c] - self.trusted[p][c];
                writeln!(
                    out,
                    "# residual {} {} trusted={} nontrusted={} diff={}",
                    plane.name(),
                    c,
                    t,
                    nt,
                    t as i64 - nt as i64
                )
                .expect("string write");
            }
        }
        for c in 1..=NUM_STRUCTURES {
            if self.flagged[c] {
                writeln!(out, "# warning: class {c} had no predictions; uniform weights used")
                    .expect("string write");
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a weights file written by [`FusionWeights::save`].
    pub fn load(path: &Path) -> Result<FusionWeights> {
        let malformed = |msg: String| Error::MalformedHeader {
            path: path.to_path_buf(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut connectivity = Connectivity::Face6;
        let mut calibration_hash = String::new();
        let mut raw = [[0.0; NUM_CLASSES]; 3];
        let mut norm = [[0.0; NUM_CLASSES]; 3];
        let mut trusted = [[0u64; NUM_CLASSES]; 3];
        let mut total = [[0u64; NUM_CLASSES]; 3];
        let mut seen = 0usize;
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# connectivity =") {
                connectivity = Connectivity::from_str(rest.trim())
                    .ok_or_else(|| malformed(format!("bad connectivity {rest:?}")))?;
                continue;
            }
            if let Some(rest) = line.strip_prefix("# calibration_sha256 =") {
                calibration_hash = rest.trim().to_string();
                continue;
            }
            if let Some(rest) = line.strip_prefix("# residual ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() == 5 {
                    let plane = Plane::from_name(parts[0])
                        .ok_or_else(|| malformed(format!("bad plane {:?}", parts[0])))?;
                    let p = Plane::ALL.iter().position(|q| *q == plane).expect("plane in ALL");
                    let c: usize = parts[1]
                        .parse()
                        .map_err(|_| malformed(format!("bad class {:?}", parts[1])))?;
                    let t: u64 = parts[2]
                        .strip_prefix("trusted=")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| malformed("bad trusted count".into()))?;
                    let nt: u64 = parts[3]
                        .strip_prefix("nontrusted=")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| malformed("bad nontrusted count".into()))?;
                    trusted[p][c] = t;
                    total[p][c] = t + nt;
                }
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(malformed(format!("bad data line {line:?}")));
            }
            let plane = Plane::from_name(parts[0])
                .ok_or_else(|| malformed(format!("bad plane {:?}", parts[0])))?;
            let p = Plane::ALL.iter().position(|q| *q == plane).expect("plane in ALL");
            let c: usize = parts[1]
                .parse()
                .map_err(|_| malformed(format!("bad class {:?}", parts[1])))?;
            if !(1..=NUM_STRUCTURES).contains(&c) {
                return Err(malformed(format!("class {c} out of 1..=7")));
            }
            raw[p][c] = parts[2]
                .parse()
                .map_err(|_| malformed(format!("bad raw weight {:?}", parts[2])))?;
            norm[p][c] = parts[3]
                .parse()
                .map_err(|_| malformed(format!("bad normalized weight {:?}", parts[3])))?;
            seen += 1;
        }
        if seen != 3 * NUM_STRUCTURES {
            return Err(malformed(format!(
                "expected {} data lines, found {seen}",
                3 * NUM_STRUCTURES
            )));
        }
        let mut flagged = [false; NUM_CLASSES];
        for c in 1..=NUM_STRUCTURES {
            flagged[c] = (0..3).all(|p| raw[p][c] == 0.0);
        }
        // Background stays a plain average of the planes.
        for p in 0..3 {
            raw[p][0] = 1.0;
            norm[p][0] = 1.0 / 3.0;
        }
        Ok(FusionWeights {
            raw,
            norm,
            trusted,
            total,
            flagged,
            connectivity,
            calibration_hash,
        })
    }
}

/// Estimates fusion weights from per-plane probability volumes over a
/// calibration set (indexed `[volume][plane]`, planes in `Plane::ALL`
/// order): argmax labeling, per-class CCA, reliability ratio, per-class
/// normalization.
pub fn estimate_weights(
    calibration: &[[ProbVolume; 3]],
    connectivity: Connectivity,
    calibration_hash: String,
) -> Result<FusionWeights> {
    if calibration.is_empty() {
        return Err(Error::Param("calibration set must be nonempty".into()));
    }
    let mut raw = [[0.0; NUM_CLASSES]; 3];
    let mut trusted = [[0u64; NUM_CLASSES]; 3];
    let mut total = [[0u64; NUM_CLASSES]; 3];
    for p in 0..3 {
        let labelings: Vec<LabelVolume> = calibration
            .iter()
            .map(|planes| argmax_labels(&planes[p]))
            .collect();
        for c in 1..=NUM_STRUCTURES as u8 {
            let sets: Vec<ComponentSet> = labelings
                .iter()
                .map(|lab| connected_components(lab, c, connectivity))
                .collect::<Result<_>>()?;
            let (t, tot) = plane_reliability_counts(&sets);
            trusted[p][c as usize] = t;
            total[p][c as usize] = tot;
            raw[p][c as usize] = if tot > 0 { t as f64 / tot as f64 } else { 0.0 };
        }
        // Background: every plane participates equally.
        raw[p][0] = 1.0;
        trusted[p][0] = 0;
        total[p][0] = 0;
    }
    Ok(FusionWeights::from_raw(
        raw,
        trusted,
        total,
        connectivity,
        calibration_hash,
    ))
}

/// Weighted per-class combination of the three per-plane probability
/// volumes, renormalized per voxel.
pub fn fuse_probs(per_plane: &[&ProbVolume; 3], weights: &FusionWeights) -> Result<ProbVolume> {
    let dims = per_plane[0].dims();
    let spacing = per_plane[0].spacing();
    for pv in per_plane.iter().skip(1) {
        if pv.dims() != dims {
            return Err(Error::Dim(format!(
                "per-plane probability volumes disagree: {:?} vs {dims:?}",
                pv.dims()
            )));
        }
    }
    let nvox = per_plane[0].num_voxels();
    let mut fused = vec![0.0; nvox * NUM_CLASSES];
    for vox in 0..nvox {
        let out = &mut fused[vox * NUM_CLASSES..(vox + 1) * NUM_CLASSES];
        for (p, pv) in per_plane.iter().enumerate() {
            let probs = pv.voxel_probs(vox);
            for c in 0..NUM_CLASSES {
                out[c] += weights.norm[p][c] * probs[c];
            }
        }
        let mass: f64 = out.iter().sum();
        if mass > 0.0 {
            for v in out.iter_mut() {
                *v /= mass;
            }
        } else {
            out.fill(1.0 / NUM_CLASSES as f64);
        }
    }
    ProbVolume::new(dims, spacing, fused)
}

/// Fused labeling: weighted combination followed by argmax.
pub fn fuse(per_plane: &[&ProbVolume; 3], weights: &FusionWeights) -> Result<LabelVolume> {
    Ok(argmax_labels(&fuse_probs(per_plane, weights)?))
}

/// Optional post-fusion filter: keeps only the largest connected component
/// of each structure class, relabeling the rest as background.
pub fn keep_largest_components(labels: &LabelVolume, conn: Connectivity) -> Result<LabelVolume> {
    let mut out = labels.labels().to_vec();
    for class in 1..=NUM_STRUCTURES as u8 {
        let set = connected_components(labels, class, conn)?;
        for comp in set.components.iter().skip(1) {
            for &idx in comp {
                out[idx] = 0;
            }
        }
    }
    LabelVolume::new(labels.dims(), labels.spacing(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob_volume_from(dims: (usize, usize, usize), rows: Vec<[f64; 8]>) -> ProbVolume {
        ProbVolume::new(dims, (1.0, 1.0, 1.0), rows.into_iter().flatten().collect()).unwrap()
    }

    /// Probability volume whose argmax reproduces `labels` with high margin.
    fn probs_for_labels(labels: &LabelVolume) -> ProbVolume {
        let rows: Vec<[f64; 8]> = labels
            .labels()
            .iter()
            .map(|&l| {
                let mut row = [0.02; 8];
                row[l as usize] = 0.86;
                row
            })
            .collect();
        ProbVolume::new(labels.dims(), labels.spacing(), rows.into_iter().flatten().collect())
            .unwrap()
    }

    #[test]
    fn argmax_definition_and_ties() {
        let mut bg = [0.9; 8];
        for c in 1..8 {
            bg[c] = 0.1 / 7.0;
        }
        let mut tied = [0.0; 8];
        tied[2] = 0.5;
        tied[3] = 0.5;
        let pv = prob_volume_from((2, 1, 1), vec![bg, tied]);
        let labels = argmax_labels(&pv);
        assert_eq!(labels.labels(), &[0, 2]);
    }

    #[test]
    fn argmax_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nvox = 4 * 4 * 4;
        let mut rows = Vec::with_capacity(nvox);
        for _ in 0..nvox {
            let mut row = [0.0; 8];
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.001..1.0);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            rows.push(row);
        }
        let pv = prob_volume_from((4, 4, 4), rows.clone());
        let labels = argmax_labels(&pv);
        for (vox, row) in rows.iter().enumerate() {
            let mut best = 0;
            for c in 1..8 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            assert_eq!(labels.labels()[vox], best as u8);
        }
    }

    #[test]
    fn empty_class_gives_empty_component_set() {
        let lab = LabelVolume::new((4, 4, 4), (1.0, 1.0, 1.0), vec![0u8; 64]).unwrap();
        let set = connected_components(&lab, 3, Connectivity::Face6).unwrap();
        assert!(set.components.is_empty());
        assert_eq!(set.total_size(), 0);
    }

    #[test]
    fn two_separated_cubes() {
        // Two 2x2x2 cubes of class 1 with a one-voxel gap along x.
        let dims = (5, 2, 2);
        let mut data = vec![0u8; 20];
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    data[x + 5 * (y + 2 * z)] = 1;
                    data[(x + 3) + 5 * (y + 2 * z)] = 1;
                }
            }
        }
        let lab = LabelVolume::new(dims, (1.0, 1.0, 1.0), data).unwrap();
        let set = connected_components(&lab, 1, Connectivity::Face6).unwrap();
        assert_eq!(set.components.len(), 2);
        assert_eq!(set.components[0].len(), 8);
        assert_eq!(set.components[1].len(), 8);
    }

    /// Independent flood fill used as the partition oracle.
    fn bfs_oracle(labels: &LabelVolume, class: u8) -> Vec<Vec<usize>> {
        let (dx, dy, dz) = labels.dims();
        let data = labels.labels();
        let mut seen = vec![false; data.len()];
        let mut comps = Vec::new();
        for start in 0..data.len() {
            if data[start] != class || seen[start] {
                continue;
            }
            let mut comp = vec![];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                comp.push(i);
                let (x, y, z) = (i % dx, (i / dx) % dy, i / (dx * dy));
                let mut push = |c: Option<usize>| {
                    if let Some(n) = c {
                        if data[n] == class && !seen[n] {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                };
                push((x > 0).then(|| i - 1));
                push((x + 1 < dx).then(|| i + 1));
                push((y > 0).then(|| i - dx));
                push((y + 1 < dy).then(|| i + dx));
                push((z > 0).then(|| i - dx * dy));
                push((z + 1 < dz).then(|| i + dx * dy));
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }

    #[test]
    fn cca_matches_bfs_oracle_and_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..25 {
            let data: Vec<u8> = (0..16 * 16 * 16).map(|_| rng.gen_range(0..3)).collect();
            let lab = LabelVolume::new((16, 16, 16), (1.0, 1.0, 1.0), data.clone()).unwrap();
            for class in 1..=2u8 {
                let set = connected_components(&lab, class, Connectivity::Face6).unwrap();
                assert_eq!(set.components, bfs_oracle(&lab, class));
                // Partition property: disjoint union equals the class mask.
                let mut covered = vec![false; data.len()];
                for comp in &set.components {
                    for &i in comp {
                        assert!(!covered[i], "components overlap");
                        covered[i] = true;
                    }
                }
                for (i, &l) in data.iter().enumerate() {
                    assert_eq!(covered[i], l == class);
                }
            }
        }
    }

    #[test]
    fn reliability_fixture_values() {
        let set = |sizes: &[usize]| ComponentSet {
            class_id: 1,
            components: sizes.iter().map(|&n| (0..n).collect()).collect(),
        };
        // Single volume, single component.
        assert_eq!(plane_reliability(&[set(&[42])]), Some(1.0));
        // Single volume, components 900/50/50.
        assert_eq!(plane_reliability(&[set(&[900, 50, 50])]), Some(0.9));
        // Two volumes, {80,20} and {60,40}: (80+60)/200.
        assert_eq!(plane_reliability(&[set(&[80, 20]), set(&[60, 40])]), Some(0.7));
        // All empty: flagged.
        assert_eq!(plane_reliability(&[set(&[]), set(&[])]), None);
    }

    #[test]
    fn reliability_decreases_with_fragmentation() {
        let set = |sizes: &[usize]| ComponentSet {
            class_id: 1,
            components: sizes.iter().map(|&n| (0..n).collect()).collect(),
        };
        // Splitting the largest component of a fixed-size prediction
        // strictly lowers the ratio.
        let single = plane_reliability(&[set(&[100])]).unwrap();
        let split2 = plane_reliability(&[set(&[60, 40])]).unwrap();
        let split3 = plane_reliability(&[set(&[40, 30, 30])]).unwrap();
        assert_eq!(single, 1.0);
        assert!(single > split2 && split2 > split3);
    }

    #[test]
    fn normalization_arithmetic() {
        let mut raw = [[0.0; 8]; 3];
        for p in 0..3 {
            raw[p][0] = 1.0;
        }
        raw[0][1] = 1.0;
        raw[1][1] = 0.5;
        raw[2][1] = 0.5;
        let w = FusionWeights::from_raw(
            raw,
            [[0; 8]; 3],
            [[0; 8]; 3],
            Connectivity::Face6,
            String::new(),
        );
        assert!((w.norm[0][1] - 0.5).abs() < 1e-12);
        assert!((w.norm[1][1] - 0.25).abs() < 1e-12);
        assert!((w.norm[2][1] - 0.25).abs() < 1e-12);
        // Class 2 has no predictions anywhere: uniform fallback, flagged.
        assert!(w.flagged[2]);
        for p in 0..3 {
            assert!((w.norm[p][2] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_planes_get_equal_weights() {
        let mut data = vec![0u8; 6 * 6 * 6];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    data[x + 6 * (y + 6 * z)] = 1;
                }
            }
        }
        data[5 + 6 * (5 + 6 * 5)] = 2;
        let lab = LabelVolume::new((6, 6, 6), (1.0, 1.0, 1.0), data).unwrap();
        let pv = probs_for_labels(&lab);
        let calib = vec![[pv.clone(), pv.clone(), pv.clone()]];
        let w = estimate_weights(&calib, Connectivity::Face6, String::new()).unwrap();
        for c in 1..=2usize {
            for p in 0..3 {
                assert!((w.norm[p][c] - 1.0 / 3.0).abs() < 1e-12);
                assert!((w.raw[p][c] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_file_round_trip_exact() {
        let mut raw = [[0.0; 8]; 3];
        let mut trusted = [[0u64; 8]; 3];
        let mut total = [[0u64; 8]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in 0..3 {
            for c in 1..8 {
                total[p][c] = rng.gen_range(10..1000);
                trusted[p][c] = rng.gen_range(1..=total[p][c]);
                raw[p][c] = trusted[p][c] as f64 / total[p][c] as f64;
            }
        }
        let w = FusionWeights::from_raw(raw, trusted, total, Connectivity::Full26, "abc123".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.txt");
        w.save(&path, "run0").unwrap();
        let loaded = FusionWeights::load(&path).unwrap();
        assert_eq!(loaded, w);
    }

    #[test]
    fn fusing_identical_volumes_reproduces_single_plane() {
        let mut data = vec![0u8; 4 * 4 * 4];
        data[21] = 3;
        data[22] = 3;
        data[37] = 5;
        let lab = LabelVolume::new((4, 4, 4), (1.0, 1.0, 1.0), data).unwrap();
        let pv = probs_for_labels(&lab);
        let mut w = FusionWeights::uniform();
        w.norm[0][3] = 0.7;
        w.norm[1][3] = 0.2;
        w.norm[2][3] = 0.1;
        let fused = fuse(&[&pv, &pv, &pv], &w).unwrap();
        assert_eq!(fused.labels(), argmax_labels(&pv).labels());
    }

    #[test]
    fn degenerate_weights_select_one_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let random_pv = |rng: &mut ChaCha8Rng| {
            let mut rows = Vec::new();
            for _ in 0..27 {
                let mut row = [0.0; 8];
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
                rows.push(row);
            }
            prob_volume_from((3, 3, 3), rows)
        };
        let (a, b, c) = (random_pv(&mut rng), random_pv(&mut rng), random_pv(&mut rng));
        let mut w = FusionWeights::uniform();
        for cl in 0..8 {
            w.norm[0][cl] = 1.0;
            w.norm[1][cl] = 0.0;
            w.norm[2][cl] = 0.0;
        }
        let fused = fuse(&[&a, &b, &c], &w).unwrap();
        assert_eq!(fused.labels(), argmax_labels(&a).labels());
    }

    #[test]
    fn fuse_matches_per_voxel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let random_pv = |rng: &mut ChaCha8Rng| {
            let mut rows = Vec::new();
            for _ in 0..5 * 4 * 3 {
                let mut row = [0.0; 8];
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
                rows.push(row);
            }
            prob_volume_from((5, 4, 3), rows)
        };
        let planes = [random_pv(&mut rng), random_pv(&mut rng), random_pv(&mut rng)];
        let mut raw = [[0.0; 8]; 3];
        for c in 0..8 {
            for p in 0..3 {
                raw[p][c] = rng.gen_range(0.1..1.0);
            }
        }
        let w = FusionWeights::from_raw(
            raw,
            [[0; 8]; 3],
            [[0; 8]; 3],
            Connectivity::Face6,
            String::new(),
        );
        let fused = fuse(&[&planes[0], &planes[1], &planes[2]], &w).unwrap();
        let fused_probs = fuse_probs(&[&planes[0], &planes[1], &planes[2]], &w).unwrap();
        for vox in 0..5 * 4 * 3 {
            // Oracle: weighted sum then argmax, lowest index on ties.
            let mut combo = [0.0; 8];
            for p in 0..3 {
                for c in 0..8 {
                    combo[c] += w.norm[p][c] * planes[p].voxel_probs(vox)[c];
                }
            }
            let mut best = 0;
            for c in 1..8 {
                if combo[c] > combo[best] {
                    best = c;
                }
            }
            assert_eq!(fused.labels()[vox], best as u8);
            // Renormalized distribution sums to 1.
            let sum: f64 = fused_probs.voxel_probs(vox).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn largest_component_filter() {
        let mut data = vec![0u8; 6 * 1 * 1];
        data[0] = 1;
        data[1] = 1;
        data[2] = 1;
        data[4] = 1;
        let lab = LabelVolume::new((6, 1, 1), (1.0, 1.0, 1.0), data).unwrap();
        let filtered = keep_largest_components(&lab, Connectivity::Face6).unwrap();
        assert_eq!(filtered.labels(), &[1, 1, 1, 0, 0, 0]);
    }
}
