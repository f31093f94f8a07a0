//! Per-structure evaluation: sensitivity, specificity, precision, Dice,
//! and mean symmetric surface-to-surface distance, with the whole-heart
//! aggregate and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, NUM_STRUCTURES, STRUCTURE_NAMES};

/// One-vs-rest voxel counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Exact one-vs-rest counts for `class_id`.
pub fn confusion(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dim(format!(
            "prediction dims {:?} differ from ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == class_id, g == class_id) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// The four overlap metrics derived from confusion counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub dice: f64,
}

/// sens = tp/(tp+fn); spec = tn/(tn+fp); prec = tp/(tp+fp);
/// dice = 2tp/(2tp+fp+fn). When a class is absent from both volumes
/// (tp+fp+fn = 0) the agreement is perfect: those metrics are 1.
pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    ScalarMetrics {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// Boundary voxels of `class_id`: class voxels with at least one face
/// neighbor outside the class; the volume border counts as outside.
/// Returned in physical millimeter coordinates.
fn boundary_points(vol: &LabelVolume, class_id: u8) -> Vec<[f64; 3]> {
    let (dx, dy, dz) = vol.dims();
    let (sx, sy, sz) = vol.spacing();
    let mut pts = Vec::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                if vol.at(x, y, z) != class_id {
                    continue;
                }
                let on_boundary = x == 0
                    || vol.at(x - 1, y, z) != class_id
                    || x + 1 == dx
                    || vol.at(x + 1, y, z) != class_id
                    || y == 0
                    || vol.at(x, y - 1, z) != class_id
                    || y + 1 == dy
                    || vol.at(x, y + 1, z) != class_id
                    || z == 0
                    || vol.at(x, y, z - 1) != class_id
                    || z + 1 == dz
                    || vol.at(x, y, z + 1) != class_id;
                if on_boundary {
                    pts.push([x as f64 * sx, y as f64 * sy, z as f64 * sz]);
                }
            }
        }
    }
    pts
}

/// Uniform-grid index over a point set for exact nearest-neighbor queries.
struct PointGrid {
    cell: f64,
    origin: [f64; 3],
    dims: [usize; 3],
    buckets: Vec<Vec<[f64; 3]>>,
}

impl PointGrid {
    fn build(points: &[[f64; 3]], cell: f64) -> PointGrid {
        let mut origin = [f64::INFINITY; 3];
        let mut top = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                origin[a] = origin[a].min(p[a]);
                top[a] = top[a].max(p[a]);
            }
        }
        let dims = std::array::from_fn(|a| ((top[a] - origin[a]) / cell) as usize + 1);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for p in points {
            let c: [usize; 3] =
                std::array::from_fn(|a| (((p[a] - origin[a]) / cell) as usize).min(dims[a] - 1));
            buckets[c[0] + dims[0] * (c[1] + dims[1] * c[2])].push(*p);
        }
        PointGrid {
            cell,
            origin,
            dims,
            buckets,
        }
    }

    fn cell_of(&self, p: &[f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    /// Exact nearest distance from `p` to the indexed set: expands square
    /// rings of cells; a best candidate at distance d rules out any ring r
    /// with (r-1)*cell > d.
    fn nearest_distance(&self, p: &[f64; 3]) -> f64 {
        let c = self.cell_of(p);
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) as i64 + 2;
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            if best.is_finite() && (r - 1) as f64 * self.cell > best {
                break;
            }
            self.scan_ring(&c, r, p, &mut best);
        }
        best
    }

    fn scan_ring(&self, center: &[i64; 3], r: i64, p: &[f64; 3], best: &mut f64) {
        let clamp = |v: i64, hi: usize| -> Option<usize> {
            (0..hi as i64).contains(&v).then_some(v as usize)
        };
        let mut visit = |cx: i64, cy: i64, cz: i64| {
            let (Some(x), Some(y), Some(z)) = (
                clamp(cx, self.dims[0]),
                clamp(cy, self.dims[1]),
                clamp(cz, self.dims[2]),
            ) else {
                return;
            };
            for q in &self.buckets[x + self.dims[0] * (y + self.dims[1] * z)] {
                let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt();
                if d < *best {
                    *best = d;
                }
            }
        };
        if r == 0 {
            visit(center[0], center[1], center[2]);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) == r {
                        visit(center[0] + dx, center[1] + dy, center[2] + dz);
                    }
                }
            }
        }
    }
}

/// Mean symmetric surface distance in millimeters between the `class_id`
/// boundaries of two labelings. Returns `None` (undefined, distinct from
/// zero) when either mask is empty.
pub fn surface_distance(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class_id: u8,
) -> Result<Option<f64>> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dim(format!(
            "prediction dims {:?} differ from ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let a = boundary_points(pred, class_id);
    let b = boundary_points(gt, class_id);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let (sx, sy, sz) = pred.spacing();
    let cell = sx.max(sy).max(sz);
    let grid_a = PointGrid::build(&a, cell);
    let grid_b = PointGrid::build(&b, cell);
    let sum_ab: f64 = a.iter().map(|p| grid_b.nearest_distance(p)).sum();
    let sum_ba: f64 = b.iter().map(|p| grid_a.nearest_distance(p)).sum();
    Ok(Some((sum_ab + sum_ba) / (a.len() + b.len()) as f64))
}

/// Metrics of one structure (or the whole-heart aggregate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub dice: f64,
    /// `None` marks an undefined surface distance (empty mask).
    pub s2s_mm: Option<f64>,
}

/// Full per-volume evaluation: seven structures plus their unweighted mean.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub volume_id: String,
    pub modality: String,
    pub weights_hash: String,
    pub per_structure: [StructureMetrics; NUM_STRUCTURES],
    pub whs: StructureMetrics,
}

/// Evaluates a predicted labeling against ground truth.
pub fn evaluate_volume(
    pred: &LabelVolume,
    gt: &LabelVolume,
    volume_id: &str,
    modality: &str,
    weights_hash: &str,
) -> Result<MetricsReport> {
    let mut per_structure = [StructureMetrics {
        sensitivity: 0.0,
        specificity: 0.0,
        precision: 0.0,
        dice: 0.0,
        s2s_mm: None,
    }; NUM_STRUCTURES];
    for class in 1..=NUM_STRUCTURES as u8 {
        let counts = confusion(pred, gt, class)?;
        let s = scalar_metrics(&counts);
        per_structure[class as usize - 1] = StructureMetrics {
            sensitivity: s.sensitivity,
            specificity: s.specificity,
            precision: s.precision,
            dice: s.dice,
            s2s_mm: surface_distance(pred, gt, class)?,
        };
    }
    let mean = |f: fn(&StructureMetrics) -> f64| {
        per_structure.iter().map(f).sum::<f64>() / NUM_STRUCTURES as f64
    };
    let s2s_mean = if per_structure.iter().all(|m| m.s2s_mm.is_some()) {
        Some(
            per_structure
                .iter()
                .map(|m| m.s2s_mm.expect("checked above"))
                .sum::<f64>()
                / NUM_STRUCTURES as f64,
        )
    } else {
        None
    };
    Ok(MetricsReport {
        volume_id: volume_id.to_string(),
        modality: modality.to_string(),
        weights_hash: weights_hash.to_string(),
        per_structure,
        whs: StructureMetrics {
            sensitivity: mean(|m| m.sensitivity),
            specificity: mean(|m| m.specificity),
            precision: mean(|m| m.precision),
            dice: mean(|m| m.dice),
            s2s_mm: s2s_mean,
        },
    })
}

const METRIC_ROWS: [&str; 5] = ["Sensitivity", "Specificity", "Precision", "DI", "S2S(mm)"];

fn metric_value(m: &StructureMetrics, row: &str) -> Option<f64> {
    match row {
        "Sensitivity" => Some(m.sensitivity),
        "Specificity" => Some(m.specificity),
        "Precision" => Some(m.precision),
        "DI" => Some(m.dice),
        "S2S(mm)" => m.s2s_mm,
        _ => unreachable!("unknown metric row"),
    }
}

fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NA".to_string(),
    }
}

/// Writes one per-volume CSV: metric rows by structure columns, with the
/// whole-heart column last and metadata in leading comment lines.
pub fn write_report_csv(report: &MetricsReport, path: &Path, run_id: &str) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# run_id = {run_id}").expect("string write");
    writeln!(out, "# volume = {}", report.volume_id).expect("string write");
    writeln!(out, "# modality = {}", report.modality).expect("string write");
    writeln!(out, "# weights_sha256 = {}", report.weights_hash).expect("string write");
    writeln!(
        out,
        "# S2S is the mean symmetric surface distance in mm; NA marks an empty mask"
    )
    .expect("string write");
    writeln!(out, "Metric,{},WHS", STRUCTURE_NAMES.join(",")).expect("string write");
    for row in METRIC_ROWS {
        let mut line = row.to_string();
        for m in &report.per_structure {
            line.push(',');
            line.push_str(&format_cell(metric_value(m, row)));
        }
        line.push(',');
        line.push_str(&format_cell(metric_value(&report.whs, row)));
        writeln!(out, "{line}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Linear-interpolation quantile of an already sorted sample.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

/// Writes the across-volume box-plot data file: per metric and structure
/// (plus WHS), the five-number summary over all reports. Undefined surface
/// distances are skipped; an all-undefined cell group becomes NA.
pub fn write_boxplot_csv(reports: &[MetricsReport], path: &Path, run_id: &str) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Param("box plot needs at least one report".into()));
    }
    let mut out = String::new();
    writeln!(out, "# run_id = {run_id}").expect("string write");
    writeln!(out, "metric,structure,min,q1,median,q3,max").expect("string write");
    let columns: Vec<&str> = STRUCTURE_NAMES.iter().copied().chain(["WHS"]).collect();
    for row in METRIC_ROWS {
        for (col_idx, structure) in columns.iter().enumerate() {
            let mut values: Vec<f64> = reports
                .iter()
                .filter_map(|r| {
                    let m = if col_idx < NUM_STRUCTURES {
                        &r.per_structure[col_idx]
                    } else {
                        &r.whs
                    };
                    metric_value(m, row)
                })
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
            let cells = if values.is_empty() {
                vec!["NA".to_string(); 5]
            } else {
                [0.0, 0.25, 0.5, 0.75, 1.0]
                    .iter()
                    .map(|&p| format!("{:.6}", quantile_sorted(&values, p)))
                    .collect()
            };
            writeln!(out, "{row},{structure},{}", cells.join(",")).expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelVolume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_from(dims: (usize, usize, usize), data: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let l = labels_from((3, 3, 3), (0..27).map(|i| (i % 8) as u8).collect());
        let c = confusion(&l, &l, 4).unwrap();
        assert_eq!(c.fp, 0);
        assert_eq!(c.fn_, 0);
        let s = scalar_metrics(&c);
        assert_eq!(
            (s.sensitivity, s.specificity, s.precision, s.dice),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn all_background_prediction_counts_misses() {
        let mut gt = vec![0u8; 27];
        gt[3] = 2;
        gt[10] = 2;
        gt[20] = 2;
        let gt = labels_from((3, 3, 3), gt);
        let pred = labels_from((3, 3, 3), vec![0u8; 27]);
        let c = confusion(&pred, &gt, 2).unwrap();
        assert_eq!(c.tp, 0);
        assert_eq!(c.fn_, 3);
        let s = scalar_metrics(&c);
        assert_eq!(s.sensitivity, 0.0);
        assert_eq!(s.dice, 0.0);
    }

    #[test]
    fn disjoint_masks_have_zero_dice() {
        let mut a = vec![0u8; 8];
        let mut b = vec![0u8; 8];
        a[0] = 1;
        a[1] = 1;
        b[6] = 1;
        b[7] = 1;
        let c = confusion(
            &labels_from((2, 2, 2), a),
            &labels_from((2, 2, 2), b),
            1,
        )
        .unwrap();
        let s = scalar_metrics(&c);
        assert_eq!(s.dice, 0.0);
        assert_eq!(s.precision, 0.0);
    }

    #[test]
    fn empty_empty_convention() {
        let l = labels_from((2, 2, 2), vec![0u8; 8]);
        let s = scalar_metrics(&confusion(&l, &l, 5).unwrap());
        assert_eq!((s.sensitivity, s.precision, s.dice), (1.0, 1.0, 1.0));
    }

    #[test]
    fn confusion_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let a: Vec<u8> = (0..512).map(|_| rng.gen_range(0..8)).collect();
            let b: Vec<u8> = (0..512).map(|_| rng.gen_range(0..8)).collect();
            let pred = labels_from((8, 8, 8), a.clone());
            let gt = labels_from((8, 8, 8), b.clone());
            for class in 1..=7u8 {
                let c = confusion(&pred, &gt, class).unwrap();
                let tp = a.iter().zip(&b).filter(|(x, y)| **x == class && **y == class).count() as u64;
                let fp = a.iter().zip(&b).filter(|(x, y)| **x == class && **y != class).count() as u64;
                let fn_ = a.iter().zip(&b).filter(|(x, y)| **x != class && **y == class).count() as u64;
                let tn = 512 - tp - fp - fn_;
                assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));
                assert_eq!(c.total(), 512);
            }
        }
    }

    #[test]
    fn identical_masks_have_zero_surface_distance() {
        let mut data = vec![0u8; 6 * 6 * 6];
        for z in 2..4 {
            for y in 2..4 {
                for x in 2..4 {
                    data[x + 6 * (y + 6 * z)] = 1;
                }
            }
        }
        let l = labels_from((6, 6, 6), data);
        assert_eq!(surface_distance(&l, &l, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn single_voxels_three_apart() {
        let mut a = vec![0u8; 7];
        let mut b = vec![0u8; 7];
        a[1] = 1;
        b[4] = 1;
        let pa = labels_from((7, 1, 1), a);
        let pb = labels_from((7, 1, 1), b);
        let d = surface_distance(&pa, &pb, 1).unwrap().unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_undefined_not_zero() {
        let empty = labels_from((3, 3, 3), vec![0u8; 27]);
        let mut one = vec![0u8; 27];
        one[13] = 1;
        let one = labels_from((3, 3, 3), one);
        assert_eq!(surface_distance(&empty, &one, 1).unwrap(), None);
        assert_eq!(surface_distance(&one, &empty, 1).unwrap(), None);
    }

    #[test]
    fn surface_distance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let make = |rng: &mut ChaCha8Rng| {
            let mut data = vec![0u8; 12 * 12 * 12];
            let cx = rng.gen_range(3..9) as f64;
            let cy = rng.gen_range(3..9) as f64;
            let cz = rng.gen_range(3..9) as f64;
            let r = rng.gen_range(1.5..3.0);
            for z in 0..12 {
                for y in 0..12 {
                    for x in 0..12 {
                        let d2 = (x as f64 - cx).powi(2)
                            + (y as f64 - cy).powi(2)
                            + (z as f64 - cz).powi(2);
                        if d2 <= r * r {
                            data[x + 12 * (y + 12 * z)] = 1;
                        }
                    }
                }
            }
            LabelVolume::new((12, 12, 12), (0.7, 1.0, 1.3), data).unwrap()
        };
        for _ in 0..5 {
            let a = make(&mut rng);
            let b = make(&mut rng);
            let (Some(d_ab), Some(d_ba)) = (
                surface_distance(&a, &b, 1).unwrap(),
                surface_distance(&b, &a, 1).unwrap(),
            ) else {
                continue;
            };
            assert!((d_ab - d_ba).abs() < 1e-12);
        }
    }

    #[test]
    fn whs_is_the_structure_mean() {
        let gt = labels_from((4, 4, 4), (0..64).map(|i| (i % 8) as u8).collect());
        let report = evaluate_volume(&gt, &gt, "v0", "ct", "-").unwrap();
        for f in [
            |m: &StructureMetrics| m.sensitivity,
            |m: &StructureMetrics| m.specificity,
            |m: &StructureMetrics| m.precision,
            |m: &StructureMetrics| m.dice,
        ] {
            let mean = report.per_structure.iter().map(f).sum::<f64>() / 7.0;
            assert!((f(&report.whs) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn report_csv_layout() {
        let gt = labels_from((4, 4, 4), (0..64).map(|i| (i % 8) as u8).collect());
        let report = evaluate_volume(&gt, &gt, "v0", "ct", "-").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_report_csv(&report, &path, "test-run").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], "Metric,Myo,LA,LV,RA,RV,Aorta,PA,WHS");
        assert_eq!(rows.len(), 6);
        assert!(rows[1].starts_with("Sensitivity,1.000000"));
        assert!(rows[4].starts_with("DI,1.000000"));
        assert!(rows[5].starts_with("S2S(mm),0.000000"));
    }

    #[test]
    fn quartiles_match_sort_oracle() {
        // Sorted five-point sample: R-7 quartiles interpolate linearly.
        let vals = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(quantile_sorted(&vals, 0.0), 1.0);
        assert_eq!(quantile_sorted(&vals, 0.25), 2.0);
        assert_eq!(quantile_sorted(&vals, 0.5), 3.0);
        assert_eq!(quantile_sorted(&vals, 0.75), 4.0);
        assert_eq!(quantile_sorted(&vals, 1.0), 10.0);
    }
}
