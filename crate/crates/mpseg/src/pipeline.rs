//! Stage orchestration behind the command-line tool: datasets on disk,
//! plane-parallel training and inference, and a run manifest per stage.
//!
//! Every stage writes `manifest-<command>-<runid>.txt` into its output
//! directory. The run id is a hash of the command, its resolved
//! parameters, and the input file hashes, so reruns with identical
//! configuration produce byte-identical artifacts; text artifacts embed
//! the id, binary volumes are traced through the manifest's output list.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::augment::build_augmented_set;
use crate::error::{Error, Result};
use crate::fusion::{estimate_weights, fuse, keep_largest_components, Connectivity, FusionWeights};
use crate::metrics::{evaluate_volume, write_boxplot_csv, write_report_csv, MetricsReport};
use crate::network::{
    build_network, infer_plane, load_model, save_model_with_meta, train_plane, NetworkConfig,
    PAD_MULTIPLE,
};
use crate::phantom::{generate_dataset, PhantomSpec};
use crate::preprocess::{anisotropic_diffusion, histogram_match, DiffusionParams};
use crate::util::derive_seed;
use crate::volume::{
    extract_label_slices, extract_slices, load_label_volume, load_prob_volume, load_scalar_volume,
    pad_labels_to_multiple, pad_to_multiple, save_labels, save_prob_volume, save_volume,
    LabelSlice2D, LabelVolume, Plane, ProbVolume, Slice2D, Volume3D,
};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("string write");
    }
    s
}

/// Record of one executed stage.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub command: String,
    pub run_id: String,
    pub params: Vec<(String, String)>,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(PathBuf, String)>,
}

impl Manifest {
    fn new(command: &str) -> Manifest {
        Manifest {
            command: command.to_string(),
            ..Default::default()
        }
    }

    fn param(&mut self, key: &str, value: impl ToString) {
        self.params.push((key.to_string(), value.to_string()));
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push((path.to_path_buf(), sha256_file(path)?));
        Ok(())
    }

    /// Derives the deterministic run id from command, parameters, and
    /// input hashes. Must be called after all params/inputs are recorded
    /// and before outputs are written.
    fn seal(&mut self) -> String {
        let mut text = self.command.clone();
        for (k, v) in &self.params {
            write!(text, "|{k}={v}").expect("string write");
        }
        for (p, h) in &self.inputs {
            write!(text, "|{}={h}", p.display()).expect("string write");
        }
        self.run_id = sha256_hex(text.as_bytes())[..16].to_string();
        self.run_id.clone()
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push((path.to_path_buf(), sha256_file(path)?));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut text = String::new();
        writeln!(text, "[run]").expect("string write");
        writeln!(text, "id = {}", self.run_id).expect("string write");
        writeln!(text, "command = {}", self.command).expect("string write");
        writeln!(text, "[params]").expect("string write");
        for (k, v) in &self.params {
            writeln!(text, "{k} = {v}").expect("string write");
        }
        writeln!(text, "[inputs]").expect("string write");
        for (p, h) in &self.inputs {
            writeln!(text, "{} = {h}", p.display()).expect("string write");
        }
        writeln!(text, "[outputs]").expect("string write");
        for (p, h) in &self.outputs {
            writeln!(text, "{} = {h}", p.display()).expect("string write");
        }
        let path = dir.join(format!("manifest-{}-{}.txt", self.command, self.run_id));
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Runs tasks on up to `jobs` worker threads, preserving result order.
pub(crate) fn run_parallel<T, F>(jobs: usize, tasks: Vec<F>) -> Result<Vec<T>>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    let jobs = jobs.max(1).min(tasks.len().max(1));
    if jobs == 1 {
        return tasks.into_iter().map(|t| t()).collect();
    }
    let n = tasks.len();
    let tasks: Vec<Mutex<Option<F>>> = tasks.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let task = tasks[i].lock().expect("task lock").take().expect("task taken once");
                *results[i].lock().expect("result lock") = Some(task());
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.into_inner().expect("result lock").expect("task ran"))
        .collect()
}

/// One dataset row: id plus image and label files (relative to the dir).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Reads `dataset.txt` (lines: `id image.mhd labels.mhd`).
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let index = dir.join("dataset.txt");
    let text = fs::read_to_string(&index).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(index.clone()),
        _ => Error::Io(e),
    })?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::MalformedHeader {
                path: index.clone(),
                msg: format!("dataset line needs `id image labels`, got {line:?}"),
            });
        }
        entries.push(DatasetEntry {
            id: parts[0].to_string(),
            image: dir.join(parts[1]),
            labels: dir.join(parts[2]),
        });
    }
    if entries.is_empty() {
        return Err(Error::Validation(format!("{} lists no volumes", index.display())));
    }
    Ok(entries)
}

fn write_dataset_index(dir: &Path, rows: &[(String, String, String)]) -> Result<PathBuf> {
    let mut text = String::new();
    for (id, img, lab) in rows {
        writeln!(text, "{id} {img} {lab}").expect("string write");
    }
    let path = dir.join("dataset.txt");
    fs::write(&path, text)?;
    Ok(path)
}

/// Parameters of the phantom stage.
#[derive(Debug, Clone)]
pub struct PhantomStage {
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub noise_sigma: f64,
    pub jitter: f64,
}

/// Generates a phantom dataset into `out_dir`.
pub fn run_phantom(stage: &PhantomStage, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("phantom");
    manifest.param("count", stage.count);
    manifest.param("seed", stage.seed);
    manifest.param("size", stage.size);
    manifest.param("noise_sigma", stage.noise_sigma);
    manifest.param("jitter", stage.jitter);
    manifest.seal();

    let mut template = PhantomSpec::scaled_default((stage.size, stage.size, stage.size));
    template.noise_sigma = stage.noise_sigma;
    let samples = generate_dataset(stage.count, stage.seed, &template, stage.jitter)?;
    let mut rows = Vec::new();
    for (i, (vol, lab)) in samples.iter().enumerate() {
        let id = format!("phantom_{i:03}");
        let img_name = format!("{id}_img.mhd");
        let lab_name = format!("{id}_lab.mhd");
        save_volume(vol, &out_dir.join(&img_name))?;
        save_labels(lab, &out_dir.join(&lab_name))?;
        for name in [&img_name, &lab_name] {
            manifest.output(&out_dir.join(name))?;
            manifest.output(&out_dir.join(name).with_extension("raw"))?;
        }
        rows.push((id, img_name, lab_name));
    }
    let index = write_dataset_index(out_dir, &rows)?;
    manifest.output(&index)?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Parameters of the preprocessing stage.
#[derive(Debug, Clone)]
pub struct PreprocessStage {
    pub diffusion: Option<DiffusionParams>,
    /// Histogram matching reference: a volume path, or `first` for the
    /// first volume of the dataset.
    pub hm_reference: Option<String>,
    pub hm_bins: usize,
}

fn resolve_reference(
    stage: &PreprocessStage,
    entries: &[DatasetEntry],
    data_dir: Option<&Path>,
) -> Result<Option<PathBuf>> {
    match stage.hm_reference.as_deref() {
        None => Ok(None),
        Some("first") => {
            if let Some(first) = entries.first() {
                Ok(Some(first.image.clone()))
            } else {
                Err(Error::Config(format!(
                    "--hm-reference first requires a dataset directory{}",
                    data_dir.map(|d| format!(" (got {})", d.display())).unwrap_or_default()
                )))
            }
        }
        Some(path) => Ok(Some(PathBuf::from(path))),
    }
}

/// Applies diffusion then (optionally) histogram matching to a whole
/// dataset directory, writing a new dataset into `out_dir` (labels are
/// copied through unchanged).
pub fn run_preprocess_dataset(
    data_dir: &Path,
    stage: &PreprocessStage,
    out_dir: &Path,
) -> Result<Manifest> {
    let entries = read_dataset(data_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("preprocess");
    record_preprocess_params(&mut manifest, stage);
    let reference = resolve_reference(stage, &entries, Some(data_dir))?;
    if let Some(r) = &reference {
        manifest.param("hm_reference_resolved", r.display().to_string());
        manifest.input(r)?;
    }
    for e in &entries {
        manifest.input(&e.image)?;
        manifest.input(&e.labels)?;
    }
    manifest.seal();

    let ref_volume = reference.as_deref().map(load_scalar_volume).transpose()?;
    let mut rows = Vec::new();
    for e in &entries {
        let vol = load_scalar_volume(&e.image)?;
        let processed = apply_preprocess(&vol, stage, ref_volume.as_ref())?;
        let img_name = file_name(&e.image)?;
        let lab_name = file_name(&e.labels)?;
        save_volume(&processed, &out_dir.join(&img_name))?;
        let labels = load_label_volume(&e.labels)?;
        save_labels(&labels, &out_dir.join(&lab_name))?;
        manifest.output(&out_dir.join(&img_name))?;
        manifest.output(&out_dir.join(&lab_name))?;
        rows.push((e.id.clone(), img_name, lab_name));
    }
    let index = write_dataset_index(out_dir, &rows)?;
    manifest.output(&index)?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Preprocesses one volume file.
pub fn run_preprocess_single(
    input: &Path,
    stage: &PreprocessStage,
    out_dir: &Path,
) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("preprocess");
    record_preprocess_params(&mut manifest, stage);
    manifest.input(input)?;
    let reference = resolve_reference(stage, &[], None)?;
    if let Some(r) = &reference {
        manifest.input(r)?;
    }
    manifest.seal();

    let vol = load_scalar_volume(input)?;
    let ref_volume = reference.as_deref().map(load_scalar_volume).transpose()?;
    let processed = apply_preprocess(&vol, stage, ref_volume.as_ref())?;
    let out_path = out_dir.join(file_name(input)?);
    save_volume(&processed, &out_path)?;
    manifest.output(&out_path)?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

fn record_preprocess_params(manifest: &mut Manifest, stage: &PreprocessStage) {
    match &stage.diffusion {
        Some(d) => {
            manifest.param("diff_iters", d.iterations);
            manifest.param("diff_kappa", d.kappa);
            manifest.param("diff_lambda", d.lambda);
        }
        None => manifest.param("diffusion", "off"),
    }
    manifest.param("hm_bins", stage.hm_bins);
    manifest.param(
        "hm_reference",
        stage.hm_reference.clone().unwrap_or_else(|| "off".into()),
    );
    // Order is fixed: diffusion first, then histogram matching.
    manifest.param("order", "diffusion,histogram_match");
}

fn apply_preprocess(
    vol: &Volume3D,
    stage: &PreprocessStage,
    reference: Option<&Volume3D>,
) -> Result<Volume3D> {
    let mut cur = vol.clone();
    if let Some(d) = &stage.diffusion {
        cur = anisotropic_diffusion(&cur, d)?;
    }
    if let Some(r) = reference {
        cur = histogram_match(&cur, r, stage.hm_bins)?;
    }
    Ok(cur)
}

fn file_name(path: &Path) -> Result<String> {
    Ok(path
        .file_name()
        .ok_or_else(|| Error::Param(format!("path {} has no file name", path.display())))?
        .to_string_lossy()
        .to_string())
}

/// Parameters of the augmentation-preview stage.
#[derive(Debug, Clone)]
pub struct AugmentPreviewStage {
    pub plane: Plane,
    /// Slice index within the plane; the middle slice when omitted.
    pub slice_index: Option<usize>,
    pub multiplier: usize,
    pub seed: u64,
}

/// Applies the augmentation pipeline to one slice of the first dataset
/// volume and writes every generated sample (as one-slice volumes) plus a
/// summary of the drawn parameters, for visual inspection.
pub fn run_augment_preview(
    data_dir: &Path,
    stage: &AugmentPreviewStage,
    out_dir: &Path,
) -> Result<Manifest> {
    let entries = read_dataset(data_dir)?;
    let entry = &entries[0];
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("augment-preview");
    manifest.param("plane", stage.plane.name());
    manifest.param("multiplier", stage.multiplier);
    manifest.param("seed", stage.seed);
    manifest.input(&entry.image)?;
    manifest.input(&entry.labels)?;

    let vol = load_scalar_volume(&entry.image)?;
    let lab = load_label_volume(&entry.labels)?;
    let count = stage.plane.slice_count(vol.dims());
    let index = stage.slice_index.unwrap_or(count / 2);
    if index >= count {
        return Err(Error::Param(format!(
            "slice index {index} out of range for {count} {} slices",
            stage.plane.name()
        )));
    }
    manifest.param("slice_index", index);
    manifest.seal();

    let image = extract_slices(&vol, stage.plane).swap_remove(index);
    let labels = extract_label_slices(&lab, stage.plane).swap_remove(index);
    let samples = build_augmented_set(&[(image, labels)], stage.multiplier, stage.seed)?;

    let mut summary = format!("# run_id = {}\n# sample rotation_k zoom_scale seed\n", manifest.run_id);
    for (k, sample) in samples.iter().enumerate() {
        let (nx, ny) = (sample.image.nx, sample.image.ny);
        let img_vol = Volume3D::new((nx, ny, 1), (1.0, 1.0, 1.0), sample.image.data.clone())?;
        let lab_vol = LabelVolume::new((nx, ny, 1), (1.0, 1.0, 1.0), sample.labels.data.clone())?;
        let img_path = out_dir.join(format!("aug_{k:02}_img.mhd"));
        let lab_path = out_dir.join(format!("aug_{k:02}_lab.mhd"));
        save_volume(&img_vol, &img_path)?;
        save_labels(&lab_vol, &lab_path)?;
        manifest.output(&img_path)?;
        manifest.output(&lab_path)?;
        match &sample.spec {
            Some(s) => writeln!(summary, "{k} {} {:?} {}", s.rotation_k, s.zoom_scale, s.seed)
                .expect("string write"),
            None => writeln!(summary, "{k} original").expect("string write"),
        }
    }
    let summary_path = out_dir.join("aug_preview.txt");
    fs::write(&summary_path, summary)?;
    manifest.output(&summary_path)?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Parameters of the training stage.
#[derive(Debug, Clone)]
pub struct TrainStage {
    pub modality: String,
    pub config: NetworkConfig,
    pub aug_multiplier: usize,
    pub jobs: usize,
}

fn plane_training_samples(
    volumes: &[(Volume3D, LabelVolume)],
    plane: Plane,
    aug_multiplier: usize,
    seed: u64,
) -> Result<Vec<(Slice2D, LabelSlice2D)>> {
    let mut pairs = Vec::new();
    for (vol, lab) in volumes {
        let images = extract_slices(vol, plane);
        let labels = extract_label_slices(lab, plane);
        pairs.extend(images.into_iter().zip(labels));
    }
    let augmented = build_augmented_set(&pairs, aug_multiplier, seed)?;
    augmented
        .into_iter()
        .map(|s| {
            let (img, _) = pad_to_multiple(&s.image, PAD_MULTIPLE)?;
            let (lab, _) = pad_labels_to_multiple(&s.labels, PAD_MULTIPLE)?;
            Ok((img, lab))
        })
        .collect()
}

/// Trains one network per plane (parallel up to `jobs`) and writes
/// `{modality}_{plane}.model` plus a per-plane loss log.
pub fn run_train(data_dir: &Path, stage: &TrainStage, out_dir: &Path) -> Result<Manifest> {
    stage.config.validate()?;
    let entries = read_dataset(data_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("train");
    manifest.param("modality", &stage.modality);
    manifest.param("base_filters", stage.config.base_filters);
    manifest.param("epochs", stage.config.epochs);
    manifest.param("batch_size", stage.config.batch_size);
    manifest.param("learning_rate", stage.config.learning_rate);
    manifest.param("momentum", stage.config.momentum);
    manifest.param("seed", stage.config.seed);
    manifest.param("aug_multiplier", stage.aug_multiplier);
    manifest.param("jobs", stage.jobs);
    for e in &entries {
        manifest.input(&e.image)?;
        manifest.input(&e.labels)?;
    }
    let run_id = manifest.seal();

    let volumes: Vec<(Volume3D, LabelVolume)> = entries
        .iter()
        .map(|e| Ok((load_scalar_volume(&e.image)?, load_label_volume(&e.labels)?)))
        .collect::<Result<_>>()?;

    let tasks: Vec<_> = Plane::ALL
        .iter()
        .enumerate()
        .map(|(idx, &plane)| {
            let volumes = &volumes;
            let stage = &stage;
            move || -> Result<(Plane, crate::network::PlaneModel)> {
                let mut config = stage.config.clone();
                config.seed = derive_seed(stage.config.seed, idx as u64);
                let samples = plane_training_samples(
                    volumes,
                    plane,
                    stage.aug_multiplier,
                    derive_seed(stage.config.seed, 100 + idx as u64),
                )?;
                let mut model = build_network(plane, &config)?;
                train_plane(&mut model, &samples)?;
                Ok((plane, model))
            }
        })
        .collect();
    let models = run_parallel(stage.jobs, tasks)?;

    for (plane, model) in &models {
        let model_path = out_dir.join(format!("{}_{}.model", stage.modality, plane.name()));
        save_model_with_meta(model, &model_path, &[("run_id".to_string(), run_id.clone())])?;
        manifest.output(&model_path)?;
        let mut log = format!("# run_id = {run_id}\n# epoch mean_loss\n");
        for (epoch, loss) in model.training_log.iter().enumerate() {
            writeln!(log, "{epoch} {loss:?}").expect("string write");
        }
        let log_path = out_dir.join(format!("{}_{}_loss.txt", stage.modality, plane.name()));
        fs::write(&log_path, log)?;
        manifest.output(&log_path)?;
    }
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Loads the three plane models `{modality}_{plane}.model` from a directory.
pub fn load_plane_models(
    models_dir: &Path,
    modality: &str,
) -> Result<[crate::network::PlaneModel; 3]> {
    let mut loaded = Vec::with_capacity(3);
    for plane in Plane::ALL {
        let path = models_dir.join(format!("{modality}_{}.model", plane.name()));
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let model = load_model(&path)?;
        if model.plane != plane {
            return Err(Error::Validation(format!(
                "{} declares plane {}, expected {}",
                path.display(),
                model.plane.name(),
                plane.name()
            )));
        }
        loaded.push(model);
    }
    Ok(loaded.try_into().expect("exactly three planes"))
}

/// Parameters of the prediction stage.
#[derive(Debug, Clone)]
pub struct PredictStage {
    pub modality: String,
    pub jobs: usize,
}

/// Runs per-plane inference for each input volume, writing
/// `{stem}_{plane}.prob.mhd` triples into `out_dir`.
pub fn run_predict(
    models_dir: &Path,
    inputs: &[PathBuf],
    stage: &PredictStage,
    out_dir: &Path,
) -> Result<Manifest> {
    if inputs.is_empty() {
        return Err(Error::Param("predict needs at least one input volume".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("predict");
    manifest.param("modality", &stage.modality);
    manifest.param("jobs", stage.jobs);
    let models = load_plane_models(models_dir, &stage.modality)?;
    for plane in Plane::ALL {
        manifest.input(&models_dir.join(format!("{}_{}.model", stage.modality, plane.name())))?;
    }
    for input in inputs {
        manifest.input(input)?;
    }
    manifest.seal();

    for input in inputs {
        let vol = load_scalar_volume(input)?;
        let stem = stem_of(input)?;
        let tasks: Vec<_> = models
            .iter()
            .map(|model| {
                let vol = &vol;
                move || infer_plane(model, vol)
            })
            .collect();
        let probs = run_parallel(stage.jobs, tasks)?;
        for (plane, pv) in Plane::ALL.iter().zip(probs) {
            let path = out_dir.join(format!("{stem}_{}.prob.mhd", plane.name()));
            save_prob_volume(&pv, &path)?;
            manifest.output(&path)?;
            manifest.output(&path.with_extension("raw"))?;
        }
    }
    manifest.write(out_dir)?;
    Ok(manifest)
}

fn stem_of(path: &Path) -> Result<String> {
    Ok(path
        .file_stem()
        .ok_or_else(|| Error::Param(format!("path {} has no stem", path.display())))?
        .to_string_lossy()
        .to_string())
}

/// Finds all prediction triples (`{stem}_{plane}.prob.mhd` for all three
/// planes) in a directory, sorted by stem.
pub fn find_prediction_stems(preds_dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(preds_dir)? {
        let name = entry?.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix("_axial.prob.mhd") {
            let complete = Plane::ALL.iter().all(|p| {
                preds_dir
                    .join(format!("{stem}_{}.prob.mhd", p.name()))
                    .exists()
            });
            if complete {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_prediction_triple(preds_dir: &Path, stem: &str) -> Result<[ProbVolume; 3]> {
    let mut triple = Vec::with_capacity(3);
    for plane in Plane::ALL {
        let path = preds_dir.join(format!("{stem}_{}.prob.mhd", plane.name()));
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        triple.push(load_prob_volume(&path)?);
    }
    Ok(triple.try_into().expect("exactly three planes"))
}

/// Parameters of the weight-calibration stage.
#[derive(Debug, Clone)]
pub struct CalibrateStage {
    pub connectivity: Connectivity,
}

/// Estimates fusion weights from every prediction triple found in
/// `preds_dir` and writes `weights.txt` into `out_dir`.
pub fn run_fuse_calibrate(
    preds_dir: &Path,
    stage: &CalibrateStage,
    out_dir: &Path,
) -> Result<Manifest> {
    let stems = find_prediction_stems(preds_dir)?;
    if stems.is_empty() {
        return Err(Error::MissingInput(preds_dir.join("*_axial.prob.mhd")));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("fuse-calibrate");
    manifest.param("connectivity", stage.connectivity.as_str());
    manifest.param("calibration_set", stems.join(","));
    for stem in &stems {
        for plane in Plane::ALL {
            manifest.input(&preds_dir.join(format!("{stem}_{}.prob.mhd", plane.name())))?;
        }
    }
    let run_id = manifest.seal();

    let calibration: Vec<[ProbVolume; 3]> = stems
        .iter()
        .map(|stem| load_prediction_triple(preds_dir, stem))
        .collect::<Result<_>>()?;
    // The calibration-set hash covers the stem list and input file hashes.
    let mut hash_text = stems.join(",");
    for (p, h) in &manifest.inputs {
        writeln!(hash_text, "{} {h}", p.display()).expect("string write");
    }
    let calibration_hash = sha256_hex(hash_text.as_bytes());
    let weights = estimate_weights(&calibration, stage.connectivity, calibration_hash)?;
    let weights_path = out_dir.join("weights.txt");
    weights.save(&weights_path, &run_id)?;
    manifest.output(&weights_path)?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Parameters of the fusion stage.
#[derive(Debug, Clone)]
pub struct FuseStage {
    /// Stems to fuse; empty means every triple in the directory.
    pub stems: Vec<String>,
    pub largest_component: bool,
}

/// Fuses prediction triples with precomputed weights, writing
/// `{stem}_fused.mhd` label volumes.
pub fn run_fuse(
    preds_dir: &Path,
    weights_path: &Path,
    stage: &FuseStage,
    out_dir: &Path,
) -> Result<Manifest> {
    let weights = FusionWeights::load(weights_path)?;
    let stems = if stage.stems.is_empty() {
        find_prediction_stems(preds_dir)?
    } else {
        stage.stems.clone()
    };
    if stems.is_empty() {
        return Err(Error::MissingInput(preds_dir.join("*_axial.prob.mhd")));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("fuse");
    manifest.param("largest_component", stage.largest_component);
    manifest.param("stems", stems.join(","));
    manifest.input(weights_path)?;
    for stem in &stems {
        for plane in Plane::ALL {
            manifest.input(&preds_dir.join(format!("{stem}_{}.prob.mhd", plane.name())))?;
        }
    }
    manifest.seal();

    for stem in &stems {
        let triple = load_prediction_triple(preds_dir, stem)?;
        let mut fused = fuse(&[&triple[0], &triple[1], &triple[2]], &weights)?;
        if stage.largest_component {
            fused = keep_largest_components(&fused, weights.connectivity)?;
        }
        let path = out_dir.join(format!("{stem}_fused.mhd"));
        save_labels(&fused, &path)?;
        manifest.output(&path)?;
        manifest.output(&path.with_extension("raw"))?;
    }
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// One prediction/ground-truth pair for evaluation.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub pred: PathBuf,
    pub gt: PathBuf,
}

/// Parameters of the evaluation stage.
#[derive(Debug, Clone)]
pub struct EvaluateStage {
    pub modality: String,
    pub weights_path: Option<PathBuf>,
}

/// Evaluates each pair, writing `{id}_metrics.csv` per volume and a
/// `boxplot.csv` across volumes.
pub fn run_evaluate(
    pairs: &[EvalPair],
    stage: &EvaluateStage,
    out_dir: &Path,
) -> Result<(Manifest, Vec<MetricsReport>)> {
    if pairs.is_empty() {
        return Err(Error::Param("evaluate needs at least one pred/gt pair".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("evaluate");
    manifest.param("modality", &stage.modality);
    let weights_hash = match &stage.weights_path {
        Some(p) => {
            manifest.input(p)?;
            sha256_file(p)?
        }
        None => "-".to_string(),
    };
    for pair in pairs {
        manifest.input(&pair.pred)?;
        manifest.input(&pair.gt)?;
    }
    let run_id = manifest.seal();

    let mut reports = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let pred = load_label_volume(&pair.pred)?;
        let gt = load_label_volume(&pair.gt)?;
        let report = evaluate_volume(&pred, &gt, &pair.id, &stage.modality, &weights_hash)?;
        let csv_path = out_dir.join(format!("{}_metrics.csv", pair.id));
        write_report_csv(&report, &csv_path, &run_id)?;
        manifest.output(&csv_path)?;
        reports.push(report);
    }
    let box_path = out_dir.join("boxplot.csv");
    write_boxplot_csv(&reports, &box_path, &run_id)?;
    manifest.output(&box_path)?;
    manifest.write(out_dir)?;
    Ok((manifest, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_parallel_preserves_order_any_job_count() {
        for jobs in [1, 2, 3, 8] {
            let tasks: Vec<_> = (0..7)
                .map(|i| move || -> Result<usize> { Ok(i * i) })
                .collect();
            let out = run_parallel(jobs, tasks).unwrap();
            assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
        }
    }

    #[test]
    fn manifest_id_is_deterministic_and_input_sensitive() {
        let mut a = Manifest::new("train");
        a.param("seed", 7);
        let id_a = a.seal();
        let mut b = Manifest::new("train");
        b.param("seed", 7);
        assert_eq!(id_a, b.seal());
        let mut c = Manifest::new("train");
        c.param("seed", 8);
        assert_ne!(id_a, c.seal());
    }

    #[test]
    fn phantom_stage_writes_a_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let stage = PhantomStage {
            count: 2,
            seed: 3,
            size: 16,
            noise_sigma: 2.0,
            jitter: 0.05,
        };
        run_phantom(&stage, dir.path()).unwrap();
        let entries = read_dataset(dir.path()).unwrap();
        assert_eq!(entries.len(), 2);
        let vol = load_scalar_volume(&entries[0].image).unwrap();
        assert_eq!(vol.dims(), (16, 16, 16));
        load_label_volume(&entries[0].labels).unwrap();
    }
}
