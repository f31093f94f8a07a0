//! The per-plane encoder-decoder segmentation network: twelve 3x3
//! convolutions per side, two max-pool and two bilinear-upsample stages,
//! batch normalization and ReLU after every convolution except the last,
//! which emits one channel per class and feeds a channel softmax.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    read_model_file, write_model_file, BnMode, BnState, NamedTensor, SgdState, Tape, Tensor, ValId,
};
use crate::util::derive_seed;
use crate::volume::{
    crop_prob_slice, extract_slices, pad_to_multiple, restack_probs, LabelSlice2D, Plane,
    ProbSlice2D, ProbVolume, Slice2D, Volume3D, NUM_CLASSES,
};

/// Spatial dimensions must divide this (two pooling stages of factor 2).
pub const PAD_MULTIPLE: usize = 4;

/// Convolutions per side stated by the architecture.
const CONVS_PER_SIDE: usize = 12;

/// Hyperparameters of one plane network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub base_filters: usize,
    pub encoder_layout: Vec<usize>,
    pub decoder_layout: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: NUM_CLASSES,
            base_filters: 8,
            encoder_layout: vec![4, 4, 4],
            decoder_layout: vec![4, 4, 4],
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 60,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be >= 1".into()));
        }
        for (side, layout) in [("encoder", &self.encoder_layout), ("decoder", &self.decoder_layout)]
        {
            if layout.len() != 3 || layout.iter().any(|&c| c == 0) {
                return Err(Error::Config(format!(
                    "{side} layout must have 3 stages (2 pool/upsample steps), got {layout:?}"
                )));
            }
            let total: usize = layout.iter().sum();
            if total != CONVS_PER_SIDE {
                return Err(Error::Config(format!(
                    "{side} layout {layout:?} has {total} convolutions; the architecture uses {CONVS_PER_SIDE} per side"
                )));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One step of the architecture walk; indices refer to the model's conv
/// and batch-norm layer lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchStep {
    Conv(usize),
    BatchNorm(usize),
    Relu,
    Pool,
    Upsample,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_c: usize,
    pub out_c: usize,
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BnState,
}

/// One trained (or trainable) plane network.
#[derive(Debug, Clone)]
pub struct PlaneModel {
    pub plane: Plane,
    pub config: NetworkConfig,
    pub convs: Vec<ConvLayer>,
    pub bns: Vec<BnLayer>,
    pub arch: Vec<ArchStep>,
    /// Mean training loss per epoch.
    pub training_log: Vec<f64>,
}

/// Channel plan: (in, out) per convolution in walk order, with the final
/// convolution emitting `num_classes` channels.
fn channel_plan(config: &NetworkConfig) -> Vec<(usize, usize)> {
    let bf = config.base_filters;
    let mut plan = Vec::with_capacity(24);
    let mut prev = 1usize;
    for (stage, &count) in config.encoder_layout.iter().enumerate() {
        let filters = bf << stage;
        for _ in 0..count {
            plan.push((prev, filters));
            prev = filters;
        }
    }
    for (stage, &count) in config.decoder_layout.iter().enumerate() {
        let filters = bf << (2 - stage);
        for _ in 0..count {
            plan.push((prev, filters));
            prev = filters;
        }
    }
    let last = plan.len() - 1;
    plan[last].1 = config.num_classes;
    plan
}

/// Builds the walk sequence corresponding to the layouts.
fn build_arch(config: &NetworkConfig) -> Vec<ArchStep> {
    let mut arch = Vec::new();
    let mut conv_idx = 0;
    let mut push_convs = |arch: &mut Vec<ArchStep>, count: usize| {
        for _ in 0..count {
            arch.push(ArchStep::Conv(conv_idx));
            arch.push(ArchStep::BatchNorm(conv_idx));
            arch.push(ArchStep::Relu);
            conv_idx += 1;
        }
    };
    for (stage, &count) in config.encoder_layout.iter().enumerate() {
        push_convs(&mut arch, count);
        if stage < 2 {
            arch.push(ArchStep::Pool);
        }
    }
    for (stage, &count) in config.decoder_layout.iter().enumerate() {
        if stage > 0 {
            arch.push(ArchStep::Upsample);
        }
        push_convs(&mut arch, count);
    }
    // The final convolution is followed by softmax only.
    arch.truncate(arch.len() - 2);
    arch.push(ArchStep::Softmax);
    arch
}

/// Constructs a plane network with fan-in-scaled uniform initialization
/// (weights drawn from U(-sqrt(3/fan_in), +sqrt(3/fan_in)), biases zero,
/// batch-norm gamma 1 / beta 0) from the config seed.
pub fn build_network(plane: Plane, config: &NetworkConfig) -> Result<PlaneModel> {
    config.validate()?;
    let plan = channel_plan(config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let mut convs = Vec::with_capacity(plan.len());
    let mut bns = Vec::with_capacity(plan.len().saturating_sub(1));
    for (li, &(in_c, out_c)) in plan.iter().enumerate() {
        let fan_in = (in_c * 9) as f64;
        let a = (3.0 / fan_in).sqrt();
        let mut weight = Tensor::zeros(&[out_c, in_c, 3, 3]);
        for v in weight.data_mut() {
            *v = rng.gen_range(-a..=a);
        }
        convs.push(ConvLayer {
            weight: weight.with_grad(),
            bias: Tensor::zeros(&[out_c]).with_grad(),
            in_c,
            out_c,
        });
        if li + 1 < plan.len() {
            bns.push(BnLayer {
                gamma: Tensor::filled(&[out_c], 1.0).with_grad(),
                beta: Tensor::zeros(&[out_c]).with_grad(),
                state: BnState::new(out_c),
            });
        }
    }
    Ok(PlaneModel {
        plane,
        config: config.clone(),
        convs,
        bns,
        arch: build_arch(config),
        training_log: Vec::new(),
    })
}

/// Structural audit of a built network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchAudit {
    pub encoder_convs: usize,
    pub decoder_convs: usize,
    pub pools: usize,
    pub upsamples: usize,
    pub final_channels: usize,
    /// Every convolution except the last is followed by batch norm then
    /// ReLU; the last is followed by softmax only.
    pub bn_relu_pattern_holds: bool,
}

impl PlaneModel {
    /// Trainable parameter count (conv weights and biases, batch-norm
    /// gamma and beta).
    pub fn parameter_count(&self) -> usize {
        let conv: usize = self
            .convs
            .iter()
            .map(|c| c.weight.numel() + c.bias.numel())
            .sum();
        let bn: usize = self.bns.iter().map(|b| b.gamma.numel() + b.beta.numel()).sum();
        conv + bn
    }

    /// Walks the architecture and reports its structure.
    pub fn audit(&self) -> ArchAudit {
        let encoder_convs: usize = self.config.encoder_layout.iter().sum();
        let mut convs_seen = 0;
        let mut pools = 0;
        let mut upsamples = 0;
        let mut pattern = true;
        let steps = &self.arch;
        for (i, step) in steps.iter().enumerate() {
            match step {
                ArchStep::Conv(k) => {
                    convs_seen += 1;
                    let is_last = *k == self.convs.len() - 1;
                    if is_last {
                        pattern &= matches!(steps.get(i + 1), Some(ArchStep::Softmax));
                    } else {
                        pattern &= matches!(steps.get(i + 1), Some(ArchStep::BatchNorm(j)) if j == k)
                            && matches!(steps.get(i + 2), Some(ArchStep::Relu));
                    }
                }
                ArchStep::Pool => pools += 1,
                ArchStep::Upsample => upsamples += 1,
                _ => {}
            }
        }
        ArchAudit {
            encoder_convs,
            decoder_convs: convs_seen - encoder_convs,
            pools,
            upsamples,
            final_channels: self.convs.last().map_or(0, |c| c.out_c),
            bn_relu_pattern_holds: pattern,
        }
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for c in &self.convs {
            sizes.push(c.weight.numel());
            sizes.push(c.bias.numel());
        }
        for b in &self.bns {
            sizes.push(b.gamma.numel());
            sizes.push(b.beta.numel());
        }
        sizes
    }
}

/// Tape handles of every parameter placed on a training tape.
struct TapeBinding {
    ids: Vec<ValId>,
}

/// Runs the architecture walk on a tape, returning the logits (softmax is
/// applied separately at inference). Train mode updates running statistics.
fn forward_on_tape(
    model: &mut PlaneModel,
    tape: &mut Tape,
    x: ValId,
    mode: BnMode,
) -> Result<(ValId, TapeBinding)> {
    let mut conv_ids = Vec::with_capacity(model.convs.len());
    for c in &model.convs {
        let w = tape.input(c.weight.clone());
        let b = tape.input(c.bias.clone());
        conv_ids.push((w, b));
    }
    let mut bn_ids = Vec::with_capacity(model.bns.len());
    for b in &model.bns {
        let g = tape.input(b.gamma.clone());
        let bt = tape.input(b.beta.clone());
        bn_ids.push((g, bt));
    }

    let mut cur = x;
    for step in &model.arch {
        cur = match step {
            ArchStep::Conv(k) => tape.conv2d(cur, conv_ids[*k].0, conv_ids[*k].1)?,
            ArchStep::BatchNorm(k) => {
                let (g, bt) = bn_ids[*k];
                tape.batchnorm(cur, g, bt, &mut model.bns[*k].state, mode)?
            }
            ArchStep::Relu => tape.relu(cur)?,
            ArchStep::Pool => tape.maxpool2(cur)?,
            ArchStep::Upsample => tape.upsample2(cur)?,
            ArchStep::Softmax => cur, // training consumes logits directly
        };
    }
    let mut ids = Vec::new();
    for (w, b) in conv_ids {
        ids.push(w);
        ids.push(b);
    }
    for (g, b) in bn_ids {
        ids.push(g);
        ids.push(b);
    }
    Ok((cur, TapeBinding { ids }))
}

/// Pure inference walk over flat buffers (running batch-norm statistics,
/// no tape), ending in channel softmax probabilities.
fn forward_infer(model: &PlaneModel, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    use crate::tensor::ops;
    let mut cur = input.to_vec();
    let mut c = 1usize;
    let (mut ch, mut cw) = (h, w);
    for step in &model.arch {
        match step {
            ArchStep::Conv(k) => {
                let layer = &model.convs[*k];
                let mut out = vec![0.0; layer.out_c * ch * cw];
                ops::conv2d_forward(
                    &cur,
                    c,
                    ch,
                    cw,
                    layer.weight.data(),
                    layer.out_c,
                    layer.bias.data(),
                    &mut out,
                );
                cur = out;
                c = layer.out_c;
            }
            ArchStep::BatchNorm(k) => {
                let layer = &model.bns[*k];
                let mut out = vec![0.0; cur.len()];
                ops::batchnorm_infer(
                    &cur,
                    1,
                    c,
                    ch * cw,
                    layer.gamma.data(),
                    layer.beta.data(),
                    &layer.state,
                    &mut out,
                );
                cur = out;
            }
            ArchStep::Relu => {
                for v in &mut cur {
                    *v = v.max(0.0);
                }
            }
            ArchStep::Pool => {
                let mut out = vec![0.0; c * (ch / 2) * (cw / 2)];
                let mut argmax = vec![0usize; out.len()];
                ops::maxpool2_forward(&cur, c, ch, cw, &mut out, &mut argmax);
                cur = out;
                ch /= 2;
                cw /= 2;
            }
            ArchStep::Upsample => {
                let mut out = vec![0.0; c * ch * cw * 4];
                ops::upsample2_forward(&cur, c, ch, cw, &mut out);
                cur = out;
                ch *= 2;
                cw *= 2;
            }
            ArchStep::Softmax => {
                let mut out = vec![0.0; cur.len()];
                ops::softmax_channels_forward(&cur, c, ch * cw, &mut out);
                cur = out;
            }
        }
    }
    cur
}

/// Stacks same-sized slices into one [N,1,H,W] batch tensor with the
/// concatenated labels.
fn batch_tensor(samples: &[&(Slice2D, LabelSlice2D)]) -> Result<(Tensor, Vec<u8>)> {
    let (nx, ny) = (samples[0].0.nx, samples[0].0.ny);
    let mut data = Vec::with_capacity(samples.len() * nx * ny);
    let mut labels = Vec::with_capacity(samples.len() * nx * ny);
    for (image, lab) in samples {
        data.extend_from_slice(&image.data);
        labels.extend_from_slice(&lab.data);
    }
    Ok((
        Tensor::from_vec(&[samples.len(), 1, ny, nx], data)?,
        labels,
    ))
}

fn check_training_pair(image: &Slice2D, labels: &LabelSlice2D, num_classes: usize) -> Result<()> {
    if image.nx != labels.nx || image.ny != labels.ny {
        return Err(Error::Dim(format!(
            "slice {}x{} paired with labels {}x{}",
            image.nx, image.ny, labels.nx, labels.ny
        )));
    }
    if image.nx % PAD_MULTIPLE != 0 || image.ny % PAD_MULTIPLE != 0 {
        return Err(Error::Dim(format!(
            "training slices must be padded to multiples of {PAD_MULTIPLE}, got {}x{}",
            image.nx, image.ny
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Trains the model in place with mini-batch SGD on the pixel
/// classification loss; slices are visited in a seeded per-epoch shuffle
/// and the mean loss of every epoch is appended to the training log.
pub fn train_plane(model: &mut PlaneModel, data: &[(Slice2D, LabelSlice2D)]) -> Result<()> {
    let config = model.config.clone();
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    for (image, labels) in data {
        check_training_pair(image, labels, config.num_classes)?;
    }

    let sizes = model.param_sizes();
    let mut sgd = SgdState::new(&sizes, config.learning_rate, config.momentum)?;
    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            for g in &mut grads {
                g.fill(0.0);
            }
            // Batch statistics need same-sized slices; a mixed-size batch
            // splits into one sub-step per size, weighted by sample count.
            let mut groups: Vec<(usize, usize, Vec<&(Slice2D, LabelSlice2D)>)> = Vec::new();
            for &sample in batch {
                let pair = &data[sample];
                let (nx, ny) = (pair.0.nx, pair.0.ny);
                match groups.iter_mut().find(|(gx, gy, _)| *gx == nx && *gy == ny) {
                    Some((_, _, members)) => members.push(pair),
                    None => groups.push((nx, ny, vec![pair])),
                }
            }
            for (_, _, members) in &groups {
                let weight = members.len() as f64 / batch.len() as f64;
                let (x_tensor, labels) = batch_tensor(members)?;
                let mut tape = Tape::new();
                let x = tape.input(x_tensor);
                let run = (|| -> Result<f64> {
                    let (logits, binding) = forward_on_tape(model, &mut tape, x, BnMode::Train)?;
                    let loss = tape.pixel_loss(logits, &labels)?;
                    tape.backward(loss)?;
                    for (g, id) in grads.iter_mut().zip(&binding.ids) {
                        for (acc, &v) in g.iter_mut().zip(tape.grad(*id).expect("param grad")) {
                            *acc += weight * v;
                        }
                    }
                    Ok(tape.scalar(loss))
                })();
                match run {
                    Ok(loss) => epoch_loss += loss * members.len() as f64,
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Diverged {
                            epoch,
                            batch: batch_idx,
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            let mut params: Vec<&mut [f64]> = Vec::with_capacity(sizes.len());
            for c in &mut model.convs {
                params.push(c.weight.data_mut());
                params.push(c.bias.data_mut());
            }
            for b in &mut model.bns {
                params.push(b.gamma.data_mut());
                params.push(b.beta.data_mut());
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            sgd.step(&mut params, &grad_refs)?;
        }
        model.training_log.push(epoch_loss / data.len() as f64);
    }
    Ok(())
}

/// Full-volume inference: extract the model's plane, pad each slice to a
/// multiple of four, run the network in infer mode, crop, and restack into
/// a probability volume.
pub fn infer_plane(model: &PlaneModel, vol: &Volume3D) -> Result<ProbVolume> {
    if model.config.num_classes != NUM_CLASSES {
        return Err(Error::Config(format!(
            "volume inference requires {NUM_CLASSES} classes, model has {}",
            model.config.num_classes
        )));
    }
    let slices = extract_slices(vol, model.plane);
    let mut prob_slices = Vec::with_capacity(slices.len());
    for slice in &slices {
        let (padded, rec) = pad_to_multiple(slice, PAD_MULTIPLE)?;
        let probs = forward_infer(model, &padded.data, padded.ny, padded.nx);
        let full = ProbSlice2D {
            nx: padded.nx,
            ny: padded.ny,
            probs,
        };
        prob_slices.push(crop_prob_slice(&full, rec));
    }
    restack_probs(&prob_slices, model.plane, vol.dims(), vol.spacing())
}

fn layout_string(layout: &[usize]) -> String {
    layout
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_layout(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layout component {t:?}")))
        })
        .collect()
}

/// Serializes a model to the single-file parameter format.
pub fn save_model(model: &PlaneModel, path: &std::path::Path) -> Result<()> {
    save_model_with_meta(model, path, &[])
}

/// Like [`save_model`], with extra metadata lines (a run id, typically)
/// prepended to the header.
pub fn save_model_with_meta(
    model: &PlaneModel,
    path: &std::path::Path,
    extra_meta: &[(String, String)],
) -> Result<()> {
    let c = &model.config;
    let mut meta = extra_meta.to_vec();
    meta.extend([
        ("plane".to_string(), model.plane.name().to_string()),
        ("num_classes".to_string(), c.num_classes.to_string()),
        ("base_filters".to_string(), c.base_filters.to_string()),
        ("encoder_layout".to_string(), layout_string(&c.encoder_layout)),
        ("decoder_layout".to_string(), layout_string(&c.decoder_layout)),
        ("learning_rate".to_string(), format!("{:?}", c.learning_rate)),
        ("momentum".to_string(), format!("{:?}", c.momentum)),
        ("epochs".to_string(), c.epochs.to_string()),
        ("batch_size".to_string(), c.batch_size.to_string()),
        ("seed".to_string(), c.seed.to_string()),
    ]);
    let mut tensors = Vec::new();
    for (i, conv) in model.convs.iter().enumerate() {
        tensors.push(NamedTensor {
            name: format!("conv{i}.weight"),
            shape: conv.weight.shape().to_vec(),
            data: conv.weight.data().to_vec(),
        });
        tensors.push(NamedTensor {
            name: format!("conv{i}.bias"),
            shape: conv.bias.shape().to_vec(),
            data: conv.bias.data().to_vec(),
        });
    }
    for (i, bn) in model.bns.iter().enumerate() {
        for (suffix, data) in [
            ("gamma", bn.gamma.data()),
            ("beta", bn.beta.data()),
            ("running_mean", bn.state.running_mean.as_slice()),
            ("running_var", bn.state.running_var.as_slice()),
        ] {
            tensors.push(NamedTensor {
                name: format!("bn{i}.{suffix}"),
                shape: vec![data.len()],
                data: data.to_vec(),
            });
        }
    }
    write_model_file(path, &meta, &tensors)
}

/// Loads a model file, rebuilding the architecture from its recorded
/// config and checking every parameter shape against it.
pub fn load_model(path: &std::path::Path) -> Result<PlaneModel> {
    let file = read_model_file(path)?;
    let meta = |key: &str| {
        file.meta_value(key)
            .ok_or_else(|| Error::MalformedHeader {
                path: path.to_path_buf(),
                msg: format!("missing metadata key {key}"),
            })
    };
    let plane = Plane::from_name(meta("plane")?).ok_or_else(|| Error::MalformedHeader {
        path: path.to_path_buf(),
        msg: format!("unknown plane {:?}", file.meta_value("plane")),
    })?;
    let parse_num = |key: &str| -> Result<f64> {
        meta(key)?.parse::<f64>().map_err(|_| Error::MalformedHeader {
            path: path.to_path_buf(),
            msg: format!("bad numeric value for {key}"),
        })
    };
    let config = NetworkConfig {
        num_classes: parse_num("num_classes")? as usize,
        base_filters: parse_num("base_filters")? as usize,
        encoder_layout: parse_layout(meta("encoder_layout")?)?,
        decoder_layout: parse_layout(meta("decoder_layout")?)?,
        learning_rate: parse_num("learning_rate")?,
        momentum: parse_num("momentum")?,
        epochs: parse_num("epochs")? as usize,
        batch_size: parse_num("batch_size")? as usize,
        seed: parse_num("seed")? as u64,
    };
    let mut model = build_network(plane, &config)?;

    let mut tensors = file.tensors.into_iter();
    let mut next = |name: String, shape: &[usize]| -> Result<Vec<f64>> {
        let t = tensors.next().ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            msg: format!("missing tensor {name}"),
        })?;
        if t.name != name || t.shape != shape {
            return Err(Error::Validation(format!(
                "tensor {} with shape {:?} does not match expected {name} {shape:?}",
                t.name, t.shape
            )));
        }
        Ok(t.data)
    };
    for i in 0..model.convs.len() {
        let wshape = model.convs[i].weight.shape().to_vec();
        let data = next(format!("conv{i}.weight"), &wshape)?;
        model.convs[i].weight.data_mut().copy_from_slice(&data);
        let bshape = model.convs[i].bias.shape().to_vec();
        let data = next(format!("conv{i}.bias"), &bshape)?;
        model.convs[i].bias.data_mut().copy_from_slice(&data);
    }
    for i in 0..model.bns.len() {
        let c = model.bns[i].gamma.numel();
        let data = next(format!("bn{i}.gamma"), &[c])?;
        model.bns[i].gamma.data_mut().copy_from_slice(&data);
        let data = next(format!("bn{i}.beta"), &[c])?;
        model.bns[i].beta.data_mut().copy_from_slice(&data);
        model.bns[i].state.running_mean = next(format!("bn{i}.running_mean"), &[c])?;
        model.bns[i].state.running_var = next(format!("bn{i}.running_var"), &[c])?;
    }
    if tensors.next().is_some() {
        return Err(Error::Validation(format!(
            "{} holds more tensors than the architecture defines",
            path.display()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelVolume;

    fn tiny_config(base_filters: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            base_filters,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn default_architecture_counts() {
        let model = build_network(Plane::Axial, &NetworkConfig::default()).unwrap();
        let audit = model.audit();
        assert_eq!(audit.encoder_convs, 12);
        assert_eq!(audit.decoder_convs, 12);
        assert_eq!(audit.pools, 2);
        assert_eq!(audit.upsamples, 2);
        assert_eq!(audit.final_channels, 8);
        assert!(audit.bn_relu_pattern_holds);
        assert_eq!(model.convs.len(), 24);
        assert_eq!(model.bns.len(), 23);
    }

    #[test]
    fn invalid_layouts_are_config_errors() {
        for layout in [vec![4, 4], vec![4, 4, 5], vec![12, 0, 0], vec![2, 2, 2]] {
            let config = NetworkConfig {
                encoder_layout: layout.clone(),
                ..Default::default()
            };
            assert!(
                matches!(build_network(Plane::Axial, &config), Err(Error::Config(_))),
                "layout {layout:?} should be rejected"
            );
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let config = tiny_config(4, 3);
        let model = build_network(Plane::Coronal, &config).unwrap();
        // Closed form from the layout: conv (9*in+1)*out, bn 2*out for all
        // but the final conv.
        let mut expected = 0usize;
        let plan: Vec<(usize, usize)> = {
            let bf = config.base_filters;
            let mut plan = Vec::new();
            let mut prev = 1;
            for (s, &n) in config.encoder_layout.iter().enumerate() {
                for _ in 0..n {
                    plan.push((prev, bf << s));
                    prev = bf << s;
                }
            }
            for (s, &n) in config.decoder_layout.iter().enumerate() {
                for _ in 0..n {
                    plan.push((prev, bf << (2 - s)));
                    prev = bf << (2 - s);
                }
            }
            let last = plan.len() - 1;
            plan[last].1 = config.num_classes;
            plan
        };
        for (i, &(inc, outc)) in plan.iter().enumerate() {
            expected += (9 * inc + 1) * outc;
            if i + 1 < plan.len() {
                expected += 2 * outc;
            }
        }
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn output_shape_follows_input() {
        let model = build_network(Plane::Axial, &tiny_config(2, 1)).unwrap();
        for (h, w) in [(8usize, 8usize), (16, 12), (48, 48)] {
            let probs = forward_infer(&model, &vec![0.3; h * w], h, w);
            assert_eq!(probs.len(), NUM_CLASSES * h * w);
        }
    }

    #[test]
    fn untrained_network_on_constant_input_is_near_uniform() {
        let model = build_network(Plane::Axial, &tiny_config(8, 7)).unwrap();
        let vol = Volume3D::filled((8, 8, 8), (1.0, 1.0, 1.0), 0.5);
        let probs = infer_plane(&model, &vol).unwrap();
        for vox in 0..probs.num_voxels() {
            for &p in probs.voxel_probs(vox) {
                assert!((p - 0.125).abs() < 0.05, "probability {p}");
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let model = build_network(Plane::Sagittal, &tiny_config(2, 5)).unwrap();
        let vol = Volume3D::new(
            (8, 8, 8),
            (1.0, 1.0, 1.0),
            (0..512).map(|i| (i as f64 * 0.619).sin()).collect(),
        )
        .unwrap();
        let a = infer_plane(&model, &vol).unwrap();
        let b = infer_plane(&model, &vol).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut config = tiny_config(2, 2);
        config.epochs = 0;
        let mut model = build_network(Plane::Axial, &config).unwrap();
        let before: Vec<Vec<f64>> = model.convs.iter().map(|c| c.weight.data().to_vec()).collect();
        let image = Slice2D {
            nx: 8,
            ny: 8,
            data: vec![0.1; 64],
        };
        let labels = LabelSlice2D {
            nx: 8,
            ny: 8,
            data: vec![0; 64],
        };
        train_plane(&mut model, &[(image, labels)]).unwrap();
        for (c, b) in model.convs.iter().zip(before) {
            assert_eq!(c.weight.data(), &b[..]);
        }
        assert!(model.training_log.is_empty());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let mut config = tiny_config(2, 11);
        config.epochs = 3;
        let image = Slice2D {
            nx: 8,
            ny: 8,
            data: (0..64).map(|i| if i % 9 == 0 { 5.0 } else { 0.0 }).collect(),
        };
        let labels = LabelSlice2D {
            nx: 8,
            ny: 8,
            data: (0..64).map(|i| u8::from(i % 9 == 0)).collect(),
        };
        let data = vec![(image, labels)];
        let mut a = build_network(Plane::Axial, &config).unwrap();
        train_plane(&mut a, &data).unwrap();
        let mut b = build_network(Plane::Axial, &config).unwrap();
        train_plane(&mut b, &data).unwrap();
        for (ca, cb) in a.convs.iter().zip(&b.convs) {
            assert_eq!(ca.weight.data(), cb.weight.data());
        }
        assert_eq!(a.training_log, b.training_log);
    }

    #[test]
    fn rejects_unpadded_slices() {
        let mut model = build_network(Plane::Axial, &tiny_config(2, 0)).unwrap();
        let image = Slice2D {
            nx: 6,
            ny: 8,
            data: vec![0.0; 48],
        };
        let labels = LabelSlice2D {
            nx: 6,
            ny: 8,
            data: vec![0; 48],
        };
        assert!(matches!(
            train_plane(&mut model, &[(image, labels)]),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn model_file_round_trip_reproduces_inference() {
        let model = build_network(Plane::Coronal, &tiny_config(2, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.plane, Plane::Coronal);
        assert_eq!(loaded.config, model.config);
        let vol = Volume3D::new(
            (8, 8, 8),
            (1.0, 1.0, 1.0),
            (0..512).map(|i| (i as f64 * 0.37).cos()).collect(),
        )
        .unwrap();
        let a = infer_plane(&model, &vol).unwrap();
        let b = infer_plane(&loaded, &vol).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

#[test]
#[ignore]
fn probe_step_timing() {
    let (nx, ny) = (48usize, 48usize);
    let image: Vec<f64> = (0..nx * ny).map(|i| (i as f64 * 0.7).sin() * 50.0).collect();
    let labels: Vec<u8> = (0..nx * ny).map(|i| (i % 8) as u8).collect();
    let data = vec![(
        Slice2D { nx, ny, data: image },
        LabelSlice2D { nx, ny, data: labels },
    )];
    let mut config = tiny_config(8, 4);
    config.epochs = 30;
    let mut model = build_network(Plane::Axial, &config).unwrap();
    let t0 = std::time::Instant::now();
    train_plane(&mut model, &data).unwrap();
    let dt = t0.elapsed();
    println!(
        "30 train steps on 48x48 bf=8: {:?} total, {:.1} ms/step",
        dt,
        dt.as_secs_f64() * 1000.0 / 30.0
    );
    let vol = Volume3D::filled((48, 48, 48), (1.0, 1.0, 1.0), 1.0);
    let t0 = std::time::Instant::now();
    let _ = infer_plane(&model, &vol).unwrap();
    println!("infer 48^3 volume (48 slices): {:?}", t0.elapsed());
}

#[test]
#[ignore]
fn probe_kernel_timing() {
    use crate::tensor::ops::*;
    let time = |name: &str, mut f: Box<dyn FnMut()>| {
        // warmup
        f();
        let t0 = std::time::Instant::now();
        let iters = 50;
        for _ in 0..iters {
            f();
        }
        println!("{name}: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
    };
    // Representative layer: 8->8 @ 48x48 (x4 per net ~ stage1+dec2), and 16->16 @ 24x24, 32->32 @ 12x12
    for (cin, cout, h) in [(8usize, 8usize, 48usize), (16, 16, 24), (32, 32, 12)] {
        let w = h;
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.13).sin()).collect();
        let wgt: Vec<f64> = (0..cout * cin * 9).map(|i| (i as f64 * 0.7).cos() * 0.1).collect();
        let bias = vec![0.1; cout];
        let gout: Vec<f64> = (0..cout * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut out = vec![0.0; cout * h * w];
        {
            let (x, wgt, bias) = (x.clone(), wgt.clone(), bias.clone());
            time(
                &format!("conv fwd {cin}->{cout} @{h}"),
                Box::new(move || conv2d_forward(&x, cin, h, w, &wgt, cout, &bias, &mut out)),
            );
        }
        {
            let (x, wgt, gout) = (x.clone(), wgt.clone(), gout.clone());
            let mut gx = vec![0.0; cin * h * w];
            let mut gw = vec![0.0; cout * cin * 9];
            let mut gb = vec![0.0; cout];
            time(
                &format!("conv bwd {cin}->{cout} @{h}"),
                Box::new(move || {
                    conv2d_backward(&x, cin, h, w, &wgt, cout, &gout, Some(&mut gx), &mut gw, &mut gb)
                }),
            );
        }
    }
    // BN fwd+bwd at 8 @ 48x48
    let (c, s) = (8usize, 48 * 48usize);
    let x: Vec<f64> = (0..c * s).map(|i| (i as f64 * 0.13).sin()).collect();
    let gout: Vec<f64> = (0..c * s).map(|i| (i as f64 * 0.3).cos()).collect();
    let gamma = vec![1.0; c];
    let beta = vec![0.0; c];
    {
        let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
        let mut out = vec![0.0; c * s];
        let mut state = BnState::new(c);
        time(
            "bn fwd 8@48x48",
            Box::new(move || {
                batchnorm_forward(&x, 1, c, s, &gamma, &beta, &mut state, BnMode::Train, &mut out);
            }),
        );
    }
    {
        let mut state = BnState::new(c);
        let mut out = vec![0.0; c * s];
        let cache = batchnorm_forward(&x, 1, c, s, &gamma, &beta, &mut state, BnMode::Train, &mut out).unwrap();
        let (x2, gamma2, gout2) = (x.clone(), gamma.clone(), gout.clone());
        let mut gx = vec![0.0; c * s];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        time(
            "bn bwd 8@48x48",
            Box::new(move || {
                batchnorm_backward(&x2, 1, c, s, &gamma2, &cache, &gout2, &mut gx, &mut gg, &mut gb)
            }),
        );
    }
    // softmax+loss at 8 @ 48x48
    {
        let logits: Vec<f64> = (0..8 * s).map(|i| (i as f64 * 0.41).sin()).collect();
        let labels: Vec<u8> = (0..s).map(|i| (i % 8) as u8).collect();
        time(
            "loss fwd 8@48x48",
            Box::new(move || {
                let _ = pixel_loss_forward(&logits, 8, s, &labels);
            }),
        );
    }
}

#[test]
#[ignore]
fn probe_e2e_dice() {
    use crate::fusion::{estimate_weights, fuse, Connectivity};
    use crate::metrics::evaluate_volume;
    use crate::phantom::{generate_dataset, PhantomSpec};
    use crate::pipeline::run_parallel;
    use crate::volume::{extract_label_slices, extract_slices};

    let t_all = std::time::Instant::now();
    let template = PhantomSpec::default();
    let all = generate_dataset(8, 42, &template, 0.1).unwrap();
    let (train, held) = all.split_at(6);

    let epochs: usize = std::env::var("E2E_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(12);
    let tasks: Vec<_> = Plane::ALL
        .iter()
        .enumerate()
        .map(|(idx, &plane)| {
            let train = &train;
            move || -> crate::Result<PlaneModel> {
                let mut pairs = Vec::new();
                for (vol, lab) in train.iter() {
                    let imgs = extract_slices(vol, plane);
                    let labs = extract_label_slices(lab, plane);
                    pairs.extend(imgs.into_iter().zip(labs));
                }
                let config = NetworkConfig {
                    epochs,
                    seed: crate::util::derive_seed(7, idx as u64),
                    ..Default::default()
                };
                let mut model = build_network(plane, &config)?;
                train_plane(&mut model, &pairs)?;
                Ok(model)
            }
        })
        .collect();
    let t0 = std::time::Instant::now();
    let models = run_parallel(3, tasks).unwrap();
    println!("train {} epochs x3 planes: {:?}", epochs, t0.elapsed());
    for m in &models {
        println!(
            "  {} loss first={:.4} last={:.4}",
            m.plane.name(),
            m.training_log[0],
            m.training_log.last().unwrap()
        );
    }

    // calibrate on training set predictions
    let t0 = std::time::Instant::now();
    let calib: Vec<[ProbVolume; 3]> = train
        .iter()
        .map(|(vol, _)| {
            [
                infer_plane(&models[0], vol).unwrap(),
                infer_plane(&models[1], vol).unwrap(),
                infer_plane(&models[2], vol).unwrap(),
            ]
        })
        .collect();
    let weights = estimate_weights(&calib, Connectivity::Face6, String::new()).unwrap();
    println!("calibrate: {:?}", t0.elapsed());
    for p in 0..3 {
        println!("  plane {} raw {:?}", p, &weights.raw[p][1..8].iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    }

    for (i, (vol, gt)) in held.iter().enumerate() {
        let triple = [
            infer_plane(&models[0], vol).unwrap(),
            infer_plane(&models[1], vol).unwrap(),
            infer_plane(&models[2], vol).unwrap(),
        ];
        let fused = fuse(&[&triple[0], &triple[1], &triple[2]], &weights).unwrap();
        let report = evaluate_volume(&fused, gt, "held", "ct", "-").unwrap();
        let dices: Vec<f64> = report.per_structure.iter().map(|m| (m.dice * 1000.0).round() / 1000.0).collect();
        println!("held {i}: fused dice {:?} whs {:.4}", dices, report.whs.dice);
        // single-plane mean dice for comparison
        for (p, plane) in Plane::ALL.iter().enumerate() {
            let single = crate::fusion::argmax_labels(&triple[p]);
            let r = evaluate_volume(&single, gt, "s", "ct", "-").unwrap();
            println!("    {} alone whs-dice {:.4}", plane.name(), r.whs.dice);
        }
    }
    println!("total e2e: {:?}", t_all.elapsed());
}

    /// Labels a vertical stripe; a single slice must be overfittable.
    #[test]
    fn single_slice_overfit() {
        let (nx, ny) = (24usize, 24usize);
        let mut image = vec![0.0; nx * ny];
        let mut labels = vec![0u8; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                if (8..16).contains(&i) {
                    image[i + nx * j] = 10.0;
                    labels[i + nx * j] = 2;
                }
            }
        }
        let mut config = tiny_config(4, 4);
        config.epochs = 500;
        let mut model = build_network(Plane::Axial, &config).unwrap();
        train_plane(
            &mut model,
            &[(
                Slice2D {
                    nx,
                    ny,
                    data: image,
                },
                LabelSlice2D {
                    nx,
                    ny,
                    data: labels,
                },
            )],
        )
        .unwrap();
        let final_loss = *model.training_log.last().unwrap();
        assert!(final_loss < 0.05, "final training loss {final_loss}");
        // After the early transient the loss should not increase.
        let log = &model.training_log;
        for e in 5..log.len() - 1 {
            assert!(
                log[e + 1] <= log[e] + 1e-9,
                "loss rose at epoch {}: {} -> {}",
                e + 1,
                log[e],
                log[e + 1]
            );
        }
    }
}
