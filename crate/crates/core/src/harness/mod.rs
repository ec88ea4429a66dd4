//! Training, evaluation, prediction export and weight import.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{self, augment, resize, sample_seed, synth_generate, tile, SamplePair, Split};
use crate::error::{config, invalid, io_err, FtnError, Result};
use crate::losses::{class_frequencies, floor_frequencies, total_loss, LossConfig};
use crate::metrics::{Averaging, MetricsAccumulator, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{image_batch, Architecture, Ftn, ModelConfig};
use crate::nn::{ParamKind, ParamStore};
use crate::scalar::{DType, Scalar};

use checkpoint::{peek_dtype, CheckpointRecord, RngState, TensorContainer};
pub use config::{Profile, TrainConfig};

/// Base learning rate at `epoch`: `lr · factor^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    (0..epoch / cfg.lr_decay_every).fold(cfg.lr, |lr, _| lr * cfg.lr_decay_factor)
}

/// Rate applied to one tensor: randomly initialized tensors get the multiplier.
pub fn param_lr(base: f64, pretrained: bool, cfg: &TrainConfig) -> f64 {
    if pretrained {
        base
    } else {
        base * cfg.new_layer_lr_multiplier
    }
}

/// Momentum SGD with coupled weight decay:
/// `g += wd·p; v = μ·v + g; p -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, ArrayD<T>>,
        lr_of: impl Fn(&str, bool) -> f64,
    ) {
        let (mu, wd) = (T::lit(self.momentum), T::lit(self.weight_decay));
        for (name, entry) in store.iter_mut() {
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let lr = T::lit(lr_of(name, entry.pretrained));
            let buf = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(entry.value.raw_dim()));
            ndarray::Zip::from(&mut entry.value)
                .and(buf)
                .and(g)
                .for_each(|p, v, &g| {
                    let d = g + wd * *p;
                    *v = mu * *v + d;
                    *p -= lr * *v;
                });
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN on epochs without validation.
    pub val_f1: f64,
    pub val_iou: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_f1,val_iou";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_f1, r.val_iou);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub last: CheckpointRecord<T>,
    pub best: CheckpointRecord<T>,
    pub log: Vec<EpochLog>,
}

/// Tiles (when configured) and resizes loaded pairs to the network input size.
pub fn prepare(cfg: &TrainConfig, pairs: Vec<SamplePair>) -> Result<Vec<SamplePair>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (h, w) = p.dims();
        let tiles = if cfg.tile_size > 0 && (h > cfg.tile_size || w > cfg.tile_size) {
            tile(&p, cfg.tile_size)?
        } else {
            vec![p]
        };
        for t in tiles {
            if t.dims() == (cfg.input_size, cfg.input_size) {
                out.push(t);
            } else {
                out.push(resize(&t, cfg.input_size)?);
            }
        }
    }
    Ok(out)
}

/// Pairs of one split, from disk or from the seeded synthetic generator.
///
/// Without a dataset root every split is the same synthetic set.
pub fn load_split(cfg: &TrainConfig, split: Split) -> Result<Vec<SamplePair>> {
    let raw = if cfg.dataset_root.is_empty() {
        synth_generate(cfg.seed, cfg.synth_count, cfg.synth_size)?
    } else {
        data::load_manifest(&cfg.dataset_root, split)?.load_all()?
    };
    let pairs = prepare(cfg, raw)?;
    if pairs.is_empty() {
        return Err(invalid(format!("split '{split}' is empty")));
    }
    Ok(pairs)
}

type Batch<T> = (ArrayD<T>, ArrayD<T>, ArrayD<T>);

pub fn batch_tensors<T: Scalar>(pairs: &[&SamplePair]) -> Result<Batch<T>> {
    let a = image_batch::<T>(&pairs.iter().map(|p| &p.image_a).collect::<Vec<_>>())?;
    let b = image_batch::<T>(&pairs.iter().map(|p| &p.image_b).collect::<Vec<_>>())?;
    let (h, w) = pairs[0].dims();
    let mut masks = ArrayD::<T>::zeros(IxDyn(&[pairs.len(), h, w]));
    for (i, p) in pairs.iter().enumerate() {
        if p.dims() != (h, w) {
            return Err(invalid("samples in a batch must share dimensions"));
        }
        masks
            .index_axis_mut(Axis(0), i)
            .assign(&p.mask.mapv(|v| T::lit(v as f64)).into_dyn());
    }
    Ok((a, b, masks))
}

/// Eval-mode change probabilities `[H, W]` for each pair, in order.
pub fn predict_pairs<T: Scalar>(model: &Ftn<T>, pairs: &[SamplePair], batch: usize) -> Result<Vec<Array2<T>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (a, b, _) = batch_tensors::<T>(&refs)?;
        let probs = model.predict_probabilities(&a, &b)?;
        out.extend(probs.outer_iter().map(|p| p.to_owned()));
    }
    Ok(out)
}

pub fn evaluate_pairs<T: Scalar>(
    model: &Ftn<T>,
    pairs: &[SamplePair],
    batch: usize,
    averaging: Averaging,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let mut acc = MetricsAccumulator::new(averaging);
    for (p, pair) in predict_pairs(model, pairs, batch)?.iter().zip(pairs) {
        let pred = crate::metrics::binarize(p.view(), DEFAULT_THRESHOLD);
        acc.add(pred.view(), pair.mask.view())?;
    }
    acc.finish()
}

/// One optimizer step; returns the batch loss.
fn train_step<T: Scalar>(
    model: &mut Ftn<T>,
    sgd: &mut Sgd<T>,
    batch: &[&SamplePair],
    loss_cfg: &LossConfig,
    lr: f64,
    cfg: &TrainConfig,
    (epoch, step): (usize, usize),
) -> Result<f64> {
    let (a, b, masks) = batch_tensors::<T>(batch)?;
    let (value, grads, bn) = {
        let graph = Graph::new();
        let s = model.session(&graph, true);
        let preds = model.forward(&s, graph.constant(a), graph.constant(b))?;
        let loss = total_loss(&preds, &masks, loss_cfg)?;
        if let Some(term) = loss.non_finite_term() {
            return Err(FtnError::NonFiniteLoss {
                term: term.to_string(),
                epoch,
                step,
            });
        }
        let value = loss.value();
        if !value.is_finite() {
            return Err(FtnError::NonFiniteLoss {
                term: "total".into(),
                epoch,
                step,
            });
        }
        let g = graph.backward(loss.total);
        (value, s.param_grads(&g), s.take_bn_updates())
    };
    sgd.step(&mut model.store, &grads, |_, pretrained| param_lr(lr, pretrained, cfg));
    model.store.apply_bn_updates(&bn);
    Ok(value.as_f64())
}

/// Fresh parameters for a run, importing encoder weights when configured.
pub fn initial_store<T: Scalar>(cfg: &TrainConfig) -> Result<ParamStore<T>> {
    let model_cfg = cfg.model_config();
    if cfg.pretrained.is_empty() {
        Ok(ParamStore::init(&Architecture::new(&model_cfg)?.decls, cfg.seed))
    } else {
        Ok(import_pretrained::<T>(Path::new(&cfg.pretrained), &model_cfg, cfg.seed)?.0)
    }
}

pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let train_set = load_split(cfg, Split::Train)?;
    let val_set = if cfg.dataset_root.is_empty() {
        train_set.clone()
    } else {
        load_split(cfg, Split::Val)?
    };
    train_on(cfg, &train_set, &val_set)
}

/// Trains on prepared pairs; writes logs and checkpoints when `output_dir` is set.
pub fn train_on<T: Scalar>(cfg: &TrainConfig, train_set: &[SamplePair], val_set: &[SamplePair]) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = train_set.len();
    let batches_per_epoch = n / cfg.batch_size + usize::from(n % cfg.batch_size >= 2);
    if batches_per_epoch == 0 {
        return Err(config(format!(
            "{n} training samples cannot fill a batch of at least 2"
        )));
    }
    let epochs = if cfg.max_steps > 0 {
        cfg.epochs.min(cfg.max_steps.div_ceil(batches_per_epoch))
    } else {
        cfg.epochs
    };

    let freq = floor_frequencies(class_frequencies(train_set.iter().map(|p| p.mask.view()))?);
    let loss_cfg = cfg.loss_config().with_frequencies(freq);
    loss_cfg.validate()?;
    let mut model = Ftn::with_store(&cfg.model_config(), initial_store::<T>(cfg)?)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out_dir = (!cfg.output_dir.is_empty()).then(|| PathBuf::from(&cfg.output_dir));
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        std::fs::write(dir.join("config.txt"), cfg.to_string()).map_err(io_err(dir.join("config.txt")))?;
    }

    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<CheckpointRecord<T>> = None;
    let mut step = 0usize;
    for epoch in 0..epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(batches_per_epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 || (cfg.max_steps > 0 && step >= cfg.max_steps) {
                continue;
            }
            let augmented: Vec<SamplePair>;
            let batch: Vec<&SamplePair> = if cfg.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| augment(&train_set[i], sample_seed(cfg.seed, &train_set[i].id, epoch)))
                    .collect();
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };
            losses.push(train_step(&mut model, &mut sgd, &batch, &loss_cfg, lr, cfg, (epoch, step))?);
            step += 1;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let validate = (epoch + 1) % cfg.val_every == 0 || epoch + 1 == epochs;
        let (val_f1, val_iou) = if validate {
            let r = evaluate_pairs(&model, val_set, cfg.batch_size, Averaging::Micro)?;
            (r.f1, r.iou)
        } else {
            (f64::NAN, f64::NAN)
        };
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_f1,
            val_iou,
        });
        let record = |best_val_f1| CheckpointRecord {
            epoch,
            step,
            config: cfg.clone(),
            store: model.store.clone(),
            momentum: sgd.buffers.clone(),
            rng: RngState {
                seed: cfg.seed,
                word_pos: rng.get_word_pos(),
            },
            best_val_f1,
            class_frequencies: loss_cfg.class_frequencies,
        };
        let prev_best = best.as_ref().and_then(|b| b.best_val_f1);
        // ties keep the earlier epoch
        let improved = validate && prev_best.is_none_or(|b| val_f1 > b);
        if improved {
            let rec = record(Some(val_f1));
            if let Some(dir) = &out_dir {
                rec.save(&dir.join("best.ckpt"))?;
            }
            best = Some(rec);
        }
        if let Some(dir) = &out_dir {
            record(best.as_ref().and_then(|b| b.best_val_f1)).save(&dir.join("last.ckpt"))?;
            let path = dir.join("log.csv");
            std::fs::write(&path, log_csv(&log)).map_err(io_err(&path))?;
        }
    }
    let last = CheckpointRecord {
        epoch: epochs - 1,
        step,
        config: cfg.clone(),
        store: model.store,
        momentum: sgd.buffers,
        rng: RngState {
            seed: cfg.seed,
            word_pos: rng.get_word_pos(),
        },
        best_val_f1: best.as_ref().and_then(|b| b.best_val_f1),
        class_frequencies: loss_cfg.class_frequencies,
    };
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        log,
    })
}

pub fn model_from_checkpoint<T: Scalar>(rec: &CheckpointRecord<T>) -> Result<Ftn<T>> {
    Ftn::with_store(&rec.config.model_config(), rec.store.clone())
}

/// Metrics of a checkpoint on one split of its configured dataset.
pub fn evaluate_checkpoint<T: Scalar>(
    rec: &CheckpointRecord<T>,
    split: Split,
    root_override: Option<&Path>,
) -> Result<MetricsReport> {
    let mut cfg = rec.config.clone();
    if let Some(root) = root_override {
        cfg.dataset_root = root.to_string_lossy().into_owned();
    }
    let pairs = load_split(&cfg, split)?;
    let model = model_from_checkpoint(rec)?;
    evaluate_pairs(&model, &pairs, cfg.batch_size, Averaging::Micro)
}

pub fn evaluate(ckpt: &Path, split: Split, root_override: Option<&Path>) -> Result<MetricsReport> {
    match peek_dtype(ckpt)? {
        DType::F32 => evaluate_checkpoint(&CheckpointRecord::<f32>::load(ckpt)?, split, root_override),
        DType::F64 => evaluate_checkpoint(&CheckpointRecord::<f64>::load(ckpt)?, split, root_override),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionFiles {
    pub probability: PathBuf,
    pub mask: PathBuf,
    pub overlay: PathBuf,
}

/// Change probability quantized to 16 bits, with the mask taken from the
/// quantized values so both files agree at the threshold.
pub fn quantize_probability<T: Scalar>(p: &Array2<T>) -> (Array2<u16>, Array2<u8>) {
    let q = p.mapv(|v| (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16);
    let mask = q.mapv(|v| u8::from(v as f64 / 65535.0 >= DEFAULT_THRESHOLD));
    (q, mask)
}

pub fn predict_with<T: Scalar>(
    rec: &CheckpointRecord<T>,
    image_a: &Path,
    image_b: &Path,
    out_dir: &Path,
) -> Result<PredictionFiles> {
    let a = data::read_rgb(image_a)?;
    let b = data::read_rgb(image_b)?;
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "input images differ in size: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, _) = a.dim();
    let size = rec.config.input_size;
    let fit = |img: &Array3<f32>| {
        if (h, w) == (size, size) {
            img.clone()
        } else {
            data::resize_raster(img.view(), size, size)
        }
    };
    let pair = SamplePair::new("predict", fit(&a), fit(&b), Array2::zeros((size, size)))?;
    let model = model_from_checkpoint(rec)?;
    let mut prob = predict_pairs(&model, std::slice::from_ref(&pair), 1)?.remove(0);
    if (h, w) != (size, size) {
        let p3 = prob.mapv(|v| v.as_f64() as f32).insert_axis(Axis(2));
        prob = data::resize_raster(p3.view(), h, w)
            .index_axis(Axis(2), 0)
            .mapv(|v| T::lit(v as f64));
    }
    let (q, mask) = quantize_probability(&prob);

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let files = PredictionFiles {
        probability: out_dir.join("probability.png"),
        mask: out_dir.join("mask.png"),
        overlay: out_dir.join("overlay.png"),
    };
    let prob_img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([q[[y as usize, x as usize]]]));
    data::write_png(&files.probability, &prob_img)?;
    data::write_png(&files.mask, &data::mask_to_image(mask.view()))?;
    let edge = crate::losses::boundary_map(mask.mapv(|v| v as f64).view());
    let mut overlay = data::raster_to_image(b.view());
    for (x, y, px) in overlay.enumerate_pixels_mut() {
        let (xi, yi) = (x as usize, y as usize);
        if edge[[yi, xi]] && mask[[yi, xi]] == 1 {
            *px = Rgb([255, 0, 0]);
        }
    }
    data::write_png(&files.overlay, &overlay)?;
    Ok(files)
}

pub fn predict(ckpt: &Path, image_a: &Path, image_b: &Path, out_dir: &Path) -> Result<PredictionFiles> {
    match peek_dtype(ckpt)? {
        DType::F32 => predict_with(&CheckpointRecord::<f32>::load(ckpt)?, image_a, image_b, out_dir),
        DType::F64 => predict_with(&CheckpointRecord::<f64>::load(ckpt)?, image_a, image_b, out_dir),
    }
}

/// Which tensors an import filled from the container.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    pub initialized: Vec<String>,
    /// Container tensors that match no encoder parameter.
    pub ignored: Vec<String>,
}

impl std::fmt::Display for ImportReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "loaded={}", self.loaded.len())?;
        writeln!(f, "initialized={}", self.initialized.len())?;
        writeln!(f, "ignored={}", self.ignored.len())?;
        for n in &self.loaded {
            writeln!(f, "loaded_tensor={n}")?;
        }
        for n in &self.ignored {
            writeln!(f, "ignored_tensor={n}")?;
        }
        Ok(())
    }
}

/// Random initialization with encoder tensors overwritten from a container.
///
/// Container names may carry the checkpoint `param/` prefix. Loaded tensors
/// train at the base rate; everything else is marked for the multiplied rate.
pub fn import_pretrained<T: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(ParamStore<T>, ImportReport)> {
    let container = TensorContainer::<T>::load(path)?;
    let arch = Architecture::new(cfg)?;
    let mut store = ParamStore::<T>::init(&arch.decls, seed);
    let mut report = ImportReport::default();
    let mut used = vec![false; container.tensors.len()];
    for d in &arch.decls {
        let found = d.backbone.then(|| {
            container
                .tensors
                .iter()
                .position(|(n, _)| n.strip_prefix("param/").unwrap_or(n) == d.name)
        });
        match found.flatten() {
            Some(i) => {
                let t = &container.tensors[i].1;
                if t.shape() != d.shape.as_slice() {
                    return Err(FtnError::ShapeConflict {
                        name: d.name.clone(),
                        expected: d.shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                used[i] = true;
                let e = store.get_mut(&d.name).expect("declared");
                e.value = t.clone();
                e.pretrained = true;
                report.loaded.push(d.name.clone());
            }
            None => report.initialized.push(d.name.clone()),
        }
    }
    report.ignored = container
        .tensors
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|((n, _), _)| n.clone())
        .collect();
    Ok((store, report))
}

/// Writes the encoder tensors of a store as an importable container.
pub fn export_backbone<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut c = TensorContainer::<T>::new(serde_json::Map::new());
    c.metadata.insert("kind".into(), "weights".into());
    for (name, e) in store.iter().filter(|(_, e)| e.backbone) {
        c.tensors.push((name.clone(), e.value.clone()));
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_floor_semantics() {
        let cfg = TrainConfig::profile(Profile::Full);
        assert_eq!(lr_schedule(0, &cfg), 1e-3);
        assert_eq!(lr_schedule(19, &cfg), 1e-3);
        assert_eq!(lr_schedule(20, &cfg), 1e-4);
        assert_eq!(lr_schedule(40, &cfg), 1e-5);
    }

    #[test]
    fn quantized_mask_agrees_with_probability_file() {
        let p = Array2::from_shape_vec((1, 4), vec![0.49999f64, 0.5, 0.500001, 1.0]).unwrap();
        let (q, m) = quantize_probability(&p);
        for (qv, mv) in q.iter().zip(&m) {
            assert_eq!(*qv as f64 / 65535.0 >= 0.5, *mv == 1);
        }
    }

    #[test]
    fn log_has_expected_columns() {
        let text = log_csv(&[EpochLog {
            epoch: 0,
            lr: 1e-3,
            train_loss: 1.5,
            val_f1: 0.5,
            val_iou: 0.25,
        }]);
        assert_eq!(text.lines().next().unwrap(), "epoch,lr,train_loss,val_f1,val_iou");
        assert_eq!(text.lines().count(), 2);
    }
}
