//! The self-training pipeline: pre-detection, teacher, second pseudo label,
//! student.
//!
//! 1. [`predetect`]: CVA difference image, Otsu threshold, neighborhood
//!    confidence filter and gate → first pseudo label and its weights.
//! 2. [`train_teacher`]: a fresh network trained on the first pseudo label.
//! 3. [`pseudo_label_2`]: the teacher's thresholded prediction and its
//!    confidence weights.
//! 4. [`train_student`]: a second fresh network trained on
//!    `beta·L1 + (1 − beta)·L2`, the two weighted losses over the same tiles.
//! 5. The student's prediction is the final change map.
//!
//! Training data are overlapping square tiles, each emitted in six
//! orientations. None of these functions accepts a reference map.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classical::cva;
use crate::conf_filter::{confidence_weights, FilterConfig};
use crate::error::{Error, Result};
use crate::network::{
    images_to_tensor, BranchMode, ChangeDetector, NetworkConfig, SPATIAL_MULTIPLE,
};
use crate::raster::{ChangeMap, RasterImage, ScalarMap};
use crate::tensor::{adam_step, AdamState, Graph, LossNormalization, Mode, Var};
use crate::threshold::otsu;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Confidence filter window.
    pub w: usize,
    /// Confidence gate.
    pub alpha: f64,
    /// Weight of the first pseudo label in the student loss.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    /// Tile side.
    pub crop: usize,
    /// Offset between neighboring tiles.
    pub stride: usize,
    /// Network channel divisor.
    pub scale: usize,
    pub seed: u64,
    pub loss_norm: LossNormalization,
    /// When false every pixel gets weight 1 instead of its gated confidence.
    pub use_filter: bool,
    pub branch_mode: BranchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w: 5,
            alpha: 0.5,
            beta: 0.6,
            lr: 1e-4,
            batch_size: 8,
            epochs_teacher: 30,
            epochs_student: 30,
            crop: 112,
            stride: 56,
            scale: 8,
            seed: 0,
            loss_norm: LossNormalization::PositiveWeights,
            use_filter: true,
            branch_mode: BranchMode::Composite,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        FilterConfig::new(self.w, self.alpha).map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(SPATIAL_MULTIPLE) {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of {SPATIAL_MULTIPLE}",
                self.crop
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        NetworkConfig::with_scale(self.scale).widths()?;
        Ok(())
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            w: self.w,
            alpha: self.alpha,
        }
    }

    pub fn network(&self, input_channels: usize) -> NetworkConfig {
        NetworkConfig {
            scale: self.scale,
            branch_mode: self.branch_mode,
            input_channels,
            ..NetworkConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: &'static str,
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Seconds since the stage started.
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Loss sequence of one stage.
    pub fn losses(&self, stage: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.loss)
            .collect()
    }

    /// Plain-text log, one `stage,epoch,loss,wall_s` record per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("stage,epoch,loss,wall_s\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:.6},{:.3}", r.stage, r.epoch, r.loss, r.wall_s);
        }
        out
    }
}

fn check_pair(x1: &RasterImage, x2: &RasterImage) -> Result<()> {
    if !x1.same_shape(x2) {
        return Err(Error::Shape(format!(
            "images differ in shape: {}x{}x{} vs {}x{}x{}",
            x1.height(),
            x1.width(),
            x1.channels(),
            x2.height(),
            x2.width(),
            x2.channels()
        )));
    }
    Ok(())
}

/// Loss weights for a pseudo label: the gated confidence when the filter is
/// enabled, otherwise all ones.
pub fn label_weights(cm: &ChangeMap, cfg: &TrainConfig) -> Result<ScalarMap> {
    if cfg.use_filter {
        confidence_weights(cm, cfg.filter())
    } else {
        ScalarMap::new(cm.height(), cm.width(), vec![1.0; cm.len()])
    }
}

/// First pseudo label (Otsu on the CVA difference image) and its weights.
pub fn predetect(
    x1: &RasterImage,
    x2: &RasterImage,
    cfg: &TrainConfig,
) -> Result<(ChangeMap, ScalarMap)> {
    cfg.validate()?;
    let di = cva(x1, x2)?;
    let (cm, _) = otsu(&di);
    let weights = label_weights(&cm, cfg)?;
    Ok((cm, weights))
}

/// The six tile orientations, in emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    Identity,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror left–right.
    FlipH,
    /// Mirror top–bottom.
    FlipV,
}

impl Augment {
    pub const ALL: [Augment; 6] = [
        Augment::Identity,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
        Augment::FlipH,
        Augment::FlipV,
    ];

    /// Source coordinate in an `n`×`n` tile for output coordinate (r, c).
    pub fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Augment::Identity => (r, c),
            Augment::Rot90 => (c, m - r),
            Augment::Rot180 => (m - r, m - c),
            Augment::Rot270 => (m - c, r),
            Augment::FlipH => (r, m - c),
            Augment::FlipV => (m - r, c),
        }
    }

    pub fn inverse(self) -> Augment {
        match self {
            Augment::Rot90 => Augment::Rot270,
            Augment::Rot270 => Augment::Rot90,
            other => other,
        }
    }

    pub fn apply_image(self, img: &RasterImage) -> RasterImage {
        let n = img.height();
        let c = img.channels();
        RasterImage::from_fn(n, n, c, |r, col, ch| {
            let (sr, sc) = self.source(r, col, n);
            img.get(sr, sc, ch)
        })
        .expect("values copied from a valid image")
    }

    pub fn apply_labels(self, cm: &ChangeMap) -> ChangeMap {
        let n = cm.height();
        ChangeMap::from_fn(n, n, |r, c| {
            let (sr, sc) = self.source(r, c, n);
            cm.get(sr, sc) == 1
        })
    }

    pub fn apply_map(self, map: &ScalarMap) -> ScalarMap {
        let n = map.height();
        ScalarMap::from_fn(n, n, |r, c| {
            let (sr, sc) = self.source(r, c, n);
            map.get(sr, sc)
        })
        .expect("values copied from a valid map")
    }
}

/// One training tile: both images and any number of (label, weight) pairs,
/// all transformed congruently.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x1: RasterImage,
    pub x2: RasterImage,
    pub labels: Vec<(ChangeMap, ScalarMap)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Tile origins along one axis: multiples of `stride`, with the last tile
/// moved inward to end at the border.
pub fn tile_origins(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    let last = len - crop;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("origin 0") != last {
        out.push(last);
    }
    out
}

fn crop_labels(cm: &ChangeMap, r: usize, c: usize, n: usize) -> ChangeMap {
    ChangeMap::from_fn(n, n, |i, j| cm.get(r + i, c + j) == 1)
}

fn crop_map(map: &ScalarMap, r: usize, c: usize, n: usize) -> Result<ScalarMap> {
    ScalarMap::from_fn(n, n, |i, j| map.get(r + i, c + j))
}

/// Tiles carrying several label sets.
pub fn make_training_set_multi(
    x1: &RasterImage,
    x2: &RasterImage,
    labels: &[(&ChangeMap, &ScalarMap)],
    cfg: &TrainConfig,
) -> Result<TrainingSet> {
    cfg.validate()?;
    check_pair(x1, x2)?;
    let (h, w) = (x1.height(), x1.width());
    for (cm, pc) in labels {
        if (cm.height(), cm.width()) != (h, w) || (pc.height(), pc.width()) != (h, w) {
            return Err(Error::Shape(format!("label maps must be {h}x{w}")));
        }
    }
    let n = cfg.crop;
    if h < n || w < n {
        return Err(Error::Config(format!(
            "image {h}x{w} is smaller than the {n}x{n} crop"
        )));
    }
    let mut samples = Vec::new();
    for r in tile_origins(h, n, cfg.stride) {
        for c in tile_origins(w, n, cfg.stride) {
            let t1 = x1.crop(r, c, n, n)?;
            let t2 = x2.crop(r, c, n, n)?;
            let tl: Vec<(ChangeMap, ScalarMap)> = labels
                .iter()
                .map(|(cm, pc)| Ok((crop_labels(cm, r, c, n), crop_map(pc, r, c, n)?)))
                .collect::<Result<_>>()?;
            for aug in Augment::ALL {
                samples.push(Sample {
                    x1: aug.apply_image(&t1),
                    x2: aug.apply_image(&t2),
                    labels: tl
                        .iter()
                        .map(|(cm, pc)| (aug.apply_labels(cm), aug.apply_map(pc)))
                        .collect(),
                });
            }
        }
    }
    Ok(TrainingSet { samples })
}

/// Tiles for a single pseudo label.
pub fn make_training_set(
    x1: &RasterImage,
    x2: &RasterImage,
    cm: &ChangeMap,
    pcs: &ScalarMap,
    cfg: &TrainConfig,
) -> Result<TrainingSet> {
    make_training_set_multi(x1, x2, &[(cm, pcs)], cfg)
}

/// Confidence-weighted binary cross-entropy of a probability tensor against
/// a batch of label tiles.
pub fn weighted_bce_loss(
    g: &mut Graph,
    di: Var,
    labels: &[&ChangeMap],
    weights: &[&ScalarMap],
    norm: LossNormalization,
) -> Result<Var> {
    let targets: Vec<f64> = labels
        .iter()
        .flat_map(|cm| cm.data().iter().map(|&v| f64::from(v)))
        .collect();
    let w: Vec<f64> = weights
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    g.weighted_bce(di, &targets, &w, norm)
}

/// Minimize `Σ coefficient_k · loss_k` over the training set, where loss k
/// uses label set k of every sample. Terms with coefficient 0 are skipped.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: &mut ChangeDetector,
    set: &TrainingSet,
    coefficients: &[f64],
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    log: &mut TrainingLog,
    stage: &'static str,
) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adam = AdamState::new(cfg.lr);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &set.samples[i]).collect();
            let mut g = Graph::new();
            let a = g.input(images_to_tensor(
                &batch.iter().map(|s| &s.x1).collect::<Vec<_>>(),
            )?);
            let b = g.input(images_to_tensor(
                &batch.iter().map(|s| &s.x2).collect::<Vec<_>>(),
            )?);
            let out = net.forward(&mut g, a, b, Mode::Train)?;
            let mut loss: Option<Var> = None;
            for (k, &coef) in coefficients.iter().enumerate() {
                if coef == 0.0 {
                    continue;
                }
                let labels: Vec<&ChangeMap> = batch.iter().map(|s| &s.labels[k].0).collect();
                let weights: Vec<&ScalarMap> = batch.iter().map(|s| &s.labels[k].1).collect();
                let mut term = weighted_bce_loss(&mut g, out, &labels, &weights, cfg.loss_norm)?;
                if coef != 1.0 {
                    term = g.scale(term, coef);
                }
                loss = Some(match loss {
                    Some(l) => g.add(l, term)?,
                    None => term,
                });
            }
            let loss =
                loss.ok_or_else(|| Error::Config("all loss coefficients are zero".into()))?;
            total += g.value(loss).item()?;
            batches += 1;
            net.params_mut().zero_grad();
            g.backward(loss, net.params_mut())?;
            adam_step(net.params_mut(), &mut adam)?;
        }
        log.records.push(EpochRecord {
            stage,
            epoch,
            loss: total / batches as f64,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Train a fresh network on one pseudo label and its weights.
pub fn train_on_labels(
    x1: &RasterImage,
    x2: &RasterImage,
    cm: &ChangeMap,
    pcs: &ScalarMap,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    log: &mut TrainingLog,
) -> Result<ChangeDetector> {
    let set = make_training_set(x1, x2, cm, pcs, cfg)?;
    let mut net = ChangeDetector::build(cfg.network(x1.channels()), rng)?;
    fit(
        &mut net,
        &set,
        &[1.0],
        cfg.epochs_teacher,
        cfg,
        rng,
        log,
        "teacher",
    )?;
    Ok(net)
}

/// Pre-detect, then train the teacher on the first pseudo label.
pub fn train_teacher(
    x1: &RasterImage,
    x2: &RasterImage,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    log: &mut TrainingLog,
) -> Result<ChangeDetector> {
    let (cm1, pc1) = predetect(x1, x2, cfg)?;
    train_on_labels(x1, x2, &cm1, &pc1, cfg, rng, log)
}

/// The teacher's change map at threshold 0.5 and its weights.
pub fn pseudo_label_2(
    teacher: &mut ChangeDetector,
    x1: &RasterImage,
    x2: &RasterImage,
    cfg: &TrainConfig,
) -> Result<(ChangeMap, ScalarMap)> {
    let (_, cm2) = teacher.predict_change_map(x1, x2)?;
    let pc2 = label_weights(&cm2, cfg)?;
    Ok((cm2, pc2))
}

/// Train a fresh student on `beta·L1 + (1 − beta)·L2`.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    x1: &RasterImage,
    x2: &RasterImage,
    cm1: &ChangeMap,
    pc1s: &ScalarMap,
    cm2: &ChangeMap,
    pc2s: &ScalarMap,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    log: &mut TrainingLog,
) -> Result<ChangeDetector> {
    let set = make_training_set_multi(x1, x2, &[(cm1, pc1s), (cm2, pc2s)], cfg)?;
    let mut net = ChangeDetector::build(cfg.network(x1.channels()), rng)?;
    fit(
        &mut net,
        &set,
        &[cfg.beta, 1.0 - cfg.beta],
        cfg.epochs_student,
        cfg,
        rng,
        log,
        "student",
    )?;
    Ok(net)
}

/// Pre-detection, teacher and second pseudo label of one run, together with
/// the random state the student stage continues from.
#[derive(Debug, Clone)]
pub struct TeacherStage {
    pub cm1: ChangeMap,
    pub pc1: ScalarMap,
    pub teacher: ChangeDetector,
    pub teacher_di: ScalarMap,
    pub cm2: ChangeMap,
    pub pc2: ScalarMap,
    pub log: TrainingLog,
    rng: ChaCha8Rng,
}

/// First half of [`run_usta`]: everything up to the second pseudo label.
pub fn run_teacher_stage(
    x1: &RasterImage,
    x2: &RasterImage,
    cfg: &TrainConfig,
) -> Result<TeacherStage> {
    check_pair(x1, x2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();
    let (cm1, pc1) = predetect(x1, x2, cfg)?;
    let mut teacher = train_on_labels(x1, x2, &cm1, &pc1, cfg, &mut rng, &mut log)?;
    let teacher_di = teacher.predict_di(x1, x2)?;
    let cm2 = crate::threshold::fixed_threshold(&teacher_di, crate::network::DECISION_THRESHOLD)?;
    let pc2 = label_weights(&cm2, cfg)?;
    Ok(TeacherStage {
        cm1,
        pc1,
        teacher,
        teacher_di,
        cm2,
        pc2,
        log,
        rng,
    })
}

/// Output of the student stage.
#[derive(Debug, Clone)]
pub struct StudentStage {
    pub student: ChangeDetector,
    pub final_di: ScalarMap,
    pub final_map: ChangeMap,
    pub log: TrainingLog,
}

/// Second half of [`run_usta`]. Only `beta` (and the other student settings)
/// of `cfg` may differ from the configuration of the teacher stage, so one
/// teacher can serve several student variants with results identical to
/// separate full runs.
pub fn run_student_stage(
    stage: &TeacherStage,
    x1: &RasterImage,
    x2: &RasterImage,
    cfg: &TrainConfig,
) -> Result<StudentStage> {
    let mut rng = stage.rng.clone();
    let mut log = TrainingLog::default();
    let mut student = train_student(
        x1, x2, &stage.cm1, &stage.pc1, &stage.cm2, &stage.pc2, cfg, &mut rng, &mut log,
    )?;
    let (final_di, final_map) = student.predict_change_map(x1, x2)?;
    Ok(StudentStage {
        student,
        final_di,
        final_map,
        log,
    })
}

/// Everything produced by a full run.
#[derive(Debug, Clone)]
pub struct UstaOutput {
    pub cm1: ChangeMap,
    pub pc1: ScalarMap,
    pub teacher_di: ScalarMap,
    pub cm2: ChangeMap,
    pub pc2: ScalarMap,
    pub final_di: ScalarMap,
    pub final_map: ChangeMap,
    pub teacher: ChangeDetector,
    pub student: ChangeDetector,
    pub log: TrainingLog,
}

/// The complete pipeline with all randomness drawn from `cfg.seed`.
pub fn run_usta(x1: &RasterImage, x2: &RasterImage, cfg: &TrainConfig) -> Result<UstaOutput> {
    let stage = run_teacher_stage(x1, x2, cfg)?;
    let student = run_student_stage(&stage, x1, x2, cfg)?;
    let mut log = stage.log;
    log.records.extend(student.log.records);
    Ok(UstaOutput {
        cm1: stage.cm1,
        pc1: stage.pc1,
        teacher_di: stage.teacher_di,
        cm2: stage.cm2,
        pc2: stage.pc2,
        final_di: student.final_di,
        final_map: student.final_map,
        teacher: stage.teacher,
        student: student.student,
        log,
    })
}
