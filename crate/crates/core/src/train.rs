//! Three-stage training: stage 1 source/relay codec, stage 2 relay classifier,
//! stage 3 the relay encoder and destination modules of each scheme.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_into, save_checkpoint, CheckpointMeta};
use crate::classifier::predict;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::loss::{loss_stage1, loss_stage2, loss_stage3, scalar};
use crate::metrics::{accuracy, psnr_per_image};
use crate::optim::{Adam, AdamParams};
use crate::pipeline::{ModuleGroup, RelaySystem, Scheme};

/// One line of the per-epoch log. Unused components are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub scheme: Option<Scheme>,
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub cross_entropy: f64,
    pub psnr_db: f64,
    pub accuracy: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "stage\tscheme\tepoch\tloss\tmse\tcross_entropy\tpsnr_db\taccuracy";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.4}",
            self.stage,
            self.scheme.map_or("-", |s| s.name()),
            self.epoch,
            self.loss,
            self.mse,
            self.cross_entropy,
            self.psnr_db,
            self.accuracy
        )
    }
}

/// Running sums over one epoch.
#[derive(Default)]
struct Tally {
    batches: usize,
    loss: f64,
    mse: f64,
    ce: f64,
    psnr_sum: f64,
    images: usize,
    hits: usize,
    labeled: usize,
}

impl Tally {
    fn add_psnr(&mut self, reference: &Tensor, recon: &Tensor) -> Result<()> {
        for (db, _) in psnr_per_image(reference, recon)? {
            self.psnr_sum += db;
            self.images += 1;
        }
        Ok(())
    }

    fn add_accuracy(&mut self, logits: &Tensor, labels: &[u32]) -> Result<()> {
        let preds = predict(logits)?;
        let acc = accuracy(&preds, labels)?;
        self.hits += (acc * labels.len() as f64).round() as usize;
        self.labeled += labels.len();
        Ok(())
    }

    fn record(&self, stage: u8, scheme: Option<Scheme>, epoch: usize) -> EpochRecord {
        let mean = |x: f64| if self.batches == 0 { f64::NAN } else { x / self.batches as f64 };
        EpochRecord {
            stage,
            scheme,
            epoch,
            loss: mean(self.loss),
            mse: if stage == 2 { f64::NAN } else { mean(self.mse) },
            cross_entropy: if stage == 1 { f64::NAN } else { mean(self.ce) },
            psnr_db: if self.images == 0 {
                f64::NAN
            } else {
                self.psnr_sum / self.images as f64
            },
            accuracy: if self.labeled == 0 {
                f64::NAN
            } else {
                self.hits as f64 / self.labeled as f64
            },
        }
    }
}

/// Optional sink for per-epoch lines.
pub struct EpochLog {
    path: Option<PathBuf>,
}

impl EpochLog {
    pub fn none() -> Self {
        Self { path: None }
    }

    /// Appends to `path`, writing the header when the file is new.
    pub fn file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        if !path.exists() {
            fs::write(path, format!("{}\n", EpochRecord::HEADER)).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
        })
    }

    fn write(&self, rec: &EpochRecord) -> Result<()> {
        log::info!("{}", rec.to_line());
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", rec.to_line()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

fn stage_rngs(seed: u64, stage: u8) -> (ChaCha8Rng, ChaCha8Rng) {
    let base = seed ^ (0x5eed_0000 + stage as u64);
    (
        ChaCha8Rng::seed_from_u64(base),
        ChaCha8Rng::seed_from_u64(base.rotate_left(17) ^ 0xc4a1),
    )
}

fn check_finite(value: f64, stage: u8, epoch: usize, step: usize, detail: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            stage,
            epoch,
            step,
            detail: detail(),
        })
    }
}

/// Runs `epochs` passes over `data` in shuffled minibatches; `step` returns the
/// loss tensor for one batch and records metrics in the tally.
fn run_epochs<F>(
    sys: &RelaySystem,
    data: &LabeledImageSet,
    stage: u8,
    scheme: Option<Scheme>,
    mut opt: Adam,
    log: &EpochLog,
    mut step: F,
) -> Result<(Vec<EpochRecord>, Adam)>
where
    F: FnMut(&Tensor, &[u32], &mut ChaCha8Rng, &mut Tally) -> Result<Tensor>,
{
    let cfg = sys.config();
    let epochs = cfg.epochs[stage as usize - 1];
    let (mut order_rng, mut channel_rng) = stage_rngs(cfg.seed, stage);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut order_rng);
        let mut tally = Tally::default();
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = data.batch(chunk, sys.dtype(), sys.device())?;
            let loss = step(&images, &labels, &mut channel_rng, &mut tally)?;
            let value = scalar(&loss)?;
            check_finite(value, stage, epoch, i, || {
                format!("loss {value}, batch labels {labels:?}")
            })?;
            opt.backward_step(&loss)?;
            tally.batches += 1;
            tally.loss += value;
        }
        let rec = tally.record(stage, scheme, epoch);
        log.write(&rec)?;
        records.push(rec);
    }
    Ok((records, opt))
}

fn optimizer(sys: &RelaySystem, group: ModuleGroup) -> Result<Adam> {
    Adam::new(
        vec![sys.store(group).clone()],
        AdamParams::with_lr(sys.config().learning_rate),
    )
}

/// Stage 1: source encoder and relay decoder on the SR-link reconstruction loss.
pub fn train_stage1(sys: &mut RelaySystem, data: &LabeledImageSet, log: &EpochLog) -> Result<Vec<EpochRecord>> {
    let opt = optimizer(sys, ModuleGroup::SourceRelayCodec)?;
    let (records, _) = run_epochs(sys, data, 1, None, opt, log, |img, _, rng, tally| {
        let out = sys.forward_stage1(img, rng)?;
        let loss = loss_stage1(img, &out.relay_recon)?;
        tally.mse += scalar(&loss)?;
        tally.add_psnr(img, &out.relay_recon)?;
        Ok(loss)
    })?;
    sys.mark_ready(ModuleGroup::SourceRelayCodec);
    Ok(records)
}

/// Stage 2: relay classifier on frozen stage-1 reconstructions.
pub fn train_stage2(sys: &mut RelaySystem, data: &LabeledImageSet, log: &EpochLog) -> Result<Vec<EpochRecord>> {
    sys.require_ready(&[ModuleGroup::SourceRelayCodec], "stage 2")?;
    let opt = optimizer(sys, ModuleGroup::RelayClassifier)?;
    let (records, _) = run_epochs(sys, data, 2, None, opt, log, |img, labels, rng, tally| {
        let (_, logits) = sys.forward_stage2(img, rng)?;
        let loss = loss_stage2(&logits, labels)?;
        tally.ce += scalar(&loss)?;
        tally.add_accuracy(&logits, labels)?;
        Ok(loss)
    })?;
    sys.mark_ready(ModuleGroup::RelayClassifier);
    Ok(records)
}

/// Stage 3 for one scheme, with every earlier group frozen.
pub fn train_stage3(
    sys: &mut RelaySystem,
    scheme: Scheme,
    data: &LabeledImageSet,
    log: &EpochLog,
) -> Result<Vec<EpochRecord>> {
    let needs: &[ModuleGroup] = match scheme {
        Scheme::MtmlRsc => &[ModuleGroup::SourceRelayCodec, ModuleGroup::RelayClassifier],
        Scheme::Baseline => &[ModuleGroup::SourceRelayCodec],
    };
    sys.require_ready(needs, "stage 3")?;
    let lambda = sys.config().lambda_cls;
    let opt = optimizer(sys, scheme.group())?;
    let (records, _) = run_epochs(sys, data, 3, Some(scheme), opt, log, |img, labels, rng, tally| {
        let out = match scheme {
            Scheme::MtmlRsc => sys.forward_mtml_train(img, labels, rng)?,
            Scheme::Baseline => sys.forward_baseline(img, rng)?,
        };
        let l = loss_stage3(img, &out.dest_recon, &out.dest_logits, labels, lambda)?;
        tally.mse += l.mse;
        tally.ce += l.cross_entropy;
        tally.add_psnr(img, &out.dest_recon)?;
        tally.add_accuracy(&out.dest_logits, labels)?;
        Ok(l.total)
    })?;
    sys.mark_ready(scheme.group());
    Ok(records)
}

pub fn checkpoint_path(dir: &Path, group: ModuleGroup) -> PathBuf {
    dir.join(group.checkpoint_file())
}

pub fn save_group(sys: &RelaySystem, group: ModuleGroup, dir: &Path) -> Result<PathBuf> {
    let path = checkpoint_path(dir, group);
    let meta = CheckpointMeta {
        group: group.name().to_string(),
        stage: group.stage(),
        config: sys.config().to_toml_string(),
    };
    save_checkpoint(&path, sys.store(group), &meta, None)?;
    Ok(path)
}

/// Loads a group's checkpoint from `dir` and marks it ready.
pub fn load_group(sys: &mut RelaySystem, group: ModuleGroup, dir: &Path) -> Result<()> {
    let path = checkpoint_path(dir, group);
    if !path.exists() {
        return Err(Error::StageOrder(format!(
            "no checkpoint for {} at {}",
            group.name(),
            path.display()
        )));
    }
    load_into(&path, sys.store(group), group.name())?;
    sys.mark_ready(group);
    Ok(())
}

/// Which stages and schemes a training run covers.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub stages: Vec<u8>,
    pub schemes: Vec<Scheme>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stages: vec![1, 2, 3],
            schemes: Scheme::ALL.to_vec(),
        }
    }
}

/// Runs the planned stages, loading earlier stages from `dir` when they are
/// not part of the plan, and writes checkpoints, the resolved config, and the
/// epoch log into `dir`.
pub fn train(
    sys: &mut RelaySystem,
    data: &LabeledImageSet,
    plan: &TrainPlan,
    dir: &Path,
) -> Result<Vec<EpochRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sys.config().save(&dir.join("config.toml"))?;
    let log = EpochLog::file(&dir.join("train_log.tsv"))?;
    let mut records = Vec::new();
    let wants = |s: u8| plan.stages.contains(&s);

    if wants(1) {
        records.extend(train_stage1(sys, data, &log)?);
        save_group(sys, ModuleGroup::SourceRelayCodec, dir)?;
    } else if wants(2) || wants(3) {
        load_group(sys, ModuleGroup::SourceRelayCodec, dir)?;
    }

    let mtml = plan.schemes.contains(&Scheme::MtmlRsc);
    if wants(2) {
        records.extend(train_stage2(sys, data, &log)?);
        save_group(sys, ModuleGroup::RelayClassifier, dir)?;
    } else if wants(3) && mtml {
        load_group(sys, ModuleGroup::RelayClassifier, dir)?;
    }

    if wants(3) {
        for &scheme in &plan.schemes {
            records.extend(train_stage3(sys, scheme, data, &log)?);
            save_group(sys, scheme.group(), dir)?;
        }
    }
    Ok(records)
}

/// Loads every group a scheme needs for evaluation.
pub fn load_for_eval(sys: &mut RelaySystem, schemes: &[Scheme], dir: &Path) -> Result<()> {
    load_group(sys, ModuleGroup::SourceRelayCodec, dir)?;
    for &s in schemes {
        if s == Scheme::MtmlRsc {
            load_group(sys, ModuleGroup::RelayClassifier, dir)?;
        }
        load_group(sys, s.group(), dir)?;
    }
    Ok(())
}
