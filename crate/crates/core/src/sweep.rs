//! Results persistence and SNR / relay-position sweeps.
//!
//! Results files are comma-separated with the columns of [`ResultRow`]. Lines
//! starting with `#` carry run metadata; each run appends its own metadata
//! block followed by its rows.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FadingKind};
use crate::data::load_dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::pipeline::{RelaySystem, Scheme};
use crate::train::{load_for_eval, train, TrainPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: Scheme,
    pub fading: FadingKind,
    pub snr_db: f64,
    pub d_sr: f64,
    pub psnr_db: f64,
    pub saturated: bool,
    pub accuracy: f64,
    /// Channel-noise seed of the evaluation.
    pub seed: u64,
    pub eval_size: usize,
}

pub const RESULT_COLUMNS: [&str; 9] = [
    "scheme", "fading", "snr_db", "d_sr", "psnr_db", "saturated", "accuracy", "seed", "eval_size",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn push(&mut self, row: ResultRow) -> Result<()> {
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::Results(format!("accuracy {} outside [0, 1]", row.accuracy)));
        }
        if !row.psnr_db.is_finite() {
            return Err(Error::Results(format!("non-finite PSNR {}", row.psnr_db)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self, metadata: &[(String, String)]) -> Result<String> {
        let mut out = String::new();
        for (k, v) in metadata {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(RESULT_COLUMNS).map_err(|e| Error::Results(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Results(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Results(e.to_string()))?;
        out.push_str(&String::from_utf8(body).map_err(|e| Error::Results(e.to_string()))?);
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut table = Self::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Results(e.to_string()))?;
            if rec.iter().eq(RESULT_COLUMNS) {
                continue;
            }
            let row: ResultRow = rec
                .deserialize(None)
                .map_err(|e| Error::Results(format!("bad row {rec:?}: {e}")))?;
            table.push(row)?;
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Writes a fresh file (replacing any existing one).
    pub fn write(&self, path: &Path, metadata: &[(String, String)]) -> Result<()> {
        fs::write(path, self.to_csv(metadata)?).map_err(|e| Error::io(path, e))
    }

    /// Appends a metadata block and the rows to `path`, creating it if needed.
    pub fn append_to(&self, path: &Path, metadata: &[(String, String)]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv(metadata)?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Snr,
    Distance,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(SweepAxis::Snr),
            "distance" | "d_sr" => Ok(SweepAxis::Distance),
            other => Err(Error::invalid("axis", format!("unknown axis `{other}` (snr | distance)"))),
        }
    }
}

impl SweepAxis {
    pub fn value(self, row: &ResultRow) -> f64 {
        match self {
            SweepAxis::Snr => row.snr_db,
            SweepAxis::Distance => row.d_sr,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Snr => "SNR (dB)",
            SweepAxis::Distance => "source-relay distance d_SR (normalized)",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr",
            SweepAxis::Distance => "distance",
        }
    }

    /// The axis a table varies along: SNR if it holds more than one SNR value.
    pub fn of_table(table: &ResultsTable) -> Self {
        let first = table.rows.first().map(|r| r.snr_db);
        if table.rows.iter().any(|r| Some(r.snr_db) != first) {
            SweepAxis::Snr
        } else {
            SweepAxis::Distance
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub axis: SweepAxis,
    pub points: Vec<f64>,
    pub schemes: Vec<Scheme>,
    /// Train missing checkpoints instead of failing.
    pub train_on_demand: bool,
    /// Evaluations per point with channel seeds `seed, seed + 1, ...`.
    pub trials: usize,
    /// Directory holding one checkpoint subdirectory per point.
    pub checkpoint_root: PathBuf,
}

/// Config for one sweep point. The distance axis moves the relay while
/// keeping the SNR; `d_rd = 1 - d_sr` follows from the config.
pub fn point_config(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Snr => cfg.snr_db = value,
        SweepAxis::Distance => cfg.d_sr = value,
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn point_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("{}_snr{}_dsr{}", cfg.fading, cfg.snr_db, cfg.d_sr))
}

/// Evaluates every scheme at every point, training per point when allowed.
/// Rows come out ordered by point, then scheme, then trial.
pub fn run_sweep(base: &ExperimentConfig, opts: &SweepOptions) -> Result<ResultsTable> {
    if opts.points.is_empty() || opts.schemes.is_empty() {
        return Err(Error::invalid("points", "sweep needs at least one point and one scheme"));
    }
    let mut points = opts.points.clone();
    points.sort_by(|a, b| a.total_cmp(b));
    let (train_set, eval_set) = load_dataset(base)?;
    let mut table = ResultsTable::default();
    for &p in &points {
        let cfg = point_config(base, opts.axis, p)?;
        let dir = point_dir(&opts.checkpoint_root, &cfg);
        let mut sys = RelaySystem::new(&cfg, DType::F32, &Device::Cpu)?;
        if load_for_eval(&mut sys, &opts.schemes, &dir).is_err() {
            if !opts.train_on_demand {
                return Err(Error::StageOrder(format!(
                    "missing checkpoints in {} (enable train-on-demand to train them)",
                    dir.display()
                )));
            }
            log::info!("training point {} = {p}", opts.axis.slug());
            sys = RelaySystem::new(&cfg, DType::F32, &Device::Cpu)?;
            let plan = TrainPlan {
                stages: vec![1, 2, 3],
                schemes: opts.schemes.clone(),
            };
            train(&mut sys, &train_set, &plan, &dir)?;
        }
        for &scheme in &opts.schemes {
            for trial in 0..opts.trials.max(1) {
                let seed = cfg.seed + trial as u64;
                let r = evaluate(&sys, scheme, &eval_set, seed)?;
                table.push(ResultRow {
                    scheme,
                    fading: cfg.fading,
                    snr_db: cfg.snr_db,
                    d_sr: cfg.d_sr,
                    psnr_db: r.psnr_db,
                    saturated: r.saturated,
                    accuracy: r.accuracy,
                    seed,
                    eval_size: r.eval_size,
                })?;
            }
        }
    }
    Ok(table)
}

/// Metadata lines recorded with each appended block of results.
pub fn run_metadata(cfg: &ExperimentConfig, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut md = vec![
        ("tool".to_string(), format!("mtml-rsc {}", env!("CARGO_PKG_VERSION"))),
        ("config_seed".to_string(), cfg.seed.to_string()),
        ("dataset".to_string(), format!("{:?}", cfg.dataset)),
        ("image_size".to_string(), cfg.image_size.to_string()),
        ("num_classes".to_string(), cfg.num_classes.to_string()),
        ("epochs".to_string(), format!("{:?}", cfg.epochs)),
    ];
    md.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: Scheme, snr: f64, psnr: f64) -> ResultRow {
        ResultRow {
            scheme,
            fading: FadingKind::Awgn,
            snr_db: snr,
            d_sr: 0.5,
            psnr_db: psnr,
            saturated: false,
            accuracy: 0.7031,
            seed: 3,
            eval_size: 10,
        }
    }

    #[test]
    fn csv_round_trip_keeps_full_precision() {
        let mut t = ResultsTable::default();
        t.push(row(Scheme::MtmlRsc, -5.0, 21.123456789012345)).unwrap();
        t.push(row(Scheme::Baseline, 15.0, 1.0 / 3.0)).unwrap();
        let text = t.to_csv(&[("k".into(), "v".into())]).unwrap();
        assert!(text.starts_with("# k: v\nscheme,fading,"));
        assert_eq!(ResultsTable::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn appends_accumulate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut t = ResultsTable::default();
        t.push(row(Scheme::MtmlRsc, 5.0, 20.0)).unwrap();
        t.append_to(&p, &[("run".into(), "1".into())]).unwrap();
        t.append_to(&p, &[("run".into(), "2".into())]).unwrap();
        assert_eq!(ResultsTable::read(&p).unwrap().len(), 2);
    }

    #[test]
    fn invalid_rows_rejected() {
        let mut t = ResultsTable::default();
        let mut r = row(Scheme::MtmlRsc, 5.0, 20.0);
        r.accuracy = 1.5;
        assert!(t.push(r).is_err());
        assert!(t.push(row(Scheme::MtmlRsc, 5.0, f64::NAN)).is_err());
    }

    #[test]
    fn distance_points_keep_snr_and_complement() {
        let base = ExperimentConfig {
            snr_db: 5.0,
            ..Default::default()
        };
        let c = point_config(&base, SweepAxis::Distance, 0.3).unwrap();
        assert_eq!(c.snr_db, 5.0);
        assert!((c.d_rd() - 0.7).abs() < 1e-12);
        assert!(point_config(&base, SweepAxis::Distance, 1.2).is_err());
        assert!("bogus".parse::<SweepAxis>().is_err());
    }
}
