//! Stage orchestration over an output directory.
//!
//! Every stage reads its inputs from files written by earlier stages and
//! writes its own artifacts, so any stage can be rerun on its own.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calib::{self, CalibConfig, CalibError, CalibrationResult};
use crate::grad::{GradError, ParamStore};
use crate::metrics::{self, MetricsError};
use crate::pathpolicy::{self, PolicyConfig, PolicyContext, PolicyError, PolicyNet};
use crate::roadnet::{self, OdtQuery, Path, RoadnetError};
use crate::synthgen::{self, DataConfig, Dataset, Split, SynthError};
use crate::traffic::TrafficIndex;
use crate::uqmoe::{self, IntervalEstimate, PathFeatures, UqConfig, UqError, UqModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` needs {}; run the earlier stages first", path.display())]
    MissingArtifact { stage: Stage, path: PathBuf },
    #[error("config: {0}")]
    Config(String),
    #[error("{file} line {line}: {msg}")]
    Parse { file: &'static str, line: usize, msg: String },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Roadnet(#[from] RoadnetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    TrainPath,
    TrainUq,
    Calibrate,
    Evaluate,
    Predict,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::TrainPath,
        Stage::TrainUq,
        Stage::Calibrate,
        Stage::Evaluate,
        Stage::Predict,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainPath => "train-path",
            Stage::TrainUq => "train-uq",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
            Stage::Predict => "predict",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trailing window for smoothing validation reward curves.
    pub smoothing_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { smoothing_window: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub uq: UqConfig,
    pub calibration: CalibConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.policy.validate()?;
        self.uq.validate()?;
        self.calibration.grid()?;
        for (name, v) in [("alpha", self.calibration.alpha), ("delta", self.calibration.delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(PipelineError::Config(format!("calibration.{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub const DATA_DIR: &str = "data";
pub const POLICY_CKPT: &str = "policy.ckpt";
pub const POLICY_LOG: &str = "policy_log.csv";
pub const REWARD_CURVE: &str = "reward_curve.csv";
pub const PATHS_FILE: &str = "paths.txt";
pub const UQ_CKPT: &str = "uq.ckpt";
pub const UQ_LOG: &str = "uq_log.csv";
pub const HIST_CACHE: &str = "histograms.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const RISK_CURVE: &str = "risk_curve.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub calib: usize,
    pub test: usize,
}

/// Test-split metrics; field order is the JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_digest: String,
    pub counts: SplitCounts,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub picp: f64,
    pub iw: f64,
    pub picp_uncalibrated: f64,
    pub iw_uncalibrated: f64,
    pub lambda_hat: f64,
    pub lcs_mean: f64,
    pub lcs_norm_mean: f64,
    pub dtw_mean: f64,
    pub reached_frac: f64,
}

/// A configured run rooted at an output directory.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

fn require(stage: Stage, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { stage, path })
    }
}

fn write_paths(paths: &[Path], file: &FsPath) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(file)?);
    for (i, p) in paths.iter().enumerate() {
        let nodes: Vec<String> = p.nodes().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{i};{}", nodes.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_paths(file: &FsPath) -> Result<Vec<Path>> {
    let text = fs::read_to_string(file)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| PipelineError::Parse { file: PATHS_FILE, line: i + 1, msg };
        let (id, nodes) = line.split_once(';').ok_or_else(|| err("expected `id;nodes`".into()))?;
        if id.parse::<usize>().ok() != Some(out.len()) {
            return Err(err(format!("expected id {}", out.len())));
        }
        let nodes = nodes
            .split(',')
            .map(|v| v.parse::<usize>().map_err(|e| err(format!("node {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(Path::new(nodes));
    }
    Ok(out)
}

fn write_csv(file: &FsPath, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(file)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Self {
        Self { cfg, out: out.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self, stage: Stage) -> Result<Dataset> {
        let dir = self.file(DATA_DIR);
        require(stage, dir.join(synthgen::TRIPS_FILE))?;
        Ok(Dataset::load(dir)?)
    }

    fn traffic(ds: &Dataset) -> Result<TrafficIndex> {
        Ok(TrafficIndex::build(&ds.network, ds.trips_in(Split::Train))?)
    }

    fn policy(&self, stage: Stage, ds: &Dataset) -> Result<(PolicyNet, ParamStore)> {
        let saved = ParamStore::load(require(stage, self.file(POLICY_CKPT))?)?;
        Ok(PolicyNet::from_checkpoint(&self.cfg.policy, ds.network.node_count(), &saved)?)
    }

    fn uq(&self, stage: Stage, ds: &Dataset) -> Result<(UqModel, ParamStore)> {
        let saved = ParamStore::load(require(stage, self.file(UQ_CKPT))?)?;
        Ok(UqModel::from_checkpoint(
            &self.cfg.uq,
            ds.network.edge_count(),
            self.cfg.data.profile_slices(),
            &saved,
        )?)
    }

    fn calibration(&self, stage: Stage) -> Result<CalibrationResult> {
        let text = fs::read_to_string(require(stage, self.file(CALIBRATION_FILE))?)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn features(&self, stage: Stage, ds: &Dataset, index: &TrafficIndex) -> Result<Vec<PathFeatures>> {
        let paths = read_paths(&require(stage, self.file(PATHS_FILE))?)?;
        Ok(uqmoe::dataset_features(
            ds,
            index,
            &self.cfg.uq,
            self.cfg.data.slice_len,
            self.cfg.data.profile_slices(),
            &paths,
        )?)
    }

    pub fn generate(&self) -> Result<Dataset> {
        fs::create_dir_all(&self.out)?;
        let (ds, _) = synthgen::build_dataset(&self.cfg.data, self.cfg.seed)?;
        ds.save(self.file(DATA_DIR))?;
        Ok(ds)
    }

    pub fn train_path(&self) -> Result<pathpolicy::TrainedPolicy> {
        let ds = self.dataset(Stage::TrainPath)?;
        let index = Self::traffic(&ds)?;
        let trained = pathpolicy::train_policy(&ds, &index, &self.cfg.policy, self.cfg.seed)?;
        trained.store.save(self.file(POLICY_CKPT))?;
        write_csv(
            &self.file(POLICY_LOG),
            pathpolicy::PolicyEpochLog::CSV_HEADER,
            trained.log.iter().map(|l| l.csv_row()),
        )?;
        let rewards: Vec<f64> = trained.log.iter().map(|l| l.val_mean_reward).collect();
        let smooth = pathpolicy::smoothed(&rewards, self.cfg.eval.smoothing_window);
        write_csv(
            &self.file(REWARD_CURVE),
            "epoch,val_mean_reward,smoothed",
            trained.log.iter().zip(&smooth).map(|(l, s)| format!("{},{},{s}", l.epoch, l.val_mean_reward)),
        )?;
        Ok(trained)
    }

    /// Greedy policy paths for every query, then the interval model.
    pub fn train_uq(&self) -> Result<uqmoe::TrainedUq> {
        let ds = self.dataset(Stage::TrainUq)?;
        let (policy, pstore) = self.policy(Stage::TrainUq, &ds)?;
        let index = Self::traffic(&ds)?;
        let ctx = PolicyContext { net: &ds.network, traffic: &index, cfg: &self.cfg.policy };
        let predicted = ds
            .queries
            .par_iter()
            .map(|q| Ok(pathpolicy::predict_path(&ctx, &policy, &pstore, q)?.0))
            .collect::<Result<Vec<_>>>()?;
        write_paths(&predicted, &self.file(PATHS_FILE))?;

        let slices = self.cfg.data.profile_slices();
        let feats = uqmoe::dataset_features(&ds, &index, &self.cfg.uq, self.cfg.data.slice_len, slices, &predicted)?;
        let train_feats = if self.cfg.uq.teacher_forced {
            let truth: Vec<Path> = ds.trips.iter().map(|t| t.path()).collect();
            uqmoe::dataset_features(&ds, &index, &self.cfg.uq, self.cfg.data.slice_len, slices, &truth)?
                .into_iter()
                .zip(feats)
                .zip(&ds.splits)
                .map(|((t, p), &s)| if s == Split::Train { t } else { p })
                .collect()
        } else {
            feats
        };
        let trained = uqmoe::train_uq(&ds, &train_feats, &self.cfg.uq, slices, self.cfg.seed)?;
        trained.store.save(self.file(UQ_CKPT))?;
        write_csv(&self.file(UQ_LOG), uqmoe::UqEpochLog::CSV_HEADER, trained.log.iter().map(|l| l.csv_row()))?;
        let cache = BufWriter::new(fs::File::create(self.file(HIST_CACHE))?);
        uqmoe::write_histogram_cache(&index, &self.cfg.uq, self.cfg.data.slice_len, slices, cache)?;
        Ok(trained)
    }

    #[allow(clippy::type_complexity)]
    fn split_estimates(&self, stage: Stage, split: Split) -> Result<(Dataset, Vec<usize>, Vec<IntervalEstimate>, Vec<f64>)> {
        let ds = self.dataset(stage)?;
        let (model, store) = self.uq(stage, &ds)?;
        let index = Self::traffic(&ds)?;
        let feats = self.features(stage, &ds, &index)?;
        let idx = ds.indices(split);
        let est = uqmoe::predict_all(&model, &store, &feats, &idx)?;
        let truths = idx.iter().map(|&i| ds.trips[i].travel_time()).collect();
        Ok((ds, idx, est, truths))
    }

    pub fn calibrate(&self) -> Result<CalibrationResult> {
        let stage = Stage::Calibrate;
        require(stage, self.file(UQ_CKPT))?;
        let (_, _, est, truths) = self.split_estimates(stage, Split::Calib)?;
        let c = &self.cfg.calibration;
        let result = calib::fit_lambda(&est, &truths, c.alpha, c.delta, &c.grid()?)?;
        fs::write(self.file(CALIBRATION_FILE), serde_json::to_string_pretty(&result)? + "\n")?;
        result.write_risk_curve(BufWriter::new(fs::File::create(self.file(RISK_CURVE))?))?;
        Ok(result)
    }

    pub fn evaluate(&self) -> Result<MetricsReport> {
        let stage = Stage::Evaluate;
        require(stage, self.file(UQ_CKPT))?;
        let result = self.calibration(stage)?;
        let (ds, idx, est, truths) = self.split_estimates(stage, Split::Test)?;
        let paths = read_paths(&self.file(PATHS_FILE))?;

        let point = metrics::point_metrics(&est.iter().map(|e| e.y_hat).collect::<Vec<_>>(), &truths)?;
        let raw: Vec<(f64, f64)> = est.iter().map(|e| (e.lower(), e.upper())).collect();
        let raw = metrics::interval_metrics(&raw, &truths)?;
        let cal: Vec<(f64, f64)> = est.iter().map(|e| calib::apply_calibration(e, &result)).collect();
        let cal = metrics::interval_metrics(&cal, &truths)?;

        let n = idx.len() as f64;
        let (mut lcs, mut lcs_norm, mut dtw, mut reached) = (0.0, 0.0, 0.0, 0usize);
        for &i in &idx {
            let truth = ds.trips[i].path();
            let s = crate::align::scores(&paths[i], &truth, &ds.network).map_err(PolicyError::from)?;
            lcs += s.lcs_len as f64 / n;
            lcs_norm += s.lcs_norm / n;
            dtw += s.dtw_norm / n;
            if paths[i].last() == truth.last() {
                reached += 1;
            }
        }
        let report = MetricsReport {
            seed: self.cfg.seed,
            config_digest: self.cfg.digest(),
            counts: SplitCounts {
                train: ds.count(Split::Train),
                val: ds.count(Split::Val),
                calib: ds.count(Split::Calib),
                test: ds.count(Split::Test),
            },
            rmse: point.rmse,
            mae: point.mae,
            mape: point.mape,
            picp: cal.picp,
            iw: cal.iw,
            picp_uncalibrated: raw.picp,
            iw_uncalibrated: raw.iw,
            lambda_hat: result.lambda_hat,
            lcs_mean: lcs,
            lcs_norm_mean: lcs_norm,
            dtw_mean: dtw,
            reached_frac: reached as f64 / n,
        };
        fs::write(self.file(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(report)
    }

    /// Calibrated predictions for a queries file, written as CSV.
    pub fn predict(&self, queries: Option<&FsPath>) -> Result<PathBuf> {
        let stage = Stage::Predict;
        let ds = self.dataset(stage)?;
        let (policy, pstore) = self.policy(stage, &ds)?;
        let (model, ustore) = self.uq(stage, &ds)?;
        let result = self.calibration(stage)?;
        let qfile = match queries {
            Some(q) => require(stage, q.to_path_buf())?,
            None => self.file(DATA_DIR).join(synthgen::QUERIES_FILE),
        };
        let queries: Vec<OdtQuery> = roadnet::load_queries(&qfile)?;
        let index = Self::traffic(&ds)?;
        let ctx = PolicyContext { net: &ds.network, traffic: &index, cfg: &self.cfg.policy };
        let slices = self.cfg.data.profile_slices();
        let rows = queries
            .par_iter()
            .map(|q| {
                let (path, _) = pathpolicy::predict_path(&ctx, &policy, &pstore, q)?;
                let f = uqmoe::path_features(&ds.network, &index, &self.cfg.uq, self.cfg.data.slice_len, slices, &path, q.departure_time)?;
                let e = model.predict_interval(&ustore, &f)?;
                let (lo, hi) = calib::apply_calibration(&e, &result);
                Ok(format!("{},{},{},{}", q.id, e.y_hat, lo, hi))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.file(PREDICTIONS_FILE);
        write_csv(&out, "query_id,y_hat,lower,upper", rows)?;
        Ok(out)
    }

    pub fn run_stage(&self, stage: Stage, queries: Option<&FsPath>) -> Result<()> {
        match stage {
            Stage::Generate => self.generate().map(drop),
            Stage::TrainPath => self.train_path().map(drop),
            Stage::TrainUq => self.train_uq().map(drop),
            Stage::Calibrate => self.calibrate().map(drop),
            Stage::Evaluate => self.evaluate().map(drop),
            Stage::Predict => self.predict(queries).map(drop),
        }
    }

    /// Generate through evaluate, returning the report.
    pub fn run_all(&self) -> Result<MetricsReport> {
        self.generate()?;
        self.train_path()?;
        self.train_uq()?;
        self.calibrate()?;
        self.evaluate()
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = one per core).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Reads the evaluation report written by [`Pipeline::evaluate`].
pub fn read_report(out: &FsPath) -> Result<serde_json::Value> {
    let f = BufReader::new(fs::File::open(out.join(REPORT_FILE))?);
    Ok(serde_json::from_reader(f)?)
}
