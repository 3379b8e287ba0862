//! End-to-end experiment steps shared by the command line and the tests:
//! data loading, training, evaluation and calibration for one seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationReport, CalibrationSettings, Method, Population, DEFAULT_BINS, DEFAULT_TOP_GROUP};
use crate::corpus::{
    generate_synthetic, load_docred, load_schema, relation_frequencies, subsample, RawDocument, RelationSchema,
    SyntheticConfig, DEFAULT_MAX_ATTEMPTS, DEFAULT_TOLERANCE,
};
use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::metrics::{best_threshold, evaluate, EvalReport, PredictionSet, TrainFactIndex};
use crate::model::{DocReModel, DocumentScores, ModelConfig, PreparedDocument};
use crate::scalar::Scalar;
use crate::trainer::{train, EpochRecord, TrainConfig, TrainOutcome};

/// Where documents come from: DocRED-layout files when all paths are set,
/// otherwise a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub schema: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Train on a label-distribution-preserving subset of this many documents.
    pub subsample: Option<usize>,
    pub subsample_tolerance: f64,
    pub subsample_attempts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            schema: None,
            train: None,
            dev: None,
            test: None,
            synthetic: SyntheticConfig::default(),
            subsample: None,
            subsample_tolerance: DEFAULT_TOLERANCE,
            subsample_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

impl DataConfig {
    pub fn uses_files(&self) -> bool {
        self.train.is_some() || self.dev.is_some() || self.test.is_some() || self.schema.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_files() {
            if self.schema.is_none() || self.train.is_none() || self.dev.is_none() {
                return Err(Error::Config("file data needs schema, train and dev paths".into()));
            }
        } else {
            self.synthetic.validate()?;
            if self.synthetic.dev_documents == 0 {
                return Err(Error::Config("synthetic data needs development documents".into()));
            }
        }
        if self.subsample == Some(0) {
            return Err(Error::Config("subsample size must be positive".into()));
        }
        if !(self.subsample_tolerance >= 0.0) {
            return Err(Error::Config("subsample tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub method: Method,
    pub bins: usize,
    pub population: Population,
    pub top_group: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            method: Method::None,
            bins: DEFAULT_BINS,
            population: Population::All,
            top_group: DEFAULT_TOP_GROUP,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config(0).validate()?;
        self.train.validate()?;
        if self.calibration.bins == 0 {
            return Err(Error::Config("calibration bins must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration with the initialization seed set to `seed`.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                seed,
                ..self.encoder.clone()
            },
            head: self.head.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub schema: RelationSchema,
    pub train: Vec<RawDocument>,
    pub dev: Vec<RawDocument>,
    pub test: Vec<RawDocument>,
    /// L1 label distance of the training subsample, when one was drawn.
    pub subsample_distance: Option<f64>,
}

impl Splits {
    pub fn split(&self, which: Split) -> &[RawDocument] {
        match which {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train, dev, test)"))),
        }
    }
}

/// Loads or generates the splits; the subsample, if any, is drawn with `seed`.
pub fn load_splits(cfg: &DataConfig, seed: u64) -> Result<Splits> {
    cfg.validate()?;
    let (schema, train, dev, test) = if cfg.uses_files() {
        let schema = load_schema(cfg.schema.as_ref().expect("validated"))?;
        let train = load_docred(cfg.train.as_ref().expect("validated"), &schema)?;
        let dev = load_docred(cfg.dev.as_ref().expect("validated"), &schema)?;
        let test = match &cfg.test {
            Some(p) => load_docred(p, &schema)?,
            None => Vec::new(),
        };
        (schema, train, dev, test)
    } else {
        let c = generate_synthetic(&cfg.synthetic)?;
        (c.schema, c.train, c.dev, c.test)
    };
    let (train, subsample_distance) = match cfg.subsample {
        Some(n) if n < train.len() => {
            let s = subsample(&train, &schema, n, seed, cfg.subsample_tolerance, cfg.subsample_attempts)?;
            (s.documents, Some(s.distance))
        }
        _ => (train, None),
    };
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("training and development splits must be non-empty".into()));
    }
    Ok(Splits {
        schema,
        train,
        dev,
        test,
        subsample_distance,
    })
}

/// Train counts per scored class (NA last when it is scored).
pub fn class_frequencies(splits: &Splits, include_na: bool) -> Vec<usize> {
    let mut f = relation_frequencies(&splits.train, &splits.schema);
    if !include_na {
        f.pop();
    }
    f
}

pub fn build_model<S: Scalar>(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<DocReModel<S>> {
    let vocab = Vocabulary::build(&splits.train, Some(&splits.schema));
    DocReModel::new(cfg.model_config(seed), vocab, splits.schema.clone())
}

pub struct TrainedRun<S> {
    pub model: DocReModel<S>,
    pub outcome: TrainOutcome,
    /// Dev-optimal threshold of the returned parameters.
    pub threshold: f64,
}

pub fn train_run<S: Scalar>(
    cfg: &ExperimentConfig,
    splits: &Splits,
    seed: u64,
    jobs: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedRun<S>> {
    cfg.validate()?;
    let mut model = build_model::<S>(cfg, splits, seed)?;
    let train_docs = model.prepare_all(&splits.train)?;
    let dev_docs = model.prepare_all(&splits.dev)?;
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let outcome = train(&mut model, &train_docs, &dev_docs, &tcfg, jobs, on_epoch)?;
    let (_, set) = predict_set(&model, &dev_docs, jobs)?;
    let threshold = best_threshold(&set)?;
    Ok(TrainedRun {
        model,
        outcome,
        threshold,
    })
}

pub fn predict_set<S: Scalar>(
    model: &DocReModel<S>,
    docs: &[PreparedDocument],
    jobs: usize,
) -> Result<(Vec<DocumentScores>, PredictionSet)> {
    let scores = model.predict(docs, jobs)?;
    let set = PredictionSet::from_scores(&scores, docs, model.schema())?;
    Ok((scores, set))
}

/// Scores `which` at `threshold`, or at the dev-optimal threshold when `None`.
pub fn evaluate_split<S: Scalar>(
    model: &DocReModel<S>,
    splits: &Splits,
    which: Split,
    threshold: Option<f64>,
    jobs: usize,
) -> Result<EvalReport> {
    let threshold = match threshold {
        Some(t) => t,
        None => {
            let dev = model.prepare_all(&splits.dev)?;
            best_threshold(&predict_set(model, &dev, jobs)?.1)?
        }
    };
    let docs = model.prepare_all(splits.split(which))?;
    if docs.is_empty() {
        return Err(Error::Config(format!("{which:?} split is empty")));
    }
    let (_, set) = predict_set(model, &docs, jobs)?;
    let index = TrainFactIndex::from_documents(&splits.train);
    let freq = relation_frequencies(&splits.train, &splits.schema);
    evaluate(&set, threshold, &index, &freq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutput {
    pub split: Split,
    pub uncalibrated: CalibrationReport,
    pub calibrated: CalibrationReport,
}

/// Fits the configured calibrator on dev and reports calibration on `which`,
/// both before and after it is applied.
pub fn calibrate_run<S: Scalar>(
    model: &DocReModel<S>,
    splits: &Splits,
    cfg: &CalibrationConfig,
    which: Split,
    jobs: usize,
) -> Result<CalibrationOutput> {
    let dev_docs = model.prepare_all(&splits.dev)?;
    let (dev_scores, dev_set) = predict_set(model, &dev_docs, jobs)?;
    let threshold = best_threshold(&dev_set)?;
    let docs = model.prepare_all(splits.split(which))?;
    if docs.is_empty() {
        return Err(Error::Config(format!("{which:?} split is empty")));
    }
    let scores = model.predict(&docs, jobs)?;
    let include_na = model.config().head.include_na;
    let freq = class_frequencies(splits, include_na);
    let settings = |method| CalibrationSettings {
        method,
        bins: cfg.bins,
        population: cfg.population,
        threshold,
        top_group: cfg.top_group,
    };
    let (uncalibrated, _) = calibrate(&dev_scores, &scores, &freq, include_na, &settings(Method::None))?;
    let (calibrated, _) = calibrate(&dev_scores, &scores, &freq, include_na, &settings(cfg.method))?;
    Ok(CalibrationOutput {
        split: which,
        uncalibrated,
        calibrated,
    })
}
