//! The end-to-end run: load splits, train, publish, attack, evaluate. The
//! command-line verbs are thin wrappers over these functions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::{Phase, Trainer};
use crate::config::{RunConfig, Source};
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::idx::load_idx;
use crate::data::imbalance::imbalance_downsample;
use crate::data::manifest::PublishedDataset;
use crate::data::synth::{toy_images, ToySpec};
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    curvature_vulnerability_report, mia_attack, train_downstream, utility_report, MiaReport, UtilityReport,
    VulnerabilityReport,
};
use crate::obfuscator::publish;

pub const CHECKPOINT_FILE: &str = "checkpoint.mprs";
pub const PHASE_LOG_FILE: &str = "phase_log.csv";
pub const PUBLISHED_DIR: &str = "published";

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}

/// Training and test splits, with the configured imbalance applied to both.
pub fn load_splits(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        Source::Toy => {
            let test_spec = ToySpec {
                per_class: d.toy_test_per_class,
                ..d.toy
            };
            (
                toy_images(&d.toy, Split::Train, cfg.seed)?.0,
                toy_images(&test_spec, Split::Test, cfg.seed)?.0,
            )
        }
        Source::Idx => {
            let need = |p: &Option<PathBuf>, what: &str| {
                p.clone().ok_or_else(|| Error::Config(format!("data.{what} is not set")))
            };
            let existing = |p: PathBuf| if p.exists() { Ok(p) } else { Err(Error::MissingArtifact(p)) };
            let train = load_idx(
                &existing(need(&d.train_images, "train_images")?)?,
                &existing(need(&d.train_labels, "train_labels")?)?,
                Split::Train,
            )?;
            let test = load_idx(
                &existing(need(&d.test_images, "test_images")?)?,
                &existing(need(&d.test_labels, "test_labels")?)?,
                Split::Test,
            )?;
            (train, test)
        }
    };
    if d.tail.is_empty() || d.fraction == 1.0 {
        return Ok((train, test));
    }
    let shrink = |ds: &LabeledDataset, salt: u64| {
        imbalance_downsample(ds, &d.tail, d.fraction, cfg.seed ^ salt).map_err(|e| Error::Data(e.to_string()))
    };
    Ok((shrink(&train, 0)?, shrink(&test, 1)?))
}

/// Train from scratch, or continue from `out/checkpoint.mprs` when `resume`
/// is set. Every epoch is checkpointed; the phase log is rewritten at the end.
pub fn train(cfg: &RunConfig, data: &LabeledDataset, out: &Path, resume: bool) -> Result<Trainer> {
    train_until(cfg, data, out, resume, None)
}

pub fn train_until(
    cfg: &RunConfig,
    data: &LabeledDataset,
    out: &Path,
    resume: bool,
    stop: Option<(Phase, usize)>,
) -> Result<Trainer> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = checkpoint_path(out);
    let mut trainer = if resume {
        let mut t = Trainer::from_checkpoint(&load_checkpoint(&ckpt)?)?;
        if t.model.data_dim() != data.pixels() {
            return Err(Error::Data(format!(
                "checkpoint expects {} pixels, data has {}",
                t.model.data_dim(),
                data.pixels()
            )));
        }
        // Epoch counts may grow on resume; everything else must match.
        let mut want = cfg.train.clone();
        want.epochs_mu = t.cfg.epochs_mu;
        want.epochs_sigma = t.cfg.epochs_sigma;
        want.epochs_bilevel = t.cfg.epochs_bilevel;
        want.estimator.epochs = t.cfg.estimator.epochs;
        if want != t.cfg {
            return Err(Error::Config("resume config differs from the checkpoint's".into()));
        }
        t.reconfigure(cfg.train.clone())?;
        t
    } else {
        Trainer::new(cfg.train.clone(), &cfg.rvae, data.pixels())?
    };
    trainer.run(&data.images, stop, Some(CHECKPOINT_FILE), |t| save_checkpoint(&ckpt, &t.to_checkpoint()?))?;
    let log = out.join(PHASE_LOG_FILE);
    std::fs::write(&log, trainer.log.to_csv()).map_err(|e| Error::io(&log, e))?;
    Ok(trainer)
}

pub fn load_trainer(out: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(&load_checkpoint(&checkpoint_path(out))?)
}

pub fn publish_with(trainer: &Trainer, data: &LabeledDataset) -> Result<PublishedDataset> {
    publish(&trainer.model, &trainer.estimator, data, &trainer.cfg.geodesic)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    /// Classifier trained on the original training split.
    pub original: MiaReport,
    pub original_test_accuracy: f64,
    /// Classifier trained on the published set, attacked with the original
    /// training samples as members.
    pub published: MiaReport,
    pub published_test_accuracy: f64,
    /// Curvature proxy of the original members against the original
    /// classifier's vulnerability verdicts.
    pub vulnerability: VulnerabilityReport,
}

pub fn attack(cfg: &RunConfig, train: &LabeledDataset, test: &LabeledDataset, published: &LabeledDataset) -> Result<AttackSummary> {
    let mut ccfg = cfg.classifier.clone();
    ccfg.classes.get_or_insert(train.num_classes().max(test.num_classes()));
    let (orig_clf, _) = train_downstream(train, &ccfg)?;
    let (pub_clf, _) = train_downstream(published, &ccfg)?;
    let original = mia_attack(&orig_clf, train, test, &cfg.attack)?;
    let published_report = mia_attack(&pub_clf, train, test, &cfg.attack)?;
    let vulnerability = curvature_vulnerability_report(
        &train.images,
        &original.member_flags,
        cfg.eval.neighbors.min(train.len()),
        cfg.eval.intrinsic_dim,
    )?;
    Ok(AttackSummary {
        original_test_accuracy: orig_clf.accuracy(test)?,
        published_test_accuracy: pub_clf.accuracy(test)?,
        original,
        published: published_report,
        vulnerability,
    })
}

pub fn evaluate(cfg: &RunConfig, train: &LabeledDataset, test: &LabeledDataset, published: &LabeledDataset) -> Result<UtilityReport> {
    let mut ccfg = cfg.classifier.clone();
    ccfg.classes.get_or_insert(train.num_classes().max(test.num_classes()));
    let (extractor, _) = train_downstream(train, &ccfg)?;
    let (downstream, _) = train_downstream(published, &ccfg)?;
    utility_report(&downstream, &extractor, train, published, test)
}
