//! Run configuration shared by every CLI subcommand. Outputs embed the
//! resolved configuration so a run can be repeated from its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::DaExperiment;
use crate::composer::ComposerConfig;
use crate::dataset::{read_json, DatasetKind};
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::pipelines::{
    build_classifier, build_detector, build_segmenter, BackendContext, BackendKind, BackendRef, Backends,
    PipelineConfig, Task,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<BackendRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<BackendRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<BackendRef>,
}

/// Inputs and sizes; command-line flags override these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Defaults to `field` for outdoor tasks and `instance` for indoor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<DatasetKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<PathBuf>,
    pub n_train: u64,
    pub n_eval: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            kind: None,
            predictions: None,
            pool: None,
            background: None,
            n_train: 21,
            n_eval: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDaOptions {
    /// Train with the domain discriminator; false gives detection-only training.
    pub adapt: bool,
    /// Held-out toy images exported per domain as a field dataset.
    pub export_images: usize,
}

impl Default for TrainDaOptions {
    fn default() -> Self {
        TrainDaOptions {
            adapt: true,
            export_images: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub backends: BackendsConfig,
    pub data: DataConfig,
    pub training: DaExperiment,
    pub train_da: TrainDaOptions,
    pub composer: ComposerConfig,
    pub pipeline: PipelineConfig,
    pub evaluation: EvalOptions,
    pub rng_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Outdoor,
            backends: BackendsConfig::default(),
            data: DataConfig::default(),
            training: DaExperiment::default(),
            train_da: TrainDaOptions::default(),
            composer: ComposerConfig::default(),
            pipeline: PipelineConfig::default(),
            evaluation: EvalOptions::default(),
            rng_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section; problems are collected into one itemized error.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut collect = |section: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Itemized(items)) => errors.extend(items.into_iter().map(|e| format!("{section}: {e}"))),
            Err(e) => errors.push(format!("{section}: {e}")),
        };
        collect("training", self.training.validate());
        collect("composer", self.composer.validate());
        for (slot, kind, r) in [
            ("detector", BackendKind::Detector, &self.backends.detector),
            ("segmenter", BackendKind::Segmenter, &self.backends.segmenter),
            ("classifier", BackendKind::Classifier, &self.backends.classifier),
        ] {
            if let Some(r) = r {
                let check = r.kind().and_then(|k| {
                    if k == kind {
                        Ok(())
                    } else {
                        Err(Error::invalid(format!("`{}` is a {k}", r.name)))
                    }
                });
                collect(&format!("backends.{slot}"), check);
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(errors))
        }
    }

    /// Checks that the task's backends are configured.
    pub fn check_task_backends(&self) -> Result<()> {
        let mut errors = Vec::new();
        let needed: &[(&str, bool)] = match self.task {
            Task::Outdoor => &[("detector", self.backends.detector.is_some())],
            Task::OutdoorSam => &[
                ("detector", self.backends.detector.is_some()),
                ("segmenter", self.backends.segmenter.is_some()),
            ],
            Task::Indoor => &[
                ("segmenter", self.backends.segmenter.is_some()),
                ("classifier", self.backends.classifier.is_some()),
            ],
        };
        for (slot, present) in needed {
            if !present {
                errors.push(format!("backends.{slot}: task {} needs one", self.task));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(errors))
        }
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        self.data.kind.unwrap_or(match self.task {
            Task::Indoor => DatasetKind::Instance,
            Task::Outdoor | Task::OutdoorSam => DatasetKind::Field,
        })
    }

    /// Instantiates the backends the task uses.
    pub fn build_backends(&self, ctx: &BackendContext) -> Result<Backends> {
        let b = &self.backends;
        let uses = |kind| {
            matches!(
                (self.task, kind),
                (Task::Outdoor, BackendKind::Detector)
                    | (Task::OutdoorSam, BackendKind::Detector | BackendKind::Segmenter)
                    | (Task::Indoor, BackendKind::Segmenter | BackendKind::Classifier)
            )
        };
        Ok(Backends {
            detector: match &b.detector {
                Some(r) if uses(BackendKind::Detector) => Some(build_detector(r, ctx)?),
                _ => None,
            },
            segmenter: match &b.segmenter {
                Some(r) if uses(BackendKind::Segmenter) => Some(build_segmenter(r, ctx)?),
                _ => None,
            },
            classifier: match &b.classifier {
                Some(r) if uses(BackendKind::Classifier) => Some(build_classifier(r, ctx)?),
                _ => None,
            },
        })
    }

    /// Backend names of the task joined by `+`.
    pub fn method_name(&self) -> String {
        let b = &self.backends;
        let parts: Vec<&Option<BackendRef>> = match self.task {
            Task::Outdoor => vec![&b.detector],
            Task::OutdoorSam => vec![&b.detector, &b.segmenter],
            Task::Indoor => vec![&b.segmenter, &b.classifier],
        };
        parts
            .into_iter()
            .flatten()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = RunConfig {
            task: Task::OutdoorSam,
            rng_seed: 0xDEAD_BEEF_1234_5678,
            ..RunConfig::default()
        };
        cfg.backends.detector = Some("dropout-oracle(0.1)".parse().unwrap());
        cfg.backends.segmenter = Some("fullmask-segmenter".parse().unwrap());
        cfg.training.sgd.lr_detector = 0.1 + 0.2;
        cfg.composer.rotation_deg = [1.0 / 3.0, 12.5];
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
        cfg.validate().unwrap();
        assert_eq!(cfg.method_name(), "dropout-oracle(0.1)+fullmask-segmenter");
    }

    #[test]
    fn unknown_backend_and_missing_roles_are_reported() {
        let err = serde_json::from_str::<RunConfig>(r#"{"backends": {"detector": "yolo"}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown backend `yolo`"), "{err}");
        let cfg: RunConfig = serde_json::from_str(r#"{"task": "indoor", "backends": {"segmenter": "oracle"}}"#).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("backends.segmenter") && err.contains("is a detector"), "{err}");
        let err = cfg.check_task_backends().unwrap_err().to_string();
        assert!(err.contains("backends.classifier"), "{err}");
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 3}"#).is_err());
    }
}
