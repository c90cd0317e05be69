//! One flat run configuration for the command line: model, scene, and
//! training knobs in a single JSON object, with strict key checking.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, MergeMode};
use crate::harness::{ModelVariant, TrainConfig};
use crate::pe::PeKind;
use crate::synth::SceneConfig;

/// Union of every module's knobs. Serialized keys match the per-module
/// configs exactly, so a fragment written for one of them parses here too;
/// unknown keys are rejected with the offending key named. Missing keys
/// fall back to the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    // Fusion model.
    pub d: usize,
    pub d_h: usize,
    #[serde(rename = "d_λ")]
    pub d_lambda: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub merge_mode: MergeMode,
    pub dropout_p: f64,
    pub pe: PeKind,
    #[serde(rename = "λ_init")]
    pub lambda_init: f64,
    // Scene generator.
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub a_obj: f64,
    pub a_bg: f64,
    pub sigma_cm: f64,
    pub sigma_ind: f64,
    pub rho: f64,
    /// Base seed: dataset identity for generation, and the default run seed
    /// where a subcommand takes one.
    pub seed: u64,
    // Training.
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub variant: ModelVariant,
}

impl Default for CliConfig {
    fn default() -> Self {
        let fusion = FusionConfig::default();
        let scene = SceneConfig::default();
        let train = TrainConfig::default();
        CliConfig {
            d: fusion.d,
            d_h: fusion.d_h,
            d_lambda: fusion.d_lambda,
            k: fusion.k,
            merge_mode: fusion.merge_mode,
            dropout_p: fusion.dropout_p,
            pe: fusion.pe,
            lambda_init: fusion.lambda_init,
            h: scene.h,
            w: scene.w,
            c: scene.c,
            n_objects_min: scene.n_objects_min,
            n_objects_max: scene.n_objects_max,
            a_obj: scene.a_obj,
            a_bg: scene.a_bg,
            sigma_cm: scene.sigma_cm,
            sigma_ind: scene.sigma_ind,
            rho: scene.rho,
            seed: scene.seed,
            epochs: train.epochs,
            lr: train.lr,
            batch: train.batch,
            n_train: train.n_train,
            n_test: train.n_test,
            variant: ModelVariant::Full,
        }
    }
}

impl CliConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            d: self.d,
            d_h: self.d_h,
            d_lambda: self.d_lambda,
            k: self.k,
            merge_mode: self.merge_mode,
            dropout_p: self.dropout_p,
            pe: self.pe,
            lambda_init: self.lambda_init,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            h: self.h,
            w: self.w,
            c: self.c,
            n_objects_min: self.n_objects_min,
            n_objects_max: self.n_objects_max,
            a_obj: self.a_obj,
            a_bg: self.a_bg,
            sigma_cm: self.sigma_cm,
            sigma_ind: self.sigma_ind,
            rho: self.rho,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            n_train: self.n_train,
            n_test: self.n_test,
        }
    }

    /// Checks every module's invariants plus the cross-module coupling:
    /// generated scenes feed the model directly, so channel count and model
    /// width must agree.
    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        self.scene().validate()?;
        self.train().validate()?;
        if self.c != self.d {
            return Err(Error::Config(format!(
                "c ({}) must equal d ({}): scene channels feed the model width directly",
                self.c, self.d
            )));
        }
        Ok(())
    }

    /// Parses a JSON config file. Syntax and unknown-key errors keep
    /// serde_json's line/column context, prefixed with the path.
    pub fn from_file(path: &Path) -> Result<CliConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
