use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::SamplingMode;
use crate::model::ParamKind;

/// Which self-training term fills the `st` slot of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StVariant {
    /// Symmetric cross-entropy against an EMA teacher.
    #[default]
    TeacherStudent,
    /// Entropy of the student's own predictions; no teacher.
    EntropyMin,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    #[default]
    AllParams,
    NormOnly,
}

impl UpdateScope {
    pub fn trains(self, kind: ParamKind) -> bool {
        match self {
            UpdateScope::AllParams => true,
            UpdateScope::NormOnly => kind.is_norm(),
        }
    }
}

/// Network whose arrival-time predictions are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluator {
    #[default]
    Teacher,
    Student,
}

/// Switches for each component of the adaptation objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Parts {
    pub pce: bool,
    pub input_inject: bool,
    pub stat_bridge: bool,
    pub scl: bool,
    pub st: bool,
}

impl Default for Parts {
    fn default() -> Self {
        Parts::FULL
    }
}

impl Parts {
    pub const FULL: Parts = Parts {
        pce: true,
        input_inject: true,
        stat_bridge: true,
        scl: true,
        st: true,
    };

    pub const ST_ONLY: Parts = Parts {
        pce: false,
        input_inject: false,
        stat_bridge: false,
        scl: false,
        st: true,
    };

    pub fn any_loss(&self) -> bool {
        self.pce || self.scl || self.st
    }

    /// Whether a knowledge batch is drawn at all.
    pub fn uses_knowledge(&self) -> bool {
        self.pce || self.scl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub parts: Parts,
    pub st_variant: StVariant,
    /// `None` resolves to norm-only under entropy minimization and to all
    /// parameters otherwise.
    pub update_scope: Option<UpdateScope>,
    pub tau: f64,
    pub fourier_beta: f64,
    pub confidence_threshold: f64,
    pub evaluator: Evaluator,
    pub kb_sampling: SamplingMode,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_momentum: 0.9,
            batch_size: 50,
            parts: Parts::FULL,
            st_variant: StVariant::TeacherStudent,
            update_scope: None,
            tau: 1.0,
            fourier_beta: 1.0,
            confidence_threshold: 0.0,
            evaluator: Evaluator::Teacher,
            kb_sampling: SamplingMode::Uniform,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn scope(&self) -> UpdateScope {
        self.update_scope.unwrap_or(match self.st_variant {
            StVariant::TeacherStudent => UpdateScope::AllParams,
            StVariant::EntropyMin => UpdateScope::NormOnly,
        })
    }

    /// Copy with every defaulted choice made explicit.
    pub fn resolved(&self) -> AdaptConfig {
        AdaptConfig {
            update_scope: Some(self.scope()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam eps {} must be positive", self.adam_eps));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return fail(format!("ema momentum {} outside [0, 1]", self.ema_momentum));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !self.parts.any_loss() {
            return fail("at least one loss part must be enabled".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("temperature {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.fourier_beta) {
            return fail(format!("fourier beta {} outside [0, 1]", self.fourier_beta));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return fail(format!(
                "confidence threshold {} outside [0, 1]",
                self.confidence_threshold
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_resolve_scope() {
        let cfg = AdaptConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.scope(), UpdateScope::AllParams);
        let em = AdaptConfig {
            st_variant: StVariant::EntropyMin,
            ..AdaptConfig::default()
        };
        assert_eq!(em.resolved().update_scope, Some(UpdateScope::NormOnly));
        let forced = AdaptConfig {
            update_scope: Some(UpdateScope::AllParams),
            ..em
        };
        assert_eq!(forced.scope(), UpdateScope::AllParams);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            AdaptConfig {
                lr: -1.0,
                ..Default::default()
            },
            AdaptConfig {
                ema_momentum: 1.5,
                ..Default::default()
            },
            AdaptConfig {
                batch_size: 0,
                ..Default::default()
            },
            AdaptConfig {
                tau: 0.0,
                ..Default::default()
            },
            AdaptConfig {
                parts: Parts {
                    pce: false,
                    scl: false,
                    st: false,
                    ..Parts::FULL
                },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn scope_selects_norm_parameters() {
        assert!(UpdateScope::NormOnly.trains(ParamKind::NormScale));
        assert!(!UpdateScope::NormOnly.trains(ParamKind::Weight));
        assert!(UpdateScope::AllParams.trains(ParamKind::Bias));
    }

    #[test]
    fn json_round_trip_keeps_every_field() {
        let cfg = AdaptConfig {
            lr: 2e-4,
            seed: 9,
            ..Default::default()
        }
        .resolved();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<AdaptConfig>(&text).unwrap(), cfg);
    }
}
