//! `key = value` configuration files.
//!
//! UTF-8 text, one assignment per line, `#` starts a comment, blank lines are
//! ignored. Keys may repeat only where a consumer says so (e.g. `ellipse` in
//! phantom specs); [`RunConfig`] rejects unknown keys.

use std::str::FromStr;

use super::{DcKind, Variant};
use crate::error::{Error, Result};

/// One parsed assignment together with its 1-based line number.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_key_values(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_ascii_lowercase(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| Error::Config {
        line: e.line,
        msg: format!("bad value {:?} for `{}`", e.value, e.key),
    })
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            line: e.line,
            msg: format!("bad boolean {:?} for `{}`", e.value, e.key),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

/// How the semi-supervised SSIM hinge is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    /// `max(SSIM - beta, 0)^2`, exactly as written.
    Literal,
    /// `max((1 - SSIM) - beta, 0)^2`: penalise drifting away from the prior.
    DissimilarityHinge,
}

impl FromStr for Variant {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "sn" => Ok(Variant::Sn),
            "pcn" => Ok(Variant::Pcn),
            _ => Err(()),
        }
    }
}

impl FromStr for DcKind {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "gd" => Ok(DcKind::Gd),
            "pm" => Ok(DcKind::Pm),
            "vs" => Ok(DcKind::Vs),
            _ => Err(()),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(()),
        }
    }
}

impl FromStr for FinetuneMode {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(FinetuneMode::Literal),
            "dissimilarity-hinge" | "dissimilarity_hinge" => Ok(FinetuneMode::DissimilarityHinge),
            _ => Err(()),
        }
    }
}

/// Everything needed to build, train and finetune one unrolled model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub dc_kind: DcKind,
    /// Unroll depth T.
    pub steps: usize,
    pub shared_weights: bool,
    pub net_layers: usize,
    pub net_features: usize,
    pub n_maps: usize,
    pub dc_eta: f64,
    pub dc_lambda: f64,
    pub dc_trainable: bool,
    pub cg_max_iter: usize,
    pub cg_tol: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambda_l1: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Adversarial weight; parsed and carried, no adversarial training here.
    pub gamma: f64,
    pub finetune_mode: FinetuneMode,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// FE patch width for training; `None` trains on full slices.
    pub patch_fe: Option<usize>,
    pub acceleration: f64,
    pub acl: usize,
    pub fg_threshold: f64,
    pub stl_features: usize,
    pub stl_epochs: usize,
    pub stl_lr: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sn,
            dc_kind: DcKind::Gd,
            steps: 9,
            shared_weights: false,
            net_layers: 3,
            net_features: 16,
            n_maps: 2,
            dc_eta: 1.0,
            dc_lambda: 0.1,
            dc_trainable: false,
            cg_max_iter: 10,
            cg_tol: 1e-6,
            optimizer: OptimizerKind::RmsProp,
            lr: 1e-4,
            epochs: 50,
            lr_decay: 0.5,
            lr_decay_every: 15,
            lambda_l1: 1e-3,
            alpha: 1.0,
            beta: 0.008,
            gamma: 0.1,
            finetune_mode: FinetuneMode::DissimilarityHinge,
            finetune_epochs: 30,
            finetune_lr: 5e-5,
            patch_fe: Some(96),
            acceleration: 4.0,
            acl: 30,
            fg_threshold: 0.1,
            stl_features: 32,
            stl_epochs: 10,
            stl_lr: 5e-5,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_key_values(text)? {
            cfg.set(&e)?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn set(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "variant" => self.variant = parse_value(e)?,
            "dc_kind" => self.dc_kind = parse_value(e)?,
            "steps" => self.steps = parse_value(e)?,
            "shared_weights" => self.shared_weights = parse_bool(e)?,
            "net_layers" => self.net_layers = parse_value(e)?,
            "net_features" => self.net_features = parse_value(e)?,
            "n_maps" => self.n_maps = parse_value(e)?,
            "dc_eta" => self.dc_eta = parse_value(e)?,
            "dc_lambda" => self.dc_lambda = parse_value(e)?,
            "dc_trainable" => self.dc_trainable = parse_bool(e)?,
            "cg_max_iter" => self.cg_max_iter = parse_value(e)?,
            "cg_tol" => self.cg_tol = parse_value(e)?,
            "optimizer" => self.optimizer = parse_value(e)?,
            "lr" => self.lr = parse_value(e)?,
            "epochs" => self.epochs = parse_value(e)?,
            "lr_decay" => self.lr_decay = parse_value(e)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(e)?,
            "lambda_l1" => self.lambda_l1 = parse_value(e)?,
            "alpha" => self.alpha = parse_value(e)?,
            "beta" => self.beta = parse_value(e)?,
            "gamma" => self.gamma = parse_value(e)?,
            "finetune_mode" => self.finetune_mode = parse_value(e)?,
            "finetune_epochs" => self.finetune_epochs = parse_value(e)?,
            "finetune_lr" => self.finetune_lr = parse_value(e)?,
            "patch_fe" => {
                let v: usize = parse_value(e)?;
                self.patch_fe = (v > 0).then_some(v);
            }
            "acceleration" => self.acceleration = parse_value(e)?,
            "acl" => self.acl = parse_value(e)?,
            "fg_threshold" => self.fg_threshold = parse_value(e)?,
            "stl_features" => self.stl_features = parse_value(e)?,
            "stl_epochs" => self.stl_epochs = parse_value(e)?,
            "stl_lr" => self.stl_lr = parse_value(e)?,
            "seed" => self.seed = parse_value(e)?,
            other => {
                return Err(Error::Config {
                    line: e.line,
                    msg: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if self.steps < 1 {
            return bad("steps must be >= 1");
        }
        if !(self.lambda_l1 > 0.0) {
            return bad("lambda_l1 must be > 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.dc_eta > 0.0) || !(self.dc_lambda > 0.0) || !(self.cg_tol > 0.0) {
            return bad("dc_eta, dc_lambda and cg_tol must be > 0");
        }
        if !(1..=2).contains(&self.n_maps) {
            return bad("n_maps must be 1 or 2");
        }
        if self.net_layers < 1 {
            return bad("net_layers must be >= 1");
        }
        if !(self.lr >= 0.0) || !(self.finetune_lr >= 0.0) || !(self.stl_lr >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return bad("fg_threshold must lie in (0, 1)");
        }
        if !(self.acceleration >= 1.0) {
            return bad("acceleration must be >= 1");
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch` under the step-decay schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr, self.lr_decay, self.lr_decay_every, epoch)
    }
}

pub fn step_decay(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return lr0;
    }
    lr0 * decay.powi(((epoch.max(1) - 1) / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::parse(
            "# model\nvariant = pcn\ndc_kind = PM  # prox\nsteps=3\n\nlr = 1e-3\npatch_fe = 96\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Pcn);
        assert_eq!(cfg.dc_kind, DcKind::Pm);
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.patch_fe, Some(96));
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn rejects_unknown_key_and_bad_values() {
        assert!(matches!(RunConfig::parse("foo = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(RunConfig::parse("\nsteps = x"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(RunConfig::parse("steps = 0"), Err(Error::InvalidParams(_))));
        assert!(matches!(RunConfig::parse("beta = 1.0"), Err(Error::InvalidParams(_))));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Config { .. })));
    }

    #[test]
    fn default_schedule() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_at(1), 1e-4);
        assert_eq!(cfg.lr_at(15), 1e-4);
        assert_eq!(cfg.lr_at(16), 5e-5);
        assert_eq!(cfg.lr_at(30), 5e-5);
        assert_eq!(cfg.lr_at(31), 2.5e-5);
        assert_eq!(cfg.lr_at(45), 2.5e-5);
        assert_eq!(cfg.lr_at(46), 1.25e-5);
        assert_eq!(cfg.lr_at(50), 1.25e-5);
    }

    #[test]
    fn paper_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.steps, 9);
        assert_eq!(cfg.lambda_l1, 1e-3);
        assert_eq!((cfg.alpha, cfg.beta), (1.0, 0.008));
        assert_eq!((cfg.finetune_epochs, cfg.finetune_lr), (30, 5e-5));
        assert_eq!(cfg.epochs, 50);
    }
}
