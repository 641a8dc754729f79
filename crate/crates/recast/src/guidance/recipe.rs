//! Per-attribute edit configuration: anchors, return step, grid sizes, loss
//! weights, epochs, precompute count and the learning-rate ramp. Serialized
//! as line-based `key=value` files.

use std::path::Path;

use crate::error::{Error, Result};

/// How the learning rate grows every `every` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RampMode {
    /// base * factor^(iteration / every)
    #[default]
    Multiplicative,
    /// base * (1 + (factor - 1) * (iteration / every))
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrRamp {
    pub base_lr: f64,
    pub factor: f64,
    pub every: usize,
    pub mode: RampMode,
}

impl Default for LrRamp {
    fn default() -> Self {
        LrRamp {
            base_lr: 4e-6,
            factor: 1.2,
            every: 50,
            mode: RampMode::Multiplicative,
        }
    }
}

impl LrRamp {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let stage = (iteration / self.every) as f64;
        match self.mode {
            RampMode::Multiplicative => self.base_lr * self.factor.powf(stage),
            RampMode::Additive => self.base_lr * (1.0 + (self.factor - 1.0) * stage),
        }
    }
}

/// Default ramp: base times 1.2 per 50 iterations (multiplicative).
pub fn lr_at(iteration: usize, base_lr: f64) -> f64 {
    LrRamp {
        base_lr,
        ..LrRamp::default()
    }
    .lr_at(iteration)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRecipe {
    pub y_ref: String,
    pub y_tar: String,
    pub t0: usize,
    pub s_for: usize,
    pub s_gen: usize,
    pub lambda_l1: f64,
    pub lambda_id: f64,
    /// fine-tuning epochs K
    pub epochs: usize,
    /// number of precomputed latents N
    pub precompute: usize,
    pub ramp: LrRamp,
}

impl EditRecipe {
    /// Defaults mirror the reference settings: t0 = 500, (S_for, S_gen) =
    /// (40, 6) for training, lambda_l1 = lambda_id = 0.3, K = 5, N = 50.
    pub fn new(y_ref: &str, y_tar: &str) -> Self {
        EditRecipe {
            y_ref: y_ref.to_string(),
            y_tar: y_tar.to_string(),
            t0: 500,
            s_for: 40,
            s_gen: 6,
            lambda_l1: 0.3,
            lambda_id: 0.3,
            epochs: 5,
            precompute: 50,
            ramp: LrRamp::default(),
        }
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.t0 < 1 || self.t0 > t_max {
            return Err(Error::Recipe(format!(
                "t0 = {} out of range 1..={}",
                self.t0, t_max
            )));
        }
        for (label, s) in [("s_for", self.s_for), ("s_gen", self.s_gen)] {
            if s < 2 || s > self.t0 + 1 {
                return Err(Error::Recipe(format!(
                    "{} = {} infeasible for t0 = {}",
                    label, s, self.t0
                )));
            }
        }
        if self.lambda_l1 < 0.0 || self.lambda_id < 0.0 {
            return Err(Error::Recipe("loss weights must be non-negative".into()));
        }
        if self.epochs < 1 || self.precompute < 1 {
            return Err(Error::Recipe("epochs and precompute must be at least 1".into()));
        }
        if self.ramp.base_lr <= 0.0 || self.ramp.factor < 1.0 || self.ramp.every == 0 {
            return Err(Error::Recipe("bad learning-rate ramp".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut y_ref = None;
        let mut y_tar = None;
        let mut recipe = EditRecipe::new("", "");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Recipe(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Recipe(format!("line {}: bad {}", lineno + 1, what));
            match key {
                "y_ref" => y_ref = Some(value.to_string()),
                "y_tar" => y_tar = Some(value.to_string()),
                "t0" => recipe.t0 = value.parse().map_err(|_| bad("t0"))?,
                "s_for" => recipe.s_for = value.parse().map_err(|_| bad("s_for"))?,
                "s_gen" => recipe.s_gen = value.parse().map_err(|_| bad("s_gen"))?,
                "lambda_l1" => recipe.lambda_l1 = value.parse().map_err(|_| bad("lambda_l1"))?,
                "lambda_id" => recipe.lambda_id = value.parse().map_err(|_| bad("lambda_id"))?,
                "k" => recipe.epochs = value.parse().map_err(|_| bad("k"))?,
                "n" => recipe.precompute = value.parse().map_err(|_| bad("n"))?,
                "base_lr" => recipe.ramp.base_lr = value.parse().map_err(|_| bad("base_lr"))?,
                "ramp_factor" => {
                    recipe.ramp.factor = value.parse().map_err(|_| bad("ramp_factor"))?
                }
                "ramp_every" => {
                    recipe.ramp.every = value.parse().map_err(|_| bad("ramp_every"))?
                }
                "ramp_mode" => {
                    recipe.ramp.mode = match value {
                        "multiplicative" => RampMode::Multiplicative,
                        "additive" => RampMode::Additive,
                        _ => return Err(bad("ramp_mode")),
                    }
                }
                other => return Err(Error::Recipe(format!("unknown key '{}'", other))),
            }
        }
        recipe.y_ref = y_ref.ok_or_else(|| Error::Recipe("missing y_ref".into()))?;
        recipe.y_tar = y_tar.ok_or_else(|| Error::Recipe("missing y_tar".into()))?;
        Ok(recipe)
    }

    pub fn to_text(&self) -> String {
        let mode = match self.ramp.mode {
            RampMode::Multiplicative => "multiplicative",
            RampMode::Additive => "additive",
        };
        format!(
            "y_ref={}\ny_tar={}\nt0={}\ns_for={}\ns_gen={}\nlambda_l1={}\nlambda_id={}\nk={}\nn={}\nbase_lr={}\nramp_factor={}\nramp_every={}\nramp_mode={}\n",
            self.y_ref,
            self.y_tar,
            self.t0,
            self.s_for,
            self.s_gen,
            self.lambda_l1,
            self.lambda_id,
            self.epochs,
            self.precompute,
            self.ramp.base_lr,
            self.ramp.factor,
            self.ramp.every,
            mode
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
