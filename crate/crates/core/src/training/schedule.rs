use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub cooldown: usize,
}

impl PlateauConfig {
    pub const PRETRAIN: PlateauConfig = PlateauConfig {
        factor: 0.6,
        patience: 25,
        cooldown: 20,
    };

    pub const FINETUNE: PlateauConfig = PlateauConfig {
        factor: 0.5,
        patience: 25,
        cooldown: 20,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid(format!("plateau factor must lie in (0, 1), got {}", self.factor)));
        }
        Ok(())
    }
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self::PRETRAIN
    }
}

/// Reduce-on-plateau state machine, minimizing the metric. A value is an
/// improvement only if strictly below the best seen. After more than
/// `patience` consecutive non-improving evaluations the multiplier is scaled
/// by `factor`; the following `cooldown` evaluations do not count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub config: PlateauConfig,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub cooldown_remaining: usize,
    pub multiplier: f64,
    pub reductions: usize,
}

impl Plateau {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            best: None,
            bad_epochs: 0,
            cooldown_remaining: 0,
            multiplier: 1.0,
            reductions: 0,
        })
    }

    /// Feeds one evaluation; returns whether the multiplier was reduced.
    /// A NaN metric counts as a bad evaluation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn step(&mut self, metric: f64) -> bool {
        match self.best {
            Some(best) if !(metric < best) => self.bad_epochs += 1,
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        if self.cooldown_remaining > 0 {
            self.cooldown_remaining -= 1;
            self.bad_epochs = 0;
        }
        if self.bad_epochs > self.config.patience {
            self.multiplier *= self.config.factor;
            self.reductions += 1;
            self.cooldown_remaining = self.config.cooldown;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Linear warmup of one or more parameter groups, ramped one after the
/// other from 0 to `base_lr`, followed by a shared plateau multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Warmup length of each group, in optimizer steps.
    pub warmup: Vec<u64>,
    pub plateau: Plateau,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup: Vec<u64>, plateau: PlateauConfig) -> Result<Self> {
        if warmup.is_empty() {
            return Err(Error::invalid("schedule needs at least one parameter group"));
        }
        Ok(Self {
            base_lr,
            warmup,
            plateau: Plateau::new(plateau)?,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.warmup.len()
    }

    /// Step at which every group has finished warming up.
    pub fn warmup_end(&self) -> u64 {
        self.warmup.iter().sum()
    }

    pub fn in_warmup(&self, step: u64) -> bool {
        step < self.warmup_end()
    }

    /// Learning rate of `group` for optimizer step `step` (1 for the first
    /// update). Group `g` ramps over `(start_g, start_g + warmup_g]` where
    /// `start_g` is the total warmup of the groups before it.
    pub fn lr_at(&self, step: u64, group: usize) -> f64 {
        let start: u64 = self.warmup[..group].iter().sum();
        let span = self.warmup[group];
        let ramp = if span == 0 {
            if step >= start {
                1.0
            } else {
                0.0
            }
        } else {
            (step.saturating_sub(start) as f64 / span as f64).min(1.0)
        };
        if self.in_warmup(step) {
            self.base_lr * ramp
        } else {
            self.base_lr * self.plateau.multiplier
        }
    }

    /// Feeds a validation metric to the plateau scheduler; ignored while
    /// any group is still warming up.
    pub fn observe(&mut self, step: u64, metric: f64) -> bool {
        if self.in_warmup(step) {
            return false;
        }
        self.plateau.step(metric)
    }
}
