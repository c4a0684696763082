use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub base_lr: f64,
    /// lr is divided by this on a plateau; must exceed 1.
    pub factor: f64,
    pub patience: usize,
    /// Minimum increase of the monitored metric that counts as improvement.
    pub delta: f64,
    pub floor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { base_lr: 1e-3, factor: 2.0, patience: 5, delta: 1e-4, floor: 1e-6 }
    }
}

/// Reduce-on-plateau for a metric that should go up.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    converged: bool,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self { config, lr: config.base_lr, best: None, bad_epochs: 0, converged: false }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Set once a reduction would take lr below the floor.
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Records one epoch's metric and returns the lr for the next epoch.
    /// A non-finite metric counts as no improvement.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = metric.is_finite() && self.best.is_none_or(|b| metric > b + self.config.delta);
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return self.lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.config.patience {
            self.bad_epochs = 0;
            let next = self.lr / self.config.factor;
            if next < self.config.floor {
                self.converged = true;
            } else {
                self.lr = next;
            }
        }
        self.lr
    }
}
