//! Drift homotopy: `(1 - beta_l) b + beta_l f` bridging a data-aligned drift
//! `b` into the model drift `f`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Drift, DriftFn, Observation};

/// Number of levels plus an optional explicit `beta` sequence (linear `l / L` otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomotopyConfig {
    pub levels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
}

impl HomotopyConfig {
    pub fn linear(levels: usize) -> Self {
        Self { levels, betas: None }
    }

    pub fn betas(&self) -> Vec<f64> {
        match &self.betas {
            Some(b) => b.clone(),
            None => (0..=self.levels).map(|l| l as f64 / self.levels as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidConfig("homotopy.levels must be at least 1".into()));
        }
        if let Some(b) = &self.betas {
            if b.len() != self.levels + 1 {
                return Err(Error::InvalidConfig(format!(
                    "homotopy.betas must have levels + 1 = {} entries, got {}",
                    self.levels + 1,
                    b.len()
                )));
            }
        }
        validate_betas(&self.betas())
    }
}

fn validate_betas(betas: &[f64]) -> Result<()> {
    if betas.len() < 2 {
        return Err(Error::InvalidConfig("homotopy.betas needs at least two entries".into()));
    }
    if betas[0] != 0.0 {
        return Err(Error::InvalidConfig("homotopy.betas must start at 0".into()));
    }
    if betas[betas.len() - 1] != 1.0 {
        return Err(Error::InvalidConfig("homotopy.betas must end at 1".into()));
    }
    if betas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidConfig("homotopy.betas must be strictly increasing".into()));
    }
    Ok(())
}

/// A validated `beta` sequence with the intermediate drift for one step.
#[derive(Clone)]
pub struct HomotopySchedule {
    betas: Vec<f64>,
    intermediate: DriftFn,
}

impl std::fmt::Debug for HomotopySchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HomotopySchedule").field("betas", &self.betas).finish_non_exhaustive()
    }
}

impl HomotopySchedule {
    pub fn new(betas: Vec<f64>, intermediate: DriftFn) -> Result<Self> {
        validate_betas(&betas)?;
        Ok(Self { betas, intermediate })
    }

    pub fn linear(levels: usize, intermediate: DriftFn) -> Result<Self> {
        let cfg = HomotopyConfig::linear(levels);
        cfg.validate()?;
        Self::new(cfg.betas(), intermediate)
    }

    pub fn levels(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn intermediate(&self) -> &DriftFn {
        &self.intermediate
    }
}

struct Blend {
    b: DriftFn,
    f: DriftFn,
    beta: f64,
}

impl Drift for Blend {
    fn dim(&self) -> usize {
        self.f.dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let mut fb = smallvec::SmallVec::<[f64; 8]>::from_elem(0.0, out.len());
        self.b.eval_into(x, &mut fb);
        self.f.eval_into(x, out);
        for (o, bv) in out.iter_mut().zip(&fb) {
            *o = (1.0 - self.beta) * bv + self.beta * *o;
        }
    }
}

/// Drift of level `l`: `b` at `l = 0`, `f` at `l = L`, the blend in between.
pub fn homotopy_drift(schedule: &HomotopySchedule, f: &DriftFn, level: usize) -> Result<DriftFn> {
    let levels = schedule.levels();
    if level > levels {
        return Err(Error::LevelOutOfRange { level, levels });
    }
    check_dim(f.dim(), schedule.intermediate.dim())?;
    Ok(match level {
        0 => schedule.intermediate.clone(),
        l if l == levels => f.clone(),
        l => Arc::new(Blend { b: schedule.intermediate.clone(), f: f.clone(), beta: schedule.betas[l] }),
    })
}

/// `b(x) = (target - x) / dt`: one deterministic step lands on `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPull {
    pub target: Vec<f64>,
    pub dt: f64,
}

impl Drift for DataPull {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, t), xi) in out.iter_mut().zip(&self.target).zip(x) {
            *o = (t - xi) / self.dt;
        }
    }
}

/// Data-pull drift toward the pullback of `y` through `g`.
pub fn default_intermediate_drift(y: &[f64], g: &dyn Observation, dt: f64) -> Result<DriftFn> {
    check_dim(g.obs_dim(), y.len())?;
    let target = g.pullback(y).ok_or(Error::MissingPullback)?;
    check_dim(g.state_dim(), target.len())?;
    Ok(Arc::new(DataPull { target, dt }))
}

/// How the level-0 drift is chosen at each assimilation step.
#[derive(Clone, Default)]
pub enum IntermediateDrift {
    /// [`default_intermediate_drift`] rebuilt from each observation.
    #[default]
    DataPull,
    /// A fixed user drift.
    Custom(DriftFn),
}

impl std::fmt::Debug for IntermediateDrift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::DataPull => f.write_str("DataPull"),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl PartialEq for IntermediateDrift {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::DataPull, Self::DataPull) => true,
            (Self::Custom(a), Self::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl IntermediateDrift {
    pub fn build(&self, y: &[f64], g: &dyn Observation, dt: f64) -> Result<DriftFn> {
        match self {
            Self::DataPull => default_intermediate_drift(y, g, dt),
            Self::Custom(b) => Ok(b.clone()),
        }
    }
}
