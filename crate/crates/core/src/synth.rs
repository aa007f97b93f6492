//! Seeded synthetic demand with correlated region groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DatasetConfig, DemandSeries};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regions: usize,
    pub steps: usize,
    pub steps_per_day: usize,
    /// Demand channels; 2 models start and end demand.
    pub channels: usize,
    pub seed: u64,
    /// Regions per correlation group.
    pub group_size: usize,
    /// Mean count before modulation.
    pub base_level: f64,
    /// Height of the daily peak above the off-peak floor.
    pub peak_gain: f64,
    /// Off-peak share of the daily profile.
    pub off_peak: f64,
    /// Von Mises concentration of the daily peak; larger is narrower.
    pub peak_concentration: f64,
    /// Relative weekend dip shared by every region.
    pub weekend_dip: f64,
    /// AR(1) coefficient of each group's log-level.
    pub level_persistence: f64,
    /// Stationary standard deviation of each group's log-level.
    pub level_std: f64,
    /// Fraction of steps in the training split.
    pub train_fraction: f64,
}

impl SynthConfig {
    pub fn new(regions: usize, steps: usize, steps_per_day: usize, seed: u64) -> Self {
        Self {
            regions,
            steps,
            steps_per_day,
            channels: 2,
            seed,
            group_size: 5,
            base_level: 20.0,
            peak_gain: 2.0,
            off_peak: 0.4,
            peak_concentration: 3.0,
            weekend_dip: 0.1,
            level_persistence: 0.95,
            level_std: 0.3,
            train_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions < 2 {
            return Err(Error::Config(format!(
                "need at least 2 regions, got {}",
                self.regions
            )));
        }
        if self.steps_per_day < 2 || self.steps < 2 * self.steps_per_day {
            return Err(Error::Config(format!(
                "need steps >= 2 * steps_per_day >= 4, got steps={} steps_per_day={}",
                self.steps, self.steps_per_day
            )));
        }
        if self.channels == 0 || self.group_size == 0 {
            return Err(Error::Config(
                "channels and group_size must be positive".into(),
            ));
        }
        if self.groups() > self.steps_per_day {
            return Err(Error::Config(format!(
                "{} groups need distinct peak hours but a day has only {} steps",
                self.groups(),
                self.steps_per_day
            )));
        }
        if !(0.0..1.0).contains(&self.level_persistence) || self.level_std < 0.0 {
            return Err(Error::Config(
                "level persistence must lie in [0, 1), level std >= 0".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.regions.div_ceil(self.group_size)
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub demand: DemandSeries,
    pub calendar: DatasetConfig,
    /// Correlation group of each region.
    pub groups: Vec<usize>,
}

/// Generates counts `Poisson(base_r * level_g(t) * profile_g(t) * week(t))`.
///
/// Regions in group `g` share a daily profile with one rush-hour peak, the
/// groups' peaks spread evenly over the day, and a multiplicative AR(1)
/// log-level.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, t_len, s, d) = (cfg.regions, cfg.steps, cfg.steps_per_day, cfg.channels);
    let n_groups = cfg.groups();
    let groups: Vec<usize> = (0..n).map(|r| r % n_groups).collect();
    let scales: Vec<f64> = (0..n).map(|_| rng.gen_range(0.75..1.5)).collect();
    let innovation = Normal::new(
        0.0,
        cfg.level_std * (1.0 - cfg.level_persistence.powi(2)).sqrt(),
    )
    .map_err(|e| Error::Config(e.to_string()))?;
    let mut log_level: Vec<f64> = (0..n_groups)
        .map(|_| rng.gen_range(-cfg.level_std..cfg.level_std))
        .collect();
    let calendar = DatasetConfig {
        steps_per_day: s,
        weekday_of_step0: 0,
        holidays: vec![],
        train_end_step: ((t_len as f64) * cfg.train_fraction).round() as usize,
    };
    let two_pi = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(t_len * n * d);
    for t in 0..t_len {
        for z in log_level.iter_mut() {
            *z = cfg.level_persistence * *z + innovation.sample(&mut rng);
        }
        let week = if calendar.day_of_week(t) >= 5 {
            1.0 - cfg.weekend_dip
        } else {
            1.0
        };
        for r in 0..n {
            let g = groups[r];
            let center = (g * s) as f64 / n_groups as f64;
            for c in 0..d {
                // later channels trail the first by one step
                let tod = (t + s - c % s) % s;
                let angle = two_pi * (tod as f64 - center) / s as f64;
                let profile = cfg.off_peak
                    + cfg.peak_gain * (cfg.peak_concentration * (angle.cos() - 1.0)).exp();
                let mean = cfg.base_level
                    * scales[r]
                    * (1.0 - 0.2 * (c % 3) as f64)
                    * log_level[g].exp()
                    * profile
                    * week;
                let count = if mean > 0.0 {
                    Poisson::new(mean)
                        .map_err(|e| Error::Numerical(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                data.push(count);
            }
        }
    }
    let demand = DemandSeries::new(Tensor::new(vec![t_len, n, d], data)?)?;
    Ok(SynthDataset {
        demand,
        calendar,
        groups,
    })
}
