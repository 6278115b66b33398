use std::fmt;
use std::str::FromStr;

use crate::error::GlotError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    /// Decay after `patience` consecutive evaluations without improvement.
    Plateau,
    /// Exactly `n` decays at evenly spaced epochs.
    FixedDecays(usize),
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Constant => f.write_str("constant"),
            ScheduleKind::Plateau => f.write_str("plateau"),
            ScheduleKind::FixedDecays(n) => write!(f, "decays{n}"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = GlotError;
    fn from_str(s: &str) -> Result<Self, GlotError> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "plateau" => Ok(ScheduleKind::Plateau),
            _ => s
                .strip_prefix("decays")
                .and_then(|n| n.parse().ok())
                .map(ScheduleKind::FixedDecays)
                .ok_or_else(|| GlotError::Config(format!("unknown schedule {s:?} (constant|plateau|decaysN)"))),
        }
    }
}

/// Learning-rate state, stepped once per validation.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    kind: ScheduleKind,
    lr: f64,
    factor: f64,
    floor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
    interval: usize,
    evaluations: usize,
    decays: usize,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, lr: f64, factor: f64, floor: f64, patience: usize, epochs: usize) -> Self {
        let interval = match kind {
            ScheduleKind::FixedDecays(n) => (epochs / (n + 1)).max(1),
            _ => 0,
        };
        LrSchedule { kind, lr, factor, floor, patience, best: None, stale: 0, interval, evaluations: 0, decays: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    fn decay(&mut self) {
        self.lr = (self.lr * self.factor).max(self.floor);
        self.decays += 1;
    }

    /// Feeds one validation score and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        self.evaluations += 1;
        match self.kind {
            ScheduleKind::Constant => {}
            ScheduleKind::Plateau => {
                if self.best.is_none_or(|b| metric > b) {
                    self.best = Some(metric);
                    self.stale = 0;
                } else {
                    self.stale += 1;
                    if self.stale >= self.patience {
                        self.decay();
                        self.stale = 0;
                    }
                }
            }
            ScheduleKind::FixedDecays(n) => {
                if self.decays < n && self.evaluations.is_multiple_of(self.interval) {
                    self.decay();
                }
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn plateau() -> LrSchedule {
        LrSchedule::new(ScheduleKind::Plateau, 5e-5, 0.5, 2e-6, 3, 30)
    }

    #[test]
    fn three_stale_evaluations_halve() {
        let mut s = plateau();
        s.step(0.2);
        assert_eq!(s.step(0.2), 5e-5);
        assert_eq!(s.step(0.1), 5e-5);
        assert_eq!(s.step(0.2), 2.5e-5);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = plateau();
        s.step(0.1);
        s.step(0.1);
        s.step(0.1);
        assert_eq!(s.step(0.3), 5e-5);
        s.step(0.3);
        assert_eq!(s.step(0.3), 5e-5);
    }

    #[test]
    fn floor_clamps_decay_sequence() {
        let mut s = plateau();
        let mut seen = Vec::new();
        for _ in 0..40 {
            seen.push(s.step(0.0));
        }
        let mut distinct = seen.clone();
        distinct.dedup();
        assert_eq!(distinct, [5e-5, 2.5e-5, 1.25e-5, 6.25e-6, 3.125e-6, 2e-6]);
    }

    #[test]
    fn fixed_decays_stop_after_n() {
        let mut s = LrSchedule::new(ScheduleKind::FixedDecays(3), 5e-5, 0.5, 2e-6, 3, 30);
        let lrs: Vec<f64> = (0..30).map(|i| s.step(i as f64)).collect();
        assert_eq!(s.decays(), 3);
        assert_eq!(lrs[5], 5e-5);
        assert_eq!(lrs[6], 2.5e-5);
        assert_eq!(*lrs.last().unwrap(), 6.25e-6);
    }

    #[test]
    fn constant_never_moves() {
        let mut s = LrSchedule::new(ScheduleKind::Constant, 1e-3, 0.5, 2e-6, 3, 30);
        assert!((0..50).all(|_| s.step(0.0) == 1e-3));
    }

    #[test]
    fn kind_round_trip() {
        for k in [ScheduleKind::Constant, ScheduleKind::Plateau, ScheduleKind::FixedDecays(3)] {
            assert_eq!(k.to_string().parse::<ScheduleKind>().unwrap(), k);
        }
    }

    proptest! {
        #[test]
        fn plateau_is_monotone_and_floored(metrics in prop::collection::vec(0.0f64..1.0, 1..80)) {
            let mut s = plateau();
            let mut prev = s.lr();
            for m in metrics {
                let lr = s.step(m);
                prop_assert!(lr <= prev && lr >= 2e-6);
                prev = lr;
            }
        }
    }
}
