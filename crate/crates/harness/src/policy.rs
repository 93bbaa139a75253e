//! Deferred-evaluation checkpoint bookkeeping.

use std::fmt;
use std::path::PathBuf;

use crate::schedule::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckpointKind {
    BestRv,
    BestFaz,
    BestAvg,
    Periodic,
}

impl CheckpointKind {
    pub const BEST: [CheckpointKind; 3] = [Self::BestRv, Self::BestFaz, Self::BestAvg];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BestRv => "best_rv",
            Self::BestFaz => "best_faz",
            Self::BestAvg => "best_avg",
            Self::Periodic => "periodic",
        }
    }

    fn score(self, rv: f64, faz: f64) -> f64 {
        match self {
            Self::BestRv => rv,
            Self::BestFaz => faz,
            Self::BestAvg | Self::Periodic => (rv + faz) / 2.0,
        }
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub kind: CheckpointKind,
    pub epoch: usize,
    pub rv_dice: f64,
    pub faz_dice: f64,
    pub path: Option<PathBuf>,
}

/// Tracks the live best records and the periodic ones. Epochs are 0-based.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    eval_start: usize,
    every: usize,
    best: [Option<CheckpointRecord>; 3],
    periodic: Vec<CheckpointRecord>,
    evaluated: Vec<usize>,
}

impl CheckpointPolicy {
    pub fn new(tc: &TrainConfig) -> Self {
        Self {
            eval_start: tc.eval_start_epoch(),
            every: tc.periodic_ckpt_every,
            best: [None, None, None],
            periodic: Vec::new(),
            evaluated: Vec::new(),
        }
    }

    pub fn eval_start(&self) -> usize {
        self.eval_start
    }

    pub fn should_evaluate(&self, epoch: usize) -> bool {
        epoch >= self.eval_start
    }

    /// Records an evaluation and returns the kinds whose file must be
    /// (re)written. Best kinds change only on strict improvement, so ties
    /// keep the earlier epoch.
    pub fn observe(&mut self, epoch: usize, rv_dice: f64, faz_dice: f64) -> Vec<CheckpointKind> {
        assert!(self.should_evaluate(epoch), "epoch {epoch} precedes the evaluation phase");
        self.evaluated.push(epoch);
        let mut changed = Vec::new();
        for (slot, kind) in self.best.iter_mut().zip(CheckpointKind::BEST) {
            let score = kind.score(rv_dice, faz_dice);
            let better = match slot {
                None => true,
                Some(r) => score > kind.score(r.rv_dice, r.faz_dice),
            };
            if better {
                *slot = Some(CheckpointRecord {
                    kind,
                    epoch,
                    rv_dice,
                    faz_dice,
                    path: None,
                });
                changed.push(kind);
            }
        }
        if (epoch - self.eval_start + 1) % self.every == 0 {
            self.periodic.push(CheckpointRecord {
                kind: CheckpointKind::Periodic,
                epoch,
                rv_dice,
                faz_dice,
                path: None,
            });
            changed.push(CheckpointKind::Periodic);
        }
        changed
    }

    /// Attaches a file path to the newest record of `kind`.
    pub fn set_path(&mut self, kind: CheckpointKind, path: PathBuf) {
        let record = match kind {
            CheckpointKind::Periodic => self.periodic.last_mut(),
            k => self.best[CheckpointKind::BEST.iter().position(|b| *b == k).unwrap()].as_mut(),
        };
        if let Some(r) = record {
            r.path = Some(path);
        }
    }

    pub fn best(&self, kind: CheckpointKind) -> Option<&CheckpointRecord> {
        CheckpointKind::BEST
            .iter()
            .position(|b| *b == kind)
            .and_then(|i| self.best[i].as_ref())
    }

    pub fn evaluated_epochs(&self) -> &[usize] {
        &self.evaluated
    }

    /// Live best records followed by the periodic ones.
    pub fn records(&self) -> Vec<CheckpointRecord> {
        self.best
            .iter()
            .flatten()
            .cloned()
            .chain(self.periodic.iter().cloned())
            .collect()
    }
}
