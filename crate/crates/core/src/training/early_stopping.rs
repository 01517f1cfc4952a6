/// Outcome of feeding one epoch's validation score to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self { patience, best: None, best_epoch: 0, since_improvement: 0 }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.since_improvement = 0;
            return Verdict::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}
