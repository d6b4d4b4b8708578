/// Outcome of feeding one epoch's validation accuracy to [`Plateau`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrDecision {
    Keep,
    /// Learning rate was divided by the decay factor; carries the new value.
    Decay(f64),
    /// The decayed rate fell below the floor.
    Stop,
}

/// Divides the learning rate by 10 after `patience` consecutive epochs in
/// which the best validation accuracy did not rise by `threshold` points.
/// The first observation counts as one such epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub patience: usize,
    pub threshold: f64,
    pub floor: f64,
    best: Option<f64>,
    stale: usize,
}

pub const DECAY: f64 = 10.0;

impl Plateau {
    pub fn new(lr: f64, patience: usize, threshold: f64, floor: f64) -> Self {
        Plateau { lr, patience, threshold, floor, best: None, stale: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn stale(&self) -> usize {
        self.stale
    }

    pub(crate) fn with_state(mut self, best: Option<f64>, stale: usize) -> Self {
        self.best = best;
        self.stale = stale;
        self
    }

    /// `accuracy` is in percent.
    pub fn update(&mut self, accuracy: f64) -> LrDecision {
        match self.best {
            Some(best) if accuracy >= best + self.threshold - 1e-9 => {
                self.best = Some(accuracy);
                self.stale = 0;
            }
            Some(best) => {
                self.best = Some(best.max(accuracy));
                self.stale += 1;
            }
            None => {
                self.best = Some(accuracy);
                self.stale = 1;
            }
        }
        if self.stale < self.patience {
            return LrDecision::Keep;
        }
        self.stale = 0;
        let next = self.lr / DECAY;
        if next < self.floor * (1.0 - 1e-6) {
            return LrDecision::Stop;
        }
        self.lr = next;
        LrDecision::Decay(next)
    }
}

/// Replays a whole accuracy history; `None` means training stopped.
pub fn lr_after(history: &[f64], mut plateau: Plateau) -> Option<f64> {
    for &acc in history {
        if plateau.update(acc) == LrDecision::Stop {
            return None;
        }
    }
    Some(plateau.lr)
}
