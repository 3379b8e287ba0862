use serde::{Deserialize, Serialize};

/// Tolerance counter over successive validation scores: it grows when a score
/// is worse than the previous evaluation and resets when a score improves on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub max_tolerance: usize,
    pub counter: usize,
    pub previous: Option<f64>,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    /// The score is a new best; keep this checkpoint.
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopState {
    pub fn new(max_tolerance: usize) -> Self {
        Self {
            max_tolerance,
            counter: 0,
            previous: None,
            best: None,
            best_epoch: None,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if let Some(prev) = self.previous {
            if score < prev {
                self.counter = (self.counter + 1).min(self.max_tolerance);
            } else if score > prev {
                self.counter = 0;
            }
        }
        self.previous = Some(score);
        let new_best = self.best.is_none_or(|b| score > b);
        if new_best {
            self.best = Some(score);
            self.best_epoch = Some(epoch);
        }
        StopDecision {
            new_best,
            stop: self.counter >= self.max_tolerance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(scores: &[f64], tol: usize) -> (usize, EarlyStopState) {
        let mut s = EarlyStopState::new(tol);
        for (e, &f) in scores.iter().enumerate() {
            if s.observe(e, f).stop {
                return (e + 1, s);
            }
        }
        (scores.len(), s)
    }

    #[test]
    fn five_declines_stop() {
        let (epochs, s) = run(&[0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.9], 5);
        assert_eq!(epochs, 6);
        assert_eq!(s.best, Some(0.5));
        assert_eq!(s.best_epoch, Some(0));
    }

    #[test]
    fn improvement_resets_counter() {
        let (epochs, s) = run(&[0.5, 0.4, 0.3, 0.35, 0.2, 0.1, 0.05, 0.01], 5);
        assert_eq!(epochs, 8);
        assert_eq!(s.counter, 4);
    }

    #[test]
    fn equal_scores_leave_counter_alone() {
        let (_, s) = run(&[0.5, 0.4, 0.4, 0.4], 5);
        assert_eq!(s.counter, 1);
    }

    #[test]
    fn strictly_improving_runs_to_the_end() {
        let scores: Vec<f64> = (0..30).map(|k| k as f64 / 30.0).collect();
        let (epochs, s) = run(&scores, 5);
        assert_eq!(epochs, 30);
        assert_eq!(s.best_epoch, Some(29));
    }
}
