use serde::{Deserialize, Serialize};

/// Reduce-on-plateau settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// A metric counts as improved only above `best + min_delta`.
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { initial_lr: 2e-4, factor: 0.2, patience: 5, min_lr: 1e-7, min_delta: 1e-6 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<(), String> {
        // Written positively so NaN fails every comparison.
        let ok = self.factor > 0.0 && self.factor < 1.0 && self.patience > 0 && self.initial_lr > 0.0;
        if !ok {
            return Err(format!("plateau needs 0 < factor < 1, patience ≥ 1 and a positive lr (got {self:?})"));
        }
        Ok(())
    }
}

/// Learning rate is `max(initial · factor^reductions, min_lr)`, recomputed
/// from the event count and rounded to 12 significant digits, so the
/// schedule lands on decimal values (2e-4 · 0.2² is 8e-6, not
/// 8.000000000000001e-6).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
    pub reductions: u32,
    pub lr: f64,
}

impl PlateauState {
    pub fn new(cfg: &PlateauConfig) -> Self {
        PlateauState { best: None, epochs_since_improvement: 0, reductions: 0, lr: cfg.initial_lr }
    }
}

fn round_sig(v: f64) -> f64 {
    format!("{v:.11e}").parse().expect("formatted float parses")
}

pub fn plateau_step(state: PlateauState, metric: f64, cfg: &PlateauConfig) -> PlateauState {
    let mut s = state;
    let improved = match s.best {
        None => true,
        Some(best) => metric > best + cfg.min_delta,
    };
    if improved {
        s.best = Some(metric);
        s.epochs_since_improvement = 0;
        return s;
    }
    s.epochs_since_improvement += 1;
    if s.epochs_since_improvement >= cfg.patience {
        s.epochs_since_improvement = 0;
        let next = round_sig(cfg.initial_lr * cfg.factor.powi(s.reductions as i32 + 1));
        if next >= cfg.min_lr {
            s.reductions += 1;
            s.lr = next;
        } else {
            s.lr = cfg.min_lr;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(metrics: &[f64], cfg: &PlateauConfig) -> Vec<PlateauState> {
        let mut s = PlateauState::new(cfg);
        metrics
            .iter()
            .map(|&m| {
                s = plateau_step(s, m, cfg);
                s
            })
            .collect()
    }

    #[test]
    fn five_flat_epochs_cut_lr() {
        let cfg = PlateauConfig::default();
        let states = run(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5], &cfg);
        assert_eq!(states[4].lr, 2e-4);
        assert_eq!(states[5].lr, 4e-5);
        assert_eq!(states[5].epochs_since_improvement, 0);
    }

    #[test]
    fn improvement_resets_counter() {
        let cfg = PlateauConfig::default();
        let states = run(&[0.5, 0.4, 0.4, 0.4, 0.6], &cfg);
        assert_eq!(states[4].epochs_since_improvement, 0);
        assert_eq!(states[4].lr, 2e-4);
        // Changes below min_delta do not count.
        let states = run(&[0.5, 0.5 + 1e-7], &cfg);
        assert_eq!(states[1].epochs_since_improvement, 1);
    }

    #[test]
    fn second_plateau_lands_on_decimal_value() {
        let states = run(&[0.5; 11], &PlateauConfig::default());
        assert_eq!(states[10].lr, 8e-6);
        assert_eq!(states[10].reductions, 2);
    }

    #[test]
    fn floor_holds() {
        let cfg = PlateauConfig { initial_lr: 1e-7, ..PlateauConfig::default() };
        let states = run(&[0.1; 11], &cfg);
        assert!(states.iter().all(|s| s.lr == 1e-7));
    }
}
