//! Prediction combination by weighted averaging with dynamic re-weighting.
//!
//! Three member models each contribute one prediction per sample; the
//! combined forecast is their convex combination. Weights start at fixed
//! values and are periodically refitted from recent validation errors: each
//! weight is made proportional to the inverse of its model's mean recent
//! MAPE, held at a floor so no member is ever eliminated entirely, and
//! renormalized onto the simplex. The floor-and-renormalize step repeats
//! until stable, since renormalizing can push a near-floor weight under.
//!
//! Weights only move during training; an exported bundle freezes them so
//! inference stays deterministic.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound any weight is held at during re-weighting.
pub const WEIGHT_FLOOR: f64 = 0.05;
/// Number of recent validation rounds that inform a re-weighting.
pub const PERFORMANCE_WINDOW_LEN: usize = 5;
/// Epochs between re-weightings during training.
pub const REWEIGHT_CADENCE: usize = 5;
/// Guard against dividing by a vanishing validation error.
const INV_ERROR_EPS: f64 = 1e-8;

/// Convex combination coefficients over the three member models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub w_vae: f64,
    pub w_transformer: f64,
    pub w_lstm: f64,
}

impl EnsembleWeights {
    pub fn new(w_vae: f64, w_transformer: f64, w_lstm: f64) -> Result<Self> {
        let w = EnsembleWeights { w_vae, w_transformer, w_lstm };
        w.validate()?;
        Ok(w)
    }

    /// Starting weights before any validation feedback exists.
    pub fn initial() -> Self {
        EnsembleWeights { w_vae: 0.3, w_transformer: 0.3, w_lstm: 0.4 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_vae, self.w_transformer, self.w_lstm]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadConfig {
                detail: format!("ensemble weights {w:?} contain a negative or non-finite entry"),
            });
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::BadConfig {
                detail: format!("ensemble weights {w:?} sum to {sum}, not 1"),
            });
        }
        Ok(())
    }
}

/// Element-wise weighted sum of the three member prediction series.
pub fn combine(
    vae: &[f64],
    transformer: &[f64],
    lstm: &[f64],
    weights: &EnsembleWeights,
) -> Result<Vec<f64>> {
    weights.validate()?;
    if vae.len() != transformer.len() || vae.len() != lstm.len() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            detail: format!(
                "prediction lengths {} / {} / {}",
                vae.len(),
                transformer.len(),
                lstm.len()
            ),
        });
    }
    Ok(vae
        .iter()
        .zip(transformer)
        .zip(lstm)
        .map(|((a, b), c)| weights.w_vae * a + weights.w_transformer * b + weights.w_lstm * c)
        .collect())
}

/// Rolling record of each model's recent validation MAPE, oldest evicted
/// first. One entry holds the three models' values for one evaluation round,
/// so the records stay aligned by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceWindow {
    entries: VecDeque<[f64; 3]>,
    capacity: usize,
}

impl PerformanceWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::BadConfig { detail: "performance window of capacity 0".into() });
        }
        Ok(PerformanceWindow { entries: VecDeque::with_capacity(capacity), capacity })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends one evaluation round's per-model MAPE values.
    pub fn record_validation(&mut self, per_model_mape: [f64; 3]) -> Result<()> {
        for m in per_model_mape {
            if !m.is_finite() {
                return Err(Error::NonFinite { context: "validation MAPE".into() });
            }
            if m < 0.0 {
                return Err(Error::NegativeMetric { context: format!("validation MAPE {m}") });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(per_model_mape);
        Ok(())
    }

    /// Per-model mean over the recorded rounds; `None` while empty.
    pub fn mean_mape(&self) -> Option<[f64; 3]> {
        if self.entries.is_empty() {
            return None;
        }
        let mut sums = [0.0; 3];
        for entry in &self.entries {
            for (s, v) in sums.iter_mut().zip(entry) {
                *s += v;
            }
        }
        Some(sums.map(|s| s / self.entries.len() as f64))
    }
}

/// Refits the weights from the window: wᵢ ∝ 1/(mean MAPEᵢ + ε), floored and
/// renormalized. Free weights are computed as `fraction · remaining_mass`,
/// which keeps a lone unfloored weight exact.
pub fn update_weights(window: &PerformanceWindow, floor: f64) -> Result<EnsembleWeights> {
    if !(0.0..=1.0 / 3.0).contains(&floor) {
        return Err(Error::BadConfig { detail: format!("weight floor {floor} outside [0, 1/3]") });
    }
    let means = window
        .mean_mape()
        .ok_or_else(|| Error::BadConfig { detail: "re-weighting from an empty window".into() })?;
    let raw = means.map(|m| 1.0 / (m + INV_ERROR_EPS));
    let mut w = [0.0; 3];
    let mut pinned = [false; 3];
    loop {
        let pinned_mass = pinned.iter().filter(|&&p| p).count() as f64 * floor;
        let free_raw: f64 =
            raw.iter().zip(&pinned).filter_map(|(r, &p)| (!p).then_some(*r)).sum();
        let remaining = 1.0 - pinned_mass;
        let mut changed = false;
        for i in 0..3 {
            if pinned[i] {
                w[i] = floor;
            } else {
                w[i] = raw[i] / free_raw * remaining;
                if w[i] < floor {
                    pinned[i] = true;
                    changed = true;
                }
            }
        }
        // The largest weight always stays above a floor ≤ 1/3, so at most
        // two entries ever pin and the loop runs at most three times.
        if !changed {
            break;
        }
    }
    EnsembleWeights::new(w[0], w[1], w[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_of(entries: &[[f64; 3]]) -> PerformanceWindow {
        let mut w = PerformanceWindow::new(PERFORMANCE_WINDOW_LEN).unwrap();
        for e in entries {
            w.record_validation(*e).unwrap();
        }
        w
    }

    #[test]
    fn initial_weights_are_the_fixed_starting_point() {
        let w = EnsembleWeights::initial();
        assert_eq!(w.as_array(), [0.3, 0.3, 0.4]);
        w.validate().unwrap();
        assert_eq!(EnsembleWeights::initial(), EnsembleWeights::initial());
    }

    #[test]
    fn weight_invariants_are_enforced() {
        assert!(EnsembleWeights::new(0.5, 0.5, 0.0).is_ok());
        assert!(EnsembleWeights::new(0.6, 0.5, -0.1).is_err());
        assert!(EnsembleWeights::new(0.5, 0.5, 0.1).is_err());
        assert!(EnsembleWeights::new(f64::NAN, 0.5, 0.5).is_err());
    }

    #[test]
    fn combine_hand_examples() {
        let w = EnsembleWeights::initial();
        // A shared value is a fixed point of any convex combination.
        assert_eq!(combine(&[10.0], &[10.0], &[10.0], &w).unwrap(), vec![10.0]);
        assert_eq!(combine(&[1.0], &[2.0], &[3.0], &w).unwrap(), vec![2.1]);
        let vertex = EnsembleWeights::new(1.0, 0.0, 0.0).unwrap();
        let vae = [0.5, -1.25, 3.75];
        assert_eq!(combine(&vae, &[9.0; 3], &[-9.0; 3], &vertex).unwrap(), vae.to_vec());
    }

    #[test]
    fn combine_rejects_length_mismatch() {
        let w = EnsembleWeights::initial();
        assert!(combine(&[1.0, 2.0], &[1.0], &[1.0, 2.0], &w).is_err());
    }

    #[test]
    fn combine_stays_within_member_envelope() {
        let w = EnsembleWeights::new(0.2, 0.35, 0.45).unwrap();
        let a = [1.0, -2.0, 0.3, 7.0];
        let b = [0.5, -1.0, 0.9, 6.0];
        let c = [2.0, -3.0, 0.1, 8.0];
        let out = combine(&a, &b, &c, &w).unwrap();
        for i in 0..a.len() {
            let lo = a[i].min(b[i]).min(c[i]);
            let hi = a[i].max(b[i]).max(c[i]);
            assert!(out[i] >= lo && out[i] <= hi);
        }
    }

    #[test]
    fn window_appends_and_evicts_oldest() {
        let mut w = PerformanceWindow::new(2).unwrap();
        w.record_validation([1.0, 1.0, 1.0]).unwrap();
        assert_eq!(w.len(), 1);
        w.record_validation([2.0, 2.0, 2.0]).unwrap();
        w.record_validation([4.0, 4.0, 4.0]).unwrap();
        assert_eq!(w.len(), 2);
        // Entry (1,1,1) is gone; means come from (2,2,2) and (4,4,4).
        assert_eq!(w.mean_mape().unwrap(), [3.0, 3.0, 3.0]);
    }

    #[test]
    fn window_rejects_invalid_mape() {
        let mut w = PerformanceWindow::new(3).unwrap();
        assert!(w.record_validation([-0.1, 1.0, 1.0]).is_err());
        assert!(w.record_validation([f64::NAN, 1.0, 1.0]).is_err());
        assert!(w.record_validation([f64::INFINITY, 1.0, 1.0]).is_err());
        assert!(w.is_empty());
    }

    #[test]
    fn update_weights_hand_examples() {
        // Equal errors: symmetry forces the uniform point.
        let w = update_weights(&window_of(&[[2.0, 2.0, 2.0]]), WEIGHT_FLOOR).unwrap();
        for v in w.as_array() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        // Inverse errors (1, 1, 2) normalize to (0.25, 0.25, 0.5); the
        // division guard shifts this by less than 1e-8 relative.
        let w = update_weights(&window_of(&[[1.0, 1.0, 0.5]]), WEIGHT_FLOOR).unwrap();
        let expect = [0.25, 0.25, 0.5];
        for (v, e) in w.as_array().iter().zip(expect) {
            assert!((v - e).abs() < 1e-7, "{v} vs {e}");
        }

        // A model 1000x better than the rest pushes both others onto the
        // floor; the survivor takes the remaining mass exactly.
        let w = update_weights(&window_of(&[[0.01, 10.0, 10.0]]), WEIGHT_FLOOR).unwrap();
        assert_eq!(w.w_transformer, WEIGHT_FLOOR);
        assert_eq!(w.w_lstm, WEIGHT_FLOOR);
        assert_eq!(w.w_vae, 1.0 - 2.0 * WEIGHT_FLOOR);
    }

    #[test]
    fn update_weights_averages_the_window() {
        // Means over rounds (2,4) are 3 per model: back to symmetry.
        let w = update_weights(
            &window_of(&[[2.0, 2.0, 2.0], [4.0, 4.0, 4.0]]),
            WEIGHT_FLOOR,
        )
        .unwrap();
        for v in w.as_array() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn update_weights_rejects_empty_window_and_bad_floor() {
        let empty = PerformanceWindow::new(5).unwrap();
        assert!(update_weights(&empty, WEIGHT_FLOOR).is_err());
        let w = window_of(&[[1.0, 1.0, 1.0]]);
        assert!(update_weights(&w, -0.01).is_err());
        assert!(update_weights(&w, 0.4).is_err());
    }

    #[test]
    fn renormalization_can_cascade_onto_the_floor() {
        // Inverse errors normalize to ~(0.0505, 0.9091, 0.0404): only the
        // third starts under the floor, but pinning it rescales the first
        // to ~0.049995, so a second pass must pin that one too.
        let w =
            update_weights(&window_of(&[[19.802, 1.1, 24.7525]]), WEIGHT_FLOOR).unwrap();
        assert_eq!(w.w_vae, WEIGHT_FLOOR);
        assert_eq!(w.w_lstm, WEIGHT_FLOOR);
        assert_eq!(w.w_transformer, 1.0 - 2.0 * WEIGHT_FLOOR);
    }
}
