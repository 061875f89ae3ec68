//! Theory against simulation, one row per (learner, α).

use drf_core::sim::Estimate;
use serde::{Deserialize, Serialize};

use crate::experiment::RunRecord;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub learner: String,
    pub alpha: f64,
    pub theory: f64,
    /// Spread of the per-run theory values (zero for the closed form).
    pub theory_stderr: f64,
    pub sim_mean: f64,
    pub sim_stderr: f64,
    pub n_seeds: usize,
    /// `(sim − theory)/√(se_sim² + se_theory²)`; absent when both errors vanish.
    pub z: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub z_threshold: f64,
    pub rows: Vec<ComparisonRow>,
    pub max_abs_z: f64,
    /// Over rows that have a z-score.
    pub fraction_within_3sigma: f64,
    /// Rows whose `|z|` exceeds the threshold.
    pub exceedances: usize,
    pub passed: bool,
}

impl ComparisonReport {
    /// Aggregates run records that carry paired theory values. Rows follow
    /// the order in which learners and α values first appear.
    pub fn from_records(name: &str, records: &[RunRecord], z_threshold: f64) -> Self {
        let mut keys: Vec<(String, u64)> = Vec::new();
        for r in records {
            let key = (r.learner.clone(), r.alpha.to_bits());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let rows: Vec<ComparisonRow> = keys
            .into_iter()
            .map(|(learner, bits)| {
                let group: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.learner == learner && r.alpha.to_bits() == bits)
                    .collect();
                let sim: Vec<f64> = group.iter().map(|r| r.test_error).collect();
                let th: Vec<f64> = group.iter().filter_map(|r| r.theory).collect();
                let sim = Estimate::from_samples(&sim);
                let th = Estimate::from_samples(&th);
                let se = (sim.stderr.powi(2) + th.stderr.powi(2)).sqrt();
                let z = (se > 0.0).then(|| (sim.mean - th.mean) / se);
                ComparisonRow {
                    learner,
                    alpha: f64::from_bits(bits),
                    theory: th.mean,
                    theory_stderr: th.stderr,
                    sim_mean: sim.mean,
                    sim_stderr: sim.stderr,
                    n_seeds: group.len(),
                    z,
                }
            })
            .collect();
        let zs: Vec<f64> = rows.iter().filter_map(|r| r.z.map(f64::abs)).collect();
        let max_abs_z = zs.iter().copied().fold(0.0, f64::max);
        let fraction_within_3sigma = if zs.is_empty() {
            0.0
        } else {
            zs.iter().filter(|z| **z <= 3.0).count() as f64 / zs.len() as f64
        };
        let exceedances = zs.iter().filter(|z| **z > z_threshold).count();
        ComparisonReport {
            name: name.into(),
            z_threshold,
            passed: !zs.is_empty() && exceedances == 0,
            rows,
            max_abs_z,
            fraction_within_3sigma,
            exceedances,
        }
    }

    /// Rows of one learner.
    pub fn learner_rows<'a>(&'a self, learner: &'a str) -> impl Iterator<Item = &'a ComparisonRow> {
        self.rows.iter().filter(move |r| r.learner == learner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(alpha: f64, seed_index: usize, test_error: f64, theory: f64) -> RunRecord {
        RunRecord {
            learner: "L1".into(),
            seed_index,
            seed: seed_index as u64,
            alpha,
            n: 1,
            n_test: 1,
            train_error: 0.0,
            test_error,
            test_stderr: 0.0,
            iterations: 1,
            final_residual: 0.0,
            theory: Some(theory),
        }
    }

    #[test]
    fn z_uses_the_combined_standard_error() {
        // sim values 1, 3: mean 2, se 1; theory 0.5, 1.5: mean 1, se 0.5.
        let recs = vec![record(1.0, 0, 1.0, 0.5), record(1.0, 1, 3.0, 1.5)];
        let rep = ComparisonReport::from_records("t", &recs, 3.0);
        let z = rep.rows[0].z.unwrap();
        assert!((z - 1.0 / 1.25f64.sqrt()).abs() < 1e-12);
        assert!(rep.passed);
    }

    #[test]
    fn no_z_without_spread() {
        let recs = vec![record(1.0, 0, 1.0, 0.5)];
        let rep = ComparisonReport::from_records("t", &recs, 3.0);
        assert!(rep.rows[0].z.is_none());
        assert!(!rep.passed);
    }

    #[test]
    fn any_exceedance_fails_the_report() {
        let mut recs = Vec::new();
        for s in 0..4 {
            recs.push(record(1.0, s, 1.0 + 0.01 * s as f64, 1.0));
            recs.push(record(2.0, s, 5.0 + 0.01 * s as f64, 1.0));
        }
        let rep = ComparisonReport::from_records("t", &recs, 3.0);
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.exceedances, 1);
        assert!(!rep.passed);
        assert!((rep.fraction_within_3sigma - 0.5).abs() < 1e-12);
    }
}
