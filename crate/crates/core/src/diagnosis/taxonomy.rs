use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::DiagnosisError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureCategory {
    pub id: String,
    pub name: String,
    pub description: String,
    /// Channel-name prefixes this failure tends to show up on; used by the
    /// offline heuristic only.
    #[serde(default)]
    pub channel_hints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureTaxonomy {
    pub version: String,
    pub categories: Vec<FailureCategory>,
}

fn cat(id: &str, name: &str, description: &str, hints: &[&str]) -> FailureCategory {
    FailureCategory {
        id: id.into(),
        name: name.into(),
        description: description.into(),
        channel_hints: hints.iter().map(|h| h.to_string()).collect(),
    }
}

impl Default for FailureTaxonomy {
    /// Stand-in taxonomy: the eight synthetic fault kinds plus a handful of
    /// hardware and software classes.
    fn default() -> Self {
        Self {
            version: "rapt-default-1".into(),
            categories: vec![
                cat("sensor_freeze", "Sensor freeze", "A sensor channel stops updating and holds its last value.", &["pos_", "vel_"]),
                cat("sensor_bias", "Sensor bias", "A sensor channel reads with a constant offset.", &["pos_", "base_"]),
                cat("noise_burst", "Noise burst", "A sensor channel becomes much noisier than usual for a period.", &["vel_", "pos_"]),
                cat("dropout", "Signal dropout", "A channel reads zero because the signal was lost.", &["vel_", "base_"]),
                cat("time_delay", "Time delay", "A channel lags the rest of the system by several steps.", &["vel_", "pos_"]),
                cat("gain_change", "Gain change", "A channel is scaled by a wrong calibration gain.", &["pos_", "base_"]),
                cat("dynamics_shift", "Dynamics shift", "The whole motion runs at a different speed than commanded.", &["vel_"]),
                cat("impulse_push", "External push", "An external impulse disturbs the base and decays.", &["base_"]),
                cat("actuator_degradation", "Actuator degradation", "A joint actuator loses torque or overheats.", &["vel_", "pos_"]),
                cat("encoder_failure", "Encoder failure", "A joint encoder returns corrupted position readings.", &["pos_"]),
                cat("imu_fault", "IMU fault", "The inertial unit drifts or saturates.", &["base_"]),
                cat("communication_loss", "Communication loss", "Packets between controller and drivers are lost or reordered.", &["vel_", "pos_", "base_"]),
                cat("software_exception", "Software exception", "A control process crashed or restarted, producing discontinuities.", &[]),
            ],
        }
    }
}

impl FailureTaxonomy {
    pub fn validate(&self) -> Result<(), DiagnosisError> {
        if self.categories.is_empty() {
            return Err(DiagnosisError::EmptyTaxonomy);
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.id.trim().is_empty() || c.id.contains('|') || c.id.contains(char::is_whitespace) {
                return Err(DiagnosisError::InvalidTaxonomy(format!("bad category id {:?}", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(DiagnosisError::InvalidTaxonomy(format!("duplicate category id {:?}", c.id)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.categories.iter().any(|c| c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.id.as_str())
    }
}
