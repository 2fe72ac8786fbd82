//! Scenario files: every knob of a simulation run, JSON-serializable and
//! validated by one shared validator used by both `run` and `validate`.

use crate::mac::ChannelModel;
use crate::rate_control::ExcessMode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid scenario: {}", problems.join("; "))]
pub struct ScenarioError {
    pub problems: Vec<String>,
}

/// Which congestion-control behavior the nodes run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// full prioritized hop-by-hop rate adjustment
    #[default]
    Phtccp,
    /// baseline: child rate = parent service rate / child count, no idle
    /// capacity redistribution
    CcfLite,
    /// baseline: fixed originating rates, no rate control
    None,
}

/// Idle window configuration: a fraction of non-source relay nodes sleeps
/// during `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleWindow {
    pub fraction: f64,
    pub start: f64,
    pub end: f64,
}

fn default_n_nodes() -> usize {
    100
}
fn default_field() -> (f64, f64) {
    (100.0, 100.0)
}
fn default_tx_range() -> f64 {
    30.0
}
fn default_bit_rate() -> f64 {
    32_000.0
}
fn default_data_len() -> u32 {
    33
}
fn default_control_len() -> u32 {
    3
}
fn default_w_s() -> f64 {
    0.1
}
fn default_class_weights() -> Vec<u32> {
    vec![3, 2, 1]
}
fn default_queue_capacity() -> usize {
    10
}
fn default_n_sources() -> usize {
    10
}
fn default_r_or_init() -> f64 {
    4.0
}
fn default_r_or_max() -> f64 {
    16.0
}
fn default_mu() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.75
}
fn default_r_sch_init() -> f64 {
    4.0
}
fn default_duration() -> f64 {
    60.0
}
fn default_slot_time() -> f64 {
    1e-3
}
fn default_sifs() -> f64 {
    0.5e-3
}
fn default_retry_limit() -> u32 {
    5
}
fn default_freshness_window() -> f64 {
    2.0
}
fn default_beacon_interval() -> f64 {
    1.0
}
fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_n_nodes")]
    pub n_nodes: usize,
    #[serde(default = "default_field")]
    pub field: (f64, f64),
    #[serde(default = "default_tx_range")]
    pub tx_range: f64,
    #[serde(default = "default_bit_rate")]
    pub bit_rate: f64,
    #[serde(default = "default_data_len")]
    pub data_len: u32,
    #[serde(default = "default_control_len")]
    pub control_len: u32,
    #[serde(default = "default_w_s")]
    pub w_s: f64,
    /// inter-queue priorities, one per traffic class, highest first
    #[serde(default = "default_class_weights")]
    pub class_weights: Vec<u32>,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    /// explicit source node ids; when empty, the `n_sources` deepest nodes
    /// are used
    #[serde(default)]
    pub source_ids: Vec<u32>,
    #[serde(default = "default_n_sources")]
    pub n_sources: usize,
    #[serde(default = "default_r_or_init")]
    pub r_or_init: f64,
    #[serde(default = "default_r_or_max")]
    pub r_or_max: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_r_sch_init")]
    pub r_sch_init: f64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub mode: ProtocolMode,
    #[serde(default)]
    pub excess_mode: ExcessMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub idle_window: Option<IdleWindow>,
    /// when set, every node pins its scheduling rate to r_s / target
    /// instead of running the adjustment algorithm
    #[serde(default)]
    pub pinned_ratio: Option<f64>,
    /// exponential instead of fixed packet inter-arrival times
    #[serde(default)]
    pub poisson_traffic: bool,
    #[serde(default = "default_slot_time")]
    pub slot_time: f64,
    #[serde(default = "default_sifs")]
    pub sifs: f64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    /// overheard notifications older than this are discarded
    #[serde(default = "default_freshness_window")]
    pub freshness_window: f64,
    /// a child unheard for this long is counted idle by its parent;
    /// when unset, twice the child's last known packet interval
    #[serde(default)]
    pub activity_timeout: Option<f64>,
    /// scheduling rate the sink advertises to its children; when unset,
    /// the nominal channel capacity in data packets per second
    #[serde(default)]
    pub sink_sch_rate: Option<f64>,
    #[serde(default = "default_beacon_interval")]
    pub beacon_interval: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are valid")
    }
}

impl Scenario {
    pub fn channel(&self) -> ChannelModel {
        ChannelModel {
            bit_rate: self.bit_rate,
            control_frame_len: self.control_len,
            slot_time: self.slot_time,
            sifs: self.sifs,
        }
    }

    pub fn sink_rate(&self) -> f64 {
        self.sink_sch_rate
            .unwrap_or(self.bit_rate / (8.0 * self.data_len as f64))
    }

    pub fn n_classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(s).map_err(|e| ScenarioError {
            problems: vec![e.to_string()],
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        if self.n_nodes < 1 {
            problems.push("n_nodes must be >= 1".into());
        }
        if self.field.0 <= 0.0 || self.field.1 <= 0.0 {
            problems.push("field dimensions must be positive".into());
        }
        if self.tx_range <= 0.0 {
            problems.push("tx_range must be positive".into());
        }
        if self.bit_rate <= 0.0 {
            problems.push("bit_rate must be positive".into());
        }
        if self.data_len == 0 {
            problems.push("data_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.w_s) || self.w_s == 0.0 {
            problems.push("w_s must be in (0, 1)".into());
        }
        if self.class_weights.is_empty() || self.class_weights.iter().any(|&w| w == 0) {
            problems.push("class_weights must be non-empty positive integers".into());
        }
        if self.queue_capacity == 0 {
            problems.push("queue_capacity must be positive".into());
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            problems.push("mu must be in (0, 1)".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            problems.push("beta must be in (0, 1)".into());
        }
        if self.r_sch_init <= 0.0 {
            problems.push("r_sch_init must be positive".into());
        }
        if self.r_or_init < 0.0 || self.r_or_max < 0.0 {
            problems.push("originating rates must be non-negative".into());
        }
        if self.duration <= 0.0 {
            problems.push("duration must be positive".into());
        }
        if self.source_ids.iter().any(|&id| id == 0) {
            problems.push("the sink (node 0) cannot be a source".into());
        }
        if self
            .source_ids
            .iter()
            .any(|&id| id as usize >= self.n_nodes)
        {
            problems.push("source_ids must be < n_nodes".into());
        }
        if let Some(iw) = self.idle_window {
            if !(0.0..=1.0).contains(&iw.fraction) || iw.start >= iw.end {
                problems.push("idle_window must have fraction in [0,1] and start < end".into());
            }
        }
        if let Some(r) = self.pinned_ratio {
            if r <= 0.0 {
                problems.push("pinned_ratio must be positive".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError { problems })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let s = Scenario::default();
        assert_eq!(s.n_nodes, 100);
        assert_eq!(s.field, (100.0, 100.0));
        assert_eq!(s.tx_range, 30.0);
        assert_eq!(s.bit_rate, 32_000.0);
        assert_eq!(s.data_len, 33);
        assert_eq!(s.control_len, 3);
        assert_eq!(s.w_s, 0.1);
        assert_eq!(s.class_weights, vec![3, 2, 1]);
        assert_eq!(s.queue_capacity, 10);
        assert_eq!(s.n_sources, 10);
        assert_eq!(s.r_or_init, 4.0);
        assert_eq!(s.r_or_max, 16.0);
        assert_eq!(s.mu, 0.5);
        assert_eq!(s.beta, 0.75);
        assert_eq!(s.duration, 60.0);
        assert_eq!(s.mode, ProtocolMode::Phtccp);
        s.validate().unwrap();
    }

    #[test]
    fn json_roundtrip() {
        let s = Scenario::default();
        let json = serde_json::to_string_pretty(&s).unwrap();
        let back = Scenario::from_json(&json).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn validation_lists_every_bad_field() {
        let mut s = Scenario::default();
        s.n_nodes = 0;
        s.mu = 2.0;
        s.duration = 0.0;
        let err = s.validate().unwrap_err();
        assert_eq!(err.problems.len(), 3);
        assert!(err.to_string().contains("n_nodes"));
        assert!(err.to_string().contains("mu"));
        assert!(err.to_string().contains("duration"));
    }

    #[test]
    fn unknown_json_field_rejected() {
        assert!(Scenario::from_json("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn sink_rate_defaults_to_channel_capacity() {
        let s = Scenario::default();
        // 32000 bits/s over 33-byte packets
        assert!((s.sink_rate() - 32_000.0 / 264.0).abs() < 1e-9);
    }
}
