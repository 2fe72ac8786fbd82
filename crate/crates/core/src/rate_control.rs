//! Congestion detection and the hop-by-hop rate-adjustment algorithm.
//!
//! A node detects congestion from its packet service ratio `r_s / r_sch`
//! (service rate over scheduling rate). Parents piggyback their scheduling
//! rate, child counts and the aggregate weighted queue length of their
//! active children in every data header; children overhear those headers on
//! the broadcast channel and re-derive their own scheduling and originating
//! rates from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RateError {
    #[error("packet service ratio undefined: scheduling rate is zero")]
    UndefinedRatio,
}

/// Which reading of the excess-link-capacity formula to use. The prose
/// subtracts the active children's total scheduling rate from that of all
/// children; the figure additionally divides both sums by the child count.
/// Only the prose reading preserves the parent's rate budget, so it is the
/// default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcessMode {
    #[default]
    Prose,
    FigureLiteral,
}

/// Congestion-notification fields carried in a data header and overheard
/// by the sender's children.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PiggybackInfo {
    /// sender's scheduling rate, packets/second
    pub r_sch: f64,
    /// C(i): total children of the sender
    pub child_count: u8,
    /// A_t(C(i)): children of the sender currently counted active
    pub active_child_count: u8,
    /// sum of the weighted average queue lengths of the sender's active
    /// children, packets
    pub weight_denominator: f64,
}

/// Simulated header layout: two 16-bit fixed-point rates in 1/256 units
/// plus two 8-bit counts.
pub const PIGGYBACK_WIRE_LEN: usize = 6;

/// Quantization step of the fixed-point fields.
pub const FIXED_POINT_STEP: f64 = 1.0 / 256.0;

fn to_fixed(x: f64) -> u16 {
    (x * 256.0).round().clamp(0.0, u16::MAX as f64) as u16
}

impl PiggybackInfo {
    pub fn encode(&self) -> [u8; PIGGYBACK_WIRE_LEN] {
        let r = to_fixed(self.r_sch).to_be_bytes();
        let w = to_fixed(self.weight_denominator).to_be_bytes();
        [r[0], r[1], self.child_count, self.active_child_count, w[0], w[1]]
    }

    pub fn decode(bytes: &[u8; PIGGYBACK_WIRE_LEN]) -> Self {
        PiggybackInfo {
            r_sch: u16::from_be_bytes([bytes[0], bytes[1]]) as f64 * FIXED_POINT_STEP,
            child_count: bytes[2],
            active_child_count: bytes[3],
            weight_denominator: u16::from_be_bytes([bytes[4], bytes[5]]) as f64
                * FIXED_POINT_STEP,
        }
    }
}

/// Per-node rate-control variables.
#[derive(Debug, Clone)]
pub struct RateState {
    /// R_sch: packets/second handed from the scheduler to the MAC
    pub r_sch: f64,
    /// R_s: average packet service rate, reciprocal of the EWMA service time
    pub r_s: f64,
    /// EWMA of the per-packet MAC service time, seconds
    pub avg_service_time: Option<f64>,
    /// per-class originating rates
    pub r_or: Vec<f64>,
    pub r_sch_init: f64,
    /// service-ratio threshold below which congestion is signalled
    pub mu: f64,
    /// back-off multiplier applied when spare capacity is detected
    pub beta: f64,
    /// EWMA weight for service-time updates
    pub w_s: f64,
    /// parent scheduling rate seen in the last applied notification
    pub last_parent_r_sch: Option<f64>,
    /// the share granted in the last applied notification; an upper bound
    /// on how fast this node may drain toward its parent
    pub grant_ceiling: f64,
}

impl RateState {
    pub fn new(r_sch_init: f64, mu: f64, beta: f64, w_s: f64, n_classes: usize) -> Self {
        assert!(r_sch_init > 0.0);
        assert!(mu > 0.0 && mu < 1.0);
        assert!(beta > 0.0 && beta < 1.0);
        assert!(w_s > 0.0 && w_s < 1.0);
        RateState {
            r_sch: r_sch_init,
            r_s: r_sch_init,
            avg_service_time: None,
            r_or: vec![0.0; n_classes],
            r_sch_init,
            mu,
            beta,
            w_s,
            last_parent_r_sch: None,
            grant_ceiling: f64::INFINITY,
        }
    }

    /// Fold one measured service time into the EWMA and refresh `r_s`.
    pub fn observe_service_time(&mut self, inst: f64) {
        let avg = match self.avg_service_time {
            Some(avg) => update_service_time(avg, inst, self.w_s),
            None => inst,
        };
        self.avg_service_time = Some(avg);
        self.r_s = 1.0 / avg;
    }

    pub fn ratio(&self) -> Result<f64, RateError> {
        packet_service_ratio(self.r_s, self.r_sch)
    }
}

/// r(i) = R_s / R_sch, the congestion signal.
pub fn packet_service_ratio(r_s: f64, r_sch: f64) -> Result<f64, RateError> {
    if r_sch <= 0.0 {
        return Err(RateError::UndefinedRatio);
    }
    Ok(r_s / r_sch)
}

/// EWMA step for the average packet service time.
pub fn update_service_time(avg: f64, inst: f64, w_s: f64) -> f64 {
    (1.0 - w_s) * avg + w_s * inst
}

/// The scheduling-rate branch logic: drop to the service rate under
/// congestion, move to `beta * r_s` when there is spare capacity, hold
/// otherwise.
pub fn calculate_scheduling_rate(state: &mut RateState) -> Result<f64, RateError> {
    let ratio = state.ratio()?;
    if ratio < state.mu {
        state.r_sch = state.r_s;
    } else if ratio > 1.0 {
        state.r_sch = state.beta * state.r_s;
    }
    Ok(state.r_sch)
}

/// E(t): scheduling capacity left unclaimed by idle children.
/// `active[k]` marks whether `child_rates[k]` belongs to an active child.
pub fn calc_excess_link_capacity(child_rates: &[f64], active: &[bool], mode: ExcessMode) -> f64 {
    assert_eq!(child_rates.len(), active.len());
    let total: f64 = child_rates.iter().sum();
    let active_sum: f64 = child_rates
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(r, _)| r)
        .sum();
    let e = total - active_sum;
    match mode {
        ExcessMode::Prose => e,
        ExcessMode::FigureLiteral => {
            if child_rates.is_empty() {
                0.0
            } else {
                e / child_rates.len() as f64
            }
        }
    }
}

/// phi_i(t): an active child's share of the excess capacity, proportional
/// to its weighted average queue length. When every active sibling has an
/// empty queue the shares are equal.
pub fn calc_node_weight_factor(
    own_avg_q: f64,
    sibling_avg_q_sum: f64,
    is_active: bool,
    active_count: u32,
) -> f64 {
    if !is_active {
        return 0.0;
    }
    if sibling_avg_q_sum > 0.0 {
        own_avg_q / sibling_avg_q_sum
    } else if active_count > 0 {
        1.0 / active_count as f64
    } else {
        0.0
    }
}

/// Re-derive this node's scheduling rate from its parent's: an equal share
/// when every sibling is active, the share plus a weighted slice of the
/// excess capacity otherwise. The base share is recomputed from the parent
/// rate each call rather than accumulated.
pub fn dyn_rate_adj(
    parent_r_sch: f64,
    active_count: u32,
    child_count: u32,
    excess: f64,
    phi: f64,
) -> f64 {
    assert!(child_count > 0);
    assert!(active_count >= 1 && active_count <= child_count);
    let share = parent_r_sch / child_count as f64;
    if active_count == child_count {
        share
    } else {
        share + phi * excess
    }
}

/// Split the scheduling rate into per-class originating rates in priority
/// proportion, each clamped to the configured cap.
pub fn calculate_source_rate(r_sch: f64, weights: &[u32], r_or_max: f64) -> Vec<f64> {
    let total: u32 = weights.iter().sum();
    assert!(total > 0);
    weights
        .iter()
        .map(|&w| (r_sch * w as f64 / total as f64).clamp(0.0, r_or_max))
        .collect()
}

/// What a child did with an overheard parent notification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverhearOutcome {
    Applied,
    NoTrigger,
    Stale,
}

/// React to an overheard parent header: when triggered (own service ratio
/// below the threshold, or the parent's scheduling rate changed since the
/// last applied notification), run the scheduling-rate update, the dynamic
/// parent-share adjustment and the source-rate split.
#[allow(clippy::too_many_arguments)]
pub fn on_overheard(
    state: &mut RateState,
    info: &PiggybackInfo,
    own_avg_q: f64,
    weights: &[u32],
    r_or_max: f64,
    excess_mode: ExcessMode,
    info_age: f64,
    freshness_window: f64,
) -> Result<OverhearOutcome, RateError> {
    if info_age > freshness_window {
        return Ok(OverhearOutcome::Stale);
    }
    let parent_changed = state
        .last_parent_r_sch
        .map_or(true, |last| (last - info.r_sch).abs() > f64::EPSILON);
    let ratio = state.ratio()?;
    if !parent_changed && ratio >= state.mu && ratio <= 1.0 {
        return Ok(OverhearOutcome::NoTrigger);
    }

    calculate_scheduling_rate(state)?;

    let child_count = info.child_count as u32;
    let active_count = info.active_child_count as u32;
    if child_count > 0 && active_count >= 1 {
        let excess = if active_count == child_count {
            0.0
        } else {
            // the idle siblings' unclaimed shares of the parent rate
            let share = info.r_sch / child_count as f64;
            let idle = (child_count - active_count) as f64;
            match excess_mode {
                ExcessMode::Prose => share * idle,
                ExcessMode::FigureLiteral => share * idle / child_count as f64,
            }
        };
        let phi =
            calc_node_weight_factor(own_avg_q, info.weight_denominator, true, active_count);
        let adjusted = dyn_rate_adj(info.r_sch, active_count, child_count, excess, phi);
        // the share is a ceiling — the children's total may not exceed
        // the parent's rate — but it must not push scheduling above what
        // the node's own MAC measurements justify
        state.grant_ceiling = adjusted;
        state.r_sch = adjusted.min(state.r_sch);
    }
    state.r_or = calculate_source_rate(state.r_sch, weights, r_or_max);
    state.last_parent_r_sch = Some(info.r_sch);
    Ok(OverhearOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const ALPHA: [u32; 3] = [3, 2, 1];

    #[test]
    fn service_ratio_basics() {
        assert_relative_eq!(packet_service_ratio(10.0, 10.0).unwrap(), 1.0);
        assert_relative_eq!(packet_service_ratio(5.0, 10.0).unwrap(), 0.5);
        assert_relative_eq!(packet_service_ratio(12.0, 8.0).unwrap(), 1.5);
        assert!(packet_service_ratio(5.0, 0.0).is_err());
    }

    #[test]
    fn ewma_step_and_fixed_point() {
        assert_relative_eq!(update_service_time(0.10, 0.20, 0.1), 0.11, max_relative = 1e-12);
        assert_relative_eq!(update_service_time(0.3, 0.3, 0.42), 0.3, max_relative = 1e-12);
    }

    #[test]
    fn ewma_converges_within_expected_steps() {
        // independent oracle: iterate the recurrence until within 1% of the
        // target, compare against the closed-form step bound
        let w_s = 0.1_f64;
        let steps_bound = (0.01_f64.ln() / (1.0 - w_s).ln()).ceil() as usize;
        // initial relative error of 1, matching the closed-form bound
        let target = 0.25_f64;
        let mut avg = 0.5_f64;
        let mut steps = 0;
        while (avg - target).abs() / target > 0.01 {
            avg = update_service_time(avg, target, w_s);
            steps += 1;
            assert!(steps <= 1000);
        }
        assert!(steps <= steps_bound, "{steps} > {steps_bound}");
    }

    #[test]
    fn scheduling_rate_congested_branch() {
        let mut s = RateState::new(10.0, 0.5, 0.75, 0.1, 3);
        s.r_s = 4.0;
        // ratio 0.4 < mu: collapse to the service rate
        assert_relative_eq!(calculate_scheduling_rate(&mut s).unwrap(), 4.0);
        assert!(s.r_sch < 10.0);
    }

    #[test]
    fn scheduling_rate_spare_capacity_branch() {
        let mut s = RateState::new(8.0, 0.5, 0.75, 0.1, 3);
        s.r_s = 10.0;
        // ratio 1.25 > 1: r_sch = beta * r_s
        assert_relative_eq!(calculate_scheduling_rate(&mut s).unwrap(), 7.5);
    }

    #[test]
    fn scheduling_rate_boundary_unchanged() {
        let mut s = RateState::new(8.0, 0.5, 0.75, 0.1, 3);
        s.r_s = 8.0;
        assert_relative_eq!(calculate_scheduling_rate(&mut s).unwrap(), 8.0);
    }

    #[test]
    fn congestion_branch_always_decreases_rate() {
        // ratio < mu < 1 forces r_s < r_sch, so the reset is a decrease
        let mut s = RateState::new(20.0, 0.5, 0.75, 0.1, 3);
        s.r_s = 9.0;
        let old = s.r_sch;
        let new = calculate_scheduling_rate(&mut s).unwrap();
        assert!(new < old);
        assert_relative_eq!(new, s.r_s);
    }

    #[test]
    fn excess_capacity_modes() {
        let rates = [3.0, 3.0, 3.0, 3.0];
        let all = [true; 4];
        assert_relative_eq!(calc_excess_link_capacity(&rates, &all, ExcessMode::Prose), 0.0);
        let two = [true, true, false, false];
        assert_relative_eq!(calc_excess_link_capacity(&rates, &two, ExcessMode::Prose), 6.0);
        assert_relative_eq!(
            calc_excess_link_capacity(&rates, &two, ExcessMode::FigureLiteral),
            1.5
        );
        assert_relative_eq!(calc_excess_link_capacity(&[], &[], ExcessMode::Prose), 0.0);
    }

    #[test]
    fn weight_factor_cases() {
        assert_relative_eq!(
            calc_node_weight_factor(6.667, 10.0, true, 2),
            0.6667,
            max_relative = 1e-9
        );
        assert_relative_eq!(calc_node_weight_factor(5.0, 10.0, false, 2), 0.0);
        assert_relative_eq!(calc_node_weight_factor(0.0, 0.0, true, 3), 1.0 / 3.0);
    }

    #[test]
    fn weight_factors_normalize_over_active_siblings() {
        let avg_q = [6.0, 4.0, 0.0, 2.0];
        let active = [true, true, false, true];
        let denom: f64 = avg_q
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(q, _)| q)
            .sum();
        let sum: f64 = avg_q
            .iter()
            .zip(&active)
            .map(|(&q, &a)| calc_node_weight_factor(q, denom, a, 3))
            .sum();
        assert_relative_eq!(sum, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn dyn_rate_adj_all_active() {
        assert_relative_eq!(dyn_rate_adj(12.0, 4, 4, 0.0, 0.25), 3.0);
        assert_relative_eq!(dyn_rate_adj(12.0, 1, 1, 0.0, 1.0), 12.0);
    }

    #[test]
    fn dyn_rate_adj_idle_siblings_conserves_parent_rate() {
        // parent 12 pps, 2 of 4 active, prose excess 6
        let e = 6.0;
        let a = dyn_rate_adj(12.0, 2, 4, e, 0.5);
        let b = dyn_rate_adj(12.0, 2, 4, e, 0.5);
        assert_relative_eq!(a, 6.0);
        assert_relative_eq!(a + b, 12.0, max_relative = 1e-9);
    }

    #[test]
    fn source_rate_split() {
        let r = calculate_source_rate(6.0, &ALPHA, 16.0);
        assert_relative_eq!(r[0], 3.0);
        assert_relative_eq!(r[1], 2.0);
        assert_relative_eq!(r[2], 1.0);
        assert!(calculate_source_rate(0.0, &ALPHA, 16.0).iter().all(|&x| x == 0.0));
        let clamped = calculate_source_rate(48.0, &ALPHA, 16.0);
        assert_eq!(clamped, vec![16.0, 16.0, 8.0]);
    }

    #[test]
    fn source_rate_proportionality_before_clamp() {
        let r = calculate_source_rate(7.3, &ALPHA, f64::INFINITY);
        assert_relative_eq!(r[0] / r[2], 3.0, max_relative = 1e-12);
        assert_relative_eq!(r[1] / r[2], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn piggyback_roundtrip_within_quantization() {
        let info = PiggybackInfo {
            r_sch: 7.372,
            child_count: 4,
            active_child_count: 2,
            weight_denominator: 13.91,
        };
        let decoded = PiggybackInfo::decode(&info.encode());
        assert!((decoded.r_sch - info.r_sch).abs() <= FIXED_POINT_STEP / 2.0);
        assert!((decoded.weight_denominator - info.weight_denominator).abs() <= FIXED_POINT_STEP / 2.0);
        assert_eq!(decoded.child_count, 4);
        assert_eq!(decoded.active_child_count, 2);
        // quantized values re-encode exactly
        assert_eq!(decoded.encode(), info.encode());
    }

    #[test]
    fn overheard_no_trigger_when_nothing_changed() {
        let mut s = RateState::new(4.0, 0.5, 0.75, 0.1, 3);
        s.r_s = 2.4; // ratio stays inside [mu, 1] before and after the share
        let info = PiggybackInfo {
            r_sch: 12.0,
            child_count: 4,
            active_child_count: 4,
            weight_denominator: 0.0,
        };
        let out = on_overheard(&mut s, &info, 1.0, &ALPHA, 16.0, ExcessMode::Prose, 0.0, 2.0)
            .unwrap();
        assert_eq!(out, OverhearOutcome::Applied); // first notification always applies
        assert_relative_eq!(s.r_sch, 3.0);
        // same info again: no trigger
        let out = on_overheard(&mut s, &info, 1.0, &ALPHA, 16.0, ExcessMode::Prose, 0.0, 2.0)
            .unwrap();
        assert_eq!(out, OverhearOutcome::NoTrigger);
    }

    #[test]
    fn overheard_parent_rate_change_forces_new_share() {
        let mut s = RateState::new(4.0, 0.5, 0.75, 0.1, 3);
        s.r_s = 4.0;
        s.last_parent_r_sch = Some(12.0);
        let info = PiggybackInfo {
            r_sch: 8.0,
            child_count: 4,
            active_child_count: 4,
            weight_denominator: 0.0,
        };
        on_overheard(&mut s, &info, 1.0, &ALPHA, 16.0, ExcessMode::Prose, 0.0, 2.0).unwrap();
        assert_relative_eq!(s.r_sch, 2.0);
    }

    #[test]
    fn overheard_idle_siblings_add_weighted_excess() {
        // parent 12 pps, 2 of 4 active, aggregate sibling avg queue 10,
        // own avg 6.667: share 3 + phi 0.6667 * excess 6 = 7.0002,
        // below the locally justified beta * 12 = 9
        let mut s = RateState::new(4.0, 0.5, 0.75, 0.1, 3);
        s.r_s = 12.0;
        let info = PiggybackInfo {
            r_sch: 12.0,
            child_count: 4,
            active_child_count: 2,
            weight_denominator: 10.0,
        };
        on_overheard(&mut s, &info, 6.667, &ALPHA, 16.0, ExcessMode::Prose, 0.0, 2.0).unwrap();
        assert_relative_eq!(s.r_sch, 3.0 + 0.6667 * 6.0, max_relative = 1e-9);
        // source rates follow alpha from the new r_sch
        assert_relative_eq!(s.r_or[0], s.r_sch * 3.0 / 6.0, max_relative = 1e-9);
    }

    #[test]
    fn stale_info_is_ignored() {
        let mut s = RateState::new(4.0, 0.5, 0.75, 0.1, 3);
        let before = s.r_sch;
        let info = PiggybackInfo {
            r_sch: 40.0,
            child_count: 2,
            active_child_count: 2,
            weight_denominator: 0.0,
        };
        let out = on_overheard(&mut s, &info, 0.0, &ALPHA, 16.0, ExcessMode::Prose, 5.0, 2.0)
            .unwrap();
        assert_eq!(out, OverhearOutcome::Stale);
        assert_relative_eq!(s.r_sch, before);
    }
}
