//! Run measurements: per-second time series, run totals, derived metrics
//! and CSV export, plus the analytical queue-memory model.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

/// One per-second snapshot of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    /// cumulative sink deliveries per class
    pub delivered_per_class: Vec<u64>,
    /// cumulative counts
    pub generated: u64,
    pub buffer_drops: u64,
    pub mac_drops: u64,
    /// data bytes delivered to the sink during the last second
    pub sink_bytes_last_second: u64,
    /// per-node weighted average queue length
    pub node_avg_q: Vec<f64>,
    pub node_r_sch: Vec<f64>,
    pub node_r_s: Vec<f64>,
    /// cumulative buffer drops per node
    pub node_buffer_drops: Vec<u64>,
}

/// End-of-run totals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Totals {
    pub generated: u64,
    pub delivered: u64,
    pub buffer_drops: u64,
    pub mac_drops: u64,
    /// packets still queued or in flight when the run ended
    pub residual: u64,
    /// enqueue attempts that were accepted
    pub enqueued: u64,
    /// T: bytes put on air network-wide, control frames and collisions
    /// included
    pub tx_bytes: u64,
    /// R: data bytes received at the sink
    pub sink_data_bytes: u64,
    /// sum of hop counts over delivered data packets
    pub hop_sum: u64,
    pub generated_per_class: Vec<u64>,
    pub buffer_drops_per_class: Vec<u64>,
}

impl Totals {
    /// H: mean hops traveled by a delivered packet.
    pub fn mean_hops(&self) -> Option<f64> {
        (self.delivered > 0).then(|| self.hop_sum as f64 / self.delivered as f64)
    }
}

/// One successful MAC exchange, for post-run soundness scans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxRecord {
    pub sender: u32,
    pub receiver: u32,
    pub start: f64,
    pub end: f64,
}

/// Assertion counters collected while the run executes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunAudit {
    /// worst |sum(phi) - 1| seen at any notification instant
    pub phi_norm_max_err: f64,
    /// worst |sum of active-child rates - parent rate| at any notification
    pub conservation_max_err: f64,
    pub adjustment_checks: u64,
    pub intra_queue_violations: u64,
    pub overlap_violations: u64,
    pub stale_notifications: u64,
    pub tx_records: Vec<TxRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub n_classes: usize,
    pub n_nodes: usize,
    pub bit_rate: f64,
    /// node adjacent to the sink carrying the most forwarded traffic
    pub sink_adjacent: usize,
    pub samples: Vec<Sample>,
    pub totals: Totals,
    pub audit: RunAudit,
}

/// Percentage of buffer drops among enqueue attempts inside `[from, to)`
/// seconds. MAC drops are tracked separately.
pub fn drop_percentage(log: &MetricsLog, from: f64, to: f64) -> f64 {
    let at = |t: f64| -> (u64, u64) {
        log.samples
            .iter()
            .rev()
            .find(|s| s.t <= t)
            .map(|s| (s.buffer_drops, s.generated))
            .unwrap_or((0, 0))
    };
    let (d0, _) = at(from);
    let (d1, _) = at(to);
    let drops = d1.saturating_sub(d0);
    // enqueue attempts are reconstructed from totals when the window spans
    // the whole run; otherwise approximate with generated counts
    let attempts = if from <= 0.0 && to >= log.samples.last().map_or(0.0, |s| s.t) {
        log.totals.enqueued + log.totals.buffer_drops
    } else {
        let g0 = at(from).1;
        let g1 = at(to).1;
        g1.saturating_sub(g0) + drops
    };
    if attempts == 0 {
        0.0
    } else {
        100.0 * drops as f64 / attempts as f64
    }
}

/// T / (R * H); smaller is better. Undefined when nothing was delivered.
pub fn energy_efficiency(t_bytes: u64, r_bytes: u64, mean_hops: f64) -> Option<f64> {
    if r_bytes == 0 || mean_hops <= 0.0 {
        return None;
    }
    Some(t_bytes as f64 / (r_bytes as f64 * mean_hops))
}

/// M_r = N * p_l * q_l: worst-case buffer memory for N class queues of
/// q_l packets of p_l bytes.
pub fn memory_requirement(n_queues: u32, pkt_len: u32, queue_len: u32) -> u64 {
    n_queues as u64 * pkt_len as u64 * queue_len as u64
}

/// Sink goodput in the sample second containing `t`, as a fraction of the
/// channel bit rate.
pub fn normalized_throughput(log: &MetricsLog, t: f64) -> f64 {
    log.samples
        .iter()
        .find(|s| s.t >= t)
        .map(|s| s.sink_bytes_last_second as f64 * 8.0 / log.bit_rate)
        .unwrap_or(0.0)
}

/// Mean normalized throughput over `[from, to]` seconds.
pub fn mean_normalized_throughput(log: &MetricsLog, from: f64, to: f64) -> f64 {
    let vals: Vec<f64> = log
        .samples
        .iter()
        .filter(|s| s.t > from && s.t <= to)
        .map(|s| s.sink_bytes_last_second as f64 * 8.0 / log.bit_rate)
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Long-format per-second series: one row per (time, quantity, node).
pub fn timeseries_csv(log: &MetricsLog) -> String {
    let mut out = String::from("t,quantity,node,value\n");
    for s in &log.samples {
        for (c, &d) in s.delivered_per_class.iter().enumerate() {
            let _ = writeln!(out, "{},delivered_class_{},sink,{}", s.t, c + 1, d);
        }
        let _ = writeln!(out, "{},generated,all,{}", s.t, s.generated);
        let _ = writeln!(out, "{},buffer_drops,all,{}", s.t, s.buffer_drops);
        let _ = writeln!(out, "{},mac_drops,all,{}", s.t, s.mac_drops);
        let _ = writeln!(
            out,
            "{},normalized_throughput,sink,{:.6}",
            s.t,
            s.sink_bytes_last_second as f64 * 8.0 / log.bit_rate
        );
        for node in 0..log.n_nodes {
            let _ = writeln!(out, "{},avg_queue_len,{},{:.6}", s.t, node, s.node_avg_q[node]);
            let _ = writeln!(out, "{},r_sch,{},{:.6}", s.t, node, s.node_r_sch[node]);
            let _ = writeln!(out, "{},r_s,{},{:.6}", s.t, node, s.node_r_s[node]);
        }
    }
    out
}

pub fn summary_csv(log: &MetricsLog) -> String {
    let t = &log.totals;
    let h = t.mean_hops().unwrap_or(0.0);
    let eff = energy_efficiency(t.tx_bytes, t.sink_data_bytes, h)
        .map(|e| format!("{e:.6}"))
        .unwrap_or_else(|| "NA".into());
    let mut out = String::from(
        "generated,delivered,buffer_drops,mac_drops,residual,tx_bytes,sink_data_bytes,mean_hops,energy_efficiency,drop_percent",
    );
    for c in 1..=log.n_classes {
        let _ = write!(out, ",generated_c{c},delivered_c{c},buffer_drops_c{c}");
    }
    out.push('\n');
    let _ = write!(
        out,
        "{},{},{},{},{},{},{},{:.6},{},{:.6}",
        t.generated,
        t.delivered,
        t.buffer_drops,
        t.mac_drops,
        t.residual,
        t.tx_bytes,
        t.sink_data_bytes,
        h,
        eff,
        drop_percentage(log, 0.0, f64::INFINITY),
    );
    let final_deliveries = log.samples.last().map(|s| s.delivered_per_class.clone());
    for c in 0..log.n_classes {
        let delivered = final_deliveries.as_ref().map_or(0, |d| d[c]);
        let _ = write!(
            out,
            ",{},{},{}",
            t.generated_per_class[c], delivered, t.buffer_drops_per_class[c]
        );
    }
    out.push('\n');
    out
}

/// The memory-model table over the reference packet sizes and queue counts.
pub fn memory_table_csv() -> String {
    let mut out = String::from("packet_len,n_queues,queue_len,bytes\n");
    for &pkt in &[29u32, 33, 41, 64] {
        let _ = writeln!(out, "{},3,10,{}", pkt, memory_requirement(3, pkt, 10));
    }
    for n_queues in 1..=5u32 {
        let _ = writeln!(
            out,
            "33,{},10,{}",
            n_queues,
            memory_requirement(n_queues, 33, 10)
        );
    }
    out
}

pub fn write_run_outputs(log: &MetricsLog, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("timeseries.csv"), timeseries_csv(log))?;
    fs::write(dir.join("summary.csv"), summary_csv(log))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_log() -> MetricsLog {
        MetricsLog {
            n_classes: 3,
            n_nodes: 2,
            bit_rate: 32_000.0,
            sink_adjacent: 1,
            samples: vec![
                Sample {
                    t: 1.0,
                    delivered_per_class: vec![3, 2, 1],
                    generated: 50,
                    buffer_drops: 0,
                    mac_drops: 0,
                    sink_bytes_last_second: 0,
                    node_avg_q: vec![0.0, 1.0],
                    node_r_sch: vec![0.0, 4.0],
                    node_r_s: vec![0.0, 10.0],
                    node_buffer_drops: vec![0, 0],
                },
                Sample {
                    t: 2.0,
                    delivered_per_class: vec![6, 4, 2],
                    generated: 100,
                    buffer_drops: 2,
                    mac_drops: 1,
                    sink_bytes_last_second: 4000,
                    node_avg_q: vec![0.0, 2.0],
                    node_r_sch: vec![0.0, 4.0],
                    node_r_s: vec![0.0, 10.0],
                    node_buffer_drops: vec![0, 0],
                },
            ],
            totals: Totals {
                generated: 100,
                delivered: 12,
                buffer_drops: 2,
                mac_drops: 1,
                residual: 85,
                enqueued: 98,
                tx_bytes: 1000,
                sink_data_bytes: 500,
                hop_sum: 24,
                generated_per_class: vec![50, 33, 17],
                buffer_drops_per_class: vec![1, 1, 0],
            },
            audit: RunAudit::default(),
        }
    }

    #[test]
    fn drop_percentage_examples() {
        let log = tiny_log();
        // 2 drops, 98 accepted over the whole run
        assert!((drop_percentage(&log, 0.0, f64::INFINITY) - 2.0).abs() < 1e-9);
        let mut clean = log.clone();
        clean.totals.buffer_drops = 0;
        for s in &mut clean.samples {
            s.buffer_drops = 0;
        }
        assert_eq!(drop_percentage(&clean, 0.0, f64::INFINITY), 0.0);
        // empty window
        let empty = MetricsLog {
            samples: vec![],
            ..log
        };
        assert_eq!(drop_percentage(&empty, 0.0, 1.0), 0.0);
    }

    #[test]
    fn energy_efficiency_examples() {
        assert_eq!(energy_efficiency(1000, 500, 2.0), Some(1.0));
        assert_eq!(energy_efficiency(3000, 500, 2.0), Some(3.0));
        assert_eq!(energy_efficiency(1000, 0, 2.0), None);
    }

    #[test]
    fn memory_model_reference_values() {
        assert_eq!(memory_requirement(3, 29, 10), 870);
        assert_eq!(memory_requirement(3, 33, 10), 990);
        assert_eq!(memory_requirement(3, 41, 10), 1230);
        assert_eq!(memory_requirement(3, 64, 10), 1920);
        assert_eq!(memory_requirement(0, 33, 10), 0);
    }

    #[test]
    fn memory_table_contains_reference_rows() {
        let csv = memory_table_csv();
        for row in ["29,3,10,870", "33,3,10,990", "41,3,10,1230", "64,3,10,1920"] {
            assert!(csv.contains(row), "missing {row} in:\n{csv}");
        }
        assert!(csv.contains("33,5,10,1650"));
    }

    #[test]
    fn normalized_throughput_examples() {
        let log = tiny_log();
        // 4000 bytes in the second ending at t=2 over 32 kbps
        assert!((normalized_throughput(&log, 2.0) - 1.0).abs() < 1e-9);
        assert_eq!(normalized_throughput(&log, 1.0), 0.0);
        // 121 packets of 33 bytes in one second is just under capacity
        let bits: f64 = 121.0 * 33.0 * 8.0;
        assert!((bits / 32_000.0 - 0.9982).abs() < 1e-3);
    }

    #[test]
    fn csv_row_count_matches_duration() {
        let log = tiny_log();
        let ts = timeseries_csv(&log);
        let rows_per_sample = log.n_classes + 4 + 3 * log.n_nodes;
        assert_eq!(ts.lines().count(), 1 + 2 * rows_per_sample);
        assert_eq!(summary_csv(&log).lines().count(), 2);
    }
}
