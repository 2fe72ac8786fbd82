//! Canned experiment sweeps. Each preset expands a base scenario into a
//! deterministic matrix of runs, executes them (seeds in parallel) and
//! writes one aggregated CSV plus per-run output directories.

use crate::engine;
use crate::metrics::{self, MetricsLog};
use crate::scenario::{IdleWindow, ProtocolMode, Scenario};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Fig5DropVsRatio,
    Fig6QueueVsRatio,
    Fig7QueueVsTime,
    Fig8Fig9Memory,
    Fig10PerClass,
    Fig11Throughput,
    Fig12Energy,
}

impl PresetName {
    pub const ALL: [&'static str; 7] = [
        "fig5_drop_vs_ratio",
        "fig6_queue_vs_ratio",
        "fig7_queue_vs_time",
        "fig8_fig9_memory",
        "fig10_per_class",
        "fig11_throughput",
        "fig12_energy",
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::Fig5DropVsRatio => "fig5_drop_vs_ratio",
            PresetName::Fig6QueueVsRatio => "fig6_queue_vs_ratio",
            PresetName::Fig7QueueVsTime => "fig7_queue_vs_time",
            PresetName::Fig8Fig9Memory => "fig8_fig9_memory",
            PresetName::Fig10PerClass => "fig10_per_class",
            PresetName::Fig11Throughput => "fig11_throughput",
            PresetName::Fig12Energy => "fig12_energy",
        }
    }
}

impl FromStr for PresetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fig5_drop_vs_ratio" => Ok(PresetName::Fig5DropVsRatio),
            "fig6_queue_vs_ratio" => Ok(PresetName::Fig6QueueVsRatio),
            "fig7_queue_vs_time" => Ok(PresetName::Fig7QueueVsTime),
            "fig8_fig9_memory" => Ok(PresetName::Fig8Fig9Memory),
            "fig10_per_class" => Ok(PresetName::Fig10PerClass),
            "fig11_throughput" => Ok(PresetName::Fig11Throughput),
            "fig12_energy" => Ok(PresetName::Fig12Energy),
            other => Err(format!(
                "unknown preset '{}'; expected one of {}",
                other,
                PresetName::ALL.join(", ")
            )),
        }
    }
}

/// The idle window used by the link-utilization experiments.
pub fn default_idle_window() -> IdleWindow {
    IdleWindow {
        fraction: 0.3,
        start: 30.0,
        end: 50.0,
    }
}

/// Run a batch of labeled scenarios, seeds spread over worker threads.
pub fn run_many(jobs: Vec<(String, Scenario)>) -> Vec<(String, MetricsLog)> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, String, MetricsLog)>> = Mutex::new(Vec::new());
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (label, scenario) = &jobs[i];
                let log = engine::run(scenario).expect("preset scenario is valid");
                results.lock().unwrap().push((i, label.clone(), log));
            });
        }
    });
    let mut out = results.into_inner().unwrap();
    out.sort_by_key(|(i, _, _)| *i);
    out.into_iter().map(|(_, l, m)| (l, m)).collect()
}

fn pinned_jobs(base: &Scenario, seeds: &[u64], targets: &[f64], rates: &[f64]) -> Vec<(String, Scenario)> {
    let mut jobs = Vec::new();
    for &rate in rates {
        for &target in targets {
            for &seed in seeds {
                let mut s = base.clone();
                s.mode = ProtocolMode::Phtccp;
                s.pinned_ratio = Some(target);
                s.r_or_max = rate;
                s.r_or_init = rate.min(s.r_or_init);
                s.seed = seed;
                jobs.push((format!("rate{rate}_ratio{target:.1}_seed{seed}"), s));
            }
        }
    }
    jobs
}

pub const FIG5_TARGETS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const FIG5_RATES: [f64; 4] = [4.0, 8.0, 12.0, 16.0];

/// Mean weighted average queue length at the sink-adjacent node after the
/// warmup second.
pub fn sink_adjacent_mean_queue(log: &MetricsLog, warmup: f64) -> f64 {
    let vals: Vec<f64> = log
        .samples
        .iter()
        .filter(|s| s.t > warmup)
        .map(|s| s.node_avg_q[log.sink_adjacent])
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Execute one preset. Returns the aggregated CSV that was also written to
/// `<out>/<preset>.csv`.
pub fn run_preset(
    name: PresetName,
    base: &Scenario,
    seeds: &[u64],
    out_dir: &Path,
) -> io::Result<String> {
    fs::create_dir_all(out_dir)?;
    let csv = match name {
        PresetName::Fig8Fig9Memory => metrics::memory_table_csv(),
        PresetName::Fig5DropVsRatio => {
            let jobs = pinned_jobs(base, seeds, &FIG5_TARGETS, &FIG5_RATES);
            let mut out = String::from("originating_rate,target_ratio,seed,drop_percent\n");
            for (label, log) in run_many(jobs) {
                let parts: Vec<&str> = label.split('_').collect();
                let rate = parts[0].trim_start_matches("rate");
                let ratio = parts[1].trim_start_matches("ratio");
                let seed = parts[2].trim_start_matches("seed");
                let _ = writeln!(
                    out,
                    "{rate},{ratio},{seed},{:.4}",
                    metrics::drop_percentage(&log, 0.0, f64::INFINITY)
                );
            }
            out
        }
        PresetName::Fig6QueueVsRatio => {
            let jobs = pinned_jobs(base, seeds, &FIG5_TARGETS, &[base.r_or_max]);
            let mut out = String::from("target_ratio,seed,mean_avg_queue_len\n");
            for (label, log) in run_many(jobs) {
                let parts: Vec<&str> = label.split('_').collect();
                let ratio = parts[1].trim_start_matches("ratio");
                let seed = parts[2].trim_start_matches("seed");
                let _ = writeln!(out, "{ratio},{seed},{:.4}", sink_adjacent_mean_queue(&log, 5.0));
            }
            out
        }
        PresetName::Fig7QueueVsTime => {
            let jobs: Vec<(String, Scenario)> = seeds
                .iter()
                .map(|&seed| {
                    (format!("seed{seed}"), Scenario { seed, ..base.clone() })
                })
                .collect();
            let mut out = String::from("seed,t,avg_queue_len\n");
            for (label, log) in run_many(jobs) {
                let seed = label.trim_start_matches("seed");
                write_per_run(out_dir, &label, &log)?;
                for s in &log.samples {
                    let _ = writeln!(out, "{seed},{},{:.4}", s.t, s.node_avg_q[log.sink_adjacent]);
                }
            }
            out
        }
        PresetName::Fig10PerClass => {
            let jobs: Vec<(String, Scenario)> = seeds
                .iter()
                .map(|&seed| {
                    (format!("seed{seed}"), Scenario { seed, ..base.clone() })
                })
                .collect();
            let mut out = String::from("seed,t,class,cumulative_delivered\n");
            for (label, log) in run_many(jobs) {
                let seed = label.trim_start_matches("seed");
                write_per_run(out_dir, &label, &log)?;
                for s in &log.samples {
                    for (c, &d) in s.delivered_per_class.iter().enumerate() {
                        let _ = writeln!(out, "{seed},{},{},{}", s.t, c + 1, d);
                    }
                }
            }
            out
        }
        PresetName::Fig11Throughput => {
            let mut jobs = Vec::new();
            for &mode in &[ProtocolMode::Phtccp, ProtocolMode::CcfLite] {
                for &seed in seeds {
                    let mut s = base.clone();
                    s.mode = mode;
                    s.seed = seed;
                    s.idle_window = Some(default_idle_window());
                    jobs.push((format!("{}_seed{seed}", mode_name(mode)), s));
                }
            }
            let mut out = String::from("mode,seed,t,normalized_throughput\n");
            for (label, log) in run_many(jobs) {
                let (mode, seed) = label.split_once("_seed").unwrap();
                write_per_run(out_dir, &label, &log)?;
                for s in &log.samples {
                    let _ = writeln!(
                        out,
                        "{mode},{seed},{},{:.6}",
                        s.t,
                        s.sink_bytes_last_second as f64 * 8.0 / log.bit_rate
                    );
                }
            }
            out
        }
        PresetName::Fig12Energy => {
            let mut jobs = Vec::new();
            for &mode in &[ProtocolMode::None, ProtocolMode::CcfLite, ProtocolMode::Phtccp] {
                for &seed in seeds {
                    let mut s = base.clone();
                    s.mode = mode;
                    s.seed = seed;
                    jobs.push((format!("{}_seed{seed}", mode_name(mode)), s));
                }
            }
            let mut out = String::from("mode,seed,tx_bytes,sink_data_bytes,mean_hops,energy_efficiency\n");
            for (label, log) in run_many(jobs) {
                let (mode, seed) = label.split_once("_seed").unwrap();
                write_per_run(out_dir, &label, &log)?;
                let t = &log.totals;
                let h = t.mean_hops().unwrap_or(0.0);
                let eff = metrics::energy_efficiency(t.tx_bytes, t.sink_data_bytes, h)
                    .map(|e| format!("{e:.6}"))
                    .unwrap_or_else(|| "NA".into());
                let _ = writeln!(
                    out,
                    "{mode},{seed},{},{},{h:.4},{eff}",
                    t.tx_bytes, t.sink_data_bytes
                );
            }
            out
        }
    };
    fs::write(out_dir.join(format!("{}.csv", name.as_str())), &csv)?;
    Ok(csv)
}

fn write_per_run(out_dir: &Path, label: &str, log: &MetricsLog) -> io::Result<()> {
    metrics::write_run_outputs(log, &out_dir.join(label))
}

pub fn mode_name(mode: ProtocolMode) -> &'static str {
    match mode {
        ProtocolMode::Phtccp => "phtccp",
        ProtocolMode::CcfLite => "ccf_lite",
        ProtocolMode::None => "none",
    }
}
