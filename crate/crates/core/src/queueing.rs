//! Per-node classifier, per-class priority queues and the weighted-fair
//! scheduler sitting between the network layer and the MAC.
//!
//! Each traffic class owns one fixed-capacity queue split into two FIFO
//! segments: transit (route) packets always dequeue before locally
//! originated ones. Across classes the scheduler runs packet-by-packet
//! weighted fair queuing on virtual finish times.

use crate::rate_control::PiggybackInfo;
use crate::topology::NodeId;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// A sink-assigned traffic class; `id` is 1-based, `weight` is its
/// inter-queue priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficClass {
    pub id: u8,
    pub weight: u32,
}

/// A data frame moving toward the sink.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub class: u8,
    pub origin: NodeId,
    pub prev_hop: NodeId,
    pub seq: u64,
    pub payload_len: u32,
    pub piggyback: PiggybackInfo,
    /// sender's own weighted average queue length, read by its parent to
    /// aggregate the piggyback weight denominator
    pub sender_avg_q: f64,
    pub created_at: f64,
    pub hop_count: u32,
}

/// Which segment of a class queue a packet belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Route,
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    Dropped,
}

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("unknown traffic class id {0}")]
    UnknownClass(u8),
}

/// One class queue: route packets ahead of source packets, FIFO within each.
#[derive(Debug, Clone)]
pub struct ClassQueue {
    pub class: TrafficClass,
    route: VecDeque<Packet>,
    source: VecDeque<Packet>,
    capacity: usize,
}

impl ClassQueue {
    fn new(class: TrafficClass, capacity: usize) -> Self {
        ClassQueue {
            class,
            route: VecDeque::new(),
            source: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.route.len() + self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.route.is_empty() && self.source.is_empty()
    }

    pub fn route_len(&self) -> usize {
        self.route.len()
    }

    fn push(&mut self, p: Packet, segment: Segment) -> EnqueueOutcome {
        if self.len() >= self.capacity {
            return EnqueueOutcome::Dropped;
        }
        match segment {
            Segment::Route => self.route.push_back(p),
            Segment::Source => self.source.push_back(p),
        }
        EnqueueOutcome::Accepted
    }

    fn pop(&mut self) -> Option<(Packet, Segment)> {
        if let Some(p) = self.route.pop_front() {
            Some((p, Segment::Route))
        } else {
            self.source.pop_front().map(|p| (p, Segment::Source))
        }
    }
}

/// WFQ state over the class queues of one node.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    queues: Vec<ClassQueue>,
    /// virtual time = finish tag of the last granted packet
    virtual_time: f64,
    /// per-queue finish tag of the most recently enqueued packet
    finish: Vec<f64>,
    /// per-queue finish tags of resident packets, parallel to queue order
    tags: Vec<VecDeque<f64>>,
}

impl SchedulerState {
    pub fn new(classes: &[TrafficClass], capacity_per_queue: usize) -> Self {
        SchedulerState {
            queues: classes
                .iter()
                .map(|&c| ClassQueue::new(c, capacity_per_queue))
                .collect(),
            virtual_time: 0.0,
            finish: vec![0.0; classes.len()],
            tags: vec![VecDeque::new(); classes.len()],
        }
    }

    pub fn queues(&self) -> &[ClassQueue] {
        &self.queues
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(|q| q.is_empty())
    }

    fn queue_index(&self, class: u8) -> Result<usize, QueueError> {
        self.queues
            .iter()
            .position(|q| q.class.id == class)
            .ok_or(QueueError::UnknownClass(class))
    }

    /// Route-vs-source decision: a packet whose origin is this node is
    /// source traffic, anything else is transit.
    pub fn classify(&self, p: &Packet, self_id: NodeId) -> Result<(u8, Segment), QueueError> {
        self.queue_index(p.class)?;
        let segment = if p.origin == self_id {
            Segment::Source
        } else {
            Segment::Route
        };
        Ok((p.class, segment))
    }

    pub fn enqueue(&mut self, p: Packet, segment: Segment) -> EnqueueOutcome {
        let idx = self
            .queue_index(p.class)
            .expect("enqueue called with classified packet");
        let size = p.payload_len as f64;
        let outcome = self.queues[idx].push(p, segment);
        if outcome == EnqueueOutcome::Accepted {
            let weight = self.queues[idx].class.weight as f64;
            let start = self.virtual_time.max(self.finish[idx]);
            self.finish[idx] = start + size / weight;
            self.tags[idx].push_back(self.finish[idx]);
        }
        outcome
    }

    /// Grant the non-empty queue with the smallest virtual finish tag,
    /// taking the head of its route segment first.
    pub fn schedule_next(&mut self) -> Option<Packet> {
        let idx = (0..self.queues.len())
            .filter(|&i| !self.queues[i].is_empty())
            .min_by(|&a, &b| self.tags[a][0].partial_cmp(&self.tags[b][0]).unwrap())?;
        self.virtual_time = self.tags[idx].pop_front().unwrap();
        let (p, _) = self.queues[idx].pop().unwrap();
        Some(p)
    }

    /// Priority-weighted mean occupancy over the N class queues.
    pub fn weighted_avg_queue_length(&self) -> f64 {
        let n = self.queues.len() as f64;
        self.queues
            .iter()
            .map(|q| q.class.weight as f64 * q.len() as f64)
            .sum::<f64>()
            / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate_control::PiggybackInfo;
    use proptest::prelude::*;

    fn classes() -> Vec<TrafficClass> {
        vec![
            TrafficClass { id: 1, weight: 3 },
            TrafficClass { id: 2, weight: 2 },
            TrafficClass { id: 3, weight: 1 },
        ]
    }

    fn pkt(class: u8, origin: u32, seq: u64) -> Packet {
        Packet {
            class,
            origin: NodeId(origin),
            prev_hop: NodeId(origin),
            seq,
            payload_len: 33,
            piggyback: PiggybackInfo::default(),
            sender_avg_q: 0.0,
            created_at: 0.0,
            hop_count: 0,
        }
    }

    #[test]
    fn classify_source_vs_route() {
        let s = SchedulerState::new(&classes(), 10);
        let me = NodeId(5);
        let own = pkt(1, 5, 0);
        let transit = pkt(2, 9, 0);
        assert_eq!(s.classify(&own, me).unwrap(), (1, Segment::Source));
        assert_eq!(s.classify(&transit, me).unwrap(), (2, Segment::Route));
    }

    #[test]
    fn classify_unknown_class_errors() {
        let s = SchedulerState::new(&classes(), 10);
        let bad = pkt(4, 1, 0);
        assert!(matches!(
            s.classify(&bad, NodeId(1)),
            Err(QueueError::UnknownClass(4))
        ));
    }

    #[test]
    fn full_queue_drops() {
        let mut s = SchedulerState::new(&classes(), 10);
        for i in 0..10 {
            assert_eq!(s.enqueue(pkt(1, 2, i), Segment::Route), EnqueueOutcome::Accepted);
        }
        assert_eq!(s.enqueue(pkt(1, 2, 10), Segment::Route), EnqueueOutcome::Dropped);
        // other class queues are unaffected
        assert_eq!(s.enqueue(pkt(2, 2, 11), Segment::Route), EnqueueOutcome::Accepted);
    }

    #[test]
    fn route_packets_dequeue_before_source() {
        let mut s = SchedulerState::new(&classes(), 10);
        let me = NodeId(1);
        for i in 0..3 {
            s.enqueue(pkt(1, 1, i), Segment::Source);
        }
        let transit = pkt(1, 7, 100);
        let (_, seg) = s.classify(&transit, me).unwrap();
        assert_eq!(seg, Segment::Route);
        s.enqueue(transit, seg);
        let first = s.schedule_next().unwrap();
        assert_eq!(first.seq, 100);
        assert_eq!(first.origin, NodeId(7));
    }

    #[test]
    fn only_backlogged_queue_is_served() {
        let mut s = SchedulerState::new(&classes(), 10);
        s.enqueue(pkt(3, 2, 1), Segment::Route);
        assert_eq!(s.schedule_next().unwrap().class, 3);
        assert!(s.schedule_next().is_none());
    }

    #[test]
    fn wfq_shares_match_weights_when_saturated() {
        let mut s = SchedulerState::new(&classes(), 1000);
        // keep every queue continuously backlogged
        let mut counts = [0u32; 3];
        let mut seq = 0;
        for _ in 0..20 {
            for c in 1..=3 {
                s.enqueue(pkt(c, 2, seq), Segment::Route);
                seq += 1;
            }
        }
        for _ in 0..600 {
            for c in 1..=3 {
                s.enqueue(pkt(c, 2, seq), Segment::Route);
                seq += 1;
            }
            let p = s.schedule_next().unwrap();
            counts[p.class as usize - 1] += 1;
        }
        // alpha = (3,2,1) over 600 grants
        assert!((counts[0] as i64 - 300).abs() <= 1, "{counts:?}");
        assert!((counts[1] as i64 - 200).abs() <= 1, "{counts:?}");
        assert!((counts[2] as i64 - 100).abs() <= 1, "{counts:?}");
    }

    #[test]
    fn weighted_avg_queue_length_examples() {
        let mut s = SchedulerState::new(&classes(), 10);
        assert_eq!(s.weighted_avg_queue_length(), 0.0);
        for i in 0..4 {
            s.enqueue(pkt(1, 2, i), Segment::Route);
        }
        for i in 0..3 {
            s.enqueue(pkt(2, 2, 10 + i), Segment::Route);
        }
        for i in 0..2 {
            s.enqueue(pkt(3, 2, 20 + i), Segment::Route);
        }
        let expect = (3.0 * 4.0 + 2.0 * 3.0 + 1.0 * 2.0) / 3.0;
        assert!((s.weighted_avg_queue_length() - expect).abs() < 1e-12);
        assert!((expect - 6.666_666_666_666_667).abs() < 1e-12);
    }

    #[test]
    fn single_queue_avg_is_plain_length() {
        let mut s = SchedulerState::new(&[TrafficClass { id: 1, weight: 1 }], 10);
        for i in 0..5 {
            s.enqueue(pkt(1, 2, i), Segment::Route);
        }
        assert_eq!(s.weighted_avg_queue_length(), 5.0);
    }

    proptest! {
        // Conservation: enqueued = dequeued + dropped + resident.
        #[test]
        fn conservation(ops in proptest::collection::vec((1u8..=3, 0u32..3, prop::bool::ANY), 0..200)) {
            let mut s = SchedulerState::new(&classes(), 4);
            let mut accepted = 0usize;
            let mut dropped = 0usize;
            let mut dequeued = 0usize;
            let mut seq = 0;
            for (class, origin, do_dequeue) in ops {
                if do_dequeue {
                    if s.schedule_next().is_some() {
                        dequeued += 1;
                    }
                } else {
                    match s.enqueue(pkt(class, origin, seq), Segment::Route) {
                        EnqueueOutcome::Accepted => accepted += 1,
                        EnqueueOutcome::Dropped => dropped += 1,
                    }
                    seq += 1;
                }
                prop_assert_eq!(accepted, dequeued + s.total_len());
                prop_assert!(s.queues().iter().all(|q| q.len() <= 4));
            }
            let _ = dropped;
        }

        // Intra-queue priority: a source packet never leaves while a route
        // packet of the same class is resident.
        #[test]
        fn route_before_source(ops in proptest::collection::vec((1u8..=3, prop::bool::ANY, prop::bool::ANY), 0..200)) {
            let mut s = SchedulerState::new(&classes(), 10);
            let me = NodeId(1);
            let mut seq = 0;
            let mut route_resident = [0i32; 3];
            for (class, is_route, do_dequeue) in ops {
                if do_dequeue {
                    if let Some(p) = s.schedule_next() {
                        let i = p.class as usize - 1;
                        if p.origin == me {
                            prop_assert_eq!(route_resident[i], 0);
                        } else {
                            route_resident[i] -= 1;
                        }
                    }
                } else {
                    let origin = if is_route { NodeId(9) } else { me };
                    let mut p = pkt(class, origin.0, seq);
                    p.origin = origin;
                    seq += 1;
                    let (_, segment) = s.classify(&p, me).unwrap();
                    if s.enqueue(p, segment) == EnqueueOutcome::Accepted && is_route {
                        route_resident[class as usize - 1] += 1;
                    }
                }
            }
        }
    }
}
