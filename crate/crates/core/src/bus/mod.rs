//! In-process publish/subscribe bus.
//!
//! Topics are `/`-separated segments of `[a-z0-9_]+`. Subscription patterns
//! may end in a single `*` segment, which matches exactly one trailing
//! segment. Every subscriber owns a bounded queue; when it is full the oldest
//! message is dropped and counted. Publishers never wait for subscribers.
//!
//! The topic grammar and payload documents map 1:1 onto MQTT topics and JSON
//! bodies, see [`BusMessage::to_json`].

mod services;

pub use services::{
    run_control_loop, run_control_loop_with, LoopFaults, LoopOutcome, LoopStats, ObservedMessage,
};

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock, Weak};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

pub const TRAFFIC_FLOWS: &str = "traffic_flows";
pub const PREDICTED_FLOWS: &str = "predicted_flows";
pub const SIGNAL_DECISIONS: &str = "traffic_signal_decisions";
pub const SIGNAL_STATUS: &str = "traffic_signal_status";

fn check_segment(s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Bus("empty topic segment".into()));
    }
    if !s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
        return Err(Error::Bus(format!("invalid topic segment `{s}` (allowed: a-z 0-9 _)")));
    }
    Ok(())
}

/// Publication topic; never contains a wildcard.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic(Vec<String>);

impl Topic {
    pub fn new<I, S>(segments: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let segs: Vec<String> = segments.into_iter().map(|s| s.as_ref().to_string()).collect();
        if segs.is_empty() {
            return Err(Error::Bus("topic needs at least one segment".into()));
        }
        for s in &segs {
            if s == "*" {
                return Err(Error::Bus("wildcard not allowed in a publication topic".into()));
            }
            check_segment(s)?;
        }
        Ok(Topic(segs))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn root(&self) -> &str {
        &self.0[0]
    }

    pub fn leaf(&self) -> &str {
        self.0.last().expect("nonempty")
    }
}

impl FromStr for Topic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Topic::new(s.split('/'))
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

/// Subscription pattern: a topic, optionally ending in `*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPattern {
    prefix: Vec<String>,
    wildcard: bool,
}

impl TopicPattern {
    pub fn matches(&self, topic: &Topic) -> bool {
        let segs = topic.segments();
        let want = self.prefix.len() + usize::from(self.wildcard);
        segs.len() == want && segs[..self.prefix.len()] == self.prefix[..]
    }
}

impl FromStr for TopicPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let segs: Vec<&str> = s.split('/').collect();
        let wildcard = segs.last() == Some(&"*");
        let prefix = &segs[..segs.len() - usize::from(wildcard)];
        for p in prefix {
            if *p == "*" {
                return Err(Error::Bus(format!("pattern `{s}`: `*` only allowed as the last segment")));
            }
            check_segment(p)?;
        }
        Ok(TopicPattern {
            prefix: prefix.iter().map(|p| p.to_string()).collect(),
            wildcard,
        })
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = self.prefix.join("/");
        if self.wildcard {
            if !s.is_empty() {
                s.push('/');
            }
            s.push('*');
        }
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficFlowPayload {
    pub t: i64,
    pub flow_veh_per_interval: f64,
    pub approach_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedFlowsPayload {
    pub t: i64,
    pub horizon_steps: usize,
    pub forecasts: Vec<f64>,
    pub approach_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalDecisionPayload {
    pub cycle_start_t_s: f64,
    pub greens_s: Vec<f64>,
    pub cycle_length_s: f64,
    pub cost_estimate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalStatusPayload {
    pub applied: bool,
    pub greens_s: Vec<f64>,
    pub reason: String,
}

/// Message body. The four control-loop roots carry typed documents; any other
/// root carries a free-form JSON document.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    TrafficFlow(TrafficFlowPayload),
    PredictedFlows(PredictedFlowsPayload),
    SignalDecision(SignalDecisionPayload),
    SignalStatus(SignalStatusPayload),
    Document(serde_json::Value),
}

impl Payload {
    pub fn to_json_value(&self) -> serde_json::Value {
        let v = match self {
            Payload::TrafficFlow(p) => serde_json::to_value(p),
            Payload::PredictedFlows(p) => serde_json::to_value(p),
            Payload::SignalDecision(p) => serde_json::to_value(p),
            Payload::SignalStatus(p) => serde_json::to_value(p),
            Payload::Document(v) => Ok(v.clone()),
        };
        v.expect("payload serializes")
    }

    /// Decodes a JSON body according to the schema implied by the topic root.
    pub fn decode(topic: &Topic, value: serde_json::Value) -> Result<Self> {
        let err = |e: serde_json::Error| Error::Bus(format!("payload for `{topic}`: {e}"));
        let p = match topic.root() {
            TRAFFIC_FLOWS => Payload::TrafficFlow(serde_json::from_value(value).map_err(err)?),
            PREDICTED_FLOWS => Payload::PredictedFlows(serde_json::from_value(value).map_err(err)?),
            SIGNAL_DECISIONS => Payload::SignalDecision(serde_json::from_value(value).map_err(err)?),
            SIGNAL_STATUS => Payload::SignalStatus(serde_json::from_value(value).map_err(err)?),
            _ => Payload::Document(value),
        };
        p.validate_for(topic)?;
        Ok(p)
    }

    /// Schema check against the topic the payload is published on.
    pub fn validate_for(&self, topic: &Topic) -> Result<()> {
        let bad = |m: String| Err(Error::Bus(format!("schema violation on `{topic}`: {m}")));
        let two = topic.segments().len() == 2;
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match (topic.root(), self) {
            (TRAFFIC_FLOWS, Payload::TrafficFlow(p)) => {
                if !two || p.approach_id != topic.leaf() {
                    return bad(format!("expected traffic_flows/{}", p.approach_id));
                }
                if !(p.flow_veh_per_interval >= 0.0 && p.flow_veh_per_interval.is_finite()) {
                    return bad("flow_veh_per_interval must be finite and >= 0".into());
                }
            }
            (PREDICTED_FLOWS, Payload::PredictedFlows(p)) => {
                if !two || p.approach_id != topic.leaf() {
                    return bad(format!("expected predicted_flows/{}", p.approach_id));
                }
                if p.horizon_steps == 0 || p.forecasts.len() != p.horizon_steps {
                    return bad("forecasts must hold horizon_steps >= 1 values".into());
                }
                if !finite(&p.forecasts) || p.forecasts.iter().any(|f| *f < 0.0) {
                    return bad("forecasts must be finite and >= 0".into());
                }
            }
            (SIGNAL_DECISIONS, Payload::SignalDecision(p)) => {
                if !two {
                    return bad("expected traffic_signal_decisions/<intersection>".into());
                }
                if p.greens_s.is_empty() || !finite(&p.greens_s) || !(p.cycle_length_s > 0.0) {
                    return bad("greens_s must be nonempty and finite, cycle_length_s > 0".into());
                }
            }
            (SIGNAL_STATUS, Payload::SignalStatus(_)) => {
                if !two {
                    return bad("expected traffic_signal_status/<intersection>".into());
                }
            }
            (TRAFFIC_FLOWS | PREDICTED_FLOWS | SIGNAL_DECISIONS | SIGNAL_STATUS, _) => {
                return bad("payload type does not match the topic".into());
            }
            (_, Payload::Document(_)) => {}
            (root, _) => return bad(format!("typed payload on unrelated root `{root}`")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusMessage {
    pub topic: Topic,
    pub payload: Arc<Payload>,
    pub publisher_id: Arc<str>,
    /// Per-publisher counter, strictly increasing from 1.
    pub seq: u64,
    /// Scenario clock, seconds.
    pub ts: f64,
    /// Bus-wide publication order.
    pub bus_seq: u64,
}

impl BusMessage {
    /// Wire form: `{topic, publisher_id, seq, ts, payload}`.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "topic": self.topic.to_string(),
            "publisher_id": &*self.publisher_id,
            "seq": self.seq,
            "ts": self.ts,
            "payload": self.payload.to_json_value(),
        })
        .to_string()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Wire {
            topic: String,
            publisher_id: String,
            seq: u64,
            ts: f64,
            payload: serde_json::Value,
        }
        let w: Wire = serde_json::from_str(text).map_err(|e| Error::Bus(e.to_string()))?;
        let topic: Topic = w.topic.parse()?;
        let payload = Payload::decode(&topic, w.payload)?;
        Ok(BusMessage {
            topic,
            payload: Arc::new(payload),
            publisher_id: w.publisher_id.into(),
            seq: w.seq,
            ts: w.ts,
            bus_seq: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub seq: u64,
    pub bus_seq: u64,
    /// Number of subscriptions the message was handed to.
    pub delivered_to: usize,
}

#[derive(Debug, Default)]
struct SlotQueue {
    buf: VecDeque<BusMessage>,
    closed: bool,
    waiting: bool,
}

#[derive(Debug)]
struct Slot {
    id: u64,
    patterns: Vec<TopicPattern>,
    capacity: usize,
    queue: Mutex<SlotQueue>,
    ready: Condvar,
    dropped: AtomicU64,
    received: AtomicU64,
}

impl Slot {
    /// Returns the queue length after the push.
    fn push(&self, msg: BusMessage) -> usize {
        let mut q = self.queue.lock().expect("slot lock");
        if q.closed {
            return 0;
        }
        if q.buf.len() >= self.capacity {
            q.buf.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.buf.push_back(msg);
        self.received.fetch_add(1, Ordering::Relaxed);
        let len = q.buf.len();
        if q.waiting {
            self.ready.notify_one();
        }
        len
    }

    fn close(&self) {
        let mut q = self.queue.lock().expect("slot lock");
        q.closed = true;
        self.ready.notify_all();
    }
}

#[derive(Debug, Default)]
struct Counters {
    published_by_topic: BTreeMap<String, u64>,
    retired_dropped: u64,
    deliveries: u64,
}

#[derive(Debug)]
struct Inner {
    slots: RwLock<Vec<Arc<Slot>>>,
    next_slot: AtomicU64,
    bus_seq: AtomicU64,
    closed: AtomicBool,
    capacity: usize,
    counters: Mutex<Counters>,
}

/// Cheaply cloneable handle to a bus.
#[derive(Debug, Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new(DEFAULT_QUEUE_CAPACITY)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BusStats {
    pub published_by_topic: BTreeMap<String, u64>,
    pub published: u64,
    pub deliveries: u64,
    pub dropped: u64,
}

impl Bus {
    pub fn new(queue_capacity: usize) -> Self {
        Bus {
            inner: Arc::new(Inner {
                slots: RwLock::new(Vec::new()),
                next_slot: AtomicU64::new(0),
                bus_seq: AtomicU64::new(0),
                closed: AtomicBool::new(false),
                capacity: queue_capacity.max(1),
                counters: Mutex::new(Counters::default()),
            }),
        }
    }

    pub fn publisher(&self, id: impl Into<String>) -> Publisher {
        Publisher {
            bus: self.clone(),
            id: id.into().into(),
            seq: Mutex::new(0),
        }
    }

    /// Subscribes to messages published from now on whose topic matches `pattern`.
    pub fn subscribe(&self, pattern: &str) -> Result<Subscription> {
        self.subscribe_any(&[pattern])
    }

    /// One queue fed by several patterns; a message matching more than one is delivered once.
    pub fn subscribe_any(&self, patterns: &[&str]) -> Result<Subscription> {
        let patterns = patterns
            .iter()
            .map(|p| p.parse::<TopicPattern>())
            .collect::<Result<Vec<_>>>()?;
        if patterns.is_empty() {
            return Err(Error::Bus("subscription needs at least one pattern".into()));
        }
        let slot = Arc::new(Slot {
            id: self.inner.next_slot.fetch_add(1, Ordering::Relaxed),
            patterns,
            capacity: self.inner.capacity,
            queue: Mutex::new(SlotQueue::default()),
            ready: Condvar::new(),
            dropped: AtomicU64::new(0),
            received: AtomicU64::new(0),
        });
        if self.inner.closed.load(Ordering::Acquire) {
            slot.close();
        } else {
            self.inner.slots.write().expect("slots lock").push(slot.clone());
        }
        Ok(Subscription {
            slot,
            bus: Arc::downgrade(&self.inner),
        })
    }

    /// Closes every subscription. Queued messages can still be drained.
    pub fn shutdown(&self) {
        self.inner.closed.store(true, Ordering::Release);
        for s in self.inner.slots.read().expect("slots lock").iter() {
            s.close();
        }
    }

    pub fn stats(&self) -> BusStats {
        let c = self.inner.counters.lock().expect("counters lock");
        let live: u64 = self
            .inner
            .slots
            .read()
            .expect("slots lock")
            .iter()
            .map(|s| s.dropped.load(Ordering::Relaxed))
            .sum();
        BusStats {
            published: c.published_by_topic.values().sum(),
            published_by_topic: c.published_by_topic.clone(),
            deliveries: c.deliveries,
            dropped: c.retired_dropped + live,
        }
    }

    fn deliver(&self, msg: BusMessage) -> usize {
        let slots = self.inner.slots.read().expect("slots lock");
        let mut n = 0;
        let mut crowded = false;
        for s in slots.iter().filter(|s| s.patterns.iter().any(|p| p.matches(&msg.topic))) {
            let len = s.push(msg.clone());
            crowded |= len * 2 > s.capacity;
            n += 1;
        }
        drop(slots);
        {
            let mut c = self.inner.counters.lock().expect("counters lock");
            *c.published_by_topic.entry(msg.topic.to_string()).or_default() += 1;
            c.deliveries += n as u64;
        }
        if crowded {
            // give consumers a chance to run; never waits on them
            std::thread::yield_now();
        }
        n
    }

    fn retire(&self, id: u64) {
        let mut slots = self.inner.slots.write().expect("slots lock");
        if let Some(pos) = slots.iter().position(|s| s.id == id) {
            let s = slots.remove(pos);
            self.inner.counters.lock().expect("counters lock").retired_dropped +=
                s.dropped.load(Ordering::Relaxed);
        }
    }
}

/// Named message source with its own sequence counter.
#[derive(Debug)]
pub struct Publisher {
    bus: Bus,
    id: Arc<str>,
    seq: Mutex<u64>,
}

impl Publisher {
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Validates and delivers a message. Topics without subscribers are acknowledged and dropped.
    pub fn publish(&self, topic: &str, payload: Payload, ts: f64) -> Result<Ack> {
        let topic: Topic = topic.parse()?;
        self.publish_topic(topic, payload, ts)
    }

    pub fn publish_topic(&self, topic: Topic, payload: Payload, ts: f64) -> Result<Ack> {
        payload.validate_for(&topic)?;
        // held across delivery so one publisher's messages reach every queue in seq order
        let mut seq = self.seq.lock().expect("publisher lock");
        *seq += 1;
        let bus_seq = self.bus.inner.bus_seq.fetch_add(1, Ordering::AcqRel) + 1;
        let msg = BusMessage {
            topic,
            payload: Arc::new(payload),
            publisher_id: self.id.clone(),
            seq: *seq,
            ts,
            bus_seq,
        };
        let delivered_to = self.bus.deliver(msg);
        Ok(Ack {
            seq: *seq,
            bus_seq,
            delivered_to,
        })
    }
}

#[derive(Debug, PartialEq)]
pub enum Recv {
    Message(BusMessage),
    Timeout,
    Closed,
}

/// Receiving end of a subscription. Dropping it cancels the subscription.
#[derive(Debug)]
pub struct Subscription {
    slot: Arc<Slot>,
    bus: Weak<Inner>,
}

impl Subscription {
    pub fn patterns(&self) -> &[TopicPattern] {
        &self.slot.patterns
    }

    /// Blocks until a message arrives; `None` once closed and drained.
    pub fn recv(&self) -> Option<BusMessage> {
        let mut q = self.slot.queue.lock().expect("slot lock");
        loop {
            if let Some(m) = q.buf.pop_front() {
                return Some(m);
            }
            if q.closed {
                return None;
            }
            q.waiting = true;
            q = self.slot.ready.wait(q).expect("slot lock");
            q.waiting = false;
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Recv {
        let deadline = Instant::now() + timeout;
        let mut q = self.slot.queue.lock().expect("slot lock");
        loop {
            if let Some(m) = q.buf.pop_front() {
                return Recv::Message(m);
            }
            if q.closed {
                return Recv::Closed;
            }
            let now = Instant::now();
            if now >= deadline {
                return Recv::Timeout;
            }
            q.waiting = true;
            q = self.slot.ready.wait_timeout(q, deadline - now).expect("slot lock").0;
            q.waiting = false;
        }
    }

    pub fn try_recv(&self) -> Option<BusMessage> {
        self.slot.queue.lock().expect("slot lock").buf.pop_front()
    }

    /// Takes everything currently queued.
    pub fn drain(&self) -> Vec<BusMessage> {
        self.slot.queue.lock().expect("slot lock").buf.drain(..).collect()
    }

    pub fn dropped(&self) -> u64 {
        self.slot.dropped.load(Ordering::Relaxed)
    }

    /// Messages handed to this subscription, including any later dropped.
    pub fn received(&self) -> u64 {
        self.slot.received.load(Ordering::Relaxed)
    }

    pub fn cancel(self) {}
}

impl Iterator for Subscription {
    type Item = BusMessage;
    fn next(&mut self) -> Option<BusMessage> {
        self.recv()
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.slot.close();
        if let Some(inner) = self.bus.upgrade() {
            Bus { inner }.retire(self.slot.id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(a: &str, t: i64) -> Payload {
        Payload::TrafficFlow(TrafficFlowPayload {
            t,
            flow_veh_per_interval: 10.0,
            approach_id: a.into(),
        })
    }

    #[test]
    fn topic_grammar() {
        assert!("traffic_flows/a1".parse::<Topic>().is_ok());
        assert!("traffic_flows/*".parse::<Topic>().is_err());
        assert!("traffic_flows//a1".parse::<Topic>().is_err());
        assert!("Traffic/a1".parse::<Topic>().is_err());
        assert!("".parse::<Topic>().is_err());
        assert!("a/*/b".parse::<TopicPattern>().is_err());
        assert!("a/b*".parse::<TopicPattern>().is_err());
        assert_eq!("a/*".parse::<TopicPattern>().unwrap().to_string(), "a/*");
    }

    #[test]
    fn wildcard_matching() {
        let p: TopicPattern = "predicted_flows/*".parse().unwrap();
        assert!(p.matches(&"predicted_flows/a1".parse().unwrap()));
        assert!(p.matches(&"predicted_flows/a2".parse().unwrap()));
        assert!(!p.matches(&"traffic_flows/a1".parse().unwrap()));
        assert!(!p.matches(&"predicted_flows".parse().unwrap()));
        let exact: TopicPattern = "traffic_signal_decisions/i1".parse().unwrap();
        assert!(exact.matches(&"traffic_signal_decisions/i1".parse().unwrap()));
        assert!(!exact.matches(&"traffic_signal_decisions/i2".parse().unwrap()));
    }

    #[test]
    fn delivered_once_and_in_order() {
        let bus = Bus::default();
        let sub = bus.subscribe("traffic_flows/*").unwrap();
        let p = bus.publisher("s1");
        let a1 = p.publish("traffic_flows/a1", flow("a1", 0), 0.0).unwrap();
        let a2 = p.publish("traffic_flows/a1", flow("a1", 1), 300.0).unwrap();
        assert_eq!((a1.delivered_to, a1.seq, a2.seq), (1, 1, 2));
        let got = sub.drain();
        assert_eq!(got.len(), 2);
        assert!(got[0].seq < got[1].seq);
        assert_eq!(&*got[0].publisher_id, "s1");
    }

    #[test]
    fn no_subscribers_still_acknowledged() {
        let bus = Bus::default();
        let ack = bus.publisher("x").publish("traffic_flows/a1", flow("a1", 0), 0.0).unwrap();
        assert_eq!(ack.delivered_to, 0);
        let late = bus.subscribe("traffic_flows/*").unwrap();
        assert!(late.try_recv().is_none());
    }

    #[test]
    fn publish_rejects_wildcards_and_bad_schema() {
        let bus = Bus::default();
        let p = bus.publisher("x");
        assert!(p.publish("traffic_flows/*", flow("a1", 0), 0.0).is_err());
        // approach id must match topic leaf
        assert!(p.publish("traffic_flows/a2", flow("a1", 0), 0.0).is_err());
        // wrong payload type for the root
        let status = Payload::SignalStatus(SignalStatusPayload {
            applied: true,
            greens_s: vec![1.0],
            reason: String::new(),
        });
        assert!(p.publish("traffic_flows/a1", status.clone(), 0.0).is_err());
        assert!(p.publish("traffic_signal_status/i1", status, 0.0).is_ok());
        let bad = Payload::PredictedFlows(PredictedFlowsPayload {
            t: 0,
            horizon_steps: 2,
            forecasts: vec![1.0],
            approach_id: "a1".into(),
        });
        assert!(p.publish("predicted_flows/a1", bad, 0.0).is_err());
        assert!(p
            .publish("alerts/display", Payload::Document(serde_json::json!({"text": "rain"})), 0.0)
            .is_ok());
    }

    #[test]
    fn cancelled_subscription_receives_nothing() {
        let bus = Bus::default();
        let keep = bus.subscribe("traffic_flows/*").unwrap();
        let gone = bus.subscribe("traffic_flows/*").unwrap();
        gone.cancel();
        let ack = bus.publisher("x").publish("traffic_flows/a1", flow("a1", 0), 0.0).unwrap();
        assert_eq!(ack.delivered_to, 1);
        assert_eq!(keep.drain().len(), 1);
    }

    #[test]
    fn overflow_drops_oldest() {
        let bus = Bus::new(4);
        let sub = bus.subscribe("traffic_flows/a1").unwrap();
        let p = bus.publisher("x");
        for t in 0..10 {
            p.publish("traffic_flows/a1", flow("a1", t), 0.0).unwrap();
        }
        assert_eq!(sub.dropped(), 6);
        assert_eq!(bus.stats().dropped, 6);
        let ts: Vec<i64> = sub
            .drain()
            .iter()
            .map(|m| match &*m.payload {
                Payload::TrafficFlow(f) => f.t,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(ts, vec![6, 7, 8, 9]);
    }

    #[test]
    fn shutdown_drains_then_closes() {
        let bus = Bus::default();
        let sub = bus.subscribe("traffic_flows/*").unwrap();
        bus.publisher("x").publish("traffic_flows/a1", flow("a1", 0), 0.0).unwrap();
        bus.shutdown();
        assert!(sub.recv().is_some());
        assert!(sub.recv().is_none());
        assert_eq!(sub.recv_timeout(Duration::from_millis(1)), Recv::Closed);
        assert!(bus.subscribe("x").unwrap().recv().is_none());
    }

    #[test]
    fn wire_round_trip() {
        let bus = Bus::default();
        let sub = bus.subscribe("traffic_signal_decisions/i1").unwrap();
        let d = Payload::SignalDecision(SignalDecisionPayload {
            cycle_start_t_s: 300.0,
            greens_s: vec![30.5, 20.0],
            cycle_length_s: 60.0,
            cost_estimate_s: 12.25,
        });
        bus.publisher("opt").publish("traffic_signal_decisions/i1", d, 300.0).unwrap();
        let m = sub.recv().unwrap();
        let text = m.to_json();
        assert!(text.contains("\"cycle_start_t_s\":300.0"), "{text}");
        assert!(text.contains("\"greens_s\":[30.5,20.0]"));
        let back = BusMessage::from_json(&text).unwrap();
        assert_eq!(back.payload, m.payload);
        assert_eq!(back.seq, m.seq);
        assert!(BusMessage::from_json(&text.replace("greens_s", "greens")).is_err());
    }

    #[test]
    fn multi_pattern_delivers_once() {
        let bus = Bus::default();
        let sub = bus.subscribe_any(&["traffic_flows/*", "traffic_flows/a1"]).unwrap();
        bus.publisher("x").publish("traffic_flows/a1", flow("a1", 0), 0.0).unwrap();
        assert_eq!(sub.drain().len(), 1);
    }

    #[test]
    fn recv_timeout_times_out() {
        let bus = Bus::default();
        let sub = bus.subscribe("a").unwrap();
        assert_eq!(sub.recv_timeout(Duration::from_millis(5)), Recv::Timeout);
    }
}
