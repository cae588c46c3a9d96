//! Bi-flow assembly keyed by a direction-independent 5-tuple.

use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use super::pcap::{Packet, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.addr {
            IpAddr::V4(a) => write!(f, "{a}:{}", self.port),
            IpAddr::V6(a) => write!(f, "[{a}]:{}", self.port),
        }
    }
}

/// 5-tuple with the lexicographically smaller endpoint first, so both
/// directions of a conversation share one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub low: Endpoint,
    pub high: Endpoint,
    pub protocol: Protocol,
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint, protocol: Protocol) -> Self {
        let (low, high) = if a <= b { (a, b) } else { (b, a) };
        Self { low, high, protocol }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} <-> {}", self.protocol, self.low, self.high)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketMeta {
    pub timestamp: f64,
    pub payload_len: usize,
    /// Zero for UDP.
    pub tcp_window: u16,
    /// 0 from the initiator, 1 towards it.
    pub direction: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub initiator: Endpoint,
    pub packets: Vec<PacketMeta>,
    /// Transport payload of the flow, concatenated in arrival order and cut at
    /// the prefix limit.
    pub payload_prefix: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowAssembly {
    pub flows: Vec<FlowRecord>,
    /// Packets whose transport layer was not TCP/UDP.
    pub skipped: usize,
}

/// Groups packets into bi-flows. A silence longer than `idle_timeout` seconds
/// closes a flow; the next packet on the same key opens a new one.
///
/// Packets are stably sorted by timestamp first. Flows come out ordered by
/// their first packet, ties broken by key.
pub fn assemble_flows(packets: impl IntoIterator<Item = Packet>, idle_timeout: f64, prefix_limit: usize) -> FlowAssembly {
    let mut packets: Vec<Packet> = packets.into_iter().collect();
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut open: HashMap<FlowKey, usize> = HashMap::new();
    let mut flows: Vec<FlowRecord> = Vec::new();
    let mut skipped = 0;
    for p in packets {
        let Some(t) = p.transport else {
            skipped += 1;
            continue;
        };
        let src = Endpoint { addr: p.src, port: t.src_port };
        let dst = Endpoint { addr: p.dst, port: t.dst_port };
        let key = FlowKey::new(src, dst, t.protocol);
        let idx = match open.get(&key) {
            Some(&i) if p.timestamp - flows[i].packets.last().expect("open flow has packets").timestamp <= idle_timeout => i,
            _ => {
                flows.push(FlowRecord {
                    key,
                    initiator: src,
                    packets: Vec::new(),
                    payload_prefix: Vec::new(),
                });
                open.insert(key, flows.len() - 1);
                flows.len() - 1
            }
        };
        let flow = &mut flows[idx];
        flow.packets.push(PacketMeta {
            timestamp: p.timestamp,
            payload_len: p.payload.len(),
            tcp_window: t.window,
            direction: u8::from(src != flow.initiator),
        });
        let room = prefix_limit.saturating_sub(flow.payload_prefix.len());
        flow.payload_prefix.extend(p.payload.iter().take(room));
    }
    flows.sort_by(|a, b| a.packets[0].timestamp.total_cmp(&b.packets[0].timestamp).then(a.key.cmp(&b.key)));
    FlowAssembly { flows, skipped }
}
