//! Bidirectional flow assembly keyed by five-tuple, connection-state
//! summarization and the four derived flow features.
//!
//! Orientation is fixed by the first-seen packet: its sender is the
//! originator. Reverse-direction packets join the same flow. Flows end on
//! idle timeout (TCP 300 s, UDP/ICMP 60 s by default) or end-of-capture;
//! a closed TCP flow (both FINs, or RST) is also retired early when a fresh
//! SYN reuses its tuple.

use crate::error::Result;
use crate::pcap::{IpVersion, ParsedPacket, ProtocolIndicators, TcpFlags};
use std::collections::HashMap;
use std::net::IpAddr;

pub const TCP_IDLE_TIMEOUT: f64 = 300.0;
pub const UDP_IDLE_TIMEOUT: f64 = 60.0;

/// Oriented five-tuple: originator first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowKey {
    pub orig_ip: IpAddr,
    pub resp_ip: IpAddr,
    pub orig_port: u16,
    pub resp_port: u16,
    pub protocol_type: u8,
}

/// Direction-agnostic lookup key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CanonicalKey {
    lo: (IpAddr, u16),
    hi: (IpAddr, u16),
    protocol_type: u8,
}

impl CanonicalKey {
    fn of(src: IpAddr, sport: u16, dst: IpAddr, dport: u16, proto: u8) -> Self {
        let a = (src, sport);
        let b = (dst, dport);
        if a <= b {
            Self {
                lo: a,
                hi: b,
                protocol_type: proto,
            }
        } else {
            Self {
                lo: b,
                hi: a,
                protocol_type: proto,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    S0,
    S1,
    SF,
    Rej,
    Rsto,
    Rstr,
    Oth,
}

impl ConnState {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConnState::S0 => "S0",
            ConnState::S1 => "S1",
            ConnState::SF => "SF",
            ConnState::Rej => "REJ",
            ConnState::Rsto => "RSTO",
            ConnState::Rstr => "RSTR",
            ConnState::Oth => "OTH",
        }
    }
}

/// Application service, resolved from protocol indicators in priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Service {
    Http,
    Https,
    Dns,
    Dhcp,
    Ssh,
    Telnet,
    Smtp,
    Irc,
    None,
}

impl Service {
    pub fn as_str(&self) -> &'static str {
        match self {
            Service::Http => "http",
            Service::Https => "https",
            Service::Dns => "dns",
            Service::Dhcp => "dhcp",
            Service::Ssh => "ssh",
            Service::Telnet => "telnet",
            Service::Smtp => "smtp",
            Service::Irc => "irc",
            Service::None => "none",
        }
    }

    fn from_indicators(ind: ProtocolIndicators) -> Self {
        const PRIORITY: [(u16, Service); 8] = [
            (ProtocolIndicators::HTTP, Service::Http),
            (ProtocolIndicators::HTTPS, Service::Https),
            (ProtocolIndicators::DNS, Service::Dns),
            (ProtocolIndicators::DHCP, Service::Dhcp),
            (ProtocolIndicators::SSH, Service::Ssh),
            (ProtocolIndicators::TELNET, Service::Telnet),
            (ProtocolIndicators::SMTP, Service::Smtp),
            (ProtocolIndicators::IRC, Service::Irc),
        ];
        for (bit, service) in PRIORITY {
            if ind.has(bit) {
                return service;
            }
        }
        Service::None
    }
}

/// One finalized connection record.
#[derive(Debug, Clone)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub ts: f64,
    pub duration: f64,
    pub orig_bytes: u64,
    pub resp_bytes: u64,
    pub orig_ip_bytes: u64,
    pub resp_ip_bytes: u64,
    pub orig_pkts: u64,
    pub resp_pkts: u64,
    pub missed_bytes: u64,
    pub conn_state: ConnState,
    pub history: String,
    pub service: Service,
    pub local_orig: bool,
    pub local_resp: bool,
    pub tunnel_parents: String,
}

/// The four derived flow features. The +1 denominators forbid division by
/// zero by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedFeatures {
    pub byte_ratio: f64,
    pub orig_pkt_rate: f64,
    pub orig_byte_rate: f64,
    pub direction: f64,
}

/// Compute the derived features of a finalized flow. Pure.
pub fn derive(rec: &FlowRecord) -> DerivedFeatures {
    DerivedFeatures {
        byte_ratio: rec.orig_bytes as f64 / (rec.resp_bytes as f64 + 1.0),
        orig_pkt_rate: rec.orig_pkts as f64 / (rec.duration + 1.0),
        orig_byte_rate: rec.orig_ip_bytes as f64 / (rec.duration + 1.0),
        direction: rec.orig_bytes as f64 - rec.resp_bytes as f64,
    }
}

#[derive(Debug)]
struct FlowState {
    key: FlowKey,
    ts: f64,
    last_ts: f64,
    orig_bytes: u64,
    resp_bytes: u64,
    orig_ip_bytes: u64,
    resp_ip_bytes: u64,
    orig_pkts: u64,
    resp_pkts: u64,
    history: String,
    indicators: ProtocolIndicators,
    saw_orig_syn: bool,
    saw_resp_synack: bool,
    established: bool,
    fin_orig: bool,
    fin_resp: bool,
    rst_orig: bool,
    rst_resp: bool,
}

impl FlowState {
    fn new(pkt: &ParsedPacket) -> Self {
        let mut state = Self {
            key: FlowKey {
                orig_ip: pkt.src_ip,
                resp_ip: pkt.dst_ip,
                orig_port: pkt.src_port,
                resp_port: pkt.dst_port,
                protocol_type: pkt.protocol_type,
            },
            ts: pkt.timestamp,
            last_ts: pkt.timestamp,
            orig_bytes: 0,
            resp_bytes: 0,
            orig_ip_bytes: 0,
            resp_ip_bytes: 0,
            orig_pkts: 0,
            resp_pkts: 0,
            history: String::new(),
            indicators: ProtocolIndicators::default(),
            saw_orig_syn: false,
            saw_resp_synack: false,
            established: false,
            fin_orig: false,
            fin_resp: false,
            rst_orig: false,
            rst_resp: false,
        };
        state.update(pkt);
        state
    }

    fn is_orig(&self, pkt: &ParsedPacket) -> bool {
        pkt.src_ip == self.key.orig_ip && pkt.src_port == self.key.orig_port
    }

    fn closed(&self) -> bool {
        (self.fin_orig && self.fin_resp) || self.rst_orig || self.rst_resp
    }

    fn update(&mut self, pkt: &ParsedPacket) {
        let from_orig = self.is_orig(pkt);
        self.last_ts = pkt.timestamp;
        self.indicators.0 |= pkt.indicators.0;
        let ip_len = pkt.ip_total_bytes as u64;
        if from_orig {
            self.orig_pkts += 1;
            self.orig_bytes += pkt.payload_length as u64;
            self.orig_ip_bytes += ip_len;
        } else {
            self.resp_pkts += 1;
            self.resp_bytes += pkt.payload_length as u64;
            self.resp_ip_bytes += ip_len;
        }

        let f = pkt.tcp_flags;
        let is_tcp = pkt.protocol_type == 6;
        if is_tcp {
            if from_orig && f.has(TcpFlags::SYN) && !f.has(TcpFlags::ACK) {
                self.saw_orig_syn = true;
            }
            if !from_orig && f.has(TcpFlags::SYN) {
                self.saw_resp_synack = true;
            }
            if from_orig && f.has(TcpFlags::ACK) && self.saw_resp_synack {
                self.established = true;
            }
            if f.has(TcpFlags::FIN) {
                if from_orig {
                    self.fin_orig = true;
                } else {
                    self.fin_resp = true;
                }
            }
            if f.has(TcpFlags::RST) {
                if from_orig {
                    self.rst_orig = true;
                } else {
                    self.rst_resp = true;
                }
            }
        }

        // History letter per packet, first occurrence only; uppercase for the
        // originator direction.
        let letter = if is_tcp && f.has(TcpFlags::SYN) && !f.has(TcpFlags::ACK) && from_orig {
            Some('S')
        } else if is_tcp && f.has(TcpFlags::SYN) && !from_orig {
            Some('h')
        } else if is_tcp && f.has(TcpFlags::RST) {
            Some(if from_orig { 'R' } else { 'r' })
        } else if is_tcp && f.has(TcpFlags::FIN) {
            Some(if from_orig { 'F' } else { 'f' })
        } else if pkt.payload_length > 0 {
            Some(if from_orig { 'D' } else { 'd' })
        } else if is_tcp && f.has(TcpFlags::ACK) {
            Some(if from_orig { 'A' } else { 'a' })
        } else {
            None
        };
        if let Some(c) = letter {
            if !self.history.contains(c) {
                self.history.push(c);
            }
        }
    }

    fn conn_state(&self) -> ConnState {
        if self.key.protocol_type != 6 {
            return ConnState::Oth;
        }
        if self.established {
            if self.rst_orig {
                ConnState::Rsto
            } else if self.rst_resp {
                ConnState::Rstr
            } else if self.fin_orig && self.fin_resp {
                ConnState::SF
            } else {
                ConnState::S1
            }
        } else if self.saw_orig_syn && self.resp_pkts == 0 {
            ConnState::S0
        } else if self.saw_orig_syn && self.rst_resp {
            ConnState::Rej
        } else {
            ConnState::Oth
        }
    }

    fn finalize(self, local_net: &dyn Fn(IpAddr) -> bool) -> FlowRecord {
        FlowRecord {
            ts: self.ts,
            duration: self.last_ts - self.ts,
            orig_bytes: self.orig_bytes,
            resp_bytes: self.resp_bytes,
            orig_ip_bytes: self.orig_ip_bytes,
            resp_ip_bytes: self.resp_ip_bytes,
            orig_pkts: self.orig_pkts,
            resp_pkts: self.resp_pkts,
            missed_bytes: 0,
            conn_state: self.conn_state(),
            history: self.history,
            service: Service::from_indicators(self.indicators),
            local_orig: local_net(self.key.orig_ip),
            local_resp: local_net(self.key.resp_ip),
            tunnel_parents: String::new(),
            key: self.key,
        }
    }
}

/// True for RFC1918 IPv4 ranges and IPv6 unique-local/link-local addresses.
pub fn is_local_address(addr: IpAddr) -> bool {
    match addr {
        IpAddr::V4(v4) => {
            let o = v4.octets();
            o[0] == 10
                || (o[0] == 172 && (16..=31).contains(&o[1]))
                || (o[0] == 192 && o[1] == 168)
        }
        IpAddr::V6(v6) => {
            let s = v6.segments();
            (s[0] & 0xfe00) == 0xfc00 || (s[0] & 0xffc0) == 0xfe80
        }
    }
}

/// Single-writer table of live flows.
pub struct FlowTable {
    live: HashMap<CanonicalKey, FlowState>,
    finished: Vec<FlowRecord>,
    tcp_timeout: f64,
    udp_timeout: f64,
}

impl Default for FlowTable {
    fn default() -> Self {
        Self::new(TCP_IDLE_TIMEOUT, UDP_IDLE_TIMEOUT)
    }
}

impl FlowTable {
    pub fn new(tcp_timeout: f64, udp_timeout: f64) -> Self {
        Self {
            live: HashMap::new(),
            finished: Vec::new(),
            tcp_timeout,
            udp_timeout,
        }
    }

    /// Assign a decoded packet to its flow, creating one if needed. Non-IP
    /// packets (ARP, LLC) carry no five-tuple and are not assigned.
    pub fn assign_packet(&mut self, pkt: &ParsedPacket) -> Option<FlowKey> {
        if pkt.ip_version == IpVersion::None {
            return None;
        }
        let canon = CanonicalKey::of(
            pkt.src_ip,
            pkt.src_port,
            pkt.dst_ip,
            pkt.dst_port,
            pkt.protocol_type,
        );
        let timeout = if pkt.protocol_type == 6 {
            self.tcp_timeout
        } else {
            self.udp_timeout
        };
        if let Some(state) = self.live.get_mut(&canon) {
            let idle = pkt.timestamp - state.last_ts;
            let fresh_syn = pkt.protocol_type == 6
                && pkt.tcp_flags.has(TcpFlags::SYN)
                && !pkt.tcp_flags.has(TcpFlags::ACK);
            if idle > timeout || (state.closed() && fresh_syn) {
                let done = self.live.remove(&canon).expect("live flow present");
                self.finished.push(done.finalize(&is_local_address));
            } else {
                state.update(pkt);
                return Some(state.key.clone());
            }
        }
        let state = FlowState::new(pkt);
        let key = state.key.clone();
        self.live.insert(canon, state);
        Some(key)
    }

    /// Flush all live flows (end of capture) and return every finalized
    /// record ordered by (ts, key).
    pub fn finish(mut self) -> Vec<FlowRecord> {
        let mut live: Vec<FlowState> = self.live.drain().map(|(_, v)| v).collect();
        live.sort_by(|a, b| a.ts.total_cmp(&b.ts));
        for state in live {
            self.finished.push(state.finalize(&is_local_address));
        }
        let mut records = self.finished;
        records.sort_by(|a, b| {
            a.ts.total_cmp(&b.ts).then_with(|| {
                let ka = (
                    &a.key.orig_ip,
                    a.key.orig_port,
                    &a.key.resp_ip,
                    a.key.resp_port,
                    a.key.protocol_type,
                );
                let kb = (
                    &b.key.orig_ip,
                    b.key.orig_port,
                    &b.key.resp_ip,
                    b.key.resp_port,
                    b.key.protocol_type,
                );
                ka.cmp(&kb)
            })
        });
        records
    }
}

/// Run a decoded packet sequence through a flow table.
pub fn assemble_flows(packets: &[ParsedPacket]) -> Result<Vec<FlowRecord>> {
    let mut table = FlowTable::default();
    for pkt in packets {
        table.assign_packet(pkt);
    }
    Ok(table.finish())
}

/// Flow CSV header: connection identifiers, then the retained flow features
/// in canonical order.
pub const FLOW_CSV_COLUMNS: [&str; 21] = [
    "ts",
    "uid",
    "id.orig_h",
    "id.orig_p",
    "id.resp_h",
    "id.resp_p",
    "proto",
    "conn_state",
    "duration",
    "history",
    "local_orig",
    "local_resp",
    "missed_bytes",
    "orig_bytes",
    "orig_ip_bytes",
    "orig_pkts",
    "service",
    "resp_bytes",
    "resp_ip_bytes",
    "resp_pkts",
    "tunnel_parents",
];

pub fn proto_name(protocol_type: u8) -> &'static str {
    match protocol_type {
        6 => "tcp",
        17 => "udp",
        1 => "icmp",
        58 => "icmp6",
        2 => "igmp",
        _ => "other",
    }
}

pub fn proto_number(name: &str) -> u8 {
    match name {
        "tcp" => 6,
        "udp" => 17,
        "icmp" => 1,
        "icmp6" => 58,
        "igmp" => 2,
        _ => 0,
    }
}

/// Write finalized flows with deterministic uids (`C` + 1-based index).
pub fn write_flow_csv(records: &[FlowRecord], path: &std::path::Path) -> Result<()> {
    use crate::schema::format_num;
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(FLOW_CSV_COLUMNS)?;
    for (i, rec) in records.iter().enumerate() {
        let tf = |b: bool| if b { "T" } else { "F" };
        wtr.write_record([
            format_num(rec.ts).as_str(),
            &format!("C{:06}", i + 1),
            &rec.key.orig_ip.to_string(),
            &rec.key.orig_port.to_string(),
            &rec.key.resp_ip.to_string(),
            &rec.key.resp_port.to_string(),
            proto_name(rec.key.protocol_type),
            rec.conn_state.as_str(),
            &format_num(rec.duration),
            &rec.history,
            tf(rec.local_orig),
            tf(rec.local_resp),
            &rec.missed_bytes.to_string(),
            &rec.orig_bytes.to_string(),
            &rec.orig_ip_bytes.to_string(),
            &rec.orig_pkts.to_string(),
            rec.service.as_str(),
            &rec.resp_bytes.to_string(),
            &rec.resp_ip_bytes.to_string(),
            &rec.resp_pkts.to_string(),
            &rec.tunnel_parents,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_service(s: &str) -> Service {
    match s {
        "http" => Service::Http,
        "https" => Service::Https,
        "dns" => Service::Dns,
        "dhcp" => Service::Dhcp,
        "ssh" => Service::Ssh,
        "telnet" => Service::Telnet,
        "smtp" => Service::Smtp,
        "irc" => Service::Irc,
        _ => Service::None,
    }
}

fn parse_conn_state(s: &str) -> ConnState {
    match s {
        "S0" => ConnState::S0,
        "S1" => ConnState::S1,
        "SF" => ConnState::SF,
        "REJ" => ConnState::Rej,
        "RSTO" => ConnState::Rsto,
        "RSTR" => ConnState::Rstr,
        _ => ConnState::Oth,
    }
}

/// Read a flow CSV back into (uid, record) pairs.
pub fn read_flow_csv(path: &std::path::Path) -> Result<Vec<(String, FlowRecord)>> {
    use crate::error::Error;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("flow CSV missing column {name:?}")))
    };
    let mut idx = Vec::with_capacity(FLOW_CSV_COLUMNS.len());
    for name in FLOW_CSV_COLUMNS {
        idx.push(col(name)?);
    }
    let get = |rec: &csv::StringRecord, i: usize| -> Result<String> {
        rec.get(idx[i])
            .map(str::to_string)
            .ok_or_else(|| Error::SchemaMismatch("short flow CSV record".into()))
    };
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::SchemaMismatch(format!("flow CSV: bad number {s:?}")))
    };
    let int = |s: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::SchemaMismatch(format!("flow CSV: bad integer {s:?}")))
    };
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let ip = |s: String| -> Result<IpAddr> {
            s.parse()
                .map_err(|_| Error::SchemaMismatch(format!("flow CSV: bad address {s:?}")))
        };
        let port = |s: String| -> Result<u16> {
            s.parse()
                .map_err(|_| Error::SchemaMismatch(format!("flow CSV: bad port {s:?}")))
        };
        let rec = FlowRecord {
            ts: num(&get(&record, 0)?)?,
            key: FlowKey {
                orig_ip: ip(get(&record, 2)?)?,
                orig_port: port(get(&record, 3)?)?,
                resp_ip: ip(get(&record, 4)?)?,
                resp_port: port(get(&record, 5)?)?,
                protocol_type: proto_number(&get(&record, 6)?),
            },
            conn_state: parse_conn_state(&get(&record, 7)?),
            duration: num(&get(&record, 8)?)?,
            history: get(&record, 9)?,
            local_orig: get(&record, 10)? == "T",
            local_resp: get(&record, 11)? == "T",
            missed_bytes: int(&get(&record, 12)?)?,
            orig_bytes: int(&get(&record, 13)?)?,
            orig_ip_bytes: int(&get(&record, 14)?)?,
            orig_pkts: int(&get(&record, 15)?)?,
            service: parse_service(&get(&record, 16)?),
            resp_bytes: int(&get(&record, 17)?)?,
            resp_ip_bytes: int(&get(&record, 18)?)?,
            resp_pkts: int(&get(&record, 19)?)?,
            tunnel_parents: get(&record, 20)?,
        };
        out.push((get(&record, 1)?, rec));
    }
    Ok(out)
}
