//! Classic libpcap capture reading and link/network/transport header decoding.
//!
//! Only the classic pcap container is supported (both byte orders, micro- and
//! nanosecond timestamp variants); pcapng is rejected up front. Decoding walks
//! Ethernet -> (ARP | IPv4 | IPv6) -> (TCP | UDP | ICMP | IGMP) and never
//! stores or inspects payload bytes beyond measuring their length.

use crate::error::{Error, Result};
use std::fs;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

pub const LINKTYPE_ETHERNET: u32 = 1;

pub const MAGIC_LE_MICRO: u32 = 0xa1b2_c3d4;
pub const MAGIC_BE_MICRO: u32 = 0xd4c3_b2a1;
pub const MAGIC_LE_NANO: u32 = 0xa1b2_3c4d;
pub const MAGIC_BE_NANO: u32 = 0x4d3c_b2a1;
pub const MAGIC_PCAPNG: u32 = 0x0a0d_0d0a;

/// One record straight out of a capture file.
#[derive(Debug, Clone)]
pub struct RawPacket {
    pub ts_sec: u32,
    /// Sub-second part in the file's native resolution, already scaled to
    /// fractional seconds by [`RawPacket::timestamp`].
    pub ts_frac: f64,
    pub captured_length: u32,
    pub original_length: u32,
    pub data: Vec<u8>,
}

impl RawPacket {
    /// Capture timestamp as fractional seconds since the epoch.
    pub fn timestamp(&self) -> f64 {
        self.ts_sec as f64 + self.ts_frac
    }
}

/// TCP flag bits, one bit per flag in header order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
    pub const ECE: u8 = 0x40;
    pub const CWR: u8 = 0x80;

    pub fn has(&self, bit: u8) -> bool {
        self.0 & bit != 0
    }
}

/// Protocol presence indicators observed on one packet.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProtocolIndicators(pub u16);

impl ProtocolIndicators {
    pub const ARP: u16 = 1 << 0;
    pub const LLC: u16 = 1 << 1;
    pub const HTTP: u16 = 1 << 2;
    pub const HTTPS: u16 = 1 << 3;
    pub const DNS: u16 = 1 << 4;
    pub const DHCP: u16 = 1 << 5;
    pub const SSH: u16 = 1 << 6;
    pub const TELNET: u16 = 1 << 7;
    pub const SMTP: u16 = 1 << 8;
    pub const IRC: u16 = 1 << 9;
    pub const ICMP: u16 = 1 << 10;
    pub const IGMP: u16 = 1 << 11;
    pub const TCP: u16 = 1 << 12;
    pub const UDP: u16 = 1 << 13;

    pub fn has(&self, bit: u16) -> bool {
        self.0 & bit != 0
    }

    fn set(&mut self, bit: u16) {
        self.0 |= bit;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpVersion {
    V4,
    V6,
    None,
}

impl IpVersion {
    pub fn as_u8(&self) -> u8 {
        match self {
            IpVersion::V4 => 4,
            IpVersion::V6 => 6,
            IpVersion::None => 0,
        }
    }
}

/// A decoded packet: header fields only, payload measured but never kept.
#[derive(Debug, Clone)]
pub struct ParsedPacket {
    pub timestamp: f64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    /// IP protocol number; 0 for ARP and LLC frames.
    pub protocol_type: u8,
    /// Sum of link + IP + transport header lengths in bytes.
    pub header_length: u32,
    /// On-wire frame length (the record's original length).
    pub total_size: u32,
    /// IP-layer byte count from the IP header's own length field; 0 for
    /// non-IP frames.
    pub ip_total_bytes: u32,
    pub ttl: u8,
    pub ip_version: IpVersion,
    pub tcp_flags: TcpFlags,
    pub payload_length: u32,
    pub indicators: ProtocolIndicators,
}

const ZERO_V4: IpAddr = IpAddr::V4(Ipv4Addr::UNSPECIFIED);

/// Read a classic pcap file into raw packets, in file order.
pub fn read_capture(path: &Path) -> Result<Vec<RawPacket>> {
    let bytes = fs::read(path)?;
    parse_capture(&bytes)
}

/// Parse classic pcap bytes. Honors the declared byte order and timestamp
/// resolution; requires an Ethernet link type.
pub fn parse_capture(bytes: &[u8]) -> Result<Vec<RawPacket>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile(format!(
            "file has {} bytes, magic number absent",
            bytes.len()
        )));
    }
    let magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (big_endian, nanos) = match magic {
        MAGIC_LE_MICRO => (false, false),
        MAGIC_LE_NANO => (false, true),
        MAGIC_BE_MICRO => (true, false),
        MAGIC_BE_NANO => (true, true),
        MAGIC_PCAPNG => {
            return Err(Error::UnsupportedFormat(
                "pcapng container; only classic pcap is supported".into(),
            ))
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "unrecognized magic number {other:#010x}"
            )))
        }
    };
    if bytes.len() < 24 {
        return Err(Error::TruncatedFile("global header incomplete".into()));
    }
    let read_u32 = |buf: &[u8], off: usize| -> u32 {
        let b = [buf[off], buf[off + 1], buf[off + 2], buf[off + 3]];
        if big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    };
    let linktype = read_u32(bytes, 20);
    if linktype != LINKTYPE_ETHERNET {
        return Err(Error::UnsupportedFormat(format!(
            "link type {linktype} (only Ethernet is supported)"
        )));
    }

    let mut packets = Vec::new();
    let mut off = 24;
    while off < bytes.len() {
        if bytes.len() - off < 16 {
            return Err(Error::TruncatedFile(format!(
                "record header at offset {off} exceeds remaining bytes"
            )));
        }
        let ts_sec = read_u32(bytes, off);
        let ts_sub = read_u32(bytes, off + 4);
        let incl_len = read_u32(bytes, off + 8);
        let orig_len = read_u32(bytes, off + 12);
        off += 16;
        let incl = incl_len as usize;
        if bytes.len() - off < incl {
            return Err(Error::TruncatedFile(format!(
                "record body at offset {off} wants {incl} bytes, {} remain",
                bytes.len() - off
            )));
        }
        let data = bytes[off..off + incl].to_vec();
        off += incl;
        let ts_frac = if nanos {
            ts_sub as f64 * 1e-9
        } else {
            ts_sub as f64 * 1e-6
        };
        packets.push(RawPacket {
            ts_sec,
            ts_frac,
            captured_length: incl_len,
            original_length: orig_len.max(incl_len),
            data,
        });
    }
    Ok(packets)
}

/// Decode an Ethernet frame into a [`ParsedPacket`]. Total over its input:
/// returns `Decode` for malformed frames, never panics.
pub fn decode_packet(pkt: &RawPacket) -> Result<ParsedPacket> {
    let data = &pkt.data[..];
    if data.len() < 14 {
        return Err(Error::Decode(format!(
            "frame of {} bytes is shorter than an Ethernet header",
            data.len()
        )));
    }
    let mut ethertype = u16::from_be_bytes([data[12], data[13]]);
    let mut off = 14usize;
    // Single 802.1Q tag is unwrapped; stacked tags (QinQ) are rejected.
    if ethertype == 0x8100 {
        if data.len() < off + 4 {
            return Err(Error::Decode("truncated 802.1Q tag".into()));
        }
        ethertype = u16::from_be_bytes([data[off + 2], data[off + 3]]);
        off += 4;
        if ethertype == 0x8100 || ethertype == 0x88a8 {
            return Err(Error::Decode("stacked VLAN tags (QinQ) unsupported".into()));
        }
    } else if ethertype == 0x88a8 {
        return Err(Error::Decode("stacked VLAN tags (QinQ) unsupported".into()));
    }

    let mut parsed = ParsedPacket {
        timestamp: pkt.timestamp(),
        src_ip: ZERO_V4,
        dst_ip: ZERO_V4,
        src_port: 0,
        dst_port: 0,
        protocol_type: 0,
        header_length: off as u32,
        total_size: pkt.original_length,
        ip_total_bytes: 0,
        ttl: 0,
        ip_version: IpVersion::None,
        tcp_flags: TcpFlags::default(),
        payload_length: 0,
        indicators: ProtocolIndicators::default(),
    };

    if ethertype < 0x0600 {
        // 802.3 length-typed frame: LLC. Everything past the MAC header is
        // counted as payload, not decoded.
        parsed.indicators.set(ProtocolIndicators::LLC);
        parsed.payload_length = (data.len() - off) as u32;
        return Ok(parsed);
    }

    match ethertype {
        0x0806 => decode_arp(data, off, parsed),
        0x0800 => decode_ipv4(data, off, parsed),
        0x86dd => decode_ipv6(data, off, parsed),
        other => Err(Error::Decode(format!("unsupported EtherType {other:#06x}"))),
    }
}

fn decode_arp(data: &[u8], off: usize, mut parsed: ParsedPacket) -> Result<ParsedPacket> {
    // Ethernet/IPv4 ARP message is 28 bytes and is all header.
    if data.len() < off + 28 {
        return Err(Error::Decode("truncated ARP message".into()));
    }
    parsed.indicators.set(ProtocolIndicators::ARP);
    parsed.header_length = (off + 28) as u32;
    parsed.payload_length = (data.len() - off - 28) as u32;
    Ok(parsed)
}

fn decode_ipv4(data: &[u8], off: usize, mut parsed: ParsedPacket) -> Result<ParsedPacket> {
    if data.len() < off + 20 {
        return Err(Error::Decode("truncated IPv4 header".into()));
    }
    let vihl = data[off];
    if vihl >> 4 != 4 {
        return Err(Error::Decode(format!(
            "IPv4 EtherType with IP version {}",
            vihl >> 4
        )));
    }
    let ihl = ((vihl & 0x0f) as usize) * 4;
    if ihl < 20 {
        return Err(Error::Decode(format!("IPv4 header length {ihl} < 20")));
    }
    if data.len() < off + ihl {
        return Err(Error::Decode("IPv4 header length exceeds frame".into()));
    }
    let total_len = u16::from_be_bytes([data[off + 2], data[off + 3]]) as u32;
    parsed.ip_total_bytes = total_len;
    let frag = u16::from_be_bytes([data[off + 6], data[off + 7]]);
    let frag_offset = frag & 0x1fff;
    parsed.ttl = data[off + 8];
    let proto = data[off + 9];
    parsed.protocol_type = proto;
    parsed.ip_version = IpVersion::V4;
    parsed.src_ip = IpAddr::V4(Ipv4Addr::new(
        data[off + 12],
        data[off + 13],
        data[off + 14],
        data[off + 15],
    ));
    parsed.dst_ip = IpAddr::V4(Ipv4Addr::new(
        data[off + 16],
        data[off + 17],
        data[off + 18],
        data[off + 19],
    ));
    parsed.header_length += ihl as u32;
    let ip_payload = total_len.saturating_sub(ihl as u32);
    if frag_offset > 0 {
        // Non-first fragment: transport header lives in an earlier fragment.
        parsed.payload_length = ip_payload;
        set_protocol_number_indicators(&mut parsed, proto);
        return Ok(parsed);
    }
    decode_transport(data, off + ihl, ip_payload, proto, parsed)
}

fn decode_ipv6(data: &[u8], off: usize, mut parsed: ParsedPacket) -> Result<ParsedPacket> {
    if data.len() < off + 40 {
        return Err(Error::Decode("truncated IPv6 header".into()));
    }
    if data[off] >> 4 != 6 {
        return Err(Error::Decode(format!(
            "IPv6 EtherType with IP version {}",
            data[off] >> 4
        )));
    }
    let payload_len = u16::from_be_bytes([data[off + 4], data[off + 5]]) as u32;
    parsed.ip_total_bytes = 40 + payload_len;
    let mut next = data[off + 6];
    parsed.ttl = data[off + 7]; // hop limit
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&data[off + 8..off + 24]);
    dst.copy_from_slice(&data[off + 24..off + 40]);
    parsed.src_ip = IpAddr::V6(Ipv6Addr::from(src));
    parsed.dst_ip = IpAddr::V6(Ipv6Addr::from(dst));
    parsed.ip_version = IpVersion::V6;
    parsed.header_length += 40;

    let mut cursor = off + 40;
    let mut remaining = payload_len;
    // Walk hop-by-hop / routing / destination-options chains.
    loop {
        match next {
            0 | 43 | 60 => {
                if data.len() < cursor + 2 {
                    return Err(Error::Decode("truncated IPv6 extension header".into()));
                }
                let ext_len = ((data[cursor + 1] as usize) + 1) * 8;
                if data.len() < cursor + ext_len {
                    return Err(Error::Decode("IPv6 extension header exceeds frame".into()));
                }
                next = data[cursor];
                cursor += ext_len;
                parsed.header_length += ext_len as u32;
                remaining = remaining.saturating_sub(ext_len as u32);
            }
            44 => {
                // Fragment header: stop at the network layer.
                parsed.protocol_type = next;
                parsed.payload_length = remaining;
                return Ok(parsed);
            }
            _ => break,
        }
    }
    decode_transport(data, cursor, remaining, next, parsed)
}

fn decode_transport(
    data: &[u8],
    off: usize,
    ip_payload: u32,
    proto: u8,
    mut parsed: ParsedPacket,
) -> Result<ParsedPacket> {
    parsed.protocol_type = proto;
    set_protocol_number_indicators(&mut parsed, proto);
    match proto {
        6 => {
            if data.len() < off + 20 {
                return Err(Error::Decode("truncated TCP header".into()));
            }
            parsed.src_port = u16::from_be_bytes([data[off], data[off + 1]]);
            parsed.dst_port = u16::from_be_bytes([data[off + 2], data[off + 3]]);
            let doff = ((data[off + 12] >> 4) as u32) * 4;
            if doff < 20 {
                return Err(Error::Decode(format!("TCP data offset {doff} < 20")));
            }
            parsed.tcp_flags = TcpFlags(data[off + 13]);
            parsed.header_length += doff;
            parsed.payload_length = ip_payload.saturating_sub(doff);
            set_port_indicators(&mut parsed);
        }
        17 => {
            if data.len() < off + 8 {
                return Err(Error::Decode("truncated UDP header".into()));
            }
            parsed.src_port = u16::from_be_bytes([data[off], data[off + 1]]);
            parsed.dst_port = u16::from_be_bytes([data[off + 2], data[off + 3]]);
            let udp_len = u16::from_be_bytes([data[off + 4], data[off + 5]]) as u32;
            parsed.header_length += 8;
            parsed.payload_length = udp_len.saturating_sub(8);
            set_port_indicators(&mut parsed);
        }
        1 | 58 => {
            if data.len() < off + 8 {
                return Err(Error::Decode("truncated ICMP header".into()));
            }
            parsed.header_length += 8;
            parsed.payload_length = ip_payload.saturating_sub(8);
        }
        2 => {
            if data.len() < off + 8 {
                return Err(Error::Decode("truncated IGMP message".into()));
            }
            parsed.header_length += 8;
            parsed.payload_length = ip_payload.saturating_sub(8);
        }
        _ => {
            // Unknown transport: whole IP payload counts as payload.
            parsed.payload_length = ip_payload;
        }
    }
    Ok(parsed)
}

fn set_protocol_number_indicators(parsed: &mut ParsedPacket, proto: u8) {
    match proto {
        6 => parsed.indicators.set(ProtocolIndicators::TCP),
        17 => parsed.indicators.set(ProtocolIndicators::UDP),
        1 | 58 => parsed.indicators.set(ProtocolIndicators::ICMP),
        2 => parsed.indicators.set(ProtocolIndicators::IGMP),
        _ => {}
    }
}

/// Application indicators from well-known source-or-destination ports on
/// TCP/UDP. The capture never exposes payload, so ports are the only signal.
fn set_port_indicators(parsed: &mut ParsedPacket) {
    const RULES: [(u16, u16); 9] = [
        (80, ProtocolIndicators::HTTP),
        (443, ProtocolIndicators::HTTPS),
        (53, ProtocolIndicators::DNS),
        (67, ProtocolIndicators::DHCP),
        (68, ProtocolIndicators::DHCP),
        (22, ProtocolIndicators::SSH),
        (23, ProtocolIndicators::TELNET),
        (25, ProtocolIndicators::SMTP),
        (6667, ProtocolIndicators::IRC),
    ];
    for (port, bit) in RULES {
        if parsed.src_port == port || parsed.dst_port == port {
            parsed.indicators.set(bit);
        }
    }
}

pub mod testutil {
    //! Hand-assembly helpers for capture fixtures used across the test suites.

    /// Build a classic pcap file from (ts_sec, ts_sub, frame) records.
    pub fn build_pcap(magic: u32, linktype: u32, records: &[(u32, u32, Vec<u8>)]) -> Vec<u8> {
        let big_endian = matches!(magic, super::MAGIC_BE_MICRO | super::MAGIC_BE_NANO);
        let put = |out: &mut Vec<u8>, v: u32| {
            if big_endian {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        let mut out = Vec::new();
        out.extend_from_slice(&magic.to_le_bytes());
        let (maj, min) = (2u16, 4u16);
        if big_endian {
            out.extend_from_slice(&maj.to_be_bytes());
            out.extend_from_slice(&min.to_be_bytes());
        } else {
            out.extend_from_slice(&maj.to_le_bytes());
            out.extend_from_slice(&min.to_le_bytes());
        }
        put(&mut out, 0); // thiszone
        put(&mut out, 0); // sigfigs
        put(&mut out, 65535); // snaplen
        put(&mut out, linktype);
        for (sec, sub, frame) in records {
            put(&mut out, *sec);
            put(&mut out, *sub);
            put(&mut out, frame.len() as u32);
            put(&mut out, frame.len() as u32);
            out.extend_from_slice(frame);
        }
        out
    }

    /// Ethernet + IPv4 + TCP frame with the given addressing, flags and
    /// payload length. TTL fixed unless overridden.
    pub struct TcpFrame {
        pub src: [u8; 4],
        pub dst: [u8; 4],
        pub sport: u16,
        pub dport: u16,
        pub flags: u8,
        pub payload_len: usize,
        pub ttl: u8,
    }

    impl Default for TcpFrame {
        fn default() -> Self {
            Self {
                src: [192, 168, 1, 10],
                dst: [93, 184, 216, 34],
                sport: 49152,
                dport: 80,
                flags: super::TcpFlags::SYN,
                payload_len: 0,
                ttl: 64,
            }
        }
    }

    pub fn ethernet(ethertype: u16, body: &[u8]) -> Vec<u8> {
        let mut f = vec![0u8; 12];
        f.extend_from_slice(&ethertype.to_be_bytes());
        f.extend_from_slice(body);
        f
    }

    pub fn ipv4(proto: u8, ttl: u8, src: [u8; 4], dst: [u8; 4], body: &[u8]) -> Vec<u8> {
        let total = 20 + body.len() as u16;
        let mut h = vec![0x45, 0x00];
        h.extend_from_slice(&total.to_be_bytes());
        h.extend_from_slice(&[0, 0, 0, 0]); // id, frag
        h.push(ttl);
        h.push(proto);
        h.extend_from_slice(&[0, 0]); // checksum (unverified)
        h.extend_from_slice(&src);
        h.extend_from_slice(&dst);
        h.extend_from_slice(body);
        h
    }

    pub fn tcp(sport: u16, dport: u16, flags: u8, payload_len: usize) -> Vec<u8> {
        let mut h = Vec::with_capacity(20 + payload_len);
        h.extend_from_slice(&sport.to_be_bytes());
        h.extend_from_slice(&dport.to_be_bytes());
        h.extend_from_slice(&[0, 0, 0, 1]); // seq
        h.extend_from_slice(&[0, 0, 0, 0]); // ack
        h.push(5 << 4); // data offset 5 words
        h.push(flags);
        h.extend_from_slice(&[0x20, 0x00]); // window
        h.extend_from_slice(&[0, 0, 0, 0]); // checksum, urgent
        h.extend(std::iter::repeat(0u8).take(payload_len));
        h
    }

    pub fn udp(sport: u16, dport: u16, payload_len: usize) -> Vec<u8> {
        let mut h = Vec::with_capacity(8 + payload_len);
        h.extend_from_slice(&sport.to_be_bytes());
        h.extend_from_slice(&dport.to_be_bytes());
        h.extend_from_slice(&((8 + payload_len) as u16).to_be_bytes());
        h.extend_from_slice(&[0, 0]);
        h.extend(std::iter::repeat(0u8).take(payload_len));
        h
    }

    pub fn tcp_frame(spec: TcpFrame) -> Vec<u8> {
        ethernet(
            0x0800,
            &ipv4(
                6,
                spec.ttl,
                spec.src,
                spec.dst,
                &tcp(spec.sport, spec.dport, spec.flags, spec.payload_len),
            ),
        )
    }

    pub fn udp_frame(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16, payload: usize) -> Vec<u8> {
        ethernet(0x0800, &ipv4(17, 64, src, dst, &udp(sport, dport, payload)))
    }

    pub fn arp_frame() -> Vec<u8> {
        let mut body = vec![
            0x00, 0x01, // hardware type: ethernet
            0x08, 0x00, // protocol type: ipv4
            6, 4, // sizes
            0x00, 0x01, // opcode: request
        ];
        body.extend_from_slice(&[0x02, 0, 0, 0, 0, 1]); // sender mac
        body.extend_from_slice(&[192, 168, 1, 10]); // sender ip
        body.extend_from_slice(&[0, 0, 0, 0, 0, 0]); // target mac
        body.extend_from_slice(&[192, 168, 1, 1]); // target ip
        ethernet(0x0806, &body)
    }
}
