//! Per-packet feature rows: a direct projection of decoded header fields
//! into the packet-level columns that fusion later aggregates per flow.
//!
//! Count fields equal the corresponding flag bit on a single packet; they
//! only become flow-level counts when fusion sums them.

use crate::pcap::{ParsedPacket, ProtocolIndicators, TcpFlags};
use std::net::IpAddr;

#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol_type: u8,
    pub header_length: u32,
    pub total_size: u32,
    pub ttl: u8,
    pub ip_version: u8,
    pub fin_flag_number: u8,
    pub syn_flag_number: u8,
    pub rst_flag_number: u8,
    pub psh_flag_number: u8,
    pub ack_flag_number: u8,
    pub ece_flag_number: u8,
    pub cwr_flag_number: u8,
    pub ack_count: u8,
    pub syn_count: u8,
    pub fin_count: u8,
    pub rst_count: u8,
    pub arp: u8,
    pub llc: u8,
    pub http: u8,
    pub https: u8,
    pub dns: u8,
    pub dhcp: u8,
    pub ssh: u8,
    pub telnet: u8,
    pub smtp: u8,
    pub irc: u8,
    pub icmp: u8,
    pub igmp: u8,
    pub tcp: u8,
    pub udp: u8,
}

/// Project a decoded packet into its feature row. Pure.
pub fn packet_row(pkt: &ParsedPacket) -> PacketRecord {
    let flag = |bit: u8| -> u8 { pkt.tcp_flags.has(bit) as u8 };
    let ind = |bit: u16| -> u8 { pkt.indicators.has(bit) as u8 };
    PacketRecord {
        timestamp: pkt.timestamp,
        src_ip: pkt.src_ip,
        dst_ip: pkt.dst_ip,
        src_port: pkt.src_port,
        dst_port: pkt.dst_port,
        protocol_type: pkt.protocol_type,
        header_length: pkt.header_length,
        total_size: pkt.total_size,
        ttl: pkt.ttl,
        ip_version: pkt.ip_version.as_u8(),
        fin_flag_number: flag(TcpFlags::FIN),
        syn_flag_number: flag(TcpFlags::SYN),
        rst_flag_number: flag(TcpFlags::RST),
        psh_flag_number: flag(TcpFlags::PSH),
        ack_flag_number: flag(TcpFlags::ACK),
        ece_flag_number: flag(TcpFlags::ECE),
        cwr_flag_number: flag(TcpFlags::CWR),
        ack_count: flag(TcpFlags::ACK),
        syn_count: flag(TcpFlags::SYN),
        fin_count: flag(TcpFlags::FIN),
        rst_count: flag(TcpFlags::RST),
        arp: ind(ProtocolIndicators::ARP),
        llc: ind(ProtocolIndicators::LLC),
        http: ind(ProtocolIndicators::HTTP),
        https: ind(ProtocolIndicators::HTTPS),
        dns: ind(ProtocolIndicators::DNS),
        dhcp: ind(ProtocolIndicators::DHCP),
        ssh: ind(ProtocolIndicators::SSH),
        telnet: ind(ProtocolIndicators::TELNET),
        smtp: ind(ProtocolIndicators::SMTP),
        irc: ind(ProtocolIndicators::IRC),
        icmp: ind(ProtocolIndicators::ICMP),
        igmp: ind(ProtocolIndicators::IGMP),
        tcp: ind(ProtocolIndicators::TCP),
        udp: ind(ProtocolIndicators::UDP),
    }
}

/// Packet CSV columns: identifiers first, then the per-packet feature columns
/// in canonical order. The windowed statistics columns are fusion outputs and
/// are absent here.
pub const PACKET_CSV_COLUMNS: [&str; 35] = [
    "timestamp",
    "src_ip",
    "dst_ip",
    "ARP",
    "DHCP",
    "DNS",
    "HTTP",
    "HTTPS",
    "Header_Length",
    "ICMP",
    "IGMP",
    "IPv",
    "IRC",
    "LLC",
    "Protocol Type",
    "SMTP",
    "SSH",
    "TCP",
    "Telnet",
    "Time_To_Live",
    "Tot size",
    "UDP",
    "ack_count",
    "ack_flag_number",
    "cwr_flag_number",
    "dst_port",
    "src_port",
    "fin_count",
    "ece_flag_number",
    "fin_flag_number",
    "psh_flag_number",
    "rst_count",
    "rst_flag_number",
    "syn_count",
    "syn_flag_number",
];

impl PacketRecord {
    /// Field values aligned with [`PACKET_CSV_COLUMNS`].
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            crate::schema::format_num(self.timestamp),
            self.src_ip.to_string(),
            self.dst_ip.to_string(),
            self.arp.to_string(),
            self.dhcp.to_string(),
            self.dns.to_string(),
            self.http.to_string(),
            self.https.to_string(),
            self.header_length.to_string(),
            self.icmp.to_string(),
            self.igmp.to_string(),
            self.ip_version.to_string(),
            self.irc.to_string(),
            self.llc.to_string(),
            self.protocol_type.to_string(),
            self.smtp.to_string(),
            self.ssh.to_string(),
            self.tcp.to_string(),
            self.telnet.to_string(),
            self.ttl.to_string(),
            self.total_size.to_string(),
            self.udp.to_string(),
            self.ack_count.to_string(),
            self.ack_flag_number.to_string(),
            self.cwr_flag_number.to_string(),
            self.dst_port.to_string(),
            self.src_port.to_string(),
            self.fin_count.to_string(),
            self.ece_flag_number.to_string(),
            self.fin_flag_number.to_string(),
            self.psh_flag_number.to_string(),
            self.rst_count.to_string(),
            self.rst_flag_number.to_string(),
            self.syn_count.to_string(),
            self.syn_flag_number.to_string(),
        ]
    }
}

/// Write packet rows in capture order.
pub fn write_packet_csv(records: &[PacketRecord], path: &std::path::Path) -> crate::error::Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(PACKET_CSV_COLUMNS)?;
    for rec in records {
        wtr.write_record(rec.csv_fields())?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a packet CSV back into records.
pub fn read_packet_csv(path: &std::path::Path) -> crate::error::Result<Vec<PacketRecord>> {
    use crate::error::Error;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut idx = Vec::with_capacity(PACKET_CSV_COLUMNS.len());
    for name in PACKET_CSV_COLUMNS {
        let i = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("packet CSV missing column {name:?}")))?;
        idx.push(i);
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let get = |i: usize| -> crate::error::Result<&str> {
            record
                .get(idx[i])
                .ok_or_else(|| Error::SchemaMismatch("short packet CSV record".into()))
        };
        fn parse<T: std::str::FromStr>(s: &str, what: &str) -> crate::error::Result<T> {
            s.parse()
                .map_err(|_| Error::SchemaMismatch(format!("packet CSV: bad {what} {s:?}")))
        }
        out.push(PacketRecord {
            timestamp: parse(get(0)?, "timestamp")?,
            src_ip: parse(get(1)?, "address")?,
            dst_ip: parse(get(2)?, "address")?,
            arp: parse(get(3)?, "bit")?,
            dhcp: parse(get(4)?, "bit")?,
            dns: parse(get(5)?, "bit")?,
            http: parse(get(6)?, "bit")?,
            https: parse(get(7)?, "bit")?,
            header_length: parse(get(8)?, "length")?,
            icmp: parse(get(9)?, "bit")?,
            igmp: parse(get(10)?, "bit")?,
            ip_version: parse(get(11)?, "ip version")?,
            irc: parse(get(12)?, "bit")?,
            llc: parse(get(13)?, "bit")?,
            protocol_type: parse(get(14)?, "protocol")?,
            smtp: parse(get(15)?, "bit")?,
            ssh: parse(get(16)?, "bit")?,
            tcp: parse(get(17)?, "bit")?,
            telnet: parse(get(18)?, "bit")?,
            ttl: parse(get(19)?, "ttl")?,
            total_size: parse(get(20)?, "length")?,
            udp: parse(get(21)?, "bit")?,
            ack_count: parse(get(22)?, "bit")?,
            ack_flag_number: parse(get(23)?, "bit")?,
            cwr_flag_number: parse(get(24)?, "bit")?,
            dst_port: parse(get(25)?, "port")?,
            src_port: parse(get(26)?, "port")?,
            fin_count: parse(get(27)?, "bit")?,
            ece_flag_number: parse(get(28)?, "bit")?,
            fin_flag_number: parse(get(29)?, "bit")?,
            psh_flag_number: parse(get(30)?, "bit")?,
            rst_count: parse(get(31)?, "bit")?,
            rst_flag_number: parse(get(32)?, "bit")?,
            syn_count: parse(get(33)?, "bit")?,
            syn_flag_number: parse(get(34)?, "bit")?,
        });
    }
    Ok(out)
}
