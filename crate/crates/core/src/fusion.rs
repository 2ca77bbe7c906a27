//! Join packet rows to flow records by five-tuple and time window, aggregate
//! per flow, and emit the unified 60-feature representation.
//!
//! Tuple matching is bidirectional. A packet inside the windows of several
//! same-tuple flows is assigned to the flow with the latest start time not
//! after the packet timestamp, so every packet lands in at most one flow.

use crate::error::Result;
use crate::flow::{derive, DerivedFeatures, FlowRecord};
use crate::packet::PacketRecord;
use crate::schema::{FeatureTable, Value};
use serde::{Deserialize, Serialize};

/// Does the packet's five-tuple equal the flow's key in either orientation?
pub fn tuple_matches(flow: &FlowRecord, pkt: &PacketRecord) -> bool {
    let k = &flow.key;
    if pkt.protocol_type != k.protocol_type {
        return false;
    }
    let fwd = pkt.src_ip == k.orig_ip
        && pkt.src_port == k.orig_port
        && pkt.dst_ip == k.resp_ip
        && pkt.dst_port == k.resp_port;
    let rev = pkt.src_ip == k.resp_ip
        && pkt.src_port == k.resp_port
        && pkt.dst_ip == k.orig_ip
        && pkt.dst_port == k.orig_port;
    fwd || rev
}

fn in_window(flow: &FlowRecord, pkt: &PacketRecord) -> bool {
    pkt.timestamp >= flow.ts && pkt.timestamp <= flow.ts + flow.duration
}

/// Packets matching one flow by tuple and window, ignoring other flows.
pub fn match_packets<'a>(flow: &FlowRecord, packets: &'a [PacketRecord]) -> Vec<&'a PacketRecord> {
    packets
        .iter()
        .filter(|p| tuple_matches(flow, p) && in_window(flow, p))
        .collect()
}

/// Join statistics, including flows that matched no packets.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QualityReport {
    pub flows: usize,
    pub packets: usize,
    pub matched_packets: usize,
    pub unmatched_packets: usize,
    pub zero_packet_flows: Vec<String>,
}

/// Join flows and packets into the fused table, in (ts, key) flow order.
/// `uids` must parallel `flows`; they name zero-packet flows in the report.
pub fn fuse(
    flows: &[(String, FlowRecord)],
    packets: &[PacketRecord],
) -> Result<(FeatureTable, QualityReport)> {
    // Assign each packet to the candidate flow with the latest start time.
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); flows.len()];
    let mut matched = 0usize;
    for (pi, pkt) in packets.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (fi, (_, flow)) in flows.iter().enumerate() {
            if tuple_matches(flow, pkt) && in_window(flow, pkt) {
                best = match best {
                    None => Some(fi),
                    Some(prev) => {
                        if flows[fi].1.ts > flows[prev].1.ts {
                            Some(fi)
                        } else {
                            Some(prev)
                        }
                    }
                };
            }
        }
        if let Some(fi) = best {
            assigned[fi].push(pi);
            matched += 1;
        }
    }

    let mut order: Vec<usize> = (0..flows.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (&flows[a].1, &flows[b].1);
        fa.ts.total_cmp(&fb.ts).then_with(|| {
            let ka = (
                &fa.key.orig_ip,
                fa.key.orig_port,
                &fa.key.resp_ip,
                fa.key.resp_port,
                fa.key.protocol_type,
            );
            let kb = (
                &fb.key.orig_ip,
                fb.key.orig_port,
                &fb.key.resp_ip,
                fb.key.resp_port,
                fb.key.protocol_type,
            );
            ka.cmp(&kb)
        })
    });

    let mut table = FeatureTable::fused();
    let mut report = QualityReport {
        flows: flows.len(),
        packets: packets.len(),
        matched_packets: matched,
        unmatched_packets: packets.len() - matched,
        zero_packet_flows: Vec::new(),
    };
    for fi in order {
        let (uid, flow) = &flows[fi];
        let rows: Vec<&PacketRecord> = assigned[fi].iter().map(|&pi| &packets[pi]).collect();
        if rows.is_empty() {
            report.zero_packet_flows.push(uid.clone());
        }
        let row = aggregate(flow, &derive(flow), &rows);
        table.push_row(row)?;
    }
    Ok((table, report))
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// Mode with ties broken by the smallest value.
fn mode_u32(values: impl Iterator<Item = u32>) -> u32 {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for v in values {
        match counts.iter_mut().find(|(x, _)| *x == v) {
            Some((_, c)) => *c += 1,
            None => counts.push((v, 1)),
        }
    }
    counts
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)))
        .map(|(v, _)| v)
        .unwrap_or(0)
}

/// Total order over packet rows; used to canonicalize aggregation input so
/// that float reductions are bit-identical under input permutation.
fn cmp_packet(a: &PacketRecord, b: &PacketRecord) -> std::cmp::Ordering {
    a.timestamp
        .total_cmp(&b.timestamp)
        .then_with(|| a.src_ip.cmp(&b.src_ip))
        .then_with(|| a.dst_ip.cmp(&b.dst_ip))
        .then_with(|| a.src_port.cmp(&b.src_port))
        .then_with(|| a.dst_port.cmp(&b.dst_port))
        .then_with(|| a.protocol_type.cmp(&b.protocol_type))
        .then_with(|| a.total_size.cmp(&b.total_size))
        .then_with(|| a.header_length.cmp(&b.header_length))
        .then_with(|| a.ttl.cmp(&b.ttl))
        .then_with(|| a.ip_version.cmp(&b.ip_version))
        .then_with(|| {
            let fa = [
                a.fin_flag_number,
                a.syn_flag_number,
                a.rst_flag_number,
                a.psh_flag_number,
                a.ack_flag_number,
                a.ece_flag_number,
                a.cwr_flag_number,
            ];
            let fb = [
                b.fin_flag_number,
                b.syn_flag_number,
                b.rst_flag_number,
                b.psh_flag_number,
                b.ack_flag_number,
                b.ece_flag_number,
                b.cwr_flag_number,
            ];
            fa.cmp(&fb)
        })
}

/// Aggregate one flow's matched packets into a fused row in canonical column
/// order: means for numeric fields, sums for counts, modes for categoricals,
/// logical OR for indicators, and the windowed size statistics.
pub fn aggregate(
    flow: &FlowRecord,
    derived: &DerivedFeatures,
    matched: &[&PacketRecord],
) -> Vec<Value> {
    let mut matched: Vec<&PacketRecord> = matched.to_vec();
    matched.sort_by(|a, b| cmp_packet(a, b));
    let matched = &matched;
    let n = matched.len();
    let sizes: Vec<f64> = matched.iter().map(|p| p.total_size as f64).collect();
    let tot_sum: f64 = sizes.iter().sum();
    let avg = if n == 0 { 0.0 } else { tot_sum / n as f64 };
    let min = sizes.iter().copied().fold(f64::INFINITY, f64::min);
    let min = if n == 0 { 0.0 } else { min };
    let max = sizes.iter().copied().fold(0.0f64, f64::max);
    let variance = if n == 0 {
        0.0
    } else {
        sizes.iter().map(|x| (x - avg) * (x - avg)).sum::<f64>() / n as f64
    };
    let std = variance.sqrt();
    // Mean inter-arrival time telescopes to (last - first)/(n - 1) on
    // time-ordered packets, which keeps aggregation permutation-invariant.
    let t_min = matched
        .iter()
        .map(|p| p.timestamp)
        .fold(f64::INFINITY, f64::min);
    let t_max = matched
        .iter()
        .map(|p| p.timestamp)
        .fold(f64::NEG_INFINITY, f64::max);
    let iat = if n >= 2 { (t_max - t_min) / (n - 1) as f64 } else { 0.0 };
    let dti = if n >= 2 { t_max - t_min } else { 0.0 };
    let rate = n as f64 / (flow.duration + 1.0);

    let fmean = |f: fn(&PacketRecord) -> u8| mean(matched.iter().map(|p| f(p) as f64), n);
    let isum = |f: fn(&PacketRecord) -> u8| matched.iter().map(|p| f(p) as u64).sum::<u64>();
    let ior = |f: fn(&PacketRecord) -> u8| matched.iter().any(|p| f(p) == 1) as u8;

    let mode_proto = mode_u32(matched.iter().map(|p| p.protocol_type as u32));
    let mode_src = mode_u32(matched.iter().map(|p| p.src_port as u32));
    let mode_dst = mode_u32(matched.iter().map(|p| p.dst_port as u32));
    let mode_ipv = mode_u32(matched.iter().map(|p| p.ip_version as u32));

    let tunnel_count = if flow.tunnel_parents.is_empty() {
        0.0
    } else {
        flow.tunnel_parents.split(',').count() as f64
    };

    vec![
        Value::Cat(flow.conn_state.as_str().to_string()),
        Value::Num(flow.duration),
        Value::Cat(flow.history.clone()),
        Value::Num(flow.local_orig as u8 as f64),
        Value::Num(flow.local_resp as u8 as f64),
        Value::Num(flow.missed_bytes as f64),
        Value::Num(flow.orig_bytes as f64),
        Value::Num(flow.orig_ip_bytes as f64),
        Value::Num(flow.orig_pkts as f64),
        Value::Cat(flow.service.as_str().to_string()),
        Value::Num(flow.resp_bytes as f64),
        Value::Num(flow.resp_ip_bytes as f64),
        Value::Num(flow.resp_pkts as f64),
        Value::Num(tunnel_count),
        Value::Num(ior(|p| p.arp) as f64),
        Value::Num(avg),
        Value::Num(ior(|p| p.dhcp) as f64),
        Value::Num(ior(|p| p.dns) as f64),
        Value::Num(ior(|p| p.http) as f64),
        Value::Num(ior(|p| p.https) as f64),
        Value::Num(mean(matched.iter().map(|p| p.header_length as f64), n)),
        Value::Num(iat),
        Value::Num(ior(|p| p.icmp) as f64),
        Value::Num(ior(|p| p.igmp) as f64),
        Value::Cat(mode_ipv.to_string()),
        Value::Num(ior(|p| p.irc) as f64),
        Value::Num(ior(|p| p.llc) as f64),
        Value::Num(max),
        Value::Num(min),
        Value::Num(n as f64),
        Value::Cat(mode_proto.to_string()),
        Value::Num(rate),
        Value::Num(ior(|p| p.smtp) as f64),
        Value::Num(ior(|p| p.ssh) as f64),
        Value::Num(std),
        Value::Num(ior(|p| p.tcp) as f64),
        Value::Num(ior(|p| p.telnet) as f64),
        Value::Num(mean(matched.iter().map(|p| p.ttl as f64), n)),
        Value::Num(avg),
        Value::Num(tot_sum),
        Value::Num(ior(|p| p.udp) as f64),
        Value::Num(variance),
        Value::Num(isum(|p| p.ack_count) as f64),
        Value::Num(fmean(|p| p.ack_flag_number)),
        Value::Num(fmean(|p| p.cwr_flag_number)),
        Value::Cat(mode_dst.to_string()),
        Value::Cat(mode_src.to_string()),
        Value::Num(isum(|p| p.fin_count) as f64),
        Value::Num(dti),
        Value::Num(fmean(|p| p.ece_flag_number)),
        Value::Num(fmean(|p| p.fin_flag_number)),
        Value::Num(fmean(|p| p.psh_flag_number)),
        Value::Num(isum(|p| p.rst_count) as f64),
        Value::Num(fmean(|p| p.rst_flag_number)),
        Value::Num(isum(|p| p.syn_count) as f64),
        Value::Num(fmean(|p| p.syn_flag_number)),
        Value::Num(derived.byte_ratio),
        Value::Num(derived.direction),
        Value::Num(derived.orig_byte_rate),
        Value::Num(derived.orig_pkt_rate),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ConnState, FlowKey, Service};
    use crate::schema::FUSED_COLUMNS;
    use std::net::IpAddr;

    fn flow(ts: f64, duration: f64) -> FlowRecord {
        FlowRecord {
            key: FlowKey {
                orig_ip: "10.0.0.1".parse().unwrap(),
                resp_ip: "10.0.0.2".parse().unwrap(),
                orig_port: 1234,
                resp_port: 80,
                protocol_type: 6,
            },
            ts,
            duration,
            orig_bytes: 10,
            resp_bytes: 20,
            orig_ip_bytes: 100,
            resp_ip_bytes: 200,
            orig_pkts: 2,
            resp_pkts: 2,
            missed_bytes: 0,
            conn_state: ConnState::SF,
            history: "ShADdFf".into(),
            service: Service::Http,
            local_orig: true,
            local_resp: true,
            tunnel_parents: String::new(),
        }
    }

    fn packet(ts: f64, src_port: u16, dst_port: u16, size: u32) -> PacketRecord {
        PacketRecord {
            timestamp: ts,
            src_ip: "10.0.0.1".parse::<IpAddr>().unwrap(),
            dst_ip: "10.0.0.2".parse::<IpAddr>().unwrap(),
            src_port,
            dst_port,
            protocol_type: 6,
            header_length: 54,
            total_size: size,
            ttl: 64,
            ip_version: 4,
            fin_flag_number: 0,
            syn_flag_number: 0,
            rst_flag_number: 0,
            psh_flag_number: 0,
            ack_flag_number: 1,
            ece_flag_number: 0,
            cwr_flag_number: 0,
            ack_count: 1,
            syn_count: 0,
            fin_count: 0,
            rst_count: 0,
            arp: 0,
            llc: 0,
            http: 1,
            https: 0,
            dns: 0,
            dhcp: 0,
            ssh: 0,
            telnet: 0,
            smtp: 0,
            irc: 0,
            icmp: 0,
            igmp: 0,
            tcp: 1,
            udp: 0,
        }
    }

    #[test]
    fn window_matching() {
        let f = flow(100.0, 5.0);
        let inside = packet(103.2, 1234, 80, 60);
        let outside = packet(105.1, 1234, 80, 60);
        let mut reverse = packet(101.0, 80, 1234, 60);
        reverse.src_ip = "10.0.0.2".parse().unwrap();
        reverse.dst_ip = "10.0.0.1".parse().unwrap();
        let packets = vec![inside, outside, reverse];
        let matched = match_packets(&f, &packets);
        assert_eq!(matched.len(), 2);
        assert_eq!(matched[0].timestamp, 103.2);
        assert_eq!(matched[1].timestamp, 101.0);
    }

    #[test]
    fn aggregate_statistics() {
        let f = flow(0.0, 2.0);
        let p1 = packet(0.0, 1234, 80, 60);
        let p2 = packet(0.5, 1234, 80, 60);
        let p3 = packet(2.0, 80, 1234, 1500);
        let matched = vec![&p1, &p2, &p3];
        let row = aggregate(&f, &crate::flow::derive(&f), &matched);
        let col = |name: &str| -> f64 {
            let i = FUSED_COLUMNS.iter().position(|(n, _)| *n == name).unwrap();
            row[i].as_num().unwrap()
        };
        assert_eq!(col("AVG"), 540.0);
        assert_eq!(col("Min"), 60.0);
        assert_eq!(col("Max"), 1500.0);
        assert_eq!(col("Tot sum"), 1620.0);
        assert_eq!(col("Number"), 3.0);
        assert_eq!(col("IAT"), 1.0);
        assert_eq!(col("duration_time_interval"), 2.0);
        assert_eq!(col("Rate"), 1.0);
        // Variance == Std^2, Tot sum == AVG * Number.
        assert!((col("Variance") - col("Std") * col("Std")).abs() <= 1e-9 * col("Variance"));
        assert!((col("Tot sum") - col("AVG") * col("Number")).abs() <= 1e-9 * col("Tot sum"));
        assert!(col("Min") <= col("AVG") && col("AVG") <= col("Max"));
    }

    #[test]
    fn mode_majority_and_tie_break() {
        assert_eq!(mode_u32([6u32, 6, 17].into_iter()), 6);
        assert_eq!(mode_u32([17u32, 6].into_iter()), 6);
        assert_eq!(mode_u32([9u32, 9, 3, 3].into_iter()), 3);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let f = flow(0.0, 2.0);
        let p1 = packet(0.0, 1234, 80, 60);
        let p2 = packet(0.5, 4321, 80, 61);
        let p3 = packet(2.0, 1234, 81, 1500);
        let a = aggregate(&f, &crate::flow::derive(&f), &[&p1, &p2, &p3]);
        let b = aggregate(&f, &crate::flow::derive(&f), &[&p3, &p1, &p2]);
        let idx = |name: &str| FUSED_COLUMNS.iter().position(|(n, _)| *n == name).unwrap();
        for (name, _) in FUSED_COLUMNS.iter() {
            assert_eq!(a[idx(name)], b[idx(name)], "column {name}");
        }
    }

    #[test]
    fn latest_start_assignment_partitions_packets() {
        let early = ("C000001".to_string(), flow(100.0, 10.0));
        let late = ("C000002".to_string(), flow(105.0, 10.0));
        let pkt = packet(106.0, 1234, 80, 60);
        let (table, report) = fuse(&[early, late], &[pkt]).unwrap();
        assert_eq!(table.n_rows(), 2);
        assert_eq!(report.matched_packets, 1);
        // Flow order is by ts: the early flow got nothing.
        let number_idx = table.column_index("Number").unwrap();
        assert_eq!(table.rows[0][number_idx], Value::Num(0.0));
        assert_eq!(table.rows[1][number_idx], Value::Num(1.0));
        assert_eq!(report.zero_packet_flows, vec!["C000001".to_string()]);
    }

    #[test]
    fn fused_header_is_locked() {
        let (table, _) = fuse(&[], &[]).unwrap();
        let names: Vec<&str> = table.columns.iter().map(|(n, _)| n.as_str()).collect();
        let expected: Vec<&str> = FUSED_COLUMNS.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, expected);
        assert_eq!(names.len(), 60);
    }
}
