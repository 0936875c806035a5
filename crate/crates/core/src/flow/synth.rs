use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::packet::{tcp, FlowKey, PacketRecord};

/// Traffic shape of one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    /// Payload size cycle; packet `i` is drawn around `lengths[i % len]`.
    pub lengths: Vec<f64>,
    /// Uniform jitter added to each length, in bytes.
    pub length_jitter: f64,
    /// Median inter-arrival time in µs (log-normal).
    pub iat_median_us: f64,
    pub iat_sigma: f64,
    pub psh_prob: f64,
    pub dst_port: u16,
    /// Inclusive packet-count range per flow.
    pub packets: (usize, usize),
}

/// `k` classes spaced evenly in size and timing, with neighbours
/// overlapping. Lengths and timing are permuted against each other so both
/// matter.
pub fn default_profiles(k: usize) -> Vec<ClassProfile> {
    (0..k)
        .map(|c| {
            let t = if k > 1 { c as f64 / (k - 1) as f64 } else { 0.0 };
            let base = 120.0 + 1100.0 * t;
            // Alternating large/small packets for odd classes.
            let lengths = if c % 2 == 1 { vec![base * 1.2, base * 0.8] } else { vec![base] };
            let u = ((c * 7) % k.max(1)) as f64 / k.max(1) as f64;
            ClassProfile {
                name: format!("class{c}"),
                lengths,
                length_jitter: 60.0,
                iat_median_us: 200.0 * 10f64.powf(3.0 * u),
                iat_sigma: 0.6,
                psh_prob: 0.2 + 0.6 * t,
                dst_port: 8000 + c as u16,
                packets: (10, 20),
            }
        })
        .collect()
}

/// Two classes far apart in every feature.
pub fn separated_profiles() -> Vec<ClassProfile> {
    let mk = |name: &str, len: f64, iat: f64, port| ClassProfile {
        name: name.into(),
        lengths: vec![len],
        length_jitter: 30.0,
        iat_median_us: iat,
        iat_sigma: 0.3,
        psh_prob: 0.5,
        dst_port: port,
        packets: (9, 14),
    };
    vec![mk("small-fast", 90.0, 200.0, 53), mk("bulk-slow", 1300.0, 200_000.0, 443)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    /// Sorted by timestamp.
    pub packets: Vec<PacketRecord>,
    pub labels: Vec<(FlowKey, usize)>,
}

const SPAN_US: u64 = 10_000_000;

/// Deterministic labelled trace: `flows_per_class` TCP flows per profile,
/// each opened with SYN and closed with FIN, interleaved over a 10 s window.
pub fn generate_synthetic_trace(
    seed: u64,
    flows_per_class: usize,
    profiles: &[ClassProfile],
) -> Result<SyntheticTrace> {
    if profiles.len() < 2 {
        return Err(Error::Config("need at least two class profiles".into()));
    }
    if flows_per_class > 1 << 16 {
        return Err(Error::Config("at most 65536 flows per class".into()));
    }
    for p in profiles {
        if p.lengths.is_empty()
            || p.packets.0 == 0
            || p.packets.0 > p.packets.1
            || p.iat_median_us.is_nan()
            || p.iat_median_us <= 0.0
        {
            return Err(Error::Config(format!("profile {} is malformed", p.name)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (ts, flow, seq, packet) so ties sort deterministically.
    let mut tagged: Vec<(u64, usize, usize, PacketRecord)> = Vec::new();
    let mut labels = Vec::with_capacity(flows_per_class * profiles.len());
    for (c, prof) in profiles.iter().enumerate() {
        let iat = LogNormal::new(prof.iat_median_us.ln(), prof.iat_sigma)
            .map_err(|e| Error::Config(format!("profile {}: {e}", prof.name)))?;
        for j in 0..flows_per_class {
            let key = FlowKey {
                src: IpAddr::V4(Ipv4Addr::new(10, c as u8, (j >> 8) as u8, (j & 0xff) as u8)),
                dst: IpAddr::V4(Ipv4Addr::new(172, 16, (c >> 8) as u8, (c & 0xff) as u8)),
                src_port: rng.random_range(1024..=65535),
                dst_port: prof.dst_port,
                proto: 6,
            };
            let flow = labels.len();
            labels.push((key, c));
            let count = rng.random_range(prof.packets.0..=prof.packets.1);
            let mut ts = rng.random_range(0..SPAN_US);
            for i in 0..count {
                if i > 0 {
                    ts += (iat.sample(&mut rng).round() as u64).clamp(1, 30_000_000);
                }
                let base = prof.lengths[i % prof.lengths.len()];
                let len = (base + rng.random_range(-prof.length_jitter..=prof.length_jitter))
                    .round()
                    .clamp(40.0, 1500.0) as u32;
                let flags = match i {
                    0 => tcp::SYN,
                    _ if i + 1 == count => tcp::FIN | tcp::ACK,
                    _ if rng.random_bool(prof.psh_prob.clamp(0.0, 1.0)) => tcp::ACK | tcp::PSH,
                    _ => tcp::ACK,
                };
                tagged.push((ts, flow, i, PacketRecord { ts_us: ts, key, len, flags }));
            }
        }
    }
    tagged.sort_unstable_by_key(|t| (t.0, t.1, t.2));
    Ok(SyntheticTrace { packets: tagged.into_iter().map(|t| t.3).collect(), labels })
}
