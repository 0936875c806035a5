use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantize, QuantParams};

use super::features::Normalizer;
use super::packet::{tcp, FlowKey, PacketRecord};

/// Which per-flow quantities make up the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureProfile {
    /// `n` packet lengths followed by `n` values of `ln(1 + IAT µs)`.
    #[default]
    Sequence,
    /// `Sequence` plus length max/min/total and the six flag counters.
    Extended,
}

impl FeatureProfile {
    pub fn len(self, n: usize) -> usize {
        match self {
            FeatureProfile::Sequence => 2 * n,
            FeatureProfile::Extended => 2 * n + 3 + tcp::COUNTED.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Packets collected before inference is triggered.
    pub packets: usize,
    /// A gap longer than this starts a new episode for the flow.
    pub iat_limit_us: u64,
    /// Flow records kept in total; the least recently used is evicted.
    pub capacity: usize,
    pub shards: usize,
    pub profile: FeatureProfile,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { packets: 8, iat_limit_us: 60_000_000, capacity: 1 << 16, shards: 1, profile: FeatureProfile::Sequence }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.packets == 0 || self.capacity == 0 || self.shards == 0 {
            return Err(Error::Config("packets, capacity and shards must be at least 1".into()));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.profile.len(self.packets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowState {
    Collecting,
    /// Features were emitted; waiting for the inference result.
    Pending,
    Predicted(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub length_max: u32,
    pub length_min: u32,
    pub length_total: u64,
    /// Counters in [`tcp::COUNTED`] order: FIN, SYN, ACK, PSH, RST, ECE.
    pub flag_counts: [u32; 6],
    pub first_ts: u64,
    pub last_ts: u64,
    pub iat_total_us: u64,
    pub packet_count: usize,
    pub state: FlowState,
    /// Length and IAT of each of the first `n` packets.
    pub lengths: Vec<u32>,
    pub iats: Vec<u64>,
}

impl FlowRecord {
    fn new() -> Self {
        Self {
            length_max: 0,
            length_min: 0,
            length_total: 0,
            flag_counts: [0; 6],
            first_ts: 0,
            last_ts: 0,
            iat_total_us: 0,
            packet_count: 0,
            state: FlowState::Collecting,
            lengths: Vec::new(),
            iats: Vec::new(),
        }
    }

    fn update(&mut self, p: &PacketRecord) {
        let iat = if self.packet_count == 0 {
            self.first_ts = p.ts_us;
            self.length_min = p.len;
            0
        } else {
            p.ts_us - self.last_ts
        };
        self.length_max = self.length_max.max(p.len);
        self.length_min = self.length_min.min(p.len);
        self.length_total += u64::from(p.len);
        for (c, &f) in self.flag_counts.iter_mut().zip(&tcp::COUNTED) {
            *c += u32::from(p.has(f));
        }
        self.iat_total_us += iat;
        self.last_ts = p.ts_us;
        self.packet_count += 1;
        self.lengths.push(p.len);
        self.iats.push(iat);
    }

    /// Unnormalized model features of a complete record.
    pub fn raw_features(&self, profile: FeatureProfile) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengths.iter().map(|&l| f64::from(l)).collect();
        v.extend(self.iats.iter().map(|&t| (t as f64).ln_1p()));
        if profile == FeatureProfile::Extended {
            v.extend([f64::from(self.length_max), f64::from(self.length_min), self.length_total as f64]);
            v.extend(self.flag_counts.iter().map(|&c| f64::from(c)));
        }
        v
    }
}

/// Outcome of one packet.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forwarded,
    /// Classified from the cached result.
    Predicted(usize),
    /// The `n`-th packet of an episode: raw features for inference.
    InferenceTriggered(Vec<f64>),
}

/// Least recently used map of flow records.
#[derive(Debug, Clone, Default)]
struct Shard {
    records: HashMap<FlowKey, (FlowRecord, u64)>,
    order: BTreeMap<u64, FlowKey>,
    tick: u64,
    evictions: usize,
}

impl Shard {
    fn touch(&mut self, key: FlowKey, capacity: usize) -> &mut FlowRecord {
        self.tick += 1;
        let tick = self.tick;
        if let Some((_, used)) = self.records.get_mut(&key) {
            self.order.remove(used);
            *used = tick;
        } else {
            if self.records.len() >= capacity {
                if let Some((_, old)) = self.order.pop_first() {
                    self.records.remove(&old);
                    self.evictions += 1;
                }
            }
            self.records.insert(key, (FlowRecord::new(), tick));
        }
        self.order.insert(tick, key);
        &mut self.records.get_mut(&key).expect("just inserted").0
    }
}

/// Flow state keyed by 5-tuple, split into shards by key hash. Packets of
/// one flow always land in the same shard, so shards can be driven
/// independently.
#[derive(Debug, Clone)]
pub struct FlowTable {
    cfg: FlowConfig,
    shards: Vec<Shard>,
    shard_capacity: usize,
}

impl FlowTable {
    pub fn new(cfg: FlowConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { shard_capacity: cfg.capacity.div_ceil(cfg.shards), shards: vec![Shard::default(); cfg.shards], cfg })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn shard_of(&self, key: &FlowKey) -> usize {
        (key.stable_hash() % self.cfg.shards as u64) as usize
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evictions(&self) -> usize {
        self.shards.iter().map(|s| s.evictions).sum()
    }

    pub fn get(&self, key: &FlowKey) -> Option<&FlowRecord> {
        self.shards[self.shard_of(key)].records.get(key).map(|(r, _)| r)
    }

    /// Apply one packet.
    ///
    /// FIN clears the record after the packet is handled; a gap over the IAT
    /// limit clears it before, so the packet opens a new episode. A cached
    /// prediction short-circuits feature collection.
    pub fn ingest(&mut self, p: &PacketRecord) -> Action {
        let (n, limit, profile, cap) = (self.cfg.packets, self.cfg.iat_limit_us, self.cfg.profile, self.shard_capacity);
        let s = self.shard_of(&p.key);
        let rec = self.shards[s].touch(p.key, cap);
        if rec.packet_count > 0 && p.ts_us.saturating_sub(rec.last_ts) > limit {
            *rec = FlowRecord::new();
        }
        let action = match rec.state {
            FlowState::Predicted(c) => Action::Predicted(c),
            FlowState::Pending => Action::Forwarded,
            FlowState::Collecting => {
                rec.update(p);
                if rec.packet_count == n {
                    rec.state = FlowState::Pending;
                    Action::InferenceTriggered(rec.raw_features(profile))
                } else {
                    Action::Forwarded
                }
            }
        };
        if p.has(tcp::FIN) {
            *rec = FlowRecord::new();
        }
        action
    }

    /// Cache the class of a pending flow. Returns false when the flow is no
    /// longer pending (reset or evicted meanwhile).
    pub fn resolve(&mut self, key: &FlowKey, class: usize) -> bool {
        let s = self.shard_of(key);
        match self.shards[s].records.get_mut(key) {
            Some((r, _)) if r.state == FlowState::Pending => {
                r.state = FlowState::Predicted(class);
                true
            }
            _ => false,
        }
    }
}

/// Normalize with training-set bounds, then quantize with the model input
/// params.
pub fn featurize(raw: &[f64], normalizer: Option<&Normalizer>, input: &QuantParams) -> Result<Vec<i32>> {
    let norm = normalizer.ok_or(Error::MissingNormalizer)?.apply(raw)?;
    Ok(norm.iter().map(|&r| quantize(r, input)).collect())
}

/// Batch recomputation of each flow's first-episode features straight from
/// the packet list, without any table state. Flows with fewer than `n`
/// packets are absent.
pub fn batch_features(packets: &[PacketRecord], n: usize, profile: FeatureProfile) -> BTreeMap<FlowKey, Vec<f64>> {
    let mut by_flow: BTreeMap<FlowKey, Vec<&PacketRecord>> = BTreeMap::new();
    for p in packets {
        by_flow.entry(p.key).or_default().push(p);
    }
    by_flow
        .into_iter()
        .filter(|(_, v)| v.len() >= n)
        .map(|(k, v)| {
            let first = &v[..n];
            let lengths: Vec<f64> = first.iter().map(|p| f64::from(p.len)).collect();
            let iats = first.iter().enumerate().map(|(i, p)| {
                if i == 0 {
                    0.0
                } else {
                    ((p.ts_us - first[i - 1].ts_us) as f64).ln_1p()
                }
            });
            let mut f: Vec<f64> = lengths.iter().copied().chain(iats).collect();
            if profile == FeatureProfile::Extended {
                f.push(lengths.iter().copied().fold(0.0, f64::max));
                f.push(lengths.iter().copied().fold(f64::INFINITY, f64::min));
                f.push(lengths.iter().sum());
                for flag in tcp::COUNTED {
                    f.push(first.iter().filter(|p| p.has(flag)).count() as f64);
                }
            }
            (k, f)
        })
        .collect()
}
