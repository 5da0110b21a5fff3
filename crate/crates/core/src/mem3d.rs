//! 3D-stacked DRAM model: geometry, weight layouts and the timing contract.
//!
//! Each vault is a vertical slice of the stack with its own `M`-bit bus and
//! `dies * banks_per_vault_per_die` banks. Weights are grouped `M` at a time
//! (the same kernel position of `M` consecutive output channels), so one
//! beat of a bit-plane fetch carries one bit of each of the `M` weights.
//!
//! * [`LayoutKind::BitPlane`]: plane `b` of vault-local group `g` lives in
//!   flattened bank `(b + g) mod total_banks`. A fetch for exponent `e < 0`
//!   reads only planes `7 ..= |e|`, one beat per plane, each from a distinct
//!   bank.
//! * [`LayoutKind::Standard`]: the `8 * M` bits of a group sit contiguously
//!   in bank `g mod total_banks`, and every fetch moves all 8 beats.
//!
//! Timing uses two resources. Every request holds its bank for `tRC` cycles
//! (closed page: activate, read, precharge), and all beats of a vault share
//! one bus that moves `beats_per_cycle` beats per logic cycle.

use serde::{Deserialize, Serialize};

use crate::model::Tensor;
use crate::pe::MsbSlice;
use crate::{Error, Result};

/// Weight precision in bits.
pub const WEIGHT_BITS: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemGeometry {
    pub num_vaults: usize,
    pub dies: usize,
    pub banks_per_vault_per_die: usize,
    /// Vault bus width `M` in bits; also the weight group size.
    pub bus_bits: usize,
    pub bandwidth_bytes_per_sec: f64,
    pub trc_cycles: u64,
    pub logic_freq_hz: f64,
    pub row_bits: usize,
    pub rows_per_bank: usize,
}

impl Default for MemGeometry {
    fn default() -> Self {
        MemGeometry {
            num_vaults: 16,
            dies: 4,
            banks_per_vault_per_die: 4,
            bus_bits: 32,
            bandwidth_bytes_per_sec: 10e9,
            trc_cycles: 12,
            logic_freq_hz: 300e6,
            row_bits: 2048,
            // 4 GiB over 16 vaults x 16 banks
            rows_per_bank: 65536,
        }
    }
}

impl MemGeometry {
    pub fn total_banks(&self) -> usize {
        self.dies * self.banks_per_vault_per_die
    }

    /// `floor(bandwidth / (freq * M / 8))`.
    pub fn beats_per_cycle(&self) -> u64 {
        let bytes_per_beat = self.bus_bits as f64 / 8.0;
        (self.bandwidth_bytes_per_sec / (self.logic_freq_hz * bytes_per_beat)).floor() as u64
    }

    pub fn bank_capacity_bits(&self) -> usize {
        self.row_bits * self.rows_per_bank
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("geometry: {m}")));
        if self.num_vaults == 0 || self.dies == 0 || self.banks_per_vault_per_die == 0 {
            return bad("vault, die and bank counts must be positive");
        }
        if ![8, 16, 32, 64].contains(&self.bus_bits) {
            return bad("bus_bits must be 8, 16, 32 or 64");
        }
        if self.total_banks() < WEIGHT_BITS as usize {
            return bad("a vault needs at least 8 banks for the bit-plane layout");
        }
        if !(self.logic_freq_hz > 0.0 && self.bandwidth_bytes_per_sec > 0.0) {
            return bad("frequency and bandwidth must be positive");
        }
        if self.trc_cycles == 0 {
            return bad("trc_cycles must be positive");
        }
        if self.beats_per_cycle() == 0 {
            return bad("bandwidth is below one beat per logic cycle");
        }
        if self.row_bits == 0
            || !self
                .row_bits
                .is_multiple_of(self.bus_bits * WEIGHT_BITS as usize)
        {
            return bad("row_bits must be a positive multiple of 8 * bus_bits");
        }
        if self.rows_per_bank == 0 {
            return bad("rows_per_bank must be positive");
        }
        Ok(())
    }

    /// Splits a flattened bank index into `(die, bank within die)`.
    pub fn die_and_bank(&self, flat_bank: usize) -> (usize, usize) {
        (
            flat_bank / self.banks_per_vault_per_die,
            flat_bank % self.banks_per_vault_per_die,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutKind {
    BitPlane,
    Standard,
}

/// Physical location of one `M`-bit word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WordAddr {
    /// Flattened bank index within the vault.
    pub bank: usize,
    pub row: u32,
    pub col: u32,
}

#[derive(Clone, Debug)]
enum GroupData {
    /// `planes[b]` bit `j` is bit `b` of weight `j`.
    Planes([u64; 8]),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug)]
struct StoredGroup {
    data: GroupData,
    /// BitPlane: address of each plane. Standard: start of the 8-beat burst.
    addrs: Vec<WordAddr>,
}

/// Which slice of a weight tensor a group holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupKey {
    pub channel: usize,
    /// Flattened kernel offset `ky * kernel_w + kx`.
    pub kernel_offset: usize,
    pub oc_block: usize,
}

/// Placement of one layer's weights across the vaults. Immutable once built.
#[derive(Clone, Debug)]
pub struct WeightLayout {
    kind: LayoutKind,
    geometry: MemGeometry,
    out_channels: usize,
    kernel_area: usize,
    vaults: Vec<Vec<StoredGroup>>,
}

/// One beat moved on the vault bus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeatAccess {
    pub bank: usize,
    pub row: u32,
    /// Bit plane for BitPlane fetches; beat index within the burst otherwise.
    pub plane: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupFetch {
    /// One MSB slice per weight of the group (`M` entries, zero-padded past
    /// the last output channel). Empty when nothing was fetched.
    pub slices: Vec<MsbSlice>,
    pub beats: u32,
    pub accesses: Vec<BeatAccess>,
}

impl GroupFetch {
    /// Distinct banks touched, in first-touch order.
    pub fn banks(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for a in &self.accesses {
            if !out.contains(&a.bank) {
                out.push(a.bank);
            }
        }
        out
    }
}

impl WeightLayout {
    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn geometry(&self) -> &MemGeometry {
        &self.geometry
    }

    pub fn oc_blocks(&self) -> usize {
        self.out_channels.div_ceil(self.geometry.bus_bits)
    }

    pub fn groups_in_vault(&self, vault: usize) -> usize {
        self.vaults.get(vault).map_or(0, Vec::len)
    }

    /// `(vault, vault-local group id)` holding `key`. Channels are dealt to
    /// vaults round-robin, and each vault numbers its groups by
    /// `(local channel, kernel offset, output block)`.
    pub fn locate(&self, key: GroupKey) -> (usize, usize) {
        let v = self.geometry.num_vaults;
        let local_channel = key.channel / v;
        let group = (local_channel * self.kernel_area + key.kernel_offset) * self.oc_blocks()
            + key.oc_block;
        (key.channel % v, group)
    }

    pub fn address(&self, vault: usize, group: usize) -> Result<&[WordAddr]> {
        self.stored(vault, group).map(|g| g.addrs.as_slice())
    }

    fn stored(&self, vault: usize, group: usize) -> Result<&StoredGroup> {
        self.vaults
            .get(vault)
            .and_then(|v| v.get(group))
            .ok_or(Error::UnknownGroup { vault, group })
    }
}

/// Lays out an INT8 weight tensor of dims `[OC, IC]` or `[OC, IC, KH, KW]`.
pub fn place_weights(
    weights: &Tensor,
    kind: LayoutKind,
    geometry: &MemGeometry,
) -> Result<WeightLayout> {
    geometry.validate()?;
    let data = weights
        .as_int8()
        .ok_or_else(|| Error::Parse("weights must be Int8".into()))?;
    let dims = weights.dims();
    if dims.len() < 2 {
        return Err(Error::Shape(format!(
            "weight dims {dims:?} need at least [OC, IC]"
        )));
    }
    let (oc, ic) = (dims[0], dims[1]);
    let karea: usize = dims[2..].iter().product();
    let m = geometry.bus_bits;
    let oc_blocks = oc.div_ceil(m);
    let total_banks = geometry.total_banks();
    let capacity = geometry.bank_capacity_bits();
    let weight = |o: usize, c: usize, k: usize| data[(o * ic + c) * karea + k];

    let mut vaults = Vec::with_capacity(geometry.num_vaults);
    for v in 0..geometry.num_vaults {
        let mut cursor = vec![0usize; total_banks];
        let mut groups = Vec::new();
        let mut alloc = |bank: usize, bits: usize| -> Result<WordAddr> {
            let at = cursor[bank];
            if at + bits > capacity {
                return Err(Error::CapacityExceeded(format!(
                    "vault {v} bank {bank} is full"
                )));
            }
            cursor[bank] += bits;
            Ok(WordAddr {
                bank,
                row: (at / geometry.row_bits) as u32,
                col: (at % geometry.row_bits) as u32,
            })
        };
        for c in (v..ic).step_by(geometry.num_vaults) {
            for k in 0..karea {
                for ob in 0..oc_blocks {
                    let g = groups.len();
                    let bytes: Vec<u8> = (0..m)
                        .map(|j| {
                            let o = ob * m + j;
                            if o < oc {
                                weight(o, c, k) as u8
                            } else {
                                0
                            }
                        })
                        .collect();
                    let stored = match kind {
                        LayoutKind::BitPlane => {
                            let mut planes = [0u64; 8];
                            for (j, &byte) in bytes.iter().enumerate() {
                                for (b, plane) in planes.iter_mut().enumerate() {
                                    *plane |= (((byte >> b) & 1) as u64) << j;
                                }
                            }
                            let addrs = (0..WEIGHT_BITS as usize)
                                .map(|b| alloc((b + g) % total_banks, m))
                                .collect::<Result<_>>()?;
                            StoredGroup {
                                data: GroupData::Planes(planes),
                                addrs,
                            }
                        }
                        LayoutKind::Standard => StoredGroup {
                            addrs: vec![alloc(g % total_banks, m * WEIGHT_BITS as usize)?],
                            data: GroupData::Bytes(bytes),
                        },
                    };
                    groups.push(stored);
                }
            }
        }
        vaults.push(groups);
    }
    Ok(WeightLayout {
        kind,
        geometry: geometry.clone(),
        out_channels: oc,
        kernel_area: karea,
        vaults,
    })
}

/// Fetches the bits of group `group` needed to multiply by `2^exp`.
pub fn fetch_weight_group(
    layout: &WeightLayout,
    vault: usize,
    group: usize,
    exp: i8,
    act_nonzero: bool,
) -> Result<GroupFetch> {
    let stored = layout.stored(vault, group)?;
    if !act_nonzero {
        return Ok(GroupFetch::default());
    }
    let m = layout.geometry.bus_bits;
    match &stored.data {
        GroupData::Planes(planes) => {
            let low = crate::analysis::skipped_bits(exp).min(WEIGHT_BITS - 1) as usize;
            let mut accesses = Vec::with_capacity(8 - low);
            // MSB first
            for b in (low..WEIGHT_BITS as usize).rev() {
                let a = stored.addrs[b];
                accesses.push(BeatAccess {
                    bank: a.bank,
                    row: a.row,
                    plane: b as u8,
                });
            }
            let len = (WEIGHT_BITS as usize - low) as u8;
            let slices = (0..m)
                .map(|j| {
                    let bits = (low..WEIGHT_BITS as usize).fold(0u8, |acc, b| {
                        acc | ((((planes[b] >> j) & 1) as u8) << (b - low))
                    });
                    MsbSlice::new(bits, len)
                })
                .collect();
            Ok(GroupFetch {
                slices,
                beats: accesses.len() as u32,
                accesses,
            })
        }
        GroupData::Bytes(bytes) => {
            let a = stored.addrs[0];
            let accesses = (0..WEIGHT_BITS as u8)
                .map(|beat| BeatAccess {
                    bank: a.bank,
                    row: a.row,
                    plane: beat,
                })
                .collect::<Vec<_>>();
            Ok(GroupFetch {
                slices: bytes.iter().map(|&b| MsbSlice::new(b, 8)).collect(),
                beats: accesses.len() as u32,
                accesses,
            })
        }
    }
}

/// A burst to one bank row: one activation, `beats` column reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankRequest {
    pub bank: usize,
    pub row: u32,
    pub beats: u32,
}

/// Merges beats that hit the same `(bank, row)` into one request, keeping
/// first-touch order.
pub fn coalesce(accesses: impl IntoIterator<Item = BeatAccess>) -> Vec<BankRequest> {
    let mut out: Vec<BankRequest> = Vec::new();
    for a in accesses {
        match out.iter_mut().find(|r| r.bank == a.bank && r.row == a.row) {
            Some(r) => r.beats += 1,
            None => out.push(BankRequest {
                bank: a.bank,
                row: a.row,
                beats: 1,
            }),
        }
    }
    out
}

/// Timing of one issued request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IssuedRequest {
    /// Cycle the bank was activated.
    pub start: u64,
    /// First beat slot on the bus, in beat units (`cycle * beats_per_cycle`).
    pub first_beat_slot: u64,
    /// Cycle the bank is free again.
    pub done: u64,
}

/// Greedy two-resource scheduler: per-bank occupancy of `tRC` and a shared
/// bus carrying `beats_per_cycle` beats per cycle. Requests are issued in
/// call order, each as early as its bank allows.
#[derive(Clone, Debug)]
pub struct BeatScheduler {
    beats_per_cycle: u64,
    trc: u64,
    bank_free: Vec<u64>,
    bus_free_slot: u64,
    end: u64,
}

impl BeatScheduler {
    pub fn new(geometry: &MemGeometry) -> Self {
        BeatScheduler {
            beats_per_cycle: geometry.beats_per_cycle().max(1),
            trc: geometry.trc_cycles,
            bank_free: vec![0; geometry.total_banks()],
            bus_free_slot: 0,
            end: 0,
        }
    }

    pub fn beats_per_cycle(&self) -> u64 {
        self.beats_per_cycle
    }

    pub fn issue(&mut self, bank: usize, beats: u32) -> IssuedRequest {
        let bank = bank % self.bank_free.len();
        let start = self.bank_free[bank];
        let first = (start * self.beats_per_cycle).max(self.bus_free_slot);
        let last = first + beats as u64;
        self.bus_free_slot = last;
        let done = (start + self.trc).max(last.div_ceil(self.beats_per_cycle));
        self.bank_free[bank] = done;
        self.end = self.end.max(done);
        IssuedRequest {
            start,
            first_beat_slot: first,
            done,
        }
    }

    /// Completion time of everything issued so far.
    pub fn finish(&self) -> u64 {
        self.end
    }
}

/// Completion time of `requests`, each `(bank, beats)`, issued in order.
pub fn schedule_beats(requests: &[(usize, u32)], geometry: &MemGeometry) -> u64 {
    let mut s = BeatScheduler::new(geometry);
    for &(bank, beats) in requests {
        if beats > 0 {
            s.issue(bank, beats);
        }
    }
    s.finish()
}

/// Event counts of one simulation run. Every field only grows.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessCounters {
    pub dram_weight_beats: u64,
    pub dram_input_beats: u64,
    pub dram_output_beats: u64,
    pub dram_row_activations: u64,
    /// Activation values read from DRAM (the input-once audit).
    pub dram_input_values: u64,
    pub ib_reads: u64,
    pub ib_writes: u64,
    pub ob_reads: u64,
    pub ob_writes: u64,
    pub wb_reads: u64,
    pub wb_writes: u64,
    /// 16-bit words moved over the NoC.
    pub noc_transfers: u64,
    pub adds: u64,
    pub macs: u64,
    pub quants: u64,
    pub shift_decodes: u64,
    pub sfu_outputs: u64,
    /// Accumulations that hit the int16 bounds.
    pub saturations: u64,
}

impl AccessCounters {
    pub fn dram_beats(&self) -> u64 {
        self.dram_weight_beats + self.dram_input_beats + self.dram_output_beats
    }

    pub fn merge(&mut self, o: &AccessCounters) {
        self.dram_weight_beats += o.dram_weight_beats;
        self.dram_input_beats += o.dram_input_beats;
        self.dram_output_beats += o.dram_output_beats;
        self.dram_row_activations += o.dram_row_activations;
        self.dram_input_values += o.dram_input_values;
        self.ib_reads += o.ib_reads;
        self.ib_writes += o.ib_writes;
        self.ob_reads += o.ob_reads;
        self.ob_writes += o.ob_writes;
        self.wb_reads += o.wb_reads;
        self.wb_writes += o.wb_writes;
        self.noc_transfers += o.noc_transfers;
        self.adds += o.adds;
        self.macs += o.macs;
        self.quants += o.quants;
        self.shift_decodes += o.shift_decodes;
        self.sfu_outputs += o.sfu_outputs;
        self.saturations += o.saturations;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weights(oc: usize, ic: usize) -> Tensor {
        let data = (0..oc * ic)
            .map(|i| (i as i32 * 37 % 255 - 127) as i8)
            .collect();
        Tensor::int8(vec![oc, ic], data).unwrap()
    }

    #[test]
    fn single_group_bit_plane() {
        let g = MemGeometry::default();
        let l = place_weights(&weights(32, 1), LayoutKind::BitPlane, &g).unwrap();
        assert_eq!(l.groups_in_vault(0), 1);
        let banks: Vec<usize> = l.address(0, 0).unwrap().iter().map(|a| a.bank).collect();
        assert_eq!(banks, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn second_group_rotates() {
        let g = MemGeometry::default();
        let l = place_weights(&weights(64, 1), LayoutKind::BitPlane, &g).unwrap();
        assert_eq!(l.address(0, 1).unwrap()[0].bank, 1);
        assert_eq!(l.address(0, 1).unwrap()[7].bank, 8);
    }

    #[test]
    fn standard_group_is_contiguous() {
        let g = MemGeometry::default();
        let l = place_weights(&weights(32, 1), LayoutKind::Standard, &g).unwrap();
        let f = fetch_weight_group(&l, 0, 0, -3, true).unwrap();
        assert_eq!(f.beats, 8);
        assert_eq!(f.banks(), vec![0]);
    }

    #[test]
    fn fetch_examples() {
        let g = MemGeometry::default();
        let l = place_weights(&weights(32, 1), LayoutKind::BitPlane, &g).unwrap();
        let f = fetch_weight_group(&l, 0, 0, -3, true).unwrap();
        assert_eq!(f.beats, 5);
        let planes: Vec<u8> = f.accesses.iter().map(|a| a.plane).collect();
        assert_eq!(planes, vec![7, 6, 5, 4, 3]);
        assert_eq!(f.banks().len(), 5);
        assert_eq!(fetch_weight_group(&l, 0, 0, 2, true).unwrap().beats, 8);
        assert_eq!(fetch_weight_group(&l, 0, 0, -3, false).unwrap().beats, 0);
        assert!(matches!(
            fetch_weight_group(&l, 0, 5, 0, true),
            Err(Error::UnknownGroup { .. })
        ));
    }

    #[test]
    fn bit_planes_reassemble_weights() {
        let g = MemGeometry::default();
        let w = weights(70, 20);
        let l = place_weights(&w, LayoutKind::BitPlane, &g).unwrap();
        let data = w.as_int8().unwrap();
        for c in 0..20 {
            for ob in 0..l.oc_blocks() {
                let (v, grp) = l.locate(GroupKey {
                    channel: c,
                    kernel_offset: 0,
                    oc_block: ob,
                });
                let f = fetch_weight_group(&l, v, grp, 0, true).unwrap();
                for (j, s) in f.slices.iter().enumerate() {
                    let o = ob * 32 + j;
                    let expected = if o < 70 { data[o * 20 + c] } else { 0 };
                    assert_eq!(s.bits() as i8, expected);
                }
            }
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let g = MemGeometry {
            rows_per_bank: 1,
            ..MemGeometry::default()
        };
        // 16 banks x 2048 bits per vault = 128 bit-plane groups
        let ok = weights(32, 16 * 128);
        assert!(place_weights(&ok, LayoutKind::BitPlane, &g).is_ok());
        let too_big = weights(32, 16 * 129);
        assert!(matches!(
            place_weights(&too_big, LayoutKind::BitPlane, &g),
            Err(Error::CapacityExceeded(_))
        ));
    }

    #[test]
    fn timing_examples() {
        let g = MemGeometry::default();
        assert_eq!(g.beats_per_cycle(), 8);
        assert_eq!(schedule_beats(&[(0, 8)], &g), 12);
        let spread: Vec<(usize, u32)> = (0..8).map(|b| (b, 1)).collect();
        assert_eq!(schedule_beats(&spread, &g), 12);
        assert_eq!(schedule_beats(&[(3, 1), (3, 1)], &g), 24);
        assert_eq!(schedule_beats(&[], &g), 0);
    }

    #[test]
    fn bus_bound_when_bursts_are_long() {
        let g = MemGeometry::default();
        // 16 banks x 16 beats = 256 beats = 32 bus cycles > tRC
        let reqs: Vec<(usize, u32)> = (0..16).map(|b| (b, 16)).collect();
        assert_eq!(schedule_beats(&reqs, &g), 32);
    }

    #[test]
    fn coalesce_merges_same_row() {
        let a = |bank, row| BeatAccess {
            bank,
            row,
            plane: 0,
        };
        let r = coalesce([a(1, 0), a(2, 0), a(1, 0), a(1, 1)]);
        assert_eq!(
            r,
            vec![
                BankRequest {
                    bank: 1,
                    row: 0,
                    beats: 2
                },
                BankRequest {
                    bank: 2,
                    row: 0,
                    beats: 1
                },
                BankRequest {
                    bank: 1,
                    row: 1,
                    beats: 1
                },
            ]
        );
    }

    proptest! {
        #[test]
        fn distinct_bank_order_is_irrelevant(
            beats in proptest::collection::vec(1u32..40, 1..16),
            seed in any::<u64>(),
        ) {
            let g = MemGeometry::default();
            let reqs: Vec<(usize, u32)> = beats.iter().enumerate().map(|(b, &n)| (b, n)).collect();
            let mut shuffled = reqs.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = (seed.rotate_left(i as u32) as usize) % n;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(schedule_beats(&reqs, &g), schedule_beats(&shuffled, &g));
        }

        #[test]
        fn fetch_banks_are_distinct(exp in -7i8..=7, ic in 1usize..40) {
            let g = MemGeometry::default();
            let l = place_weights(&weights(96, ic), LayoutKind::BitPlane, &g).unwrap();
            for v in 0..g.num_vaults {
                for grp in 0..l.groups_in_vault(v) {
                    let f = fetch_weight_group(&l, v, grp, exp, true).unwrap();
                    prop_assert!(f.banks().len() <= 8);
                    prop_assert_eq!(f.banks().len(), f.accesses.len());
                }
            }
        }
    }
}
