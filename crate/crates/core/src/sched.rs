//! The three simulated machines.
//!
//! Input-stationary machines (QeiHaN, NaHiD) deal input channels to vaults
//! round-robin and stream each channel through the IB in `N` blocks. Every
//! non-pruned input is quantized once, fetches the weight groups of all
//! kernel offsets and output blocks it touches, and drives the ADD array.
//! Fetching block `k + 1` overlaps with computing block `k`.
//!
//! The output-stationary baseline (Neurocube) deals output tiles of `d`
//! channels at one output pixel to PEs. Each tile re-reads every input it
//! depends on as INT8 and fetches its weights at full width. Its PE does
//! not overlap fetching with MACs.
//!
//! All machines finish a layer the same way: per-vault partials are gathered
//! to vault 0 over the NoC and summed, the SFU activates and pools, and the
//! results are redistributed channel-wise and written back to DRAM.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ExpHistogram;
use crate::mem3d::{
    coalesce, fetch_weight_group, place_weights, schedule_beats, AccessCounters, BeatAccess,
    BeatScheduler, GroupFetch, GroupKey, LayoutKind, MemGeometry, WeightLayout, WEIGHT_BITS,
};
use crate::metrics::{energy, EnergyBreakdown, EnergyConfig};
use crate::model::{LayerDescriptor, LayerKind, NetworkDescriptor, Tensor};
use crate::pe::{
    accumulate, decode_and_shift, sfu_apply, sfu_finish, slice_len_for, PartialOutput, PeConfig,
};
use crate::quant::{log2_quantize_hw, uniform_quantize, QuantActivation, Sign};
use crate::{Error, Real16, Result};

/// Bits per stored activation.
const ACT_BITS: usize = 16;
/// Bits per activation on the uniform INT8 baseline.
const ACT_BITS_INT8: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MachineKind {
    QeiHaN,
    NaHiD,
    Neurocube,
}

impl MachineKind {
    pub const ALL: [MachineKind; 3] = [
        MachineKind::QeiHaN,
        MachineKind::NaHiD,
        MachineKind::Neurocube,
    ];

    pub fn layout(self) -> LayoutKind {
        match self {
            MachineKind::QeiHaN => LayoutKind::BitPlane,
            MachineKind::NaHiD | MachineKind::Neurocube => LayoutKind::Standard,
        }
    }

    pub fn is_input_stationary(self) -> bool {
        self != MachineKind::Neurocube
    }

    pub fn name(self) -> &'static str {
        match self {
            MachineKind::QeiHaN => "QeiHaN",
            MachineKind::NaHiD => "NaHiD",
            MachineKind::Neurocube => "Neurocube",
        }
    }
}

impl fmt::Display for MachineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MachineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MachineKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown machine {s:?}")))
    }
}

/// How a layer is split across vaults and buffer blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    /// Input channels owned by each vault, ascending.
    pub vault_channels: Vec<Vec<usize>>,
    /// Blocks per input channel (`N`).
    pub blocks: usize,
    /// Input pixels per block (the last block may be shorter).
    pub input_block: usize,
    /// Output pixels per block.
    pub output_block: usize,
    /// Output-channel passes needed so one pass of partial outputs fits the
    /// OB. Every pass reuses the same IB contents.
    pub oc_passes: usize,
}

impl Partition {
    pub fn active_vaults(&self) -> usize {
        self.vault_channels.iter().filter(|c| !c.is_empty()).count()
    }

    /// `(first pixel, pixel count)` of block `k`.
    pub fn block_range(&self, k: usize, pixels: usize) -> (usize, usize) {
        let start = (k * self.input_block).min(pixels);
        (start, (start + self.input_block).min(pixels) - start)
    }
}

pub fn partition_layer(
    layer: &LayerDescriptor,
    geometry: &MemGeometry,
    pe: &PeConfig,
) -> Result<Partition> {
    layer.validate()?;
    geometry.validate()?;
    pe.validate(geometry)?;
    let v = geometry.num_vaults;
    let vault_channels = (0..v)
        .map(|vault| (vault..layer.in_channels).step_by(v).collect())
        .collect();
    let pixels = layer.in_h * layer.in_w;
    let (oh, ow) = layer.conv_out_hw();
    let out_pixels = oh * ow;
    let ib_values = pe.ib_half() / 2;
    let ob_values = pe.ob_half() / 2;
    let max_blocks = match layer.kind {
        LayerKind::FC => 1,
        LayerKind::CONV => pixels,
    };
    let unfit = || {
        Error::Unpartitionable(format!(
            "layer {}: one block does not fit IB {} B / OB {} B",
            layer.name,
            pe.ib_half(),
            pe.ob_half()
        ))
    };
    let fits_input = |n: usize| pixels.div_ceil(n) <= ib_values;
    let fits_output = |n: usize| layer.out_channels * out_pixels.div_ceil(n) <= ob_values;
    let first = (1..=max_blocks)
        .find(|&n| fits_input(n))
        .ok_or_else(unfit)?;
    let blocks = (first..=max_blocks)
        .find(|&n| fits_output(n))
        .unwrap_or(max_blocks);
    let output_block = out_pixels.div_ceil(blocks);
    // one M-channel group of one output pixel is the smallest OB unit
    let oc_per_pass = (ob_values / output_block) / geometry.bus_bits * geometry.bus_bits;
    if oc_per_pass == 0 && !fits_output(blocks) {
        return Err(unfit());
    }
    let oc_passes = if fits_output(blocks) {
        1
    } else {
        layer.out_channels.div_ceil(oc_per_pass)
    };
    Ok(Partition {
        vault_channels,
        blocks,
        input_block: pixels.div_ceil(blocks),
        output_block,
        oc_passes,
    })
}

/// One weight beat on a vault bus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub vault: usize,
    pub die: usize,
    pub bank: usize,
    pub plane: u8,
    pub group: usize,
}

/// Result of one layer on one machine.
#[derive(Clone, Debug)]
pub struct LayerRun {
    pub outputs: Tensor,
    /// Final accumulators before the SFU, `[OC][OH][OW]`. LOG2 machines
    /// hold int16 values, the INT8 baseline holds int32 values.
    pub accumulators: Vec<i32>,
    pub counters: AccessCounters,
    pub cycles: u64,
    /// Exponents of the layer inputs as the hardware quantized them.
    /// Empty for the INT8 baseline.
    pub histogram: ExpHistogram,
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatTotals {
    pub weights: u64,
    pub inputs: u64,
    pub outputs: u64,
}

impl BeatTotals {
    pub fn of(c: &AccessCounters) -> Self {
        BeatTotals {
            weights: c.dram_weight_beats,
            inputs: c.dram_input_beats,
            outputs: c.dram_output_beats,
        }
    }

    pub fn total(&self) -> u64 {
        self.weights + self.inputs + self.outputs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub cycles: u64,
    pub beats: BeatTotals,
}

/// Summary of one machine running one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub machine: MachineKind,
    pub network: String,
    pub cycles: u64,
    pub beats: BeatTotals,
    pub counters: AccessCounters,
    pub energy: EnergyBreakdown,
    /// SHA-256 of the input tensor file encoding.
    pub input_fingerprint: String,
    /// SHA-256 of the final output tensor file encoding.
    pub output_fingerprint: String,
    pub layers: Vec<LayerReport>,
}

/// Everything a run needs besides the workload.
#[derive(Clone, Debug, Default)]
pub struct SimConfig {
    pub geometry: MemGeometry,
    pub pe: PeConfig,
    pub energy: EnergyConfig,
    /// Seed for synthetic weights of layers without a weight file.
    pub weight_seed: u64,
    pub trace: bool,
}

pub fn fingerprint(t: &Tensor) -> String {
    Sha256::digest(t.to_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-layer knobs that are not part of the hardware configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    /// Weight scale `s` used to de-quantize outputs.
    pub weight_scale: f64,
    pub trace: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions {
            weight_scale: crate::model::LayerQuant::default().scale,
            trace: false,
        }
    }
}

/// Flat output pixel fed by input pixel `(iy, ix)` through kernel offset `k`.
fn tap_output(
    layer: &LayerDescriptor,
    (oh, ow): (usize, usize),
    iy: usize,
    ix: usize,
    k: usize,
) -> Option<usize> {
    let (ky, kx) = (k / layer.kernel_w, k % layer.kernel_w);
    let ty = (iy + layer.padding).checked_sub(ky)?;
    let tx = (ix + layer.padding).checked_sub(kx)?;
    if ty % layer.stride != 0 || tx % layer.stride != 0 {
        return None;
    }
    let (oy, ox) = (ty / layer.stride, tx / layer.stride);
    (oy < oh && ox < ow).then_some(oy * ow + ox)
}

/// Input pixel read by output `(oy, ox)` through kernel offset `k`.
fn tap_input(layer: &LayerDescriptor, oy: usize, ox: usize, k: usize) -> Option<usize> {
    let (ky, kx) = (k / layer.kernel_w, k % layer.kernel_w);
    let iy = (oy * layer.stride + ky).checked_sub(layer.padding)?;
    let ix = (ox * layer.stride + kx).checked_sub(layer.padding)?;
    (iy < layer.in_h && ix < layer.in_w).then_some(iy * layer.in_w + ix)
}

/// Issues `tagged` beats (each with its group id) as coalesced bank requests.
fn issue_beats(
    sched: &mut BeatScheduler,
    tagged: &[(BeatAccess, usize)],
    counters: &mut AccessCounters,
    trace: Option<(&mut Vec<TraceRecord>, u64, usize, &MemGeometry)>,
) {
    let requests = coalesce(tagged.iter().map(|t| t.0));
    counters.dram_row_activations += requests.len() as u64;
    let bpc = sched.beats_per_cycle();
    let mut trace = trace;
    for r in requests {
        let issued = sched.issue(r.bank, r.beats);
        if let Some((records, clock, vault, geometry)) = trace.as_mut() {
            let (die, bank) = geometry.die_and_bank(r.bank);
            let hits = tagged
                .iter()
                .filter(|(a, _)| a.bank == r.bank && a.row == r.row);
            for (i, (a, group)) in hits.enumerate() {
                records.push(TraceRecord {
                    cycle: *clock + (issued.first_beat_slot + i as u64) / bpc,
                    vault: *vault,
                    die,
                    bank,
                    plane: a.plane,
                    group: *group,
                });
            }
        }
    }
}

struct IsLayer<'a> {
    layer: &'a LayerDescriptor,
    inputs: &'a [Real16],
    layout: &'a WeightLayout,
    part: &'a Partition,
    pe: &'a PeConfig,
    trace: bool,
}

struct VaultRun {
    partial: Vec<PartialOutput>,
    counters: AccessCounters,
    cycles: u64,
    histogram: ExpHistogram,
    trace: Vec<TraceRecord>,
}

struct Step {
    channel: usize,
    block: usize,
    prefetch: u64,
}

fn run_is_vault(ctx: &IsLayer, vault: usize) -> Result<VaultRun> {
    let layer = ctx.layer;
    let layout = ctx.layout;
    let geometry = layout.geometry();
    let m = geometry.bus_bits;
    let banks = geometry.total_banks();
    let d = ctx.pe.num_adders as u64;
    let out_hw = layer.conv_out_hw();
    let oc = layer.out_channels;
    let out_pixels = out_hw.0 * out_hw.1;
    let pixels = layer.in_h * layer.in_w;
    let karea = layer.kernel_area();
    let oc_blocks = layout.oc_blocks();
    let standard = layout.kind() == LayoutKind::Standard;

    let mut counters = AccessCounters::default();
    let mut histogram = ExpHistogram::default();
    let mut trace = Vec::new();
    let mut partial = vec![PartialOutput::default(); oc * out_pixels];

    // Pre-Processing: one IB fill per (channel, block)
    let mut steps = Vec::new();
    for (local, &channel) in ctx.part.vault_channels[vault].iter().enumerate() {
        for block in 0..ctx.part.blocks {
            let (_, n) = ctx.part.block_range(block, pixels);
            if n == 0 {
                continue;
            }
            let beats = (n * ACT_BITS).div_ceil(m) as u32;
            let bank = (local * ctx.part.blocks + block) % banks;
            counters.dram_input_beats += beats as u64;
            counters.dram_input_values += n as u64;
            counters.dram_row_activations += 1;
            counters.ib_writes += n as u64;
            steps.push(Step {
                channel,
                block,
                prefetch: schedule_beats(&[(bank, beats)], geometry),
            });
        }
    }

    // Execution, double-buffered against the next prefetch
    let mut clock = steps.first().map_or(0, |s| s.prefetch);
    let mut fetches: Vec<GroupFetch> = Vec::with_capacity(karea * oc_blocks);
    let mut tagged: Vec<(BeatAccess, usize)> = Vec::new();
    for (i, step) in steps.iter().enumerate() {
        let mut sched = BeatScheduler::new(geometry);
        let mut add_cycles = 0u64;
        let (start, n) = ctx.part.block_range(step.block, pixels);
        for p in start..start + n {
            counters.ib_reads += 1;
            let act: QuantActivation = log2_quantize_hw(ctx.inputs[step.channel * pixels + p])?;
            histogram.add(&act);
            if act.is_zero {
                add_cycles += 1;
                continue;
            }
            counters.quants += 1;
            fetches.clear();
            tagged.clear();
            for k in 0..karea {
                for ob in 0..oc_blocks {
                    let key = GroupKey {
                        channel: step.channel,
                        kernel_offset: k,
                        oc_block: ob,
                    };
                    let (_, group) = layout.locate(key);
                    let f = fetch_weight_group(layout, vault, group, act.exp, true)?;
                    counters.dram_weight_beats += f.beats as u64;
                    counters.wb_writes += f.beats as u64;
                    counters.wb_reads += f.beats as u64;
                    tagged.extend(f.accesses.iter().map(|&a| (a, group)));
                    fetches.push(f);
                }
            }
            let records = ctx.trace.then_some((&mut trace, clock, vault, geometry));
            issue_beats(&mut sched, &tagged, &mut counters, records);

            let len = slice_len_for(act.exp);
            let (iy, ix) = (p / layer.in_w, p % layer.in_w);
            let mut terms = 0u64;
            for k in 0..karea {
                let Some(o) = tap_output(layer, out_hw, iy, ix, k) else {
                    continue;
                };
                for c in 0..oc {
                    let slice = fetches[k * oc_blocks + c / m].slices[c % m];
                    let slice = if standard { slice.top(len) } else { slice };
                    let shifted = decode_and_shift(slice, act.exp)?;
                    counters.shift_decodes += 1;
                    counters.ob_reads += 1;
                    counters.ob_writes += 1;
                    let idx = c * out_pixels + o;
                    partial[idx] = accumulate(partial[idx], shifted, act.sign, &mut counters);
                    terms += 1;
                }
            }
            add_cycles += terms.div_ceil(d);
        }
        let compute = sched.finish().max(add_cycles);
        let next = steps.get(i + 1).map_or(0, |s| s.prefetch);
        clock += compute.max(next);
    }
    Ok(VaultRun {
        partial,
        counters,
        cycles: clock,
        histogram,
        trace,
    })
}

/// Gather of `contributors` partial-output sets, SFU, redistribution and
/// write-back. Counts everything except the reduction adds, which the
/// caller performs. Returns the tail cycles.
fn post_process(
    layer: &LayerDescriptor,
    outputs: &Tensor,
    contributors: usize,
    geometry: &MemGeometry,
    pe: &PeConfig,
    counters: &mut AccessCounters,
) -> u64 {
    let v = geometry.num_vaults;
    let m = geometry.bus_bits;
    let d = pe.num_adders as u64;
    let noc = pe.noc_words_per_cycle as u64;
    let (oh, ow) = layer.conv_out_hw();
    let outs = (layer.out_channels * oh * ow) as u64;

    let gathered = contributors.saturating_sub(1) as u64 * outs;
    counters.noc_transfers += gathered;
    counters.ob_reads += gathered;
    counters.ob_writes += gathered;
    counters.sfu_outputs += outs;

    // each output channel returns to the vault that will own it next
    let per_channel = outputs.len() / layer.out_channels;
    let mut owned = vec![0usize; v];
    for c in 0..layer.out_channels {
        owned[c % v] += per_channel;
    }
    let redistributed = (outputs.len() - owned[0]) as u64;
    counters.noc_transfers += redistributed;

    let row_beats = (geometry.row_bits / m) as u32;
    let mut write_cycles = 0;
    for values in owned {
        let beats = (values * ACT_BITS).div_ceil(m) as u32;
        let requests: Vec<(usize, u32)> = (0..beats.div_ceil(row_beats))
            .map(|r| {
                (
                    r as usize % geometry.total_banks(),
                    row_beats.min(beats - r * row_beats),
                )
            })
            .collect();
        counters.dram_output_beats += beats as u64;
        counters.dram_row_activations += requests.len() as u64;
        write_cycles = write_cycles.max(schedule_beats(&requests, geometry));
    }

    gathered.div_ceil(noc)
        + gathered.div_ceil(d)
        + outs.div_ceil(d)
        + redistributed.div_ceil(noc)
        + write_cycles
}

fn check_operands<'a>(
    layer: &LayerDescriptor,
    inputs: &'a Tensor,
    weights: &Tensor,
) -> Result<&'a [Real16]> {
    let values = inputs
        .as_real16()
        .ok_or_else(|| Error::Parse(format!("layer {}: inputs must be Real16", layer.name)))?;
    if values.len() != layer.input_len() {
        return Err(Error::DimsMismatch {
            expected: layer.input_dims(),
            found: inputs.dims().to_vec(),
        });
    }
    if weights.dims() != layer.weight_dims().as_slice() {
        return Err(Error::DimsMismatch {
            expected: layer.weight_dims(),
            found: weights.dims().to_vec(),
        });
    }
    Ok(values)
}

fn run_input_stationary(
    machine: MachineKind,
    layer: &LayerDescriptor,
    inputs: &[Real16],
    weights: &Tensor,
    geometry: &MemGeometry,
    pe: &PeConfig,
    opts: &LayerOptions,
) -> Result<LayerRun> {
    let part = partition_layer(layer, geometry, pe)?;
    let layout = place_weights(weights, machine.layout(), geometry)?;
    let ctx = IsLayer {
        layer,
        inputs,
        layout: &layout,
        part: &part,
        pe,
        trace: opts.trace,
    };
    let vaults = (0..geometry.num_vaults)
        .into_par_iter()
        .map(|v| run_is_vault(&ctx, v))
        .collect::<Result<Vec<_>>>()?;

    let mut counters = AccessCounters::default();
    let mut histogram = ExpHistogram::default();
    let mut trace = Vec::new();
    let mut body = 0;
    for run in &vaults {
        counters.merge(&run.counters);
        histogram.merge(&run.histogram);
        trace.extend_from_slice(&run.trace);
        body = body.max(run.cycles);
    }

    // Post-Processing: sum the partials of every vault that computed
    // anything at the centralized PE, in vault order
    let contributors: Vec<&VaultRun> = vaults.iter().filter(|r| r.counters.quants > 0).collect();
    let mut reduced = match contributors.first() {
        Some(first) => first.partial.clone(),
        None => vec![PartialOutput::default(); vaults[0].partial.len()],
    };
    for run in contributors.iter().skip(1) {
        for (acc, p) in reduced.iter_mut().zip(&run.partial) {
            *acc = accumulate(*acc, p.value, Sign::Pos, &mut counters);
        }
    }
    let values: Vec<i16> = reduced.iter().map(|p| p.value).collect();
    let outputs = sfu_apply(&values, layer, opts.weight_scale)?;
    let tail = post_process(
        layer,
        &outputs,
        contributors.len(),
        geometry,
        pe,
        &mut counters,
    );
    log::debug!("{machine} {}: body {body} tail {tail} cycles", layer.name);
    Ok(LayerRun {
        outputs,
        accumulators: values.into_iter().map(i32::from).collect(),
        counters,
        cycles: body + tail,
        histogram,
        trace,
    })
}

struct PeRun {
    outputs: Vec<(usize, i32)>,
    counters: AccessCounters,
    cycles: u64,
    trace: Vec<TraceRecord>,
}

struct OsLayer<'a> {
    layer: &'a LayerDescriptor,
    inputs: &'a [i8],
    weights: &'a [i8],
    layout: &'a WeightLayout,
    pe: &'a PeConfig,
    trace: bool,
}

fn run_os_pe(ctx: &OsLayer, pe_index: usize) -> Result<PeRun> {
    let layer = ctx.layer;
    let layout = ctx.layout;
    let geometry = layout.geometry();
    let v = geometry.num_vaults;
    let m = geometry.bus_bits;
    let banks = geometry.total_banks();
    let d = ctx.pe.num_adders;
    let (oh, ow) = layer.conv_out_hw();
    let (oc, ic) = (layer.out_channels, layer.in_channels);
    let pixels = layer.in_h * layer.in_w;
    let karea = layer.kernel_area();
    let oc_tiles = oc.div_ceil(d);
    let tiles = oh * ow * oc_tiles;

    let mut counters = AccessCounters::default();
    let mut trace = Vec::new();
    let mut outputs = Vec::new();
    let mut clock = 0u64;
    let mut tagged: Vec<(BeatAccess, usize)> = Vec::new();
    for t in (pe_index..tiles).step_by(v) {
        let (pixel, tile) = (t / oc_tiles, t % oc_tiles);
        let (oy, ox) = (pixel / ow, pixel % ow);
        let oc0 = tile * d;
        let width = d.min(oc - oc0);
        let taps: Vec<(usize, usize)> = (0..karea)
            .filter_map(|k| tap_input(layer, oy, ox, k).map(|p| (k, p)))
            .collect();
        let mut scheds: Vec<Option<BeatScheduler>> = vec![None; v];
        let mut acc = vec![0i32; width];
        let mut macs_cycles = 0u64;
        for c in 0..ic {
            let src = c % v;
            let sched = scheds[src].get_or_insert_with(|| BeatScheduler::new(geometry));
            let n = taps.len();
            if n > 0 {
                let beats = (n * ACT_BITS_INT8).div_ceil(m) as u32;
                sched.issue((c / v) % banks, beats);
                counters.dram_input_beats += beats as u64;
                counters.dram_input_values += n as u64;
                counters.dram_row_activations += 1;
                counters.ib_writes += n as u64;
                counters.ib_reads += n as u64;
                if src != pe_index {
                    counters.noc_transfers += n as u64;
                }
            }
            for &(k, p) in &taps {
                let x = ctx.inputs[c * pixels + p] as i32;
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += ctx.weights[((oc0 + j) * ic + c) * karea + k] as i32 * x;
                }
                counters.macs += width as u64;
                macs_cycles += 1;
                // weights of this tile's channels, full width
                tagged.clear();
                for ob in oc0 / m..=(oc0 + width - 1) / m {
                    let lo = oc0.max(ob * m);
                    let hi = (oc0 + width).min((ob + 1) * m);
                    let key = GroupKey {
                        channel: c,
                        kernel_offset: k,
                        oc_block: ob,
                    };
                    let (vault, group) = layout.locate(key);
                    let base = layout.address(vault, group)?[0];
                    let beats = ((hi - lo) * WEIGHT_BITS as usize).div_ceil(m) as u32;
                    tagged.extend((0..beats).map(|b| {
                        let access = BeatAccess {
                            bank: base.bank,
                            row: base.row,
                            plane: b as u8,
                        };
                        (access, group)
                    }));
                    counters.dram_weight_beats += beats as u64;
                    counters.wb_writes += beats as u64;
                    counters.wb_reads += beats as u64;
                    if vault != pe_index {
                        counters.noc_transfers +=
                            ((hi - lo) * WEIGHT_BITS as usize).div_ceil(16) as u64;
                    }
                }
                let sched = scheds[src].get_or_insert_with(|| BeatScheduler::new(geometry));
                let records = ctx.trace.then_some((&mut trace, clock, src, geometry));
                issue_beats(sched, &tagged, &mut counters, records);
            }
        }
        let mem = scheds
            .iter()
            .flatten()
            .map(BeatScheduler::finish)
            .max()
            .unwrap_or(0);
        counters.ob_writes += width as u64;
        clock += mem + macs_cycles;
        outputs.extend(
            acc.into_iter()
                .enumerate()
                .map(|(j, a)| ((oc0 + j) * oh * ow + pixel, a)),
        );
    }
    Ok(PeRun {
        outputs,
        counters,
        cycles: clock,
        trace,
    })
}

fn run_output_stationary(
    layer: &LayerDescriptor,
    inputs: &[Real16],
    weights: &Tensor,
    geometry: &MemGeometry,
    pe: &PeConfig,
    opts: &LayerOptions,
) -> Result<LayerRun> {
    geometry.validate()?;
    pe.validate(geometry)?;
    let layout = place_weights(weights, LayoutKind::Standard, geometry)?;
    let peak = inputs.iter().map(|x| x.to_f64().abs()).fold(0.0, f64::max);
    let input_scale = if peak > 0.0 {
        peak / i8::MAX as f64
    } else {
        1.0
    };
    let quantized = inputs
        .iter()
        .map(|x| uniform_quantize(x.to_f64(), input_scale, 0).map(|q| q.0))
        .collect::<Result<Vec<i8>>>()?;
    let ctx = OsLayer {
        layer,
        inputs: &quantized,
        weights: weights.as_int8().unwrap_or_default(),
        layout: &layout,
        pe,
        trace: opts.trace,
    };
    let pes = (0..geometry.num_vaults)
        .into_par_iter()
        .map(|p| run_os_pe(&ctx, p))
        .collect::<Result<Vec<_>>>()?;

    let (oh, ow) = layer.conv_out_hw();
    let outs = layer.out_channels * oh * ow;
    let mut accumulators = vec![0i32; outs];
    let mut counters = AccessCounters::default();
    let mut trace = Vec::new();
    let mut body = 0;
    for run in &pes {
        counters.merge(&run.counters);
        trace.extend_from_slice(&run.trace);
        body = body.max(run.cycles);
        for &(i, a) in &run.outputs {
            accumulators[i] = a;
        }
    }
    // same gather as the IS machines; a PE's partials are zero outside its tiles
    let contributors = pes.iter().filter(|r| !r.outputs.is_empty()).count();
    counters.adds += contributors.saturating_sub(1) as u64 * outs as u64;
    let max = Real16::MAX.to_f64();
    let values = accumulators
        .iter()
        .map(|&a| Real16::from_f64((a as f64 * opts.weight_scale * input_scale).clamp(-max, max)))
        .collect();
    let outputs = sfu_finish(values, layer)?;
    let tail = post_process(layer, &outputs, contributors, geometry, pe, &mut counters);
    log::debug!("Neurocube {}: body {body} tail {tail} cycles", layer.name);
    Ok(LayerRun {
        outputs,
        accumulators,
        counters,
        cycles: body + tail,
        histogram: ExpHistogram::default(),
        trace,
    })
}

/// Runs one layer with the default weight scale and no trace.
pub fn run_layer(
    machine: MachineKind,
    layer: &LayerDescriptor,
    inputs: &Tensor,
    weights: &Tensor,
    geometry: &MemGeometry,
    pe: &PeConfig,
) -> Result<LayerRun> {
    run_layer_with(
        machine,
        layer,
        inputs,
        weights,
        geometry,
        pe,
        &LayerOptions::default(),
    )
}

pub fn run_layer_with(
    machine: MachineKind,
    layer: &LayerDescriptor,
    inputs: &Tensor,
    weights: &Tensor,
    geometry: &MemGeometry,
    pe: &PeConfig,
    opts: &LayerOptions,
) -> Result<LayerRun> {
    layer.validate()?;
    let values = check_operands(layer, inputs, weights)?;
    if machine.is_input_stationary() {
        run_input_stationary(machine, layer, values, weights, geometry, pe, opts)
    } else {
        run_output_stationary(layer, values, weights, geometry, pe, opts)
    }
}

/// Result of one machine running a whole network.
#[derive(Clone, Debug)]
pub struct NetworkRun {
    pub report: SimReport,
    pub outputs: Tensor,
    /// Exponent histogram over every layer's inputs (LOG2 machines only).
    pub histogram: ExpHistogram,
    pub trace: Vec<TraceRecord>,
}

/// Chains every layer of `net`. Inter-layer activations are written back to
/// DRAM by one layer and read again by the next; both sides are counted.
pub fn run_network(
    machine: MachineKind,
    net: &NetworkDescriptor,
    inputs: &Tensor,
    cfg: &SimConfig,
) -> Result<NetworkRun> {
    net.validate()?;
    cfg.energy.validate()?;
    let input_fingerprint = fingerprint(inputs);
    let mut current = inputs.clone();
    let mut counters = AccessCounters::default();
    let mut histogram = ExpHistogram::default();
    let mut trace = Vec::new();
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut cycles = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        if current.len() != layer.input_len() {
            return Err(Error::DimsMismatch {
                expected: layer.input_dims(),
                found: current.dims().to_vec(),
            });
        }
        let input = current.reshaped(layer.input_dims())?;
        let weights = net.weights_for(i, cfg.weight_seed)?;
        let opts = LayerOptions {
            weight_scale: net.quant_for(&layer.name).scale,
            trace: cfg.trace,
        };
        let run = run_layer_with(
            machine,
            layer,
            &input,
            &weights,
            &cfg.geometry,
            &cfg.pe,
            &opts,
        )?;
        log::info!(
            "{machine} {}: {} cycles, {} beats",
            layer.name,
            run.cycles,
            run.counters.dram_beats()
        );
        let offset = cycles;
        trace.extend(run.trace.iter().map(|r| TraceRecord {
            cycle: r.cycle + offset,
            ..*r
        }));
        cycles += run.cycles;
        counters.merge(&run.counters);
        histogram.merge(&run.histogram);
        layers.push(LayerReport {
            name: layer.name.clone(),
            cycles: run.cycles,
            beats: BeatTotals::of(&run.counters),
        });
        current = run.outputs;
    }
    let report = SimReport {
        machine,
        network: net.name.clone(),
        cycles,
        beats: BeatTotals::of(&counters),
        energy: energy(&counters, cycles, &cfg.energy, cfg.geometry.logic_freq_hz),
        counters,
        input_fingerprint,
        output_fingerprint: fingerprint(&current),
        layers,
    };
    Ok(NetworkRun {
        report,
        outputs: current,
        histogram,
        trace,
    })
}
