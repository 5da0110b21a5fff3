//! Energy model and machine-to-machine comparisons.
//!
//! Energies are per-event constants supplied by configuration. The shipped
//! defaults are illustrative: DRAM beats cost far more than SRAM accesses,
//! which cost far more than an add. Only ratios and orderings between
//! machines are meaningful with them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mem3d::AccessCounters;
use crate::sched::SimReport;
use crate::{Error, Result};

/// Per-event energies in joules and static power in watts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub dram_per_beat: f64,
    pub dram_per_row_activation: f64,
    pub sram_ib_per_access: f64,
    pub sram_ob_per_access: f64,
    pub sram_wb_per_access: f64,
    pub add: f64,
    pub mac: f64,
    pub quant: f64,
    pub shift_decode: f64,
    pub noc_per_transfer: f64,
    pub sfu_per_output: f64,
    pub pe_static: f64,
    pub dram_static: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            dram_per_beat: 120e-12,
            dram_per_row_activation: 200e-12,
            sram_ib_per_access: 1.0e-12,
            sram_ob_per_access: 4.0e-12,
            sram_wb_per_access: 1.0e-12,
            add: 0.03e-12,
            mac: 0.25e-12,
            quant: 0.02e-12,
            shift_decode: 0.02e-12,
            noc_per_transfer: 2.0e-12,
            sfu_per_output: 1.0e-12,
            pe_static: 16e-3,
            dram_static: 50e-3,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.dram_per_beat,
            self.dram_per_row_activation,
            self.sram_ib_per_access,
            self.sram_ob_per_access,
            self.sram_wb_per_access,
            self.add,
            self.mac,
            self.quant,
            self.shift_decode,
            self.noc_per_transfer,
            self.sfu_per_output,
            self.pe_static,
            self.dram_static,
        ];
        if fields.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "energy constants must be finite and non-negative".into(),
            ))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EnergyConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Energy per hardware category, in joules.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    #[serde(rename = "DRAM")]
    pub dram: f64,
    #[serde(rename = "Buffers")]
    pub buffers: f64,
    #[serde(rename = "Compute")]
    pub compute: f64,
    #[serde(rename = "NoC")]
    pub noc: f64,
    #[serde(rename = "Static")]
    pub static_energy: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn from_categories(
        dram: f64,
        buffers: f64,
        compute: f64,
        noc: f64,
        static_energy: f64,
    ) -> Self {
        EnergyBreakdown {
            dram,
            buffers,
            compute,
            noc,
            static_energy,
            total: dram + buffers + compute + noc + static_energy,
        }
    }

    pub fn categories(&self) -> [(&'static str, f64); 5] {
        [
            ("DRAM", self.dram),
            ("Buffers", self.buffers),
            ("Compute", self.compute),
            ("NoC", self.noc),
            ("Static", self.static_energy),
        ]
    }
}

pub fn energy(
    counters: &AccessCounters,
    cycles: u64,
    cfg: &EnergyConfig,
    freq_hz: f64,
) -> EnergyBreakdown {
    let c = counters;
    let n = |v: u64| v as f64;
    let dram = n(c.dram_beats()) * cfg.dram_per_beat
        + n(c.dram_row_activations) * cfg.dram_per_row_activation;
    let buffers = n(c.ib_reads + c.ib_writes) * cfg.sram_ib_per_access
        + n(c.ob_reads + c.ob_writes) * cfg.sram_ob_per_access
        + n(c.wb_reads + c.wb_writes) * cfg.sram_wb_per_access;
    let compute = n(c.adds) * cfg.add
        + n(c.macs) * cfg.mac
        + n(c.quants) * cfg.quant
        + n(c.shift_decodes) * cfg.shift_decode
        + n(c.sfu_outputs) * cfg.sfu_per_output;
    let noc = n(c.noc_transfers) * cfg.noc_per_transfer;
    let static_energy = if freq_hz > 0.0 {
        (cfg.pe_static + cfg.dram_static) * n(cycles) / freq_hz
    } else {
        0.0
    };
    EnergyBreakdown::from_categories(dram, buffers, compute, noc, static_energy)
}

/// Ratios of `b` (the baseline) over `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `cycles(b) / cycles(a)`.
    pub speedup: f64,
    /// `energy(b) / energy(a)`.
    pub energy_ratio: f64,
    /// `beats(a) / beats(b)` over all DRAM traffic.
    pub access_ratio: f64,
    /// `beats(a) / beats(b)` over weight traffic only.
    pub weight_access_ratio: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == den {
        1.0
    } else {
        num / den
    }
}

pub fn compare(a: &SimReport, b: &SimReport) -> Result<Comparison> {
    if a.network != b.network || a.input_fingerprint != b.input_fingerprint {
        return Err(Error::MismatchedRuns(format!(
            "{}/{} vs {}/{}",
            a.network, a.input_fingerprint, b.network, b.input_fingerprint
        )));
    }
    Ok(Comparison {
        speedup: ratio(b.cycles as f64, a.cycles as f64),
        energy_ratio: ratio(b.energy.total, a.energy.total),
        access_ratio: ratio(
            a.counters.dram_beats() as f64,
            b.counters.dram_beats() as f64,
        ),
        weight_access_ratio: ratio(a.beats.weights as f64, b.beats.weights as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_cfg() -> EnergyConfig {
        EnergyConfig::from_json(
            r#"{"dram_per_beat":0,"dram_per_row_activation":0,"sram_ib_per_access":0,
            "sram_ob_per_access":0,"sram_wb_per_access":0,"add":0,"mac":0,"quant":0,
            "shift_decode":0,"noc_per_transfer":0,"sfu_per_output":0,"pe_static":0,"dram_static":0}"#,
        )
        .unwrap()
    }

    #[test]
    fn zero_counters_zero_energy() {
        let e = energy(
            &AccessCounters::default(),
            0,
            &EnergyConfig::default(),
            300e6,
        );
        assert_eq!(e.total, 0.0);
    }

    #[test]
    fn beats_only() {
        let cfg = EnergyConfig {
            dram_per_beat: 1e-12,
            ..zero_cfg()
        };
        let c = AccessCounters {
            dram_weight_beats: 10,
            ..AccessCounters::default()
        };
        let e = energy(&c, 0, &cfg, 300e6);
        assert_eq!(e.dram, 10e-12);
        assert_eq!(e.total, e.dram);
    }

    #[test]
    fn static_is_linear_in_cycles() {
        let cfg = EnergyConfig::default();
        let c = AccessCounters::default();
        let full = energy(&c, 1000, &cfg, 300e6);
        let half = energy(&c, 500, &cfg, 300e6);
        assert_eq!(full.static_energy, 2.0 * half.static_energy);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = EnergyConfig::from_json(r#"{"dram_per_beat": 1, "bogus": 2}"#).unwrap_err();
        assert_eq!(err.kind(), "ParseError");
        let mut v = serde_json::to_value(EnergyConfig::default()).unwrap();
        v["add"] = serde_json::json!(-1.0);
        assert!(EnergyConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn breakdown_is_additive() {
        let c = AccessCounters {
            dram_weight_beats: 123,
            dram_row_activations: 17,
            ib_reads: 5,
            ob_writes: 9,
            wb_reads: 3,
            adds: 99,
            macs: 7,
            quants: 4,
            noc_transfers: 11,
            sfu_outputs: 2,
            ..AccessCounters::default()
        };
        let e = energy(&c, 777, &EnergyConfig::default(), 300e6);
        let sum: f64 = e.categories().iter().map(|(_, v)| v).sum();
        assert_eq!(e.total, sum);
    }
}
