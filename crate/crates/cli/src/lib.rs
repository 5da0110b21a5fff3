//! Workload plumbing behind the `qeihan` binary: building activation streams,
//! running machines, and writing CSV/JSON results.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qeihan::analysis::{histogram_of_tensor, negative_fraction, savings_ratio, ExpHistogram};
use qeihan::mem3d::{MemGeometry, WEIGHT_BITS};
use qeihan::metrics::{compare, EnergyConfig};
use qeihan::model::{
    load_network, load_tensor, synth_activations, ExpDistribution, NetworkDescriptor, Tensor,
};
use qeihan::pe::PeConfig;
use qeihan::sched::{run_network, NetworkRun, SimConfig, SimReport, TraceRecord};
use qeihan::MachineKind;
use rayon::prelude::*;
use serde::de::DeserializeOwned;

/// Where activations come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ActSource {
    Tensor(PathBuf),
    Dist {
        path: PathBuf,
        /// Defaults to the first layer's input size.
        count: Option<usize>,
    },
}

/// Everything one invocation needs.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub network: Option<PathBuf>,
    pub machines: Vec<MachineKind>,
    pub geometry: MemGeometry,
    pub pe: PeConfig,
    pub energy: EnergyConfig,
    pub acts: ActSource,
    pub seed: u64,
    pub out: PathBuf,
    pub trace: bool,
}

impl RunSpec {
    pub fn new(acts: ActSource, out: impl Into<PathBuf>) -> Self {
        RunSpec {
            network: None,
            machines: vec![MachineKind::QeiHaN, MachineKind::NaHiD],
            geometry: MemGeometry::default(),
            pe: PeConfig::default(),
            energy: EnergyConfig::default(),
            acts,
            seed: 0,
            out: out.into(),
            trace: false,
        }
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            geometry: self.geometry.clone(),
            pe: self.pe.clone(),
            energy: self.energy.clone(),
            weight_seed: self.seed,
            trace: self.trace,
        }
    }

    fn load_network(&self) -> Result<NetworkDescriptor> {
        let path = self.network.as_ref().context("--network is required")?;
        Ok(load_network(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.machines.is_empty() {
            bail!(qeihan::Error::InvalidConfig(
                "at least one machine is required".into()
            ));
        }
        self.geometry.validate()?;
        self.pe.validate(&self.geometry)?;
        self.energy.validate()?;
        Ok(())
    }
}

/// Parses `--machines QeiHaN,NaHiD` (case-insensitive, `all` for every machine).
pub fn parse_machines(list: &str) -> Result<Vec<MachineKind>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(MachineKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in list.split(',').filter(|s| !s.trim().is_empty()) {
        let m: MachineKind = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

/// Reads a config from a JSON file, or from `key=value` pairs separated by
/// commas. Unset keys keep their defaults.
pub fn parse_overrides<T: DeserializeOwned>(arg: &str) -> Result<T> {
    let path = Path::new(arg);
    let value = if path.is_file() {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| qeihan::Error::Parse(format!("{}: {e}", path.display())))?
    } else {
        let mut map = serde_json::Map::new();
        for pair in arg.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                qeihan::Error::Parse(format!("override {pair:?} is not key=value"))
            })?;
            let v = v.trim();
            let parsed = serde_json::from_str(v)
                .unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            map.insert(k.trim().to_string(), parsed);
        }
        serde_json::Value::Object(map)
    };
    Ok(serde_json::from_value(value)
        .map_err(|e| qeihan::Error::Parse(format!("override {arg:?}: {e}")))?)
}

/// Writes `contents` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&target)
        .with_context(|| format!("writing {}", target.display()))?;
    Ok(target)
}

fn activations(spec: &RunSpec, default_count: Option<usize>) -> Result<Tensor> {
    match &spec.acts {
        ActSource::Tensor(path) => Ok(load_tensor(path, None)?),
        ActSource::Dist { path, count } => {
            let dist = ExpDistribution::load(path)?;
            let n = count
                .or(default_count)
                .context("--count is required when no network fixes the input size")?;
            Ok(synth_activations(&dist, n, spec.seed)?)
        }
    }
}

fn histogram_csv(h: &ExpHistogram) -> String {
    let mut s = String::from("exponent,count\n");
    for (bin, count) in h.bins() {
        let _ = writeln!(s, "{bin},{count}");
    }
    s
}

fn savings_csv(h: &ExpHistogram) -> String {
    let mut s = String::from("metric,value,note\n");
    match savings_ratio(h, WEIGHT_BITS) {
        Ok(r) => {
            let neg = negative_fraction(h).unwrap_or(0.0);
            let _ = writeln!(s, "savings,{},", r.value());
            let _ = writeln!(s, "negative_fraction,{neg},");
            let _ = writeln!(s, "skipped_bits,{},", r.skipped_bits);
            let _ = writeln!(s, "full_bits,{},", r.full_bits);
        }
        Err(_) => {
            let _ = writeln!(s, "savings,0,all activations pruned");
            let _ = writeln!(s, "negative_fraction,0,all activations pruned");
        }
    }
    let _ = writeln!(s, "pruned,{},", h.count(qeihan::model::ExpBin::Zero));
    s
}

/// Quantizes the activation source and writes `histogram.csv` and `savings.csv`.
pub fn cmd_analyze(spec: &RunSpec) -> Result<Vec<PathBuf>> {
    let default_count = match &spec.network {
        Some(_) => Some(spec.load_network()?.layers[0].input_len()),
        None => None,
    };
    let acts = activations(spec, default_count)?;
    let h = histogram_of_tensor(&acts)?;
    log::info!(
        "analyzed {} activations, {} pruned",
        h.total(),
        h.count(qeihan::model::ExpBin::Zero)
    );
    Ok(vec![
        write_atomic(&spec.out, "histogram.csv", histogram_csv(&h).as_bytes())?,
        write_atomic(&spec.out, "savings.csv", savings_csv(&h).as_bytes())?,
    ])
}

/// Results of one `simulate` invocation.
#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub runs: Vec<NetworkRun>,
    pub files: Vec<PathBuf>,
}

impl SimulateOutput {
    pub fn report(&self, m: MachineKind) -> Option<&SimReport> {
        self.runs.iter().map(|r| &r.report).find(|r| r.machine == m)
    }
}

fn network_inputs(spec: &RunSpec, net: &NetworkDescriptor) -> Result<Tensor> {
    let first = &net.layers[0];
    let acts = activations(spec, Some(first.input_len()))?;
    if acts.len() != first.input_len() {
        bail!(qeihan::Error::DimsMismatch {
            expected: first.input_dims(),
            found: acts.dims().to_vec(),
        });
    }
    Ok(acts.reshaped(first.input_dims())?)
}

fn run_machines(
    spec: &RunSpec,
    net: &NetworkDescriptor,
    inputs: &Tensor,
) -> Result<Vec<NetworkRun>> {
    let cfg = spec.sim_config();
    spec.machines
        .par_iter()
        .map(|&m| run_network(m, net, inputs, &cfg).map_err(Into::into))
        .collect()
}

fn comparison_csv(runs: &[NetworkRun]) -> Result<String> {
    let mut s = String::from(
        "machine,cycles,beats_weights,beats_inputs,beats_outputs,beats_total,energy_total,\
         energy_dram,energy_buffers,energy_compute,energy_noc,energy_static,\
         first_speedup,first_energy_ratio,first_access_ratio,output_sha256\n",
    );
    let first = &runs[0].report;
    for run in runs {
        let r = &run.report;
        let c = compare(first, r)?;
        let e = &r.energy;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.machine,
            r.cycles,
            r.beats.weights,
            r.beats.inputs,
            r.beats.outputs,
            r.beats.total(),
            e.total,
            e.dram,
            e.buffers,
            e.compute,
            e.noc,
            e.static_energy,
            c.speedup,
            c.energy_ratio,
            c.access_ratio,
            r.output_fingerprint
        );
    }
    Ok(s)
}

fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut s = String::from("cycle,vault,die,bank,plane,group\n");
    for t in trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            t.cycle, t.vault, t.die, t.bank, t.plane, t.group
        );
    }
    s
}

/// Runs every requested machine and writes `report_<machine>.json`,
/// `comparison.csv` and, with tracing on, `trace_<machine>.csv`.
pub fn cmd_simulate(spec: &RunSpec) -> Result<SimulateOutput> {
    spec.validate()?;
    let net = spec.load_network()?;
    let inputs = network_inputs(spec, &net)?;
    let runs = run_machines(spec, &net, &inputs)?;
    let mut files = Vec::new();
    for run in &runs {
        let mut json = serde_json::to_string_pretty(&run.report)?;
        json.push('\n');
        let name = format!("report_{}.json", run.report.machine);
        files.push(write_atomic(&spec.out, &name, json.as_bytes())?);
        if spec.trace {
            let name = format!("trace_{}.csv", run.report.machine);
            files.push(write_atomic(
                &spec.out,
                &name,
                trace_csv(&run.trace).as_bytes(),
            )?);
        }
    }
    files.push(write_atomic(
        &spec.out,
        "comparison.csv",
        comparison_csv(&runs)?.as_bytes(),
    )?);
    Ok(SimulateOutput { runs, files })
}

/// One point of the exponent-center sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub center: i8,
    pub savings: f64,
    pub skipped_bits: u64,
    pub full_bits: u64,
    pub speedup: f64,
    pub cycles_qeihan: u64,
    pub cycles_nahid: u64,
    pub weight_beats_qeihan: u64,
    pub weight_beats_nahid: u64,
}

/// Moves all activation mass to a single exponent, from 0 down to -7, and
/// compares QeiHaN against NaHiD at each point. Writes `sweep.csv`.
pub fn cmd_sweep(spec: &RunSpec) -> Result<(Vec<SweepPoint>, PathBuf)> {
    spec.validate()?;
    let net = spec.load_network()?;
    let cfg = spec.sim_config();
    let count = net.layers[0].input_len();
    let points = (0..=7i8)
        .into_par_iter()
        .map(|k| -> Result<SweepPoint> {
            let center = -k;
            let acts = synth_activations(&ExpDistribution::single(center), count, spec.seed)?
                .reshaped(net.layers[0].input_dims())?;
            let h = histogram_of_tensor(&acts)?;
            let s = savings_ratio(&h, WEIGHT_BITS)?;
            let q = run_network(MachineKind::QeiHaN, &net, &acts, &cfg)?.report;
            let n = run_network(MachineKind::NaHiD, &net, &acts, &cfg)?.report;
            Ok(SweepPoint {
                center,
                savings: s.value(),
                skipped_bits: s.skipped_bits,
                full_bits: s.full_bits,
                speedup: compare(&q, &n)?.speedup,
                cycles_qeihan: q.cycles,
                cycles_nahid: n.cycles,
                weight_beats_qeihan: q.beats.weights,
                weight_beats_nahid: n.beats.weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from(
        "center,savings,speedup,cycles_qeihan,cycles_nahid,weight_beats_qeihan,weight_beats_nahid\n",
    );
    for p in &points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            p.center,
            p.savings,
            p.speedup,
            p.cycles_qeihan,
            p.cycles_nahid,
            p.weight_beats_qeihan,
            p.weight_beats_nahid
        );
    }
    let path = write_atomic(&spec.out, "sweep.csv", csv.as_bytes())?;
    Ok((points, path))
}

/// The one-line error format printed by the binary.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<qeihan::Error>())
        .map_or_else(
            || {
                if err.chain().any(|e| e.is::<std::io::Error>()) {
                    "IoError"
                } else {
                    "UsageError"
                }
            },
            |e| e.kind(),
        );
    // sources already quoted by their parent are skipped
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    let msg = msg.replace('\n', " ");
    format!("error: kind={kind} msg={msg}")
}
