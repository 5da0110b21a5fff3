//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use qeihan::analysis::{histogram_of_tensor, negative_fraction, savings_ratio};
use qeihan::mem3d::{schedule_beats, AccessCounters, MemGeometry};
use qeihan::metrics::{energy, EnergyConfig};
use qeihan::model::{synth_activations, ExpDistribution, LayerDescriptor, Tensor};
use qeihan::pe::{decode_and_shift, slice_len_for, MsbSlice, PeConfig};
use qeihan::quant::{log2_quantize_hw, log2_quantize_ref};
use qeihan::sched::{run_layer, run_layer_with, LayerOptions};
use qeihan::{MachineKind, Real16};
use qeihan_cli::{cmd_simulate, cmd_sweep, ActSource, RunSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

const DISTRIBUTIONS: [(&str, f64); 5] = [
    ("ptblm", 0.98),
    ("bert_large", 0.85),
    ("bert_base", 0.82),
    ("transformer", 0.57),
    ("alexnet", 0.36),
];

fn distribution(name: &str) -> ExpDistribution {
    ExpDistribution::load(&data_dir().join(format!("distributions/{name}.json"))).unwrap()
}

fn random_weights(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::int8(dims, (0..n).map(|_| rng.gen_range(-127..=127)).collect()).unwrap()
}

fn random_inputs(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| Real16::from_f64(rng.gen_range(-0.999..0.999)))
        .collect();
    Tensor::real16(dims, data).unwrap()
}

/// A random FC or CONV layer with every dimension at most 32 and at most 255
/// terms per output, so no int16 partial sum can saturate.
fn random_layer(i: usize, rng: &mut ChaCha8Rng) -> LayerDescriptor {
    if i.is_multiple_of(2) {
        LayerDescriptor::fc(
            format!("fc{i}"),
            rng.gen_range(1..=32),
            rng.gen_range(1..=32),
        )
    } else {
        let k = rng.gen_range(1..=3);
        let ic = rng.gen_range(1..=(255 / (k * k)).min(32));
        let oc = rng.gen_range(1..=32);
        let h = rng.gen_range(k..=16);
        let w = rng.gen_range(k..=16);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..k);
        LayerDescriptor::conv(format!("conv{i}"), ic, oc, (h, w), (k, k), stride, pad)
    }
}

/// Direct convolution where every product is `floor(w * 2^e)` and `e` is the
/// nearest integer to `log2|x|`, clipped to `[-8, 7]` with `-8` meaning zero.
fn oracle(layer: &LayerDescriptor, x: &[Real16], w: &[i8]) -> Vec<i32> {
    let quant: Vec<Option<(bool, i32)>> = x
        .iter()
        .map(|v| {
            let f = v.to_f64();
            if f == 0.0 {
                return None;
            }
            let e = f.abs().log2().round().clamp(-8.0, 7.0) as i32;
            (e > -8).then_some((f < 0.0, e))
        })
        .collect();
    let (oh, ow) = layer.conv_out_hw();
    let (kh, kw) = (layer.kernel_h, layer.kernel_w);
    let mut out = vec![0i32; layer.out_channels * oh * ow];
    for o in 0..layer.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0i64;
                for c in 0..layer.in_channels {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * layer.stride + ky) as i64 - layer.padding as i64;
                            let ix = (ox * layer.stride + kx) as i64 - layer.padding as i64;
                            if iy < 0
                                || ix < 0
                                || iy >= layer.in_h as i64
                                || ix >= layer.in_w as i64
                            {
                                continue;
                            }
                            let Some((neg, e)) =
                                quant[(c * layer.in_h + iy as usize) * layer.in_w + ix as usize]
                            else {
                                continue;
                            };
                            let wv = w[((o * layer.in_channels + c) * kh + ky) * kw + kx] as f64;
                            let term = (wv * 2f64.powi(e)).floor() as i64;
                            sum += if neg { -term } else { term };
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = sum as i32;
            }
        }
    }
    out
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut cases = 0u32;
    let mut mismatches = 0u32;
    for bits in 0..=u16::MAX {
        let x = Real16::from_bits(bits);
        if !x.is_finite() {
            continue;
        }
        cases += 1;
        if log2_quantize_hw(x).unwrap() != log2_quantize_ref(x.to_f64()).unwrap() {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(cases == 63_488, || format!("{cases} finite patterns"))?;
    ensure(mismatches == 0, || format!("{mismatches} mismatches"))?;
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("{cases} patterns, 0 mismatches, {elapsed:.2?}"))
}

fn criterion_2() -> Check {
    let mut cases = 0u32;
    for w in i8::MIN..=i8::MAX {
        for exp in -7..=-1i8 {
            let slice = MsbSlice::of_weight(w, slice_len_for(exp));
            let got = decode_and_shift(slice, exp).map_err(|e| e.to_string())?;
            let want = (w as i16).div_euclid(1 << -exp);
            ensure(got == want, || format!("w={w} exp={exp}: {got} != {want}"))?;
            cases += 1;
        }
    }
    ensure(cases == 1_792, || format!("{cases} cases"))?;
    Ok(format!("{cases} cases, 0 mismatches"))
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let (g, pe) = (MemGeometry::default(), PeConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let scale = LayerOptions::default().weight_scale;
    for i in 0..100 {
        let layer = random_layer(i, &mut rng);
        let w = random_weights(layer.weight_dims(), &mut rng);
        let x = random_inputs(layer.input_dims(), &mut rng);
        let expected = oracle(&layer, x.as_real16().unwrap(), w.as_int8().unwrap());
        let expected_out: Vec<Real16> = expected
            .iter()
            .map(|&a| Real16::from_f64(a as f64 * scale))
            .collect();
        let q =
            run_layer(MachineKind::QeiHaN, &layer, &x, &w, &g, &pe).map_err(|e| e.to_string())?;
        let n =
            run_layer(MachineKind::NaHiD, &layer, &x, &w, &g, &pe).map_err(|e| e.to_string())?;
        ensure(q.accumulators == expected, || {
            format!("{}: QeiHaN differs from oracle", layer.name)
        })?;
        ensure(n.accumulators == expected, || {
            format!("{}: NaHiD differs from oracle", layer.name)
        })?;
        ensure(q.outputs.to_bytes() == n.outputs.to_bytes(), || {
            format!("{}: output tensors differ", layer.name)
        })?;
        let got: Vec<u16> = q
            .outputs
            .as_real16()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let want: Vec<u16> = expected_out.iter().map(|v| v.to_bits()).collect();
        ensure(got == want, || {
            format!("{}: outputs differ from oracle", layer.name)
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("100 layers bit-identical to oracle, {elapsed:.2?}"))
}

fn weight_beats(
    m: MachineKind,
    layer: &LayerDescriptor,
    x: &Tensor,
    w: &Tensor,
) -> Result<(u64, qeihan::analysis::ExpHistogram), String> {
    let run = run_layer(
        m,
        layer,
        x,
        w,
        &MemGeometry::default(),
        &PeConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok((run.counters.dram_weight_beats, run.histogram))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut workloads = 0;
    let mut check =
        |layer: &LayerDescriptor, x: &Tensor, rng: &mut ChaCha8Rng| -> Result<(u64, u64), String> {
            let w = random_weights(layer.weight_dims(), rng);
            let (q, h) = weight_beats(MachineKind::QeiHaN, layer, x, &w)?;
            let (n, _) = weight_beats(MachineKind::NaHiD, layer, x, &w)?;
            let s = savings_ratio(&h, 8).map_err(|e| e.to_string())?;
            // q / n == 1 - skipped / full
            ensure(
                q as u128 * s.full_bits as u128
                    == n as u128 * (s.full_bits - s.skipped_bits) as u128,
                || {
                    format!(
                        "{}: q={q} n={n} skipped={} full={}",
                        layer.name, s.skipped_bits, s.full_bits
                    )
                },
            )?;
            workloads += 1;
            Ok((q, n))
        };
    for i in 0..20 {
        let layer = random_layer(i, &mut rng);
        let dist = &DISTRIBUTIONS[i % 5];
        let x = synth_activations(&distribution(dist.0), layer.input_len(), i as u64)
            .and_then(|t| t.reshaped(layer.input_dims()))
            .map_err(|e| e.to_string())?;
        check(&layer, &x, &mut rng)?;
    }
    let layer = LayerDescriptor::conv("c", 8, 24, (10, 10), (3, 3), 1, 1);
    let x = synth_activations(&ExpDistribution::single(-3), layer.input_len(), 1)
        .and_then(|t| t.reshaped(layer.input_dims()))
        .map_err(|e| e.to_string())?;
    let (q, n) = check(&layer, &x, &mut rng)?;
    ensure(q * 8 == n * 5, || format!("all -3: {q}/{n} != 0.625"))?;
    Ok(format!(
        "{workloads} workloads exact; all -3 ratio {q}/{n} = 0.625"
    ))
}

fn criterion_5() -> Check {
    let mut savings = Vec::new();
    let mut detail = Vec::new();
    for (name, expected_negative) in DISTRIBUTIONS {
        let acts = synth_activations(&distribution(name), 100_000, 7).map_err(|e| e.to_string())?;
        let h = histogram_of_tensor(&acts).map_err(|e| e.to_string())?;
        let neg = negative_fraction(&h).map_err(|e| e.to_string())?;
        let s = savings_ratio(&h, 8).map_err(|e| e.to_string())?.value();
        ensure((neg - expected_negative).abs() <= 0.02, || {
            format!("{name}: negative fraction {neg:.4} vs {expected_negative}")
        })?;
        detail.push(format!("{name} neg={neg:.3} sav={s:.3}"));
        savings.push(s);
    }
    let mean = savings.iter().sum::<f64>() / savings.len() as f64;
    ensure((mean - 0.25).abs() <= 0.05, || {
        format!("mean savings {mean:.4}")
    })?;
    let [p, bl, bb, t, a] = savings[..] else {
        unreachable!()
    };
    ensure(p > bl && bl >= bb && bb > t && t > a, || {
        format!("ordering broken: {savings:?}")
    })?;
    Ok(format!("{}; mean savings {mean:.4}", detail.join(", ")))
}

fn criterion_6() -> Check {
    let (g, pe) = (MemGeometry::default(), PeConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for i in 0..20 {
        let layer = random_layer(i, &mut rng);
        let w = random_weights(layer.weight_dims(), &mut rng);
        let x = synth_activations(
            &distribution(DISTRIBUTIONS[i % 5].0),
            layer.input_len(),
            i as u64,
        )
        .and_then(|t| t.reshaped(layer.input_dims()))
        .map_err(|e| e.to_string())?;
        let zero =
            Tensor::real16(layer.input_dims(), vec![Real16::ZERO; layer.input_len()]).unwrap();
        for m in [MachineKind::QeiHaN, MachineKind::NaHiD] {
            let run = run_layer(m, &layer, &x, &w, &g, &pe).map_err(|e| e.to_string())?;
            let non_pruned = run.histogram.nonzero();
            ensure(
                run.counters.dram_input_values == layer.input_len() as u64,
                || {
                    format!(
                        "{m} {}: {} input reads for {} inputs",
                        layer.name,
                        run.counters.dram_input_values,
                        layer.input_len()
                    )
                },
            )?;
            ensure(run.counters.quants == non_pruned, || {
                format!(
                    "{m} {}: {} quantized for {non_pruned} non-pruned",
                    layer.name, run.counters.quants
                )
            })?;
            let z = run_layer(m, &layer, &zero, &w, &g, &pe).map_err(|e| e.to_string())?;
            ensure(
                z.counters.dram_weight_beats == 0 && z.counters.adds == 0,
                || {
                    format!(
                        "{m} {}: zero input gave {} beats, {} adds",
                        layer.name, z.counters.dram_weight_beats, z.counters.adds
                    )
                },
            )?;
        }
    }
    Ok("40 layer runs read every input once; zero inputs fetch no weights and add nothing".into())
}

/// Layer shapes typical of each domain: FC stacks for the language models and
/// a small convolutional network for the image model.
fn domain_network(name: &str) -> Vec<LayerDescriptor> {
    if name == "alexnet" {
        vec![
            LayerDescriptor::conv("conv1", 16, 32, (16, 16), (3, 3), 1, 1),
            LayerDescriptor::conv("conv2", 32, 64, (8, 8), (3, 3), 1, 1),
            LayerDescriptor::fc("fc3", 1024, 256),
        ]
    } else {
        vec![
            LayerDescriptor::fc("fc1", 512, 1024),
            LayerDescriptor::fc("fc2", 1024, 512),
            LayerDescriptor::fc("fc3", 512, 512),
        ]
    }
}

/// Runs every layer on activations drawn from `dist` and returns total
/// cycles and energy.
fn run_domain(
    m: MachineKind,
    layers: &[LayerDescriptor],
    dist: &ExpDistribution,
) -> Result<(u64, f64), String> {
    let (g, pe, cfg) = (
        MemGeometry::default(),
        PeConfig::default(),
        EnergyConfig::default(),
    );
    let mut cycles = 0;
    let mut counters = AccessCounters::default();
    for (i, layer) in layers.iter().enumerate() {
        let x = synth_activations(dist, layer.input_len(), i as u64)
            .and_then(|t| t.reshaped(layer.input_dims()))
            .map_err(|e| e.to_string())?;
        let w = qeihan::model::synth_weights(layer, 100 + i as u64);
        let run = run_layer_with(m, layer, &x, &w, &g, &pe, &LayerOptions::default())
            .map_err(|e| e.to_string())?;
        cycles += run.cycles;
        counters.merge(&run.counters);
    }
    Ok((
        cycles,
        energy(&counters, cycles, &cfg, g.logic_freq_hz).total,
    ))
}

fn criterion_7() -> Check {
    let mut detail = Vec::new();
    for (name, _) in DISTRIBUTIONS {
        let layers = domain_network(name);
        let dist = distribution(name);
        let (qc, qe) = run_domain(MachineKind::QeiHaN, &layers, &dist)?;
        let (nc, ne) = run_domain(MachineKind::NaHiD, &layers, &dist)?;
        let (cc, ce) = run_domain(MachineKind::Neurocube, &layers, &dist)?;
        ensure(qc <= nc && nc <= cc, || {
            format!("{name}: cycles {qc} / {nc} / {cc}")
        })?;
        ensure(qe <= ne && ne <= ce, || {
            format!("{name}: energy {qe:.3e} / {ne:.3e} / {ce:.3e}")
        })?;
        detail.push(format!(
            "{name} speedup-vs-NC {:.2} energy-vs-NC {:.2}",
            cc as f64 / qc as f64,
            ce / qe
        ));
    }
    Ok(detail.join(", "))
}

fn sweep_points(dir: &Path, geometry: MemGeometry) -> Result<Vec<qeihan_cli::SweepPoint>, String> {
    let net_path = dir.join("net.json");
    let net = serde_json::json!({
        "name": "sweep",
        "layers": [{"name": "fc", "kind": "FC", "in_channels": 512, "out_channels": 512}]
    });
    std::fs::write(&net_path, net.to_string()).map_err(|e| e.to_string())?;
    let mut spec = RunSpec::new(ActSource::Tensor(PathBuf::new()), dir);
    spec.network = Some(net_path);
    spec.geometry = geometry;
    cmd_sweep(&spec)
        .map(|(p, _)| p)
        .map_err(|e| format!("{e:#}"))
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let memory_bound = MemGeometry {
        bandwidth_bytes_per_sec: 1.2e9,
        ..MemGeometry::default()
    };
    let mut detail = Vec::new();
    for (label, geometry) in [
        ("default", MemGeometry::default()),
        ("memory-bound", memory_bound),
    ] {
        let points = sweep_points(dir.path(), geometry)?;
        for (k, p) in points.iter().enumerate() {
            ensure(p.center == -(k as i8), || {
                format!("{label}: unexpected center {}", p.center)
            })?;
            ensure(p.skipped_bits * 8 == p.full_bits * k as u64, || {
                format!(
                    "{label} center {}: savings {}/{}",
                    p.center, p.skipped_bits, p.full_bits
                )
            })?;
        }
        for w in points.windows(2) {
            ensure(w[1].speedup >= w[0].speedup, || {
                format!(
                    "{label}: speedup falls from {} to {} at center {}",
                    w[0].speedup, w[1].speedup, w[1].center
                )
            })?;
        }
        let speedups: Vec<String> = points.iter().map(|p| format!("{:.3}", p.speedup)).collect();
        detail.push(format!("{label} speedups [{}]", speedups.join(" ")));
    }
    Ok(detail.join("; "))
}

fn simulate_files(threads: usize, out: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let data = data_dir();
    let mut spec = RunSpec::new(
        ActSource::Dist {
            path: data.join("distributions/alexnet.json"),
            count: None,
        },
        out,
    );
    spec.network = Some(data.join("networks/cnn.json"));
    spec.machines = MachineKind::ALL.to_vec();
    spec.seed = 9;
    spec.trace = true;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    let result = pool
        .install(|| cmd_simulate(&spec))
        .map_err(|e| format!("{e:#}"))?;
    let mut files: Vec<(String, Vec<u8>)> = result
        .files
        .iter()
        .map(|f| {
            (
                f.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(f).unwrap(),
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn criterion_9() -> Check {
    let max = std::thread::available_parallelism()
        .map_or(8, |n| n.get())
        .max(8);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = simulate_files(1, a.path())?;
    let many = simulate_files(max, b.path())?;
    ensure(one.len() == many.len() && !one.is_empty(), || {
        "file sets differ".into()
    })?;
    for ((na, ba), (nb, bb)) in one.iter().zip(&many) {
        ensure(na == nb && ba == bb, || {
            format!("{na} differs between 1 and {max} threads")
        })?;
    }
    Ok(format!(
        "{} files byte-identical at 1 and {max} threads",
        one.len()
    ))
}

fn criterion_10() -> Check {
    let g = MemGeometry::default();
    ensure(g.beats_per_cycle() == 8 && g.trc_cycles == 12, || {
        "unexpected defaults".into()
    })?;
    let single = schedule_beats(&[(0, 8)], &g);
    let spread: Vec<(usize, u32)> = (0..8).map(|b| (b, 1)).collect();
    let spread = schedule_beats(&spread, &g);
    let same = schedule_beats(&[(3, 1), (3, 1)], &g);
    ensure((single, spread, same) == (12, 12, 24), || {
        format!("got {single}, {spread}, {same}")
    })?;
    Ok("12, 12, 24 cycles".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("quantizer exhaustive equivalence", criterion_1),
        ("shift-slice exactness", criterion_2),
        ("functional machine equality", criterion_3),
        ("savings identity", criterion_4),
        ("distribution reproduction", criterion_5),
        ("dataflow access properties", criterion_6),
        ("directional results", criterion_7),
        ("monotonicity sweep", criterion_8),
        ("determinism", criterion_9),
        ("timing contract", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
