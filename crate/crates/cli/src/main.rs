//! `dcdc` — verification, accounting, training, kernel dumps, and benchmarks
//! for the dual complementary dynamic convolution operators.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error.

mod config;

use clap::{Parser, Subcommand};
use config::{Arch, FullConfig};
use dcdc_core::analysis;
use dcdc_core::autodiff::{LayerGraph, Phase};
use dcdc_core::data;
use dcdc_core::network::{build_model, small::build_small_model, small::SmallNetSpec, ModelSpec};
use dcdc_core::rng::Rng;
use dcdc_core::tensor::{Dtype, Element, Tensor};
use dcdc_core::train::{train, TrainConfig};
use dcdc_core::verify;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "dcdc", version, about = "Dual complementary dynamic convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable); flags win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference sweeps over all op kinds; exit 0 iff all pass.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Restrict the sweep to one op kind.
        #[arg(long)]
        op: Option<String>,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Parameter and FLOP accounting for the configured model.
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input resolution for the FLOP count.
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        /// Write the per-layer CSV here (otherwise print it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the synthetic oriented-texture task.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for metrics.csv and final.ckpt.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the generated dataset under OUT/dataset.
        #[arg(long)]
        export_dataset: bool,
    },
    /// Dump the dynamic kernels of one layer for a synthetic input.
    Dump {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Node name; defaults to the first dynamic layer.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Number of input samples.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Wall-clock timing of forward/backward per op.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Full property suite: oracles, gradients, adjoints, invariants,
    /// determinism.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &ConfigArgs) -> dcdc_core::Result<FullConfig> {
    let cfg = FullConfig::load(args.config.as_deref(), &args.set)?;
    println!("# resolved config");
    for line in cfg.render().lines() {
        println!("{line}");
    }
    println!();
    Ok(cfg)
}

fn run(cli: Cli) -> dcdc_core::Result<bool> {
    match cli.command {
        Command::Gradcheck {
            cfg,
            op,
            tolerance,
            seed,
        } => {
            let _ = load_config(&cfg)?;
            if let Some(op) = &op {
                if !verify::OP_KINDS.contains(&op.as_str()) {
                    return Err(dcdc_core::Error::Config(format!(
                        "unknown op {op:?}; choose one of {}",
                        verify::OP_KINDS.join(", ")
                    )));
                }
            }
            let outcomes = verify::gradcheck_suite(op.as_deref(), tolerance, seed);
            let mut all = true;
            for o in &outcomes {
                println!(
                    "{}  {:40} worst rel err {:.3e}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.worst
                );
                all &= o.passed;
            }
            println!(
                "gradcheck: {}/{} ops within {tolerance:.1e}",
                outcomes.iter().filter(|o| o.passed).count(),
                outcomes.len()
            );
            Ok(all)
        }
        Command::Count {
            cfg,
            resolution,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let graph = build_model::<f64>(&cfg.model, &mut Rng::new(cfg.train.seed))?;
            let input = [1, cfg.model.input_channels, resolution, resolution];
            let report = analysis::count_flops(&graph, &input)?;
            let csv = report.to_csv();
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    let path = dir.join("report.csv");
                    std::fs::write(&path, &csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
            println!(
                "predictor_receptive_field = {}",
                cfg.model.lsa.receptive_field()
            );
            println!("total_params = {}", report.total_params);
            println!("total_flops = {}", report.total_macs);
            Ok(true)
        }
        Command::Train {
            cfg,
            out,
            export_dataset,
        } => {
            let cfg = load_config(&cfg)?;
            match cfg.train.dtype {
                Dtype::F32 => run_train::<f32>(&cfg, &out, export_dataset),
                Dtype::F64 => run_train::<f64>(&cfg, &out, export_dataset),
            }
        }
        Command::Dump {
            cfg,
            layer,
            out,
            batch,
        } => {
            let cfg = load_config(&cfg)?;
            let graph = build_graph::<f64>(&cfg)?;
            let layer = match layer.or_else(|| analysis::first_dynamic_layer(&graph)) {
                Some(l) => l,
                None => {
                    return Err(dcdc_core::Error::Config(
                        "model has no dynamic layers; choose operator lsa/gsi/dcdc".into(),
                    ))
                }
            };
            let mut data_cfg = cfg.data.clone();
            data_cfg.train_samples = batch.max(1);
            data_cfg.val_samples = 1;
            let (ds, _) = data::generate::<f64>(&data_cfg)?;
            let summary = analysis::dump_kernels(&graph, &ds.images, &layer, &out)?;
            println!(
                "dumped layer {layer}: {} tensor files, {} images under {}",
                summary.tensor_files.len(),
                summary.image_files.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Bench {
            cfg,
            repetitions,
            resolution,
            batch,
        } => {
            let cfg = load_config(&cfg)?;
            run_bench(&cfg, repetitions, resolution, batch)?;
            Ok(true)
        }
        Command::Selftest { seed } => {
            println!("# selftest (seed {seed})");
            let mut outcomes = verify::full_suite(seed);
            outcomes.push(determinism_check(seed));
            let mut all = true;
            for o in &outcomes {
                println!(
                    "{}  {:40} {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.detail
                );
                all &= o.passed;
            }
            println!(
                "selftest: {}/{} checks passed",
                outcomes.iter().filter(|o| o.passed).count(),
                outcomes.len()
            );
            Ok(all)
        }
    }
}

fn build_graph<T: Element>(cfg: &FullConfig) -> dcdc_core::Result<LayerGraph<T>> {
    let mut rng = Rng::new(cfg.train.seed);
    match cfg.arch {
        Arch::Resnet => build_model::<T>(&cfg.model, &mut rng),
        Arch::Small => {
            let model = ModelSpec {
                num_classes: cfg.data.classes,
                input_channels: cfg.data.channels,
                ..cfg.model.clone()
            };
            build_small_model::<T>(&SmallNetSpec::from_model_spec(&model), &mut rng)
        }
    }
}

fn run_train<T: Element>(
    cfg: &FullConfig,
    out: &PathBuf,
    export_dataset: bool,
) -> dcdc_core::Result<bool> {
    std::fs::create_dir_all(out)?;
    let (train_set, val_set) = data::generate::<T>(&cfg.data)?;
    if export_dataset {
        let dir = out.join("dataset");
        data::write_dataset(&dir, "train", &train_set)?;
        data::write_dataset(&dir, "val", &val_set)?;
        println!("wrote dataset under {}", dir.display());
    }
    let mut graph = build_graph::<T>(cfg)?;
    println!(
        "model: {} params, predictor receptive field {}",
        graph.param_count(),
        cfg.model.lsa.receptive_field()
    );
    let started = Instant::now();
    let outcome = train(&mut graph, &cfg.train, &train_set, &val_set)?;
    let elapsed = started.elapsed().as_secs_f64();
    let csv = outcome.to_csv();
    std::fs::write(out.join("metrics.csv"), &csv)?;
    graph.save_checkpoint(out.join("final.ckpt"))?;
    for m in &outcome.metrics {
        println!(
            "epoch {:3}  lr {:.6}  train_loss {:.4}  train_acc {:.4}  val_acc {:.4}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.val_acc
        );
    }
    println!(
        "trained {} epochs in {elapsed:.1}s; wrote {} and {}",
        cfg.train.epochs,
        out.join("metrics.csv").display(),
        out.join("final.ckpt").display()
    );
    Ok(true)
}

struct BenchEntry {
    name: &'static str,
    forward_ms: f64,
    backward_ms: f64,
    macs: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn run_bench(
    cfg: &FullConfig,
    repetitions: usize,
    resolution: usize,
    batch: usize,
) -> dcdc_core::Result<()> {
    use dcdc_core::autodiff::layers as gl;
    use dcdc_core::autodiff::Layer;
    use dcdc_core::conv::ConvWeights;
    use dcdc_core::dynamic::{init_gsi_weights, init_lsa_predictor, GsiConfig, LsaConfig};

    let c = 32usize;
    let reps = repetitions.max(1);
    let mut rng = Rng::new(7);
    let x = Tensor::<f64>::from_fn(&[batch, c, resolution, resolution], |_| {
        rng.next_standard_normal()
    });
    let lsa_cfg = LsaConfig {
        group_size: cfg.model.lsa.group_size.min(c),
        stride: 1,
        ..cfg.model.lsa.clone()
    };
    let gsi_cfg = GsiConfig {
        stride: 1,
        ..cfg.model.gsi.clone()
    };

    let layers: Vec<(&'static str, Box<dyn Layer<f64>>)> = vec![
        (
            "conv3x3",
            Box::new(gl::ConvLayer {
                w: ConvWeights::new(
                    Tensor::from_fn(&[c, c, 3, 3], |_| 0.05 * rng.next_standard_normal()),
                    None,
                    1,
                    1,
                    1,
                )?,
            }),
        ),
        (
            "depthwise3x3",
            Box::new(gl::DepthwiseLayer {
                kernel: Tensor::from_fn(&[c, 1, 3, 3], |_| 0.05 * rng.next_standard_normal()),
                stride: 1,
                padding: 1,
            }),
        ),
        (
            "pointwise",
            Box::new(gl::PointwiseLayer {
                weight: Tensor::from_fn(&[c, c], |_| 0.05 * rng.next_standard_normal()),
                bias: None,
                stride: 1,
            }),
        ),
        (
            "lsa",
            Box::new(gl::LsaLayer {
                theta: init_lsa_predictor(c, &lsa_cfg, &mut rng, false, false)?,
                cfg: lsa_cfg.clone(),
            }),
        ),
        (
            "gsi",
            Box::new(gl::GsiLayer {
                gamma: init_gsi_weights(c, &gsi_cfg, &mut rng, false)?,
                cfg: gsi_cfg.clone(),
            }),
        ),
        (
            "dcdc",
            Box::new(gl::DcdcLayer {
                theta: init_lsa_predictor(c, &lsa_cfg, &mut rng, false, false)?,
                gamma: init_gsi_weights(c, &gsi_cfg, &mut rng, false)?,
                lsa_cfg,
                gsi_cfg,
            }),
        ),
    ];

    let in_shapes = vec![x.shape().to_vec()];
    let mut entries = Vec::new();
    for (name, layer) in &layers {
        let macs = layer.cost(&in_shapes)?.total() * batch as u64;
        let (y, _) = layer.forward(&[&x], Phase::Eval)?;
        let dy = Tensor::<f64>::from_fn(y.shape(), |_| rng.next_standard_normal());
        let mut fwd_times = Vec::with_capacity(reps);
        let mut bwd_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let (_, cache) = layer.forward(&[&x], Phase::Eval)?;
            fwd_times.push(t0.elapsed().as_secs_f64() * 1e3);
            let t1 = Instant::now();
            let _ = layer.vjp(&[&x], &cache, &dy)?;
            bwd_times.push(t1.elapsed().as_secs_f64() * 1e3);
        }
        entries.push(BenchEntry {
            name,
            forward_ms: median(fwd_times),
            backward_ms: median(bwd_times),
            macs,
        });
    }

    println!(
        "bench: batch {batch}, {c} channels, {resolution}x{resolution}, {reps} repetitions (median)"
    );
    println!(
        "{:<14} {:>12} {:>12} {:>12} {:>14}",
        "op", "forward_ms", "backward_ms", "MMACs", "fwd MMAC/s"
    );
    for e in &entries {
        let mmacs = e.macs as f64 / 1e6;
        println!(
            "{:<14} {:>12.3} {:>12.3} {:>12.2} {:>14.0}",
            e.name,
            e.forward_ms,
            e.backward_ms,
            mmacs,
            mmacs / (e.forward_ms / 1e3)
        );
    }
    Ok(())
}

/// Bit-identical rerun of forward+backward and a two-epoch training rerun.
fn determinism_check(seed: u64) -> verify::CheckOutcome {
    use dcdc_core::data::DatasetConfig;

    let run = || -> dcdc_core::Result<(String, Vec<u8>)> {
        let data_cfg = DatasetConfig {
            train_samples: 32,
            val_samples: 8,
            image_size: 16,
            channels: 1,
            seed,
            ..Default::default()
        };
        let (train_set, val_set) = data::generate::<f32>(&data_cfg)?;
        let spec = SmallNetSpec::small("dcdc", 3, 1);
        let mut graph = build_small_model::<f32>(&spec, &mut Rng::new(seed))?;
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed,
            ..Default::default()
        };
        let outcome = train(&mut graph, &tc, &train_set, &val_set)?;
        Ok((outcome.to_csv(), graph.checkpoint_bytes()))
    };
    match (run(), run()) {
        (Ok((csv1, ckpt1)), Ok((csv2, ckpt2))) => {
            let passed = csv1 == csv2 && ckpt1 == ckpt2;
            verify::CheckOutcome {
                name: "determinism-train".into(),
                passed,
                worst: if passed { 0.0 } else { 1.0 },
                detail: if passed {
                    "metrics and checkpoint bit-identical across reruns".into()
                } else {
                    "rerun diverged".into()
                },
            }
        }
        (Err(e), _) | (_, Err(e)) => verify::CheckOutcome {
            name: "determinism-train".into(),
            passed: false,
            worst: 1.0,
            detail: format!("run failed: {e}"),
        },
    }
}
