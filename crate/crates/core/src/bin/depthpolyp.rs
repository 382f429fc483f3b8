use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use depthpolyp::harness::{self, report, RunConfig};
use depthpolyp::network::{load_checkpoint, save_checkpoint, Model};
use depthpolyp::params::ParamStore;
use depthpolyp::sample::Condition;

#[derive(Parser)]
#[command(
    name = "depthpolyp",
    version,
    about = "Depth-guided polyp segmentation: data, training, robustness evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize a degraded copy of a corpus plus its manifest.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Run config whose `degrade.*` keys override the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Instead of writing, check that `out` replays from `input`.
        #[arg(long)]
        verify: bool,
    },
    /// Train on a corpus, clean or with online degradations.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_condition)]
        condition: Condition,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the checkpoint, loss log and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, default_value_t = harness::THRESHOLD)]
        threshold: f64,
        /// CSV report path (a .jsonl mirror is written beside it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the four train/test pairings and the robustness gaps.
    Quadrant {
        #[arg(long, required_unless_present = "published")]
        clean_ckpt: Option<PathBuf>,
        #[arg(long, required_unless_present = "published")]
        noisy_ckpt: Option<PathBuf>,
        #[arg(long, required_unless_present = "published")]
        clean_set: Option<PathBuf>,
        #[arg(long, required_unless_present = "published")]
        noisy_set: Option<PathBuf>,
        #[arg(long, default_value_t = harness::THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the gaps recomputed from the reported Dice values and exit.
        #[arg(long)]
        published: bool,
    },
    /// Parameter and multiply-add table.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input side length; defaults to the configured input size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print every layer, not just the subsystem totals.
        #[arg(long)]
        layers: bool,
    },
    /// Batch-1 inference throughput.
    Bench {
        /// Benchmark a trained checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse().map_err(|e: depthpolyp::Error| e.to_string())
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (cfg, store) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((Model::new(cfg)?, store))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth { out, n, size, seed } => {
            let data = harness::synth_dataset(n, size, seed)?;
            harness::save_dataset(&out, &data, None)?;
            println!("wrote {n} samples of {size}x{size} to {}", out.display());
        }
        Cmd::Degrade {
            input,
            out,
            seed,
            config,
            verify,
        } => {
            let spec = run_config(config.as_deref())?.degrade;
            let clean = harness::load_dataset(&input).with_context(|| format!("loading {}", input.display()))?;
            if verify {
                let noisy = harness::load_dataset(&out)?;
                let manifest = harness::load_manifest(&out)?;
                let bad = harness::verify_replay(&spec, &clean, &noisy, &manifest)?;
                if !bad.is_empty() {
                    bail!("{} samples do not replay: {}", bad.len(), bad.join(", "));
                }
                println!("all {} samples replay exactly", noisy.len());
            } else {
                let (noisy, manifest) = harness::materialize_noisy(&spec, &clean, seed)?;
                harness::save_dataset(&out, &noisy, Some(&manifest))?;
                println!(
                    "wrote {} degraded samples and manifest to {}",
                    noisy.len(),
                    out.display()
                );
            }
        }
        Cmd::Train {
            data,
            condition,
            config,
            seed,
            out,
        } => {
            let mut cfg = run_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let samples = harness::load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let total = harness::train::total_steps(&cfg, samples.len(), condition);
            log::info!("training {condition} on {} samples for {total} steps", samples.len());
            let every = (total / 20).max(1);
            let outcome = harness::train_with(&cfg, &samples, condition, |l| {
                if l.step % every == 0 || l.step == total {
                    log::info!(
                        "step {}/{total} loss {:.4} seg {:.4} depth {:.4} s_s {:.3} s_d {:.3} lr {:.2e}",
                        l.step,
                        l.loss,
                        l.l_seg,
                        l.l_depth,
                        l.s_seg,
                        l.s_depth,
                        l.lr
                    );
                }
            })?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_checkpoint(out.join("model.ckpt"), &cfg.network, &outcome.store)?;
            report::write_log(&out.join("train_log.csv"), &outcome.log)?;
            fs::write(
                out.join("train_manifest.json"),
                serde_json::to_string_pretty(&outcome.manifest)? + "\n",
            )?;
            fs::write(out.join("config.txt"), cfg.canonical())?;
            println!("wrote {}", out.join("model.ckpt").display());
        }
        Cmd::Eval {
            checkpoint,
            testset,
            threshold,
            out,
        } => {
            let (model, store) = load_model(&checkpoint)?;
            let data = harness::load_dataset(&testset).with_context(|| format!("loading {}", testset.display()))?;
            let r = harness::evaluate(&model, &store, &data, threshold)?;
            println!(
                "n={} dice={:.4} iou={:.4} recall={:.4}",
                r.count, r.mean.dice, r.mean.iou, r.mean.recall
            );
            if let Some(p) = out {
                report::write_metrics(&p, &r)?;
            }
        }
        Cmd::Quadrant {
            clean_ckpt,
            noisy_ckpt,
            clean_set,
            noisy_set,
            threshold,
            out,
            published,
        } => {
            if published {
                println!("{:<14} {:>8} {:>8}", "model", "delta_r", "delta_h");
                for r in harness::PUBLISHED {
                    println!("{:<14} {:>8.4} {:>8.4}", r.model, r.dice.delta_r(), r.dice.delta_h());
                }
                return Ok(());
            }
            let (Some(cc), Some(nc), Some(cs), Some(ns)) = (clean_ckpt, noisy_ckpt, clean_set, noisy_set) else {
                unreachable!("clap enforces the four paths");
            };
            let models = [
                load_model(&cc).context("clean-trained model")?,
                load_model(&nc).context("noisy-trained model")?,
            ];
            let sets = [
                harness::load_dataset(&cs).with_context(|| format!("clean test set {}", cs.display()))?,
                harness::load_dataset(&ns).with_context(|| format!("noisy test set {}", ns.display()))?,
            ];
            let mut cells = Vec::new();
            for (mi, (model, store)) in models.iter().enumerate() {
                for (si, set) in sets.iter().enumerate() {
                    let name = ["clean", "noisy"];
                    let r = harness::evaluate(model, store, set, threshold)
                        .with_context(|| format!("evaluating {}->{}", name[mi], name[si]))?;
                    cells.push(r);
                }
            }
            let [cc, cn, ncl, nn]: [_; 4] = cells.try_into().expect("four cells");
            let q = harness::QuadrantReport::new(cc, cn, ncl, nn);
            for (tr, te, r) in &q.cells {
                println!(
                    "{tr}->{te}: dice={:.4} iou={:.4} recall={:.4}",
                    r.mean.dice, r.mean.iou, r.mean.recall
                );
            }
            println!("delta_r={:.4} delta_h={:.4}", q.delta_r, q.delta_h);
            if let Some(p) = out {
                report::write_quadrant(&p, &q)?;
            }
        }
        Cmd::Count {
            config,
            size,
            out,
            layers,
        } => {
            let cfg = run_config(config.as_deref())?;
            let (h, w) = size.map_or((cfg.network.input_height, cfg.network.input_width), |s| (s, s));
            let t = Model::new(cfg.network)?.cost_table(h, w)?;
            if layers {
                for r in &t.rows {
                    println!("{:<36} {:>10} {:>12}", r.name, r.params, r.macs);
                }
            }
            for (sub, (p, m)) in t.by_subsystem() {
                println!("{:<10} params={p:>10} macs={m:>12}", sub.as_str());
            }
            println!(
                "total      params={:>10} macs={:>12} ({:.4} GMACs at {h}x{w})",
                t.total_params(),
                t.total_macs(),
                t.gmacs()
            );
            if let Some(p) = out {
                report::write_costs(&p, &t)?;
            }
        }
        Cmd::Bench {
            checkpoint,
            config,
            size,
            warmup,
            iters,
            threads,
            out,
        } => {
            let (model, store) = match checkpoint {
                Some(p) => load_model(&p)?,
                None => {
                    let m = Model::new(run_config(config.as_deref())?.network)?;
                    let s = m.init(0);
                    (m, s)
                }
            };
            let r = harness::bench_fps(&model, &store, size, size, warmup, iters, threads)?;
            println!(
                "{size}x{size}: {:.1} fps (std {:.1}, cv {:.3}), {:.2} ms/frame over {iters} iterations on {threads} thread(s)",
                r.mean_fps, r.std_fps, r.cv, r.mean_ms
            );
            if let Some(p) = out {
                report::write_fps(&p, &r)?;
            }
        }
    }
    Ok(())
}
