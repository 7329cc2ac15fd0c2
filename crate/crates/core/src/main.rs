use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use coiflow::discrete::{iterative_decode, train_discrete, DecodeSchedule, DiscreteConfig, DiscreteModel, DiscreteTrainConfig};
use coiflow::flow::{ChainMode, PriorMode};
use coiflow::harness::config::ExperimentConfig;
use coiflow::harness::experiments::{
    chain_views, fit_rvq, flow_examples, run_coig_comparison, run_cont_vs_disc, run_prior_comparison,
    run_scaling_study, train_content_model,
};
use coiflow::harness::io;
use coiflow::harness::results::{write_results, ExperimentResult};
use coiflow::harness::synth::gen_dataset;
use coiflow::nn::Preset;
use coiflow::ode::{infer_chain, InferenceRequest, SolverMethod, SolverSpec};
use coiflow::semantic_ar::{Sampling, VocabLayout};
use coiflow::vfnet::{train_flow, FlowTrainConfig, VectorFieldModel};

#[derive(Parser)]
#[command(name = "coiflow", version, about = "Chain-of-information generation on synthetic features")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Overrides the top-level seed (model init, batches, sampling). The corpus
    /// keeps `[synth] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment config; defaults apply to anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic training split as sample files.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    TrainRvq {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit layer 1 to raw frames instead of the semantic teacher.
        #[arg(long)]
        no_teacher: bool,
    },
    TrainFlow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rvq: PathBuf,
        #[arg(long, default_value = "implicit")]
        mode: ChainMode,
        /// Prior override (`standard` or `semantic`); defaults to the mode's own.
        #[arg(long)]
        prior: Option<String>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
    },
    TrainAr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rvq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    TrainDiscrete {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rvq: PathBuf,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate target frames with a trained field.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rvq: PathBuf,
        #[arg(long, default_value = "implicit")]
        mode: ChainMode,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value = "euler")]
        method: SolverMethod,
        /// Raw prompt frames (features file).
        #[arg(long)]
        prompt: PathBuf,
        /// Semantic representation of the frames to generate (features file).
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill perceptual layers with the masked-token model.
    DecodeDiscrete {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rvq: PathBuf,
        #[arg(long, default_value_t = 8)]
        iterations: usize,
        #[arg(long)]
        prompt: PathBuf,
        /// Layer-1 codes of the frames to generate (ids file).
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map a source state sequence (ids file) to layer-1 codes.
    GenerateSemantic {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    ExpCoig,
    ExpPrior,
    ExpScale,
    ExpContdisc,
}

fn load_config(g: &Global) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_prior(s: &str) -> anyhow::Result<PriorMode> {
    match s.to_ascii_lowercase().as_str() {
        "standard" => Ok(PriorMode::Standard),
        "semantic" => Ok(PriorMode::Semantic),
        other => bail!("unknown prior `{other}`"),
    }
}

fn report(out_dir: &Path, name: &str, results: &[ExperimentResult]) -> anyhow::Result<()> {
    write_results(out_dir, name, results)?;
    for r in results {
        for m in &r.metrics {
            println!(
                "{name} {:<10} iters={:<3} semantic_accuracy={:.4} perceptual_similarity={:.4}",
                r.arm, m.iterations, m.semantic_accuracy, m.perceptual_similarity
            );
        }
        if let Some(l) = r.extra.get("final_loss") {
            println!("{name} {:<10} final_loss={l:.5} params={}", r.arm, r.param_count);
        }
    }
    println!("wrote {}/{name}.jsonl", out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.global)?;
    let out_dir = &cli.global.out_dir;
    match cli.cmd {
        Cmd::GenData { out } => {
            let data = gen_dataset(&cfg.synth)?;
            io::save_dataset(&data, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Cmd::TrainRvq { data, out, no_teacher } => {
            let train = io::load_dataset(&data)?;
            let rvq = fit_rvq(&train, &cfg.rvq, !no_teacher, cfg.seed)?;
            io::save_rvq(&rvq, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::TrainFlow {
            data,
            rvq,
            mode,
            prior,
            preset,
            out,
        } => {
            let train = io::load_dataset(&data)?;
            let rvq = io::load_rvq(&rvq)?;
            let examples = flow_examples(&rvq, &train)?;
            let mut section = cfg.flow.clone();
            if let Some(p) = preset {
                section.preset = p;
                section.net = None;
            }
            let tc = FlowTrainConfig {
                mode,
                prior: prior.as_deref().map(parse_prior).transpose()?,
                steps: section.steps,
                batch_size: section.batch_size,
                prior_sigma: section.prior_sigma,
                sigma_min: section.sigma_min,
                adam: section.adam.clone(),
            };
            let mut model = VectorFieldModel::init(&section.net_config(), rvq.dim(), cfg.seed)?;
            let curve = train_flow(&mut model, &examples, &tc, cfg.seed)?;
            io::save_vfnet(&model, &out)?;
            println!("final loss {:.5}; wrote {}", curve.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Cmd::TrainAr { data, rvq, out } => {
            let train = io::load_dataset(&data)?;
            let rvq = io::load_rvq(&rvq)?;
            let targets = train
                .iter()
                .map(|s| Ok(rvq.encode(&s.features)?.layer(1).to_vec()))
                .collect::<coiflow::Result<Vec<_>>>()?;
            let (lm, _, curve) = train_content_model(&cfg, &train, &targets, rvq.codebook_size())?;
            io::save_lm(&lm, &out)?;
            println!("final loss {:.5}; wrote {}", curve.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Cmd::TrainDiscrete {
            data,
            rvq,
            preset,
            out,
        } => {
            let train = io::load_dataset(&data)?;
            let rvq = io::load_rvq(&rvq)?;
            let stacks = train
                .iter()
                .map(|s| rvq.encode(&s.features))
                .collect::<coiflow::Result<Vec<_>>>()?;
            let mut section = cfg.discrete.clone();
            if let Some(p) = preset {
                section.preset = p;
                section.net = None;
            }
            let dcfg = DiscreteConfig {
                net: section.net_config(),
                num_layers: rvq.num_layers(),
                codebook_size: rvq.codebook_size(),
            };
            let tc = DiscreteTrainConfig {
                steps: section.steps,
                batch_size: section.batch_size,
                adam: section.adam.clone(),
            };
            let mut model = DiscreteModel::init(&dcfg, cfg.seed)?;
            let curve = train_discrete(&mut model, &stacks, &tc, cfg.seed)?;
            io::save_discrete(&model, &out)?;
            println!("final loss {:.5}; wrote {}", curve.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Cmd::Infer {
            model,
            rvq,
            mode,
            steps,
            method,
            prompt,
            semantic,
            out,
        } => {
            let field = io::load_vfnet(&model)?;
            let rvq = io::load_rvq(&rvq)?;
            let prompt = io::load_features(&prompt)?;
            let target = io::load_features(&semantic)?;
            let (p1, pfull) = chain_views(&rvq, &prompt)?;
            let mut req = InferenceRequest::new(mode, pfull, p1, target, SolverSpec::new(method, steps)?, cfg.seed);
            if let Some((_, prior)) = field.trained_with() {
                req.prior = prior;
            }
            req.prior_sigma = cfg.flow.prior_sigma;
            let v = infer_chain(&field, &req)?;
            io::save_features(&rvq.decode(&v)?, &out)?;
            println!("wrote {} frames to {}", v.len(), out.display());
        }
        Cmd::DecodeDiscrete {
            model,
            rvq,
            iterations,
            prompt,
            semantic,
            out,
        } => {
            let m = io::load_discrete(&model)?;
            let rvq = io::load_rvq(&rvq)?;
            let prompt = rvq.encode(&io::load_features(&prompt)?)?;
            let tokens = io::load_ids(&semantic)?;
            let schedule = DecodeSchedule::cosine(iterations)?;
            let full = iterative_decode(&m, &tokens, &prompt, &schedule, cfg.discrete.temperature, cfg.seed)?;
            let target = full.slice_frames(prompt.len(), full.len());
            let feats = rvq.decode(&rvq.sum_layers(&target, 1, rvq.num_layers())?)?;
            io::save_features(&feats, &out)?;
            io::save_tokens(&target, rvq.codebook_size(), &out.with_extension("tokens.coit"))?;
            println!("wrote {} frames to {}", feats.len(), out.display());
        }
        Cmd::GenerateSemantic { model, source, out } => {
            let lm = io::load_lm(&model)?;
            let src = io::load_ids(&source)?;
            let vocab = VocabLayout::new(cfg.synth.num_semantic_states as u32, cfg.rvq.codebook_size as u32);
            let tokens = lm.generate_targets(&vocab, &src, src.len(), Sampling::Greedy, cfg.seed)?;
            io::save_ids(&tokens, &out)?;
            println!("wrote {} codes to {}", tokens.len(), out.display());
        }
        Cmd::ExpCoig => report(out_dir, "coig", &run_coig_comparison(&cfg)?)?,
        Cmd::ExpPrior => report(out_dir, "prior", &run_prior_comparison(&cfg)?)?,
        Cmd::ExpScale => report(out_dir, "scale", &run_scaling_study(&cfg)?)?,
        Cmd::ExpContdisc => report(out_dir, "contdisc", &run_cont_vs_disc(&cfg)?)?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
