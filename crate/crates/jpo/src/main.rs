use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use jpo::alignment::{measure_alignment_curve, rho_fit, rho_predict, AlignTask};
use jpo::harness::{run_experiment, write_outputs, ExperimentConfig};
use jpo::methods::{run_method, MethodKind, TrainConfig};
use jpo::noise::{
    make_landscape, mc_alignment, prob_aligned_single, prob_aligned_sum, LandscapeBatch, Law,
    Reducer,
};
use jpo::problems::{generate, Family};
use jpo::rng::keyed_rng;

#[derive(Parser)]
#[command(name = "jpo", about = "Joint parameterized optimization of inverse-problem batches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo vs closed-form alignment probabilities on the analytic
    /// noise landscape.
    Theory {
        #[arg(long, default_value = "sum-of-losses")]
        reducer: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 4, 16, 64])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        components: usize,
        /// Signal-to-noise ratio lambda / |A omega|_2 per example.
        #[arg(long, default_value_t = 0.05)]
        snr: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure network update alignment and fit the recursion parameters.
    Align {
        #[arg(long, default_value = "linear")]
        task: String,
        #[arg(long, value_delimiter = ',', default_values_t = (1usize..=16).collect::<Vec<_>>())]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        replicas: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the fitted (A, C~) parameters.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
    /// Solve one problem set with one method.
    Solve {
        #[arg(long)]
        family: String,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full experiment grid from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute fractions from an emitted run directory and verify them.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = false)]
        refined: bool,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run() -> jpo::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Theory { reducer, n, components, snr, samples, seed } => {
            let reducer = match reducer.as_str() {
                "sum-of-losses" => Reducer::SumOfLosses,
                "majority-vote" => Reducer::MajorityVote,
                other => {
                    return Err(jpo::JpoError::InvalidArg(format!("unknown reducer '{other}'")))
                }
            };
            println!("N,reducer,p_measured,p_closed_form,stderr");
            for &count in &n {
                let mut rng = keyed_rng(seed, &[count as u64]);
                let specs: Vec<_> = (0..count)
                    .map(|_| {
                        make_landscape(
                            components,
                            Law::Uniform(0.0, 1.0),
                            Law::Uniform(1.0, 20.0),
                            0.0, // placeholder, fixed below from the SNR
                            &mut rng,
                        )
                    })
                    .collect::<jpo::Result<Vec<_>>>()?;
                let specs: Vec<_> = specs
                    .into_iter()
                    .map(|mut s| {
                        s.lambda = snr * s.aw_norm();
                        s
                    })
                    .collect();
                let closed = match reducer {
                    Reducer::SumOfLosses => {
                        let lambdas: Vec<f64> = specs.iter().map(|s| s.lambda).collect();
                        let total =
                            specs.iter().map(|s| s.aw_norm().powi(2)).sum::<f64>().sqrt();
                        prob_aligned_sum(&lambdas, total)?
                    }
                    Reducer::MajorityVote => {
                        let p1 = prob_aligned_single(specs[0].lambda, specs[0].aw_norm())?;
                        jpo::noise::prob_majority_from_single(count, p1)?
                    }
                };
                let batch = LandscapeBatch::shared(specs)?;
                let est = mc_alignment(&batch, reducer, samples, seed)?;
                let tag = match reducer {
                    Reducer::SumOfLosses => "sum-of-losses",
                    Reducer::MajorityVote => "majority-vote",
                };
                println!(
                    "{count},{tag},{:.6},{:.6},{:.6}",
                    est.probability, closed, est.stderr
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Align { task, n, replicas, seed, params_out } => {
            let task = AlignTask::parse(&task)?;
            let measured = measure_alignment_curve(task, &n, replicas, seed)?;
            let fit = rho_fit(&measured)?;
            let n_max = *n.iter().max().unwrap();
            let predicted = rho_predict(&fit.params, n_max)?;
            println!("N,rho_measured,rho_predicted");
            for (i, &nv) in measured.n_values.iter().enumerate() {
                println!("{nv},{:.6},{:.6}", measured.rho[i], predicted.rho[nv - 1]);
            }
            eprintln!(
                "fitted plasticity A = {:.4}, complexity C~ = {:.4}, residual = {:.3e}{}",
                fit.params.plasticity,
                fit.params.complexity,
                fit.residual,
                if fit.flat { " (flat-fit warning)" } else { "" }
            );
            if let Some(path) = params_out {
                std::fs::write(
                    path,
                    format!(
                        "plasticity = {:.8}\ncomplexity = {:.8}\nresidual = {:.8e}\n",
                        fit.params.plasticity, fit.params.complexity, fit.residual
                    ),
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve { family, method, n, seed } => {
            let family = Family::parse(&family)?;
            let method = MethodKind::parse(&method)?;
            let set = generate(family, n, seed)?;
            let cfg = TrainConfig::for_family(family, seed);
            let result = run_method(&set, method, &cfg)?;
            println!("example_id,best_loss,final_loss");
            for i in 0..n {
                println!("{i},{:.6e},{:.6e}", result.best_loss[i], result.final_loss[i]);
            }
            for ev in &result.events {
                eprintln!("event: {ev}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let record = run_experiment(&cfg)?;
            let dir = write_outputs(&record)?;
            eprintln!("wrote {}", dir.display());
            if record.has_failures() {
                for c in record.cells.iter().filter(|c| c.error.is_some()) {
                    eprintln!(
                        "cell failed: n={} seed={} method={}: {}",
                        c.n,
                        c.seed,
                        c.method,
                        c.error.as_ref().unwrap()
                    );
                }
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { run, refined } => {
            let recomputed = jpo::harness::report_from_metrics(&run, refined)?;
            let stored = std::fs::read_to_string(run.join("fractions.csv"))?;
            print!("{recomputed}");
            if recomputed == stored {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("stored fractions.csv does not match recomputation");
                Ok(ExitCode::from(2))
            }
        }
    }
}
