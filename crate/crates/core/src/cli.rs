//! `mprs`: train, publish, attack, evaluate, baseline, probe.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use diffcore::Tensor;
use serde::Serialize;

use crate::baselines::{run_baseline, Method};
use crate::config::RunConfig;
use crate::data::manifest::{read_published, write_published};
use crate::data::synth::{fixture_decoder, ManifoldKind};
use crate::error::{Error, Result};
use crate::eval::{loss_sensitivity_probe, ProbeReport};
use crate::geometry::{curvature_fd, geodesic, pullback_metric, Decoder, FdScheme, GeodesicPath};
use crate::obfuscator::CurvatureEstimator;
use crate::pipeline::{self, PUBLISHED_DIR};
use crate::rng::{normals, stream, Stream};

#[derive(Parser, Debug)]
#[command(name = "mprs", version, about = "Curvature-guided private data publishing")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output`.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Worker threads (0 = all cores). Overrides `threads`.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Run all three training phases, checkpointing every epoch.
    Train(TrainArgs),
    /// Perturb the training split with a trained checkpoint.
    Publish,
    /// Membership inference against classifiers trained on original and
    /// published data.
    Attack(PublishedArg),
    /// Utility of the published set: test accuracy, Fréchet distance, diversity.
    Evaluate(PublishedArg),
    /// Publish the training split with a classical anonymizer.
    Baseline(BaselineArgs),
    /// Metric and curvature over a latent grid, plus loss sensitivity.
    Probe(ProbeArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Continue from `<output>/checkpoint.mprs`.
    #[arg(long)]
    pub resume: bool,
    /// Overrides `train.epochs_mu`. With --resume, epoch counts may grow.
    #[arg(long)]
    pub epochs_mu: Option<usize>,
    /// Overrides `train.epochs_sigma`.
    #[arg(long)]
    pub epochs_sigma: Option<usize>,
    /// Overrides `train.estimator.epochs`.
    #[arg(long)]
    pub epochs_estimator: Option<usize>,
    /// Overrides `train.epochs_bilevel`; 0 skips the alternating phase.
    #[arg(long)]
    pub epochs_bilevel: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PublishedArg {
    /// Published set to use instead of `<output>/published`.
    #[arg(long)]
    pub published: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// pixelate, blur or k-anonymize.
    #[arg(long)]
    pub method: String,
    /// Pixelation tile side. Overrides `baseline.block`.
    #[arg(long)]
    pub block: Option<usize>,
    /// Blur standard deviation in pixels. Overrides `baseline.radius`.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Minimum cluster size kept by k-anonymize. Overrides `baseline.k`.
    #[arg(long)]
    pub k: Option<usize>,
    /// k-means cluster count. Overrides `baseline.clusters`.
    #[arg(long)]
    pub clusters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Probe an analytic fixture (plane, paraboloid, ring, two-cluster-blobs)
    /// instead of the trained checkpoint.
    #[arg(long)]
    pub fixture: Option<String>,
    /// Also measure loss change under latent perturbations of size eps,
    /// 2 eps and 4 eps.
    #[arg(long)]
    pub sensitivity: bool,
    /// Smallest perturbation size. Overrides `probe.eps`.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Random directions per latent. Overrides `probe.trials`.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Points per side of the latent grid; other latent sizes get grid^2
    /// Gaussian draws. Overrides `probe.grid`.
    #[arg(long)]
    pub grid: Option<usize>,
}

fn command() -> clap::Command {
    let defaults = format!(
        "Configuration defaults (every key optional):\n\n{}\n\
         Unset unless given: data.train_images, data.train_labels, data.test_images, data.test_labels,\n\
         train.bilevel_geodesic_iters (defaults to train.geodesic.max_iter), classifier.classes\n\
         (defaults to one past the largest label), probe.fixture (defaults to the trained checkpoint).",
        RunConfig::default().to_toml()
    );
    Cli::command().after_long_help(defaults)
}

/// Parse arguments, run, and return the process exit status. Failures print
/// one line, `mprs: error[<kind>]: <reason>`, on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mprs: error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!("config file {} not found", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.propagate_seed();
    }
    if let Some(out) = cli.output {
        cfg.output = out;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.verb {
        Verb::Train(a) => cmd_train(cfg, a),
        Verb::Publish => cmd_publish(&cfg),
        Verb::Attack(a) => cmd_attack(&cfg, a),
        Verb::Evaluate(a) => cmd_evaluate(&cfg, a),
        Verb::Baseline(a) => cmd_baseline(cfg, a),
        Verb::Probe(a) => cmd_probe(cfg, a),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write(path, text + "\n")
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    t.epochs_mu = a.epochs_mu.unwrap_or(t.epochs_mu);
    t.epochs_sigma = a.epochs_sigma.unwrap_or(t.epochs_sigma);
    t.estimator.epochs = a.epochs_estimator.unwrap_or(t.estimator.epochs);
    t.epochs_bilevel = a.epochs_bilevel.unwrap_or(t.epochs_bilevel);
    cfg.validate()?;
    let (train, _) = pipeline::load_splits(&cfg)?;
    let trainer = pipeline::train(&cfg, &train, &cfg.output, a.resume)?;
    write(&cfg.output.join("config.toml"), cfg.to_toml())?;
    println!(
        "trained {} epochs on {} samples; checkpoint {}",
        trainer.log.records.len(),
        train.len(),
        pipeline::checkpoint_path(&cfg.output).display()
    );
    Ok(())
}

fn cmd_publish(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let trainer = pipeline::load_trainer(&cfg.output)?;
    let (train, _) = pipeline::load_splits(cfg)?;
    let mut published = pipeline::publish_with(&trainer, &train)?;
    if trainer.progress.phase != crate::bilevel::Phase::Done {
        published.notes.push(format!("checkpoint stopped early at {:?}", trainer.progress));
    }
    let dir = cfg.output.join(PUBLISHED_DIR);
    write_published(&dir, &published)?;
    println!("published {} samples to {}", published.dataset.len(), dir.display());
    Ok(())
}

fn published_dir(cfg: &RunConfig, a: &PublishedArg) -> PathBuf {
    a.published.clone().unwrap_or_else(|| cfg.output.join(PUBLISHED_DIR))
}

fn cmd_attack(cfg: &RunConfig, a: PublishedArg) -> Result<()> {
    cfg.validate()?;
    let published = read_published(&published_dir(cfg, &a))?;
    let (train, test) = pipeline::load_splits(cfg)?;
    if published.dataset.pixels() != train.pixels() {
        return Err(Error::Data("published images do not match the original image size".into()));
    }
    let s = pipeline::attack(cfg, &train, &test, &published.dataset)?;
    write_json(&cfg.output.join("attack.json"), &s)?;
    let mut csv = String::from("classifier,member,index,score\n");
    for (name, r) in [("original", &s.original), ("published", &s.published)] {
        for e in &r.eval {
            let _ = writeln!(csv, "{name},{},{},{}", e.member as u8, e.index, e.score);
        }
    }
    write(&cfg.output.join("attack.csv"), csv)?;
    let mut csv = String::from("index,proxy,vulnerable\n");
    for (i, (p, v)) in s.vulnerability.proxy.iter().zip(&s.original.member_flags).enumerate() {
        let _ = writeln!(csv, "{i},{p},{}", *v as u8);
    }
    write(&cfg.output.join("vulnerability.csv"), csv)?;
    println!(
        "attack accuracy {:.4} original, {:.4} published; test accuracy {:.4} original, {:.4} published",
        s.original.accuracy, s.published.accuracy, s.original_test_accuracy, s.published_test_accuracy
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, a: PublishedArg) -> Result<()> {
    cfg.validate()?;
    let published = read_published(&published_dir(cfg, &a))?;
    let (train, test) = pipeline::load_splits(cfg)?;
    let r = pipeline::evaluate(cfg, &train, &test, &published.dataset)?;
    write_json(&cfg.output.join("utility.json"), &r)?;
    println!(
        "test accuracy {:.4}, frechet {:.4}, diversity {:.4}",
        r.test_accuracy, r.frechet, r.diversity
    );
    Ok(())
}

fn cmd_baseline(mut cfg: RunConfig, a: BaselineArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let b = &mut cfg.baseline;
    b.block = a.block.unwrap_or(b.block);
    b.radius = a.radius.unwrap_or(b.radius);
    b.k = a.k.unwrap_or(b.k);
    b.clusters = a.clusters.unwrap_or(b.clusters);
    cfg.validate()?;
    let (train, _) = pipeline::load_splits(&cfg)?;
    let published = run_baseline(method, &train, &cfg.baseline)?;
    let dir = cfg.output.join(format!("baseline-{}", a.method));
    write_published(&dir, &published)?;
    println!("published {} samples to {}", published.dataset.len(), dir.display());
    Ok(())
}

fn cmd_probe(mut cfg: RunConfig, a: ProbeArgs) -> Result<()> {
    let p = &mut cfg.probe;
    if let Some(f) = a.fixture {
        p.fixture = Some(f.parse::<ManifoldKind>().map_err(|e| Error::Config(e.to_string()))?);
    }
    p.eps = a.eps.unwrap_or(p.eps);
    p.trials = a.trials.unwrap_or(p.trials);
    p.grid = a.grid.unwrap_or(p.grid);
    if !(p.eps > 0.0) || p.trials == 0 || p.grid < 2 || !(p.extent > 0.0) {
        return Err(Error::Config("probe needs eps > 0, trials >= 1, grid >= 2 and extent > 0".into()));
    }
    match cfg.probe.fixture {
        Some(kind) => probe(&fixture_decoder(kind), None, &cfg, a.sensitivity),
        None => {
            let t = pipeline::load_trainer(&cfg.output)?;
            let est = t.estimator.calibrated.then_some(&t.estimator);
            probe(&t.model, est, &cfg, a.sensitivity)
        }
    }
}

/// Probe latents: a regular grid for 2-D latents, Gaussian draws otherwise.
fn probe_latents(d: usize, cfg: &RunConfig) -> Result<Tensor> {
    let p = &cfg.probe;
    if d == 2 {
        let axis: Vec<f64> = (0..p.grid)
            .map(|i| -p.extent + 2.0 * p.extent * i as f64 / (p.grid - 1) as f64)
            .collect();
        let rows: Vec<Vec<f64>> = axis.iter().flat_map(|&y| axis.iter().map(move |&x| vec![x, y])).collect();
        return Ok(Tensor::from_rows(&rows)?);
    }
    let n = p.grid * p.grid;
    let mut rng = stream(cfg.seed, Stream::Probe, u64::MAX);
    let v = normals(&mut rng, n * d).into_iter().map(|x| x * p.extent).collect();
    Ok(Tensor::new(vec![n, d], v)?)
}

#[derive(Serialize)]
struct ProbeSummary {
    points: usize,
    max_curvature: f64,
    sensitivity: Vec<ProbeReport>,
}

fn probe<D: Decoder>(dec: &D, est: Option<&CurvatureEstimator>, cfg: &RunConfig, sensitivity: bool) -> Result<()> {
    let out = &cfg.output;
    let d = dec.latent_dim();
    let z = probe_latents(d, cfg)?;
    let fd = cfg.train.estimator.fd_eps;
    let curvature = |zi: &[f64]| curvature_fd(dec, zi, fd, FdScheme::OneSided);

    let mut csv = String::new();
    for j in 0..d {
        let _ = write!(csv, "z{j},");
    }
    csv.push_str(if est.is_some() { "curvature,logdet,estimate\n" } else { "curvature,logdet\n" });
    let mut ks = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let zi = z.row(i);
        let k = curvature(zi)?;
        let ld = pullback_metric(dec, zi)?.log_det(cfg.rvae.logdet_floor);
        for v in zi {
            let _ = write!(csv, "{v},");
        }
        let _ = write!(csv, "{k},{ld}");
        if let Some(e) = est {
            let _ = write!(csv, ",{}", e.predict(zi)?);
        }
        csv.push('\n');
        ks.push(k);
    }
    write(&out.join("geometry.csv"), csv)?;

    let mut reports = Vec::new();
    if sensitivity {
        // A fixed quadratic loss on the decoded point.
        let loss = |x: &[f64]| Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>());
        let mut csv = String::from("eps,index,curvature,mean_delta_loss\n");
        for m in [1.0, 2.0, 4.0] {
            let eps = cfg.probe.eps * m;
            let r = loss_sensitivity_probe(dec, curvature, loss, &z, eps, cfg.probe.trials, cfg.seed)?;
            for (i, pt) in r.points.iter().enumerate() {
                let _ = writeln!(csv, "{eps},{i},{},{}", pt.curvature, pt.mean_delta_loss);
            }
            reports.push(r);
        }
        write(&out.join("sensitivity.csv"), csv)?;
    }
    write_json(
        &out.join("probe.json"),
        &ProbeSummary {
            points: z.rows(),
            max_curvature: ks.iter().copied().fold(0.0, f64::max),
            sensitivity: reports,
        },
    )?;

    if d == 2 {
        let e = cfg.probe.extent;
        let path = geodesic(dec, &[-e, -0.5 * e], &[e, 0.5 * e], &cfg.train.geodesic)?;
        write(&out.join("latent.svg"), latent_svg(&z, &ks, &path, e))?;
    }
    println!("probed {} latents; outputs in {}", z.rows(), out.display());
    Ok(())
}

/// Latent scatter shaded by curvature, with one geodesic drawn over it.
fn latent_svg(z: &Tensor, k: &[f64], path: &GeodesicPath, extent: f64) -> String {
    const SIZE: f64 = 400.0;
    let to_px = |v: f64| (v + extent) / (2.0 * extent) * SIZE;
    let kmax = k.iter().copied().fold(0.0, f64::max);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, &ki) in k.iter().enumerate() {
        let shade = if kmax > 0.0 { ki / kmax } else { 0.0 };
        let r = (255.0 * shade).round() as u8;
        let b = 255 - r;
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"rgb({r},0,{b})\"/>",
            to_px(z.row(i)[0]),
            SIZE - to_px(z.row(i)[1])
        );
    }
    let pts: Vec<String> = (0..path.samples.rows())
        .map(|i| {
            let p = path.samples.row(i);
            format!("{:.2},{:.2}", to_px(p[0]), SIZE - to_px(p[1]))
        })
        .collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>", pts.join(" "));
    s.push_str("</svg>\n");
    s
}
