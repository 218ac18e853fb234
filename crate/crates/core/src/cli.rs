//! Command-line front end. Every subcommand reads the same flat config, lets
//! `--set key=value` and dedicated flags override it, and writes results
//! into an output directory or to stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::guidance::{EnergyFunction, GuidanceHook, GuidanceMode};
use crate::io::{fmt_f64, read_image, read_mask, read_text, write_image, write_normalized, write_tensor, write_text};
use crate::pipeline::{
    build_score_model, compare_with_random_regions, run_attack, run_ensemble, run_guidance_comparison, sampler_gamma,
    toy_scene, write_comparison, write_ensemble, AttackConfig,
};
use crate::saliency::{salient_regions, SrsConfig};
use crate::sampler::{sample, SamplerConfig};
use crate::scoremodels::scenes::template;
use crate::scoremodels::Condition;
use crate::spectra::{
    anisotropic_mixture, extremal_singular, full_jacobian, full_svd, injection_experiment, Extremal, InjectionConfig,
};
use crate::tensor::Tensor;
use crate::victim::{mrsr, Mask, MaskRole};

#[derive(Parser, Debug)]
#[command(name = "advdepth", version, about = "Adversarial object generation against toy depth estimators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(short = 'k', long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub scene: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

impl Common {
    /// File first, then `--set`, then dedicated flags.
    pub fn config(&self) -> Result<AttackConfig> {
        let mut cfg = AttackConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_text(&read_text(p)?, &p.display().to_string())?;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::parse("--set", format!("expected KEY=VALUE, got `{s}`")))?;
            cfg.set(k.trim(), v)?;
        }
        let flags: [(&str, Option<String>); 7] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("scene", self.scene.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print or write the noise schedule table.
    Schedule {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one guided sample pulled toward a class template.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Template the quadratic energy pulls toward.
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Rank candidate patches by salient region selection.
    Srs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Scene image (PGM); defaults to the configured ensemble scene.
        #[arg(long, requires = "mask")]
        image: Option<PathBuf>,
        /// Target mask (PGM).
        #[arg(long, requires = "image")]
        mask: Option<PathBuf>,
    },
    /// Run the full attack on one scene, or on the whole ensemble.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ensemble: bool,
        /// Random-region draws to compare against (ensemble runs only).
        #[arg(long, default_value_t = 0)]
        random_draws: usize,
    },
    /// Compare guidance modes over a shared seed set.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "jvpg,energy_dps,mpgd")]
        modes: Vec<String>,
        /// `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "0..9")]
        seeds: String,
    },
    /// Score-Jacobian spectrum and the top/bottom direction injection runs.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0..19")]
        seeds: String,
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
        /// Injection step; defaults to half the schedule.
        #[arg(long)]
        t_inject: Option<usize>,
    },
    /// Shift ratio of the target depth between two images.
    EvalMrsr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        attacked: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
}

/// `a..b` inclusive, a single number, or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::parse("--seeds", format!("expected `a..b` or a comma list, got `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_schedule(common: &Common, out: Option<&Path>) -> Result<String> {
    let table = common.config()?.schedule.build()?.to_table();
    match out {
        Some(p) => {
            write_text(p, &table)?;
            Ok(String::new())
        }
        None => Ok(table),
    }
}

fn cmd_sample(common: &Common, out: &Path, class: usize) -> Result<String> {
    let cfg = common.config()?;
    let model = build_score_model(&cfg)?;
    let side = cfg.ensemble.side;
    let goal = template(class, side, side)?;
    let hook = GuidanceHook::new(cfg.mode, EnergyFunction::quadratic(goal), sampler_gamma(cfg.mode, cfg.gamma))
        .with_gamma_schedule(cfg.gamma_schedule)
        .with_linearization(cfg.linearization);
    let cond = if cfg.condition_on_class { Condition::label(class) } else { Condition::none() };
    let traj = sample(model.as_ref(), &cond, &SamplerConfig::seeded(cfg.seed), Some(&hook))?;
    ensure_dir(out)?;
    let mut stacked = Vec::new();
    for z in &traj.states {
        stacked.extend_from_slice(z.data());
    }
    let mut shape = vec![traj.states.len()];
    shape.extend_from_slice(model.shape());
    write_tensor(&out.join("trajectory.f64"), &Tensor::new(&shape, stacked)?)?;
    write_image(&out.join("terminal.pgm"), traj.terminal())?;
    let mut csv = String::from("t,energy,state_norm,guidance_norm,delta_norm,jdelta_norm\n");
    let opt = |x: Option<f64>| x.map_or("nan".to_string(), fmt_f64);
    for r in &traj.records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.t,
            opt(r.energy),
            fmt_f64(r.state_norm),
            fmt_f64(r.guidance_norm),
            opt(r.delta_norm),
            opt(r.jdelta_norm)
        );
    }
    write_text(&out.join("steps.csv"), &csv)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    Ok(format!("terminal energy: {}\n", opt(traj.records.last().and_then(|r| r.energy))))
}

fn scene_inputs(cfg: &AttackConfig, image: Option<&Path>, mask: Option<&Path>) -> Result<(Tensor, Mask, crate::pipeline::ToyScene)> {
    let scene = toy_scene(&cfg.ensemble, cfg.scene)?;
    match (image, mask) {
        (Some(i), Some(m)) => {
            let x = read_image(i)?;
            let m = Mask::new(read_mask(m)?, MaskRole::Target)?;
            Ok((x, m, scene))
        }
        _ => Ok((scene.x.clone(), scene.target.clone(), scene)),
    }
}

fn cmd_srs(common: &Common, out: &Path, image: Option<&Path>, mask: Option<&Path>) -> Result<String> {
    let cfg = common.config()?;
    let (x, m_t, scene) = scene_inputs(&cfg, image, mask)?;
    let srs = SrsConfig { seed: cfg.seed, ..cfg.srs.clone() };
    let res = salient_regions(&x, &m_t, &scene.victim, &srs)?;
    ensure_dir(out)?;
    let mut csv = String::from("index,y,x,score,objective,rank\n");
    let mut rank = vec![0; res.ranking.len()];
    for (r, &i) in res.ranking.iter().enumerate() {
        rank[i] = r + 1;
    }
    for (i, p) in res.grid.patches.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{}",
            p.origin.0,
            p.origin.1,
            fmt_f64(res.scores[i]),
            fmt_f64(res.objectives[i]),
            rank[i]
        );
    }
    write_text(&out.join("patches.csv"), &csv)?;
    for (j, m) in res.topk_masks().iter().enumerate() {
        write_image(&out.join(format!("top{}.pgm", j + 1)), m.tensor())?;
    }
    write_normalized(&out.join("saliency.pgm"), &res.heatmap())?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let mut s = String::new();
    for (j, &i) in res.topk().iter().enumerate() {
        let (y, x) = res.grid.patches[i].origin;
        let _ = writeln!(s, "top {}: patch {i} at ({y}, {x}) score {}", j + 1, fmt_f64(res.scores[i]));
    }
    Ok(s)
}

fn cmd_attack(common: &Common, out: &Path, ensemble: bool, draws: usize) -> Result<String> {
    let cfg = common.config()?;
    ensure_dir(out)?;
    if ensemble {
        let rep = run_ensemble(&cfg)?;
        write_ensemble(&rep, out)?;
        let mut s = rep.summary();
        if draws > 0 {
            let cmp = compare_with_random_regions(&rep, draws)?;
            let mut csv = String::from("draw,random_mean_mrsr,srs_mean_mrsr\n");
            for (d, r) in cmp.random_mean_xi.iter().enumerate() {
                let _ = writeln!(csv, "{d},{},{}", fmt_f64(*r), fmt_f64(cmp.srs_mean_xi));
            }
            write_text(&out.join("random_regions.csv"), &csv)?;
            let _ = writeln!(s, "srs beats random regions on {} of draws", fmt_f64(cmp.srs_win_rate()));
        }
        return Ok(s);
    }
    let rep = run_attack(&cfg)?;
    eprintln!("attack wall-clock: {:.3} s", rep.wall_clock.as_secs_f64());
    rep.write(out)?;
    if let Some(e) = &rep.error {
        return Err(Error::invalid(format!("attack failed; partial report written: {e}")));
    }
    Ok(rep.summary())
}

fn cmd_compare(common: &Common, out: &Path, modes: &[String], seeds: &str) -> Result<String> {
    let cfg = common.config()?;
    let modes: Vec<GuidanceMode> = modes.iter().map(|m| m.trim().parse()).collect::<Result<_>>()?;
    let seeds = parse_seeds(seeds)?;
    let rep = run_guidance_comparison(&cfg, &modes, &seeds)?;
    ensure_dir(out)?;
    write_comparison(&rep, out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let mut s = String::new();
    for (i, m) in rep.modes.iter().enumerate() {
        let _ = writeln!(s, "{m}: mean mrsr {} mean log-density {}", fmt_f64(rep.mean_xi(i)), fmt_f64(rep.mean_log_density(i)));
    }
    Ok(s)
}

fn cmd_spectrum(common: &Common, out: &Path, seeds: &str, magnitude: f64, t_inject: Option<usize>) -> Result<String> {
    let cfg = common.config()?;
    let sched = cfg.schedule.build()?;
    let model = anisotropic_mixture(sched.clone())?;
    let seeds = parse_seeds(seeds)?;
    let mut icfg = InjectionConfig::for_schedule(&sched);
    icfg.magnitude = magnitude;
    if let Some(t) = t_inject {
        icfg.t_inject = t;
    }
    let c = Condition::none();
    let scfg = SamplerConfig::seeded(cfg.seed);
    let mut sampler = crate::sampler::Sampler::new(&model, c, &scfg, None)?;
    sampler.run_to(icfg.t_inject)?;
    let z = sampler.state().clone();
    let dense = full_svd(&full_jacobian(&model, &z, icfg.t_inject, &c)?)?;
    let top = extremal_singular(&model, &z, icfg.t_inject, &c, Extremal::Top, icfg.iters, icfg.tol, cfg.seed)?;
    let bottom = extremal_singular(&model, &z, icfg.t_inject, &c, Extremal::Bottom, icfg.iters, icfg.tol, cfg.seed)?;
    ensure_dir(out)?;
    let mut csv = String::from("index,singular_value\n");
    for (i, s) in dense.values.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", fmt_f64(*s));
    }
    write_text(&out.join("singular_values.csv"), &csv)?;
    write_tensor(&out.join("u_plus.f64"), &top.left[0])?;
    write_tensor(&out.join("u_minus.f64"), &bottom.left[0])?;
    let summary = injection_experiment(&model, &c, &seeds, &icfg)?;
    let mut csv = String::from("seed,direction,magnitude,log_density,displacement\n");
    for p in &summary.pairs {
        let _ = writeln!(csv, "{},none,0,{},0", p.seed, fmt_f64(p.baseline_log_density));
        for (r, d) in [(&p.top, p.top_displacement), (&p.bottom, p.bottom_displacement)] {
            let _ = writeln!(csv, "{},{},{},{},{}", r.seed, r.direction, fmt_f64(r.magnitude), fmt_f64(r.log_density), fmt_f64(d));
        }
    }
    write_text(&out.join("injection.csv"), &csv)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let (base, lt, lb) = summary.mean_log_density();
    Ok(format!(
        "sigma_max {} sigma_min {} (power iteration {} / {})\nmean log-density: none {} u+ {} u- {}\nu+ wins on {} of seeds\n",
        fmt_f64(dense.values[0]),
        fmt_f64(*dense.values.last().expect("nonempty")),
        fmt_f64(top.values[0]),
        fmt_f64(bottom.values[0]),
        fmt_f64(base),
        fmt_f64(lt),
        fmt_f64(lb),
        fmt_f64(summary.top_win_rate())
    ))
}

fn cmd_eval_mrsr(common: &Common, image: &Path, attacked: &Path, mask: &Path) -> Result<String> {
    let cfg = common.config()?;
    let scene = toy_scene(&cfg.ensemble, cfg.scene)?;
    let x = read_image(image)?;
    let z = read_image(attacked)?;
    let m = Mask::new(read_mask(mask)?, MaskRole::Target)?;
    let xi = mrsr(&scene.victim, &x, &z, &m)?;
    Ok(format!("{}\n", if xi == 0.0 { "0".to_string() } else { fmt_f64(xi) }))
}

pub fn execute(cli: &Cli) -> Result<String> {
    let start = Instant::now();
    let out = match &cli.command {
        Command::Schedule { common, out } => cmd_schedule(common, out.as_deref()),
        Command::Sample { common, out, class } => cmd_sample(common, out, *class),
        Command::Srs { common, out, image, mask } => cmd_srs(common, out, image.as_deref(), mask.as_deref()),
        Command::Attack { common, out, ensemble, random_draws } => cmd_attack(common, out, *ensemble, *random_draws),
        Command::Compare { common, out, modes, seeds } => cmd_compare(common, out, modes, seeds),
        Command::Spectrum { common, out, seeds, magnitude, t_inject } => {
            cmd_spectrum(common, out, seeds, *magnitude, *t_inject)
        }
        Command::EvalMrsr { common, image, attacked, mask } => cmd_eval_mrsr(common, image, attacked, mask),
    };
    eprintln!("elapsed: {:.3} s", start.elapsed().as_secs_f64());
    out
}

/// Parses `argv`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
