//! Command implementations. Each takes the parsed config, writes one
//! result file, and prints the path it wrote to stdout.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use qrn_core::engine::{
    generation_cdf_1d, generation_pdf_1d, run_protocol, target_state, FilterSchedule, Protocol,
};
use qrn_core::montecarlo::{estimate, mc_protocol, McConfig};
use qrn_core::optimize::{optimize_point, sweep};

use crate::config::RunConfig;
use crate::emit::{
    write_optimum_csv, write_pdf_csv, EngineReference, LevelRecord, MatrixDump, McOutput,
    OptimumRow, PdfRow, SimulateOutput, SimulateRecord, ZScores,
};

pub struct RunArgs {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dump_states: bool,
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::OneD => "chain",
        Protocol::TwoD => "triangle",
    }
}

impl RunArgs {
    /// Output file: --out, then [output] path, then the command default.
    fn out_path(&self, default: &str) -> PathBuf {
        self.out
            .clone()
            .or_else(|| self.config.output_path().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(default))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn filter_fields(f: FilterSchedule) -> (Option<f64>, Option<f64>, Option<f64>) {
    match f {
        FilterSchedule::Off => (None, None, None),
        FilterSchedule::Uniform { tau } => (Some(tau), None, None),
        FilterSchedule::UniformTwoStage { tau1, tau2 } => (None, Some(tau1), Some(tau2)),
    }
}

pub fn simulate(args: &RunArgs) -> Result<()> {
    let configs = args.config.protocol_configs(true)?;
    let first = configs.first().expect("protocol_configs returns ≥ 1 entry");
    let target = target_state(first.protocol, first.n_max)?;
    let mut records = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let levels = run_protocol(cfg)?;
        let (tau_s, tau1_s, tau2_s) = filter_fields(cfg.filter);
        let level_records = levels
            .iter()
            .enumerate()
            .map(|(i, r)| LevelRecord {
                level: i as u32,
                fidelity: target.overlap(&r.rho),
                t_avg_s: r.t_avg,
                p_merge: r.p_merge,
                p_nofilter: r.p_nofilter,
                p1: r.p1,
                p2: r.p2,
                trace: r.rho.trace(),
                state: args.dump_states.then(|| MatrixDump::from_state(&r.rho)),
            })
            .collect();
        records.push(SimulateRecord { tau_s, tau1_s, tau2_s, levels: level_records });
    }
    let out = SimulateOutput {
        protocol: protocol_name(first.protocol).into(),
        levels: first.levels,
        n_max: first.n_max,
        records,
    };
    let path = args.out_path("simulate.json");
    write_json(&path, &out)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn mc(args: &RunArgs) -> Result<()> {
    let mut configs = args.config.protocol_configs(false)?;
    let cfg = configs.pop().expect("protocol_configs returns ≥ 1 entry");
    let (n_traj, cfg_seed, max_events, compare_engine) = args.config.mc_settings();
    let seed = args.seed.unwrap_or(cfg_seed);
    let proto = mc_protocol(&cfg)?;
    let est = estimate(&proto, &McConfig { n_traj, seed, max_events })?;
    let engine = if compare_engine {
        let levels = run_protocol(&cfg)?;
        let last = levels.last().expect("run_protocol returns ≥ 1 level");
        let target = target_state(cfg.protocol, cfg.n_max)?;
        Some(EngineReference {
            fidelity: Some(target.overlap(&last.rho)),
            t_avg_s: last.t_avg,
        })
    } else {
        None
    };
    let z_scores = engine.as_ref().map(|e| ZScores {
        fidelity: match (e.fidelity, est.mean_fid, est.stderr_fid) {
            (Some(f_e), Some(f_mc), Some(se)) if se > 0.0 => Some((f_e - f_mc) / se),
            _ => None,
        },
        time: (e.t_avg_s - est.mean_time) / est.stderr_time,
    });
    let out = McOutput {
        protocol: protocol_name(cfg.protocol).into(),
        levels: cfg.levels,
        n_max: cfg.n_max,
        n_traj,
        seed,
        mean_fidelity: est.mean_fid,
        stderr_fidelity: est.stderr_fid,
        mean_time_s: est.mean_time,
        stderr_time_s: est.stderr_time,
        mean_state: args.dump_states.then(|| MatrixDump::from_state(&est.mean_state)),
        engine,
        z_scores,
    };
    let path = args.out_path("mc.json");
    write_json(&path, &out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn objective_name(config: &RunConfig) -> String {
    config.optimize.as_ref().map(|o| o.objective.clone()).unwrap_or_default()
}

pub fn optimize(args: &RunArgs) -> Result<()> {
    let spec = args.config.optimize_spec(true)?;
    let best = optimize_point(&spec)?;
    let row = OptimumRow {
        l_km: spec.total_l_km,
        t_coh_s: spec.hw.t_coh,
        levels: best.n,
        eps: best.params.eps,
        eps_b: best.params.eps_b,
        nu_tau: best.params.nu_tau,
        nu_tau2: best.params.nu_tau2,
        value: best.value,
        evaluations: best.evaluations,
    };
    let path = args.out_path("optimize.csv");
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    write_optimum_csv(BufWriter::new(file), &objective_name(&args.config), &[row])?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn sweep_cmd(args: &RunArgs) -> Result<()> {
    let spec = args.config.sweep_spec()?;
    let table = sweep(&spec)?;
    let rows: Vec<OptimumRow> = table
        .points
        .iter()
        .map(|p| OptimumRow {
            l_km: p.l_km,
            t_coh_s: p.t_coh_s,
            levels: p.best.n,
            eps: p.best.params.eps,
            eps_b: p.best.params.eps_b,
            nu_tau: p.best.params.nu_tau,
            nu_tau2: p.best.params.nu_tau2,
            value: p.best.value,
            evaluations: p.best.evaluations,
        })
        .collect();
    for s in &table.skipped {
        eprintln!("skipped l_km={} t_coh_s={}: {}", s.l_km, s.t_coh_s, s.reason);
    }
    let path = args.out_path("sweep.csv");
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    write_optimum_csv(BufWriter::new(file), &objective_name(&args.config), &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn pdf(args: &RunArgs) -> Result<()> {
    let p = args.config.pdf_section()?;
    let step = p.t_max_s / (p.points - 1) as f64;
    let times: Vec<f64> = (0..p.points).map(|i| i as f64 * step).collect();
    let table = generation_pdf_1d(p.p_merge, p.nu_per_s, &times)?;
    let mut rows = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        rows.push(PdfRow {
            t_s: t,
            density: table.density[i],
            cdf: generation_cdf_1d(p.p_merge, p.nu_per_s, t)?,
            reference_density: table.poisson[i],
        });
    }
    let path = args.out_path("pdf.csv");
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    write_pdf_csv(BufWriter::new(file), &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}
