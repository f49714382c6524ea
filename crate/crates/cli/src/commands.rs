//! Subcommand implementations.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use tubempc::config::Config;
use tubempc::design::{
    build_design, design_from_artifacts, gain_stage, lipschitz_stage, make_plant, tube_stage,
    verify_terminal_decrease, vertex_setpoints, Artifacts, Design,
};
use tubempc::equilibria::{best_setpoint, EquilibriumMaps};
use tubempc::error::{MpcError, Result};
use tubempc::io::{self, TABLE_DECIMALS};
use tubempc::lipschitz::{verify_constants, LipschitzMatrices, SamplingRegion};
use tubempc::model::Plant;
use tubempc::policy::AffinePolicy;
use tubempc::sim::{compute_metrics, grid_pairs, run_batch, run_closed_loop, Scenario};
use tubempc::svg::{Chart, Series, PALETTE};
use tubempc::terminal::{inflation, linearize_vertices, omega_level};
use tubempc::tubes::tighten;

use crate::{plots, Cli, Command, PlotArgs, SimulateArgs, SolveArgs};

/// Certification or feasibility failure.
const EXIT_FAILURE: u8 = 3;
/// Tolerance of the sampled terminal decrease check.
const DECREASE_TOL: f64 = 1e-6;

pub fn exit_code(e: &MpcError) -> u8 {
    match e {
        MpcError::Config(_) | MpcError::InvalidParameter(_) | MpcError::Dimension { .. } => 2,
        MpcError::NotLipschitz { .. }
        | MpcError::HorizonTooLong { .. }
        | MpcError::EmptyRegion
        | MpcError::SynthesisFailed(_)
        | MpcError::TerminalDesignFailed(_)
        | MpcError::InfeasibleProblem
        | MpcError::ScenarioInfeasible(_)
        | MpcError::InfeasibleEquilibrium { .. }
        | MpcError::NoEquilibrium { .. } => EXIT_FAILURE,
        _ => 1,
    }
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.inject_paper_values {
        cfg.inject_published_values();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    let ok = match &cli.command {
        Command::Lipschitz => lipschitz(cli, &cfg)?,
        Command::Tubes => tubes(cli, &cfg)?,
        Command::Terminal => terminal(cli, &cfg)?,
        Command::Yt => yt(cli, &cfg)?,
        Command::Solve(a) => solve(cli, &cfg, a)?,
        Command::Simulate(a) => simulate(cli, &cfg, a)?,
        Command::Batch => batch(cli, &cfg)?,
        Command::Plot(a) => plot(cli, &cfg, a)?,
    };
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| MpcError::InvalidParameter(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Hex SHA-256 of the canonical configuration text.
pub fn config_hash(cfg: &Config) -> Result<String> {
    let text = cfg.to_toml_string()?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Design from the artifact cache when the configuration hash matches,
/// otherwise computed and stored.
pub fn cached_design(out: &Path, cfg: &Config) -> Result<Design> {
    let dir = out.join("cache");
    let path = dir.join(format!("design-{}.json", config_hash(cfg)?));
    if let Ok(text) = fs::read_to_string(&path) {
        match serde_json::from_str::<Artifacts>(&text) {
            Ok(art) => {
                log::info!("reusing design artifacts {}", path.display());
                return design_from_artifacts(cfg, art);
            }
            Err(e) => log::warn!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let design = build_design(cfg)?;
    fs::create_dir_all(&dir)?;
    write_json(&path, &design.artifacts)?;
    Ok(design)
}

struct Stages {
    plant: Arc<dyn Plant>,
    maps: EquilibriumMaps,
    policy: AffinePolicy,
}

fn stages(cfg: &Config) -> Result<Stages> {
    let plant: Arc<dyn Plant> = make_plant(cfg)?;
    let maps = EquilibriumMaps::new(plant.clone());
    let ys = vertex_setpoints(cfg, &maps)?;
    let vertices = linearize_vertices(plant.as_ref(), &maps, &ys)?;
    let k = gain_stage(cfg, &vertices)?;
    Ok(Stages {
        plant,
        maps,
        policy: AffinePolicy::new(k),
    })
}

fn write_lipschitz(out: &Path, l: &LipschitzMatrices) -> Result<()> {
    for (name, m) in [("l_x", &l.l_x), ("l_v", &l.l_v), ("l_w", &l.l_w)] {
        let path = out.join(format!("{name}.csv"));
        io::write_matrix_csv(create(&path)?, m, TABLE_DECIMALS)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn lipschitz(cli: &Cli, cfg: &Config) -> Result<bool> {
    let st = stages(cfg)?;
    let injected = cfg.lipschitz_matrices()?;
    if cli.verify_only && injected.is_none() {
        return Err(MpcError::Config(
            "--verify-only needs lipschitz.l_x, l_v and l_w (or --inject-paper-values)".into(),
        ));
    }
    let l = lipschitz_stage(cfg, st.plant.as_ref(), &st.policy, &st.maps)?;
    if injected.is_none() {
        write_lipschitz(&cli.out, &l)?;
        return Ok(true);
    }
    let region = SamplingRegion::from_plant(st.plant.as_ref(), tubempc::design::candidate_box(cfg)?);
    let report = verify_constants(
        st.plant.as_ref(),
        &st.policy,
        &st.maps,
        &region,
        &l,
        cfg.lipschitz.verify_pairs,
        cfg.seed.wrapping_add(1),
    )?;
    for (i, row) in report.rows.iter().enumerate() {
        println!("row {}: max residual {:.3e}", i + 1, row.max_residual);
    }
    println!(
        "{} pairs, worst residual {:.3e} (row {}): {}",
        report.samples,
        report.worst(),
        report.worst_row() + 1,
        if report.passed { "certified" } else { "NOT certified" }
    );
    write_json(&cli.out.join("lipschitz_residuals.json"), &report)?;
    if !cli.verify_only {
        write_lipschitz(&cli.out, &l)?;
    }
    Ok(report.passed)
}

fn tubes(cli: &Cli, cfg: &Config) -> Result<bool> {
    let st = stages(cfg)?;
    let l = lipschitz_stage(cfg, st.plant.as_ref(), &st.policy, &st.maps)?;
    let tubes = tube_stage(cfg, &l)?;
    if let Some(w) = tubes.growth_warning(st.plant.state_box()) {
        log::warn!("{w}");
    }
    let k = st.policy.k.clone();
    tighten(st.plant.state_box(), st.plant.input_box(), &k, &tubes)?;
    let mut buf = Vec::new();
    io::write_tubes_csv(&mut buf, &tubes, TABLE_DECIMALS)?;
    let path = cli.out.join("tubes.csv");
    fs::write(&path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    eprintln!("wrote {}", path.display());
    Ok(true)
}

#[derive(Serialize)]
struct TerminalFile<'a> {
    config_sha256: String,
    k: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    rho: f64,
    rho_omega: f64,
    delta: f64,
    report: &'a tubempc::design::TerminalReport,
}

fn terminal(cli: &Cli, cfg: &Config) -> Result<bool> {
    let design = cached_design(&cli.out, cfg)?;
    let art = &design.artifacts;
    let pr = &design.problem;
    let delta = inflation(&art.p, &pr.tubes.f[pr.tubes.horizon - 1]);
    let rho_omega = omega_level(art.rho, delta);
    let vc = &art.terminal.vertex_check;
    println!("K =\n{:.4}", art.k);
    println!("P =\n{:.4}", art.p);
    println!("rho = {:.6} (published 0.1273), rho_omega = {rho_omega:.6}, delta = {delta:.6}", art.rho);
    println!(
        "vertex decrease eigenvalue {:.4e} ({}), contraction {:.4} ({})",
        vc.max_decrease_eig,
        if vc.decrease_ok { "ok" } else { "violated" },
        vc.contraction,
        if vc.contraction_ok { "ok" } else { "violated" }
    );
    if let Some(s) = &art.terminal.sizing {
        println!(
            "invariance ratio {:.4} over {} setpoints, containment level {:.6}",
            s.invariance_ratio, s.setpoints_checked, s.rho_containment
        );
    }
    println!("L_g = {:.4}, b = {:.4}", art.l_g, art.terminal.offset_bound);
    let file = TerminalFile {
        config_sha256: config_hash(cfg)?,
        k: tubempc::linalg::to_rows(&art.k),
        p: tubempc::linalg::to_rows(&art.p),
        rho: art.rho,
        rho_omega,
        delta,
        report: &art.terminal,
    };
    write_json(&cli.out.join("terminal.json"), &file)?;
    let rep = verify_terminal_decrease(cfg, &design, DECREASE_TOL)?;
    println!(
        "sampled decrease: worst {:.4e} over {} samples ({} skipped) at y_s = {:?}: {}",
        rep.worst,
        rep.samples,
        rep.skipped,
        rep.worst_setpoint,
        if rep.passed { "pass" } else { "FAIL" }
    );
    write_json(&cli.out.join("terminal_decrease.json"), &rep)?;
    Ok(!cli.verify_only || rep.passed)
}

fn yt(cli: &Cli, cfg: &Config) -> Result<bool> {
    let design = cached_design(&cli.out, cfg)?;
    let pr = &design.problem;
    let region = &pr.region;
    let mut w = csv_writer(&cli.out.join("yt_vertices.csv"))?;
    w.write_record(["y1", "y2"]).map_err(csv_err)?;
    for v in &region.vertices {
        w.write_record(v.iter().map(|x| x.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    let mut m = csv_writer(&cli.out.join("yt_membership.csv"))?;
    m.write_record(["yt1", "yt2", "inside", "ys1", "ys2"]).map_err(csv_err)?;
    for e in &cfg.scenario.schedule {
        let y = DVector::from_column_slice(&e.y_t);
        let inside = region.contains(&e.y_t, 0.0);
        let best = best_setpoint(&y, region, &pr.t)?;
        println!(
            "y_t = {:?}: {}, best setpoint ({:.4}, {:.4})",
            e.y_t,
            if inside { "inside" } else { "outside" },
            best[0],
            best[1]
        );
        m.write_record([
            e.y_t[0].to_string(),
            e.y_t[1].to_string(),
            inside.to_string(),
            best[0].to_string(),
            best[1].to_string(),
        ])
        .map_err(csv_err)?;
    }
    m.flush()?;
    println!("{} region vertices", region.vertices.len());
    let mut chart = Chart::new("Admissible setpoints", "y1 [m]", "y2 [m]");
    let mut poly = region.vertices.clone();
    if let Some(first) = poly.first().cloned() {
        poly.push(first);
    }
    chart
        .series
        .push(Series::new("region", poly.iter().map(|v| (v[0], v[1])).collect(), PALETTE[0]));
    for (i, e) in cfg.scenario.schedule.iter().enumerate() {
        let (x, y) = (e.y_t[0], e.y_t[1]);
        let d = 0.004;
        chart.series.push(Series::new(
            format!("target {}", i + 1),
            vec![(x - d, y), (x + d, y), (x, y), (x, y - d), (x, y + d)],
            PALETTE[(i + 1) % PALETTE.len()],
        ));
    }
    write_text(&cli.out.join("yt.svg"), &chart.render())?;
    Ok(true)
}

fn csv_err(e: csv::Error) -> MpcError {
    MpcError::InvalidParameter(format!("csv: {e}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn vec_arg(name: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(MpcError::Config(format!("--{name} needs {len} values, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

fn solve(cli: &Cli, cfg: &Config, a: &SolveArgs) -> Result<bool> {
    let design = cached_design(&cli.out, cfg)?;
    let pr = &design.problem;
    let x0 = vec_arg("x0", a.x0.as_deref().unwrap_or(&cfg.scenario.x0), pr.plant.state_dim())?;
    let default_yt = cfg.scenario.schedule.first().map(|e| e.y_t.clone()).unwrap_or_default();
    let y_t = vec_arg("yt", a.yt.as_deref().unwrap_or(&default_yt), pr.plant.output_dim())?;
    let started = std::time::Instant::now();
    let sol = pr.solve(&x0, &y_t, None)?;
    let elapsed = started.elapsed();
    println!("status       {}", sol.status);
    println!("iterations   {}", sol.iterations);
    println!("cost         {:.6e}", sol.cost);
    println!("kkt residual {:.3e}", sol.kkt_residual);
    println!("violation    {:.3e}", sol.max_violation);
    println!("y_s          {:?}", sol.y_s.as_slice());
    println!("x_s          {:?}", sol.x_s.as_slice());
    println!("v_s          {:?}", sol.v_s.as_slice());
    println!("v(0)         {:?}", sol.v_seq[0].as_slice());
    let u = pr.policy.apply(&x0, &sol.x_s, &sol.v_seq[0]);
    println!("u(0)         {:?}", u.as_slice());
    println!("time         {:.3} ms", elapsed.as_secs_f64() * 1e3);
    if a.trajectory {
        let path = cli.out.join("trajectory.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["j", "x1", "x2", "x3", "x4", "v1", "v2"]).map_err(csv_err)?;
        for (j, x) in sol.predicted_states.iter().enumerate() {
            let mut rec = vec![j.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            match sol.v_seq.get(j) {
                Some(v) => rec.extend(v.iter().map(|v| v.to_string())),
                None => rec.extend(["".to_string(), "".to_string()]),
            }
            w.write_record(rec).map_err(csv_err)?;
        }
        w.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(true)
}

fn write_trace_outputs(out: &Path, trace: &tubempc::sim::Trace, plant: &dyn Plant) -> Result<()> {
    io::write_trace_csv(create(&out.join("trace.csv"))?, trace)?;
    write_text(&out.join("states.svg"), &plots::states_chart(&trace.records, plant).render())?;
    write_text(&out.join("inputs.svg"), &plots::inputs_chart(&trace.records, plant).render())?;
    Ok(())
}

fn simulate(cli: &Cli, cfg: &Config, a: &SimulateArgs) -> Result<bool> {
    let design = cached_design(&cli.out, cfg)?;
    let pr = &design.problem;
    let w = a.w.clone().unwrap_or_else(|| cfg.scenario.w.clone());
    let scenario = Scenario::from_config(cfg, w)?;
    let trace = run_closed_loop(pr, &scenario)?;
    let metrics = compute_metrics(&trace, &scenario, pr)?;
    write_trace_outputs(&cli.out, &trace, pr.plant.as_ref())?;
    write_json(&cli.out.join("metrics.json"), &metrics)?;
    println!(
        "{} steps, {} violations, {} infeasible, {} fallback, {} W-descent violations",
        metrics.steps,
        metrics.violations,
        metrics.infeasible_steps,
        metrics.fallback_steps,
        metrics.w_descent_violations
    );
    for s in &metrics.segments {
        println!(
            "y_t = {:?}, y_s* = ({:.4}, {:.4}), final error {:.3e}",
            s.y_t, s.y_s_star[0], s.y_s_star[1], s.final_error
        );
    }
    Ok(metrics.violations == 0 && metrics.infeasible_steps == 0)
}

fn batch(cli: &Cli, cfg: &Config) -> Result<bool> {
    let design = cached_design(&cli.out, cfg)?;
    let pr = &design.problem;
    let base = Scenario::from_config(cfg, vec![0.0; pr.plant.dist_dim()])?;
    let grid = grid_pairs(&cfg.batch.w_values);
    let started = std::time::Instant::now();
    let report = run_batch(pr, &base, &grid)?;
    let elapsed = started.elapsed();
    let traces = cli.out.join("traces");
    fs::create_dir_all(&traces)?;
    for (i, run) in report.runs.iter().enumerate() {
        io::write_trace_csv(create(&traces.join(format!("trace_{i:03}.csv")))?, &run.trace)?;
    }
    io::write_envelope_csv(create(&cli.out.join("envelope.csv"))?, &report.envelope)?;
    let plant = pr.plant.as_ref();
    write_text(&cli.out.join("envelope.svg"), &plots::envelope_chart(&report.envelope, plant).render())?;
    write_text(
        &cli.out.join("inputs_envelope.svg"),
        &plots::input_envelope_chart(&report.envelope, plant).render(),
    )?;
    let mut text = String::new();
    text.push_str(&format!("scenarios            {}\n", report.runs.len()));
    text.push_str(&format!("total steps          {}\n", report.total_steps));
    text.push_str(&format!("violations           {}\n", report.violations));
    text.push_str(&format!("infeasible steps     {}\n", report.infeasible_steps));
    text.push_str(&format!("fallback steps       {}\n", report.fallback_steps));
    text.push_str(&format!("feasible→infeasible  {}\n", report.feasible_to_infeasible));
    text.push_str(&format!("feasibility rate     {}\n", report.feasibility_rate));
    if let Some(run) = report.runs.first() {
        for (s, e) in run.metrics.segments.iter().zip(&report.max_final_error) {
            text.push_str(&format!(
                "segment y_t = ({}, {}), y_s* = ({:.4}, {:.4}), max final error {:.4e}\n",
                s.y_t[0], s.y_t[1], s.y_s_star[0], s.y_s_star[1], e
            ));
        }
    }
    write_text(&cli.out.join("report.txt"), &text)?;
    print!("{text}");
    eprintln!("batch took {:.1} s", elapsed.as_secs_f64());
    Ok(report.violations == 0 && report.infeasible_steps == 0)
}

fn plot(cli: &Cli, cfg: &Config, a: &PlotArgs) -> Result<bool> {
    let plant = make_plant(cfg)?;
    let records = io::read_trace_csv(File::open(&a.trace)?)?;
    let stem = a
        .trace
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into());
    let outputs: [(PathBuf, Chart); 2] = [
        (cli.out.join(format!("{stem}_states.svg")), plots::states_chart(&records, plant.as_ref())),
        (cli.out.join(format!("{stem}_inputs.svg")), plots::inputs_chart(&records, plant.as_ref())),
    ];
    for (path, chart) in outputs {
        write_text(&path, &chart.render())?;
        println!("wrote {}", path.display());
    }
    Ok(true)
}
