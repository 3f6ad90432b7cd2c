//! Command implementations behind the CLI verbs.
//!
//! Each command reads the shared TOML config, produces its artifacts inside
//! the output directory, and returns a summary for exit-code decisions.
//! Archives, metadata and reports contain no wall-clock data, so reruns with
//! the same config and seed are byte-identical; timings go to separate
//! `*_log.txt` files.

use crate::archive::{
    grid_checksum, read_archive, write_archive, write_model, Archive, ArchiveHeader,
};
use crate::config::{resolve_mesh, RunConfig};
use crate::dg::{build_dg_operator, rk4_run_operator};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::field::Discretization;
use crate::oseen::{
    continuation_sweep, BoundaryConditions, FlowParameters, SteadySolution, SystemLayout,
};
use crate::pod::{build_snapshot_set, pod, pod_of_matrix};
use crate::rom::{
    affine_decompose_user, affine_decompose_viscosity, error_sweep, offline_build, AffineOperator,
    MatrixSource,
};
use crate::stab::{
    diagonal_lyapunov_search, eigen_replace, galerkin_reduce, power_slope, stabilize, PowerSource,
    PsoProblem, StabWeight, StabilizedRom,
};
use ndarray::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct CommandContext {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub verbose: bool,
}

impl CommandContext {
    pub fn new(config: RunConfig, out_dir: PathBuf, seed_override: Option<u64>, verbose: bool) -> Self {
        let seed = seed_override.unwrap_or(config.output.seed);
        Self {
            config,
            out_dir,
            seed,
            verbose,
        }
    }

    fn say(&self, msg: &str) {
        if self.verbose {
            eprintln!("[semrom] {msg}");
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::archive::atomic_write(path, text.as_bytes())
}

fn build_problem(ctx: &CommandContext) -> Result<(Discretization, SystemLayout, BoundaryConditions)> {
    let mesh = resolve_mesh(&ctx.config, &ctx.out_dir)?;
    let disc = Discretization::new(mesh, ctx.config.problem.order)?;
    let layout = SystemLayout::new(&disc)?;
    let bc = BoundaryConditions {
        dirichlet: ctx.config.dirichlet_fn()?,
        neumann: std::sync::Arc::new(|_, _| [0.0, 0.0]),
        initial_guess: None,
    };
    Ok((disc, layout, bc))
}

pub struct FomOutcome {
    pub archive: PathBuf,
    pub converged: usize,
    pub failed_nu: Option<f64>,
}

/// Generate full-order snapshots over the viscosity list and archive them.
pub fn cmd_fom(ctx: &CommandContext) -> Result<FomOutcome> {
    std::fs::create_dir_all(&ctx.out_dir)?;
    let (disc, layout, bc) = build_problem(ctx)?;
    let nus = ctx.config.viscosity_list()?;
    ctx.say(&format!(
        "FOM sweep over {} viscosities on {} elements at order {}",
        nus.len(),
        disc.num_elements(),
        disc.order
    ));
    let t0 = Instant::now();
    let sweep = continuation_sweep(
        &disc,
        &layout,
        &nus,
        &FlowParameters::new(nus[0]),
        &bc,
        ctx.config.fom.tol,
        ctx.config.fom.max_iter,
    )?;
    let elapsed = t0.elapsed().as_secs_f64();

    let solutions = &sweep.solutions;
    if solutions.is_empty() {
        let (nu, err) = sweep.failure.expect("empty sweep must carry a failure");
        return Err(Error::Solve(format!("no snapshot converged; nu = {nu}: {err}")));
    }
    let n = layout.n_unknowns();
    let mut data = Array2::zeros((n, solutions.len()));
    for (j, sol) in solutions.iter().enumerate() {
        data.column_mut(j).assign(&sol.unknowns);
    }
    let mut header = ArchiveHeader::new("snapshots", n, solutions.len());
    header.grid = Some(grid_checksum(&disc));
    header.params = Some(solutions.iter().map(|s| s.nu).collect());
    let archive_path = ctx.out_dir.join("snapshots.arc");
    write_archive(&archive_path, &Archive { header, data })?;

    let mut meta = String::new();
    writeln!(meta, "semrom-fom-metadata v1").unwrap();
    writeln!(meta, "grid: {}", grid_checksum(&disc)).unwrap();
    writeln!(meta, "order: {}", disc.order).unwrap();
    writeln!(meta, "tol: {:.17e}", ctx.config.fom.tol).unwrap();
    for sol in solutions {
        writeln!(
            meta,
            "nu: {:.17e} iterations: {} residual: {:.17e}",
            sol.nu,
            sol.iterations,
            sol.history.last().copied().unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    if let Some((nu, err)) = &sweep.failure {
        writeln!(meta, "failed-nu: {nu:.17e} error: {err}").unwrap();
    }
    write_text(&ctx.out_dir.join("fom_meta.txt"), &meta)?;
    write_text(
        &ctx.out_dir.join("fom_log.txt"),
        &format!("fom wall seconds: {elapsed:.3}\n"),
    )?;
    ctx.say(&format!(
        "{} snapshots in {elapsed:.2}s -> {}",
        solutions.len(),
        archive_path.display()
    ));
    Ok(FomOutcome {
        archive: archive_path,
        converged: solutions.len(),
        failed_nu: sweep.failure.map(|(nu, _)| nu),
    })
}

/// Reconstruct lightweight steady solutions from an archived snapshot matrix.
pub fn solutions_from_archive(
    disc: &Discretization,
    layout: &SystemLayout,
    bc: &BoundaryConditions,
    archive: &Archive,
) -> Result<Vec<SteadySolution>> {
    let params = archive
        .header
        .params
        .as_ref()
        .ok_or_else(|| Error::Archive("snapshot archive lacks parameters".into()))?;
    if archive.data.nrows() != layout.n_unknowns() {
        return Err(Error::DimensionMismatch(format!(
            "archive rows {} vs layout unknowns {}",
            archive.data.nrows(),
            layout.n_unknowns()
        )));
    }
    let dirichlet = layout.dirichlet_values(disc, bc);
    Ok(params
        .iter()
        .zip(archive.data.columns())
        .map(|(&nu, col)| {
            let unknowns = col.to_owned();
            SteadySolution {
                nu,
                velocity: layout.velocity_field(disc, &unknowns, &dirichlet),
                pressure: layout.pressure_field(&unknowns),
                unknowns,
                history: Vec::new(),
                iterations: 0,
            }
        })
        .collect())
}

fn affine_from_config(
    ctx: &CommandContext,
    disc: &Discretization,
    layout: &SystemLayout,
    bc: &BoundaryConditions,
) -> Result<AffineOperator> {
    let params = FlowParameters::new(1.0);
    match &ctx.config.affine {
        None => affine_decompose_viscosity(disc, layout, &params, bc),
        Some(spec) => {
            let mut sources = Vec::with_capacity(spec.matrices.len());
            for name in &spec.matrices {
                sources.push(match name.as_str() {
                    "viscous" => MatrixSource::Viscous,
                    "divergence" => MatrixSource::Divergence,
                    path => {
                        let archive = read_archive(Path::new(path))?;
                        let n = archive.data.nrows();
                        if archive.data.ncols() != n {
                            return Err(Error::Archive(format!(
                                "affine matrix `{path}` is not square"
                            )));
                        }
                        MatrixSource::Matrix(archive.data, Array1::zeros(n))
                    }
                });
            }
            affine_decompose_user(disc, layout, &params, bc, &spec.theta, sources)
        }
    }
}

pub struct RomOutcome {
    pub model: PathBuf,
    pub table: Option<PathBuf>,
    pub n_modes: usize,
    pub offline_seconds: f64,
    pub online_seconds: f64,
}

/// Offline reduced-model build plus the validation error sweep.
pub fn cmd_rom(ctx: &CommandContext) -> Result<RomOutcome> {
    std::fs::create_dir_all(&ctx.out_dir)?;
    let (disc, layout, bc) = build_problem(ctx)?;
    let archive_path = ctx.out_dir.join("snapshots.arc");
    if !archive_path.exists() {
        return Err(Error::Archive(format!(
            "snapshot archive `{}` not found; run the fom command first",
            archive_path.display()
        )));
    }
    let archive = read_archive(&archive_path)?;
    let grid = grid_checksum(&disc);
    if archive.header.grid.as_deref() != Some(grid.as_str()) {
        return Err(Error::Archive(format!(
            "snapshot archive grid {} does not match the configured discretization {grid}",
            archive.header.grid.as_deref().unwrap_or("<missing>")
        )));
    }
    let solutions = solutions_from_archive(&disc, &layout, &bc, &archive)?;
    ctx.say(&format!("offline build from {} snapshots", solutions.len()));

    let t_off = Instant::now();
    let set = build_snapshot_set(&solutions)?;
    let basis = pod(&disc, &layout, &set, ctx.config.rom.threshold)?;
    let affine = affine_from_config(ctx, &disc, &layout, &bc)?;
    let model = offline_build(
        &disc,
        &layout,
        &bc,
        &affine,
        &basis,
        &set.lifting,
        &set.parameters,
        &set.states,
    )?;
    let offline_seconds = t_off.elapsed().as_secs_f64();

    // Mode counts at the reference thresholds.
    let (_, _, n99) = pod_of_matrix(&set.states, 0.99)?;
    let (_, _, n9999) = pod_of_matrix(&set.states, 0.9999)?;

    let model_path = ctx.out_dir.join("model.arc");
    write_model(&model_path, &model)?;

    let mut log = String::new();
    writeln!(log, "offline wall seconds: {offline_seconds:.3}").unwrap();
    writeln!(log, "modes at 0.99 energy: {n99}").unwrap();
    writeln!(log, "modes at 0.9999 energy: {n9999}").unwrap();
    writeln!(log, "modes retained at {}: {}", ctx.config.rom.threshold, model.n_modes()).unwrap();

    let mut table = None;
    let mut online_seconds = 0.0;
    if ctx.config.rom.validate {
        let sizes: Vec<usize> = match &ctx.config.rom.basis_sizes {
            Some(sizes) => sizes.clone(),
            None => (0..=model.n_modes()).collect(),
        };
        let t_on = Instant::now();
        let rows = error_sweep(
            &disc,
            &layout,
            &bc,
            &model,
            &solutions,
            &sizes,
            ctx.config.rom.tol,
            ctx.config.rom.max_iter,
        )?;
        online_seconds = t_on.elapsed().as_secs_f64();
        let mut tsv = String::from("n_modes\tmean_err\tmax_err\tonline_seconds\n");
        for row in &rows {
            writeln!(
                tsv,
                "{}\t{:.6e}\t{:.6e}\t{:.6e}",
                row.n_modes, row.mean_error, row.max_error, row.online_seconds
            )
            .unwrap();
        }
        let table_path = ctx.out_dir.join("errors.tsv");
        write_text(&table_path, &tsv)?;
        writeln!(log, "online wall seconds: {online_seconds:.3}").unwrap();
        table = Some(table_path);
    } else {
        writeln!(log, "validation sweep skipped (rom.validate = false); no error table").unwrap();
        ctx.say("offline-only run: error table omitted");
    }
    write_text(&ctx.out_dir.join("rom_log.txt"), &log)?;
    ctx.say(&format!(
        "model with {} modes -> {}",
        model.n_modes(),
        model_path.display()
    ));
    Ok(RomOutcome {
        model: model_path,
        table,
        n_modes: model.n_modes(),
        offline_seconds,
        online_seconds,
    })
}

pub struct DgOutcome {
    pub archive: PathBuf,
    pub snapshots: usize,
}

/// Run the 1D DG miniature and archive its trajectory.
pub fn cmd_dgmini(ctx: &CommandContext) -> Result<DgOutcome> {
    std::fs::create_dir_all(&ctx.out_dir)?;
    let cfg = &ctx.config.dgmini;
    let op = build_dg_operator(cfg.cells, cfg.order, cfg.speed, cfg.diffusivity, cfg.flux)?;
    let initial = Expr::parse(&cfg.initial)?;
    let x = op.nodes();
    let mut u0 = Array1::zeros(op.n_dof());
    for (i, &xi) in x.iter().enumerate() {
        u0[i] = initial.eval(&[("x", xi)])?;
    }
    let dt = cfg.dt.unwrap_or_else(|| op.cfl_dt());
    ctx.say(&format!(
        "dg-mini: K={} P={} dt={dt:.3e} steps={}",
        cfg.cells, cfg.order, cfg.steps
    ));
    let traj = rk4_run_operator(&op, &u0, dt, cfg.steps)?;
    let mut header = ArchiveHeader::new("trajectory", op.n_dof(), traj.n_snapshots());
    header.time = Some((traj.t0, traj.dt));
    header.extra = vec![
        ("cells".into(), cfg.cells.to_string()),
        ("dg-order".into(), cfg.order.to_string()),
        ("speed".into(), format!("{:.17e}", cfg.speed)),
        ("diffusivity".into(), format!("{:.17e}", cfg.diffusivity)),
        (
            "flux".into(),
            match cfg.flux {
                crate::dg::FluxScheme::Upwind => "upwind".into(),
                crate::dg::FluxScheme::Central => "central".into(),
            },
        ),
    ];
    let path = ctx.out_dir.join("trajectory.arc");
    write_archive(
        &path,
        &Archive {
            header,
            data: traj.states.clone(),
        },
    )?;
    ctx.say(&format!(
        "{} snapshots -> {}",
        traj.n_snapshots(),
        path.display()
    ));
    Ok(DgOutcome {
        archive: path,
        snapshots: traj.n_snapshots(),
    })
}

pub struct StabOutcome {
    pub report: PathBuf,
    pub result: StabilizedRom,
}

fn format_eigs(eigs: &[num_complex::Complex64]) -> String {
    eigs.iter()
        .map(|z| format!("{:.12e} {:+.12e}i", z.re, z.im))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Reduce the archived trajectory, stabilize the reduced operator, and write
/// the stabilization report.
pub fn cmd_stab(ctx: &CommandContext) -> Result<StabOutcome> {
    std::fs::create_dir_all(&ctx.out_dir)?;
    let path = ctx.out_dir.join("trajectory.arc");
    if !path.exists() {
        return Err(Error::Archive(format!(
            "trajectory archive `{}` not found; run the dgmini command first",
            path.display()
        )));
    }
    let archive = read_archive(&path)?;
    let cfg = &ctx.config.dgmini;
    let op = build_dg_operator(cfg.cells, cfg.order, cfg.speed, cfg.diffusivity, cfg.flux)?;
    if archive.data.nrows() != op.n_dof() {
        return Err(Error::DimensionMismatch(format!(
            "trajectory has {} DOFs but the configured operator has {}",
            archive.data.nrows(),
            op.n_dof()
        )));
    }
    let (_, dt) = archive
        .header
        .time
        .ok_or_else(|| Error::Archive("trajectory archive lacks a time grid".into()))?;
    let traj = crate::dg::Trajectory {
        t0: 0.0,
        dt,
        states: archive.data.clone(),
    };
    let stab_cfg = &ctx.config.stab;
    let weight = match stab_cfg.weight.as_str() {
        "identity" => StabWeight::Identity,
        "lyapunov" => {
            let (w, achieved) = diagonal_lyapunov_search(&op.matrix, 2000);
            ctx.say(&format!(
                "diagonal Lyapunov weight: largest symmetric eigenvalue {achieved:.3e}"
            ));
            StabWeight::Diagonal(w)
        }
        other => return Err(Error::config("stab.weight", format!("unknown `{other}`"))),
    };
    let mut rom = galerkin_reduce(&op.matrix, &traj, stab_cfg.n_modes, weight)?;
    if stab_cfg.destabilize != 0.0 {
        let er = eigen_replace(&rom.a_r, f64::INFINITY)?;
        let mut coords = er.identity_coordinates();
        coords[0] += stab_cfg.destabilize;
        rom.a_r = er.reconstruct(&coords)?;
        ctx.say(&format!(
            "applied destabilizing shift {:+.3e} to the leading eigenvalue",
            stab_cfg.destabilize
        ));
    }
    let pso = PsoProblem {
        swarm: stab_cfg.swarm,
        inertia: stab_cfg.inertia,
        cognitive: stab_cfg.cognitive,
        social: stab_cfg.social,
        iterations: stab_cfg.iterations,
        seed: ctx.seed,
        bounds: Vec::new(),
        c1: stab_cfg.c1,
        c2: None,
    };
    let result = stabilize(&rom, &pso, stab_cfg.margin)?;
    let alpha_fom_check = power_slope(&rom.a_fom, rom.dt, PowerSource::Fom)?.alpha;

    let mut report = String::new();
    writeln!(report, "semrom-stabilization-report v1").unwrap();
    writeln!(report, "seed: {}", result.seed).unwrap();
    writeln!(report, "n-modes: {}", rom.n_modes()).unwrap();
    writeln!(report, "n-snapshots: {}", rom.n_snapshots()).unwrap();
    writeln!(report, "dt: {:.17e}", rom.dt).unwrap();
    writeln!(report, "replacement-applied: {}", result.applied).unwrap();
    if !result.applied {
        writeln!(report, "note: spectrum already stable; no replacement needed").unwrap();
    }
    writeln!(report, "c1: {:.17e}", result.c1).unwrap();
    writeln!(report, "c2: {:.17e}", result.c2).unwrap();
    writeln!(report, "alpha-fom: {:.17e}", alpha_fom_check).unwrap();
    writeln!(report, "alpha-rom-before: {:.17e}", result.alpha_before).unwrap();
    writeln!(report, "alpha-rom-after: {:.17e}", result.alpha_after).unwrap();
    writeln!(report, "mismatch-before: {:.17e}", result.mismatch_before).unwrap();
    writeln!(report, "mismatch-after: {:.17e}", result.mismatch_after).unwrap();
    writeln!(report, "objective-best: {:.17e}", result.objective_best).unwrap();
    writeln!(report, "eigenvalues-before: {}", format_eigs(&result.eig_before)).unwrap();
    writeln!(report, "eigenvalues-after: {}", format_eigs(&result.eig_after)).unwrap();
    let trace: Vec<String> = result.trace.iter().map(|v| format!("{v:.12e}")).collect();
    writeln!(report, "objective-trace: {}", trace.join(" ")).unwrap();
    writeln!(report, "success: {}", result.success).unwrap();
    let report_path = ctx.out_dir.join("stab_report.txt");
    write_text(&report_path, &report)?;
    ctx.say(&format!(
        "stabilization {} -> {}",
        if result.success { "succeeded" } else { "did not reach a negative power slope" },
        report_path.display()
    ));
    Ok(StabOutcome {
        report: report_path,
        result,
    })
}

/// Summarize the artifacts in an output directory.
pub fn cmd_report(out_dir: &Path) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "artifacts in {}:", out_dir.display()).unwrap();
    let mut found = false;
    for name in ["snapshots.arc", "trajectory.arc", "model.arc"] {
        let path = out_dir.join(name);
        if !path.exists() {
            continue;
        }
        found = true;
        let archive = read_archive(&path)?;
        write!(
            out,
            "  {name}: kind={} {}x{}",
            archive.header.kind, archive.header.rows, archive.header.cols
        )
        .unwrap();
        if let Some(params) = &archive.header.params {
            write!(out, " params=[{:.4}..{:.4}]", params[params.len() - 1], params[0]).unwrap();
        }
        if let Some((t0, dt)) = archive.header.time {
            write!(out, " t0={t0:.4} dt={dt:.4e}").unwrap();
        }
        if let Some(grid) = &archive.header.grid {
            write!(out, " grid={grid}").unwrap();
        }
        writeln!(out).unwrap();
    }
    for name in ["fom_meta.txt", "errors.tsv", "stab_report.txt", "rom_log.txt", "fom_log.txt"] {
        let path = out_dir.join(name);
        if !path.exists() {
            continue;
        }
        found = true;
        let text = std::fs::read_to_string(&path)?;
        writeln!(out, "  {name}: {} lines", text.lines().count()).unwrap();
        for line in text.lines().take(4) {
            writeln!(out, "    | {line}").unwrap();
        }
    }
    if !found {
        writeln!(out, "  (none)").unwrap();
    }
    Ok(out)
}
