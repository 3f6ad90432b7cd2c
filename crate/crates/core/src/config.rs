//! Run configuration: a TOML file with one section per pipeline stage.
//!
//! Unknown fields are rejected so typos surface immediately; semantic
//! validation names the offending field. The same file drives every CLI
//! verb, each of which reads the sections it needs.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::mesh::BoundaryTag;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub parameters: ParameterConfig,
    #[serde(default)]
    pub fom: FomConfig,
    #[serde(default)]
    pub rom: RomConfig,
    #[serde(default)]
    pub affine: Option<AffineConfig>,
    #[serde(default)]
    pub dgmini: DgMiniConfig,
    #[serde(default)]
    pub stab: StabConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Path to a mesh file (relative paths resolve against the config file).
    pub mesh: Option<PathBuf>,
    /// Built-in channel mesh, written to the output directory when used.
    pub channel: Option<ChannelMesh>,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default)]
    pub dirichlet: DirichletConfig,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            mesh: None,
            channel: None,
            order: default_order(),
            dirichlet: DirichletConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMesh {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_height")]
    pub height: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletConfig {
    pub ux: String,
    pub uy: String,
}

impl Default for DirichletConfig {
    fn default() -> Self {
        // The study channel trace: parabolic inflow, zero on the walls.
        Self {
            ux: "4*y*(1-y)".to_string(),
            uy: "0".to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub count: Option<usize>,
    #[serde(default = "default_spacing")]
    pub spacing: String,
    /// Explicit list (descending); overrides min/max/count.
    pub list: Option<Vec<f64>>,
}

impl Default for ParameterConfig {
    fn default() -> Self {
        Self {
            min: Some(0.5),
            max: Some(10.0),
            count: Some(22),
            spacing: default_spacing(),
            list: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomConfig {
    #[serde(default = "default_fom_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for FomConfig {
    fn default() -> Self {
        Self {
            tol: default_fom_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Basis sizes for the error sweep; defaults to 0..=N when omitted.
    pub basis_sizes: Option<Vec<usize>>,
    #[serde(default = "default_rom_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Run the validation sweep against the snapshots.
    #[serde(default = "default_true")]
    pub validate: bool,
}

impl Default for RomConfig {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            basis_sizes: None,
            tol: default_rom_tol(),
            max_iter: default_max_iter(),
            validate: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    /// Coefficient expressions over mu0, mu1, ...
    pub theta: Vec<String>,
    /// Matrix sources: `viscous`, `divergence`, or an archive path.
    pub matrices: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgMiniConfig {
    #[serde(default = "default_cells")]
    pub cells: usize,
    #[serde(default = "default_dg_order")]
    pub order: usize,
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default)]
    pub diffusivity: f64,
    #[serde(default = "default_flux")]
    pub flux: crate::dg::FluxScheme,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Time step; defaults to the CFL heuristic.
    pub dt: Option<f64>,
    #[serde(default = "default_initial")]
    pub initial: String,
}

impl Default for DgMiniConfig {
    fn default() -> Self {
        Self {
            cells: default_cells(),
            order: default_dg_order(),
            speed: default_speed(),
            diffusivity: 0.02,
            flux: default_flux(),
            steps: default_steps(),
            dt: None,
            initial: default_initial(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabConfig {
    #[serde(default = "default_n_modes")]
    pub n_modes: usize,
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_swarm")]
    pub swarm: usize,
    #[serde(default = "default_inertia")]
    pub inertia: f64,
    #[serde(default = "default_cognitive")]
    pub cognitive: f64,
    #[serde(default = "default_cognitive")]
    pub social: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Penalization constant override; the balancing rule applies when unset.
    pub c1: Option<f64>,
    #[serde(default = "default_weight")]
    pub weight: String,
    /// Artificial real-part shift applied to the leading eigenvalue before
    /// stabilizing (exercise/destabilization knob; 0 keeps the operator).
    #[serde(default)]
    pub destabilize: f64,
}

impl Default for StabConfig {
    fn default() -> Self {
        Self {
            n_modes: default_n_modes(),
            margin: 0.0,
            swarm: default_swarm(),
            inertia: default_inertia(),
            cognitive: default_cognitive(),
            social: default_cognitive(),
            iterations: default_iterations(),
            c1: None,
            weight: default_weight(),
            destabilize: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, seed: 0 }
    }
}

fn default_order() -> usize {
    6
}
fn default_length() -> f64 {
    8.0
}
fn default_height() -> f64 {
    1.0
}
fn default_spacing() -> String {
    "log".to_string()
}
fn default_fom_tol() -> f64 {
    1e-8
}
fn default_rom_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    60
}
fn default_threshold() -> f64 {
    0.9999
}
fn default_true() -> bool {
    true
}
fn default_cells() -> usize {
    8
}
fn default_dg_order() -> usize {
    6
}
fn default_speed() -> f64 {
    1.0
}
fn default_flux() -> crate::dg::FluxScheme {
    crate::dg::FluxScheme::Upwind
}
fn default_steps() -> usize {
    59
}
fn default_initial() -> String {
    "sin(2*pi*x) + 0.4*cos(4*pi*x)".to_string()
}
fn default_n_modes() -> usize {
    8
}
fn default_swarm() -> usize {
    40
}
fn default_inertia() -> f64 {
    0.729
}
fn default_cognitive() -> f64 {
    1.494
}
fn default_iterations() -> usize {
    200
}
fn default_weight() -> String {
    "identity".to_string()
}

impl RunConfig {
    /// Parse and validate a config file. Relative mesh/matrix paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(mesh) = &cfg.problem.mesh {
            if mesh.is_relative() {
                cfg.problem.mesh = Some(base.join(mesh));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.mesh.is_none() && p.channel.is_none() {
            return Err(Error::config(
                "problem.mesh",
                "either a mesh file or a [problem.channel] section is required",
            ));
        }
        if let Some(mesh) = &p.mesh {
            if !mesh.exists() {
                return Err(Error::config(
                    "problem.mesh",
                    format!("file `{}` does not exist", mesh.display()),
                ));
            }
        }
        if let Some(ch) = &p.channel {
            if ch.nx == 0 || ch.ny == 0 {
                return Err(Error::config("problem.channel", "nx and ny must be >= 1"));
            }
            if ch.length <= 0.0 || ch.height <= 0.0 {
                return Err(Error::config(
                    "problem.channel",
                    "length and height must be positive",
                ));
            }
        }
        if p.order < 2 {
            return Err(Error::config("problem.order", "velocity order must be >= 2"));
        }
        Expr::parse(&p.dirichlet.ux)
            .map_err(|e| Error::config("problem.dirichlet.ux", e.to_string()))?;
        Expr::parse(&p.dirichlet.uy)
            .map_err(|e| Error::config("problem.dirichlet.uy", e.to_string()))?;
        self.viscosity_list()?;
        if self.fom.tol <= 0.0 {
            return Err(Error::config("fom.tol", "tolerance must be positive"));
        }
        if self.rom.tol <= 0.0 {
            return Err(Error::config("rom.tol", "tolerance must be positive"));
        }
        if !(self.rom.threshold > 0.0 && self.rom.threshold <= 1.0) {
            return Err(Error::config("rom.threshold", "threshold must be in (0, 1]"));
        }
        if let Some(affine) = &self.affine {
            if affine.theta.len() != affine.matrices.len() {
                return Err(Error::config(
                    "affine",
                    "theta and matrices must have the same length",
                ));
            }
            if affine.theta.is_empty() {
                return Err(Error::config("affine.theta", "at least one term required"));
            }
            for t in &affine.theta {
                Expr::parse(t).map_err(|e| Error::config("affine.theta", e.to_string()))?;
            }
        }
        if self.dgmini.cells < 2 {
            return Err(Error::config("dgmini.cells", "at least 2 cells required"));
        }
        if self.dgmini.order == 0 {
            return Err(Error::config("dgmini.order", "order must be >= 1"));
        }
        if self.dgmini.diffusivity < 0.0 {
            return Err(Error::config(
                "dgmini.diffusivity",
                "diffusivity must be nonnegative",
            ));
        }
        if self.dgmini.steps == 0 {
            return Err(Error::config("dgmini.steps", "at least one step required"));
        }
        Expr::parse(&self.dgmini.initial)
            .map_err(|e| Error::config("dgmini.initial", e.to_string()))?;
        if self.stab.n_modes == 0 {
            return Err(Error::config("stab.n_modes", "at least one mode required"));
        }
        if self.stab.swarm < 2 {
            return Err(Error::config("stab.swarm", "swarm size must be >= 2"));
        }
        match self.stab.weight.as_str() {
            "identity" | "lyapunov" => {}
            other => {
                return Err(Error::config(
                    "stab.weight",
                    format!("unknown weight `{other}` (expected `identity` or `lyapunov`)"),
                ))
            }
        }
        Ok(())
    }

    /// Descending viscosity samples from the `[parameters]` section.
    pub fn viscosity_list(&self) -> Result<Vec<f64>> {
        let p = &self.parameters;
        if let Some(list) = &p.list {
            if list.is_empty() {
                return Err(Error::config("parameters.list", "list must be nonempty"));
            }
            if list.iter().any(|&v| v <= 0.0) {
                return Err(Error::config(
                    "parameters.list",
                    "viscosities must be positive",
                ));
            }
            if list.len() > 1 && list.windows(2).any(|w| w[0] <= w[1]) {
                return Err(Error::config(
                    "parameters.list",
                    "list must be strictly descending",
                ));
            }
            return Ok(list.clone());
        }
        let (min, max, count) = match (p.min, p.max, p.count) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::config(
                    "parameters",
                    "either `list` or `min`+`max`+`count` must be given",
                ))
            }
        };
        if count == 1 {
            return Ok(vec![max]);
        }
        match p.spacing.as_str() {
            "log" => crate::oseen::log_spaced_descending(min, max, count)
                .map_err(|e| Error::config("parameters", e.to_string())),
            "linear" => crate::oseen::lin_spaced_descending(min, max, count)
                .map_err(|e| Error::config("parameters", e.to_string())),
            other => Err(Error::config(
                "parameters.spacing",
                format!("unknown spacing `{other}` (expected `log` or `linear`)"),
            )),
        }
    }

    /// Boundary-data closure from the Dirichlet expressions.
    pub fn dirichlet_fn(&self) -> Result<crate::oseen::VectorFn> {
        let ux = Expr::parse(&self.problem.dirichlet.ux)?;
        let uy = Expr::parse(&self.problem.dirichlet.uy)?;
        Ok(std::sync::Arc::new(move |x, y| {
            let vars = [("x", x), ("y", y)];
            [
                ux.eval(&vars).unwrap_or(f64::NAN),
                uy.eval(&vars).unwrap_or(f64::NAN),
            ]
        }))
    }
}

/// Load the mesh named by the config, or generate (and persist) the built-in
/// channel into `out_dir`.
pub fn resolve_mesh(cfg: &RunConfig, out_dir: &Path) -> Result<crate::mesh::Mesh> {
    if let Some(path) = &cfg.problem.mesh {
        return crate::mesh::Mesh::read_file(path);
    }
    let ch = cfg.problem.channel.as_ref().expect("validated");
    let mesh = crate::mesh::Mesh::channel(ch.nx, ch.ny, ch.length, ch.height)?;
    std::fs::create_dir_all(out_dir)?;
    mesh.write_file(&out_dir.join("channel.mesh"))?;
    Ok(mesh)
}

/// Check that a mesh tagged for the channel study matches the Dirichlet trace
/// assumptions (one Neumann side); purely informational.
pub fn has_outflow(mesh: &crate::mesh::Mesh) -> bool {
    mesh.boundary_tags
        .values()
        .any(|&t| t == BoundaryTag::Neumann)
}
