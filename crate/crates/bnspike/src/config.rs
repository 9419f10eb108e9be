//! Run configuration: a versioned TOML schema that fully determines a run,
//! and its materialization into dataset, reference direction, initial state
//! and GD settings.

use std::path::PathBuf;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_active_margin_dataset, gen_gaussian_dataset, gen_hilbert_dataset,
    gen_simplex_margin_dataset, load_dataset, spectrum_bounds, whiten, Dataset, HilbertParams,
};
use crate::dynamics::{state_with_ratio, GdConfig, Mode, DEFAULT_SNAPSHOT_EVERY};
use crate::error::{BnError, Result};
use crate::logistic::solve_svm;
use crate::model::{LossKind, ModelState};
use crate::reference::{least_squares_reference, ReferenceDirection};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Upper limit on the number of sweep cells.
pub const MAX_SWEEP_CELLS: usize = 10_000;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Rotated Hilbert-block features with optional Gaussian noise.
    Hilbert {
        n: usize,
        d: usize,
        #[serde(default)]
        noise_std: f64,
        #[serde(default = "default_true")]
        rotate: bool,
        #[serde(default)]
        whiten: bool,
        #[serde(default)]
        seed: Option<u64>,
    },
    Gaussian {
        n: usize,
        d: usize,
        #[serde(default)]
        whiten: bool,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Every sample on the max-margin boundary, margin `gamma`.
    ActiveMargin {
        n: usize,
        d: usize,
        gamma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Deterministic active-margin construction.
    SimplexMargin {
        n: usize,
        d: usize,
        gamma: f64,
        spread: f64,
    },
    File {
        path: PathBuf,
        #[serde(default)]
        whiten: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// Prescribed ratio rho_perp/rho and norm, orthogonal part drawn from the seed.
    Ratio,
    /// Gaussian draw projected onto span(X), rescaled to `w_norm`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub rule: InitRule,
    pub alpha0: f64,
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default = "default_w_norm")]
    pub w_norm: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_w_norm() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdSection {
    pub eta: f64,
    pub eta_alpha: f64,
    pub max_iters: usize,
    pub loss: LossKind,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_snapshot")]
    pub snapshot_every: usize,
}

fn default_mode() -> Mode {
    Mode::Vector
}
fn default_snapshot() -> usize {
    DEFAULT_SNAPSHOT_EVERY
}

/// Which checkers run under `verify`; inapplicable ones report NotApplicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_true")]
    pub onset: bool,
    #[serde(default = "default_true")]
    pub stabilization: bool,
    #[serde(default = "default_true")]
    pub risk_identity: bool,
    #[serde(default = "default_true")]
    pub direction_conditions: bool,
    #[serde(default = "default_true")]
    pub logistic_bounds: bool,
    #[serde(default)]
    pub campaign: bool,
    #[serde(default)]
    pub campaign_force: bool,
    #[serde(default = "default_horizon")]
    pub campaign_max_horizon: usize,
    /// Sharpness estimate every k steps (vector mode); off when absent.
    #[serde(default)]
    pub sharpness_every: Option<usize>,
}

fn default_horizon() -> usize {
    100_000
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            onset: true,
            stabilization: true,
            risk_identity: true,
            direction_conditions: true,
            logistic_bounds: true,
            campaign: false,
            campaign_force: false,
            campaign_max_horizon: default_horizon(),
            sharpness_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = BnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(BnError::Config {
                path: "output.format".into(),
                message: format!("unknown format `{other}` (expected csv or json)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: OutputFormat,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_format() -> OutputFormat {
    OutputFormat::Csv
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            format: default_format(),
        }
    }
}

/// Cartesian grid for `sweep`; empty axes fall back to the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub eta_alpha: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub init: InitSpec,
    pub gd: GdSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
}

/// Command-line overrides applied on top of a parsed config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub loss: Option<LossKind>,
    pub mode: Option<Mode>,
}

fn cfg_err(path: &str, message: impl Into<String>) -> BnError {
    BnError::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let line = inner.span().map(|s| line_of(text, s.start));
            let msg = inner.message().to_string();
            cfg_err(
                &path,
                match line {
                    Some(l) => format!("line {l}: {msg}"),
                    None => msg,
                },
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(f) = o.format {
            self.output.format = f;
        }
        if let Some(l) = o.loss {
            self.gd.loss = l;
        }
        if let Some(m) = o.mode {
            self.gd.mode = m;
        }
        self.validate()
    }

    pub fn gd_config(&self) -> GdConfig {
        GdConfig::new(
            self.gd.eta,
            self.gd.eta_alpha,
            self.gd.max_iters,
            self.gd.loss,
            self.gd.mode,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(cfg_err(
                "schema_version",
                format!(
                    "unsupported version {} (expected {CONFIG_SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        let dims = |n: usize, d: usize| -> Result<()> {
            if n == 0 {
                return Err(cfg_err("dataset.n", "must be at least 1"));
            }
            if d == 0 {
                return Err(cfg_err("dataset.d", "must be at least 1"));
            }
            Ok(())
        };
        match &self.dataset {
            DatasetSpec::Hilbert {
                n, d, noise_std, ..
            } => {
                dims(*n, *d)?;
                if !(*noise_std >= 0.0 && noise_std.is_finite()) {
                    return Err(cfg_err(
                        "dataset.noise_std",
                        "must be finite and nonnegative",
                    ));
                }
            }
            DatasetSpec::Gaussian { n, d, .. } => dims(*n, *d)?,
            DatasetSpec::ActiveMargin { n, d, gamma, .. }
            | DatasetSpec::SimplexMargin { n, d, gamma, .. } => {
                dims(*n, *d)?;
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return Err(cfg_err("dataset.gamma", "must be positive"));
                }
            }
            DatasetSpec::File { .. } => {}
        }
        if !(self.init.alpha0 > 0.0 && self.init.alpha0.is_finite()) {
            return Err(cfg_err("init.alpha0", "must be positive and finite"));
        }
        if !(self.init.w_norm > 0.0 && self.init.w_norm.is_finite()) {
            return Err(cfg_err("init.w_norm", "must be positive and finite"));
        }
        match (self.init.rule, self.init.ratio) {
            (InitRule::Ratio, None) => {
                return Err(cfg_err("init.ratio", "required by rule = \"ratio\""))
            }
            (InitRule::Ratio, Some(r)) if !(r >= 0.0 && r.is_finite()) => {
                return Err(cfg_err("init.ratio", "must be finite and nonnegative"))
            }
            (InitRule::Gaussian, Some(_)) => {
                return Err(cfg_err(
                    "init.ratio",
                    "only meaningful with rule = \"ratio\"",
                ))
            }
            _ => {}
        }
        self.gd_config().validate()?;
        if self.gd.snapshot_every == 0 {
            return Err(cfg_err("gd.snapshot_every", "must be at least 1"));
        }
        if self.analysis.sharpness_every == Some(0) {
            return Err(cfg_err("analysis.sharpness_every", "must be at least 1"));
        }
        if let Some(g) = &self.grid {
            if g.eta
                .iter()
                .chain(g.eta_alpha.iter())
                .any(|v| !(v.is_finite() && *v >= 0.0))
            {
                return Err(cfg_err(
                    "grid",
                    "grid values must be finite and nonnegative",
                ));
            }
            let cells = g.eta.len().max(1) * g.eta_alpha.len().max(1) * g.seeds.len().max(1);
            if cells > MAX_SWEEP_CELLS {
                return Err(cfg_err(
                    "grid",
                    format!("{cells} cells exceed the limit of {MAX_SWEEP_CELLS}"),
                ));
            }
        }
        Ok(())
    }

    pub fn dataset_seed(&self) -> u64 {
        match &self.dataset {
            DatasetSpec::Hilbert { seed, .. }
            | DatasetSpec::Gaussian { seed, .. }
            | DatasetSpec::ActiveMargin { seed, .. } => seed.unwrap_or(self.seed),
            _ => self.seed,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init
            .seed
            .unwrap_or(self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let seed = self.dataset_seed();
        let (ds, w) = match &self.dataset {
            DatasetSpec::Hilbert {
                n,
                d,
                noise_std,
                rotate,
                whiten,
                ..
            } => {
                let mut p = HilbertParams::new(*n, *d, seed, *noise_std);
                p.rotate = *rotate;
                (gen_hilbert_dataset(&p)?, *whiten)
            }
            DatasetSpec::Gaussian { n, d, whiten, .. } => {
                (gen_gaussian_dataset(*n, *d, seed)?, *whiten)
            }
            DatasetSpec::ActiveMargin { n, d, gamma, .. } => {
                (gen_active_margin_dataset(*n, *d, *gamma, seed)?, false)
            }
            DatasetSpec::SimplexMargin {
                n,
                d,
                gamma,
                spread,
            } => (gen_simplex_margin_dataset(*n, *d, *gamma, *spread)?, false),
            DatasetSpec::File { path, whiten } => (load_dataset(path)?, *whiten),
        };
        if w {
            whiten(&ds)
        } else {
            Ok(ds)
        }
    }

    /// Materializes dataset, reference direction (least squares for the
    /// square loss, SVM for the logistic loss) and initial state.
    pub fn build(&self) -> Result<Experiment> {
        let ds = self.build_dataset()?;
        let reference = match self.gd.loss {
            LossKind::Square => least_squares_reference(&ds)?,
            LossKind::Logistic => solve_svm(&ds)?,
        };
        let init = match self.init.rule {
            InitRule::Ratio => state_with_ratio(
                &ds,
                &reference,
                self.init.ratio.unwrap_or(0.0),
                self.init.w_norm,
                self.init.alpha0,
                self.init_seed(),
            )?,
            InitRule::Gaussian => {
                let sb = spectrum_bounds(&ds)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed());
                let c = DVector::from_fn(sb.rank(), |_, _| StandardNormal.sample(&mut rng));
                let w: DVector<f64> = &sb.span_basis * c;
                let nw = w.norm();
                ModelState::new(w * (self.init.w_norm / nw), self.init.alpha0)
            }
        };
        Ok(Experiment {
            ds,
            reference,
            init,
            gd: self.gd_config(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub ds: Dataset,
    pub reference: ReferenceDirection,
    pub init: ModelState,
    pub gd: GdConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
schema_version = 1
seed = 3

[dataset]
generator = "gaussian"
n = 4
d = 9
whiten = true

[init]
rule = "ratio"
ratio = 0.3
alpha0 = 0.2

[gd]
eta = 0.5
eta_alpha = 0.1
max_iters = 10
loss = "square"
"#;

    #[test]
    fn parses_base_config() {
        let c = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.gd.mode, Mode::Vector);
        assert_eq!(c.output.format, OutputFormat::Csv);
        let e = c.build().unwrap();
        assert_eq!(e.ds.n(), 4);
        // round trip through TOML
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_error_with_path() {
        let text = BASE.replace("max_iters = 10", "max_iters = 10\nbogus = 1");
        match RunConfig::from_toml(&text) {
            Err(BnError::Config { path, message }) => {
                assert!(path.starts_with("gd"), "{path}");
                assert!(message.contains("bogus"), "{message}");
                assert!(message.contains("line"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = BASE.replace("whiten = true", "whiten = true\nspread = 2.0");
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(BnError::Config { .. })
        ));
    }

    #[test]
    fn validation_paths() {
        let bad = BASE.replace("eta = 0.5", "eta = -1.0");
        match RunConfig::from_toml(&bad) {
            Err(BnError::Config { path, .. }) => assert_eq!(path, "gd.eta"),
            other => panic!("{other:?}"),
        }
        let bad = BASE.replace("schema_version = 1", "schema_version = 2");
        match RunConfig::from_toml(&bad) {
            Err(BnError::Config { path, .. }) => assert_eq!(path, "schema_version"),
            other => panic!("{other:?}"),
        }
        let bad = BASE.replace("ratio = 0.3\n", "");
        match RunConfig::from_toml(&bad) {
            Err(BnError::Config { path, .. }) => assert_eq!(path, "init.ratio"),
            other => panic!("{other:?}"),
        }
        let bad = BASE
            .replace(
                "loss = \"square\"",
                "loss = \"square\"\nmode = \"recurrence\"",
            )
            .replace("whiten = true", "whiten = true");
        assert!(RunConfig::from_toml(&bad).is_ok());
        let bad = BASE.replace(
            "loss = \"square\"",
            "loss = \"logistic\"\nmode = \"recurrence\"",
        );
        match RunConfig::from_toml(&bad) {
            Err(BnError::Config { path, .. }) => assert_eq!(path, "gd.mode"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let mut c = RunConfig::from_toml(BASE).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            format: Some(OutputFormat::Json),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.output.format, OutputFormat::Json);
        let err = c.apply(&Overrides {
            loss: Some(LossKind::Logistic),
            mode: Some(Mode::Recurrence),
            ..Default::default()
        });
        assert!(err.is_err());
    }

    #[test]
    fn grid_cell_limit() {
        let text = format!(
            "{BASE}\n[grid]\neta = [{}]\nseeds = [{}]\n",
            vec!["0.1"; 101].join(","),
            (0..100)
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        match RunConfig::from_toml(&text) {
            Err(BnError::Config { path, .. }) => assert_eq!(path, "grid"),
            other => panic!("{other:?}"),
        }
    }
}
