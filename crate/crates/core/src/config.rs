//! Flat `key=value` run configuration with dotted namespaces.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`RunConfig::to_text`] emits every key, and parsing that echo
//! reproduces the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bayes::HyperParams;
use crate::error::{Error, Result};
use crate::networks::NetConfig;
use crate::synth::{SceneSpec, SplitCounts};

/// Overrides for the desk-scale benchmark: a narrow network and a short
/// schedule that fit three arms over three seeds on one CPU core, with the
/// variational weight scaled to the magnitude of `L_var` at 64 x 64.
pub const BENCHMARK_PROFILE: &[&str] = &[
    "net.width=8",
    "net.res_blocks_shape=3",
    "net.res_blocks_app=2",
    "train.steps=200",
    "train.batch_size=8",
    "train.eval_every=25",
    "train.eval_average=3",
    "train.log_every=25",
    "hyper.lambda=1e-5",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

/// Which parts of the model are active.
///
/// `stochastic_mapping` and `variational_loss` are the two global switches.
/// The remaining four prune the appearance or segmentation variable: the
/// `deterministic_*` flags remove the variance head, the `*_loss` flags drop
/// the loss terms tied to that variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub stochastic_mapping: bool,
    pub variational_loss: bool,
    pub deterministic_appearance: bool,
    pub deterministic_segmentation: bool,
    pub appearance_loss: bool,
    pub segmentation_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::proposed()
    }
}

impl AblationFlags {
    pub fn proposed() -> Self {
        AblationFlags {
            stochastic_mapping: true,
            variational_loss: true,
            deterministic_appearance: false,
            deterministic_segmentation: false,
            appearance_loss: true,
            segmentation_loss: true,
        }
    }

    /// Plain cross-entropy training of the same networks.
    pub fn erm() -> Self {
        AblationFlags {
            stochastic_mapping: false,
            variational_loss: false,
            ..Self::proposed()
        }
    }

    pub fn stochastic_only() -> Self {
        AblationFlags {
            variational_loss: false,
            ..Self::proposed()
        }
    }

    /// Named presets accepted by `--ablation`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "proposed" | "full" => Ok(Self::proposed()),
            "erm" => Ok(Self::erm()),
            "stochastic-only" => Ok(Self::stochastic_only()),
            other => Err(Error::Config(format!(
                "unknown ablation preset {other:?} (expected proposed, erm or stochastic-only)"
            ))),
        }
    }

    /// Arm from the four PGM switches: appearance network and loss,
    /// segmentation network and loss.
    pub fn pgm(a_network: bool, a_loss: bool, z_network: bool, z_loss: bool) -> Self {
        AblationFlags {
            deterministic_appearance: !a_network,
            appearance_loss: a_loss,
            deterministic_segmentation: !z_network,
            segmentation_loss: z_loss,
            ..Self::proposed()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of `steps` after which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub seed: u64,
    /// Worker threads per batch; 0 uses the available parallelism.
    pub threads: usize,
    pub precision: Precision,
    pub log_every: usize,
    /// Number of periodic test evaluations averaged into the final report; 1 evaluates once at the end.
    pub eval_average: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            lr_decay_at: 0.8,
            lr_decay: 0.1,
            seed: 0,
            threads: 0,
            precision: Precision::F32,
            log_every: 50,
            eval_average: 1,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) >= self.lr_decay_at * self.steps as f64 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    pub fn worker_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: PathBuf,
    pub seed: u64,
    pub counts: SplitCounts,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data"),
            seed: 0,
            counts: SplitCounts::default(),
            scene: SceneSpec::default(),
        }
    }
}

/// Everything a command needs, resolved from defaults, a file and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub hyper: HyperParams,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            data: DataConfig::default(),
            net: NetConfig::default(),
            hyper: HyperParams::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
            output: PathBuf::from("runs/default"),
        };
        c.sync();
        c
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn pair(key: &str, v: impl Display) -> (String, String) {
    (key.to_string(), v.to_string())
}

fn range_text((lo, hi): (f64, f64)) -> String {
    format!("{lo}:{hi}")
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let (lo, hi) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("{key}: expected lo:hi, got {value:?}")))?;
    Ok((parse(key, lo)?, parse(key, hi)?))
}

impl RunConfig {
    /// Keeps derived fields consistent: network heads follow the ablation
    /// flags, the network class count follows the scene.
    fn sync(&mut self) {
        self.net.appearance_variance = !self.ablation.deterministic_appearance;
        self.net.segmentation_variance = !self.ablation.deterministic_segmentation;
        self.net.classes = self.data.scene.classes;
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.hyper.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.data.scene.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.log_every == 0 || t.eval_every == 0 || t.eval_average == 0 {
            return Err(Error::Config(
                "train.steps, batch_size, log_every, eval_every and eval_average must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.lr_decay > 0.0) || !(0.0..=1.0).contains(&t.lr_decay_at) {
            return Err(Error::Config("learning rate schedule is invalid".into()));
        }
        if (t.eval_average - 1) * t.eval_every >= t.steps {
            return Err(Error::Config("periodic evaluations do not fit in train.steps".into()));
        }
        if self.data.scene.height % 4 != 0 || self.data.scene.width % 4 != 0 {
            return Err(Error::Config("image sides must be divisible by 4".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.path" => self.data.path = PathBuf::from(v),
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.train" => self.data.counts.train = parse(key, v)?,
            "data.val" => self.data.counts.val = parse(key, v)?,
            "data.test" => self.data.counts.test = parse(key, v)?,
            "data.target" => self.data.counts.target = parse(key, v)?,
            "scene.height" => self.data.scene.height = parse(key, v)?,
            "scene.width" => self.data.scene.width = parse(key, v)?,
            "scene.classes" => self.data.scene.classes = parse(key, v)?,
            "scene.center_jitter" => self.data.scene.center_jitter = parse(key, v)?,
            "scene.inner_radius" => self.data.scene.inner_radius = parse_range(key, v)?,
            "scene.ring_thickness" => self.data.scene.ring_thickness = parse_range(key, v)?,
            "scene.axis_ratio" => self.data.scene.axis_ratio = parse_range(key, v)?,
            "scene.rotation" => self.data.scene.rotation = parse_range(key, v)?,
            "hyper.gamma_rho" => self.hyper.rho.shape = parse(key, v)?,
            "hyper.phi_rho" => self.hyper.rho.rate = parse(key, v)?,
            "hyper.gamma_upsilon" => self.hyper.upsilon.shape = parse(key, v)?,
            "hyper.phi_upsilon" => self.hyper.upsilon.rate = parse(key, v)?,
            "hyper.gamma_omega" => self.hyper.omega.shape = parse(key, v)?,
            "hyper.phi_omega" => self.hyper.omega.rate = parse(key, v)?,
            "hyper.alpha_pi" => self.hyper.pi.alpha = parse(key, v)?,
            "hyper.beta_pi" => self.hyper.pi.beta = parse(key, v)?,
            "hyper.mu_m0" => self.hyper.mu_m0 = parse(key, v)?,
            "hyper.sigma_m0" => self.hyper.sigma_m0 = parse(key, v)?,
            "hyper.lambda" => self.hyper.lambda = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_decay_at" => self.train.lr_decay_at = parse(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.threads" => self.train.threads = parse(key, v)?,
            "train.precision" => self.train.precision = parse(key, v)?,
            "train.log_every" => self.train.log_every = parse(key, v)?,
            "train.eval_average" => self.train.eval_average = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "ablation.stochastic_mapping" => self.ablation.stochastic_mapping = parse(key, v)?,
            "ablation.variational_loss" => self.ablation.variational_loss = parse(key, v)?,
            "ablation.deterministic_appearance" => self.ablation.deterministic_appearance = parse(key, v)?,
            "ablation.deterministic_segmentation" => self.ablation.deterministic_segmentation = parse(key, v)?,
            "ablation.appearance_loss" => self.ablation.appearance_loss = parse(key, v)?,
            "ablation.segmentation_loss" => self.ablation.segmentation_loss = parse(key, v)?,
            "output.dir" => self.output = PathBuf::from(v),
            "net.width" | "net.res_blocks_shape" | "net.res_blocks_app" | "net.norm_mode" | "net.seed" => {
                self.net.set(key, v)?;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Applies a `key=value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults with [`BENCHMARK_PROFILE`] applied.
    pub fn benchmark() -> Self {
        let mut c = RunConfig::default();
        c.apply_overrides(BENCHMARK_PROFILE).expect("profile keys are valid");
        c
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let h = &self.hyper;
        let t = &self.train;
        let a = &self.ablation;
        vec![
            pair("data.path", d.path.display()),
            pair("data.seed", d.seed),
            pair("data.train", d.counts.train),
            pair("data.val", d.counts.val),
            pair("data.test", d.counts.test),
            pair("data.target", d.counts.target),
            pair("scene.height", d.scene.height),
            pair("scene.width", d.scene.width),
            pair("scene.classes", d.scene.classes),
            pair("scene.center_jitter", d.scene.center_jitter),
            pair("scene.inner_radius", range_text(d.scene.inner_radius)),
            pair("scene.ring_thickness", range_text(d.scene.ring_thickness)),
            pair("scene.axis_ratio", range_text(d.scene.axis_ratio)),
            pair("scene.rotation", range_text(d.scene.rotation)),
            pair("net.width", self.net.width),
            pair("net.res_blocks_shape", self.net.res_blocks_shape),
            pair("net.res_blocks_app", self.net.res_blocks_app),
            pair("net.norm_mode", self.net.norm_mode.as_str()),
            pair("net.seed", self.net.seed),
            pair("hyper.gamma_rho", h.rho.shape),
            pair("hyper.phi_rho", h.rho.rate),
            pair("hyper.gamma_upsilon", h.upsilon.shape),
            pair("hyper.phi_upsilon", h.upsilon.rate),
            pair("hyper.gamma_omega", h.omega.shape),
            pair("hyper.phi_omega", h.omega.rate),
            pair("hyper.alpha_pi", h.pi.alpha),
            pair("hyper.beta_pi", h.pi.beta),
            pair("hyper.mu_m0", h.mu_m0),
            pair("hyper.sigma_m0", h.sigma_m0),
            pair("hyper.lambda", h.lambda),
            pair("train.steps", t.steps),
            pair("train.batch_size", t.batch_size),
            pair("train.lr", t.lr),
            pair("train.lr_decay_at", t.lr_decay_at),
            pair("train.lr_decay", t.lr_decay),
            pair("train.seed", t.seed),
            pair("train.threads", t.threads),
            pair("train.precision", t.precision.as_str()),
            pair("train.log_every", t.log_every),
            pair("train.eval_average", t.eval_average),
            pair("train.eval_every", t.eval_every),
            pair("ablation.stochastic_mapping", a.stochastic_mapping),
            pair("ablation.variational_loss", a.variational_loss),
            pair("ablation.deterministic_appearance", a.deterministic_appearance),
            pair("ablation.deterministic_segmentation", a.deterministic_segmentation),
            pair("ablation.appearance_loss", a.appearance_loss),
            pair("ablation.segmentation_loss", a.segmentation_loss),
            pair("output.dir", self.output.display()),
        ]
    }

    /// The resolved-config echo.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
