use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::diffusion::LossKind;
use crate::error::{Error, Result};
use crate::sampling::{GuidanceConfig, RhoMode};

/// Environment variable naming the default root for relative paths.
pub const DATA_DIR_ENV: &str = "TM_DIFFUSE_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataLayout {
    /// One time slot per row.
    Time,
    /// One flow per row.
    Flows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    /// Unobserved entries when a mask is available, otherwise all entries.
    Auto,
    Unobserved,
    All,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!(concat!("unknown ", $what, " {:?}; expected one of: {}"), s, [$($name),+].join(", "))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(DataLayout, "layout", "time" => DataLayout::Time, "flows" => DataLayout::Flows);
keyword_enum!(EvalScope, "scope", "auto" => EvalScope::Auto, "unobserved" => EvalScope::Unobserved, "all" => EvalScope::All);
keyword_enum!(LossKind, "loss", "squared" => LossKind::Squared, "absolute" => LossKind::Absolute);
keyword_enum!(RhoMode, "rho mode", "fixed" => RhoMode::Fixed, "schedule" => RhoMode::Schedule);

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Validation(format!("{key} = {value:?}: {e}")))
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr,)+) => {
        /// Every setting of a run, resolved from defaults, a config file and flags.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)+ }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),+];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value.trim())?,)+
                    _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order; feeding them back through
            /// [`RunConfig::set`] reproduces `self`.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string()),)+]
            }
        }
    };
}

run_config! {
    /// Root for every relative path below.
    data_dir: String = ".".to_string(),
    /// Traffic trace read by `ingest`.
    input: String = String::new(),
    layout: DataLayout = DataLayout::Time,
    /// Directory written by `ingest` and read by the other commands.
    dataset: String = "dataset".to_string(),
    model_dir: String = "model".to_string(),
    out_dir: String = "results".to_string(),
    gen_dir: String = "synthetic".to_string(),

    train_len: usize = 3000,
    /// 0 takes every slot after the training split.
    test_len: usize = 0,
    window_len: usize = 12,
    train_stride: usize = 1,
    /// Fraction of training entries kept as observed.
    train_mask_rate: f64 = 1.0,
    /// Fraction of test entries revealed to `complete`.
    test_mask_rate: f64 = 0.5,
    mask_seed: u64 = 0,

    diffusion_steps: usize = 300,
    model_dim: usize = 96,
    heads: usize = 8,
    encoder_blocks: usize = 2,
    decoder_blocks: usize = 2,
    ff_dim: usize = 384,

    batch_size: usize = 64,
    learning_rate: f64 = 8e-4,
    warmup_iters: u64 = 500,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.96,
    epochs_pre: usize = 200,
    epochs_diff: usize = 380,
    loss: LossKind = LossKind::Squared,
    seed: u64 = 0,
    /// Continue from the checkpoint in `model_dir` when it exists.
    resume: bool = false,
    /// Denoiser epochs to run in this invocation; 0 runs to `epochs_diff`.
    epoch_budget: usize = 0,

    rho: f64 = 0.05,
    rho_mode: RhoMode = RhoMode::Fixed,
    sigma_z: f64 = 0.0,
    stride: usize = 1,
    /// Denoiser evaluations per trajectory; 0 derives it from `stride`.
    sample_steps: usize = 0,
    em_iters: usize = 20,
    replacement: bool = true,
    sample_batch: usize = 16,
    jobs: usize = 1,
    /// Test slots processed by `tomo` and `complete`; 0 means all.
    eval_slots: usize = 0,
    synth_count: usize = 64,

    /// Links × flows routing CSV; when empty it is derived from `topology`.
    routing: String = String::new(),
    /// Edge list `u,v[,weight]`.
    topology: String = String::new(),
    access_links: bool = true,
    /// Link-load trace (one time slot per row) in traffic units.
    link_loads: String = String::new(),
    /// Compute link loads from the ground truth instead of reading them.
    simulate: bool = false,
    /// Standard deviation of simulated link noise, in normalized units.
    link_noise: f64 = 0.0,
    /// Let `complete` use link loads as well as the observed flows.
    use_links: bool = false,

    truth: String = String::new(),
    estimate: String = String::new(),
    /// Observation mask; entries with 1 are excluded from error metrics.
    mask: String = String::new(),
    scope: EvalScope = EvalScope::Auto,
    tre_group: usize = 1,

    gen_nodes: usize = 6,
    gen_slots: usize = 3672,
    gen_period: f64 = 48.0,
    gen_amplitude: f64 = 0.6,
    gen_noise: f64 = 0.1,
    gen_base: f64 = 1.0e6,
    gen_seed: u64 = 7,
}

impl RunConfig {
    /// Defaults < `TM_DIFFUSE_DATA_DIR` < config file < `overrides`.
    pub fn resolve(file: Option<&Path>, env_data_dir: Option<String>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(dir) = env_data_dir.filter(|d| !d.is_empty()) {
            cfg.data_dir = dir;
        }
        if let Some(path) = file {
            for (k, v) in read_config_file(path)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_len", self.window_len),
            ("train_stride", self.train_stride),
            ("diffusion_steps", self.diffusion_steps),
            ("stride", self.stride),
            ("sample_batch", self.sample_batch),
            ("jobs", self.jobs),
            ("tre_group", self.tre_group),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{k} must be positive")));
            }
        }
        for (k, r) in [("train_mask_rate", self.train_mask_rate), ("test_mask_rate", self.test_mask_rate)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Validation(format!("{k} = {r} outside (0, 1]")));
            }
        }
        if self.sample_steps > self.diffusion_steps {
            return Err(Error::Validation(format!(
                "sample_steps = {} exceeds diffusion_steps = {}",
                self.sample_steps, self.diffusion_steps
            )));
        }
        if !(self.link_noise >= 0.0 && self.link_noise.is_finite()) {
            return Err(Error::Validation(format!("link_noise = {} must be nonnegative", self.link_noise)));
        }
        Ok(())
    }

    /// `p` relative to `data_dir` unless it is absolute.
    pub fn path(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            Path::new(&self.data_dir).join(p)
        }
    }

    pub fn denoiser_config(&self, flow_count: usize) -> DenoiserConfig {
        DenoiserConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            ff_dim: self.ff_dim,
            window_len: self.window_len,
            flow_count,
            diffusion_steps: self.diffusion_steps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_iters: self.warmup_iters,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            epochs_pre: self.epochs_pre,
            epochs_diff: self.epochs_diff,
            loss: self.loss,
            seed: self.seed,
        }
    }

    /// Sampler settings. A nonzero `sample_steps` picks the uniform stride
    /// that visits exactly that many steps, if one exists.
    pub fn guidance_config(&self) -> Result<GuidanceConfig> {
        let t = self.diffusion_steps;
        let (stride, steps_used) = if self.sample_steps > 0 {
            let stride = t.div_ceil(self.sample_steps);
            if t.div_ceil(stride) != self.sample_steps {
                return Err(Error::Validation(format!(
                    "no uniform stride visits exactly {} of {t} steps; stride {stride} gives {}",
                    self.sample_steps,
                    t.div_ceil(stride)
                )));
            }
            (stride, Some(self.sample_steps))
        } else {
            (self.stride, None)
        };
        Ok(GuidanceConfig {
            rho_mode: self.rho_mode,
            rho_fixed: self.rho,
            sigma_z: self.sigma_z,
            stride,
            steps_used,
            em_iters: self.em_iters,
            replacement: self.replacement,
            seed: self.seed,
            batch_size: self.sample_batch,
            jobs: self.jobs,
        })
    }

    /// The `key = value` text that [`RunConfig::resolve`] reads back.
    pub fn to_config_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Reads `key = value` lines (`#` starts a comment), or the `config` object
/// of a run manifest.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        return manifest_config(path, &text);
    }
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find(" #") {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        let key = k.trim();
        if !RunConfig::KEYS.contains(&key) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("unknown config key {key:?}"),
            });
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn manifest_config(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let Some(map) = doc.get("config").and_then(|c| c.as_object()) else {
        return Err(bad("JSON config files must be run manifests with a \"config\" object".into()));
    };
    map.iter()
        .map(|(k, v)| match v.as_str() {
            Some(s) => Ok((k.clone(), s.to_string())),
            None => Err(bad(format!("config value for {k} is not a string"))),
        })
        .collect()
}
