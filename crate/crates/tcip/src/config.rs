//! Run configuration: JSON file, command-line overrides, output root.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use tcip_core::encoder::EncoderConfig;
use tcip_core::ferm::FermConfig;
use tcip_core::losses::LossConfig;
use tcip_core::model::NetworkConfig;
use tcip_core::synth::SynthSpec;
use tcip_core::tci::{SimMetric, TciConfig, TciMode};

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_ENV: &str = "TCIP_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub detach_iterations: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            steps: 300,
            seed: 0,
            detach_iterations: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Pairs generated in memory from a spec.
    Synth { spec: SynthSpec, pairs: usize },
    /// A directory written by `tcip synth`.
    Directory { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            spec: SynthSpec::default(),
            pairs: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub ferm: FermConfig,
    pub tci: TciConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            ferm: FermConfig::default(),
            tci: TciConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            encoder: self.encoder,
            ferm: self.ferm,
            tci: self.tci,
            loss: self.loss,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.network().validate()?;
        anyhow::ensure!(
            self.train.lr.is_finite() && self.train.lr > 0.0,
            "learning rate {} must be positive",
            self.train.lr
        );
        if let DataSource::Synth { spec, .. } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `output_dir`, placed under `root` when it is relative.
    pub fn resolved_output(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn parse_mode(s: &str) -> Result<TciMode, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "conv_only" | "tci1" | "tci_1" => Ok(TciMode::ConvOnly),
        "stab_only" | "tci2" | "tci_2" => Ok(TciMode::StabOnly),
        "conv_then_stab" | "tci3" | "tci_3" => Ok(TciMode::ConvThenStab),
        "stab_then_conv" | "tci4" | "tci_4" => Ok(TciMode::StabThenConv),
        _ => Err(format!("unknown TCI mode `{s}`")),
    }
}

fn parse_metric(s: &str) -> Result<SimMetric, String> {
    match s.to_ascii_lowercase().as_str() {
        "ncc" => Ok(SimMetric::Ncc),
        "mae" => Ok(SimMetric::Mae),
        "mse" => Ok(SimMetric::Mse),
        _ => Err(format!("unknown similarity metric `{s}`")),
    }
}

/// Four 0/1 flags for layers 1..=4, e.g. `1,1,0,0`.
fn parse_layers(s: &str) -> Result<[bool; 4], String> {
    let flags: Vec<&str> = s.split(',').map(str::trim).collect();
    if flags.len() != 4 {
        return Err(format!("expected four comma-separated flags, got `{s}`"));
    }
    let mut out = [false; 4];
    for (o, f) in out.iter_mut().zip(flags) {
        *o = match f {
            "1" | "true" | "on" => true,
            "0" | "false" | "off" => false,
            _ => return Err(format!("bad layer flag `{f}`")),
        };
    }
    Ok(out)
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "1" | "true" | "on" => Ok(true),
        "0" | "false" | "off" => Ok(false),
        _ => Err(format!("expected true/false, got `{s}`")),
    }
}

/// Per-field overrides applied on top of `--config`.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; unspecified fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_bool)]
    pub detach_iterations: Option<bool>,
    /// Smoothness weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Correlation window edge n.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// SEB reduction ratio r.
    #[arg(long)]
    pub reduction: Option<usize>,
    #[arg(long, value_parser = parse_bool)]
    pub ffb: Option<bool>,
    #[arg(long, value_parser = parse_bool)]
    pub seb: Option<bool>,
    /// Window size t.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub delta_s: Option<f64>,
    #[arg(long)]
    pub delta_c: Option<f64>,
    /// conv_only | stab_only | conv_then_stab | stab_then_conv (or tci1..tci4).
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TciMode>,
    /// ncc | mae | mse.
    #[arg(long, value_parser = parse_metric)]
    pub sim_metric: Option<SimMetric>,
    /// Per-layer TCI enablement for layers 1..4, e.g. `1,1,0,0`.
    #[arg(long, value_parser = parse_layers)]
    pub layers: Option<[bool; 4]>,
    #[arg(long, value_parser = parse_bool)]
    pub return_best: Option<bool>,
    /// Encoder widths for blocks 1..4, e.g. `8,16,16,16`.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub channels: Option<Vec<usize>>,
    /// Read pairs from a dataset directory instead of generating them.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub num_blobs: Option<usize>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub smoothness: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    /// Loads `--config` (or defaults) and applies every given flag.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut c)?;
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&self, c: &mut RunConfig) -> anyhow::Result<()> {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.lr => c.train.lr);
        set!(self.steps => c.train.steps);
        set!(self.seed => c.train.seed);
        set!(self.detach_iterations => c.train.detach_iterations);
        set!(self.lambda => c.loss.lambda);
        set!(self.patch_size => c.loss.patch_size);
        set!(self.reduction => c.ferm.reduction);
        set!(self.ffb => c.ferm.use_ffb);
        set!(self.seb => c.ferm.use_seb);
        set!(self.window => c.tci.window);
        set!(self.k_max => c.tci.k_max);
        set!(self.delta_s => c.tci.delta_s);
        set!(self.delta_c => c.tci.delta_c);
        set!(self.mode => c.tci.mode);
        set!(self.sim_metric => c.tci.sim_metric);
        set!(self.layers => c.tci.per_layer_enabled);
        set!(self.return_best => c.tci.return_best);
        set!(self.output_dir => c.output_dir);
        if let Some(ch) = &self.channels {
            anyhow::ensure!(ch.len() == 4, "--channels takes four widths");
            c.encoder.channels = [ch[0], ch[1], ch[2], ch[3]];
        }
        if let Some(dir) = &self.data_dir {
            c.data = DataSource::Directory { path: dir.clone() };
        }
        let synth_flags = self.pairs.is_some()
            || self.grid_size.is_some()
            || self.num_blobs.is_some()
            || self.amplitude.is_some()
            || self.smoothness.is_some()
            || self.data_seed.is_some();
        if synth_flags {
            let DataSource::Synth { spec, pairs } = &mut c.data else {
                anyhow::bail!("synthetic-data flags conflict with a dataset directory");
            };
            set!(self.pairs => *pairs);
            set!(self.grid_size => spec.grid_size);
            set!(self.num_blobs => spec.num_blobs);
            set!(self.amplitude => spec.deform_amplitude);
            set!(self.smoothness => spec.deform_smoothness);
            set!(self.data_seed => spec.seed);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.loss.lambda, 1.0);
        assert_eq!(c.loss.patch_size, 9);
        assert_eq!(c.ferm.reduction, 16);
        assert_eq!(c.tci.window, 3);
        assert_eq!(c.tci.k_max, 10);
        assert_eq!((c.tci.delta_s, c.tci.delta_c), (0.005, 0.005));
        assert_eq!(c.tci.mode, TciMode::StabThenConv);
        assert_eq!(c.tci.sim_metric, SimMetric::Ncc);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train":{"steps":5},"tci":{"delta_s":0.01,"delta_c":0.005,"window":4,"k_max":10,"mode":"conv_only","sim_metric":"mae","per_layer_enabled":[true,true,false,false]}}"#).unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.tci.mode, TciMode::ConvOnly);
        assert!(!c.tci.return_best);
    }

    #[test]
    fn documented_example_parses() {
        let c: RunConfig = serde_json::from_str(
            r#"{
  "train": { "steps": 300, "lr": 0.0001, "seed": 0 },
  "loss": { "patch_size": 5 },
  "tci": { "mode": "stab_then_conv", "delta_s": 0.005, "delta_c": 0.005 },
  "data": { "synth": { "spec": { "grid_size": 32, "num_blobs": 12, "deform_amplitude": 2.0, "deform_smoothness": 8.0, "seed": 0 }, "pairs": 4 } },
  "output_dir": "runs/example"
}"#,
        )
        .unwrap();
        assert_eq!(c.loss.patch_size, 5);
        assert_eq!(c.tci.window, 3);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian":{}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_mode("TCI-3").unwrap(), TciMode::ConvThenStab);
        assert_eq!(parse_layers("1,0,1,0").unwrap(), [true, false, true, false]);
        assert!(parse_layers("1,0").is_err());
        assert!(parse_metric("l2").is_err());
    }

    #[test]
    fn output_root_applies_to_relative_paths_only() {
        let c = RunConfig::default();
        assert_eq!(c.resolved_output(Some(Path::new("/tmp/x"))), Path::new("/tmp/x/runs"));
        let abs = RunConfig {
            output_dir: "/abs".into(),
            ..RunConfig::default()
        };
        assert_eq!(abs.resolved_output(Some(Path::new("/tmp/x"))), Path::new("/abs"));
    }
}
