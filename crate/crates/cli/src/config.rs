//! Layered run configuration: defaults, then a TOML file, then flags.

use std::path::Path;

use bgseg::bilateral::SolverParams;
use bgseg::discovery::DiscoveryConfig;
use bgseg::head::HeadInput;
use bgseg::localize::{Connectivity, InferenceConfig, SelectMode};
use bgseg::metrics::DEFAULT_BETA_SQ;
use bgseg::retrieval::{ClassSet, NnMetric, ProtoMode, RetrievalConfig};
use bgseg::train::TrainConfig;
use bgseg::Error;
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beta_sq: f64,
    /// Which boxes CorLoc scores: the largest component or every component.
    pub corloc_mode: SelectMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta_sq: DEFAULT_BETA_SQ,
            corloc_mode: SelectMode::Single,
        }
    }
}

/// Every algorithmic setting of a run. Paths are not part of it, so the
/// hash identifies the computation rather than where it ran.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub discovery: DiscoveryConfig,
    pub train: TrainConfig,
    pub solver: SolverParams,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.discovery.validate()?;
        self.train.validate()?;
        self.solver.validate()?;
        self.inference.validate()?;
        self.retrieval.validate()?;
        if !(self.eval.beta_sq > 0.0) || !self.eval.beta_sq.is_finite() {
            return Err(Error::Config("eval.beta_sq must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes to JSON");
        hex::encode(Sha256::digest(&json))
    }
}

/// Flags that override individual config values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Background similarity threshold
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Disable sparsity reweighting of heads
    #[arg(long, global = true)]
    pub no_reweight: bool,

    /// Weight of the self-refinement loss
    #[arg(long = "lambda", global = true)]
    pub lambda_mix: Option<f64>,
    #[arg(long, global = true)]
    pub m_switch: Option<usize>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub lr_decay: Option<f64>,
    #[arg(long, global = true)]
    pub lr_decay_every: Option<usize>,
    #[arg(long, global = true)]
    pub iou_gate: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_head_input)]
    pub head_input: Option<HeadInput>,

    #[arg(long = "bs.sigma-spatial", global = true)]
    pub bs_sigma_spatial: Option<f64>,
    #[arg(long = "bs.sigma-luma", global = true)]
    pub bs_sigma_luma: Option<f64>,
    #[arg(long = "bs.sigma-chroma", global = true)]
    pub bs_sigma_chroma: Option<f64>,
    #[arg(long = "bs.lam", global = true)]
    pub bs_lam: Option<f64>,
    #[arg(long = "bs.cg-tol", global = true)]
    pub bs_cg_tol: Option<f64>,
    #[arg(long = "bs.cg-max-iters", global = true)]
    pub bs_cg_max_iters: Option<usize>,
    #[arg(long = "bs.threshold", global = true)]
    pub bs_threshold: Option<f64>,

    /// Component selection: single or multi
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<SelectMode>,
    /// Refine predictions with the bilateral solver
    #[arg(long, global = true)]
    pub post_bs: bool,
    /// 4 or 8
    #[arg(long, global = true, value_parser = parse_connectivity)]
    pub connectivity: Option<Connectivity>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub min_component_frac: Option<f64>,

    #[arg(long, global = true)]
    pub beta_sq: Option<f64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub corloc_mode: Option<SelectMode>,

    /// Retrieval prototypes: single-mask or per-component
    #[arg(long, global = true, value_parser = parse_proto_mode)]
    pub proto_mode: Option<ProtoMode>,
    /// Retrieval distance: cosine or euclidean
    #[arg(long, global = true, value_parser = parse_metric)]
    pub nn_metric: Option<NnMetric>,
    /// Retrieval class set: voc7 or voc21
    #[arg(long, global = true, value_parser = parse_class_set)]
    pub class_set: Option<ClassSet>,
}

fn parse_head_input(s: &str) -> Result<HeadInput, String> {
    match s {
        "concat" => Ok(HeadInput::Concat),
        "weighted" => Ok(HeadInput::Weighted),
        _ => Err(format!("expected concat or weighted, got {s}")),
    }
}

fn parse_mode(s: &str) -> Result<SelectMode, String> {
    match s {
        "single" => Ok(SelectMode::Single),
        "multi" => Ok(SelectMode::Multi),
        _ => Err(format!("expected single or multi, got {s}")),
    }
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    match s {
        "4" => Ok(Connectivity::Four),
        "8" => Ok(Connectivity::Eight),
        _ => Err(format!("expected 4 or 8, got {s}")),
    }
}

fn parse_proto_mode(s: &str) -> Result<ProtoMode, String> {
    match s {
        "single-mask" => Ok(ProtoMode::SingleMask),
        "per-component" => Ok(ProtoMode::PerComponent),
        _ => Err(format!("expected single-mask or per-component, got {s}")),
    }
}

fn parse_metric(s: &str) -> Result<NnMetric, String> {
    match s {
        "cosine" => Ok(NnMetric::Cosine),
        "euclidean" => Ok(NnMetric::Euclidean),
        _ => Err(format!("expected cosine or euclidean, got {s}")),
    }
}

fn parse_class_set(s: &str) -> Result<ClassSet, String> {
    match s {
        "voc7" => Ok(ClassSet::Voc7),
        "voc21" => Ok(ClassSet::Voc21),
        _ => Err(format!("expected voc7 or voc21, got {s}")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.discovery.tau, self.tau);
        if self.no_reweight {
            cfg.discovery.reweight = false;
        }
        let t = &mut cfg.train;
        set(&mut t.lambda_mix, self.lambda_mix);
        set(&mut t.m_switch, self.m_switch);
        set(&mut t.iters, self.iters);
        set(&mut t.batch, self.batch);
        set(&mut t.lr, self.lr);
        set(&mut t.lr_decay, self.lr_decay);
        set(&mut t.lr_decay_every, self.lr_decay_every);
        set(&mut t.iou_gate, self.iou_gate);
        set(&mut t.adamw.weight_decay, self.weight_decay);
        set(&mut t.seed, self.seed);
        set(&mut t.head_input, self.head_input);
        let s = &mut cfg.solver;
        set(&mut s.sigma_spatial, self.bs_sigma_spatial);
        set(&mut s.sigma_luma, self.bs_sigma_luma);
        set(&mut s.sigma_chroma, self.bs_sigma_chroma);
        set(&mut s.lam, self.bs_lam);
        set(&mut s.cg_tol, self.bs_cg_tol);
        set(&mut s.cg_max_iters, self.bs_cg_max_iters);
        set(&mut s.binarize_threshold, self.bs_threshold);
        let i = &mut cfg.inference;
        set(&mut i.mode, self.mode);
        if self.post_bs {
            i.post_bs = true;
        }
        set(&mut i.connectivity, self.connectivity);
        set(&mut i.threshold, self.threshold);
        set(&mut i.min_component_frac, self.min_component_frac);
        set(&mut cfg.retrieval.min_component_frac, self.min_component_frac);
        set(&mut cfg.retrieval.connectivity, self.connectivity);
        set(&mut cfg.eval.beta_sq, self.beta_sq);
        set(&mut cfg.eval.corloc_mode, self.corloc_mode);
        set(&mut cfg.retrieval.mode, self.proto_mode);
        set(&mut cfg.retrieval.metric, self.nn_metric);
        set(&mut cfg.retrieval.class_set, self.class_set.clone());
    }
}

/// Defaults, overlaid by the file (if any), overlaid by flags; validated.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
