//! Staged, resumable orchestration of the full mapping pipeline.
//!
//! Every stage reads the artifacts of the stages before it from the run
//! directory, so running the stages one by one gives the same result as a
//! full run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{align_subspaces, SubspacePairing};
use crate::clustering::{finch_hierarchy, merge_small_clusters, min_subspace_size, select_level, LevelPolicy, Partition};
use crate::embedding::{iterative_normalize, load_embeddings, EmbeddingSpace, DEFAULT_NORMALIZE_ITERATIONS};
use crate::error::{ClweError, Result};
use crate::evaluation::{evaluate_bli, evaluate_bli_by_subspace, GoldDictionary, DEFAULT_SUBSPACE_EVAL_VOCAB};
use crate::gan::{random_restart_train, GanConfig};
use crate::mapping::{LinearMap, Mapping};
use crate::multi_gan::{train_multi_gan, PiecewiseMap};
use crate::refinement::{global_refine, local_refine, stochastic_refine, write_refine_log, RefineConfig, RefineMode};
use crate::retrieval::{csls_translate, induce_seed_dictionary, SeedDictionary, DEFAULT_CSLS_K, DEFAULT_INDUCTION_VOCAB};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SingleGan,
    Cluster,
    Align,
    MultiGan,
    Refine,
    Induce,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::SingleGan,
        Stage::Cluster,
        Stage::Align,
        Stage::MultiGan,
        Stage::Refine,
        Stage::Induce,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SingleGan => "single_gan",
            Stage::Cluster => "cluster",
            Stage::Align => "align",
            Stage::MultiGan => "multi_gan",
            Stage::Refine => "refine",
            Stage::Induce => "induce",
            Stage::Evaluate => "evaluate",
        }
    }

    fn dir(self) -> &'static str {
        self.name()
    }
}

impl FromStr for Stage {
    type Err = ClweError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.name().replace('_', "-") == s)
            .ok_or_else(|| ClweError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub gold: Option<PathBuf>,
    /// Rows kept from each embedding file; 0 keeps all.
    #[serde(default)]
    pub max_vocab: usize,
    /// 0 loads the vectors unchanged.
    #[serde(default = "default_normalize")]
    pub normalize_iterations: usize,
}

fn default_normalize() -> usize {
    DEFAULT_NORMALIZE_ITERATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub restarts: usize,
    /// Extra attempts granted when dictionary induction comes back empty.
    pub restart_budget: usize,
    pub refine: RefineMode,
    pub single_gan_only: bool,
    /// Skip stages whose recorded artifacts are present and current.
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            restarts: 10,
            restart_budget: 2,
            refine: RefineMode::Global,
            single_gan_only: false,
            resume: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub level: String,
    /// 0 selects the dimension-based default.
    pub min_subspace_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            level: "last".into(),
            min_subspace_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub csls_k: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { csls_k: DEFAULT_CSLS_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InduceConfig {
    pub vocab_limit: usize,
    pub csls_k: usize,
}

impl Default for InduceConfig {
    fn default() -> Self {
        InduceConfig {
            vocab_limit: DEFAULT_INDUCTION_VOCAB,
            csls_k: DEFAULT_CSLS_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub csls_k: usize,
    pub subspace_vocab: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            csls_k: DEFAULT_CSLS_K,
            subspace_vocab: DEFAULT_SUBSPACE_EVAL_VOCAB,
        }
    }
}

/// Pipeline configuration, one section per stage. Relative data paths are
/// resolved against the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub single_gan: GanConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub multi_gan: GanConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub induce: InduceConfig,
    #[serde(default)]
    pub evaluate: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ClweError::Config(e.to_string()))?;
        for p in [Some(&mut cfg.data.source), Some(&mut cfg.data.target), cfg.data.gold.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ClweError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ClweError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.restarts == 0 {
            return Err(ClweError::Config("run.restarts must be at least 1".into()));
        }
        self.single_gan.validate()?;
        self.multi_gan.validate()?;
        self.refine.validate()?;
        LevelPolicy::from_str(&self.cluster.level)?;
        if self.align.csls_k == 0 || self.induce.csls_k == 0 || self.evaluate.csls_k == 0 {
            return Err(ClweError::Config("csls_k must be positive".into()));
        }
        if self.induce.vocab_limit == 0 || self.evaluate.subspace_vocab == 0 {
            return Err(ClweError::Config("vocabulary limits must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed of `stage` derived from the master seed. Attempts after the first
/// (restarts after an empty dictionary) get fresh seeds.
pub fn stage_seed(master: u64, stage: Stage, attempt: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.name().as_bytes());
    if attempt > 0 {
        h.update(format!("#{attempt}").as_bytes());
    }
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Hash of the configuration the stage ran under.
    pub config_hash: String,
    pub status: StageStatus,
    pub attempt: usize,
    pub seed: u64,
    pub criteria: BTreeMap<String, f64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<Stage>,
    /// Wall-clock seconds per stage; the only non-reproducible field.
    pub timings: BTreeMap<String, f64>,
}

impl Manifest {
    fn new(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Manifest {
            config_hash: cfg.hash()?,
            master_seed: cfg.run.seed,
            seeds: BTreeMap::new(),
            stages: Vec::new(),
            failed_stage: None,
            timings: BTreeMap::new(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| ClweError::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| ClweError::io(&p, e))
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    fn upsert(&mut self, rec: StageRecord) {
        self.stages.retain(|r| r.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|r| r.stage);
    }

    /// Manifest without the timing field, for reproducibility comparisons.
    pub fn without_timings(&self) -> Manifest {
        Manifest {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Normalized source and target spaces plus the optional gold dictionary.
pub struct Inputs {
    pub source: EmbeddingSpace,
    pub target: EmbeddingSpace,
    pub gold: Option<GoldDictionary>,
}

pub fn load_inputs(cfg: &DataConfig) -> Result<Inputs> {
    let max = if cfg.max_vocab == 0 { usize::MAX } else { cfg.max_vocab };
    let prepare = |path: &Path| -> Result<EmbeddingSpace> {
        let raw = load_embeddings(path, max)?;
        if cfg.normalize_iterations == 0 {
            return Ok(raw);
        }
        iterative_normalize(&raw, cfg.normalize_iterations)
    };
    let source = prepare(&cfg.source)?;
    let target = prepare(&cfg.target)?;
    if source.dim() != target.dim() {
        return Err(ClweError::Shape {
            expected: format!("target dimension {}", source.dim()),
            actual: format!("dimension {}", target.dim()),
        });
    }
    let gold = cfg.gold.as_deref().map(GoldDictionary::load).transpose()?;
    Ok(Inputs { source, target, gold })
}

/// Either a single linear map or a piecewise map; whichever the enabled
/// stages produced last.
#[derive(Debug, Clone)]
pub enum FinalMap {
    Linear(LinearMap),
    Piecewise(PiecewiseMap),
}

impl FinalMap {
    pub fn backward(&self) -> Box<dyn Mapping> {
        match self {
            FinalMap::Linear(m) => Box::new(m.transpose()),
            FinalMap::Piecewise(p) => Box::new(p.backward()),
        }
    }
}

impl Mapping for FinalMap {
    fn map_rows(&self, vectors: ArrayView2<'_, f64>, words: &[usize]) -> Array2<f64> {
        match self {
            FinalMap::Linear(m) => m.map_rows(vectors, words),
            FinalMap::Piecewise(p) => p.map_rows(vectors, words),
        }
    }
}

/// State shared by the stages of one run.
pub struct Run<'a> {
    pub cfg: &'a PipelineConfig,
    pub inputs: &'a Inputs,
    pub dir: PathBuf,
    pub manifest: Manifest,
    attempt: usize,
}

struct StageOutput {
    criteria: BTreeMap<String, f64>,
    artifacts: Vec<String>,
    status: StageStatus,
}

impl StageOutput {
    fn ok() -> Self {
        StageOutput {
            criteria: BTreeMap::new(),
            artifacts: Vec::new(),
            status: StageStatus::Ok,
        }
    }

    fn criterion(mut self, name: &str, v: f64) -> Self {
        self.criteria.insert(name.into(), v);
        self
    }

    fn artifact(mut self, path: String) -> Self {
        self.artifacts.push(path);
        self
    }
}

impl<'a> Run<'a> {
    /// Opens (or creates) the run directory, keeping the records of an
    /// existing manifest.
    pub fn open(cfg: &'a PipelineConfig, inputs: &'a Inputs, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(dir).map_err(|e| ClweError::io(dir, e))?;
        let fresh = Manifest::new(cfg)?;
        let manifest = match Manifest::load(dir) {
            Ok(m) => Manifest {
                config_hash: fresh.config_hash,
                master_seed: fresh.master_seed,
                ..m
            },
            Err(_) => fresh,
        };
        Ok(Run {
            cfg,
            inputs,
            dir: dir.to_path_buf(),
            manifest,
            attempt: 0,
        })
    }

    fn stage_dir(&self, stage: Stage) -> Result<PathBuf> {
        let d = self.dir.join(stage.dir());
        fs::create_dir_all(&d).map_err(|e| ClweError::io(&d, e))?;
        Ok(d)
    }

    fn rel(stage: Stage, file: &str) -> String {
        format!("{}/{}", stage.dir(), file)
    }

    fn seed(&self, stage: Stage) -> u64 {
        stage_seed(self.cfg.run.seed, stage, self.attempt)
    }

    /// Whether `stage` has a successful record, made under the current
    /// configuration, whose artifacts all exist.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.manifest.record(stage).is_some_and(|r| {
            r.status == StageStatus::Ok
                && r.config_hash == self.manifest.config_hash
                && r.artifacts.iter().all(|a| self.dir.join(a).exists())
        })
    }

    /// Runs one stage from the artifacts of the earlier ones and records it
    /// in the manifest.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let seed = self.seed(stage);
        self.manifest.seeds.insert(stage.name().into(), seed);
        let start = Instant::now();
        let result = match stage {
            Stage::SingleGan => self.single_gan(seed),
            Stage::Cluster => self.cluster(),
            Stage::Align => self.align(),
            Stage::MultiGan => self.multi_gan(seed),
            Stage::Refine => self.refine(seed),
            Stage::Induce => self.induce(),
            Stage::Evaluate => self.evaluate(),
        };
        self.manifest
            .timings
            .insert(stage.name().into(), start.elapsed().as_secs_f64());
        let rec = match &result {
            Ok(out) => StageRecord {
                stage,
                config_hash: self.manifest.config_hash.clone(),
                status: out.status,
                attempt: self.attempt,
                seed,
                criteria: out.criteria.clone(),
                artifacts: out.artifacts.clone(),
                error: None,
            },
            Err(e) => StageRecord {
                stage,
                config_hash: self.manifest.config_hash.clone(),
                status: StageStatus::Failed,
                attempt: self.attempt,
                seed,
                criteria: BTreeMap::new(),
                artifacts: Vec::new(),
                error: Some(e.to_string()),
            },
        };
        self.manifest.failed_stage = if result.is_err() { Some(stage) } else { None };
        self.manifest.upsert(rec);
        self.manifest.save(&self.dir)?;
        result.map(|_| ())
    }

    /// Stages enabled by the configuration, in order.
    pub fn enabled_stages(&self) -> Vec<Stage> {
        if self.cfg.run.single_gan_only {
            return vec![Stage::SingleGan];
        }
        Stage::ALL
            .into_iter()
            .filter(|&s| match s {
                Stage::Refine => self.cfg.run.refine != RefineMode::None,
                Stage::Evaluate => self.inputs.gold.is_some(),
                _ => true,
            })
            .collect()
    }

    /// Runs every enabled stage from `from` on (earlier stages are resumed
    /// from their artifacts when current). An empty induced dictionary
    /// restarts the run with fresh seeds while the restart budget lasts.
    pub fn run_all(&mut self, from: Option<Stage>) -> Result<()> {
        let stages = self.enabled_stages();
        loop {
            let mut outcome = Ok(());
            for &stage in &stages {
                let forced = from.is_some_and(|f| stage >= f) || self.attempt > 0;
                let skip = !forced && (from.is_some() || self.cfg.run.resume) && self.is_current(stage);
                if skip {
                    log::info!("stage {} is current; skipping", stage.name());
                    continue;
                }
                log::info!("running stage {} (attempt {})", stage.name(), self.attempt);
                if let Err(e) = self.run_stage(stage) {
                    outcome = Err(e);
                    break;
                }
            }
            match outcome {
                Err(ClweError::EmptyDictionary(msg)) if self.attempt < self.cfg.run.restart_budget => {
                    self.attempt += 1;
                    log::warn!("empty dictionary ({msg}); restarting with attempt {}", self.attempt);
                }
                other => return other,
            }
        }
    }

    fn single_map(&self) -> Result<LinearMap> {
        let hint = self
            .manifest
            .record(Stage::SingleGan)
            .and_then(|r| r.criteria.get("orthogonal_hint"))
            .is_some_and(|&h| h > 0.5);
        LinearMap::load(self.dir.join(Stage::SingleGan.dir()).join("map.txt"), hint)
    }

    fn cluster_partition(&self) -> Result<Partition> {
        Partition::load(
            &self.dir.join(Stage::Cluster.dir()).join("assignments.tsv"),
            &self.inputs.source,
        )
    }

    fn pairing(&self) -> Result<SubspacePairing> {
        let d = self.dir.join(Stage::Align.dir());
        SubspacePairing::load(
            &d.join("source_subspaces.tsv"),
            &d.join("target_subspaces.tsv"),
            &self.inputs.source,
            &self.inputs.target,
        )
    }

    fn piecewise(&self, stage: Stage) -> Result<PiecewiseMap> {
        PiecewiseMap::load(&self.dir.join(stage.dir()), &self.inputs.source, &self.inputs.target)
    }

    /// The map later stages consume: the refined map when refinement is
    /// enabled, else the multi-GAN map.
    pub fn final_map(&self) -> Result<FinalMap> {
        match self.cfg.run.refine {
            RefineMode::None => self.piecewise(Stage::MultiGan).map(FinalMap::Piecewise),
            RefineMode::Global | RefineMode::Local => self.piecewise(Stage::Refine).map(FinalMap::Piecewise),
            RefineMode::Single => {
                let p = self.dir.join(Stage::Refine.dir()).join("single_map.txt");
                LinearMap::load(p, true).map(FinalMap::Linear)
            }
        }
    }

    fn single_gan(&self, seed: u64) -> Result<StageOutput> {
        let cfg = GanConfig {
            seed,
            ..self.cfg.single_gan.clone()
        };
        let out = random_restart_train(&self.inputs.source, &self.inputs.target, &cfg, self.cfg.run.restarts)?;
        let d = self.stage_dir(Stage::SingleGan)?;
        out.map.save(d.join("map.txt"))?;
        let report = serde_json::json!({
            "criterion": out.criterion,
            "chosen": out.chosen,
            "criteria": out.criteria,
        });
        let p = d.join("restarts.json");
        fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| ClweError::io(&p, e))?;
        Ok(StageOutput::ok()
            .criterion("selection_criterion", out.criterion)
            .criterion("chosen_restart", out.chosen as f64)
            .criterion("orthogonality_error", out.map.orthogonality_error())
            .criterion("orthogonal_hint", if out.map.orthogonal_hint { 1.0 } else { 0.0 })
            .artifact(Self::rel(Stage::SingleGan, "map.txt"))
            .artifact(Self::rel(Stage::SingleGan, "restarts.json")))
    }

    fn cluster(&self) -> Result<StageOutput> {
        let source = &self.inputs.source;
        let policy = LevelPolicy::from_str(&self.cfg.cluster.level)?;
        let h = finch_hierarchy(source.vectors())?;
        let selected = select_level(&h, policy)?;
        let min = match self.cfg.cluster.min_subspace_size {
            0 => min_subspace_size(source.dim()),
            m => m,
        };
        let merged = merge_small_clusters(&selected, source.vectors(), min)?;
        let d = self.stage_dir(Stage::Cluster)?;
        merged.save(&d.join("assignments.tsv"), &d.join("centroids.txt"), source)?;
        let summary = serde_json::json!({
            "level_sizes": h.levels.iter().map(|l| l.clusters).collect::<Vec<_>>(),
            "policy": policy.to_string(),
            "selected_clusters": selected.clusters,
            "min_subspace_size": min,
            "clusters": merged.clusters,
        });
        let p = d.join("hierarchy.json");
        fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| ClweError::io(&p, e))?;
        Ok(StageOutput::ok()
            .criterion("levels", h.levels.len() as f64)
            .criterion("clusters", merged.clusters as f64)
            .artifact(Self::rel(Stage::Cluster, "assignments.tsv"))
            .artifact(Self::rel(Stage::Cluster, "centroids.txt"))
            .artifact(Self::rel(Stage::Cluster, "hierarchy.json")))
    }

    fn align(&self) -> Result<StageOutput> {
        let single = self.single_map()?;
        let partition = self.cluster_partition()?;
        let pairing = align_subspaces(&single, &partition, &self.inputs.source, &self.inputs.target, self.cfg.align.csls_k)?;
        let d = self.stage_dir(Stage::Align)?;
        pairing.save(
            &d.join("source_subspaces.tsv"),
            &d.join("target_subspaces.tsv"),
            &self.inputs.source,
            &self.inputs.target,
        )?;
        Ok(StageOutput::ok()
            .criterion("subspaces", pairing.subspaces() as f64)
            .artifact(Self::rel(Stage::Align, "source_subspaces.tsv"))
            .artifact(Self::rel(Stage::Align, "target_subspaces.tsv")))
    }

    fn multi_gan(&self, seed: u64) -> Result<StageOutput> {
        let single = self.single_map()?;
        let pairing = self.pairing()?;
        let cfg = GanConfig {
            seed,
            ..self.cfg.multi_gan.clone()
        };
        let out = train_multi_gan(&single, &pairing, &self.inputs.source, &self.inputs.target, &cfg)?;
        let d = self.stage_dir(Stage::MultiGan)?;
        out.map.save(&d, &self.inputs.source, &self.inputs.target)?;
        let p = d.join("logs.json");
        fs::write(&p, serde_json::to_string_pretty(&out.logs)? + "\n").map_err(|e| ClweError::io(&p, e))?;
        let mut o = StageOutput::ok();
        for (i, c) in out.map.criteria.iter().enumerate() {
            o = o.criterion(&format!("criterion_{i}"), *c);
        }
        for (i, l) in out.map.lambdas.iter().enumerate() {
            o = o.criterion(&format!("lambda_{i}"), *l);
        }
        Ok(piecewise_artifacts(o, Stage::MultiGan, out.map.maps.len()).artifact(Self::rel(Stage::MultiGan, "logs.json")))
    }

    fn refine(&self, seed: u64) -> Result<StageOutput> {
        let cfg = RefineConfig {
            seed,
            ..self.cfg.refine.clone()
        };
        let (source, target) = (&self.inputs.source, &self.inputs.target);
        let d = self.stage_dir(Stage::Refine)?;
        match self.cfg.run.refine {
            RefineMode::None => Err(ClweError::Config("refinement is disabled".into())),
            RefineMode::Single => {
                let out = stochastic_refine(&self.single_map()?, source, target, &cfg)?;
                out.map.save(d.join("single_map.txt"))?;
                write_refine_log(&d.join("log.tsv"), &out.log)?;
                Ok(StageOutput::ok()
                    .criterion("objective", out.objective)
                    .criterion("iterations", out.log.len() as f64)
                    .artifact(Self::rel(Stage::Refine, "single_map.txt"))
                    .artifact(Self::rel(Stage::Refine, "log.tsv")))
            }
            RefineMode::Global => {
                let pm = self.piecewise(Stage::MultiGan)?;
                let (refined, out) = global_refine(&pm, source, target, &cfg)?;
                refined.save(&d, source, target)?;
                write_refine_log(&d.join("log.tsv"), &out.log)?;
                let o = StageOutput::ok()
                    .criterion("objective", out.objective)
                    .criterion("iterations", out.log.len() as f64);
                Ok(piecewise_artifacts(o, Stage::Refine, refined.maps.len()).artifact(Self::rel(Stage::Refine, "log.tsv")))
            }
            RefineMode::Local => {
                let pm = self.piecewise(Stage::MultiGan)?;
                let (refined, logs) = local_refine(&pm, source, target, &cfg)?;
                refined.save(&d, source, target)?;
                let p = d.join("local.json");
                fs::write(&p, serde_json::to_string_pretty(&logs)? + "\n").map_err(|e| ClweError::io(&p, e))?;
                let o = StageOutput::ok().criterion("refined_subspaces", logs.iter().filter(|l| l.refined).count() as f64);
                Ok(piecewise_artifacts(o, Stage::Refine, refined.maps.len()).artifact(Self::rel(Stage::Refine, "local.json")))
            }
        }
    }

    fn induce(&self) -> Result<StageOutput> {
        let map = self.final_map()?;
        let backward = map.backward();
        let (source, target) = (&self.inputs.source, &self.inputs.target);
        let ic = &self.cfg.induce;
        let dict = induce_seed_dictionary(&map, backward.as_ref(), source, target, ic.vocab_limit, ic.csls_k)?;
        let pass = mutual_recheck(&map, backward.as_ref(), &dict, source, target, ic.vocab_limit, ic.csls_k)?;
        let d = self.stage_dir(Stage::Induce)?;
        dict.save(d.join("dictionary.tsv"), source, target)?;
        Ok(StageOutput::ok()
            .criterion("pairs", dict.len() as f64)
            .criterion("mutual_recheck_pass_rate", pass)
            .artifact(Self::rel(Stage::Induce, "dictionary.tsv")))
    }

    fn evaluate(&self) -> Result<StageOutput> {
        let Some(gold) = &self.inputs.gold else {
            let mut o = StageOutput::ok();
            o.status = StageStatus::Skipped;
            return Ok(o);
        };
        let map = self.final_map()?;
        let (source, target) = (&self.inputs.source, &self.inputs.target);
        let ec = &self.cfg.evaluate;
        let partition = self.pairing().map(|p| p.source_partition).or_else(|_| self.cluster_partition());
        let report = match &partition {
            Ok(p) => evaluate_bli_by_subspace(&map, gold, source, target, ec.csls_k, p, ec.subspace_vocab)?,
            Err(_) => evaluate_bli(&map, gold, source, target, ec.csls_k)?,
        };
        let d = self.stage_dir(Stage::Evaluate)?;
        report.save_json(&d.join("report.json"))?;
        let mut o = StageOutput::ok()
            .criterion("p_at_1", report.p_at_1)
            .criterion("evaluated", report.evaluated as f64)
            .criterion("skipped_oov", report.skipped_oov as f64)
            .artifact(Self::rel(Stage::Evaluate, "report.json"));
        if let Some(r) = report.recombined_p_at_1() {
            let p = d.join("subspaces.tsv");
            fs::write(&p, report.subspace_table()).map_err(|e| ClweError::io(&p, e))?;
            o = o
                .criterion("recombined_p_at_1", r)
                .artifact(Self::rel(Stage::Evaluate, "subspaces.tsv"));
        }
        Ok(o)
    }
}

fn piecewise_artifacts(mut o: StageOutput, stage: Stage, maps: usize) -> StageOutput {
    for f in ["piecewise.json", "source_subspaces.tsv", "target_subspaces.tsv"] {
        o = o.artifact(Run::rel(stage, f));
    }
    for i in 0..maps {
        o = o.artifact(Run::rel(stage, &format!("map_{i}.txt")));
    }
    o
}

/// Fraction of dictionary pairs that survive a fresh round trip through
/// [`csls_translate`]: the source word's forward translation is the pair's
/// target, and that target's backward translation is the source word.
pub fn mutual_recheck(
    forward: &dyn Mapping,
    backward: &dyn Mapping,
    dict: &SeedDictionary,
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    vocab_limit: usize,
    k: usize,
) -> Result<f64> {
    if dict.is_empty() {
        return Err(ClweError::EmptyDictionary("nothing to re-check".into()));
    }
    let words: Vec<usize> = (0..vocab_limit.min(source.len())).collect();
    let fwd_q = forward.map_rows(source.rows(&words).view(), &words);
    let fwd = csls_translate(fwd_q.view(), target, k.min(words.len()).min(target.len()))?;
    let mut retrieved = fwd.clone();
    retrieved.sort_unstable();
    retrieved.dedup();
    let bwd_q = backward.map_rows(target.rows(&retrieved).view(), &retrieved);
    let bwd = csls_translate(bwd_q.view(), source, k.min(retrieved.len()).min(source.len()))?;
    let passed = dict
        .pairs
        .iter()
        .filter(|&&(s, t)| {
            s < words.len()
                && fwd[s] == t
                && retrieved
                    .binary_search(&t)
                    .is_ok_and(|pos| bwd[pos] == s)
        })
        .count();
    Ok(passed as f64 / dict.len() as f64)
}

/// Loads the inputs and runs the whole pipeline into `dir`.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path, from: Option<Stage>) -> Result<Manifest> {
    cfg.validate()?;
    let inputs = load_inputs(&cfg.data)?;
    let mut run = Run::open(cfg, &inputs, dir)?;
    let result = run.run_all(from);
    let manifest = run.manifest.clone();
    result.map(|_| manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_instance, SyntheticParams};

    fn tiny_config(dir: &Path, refine: RefineMode) -> PipelineConfig {
        let inst = generate_instance(&SyntheticParams {
            clusters: 1,
            per_cluster: 120,
            dim: 4,
            separation: 1.0,
            noise_sigma: 0.0,
            seed: 1,
        })
        .unwrap();
        inst.source.save(dir.join("src.vec")).unwrap();
        inst.source.save(dir.join("tgt.vec")).unwrap();
        inst.gold.save(&dir.join("gold.txt")).unwrap();
        let text = format!(
            r#"
[data]
source = "src.vec"
target = "tgt.vec"
gold = "gold.txt"

[run]
seed = 3
restarts = 2
refine = "{refine}"

[single_gan]
epochs = 1
steps_per_epoch = 20
dis_hidden = 8
lr_generator = 0.001

[multi_gan]
epochs = 1
steps_per_epoch = 20
dis_hidden = 8
lr_generator = 0.001
"#
        );
        fs::write(dir.join("run.toml"), text).unwrap();
        PipelineConfig::load(&dir.join("run.toml")).unwrap()
    }

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        let a = stage_seed(7, Stage::SingleGan, 0);
        assert_eq!(a, stage_seed(7, Stage::SingleGan, 0));
        assert_ne!(a, stage_seed(7, Stage::MultiGan, 0));
        assert_ne!(a, stage_seed(8, Stage::SingleGan, 0));
        assert_ne!(a, stage_seed(7, Stage::SingleGan, 1));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = PipelineConfig::from_toml("[data]\nsource = \"a\"\ntarget = \"b\"\n", Path::new("/x")).unwrap();
        assert_eq!(cfg.data.source, Path::new("/x/a"));
        assert_eq!(cfg.run.restarts, 10);
        assert_eq!(cfg.cluster.level, "last");
        cfg.validate().unwrap();
        let bad = PipelineConfig::from_toml("[data]\nsource = \"a\"\ntarget = \"b\"\n[run]\nrestarts = 0\n", Path::new("/x")).unwrap();
        assert!(bad.validate().unwrap_err().is_config());
        assert!(PipelineConfig::from_toml("[data]\nsource = \"a\"\n", Path::new("/x")).unwrap_err().is_config());
        assert!(PipelineConfig::from_toml("[data]\nsource = \"a\"\ntarget = \"b\"\n[run]\nbogus = 1\n", Path::new("/x"))
            .unwrap_err()
            .is_config());
        let round = PipelineConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn identical_spaces_without_refinement() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), RefineMode::None);
        let run_dir = dir.path().join("run");
        let m = run_pipeline(&cfg, &run_dir, None).unwrap();
        let eval = m.record(Stage::Evaluate).unwrap();
        assert!(eval.criteria["p_at_1"] >= 0.95, "{:?}", eval.criteria);
        assert_eq!(m.record(Stage::Induce).unwrap().criteria["mutual_recheck_pass_rate"], 1.0);
        for rec in &m.stages {
            for a in &rec.artifacts {
                assert!(run_dir.join(a).exists(), "{a}");
            }
        }
        // resuming leaves every artifact untouched
        let again = run_pipeline(&cfg, &run_dir, None).unwrap();
        assert_eq!(again.without_timings(), m.without_timings());
    }

    #[test]
    fn single_gan_only_stops_early() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), RefineMode::Global);
        cfg.run.single_gan_only = true;
        let run_dir = dir.path().join("run");
        let m = run_pipeline(&cfg, &run_dir, None).unwrap();
        assert_eq!(m.stages.len(), 1);
        assert!(run_dir.join("single_gan/map.txt").exists());
        assert!(!run_dir.join("cluster").exists());
    }

    #[test]
    fn reruns_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), RefineMode::Global);
        let a = run_pipeline(&cfg, &dir.path().join("a"), None).unwrap();
        let b = run_pipeline(&cfg, &dir.path().join("b"), None).unwrap();
        assert_eq!(a.without_timings(), b.without_timings());
        for rec in &a.stages {
            for f in &rec.artifacts {
                let x = fs::read(dir.path().join("a").join(f)).unwrap();
                let y = fs::read(dir.path().join("b").join(f)).unwrap();
                assert!(x == y, "{f} differs");
            }
        }
    }
}
