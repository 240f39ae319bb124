//! Supervision dataset emission and loading.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json                 counts, splits, seeds, per-episode digests
//! rig.json                      camera rig (intrinsics and camera-to-world per view)
//! episodes/<id:06>/
//!     scene-<step:03>.json      canonical JSON SceneState before step <step>
//!     cloud-<step:03>.bbpc      binary labeled cloud of that snapshot (optional)
//!     samples.ndjson            one canonical JSON TrainingSample per line
//! ```
//!
//! Every JSON file is canonical: sorted keys, no whitespace, floats with six
//! decimals. Masks are run-length encoded as `{"len": n, "runs": [...]}`
//! where runs alternate between unset and set points, starting with unset.
//! The snapshot of the final state (after the last placement) carries the
//! terminal sample.

use crate::canon;
use crate::harness::{sample_episode, EpisodeSpec, SamplerConfig, SamplerError};
use crate::oracle::{oracle_rollout, OracleError};
use crate::perception::{
    gt_action_masks, putdown_entity, synthesize_cloud, terminal_masks, CameraView, CloudConfig,
    CloudIoError, LabeledPointCloud, Mask, MaskError,
};
use crate::rng;
use crate::scene_gen::{camera_rig, RigConfig, SceneGenError};
use crate::tasks::{catalog, with_grounding_suffix, TaskVariant};
use crate::warehouse::{Action, EntityId, SceneState};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use thiserror::Error;

pub const DATASET_SCHEMA_VERSION: &str = "boxbench-dataset/1";
/// Held-out share of samples by default: 2.2k of 9.5k.
pub const DEFAULT_TEST_FRACTION: f64 = 2.2 / 9.5;
pub const MAX_PARAPHRASES: usize = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Scene(#[from] SceneGenError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("cloud {path}: {source}")]
    Cloud { path: PathBuf, source: CloudIoError },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("corrupt sample data in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scene predicates with fixed instruction texts, used for auxiliary samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxPredicate {
    FreeCells,
    PlacedBoxes,
    StackedBoxes,
    AccessibleBoxes,
    UnplacedBoxes,
}

impl AuxPredicate {
    pub const ALL: [AuxPredicate; 5] = [
        AuxPredicate::FreeCells,
        AuxPredicate::PlacedBoxes,
        AuxPredicate::StackedBoxes,
        AuxPredicate::AccessibleBoxes,
        AuxPredicate::UnplacedBoxes,
    ];

    pub fn instruction(self) -> &'static str {
        match self {
            AuxPredicate::FreeCells => "all free placement cells",
            AuxPredicate::PlacedBoxes => "all placed boxes",
            AuxPredicate::StackedBoxes => "boxes in stacks",
            AuxPredicate::AccessibleBoxes => "accessible boxes",
            AuxPredicate::UnplacedBoxes => "all unplaced boxes",
        }
    }

    /// Entities whose points form the ground-truth mask. Free placement
    /// cells are referred to by what a putdown would target: the empty cell
    /// itself, or the top box of a partial stack.
    pub fn entities(self, state: &SceneState) -> BTreeSet<EntityId> {
        match self {
            AuxPredicate::FreeCells => state
                .free_cells()
                .iter()
                .filter_map(|s| putdown_entity(state, &s.putdown).ok())
                .collect(),
            AuxPredicate::PlacedBoxes => state.placed_boxes(),
            AuxPredicate::StackedBoxes => state.stacked_boxes(),
            AuxPredicate::AccessibleBoxes => state.accessible_boxes(),
            AuxPredicate::UnplacedBoxes => state.unplaced_boxes(),
        }
    }

    pub fn mask(self, cloud: &LabeledPointCloud, state: &SceneState) -> Mask {
        let ids = self.entities(state);
        Mask::from_predicate(cloud.len(), |i| ids.contains(&cloud.instance[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SampleKind {
    Action,
    Auxiliary { predicate: AuxPredicate },
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub sample_id: String,
    pub episode_id: u64,
    pub step: u32,
    pub split: Split,
    #[serde(flatten)]
    pub kind: SampleKind,
    /// Paths relative to the dataset root.
    pub scene: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<String>,
    pub rig: String,
    pub goal_text: String,
    /// Action and terminal samples: pickup mask. Auxiliary samples: the
    /// predicate mask.
    pub pick_mask: Mask,
    /// Empty for auxiliary and terminal samples.
    pub target_mask: Mask,
    pub done_probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    /// Id of the sample this one paraphrases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub episodes: u32,
    /// Target share of auxiliary samples among all emitted samples.
    pub aux_rate: f64,
    /// Target share of samples in the test split.
    pub test_fraction: f64,
    /// Variants cycle over episodes in this order.
    pub variants: Vec<TaskVariant>,
    pub write_clouds: bool,
    pub cloud: CloudConfig,
    pub rig: RigConfig,
    pub sampler: SamplerConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            episodes: 100,
            aux_rate: 0.10,
            test_fraction: DEFAULT_TEST_FRACTION,
            variants: TaskVariant::ALL.to_vec(),
            write_clouds: true,
            cloud: CloudConfig::default(),
            rig: RigConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl DatasetConfig {
    /// Per-snapshot probability of an extra auxiliary sample such that
    /// auxiliary samples make up `aux_rate` of the output in expectation.
    pub fn aux_probability(&self) -> f64 {
        self.aux_rate / (1.0 - self.aux_rate)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if !(0.0..=0.5).contains(&self.aux_rate) {
            return Err(DatasetError::InvalidConfig(format!(
                "aux_rate {} outside [0, 0.5]",
                self.aux_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(DatasetError::InvalidConfig(format!(
                "test_fraction {} outside [0, 1]",
                self.test_fraction
            )));
        }
        if self.variants.is_empty() {
            return Err(DatasetError::InvalidConfig("no variants".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    pub total: u64,
    pub action: u64,
    pub auxiliary: u64,
    pub terminal: u64,
    pub paraphrase: u64,
    pub train: u64,
    pub test: u64,
}

impl SampleCounts {
    fn add(&mut self, s: &TrainingSample) {
        self.total += 1;
        if s.paraphrase_of.is_some() {
            self.paraphrase += 1;
        }
        match s.kind {
            SampleKind::Action => self.action += 1,
            SampleKind::Auxiliary { .. } => self.auxiliary += 1,
            SampleKind::Terminal => self.terminal += 1,
        }
        match s.split {
            Split::Train => self.train += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode_id: u64,
    pub dir: String,
    pub seed: u64,
    pub variant: TaskVariant,
    pub num_boxes: u32,
    pub split: Split,
    pub samples: u64,
    pub samples_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub config: DatasetConfig,
    pub config_digest: String,
    pub aux_probability: f64,
    /// Whether goal texts were sent through a paraphrase provider.
    pub paraphrase_provider: Option<String>,
    pub counts: SampleCounts,
    pub train_episodes: Vec<u64>,
    pub test_episodes: Vec<u64>,
    pub episodes: Vec<EpisodeEntry>,
}

/// Goal-text rewriting service: text in, up to three texts out.
pub trait ParaphraseProvider: Sync {
    fn name(&self) -> String;
    fn paraphrase(&self, text: &str) -> Result<Vec<String>, String>;
}

/// Runs `sh -c command` per request, writing the text to its stdin and
/// reading one paraphrase per stdout line.
pub struct CommandParaphraser {
    pub command: String,
}

impl ParaphraseProvider for CommandParaphraser {
    fn name(&self) -> String {
        format!("command:{}", self.command)
    }

    fn paraphrase(&self, text: &str) -> Result<Vec<String>, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| e.to_string())?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin
                .write_all(text.as_bytes())
                .map_err(|e| e.to_string())?;
            stdin.write_all(b"\n").map_err(|e| e.to_string())?;
        }
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("provider exited with {}", out.status));
        }
        let stdout = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
        Ok(stdout.lines().map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParaphraseResult {
    /// Augmented copies; never includes the original.
    pub variants: Vec<TrainingSample>,
    pub provider_absent: bool,
}

/// Asks `provider` for rewordings of the sample's goal (without the
/// grounding suffix) and returns copies carrying each accepted text with the
/// suffix re-appended. Empty texts are rejected; a failing provider yields
/// no copies.
pub fn paraphrase_hook(
    sample: &TrainingSample,
    provider: Option<&dyn ParaphraseProvider>,
) -> ParaphraseResult {
    let Some(provider) = provider else {
        return ParaphraseResult {
            variants: Vec::new(),
            provider_absent: true,
        };
    };
    let suffix = &catalog().grounding_suffix;
    let bare = sample
        .goal_text
        .strip_suffix(suffix.as_str())
        .unwrap_or(&sample.goal_text)
        .trim_end();
    let texts = match provider.paraphrase(bare) {
        Ok(t) => t,
        Err(e) => {
            warn!("paraphrase provider failed on {}: {e}", sample.sample_id);
            return ParaphraseResult {
                variants: Vec::new(),
                provider_absent: false,
            };
        }
    };
    if texts.len() > MAX_PARAPHRASES {
        warn!(
            "paraphrase provider returned {} texts for {}; keeping {MAX_PARAPHRASES}",
            texts.len(),
            sample.sample_id
        );
    }
    let mut variants = Vec::new();
    for text in texts.into_iter().take(MAX_PARAPHRASES) {
        if text.trim().is_empty() {
            warn!("rejected empty paraphrase for {}", sample.sample_id);
            continue;
        }
        let mut v = sample.clone();
        v.sample_id = format!("{}-p{}", sample.sample_id, variants.len() + 1);
        v.goal_text = with_grounding_suffix(text.trim());
        v.paraphrase_of = Some(sample.sample_id.clone());
        variants.push(v);
    }
    ParaphraseResult {
        variants,
        provider_absent: false,
    }
}

/// Sampled episode with its oracle trajectory and auxiliary draws.
struct EpisodePlan {
    spec: EpisodeSpec,
    snapshots: Vec<SceneState>,
    actions: Vec<Action>,
    aux: Vec<Option<AuxPredicate>>,
}

impl EpisodePlan {
    fn sample_count(&self) -> u64 {
        (self.actions.len() + 1 + self.aux.iter().flatten().count()) as u64
    }
}

fn plan_episode(config: &DatasetConfig, index: u64) -> Result<EpisodePlan, DatasetError> {
    let variant = config.variants[(index % config.variants.len() as u64) as usize];
    let mut spec = sample_episode(config.seed, index, variant, &config.sampler)?;
    spec.episode_id = index;
    let scene = spec.scene()?;
    let rollout = oracle_rollout(&spec.task, &scene)?;
    let actions: Vec<Action> = rollout.steps.iter().map(|s| s.choice.action).collect();
    let mut snapshots: Vec<SceneState> = rollout.steps.into_iter().map(|s| s.state).collect();
    snapshots.push(rollout.final_state);
    let p = config.aux_probability();
    let aux = snapshots
        .iter()
        .enumerate()
        .map(|(t, state)| {
            let mut r = rng::stream(spec.seed, "dataset/aux", t as u64);
            if !r.random_bool(p.min(1.0)) {
                return None;
            }
            let options: Vec<AuxPredicate> = AuxPredicate::ALL
                .into_iter()
                .filter(|a| !a.entities(state).is_empty())
                .collect();
            (!options.is_empty()).then(|| options[r.random_range(0..options.len())])
        })
        .collect();
    Ok(EpisodePlan {
        spec,
        snapshots,
        actions,
        aux,
    })
}

/// Assigns whole episodes to the test split, in a seeded order, whenever
/// doing so moves the test share of samples closer to `fraction`.
pub fn assign_splits(seed: u64, sample_counts: &[u64], fraction: f64) -> Vec<Split> {
    let total: u64 = sample_counts.iter().sum();
    let target = fraction * total as f64;
    let mut order: Vec<usize> = (0..sample_counts.len()).collect();
    order.shuffle(&mut rng::stream(seed, "dataset/split", 0));
    let mut in_test = vec![false; sample_counts.len()];
    let mut test = 0u64;
    for &i in &order {
        if (test + sample_counts[i]) as f64 <= target {
            in_test[i] = true;
            test += sample_counts[i];
        }
    }
    let err = |t: i64| (t as f64 - target).abs();
    // Local search over single moves and train/test swaps.
    loop {
        let mut best = (err(test as i64), None);
        for &i in &order {
            let c = sample_counts[i] as i64;
            let delta = if in_test[i] { -c } else { c };
            let e = err(test as i64 + delta);
            if e < best.0 - 1e-9 {
                best = (e, Some((i, None)));
            }
            if in_test[i] {
                continue;
            }
            for &j in order.iter().filter(|&&j| in_test[j]) {
                let e = err(test as i64 + c - sample_counts[j] as i64);
                if e < best.0 - 1e-9 {
                    best = (e, Some((i, Some(j))));
                }
            }
        }
        match best.1 {
            None => break,
            Some((i, j)) => {
                for k in std::iter::once(i).chain(j) {
                    in_test[k] = !in_test[k];
                    if in_test[k] {
                        test += sample_counts[k];
                    } else {
                        test -= sample_counts[k];
                    }
                }
            }
        }
    }
    in_test
        .into_iter()
        .map(|t| if t { Split::Test } else { Split::Train })
        .collect()
}

fn episode_dir(id: u64) -> String {
    format!("episodes/{id:06}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn emit_episode(
    root: &Path,
    config: &DatasetConfig,
    plan: &EpisodePlan,
    split: Split,
    provider: Option<&dyn ParaphraseProvider>,
) -> Result<EpisodeEntry, DatasetError> {
    let id = plan.spec.episode_id;
    let rel = episode_dir(id);
    let dir = root.join(&rel);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let goal_text = plan.spec.task.prompt();
    let mut lines = String::new();
    let mut count = 0u64;
    let mut push = |s: &TrainingSample, lines: &mut String| {
        lines.push_str(&canon::to_line(s).expect("sample serializes"));
        count += 1;
    };
    for (t, state) in plan.snapshots.iter().enumerate() {
        let scene_rel = format!("{rel}/scene-{t:03}.json");
        write_file(
            &root.join(&scene_rel),
            canon::to_line(state).expect("state serializes").as_bytes(),
        )?;
        let cloud = synthesize_cloud(
            state,
            &config.cloud,
            rng::derive_seed(plan.spec.seed, "cloud", t as u64),
        );
        let cloud_rel = config
            .write_clouds
            .then(|| format!("{rel}/cloud-{t:03}.bbpc"));
        if let Some(c) = &cloud_rel {
            let path = root.join(c);
            let f = fs::File::create(&path).map_err(io_err(&path))?;
            cloud
                .write_binary(BufWriter::new(f))
                .map_err(|source| DatasetError::Cloud { path, source })?;
        }
        let base = |step_kind: &str, kind: SampleKind| TrainingSample {
            sample_id: format!("{id:06}-{t:03}-{step_kind}"),
            episode_id: id,
            step: t as u32,
            split,
            kind,
            scene: scene_rel.clone(),
            cloud: cloud_rel.clone(),
            rig: "rig.json".into(),
            goal_text: goal_text.clone(),
            pick_mask: Mask::empty(cloud.len()),
            target_mask: Mask::empty(cloud.len()),
            done_probability: 0.0,
            action: None,
            paraphrase_of: None,
        };
        let main = match plan.actions.get(t) {
            Some(action) => {
                let gt = gt_action_masks(&cloud, state, action)?;
                TrainingSample {
                    pick_mask: gt.pick_mask,
                    target_mask: gt.target_mask,
                    action: Some(*action),
                    ..base("action", SampleKind::Action)
                }
            }
            None => {
                let gt = terminal_masks(&cloud);
                TrainingSample {
                    pick_mask: gt.pick_mask,
                    target_mask: gt.target_mask,
                    done_probability: gt.done_probability,
                    ..base("terminal", SampleKind::Terminal)
                }
            }
        };
        push(&main, &mut lines);
        if main.kind == SampleKind::Action {
            for v in paraphrase_hook(&main, provider).variants {
                push(&v, &mut lines);
            }
        }
        if let Some(pred) = plan.aux[t] {
            let aux = TrainingSample {
                goal_text: pred.instruction().into(),
                pick_mask: pred.mask(&cloud, state),
                ..base("aux", SampleKind::Auxiliary { predicate: pred })
            };
            push(&aux, &mut lines);
        }
    }
    let samples_path = dir.join("samples.ndjson");
    write_file(&samples_path, lines.as_bytes())?;
    Ok(EpisodeEntry {
        episode_id: id,
        dir: rel,
        seed: plan.spec.seed,
        variant: plan.spec.task.variant,
        num_boxes: plan.spec.num_boxes(),
        split,
        samples: count,
        samples_sha256: canon::sha256_hex(lines.as_bytes()),
    })
}

/// Writes a dataset under `out`. Episodes are planned and written in
/// parallel; the manifest is written last.
pub fn emit_dataset(
    config: &DatasetConfig,
    out: &Path,
    provider: Option<&dyn ParaphraseProvider>,
) -> Result<Manifest, DatasetError> {
    config.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let plans: Vec<EpisodePlan> = (0..config.episodes as u64)
        .into_par_iter()
        .map(|i| plan_episode(config, i))
        .collect::<Result<_, _>>()?;
    // Paraphrases are excluded from the split balance; they follow their
    // source sample's episode.
    let counts: Vec<u64> = plans.iter().map(EpisodePlan::sample_count).collect();
    let splits = assign_splits(config.seed, &counts, config.test_fraction);
    let rig: Vec<CameraView> = camera_rig(&config.rig);
    write_file(
        &out.join("rig.json"),
        canon::to_line(&rig).expect("rig serializes").as_bytes(),
    )?;
    let episodes: Vec<EpisodeEntry> = plans
        .par_iter()
        .zip(splits.par_iter())
        .map(|(plan, &split)| emit_episode(out, config, plan, split, provider))
        .collect::<Result<_, _>>()?;
    let mut total = SampleCounts::default();
    for e in &episodes {
        let path = out.join(&e.dir).join("samples.ndjson");
        for s in read_samples(&path)? {
            total.add(&s);
        }
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION.into(),
        config: config.clone(),
        config_digest: canon::digest(config).expect("config serializes"),
        aux_probability: config.aux_probability(),
        paraphrase_provider: provider.map(|p| p.name()),
        counts: total,
        train_episodes: episodes
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.episode_id)
            .collect(),
        test_episodes: episodes
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| e.episode_id)
            .collect(),
        episodes,
    };
    let text = canon::to_line(&manifest).expect("manifest serializes");
    write_file(&out.join("manifest.json"), text.as_bytes())?;
    // Hand back the persisted form so callers see what a loader will see.
    Ok(serde_json::from_str(&text).expect("canonical manifest parses"))
}

fn read_samples(path: &Path) -> Result<Vec<TrainingSample>, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let s: TrainingSample = serde_json::from_str(&line).map_err(|e| DatasetError::Corrupt {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// A validated dataset on disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<TrainingSample>,
}

/// Loads and validates a dataset: schema version, per-episode digests,
/// canonical re-encoding of every sample, and counts against the manifest.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset, DatasetError> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let version: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DatasetError::Corrupt {
            path: manifest_path.clone(),
            detail: e.to_string(),
        })?;
    match version.get("schema_version").and_then(|v| v.as_str()) {
        Some(DATASET_SCHEMA_VERSION) => {}
        other => {
            return Err(DatasetError::SchemaMismatch(format!(
                "found {other:?}, supported {DATASET_SCHEMA_VERSION:?}"
            )))
        }
    }
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Corrupt {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;
    let mut samples = Vec::new();
    let mut counts = SampleCounts::default();
    for e in &manifest.episodes {
        let path = root.join(&e.dir).join("samples.ndjson");
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let corrupt = |detail: String| DatasetError::Corrupt {
            path: path.clone(),
            detail,
        };
        if canon::sha256_hex(&bytes) != e.samples_sha256 {
            return Err(corrupt("digest does not match manifest".into()));
        }
        let loaded = read_samples(&path)?;
        let reencoded: String = loaded
            .iter()
            .map(|s| canon::to_line(s).expect("sample serializes"))
            .collect();
        if reencoded.as_bytes() != bytes.as_slice() {
            return Err(corrupt("samples are not canonical".into()));
        }
        if loaded.len() as u64 != e.samples {
            return Err(corrupt(format!(
                "{} samples, manifest says {}",
                loaded.len(),
                e.samples
            )));
        }
        for s in &loaded {
            if s.episode_id != e.episode_id || s.split != e.split {
                return Err(corrupt(format!(
                    "sample {} disagrees with its episode entry",
                    s.sample_id
                )));
            }
            counts.add(s);
        }
        samples.extend(loaded);
    }
    if counts != manifest.counts {
        return Err(DatasetError::Corrupt {
            path: manifest_path,
            detail: format!(
                "counts {counts:?} differ from manifest {:?}",
                manifest.counts
            ),
        });
    }
    Ok(LoadedDataset {
        root: root.to_path_buf(),
        manifest,
        samples,
    })
}

impl LoadedDataset {
    pub fn scene(&self, sample: &TrainingSample) -> Result<SceneState, DatasetError> {
        let path = self.root.join(&sample.scene);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Corrupt {
            path,
            detail: e.to_string(),
        })
    }

    pub fn cloud(
        &self,
        sample: &TrainingSample,
    ) -> Result<Option<LabeledPointCloud>, DatasetError> {
        let Some(rel) = &sample.cloud else {
            return Ok(None);
        };
        let path = self.root.join(rel);
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        LabeledPointCloud::read_binary(BufReader::new(f))
            .map(Some)
            .map_err(|source| DatasetError::Cloud { path, source })
    }

    pub fn rig(&self) -> Result<Vec<CameraView>, DatasetError> {
        let path = self.root.join("rig.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Corrupt {
            path,
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aux_probability_matches_rate() {
        let c = DatasetConfig::default();
        let p = c.aux_probability();
        assert!((p / (1.0 + p) - 0.10).abs() < 1e-12);
    }

    #[test]
    fn split_balancing_hits_fraction() {
        let counts: Vec<u64> = (0..300).map(|i| 2 + (i * 7 % 29)).collect();
        let splits = assign_splits(3, &counts, DEFAULT_TEST_FRACTION);
        let total: u64 = counts.iter().sum();
        let test: u64 = counts
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == Split::Test)
            .map(|(c, _)| c)
            .sum();
        let frac = test as f64 / total as f64;
        assert!((frac / DEFAULT_TEST_FRACTION - 1.0).abs() < 0.01, "{frac}");
        assert_eq!(splits, assign_splits(3, &counts, DEFAULT_TEST_FRACTION));
    }

    struct Fixed(Vec<String>);
    impl ParaphraseProvider for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn paraphrase(&self, _: &str) -> Result<Vec<String>, String> {
            Ok(self.0.clone())
        }
    }

    struct Broken;
    impl ParaphraseProvider for Broken {
        fn name(&self) -> String {
            "broken".into()
        }
        fn paraphrase(&self, _: &str) -> Result<Vec<String>, String> {
            Err("down".into())
        }
    }

    fn sample() -> TrainingSample {
        TrainingSample {
            sample_id: "000001-000-action".into(),
            episode_id: 1,
            step: 0,
            split: Split::Train,
            kind: SampleKind::Action,
            scene: "s".into(),
            cloud: None,
            rig: "rig.json".into(),
            goal_text: with_grounding_suffix("Place every box."),
            pick_mask: Mask::from_indices(4, [1]),
            target_mask: Mask::from_indices(4, [2, 3]),
            done_probability: 0.0,
            action: None,
            paraphrase_of: None,
        }
    }

    #[test]
    fn paraphrase_hook_contract() {
        let s = sample();
        let none = paraphrase_hook(&s, None);
        assert!(none.provider_absent && none.variants.is_empty());

        let three = Fixed(vec![
            "Put all boxes away.".into(),
            "Store each box.".into(),
            "Shelve the boxes.".into(),
        ]);
        let r = paraphrase_hook(&s, Some(&three));
        assert_eq!(r.variants.len(), 3);
        let suffix = &catalog().grounding_suffix;
        for v in &r.variants {
            assert!(v.goal_text.ends_with(suffix.as_str()));
            assert_eq!(v.pick_mask, s.pick_mask);
            assert_eq!(v.target_mask, s.target_mask);
            assert_eq!(v.paraphrase_of.as_deref(), Some(s.sample_id.as_str()));
        }

        let with_empty = Fixed(vec![
            "".into(),
            "  ".into(),
            "Stow the boxes.".into(),
            "a".into(),
            "b".into(),
        ]);
        assert_eq!(paraphrase_hook(&s, Some(&with_empty)).variants.len(), 1);
        assert!(paraphrase_hook(&s, Some(&Broken)).variants.is_empty());
    }

    #[test]
    fn command_paraphraser_reads_lines() {
        let p = CommandParaphraser {
            command: "read x; echo \"A: $x\"; echo \"B: $x\"".into(),
        };
        assert_eq!(
            p.paraphrase("hi").unwrap(),
            vec!["A: hi".to_string(), "B: hi".to_string()]
        );
    }

    #[test]
    fn aux_texts_are_fixed() {
        let texts: Vec<&str> = AuxPredicate::ALL.iter().map(|a| a.instruction()).collect();
        assert_eq!(
            texts,
            [
                "all free placement cells",
                "all placed boxes",
                "boxes in stacks",
                "accessible boxes",
                "all unplaced boxes"
            ]
        );
    }
}
