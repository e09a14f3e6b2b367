//! `sama` command implementations: run configuration, run directories and
//! the datagen / train / eval / selfcheck drivers.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use sama_core::client::{CompletionClient, FixtureClient, HttpClient, Throttled};
use sama_core::datagen::dialogue::PromptTemplates;
use sama_core::datagen::record::write_jsonl;
use sama_core::datagen::som::Palette;
use sama_core::datagen::sources::{load_box_csv, load_mask_index, FilledBoxSegmenter, SourceKind};
use sama_core::datagen::{
    emit_jsonl, generate_synthetic_corpus, load_jsonl, run_pipeline, CorpusLedger, GroundedDialogueRecord,
    PipelineConfig, SyntheticConfig,
};
use sama_core::metrics::{evaluate, EvalPair, MetricOptions};
use sama_core::model::lm::LmConfig;
use sama_core::model::train::prepare_all;
use sama_core::model::{predict_record, train, Checkpoint, ModelConfig, SamaModel, TrainConfig, Vocab};
use sama_core::selfcheck;
use sama_core::stc_aggregator::AggregatorConfig;

pub const DEFAULT_SYNTHETIC_RECORDS: usize = 200;

/// Marks an error as the caller's fault (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// 1 for validation errors, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<sama_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub lm: LmConfig,
    pub frame_width: usize,
    pub frame_height: usize,
    pub patch_size: usize,
    pub num_keyframes: usize,
    pub max_new_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            lm: m.lm,
            frame_width: m.frame_width,
            frame_height: m.frame_height,
            patch_size: m.patch_size,
            num_keyframes: m.num_keyframes,
            max_new_tokens: m.max_new_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxCsvSource {
    pub path: PathBuf,
    pub frames_root: PathBuf,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of synthetic records; used instead of any source when set.
    pub synthetic: Option<usize>,
    pub scene: SyntheticConfig,
    pub train_jsonl: Option<PathBuf>,
    pub eval_jsonl: Option<PathBuf>,
    /// Directory that non-synthetic frame references are relative to.
    pub frames_root: Option<PathBuf>,
    pub mask_index: Vec<PathBuf>,
    pub box_csv: Vec<BoxCsvSource>,
    pub box_interval: usize,
    /// `None` filters single-object mask-index videos only; `true` filters
    /// every source kind; `false` keeps everything.
    pub filter_single_object: Option<bool>,
    pub palette: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Recorded annotation replies replayed instead of calling the service.
    pub fixture: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            scene: SyntheticConfig::default(),
            train_jsonl: None,
            eval_jsonl: None,
            frames_root: None,
            mask_index: Vec::new(),
            box_csv: Vec::new(),
            box_interval: PipelineConfig::default().box_interval,
            filter_single_object: None,
            palette: None,
            templates: None,
            fixture: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key_env: String,
    pub judge_endpoint: Option<String>,
    pub judge_model: String,
    pub judge_api_key_env: String,
    pub judge_fixture: Option<PathBuf>,
    pub max_concurrent: usize,
    pub min_interval_ms: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "annotator".into(),
            api_key_env: "SAMA_ANNOTATION_KEY".into(),
            judge_endpoint: None,
            judge_model: "judge".into(),
            judge_api_key_env: "SAMA_JUDGE_KEY".into(),
            judge_fixture: None,
            max_concurrent: 4,
            min_interval_ms: 0,
            max_retries: 3,
            backoff_ms: 200,
        }
    }
}

impl ClientConfig {
    fn throttle<C: CompletionClient>(&self, inner: C) -> Throttled<C> {
        Throttled::new(inner, self.max_concurrent, Duration::from_millis(self.min_interval_ms))
            .with_backoff(self.max_retries, Duration::from_millis(self.backoff_ms))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub aggregator: AggregatorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricOptions,
    pub client: ClientConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            aggregator: AggregatorConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics: MetricOptions::default(),
            client: ClientConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data and client paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in d.mask_index.iter_mut() {
            fix(p);
        }
        for b in d.box_csv.iter_mut() {
            fix(&mut b.path);
            fix(&mut b.frames_root);
        }
        for p in [
            &mut d.train_jsonl,
            &mut d.eval_jsonl,
            &mut d.frames_root,
            &mut d.palette,
            &mut d.templates,
            &mut d.fixture,
            &mut self.client.judge_fixture,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut aggregator = self.aggregator.clone();
        aggregator.enabled &= !self.train.ablate_stc;
        ModelConfig {
            aggregator,
            lm: m.lm.clone(),
            frame_width: m.frame_width,
            frame_height: m.frame_height,
            patch_size: m.patch_size,
            num_keyframes: m.num_keyframes,
            max_new_tokens: m.max_new_tokens,
        }
    }

    /// The single run seed also seeds training.
    pub fn finalize(&mut self) {
        self.train.seed = self.seed;
    }
}

/// `out/<command>-<timestamp>`, suffixed if it already exists; the effective
/// config is written to `config.toml` inside.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = cfg.out.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!(invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn annotation_client(cfg: &RunConfig) -> anyhow::Result<Box<dyn CompletionClient>> {
    if let Some(path) = &cfg.data.fixture {
        require(path, "fixture file")?;
        return Ok(Box::new(FixtureClient::load(path)?));
    }
    match &cfg.client.endpoint {
        Some(url) => Ok(Box::new(cfg.client.throttle(HttpClient::new(
            url.clone(),
            cfg.client.model.clone(),
            &cfg.client.api_key_env,
        )))),
        None => Err(invalid("annotation needs `data.fixture` or `client.endpoint`")),
    }
}

pub fn cmd_datagen(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let records = if let Some(n) = cfg.data.synthetic {
        cfg.data.scene.validate()?;
        let dir = create_run_dir(cfg, "datagen")?;
        let records = generate_synthetic_corpus(n, cfg.seed, &cfg.data.scene)?;
        (dir, records, Vec::new(), Vec::new())
    } else {
        if cfg.data.mask_index.is_empty() && cfg.data.box_csv.is_empty() {
            bail!(invalid("no sources: set `data.synthetic`, `data.mask_index` or `data.box_csv`"));
        }
        let mut sources = Vec::new();
        for p in &cfg.data.mask_index {
            require(p, "mask index")?;
            sources.extend(load_mask_index(p)?);
        }
        for b in &cfg.data.box_csv {
            require(&b.path, "box CSV")?;
            require(&b.frames_root, "frame directory")?;
            sources.extend(load_box_csv(&b.path, &b.frames_root, &b.source)?);
        }
        let client = annotation_client(cfg)?;
        let mut pcfg = PipelineConfig {
            box_interval: cfg.data.box_interval,
            ..PipelineConfig::default()
        };
        match cfg.data.filter_single_object {
            Some(true) => pcfg.filter_single_object = vec![SourceKind::MaskIndex, SourceKind::BoxCsv],
            Some(false) => pcfg.filter_single_object.clear(),
            None => {}
        }
        if let Some(p) = &cfg.data.palette {
            require(p, "palette")?;
            pcfg.palette = Palette::load(p)?;
        }
        if let Some(d) = &cfg.data.templates {
            require(d, "template directory")?;
            pcfg.templates = PromptTemplates::load_dir(d)?;
        }
        let dir = create_run_dir(cfg, "datagen")?;
        pcfg.som_dir = Some(dir.join("som"));
        let out = run_pipeline(sources, client.as_ref(), &FilledBoxSegmenter, &pcfg)?;
        (dir, out.records, out.dropped, out.flags)
    };
    let (dir, records, dropped, flags) = records;
    if records.is_empty() {
        warn!("no records were produced");
    }
    emit_jsonl(&records, &dir.join("corpus.jsonl"))?;
    let ledger = CorpusLedger::from_records(&records);
    fs::write(dir.join("ledger.txt"), ledger.render())?;
    write_json(&dir.join("ledger.json"), &ledger)?;
    write_json(&dir.join("dropped.json"), &dropped)?;
    write_json(&dir.join("pseudomask_flags.json"), &flags)?;
    print!("{}", ledger.render());
    info!("wrote {} records to {}", records.len(), dir.display());
    Ok(dir)
}

fn load_training_records(cfg: &RunConfig) -> anyhow::Result<Vec<GroundedDialogueRecord>> {
    match (&cfg.data.train_jsonl, cfg.data.synthetic) {
        (Some(p), _) => {
            require(p, "training JSONL")?;
            Ok(load_jsonl(p)?)
        }
        (None, n) => {
            cfg.data.scene.validate()?;
            Ok(generate_synthetic_corpus(n.unwrap_or(DEFAULT_SYNTHETIC_RECORDS), cfg.seed, &cfg.data.scene)?)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub records: usize,
    pub steps: usize,
    pub initial_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    pub ablate_stc: bool,
    pub trainable_scalars: usize,
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    cfg.train.validate()?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let records = load_training_records(cfg)?;
    if records.is_empty() {
        bail!(invalid("training set is empty"));
    }
    let dir = create_run_dir(cfg, "train")?;
    let vocab = Vocab::build(records.iter().flat_map(|r| r.conversation.iter().map(|t| t.text.as_str())));
    let mut model = SamaModel::new(model_cfg, vocab, cfg.seed)?;
    let data = prepare_all(&model, &records, cfg.data.frames_root.as_deref())?;
    info!("training on {} records for {} steps", records.len(), cfg.train.steps);
    let report = train(&mut model, &data, &cfg.train)?;
    report.write_csv(fs::File::create(dir.join("loss.csv"))?)?;
    Checkpoint::from_model(&model, &cfg.train).save(&dir.join("checkpoint.json"))?;
    let summary = TrainSummary {
        records: records.len(),
        steps: cfg.train.steps,
        initial_smoothed_loss: report.initial_smoothed,
        final_smoothed_loss: report.final_smoothed,
        ablate_stc: cfg.train.ablate_stc,
        trainable_scalars: model.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "smoothed loss {:.4} -> {:.4} over {} steps; checkpoint in {}",
        summary.initial_smoothed_loss,
        summary.final_smoothed_loss,
        summary.steps,
        dir.display()
    );
    Ok(dir)
}

fn judge_client(cfg: &RunConfig) -> anyhow::Result<Option<Box<dyn CompletionClient>>> {
    if let Some(p) = &cfg.client.judge_fixture {
        require(p, "judge fixture")?;
        return Ok(Some(Box::new(FixtureClient::load(p)?)));
    }
    Ok(cfg.client.judge_endpoint.as_ref().map(|url| {
        Box::new(cfg.client.throttle(HttpClient::new(
            url.clone(),
            cfg.client.judge_model.clone(),
            &cfg.client.judge_api_key_env,
        ))) as Box<dyn CompletionClient>
    }))
}

/// Scores `data.eval_jsonl`. With a checkpoint, predictions are generated
/// first; otherwise every record must already carry one.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<PathBuf> {
    let path = cfg
        .data
        .eval_jsonl
        .as_ref()
        .ok_or_else(|| invalid("eval needs `data.eval_jsonl` (or --data)"))?;
    require(path, "evaluation JSONL")?;
    let mut records = load_jsonl(path)?;
    let model = match checkpoint {
        Some(p) => {
            require(p, "checkpoint")?;
            Some(Checkpoint::load(p)?.into_model()?)
        }
        None => None,
    };
    let judge = judge_client(cfg)?;
    let dir = create_run_dir(cfg, "eval")?;
    if let Some(model) = &model {
        let preps = prepare_all(model, &records, cfg.data.frames_root.as_deref())?;
        for (r, p) in records.iter_mut().zip(&preps) {
            r.prediction = Some(predict_record(model, p)?);
        }
        write_jsonl(&records, std::io::BufWriter::new(fs::File::create(dir.join("predictions.jsonl"))?))?;
    }
    let pairs = records
        .iter()
        .map(|r| {
            if r.prediction.is_none() {
                return Err(invalid(format!("record `{}` has no prediction", r.video_id)));
            }
            EvalPair::from_record(r).map_err(anyhow::Error::from)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = evaluate(&pairs, &cfg.metrics, judge.as_deref())?;
    write_json(&dir.join("metrics.json"), &report)?;
    let table = report.render_table();
    fs::write(dir.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(dir)
}

/// Runs the self-checks; fails if any check fails.
pub fn cmd_selfcheck(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = create_run_dir(cfg, "selfcheck")?;
    let outcomes = selfcheck::run_all(cfg.seed);
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    write_json(&dir.join("selfcheck.json"), &outcomes)?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("self-check failed: {}", failed.join(", "));
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert!(RunConfig::parse("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n").is_err());
        let c = RunConfig::parse("seed = 3\n[train]\ntext_loss_weight = 1.25\n").unwrap();
        assert_eq!((c.seed, c.train.text_loss_weight), (3, 1.25));
    }

    #[test]
    fn ablation_disables_the_aggregator() {
        let mut cfg = RunConfig::default();
        assert!(cfg.model_config().aggregator.enabled);
        cfg.train.ablate_stc = true;
        assert!(!cfg.model_config().aggregator.enabled);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&invalid("x")), 1);
        assert_eq!(exit_code(&sama_core::Error::Config("x".into()).into()), 1);
        assert_eq!(exit_code(&sama_core::Error::Diverged { step: 3 }.into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("boom")), 2);
    }
}
