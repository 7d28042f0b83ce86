//! The `generate`, `train`, `ablate` and `evaluate` subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cycda::autodiff::Params;
use cycda::models::{ImageModel, ModelDims, VideoModel};
use cycda::pipeline::{
    evaluate, evaluate_image_model, run_ablation_on, run_iterations, run_prefix, AblationCase, CycleState,
    EvalReport, MixedSourceData, RunData, Stage3Strategy, StageConfig, StageRecord,
};
use cycda::pseudolabel::AggregationStrategy;
use cycda::synthdata::{generate, BenchmarkSpec, SyntheticDataset};

use crate::config::{check_dims, ExperimentConfig};
use crate::error::CliError;
use crate::records::{gnuplot_curves, summary_table, write_file, MetricsRecord, MetricsWriter, SummaryRow};

/// Command-line values that replace the corresponding config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(path) = &self.dataset {
            config.dataset = Some(path.clone());
            config.benchmark = None;
        }
    }
}

/// Writes a dataset generated from `spec` to `out`, plus a tab-separated
/// metadata listing next to it.
pub fn cmd_generate(spec: &BenchmarkSpec, out: &Path, seed: u64) -> Result<SyntheticDataset, CliError> {
    spec.validate()
        .map_err(|e| CliError::Validation(format!("benchmark: {e}")))?;
    let dataset = generate(spec, seed)?;
    write_file(out, dataset.to_bytes())?;
    let mut meta = Vec::new();
    dataset.write_metadata(&mut meta)?;
    write_file(&out.with_extension("tsv"), meta)?;
    Ok(dataset)
}

/// Reads a benchmark spec file; `None` gives the default benchmark.
pub fn load_spec(path: Option<&Path>) -> Result<BenchmarkSpec, CliError> {
    let Some(path) = path else {
        return Ok(BenchmarkSpec::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read spec {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("spec: {}", e.message())))
}

/// The dataset a seed trains on.
enum DataSource {
    Generated(BenchmarkSpec),
    File(Box<SyntheticDataset>),
}

impl DataSource {
    fn open(config: &ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        match (&config.dataset, &config.benchmark) {
            (Some(path), _) => {
                let ds = SyntheticDataset::load(path)
                    .map_err(|e| CliError::Validation(format!("dataset {}: {e}", path.display())))?;
                check_dims(&config.stages, &ds.spec)?;
                Ok(DataSource::File(Box::new(ds)))
            }
            (None, Some(spec)) => Ok(DataSource::Generated(spec.clone())),
            (None, None) => unreachable!("validated config has a data source"),
        }
    }

    fn for_seed(&self, seed: u64) -> Result<(SyntheticDataset, bool), CliError> {
        match self {
            DataSource::Generated(spec) => Ok((generate(spec, seed)?, true)),
            DataSource::File(ds) => Ok(((**ds).clone(), false)),
        }
    }
}

/// Runs one ablation case on one seed, passing each finished stage record
/// and the seconds elapsed to `emit` as soon as it is available.
///
/// Case F runs `n_iterations` cycles; cases A to E ignore it.
pub fn run_case(
    stages: &StageConfig,
    case: AblationCase,
    n_iterations: usize,
    data: &RunData,
    seed: u64,
    mut emit: impl FnMut(&StageRecord, f64) -> Result<(), CliError>,
) -> Result<CycleState, CliError> {
    let start = Instant::now();
    if case != AblationCase::F {
        let mut runs = run_ablation_on(stages, data, &[case], seed)?;
        let state = runs.remove(&case).expect("requested case is returned");
        let t = start.elapsed().as_secs_f64();
        for r in &state.history {
            emit(r, t)?;
        }
        return Ok(state);
    }
    let mut state = run_prefix(stages, data, seed)?;
    let t = start.elapsed().as_secs_f64();
    for r in &state.history {
        emit(r, t)?;
    }
    let stage1_model = state.image_model.clone();
    for _ in 0..n_iterations {
        let done = state.history.len();
        state = run_iterations(stages, data, state, &stage1_model, 1, seed)?;
        let t = start.elapsed().as_secs_f64();
        for r in &state.history[done..] {
            emit(r, t)?;
        }
    }
    Ok(state)
}

fn source_for(config: &ExperimentConfig, dataset: &SyntheticDataset) -> Result<MixedSourceData, CliError> {
    Ok(MixedSourceData::with_video_fraction(
        dataset.source_images.clone(),
        &dataset.source_videos,
        config.source_video_fraction,
    )?)
}

fn run_data<'a>(dataset: &'a SyntheticDataset, source: &'a MixedSourceData, confusable: &'a [usize]) -> RunData<'a> {
    RunData {
        source,
        target: &dataset.target_train,
        hidden: dataset.hidden_labels(),
        test: &dataset.target_test,
        confusable,
    }
}

/// Result of one seed of `train`.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub state: CycleState,
}

/// Paths of the files `train` writes.
pub struct TrainLayout {
    pub root: PathBuf,
}

impl TrainLayout {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.tsv")
    }
    pub fn metrics(&self, seed: u64) -> PathBuf {
        self.root.join("metrics").join(format!("seed-{seed}.jsonl"))
    }
    pub fn curves(&self, seed: u64) -> PathBuf {
        self.root.join("curves").join(format!("seed-{seed}.dat"))
    }
    pub fn dataset(&self, seed: u64) -> PathBuf {
        self.root.join("datasets").join(format!("seed-{seed}.bin"))
    }
    pub fn image_checkpoint(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("seed-{seed}")).join("image.ckpt")
    }
    pub fn video_checkpoint(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("seed-{seed}")).join("video.ckpt")
    }
    /// The checkpoint of the model whose accuracy the run reports last.
    pub fn final_checkpoint(&self, seed: u64, state: &CycleState) -> PathBuf {
        if state.video_model.is_some() {
            self.video_checkpoint(seed)
        } else {
            self.image_checkpoint(seed)
        }
    }
}

/// Trains every seed of `config` and writes, under `out_dir`:
///
/// * `config.toml`, the resolved config,
/// * `metrics/seed-S.jsonl`, the metrics records,
/// * `curves/seed-S.dat`, loss curves as gnuplot blocks,
/// * `checkpoints/seed-S/{image,video}.ckpt`, the final models,
/// * `datasets/seed-S.bin`, the generated dataset (generated data only),
/// * `summary.tsv`, one row per seed and a mean row.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Vec<SeedRun>, CliError> {
    let source = DataSource::open(config)?;
    let layout = TrainLayout {
        root: config.out_dir.clone(),
    };
    write_file(&layout.config(), config.to_toml()?)?;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let (dataset, generated) = source.for_seed(seed)?;
        if generated {
            write_file(&layout.dataset(seed), dataset.to_bytes())?;
        }
        let mixed = source_for(config, &dataset)?;
        let confusable = dataset.spec.confusable_classes();
        let data = run_data(&dataset, &mixed, &confusable);
        let run_id = format!("case-{}/seed-{seed}", config.case);
        let mut writer = MetricsWriter::create(&layout.metrics(seed))?;
        let state = run_case(&config.stages, config.case, config.n_iterations, &data, seed, |r, t| {
            for rec in MetricsRecord::from_stage(&run_id, r, t) {
                writer.write(&rec)?;
            }
            Ok(())
        })?;
        writer.finish()?;
        write_file(&layout.curves(seed), gnuplot_curves(&run_id, &state.history))?;
        save_params(&state.image_model.params, &layout.image_checkpoint(seed))?;
        if let Some(video) = &state.video_model {
            save_params(&video.params, &layout.video_checkpoint(seed))?;
        }
        runs.push(SeedRun { seed, state });
    }
    let rows: Vec<SummaryRow> = runs.iter().map(|r| SummaryRow::from_state(r.seed, &r.state)).collect();
    write_file(&layout.summary(), summary_table(config.case, config.n_iterations, &rows))?;
    Ok(runs)
}

fn save_params(params: &Params, path: &Path) -> Result<(), CliError> {
    write_file(path, params.to_bytes())
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Case(AblationCase),
    /// Full cycle with this stage-3 strategy.
    Strategy(Stage3Strategy),
    /// Full cycle with this pseudo-label aggregation.
    Aggregation(AggregationStrategy),
}

impl Variant {
    pub fn all() -> Vec<Variant> {
        let mut v: Vec<Variant> = AblationCase::ALL.into_iter().map(Variant::Case).collect();
        v.extend(Stage3Strategy::ALL.into_iter().map(Variant::Strategy));
        v.extend(AggregationStrategy::ALL.into_iter().map(Variant::Aggregation));
        v
    }

    /// Parses a comma-separated list of `case=X`, `strategy=NAME`,
    /// `aggregation=NAME` or the groups `cases`, `strategies`,
    /// `aggregations` and `all`.
    pub fn parse_list(text: &str) -> Result<Vec<Variant>, CliError> {
        let mut out = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let bad = |e: cycda::Error| CliError::Validation(format!("variant `{item}`: {e}"));
            let parsed: Vec<Variant> = match item.split_once('=') {
                Some(("case", v)) => vec![Variant::Case(v.parse().map_err(bad)?)],
                Some(("strategy", v)) => vec![Variant::Strategy(v.parse().map_err(bad)?)],
                Some(("aggregation", v)) => vec![Variant::Aggregation(v.parse().map_err(bad)?)],
                None if item == "all" => Variant::all(),
                None if item == "cases" => AblationCase::ALL.into_iter().map(Variant::Case).collect(),
                None if item == "strategies" => Stage3Strategy::ALL.into_iter().map(Variant::Strategy).collect(),
                None if item == "aggregations" => AggregationStrategy::ALL.into_iter().map(Variant::Aggregation).collect(),
                _ => {
                    return Err(CliError::Validation(format!(
                        "variant `{item}`: expected case=X, strategy=NAME, aggregation=NAME, cases, strategies, aggregations or all"
                    )))
                }
            };
            for v in parsed {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Validation("no variant requested".into()));
        }
        Ok(out)
    }

    pub fn label(self) -> String {
        match self {
            Variant::Case(c) => format!("case {c}: {}", c.describe()),
            Variant::Strategy(s) => format!("stage-3 strategy {s}"),
            Variant::Aggregation(a) => format!("aggregation {a}"),
        }
    }

    fn slug(self) -> String {
        match self {
            Variant::Case(c) => format!("case-{c}"),
            Variant::Strategy(s) => format!("strategy-{s}"),
            Variant::Aggregation(a) => format!("aggregation-{a}"),
        }
    }

    /// True for the strategy and aggregation the stage defaults select.
    pub fn is_default(self) -> bool {
        let d = StageConfig::default();
        match self {
            Variant::Case(_) => false,
            Variant::Strategy(s) => s == d.stage3_strategy,
            Variant::Aggregation(a) => a == d.aggregation,
        }
    }

    /// Stage config and case this variant runs from the base config.
    fn setup(self, base: &StageConfig) -> (StageConfig, AblationCase) {
        let mut stages = base.clone();
        match self {
            Variant::Case(c) => return (stages, c),
            Variant::Strategy(s) => stages.stage3_strategy = s,
            Variant::Aggregation(a) => stages.aggregation = a,
        }
        (stages, AblationCase::F)
    }
}

/// Final test accuracy of each variant for each seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<(Variant, Vec<f64>)>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant) -> Option<&[f64]> {
        self.rows.iter().find(|(v, _)| *v == variant).map(|(_, a)| a.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("variant");
        for seed in &self.seeds {
            write!(s, "\tseed {seed}").unwrap();
        }
        s.push_str("\tmean\n");
        for (v, accs) in &self.rows {
            let mark = if v.is_default() { " (default)" } else { "" };
            write!(s, "{}{mark}", v.label()).unwrap();
            for a in accs {
                write!(s, "\t{a:.6}").unwrap();
            }
            writeln!(s, "\t{:.6}", accs.iter().sum::<f64>() / accs.len() as f64).unwrap();
        }
        s
    }

    /// Row index, mean, then one column per seed; the label is a comment.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::from("# row mean");
        for seed in &self.seeds {
            write!(s, " seed{seed}").unwrap();
        }
        s.push('\n');
        for (i, (v, accs)) in self.rows.iter().enumerate() {
            write!(s, "{i} {:.6}", accs.iter().sum::<f64>() / accs.len() as f64).unwrap();
            for a in accs {
                write!(s, " {a:.6}").unwrap();
            }
            writeln!(s, " # {}", v.label()).unwrap();
        }
        s
    }
}

/// Runs every requested variant on every seed and writes
/// `ablation.tsv`, `ablation.dat` and per-run metrics under
/// `out_dir/ablation/`. Variants that resolve to the same stage config
/// and case share one run.
pub fn cmd_ablate(config: &ExperimentConfig, variants: &[Variant]) -> Result<AblationTable, CliError> {
    let source = DataSource::open(config)?;
    let root = &config.out_dir;
    write_file(&root.join("config.toml"), config.to_toml()?)?;
    let mut rows: Vec<(Variant, Vec<f64>)> = variants.iter().map(|&v| (v, Vec::new())).collect();
    for &seed in &config.seeds {
        let (dataset, _) = source.for_seed(seed)?;
        let mixed = source_for(config, &dataset)?;
        let confusable = dataset.spec.confusable_classes();
        let data = run_data(&dataset, &mixed, &confusable);
        let mut done: BTreeMap<(String, AblationCase), f64> = BTreeMap::new();
        for (variant, accs) in rows.iter_mut() {
            let (stages, case) = variant.setup(&config.stages);
            let key = (toml::to_string(&stages).expect("stage config serializes"), case);
            if let Some(&acc) = done.get(&key) {
                accs.push(acc);
                continue;
            }
            let run_id = format!("{}/seed-{seed}", variant.slug());
            let mut writer = MetricsWriter::create(&root.join("ablation").join(format!("{run_id}.jsonl")))?;
            let state = run_case(&stages, case, config.n_iterations, &data, seed, |r, t| {
                for rec in MetricsRecord::from_stage(&run_id, r, t) {
                    writer.write(&rec)?;
                }
                Ok(())
            })?;
            writer.finish()?;
            let acc = state.final_accuracy().expect("every stage records test accuracy");
            done.insert(key, acc);
            accs.push(acc);
        }
    }
    let table = AblationTable {
        seeds: config.seeds.clone(),
        rows,
    };
    write_file(&root.join("ablation.tsv"), table.to_text())?;
    write_file(&root.join("ablation.dat"), table.to_gnuplot())?;
    Ok(table)
}

fn shape_of(params: &Params, name: &str) -> Result<(usize, usize), CliError> {
    let t = params
        .get(name)
        .ok_or_else(|| CliError::Validation(format!("checkpoint: missing parameter `{name}`")))?;
    if !t.is_matrix() {
        return Err(CliError::Validation(format!("checkpoint: `{name}` is not a matrix")));
    }
    Ok((t.rows(), t.cols()))
}

/// A model restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Image(ImageModel),
    Video(VideoModel),
}

impl Checkpoint {
    /// Reads a parameter file and infers the model dimensions from the
    /// parameter shapes; `frames` comes from the data it will see.
    pub fn load(path: &Path, frames: usize) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Validation(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let params =
            Params::from_bytes(&bytes).map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?;
        let bad = |e: cycda::Error| CliError::Validation(format!("checkpoint {}: {e}", path.display()));
        let defaults = ModelDims::default();
        if params.get("video.cls.w").is_some() {
            let (input_dim, video_hidden) = shape_of(&params, "video.enc.frame.w")?;
            let (feature_dim, classes) = shape_of(&params, "video.cls.w")?;
            let dims = ModelDims {
                input_dim,
                feature_dim,
                classes,
                frames,
                video_hidden,
                ..defaults
            };
            Ok(Checkpoint::Video(VideoModel::from_params(&dims, params).map_err(bad)?))
        } else {
            let (input_dim, image_hidden) = shape_of(&params, "image.enc.l1.w")?;
            let (feature_dim, classes) = shape_of(&params, "image.cls.w")?;
            let (_, disc_hidden) = shape_of(&params, "image.disc.l1.w")?;
            let dims = ModelDims {
                input_dim,
                feature_dim,
                classes,
                frames,
                image_hidden,
                disc_hidden,
                ..defaults
            };
            Ok(Checkpoint::Image(ImageModel::from_params(&dims, params).map_err(bad)?))
        }
    }

    pub fn dims(&self) -> &ModelDims {
        match self {
            Checkpoint::Image(m) => &m.dims,
            Checkpoint::Video(m) => &m.dims,
        }
    }
}

/// Evaluates a checkpoint on the test videos of a dataset file. Video
/// models classify whole clips; image models average frame probabilities,
/// which is how training reports their test accuracy.
pub fn cmd_evaluate(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let ds = SyntheticDataset::load(dataset)
        .map_err(|e| CliError::Validation(format!("dataset {}: {e}", dataset.display())))?;
    let model = Checkpoint::load(checkpoint, ds.spec.frames)?;
    let dims = model.dims();
    if dims.input_dim != ds.spec.input_dim || dims.classes != ds.spec.classes {
        return Err(CliError::Validation(format!(
            "checkpoint expects input_dim {} and {} classes, dataset has input_dim {} and {} classes",
            dims.input_dim, dims.classes, ds.spec.input_dim, ds.spec.classes
        )));
    }
    let report = match &model {
        Checkpoint::Image(m) => evaluate_image_model(m, &ds.target_test)?,
        Checkpoint::Video(m) => evaluate(m, &ds.target_test)?,
    };
    if let Some(dir) = out {
        write_file(&dir.join("evaluation.txt"), report.to_text())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_lists() {
        assert_eq!(Variant::parse_list("all").unwrap(), Variant::all());
        assert_eq!(
            Variant::parse_list("case=a, strategy=target_ce,case=A").unwrap(),
            vec![Variant::Case(AblationCase::A), Variant::Strategy(Stage3Strategy::TargetCe)]
        );
        assert_eq!(Variant::parse_list("aggregations").unwrap().len(), 3);
        for bad in ["", "case=Z", "strategy=x", "nonsense"] {
            assert_eq!(Variant::parse_list(bad).unwrap_err().exit_code(), 1, "{bad}");
        }
    }

    #[test]
    fn defaults_are_marked() {
        let table = AblationTable {
            seeds: vec![0],
            rows: AggregationStrategy::ALL
                .into_iter()
                .map(|a| (Variant::Aggregation(a), vec![0.5]))
                .collect(),
        };
        let text = table.to_text();
        assert!(text.contains("aggregation thresh_then_avg (default)\t0.500000\t0.500000"));
        assert_eq!(text.matches("(default)").count(), 1);
    }
}
