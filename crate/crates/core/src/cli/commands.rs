use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CheckArgs, CliError, Command, CommonArgs, EvalArgs, TrainArgs, EXIT_OK, EXIT_TOLERANCE};
use crate::cv::{self, FoldAssignment, GalleryConfig, GalleryMode, SplitTable, UnifiedTest};
use crate::embed::{self, EmbeddingSet, VariantKey};
use crate::ensemble::MissingVariantPolicy;
use crate::eval::{self, CollapseRule, EvalOptions, EvaluationReport};
use crate::losses::gradcheck;
use crate::seed::derive_seed;
use crate::synth::{self, LongTailSpec};
use crate::trainsim::{self, TrainSimConfig, TrainSimData};

pub(super) fn dispatch(command: Command) -> Result<i32, CliError> {
    let common = match &command {
        Command::Gen(a) => a,
        Command::Eval(a) | Command::Cv(a) => &a.common,
        Command::Trainsim(a) => &a.common,
        Command::Checkgrad(a) => &a.common,
    };
    let pool = common.pool()?;
    pool.install(|| match command {
        Command::Gen(a) => gen(&a),
        Command::Eval(a) => evaluate(&a, false),
        Command::Cv(a) => evaluate(&a, true),
        Command::Trainsim(a) => trainsim(&a),
        Command::Checkgrad(a) => checkgrad(&a),
    })
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
}

fn out_dir(common: &CommonArgs) -> Result<&Path, CliError> {
    let dir = common.out.as_deref().ok_or_else(|| CliError::usage("--out is required"))?;
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn reject_eval_flags(common: &CommonArgs, command: &str) -> Result<(), CliError> {
    for (set, flag) in [(common.variants.is_some(), "--variants"), (common.policy.is_some(), "--policy"), (common.k.is_some(), "--k")] {
        if set {
            return Err(CliError::usage(format!("{flag} is not used by {command}")));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn gen(args: &CommonArgs) -> Result<i32, CliError> {
    reject_eval_flags(args, "gen")?;
    let mut spec: LongTailSpec = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dir = out_dir(args)?;
    let dataset = synth::generate_dataset(&spec)?;
    for path in dataset.write_to_dir(dir)? {
        eprintln!("wrote {}", path.display());
    }
    let s = dataset.summary();
    println!(
        "disorders {} (frequent {}, rare {}), patients {}, images {}",
        s.disorders, s.frequent_disorders, s.rare_disorders, s.patients, s.images
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FoldSource {
    /// `fold<N>` labels from the split file.
    #[default]
    Splits,
    /// Fresh subject-level assignment from the run seed.
    Seeded,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    embeddings: Vec<PathBuf>,
    splits: Option<PathBuf>,
    mode: Option<GalleryMode>,
    held_fold: Option<usize>,
    exclusion: Option<bool>,
    unified_test: Option<UnifiedTest>,
    n_folds: Option<usize>,
    fold_source: FoldSource,
    variants: Option<Vec<String>>,
    policy: Option<MissingVariantPolicy>,
    ks: Option<Vec<usize>>,
    collapse: Option<CollapseRule>,
    seed: Option<u64>,
}

fn resolve(base: Option<&Path>, p: PathBuf) -> PathBuf {
    match base.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

fn parse_variants(list: &[String]) -> Result<Vec<VariantKey>, CliError> {
    if list.len() == 1 && list[0] == "all" {
        return Ok(Vec::new());
    }
    list.iter().map(|v| v.parse().map_err(|e| CliError::usage(format!("bad variant {v:?}: {e}")))).collect()
}

fn load_embeddings(paths: &[PathBuf]) -> Result<EmbeddingSet, CliError> {
    if paths.is_empty() {
        return Err(CliError::usage("no embedding files given (--embeddings or config `embeddings`)"));
    }
    let sets = paths
        .iter()
        .map(|p| {
            embed::read_embedding_path(p).map_err(|e| {
                let err = CliError::from(e);
                CliError { message: format!("{}: {}", p.display(), err.message), ..err }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EmbeddingSet::merge(&sets)?)
}

fn write_report(dir: &Path, stem: &str, report: &EvaluationReport) -> Result<(), CliError> {
    write_text(&dir.join(format!("{stem}.json")), &report.to_json())?;
    let csv = dir.join(format!("{stem}_images.csv"));
    eval::write_per_image_csv(report, fs::File::create(&csv)?)?;
    eprintln!("wrote {}", dir.join(format!("{stem}.json")).display());
    Ok(())
}

fn print_summary(label: &str, report: &EvaluationReport) {
    let parts: Vec<String> = report.per_k.iter().map(|(k, v)| format!("top-{k} {v:.4}")).collect();
    println!("{label}: {}", parts.join(", "));
}

fn evaluate(args: &EvalArgs, force_cv: bool) -> Result<i32, CliError> {
    let command = if force_cv { "cv" } else { "eval" };
    let config_path = args.common.config.as_deref();
    let file: EvalFile = read_config(config_path)?;

    let embeddings = match &args.embeddings {
        Some(p) => p.clone(),
        None => file.embeddings.into_iter().map(|p| resolve(config_path, p)).collect(),
    };
    let splits_path = args.splits.clone().or_else(|| file.splits.map(|p| resolve(config_path, p)));
    let default_mode = if force_cv { GalleryMode::RareCv } else { GalleryMode::Frequent };
    let mode = args.mode.or(file.mode).unwrap_or(default_mode);
    let held_fold = args.held_fold.or(file.held_fold);
    let n_folds = args.n_folds.or(file.n_folds).unwrap_or(10);
    let exclusion = !args.no_exclusion && file.exclusion.unwrap_or(true);
    let unified_test = args.unified_test.or(file.unified_test).unwrap_or_default();
    let seed = args.common.seed.or(file.seed);
    let variants = match args.common.variants.as_ref().or(file.variants.as_ref()) {
        Some(list) => parse_variants(list)?,
        None => Vec::new(),
    };
    let options = EvalOptions {
        variants,
        policy: args.common.policy.or(file.policy).unwrap_or_default(),
        ks: args.common.k.clone().or(file.ks).unwrap_or_else(|| eval::DEFAULT_KS.to_vec()),
        collapse: file.collapse.unwrap_or_default(),
        seed,
    };
    if force_cv && mode == GalleryMode::Frequent {
        return Err(CliError::usage("cv needs --mode rare_cv or unified"));
    }
    if force_cv && held_fold.is_some() {
        return Err(CliError::usage("cv runs every fold; use eval with --held-fold for one fold"));
    }
    if mode == GalleryMode::Frequent && held_fold.is_some() {
        return Err(CliError::usage("frequent mode takes no held fold"));
    }

    let dir = out_dir(&args.common)?;
    let set = load_embeddings(&embeddings)?;
    let splits = match &splits_path {
        Some(p) => SplitTable::parse(
            fs::File::open(p).map_err(|e| CliError::usage(format!("cannot read splits {}: {e}", p.display())))?,
        )?,
        None => SplitTable::new(),
    };
    let (frequent, rare) = if splits_path.is_some() {
        cv::partition_by_splits(&set, &splits)?
    } else if mode == GalleryMode::RareCv {
        (EmbeddingSet::new(set.dimension), set)
    } else {
        return Err(CliError::usage(format!("mode {mode:?} needs a split file")));
    };

    let folds = if mode == GalleryMode::Frequent {
        cv::assign_folds(&BTreeMap::new(), n_folds, 0)?
    } else {
        match file.fold_source {
            FoldSource::Splits if splits_path.is_some() => FoldAssignment::from_splits(&rare, &splits, n_folds)?,
            FoldSource::Splits => return Err(CliError::usage("fold labels need a split file, or set fold_source to seeded")),
            FoldSource::Seeded => {
                let root = seed.unwrap_or(0);
                cv::assign_folds(&cv::subjects_by_class(&rare), n_folds, derive_seed(root, "cv/folds"))?
            }
        }
    };
    let sources = cv::Sources { frequent: &frequent, splits: &splits, rare: &rare };
    let config = GalleryConfig { mode, held_fold, exclusion, unified_test };

    if mode == GalleryMode::Frequent || held_fold.is_some() {
        let (gallery, test) = cv::build_gallery(sources, &folds, &config)?;
        let report = eval::evaluate(&test, &gallery, &config, &options)?;
        write_report(dir, "report", &report)?;
        print_summary(command, &report);
        return Ok(EXIT_OK);
    }

    let result = cv::run_cv(sources, &folds, &config, &options)?;
    write_report(dir, "report", &result.pooled)?;
    let fold_dir = dir.join("folds");
    fs::create_dir_all(&fold_dir)?;
    for (i, report) in result.per_fold.iter().enumerate() {
        write_text(&fold_dir.join(format!("fold_{i:02}.json")), &report.to_json())?;
    }
    print_summary(&format!("{command} pooled over {n_folds} folds"), &result.pooled);
    Ok(EXIT_OK)
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    seed: u64,
    model: String,
    dataset: LongTailSpec,
    train: TrainSimConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self { seed: 0, model: "m1".into(), dataset: LongTailSpec::default(), train: TrainSimConfig::default() }
    }
}

fn trainsim(args: &TrainArgs) -> Result<i32, CliError> {
    reject_eval_flags(&args.common, "trainsim")?;
    let mut file: TrainFile = read_config(args.common.config.as_deref())?;
    let root = args.common.seed.unwrap_or(file.seed);
    file.dataset.seed = derive_seed(root, "trainsim/dataset");
    file.train.seed = derive_seed(root, "trainsim/train");
    if let Some(epochs) = args.epochs {
        file.train.epochs = epochs;
    }
    file.train.validate()?;
    let dir = out_dir(&args.common)?;

    let dataset = synth::generate_dataset(&file.dataset)?;
    if !dataset.model_ids().contains(&file.model) {
        return Err(CliError::usage(format!("model {} is not in the dataset", file.model)));
    }
    let data = TrainSimData::from_dataset(&dataset, &file.model)?;
    let outcome = trainsim::train_sim(&data, &file.train)?;

    let dataset_echo = serde_json::to_value(&file.dataset).expect("spec serializes");
    let stamp = |mut r: EvaluationReport| {
        r.seed = Some(root);
        r.config.seed = Some(root);
        r.config.extra.insert("dataset".into(), dataset_echo.clone());
        r.config.extra.insert("model".into(), file.model.clone().into());
        r
    };
    let phases = [
        ("before_seen", &outcome.before.seen),
        ("before_unseen", &outcome.before.unseen),
        ("after_seen", &outcome.after.seen),
        ("after_unseen", &outcome.after.unseen),
    ];
    for (stem, report) in phases {
        write_report(dir, stem, &stamp(report.clone()))?;
    }
    trainsim::write_log_csv(&outcome.log, fs::File::create(dir.join("train_log.csv"))?)?;
    outcome.model.write_dump(fs::File::create(dir.join("model.txt"))?)?;
    for (label, before, after) in [
        ("seen", &outcome.before.seen, &outcome.after.seen),
        ("unseen", &outcome.before.unseen, &outcome.after.unseen),
    ] {
        println!("{label} top-1: {:.4} -> {:.4}", before.per_k[&1], after.per_k[&1]);
    }
    Ok(EXIT_OK)
}

fn checkgrad(args: &CheckArgs) -> Result<i32, CliError> {
    reject_eval_flags(&args.common, "checkgrad")?;
    if args.common.config.is_some() {
        return Err(CliError::usage("checkgrad takes no config file"));
    }
    let seed = args.common.seed.unwrap_or(0);
    let summary = gradcheck::run_gradient_checks(seed, args.cases)?;
    println!("arcface max relative error {:.3e} (tolerance {:.0e})", summary.arcface_max_error, summary.arcface_tolerance);
    println!("wce max relative error {:.3e} (tolerance {:.0e})", summary.wce_max_error, summary.wce_tolerance);
    if let Some(dir) = &args.common.out {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        write_text(&dir.join("checkgrad.json"), &text)?;
    }
    if summary.passes() {
        println!("PASS");
        Ok(EXIT_OK)
    } else {
        println!("FAIL");
        Ok(EXIT_TOLERANCE)
    }
}
