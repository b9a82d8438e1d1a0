use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use milgrad::data::{
    choose_planted_features, generate_synthetic, split_train_test, write_dataset, DataError, DatasetManifest,
    PlantedConfig, SlideBag, Split, DEFAULT_TEST_FRACTION,
};
use milgrad::eval::{compare_report, CompareReport, MethodAuc, ModelRun, MwuResult};
use milgrad::interpret::{
    max_activation_ascent, min_score_comparison, trace_slides, AscentConfig, InterpretError, DEFAULT_QUANTILE,
    DEFAULT_TILE_TOP,
};
use milgrad::model::{Activation, AggregatorConfig, ExtractorConfig, ModelConfig, ModelError};
use milgrad::pipeline::{
    build_heatmaps, canonicalize_orientation, explain, init_model, localization_by_method, ExplainConfig,
    FeaturesDocument, HeatmapRow, TILE_SCORE_METHOD,
};
use milgrad::training::{evaluate_classification, train, Optimizer, TrainConfig, TrainError};
use milgrad::WsiClassifier;

use crate::args::{
    Arch, AscentArgs, EvalArgs, ExplainArgs, ExtractorKind, GenDataArgs, HeatmapArgs, OptimizerKind, SplitArg,
    TrainArgs,
};
use crate::config::usage;

const POSITIVE_CLASS: usize = 1;

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value.clone().ok_or_else(|| usage(format!("missing --{flag}")))
}

fn split_of(arg: Option<SplitArg>, default: Split) -> Split {
    match arg {
        Some(SplitArg::Train) => Split::Train,
        Some(SplitArg::Test) => Split::Test,
        None => default,
    }
}

/// Accepts either a dataset directory or the manifest inside it.
fn open_dataset(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let (manifest_path, base) = if path.is_dir() {
        (path.join("manifest.json"), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let manifest = DatasetManifest::load(&manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    Ok((manifest, base))
}

fn load_split(path: &Path, split: Split) -> Result<(DatasetManifest, Vec<SlideBag>)> {
    let (manifest, base) = open_dataset(path)?;
    let bags = manifest
        .load_split(&base, split)
        .with_context(|| format!("loading {split} split"))?;
    if bags.is_empty() {
        bail!("the {split} split of {} is empty", path.display());
    }
    Ok((manifest, bags))
}

fn load_model(path: &Path) -> Result<WsiClassifier> {
    WsiClassifier::load_json(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(usage(format!("--class {class} is out of range for {classes} classes")));
    }
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let out = required(&args.out, "out")?;
    let defaults = PlantedConfig::default();
    let seed = args.seed.unwrap_or(defaults.seed);
    let dim = args.dim.unwrap_or(defaults.dim);
    let planted = args.planted.unwrap_or(defaults.planted_features.len());
    if planted == 0 || planted > dim {
        return Err(usage(format!("--planted must be between 1 and --dim ({dim}), got {planted}")));
    }
    let cfg = PlantedConfig {
        n_slides: args.slides.unwrap_or(defaults.n_slides),
        tiles_per_slide: args.tiles.unwrap_or(defaults.tiles_per_slide),
        dim,
        planted_features: choose_planted_features(dim, planted, seed),
        pos_tile_fraction: args.pos_fraction.unwrap_or(defaults.pos_tile_fraction),
        signal_shift: args.shift.unwrap_or(defaults.signal_shift),
        noise_sigma: args.noise.unwrap_or(defaults.noise_sigma),
        seed,
    };
    let bags = match generate_synthetic(&cfg) {
        Ok(b) => b,
        Err(DataError::InvalidConfig(msg)) => return Err(usage(msg)),
        Err(e) => return Err(e.into()),
    };
    let test_fraction = args.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
    let mut manifest = match split_train_test(&DatasetManifest::for_bags(&bags, 2)?, test_fraction, seed) {
        Ok(m) => m,
        Err(DataError::Split(msg)) => return Err(usage(msg)),
        Err(e) => return Err(e.into()),
    };
    manifest.planted = Some(cfg.clone());
    fs::create_dir_all(&out)?;
    write_dataset(&out, &manifest, &bags).with_context(|| format!("writing dataset to {}", out.display()))?;

    let positives = bags.iter().filter(|b| b.slide_label() == Some(1)).count();
    let n_test = manifest.entries_in(Split::Test).count();
    println!(
        "{} slides ({positives} positive), {} tiles each, dimension {}",
        bags.len(),
        cfg.tiles_per_slide,
        cfg.dim
    );
    println!("planted features {:?}", cfg.planted_features);
    println!("train {} / test {n_test}", bags.len() - n_test);
    println!("wrote {}", out.join("manifest.json").display());
    Ok(())
}

fn model_config(args: &TrainArgs, tile_dim: usize, classes: usize) -> ModelConfig {
    let defaults = ModelConfig::default();
    let (extractor, descriptor_dim) = match args.extractor.unwrap_or(ExtractorKind::Identity) {
        ExtractorKind::Identity => (ExtractorConfig::Identity, tile_dim),
        ExtractorKind::Mlp => (
            ExtractorConfig::Mlp {
                hidden: args.extractor_hidden.clone().unwrap_or_else(|| vec![64]),
                output_activation: Activation::Relu,
            },
            args.descriptor_dim.unwrap_or(tile_dim),
        ),
    };
    let aggregator = match args.arch.unwrap_or(Arch::Minmax) {
        Arch::Minmax => AggregatorConfig::min_max(args.r.unwrap_or(5)),
        Arch::Attention => match AggregatorConfig::attention() {
            AggregatorConfig::Attention { hidden, activation } => AggregatorConfig::Attention {
                hidden: args.attention_hidden.unwrap_or(hidden),
                activation,
            },
            other => other,
        },
    };
    ModelConfig {
        content_dim: tile_dim,
        descriptor_dim,
        classes,
        extractor,
        aggregator,
        decision_hidden: args.decision_hidden.clone().unwrap_or(defaults.decision_hidden),
        scorer_bias: defaults.scorer_bias,
    }
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let (manifest, base) = open_dataset(&data)?;
    let train_bags = manifest.load_split(&base, Split::Train)?;
    let test_bags = manifest.load_split(&base, Split::Test)?;
    if train_bags.is_empty() {
        bail!("the train split of {} is empty", data.display());
    }

    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        l2_weight_decay: args.l2.unwrap_or(defaults.l2_weight_decay),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        seed: args.seed.unwrap_or(defaults.seed),
        optimizer: match args.optimizer.unwrap_or(OptimizerKind::Adam) {
            OptimizerKind::Adam => Optimizer::adam(),
            OptimizerKind::Sgd => Optimizer::Sgd,
        },
    };
    if let Err(TrainError::InvalidConfig(msg)) = cfg.validate() {
        return Err(usage(msg));
    }
    let model_cfg = model_config(args, manifest.dims.tile_dim, manifest.dims.classes);
    let model = match init_model(model_cfg, cfg.seed) {
        Ok(m) => m,
        Err(ModelError::InvalidConfig(msg)) => return Err(usage(msg)),
        Err(e) => return Err(e.into()),
    };
    let dims = model.dims();
    log::info!(
        "model: {} content, {} descriptor, {} slide descriptor, {} classes",
        dims.content_dim,
        dims.descriptor_dim,
        dims.slide_dim,
        dims.classes
    );

    let outcome = train(model, &train_bags, &test_bags, &cfg)?;
    let mut model = outcome.model;
    if cfg.epochs > 0 && dims.classes > POSITIVE_CLASS && canonicalize_orientation(&mut model, &train_bags, POSITIVE_CLASS)? {
        log::info!("flipped tile score orientation");
    }

    fs::create_dir_all(&out)?;
    model.save_json(&out.join("model.json"))?;
    let mut history = BufWriter::new(File::create(out.join("history.jsonl"))?);
    for record in &outcome.history {
        writeln!(history, "{}", serde_json::to_string(record)?)?;
    }
    history.flush()?;

    let train_auc = evaluate_classification(&model, &train_bags).map(|e| e.auc).ok();
    let test_auc = if test_bags.is_empty() {
        None
    } else {
        evaluate_classification(&model, &test_bags).map(|e| e.auc).ok()
    };
    let show = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("trained {} epochs; train AUC {}, test AUC {}", cfg.epochs, show(train_auc), show(test_auc));
    println!("wrote {}", out.join("model.json").display());
    Ok(())
}

pub fn explain_cmd(args: &ExplainArgs) -> Result<()> {
    let data = required(&args.data, "data")?;
    let model_path = required(&args.model, "model")?;
    let out = required(&args.out, "out")?;
    let model = load_model(&model_path)?;
    if let Some(c) = args.class {
        check_class(c, model.dims().classes)?;
    }
    let quantile = args.quantile.unwrap_or(DEFAULT_QUANTILE);
    if !(0.0..1.0).contains(&quantile) {
        return Err(usage(format!("--quantile must lie in [0, 1), got {quantile}")));
    }
    let slide_dim = model.dims().slide_dim;
    if let Some(top) = args.slide_top {
        if top == 0 || top > slide_dim {
            return Err(usage(format!("--top-L must be between 1 and {slide_dim}, got {top}")));
        }
    }
    let descriptor_dim = model.dims().descriptor_dim;
    let tile_top = args.tile_top.unwrap_or(DEFAULT_TILE_TOP);
    if tile_top == 0 || tile_top > descriptor_dim {
        return Err(usage(format!("--top-l must be between 1 and {descriptor_dim}, got {tile_top}")));
    }
    let cfg = ExplainConfig {
        slide_top: args.slide_top,
        tile_top,
        quantile,
        class: args.class,
    };
    let (_, bags) = load_split(&data, split_of(args.split, Split::Train))?;
    let traces = trace_slides(&model, &bags)?;
    let doc = explain(&model, &traces, &cfg)?;
    write_json(&out, &doc)?;
    for c in &doc.classes {
        println!(
            "class {}: {} slides, {} tiles, features {:?}",
            c.class,
            c.slides.len(),
            c.contributing_tiles,
            c.features
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn ascent_cmd(args: &AscentArgs) -> Result<()> {
    let model_path = required(&args.model, "model")?;
    let out = required(&args.out, "out")?;
    let feature = required(&args.feature, "feature")?;
    let model = load_model(&model_path)?;
    if model.has_identity_extractor() {
        return Err(usage("ascent needs a model with an mlp extractor"));
    }
    let descriptor_dim = model.dims().descriptor_dim;
    if feature >= descriptor_dim {
        return Err(usage(format!("--feature must be below {descriptor_dim}, got {feature}")));
    }
    let defaults = AscentConfig::default();
    let cfg = AscentConfig {
        step: args.step.unwrap_or(defaults.step),
        max_iters: args.max_iters.unwrap_or(defaults.max_iters),
        tol: args.tol.unwrap_or(defaults.tol),
        seed: args.seed.unwrap_or(defaults.seed),
    };
    let result = max_activation_ascent(&model, feature, &cfg)?;
    write_json(&out, &result)?;
    println!(
        "feature {feature}: activation {:.6} -> {:.6} after {} iterations",
        result.trace.first().copied().unwrap_or(f64::NAN),
        result.trace.last().copied().unwrap_or(f64::NAN),
        result.iterations
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn heatmap_cmd(args: &HeatmapArgs) -> Result<()> {
    let data = required(&args.data, "data")?;
    let model_path = required(&args.model, "model")?;
    let features_path = required(&args.features, "features")?;
    let out = required(&args.out, "out")?;
    let model = load_model(&model_path)?;
    let doc: FeaturesDocument = serde_json::from_slice(
        &fs::read(&features_path).with_context(|| format!("reading {}", features_path.display()))?,
    )
    .with_context(|| format!("parsing {}", features_path.display()))?;
    let class = match (args.class, doc.classes.as_slice()) {
        (Some(c), _) => c,
        (None, [only]) => only.class,
        (None, _) => POSITIVE_CLASS,
    };
    check_class(class, model.dims().classes)?;
    let features = doc.class(class)?;

    let (_, bags) = load_split(&data, split_of(args.split, Split::Test))?;
    let traces = trace_slides(&model, &bags)?;
    let maps = build_heatmaps(&traces, features)?;
    for f in &maps.feature.dropped {
        log::warn!("feature {f} is constant on this split and was left out");
    }
    let rows = maps.rows(&bags);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(&out).with_context(|| format!("writing {}", out.display()))?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    println!("{} rows for class {class} over {} slides", rows.len(), bags.len());
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split: Split,
    localization: Vec<MethodAuc>,
    classification_auc: Option<f64>,
    /// Min-slot scores of predicted-positive slides against the rest.
    min_score_test: Option<MwuResult>,
    comparison: CompareReport,
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let data = required(&args.data, "data")?;
    let heatmaps = required(&args.heatmaps, "heatmaps")?;
    let out = required(&args.out, "out")?;
    let split = split_of(args.split, Split::Test);
    let (_, bags) = load_split(&data, split)?;

    let mut reader = csv::Reader::from_path(&heatmaps).with_context(|| format!("reading {}", heatmaps.display()))?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<HeatmapRow>, _>>()
        .with_context(|| format!("parsing {}", heatmaps.display()))?;
    if rows.is_empty() {
        bail!("{} has no rows", heatmaps.display());
    }
    let localization = localization_by_method(&rows, &bags)?;
    let class = rows[0].class;

    let (model_name, classification_auc, min_score_test) = match &args.model {
        Some(path) => {
            let model = load_model(path)?;
            let auc = evaluate_classification(&model, &bags)?.auc;
            let traces = trace_slides(&model, &bags)?;
            let mwu = match min_score_comparison(&model, &traces, class) {
                Ok(r) => Some(r),
                Err(InterpretError::NotMinMax) => None,
                Err(InterpretError::Eval(e)) => {
                    log::warn!("min-score comparison skipped: {e}");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            let name = if model.is_min_max() { "minmax" } else { "attention" };
            (name.to_string(), Some(auc), mwu)
        }
        None => ("model".to_string(), None, None),
    };
    let comparison = compare_report(&[ModelRun {
        model: model_name,
        classification_auc,
        baseline: args.baseline.clone().unwrap_or_else(|| TILE_SCORE_METHOD.to_string()),
        methods: localization.clone(),
    }])?;
    for row in &comparison.rows {
        let change = row
            .relative_improvement
            .map_or(String::new(), |r| format!(" ({r:+.2}% vs baseline)"));
        println!("{}: localization AUC {:.4}{change}", row.method, row.localization_auc);
    }
    if let Some(auc) = classification_auc {
        println!("classification AUC {auc:.4}");
    }
    if let Some(m) = &min_score_test {
        println!("min-score test p = {:.3e}", m.p_value);
    }
    write_json(
        &out,
        &EvalReport {
            split,
            localization,
            classification_auc,
            min_score_test,
            comparison,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
