//! End-to-end steps shared by the command-line tool and the benchmark
//! suite: orientation fixing after training, per-class explanations, heat-map
//! rows and localization scoring.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_synthetic, split_train_test, DataError, DatasetManifest, PlantedConfig, SlideBag, Split,
    DEFAULT_TEST_FRACTION,
};
use crate::eval::{localization_auc, EvalError, MethodAuc, MwuResult};
use crate::interpret::{
    compute_heatmap, default_slide_top, min_score_comparison, score_orientation, select_contributing_tiles,
    slide_attribution, tile_attribution, tile_score_heatmap, trace_slides, HeatMap, InterpretError,
    ScoreOrientation, SlideTrace, SlideValues, TileScoreMap, DEFAULT_QUANTILE, DEFAULT_TILE_TOP,
};
use crate::model::{ModelConfig, ModelError, WsiClassifier};
use crate::seed::derive_seed;
use crate::training::{evaluate_classification, train, ClassificationEval, EpochRecord, TrainConfig, TrainError};

pub const FEATURE_METHOD: &str = "feature_based";
pub const TILE_SCORE_METHOD: &str = "tile_score";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("class {0} has no entry in the feature file")]
    MissingClass(usize),
    #[error("heat-map row for unknown tile {slide_id}#{tile_index}")]
    UnknownTile { slide_id: String, tile_index: usize },
}

/// Initializes a model from the root seed.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<WsiClassifier, ModelError> {
    WsiClassifier::new(config, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "model_init")))
}

/// Makes a min-max model describe `class` through its min slots. If the
/// class stands out by its max-slot scores instead, the score orientation is
/// flipped, which leaves every prediction unchanged. Returns whether a flip
/// happened.
pub fn canonicalize_orientation(
    model: &mut WsiClassifier,
    bags: &[SlideBag],
    class: usize,
) -> Result<bool, PipelineError> {
    if !model.is_min_max() {
        return Ok(false);
    }
    let traces = trace_slides(model, bags)?;
    if !traces.iter().any(|t| t.predicted_class() == class) {
        return Ok(false);
    }
    if score_orientation(model, &traces, class)? == ScoreOrientation::Raw {
        model.flip_score_orientation()?;
        return Ok(true);
    }
    Ok(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    /// Slide-descriptor positions kept per class; half the slide descriptor when unset.
    pub slide_top: Option<usize>,
    /// Tile-descriptor features kept per class.
    pub tile_top: usize,
    pub quantile: f64,
    /// Explain only this class; every class when unset.
    pub class: Option<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            slide_top: None,
            tile_top: DEFAULT_TILE_TOP,
            quantile: DEFAULT_QUANTILE,
            class: None,
        }
    }
}

/// One class's entry in `features.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFeatures {
    pub class: usize,
    #[serde(rename = "I_c")]
    pub slides: Vec<String>,
    #[serde(rename = "K_c")]
    pub slide_positions: Vec<usize>,
    #[serde(rename = "A_c")]
    pub slide_attribution: Vec<f64>,
    pub contributing_tiles: usize,
    #[serde(rename = "k_c")]
    pub features: Vec<usize>,
    #[serde(rename = "a_c")]
    pub feature_attribution: Vec<f64>,
    pub score_orientation: ScoreOrientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesDocument {
    pub config: ExplainConfig,
    pub classes: Vec<ClassFeatures>,
}

impl FeaturesDocument {
    pub fn class(&self, class: usize) -> Result<&ClassFeatures, PipelineError> {
        self.classes
            .iter()
            .find(|c| c.class == class)
            .ok_or(PipelineError::MissingClass(class))
    }
}

pub fn explain_class(
    model: &WsiClassifier,
    traces: &[SlideTrace],
    class: usize,
    cfg: &ExplainConfig,
) -> Result<ClassFeatures, InterpretError> {
    let top = cfg.slide_top.unwrap_or_else(|| default_slide_top(model));
    let slide = slide_attribution(model, traces, class, top)?;
    let tiles = select_contributing_tiles(traces, &slide, cfg.quantile)?;
    let tile = tile_attribution(model, traces, &tiles, cfg.tile_top)?;
    Ok(ClassFeatures {
        class,
        slides: slide.members.iter().map(|&i| traces[i].slide_id.clone()).collect(),
        slide_positions: slide.selected.clone(),
        score_orientation: score_orientation(model, traces, class)?,
        slide_attribution: slide.attribution,
        contributing_tiles: tile.tile_count,
        features: tile.selected,
        feature_attribution: tile.attribution,
    })
}

/// Runs the attribution chain for the configured classes.
pub fn explain(
    model: &WsiClassifier,
    traces: &[SlideTrace],
    cfg: &ExplainConfig,
) -> Result<FeaturesDocument, InterpretError> {
    let classes = model.dims().classes;
    let wanted: Vec<usize> = match cfg.class {
        Some(c) if c >= classes => return Err(InterpretError::ClassOutOfRange { class: c, classes }),
        Some(c) => vec![c],
        None => (0..classes).collect(),
    };
    let classes = wanted
        .into_iter()
        .map(|c| explain_class(model, traces, c, cfg))
        .collect::<Result<_, _>>()?;
    Ok(FeaturesDocument {
        config: cfg.clone(),
        classes,
    })
}

/// Both localization maps for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub feature: HeatMap,
    pub tile_score: TileScoreMap,
}

pub fn build_heatmaps(
    traces: &[SlideTrace],
    features: &ClassFeatures,
) -> Result<HeatmapSet, InterpretError> {
    Ok(HeatmapSet {
        feature: compute_heatmap(traces, &features.features, features.class)?,
        tile_score: tile_score_heatmap(traces, features.class, features.score_orientation),
    })
}

/// One line of `heatmaps.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub slide_id: String,
    pub tile_index: usize,
    pub x: f32,
    pub y: f32,
    pub value: f64,
    pub method: String,
    pub class: usize,
}

/// Flattens per-slide values into rows; `maps` must follow `bags` order.
pub fn heatmap_rows(bags: &[SlideBag], maps: &[SlideValues], method: &str, class: usize) -> Vec<HeatmapRow> {
    bags.iter()
        .zip(maps)
        .flat_map(|(bag, map)| {
            map.values.iter().enumerate().map(move |(j, &value)| HeatmapRow {
                slide_id: bag.slide_id.clone(),
                tile_index: j,
                x: bag.coords()[j][0],
                y: bag.coords()[j][1],
                value,
                method: method.to_string(),
                class,
            })
        })
        .collect()
}

impl HeatmapSet {
    pub fn rows(&self, bags: &[SlideBag]) -> Vec<HeatmapRow> {
        let mut rows = heatmap_rows(bags, &self.feature.slides, FEATURE_METHOD, self.feature.class);
        rows.extend(heatmap_rows(bags, &self.tile_score.slides, TILE_SCORE_METHOD, self.tile_score.class));
        rows
    }
}

/// Localization AUC per method, in order of first appearance, against the
/// tile labels of `bags`. Each row is scored for its own class.
pub fn localization_by_method(rows: &[HeatmapRow], bags: &[SlideBag]) -> Result<Vec<MethodAuc>, PipelineError> {
    let labels: HashMap<&str, &[Option<usize>]> = bags.iter().map(|b| (b.slide_id.as_str(), b.tile_labels())).collect();
    // (method, class, values, tile labels)
    type Group = (String, usize, Vec<f64>, Vec<Option<usize>>);
    let mut methods: Vec<Group> = Vec::new();
    for row in rows {
        let tile_label = labels
            .get(row.slide_id.as_str())
            .and_then(|l| l.get(row.tile_index))
            .ok_or_else(|| PipelineError::UnknownTile {
                slide_id: row.slide_id.clone(),
                tile_index: row.tile_index,
            })?;
        let pos = match methods.iter().position(|m| m.0 == row.method && m.1 == row.class) {
            Some(p) => p,
            None => {
                methods.push((row.method.clone(), row.class, Vec::new(), Vec::new()));
                methods.len() - 1
            }
        };
        methods[pos].2.push(row.value);
        methods[pos].3.push(*tile_label);
    }
    methods
        .into_iter()
        .map(|(method, class, values, labels)| {
            Ok(MethodAuc {
                method,
                localization_auc: localization_auc(&values, &labels, class)?.auc,
            })
        })
        .collect()
}

/// Everything needed to run the synthetic benchmark from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: PlantedConfig,
    pub test_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
    /// Class whose localization is scored.
    pub positive_class: usize,
}

impl ExperimentConfig {
    pub fn synthetic(model: ModelConfig) -> Self {
        let data = PlantedConfig::default();
        let train = TrainConfig {
            seed: data.seed,
            ..TrainConfig::default()
        };
        Self {
            model: ModelConfig {
                content_dim: data.dim,
                descriptor_dim: data.dim,
                ..model
            },
            data,
            test_fraction: DEFAULT_TEST_FRACTION,
            train,
            explain: ExplainConfig::default(),
            positive_class: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: WsiClassifier,
    pub history: Vec<EpochRecord>,
    pub orientation_flipped: bool,
    pub test: ClassificationEval,
    /// Explanation computed on the training split.
    pub features: FeaturesDocument,
    /// Heat-maps of the positive class on the test split.
    pub heatmaps: HeatmapSet,
    pub localization: Vec<MethodAuc>,
    /// Min-slot score comparison on the test split (min-max models only).
    pub min_scores: Option<MwuResult>,
}

impl ExperimentOutcome {
    pub fn localization_of(&self, method: &str) -> Option<f64> {
        self.localization.iter().find(|m| m.method == method).map(|m| m.localization_auc)
    }
}

/// Splits bags by their manifest entry, keeping bag order within each split.
/// Bags without an entry are dropped.
pub fn partition_bags(bags: Vec<SlideBag>, manifest: &DatasetManifest) -> (Vec<SlideBag>, Vec<SlideBag>) {
    let split: HashMap<&str, Split> = manifest.entries.iter().map(|e| (e.slide_id.as_str(), e.split)).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for bag in bags {
        match split.get(bag.slide_id.as_str()) {
            Some(Split::Train) => train.push(bag),
            Some(Split::Test) => test.push(bag),
            None => {}
        }
    }
    (train, test)
}

/// Generate, split, train, orient, explain on train, and map and score on test.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, PipelineError> {
    let bags = generate_synthetic(&cfg.data)?;
    let manifest = split_train_test(&DatasetManifest::for_bags(&bags, cfg.model.classes)?, cfg.test_fraction, cfg.data.seed)?;
    let (train_bags, test_bags) = partition_bags(bags, &manifest);
    let model = init_model(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(model, &train_bags, &test_bags, &cfg.train)?;
    let mut model = outcome.model;
    let orientation_flipped = canonicalize_orientation(&mut model, &train_bags, cfg.positive_class)?;
    let test = evaluate_classification(&model, &test_bags)?;
    let train_traces = trace_slides(&model, &train_bags)?;
    let explain_cfg = ExplainConfig {
        class: Some(cfg.positive_class),
        ..cfg.explain.clone()
    };
    let features = explain(&model, &train_traces, &explain_cfg)?;
    let test_traces = trace_slides(&model, &test_bags)?;
    let heatmaps = build_heatmaps(&test_traces, features.class(cfg.positive_class)?)?;
    let localization = localization_by_method(&heatmaps.rows(&test_bags), &test_bags)?;
    let min_scores = match min_score_comparison(&model, &test_traces, cfg.positive_class) {
        Ok(result) => Some(result),
        Err(InterpretError::NotMinMax) => None,
        Err(InterpretError::Eval(EvalError::EmptySample)) => {
            log::warn!("every test slide has the same predicted class; min-score comparison skipped");
            None
        }
        Err(e) => return Err(e.into()),
    };
    Ok(ExperimentOutcome {
        model,
        history: outcome.history,
        orientation_flipped,
        test,
        features,
        heatmaps,
        localization,
        min_scores,
    })
}
