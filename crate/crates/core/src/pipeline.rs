//! End-to-end explanation of one image: optional surrogate fitting, Shapley
//! estimation, subset selection, rendering and optional curve evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::concept::ConceptSet;
use crate::curve_eval::{auc, deletion_curve, insertion_curve, XAxis};
use crate::error::{EacError, Result};
use crate::explainer::{render_explanation, EvalSection, EvaluatedCurve, Explanation, SurrogateSummary};
use crate::masking::{BaselineFill, Coalition, CoalitionModel, DirectModel, Scene};
use crate::model::ModelBundle;
use crate::pie::{fidelity, sample_dataset, split_samples, train_surrogate, FidelityReport, PieConfig, Surrogate, SurrogateMode, TrainReport};
use crate::raster::Image;
use crate::shapley::{exact_shapley_with_limit, mc_shapley, ClassUtility, McConfig, Sampler, ShapleyResult, Utility, UtilityKind};

/// Where utilities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilitySource {
    #[default]
    Pie,
    PieNoSharing,
    Linear,
    /// The target model on every masked image.
    Direct,
}

impl UtilitySource {
    pub fn surrogate_mode(self) -> Option<SurrogateMode> {
        match self {
            UtilitySource::Pie => Some(SurrogateMode::Pie),
            UtilitySource::PieNoSharing => Some(SurrogateMode::PieNoSharing),
            UtilitySource::Linear => Some(SurrogateMode::Linear),
            UtilitySource::Direct => None,
        }
    }

    pub fn utility_kind(self) -> UtilityKind {
        self.surrogate_mode()
            .map_or(UtilityKind::Direct, SurrogateMode::utility_kind)
    }
}

pub const DEFAULT_SAMPLES_PER_CONCEPT: usize = 500;

/// Mixed into the run seed so the Shapley sampler and the surrogate never
/// share a ChaCha8 key.
const MC_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub utility: UtilitySource,
    #[serde(rename = "K")]
    pub samples_per_concept: usize,
    /// Enumerate all coalitions instead of sampling.
    pub exact: bool,
    pub sampler: Sampler,
    /// Surrogate settings; its seed is overridden by `seed`.
    pub pie: PieConfig,
    pub fill: BaselineFill,
    /// Add a concept for the pixels no mask covers.
    pub background: bool,
    pub seed: u64,
    /// Defaults to the model's prediction on the unmasked image.
    pub target_class: Option<usize>,
    /// Compute insertion and deletion curves on this axis.
    pub eval: Option<XAxis>,
    /// Add wall-clock stage times to the report (breaks byte-identity across runs).
    pub record_timings: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            utility: UtilitySource::Pie,
            samples_per_concept: DEFAULT_SAMPLES_PER_CONCEPT,
            exact: false,
            sampler: Sampler::TwoStage,
            pie: PieConfig::default(),
            fill: BaselineFill::ChannelMean,
            background: true,
            seed: 0,
            target_class: None,
            eval: None,
            record_timings: false,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        self.fill.validate()?;
        if !self.exact && self.samples_per_concept < 2 {
            return Err(EacError::InvalidConfig(format!(
                "K must be at least 2, got {}",
                self.samples_per_concept
            )));
        }
        Ok(())
    }

    fn pie_config(&self) -> PieConfig {
        PieConfig {
            seed: self.seed,
            ..self.pie.clone()
        }
    }
}

pub struct ExplainOutcome {
    pub explanation: Explanation,
    pub rendered: Image,
    pub scene: Scene,
    pub surrogate: Option<(Surrogate, TrainReport)>,
}

/// A trained surrogate with its fit diagnostics on the held-out coalitions.
pub struct FittedSurrogate {
    pub surrogate: Surrogate,
    pub report: TrainReport,
    pub holdout: FidelityReport,
    pub samples: usize,
}

/// Samples, labels and trains a surrogate for `scene`, then measures agreement
/// with the target model on the holdout coalitions.
pub fn fit_surrogate(
    bundle: &ModelBundle,
    scene: &Scene,
    mode: SurrogateMode,
    config: &PieConfig,
) -> Result<FittedSurrogate> {
    let direct = DirectModel { bundle, scene };
    let samples = sample_dataset(&direct, config)?;
    let (surrogate, report) = train_surrogate(&samples, bundle.fc(), mode, config)?;
    let (_, held) = split_samples(&samples, config);
    let held: Vec<Coalition> = held.iter().map(|s| s.coalition.clone()).collect();
    let holdout = fidelity(&surrogate, &direct, &held)?;
    Ok(FittedSurrogate {
        surrogate,
        report,
        holdout,
        samples: samples.len(),
    })
}

/// Builds the scene the explainer works on.
pub fn build_scene(image: Image, concepts: ConceptSet, config: &ExplainConfig) -> Result<Scene> {
    let concepts = if config.background {
        concepts.complete_with_background()
    } else {
        concepts
    };
    Scene::new(image, concepts, config.fill)
}

/// Estimates Shapley values for `class` over `model`.
pub fn estimate(model: &dyn CoalitionModel, class: usize, config: &ExplainConfig) -> Result<ShapleyResult> {
    let utility = ClassUtility { model, class };
    if config.exact {
        exact_shapley_with_limit(&utility, utility.kind().exact_limit())
    } else {
        mc_shapley(
            &utility,
            McConfig {
                samples_per_concept: config.samples_per_concept,
                seed: config.seed ^ MC_SEED_SALT,
                sampler: config.sampler,
            },
        )
    }
}

pub fn run_explain(bundle: &ModelBundle, scene: Scene, config: &ExplainConfig) -> Result<ExplainOutcome> {
    config.validate()?;
    let mut wall = BTreeMap::new();
    let mut stage = Instant::now();
    let mut lap = |name: &str, wall: &mut BTreeMap<String, f64>| {
        wall.insert(name.to_string(), stage.elapsed().as_secs_f64() * 1e3);
        stage = Instant::now();
    };

    let direct = DirectModel { bundle, scene: &scene };
    let target = match config.target_class {
        Some(c) if c >= bundle.num_classes() => {
            return Err(EacError::InvalidConfig(format!(
                "target class {c} out of range for {} classes",
                bundle.num_classes()
            )))
        }
        Some(c) => c,
        None => bundle.predict(scene.image())?.argmax(),
    };

    let fitted = match config.utility.surrogate_mode() {
        Some(mode) => {
            let fitted = fit_surrogate(bundle, &scene, mode, &config.pie_config())?;
            lap("surrogate", &mut wall);
            Some(fitted)
        }
        None => None,
    };

    let result = match &fitted {
        Some(f) => estimate(&f.surrogate, target, config)?,
        None => estimate(&direct, target, config)?,
    };
    lap("shapley", &mut wall);

    let config_echo = serde_json::to_value(config).expect("config serialises");
    let label = bundle.labels().get(target).cloned();
    let mut explanation = Explanation::new(&result, target, label, config_echo);
    if !config.exact {
        explanation.seed = Some(config.seed);
    }

    if let Some(f) = &fitted {
        explanation.surrogate = Some(SurrogateSummary {
            mode: f.report.mode,
            samples: f.samples,
            initial_loss: f.report.initial_loss,
            final_loss: f.report.final_loss(),
            fc_checksum: f.report.fc_checksum_after.clone(),
            holdout: f.holdout,
        });
    }

    if let Some(axis) = config.eval {
        let order = &explanation.ranking;
        let curves = [
            insertion_curve(&direct, order, target, axis)?,
            deletion_curve(&direct, order, target, axis)?,
        ];
        explanation.eval = Some(EvalSection {
            x_axis: axis,
            curves: curves
                .into_iter()
                .map(|curve| EvaluatedCurve { auc: auc(&curve), curve })
                .collect(),
        });
        lap("eval", &mut wall);
    }

    let rendered = render_explanation(&scene, &explanation.selected)?;
    lap("render", &mut wall);
    if config.record_timings {
        explanation.timings.wall_ms = Some(wall);
    }

    Ok(ExplainOutcome {
        explanation,
        rendered,
        scene,
        surrogate: fitted.map(|f| (f.surrogate, f.report)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::Bitmap;

    fn scene(background: bool) -> (ModelBundle, Scene) {
        let bundle = ModelBundle::builtin_toy_model(3, 4, 4).unwrap();
        let image = Image::from_fn(32, 32, |x, y| [x as f32 / 32.0, y as f32 / 32.0, ((x + y) % 3) as f32 / 3.0]);
        let masks = [
            Bitmap::from_fn(32, 32, |x, y| x < 12 && y < 12),
            Bitmap::from_fn(32, 32, |x, y| x >= 16 && y < 16),
            Bitmap::from_fn(32, 32, |_, y| y >= 20),
        ];
        let cs = ConceptSet::from_bitmaps(32, 32, masks.into_iter().map(|m| (None, m))).unwrap();
        let cfg = ExplainConfig {
            background,
            ..ExplainConfig::default()
        };
        let scene = build_scene(image, cs, &cfg).unwrap();
        (bundle, scene)
    }

    fn small_config(utility: UtilitySource) -> ExplainConfig {
        ExplainConfig {
            utility,
            samples_per_concept: 64,
            pie: PieConfig {
                num_samples: 64,
                epochs: 30,
                ..PieConfig::default()
            },
            seed: 9,
            ..ExplainConfig::default()
        }
    }

    #[test]
    fn background_adds_a_concept() {
        assert_eq!(scene(true).1.n(), 4);
        assert_eq!(scene(false).1.n(), 3);
    }

    #[test]
    fn direct_exact_matches_efficiency() {
        let (bundle, scene) = scene(true);
        let cfg = ExplainConfig {
            exact: true,
            ..small_config(UtilitySource::Direct)
        };
        let out = run_explain(&bundle, scene, &cfg).unwrap();
        let e = &out.explanation;
        let direct = DirectModel { bundle: &bundle, scene: &out.scene };
        let full = direct.utility(&Coalition::full(4), e.target_class).unwrap();
        let empty = direct.utility(&Coalition::empty(4), e.target_class).unwrap();
        let sum: f64 = e.shapley.iter().map(|c| c.value).sum();
        assert!((sum - (full - empty)).abs() < 1e-12);
        assert_eq!(e.seed, None);
        assert_eq!(e.utility_kind, UtilityKind::Direct);
    }

    #[test]
    fn surrogate_run_is_deterministic() {
        let (bundle, s1) = scene(true);
        let (_, s2) = scene(true);
        let cfg = ExplainConfig {
            eval: Some(XAxis::Concepts),
            ..small_config(UtilitySource::Pie)
        };
        let a = run_explain(&bundle, s1, &cfg).unwrap();
        let b = run_explain(&bundle, s2, &cfg).unwrap();
        assert_eq!(a.explanation.to_json(), b.explanation.to_json());
        assert_eq!(a.rendered, b.rendered);
        let summary = a.explanation.surrogate.as_ref().unwrap();
        assert_eq!(summary.mode, SurrogateMode::Pie);
        assert_eq!(a.explanation.eval.as_ref().unwrap().curves.len(), 2);
    }

    #[test]
    fn target_class_out_of_range() {
        let (bundle, scene) = scene(true);
        let cfg = ExplainConfig {
            target_class: Some(9),
            ..small_config(UtilitySource::Direct)
        };
        assert!(matches!(run_explain(&bundle, scene, &cfg), Err(EacError::InvalidConfig(_))));
    }

    #[test]
    fn k_below_two_rejected() {
        let (bundle, scene) = scene(true);
        let cfg = ExplainConfig {
            samples_per_concept: 1,
            ..small_config(UtilitySource::Direct)
        };
        assert!(matches!(run_explain(&bundle, scene, &cfg), Err(EacError::InvalidConfig(_))));
    }
}
