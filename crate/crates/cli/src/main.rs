//! `eac`: concept-level Shapley explanations from the command line.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 unreadable or invalid
//! input, 4 runtime failure. Outputs are staged and moved into place only
//! after every computation has succeeded.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use eac_core::concept::load_concepts;
use eac_core::curve_eval::{auc, deletion_curve, insertion_curve, XAxis};
use eac_core::explainer::{read_report, round_sig, EvalSection, EvaluatedCurve};
use eac_core::masking::{BaselineFill, DirectModel, Scene};
use eac_core::model::ModelBundle;
use eac_core::pie::{FidelityReport, PieConfig, SurrogateMode, TrainReport};
use eac_core::pipeline::{build_scene, estimate, fit_surrogate, run_explain, ExplainConfig, UtilitySource, DEFAULT_SAMPLES_PER_CONCEPT};
use eac_core::raster::Image;
use eac_core::shapley::{exact_shapley, Sampler, ShapleyResult, TableGame, UtilityKind};
use eac_core::EacError;

#[derive(Parser)]
#[command(name = "eac", version, about = "Concept-level Shapley explanations for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one prediction: report.json and explanation.png.
    Explain(ExplainArgs),
    /// Insertion/deletion curves for a ranking.
    Eval(EvalArgs),
    /// Exact Shapley values by enumeration (synthetic table or image).
    ExactShapley(ExactArgs),
    /// Train a surrogate and report its fidelity.
    PieFit(PieFitArgs),
}

#[derive(Args)]
#[group(id = "model_source", required = true, multiple = false)]
struct ModelSource {
    /// Model bundle directory.
    #[arg(long, group = "model_source")]
    model: Option<PathBuf>,
    /// Built-in toy classifier `seed,grid,classes`.
    #[arg(long, value_name = "SEED,GRID,CLASSES", group = "model_source")]
    toy_model: Option<String>,
}

impl ModelSource {
    fn load(&self) -> Result<ModelBundle, Failure> {
        match (&self.model, &self.toy_model) {
            (Some(dir), None) => Ok(ModelBundle::load_bundle(dir)?),
            (None, Some(toy)) => {
                let parts: Vec<&str> = toy.split(',').map(str::trim).collect();
                let parsed: Option<Vec<u64>> = parts.iter().map(|p| p.parse().ok()).collect();
                match parsed.as_deref() {
                    Some(&[seed, grid, classes]) => {
                        Ok(ModelBundle::builtin_toy_model(seed, grid as usize, classes as usize)?)
                    }
                    _ => Err(Failure::config(format!(
                        "--toy-model expects SEED,GRID,CLASSES, got `{toy}`"
                    ))),
                }
            }
            _ => Err(Failure::config("give exactly one of --model or --toy-model")),
        }
    }
}

#[derive(Args)]
struct SceneArgs {
    /// Input image (PNG).
    #[arg(long)]
    image: PathBuf,
    /// Concept mask manifest (JSON, RLE masks).
    #[arg(long)]
    masks: PathBuf,
    #[command(flatten)]
    model: ModelSource,
    /// Baseline for masked pixels.
    #[arg(long, value_enum, default_value_t = FillArg::Mean)]
    fill: FillArg,
    /// Box-blur radius for `--fill blur`.
    #[arg(long, default_value_t = 4)]
    blur_radius: usize,
    /// Do not add a concept for pixels no mask covers.
    #[arg(long)]
    no_background: bool,
    /// Class to explain; defaults to the prediction on the unmasked image.
    #[arg(long)]
    target_class: Option<usize>,
}

impl SceneArgs {
    fn fill(&self) -> BaselineFill {
        match self.fill {
            FillArg::Zero => BaselineFill::Zero,
            FillArg::Mean => BaselineFill::ChannelMean,
            FillArg::Blur => BaselineFill::Blur {
                radius: self.blur_radius,
            },
        }
    }

    fn base_config(&self) -> ExplainConfig {
        ExplainConfig {
            fill: self.fill(),
            background: !self.no_background,
            target_class: self.target_class,
            ..ExplainConfig::default()
        }
    }

    fn load(&self, config: &ExplainConfig) -> Result<(ModelBundle, Scene), Failure> {
        let image = Image::load_png(&self.image)?;
        let concepts = load_concepts(&self.masks)?;
        let bundle = self.model.load()?;
        let scene = build_scene(image, concepts, config)?;
        Ok((bundle, scene))
    }
}

#[derive(Args)]
struct PieArgs {
    /// Coalitions sampled to train the surrogate.
    #[arg(long, default_value_t = PieConfig::default().num_samples)]
    pie_samples: usize,
    #[arg(long, default_value_t = PieConfig::default().epochs)]
    pie_epochs: usize,
    #[arg(long, default_value_t = PieConfig::default().learning_rate)]
    pie_lr: f64,
    /// Width of an optional hidden layer in the surrogate's input map.
    #[arg(long)]
    pie_hidden: Option<usize>,
}

impl PieArgs {
    fn config(&self, seed: u64) -> PieConfig {
        PieConfig {
            num_samples: self.pie_samples,
            epochs: self.pie_epochs,
            learning_rate: self.pie_lr,
            hidden_width: self.pie_hidden,
            seed,
            ..PieConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FillArg {
    Zero,
    Mean,
    Blur,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SurrogateArg {
    Pie,
    PieNoSharing,
    Linear,
    Direct,
}

impl From<SurrogateArg> for UtilitySource {
    fn from(s: SurrogateArg) -> Self {
        match s {
            SurrogateArg::Pie => UtilitySource::Pie,
            SurrogateArg::PieNoSharing => UtilitySource::PieNoSharing,
            SurrogateArg::Linear => UtilitySource::Linear,
            SurrogateArg::Direct => UtilitySource::Direct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    TwoStage,
    Permutation,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Concepts,
    Pixels,
}

impl From<AxisArg> for XAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Concepts => XAxis::Concepts,
            AxisArg::Pixels => XAxis::Pixels,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CurveMode {
    Insertion,
    Deletion,
    Both,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Where coalition utilities come from.
    #[arg(long, value_enum, default_value_t = SurrogateArg::Pie)]
    surrogate: SurrogateArg,
    /// Monte-Carlo samples per concept.
    #[arg(short = 'k', long = "k", default_value_t = DEFAULT_SAMPLES_PER_CONCEPT)]
    k: usize,
    #[command(flatten)]
    pie: PieArgs,
    #[arg(long, value_enum, default_value_t = SamplerArg::TwoStage)]
    sampler: SamplerArg,
    /// Seed for every stochastic choice in the run.
    #[arg(long)]
    seed: u64,
    /// Enumerate all coalitions (refused above the concept cutoff).
    #[arg(long)]
    exact: bool,
    /// Add insertion and deletion curves to the report.
    #[arg(long)]
    eval: bool,
    #[arg(long, value_enum, default_value_t = AxisArg::Concepts)]
    x_axis: AxisArg,
    /// Also write insertion.csv / deletion.csv (implies --eval).
    #[arg(long)]
    csv: bool,
    /// Record wall-clock stage times (the report is then no longer reproducible byte for byte).
    #[arg(long)]
    timings: bool,
    /// Also write the trained surrogate as surrogate.json.
    #[arg(long)]
    save_surrogate: bool,
    /// Output directory.
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Take ranking and target class from an explain report.
    #[arg(long, conflicts_with = "order", required_unless_present = "order")]
    report: Option<PathBuf>,
    /// Comma-separated concept order.
    #[arg(long)]
    order: Option<String>,
    #[arg(long, value_enum, default_value_t = CurveMode::Both)]
    mode: CurveMode,
    #[arg(long, value_enum, default_value_t = AxisArg::Concepts)]
    x_axis: AxisArg,
    #[arg(long)]
    csv: bool,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExactArgs {
    /// Utility table `{"n": .., "utilities": [..]}`, bit i of the index = concept i.
    #[arg(long, conflicts_with_all = ["image", "masks", "model", "toy_model"])]
    game: Option<PathBuf>,
    #[arg(long, requires = "masks")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    masks: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_name = "SEED,GRID,CLASSES")]
    toy_model: Option<String>,
    #[arg(long, value_enum, default_value_t = FillArg::Mean)]
    fill: FillArg,
    #[arg(long, default_value_t = 4)]
    blur_radius: usize,
    #[arg(long)]
    no_background: bool,
    #[arg(long)]
    target_class: Option<usize>,
    #[arg(long, value_enum, default_value_t = SurrogateArg::Direct)]
    surrogate: SurrogateArg,
    #[command(flatten)]
    pie: PieArgs,
    /// Seed for surrogate training (image mode with a surrogate).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PieFitArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_enum, default_value_t = SurrogateArg::Pie)]
    surrogate: SurrogateArg,
    #[command(flatten)]
    pie: PieArgs,
    #[arg(long)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

/// A failed command: exit code plus one-line diagnostic.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<EacError> for Failure {
    fn from(e: EacError) -> Self {
        let code = match &e {
            EacError::InvalidConfig(_) | EacError::TooManyConcepts { .. } => 2,
            e if e.is_input_error() => 3,
            _ => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Files produced by a command, written only once everything is computed.
#[derive(Default)]
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    images: Vec<(String, Image)>,
}

impl Outputs {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("output serialises");
        text.push('\n');
        self.files.push((name.into(), text.into_bytes()));
    }

    fn text(&mut self, name: &str, text: String) {
        self.files.push((name.into(), text.into_bytes()));
    }

    /// Stages every file in a temporary directory inside `dir`, then renames
    /// them into place.
    fn commit(self, dir: &Path) -> Result<(), Failure> {
        let io = |e: std::io::Error| Failure {
            code: 4,
            message: format!("{}: {e}", dir.display()),
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let staging = tempfile::Builder::new()
            .prefix(".eac-staging")
            .tempdir_in(dir)
            .map_err(io)?;
        let mut staged = Vec::new();
        for (name, bytes) in &self.files {
            let path = staging.path().join(name);
            std::fs::write(&path, bytes).map_err(io)?;
            staged.push((path, name));
        }
        for (name, image) in &self.images {
            let path = staging.path().join(name);
            image.save_png(&path)?;
            staged.push((path, name));
        }
        for (path, name) in staged {
            std::fs::rename(path, dir.join(name)).map_err(io)?;
        }
        Ok(())
    }
}

fn explain(args: ExplainArgs) -> Result<(), Failure> {
    let eval = args.eval || args.csv;
    let config = ExplainConfig {
        utility: args.surrogate.into(),
        samples_per_concept: args.k,
        exact: args.exact,
        sampler: match args.sampler {
            SamplerArg::TwoStage => Sampler::TwoStage,
            SamplerArg::Permutation => Sampler::Permutation,
        },
        pie: args.pie.config(args.seed),
        seed: args.seed,
        eval: eval.then(|| args.x_axis.into()),
        record_timings: args.timings,
        ..args.scene.base_config()
    };
    config.validate()?;
    if config.utility == UtilitySource::Direct && !args.exact {
        eprintln!("eac: warning: direct utility runs the full model for every sampled coalition");
    }
    let (bundle, scene) = args.scene.load(&config)?;
    if args.exact {
        let limit = config.utility.utility_kind().exact_limit();
        if scene.n() > limit {
            return Err(EacError::TooManyConcepts { n: scene.n(), limit }.into());
        }
    }
    let outcome = run_explain(&bundle, scene, &config)?;
    let mut explanation = outcome.explanation;
    explanation.image = args
        .scene
        .image
        .file_name()
        .map(|n| n.to_string_lossy().into_owned());

    let mut out = Outputs::default();
    out.text("report.json", explanation.to_json());
    out.images.push(("explanation.png".into(), outcome.rendered));
    if args.csv {
        for c in &explanation.rounded().eval.expect("eval requested").curves {
            out.text(&format!("{}.csv", kind_name(&c.curve)), c.curve.to_csv());
        }
    }
    if args.save_surrogate {
        if let Some((surrogate, _)) = &outcome.surrogate {
            out.json("surrogate.json", surrogate);
        }
    }
    out.commit(&args.out)?;
    eprintln!(
        "explained class {} with {} concepts; selected {:?}",
        explanation.target_class, explanation.n_concepts, explanation.selected
    );
    Ok(())
}

fn kind_name(c: &eac_core::curve_eval::Curve) -> &'static str {
    match c.kind {
        eac_core::curve_eval::CurveKind::Insertion => "insertion",
        eac_core::curve_eval::CurveKind::Deletion => "deletion",
    }
}

#[derive(Serialize)]
struct EvalOutput {
    target_class: usize,
    order: Vec<usize>,
    #[serde(flatten)]
    eval: EvalSection,
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let mut config = args.scene.base_config();
    let mut order = None;
    if let Some(path) = &args.report {
        let report = read_report(path)?;
        config.target_class = config.target_class.or(Some(report.target_class));
        order = Some(report.ranking);
    }
    if let Some(text) = &args.order {
        let parsed: Result<Vec<usize>, _> = text.split(',').map(|t| t.trim().parse()).collect();
        order = Some(parsed.map_err(|_| Failure::config(format!("--order: cannot parse `{text}`")))?);
    }
    let order = order.ok_or_else(|| Failure::config("give --report or --order"))?;
    let (bundle, scene) = args.scene.load(&config)?;
    let target = match config.target_class {
        Some(c) => c,
        None => bundle.predict(scene.image())?.argmax(),
    };
    let direct = DirectModel {
        bundle: &bundle,
        scene: &scene,
    };
    let axis: XAxis = args.x_axis.into();
    let mut curves = Vec::new();
    if args.mode != CurveMode::Deletion {
        curves.push(insertion_curve(&direct, &order, target, axis)?);
    }
    if args.mode != CurveMode::Insertion {
        curves.push(deletion_curve(&direct, &order, target, axis)?);
    }
    let curves: Vec<EvaluatedCurve> = curves
        .into_iter()
        .map(|curve| {
            let mut c = EvaluatedCurve {
                auc: round_sig(auc(&curve)),
                curve,
            };
            for p in &mut c.curve.points {
                *p = [round_sig(p[0]), round_sig(p[1])];
            }
            c
        })
        .collect();
    let mut out = Outputs::default();
    if args.csv {
        for c in &curves {
            out.text(&format!("{}.csv", kind_name(&c.curve)), c.curve.to_csv());
        }
    }
    for c in &curves {
        println!("{} auc {}", kind_name(&c.curve), c.auc);
    }
    out.json(
        "eval.json",
        &EvalOutput {
            target_class: target,
            order,
            eval: EvalSection { x_axis: axis, curves },
        },
    );
    out.commit(&args.out)
}

#[derive(Serialize)]
/// Values use the report's six-significant-digit formatting.
struct ExactOutput {
    n: usize,
    utility_kind: UtilityKind,
    target_class: Option<usize>,
    values: Vec<f64>,
}

fn exact(args: ExactArgs) -> Result<(), Failure> {
    let (result, target_class): (ShapleyResult, Option<usize>) = if let Some(game) = &args.game {
        (exact_shapley(&TableGame::load(game)?)?, None)
    } else {
        let (Some(image), Some(masks)) = (&args.image, &args.masks) else {
            return Err(Failure::config("give --game, or --image and --masks with a model"));
        };
        let source = ModelSource {
            model: args.model.clone(),
            toy_model: args.toy_model.clone(),
        };
        let scene_args = SceneArgs {
            image: image.clone(),
            masks: masks.clone(),
            model: source,
            fill: args.fill,
            blur_radius: args.blur_radius,
            no_background: args.no_background,
            target_class: args.target_class,
        };
        let config = ExplainConfig {
            utility: args.surrogate.into(),
            exact: true,
            seed: args.seed,
            ..scene_args.base_config()
        };
        config.validate()?;
        let concepts = load_concepts(masks)?;
        let n = concepts.len() + usize::from(config.background && !covers_all(&concepts));
        let limit = config.utility.utility_kind().exact_limit();
        if n > limit {
            return Err(EacError::TooManyConcepts { n, limit }.into());
        }
        let (bundle, scene) = scene_args.load(&config)?;
        let target = match config.target_class {
            Some(c) => c,
            None => bundle.predict(scene.image())?.argmax(),
        };
        let result = match config.utility.surrogate_mode() {
            Some(mode) => {
                let fitted = fit_surrogate(&bundle, &scene, mode, &args.pie.config(args.seed))?;
                estimate(&fitted.surrogate, target, &config)?
            }
            None => estimate(
                &DirectModel {
                    bundle: &bundle,
                    scene: &scene,
                },
                target,
                &config,
            )?,
        };
        (result, Some(target))
    };
    let output = ExactOutput {
        n: result.n(),
        utility_kind: result.utility_kind,
        target_class,
        values: result.values.iter().map(|&v| round_sig(v)).collect(),
    };
    let mut text = serde_json::to_string_pretty(&output).expect("output serialises");
    text.push('\n');
    match &args.out {
        Some(path) => eac_core::explainer::write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn covers_all(concepts: &eac_core::concept::ConceptSet) -> bool {
    concepts.union().complement().count() == 0
}

#[derive(Serialize)]
struct PieFitOutput {
    mode: SurrogateMode,
    samples: usize,
    train: TrainReport,
    holdout: FidelityReport,
}

fn pie_fit(args: PieFitArgs) -> Result<(), Failure> {
    let Some(mode) = UtilitySource::from(args.surrogate).surrogate_mode() else {
        return Err(Failure::config("pie-fit needs a surrogate mode, not direct"));
    };
    let config = args.scene.base_config();
    config.validate()?;
    let (bundle, scene) = args.scene.load(&config)?;
    let fitted = fit_surrogate(&bundle, &scene, mode, &args.pie.config(args.seed))?;
    let mut train = fitted.report;
    train.initial_loss = round_sig(train.initial_loss);
    train.holdout_loss = round_sig(train.holdout_loss);
    train.holdout_top1_agreement = round_sig(train.holdout_top1_agreement);
    train.epoch_losses.iter_mut().for_each(|l| *l = round_sig(*l));
    let mut holdout = fitted.holdout;
    holdout.top1_agreement = round_sig(holdout.top1_agreement);
    holdout.mean_abs_prob_gap = round_sig(holdout.mean_abs_prob_gap);
    eprintln!(
        "{mode:?}: holdout top-1 agreement {} over {} coalitions",
        holdout.top1_agreement, holdout.coalitions
    );
    let mut out = Outputs::default();
    out.json(
        "pie_fit.json",
        &PieFitOutput {
            mode,
            samples: fitted.samples,
            train,
            holdout,
        },
    );
    out.json("surrogate.json", &fitted.surrogate);
    out.commit(&args.out)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("EAC_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::config(format!("EAC_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure {
            code: 4,
            message: e.to_string(),
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Explain(a) => explain(a),
        Command::Eval(a) => eval(a),
        Command::ExactShapley(a) => exact(a),
        Command::PieFit(a) => pie_fit(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("eac: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
