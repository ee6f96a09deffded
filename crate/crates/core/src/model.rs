//! The classifier under explanation: a feature backbone followed by a single
//! linear layer, stored as separate artifacts so the linear layer can be
//! reused by the surrogate.
//!
//! Bundle layout on disk:
//!
//! * `fc.json`: `{"weight": [[...]], "bias": [...], "labels": [...]}`
//! * `preprocess.json`: `{"resize": [H, W], "mean": [r, g, b], "std": [r, g, b]}`
//! * `backbone.onnx`: float32 `[1,3,H,W]` input named `input`, float32 `[1,m]`
//!   output named `features` (needs the `onnx` feature), or
//! * `builtin.json`: `{"backbone": "grid_mean", "grid": g}` for the closed-form toy backbone
//! * `probe.json` (optional): `{"logits": [...]}`, the logits the source model
//!   produced on a constant 0.5 grey image of the resize dimensions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EacError, Result};
use crate::raster::Image;
use crate::rng::XorShift64Star;

#[cfg(feature = "onnx")]
pub mod onnx;

pub const FC_FILE: &str = "fc.json";
pub const PREPROCESS_FILE: &str = "preprocess.json";
pub const BACKBONE_FILE: &str = "backbone.onnx";
pub const BUILTIN_FILE: &str = "builtin.json";
pub const PROBE_FILE: &str = "probe.json";

const PROBE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    /// `[height, width]`
    pub resize: [usize; 2],
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocessSpec {
    fn validate(&self) -> Result<()> {
        if self.resize[0] == 0 || self.resize[1] == 0 {
            return Err(EacError::ShapeMismatch("preprocess resize has zero extent".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(EacError::ShapeMismatch("preprocess std must be positive".into()));
        }
        Ok(())
    }

    /// Resizes (bilinear, only when the size differs) and normalises into a CHW tensor.
    pub fn apply(&self, image: &Image) -> Result<Vec<f32>> {
        if image.channels() != 3 {
            return Err(EacError::BackendFailure(format!(
                "expected a 3-channel image, got {} channels",
                image.channels()
            )));
        }
        let [h, w] = self.resize;
        let resized;
        let source = if image.height() == h && image.width() == w {
            image.data()
        } else {
            let buffer = image::ImageBuffer::<image::Rgb<f32>, _>::from_raw(
                image.width() as u32,
                image.height() as u32,
                image.data().to_vec(),
            )
            .ok_or_else(|| EacError::BackendFailure("image buffer size".into()))?;
            resized = image::imageops::resize(
                &buffer,
                w as u32,
                h as u32,
                image::imageops::FilterType::Triangle,
            )
            .into_raw();
            &resized[..]
        };
        let mut chw = vec![0f32; 3 * h * w];
        for (p, px) in source.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * h * w + p] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
        Ok(chw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    /// `num_classes x m`, row-major rows.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub labels: Vec<String>,
}

impl FcLayer {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn in_features(&self) -> usize {
        self.weight.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let classes = self.bias.len();
        if classes < 2 || self.weight.len() != classes || self.labels.len() != classes {
            return Err(EacError::ShapeMismatch(format!(
                "fc has {} weight rows, {} biases and {} labels",
                self.weight.len(),
                classes,
                self.labels.len()
            )));
        }
        let m = self.in_features();
        if m == 0 || self.weight.iter().any(|row| row.len() != m) {
            return Err(EacError::ShapeMismatch("fc weight rows are ragged or empty".into()));
        }
        Ok(())
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + b)
            .collect()
    }
}

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVec(pub Vec<f64>);

impl ProbVec {
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> ProbVec {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbVec(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "snake_case")]
pub enum BuiltinBackbone {
    /// Per-cell mean of each channel over a `grid x grid` partition, channel-major.
    GridMean { grid: usize },
}

#[derive(Debug)]
pub enum Backbone {
    Builtin(BuiltinBackbone),
    #[cfg(feature = "onnx")]
    Onnx(onnx::OnnxBackbone),
}

impl Backbone {
    fn features(&self, chw: &[f32], height: usize, width: usize) -> Result<Vec<f64>> {
        match self {
            Backbone::Builtin(BuiltinBackbone::GridMean { grid }) => {
                Ok(grid_mean_features(chw, height, width, *grid))
            }
            #[cfg(feature = "onnx")]
            Backbone::Onnx(model) => model.run(chw, height, width),
        }
    }
}

/// Cells span rows `floor(r*H/g)..floor((r+1)*H/g)` (same for columns).
/// Output index is `c*g*g + r*g + col`. Sums are accumulated in f64 and the
/// mean rounded to f32, matching a float32 runtime.
pub fn grid_mean_features(chw: &[f32], height: usize, width: usize, grid: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * grid * grid);
    for c in 0..3 {
        let plane = &chw[c * height * width..(c + 1) * height * width];
        for r in 0..grid {
            let (y0, y1) = (r * height / grid, (r + 1) * height / grid);
            for col in 0..grid {
                let (x0, x1) = (col * width / grid, (col + 1) * width / grid);
                let mut acc = 0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += plane[y * width + x] as f64;
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)).max(1) as f64;
                out.push((acc / count) as f32 as f64);
            }
        }
    }
    out
}

/// Target classifier `softmax(fc(backbone(preprocess(image))))`.
/// Read-only after load; `predict` may be called from many threads.
#[derive(Debug)]
pub struct ModelBundle {
    backbone: Backbone,
    fc: FcLayer,
    preprocess: PreprocessSpec,
    feature_dim: usize,
}

impl ModelBundle {
    pub fn new(backbone: Backbone, fc: FcLayer, preprocess: PreprocessSpec) -> Result<Self> {
        fc.validate()?;
        preprocess.validate()?;
        let mut bundle = Self {
            feature_dim: fc.in_features(),
            backbone,
            fc,
            preprocess,
        };
        let probe = bundle.probe_image();
        let dim = bundle.features(&probe)?.len();
        if dim != bundle.feature_dim {
            return Err(EacError::ShapeMismatch(format!(
                "backbone produces {dim} features but fc expects {}",
                bundle.feature_dim
            )));
        }
        bundle.feature_dim = dim;
        Ok(bundle)
    }

    /// Closed-form toy classifier: grid-mean features, linear head drawn from
    /// [`XorShift64Star`] (all weight rows first, then the bias), uniform in `[-1, 1)`.
    /// Input is resized to 64x64 with identity normalisation.
    pub fn builtin_toy_model(seed: u64, grid: usize, num_classes: usize) -> Result<Self> {
        if grid < 2 || num_classes < 2 {
            return Err(EacError::InvalidConfig(format!(
                "toy model needs grid >= 2 and >= 2 classes (got grid={grid}, classes={num_classes})"
            )));
        }
        let m = 3 * grid * grid;
        let mut g = XorShift64Star::new(seed);
        let weight = (0..num_classes)
            .map(|_| (0..m).map(|_| g.next_symmetric()).collect())
            .collect();
        let bias = (0..num_classes).map(|_| g.next_symmetric()).collect();
        let labels = (0..num_classes).map(|k| format!("class_{k}")).collect();
        Self::new(
            Backbone::Builtin(BuiltinBackbone::GridMean { grid }),
            FcLayer {
                weight,
                bias,
                labels,
            },
            PreprocessSpec {
                resize: [64, 64],
                mean: [0.0; 3],
                std: [1.0; 3],
            },
        )
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let fc: FcLayer = read_json(&dir.join(FC_FILE))?;
        let preprocess: PreprocessSpec = read_json(&dir.join(PREPROCESS_FILE))?;
        let builtin_path = dir.join(BUILTIN_FILE);
        let backbone = if builtin_path.exists() {
            Backbone::Builtin(read_json(&builtin_path)?)
        } else {
            Self::interchange_backbone(dir)?
        };
        let bundle = Self::new(backbone, fc, preprocess)?;
        let probe_path = dir.join(PROBE_FILE);
        if probe_path.exists() {
            let probe: ProbeRecord = read_json(&probe_path)?;
            bundle.check_probe(&probe)?;
        }
        Ok(bundle)
    }

    #[cfg(feature = "onnx")]
    fn interchange_backbone(dir: &Path) -> Result<Backbone> {
        let path = dir.join(BACKBONE_FILE);
        if !path.exists() {
            return Err(EacError::MissingArtifact(path));
        }
        let preprocess: PreprocessSpec = read_json(&dir.join(PREPROCESS_FILE))?;
        Ok(Backbone::Onnx(onnx::OnnxBackbone::load(&path, preprocess.resize)?))
    }

    #[cfg(not(feature = "onnx"))]
    fn interchange_backbone(dir: &Path) -> Result<Backbone> {
        let path = dir.join(BACKBONE_FILE);
        if !path.exists() {
            return Err(EacError::MissingArtifact(path));
        }
        Err(EacError::BackendFailure(format!(
            "{} needs the `onnx` feature",
            path.display()
        )))
    }

    /// Writes `fc.json`, `preprocess.json`, `probe.json` and the backbone
    /// marker (`builtin.json`; plus `backbone.onnx` with the `onnx` feature).
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| EacError::io(dir, e))?;
        write_json(&dir.join(FC_FILE), &self.fc)?;
        write_json(&dir.join(PREPROCESS_FILE), &self.preprocess)?;
        let probe = self.probe_image();
        let logits = self.logits(&probe)?;
        write_json(&dir.join(PROBE_FILE), &ProbeRecord { logits })?;
        match &self.backbone {
            Backbone::Builtin(b) => {
                write_json(&dir.join(BUILTIN_FILE), b)?;
                #[cfg(feature = "onnx")]
                {
                    let BuiltinBackbone::GridMean { grid } = b;
                    let [h, w] = self.preprocess.resize;
                    if h % grid == 0 && w % grid == 0 {
                        onnx::write_grid_mean_graph(&dir.join(BACKBONE_FILE), h, w, *grid)?;
                    }
                }
                Ok(())
            }
            #[cfg(feature = "onnx")]
            Backbone::Onnx(_) => Err(EacError::BackendFailure(
                "re-serialising an interchange backbone is not supported".into(),
            )),
        }
    }

    fn probe_image(&self) -> Image {
        let [h, w] = self.preprocess.resize;
        Image::filled(w, h, [0.5; 3])
    }

    fn check_probe(&self, probe: &ProbeRecord) -> Result<()> {
        if probe.logits.len() != self.num_classes() {
            return Err(EacError::ProbeFailure(format!(
                "probe declares {} logits for {} classes",
                probe.logits.len(),
                self.num_classes()
            )));
        }
        let expected = softmax(&probe.logits);
        let got = self.predict(&self.probe_image())?;
        let gap = expected
            .0
            .iter()
            .zip(&got.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap > PROBE_TOLERANCE {
            return Err(EacError::ProbeFailure(format!(
                "probe probabilities differ by {gap:.3e}"
            )));
        }
        Ok(())
    }

    pub fn fc(&self) -> &FcLayer {
        &self.fc
    }

    pub fn preprocess(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.fc.num_classes()
    }

    pub fn labels(&self) -> &[String] {
        &self.fc.labels
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let chw = self.preprocess.apply(image)?;
        let [h, w] = self.preprocess.resize;
        self.backbone.features(&chw, h, w)
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.fc.logits(&self.features(image)?))
    }

    pub fn predict(&self, image: &Image) -> Result<ProbVec> {
        Ok(softmax(&self.logits(image)?))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeRecord {
    logits: Vec<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            EacError::MissingArtifact(path.to_path_buf())
        } else {
            EacError::io(path, e)
        }
    })?;
    serde_json::from_slice(&bytes).map_err(|source| EacError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| EacError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| EacError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dimensions() {
        let b = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        assert_eq!(b.feature_dim(), 48);
        assert_eq!(b.num_classes(), 5);
    }

    #[test]
    fn toy_is_seed_deterministic() {
        let a = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        let b = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        let c = ModelBundle::builtin_toy_model(8, 4, 5).unwrap();
        assert_eq!(a.fc(), b.fc());
        assert_ne!(a.fc(), c.fc());
    }

    #[test]
    fn toy_first_weight_matches_generator() {
        let b = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        // (1507201545562260538 >> 11) / 2^53 * 2 - 1, evaluated independently.
        assert!((b.fc().weight[0][0] - (-0.8365888809927888)).abs() < 1e-15);
    }

    #[test]
    fn constant_image_gives_constant_cells() {
        let b = ModelBundle::builtin_toy_model(3, 4, 3).unwrap();
        let f = b.features(&Image::filled(64, 64, [0.2, 0.4, 0.6])).unwrap();
        for (k, v) in f.iter().enumerate() {
            let expected = [0.2f32, 0.4, 0.6][k / 16] as f64;
            assert!((v - expected).abs() < 1e-6, "feature {k} = {v}");
        }
    }

    #[test]
    fn zero_image_features_are_zero() {
        let b = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        let f = b.features(&Image::filled(64, 64, [0.0; 3])).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        let p = b.predict(&Image::filled(64, 64, [0.0; 3])).unwrap();
        // Zero features leave only the bias.
        assert_eq!(p, softmax(&b.fc().bias));
    }

    #[test]
    fn features_are_bit_identical_across_calls() {
        let b = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        let img = Image::from_fn(50, 40, |x, y| [x as f32 / 50.0, y as f32 / 40.0, 0.3]);
        assert_eq!(b.features(&img).unwrap(), b.features(&img).unwrap());
    }

    #[test]
    fn grayscale_input_is_backend_failure() {
        let b = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        let gray = Image::new(4, 4, 1, vec![0.5; 16]).unwrap();
        assert!(matches!(b.features(&gray), Err(EacError::BackendFailure(_))));
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let p = softmax(&[1e4, -1e4, 0.0]);
        assert!(p.0.iter().all(|v| v.is_finite()));
        assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let u = softmax(&[3.0; 4]);
        assert!(u.0.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn fc_shape_mismatch() {
        let toy = ModelBundle::builtin_toy_model(7, 4, 5).unwrap();
        let mut fc = toy.fc().clone();
        for row in &mut fc.weight {
            row.push(0.0);
        }
        let err = ModelBundle::new(
            Backbone::Builtin(BuiltinBackbone::GridMean { grid: 4 }),
            fc,
            toy.preprocess().clone(),
        )
        .unwrap_err();
        assert!(matches!(err, EacError::ShapeMismatch(_)));
    }
}
