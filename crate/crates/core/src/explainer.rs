//! Explanation subset selection, rendering and the JSON report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curve_eval::{Curve, XAxis};
use crate::error::{EacError, Result};
use crate::masking::{Coalition, Scene};
use crate::pie::{FidelityReport, SurrogateMode};
use crate::raster::Image;
use crate::shapley::{EstimationMode, ShapleyResult, UtilityKind};

/// Concept indices by value, highest first; ties go to the lower index.
pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// The subset maximising the summed value: every strictly positive concept.
/// Falls back to the single best concept when none is positive.
pub fn select_explanation(result: &ShapleyResult) -> Vec<usize> {
    let positive: Vec<usize> = (0..result.n()).filter(|&i| result.values[i] > 0.0).collect();
    if positive.is_empty() {
        ranking(&result.values).into_iter().take(1).collect()
    } else {
        positive
    }
}

/// Masks every concept outside `selected`.
pub fn render_explanation(scene: &Scene, selected: &[usize]) -> Result<Image> {
    scene.apply(&Coalition::from_indices(scene.n(), selected.iter().copied()))
}

/// Rounds to six significant digits.
pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptValue {
    pub id: usize,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedCurve {
    #[serde(flatten)]
    pub curve: Curve,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub x_axis: XAxis,
    pub curves: Vec<EvaluatedCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub mode: SurrogateMode,
    pub samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub fc_checksum: Option<String>,
    pub holdout: FidelityReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Distinct coalitions the Shapley utility was evaluated on.
    pub utility_evaluations: usize,
    /// Wall-clock milliseconds per stage; only present when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<BTreeMap<String, f64>>,
}

/// One explanation run, in report field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image: Option<String>,
    pub n_concepts: usize,
    pub target_class: usize,
    pub label: Option<String>,
    pub shapley: Vec<ConceptValue>,
    pub ranking: Vec<usize>,
    pub selected: Vec<usize>,
    pub mode: EstimationMode,
    pub utility_kind: UtilityKind,
    #[serde(rename = "K")]
    pub samples_per_concept: usize,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub timings: Timings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

impl Explanation {
    pub fn new(result: &ShapleyResult, target_class: usize, label: Option<String>, config: serde_json::Value) -> Self {
        Self {
            image: None,
            n_concepts: result.n(),
            target_class,
            label,
            shapley: result
                .values
                .iter()
                .zip(&result.stderr)
                .enumerate()
                .map(|(id, (&value, &stderr))| ConceptValue { id, value, stderr })
                .collect(),
            ranking: ranking(&result.values),
            selected: select_explanation(result),
            mode: result.mode,
            utility_kind: result.utility_kind,
            samples_per_concept: result.samples_per_concept,
            seed: result.seed,
            config,
            timings: Timings {
                utility_evaluations: result.utility_evaluations,
                ..Timings::default()
            },
            surrogate: None,
            eval: None,
        }
    }

    pub fn shapley_result(&self) -> ShapleyResult {
        ShapleyResult {
            values: self.shapley.iter().map(|c| c.value).collect(),
            stderr: self.shapley.iter().map(|c| c.stderr).collect(),
            samples_per_concept: self.samples_per_concept,
            seed: self.seed,
            mode: self.mode,
            utility_kind: self.utility_kind,
            utility_evaluations: self.timings.utility_evaluations,
        }
    }

    /// Copy with every reported real rounded to six significant digits.
    pub fn rounded(&self) -> Self {
        let mut e = self.clone();
        for c in &mut e.shapley {
            c.value = round_sig(c.value);
            c.stderr = round_sig(c.stderr);
        }
        if let Some(s) = &mut e.surrogate {
            s.initial_loss = round_sig(s.initial_loss);
            s.final_loss = round_sig(s.final_loss);
            s.holdout.top1_agreement = round_sig(s.holdout.top1_agreement);
            s.holdout.mean_abs_prob_gap = round_sig(s.holdout.mean_abs_prob_gap);
        }
        if let Some(eval) = &mut e.eval {
            for c in &mut eval.curves {
                c.auc = round_sig(c.auc);
                for p in &mut c.curve.points {
                    *p = [round_sig(p[0]), round_sig(p[1])];
                }
            }
        }
        if let Some(wall) = &mut e.timings.wall_ms {
            wall.values_mut().for_each(|v| *v = round_sig(*v));
        }
        e
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.rounded()).expect("report serialises");
        text.push('\n');
        text
    }
}

/// Writes the rounded report through a temporary file renamed into place.
pub fn write_report(explanation: &Explanation, out_path: &Path) -> Result<()> {
    write_atomic(out_path, explanation.to_json().as_bytes())
}

pub fn read_report(path: &Path) -> Result<Explanation> {
    let bytes = std::fs::read(path).map_err(|e| EacError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| EacError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp_path = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp_path, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp_path);
        return Err(EacError::io(path, e));
    }
    Ok(())
}
