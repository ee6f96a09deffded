//! Interchange-format backbone, run with tract.

use std::path::Path;
use std::sync::Arc;

use prost::Message;
use tract_onnx::pb;
use tract_onnx::prelude::*;

use crate::error::{EacError, Result};

type Plan = Arc<TypedRunnableModel>;

/// A loaded `[1,3,H,W] -> [1,m]` graph, optimised for a fixed input size.
pub struct OnnxBackbone {
    plan: Plan,
}

impl std::fmt::Debug for OnnxBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackbone").finish_non_exhaustive()
    }
}

fn backend(e: impl std::fmt::Display) -> EacError {
    EacError::BackendFailure(e.to_string())
}

impl OnnxBackbone {
    pub fn load(path: &Path, resize: [usize; 2]) -> Result<Self> {
        let [h, w] = resize;
        let plan = tract_onnx::onnx()
            .model_for_path(path)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, h, w]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| EacError::ShapeMismatch(format!("{}: {e:#}", path.display())))?;
        Ok(Self { plan })
    }

    pub fn run(&self, chw: &[f32], height: usize, width: usize) -> Result<Vec<f64>> {
        let input = tract_ndarray::Array4::from_shape_vec((1, 3, height, width), chw.to_vec())
            .map_err(backend)?;
        let outputs = self
            .plan
            .run(tvec!(Tensor::from(input).into()))
            .map_err(backend)?;
        let features = outputs[0].to_plain_array_view::<f32>().map_err(backend)?;
        Ok(features.iter().map(|&v| v as f64).collect())
    }
}

fn tensor_type(dims: &[i64]) -> Option<pb::TypeProto> {
    use pb::tensor_shape_proto::{dimension, Dimension};
    Some(pb::TypeProto {
        value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
            elem_type: pb::tensor_proto::DataType::Float as i32,
            shape: Some(pb::TensorShapeProto {
                dim: dims
                    .iter()
                    .map(|&d| Dimension {
                        value: Some(dimension::Value::DimValue(d)),
                        ..Default::default()
                    })
                    .collect(),
            }),
        })),
        ..Default::default()
    })
}

fn ints(name: &str, values: Vec<i64>) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Ints as i32,
        ints: values,
        ..Default::default()
    }
}

/// Writes the grid-mean backbone as `AveragePool(kernel = stride = cell) -> Flatten`.
/// Needs `height` and `width` divisible by `grid`.
pub fn write_grid_mean_graph(path: &Path, height: usize, width: usize, grid: usize) -> Result<()> {
    let (kh, kw) = ((height / grid) as i64, (width / grid) as i64);
    let g = grid as i64;
    let pool = pb::NodeProto {
        input: vec!["input".into()],
        output: vec!["cells".into()],
        name: "pool".into(),
        op_type: "AveragePool".into(),
        attribute: vec![ints("kernel_shape", vec![kh, kw]), ints("strides", vec![kh, kw])],
        ..Default::default()
    };
    let flatten = pb::NodeProto {
        input: vec!["cells".into()],
        output: vec!["features".into()],
        name: "flatten".into(),
        op_type: "Flatten".into(),
        attribute: vec![pb::AttributeProto {
            name: "axis".into(),
            r#type: pb::attribute_proto::AttributeType::Int as i32,
            i: 1,
            ..Default::default()
        }],
        ..Default::default()
    };
    let model = pb::ModelProto {
        ir_version: 7,
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        producer_name: "eac".into(),
        graph: Some(pb::GraphProto {
            node: vec![pool, flatten],
            name: "grid_mean".into(),
            input: vec![pb::ValueInfoProto {
                name: "input".into(),
                r#type: tensor_type(&[1, 3, height as i64, width as i64]),
                ..Default::default()
            }],
            output: vec![pb::ValueInfoProto {
                name: "features".into(),
                r#type: tensor_type(&[1, 3 * g * g]),
                ..Default::default()
            }],
            ..Default::default()
        }),
        ..Default::default()
    };
    std::fs::write(path, model.encode_to_vec()).map_err(|e| EacError::io(path, e))
}
