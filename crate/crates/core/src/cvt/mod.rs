//! CvT-13 inference from scratch: convolutional token embedding,
//! convolutional Q/K/V projection with strided keys and values, multi-head
//! attention, a final-stage classification token and a linear head, plus the
//! weight container and cell-crop classification.

mod cells;
mod model;
pub mod ops;
mod weights;

use serde::{Deserialize, Serialize};

pub use cells::{classify_cells, moore_contour, preprocess, CellInstance};
pub use model::{forward, forward_detailed, ForwardTrace};
pub use weights::{load_weights, random_weights, save_weights, Tensor, TensorStore};

use crate::imaging::ImagingError;

#[derive(Debug, thiserror::Error)]
pub enum CvtError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("weights are missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight container: {0}")]
    Format(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SIPaKMeD classes in output order.
pub const CLASS_NAMES: [&str; 5] = [
    "superficial-intermediate",
    "parabasal",
    "koilocytotic",
    "dyskeratotic",
    "metaplastic",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Upstream CvT-13: 3x3 stride-2 embeddings in stages 2-3, heads 1/3/6.
    Original13,
    /// Literal architecture table: 7x7 embeddings in stages 2-3, one head in
    /// stage 3.
    PaperTable,
}

impl std::str::FromStr for Variant {
    type Err = CvtError;
    fn from_str(s: &str) -> Result<Self, CvtError> {
        match s {
            "original13" => Ok(Variant::Original13),
            "paper_table" => Ok(Variant::PaperTable),
            other => Err(CvtError::Config(format!(
                "unknown variant {other:?} (original13 | paper_table)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub embed_kernel: usize,
    pub embed_stride: usize,
    pub embed_padding: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_kernel: usize,
    pub q_stride: usize,
    pub kv_stride: usize,
    pub qkv_bias: bool,
    pub with_cls_token: bool,
}

/// Recipe the upstream training run used; carried as metadata only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainingRecipe {
    pub optimizer: String,
    pub learning_rate: f64,
    pub scheduler: String,
    pub epochs: u32,
    pub batch_size: u32,
}

impl Default for ClassifierTrainingRecipe {
    fn default() -> Self {
        Self {
            optimizer: "adam".into(),
            learning_rate: 0.005,
            scheduler: "reduce_lr_on_plateau".into(),
            epochs: 100,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvTConfig {
    pub variant: Variant,
    pub stages: Vec<StageConfig>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    pub training: ClassifierTrainingRecipe,
}

fn stage(
    depth: usize,
    k: usize,
    s: usize,
    p: usize,
    dim: usize,
    heads: usize,
    cls: bool,
) -> StageConfig {
    StageConfig {
        depth,
        embed_kernel: k,
        embed_stride: s,
        embed_padding: p,
        embed_dim: dim,
        heads,
        mlp_ratio: 4,
        proj_kernel: 3,
        q_stride: 1,
        kv_stride: 2,
        qkv_bias: true,
        with_cls_token: cls,
    }
}

impl CvTConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        let stages = match variant {
            Variant::Original13 => vec![
                stage(1, 7, 4, 2, 64, 1, false),
                stage(2, 3, 2, 1, 192, 3, false),
                stage(10, 3, 2, 1, 384, 6, true),
            ],
            Variant::PaperTable => vec![
                stage(1, 7, 4, 2, 64, 1, false),
                stage(2, 7, 2, 3, 192, 3, false),
                stage(10, 7, 2, 3, 384, 1, true),
            ],
        };
        Self {
            variant,
            stages,
            in_channels: 3,
            num_classes,
            input_resolution: 224,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
            training: ClassifierTrainingRecipe::default(),
        }
    }

    pub fn original13() -> Self {
        Self::new(Variant::Original13, CLASS_NAMES.len())
    }

    pub fn paper_table() -> Self {
        Self::new(Variant::PaperTable, CLASS_NAMES.len())
    }

    pub fn validate(&self) -> Result<(), CvtError> {
        let bad = |m: String| Err(CvtError::Config(m));
        if self.stages.len() != 3 {
            return bad(format!("expected 3 stages, got {}", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.heads == 0 || s.embed_dim % s.heads != 0 {
                return bad(format!(
                    "stage {i}: dim {} not divisible by {} heads",
                    s.embed_dim, s.heads
                ));
            }
            if s.embed_stride == 0 || s.q_stride == 0 || s.kv_stride == 0 {
                return bad(format!("stage {i}: strides must be >= 1"));
            }
            if s.embed_kernel == 0 || s.proj_kernel % 2 == 0 || s.depth == 0 || s.mlp_ratio == 0 {
                return bad(format!("stage {i}: kernel sizes, depth and mlp ratio must be positive (odd projection kernel)"));
            }
            if s.with_cls_token != (i == 2) {
                return bad("only the final stage carries the classification token".into());
            }
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.input_resolution == 0 {
            return bad("classes, input channels and resolution must be positive".into());
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return bad("normalization std must be positive".into());
        }
        Ok(())
    }

    pub fn class_name(&self, index: usize) -> String {
        if self.num_classes == CLASS_NAMES.len() {
            CLASS_NAMES[index].to_string()
        } else {
            format!("class_{index}")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Parameter,
    /// Running statistics: stored with the weights, not trainable.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every tensor the forward pass reads, in a fixed order, with upstream
/// naming (`stage{i}.blocks.{j}.attn.conv_proj_q.conv.weight`, ...).
pub fn tensor_specs(cfg: &CvTConfig) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    let mut push =
        |name: String, shape: Vec<usize>, kind| out.push(TensorSpec { name, shape, kind });
    let p = TensorKind::Parameter;
    let mut cin = cfg.in_channels;
    for (i, s) in cfg.stages.iter().enumerate() {
        let d = s.embed_dim;
        let pre = format!("stage{i}");
        push(
            format!("{pre}.patch_embed.proj.weight"),
            vec![d, cin, s.embed_kernel, s.embed_kernel],
            p,
        );
        push(format!("{pre}.patch_embed.proj.bias"), vec![d], p);
        push(format!("{pre}.patch_embed.norm.weight"), vec![d], p);
        push(format!("{pre}.patch_embed.norm.bias"), vec![d], p);
        if s.with_cls_token {
            push(format!("{pre}.cls_token"), vec![1, 1, d], p);
        }
        for j in 0..s.depth {
            let b = format!("{pre}.blocks.{j}");
            push(format!("{b}.norm1.weight"), vec![d], p);
            push(format!("{b}.norm1.bias"), vec![d], p);
            for qkv in ["q", "k", "v"] {
                let c = format!("{b}.attn.conv_proj_{qkv}");
                push(
                    format!("{c}.conv.weight"),
                    vec![d, 1, s.proj_kernel, s.proj_kernel],
                    p,
                );
                push(format!("{c}.bn.weight"), vec![d], p);
                push(format!("{c}.bn.bias"), vec![d], p);
                push(format!("{c}.bn.running_mean"), vec![d], TensorKind::Buffer);
                push(format!("{c}.bn.running_var"), vec![d], TensorKind::Buffer);
            }
            for qkv in ["q", "k", "v"] {
                push(format!("{b}.attn.proj_{qkv}.weight"), vec![d, d], p);
                if s.qkv_bias {
                    push(format!("{b}.attn.proj_{qkv}.bias"), vec![d], p);
                }
            }
            push(format!("{b}.attn.proj.weight"), vec![d, d], p);
            push(format!("{b}.attn.proj.bias"), vec![d], p);
            push(format!("{b}.norm2.weight"), vec![d], p);
            push(format!("{b}.norm2.bias"), vec![d], p);
            let hidden = d * s.mlp_ratio;
            push(format!("{b}.mlp.fc1.weight"), vec![hidden, d], p);
            push(format!("{b}.mlp.fc1.bias"), vec![hidden], p);
            push(format!("{b}.mlp.fc2.weight"), vec![d, hidden], p);
            push(format!("{b}.mlp.fc2.bias"), vec![d], p);
        }
        cin = d;
    }
    push("norm.weight".into(), vec![cin], p);
    push("norm.bias".into(), vec![cin], p);
    push("head.weight".into(), vec![cfg.num_classes, cin], p);
    push("head.bias".into(), vec![cfg.num_classes], p);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    /// All trainable parameters.
    pub total: usize,
    /// Excluding the final linear head.
    pub without_head: usize,
}

/// Trainable parameters implied by the config (running statistics excluded).
pub fn count_parameters(cfg: &CvTConfig) -> ParameterCount {
    let specs = tensor_specs(cfg);
    let params = specs.iter().filter(|s| s.kind == TensorKind::Parameter);
    let total = params.clone().map(TensorSpec::numel).sum();
    let head: usize = params
        .filter(|s| s.name.starts_with("head."))
        .map(TensorSpec::numel)
        .sum();
    ParameterCount {
        total,
        without_head: total - head,
    }
}

/// Per-class probabilities with the arg-max (ties to the lowest index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl ClassProbabilities {
    pub fn from_logits(logits: &[f32]) -> Self {
        let m = logits
            .iter()
            .map(|&v| v as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|v| v / z).collect();
        Self {
            predicted: argmax(&probs),
            probs,
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
