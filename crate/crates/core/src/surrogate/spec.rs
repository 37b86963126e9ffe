use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Stacked hidden blocks without skip connections.
    PlainMlp,
    /// Hidden blocks with an additive skip.
    ResidualMlp,
    /// Residual blocks with squeeze-and-excitation gating before the skip add.
    SeResidualMlp,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::PlainMlp => "plain-mlp",
            Family::ResidualMlp => "residual-mlp",
            Family::SeResidualMlp => "se-residual-mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    SmoothL1,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::SmoothL1 => "smooth-l1",
        }
    }
}

/// Architecture and training recipe for one surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    /// Bottleneck ratio of the SE gate; ignored for other families.
    #[serde(default)]
    pub se_reduction: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// One dense layer in the flat weight vector: a row-major `out × in`
/// matrix followed by `out` biases, starting at `offset`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub offset: usize,
    pub weight_count: usize,
}

impl LayerInfo {
    pub fn bias_offset(&self) -> usize {
        self.offset + self.in_dim * self.out_dim
    }
}

impl ModelSpec {
    pub fn new(family: Family, input_dim: usize, output_dim: usize, hidden_dim: usize, n_blocks: usize) -> Self {
        Self {
            family,
            input_dim,
            output_dim,
            hidden_dim,
            n_blocks,
            se_reduction: if family == Family::SeResidualMlp { 16 } else { 0 },
            activation: Activation::Relu,
            loss: LossKind::Mse,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            init_seed: 0,
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_se_reduction(mut self, r: usize) -> Self {
        self.se_reduction = r;
        self
    }

    pub fn with_training(mut self, learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        self.learning_rate = learning_rate;
        self.epochs = epochs;
        self.batch_size = batch_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    /// Every violated invariant, or `Ok` when there are none.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be at least 1".to_string());
        }
        if self.output_dim == 0 {
            problems.push("output_dim must be at least 1".to_string());
        }
        if self.hidden_dim == 0 {
            problems.push("hidden_dim must be at least 1".to_string());
        }
        if self.n_blocks == 0 {
            problems.push("n_blocks must be at least 1".to_string());
        }
        if self.family == Family::SeResidualMlp {
            if self.se_reduction == 0 {
                problems.push("se_reduction must be at least 1".to_string());
            } else if self.hidden_dim % self.se_reduction != 0 {
                problems.push(format!(
                    "se_reduction {} does not divide hidden_dim {}",
                    self.se_reduction, self.hidden_dim
                ));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems))
        }
    }

    pub fn has_skip(&self) -> bool {
        self.family != Family::PlainMlp
    }

    pub fn has_se(&self) -> bool {
        self.family == Family::SeResidualMlp
    }

    pub fn se_dim(&self) -> usize {
        if self.has_se() {
            self.hidden_dim / self.se_reduction
        } else {
            0
        }
    }

    /// Layer ordering: `input`, then per block `fc1`, `fc2` (and `se_down`,
    /// `se_up` for the SE family), then `output`.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let h = self.hidden_dim;
        let mut shapes: Vec<(String, usize, usize)> = vec![("input".into(), self.input_dim, h)];
        for b in 0..self.n_blocks {
            shapes.push((format!("block{b}.fc1"), h, h));
            shapes.push((format!("block{b}.fc2"), h, h));
            if self.has_se() {
                shapes.push((format!("block{b}.se_down"), h, self.se_dim()));
                shapes.push((format!("block{b}.se_up"), self.se_dim(), h));
            }
        }
        shapes.push(("output".into(), h, self.output_dim));

        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, in_dim, out_dim)| {
                let weight_count = in_dim * out_dim + out_dim;
                let info = LayerInfo {
                    name,
                    in_dim,
                    out_dim,
                    offset,
                    weight_count,
                };
                offset += weight_count;
                info
            })
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers().iter().map(|l| l.weight_count).sum()
    }

    /// Identity used to avoid re-proposing an architecture.
    pub fn signature(&self) -> String {
        let mut s = format!(
            "{}:{}x{}",
            self.family.as_str(),
            self.hidden_dim,
            self.n_blocks
        );
        if self.has_se() {
            s.push_str(&format!("/se{}", self.se_reduction));
        }
        s.push(':');
        s.push_str(self.loss.as_str());
        s
    }
}
