//! The full two-stream model: configuration, parameter layout, input
//! preparation, and the forward pass down to class logits.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::axlstm::{
    axlstm_forward, init_attention_params, init_cell_params, CellKind, ForgetMode, RecurrentConfig, ATTN, CELL,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fusion_weights_on_tape, OMEGA};
use crate::gcn::{init_stream_params, stream_encode, FEATURE_DIM};
use crate::graph::{build_part_graph, PartitionedGraph, Strategy};
use crate::numeric::{finite_diff_report, xavier_uniform, GradCheckReport, Params, Tape, Tensor, Var};
use crate::skeleton::{
    impute_low_confidence, sample_frames, split_streams, PartAssignment, SkeletonSequence,
    DEFAULT_CONFIDENCE_THRESHOLD,
};

pub const HEAD: &str = "head";
pub const BODY: &str = "body";
pub const CLASSIFIER: &str = "classifier";
pub const NUM_CLASSES: usize = 2;

/// Which streams and pooling the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "head-only")]
    HeadOnly,
    #[serde(rename = "body-only")]
    BodyOnly,
    #[serde(rename = "fused")]
    Fused,
    #[serde(rename = "fused+attention")]
    FusedAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::HeadOnly,
        Variant::BodyOnly,
        Variant::Fused,
        Variant::FusedAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::HeadOnly => "head-only",
            Variant::BodyOnly => "body-only",
            Variant::Fused => "fused",
            Variant::FusedAttention => "fused+attention",
        }
    }

    pub fn uses_head(self) -> bool {
        self != Variant::BodyOnly
    }

    pub fn uses_body(self) -> bool {
        self != Variant::HeadOnly
    }

    pub fn uses_attention(self) -> bool {
        self == Variant::FusedAttention
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant `{s}`")))
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "slstm" => Ok(CellKind::Slstm),
            _ => Err(Error::Usage(format!("unknown cell `{s}`"))),
        }
    }
}

impl FromStr for ForgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(ForgetMode::Sigmoid),
            "exp" => Ok(ForgetMode::Exp),
            _ => Err(Error::Usage(format!("unknown forget mode `{s}`"))),
        }
    }
}

/// Body-stream partitioning when the model is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BodyPartition {
    #[default]
    Multiscale,
    ExactDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames sampled per clip.
    pub frames: usize,
    /// GCN hidden channel width.
    pub channels: usize,
    /// Scales `K` for the upper-body partition.
    pub scales: usize,
    pub body_partition: BodyPartition,
    /// Fusion reinforcement factor.
    pub lambda: f64,
    /// Attention window length.
    pub window: usize,
    /// Recurrent hidden size `n`.
    pub hidden: usize,
    pub cell: CellKind,
    pub forget: ForgetMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub confidence_threshold: f64,
    pub parts: PartAssignment,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            channels: 64,
            scales: 3,
            body_partition: BodyPartition::Multiscale,
            lambda: 1.0,
            window: 16,
            hidden: 64,
            cell: CellKind::Slstm,
            forget: ForgetMode::Sigmoid,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            variant: Variant::FusedAttention,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            parts: PartAssignment::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("channels", self.channels),
            ("scales", self.scales),
            ("window", self.window),
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Usage(format!("{name} must be >= 1")));
            }
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Usage(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Usage("confidence_threshold must lie in [0, 1]".into()));
        }
        self.parts.validate()
    }

    pub fn recurrent(&self) -> RecurrentConfig {
        RecurrentConfig {
            cell: self.cell,
            forget: self.forget,
            window: self.window,
        }
    }

    pub fn body_strategy(&self) -> Strategy {
        match self.body_partition {
            BodyPartition::Multiscale => Strategy::Multiscale(self.scales),
            BodyPartition::ExactDistance => Strategy::ExactDistance(self.scales),
        }
    }

    /// Head uses distance partitioning, upper body the configured multi-scale masks.
    pub fn build_graphs(&self) -> Result<(PartitionedGraph, PartitionedGraph)> {
        let head = PartitionedGraph::build(&build_part_graph(&self.parts.head)?, Strategy::Distance)?;
        let body = PartitionedGraph::build(&build_part_graph(&self.parts.upper_body)?, self.body_strategy())?;
        Ok((head, body))
    }
}

/// Every parameter the model needs, Glorot-initialised from `seed`; the fusion
/// weights start at zero.
pub fn init_params(cfg: &ModelConfig, head: &PartitionedGraph, body: &PartitionedGraph, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    if cfg.variant.uses_head() {
        init_stream_params(&mut rng, &mut p, HEAD, head.k(), cfg.channels);
    }
    if cfg.variant.uses_body() {
        init_stream_params(&mut rng, &mut p, BODY, body.k(), cfg.channels);
    }
    if cfg.variant.uses_head() && cfg.variant.uses_body() {
        p.insert(OMEGA, Tensor::zeros(&[2]));
    }
    init_cell_params(&mut rng, &mut p, CELL, FEATURE_DIM, cfg.hidden);
    if cfg.variant.uses_attention() {
        init_attention_params(&mut rng, &mut p, ATTN, FEATURE_DIM, cfg.hidden, cfg.window);
    }
    p.insert(
        format!("{CLASSIFIER}.w"),
        xavier_uniform(&mut rng, &[cfg.hidden, NUM_CLASSES], cfg.hidden, NUM_CLASSES),
    );
    p.insert(format!("{CLASSIFIER}.b"), Tensor::zeros(&[NUM_CLASSES]));
    p
}

/// Model-ready tensors for one session.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSession {
    pub session_id: String,
    /// `[T, |head|, 2]`
    pub head: Tensor,
    /// `[T, |upper_body|, 2]`
    pub body: Tensor,
    pub label: Option<usize>,
}

/// Imputation, fixed-length sampling, then per-part normalisation.
pub fn prepare(seq: &SkeletonSequence, cfg: &ModelConfig) -> Result<PreparedSession> {
    let imputed = impute_low_confidence(seq, cfg.confidence_threshold)?;
    let sampled = sample_frames(&imputed, cfg.frames)?;
    let (head, body) = split_streams(&sampled, &cfg.parts)?;
    Ok(PreparedSession {
        session_id: seq.session_id.clone(),
        head,
        body,
        label: seq.label.class_index(),
    })
}

/// Affine head producing `1×2` logits.
pub fn classify(tape: &mut Tape, embedding: Var, params: &Params) -> Result<Var> {
    let w = tape.param(&format!("{CLASSIFIER}.w"), params.get(&format!("{CLASSIFIER}.w"))?);
    let b = tape.param(&format!("{CLASSIFIER}.b"), params.get(&format!("{CLASSIFIER}.b"))?);
    let emb = tape.reshape(embedding, &[1, tape.value(embedding).numel()])?;
    let z = tape.matmul(emb, w)?;
    tape.add_row(z, b)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let ls = tape.log_softmax(logits);
    let picked = tape.select(ls, label)?;
    Ok(tape.neg(picked))
}

/// Softmax probabilities of a logit vector.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    crate::numeric::softmax_in_place(&mut p);
    p
}

pub struct ForwardOutput {
    pub logits: Var,
    pub embedding: Var,
    pub attention: Option<Var>,
    pub fusion: Option<Var>,
}

/// Forward pass for one prepared session.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &Params,
    head_graph: &PartitionedGraph,
    body_graph: &PartitionedGraph,
    input: &PreparedSession,
) -> Result<ForwardOutput> {
    let mut fusion = None;
    let features = match cfg.variant {
        Variant::HeadOnly => stream_encode(tape, &input.head, head_graph, params, HEAD)?,
        Variant::BodyOnly => stream_encode(tape, &input.body, body_graph, params, BODY)?,
        Variant::Fused | Variant::FusedAttention => {
            let body = stream_encode(tape, &input.body, body_graph, params, BODY)?;
            let head = stream_encode(tape, &input.head, head_graph, params, HEAD)?;
            let omega = tape.param(OMEGA, params.get(OMEGA)?);
            let alpha = fusion_weights_on_tape(tape, omega, cfg.lambda)?;
            fusion = Some(alpha);
            // stream order: m = 1 upper body, m = 2 head
            fuse(tape, &[body, head], alpha)?
        }
    };
    let (embedding, attention) =
        axlstm_forward(tape, features, params, &cfg.recurrent(), cfg.variant.uses_attention())?;
    let logits = classify(tape, embedding, params)?;
    Ok(ForwardOutput {
        logits,
        embedding,
        attention,
        fusion,
    })
}

/// Reduced configuration used for end-to-end gradient checks: 5-node head and
/// upper-body graphs, GCN width 8, hidden size 8, 12 frames.
pub fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        frames: 12,
        channels: 8,
        hidden: 8,
        window: 4,
        seed,
        variant: Variant::FusedAttention,
        parts: PartAssignment {
            upper_body: vec![5, 6, 7, 8, 9],
            head: vec![0, 1, 2, 3, 4],
        },
        ..ModelConfig::default()
    }
}

/// Central-difference check of the full fused+attention model on a random
/// input. Every parameter, including biases and the fusion weights, is
/// perturbed away from its initial value first.
pub fn gradcheck_model(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let cfg = gradcheck_config(seed);
    cfg.validate()?;
    let (head_pg, body_pg) = cfg.build_graphs()?;
    let mut params = init_params(&cfg, &head_pg, &body_pg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let mut coords = |n: usize| {
        let data = (0..cfg.frames * n * 2).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(vec![cfg.frames, n, 2], data)
    };
    let input = PreparedSession {
        session_id: "gradcheck".into(),
        head: coords(cfg.parts.head.len())?,
        body: coords(cfg.parts.upper_body.len())?,
        label: Some(0),
    };
    finite_diff_report(
        |tape, p| {
            let out = forward(tape, &cfg, p, &head_pg, &body_pg, &input)?;
            cross_entropy(tape, out.logits, 0)
        },
        &params,
        eps,
    )
}
