//! Network topologies and their checkpoint format.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::{BatchNorm2d, Conv2d, Dense, Layer, ModelGraph, ResidualBlock, TensorError, Upsample};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, CKPT_MAGIC, CKPT_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("input {height}x{width} must be divisible by {required} (2^stages)")]
    Divisibility { height: usize, width: usize, required: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
}

pub type Result<T, E = ZooError> = std::result::Result<T, E>;

/// Which of the three networks a graph plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    ArtifactSeg,
    TumorSeg,
    Classifier,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ArtifactSeg => "artifact-seg",
            ModelKind::TumorSeg => "tumor-seg",
            ModelKind::Classifier => "classifier",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "artifact-seg" => Ok(ModelKind::ArtifactSeg),
            "tumor-seg" => Ok(ModelKind::TumorSeg),
            "classifier" => Ok(ModelKind::Classifier),
            other => Err(format!("unknown model `{other}` (artifact-seg, tumor-seg, classifier)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Residual-encoder U-Net with a single sigmoid output channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    /// Residual blocks per encoder stage; every stage halves resolution.
    pub stage_blocks: Vec<usize>,
    pub seed: u64,
}

impl UNetConfig {
    pub fn desk(height: usize, width: usize, seed: u64) -> Self {
        UNetConfig { in_channels: 3, height, width, base_channels: 8, stage_blocks: vec![1, 1, 1, 1], seed }
    }

    /// Full-width encoder mirroring the 34-layer residual net.
    pub fn full(height: usize, width: usize, seed: u64) -> Self {
        UNetConfig { base_channels: 64, stage_blocks: vec![3, 4, 6, 3], ..UNetConfig::desk(height, width, seed) }
    }

    pub fn divisor(&self) -> usize {
        1 << self.stage_blocks.len()
    }
}

/// Residual patch classifier ending in global pooling, dense and softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub stage_blocks: Vec<usize>,
    /// Bottleneck blocks (4× expansion) instead of basic blocks.
    pub bottleneck: bool,
    pub classes: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn desk(seed: u64) -> Self {
        ClassifierConfig {
            in_channels: 3,
            height: 256,
            width: 256,
            base_channels: 8,
            stage_blocks: vec![1, 1, 1, 1],
            bottleneck: false,
            classes: 2,
            seed,
        }
    }

    /// Bottleneck stages mirroring the 101-layer residual net.
    pub fn full(seed: u64) -> Self {
        ClassifierConfig {
            base_channels: 64,
            stage_blocks: vec![3, 4, 23, 3],
            bottleneck: true,
            ..ClassifierConfig::desk(seed)
        }
    }

    pub fn divisor(&self) -> usize {
        1 << self.stage_blocks.len()
    }
}

/// Enough to rebuild a graph's topology from a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum ModelSpec {
    Unet { kind: ModelKind, config: UNetConfig },
    Classifier { config: ClassifierConfig },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Unet { kind, .. } => *kind,
            ModelSpec::Classifier { .. } => ModelKind::Classifier,
        }
    }

    pub fn build(&self) -> Result<ModelGraph> {
        match self {
            ModelSpec::Unet { kind, config } => build_unet_named(kind.name(), config),
            ModelSpec::Classifier { config } => build_classifier(config),
        }
    }

    /// Per-sample input shape (C, H, W).
    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self {
            ModelSpec::Unet { config: c, .. } => (c.in_channels, c.height, c.width),
            ModelSpec::Classifier { config: c } => (c.in_channels, c.height, c.width),
        }
    }
}

fn check_dims(height: usize, width: usize, stages: usize, required: usize) -> Result<()> {
    if stages == 0 {
        return Err(ZooError::Config("at least one encoder stage is required".into()));
    }
    if height == 0 || width == 0 || !height.is_multiple_of(required) || !width.is_multiple_of(required) {
        return Err(ZooError::Divisibility { height, width, required });
    }
    Ok(())
}

fn conv_bn_relu(layers: &mut Vec<Layer<f32>>, name: &str, cin: usize, cout: usize, r: &mut rng::Rng) -> Result<()> {
    layers.push(Layer::Conv2d(Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 1, false, r)?));
    layers.push(Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.bn"), cout)));
    layers.push(Layer::Relu);
    Ok(())
}

pub fn build_unet(cfg: &UNetConfig) -> Result<ModelGraph> {
    build_unet_named("unet", cfg)
}

fn build_unet_named(name: &str, cfg: &UNetConfig) -> Result<ModelGraph> {
    check_dims(cfg.height, cfg.width, cfg.stage_blocks.len(), cfg.divisor())?;
    if cfg.base_channels == 0 || cfg.in_channels == 0 || cfg.stage_blocks.contains(&0) {
        return Err(ZooError::Config("channels and block counts must be positive".into()));
    }
    let mut r = rng::stream(cfg.seed, "init");
    let mut layers = Vec::new();
    // (layer index of the tap, its channels), full resolution first.
    let mut taps = Vec::new();

    conv_bn_relu(&mut layers, "stem", cfg.in_channels, cfg.base_channels, &mut r)?;
    taps.push((layers.len() - 1, cfg.base_channels));

    let mut ch = cfg.base_channels;
    for (s, &blocks) in cfg.stage_blocks.iter().enumerate() {
        let out = cfg.base_channels << s;
        for b in 0..blocks {
            let stride = if b == 0 { 2 } else { 1 };
            let block = ResidualBlock::basic(&format!("enc{s}.{b}"), ch, out, stride, &mut r)?;
            layers.push(Layer::Residual(Box::new(block)));
            ch = out;
        }
        taps.push((layers.len() - 1, out));
    }
    // The deepest tap is the bottleneck itself; pair the rest in reverse.
    taps.pop();
    for (d, &(tap, tap_ch)) in taps.iter().rev().enumerate() {
        layers.push(Layer::Upsample(Upsample::new(&format!("dec{d}.up"), ch, tap_ch, &mut r)?));
        layers.push(Layer::BatchNorm2d(BatchNorm2d::new(&format!("dec{d}.up_bn"), tap_ch)));
        layers.push(Layer::Relu);
        layers.push(Layer::ConcatSkip { from: tap });
        conv_bn_relu(&mut layers, &format!("dec{d}.fuse"), 2 * tap_ch, tap_ch, &mut r)?;
        ch = tap_ch;
    }
    layers.push(Layer::Conv2d(Conv2d::new("head", ch, 1, 1, 1, true, &mut r)?));
    layers.push(Layer::Sigmoid);
    Ok(ModelGraph::new(name, vec![cfg.in_channels, cfg.height, cfg.width], layers)?)
}

pub fn build_classifier(cfg: &ClassifierConfig) -> Result<ModelGraph> {
    check_dims(cfg.height, cfg.width, cfg.stage_blocks.len(), cfg.divisor())?;
    if cfg.base_channels == 0 || cfg.classes < 2 || cfg.stage_blocks.contains(&0) {
        return Err(ZooError::Config("need positive widths and at least two classes".into()));
    }
    let mut r = rng::stream(cfg.seed, "init");
    let mut layers = Vec::new();
    conv_bn_relu(&mut layers, "stem", cfg.in_channels, cfg.base_channels, &mut r)?;
    layers.push(Layer::MaxPool2x2);
    let mut ch = cfg.base_channels;
    for (s, &blocks) in cfg.stage_blocks.iter().enumerate() {
        let width = cfg.base_channels << s;
        let out = if cfg.bottleneck { 4 * width } else { width };
        for b in 0..blocks {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let name = format!("stage{s}.{b}");
            let block = if cfg.bottleneck {
                ResidualBlock::bottleneck(&name, ch, width, out, stride, &mut r)?
            } else {
                ResidualBlock::basic(&name, ch, out, stride, &mut r)?
            };
            layers.push(Layer::Residual(Box::new(block)));
            ch = out;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dense(Dense::new("fc", ch, cfg.classes, &mut r)));
    layers.push(Layer::Softmax);
    Ok(ModelGraph::new("classifier", vec![cfg.in_channels, cfg.height, cfg.width], layers)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tensor};

    #[test]
    fn desk_unet_preserves_spatial_dims() {
        let g = build_unet(&UNetConfig::desk(256, 256, 1)).unwrap();
        assert_eq!(g.output_dims(&[1, 3, 256, 256]).unwrap(), vec![1, 1, 256, 256]);
        assert_eq!(g.param_count(), build_unet(&UNetConfig::desk(256, 256, 1)).unwrap().param_count());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let err = build_unet(&UNetConfig::desk(250, 250, 1)).unwrap_err();
        assert!(matches!(err, ZooError::Divisibility { required: 16, .. }), "{err}");
    }

    #[test]
    fn classifier_rows_sum_to_one() {
        let mut g = build_classifier(&ClassifierConfig::desk(3)).unwrap();
        let x = Tensor::from_fn(&[4, 3, 256, 256], |i| ((i * 37) % 101) as f32 / 100.0).unwrap();
        let y = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dims(), &[4, 2]);
        for row in y.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn init_depends_on_seed_only() {
        let snapshot = |seed| {
            let g = build_classifier(&ClassifierConfig::desk(seed)).unwrap();
            let mut v = Vec::new();
            g.visit_params(&mut |p| v.extend_from_slice(p.value.data()));
            v
        };
        assert_eq!(snapshot(5), snapshot(5));
        assert_ne!(snapshot(5), snapshot(6));
    }

    #[test]
    fn full_topologies_have_consistent_shapes() {
        let u = build_unet(&UNetConfig::full(1024, 2048, 0)).unwrap();
        assert_eq!(u.output_dims(&[1, 3, 1024, 2048]).unwrap(), vec![1, 1, 1024, 2048]);
        let c = build_classifier(&ClassifierConfig::full(0)).unwrap();
        assert_eq!(c.output_dims(&[2, 3, 256, 256]).unwrap(), vec![2, 2]);
        let blocks = c.layers().iter().filter(|l| matches!(l, Layer::Residual(_))).count();
        assert_eq!(blocks, 33);
    }
}
