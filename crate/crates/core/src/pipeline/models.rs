use super::{PipelineError, Result};
use crate::sampler::POSITIVE_THRESHOLD;
use crate::slide_io::MaskPair;
use crate::tensor::{ModelGraph, Tensor};

/// The three models of the ensemble as the pipeline sees them. Patch
/// calls receive the analysis-resolution origins of the batch items.
pub trait SlideModels: Sync {
    /// Artifact model input (height, width) for an analysis image of
    /// `analysis_hw`; `None` skips artifact segmentation.
    fn artifact_input(&self, analysis_hw: (usize, usize)) -> Option<(usize, usize)>;
    /// 1×3×H×W image to 1×1×H×W probabilities.
    fn segment_artifact(&self, image: &Tensor) -> Result<Tensor>;
    fn has_tumor_seg(&self) -> bool;
    fn has_classifier(&self) -> bool;
    /// N×3×P×P patches to N×1×P×P probabilities.
    fn segment_tumor(&self, batch: &Tensor, origins: &[(usize, usize)]) -> Result<Tensor>;
    /// Tumor probability per patch.
    fn classify(&self, batch: &Tensor, origins: &[(usize, usize)]) -> Result<Vec<f64>>;
    /// Bytes held by model parameters and running statistics.
    fn footprint_bytes(&self) -> usize;
}

/// Trained networks; any of them may be absent.
#[derive(Debug, Clone, Default)]
pub struct Ensemble {
    pub artifact: Option<ModelGraph>,
    pub tumor: Option<ModelGraph>,
    pub classifier: Option<ModelGraph>,
}

fn graph_bytes(g: &ModelGraph) -> usize {
    let mut n = 0;
    g.visit_state(&mut |p| n += p.value.len() * std::mem::size_of::<f32>());
    n
}

impl Ensemble {
    /// Patch models must take 3×`patch`×`patch` input.
    pub fn check(&self, patch: usize) -> Result<()> {
        for (name, g) in [("tumor-seg", &self.tumor), ("classifier", &self.classifier)] {
            if let Some(g) = g {
                if g.input_signature() != [3, patch, patch] {
                    return Err(PipelineError::ModelShape {
                        model: name,
                        expected: vec![3, patch, patch],
                        got: g.input_signature().to_vec(),
                    });
                }
            }
        }
        if let Some(g) = &self.artifact {
            if g.input_signature().len() != 3 || g.input_signature()[0] != 3 {
                return Err(PipelineError::ModelShape {
                    model: "artifact-seg",
                    expected: vec![3, 0, 0],
                    got: g.input_signature().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn require<'a>(g: &'a Option<ModelGraph>, name: &'static str) -> Result<&'a ModelGraph> {
    g.as_ref().ok_or(PipelineError::MissingModel(name))
}

impl SlideModels for Ensemble {
    fn artifact_input(&self, _analysis_hw: (usize, usize)) -> Option<(usize, usize)> {
        self.artifact.as_ref().map(|g| (g.input_signature()[1], g.input_signature()[2]))
    }
    fn segment_artifact(&self, image: &Tensor) -> Result<Tensor> {
        Ok(require(&self.artifact, "artifact-seg")?.infer(image)?)
    }
    fn has_tumor_seg(&self) -> bool {
        self.tumor.is_some()
    }
    fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }
    fn segment_tumor(&self, batch: &Tensor, _origins: &[(usize, usize)]) -> Result<Tensor> {
        Ok(require(&self.tumor, "tumor-seg")?.infer(batch)?)
    }
    fn classify(&self, batch: &Tensor, _origins: &[(usize, usize)]) -> Result<Vec<f64>> {
        let y = require(&self.classifier, "classifier")?.infer(batch)?;
        let k = y.dims()[1];
        Ok(y.data().chunks(k).map(|row| row[1.min(k - 1)] as f64).collect())
    }
    fn footprint_bytes(&self) -> usize {
        [&self.artifact, &self.tumor, &self.classifier].into_iter().flatten().map(graph_bytes).sum()
    }
}

/// Stub models that replay ground truth at analysis resolution; inverted
/// stubs replay its complement. Used to test the plumbing around models.
#[derive(Debug, Clone)]
pub struct OracleModels {
    pub truth: MaskPair,
    pub inverted: bool,
}

impl OracleModels {
    fn value(&self, set: bool) -> f32 {
        (set != self.inverted) as u8 as f32
    }
}

impl SlideModels for OracleModels {
    fn artifact_input(&self, analysis_hw: (usize, usize)) -> Option<(usize, usize)> {
        Some(analysis_hw)
    }
    fn segment_artifact(&self, image: &Tensor) -> Result<Tensor> {
        let m = &self.truth.artifact;
        if image.dims() != [1, 3, m.height, m.width] {
            return Err(PipelineError::Dims(format!(
                "oracle artifact input {:?} does not match truth {}x{}",
                image.dims(),
                m.width,
                m.height
            )));
        }
        let data = m.data.iter().map(|&v| self.value(v != 0)).collect();
        Ok(Tensor::new(&[1, 1, m.height, m.width], data)?)
    }
    fn has_tumor_seg(&self) -> bool {
        true
    }
    fn has_classifier(&self) -> bool {
        true
    }
    fn segment_tumor(&self, batch: &Tensor, origins: &[(usize, usize)]) -> Result<Tensor> {
        let p = batch.dims()[2];
        let mut data = Vec::with_capacity(origins.len() * p * p);
        for &(x, y) in origins {
            let m = self.truth.tumor.crop(x, y, p, p)?;
            data.extend(m.data.iter().map(|&v| self.value(v != 0)));
        }
        Ok(Tensor::new(&[origins.len(), 1, p, p], data)?)
    }
    fn classify(&self, batch: &Tensor, origins: &[(usize, usize)]) -> Result<Vec<f64>> {
        let p = batch.dims()[2];
        origins
            .iter()
            .map(|&(x, y)| {
                let f = self.truth.tumor.crop(x, y, p, p)?.fraction();
                Ok(self.value(f >= POSITIVE_THRESHOLD) as f64)
            })
            .collect()
    }
    fn footprint_bytes(&self) -> usize {
        0
    }
}
