//! Browser bindings: render a procedural scene, look at the probabilistic
//! tokens a freshly initialised tokenizer assigns to its patches, and plot
//! the learning-rate schedule.

use wasm_bindgen::prelude::*;

use ovis_core::data::{description_record, ImageSource};
use ovis_core::model::{ModelConfig, OvisModel, VisualBridge};
use ovis_core::optim::LrSchedule;
use ovis_core::patch::{patchify, ImageTensor};
use ovis_core::rng::stream;
use ovis_core::tensor::{Tape, Tensor};
use ovis_core::tokenizer::{sparsity_stats, tokens_from_tensor};

pub const THRESHOLDS: [f64; 3] = [1e-4, 1e-5, 1e-6];

#[wasm_bindgen]
pub struct Demo {
    model: OvisModel<f32>,
    image: ImageTensor,
    caption: String,
}

fn js(e: ovis_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

impl Demo {
    pub fn build(seed: u32) -> ovis_core::Result<Self> {
        let model = OvisModel::new(ModelConfig::default(), seed as u64)?;
        let mut d = Self {
            image: ImageTensor::zeros(model.cfg.channels, model.cfg.image_width, model.cfg.image_height),
            caption: String::new(),
            model,
        };
        d.scene(0)?;
        Ok(d)
    }

    pub fn scene(&mut self, seed: u32) -> ovis_core::Result<String> {
        let rec = description_record(&mut stream(seed as u64, "web/scene", 0));
        let c = &self.model.cfg;
        self.image = rec.image.render(c.channels, c.image_width, c.image_height)?;
        self.caption = match &rec.image {
            ImageSource::Spec(s) => s.caption(),
            ImageSource::Pixels(_) => rec.target,
        };
        Ok(self.caption.clone())
    }

    /// `n × K` token probabilities with encoder outputs multiplied by `scale`
    /// before the tokenizer head. Larger scales sharpen the tokens.
    pub fn token_probs(&self, scale: f32) -> ovis_core::Result<Tensor<f32>> {
        let VisualBridge::Ovis { head, .. } = &self.model.bridge else {
            unreachable!("the demo model always uses the Ovis bridge");
        };
        let c = &self.model.cfg;
        let mut tape = Tape::new();
        let bind = self.model.store.bind(&mut tape, |_| false);
        let grid = patchify(&self.image, c.patch, c.patch)?;
        let patches = tape.constant(grid.to_tensor());
        let reps = self.model.encoder.forward(&mut tape, &bind, patches)?;
        let reps = tape.scale(reps, scale)?;
        let probs = head.forward(&mut tape, &bind, reps)?;
        Ok(tape.value(probs).clone())
    }

    pub fn sparsity_ratios(&self, scale: f32) -> ovis_core::Result<Vec<f64>> {
        let tokens = tokens_from_tensor(&self.token_probs(scale)?);
        Ok(sparsity_stats(&tokens, &THRESHOLDS)?.bucket_ratios)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Self::build(seed).map_err(js)
    }

    /// Draws a new scene and returns its caption.
    #[wasm_bindgen(js_name = loadScene)]
    pub fn load_scene(&mut self, seed: u32) -> Result<String, JsError> {
        self.scene(seed).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.caption.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.image.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.image.height
    }

    #[wasm_bindgen(getter, js_name = patchSize)]
    pub fn patch_size(&self) -> usize {
        self.model.cfg.patch
    }

    #[wasm_bindgen(getter, js_name = visualVocab)]
    pub fn visual_vocab(&self) -> usize {
        self.model.cfg.visual_vocab
    }

    /// Row-major RGBA bytes of the current scene.
    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Vec<u8> {
        let img = &self.image;
        let mut out = Vec::with_capacity(img.width * img.height * 4);
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..3 {
                    let v = img.get(c.min(img.channels - 1), x, y);
                    out.push((v * 255.0).round() as u8);
                }
                out.push(255);
            }
        }
        out
    }

    /// Flattened `n × K` probabilities.
    #[wasm_bindgen(js_name = tokenProbs)]
    pub fn token_probs_js(&self, scale: f32) -> Result<Vec<f32>, JsError> {
        Ok(self.token_probs(scale).map_err(js)?.into_data())
    }

    /// Fractions of probability values in `≥1e-4`, `[1e-5,1e-4)`,
    /// `[1e-6,1e-5)` and `<1e-6`.
    #[wasm_bindgen(js_name = sparsity)]
    pub fn sparsity_js(&self, scale: f32) -> Result<Vec<f64>, JsError> {
        self.sparsity_ratios(scale).map_err(js)
    }
}

/// Learning rate at steps `1..=total`.
#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve(base: f64, warmup_ratio: f64, total: usize) -> Result<Vec<f64>, JsError> {
    let s = LrSchedule::new(base, warmup_ratio, total).map_err(js)?;
    (1..=total).map(|k| s.lr_at(k).map_err(js)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_and_tokens() {
        let mut d = Demo::build(1).unwrap();
        let caption = d.scene(3).unwrap();
        assert!(!caption.is_empty());
        assert_eq!(d.image_rgba().len(), 32 * 32 * 4);
        let p = d.token_probs(1.0).unwrap();
        assert_eq!(p.shape(), &[16, 512]);
        for r in 0..16 {
            let s: f64 = p.row(r).iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-4);
        }
        let ratios = d.sparsity_ratios(1.0).unwrap();
        assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sharper_tokens_with_larger_scale() {
        let d = Demo::build(2).unwrap();
        let max_prob = |s| {
            let p = d.token_probs(s).unwrap();
            p.data().iter().copied().fold(0.0f32, f32::max)
        };
        assert!(max_prob(200.0) > max_prob(1.0));
    }
}
