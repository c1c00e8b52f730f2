//! Splices visual embeddings into the textual embedding sequence.
//!
//! The image indicator occupies one slot of the prompt; its own textual
//! embedding is dropped and the `n` visual embeddings take its place, so a
//! sequence of `m` text tokens with one image becomes `m − 1 + n` rows.

use crate::embedding::TextualEmbeddingTable;
use crate::error::{Error, Result};
use crate::params::Binding;
use crate::patch::ImageTensor;
use crate::tensor::{Scalar, Tape, Var};
use crate::text::TextVocab;

pub const CAPTION_TEMPLATE: &str = "<image>'s caption:";

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub image: Option<ImageTensor>,
}

impl MultimodalSample {
    /// Index of the image indicator in the prompt, after checking that it
    /// appears at most once and exactly when an image is attached.
    pub fn indicator(&self, image_id: usize) -> Result<Option<usize>> {
        let mut hits = self.prompt.iter().enumerate().filter(|(_, &t)| t == image_id).map(|(i, _)| i);
        let first = hits.next();
        if hits.next().is_some() {
            return Err(Error::Sequence("more than one image indicator in prompt".into()));
        }
        if self.target.contains(&image_id) {
            return Err(Error::Sequence("image indicator inside target".into()));
        }
        match (first, &self.image) {
            (Some(_), None) => Err(Error::Sequence("image indicator without an image".into())),
            (None, Some(_)) => Err(Error::Sequence("image without an image indicator".into())),
            _ => Ok(first),
        }
    }
}

/// Index bookkeeping of an assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    /// Text id at each position; `None` on visual positions.
    pub token_ids: Vec<Option<usize>>,
    /// True exactly on target positions.
    pub loss_mask: Vec<bool>,
    pub position_ids: Vec<usize>,
    /// `(λ, n)`: start of the visual span and its length.
    pub visual_span: Option<(usize, usize)>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Shifted labels for next-token prediction: row `p` of the logits is
    /// scored against the token at `p + 1` when that position is a target.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let l = self.len();
        (0..l)
            .map(|p| match (p + 1 < l).then(|| (self.token_ids[p + 1], self.loss_mask[p + 1])) {
                Some((Some(id), true)) => (id, true),
                _ => (0, false),
            })
            .unzip()
    }
}

pub fn layout(sample: &MultimodalSample, n_visual: usize, image_id: usize) -> Result<SequenceLayout> {
    let lambda = sample.indicator(image_id)?;
    let mut token_ids = Vec::new();
    let mut loss_mask = Vec::new();
    let mut visual_span = None;
    for (i, &t) in sample.prompt.iter().enumerate() {
        if Some(i) == lambda {
            if n_visual == 0 {
                return Err(Error::Sequence("image produced no visual embeddings".into()));
            }
            visual_span = Some((token_ids.len(), n_visual));
            token_ids.extend(std::iter::repeat_n(None, n_visual));
            loss_mask.extend(std::iter::repeat_n(false, n_visual));
        } else {
            token_ids.push(Some(t));
            loss_mask.push(false);
        }
    }
    for &t in &sample.target {
        token_ids.push(Some(t));
        loss_mask.push(true);
    }
    if token_ids.is_empty() {
        return Err(Error::Sequence("empty sample".into()));
    }
    let position_ids = (0..token_ids.len()).collect();
    Ok(SequenceLayout {
        token_ids,
        loss_mask,
        position_ids,
        visual_span,
    })
}

#[derive(Clone, Debug)]
pub struct AssembledInput {
    /// `L × d′`
    pub embeddings: Var,
    pub layout: SequenceLayout,
}

impl AssembledInput {
    pub fn loss_mask(&self) -> &[bool] {
        &self.layout.loss_mask
    }

    pub fn position_ids(&self) -> &[usize] {
        &self.layout.position_ids
    }
}

/// Builds `[T_1 … T_{λ−1}, V_1 … V_n, T_{λ+1} … T_m]` on the tape.
pub fn assemble<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    sample: &MultimodalSample,
    visual: Option<Var>,
    text_table: &TextualEmbeddingTable,
) -> Result<AssembledInput> {
    let image_id = text_table.special.image;
    let n_visual = match (sample.image.is_some(), visual) {
        (true, Some(v)) => tape.value(v).require_matrix("assemble")?.0,
        (true, None) => return Err(Error::Sequence("image sample without visual embeddings".into())),
        (false, Some(_)) => return Err(Error::Sequence("visual embeddings for a text-only sample".into())),
        (false, None) => 0,
    };
    if let Some(v) = visual {
        let (n, d) = tape.value(v).require_matrix("assemble")?;
        if d != text_table.dim {
            return Err(Error::shape("assemble", &[n, d], &[n, text_table.dim]));
        }
    }
    let layout = layout(sample, n_visual, image_id)?;
    let texts: Vec<usize> = layout.token_ids.iter().flatten().copied().collect();
    if let Some(&bad) = texts.iter().find(|&&t| t >= text_table.vocab) {
        return Err(Error::IndexOutOfRange {
            op: "assemble",
            index: bad,
            extent: text_table.vocab,
        });
    }
    let embeddings = match (layout.visual_span, visual) {
        (Some((start, n)), Some(v)) => {
            let mut parts = Vec::with_capacity(3);
            if start > 0 {
                parts.push(text_table.forward(tape, bind, &texts[..start])?);
            }
            parts.push(v);
            if start + n < layout.len() {
                parts.push(text_table.forward(tape, bind, &texts[start..])?);
            }
            if parts.len() == 1 {
                v
            } else {
                tape.concat_rows(&parts)?
            }
        }
        _ => text_table.forward(tape, bind, &texts)?,
    };
    Ok(AssembledInput { embeddings, layout })
}

/// A captioning sample: the fixed caption template with the indicator first,
/// labelled with the caption followed by end-of-sequence.
pub fn build_caption_sample(image: ImageTensor, caption: &[usize], vocab: &TextVocab) -> Result<MultimodalSample> {
    if caption.is_empty() {
        return Err(Error::Sequence("empty caption".into()));
    }
    let mut target = caption.to_vec();
    target.push(vocab.eos());
    Ok(MultimodalSample {
        prompt: vocab.encode(CAPTION_TEMPLATE),
        target,
        image: Some(image),
    })
}
