//! Turns manifest records into model inputs and model outputs into
//! prediction records.

use std::path::Path;

use crate::data::{Dataset, ImageSource, Label, Language};
use crate::encoders::{load_image, load_precomputed, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::PredictionRecord;
use crate::fusion::{FusionConfig, FusionModel, ImageInput, ImageInputSpec, ModelInput, TextInput, TextInputSpec};

/// One encoded-ready sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub language: Language,
    pub input: ModelInput,
}

/// Vocabulary over a dataset's texts, keeping words seen at least `min_count` times.
pub fn build_vocabulary(d: &Dataset, min_count: usize) -> Vocabulary {
    Vocabulary::build(d.records.iter().map(|r| r.text.as_str()), min_count)
}

/// Text and image feature dims of the first record with precomputed features.
pub fn feature_dims(d: &Dataset, base_dir: &Path) -> Result<Option<(usize, usize)>> {
    for r in &d.records {
        if let ImageSource::Features(pair) = &r.image_source {
            let t = load_precomputed(&pair.text_vec, base_dir, None)?;
            let v = load_precomputed(&pair.image_vec, base_dir, None)?;
            return Ok(Some((t.dim(), v.dim())));
        }
    }
    Ok(None)
}

/// Loads every record in the form the model configuration expects.
/// Relative feature and image paths resolve against `base_dir`.
pub fn prepare_examples(
    d: &Dataset,
    config: &FusionConfig,
    vocab: Option<&Vocabulary>,
    base_dir: &Path,
) -> Result<Vec<Example>> {
    d.records
        .iter()
        .map(|r| {
            let ctx = |e: Error| match e {
                Error::Shape(m) => Error::Data(format!("record `{}`: {m}", r.id)),
                other => other,
            };
            let text = match config.text_input {
                TextInputSpec::Features { dim } => match &r.image_source {
                    ImageSource::Features(pair) => {
                        TextInput::Features(load_precomputed(&pair.text_vec, base_dir, Some(dim)).map_err(ctx)?)
                    }
                    ImageSource::Path(_) => {
                        return Err(Error::Data(format!(
                            "record `{}` has no precomputed text features",
                            r.id
                        )))
                    }
                },
                TextInputSpec::Tokens { max_tokens, .. } => {
                    let vocab = vocab.ok_or_else(|| {
                        Error::InvalidArgument("token text input needs a vocabulary".into())
                    })?;
                    let mut ids = vocab.tokenize(&r.text, max_tokens);
                    if ids.is_empty() {
                        ids.push(0);
                    }
                    TextInput::Tokens(ids)
                }
            };
            let image = match (&config.image_input, &r.image_source) {
                (ImageInputSpec::Features { dim }, ImageSource::Features(pair)) => {
                    ImageInput::Features(load_precomputed(&pair.image_vec, base_dir, Some(*dim)).map_err(ctx)?)
                }
                (ImageInputSpec::Patches { image_size, .. }, ImageSource::Path(p)) => {
                    ImageInput::Grid(load_image(&base_dir.join(p), *image_size as u32)?)
                }
                (ImageInputSpec::Features { .. }, ImageSource::Path(_)) => {
                    return Err(Error::Data(format!(
                        "record `{}` has an image path but the model expects image features",
                        r.id
                    )))
                }
                (ImageInputSpec::Patches { .. }, ImageSource::Features(_)) => {
                    return Err(Error::Data(format!(
                        "record `{}` has image features but the model expects an image path",
                        r.id
                    )))
                }
            };
            Ok(Example {
                id: r.id.clone(),
                label: r.label,
                language: r.language,
                input: ModelInput { text, image },
            })
        })
        .collect()
}

/// Evaluation-mode predictions in input order.
pub fn predict(model: &FusionModel, examples: &[Example]) -> Result<Vec<PredictionRecord>> {
    examples
        .iter()
        .map(|e| {
            let p = model.predict_proba(&e.input)?;
            PredictionRecord::new(e.id.clone(), e.label, p, e.language)
        })
        .collect()
}
