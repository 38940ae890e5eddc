use super::{accuracy, classify, harmonic_mean, EvalError, Metrics};
use crate::data::{ClassSplit, Dataset};
use crate::encoder::{PromptState, Sample, TextModel, VisionBackbone};

/// Accuracy of `samples` restricted to the label space `classes`.
pub fn restricted_accuracy(
    prompt: &PromptState,
    model: &TextModel,
    backbone: &VisionBackbone,
    samples: &[Sample],
    classes: &[usize],
    temperature: f64,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty("no test samples".into()));
    }
    let texts = model.text_features(prompt, classes)?;
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let f = backbone.features(s)?;
        preds.push(classes[classify(&f, &texts, temperature)?]);
        labels.push(s.class);
    }
    accuracy(&preds, &labels)
}

/// Base accuracy over base-class test samples against base-class prompts,
/// novel accuracy likewise over novel classes, and their harmonic mean.
pub fn evaluate_base_novel(
    prompt: &PromptState,
    model: &TextModel,
    backbone: &VisionBackbone,
    dataset: &Dataset,
    split: &ClassSplit,
    temperature: f64,
) -> Result<Metrics, EvalError> {
    let test = dataset.test();
    let side = |classes: &[usize]| -> Vec<Sample> {
        test.iter().filter(|s| classes.contains(&s.class)).copied().collect()
    };
    let base = side(&split.base);
    let novel = side(&split.novel);
    if base.is_empty() || novel.is_empty() {
        return Err(EvalError::Empty("a base/novel test side is empty".into()));
    }
    let acc_base = restricted_accuracy(prompt, model, backbone, &base, &split.base, temperature)?;
    let acc_novel = restricted_accuracy(prompt, model, backbone, &novel, &split.novel, temperature)?;
    Ok(Metrics {
        acc_base: Some(acc_base),
        acc_novel: Some(acc_novel),
        hm: Some(harmonic_mean(acc_base, acc_novel)),
        ..Metrics::default()
    })
}

/// Accuracy on the held-out domain over the full label space.
pub fn evaluate_lodo(
    prompt: &PromptState,
    model: &TextModel,
    backbone: &VisionBackbone,
    held_out_samples: &[Sample],
    temperature: f64,
) -> Result<f64, EvalError> {
    let classes: Vec<usize> = (0..model.num_classes()).collect();
    restricted_accuracy(prompt, model, backbone, held_out_samples, &classes, temperature)
}
