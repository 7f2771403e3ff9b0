//! Learnable pCTR model: a logistic regression over a fixed five-entry feature
//! map, trained by full-batch gradient descent on binary cross-entropy.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{AuctionContext, ResponseOutcome};
use crate::error::{invalid, Error, Result};
use crate::user_model::{logistic, true_ctr, UserModelParams};

/// Number of entries in the pCTR feature map.
pub const PCTR_DIM: usize = 5;

/// Names of the pCTR features, in order.
pub const PCTR_FEATURES: [&str; PCTR_DIM] =
    ["bias", "relevance", "quality", "intrinsic_quality", "co_exposed"];

/// Probability clamp used by the loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Anything that assigns a click probability to an exposed ad.
pub trait ClickModel {
    fn ctr(&self, context: &AuctionContext, ad: usize, response: &ResponseOutcome) -> Result<f64>;
}

impl ClickModel for UserModelParams {
    fn ctr(&self, context: &AuctionContext, ad: usize, response: &ResponseOutcome) -> Result<f64> {
        true_ctr(self, context, ad, response)
    }
}

impl ClickModel for PctrModel {
    fn ctr(&self, context: &AuctionContext, ad: usize, response: &ResponseOutcome) -> Result<f64> {
        predict_pctr(self, context, ad, response)
    }
}

/// Which features the model may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    #[default]
    Full,
    /// Drops the co-exposure feature, so the model cannot represent crowding.
    NoCrowding,
}

impl FeatureMap {
    fn is_full(&self) -> bool {
        *self == FeatureMap::Full
    }

    fn mask(&self) -> [f64; PCTR_DIM] {
        match self {
            FeatureMap::Full => [1.0; PCTR_DIM],
            FeatureMap::NoCrowding => [1.0, 1.0, 1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PctrModel {
    pub version: u64,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "FeatureMap::is_full")]
    pub feature_map: FeatureMap,
}

impl Default for PctrModel {
    fn default() -> Self {
        Self::zeros(FeatureMap::Full)
    }
}

impl PctrModel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != PCTR_DIM {
            return invalid(format!("expected {PCTR_DIM} weights, got {}", weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return invalid("pCTR weights must be finite");
        }
        Ok(Self {
            version: 0,
            weights,
            feature_map: FeatureMap::Full,
        })
    }

    pub fn zeros(feature_map: FeatureMap) -> Self {
        Self {
            version: 0,
            weights: vec![0.0; PCTR_DIM],
            feature_map,
        }
    }

    /// The model whose functional form coincides with the ground truth.
    pub fn from_user_model(params: &UserModelParams) -> Self {
        Self::new(params.as_feature_weights().to_vec()).expect("finite weights")
    }

    fn effective_features(&self, features: &[f64; PCTR_DIM]) -> [f64; PCTR_DIM] {
        let mask = self.feature_map.mask();
        std::array::from_fn(|k| features[k] * mask[k])
    }

    /// Predicted click probability from a precomputed feature vector.
    pub fn predict_features(&self, features: &[f64; PCTR_DIM]) -> f64 {
        let f = self.effective_features(features);
        logistic(self.weights.iter().zip(f).map(|(w, x)| w * x).sum())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        Self::new(model.weights.clone())?;
        Ok(model)
    }
}

/// Features `(1, relevance, quality, intrinsic quality, N_ad − 1)` of an
/// exposed ad. Bids never enter.
pub fn featurize(context: &AuctionContext, ad: usize, response: &ResponseOutcome) -> Result<[f64; PCTR_DIM]> {
    if ad >= context.n_ads() || !response.is_exposed(ad) {
        return invalid(format!("ad {ad} is not exposed in {response}"));
    }
    let a = context.ad(ad);
    Ok([
        1.0,
        a.relevance,
        response.quality_value(),
        a.intrinsic_quality,
        response.n_ads() as f64 - 1.0,
    ])
}

pub fn predict_pctr(model: &PctrModel, context: &AuctionContext, ad: usize, response: &ResponseOutcome) -> Result<f64> {
    Ok(model.predict_features(&featurize(context, ad, response)?))
}

/// One labelled impression of one ad.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickRow {
    pub context_id: usize,
    pub response: ResponseOutcome,
    pub ad: usize,
    pub click: bool,
    pub features: [f64; PCTR_DIM],
}

/// Labelled rows used to fit the pCTR model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClickDataset {
    rows: Vec<ClickRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    context_id: usize,
    response_key: String,
    ad_id: usize,
    click: u8,
}

impl ClickDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a row, featurizing it against its context.
    pub fn push(
        &mut self,
        context_id: usize,
        context: &AuctionContext,
        response: &ResponseOutcome,
        ad: usize,
        click: bool,
    ) -> Result<()> {
        let features = featurize(context, ad, response)?;
        self.rows.push(ClickRow {
            context_id,
            response: response.clone(),
            ad,
            click,
            features,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: ClickDataset) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[ClickRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(CsvRow {
                context_id: r.context_id,
                response_key: r.response.key(),
                ad_id: r.ad,
                click: u8::from(r.click),
            })?;
        }
        if self.rows.is_empty() {
            w.write_record(["context_id", "response_key", "ad_id", "click"])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read rows back, re-featurizing against `contexts[context_id]`.
    pub fn read_csv<R: Read>(reader: R, contexts: &[AuctionContext], quality_levels: usize) -> Result<Self> {
        let mut out = Self::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: CsvRow = row?;
            let ctx = contexts
                .get(row.context_id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown context {}", row.context_id)))?;
            let response = ResponseOutcome::from_key(&row.response_key, quality_levels)?;
            out.push(row.context_id, ctx, &response, row.ad_id, row.click != 0)?;
        }
        Ok(out)
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy.
pub fn bce_loss(model: &PctrModel, data: &ClickDataset) -> Result<f64> {
    if data.is_empty() {
        return invalid("empty click dataset");
    }
    let total: f64 = data
        .rows
        .iter()
        .map(|r| {
            let p = clamp(model.predict_features(&r.features));
            if r.click {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Analytic gradient of [`bce_loss`] with respect to the weights.
pub fn bce_gradient(model: &PctrModel, data: &ClickDataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return invalid("empty click dataset");
    }
    let mut grad = vec![0.0; PCTR_DIM];
    for r in &data.rows {
        let f = model.effective_features(&r.features);
        let err = model.predict_features(&r.features) - f64::from(u8::from(r.click));
        for (g, x) in grad.iter_mut().zip(f) {
            *g += err * x;
        }
    }
    let n = data.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Result of a pCTR fit.
#[derive(Debug, Clone)]
pub struct PctrFit {
    pub model: PctrModel,
    /// Loss before each step and after the last one.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent for `steps` iterations.
pub fn train_pctr(model: &PctrModel, data: &ClickDataset, learning_rate: f64, steps: usize) -> Result<PctrFit> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return invalid(format!("learning rate must be non-negative, got {learning_rate}"));
    }
    let mut current = model.clone();
    let mut loss_trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let loss = bce_loss(&current, data)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch: current.version as usize,
                message: format!("non-finite BCE loss at step {step}"),
            });
        }
        loss_trace.push(loss);
        if step == steps || learning_rate == 0.0 {
            break;
        }
        let grad = bce_gradient(&current, data)?;
        for (w, g) in current.weights.iter_mut().zip(grad) {
            *w -= learning_rate * g;
        }
        if current.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Training {
                epoch: current.version as usize,
                message: format!("non-finite pCTR weights at step {step}"),
            });
        }
    }
    current.version += 1;
    Ok(PctrFit {
        model: current,
        loss_trace,
    })
}
