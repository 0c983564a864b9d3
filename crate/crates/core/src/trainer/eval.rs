//! Test-set metrics: overall and per saturation decile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{predict, ForwardOptions, MaskingMode, UNetConfig, UNetParameters};
use crate::pipeline::{compose_hdr, mse_gamma, mse_gamma_masked, saturation_percentage, HdrImage};
use crate::sampler::PatchRecord;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Threshold used to count saturated pixels.
    pub alpha: f64,
    pub gamma: f64,
    /// Keep every reconstruction in the report.
    pub keep_outputs: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 8,
            alpha: crate::network::DEFAULT_ALPHA,
            gamma: 2.0,
            keep_outputs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub count: usize,
    /// `None` for empty bins.
    pub mse_gamma: Option<f64>,
    pub masked_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub source_id: u64,
    pub offset: (usize, usize),
    pub saturation: f64,
    pub mse_gamma: f64,
    pub masked_mse: f64,
    #[serde(skip)]
    pub reconstruction: Option<HdrImage<f32>>,
}

/// Ten saturation-percentage deciles followed by an `all` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub images: Vec<ImageResult>,
}

pub const DECILES: usize = 10;

impl EvalReport {
    pub fn overall(&self) -> &EvalRow {
        self.rows.last().expect("report has an overall row")
    }

    pub fn median_masked_mse(&self) -> f64 {
        let mut v: Vec<f64> = self.images.iter().map(|r| r.masked_mse).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6e}"));
        let mut s = String::from("bin\tcount\tmse_gamma\tmasked_mse_gamma\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.label,
                r.count,
                fmt(r.mse_gamma),
                fmt(r.masked_mse)
            ));
        }
        s
    }
}

fn decile(pct: f64) -> usize {
    ((pct / 10.0).floor().max(0.0) as usize).min(DECILES - 1)
}

fn summarize(
    images: &[ImageResult],
    label: String,
    keep: impl Fn(&ImageResult) -> bool,
) -> EvalRow {
    let sel: Vec<&ImageResult> = images.iter().filter(|r| keep(r)).collect();
    let n = sel.len();
    let mean = |f: fn(&ImageResult) -> f64| {
        (n > 0).then(|| sel.iter().map(|r| f(r)).sum::<f64>() / n as f64)
    };
    EvalRow {
        label,
        count: n,
        mse_gamma: mean(|r| r.mse_gamma),
        masked_mse: mean(|r| r.masked_mse),
    }
}

/// Scores log-domain predictions (one `[c, h, w]` or `[1, c, h, w]` tensor
/// per record) after composing them with the known pixels.
pub fn evaluate_predictions(
    records: &[PatchRecord<f32>],
    predictions: &[Tensor<f32>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("test set is empty".into()));
    }
    if records.len() != predictions.len() {
        return Err(Error::dim(format!(
            "{} records but {} predictions",
            records.len(),
            predictions.len()
        )));
    }
    let mut images = Vec::with_capacity(records.len());
    for (i, (r, y)) in records.iter().zip(predictions).enumerate() {
        let h = compose_hdr(&r.ldr, &r.mask, y, opts.gamma)?;
        images.push(ImageResult {
            index: i,
            source_id: r.source_id,
            offset: r.offset,
            saturation: saturation_percentage(&r.ldr, opts.alpha),
            mse_gamma: mse_gamma(&h, &r.hdr)?,
            masked_mse: mse_gamma_masked(&h, &r.hdr, &r.mask)?,
            reconstruction: opts.keep_outputs.then_some(h),
        });
    }
    let mut rows: Vec<EvalRow> = (0..DECILES)
        .map(|b| {
            summarize(&images, format!("{}-{}%", 10 * b, 10 * (b + 1)), |r| {
                decile(r.saturation) == b
            })
        })
        .collect();
    rows.push(summarize(&images, "all".into(), |_| true));
    Ok(EvalReport { rows, images })
}

/// Runs the network over `records` and scores its reconstructions.
pub fn evaluate(
    records: &[PatchRecord<f32>],
    params: &UNetParameters<f32>,
    network: &UNetConfig,
    mode: MaskingMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("test set is empty".into()));
    }
    let mut predictions = Vec::with_capacity(records.len());
    for chunk in records.chunks(opts.batch_size.max(1)) {
        let x = Tensor::stack(
            &chunk
                .iter()
                .map(|r| r.ldr.pixels().clone())
                .collect::<Vec<_>>(),
        )?;
        let m = Tensor::stack(
            &chunk
                .iter()
                .map(|r| r.mask.values().clone())
                .collect::<Vec<_>>(),
        )?;
        let (y, _) = predict(
            &x,
            &m,
            params,
            network,
            ForwardOptions {
                mode,
                keep_masks: false,
            },
        )?;
        for i in 0..chunk.len() {
            predictions.push(y.batch_item(i)?);
        }
    }
    evaluate_predictions(records, &predictions, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::exposure_mask;
    use crate::pipeline::LdrImage;

    fn record(level: f32) -> PatchRecord<f32> {
        let hdr = Tensor::from_fn([3, 4, 4], |i| level * (i % 7) as f32 / 6.0);
        let ldr = LdrImage::new(hdr.map(|v| v.min(1.0).sqrt())).unwrap();
        PatchRecord {
            mask: exposure_mask(&ldr, 0.96).unwrap(),
            hdr: HdrImage::new(hdr).unwrap(),
            ldr,
            score: 0.0,
            source_id: 0,
            offset: (0, 0),
        }
    }

    #[test]
    fn oracle_prediction_is_exact() {
        let recs = vec![record(4.0), record(0.5)];
        let preds: Vec<_> = recs
            .iter()
            .map(|r| r.hdr.pixels().map(|v| v.ln_1p()))
            .collect();
        let rep = evaluate_predictions(&recs, &preds, &EvalOptions::default()).unwrap();
        assert_eq!(rep.rows.len(), DECILES + 1);
        assert_eq!(rep.overall().count, 2);
        assert!(rep.overall().mse_gamma.unwrap() < 1e-10);
        assert_eq!(rep.to_tsv().lines().count(), DECILES + 2);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(evaluate_predictions(&[], &[], &EvalOptions::default()).is_err());
    }
}
