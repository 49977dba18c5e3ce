use serde::Serialize;

use super::data::Sample;
use super::train::{evaluate, evaluate_blur, train_toy, TrainConfig};
use super::ModelConfig;
use crate::config::KeyValues;
use crate::error::{Error, Result};

/// One toggle combination.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub use_c2f: bool,
    pub use_events: bool,
    pub use_deblur_module: bool,
    pub use_lstm: bool,
}

impl AblationRow {
    fn new(name: &str, c2f: bool, events: bool, dm: bool, lstm: bool) -> Self {
        Self {
            name: name.into(),
            use_c2f: c2f,
            use_events: events,
            use_deblur_module: dm,
            use_lstm: lstm,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        base.clone()
            .with_toggles(self.use_events, self.use_deblur_module, self.use_lstm, self.use_c2f)
    }
}

/// The five component rows, from image-only to the full model.
pub fn standard_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("im", false, false, false, false),
        AblationRow::new("im+c2f", true, false, false, false),
        AblationRow::new("im+c2f+events", true, true, false, false),
        AblationRow::new("im+c2f+events+dm", true, true, true, false),
        AblationRow::new("full", true, true, true, true),
    ]
}

/// Looks up rows by name; accepts a comma-separated list or `all`.
pub fn rows_by_name(spec: &str) -> Result<Vec<AblationRow>> {
    let all = standard_rows();
    if spec.trim() == "all" {
        return Ok(all);
    }
    spec.split(',')
        .map(|n| {
            let n = n.trim();
            all.iter()
                .find(|r| r.name == n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown ablation row {n:?}")))
        })
        .collect()
}

/// Model and training settings plus the selected rows.
pub fn parse_grid(kv: &KeyValues) -> Result<(ModelConfig, TrainConfig, Vec<AblationRow>)> {
    let rows = match kv.get_str("rows") {
        Some(s) => rows_by_name(s)?,
        None => standard_rows(),
    };
    let mut rest = KeyValues::new();
    for k in kv.keys().filter(|k| *k != "rows") {
        rest.set(k, kv.get_str(k).unwrap_or_default());
    }
    let (m, t) = super::train::parse_configs(&rest)?;
    Ok((m, t, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    #[serde(flatten)]
    pub row: AblationRow,
    pub psnr: f64,
    pub ssim: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub blur_psnr: f64,
    pub blur_ssim: f64,
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn get(&self, name: &str) -> Option<&AblationResult> {
        self.rows.iter().find(|r| r.row.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "." };
        let mut s = format!(
            "{:<18} {:>3} {:>3} {:>3} {:>4}  {:>9}  {:>7}\n",
            "row", "c2f", "ev", "dm", "lstm", "PSNR(dB)", "SSIM"
        );
        s.push_str(&format!(
            "{:<18} {:>3} {:>3} {:>3} {:>4}  {:>9.3}  {:>7.4}\n",
            "blurry input", "", "", "", "", self.blur_psnr, self.blur_ssim
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<18} {:>3} {:>3} {:>3} {:>4}  {:>9.3}  {:>7.4}\n",
                r.row.name,
                mark(r.row.use_c2f),
                mark(r.row.use_events),
                mark(r.row.use_deblur_module),
                mark(r.row.use_lstm),
                r.psnr,
                r.ssim
            ));
        }
        s
    }
}

/// Trains one model per row with the same seeds and evaluates each on
/// `test`, using the final-epoch weights.
pub fn ablate(
    train: &[Sample],
    test: &[Sample],
    base: &ModelConfig,
    rows: &[AblationRow],
    hyper: &TrainConfig,
) -> Result<AblationTable> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let blur = evaluate_blur(test)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let cfg = row.apply(base);
        log::info!("ablation row {}", row.name);
        let run = train_toy(train, &[], &cfg, hyper, None, false)?;
        let report = evaluate(&run.weights, &cfg, test, hyper.threads)?;
        out.push(AblationResult {
            row: row.clone(),
            psnr: report.mean_psnr(),
            ssim: report.mean_ssim(),
            final_loss: run.log.last().map_or(f64::NAN, |r| r.loss),
        });
    }
    Ok(AblationTable {
        blur_psnr: blur.mean_psnr(),
        blur_ssim: blur.mean_ssim(),
        rows: out,
    })
}
