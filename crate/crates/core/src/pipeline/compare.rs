use super::{load_dataset, train_on, Dataset, TrainConfig};
use crate::attention::AttentionMode;
use crate::error::Result;
use crate::metrics::{evaluate_pairs, MetricsReport, CSV_HEADER};

/// Outcome of one configuration in the comparison.
#[derive(Debug)]
pub struct ModeResult {
    pub mode: AttentionMode,
    pub report: Result<MetricsReport>,
    /// Per-step training loss; empty if training failed.
    pub loss_log: Vec<f32>,
}

/// Train and evaluate all six configurations on the configured folder.
pub fn compare(config: &TrainConfig) -> Result<Vec<ModeResult>> {
    config.validate()?;
    let data = load_dataset(&config.data_dir, config.image_size, config.seed)?;
    Ok(compare_on(config, &data))
}

/// Train every mode on the leading pairs with identical seed and budget and
/// score it on the held-out tail. A failing mode does not stop the others.
pub fn compare_on(config: &TrainConfig, data: &Dataset) -> Vec<ModeResult> {
    let train = data.subset(data.train_indices());
    let held = data.subset(data.holdout_indices());
    AttentionMode::TABLE_ORDER
        .iter()
        .map(|&mode| {
            let cfg = TrainConfig { mode, ..config.clone() };
            match train_on(&cfg, train.clone()) {
                Ok(out) => ModeResult {
                    mode,
                    report: evaluate_pairs(&out.params, &held.covers, &held.secrets, mode.label()),
                    loss_log: out.loss_log,
                },
                Err(e) => {
                    log::error!("{mode}: {e}");
                    ModeResult {
                        mode,
                        report: Err(e),
                        loss_log: Vec::new(),
                    }
                }
            }
        })
        .collect()
}

/// Header plus one line per mode, newline-terminated.
pub fn render_csv(results: &[ModeResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        match &r.report {
            Ok(report) => out.push_str(&report.csv_row()),
            Err(_) => out.push_str(&MetricsReport::error_row(r.mode.label())),
        }
        out.push('\n');
    }
    out
}
