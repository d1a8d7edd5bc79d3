//! Accuracy aggregation and report rendering.
//!
//! Aggregation is exact integer counting; percentages are rendered once, at
//! the edge, as half-up two-decimal strings. Overall accuracy is always
//! computed from raw counts, never by averaging domain percentages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrate::Tier;
use crate::sample::{Domain, Label};

use super::{AblationConfig, Pipeline, SampleResult};

/// Exact counts plus the rendered percentage (`None` when the denominator is
/// empty; rendered as an em-dash-free `"-"` placeholder in tables).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketStats {
    pub correct: u64,
    pub total: u64,
    pub accuracy: Option<String>,
}

impl BucketStats {
    fn from_counts(correct: u64, total: u64) -> Self {
        BucketStats {
            correct,
            total,
            accuracy: (total > 0).then(|| percent_2dp(correct, total)),
        }
    }

    fn rendered(&self) -> String {
        self.accuracy.clone().unwrap_or_else(|| "-".to_string())
    }
}

/// Half-up percentage with two decimals, in exact integer arithmetic:
/// `floor((2 * correct * 10000 + total) / (2 * total))` hundredths.
pub fn percent_2dp(correct: u64, total: u64) -> String {
    assert!(total > 0, "percentage of an empty denominator");
    let n = u128::from(correct) * 10_000;
    let d = u128::from(total);
    let hundredths = (2 * n + d) / (2 * d);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub answer: Label,
}

/// Aggregated evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by domain wire name; all four domains always present.
    pub per_domain: BTreeMap<String, BucketStats>,
    pub overall: BucketStats,
    /// Keyed by capability wire name, plus `"unrouted"` when routing was off.
    pub per_capability: BTreeMap<String, BucketStats>,
    /// Fallback-tier predictions over all predicted samples (gold or not).
    pub fallback_count: u64,
    pub predicted_count: u64,
    pub failed_count: u64,
    pub fallback_rate: Option<String>,
    pub predictions: Vec<PredictionRow>,
    pub config: serde_json::Value,
}

/// Aggregate results into the report.
///
/// Samples without gold are excluded from every accuracy denominator but
/// still counted in the fallback rate and listed in `predictions`.
pub fn aggregate(results: &[SampleResult], config: serde_json::Value) -> EvalReport {
    let mut domain_counts: BTreeMap<Domain, (u64, u64)> = BTreeMap::new();
    let mut capability_counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut overall = (0u64, 0u64);
    let mut fallback_count = 0u64;
    let mut predicted_count = 0u64;
    let mut failed_count = 0u64;
    let mut predictions = Vec::new();

    for result in results {
        if let Some(prediction) = &result.predicted {
            predicted_count += 1;
            if prediction.tier == Tier::Fallback {
                fallback_count += 1;
            }
            predictions.push(PredictionRow {
                id: result.sample_id.clone(),
                answer: prediction.label,
            });
        } else {
            failed_count += 1;
        }
        if result.gold.is_some() {
            let correct = u64::from(result.correct == Some(true));
            let d = domain_counts.entry(result.domain).or_default();
            d.0 += correct;
            d.1 += 1;
            overall.0 += correct;
            overall.1 += 1;
            let capability_key = result
                .capability
                .map(|c| c.wire_name().to_string())
                .unwrap_or_else(|| "unrouted".to_string());
            let c = capability_counts.entry(capability_key).or_default();
            c.0 += correct;
            c.1 += 1;
        }
    }

    let per_domain = Domain::ALL
        .into_iter()
        .map(|domain| {
            let (correct, total) = domain_counts.get(&domain).copied().unwrap_or((0, 0));
            (
                domain.wire_name().to_string(),
                BucketStats::from_counts(correct, total),
            )
        })
        .collect();

    EvalReport {
        per_domain,
        overall: BucketStats::from_counts(overall.0, overall.1),
        per_capability: capability_counts
            .into_iter()
            .map(|(k, (c, t))| (k, BucketStats::from_counts(c, t)))
            .collect(),
        fallback_count,
        predicted_count,
        failed_count,
        fallback_rate: (predicted_count > 0).then(|| percent_2dp(fallback_count, predicted_count)),
        predictions,
        config,
    }
}

/// Output format for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    Json,
    CsvPredictions,
}

/// Render the report.
///
/// * `table_text` — the five-column accuracy layout plus summary lines;
/// * `json` — the full report document (round-trips through serde);
/// * `csv_predictions` — `id,answer` rows for submission upload.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
            bytes.push(b'\n');
            bytes
        }
        ReportFormat::CsvPredictions => {
            let mut out = String::from("id,answer\n");
            for row in &report.predictions {
                out.push_str(&format!("{},{}\n", csv_field(&row.id), row.answer));
            }
            out.into_bytes()
        }
        ReportFormat::TableText => render_table(report).into_bytes(),
    }
}

pub const DOMAIN_COLUMNS: [Domain; 4] = [
    Domain::Animal,
    Domain::Xsports,
    Domain::Industry,
    Domain::Surgery,
];

fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>9} {:>9}\n",
        "Animal", "XSports", "Industry", "Surgery", "Overall"
    ));
    let cells: Vec<String> = DOMAIN_COLUMNS
        .iter()
        .map(|d| report.per_domain[d.wire_name()].rendered())
        .collect();
    out.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>9} {:>9}\n",
        cells[0],
        cells[1],
        cells[2],
        cells[3],
        report.overall.rendered()
    ));
    out.push('\n');
    out.push_str(&format!(
        "overall: {}/{} correct",
        report.overall.correct, report.overall.total
    ));
    if let Some(rate) = &report.fallback_rate {
        out.push_str(&format!(
            "; fallback rate: {rate}% ({}/{})",
            report.fallback_count, report.predicted_count
        ));
    }
    if report.failed_count > 0 {
        out.push_str(&format!("; failed samples: {}", report.failed_count));
    }
    out.push('\n');
    if !report.per_capability.is_empty() {
        out.push_str("\nper-capability accuracy:\n");
        for (capability, stats) in &report.per_capability {
            out.push_str(&format!(
                "  {:<22} {:>7}  ({}/{})\n",
                capability,
                stats.rendered(),
                stats.correct,
                stats.total
            ));
        }
    }
    out
}

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

/// The cumulative module-enabling ladder, baseline upward.
pub fn ladder_configs() -> [(&'static str, AblationConfig); 5] {
    let baseline = AblationConfig::baseline();
    [
        ("baseline", baseline),
        (
            "+TEN",
            AblationConfig {
                enable_ten: true,
                ..baseline
            },
        ),
        (
            "+COR",
            AblationConfig {
                enable_ten: true,
                enable_cor: true,
                ..baseline
            },
        ),
        (
            "+RDR",
            AblationConfig {
                enable_ten: true,
                enable_cor: true,
                enable_rdr: true,
                ..baseline
            },
        ),
        ("+full", AblationConfig::default()),
    ]
}

/// One ladder row: a variant name plus its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub variant: String,
    pub report: EvalReport,
}

/// Render the ladder as a table with the exact column layout
/// `Variant | Animal | XSports | Industry | Surgery | Overall`.
pub fn render_ladder(rows: &[LadderRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "Variant", "Animal", "XSports", "Industry", "Surgery", "Overall"
    ));
    for row in rows {
        let cells: Vec<String> = DOMAIN_COLUMNS
            .iter()
            .map(|d| row.report.per_domain[d.wire_name()].rendered())
            .collect();
        out.push_str(&format!(
            "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            row.variant,
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            row.report.overall.rendered()
        ));
    }
    out
}

/// Run the five-variant ladder over one dataset and backend.
pub fn run_ladder(
    pipeline: &Pipeline,
    samples: &[crate::sample::Sample],
    backend: &dyn crate::backend::Backend,
    parallelism: usize,
    out_dir: Option<&std::path::Path>,
) -> Result<Vec<LadderRow>, super::HarnessError> {
    let mut rows = Vec::new();
    for (variant, ablation) in ladder_configs() {
        let mut laddered = pipeline.clone();
        laddered.ablation = ablation;
        let results = laddered.run_batch(samples, backend, parallelism, out_dir)?;
        rows.push(LadderRow {
            variant: variant.to_string(),
            report: aggregate(&results, laddered.config_json()),
        });
    }
    Ok(rows)
}
