//! Evaluation, the placement sweep, the per-layer σ diagnostic, and
//! machine-readable report emission (json-lines and CSV, schema version 1).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::data::{batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Model, PlacementConfig, WeightMode};
use crate::nn::softmax;
use crate::objective::{predictive_distribution, predictive_entropy, LossBreakdown};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{train, TrainConfig};
use crate::seeded_rng;
use rand_chacha::ChaCha8Rng;

pub const SCHEMA_VERSION: u32 = 1;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// w₂ = μ; deterministic.
    Mean,
    /// Monte-Carlo predictive averaging over the given sample count.
    Mc { samples: usize },
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Mean => "mean".to_string(),
            EvalMode::Mc { samples } => format!("mc({samples})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub split: String,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    pub mode: String,
    pub mean_predictive_entropy: f64,
}

/// Argmax with ties broken toward the lowest class index.
pub(crate) fn count_correct<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> usize {
    let c = probs.dim(1);
    labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &probs.data()[i * c..(i + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Accuracy on one split. Mean mode is pure and idempotent; mc mode needs
/// an RNG and averages softmax outputs over weight samples.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &Dataset,
    split: Split,
    mode: EvalMode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EvalResult> {
    let mut n_correct = 0usize;
    let mut n_total = 0usize;
    let mut entropy_sum = 0.0f64;
    for (images, labels) in batches(dataset, split, EVAL_BATCH, 0)? {
        let probs = match mode {
            EvalMode::Mean => {
                let logits = model.forward(&images, WeightMode::Mean, None)?;
                softmax(&logits)?
            }
            EvalMode::Mc { samples } => {
                let rng = rng.as_deref_mut().ok_or_else(|| {
                    Error::InvalidConfig("mc evaluation requires an RNG".into())
                })?;
                predictive_distribution(model, &images, samples, rng)?
            }
        };
        n_correct += count_correct(&probs, &labels);
        n_total += labels.len();
        let c = probs.dim(1);
        for row in probs.data().chunks_exact(c) {
            entropy_sum += predictive_entropy(row) as f64;
        }
    }
    Ok(EvalResult {
        split: split.to_string(),
        accuracy: n_correct as f64 / n_total as f64,
        n_correct,
        n_total,
        mode: mode.label(),
        mean_predictive_entropy: entropy_sum / n_total as f64,
    })
}

/// Summary statistics of σ = softplus(ρ) for one variational layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SigmaStat {
    pub layer: String,
    pub depth: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub std: f64,
}

/// σ statistics per variational layer, in depth order; empty when the
/// model is fully deterministic.
pub fn sigma_stats(model: &Model<f32>) -> Vec<SigmaStat> {
    model
        .partition()
        .uncertain
        .iter()
        .enumerate()
        .map(|(depth, (name, params))| {
            let sigma = params.sigma();
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for &s in sigma.data() {
                let s = s as f64;
                min = min.min(s);
                max = max.max(s);
                sum += s;
                sum_sq += s * s;
            }
            let n = sigma.len() as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            SigmaStat {
                layer: name.clone(),
                depth,
                min,
                mean,
                max,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// The per-layer σ diagnostic, ordered by depth.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SigmaProfile {
    pub layers: Vec<SigmaStat>,
}

pub fn sigma_profile(model: &Model<f32>) -> Result<SigmaProfile> {
    let layers = sigma_stats(model);
    if layers.is_empty() {
        return Err(Error::NoVariationalLayers);
    }
    Ok(SigmaProfile { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Epoch,
    Eval,
}

impl std::fmt::Display for RecordKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RecordKind::Epoch => "epoch",
            RecordKind::Eval => "eval",
        })
    }
}

impl std::str::FromStr for RecordKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(RecordKind::Epoch),
            "eval" => Ok(RecordKind::Eval),
            other => Err(Error::InvalidConfig(format!("unknown record kind {other:?}"))),
        }
    }
}

/// One report row: an epoch summary or a verification-set evaluation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainRecord {
    pub schema_version: u32,
    pub kind: RecordKind,
    pub epoch: u32,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_cen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_unc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_term: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll_term: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma: Vec<SigmaStat>,
    pub wall_time_ms: f64,
}

impl TrainRecord {
    pub fn epoch(
        epoch: u32,
        step: u64,
        losses: LossBreakdown,
        train_accuracy: f64,
        sigma: Vec<SigmaStat>,
        wall_time_ms: f64,
    ) -> Self {
        TrainRecord {
            schema_version: SCHEMA_VERSION,
            kind: RecordKind::Epoch,
            epoch,
            step,
            l_cen: Some(losses.l_cen),
            l_unc: Some(losses.l_unc),
            kl_term: Some(losses.kl_term),
            nll_term: Some(losses.nll_term),
            total: Some(losses.total),
            train_accuracy: Some(train_accuracy),
            split: None,
            eval_accuracy: None,
            mean_entropy: None,
            eval_mode: None,
            sigma,
            wall_time_ms,
        }
    }

    pub fn eval(epoch: u32, step: u64, result: &EvalResult) -> Self {
        TrainRecord {
            schema_version: SCHEMA_VERSION,
            kind: RecordKind::Eval,
            epoch,
            step,
            l_cen: None,
            l_unc: None,
            kl_term: None,
            nll_term: None,
            total: None,
            train_accuracy: None,
            split: Some(result.split.clone()),
            eval_accuracy: Some(result.accuracy),
            mean_entropy: Some(result.mean_predictive_entropy),
            eval_mode: Some(result.mode.clone()),
            sigma: Vec::new(),
            wall_time_ms: 0.0,
        }
    }
}

/// One placement's training curve and final verification accuracy.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepEntry {
    pub placement: PlacementConfig,
    pub records: Vec<TrainRecord>,
    pub final_eval: EvalResult,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub arch: ArchSpec,
    pub config: TrainConfig,
    pub entries: Vec<SweepEntry>,
}

/// Train one placement from scratch with the shared seed and config.
pub fn sweep_one(
    arch: &ArchSpec,
    placement: &PlacementConfig,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<SweepEntry> {
    let t0 = Instant::now();
    let mut rng = seeded_rng(config.seed, 0);
    let mut model = Model::build(arch.clone(), placement.clone(), &mut rng)?;
    model.set_seed(config.seed);
    let records = train(&mut model, dataset, config)?;
    let final_eval = evaluate(&model, dataset, Split::PublicTest, EvalMode::Mean, None)?;
    Ok(SweepEntry {
        placement: placement.clone(),
        records,
        final_eval,
        wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Train every placement with identical config and seed; the accuracy
/// ordering across placements is reported, never asserted.
pub fn placement_sweep(
    arch: &ArchSpec,
    placements: &[PlacementConfig],
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<SweepReport> {
    if placements.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one placement".into()));
    }
    let mut entries = Vec::with_capacity(placements.len());
    for placement in placements {
        entries.push(sweep_one(arch, placement, dataset, config)?);
    }
    Ok(SweepReport {
        arch: arch.clone(),
        config: config.clone(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    JsonLines,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidConfig(format!("unknown report format {other:?}"))),
        }
    }
}

const CSV_HEADER: [&str; 16] = [
    "schema_version",
    "kind",
    "epoch",
    "step",
    "l_cen",
    "l_unc",
    "kl_term",
    "nll_term",
    "total",
    "train_accuracy",
    "split",
    "eval_accuracy",
    "mean_entropy",
    "eval_mode",
    "sigma",
    "wall_time_ms",
];

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, what: &str, row: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        row,
        detail: format!("{what}: {s:?} is not a float"),
    })
}

/// `layer:depth:min:mean:max:std` entries joined by `;`.
fn encode_sigma(sigma: &[SigmaStat]) -> String {
    sigma
        .iter()
        .map(|s| {
            format!(
                "{}:{}:{}:{}:{}:{}",
                s.layer, s.depth, s.min, s.mean, s.max, s.std
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_sigma(field: &str, row: usize) -> Result<Vec<SigmaStat>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|entry| {
            let parts: Vec<&str> = entry.split(':').collect();
            if parts.len() != 6 {
                return Err(Error::Parse {
                    row,
                    detail: format!("sigma entry {entry:?} must have 6 fields"),
                });
            }
            let f = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    row,
                    detail: format!("sigma {what}: {s:?} is not a float"),
                })
            };
            Ok(SigmaStat {
                layer: parts[0].to_string(),
                depth: parts[1].parse().map_err(|_| Error::Parse {
                    row,
                    detail: format!("sigma depth {:?} is not an integer", parts[1]),
                })?,
                min: f(parts[2], "min")?,
                mean: f(parts[3], "mean")?,
                max: f(parts[4], "max")?,
                std: f(parts[5], "std")?,
            })
        })
        .collect()
}

/// Write records one document per line (json-lines) or as flat rows (csv,
/// header always present). Numeric fields round-trip at full precision.
pub fn export_report(
    records: &[TrainRecord],
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    match format {
        ReportFormat::JsonLines => {
            for record in records {
                let line = serde_json::to_string(record)
                    .map_err(|e| Error::InvalidConfig(format!("encoding record: {e}")))?;
                writeln!(w, "{line}")?;
            }
        }
        ReportFormat::Csv => {
            let mut csv_writer = csv::Writer::from_writer(w);
            csv_writer
                .write_record(CSV_HEADER)
                .map_err(|e| Error::InvalidConfig(format!("writing csv header: {e}")))?;
            for r in records {
                csv_writer
                    .write_record([
                        r.schema_version.to_string(),
                        r.kind.to_string(),
                        r.epoch.to_string(),
                        r.step.to_string(),
                        opt_to_string(r.l_cen),
                        opt_to_string(r.l_unc),
                        opt_to_string(r.kl_term),
                        opt_to_string(r.nll_term),
                        opt_to_string(r.total),
                        opt_to_string(r.train_accuracy),
                        r.split.clone().unwrap_or_default(),
                        opt_to_string(r.eval_accuracy),
                        opt_to_string(r.mean_entropy),
                        r.eval_mode.clone().unwrap_or_default(),
                        encode_sigma(&r.sigma),
                        r.wall_time_ms.to_string(),
                    ])
                    .map_err(|e| Error::InvalidConfig(format!("writing csv row: {e}")))?;
            }
            csv_writer
                .flush()
                .map_err(|e| Error::InvalidConfig(format!("flushing csv: {e}")))?;
            return Ok(());
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`export_report`].
pub fn parse_report(path: impl AsRef<Path>, format: ReportFormat) -> Result<Vec<TrainRecord>> {
    match format {
        ReportFormat::JsonLines => {
            let reader = BufReader::new(File::open(path.as_ref())?);
            let mut records = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: TrainRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    row: i + 1,
                    detail: format!("bad json-lines record: {e}"),
                })?;
                records.push(record);
            }
            Ok(records)
        }
        ReportFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(BufReader::new(File::open(path.as_ref())?));
            let mut records = Vec::new();
            for (i, result) in reader.records().enumerate() {
                let row = i + 1;
                let rec = result.map_err(|e| Error::Parse {
                    row,
                    detail: format!("bad csv record: {e}"),
                })?;
                if rec.len() != CSV_HEADER.len() {
                    return Err(Error::Parse {
                        row,
                        detail: format!("expected {} columns, got {}", CSV_HEADER.len(), rec.len()),
                    });
                }
                let int = |s: &str, what: &str| -> Result<u64> {
                    s.parse().map_err(|_| Error::Parse {
                        row,
                        detail: format!("{what}: {s:?} is not an integer"),
                    })
                };
                records.push(TrainRecord {
                    schema_version: int(&rec[0], "schema_version")? as u32,
                    kind: rec[1].parse()?,
                    epoch: int(&rec[2], "epoch")? as u32,
                    step: int(&rec[3], "step")?,
                    l_cen: parse_opt(&rec[4], "l_cen", row)?,
                    l_unc: parse_opt(&rec[5], "l_unc", row)?,
                    kl_term: parse_opt(&rec[6], "kl_term", row)?,
                    nll_term: parse_opt(&rec[7], "nll_term", row)?,
                    total: parse_opt(&rec[8], "total", row)?,
                    train_accuracy: parse_opt(&rec[9], "train_accuracy", row)?,
                    split: (!rec[10].is_empty()).then(|| rec[10].to_string()),
                    eval_accuracy: parse_opt(&rec[11], "eval_accuracy", row)?,
                    mean_entropy: parse_opt(&rec[12], "mean_entropy", row)?,
                    eval_mode: (!rec[13].is_empty()).then(|| rec[13].to_string()),
                    sigma: decode_sigma(&rec[14], row)?,
                    wall_time_ms: rec[15].parse().map_err(|_| Error::Parse {
                        row,
                        detail: format!("wall_time_ms: {:?} is not a float", &rec[15]),
                    })?,
                });
            }
            Ok(records)
        }
    }
}

/// Write a sweep: `sweep_summary.json` plus one curve file per placement.
pub fn write_sweep(report: &SweepReport, dir: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let summary = File::create(dir.join("sweep_summary.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(summary), report)
        .map_err(|e| Error::InvalidConfig(format!("encoding sweep report: {e}")))?;
    for entry in &report.entries {
        let ext = match format {
            ReportFormat::JsonLines => "jsonl",
            ReportFormat::Csv => "csv",
        };
        let path = dir.join(format!("sweep_group_{}.{ext}", entry.placement.label()));
        export_report(&entry.records, path, format)?;
    }
    Ok(())
}
