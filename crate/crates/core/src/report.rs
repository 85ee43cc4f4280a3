//! Run directories, manifests, and table / plot rendering.
//!
//! Layout: `<dir>/<run-id>/{manifest.json, records.jsonl, summary.csv,
//! plots/}` plus `gaps.jsonl` when something failed, `attention.json` for
//! attention runs and `report/` once a report has been rendered. Reports
//! are built from `summary.csv` and `manifest.json` only and carry no
//! timestamps, so re-rendering is byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{build_harness, RunConfig};
use crate::error::{Result, SeeError};
use crate::eval::{
    group_order, spread_correlations, BinningRecord, Dimension, EvalRecord, Experiment, Gap, Metric, MetricSummary,
    RunOutput, VerifierCorrelation,
};
use crate::gateway::EditRequest;

pub const STD_CONVENTION: &str = "population standard deviation (ddof = 0) of per-seed accuracies";
pub const CLASSIFICATION_RULE: &str =
    "present iff the probe is the argmax label (ties to the earliest label) and the scores are not all equal";
pub const LABEL_SET_RULE: &str = "object probes: the phrase vs. the same attributes on all sibling objects of the same superclass; \
superclass probes: all superclass names (both taken from the full 79-object table even when the corpus is restricted); leakage probes: the other values of the same attribute slot";
pub const SPREAD_NOTE: &str =
    "attention spread is reconstructed as normalized spatial entropy H(a) / log(H*W), 0 = one-hot, 1 = uniform";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub label: String,
    pub model_id: String,
    pub base_model: String,
    pub provenance: Vec<EditRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierManifest {
    pub id: String,
    pub version: String,
    pub family: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub experiment: Experiment,
    pub target: String,
    pub generator: String,
    pub generator_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub tree_hash: String,
    pub corpus_hash: String,
    pub corpus_records: usize,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelManifest>,
    pub verifiers: Vec<VerifierManifest>,
    pub embedder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_extraction: Option<String>,
    pub binning: BinningRecord,
    pub pairing: Vec<(String, String)>,
    pub adapter_settings: BTreeMap<String, serde_json::Value>,
    pub std_convention: String,
    pub classification_rule: String,
    pub label_set_rule: String,
    pub spread_measure: String,
    /// Successful generations per model id.
    pub images: BTreeMap<String, usize>,
    pub indeterminate: BTreeMap<String, usize>,
    pub gaps: usize,
    pub records: usize,
    pub summaries: usize,
    pub records_sha256: String,
    pub summary_sha256: String,
    pub config: RunConfig,
}

/// Where a finished run lives and what it produced.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub output: RunOutput,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// `<dimension>-<digest of the normalized config>`.
pub fn default_run_id(config: &RunConfig, experiment: Experiment) -> String {
    let digest = hex::encode(Sha256::digest(config.to_toml().as_bytes()));
    format!("{experiment}-{}", &digest[..8])
}

/// A fresh directory for the run; an existing run is never overwritten, a
/// numeric suffix is appended instead.
pub fn allocate_run_dir(config: &RunConfig, experiment: Experiment) -> Result<(String, PathBuf)> {
    let root = PathBuf::from(&config.output.dir);
    let base = if config.output.run_id.is_empty() {
        default_run_id(config, experiment)
    } else {
        config.output.run_id.clone()
    };
    let mut id = base.clone();
    let mut n = 2;
    while root.join(&id).exists() {
        id = format!("{base}-{n}");
        n += 1;
    }
    let dir = root.join(&id);
    std::fs::create_dir_all(dir.join("plots"))?;
    Ok((id, dir))
}

pub fn records_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn summary_csv(rows: &[MetricSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| SeeError::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn csv_err(e: csv::Error) -> SeeError {
    SeeError::Contract(format!("summary csv: {e}"))
}

pub fn read_summary(path: &Path) -> Result<Vec<MetricSummary>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SeeError::Io(std::io::Error::other(e.to_string())))?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

fn sha(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Builds the harness, runs one dimension and persists everything, even
/// when some work items failed.
pub fn execute(config: RunConfig, experiment: Experiment) -> Result<RunArtifacts> {
    config.validate()?;
    let started_at = now();
    let (run_id, dir) = allocate_run_dir(&config, experiment)?;
    let payloads = dir.join("payloads");
    let harness = build_harness(config, Some(&payloads))?;
    let output = harness.run(experiment)?;

    let records = records_jsonl(&output.records);
    let summary = summary_csv(&output.summaries)?;
    std::fs::write(dir.join("records.jsonl"), &records)?;
    std::fs::write(dir.join("summary.csv"), &summary)?;
    if !output.gaps.is_empty() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("gaps.jsonl"))?);
        for g in &output.gaps {
            serde_json::to_writer(&mut f, g)?;
            writeln!(f)?;
        }
        f.flush()?;
    }
    if !output.correlations.is_empty() {
        std::fs::write(
            dir.join("attention.json"),
            serde_json::to_string_pretty(&output.correlations)? + "\n",
        )?;
    }

    let manifest = RunManifest {
        run_id,
        experiment,
        target: output.target.clone(),
        generator: env!("CARGO_PKG_NAME").into(),
        generator_version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        finished_at: now(),
        tree_hash: harness.tree.content_hash(),
        corpus_hash: harness.corpus.content_hash(),
        corpus_records: harness.corpus.len(),
        seeds: harness.config.seeds.clone(),
        models: output
            .models
            .iter()
            .map(|m| ModelManifest {
                label: m.label.clone(),
                model_id: m.handle.model_id.clone(),
                base_model: m.handle.base_model.clone(),
                provenance: m.handle.provenance.clone(),
            })
            .collect(),
        verifiers: harness
            .bank
            .verifiers()
            .iter()
            .map(|v| VerifierManifest {
                id: v.id().into(),
                version: v.version().into(),
                family: v.family().to_string(),
            })
            .collect(),
        embedder: harness.embedder.model_id().into(),
        attention_extraction: harness.gateway.attention_extraction(),
        binning: output.binning.clone(),
        pairing: output.pairing.clone(),
        adapter_settings: harness.gateway.adapter_settings(),
        std_convention: STD_CONVENTION.into(),
        classification_rule: CLASSIFICATION_RULE.into(),
        label_set_rule: LABEL_SET_RULE.into(),
        spread_measure: SPREAD_NOTE.into(),
        images: output.images.clone(),
        indeterminate: output.indeterminate.clone(),
        gaps: output.gaps.len(),
        records: output.records.len(),
        summaries: output.summaries.len(),
        records_sha256: sha(&records),
        summary_sha256: sha(&summary),
        config: harness.config.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&manifest_path)?;
    f.write_all((serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok(RunArtifacts { dir, manifest, output })
}

/// `see report --run ID`: a path to a run directory, or an id under `runs_root`.
pub fn resolve_run(run: &str, runs_root: &Path) -> Result<PathBuf> {
    let direct = PathBuf::from(run);
    if direct.join("manifest.json").is_file() {
        return Ok(direct);
    }
    let under = runs_root.join(run);
    if under.join("manifest.json").is_file() {
        return Ok(under);
    }
    Err(SeeError::Config {
        key: "run".into(),
        message: format!("no run `{run}` (looked in `{}` and `{}`)", direct.display(), under.display()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Md,
    Plots,
}

impl std::str::FromStr for ReportFormat {
    type Err = SeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" => Ok(Self::Md),
            "plots" => Ok(Self::Plots),
            other => Err(SeeError::Contract(format!("unknown report format `{other}`"))),
        }
    }
}

/// A rectangular table of formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SeeError::Contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| {} |\n|", self.title, self.header.join(" | "));
        for _ in &self.header {
            s.push_str("---|");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }
}

pub fn cell(s: &MetricSummary) -> String {
    match s.metric {
        Metric::Accuracy => format!("{:.2} ± {:.2}", s.mean, s.std),
        Metric::Spread => format!("{:.4} ± {:.4}", s.mean, s.std),
    }
}

fn unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.filter(|x| seen.insert(*x)).map(str::to_string).collect()
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Summary rows by verifier id, in manifest order.
struct View<'a> {
    rows: &'a [MetricSummary],
    verifiers: Vec<String>,
}

impl<'a> View<'a> {
    fn select(&self, dimension: Dimension, metric: Metric) -> impl Iterator<Item = &'a MetricSummary> + '_ {
        self.rows
            .iter()
            .filter(move |r| r.dimension == dimension && r.metric == metric)
    }

    fn labels(&self, dimension: Dimension) -> Vec<String> {
        unique(self.select(dimension, Metric::Accuracy).map(|r| r.model_label.as_str()))
    }

    fn groups(&self, dimension: Dimension, prefix: &str) -> Vec<String> {
        let mut g = unique(
            self.select(dimension, Metric::Accuracy)
                .filter(|r| r.group.starts_with(prefix))
                .map(|r| r.group.as_str()),
        );
        g.sort_by_key(|x| group_order(x));
        g
    }

    fn find(&self, dimension: Dimension, label: &str, group: &str, verifier: &str) -> Option<&'a MetricSummary> {
        self.select(dimension, Metric::Accuracy)
            .find(|r| r.model_label == label && r.group == group && r.verifier_id == verifier)
    }
}

fn na_or(s: Option<&MetricSummary>) -> String {
    s.map(cell).unwrap_or_else(|| "n/a".into())
}

/// Rows = models, columns = verifiers, one table per dimension.
fn model_by_verifier(view: &View, dimension: Dimension, name: &str, title: &str) -> Option<Table> {
    let labels = view.labels(dimension);
    if labels.is_empty() {
        return None;
    }
    let mut header = vec!["model".to_string()];
    header.extend(view.verifiers.iter().cloned());
    let rows = labels
        .iter()
        .map(|l| {
            let mut row = vec![l.clone()];
            row.extend(view.verifiers.iter().map(|v| na_or(view.find(dimension, l, "all", v))));
            row
        })
        .collect();
    Some(Table {
        name: name.into(),
        title: title.into(),
        header,
        rows,
    })
}

/// Rows = (model, bin), columns = verifiers.
fn binned(view: &View, dimension: Dimension, prefix: &str, name: &str, title: &str) -> Option<Table> {
    let groups = view.groups(dimension, prefix);
    if groups.is_empty() {
        return None;
    }
    let mut header = vec!["model".to_string(), "bin".to_string()];
    header.extend(view.verifiers.iter().cloned());
    let mut rows = Vec::new();
    for l in view.labels(dimension) {
        for g in &groups {
            let mut row = vec![l.clone(), g.clone()];
            row.extend(view.verifiers.iter().map(|v| na_or(view.find(dimension, &l, g, v))));
            rows.push(row);
        }
    }
    Some(Table {
        name: name.into(),
        title: title.into(),
        header,
        rows,
    })
}

/// All tables derivable from the summary rows present.
pub fn build_tables(rows: &[MetricSummary], verifiers: &[String]) -> Vec<Table> {
    let view = View {
        rows,
        verifiers: verifiers.to_vec(),
    };
    let mut tables = Vec::new();
    tables.extend(model_by_verifier(
        &view,
        Dimension::NeighborErase,
        "accuracy_target",
        "Target accuracy (erase set, lower is better)",
    ));
    tables.extend(model_by_verifier(
        &view,
        Dimension::NeighborPreserve,
        "accuracy_preserve",
        "Preserve accuracy (preserve set, higher is better)",
    ));
    for (dim, set) in [(Dimension::NeighborErase, "erase"), (Dimension::NeighborPreserve, "preserve")] {
        tables.extend(binned(
            &view,
            dim,
            "edit=",
            &format!("neighbors_{set}_edit"),
            &format!("{set} set accuracy by attribute edit distance"),
        ));
        tables.extend(binned(
            &view,
            dim,
            "cos=",
            &format!("neighbors_{set}_cosine"),
            &format!("{set} set accuracy by embedding similarity"),
        ));
    }

    // evasion: rows models, columns superclasses, one table per verifier
    let superclasses = view.groups(Dimension::Evasion, "");
    if !superclasses.is_empty() {
        // keep the order in which superclasses appear, not alphabetical
        let order = unique(view.select(Dimension::Evasion, Metric::Accuracy).map(|r| r.group.as_str()));
        for v in verifiers {
            let mut header = vec!["model".to_string()];
            header.extend(order.iter().cloned());
            let rows = view
                .labels(Dimension::Evasion)
                .iter()
                .map(|l| {
                    let mut row = vec![l.clone()];
                    row.extend(order.iter().map(|s| na_or(view.find(Dimension::Evasion, l, s, v))));
                    row
                })
                .collect();
            tables.push(Table {
                name: format!("evasion_{}", file_safe(v)),
                title: format!("Evasion accuracy per erased superclass ({v})"),
                header,
                rows,
            });
        }
    }

    // leakage: paired target / preserve phrase columns per verifier
    let labels = view.labels(Dimension::LeakageTarget);
    if !labels.is_empty() {
        let mut header = vec!["model".to_string()];
        for v in verifiers {
            header.push(format!("{v}: attribute+target"));
            header.push(format!("{v}: attribute+preserve"));
        }
        let rows = labels
            .iter()
            .map(|l| {
                let mut row = vec![l.clone()];
                for v in verifiers {
                    row.push(na_or(view.find(Dimension::LeakageTarget, l, "all", v)));
                    row.push(na_or(view.find(Dimension::LeakagePreserve, l, "all", v)));
                }
                row
            })
            .collect();
        tables.push(Table {
            name: "leakage".into(),
            title: "Attribute leakage: target phrase vs preserve phrase".into(),
            header,
            rows,
        });
        tables.extend(binned(
            &view,
            Dimension::LeakagePreserve,
            "slot=",
            "leakage_by_slot",
            "Attribute leakage onto the preserve object by attribute family",
        ));
        tables.extend(binned(
            &view,
            Dimension::LeakagePreserve,
            "preserve=",
            "leakage_by_preserve",
            "Attribute leakage by preserve object",
        ));
    }

    // schedule: one row per (CET, k), progressive vs all-at-once per verifier
    let sched = view.labels(Dimension::ScheduleTarget);
    if !sched.is_empty() {
        let mut ks: Vec<u64> = view
            .groups(Dimension::ScheduleTarget, "")
            .iter()
            .filter_map(|g| g.rsplit("k=").next()?.parse().ok())
            .collect();
        ks.sort_unstable();
        ks.dedup();
        for (dim, name, what) in [
            (Dimension::ScheduleTarget, "schedule_target", "Target"),
            (Dimension::SchedulePreserve, "schedule_preserve", "Preserve"),
        ] {
            let mut header = vec!["model".to_string(), "k".to_string()];
            for v in verifiers {
                header.push(format!("{v}: progressive"));
                header.push(format!("{v}: all at once"));
            }
            let mut rows = Vec::new();
            for l in &sched {
                for k in &ks {
                    let mut row = vec![l.clone(), k.to_string()];
                    for v in verifiers {
                        row.push(na_or(view.find(dim, l, &format!("progressive:k={k}"), v)));
                        row.push(na_or(view.find(dim, l, &format!("all_at_once:k={k}"), v)));
                    }
                    rows.push(row);
                }
            }
            tables.push(Table {
                name: name.into(),
                title: format!("{what} accuracy vs number of erased concepts"),
                header,
                rows,
            });
        }
    }

    // attention: accuracy and spread per model, r per verifier
    let att = view.labels(Dimension::Attention);
    if !att.is_empty() {
        let mut header = vec!["model".to_string(), "spread".to_string()];
        header.extend(verifiers.iter().cloned());
        let table_rows = att
            .iter()
            .map(|l| {
                let spread = view
                    .select(Dimension::Attention, Metric::Spread)
                    .find(|r| &r.model_label == l && r.group == "all");
                let mut row = vec![l.clone(), na_or(spread)];
                row.extend(verifiers.iter().map(|v| na_or(view.find(Dimension::Attention, l, "all", v))));
                row
            })
            .collect();
        tables.push(Table {
            name: "attention".into(),
            title: "Target accuracy and attention spread".into(),
            header,
            rows: table_rows,
        });
        if let Ok(corr) = spread_correlations(rows, verifiers) {
            let rows = corr
                .iter()
                .map(|c| {
                    vec![
                        c.verifier_id.clone(),
                        c.correlation.points.len().to_string(),
                        c.correlation
                            .pearson_r
                            .map_or_else(|| "undefined".to_string(), |r| format!("{r:.4}")),
                    ]
                })
                .collect();
            tables.push(Table {
                name: "attention_correlation".into(),
                title: "Pearson r between target accuracy and spread (edited models)".into(),
                header: vec!["verifier".into(), "models".into(), "r".into()],
                rows,
            });
        }
    }
    tables
}

fn footer(manifest: &RunManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Cells are mean ± std over seeds {:?}; std is the {}.", manifest.seeds, STD_CONVENTION);
    let _ = writeln!(s, "Classification verdicts: {}.", CLASSIFICATION_RULE);
    let _ = writeln!(s, "Label sets: {}.", LABEL_SET_RULE);
    if manifest.experiment == Experiment::Attention {
        let _ = writeln!(s, "Note: {}.", SPREAD_NOTE);
        let source = manifest.attention_extraction.as_deref().unwrap_or("not declared by the backend");
        let _ = writeln!(s, "Attention maps: {source}.");
    }
    if manifest.gaps > 0 {
        let _ = writeln!(s, "Gaps: {} failed work items are excluded from denominators (see gaps.jsonl).", manifest.gaps);
    }
    s
}

/// Renders a report for the run in `dir`; returns the files written.
pub fn render_report(dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    let rows = read_summary(&dir.join("summary.csv"))?;
    let verifiers: Vec<String> = manifest.verifiers.iter().map(|v| v.id.clone()).collect();
    let tables = build_tables(&rows, &verifiers);
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let out = dir.join("report");
            std::fs::create_dir_all(&out)?;
            for t in &tables {
                let path = out.join(format!("{}.csv", t.name));
                std::fs::write(&path, t.to_csv()?)?;
                written.push(path);
            }
        }
        ReportFormat::Md => {
            let out = dir.join("report");
            std::fs::create_dir_all(&out)?;
            let mut s = format!(
                "# Run {}: {} (target `{}`)\n\n",
                manifest.run_id, manifest.experiment, manifest.target
            );
            for t in &tables {
                s.push_str(&t.to_markdown());
                s.push('\n');
            }
            s.push_str("---\n\n");
            s.push_str(&footer(&manifest));
            let path = out.join("report.md");
            std::fs::write(&path, s)?;
            written.push(path);
        }
        ReportFormat::Plots => {
            let out = dir.join("plots");
            std::fs::create_dir_all(&out)?;
            written.extend(plot_all(&out, &rows, &verifiers)?);
        }
    }
    Ok(written)
}

type Series = (String, Vec<(f64, f64)>);

fn plot_err<E: std::fmt::Display>(e: E) -> SeeError {
    SeeError::Contract(format!("plot rendering failed: {e}"))
}

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series], scatter: bool) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.1.iter().map(|p| p.0));
    let (mut lo, mut hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let y_max = if series.iter().all(|s| s.1.iter().all(|p| p.1 <= 1.0)) { 1.0 } else { 100.0 };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((lo - pad)..(hi + pad), 0f64..(y_max * 1.02))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if scatter {
            chart
                .draw_series(points.iter().map(|p| Circle::new(*p, 5, color.filled())))
                .map_err(plot_err)?
                .label(name.clone())
                .legend(move |(x, y)| Circle::new((x + 8, y), 4, color.filled()));
        } else {
            chart
                .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(points.iter().map(|p| Circle::new(*p, 3, color.filled())))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Numeric x for a group label: the edit distance, the lower cosine edge
/// or the step count.
fn group_x(group: &str) -> Option<f64> {
    if let Some(rest) = group.strip_prefix("edit=") {
        return rest.parse().ok();
    }
    if let Some(rest) = group.strip_prefix("cos=[") {
        let (lo, hi) = rest.trim_end_matches(')').split_once(',')?;
        let (lo, hi): (f64, f64) = (lo.parse().ok()?, hi.parse().ok()?);
        return Some((lo + hi) / 2.0);
    }
    group.rsplit_once("k=").and_then(|(_, k)| k.parse().ok())
}

fn plot_all(out: &Path, rows: &[MetricSummary], verifiers: &[String]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    fn acc<'a>(rows: &'a [MetricSummary], d: Dimension, v: &'a str) -> impl Iterator<Item = &'a MetricSummary> {
        rows.iter()
            .filter(move |r| r.dimension == d && r.metric == Metric::Accuracy && r.verifier_id == v)
    }
    for v in verifiers {
        for (prefix, name, xlab) in [("edit=", "edit", "attribute edit distance to e"), ("cos=", "cosine", "embedding similarity to e")] {
            let mut series: BTreeMap<(usize, String), Vec<(f64, f64)>> = BTreeMap::new();
            let mut order: Vec<String> = Vec::new();
            for (d, set) in [(Dimension::NeighborErase, "erase"), (Dimension::NeighborPreserve, "preserve")] {
                for r in acc(rows, d, v).filter(|r| r.group.starts_with(prefix)) {
                    let key = format!("{} ({set})", r.model_label);
                    let pos = order.iter().position(|k| *k == key).unwrap_or_else(|| {
                        order.push(key.clone());
                        order.len() - 1
                    });
                    if let Some(x) = group_x(&r.group) {
                        series.entry((pos, key)).or_default().push((x, r.mean));
                    }
                }
            }
            if series.is_empty() {
                continue;
            }
            let series: Vec<Series> = series
                .into_iter()
                .map(|((_, k), mut pts)| {
                    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                    (k, pts)
                })
                .collect();
            let path = out.join(format!("neighbors_{name}_{}.svg", file_safe(v)));
            line_chart(&path, &format!("Accuracy vs distance ({v})"), xlab, "accuracy (%)", &series, false)?;
            written.push(path);
        }

        let mut sched: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in acc(rows, Dimension::ScheduleTarget, v) {
            let arm = r.group.split(':').next().unwrap_or("");
            if let Some(k) = group_x(&r.group) {
                sched.entry(format!("{} {arm}", r.model_label)).or_default().push((k, r.mean));
            }
        }
        if !sched.is_empty() {
            let series: Vec<Series> = sched
                .into_iter()
                .map(|(k, mut pts)| {
                    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                    (k, pts)
                })
                .collect();
            let path = out.join(format!("schedule_{}.svg", file_safe(v)));
            line_chart(
                &path,
                &format!("Target accuracy vs erased concepts ({v})"),
                "number of erased concepts",
                "target accuracy (%)",
                &series,
                false,
            )?;
            written.push(path);
        }
    }

    if let Ok(corr) = spread_correlations(rows, verifiers) {
        for VerifierCorrelation { verifier_id, correlation } in corr {
            let series: Vec<Series> = correlation
                .points
                .iter()
                .map(|p| (p.label.clone(), vec![(p.target_accuracy, p.mean_spread)]))
                .collect();
            let r = correlation
                .pearson_r
                .map_or_else(|| "undefined".to_string(), |r| format!("{r:.3}"));
            let path = out.join(format!("attention_{}.svg", file_safe(&verifier_id)));
            line_chart(
                &path,
                &format!("Spread vs target accuracy ({verifier_id}, r = {r})"),
                "target accuracy (%)",
                "normalized attention spread",
                &series,
                true,
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Gaps of a run, read back from disk.
pub fn read_gaps(dir: &Path) -> Result<Vec<Gap>> {
    let path = dir.join("gaps.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
