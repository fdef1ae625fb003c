//! Retrieval, Recall@N and report emission (CSV, aligned text table, curve plots).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{similarity, Backbone, Descriptor};
use crate::dataset::{positives_for, PlaceRecord, RecordStore};
use crate::error::{ensure, Error, Result};

/// Ns used for curves unless configured otherwise.
pub const DEFAULT_NS: [usize; 6] = [1, 5, 10, 15, 20, 25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    pub ranked_scores: Vec<f64>,
}

/// Top `top_n` database entries by cosine similarity; ties broken by id.
pub fn retrieve(
    query_id: &str,
    query: &Descriptor,
    database: &[(String, Descriptor)],
    top_n: usize,
) -> Result<RetrievalResult> {
    ensure!(
        !database.is_empty(),
        Validation,
        "retrieval database is empty"
    );
    ensure!(
        top_n <= database.len(),
        Validation,
        "top_n {top_n} exceeds database size {}",
        database.len()
    );
    let mut scored = database
        .iter()
        .map(|(id, d)| Ok((similarity(query, d)?, id.as_str())))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.truncate(top_n);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        ranked_ids: scored.iter().map(|(_, id)| id.to_string()).collect(),
        ranked_scores: scored.iter().map(|(s, _)| *s).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall_at: BTreeMap<usize, f64>,
    /// Queries counted in the denominator.
    pub query_count: usize,
    /// Queries without any positive, left out of the denominator.
    pub excluded_count: usize,
    pub positive_threshold: Option<f64>,
}

impl RecallReport {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.recall_at.get(&n).copied()
    }
}

/// Fraction of queries with at least one positive among their top `N`.
pub fn recall_at_n(
    results: &[RetrievalResult],
    positives: &HashMap<String, Vec<String>>,
    ns: &[usize],
) -> Result<RecallReport> {
    ensure!(!ns.is_empty(), Validation, "no N values requested");
    let mut hits = vec![0usize; ns.len()];
    let mut counted = 0;
    let mut excluded = 0;
    for r in results {
        let pos = positives.get(&r.query_id).ok_or_else(|| {
            Error::Validation(format!("no positives entry for query {:?}", r.query_id))
        })?;
        if pos.is_empty() {
            excluded += 1;
            continue;
        }
        counted += 1;
        let pos: HashSet<&str> = pos.iter().map(String::as_str).collect();
        let first_hit = r.ranked_ids.iter().position(|id| pos.contains(id.as_str()));
        for (h, &n) in hits.iter_mut().zip(ns) {
            if first_hit.is_some_and(|rank| rank < n) {
                *h += 1;
            }
        }
    }
    let recall_at = ns
        .iter()
        .zip(hits)
        .map(|(&n, h)| {
            let frac = if counted == 0 {
                0.0
            } else {
                h as f64 / counted as f64
            };
            (n, frac)
        })
        .collect();
    Ok(RecallReport {
        recall_at,
        query_count: counted,
        excluded_count: excluded,
        positive_threshold: None,
    })
}

pub fn embed_records(
    backbone: &dyn Backbone,
    store: &RecordStore,
    records: &[PlaceRecord],
) -> Result<Vec<(String, Descriptor)>> {
    records
        .iter()
        .map(|r| Ok((r.id.clone(), backbone.embed(&*store.image(&r.id)?)?)))
        .collect()
}

/// Embeds, retrieves and scores `queries` against `database`.
pub fn evaluate(
    backbone: &dyn Backbone,
    store: &RecordStore,
    queries: &[PlaceRecord],
    database: &[PlaceRecord],
    positive_threshold: f64,
    ns: &[usize],
) -> Result<RecallReport> {
    let db = embed_records(backbone, store, database)?;
    let top = ns.iter().copied().max().unwrap_or(1).min(db.len());
    let mut results = Vec::with_capacity(queries.len());
    let mut positives = HashMap::new();
    for q in queries {
        let d = backbone.embed(&*store.image(&q.id)?)?;
        results.push(retrieve(&q.id, &d, &db, top)?);
        positives.insert(q.id.clone(), positives_for(q, database, positive_threshold));
    }
    let mut report = recall_at_n(&results, &positives, ns)?;
    report.positive_threshold = Some(positive_threshold);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    CurvePlot,
}

/// A labelled report for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledReport {
    pub label: String,
    pub dataset: String,
    pub report: RecallReport,
}

/// One row of `recall.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub label: String,
    pub dataset: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub recall: f64,
    pub query_count: usize,
    pub excluded_count: usize,
}

/// `table` writes `recall.csv` (one row per label and N) and `recall_table.txt`
/// (one row per label, columns R@1/R@5/R@10). `curve_plot` writes one
/// `recall_<dataset>.png` per dataset.
pub fn emit_report(
    reports: &[LabeledReport],
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    ensure!(!reports.is_empty(), Validation, "no reports to emit");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match format {
        ReportFormat::Table => {
            let csv_path = out_dir.join("recall.csv");
            let mut w = csv::Writer::from_path(&csv_path)?;
            for r in reports {
                for (&n, &recall) in &r.report.recall_at {
                    w.serialize(RecallRow {
                        label: r.label.clone(),
                        dataset: r.dataset.clone(),
                        n,
                        recall,
                        query_count: r.report.query_count,
                        excluded_count: r.report.excluded_count,
                    })?;
                }
            }
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
            let txt_path = out_dir.join("recall_table.txt");
            fs::write(&txt_path, format_table(reports)).map_err(|e| Error::io(&txt_path, e))?;
            Ok(vec![csv_path, txt_path])
        }
        ReportFormat::CurvePlot => {
            let mut by_dataset: BTreeMap<&str, Vec<&LabeledReport>> = BTreeMap::new();
            for r in reports {
                by_dataset.entry(r.dataset.as_str()).or_default().push(r);
            }
            let mut paths = Vec::new();
            for (dataset, group) in by_dataset {
                let path = out_dir.join(format!("recall_{dataset}.png"));
                draw_curves(&group).save(&path).map_err(Error::from)?;
                paths.push(path);
            }
            Ok(paths)
        }
    }
}

pub fn read_recall_csv(path: &Path) -> Result<Vec<RecallRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Aligned plain-text table with R@1, R@5 and R@10 per label.
pub fn format_table(reports: &[LabeledReport]) -> String {
    let label_w = reports
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let data_w = reports
        .iter()
        .map(|r| r.dataset.len())
        .max()
        .unwrap_or(7)
        .max(7);
    let mut out = format!(
        "{:<label_w$}  {:<data_w$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "label", "dataset", "R@1", "R@5", "R@10", "queries"
    );
    let cell = |r: &RecallReport, n| {
        r.at(n)
            .map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v))
    };
    for r in reports {
        out.push_str(&format!(
            "{:<label_w$}  {:<data_w$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            r.label,
            r.dataset,
            cell(&r.report, 1),
            cell(&r.report, 5),
            cell(&r.report, 10),
            r.report.query_count
        ));
    }
    out
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn draw_curves(reports: &[&LabeledReport]) -> RgbImage {
    let (w, h) = (480u32, 360u32);
    let (left, right, top, bottom) = (40i64, 20i64, 20i64, 40i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let max_n = reports
        .iter()
        .flat_map(|r| r.report.recall_at.keys())
        .copied()
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let px = |n: f64| left + ((n - 1.0) / (max_n - 1.0) * (w as i64 - left - right) as f64) as i64;
    let py = |v: f64| h as i64 - bottom - (v * (h as i64 - top - bottom) as f64) as i64;
    let grey = Rgb([200, 200, 200]);
    for tick in 0..=10 {
        let y = py(tick as f64 / 10.0);
        draw_line(&mut img, (left, y), (w as i64 - right, y), grey);
    }
    let black = Rgb([0, 0, 0]);
    draw_line(
        &mut img,
        (left, py(0.0)),
        (w as i64 - right, py(0.0)),
        black,
    );
    draw_line(&mut img, (left, py(0.0)), (left, py(1.0)), black);
    for (i, r) in reports.iter().enumerate() {
        let colour = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = r
            .report
            .recall_at
            .iter()
            .map(|(&n, &v)| (px(n as f64), py(v)))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], colour);
        }
        for &(x, y) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, x + dx, y + dy, colour);
                }
            }
        }
        // legend swatch, top-right, one row per series
        let ly = top + 4 + 10 * i as i64;
        for dy in 0..6 {
            for dx in 0..14 {
                put(&mut img, w as i64 - right - 20 + dx, ly + dy, colour);
            }
        }
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 as f64 + t * (b.0 - a.0) as f64;
        let y = a.1 as f64 + t * (b.1 - a.1) as f64;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}
