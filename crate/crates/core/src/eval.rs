//! ROC-AUC per label, report aggregation, report files and run comparison.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, Normalization, PreparedSample};
use crate::error::{Error, Result};
use crate::labelspace::{Dataset, LabelSpace, LabelVector, MaskVector};
use crate::netcore::{Matrix, Model};
use crate::splits::hash_ids;

/// Rank-statistic AUC with midranks for ties. `None` when either class is
/// absent.
///
/// With 1-based midranks, `2U = sum_pos 2*rank - n_pos (n_pos + 1)` is an
/// integer, so `AUC = 2U / (2 n_pos n_neg)` is formed from exact counts and
/// matches a pairwise count (`greater + equal / 2`) bit for bit.
pub fn roc_auc(scores: &[f64], truths: &[u8]) -> Result<Option<f64>> {
    if scores.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} truths",
            scores.len(),
            truths.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {s}")));
    }
    if let Some(t) = truths.iter().find(|&&t| t > 1) {
        return Err(Error::InvalidArgument(format!("truth {t} is not binary")));
    }
    let n_pos = truths.iter().filter(|&&t| t == 1).count() as u64;
    let n_neg = truths.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of twice their 1-based midrank.
    let mut twice_rank_sum = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let pos = order[start..=end]
            .iter()
            .filter(|&&i| truths[i] == 1)
            .count() as u64;
        twice_rank_sum += pos * (start as u64 + end as u64 + 2);
        start = end + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(Some(twice_u as f64 / (2 * n_pos * n_neg) as f64))
}

/// Per-label `(score, truth)` pairs restricted to mask-included samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<Vec<f64>>,
    pub truths: Vec<Vec<u8>>,
}

impl ScoredSet {
    pub fn collect(
        predictions: &Matrix,
        labels: &[LabelVector],
        masks: &[MaskVector],
    ) -> Result<Self> {
        let (n, c) = (predictions.rows(), predictions.cols());
        if labels.len() != n || masks.len() != n {
            return Err(Error::Shape(format!(
                "{n} predictions, {} labels, {} masks",
                labels.len(),
                masks.len()
            )));
        }
        let mut set = ScoredSet {
            scores: vec![Vec::new(); c],
            truths: vec![Vec::new(); c],
        };
        for i in 0..n {
            if labels[i].len() != c || masks[i].len() != c {
                return Err(Error::Shape(format!(
                    "sample {i} has the wrong label width"
                )));
            }
            for j in 0..c {
                if masks[i].get(j) == 1 {
                    set.scores[j].push(predictions.get(i, j));
                    set.truths[j].push(labels[i].get(j));
                }
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAuc {
    pub position: usize,
    pub name: String,
    pub dataset: Dataset,
    pub location_class: bool,
    pub located: bool,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeans {
    /// Over every defined pathology label of both datasets.
    pub pathologies: Option<f64>,
    pub per_dataset: Vec<(Dataset, Option<f64>)>,
    /// Over the five location-annotated pathologies.
    pub located: Option<f64>,
    /// Over the location classes (reported separately).
    pub location_classes: Option<f64>,
    /// Pathology labels left out of the means for lack of one class.
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub labels: Vec<LabelAuc>,
    pub means: ReportMeans,
    /// Hash of the sorted evaluated image ids.
    pub test_hash: String,
}

fn mean_of<'a, I: Iterator<Item = &'a LabelAuc>>(it: I) -> Option<f64> {
    let vals: Vec<f64> = it.filter_map(|l| l.auc).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl AucReport {
    /// Assembles a report; every mean is recomputed from `labels`.
    pub fn new(labels: Vec<LabelAuc>, test_hash: String) -> Self {
        let path = || labels.iter().filter(|l| !l.location_class);
        let means = ReportMeans {
            pathologies: mean_of(path()),
            per_dataset: Dataset::ALL
                .iter()
                .map(|&d| (d, mean_of(path().filter(|l| l.dataset == d))))
                .collect(),
            located: mean_of(path().filter(|l| l.located)),
            location_classes: mean_of(labels.iter().filter(|l| l.location_class)),
            undefined: path().filter(|l| l.auc.is_none()).count(),
        };
        AucReport {
            labels,
            means,
            test_hash,
        }
    }

    /// Scores every label of `space` over mask-included samples.
    pub fn from_predictions(
        space: &LabelSpace,
        predictions: &Matrix,
        labels: &[LabelVector],
        masks: &[MaskVector],
        image_ids: &[String],
    ) -> Result<Self> {
        if predictions.cols() != space.len() {
            return Err(Error::Shape(format!(
                "{} prediction columns for {} labels",
                predictions.cols(),
                space.len()
            )));
        }
        let set = ScoredSet::collect(predictions, labels, masks)?;
        let aucs: Vec<Option<f64>> = (0..space.len())
            .into_par_iter()
            .map(|j| roc_auc(&set.scores[j], &set.truths[j]))
            .collect::<Result<_>>()?;
        let entries = space
            .labels()
            .iter()
            .enumerate()
            .map(|(j, def)| {
                let n_pos = set.truths[j].iter().filter(|&&t| t == 1).count();
                LabelAuc {
                    position: j,
                    name: def.name.clone(),
                    dataset: def.dataset,
                    location_class: def.kind.is_location(),
                    located: def.located,
                    n_pos,
                    n_neg: set.truths[j].len() - n_pos,
                    auc: aucs[j],
                }
            })
            .collect();
        let mut ids: Vec<&str> = image_ids.iter().map(|s| s.as_str()).collect();
        ids.sort_unstable();
        Ok(AucReport::new(entries, hash_ids(ids)))
    }

    pub fn label(&self, dataset: Dataset, name: &str) -> Option<&LabelAuc> {
        self.labels
            .iter()
            .find(|l| l.dataset == dataset && l.name == name && !l.location_class)
    }

    pub fn dataset_mean(&self, dataset: Dataset) -> Option<f64> {
        self.means
            .per_dataset
            .iter()
            .find(|(d, _)| *d == dataset)
            .and_then(|(_, m)| *m)
    }

    fn csv_rows(&self, pick: impl Fn(&LabelAuc) -> bool) -> String {
        let mut out = String::from("label,n_pos,n_neg,auc\n");
        for l in self.labels.iter().filter(|l| pick(l)) {
            let auc = l.auc.map(|a| format!("{a:.6}")).unwrap_or_default();
            let name = if l.name.contains(',') {
                format!("\"{}\"", l.name)
            } else {
                l.name.clone()
            };
            let _ = writeln!(out, "{name},{},{},{auc}", l.n_pos, l.n_neg);
        }
        out
    }

    /// `auc_<dataset>.csv` and `.svg` per dataset present, `auc_location.csv`
    /// for the location classes, and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        };
        for d in Dataset::ALL {
            let pick = |l: &LabelAuc| l.dataset == d && !l.location_class;
            if !self.labels.iter().any(|l| pick(l) && l.n_pos + l.n_neg > 0) {
                continue;
            }
            let stem = format!("auc_{}", d.as_str().to_lowercase());
            put(&format!("{stem}.csv"), self.csv_rows(pick))?;
            let bars: Vec<&LabelAuc> = self.labels.iter().filter(|l| pick(l)).collect();
            put(
                &format!("{stem}.svg"),
                bar_chart_svg(&format!("{d} AUC"), &bars),
            )?;
        }
        if self
            .labels
            .iter()
            .any(|l| l.location_class && l.n_pos + l.n_neg > 0)
        {
            put("auc_location.csv", self.csv_rows(|l| l.location_class))?;
        }
        put("report.json", serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let r: AucReport = serde_json::from_str(&text)?;
        Ok(AucReport::new(r.labels, r.test_hash))
    }
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into())
}

impl fmt::Display for AucReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in Dataset::ALL {
            let rows: Vec<&LabelAuc> = self
                .labels
                .iter()
                .filter(|l| l.dataset == d && !l.location_class && l.n_pos + l.n_neg > 0)
                .collect();
            if rows.is_empty() {
                continue;
            }
            writeln!(f, "{d}")?;
            for l in rows {
                let mark = if l.located { "*" } else { " " };
                writeln!(
                    f,
                    " {mark}{:<26} {:>6} {:>6}  {}",
                    l.name,
                    l.n_pos,
                    l.n_neg,
                    fmt_auc(l.auc)
                )?;
            }
            writeln!(
                f,
                "  {:<26} {:>13}  {}",
                "Mean",
                "",
                fmt_auc(self.dataset_mean(d))
            )?;
        }
        writeln!(
            f,
            "Mean (all pathologies)          {}",
            fmt_auc(self.means.pathologies)
        )?;
        writeln!(
            f,
            "Mean (located, *)               {}",
            fmt_auc(self.means.located)
        )?;
        writeln!(
            f,
            "Mean (location classes)         {}",
            fmt_auc(self.means.location_classes)
        )?;
        if self.means.undefined > 0 {
            writeln!(
                f,
                "{} label(s) had a single class in the test set and are excluded from means",
                self.means.undefined
            )?;
        }
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Vertical bars of per-label AUC on a 0..1 axis with a 0.5 guide line.
pub fn bar_chart_svg(title: &str, labels: &[&LabelAuc]) -> String {
    let (bar, gap, left, top, plot_h) = (22.0, 8.0, 50.0, 40.0, 240.0);
    let width = left + labels.len() as f64 * (bar + gap) + 20.0;
    let height = top + plot_h + 170.0;
    let y = |v: f64| top + plot_h * (1.0 - v);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-size="14">{}</text>"#,
        xml_escape(title)
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ccc"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.2}</text>"##,
            width - 20.0,
            y(tick),
            y(tick),
            left - 4.0,
            y(tick) + 4.0
        );
    }
    for (i, l) in labels.iter().enumerate() {
        let x = left + gap / 2.0 + i as f64 * (bar + gap);
        if let Some(a) = l.auc {
            let fill = if l.located { "#c0392b" } else { "#2e6da4" };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{:.1}" fill="{fill}"><title>{} {a:.3}</title></rect>"#,
                y(a),
                plot_h * a,
                xml_escape(&l.name)
            );
        }
        let lx = x + bar / 2.0;
        let ly = top + plot_h + 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" transform="rotate(60 {lx:.1} {ly:.1})">{}</text>"#,
            xml_escape(&l.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Predictions of `model` on the indexed samples, in batches.
pub fn predict_samples(
    model: &Model,
    samples: &[PreparedSample],
    indices: &[usize],
    norm: &Normalization,
    batch_size: usize,
) -> Result<Matrix> {
    let classes = model.spec().classes;
    let mut data = Vec::with_capacity(indices.len() * classes);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = assemble_batch(samples, chunk, norm)?;
        data.extend_from_slice(model.predict(&batch.images)?.data());
    }
    Matrix::from_vec(indices.len(), classes, data)
}

/// AUC report of `model` on the indexed (test) samples.
pub fn evaluate(
    model: &Model,
    samples: &[PreparedSample],
    indices: &[usize],
    norm: &Normalization,
    space: &LabelSpace,
    batch_size: usize,
) -> Result<AucReport> {
    let preds = predict_samples(model, samples, indices, norm, batch_size)?;
    let labels: Vec<LabelVector> = indices.iter().map(|&i| samples[i].label.clone()).collect();
    let masks: Vec<MaskVector> = indices.iter().map(|&i| samples[i].mask.clone()).collect();
    let ids: Vec<String> = indices
        .iter()
        .map(|&i| samples[i].image_id.clone())
        .collect();
    AucReport::from_predictions(space, &preds, &labels, &masks, &ids)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub name: String,
    pub dataset: Dataset,
    pub located: bool,
    pub location_class: bool,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
    pub pathologies: DeltaRow,
    pub per_dataset: Vec<DeltaRow>,
    pub located: DeltaRow,
}

fn delta_row(
    name: &str,
    dataset: Dataset,
    located: bool,
    a: Option<f64>,
    b: Option<f64>,
) -> DeltaRow {
    DeltaRow {
        name: name.to_string(),
        dataset,
        located,
        location_class: false,
        a,
        b,
        delta: a.zip(b).map(|(a, b)| b - a),
    }
}

/// Per-label and mean differences `b - a`. Both reports must cover the
/// same labels and the same evaluated images.
pub fn compare_runs(a: &AucReport, b: &AucReport) -> Result<DeltaTable> {
    if a.test_hash != b.test_hash {
        return Err(Error::InvalidArgument(format!(
            "reports were computed on different test sets ({} vs {})",
            a.test_hash, b.test_hash
        )));
    }
    let names = |r: &AucReport| {
        r.labels
            .iter()
            .map(|l| (l.dataset, l.name.clone()))
            .collect::<Vec<_>>()
    };
    if names(a) != names(b) {
        return Err(Error::InvalidArgument(
            "reports use different label spaces".into(),
        ));
    }
    let rows = a
        .labels
        .iter()
        .zip(&b.labels)
        .map(|(x, y)| DeltaRow {
            location_class: x.location_class,
            ..delta_row(&x.name, x.dataset, x.located, x.auc, y.auc)
        })
        .collect();
    Ok(DeltaTable {
        rows,
        pathologies: delta_row(
            "Mean",
            Dataset::Plco,
            false,
            a.means.pathologies,
            b.means.pathologies,
        ),
        per_dataset: Dataset::ALL
            .iter()
            .map(|&d| delta_row("Mean", d, false, a.dataset_mean(d), b.dataset_mean(d)))
            .collect(),
        located: delta_row(
            "Mean (Location)",
            Dataset::Plco,
            true,
            a.means.located,
            b.means.located,
        ),
    })
}

impl fmt::Display for DeltaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = |v: Option<f64>| {
            v.map(|x| format!("{x:+.4}"))
                .unwrap_or_else(|| "n/a".into())
        };
        writeln!(
            f,
            "{:<8} {:<28} {:>7} {:>7} {:>8}",
            "dataset", "label", "a", "b", "b-a"
        )?;
        for r in self.rows.iter().filter(|r| !r.location_class) {
            let mark = if r.located { "*" } else { " " };
            writeln!(
                f,
                "{:<8}{mark}{:<28} {:>7} {:>7} {:>8}",
                r.dataset.as_str(),
                r.name,
                fmt_auc(r.a),
                fmt_auc(r.b),
                d(r.delta)
            )?;
        }
        for r in &self.per_dataset {
            writeln!(
                f,
                "{:<8} {:<28} {:>7} {:>7} {:>8}",
                r.dataset.as_str(),
                r.name,
                fmt_auc(r.a),
                fmt_auc(r.b),
                d(r.delta)
            )?;
        }
        let p = &self.pathologies;
        writeln!(
            f,
            "{:<8} {:<28} {:>7} {:>7} {:>8}",
            "all",
            p.name,
            fmt_auc(p.a),
            fmt_auc(p.b),
            d(p.delta)
        )?;
        let l = &self.located;
        writeln!(
            f,
            ">> {:<34} {:>7} {:>7} {:>8}",
            l.name,
            fmt_auc(l.a),
            fmt_auc(l.b),
            d(l.delta)
        )
    }
}

impl DeltaTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,label,located,a,b,delta\n");
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let all = self
            .rows
            .iter()
            .chain(&self.per_dataset)
            .chain([&self.pathologies, &self.located]);
        for r in all {
            let name = if r.name.contains(',') {
                format!("\"{}\"", r.name)
            } else {
                r.name.clone()
            };
            let _ = writeln!(
                out,
                "{},{name},{},{},{},{}",
                r.dataset.as_str(),
                r.located as u8,
                num(r.a),
                num(r.b),
                num(r.delta)
            );
        }
        out
    }
}

/// Writes `image_id,<label columns>` with one row per image.
pub fn write_score_file(
    path: &Path,
    space: &LabelSpace,
    ids: &[String],
    preds: &Matrix,
) -> Result<()> {
    if preds.rows() != ids.len() || preds.cols() != space.len() {
        return Err(Error::Shape(format!(
            "{}x{} scores for {} images and {} labels",
            preds.rows(),
            preds.cols(),
            ids.len(),
            space.len()
        )));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let mut header = vec!["image_id".to_string()];
    header.extend(space.labels().iter().map(|l| l.column_name()));
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..preds.cols()).map(|j| format!("{:?}", preds.get(i, j))));
        w.write_record(&row)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a score file and returns the rows for `ids`, in that order. The
/// header must list the label columns in label-space order.
pub fn read_score_file(path: &Path, space: &LabelSpace, ids: &[String]) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path)?;
    let expected: Vec<String> = std::iter::once("image_id".to_string())
        .chain(space.labels().iter().map(|l| l.column_name()))
        .collect();
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(Error::InvalidArgument(format!(
            "{}: header must be image_id followed by the {} label columns",
            path.display(),
            space.len()
        )));
    }
    let mut rows = std::collections::HashMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line as u64 + 2,
            message: m,
        };
        let scores: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad score `{v}`")))
            })
            .collect::<Result<_>>()?;
        if scores.len() != space.len() || scores.iter().any(|v| !v.is_finite()) {
            return Err(bad("expected one finite score per label".into()));
        }
        if rows.insert(rec[0].to_string(), scores).is_some() {
            return Err(Error::DuplicateImage(rec[0].to_string()));
        }
    }
    let mut data = Vec::with_capacity(ids.len() * space.len());
    for id in ids {
        let row = rows.get(id).ok_or_else(|| {
            Error::InvalidArgument(format!("{}: no scores for `{id}`", path.display()))
        })?;
        data.extend_from_slice(row);
    }
    Matrix::from_vec(ids.len(), space.len(), data)
}
