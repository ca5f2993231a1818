//! Rank correlation between explanation heatmaps and reference maps, and
//! the per-model report rows built from it.

use std::fmt::Write as _;

use thiserror::Error;

use crate::cam::{capture, gradcam_from_capture, threshold_from_capture, CamError, Heatmap, Method, Target, DEFAULT_THRESHOLD};
use crate::datakit::Sample;
use crate::exec::Exec;
use crate::zoo::{predict, Model, ZooError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("spearman needs equal lengths >= 2, got {0} and {1}")]
    Length(usize, usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Cam(#[from] CamError),
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error("empty dataset")]
    Empty,
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// One side had no rank variance; `rho` is 0 by convention.
    pub degenerate: bool,
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if let Some(i) = a.iter().chain(b).position(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite(i % a.len()));
    }
    Ok(match pearson(&average_ranks(a), &average_ranks(b)) {
        Some(rho) => Spearman { rho, degenerate: false },
        None => Spearman {
            rho: 0.0,
            degenerate: true,
        },
    })
}

fn as_f64(h: &Heatmap) -> Vec<f64> {
    h.values().iter().map(|&v| v as f64).collect()
}

/// Which class the explanation is computed for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassSource {
    #[default]
    Label,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub threshold: f32,
    pub class_source: ClassSource,
    pub target: Target,
    /// Gaussian blur applied to model heatmaps before scoring; 0 disables.
    pub blur_sigma: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            class_source: ClassSource::Label,
            target: Target::Logit,
            blur_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub model: String,
    pub method: Method,
    pub scores: Vec<f64>,
    pub mean_score: f64,
    pub top1: f64,
    pub params: usize,
    pub n_degenerate: usize,
}

impl AlignmentReport {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            model: self.model.clone(),
            method: self.method.tag().to_string(),
            top1: self.top1,
            mean_score: self.mean_score,
            n_images: self.scores.len(),
            n_degenerate: self.n_degenerate,
            params: self.params,
        }
    }
}

/// Score a heatmap against its reference at the reference's resolution.
pub fn score_heatmap(model_map: &Heatmap, reference: &Heatmap, blur_sigma: f64) -> Result<Spearman> {
    let resized = model_map.resize(reference.height(), reference.width()).blurred(blur_sigma);
    spearman(&as_f64(&resized), &as_f64(reference))
}

struct ImageScore {
    correct: bool,
    per_method: Vec<(f64, bool)>,
}

fn score_image(model: &Model, sample: &Sample, methods: &[Method], opts: &ScoreOptions) -> Result<ImageScore> {
    let image = sample.image.to_tensor();
    let logits = predict(model, &image)?;
    let predicted = logits
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
    let class = match opts.class_source {
        ClassSource::Label => sample.label,
        ClassSource::Predicted => predicted,
    };
    let cap = capture(model, &image, class, opts.target)?;
    let (h, w) = (cap.input_height, cap.input_width);
    let mut per_method = Vec::with_capacity(methods.len());
    for m in methods {
        let cam = match m {
            Method::GradCam => gradcam_from_capture(&cap, h, w)?,
            Method::ThresholdGradCam => threshold_from_capture(&cap, opts.threshold, h, w)?,
        };
        let s = score_heatmap(&cam.heatmap, &sample.heatmap, opts.blur_sigma)?;
        per_method.push((s.rho, cam.degenerate || s.degenerate));
    }
    Ok(ImageScore {
        correct: predicted == sample.label,
        per_method,
    })
}

/// One report per method. All methods share a single forward/backward
/// per image. Images fan out over `exec`; aggregation keeps dataset order.
pub fn score_methods(
    model: &Model,
    name: &str,
    samples: &[Sample],
    methods: &[Method],
    opts: &ScoreOptions,
    exec: Exec,
) -> Result<Vec<AlignmentReport>> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let results = exec.map(samples, |s| score_image(model, s, methods, opts));
    let mut images = Vec::with_capacity(results.len());
    for r in results {
        images.push(r?);
    }
    let top1 = images.iter().filter(|s| s.correct).count() as f64 / images.len() as f64;
    Ok(methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let scores: Vec<f64> = images.iter().map(|s| s.per_method[k].0).collect();
            AlignmentReport {
                model: name.to_string(),
                method,
                mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
                n_degenerate: images.iter().filter(|s| s.per_method[k].1).count(),
                scores,
                top1,
                params: model.param_count(),
            }
        })
        .collect())
}

pub fn score_model(model: &Model, name: &str, samples: &[Sample], method: Method, opts: &ScoreOptions, exec: Exec) -> Result<AlignmentReport> {
    Ok(score_methods(model, name, samples, &[method], opts, exec)?.remove(0))
}

pub const CSV_HEADER: &str = "model,method,top1,mean_score,n_images,n_degenerate,params";

/// One CSV line of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub method: String,
    pub top1: f64,
    pub mean_score: f64,
    pub n_images: usize,
    pub n_degenerate: usize,
    pub params: usize,
}

pub fn emit_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{},{},{}",
            r.model, r.method, r.top1, r.mean_score, r.n_images, r.n_degenerate, r.params
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(EvalError::Csv {
                line: 1,
                msg: format!("header {h:?} does not match {CSV_HEADER:?}"),
            })
        }
        None => {
            return Err(EvalError::Csv {
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| EvalError::Csv { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(fail(format!("expected 7 fields, got {}", f.len())));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|e| fail(format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| fail(format!("{s:?}: {e}")));
        rows.push(ReportRow {
            model: f[0].to_string(),
            method: f[1].to_string(),
            top1: float(f[2])?,
            mean_score: float(f[3])?,
            n_images: int(f[4])?,
            n_degenerate: int(f[5])?,
            params: int(f[6])?,
        });
    }
    Ok(rows)
}

/// Plain-text table with the column names of the paper's results table;
/// each row fills the score column of its own method.
pub fn format_table(rows: &[ReportRow]) -> String {
    let header = ["Model", "Top1-accuracy", "Grad-CAM score", "Threshold-Grad-CAM score", "Params"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            let score = format!("{:.4}", r.mean_score);
            let (g, t) = match r.method.as_str() {
                "gradcam" => (score, "-".to_string()),
                "threshold_gradcam" => ("-".to_string(), score),
                _ => ("-".to_string(), "-".to_string()),
            };
            [r.model.clone(), format!("{:.2}", r.top1 * 100.0), g, t, r.params.to_string()]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &body {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "| {} |", padded.join(" | "));
    };
    line(&mut out, &header);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for row in &body {
        line(&mut out, &row.each_ref().map(String::as_str));
    }
    out
}
