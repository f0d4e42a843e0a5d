//! Dice similarity evaluation of reconstruction (REC) and completion (CMP),
//! with CSV / markdown / boxplot reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ShapeClass, SkullTriplet, VoxelGrid, BINARIZE_THRESHOLD};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{DiagonalGaussian, LatentCode};
use crate::latent::{complete_shape, DeviationVectors};
use crate::render::{box_stats, save_boxplot, CLASS_COLORS};
use crate::training::ShapeModel;

/// `2|a ∩ b| / (|a| + |b|)` on grids read at the binarization threshold;
/// two empty grids score 1.
pub fn dsc(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    a.same_shape(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x >= BINARIZE_THRESHOLD, y >= BINARIZE_THRESHOLD);
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "REC")]
    Rec,
    #[serde(rename = "CMP")]
    Cmp,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Rec => "REC",
            Task::Cmp => "CMP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscRow {
    pub subject_id: String,
    pub model_tag: String,
    pub task: Task,
    pub class: ShapeClass,
    pub gamma: f64,
    pub dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscSummary {
    pub model_tag: String,
    pub task: Task,
    pub class: ShapeClass,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<DscRow>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.metadata.extend(other.metadata);
    }

    /// Per-subject scores of one (model, task, class) cell.
    pub fn scores(&self, model_tag: &str, task: Task, class: ShapeClass) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.model_tag == model_tag && r.task == task && r.class == class)
            .map(|r| r.dsc)
            .collect()
    }

    pub fn mean(&self, model_tag: &str, task: Task, class: ShapeClass) -> Option<f64> {
        let s = self.scores(model_tag, task, class);
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    pub fn model_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for r in &self.rows {
            if !tags.contains(&r.model_tag) {
                tags.push(r.model_tag.clone());
            }
        }
        tags
    }

    pub fn summaries(&self) -> Vec<DscSummary> {
        let mut out = Vec::new();
        for tag in self.model_tags() {
            for task in [Task::Rec, Task::Cmp] {
                for class in ShapeClass::ALL {
                    let s = self.scores(&tag, task, class);
                    if s.is_empty() {
                        continue;
                    }
                    let b = box_stats(&s);
                    out.push(DscSummary {
                        model_tag: tag.clone(),
                        task,
                        class,
                        n: s.len(),
                        mean: s.iter().sum::<f64>() / s.len() as f64,
                        median: b.median,
                        q1: b.q1,
                        q3: b.q3,
                    });
                }
            }
        }
        out
    }
}

/// REC: `DSC(binarize(reconstruct(x)), x)` for every class of every triplet.
pub fn evaluate_reconstruction<M: ShapeModel + ?Sized>(
    model: &M,
    model_tag: &str,
    triplets: &[SkullTriplet],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(3 * triplets.len());
    for t in triplets {
        for class in ShapeClass::ALL {
            let x = t.grid(class);
            rows.push(DscRow {
                subject_id: t.subject_id.clone(),
                model_tag: model_tag.into(),
                task: Task::Rec,
                class,
                gamma: 0.0,
                dsc: dsc(&model.reconstruct(x)?, x)?,
            });
        }
    }
    Ok(EvalReport { rows, metadata: BTreeMap::new() })
}

/// CMP: `DSC(binarize(complete_shape(x_defect, γ)), x_complete)` for both
/// defect classes.
pub fn evaluate_completion<M: ShapeModel + ?Sized>(
    model: &M,
    model_tag: &str,
    triplets: &[SkullTriplet],
    dev: &DeviationVectors,
    gamma: f64,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(2 * triplets.len());
    for t in triplets {
        for class in [ShapeClass::Cranial, ShapeClass::Facial] {
            let completed = complete_shape(model, t.grid(class), class, gamma, dev)?;
            rows.push(DscRow {
                subject_id: t.subject_id.clone(),
                model_tag: model_tag.into(),
                task: Task::Cmp,
                class,
                gamma,
                dsc: dsc(&completed, &t.complete)?,
            });
        }
    }
    Ok(EvalReport { rows, metadata: BTreeMap::new() })
}

pub const DSC_CSV: &str = "dsc.csv";
pub const SUMMARY_MD: &str = "summary.md";

pub fn write_dsc_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "model_tag", "task", "class", "gamma", "dsc"])?;
    for r in &report.rows {
        w.write_record([
            r.subject_id.clone(),
            r.model_tag.clone(),
            r.task.as_str().to_string(),
            r.class.as_str().to_string(),
            r.gamma.to_string(),
            r.dsc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_dsc_csv(path: &Path) -> Result<Vec<DscRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let task = match field(2) {
            "REC" => Task::Rec,
            "CMP" => Task::Cmp,
            other => return Err(invalid(format!("unknown task '{other}' in {}", path.display()))),
        };
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| invalid(format!("bad number '{}' in {}", field(i), path.display())))
        };
        rows.push(DscRow {
            subject_id: field(0).into(),
            model_tag: field(1).into(),
            task,
            class: field(3).parse()?,
            gamma: num(4)?,
            dsc: num(5)?,
        });
    }
    Ok(rows)
}

/// Markdown table: one row per model, REC and CMP columns per class.
pub fn summary_markdown(report: &EvalReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# DSC summary\n");
    let _ = writeln!(
        md,
        "| model | REC cranial | REC facial | REC complete | CMP cranial | CMP facial |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    let cells = [
        (Task::Rec, ShapeClass::Cranial),
        (Task::Rec, ShapeClass::Facial),
        (Task::Rec, ShapeClass::Complete),
        (Task::Cmp, ShapeClass::Cranial),
        (Task::Cmp, ShapeClass::Facial),
    ];
    for tag in report.model_tags() {
        let mut line = format!("| {tag} |");
        for (task, class) in cells {
            match report.mean(&tag, task, class) {
                Some(m) => {
                    let _ = write!(line, " {m:.4} |");
                }
                None => line.push_str(" n/a |"),
            }
        }
        let _ = writeln!(md, "{line}");
    }
    let _ = writeln!(md, "\nCells are means over subjects. Per-subject values, medians and quartiles:\n");
    let _ = writeln!(md, "| model | task | class | n | mean | median | q1 | q3 |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
    for s in report.summaries() {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            s.model_tag,
            s.task.as_str(),
            s.class,
            s.n,
            s.mean,
            s.median,
            s.q1,
            s.q3
        );
    }
    if !report.metadata.is_empty() {
        let _ = writeln!(md, "\n## Run metadata\n");
        for (k, v) in &report.metadata {
            let _ = writeln!(md, "- {k}: {v}");
        }
    }
    let _ = writeln!(
        md,
        "\nDSC is computed on grids binarized at {BINARIZE_THRESHOLD}; two empty grids score 1.0."
    );
    md
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedReport {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub boxplots: Vec<PathBuf>,
}

/// Writes `dsc.csv`, `summary.md` and one `boxplot_<task>_<model>.png` per
/// (task, model) into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<EmittedReport> {
    if report.rows.is_empty() {
        return Err(invalid("report has no rows"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(DSC_CSV);
    write_dsc_csv(report, &csv)?;
    let markdown = dir.join(SUMMARY_MD);
    fs::write(&markdown, summary_markdown(report)).map_err(|e| Error::io(&markdown, e))?;
    let mut boxplots = Vec::new();
    for tag in report.model_tags() {
        for task in [Task::Rec, Task::Cmp] {
            let groups: Vec<_> = ShapeClass::ALL
                .iter()
                .enumerate()
                .map(|(k, &c)| (report.scores(&tag, task, c), CLASS_COLORS[k]))
                .filter(|(s, _)| !s.is_empty())
                .collect();
            if groups.is_empty() {
                continue;
            }
            let safe: String = tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
            let path = dir.join(format!("boxplot_{}_{safe}.png", task.as_str()));
            save_boxplot(&groups, &path)?;
            boxplots.push(path);
        }
    }
    Ok(EmittedReport { csv, markdown, boxplots })
}

/// Harness oracle: codes every stored grid as a subject one-hot plus a class
/// offset (complete at the origin), so latent arithmetic is exact, and
/// decodes by nearest stored code.
#[derive(Debug, Clone)]
pub struct LookupOracle {
    entries: Vec<(Vec<f64>, VoxelGrid)>,
    dim: usize,
}

impl LookupOracle {
    pub fn new(triplets: &[SkullTriplet]) -> Result<Self> {
        if triplets.is_empty() {
            return Err(invalid("oracle needs at least one triplet"));
        }
        let n = triplets.len();
        let dim = n + 2;
        let mut entries = Vec::with_capacity(3 * n);
        for (i, t) in triplets.iter().enumerate() {
            for class in ShapeClass::ALL {
                let mut code = vec![0.0; dim];
                code[i] = 1.0;
                match class {
                    ShapeClass::Complete => {}
                    ShapeClass::Cranial => code[n] = 1.0,
                    ShapeClass::Facial => code[n + 1] = 1.0,
                }
                entries.push((code, t.grid(class).clone()));
            }
        }
        Ok(Self { entries, dim })
    }
}

impl ShapeModel for LookupOracle {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn posterior(&self, x: &VoxelGrid) -> Result<DiagonalGaussian> {
        let (code, _) = self
            .entries
            .iter()
            .find(|(_, g)| g == x)
            .ok_or_else(|| invalid("grid is unknown to the lookup oracle"))?;
        DiagonalGaussian::new(code.clone(), vec![0.0; self.dim])
    }

    fn decode_latent(&self, z: &LatentCode) -> Result<VoxelGrid> {
        if z.dim() != self.dim {
            return Err(invalid(format!("latent code has length {}, oracle expects {}", z.dim(), self.dim)));
        }
        let dist = |c: &[f64]| c.iter().zip(z.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let (_, grid) = self
            .entries
            .iter()
            .min_by(|a, b| dist(&a.0).total_cmp(&dist(&b.0)))
            .expect("oracle is nonempty");
        Ok(grid.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_triplets;
    use crate::latent::{deviation_vectors, encode_dataset};
    use proptest::prelude::*;

    fn mask(indices: impl IntoIterator<Item = usize>) -> VoxelGrid {
        let mut v = vec![0.0; 4096];
        for i in indices {
            v[i] = 1.0;
        }
        VoxelGrid::new([16, 16, 16], v).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = mask(0..100);
        let b = mask(50..150);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(200..300)).unwrap(), 0.0);
        assert_eq!(dsc(&mask([]), &mask([])).unwrap(), 1.0);
        assert!(dsc(&a, &VoxelGrid::zeros([8, 8, 8]).unwrap()).is_err());
    }

    #[test]
    fn oracle_scores_one_everywhere() {
        let ts = generate_synthetic_triplets(4, [16, 16, 16], 2).unwrap();
        let oracle = LookupOracle::new(&ts).unwrap();
        let dev = deviation_vectors(&encode_dataset(&oracle, &ts).unwrap()).unwrap();
        let mut report = evaluate_reconstruction(&oracle, "oracle", &ts).unwrap();
        report.extend(evaluate_completion(&oracle, "oracle", &ts, &dev, 1.0).unwrap());
        assert_eq!(report.rows.len(), 4 * 5);
        assert!(report.rows.iter().all(|r| r.dsc == 1.0));
        // γ = 0 on a complete input is plain reconstruction
        let out = complete_shape(&oracle, &ts[0].complete, ShapeClass::Cranial, 0.0, &dev).unwrap();
        assert_eq!(dsc(&out, &ts[0].complete).unwrap(), 1.0);
    }

    #[test]
    fn emitted_report_is_consistent() {
        let ts = generate_synthetic_triplets(3, [16, 16, 16], 4).unwrap();
        let oracle = LookupOracle::new(&ts).unwrap();
        let dev = deviation_vectors(&encode_dataset(&oracle, &ts).unwrap()).unwrap();
        let mut report = evaluate_reconstruction(&oracle, "oracle", &ts).unwrap();
        report.extend(evaluate_completion(&oracle, "oracle", &ts, &dev, 1.0).unwrap());
        report.rows[0].dsc = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let out = emit_report(&report, dir.path()).unwrap();
        let rows = read_dsc_csv(&out.csv).unwrap();
        assert_eq!(rows.len(), 3 * 3 + 3 * 2);
        assert_eq!(rows, report.rows);
        for s in report.summaries() {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.model_tag == s.model_tag && r.task == s.task && r.class == s.class)
                .map(|r| r.dsc)
                .collect();
            assert_eq!(s.mean, v.iter().sum::<f64>() / v.len() as f64);
        }
        let md = fs::read_to_string(&out.markdown).unwrap();
        assert!(md.contains("| model | REC cranial | REC facial | REC complete | CMP cranial | CMP facial |"));
        assert_eq!(out.boxplots.len(), 2);
        assert!(emit_report(&EvalReport::default(), dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_bounded(a in proptest::collection::vec(0usize..4096, 0..200), b in proptest::collection::vec(0usize..4096, 0..200)) {
            let (ga, gb) = (mask(a.clone()), mask(b));
            let ab = dsc(&ga, &gb).unwrap();
            prop_assert_eq!(ab, dsc(&gb, &ga).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dsc(&ga, &ga).unwrap(), 1.0);
        }
    }
}
