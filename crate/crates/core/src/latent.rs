//! Latent-space analytics: class centroids, deviation vectors, γ-controlled
//! completion, implant extraction and PCA projection.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{ShapeClass, SkullTriplet, VoxelGrid, BINARIZE_THRESHOLD};
use crate::error::{invalid, Result};
use crate::gaussian::LatentCode;
use crate::training::ShapeModel;

/// γ values of the default sweep.
pub const DEFAULT_GAMMAS: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5];

/// Per-class latent codes aligned by subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLatents {
    subject_ids: Vec<String>,
    complete: Vec<LatentCode>,
    cranial: Vec<LatentCode>,
    facial: Vec<LatentCode>,
}

impl ClassLatents {
    pub fn new(
        subject_ids: Vec<String>,
        complete: Vec<LatentCode>,
        cranial: Vec<LatentCode>,
        facial: Vec<LatentCode>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        if complete.len() != n || cranial.len() != n || facial.len() != n {
            return Err(invalid(format!(
                "class sizes differ: ids {n}, complete {}, cranial {}, facial {}",
                complete.len(),
                cranial.len(),
                facial.len()
            )));
        }
        if let Some(d) = complete.first().map(LatentCode::dim) {
            if [&complete, &cranial, &facial].iter().any(|c| c.iter().any(|z| z.dim() != d)) {
                return Err(invalid("latent codes do not share one dimension"));
            }
        }
        Ok(Self {
            subject_ids,
            complete,
            cranial,
            facial,
        })
    }

    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.complete.first().map_or(0, LatentCode::dim)
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn class(&self, class: ShapeClass) -> &[LatentCode] {
        match class {
            ShapeClass::Complete => &self.complete,
            ShapeClass::Cranial => &self.cranial,
            ShapeClass::Facial => &self.facial,
        }
    }

    pub fn centroid(&self, class: ShapeClass) -> Result<Vec<f64>> {
        mean_of(self.class(class))
    }

    /// Mean posterior-mean norm over all codes.
    pub fn mean_norm(&self) -> f64 {
        let all: Vec<f64> = ShapeClass::ALL
            .iter()
            .flat_map(|&c| self.class(c).iter().map(|z| z.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

fn mean_of(codes: &[LatentCode]) -> Result<Vec<f64>> {
    let first = codes.first().ok_or_else(|| invalid("no latent codes (N = 0)"))?;
    let mut m = vec![0.0; first.dim()];
    for z in codes {
        for (a, b) in m.iter_mut().zip(z.as_slice()) {
            *a += b;
        }
    }
    let n = codes.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Ok(m)
}

/// Posterior means of every grid of every triplet.
pub fn encode_dataset<M: ShapeModel + ?Sized>(model: &M, triplets: &[SkullTriplet]) -> Result<ClassLatents> {
    let mut per_class: [Vec<LatentCode>; 3] = Default::default();
    for t in triplets {
        for (k, &c) in ShapeClass::ALL.iter().enumerate() {
            per_class[k].push(model.encode_mean(t.grid(c))?);
        }
    }
    let [complete, cranial, facial] = per_class;
    ClassLatents::new(
        triplets.iter().map(|t| t.subject_id.clone()).collect(),
        complete,
        cranial,
        facial,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationVectors {
    pub dev_cr: Vec<f64>,
    pub dev_fa: Vec<f64>,
}

impl DeviationVectors {
    pub fn for_class(&self, class: ShapeClass) -> Result<&[f64]> {
        match class {
            ShapeClass::Cranial => Ok(&self.dev_cr),
            ShapeClass::Facial => Ok(&self.dev_fa),
            ShapeClass::Complete => Err(invalid("completion needs a defect class (cranial or facial)")),
        }
    }
}

/// Centroid-difference form: `mean(z^co) − mean(z^class)`.
pub fn deviation_vectors(latents: &ClassLatents) -> Result<DeviationVectors> {
    let co = latents.centroid(ShapeClass::Complete)?;
    let cr = latents.centroid(ShapeClass::Cranial)?;
    let fa = latents.centroid(ShapeClass::Facial)?;
    Ok(DeviationVectors {
        dev_cr: co.iter().zip(&cr).map(|(a, b)| a - b).collect(),
        dev_fa: co.iter().zip(&fa).map(|(a, b)| a - b).collect(),
    })
}

/// Paired-mean form: `(1/N) Σ (z^co_i − z^class_i)`.
pub fn deviation_vectors_paired(latents: &ClassLatents) -> Result<DeviationVectors> {
    let n = latents.len();
    if n == 0 {
        return Err(invalid("no latent codes (N = 0)"));
    }
    let paired = |class: ShapeClass| {
        let mut acc = vec![0.0; latents.dim()];
        for (co, other) in latents.complete.iter().zip(latents.class(class)) {
            for (a, (x, y)) in acc.iter_mut().zip(co.as_slice().iter().zip(other.as_slice())) {
                *a += x - y;
            }
        }
        acc.into_iter().map(|v| v / n as f64).collect()
    };
    Ok(DeviationVectors {
        dev_cr: paired(ShapeClass::Cranial),
        dev_fa: paired(ShapeClass::Facial),
    })
}

/// `z' = z + γ · dev`.
pub fn shifted_latent(z: &LatentCode, dev: &[f64], gamma: f64) -> Result<LatentCode> {
    if dev.len() != z.dim() {
        return Err(invalid(format!(
            "deviation vector has length {}, latent code {}",
            dev.len(),
            z.dim()
        )));
    }
    LatentCode::new(z.as_slice().iter().zip(dev).map(|(a, b)| a + gamma * b).collect())
}

/// Decodes `μ(x_defective) + γ · DEV_class`; the result is a soft grid.
pub fn complete_shape<M: ShapeModel + ?Sized>(
    model: &M,
    x_defective: &VoxelGrid,
    defect_class: ShapeClass,
    gamma: f64,
    dev: &DeviationVectors,
) -> Result<VoxelGrid> {
    let dev = dev.for_class(defect_class)?;
    let z = model.encode_mean(x_defective)?;
    model.decode_latent(&shifted_latent(&z, dev, gamma)?)
}

pub fn gamma_sweep<M: ShapeModel + ?Sized>(
    model: &M,
    x_defective: &VoxelGrid,
    defect_class: ShapeClass,
    gammas: &[f64],
    dev: &DeviationVectors,
) -> Result<Vec<VoxelGrid>> {
    let dev = dev.for_class(defect_class)?;
    let z = model.encode_mean(x_defective)?;
    gammas
        .iter()
        .map(|&g| model.decode_latent(&shifted_latent(&z, dev, g)?))
        .collect()
}

/// Voxels occupied in `completed` but not in `defective_input`, both read
/// at the binarization threshold.
pub fn implant_extract(completed: &VoxelGrid, defective_input: &VoxelGrid) -> Result<VoxelGrid> {
    completed.same_shape(defective_input)?;
    let values = completed
        .values()
        .iter()
        .zip(defective_input.values())
        .map(|(&c, &d)| if c >= BINARIZE_THRESHOLD && d < BINARIZE_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Ok(VoxelGrid::new(completed.dims(), values)?.with_spacing(completed.spacing()))
}

/// PCA of the pooled latents of all three classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Orthonormal rows, ordered by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Per class (complete, cranial, facial), one point per subject.
    pub points: [Vec<Vec<f64>>; 3],
    pub centroids: [Vec<f64>; 3],
    /// All latents identical: the components are an arbitrary basis.
    pub degenerate: bool,
}

impl PcaProjection {
    /// Projects `v − mean`.
    pub fn project_point(&self, v: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.project_direction(&centered)
    }

    /// Projects a direction (no centering), e.g. a deviation vector.
    pub fn project_direction(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn pca_project(latents: &ClassLatents, out_dim: usize) -> Result<PcaProjection> {
    let d = latents.dim();
    let total = 3 * latents.len();
    if out_dim == 0 || out_dim > d {
        return Err(invalid(format!("out_dim {out_dim} must be in 1..={d}")));
    }
    if total <= out_dim {
        return Err(invalid(format!("{total} samples are too few for {out_dim} components")));
    }
    let all: Vec<&LatentCode> = ShapeClass::ALL.iter().flat_map(|&c| latents.class(c)).collect();
    let mut mean = vec![0.0; d];
    for z in &all {
        for (m, v) in mean.iter_mut().zip(z.as_slice()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let x = DMatrix::from_fn(total, d, |r, c| all[r].as_slice()[c] - mean[c]);
    let cov = (x.transpose() * &x) / (total as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let all_var: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let scale = mean.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let degenerate = all_var <= 1e-24 * scale * scale;

    let mut components = Vec::with_capacity(out_dim);
    let mut explained_variance = Vec::with_capacity(out_dim);
    for &k in order.iter().take(out_dim) {
        let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        // Sign convention: the largest-magnitude entry is positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        components.push(v.iter().copied().collect::<Vec<f64>>());
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if all_var > 0.0 { v / all_var } else { 0.0 })
        .collect();

    let mut proj = PcaProjection {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
        points: Default::default(),
        centroids: Default::default(),
        degenerate,
    };
    for (k, &c) in ShapeClass::ALL.iter().enumerate() {
        proj.points[k] = latents.class(c).iter().map(|z| proj.project_point(z.as_slice())).collect();
        proj.centroids[k] = proj.project_point(&latents.centroid(c)?);
    }
    Ok(proj)
}

/// `subject_id,class,pc1,pc2,...`, one row per projected latent.
pub fn write_latent_csv(pca: &PcaProjection, subject_ids: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = pca.components.len();
    let mut header = vec!["subject_id".to_string(), "class".to_string()];
    header.extend((1..=k).map(|i| format!("pc{i}")));
    w.write_record(&header)?;
    for (class, points) in ShapeClass::ALL.iter().zip(&pca.points) {
        if points.len() != subject_ids.len() {
            return Err(invalid(format!("{} subject ids for {} projected points", subject_ids.len(), points.len())));
        }
        for (id, p) in subject_ids.iter().zip(points) {
            let mut row = vec![id.clone(), class.as_str().to_string()];
            row.extend(p.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| crate::error::Error::io(path, e))?;
    Ok(())
}
