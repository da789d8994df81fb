//! PCA over standardized facial coefficients, stress ranking of components,
//! a binary LDA stress axis, and perturbation along an axis.

use std::io::Write;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Global per-channel z-scoring (population std, floored to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::InsufficientData("standardization needs at least 2 rows".into()));
        }
        let n = x.rows() as f64;
        let mut mean = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (c, v) in x.row(r).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).map(|s| if s < 1e-8 { 1.0 } else { s }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!("expected {} columns, got {}", self.mean.len(), x.cols())));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }

    pub fn inverse_row(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(z, (m, s))| m + s * z).collect()
    }
}

fn column_means(x: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= x.rows() as f64);
    mean
}

/// Sum of outer products of centered rows.
fn scatter(x: &Matrix, rows: &[usize], mean: &[f64]) -> Matrix {
    let c = x.cols();
    let mut s = Matrix::zeros(c, c);
    let mut d = vec![0.0; c];
    for &r in rows {
        for (j, v) in x.row(r).iter().enumerate() {
            d[j] = v - mean[j];
        }
        for i in 0..c {
            let row = s.row_mut(i);
            for j in 0..c {
                row[j] += d[i] * d[j];
            }
        }
    }
    s
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape("eigendecomposition needs a square matrix".into()));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += m.get(i, i) * m.get(i, i);
            for j in i + 1..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut vec = v.column(i);
        let lead = vec.iter().enumerate().fold(0, |b, (k, x)| if x.abs() > vec[b].abs() { k } else { b });
        if vec[lead] < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
        for (k, x) in vec.into_iter().enumerate() {
            vectors.set(k, col, x);
        }
    }
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Columns are principal components in descending eigenvalue order.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        self.components.column(k)
    }

    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_channels() {
            return Err(Error::Shape(format!("expected {} columns, got {}", self.n_channels(), x.cols())));
        }
        let mut centered = x.clone();
        for r in 0..centered.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul(&self.components)
    }

    pub fn reconstruct(&self, scores: &Matrix) -> Result<Matrix> {
        let mut x = scores.matmul(&self.components.transpose())?;
        for r in 0..x.rows() {
            for (v, m) in x.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x)
    }

    /// Axis along PC `k` with spread `sqrt(eigenvalue)`.
    pub fn axis(&self, k: usize) -> Axis {
        Axis { direction: self.component(k), sigma: self.eigenvalues[k].max(0.0).sqrt() }
    }
}

/// PCA from the sample (N-1) covariance.
pub fn fit_pca(x: &Matrix) -> Result<PcaModel> {
    if x.rows() < 2 {
        return Err(Error::InsufficientData("PCA needs at least 2 rows".into()));
    }
    let mean = column_means(x);
    let rows: Vec<usize> = (0..x.rows()).collect();
    let mut cov = scatter(x, &rows, &mean);
    cov.data_mut().iter_mut().for_each(|v| *v /= (x.rows() - 1) as f64);
    let trace: f64 = (0..cov.rows()).map(|i| cov.get(i, i)).sum();
    let scale: f64 = 1.0 + mean.iter().map(|m| m * m).sum::<f64>();
    if !(trace > 1e-24 * scale) {
        return Err(Error::DegenerateData("all rows are identical".into()));
    }
    let (values, components) = symmetric_eigen(&cov)?;
    let eigenvalues = values.into_iter().map(|v| v.max(0.0)).collect();
    Ok(PcaModel { mean, components, eigenvalues })
}

fn check_binary(labels: &[f64], n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), n)));
    }
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match l {
            l if l == 0.0 => neg.push(i),
            l if l == 1.0 => pos.push(i),
            _ => return Err(Error::Config(format!("label {l} is not 0 or 1"))),
        }
    }
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::DegenerateData("labels contain a single class".into()));
    }
    Ok((neg, pos))
}

/// Pearson correlation of `x` with a 0/1 label; zero when `x` is constant.
pub fn point_biserial(x: &[f64], labels: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let ml = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(labels) {
        sxy += (a - mx) * (b - ml);
        sxx += (a - mx) * (a - mx);
        syy += (b - ml) * (b - ml);
    }
    if sxx <= 1e-300 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCorrelation {
    pub component: usize,
    pub eigenvalue: f64,
    pub correlation: f64,
}

/// Components sorted by descending absolute point-biserial correlation.
pub fn rank_stress_components(pca: &PcaModel, x: &Matrix, labels: &[f64]) -> Result<Vec<ComponentCorrelation>> {
    check_binary(labels, x.rows())?;
    let scores = pca.scores(x)?;
    let mut out: Vec<ComponentCorrelation> = (0..scores.cols())
        .map(|k| ComponentCorrelation {
            component: k,
            eigenvalue: pca.eigenvalues[k],
            correlation: point_biserial(&scores.column(k), labels),
        })
        .collect();
    out.sort_by(|a, b| b.correlation.abs().total_cmp(&a.correlation.abs()));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdaAxis {
    /// Unit vector; the stress-class mean projects above the non-stress mean.
    pub direction: Vec<f64>,
    /// Class means `[no_stress, stress]`.
    pub class_means: [Vec<f64>; 2],
    /// Population std of the projections of all rows.
    pub sigma_proj: f64,
    pub shrinkage: f64,
}

impl LdaAxis {
    pub fn project(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.direction).map(|(a, b)| a * b).sum()
    }

    pub fn axis(&self) -> Axis {
        Axis { direction: self.direction.clone(), sigma: self.sigma_proj }
    }
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::DegenerateData("matrix is not positive definite".into()));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l.get(i, k) * y[k];
        }
        y[i] /= l.get(i, i);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l.get(k, i) * y[k];
        }
        y[i] /= l.get(i, i);
    }
    Ok(y)
}

/// Binary LDA with ridge shrinkage `1e-4 * trace(S_w) / C` on the pooled
/// within-class covariance.
pub fn fit_lda(x: &Matrix, labels: &[f64]) -> Result<LdaAxis> {
    let (neg, pos) = check_binary(labels, x.rows())?;
    if neg.len() < 2 || pos.len() < 2 {
        return Err(Error::InsufficientData("LDA needs at least 2 rows per class".into()));
    }
    let c = x.cols();
    let mean_of = |rows: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; c];
        for &r in rows {
            for (a, v) in m.iter_mut().zip(x.row(r)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= rows.len() as f64);
        m
    };
    let mu0 = mean_of(&neg);
    let mu1 = mean_of(&pos);
    let s0 = scatter(x, &neg, &mu0);
    let s1 = scatter(x, &pos, &mu1);
    let dof = (x.rows() - 2) as f64;
    let mut sw = Matrix::zeros(c, c);
    for ((w, a), b) in sw.data_mut().iter_mut().zip(s0.data()).zip(s1.data()) {
        *w = (a + b) / dof;
    }
    let trace: f64 = (0..c).map(|i| sw.get(i, i)).sum();
    let gamma = 1e-4 * trace / c as f64;
    if trace > 0.0 {
        for i in 0..c {
            sw.set(i, i, sw.get(i, i) + gamma);
        }
    } else {
        sw = Matrix::identity(c);
    }
    let diff: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
    let w = cholesky_solve(&sw, &diff)?;
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= 1e-12) {
        return Err(Error::DegenerateData("class means coincide".into()));
    }
    let direction: Vec<f64> = w.iter().map(|v| v / norm).collect();
    let proj: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().zip(&direction).map(|(a, b)| a * b).sum()).collect();
    let (_, sigma_proj) = crate::features::mean_std(&proj);
    Ok(LdaAxis { direction, class_means: [mu0, mu1], sigma_proj, shrinkage: gamma })
}

/// A direction with a characteristic spread.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub direction: Vec<f64>,
    pub sigma: f64,
}

/// `mean -/+ scale * sigma * direction`.
pub fn perturb_along_axis(mean: &[f64], axis: &Axis, scale: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if mean.len() != axis.direction.len() {
        return Err(Error::Shape(format!("mean has {} entries, axis {}", mean.len(), axis.direction.len())));
    }
    let step = scale * axis.sigma;
    let minus = mean.iter().zip(&axis.direction).map(|(m, d)| m - step * d).collect();
    let plus = mean.iter().zip(&axis.direction).map(|(m, d)| m + step * d).collect();
    Ok((minus, plus))
}

pub fn write_lda_axis<W: Write>(w: W, channels: &[String], axis: &LdaAxis) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["channel", "weight"])?;
    for (c, v) in channels.iter().zip(&axis.direction) {
        wtr.write_record([c.clone(), v.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_perturbed<W: Write>(w: W, channels: &[String], minus: &[f64], mean: &[f64], plus: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["channel", "minus3", "mean", "plus3"])?;
    for (i, c) in channels.iter().enumerate() {
        wtr.write_record([c.clone(), minus[i].to_string(), mean[i].to_string(), plus[i].to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Largest-magnitude loadings of a component as `name:weight` pairs.
pub fn top_loadings(component: &[f64], channels: &[String], k: usize) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..component.len()).collect();
    idx.sort_by(|&a, &b| component[b].abs().total_cmp(&component[a].abs()));
    idx.into_iter().take(k).map(|i| (channels[i].clone(), component[i])).collect()
}

/// One row per component in rank order.
pub fn write_pca_report<W: Write>(w: W, pca: &PcaModel, ranked: &[ComponentCorrelation], channels: &[String], k: usize) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["component", "eigenvalue", "stress_correlation", "top_loadings"])?;
    for r in ranked {
        let loadings = top_loadings(&pca.component(r.component), channels, k)
            .into_iter()
            .map(|(n, v)| format!("{n}:{v:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        wtr.write_record([format!("pc{}", r.component + 1), r.eigenvalue.to_string(), r.correlation.to_string(), loadings])?;
    }
    wtr.flush()?;
    Ok(())
}

/// First two PC scores per row with the row's label.
pub fn write_pca_embedding<W: Write>(w: W, scores: &Matrix, labels: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["row", "label", "pc1", "pc2"])?;
    for r in 0..scores.rows() {
        let pc2 = if scores.cols() > 1 { scores.get(r, 1) } else { 0.0 };
        wtr.write_record([r.to_string(), labels[r].to_string(), scores.get(r, 0).to_string(), pc2.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
