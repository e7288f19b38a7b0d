//! Classical multidimensional scaling and the semantic / rectified / pivot
//! scatter diagnostic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::ndgrad::{euclidean, Tensor};
use crate::srn::SrnParams;

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
const SVG_SIZE: f64 = 800.0;

/// Eigenvalues (descending) and matching eigenvectors (as columns) of a
/// symmetric matrix, by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim(
            "eigen input",
            format!("{n}x{n}"),
            format!("{n}x{}", a.cols()),
        ));
    }
    let mut m = a.clone();
    let mut v = Tensor::identity(n);
    let scale = m.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, i));
        }
    }
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingResult {
    /// `n x k` coordinates.
    pub coords: Tensor,
    /// Raw stress: `sqrt(sum (d_ij - e_ij)^2 / sum d_ij^2)`, 0 for all-zero input.
    pub stress: f64,
}

fn check_distances(d: &Tensor) -> Result<()> {
    let n = d.rows();
    if d.cols() != n {
        return Err(Error::dim(
            "distance matrix",
            format!("{n}x{n}"),
            format!("{n}x{}", d.cols()),
        ));
    }
    for i in 0..n {
        if d.get(i, i) != 0.0 {
            return Err(Error::Invalid(format!(
                "distance matrix diagonal ({i},{i}) is not zero"
            )));
        }
        for j in 0..n {
            let x = d.get(i, j);
            if !x.is_finite() || x < 0.0 {
                return Err(Error::Invalid(format!(
                    "distance ({i},{j}) = {x} is negative or non-finite"
                )));
            }
            let y = d.get(j, i);
            if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::Invalid(format!(
                    "distance matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Torgerson MDS: double-centre `-D^2 / 2`, keep the top `k` non-negative
/// eigenpairs. Each axis is flipped so its first non-zero entry is positive.
pub fn classical_mds(d: &Tensor, k: usize) -> Result<EmbeddingResult> {
    check_distances(d)?;
    let n = d.rows();
    if k == 0 {
        return Err(Error::Invalid("embedding dimension must be >= 1".into()));
    }
    let sq = d.map(|x| x * x);
    let row_means: Vec<f64> = (0..n)
        .map(|i| sq.row_slice(i).iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut b = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            b.set(
                i,
                j,
                -0.5 * (sq.get(i, j) - row_means[i] - row_means[j] + grand),
            );
        }
    }
    let (values, vectors) = symmetric_eigen(&b)?;
    let tiny = 1e-12 * values.first().map_or(0.0, |v| v.abs()).max(1.0);
    let mut coords = Tensor::zeros(n, k);
    for (axis, &lambda) in values.iter().enumerate().take(k) {
        if lambda <= tiny {
            continue;
        }
        let root = lambda.sqrt();
        let flip = (0..n)
            .map(|r| vectors.get(r, axis))
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, |x| x.signum());
        for r in 0..n {
            coords.set(r, axis, flip * root * vectors.get(r, axis));
        }
    }
    let embedded = distance_matrix(&coords);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in d.data().iter().zip(embedded.data()) {
        num += (x - y).powi(2);
        den += x * x;
    }
    let stress = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    Ok(EmbeddingResult { coords, stress })
}

/// Pairwise Euclidean distances between rows.
pub fn distance_matrix(points: &Tensor) -> Tensor {
    let n = points.rows();
    let mut d = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let x = euclidean(points.row_slice(i), points.row_slice(j));
            d.set(i, j, x);
            d.set(j, i, x);
        }
    }
    d
}

/// One embedded space of the diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceEmbedding {
    pub space: &'static str,
    pub embedding: EmbeddingResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    /// Semantic, rectified, pivot, in that order.
    pub spaces: Vec<SpaceEmbedding>,
}

impl Diagnostic {
    pub fn coords_csv(&self) -> String {
        let mut out = String::from("space,class_id,class_name,x,y\n");
        for s in &self.spaces {
            for (i, (&c, name)) in self.class_ids.iter().zip(&self.class_names).enumerate() {
                let (x, y) = (s.embedding.coords.get(i, 0), s.embedding.coords.get(i, 1));
                let _ = writeln!(out, "{},{},{},{},{}", s.space, c, name, x, y);
            }
        }
        out
    }

    /// Three side-by-side panels, one per space, in a fixed 800 x 800 view.
    pub fn svg(&self) -> String {
        let colors = ["#1f77b4", "#d62728", "#2ca02c"];
        let panel_h = SVG_SIZE / 3.0;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="800" viewBox="0 0 800 800">"#
        );
        let _ = writeln!(out, r#"<rect width="800" height="800" fill="white"/>"#);
        for (p, s) in self.spaces.iter().enumerate() {
            let c = &s.embedding.coords;
            let top = p as f64 * panel_h;
            let extent = c
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(1e-12);
            let half = panel_h / 2.0 - 24.0;
            let (cx, cy) = (SVG_SIZE / 2.0, top + panel_h / 2.0 + 8.0);
            let _ = writeln!(
                out,
                r#"<text x="8" y="{:.2}" font-family="sans-serif" font-size="14" fill="{}">{}</text>"#,
                top + 18.0,
                colors[p % 3],
                s.space
            );
            for (i, name) in self.class_names.iter().enumerate() {
                let x = cx + c.get(i, 0) / extent * half * 2.5;
                let y = cy - c.get(i, 1) / extent * half;
                let _ = writeln!(
                    out,
                    r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{}"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10">{}</text>"#,
                    colors[p % 3],
                    x + 6.0,
                    y - 4.0,
                    escape(name)
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("coords.csv", self.coords_csv()), ("plot.svg", self.svg())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Embeds the seen classes' semantic rows, rectified rows and visual pivots,
/// each space on its own.
pub fn build_diagnostic(prepared: &Prepared, srn: &SrnParams) -> Result<Diagnostic> {
    let seen = &prepared.split.seen;
    let semantic = prepared.seen_semantics();
    let rectified = srn.rectify(&semantic)?;
    let mut spaces = Vec::with_capacity(3);
    for (space, points) in [
        ("semantic", &semantic),
        ("rectified", &rectified),
        ("pivot", &prepared.pivots.pivots),
    ] {
        spaces.push(SpaceEmbedding {
            space,
            embedding: classical_mds(&distance_matrix(points), 2)?,
        });
    }
    Ok(Diagnostic {
        class_ids: seen.clone(),
        class_names: seen
            .iter()
            .map(|&c| prepared.dataset.class_names[c].clone())
            .collect(),
        spaces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points() {
        let d = Tensor::matrix(2, 2, vec![0.0, 3.5, 3.5, 0.0]).unwrap();
        let e = classical_mds(&d, 2).unwrap();
        let c = &e.coords;
        assert!((euclidean(c.row_slice(0), c.row_slice(1)) - 3.5).abs() < 1e-12);
        assert!(e.stress < 1e-12);
    }

    #[test]
    fn all_zero_distances() {
        let e = classical_mds(&Tensor::zeros(4, 4), 2).unwrap();
        assert!(e.coords.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equilateral_triangle() {
        let mut d = Tensor::filled(3, 3, 1.0);
        for i in 0..3 {
            d.set(i, i, 0.0);
        }
        let c = classical_mds(&d, 2).unwrap().coords;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!((euclidean(c.row_slice(i), c.row_slice(j)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn centred_with_sign_convention() {
        let pts = Tensor::matrix(4, 2, vec![0.0, 0.0, 3.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let c = classical_mds(&distance_matrix(&pts), 2).unwrap().coords;
        let means = c.column_means();
        assert!(means.data().iter().all(|m| m.abs() < 1e-9));
        for axis in 0..2 {
            let first = (0..4)
                .map(|r| c.get(r, axis))
                .find(|x| x.abs() > 1e-12)
                .unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn invalid_inputs() {
        let asym = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(classical_mds(&asym, 2).is_err());
        let neg = Tensor::matrix(2, 2, vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        assert!(classical_mds(&neg, 2).is_err());
        let diag = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(classical_mds(&diag, 2).is_err());
    }

    #[test]
    fn eigen_of_diagonalisable_matrix() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let r = 0.5f64.sqrt();
        assert!((vecs.get(0, 0).abs() - r).abs() < 1e-12);
    }
}
