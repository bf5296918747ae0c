//! Domain prototypes and nearest-domain routing under a shared covariance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{Cholesky, Matrix};

/// Relative shrinkage applied to the shared covariance by default.
pub const DEFAULT_EPS_SCALE: f64 = 1e-3;
const EPS_FLOOR: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-9;

/// Per-domain means and one shared, regularized covariance.
#[derive(Clone, Debug)]
pub struct DomainPrototypeSet {
    means: Vec<Vec<f64>>,
    counts: Vec<usize>,
    /// Shared covariance before shrinkage.
    sigma: Matrix,
    eps_scale: f64,
    eps: f64,
    pooled: bool,
    factor: Cholesky,
}

impl PartialEq for DomainPrototypeSet {
    fn eq(&self, other: &Self) -> bool {
        self.means == other.means
            && self.counts == other.counts
            && self.sigma == other.sigma
            && self.eps_scale == other.eps_scale
            && self.eps == other.eps
            && self.pooled == other.pooled
    }
}

/// Per-domain means and the shared scatter `Σ_i (1/|D_i|) Σ_j (h - μ_i)(h - μ_i)ᵀ`.
/// With `pooled`, the scatter is instead divided by the total sample count.
pub fn shared_covariance(reps: &[Vec<Vec<f64>>], pooled: bool) -> Result<(Vec<Vec<f64>>, Matrix)> {
    if reps.is_empty() {
        return Err(Error::degenerate("no domains to build prototypes from"));
    }
    let d = reps
        .iter()
        .flatten()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::degenerate("no representations"))?;
    let total: usize = reps.iter().map(Vec::len).sum();
    let mut means = Vec::with_capacity(reps.len());
    let mut sigma = Matrix::zeros(d, d);
    for (i, dom) in reps.iter().enumerate() {
        if dom.is_empty() {
            return Err(Error::degenerate(format!("domain {i} has no representations")));
        }
        if let Some(h) = dom.iter().find(|h| h.len() != d) {
            return Err(Error::Shape {
                op: "prototypes",
                left: (1, d),
                right: (1, h.len()),
            });
        }
        let n = dom.len() as f64;
        let mut mu = vec![0.0; d];
        for h in dom {
            for (m, x) in mu.iter_mut().zip(h) {
                *m += x;
            }
        }
        for m in &mut mu {
            *m /= n;
        }
        let w = if pooled { 1.0 / total as f64 } else { 1.0 / n };
        let mut diff = vec![0.0; d];
        for h in dom {
            for ((df, x), m) in diff.iter_mut().zip(h).zip(&mu) {
                *df = x - m;
            }
            for r in 0..d {
                let s = w * diff[r];
                if s == 0.0 {
                    continue;
                }
                for (c, dc) in sigma.row_mut(r).iter_mut().zip(&diff) {
                    *c += s * dc;
                }
            }
        }
        means.push(mu);
    }
    // Exact symmetry regardless of summation order.
    for r in 0..d {
        for c in r + 1..d {
            let v = 0.5 * (sigma.get(r, c) + sigma.get(c, r));
            sigma.set(r, c, v);
            sigma.set(c, r, v);
        }
    }
    Ok((means, sigma))
}

/// `Σ + εI` with `ε = eps_scale · trace(Σ)/d`, floored at `1e-8`. Returns the
/// regularized matrix and `ε`.
pub fn regularize_covariance(sigma: &Matrix, eps_scale: f64) -> Result<(Matrix, f64)> {
    let (d, c) = sigma.shape();
    if d != c || d == 0 {
        return Err(Error::Shape {
            op: "regularize_covariance",
            left: sigma.shape(),
            right: (d, d),
        });
    }
    if !(eps_scale >= 0.0 && eps_scale.is_finite()) {
        return Err(Error::usage(format!("shrinkage scale must be non-negative, got {eps_scale}")));
    }
    let scale = sigma.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for r in 0..d {
        for c in r + 1..d {
            if (sigma.get(r, c) - sigma.get(c, r)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::usage(format!("covariance is not symmetric at ({r}, {c})")));
            }
        }
    }
    let trace: f64 = (0..d).map(|i| sigma.get(i, i)).sum();
    let eps = (eps_scale * trace / d as f64).max(EPS_FLOOR);
    let mut out = sigma.clone();
    for i in 0..d {
        out.set(i, i, out.get(i, i) + eps);
    }
    Ok((out, eps))
}

/// `-(x - μ)ᵀ Σ⁻¹ (x - μ)` given the Cholesky factor of `Σ`.
pub fn mahalanobis_score(x: &[f64], mu: &[f64], factor: &Cholesky) -> Result<f64> {
    if x.len() != mu.len() || x.len() != factor.dim() {
        return Err(Error::Shape {
            op: "mahalanobis_score",
            left: (1, x.len()),
            right: (1, mu.len()),
        });
    }
    let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    Ok(-factor.inverse_quadratic_form(&diff))
}

impl DomainPrototypeSet {
    /// Builds prototypes from per-domain representations, in domain order.
    pub fn compute(reps: &[Vec<Vec<f64>>], eps_scale: f64, pooled: bool) -> Result<Self> {
        let (means, sigma) = shared_covariance(reps, pooled)?;
        let counts = reps.iter().map(Vec::len).collect();
        Self::from_parts(means, counts, sigma, eps_scale, pooled)
    }

    fn from_parts(means: Vec<Vec<f64>>, counts: Vec<usize>, sigma: Matrix, eps_scale: f64, pooled: bool) -> Result<Self> {
        let (reg, eps) = regularize_covariance(&sigma, eps_scale)?;
        let factor = Cholesky::factor(&reg)?;
        Ok(Self {
            means,
            counts,
            sigma,
            eps_scale,
            eps,
            pooled,
            factor,
        })
    }

    /// Copy with means and covariance rounded to `f32`, the precision of the
    /// prototype file. Saving and loading it is lossless.
    pub fn quantized(&self) -> Result<Self> {
        let means = self
            .means
            .iter()
            .map(|m| m.iter().map(|&v| v as f32 as f64).collect())
            .collect();
        let mut sigma = self.sigma.clone();
        sigma.round_to_f32();
        Self::from_parts(means, self.counts.clone(), sigma, self.eps_scale, self.pooled)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Covariance before shrinkage.
    pub fn covariance(&self) -> &Matrix {
        &self.sigma
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    /// Score of `x` against every domain.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.means.iter().map(|m| mahalanobis_score(x, m, &self.factor)).collect()
    }

    /// Domain with the highest score; ties go to the smallest index.
    pub fn nearest(&self, x: &[f64]) -> Result<usize> {
        if self.means.is_empty() {
            return Err(Error::degenerate("no prototypes"));
        }
        let s = self.scores(x)?;
        Ok(crate::model::argmax(&s))
    }
}

pub fn compute_prototypes(reps: &[Vec<Vec<f64>>]) -> Result<DomainPrototypeSet> {
    DomainPrototypeSet::compute(reps, DEFAULT_EPS_SCALE, false)
}

pub fn nearest_domain(x: &[f64], prototypes: &DomainPrototypeSet) -> Result<usize> {
    prototypes.nearest(x)
}

#[derive(Serialize, Deserialize)]
struct PrototypeHeader {
    format: String,
    version: u32,
    n_domains: usize,
    d_model: usize,
    eps_scale: f64,
    eps: f64,
    pooled: bool,
    counts: Vec<usize>,
    means_file: String,
    covariance_file: String,
}

const PROTO_FORMAT: &str = "abscl-prototypes";

/// JSON header plus `f32` blobs `{stem}.means.bin` (N × d) and
/// `{stem}.sigma.bin` (d × d) next to it. Stores the quantized set.
pub fn save_prototypes(set: &DomainPrototypeSet, path: &Path) -> Result<()> {
    let q = set.quantized()?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::usage(format!("bad prototype path {}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let means_file = format!("{stem}.means.bin");
    let covariance_file = format!("{stem}.sigma.bin");
    let d = q.dim();
    let means = Matrix::from_vec(q.len(), d, q.means.iter().flatten().copied().collect())?;
    io::write_f32_blob(&dir.join(&means_file), &means)?;
    io::write_f32_blob(&dir.join(&covariance_file), &q.sigma)?;
    io::write_json(
        path,
        &PrototypeHeader {
            format: PROTO_FORMAT.into(),
            version: 1,
            n_domains: q.len(),
            d_model: d,
            eps_scale: q.eps_scale,
            eps: q.eps,
            pooled: q.pooled,
            counts: q.counts.clone(),
            means_file,
            covariance_file,
        },
    )
}

pub fn load_prototypes(path: &Path) -> Result<DomainPrototypeSet> {
    let h: PrototypeHeader = io::read_json(path)?;
    if h.format != PROTO_FORMAT || h.version != 1 {
        return Err(Error::format(format!(
            "{}: unsupported prototype format {} v{}",
            path.display(),
            h.format,
            h.version
        )));
    }
    if h.counts.len() != h.n_domains || h.n_domains == 0 {
        return Err(Error::format(format!("{}: inconsistent domain counts", path.display())));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let means = io::read_f32_blob(&dir.join(&h.means_file), h.n_domains, h.d_model)?;
    let sigma = io::read_f32_blob(&dir.join(&h.covariance_file), h.d_model, h.d_model)?;
    let means = (0..h.n_domains).map(|i| means.row(i).to_vec()).collect();
    let set = DomainPrototypeSet::from_parts(means, h.counts, sigma, h.eps_scale, h.pooled)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chol(rows: &[[f64; 2]]) -> Cholesky {
        Cholesky::factor(&Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn score_examples() {
        let id = chol(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(mahalanobis_score(&[3.0, 4.0], &[0.0, 0.0], &id).unwrap(), -25.0);
        assert_eq!(mahalanobis_score(&[1.5, -2.0], &[1.5, -2.0], &id).unwrap(), 0.0);
        let diag = chol(&[[4.0, 0.0], [0.0, 1.0]]);
        assert_eq!(mahalanobis_score(&[2.0, 0.0], &[0.0, 0.0], &diag).unwrap(), -1.0);
        assert!(matches!(mahalanobis_score(&[1.0], &[0.0, 0.0], &id), Err(Error::Shape { .. })));
    }

    #[test]
    fn covariance_examples() {
        let (m, s) = shared_covariance(&[vec![vec![1.0, 0.0], vec![-1.0, 0.0]]], false).unwrap();
        assert_eq!(m, vec![vec![0.0, 0.0]]);
        assert_eq!(s, Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));

        let (m, s) = shared_covariance(&[vec![vec![2.0, 3.0]]], false).unwrap();
        assert_eq!(m[0], vec![2.0, 3.0]);
        assert_eq!(s, Matrix::zeros(2, 2));

        let dom = |o: f64| vec![vec![o + 1.0, 0.5], vec![o - 1.0, -0.5]];
        let (_, single) = shared_covariance(&[dom(0.0)], false).unwrap();
        let (_, both) = shared_covariance(&[dom(0.0), dom(7.0)], false).unwrap();
        assert!(both.max_abs_diff(&single.scale(2.0)) < 1e-15);
        let (_, pooled) = shared_covariance(&[dom(0.0), dom(7.0)], true).unwrap();
        assert!(pooled.max_abs_diff(&single) < 1e-15);

        assert!(matches!(shared_covariance(&[vec![vec![1.0]], vec![]], false), Err(Error::Degenerate(_))));
    }

    #[test]
    fn regularization_examples() {
        let (r, eps) = regularize_covariance(&Matrix::zeros(2, 2), 1e-3).unwrap();
        assert_eq!(eps, 1e-8);
        assert!(Cholesky::factor(&r).is_ok());

        let (r, _) = regularize_covariance(&Matrix::identity(2), 1e-3).unwrap();
        assert_eq!(r, Matrix::identity(2).scale(1.0 + 1e-3));

        // Rank-one scatter vvᵀ, v = (1, 2): characteristic polynomial
        // λ² - tλ + det with t = trace, det > 0 and t > 0 means two positive roots.
        let s = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        let (r, _) = regularize_covariance(&s, 1e-3).unwrap();
        let t = r.get(0, 0) + r.get(1, 1);
        let det = r.get(0, 0) * r.get(1, 1) - r.get(0, 1) * r.get(1, 0);
        let disc = (t * t - 4.0 * det).sqrt();
        assert!((t - disc) / 2.0 > 0.0 && (t + disc) / 2.0 > 0.0);

        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(matches!(regularize_covariance(&asym, 1e-3), Err(Error::Usage(_))));
    }

    #[test]
    fn nearest_examples() {
        let reps = vec![vec![vec![0.0, 0.0]], vec![vec![10.0, 0.0]]];
        let set = DomainPrototypeSet::compute(&reps, 0.0, false).unwrap();
        assert_eq!(set.nearest(&[2.0, 0.0]).unwrap(), 0);
        assert_eq!(set.nearest(&[9.0, 1.0]).unwrap(), 1);
        assert_eq!(set.nearest(&[5.0, 3.0]).unwrap(), 0);
    }

    #[test]
    fn prototype_file_round_trip() {
        let reps = vec![
            vec![vec![0.1, 0.2, 0.3], vec![0.3, -0.1, 0.7]],
            vec![vec![1.1, 0.9, -0.4], vec![0.8, 1.3, -0.2], vec![1.0, 1.0, 0.0]],
        ];
        let set = compute_prototypes(&reps).unwrap().quantized().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prototypes.json");
        save_prototypes(&set, &p).unwrap();
        let back = load_prototypes(&p).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.factor().lower(), set.factor().lower());

        std::fs::write(dir.path().join("prototypes.sigma.bin"), [0u8; 5]).unwrap();
        assert!(matches!(load_prototypes(&p), Err(Error::Format(_))));
    }
}
