//! Worst-case embeddings on the unit hypersphere.
//!
//! For two embeddings `z1`, `z2` the worst case is the point minimising the
//! larger of the two dissimilarities. With angular dissimilarity on the
//! sphere it is the normalised sum `(z1 + z2) / |z1 + z2|`, which sits at
//! half the angle from each endpoint; with euclidean distance on raw
//! vectors it is the plain midpoint.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Norm tolerance for a vector to count as unit length.
pub const UNIT_TOLERANCE: f64 = 1e-9;
/// Below this `|z1 + z2|` the pair is treated as antipodal.
pub const ANTIPODAL_TOLERANCE: f64 = 1e-9;

/// A unit-norm point on the embedding hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps an already-normalised vector.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Invariant("empty embedding".into()));
        }
        let n = norm(&v);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Invariant(format!("embedding norm {n} is not 1")));
        }
        Ok(Embedding(v))
    }

    /// Projects `v` onto the sphere.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let n = norm(v);
        if !n.is_finite() || n <= crate::autodiff::NORM_EPS {
            return Err(Error::DegenerateInput(format!("cannot normalise vector of norm {n:e}")));
        }
        Ok(Embedding(v.iter().map(|x| x / n).collect()))
    }

    /// Standard basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Embedding(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn neg(&self) -> Self {
        Embedding(self.0.iter().map(|v| -v).collect())
    }

    /// Uniform sample on the sphere.
    pub fn random<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if let Ok(e) = Embedding::normalize(&v) {
                return e;
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("embedding dims {} and {} differ", a.dim(), b.dim())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DissimilarityKind {
    Angle,
    Euclidean,
}

/// Angle in `[0, π]` between two unit embeddings.
pub fn angle(z1: &Embedding, z2: &Embedding) -> Result<f64> {
    check_dims(z1, z2)?;
    Ok(angle_unchecked(z1.as_slice(), z2.as_slice()))
}

/// `acos(a.b)` evaluated as `2 atan2(|a - b|, |a + b|)`, which stays exact
/// near 0 and pi where acos loses half its digits.
pub(crate) fn angle_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (mut d, mut s) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        d += (x - y) * (x - y);
        s += (x + y) * (x + y);
    }
    2.0 * d.sqrt().atan2(s.sqrt())
}

pub fn dissimilarity(kind: DissimilarityKind, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        DissimilarityKind::Angle => angle_unchecked(a, b),
        DissimilarityKind::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

/// `max(d(z, z1), d(z, z2))`, the quantity the worst case minimises.
pub fn eq1_objective(z: &Embedding, z1: &Embedding, z2: &Embedding, kind: DissimilarityKind) -> Result<f64> {
    check_dims(z, z1)?;
    check_dims(z, z2)?;
    Ok(raw_objective(z.as_slice(), z1.as_slice(), z2.as_slice(), kind))
}

/// Objective over raw (not necessarily unit) vectors.
pub fn raw_objective(z: &[f64], z1: &[f64], z2: &[f64], kind: DissimilarityKind) -> f64 {
    dissimilarity(kind, z, z1).max(dissimilarity(kind, z, z2))
}

/// Closed-form worst-case embedding `(z1 + z2) / |z1 + z2|`.
pub fn worst_case_embedding(z1: &Embedding, z2: &Embedding) -> Result<Embedding> {
    check_dims(z1, z2)?;
    let sum: Vec<f64> = z1.0.iter().zip(&z2.0).map(|(a, b)| a + b).collect();
    let n = norm(&sum);
    if n <= ANTIPODAL_TOLERANCE {
        return Err(Error::DegeneratePair(n));
    }
    Ok(Embedding(sum.into_iter().map(|v| v / n).collect()))
}

/// Worst-case score expressed as an angle: half the angle between the pair.
/// The corresponding cosine similarity is `cos(θ/2)`.
pub fn worst_case_score(z1: &Embedding, z2: &Embedding) -> Result<f64> {
    worst_case_embedding(z1, z2)?;
    Ok(angle(z1, z2)? / 2.0)
}

/// Worst case for euclidean distance on raw vectors: the midpoint.
pub fn euclidean_worst_case(z1: &[f64], z2: &[f64]) -> Vec<f64> {
    z1.iter().zip(z2).map(|(a, b)| (a + b) / 2.0).collect()
}

/// Point on the great-circle arc from `z1` to `z2` at fraction `t`.
fn slerp(z1: &[f64], z2: &[f64], theta: f64, t: f64) -> Vec<f64> {
    let s = theta.sin();
    let (a, b) = (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s);
    let v: Vec<f64> = z1.iter().zip(z2).map(|(x, y)| a * x + b * y).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Direct search for the worst case: a sweep along the arc between the
/// pair plus uniform random points on the sphere. Returns the best sample
/// and its (angular) objective value.
pub fn brute_force_worst_case(z1: &Embedding, z2: &Embedding, n_samples: usize, seed: u64) -> Result<(Embedding, f64)> {
    check_dims(z1, z2)?;
    if n_samples < 1000 {
        return Err(Error::arg(format!(
            "brute force needs >= 1000 samples, got {n_samples}"
        )));
    }
    let kind = DissimilarityKind::Angle;
    let (a, b) = (z1.as_slice(), z2.as_slice());
    let mut best = (a.to_vec(), raw_objective(a, a, b, kind));
    let mut consider = |v: Vec<f64>| {
        let obj = raw_objective(&v, a, b, kind);
        if obj < best.1 {
            best = (v, obj);
        }
    };
    let theta = angle_unchecked(a, b);
    let n_arc = n_samples / 10;
    if theta.sin() > 1e-12 {
        for i in 0..=n_arc {
            consider(slerp(a, b, theta, i as f64 / n_arc as f64));
        }
    }
    consider(b.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_samples - n_arc {
        consider(Embedding::random(a.len(), &mut rng).0);
    }
    Ok((Embedding(best.0), best.1))
}

/// Writes embeddings as CSV with header `id,dim0,dim1,...`.
pub fn embeddings_to_csv(rows: &[(String, Embedding)]) -> Result<String> {
    let dim = rows.first().map_or(0, |r| r.1.dim());
    let mut out = String::from("id");
    for d in 0..dim {
        write!(out, ",dim{d}").unwrap();
    }
    out.push('\n');
    for (id, e) in rows {
        if e.dim() != dim {
            return Err(Error::dim("embeddings in one file must share a dimension"));
        }
        if id.contains([',', '\n', '\r']) {
            return Err(Error::arg(format!("embedding id {id:?} contains a separator")));
        }
        out.push_str(id);
        for v in e.as_slice() {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses the embedding CSV, validating header, dimensions and unit norms.
pub fn embeddings_from_csv(text: &str) -> Result<Vec<(String, Embedding)>> {
    let ctx = "embedding csv";
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(ctx, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"id") || cols.len() < 2 {
        return Err(Error::format(
            ctx,
            "header must start with 'id' and name at least one dim",
        ));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("dim{i}") {
            return Err(Error::format(ctx, format!("expected column dim{i}, found {c:?}")));
        }
    }
    let dim = cols.len() - 1;
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::format(
                ctx,
                format!("line {}: {} fields, expected {}", ln + 2, fields.len(), dim + 1),
            ));
        }
        let v = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(ctx, format!("line {}: {e}", ln + 2)))?;
        let e = Embedding::new(v).map_err(|e| Error::format(ctx, format!("line {}: {e}", ln + 2)))?;
        rows.push((fields[0].to_string(), e));
    }
    Ok(rows)
}
