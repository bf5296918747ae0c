//! Low-rank adapters: initialization, the additive delta `B·A·h₀`, the
//! orthogonality penalty between a domain-variant and the domain-invariant
//! adapter, and the on-disk format.
//!
//! Row-major activations are stored as `T × d` matrices (one row per token),
//! so the column-vector delta `B A h₀` becomes `h₀ Aᵀ Bᵀ` here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{Matrix, ParamId, Tape, Var};

/// Width multiplier of the feed-forward hidden layer.
pub const FF_MULT: usize = 4;

const INIT_STD: f64 = 0.02;
const FORMAT_TAG: &str = "abscl-adapter";
const FORMAT_VERSION: u32 = 1;

/// A linear projection inside a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    FfUp,
    FfDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::FfUp,
        Projection::FfDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::FfUp => "ff_up",
            Projection::FfDown => "ff_down",
        }
    }

    /// `(d_in, d_out)` of the projection for a model of width `d`.
    pub fn dims(self, d: usize) -> (usize, usize) {
        match self {
            Projection::FfUp => (d, FF_MULT * d),
            Projection::FfDown => (FF_MULT * d, d),
            _ => (d, d),
        }
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown projection `{s}`")))
    }
}

/// Where an adapter pair is injected: one projection of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InjectionPoint {
    pub layer: usize,
    pub proj: Projection,
}

impl InjectionPoint {
    pub fn new(layer: usize, proj: Projection) -> Self {
        Self { layer, proj }
    }

    /// Every `(layer, proj)` combination, layer-major.
    pub fn grid(n_layers: usize, projs: &[Projection]) -> Vec<InjectionPoint> {
        (0..n_layers)
            .flat_map(|layer| projs.iter().map(move |&proj| InjectionPoint { layer, proj }))
            .collect()
    }
}

impl fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.proj.name())
    }
}

impl FromStr for InjectionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format(format!("malformed injection point `{s}`"));
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let (layer, proj) = rest.split_once('.').ok_or_else(bad)?;
        Ok(Self {
            layer: layer.parse().map_err(|_| bad())?,
            proj: proj.parse().map_err(|_| bad())?,
        })
    }
}

/// What an adapter is used for in the continual sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "domain", rename_all = "snake_case")]
pub enum AdapterRole {
    Invariant,
    Variant(usize),
    WarmedInvariant(usize),
    /// The single adapter of the plain sequential fine-tuning baseline.
    Sequential,
    /// Folded into the frozen base before continual learning starts.
    Pretraining,
}

impl fmt::Display for AdapterRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterRole::Invariant => write!(f, "invariant"),
            AdapterRole::Variant(d) => write!(f, "variant_{d}"),
            AdapterRole::WarmedInvariant(d) => write!(f, "warmed_{d}"),
            AdapterRole::Sequential => write!(f, "sequential"),
            AdapterRole::Pretraining => write!(f, "pretraining"),
        }
    }
}

/// Up matrix `A` (`r × d_in`) and down matrix `B` (`d_out × r`).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

/// One low-rank pair per injection point, all sharing rank `r`.
///
/// Freshly initialized adapters have `B = 0`, so their delta is exactly zero.
/// Weights are kept on the `f32` grid so the file format round-trips bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub role: AdapterRole,
    rank: usize,
    width: usize,
    seed: u64,
    pairs: BTreeMap<InjectionPoint, LoraPair>,
}

/// Gaussian `A` (std 0.02), zero `B`.
pub fn init_adapter(
    rank: usize,
    width: usize,
    points: &[InjectionPoint],
    seed: u64,
    role: AdapterRole,
) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::usage("adapter rank must be at least 1"));
    }
    if rank > width {
        return Err(Error::usage(format!("adapter rank {rank} exceeds width {width}")));
    }
    if points.is_empty() {
        return Err(Error::usage("adapter needs at least one injection point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut sorted = points.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut pairs = BTreeMap::new();
    for point in sorted {
        let (d_in, d_out) = point.proj.dims(width);
        let a = Matrix::from_fn(rank, d_in, |_, _| normal.sample(&mut rng) as f32 as f64);
        let b = Matrix::zeros(d_out, rank);
        pairs.insert(point, LoraPair { a, b });
    }
    Ok(LoraAdapter {
        role,
        rank,
        width,
        seed,
        pairs,
    })
}

impl LoraAdapter {
    /// Assembles an adapter from explicit matrices, validating shapes.
    pub fn from_pairs(
        role: AdapterRole,
        rank: usize,
        width: usize,
        pairs: BTreeMap<InjectionPoint, LoraPair>,
    ) -> Result<Self> {
        for (point, pair) in &pairs {
            check_pair_shape(*point, pair, rank, width).map_err(Error::Usage)?;
        }
        Ok(Self {
            role,
            rank,
            width,
            seed: 0,
            pairs,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn points(&self) -> impl Iterator<Item = InjectionPoint> + '_ {
        self.pairs.keys().copied()
    }

    pub fn pair(&self, point: InjectionPoint) -> Option<&LoraPair> {
        self.pairs.get(&point)
    }

    pub fn pair_mut(&mut self, point: InjectionPoint) -> Option<&mut LoraPair> {
        self.pairs.get_mut(&point)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (InjectionPoint, &LoraPair)> {
        self.pairs.iter().map(|(k, v)| (*k, v))
    }

    /// Number of trainable matrices (two per injection point).
    pub fn num_matrices(&self) -> usize {
        2 * self.pairs.len()
    }

    /// Matrices in a fixed order: `A`, `B` of each point in point order.
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.pairs.values().flat_map(|p| [&p.a, &p.b]).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.pairs.values_mut().flat_map(|p| [&mut p.a, &mut p.b]).collect()
    }

    pub fn is_zero_delta(&self) -> bool {
        self.pairs.values().all(|p| p.b.data().iter().all(|&v| v == 0.0))
    }

    pub fn same_structure(&self, other: &LoraAdapter) -> bool {
        self.rank == other.rank
            && self.width == other.width
            && self.pairs.keys().eq(other.pairs.keys())
    }

    /// Bit-level equality of every weight.
    pub fn bit_identical(&self, other: &LoraAdapter) -> bool {
        self.same_structure(other)
            && self
                .matrices()
                .iter()
                .zip(other.matrices())
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// A copy carrying a different role.
    pub fn with_role(&self, role: AdapterRole) -> LoraAdapter {
        let mut c = self.clone();
        c.role = role;
        c
    }

    /// Records every matrix on `tape`. With `first_param = Some(id)` the
    /// matrices are registered as parameters `id, id+1, …` in
    /// [`matrices`](Self::matrices) order; otherwise they are frozen constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, first_param: Option<usize>) -> BoundAdapter {
        let mut vars = BTreeMap::new();
        for (k, (point, pair)) in self.pairs.iter().enumerate() {
            let (a, b) = match first_param {
                Some(base) => (
                    tape.param(ParamId(base + 2 * k), &pair.a),
                    tape.param(ParamId(base + 2 * k + 1), &pair.b),
                ),
                None => (tape.constant(&pair.a), tape.constant(&pair.b)),
            };
            vars.insert(*point, (a, b));
        }
        BoundAdapter { vars }
    }

    /// Like [`bind`](Self::bind) with parameter ids, but gradient is blocked:
    /// every id reports an exact zero.
    pub fn bind_masked<'a>(&'a self, tape: &mut Tape<'a>, first_param: usize) -> BoundAdapter {
        let mut vars = BTreeMap::new();
        for (k, (point, pair)) in self.pairs.iter().enumerate() {
            let a = tape.masked_param(ParamId(first_param + 2 * k), &pair.a);
            let b = tape.masked_param(ParamId(first_param + 2 * k + 1), &pair.b);
            vars.insert(*point, (a, b));
        }
        BoundAdapter { vars }
    }
}

fn check_pair_shape(point: InjectionPoint, pair: &LoraPair, rank: usize, width: usize) -> std::result::Result<(), String> {
    let (d_in, d_out) = point.proj.dims(width);
    if pair.a.shape() != (rank, d_in) {
        return Err(format!(
            "{point}: A is {:?}, expected {:?}",
            pair.a.shape(),
            (rank, d_in)
        ));
    }
    if pair.b.shape() != (d_out, rank) {
        return Err(format!(
            "{point}: B is {:?}, expected {:?}",
            pair.b.shape(),
            (d_out, rank)
        ));
    }
    Ok(())
}

/// Tape handles of an adapter's `(A, B)` matrices.
#[derive(Clone, Debug)]
pub struct BoundAdapter {
    vars: BTreeMap<InjectionPoint, (Var, Var)>,
}

impl BoundAdapter {
    pub fn get(&self, point: InjectionPoint) -> Option<(Var, Var)> {
        self.vars.get(&point).copied()
    }

    /// Records `x Aᵀ Bᵀ` for the given point, or `None` if this adapter does
    /// not touch it.
    pub fn delta(&self, tape: &mut Tape<'_>, point: InjectionPoint, x: Var) -> Result<Option<Var>> {
        match self.vars.get(&point) {
            None => Ok(None),
            Some(&(a, b)) => {
                let low = tape.matmul_nt(x, a)?;
                Ok(Some(tape.matmul_nt(low, b)?))
            }
        }
    }
}

/// `B·(A·h₀)` for row-stacked `h0` (`T × d_in`), with no extra scaling.
pub fn lora_delta(adapter: &LoraAdapter, point: InjectionPoint, h0: &Matrix) -> Result<Matrix> {
    let pair = adapter
        .pair(point)
        .ok_or_else(|| Error::usage(format!("adapter has no pair at {point}")))?;
    let low = h0.matmul_nt(&pair.a)?;
    low.matmul_nt(&pair.b)
}

/// `Σ_points ‖Aᵢᵀ A_S‖²_F + ‖Bᵢᵀ B_S‖²_F`.
pub fn orthogonal_penalty(variant: &LoraAdapter, invariant: &LoraAdapter) -> Result<f64> {
    let mut tape = Tape::new();
    let v = variant.bind(&mut tape, None);
    let s = invariant.bind(&mut tape, None);
    let points: Vec<_> = variant.points().collect();
    check_penalty_structure(variant, invariant)?;
    let loss = penalty_on_tape(&mut tape, &v, &s, &points)?;
    Ok(tape.scalar(loss))
}

fn check_penalty_structure(variant: &LoraAdapter, invariant: &LoraAdapter) -> Result<()> {
    if !variant.same_structure(invariant) {
        return Err(Error::usage(format!(
            "orthogonal penalty needs matching adapters (rank {} vs {}, width {} vs {}, {} vs {} points)",
            variant.rank,
            invariant.rank,
            variant.width,
            invariant.width,
            variant.pairs.len(),
            invariant.pairs.len()
        )));
    }
    Ok(())
}

/// Records the orthogonality penalty between two bound adapters.
pub fn orthogonal_penalty_on_tape(
    tape: &mut Tape<'_>,
    variant: (&LoraAdapter, &BoundAdapter),
    invariant: (&LoraAdapter, &BoundAdapter),
) -> Result<Var> {
    check_penalty_structure(variant.0, invariant.0)?;
    let points: Vec<_> = variant.0.points().collect();
    penalty_on_tape(tape, variant.1, invariant.1, &points)
}

fn penalty_on_tape(tape: &mut Tape<'_>, v: &BoundAdapter, s: &BoundAdapter, points: &[InjectionPoint]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in points {
        let (ai, bi) = v.get(p).expect("point bound");
        let (as_, bs) = s.get(p).expect("point bound");
        let aa = tape.matmul_tn(ai, as_)?;
        let bb = tape.matmul_tn(bi, bs)?;
        let na = tape.sum_squares(aa);
        let nb = tape.sum_squares(bb);
        let term = tape.add(na, nb)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::usage("orthogonal penalty over zero injection points"))
}

#[derive(Serialize, Deserialize)]
struct MatrixEntry {
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct PointEntry {
    name: String,
    a: MatrixEntry,
    b: MatrixEntry,
}

#[derive(Serialize, Deserialize)]
struct Creation {
    seed: u64,
    generator: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    role: AdapterRole,
    rank: usize,
    width: usize,
    points: Vec<PointEntry>,
    created: Creation,
}

fn blob_name(stem: &str, point: InjectionPoint, which: char) -> String {
    format!("{stem}.{point}.{which}.bin")
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::usage(format!("adapter path {} has no file name", path.display())))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}

/// Writes the JSON manifest at `path` and one `f32` blob per matrix next to it.
pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    let stem = stem_of(path)?;
    let mut points = Vec::new();
    for (point, pair) in &adapter.pairs {
        let a_file = blob_name(&stem, *point, 'A');
        let b_file = blob_name(&stem, *point, 'B');
        io::write_f32_blob(&sibling(path, &a_file), &pair.a)?;
        io::write_f32_blob(&sibling(path, &b_file), &pair.b)?;
        points.push(PointEntry {
            name: point.to_string(),
            a: MatrixEntry {
                rows: pair.a.rows(),
                cols: pair.a.cols(),
                file: a_file,
            },
            b: MatrixEntry {
                rows: pair.b.rows(),
                cols: pair.b.cols(),
                file: b_file,
            },
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        role: adapter.role,
        rank: adapter.rank,
        width: adapter.width,
        points,
        created: Creation {
            seed: adapter.seed,
            generator: concat!("abscl-core ", env!("CARGO_PKG_VERSION")).into(),
        },
    };
    io::write_json(path, &manifest)
}

/// Reads an adapter written by [`save_adapter`]. Any inconsistency between the
/// manifest and the blobs is a format error; nothing partial is returned.
pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let manifest: Manifest = io::read_json(path)?;
    if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported adapter format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    if manifest.rank == 0 || manifest.rank > manifest.width {
        return Err(Error::format(format!(
            "{}: invalid rank {} for width {}",
            path.display(),
            manifest.rank,
            manifest.width
        )));
    }
    let mut pairs = BTreeMap::new();
    for entry in &manifest.points {
        let point: InjectionPoint = entry.name.parse()?;
        if entry.a.rows != manifest.rank || entry.b.cols != manifest.rank {
            return Err(Error::format(format!(
                "{}: injection point {point} declares A {}x{} / B {}x{} but manifest rank is {}",
                path.display(),
                entry.a.rows,
                entry.a.cols,
                entry.b.rows,
                entry.b.cols,
                manifest.rank
            )));
        }
        let a = io::read_f32_blob(&sibling(path, &entry.a.file), entry.a.rows, entry.a.cols)?;
        let b = io::read_f32_blob(&sibling(path, &entry.b.file), entry.b.rows, entry.b.cols)?;
        let pair = LoraPair { a, b };
        check_pair_shape(point, &pair, manifest.rank, manifest.width)
            .map_err(|m| Error::format(format!("{}: {m}", path.display())))?;
        if pairs.insert(point, pair).is_some() {
            return Err(Error::format(format!("{}: duplicate injection point {point}", path.display())));
        }
    }
    if pairs.is_empty() {
        return Err(Error::format(format!("{}: adapter has no injection points", path.display())));
    }
    Ok(LoraAdapter {
        role: manifest.role,
        rank: manifest.rank,
        width: manifest.width,
        seed: manifest.created.seed,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_adapter(a: Matrix, b: Matrix) -> LoraAdapter {
        let rank = a.rows();
        let width = a.cols();
        let mut pairs = BTreeMap::new();
        pairs.insert(InjectionPoint::new(0, Projection::Q), LoraPair { a, b });
        LoraAdapter::from_pairs(AdapterRole::Invariant, rank, width, pairs).unwrap()
    }

    #[test]
    fn default_rank_shapes() {
        let pts = InjectionPoint::grid(2, &[Projection::Q, Projection::V]);
        let ad = init_adapter(8, 64, &pts, 1, AdapterRole::Invariant).unwrap();
        for (_, pair) in ad.pairs() {
            assert_eq!(pair.a.shape(), (8, 64));
            assert_eq!(pair.b.shape(), (64, 8));
        }
        assert!(ad.is_zero_delta());
    }

    #[test]
    fn init_is_deterministic() {
        let pts = InjectionPoint::grid(1, &[Projection::Q]);
        let a = init_adapter(4, 16, &pts, 99, AdapterRole::Invariant).unwrap();
        let b = init_adapter(4, 16, &pts, 99, AdapterRole::Invariant).unwrap();
        assert!(a.bit_identical(&b));
        let c = init_adapter(4, 16, &pts, 100, AdapterRole::Invariant).unwrap();
        assert!(!a.bit_identical(&c));
    }

    #[test]
    fn rank_above_width_is_rejected() {
        let pts = InjectionPoint::grid(1, &[Projection::Q]);
        assert!(matches!(
            init_adapter(9, 8, &pts, 0, AdapterRole::Invariant),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let pts = InjectionPoint::grid(1, &[Projection::V]);
        let ad = init_adapter(2, 4, &pts, 5, AdapterRole::Invariant).unwrap();
        let h0 = Matrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let d = lora_delta(&ad, pts[0], &h0).unwrap();
        assert_eq!(d, Matrix::zeros(3, 4));
    }

    #[test]
    fn identity_factors_return_input() {
        let ad = square_adapter(Matrix::identity(3), Matrix::identity(3));
        let h0 = Matrix::from_rows(&[[1.0, -2.0, 0.5]]);
        let d = lora_delta(&ad, InjectionPoint::new(0, Projection::Q), &h0).unwrap();
        assert_eq!(d, h0);
    }

    #[test]
    fn penalty_examples() {
        let z = Matrix::zeros(2, 2);
        let ai = square_adapter(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]), z.clone());
        let as_ = square_adapter(Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0]]), z.clone());
        assert_eq!(orthogonal_penalty(&ai, &as_).unwrap(), 0.0);

        let id = square_adapter(Matrix::identity(2), z.clone());
        assert_eq!(orthogonal_penalty(&id, &id).unwrap(), 2.0);

        let full = square_adapter(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), z);
        assert_eq!(orthogonal_penalty(&full, &id).unwrap(), 30.0);
    }

    #[test]
    fn penalty_rejects_mismatched_structure() {
        let a = init_adapter(2, 4, &InjectionPoint::grid(1, &[Projection::Q]), 0, AdapterRole::Invariant).unwrap();
        let b = init_adapter(2, 4, &InjectionPoint::grid(1, &[Projection::V]), 0, AdapterRole::Invariant).unwrap();
        assert!(matches!(orthogonal_penalty(&a, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn point_names_round_trip() {
        for p in InjectionPoint::grid(3, &Projection::ALL) {
            assert_eq!(p.to_string().parse::<InjectionPoint>().unwrap(), p);
        }
        assert!("layerx.q".parse::<InjectionPoint>().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = InjectionPoint::grid(2, &[Projection::Q, Projection::FfUp]);
        let mut ad = init_adapter(3, 8, &pts, 11, AdapterRole::Variant(2)).unwrap();
        for m in ad.matrices_mut() {
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v += ((i as f32) * 0.37).sin() as f64;
            }
            m.round_to_f32();
        }
        let path = dir.path().join("variant_2.json");
        save_adapter(&ad, &path).unwrap();
        let back = load_adapter(&path).unwrap();
        assert!(back.bit_identical(&ad));
        assert_eq!(back.role, AdapterRole::Variant(2));
        assert_eq!(back.seed(), 11);
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let pts = InjectionPoint::grid(1, &[Projection::Q]);
        let ad = init_adapter(2, 4, &pts, 1, AdapterRole::Invariant).unwrap();
        let path = dir.path().join("inv.json");
        save_adapter(&ad, &path).unwrap();
        let blob = dir.path().join("inv.layer0.q.A.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_adapter(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let pts = InjectionPoint::grid(1, &[Projection::Q]);
        let ad = init_adapter(2, 4, &pts, 1, AdapterRole::Invariant).unwrap();
        let path = dir.path().join("inv.json");
        save_adapter(&ad, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_adapter(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rank_mismatch_names_the_point() {
        let dir = tempfile::tempdir().unwrap();
        let pts = InjectionPoint::grid(2, &[Projection::V]);
        let ad = init_adapter(2, 4, &pts, 1, AdapterRole::Invariant).unwrap();
        let path = dir.path().join("inv.json");
        save_adapter(&ad, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
        json["points"][1]["a"]["rows"] = serde_json::json!(3);
        std::fs::write(&path, json.to_string()).unwrap();
        match load_adapter(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("layer1.v"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
