//! Synthetic 2-D reaching trajectories with exact factor labels.
//!
//! Every trajectory starts at `(0, 0)`. Curves are quadratic Béziers whose
//! control point is pushed off the chord by `0.08 · level`.
//!
//! File layout (all integers little-endian):
//!
//! | field            | type            |
//! |------------------|-----------------|
//! | magic            | `b"FAVD"`       |
//! | format version   | `u32`           |
//! | generator version| `u32`           |
//! | sequence length T| `u32`           |
//! | trajectory count | `u32`           |
//! | factor count     | `u32`           |
//! | metadata length  | `u32`           |
//! | metadata         | UTF-8 JSON      |
//! | points           | `N·T·2 × f32`   |
//! | factor levels    | `N·K × u16`     |

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FAVD";

const CURVE_STEP: f64 = 0.08;
const WAVE_AMPLITUDE: f64 = 0.05;
const GOALS: [(f64, f64); 2] = [(-0.1, 1.0), (0.1, 1.0)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
}

impl FactorSpec {
    fn new(name: &str, levels: &[&str]) -> Self {
        Self { name: name.into(), levels: levels.iter().map(|s| s.to_string()).collect() }
    }

    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorValue {
    pub factor_index: usize,
    pub level: u16,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T` points as `(x, y)`.
    pub points: Vec<[f32; 2]>,
    pub factors: Vec<FactorValue>,
}

impl Trajectory {
    pub fn levels(&self) -> Vec<u16> {
        self.factors.iter().map(|f| f.level).collect()
    }

    pub fn path_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let dx = (w[1][0] - w[0][0]) as f64;
                let dy = (w[1][1] - w[0][1]) as f64;
                dx.hypot(dy)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub name: String,
    pub seq_len: usize,
    pub factors: Vec<FactorSpec>,
    pub trajectories: Vec<Trajectory>,
    pub generator_version: u32,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    name: String,
    factors: Vec<FactorSpec>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(FactorSpec::cardinality).collect()
    }

    /// Factor levels, one row per trajectory.
    pub fn levels(&self) -> Vec<Vec<u16>> {
        self.trajectories.iter().map(Trajectory::levels).collect()
    }

    /// `B × 2 × T` model input for the selected trajectories (channel 0 is x).
    pub fn to_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let t = self.seq_len;
        let mut data = Vec::with_capacity(indices.len() * 2 * t);
        for &i in indices {
            let tr = self.trajectories.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("trajectory index {i} out of range ({})", self.len()))
            })?;
            data.extend(tr.points.iter().map(|p| p[0] as f64));
            data.extend(tr.points.iter().map(|p| p[1] as f64));
        }
        Tensor::new(vec![indices.len(), 2, t], data)
    }

    pub fn all_tensor(&self) -> Result<Tensor> {
        self.to_tensor(&(0..self.len()).collect::<Vec<_>>())
    }

    /// `m` trajectories drawn uniformly with replacement, as `m × 2 × T`.
    pub fn resample(&self, m: usize, rng: &mut RngStream) -> Result<Tensor> {
        let idx: Vec<usize> = (0..m).map(|_| rng.below(self.len())).collect();
        self.to_tensor(&idx)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&Metadata { name: self.name.clone(), factors: self.factors.clone() })?;
        w.write_all(MAGIC)?;
        for v in [
            FORMAT_VERSION,
            self.generator_version,
            self.seq_len as u32,
            self.trajectories.len() as u32,
            self.factors.len() as u32,
            meta.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&meta)?;
        for tr in &self.trajectories {
            for p in &tr.points {
                w.write_all(&p[0].to_le_bytes())?;
                w.write_all(&p[1].to_le_bytes())?;
            }
        }
        for tr in &self.trajectories {
            for f in &tr.factors {
                w.write_all(&f.level.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not a trajectory dataset (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let generator_version = r.u32()?;
        let seq_len = r.u32()? as usize;
        let count = r.u32()? as usize;
        let n_factors = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        if meta.factors.len() != n_factors {
            return Err(Error::Corrupt(format!("header says {n_factors} factors, metadata has {}", meta.factors.len())));
        }
        let need = count
            .checked_mul(seq_len * 8 + n_factors * 2)
            .ok_or_else(|| Error::Corrupt("length fields overflow".into()))?;
        if r.remaining() != need {
            return Err(Error::Corrupt(format!("expected {need} payload bytes, found {}", r.remaining())));
        }
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            let mut points = Vec::with_capacity(seq_len);
            for _ in 0..seq_len {
                let p = [r.f32()?, r.f32()?];
                if !(p[0].is_finite() && p[1].is_finite()) {
                    return Err(Error::Corrupt("non-finite coordinate".into()));
                }
                points.push(p);
            }
            trajectories.push(Trajectory { points, factors: Vec::with_capacity(n_factors) });
        }
        for tr in &mut trajectories {
            for (k, spec) in meta.factors.iter().enumerate() {
                let level = r.u16()?;
                let description = spec
                    .levels
                    .get(level as usize)
                    .ok_or_else(|| Error::Corrupt(format!("level {level} out of range for factor {}", spec.name)))?
                    .clone();
                tr.factors.push(FactorValue { factor_index: k, level, description });
            }
        }
        Ok(Self { name: meta.name, seq_len, factors: meta.factors, trajectories, generator_version })
    }

    /// One CSV row per time step: `traj_id,t,x,y,<factor levels…>`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let names: Vec<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        write_csv_header(w, &names)?;
        for (id, tr) in self.trajectories.iter().enumerate() {
            let extra: Vec<String> = tr.factors.iter().map(|f| f.level.to_string()).collect();
            let pts: Vec<[f64; 2]> = tr.points.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
            write_csv_rows(w, id, &pts, &extra)?;
        }
        Ok(())
    }
}

pub fn write_csv_header(w: &mut impl Write, extra_columns: &[&str]) -> Result<()> {
    write!(w, "traj_id,t,x,y")?;
    for c in extra_columns {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    Ok(())
}

pub fn write_csv_rows(w: &mut impl Write, id: usize, points: &[[f64; 2]], extra: &[String]) -> Result<()> {
    let tail: String = extra.iter().map(|e| format!(",{e}")).collect();
    for (t, p) in points.iter().enumerate() {
        writeln!(w, "{id},{t},{},{}{tail}", p[0], p[1])?;
    }
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Unit normal to the chord `from → to`, pointing away from the y axis.
fn outward_normal(from: (f64, f64), to: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let len = dx.hypot(dy);
    let sign = if to.0 < 0.0 { -1.0 } else { 1.0 };
    (sign * dy / len, -sign * dx / len)
}

/// Quadratic Bézier from `from` to `to`, control point displaced by `offset`
/// along `normal` from the chord midpoint, plus a `sin(2πs)` wave of
/// amplitude `wave` along the same normal. Exact endpoints at `s ∈ {0, 1}`.
fn curve_point(from: (f64, f64), to: (f64, f64), normal: (f64, f64), offset: f64, wave: f64, s: f64) -> (f64, f64) {
    let ctrl = (0.5 * (from.0 + to.0) + offset * normal.0, 0.5 * (from.1 + to.1) + offset * normal.1);
    let (a, b, c) = ((1.0 - s) * (1.0 - s), 2.0 * (1.0 - s) * s, s * s);
    let w = if wave == 0.0 { 0.0 } else { wave * (2.0 * PI * s).sin() };
    (
        a * from.0 + b * ctrl.0 + c * to.0 + w * normal.0,
        a * from.1 + b * ctrl.1 + c * to.1 + w * normal.1,
    )
}

fn label(factors: &[FactorSpec], levels: &[u16]) -> Vec<FactorValue> {
    levels
        .iter()
        .enumerate()
        .map(|(k, &l)| FactorValue { factor_index: k, level: l, description: factors[k].levels[l as usize].clone() })
        .collect()
}

fn goal_spec() -> FactorSpec {
    FactorSpec::new("goal", &["left", "right"])
}

fn curvature_spec(name: &str) -> FactorSpec {
    FactorSpec::new(name, &["1", "2", "3", "4", "5"])
}

/// 2D Reaching: goal (2) × curve side (2) × curvature level (5) = 20 trajectories.
pub fn gen_2d_reaching(seq_len: usize) -> Result<TrajectoryDataset> {
    if seq_len < 2 {
        return Err(Error::InvalidArgument(format!("sequence length must be ≥ 2, got {seq_len}")));
    }
    let factors = vec![goal_spec(), FactorSpec::new("side", &["inward", "outward"]), curvature_spec("curvature")];
    let mut trajectories = Vec::with_capacity(20);
    for (g, &goal) in GOALS.iter().enumerate() {
        let normal = outward_normal((0.0, 0.0), goal);
        for side in 0..2u16 {
            let sign = if side == 0 { -1.0 } else { 1.0 };
            for level in 0..5u16 {
                let offset = sign * CURVE_STEP * f64::from(level + 1);
                let points = (0..seq_len)
                    .map(|i| {
                        let s = i as f64 / (seq_len - 1) as f64;
                        let (x, y) = curve_point((0.0, 0.0), goal, normal, offset, 0.0, s);
                        [x as f32, y as f32]
                    })
                    .collect();
                trajectories.push(Trajectory { points, factors: label(&factors, &[g as u16, side, level]) });
            }
        }
    }
    Ok(TrajectoryDataset {
        name: "2d-reaching".into(),
        seq_len,
        factors,
        trajectories,
        generator_version: GENERATOR_VERSION,
    })
}

/// 2D Wavy Reaching: goal (2) × first-half shape (2) × second-half shape (2)
/// × first-half curvature (5) × second-half curvature (5) = 200 trajectories.
///
/// The first `T/2` points depend only on the goal and the first-half factors;
/// the rest only on the goal and the second-half factors.
pub fn gen_2d_wavy(seq_len: usize) -> Result<TrajectoryDataset> {
    if seq_len < 2 || !seq_len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("sequence length must be even and ≥ 2, got {seq_len}")));
    }
    let factors = vec![
        goal_spec(),
        FactorSpec::new("shape_first_half", &["phase_0", "phase_pi"]),
        FactorSpec::new("shape_second_half", &["phase_0", "phase_pi"]),
        curvature_spec("curvature_first_half"),
        curvature_spec("curvature_second_half"),
    ];
    let half = seq_len / 2;
    let mut trajectories = Vec::with_capacity(200);
    for (g, &goal) in GOALS.iter().enumerate() {
        let mid = (0.5 * goal.0, 0.5 * goal.1);
        let n1 = outward_normal((0.0, 0.0), mid);
        let n2 = outward_normal(mid, goal);
        for shape1 in 0..2u16 {
            for shape2 in 0..2u16 {
                for curv1 in 0..5u16 {
                    for curv2 in 0..5u16 {
                        let wave = |shape: u16| if shape == 0 { WAVE_AMPLITUDE } else { -WAVE_AMPLITUDE };
                        let points = (0..seq_len)
                            .map(|i| {
                                let u = i as f64 / (seq_len - 1) as f64;
                                let (x, y) = if i < half {
                                    curve_point((0.0, 0.0), mid, n1, CURVE_STEP * f64::from(curv1 + 1), wave(shape1), 2.0 * u)
                                } else {
                                    curve_point(mid, goal, n2, CURVE_STEP * f64::from(curv2 + 1), wave(shape2), 2.0 * u - 1.0)
                                };
                                [x as f32, y as f32]
                            })
                            .collect();
                        let levels = [g as u16, shape1, shape2, curv1, curv2];
                        trajectories.push(Trajectory { points, factors: label(&factors, &levels) });
                    }
                }
            }
        }
    }
    Ok(TrajectoryDataset {
        name: "2d-wavy-reaching".into(),
        seq_len,
        factors,
        trajectories,
        generator_version: GENERATOR_VERSION,
    })
}

/// Generator lookup by CLI name.
pub fn generate(name: &str, seq_len: usize) -> Result<TrajectoryDataset> {
    match name {
        "2d-reaching" | "reaching" => gen_2d_reaching(seq_len),
        "2d-wavy" | "2d-wavy-reaching" | "wavy" => gen_2d_wavy(seq_len),
        other => Err(Error::InvalidArgument(format!("unknown dataset '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn reaching_has_twenty_exact_trajectories() {
        for t in [100, 1000] {
            let ds = gen_2d_reaching(t).unwrap();
            assert_eq!(ds.len(), 20);
            assert_eq!(ds.cardinalities(), vec![2, 2, 5]);
            for tr in &ds.trajectories {
                assert_eq!(tr.points.len(), t);
                assert_eq!(tr.points[0], [0.0, 0.0]);
                let goal = GOALS[tr.factors[0].level as usize];
                assert_eq!(*tr.points.last().unwrap(), [goal.0 as f32, goal.1 as f32]);
            }
        }
        assert!(gen_2d_reaching(1).is_err());
    }

    #[test]
    fn inward_and_outward_mirror_across_chord() {
        let ds = gen_2d_reaching(100).unwrap();
        for g in 0..2u16 {
            let find = |side: u16| ds.trajectories.iter().find(|t| t.levels() == vec![g, side, 0]).unwrap();
            let (inw, outw) = (find(0), find(1));
            let goal = GOALS[g as usize];
            let len = goal.0.hypot(goal.1);
            let u = (goal.0 / len, goal.1 / len);
            for (a, b) in inw.points.iter().zip(&outw.points) {
                let (px, py) = (b[0] as f64, b[1] as f64);
                let d = px * u.0 + py * u.1;
                let (rx, ry) = (2.0 * d * u.0 - px, 2.0 * d * u.1 - py);
                assert!((rx - a[0] as f64).abs() < 1e-6 && (ry - a[1] as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn outward_bends_away_from_the_axis() {
        let ds = gen_2d_reaching(100).unwrap();
        let right_out = ds.trajectories.iter().find(|t| t.levels() == vec![1, 1, 4]).unwrap();
        let right_in = ds.trajectories.iter().find(|t| t.levels() == vec![1, 0, 4]).unwrap();
        assert!(right_out.points[50][0] > right_in.points[50][0]);
    }

    #[test]
    fn wavy_has_every_combination_once_and_exact_endpoints() {
        let ds = gen_2d_wavy(100).unwrap();
        let product: usize = ds.cardinalities().iter().product();
        assert_eq!(product, 2 * 2 * 2 * 5 * 5);
        assert_eq!(ds.len(), product);
        let combos: HashSet<Vec<u16>> = ds.levels().into_iter().collect();
        assert_eq!(combos.len(), product);
        for tr in &ds.trajectories {
            assert_eq!(tr.points[0], [0.0, 0.0]);
            let goal = GOALS[tr.factors[0].level as usize];
            assert_eq!(*tr.points.last().unwrap(), [goal.0 as f32, goal.1 as f32]);
        }
        assert!(gen_2d_wavy(99).is_err());
    }

    #[test]
    fn wavy_halves_are_local() {
        let ds = gen_2d_wavy(100).unwrap();
        let by_levels: std::collections::HashMap<Vec<u16>, &Trajectory> =
            ds.trajectories.iter().map(|t| (t.levels(), t)).collect();
        let base = by_levels[&vec![0, 0, 0, 0, 0]];
        let second_only = by_levels[&vec![0, 0, 1, 0, 3]];
        let first_only = by_levels[&vec![0, 1, 0, 2, 0]];
        assert_eq!(base.points[..50], second_only.points[..50]);
        assert_ne!(base.points[50..], second_only.points[50..]);
        assert_eq!(base.points[50..], first_only.points[50..]);
        assert_ne!(base.points[..50], first_only.points[..50]);
        let other_goal = by_levels[&vec![1, 0, 0, 0, 0]];
        assert_ne!(base.points.last(), other_goal.points.last());
    }

    #[test]
    fn no_factor_is_vacuous() {
        for ds in [gen_2d_reaching(100).unwrap(), gen_2d_wavy(100).unwrap()] {
            for k in 0..ds.factors.len() {
                let mut other = ds.trajectories[0].levels();
                other[k] = 1;
                let tr = ds.trajectories.iter().find(|t| t.levels() == other).unwrap();
                assert_ne!(tr.points, ds.trajectories[0].points, "factor {k}");
            }
        }
    }

    #[test]
    fn generators_are_pure() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        gen_2d_wavy(100).unwrap().write_to(&mut a).unwrap();
        gen_2d_wavy(100).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let ds = gen_2d_reaching(100).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FAVD");
        assert_eq!(TrajectoryDataset::from_bytes(&bytes).unwrap(), ds);

        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(TrajectoryDataset::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(TrajectoryDataset::from_bytes(&v2), Err(Error::Version { found: 2, .. })));

        let mut nan = bytes.clone();
        let payload = nan.len() - 20 * 3 * 2 - 100 * 8 * 20;
        nan[payload..payload + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(TrajectoryDataset::from_bytes(&nan), Err(Error::Corrupt(_))));
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let ds = gen_2d_reaching(10).unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "traj_id,t,x,y,goal,side,curvature");
        assert_eq!(lines.count(), 200);
    }

    #[test]
    fn tensor_layout() {
        let ds = gen_2d_reaching(10).unwrap();
        let x = ds.to_tensor(&[3]).unwrap();
        assert_eq!(x.shape(), &[1, 2, 10]);
        assert_eq!(x.data()[9], ds.trajectories[3].points[9][0] as f64);
        assert_eq!(x.data()[19], ds.trajectories[3].points[9][1] as f64);
        assert!(ds.to_tensor(&[20]).is_err());
    }
}
