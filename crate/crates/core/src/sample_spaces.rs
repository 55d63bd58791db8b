//! Probability spaces the experiments draw from, reproducible RNG streams and
//! exact expectation on finite spaces.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::combin::for_each_index;
use crate::error::{Error, Result};

/// Largest number of atom tuples an exact enumeration may visit.
pub const ENUMERATION_LIMIT: f64 = 1.0e7;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible stream: ChaCha8 keyed by `seed`, positioned on `stream_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Independent sub-stream number `i`.
    pub fn child(&self, i: u64) -> RngStream {
        RngStream { seed: self.seed, stream_id: splitmix64(self.stream_id ^ splitmix64(i.wrapping_add(0xA5A5_A5A5))) }
    }

    /// Sub-stream keyed by a label, for separating unrelated uses of one seed.
    pub fn labeled(&self, label: &str) -> RngStream {
        let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.child(h)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream_id);
        r
    }
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn unit(dim: usize) -> Self {
        BoxRegion { lo: vec![0.0; dim], hi: vec![1.0; dim] }
    }
    pub fn dim(&self) -> usize {
        self.lo.len()
    }
    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }
    fn draw(&self, rng: &mut impl Rng, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.lo[i] + (self.hi[i] - self.lo[i]) * rng.gen::<f64>();
        }
    }
}

/// A density on a box, sampled by rejection from the uniform proposal.
#[derive(Clone)]
pub enum DensityFn {
    /// `(1 + sum_i a_i u_i) / vol` with `u_i` the coordinate rescaled to `[-1, 1]`;
    /// requires `sum |a_i| < 1`.
    Tilt {
        slopes: Vec<f64>,
    },
    Custom {
        name: String,
        f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    },
}

impl std::fmt::Debug for DensityFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DensityFn::Tilt { slopes } => write!(f, "Tilt({slopes:?})"),
            DensityFn::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DensitySpec {
    pub region: BoxRegion,
    pub density: DensityFn,
    pub envelope: f64,
}

impl DensitySpec {
    pub fn tilt(region: BoxRegion, slopes: Vec<f64>) -> Result<Self> {
        let s: f64 = slopes.iter().map(|a| a.abs()).sum();
        if slopes.len() != region.dim() || s >= 1.0 {
            return Err(Error::InvalidArgument("tilt slopes must match dimension and have l1 norm < 1".into()));
        }
        let envelope = (1.0 + s) / region.volume();
        Ok(DensitySpec { region, density: DensityFn::Tilt { slopes }, envelope })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        if !self.region.contains(x) {
            return 0.0;
        }
        match &self.density {
            DensityFn::Tilt { slopes } => {
                let mut v = 1.0;
                for (i, a) in slopes.iter().enumerate() {
                    let (lo, hi) = (self.region.lo[i], self.region.hi[i]);
                    v += a * (2.0 * (x[i] - lo) / (hi - lo) - 1.0);
                }
                v / self.region.volume()
            }
            DensityFn::Custom { f, .. } => f(x),
        }
    }
}

/// Finite space: atoms (points of a common dimension) with probability weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FiniteSpace {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl FiniteSpace {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::InvalidArgument("atoms and weights must be nonempty and of equal length".into()));
        }
        let d = atoms[0].len();
        if atoms.iter().any(|a| a.len() != d) {
            return Err(Error::InvalidArgument("atoms must share one dimension".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {s}, not 1")));
        }
        Ok(FiniteSpace { atoms, weights })
    }

    /// Real-valued atoms with the given weights.
    pub fn scalar(values: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|v| vec![*v]).collect(), weights.to_vec())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// Index of the atom equal to `x`, if any.
    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        self.atoms.iter().position(|a| a.as_slice() == x)
    }

    fn draw_index(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Sum of `prod(w) * f(idx)` over `[0, |atoms|)^m`.
    pub fn sum_weighted(&self, m: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<f64> {
        check_budget(self.len(), m)?;
        let mut total = 0.0;
        for_each_index(m, self.len(), |idx| {
            let w: f64 = idx.iter().map(|&i| self.weights[i]).product();
            total += w * f(idx);
        });
        Ok(total)
    }
}

pub(crate) fn check_budget(atoms: usize, m: usize) -> Result<()> {
    let required = (atoms as f64).powi(m as i32);
    if required > ENUMERATION_LIMIT {
        Err(Error::EnumerationBudget { required, limit: ENUMERATION_LIMIT })
    } else {
        Ok(())
    }
}

/// The law of one observation.
#[derive(Debug, Clone)]
pub enum DistributionSpec {
    Finite(FiniteSpace),
    Density(DensitySpec),
    /// Uniform on the circle of unit length, coordinates in `[0, 1)`.
    CircleUniform,
    /// Uniform on a box (the unit cube when built with [`BoxRegion::unit`]).
    BoxUniform(BoxRegion),
}

impl DistributionSpec {
    pub fn cube(dim: usize) -> Self {
        DistributionSpec::BoxUniform(BoxRegion::unit(dim))
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Finite(f) => f.dim(),
            DistributionSpec::Density(d) => d.region.dim(),
            DistributionSpec::CircleUniform => 1,
            DistributionSpec::BoxUniform(b) => b.dim(),
        }
    }

    pub fn finite(&self) -> Option<&FiniteSpace> {
        match self {
            DistributionSpec::Finite(f) => Some(f),
            _ => None,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, DistributionSpec::CircleUniform | DistributionSpec::BoxUniform(_))
    }

    /// Lebesgue density, for continuous laws.
    pub fn density(&self, x: &[f64]) -> Option<f64> {
        match self {
            DistributionSpec::Finite(_) => None,
            DistributionSpec::Density(d) => Some(d.eval(x)),
            DistributionSpec::CircleUniform => Some(if (0.0..1.0).contains(&x[0]) { 1.0 } else { 0.0 }),
            DistributionSpec::BoxUniform(b) => Some(if b.contains(x) { 1.0 / b.volume() } else { 0.0 }),
        }
    }

    /// Bounding box of the support for continuous laws.
    pub fn support(&self) -> Option<BoxRegion> {
        match self {
            DistributionSpec::Finite(_) => None,
            DistributionSpec::Density(d) => Some(d.region.clone()),
            DistributionSpec::CircleUniform => Some(BoxRegion::unit(1)),
            DistributionSpec::BoxUniform(b) => Some(b.clone()),
        }
    }

    /// Writes one draw into `out` (length `dim()`).
    pub fn draw_into(&self, rng: &mut impl Rng, out: &mut [f64]) -> Result<()> {
        match self {
            DistributionSpec::Finite(f) => {
                let i = f.draw_index(rng.gen());
                out.copy_from_slice(&f.atoms[i]);
            }
            DistributionSpec::Density(d) => loop {
                d.region.draw(rng, out);
                let fx = d.eval(out);
                if fx > d.envelope * (1.0 + 1e-12) {
                    return Err(Error::InvalidEnvelope { point: out.to_vec(), density: fx, envelope: d.envelope });
                }
                if rng.gen::<f64>() * d.envelope < fx {
                    break;
                }
            },
            DistributionSpec::CircleUniform => out[0] = rng.gen::<f64>(),
            DistributionSpec::BoxUniform(b) => b.draw(rng, out),
        }
        Ok(())
    }

    /// `n` i.i.d. draws.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Sample> {
        let d = self.dim();
        let mut coords = vec![0.0; n * d];
        for chunk in coords.chunks_mut(d.max(1)).take(n) {
            self.draw_into(rng, chunk)?;
        }
        Ok(Sample { dim: d, coords })
    }

    /// Exact `E f(X_1, ..., X_m)` on a finite space.
    pub fn exact_expect(&self, m: usize, f: impl Fn(&[&[f64]]) -> f64) -> Result<f64> {
        let fs = self.finite().ok_or_else(|| Error::InvalidArgument("exact expectation needs a finite space".into()))?;
        fs.sum_weighted(m, |idx| {
            let args: Vec<&[f64]> = idx.iter().map(|&i| fs.atoms[i].as_slice()).collect();
            f(&args)
        })
    }
}

/// Points stored contiguously, `dim` coordinates each.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dim: usize,
    pub coords: Vec<f64>,
}

impl Sample {
    pub fn from_points(points: &[Vec<f64>]) -> Self {
        let dim = points.first().map_or(1, |p| p.len());
        Sample { dim, coords: points.iter().flatten().copied().collect() }
    }

    pub fn from_scalars(values: &[f64]) -> Self {
        Sample { dim: 1, coords: values.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn prefix(&self, k: usize) -> Sample {
        Sample { dim: self.dim, coords: self.coords[..k * self.dim].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = RngStream::new(7, 3);
        let a: Vec<u64> = (0..4).map(|_| 0).scan(s.rng(), |r, _| Some(r.gen())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(s.rng(), |r, _| Some(r.gen())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(s.child(1).rng(), |r, _| Some(r.gen())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(s.child(1), s.child(2));
    }

    #[test]
    fn exact_expectation_of_sum_on_bernoulli() {
        let fs = FiniteSpace::scalar(&[0.0, 1.0], &[0.7, 0.3]).unwrap();
        let d = DistributionSpec::Finite(fs);
        let v = d.exact_expect(3, |a| a[0][0] + a[1][0] + a[2][0]).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
    }

    #[test]
    fn enumeration_guard() {
        let fs = FiniteSpace::new((0..100).map(|i| vec![i as f64]).collect(), vec![0.01; 100]).unwrap();
        let d = DistributionSpec::Finite(fs);
        assert!(matches!(d.exact_expect(4, |_| 1.0), Err(Error::EnumerationBudget { .. })));
    }

    #[test]
    fn envelope_violation_is_reported() {
        let mut spec = DensitySpec::tilt(BoxRegion::unit(1), vec![0.5]).unwrap();
        spec.envelope = 1.0;
        let d = DistributionSpec::Density(spec);
        let mut rng = RngStream::new(1, 0).rng();
        let mut saw_error = false;
        for _ in 0..200 {
            let mut x = [0.0];
            if d.draw_into(&mut rng, &mut x).is_err() {
                saw_error = true;
                break;
            }
        }
        assert!(saw_error);
    }

    #[test]
    fn tilt_density_mean() {
        let d = DistributionSpec::Density(DensitySpec::tilt(BoxRegion::unit(1), vec![0.6]).unwrap());
        let mut rng = RngStream::new(11, 0).rng();
        let s = d.sample(200_000, &mut rng).unwrap();
        let mean = s.coords.iter().sum::<f64>() / s.len() as f64;
        // E X = 1/2 + a/6 for density 1 + a(2x - 1)
        assert!((mean - (0.5 + 0.6 / 6.0)).abs() < 0.004, "{mean}");
    }
}
