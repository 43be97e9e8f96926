//! Sobol experimental designs over the (cutting speed, feed rate) rectangle.
//!
//! Points are generated with the Antonov–Saleev Gray-code recurrence from the
//! Joe–Kuo `new-joe-kuo-6.21201` direction numbers (first 16 dimensions, bundled
//! in `data/new-joe-kuo-16.txt`). The unscrambled sequence starts at the origin;
//! designs skip that point by default.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest supported dimension.
pub const MAX_DIM: usize = 16;
const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4_294_967_296.0;

/// Designs skip the all-zeros first point unless told otherwise.
pub const DEFAULT_SKIP: u64 = 1;

const JOE_KUO_TABLE: &str = include_str!("../data/new-joe-kuo-16.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("unsupported Sobol dimension {0} (supported: 1..={MAX_DIM})")]
    UnsupportedDimension(usize),
    #[error("requested point count must be at least 1")]
    EmptyRequest,
    #[error("index range exceeds the 2^32 points of a 32-bit Sobol sequence")]
    IndexOverflow,
    #[error("invalid design bounds: {0}")]
    InvalidBounds(String),
    #[error("unit-cube coordinate {value} at point {index} is outside [0, 1)")]
    Domain { index: usize, value: f64 },
    #[error("design points must be two-dimensional, got {0}")]
    WrongArity(usize),
}

type Directions = [[u32; BITS]; MAX_DIM];

fn directions() -> &'static Directions {
    static TABLE: OnceLock<Directions> = OnceLock::new();
    TABLE.get_or_init(|| parse_joe_kuo(JOE_KUO_TABLE))
}

fn parse_joe_kuo(text: &str) -> Directions {
    let mut v = [[0u32; BITS]; MAX_DIM];
    // first dimension is van der Corput
    for (i, d) in v[0].iter_mut().enumerate() {
        *d = 1u32 << (31 - i);
    }
    for line in text.lines().skip(1) {
        let fields: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse().expect("malformed direction-number table"))
            .collect();
        if fields.is_empty() {
            continue;
        }
        let dim = fields[0] as usize;
        if dim > MAX_DIM {
            break;
        }
        let s = fields[1] as usize;
        let a = fields[2];
        let m = &fields[3..3 + s];
        let dv = &mut v[dim - 1];
        for i in 0..BITS {
            dv[i] = if i < s {
                m[i] << (31 - i)
            } else {
                let mut x = dv[i - s] ^ (dv[i - s] >> s);
                for k in 1..s {
                    if (a >> (s - 1 - k)) & 1 == 1 {
                        x ^= dv[i - k];
                    }
                }
                x
            };
        }
    }
    v
}

/// Gray-code Sobol generator in `dim` dimensions.
#[derive(Clone, Debug)]
pub struct SobolSequence {
    dim: usize,
    state: Vec<u32>,
    /// Sequence index of the point held in `state`.
    index: u64,
}

impl SobolSequence {
    /// Positioned so the first call to `next` yields point `start`.
    pub fn new(dim: usize, start: u64) -> Result<Self, DesignError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(DesignError::UnsupportedDimension(dim));
        }
        if start > u32::MAX as u64 {
            return Err(DesignError::IndexOverflow);
        }
        Ok(Self {
            dim,
            state: direct_point(dim, start),
            index: start,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Iterator for SobolSequence {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.index > u32::MAX as u64 {
            return None;
        }
        let out = self.state.iter().map(|&x| x as f64 * SCALE).collect();
        // x_{n+1} = x_n ^ v_c, c = position of the lowest zero bit of n
        let c = (!self.index).trailing_zeros() as usize;
        if c < BITS {
            let dirs = directions();
            for (x, d) in self.state.iter_mut().zip(dirs.iter()) {
                *x ^= d[c];
            }
        }
        self.index += 1;
        Some(out)
    }
}

/// Integer coordinates of point `index` from the binary (non-recursive)
/// construction: XOR of the direction numbers selected by gray(index).
pub fn direct_point(dim: usize, index: u64) -> Vec<u32> {
    let gray = index ^ (index >> 1);
    let dirs = directions();
    (0..dim)
        .map(|d| {
            (0..BITS)
                .filter(|&b| (gray >> b) & 1 == 1)
                .fold(0u32, |acc, b| acc ^ dirs[d][b])
        })
        .collect()
}

/// Points `skip..skip + n` of the `dim`-dimensional Sobol sequence.
pub fn sobol_unit(dim: usize, n: usize, skip: u64) -> Result<Vec<Vec<f64>>, DesignError> {
    if n == 0 {
        return Err(DesignError::EmptyRequest);
    }
    if skip
        .checked_add(n as u64)
        .is_none_or(|end| end > u32::MAX as u64 + 1)
    {
        return Err(DesignError::IndexOverflow);
    }
    Ok(SobolSequence::new(dim, skip)?.take(n).collect())
}

/// Feasible rectangle of cutting speed (m/min) and feed rate (μm/rev).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignBounds {
    pub v_min: f64,
    pub v_max: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl DesignBounds {
    pub fn new(v_min: f64, v_max: f64, f_min: f64, f_max: f64) -> Result<Self, DesignError> {
        let b = Self {
            v_min,
            v_max,
            f_min,
            f_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        let all = [self.v_min, self.v_max, self.f_min, self.f_max];
        if all.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(DesignError::InvalidBounds(
                "bounds must be finite and strictly positive".into(),
            ));
        }
        if self.v_min >= self.v_max {
            return Err(DesignError::InvalidBounds(format!(
                "v_min {} must be below v_max {}",
                self.v_min, self.v_max
            )));
        }
        if self.f_min >= self.f_max {
            return Err(DesignError::InvalidBounds(format!(
                "f_min {} must be below f_max {}",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub index: usize,
    pub v_c: f64,
    pub f: f64,
}

/// Affine map of 2-D unit-cube points onto `bounds`. Indices are assigned in
/// input order starting from zero.
///
/// Bounds are not re-validated here; [`DesignBounds::new`] does that.
pub fn scale_design(points: &[Vec<f64>], bounds: &DesignBounds) -> Result<Vec<DesignPoint>, DesignError> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p.len() != 2 {
                return Err(DesignError::WrongArity(p.len()));
            }
            if let Some(&value) = p.iter().find(|x| !(0.0..1.0).contains(*x)) {
                return Err(DesignError::Domain { index, value });
            }
            Ok(DesignPoint {
                index,
                v_c: bounds.v_min + p[0] * (bounds.v_max - bounds.v_min),
                f: bounds.f_min + p[1] * (bounds.f_max - bounds.f_min),
            })
        })
        .collect()
}

/// Prioritized settings plus the reserve that would extend them.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPlan {
    pub initial: Vec<DesignPoint>,
    pub reserve: Vec<DesignPoint>,
}

impl AugmentationPlan {
    pub fn all(&self) -> impl Iterator<Item = (&DesignPoint, bool)> {
        self.initial
            .iter()
            .map(|p| (p, true))
            .chain(self.reserve.iter().map(|p| (p, false)))
    }
}

pub fn augmentation_plan(
    bounds: &DesignBounds,
    n_initial: usize,
    n_reserve: usize,
) -> Result<AugmentationPlan, DesignError> {
    augmentation_plan_with_skip(bounds, n_initial, n_reserve, DEFAULT_SKIP)
}

pub fn augmentation_plan_with_skip(
    bounds: &DesignBounds,
    n_initial: usize,
    n_reserve: usize,
    skip: u64,
) -> Result<AugmentationPlan, DesignError> {
    if n_initial == 0 {
        return Err(DesignError::EmptyRequest);
    }
    bounds.validate()?;
    let unit = sobol_unit(2, n_initial + n_reserve, skip)?;
    let mut initial = scale_design(&unit, bounds)?;
    let reserve = initial.split_off(n_initial);
    Ok(AugmentationPlan { initial, reserve })
}
