use num_traits::{Float, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Float>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let sum = xs.iter().fold(T::zero(), |acc, &x| acc + x);
    Some(sum / T::from(xs.len())?)
}

/// Median; the mean of the middle two for even counts. NaNs sort last.
pub fn median<T: Float>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or_else(|| a.is_nan().cmp(&b.is_nan())));
    let n = v.len();
    let two = T::one() + T::one();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / two
    })
}

/// Round half away from zero to `places` decimals.
pub fn round_to<T: Float>(x: T, places: i32) -> T {
    let scale = T::from(10.0).expect("float").powi(places);
    (x * scale).round() / scale
}

fn convert<T: Float>(xs: impl IntoIterator<Item = impl ToPrimitive>) -> Vec<T> {
    xs.into_iter()
        .map(|x| T::from(x).expect("value representable as float"))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Drop pairs of equal length before averaging.
    #[default]
    ExcludeZeros,
    IncludeZeros,
}

/// Per-query length differences and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaLStats<T> {
    /// `first - second` for every pair, in input order.
    pub values: Vec<i64>,
    pub nonzero_count: usize,
    pub mode: DeltaMode,
    /// `None` when no value survives the mode's filter.
    pub mean: Option<T>,
    pub median: Option<T>,
}

impl<T> DeltaLStats<T> {
    pub fn is_defined(&self) -> bool {
        self.mean.is_some()
    }
}

/// Length differences `first - second` over paired trajectory lengths.
/// Both lengths must be at least 1.
pub fn delta_l<T: Float>(pairs: &[(usize, usize)], mode: DeltaMode) -> DeltaLStats<T> {
    let values: Vec<i64> = pairs
        .iter()
        .map(|&(a, b)| {
            assert!(a >= 1 && b >= 1, "trajectory lengths must be positive");
            a as i64 - b as i64
        })
        .collect();
    let nonzero_count = values.iter().filter(|&&v| v != 0).count();
    let used: Vec<T> = match mode {
        DeltaMode::ExcludeZeros => convert(values.iter().copied().filter(|&v| v != 0)),
        DeltaMode::IncludeZeros => convert(values.iter().copied()),
    };
    DeltaLStats {
        mean: mean(&used),
        median: median(&used),
        values,
        nonzero_count,
        mode,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats<T> {
    pub count: usize,
    /// Rounded to one decimal.
    pub mean: T,
    pub median: T,
}

/// Mean and median of per-query generated-token counts. `None` when empty.
pub fn token_stats<T: Float>(per_query_tokens: &[u64]) -> Option<TokenStats<T>> {
    let xs: Vec<T> = convert(per_query_tokens.iter().copied());
    Some(TokenStats {
        count: xs.len(),
        mean: round_to(mean(&xs)?, 1),
        median: median(&xs)?,
    })
}
