use super::{MultivariateSeries, Result, SignalsError};
use crate::stationarity::adf_test;

/// Default labeling block length.
pub const LABEL_WINDOW: usize = 250;

/// Which side of the p-value threshold counts as stationary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StationarityConvention {
    /// Stationary when the unit root is rejected, `p ≤ threshold`.
    #[default]
    RejectsUnitRoot,
    /// Stationary when `p > threshold`.
    PValueAbove,
}

impl StationarityConvention {
    pub fn is_stationary(self, p_value: f64, threshold: f64) -> bool {
        match self {
            Self::RejectsUnitRoot => p_value <= threshold,
            Self::PValueAbove => p_value > threshold,
        }
    }
}

/// State id from per-feature stationarity: 0 both, 1 only `a_lon`,
/// 2 only `a_lat`, 3 neither.
pub fn state_from_flags(lat_stationary: bool, lon_stationary: bool) -> u8 {
    match (lat_stationary, lon_stationary) {
        (true, true) => 0,
        (false, true) => 1,
        (true, false) => 2,
        (false, false) => 3,
    }
}

fn block_state(
    s: &MultivariateSeries,
    start: usize,
    end: usize,
    p_thresh: f64,
    convention: StationarityConvention,
) -> u8 {
    let mut flags = [false; 2];
    for (f, flag) in flags.iter_mut().enumerate() {
        let obs: Vec<f64> = (start..end)
            .filter(|&t| s.is_observed(f, t))
            .map(|t| s.feature(f)[t])
            .collect();
        *flag = match adf_test(&obs, None) {
            Ok(r) => convention.is_stationary(r.p_value, p_thresh),
            Err(e) => {
                log::debug!("ADF on feature {f} over [{start},{end}) failed: {e}");
                false
            }
        };
    }
    state_from_flags(flags[0], flags[1])
}

/// Labels every time step by ADF tests on the first two features over
/// non-overlapping blocks of `window` steps. A trailing block shorter than
/// half a window takes the previous block's state. A failed test counts as
/// non-stationary.
pub fn label_states(
    s: &MultivariateSeries,
    window: usize,
    p_thresh: f64,
    convention: StationarityConvention,
) -> Result<MultivariateSeries> {
    if s.n_features() < 2 {
        return Err(SignalsError::Parameter(
            "labeling needs two features".into(),
        ));
    }
    if window == 0 || s.len() < window {
        return Err(SignalsError::Parameter(format!(
            "series of length {} shorter than labeling window {window}",
            s.len()
        )));
    }
    let t_len = s.len();
    let mut labels = Vec::with_capacity(t_len);
    let mut start = 0;
    while start < t_len {
        let end = (start + window).min(t_len);
        let state = if end - start < window.div_ceil(2) {
            *labels.last().unwrap_or(&3)
        } else {
            block_state(s, start, end, p_thresh, convention)
        };
        labels.extend(std::iter::repeat_n(state, end - start));
        start = end;
    }
    s.clone().with_labels(labels)
}
