use super::{MultivariateSeries, Result, SignalsError, N_STATES};

/// One `F × δ` window, row-major by feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Number of real (unpadded) time steps.
    pub valid_len: usize,
}

impl Window {
    pub fn row(&self, f: usize, width: usize) -> &[f64] {
        &self.values[f * width..(f + 1) * width]
    }
}

/// Non-overlapping windows tiling a series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: Vec<Window>,
    pub start_indices: Vec<usize>,
    pub window_size: usize,
    pub n_features: usize,
    pub series_len: usize,
}

/// Splits a series into `⌈T/δ⌉` windows. The final window is right-padded
/// with zeros that are masked out.
pub fn make_windows(s: &MultivariateSeries, window: usize) -> Result<WindowBatch> {
    let t_len = s.len();
    if window < 1 || window > t_len {
        return Err(SignalsError::Parameter(format!(
            "window size {window} outside 1..={t_len}"
        )));
    }
    let f_n = s.n_features();
    let count = t_len.div_ceil(window);
    let mut windows = Vec::with_capacity(count);
    let mut starts = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * window;
        let valid = window.min(t_len - start);
        let mut values = vec![0.0; f_n * window];
        let mut mask = vec![false; f_n * window];
        for f in 0..f_n {
            for i in 0..valid {
                values[f * window + i] = s.feature(f)[start + i];
                mask[f * window + i] = s.is_observed(f, start + i);
            }
        }
        windows.push(Window {
            values,
            mask,
            valid_len: valid,
        });
        starts.push(start);
    }
    Ok(WindowBatch {
        windows,
        start_indices: starts,
        window_size: window,
        n_features: f_n,
        series_len: t_len,
    })
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Stitches the windows back into `F × T`, dropping padding.
    pub fn reassemble(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.series_len); self.n_features];
        for w in &self.windows {
            for (f, row) in out.iter_mut().enumerate() {
                row.extend_from_slice(&w.row(f, self.window_size)[..w.valid_len]);
            }
        }
        out
    }
}

/// Majority state per window (smallest state wins ties).
pub fn majority_labels(batch: &WindowBatch, labels: &[u8]) -> Vec<u8> {
    batch
        .windows
        .iter()
        .zip(&batch.start_indices)
        .map(|(w, &start)| {
            let mut counts = [0usize; N_STATES];
            for &l in &labels[start..start + w.valid_len] {
                counts[l as usize] += 1;
            }
            let mut best = 0;
            for (s, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = s;
                }
            }
            best as u8
        })
        .collect()
}
