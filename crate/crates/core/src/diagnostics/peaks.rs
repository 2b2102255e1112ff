/// Centered moving average with half-width `⌊window/2⌋`, truncated at the
/// ends. `window ≤ 1` returns the series unchanged.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    if h == 0 {
        return series.to_vec();
    }
    (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Index of the first local maximum: the smallest `t ≥ 1` with
/// `s[t] > s[t−1]` and `s[t] ≥ s[t+1]` after smoothing.
pub fn first_peak(series: &[f64], window: usize) -> Option<usize> {
    if series.len() < 3 {
        return None;
    }
    let s = smooth(series, window);
    (1..s.len() - 1).find(|&t| s[t] > s[t - 1] && s[t] >= s[t + 1])
}
