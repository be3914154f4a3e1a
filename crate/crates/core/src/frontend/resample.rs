use crate::scalar::Scalar;

const HALF_TAPS: f64 = 16.0;

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample<T: Scalar>(x: &[T], from_hz: u32, to_hz: u32) -> Vec<T> {
    if from_hz == to_hz || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let cutoff = ratio.min(1.0);
    let half_width = HALF_TAPS / cutoff;
    let out_len = ((x.len() as f64) * ratio).round() as usize;
    let pi = std::f64::consts::PI;
    (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (i, &xi) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - i as f64;
                let arg = cutoff * d;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (pi * arg).sin() / (pi * arg) };
                let win = 0.5 * (1.0 + (pi * d / half_width).cos());
                acc += xi.as_f64() * cutoff * sinc * win;
            }
            T::lit(acc)
        })
        .collect()
}
