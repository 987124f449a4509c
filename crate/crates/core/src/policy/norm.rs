//! Per-channel standardisation of inputs and the steering label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::OBSERVATION_DIM;

/// Channels whose spread falls below this are treated as constant.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: [f64; OBSERVATION_DIM],
    pub input_std: [f64; OBSERVATION_DIM],
    pub output_mean: f64,
    pub output_std: f64,
    /// Channels (8 inputs, then the output) whose std was snapped to 1.
    pub degenerate: [bool; OBSERVATION_DIM + 1],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            input_mean: [0.0; OBSERVATION_DIM],
            input_std: [1.0; OBSERVATION_DIM],
            output_mean: 0.0,
            output_std: 1.0,
            degenerate: [false; OBSERVATION_DIM + 1],
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Population mean and standard deviation of every channel.
pub fn normalize(inputs: &[[f64; OBSERVATION_DIM]], labels: &[f64]) -> Result<NormStats> {
    if inputs.is_empty() || labels.is_empty() {
        return Err(Error::invalid("cannot fit normalisation on an empty set"));
    }
    let mut stats = NormStats::identity();
    for c in 0..OBSERVATION_DIM {
        let (m, s) = mean_std(inputs.iter().map(|x| x[c]), inputs.len());
        stats.input_mean[c] = m;
        if s > DEGENERATE_STD {
            stats.input_std[c] = s;
        } else {
            stats.degenerate[c] = true;
        }
    }
    let (m, s) = mean_std(labels.iter().copied(), labels.len());
    stats.output_mean = m;
    if s > DEGENERATE_STD {
        stats.output_std = s;
    } else {
        stats.degenerate[OBSERVATION_DIM] = true;
    }
    Ok(stats)
}

pub fn apply_norm(x: &[f64; OBSERVATION_DIM], stats: &NormStats) -> [f64; OBSERVATION_DIM] {
    let mut out = [0.0; OBSERVATION_DIM];
    for c in 0..OBSERVATION_DIM {
        out[c] = (x[c] - stats.input_mean[c]) / stats.input_std[c];
    }
    out
}

pub fn invert_norm(z: &[f64; OBSERVATION_DIM], stats: &NormStats) -> [f64; OBSERVATION_DIM] {
    let mut out = [0.0; OBSERVATION_DIM];
    for c in 0..OBSERVATION_DIM {
        out[c] = z[c] * stats.input_std[c] + stats.input_mean[c];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize) -> Vec<[f64; OBSERVATION_DIM]> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                [t.sin() * 40.0 + 3.0, t.cos(), 0.1 * t, (t * 0.3).sin(), -2.0, t * t, 1.0 / (1.0 + t), (t * 1.7).cos() * 1e3]
            })
            .collect()
    }

    #[test]
    fn normalised_channels_are_standard() {
        let xs = sample(300);
        let labels: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let st = normalize(&xs, &labels).unwrap();
        let zs: Vec<_> = xs.iter().map(|x| apply_norm(x, &st)).collect();
        for c in 0..OBSERVATION_DIM {
            if st.degenerate[c] {
                continue;
            }
            let (m, s) = mean_std(zs.iter().map(|z| z[c]), zs.len());
            assert!(m.abs() <= 1e-9 && (s - 1.0).abs() <= 1e-9, "channel {c}: {m} {s}");
        }
    }

    #[test]
    fn constant_channel_is_flagged() {
        let xs = sample(50);
        let st = normalize(&xs, &[0.1; 50]).unwrap();
        assert!(st.degenerate[4]);
        assert_eq!(st.input_std[4], 1.0);
        assert!(st.degenerate[OBSERVATION_DIM]);
        assert_eq!(st.output_std, 1.0);
        assert_eq!(st.degenerate.iter().filter(|d| **d).count(), 2);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(normalize(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(x in prop::array::uniform8(-1e4f64..1e4)) {
            let st = normalize(&sample(40), &[0.0, 1.0]).unwrap();
            let back = invert_norm(&apply_norm(&x, &st), &st);
            for c in 0..OBSERVATION_DIM {
                prop_assert!((back[c] - x[c]).abs() <= 1e-12 * x[c].abs().max(1.0));
            }
        }
    }
}
