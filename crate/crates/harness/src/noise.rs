//! SNR-controlled noise injection on audio feature streams. Energy is the
//! mean squared feature value over the utterance, so requested SNRs hold
//! exactly on features (there is no waveform stage in this pipeline).

use avur_core::features::FeatureSequence;
use avur_core::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    /// Sum of three other utterances' audio streams, tiled to length.
    Babble,
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    /// None is the clean passthrough.
    pub snr_db: Option<f64>,
    pub kind: NoiseKind,
}

/// An evaluation condition; clean or a dB level on the configured grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    SnrDb(i32),
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".to_string(),
            Condition::SnrDb(db) => format!("{db}dB"),
        }
    }

    pub fn spec(&self, kind: NoiseKind) -> NoiseSpec {
        match self {
            Condition::Clean => NoiseSpec { snr_db: None, kind },
            Condition::SnrDb(db) => NoiseSpec { snr_db: Some(*db as f64), kind },
        }
    }
}

fn raw_noise(shape: (usize, usize), kind: NoiseKind, rng: &mut ChaCha8Rng, pool: &[&Matrix]) -> Result<Matrix> {
    let (rows, cols) = shape;
    match kind {
        NoiseKind::Gaussian => Ok(Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))),
        NoiseKind::Babble => {
            if pool.len() < 3 {
                return Err(HarnessError::Config(
                    "babble noise needs a pool of at least 3 donor streams".into(),
                ));
            }
            let mut out = Matrix::zeros(rows, cols);
            for _ in 0..3 {
                let donor = pool[rng.random_range(0..pool.len())];
                if donor.cols() != cols {
                    return Err(HarnessError::Config("donor stream dimension mismatch".into()));
                }
                let offset = rng.random_range(0..donor.rows());
                for t in 0..rows {
                    let src = (offset + t) % donor.rows();
                    for c in 0..cols {
                        out[(t, c)] += donor[(src, c)];
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Additively mix noise into the audio stream at an exact feature-energy
/// SNR. The visual stream is never touched by acoustic noise.
pub fn mix_noise(
    audio: &FeatureSequence,
    spec: &NoiseSpec,
    seed: u64,
    pool: &[&Matrix],
) -> Result<FeatureSequence> {
    let snr_db = match spec.snr_db {
        None => return Ok(audio.clone()),
        Some(v) => v,
    };
    if !snr_db.is_finite() {
        return Err(HarnessError::Config("snr must be finite (use the clean condition instead)".into()));
    }
    let sig_energy = audio.frames.mean_sq();
    if sig_energy <= 0.0 {
        return Err(HarnessError::Run("cannot set an SNR against a zero-energy signal".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = raw_noise(audio.frames.shape(), spec.kind, &mut rng, pool)?;
    let noise_energy = noise.mean_sq();
    if noise_energy <= 0.0 {
        return Err(HarnessError::Run("drew a zero-energy noise realization".into()));
    }
    let target = sig_energy / 10f64.powf(snr_db / 10.0);
    let scale = (target / noise_energy).sqrt();
    let mut frames = audio.frames.clone();
    frames.axpy(scale, &noise);
    Ok(FeatureSequence::new(frames, audio.frame_rate_hz, audio.modality)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use avur_core::features::Modality;

    fn fs(m: Matrix) -> FeatureSequence {
        FeatureSequence::new(m, 100.0, Modality::Audio).unwrap()
    }

    #[test]
    fn clean_condition_is_a_passthrough() {
        let audio = fs(Matrix::from_fn(6, 4, |r, c| (r + c) as f64 * 0.2 - 0.5));
        let spec = NoiseSpec { snr_db: None, kind: NoiseKind::Gaussian };
        let out = mix_noise(&audio, &spec, 42, &[]).unwrap();
        assert!(out.frames.bits_eq(&audio.frames));
    }

    #[test]
    fn zero_db_means_equal_energies() {
        let audio = fs(Matrix::from_fn(20, 8, |r, c| ((r * 8 + c) as f64).sin()));
        let spec = NoiseSpec { snr_db: Some(0.0), kind: NoiseKind::Gaussian };
        let out = mix_noise(&audio, &spec, 7, &[]).unwrap();
        let injected = out.frames.sub(&audio.frames);
        let measured = 10.0 * (audio.frames.mean_sq() / injected.mean_sq()).log10();
        assert!(measured.abs() <= 1e-6, "measured {measured} dB");
    }

    #[test]
    fn minus_ten_db_means_tenfold_noise_energy() {
        let audio = fs(Matrix::from_fn(12, 4, |r, c| ((r + 1) * (c + 1)) as f64 * 0.1));
        let spec = NoiseSpec { snr_db: Some(-10.0), kind: NoiseKind::Gaussian };
        let out = mix_noise(&audio, &spec, 9, &[]).unwrap();
        let injected = out.frames.sub(&audio.frames);
        let ratio = injected.mean_sq() / audio.frames.mean_sq();
        assert!((ratio - 10.0).abs() < 1e-9, "noise/signal energy ratio {ratio}");
    }

    #[test]
    fn babble_hits_requested_snr_and_needs_donors() {
        let audio = fs(Matrix::from_fn(10, 4, |r, c| ((r * 4 + c) as f64).cos()));
        let d1 = Matrix::from_fn(14, 4, |r, c| ((r + c) as f64 * 0.31).sin());
        let d2 = Matrix::from_fn(6, 4, |r, c| ((r * c) as f64 * 0.17).cos());
        let d3 = Matrix::from_fn(9, 4, |r, c| (r as f64 - c as f64) * 0.2);
        let pool = [&d1, &d2, &d3];
        let spec = NoiseSpec { snr_db: Some(5.0), kind: NoiseKind::Babble };
        let out = mix_noise(&audio, &spec, 11, &pool).unwrap();
        let injected = out.frames.sub(&audio.frames);
        let measured = 10.0 * (audio.frames.mean_sq() / injected.mean_sq()).log10();
        assert!((measured - 5.0).abs() <= 1e-6, "measured {measured} dB");
        assert!(mix_noise(&audio, &spec, 11, &pool[..2]).is_err());
    }

    #[test]
    fn zero_energy_signal_is_rejected() {
        let audio = fs(Matrix::zeros(4, 4));
        let spec = NoiseSpec { snr_db: Some(0.0), kind: NoiseKind::Gaussian };
        assert!(mix_noise(&audio, &spec, 1, &[]).is_err());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let audio = fs(Matrix::from_fn(8, 4, |r, c| (r + c) as f64 * 0.3 + 0.1));
        let spec = NoiseSpec { snr_db: Some(0.0), kind: NoiseKind::Gaussian };
        let a = mix_noise(&audio, &spec, 123, &[]).unwrap();
        let b = mix_noise(&audio, &spec, 123, &[]).unwrap();
        assert!(a.frames.bits_eq(&b.frames));
    }
}
