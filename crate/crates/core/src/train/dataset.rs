use std::path::Path;

use crate::decoder::StyleVector;
use crate::error::{Error, Result};
use crate::frontend::{features_for_motion, load_wav, write_wav, AudioClip};
use crate::mesh_motion::{
    generate_synthetic_dataset, read_neutral, read_regions, read_sequence, write_neutral, write_regions,
    write_sequence, MotionSequence, NeutralGeometry, RegionMask, SyntheticConfig,
};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::Config;

pub const THREADS_ENV: &str = "CORRTALK_THREADS";
pub const NEUTRAL_FILE: &str = "neutral.fneu";
pub const REGIONS_FILE: &str = "regions.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S: Scalar = f64> {
    pub name: String,
    pub audio: AudioClip<S>,
    pub motion: MotionSequence<S>,
}

/// Paired sequences sharing one neutral face and region labelling.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S: Scalar = f64> {
    pub samples: Vec<Sample<S>>,
    pub neutral: NeutralGeometry<S>,
    pub regions: RegionMask,
}

impl<S: Scalar> Dataset<S> {
    pub fn synthetic(config: &SyntheticConfig) -> Result<Self> {
        let pairs = generate_synthetic_dataset::<S>(config)?;
        let neutral = pairs[0].neutral.clone();
        let regions = pairs[0].regions.clone();
        let samples = pairs
            .into_iter()
            .enumerate()
            .map(|(i, p)| Sample { name: format!("seq{i:03}"), audio: p.audio, motion: p.motion })
            .collect();
        Ok(Dataset { samples, neutral, regions })
    }

    pub fn num_vertices(&self) -> usize {
        self.neutral.num_vertices()
    }

    /// Writes `<name>.wav` / `<name>.fmsq` pairs plus the shared neutral and regions.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for s in &self.samples {
            write_wav(&s.audio, dir.join(format!("{}.wav", s.name)))?;
            write_sequence(&s.motion, dir.join(format!("{}.fmsq", s.name)))?;
        }
        write_neutral(&self.neutral, dir.join(NEUTRAL_FILE))?;
        write_regions(&self.regions, dir.join(REGIONS_FILE))
    }

    /// Loads every `<name>.fmsq` with a matching `<name>.wav`, sorted by name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut names: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "fmsq").then(|| p.file_stem()?.to_str().map(str::to_string))?
            })
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no .fmsq sequences found", dir.display())));
        }
        let samples = names
            .into_iter()
            .map(|name| {
                let motion = read_sequence(dir.join(format!("{name}.fmsq")))?;
                let audio = load_wav(dir.join(format!("{name}.wav")))?;
                Ok(Sample { name, audio, motion })
            })
            .collect::<Result<Vec<_>>>()?;
        let neutral = read_neutral(dir.join(NEUTRAL_FILE))?;
        let regions = read_regions(dir.join(REGIONS_FILE))?;
        regions.validate(neutral.num_vertices())?;
        Ok(Dataset { samples, neutral, regions })
    }
}

/// A sequence with its acoustic features extracted.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<S: Scalar = f64> {
    pub name: String,
    /// `T x d0`, one row per motion frame.
    pub acoustic: Tensor<S>,
    pub motion: MotionSequence<S>,
    pub style: StyleVector,
}

/// Worker count from `CORRTALK_THREADS`, defaulting to 1.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn prepare_one<S: Scalar>(config: &Config, sample: &Sample<S>, neutral: &NeutralGeometry<S>) -> Result<Prepared<S>> {
    let motion = &sample.motion;
    if motion.num_vertices() != neutral.num_vertices() {
        return Err(Error::shape(
            "dataset",
            format!("`{}` has {} vertices, neutral {}", sample.name, motion.num_vertices(), neutral.num_vertices()),
        ));
    }
    if (motion.fps as f64 - config.fps).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "`{}` is at {} fps, config expects {}",
            sample.name, motion.fps, config.fps
        )));
    }
    if sample.audio.sample_rate != config.sample_rate {
        return Err(Error::Config(format!(
            "`{}` audio is at {} Hz, config expects {}",
            sample.name, sample.audio.sample_rate, config.sample_rate
        )));
    }
    let feats = features_for_motion(&sample.audio, &config.frontend(), config.fps, config.n, motion.frames())?;
    Ok(Prepared {
        name: sample.name.clone(),
        acoustic: feats.values,
        motion: motion.clone(),
        style: StyleVector::new(motion.subject_id as usize, config.n_subjects)?,
    })
}

/// Extracts features for every sample on up to `workers` threads; results keep dataset order.
pub fn prepare_dataset<S: Scalar>(config: &Config, dataset: &Dataset<S>, workers: usize) -> Result<Vec<Prepared<S>>> {
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let n = dataset.samples.len();
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return dataset.samples.iter().map(|s| prepare_one(config, s, &dataset.neutral)).collect();
    }
    let mut slots: Vec<Option<Result<Prepared<S>>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| (i, prepare_one(config, &dataset.samples[i], &dataset.neutral)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("feature worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Config, Dataset<f64>) {
        let config = Config { d0: 8, n_subjects: 4, ..Config::default() };
        let data = Dataset::synthetic(&SyntheticConfig::new(0, 3, 12, 6, 30.0, 16000)).unwrap();
        (config, data)
    }

    #[test]
    fn parallel_extraction_matches_serial() {
        let (config, data) = tiny();
        let serial = prepare_dataset(&config, &data, 1).unwrap();
        let parallel = prepare_dataset(&config, &data, 3).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial[0].acoustic.shape(), &[12, 8]);
        assert_eq!(serial[1].style.subject, 1);
    }

    #[test]
    fn save_load_round_trip() {
        let (_, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        let back: Dataset<f64> = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 3);
        assert_eq!(back.neutral, data.neutral);
        assert_eq!(back.regions, data.regions);
        for (a, b) in back.samples.iter().zip(&data.samples) {
            assert_eq!(a.motion, b.motion);
            assert_eq!(a.audio.samples.len(), b.audio.samples.len());
        }
    }

    #[test]
    fn mismatched_rate_is_reported() {
        let (config, data) = tiny();
        let err = prepare_dataset(&Config { fps: 25.0, ..config }, &data, 1).unwrap_err();
        assert!(err.to_string().contains("fps"), "{err}");
    }
}
