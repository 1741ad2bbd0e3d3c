//! The task emulator: a stand-in program that sleeps or burns CPU for a
//! sampled duration.

use std::time::{Duration, Instant};

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::executor::normal_clamped;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sleep,
    Spin,
}

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "pilotkit-emulate", about = "Sleep or spin for a sampled duration")]
pub struct EmulatorArgs {
    /// Mean duration in seconds.
    #[arg(long, visible_alias = "mean", default_value_t = 0.0, allow_negative_numbers = true)]
    pub duration: f64,
    /// Standard deviation in seconds; samples are clamped at zero.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub std: f64,
    #[arg(long, value_enum, default_value_t = Mode::Sleep)]
    pub mode: Mode,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exit status to report after running.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub exit_code: i32,
}

impl EmulatorArgs {
    /// Parses task arguments (without the program name).
    pub fn from_args<S: AsRef<str>>(args: &[S]) -> Result<Self, String> {
        let argv = std::iter::once("pilotkit-emulate").chain(args.iter().map(|s| s.as_ref()));
        let parsed = EmulatorArgs::try_parse_from(argv).map_err(|e| e.to_string())?;
        parsed.check()?;
        Ok(parsed)
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(format!("--duration must be a non-negative number, got {}", self.duration));
        }
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(format!("--std must be a non-negative number, got {}", self.std));
        }
        Ok(())
    }

    /// Draws the run time from N(duration, std) clamped at zero.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        normal_clamped(rng, self.duration, self.std)
    }

    /// Runs for one sampled duration and returns the exit code to report.
    pub fn run(&self) -> i32 {
        let mut rng = match self.seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_entropy(),
        };
        let secs = self.sample(&mut rng);
        let d = Duration::from_secs_f64(secs);
        match self.mode {
            Mode::Sleep => std::thread::sleep(d),
            Mode::Spin => {
                let t0 = Instant::now();
                let mut x: u64 = 1;
                while t0.elapsed() < d {
                    for _ in 0..1000 {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    }
                }
                std::hint::black_box(x);
            }
        }
        self.exit_code
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags_and_alias() {
        let a = EmulatorArgs::from_args(&["--mean", "0.828", "--std", "0.014", "--mode", "spin"]).unwrap();
        assert_eq!(a.duration, 0.828);
        assert_eq!(a.mode, Mode::Spin);
        assert_eq!(EmulatorArgs::from_args::<&str>(&[]).unwrap().duration, 0.0);
        assert!(EmulatorArgs::from_args(&["--std", "-1"]).is_err());
        assert!(EmulatorArgs::from_args(&["--bogus"]).is_err());
        assert!(EmulatorArgs::from_args(&["--duration", "x"]).is_err());
    }

    #[test]
    fn zero_std_is_exact() {
        let a = EmulatorArgs::from_args(&["--duration", "2"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(a.sample(&mut rng), 2.0);
    }

    #[test]
    fn sample_statistics_match() {
        // mean and std of 1000 draws against the configured values
        let a = EmulatorArgs::from_args(&["--duration", "0.828", "--std", "0.014"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..1000).map(|_| a.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((mean - 0.828).abs() < 3.0 * 0.014 / (1000f64).sqrt());
        assert!((var.sqrt() - 0.014).abs() < 0.2 * 0.014);
    }
}
