use std::path::Path;

use super::Waveform;
use crate::error::Result;
use crate::real::Real;

/// Writes a mono 16-bit little-endian PCM RIFF file. Samples are clipped to
/// `[-1, 1]`; non-finite samples are rejected rather than written as silence.
pub fn write_wav<T: Real>(path: impl AsRef<Path>, wave: &Waveform<T>) -> Result<()> {
    wave.check_finite()?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        let v = s.as_f64().clamp(-1.0, 1.0);
        writer.write_sample((v * i16::MAX as f64).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a mono 16-bit PCM file written by [`write_wav`].
pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(crate::Error::InvalidInput(format!(
            "expected mono 16-bit PCM, got {} channel(s) at {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let scale = 1.0 / i16::MAX as f64;
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| T::lit(v as f64 * scale)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}
