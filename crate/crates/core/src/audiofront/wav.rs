use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

/// Writes mono 16-bit little-endian PCM.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(err) => Error::io(path, err),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(q).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

/// Reads a mono 16-bit PCM file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let io = |e: hound::Error| match e {
        hound::Error::IoError(err) => Error::io(path, err),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut reader = hound::WavReader::open(path).map_err(io)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?;
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}
