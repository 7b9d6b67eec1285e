//! RIFF/WAVE reading (PCM 16-bit, IEEE float 32-bit) and float-32 writing.

use std::fs;
use std::path::Path;

use lightsaft_core::spectro::AudioClip;

use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Sample encoding of a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

struct Fmt {
    format: SampleFormat,
    channels: usize,
    sample_rate: u32,
}

fn parse_fmt(body: &[u8]) -> Result<Fmt> {
    if body.len() < 16 {
        return Err(Error::wav("fmt ", format!("chunk is {} bytes, need 16", body.len())));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2) as usize;
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12) as usize;
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(Error::wav("fmt ", "extensible format without sub-format"));
        }
        tag = u16_at(body, 24);
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        _ => return Err(Error::wav("fmt ", format!("unsupported codec: format tag {tag}, {bits} bits"))),
    };
    if !(1..=2).contains(&channels) {
        return Err(Error::wav("fmt ", format!("{channels} channels; only 1 or 2 supported")));
    }
    if sample_rate == 0 {
        return Err(Error::wav("fmt ", "sample rate is zero"));
    }
    if block_align != channels * bits as usize / 8 {
        return Err(Error::wav("fmt ", format!("block align {block_align} inconsistent with {channels} x {bits} bits")));
    }
    Ok(Fmt { format, channels, sample_rate })
}

/// Decodes a WAV file held in memory.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip<f32>> {
    if bytes.len() < 12 {
        return Err(Error::wav("RIFF", "file shorter than the RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::wav("RIFF", "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::wav("WAVE", "RIFF form type is not WAVE"));
    }
    let riff_end = 8 + u32_at(bytes, 4) as usize;
    if riff_end > bytes.len() {
        return Err(Error::wav("RIFF", format!("declares {riff_end} bytes, file has {}", bytes.len())));
    }
    let mut fmt: Option<Fmt> = None;
    let mut pos = 12;
    while pos < riff_end {
        if pos + 8 > riff_end {
            return Err(Error::wav("RIFF", "truncated chunk header"));
        }
        let id = String::from_utf8_lossy(&bytes[pos..pos + 4]).into_owned();
        let size = u32_at(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start.checked_add(size).filter(|&e| e <= riff_end);
        let Some(end) = end else {
            return Err(Error::wav(&id, format!("declares {size} bytes, {} remain", riff_end - start)));
        };
        let body = &bytes[start..end];
        match id.as_str() {
            "fmt " => fmt = Some(parse_fmt(body)?),
            "data" => {
                let f = fmt.ok_or_else(|| Error::wav("data", "data chunk before fmt chunk"))?;
                return decode_samples(body, &f);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(Error::wav(if fmt.is_some() { "data" } else { "fmt " }, "required chunk missing"))
}

fn decode_samples(body: &[u8], f: &Fmt) -> Result<AudioClip<f32>> {
    let width = match f.format {
        SampleFormat::Pcm16 => 2,
        SampleFormat::Float32 => 4,
    };
    let frame = width * f.channels;
    if body.len() % frame != 0 {
        return Err(Error::wav("data", format!("{} bytes is not a whole number of {frame}-byte frames", body.len())));
    }
    let n = body.len() / frame;
    let mut channels = vec![Vec::with_capacity(n); f.channels];
    for i in 0..n {
        for (c, out) in channels.iter_mut().enumerate() {
            let at = i * frame + c * width;
            let v = match f.format {
                SampleFormat::Pcm16 => i16::from_le_bytes([body[at], body[at + 1]]) as f32 / 32768.0,
                SampleFormat::Float32 => f32::from_le_bytes([body[at], body[at + 1], body[at + 2], body[at + 3]]),
            };
            out.push(v);
        }
    }
    AudioClip::new(channels, f.sample_rate).map_err(|e| Error::wav("data", e.to_string()))
}

/// Encodes a clip; 16-bit samples are rounded and clamped to `[-32768, 32767]`.
pub fn encode_wav(clip: &AudioClip<f32>, format: SampleFormat) -> Vec<u8> {
    let ch = clip.num_channels();
    let (tag, width) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 2usize),
        SampleFormat::Float32 => (FORMAT_FLOAT, 4usize),
    };
    let data_len = clip.num_samples() * ch * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(ch as u16).to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * (ch * width) as u32).to_le_bytes());
    out.extend_from_slice(&((ch * width) as u16).to_le_bytes());
    out.extend_from_slice(&((8 * width) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..clip.num_samples() {
        for c in 0..ch {
            let v = clip.channel(c)[i];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    if data_len % 2 == 1 {
        out.push(0);
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Writes a float-32 WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip, SampleFormat::Float32)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(channels: usize, n: usize) -> AudioClip<f32> {
        let data = (0..channels)
            .map(|c| (0..n).map(|i| ((i * 7919 + c * 104729) % 2001) as f32 / 1000.0 - 1.0).collect())
            .collect();
        AudioClip::new(data, 8000).unwrap()
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        for ch in [1, 2] {
            let c = clip(ch, 301);
            let back = decode_wav(&encode_wav(&c, SampleFormat::Float32)).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn pcm16_round_trip_within_one_step() {
        let c = clip(2, 500).scaled(0.99);
        let back = decode_wav(&encode_wav(&c, SampleFormat::Pcm16)).unwrap();
        for ch in 0..2 {
            for (a, b) in c.channel(ch).iter().zip(back.channel(ch)) {
                assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }

    #[test]
    fn pcm16_full_scale_is_minus_one() {
        let mut bytes = encode_wav(&clip(1, 2), SampleFormat::Pcm16);
        let n = bytes.len();
        bytes[n - 4..n - 2].copy_from_slice(&i16::MIN.to_le_bytes());
        bytes[n - 2..].copy_from_slice(&i16::MAX.to_le_bytes());
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.channel(0), &[-1.0, 32767.0 / 32768.0]);
    }

    #[test]
    fn truncated_file_names_the_chunk() {
        let bytes = encode_wav(&clip(1, 100), SampleFormat::Float32);
        let cut = &bytes[..bytes.len() - 10];
        match decode_wav(cut) {
            Err(Error::Wav { chunk, .. }) => assert_eq!(chunk, "RIFF"),
            other => panic!("{other:?}"),
        }
        let mut fixed = cut.to_vec();
        let riff = (fixed.len() - 8) as u32;
        fixed[4..8].copy_from_slice(&riff.to_le_bytes());
        match decode_wav(&fixed) {
            Err(Error::Wav { chunk, .. }) => assert_eq!(chunk, "data"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_wav(&bytes[..8]), Err(Error::Wav { .. })));
    }

    #[test]
    fn unsupported_codec_names_fmt() {
        let mut bytes = encode_wav(&clip(1, 10), SampleFormat::Float32);
        bytes[20..22].copy_from_slice(&6u16.to_le_bytes());
        match decode_wav(&bytes) {
            Err(Error::Wav { chunk, detail }) => {
                assert_eq!(chunk, "fmt ");
                assert!(detail.contains("unsupported codec"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn three_channels_rejected() {
        let mut bytes = encode_wav(&clip(1, 10), SampleFormat::Pcm16);
        bytes[22..24].copy_from_slice(&3u16.to_le_bytes());
        assert!(matches!(decode_wav(&bytes), Err(Error::Wav { chunk, .. }) if chunk == "fmt "));
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let bytes = encode_wav(&clip(1, 5), SampleFormat::Float32);
        let mut with_list = bytes[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&bytes[36..]);
        let riff = (with_list.len() - 8) as u32;
        with_list[4..8].copy_from_slice(&riff.to_le_bytes());
        assert_eq!(decode_wav(&with_list).unwrap(), clip(1, 5));
    }

    #[test]
    fn missing_magic() {
        let mut bytes = encode_wav(&clip(1, 5), SampleFormat::Float32);
        bytes[0] = b'X';
        assert!(matches!(decode_wav(&bytes), Err(Error::Wav { chunk, .. }) if chunk == "RIFF"));
    }

    proptest! {
        #[test]
        fn random_float_clips_round_trip(samples in proptest::collection::vec(-1.0f32..1.0, 1..200), stereo: bool) {
            let ch = if stereo { 2 } else { 1 };
            let c = AudioClip::new(vec![samples; ch], 44100).unwrap();
            prop_assert_eq!(decode_wav(&encode_wav(&c, SampleFormat::Float32)).unwrap(), c);
        }
    }
}
