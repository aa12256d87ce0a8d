//! Planar RGB8 raw video with a `key=value` sidecar descriptor.
//!
//! Each frame is stored as three `H×W` planes (R, G, B). The sidecar lives
//! next to the raw file as `<raw>.meta`.

use std::path::{Path, PathBuf};

use crate::codec::sequence::{from_rgb8, to_rgb8};
use crate::error::{dim_err, format_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sidecar {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
}

impl Sidecar {
    pub fn frame_bytes(&self) -> usize {
        3 * self.width * self.height
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut width, mut height, mut frames, mut fps) = (None, None, None, 30.0);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return format_err(format!("sidecar line {}: expected key=value", n + 1));
            };
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| crate::Error::Format(format!("sidecar {k}: {v:?} is not an integer")))
            };
            match k {
                "width" => width = Some(int(v)?),
                "height" => height = Some(int(v)?),
                "frames" => frames = Some(int(v)?),
                "fps" => {
                    fps = v
                        .parse()
                        .map_err(|_| crate::Error::Format(format!("sidecar fps: {v:?} is not a number")))?
                }
                _ => return format_err(format!("sidecar: unknown key {k:?}")),
            }
        }
        match (width, height, frames) {
            (Some(width), Some(height), Some(frames)) => Ok(Sidecar {
                width,
                height,
                frames,
                fps,
            }),
            _ => format_err("sidecar needs width, height and frames"),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "width={}\nheight={}\nframes={}\nfps={}\n",
            self.width, self.height, self.frames, self.fps
        )
    }
}

/// Default sidecar location for a raw file.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Frames of a raw file as `1×3×H×W` tensors in `[0, 1]`.
pub fn decode_raw(bytes: &[u8], meta: &Sidecar) -> Result<Vec<Tensor<f32>>> {
    let expected = meta.frame_bytes() * meta.frames;
    if bytes.len() != expected {
        return format_err(format!(
            "raw video holds {} bytes, sidecar {}×{}×{} implies {expected}",
            bytes.len(),
            meta.width,
            meta.height,
            meta.frames
        ));
    }
    let (w, h) = (meta.width, meta.height);
    if w == 0 || h == 0 || w % 16 != 0 || h % 16 != 0 {
        return dim_err(format!(
            "{w}×{h} is not a multiple of 16; crop to {}×{}",
            w / 16 * 16,
            h / 16 * 16
        ));
    }
    Ok(bytes
        .chunks_exact(meta.frame_bytes())
        .map(|f| from_rgb8(f, h, w))
        .collect())
}

pub fn load_raw_video(raw: &Path, sidecar: &Path) -> Result<(Vec<Tensor<f32>>, Sidecar)> {
    let meta = Sidecar::parse(&std::fs::read_to_string(sidecar)?)?;
    let frames = decode_raw(&std::fs::read(raw)?, &meta)?;
    Ok((frames, meta))
}

/// Raw bytes and sidecar for `frames`, each `1×3×H×W`.
pub fn encode_raw(frames: &[Tensor<f32>], fps: f64) -> Result<(Vec<u8>, Sidecar)> {
    let Some(first) = frames.first() else {
        return dim_err("no frames to write");
    };
    let (_, _, h, w) = first.dims4()?;
    let mut bytes = Vec::with_capacity(3 * h * w * frames.len());
    for f in frames {
        if f.shape() != first.shape() {
            return dim_err(format!("frame {:?} vs {:?}", f.shape(), first.shape()));
        }
        bytes.extend(to_rgb8(f));
    }
    let meta = Sidecar {
        width: w,
        height: h,
        frames: frames.len(),
        fps,
    };
    Ok((bytes, meta))
}

/// Writes `raw` and its sidecar.
pub fn write_raw_video(raw: &Path, frames: &[Tensor<f32>], fps: f64) -> Result<Sidecar> {
    let (bytes, meta) = encode_raw(frames, fps)?;
    std::fs::write(raw, bytes)?;
    std::fs::write(sidecar_path(raw), meta.render())?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip() {
        let m = Sidecar {
            width: 64,
            height: 32,
            frames: 10,
            fps: 25.0,
        };
        assert_eq!(Sidecar::parse(&m.render()).unwrap(), m);
        assert!(Sidecar::parse("width=64\nheight=64").is_err());
        assert!(Sidecar::parse("width=x\nheight=64\nframes=1").is_err());
    }

    #[test]
    fn size_mismatch_names_both_counts() {
        let m = Sidecar::parse("width=64\nheight=64\nframes=10").unwrap();
        assert_eq!(m.frame_bytes() * m.frames, 122_880);
        let err = decode_raw(&vec![0; 122_879], &m).unwrap_err().to_string();
        assert!(err.contains("122879") && err.contains("122880"), "{err}");
        assert_eq!(decode_raw(&vec![7; 122_880], &m).unwrap().len(), 10);
    }

    #[test]
    fn odd_extent_suggests_crop() {
        let m = Sidecar::parse("width=70\nheight=40\nframes=1").unwrap();
        let err = decode_raw(&vec![0; 3 * 70 * 40], &m).unwrap_err().to_string();
        assert!(err.contains("64×32"), "{err}");
    }
}
