//! Directory layout:
//!
//! ```text
//! intrinsics.txt     fx fy cx cy
//! rgb/000000.png     8-bit RGB
//! depth/000000.png   optional, 16-bit gray, value = meters * 1000
//! poses.txt          optional, 12 numbers per line, row-major 3x4 camera-to-world
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::frame::{DepthMap, ImageFrame};
use crate::geometry::{CameraIntrinsics, RigidTransform};

/// Raw depth units per meter.
pub const DEPTH_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep every n-th frame (1 keeps all).
    pub temporal_stride: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { temporal_stride: 1 }
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let enc_err = |e: png::EncodingError| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(data).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

/// Writes an RGB frame with values clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_rgb_png(path: &Path, image: &ImageFrame) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", image.channels())));
    }
    let (w, h) = (image.width(), image.height());
    let mut bytes = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    encode_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// Writes depth in millimeters; values beyond the 16-bit range saturate.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let bytes: Vec<u8> = depth
        .data()
        .iter()
        .flat_map(|d| ((d * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16).to_be_bytes())
        .collect();
    encode_png(path, depth.width(), depth.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec_err = |e: png::DecodingError| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(dec_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(dec_err)?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<ImageFrame> {
    let d = decode_png(path)?;
    let stride = match (d.color, d.depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (png::ColorType::Rgba, png::BitDepth::Eight) => 4,
        (c, b) => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB, found {c:?} at {b:?}"),
            })
        }
    };
    let w = d.width;
    Ok(ImageFrame::from_fn(w, d.height, 3, |c, y, x| {
        d.bytes[(y * w + x) * stride + c] as f64 / 255.0
    }))
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let d = decode_png(path)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Sixteen {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!("expected 16-bit grayscale, found {:?} at {:?}", d.color, d.depth),
        });
    }
    let w = d.width;
    Ok(DepthMap::from_fn(w, d.height, |y, x| {
        let i = 2 * (y * w + x);
        u16::from_be_bytes([d.bytes[i], d.bytes[i + 1]]) as f64 / DEPTH_SCALE
    }))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_numbers(path: &Path, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Decode {
                path: path.to_path_buf(),
                reason: format!("not a number: '{t}'"),
            })
        })
        .collect()
}

fn read_intrinsics(dir: &Path, width: usize, height: usize) -> Result<CameraIntrinsics> {
    let path = dir.join("intrinsics.txt");
    if !path.is_file() {
        return Err(Error::MissingIntrinsics(path));
    }
    let bad = |reason: String| Error::BadIntrinsics {
        path: path.clone(),
        reason,
    };
    let text = read_text(&path)?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| bad(format!("not a number: '{t}'"))))
        .collect::<Result<_>>()?;
    let [fx, fy, cx, cy] = v[..] else {
        return Err(bad(format!("expected 4 numbers, found {}", v.len())));
    };
    CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(|e| bad(e.to_string()))
}

fn frame_indices(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Decode {
                path: path.clone(),
                reason: "file name is not a frame index".into(),
            })?;
        frames.push((index, path));
    }
    frames.sort();
    for (expected, (found, _)) in frames.iter().enumerate() {
        if *found != expected {
            return Err(Error::NonContiguousFrames {
                expected,
                found: *found,
            });
        }
    }
    Ok(frames)
}

fn check_size(path: &Path, (w, h): (usize, usize), (found_w, found_h): (usize, usize)) -> Result<()> {
    if (w, h) != (found_w, found_h) {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected_w: w,
            expected_h: h,
            found_w,
            found_h,
        });
    }
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    load_sequence_with(dir, LoadOptions::default())
}

pub fn load_sequence_with(dir: &Path, options: LoadOptions) -> Result<Sequence> {
    let rgb_dir = dir.join("rgb");
    let files = frame_indices(&rgb_dir)?;
    if files.is_empty() {
        return Err(Error::Decode {
            path: rgb_dir,
            reason: "no frames".into(),
        });
    }
    let mut images = Vec::with_capacity(files.len());
    for (_, path) in &files {
        images.push(read_rgb_png(path)?);
    }
    let size = (images[0].width(), images[0].height());
    for ((_, path), im) in files.iter().zip(&images) {
        check_size(path, size, (im.width(), im.height()))?;
    }
    let intrinsics = read_intrinsics(dir, size.0, size.1)?;

    let poses = {
        let path = dir.join("poses.txt");
        if path.is_file() {
            let text = read_text(&path)?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            if lines.len() != files.len() {
                return Err(Error::Decode {
                    path,
                    reason: format!("{} poses for {} frames", lines.len(), files.len()),
                });
            }
            let mut out = Vec::with_capacity(lines.len());
            for line in lines {
                let v = parse_numbers(&path, line)?;
                let arr: [f64; 12] = v.try_into().map_err(|v: Vec<f64>| Error::Decode {
                    path: path.clone(),
                    reason: format!("pose line has {} numbers, expected 12", v.len()),
                })?;
                out.push(Some(RigidTransform::from_row_major_3x4(&arr)?));
            }
            out
        } else {
            vec![None; files.len()]
        }
    };

    let mut frames = Vec::with_capacity(files.len());
    for (((index, _), image), pose) in files.iter().zip(images).zip(poses) {
        let depth_path = dir.join("depth").join(frame_name(*index));
        let depth = if depth_path.is_file() {
            let d = read_depth_png(&depth_path)?;
            check_size(&depth_path, size, (d.width(), d.height()))?;
            Some(d)
        } else {
            None
        };
        frames.push(Frame {
            index: *index,
            image,
            depth,
            pose,
        });
    }
    let seq = Sequence { intrinsics, frames };
    if options.temporal_stride == 1 {
        Ok(seq)
    } else {
        seq.temporally_downsampled(options.temporal_stride)
    }
}

/// Writes a sequence in the directory layout, creating `dir` if needed.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    seq.validate()?;
    let rgb_dir = dir.join("rgb");
    fs::create_dir_all(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    let k = &seq.intrinsics;
    let path = dir.join("intrinsics.txt");
    fs::write(&path, format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy)).map_err(|e| Error::io(&path, e))?;
    let depth_dir = dir.join("depth");
    if seq.frames.iter().any(|f| f.depth.is_some()) {
        fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    }
    for f in &seq.frames {
        write_rgb_png(&rgb_dir.join(frame_name(f.index)), &f.image)?;
        if let Some(d) = &f.depth {
            write_depth_png(&depth_dir.join(frame_name(f.index)), d)?;
        }
    }
    if let Some(poses) = seq.poses() {
        let path = dir.join("poses.txt");
        let mut out = create(&path)?;
        for p in poses {
            let line: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", line.join(" ")).map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_scene, SyntheticSceneConfig};

    fn small_scene() -> Sequence {
        generate_synthetic_scene(&SyntheticSceneConfig {
            frames: 5,
            width: 32,
            height: 24,
            focal: 26.0,
            seed: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn depth_png_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let raw: Vec<u8> = [2500u16, 0, 65535, 1].iter().flat_map(|v| v.to_be_bytes()).collect();
        encode_png(&path, 2, 2, png::ColorType::Grayscale, png::BitDepth::Sixteen, &raw).unwrap();
        let d = read_depth_png(&path).unwrap();
        assert_eq!(d.data(), &[2.5, 0.0, 65.535, 0.001]);
    }

    #[test]
    fn round_trip_within_quantization() {
        let seq = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        assert!((back.intrinsics.fx - seq.intrinsics.fx).abs() < 1e-12);
        assert_eq!(back.intrinsics.cx, seq.intrinsics.cx);
        for (a, b) in seq.frames.iter().zip(&back.frames) {
            let img_err = a
                .image
                .data()
                .iter()
                .zip(b.image.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(img_err <= 1.0 / 255.0);
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            let depth_err = da.data().iter().zip(db.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(depth_err <= 0.5e-3 + 1e-12);
            assert!(a.pose.unwrap().max_abs_diff(&b.pose.unwrap()) < 1e-12);
        }
        assert_eq!(back.samples().len(), 3);
    }

    #[test]
    fn distinct_load_errors() {
        let seq = small_scene();

        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        fs::remove_file(dir.path().join("intrinsics.txt")).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::MissingIntrinsics(_))));

        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        fs::remove_file(dir.path().join("rgb").join(frame_name(2))).unwrap();
        fs::remove_file(dir.path().join("poses.txt")).unwrap();
        assert!(matches!(
            load_sequence(dir.path()),
            Err(Error::NonContiguousFrames { expected: 2, found: 3 })
        ));

        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        write_rgb_png(&dir.path().join("rgb").join(frame_name(4)), &ImageFrame::filled(8, 8, 3, 0.5)).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::SizeMismatch { found_w: 8, .. })));
    }

    #[test]
    fn stride_option() {
        let seq = small_scene();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let back = load_sequence_with(dir.path(), LoadOptions { temporal_stride: 2 }).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.frames[1].pose.unwrap().max_abs_diff(&seq.frames[2].pose.unwrap()) < 1e-12);
    }
}
