//! On-disk formats: binary PPM frames, binary PGM masks, Middlebury `.flo`
//! flow and the per-sequence directory layout.
//!
//! ```text
//! <dir>/meta.json
//! <dir>/frames/000001.ppm ...
//! <dir>/masks/000001.pgm ...
//! <dir>/flow/000001.flo ...   (frame 1 holds a copy of frame 2's flow)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::encode_flow;
use crate::synth::VideoSample;
use crate::video::{FlowField, Image, LabelMap};

pub const FLO_MAGIC: f32 = 202021.25;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_pgm(mask: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

/// Parses a binary netpbm header; returns `(width, height, maxval, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed netpbm header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed netpbm header"));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (w, h, maxval, off) = parse_header(bytes, b"P6", path)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let payload = &bytes[off..];
    if payload.len() != w * h * 3 {
        return Err(Error::format(
            path,
            format!("expected {} bytes of pixels, found {}", w * h * 3, payload.len()),
        ));
    }
    Image::from_data(h, w, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (w, h, maxval, off) = parse_header(bytes, b"P5", path)?;
    if maxval > 255 || maxval == 0 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let payload = &bytes[off..];
    if payload.len() != w * h {
        return Err(Error::format(
            path,
            format!("expected {} bytes of pixels, found {}", w * h, payload.len()),
        ));
    }
    LabelMap::from_data(h, w, payload.to_vec())
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated .flo header"));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[i..i + 4]).expect("4 bytes");
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::format(path, "bad .flo magic"));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w < 0 || h < 0 {
        return Err(Error::format(path, format!("negative .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let payload = &bytes[12..];
    if payload.len() != w * h * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes of flow, found {}", w * h * 8, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(FlowField {
        height: h,
        width: w,
        data,
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_file(path)?, path)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read_file(path)?, path)
}

pub fn write_pgm(path: &Path, mask: &LabelMap) -> Result<()> {
    write_file(path, &encode_pgm(mask))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_file(path)?, path)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_file(path, &encode_flo(flow))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub object_ids: Vec<u8>,
    pub seed: u64,
    pub v_max: f64,
}

pub fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:06}.{ext}")
}

pub fn write_meta(dir: &Path, meta: &SampleMeta) -> Result<()> {
    let json = serde_json::to_vec_pretty(meta).expect("meta serialises");
    write_file(&dir.join("meta.json"), &json)
}

pub fn read_meta(dir: &Path) -> Result<SampleMeta> {
    let path = dir.join("meta.json");
    serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::format(&path, e.to_string()))
}

/// Writes label maps as `dir/000001.pgm`, ...
pub fn write_mask_sequence(dir: &Path, masks: &[LabelMap]) -> Result<()> {
    for (t, m) in masks.iter().enumerate() {
        write_pgm(&dir.join(frame_name(t + 1, "pgm")), m)?;
    }
    Ok(())
}

/// Reads every `*.pgm` in `dir` in name order.
pub fn read_mask_sequence(dir: &Path) -> Result<Vec<LabelMap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_pgm(p)).collect()
}

pub fn write_sample(sample: &VideoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_meta(
        dir,
        &SampleMeta {
            height: sample.height,
            width: sample.width,
            frames: sample.num_frames(),
            object_ids: sample.object_ids.clone(),
            seed: sample.seed,
            v_max: sample.v_max,
        },
    )?;
    for t in 0..sample.num_frames() {
        write_ppm(&dir.join("frames").join(frame_name(t + 1, "ppm")), &sample.frames[t])?;
        write_pgm(&dir.join("masks").join(frame_name(t + 1, "pgm")), &sample.masks[t])?;
        write_flo(&dir.join("flow").join(frame_name(t + 1, "flo")), &sample.flows[t])?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<VideoSample> {
    let meta = read_meta(dir)?;
    let mut frames = Vec::with_capacity(meta.frames);
    let mut masks = Vec::with_capacity(meta.frames);
    let mut flows = Vec::with_capacity(meta.frames);
    for t in 1..=meta.frames {
        let fp = dir.join("frames").join(frame_name(t, "ppm"));
        let img = read_ppm(&fp)?;
        let mp = dir.join("masks").join(frame_name(t, "pgm"));
        let mask = read_pgm(&mp)?;
        let lp = dir.join("flow").join(frame_name(t, "flo"));
        let flow = read_flo(&lp)?;
        let dims = [
            (img.height, img.width, &fp),
            (mask.height, mask.width, &mp),
            (flow.height, flow.width, &lp),
        ];
        for (h, w, p) in dims {
            if (h, w) != (meta.height, meta.width) {
                return Err(Error::format(
                    p,
                    format!("dimensions {h}x{w} differ from meta {}x{}", meta.height, meta.width),
                ));
            }
        }
        frames.push(img);
        masks.push(mask);
        flows.push(flow);
    }
    let flow_images = flows.iter().map(|f| encode_flow(f, meta.v_max)).collect();
    Ok(VideoSample {
        height: meta.height,
        width: meta.width,
        frames,
        flows,
        flow_images,
        masks,
        object_ids: meta.object_ids,
        seed: meta.seed,
        v_max: meta.v_max,
    })
}

/// Sequence directories under `root` (those containing `meta.json`), sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_flo_payload() {
        let flow = FlowField {
            height: 1,
            width: 1,
            data: vec![1.5, -2.25],
        };
        let bytes = encode_flo(&flow);
        assert_eq!(bytes.len(), 12 + 8);
        assert_eq!(&bytes[..4], &202021.25f32.to_le_bytes());
        assert_eq!(decode_flo(&bytes, Path::new("x.flo")).unwrap(), flow);
    }

    #[test]
    fn label_mask_round_trips() {
        let m = LabelMap::from_data(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&m), Path::new("m.pgm")).unwrap(), m);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\x03";
        let m = decode_pgm(bytes, Path::new("c.pgm")).unwrap();
        assert_eq!(m.data, vec![0, 3]);
    }

    #[test]
    fn bad_magic_names_the_file() {
        let err = decode_flo(&[0u8; 12], Path::new("bad/000002.flo")).unwrap_err();
        assert!(err.to_string().contains("bad/000002.flo"));
        let err = decode_ppm(b"P5\n1 1\n255\n\0", Path::new("f.ppm")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0", Path::new("t.ppm")).is_err());
    }
}
