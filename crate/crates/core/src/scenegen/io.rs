//! On-disk dataset layout:
//!
//! ```text
//! manifest.json
//! seq_0000/frame_0000.png   8-bit RGB
//! seq_0000/inst_0000.png    16-bit grayscale instance ids
//! seq_0000/flow_0000.flo    Middlebury flow, little-endian
//! seq_0000/meta.json        moving flags, spec echo, seed
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SceneSpec, VideoSample};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const FLO_MAGIC: f32 = 202021.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_sequences: usize,
    pub sequences: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub version: u32,
    pub moving_flags: Vec<bool>,
    pub spec: SceneSpec,
    pub seed: u64,
}

fn sequence_dir(idx: usize) -> String {
    format!("seq_{idx:04}")
}

pub fn write_dataset(samples: &[VideoSample], directory: impl AsRef<Path>) -> Result<Manifest> {
    let root = directory.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let name = sequence_dir(idx);
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for t in 0..sample.num_frames {
            let rgb: Vec<u8> = sample
                .frame(t)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            write_png(&dir.join(format!("frame_{t:04}.png")), sample.width, sample.height, png::ColorType::Rgb, png::BitDepth::Eight, &rgb)?;
            let inst: Vec<u8> = sample.instances(t).iter().flat_map(|id| id.to_be_bytes()).collect();
            write_png(&dir.join(format!("inst_{t:04}.png")), sample.width, sample.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &inst)?;
            write_flo(&dir.join(format!("flow_{t:04}.flo")), sample.width, sample.height, sample.flow_at(t))?;
        }
        let meta = SequenceMeta {
            version: DATASET_VERSION,
            moving_flags: sample.moving_flags.clone(),
            spec: sample.spec.clone(),
            seed: sample.spec.seed,
        };
        write_json(&dir.join("meta.json"), &meta)?;
        entries.push(DatasetEntry {
            dir: name,
            num_frames: sample.num_frames,
            height: sample.height,
            width: sample.width,
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        num_sequences: entries.len(),
        sequences: entries,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(directory: impl AsRef<Path>) -> Result<Vec<VideoSample>> {
    let root = directory.as_ref();
    let manifest_path = root.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::NoSequences(root.to_path_buf()));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::corrupt(
            &manifest_path,
            format!("dataset version {} (expected {DATASET_VERSION})", manifest.version),
        ));
    }
    if manifest.sequences.is_empty() {
        return Err(Error::NoSequences(root.to_path_buf()));
    }
    if manifest.num_sequences != manifest.sequences.len() {
        return Err(Error::corrupt(&manifest_path, "sequence count does not match entries"));
    }
    manifest.sequences.iter().map(|entry| read_sequence(root, entry)).collect()
}

fn read_sequence(root: &Path, entry: &DatasetEntry) -> Result<VideoSample> {
    let dir = root.join(&entry.dir);
    let meta_path = dir.join("meta.json");
    let meta: SequenceMeta = read_json(&meta_path)?;
    if meta.version != DATASET_VERSION {
        return Err(Error::corrupt(&meta_path, format!("sequence version {}", meta.version)));
    }
    let (h, w, frames_n) = (entry.height, entry.width, entry.num_frames);
    let mut frames = Vec::with_capacity(frames_n * h * w * 3);
    let mut gt_instance = Vec::with_capacity(frames_n * h * w);
    let mut flow = Vec::with_capacity(frames_n * h * w * 2);
    for t in 0..frames_n {
        let path = dir.join(format!("frame_{t:04}.png"));
        let rgb = read_png(&path, w, h, png::ColorType::Rgb, png::BitDepth::Eight)?;
        frames.extend(rgb.iter().map(|&b| b as f32 / 255.0));

        let path = dir.join(format!("inst_{t:04}.png"));
        let raw = read_png(&path, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
        let ids: Vec<u16> = raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        if let Some(&bad) = ids.iter().find(|&&id| id as usize > meta.moving_flags.len()) {
            return Err(Error::corrupt(&path, format!("instance id {bad} has no moving flag")));
        }
        gt_instance.extend(ids);

        flow.extend(read_flo(&dir.join(format!("flow_{t:04}.flo")), w, h)?);
    }
    Ok(VideoSample {
        height: h,
        width: w,
        num_frames: frames_n,
        frames,
        gt_instance,
        moving_flags: meta.moving_flags,
        flow,
        spec: meta.spec,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::corrupt(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))
}

pub(crate) fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| Error::corrupt(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::corrupt(path, e))?;
    writer.finish().map_err(|e| Error::corrupt(path, e))
}

pub(crate) fn read_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
) -> Result<Vec<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::corrupt(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::corrupt(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::corrupt(path, e))?;
    if info.width as usize != width || info.height as usize != height {
        return Err(Error::corrupt(
            path,
            format!("image is {}x{}, expected {width}x{height}", info.width, info.height),
        ));
    }
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::corrupt(
            path,
            format!("unexpected pixel format {:?}/{:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}

pub(crate) fn write_png_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, data)
}

pub(crate) fn read_png_gray8(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    read_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight)
}

pub(crate) fn write_png_rgb8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, data)
}

fn write_flo(path: &Path, width: usize, height: usize, flow: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + flow.len() * 4);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(width as i32).to_le_bytes());
    bytes.extend_from_slice(&(height as i32).to_le_bytes());
    for v in flow {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_flo(path: &PathBuf, width: usize, height: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::corrupt(path, "truncated header"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::corrupt(path, "bad .flo magic"));
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w as usize != width || h as usize != height {
        return Err(Error::corrupt(path, format!("flow is {w}x{h}, expected {width}x{height}")));
    }
    let expected = 12 + width * height * 8;
    if bytes.len() != expected {
        return Err(Error::corrupt(path, format!("{} bytes, expected {expected}", bytes.len())));
    }
    Ok(bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}
