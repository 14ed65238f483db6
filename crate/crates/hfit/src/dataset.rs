//! On-disk dataset layout:
//!
//! ```text
//! root/rgb/<id>.png      8-bit RGB
//! root/depth/<id>.png    16-bit grey, value v means relative depth v / 65535
//! root/labels/<id>.png   8-bit grey class ids, 255 = ignore
//! root/splits/<split>.txt
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use hfit_core::data::{replicate_depth, RgbdSample};
use hfit_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub triples: Vec<Triple>,
}

impl DatasetManifest {
    /// Read the split file and check that every referenced file exists.
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let list = root.join("splits").join(format!("{split}.txt"));
        let text = std::fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
        let mut triples = Vec::new();
        for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let t = Triple {
                id: id.to_string(),
                rgb: root.join("rgb").join(format!("{id}.png")),
                depth: root.join("depth").join(format!("{id}.png")),
                labels: root.join("labels").join(format!("{id}.png")),
            };
            for p in [&t.rgb, &t.depth, &t.labels] {
                if !p.is_file() {
                    return Err(Error::Sample {
                        id: id.to_string(),
                        message: format!("missing file {}", p.display()),
                    });
                }
            }
            triples.push(t);
        }
        Ok(Self {
            root: root.to_path_buf(),
            split: split.to_string(),
            triples,
        })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<RgbdSample> {
        load_triple(&self.triples[index])
    }

    /// Samples in split-file order.
    pub fn iter(&self) -> impl Iterator<Item = Result<RgbdSample>> + '_ {
        (0..self.len()).map(|i| self.load(i))
    }
}

/// Load every sample of a split.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<RgbdSample>> {
    DatasetManifest::open(root, split)?.iter().collect()
}

pub fn load_triple(t: &Triple) -> Result<RgbdSample> {
    let rgb = read_rgb(&t.rgb)?;
    let depth = read_depth(&t.depth)?;
    let labels = read_gray8(&t.labels)?;
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let mismatch = |what: &str, got: (usize, usize)| Error::Sample {
        id: t.id.clone(),
        message: format!("{what} is {}×{}, rgb is {h}×{w}", got.0, got.1),
    };
    if depth.shape()[..2] != [h, w] {
        return Err(mismatch("depth", (depth.shape()[0], depth.shape()[1])));
    }
    if labels.1 != (h, w) {
        return Err(mismatch("labels", labels.1));
    }
    Ok(RgbdSample::new(rgb, depth, labels.0)?)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let err = |m: String| Error::Decode {
        path: path.to_path_buf(),
        message: m,
    };
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(f))
        .read_info()
        .map_err(|e| err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| err("image too large".into()))?;
    let mut bytes = vec![0; size];
    let info = reader
        .next_frame(&mut bytes)
        .map_err(|e| err(e.to_string()))?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

fn expect(path: &Path, d: &Decoded, color: png::ColorType, depth: png::BitDepth) -> Result<()> {
    if d.color != color || d.depth != depth {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!(
                "expected {color:?} {depth:?}, found {:?} {:?}",
                d.color, d.depth
            ),
        });
    }
    Ok(())
}

/// 8-bit RGB as an `H × W × 3` raster in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let d = decode(path)?;
    expect(path, &d, png::ColorType::Rgb, png::BitDepth::Eight)?;
    let data = d.bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&[d.height, d.width, 3], data)?)
}

/// 16-bit grey depth, `v / 65535`, replicated to three channels.
pub fn read_depth(path: &Path) -> Result<Tensor> {
    let d = decode(path)?;
    expect(path, &d, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
    let data = d
        .bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok(replicate_depth(&Tensor::from_vec(
        &[d.height, d.width],
        data,
    )?)?)
}

/// 8-bit grey raster and its `(height, width)`.
pub fn read_gray8(path: &Path) -> Result<(Vec<u8>, (usize, usize))> {
    let d = decode(path)?;
    expect(path, &d, png::ColorType::Grayscale, png::BitDepth::Eight)?;
    Ok((d.bytes, (d.height, d.width)))
}

fn encode(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let io = |e: png::EncodingError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(bytes).map_err(io)?;
    writer.finish().map_err(io)
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(path: &Path, rgb: &Tensor) -> Result<()> {
    let s = rgb.shape();
    let bytes: Vec<u8> = rgb.data().iter().map(|&v| quantize8(v)).collect();
    encode(
        path,
        s[1],
        s[0],
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &bytes,
    )
}

/// Writes channel 0 of an `H × W × 3` depth raster as 16-bit grey.
pub fn write_depth(path: &Path, depth3: &Tensor) -> Result<()> {
    let s = depth3.shape();
    let bytes: Vec<u8> = depth3
        .data()
        .chunks(s[2])
        .flat_map(|px| ((px[0].clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    encode(
        path,
        s[1],
        s[0],
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn write_gray8(path: &Path, values: &[u8], height: usize, width: usize) -> Result<()> {
    encode(
        path,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        values,
    )
}

/// Write samples in the dataset layout and append their ids to the split file.
pub fn write_dataset(root: &Path, split: &str, samples: &[(String, RgbdSample)]) -> Result<()> {
    let mut ids = String::new();
    for (id, s) in samples {
        write_rgb(&root.join("rgb").join(format!("{id}.png")), &s.rgb)?;
        write_depth(&root.join("depth").join(format!("{id}.png")), &s.depth3)?;
        write_gray8(
            &root.join("labels").join(format!("{id}.png")),
            &s.labels,
            s.height(),
            s.width(),
        )?;
        ids.push_str(id);
        ids.push('\n');
    }
    let splits = root.join("splits");
    std::fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    let list = splits.join(format!("{split}.txt"));
    let mut existing = std::fs::read_to_string(&list).unwrap_or_default();
    existing.push_str(&ids);
    std::fs::write(&list, existing).map_err(|e| Error::io(&list, e))
}
