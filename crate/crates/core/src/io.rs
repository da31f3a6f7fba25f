//! Checkpoints and on-disk datasets.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "DPSS" | version u16 | meta_len u32 | meta (JSON) | count u32 |
//!   count × (name_len u16 | name | dtype u8 | rank u8 | dims u32×rank | payload) |
//! crc32 u32 over every preceding byte
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dapass_tensor::{Element, Tensor};
use image::{GrayImage, ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::panosynth::{Domain, LabelMap, LabelStore, Sample, Split, UnlabeledImage};
use crate::params::{ParamSnapshot, ParamStore};
use crate::segnet::{ModelConfig, SegModel};

pub const MAGIC: &[u8; 4] = b"DPSS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tag: String,
    pub iteration: u64,
    pub model: ModelConfig,
    /// Effective run configuration, as TOML.
    #[serde(default)]
    pub config: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub snapshot: ParamSnapshot<T>,
}

impl<T: Element> Checkpoint<T> {
    pub fn from_model(model: &SegModel<T>, tag: &str, iteration: u64, config: Option<String>) -> Self {
        Self {
            meta: CheckpointMeta {
                tag: tag.to_string(),
                iteration,
                model: model.config().clone(),
                config,
            },
            snapshot: model.snapshot(tag, iteration),
        }
    }

    /// Rebuilds the model described by the metadata.
    pub fn into_model(self) -> Result<SegModel<T>> {
        let mut m = SegModel::new(self.meta.model.clone(), 0)?;
        m.restore(&self.snapshot)?;
        Ok(m)
    }
}

fn encode_value<T: Element>(v: T, out: &mut Vec<u8>) {
    match T::DTYPE {
        0 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

pub fn encode_checkpoint<T: Element>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let params = &ckpt.snapshot.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            encode_value(v, &mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<T: Element>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated {what} at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::Format(format!("file of {} bytes is too short", bytes.len())));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic at offset 0".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version} at offset 4")));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Crc {
            offset: body_end,
            stored,
            computed,
        });
    }
    r.buf = &bytes[..body_end];
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("non-UTF-8 tensor name at offset {at}")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor `{name}` at offset {at} has dtype {dtype}, expected {} ({})",
                T::DTYPE,
                T::NAME
            )));
        }
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let width = if dtype == 0 { 4 } else { 8 };
        let payload = r.take(n * width, "payload")?;
        let data: Vec<T> = payload
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::cast(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        if params.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}` at offset {at}")));
        }
        params.push(name, Tensor::new(dims, data)?);
    }
    if r.pos != body_end {
        return Err(Error::Format(format!("{} trailing bytes at offset {}", body_end - r.pos, r.pos)));
    }
    Ok(Checkpoint {
        snapshot: ParamSnapshot {
            tag: meta.tag.clone(),
            iteration: meta.iteration,
            params,
        },
        meta,
    })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).at(path)?;
    decode_checkpoint(&bytes)
}

pub const MANIFEST: &str = "manifest.tsv";

/// Directory name for one domain/split, e.g. `target-val`.
pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(format!("{domain}-{split}"))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub label: String,
    pub domain: Domain,
    pub split: Split,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes 8-bit PPM images, PGM labels and the manifest into `dir`.
pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).at(dir)?;
    fs::create_dir_all(dir.join("labels")).at(dir)?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let (_, _, h, w) = s.image.dims4()?;
        let hw = h * w;
        let d = s.image.data();
        let rgb: Vec<u8> = (0..hw)
            .flat_map(|i| [to_u8(d[i]), to_u8(d[hw + i]), to_u8(d[2 * hw + i])])
            .collect();
        RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("buffer sized from the image")
            .save_with_format(dir.join(format!("images/{}.ppm", s.id)), ImageFormat::Pnm)?;
        GrayImage::from_raw(s.label.w as u32, s.label.h as u32, s.label.data.clone())
            .expect("buffer sized from the label map")
            .save_with_format(dir.join(format!("labels/{}.pgm", s.id)), ImageFormat::Pnm)?;
        Ok(())
    })?;
    let path = dir.join(MANIFEST);
    let mut w = BufWriter::new(File::create(&path).at(&path)?);
    for s in samples {
        writeln!(
            w,
            "{}\timages/{}.ppm\tlabels/{}.pgm\t{}\t{}",
            s.id, s.id, s.id, s.domain, s.split
        )
        .at(&path)?;
    }
    w.flush().at(&path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let reader = BufReader::new(File::open(&path).at(&path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.at(&path)?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format(format!("{}:{}: malformed manifest line", path.display(), n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let domain = match f[3] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            _ => return Err(bad()),
        };
        let split = match f[4] {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => return Err(bad()),
        };
        out.push(ManifestEntry {
            id: f[0].into(),
            image: f[1].into(),
            label: f[2].into(),
            domain,
            split,
        });
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = raw[3 * i + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([1, 3, h, w], data)?)
}

fn read_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw())
}

/// Labelled samples (source data or evaluation).
pub fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_par_iter()
        .map(|e| {
            Ok(Sample {
                image: read_image(&dir.join(&e.image))?,
                label: read_label(&dir.join(&e.label))?,
                id: e.id,
                domain: e.domain,
                split: e.split,
            })
        })
        .collect()
}

/// Images only; label files are never opened.
pub fn read_unlabeled(dir: &Path) -> Result<Vec<UnlabeledImage>> {
    read_manifest(dir)?
        .into_par_iter()
        .map(|e| {
            Ok(UnlabeledImage {
                image: read_image(&dir.join(&e.image))?,
                id: e.id,
            })
        })
        .collect()
}

/// Ground truth of a split, behind the instrumented store.
pub fn read_label_store(dir: &Path) -> Result<LabelStore> {
    let labels = read_manifest(dir)?
        .into_par_iter()
        .map(|e| Ok((e.id, read_label(&dir.join(&e.label))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelStore::new(labels))
}

/// Display colours for label maps; ignore pixels are black.
const VIS_PALETTE: [[u8; 3]; 8] = [
    [230, 230, 200],
    [220, 60, 40],
    [140, 90, 40],
    [100, 100, 115],
    [60, 150, 80],
    [200, 160, 60],
    [150, 170, 210],
    [40, 110, 200],
];

/// Prediction (left) and ground truth (right) as one colour-coded PPM.
pub fn write_comparison(path: &Path, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    let (h, w) = (pred.h, pred.w);
    let mut img = RgbImage::new((2 * w) as u32, h as u32);
    for (offset, map) in [(0, pred), (w, gt)] {
        for y in 0..h {
            for x in 0..w {
                let c = VIS_PALETTE.get(map.at(y, x) as usize).copied().unwrap_or([0, 0, 0]);
                img.put_pixel((offset + x) as u32, y as u32, image::Rgb(c));
            }
        }
    }
    img.save_with_format(path, ImageFormat::Pnm)?;
    Ok(())
}
