//! Dataset directory layout: `manifest.json`, `images/*.png` (8-bit RGB) and
//! `idmaps/*.png` (16-bit grayscale segment ids).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Category, Image, PanopticSegmentation, Segment, Vocabulary};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    vocabulary: Vec<Category>,
    images: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    image_id: String,
    image_file: String,
    idmap_file: String,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub path: PathBuf,
    pub num_images: usize,
    pub num_categories: usize,
}

pub fn write_dataset(scenes: &[(Image, PanopticSegmentation)], vocab: &Vocabulary, path: &Path) -> Result<DatasetSummary> {
    vocab.validate()?;
    for sub in ["images", "idmaps"] {
        let d = path.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(scenes.len());
    for (img, seg) in scenes {
        img.validate()?;
        seg.validate_against(vocab)?;
        if seg.image_id != img.image_id || seg.height != img.height || seg.width != img.width {
            return Err(Error::invalid(format!("annotation {} does not match image {}", seg.image_id, img.image_id)));
        }
        let image_file = format!("images/{}.png", img.image_id);
        let idmap_file = format!("idmaps/{}.png", img.image_id);
        let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        write_png_rgb8(&path.join(&image_file), img.width, img.height, &bytes)?;
        let mut ids = Vec::with_capacity(seg.id_map.len());
        for &v in &seg.id_map {
            ids.push(u16::try_from(v).map_err(|_| Error::invalid(format!("segment id {v} exceeds 16 bits")))?);
        }
        write_png_gray16(&path.join(&idmap_file), seg.width, seg.height, &ids)?;
        entries.push(ManifestEntry { image_id: img.image_id.clone(), image_file, idmap_file, segments: seg.segments.clone() });
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, vocabulary: vocab.categories().to_vec(), images: entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(path.join(MANIFEST_FILE), e))?;
    let mpath = path.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(DatasetSummary { path: path.to_path_buf(), num_images: scenes.len(), num_categories: vocab.len() })
}

pub fn read_dataset(path: &Path) -> Result<(Vec<(Image, PanopticSegmentation)>, Vocabulary)> {
    let mpath = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::parse(&mpath, format!("unsupported schema_version {}", manifest.schema_version)));
    }
    let vocab = Vocabulary::new(manifest.vocabulary)?;
    let mut out = Vec::with_capacity(manifest.images.len());
    for e in manifest.images {
        let ipath = path.join(&e.image_file);
        let (w, h, rgb) = read_png_rgb8(&ipath)?;
        let pixels = rgb.iter().map(|&b| b as f64 / 255.0).collect();
        let image = Image { image_id: e.image_id.clone(), height: h, width: w, pixels };
        image.validate()?;
        let mpath = path.join(&e.idmap_file);
        let (mw, mh, ids) = read_png_gray16(&mpath)?;
        if (mw, mh) != (w, h) {
            return Err(Error::parse(&mpath, format!("id map is {mw}x{mh} but image is {w}x{h}")));
        }
        let seg = PanopticSegmentation {
            image_id: e.image_id,
            height: h,
            width: w,
            id_map: ids.into_iter().map(u32::from).collect(),
            segments: e.segments,
        };
        seg.validate_against(&vocab)?;
        out.push((image, seg));
    }
    Ok((out, vocab))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    let file = create(path)?;
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| Error::parse(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::parse(path, e))?;
    writer.finish().map_err(|e| Error::parse(path, e))?;
    Ok(())
}

pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    encode(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, None, rgb)
}

pub fn write_png_gray16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, None, &bytes)
}

/// 8-bit indexed PNG; `palette` holds RGB triples.
pub fn write_png_indexed(path: &Path, width: usize, height: usize, indices: &[u8], palette: &[[u8; 3]]) -> Result<()> {
    assert_eq!(indices.len(), width * height);
    let pal: Vec<u8> = palette.iter().flatten().copied().collect();
    encode(path, width, height, png::ColorType::Indexed, png::BitDepth::Eight, Some(pal), indices)
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::parse(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::parse(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::parse(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_png_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::parse(path, format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn read_png_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::parse(path, format!("expected 16-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let vals = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((info.width as usize, info.height as usize, vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{demo_palette, generate_scenes, SceneConfig};

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::demo();
        let scenes = generate_scenes(&SceneConfig::new(24, 32, demo_palette(), 11), &vocab, 3).unwrap();
        let summary = write_dataset(&scenes, &vocab, dir.path()).unwrap();
        assert_eq!(summary.num_images, 3);
        let (back, v2) = read_dataset(dir.path()).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(back, scenes);
    }

    #[test]
    fn empty_dataset_has_full_category_table() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::new(vec![
            Category { id: 0, label: "a".into(), is_thing: true, is_seen: true },
            Category { id: 1, label: "b".into(), is_thing: true, is_seen: false },
            Category { id: 2, label: "c".into(), is_thing: false, is_seen: true },
            Category { id: 3, label: "d".into(), is_thing: false, is_seen: false },
            Category { id: 4, label: "e".into(), is_thing: true, is_seen: true },
        ])
        .unwrap();
        write_dataset(&[], &vocab, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        let ids: Vec<u64> = m["vocabulary"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(m["images"].as_array().unwrap().len(), 0);
        let (scenes, _) = read_dataset(dir.path()).unwrap();
        assert!(scenes.is_empty());
    }

    #[test]
    fn missing_image_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::demo();
        let scenes = generate_scenes(&SceneConfig::new(16, 16, demo_palette(), 3), &vocab, 2).unwrap();
        write_dataset(&scenes, &vocab, dir.path()).unwrap();
        let victim = format!("{}.png", scenes[1].0.image_id);
        fs::remove_file(dir.path().join("images").join(&victim)).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&victim), "{err}");
    }

    #[test]
    fn unknown_segment_in_id_map_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::demo();
        let scenes = generate_scenes(&SceneConfig::new(16, 16, demo_palette(), 3), &vocab, 1).unwrap();
        write_dataset(&scenes, &vocab, dir.path()).unwrap();
        let p = dir.path().join("idmaps").join(format!("{}.png", scenes[0].0.image_id));
        let mut ids = vec![1u16; 256];
        ids[17] = 999;
        write_png_gray16(&p, 16, 16, &ids).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("999"));
    }

    #[test]
    fn corrupt_manifest_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(MANIFEST_FILE), "{err}");
    }
}
