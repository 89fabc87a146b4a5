//! Dataset records and the JSON-lines interchange format.
//!
//! A dataset directory holds one manifest per split (`train.jsonl`,
//! `val.jsonl`, `test.jsonl`), a `vocab.txt` (one word per line, line number
//! = index) and an `images/` directory of lossless 8-bit RGB PNGs. Manifest
//! records may reference an image by path or carry it inline as base64.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::language::{attribute_tags, generate_query, WORDS};
use super::render::render_scene_u8;
use super::scene::{generate_scene, GenConfig};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleMeta {
    pub query_length: usize,
    pub attribute_tags: Vec<String>,
    pub complexity_tier: u8,
}

/// One training/eval record with the image held in memory as 8-bit RGB.
#[derive(Clone, Debug)]
pub struct GroundingSample {
    pub id: String,
    /// (H, W, 3) with values 0..=255; divide by 255 for model input.
    pub image: Array3<u8>,
    pub tokens: Vec<String>,
    /// (x_min, y_min, width, height) in pixels.
    pub bbox: [f64; 4],
    pub meta: SampleMeta,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
    tokens: Vec<String>,
    bbox: [f64; 4],
    meta: SampleMeta,
}

fn encode_png(image: &Array3<u8>) -> Result<Vec<u8>> {
    let (h, w, _) = image.dim();
    let buf: Vec<u8> = image.iter().copied().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Image("raster buffer size mismatch".into()))?;
    let mut out = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut out),
        image::ImageFormat::Png,
    )?;
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<Array3<u8>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::Image(e.to_string()))
}

/// Write samples as a manifest plus PNG files (or inline base64 images when
/// `inline` is set). The manifest path's parent is the dataset root.
pub fn write_dataset(samples: &[GroundingSample], manifest_path: &Path, inline: bool) -> Result<()> {
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(root)?;
    let image_dir = root.join("images");
    if !inline {
        fs::create_dir_all(&image_dir)?;
    }
    let mut out = fs::File::create(manifest_path)?;
    for s in samples {
        let png = encode_png(&s.image)?;
        let record = if inline {
            ManifestRecord {
                id: s.id.clone(),
                image_path: None,
                image_b64: Some(base64::engine::general_purpose::STANDARD.encode(&png)),
                tokens: s.tokens.clone(),
                bbox: s.bbox,
                meta: s.meta.clone(),
            }
        } else {
            let rel = format!("images/{}.png", s.id);
            fs::write(root.join(&rel), &png)?;
            ManifestRecord {
                id: s.id.clone(),
                image_path: Some(rel),
                image_b64: None,
                tokens: s.tokens.clone(),
                bbox: s.bbox,
                meta: s.meta.clone(),
            }
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Integrity(format!("serialize record: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Read a manifest back into memory. Parse failures name the offending line.
pub fn read_dataset(manifest_path: &Path) -> Result<Vec<GroundingSample>> {
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let file = fs::File::open(manifest_path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        let image = match (&record.image_path, &record.image_b64) {
            (Some(p), None) => decode_png(&fs::read(root.join(p))?)?,
            (None, Some(b)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b)
                    .map_err(|e| Error::ManifestParse {
                        line: lineno + 1,
                        msg: format!("bad base64 image: {e}"),
                    })?;
                decode_png(&bytes)?
            }
            _ => {
                return Err(Error::ManifestParse {
                    line: lineno + 1,
                    msg: "record needs exactly one of image_path / image_b64".into(),
                })
            }
        };
        samples.push(GroundingSample {
            id: record.id,
            image,
            tokens: record.tokens,
            bbox: record.bbox,
            meta: record.meta,
        });
    }
    Ok(samples)
}

pub fn write_vocab(path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for w in WORDS {
        writeln!(out, "{w}")?;
    }
    Ok(())
}

/// Split-mix style hash for per-sample seeds.
fn mix_seed(base: u64, salt: u64, i: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(i.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub gen: GenConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train: 2000,
            val: 500,
            test: 1000,
            seed: 0,
            gen: GenConfig::default(),
        }
    }
}

/// Build one split in memory: tiers cycle 1..=4 so the mix is uniform; scenes
/// whose target has no unique description at any tier are skipped.
pub fn build_split(name: &str, count: usize, spec: &DatasetSpec) -> Result<Vec<GroundingSample>> {
    let salt: u64 = match name {
        "train" => 1,
        "val" => 2,
        "test" => 3,
        _ => 99,
    };
    let mut samples = Vec::with_capacity(count);
    let mut cursor = 0u64;
    for i in 0..count {
        let tier = (i % 4 + 1) as u8;
        loop {
            let seed = mix_seed(spec.seed, salt, cursor);
            cursor += 1;
            if cursor > (count as u64) * 100 {
                return Err(Error::Generation {
                    attempts: cursor as usize,
                });
            }
            let scene = match generate_scene(seed, &spec.gen) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_5151);
            let target = rng.random_range(0..scene.objects.len());
            let Ok((tokens, achieved)) = generate_query(&scene, target, tier, seed ^ 0xA0A0) else {
                continue; // ambiguous at every tier: skip the scene
            };
            let image = render_scene_u8(&scene);
            let bbox = scene.objects[target].bbox();
            let meta = SampleMeta {
                query_length: tokens.len(),
                attribute_tags: attribute_tags(&tokens),
                complexity_tier: achieved,
            };
            samples.push(GroundingSample {
                id: format!("{name}_{i:06}"),
                image,
                tokens,
                bbox,
                meta,
            });
            break;
        }
    }
    Ok(samples)
}

/// Generate train/val/test splits plus vocabulary under `out_dir`.
pub fn generate_dataset(out_dir: &Path, spec: &DatasetSpec) -> Result<Vec<(String, usize)>> {
    fs::create_dir_all(out_dir)?;
    let mut counts = Vec::new();
    for (name, count) in [
        ("train", spec.train),
        ("val", spec.val),
        ("test", spec.test),
    ] {
        if count == 0 {
            continue;
        }
        let samples = build_split(name, count, spec)?;
        write_dataset(&samples, &out_dir.join(format!("{name}.jsonl")), false)?;
        counts.push((name.to_string(), samples.len()));
    }
    write_vocab(&out_dir.join("vocab.txt"))?;
    fs::write(
        out_dir.join("dataset.json"),
        serde_json::to_string_pretty(spec).map_err(|e| Error::Integrity(e.to_string()))?,
    )?;
    Ok(counts)
}

pub fn manifest_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_fixture(n: usize) -> Vec<GroundingSample> {
        let spec = DatasetSpec {
            train: n,
            val: 0,
            test: 0,
            seed: 11,
            gen: GenConfig::default(),
        };
        build_split("train", n, &spec).unwrap()
    }

    #[test]
    fn write_then_read_roundtrips_records() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_fixture(20);
        let manifest = dir.path().join("train.jsonl");
        write_dataset(&samples, &manifest, false).unwrap();
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.meta, b.meta);
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn inline_base64_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_fixture(3);
        let manifest = dir.path().join("inline.jsonl");
        write_dataset(&samples, &manifest, true).unwrap();
        assert!(!dir.path().join("images").exists());
        let back = read_dataset(&manifest).unwrap();
        assert_eq!(back[0].image, samples[0].image);
    }

    #[test]
    fn missing_bbox_names_the_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("bad.jsonl");
        std::fs::write(
            &manifest,
            "{\"id\":\"x\",\"image_b64\":\"\",\"tokens\":[],\"meta\":{\"query_length\":0,\"attribute_tags\":[],\"complexity_tier\":1}}\n",
        )
        .unwrap();
        match read_dataset(&manifest) {
            Err(Error::ManifestParse { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("bbox"), "message {msg:?} should name bbox");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_bytes_are_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            train: 12,
            val: 0,
            test: 0,
            seed: 5,
            gen: GenConfig::default(),
        };
        for d in [&d1, &d2] {
            let s = build_split("train", 12, &spec).unwrap();
            write_dataset(&s, &d.path().join("train.jsonl"), false).unwrap();
        }
        let a = std::fs::read(d1.path().join("train.jsonl")).unwrap();
        let b = std::fs::read(d2.path().join("train.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tier_mix_and_bins_hold() {
        use super::super::language::tier_bin;
        let samples = sample_fixture(40);
        for s in &samples {
            let (lo, hi) = tier_bin(s.meta.complexity_tier);
            assert!(s.tokens.len() >= lo && s.tokens.len() <= hi);
            assert_eq!(s.meta.query_length, s.tokens.len());
            assert_eq!(s.meta.attribute_tags, attribute_tags(&s.tokens));
        }
    }
}
