//! Frame annotations, strict curation, batching, the on-disk dataset
//! layout and a synthetic generator whose labels are learnable from the
//! pixels.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <dir>/annotations.csv          frame_id,valence,arousal,expression,AU1,...,AU26
//! <dir>/images/<frame_id>.png    8-bit RGB (binary .ppm also accepted)
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{N_AU, N_EXPR};
use crate::tensor::Tensor;

pub const AU_NAMES: [&str; N_AU] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

pub const INVALID_VA: f64 = -5.0;
pub const INVALID_EXPR: i64 = -1;
pub const INVALID_AU: i64 = -1;

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const IMAGES_DIR: &str = "images";

fn header() -> Vec<&'static str> {
    let mut h = vec!["frame_id", "valence", "arousal", "expression"];
    h.extend(AU_NAMES);
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame_id: String,
    pub valence: f64,
    pub arousal: f64,
    pub expression: i64,
    /// Ordered as [`AU_NAMES`].
    pub au: [i64; N_AU],
}

/// Reads the annotation CSV. Only types are checked here; use [`curate`]
/// to drop invalid frames.
pub fn parse_annotations(reader: impl Read) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let expected = header();
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), found.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse { line, message };
        if row.len() != expected.len() {
            return Err(bad(format!("expected {} fields, found {}", expected.len(), row.len())));
        }
        let float = |i: usize| {
            row[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("{}: {:?}: {e}", expected[i], &row[i])))
        };
        let int = |i: usize| {
            row[i]
                .parse::<i64>()
                .map_err(|e| bad(format!("{}: {:?}: {e}", expected[i], &row[i])))
        };
        let mut au = [0i64; N_AU];
        for (j, a) in au.iter_mut().enumerate() {
            *a = int(4 + j)?;
        }
        records.push(AnnotationRecord {
            frame_id: row[0].to_string(),
            valence: float(1)?,
            arousal: float(2)?,
            expression: int(3)?,
            au,
        });
    }
    Ok(records)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(std::fs::File::open(path)?)
}

pub fn write_annotations(records: &[AnnotationRecord], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header())?;
    for r in records {
        let mut row = vec![
            r.frame_id.clone(),
            r.valence.to_string(),
            r.arousal.to_string(),
            r.expression.to_string(),
        ];
        row.extend(r.au.iter().map(i64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Accepted valence/arousal interval (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationRules {
    pub va_min: f64,
    pub va_max: f64,
}

impl Default for CurationRules {
    fn default() -> Self {
        CurationRules {
            va_min: -1.0,
            va_max: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    InvalidVa,
    InvalidExpr,
    InvalidAu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub invalid_va: usize,
    pub invalid_expr: usize,
    pub invalid_au: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub total_in: usize,
    pub kept: usize,
    pub dropped: usize,
    pub dropped_by_reason: DropCounts,
}

/// First failing check in the order valence/arousal, expression, AUs.
pub fn drop_reason(r: &AnnotationRecord, rules: &CurationRules) -> Option<DropReason> {
    let va_ok = |v: f64| v != INVALID_VA && v >= rules.va_min && v <= rules.va_max;
    if !va_ok(r.valence) || !va_ok(r.arousal) {
        return Some(DropReason::InvalidVa);
    }
    if r.expression == INVALID_EXPR || !(0..N_EXPR as i64).contains(&r.expression) {
        return Some(DropReason::InvalidExpr);
    }
    if r.au.iter().any(|&a| a == INVALID_AU || !(a == 0 || a == 1)) {
        return Some(DropReason::InvalidAu);
    }
    None
}

/// Drops every frame with any out-of-range or invalid-marker field.
pub fn curate(records: &[AnnotationRecord], rules: &CurationRules) -> (Vec<AnnotationRecord>, CurationReport) {
    let mut report = CurationReport {
        total_in: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for r in records {
        match drop_reason(r, rules) {
            None => kept.push(r.clone()),
            Some(reason) => {
                report.dropped += 1;
                let c = &mut report.dropped_by_reason;
                match reason {
                    DropReason::InvalidVa => c.invalid_va += 1,
                    DropReason::InvalidExpr => c.invalid_expr += 1,
                    DropReason::InvalidAu => c.invalid_au += 1,
                }
            }
        }
    }
    report.kept = kept.len();
    (kept, report)
}

/// One curated frame with its `[3, H, W]` image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub record: AnnotationRecord,
}

/// Synthetic frames. Pixels encode the labels on a 4×4 grid of cells:
/// the red level tracks valence, green marks the expression cell in the
/// top half and tracks arousal in the bottom half, blue marks active AUs
/// in the first twelve cells. Pixels are 8-bit quantized.
pub fn generate_synthetic(n: usize, seed: u64, image_size: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::contract("synthetic dataset needs n >= 1"));
    }
    if image_size < 4 {
        return Err(Error::contract("synthetic images need at least 4x4 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expr: Vec<usize> = (0..n).map(|i| i % N_EXPR).collect();
    expr.shuffle(&mut rng);
    let positives = (n / 2).max(1);
    let au_cols: Vec<Vec<i64>> = (0..N_AU)
        .map(|_| {
            let mut col: Vec<i64> = (0..n).map(|i| i64::from(i < positives)).collect();
            col.shuffle(&mut rng);
            col
        })
        .collect();

    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut samples = Vec::with_capacity(n);
    for (i, &e) in expr.iter().enumerate() {
        let valence = (rng.gen_range(-0.9..0.9f64) * 1e4).round() / 1e4;
        let arousal = (rng.gen_range(-0.9..0.9f64) * 1e4).round() / 1e4;
        let mut au = [0i64; N_AU];
        for (j, a) in au.iter_mut().enumerate() {
            *a = au_cols[j][i];
        }
        let plane = image_size * image_size;
        let mut pixels = vec![0u8; 3 * plane];
        for y in 0..image_size {
            for x in 0..image_size {
                let cell = (y * 4 / image_size) * 4 + x * 4 / image_size;
                let r = 0.5 + 0.4 * valence;
                let g = if cell < N_EXPR {
                    if cell == e {
                        0.9
                    } else {
                        0.1
                    }
                } else {
                    0.5 + 0.4 * arousal
                };
                let b = if cell < N_AU {
                    if au[cell] == 1 {
                        0.9
                    } else {
                        0.1
                    }
                } else {
                    0.5
                };
                for (ch, v) in [r, g, b].into_iter().enumerate() {
                    let noise = rng.gen_range(-0.03..0.03);
                    pixels[ch * plane + y * image_size + x] = quantize(v + noise);
                }
            }
        }
        let image = Tensor::from_vec(
            &[3, image_size, image_size],
            pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )?;
        samples.push(Sample {
            image,
            record: AnnotationRecord {
                frame_id: format!("synth_{i:05}"),
                valence,
                arousal,
                expression: e as i64,
                au,
            },
        });
    }
    Ok(samples)
}

/// Per-batch supervision targets.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    /// `[B, 2]`
    pub va: Tensor,
    pub expr: Vec<usize>,
    /// `[B, 12]`, binary.
    pub au: Tensor,
}

impl BatchTargets {
    pub fn len(&self) -> usize {
        self.expr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expr.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`
    pub images: Tensor,
    pub targets: BatchTargets,
}

/// Stacks samples into one batch. Records must be curated.
pub fn collate(samples: &[&Sample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("cannot collate zero samples"))?;
    let img_shape = first.image.shape().to_vec();
    let mut images = Vec::with_capacity(samples.len() * first.image.numel());
    let mut va = Vec::with_capacity(samples.len() * 2);
    let mut expr = Vec::with_capacity(samples.len());
    let mut au = Vec::with_capacity(samples.len() * N_AU);
    for s in samples {
        if s.image.shape() != img_shape.as_slice() {
            return Err(Error::Data(format!(
                "image {} has shape {:?}, expected {img_shape:?}",
                s.record.frame_id,
                s.image.shape()
            )));
        }
        if drop_reason(&s.record, &CurationRules::default()).is_some() {
            return Err(Error::Data(format!("frame {} is not curated", s.record.frame_id)));
        }
        images.extend_from_slice(s.image.data());
        va.extend([s.record.valence, s.record.arousal]);
        expr.push(s.record.expression as usize);
        au.extend(s.record.au.iter().map(|&a| a as f64));
    }
    let b = samples.len();
    let mut shape = vec![b];
    shape.extend(&img_shape);
    Ok(Batch {
        images: Tensor::from_vec(&shape, images)?,
        targets: BatchTargets {
            va: Tensor::from_vec(&[b, 2], va)?,
            expr,
            au: Tensor::from_vec(&[b, N_AU], au)?,
        },
    })
}

/// Splits `samples` into batches of `batch_size`, optionally shuffled by
/// `seed`. A trailing batch smaller than 2 is dropped.
pub fn batches(samples: &[Sample], batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::contract("cannot batch an empty dataset"));
    }
    if batch_size < 2 {
        return Err(Error::contract("batch size must be at least 2"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| collate(&c.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}

fn image_path(dir: &Path, frame_id: &str) -> Option<PathBuf> {
    ["png", "ppm"]
        .iter()
        .map(|ext| dir.join(IMAGES_DIR).join(format!("{frame_id}.{ext}")))
        .find(|p| p.exists())
}

/// Loads an RGB image as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

/// Writes `annotations.csv` and one PNG per sample under `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let records: Vec<AnnotationRecord> = samples.iter().map(|s| s.record.clone()).collect();
    write_annotations(&records, std::fs::File::create(dir.join(ANNOTATIONS_FILE))?)?;
    for s in samples {
        save_image(
            &dir.join(IMAGES_DIR).join(format!("{}.png", s.record.frame_id)),
            &s.image,
        )?;
    }
    Ok(())
}

/// Reads a dataset directory, curating the annotations on the way in.
pub fn load_dataset(dir: &Path, rules: &CurationRules) -> Result<(Vec<Sample>, CurationReport)> {
    let records = read_annotations(dir.join(ANNOTATIONS_FILE))?;
    let (kept, report) = curate(&records, rules);
    let samples = kept
        .into_iter()
        .map(|record| {
            let path = image_path(dir, &record.frame_id)
                .ok_or_else(|| Error::Data(format!("no image for frame {}", record.frame_id)))?;
            Ok(Sample {
                image: load_image(&path)?,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "frame_id,valence,arousal,expression,AU1,AU2,AU4,AU6,AU7,AU10,AU12,AU15,AU23,AU24,AU25,AU26\n";

    fn rec(v: f64, a: f64, e: i64, au: [i64; 12]) -> AnnotationRecord {
        AnnotationRecord {
            frame_id: "f".into(),
            valence: v,
            arousal: a,
            expression: e,
            au,
        }
    }

    #[test]
    fn parse_examples() {
        let csv = format!("{HEADER}a/0001,0.25,-0.5,3,0,1,0,0,1,0,0,0,0,1,1,0\n");
        let r = parse_annotations(csv.as_bytes()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].frame_id, "a/0001");
        assert_eq!(r[0].au[1], 1);

        let csv = format!("{HEADER}b,-5,0.1,2,0,0,0,0,0,0,0,0,0,0,0,0\n");
        let r = parse_annotations(csv.as_bytes()).unwrap();
        assert_eq!(r[0].valence, -5.0);

        let csv = format!("{HEADER}ok,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0\nc,0.1,0.1,2,0,0,0,0,0,0,0,0,0,0,0\n");
        match parse_annotations(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let csv = format!("{HEADER}c,zero,0.1,2,0,0,0,0,0,0,0,0,0,0,0,0\n");
        assert!(matches!(
            parse_annotations(csv.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_annotations("frame,valence\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn curate_examples() {
        let rules = CurationRules::default();
        let good = rec(0.2, -0.3, 4, [0, 1, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0]);
        assert_eq!(drop_reason(&good, &rules), None);
        let bad_a = rec(0.2, -5.0, 4, [0; 12]);
        assert_eq!(drop_reason(&bad_a, &rules), Some(DropReason::InvalidVa));
        let mut au = [0; 12];
        au[4] = -1; // AU7
        assert_eq!(drop_reason(&rec(0.2, 0.3, 1, au), &rules), Some(DropReason::InvalidAu));
        assert_eq!(
            drop_reason(&rec(0.2, 0.3, -1, [0; 12]), &rules),
            Some(DropReason::InvalidExpr)
        );
        assert_eq!(
            drop_reason(&rec(0.2, 0.3, 8, [0; 12]), &rules),
            Some(DropReason::InvalidExpr)
        );
        assert_eq!(
            drop_reason(&rec(1.2, 0.3, 0, [0; 12]), &rules),
            Some(DropReason::InvalidVa)
        );
        assert_eq!(
            drop_reason(&rec(f64::NAN, 0.3, 0, [0; 12]), &rules),
            Some(DropReason::InvalidVa)
        );
        // first reason wins
        assert_eq!(
            drop_reason(&rec(-5.0, 0.3, -1, [-1; 12]), &rules),
            Some(DropReason::InvalidVa)
        );
        // wider range override
        let wide = CurationRules {
            va_min: -2.0,
            va_max: 2.0,
        };
        assert_eq!(drop_reason(&rec(1.2, 0.3, 0, [0; 12]), &wide), None);
    }

    #[test]
    fn curate_planted_fixture() {
        let mut records: Vec<AnnotationRecord> = (0..10)
            .map(|i| rec(0.1 * i as f64 - 0.5, 0.0, i % 8, [i % 2; 12]))
            .collect();
        records[2].valence = -5.0;
        records[5].expression = -1;
        records[7].au[11] = -1;
        let (kept, report) = curate(&records, &CurationRules::default());
        assert_eq!(kept.len(), 7);
        assert_eq!(report.total_in, 10);
        assert_eq!(report.kept, 7);
        assert_eq!(report.dropped, 3);
        assert_eq!(
            report.dropped_by_reason,
            DropCounts {
                invalid_va: 1,
                invalid_expr: 1,
                invalid_au: 1
            }
        );
    }

    #[test]
    fn synthetic_contract() {
        let a = generate_synthetic(64, 7, 32).unwrap();
        let b = generate_synthetic(64, 7, 32).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; 8];
        for s in &a {
            counts[s.record.expression as usize] += 1;
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(counts.iter().all(|&c| c >= 2), "{counts:?}");
        for j in 0..12 {
            let pos = a.iter().filter(|s| s.record.au[j] == 1).count();
            assert!(pos > 0 && pos < 64);
        }
        let records: Vec<_> = a.iter().map(|s| s.record.clone()).collect();
        let (kept, _) = curate(&records, &CurationRules::default());
        assert_eq!(kept.len(), 64);
        assert_ne!(a, generate_synthetic(64, 8, 32).unwrap());
    }

    #[test]
    fn batching() {
        let s = generate_synthetic(10, 1, 8).unwrap();
        let b = batches(&s, 4, 0, false).unwrap();
        assert_eq!(b.iter().map(|b| b.targets.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b[0].images.shape(), &[4, 3, 8, 8]);
        assert_eq!(&b[0].images.data()[..192], s[0].image.data());
        assert_eq!(b[1].targets.expr[0], s[4].record.expression as usize);

        let s9 = &s[..9];
        let b = batches(s9, 4, 0, false).unwrap();
        assert_eq!(b.iter().map(|b| b.targets.len()).collect::<Vec<_>>(), vec![4, 4]);

        let x = batches(&s, 4, 3, true).unwrap();
        let y = batches(&s, 4, 3, true).unwrap();
        assert_eq!(x, y);
        assert!(batches(&[], 4, 0, false).is_err());
        assert!(batches(&s, 1, 0, false).is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(6, 3, 16).unwrap();
        save_dataset(dir.path(), &s).unwrap();
        let (back, report) = load_dataset(dir.path(), &CurationRules::default()).unwrap();
        assert_eq!(report.kept, 6);
        assert_eq!(back, s);
    }
}
