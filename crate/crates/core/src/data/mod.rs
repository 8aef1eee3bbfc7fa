//! Dataset ingestion: CSV manifests over PGM images, plus a synthetic
//! multi-label benchmark with exact ground-truth regions.
//!
//! The synthetic task places up to two bright shapes (a filled disc for
//! class 0, a filled square for class 1) on a noisy background. Because the
//! generator knows every shape footprint, explanation quality is measurable
//! against pixel-exact ground truth.

pub mod pnm;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Brightness of synthetic shapes; the background stays below
/// [`NOISE_AMPLITUDE`].
pub const SHAPE_BRIGHTNESS: f64 = 0.8;
pub const NOISE_AMPLITUDE: f64 = 0.2;

/// One labelled image, optionally with per-class ground-truth regions.
pub struct Sample {
    /// [c×h×w], values in [0,1].
    pub image: Tensor,
    /// Multi-hot class labels.
    pub labels: Vec<f64>,
    /// Per class: exact binary footprint (row-major h×w) for positives of
    /// synthetic data, `None` otherwise.
    pub gt_regions: Vec<Option<Vec<bool>>>,
}

/// Validated index of an on-disk dataset.
#[derive(Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    /// (image filename, multi-hot labels) in file order.
    pub entries: Vec<(String, Vec<f64>)>,
}

/// Parses and validates a CSV manifest with header `image,<class_1>,...`.
/// Every referenced file must exist; label cells must be exactly 0 or 1.
pub fn load_manifest(csv_path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("manifest header: {e}")))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("image") {
        return Err(Error::Parse(
            "manifest header must start with an `image` column".into(),
        ));
    }
    let class_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if class_names.is_empty() {
        return Err(Error::Parse("manifest declares no class columns".into()));
    }
    let root = csv_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut entries = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 2; // 1-based, after the header line
        let record = record.map_err(|e| Error::Parse(format!("manifest row {row}: {e}")))?;
        if record.len() != class_names.len() + 1 {
            return Err(Error::Parse(format!(
                "manifest row {row}: expected {} cells, found {}",
                class_names.len() + 1,
                record.len()
            )));
        }
        let file = record.get(0).unwrap_or("").to_string();
        if file.is_empty() {
            return Err(Error::Parse(format!("manifest row {row}: empty image cell")));
        }
        let mut labels = Vec::with_capacity(class_names.len());
        for (ci, cell) in record.iter().skip(1).enumerate() {
            match cell {
                "0" => labels.push(0.0),
                "1" => labels.push(1.0),
                other => {
                    return Err(Error::Parse(format!(
                        "manifest row {row}, column {}: label cell must be 0 or 1, got {other:?}",
                        class_names[ci]
                    )))
                }
            }
        }
        if !root.join(&file).is_file() {
            return Err(Error::Ingestion(format!(
                "manifest row {row}: file {file:?} not found under {}",
                root.display()
            )));
        }
        entries.push((file, labels));
    }
    Ok(DatasetManifest {
        root,
        class_names,
        entries,
    })
}

impl DatasetManifest {
    /// Loads every listed image into a [`Sample`] (no ground-truth regions).
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|(file, labels)| {
                let image = read_image_pgm(&self.root.join(file))?;
                Ok(Sample {
                    image,
                    labels: labels.clone(),
                    gt_regions: vec![None; labels.len()],
                })
            })
            .collect()
    }
}

/// Reads a binary PGM into a [1×h×w] tensor scaled to [0,1].
pub fn read_image_pgm(path: &Path) -> Result<Tensor> {
    let img = pnm::read_pgm(path)?;
    Tensor::from_vec(vec![1, img.height, img.width], img.pixels)
}

/// Class names of the synthetic benchmark.
pub fn synthetic_class_names() -> Vec<String> {
    vec!["disc".into(), "square".into()]
}

/// Generates the synthetic benchmark: each sample carries a disc and/or a
/// square with probability one half each, over uniform background noise.
/// Pure function of (n, size, seed).
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n < 1 {
        return Err(Error::Contract("generate_synthetic: n must be >= 1".into()));
    }
    if size < 16 {
        return Err(Error::Contract(format!(
            "generate_synthetic: size must be >= 16, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut image: Vec<f64> = (0..size * size)
            .map(|_| rng.random_range(0.0..NOISE_AMPLITUDE))
            .collect();
        let has_disc = rng.random_bool(0.5);
        let has_square = rng.random_bool(0.5);
        let mut gt_regions: Vec<Option<Vec<bool>>> = vec![None, None];

        if has_disc {
            let radius = rng.random_range(size as f64 / 10.0..size as f64 / 5.0);
            let margin = radius.ceil() + 1.0;
            let cy = rng.random_range(margin..size as f64 - margin);
            let cx = rng.random_range(margin..size as f64 - margin);
            let mut footprint = vec![false; size * size];
            for y in 0..size {
                for x in 0..size {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if dy * dy + dx * dx <= radius * radius {
                        footprint[y * size + x] = true;
                        image[y * size + x] = SHAPE_BRIGHTNESS;
                    }
                }
            }
            gt_regions[0] = Some(footprint);
        }
        if has_square {
            let half = rng.random_range(size as f64 / 12.0..size as f64 / 6.0);
            let margin = half.ceil() + 1.0;
            let cy = rng.random_range(margin..size as f64 - margin);
            let cx = rng.random_range(margin..size as f64 - margin);
            let mut footprint = vec![false; size * size];
            for y in 0..size {
                for x in 0..size {
                    if (y as f64 - cy).abs() <= half && (x as f64 - cx).abs() <= half {
                        footprint[y * size + x] = true;
                        image[y * size + x] = SHAPE_BRIGHTNESS;
                    }
                }
            }
            gt_regions[1] = Some(footprint);
        }

        samples.push(Sample {
            image: Tensor::from_vec(vec![1, size, size], image)?,
            labels: vec![has_disc as u8 as f64, has_square as u8 as f64],
            gt_regions,
        });
    }
    Ok(samples)
}

/// Writes samples to `dir` as 16-bit PGM files plus a `manifest.csv` in the
/// same layout [`load_manifest`] ingests. Ground-truth regions are not part
/// of the on-disk format.
pub fn export_dataset(samples: &[Sample], dir: &Path, class_names: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("image");
    for name in class_names {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for (i, sample) in samples.iter().enumerate() {
        let shape = sample.image.shape();
        let file = format!("sample_{i:05}.pgm");
        pnm::write_pgm16(&dir.join(&file), shape[1], shape[2], &sample.image.to_vec())?;
        csv.push_str(&file);
        for &l in &sample.labels {
            csv.push(',');
            csv.push(if l == 1.0 { '1' } else { '0' });
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("manifest.csv"), csv)?;
    Ok(())
}

/// Batches over a seed-determined permutation; the last partial batch is
/// kept. Every element appears exactly once per pass.
pub struct BatchIterator<'a, T> {
    samples: &'a [T],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iterator<T>(
    samples: &[T],
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<BatchIterator<'_, T>> {
    if samples.is_empty() {
        return Err(Error::Contract("batch_iterator: empty dataset".into()));
    }
    if batch_size < 1 {
        return Err(Error::Contract("batch_iterator: batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    Ok(BatchIterator {
        samples,
        order,
        batch_size,
        pos: 0,
    })
}

impl<'a, T> Iterator for BatchIterator<'a, T> {
    type Item = Vec<&'a T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.samples[i])
            .collect();
        self.pos = end;
        Some(batch)
    }
}

impl<T> BatchIterator<'_, T> {
    /// The permutation driving this pass.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_row_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.pgm", "b.pgm", "c.pgm"] {
            pnm::write_pgm8(&dir.path().join(f), 2, 2, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        }
        let csv = "image,cat,dog\na.pgm,1,0\nb.pgm,0,1\nc.pgm,1,1\n";
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, csv).unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.class_names, vec!["cat", "dog"]);
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(manifest.entries[2].1, vec![1.0, 1.0]);
        let samples = manifest.load_samples().unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].image.shape(), vec![1, 2, 2]);
    }

    #[test]
    fn column_count_mismatch_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "image,cat,dog\na.pgm,1\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn non_binary_cell_is_a_parse_error_naming_the_row() {
        let dir = tempfile::tempdir().unwrap();
        pnm::write_pgm8(&dir.path().join("a.pgm"), 1, 1, &[0.0]).unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "image,cat\na.pgm,2\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn missing_file_is_an_ingestion_error_naming_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "image,cat\nmissing.pgm,1\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Ingestion(msg)) => {
                assert!(msg.contains("row 2") && msg.contains("missing.pgm"), "{msg}")
            }
            Err(other) => panic!("expected ingestion error, got {other:?}"),
            Ok(_) => panic!("expected ingestion error, load succeeded"),
        }
    }

    #[test]
    fn fourteen_class_header_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        pnm::write_pgm8(&dir.path().join("x.pgm"), 1, 1, &[0.5]).unwrap();
        let names = "Atelectasis,Cardiomegaly,Effusion,Infiltration,Mass,Nodule,Pneumonia,\
                     Pneumothorax,Consolidation,Edema,Emphysema,Fibrosis,Pleural Thickening,Hernia";
        let csv = format!("image,{names}\nx.pgm,1,0,0,0,0,0,0,0,0,0,0,0,0,1\n");
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, csv).unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.class_names.len(), 14);
        assert_eq!(manifest.entries[0].1.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn synthetic_is_deterministic_in_seed() {
        let a = generate_synthetic(5, 32, 42).unwrap();
        let b = generate_synthetic(5, 32, 42).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.image.to_vec(), sb.image.to_vec());
            assert_eq!(sa.labels, sb.labels);
        }
        let c = generate_synthetic(5, 32, 43).unwrap();
        assert_ne!(a[0].image.to_vec(), c[0].image.to_vec());
    }

    #[test]
    fn empty_sample_has_no_labels_or_regions() {
        let samples = generate_synthetic(64, 32, 7).unwrap();
        let empty = samples
            .iter()
            .find(|s| s.labels.iter().all(|&l| l == 0.0))
            .expect("some sample should be shape-free");
        assert!(empty.gt_regions.iter().all(Option::is_none));
        // Background stays strictly below the shape brightness.
        assert!(empty.image.to_vec().iter().all(|&v| v < NOISE_AMPLITUDE));
    }

    #[test]
    fn class_prevalence_is_near_one_half() {
        let samples = generate_synthetic(1000, 32, 0).unwrap();
        for class in 0..2 {
            let count: f64 = samples.iter().map(|s| s.labels[class]).sum();
            let prevalence = count / 1000.0;
            assert!(
                (prevalence - 0.5).abs() <= 0.1,
                "class {class}: prevalence {prevalence}"
            );
        }
    }

    #[test]
    fn images_stay_in_unit_range_and_regions_match_positives() {
        let samples = generate_synthetic(50, 24, 3).unwrap();
        for s in &samples {
            assert!(s.image.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (ci, region) in s.gt_regions.iter().enumerate() {
                assert_eq!(region.is_some(), s.labels[ci] == 1.0);
                if let Some(r) = region {
                    assert!(r.iter().any(|&b| b), "positive class with empty footprint");
                }
            }
        }
    }

    #[test]
    fn batches_are_four_four_two() {
        let data: Vec<u32> = (0..10).collect();
        let sizes: Vec<usize> = batch_iterator(&data, 4, 0)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn shuffle_seed_controls_the_order() {
        let data: Vec<u32> = (0..16).collect();
        let order = |seed| batch_iterator(&data, 16, seed).unwrap().order().to_vec();
        assert_eq!(order(5), order(5));
        assert_ne!(order(5), order(6));
    }

    #[test]
    fn batches_cover_the_dataset_exactly_once() {
        let data: Vec<u32> = (0..23).collect();
        let mut seen: Vec<u32> = batch_iterator(&data, 5, 9)
            .unwrap()
            .flatten()
            .copied()
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, data);
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let data: Vec<u32> = Vec::new();
        assert!(matches!(
            batch_iterator(&data, 4, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn export_then_load_round_trips_labels_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(6, 24, 11).unwrap();
        export_dataset(&samples, dir.path(), &synthetic_class_names()).unwrap();
        let manifest = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.entries.len(), 6);
        let loaded = manifest.load_samples().unwrap();
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.labels, back.labels);
            assert_eq!(orig.image.shape(), back.image.shape());
            // 16-bit quantization keeps pixels within half a step.
            for (a, b) in orig.image.to_vec().iter().zip(back.image.to_vec()) {
                assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
    }
}
