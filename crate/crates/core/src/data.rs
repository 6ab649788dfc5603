//! Dataset ingestion: IDX image files, box-filter downsampling, seeded
//! subsets, synthetic sparse binary distributions and empirical entropy.
//!
//! Pixels map to sites in row-major raster order.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_map::{embed_sample, EmbeddedSample};
use crate::mps::{Cursor, MAX_EXHAUSTIVE_SITES};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Raw 8-bit images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(count: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if count * height * width != pixels.len() {
            return Err(Error::Shape(format!(
                "{count} images of {height}x{width} need {} bytes, got {}",
                count * height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            pixels,
        })
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.height * self.width;
        &self.pixels[i * size..(i + 1) * size]
    }

    pub fn to_gray(&self) -> GrayImages {
        GrayImages {
            count: self.count,
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| f64::from(p)).collect(),
        }
    }
}

/// Real-valued images on the original `[0, 255]` intensity scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImages {
    pub fn image(&self, i: usize) -> &[f64] {
        let size = self.height * self.width;
        &self.pixels[i * size..(i + 1) * size]
    }
}

/// Parses an uncompressed IDX image container (magic `0x00000803`, then
/// big-endian count, rows, columns, then one byte per pixel).
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    let fail = |offset: u64, reason: String| Error::Format {
        what: "IDX image file",
        offset,
        reason,
    };
    if bytes.len() < 16 {
        return Err(fail(bytes.len() as u64, "header needs 16 bytes".into()));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let magic = word(0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(fail(
            0,
            format!("magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let (count, height, width) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let expected = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| fail(4, "dimension overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(fail(
            bytes.len() as u64,
            format!(
                "truncated payload: {} of {expected} pixel bytes",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(fail(
            16 + expected as u64,
            "trailing bytes after payload".into(),
        ));
    }
    ImageSet::new(count, height, width, payload.to_vec())
}

/// Reads an IDX image file, inflating it first when gzip-compressed.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut bytes = Vec::new();
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        parse_idx_images(&bytes)
    } else {
        parse_idx_images(&raw)
    }
}

/// Per-axis box weights: `w[out][src]` is the fraction of source cell `src`
/// inside output cell `out`, normalized so each output row sums to 1.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    // work in units of 1/dst so every boundary is an integer
    (0..dst)
        .map(|o| {
            let lo = o * src;
            let hi = (o + 1) * src;
            (lo / dst..hi.div_ceil(dst))
                .filter_map(|s| {
                    let overlap = hi.min((s + 1) * dst).saturating_sub(lo.max(s * dst));
                    (overlap > 0).then(|| (s, overlap as f64 / src as f64))
                })
                .collect()
        })
        .collect()
}

/// Area-average downsampling of one row-major image.
pub fn resize_image(
    img: &[f64],
    height: usize,
    width: usize,
    new_height: usize,
    new_width: usize,
) -> Result<Vec<f64>> {
    if new_height == 0 || new_width == 0 {
        return Err(Error::InvalidArgument(
            "target size must be at least 1x1".into(),
        ));
    }
    if new_height > height || new_width > width {
        return Err(Error::InvalidArgument(format!(
            "upscaling {height}x{width} to {new_height}x{new_width} is not supported"
        )));
    }
    if img.len() != height * width {
        return Err(Error::Shape(format!(
            "image has {} pixels, expected {height}x{width}",
            img.len()
        )));
    }
    if new_height == height && new_width == width {
        return Ok(img.to_vec());
    }
    let wy = box_weights(height, new_height);
    let wx = box_weights(width, new_width);
    let mut out = Vec::with_capacity(new_height * new_width);
    for row in &wy {
        for col in &wx {
            let mut acc = 0.0;
            for &(r, a) in row {
                for &(c, b) in col {
                    acc += a * b * img[r * width + c];
                }
            }
            out.push(acc);
        }
    }
    Ok(out)
}

pub fn resize(images: &GrayImages, new_height: usize, new_width: usize) -> Result<GrayImages> {
    let pixels = (0..images.count)
        .map(|i| {
            resize_image(
                images.image(i),
                images.height,
                images.width,
                new_height,
                new_width,
            )
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok(GrayImages {
        count: images.count,
        height: new_height,
        width: new_width,
        pixels,
    })
}

/// Feature rows in `[0, 1]` with a uniform length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Vec<f64>>,
    binary: bool,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, binary: bool) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        let n = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "row {i} has {} features, row 0 has {n}",
                    row.len()
                )));
            }
            if let Some(&v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} holds {v} outside [0, 1]"
                )));
            }
            if binary && row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("row {i} is not binary")));
            }
        }
        Ok(Self { rows, binary })
    }

    pub fn from_bits(rows: &[Vec<u8>]) -> Result<Self> {
        Self::new(
            rows.iter()
                .map(|r| r.iter().map(|&b| f64::from(b.min(1))).collect())
                .collect(),
            true,
        )
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn embedded(&self) -> Result<Vec<EmbeddedSample>> {
        self.rows.iter().map(|r| embed_sample(r)).collect()
    }

    /// Rows as bit strings; only meaningful for binary datasets.
    pub fn bit_rows(&self) -> Result<Vec<Vec<u8>>> {
        if !self.binary {
            return Err(Error::InvalidArgument("dataset is not binary".into()));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| r.iter().map(|&v| v as u8).collect())
            .collect())
    }

    /// Cache container, little-endian:
    ///
    /// ```text
    /// 0   4  magic "DST1"
    /// 4   4  u32 version (1)
    /// 8   4  u32 row count
    /// 12  4  u32 features per row
    /// then rows * features x f64, row-major
    /// trailer: u64 binary flag (0 or 1)
    /// ```
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.len() * self.n_features());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_features() as u32).to_le_bytes());
        for v in self.rows.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&u64::from(self.binary).to_le_bytes());
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CACHE_MAGIC {
            return Err(cur.error(0, "bad dataset cache magic".into()));
        }
        let version = cur.u32()?;
        if version != 1 {
            return Err(cur.error(4, format!("unsupported version {version}")));
        }
        let rows = cur.u32()? as usize;
        let n = cur.u32()? as usize;
        let mut data = Vec::with_capacity(rows.min(bytes.len() / 8 + 1));
        for _ in 0..rows {
            let row = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            data.push(row);
        }
        let binary = cur.u64()? != 0;
        if cur.pos != bytes.len() {
            return Err(cur.error(cur.pos as u64, "trailing bytes".into()));
        }
        Self::new(data, binary)
    }

    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_cache_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cache_bytes(&bytes)
    }
}

pub const CACHE_MAGIC: &[u8; 4] = b"DST1";

/// Seeded subset without replacement, scaled to `[0, 1]` and optionally
/// thresholded (`x > threshold` becomes 1).
pub fn to_dataset(
    images: &GrayImages,
    subset_size: usize,
    seed: u64,
    binarize_threshold: Option<f64>,
) -> Result<Dataset> {
    if subset_size == 0 || subset_size > images.count {
        return Err(Error::InvalidArgument(format!(
            "subset size {subset_size} must lie in 1..={}",
            images.count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, images.count, subset_size);
    let rows = picks
        .iter()
        .map(|i| {
            images
                .image(i)
                .iter()
                .map(|&p| {
                    let x = (p / 255.0).clamp(0.0, 1.0);
                    match binarize_threshold {
                        Some(t) => f64::from(u8::from(x > t)),
                        None => x,
                    }
                })
                .collect()
        })
        .collect();
    Dataset::new(rows, binarize_threshold.is_some())
}

/// Side length of a square image with `n` pixels.
pub fn square_side(n: usize) -> Result<usize> {
    let lo = (n as f64).sqrt().floor() as usize;
    if n > 0 && lo * lo == n {
        return Ok(lo);
    }
    let below = if lo == 0 { 1 } else { lo * lo };
    Err(Error::InvalidArgument(format!(
        "length {n} is not a square image size; nearest valid lengths are {below} and {}",
        (lo + 1) * (lo + 1)
    )))
}

/// Images resized to `sqrt(n) x sqrt(n)`, then subset as in [`to_dataset`].
/// The chosen images depend only on `seed`, not on `n`.
pub fn image_dataset(
    images: &GrayImages,
    n: usize,
    subset_size: usize,
    seed: u64,
    binarize_threshold: Option<f64>,
) -> Result<Dataset> {
    let side = square_side(n)?;
    to_dataset(
        &resize(images, side, side)?,
        subset_size,
        seed,
        binarize_threshold,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupportWeights {
    /// Independent draws from `[0.1, 1)`, normalized.
    #[default]
    Random,
    Equal,
}

/// A synthetic dataset together with the distribution that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Support strings and their probabilities (summing to 1).
    pub support: Vec<(Vec<u8>, f64)>,
}

impl SyntheticData {
    pub fn generating_entropy(&self) -> f64 {
        0.0 - self
            .support
            .iter()
            .map(|(_, p)| if *p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>()
    }
}

pub fn synthetic_sparse(
    n: usize,
    support_size: usize,
    seed: u64,
    samples: usize,
) -> Result<SyntheticData> {
    synthetic_sparse_with(n, support_size, seed, samples, SupportWeights::Random)
}

/// Draws `samples` rows i.i.d. from a random distribution supported on
/// `support_size` distinct `n`-bit strings.
pub fn synthetic_sparse_with(
    n: usize,
    support_size: usize,
    seed: u64,
    samples: usize,
    weights: SupportWeights,
) -> Result<SyntheticData> {
    if n == 0 || n > MAX_EXHAUSTIVE_SITES {
        return Err(Error::InvalidArgument(format!(
            "synthetic length {n} must lie in 1..={MAX_EXHAUSTIVE_SITES}"
        )));
    }
    if support_size == 0 || support_size > 1 << n {
        return Err(Error::InvalidArgument(format!(
            "support size {support_size} must lie in 1..={}",
            1usize << n
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut configs: Vec<usize> = index::sample(&mut rng, 1 << n, support_size).into_vec();
    configs.sort_unstable();
    let raw: Vec<f64> = match weights {
        SupportWeights::Random => (0..support_size)
            .map(|_| rng.random_range(0.1..1.0))
            .collect(),
        SupportWeights::Equal => vec![1.0; support_size],
    };
    let total: f64 = raw.iter().sum();
    let bits_of =
        |k: usize| -> Vec<u8> { (0..n).map(|i| ((k >> (n - 1 - i)) & 1) as u8).collect() };
    let support: Vec<(Vec<u8>, f64)> = configs
        .iter()
        .zip(&raw)
        .map(|(&k, &w)| (bits_of(k), w / total))
        .collect();
    let dist = WeightedIndex::new(&raw)
        .map_err(|e| Error::InvalidArgument(format!("support weights: {e}")))?;
    let rows: Vec<Vec<u8>> = (0..samples)
        .map(|_| support[dist.sample(&mut rng)].0.clone())
        .collect();
    Ok(SyntheticData {
        dataset: Dataset::from_bits(&rows)?,
        support,
    })
}

/// `-sum q ln q` over the distinct rows of a binary dataset, in nats.
pub fn empirical_entropy(dataset: &Dataset) -> Result<f64> {
    let rows = dataset.bit_rows()?;
    let mut counts: HashMap<Vec<u8>, usize> = HashMap::new();
    for r in rows {
        *counts.entry(r).or_default() += 1;
    }
    let total = dataset.len() as f64;
    // sort for an order-independent sum
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    Ok(0.0
        - freqs
            .into_iter()
            .map(|c| {
                let q = c as f64 / total;
                q * q.ln()
            })
            .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    proptest! {
        #[test]
        fn resize_conserves_mean(
            (h, w, img) in (1usize..12, 1usize..12)
                .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f64..=255.0, h * w))),
            nh in 1usize..12,
            nw in 1usize..12,
        ) {
            let (nh, nw) = (nh.min(h), nw.min(w));
            let out = resize_image(&img, h, w, nh, nw).unwrap();
            let before = img.iter().sum::<f64>() / img.len() as f64;
            let after = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!((before - after).abs() < 1e-10);
            prop_assert!(out.iter().all(|v| (-1e-12..=255.0 + 1e-12).contains(v)));
        }
    }

    fn idx_bytes(count: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 8, 3];
        for v in [count, h, w] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn parses_hand_built_fixture() {
        let bytes = idx_bytes(2, 2, 2, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let set = parse_idx_images(&bytes).unwrap();
        assert_eq!((set.count, set.height, set.width), (2, 2, 2));
        assert_eq!(set.image(1), &[4, 5, 6, 7]);
    }

    #[test]
    fn rejects_label_magic_and_truncation() {
        let mut bytes = idx_bytes(2, 2, 2, &[0; 8]);
        bytes[3] = 1;
        match parse_idx_images(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let short = idx_bytes(2, 2, 2, &[0; 7]);
        match parse_idx_images(&short) {
            Err(Error::Format { offset, reason, .. }) => {
                assert_eq!(offset, 23);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_idx_images(&[0, 0, 8]).is_err());
    }

    #[test]
    fn loads_plain_and_gzipped_files() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = idx_bytes(1, 2, 3, &[9, 8, 7, 6, 5, 4]);
        let plain = dir.path().join("imgs");
        std::fs::write(&plain, &bytes).unwrap();
        let gz = dir.path().join("imgs.gz");
        let mut enc = flate2::write::GzEncoder::new(
            std::fs::File::create(&gz).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
        assert_eq!(
            load_idx_images(&plain).unwrap(),
            load_idx_images(&gz).unwrap()
        );
        assert!(matches!(
            load_idx_images(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(resize_image(&img, 3, 4, 3, 4).unwrap(), img);
        let flat = vec![42.0; 28 * 28];
        for v in resize_image(&flat, 28, 28, 10, 10).unwrap() {
            assert!((v - 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_checkerboard() {
        let img: Vec<f64> = (0..16)
            .map(|k| if (k / 4 + k % 4) % 2 == 0 { 0.0 } else { 255.0 })
            .collect();
        assert_eq!(resize_image(&img, 4, 4, 2, 2).unwrap(), vec![127.5; 4]);
    }

    #[test]
    fn resize_rejects_upscaling() {
        assert!(resize_image(&[0.0; 4], 2, 2, 3, 2).is_err());
        assert!(resize_image(&[0.0; 4], 2, 2, 0, 1).is_err());
    }

    #[test]
    fn resize_fractional_boxes_conserve_mean() {
        let img: Vec<f64> = (0..28 * 28).map(|k| ((k * 37) % 256) as f64).collect();
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        for (h, w) in [(7, 7), (10, 10), (14, 14), (20, 20), (28, 5)] {
            let out = resize_image(&img, 28, 28, h, w).unwrap();
            let m = out.iter().sum::<f64>() / out.len() as f64;
            assert!((m - mean).abs() < 1e-12, "{h}x{w}");
            assert!(out.iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn box_weights_sum_to_one() {
        for (src, dst) in [(28, 10), (28, 20), (5, 3), (7, 7)] {
            for row in box_weights(src, dst) {
                let s: f64 = row.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
    }

    fn gray(count: usize, value: f64) -> GrayImages {
        GrayImages {
            count,
            height: 2,
            width: 2,
            pixels: (0..count * 4)
                .map(|k| (value + k as f64).min(255.0))
                .collect(),
        }
    }

    #[test]
    fn full_subset_is_a_permutation() {
        let imgs = gray(10, 0.0);
        let ds = to_dataset(&imgs, 10, 1, None).unwrap();
        let mut firsts: Vec<f64> = ds.rows().iter().map(|r| r[0] * 255.0).collect();
        let shuffled = firsts.clone();
        firsts.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (0..10).map(|i| (4 * i) as f64).collect();
        for (a, b) in firsts.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_ne!(shuffled, firsts);
    }

    #[test]
    fn binarized_zero_images() {
        let imgs = GrayImages {
            count: 3,
            height: 2,
            width: 2,
            pixels: vec![0.0; 12],
        };
        let ds = to_dataset(&imgs, 3, 0, Some(0.5)).unwrap();
        assert!(ds.is_binary());
        assert!(ds.rows().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn subsets_are_seeded() {
        let imgs = gray(50, 0.0);
        assert_eq!(
            to_dataset(&imgs, 20, 5, None).unwrap(),
            to_dataset(&imgs, 20, 5, None).unwrap()
        );
        assert_ne!(
            to_dataset(&imgs, 20, 5, None).unwrap(),
            to_dataset(&imgs, 20, 6, None).unwrap()
        );
        assert!(to_dataset(&imgs, 51, 5, None).is_err());
        assert!(to_dataset(&imgs, 0, 5, None).is_err());
    }

    #[test]
    fn entropy_examples() {
        let one = Dataset::from_bits(&[vec![1, 0], vec![1, 0], vec![1, 0]]).unwrap();
        assert_eq!(empirical_entropy(&one).unwrap(), 0.0);
        let two = Dataset::from_bits(&[vec![1, 0], vec![0, 1]]).unwrap();
        assert!((empirical_entropy(&two).unwrap() - 2f64.ln()).abs() < 1e-15);
        let four = Dataset::from_bits(&[vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]).unwrap();
        assert!((empirical_entropy(&four).unwrap() - 4f64.ln()).abs() < 1e-15);
        let gray = Dataset::new(vec![vec![0.5]], false).unwrap();
        assert!(empirical_entropy(&gray).is_err());
    }

    #[test]
    fn synthetic_single_support() {
        let s = synthetic_sparse(6, 1, 2, 100).unwrap();
        assert!(s.dataset.rows().iter().all(|r| r == &s.dataset.rows()[0]));
        assert_eq!(empirical_entropy(&s.dataset).unwrap(), 0.0);
    }

    #[test]
    fn synthetic_uniform_full_support() {
        let s = synthetic_sparse_with(4, 16, 3, 200_000, SupportWeights::Equal).unwrap();
        let h = empirical_entropy(&s.dataset).unwrap();
        assert!((h - 4.0 * 2f64.ln()).abs() < 1e-3);
        assert!((s.generating_entropy() - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn synthetic_entropy_tracks_generator() {
        let s = synthetic_sparse(8, 16, 3, 4096).unwrap();
        assert_eq!(s.support.len(), 16);
        assert!((s.support.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
        let h = empirical_entropy(&s.dataset).unwrap();
        assert!((h - s.generating_entropy()).abs() < 0.1);
        assert_eq!(s, synthetic_sparse(8, 16, 3, 4096).unwrap());
    }

    #[test]
    fn synthetic_validation() {
        assert!(synthetic_sparse(15, 2, 0, 10).is_err());
        assert!(synthetic_sparse(3, 9, 0, 10).is_err());
        assert!(synthetic_sparse(3, 0, 0, 10).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![vec![0.0, 1.0], vec![0.5]], false).is_err());
        assert!(Dataset::new(vec![vec![1.5]], false).is_err());
        assert!(Dataset::new(vec![vec![0.5]], true).is_err());
        assert!(Dataset::new(vec![], false).is_err());
    }

    #[test]
    fn cache_roundtrip() {
        let ds = synthetic_sparse(5, 4, 1, 30).unwrap().dataset;
        let bytes = ds.to_cache_bytes();
        assert_eq!(&bytes[..4], b"DST1");
        assert_eq!(Dataset::from_cache_bytes(&bytes).unwrap(), ds);
        assert!(Dataset::from_cache_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn square_lengths() {
        assert_eq!(square_side(196).unwrap(), 14);
        let msg = square_side(50).unwrap_err().to_string();
        assert!(msg.contains("49") && msg.contains("64"), "{msg}");
        assert!(square_side(0).is_err());
    }

    #[test]
    fn pipeline_bounds() {
        let set = ImageSet::new(3, 4, 4, (0..48).map(|k| (k * 17 % 256) as u8).collect()).unwrap();
        let small = resize(&set.to_gray(), 3, 3).unwrap();
        let ds = to_dataset(&small, 3, 9, None).unwrap();
        assert_eq!(ds.n_features(), 9);
        assert!(ds.rows().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
