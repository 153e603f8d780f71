//! Synthetic datasets and the raw tensor-batch file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dnas_core::rng::Rng;
use dnas_core::tensor::Tensor;
use dnas_core::unet::BatchSource;

use crate::config::{DataSource, DatasetSpec};
use crate::error::{io_err, HarnessError, Result};

pub const DTNS_MAGIC: [u8; 4] = *b"DTNS";

/// Blob bump width as a fraction of the image size.
const BLOB_SIGMA_FRACTION: f64 = 0.2;

fn blob_image(size: usize, channels: usize, rng: &mut Rng) -> Vec<f32> {
    let sigma = size as f64 * BLOB_SIGMA_FRACTION;
    let mut img = vec![0f32; channels * size * size];
    for c in 0..channels {
        let bumps = 1 + rng.below(3);
        for _ in 0..bumps {
            let cx = rng.below(size) as f64;
            let cy = rng.below(size) as f64;
            let amp = rng.uniform_in(0.5, 1.0);
            for y in 0..size {
                for x in 0..size {
                    // toroidal distance avoids boundary bias
                    let dx = (x as f64 - cx).abs().min(size as f64 - (x as f64 - cx).abs());
                    let dy = (y as f64 - cy).abs().min(size as f64 - (y as f64 - cy).abs());
                    let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    img[(c * size + y) * size + x] += (amp * g) as f32;
                }
            }
        }
    }
    // Up to three unit bumps can coincide; map [0, 3] onto [-1, 1].
    for v in img.iter_mut() {
        *v = (2.0 * (*v as f64) / 3.0 - 1.0) as f32;
    }
    img
}

/// Expected per-pixel mean of the blob generator, computed from its closed
/// form: E[k] * E[amp] * mean single-bump response, mapped through the
/// [-1, 1] normalization. Identical for every pixel by toroidal symmetry.
pub fn blob_analytic_pixel_mean(size: usize) -> f64 {
    let sigma = size as f64 * BLOB_SIGMA_FRACTION;
    let mut m1 = 0.0;
    for cy in 0..size {
        for cx in 0..size {
            let dx = (cx as f64).min(size as f64 - cx as f64);
            let dy = (cy as f64).min(size as f64 - cy as f64);
            m1 += (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    m1 /= (size * size) as f64;
    let e_bumps = 2.0; // uniform over {1, 2, 3}
    let e_amp = 0.75; // uniform over [0.5, 1.0]
    2.0 * (e_bumps * e_amp * m1) / 3.0 - 1.0
}

fn checker_image(size: usize, channels: usize, rng: &mut Rng) -> Vec<f32> {
    let mut img = vec![0f32; channels * size * size];
    for c in 0..channels {
        let tile = [2usize, 4][rng.below(2)];
        let (px, py) = (rng.below(tile), rng.below(tile));
        let contrast = rng.uniform_in(0.5, 1.0) as f32;
        for y in 0..size {
            for x in 0..size {
                let parity = ((x + px) / tile + (y + py) / tile) % 2;
                img[(c * size + y) * size + x] = if parity == 0 { contrast } else { -contrast };
            }
        }
    }
    img
}

/// Draws `spec.count` samples deterministically from the generator seed.
pub fn generate_synthetic(spec: &DatasetSpec, rng: &mut Rng) -> Result<Tensor> {
    let (s, c) = (spec.image_size, spec.channels);
    let mut data = Vec::with_capacity(spec.count * c * s * s);
    for _ in 0..spec.count {
        let img = match spec.source {
            DataSource::SyntheticBlobs => blob_image(s, c, rng),
            DataSource::SyntheticChecker => checker_image(s, c, rng),
            DataSource::RawFile => {
                return Err(HarnessError::Config(
                    "raw-file datasets are loaded, not generated".into(),
                ))
            }
        };
        data.extend_from_slice(&img);
    }
    Tensor::from_vec(&[spec.count, c, s, s], data).map_err(HarnessError::from)
}

/// Loads the dataset a spec names: generated for synthetic sources, read
/// from disk for files (with the normalization contract enforced).
pub fn load_dataset(spec: &DatasetSpec) -> Result<Tensor> {
    match spec.source {
        DataSource::RawFile => {
            let path = spec.path.as_ref().expect("validated");
            let batch = load_raw_tensor_file(Path::new(path))?;
            let shape = batch.shape().to_vec();
            if shape[1] != spec.channels || shape[2] != spec.image_size || shape[3] != spec.image_size
            {
                return Err(HarnessError::Config(format!(
                    "file holds {:?} but the spec wants [_, {}, {}, {}]",
                    shape, spec.channels, spec.image_size, spec.image_size
                )));
            }
            if batch.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                return Err(HarnessError::Config(
                    "raw dataset pixels must lie in [-1, 1]".into(),
                ));
            }
            Ok(batch)
        }
        _ => {
            let mut rng = Rng::stream(spec.seed, "dataset");
            generate_synthetic(spec, &mut rng)
        }
    }
}

/// Endless stream of freshly generated synthetic batches (or shuffled cycles
/// of a fixed set for file-backed data).
pub struct DataStream {
    spec: DatasetSpec,
    rng: Rng,
    fixed: Option<Tensor>,
    order: Vec<usize>,
    cursor: usize,
}

impl DataStream {
    pub fn new(spec: &DatasetSpec, stream_seed: u64) -> Result<Self> {
        let fixed = match spec.source {
            DataSource::RawFile => Some(load_dataset(spec)?),
            _ => None,
        };
        Ok(DataStream {
            spec: spec.clone(),
            rng: Rng::stream(stream_seed, "data-stream"),
            fixed,
            order: Vec::new(),
            cursor: 0,
        })
    }
}

impl BatchSource for DataStream {
    fn next_batch(&mut self, n: usize) -> dnas_core::Result<Tensor> {
        let (s, c) = (self.spec.image_size, self.spec.channels);
        match &self.fixed {
            None => {
                let mut data = Vec::with_capacity(n * c * s * s);
                for _ in 0..n {
                    let img = match self.spec.source {
                        DataSource::SyntheticBlobs => blob_image(s, c, &mut self.rng),
                        DataSource::SyntheticChecker => checker_image(s, c, &mut self.rng),
                        DataSource::RawFile => unreachable!(),
                    };
                    data.extend_from_slice(&img);
                }
                Tensor::from_vec(&[n, c, s, s], data)
            }
            Some(set) => {
                let total = set.shape()[0];
                let per = c * s * s;
                let mut data = Vec::with_capacity(n * per);
                for _ in 0..n {
                    if self.cursor >= self.order.len() {
                        // fresh shuffle per epoch
                        self.order = (0..total).collect();
                        for i in (1..total).rev() {
                            let j = self.rng.below(i + 1);
                            self.order.swap(i, j);
                        }
                        self.cursor = 0;
                    }
                    let idx = self.order[self.cursor];
                    self.cursor += 1;
                    data.extend_from_slice(&set.data()[idx * per..(idx + 1) * per]);
                }
                Tensor::from_vec(&[n, c, s, s], data)
            }
        }
    }
}

// ---- DTNS file format -------------------------------------------------------

/// Writes a sample batch as: magic "DTNS", u32 count, u32 C, u32 H, u32 W,
/// then count*C*H*W little-endian f32 values.
pub fn save_raw_tensor_file(batch: &Tensor, path: &Path) -> Result<()> {
    let dims = batch.shape();
    if dims.len() != 4 {
        return Err(HarnessError::Config(format!(
            "batch must be 4-d, got {dims:?}"
        )));
    }
    let tmp = path.with_extension("tmp-write");
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes).map_err(io_err(path))
        };
        write(&mut w, &DTNS_MAGIC)?;
        for &d in dims {
            write(&mut w, &(d as u32).to_le_bytes())?;
        }
        for &v in batch.data() {
            write(&mut w, &v.to_le_bytes())?;
        }
        w.flush().map_err(io_err(path))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

pub fn load_raw_tensor_file(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        let at = offset;
        r.read_exact(buf).map_err(|_| HarnessError::Format {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if magic != DTNS_MAGIC {
        return Err(HarnessError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {DTNS_MAGIC:?}"),
        });
    }
    let mut dims = [0usize; 4];
    let mut numel: u64 = 1;
    for (i, d) in dims.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        take(&mut b, "header dimension")?;
        *d = u32::from_le_bytes(b) as usize;
        numel = numel
            .checked_mul(*d as u64)
            .ok_or(HarnessError::Format {
                offset: 4 + 4 * i as u64,
                message: "dimension product overflow".into(),
            })?;
    }
    if numel > (1 << 32) {
        return Err(HarnessError::Format {
            offset: 4,
            message: format!("implausible payload of {numel} values"),
        });
    }
    let mut payload = vec![0u8; numel as usize * 4];
    take(&mut payload, "payload")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err(path))? != 0 {
        return Err(HarnessError::Format {
            offset,
            message: "trailing bytes after payload".into(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&dims, data).map_err(HarnessError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_spec(count: usize) -> DatasetSpec {
        DatasetSpec {
            source: DataSource::SyntheticBlobs,
            image_size: 8,
            channels: 1,
            count,
            seed: 3,
            path: None,
        }
    }

    #[test]
    fn synthetic_data_is_deterministic_and_in_range() {
        let spec = blob_spec(16);
        let mut r1 = Rng::stream(spec.seed, "dataset");
        let mut r2 = Rng::stream(spec.seed, "dataset");
        let a = generate_synthetic(&spec, &mut r1).unwrap();
        let b = generate_synthetic(&spec, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let mut spec2 = spec;
        spec2.source = DataSource::SyntheticChecker;
        let mut r = Rng::stream(spec2.seed, "dataset");
        let c = generate_synthetic(&spec2, &mut r).unwrap();
        assert!(c.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn blob_pixel_mean_matches_closed_form() {
        let spec = blob_spec(10_000);
        let mut rng = Rng::stream(spec.seed, "dataset");
        let batch = generate_synthetic(&spec, &mut rng).unwrap();
        let per = 64;
        let n = spec.count;
        let mut means = Vec::with_capacity(n);
        for i in 0..n {
            let s: f64 = batch.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| v as f64)
                .sum();
            means.push(s / per as f64);
        }
        let grand = means.iter().sum::<f64>() / n as f64;
        let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        let expect = blob_analytic_pixel_mean(8);
        assert!(
            (grand - expect).abs() <= 3.0 * se,
            "empirical {grand} vs analytic {expect} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn dtns_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("dnas-dtns");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.dtns");
        let mut rng = Rng::seed_from(1);
        let batch = Tensor::randn(&[3, 2, 4, 4], &mut rng);
        save_raw_tensor_file(&batch, &path).unwrap();
        let back = load_raw_tensor_file(&path).unwrap();
        assert_eq!(back.shape(), batch.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&batch));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn dtns_empty_batch_is_valid() {
        let dir = std::env::temp_dir().join("dnas-dtns");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.dtns");
        let batch = Tensor::zeros(&[0, 1, 4, 4]);
        save_raw_tensor_file(&batch, &path).unwrap();
        let back = load_raw_tensor_file(&path).unwrap();
        assert_eq!(back.shape(), &[0, 1, 4, 4]);
        assert_eq!(back.numel(), 0);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn dtns_bad_magic_errors_at_offset_zero() {
        let dir = std::env::temp_dir().join("dnas-dtns");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.dtns");
        std::fs::write(&path, b"WRONG___________").unwrap();
        match load_raw_tensor_file(&path) {
            Err(HarnessError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn dtns_truncation_errors_with_offset() {
        let dir = std::env::temp_dir().join("dnas-dtns");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.dtns");
        let mut rng = Rng::seed_from(2);
        save_raw_tensor_file(&Tensor::randn(&[2, 1, 2, 2], &mut rng), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        match load_raw_tensor_file(&path) {
            Err(HarnessError::Format { offset, .. }) => assert!(offset >= 20),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }
}
