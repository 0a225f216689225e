//! Frame encoding and the on-disk feature cache.
//!
//! The frame encoder is a deterministic stand-in for a frozen image encoder:
//! a 64-bin intensity histogram pushed through a fixed sine projection. Its
//! outputs are cached per sample in the PNF1 format so training never has to
//! re-encode frames.
//!
//! PNF1 layout (little-endian): `"PNF1"`, u32 version = 1, u32 N_v, u32 N_f,
//! u32 D, u32 reserved = 0, then N_v*N_f*D f32 values in (view, frame, dim)
//! order, then a ceil(N_v*N_f/8)-byte mask bitmap, row-major, LSB first.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 64;
pub const DEFAULT_FEATURE_DIM: usize = 64;

const CACHE_MAGIC: &[u8; 4] = b"PNF1";
const CACHE_VERSION: u32 = 1;
const CACHE_HEADER_LEN: usize = 24;

/// Grayscale frame with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("frame has zero area"));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "frame {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Normalized 64-bin intensity histogram.
    pub fn histogram(&self) -> [f64; HISTOGRAM_BINS] {
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &p in &self.pixels {
            let bin = ((p as f64) * HISTOGRAM_BINS as f64) as usize;
            counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
        }
        let total = self.pixels.len() as f64;
        counts.map(|c| c as f64 / total)
    }
}

/// Histogram encoder with projection `P[i][j] = sin(i*D + j + 1)`.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    dim: usize,
    projection: Vec<f64>,
}

impl StubEncoder {
    pub fn new(dim: usize) -> Self {
        let projection = (0..HISTOGRAM_BINS)
            .flat_map(|i| (0..dim).map(move |j| ((i * dim + j + 1) as f64).sin()))
            .collect();
        Self { dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, frame: &Frame) -> Result<Vec<f64>> {
        let hist = frame.histogram();
        let mut y = vec![0.0f64; self.dim];
        for (i, &h) in hist.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &self.projection[i * self.dim..(i + 1) * self.dim];
            for (yj, pj) in y.iter_mut().zip(row) {
                *yj += h * pj;
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("frame projects to a zero vector"));
        }
        y.iter_mut().for_each(|v| *v /= norm);
        Ok(y)
    }
}

impl Default for StubEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_FEATURE_DIM)
    }
}

/// Encodes one frame with the default 64-dimensional encoder.
pub fn stub_encode(frame: &Frame) -> Result<Vec<f64>> {
    StubEncoder::default().encode(frame)
}

/// Per-sample visual features, shape (N_v, N_f, D), plus the frame mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    data: Array3<f32>,
    mask: Array2<bool>,
}

impl FeatureTensor {
    pub fn new(data: Array3<f32>, mask: Array2<bool>) -> Result<Self> {
        let (nv, nf, d) = data.dim();
        if nv == 0 || nf == 0 || d == 0 {
            return Err(Error::shape(format!("empty feature tensor ({nv}, {nf}, {d})")));
        }
        if mask.dim() != (nv, nf) {
            return Err(Error::shape(format!(
                "mask {:?} does not match data ({nv}, {nf})",
                mask.dim()
            )));
        }
        Ok(Self { data, mask })
    }

    pub fn num_views(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    /// Features of every view at one time index, shape (N_v, D).
    pub fn at_time(&self, t: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(1), t)
    }

    pub fn view_mask_at(&self, t: usize) -> Vec<bool> {
        self.mask.column(t).to_vec()
    }

    /// Reorders the view axis; `order[i]` is the source view for slot `i`.
    pub fn permute_views(&self, order: &[usize]) -> Result<Self> {
        let nv = self.num_views();
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..nv).collect::<Vec<_>>() {
            return Err(Error::invalid(format!("{order:?} is not a permutation of 0..{nv}")));
        }
        Self::new(self.data.select(Axis(0), order), self.mask.select(Axis(0), order))
    }

    /// Checks the unit-norm, zero-padding and coverage invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for ((v, f), &valid) in self.mask.indexed_iter() {
            let row = self.data.slice(ndarray::s![v, f, ..]);
            if valid {
                let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "row ({v}, {f}) has norm {norm}, expected 1"
                    )));
                }
            } else if row.iter().any(|&x| x != 0.0) {
                return Err(Error::invalid(format!("masked row ({v}, {f}) is not zero")));
            }
        }
        for f in 0..self.num_frames() {
            if !self.mask.column(f).iter().any(|&m| m) {
                return Err(Error::invalid(format!("time index {f} has no valid view")));
            }
        }
        Ok(())
    }
}

/// Encodes every frame of every view. Shorter views are zero-padded and masked.
pub fn encode_sample(encoder: &StubEncoder, views: &[Vec<Frame>]) -> Result<FeatureTensor> {
    if views.is_empty() {
        return Err(Error::invalid("sample has no views"));
    }
    if let Some(i) = views.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("view {i} has no frames")));
    }
    let nv = views.len();
    let nf = views.iter().map(Vec::len).max().unwrap_or(0);
    let d = encoder.dim();
    let mut data = Array3::<f32>::zeros((nv, nf, d));
    let mut mask = Array2::from_elem((nv, nf), false);
    for (v, frames) in views.iter().enumerate() {
        for (f, frame) in frames.iter().enumerate() {
            let y = encoder.encode(frame)?;
            for (k, value) in y.into_iter().enumerate() {
                data[[v, f, k]] = value as f32;
            }
            mask[[v, f]] = true;
        }
    }
    FeatureTensor::new(data, mask)
}

/// Size in bytes of a PNF1 file holding a tensor of this shape.
pub fn cache_len(nv: usize, nf: usize, d: usize) -> usize {
    CACHE_HEADER_LEN + nv * nf * d * 4 + (nv * nf).div_ceil(8)
}

pub fn write_cache<W: Write>(tensor: &FeatureTensor, sink: &mut W) -> Result<usize> {
    let (nv, nf, d) = tensor.shape();
    let mut buf = Vec::with_capacity(cache_len(nv, nf, d));
    buf.extend_from_slice(CACHE_MAGIC);
    for field in [CACHE_VERSION, nv as u32, nf as u32, d as u32, 0] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for &x in tensor.data.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut bitmap = vec![0u8; (nv * nf).div_ceil(8)];
    for (i, &valid) in tensor.mask.iter().enumerate() {
        if valid {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&bitmap);
    sink.write_all(&buf)?;
    Ok(buf.len())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn read_cache<R: Read>(source: &mut R) -> Result<FeatureTensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::Format("not a PNF1 feature cache (bad magic)".into()));
    }
    if bytes.len() < CACHE_HEADER_LEN {
        return Err(Error::Corrupt("truncated PNF1 header".into()));
    }
    let version = read_u32(&bytes, 4);
    if version != CACHE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (nv, nf, d) = (
        read_u32(&bytes, 8) as usize,
        read_u32(&bytes, 12) as usize,
        read_u32(&bytes, 16) as usize,
    );
    let expected = cache_len(nv, nf, d);
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "PNF1 shape ({nv}, {nf}, {d}) needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let payload = &bytes[CACHE_HEADER_LEN..CACHE_HEADER_LEN + nv * nf * d * 4];
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let bitmap = &bytes[CACHE_HEADER_LEN + nv * nf * d * 4..];
    let mask_bits: Vec<bool> = (0..nv * nf)
        .map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0)
        .collect();
    let data = Array3::from_shape_vec((nv, nf, d), values)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let mask =
        Array2::from_shape_vec((nv, nf), mask_bits).map_err(|e| Error::Corrupt(e.to_string()))?;
    FeatureTensor::new(data, mask).map_err(|e| Error::Corrupt(e.to_string()))
}

/// Location of a sample's cache inside a feature directory.
pub fn cache_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join(format!("{sample_id}.pnf1"))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_cache_file(tensor: &FeatureTensor, path: &Path) -> Result<usize> {
    let mut buf = Vec::new();
    let n = write_cache(tensor, &mut buf)?;
    atomic_write(path, &buf)?;
    Ok(n)
}

pub fn read_cache_file(path: &Path) -> Result<FeatureTensor> {
    let mut file = fs::File::open(path)?;
    read_cache(&mut file)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_frame(h: usize, w: usize, scale: f32) -> Frame {
        let pixels = (0..h * w)
            .map(|i| ((i % w) as f32 / w as f32 * scale).min(1.0))
            .collect();
        Frame::new(h, w, pixels).unwrap()
    }

    #[test]
    fn black_frame_selects_first_projection_row() {
        let frame = Frame::filled(8, 8, 0.0).unwrap();
        let y = stub_encode(&frame).unwrap();
        let raw: Vec<f64> = (0..64).map(|j| ((j + 1) as f64).sin()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in y.iter().zip(&raw) {
            assert!((a - b / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn white_frame_uses_last_bin() {
        let enc = StubEncoder::new(16);
        let y = enc.encode(&Frame::filled(2, 3, 1.0).unwrap()).unwrap();
        let raw: Vec<f64> = (0..16).map(|j| ((63 * 16 + j + 1) as f64).sin()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in y.iter().zip(&raw) {
            assert!((a - b / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn encoding_is_deterministic_and_unit() {
        let frame = gradient_frame(32, 32, 0.9);
        let a = stub_encode(&frame).unwrap();
        let b = stub_encode(&frame).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::new(0, 4, vec![]).is_err());
        assert!(Frame::new(1, 2, vec![0.5]).is_err());
        assert!(Frame::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(Frame::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn ragged_views_are_padded() {
        let enc = StubEncoder::default();
        let views = vec![
            (0..5).map(|i| gradient_frame(4, 4, 0.2 * i as f32)).collect::<Vec<_>>(),
            (0..3).map(|i| gradient_frame(4, 4, 0.3 * i as f32)).collect(),
        ];
        let t = encode_sample(&enc, &views).unwrap();
        assert_eq!(t.shape(), (2, 5, 64));
        assert_eq!(t.mask().iter().filter(|&&m| m).count(), 8);
        assert!(!t.mask()[[1, 3]] && !t.mask()[[1, 4]]);
        t.check_invariants().unwrap();

        let single = encode_sample(&enc, &[vec![gradient_frame(4, 4, 1.0)]]).unwrap();
        assert_eq!(single.shape(), (1, 1, 64));
        assert!(single.mask().iter().all(|&m| m));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let enc = StubEncoder::default();
        assert!(encode_sample(&enc, &[]).is_err());
        assert!(encode_sample(&enc, &[vec![gradient_frame(2, 2, 1.0)], vec![]]).is_err());
    }

    #[test]
    fn view_order_permutes_axis_zero() {
        let enc = StubEncoder::default();
        let a: Vec<Frame> = (0..4).map(|i| gradient_frame(4, 4, 0.25 * i as f32)).collect();
        let b: Vec<Frame> = (0..2).map(|_| Frame::filled(4, 4, 0.7).unwrap()).collect();
        let ab = encode_sample(&enc, &[a.clone(), b.clone()]).unwrap();
        let ba = encode_sample(&enc, &[b, a]).unwrap();
        assert_eq!(ab.permute_views(&[1, 0]).unwrap(), ba);
    }

    fn sample_tensor(nv: usize, nf: usize, d: usize) -> FeatureTensor {
        let data = Array3::from_shape_fn((nv, nf, d), |(v, f, k)| {
            ((v * 31 + f * 7 + k) as f32 * 0.37).sin()
        });
        let mask = Array2::from_shape_fn((nv, nf), |(v, f)| (v + f) % 3 != 1);
        FeatureTensor::new(data, mask).unwrap()
    }

    #[test]
    fn cache_roundtrip_and_length() {
        let t = sample_tensor(3, 7, 64);
        let mut buf = Vec::new();
        let n = write_cache(&t, &mut buf).unwrap();
        assert_eq!(n, 24 + 3 * 7 * 64 * 4 + 3);
        assert_eq!(n, buf.len());
        let back = read_cache(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn cache_errors() {
        let t = sample_tensor(2, 3, 16);
        let mut buf = Vec::new();
        write_cache(&t, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_cache(&mut bad_magic.as_slice()), Err(Error::Format(_))));

        let mut bad_version = buf.clone();
        bad_version[4] = 2;
        assert!(matches!(
            read_cache(&mut bad_version.as_slice()),
            Err(Error::UnsupportedVersion(2))
        ));

        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(read_cache(&mut &truncated[..]), Err(Error::Corrupt(_))));
        assert!(matches!(read_cache(&mut &buf[..10]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn cache_file_is_written_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pnf");
        let t = sample_tensor(1, 4, 16);
        write_cache_file(&t, &path).unwrap();
        assert_eq!(read_cache_file(&path).unwrap(), t);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cache_roundtrip_is_identity(
            nv in 1usize..=64,
            nf in 1usize..=64,
            d in prop::sample::select(vec![16usize, 64, 256]),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::Rng64::new(seed);
            let data = Array3::from_shape_fn((nv, nf, d), |_| {
                f32::from_bits(rng.next_u64() as u32 & 0x7f7f_ffff) * if rng.below(2) == 0 { 1.0 } else { -1.0 }
            });
            let mask = Array2::from_shape_fn((nv, nf), |_| rng.below(2) == 0);
            let t = FeatureTensor::new(data, mask).unwrap();
            let mut buf = Vec::new();
            write_cache(&t, &mut buf).unwrap();
            let back = read_cache(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.mask(), t.mask());
            let same_bits = back.data().iter().zip(t.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }

        #[test]
        fn encoded_samples_satisfy_invariants(
            lengths in prop::collection::vec(1usize..12, 1..5),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::Rng64::new(seed);
            let enc = StubEncoder::new(16);
            let views: Vec<Vec<Frame>> = lengths
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|_| {
                            let px = (0..36).map(|_| rng.next_f64() as f32).collect();
                            Frame::new(6, 6, px).unwrap()
                        })
                        .collect()
                })
                .collect();
            let t = encode_sample(&enc, &views).unwrap();
            prop_assert_eq!(t.num_frames(), *lengths.iter().max().unwrap());
            t.check_invariants().unwrap();
        }
    }
}
