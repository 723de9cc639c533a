//! Synthetic audio-visual event videos and the MPNF binary container.
//!
//! Each class owns a unit audio direction and a unit visual direction that
//! lives in one spatial region. Event segments carry `signal_gain ×
//! prototype` plus Gaussian noise; background segments are noise only.
//! Classes are paired up (0 with 1, 2 with 3, ...) for the first half of
//! the label set: paired classes share their visual prototype and region, so
//! only the audio tells them apart.
//!
//! # MPNF layout (all integers little-endian)
//!
//! ```text
//! magic      "MPNF"                      4 bytes
//! version    u32                         currently 1
//! header     11 × u32                    n_videos, T, C, R, p, q, min_event_len,
//!                                        noise_sigma (f32 bits), signal_gain (f32 bits),
//!                                        seed low word, seed high word
//! records    n_videos × {
//!              id        u32
//!              labels    T × u8          class index, 255 = background
//!              visual    T·R·p × f32     row-major [T × R × p]
//!              audio     T·q × f32       row-major [T × q]
//!            }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MpnError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MPNF";
pub const VERSION: u32 = 1;
pub const BACKGROUND_BYTE: u8 = 255;
const HEADER_WORDS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_videos: usize,
    pub segments: usize,
    pub classes: usize,
    pub regions: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub noise_sigma: f32,
    pub signal_gain: f32,
    pub min_event_len: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_videos: 512,
            segments: 10,
            classes: 5,
            regions: 4,
            visual_dim: 32,
            audio_dim: 16,
            noise_sigma: 1.0,
            signal_gain: 3.0,
            min_event_len: 2,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_videos", self.n_videos),
            ("segments", self.segments),
            ("classes", self.classes),
            ("regions", self.regions),
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MpnError::Config(format!("{name} must be at least 1")));
        }
        if self.min_event_len < 2 || self.min_event_len > self.segments {
            return Err(MpnError::Config(format!(
                "min_event_len must lie in [2, segments={}], got {}",
                self.segments, self.min_event_len
            )));
        }
        if self.classes >= BACKGROUND_BYTE as usize {
            return Err(MpnError::Config("at most 254 classes fit the label byte".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(MpnError::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if !self.signal_gain.is_finite() {
            return Err(MpnError::Config("signal_gain must be finite".into()));
        }
        Ok(())
    }

    /// Bytes of one video record.
    pub fn record_bytes(&self) -> usize {
        let t = self.segments;
        4 + t + 4 * (t * self.regions * self.visual_dim + t * self.audio_dim)
    }

    /// Exact size of a bundle file for this spec.
    pub fn bundle_bytes(&self) -> usize {
        4 + 4 + 4 * HEADER_WORDS + self.n_videos * self.record_bytes()
    }

    /// Background label value.
    pub fn background(&self) -> usize {
        self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: u32,
    /// `[T × R × p]`
    pub visual: Tensor<f32>,
    /// `[T × q]`
    pub audio: Tensor<f32>,
    /// Class index per segment; `classes` marks background.
    pub segment_labels: Vec<usize>,
    pub video_label: usize,
}

impl VideoSample {
    pub fn event_span(&self, background: usize) -> Option<(usize, usize)> {
        let first = self.segment_labels.iter().position(|&l| l != background)?;
        let last = self.segment_labels.iter().rposition(|&l| l != background)?;
        Some((first, last + 1))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = MpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(MpnError::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

impl SplitManifest {
    /// Deterministic 80/10/10 split of `0..n`.
    pub fn new(n: usize, rng: &mut Rng) -> Self {
        let mut ids: Vec<u32> = (0..n as u32).collect();
        rng.shuffle(&mut ids);
        let n_train = (n as f64 * 0.8).round() as usize;
        let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
        let mut train = ids[..n_train].to_vec();
        let mut val = ids[n_train..n_train + n_val].to_vec();
        let mut test = ids[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }

    pub fn ids(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// One line per split: the split name followed by space-separated ids.
    pub fn to_text(&self) -> String {
        let line = |name: &str, ids: &[u32]| {
            let mut s = name.to_string();
            for id in ids {
                s.push(' ');
                s.push_str(&id.to_string());
            }
            s.push('\n');
            s
        };
        line("train", &self.train) + &line("val", &self.val) + &line("test", &self.test)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        let mut seen = [false; 3];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default();
            let split: Split = name
                .parse()
                .map_err(|_| MpnError::Data(format!("manifest: unknown split {name:?}")))?;
            let ids = parts
                .map(|p| p.parse::<u32>().map_err(|_| MpnError::Data(format!("manifest: bad id {p:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let slot = split as usize;
            if seen[slot] {
                return Err(MpnError::Data(format!("manifest: split {name} listed twice")));
            }
            seen[slot] = true;
            match split {
                Split::Train => m.train = ids,
                Split::Val => m.val = ids,
                Split::Test => m.test = ids,
            }
        }
        Ok(m)
    }

    /// Splits must be disjoint and cover exactly `0..n`.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &id in self.train.iter().chain(&self.val).chain(&self.test) {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| MpnError::Data(format!("manifest id {id} out of range")))?;
            if *slot {
                return Err(MpnError::Data(format!("manifest id {id} appears twice")));
            }
            *slot = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(MpnError::Data("manifest does not cover every video".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<VideoSample>,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&VideoSample> {
        self.manifest
            .ids(split)
            .iter()
            .map(|&id| &self.samples[id as usize])
            .collect()
    }
}

/// Class prototypes; regenerated from the spec seed.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub audio: Vec<Vec<f32>>,
    pub visual: Vec<Vec<f32>>,
    pub region: Vec<usize>,
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Number of leading classes whose visual prototype is shared with a partner.
pub fn paired_classes(classes: usize) -> usize {
    2 * (classes / 2 / 2)
}

pub fn prototypes(spec: &DatasetSpec) -> Prototypes {
    let mut rng = Rng::new(spec.seed).derive(0);
    let c = spec.classes;
    let audio = (0..c).map(|_| unit_vector(spec.audio_dim, &mut rng)).collect();
    let mut visual: Vec<Vec<f32>> = Vec::with_capacity(c);
    let mut region = Vec::with_capacity(c);
    let paired = paired_classes(c);
    for cls in 0..c {
        if cls < paired && cls % 2 == 1 {
            visual.push(visual[cls - 1].clone());
            region.push(region[cls - 1]);
        } else {
            visual.push(unit_vector(spec.visual_dim, &mut rng));
            region.push(rng.below(spec.regions));
        }
    }
    Prototypes { audio, visual, region }
}

/// Generate `spec.n_videos` videos and an 80/10/10 split.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let protos = prototypes(spec);
    let (t, r, p, q) = (spec.segments, spec.regions, spec.visual_dim, spec.audio_dim);

    // Balanced class assignment: every class appears floor or ceil(n / C) times.
    let mut classes: Vec<usize> = (0..spec.n_videos).map(|i| i % spec.classes).collect();
    root.derive(1).shuffle(&mut classes);

    let sigma = spec.noise_sigma as f64;
    let gain = spec.signal_gain;
    let samples = classes
        .iter()
        .enumerate()
        .map(|(i, &cls)| {
            let mut rng = root.derive(3 + i as u64);
            let len = rng.range_inclusive(spec.min_event_len, t);
            let start = rng.range_inclusive(0, t - len);
            let mut visual = Vec::with_capacity(t * r * p);
            let mut audio = Vec::with_capacity(t * q);
            let mut labels = Vec::with_capacity(t);
            for seg in 0..t {
                let event = seg >= start && seg < start + len;
                labels.push(if event { cls } else { spec.classes });
                for reg in 0..r {
                    let signal = event && reg == protos.region[cls];
                    for j in 0..p {
                        let s = if signal { gain * protos.visual[cls][j] } else { 0.0 };
                        visual.push(s + (sigma * rng.normal()) as f32);
                    }
                }
                for j in 0..q {
                    let s = if event { gain * protos.audio[cls][j] } else { 0.0 };
                    audio.push(s + (sigma * rng.normal()) as f32);
                }
            }
            VideoSample {
                id: i as u32,
                visual: Tensor::new(&[t, r, p], visual).expect("visual shape"),
                audio: Tensor::new(&[t, q], audio).expect("audio shape"),
                segment_labels: labels,
                video_label: cls,
            }
        })
        .collect();
    let manifest = SplitManifest::new(spec.n_videos, &mut root.derive(2));
    Ok(Dataset {
        spec: *spec,
        samples,
        manifest,
    })
}

/// Per-segment template matcher with oracle access to the class prototypes.
///
/// Each segment is assigned to the nearest of `C + 1` templates (zero for
/// background) in the space of region-averaged visual features concatenated
/// with audio. It sees segments in isolation and does not use audio to pick
/// a spatial region.
pub fn nearest_prototype_labels(spec: &DatasetSpec, protos: &Prototypes, sample: &VideoSample) -> Vec<usize> {
    let (t, r, p, q) = (spec.segments, spec.regions, spec.visual_dim, spec.audio_dim);
    let gain = spec.signal_gain;
    let templates: Vec<Vec<f32>> = (0..spec.classes)
        .map(|c| {
            let mut v: Vec<f32> = protos.visual[c].iter().map(|x| gain * x / r as f32).collect();
            v.extend(protos.audio[c].iter().map(|x| gain * x));
            v
        })
        .collect();
    (0..t)
        .map(|seg| {
            let mut feat = vec![0f32; p + q];
            for reg in 0..r {
                let base = (seg * r + reg) * p;
                for j in 0..p {
                    feat[j] += sample.visual.data()[base + j] / r as f32;
                }
            }
            feat[p..].copy_from_slice(sample.audio.row(seg));
            let bg: f32 = feat.iter().map(|x| x * x).sum();
            let mut best = (bg, spec.classes);
            for (c, tpl) in templates.iter().enumerate() {
                let d: f32 = feat.iter().zip(tpl).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect()
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_bundle(ds: &Dataset) -> Result<Vec<u8>> {
    let spec = &ds.spec;
    spec.validate()?;
    if ds.samples.len() != spec.n_videos {
        return Err(MpnError::Data(format!(
            "spec declares {} videos but {} are present",
            spec.n_videos,
            ds.samples.len()
        )));
    }
    let mut buf = Vec::with_capacity(spec.bundle_bytes());
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION);
    for v in [
        spec.n_videos as u32,
        spec.segments as u32,
        spec.classes as u32,
        spec.regions as u32,
        spec.visual_dim as u32,
        spec.audio_dim as u32,
        spec.min_event_len as u32,
        spec.noise_sigma.to_bits(),
        spec.signal_gain.to_bits(),
        spec.seed as u32,
        (spec.seed >> 32) as u32,
    ] {
        put_u32(&mut buf, v);
    }
    let (t, r, p, q) = (spec.segments, spec.regions, spec.visual_dim, spec.audio_dim);
    for s in &ds.samples {
        if s.visual.shape() != [t, r, p] || s.audio.shape() != [t, q] || s.segment_labels.len() != t {
            return Err(MpnError::Data(format!("video {} does not match the spec shapes", s.id)));
        }
        put_u32(&mut buf, s.id);
        for &l in &s.segment_labels {
            buf.push(if l == spec.classes { BACKGROUND_BYTE } else { l as u8 });
        }
        for x in s.visual.data().iter().chain(s.audio.data()) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    debug_assert_eq!(buf.len(), spec.bundle_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MpnError::Truncated {
                needed: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decode a bundle. The manifest is not part of the bundle; the returned
/// dataset carries an empty one.
pub fn decode_bundle(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match rd.take(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(MpnError::BadMagic(m));
        }
    };
    if magic != MAGIC {
        return Err(MpnError::BadMagic(magic));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(MpnError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let mut h = [0u32; HEADER_WORDS];
    for w in h.iter_mut() {
        *w = rd.u32()?;
    }
    let spec = DatasetSpec {
        n_videos: h[0] as usize,
        segments: h[1] as usize,
        classes: h[2] as usize,
        regions: h[3] as usize,
        visual_dim: h[4] as usize,
        audio_dim: h[5] as usize,
        min_event_len: h[6] as usize,
        noise_sigma: f32::from_bits(h[7]),
        signal_gain: f32::from_bits(h[8]),
        seed: h[9] as u64 | ((h[10] as u64) << 32),
    };
    spec.validate().map_err(|e| MpnError::Data(format!("bundle header: {e}")))?;
    if bytes.len() < spec.bundle_bytes() {
        return Err(MpnError::Truncated {
            needed: spec.bundle_bytes(),
            found: bytes.len(),
        });
    }
    if bytes.len() > spec.bundle_bytes() {
        return Err(MpnError::Data(format!(
            "{} trailing bytes after the last record",
            bytes.len() - spec.bundle_bytes()
        )));
    }
    let (t, r, p, q) = (spec.segments, spec.regions, spec.visual_dim, spec.audio_dim);
    let mut samples = Vec::with_capacity(spec.n_videos);
    for _ in 0..spec.n_videos {
        let id = rd.u32()?;
        let labels: Vec<usize> = rd
            .take(t)?
            .iter()
            .map(|&b| {
                if b == BACKGROUND_BYTE {
                    Ok(spec.classes)
                } else if (b as usize) < spec.classes {
                    Ok(b as usize)
                } else {
                    Err(MpnError::Data(format!("video {id}: label {b} out of range")))
                }
            })
            .collect::<Result<_>>()?;
        let visual = Tensor::new(&[t, r, p], rd.f32s(t * r * p)?)?;
        let audio = Tensor::new(&[t, q], rd.f32s(t * q)?)?;
        let video_label = labels
            .iter()
            .copied()
            .find(|&l| l != spec.classes)
            .ok_or_else(|| MpnError::Data(format!("video {id} has no event segment")))?;
        samples.push(VideoSample {
            id,
            visual,
            audio,
            segment_labels: labels,
            video_label,
        });
    }
    Ok(Dataset {
        spec,
        samples,
        manifest: SplitManifest::default(),
    })
}

/// Manifest path stored next to a bundle.
pub fn manifest_path(bundle: &Path) -> std::path::PathBuf {
    let mut s = bundle.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}

pub fn write_bundle(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_bundle(ds)?)?;
    fs::write(manifest_path(path), ds.manifest.to_text())?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut ds = decode_bundle(&bytes)?;
    let mpath = manifest_path(path);
    ds.manifest = if mpath.exists() {
        SplitManifest::from_text(&fs::read_to_string(&mpath)?)?
    } else {
        SplitManifest::new(ds.spec.n_videos, &mut Rng::new(ds.spec.seed).derive(2))
    };
    ds.manifest.check(ds.spec.n_videos)?;
    for (i, s) in ds.samples.iter().enumerate() {
        if s.id as usize != i {
            return Err(MpnError::Data(format!("record {i} carries id {}", s.id)));
        }
    }
    Ok(ds)
}

/// Stack videos into batch tensors `[B × T × R × p]` and `[B × T × q]`.
pub fn stack(samples: &[&VideoSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| MpnError::Data("empty batch".into()))?;
    let vs = first.visual.shape().to_vec();
    let as_ = first.audio.shape().to_vec();
    let mut visual = Vec::with_capacity(samples.len() * first.visual.len());
    let mut audio = Vec::with_capacity(samples.len() * first.audio.len());
    for s in samples {
        if s.visual.shape() != vs.as_slice() || s.audio.shape() != as_.as_slice() {
            return Err(MpnError::dim("stack", s.visual.shape(), &vs));
        }
        visual.extend_from_slice(s.visual.data());
        audio.extend_from_slice(s.audio.data());
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, vs[0], vs[1], vs[2]], visual)?,
        Tensor::new(&[b, as_[0], as_[1]], audio)?,
    ))
}
