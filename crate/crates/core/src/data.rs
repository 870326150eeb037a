//! Synthetic two-domain vibration data, segmentation, stratified splits and
//! raw-archive ingestion.
//!
//! Each class is a "recording": a train of fault impulses, each ringing a
//! damped structural resonance, on top of a shaft-rate sinusoid and white
//! noise. The operating condition of a domain scales the impulse and shaft
//! rates (speed), the amplitude (load), the resonance frequencies (mounting)
//! and the noise floor. Recordings are cut into overlapping windows.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Data(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalDataset {
    /// `n × window`, raw (unstandardized) samples.
    pub segments: Tensor,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub class_names: Vec<String>,
}

impl SignalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn window(&self) -> usize {
        self.segments.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            segments: self.segments.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domain: self.domain,
            class_names: self.class_names.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Fault signature of one class under nominal conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    pub name: String,
    /// Impulses per second; 0 for a healthy machine.
    pub impulse_hz: f64,
    pub resonance_hz: f64,
    /// Damping ratio of the resonance.
    pub damping: f64,
    /// Impulse amplitude.
    pub severity: f64,
}

/// Generator settings for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ClassSignature>,
    pub sample_rate: f64,
    pub shaft_hz: f64,
    pub shaft_amplitude: f64,
    /// Scales impulse and shaft rates.
    pub speed: f64,
    /// Scales every amplitude.
    pub load: f64,
    /// Scales every resonance frequency.
    pub resonance_scale: f64,
    /// Standard deviation of additive white noise.
    pub noise: f64,
    /// Impulse timing jitter as a fraction of the impulse period.
    pub jitter: f64,
    pub samples_per_class: usize,
    pub window: usize,
    pub overlap: f64,
    pub seed: u64,
}

/// Ten health states: healthy, then three fault locations at three
/// severities, each exciting its own resonance.
pub fn default_classes() -> Vec<ClassSignature> {
    let mut classes = vec![ClassSignature {
        name: "normal".into(),
        impulse_hz: 0.0,
        resonance_hz: 2000.0,
        damping: 0.05,
        severity: 0.0,
    }];
    let locations = [("inner", 162.0, 900.0), ("ball", 141.0, 2400.0), ("outer", 107.0, 3900.0)];
    let severities = [("007", 0.6, 0.0), ("014", 1.0, 500.0), ("021", 1.6, 1000.0)];
    for (loc, rate, res) in locations {
        for (size, sev, offset) in severities {
            classes.push(ClassSignature {
                name: format!("{loc}_{size}"),
                impulse_hz: rate,
                resonance_hz: res + offset,
                damping: 0.003,
                severity: sev,
            });
        }
    }
    classes
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            sample_rate: 12_000.0,
            shaft_hz: 29.95,
            shaft_amplitude: 0.3,
            speed: 1.0,
            load: 1.0,
            resonance_scale: 1.0,
            noise: 0.3,
            jitter: 0.02,
            samples_per_class: 100,
            window: WINDOW,
            overlap: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The default shifted operating condition used as the target domain.
    pub fn default_target() -> Self {
        Self {
            speed: 1.2,
            load: 0.8,
            resonance_scale: 0.995,
            noise: 0.9,
            seed: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate / 2.0;
        if self.classes.len() < 2 {
            return Err(Error::Data("need at least two classes".into()));
        }
        if !(self.sample_rate > 0.0) || !(self.speed > 0.0) || !(self.load > 0.0) || !(self.resonance_scale > 0.0) {
            return Err(Error::Data("rates and scale factors must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::Data("noise must be nonnegative and jitter in [0, 0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) || self.window == 0 || self.samples_per_class == 0 {
            return Err(Error::Data("invalid segmentation settings".into()));
        }
        if self.shaft_hz < 0.0 || self.shaft_hz * self.speed >= nyquist {
            return Err(Error::Data("shaft rate must lie below Nyquist".into()));
        }
        for c in &self.classes {
            let rate = c.impulse_hz * self.speed;
            let res = c.resonance_hz * self.resonance_scale;
            if c.impulse_hz < 0.0 || rate >= nyquist || !(res > 0.0 && res < nyquist) {
                return Err(Error::Data(format!("class {}: frequencies must lie in (0, Nyquist)", c.name)));
            }
            if !(c.damping > 0.0 && c.damping < 1.0) || c.severity < 0.0 {
                return Err(Error::Data(format!("class {}: invalid damping or severity", c.name)));
            }
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        stride_for(self.window, self.overlap)
    }

    /// Recording length that yields exactly `samples_per_class` windows.
    pub fn recording_len(&self) -> usize {
        self.window + (self.samples_per_class - 1) * self.stride()
    }
}

fn stride_for(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// One long per-class signal before segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub class_name: String,
    pub label: usize,
    pub samples: Vec<f64>,
}

/// Generates the per-class recordings of one domain.
pub fn synth_recordings(spec: &SynthSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let len = spec.recording_len();
    let fs = spec.sample_rate;
    let mut out = Vec::with_capacity(spec.classes.len());
    for (label, c) in spec.classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(label as u64 + 1);
        let mut x = vec![0.0; len];

        let shaft = spec.shaft_hz * spec.speed;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for (t, v) in x.iter_mut().enumerate() {
            *v += spec.load * spec.shaft_amplitude * (std::f64::consts::TAU * shaft * t as f64 / fs + phase).sin();
        }

        if c.impulse_hz > 0.0 && c.severity > 0.0 {
            let period = fs / (c.impulse_hz * spec.speed);
            let omega = std::f64::consts::TAU * c.resonance_hz * spec.resonance_scale / fs;
            let decay = c.damping * omega;
            // ring until the envelope drops below 1e-6
            let ring = ((1e-6f64).ln() / -decay).ceil() as usize;
            let amp = spec.load * c.severity;
            let mut t0: f64 = rng.random_range(0.0..period);
            while (t0 as usize) < len {
                let j = period * spec.jitter * rng.random_range(-1.0..1.0);
                let start = (t0 + j).round().max(0.0) as usize;
                for k in 0..ring.min(len.saturating_sub(start)) {
                    let kf = k as f64;
                    x[start + k] += amp * (-decay * kf).exp() * (omega * kf).cos();
                }
                t0 += period;
            }
        }

        if spec.noise > 0.0 {
            for v in x.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += spec.noise * n;
            }
        }
        out.push(Recording {
            class_name: c.name.clone(),
            label,
            samples: x,
        });
    }
    Ok(out)
}

/// Sliding windows of length `window` with stride `window·(1 − overlap)`.
pub fn segment_signal(raw: &[f64], window: usize, overlap: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Data(format!("overlap {overlap} outside [0, 1)")));
    }
    if window == 0 || raw.len() < window {
        return Err(Error::Data(format!("signal of {} samples is shorter than window {window}", raw.len())));
    }
    let stride = stride_for(window, overlap);
    let count = (raw.len() - window) / stride + 1;
    Ok((0..count).map(|i| raw[i * stride..i * stride + window].to_vec()).collect())
}

fn dataset_from_recordings(
    recs: &[Recording],
    class_names: Vec<String>,
    domain: Domain,
    window: usize,
    overlap: f64,
) -> Result<SignalDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for r in recs {
        for seg in segment_signal(&r.samples, window, overlap)? {
            data.extend(seg);
            labels.push(r.label);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(SignalDataset {
        segments: Tensor::new(vec![labels.len(), window], data)?,
        labels,
        domain,
        class_names,
    })
}

/// Synthesizes one domain as a segmented dataset.
pub fn synth_domain(spec: &SynthSpec, domain: Domain) -> Result<SignalDataset> {
    let recs = synth_recordings(spec)?;
    let names = spec.classes.iter().map(|c| c.name.clone()).collect();
    dataset_from_recordings(&recs, names, domain, spec.window, spec.overlap)
}

/// Synthesizes a source/target pair; both specs must describe the same
/// classes.
pub fn synth_domain_pair(source: &SynthSpec, target: &SynthSpec) -> Result<(SignalDataset, SignalDataset)> {
    let names = |s: &SynthSpec| s.classes.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    if names(source) != names(target) || source.window != target.window {
        return Err(Error::Data("source and target specs describe different classes or windows".into()));
    }
    Ok((synth_domain(source, Domain::Source)?, synth_domain(target, Domain::Target)?))
}

/// Stratified split by the given ratios; within each class the sample order
/// is shuffled with `seed`.
pub fn split_dataset(ds: &SignalDataset, ratios: (f64, f64, f64), seed: u64) -> Result<(SignalDataset, SignalDataset, SignalDataset)> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (cls, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(Error::Data(format!("class {cls} has {} samples, need at least 3", idx.len())));
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_tr = (n * a).round() as usize;
        let n_va = ((n * b).round() as usize).min(idx.len() - n_tr);
        tr.extend_from_slice(&idx[..n_tr]);
        va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        te.extend_from_slice(&idx[n_tr + n_va..]);
    }
    Ok((ds.subset(&tr)?, ds.subset(&va)?, ds.subset(&te)?))
}

/// Zero mean, unit variance per row; constant rows become zeros.
pub fn standardize(segments: &Tensor) -> Result<Tensor> {
    let (n, l) = segments.dims2()?;
    let mut out = segments.data().to_vec();
    for i in 0..n {
        let row = &mut out[i * l..(i + 1) * l];
        let mean = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::new(vec![n, l], out)
}

pub const MANIFEST: &str = "manifest.tsv";

/// One manifest line: `<relative-path>\t<class-name>\t<domain>\t<label>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_name: String,
    pub domain: Domain,
    pub label: usize,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("manifest line {}: expected 4 tab-separated fields", lineno + 1)));
        }
        let label = f[3]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad label {:?}", lineno + 1, f[3])))?;
        out.push(ManifestEntry {
            path: PathBuf::from(f[0]),
            class_name: f[1].to_string(),
            domain: f[2].parse().map_err(|e| Error::Data(format!("manifest line {}: {e}", lineno + 1)))?,
            label,
        });
    }
    Ok(out)
}

pub fn read_raw(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!("{}: length is not a multiple of 8 bytes", path.display())));
    }
    let v: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite sample", path.display())));
    }
    Ok(v)
}

pub fn write_raw(path: &Path, samples: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for v in samples {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Loads the `domain` entries of the archive at `dir`, segmenting each file.
pub fn load_archive(dir: &Path, domain: Domain, window: usize, overlap: f64) -> Result<SignalDataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let entries = parse_manifest(&text)?;
    if entries.is_empty() {
        return Err(Error::Data("manifest lists no files".into()));
    }
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    for e in &entries {
        if let Some(prev) = names.insert(e.label, e.class_name.clone()) {
            if prev != e.class_name {
                return Err(Error::Data(format!("label {} names both {prev:?} and {:?}", e.label, e.class_name)));
            }
        }
    }
    let n_c = names.len();
    if names.keys().copied().ne(0..n_c) {
        return Err(Error::Data("labels must be contiguous from 0".into()));
    }
    let mut seen = BTreeMap::new();
    for (l, n) in &names {
        if let Some(other) = seen.insert(n.clone(), *l) {
            return Err(Error::Data(format!("class {n:?} has labels {other} and {l}")));
        }
    }
    let mut recs = Vec::new();
    for e in entries.iter().filter(|e| e.domain == domain) {
        recs.push(Recording {
            class_name: e.class_name.clone(),
            label: e.label,
            samples: read_raw(&dir.join(&e.path))?,
        });
    }
    if recs.is_empty() {
        return Err(Error::Data(format!("manifest has no {} files", domain.as_str())));
    }
    dataset_from_recordings(&recs, names.into_values().collect(), domain, window, overlap)
}

/// Writes recordings of one domain under `dir/<domain>/` and appends their
/// manifest lines.
pub fn write_recordings(dir: &Path, domain: Domain, recs: &[Recording]) -> Result<()> {
    let sub = dir.join(domain.as_str());
    fs::create_dir_all(&sub)?;
    let mut manifest = fs::OpenOptions::new().create(true).append(true).open(dir.join(MANIFEST))?;
    for r in recs {
        let rel = PathBuf::from(domain.as_str()).join(format!("{:02}_{}.f64", r.label, r.class_name));
        write_raw(&dir.join(&rel), &r.samples)?;
        writeln!(manifest, "{}\t{}\t{}\t{}", rel.display(), r.class_name, domain.as_str(), r.label)?;
    }
    Ok(())
}

/// Exports a segmented dataset as one file per class holding its segments
/// back to back; loading it with zero overlap restores the same tensors.
pub fn export_dataset(dir: &Path, ds: &SignalDataset) -> Result<()> {
    let mut recs = Vec::new();
    for (label, name) in ds.class_names.iter().enumerate() {
        let mut samples = Vec::new();
        for (i, &y) in ds.labels.iter().enumerate() {
            if y == label {
                samples.extend_from_slice(ds.segments.row(i));
            }
        }
        if !samples.is_empty() {
            recs.push(Recording { class_name: name.clone(), label, samples });
        }
    }
    write_recordings(dir, ds.domain, &recs)
}
