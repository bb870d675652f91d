//! Modality combinations and ultrasound-like image synthesis from sliced MR
//! frames.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::raster::{read_gray_png, write_png16, write_png8, GrayPng, Image2};
use crate::sweep::SliceSeries;
use crate::volume::Channel;

/// A non-empty set of MR channels, kept in canonical channel order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalityCombo(BTreeSet<Channel>);

impl ModalityCombo {
    pub fn new(channels: impl IntoIterator<Item = Channel>) -> Result<Self> {
        let set: BTreeSet<Channel> = channels.into_iter().collect();
        if set.is_empty() {
            return Err(Error::InvalidArgument("modality combination must not be empty".into()));
        }
        Ok(Self(set))
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.0.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn label(&self) -> String {
        self.0.iter().map(Channel::as_str).collect::<Vec<_>>().join("-")
    }
}

impl fmt::Display for ModalityCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ModalityCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let channels = s.split(['-', '+', ',']).map(str::parse).collect::<Result<Vec<Channel>>>()?;
        let n = channels.len();
        let combo = Self::new(channels)?;
        if combo.len() != n {
            return Err(Error::InvalidArgument(format!("duplicate channel in combination {s:?}")));
        }
        Ok(combo)
    }
}

impl Serialize for ModalityCombo {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ModalityCombo {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which modality combinations to render for each case.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComboPolicy {
    #[default]
    AllNonempty,
    Listed(Vec<Vec<Channel>>),
}

/// Combinations in deterministic order: by size, then by canonical channel
/// order (`ceT1 < T2 < FLAIR`). Listed combinations keep their listed order.
pub fn enumerate_combos(available: &BTreeSet<Channel>, policy: &ComboPolicy) -> Result<Vec<ModalityCombo>> {
    match policy {
        ComboPolicy::AllNonempty => {
            let chans: Vec<&Channel> = available.iter().collect();
            let n = chans.len();
            if n == 0 {
                return Err(Error::InvalidArgument("no channels available".into()));
            }
            let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
                .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
                .collect();
            subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
            subsets
                .into_iter()
                .map(|s| ModalityCombo::new(s.into_iter().map(|i| chans[i].clone())))
                .collect()
        }
        ComboPolicy::Listed(lists) => {
            if lists.is_empty() {
                return Err(Error::InvalidArgument("listed combination policy is empty".into()));
            }
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(lists.len());
            for list in lists {
                let combo = ModalityCombo::new(list.iter().cloned())?;
                if combo.len() != list.len() {
                    return Err(Error::InvalidArgument(format!("duplicate channel in combination {list:?}")));
                }
                if let Some(missing) = list.iter().find(|c| !available.contains(c)) {
                    return Err(Error::MissingChannel(missing.to_string()));
                }
                if !seen.insert(combo.clone()) {
                    return Err(Error::InvalidArgument(format!("combination {combo} listed twice")));
                }
                out.push(combo);
            }
            Ok(out)
        }
    }
}

/// Renders one ultrasound-like image per frame of a slice series, in `[-1, 1]`.
pub trait Synthesizer: Send + Sync {
    fn synthesize(&self, series: &SliceSeries, temperature: f64, seed: u64) -> Result<Vec<Image2<f64>>>;

    fn describe(&self) -> String;
}

pub const MAX_TEMPERATURE: f64 = 2.0;

pub fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature <= MAX_TEMPERATURE {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must lie in (0, {MAX_TEMPERATURE}], got {temperature}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisParams {
    /// Depth attenuation coefficient, 1/mm.
    pub attenuation_per_mm: f64,
    pub blur_sigma_mm: f64,
    /// Log-normal speckle sigma at temperature 1.
    pub speckle_sigma: f64,
    pub tissue_gain: f64,
    /// Gain for non-zero labels without an explicit override.
    pub target_gain: f64,
    pub label_gains: BTreeMap<u8, f64>,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            attenuation_per_mm: 0.01,
            blur_sigma_mm: 0.75,
            speckle_sigma: 0.3,
            tissue_gain: 0.2,
            target_gain: 0.8,
            label_gains: BTreeMap::new(),
        }
    }
}

impl SynthesisParams {
    fn gain(&self, label: u8) -> f64 {
        match label {
            0 => self.tissue_gain,
            l => self.label_gains.get(&l).copied().unwrap_or(self.target_gain),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("attenuation_per_mm", self.attenuation_per_mm),
            ("blur_sigma_mm", self.blur_sigma_mm),
            ("speckle_sigma", self.speckle_sigma),
            ("tissue_gain", self.tissue_gain),
            ("target_gain", self.target_gain),
        ];
        for (name, v) in nonneg.into_iter().chain(self.label_gains.values().map(|&g| ("label gain", g))) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Built-in procedural synthesizer: channel-averaged MR brightness scaled
/// by tissue gain, multiplicative log-normal speckle whose sigma grows with
/// temperature, exponential depth attenuation and a Gaussian point-spread
/// blur.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProceduralSynthesizer {
    pub params: SynthesisParams,
}

impl ProceduralSynthesizer {
    pub fn new(params: SynthesisParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    fn frame(&self, series: &SliceSeries, f: usize, temperature: f64, seed: u64) -> Image2<f64> {
        let p = &self.params;
        let (w, h) = series.shape();
        let channels = &series.frames[f];
        let labels = &series.labels[f];
        let inv_c = 1.0 / channels.len() as f64;
        let sigma = temperature * p.speckle_sigma;
        let speckle = (sigma > 0.0).then(|| LogNormal::new(0.0, sigma).expect("sigma is finite and positive"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(f as u64);

        let mut img = vec![0.0; w * h];
        for (idx, out) in img.iter_mut().enumerate() {
            if !series.fov_mask.data()[idx] {
                continue;
            }
            let base = channels.iter().map(|c| (c.data()[idx] + 1.0) * 0.5).sum::<f64>() * inv_c;
            let mut v = base * p.gain(labels.data()[idx]);
            if let Some(dist) = &speckle {
                v *= dist.sample(&mut rng);
            }
            v *= (-p.attenuation_per_mm * series.depth_map.data()[idx]).exp();
            *out = v;
        }
        let img = gaussian_blur(&Image2::from_vec(w, h, img).expect("sized"), p.blur_sigma_mm / series.pixel_mm);
        Image2::from_fn(w, h, |u, v| {
            if *series.fov_mask.get(u, v) {
                (2.0 * img.get(u, v) - 1.0).clamp(-1.0, 1.0)
            } else {
                -1.0
            }
        })
    }
}

impl Synthesizer for ProceduralSynthesizer {
    fn synthesize(&self, series: &SliceSeries, temperature: f64, seed: u64) -> Result<Vec<Image2<f64>>> {
        check_temperature(temperature)?;
        Ok((0..series.frame_count())
            .into_par_iter()
            .map(|f| self.frame(series, f, temperature, seed))
            .collect())
    }

    fn describe(&self) -> String {
        "procedural".into()
    }
}

fn gaussian_kernel(sigma_px: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_px).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable Gaussian blur with edge replication. `sigma_px <= 0` is a no-op.
pub fn gaussian_blur(img: &Image2<f64>, sigma_px: f64) -> Image2<f64> {
    if !(sigma_px > 0.0) {
        return img.clone();
    }
    let k = gaussian_kernel(sigma_px);
    let r = (k.len() / 2) as isize;
    let (w, h) = img.shape();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let rows: Image2<f64> = Image2::from_fn(w, h, |u, v| {
        k.iter()
            .enumerate()
            .map(|(t, wt)| wt * img.get(clamp(u as isize + t as isize - r, w), v))
            .sum::<f64>()
    });
    Image2::from_fn(w, h, |u, v| {
        k.iter()
            .enumerate()
            .map(|(t, wt)| wt * rows.get(u, clamp(v as isize + t as isize - r, h)))
            .sum::<f64>()
    })
}

pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(300);

/// Delegates synthesis to an external program through a directory exchange.
///
/// The program is invoked as `command [args..] <in_dir> <out_dir>`. The input
/// directory holds `meta.json`, `fov_mask.png` (8-bit, 0/255) and one 16-bit
/// PNG per frame and channel named `frame_####_<channel>.png`. The program
/// must write `out_####.png` (8- or 16-bit grayscale) for every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalSynthesizer {
    pub command: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct ExchangeMeta<'a> {
    frame_count: usize,
    channels: Vec<&'a str>,
    shape: [usize; 2],
    spacing_mm: f64,
    temperature: f64,
    seed: u64,
}

impl ExternalSynthesizer {
    pub fn new(command: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            args: Vec::new(),
            timeout: DEFAULT_EXTERNAL_TIMEOUT,
        }
    }

    fn write_inputs(&self, dir: &Path, series: &SliceSeries, temperature: f64, seed: u64) -> Result<()> {
        let (w, h) = series.shape();
        let meta = ExchangeMeta {
            frame_count: series.frame_count(),
            channels: series.channel_names.iter().map(Channel::as_str).collect(),
            shape: [w, h],
            spacing_mm: series.pixel_mm,
            temperature,
            seed,
        };
        let meta_path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("exchange metadata serializes");
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        write_png8(&dir.join("fov_mask.png"), &series.fov_mask.map(|&m| if m { 255 } else { 0 }))?;
        for (f, frame) in series.frames.iter().enumerate() {
            for (name, img) in series.channel_names.iter().zip(frame) {
                write_png16(&dir.join(format!("frame_{f:04}_{name}.png")), img)?;
            }
        }
        Ok(())
    }

    fn run(&self, input: &Path, output: &Path, log_dir: &Path) -> Result<()> {
        let stderr_path = log_dir.join("stderr.txt");
        let stderr_file = std::fs::File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;
        let mut child = Command::new(&self.command)
            .args(&self.args)
            .arg(input)
            .arg(output)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(stderr_file)
            .spawn()
            .map_err(|e| Error::io(&self.command, e))?;
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait().map_err(|e| Error::io(&self.command, e))? {
                break status;
            }
            if start.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::ExternalTimeout(self.timeout.as_secs()));
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        if !status.success() {
            let mut stderr = String::new();
            if let Ok(mut f) = std::fs::File::open(&stderr_path) {
                let _ = f.read_to_string(&mut stderr);
            }
            return Err(Error::ExternalFailed {
                status: status.to_string(),
                stderr: stderr.trim_end().to_string(),
            });
        }
        Ok(())
    }

    fn read_outputs(&self, dir: &Path, expected: usize, shape: (usize, usize)) -> Result<Vec<Image2<f64>>> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut found = 0;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.starts_with("out_") && name.ends_with(".png") {
                found += 1;
            }
        }
        if found != expected {
            return Err(Error::FrameCount { expected, found });
        }
        (0..expected)
            .map(|f| {
                let path = dir.join(format!("out_{f:04}.png"));
                if !path.exists() {
                    return Err(Error::FrameCount { expected, found: f });
                }
                let img = match read_gray_png(&path)? {
                    GrayPng::Sixteen(img) => img.map(|&q| crate::raster::dequantize_unit(q)),
                    GrayPng::Eight(img) => img.map(|&q| q as f64 / 255.0 * 2.0 - 1.0),
                };
                if img.shape() != shape {
                    return Err(Error::ShapeMismatch(img.shape(), shape));
                }
                Ok(img)
            })
            .collect()
    }
}

impl Synthesizer for ExternalSynthesizer {
    fn synthesize(&self, series: &SliceSeries, temperature: f64, seed: u64) -> Result<Vec<Image2<f64>>> {
        check_temperature(temperature)?;
        let tmp = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = tmp.path().join("in");
        let output = tmp.path().join("out");
        for d in [&input, &output] {
            std::fs::create_dir(d).map_err(|e| Error::io(d, e))?;
        }
        self.write_inputs(&input, series, temperature, seed)?;
        self.run(&input, &output, tmp.path())?;
        self.read_outputs(&output, series.frame_count(), series.shape())
    }

    fn describe(&self) -> String {
        format!("exec:{}", self.command.display())
    }
}

/// Synthesizer selector, as written in configs and on the command line:
/// `procedural` or `exec:<path>`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum SynthesizerSpec {
    #[default]
    Procedural,
    Exec(PathBuf),
}

impl FromStr for SynthesizerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "procedural" {
            Ok(Self::Procedural)
        } else if let Some(path) = s.strip_prefix("exec:").filter(|p| !p.is_empty()) {
            Ok(Self::Exec(PathBuf::from(path)))
        } else {
            Err(Error::InvalidArgument(format!(
                "unknown synthesizer {s:?}; expected \"procedural\" or \"exec:<path>\""
            )))
        }
    }
}

impl fmt::Display for SynthesizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Procedural => f.write_str("procedural"),
            Self::Exec(p) => write!(f, "exec:{}", p.display()),
        }
    }
}

impl Serialize for SynthesizerSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SynthesizerSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl SynthesizerSpec {
    pub fn build(&self, params: &SynthesisParams, timeout: Duration) -> Result<Box<dyn Synthesizer>> {
        Ok(match self {
            Self::Procedural => Box::new(ProceduralSynthesizer::new(params.clone())?),
            Self::Exec(path) => Box::new(ExternalSynthesizer {
                command: path.clone(),
                args: Vec::new(),
                timeout,
            }),
        })
    }
}
