//! Training-set generation: modality combinations × K placed sweeps ×
//! sampling temperatures, with deterministic per-job seeding, an on-disk
//! series layout and a manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! series_<combo>_<kkk>_<tau>/img_####.png   16-bit gray, [-1, 1] linear
//! series_<combo>_<kkk>_<tau>/lbl_####.png   8-bit raw label values
//! series_<combo>_<kkk>_<tau>/meta.json      placement and frame geometry
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_gray_png, write_png16, write_png8, GrayPng, Image2};
use crate::sweep::{
    load_reference_sweep, slice_series, synth_reference_sweep, FrameGeometry, PlacementContext, PlacementOptions,
    ReferenceSweep, SweepFile, SweepParams, SweepPlacement, DEFAULT_LAMBDA,
};
use crate::synthesis::{
    check_temperature, enumerate_combos, ComboPolicy, ModalityCombo, SynthesisParams, Synthesizer, SynthesizerSpec,
    DEFAULT_EXTERNAL_TIMEOUT,
};
use crate::volume::CaseData;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SERIES_META_FILE: &str = "meta.json";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TEMPERATURES: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

/// `tau_index` reserved for the reference-sweep choice of a combination.
const SWEEP_CHOICE_TAU: u64 = u64::MAX;

fn fnv1a(hash: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(hash, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed of one generation job.
///
/// FNV-1a (64-bit) over `master_seed` (LE), the case id bytes, a `0xFF`
/// separator, then `combo_index`, `k` and `tau_index` (each u64 LE),
/// followed by the splitmix64 finalizer. This function is part of the
/// dataset format: changing it changes every generated dataset.
///
/// Placements use `tau_index = 0`; synthesis for temperature `t` uses
/// `tau_index = t + 1`.
pub fn job_seed(master_seed: u64, case_id: &str, combo_index: u64, k: u64, tau_index: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325;
    h = fnv1a(h, &master_seed.to_le_bytes());
    h = fnv1a(h, case_id.as_bytes());
    h = fnv1a(h, &[0xff]);
    for v in [combo_index, k, tau_index] {
        h = fnv1a(h, &v.to_le_bytes());
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Where a reference sweep comes from: `"default"`, a JSON file path, or an
/// inline template object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepSource {
    Named(String),
    Inline(SweepFile),
}

impl SweepSource {
    fn resolve(&self, index: usize, base_dir: &Path) -> Result<(String, ReferenceSweep)> {
        match self {
            SweepSource::Named(name) if name == "default" => {
                Ok(("default".into(), synth_reference_sweep(&SweepParams::default())?))
            }
            SweepSource::Named(path) => {
                let path = base_dir.join(path);
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("sweep_{index}"));
                Ok((id, load_reference_sweep(&path)?))
            }
            SweepSource::Inline(file) => Ok((format!("inline_{index}"), ReferenceSweep::from_file_repr(file.clone())?)),
        }
    }
}

fn default_k() -> usize {
    1
}

fn default_temperatures() -> Vec<f64> {
    DEFAULT_TEMPERATURES.to_vec()
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_sweeps() -> Vec<SweepSource> {
    vec![SweepSource::Named("default".into())]
}

fn default_timeout() -> u64 {
    DEFAULT_EXTERNAL_TIMEOUT.as_secs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Placed sweeps per modality combination.
    #[serde(alias = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default)]
    pub combo_policy: ComboPolicy,
    /// Contact-point length scale, mm².
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_sweeps")]
    pub reference_sweeps: Vec<SweepSource>,
    #[serde(default)]
    pub synthesizer: SynthesizerSpec,
    #[serde(default)]
    pub synthesis: SynthesisParams,
    #[serde(default = "default_timeout")]
    pub external_timeout_s: u64,
    /// Draw one set of K reference sweeps for all combinations instead of
    /// an independent draw per combination.
    #[serde(default)]
    pub share_sweeps_across_combos: bool,
    /// Place a fresh sweep for every temperature instead of sharing one
    /// placement across the temperatures of a `(combo, k)` pair.
    #[serde(default)]
    pub per_tau_placement: bool,
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    /// Directory that relative sweep paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            temperatures: default_temperatures(),
            combo_policy: ComboPolicy::default(),
            lambda: DEFAULT_LAMBDA,
            beta: 0.0,
            master_seed: 0,
            reference_sweeps: default_sweeps(),
            synthesizer: SynthesizerSpec::Procedural,
            synthesis: SynthesisParams::default(),
            external_timeout_s: default_timeout(),
            share_sweeps_across_combos: false,
            per_tau_placement: false,
            output_dir: None,
            base_dir: PathBuf::new(),
        }
    }
}

impl GenerationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::json("generation config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file; relative sweep paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if self.temperatures.is_empty() {
            return Err(Error::InvalidArgument("temperature list is empty".into()));
        }
        let mut names = BTreeSet::new();
        for &t in &self.temperatures {
            check_temperature(t)?;
            if !names.insert(t.to_string()) {
                return Err(Error::InvalidArgument(format!("temperature {t} listed twice")));
            }
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !self.beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite".into()));
        }
        if self.reference_sweeps.is_empty() {
            return Err(Error::InvalidArgument("no reference sweeps configured".into()));
        }
        self.synthesis.validate()
    }

    pub fn resolve_sweeps(&self) -> Result<Vec<(String, ReferenceSweep)>> {
        let resolved = self
            .reference_sweeps
            .iter()
            .enumerate()
            .map(|(i, s)| s.resolve(i, &self.base_dir))
            .collect::<Result<Vec<_>>>()?;
        let mut ids = BTreeSet::new();
        for (id, _) in &resolved {
            if !ids.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("reference sweep id {id:?} used twice")));
            }
        }
        Ok(resolved)
    }

    pub fn build_synthesizer(&self) -> Result<Box<dyn Synthesizer>> {
        self.synthesizer
            .build(&self.synthesis, Duration::from_secs(self.external_timeout_s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    /// Series directory, relative to the dataset root.
    pub dir: String,
    pub combo: ModalityCombo,
    pub combo_index: usize,
    /// 1-based sweep index within the combination.
    pub k: usize,
    pub tau: f64,
    pub tau_index: usize,
    pub reference_sweep_id: String,
    pub frame_count: usize,
    pub placement_seed: u64,
    pub job_seed: u64,
    pub placement: SweepPlacement,
    pub images: Vec<String>,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub created_unix: u64,
    pub case_id: String,
    pub combos: Vec<ModalityCombo>,
    pub k: usize,
    pub temperatures: Vec<f64>,
    pub label_set: Vec<u8>,
    /// `[columns, rows]`.
    pub frame_shape: [usize; 2],
    pub synthesizer: String,
    pub config: GenerationConfig,
    pub series: Vec<SeriesRecord>,
}

#[derive(Serialize)]
struct SeriesMeta<'a> {
    combo: &'a ModalityCombo,
    k: usize,
    tau: f64,
    reference_sweep_id: &'a str,
    reference_sweep: SweepFile,
    placement: &'a SweepPlacement,
    job_seed: u64,
    pixel_mm: f64,
    geometry: &'a [FrameGeometry],
}

pub fn series_dir_name(combo: &ModalityCombo, k: usize, tau: f64) -> String {
    format!("series_{combo}_{k:03}_{tau}")
}

struct Group<'a> {
    combo_index: usize,
    combo: &'a ModalityCombo,
    k: usize,
    sweep_index: usize,
}

/// Indices into the reference-sweep list, one per k. Without replacement
/// when the list has at least K entries.
fn choose_sweeps(count: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count >= k {
        sample(&mut rng, count, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..count)).collect()
    }
}

/// Write `img_####.png` (16-bit) and `lbl_####.png` (8-bit) frames into
/// `dir`, returning the image and label file names.
pub fn write_series(dir: &Path, images: &[Image2<f64>], labels: &[Image2<u8>]) -> Result<(Vec<String>, Vec<String>)> {
    if images.len() != labels.len() {
        return Err(Error::FrameCount {
            expected: labels.len(),
            found: images.len(),
        });
    }
    let mut image_names = Vec::with_capacity(images.len());
    let mut label_names = Vec::with_capacity(images.len());
    for (f, (img, lbl)) in images.iter().zip(labels).enumerate() {
        let img_name = format!("img_{f:04}.png");
        let lbl_name = format!("lbl_{f:04}.png");
        write_png16(&dir.join(&img_name), img)?;
        write_png8(&dir.join(&lbl_name), lbl)?;
        image_names.push(img_name);
        label_names.push(lbl_name);
    }
    Ok((image_names, label_names))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate the full dataset for one case into `out_dir` using at most
/// `jobs` worker threads. The output is identical for any `jobs`.
pub fn generate_dataset(
    case: &CaseData,
    case_id: &str,
    config: &GenerationConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<Manifest> {
    config.validate()?;
    if case_id.is_empty() {
        return Err(Error::InvalidArgument("case id must not be empty".into()));
    }
    let combos = enumerate_combos(&case.available_channels(), &config.combo_policy)?;
    let sweeps = config.resolve_sweeps()?;
    let synthesizer = config.build_synthesizer()?;
    let ctx = PlacementContext::new(case)?;
    let opts = PlacementOptions {
        lambda: config.lambda,
        beta: config.beta,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut groups = Vec::with_capacity(combos.len() * config.k);
    for (ci, combo) in combos.iter().enumerate() {
        let choice_combo = if config.share_sweeps_across_combos { 0 } else { ci as u64 };
        let choice_seed = job_seed(config.master_seed, case_id, choice_combo, 0, SWEEP_CHOICE_TAU);
        for (k0, sweep_index) in choose_sweeps(sweeps.len(), config.k, choice_seed).into_iter().enumerate() {
            groups.push(Group {
                combo_index: ci,
                combo,
                k: k0 + 1,
                sweep_index,
            });
        }
    }
    log::info!(
        "generating {} series ({} combos x K={} x {} temperatures) for case {case_id}",
        groups.len() * config.temperatures.len(),
        combos.len(),
        config.k,
        config.temperatures.len()
    );

    let run_group = |g: &Group| -> Result<Vec<SeriesRecord>> {
        let (sweep_id, sweep) = &sweeps[g.sweep_index];
        let channels = g.combo.channels();
        let placement_seed = job_seed(config.master_seed, case_id, g.combo_index as u64, g.k as u64, 0);
        let shared = if config.per_tau_placement {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(placement_seed);
            let placement = ctx.place(sweep, &opts, &mut rng)?;
            let series = slice_series(case, &placement, sweep, &channels)?;
            Some((placement, series))
        };
        let mut records = Vec::with_capacity(config.temperatures.len());
        for (ti, &tau) in config.temperatures.iter().enumerate() {
            let seed = job_seed(config.master_seed, case_id, g.combo_index as u64, g.k as u64, ti as u64 + 1);
            let own;
            let (placement, series, placement_seed) = match &shared {
                Some((p, s)) => (p, s, placement_seed),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(1);
                    let p = ctx.place(sweep, &opts, &mut rng)?;
                    let s = slice_series(case, &p, sweep, &channels)?;
                    own = (p, s);
                    (&own.0, &own.1, seed)
                }
            };
            let images = synthesizer.synthesize(series, tau, seed)?;
            let dir_name = series_dir_name(g.combo, g.k, tau);
            let dir = out_dir.join(&dir_name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (image_names, label_names) = write_series(&dir, &images, &series.labels)?;
            let prefix = |names: Vec<String>| names.into_iter().map(|n| format!("{dir_name}/{n}")).collect();
            let (image_names, label_names): (Vec<String>, Vec<String>) = (prefix(image_names), prefix(label_names));
            write_json(
                &dir.join(SERIES_META_FILE),
                &SeriesMeta {
                    combo: g.combo,
                    k: g.k,
                    tau,
                    reference_sweep_id: sweep_id,
                    reference_sweep: sweep.to_file_repr(),
                    placement,
                    job_seed: seed,
                    pixel_mm: series.pixel_mm,
                    geometry: &series.geometry,
                },
            )?;
            records.push(SeriesRecord {
                dir: dir_name,
                combo: g.combo.clone(),
                combo_index: g.combo_index,
                k: g.k,
                tau,
                tau_index: ti,
                reference_sweep_id: sweep_id.clone(),
                frame_count: images.len(),
                placement_seed,
                job_seed: seed,
                placement: placement.clone(),
                images: image_names,
                labels: label_names,
            });
        }
        log::debug!("finished {} k={}", g.combo, g.k);
        Ok(records)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let per_group: Vec<Vec<SeriesRecord>> = pool.install(|| groups.par_iter().map(run_group).collect::<Result<_>>())?;

    let frame_shape = sweeps[0].1.frame_shape;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        case_id: case_id.to_string(),
        combos,
        k: config.k,
        temperatures: config.temperatures.clone(),
        label_set: case.tumor.label_set.iter().copied().collect(),
        frame_shape: [frame_shape.0, frame_shape.1],
        synthesizer: synthesizer.describe(),
        config: config.clone(),
        series: per_group.into_iter().flatten().collect(),
    };
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    write_json(&tmp, &manifest)?;
    let dst = out_dir.join(MANIFEST_FILE);
    std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub series_checked: usize,
    pub files_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, file: impl Into<String>, reason: impl Into<String>) {
        self.violations.push(Violation {
            file: file.into(),
            reason: reason.into(),
        });
    }
}

enum Expect<'a> {
    Image,
    Label(&'a BTreeSet<u8>),
}

fn check_png(root: &Path, rel: &str, shape: (usize, usize), expect: Expect) -> Option<String> {
    let path = root.join(rel);
    if !path.is_file() {
        return Some("missing file".into());
    }
    let img = match read_gray_png(&path) {
        Ok(img) => img,
        Err(e) => return Some(format!("unreadable image: {e}")),
    };
    if img.shape() != shape {
        return Some(format!("shape {:?}, expected {:?}", img.shape(), shape));
    }
    match (expect, img) {
        (Expect::Image, GrayPng::Sixteen(_)) => None,
        (Expect::Image, GrayPng::Eight(_)) => Some("expected 16-bit image".into()),
        (Expect::Label(_), GrayPng::Sixteen(_)) => Some("expected 8-bit label image".into()),
        (Expect::Label(allowed), GrayPng::Eight(img)) => img
            .data()
            .iter()
            .find(|&&v| v != 0 && !allowed.contains(&v))
            .map(|v| format!("invalid label value {v}")),
    }
}

/// Re-check a generated dataset: manifest count law, file presence, image
/// depths and shapes, label values and placement sharing.
pub fn validate_dataset(dir: &Path) -> Result<ValidationReport> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let mut report = ValidationReport::default();
    let manifest = match load_manifest(&dir.join(MANIFEST_FILE)) {
        Ok(m) => m,
        Err(e) => {
            report.push(MANIFEST_FILE, format!("cannot load manifest: {e}"));
            return Ok(report);
        }
    };

    let expected = manifest.combos.len() * manifest.k * manifest.temperatures.len();
    if manifest.series.len() != expected {
        report.push(
            MANIFEST_FILE,
            format!(
                "{} series recorded, expected {} combos x K={} x {} temperatures = {expected}",
                manifest.series.len(),
                manifest.combos.len(),
                manifest.k,
                manifest.temperatures.len()
            ),
        );
    }
    let mut seen = BTreeSet::new();
    for r in &manifest.series {
        let key = (r.combo.label(), r.k, r.tau.to_string());
        let known = manifest.combos.contains(&r.combo)
            && (1..=manifest.k).contains(&r.k)
            && manifest.temperatures.get(r.tau_index) == Some(&r.tau);
        if !known {
            report.push(&r.dir, "series outside the configured combos, K and temperatures");
        }
        if !seen.insert(key) {
            report.push(&r.dir, "duplicate series record");
        }
    }

    let shared = !manifest.config.per_tau_placement;
    let mut placements: BTreeMap<(String, usize), &SweepPlacement> = BTreeMap::new();
    let label_set: BTreeSet<u8> = manifest.label_set.iter().copied().collect();
    let shape = (manifest.frame_shape[0], manifest.frame_shape[1]);
    for r in &manifest.series {
        report.series_checked += 1;
        if shared {
            let first = placements.entry((r.combo.label(), r.k)).or_insert(&r.placement);
            if *first != &r.placement {
                report.push(&r.dir, format!("placement differs from other temperatures of {} k={}", r.combo, r.k));
            }
        }
        if r.images.len() != r.frame_count || r.labels.len() != r.frame_count {
            report.push(
                &r.dir,
                format!(
                    "{} images and {} labels listed for {} frames",
                    r.images.len(),
                    r.labels.len(),
                    r.frame_count
                ),
            );
        }
        let meta = format!("{}/{SERIES_META_FILE}", r.dir);
        if !dir.join(&meta).is_file() {
            report.push(meta, "missing file");
        }
        let checks: Vec<(&String, Option<String>)> = r
            .images
            .par_iter()
            .map(|f| (f, check_png(dir, f, shape, Expect::Image)))
            .chain(r.labels.par_iter().map(|f| (f, check_png(dir, f, shape, Expect::Label(&label_set)))))
            .collect();
        for (file, problem) in checks {
            report.files_checked += 1;
            if let Some(reason) = problem {
                report.push(file.clone(), reason);
            }
        }
    }
    Ok(report)
}
