//! Pluggable detectors.
//!
//! A [`Backend`] turns an [`InferenceRequest`] (an image region plus the
//! classes it may report) into region-local [`ScoredBox`]es. Four kinds ship
//! with the crate:
//!
//! * `oracle` returns ground truth,
//! * `jitter` returns ground truth degraded by a seeded [`JitterModel`],
//! * `replay` reads stored [`DetectionDocument`]s,
//! * `exec` talks to a child process over the line-delimited protocol in
//!   [`crate::wire`].
//!
//! Oracle kinds assign a ground-truth box to a region when the box centre lies
//! in the half-open region `[x_min, x_max) × [y_min, y_max)`, and return it
//! unclipped, translated into region-local coordinates. Each object therefore
//! belongs to exactly one tile of a grid, and remapping restores it exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, ClassRegistry, ClassSet};
use crate::geometry::{BBox, ScoredBox};
use crate::wire::{region_key, DecodeError, DetectionDocument, WireDetection, WireRequest, WireResponse};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("oracle backend needs ground truth for image {0:?}")]
    MissingTruth(String),
    #[error("no stored response for {image_id}@{region}")]
    ReplayMiss { image_id: String, region: String },
    #[error("replay document {path}: {message}")]
    ReplayDocument { path: PathBuf, message: String },
    #[error("invalid detection for {image_id}: {source}")]
    Decode {
        image_id: String,
        #[source]
        source: DecodeError,
    },
    #[error("external process {command:?}: {message}")]
    Process { command: String, message: String },
    #[error("external process {command:?} exited with {status}; stderr: {stderr}")]
    ProcessExit {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("invalid backend descriptor {0:?}")]
    Descriptor(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub image_id: String,
    /// Global coordinates of the crop.
    pub region: BBox,
    /// Input size the detector should present to its model.
    pub resize_to: (u32, u32),
    pub allowed_classes: ClassSet,
}

/// Seeded degradation applied by the `jitter` backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterModel {
    /// Standard deviation of the Gaussian noise added to each coordinate.
    pub coordinate_noise_sigma: f64,
    /// Per-label override of `coordinate_noise_sigma`.
    #[serde(default)]
    pub class_noise_sigma: BTreeMap<String, f64>,
    /// Matched detections score `1 - u * score_spread`, `u ~ U[0, 1)`.
    pub score_spread: f64,
    pub miss_rate: f64,
    /// Expected number of spurious boxes per request (Poisson).
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl Default for JitterModel {
    fn default() -> Self {
        Self {
            coordinate_noise_sigma: 0.0,
            class_noise_sigma: BTreeMap::new(),
            score_spread: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }
}

impl JitterModel {
    pub fn validate(&self) -> Result<(), String> {
        let sigmas_ok = std::iter::once(&self.coordinate_noise_sigma)
            .chain(self.class_noise_sigma.values())
            .all(|s| s.is_finite() && *s >= 0.0);
        if !sigmas_ok {
            return Err("noise sigma must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.score_spread) {
            return Err("score spread must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.miss_rate) {
            return Err("miss rate must be in [0, 1)".into());
        }
        if !(self.false_positive_rate.is_finite() && self.false_positive_rate >= 0.0) {
            return Err("false positive rate must be >= 0".into());
        }
        Ok(())
    }
}

/// Which detector to use, as written on the command line and in logged
/// configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendDescriptor {
    Oracle,
    JitteredOracle(JitterModel),
    FileReplay { path: PathBuf },
    ExternalProcess { command: Vec<String> },
}

impl FromStr for BackendDescriptor {
    type Err = BackendError;

    /// Accepted forms:
    ///
    /// * `oracle`
    /// * `jitter[:key=value,...]` with keys `sigma`, `sigma.<label>`,
    ///   `spread`, `miss`, `fp`, `seed`
    /// * `replay:<directory>`
    /// * `exec:<program> [args...]` (whitespace separated)
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BackendError::Descriptor(s.to_string());
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "oracle" if rest.is_empty() => Ok(BackendDescriptor::Oracle),
            "jitter" => {
                let mut m = JitterModel::default();
                for kv in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                    let num = || v.trim().parse::<f64>().map_err(|_| bad());
                    match k.trim() {
                        "sigma" => m.coordinate_noise_sigma = num()?,
                        "spread" => m.score_spread = num()?,
                        "miss" => m.miss_rate = num()?,
                        "fp" => m.false_positive_rate = num()?,
                        "seed" => m.seed = v.trim().parse().map_err(|_| bad())?,
                        k if k.starts_with("sigma.") => {
                            m.class_noise_sigma.insert(k["sigma.".len()..].to_string(), num()?);
                        }
                        _ => return Err(bad()),
                    }
                }
                m.validate().map_err(|e| BackendError::Descriptor(format!("{s}: {e}")))?;
                Ok(BackendDescriptor::JitteredOracle(m))
            }
            "replay" if !rest.is_empty() => Ok(BackendDescriptor::FileReplay { path: rest.into() }),
            "exec" => {
                let command: Vec<String> = rest.split_whitespace().map(String::from).collect();
                if command.is_empty() {
                    return Err(bad());
                }
                Ok(BackendDescriptor::ExternalProcess { command })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for BackendDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendDescriptor::Oracle => write!(f, "oracle"),
            BackendDescriptor::JitteredOracle(m) => {
                write!(
                    f,
                    "jitter:sigma={},spread={},miss={},fp={},seed={}",
                    m.coordinate_noise_sigma, m.score_spread, m.miss_rate, m.false_positive_rate, m.seed
                )?;
                for (label, s) in &m.class_noise_sigma {
                    write!(f, ",sigma.{label}={s}")?;
                }
                Ok(())
            }
            BackendDescriptor::FileReplay { path } => write!(f, "replay:{}", path.display()),
            BackendDescriptor::ExternalProcess { command } => write!(f, "exec:{}", command.join(" ")),
        }
    }
}

impl BackendDescriptor {
    pub fn build(&self, registry: &ClassRegistry) -> Result<Box<dyn Backend>, BackendError> {
        Ok(match self {
            BackendDescriptor::Oracle => Box::new(OracleBackend { jitter: None, registry: registry.clone() }),
            BackendDescriptor::JitteredOracle(m) => {
                m.validate().map_err(BackendError::Descriptor)?;
                Box::new(OracleBackend {
                    jitter: Some(m.clone()),
                    registry: registry.clone(),
                })
            }
            BackendDescriptor::FileReplay { path } => Box::new(ReplayBackend::new(path.clone(), registry.clone())),
            BackendDescriptor::ExternalProcess { command } => {
                Box::new(ExternalBackend::new(command.clone(), registry.clone()))
            }
        })
    }

    /// Whether the detector needs ground truth to answer.
    pub fn needs_truth(&self) -> bool {
        matches!(self, BackendDescriptor::Oracle | BackendDescriptor::JitteredOracle(_))
    }
}

pub trait Backend: Send + Sync {
    /// Detections for one request in region-local coordinates. `truth` is the
    /// image's ground truth in global coordinates, used by oracle kinds only.
    fn infer(&self, request: &InferenceRequest, truth: Option<&[Annotation]>) -> Result<Vec<ScoredBox>, BackendError>;

    /// Backends that cannot serve concurrent requests return `true`.
    fn single_flight(&self) -> bool {
        false
    }

    /// Answers several requests; results follow request order.
    fn infer_batch(
        &self,
        requests: &[InferenceRequest],
        truth: Option<&[Annotation]>,
    ) -> Vec<Result<Vec<ScoredBox>, BackendError>> {
        if self.single_flight() {
            requests.iter().map(|r| self.infer(r, truth)).collect()
        } else {
            requests.par_iter().map(|r| self.infer(r, truth)).collect()
        }
    }
}

/// Builds the backend and answers a single request.
pub fn infer(
    descriptor: &BackendDescriptor,
    registry: &ClassRegistry,
    request: &InferenceRequest,
    truth: Option<&[Annotation]>,
) -> Result<Vec<ScoredBox>, BackendError> {
    descriptor.build(registry)?.infer(request, truth)
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Portable per-request seed from the model seed, image id and region.
fn request_seed(seed: u64, req: &InferenceRequest) -> u64 {
    let mut h = fnv1a(seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(req.image_id.bytes(), h);
    for v in req.region.to_array() {
        h = fnv1a(v.to_bits().to_le_bytes(), h);
    }
    h
}

fn center_in(region: &BBox, b: &BBox) -> bool {
    let (cx, cy) = b.center();
    cx >= region.x_min() && cx < region.x_max() && cy >= region.y_min() && cy < region.y_max()
}

struct OracleBackend {
    jitter: Option<JitterModel>,
    registry: ClassRegistry,
}

impl Backend for OracleBackend {
    fn infer(&self, req: &InferenceRequest, truth: Option<&[Annotation]>) -> Result<Vec<ScoredBox>, BackendError> {
        let truth = truth.ok_or_else(|| BackendError::MissingTruth(req.image_id.clone()))?;
        let (ox, oy) = (req.region.x_min(), req.region.y_min());
        let selected = truth
            .iter()
            .filter(|a| req.allowed_classes.contains(a.class_id) && center_in(&req.region, &a.bbox));

        let Some(model) = &self.jitter else {
            return Ok(selected
                .map(|a| ScoredBox {
                    bbox: a.bbox.translate(-ox, -oy),
                    class_id: a.class_id,
                    score: 1.0,
                })
                .collect());
        };

        let mut rng = ChaCha8Rng::seed_from_u64(request_seed(model.seed, req));
        let mut out = Vec::new();
        for a in selected {
            // Fixed number of draws per object, so streams line up across
            // different noise levels.
            let u_miss: f64 = rng.random();
            let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let u_score: f64 = rng.random();
            if u_miss < model.miss_rate {
                continue;
            }
            let sigma = self
                .registry
                .label(a.class_id)
                .and_then(|l| model.class_noise_sigma.get(l))
                .copied()
                .unwrap_or(model.coordinate_noise_sigma);
            let local = a.bbox.translate(-ox, -oy);
            let bbox = BBox::from_corners(
                (local.x_min() + sigma * z[0], local.y_min() + sigma * z[1]),
                (local.x_max() + sigma * z[2], local.y_max() + sigma * z[3]),
            )
            .expect("finite noise");
            out.push(ScoredBox {
                bbox,
                class_id: a.class_id,
                score: 1.0 - u_score * model.score_spread,
            });
        }

        let allowed: Vec<_> = req.allowed_classes.iter().collect();
        if model.false_positive_rate > 0.0 && !allowed.is_empty() {
            let n = Poisson::new(model.false_positive_rate)
                .map(|p| p.sample(&mut rng) as usize)
                .unwrap_or(0);
            let (rw, rh) = (req.region.width(), req.region.height());
            for _ in 0..n {
                let class_id = allowed[rng.random_range(0..allowed.len())];
                let w = rw * rng.random_range(0.01..0.1);
                let h = rh * rng.random_range(0.01..0.1);
                let x = rng.random_range(0.0..1.0) * (rw - w);
                let y = rng.random_range(0.0..1.0) * (rh - h);
                out.push(ScoredBox {
                    bbox: BBox::new(x, y, x + w, y + h).expect("positive size"),
                    class_id,
                    score: rng.random_range(0.0..1.0),
                });
            }
        }
        Ok(out)
    }
}

/// Reads `<dir>/<image_id>.json` documents on first use.
struct ReplayBackend {
    dir: PathBuf,
    registry: ClassRegistry,
    cache: Mutex<HashMap<String, Arc<DetectionDocument>>>,
}

impl ReplayBackend {
    fn new(dir: PathBuf, registry: ClassRegistry) -> Self {
        Self {
            dir,
            registry,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn document(&self, image_id: &str, key: &str) -> Result<Arc<DetectionDocument>, BackendError> {
        if let Some(doc) = self.cache.lock().unwrap().get(image_id) {
            return Ok(doc.clone());
        }
        let path = self.dir.join(format!("{image_id}.json"));
        let text = fs::read_to_string(&path).map_err(|_| BackendError::ReplayMiss {
            image_id: image_id.to_string(),
            region: key.to_string(),
        })?;
        let doc: DetectionDocument = serde_json::from_str(&text).map_err(|e| BackendError::ReplayDocument {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let doc = Arc::new(doc);
        self.cache.lock().unwrap().insert(image_id.to_string(), doc.clone());
        Ok(doc)
    }
}

impl Backend for ReplayBackend {
    fn infer(&self, req: &InferenceRequest, _truth: Option<&[Annotation]>) -> Result<Vec<ScoredBox>, BackendError> {
        let key = region_key(&req.region);
        let doc = self.document(&req.image_id, &key)?;
        let dets = doc.regions.get(&key).ok_or_else(|| BackendError::ReplayMiss {
            image_id: req.image_id.clone(),
            region: key.clone(),
        })?;
        decode_detections(dets, &self.registry, req)
    }
}

fn decode_detections(
    dets: &[WireDetection],
    registry: &ClassRegistry,
    req: &InferenceRequest,
) -> Result<Vec<ScoredBox>, BackendError> {
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let s = d.to_scored(registry).map_err(|source| BackendError::Decode {
            image_id: req.image_id.clone(),
            source,
        })?;
        if req.allowed_classes.contains(s.class_id) {
            out.push(s);
        }
    }
    Ok(out)
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    stderr: Arc<Mutex<String>>,
    stderr_thread: Option<JoinHandle<()>>,
    stash: HashMap<u64, WireResponse>,
}

const STDERR_CAP: usize = 16 * 1024;

/// Child process speaking the line-delimited JSON protocol. The child is
/// started on the first request and kept for the backend's lifetime.
struct ExternalBackend {
    command: Vec<String>,
    registry: ClassRegistry,
    process: Mutex<Option<Process>>,
    next_id: AtomicU64,
}

impl ExternalBackend {
    fn new(command: Vec<String>, registry: ClassRegistry) -> Self {
        Self {
            command,
            registry,
            process: Mutex::new(None),
            next_id: AtomicU64::new(1),
        }
    }

    fn err(&self, message: impl Into<String>) -> BackendError {
        BackendError::Process {
            command: self.command.join(" "),
            message: message.into(),
        }
    }

    fn spawn(&self) -> Result<Process, BackendError> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| self.err(format!("spawn failed: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        let mut err_pipe = child.stderr.take().expect("piped");
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = stderr.clone();
        let stderr_thread = std::thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = err_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().unwrap();
                if s.len() < STDERR_CAP {
                    s.push_str(&String::from_utf8_lossy(&buf[..n]));
                }
            }
        });
        Ok(Process {
            child,
            stdin,
            stdout,
            stderr,
            stderr_thread: Some(stderr_thread),
            stash: HashMap::new(),
        })
    }

    fn exit_error(&self, proc: &mut Process) -> BackendError {
        let status = match proc.child.wait() {
            Ok(s) => s.to_string(),
            Err(e) => format!("unknown status ({e})"),
        };
        if let Some(h) = proc.stderr_thread.take() {
            let _ = h.join();
        }
        BackendError::ProcessExit {
            command: self.command.join(" "),
            status,
            stderr: proc.stderr.lock().unwrap().trim().to_string(),
        }
    }

    /// Sends every request, then collects responses in whatever order the
    /// child produces them. Writing happens on a separate thread so a child
    /// that answers eagerly cannot deadlock on a full pipe.
    fn exchange(&self, requests: &[InferenceRequest]) -> Result<Vec<Vec<ScoredBox>>, BackendError> {
        let mut guard = self.process.lock().unwrap();
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let proc = guard.as_mut().expect("spawned");

        let ids: Vec<u64> = requests
            .iter()
            .map(|_| self.next_id.fetch_add(1, Ordering::Relaxed))
            .collect();
        let mut payload = String::new();
        for (id, req) in ids.iter().zip(requests) {
            let wire = WireRequest {
                request_id: *id,
                image_id: req.image_id.clone(),
                region: req.region.to_array(),
                resize_to: [req.resize_to.0, req.resize_to.1],
                allowed_classes: req.allowed_classes.labels(&self.registry).into_iter().map(String::from).collect(),
            };
            payload.push_str(&serde_json::to_string(&wire).expect("serializable"));
            payload.push('\n');
        }

        let Process { stdin, stdout, stash, .. } = proc;
        let read_result: Result<(), String> = std::thread::scope(|scope| {
            let writer = scope.spawn(move || stdin.write_all(payload.as_bytes()).and_then(|_| stdin.flush()));
            let mut line = String::new();
            let result = loop {
                if ids.iter().all(|id| stash.contains_key(id)) {
                    break Ok(());
                }
                line.clear();
                match stdout.read_line(&mut line) {
                    Ok(0) => break Err("eof".to_string()),
                    Ok(_) if line.trim().is_empty() => continue,
                    Ok(_) => match serde_json::from_str::<WireResponse>(line.trim()) {
                        Ok(resp) => {
                            stash.insert(resp.request_id, resp);
                        }
                        Err(e) => break Err(format!("bad response line {:?}: {e}", line.trim())),
                    },
                    Err(e) => break Err(format!("read failed: {e}")),
                }
            };
            // A write error means the child went away; the read side reports it.
            let _ = writer.join();
            result
        });

        match read_result {
            Ok(()) => {}
            Err(e) if e == "eof" => {
                let err = self.exit_error(proc);
                *guard = None;
                return Err(err);
            }
            Err(e) => return Err(self.err(e)),
        }

        ids.iter()
            .zip(requests)
            .map(|(id, req)| {
                let resp = proc.stash.remove(id).expect("collected above");
                decode_detections(&resp.detections, &self.registry, req)
            })
            .collect()
    }
}

impl Backend for ExternalBackend {
    fn infer(&self, req: &InferenceRequest, _truth: Option<&[Annotation]>) -> Result<Vec<ScoredBox>, BackendError> {
        Ok(self.exchange(std::slice::from_ref(req))?.remove(0))
    }

    fn single_flight(&self) -> bool {
        true
    }

    fn infer_batch(
        &self,
        requests: &[InferenceRequest],
        _truth: Option<&[Annotation]>,
    ) -> Vec<Result<Vec<ScoredBox>, BackendError>> {
        match self.exchange(requests) {
            Ok(all) => all.into_iter().map(Ok).collect(),
            Err(e) => {
                let msg = e.to_string();
                let mut out: Vec<_> = (1..requests.len()).map(|_| Err(self.err(msg.clone()))).collect();
                out.insert(0, Err(e));
                out
            }
        }
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Some(mut p) = self.process.get_mut().ok().and_then(Option::take) {
            drop(p.stdin);
            let _ = p.child.wait();
        }
    }
}
