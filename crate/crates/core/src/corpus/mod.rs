//! On-disk video corpus: synthetic clip generation, frame-directory
//! ingestion, flow precomputation, and lazy clip access.
//!
//! Layout: `<root>/<clip_id>/frames/%05d.pgm`, `<root>/<clip_id>/flow/%05d.flo1`,
//! per-clip `joints.txt` (one line per frame, nine space-separated "x,y"
//! pairs) and `label.txt` (one integer), plus `<root>/index.txt` listing
//! clip ids.

mod generate;
pub mod pgm;
pub mod skeleton;

pub use generate::{generate_corpus, GenerateConfig};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::flow::{estimate_flow, read_flo1, write_flo1, FlowError, FlowField, FlowParams, Frame};
use skeleton::NUM_JOINTS;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("corpus validation failed: {0}")]
    Validation(String),
    #[error("unknown clip `{0}`")]
    UnknownClip(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Normalize to the [0,1] frame the flow solver expects.
    pub fn to_frame(&self) -> Frame {
        Frame::new(
            self.width,
            self.height,
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
    }

    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> GrayImage {
        assert!(x0 + size <= self.width && y0 + size <= self.height);
        let mut pixels = Vec::with_capacity(size * size);
        for y in 0..size {
            let at = (y0 + y) * self.width + x0;
            pixels.extend_from_slice(&self.pixels[at..at + size]);
        }
        GrayImage {
            width: size,
            height: size,
            pixels,
        }
    }

    pub fn hflip(&self) -> GrayImage {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            let row = &self.pixels[y * self.width..(y + 1) * self.width];
            pixels.extend(row.iter().rev());
        }
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Bilinear resize, pixel-center aligned.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        let frame = self.to_frame();
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let fx = (x as f32 + 0.5) * sx - 0.5;
                let fy = (y as f32 + 0.5) * sy - 0.5;
                pixels
                    .push((frame.sample_bilinear(fx, fy) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClipMeta {
    pub id: String,
    pub dir: PathBuf,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub has_joints: bool,
    pub label: Option<usize>,
    pub flow_count: usize,
}

/// Immutable index over the clips on disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    clips: Vec<ClipMeta>,
}

/// Per-frame joint annotations: `joints[frame][joint] = (x, y)` in pixels.
pub type JointTrack = Vec<[(f32, f32); NUM_JOINTS]>;

/// One clip with eagerly parsed annotations and lazily read frames/flows.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub id: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub label: Option<usize>,
    pub joints: Option<JointTrack>,
    dir: PathBuf,
}

impl Corpus {
    /// Ingest a corpus directory: reads `index.txt` when present, otherwise
    /// scans for clip subdirectories (sorted by name).
    pub fn open(root: &Path) -> Result<Corpus> {
        let io_err = |path: &Path, source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let index_path = root.join("index.txt");
        let ids: Vec<String> = if index_path.is_file() {
            std::fs::read_to_string(&index_path)
                .map_err(|e| io_err(&index_path, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        } else {
            let mut ids = Vec::new();
            let entries = std::fs::read_dir(root).map_err(|e| io_err(root, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| io_err(root, e))?;
                if entry.path().join("frames").is_dir() {
                    ids.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
            ids.sort();
            ids
        };
        if ids.is_empty() {
            return Err(CorpusError::Validation(format!(
                "no clips found under {}",
                root.display()
            )));
        }
        let clips = ids
            .iter()
            .map(|id| read_clip_meta(root, id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            root: root.to_path_buf(),
            clips,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clips(&self) -> &[ClipMeta] {
        &self.clips
    }

    pub fn clip_ids(&self) -> impl Iterator<Item = &str> {
        self.clips.iter().map(|c| c.id.as_str())
    }

    pub fn meta(&self, id: &str) -> Result<&ClipMeta> {
        self.clips
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| CorpusError::UnknownClip(id.to_string()))
    }

    pub fn load_clip(&self, id: &str) -> Result<VideoClip> {
        let meta = self.meta(id)?;
        let joints = if meta.has_joints {
            Some(parse_joints(
                &meta.dir.join("joints.txt"),
                meta.frame_count,
                meta.width,
                meta.height,
                id,
            )?)
        } else {
            None
        };
        Ok(VideoClip {
            id: meta.id.clone(),
            frame_count: meta.frame_count,
            width: meta.width,
            height: meta.height,
            label: meta.label,
            joints,
            dir: meta.dir.clone(),
        })
    }

    /// Compute and store the frame_count-1 flow files of every clip.
    /// Idempotent: valid existing files are kept; corrupt ones are
    /// recomputed and reported in the returned warning list.
    pub fn precompute_flows(&mut self, params: &FlowParams, workers: usize) -> Result<Vec<String>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| CorpusError::Validation(format!("thread pool: {e}")))?;
        let results: Vec<Result<Vec<String>>> = pool.install(|| {
            self.clips
                .par_iter()
                .map(|meta| precompute_clip_flows(meta, params))
                .collect()
        });
        let mut warnings = Vec::new();
        for r in results {
            warnings.extend(r?);
        }
        for meta in &mut self.clips {
            meta.flow_count = meta.frame_count - 1;
        }
        Ok(warnings)
    }
}

fn precompute_clip_flows(meta: &ClipMeta, params: &FlowParams) -> Result<Vec<String>> {
    let flow_dir = meta.dir.join("flow");
    std::fs::create_dir_all(&flow_dir).map_err(|source| CorpusError::Io {
        path: flow_dir.display().to_string(),
        source,
    })?;
    let mut warnings = Vec::new();
    let mut frames: Vec<Option<Frame>> = vec![None; meta.frame_count];
    let frame = |i: usize, dir: &Path, frames: &mut Vec<Option<Frame>>| -> Result<Frame> {
        if frames[i].is_none() {
            let img = pgm::read_pgm(&dir.join("frames").join(format!("{i:05}.pgm")))?;
            frames[i] = Some(img.to_frame());
        }
        Ok(frames[i].clone().unwrap())
    };
    for i in 0..meta.frame_count - 1 {
        let path = flow_dir.join(format!("{i:05}.flo1"));
        if path.is_file() {
            match read_flo1(&path) {
                Ok(f) if f.width == meta.width && f.height == meta.height => continue,
                Ok(_) => warnings.push(format!(
                    "{}: wrong dimensions, recomputing",
                    path.display()
                )),
                Err(e) => warnings.push(format!("{}: {e}, recomputing", path.display())),
            }
        }
        let a = frame(i, &meta.dir, &mut frames)?;
        let b = frame(i + 1, &meta.dir, &mut frames)?;
        let field = estimate_flow(&a, &b, params)?;
        write_flo1(&path, &field)?;
    }
    Ok(warnings)
}

impl VideoClip {
    pub fn frame(&self, i: usize) -> Result<GrayImage> {
        pgm::read_pgm(&self.dir.join("frames").join(format!("{i:05}.pgm")))
    }

    pub fn flow(&self, i: usize) -> Result<FlowField> {
        let path = self.dir.join("flow").join(format!("{i:05}.flo1"));
        if !path.is_file() {
            return Err(CorpusError::Validation(format!(
                "clip `{}` is missing flow file {}",
                self.id,
                path.display()
            )));
        }
        Ok(read_flo1(&path)?)
    }

    pub fn flow_count(&self) -> usize {
        let flow_dir = self.dir.join("flow");
        (0..self.frame_count.saturating_sub(1))
            .take_while(|i| flow_dir.join(format!("{i:05}.flo1")).is_file())
            .count()
    }
}

fn read_clip_meta(root: &Path, id: &str) -> Result<ClipMeta> {
    let dir = root.join(id);
    let frames_dir = dir.join("frames");
    if !frames_dir.is_dir() {
        return Err(CorpusError::Validation(format!(
            "clip `{id}` has no frames directory"
        )));
    }
    let io_err = |path: &Path, source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut numbers = Vec::new();
    for entry in std::fs::read_dir(&frames_dir).map_err(|e| io_err(&frames_dir, e))? {
        let entry = entry.map_err(|e| io_err(&frames_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".pgm") {
            if let Ok(n) = stem.parse::<usize>() {
                numbers.push(n);
            }
        }
    }
    if numbers.is_empty() {
        return Err(CorpusError::Validation(format!(
            "clip `{id}` has no frames"
        )));
    }
    numbers.sort_unstable();
    let contiguous = numbers.iter().enumerate().all(|(i, &n)| n == i);
    if !contiguous {
        let missing: Vec<String> = (0..=numbers[numbers.len() - 1])
            .filter(|n| numbers.binary_search(n).is_err())
            .map(|n| n.to_string())
            .collect();
        return Err(CorpusError::Validation(format!(
            "clip `{id}` frame numbering is not contiguous; missing: [{}]",
            missing.join(", ")
        )));
    }
    let first = pgm::read_pgm(&frames_dir.join("00000.pgm"))?;
    let frame_count = numbers.len();

    let joints_path = dir.join("joints.txt");
    let has_joints = joints_path.is_file();
    if has_joints {
        // parse eagerly so validation errors surface at ingest time
        parse_joints(&joints_path, frame_count, first.width, first.height, id)?;
    }

    let label_path = dir.join("label.txt");
    let label = if label_path.is_file() {
        let text = std::fs::read_to_string(&label_path).map_err(|e| io_err(&label_path, e))?;
        Some(
            text.trim()
                .parse::<usize>()
                .map_err(|_| CorpusError::Parse {
                    path: label_path.display().to_string(),
                    line: 1,
                    reason: format!("expected an integer label, got `{}`", text.trim()),
                })?,
        )
    } else {
        None
    };

    let flow_dir = dir.join("flow");
    let flow_count = (0..frame_count.saturating_sub(1))
        .take_while(|i| flow_dir.join(format!("{i:05}.flo1")).is_file())
        .count();

    Ok(ClipMeta {
        id: id.to_string(),
        dir,
        frame_count,
        width: first.width,
        height: first.height,
        has_joints,
        label,
        flow_count,
    })
}

fn parse_joints(
    path: &Path,
    frame_count: usize,
    width: usize,
    height: usize,
    clip_id: &str,
) -> Result<JointTrack> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |line: usize, reason: String| CorpusError::Parse {
        path: path.display().to_string(),
        line,
        reason: format!("clip `{clip_id}` frame {}: {reason}", line - 1),
    };
    let mut track = Vec::with_capacity(frame_count);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let pairs: Vec<&str> = line.split_whitespace().collect();
        if pairs.len() != NUM_JOINTS {
            return Err(parse_err(
                lineno + 1,
                format!("expected {NUM_JOINTS} joint pairs, got {}", pairs.len()),
            ));
        }
        let mut joints = [(0.0f32, 0.0f32); NUM_JOINTS];
        for (j, pair) in pairs.iter().enumerate() {
            let Some((xs, ys)) = pair.split_once(',') else {
                return Err(parse_err(lineno + 1, format!("malformed pair `{pair}`")));
            };
            let x: f32 = xs
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("bad x `{xs}`")))?;
            let y: f32 = ys
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("bad y `{ys}`")))?;
            if x < 0.0 || x >= width as f32 || y < 0.0 || y >= height as f32 {
                return Err(parse_err(
                    lineno + 1,
                    format!("joint {j} at ({x}, {y}) outside the {width}x{height} frame"),
                ));
            }
            joints[j] = (x, y);
        }
        track.push(joints);
    }
    if track.len() != frame_count {
        return Err(CorpusError::Validation(format!(
            "clip `{clip_id}`: {} joint lines for {} frames",
            track.len(),
            frame_count
        )));
    }
    Ok(track)
}
