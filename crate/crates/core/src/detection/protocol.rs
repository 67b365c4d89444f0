//! Newline-delimited JSON detector protocol over a child's stdin/stdout.
//!
//! ```text
//! child  → {"type":"hello","protocol":1,"capacity":N,"classes":[...]}
//! parent → {"type":"detect","id":I,"image_path":P,"width":W,"height":H}
//! child  → {"type":"result","id":I,"detections":[{"class_id":C,"score":S,"bbox":[x,y,w,h]}]}
//! parent → {"type":"bye"}
//! ```
//!
//! Tile images are written as RGBA PNG files; alpha 0 marks pixels outside the
//! source image.

use std::collections::{BTreeSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use super::{DetectError, DetectorBackend, RawDetections, ReferenceDetector, TileView};
use crate::bbox::BBox;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello {
        protocol: u32,
        #[serde(default = "one")]
        capacity: usize,
        #[serde(default)]
        classes: Vec<serde_json::Value>,
    },
    Detect {
        id: u64,
        image_path: String,
        width: u32,
        height: u32,
    },
    Result {
        id: u64,
        detections: Vec<WireDetection>,
    },
    Bye,
}

fn one() -> usize {
    1
}

impl Message {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serialize") + "\n"
    }
}

type Incoming = Result<Message, String>;

/// A detector running in a child process.
pub struct SubprocessBackend {
    child: Child,
    stdin: ChildStdin,
    incoming: Receiver<Incoming>,
    capacity: usize,
    timeout: Duration,
    next_id: u64,
    /// Requests given up on (timeout or failure) whose late answers are ignored.
    abandoned: BTreeSet<u64>,
    scratch: tempfile::TempDir,
}

impl SubprocessBackend {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, DetectError> {
        let (program, args) =
            command.split_first().ok_or_else(|| DetectError::BackendUnavailable("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| DetectError::BackendUnavailable(format!("cannot start '{program}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, incoming) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let msg = match line {
                    Ok(l) if l.trim().is_empty() => continue,
                    Ok(l) => serde_json::from_str::<Message>(&l).map_err(|e| format!("malformed record {l:?}: {e}")),
                    Err(e) => Err(format!("read failed: {e}")),
                };
                let stop = msg.is_err() && !matches!(&msg, Err(m) if m.starts_with("malformed"));
                if tx.send(msg).is_err() || stop {
                    return;
                }
            }
            let _ = tx.send(Err("backend closed its output".into()));
        });
        let scratch = tempfile::tempdir()
            .map_err(|e| DetectError::BackendUnavailable(format!("cannot create scratch directory: {e}")))?;
        let mut backend =
            Self { child, stdin, incoming, capacity: 1, timeout, next_id: 0, abandoned: BTreeSet::new(), scratch };
        match backend.incoming.recv_timeout(timeout) {
            Ok(Ok(Message::Hello { protocol, capacity, .. })) => {
                if protocol != PROTOCOL_VERSION {
                    return Err(DetectError::BackendUnavailable(format!("unsupported protocol version {protocol}")));
                }
                backend.capacity = capacity.max(1);
            }
            Ok(Ok(other)) => return Err(DetectError::BackendUnavailable(format!("expected hello, got {other:?}"))),
            Ok(Err(e)) => return Err(DetectError::BackendUnavailable(e)),
            Err(_) => return Err(DetectError::BackendUnavailable("no handshake before timeout".into())),
        }
        Ok(backend)
    }

    fn send(&mut self, msg: &Message) -> Result<(), DetectError> {
        self.stdin
            .write_all(msg.to_line().as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| DetectError::BackendUnavailable(format!("cannot write to backend: {e}")))
    }

    fn run(&mut self, tiles: &[TileView<'_>]) -> Result<Vec<RawDetections>, DetectError> {
        let mut results: Vec<Option<Vec<(u32, f64, BBox)>>> = vec![None; tiles.len()];
        let mut pending: VecDeque<(u64, usize, Instant)> = VecDeque::new();
        let mut next_tile = 0;
        let ids_start = self.next_id;
        while next_tile < tiles.len() || !pending.is_empty() {
            while next_tile < tiles.len() && pending.len() < self.capacity {
                let id = self.next_id;
                self.next_id += 1;
                let tile = tiles[next_tile];
                let path = self.scratch.path().join(format!("tile_{id}.png"));
                write_tile(&path, tile)?;
                self.send(&Message::Detect {
                    id,
                    image_path: path.to_string_lossy().into_owned(),
                    width: tile.image.width(),
                    height: tile.image.height(),
                })?;
                pending.push_back((id, next_tile, Instant::now()));
                next_tile += 1;
            }
            let (oldest, _, sent) = *pending.front().expect("pending request");
            let remaining = self.timeout.saturating_sub(sent.elapsed());
            let msg = match self.incoming.recv_timeout(remaining) {
                Ok(Ok(m)) => m,
                Ok(Err(e)) if e.starts_with("malformed") => return Err(DetectError::ProtocolViolation(e)),
                Ok(Err(e)) => return Err(DetectError::BackendUnavailable(e)),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(DetectError::Timeout { id: oldest, seconds: self.timeout.as_secs_f64() })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(DetectError::BackendUnavailable("backend output closed".into()))
                }
            };
            match msg {
                Message::Result { id, detections } => {
                    if let Some(pos) = pending.iter().position(|p| p.0 == id) {
                        let (_, tile_index, _) = pending.remove(pos).expect("position is valid");
                        let _ = std::fs::remove_file(self.scratch.path().join(format!("tile_{id}.png")));
                        results[tile_index] =
                            Some(detections.into_iter().map(|d| (d.class_id, d.score, d.bbox)).collect());
                    } else if self.abandoned.remove(&id) {
                        log::debug!("ignoring late response for abandoned request {id}");
                    } else {
                        return Err(DetectError::ProtocolViolation(format!(
                            "response id {id} matches no pending request (issued {ids_start}..{})",
                            self.next_id
                        )));
                    }
                }
                other => return Err(DetectError::ProtocolViolation(format!("unexpected record {other:?}"))),
            }
        }
        Ok(results.into_iter().map(|r| r.expect("every tile answered")).collect())
    }
}

impl DetectorBackend for SubprocessBackend {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn capacity(&self) -> usize {
        self.capacity
    }

    fn detect_batch(&mut self, tiles: &[TileView<'_>]) -> Result<Vec<RawDetections>, DetectError> {
        let first = self.next_id;
        let out = self.run(tiles);
        if out.is_err() {
            // Anything still outstanding from this batch may answer later.
            self.abandoned.extend(first..self.next_id);
        }
        out
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        let _ = self.send(&Message::Bye);
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn write_tile(path: &Path, tile: TileView<'_>) -> Result<(), DetectError> {
    let (w, h) = tile.image.dimensions();
    let full = tile.mask.len() != (w * h) as usize;
    let rgba = RgbaImage::from_fn(w, h, |x, y| {
        let p = tile.image.get_pixel(x, y).0;
        let a = if full || tile.mask[(y * w + x) as usize] { 255 } else { 0 };
        Rgba([p[0], p[1], p[2], a])
    });
    rgba.save(path).map_err(|e| DetectError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

/// Serves the protocol with the reference detector until `bye` or end of input.
/// Requests that cannot be processed are answered with no detections.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, detector: &mut ReferenceDetector) -> std::io::Result<()> {
    let hello = Message::Hello {
        protocol: PROTOCOL_VERSION,
        capacity: 1,
        classes: detector.class_ids().into_iter().map(serde_json::Value::from).collect(),
    };
    output.write_all(hello.to_line().as_bytes())?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let msg: Message = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("ignoring malformed request: {e}");
                continue;
            }
        };
        match msg {
            Message::Detect { id, image_path, width, height } => {
                let detections = match detect_file(detector, Path::new(&image_path), width, height) {
                    Ok(d) => d,
                    Err(e) => {
                        log::warn!("request {id}: {e}");
                        Vec::new()
                    }
                };
                output.write_all(Message::Result { id, detections }.to_line().as_bytes())?;
                output.flush()?;
            }
            Message::Bye => return Ok(()),
            other => log::warn!("ignoring unexpected record {other:?}"),
        }
    }
    Ok(())
}

fn detect_file(
    detector: &mut ReferenceDetector,
    path: &Path,
    width: u32,
    height: u32,
) -> Result<Vec<WireDetection>, String> {
    let img = image::open(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    if (img.width(), img.height()) != (width, height) {
        return Err(format!("image is {}x{}, request says {width}x{height}", img.width(), img.height()));
    }
    let mask: Vec<bool> = if img.color().has_alpha() {
        img.to_rgba8().pixels().map(|p| p.0[3] > 0).collect()
    } else {
        vec![true; (width * height) as usize]
    };
    let rgb = img.into_rgb8();
    let dets = detector.detect(TileView { image: &rgb, mask: &mask }).map_err(|e| e.to_string())?;
    Ok(dets.into_iter().map(|(class_id, score, bbox)| WireDetection { class_id, score, bbox }).collect())
}
