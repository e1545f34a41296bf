//! Line protocol for scorers running out of process.
//!
//! Each request is one JSON object per line,
//! `{"id": 0, "t": 16, "d": 8, "features": [[...], ...]}`, answered by
//! `{"id": 0, "logits": [...11 values]}`. Responses may come back in any
//! order. A blank line from the client ends the session.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{InputDims, Prediction, ScorerError, ScorerModel};
use crate::labeling::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: u64,
    pub t: usize,
    pub d: usize,
    pub features: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: u64,
    pub logits: Vec<f64>,
}

impl ScoreRequest {
    pub fn new(id: u64, dims: InputDims, window: &[f32]) -> Self {
        Self {
            id,
            t: dims.t,
            d: dims.d,
            features: window.chunks(dims.d.max(1)).map(<[f32]>::to_vec).collect(),
        }
    }

    fn flat(&self) -> Option<Vec<f32>> {
        if self.features.len() != self.t || self.features.iter().any(|r| r.len() != self.d) {
            return None;
        }
        Some(self.features.concat())
    }
}

/// Client side of the protocol. Responses are drained by a reader thread so
/// large batches cannot deadlock on full pipes.
pub struct ExternalScorer {
    child: Option<Child>,
    writer: Box<dyn Write + Send>,
    rx: Receiver<std::io::Result<String>>,
    timeout: Duration,
    next_id: u64,
}

impl ExternalScorer {
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self {
            child: None,
            writer: Box::new(writer),
            rx,
            timeout,
            next_id: 0,
        }
    }

    /// Starts `command` with piped stdin/stdout.
    pub fn spawn(command: &mut Command, timeout: Duration) -> Result<Self, ScorerError> {
        let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut s = Self::from_streams(BufReader::new(stdout), stdin, timeout);
        s.child = Some(child);
        Ok(s)
    }

    /// Scores a batch; predictions come back in input order.
    pub fn score(&mut self, dims: InputDims, windows: &[&[f32]]) -> Result<Vec<Prediction>, ScorerError> {
        let first = self.next_id;
        let mut pending: HashMap<u64, usize> = HashMap::with_capacity(windows.len());
        for (i, w) in windows.iter().enumerate() {
            if w.len() != dims.size() {
                return Err(ScorerError::Dims {
                    expected: dims.size(),
                    found: w.len(),
                });
            }
            let req = ScoreRequest::new(first + i as u64, dims, w);
            let mut line = serde_json::to_vec(&req).expect("request serializes");
            line.push(b'\n');
            self.writer.write_all(&line)?;
            pending.insert(req.id, i);
        }
        self.writer.flush()?;
        self.next_id = first + windows.len() as u64;

        let deadline = Instant::now() + self.timeout;
        let mut out: Vec<Option<Prediction>> = vec![None; windows.len()];
        while !pending.is_empty() {
            let wait = deadline.saturating_duration_since(Instant::now());
            let line = match self.rx.recv_timeout(wait) {
                Ok(line) => line?,
                Err(RecvTimeoutError::Timeout) => return Err(ScorerError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ScorerError::Protocol(format!(
                        "stream closed with {} responses outstanding",
                        pending.len()
                    )))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let resp: ScoreResponse = serde_json::from_str(&line)
                .map_err(|e| ScorerError::Protocol(format!("bad response `{line}`: {e}")))?;
            let slot = pending
                .remove(&resp.id)
                .ok_or_else(|| ScorerError::Protocol(format!("unexpected response id {}", resp.id)))?;
            let logits: [f64; NUM_CLASSES] = resp.logits.as_slice().try_into().map_err(|_| {
                ScorerError::Protocol(format!(
                    "response {} has {} logits, expected {NUM_CLASSES}",
                    resp.id,
                    resp.logits.len()
                ))
            })?;
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(ScorerError::Protocol(format!("response {} has non-finite logits", resp.id)));
            }
            out[slot] = Some(Prediction::from_logits(&logits));
        }
        Ok(out.into_iter().map(|p| p.expect("all slots filled")).collect())
    }

    /// Sends the closing blank line and waits for a spawned process to exit.
    pub fn close(mut self) -> Result<(), ScorerError> {
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        drop(std::mem::replace(&mut self.writer, Box::new(std::io::sink())));
        if let Some(mut child) = self.child.take() {
            child.wait()?;
        }
        Ok(())
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub fn score_external(
    scorer: &mut ExternalScorer,
    dims: InputDims,
    windows: &[&[f32]],
) -> Result<Vec<Prediction>, ScorerError> {
    scorer.score(dims, windows)
}

/// Server side backed by an in-process model. Returns the number of
/// requests answered once a blank line or end of input is reached.
pub fn serve_protocol<R: BufRead, W: Write>(
    model: &ScorerModel,
    reader: R,
    mut writer: W,
) -> Result<usize, ScorerError> {
    let mut served = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            break;
        }
        let req: ScoreRequest =
            serde_json::from_str(&line).map_err(|e| ScorerError::Protocol(format!("bad request: {e}")))?;
        if (req.t, req.d) != (model.dims().t, model.dims().d) {
            return Err(ScorerError::Protocol(format!(
                "request {} is {}x{}, model expects {}x{}",
                req.id,
                req.t,
                req.d,
                model.dims().t,
                model.dims().d
            )));
        }
        let x = req
            .flat()
            .ok_or_else(|| ScorerError::Protocol(format!("request {} has ragged features", req.id)))?;
        let logits = model.logits(&x)?;
        let resp = ScoreResponse {
            id: req.id,
            logits: logits.to_vec(),
        };
        let mut out = serde_json::to_vec(&resp).expect("response serializes");
        out.push(b'\n');
        writer.write_all(&out)?;
        writer.flush()?;
        served += 1;
    }
    Ok(served)
}
