//! Serving a black-box teacher over HTTP/1.1 with a JSON envelope, and
//! the client that implements [`BlackBoxTeacher`] against it.
//!
//! Routes: `GET /v1/meta` and `POST /v1/predict`, nothing else — the
//! boundary audit test checks that list. Floats travel as base64-packed
//! little-endian f32, so transport adds no quantization beyond the f32
//! the pipeline already uses.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ProbVector;
use crate::data::ImageShape;
use crate::teacher::{BlackBoxTeacher, InProcessTeacher, TeacherError};

pub const PROTOCOL_VERSION: u32 = 1;

/// The service's complete route table.
pub const ROUTES: &[(&str, &str)] = &[("GET", "/v1/meta"), ("POST", "/v1/predict")];

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bind failure on {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub request_id: String,
    /// (B, C, H, W)
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub request_id: String,
    pub probs: Vec<Vec<f64>>,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetaResponse {
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    pub fingerprint: String,
    pub protocol: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

// ---------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------

/// Handle to a running service; shuts down on [`ServiceHandle::shutdown`]
/// or drop.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Starts serving `teacher` on `bind` (e.g. "127.0.0.1:0"); rejects
/// batches larger than `max_batch` with a 413.
pub fn serve(
    teacher: Arc<InProcessTeacher>,
    bind: &str,
    max_batch: usize,
) -> Result<ServiceHandle, ServiceError> {
    let listener = TcpListener::bind(bind)
        .map_err(|e| ServiceError::BindFailure { addr: bind.to_string(), source: e })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = Arc::clone(&stop);

    let join = std::thread::spawn(move || {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !stop2.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let teacher = Arc::clone(&teacher);
                    workers.push(std::thread::spawn(move || {
                        let _ = handle_connection(stream, &teacher, max_batch);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(_) => break,
            }
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
    });

    Ok(ServiceHandle { addr, stop, join: Some(join) })
}

fn handle_connection(
    mut stream: TcpStream,
    teacher: &InProcessTeacher,
    max_batch: usize,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    stream.set_write_timeout(Some(Duration::from_secs(30)))?;
    let (method, path, body) = match read_request(&mut stream) {
        Ok(r) => r,
        Err(_) => {
            return respond_error(&mut stream, 400, "bad_request", "unparseable request");
        }
    };

    match (method.as_str(), path.as_str()) {
        ("GET", "/v1/meta") => {
            let shape = teacher.input_shape();
            let meta = MetaResponse {
                num_classes: teacher.num_classes(),
                input_shape: vec![shape.c, shape.h, shape.w],
                fingerprint: teacher.fingerprint(),
                protocol: PROTOCOL_VERSION,
            };
            respond_json(&mut stream, 200, &meta)
        }
        ("POST", "/v1/predict") => match parse_predict(&body, teacher, max_batch) {
            Ok(images) => {
                let request_id = serde_json::from_slice::<PredictRequest>(&body)
                    .map(|r| r.request_id)
                    .unwrap_or_default();
                match teacher.predict_proba(&images) {
                    Ok(probs) => {
                        let resp = PredictResponse {
                            request_id,
                            probs: probs.into_iter().map(|p| p.values().to_vec()).collect(),
                            fingerprint: teacher.fingerprint(),
                        };
                        respond_json(&mut stream, 200, &resp)
                    }
                    Err(e) => respond_error(&mut stream, 500, "predict_failed", &e.to_string()),
                }
            }
            Err((code, err, msg)) => respond_error(&mut stream, code, err, &msg),
        },
        _ => respond_error(&mut stream, 404, "not_found", "unknown route"),
    }
}

fn parse_predict(
    body: &[u8],
    teacher: &InProcessTeacher,
    max_batch: usize,
) -> Result<Array4<f32>, (u16, &'static str, String)> {
    let req: PredictRequest = serde_json::from_slice(body)
        .map_err(|e| (400u16, "bad_request", format!("invalid json: {e}")))?;
    if req.dtype != "f32" {
        return Err((400, "bad_request", format!("unsupported dtype {}", req.dtype)));
    }
    if req.shape.len() != 4 {
        return Err((400, "bad_shape", format!("shape must be rank 4, got {:?}", req.shape)));
    }
    let (b, c, h, w) = (req.shape[0], req.shape[1], req.shape[2], req.shape[3]);
    if b == 0 {
        return Err((400, "bad_shape", "empty batch".into()));
    }
    if b > max_batch {
        return Err((413, "oversize_batch", format!("batch {b} exceeds max_batch {max_batch}")));
    }
    let expect = teacher.input_shape();
    if (c, h, w) != (expect.c, expect.h, expect.w) {
        return Err((
            400,
            "bad_shape",
            format!("image shape ({c},{h},{w}) vs served ({},{},{})", expect.c, expect.h, expect.w),
        ));
    }
    let bytes = B64
        .decode(req.data_b64.as_bytes())
        .map_err(|e| (400u16, "bad_request", format!("invalid base64: {e}")))?;
    let count = b * c * h * w;
    if bytes.len() != count * 4 {
        return Err((
            400,
            "bad_shape",
            format!("payload {} bytes, shape needs {}", bytes.len(), count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array4::from_shape_vec((b, c, h, w), data)
        .map_err(|e| (400u16, "bad_shape", e.to_string()))
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<(String, String, Vec<u8>)> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();

    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let trimmed = header.trim();
        if trimmed.is_empty() {
            break;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    const MAX_BODY: usize = 256 * 1024 * 1024;
    if content_length > MAX_BODY {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "body too large"));
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok((method, path, body))
}

fn respond_json<T: Serialize>(stream: &mut TcpStream, code: u16, body: &T) -> std::io::Result<()> {
    let payload = serde_json::to_vec(body).expect("serializable response");
    write_response(stream, code, &payload)
}

fn respond_error(
    stream: &mut TcpStream,
    code: u16,
    error: &str,
    message: &str,
) -> std::io::Result<()> {
    let payload = serde_json::to_vec(&ErrorBody {
        error: error.to_string(),
        message: message.to_string(),
    })
    .unwrap();
    write_response(stream, code, &payload)
}

fn write_response(stream: &mut TcpStream, code: u16, payload: &[u8]) -> std::io::Result<()> {
    let reason = match code {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        413 => "Payload Too Large",
        _ => "Internal Server Error",
    };
    let head = format!(
        "HTTP/1.1 {code} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        payload.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(payload)?;
    stream.flush()
}

// ---------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------

/// Client-side view of a served teacher. Implements [`BlackBoxTeacher`];
/// batches above `max_batch` split transparently and idempotent
/// requests retry with exponential backoff.
pub struct RemoteTeacher {
    host: String,
    meta: MetaResponse,
    max_batch: usize,
    retries: u32,
    backoff: Duration,
    seq: std::sync::atomic::AtomicU64,
}

/// Connects with default transport options (max_batch 250, 3 retries,
/// 100 ms initial backoff).
pub fn remote_teacher(endpoint: &str) -> Result<RemoteTeacher, TeacherError> {
    RemoteTeacher::connect(endpoint, 250, 3, Duration::from_millis(100))
}

impl RemoteTeacher {
    pub fn connect(
        endpoint: &str,
        max_batch: usize,
        retries: u32,
        backoff: Duration,
    ) -> Result<Self, TeacherError> {
        let host = endpoint.trim_start_matches("http://").trim_end_matches('/').to_string();
        let client = RemoteTeacher {
            host,
            meta: MetaResponse {
                num_classes: 0,
                input_shape: vec![],
                fingerprint: String::new(),
                protocol: 0,
            },
            max_batch,
            retries,
            backoff,
            seq: std::sync::atomic::AtomicU64::new(0),
        };
        let (code, body) = client.request_with_retry("GET", "/v1/meta", &[])?;
        if code != 200 {
            return Err(TeacherError::Protocol(format!("meta fetch failed with status {code}")));
        }
        let meta: MetaResponse = serde_json::from_slice(&body)
            .map_err(|e| TeacherError::Protocol(format!("invalid meta: {e}")))?;
        if meta.protocol != PROTOCOL_VERSION {
            return Err(TeacherError::ProtocolVersionMismatch(meta.protocol));
        }
        if meta.input_shape.len() != 3 {
            return Err(TeacherError::Protocol("meta input_shape must be [C,H,W]".into()));
        }
        Ok(RemoteTeacher { meta, ..client })
    }

    pub fn fingerprint(&self) -> &str {
        &self.meta.fingerprint
    }

    fn request_with_retry(
        &self,
        method: &str,
        path: &str,
        body: &[u8],
    ) -> Result<(u16, Vec<u8>), TeacherError> {
        let mut delay = self.backoff;
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.request_once(method, path, body) {
                Ok((code, _resp)) if code >= 500 => {
                    last_err = format!("server error {code}");
                }
                Ok(ok) => return Ok(ok),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(TeacherError::Unreachable(format!(
            "{method} {path} failed after {} attempts: {last_err}",
            self.retries + 1
        )))
    }

    fn request_once(&self, method: &str, path: &str, body: &[u8]) -> std::io::Result<(u16, Vec<u8>)> {
        let addr = self
            .host
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))?;
        let mut stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
        stream.set_read_timeout(Some(Duration::from_secs(60)))?;
        stream.set_write_timeout(Some(Duration::from_secs(60)))?;
        let head = format!(
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            self.host,
            body.len()
        );
        stream.write_all(head.as_bytes())?;
        stream.write_all(body)?;
        stream.flush()?;

        let mut reader = BufReader::new(stream);
        let mut status_line = String::new();
        reader.read_line(&mut status_line)?;
        let code: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad status"))?;
        let mut content_length = 0usize;
        loop {
            let mut header = String::new();
            reader.read_line(&mut header)?;
            let trimmed = header.trim();
            if trimmed.is_empty() {
                break;
            }
            if let Some((name, value)) = trimmed.split_once(':') {
                if name.eq_ignore_ascii_case("content-length") {
                    content_length = value.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;
        Ok((code, body))
    }

    fn predict_chunk(&self, images: &ndarray::ArrayView4<'_, f32>) -> Result<Vec<ProbVector>, TeacherError> {
        let shape = images.shape().to_vec();
        let mut bytes = Vec::with_capacity(images.len() * 4);
        for &v in images.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let req = PredictRequest {
            request_id: format!("r{}", self.seq.fetch_add(1, Ordering::Relaxed)),
            shape,
            dtype: "f32".into(),
            data_b64: B64.encode(&bytes),
        };
        let body = serde_json::to_vec(&req).unwrap();
        let (code, resp) = self.request_with_retry("POST", "/v1/predict", &body)?;
        if code != 200 {
            let detail = serde_json::from_slice::<ErrorBody>(&resp)
                .map(|e| format!("{}: {}", e.error, e.message))
                .unwrap_or_else(|_| format!("status {code}"));
            return Err(TeacherError::Protocol(detail));
        }
        let resp: PredictResponse = serde_json::from_slice(&resp)
            .map_err(|e| TeacherError::Protocol(format!("invalid predict response: {e}")))?;
        if resp.request_id != req.request_id {
            return Err(TeacherError::Protocol("request id mismatch".into()));
        }
        resp.probs
            .into_iter()
            .map(|row| {
                ProbVector::new(row).map_err(|e| TeacherError::Protocol(e.to_string()))
            })
            .collect()
    }
}

impl BlackBoxTeacher for RemoteTeacher {
    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn input_shape(&self) -> ImageShape {
        ImageShape {
            c: self.meta.input_shape[0],
            h: self.meta.input_shape[1],
            w: self.meta.input_shape[2],
        }
    }

    fn predict_proba(&self, images: &Array4<f32>) -> Result<Vec<ProbVector>, TeacherError> {
        let s = images.shape();
        let expect = self.input_shape();
        if (s[1], s[2], s[3]) != (expect.c, expect.h, expect.w) {
            return Err(TeacherError::IncompatibleShape(format!(
                "batch {:?} vs served {:?}",
                &s[1..],
                expect
            )));
        }
        let mut out = Vec::with_capacity(s[0]);
        for chunk in images.axis_chunks_iter(ndarray::Axis(0), self.max_batch) {
            out.extend(self.predict_chunk(&chunk.view())?);
        }
        Ok(out)
    }
}
