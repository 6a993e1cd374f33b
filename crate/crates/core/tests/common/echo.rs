//! Minimal HTTP embedding provider on a local port. Vectors are a pure
//! function of the input text and mode.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use hoproute_core::embedding::{EmbedRequest, EmbedResponse, Mode};

pub const ECHO_DIM: usize = 4;

pub fn echo_vector(text: &str, mode: Mode) -> Vec<f64> {
    let sum: u64 = text.bytes().map(u64::from).sum();
    let m = if mode == Mode::Query { 1.0 } else { 2.0 };
    vec![1.0, text.chars().count() as f64, (sum % 97) as f64, m]
}

pub struct EchoServer {
    pub endpoint: String,
    pub requests: Arc<AtomicUsize>,
    /// The first this-many requests get a 503.
    pub fail_first: Arc<AtomicUsize>,
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) -> std::io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn serve(stream: TcpStream, requests: Arc<AtomicUsize>, fail_first: Arc<AtomicUsize>) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    loop {
        let mut content_length = 0usize;
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        loop {
            line.clear();
            reader.read_line(&mut line)?;
            let l = line.trim_end();
            if l.is_empty() {
                break;
            }
            if let Some((k, v)) = l.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;
        requests.fetch_add(1, Ordering::SeqCst);
        if fail_first
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            respond(&mut writer, "503 Service Unavailable", "{\"error\":\"busy\"}")?;
            continue;
        }
        match serde_json::from_slice::<EmbedRequest>(&body) {
            Ok(req) => {
                let resp = EmbedResponse {
                    vectors: req.input.iter().map(|t| echo_vector(t, req.mode)).collect(),
                };
                respond(&mut writer, "200 OK", &serde_json::to_string(&resp).unwrap())?;
            }
            Err(e) => respond(&mut writer, "400 Bad Request", &format!("{{\"error\":\"{e}\"}}"))?,
        }
    }
}

impl EchoServer {
    pub fn start() -> EchoServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}/embed", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let fail_first = Arc::new(AtomicUsize::new(0));
        let (r, f) = (requests.clone(), fail_first.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (r, f) = (r.clone(), f.clone());
                std::thread::spawn(move || serve(stream, r, f));
            }
        });
        EchoServer {
            endpoint,
            requests,
            fail_first,
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}
