//! Client for a heuristic served over TCP or a child process's stdio.
//!
//! The service keeps recurrent state per `(episode, step)`. Each pooled
//! connection remembers the raster digests it has sent for its current
//! episode; a history that extends (or branches from) that sequence only
//! sends the missing suffix, anything else starts a new episode and replays
//! the whole history.

use super::protocol::{Request, Response};
use super::{Heuristic, HeuristicError, HeuristicOutput, HeuristicSpec};
use crate::observation::{History, Observation};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio { program: String, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub endpoint: Endpoint,
    pub pool_size: usize,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn tcp(addr: impl Into<String>) -> Self {
        Self {
            endpoint: Endpoint::Tcp(addr.into()),
            pool_size: 2,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn from_spec(spec: &HeuristicSpec) -> Option<Self> {
        match spec {
            HeuristicSpec::Remote(addr) => Some(Self::tcp(addr.clone())),
            HeuristicSpec::Stdio(cmd) => {
                let mut parts = cmd.split_whitespace().map(str::to_string);
                let program = parts.next()?;
                Some(Self {
                    endpoint: Endpoint::Stdio {
                        program,
                        args: parts.collect(),
                    },
                    pool_size: 1,
                    timeout: Duration::from_secs(30),
                })
            }
            _ => None,
        }
    }
}

type Digest32 = [u8; 32];

struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    episode: u64,
    sent: Vec<Digest32>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Connection {
    fn open(config: &RemoteConfig) -> std::io::Result<Self> {
        match &config.endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_read_timeout(Some(config.timeout))?;
                stream.set_write_timeout(Some(config.timeout))?;
                stream.set_nodelay(true)?;
                let reader: Box<dyn Read + Send> = Box::new(stream.try_clone()?);
                Ok(Self {
                    reader: BufReader::new(reader),
                    writer: Box::new(stream),
                    child: None,
                    episode: 0,
                    sent: Vec::new(),
                })
            }
            Endpoint::Stdio { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self {
                    reader: BufReader::new(Box::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                    episode: 0,
                    sent: Vec::new(),
                })
            }
        }
    }

    fn exchange(&mut self, req: &Request) -> Result<Response, String> {
        let mut line = req.to_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(|e| e.to_string())?;
        self.writer.flush().map_err(|e| e.to_string())?;
        let mut resp = String::new();
        let n = self.reader.read_line(&mut resp).map_err(|e| e.to_string())?;
        if n == 0 {
            return Err("connection closed".into());
        }
        Response::parse(resp.trim_end())
    }
}

struct Pool {
    idle: Vec<Connection>,
    open: usize,
}

pub struct RemoteHeuristic {
    config: RemoteConfig,
    pool: Mutex<Pool>,
    available: Condvar,
    next_episode: AtomicU64,
}

impl std::fmt::Debug for RemoteHeuristic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteHeuristic").field("config", &self.config).finish()
    }
}

enum Failure {
    /// The server lost the prefix of a non-reset request.
    MissingPrefix,
    Fatal(String),
}

impl RemoteHeuristic {
    pub fn new(config: RemoteConfig) -> Self {
        let base = (std::process::id() as u64) << 32;
        Self {
            config,
            pool: Mutex::new(Pool { idle: Vec::new(), open: 0 }),
            available: Condvar::new(),
            next_episode: AtomicU64::new(base + 1),
        }
    }

    /// Opens one connection eagerly so configuration errors surface early.
    pub fn connect(config: RemoteConfig) -> Result<Self, HeuristicError> {
        let client = Self::new(config);
        let conn = Connection::open(&client.config).map_err(|e| HeuristicError::RemoteUnavailable(e.to_string()))?;
        let mut pool = client.pool.lock().expect("pool lock");
        pool.idle.push(conn);
        pool.open = 1;
        drop(pool);
        Ok(client)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn acquire(&self, digests: &[Digest32]) -> Result<Connection, HeuristicError> {
        let mut pool = self.pool.lock().expect("pool lock");
        loop {
            if !pool.idle.is_empty() {
                let best = (0..pool.idle.len())
                    .max_by_key(|&i| (common_prefix(&pool.idle[i].sent, digests), std::cmp::Reverse(i)))
                    .expect("non-empty");
                return Ok(pool.idle.swap_remove(best));
            }
            if pool.open < self.config.pool_size.max(1) {
                pool.open += 1;
                drop(pool);
                return Connection::open(&self.config).map_err(|e| {
                    let mut pool = self.pool.lock().expect("pool lock");
                    pool.open -= 1;
                    self.available.notify_one();
                    HeuristicError::RemoteUnavailable(e.to_string())
                });
            }
            pool = self.available.wait(pool).expect("pool lock");
        }
    }

    fn release(&self, conn: Option<Connection>) {
        let mut pool = self.pool.lock().expect("pool lock");
        match conn {
            Some(c) => pool.idle.push(c),
            None => pool.open -= 1,
        }
        self.available.notify_one();
    }

    fn run(&self, conn: &mut Connection, history: &History<Observation>, digests: &[Digest32], fresh: bool) -> Result<HeuristicOutput, Failure> {
        let n = digests.len();
        let start = if fresh { 0 } else { common_prefix(&conn.sent, digests).min(n - 1) };
        if start == 0 {
            conn.episode = self.next_episode.fetch_add(1, Ordering::Relaxed);
        }
        conn.sent.truncate(start);
        let mut last = None;
        for (step, obs) in history.iter().enumerate().skip(start) {
            let req = Request::new(conn.episode, step as u64, obs.raster(), step == 0);
            match conn.exchange(&req) {
                Ok(Response::Output(o)) => {
                    conn.sent.push(digests[step]);
                    last = Some(o);
                }
                Ok(Response::Error(e)) => {
                    conn.sent.clear();
                    return Err(if e == "missing_prefix" && step > 0 {
                        Failure::MissingPrefix
                    } else {
                        Failure::Fatal(e)
                    });
                }
                Err(e) => return Err(Failure::Fatal(e)),
            }
        }
        Ok(last.expect("at least one request"))
    }
}

impl Heuristic<Observation> for RemoteHeuristic {
    fn evaluate(&self, history: &History<Observation>) -> Result<HeuristicOutput, HeuristicError> {
        if history.is_empty() {
            return Err(HeuristicError::EmptyHistory);
        }
        let digests: Vec<Digest32> = history.iter().map(|o| Sha256::digest(&o.raster().data).into()).collect();
        let mut conn = self.acquire(&digests)?;
        let mut result = self.run(&mut conn, history, &digests, false);
        if matches!(result, Err(Failure::MissingPrefix)) {
            result = self.run(&mut conn, history, &digests, true);
        }
        match result {
            Ok(out) => {
                self.release(Some(conn));
                Ok(out)
            }
            Err(Failure::MissingPrefix) => {
                self.release(None);
                Err(HeuristicError::RemoteUnavailable("missing_prefix".into()))
            }
            Err(Failure::Fatal(e)) => {
                log::warn!("heuristic service error: {e}");
                self.release(None);
                Err(HeuristicError::RemoteUnavailable(e))
            }
        }
    }
}

fn common_prefix(a: &[Digest32], b: &[Digest32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}
