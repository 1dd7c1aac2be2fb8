//! TCP server and client for a [`ShardedStore`].

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::{debug, warn};

use super::protocol::{read_frame, write_frame, Request, Response, StoreInfo, OP_FETCH, OP_INFO, OP_PUSH, OP_SNAPSHOT};
use super::{build_updates, check_outcomes, FetchedRows, PushOutcome, ShardedStore, Update, WeightBackend, WeightRecord};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Executes one decoded request against the store.
pub fn handle_request(store: &ShardedStore, req: Request) -> Response {
    let result = match req {
        Request::Fetch(ids) => store.fetch(&ids).map(|records| Response::Fetched {
            dim: store.dim(),
            records,
        }),
        Request::Push { dim, updates } => {
            if dim != store.dim() {
                Err(Error::Dimension { expected: store.dim(), got: dim })
            } else {
                store.push_update(&updates).map(|outcomes| {
                    Response::Pushed(updates.iter().map(|u| u.class_id).zip(outcomes).collect())
                })
            }
        }
        Request::Snapshot(path) => store.snapshot(Path::new(&path)).map(|()| Response::SnapshotWritten),
        Request::Info => Ok(Response::Info(StoreInfo {
            num_classes: store.num_classes(),
            dim: store.dim(),
            num_shards: store.shard_map().num_shards(),
        })),
    };
    result.unwrap_or_else(|e| Response::Error(e.to_string()))
}

fn serve_connection(store: &ShardedStore, stream: TcpStream) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let payload = match read_frame(&mut reader) {
            Ok(Some(p)) => p,
            Ok(None) => return Ok(()),
            Err(e @ Error::Protocol(_)) => {
                // the stream cannot be resynchronised after a bad length prefix
                write_frame(&mut writer, &Response::Error(e.to_string()).encode())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let resp = match Request::decode(&payload) {
            Ok(req) => handle_request(store, req),
            Err(e) => Response::Error(e.to_string()),
        };
        write_frame(&mut writer, &resp.encode())?;
    }
}

/// A listening store server. Each connection is served on its own thread.
pub struct PsServer {
    listener: TcpListener,
    store: Arc<ShardedStore>,
    stop: Arc<AtomicBool>,
}

impl PsServer {
    pub fn bind<A: ToSocketAddrs>(addr: A, store: Arc<ShardedStore>) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            store,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn store(&self) -> &Arc<ShardedStore> {
        &self.store
    }

    /// Accepts connections until [`ServerHandle::shutdown`] is called.
    pub fn serve(&self) -> Result<()> {
        for conn in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let store = Arc::clone(&self.store);
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = serve_connection(&store, stream) {
                    debug!("connection {peer:?} closed: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs [`serve`](Self::serve) on a background thread.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let store = Arc::clone(&self.store);
        let thread = thread::spawn(move || self.serve());
        Ok(ServerHandle { addr, stop, store, thread: Some(thread) })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    store: Arc<ShardedStore>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<ShardedStore> {
        &self.store
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_accepting()
    }

    fn stop_accepting(&mut self) -> Result<()> {
        if let Some(t) = self.thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect(self.addr);
            t.join().map_err(|_| Error::Remote("server thread panicked".into()))??;
        }
        Ok(())
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_accepting();
    }
}

/// Client connection to a [`PsServer`].
pub struct RemoteStore {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    info: StoreInfo,
}

impl RemoteStore {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut s = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            info: StoreInfo { num_classes: 0, dim: 0, num_shards: 0 },
        };
        s.info = s.query_info()?;
        Ok(s)
    }

    pub fn info(&self) -> StoreInfo {
        self.info
    }

    /// Sends a raw payload and returns the raw response payload.
    pub fn roundtrip_raw(&mut self, payload: &[u8]) -> Result<Vec<u8>> {
        write_frame(&mut self.writer, payload)?;
        read_frame(&mut self.reader)?.ok_or_else(|| Error::Remote("server closed the connection".into()))
    }

    fn call(&mut self, op: u8, req: &Request) -> Result<Response> {
        let raw = self.roundtrip_raw(&req.encode())?;
        match Response::decode(op, &raw)? {
            Response::Error(msg) => Err(Error::Remote(msg)),
            r => Ok(r),
        }
    }

    fn query_info(&mut self) -> Result<StoreInfo> {
        match self.call(OP_INFO, &Request::Info)? {
            Response::Info(i) => Ok(i),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    pub fn fetch(&mut self, ids: &[usize]) -> Result<Vec<WeightRecord>> {
        match self.call(OP_FETCH, &Request::Fetch(ids.to_vec()))? {
            Response::Fetched { records, .. } => Ok(records),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    pub fn push(&mut self, updates: Vec<Update>) -> Result<Vec<PushOutcome>> {
        let req = Request::Push { dim: self.info.dim, updates };
        match self.call(OP_PUSH, &req)? {
            Response::Pushed(v) => Ok(v.into_iter().map(|(_, o)| o).collect()),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    /// Asks the server to write a snapshot to `path` on its own filesystem.
    pub fn snapshot(&mut self, path: &str) -> Result<()> {
        match self.call(OP_SNAPSHOT, &Request::Snapshot(path.to_owned()))? {
            Response::SnapshotWritten => Ok(()),
            other => Err(Error::Protocol(format!("unexpected response {other:?}"))),
        }
    }
}

impl WeightBackend for RemoteStore {
    fn num_classes(&self) -> usize {
        self.info.num_classes
    }

    fn dim(&self) -> usize {
        self.info.dim
    }

    fn fetch_rows(&mut self, ids: &[usize]) -> Result<FetchedRows> {
        let recs = self.fetch(ids)?;
        FetchedRows::from_records(recs, self.info.dim)
    }

    fn apply_deltas(&mut self, ids: &[usize], deltas: &Matrix, expected: Option<&[u64]>) -> Result<()> {
        let outcomes = self.push(build_updates(ids, deltas, expected)?)?;
        check_outcomes(ids, &outcomes)
    }

    fn export_all(&mut self) -> Result<Matrix> {
        let ids: Vec<usize> = (0..self.info.num_classes).collect();
        FetchedRows::from_records(self.fetch(&ids)?, self.info.dim).map(|f| f.weights)
    }
}
