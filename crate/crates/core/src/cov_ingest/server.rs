use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;
use tracing::{debug, info, warn};

use super::ingestor::{Ingestor, LineOutcome};
use super::store::EventStore;

/// The only byte ever written back to a sender.
pub const ACK: u8 = b'1';

const MAX_LINE_BYTES: u64 = 64 * 1024;

pub type SharedIngestor<S> = Arc<Mutex<Ingestor<S>>>;

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Keep the connection open and read newline-delimited events until EOF.
    /// Off by default: one event per connection.
    pub persistent: bool,
    pub read_timeout: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            persistent: false,
            read_timeout: Duration::from_secs(30),
        }
    }
}

pub async fn bind(addr: &str) -> io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Accepts COV connections until `shutdown` resolves, then waits for in-flight
/// connections to finish.
pub async fn serve<S, F>(
    listener: TcpListener,
    ingestor: SharedIngestor<S>,
    options: ServeOptions,
    shutdown: F,
) -> io::Result<()>
where
    S: EventStore + 'static,
    F: Future<Output = ()>,
{
    info!(addr = ?listener.local_addr().ok(), "waiting for connections");
    let mut tasks = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(conn) => conn,
                    Err(e) => {
                        warn!(error = %e, "accept failed");
                        continue;
                    }
                };
                let ingestor = Arc::clone(&ingestor);
                tasks.spawn(async move {
                    if let Err(e) = handle(stream, peer, ingestor, options).await {
                        debug!(%peer, error = %e, "connection ended with error");
                    }
                });
            }
            Some(_) = tasks.join_next(), if !tasks.is_empty() => {}
        }
    }
    while tasks.join_next().await.is_some() {}
    Ok(())
}

async fn handle<S: EventStore + 'static>(
    stream: TcpStream,
    peer: SocketAddr,
    ingestor: SharedIngestor<S>,
    options: ServeOptions,
) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read.take(u64::MAX));
    loop {
        let mut buf = Vec::new();
        reader.get_mut().set_limit(MAX_LINE_BYTES);
        let n = tokio::time::timeout(options.read_timeout, reader.read_until(b'\n', &mut buf))
            .await
            .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "read timeout"))??;
        if n == 0 {
            break;
        }
        let line = String::from_utf8_lossy(&buf);
        if line.trim().is_empty() {
            if options.persistent {
                continue;
            }
            break;
        }
        let outcome = {
            let mut guard = ingestor.lock().unwrap_or_else(|p| p.into_inner());
            guard.process_line(&line)
        };
        match outcome {
            Ok(LineOutcome::Accepted(_)) => write.write_all(&[ACK]).await?,
            Ok(LineOutcome::Rejected(err)) => {
                debug!(%peer, error = %err, "rejected");
                break;
            }
            Err(e) => {
                warn!(%peer, error = %e, "backup journal write failed; not acknowledging");
                break;
            }
        }
        if !options.persistent {
            break;
        }
    }
    write.shutdown().await
}
