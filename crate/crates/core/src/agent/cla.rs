//! Minimal stream convergence layer: a 4-octet big-endian length followed
//! by the payload. The listener closes the connection once the payload has
//! been recorded.

use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use crate::nlri::{ClaEndpoint, SAFI_MTCP, SAFI_TCPCL_V3, SAFI_TCPCL_V4};

pub const PROBE_TIMEOUT: Duration = Duration::from_secs(5);
const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("unsupported SAFI {0}")]
    UnsupportedSafi(u8),
    #[error("connection refused by {0}")]
    ConnectionRefused(SocketAddr),
    #[error("timed out")]
    Timeout,
    #[error("payload of {0} octets too large")]
    TooLarge(usize),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub delivered: bool,
    pub bytes: usize,
    pub rtt_ms: f64,
}

/// SAFIs whose endpoints this simulator can reach with the stream framing.
pub fn probe_supported(safi: u8) -> bool {
    matches!(safi, SAFI_MTCP | SAFI_TCPCL_V3 | SAFI_TCPCL_V4)
}

/// Accepts payloads until the task is dropped, calling `on_payload` for each.
pub async fn cla_listen(
    listener: TcpListener,
    on_payload: impl Fn(SocketAddr, Vec<u8>) + Send + Sync + Clone + 'static,
) {
    loop {
        let (mut stream, from) = match listener.accept().await {
            Ok(conn) => conn,
            Err(err) => {
                tracing::warn!(%err, "CLA accept failed");
                tokio::time::sleep(Duration::from_millis(100)).await;
                continue;
            }
        };
        let on_payload = on_payload.clone();
        tokio::spawn(async move {
            match tokio::time::timeout(PROBE_TIMEOUT, read_frame(&mut stream)).await {
                Ok(Ok(payload)) => on_payload(from, payload),
                Ok(Err(err)) => tracing::debug!(%from, %err, "bad CLA frame"),
                Err(_) => tracing::debug!(%from, "CLA frame timed out"),
            }
        });
    }
}

async fn read_frame(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let len = stream.read_u32().await? as usize;
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "payload too large",
        ));
    }
    let mut payload = vec![0; len];
    stream.read_exact(&mut payload).await?;
    Ok(payload)
}

/// Sends one payload to `target` and waits for the listener to close the
/// connection, which acknowledges receipt.
pub async fn cla_probe(
    target: &ClaEndpoint,
    payload: &[u8],
    timeout: Duration,
) -> Result<DeliveryReport, ProbeError> {
    if !probe_supported(target.safi) {
        return Err(ProbeError::UnsupportedSafi(target.safi));
    }
    if payload.len() > MAX_PAYLOAD {
        return Err(ProbeError::TooLarge(payload.len()));
    }
    let start = Instant::now();
    let exchange = async {
        let mut stream = TcpStream::connect(target.addr)
            .await
            .map_err(|e| match e.kind() {
                io::ErrorKind::ConnectionRefused => ProbeError::ConnectionRefused(target.addr),
                _ => ProbeError::Io(e.to_string()),
            })?;
        let io_err = |e: io::Error| ProbeError::Io(e.to_string());
        stream
            .write_u32(payload.len() as u32)
            .await
            .map_err(io_err)?;
        stream.write_all(payload).await.map_err(io_err)?;
        stream.shutdown().await.map_err(io_err)?;
        let mut rest = Vec::new();
        stream.read_to_end(&mut rest).await.map_err(io_err)?;
        Ok(())
    };
    tokio::time::timeout(timeout, exchange)
        .await
        .map_err(|_| ProbeError::Timeout)??;
    Ok(DeliveryReport {
        delivered: true,
        bytes: payload.len(),
        rtt_ms: start.elapsed().as_secs_f64() * 1000.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlri::SAFI_UDPCL;
    use std::sync::{Arc, Mutex};

    #[tokio::test]
    async fn probe_delivers_payload() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let got = Arc::new(Mutex::new(Vec::new()));
        let sink = got.clone();
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        tokio::spawn(cla_listen(listener, move |_, p| {
            sink.lock().unwrap().push(p);
            let _ = tx.send(());
        }));
        let report = cla_probe(
            &ClaEndpoint::new(SAFI_MTCP, addr),
            b"hello world",
            PROBE_TIMEOUT,
        )
        .await
        .unwrap();
        assert!(report.delivered);
        assert_eq!(report.bytes, 11);
        rx.recv().await.unwrap();
        assert_eq!(got.lock().unwrap().as_slice(), &[b"hello world".to_vec()]);
    }

    #[tokio::test]
    async fn probe_refused() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = cla_probe(&ClaEndpoint::new(SAFI_MTCP, addr), b"x", PROBE_TIMEOUT)
            .await
            .unwrap_err();
        assert_eq!(err, ProbeError::ConnectionRefused(addr));
    }

    #[tokio::test]
    async fn probe_unsupported_safi() {
        let target = ClaEndpoint::new(SAFI_UDPCL, "127.0.0.1:9".parse().unwrap());
        assert_eq!(
            cla_probe(&target, b"x", PROBE_TIMEOUT).await,
            Err(ProbeError::UnsupportedSafi(3))
        );
    }

    #[tokio::test]
    async fn probe_times_out_on_silent_listener() {
        // Accepts but never reads or closes.
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = tokio::spawn(async move {
            let (s, _) = listener.accept().await.unwrap();
            tokio::time::sleep(Duration::from_secs(5)).await;
            drop(s);
        });
        let err = cla_probe(
            &ClaEndpoint::new(SAFI_MTCP, addr),
            b"x",
            Duration::from_millis(200),
        )
        .await
        .unwrap_err();
        assert_eq!(err, ProbeError::Timeout);
        hold.abort();
    }
}
