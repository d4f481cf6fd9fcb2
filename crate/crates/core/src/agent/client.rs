use std::io;
use std::net::SocketAddr;

use base64::Engine as _;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use super::{AgentMessage, BundleRecord, DeliveryReport, FibEntryMsg, Role};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("agent closed the connection")]
    Closed,
    #[error("undecodable reply: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("agent rejected request: {0}")]
    Rejected(String),
    #[error("unexpected reply")]
    Unexpected,
}

/// A control connection to an agent. Requests are answered in order.
#[derive(Debug)]
pub struct AgentClient {
    lines: Lines<BufReader<OwnedReadHalf>>,
    write: OwnedWriteHalf,
}

impl AgentClient {
    pub async fn connect(addr: SocketAddr) -> Result<Self, ClientError> {
        let (read, write) = TcpStream::connect(addr).await?.into_split();
        let mut client = Self {
            lines: BufReader::new(read).lines(),
            write,
        };
        client
            .request(&AgentMessage::Hello {
                role: Role::Control,
            })
            .await?;
        Ok(client)
    }

    /// Sends one message and returns the `ok` reply.
    pub async fn request(&mut self, msg: &AgentMessage) -> Result<AgentMessage, ClientError> {
        self.write.write_all(msg.to_line().as_bytes()).await?;
        let line = self.lines.next_line().await?.ok_or(ClientError::Closed)?;
        match serde_json::from_str::<AgentMessage>(&line)? {
            AgentMessage::Error { reason } => Err(ClientError::Rejected(reason)),
            reply @ AgentMessage::Ok { .. } => Ok(reply),
            _ => Err(ClientError::Unexpected),
        }
    }

    pub async fn register(&mut self, eid: &str, cla: &str) -> Result<(), ClientError> {
        self.request(&AgentMessage::Register {
            eid: eid.into(),
            cla: cla.into(),
        })
        .await
        .map(drop)
    }

    pub async fn deregister(&mut self, eid: &str) -> Result<(), ClientError> {
        self.request(&AgentMessage::Deregister { eid: eid.into() })
            .await
            .map(drop)
    }

    pub async fn fib(&mut self) -> Result<Vec<FibEntryMsg>, ClientError> {
        match self.request(&AgentMessage::FibGet).await? {
            AgentMessage::Ok { fib: Some(fib), .. } => Ok(fib),
            _ => Err(ClientError::Unexpected),
        }
    }

    pub async fn bundles(&mut self) -> Result<Vec<BundleRecord>, ClientError> {
        match self.request(&AgentMessage::BundleRecv).await? {
            AgentMessage::Ok {
                bundles: Some(b), ..
            } => Ok(b),
            _ => Err(ClientError::Unexpected),
        }
    }

    pub async fn send_bundle(
        &mut self,
        eid: &str,
        payload: &[u8],
    ) -> Result<DeliveryReport, ClientError> {
        let msg = AgentMessage::BundleSend {
            eid: eid.into(),
            payload_b64: base64::engine::general_purpose::STANDARD.encode(payload),
        };
        match self.request(&msg).await? {
            AgentMessage::Ok {
                report: Some(r), ..
            } => Ok(r),
            _ => Err(ClientError::Unexpected),
        }
    }
}
