//! Headless client for the TCP transport, used by tests and scripts.

use std::net::SocketAddr;
use std::time::Duration;

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_util::codec::{Framed, LengthDelimitedCodec};

use crate::protocol::{ClientMessage, ProtocolError, ServerMessage};
use crate::server::codec;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("connection closed")]
    Closed,
    #[error("timed out")]
    Timeout,
}

pub struct Client {
    framed: Framed<TcpStream, LengthDelimitedCodec>,
    seen: Vec<ServerMessage>,
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        Ok(Self { framed: Framed::new(stream, codec()), seen: Vec::new() })
    }

    pub async fn send(&mut self, msg: &ClientMessage) -> Result<(), ClientError> {
        self.send_raw(&msg.to_string()).await
    }

    /// Sends an arbitrary record, well-formed or not.
    pub async fn send_raw(&mut self, text: &str) -> Result<(), ClientError> {
        self.framed.send(Bytes::copy_from_slice(text.as_bytes())).await?;
        Ok(())
    }

    pub async fn recv(&mut self) -> Result<ServerMessage, ClientError> {
        let bytes = self.framed.next().await.ok_or(ClientError::Closed)??;
        let text = String::from_utf8_lossy(&bytes);
        let msg = ServerMessage::parse(&text)?;
        self.seen.push(msg.clone());
        Ok(msg)
    }

    pub async fn recv_timeout(&mut self, timeout: Duration) -> Result<ServerMessage, ClientError> {
        tokio::time::timeout(timeout, self.recv()).await.map_err(|_| ClientError::Timeout)?
    }

    /// Reads until a message satisfies `pred` and returns it.
    pub async fn wait_for(
        &mut self,
        timeout: Duration,
        mut pred: impl FnMut(&ServerMessage) -> bool,
    ) -> Result<ServerMessage, ClientError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            let msg = self.recv_timeout(left).await?;
            if pred(&msg) {
                return Ok(msg);
            }
        }
    }

    /// Every message received so far, in order.
    pub fn seen(&self) -> &[ServerMessage] {
        &self.seen
    }
}
