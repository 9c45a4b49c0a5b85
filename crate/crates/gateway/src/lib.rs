//! Realtime gateway between the lookask session and the HUD simulator.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::Client;
pub use protocol::{ClientMessage, ProtocolError, Role, ServerMessage, Slider, Timing, PROTO_VERSION};
pub use server::{serve, translate, GatewayConfig, RunningGateway};
