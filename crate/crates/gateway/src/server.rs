//! Runs a [`Session`] on its own thread and fans its outputs out to
//! connected clients over TCP and websockets.
//!
//! The first client to connect while no interactive client is present
//! drives the session; later ones are read-only mirrors. Answers produced
//! while nobody is driving are kept and replayed to the next interactive
//! client.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use base64::Engine as _;
use bytes::Bytes;
use futures::{Sink, SinkExt, Stream, StreamExt};
use lookask_core::capture::{encode_jpeg, thumbnail_jpeg};
use lookask_core::orchestrator::{run_loop, Input, Output, Session};
use lookask_core::speech::ScriptedAsr;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, oneshot};
use tokio_util::codec::{Framed, LengthDelimitedCodec};
use tower_http::services::ServeDir;

use crate::protocol::{ClientMessage, Role, ServerMessage, Slider, Timing, MAX_RECORD, PROTO_VERSION};

const THUMBNAIL_SIDE: u32 = 160;
const FRAME_QUALITY: u8 = 80;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub tcp_addr: Option<SocketAddr>,
    pub http_addr: Option<SocketAddr>,
    /// Built simulator assets served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Rate at which camera frames are republished to clients.
    pub frame_hz: f64,
    pub tick: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            tcp_addr: Some(SocketAddr::from(([127, 0, 0, 1], 0))),
            http_addr: Some(SocketAddr::from(([127, 0, 0, 1], 0))),
            static_dir: None,
            frame_hz: 10.0,
            tick: Duration::from_millis(5),
        }
    }
}

/// Maps a client request onto a session input. `Ok(None)` means the
/// message needs no session work.
pub fn translate(msg: ClientMessage) -> Result<Option<Input>, String> {
    let finite = |name: &str, x: f64| if x.is_finite() { Ok(x) } else { Err(format!("{name} must be finite")) };
    Ok(Some(match msg {
        ClientMessage::Hello { proto } if proto == PROTO_VERSION => return Ok(None),
        ClientMessage::Hello { proto } => return Err(format!("unsupported protocol {proto}, expected {PROTO_VERSION}")),
        ClientMessage::GazeMove { u, v } => Input::Gaze { u: finite("u", u)?, v: finite("v", v)? },
        ClientMessage::SliderSet { which, value } => {
            let value = finite("slider value", value)?;
            match which {
                Slider::Width => Input::Resize { width_n: Some(value), height_n: None },
                Slider::Height => Input::Resize { width_n: None, height_n: Some(value) },
                Slider::Distance if value > 0.0 => Input::SetDistance(value),
                Slider::Distance => return Err("distance must be positive".into()),
            }
        }
        ClientMessage::Trigger => Input::Trigger,
        ClientMessage::ModeSet { mode } => Input::SetMode(mode),
        ClientMessage::QueryText { text } => Input::QueryText(text),
        ClientMessage::MicScript { events } => {
            Input::MicScript(events.parse::<ScriptedAsr>().map_err(|e| format!("mic script: {e}"))?)
        }
        ClientMessage::Clear => Input::Clear,
    }))
}

#[derive(Default)]
struct HubState {
    interactive: Option<u64>,
    next_client: u64,
    last_window: Option<String>,
    retained: Vec<String>,
    latest_frame: Option<Bytes>,
    frame_seq: u64,
    last_frame_at: Option<Instant>,
    image_dims: (u32, u32),
}

struct Hub {
    state: Mutex<HubState>,
    events: broadcast::Sender<String>,
    inputs: Mutex<Option<mpsc::Sender<Input>>>,
    frame_period: Duration,
}

impl Hub {
    fn publish(&self, out: Output) {
        let mut st = self.state.lock().unwrap();
        let msg = match out {
            Output::Frame(frame) => {
                st.image_dims = (frame.width(), frame.height());
                let now = Instant::now();
                if st.last_frame_at.is_some_and(|t| now.duration_since(t) < self.frame_period) {
                    return;
                }
                let jpeg = match encode_jpeg(frame.pixels(), frame.width(), frame.height(), FRAME_QUALITY) {
                    Ok(j) => j,
                    Err(e) => {
                        tracing::warn!("frame encode failed: {e}");
                        return;
                    }
                };
                st.last_frame_at = Some(now);
                st.frame_seq += 1;
                st.latest_frame = Some(Bytes::from(jpeg));
                ServerMessage::Frame { seq: st.frame_seq, width: frame.width(), height: frame.height() }
            }
            Output::Window { window, bounds } => {
                let m = ServerMessage::WindowUpdate {
                    window,
                    bounds,
                    image_width: st.image_dims.0,
                    image_height: st.image_dims.1,
                };
                st.last_window = Some(m.to_string());
                m
            }
            Output::Capture { crop_id, bounds, crop_hash, crop } => {
                let thumbnail = thumbnail_jpeg(&crop, THUMBNAIL_SIDE)
                    .map(|j| base64::engine::general_purpose::STANDARD.encode(j))
                    .unwrap_or_default();
                ServerMessage::CaptureEvent { crop_id, bounds, crop_hash, thumbnail }
            }
            Output::MicOpen => ServerMessage::MicOpen,
            Output::Partial(text) => ServerMessage::Partial { text },
            Output::Committed(text) => ServerMessage::Committed { text },
            Output::Token { crop_id, text } => ServerMessage::Token { crop_id, text_fragment: text },
            Output::Answer(a) => {
                let g = &a.generation;
                let m = ServerMessage::Answer {
                    crop_id: a.crop_id,
                    text: a.text.clone(),
                    query: a.query.text.clone(),
                    crop_hash: a.query.crop_hash.clone(),
                    consumed_hash: a.consumed_hash.clone(),
                    timing: Timing {
                        inference_s: g.inference_time,
                        encode_s: g.encode_time,
                        decode_s: g.decode_time,
                        tokens: g.tokens_generated,
                        tg_tok_per_s: g.tg_speed,
                    },
                };
                if st.interactive.is_none() {
                    st.retained.push(m.to_string());
                }
                m
            }
            Output::Busy => ServerMessage::Busy,
            Output::Error(msg) => ServerMessage::Error { msg },
        };
        // No receivers is fine: nobody is connected.
        let _ = self.events.send(msg.to_string());
    }

    fn send_input(&self, input: Input) -> bool {
        self.inputs.lock().unwrap().as_ref().is_some_and(|tx| tx.send(input).is_ok())
    }
}

struct Registration {
    id: u64,
    role: Role,
    events: broadcast::Receiver<String>,
    backlog: Vec<String>,
}

impl Hub {
    fn register(&self) -> Registration {
        let mut st = self.state.lock().unwrap();
        let id = st.next_client;
        st.next_client += 1;
        let role = if st.interactive.is_none() {
            st.interactive = Some(id);
            Role::Interactive
        } else {
            Role::Mirror
        };
        let mut backlog = vec![ServerMessage::Hello { proto: PROTO_VERSION, role }.to_string()];
        backlog.extend(st.last_window.clone());
        if role == Role::Interactive {
            backlog.append(&mut st.retained);
        }
        Registration { id, role, events: self.events.subscribe(), backlog }
    }

    fn unregister(&self, id: u64) {
        let mut st = self.state.lock().unwrap();
        if st.interactive == Some(id) {
            st.interactive = None;
        }
    }
}

/// Serves one client over any record transport.
async fn run_client<Tx, Rx, E>(hub: Arc<Hub>, mut tx: Tx, mut rx: Rx)
where
    Tx: Sink<String> + Unpin,
    Rx: Stream<Item = Result<String, E>> + Unpin,
    E: std::fmt::Display,
{
    let Registration { id, role, mut events, backlog } = hub.register();
    tracing::info!(client = id, ?role, "client connected");
    for m in backlog {
        if tx.send(m).await.is_err() {
            hub.unregister(id);
            return;
        }
    }
    loop {
        tokio::select! {
            incoming = rx.next() => {
                let text = match incoming {
                    Some(Ok(text)) => text,
                    Some(Err(e)) => {
                        tracing::debug!(client = id, "read error: {e}");
                        break;
                    }
                    None => break,
                };
                let reply = match ClientMessage::parse(&text) {
                    Err(e) => Some(e.to_string()),
                    Ok(_) if role == Role::Mirror => Some("read-only mirror".to_string()),
                    Ok(msg) => match translate(msg) {
                        Err(e) => Some(e),
                        Ok(None) => None,
                        Ok(Some(input)) => (!hub.send_input(input)).then(|| "session stopped".to_string()),
                    },
                };
                if let Some(msg) = reply {
                    if tx.send(ServerMessage::Error { msg }.to_string()).await.is_err() {
                        break;
                    }
                }
            }
            event = events.recv() => match event {
                Ok(m) => {
                    if tx.send(m).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!(client = id, "dropped {n} events"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
        }
    }
    hub.unregister(id);
    tracing::info!(client = id, "client disconnected");
}

async fn accept_tcp(listener: TcpListener, hub: Arc<Hub>, mut stop: broadcast::Receiver<()>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => {
                    let _ = stream.set_nodelay(true);
                    let framed = Framed::new(stream, codec());
                    let (sink, stream) = framed.split();
                    let sink = sink.with(|s: String| futures::future::ready(Ok::<_, std::io::Error>(Bytes::from(s))));
                    let stream = stream.map(|r| {
                        r.and_then(|b| String::from_utf8(b.to_vec()).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
                    });
                    let hub = hub.clone();
                    let mut stop = stop.resubscribe();
                    tokio::spawn(async move {
                        tokio::select! {
                            _ = run_client(hub, Box::pin(sink), Box::pin(stream)) => {}
                            _ = stop.recv() => {}
                        }
                    });
                }
                Err(e) => tracing::warn!("accept failed: {e}"),
            },
            _ = stop.recv() => break,
        }
    }
}

pub(crate) fn codec() -> LengthDelimitedCodec {
    LengthDelimitedCodec::builder().length_field_length(4).big_endian().max_frame_length(MAX_RECORD).new_codec()
}

#[derive(Clone)]
struct HttpState {
    hub: Arc<Hub>,
    stop: broadcast::Sender<()>,
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<HttpState>) -> Response {
    ws.on_upgrade(move |socket| serve_ws(socket, state))
}

async fn serve_ws(socket: WebSocket, state: HttpState) {
    let (sink, stream) = socket.split();
    let sink = sink.with(|s: String| futures::future::ready(Ok::<_, axum::Error>(Message::Text(s))));
    let stream = stream.filter_map(|m| {
        futures::future::ready(match m {
            Ok(Message::Text(t)) => Some(Ok(t)),
            Ok(Message::Binary(b)) => Some(String::from_utf8(b).map_err(|e| e.to_string())),
            Ok(_) => None,
            Err(e) => Some(Err(e.to_string())),
        })
    });
    let mut stop = state.stop.subscribe();
    tokio::select! {
        _ = run_client(state.hub, Box::pin(sink), Box::pin(stream)) => {}
        _ = stop.recv() => {}
    }
}

async fn frame_handler(State(state): State<HttpState>) -> Response {
    let latest = state.hub.state.lock().unwrap().latest_frame.clone();
    match latest {
        Some(jpeg) => ([(header::CONTENT_TYPE, "image/jpeg"), (header::CACHE_CONTROL, "no-store")], jpeg).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

const PLACEHOLDER_INDEX: &str = "<!doctype html><title>lookask</title>\
<p>lookask gateway is running. Connect a simulator to <code>/ws</code>; the latest camera frame is at \
<a href=\"/frame.jpg\">/frame.jpg</a>.</p>";

fn router(state: HttpState, static_dir: Option<PathBuf>) -> Router {
    let router = Router::new()
        .route("/ws", get(ws_handler))
        .route("/frame.jpg", get(frame_handler))
        .route("/healthz", get(|| async { "ok" }));
    let router = match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    };
    router.with_state(state)
}

/// Handle to a running gateway.
pub struct RunningGateway {
    pub tcp_addr: Option<SocketAddr>,
    pub http_addr: Option<SocketAddr>,
    hub: Arc<Hub>,
    stop: broadcast::Sender<()>,
    session: Option<JoinHandle<Session>>,
    http_done: Option<oneshot::Receiver<()>>,
}

impl RunningGateway {
    /// Disconnects clients, stops the session thread and hands the session
    /// back for inspection.
    pub async fn shutdown(mut self) -> Session {
        let _ = self.stop.send(());
        self.hub.inputs.lock().unwrap().take();
        if let Some(done) = self.http_done.take() {
            let _ = done.await;
        }
        let handle = self.session.take().expect("session thread");
        tokio::task::spawn_blocking(move || handle.join().expect("session thread panicked")).await.expect("join task")
    }

    /// Forwards an input as if it came from the interactive client.
    pub fn inject(&self, input: Input) -> bool {
        self.hub.send_input(input)
    }
}

/// Starts the session thread and the configured listeners. Must be called
/// from inside a tokio runtime.
pub async fn serve(session: Session, cfg: GatewayConfig) -> std::io::Result<RunningGateway> {
    let (events, _) = broadcast::channel(4096);
    let (input_tx, input_rx) = mpsc::channel();
    let frame_period = if cfg.frame_hz > 0.0 { Duration::from_secs_f64(1.0 / cfg.frame_hz) } else { Duration::MAX };
    let image_dims = session.frame().map_or((0, 0), |f| (f.width(), f.height()));
    let hub = Arc::new(Hub { state: Mutex::new(HubState { image_dims, ..HubState::default() }), events, inputs: Mutex::new(Some(input_tx)), frame_period });

    let (stop, _) = broadcast::channel(1);
    let tcp_addr = match cfg.tcp_addr {
        Some(addr) => {
            let listener = TcpListener::bind(addr).await?;
            let local = listener.local_addr()?;
            tokio::spawn(accept_tcp(listener, hub.clone(), stop.subscribe()));
            Some(local)
        }
        None => None,
    };
    let mut http_done = None;
    let http_addr = match cfg.http_addr {
        Some(addr) => {
            let listener = TcpListener::bind(addr).await?;
            let local = listener.local_addr()?;
            let app = router(HttpState { hub: hub.clone(), stop: stop.clone() }, cfg.static_dir.clone());
            let mut stop_rx = stop.subscribe();
            let (done_tx, done_rx) = oneshot::channel();
            tokio::spawn(async move {
                let server = axum::serve(listener, app).with_graceful_shutdown(async move {
                    let _ = stop_rx.recv().await;
                });
                if let Err(e) = server.await {
                    tracing::warn!("http server: {e}");
                }
                let _ = done_tx.send(());
            });
            http_done = Some(done_rx);
            Some(local)
        }
        None => None,
    };

    let sink_hub = hub.clone();
    let tick = cfg.tick;
    let handle = std::thread::Builder::new()
        .name("session".into())
        .spawn(move || run_loop(session, input_rx, move |out| sink_hub.publish(out), tick))?;

    Ok(RunningGateway { tcp_addr, http_addr, hub, stop, session: Some(handle), http_done })
}
