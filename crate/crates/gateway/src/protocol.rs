//! Wire format shared by the TCP and websocket transports.
//!
//! A record is UTF-8 text: a tag word followed by space-separated
//! `key=value` pairs with percent-encoded values, e.g.
//! `SLIDER which=width value=0.3`. Over TCP each record is preceded by a
//! 4-byte big-endian length; over websockets one text frame carries one
//! record.

use std::collections::BTreeMap;
use std::fmt;

use lookask_core::geometry::{PixelBounds, WindowState};
use lookask_core::orchestrator::Mode;
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use thiserror::Error;

pub const PROTO_VERSION: u32 = 1;
/// Upper bound on a single record; thumbnails dominate.
pub const MAX_RECORD: usize = 4 << 20;

const VALUE: &AsciiSet = &CONTROLS.add(b' ').add(b'%').add(b'=').add(b'"').add(b'\'').add(0x7f);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("empty record")]
    Empty,
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("{tag}: missing field {field}")]
    Missing { tag: String, field: &'static str },
    #[error("{tag}: bad value for {field}: {value:?}")]
    BadValue { tag: String, field: &'static str, value: String },
    #[error("malformed pair {0:?}")]
    Pair(String),
}

/// A tag plus ordered fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub tag: String,
    pub fields: BTreeMap<String, String>,
}

impl Record {
    pub fn new(tag: &str) -> Self {
        Self { tag: tag.to_string(), fields: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.insert(key.to_string(), value.to_string());
        self
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut words = text.split(' ').filter(|w| !w.is_empty());
        let tag = words.next().ok_or(ProtocolError::Empty)?.to_string();
        let mut fields = BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| ProtocolError::Pair(w.to_string()))?;
            let v = percent_decode_str(v).decode_utf8().map_err(|_| ProtocolError::Pair(w.to_string()))?;
            fields.insert(k.to_string(), v.into_owned());
        }
        Ok(Self { tag, fields })
    }

    fn str(&self, field: &'static str) -> Result<&str, ProtocolError> {
        self.fields.get(field).map(String::as_str).ok_or_else(|| ProtocolError::Missing { tag: self.tag.clone(), field })
    }

    fn num<T: std::str::FromStr>(&self, field: &'static str) -> Result<T, ProtocolError> {
        let raw = self.str(field)?;
        raw.parse().map_err(|_| ProtocolError::BadValue { tag: self.tag.clone(), field, value: raw.to_string() })
    }

    fn bad(&self, field: &'static str) -> ProtocolError {
        ProtocolError::BadValue { tag: self.tag.clone(), field, value: self.fields.get(field).cloned().unwrap_or_default() }
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={}", utf8_percent_encode(v, VALUE))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slider {
    Width,
    Height,
    Distance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Hello { proto: u32 },
    GazeMove { u: f64, v: f64 },
    SliderSet { which: Slider, value: f64 },
    Trigger,
    ModeSet { mode: Mode },
    QueryText { text: String },
    /// Mock recognizer script, one event per line.
    MicScript { events: String },
    Clear,
}

impl ClientMessage {
    pub fn to_record(&self) -> Record {
        match self {
            ClientMessage::Hello { proto } => Record::new("HELLO").with("proto", proto),
            ClientMessage::GazeMove { u, v } => Record::new("GAZE").with("u", u).with("v", v),
            ClientMessage::SliderSet { which, value } => {
                let which = match which {
                    Slider::Width => "width",
                    Slider::Height => "height",
                    Slider::Distance => "distance",
                };
                Record::new("SLIDER").with("which", which).with("value", value)
            }
            ClientMessage::Trigger => Record::new("TRIGGER"),
            ClientMessage::ModeSet { mode } => Record::new("MODE").with("mode", mode),
            ClientMessage::QueryText { text } => Record::new("QUERY").with("text", text),
            ClientMessage::MicScript { events } => Record::new("MIC").with("events", events),
            ClientMessage::Clear => Record::new("CLEAR"),
        }
    }

    pub fn from_record(r: &Record) -> Result<Self, ProtocolError> {
        Ok(match r.tag.as_str() {
            "HELLO" => ClientMessage::Hello { proto: r.num("proto")? },
            "GAZE" => ClientMessage::GazeMove { u: r.num("u")?, v: r.num("v")? },
            "SLIDER" => {
                let which = match r.str("which")? {
                    "width" => Slider::Width,
                    "height" => Slider::Height,
                    "distance" => Slider::Distance,
                    _ => return Err(r.bad("which")),
                };
                ClientMessage::SliderSet { which, value: r.num("value")? }
            }
            "TRIGGER" => ClientMessage::Trigger,
            "MODE" => ClientMessage::ModeSet { mode: r.str("mode")?.parse().map_err(|_| r.bad("mode"))? },
            "QUERY" => ClientMessage::QueryText { text: r.str("text")?.to_string() },
            "MIC" => ClientMessage::MicScript { events: r.str("events")?.to_string() },
            "CLEAR" => ClientMessage::Clear,
            other => return Err(ProtocolError::UnknownTag(other.to_string())),
        })
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        Self::from_record(&Record::parse(text)?)
    }
}

impl fmt::Display for ClientMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.to_record().fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Interactive,
    Mirror,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub inference_s: f64,
    pub encode_s: f64,
    pub decode_s: f64,
    pub tokens: usize,
    pub tg_tok_per_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Hello { proto: u32, role: Role },
    WindowUpdate { window: WindowState, bounds: PixelBounds, image_width: u32, image_height: u32 },
    /// The latest camera frame is available at `GET /frame.jpg`.
    Frame { seq: u64, width: u32, height: u32 },
    CaptureEvent { crop_id: u64, bounds: PixelBounds, crop_hash: String, thumbnail: String },
    MicOpen,
    Partial { text: String },
    Committed { text: String },
    Token { crop_id: u64, text_fragment: String },
    Answer { crop_id: u64, text: String, query: String, crop_hash: String, consumed_hash: String, timing: Timing },
    Busy,
    Error { msg: String },
}

fn bounds_fields(r: Record, b: &PixelBounds) -> Record {
    r.with("x0", b.x0).with("x1", b.x1).with("y0", b.y0).with("y1", b.y1)
}

fn read_bounds(r: &Record) -> Result<PixelBounds, ProtocolError> {
    Ok(PixelBounds { x0: r.num("x0")?, x1: r.num("x1")?, y0: r.num("y0")?, y1: r.num("y1")? })
}

impl ServerMessage {
    pub fn to_record(&self) -> Record {
        match self {
            ServerMessage::Hello { proto, role } => Record::new("HELLO").with("proto", proto).with(
                "role",
                match role {
                    Role::Interactive => "interactive",
                    Role::Mirror => "mirror",
                },
            ),
            ServerMessage::WindowUpdate { window, bounds, image_width, image_height } => bounds_fields(
                Record::new("WINDOW")
                    .with("cu", window.center_u)
                    .with("cv", window.center_v)
                    .with("w", window.width_n)
                    .with("h", window.height_n)
                    .with("img_w", image_width)
                    .with("img_h", image_height),
                bounds,
            ),
            ServerMessage::Frame { seq, width, height } => {
                Record::new("FRAME").with("seq", seq).with("width", width).with("height", height)
            }
            ServerMessage::CaptureEvent { crop_id, bounds, crop_hash, thumbnail } => bounds_fields(
                Record::new("CAPTURE").with("crop_id", crop_id).with("crop_hash", crop_hash).with("thumbnail", thumbnail),
                bounds,
            ),
            ServerMessage::MicOpen => Record::new("MIC_OPEN"),
            ServerMessage::Partial { text } => Record::new("PARTIAL").with("text", text),
            ServerMessage::Committed { text } => Record::new("COMMITTED").with("text", text),
            ServerMessage::Token { crop_id, text_fragment } => Record::new("TOKEN").with("crop_id", crop_id).with("text", text_fragment),
            ServerMessage::Answer { crop_id, text, query, crop_hash, consumed_hash, timing } => Record::new("ANSWER")
                .with("crop_id", crop_id)
                .with("text", text)
                .with("query", query)
                .with("crop_hash", crop_hash)
                .with("consumed_hash", consumed_hash)
                .with("inference_s", timing.inference_s)
                .with("encode_s", timing.encode_s)
                .with("decode_s", timing.decode_s)
                .with("tokens", timing.tokens)
                .with("tg_tok_per_s", timing.tg_tok_per_s),
            ServerMessage::Busy => Record::new("BUSY"),
            ServerMessage::Error { msg } => Record::new("ERROR").with("msg", msg),
        }
    }

    pub fn from_record(r: &Record) -> Result<Self, ProtocolError> {
        Ok(match r.tag.as_str() {
            "HELLO" => ServerMessage::Hello {
                proto: r.num("proto")?,
                role: match r.str("role")? {
                    "interactive" => Role::Interactive,
                    "mirror" => Role::Mirror,
                    _ => return Err(r.bad("role")),
                },
            },
            "WINDOW" => ServerMessage::WindowUpdate {
                window: WindowState { center_u: r.num("cu")?, center_v: r.num("cv")?, width_n: r.num("w")?, height_n: r.num("h")? },
                bounds: read_bounds(r)?,
                image_width: r.num("img_w")?,
                image_height: r.num("img_h")?,
            },
            "FRAME" => ServerMessage::Frame { seq: r.num("seq")?, width: r.num("width")?, height: r.num("height")? },
            "CAPTURE" => ServerMessage::CaptureEvent {
                crop_id: r.num("crop_id")?,
                bounds: read_bounds(r)?,
                crop_hash: r.str("crop_hash")?.to_string(),
                thumbnail: r.str("thumbnail")?.to_string(),
            },
            "MIC_OPEN" => ServerMessage::MicOpen,
            "PARTIAL" => ServerMessage::Partial { text: r.str("text")?.to_string() },
            "COMMITTED" => ServerMessage::Committed { text: r.str("text")?.to_string() },
            "TOKEN" => ServerMessage::Token { crop_id: r.num("crop_id")?, text_fragment: r.str("text")?.to_string() },
            "ANSWER" => ServerMessage::Answer {
                crop_id: r.num("crop_id")?,
                text: r.str("text")?.to_string(),
                query: r.str("query")?.to_string(),
                crop_hash: r.str("crop_hash")?.to_string(),
                consumed_hash: r.str("consumed_hash")?.to_string(),
                timing: Timing {
                    inference_s: r.num("inference_s")?,
                    encode_s: r.num("encode_s")?,
                    decode_s: r.num("decode_s")?,
                    tokens: r.num("tokens")?,
                    tg_tok_per_s: r.num("tg_tok_per_s")?,
                },
            },
            "BUSY" => ServerMessage::Busy,
            "ERROR" => ServerMessage::Error { msg: r.str("msg")?.to_string() },
            other => return Err(ProtocolError::UnknownTag(other.to_string())),
        })
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        Self::from_record(&Record::parse(text)?)
    }
}

impl fmt::Display for ServerMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.to_record().fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_with_spaces_and_equals_survive() {
        let m = ClientMessage::QueryText { text: "what is = this?\n100% sure".into() };
        let wire = m.to_string();
        assert!(!wire.contains('\n'));
        assert_eq!(wire.split(' ').count(), 2);
        assert_eq!(ClientMessage::parse(&wire).unwrap(), m);
    }

    #[test]
    fn client_round_trip() {
        for m in [
            ClientMessage::Hello { proto: 1 },
            ClientMessage::GazeMove { u: 0.25, v: 0.75 },
            ClientMessage::SliderSet { which: Slider::Distance, value: 1.5 },
            ClientMessage::Trigger,
            ClientMessage::ModeSet { mode: Mode::DwellAutoCapture },
            ClientMessage::MicScript { events: "0.5 PARTIAL hi\n1.0 FINAL hi there".into() },
            ClientMessage::Clear,
        ] {
            assert_eq!(ClientMessage::parse(&m.to_string()).unwrap(), m);
        }
    }

    #[test]
    fn server_round_trip() {
        let window = WindowState { center_u: 0.5, center_v: 0.25, width_n: 0.3, height_n: 0.2 };
        let bounds = PixelBounds { x0: 1, x1: 9, y0: 2, y1: 7 };
        for m in [
            ServerMessage::Hello { proto: 1, role: Role::Mirror },
            ServerMessage::WindowUpdate { window, bounds, image_width: 640, image_height: 480 },
            ServerMessage::Frame { seq: 3, width: 640, height: 480 },
            ServerMessage::CaptureEvent { crop_id: 2, bounds, crop_hash: "ab".into(), thumbnail: "/9j/4A==".into() },
            ServerMessage::MicOpen,
            ServerMessage::Token { crop_id: 2, text_fragment: " a".into() },
            ServerMessage::Answer {
                crop_id: 2,
                text: "a cat".into(),
                query: "What is in the image?".into(),
                crop_hash: "ab".into(),
                consumed_hash: "ab".into(),
                timing: Timing { inference_s: 0.5, encode_s: 0.1, decode_s: 0.4, tokens: 2, tg_tok_per_s: 5.0 },
            },
            ServerMessage::Busy,
            ServerMessage::Error { msg: "bad slider".into() },
        ] {
            assert_eq!(ServerMessage::parse(&m.to_string()).unwrap(), m);
        }
    }

    #[test]
    fn malformed_records() {
        assert_eq!(ClientMessage::parse(""), Err(ProtocolError::Empty));
        assert!(matches!(ClientMessage::parse("SLIDER which=depth value=1"), Err(ProtocolError::BadValue { .. })));
        assert!(matches!(ClientMessage::parse("SLIDER which=width value=wide"), Err(ProtocolError::BadValue { .. })));
        assert!(matches!(ClientMessage::parse("GAZE u=0.5"), Err(ProtocolError::Missing { .. })));
        assert!(matches!(ClientMessage::parse("JUMP"), Err(ProtocolError::UnknownTag(_))));
        assert!(matches!(ClientMessage::parse("GAZE novalue"), Err(ProtocolError::Pair(_))));
    }
}
