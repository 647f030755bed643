//! Frames: a 4-byte big-endian length followed by one UTF-8 JSON message.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{JobSummary, TaskResult, TaskSpec};
use crate::error::{Error, Result};

pub const MAX_FRAME_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register {
        worker_id: Uuid,
        address: String,
        slots: u32,
    },
    Heartbeat {
        worker_id: Uuid,
    },
    Assign {
        task: TaskSpec,
    },
    Result {
        result: TaskResult,
    },
    Shutdown,
    Submit {
        tasks: Vec<TaskSpec>,
    },
    Submitted {
        job_id: Uuid,
    },
    Status {
        job_id: Uuid,
        #[serde(default)]
        wait: bool,
    },
    Job {
        summary: JobSummary,
    },
    Error {
        kind: WireErrorKind,
        message: String,
    },
}

/// Error class carried over the wire so clients can rebuild a typed error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireErrorKind {
    NotFound,
    Conflict,
    Validation,
    Other,
}

impl Message {
    pub fn from_error(e: &Error) -> Message {
        let kind = match e {
            Error::NotFound(_) => WireErrorKind::NotFound,
            Error::Conflict(_) => WireErrorKind::Conflict,
            Error::Validation(_) => WireErrorKind::Validation,
            _ => WireErrorKind::Other,
        };
        let message = match e {
            Error::NotFound(m) | Error::Conflict(m) | Error::Validation(m) => m.clone(),
            other => other.to_string(),
        };
        Message::Error { kind, message }
    }

    pub fn into_error(kind: WireErrorKind, message: String) -> Error {
        match kind {
            WireErrorKind::NotFound => Error::NotFound(message),
            WireErrorKind::Conflict => Error::Conflict(message),
            WireErrorKind::Validation => Error::Validation(message),
            WireErrorKind::Other => Error::Protocol(message),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {} bytes exceeds limit", body.len())));
    }
    let mut buf = Vec::with_capacity(body.len() + 4);
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(&body);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `None` on a clean end of stream before any header byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Protocol("stream ended inside a frame".into()),
        _ => e.into(),
    })?;
    serde_json::from_slice(&body).map_err(|e| Error::Protocol(format!("bad message: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::TaskKind;

    #[test]
    fn frames_round_trip() {
        let msgs = vec![
            Message::Register {
                worker_id: Uuid::nil(),
                address: "h:1".into(),
                slots: 2,
            },
            Message::Assign {
                task: TaskSpec::new(TaskKind::Process, vec!["k".into()]),
            },
            Message::Shutdown,
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_frame(&mut buf, m).unwrap();
        }
        let first = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(buf[4], b'{');
        assert_eq!(buf[4 + first - 1], b'}');
        let mut r = &buf[..];
        for m in &msgs {
            assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(m));
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn wire_names_are_upper_case() {
        let json = serde_json::to_string(&Message::Heartbeat { worker_id: Uuid::nil() }).unwrap();
        assert!(json.contains(r#""type":"HEARTBEAT""#), "{json}");
    }

    #[test]
    fn oversized_and_truncated_frames_are_rejected() {
        let mut r: &[u8] = &[0xff, 0xff, 0xff, 0xff];
        assert!(matches!(read_frame(&mut r), Err(Error::Protocol(_))));
        let mut r: &[u8] = &[0, 0, 0, 9, b'{'];
        assert!(matches!(read_frame(&mut r), Err(Error::Protocol(_))));
        let mut r: &[u8] = &[0, 0];
        assert!(read_frame(&mut r).is_err());
    }
}
