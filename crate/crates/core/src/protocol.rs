//! Vision↔robot messages, encoded as one JSON object per line.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotFsmState {
    Idle,
    MovingToPick,
    Grasping,
    MovingToPlace,
    Releasing,
    Homing,
}

impl RobotFsmState {
    pub fn name(self) -> &'static str {
        match self {
            RobotFsmState::Idle => "idle",
            RobotFsmState::MovingToPick => "moving_to_pick",
            RobotFsmState::Grasping => "grasping",
            RobotFsmState::MovingToPlace => "moving_to_place",
            RobotFsmState::Releasing => "releasing",
            RobotFsmState::Homing => "homing",
        }
    }

    /// The pick cycle order, plus abort to `Homing` from anywhere.
    pub fn can_transition(self, to: RobotFsmState) -> bool {
        use RobotFsmState::*;
        matches!(
            (self, to),
            (Idle, MovingToPick)
                | (MovingToPick, Grasping)
                | (Grasping, MovingToPlace)
                | (MovingToPlace, Releasing)
                | (Releasing, Homing)
                | (Homing, Idle)
        ) || (to == Homing && self != Idle && self != Homing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    PickRequest {
        item_id: u64,
        x0_mm: f64,
        y0_mm: f64,
        w_mm: f64,
        h_mm: f64,
        v_mm_s: f64,
        t0_stamp_s: f64,
        t_pick_s: f64,
    },
    Ack {
        item_id: u64,
    },
    Status {
        robot_state: RobotFsmState,
        busy_until_s: f64,
    },
    Reject {
        item_id: u64,
        reason: String,
    },
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::PickRequest { .. } => "pick_request",
            WireMessage::Ack { .. } => "ack",
            WireMessage::Status { .. } => "status",
            WireMessage::Reject { .. } => "reject",
        }
    }
}

/// One JSON line including the trailing newline.
pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let mut out = serde_json::to_vec(msg).expect("wire messages always serialize");
    out.push(b'\n');
    out
}

pub fn decode_message(bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| ProtocolError::MalformedMessage(e.to_string()))?
        .trim_end_matches(['\n', '\r']);
    serde_json::from_str(text).map_err(|e| ProtocolError::MalformedMessage(e.to_string()))
}

/// Ordered, lossless in-process byte channel carrying encoded messages.
#[derive(Debug, Default, Clone)]
pub struct ByteQueue {
    buf: VecDeque<u8>,
}

impl ByteQueue {
    pub fn send(&mut self, msg: &WireMessage) {
        self.buf.extend(encode_message(msg));
    }

    /// Next complete line, if one is buffered.
    pub fn recv(&mut self) -> Option<Result<WireMessage, ProtocolError>> {
        let end = self.buf.iter().position(|&b| b == b'\n')?;
        let line: Vec<u8> = self.buf.drain(..=end).collect();
        Some(decode_message(&line))
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

pub fn write_message<W: Write>(out: &mut W, msg: &WireMessage) -> Result<(), ProtocolError> {
    out.write_all(&encode_message(msg))?;
    out.flush()?;
    Ok(())
}

/// Blocks for the next line; `Closed` at end of stream.
pub fn read_message<R: BufRead>(input: &mut R) -> Result<WireMessage, ProtocolError> {
    let mut line = Vec::new();
    if input.read_until(b'\n', &mut line)? == 0 {
        return Err(ProtocolError::Closed);
    }
    decode_message(&line)
}
