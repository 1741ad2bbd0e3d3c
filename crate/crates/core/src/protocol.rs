//! Messages exchanged between the client and the agents, and channel
//! naming.

use serde::{Deserialize, Serialize};

use crate::bus::Channel;
use crate::task::{Task, TaskState};
use crate::time::Micros;

/// Sent on a pilot's control topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Control {
    /// Simulated agents process everything queued, then report `Idle`.
    Drive { seq: u64 },
    Cancel { uids: Vec<String> },
    CancelAll,
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PilotState {
    Pending,
    Active,
    Done,
    Failed,
}

impl PilotState {
    pub fn is_final(self) -> bool {
        matches!(self, PilotState::Done | PilotState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNotice {
    pub uid: String,
    pub pilot: String,
    pub state: TaskState,
    pub ts: Micros,
    pub exit_code: Option<i32>,
    pub reason: Option<String>,
    pub retries: u32,
}

/// Published on the session notification topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Notice {
    Task(TaskNotice),
    Pilot {
        pilot: String,
        state: PilotState,
        reason: Option<String>,
    },
    Idle {
        pilot: String,
        seq: u64,
    },
}

pub const NOTIFY_CHANNEL: &str = "session.notify";

pub fn task_queue(pilot: &str) -> String {
    format!("{pilot}.tasks")
}

pub fn control_channel(pilot: &str) -> String {
    format!("{pilot}.control")
}

/// Buffers notices and publishes them in bulk.
pub struct Notifier {
    channel: Option<Channel>,
    pilot: String,
    buf: Vec<Notice>,
}

impl Notifier {
    pub fn new(channel: Option<Channel>, pilot: impl Into<String>) -> Self {
        Notifier {
            channel,
            pilot: pilot.into(),
            buf: Vec::new(),
        }
    }

    pub fn pilot(&self) -> &str {
        &self.pilot
    }

    pub fn task(&mut self, task: &Task, ts: Micros) {
        if self.channel.is_none() {
            return;
        }
        self.buf.push(Notice::Task(TaskNotice {
            uid: task.description.uid.clone(),
            pilot: self.pilot.clone(),
            state: task.state,
            ts,
            exit_code: task.exit_code,
            reason: task.reason.clone(),
            retries: task.retries,
        }));
        if self.buf.len() >= 4096 {
            self.flush();
        }
    }

    pub fn push(&mut self, notice: Notice) {
        if self.channel.is_some() {
            self.buf.push(notice);
        }
    }

    pub fn flush(&mut self) {
        if self.buf.is_empty() {
            return;
        }
        if let Some(ch) = &self.channel {
            if let Err(e) = ch.send_msgs(&self.buf) {
                log::debug!("notify: {e}");
            }
        }
        self.buf.clear();
    }
}

impl Drop for Notifier {
    fn drop(&mut self) {
        self.flush();
    }
}
