//! In-process message log with per-kind byte tallies.

use std::collections::VecDeque;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Client(u32),
    Server,
    /// Every client.
    AllClients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    KeyShare,
    Upload,
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: MessageKind,
    pub from: Endpoint,
    pub to: Endpoint,
    pub round: u32,
    pub bytes: Vec<u8>,
}

/// Metadata kept after delivery; payloads are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub kind: MessageKind,
    pub from: Endpoint,
    pub to: Endpoint,
    pub round: u32,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ByteTally {
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Default)]
pub struct Transport {
    queue: VecDeque<Envelope>,
    log: Vec<LogEntry>,
    key_share: ByteTally,
    upload: ByteTally,
    broadcast: ByteTally,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, envelope: Envelope) {
        let tally = match envelope.kind {
            MessageKind::KeyShare => &mut self.key_share,
            MessageKind::Upload => &mut self.upload,
            MessageKind::Broadcast => &mut self.broadcast,
        };
        tally.messages += 1;
        tally.bytes += envelope.bytes.len() as u64;
        self.log.push(LogEntry {
            kind: envelope.kind,
            from: envelope.from,
            to: envelope.to,
            round: envelope.round,
            len: envelope.bytes.len(),
        });
        self.queue.push_back(envelope);
    }

    /// Removes and returns, in send order, every queued message addressed
    /// to `to`.
    pub fn receive(&mut self, to: Endpoint) -> Vec<Envelope> {
        let (mine, rest): (VecDeque<_>, VecDeque<_>) =
            self.queue.drain(..).partition(|e| e.to == to);
        self.queue = rest;
        mine.into()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn tally(&self, kind: MessageKind) -> ByteTally {
        match kind {
            MessageKind::KeyShare => self.key_share,
            MessageKind::Upload => self.upload,
            MessageKind::Broadcast => self.broadcast,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tallies_and_routing() {
        let mut t = Transport::new();
        for (kind, to, len) in [
            (MessageKind::Upload, Endpoint::Server, 10),
            (MessageKind::KeyShare, Endpoint::Client(1), 4),
            (MessageKind::Upload, Endpoint::Server, 10),
        ] {
            t.send(Envelope {
                kind,
                from: Endpoint::Client(0),
                to,
                round: 0,
                bytes: vec![0; len],
            });
        }
        assert_eq!(
            t.tally(MessageKind::Upload),
            ByteTally {
                messages: 2,
                bytes: 20
            }
        );
        assert_eq!(t.tally(MessageKind::KeyShare).bytes, 4);
        assert_eq!(t.receive(Endpoint::Server).len(), 2);
        assert_eq!(t.pending(), 1);
        assert_eq!(t.receive(Endpoint::Client(1)).len(), 1);
        assert_eq!(t.log().len(), 3);
    }
}
