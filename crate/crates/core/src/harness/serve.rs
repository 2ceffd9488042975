//! Line-delimited JSON front end for a single [`Server`].
//!
//! Each input line is one request, each output line one response:
//!
//! ```text
//! {"op":"handle","t":1000,"message":{"v":1,"from":"phone","to":"server","msg":{...}}}
//! {"op":"expire","t":70000}
//! {"op":"state","em":"alice@example.com"}
//! ```
//!
//! Time only moves forward; a `t` below the last one seen is treated as the
//! last one.

use std::io::{self, BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::messages::{ErrorCode, ProtocolMessage};
use crate::server::{Server, SessionState};
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Handle { t: u64, message: ProtocolMessage },
    Expire { t: u64 },
    State { em: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case", deny_unknown_fields)]
pub enum Response {
    Ok { replies: Vec<ProtocolMessage> },
    Expired { count: usize },
    State { session_state: Option<SessionState> },
    Error { code: ErrorCode, detail: String },
}

pub struct ServeSession {
    server: Server,
    rng: ChaCha20Rng,
    now: SimTime,
}

impl ServeSession {
    pub fn new(server: Server, seed: u64) -> Self {
        Self {
            server,
            rng: ChaCha20Rng::seed_from_u64(seed),
            now: SimTime::ZERO,
        }
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    fn tick(&mut self, t: u64) -> SimTime {
        self.now = self.now.max(SimTime(t));
        self.now
    }

    pub fn request(&mut self, req: Request) -> Response {
        match req {
            Request::Handle { t, message } => {
                if message.to != *self.server.id() {
                    return Response::Error {
                        code: ErrorCode::UnexpectedMessage,
                        detail: format!(
                            "message addressed to {}, this is {}",
                            message.to,
                            self.server.id()
                        ),
                    };
                }
                let now = self.tick(t);
                self.server.expire_sessions(now);
                let replies = self.server.handle(&message, now, &mut self.rng);
                self.server.take_seals();
                self.server.take_events();
                Response::Ok { replies }
            }
            Request::Expire { t } => {
                let now = self.tick(t);
                let count = self.server.expire_sessions(now);
                // Failures show up on the next handled message.
                let _ = self.server.flush();
                Response::Expired { count }
            }
            Request::State { em } => Response::State {
                session_state: self.server.session_state(&em),
            },
        }
    }

    /// Handles one raw line; never panics on bad input.
    pub fn handle_line(&mut self, line: &str) -> String {
        let resp = match serde_json::from_str::<Request>(line) {
            Ok(req) => self.request(req),
            Err(e) => Response::Error {
                code: ErrorCode::MalformedMessage,
                detail: e.to_string(),
            },
        };
        serde_json::to_string(&resp).expect("responses always serialize")
    }
}

/// Answers every non-blank line of `input` on `output` until EOF. Returns
/// the number of requests served.
pub fn serve<R: BufRead, W: Write>(
    session: &mut ServeSession,
    input: R,
    mut output: W,
) -> io::Result<usize> {
    let mut n = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", session.handle_line(&line))?;
        output.flush()?;
        n += 1;
    }
    Ok(n)
}
