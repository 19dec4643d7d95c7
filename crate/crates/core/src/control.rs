//! Live steering: a session owning one kernel, the JSON command protocol
//! spoken to clients, command logs for replay, and a stdio transport.
//!
//! Every client message is one JSON object per line carrying `type` (the
//! operation) and an optional `id` echoed in the reply:
//!
//! ```text
//! {"type":"load","id":1,"path":"configs/lab7_tcp.cfg","seed":7}
//! {"type":"ok","id":1,"state":"paused"}
//! ```
//!
//! Operations and their arguments:
//!
//! | type            | arguments                                  |
//! |-----------------|--------------------------------------------|
//! | `load`          | `path` or `text`, optional `seed`          |
//! | `run`           |                                            |
//! | `pause`         |                                            |
//! | `resume`        |                                            |
//! | `step`          | optional `count` (default 1)               |
//! | `set_delay`     | `ms`                                       |
//! | `set_stop_time` | `t`                                        |
//! | `set_debug`     | `level` (0-3)                              |
//! | `inject_send`   | `component`, `payload` (UTF-8 text)        |
//! | `fail_link`     | `link`                                     |
//! | `repair_link`   | `link`                                     |
//! | `snapshot`      |                                            |
//!
//! Replies are `{"type":"ok","id":..,...}` or `{"type":"err","id":..,"error":".."}`.
//! The server also pushes, in dispatch order:
//!
//! * `{"type":"hello","proto_version":1,"ops":[..]}` once per connection;
//! * `{"type":"trace","seq":n,"t":..,"level":..,"comp":..,"kind":..,"fields":{..},"line":".."}`
//!   for every record at or below the current debug level, `seq` counting
//!   the pushed records without gaps;
//! * `{"type":"status","filename":..,"stop_time":..,"delay":..,"debug_level":..,"sim_time":..,"run_state":..}`.
//!
//! A command script is a file of the same objects, each with an extra
//! `at_event` field: the number of dispatched events before which it is
//! applied.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Topology;
use crate::kernel::{Injection, Kernel, Message};
use crate::registry::Registry;
use crate::trace::{TraceRecord, MAX_DEBUG_LEVEL};

pub const PROTO_VERSION: u32 = 1;
pub const DEFAULT_STOP_TIME: f64 = 100.0;

pub const OPS: [&str; 12] = [
    "load",
    "run",
    "pause",
    "resume",
    "step",
    "set_delay",
    "set_stop_time",
    "set_debug",
    "inject_send",
    "fail_link",
    "repair_link",
    "snapshot",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Load {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Run,
    Pause,
    Resume,
    Step {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<u64>,
    },
    SetDelay {
        ms: f64,
    },
    SetStopTime {
        t: f64,
    },
    SetDebug {
        level: u8,
    },
    InjectSend {
        component: String,
        payload: String,
    },
    FailLink {
        link: String,
    },
    RepairLink {
        link: String,
    },
    Snapshot,
}

impl Command {
    /// Whether replaying the command can change simulated results.
    /// Run control and pacing only decide when events dispatch.
    pub fn affects_model(&self) -> bool {
        matches!(
            self,
            Command::SetStopTime { .. }
                | Command::SetDebug { .. }
                | Command::InjectSend { .. }
                | Command::FailLink { .. }
                | Command::RepairLink { .. }
        )
    }
}

/// A client message: the command plus its correlation id.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: Value,
    pub command: Command,
}

/// Parses one protocol line. On failure returns the id (if one could be
/// read) and a message for the error reply.
pub fn parse_request(line: &str) -> Result<Request, (Value, String)> {
    let mut v: Value =
        serde_json::from_str(line).map_err(|e| (Value::Null, format!("malformed message: {e}")))?;
    let Some(obj) = v.as_object_mut() else {
        return Err((Value::Null, "message must be a JSON object".into()));
    };
    let id = obj.remove("id").unwrap_or(Value::Null);
    match obj.get("type").and_then(Value::as_str) {
        None => return Err((id, "missing `type`".into())),
        Some(t) if !OPS.contains(&t) => return Err((id, format!("unknown op `{t}`"))),
        Some(_) => {}
    }
    serde_json::from_value(v)
        .map(|command| Request {
            id: id.clone(),
            command,
        })
        .map_err(|e| (id, format!("bad arguments: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Idle,
    Paused,
    Running,
    Finished,
}

impl RunState {
    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Idle => "idle",
            RunState::Paused => "paused",
            RunState::Running => "running",
            RunState::Finished => "finished",
        }
    }
}

/// Mirrors the status bar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusFrame {
    pub filename: String,
    pub stop_time: f64,
    pub delay: f64,
    pub debug_level: u8,
    pub sim_time: f64,
    pub run_state: RunState,
}

/// One entry of a command log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub at_event: u64,
    #[serde(flatten)]
    pub command: Command,
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptEntry>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("script line {}: {e}", i + 1)))
        .collect()
}

pub fn render_script(entries: &[ScriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("script entries serialize"));
        out.push('\n');
    }
    out
}

/// The single owner of a kernel. Commands are applied between dispatches.
pub struct Session {
    registry: Registry,
    kernel: Option<Kernel>,
    topology: Option<Topology>,
    filename: String,
    seed: u64,
    stop_time: f64,
    delay_ms: f64,
    debug: u8,
    state: RunState,
    log: Vec<ScriptEntry>,
}

impl Default for Session {
    fn default() -> Self {
        Session::new(Registry::standard())
    }
}

impl Session {
    pub fn new(registry: Registry) -> Self {
        Session {
            registry,
            kernel: None,
            topology: None,
            filename: String::new(),
            seed: 1,
            stop_time: DEFAULT_STOP_TIME,
            delay_ms: 0.0,
            debug: 1,
            state: RunState::Idle,
            log: Vec::new(),
        }
    }

    /// Instantiates `text` and leaves the session paused at t=0.
    pub fn load_text(&mut self, filename: &str, text: &str, seed: u64) -> Result<(), String> {
        let topo = crate::config::parse(text).map_err(|errs| {
            errs.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("\n")
        })?;
        let mut k = self
            .registry
            .instantiate(&topo, seed)
            .map_err(|e| e.to_string())?;
        k.trace_mut().set_debug_level(self.debug);
        k.set_stop_time(self.stop_time).map_err(|e| e.to_string())?;
        self.kernel = Some(k);
        self.topology = Some(topo);
        self.filename = filename.to_string();
        self.seed = seed;
        self.state = RunState::Paused;
        self.log.clear();
        Ok(())
    }

    pub fn load_path(&mut self, path: &Path, seed: u64) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.load_text(&path.display().to_string(), &text, seed)
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        self.kernel.as_ref()
    }

    pub fn kernel_mut(&mut self) -> Option<&mut Kernel> {
        self.kernel.as_mut()
    }

    pub fn state(&self) -> RunState {
        self.state
    }

    pub fn delay_ms(&self) -> f64 {
        self.delay_ms
    }

    pub fn debug_level(&self) -> u8 {
        self.debug
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Commands applied since the last load, stamped with event offsets.
    pub fn log(&self) -> &[ScriptEntry] {
        &self.log
    }

    pub fn status(&self) -> StatusFrame {
        StatusFrame {
            filename: self.filename.clone(),
            stop_time: self.stop_time,
            delay: self.delay_ms,
            debug_level: self.debug,
            sim_time: self.kernel.as_ref().map_or(0.0, Kernel::now),
            run_state: self.state,
        }
    }

    fn loaded(&mut self) -> Result<&mut Kernel, String> {
        self.kernel.as_mut().ok_or_else(|| "no configuration loaded".to_string())
    }

    fn target(&mut self, name: &str) -> Result<crate::ComponentId, String> {
        self.loaded()?
            .id_of(name)
            .ok_or_else(|| format!("no component named `{name}`"))
    }

    fn link_state(&mut self, link: &str, up: bool) -> Result<Value, String> {
        let id = self.target(link)?;
        let k = self.loaded()?;
        if k.kind(id) != Some("link") {
            return Err(format!("`{link}` is not a link component"));
        }
        k.schedule(id, 0.0, Message::Inject(Injection::LinkState(up)))
            .map_err(|e| e.to_string())?;
        Ok(json!({}))
    }

    /// Applies one command and returns the reply body.
    pub fn apply(&mut self, cmd: Command) -> Result<Value, String> {
        if let Some(k) = &self.kernel {
            if !matches!(cmd, Command::Load { .. }) {
                self.log.push(ScriptEntry {
                    at_event: k.dispatched(),
                    command: cmd.clone(),
                });
            }
        }
        match cmd {
            Command::Load { path, text, seed } => {
                let seed = seed.unwrap_or(self.seed);
                match (path, text) {
                    (Some(p), None) => self.load_path(Path::new(&p), seed)?,
                    (None, Some(t)) => self.load_text("<inline>", &t, seed)?,
                    _ => return Err("load takes exactly one of `path` or `text`".into()),
                }
                Ok(json!({"state": self.state.as_str()}))
            }
            Command::Run | Command::Resume => {
                self.loaded()?;
                if self.state == RunState::Paused {
                    self.state = RunState::Running;
                }
                Ok(json!({"state": self.state.as_str()}))
            }
            Command::Pause => {
                self.loaded()?;
                if self.state == RunState::Running {
                    self.state = RunState::Paused;
                }
                Ok(json!({"state": self.state.as_str()}))
            }
            Command::Step { count } => {
                self.loaded()?;
                let mut n = 0;
                if self.state == RunState::Paused {
                    for _ in 0..count.unwrap_or(1) {
                        if !self.dispatch_one()? {
                            break;
                        }
                        n += 1;
                    }
                }
                Ok(json!({"dispatched": n, "state": self.state.as_str()}))
            }
            Command::SetDelay { ms } => {
                if !(ms.is_finite() && ms >= 0.0) {
                    return Err(format!("invalid delay {ms}"));
                }
                self.delay_ms = ms;
                Ok(json!({}))
            }
            Command::SetStopTime { t } => {
                if let Some(k) = self.kernel.as_mut() {
                    k.set_stop_time(t).map_err(|e| e.to_string())?;
                    if self.state == RunState::Finished && k.peek_time().is_some_and(|x| x <= t) {
                        self.state = RunState::Paused;
                    }
                } else if !(t.is_finite() && t >= 0.0) {
                    return Err(format!("invalid stop time {t}"));
                }
                self.stop_time = t;
                Ok(json!({}))
            }
            Command::SetDebug { level } => {
                if level > MAX_DEBUG_LEVEL {
                    return Err(format!("debug level must be 0-{MAX_DEBUG_LEVEL}"));
                }
                self.debug = level;
                if let Some(k) = self.kernel.as_mut() {
                    k.trace_mut().set_debug_level(level);
                }
                Ok(json!({}))
            }
            Command::InjectSend { component, payload } => {
                let id = self.target(&component)?;
                self.loaded()?
                    .schedule(id, 0.0, Message::Inject(Injection::Send(payload.into_bytes())))
                    .map_err(|e| e.to_string())?;
                Ok(json!({}))
            }
            Command::FailLink { link } => self.link_state(&link, false),
            Command::RepairLink { link } => self.link_state(&link, true),
            Command::Snapshot => self.snapshot(),
        }
    }

    /// Dispatches one event. Returns false once the run is exhausted or
    /// gated by the stop time.
    pub fn dispatch_one(&mut self) -> Result<bool, String> {
        let k = self.loaded()?;
        match k.step() {
            Ok(Some(_)) => Ok(true),
            Ok(None) => {
                self.state = RunState::Finished;
                Ok(false)
            }
            Err(e) => {
                self.state = RunState::Finished;
                Err(e.to_string())
            }
        }
    }

    /// Full model state for rendering from scratch.
    pub fn snapshot(&self) -> Result<Value, String> {
        let k = self.kernel.as_ref().ok_or("no configuration loaded")?;
        let mut comps = BTreeMap::new();
        for id in k.ids() {
            let name = k.name(id).unwrap_or_default().to_string();
            comps.insert(
                name,
                json!({"kind": k.kind(id), "state": k.snapshot_of(id)}),
            );
        }
        Ok(json!({
            "time": k.now(),
            "dispatched": k.dispatched(),
            "trace_len": k.trace().len(),
            "topology": self.topology,
            "components": comps,
            "status": self.status(),
            "log": self.log,
        }))
    }

    /// Runs to the stop time, applying scripted commands at their event
    /// offsets. Run-control entries in the script are ignored.
    pub fn run_script(&mut self, script: &[ScriptEntry]) -> Result<(), String> {
        let mut entries: Vec<&ScriptEntry> = script.iter().collect();
        entries.sort_by_key(|e| e.at_event);
        let mut next = 0;
        loop {
            let done = self.loaded()?.dispatched();
            while next < entries.len() && entries[next].at_event <= done {
                if entries[next].command.affects_model() {
                    self.apply(entries[next].command.clone())?;
                }
                next += 1;
            }
            self.state = RunState::Running;
            if !self.dispatch_one()? {
                if next < entries.len() {
                    // a later command may extend the stop time
                    let e = entries[next];
                    if e.command.affects_model() {
                        self.apply(e.command.clone())?;
                    }
                    next += 1;
                    continue;
                }
                return Ok(());
            }
        }
    }
}

/// Replays a recorded (config, seed, script) triple and returns the kernel.
pub fn replay(config: &str, seed: u64, stop_time: f64, script: &[ScriptEntry]) -> Result<Kernel, String> {
    let mut s = Session::default();
    s.apply(Command::SetDebug { level: MAX_DEBUG_LEVEL })?;
    s.apply(Command::SetStopTime { t: stop_time })?;
    s.load_text("<replay>", config, seed)?;
    s.run_script(script)?;
    s.kernel.take().ok_or_else(|| "replay produced no kernel".to_string())
}

fn trace_message(seq: u64, r: &TraceRecord) -> Value {
    let fields: serde_json::Map<String, Value> = r
        .fields
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    json!({
        "type": "trace",
        "seq": seq,
        "t": r.t,
        "level": r.level,
        "comp": r.comp,
        "kind": r.kind,
        "fields": fields,
        "line": r.to_string(),
    })
}

/// Transport-independent protocol endpoint around a [`Session`].
pub struct Server {
    session: Session,
    cursor: usize,
    pushed: u64,
    /// Events dispatched per `pump` when no delay is set.
    pub batch: usize,
}

impl Default for Server {
    fn default() -> Self {
        Server::new(Session::default())
    }
}

impl Server {
    pub fn new(session: Session) -> Self {
        Server {
            session,
            cursor: 0,
            pushed: 0,
            batch: 512,
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut Session {
        &mut self.session
    }

    pub fn hello(&self) -> String {
        json!({"type": "hello", "proto_version": PROTO_VERSION, "ops": OPS}).to_string()
    }

    pub fn status_message(&self) -> String {
        let mut v = serde_json::to_value(self.session.status()).expect("status serializes");
        v["type"] = json!("status");
        v.to_string()
    }

    pub fn is_running(&self) -> bool {
        self.session.state() == RunState::Running
    }

    /// Trace records produced since the last drain, at the current level.
    fn drain_trace(&mut self, out: &mut Vec<String>) {
        let level = self.session.debug_level();
        let Some(k) = self.session.kernel() else {
            return;
        };
        let recs = &k.trace().records()[self.cursor.min(k.trace().len())..];
        let mut msgs = Vec::new();
        for r in recs.iter().filter(|r| r.level <= level) {
            msgs.push(trace_message(self.pushed, r).to_string());
            self.pushed += 1;
        }
        self.cursor = k.trace().len();
        out.extend(msgs);
    }

    /// Handles one client line. The reply comes first, then pushes.
    pub fn handle_line(&mut self, line: &str) -> Vec<String> {
        let mut out = Vec::new();
        match parse_request(line) {
            Err((id, error)) => {
                out.push(json!({"type": "err", "id": id, "error": error}).to_string());
            }
            Ok(Request { id, command }) => {
                let is_load = matches!(command, Command::Load { .. });
                let result = self.session.apply(command);
                if is_load && result.is_ok() {
                    self.cursor = 0;
                }
                match result {
                    Ok(body) => {
                        let mut v = json!({"type": "ok", "id": id});
                        if let Value::Object(m) = body {
                            for (k, x) in m {
                                v[k] = x;
                            }
                        }
                        out.push(v.to_string());
                    }
                    Err(error) => {
                        out.push(json!({"type": "err", "id": id, "error": error}).to_string());
                    }
                }
                self.drain_trace(&mut out);
                out.push(self.status_message());
            }
        }
        out
    }

    /// Advances a running session by one event when paced, or by a batch
    /// otherwise, and returns the resulting pushes.
    pub fn pump(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.is_running() {
            return out;
        }
        let n = if self.session.delay_ms() > 0.0 { 1 } else { self.batch };
        for _ in 0..n {
            match self.session.dispatch_one() {
                Ok(true) => {}
                Ok(false) => break,
                Err(e) => {
                    out.push(json!({"type": "err", "id": Value::Null, "error": e}).to_string());
                    break;
                }
            }
        }
        self.drain_trace(&mut out);
        out.push(self.status_message());
        out
    }

    /// Wall-clock pause between paced dispatches.
    pub fn pacing(&self) -> Option<Duration> {
        let ms = self.session.delay_ms();
        (ms > 0.0).then(|| Duration::from_secs_f64(ms / 1000.0))
    }
}

/// Serves the protocol over a line reader and writer until input ends.
/// Input is read on a helper thread so a running session keeps advancing
/// between client lines; once input closes, a running session is run to
/// completion before returning.
pub fn serve_stdio<R, W>(input: R, mut output: W, mut server: Server) -> std::io::Result<Server>
where
    R: BufRead + Send + 'static,
    W: Write,
{
    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in input.lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    writeln!(output, "{}", server.hello())?;
    let mut open = true;
    loop {
        let next = if server.is_running() || !open {
            match rx.try_recv() {
                Ok(l) => Some(l),
                Err(mpsc::TryRecvError::Empty) => None,
                Err(mpsc::TryRecvError::Disconnected) => {
                    open = false;
                    None
                }
            }
        } else {
            match rx.recv() {
                Ok(l) => Some(l),
                Err(_) => {
                    open = false;
                    None
                }
            }
        };
        if let Some(line) = next {
            if line.trim().is_empty() {
                continue;
            }
            for m in server.handle_line(&line) {
                writeln!(output, "{m}")?;
            }
            output.flush()?;
            continue;
        }
        if server.is_running() {
            for m in server.pump() {
                writeln!(output, "{m}")?;
            }
            output.flush()?;
            if let Some(d) = server.pacing() {
                std::thread::sleep(d);
            }
        } else if !open {
            return Ok(server);
        }
    }
}
