//! `netlab`: batch runner and live control server.

use std::io::{self, BufReader};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc as std_mpsc;

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use futures_util::{SinkExt, StreamExt};
use netlab_core::control::{render_script, serve_stdio, Server};
use netlab_core::harness::{self, RunConfig};
use serde_json::json;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc};
use tokio_tungstenite::tungstenite::Message as WsMessage;

#[derive(Parser, Debug)]
#[command(name = "netlab", version, about = "Discrete-event network simulator")]
struct Args {
    /// Topology configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Simulated stop time in seconds.
    #[arg(long, default_value_t = 100.0)]
    stop: f64,
    /// Trace verbosity, 0 to 3.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=3))]
    debug: u8,
    /// Wall-clock milliseconds between events.
    #[arg(long, default_value_t = 0.0)]
    delay: f64,
    /// Output directory for batch runs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Command script applied at event offsets during a batch run.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Serve the control protocol over WebSocket on this port.
    #[arg(long, conflicts_with = "stdio")]
    serve: Option<u16>,
    /// Serve the control protocol on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// With --stdio, write the session's command log here on exit.
    #[arg(long, requires = "stdio")]
    record: Option<PathBuf>,
}

fn preloaded(args: &Args) -> Result<Server> {
    let mut server = Server::default();
    let setup = [
        json!({"type": "set_debug", "level": args.debug}),
        json!({"type": "set_stop_time", "t": args.stop}),
        json!({"type": "set_delay", "ms": args.delay}),
    ];
    for cmd in setup {
        server.handle_line(&cmd.to_string());
    }
    if let Some(cfg) = &args.config {
        let cmd = json!({"type": "load", "path": cfg, "seed": args.seed});
        let out = server.handle_line(&cmd.to_string());
        if !out[0].contains("\"ok\"") {
            return Err(anyhow!("{}", out[0]));
        }
    }
    Ok(server)
}

struct Inbound {
    line: String,
    reply: mpsc::UnboundedSender<String>,
}

/// Owns the session; the only place the kernel is touched.
fn session_owner(mut server: Server, rx: std_mpsc::Receiver<Inbound>, push: broadcast::Sender<String>) {
    loop {
        let msg = if server.is_running() {
            match rx.try_recv() {
                Ok(m) => Some(m),
                Err(std_mpsc::TryRecvError::Empty) => None,
                Err(std_mpsc::TryRecvError::Disconnected) => return,
            }
        } else {
            match rx.recv() {
                Ok(m) => Some(m),
                Err(_) => return,
            }
        };
        if let Some(Inbound { line, reply }) = msg {
            let mut out = server.handle_line(&line).into_iter();
            if let Some(first) = out.next() {
                let _ = reply.send(first);
            }
            for m in out {
                let _ = push.send(m);
            }
            continue;
        }
        for m in server.pump() {
            let _ = push.send(m);
        }
        if let Some(d) = server.pacing() {
            std::thread::sleep(d);
        }
    }
}

async fn client(
    stream: TcpStream,
    hello: String,
    to_owner: std_mpsc::Sender<Inbound>,
    mut pushes: broadcast::Receiver<String>,
) -> Result<()> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut sink, mut source) = ws.split();
    sink.send(WsMessage::text(hello)).await?;
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel::<String>();
    loop {
        tokio::select! {
            incoming = source.next() => {
                let Some(incoming) = incoming else { break };
                match incoming? {
                    WsMessage::Text(text) => {
                        for line in text.lines().filter(|l| !l.trim().is_empty()) {
                            to_owner
                                .send(Inbound { line: line.to_string(), reply: reply_tx.clone() })
                                .map_err(|_| anyhow!("session ended"))?;
                        }
                    }
                    WsMessage::Close(_) => break,
                    _ => {}
                }
            }
            Some(reply) = reply_rx.recv() => {
                sink.send(WsMessage::text(reply)).await?;
            }
            pushed = pushes.recv() => match pushed {
                Ok(m) => sink.send(WsMessage::text(m)).await?,
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    let note = json!({"type": "lagged", "missed": n}).to_string();
                    sink.send(WsMessage::text(note)).await?;
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
        }
    }
    Ok(())
}

async fn serve_ws(port: u16, args: Args) -> Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = TcpListener::bind(addr).await.with_context(|| format!("bind {addr}"))?;
    let (push_tx, _) = broadcast::channel::<String>(1 << 16);
    let (in_tx, in_rx) = std_mpsc::channel::<Inbound>();
    let (ready_tx, ready_rx) = std_mpsc::channel::<Result<String>>();
    let owner_push = push_tx.clone();
    // components are not Send, so the session is built on its owner thread
    std::thread::spawn(move || match preloaded(&args) {
        Ok(server) => {
            let _ = ready_tx.send(Ok(server.hello()));
            session_owner(server, in_rx, owner_push);
        }
        Err(e) => {
            let _ = ready_tx.send(Err(e));
        }
    });
    let hello = ready_rx.recv().map_err(|_| anyhow!("session thread died"))??;
    eprintln!("listening on ws://{}", listener.local_addr()?);
    loop {
        let (stream, peer) = listener.accept().await?;
        let hello = hello.clone();
        let to_owner = in_tx.clone();
        let pushes = push_tx.subscribe();
        tokio::spawn(async move {
            if let Err(e) = client(stream, hello, to_owner, pushes).await {
                eprintln!("client {peer}: {e}");
            }
        });
    }
}

fn main() -> Result<()> {
    let args = Args::parse();
    if args.stdio {
        let server = preloaded(&args)?;
        let input = BufReader::new(io::stdin());
        let server = serve_stdio(input, io::stdout().lock(), server)?;
        if let Some(path) = &args.record {
            std::fs::write(path, render_script(server.session().log()))
                .with_context(|| format!("write {}", path.display()))?;
        }
        return Ok(());
    }
    if let Some(port) = args.serve {
        let rt = tokio::runtime::Runtime::new()?;
        return rt.block_on(serve_ws(port, args));
    }
    let config = args
        .config
        .clone()
        .ok_or_else(|| anyhow!("--config is required for a batch run"))?;
    let rc = RunConfig {
        config,
        seed: args.seed,
        stop: args.stop,
        debug: args.debug,
        delay_ms: args.delay,
        out: args.out.clone(),
        script: args.script.clone(),
    };
    let started = std::time::Instant::now();
    let report = harness::run(&rc).map_err(|e| anyhow!(e))?;
    eprintln!(
        "{} events, sim time {:.6} s, {} records, wall {:.3} s -> {}",
        report.events,
        report.sim_time,
        report.records,
        started.elapsed().as_secs_f64(),
        rc.out.display()
    );
    Ok(())
}
