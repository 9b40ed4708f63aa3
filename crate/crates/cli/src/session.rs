//! `run`: one party of a two-party inference over TCP.

use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use privinfer::field::FieldParams;
use privinfer::nn::{argmax, load_model, load_tensor};
use privinfer::protocol::{connect, load_dealer_file, offline_phase, serve, TrustedDealer};
use privinfer::transport::{Channel, Frame, FramedChannel, Phase, Transcript, TransportError};

use crate::{CliError, Role, RunArgs};

/// Exit status used when `--fail-after` kills the process.
pub const INJECTED_FAILURE_EXIT: i32 = 101;

/// Terminates the process after `limit` online frames have been sent.
struct FailAfter<C> {
    inner: C,
    limit: usize,
    sent: usize,
    online: bool,
}

impl<C: Channel> Channel for FailAfter<C> {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        if self.online {
            if self.sent == self.limit {
                std::process::exit(INJECTED_FAILURE_EXIT);
            }
            self.sent += 1;
        }
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        self.inner.recv()
    }

    fn transcript(&self) -> &Transcript {
        self.inner.transcript()
    }

    fn set_phase(&mut self, phase: Phase) {
        self.online = phase == Phase::Online;
        self.inner.set_phase(phase);
    }
}

fn resolve(host: &str, port: u16) -> Result<SocketAddr, CliError> {
    (host, port)
        .to_socket_addrs()
        .map_err(|e| CliError::Usage(format!("{host}:{port}: {e}")))?
        .next()
        .ok_or_else(|| CliError::Usage(format!("{host}:{port}: no address")))
}

fn transport(e: impl std::fmt::Display) -> CliError {
    CliError::Abort(e.to_string())
}

pub fn run_party(
    a: &RunArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    match a.role {
        Role::Server => run_server_role(a, stdout, stderr),
        Role::Client => run_client_role(a, stdout),
    }
}

fn run_server_role(
    a: &RunArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let path = a
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage("--model is required for the server".into()))?;
    let model = load_model(path)?;
    let cfg = a.session.config(model.params);
    cfg.check_model(&model)?;
    let (client_mat, server_mat) = match &a.dealer_file {
        Some(f) => {
            let m = load_dealer_file(f, &cfg, &model)?;
            std::fs::remove_file(f)
                .map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?;
            m
        }
        None => offline_phase(&model, &cfg, &mut TrustedDealer::new(cfg.dealer_seed))?,
    };

    let addr = resolve(&a.host, a.port)?;
    let listener =
        TcpListener::bind(addr).map_err(|e| CliError::Usage(format!("bind {addr}: {e}")))?;
    writeln!(stdout, "listening {}", listener.local_addr()?)?;
    stdout.flush()?;
    let (stream, peer) = listener.accept().map_err(transport)?;
    writeln!(stderr, "accepted {peer}")?;
    let ch = FramedChannel::tcp(stream).map_err(transport)?;

    let transcript = match a.fail_after {
        Some(limit) => {
            let mut ch = FailAfter {
                inner: ch,
                limit,
                sent: 0,
                online: false,
            };
            serve(&mut ch, &model, &cfg, &client_mat, server_mat)?;
            ch.transcript().clone()
        }
        None => {
            let mut ch = ch;
            serve(&mut ch, &model, &cfg, &client_mat, server_mat)?;
            ch.transcript().clone()
        }
    };
    writeln!(
        stdout,
        "online_bytes: {}",
        transcript.total_bytes(Phase::Online)
    )?;
    writeln!(
        stdout,
        "offline_bytes: {}",
        transcript.total_bytes(Phase::Offline)
    )?;
    Ok(())
}

fn connect_with_retry(addr: SocketAddr, timeout: Duration) -> Result<TcpStream, CliError> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(1)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(CliError::Abort(format!("connect {addr}: {e}")));
            }
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn run_client_role(a: &RunArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let path = a
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("--input is required for the client".into()))?;
    let params = FieldParams::new(a.prime)?;
    let cfg = a.session.config(params);
    cfg.validate()?;
    let input = load_tensor(path)?
        .into_iter()
        .map(|v| params.encode(v))
        .collect::<Result<Vec<_>, _>>()?;

    let start = Instant::now();
    let stream = connect_with_retry(
        resolve(&a.host, a.port)?,
        Duration::from_secs(a.connect_timeout),
    )?;
    let mut ch = FramedChannel::tcp(stream).map_err(transport)?;
    let (logits, summary) = connect(&mut ch, &cfg, &input)?;
    let wall = start.elapsed();

    let logits: Vec<i64> = logits.iter().map(|&v| params.decode(v)).collect();
    let t = ch.transcript();
    let joined: Vec<String> = logits.iter().map(i64::to_string).collect();
    writeln!(stdout, "logits: {}", joined.join(","))?;
    writeln!(stdout, "argmax: {}", argmax(&logits))?;
    writeln!(stdout, "online_bytes: {}", t.total_bytes(Phase::Online))?;
    writeln!(stdout, "online_rounds: {}", t.rounds(Phase::Online))?;
    writeln!(stdout, "offline_bytes: {}", t.total_bytes(Phase::Offline))?;
    writeln!(
        stdout,
        "online_time_ms: {:.3}",
        summary.online_time.as_secs_f64() * 1e3
    )?;
    writeln!(stdout, "wall_time_ms: {:.3}", wall.as_secs_f64() * 1e3)?;
    Ok(())
}
