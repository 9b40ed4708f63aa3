//! Online phase and session drivers.
//!
//! Message order for one inference:
//!
//! ```text
//! C -> S  ConfigHash          S -> C  ConfigHash (or Abort)
//! S -> C  OfflineMaterial*    (client material, offline phase)
//! C -> S  LinearMasked        input minus its mask
//! per ReLU layer:
//!   S -> C  GcLabels*         garbled circuits plus server input labels
//!   C -> S  GcOutputLabels
//!   sign variants only:
//!   C -> S  BeaverOpen        client halves of d, e
//!   S -> C  BeaverOpen        server halves
//!   C -> S  LinearMasked      client product share minus the next mask
//! S -> C  Logits              server share of the output
//! ```

use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::material::{ClientMaterial, ServerMaterial, ServerReluLayer};
use super::{
    offline_phase, truncate_server, ClientReluLayer, ProtocolError, SessionConfig, TrustedDealer,
};
use crate::circuit::{from_bits, synth, to_bits, BooleanCircuit, ReluVariant};
use crate::field::{FieldElement, FieldParams};
use crate::garble::{eval, GarbledCircuit, Label, LABEL_BYTES};
use crate::nn::{Layer, Model, Tensor};
use crate::sharing::{beaver_combine, beaver_open, Party};
use crate::transport::{
    deserialize_elements, loopback, serialize_elements, Channel, Frame, FrameType, Phase,
    Transcript,
};

/// Soft cap on one GcLabels or OfflineMaterial frame.
const CHUNK_BYTES: usize = 8 << 20;

fn send_elems<C: Channel + ?Sized>(
    ch: &mut C,
    kind: FrameType,
    xs: &[FieldElement],
) -> Result<(), ProtocolError> {
    Ok(ch.send(Frame::new(kind, serialize_elements(xs)))?)
}

fn recv_elems<C: Channel + ?Sized>(
    ch: &mut C,
    kind: FrameType,
    n: usize,
    layer: usize,
    params: &FieldParams,
) -> Result<Vec<FieldElement>, ProtocolError> {
    let v = deserialize_elements(&ch.recv_expect(kind)?, params)?;
    if v.len() != n {
        return Err(ProtocolError::Desync {
            layer,
            msg: format!("{kind:?} carried {} elements, expected {n}", v.len()),
        });
    }
    Ok(v)
}

pub fn handshake_client<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &SessionConfig,
) -> Result<(), ProtocolError> {
    let mine = cfg.hash();
    ch.send(Frame::new(FrameType::ConfigHash, mine.to_vec()))?;
    if ch.recv_expect(FrameType::ConfigHash)? != mine {
        ch.abort("config hash mismatch");
        return Err(ProtocolError::ConfigMismatch);
    }
    Ok(())
}

pub fn handshake_server<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &SessionConfig,
) -> Result<(), ProtocolError> {
    let mine = cfg.hash();
    if ch.recv_expect(FrameType::ConfigHash)? != mine {
        ch.abort("config hash mismatch");
        return Err(ProtocolError::ConfigMismatch);
    }
    ch.send(Frame::new(FrameType::ConfigHash, mine.to_vec()))?;
    Ok(())
}

/// Ships the client's material; the first frame starts with the total length.
pub fn send_client_material<C: Channel + ?Sized>(
    ch: &mut C,
    m: &ClientMaterial,
) -> Result<(), ProtocolError> {
    let bytes = m.to_bytes();
    let mut first = (bytes.len() as u64).to_le_bytes().to_vec();
    let head = bytes.len().min(CHUNK_BYTES);
    first.extend_from_slice(&bytes[..head]);
    ch.send(Frame::new(FrameType::OfflineMaterial, first))?;
    for chunk in bytes[head..].chunks(CHUNK_BYTES) {
        ch.send(Frame::new(FrameType::OfflineMaterial, chunk.to_vec()))?;
    }
    Ok(())
}

pub fn recv_client_material<C: Channel + ?Sized>(
    ch: &mut C,
    params: &FieldParams,
) -> Result<ClientMaterial, ProtocolError> {
    let first = ch.recv_expect(FrameType::OfflineMaterial)?;
    if first.len() < 8 {
        return Err(ProtocolError::Material("short header".into()));
    }
    let total = u64::from_le_bytes(first[..8].try_into().unwrap()) as usize;
    let mut bytes = first[8..].to_vec();
    while bytes.len() < total {
        bytes.extend(ch.recv_expect(FrameType::OfflineMaterial)?);
    }
    if bytes.len() != total {
        return Err(ProtocolError::Material(format!(
            "expected {total} bytes, got {}",
            bytes.len()
        )));
    }
    ClientMaterial::from_bytes(&bytes, params)
}

/// Server side of the online phase. Consumes the material.
pub fn run_server<C: Channel + ?Sized>(
    ch: &mut C,
    model: &Model,
    cfg: &SessionConfig,
    material: ServerMaterial,
) -> Result<(), ProtocolError> {
    cfg.check_model(model)?;
    material.check_fresh()?;
    if material.linear_masks.len() != model.layers.len() {
        return Err(ProtocolError::Material(
            "material was made for a different model".into(),
        ));
    }
    ch.set_phase(Phase::Online);
    let params = cfg.params;
    let circuit = synth(&cfg.circuit_spec(), &params)?;
    let shapes = model.shapes();
    let mut srv = recv_elems(ch, FrameType::LinearMasked, model.input_len(), 0, &params)?;
    let mut relus = material.relus.into_iter();
    for (i, (layer, mask)) in model.layers.iter().zip(material.linear_masks).enumerate() {
        match (layer, mask) {
            (Layer::Relu, None) => {
                let unit = relus
                    .next()
                    .filter(|u| u.layer == i && u.garblings.len() == srv.len());
                let unit = unit.ok_or_else(|| ProtocolError::Desync {
                    layer: i,
                    msg: "no matching ReLU material".into(),
                })?;
                srv = server_relu(ch, cfg, &circuit, i, srv, unit)?;
            }
            (_, Some(s)) if !matches!(layer, Layer::Relu) => {
                let mut y = layer.apply_linear(&srv, &shapes[i], &params);
                if y.len() != s.len() {
                    return Err(ProtocolError::Desync {
                        layer: i,
                        msg: "linear mask length".into(),
                    });
                }
                for (v, m) in y.iter_mut().zip(&s) {
                    *v = params.add(*v, *m);
                }
                layer.add_bias(&mut y, &shapes[i + 1], &params);
                let f = layer.rescale_bits();
                srv = y
                    .into_iter()
                    .map(|v| truncate_server(v, f, &params))
                    .collect();
            }
            _ => {
                return Err(ProtocolError::Desync {
                    layer: i,
                    msg: "material layer kinds do not match the model".into(),
                })
            }
        }
    }
    send_elems(ch, FrameType::Logits, &srv)
}

fn server_relu<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &SessionConfig,
    circuit: &BooleanCircuit,
    layer: usize,
    x_s: Vec<FieldElement>,
    unit: ServerReluLayer,
) -> Result<Vec<FieldElement>, ProtocolError> {
    let params = cfg.params;
    let n = x_s.len();
    let k = cfg.k();
    let bundle = circuit.bundle("server_share_bits").expect("garbler bundle");
    let width = bundle.width();
    let per_unit = unit.garblings.first().map_or(1, |g| {
        g.circuit.strip_decode().serialized_len() + width * LABEL_BYTES
    });
    let per_frame = (CHUNK_BYTES / per_unit).max(1);
    for start in (0..n).step_by(per_frame) {
        let end = (start + per_frame).min(n);
        let parts: Vec<Vec<u8>> = (start..end)
            .into_par_iter()
            .map(|u| {
                let g = &unit.garblings[u];
                let mut out = g.circuit.strip_decode().to_bytes();
                let labels = g
                    .encoder
                    .encode_bundle(bundle, &to_bits(x_s[u].value() >> k, width))
                    .expect("bundle width");
                for l in labels {
                    out.extend_from_slice(&l.to_bytes());
                }
                out
            })
            .collect();
        let mut payload = ((end - start) as u32).to_le_bytes().to_vec();
        payload.extend(parts.concat());
        ch.send(Frame::new(FrameType::GcLabels, payload))?;
    }
    let n_out = circuit.outputs().len();
    let out = ch.recv_expect(FrameType::GcOutputLabels)?;
    if out.len() != n * n_out * LABEL_BYTES {
        return Err(ProtocolError::Desync {
            layer,
            msg: format!("{} output label bytes for {n} units", out.len()),
        });
    }
    let decoded: Vec<FieldElement> = out
        .par_chunks(n_out * LABEL_BYTES)
        .zip(&unit.garblings)
        .enumerate()
        .map(|(u, (bytes, g))| {
            let labels: Vec<Label> = bytes
                .chunks_exact(LABEL_BYTES)
                .map(|b| Label::from_bytes(b.try_into().unwrap()))
                .collect();
            let bits = g
                .decoder
                .decode(&labels)
                .map_err(|source| ProtocolError::Garble {
                    layer,
                    unit: u,
                    source,
                })?;
            params
                .element(from_bits(&bits))
                .map_err(|_| ProtocolError::Desync {
                    layer,
                    msg: format!("unit {u} decoded outside the field"),
                })
        })
        .collect::<Result<_, _>>()?;
    if cfg.variant == ReluVariant::ReluFull {
        return Ok(decoded);
    }
    let triples = unit.triples.ok_or_else(|| ProtocolError::Desync {
        layer,
        msg: "missing Beaver triples".into(),
    })?;
    let theirs = recv_elems(ch, FrameType::BeaverOpen, 2 * n, layer, &params)?;
    let mine: Vec<FieldElement> = (0..n)
        .flat_map(|u| {
            let (d, e) = beaver_open(x_s[u], decoded[u], &triples[u], &params);
            [d, e]
        })
        .collect();
    send_elems(ch, FrameType::BeaverOpen, &mine)?;
    let masked = recv_elems(ch, FrameType::LinearMasked, n, layer, &params)?;
    Ok((0..n)
        .map(|u| {
            let d = params.add(mine[2 * u], theirs[2 * u]);
            let e = params.add(mine[2 * u + 1], theirs[2 * u + 1]);
            params.add(
                beaver_combine(Party::Server, d, e, &triples[u], &params),
                masked[u],
            )
        })
        .collect())
}

/// Client side of the online phase. Returns the logits.
pub fn run_client<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &SessionConfig,
    input: &[FieldElement],
    material: ClientMaterial,
) -> Result<Vec<FieldElement>, ProtocolError> {
    cfg.validate()?;
    material.validate()?;
    if input.len() != material.plan.input_len {
        return Err(ProtocolError::Config(format!(
            "input has {} values, the model expects {}",
            input.len(),
            material.plan.input_len
        )));
    }
    ch.set_phase(Phase::Online);
    let params = cfg.params;
    let circuit = synth(&cfg.circuit_spec(), &params)?;
    let masked: Vec<FieldElement> = input
        .iter()
        .zip(&material.r_in)
        .map(|(&y, &r)| params.sub(y, r))
        .collect();
    send_elems(ch, FrameType::LinearMasked, &masked)?;
    for layer in material.relus {
        client_relu(ch, cfg, &circuit, layer)?;
    }
    let srv = recv_elems(
        ch,
        FrameType::Logits,
        material.out_share.len(),
        usize::MAX,
        &params,
    )?;
    Ok(srv
        .iter()
        .zip(&material.out_share)
        .map(|(&s, &c)| params.add(s, c))
        .collect())
}

fn client_relu<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &SessionConfig,
    circuit: &BooleanCircuit,
    m: ClientReluLayer,
) -> Result<(), ProtocolError> {
    let params = cfg.params;
    let layer = m.layer;
    let n = m.x_share.len();
    let desync = |msg: String| ProtocolError::Desync { layer, msg };
    let server_bundle = circuit.bundle("server_share_bits").expect("garbler bundle");
    let width = server_bundle.width();
    let mut units: Vec<(GarbledCircuit, Vec<Label>)> = Vec::with_capacity(n);
    while units.len() < n {
        let payload = ch.recv_expect(FrameType::GcLabels)?;
        if payload.len() < 4 {
            return Err(desync("short GcLabels frame".into()));
        }
        let count = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
        if count == 0 || units.len() + count > n {
            return Err(desync(format!("GcLabels frame with {count} units")));
        }
        let mut off = 4;
        for _ in 0..count {
            let (gc, used) = GarbledCircuit::from_bytes(&payload[off..]).map_err(|source| {
                ProtocolError::Garble {
                    layer,
                    unit: units.len(),
                    source,
                }
            })?;
            off += used;
            let need = width * LABEL_BYTES;
            if payload.len() - off < need {
                return Err(desync("GcLabels frame truncated".into()));
            }
            let labels = payload[off..off + need]
                .chunks_exact(LABEL_BYTES)
                .map(|b| Label::from_bytes(b.try_into().unwrap()))
                .collect();
            off += need;
            units.push((gc, labels));
        }
        if off != payload.len() {
            return Err(desync("trailing bytes in GcLabels frame".into()));
        }
    }
    let outputs: Vec<Vec<u8>> = units
        .par_iter()
        .zip(&m.labels)
        .enumerate()
        .map(|(u, ((gc, server_labels), own))| {
            let mut inputs = vec![Label::default(); circuit.n_inputs()];
            let mut own = own.iter();
            for bundle in circuit.inputs() {
                let src: Vec<Label> = if bundle.name == server_bundle.name {
                    server_labels.clone()
                } else {
                    own.by_ref().take(bundle.width()).copied().collect()
                };
                if src.len() != bundle.width() {
                    return Err(ProtocolError::Desync {
                        layer,
                        msg: format!("unit {u}: too few labels for `{}`", bundle.name),
                    });
                }
                for (&w, l) in bundle.wires.iter().zip(src) {
                    inputs[w as usize] = l;
                }
            }
            let out = eval(gc, circuit, &inputs).map_err(|source| ProtocolError::Garble {
                layer,
                unit: u,
                source,
            })?;
            Ok(out.iter().flat_map(|l| l.to_bytes()).collect())
        })
        .collect::<Result<_, _>>()?;
    ch.send(Frame::new(FrameType::GcOutputLabels, outputs.concat()))?;
    let Some(sign) = m.sign else {
        return Ok(());
    };
    let mine: Vec<FieldElement> = (0..n)
        .flat_map(|u| {
            let (d, e) = beaver_open(m.x_share[u], sign.r_v[u], &sign.triples[u], &params);
            [d, e]
        })
        .collect();
    send_elems(ch, FrameType::BeaverOpen, &mine)?;
    let theirs = recv_elems(ch, FrameType::BeaverOpen, 2 * n, layer, &params)?;
    let masked: Vec<FieldElement> = (0..n)
        .map(|u| {
            let d = params.add(mine[2 * u], theirs[2 * u]);
            let e = params.add(mine[2 * u + 1], theirs[2 * u + 1]);
            let z = beaver_combine(Party::Client, d, e, &sign.triples[u], &params);
            params.sub(z, m.r_next[u])
        })
        .collect();
    send_elems(ch, FrameType::LinearMasked, &masked)
}

fn abort_on_error<C: Channel + ?Sized, T>(
    ch: &mut C,
    r: Result<T, ProtocolError>,
) -> Result<T, ProtocolError> {
    if let Err(e) = &r {
        if !matches!(
            e,
            ProtocolError::Transport(_) | ProtocolError::ConfigMismatch
        ) {
            ch.abort(&e.to_string());
        }
    }
    r
}

/// Whole server session: handshake, material delivery, online phase.
pub fn serve<C: Channel + ?Sized>(
    ch: &mut C,
    model: &Model,
    cfg: &SessionConfig,
    client: &ClientMaterial,
    server: ServerMaterial,
) -> Result<(), ProtocolError> {
    let r = handshake_server(ch, cfg)
        .and_then(|_| send_client_material(ch, client))
        .and_then(|_| run_server(ch, model, cfg, server));
    abort_on_error(ch, r)
}

/// Whole client session. Returns the logits and the online wall time.
pub fn connect<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &SessionConfig,
    input: &[FieldElement],
) -> Result<(Vec<FieldElement>, ClientMaterialSummary), ProtocolError> {
    let r = handshake_client(ch, cfg)
        .and_then(|_| recv_client_material(ch, &cfg.params))
        .and_then(|m| {
            let summary = ClientMaterialSummary {
                mask_trace: m.mask_trace(&cfg.params),
                online_time: Duration::ZERO,
            };
            let start = Instant::now();
            let logits = run_client(ch, cfg, input, m)?;
            Ok((
                logits,
                ClientMaterialSummary {
                    online_time: start.elapsed(),
                    ..summary
                },
            ))
        });
    abort_on_error(ch, r)
}

/// Facts the client learns about its own session.
#[derive(Debug, Clone)]
pub struct ClientMaterialSummary {
    pub mask_trace: Vec<FieldElement>,
    pub online_time: Duration,
}

#[derive(Debug, Clone)]
pub struct SessionReport {
    pub logits: Vec<FieldElement>,
    pub client: Transcript,
    pub server: Transcript,
    /// Masks `t` of every stochastic comparison, in activation order.
    pub mask_trace: Vec<FieldElement>,
    pub online_time: Duration,
}

/// Offline phase with a trusted dealer, then both parties over loopback.
///
/// Safe to call from inside the global rayon pool: the server party then gets
/// a pool of its own, since its parallel work cannot be picked up by workers
/// blocked here.
pub fn run_local(
    model: &Model,
    cfg: &SessionConfig,
    input: &Tensor,
) -> Result<SessionReport, ProtocolError> {
    let (client_mat, server_mat) =
        offline_phase(model, cfg, &mut TrustedDealer::new(cfg.dealer_seed))?;
    let (mut cch, mut sch) = loopback();
    let client_mat = &client_mat;
    let server_pool = match rayon::current_thread_index() {
        Some(_) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(2)
                .build()
                .map_err(|e| ProtocolError::Config(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    let (result, client, server) = thread::scope(|s| {
        let server = s.spawn(move || {
            let run = || serve(&mut sch, model, cfg, client_mat, server_mat);
            let r = match &server_pool {
                Some(pool) => pool.install(run),
                None => run(),
            };
            (r, sch.transcript().clone())
        });
        let result = connect(&mut cch, cfg, &input.data);
        let client = cch.transcript().clone();
        drop(cch);
        let (sr, st) = server.join().expect("server thread");
        (result.and_then(|r| sr.map(|_| r)), client, st)
    });
    let (logits, summary) = result?;
    Ok(SessionReport {
        logits,
        client,
        server,
        mask_trace: summary.mask_trace,
        online_time: summary.online_time,
    })
}
