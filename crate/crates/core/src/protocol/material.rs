//! Offline phase and its per-party outputs.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::{truncate_client, Dealer, Plan, ProtocolError, SessionConfig};
use crate::circuit::{synth, to_bits, BooleanCircuit, Owner};
use crate::field::{FieldElement, FieldParams};
use crate::garble::{garble, Garbling, Label};
use crate::nn::{Layer, Model};
use crate::sharing::TripleShare;

/// Client state for one sign-variant ReLU layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSign {
    /// Client share of the sign bit; the GC outputs `sign - r_v` to the server.
    pub r_v: Vec<FieldElement>,
    pub triples: Vec<TripleShare>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientReluLayer {
    pub layer: usize,
    /// Client share of the pre-activation values.
    pub x_share: Vec<FieldElement>,
    /// Per unit: labels of every evaluator bundle, in bundle order.
    pub labels: Vec<Vec<Label>>,
    /// Client share of the activation after this layer.
    pub r_next: Vec<FieldElement>,
    pub sign: Option<ClientSign>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientMaterial {
    pub plan: Plan,
    pub r_in: Vec<FieldElement>,
    pub relus: Vec<ClientReluLayer>,
    /// Client share of the logits.
    pub out_share: Vec<FieldElement>,
}

#[derive(Debug, Clone)]
pub struct ServerReluLayer {
    pub layer: usize,
    pub seeds: Vec<u64>,
    pub garblings: Vec<Garbling>,
    pub triples: Option<Vec<TripleShare>>,
}

#[derive(Debug, Clone)]
pub struct ServerMaterial {
    /// Mask `s` for every non-ReLU layer, `None` for ReLU layers.
    pub linear_masks: Vec<Option<Vec<FieldElement>>>,
    pub relus: Vec<ServerReluLayer>,
}

fn random_vec(rng: &mut ChaCha20Rng, n: usize, params: &FieldParams) -> Vec<FieldElement> {
    (0..n).map(|_| params.random(rng)).collect()
}

/// Value the client feeds into evaluator bundle `name`.
pub(super) fn client_input(
    cfg: &SessionConfig,
    name: &str,
    x_c: FieldElement,
    r_next: FieldElement,
    r_v: FieldElement,
) -> u64 {
    let p = &cfg.params;
    match name {
        "client_share_bits" => x_c.value(),
        "client_neg_share_bits" => p.neg(x_c).value() >> cfg.k(),
        "r_bits" => r_next.value(),
        "neg_r_bits" => p.neg(r_v).value(),
        "one_minus_r_bits" => p.sub(p.reduce(1), r_v).value(),
        other => panic!("unexpected evaluator bundle `{other}`"),
    }
}

/// Runs the offline phase for one inference.
pub fn offline_phase<D: Dealer + ?Sized>(
    model: &Model,
    cfg: &SessionConfig,
    dealer: &mut D,
) -> Result<(ClientMaterial, ServerMaterial), ProtocolError> {
    cfg.check_model(model)?;
    let params = cfg.params;
    let circuit = synth(&cfg.circuit_spec(), &params)?;
    let mut client_rng = ChaCha20Rng::seed_from_u64(cfg.client_seed);
    let mut server_rng = ChaCha20Rng::seed_from_u64(cfg.server_seed);
    let shapes = model.shapes();
    let r_in = random_vec(&mut client_rng, model.input_len(), &params);
    let mut c = r_in.clone();
    let mut linear_masks = Vec::with_capacity(model.layers.len());
    let (mut client_relus, mut server_relus) = (Vec::new(), Vec::new());
    let mut triple_id = 0u64;
    for (i, layer) in model.layers.iter().enumerate() {
        if !matches!(layer, Layer::Relu) {
            let n_out: usize = shapes[i + 1].iter().product();
            let s = random_vec(&mut server_rng, n_out, &params);
            let f = layer.rescale_bits();
            c = dealer
                .linear(layer, &shapes[i], &c, &s, &params)
                .into_iter()
                .map(|v| truncate_client(v, f, &params))
                .collect();
            linear_masks.push(Some(s));
            continue;
        }
        linear_masks.push(None);
        let n = c.len();
        let seeds: Vec<u64> = (0..n).map(|_| server_rng.gen()).collect();
        let garblings: Vec<Garbling> = seeds.par_iter().map(|&s| garble(&circuit, s)).collect();
        let r_next = random_vec(&mut client_rng, n, &params);
        let (client_sign, server_triples) = if cfg.variant.outputs_sign() {
            let r_v = random_vec(&mut client_rng, n, &params);
            let (tc, ts): (Vec<_>, Vec<_>) = dealer
                .triples(n, &params)
                .into_iter()
                .map(|t| {
                    triple_id += 1;
                    t.split(triple_id)
                })
                .unzip();
            (Some(ClientSign { r_v, triples: tc }), Some(ts))
        } else {
            (None, None)
        };
        let mut labels = Vec::with_capacity(n);
        for (u, g) in garblings.iter().enumerate() {
            let r_v = client_sign
                .as_ref()
                .map_or(FieldElement::ZERO, |s| s.r_v[u]);
            let mut unit = Vec::new();
            for bundle in circuit
                .inputs()
                .iter()
                .filter(|b| b.owner == Owner::Evaluator)
            {
                let v = client_input(cfg, &bundle.name, c[u], r_next[u], r_v);
                let l = dealer
                    .transfer_labels(&g.encoder, bundle, &to_bits(v, bundle.width()))
                    .map_err(|source| ProtocolError::Garble {
                        layer: i,
                        unit: u,
                        source,
                    })?;
                unit.extend(l);
            }
            labels.push(unit);
        }
        client_relus.push(ClientReluLayer {
            layer: i,
            x_share: std::mem::replace(&mut c, r_next.clone()),
            labels,
            r_next,
            sign: client_sign,
        });
        server_relus.push(ServerReluLayer {
            layer: i,
            seeds,
            garblings,
            triples: server_triples,
        });
    }
    Ok((
        ClientMaterial {
            plan: Plan::of(model),
            r_in,
            relus: client_relus,
            out_share: c,
        },
        ServerMaterial {
            linear_masks,
            relus: server_relus,
        },
    ))
}

impl ClientMaterial {
    /// The masks `t = -x_c` the stochastic comparison used, in activation order.
    pub fn mask_trace(&self, params: &FieldParams) -> Vec<FieldElement> {
        self.relus
            .iter()
            .flat_map(|l| l.x_share.iter().map(|&x| params.neg(x)))
            .collect()
    }

    /// Checks lengths against the plan.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Material(m));
        if self.r_in.len() != self.plan.input_len || self.out_share.len() != self.plan.output_len {
            return bad("input or output length does not match the plan".into());
        }
        if self.relus.len() != self.plan.relu_layers.len() {
            return bad(format!(
                "{} ReLU layers, plan has {}",
                self.relus.len(),
                self.plan.relu_layers.len()
            ));
        }
        for (l, &(idx, n)) in self.relus.iter().zip(&self.plan.relu_layers) {
            let sign_ok = l
                .sign
                .as_ref()
                .is_none_or(|s| s.r_v.len() == n && s.triples.len() == n);
            if l.layer != idx
                || l.x_share.len() != n
                || l.labels.len() != n
                || l.r_next.len() != n
                || !sign_ok
            {
                return bad(format!("layer {idx}: unit counts do not match the plan"));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CLIENT_MAGIC);
        w.usize(self.plan.input_len);
        w.usize(self.plan.relu_layers.len());
        for &(i, n) in &self.plan.relu_layers {
            w.usize(i);
            w.usize(n);
        }
        w.usize(self.plan.output_len);
        w.elems(&self.r_in);
        w.usize(self.relus.len());
        for l in &self.relus {
            w.usize(l.layer);
            w.elems(&l.x_share);
            w.elems(&l.r_next);
            w.usize(l.labels.first().map_or(0, Vec::len));
            for unit in &l.labels {
                for lab in unit {
                    w.buf.extend_from_slice(&lab.to_bytes());
                }
            }
            match &l.sign {
                None => w.buf.push(0),
                Some(s) => {
                    w.buf.push(1);
                    w.elems(&s.r_v);
                    w.triples(&s.triples);
                }
            }
        }
        w.elems(&self.out_share);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], params: &FieldParams) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes, CLIENT_MAGIC, params)?;
        let input_len = r.usize()?;
        let n_layers = r.usize()?;
        let relu_layers = (0..n_layers)
            .map(|_| Ok((r.usize()?, r.usize()?)))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let plan = Plan {
            input_len,
            relu_layers,
            output_len: r.usize()?,
        };
        let r_in = r.elems()?;
        let n = r.usize()?;
        let mut relus = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let layer = r.usize()?;
            let x_share = r.elems()?;
            let r_next = r.elems()?;
            let per = r.usize()?;
            let labels = (0..x_share.len())
                .map(|_| (0..per).map(|_| r.label()).collect())
                .collect::<Result<_, _>>()?;
            let sign = match r.byte()? {
                0 => None,
                1 => Some(ClientSign {
                    r_v: r.elems()?,
                    triples: r.triples()?,
                }),
                b => return Err(ProtocolError::Material(format!("bad sign flag {b}"))),
            };
            relus.push(ClientReluLayer {
                layer,
                x_share,
                labels,
                r_next,
                sign,
            });
        }
        let out_share = r.elems()?;
        r.finish()?;
        let m = ClientMaterial {
            plan,
            r_in,
            relus,
            out_share,
        };
        m.validate()?;
        Ok(m)
    }
}

impl ServerMaterial {
    /// Rejects material that would reuse a garbling or a triple.
    pub fn check_fresh(&self) -> Result<(), ProtocolError> {
        let mut seeds = HashSet::new();
        let mut ids = HashSet::new();
        for l in &self.relus {
            if l.seeds.len() != l.garblings.len() {
                return Err(ProtocolError::Material(format!(
                    "layer {}: seeds and garblings differ",
                    l.layer
                )));
            }
            if let Some(s) = l.seeds.iter().find(|s| !seeds.insert(**s)) {
                return Err(ProtocolError::Material(format!(
                    "layer {}: garbling seed {s} reused",
                    l.layer
                )));
            }
            for t in l.triples.iter().flatten() {
                if !ids.insert(t.id) {
                    return Err(ProtocolError::Material(format!(
                        "layer {}: triple {} reused",
                        l.layer, t.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Garbling seeds stand in for the garbled circuits themselves.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(SERVER_MAGIC);
        w.usize(self.linear_masks.len());
        for m in &self.linear_masks {
            match m {
                None => w.buf.push(0),
                Some(s) => {
                    w.buf.push(1);
                    w.elems(s);
                }
            }
        }
        w.usize(self.relus.len());
        for l in &self.relus {
            w.usize(l.layer);
            w.usize(l.seeds.len());
            for &s in &l.seeds {
                w.u64(s);
            }
            match &l.triples {
                None => w.buf.push(0),
                Some(t) => {
                    w.buf.push(1);
                    w.triples(t);
                }
            }
        }
        w.buf
    }

    /// Parses and re-garbles every unit with `circuit`.
    pub fn from_bytes(
        bytes: &[u8],
        circuit: &BooleanCircuit,
        params: &FieldParams,
    ) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes, SERVER_MAGIC, params)?;
        let n = r.usize()?;
        let mut linear_masks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            linear_masks.push(match r.byte()? {
                0 => None,
                1 => Some(r.elems()?),
                b => return Err(ProtocolError::Material(format!("bad mask flag {b}"))),
            });
        }
        let n = r.usize()?;
        let mut relus = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let layer = r.usize()?;
            let count = r.usize()?;
            let seeds = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let triples = match r.byte()? {
                0 => None,
                1 => Some(r.triples()?),
                b => return Err(ProtocolError::Material(format!("bad triple flag {b}"))),
            };
            let garblings = seeds.par_iter().map(|&s| garble(circuit, s)).collect();
            relus.push(ServerReluLayer {
                layer,
                seeds,
                garblings,
                triples,
            });
        }
        r.finish()?;
        Ok(ServerMaterial {
            linear_masks,
            relus,
        })
    }
}

const CLIENT_MAGIC: &[u8; 4] = b"PIMC";
const SERVER_MAGIC: &[u8; 4] = b"PIMS";
const DEALER_MAGIC: &[u8; 4] = b"PIMD";
const FORMAT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn elems(&mut self, xs: &[FieldElement]) {
        self.usize(xs.len());
        for x in xs {
            self.u64(x.value());
        }
    }

    fn triples(&mut self, ts: &[TripleShare]) {
        self.usize(ts.len());
        for t in ts {
            self.u64(t.id);
            for v in [t.a, t.b, t.ab] {
                self.u64(v.value());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    params: FieldParams,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4], params: &FieldParams) -> Result<Self, ProtocolError> {
        if bytes.len() < 8 || &bytes[..4] != magic {
            return Err(ProtocolError::Material("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ProtocolError::Material(format!(
                "unsupported version {version}"
            )));
        }
        Ok(Reader {
            bytes,
            pos: 8,
            params: *params,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.bytes.len() - self.pos < n {
            return Err(ProtocolError::Material("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, ProtocolError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| ProtocolError::Material(format!("implausible count {v}")))
    }

    fn elem(&mut self) -> Result<FieldElement, ProtocolError> {
        let v = self.u64()?;
        self.params
            .element(v)
            .map_err(|_| ProtocolError::Material(format!("element {v} out of range")))
    }

    fn elems(&mut self) -> Result<Vec<FieldElement>, ProtocolError> {
        let n = self.usize()?;
        (0..n).map(|_| self.elem()).collect()
    }

    fn label(&mut self) -> Result<Label, ProtocolError> {
        Ok(Label::from_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn triples(&mut self) -> Result<Vec<TripleShare>, ProtocolError> {
        let n = self.usize()?;
        (0..n)
            .map(|_| {
                Ok(TripleShare {
                    id: self.u64()?,
                    a: self.elem()?,
                    b: self.elem()?,
                    ab: self.elem()?,
                })
            })
            .collect()
    }

    fn finish(self) -> Result<(), ProtocolError> {
        if self.pos != self.bytes.len() {
            return Err(ProtocolError::Material(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Writes both parties' material with the config hash it was made for.
pub fn save_dealer_file(
    path: &Path,
    cfg: &SessionConfig,
    client: &ClientMaterial,
    server: &ServerMaterial,
) -> Result<(), ProtocolError> {
    let mut w = Writer::new(DEALER_MAGIC);
    w.buf.extend_from_slice(&cfg.hash());
    for part in [client.to_bytes(), server.to_bytes()] {
        w.usize(part.len());
        w.buf.extend_from_slice(&part);
    }
    fs::write(path, w.buf).map_err(|e| ProtocolError::Config(format!("{}: {e}", path.display())))
}

/// Reads a dealer file and checks it against the config and model.
pub fn load_dealer_file(
    path: &Path,
    cfg: &SessionConfig,
    model: &Model,
) -> Result<(ClientMaterial, ServerMaterial), ProtocolError> {
    cfg.check_model(model)?;
    let bytes =
        fs::read(path).map_err(|e| ProtocolError::Config(format!("{}: {e}", path.display())))?;
    let mut r = Reader::new(&bytes, DEALER_MAGIC, &cfg.params)?;
    if r.take(32)? != cfg.hash() {
        return Err(ProtocolError::Config(format!(
            "{} was generated for a different session config",
            path.display()
        )));
    }
    let n = r.usize()?;
    let client = ClientMaterial::from_bytes(r.take(n)?, &cfg.params)?;
    let n = r.usize()?;
    let circuit = synth(&cfg.circuit_spec(), &cfg.params)?;
    let server = ServerMaterial::from_bytes(r.take(n)?, &circuit, &cfg.params)?;
    r.finish()?;
    if client.plan != Plan::of(model) || server.linear_masks.len() != model.layers.len() {
        return Err(ProtocolError::Config(format!(
            "{} was generated for a different model",
            path.display()
        )));
    }
    Ok((client, server))
}
