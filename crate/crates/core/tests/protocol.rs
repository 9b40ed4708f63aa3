use privinfer::circuit::ReluVariant;
use privinfer::faultmodel::{exact_relu, stochastic_relu, FaultMode};
use privinfer::field::{FieldElement, FieldParams};
use privinfer::nn::{
    infer_plain, infer_stochastic_with, parse_arch, random_model, Layer, MaskSource, Model,
    ModelGenOptions, StochasticReluConfig, Tensor,
};
use privinfer::protocol::{
    connect, offline_phase, run_local, serve, ProtocolError, RescalePolicy, SessionConfig,
    TrustedDealer,
};
use privinfer::transport::{
    loopback, Channel, Frame, FrameType, Phase, Transcript, TransportError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(
    params: FieldParams,
    variant: ReluVariant,
    k: u32,
    mode: FaultMode,
    seed: u64,
) -> SessionConfig {
    SessionConfig::new(
        params,
        variant,
        StochasticReluConfig { k, mode, seed: 0 },
        seed,
    )
}

fn int_model(arch: &str, seed: u64) -> Model {
    let spec = parse_arch(arch).unwrap();
    let opts = ModelGenOptions {
        frac_bits: 0,
        weight_bits: Some(4),
    };
    random_model(&spec, &opts, FieldParams::default(), seed).unwrap()
}

fn random_input(model: &Model, rng: &mut ChaCha8Rng, bound: i64) -> Tensor {
    let v: Vec<i64> = (0..model.input_len())
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_signed(model.input_shape.clone(), &v, &model.params).unwrap()
}

#[test]
fn relu_full_equals_plaintext_on_100_inputs() {
    let model = int_model("input:8,fc:16,relu,fc:12,relu,fc:4", 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let x = random_input(&model, &mut rng, 100);
        let mut c = cfg(
            model.params,
            ReluVariant::ReluFull,
            0,
            FaultMode::PosZero,
            i,
        );
        c.rescale = RescalePolicy::Disabled;
        let report = run_local(&model, &c, &x).unwrap();
        assert_eq!(
            report.logits,
            infer_plain(&model, &x).unwrap().data,
            "input {i}"
        );
    }
}

#[test]
fn relu_full_is_exact_over_a_small_field() {
    let params = FieldParams::new(509).unwrap();
    let model = Model::new(params, vec![509], 0, vec![Layer::Relu]).unwrap();
    let all: Vec<FieldElement> = (0..509).map(|v| params.reduce(v)).collect();
    let x = Tensor::new(vec![509], all.clone()).unwrap();
    let report = run_local(
        &model,
        &cfg(params, ReluVariant::ReluFull, 0, FaultMode::PosZero, 3),
        &x,
    )
    .unwrap();
    let want: Vec<FieldElement> = all.iter().map(|&v| exact_relu(v, &params)).collect();
    assert_eq!(report.logits, want);
}

#[test]
fn sign_stoch_matches_simulator_on_1000_activations() {
    let params = FieldParams::default();
    let model = Model::new(params, vec![1000], 0, vec![Layer::Relu]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vals: Vec<i64> = (0..1000)
        .map(|_| rng.gen_range(-(1 << 16)..(1 << 16)))
        .collect();
    let x = Tensor::from_signed(vec![1000], &vals, &params).unwrap();
    let c = cfg(params, ReluVariant::SignStoch, 12, FaultMode::PosZero, 5);
    let report = run_local(&model, &c, &x).unwrap();
    assert_eq!(report.mask_trace.len(), 1000);
    for i in 0..1000 {
        let want = stochastic_relu(
            x.data[i],
            report.mask_trace[i],
            12,
            FaultMode::PosZero,
            &params,
        );
        assert_eq!(report.logits[i], want, "activation {i}");
    }
    let sim = infer_stochastic_with(
        &model,
        &x,
        12,
        FaultMode::PosZero,
        MaskSource::Trace(&report.mask_trace),
    )
    .unwrap();
    assert_eq!(report.logits, sim.output.data);
}

#[test]
fn sign_stoch_network_matches_simulator_trace() {
    let model = int_model("input:8,fc:16,relu,fc:12,relu,fc:4", 9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, mode) in [
        (0u64, FaultMode::PosZero),
        (1, FaultMode::NegPass),
        (2, FaultMode::PosZero),
    ] {
        let x = random_input(&model, &mut rng, 1000);
        let k = 4 + 6 * i as u32;
        let c = cfg(model.params, ReluVariant::SignStoch, k, mode, 10 + i);
        let report = run_local(&model, &c, &x).unwrap();
        let sim = infer_stochastic_with(&model, &x, k, mode, MaskSource::Trace(&report.mask_trace))
            .unwrap();
        assert_eq!(report.logits, sim.output.data);
    }
}

#[test]
fn sign_naive_equals_plaintext() {
    let model = int_model("input:2x4x4,conv:3x3:p1,relu,flatten,fc:8,relu,fc:3", 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..5 {
        let x = random_input(&model, &mut rng, 50);
        let report = run_local(
            &model,
            &cfg(
                model.params,
                ReluVariant::SignNaive,
                0,
                FaultMode::PosZero,
                i,
            ),
            &x,
        )
        .unwrap();
        assert_eq!(report.logits, infer_plain(&model, &x).unwrap().data);
    }
}

#[test]
fn zero_activation_stays_zero() {
    let params = FieldParams::default();
    let model = Model::new(params, vec![64], 0, vec![Layer::Relu]).unwrap();
    let x = Tensor::new(vec![64], vec![FieldElement::ZERO; 64]).unwrap();
    for v in ReluVariant::ALL {
        let r = run_local(&model, &cfg(params, v, 20, FaultMode::NegPass, 8), &x).unwrap();
        assert!(r.logits.iter().all(|&y| y == FieldElement::ZERO), "{v}");
    }
}

#[test]
fn scaled_model_stays_close_to_plaintext() {
    let spec =
        parse_arch("input:1x6x6,conv:4x3:p1,relu,avgpool:2,flatten,fc:10,relu,fc:4").unwrap();
    let model = random_model(
        &spec,
        &ModelGenOptions::default(),
        FieldParams::default(),
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0;
    for i in 0..10 {
        let x = random_input(&model, &mut rng, 256);
        let r = run_local(
            &model,
            &cfg(
                model.params,
                ReluVariant::ReluFull,
                0,
                FaultMode::PosZero,
                i,
            ),
            &x,
        )
        .unwrap();
        let got: Vec<i64> = r.logits.iter().map(|&v| model.params.decode(v)).collect();
        let want = infer_plain(&model, &x).unwrap().to_signed(&model.params);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    // Local truncation is off by at most one per rescale; errors compound mildly.
    assert!(worst <= 16, "max logit error {worst}");
}

fn online_bytes(t: &Transcript) -> usize {
    t.total_bytes(Phase::Online)
}

#[test]
fn online_bytes_order_across_variants() {
    let model = int_model("input:16,fc:32,relu,fc:16,relu,fc:4", 5);
    let x = random_input(&model, &mut ChaCha8Rng::seed_from_u64(7), 100);
    let bytes: Vec<usize> = [
        (ReluVariant::ReluFull, 0),
        (ReluVariant::SignNaive, 0),
        (ReluVariant::SignStoch, 0),
        (ReluVariant::SignStoch, 12),
    ]
    .iter()
    .map(|&(v, k)| {
        let r = run_local(&model, &cfg(model.params, v, k, FaultMode::PosZero, 1), &x).unwrap();
        assert_eq!(online_bytes(&r.client), online_bytes(&r.server));
        online_bytes(&r.client)
    })
    .collect();
    assert!(bytes.windows(2).all(|w| w[0] > w[1]), "{bytes:?}");
}

#[test]
fn round_structure() {
    let model = int_model("input:4,fc:4,relu,fc:4,relu,fc:2", 1);
    let x = random_input(&model, &mut ChaCha8Rng::seed_from_u64(8), 10);
    let full = run_local(
        &model,
        &cfg(
            model.params,
            ReluVariant::ReluFull,
            0,
            FaultMode::PosZero,
            1,
        ),
        &x,
    )
    .unwrap();
    // input, then (labels, outputs) per ReLU layer, then logits.
    assert_eq!(full.client.rounds(Phase::Online), 1 + 2 * 2 + 1);
    let sign = run_local(
        &model,
        &cfg(
            model.params,
            ReluVariant::SignStoch,
            8,
            FaultMode::PosZero,
            1,
        ),
        &x,
    )
    .unwrap();
    assert_eq!(sign.client.rounds(Phase::Online), 1 + 4 * 2 + 1);
}

#[test]
fn config_mismatch_aborts_both_sides() {
    let model = int_model("input:4,fc:4,relu,fc:2", 1);
    let params = model.params;
    let server_cfg = cfg(params, ReluVariant::SignStoch, 12, FaultMode::PosZero, 1);
    let client_cfg = cfg(params, ReluVariant::SignStoch, 11, FaultMode::PosZero, 1);
    let (cm, sm) = offline_phase(&model, &server_cfg, &mut TrustedDealer::new(0)).unwrap();
    let (mut a, mut b) = loopback();
    let server = std::thread::spawn(move || serve(&mut b, &model, &server_cfg, &cm, sm));
    let x = vec![FieldElement::ZERO; 4];
    let client = connect(&mut a, &client_cfg, &x);
    assert!(matches!(
        client,
        Err(ProtocolError::Transport(TransportError::PeerAborted(_)))
    ));
    assert!(matches!(
        server.join().unwrap(),
        Err(ProtocolError::ConfigMismatch)
    ));
}

/// Channel wrapper that flips one bit of the first GcOutputLabels frame.
struct Tamper<C>(C, bool);

impl<C: Channel> Channel for Tamper<C> {
    fn send(&mut self, mut frame: Frame) -> Result<(), TransportError> {
        if frame.kind == FrameType::GcOutputLabels && !self.1 {
            frame.payload[5] ^= 0x10;
            self.1 = true;
        }
        self.0.send(frame)
    }
    fn recv(&mut self) -> Result<Frame, TransportError> {
        self.0.recv()
    }
    fn transcript(&self) -> &Transcript {
        self.0.transcript()
    }
    fn set_phase(&mut self, phase: Phase) {
        self.0.set_phase(phase)
    }
}

#[test]
fn tampered_output_label_is_detected() {
    let model = int_model("input:4,fc:4,relu,fc:2", 1);
    let c = cfg(
        model.params,
        ReluVariant::ReluFull,
        0,
        FaultMode::PosZero,
        1,
    );
    let (cm, sm) = offline_phase(&model, &c, &mut TrustedDealer::new(0)).unwrap();
    let (a, mut b) = loopback();
    let server = std::thread::spawn(move || serve(&mut b, &model, &c, &cm, sm));
    let mut a = Tamper(a, false);
    let client = connect(&mut a, &c, &[FieldElement::ZERO; 4]);
    assert!(matches!(
        server.join().unwrap(),
        Err(ProtocolError::Garble {
            layer: 1,
            unit: 0,
            ..
        })
    ));
    assert!(matches!(
        client,
        Err(ProtocolError::Transport(TransportError::PeerAborted(_)))
    ));
}

#[test]
fn dropped_peer_is_a_transport_error() {
    let model = int_model("input:4,fc:4,relu,fc:2", 1);
    let c = cfg(
        model.params,
        ReluVariant::ReluFull,
        0,
        FaultMode::PosZero,
        1,
    );
    let (cm, sm) = offline_phase(&model, &c, &mut TrustedDealer::new(0)).unwrap();
    let (mut a, b) = loopback();
    // The server handles the handshake and material, then disappears.
    let server = std::thread::spawn(move || {
        let mut b = b;
        privinfer::protocol::handshake_server(&mut b, &c).unwrap();
        privinfer::protocol::send_client_material(&mut b, &cm).unwrap();
        drop(sm);
    });
    let r = connect(&mut a, &c, &[FieldElement::ZERO; 4]);
    server.join().unwrap();
    let err = r.unwrap_err();
    assert!(err.is_abort(), "{err}");
    assert!(matches!(
        err,
        ProtocolError::Transport(TransportError::Closed)
    ));
}

#[test]
fn disabled_rescale_rejects_scaled_models() {
    let spec = parse_arch("input:4,fc:4,relu,fc:2").unwrap();
    let model = random_model(
        &spec,
        &ModelGenOptions::default(),
        FieldParams::default(),
        1,
    )
    .unwrap();
    let mut c = cfg(
        model.params,
        ReluVariant::ReluFull,
        0,
        FaultMode::PosZero,
        1,
    );
    c.rescale = RescalePolicy::Disabled;
    let err = offline_phase(&model, &c, &mut TrustedDealer::new(0)).unwrap_err();
    assert!(matches!(err, ProtocolError::Config(_)));
    assert!(!err.is_abort());
}

#[test]
fn transcripts_agree_between_parties() {
    let model = int_model("input:4,fc:6,relu,fc:2", 2);
    let x = random_input(&model, &mut ChaCha8Rng::seed_from_u64(9), 10);
    let r = run_local(
        &model,
        &cfg(
            model.params,
            ReluVariant::SignNaive,
            0,
            FaultMode::PosZero,
            4,
        ),
        &x,
    )
    .unwrap();
    let kinds = |t: &Transcript| {
        t.entries()
            .iter()
            .map(|e| (e.kind, e.bytes, e.phase))
            .collect::<Vec<_>>()
    };
    assert_eq!(kinds(&r.client), kinds(&r.server));
    assert!(r.client.total_bytes(Phase::Offline) > 0);
}

#[test]
fn run_local_inside_the_rayon_pool() {
    use rayon::prelude::*;
    let model = int_model("input:8,fc:16,relu,fc:4", 4);
    let n = 4 * rayon::current_num_threads();
    let ok = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let x = random_input(&model, &mut rng, 50);
            let mut c = cfg(
                model.params,
                ReluVariant::ReluFull,
                0,
                FaultMode::PosZero,
                i,
            );
            c.rescale = RescalePolicy::Disabled;
            run_local(&model, &c, &x).unwrap().logits == infer_plain(&model, &x).unwrap().data
        })
        .filter(|&b| b)
        .count();
    assert_eq!(ok, n);
}
