//! Two-party additive secret sharing and Beaver-triple multiplication.

use std::sync::Mutex;

use rand::Rng;
use thiserror::Error;

use crate::field::{FieldElement, FieldParams};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SharingError {
    #[error("single-use item {0} was already consumed")]
    Reused(usize),
    #[error("single-use item {0} does not exist")]
    Missing(usize),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("exchange failed: {0}")]
    Exchange(String),
}

/// The two protocol participants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Client,
    Server,
}

impl Party {
    pub fn peer(self) -> Party {
        match self {
            Party::Client => Party::Server,
            Party::Server => Party::Client,
        }
    }
}

/// Both halves of an additive sharing; only the dealer and tests hold one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharePair {
    pub client: FieldElement,
    pub server: FieldElement,
}

impl SharePair {
    pub fn get(&self, party: Party) -> FieldElement {
        match party {
            Party::Client => self.client,
            Party::Server => self.server,
        }
    }
}

/// Shares `x` with the client holding the mask `r` and the server `x - r`.
pub fn share_with_mask(x: FieldElement, r: FieldElement, params: &FieldParams) -> SharePair {
    SharePair {
        client: r,
        server: params.sub(x, r),
    }
}

pub fn share<R: Rng + ?Sized>(x: FieldElement, rng: &mut R, params: &FieldParams) -> SharePair {
    let r = params.random(rng);
    share_with_mask(x, r, params)
}

pub fn reconstruct(s: SharePair, params: &FieldParams) -> FieldElement {
    params.add(s.client, s.server)
}

/// Correlated randomness `(a, b, ab)` in shared form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeaverTriple {
    pub a: SharePair,
    pub b: SharePair,
    pub ab: SharePair,
}

impl BeaverTriple {
    /// Splits into the two single-party views, tagged with `id`.
    pub fn split(self, id: u64) -> (TripleShare, TripleShare) {
        let view = |party| TripleShare {
            id,
            a: self.a.get(party),
            b: self.b.get(party),
            ab: self.ab.get(party),
        };
        (view(Party::Client), view(Party::Server))
    }
}

/// One party's shares of a Beaver triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleShare {
    pub id: u64,
    pub a: FieldElement,
    pub b: FieldElement,
    pub ab: FieldElement,
}

pub fn gen_triples<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
    params: &FieldParams,
) -> Vec<BeaverTriple> {
    (0..n)
        .map(|_| {
            let a = params.random(rng);
            let b = params.random(rng);
            BeaverTriple {
                a: share(a, rng, params),
                b: share(b, rng, params),
                ab: share(params.mul(a, b), rng, params),
            }
        })
        .collect()
}

/// Opening step of a Beaver multiplication: this party's shares of `d = x - a`
/// and `e = y - b`.
pub fn beaver_open(
    x: FieldElement,
    y: FieldElement,
    triple: &TripleShare,
    params: &FieldParams,
) -> (FieldElement, FieldElement) {
    (params.sub(x, triple.a), params.sub(y, triple.b))
}

/// Local combination once `d` and `e` are public. Only the server adds `d*e`.
pub fn beaver_combine(
    party: Party,
    d: FieldElement,
    e: FieldElement,
    triple: &TripleShare,
    params: &FieldParams,
) -> FieldElement {
    let mut z = params.add(
        triple.ab,
        params.add(params.mul(d, triple.b), params.mul(e, triple.a)),
    );
    if party == Party::Server {
        z = params.add(z, params.mul(d, e));
    }
    z
}

/// Carries one round of openings to the peer and returns the peer's openings.
pub trait OpenExchange {
    fn exchange(&mut self, mine: &[FieldElement]) -> Result<Vec<FieldElement>, SharingError>;
}

/// Batched Beaver multiplication from one party's point of view. Openings are
/// laid out as `d_0, e_0, d_1, e_1, ...` in a single exchange.
pub fn beaver_mul<E: OpenExchange + ?Sized>(
    party: Party,
    xs: &[FieldElement],
    ys: &[FieldElement],
    triples: Vec<TripleShare>,
    exchange: &mut E,
    params: &FieldParams,
) -> Result<Vec<FieldElement>, SharingError> {
    if ys.len() != xs.len() {
        return Err(SharingError::Length {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if triples.len() != xs.len() {
        return Err(SharingError::Length {
            expected: xs.len(),
            got: triples.len(),
        });
    }
    let mine: Vec<FieldElement> = xs
        .iter()
        .zip(ys)
        .zip(&triples)
        .flat_map(|((&x, &y), t)| {
            let (d, e) = beaver_open(x, y, t, params);
            [d, e]
        })
        .collect();
    let theirs = exchange.exchange(&mine)?;
    if theirs.len() != mine.len() {
        return Err(SharingError::Length {
            expected: mine.len(),
            got: theirs.len(),
        });
    }
    Ok(triples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let d = params.add(mine[2 * i], theirs[2 * i]);
            let e = params.add(mine[2 * i + 1], theirs[2 * i + 1]);
            beaver_combine(party, d, e, t, params)
        })
        .collect())
}

/// Both parties' sides of a Beaver multiplication run in one place.
pub fn beaver_mul_local(
    x: SharePair,
    y: SharePair,
    triple: &BeaverTriple,
    params: &FieldParams,
) -> SharePair {
    let (tc, ts) = triple.split(0);
    let (dc, ec) = beaver_open(x.client, y.client, &tc, params);
    let (ds, es) = beaver_open(x.server, y.server, &ts, params);
    let d = params.add(dc, ds);
    let e = params.add(ec, es);
    SharePair {
        client: beaver_combine(Party::Client, d, e, &tc, params),
        server: beaver_combine(Party::Server, d, e, &ts, params),
    }
}

/// Items that may each be taken exactly once, shared between threads.
#[derive(Debug)]
pub struct SingleUsePool<T> {
    slots: Mutex<Vec<Option<T>>>,
}

impl<T> SingleUsePool<T> {
    pub fn new(items: Vec<T>) -> Self {
        SingleUsePool {
            slots: Mutex::new(items.into_iter().map(Some).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("pool lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn take(&self, index: usize) -> Result<T, SharingError> {
        let mut slots = self.slots.lock().expect("pool lock");
        match slots.get_mut(index) {
            None => Err(SharingError::Missing(index)),
            Some(slot) => slot.take().ok_or(SharingError::Reused(index)),
        }
    }

    /// Takes `count` consecutive items starting at `start`.
    pub fn take_range(&self, start: usize, count: usize) -> Result<Vec<T>, SharingError> {
        let mut slots = self.slots.lock().expect("pool lock");
        if start + count > slots.len() {
            return Err(SharingError::Missing(start + count - 1));
        }
        if let Some(i) = (start..start + count).find(|&i| slots[i].is_none()) {
            return Err(SharingError::Reused(i));
        }
        Ok((start..start + count)
            .map(|i| slots[i].take().expect("checked above"))
            .collect())
    }

    pub fn into_remaining(self) -> Vec<Option<T>> {
        self.slots.into_inner().expect("pool lock")
    }
}

pub type TriplePool = SingleUsePool<TripleShare>;

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::sync::mpsc::{channel, Receiver, Sender};
    use std::thread;

    fn fp(p: u64) -> FieldParams {
        FieldParams::new(p).unwrap()
    }

    /// In-memory opening exchange for two threads.
    pub(crate) struct ThreadExchange {
        tx: Sender<Vec<FieldElement>>,
        rx: Receiver<Vec<FieldElement>>,
    }

    pub(crate) fn exchange_pair() -> (ThreadExchange, ThreadExchange) {
        let (t1, r1) = channel();
        let (t2, r2) = channel();
        (
            ThreadExchange { tx: t1, rx: r2 },
            ThreadExchange { tx: t2, rx: r1 },
        )
    }

    impl OpenExchange for ThreadExchange {
        fn exchange(&mut self, mine: &[FieldElement]) -> Result<Vec<FieldElement>, SharingError> {
            self.tx
                .send(mine.to_vec())
                .map_err(|e| SharingError::Exchange(e.to_string()))?;
            self.rx
                .recv()
                .map_err(|e| SharingError::Exchange(e.to_string()))
        }
    }

    #[test]
    fn share_examples() {
        let f = fp(257);
        let s = share_with_mask(FieldElement::ZERO, FieldElement::ZERO, &f);
        assert_eq!((s.client.value(), s.server.value()), (0, 0));
        let s = share_with_mask(f.element(10).unwrap(), f.element(250).unwrap(), &f);
        assert_eq!((s.client.value(), s.server.value()), (250, 17));
        assert_eq!(reconstruct(s, &f).value(), 10);
        let x = f.element(99).unwrap();
        let s = SharePair {
            client: FieldElement::ZERO,
            server: x,
        };
        assert_eq!(reconstruct(s, &f), x);
    }

    #[test]
    fn share_round_trip_exhaustive() {
        let f = fp(509);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for x in 0..509 {
                let x = f.element(x).unwrap();
                assert_eq!(reconstruct(share(x, &mut rng, &f), &f), x);
            }
        }
        let f = FieldParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = f.random(&mut rng);
            assert_eq!(reconstruct(share(x, &mut rng, &f), &f), x);
        }
    }

    #[test]
    fn triples_satisfy_product() {
        let f = FieldParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(gen_triples(0, &mut rng, &f).is_empty());
        for t in gen_triples(1000, &mut rng, &f) {
            let a = reconstruct(t.a, &f);
            let b = reconstruct(t.b, &f);
            assert_eq!(reconstruct(t.ab, &f), f.mul(a, b));
        }
    }

    #[test]
    fn triples_from_distinct_seeds_differ() {
        let f = FieldParams::default();
        let mut seen = HashSet::new();
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = gen_triples(1, &mut rng, &f)[0];
            seen.insert(reconstruct(t.a, &f));
        }
        // Birthday bound for 10^4 draws from ~2^31 gives ~0.02 expected collisions.
        assert!(seen.len() >= 9_998);
    }

    #[test]
    fn beaver_local_exhaustive_small_field() {
        let f = fp(509);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for x in 0..509 {
            for y in 0..509 {
                let (x, y) = (f.element(x).unwrap(), f.element(y).unwrap());
                let t = gen_triples(1, &mut rng, &f)[0];
                let z = beaver_mul_local(share(x, &mut rng, &f), share(y, &mut rng, &f), &t, &f);
                assert_eq!(reconstruct(z, &f), f.mul(x, y));
            }
        }
    }

    #[test]
    fn beaver_two_party_threads() {
        let f = FieldParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 10_000;
        let xs: Vec<_> = (0..n).map(|_| f.random(&mut rng)).collect();
        let ys: Vec<_> = (0..n).map(|_| f.random(&mut rng)).collect();
        let xsh: Vec<_> = xs.iter().map(|&x| share(x, &mut rng, &f)).collect();
        let ysh: Vec<_> = ys.iter().map(|&y| share(y, &mut rng, &f)).collect();
        let (tc, ts): (Vec<_>, Vec<_>) = gen_triples(n, &mut rng, &f)
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.split(i as u64))
            .unzip();
        let (mut ec, mut es) = exchange_pair();
        let xc: Vec<_> = xsh.iter().map(|s| s.client).collect();
        let yc: Vec<_> = ysh.iter().map(|s| s.client).collect();
        let client = thread::spawn(move || {
            beaver_mul(
                Party::Client,
                &xc,
                &yc,
                tc,
                &mut ec,
                &FieldParams::default(),
            )
        });
        let xs_s: Vec<_> = xsh.iter().map(|s| s.server).collect();
        let ys_s: Vec<_> = ysh.iter().map(|s| s.server).collect();
        let zs = beaver_mul(Party::Server, &xs_s, &ys_s, ts, &mut es, &f).unwrap();
        let zc = client.join().unwrap().unwrap();
        for i in 0..n {
            let z = f.add(zc[i], zs[i]);
            assert_eq!(z, f.mul(xs[i], ys[i]));
        }
    }

    #[test]
    fn beaver_examples() {
        let f = fp(257);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = gen_triples(1, &mut rng, &f)[0];
            let zero = share(FieldElement::ZERO, &mut rng, &f);
            let y = share(f.random(&mut rng), &mut rng, &f);
            assert_eq!(
                reconstruct(beaver_mul_local(zero, y, &t, &f), &f),
                FieldElement::ZERO
            );
            let three = share(f.element(3).unwrap(), &mut rng, &f);
            let four = share(f.element(4).unwrap(), &mut rng, &f);
            assert_eq!(
                reconstruct(beaver_mul_local(three, four, &t, &f), &f).value(),
                12
            );
        }
    }

    #[test]
    fn pool_rejects_reuse() {
        let f = fp(509);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shares: Vec<_> = gen_triples(4, &mut rng, &f)
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.split(i as u64).0)
            .collect();
        let pool = TriplePool::new(shares);
        assert_eq!(pool.take(1).unwrap().id, 1);
        assert_eq!(pool.take(1), Err(SharingError::Reused(1)));
        assert_eq!(pool.take(9), Err(SharingError::Missing(9)));
        assert_eq!(pool.take_range(0, 3), Err(SharingError::Reused(1)));
        assert_eq!(pool.take_range(2, 2).unwrap().len(), 2);
    }

    /// Wilson-Hilferty approximation of the chi-square quantile.
    fn chi2_quantile(df: f64, z: f64) -> f64 {
        let c = 2.0 / (9.0 * df);
        df * (1.0 - c + z * c.sqrt()).powi(3)
    }

    #[test]
    fn server_share_is_uniform() {
        let f = fp(509);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = f.element(123).unwrap();
        let samples = 1_000_000usize;
        let mut counts = vec![0u64; 509];
        for _ in 0..samples {
            counts[share(x, &mut rng, &f).server.value() as usize] += 1;
        }
        let expected = samples as f64 / 509.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // z_{0.99} = 2.3263
        let critical = chi2_quantile(508.0, 2.3263);
        assert!(stat < critical, "chi2 {stat} >= {critical}");
    }
}
