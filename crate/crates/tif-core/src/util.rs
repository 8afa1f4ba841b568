//! Small shared utilities: input fingerprinting, bounded worker pools and
//! deterministic sub-seed derivation.

/// FNV-1a 64-bit. Used to fingerprint configs and datasets in run manifests
/// and to derive independent RNG streams; not cryptographic.
pub struct Fnv64(u64);

impl Fnv64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fnv64(Self::OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
        self
    }

    pub fn update_u64(&mut self, v: u64) -> &mut Self {
        self.update(&v.to_le_bytes())
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    Fnv64::new().update(bytes).finish()
}

/// Derives an independent RNG seed from a base seed and a stream tag, so that
/// e.g. each generated month or each attribution run has its own stream and
/// results do not depend on evaluation order.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Fnv64::new();
    h.update_u64(base).update(tag.as_bytes()).update_u64(index);
    h.finish()
}

/// Worker cap for embarrassingly parallel evaluation loops. Reads
/// `TIF_THREADS`; defaults to the machine's available parallelism.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("TIF_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Runs `f(0..n)` on up to [`worker_threads`] OS threads and returns results
/// in index order. Each call must be independent of the others; the output is
/// identical for any thread count.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ptr = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                let mut guard = slots_ptr.lock().expect("worker panicked");
                guard[i] = Some(value);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}
