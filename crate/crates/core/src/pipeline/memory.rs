use std::sync::atomic::{AtomicUsize, Ordering};

/// Counts bytes of image buffers the pipeline holds outside the tile cache.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

/// Released when dropped.
#[must_use]
pub struct Charge<'a> {
    meter: &'a MemoryMeter,
    bytes: usize,
}

impl MemoryMeter {
    pub fn charge(&self, bytes: usize) -> Charge<'_> {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
        Charge { meter: self, bytes }
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for Charge<'_> {
    fn drop(&mut self) {
        self.meter.current.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_survives_release() {
        let m = MemoryMeter::default();
        {
            let _a = m.charge(10);
            let _b = m.charge(5);
            assert_eq!(m.current(), 15);
        }
        let _c = m.charge(3);
        assert_eq!((m.current(), m.peak()), (3, 15));
    }
}
