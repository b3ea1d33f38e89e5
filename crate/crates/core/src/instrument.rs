//! Per-thread operation counters used to audit which networks a code path
//! touches.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Extractor,
    Discriminator,
    Separator,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub extractor: u64,
    pub discriminator: u64,
    pub separator: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { extractor: 0, discriminator: 0, separator: 0 }) };
}

pub fn record(op: Op) {
    COUNTS.with(|c| {
        let mut v = c.get();
        match op {
            Op::Extractor => v.extractor += 1,
            Op::Discriminator => v.discriminator += 1,
            Op::Separator => v.separator += 1,
        }
        c.set(v);
    });
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_resets() {
        reset();
        record(Op::Extractor);
        record(Op::Extractor);
        record(Op::Separator);
        let s = snapshot();
        assert_eq!((s.extractor, s.discriminator, s.separator), (2, 0, 1));
        reset();
        assert_eq!(snapshot(), OpCounts::default());
    }
}
