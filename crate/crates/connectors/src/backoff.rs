/// Reconnect schedule: a fixed number of attempts, doubling from a base delay.
#[derive(Debug, Clone)]
pub struct Backoff {
    base_ms: u64,
    max_attempts: u32,
    made: u32,
}

pub const RECONNECT_BASE_MS: u64 = 500;
pub const RECONNECT_ATTEMPTS: u32 = 3;

impl Default for Backoff {
    fn default() -> Self {
        Self::new(RECONNECT_BASE_MS, RECONNECT_ATTEMPTS)
    }
}

impl Backoff {
    pub fn new(base_ms: u64, max_attempts: u32) -> Self {
        Self {
            base_ms,
            max_attempts,
            made: 0,
        }
    }

    /// Delay before the next attempt, or `None` once the budget is spent.
    pub fn next_delay(&mut self) -> Option<u64> {
        if self.made >= self.max_attempts {
            return None;
        }
        let d = self.base_ms << self.made;
        self.made += 1;
        Some(d)
    }

    pub fn attempts(&self) -> u32 {
        self.made
    }

    pub fn reset(&mut self) {
        self.made = 0;
    }

    /// Worst-case time from loss to the last attempt.
    pub fn budget_ms(&self) -> u64 {
        (0..self.max_attempts).map(|i| self.base_ms << i).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_from_half_a_second_three_times() {
        let mut b = Backoff::default();
        assert_eq!(b.next_delay(), Some(500));
        assert_eq!(b.next_delay(), Some(1000));
        assert_eq!(b.next_delay(), Some(2000));
        assert_eq!(b.next_delay(), None);
        assert_eq!(b.budget_ms(), 3500);
        b.reset();
        assert_eq!(b.next_delay(), Some(500));
    }
}
