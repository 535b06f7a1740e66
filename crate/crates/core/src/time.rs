//! Virtual time. All timestamps and durations in the workspace are integer
//! milliseconds; nothing below the CLI edge ever consults a wall clock.

/// Milliseconds since an arbitrary epoch (simulation start, or Unix epoch at
/// the service edge).
pub type Millis = u64;

pub const SECOND: Millis = 1_000;
pub const MINUTE: Millis = 60 * SECOND;
pub const HOUR: Millis = 60 * MINUTE;
pub const DAY: Millis = 24 * HOUR;

/// How long an undelivered push is retained before the transport gives up.
pub const PUSH_TTL: Millis = 60 * SECOND;
/// Contact registrations expire this long after their last refresh.
pub const REGISTRATION_LIFETIME: Millis = 30 * DAY;
/// An unanswered inbound invite stops ringing after this long.
pub const RING_TIMEOUT: Millis = 60 * SECOND;
/// An outbound invite with no accept gives up after this long.
pub const INVITE_TIMEOUT: Millis = 60 * SECOND;
/// Terminal invite records linger this long to absorb late duplicates.
pub const LINGER: Millis = 5 * SECOND;
/// Email-mode signaling blobs older than this are rejected on paste.
pub const EMAIL_EXPIRY: Millis = 120 * SECOND;
/// A stream negotiation with no answer is retried after this long.
pub const NEGOTIATION_TIMEOUT: Millis = 10 * SECOND;
/// Default validity window for session descriptors.
pub const DESCRIPTOR_VALIDITY: Millis = 120 * SECOND;

/// A monotonically advancing virtual clock. Time moves only when the owner
/// explicitly advances it, which is what makes simulation runs replayable.
#[derive(Clone, Debug, Default)]
pub struct VirtualClock {
    now: Millis,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self { now: 0 }
    }

    pub fn starting_at(now: Millis) -> Self {
        Self { now }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn advance(&mut self, delta: Millis) -> Millis {
        self.now += delta;
        self.now
    }

    /// Jump directly to an absolute instant. Never moves backwards.
    pub fn advance_to(&mut self, at: Millis) -> Millis {
        self.now = self.now.max(at);
        self.now
    }
}
