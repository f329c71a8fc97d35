use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        /// Broker counters shared between the core and the I/O threads.
        #[derive(Debug, Default)]
        pub struct Metrics {
            $(pub $name: AtomicU64,)*
        }

        impl Metrics {
            /// `name value` lines, one per counter.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} {}", stringify!($name), self.$name.load(Ordering::Relaxed));)*
                out
            }

            pub fn snapshot(&self) -> Vec<(&'static str, u64)> {
                vec![$((stringify!($name), self.$name.load(Ordering::Relaxed)),)*]
            }
        }
    };
}

counters!(
    connections_accepted,
    connections_active,
    connections_closed,
    auth_failures,
    sessions_taken_over,
    publishes_received,
    publishes_routed,
    deliveries,
    bytes_received,
    bytes_delivered,
    retained_messages,
    acl_denied_publish,
    acl_denied_subscribe,
    protocol_errors,
    retransmissions,
    queue_drops,
    oversize_drops,
    qos0_backpressure_drops,
    keepalive_timeouts,
    queue_high_water_bytes,
);

impl Metrics {
    pub fn incr(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }

    /// Looks a counter up in rendered text.
    pub fn parse_value(text: &str, name: &str) -> Option<u64> {
        text.lines().find_map(|l| {
            let (k, v) = l.split_once(' ')?;
            (k == name).then(|| v.trim().parse().ok()).flatten()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse() {
        let m = Metrics::default();
        Metrics::add(&m.queue_drops, 7);
        let text = m.render();
        assert_eq!(Metrics::parse_value(&text, "queue_drops"), Some(7));
        assert_eq!(Metrics::parse_value(&text, "deliveries"), Some(0));
        assert_eq!(text.lines().count(), m.snapshot().len());
    }
}
