//! Parameter-server round orchestration for one `(fed, cep)` pair.

use std::collections::BTreeMap;
use std::time::Duration;

use tracing::{debug, info, warn};

use super::{Aggregator, FedAvg, FlError, RoundConfig};
use crate::payload::{Envelope, EnvelopeKind, ParameterSet};
use crate::topic::{Identifier, TopicPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsPhase {
    Idle,
    Broadcasting,
    Collecting,
    Aggregating,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PsEvent {
    Start,
    UpdateReceived {
        client: Identifier,
        round: u32,
        params: ParameterSet,
    },
    /// Forces the current round's deadline to expire.
    Timeout,
    /// Clock advance; fires the deadline when it has passed.
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PsAction {
    Publish {
        topic: TopicPath,
        envelope: Envelope,
        retain: bool,
    },
    /// Persist an aggregated model. The runtime must assign it
    /// `model_version`, which is what the following broadcast announces.
    StoreModel {
        model_version: u32,
        round: u32,
        contributors: Vec<Identifier>,
        body: Vec<u8>,
    },
    Stalled {
        round: u32,
    },
    Finished {
        rounds: u32,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PsStats {
    pub rounds_completed: u32,
    pub duplicate_updates: u64,
    pub discarded_updates: u64,
    pub stalls: u64,
}

pub struct ParameterServer {
    fed: Identifier,
    cep: Identifier,
    config: RoundConfig,
    aggregator: Box<dyn Aggregator>,
    phase: PsPhase,
    round: u32,
    received: BTreeMap<Identifier, ParameterSet>,
    current_global: ParameterSet,
    model_version: u32,
    deadline: Option<Duration>,
    finished: bool,
    resume_round: u32,
    stats: PsStats,
}

impl ParameterServer {
    /// `template` is the initial model; `initial_version` is the latest
    /// version already in the store (0 when empty).
    pub fn new(
        fed: Identifier,
        cep: Identifier,
        config: RoundConfig,
        template: ParameterSet,
        initial_version: u32,
    ) -> Result<Self, FlError> {
        config.validate()?;
        Ok(ParameterServer {
            fed,
            cep,
            config,
            aggregator: Box::new(FedAvg),
            phase: PsPhase::Idle,
            round: 0,
            received: BTreeMap::new(),
            current_global: template,
            model_version: initial_version,
            deadline: None,
            finished: false,
            resume_round: 0,
            stats: PsStats::default(),
        })
    }

    /// Continues a federation whose last stored model came from
    /// `last_round`. Rounds already completed count towards `max_rounds`.
    pub fn resume_after(mut self, last_round: u32) -> Self {
        self.resume_round = last_round;
        self.stats.rounds_completed = last_round;
        self
    }

    pub fn with_aggregator(mut self, aggregator: Box<dyn Aggregator>) -> Self {
        self.aggregator = aggregator;
        self
    }

    pub fn phase(&self) -> PsPhase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn current_global(&self) -> &ParameterSet {
        &self.current_global
    }

    pub fn model_version(&self) -> u32 {
        self.model_version
    }

    pub fn stats(&self) -> &PsStats {
        &self.stats
    }

    pub fn received_clients(&self) -> impl Iterator<Item = &Identifier> {
        self.received.keys()
    }

    pub fn fed(&self) -> &Identifier {
        &self.fed
    }

    pub fn cep(&self) -> &Identifier {
        &self.cep
    }

    pub fn step(&mut self, event: PsEvent, now: Duration) -> Vec<PsAction> {
        let mut actions = Vec::new();
        match event {
            PsEvent::Start => {
                if self.phase != PsPhase::Idle || self.finished {
                    debug!(fed = %self.fed, cep = %self.cep, "start ignored, already running");
                    return actions;
                }
                self.round = self.resume_round + 1;
                if self.stats.rounds_completed >= self.config.max_rounds {
                    self.finish(&mut actions);
                } else {
                    self.broadcast(now, &mut actions);
                }
            }
            PsEvent::UpdateReceived { client, round, params } => {
                self.on_update(client, round, params, now, &mut actions);
            }
            PsEvent::Timeout => {
                if self.phase == PsPhase::Collecting {
                    self.on_deadline(now, &mut actions);
                }
            }
            PsEvent::Tick => {
                if self.phase == PsPhase::Collecting && self.deadline.is_some_and(|d| now >= d) {
                    self.on_deadline(now, &mut actions);
                }
            }
        }
        actions
    }

    /// Re-publishes the current round's model, e.g. after a reconnect
    /// when the broker may have lost its retained copy.
    pub fn rebroadcast(&self) -> Vec<PsAction> {
        if self.round == 0 {
            return Vec::new();
        }
        vec![self.broadcast_action()]
    }

    fn broadcast_action(&self) -> PsAction {
        let kind = if self.model_version == 0 {
            EnvelopeKind::ModelTemplate
        } else {
            EnvelopeKind::GlobalModel
        };
        let envelope = Envelope::new(kind, &self.fed, &self.cep, self.current_global.encode())
            .with_round(self.round)
            .with_version(self.model_version)
            .compressed(self.config.compress);
        PsAction::Publish {
            topic: TopicPath::job_request(&self.fed, &self.cep),
            envelope,
            retain: true,
        }
    }

    fn broadcast(&mut self, now: Duration, actions: &mut Vec<PsAction>) {
        self.phase = PsPhase::Broadcasting;
        actions.push(self.broadcast_action());
        self.deadline = Some(now + self.config.round_timeout);
        self.phase = PsPhase::Collecting;
    }

    fn on_update(
        &mut self,
        client: Identifier,
        round: u32,
        params: ParameterSet,
        now: Duration,
        actions: &mut Vec<PsAction>,
    ) {
        if self.phase != PsPhase::Collecting || round != self.round {
            debug!(%client, round, current = self.round, "discarding update outside the open round");
            self.stats.discarded_updates += 1;
            return;
        }
        if !params.same_layout(&self.current_global) {
            warn!(%client, round, "discarding update with foreign layout");
            self.stats.discarded_updates += 1;
            return;
        }
        if self.received.insert(client, params).is_some() {
            self.stats.duplicate_updates += 1;
        }
        if self.received.len() >= self.config.min_clients {
            self.aggregate(now, actions);
        }
    }

    fn on_deadline(&mut self, now: Duration, actions: &mut Vec<PsAction>) {
        if self.received.is_empty() {
            warn!(fed = %self.fed, cep = %self.cep, round = self.round, "round stalled, no updates");
            self.stats.stalls += 1;
            actions.push(PsAction::Stalled { round: self.round });
            self.broadcast(now, actions);
        } else {
            self.aggregate(now, actions);
        }
    }

    fn aggregate(&mut self, now: Duration, actions: &mut Vec<PsAction>) {
        self.phase = PsPhase::Aggregating;
        let updates = std::mem::take(&mut self.received);
        let global = match self.aggregator.aggregate(&updates) {
            Ok(g) => g,
            Err(e) => {
                // Layouts are checked on receipt, so this only fires for
                // zero total weight; keep the round open.
                warn!(round = self.round, error = %e, "aggregation failed");
                self.stats.discarded_updates += updates.len() as u64;
                self.phase = PsPhase::Collecting;
                return;
            }
        };
        let contributors: Vec<Identifier> = updates.into_keys().collect();
        info!(
            fed = %self.fed,
            cep = %self.cep,
            round = self.round,
            clients = contributors.len(),
            "round aggregated"
        );
        self.model_version += 1;
        actions.push(PsAction::StoreModel {
            model_version: self.model_version,
            round: self.round,
            contributors,
            body: global.encode(),
        });
        self.current_global = global;
        self.stats.rounds_completed += 1;
        self.round += 1;
        if self.stats.rounds_completed >= self.config.max_rounds {
            self.finish(actions);
        } else {
            self.broadcast(now, actions);
        }
    }

    fn finish(&mut self, actions: &mut Vec<PsAction>) {
        // Final model stays retained for late joiners; updates for the
        // announced round are discarded.
        actions.push(self.broadcast_action());
        self.phase = PsPhase::Idle;
        self.deadline = None;
        self.finished = true;
        actions.push(PsAction::Finished {
            rounds: self.stats.rounds_completed,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::logistic::initial_parameters;

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn server(min_clients: usize, max_rounds: u32) -> ParameterServer {
        let config = RoundConfig {
            min_clients,
            max_rounds,
            round_timeout: Duration::from_secs(10),
            ..RoundConfig::default()
        };
        ParameterServer::new(id("f"), id("c"), config, initial_parameters(2), 0).unwrap()
    }

    fn update(v: f64, n: u64) -> ParameterSet {
        initial_parameters(2)
            .with_values(vec![v, v, v])
            .unwrap()
            .with_num_samples(n)
    }

    fn publishes(actions: &[PsAction]) -> Vec<&Envelope> {
        actions
            .iter()
            .filter_map(|a| match a {
                PsAction::Publish { envelope, .. } => Some(envelope),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn start_broadcasts_template() {
        let mut ps = server(3, 5);
        let actions = ps.step(PsEvent::Start, Duration::ZERO);
        let env = publishes(&actions)[0];
        assert_eq!(env.kind, EnvelopeKind::ModelTemplate);
        assert_eq!(env.round, 1);
        assert_eq!(ps.phase(), PsPhase::Collecting);
        match &actions[0] {
            PsAction::Publish { topic, retain, .. } => {
                assert_eq!(topic.render(), "f/c/job_request");
                assert!(retain);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aggregates_when_quorum_reached() {
        let mut ps = server(3, 5);
        ps.step(PsEvent::Start, Duration::ZERO);
        for (c, v) in [("a", 1.0), ("b", 2.0)] {
            let acts = ps.step(
                PsEvent::UpdateReceived {
                    client: id(c),
                    round: 1,
                    params: update(v, 1),
                },
                Duration::ZERO,
            );
            assert!(acts.is_empty());
        }
        let acts = ps.step(
            PsEvent::UpdateReceived {
                client: id("c"),
                round: 1,
                params: update(3.0, 1),
            },
            Duration::ZERO,
        );
        match &acts[0] {
            PsAction::StoreModel {
                model_version,
                round,
                contributors,
                ..
            } => {
                assert_eq!((*model_version, *round), (1, 1));
                assert_eq!(contributors.len(), 3);
            }
            other => panic!("{other:?}"),
        }
        let env = publishes(&acts)[0];
        assert_eq!(env.kind, EnvelopeKind::GlobalModel);
        assert_eq!((env.round, env.model_version), (2, 1));
        assert_eq!(ps.current_global().values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn timeout_with_partial_replies_advances() {
        let mut ps = server(3, 5);
        ps.step(PsEvent::Start, Duration::ZERO);
        ps.step(
            PsEvent::UpdateReceived {
                client: id("a"),
                round: 1,
                params: update(1.0, 1),
            },
            Duration::ZERO,
        );
        ps.step(
            PsEvent::UpdateReceived {
                client: id("b"),
                round: 1,
                params: update(2.0, 1),
            },
            Duration::ZERO,
        );
        assert!(ps.step(PsEvent::Tick, Duration::from_secs(5)).is_empty());
        let acts = ps.step(PsEvent::Tick, Duration::from_secs(10));
        assert!(matches!(&acts[0], PsAction::StoreModel { contributors, .. } if contributors.len() == 2));
        assert_eq!(ps.round(), 2);
    }

    #[test]
    fn timeout_without_updates_republishes() {
        let mut ps = server(1, 5);
        ps.step(PsEvent::Start, Duration::ZERO);
        let acts = ps.step(PsEvent::Timeout, Duration::from_secs(1));
        assert_eq!(acts[0], PsAction::Stalled { round: 1 });
        assert_eq!(publishes(&acts).len(), 1);
        assert_eq!(ps.phase(), PsPhase::Collecting);
        assert_eq!(ps.round(), 1);
        assert_eq!(ps.stats().stalls, 1);
    }

    #[test]
    fn duplicate_update_last_write_wins() {
        let mut ps = server(2, 5);
        ps.step(PsEvent::Start, Duration::ZERO);
        ps.step(
            PsEvent::UpdateReceived {
                client: id("a"),
                round: 1,
                params: update(100.0, 1),
            },
            Duration::ZERO,
        );
        ps.step(
            PsEvent::UpdateReceived {
                client: id("a"),
                round: 1,
                params: update(1.0, 1),
            },
            Duration::ZERO,
        );
        assert_eq!(ps.stats().duplicate_updates, 1);
        let acts = ps.step(
            PsEvent::UpdateReceived {
                client: id("b"),
                round: 1,
                params: update(3.0, 1),
            },
            Duration::ZERO,
        );
        assert!(matches!(&acts[0], PsAction::StoreModel { contributors, .. } if contributors.len() == 2));
        assert_eq!(ps.current_global().values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn stale_and_foreign_updates_discarded() {
        let mut ps = server(1, 5);
        ps.step(PsEvent::Start, Duration::ZERO);
        ps.step(
            PsEvent::UpdateReceived {
                client: id("a"),
                round: 7,
                params: update(1.0, 1),
            },
            Duration::ZERO,
        );
        let wrong = initial_parameters(3).with_num_samples(1);
        ps.step(
            PsEvent::UpdateReceived {
                client: id("a"),
                round: 1,
                params: wrong,
            },
            Duration::ZERO,
        );
        assert_eq!(ps.stats().discarded_updates, 2);
        assert_eq!(ps.round(), 1);
    }

    #[test]
    fn finishes_after_max_rounds() {
        let mut ps = server(1, 2);
        ps.step(PsEvent::Start, Duration::ZERO);
        ps.step(
            PsEvent::UpdateReceived {
                client: id("a"),
                round: 1,
                params: update(1.0, 1),
            },
            Duration::ZERO,
        );
        let acts = ps.step(
            PsEvent::UpdateReceived {
                client: id("a"),
                round: 2,
                params: update(1.0, 1),
            },
            Duration::ZERO,
        );
        assert!(matches!(acts.last(), Some(PsAction::Finished { rounds: 2 })));
        assert!(ps.is_finished());
        assert_eq!(ps.phase(), PsPhase::Idle);
        assert!(ps.step(PsEvent::Start, Duration::ZERO).is_empty());
        assert!(ps.step(PsEvent::Tick, Duration::from_secs(100)).is_empty());
    }
}
