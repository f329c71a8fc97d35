//! Client-side training state machine.

use super::{logistic, Dataset, FlError};
use crate::payload::{Envelope, EnvelopeKind, ParameterSet};
use crate::topic::{Identifier, TopicFilter, TopicPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerPhase {
    WaitingTemplate,
    Training,
    Publishing,
    Left,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainerEvent {
    TemplateReceived {
        round: u32,
        model_version: u32,
        params: ParameterSet,
    },
    TrainingDone {
        round: u32,
        params: ParameterSet,
    },
    Leave,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainerAction {
    /// Run [`TrainingClient::train`] on these parameters and feed back
    /// `TrainingDone` with the same round.
    Train {
        round: u32,
        params: ParameterSet,
    },
    Publish {
        topic: TopicPath,
        envelope: Envelope,
    },
    Unsubscribe {
        filter: TopicFilter,
    },
    Halt,
}

pub struct TrainingClient {
    fed: Identifier,
    cep: Identifier,
    client: Identifier,
    phase: TrainerPhase,
    data: Dataset,
    current_params: Option<ParameterSet>,
    last_round: Option<u32>,
    base_version: u32,
    local_epochs: u32,
    learning_rate: f64,
    compress: bool,
    stale_templates: u64,
    updates_sent: u64,
}

impl TrainingClient {
    pub fn new(
        fed: Identifier,
        cep: Identifier,
        client: Identifier,
        data: Dataset,
        local_epochs: u32,
        learning_rate: f64,
    ) -> Self {
        TrainingClient {
            fed,
            cep,
            client,
            phase: TrainerPhase::WaitingTemplate,
            data,
            current_params: None,
            last_round: None,
            base_version: 0,
            local_epochs,
            learning_rate,
            compress: false,
            stale_templates: 0,
            updates_sent: 0,
        }
    }

    pub fn with_compression(mut self, on: bool) -> Self {
        self.compress = on;
        self
    }

    pub fn phase(&self) -> TrainerPhase {
        self.phase
    }

    pub fn last_round(&self) -> Option<u32> {
        self.last_round
    }

    pub fn current_params(&self) -> Option<&ParameterSet> {
        self.current_params.as_ref()
    }

    pub fn stale_templates(&self) -> u64 {
        self.stale_templates
    }

    pub fn updates_sent(&self) -> u64 {
        self.updates_sent
    }

    pub fn client_id(&self) -> &Identifier {
        &self.client
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Local gradient descent on this client's shard.
    pub fn train(&self, params: &ParameterSet) -> Result<ParameterSet, FlError> {
        logistic::local_train(params, &self.data, self.local_epochs, self.learning_rate)
    }

    /// A template for an older round than one already seen is rejected
    /// with `StaleRound`. The same round again (a re-broadcast) is
    /// retrained, since the PS only re-broadcasts when it has no update.
    pub fn step(&mut self, event: TrainerEvent) -> Result<Vec<TrainerAction>, FlError> {
        if self.phase == TrainerPhase::Left {
            return Ok(Vec::new());
        }
        match event {
            TrainerEvent::TemplateReceived {
                round,
                model_version,
                params,
            } => {
                if let Some(last) = self.last_round {
                    if round < last {
                        self.stale_templates += 1;
                        return Err(FlError::StaleRound { got: round, last });
                    }
                }
                self.last_round = Some(round);
                self.base_version = model_version;
                self.current_params = Some(params.clone());
                self.phase = TrainerPhase::Training;
                Ok(vec![TrainerAction::Train { round, params }])
            }
            TrainerEvent::TrainingDone { round, params } => {
                if self.phase != TrainerPhase::Training || self.last_round != Some(round) {
                    // superseded by a newer template while training
                    return Ok(Vec::new());
                }
                self.phase = TrainerPhase::Publishing;
                let envelope = Envelope::new(EnvelopeKind::LocalUpdate, &self.fed, &self.cep, params.encode())
                    .with_client(&self.client)
                    .with_round(round)
                    .with_version(self.base_version)
                    .compressed(self.compress);
                self.current_params = Some(params);
                self.updates_sent += 1;
                self.phase = TrainerPhase::WaitingTemplate;
                Ok(vec![TrainerAction::Publish {
                    topic: TopicPath::job_reply(&self.fed, &self.cep, &self.client),
                    envelope,
                }])
            }
            TrainerEvent::Leave => {
                self.phase = TrainerPhase::Left;
                Ok(vec![
                    TrainerAction::Unsubscribe {
                        filter: TopicFilter::exact(&TopicPath::job_request(&self.fed, &self.cep)),
                    },
                    TrainerAction::Halt,
                ])
            }
        }
    }

    /// Steps `event` and runs any resulting training inline, returning the
    /// actions that need I/O.
    pub fn step_inline(&mut self, event: TrainerEvent) -> Result<Vec<TrainerAction>, FlError> {
        let mut out = Vec::new();
        let mut pending = self.step(event)?;
        while let Some(action) = pending.pop() {
            match action {
                TrainerAction::Train { round, params } => {
                    let trained = self.train(&params)?;
                    pending.extend(self.step(TrainerEvent::TrainingDone { round, params: trained })?);
                }
                other => out.push(other),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::{logistic::initial_parameters, synth_dataset};

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn client() -> TrainingClient {
        TrainingClient::new(id("f"), id("c"), id("k"), synth_dataset(1, 20, 2, 3.0), 2, 0.1)
    }

    fn template(round: u32) -> TrainerEvent {
        TrainerEvent::TemplateReceived {
            round,
            model_version: round - 1,
            params: initial_parameters(2),
        }
    }

    #[test]
    fn template_then_done_publishes_tagged_update() {
        let mut c = client();
        let acts = c.step(template(5)).unwrap();
        assert_eq!(c.phase(), TrainerPhase::Training);
        let TrainerAction::Train { round, params } = &acts[0] else {
            panic!()
        };
        assert_eq!(*round, 5);
        let trained = c.train(params).unwrap();
        assert_eq!(trained.num_samples(), 20);
        let acts = c
            .step(TrainerEvent::TrainingDone {
                round: 5,
                params: trained,
            })
            .unwrap();
        let TrainerAction::Publish { topic, envelope } = &acts[0] else {
            panic!()
        };
        assert_eq!(topic.render(), "f/c/job_replies/k");
        assert_eq!(envelope.round, 5);
        assert_eq!(envelope.kind, EnvelopeKind::LocalUpdate);
        assert_eq!(envelope.client.as_ref(), Some(&id("k")));
        assert_eq!(c.phase(), TrainerPhase::WaitingTemplate);
    }

    #[test]
    fn stale_template_ignored() {
        let mut c = client();
        c.step_inline(template(5)).unwrap();
        assert_eq!(c.step(template(3)), Err(FlError::StaleRound { got: 3, last: 5 }));
        assert_eq!(c.stale_templates(), 1);
        assert_eq!(c.last_round(), Some(5));
        // a re-broadcast of the current round is retrained
        assert_eq!(c.step_inline(template(5)).unwrap().len(), 1);
    }

    #[test]
    fn superseded_training_result_dropped() {
        let mut c = client();
        c.step(template(2)).unwrap();
        c.step(template(3)).unwrap();
        let acts = c
            .step(TrainerEvent::TrainingDone {
                round: 2,
                params: initial_parameters(2),
            })
            .unwrap();
        assert!(acts.is_empty());
    }

    #[test]
    fn leave_unsubscribes_and_halts() {
        let mut c = client();
        let acts = c.step(TrainerEvent::Leave).unwrap();
        assert_eq!(
            acts,
            vec![
                TrainerAction::Unsubscribe {
                    filter: TopicFilter::parse("f/c/job_request").unwrap()
                },
                TrainerAction::Halt
            ]
        );
        assert_eq!(c.phase(), TrainerPhase::Left);
        assert!(c.step(template(9)).unwrap().is_empty());
    }
}
