//! Parameter-server and agent nodes independent of the transport. The
//! in-memory simulator and the TCP daemons both drive these, so a seeded
//! run follows the same model trajectory over either.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use tracing::{debug, error, info, warn};

use crate::codec::QoS;
use crate::fl::{
    logistic, Dataset, FlError, ParameterServer, PsAction, PsEvent, RoundConfig, TrainerAction, TrainerEvent,
    TrainingClient,
};
use crate::payload::{encode_download_request, Envelope, EnvelopeKind, ParameterSet};
use crate::store::{handle_model_channel, ModelStore, StoreError};
use crate::topic::{Channel, Identifier, TopicPath};

pub type FedCep = (Identifier, Identifier);

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOutput {
    Publish {
        topic: String,
        payload: Vec<u8>,
        qos: QoS,
        retain: bool,
    },
    Unsubscribe(Vec<String>),
    /// The PS finished every configured round, or the agent left.
    Finished,
}

fn publish(topic: &TopicPath, envelope: &Envelope, qos: QoS, retain: bool) -> NodeOutput {
    NodeOutput::Publish {
        topic: topic.render(),
        payload: envelope.encode(),
        qos,
        retain,
    }
}

/// One [`ParameterServer`] per `(fed, cep)`, plus model persistence and the
/// model request channel.
pub struct PsNode {
    servers: BTreeMap<FedCep, ParameterServer>,
    store: Arc<ModelStore>,
    qos: QoS,
    finished: BTreeMap<FedCep, bool>,
}

impl PsNode {
    /// Resumes from the newest stored model of each pair if there is one,
    /// otherwise starts from the all-zero template of dimension `dim`.
    pub fn new(
        store: Arc<ModelStore>,
        federations: &[FedCep],
        config: RoundConfig,
        dim: usize,
    ) -> Result<Self, NodeError> {
        let mut servers = BTreeMap::new();
        for (fed, cep) in federations {
            let latest = store.list_models(fed, cep)?.pop();
            let (template, version, last_round) = match latest {
                None => (logistic::initial_parameters(dim), 0, 0),
                Some(entry) => {
                    let body = store.fetch_model(fed, cep, entry.model_version)?;
                    let params = ParameterSet::decode(&body).map_err(FlError::from)?;
                    info!(%fed, %cep, version = entry.model_version, round = entry.round, "resuming from stored model");
                    (params, entry.model_version, entry.round)
                }
            };
            let ps = ParameterServer::new(fed.clone(), cep.clone(), config.clone(), template, version)?
                .resume_after(last_round);
            servers.insert((fed.clone(), cep.clone()), ps);
        }
        Ok(PsNode {
            finished: servers.keys().map(|k| (k.clone(), false)).collect(),
            servers,
            store,
            qos: config.qos,
        })
    }

    pub fn subscriptions(&self) -> Vec<(String, QoS)> {
        let mut subs = Vec::new();
        for (fed, cep) in self.servers.keys() {
            subs.push((format!("{fed}/{cep}/{}/#", Channel::JobReply.as_str()), self.qos));
            subs.push((format!("{fed}/{cep}/{}/+", Channel::ModelRequest.as_str()), self.qos));
        }
        subs
    }

    pub fn server(&self, fed: &Identifier, cep: &Identifier) -> Option<&ParameterServer> {
        self.servers.get(&(fed.clone(), cep.clone()))
    }

    pub fn servers(&self) -> impl Iterator<Item = &ParameterServer> {
        self.servers.values()
    }

    pub fn store(&self) -> &Arc<ModelStore> {
        &self.store
    }

    pub fn is_finished(&self) -> bool {
        self.finished.values().all(|f| *f)
    }

    pub fn start(&mut self, now: Duration) -> Vec<NodeOutput> {
        let keys: Vec<FedCep> = self.servers.keys().cloned().collect();
        keys.into_iter()
            .flat_map(|k| self.step(&k, PsEvent::Start, now))
            .collect()
    }

    pub fn tick(&mut self, now: Duration) -> Vec<NodeOutput> {
        let keys: Vec<FedCep> = self.servers.keys().cloned().collect();
        keys.into_iter()
            .flat_map(|k| self.step(&k, PsEvent::Tick, now))
            .collect()
    }

    /// Re-publishes each pair's current model after a reconnect.
    pub fn rebroadcast(&self) -> Vec<NodeOutput> {
        self.servers
            .values()
            .flat_map(|ps| ps.rebroadcast())
            .filter_map(|a| self.publish_action(a))
            .collect()
    }

    pub fn on_message(&mut self, topic: &str, payload: &[u8], now: Duration) -> Vec<NodeOutput> {
        let Ok(path) = TopicPath::parse(topic) else {
            debug!(topic, "ignoring message on foreign topic");
            return Vec::new();
        };
        let key = (path.fed().clone(), path.cep().clone());
        if !self.servers.contains_key(&key) {
            return Vec::new();
        }
        match path.channel() {
            Channel::ModelRequest => handle_model_channel(&self.store, &path, payload)
                .map(|(t, env)| publish(&t, &env, self.qos, false))
                .into_iter()
                .collect(),
            Channel::JobReply => {
                let client = path.client().expect("per-client channel").clone();
                let update = Envelope::decode(payload).and_then(|env| {
                    if env.kind != EnvelopeKind::LocalUpdate {
                        return Err(crate::payload::PayloadError::WrongKind(env.kind));
                    }
                    Ok((env.round, env.parameters()?))
                });
                match update {
                    Ok((round, params)) => self.step(&key, PsEvent::UpdateReceived { client, round, params }, now),
                    Err(e) => {
                        warn!(%client, error = %e, "discarding malformed update");
                        Vec::new()
                    }
                }
            }
            _ => Vec::new(),
        }
    }

    fn step(&mut self, key: &FedCep, event: PsEvent, now: Duration) -> Vec<NodeOutput> {
        let ps = self.servers.get_mut(key).expect("known pair");
        let actions = ps.step(event, now);
        let mut out = Vec::new();
        for action in actions {
            match action {
                PsAction::StoreModel {
                    model_version,
                    round,
                    contributors,
                    body,
                } => match self.store.store_model(&key.0, &key.1, round, &contributors, &body) {
                    Ok(rec) if rec.model_version == model_version => {}
                    Ok(rec) => error!(
                        expected = model_version,
                        stored = rec.model_version,
                        "model store version diverged from round state"
                    ),
                    Err(e) => error!(error = %e, round, "failed to persist model"),
                },
                PsAction::Finished { rounds } => {
                    info!(fed = %key.0, cep = %key.1, rounds, "federation finished");
                    self.finished.insert(key.clone(), true);
                    if self.is_finished() {
                        out.push(NodeOutput::Finished);
                    }
                }
                PsAction::Stalled { round } => warn!(fed = %key.0, cep = %key.1, round, "round stalled"),
                other => out.extend(self.publish_action(other)),
            }
        }
        out
    }

    fn publish_action(&self, action: PsAction) -> Option<NodeOutput> {
        match action {
            PsAction::Publish {
                topic,
                envelope,
                retain,
            } => Some(publish(&topic, &envelope, self.qos, retain)),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fl(#[from] FlError),
}

/// A clinical client: trains on its local shard whenever a new model is
/// announced for one of its federations.
pub struct AgentNode {
    client: Identifier,
    trainers: BTreeMap<FedCep, TrainingClient>,
    qos: QoS,
    leave_after_round: Option<u32>,
    left: bool,
    replies: Vec<(TopicPath, Envelope)>,
}

impl AgentNode {
    pub fn new(
        client: Identifier,
        federations: &[FedCep],
        data: Dataset,
        local_epochs: u32,
        learning_rate: f64,
        qos: QoS,
        compress: bool,
    ) -> Self {
        let trainers = federations
            .iter()
            .map(|(fed, cep)| {
                let t = TrainingClient::new(
                    fed.clone(),
                    cep.clone(),
                    client.clone(),
                    data.clone(),
                    local_epochs,
                    learning_rate,
                )
                .with_compression(compress);
                ((fed.clone(), cep.clone()), t)
            })
            .collect();
        AgentNode {
            client,
            trainers,
            qos,
            leave_after_round: None,
            left: false,
            replies: Vec::new(),
        }
    }

    /// Leave instead of training once a round after `round` is announced.
    pub fn leave_after(mut self, round: Option<u32>) -> Self {
        self.leave_after_round = round;
        self
    }

    pub fn client_id(&self) -> &Identifier {
        &self.client
    }

    pub fn has_left(&self) -> bool {
        self.left
    }

    pub fn trainer(&self, fed: &Identifier, cep: &Identifier) -> Option<&TrainingClient> {
        self.trainers.get(&(fed.clone(), cep.clone()))
    }

    pub fn subscriptions(&self) -> Vec<(String, QoS)> {
        let mut subs = Vec::new();
        for (fed, cep) in self.trainers.keys() {
            subs.push((TopicPath::job_request(fed, cep).render(), self.qos));
            subs.push((TopicPath::model_reply(fed, cep, &self.client).render(), self.qos));
        }
        subs
    }

    /// Model-channel replies received so far.
    pub fn take_replies(&mut self) -> Vec<(TopicPath, Envelope)> {
        std::mem::take(&mut self.replies)
    }

    pub fn request_model_list(&self, fed: &Identifier, cep: &Identifier) -> NodeOutput {
        let env = Envelope::new(EnvelopeKind::ModelListRequest, fed, cep, Vec::new()).with_client(&self.client);
        publish(&TopicPath::model_request(fed, cep, &self.client), &env, self.qos, false)
    }

    pub fn request_model(&self, fed: &Identifier, cep: &Identifier, version: u32) -> NodeOutput {
        let env = Envelope::new(
            EnvelopeKind::ModelDownloadRequest,
            fed,
            cep,
            encode_download_request(version),
        )
        .with_client(&self.client);
        publish(&TopicPath::model_request(fed, cep, &self.client), &env, self.qos, false)
    }

    pub fn on_message(&mut self, topic: &str, payload: &[u8]) -> Vec<NodeOutput> {
        if self.left {
            return Vec::new();
        }
        let Ok(path) = TopicPath::parse(topic) else {
            return Vec::new();
        };
        let key = (path.fed().clone(), path.cep().clone());
        let envelope = match Envelope::decode(payload) {
            Ok(e) => e,
            Err(e) => {
                warn!(topic, error = %e, "undecodable message");
                return Vec::new();
            }
        };
        match path.channel() {
            Channel::ModelReply => {
                self.replies.push((path, envelope));
                Vec::new()
            }
            Channel::JobRequest => {
                if !matches!(envelope.kind, EnvelopeKind::ModelTemplate | EnvelopeKind::GlobalModel) {
                    return Vec::new();
                }
                if self.leave_after_round.is_some_and(|r| envelope.round > r) {
                    return self.leave();
                }
                let params = match envelope.parameters() {
                    Ok(p) => p,
                    Err(e) => {
                        warn!(topic, error = %e, "undecodable model");
                        return Vec::new();
                    }
                };
                let Some(trainer) = self.trainers.get_mut(&key) else {
                    return Vec::new();
                };
                let event = TrainerEvent::TemplateReceived {
                    round: envelope.round,
                    model_version: envelope.model_version,
                    params,
                };
                match trainer.step_inline(event) {
                    Ok(actions) => self.convert(actions),
                    Err(e) => {
                        debug!(client = %self.client, error = %e, "template ignored");
                        Vec::new()
                    }
                }
            }
            _ => Vec::new(),
        }
    }

    /// Unsubscribes from every federation's job channel.
    pub fn leave(&mut self) -> Vec<NodeOutput> {
        if self.left {
            return Vec::new();
        }
        info!(client = %self.client, "leaving federation");
        let mut out = Vec::new();
        let keys: Vec<FedCep> = self.trainers.keys().cloned().collect();
        for k in keys {
            let actions = self
                .trainers
                .get_mut(&k)
                .expect("listed")
                .step(TrainerEvent::Leave)
                .unwrap_or_default();
            out.extend(self.convert(actions));
        }
        self.left = true;
        out.push(NodeOutput::Finished);
        out
    }

    fn convert(&self, actions: Vec<TrainerAction>) -> Vec<NodeOutput> {
        actions
            .into_iter()
            .filter_map(|a| match a {
                TrainerAction::Publish { topic, envelope } => Some(publish(&topic, &envelope, self.qos, false)),
                TrainerAction::Unsubscribe { filter } => Some(NodeOutput::Unsubscribe(vec![filter.to_string()])),
                TrainerAction::Train { .. } | TrainerAction::Halt => None,
            })
            .collect()
    }
}
