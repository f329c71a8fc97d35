//! Control-plane topic namespace.
//!
//! Four channels hang off every `fed/cep` pair:
//!
//! ```text
//! {fed}/{cep}/job_request                 PS -> all clients (templates, global models)
//! {fed}/{cep}/job_replies/{client}        client -> PS (local updates)
//! {fed}/{cep}/model_request/{client}      client -> PS (model list / download)
//! {fed}/{cep}/model_reply/{client}        PS -> client
//! ```
//!
//! Filters follow the usual MQTT wildcard rules and are shared between
//! subscription routing and ACL evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_IDENTIFIER_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("invalid identifier {0:?}: expected 1-64 chars of [A-Za-z0-9_-]")]
    InvalidIdentifier(String),
    #[error("malformed topic {topic:?}: {reason}")]
    MalformedTopic { topic: String, reason: &'static str },
    #[error("malformed topic filter {filter:?}: {reason}")]
    MalformedFilter { filter: String, reason: &'static str },
    #[error("unknown acl action {0:?}")]
    UnknownAction(String),
}

/// Federation, CEP or client token. Safe to embed as a single topic level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Identifier(String);

impl Identifier {
    pub fn new(value: impl Into<String>) -> Result<Self, TopicError> {
        let value = value.into();
        if is_identifier(&value) {
            Ok(Identifier(value))
        } else {
            Err(TopicError::InvalidIdentifier(value))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_IDENTIFIER_LEN
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl TryFrom<String> for Identifier {
    type Error = TopicError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Identifier::new(value)
    }
}

impl From<Identifier> for String {
    fn from(id: Identifier) -> Self {
        id.0
    }
}

impl FromStr for Identifier {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Identifier::new(s)
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Identifier {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    JobRequest,
    JobReply,
    ModelRequest,
    ModelReply,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::JobRequest,
        Channel::JobReply,
        Channel::ModelRequest,
        Channel::ModelReply,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::JobRequest => "job_request",
            Channel::JobReply => "job_replies",
            Channel::ModelRequest => "model_request",
            Channel::ModelReply => "model_reply",
        }
    }

    fn from_word(word: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.as_str() == word)
    }

    /// Every channel except `job_request` is addressed to one client.
    pub fn is_per_client(self) -> bool {
        self != Channel::JobRequest
    }
}

/// A concrete control-plane topic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicPath {
    channel: Channel,
    fed: Identifier,
    cep: Identifier,
    client: Option<Identifier>,
}

impl TopicPath {
    pub fn job_request(fed: &Identifier, cep: &Identifier) -> Self {
        TopicPath {
            channel: Channel::JobRequest,
            fed: fed.clone(),
            cep: cep.clone(),
            client: None,
        }
    }

    pub fn job_reply(fed: &Identifier, cep: &Identifier, client: &Identifier) -> Self {
        Self::per_client(Channel::JobReply, fed, cep, client)
    }

    pub fn model_request(fed: &Identifier, cep: &Identifier, client: &Identifier) -> Self {
        Self::per_client(Channel::ModelRequest, fed, cep, client)
    }

    pub fn model_reply(fed: &Identifier, cep: &Identifier, client: &Identifier) -> Self {
        Self::per_client(Channel::ModelReply, fed, cep, client)
    }

    /// Builds a path for any channel; `client` must be present exactly when
    /// the channel is per-client.
    pub fn new(channel: Channel, fed: Identifier, cep: Identifier, client: Option<Identifier>) -> Option<Self> {
        if channel.is_per_client() != client.is_some() {
            return None;
        }
        Some(TopicPath {
            channel,
            fed,
            cep,
            client,
        })
    }

    fn per_client(channel: Channel, fed: &Identifier, cep: &Identifier, client: &Identifier) -> Self {
        TopicPath {
            channel,
            fed: fed.clone(),
            cep: cep.clone(),
            client: Some(client.clone()),
        }
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn fed(&self) -> &Identifier {
        &self.fed
    }

    pub fn cep(&self) -> &Identifier {
        &self.cep
    }

    pub fn client(&self) -> Option<&Identifier> {
        self.client.as_ref()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}/{}/{}", self.fed, self.cep, self.channel.as_str());
        if let Some(client) = &self.client {
            out.push('/');
            out.push_str(client.as_str());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TopicError> {
        let malformed = |reason| TopicError::MalformedTopic {
            topic: text.to_string(),
            reason,
        };
        let segments: Vec<&str> = text.split('/').collect();
        if segments.len() < 3 {
            return Err(malformed("too few segments"));
        }
        let channel = Channel::from_word(segments[2]).ok_or_else(|| malformed("unknown channel"))?;
        let expected = if channel.is_per_client() { 4 } else { 3 };
        if segments.len() != expected {
            return Err(malformed("wrong segment count for channel"));
        }
        let ident = |s: &str| Identifier::new(s).map_err(|_| malformed("invalid identifier"));
        let fed = ident(segments[0])?;
        let cep = ident(segments[1])?;
        let client = if channel.is_per_client() {
            Some(ident(segments[3])?)
        } else {
            None
        };
        Ok(TopicPath {
            channel,
            fed,
            cep,
            client,
        })
    }
}

impl fmt::Display for TopicPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for TopicPath {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicPath::parse(s)
    }
}

/// Checks that `topic` is usable as a publish topic: non-empty, no
/// wildcards, no NUL.
pub fn is_valid_topic_name(topic: &str) -> bool {
    !topic.is_empty() && !topic.contains(['+', '#', '\0'])
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FilterToken {
    Literal(String),
    /// `+`
    SingleLevel,
    /// `#`
    MultiLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    tokens: Vec<FilterToken>,
}

impl TopicFilter {
    pub fn parse(text: &str) -> Result<Self, TopicError> {
        let malformed = |reason| TopicError::MalformedFilter {
            filter: text.to_string(),
            reason,
        };
        if text.is_empty() {
            return Err(malformed("empty filter"));
        }
        let segments: Vec<&str> = text.split('/').collect();
        let last = segments.len() - 1;
        let mut tokens = Vec::with_capacity(segments.len());
        for (i, seg) in segments.iter().enumerate() {
            let token = match *seg {
                "" => return Err(malformed("empty segment")),
                "+" => FilterToken::SingleLevel,
                "#" if i == last => FilterToken::MultiLevel,
                "#" => return Err(malformed("'#' must be the last segment")),
                s if s.contains(['+', '#', '\0']) => return Err(malformed("wildcard must occupy a whole segment")),
                s => FilterToken::Literal(s.to_string()),
            };
            tokens.push(token);
        }
        Ok(TopicFilter { tokens })
    }

    /// Filter matching exactly one concrete topic.
    pub fn exact(path: &TopicPath) -> Self {
        TopicFilter::parse(&path.render()).expect("rendered paths are valid filters")
    }

    pub fn tokens(&self) -> &[FilterToken] {
        &self.tokens
    }

    pub fn has_wildcards(&self) -> bool {
        self.tokens.iter().any(|t| !matches!(t, FilterToken::Literal(_)))
    }

    /// Does this filter match the literal topic name?
    pub fn matches(&self, topic: &str) -> bool {
        let mut levels = topic.split('/');
        for token in &self.tokens {
            match token {
                FilterToken::MultiLevel => return true,
                FilterToken::SingleLevel => {
                    if levels.next().is_none() {
                        return false;
                    }
                }
                FilterToken::Literal(lit) => match levels.next() {
                    Some(level) if level == lit => {}
                    _ => return false,
                },
            }
        }
        levels.next().is_none()
    }

    /// True iff every topic matched by `other` is also matched by `self`.
    /// Used to authorize subscriptions, which are themselves filters.
    pub fn covers(&self, other: &TopicFilter) -> bool {
        let mut theirs = other.tokens.iter();
        for mine in &self.tokens {
            match mine {
                FilterToken::MultiLevel => return true,
                FilterToken::SingleLevel => match theirs.next() {
                    Some(FilterToken::Literal(_)) | Some(FilterToken::SingleLevel) => {}
                    _ => return false,
                },
                FilterToken::Literal(lit) => match theirs.next() {
                    Some(FilterToken::Literal(l)) if l == lit => {}
                    _ => return false,
                },
            }
        }
        theirs.next().is_none()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, token) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            match token {
                FilterToken::Literal(s) => f.write_str(s)?,
                FilterToken::SingleLevel => f.write_str("+")?,
                FilterToken::MultiLevel => f.write_str("#")?,
            }
        }
        Ok(())
    }
}

impl FromStr for TopicFilter {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Publish,
    Subscribe,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Publish => "publish",
            Action::Subscribe => "subscribe",
        }
    }
}

impl FromStr for Action {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "publish" => Ok(Action::Publish),
            "subscribe" => Ok(Action::Subscribe),
            other => Err(TopicError::UnknownAction(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AclRule {
    pub action: Action,
    pub filter: TopicFilter,
}

impl AclRule {
    pub fn new(action: Action, filter: TopicFilter) -> Self {
        AclRule { action, filter }
    }

    pub fn publish(filter: &str) -> Result<Self, TopicError> {
        Ok(AclRule::new(Action::Publish, TopicFilter::parse(filter)?))
    }

    pub fn subscribe(filter: &str) -> Result<Self, TopicError> {
        Ok(AclRule::new(Action::Subscribe, TopicFilter::parse(filter)?))
    }
}

/// Default-deny check of a literal topic against a rule list.
pub fn authorize(rules: &[AclRule], action: Action, topic: &str) -> bool {
    rules.iter().any(|r| r.action == action && r.filter.matches(topic))
}

/// Default-deny check of a subscription filter: some rule must cover every
/// topic the filter could match.
pub fn authorize_filter(rules: &[AclRule], action: Action, filter: &TopicFilter) -> bool {
    rules.iter().any(|r| r.action == action && r.filter.covers(filter))
}

/// Permissions issued to an enrolled clinical client for its federations.
pub fn canonical_client_acl(client: &Identifier, federations: &[(Identifier, Identifier)]) -> Vec<AclRule> {
    let mut rules = Vec::with_capacity(federations.len() * 4);
    for (fed, cep) in federations {
        let exact = |p: TopicPath| TopicFilter::exact(&p);
        rules.push(AclRule::new(Action::Subscribe, exact(TopicPath::job_request(fed, cep))));
        rules.push(AclRule::new(
            Action::Publish,
            exact(TopicPath::job_reply(fed, cep, client)),
        ));
        rules.push(AclRule::new(
            Action::Publish,
            exact(TopicPath::model_request(fed, cep, client)),
        ));
        rules.push(AclRule::new(
            Action::Subscribe,
            exact(TopicPath::model_reply(fed, cep, client)),
        ));
    }
    rules
}

/// Permissions for the parameter server of the given federations.
pub fn canonical_ps_acl(federations: &[(Identifier, Identifier)]) -> Vec<AclRule> {
    let mut rules = Vec::with_capacity(federations.len() * 4);
    for (fed, cep) in federations {
        let rule = |action, channel: Channel, tail: &str| {
            let text = format!("{fed}/{cep}/{}{tail}", channel.as_str());
            AclRule::new(action, TopicFilter::parse(&text).expect("static filter"))
        };
        rules.push(rule(Action::Publish, Channel::JobRequest, ""));
        rules.push(rule(Action::Subscribe, Channel::JobReply, "/#"));
        rules.push(rule(Action::Subscribe, Channel::ModelRequest, "/+"));
        rules.push(rule(Action::Publish, Channel::ModelReply, "/+"));
    }
    rules
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    #[test]
    fn render_channels() {
        let (f, c, k) = (id("f"), id("c"), id("k"));
        assert_eq!(
            TopicPath::job_request(&id("fed1"), &id("cep1")).render(),
            "fed1/cep1/job_request"
        );
        assert_eq!(TopicPath::job_reply(&f, &c, &k).render(), "f/c/job_replies/k");
        assert_eq!(TopicPath::model_reply(&f, &c, &k).render(), "f/c/model_reply/k");
        assert_eq!(TopicPath::model_request(&f, &c, &k).render(), "f/c/model_request/k");
    }

    #[test]
    fn parse_rejects_bad_shapes() {
        let p = TopicPath::parse("fed1/cep1/job_request").unwrap();
        assert_eq!(p.channel(), Channel::JobRequest);
        assert_eq!(p.fed().as_str(), "fed1");
        assert!(p.client().is_none());

        for bad in [
            "a/b/job_replies",
            "a/b/unknown_chan/c",
            "a/b/job_request/c",
            "a/b",
            "a//job_request",
            "a/b c/job_request",
            "a/b/model_reply/+",
            "",
        ] {
            assert!(
                matches!(TopicPath::parse(bad), Err(TopicError::MalformedTopic { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn identifier_rules() {
        assert!(Identifier::new("clinic-A_01").is_ok());
        assert!(Identifier::new("").is_err());
        assert!(Identifier::new("a/b").is_err());
        assert!(Identifier::new("a+").is_err());
        assert!(Identifier::new("#").is_err());
        assert!(Identifier::new("x".repeat(64)).is_ok());
        assert!(Identifier::new("x".repeat(65)).is_err());
        assert!(Identifier::new("café").is_err());
    }

    #[test]
    fn filter_parse() {
        assert!(TopicFilter::parse("a/#").is_ok());
        assert!(TopicFilter::parse("#").is_ok());
        assert!(TopicFilter::parse("+/+").is_ok());
        assert!(TopicFilter::parse("a/#/b").is_err());
        assert!(TopicFilter::parse("a//b").is_err());
        assert!(TopicFilter::parse("").is_err());
        assert!(TopicFilter::parse("a/b#").is_err());
        assert!(TopicFilter::parse("a/+b").is_err());
        assert_eq!(TopicFilter::parse("f/+/x/#").unwrap().to_string(), "f/+/x/#");
    }

    #[test]
    fn wildcard_matching() {
        let ps = TopicFilter::parse("f/c/job_replies/#").unwrap();
        assert!(ps.matches("f/c/job_replies/clientA"));
        assert!(!ps.matches("f/c/job_request"));
        // '#' also matches the parent level
        assert!(ps.matches("f/c/job_replies"));
        let f = TopicFilter::parse("f/+/job_replies/#").unwrap();
        assert!(f.matches("f/c2/job_replies/x/y"));
        assert!(!f.matches("g/c2/job_replies/x"));
        let plus = TopicFilter::parse("f/c/model_request/+").unwrap();
        assert!(plus.matches("f/c/model_request/a"));
        assert!(!plus.matches("f/c/model_request/a/b"));
        assert!(!plus.matches("f/c/model_request"));
    }

    #[test]
    fn covers_filters() {
        let p = |s| TopicFilter::parse(s).unwrap();
        assert!(p("f/c/job_replies/#").covers(&p("f/c/job_replies/#")));
        assert!(p("f/c/job_replies/#").covers(&p("f/c/job_replies/+")));
        assert!(p("f/c/+").covers(&p("f/c/x")));
        assert!(!p("f/c/+").covers(&p("f/c/#")));
        assert!(!p("f/c/x").covers(&p("f/c/+")));
        assert!(p("a/b/#").covers(&p("a/b")));
        assert!(!p("a/b").covers(&p("a/b/#")));
    }

    #[test]
    fn authorize_examples() {
        let rules = vec![AclRule::publish("f/c/job_replies/k").unwrap()];
        assert!(authorize(&rules, Action::Publish, "f/c/job_replies/k"));
        assert!(!authorize(&rules, Action::Publish, "f/c/job_replies/other"));
        let rules = vec![AclRule::subscribe("f/c/job_request").unwrap()];
        assert!(!authorize(&rules, Action::Publish, "f/c/job_request"));
        assert!(authorize(&rules, Action::Subscribe, "f/c/job_request"));
        assert!(!authorize(&[], Action::Subscribe, "f/c/job_request"));
    }

    #[test]
    fn canonical_client_acl_grants_exactly_its_topics() {
        let (f, c, a, b) = (id("f"), id("c"), id("A"), id("B"));
        let acl = canonical_client_acl(&a, &[(f.clone(), c.clone())]);
        assert_eq!(acl.len(), 4);
        let ok = |act, t: TopicPath| authorize(&acl, act, &t.render());
        assert!(ok(Action::Subscribe, TopicPath::job_request(&f, &c)));
        assert!(ok(Action::Publish, TopicPath::job_reply(&f, &c, &a)));
        assert!(ok(Action::Publish, TopicPath::model_request(&f, &c, &a)));
        assert!(ok(Action::Subscribe, TopicPath::model_reply(&f, &c, &a)));

        assert!(!ok(Action::Publish, TopicPath::job_request(&f, &c)));
        for ch in [Channel::JobReply, Channel::ModelRequest, Channel::ModelReply] {
            let foreign = TopicPath::new(ch, f.clone(), c.clone(), Some(b.clone())).unwrap();
            assert!(!ok(Action::Publish, foreign.clone()));
            assert!(!ok(Action::Subscribe, foreign));
        }
        let wide = TopicFilter::parse("f/c/model_reply/#").unwrap();
        assert!(!authorize_filter(&acl, Action::Subscribe, &wide));
    }

    #[test]
    fn canonical_ps_acl_allows_wildcard_collection() {
        let (f, c) = (id("f"), id("c"));
        let acl = canonical_ps_acl(&[(f.clone(), c.clone())]);
        let filter = TopicFilter::parse("f/c/job_replies/#").unwrap();
        assert!(authorize_filter(&acl, Action::Subscribe, &filter));
        assert!(authorize(&acl, Action::Publish, "f/c/job_request"));
        assert!(authorize(&acl, Action::Publish, "f/c/model_reply/anyone"));
        assert!(!authorize(&acl, Action::Publish, "f/c/job_replies/anyone"));
        assert!(!authorize(&acl, Action::Publish, "g/c/job_request"));
    }
}
