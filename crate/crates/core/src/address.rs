//! Stream addresses.
//!
//! A stream address names a connector scheme and a locator the connector
//! understands:
//!
//! - `rtclite:wss://example.com/str/15` (the stream is the URL path)
//! - `storage:id:room-1?poll-ms=20` (connector-local short form)
//!
//! Protocol-handler URLs wrap an address with a mode:
//! `web+ezpub:rtclite:wss://example.com/str/15` publishes,
//! `web+ezsub:...` subscribes.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;
use url::Url;

use crate::stream::StreamName;

/// Connector schemes this build knows how to instantiate.
pub const KNOWN_SCHEMES: &[&str] = &["rtclite", "broker", "mem", "storage", "sfu"];

pub const PUBLISH_PREFIX: &str = "web+ezpub:";
pub const SUBSCRIBE_PREFIX: &str = "web+ezsub:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown prefix in `{0}`")]
    UnknownPrefix(String),
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
    #[error("missing locator")]
    MissingLocator,
    #[error("bad locator `{locator}`: {reason}")]
    BadLocator { locator: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Publish,
    Subscribe,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamAddress {
    pub scheme: String,
    pub locator: String,
    pub stream: StreamName,
    pub params: BTreeMap<String, String>,
}

impl StreamAddress {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Self::parse_with(text, |s| KNOWN_SCHEMES.contains(&s))
    }

    pub fn parse_with(text: &str, known: impl Fn(&str) -> bool) -> Result<Self, ParseError> {
        let (scheme, locator) = text.split_once(':').ok_or(ParseError::MissingLocator)?;
        if !known(scheme) {
            return Err(ParseError::UnknownScheme(scheme.to_string()));
        }
        Self::from_parts(scheme, locator)
    }

    pub fn from_parts(scheme: &str, locator: &str) -> Result<Self, ParseError> {
        if locator.is_empty() {
            return Err(ParseError::MissingLocator);
        }
        let bad = |reason: String| ParseError::BadLocator {
            locator: locator.to_string(),
            reason,
        };
        let (stream, params) = if let Some(rest) = locator.strip_prefix("id:") {
            let (name, query) = rest.split_once('?').unwrap_or((rest, ""));
            let params = url::form_urlencoded::parse(query.as_bytes())
                .map(|(k, v)| (k.into_owned(), v.into_owned()))
                .collect();
            (name.to_string(), params)
        } else {
            let url = Url::parse(locator).map_err(|e| bad(e.to_string()))?;
            let path = url.path().trim_start_matches('/');
            let params = url
                .query_pairs()
                .map(|(k, v)| (k.into_owned(), v.into_owned()))
                .collect();
            (path.to_string(), params)
        };
        let stream = StreamName::new(stream).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            scheme: scheme.to_string(),
            locator: locator.to_string(),
            stream,
            params,
        })
    }

    /// Shorthand for connector-local addressing.
    pub fn local(scheme: &str, stream: StreamName) -> Self {
        Self {
            scheme: scheme.to_string(),
            locator: format!("id:{stream}"),
            stream,
            params: BTreeMap::new(),
        }
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    /// The service part of a URL locator: origin only, stream path dropped.
    pub fn origin(&self) -> Option<String> {
        let url = Url::parse(&self.locator).ok()?;
        let host = url.host_str()?;
        Some(match url.port() {
            Some(p) => format!("{}://{host}:{p}", url.scheme()),
            None => format!("{}://{host}", url.scheme()),
        })
    }
}

impl fmt::Display for StreamAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.scheme, self.locator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamUrl {
    pub mode: Mode,
    pub address: StreamAddress,
}

impl StreamUrl {
    pub fn scheme(&self) -> &str {
        &self.address.scheme
    }

    pub fn locator(&self) -> &str {
        &self.address.locator
    }

    pub fn stream(&self) -> &StreamName {
        &self.address.stream
    }
}

pub fn parse_stream_url(text: &str) -> Result<StreamUrl, ParseError> {
    let (mode, rest) = if let Some(rest) = text.strip_prefix(PUBLISH_PREFIX) {
        (Mode::Publish, rest)
    } else if let Some(rest) = text.strip_prefix(SUBSCRIBE_PREFIX) {
        (Mode::Subscribe, rest)
    } else {
        return Err(ParseError::UnknownPrefix(text.to_string()));
    };
    Ok(StreamUrl {
        mode,
        address: StreamAddress::parse(rest)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handler_urls() {
        let u = parse_stream_url("web+ezpub:rtclite:wss://example.com/str/15").unwrap();
        assert_eq!(u.mode, Mode::Publish);
        assert_eq!(u.scheme(), "rtclite");
        assert_eq!(u.locator(), "wss://example.com/str/15");
        assert_eq!(u.stream().as_str(), "str/15");
        assert_eq!(u.address.origin().as_deref(), Some("wss://example.com"));

        let s = parse_stream_url("web+ezsub:rtclite:wss://example.com/str/15").unwrap();
        assert_eq!(s.mode, Mode::Subscribe);
        assert_eq!(s.address, u.address);

        assert_eq!(
            parse_stream_url("web+ezpub:bogus:wss://example.com/str/15"),
            Err(ParseError::UnknownScheme("bogus".into()))
        );
        assert!(matches!(
            parse_stream_url("web+other:rtclite:wss://x/y"),
            Err(ParseError::UnknownPrefix(_))
        ));
    }

    #[test]
    fn short_form_with_params() {
        let a = StreamAddress::parse("storage:id:1234?config=%7B%22a%22%3A1%7D&token=t").unwrap();
        assert_eq!(a.stream.as_str(), "1234");
        assert_eq!(a.param("config"), Some(r#"{"a":1}"#));
        assert_eq!(a.param("token"), Some("t"));
    }

    #[test]
    fn locator_errors() {
        assert!(StreamAddress::parse("rtclite:").is_err());
        assert!(StreamAddress::parse("rtclite:wss://example.com/").is_err());
        assert!(StreamAddress::parse("rtclite").is_err());
        assert!(StreamAddress::parse("mem:id:").is_err());
    }
}
