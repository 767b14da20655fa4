//! HTTP-backed clients. Each capability is one endpoint taking a JSON
//! request body and answering with the matching response record.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::clients::{
    CaptionRequest, CaptionResponse, CaptionerClient, ClientError, DetectRequest, DetectResponse,
    DetectorClient, ExtractRequest, ExtractResponse, ExtractorClient,
};
use crate::alignment::Candidate;
use crate::instruction::PhraseSpan;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Extra attempts after a transport failure or 5xx answer.
    pub retries: u32,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEndpoint {
    url: String,
    agent: ureq::Agent,
    retries: u32,
}

impl RemoteEndpoint {
    pub fn new(url: impl Into<String>, opts: RemoteOptions) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(opts.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
            retries: opts.retries,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(&self, req: &Req) -> Result<Resp, ClientError> {
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.agent.post(&self.url).send_json(req) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| ClientError::BadResponse {
                            endpoint: self.url.clone(),
                            reason: e.to_string(),
                        })
                }
                Err(ureq::Error::StatusCode(code)) if code < 500 => {
                    return Err(ClientError::BadResponse {
                        endpoint: self.url.clone(),
                        reason: format!("http status {code}"),
                    })
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ClientError::Unavailable {
            endpoint: self.url.clone(),
            reason: last,
        })
    }
}

impl ExtractorClient for RemoteEndpoint {
    fn extract(&self, req: &ExtractRequest) -> Result<Vec<PhraseSpan>, ClientError> {
        self.call::<_, ExtractResponse>(req).map(|r| r.phrases)
    }
}

impl DetectorClient for RemoteEndpoint {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Candidate>, ClientError> {
        self.call::<_, DetectResponse>(req).map(|r| r.candidates)
    }
}

impl CaptionerClient for RemoteEndpoint {
    fn caption(&self, req: &CaptionRequest) -> Result<String, ClientError> {
        self.call::<_, CaptionResponse>(req).map(|r| r.caption)
    }
}
