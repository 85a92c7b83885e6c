use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize)]
struct LetterRequest<'a> {
    text: &'a str,
    letters: Vec<String>,
}

#[derive(Deserialize)]
struct LetterResponse {
    logits: Vec<f64>,
    single_token: bool,
}

/// Client for a backend serving next-token logits of requested letters
/// (`POST /v1/letter_logits`).
#[derive(Clone, Debug)]
pub struct RemoteClient {
    endpoint: String,
    agent: ureq::Agent,
    /// Extra attempts after a retriable failure.
    pub retries: usize,
    pub backoff: Duration,
}

impl RemoteClient {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        RemoteClient {
            endpoint: format!("{}/v1/letter_logits", base_url.trim_end_matches('/')),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retries: 2,
            backoff: Duration::from_millis(200),
        }
    }

    fn post(&self, text: &str, letters: &[char]) -> Result<LetterResponse> {
        let body = LetterRequest {
            text,
            letters: letters.iter().map(|c| c.to_string()).collect(),
        };
        let mut attempt = 0;
        loop {
            let err = match self.agent.post(&self.endpoint).send_json(&body) {
                Ok(resp) => {
                    return resp
                        .into_json::<LetterResponse>()
                        .map_err(|e| Error::RemoteProtocol(format!("bad response body: {e}")))
                }
                Err(ureq::Error::Status(code, resp)) if code < 500 => {
                    let msg = resp.into_string().unwrap_or_default();
                    return Err(Error::RemoteProtocol(format!("status {code}: {msg}")));
                }
                Err(ureq::Error::Status(code, _)) => Error::RemoteUnavailable(format!("status {code}")),
                Err(e) => Error::RemoteUnavailable(e.to_string()),
            };
            if attempt >= self.retries {
                return Err(err);
            }
            attempt += 1;
            log::warn!("remote logits attempt {attempt} failed: {err}");
            thread::sleep(self.backoff * attempt as u32);
        }
    }

    /// Next-token logits of `letters` after `text`, in request order. A
    /// backend that cannot encode some letter as one token is a hard error
    /// naming that letter.
    pub fn letter_logits(&self, text: &str, letters: &[char]) -> Result<Vec<f64>> {
        let resp = self.post(text, letters)?;
        if !resp.single_token {
            for &l in letters {
                if !self.post(text, &[l])?.single_token {
                    return Err(Error::MultiTokenLetter(l.to_string()));
                }
            }
            let all: String = letters.iter().collect();
            return Err(Error::MultiTokenLetter(all));
        }
        if resp.logits.len() != letters.len() {
            return Err(Error::RemoteProtocol(format!(
                "asked for {} letters, got {} logits",
                letters.len(),
                resp.logits.len()
            )));
        }
        if resp.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::RemoteProtocol("non-finite logit".into()));
        }
        Ok(resp.logits)
    }
}
