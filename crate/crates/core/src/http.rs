//! Minimal blocking JSON client shared by the external adapters.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    endpoint: &str,
    timeout: Duration,
    body: &B,
) -> Result<R> {
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    match agent.post(endpoint).send_json(body) {
        Ok(resp) => resp
            .into_json::<R>()
            .map_err(|e| Error::Backend(format!("{endpoint}: malformed response: {e}"))),
        Err(ureq::Error::Status(code, _)) => {
            Err(Error::Backend(format!("{endpoint}: HTTP {code}")))
        }
        Err(ureq::Error::Transport(t)) => {
            Err(Error::BackendUnreachable(format!("{endpoint}: {t}")))
        }
    }
}
