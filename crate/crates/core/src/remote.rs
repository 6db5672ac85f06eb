//! Frozen next-token policy backed by a remote scoring endpoint.
//!
//! Wire format: `POST {"prompt": str, "candidates": [str]}` answered by
//! `{"logprobs": [float]}`, one entry per candidate. Scores are
//! renormalized over the unmasked candidates.
//!
//! Prompt template (one line per field):
//!
//! ```text
//! predicates: A, B, C
//! parent: A
//! depth: 1
//! chosen: B
//! history: A=0.2500 B=0.5000 C=0.2500
//! label: A
//! next:
//! ```
//!
//! `history` and `label` only appear for conditioned contexts; `label` is
//! omitted when the label slot is neutral.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::policy::{allowed_tokens, masked_log_softmax, PolicyContext, PolicyError, TokenDistribution, TokenPolicy};
use crate::tree::TreeLimits;

pub const ENDPOINT_VAR: &str = "LOGICTREE_REMOTE_ENDPOINT";
pub const TOKEN_VAR: &str = "LOGICTREE_REMOTE_TOKEN";
pub const STOP_MARKER: &str = "<stop>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    /// JSON-lines cache file; in-memory only when unset.
    pub cache_path: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            token: None,
            retries: 3,
            backoff_ms: 200,
            timeout_ms: 30_000,
            cache_path: None,
        }
    }
}

impl RemoteConfig {
    /// Reads the endpoint and token from the environment.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).ok().filter(|s| !s.is_empty())?;
        Some(Self {
            endpoint,
            token: std::env::var(TOKEN_VAR).ok().filter(|s| !s.is_empty()),
            ..Self::default()
        })
    }
}

#[derive(Serialize)]
struct Request<'a> {
    prompt: &'a str,
    candidates: &'a [String],
}

#[derive(Deserialize)]
struct Response {
    logprobs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    logprobs: Vec<f64>,
}

pub struct RemotePolicy {
    config: RemoteConfig,
    vocabulary: Vocabulary,
    limits: TreeLimits,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    calls: AtomicUsize,
}

impl RemotePolicy {
    pub fn new(config: RemoteConfig, vocabulary: Vocabulary, limits: TreeLimits) -> Result<Self, PolicyError> {
        if config.endpoint.is_empty() {
            return Err(PolicyError::Remote("no endpoint configured".into()));
        }
        let mut cache = HashMap::new();
        if let Some(path) = &config.cache_path {
            if path.exists() {
                let text = fs::read_to_string(path).map_err(|e| PolicyError::Remote(format!("{}: {e}", path.display())))?;
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let entry: CacheLine = serde_json::from_str(line)
                        .map_err(|e| PolicyError::Remote(format!("{}: {e}", path.display())))?;
                    cache.insert(entry.key, entry.logprobs);
                }
            }
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Ok(Self {
            config,
            vocabulary,
            limits,
            agent,
            cache: Mutex::new(cache),
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn render_prompt(&self, ctx: &PolicyContext<'_>) -> String {
        let names: Vec<&str> = self.vocabulary.predicates().iter().map(|p| p.name.as_str()).collect();
        let list = |ids: &mut dyn Iterator<Item = usize>| ids.map(|i| names[i]).collect::<Vec<_>>().join(", ");
        let mut out = format!(
            "predicates: {}\nparent: {}\ndepth: {}\nchosen: {}\n",
            list(&mut (0..names.len())),
            names[ctx.parent],
            ctx.depth,
            list(&mut ctx.chosen_siblings.iter().copied()),
        );
        if let Some(cond) = ctx.condition {
            let n = names.len();
            let hist: Vec<String> = (0..n).map(|i| format!("{}={:.4}", names[i], cond.0[i])).collect();
            out.push_str(&format!("history: {}\n", hist.join(" ")));
            let targets = self.vocabulary.targets();
            if let Some(k) = (0..targets.len()).find(|&k| cond.0[n + k] > 0.5) {
                out.push_str(&format!("label: {}\n", names[targets[k]]));
            }
        }
        out.push_str("next:");
        out
    }

    fn cache_key(&self, prompt: &str, candidates: &[String]) -> String {
        let mut h = Sha256::new();
        h.update(self.config.endpoint.as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        for c in candidates {
            h.update([0]);
            h.update(c.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn request(&self, prompt: &str, candidates: &[String]) -> Result<Vec<f64>, PolicyError> {
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(10)));
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            let mut req = self.agent.post(&self.config.endpoint);
            if let Some(token) = &self.config.token {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
            match req.send_json(Request { prompt, candidates }) {
                Ok(mut resp) => {
                    let body: Response = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| PolicyError::Remote(format!("bad response body: {e}")))?;
                    return Ok(body.logprobs);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(PolicyError::Remote(format!(
            "{} failed after {} attempts: {last}",
            self.config.endpoint,
            self.config.retries + 1
        )))
    }

    fn remember(&self, key: String, logprobs: Vec<f64>) -> Result<(), PolicyError> {
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.contains_key(&key) {
            return Ok(());
        }
        if let Some(path) = &self.config.cache_path {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                logprobs: logprobs.clone(),
            })
            .expect("cache line serializes");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| PolicyError::Remote(format!("{}: {e}", path.display())))?;
            writeln!(f, "{line}").map_err(|e| PolicyError::Remote(format!("{}: {e}", path.display())))?;
        }
        cache.insert(key, logprobs);
        Ok(())
    }
}

impl TokenPolicy for RemotePolicy {
    fn n_predicates(&self) -> usize {
        self.vocabulary.len()
    }

    fn limits(&self) -> &TreeLimits {
        &self.limits
    }

    fn token_dist(&self, ctx: &PolicyContext<'_>) -> Result<TokenDistribution, PolicyError> {
        let n = self.vocabulary.len();
        let allowed = allowed_tokens(ctx, n, &self.limits);
        let ids: Vec<usize> = (0..=n).filter(|&i| allowed[i]).collect();
        let candidates: Vec<String> = ids
            .iter()
            .map(|&i| if i == n { STOP_MARKER.to_string() } else { self.vocabulary.predicates()[i].name.clone() })
            .collect();
        let prompt = self.render_prompt(ctx);
        let key = self.cache_key(&prompt, &candidates);
        let cached = self.cache.lock().expect("cache lock").get(&key).cloned();
        let scores = match cached {
            Some(s) => s,
            None => {
                let s = self.request(&prompt, &candidates)?;
                if s.len() != candidates.len() {
                    return Err(PolicyError::Remote(format!(
                        "expected {} logprobs, got {} (candidate tokenization mismatch)",
                        candidates.len(),
                        s.len()
                    )));
                }
                if s.iter().any(|x| !x.is_finite()) {
                    return Err(PolicyError::Remote("non-finite logprob in response".into()));
                }
                self.remember(key, s.clone())?;
                s
            }
        };
        let mut logits = vec![0.0; n + 1];
        for (&i, &s) in ids.iter().zip(&scores) {
            logits[i] = s;
        }
        Ok(masked_log_softmax(&logits, &allowed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;

    /// Serves `n` requests, answering each with `reply(candidate_count)`.
    fn serve(n: usize, reply: fn(usize) -> String) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming().take(n) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let k = req["candidates"].as_array().unwrap().len();
                let out = reply(k);
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                    out.len()
                )
                .unwrap();
            }
        });
        format!("http://{addr}/score")
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(&["A", "B", "C"], &[0]).unwrap()
    }

    fn ctx() -> PolicyContext<'static> {
        PolicyContext {
            parent: 0,
            depth: 0,
            chosen_siblings: &[],
            condition: None,
        }
    }

    #[test]
    fn equal_scores_renormalize_to_uniform() {
        let url = serve(1, |k| format!("{{\"logprobs\": {:?}}}", vec![-7.0; k]));
        let cfg = RemoteConfig {
            endpoint: url,
            ..RemoteConfig::default()
        };
        let p = RemotePolicy::new(cfg, vocab(), TreeLimits::new(2, 2)).unwrap();
        let d = p.token_dist(&ctx()).unwrap();
        assert!(d.logp[0].is_infinite());
        for i in 1..4 {
            assert!((d.logp[i] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_hit_skips_network() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache.jsonl");
        let url = serve(1, |k| format!("{{\"logprobs\": {:?}}}", (0..k).map(|i| -(i as f64)).collect::<Vec<_>>()));
        let cfg = RemoteConfig {
            endpoint: url,
            cache_path: Some(cache.clone()),
            ..RemoteConfig::default()
        };
        let p = RemotePolicy::new(cfg.clone(), vocab(), TreeLimits::new(2, 2)).unwrap();
        let a = p.token_dist(&ctx()).unwrap();
        let b = p.token_dist(&ctx()).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.network_calls(), 1);
        // A fresh instance reads the disk cache; the server is gone by now.
        let q = RemotePolicy::new(cfg, vocab(), TreeLimits::new(2, 2)).unwrap();
        assert_eq!(q.token_dist(&ctx()).unwrap(), a);
        assert_eq!(q.network_calls(), 0);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let url = serve(1, |_| "{\"logprobs\": [0.0]}".into());
        let cfg = RemoteConfig {
            endpoint: url,
            ..RemoteConfig::default()
        };
        let p = RemotePolicy::new(cfg, vocab(), TreeLimits::new(2, 2)).unwrap();
        assert!(matches!(p.token_dist(&ctx()), Err(PolicyError::Remote(_))));
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = RemoteConfig {
            endpoint: format!("http://127.0.0.1:{port}/"),
            retries: 2,
            backoff_ms: 1,
            timeout_ms: 2_000,
            ..RemoteConfig::default()
        };
        let p = RemotePolicy::new(cfg, vocab(), TreeLimits::new(2, 2)).unwrap();
        let err = p.token_dist(&ctx()).unwrap_err();
        assert!(err.to_string().contains("3 attempts"), "{err}");
        assert_eq!(p.network_calls(), 3);
    }

    #[test]
    fn prompt_lists_context() {
        let cfg = RemoteConfig {
            endpoint: "http://localhost/".into(),
            ..RemoteConfig::default()
        };
        let p = RemotePolicy::new(cfg, vocab(), TreeLimits::new(2, 2)).unwrap();
        let c = PolicyContext {
            parent: 0,
            depth: 1,
            chosen_siblings: &[1],
            condition: None,
        };
        assert_eq!(
            p.render_prompt(&c),
            "predicates: A, B, C\nparent: A\ndepth: 1\nchosen: B\nnext:"
        );
    }
}
