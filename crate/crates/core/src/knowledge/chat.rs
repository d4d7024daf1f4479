//! Chat-completions client with retry and an on-disk response cache.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::KnowledgeError;

pub const ENV_API_BASE: &str = "MOLFUSE_CHAT_API_BASE";
pub const ENV_API_KEY: &str = "MOLFUSE_CHAT_API_KEY";
pub const ENV_MODEL: &str = "MOLFUSE_CHAT_MODEL";

#[derive(Debug, Clone)]
pub struct ChatConfig {
    pub api_base: String,
    pub api_key: String,
    pub model: String,
    pub cache_dir: PathBuf,
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
    pub concurrency: usize,
}

impl ChatConfig {
    /// Reads endpoint settings from the environment. Fails before any I/O if
    /// the API key is absent.
    pub fn from_env(cache_dir: PathBuf) -> Result<Self, KnowledgeError> {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let api_key = get(ENV_API_KEY)
            .ok_or_else(|| KnowledgeError::Config(format!("{ENV_API_KEY} is not set")))?;
        Ok(Self {
            api_base: get(ENV_API_BASE).unwrap_or_else(|| "https://api.openai.com/v1".into()),
            api_key,
            model: get(ENV_MODEL).unwrap_or_else(|| "gpt-4o-mini".into()),
            cache_dir,
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            concurrency: 4,
        })
    }
}

pub trait ChatTransport: Send + Sync {
    fn complete(&self, cfg: &ChatConfig, prompt: &str) -> Result<String, String>;
}

/// Blocking HTTP transport for OpenAI-compatible `/chat/completions`.
pub struct HttpTransport;

impl ChatTransport for HttpTransport {
    fn complete(&self, cfg: &ChatConfig, prompt: &str) -> Result<String, String> {
        let url = format!("{}/chat/completions", cfg.api_base.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = ureq::post(&url)
            .timeout(cfg.timeout)
            .set("Authorization", &format!("Bearer {}", cfg.api_key))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let v: serde_json::Value = resp.into_json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("response without message content: {v}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub text: String,
    pub from_cache: bool,
    /// Failed attempts before the successful one.
    pub retries: u32,
}

pub struct ChatClient {
    pub config: ChatConfig,
    transport: Box<dyn ChatTransport>,
}

impl ChatClient {
    pub fn new(config: ChatConfig) -> Self {
        Self::with_transport(config, Box::new(HttpTransport))
    }

    pub fn with_transport(config: ChatConfig, transport: Box<dyn ChatTransport>) -> Self {
        Self { config, transport }
    }

    pub fn cache_key(&self, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.config.model.as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    fn cache_path(&self, prompt: &str) -> PathBuf {
        self.config
            .cache_dir
            .join(format!("{}.txt", self.cache_key(prompt)))
    }

    pub fn generate(&self, prompt: &str) -> Result<Generated, KnowledgeError> {
        let path = self.cache_path(prompt);
        if let Ok(bytes) = fs::read(&path) {
            match String::from_utf8(bytes) {
                Ok(text) if !text.trim().is_empty() => {
                    return Ok(Generated {
                        text,
                        from_cache: true,
                        retries: 0,
                    })
                }
                _ => log::warn!("corrupt cache entry {}; regenerating", path.display()),
            }
        }

        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.base_delay * 2u32.pow(attempt - 1));
            }
            match self.transport.complete(&self.config, prompt) {
                Ok(text) => {
                    if attempt > 0 {
                        log::info!("chat request succeeded after {attempt} retries");
                    }
                    fs::create_dir_all(&self.config.cache_dir)?;
                    let tmp = path.with_extension("tmp");
                    fs::write(&tmp, &text)?;
                    fs::rename(&tmp, &path)?;
                    return Ok(Generated {
                        text,
                        from_cache: false,
                        retries: attempt,
                    });
                }
                Err(e) => {
                    log::warn!("chat request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(KnowledgeError::Http {
            attempts: self.config.max_attempts,
            message: last,
        })
    }

    /// Generates for many prompts with at most `config.concurrency` requests
    /// in flight. Results keep input order.
    pub fn generate_many(&self, prompts: &[String]) -> Vec<Result<Generated, KnowledgeError>> {
        let workers = self.config.concurrency.max(1);
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Generated, KnowledgeError>>>> = prompts
            .iter()
            .map(|_| std::sync::Mutex::new(None))
            .collect();
        std::thread::scope(|s| {
            for _ in 0..workers.min(prompts.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(self.generate(&prompts[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}
