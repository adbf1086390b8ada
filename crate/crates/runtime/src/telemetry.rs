//! Telemetry publish/subscribe and storage.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use futures::Stream;
use tokio::sync::broadcast;
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::StreamExt;
use twinloop_core::events::{FilterError, Millis, TelemetrySample, TopicFilter};

pub const DEFAULT_RING_CAPACITY: usize = 10_000;
const LIVE_BACKLOG: usize = 4096;

/// Receives every published sample, synchronously and in publish order.
pub trait TelemetrySink: Send + Sync {
    fn accept(&self, sample: &TelemetrySample);
}

/// In-process bus with MQTT topic semantics. Sinks see every sample; live
/// subscribers may lag and skip.
#[derive(Clone)]
pub struct TelemetryBus {
    live: broadcast::Sender<TelemetrySample>,
    sinks: Arc<Mutex<Vec<Arc<dyn TelemetrySink>>>>,
}

impl Default for TelemetryBus {
    fn default() -> Self {
        TelemetryBus {
            live: broadcast::channel(LIVE_BACKLOG).0,
            sinks: Arc::default(),
        }
    }
}

impl std::fmt::Debug for TelemetryBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TelemetryBus").finish_non_exhaustive()
    }
}

impl TelemetryBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sink(&self, sink: Arc<dyn TelemetrySink>) {
        self.sinks.lock().expect("sinks lock").push(sink);
    }

    pub fn publish(&self, sample: TelemetrySample) {
        for s in self.sinks.lock().expect("sinks lock").iter() {
            s.accept(&sample);
        }
        let _ = self.live.send(sample);
    }

    /// Live samples matching `filter` from now on.
    pub fn subscribe(&self, filter: TopicFilter) -> impl Stream<Item = TelemetrySample> + Send + 'static {
        BroadcastStream::new(self.live.subscribe()).filter_map(move |r| match r {
            Ok(s) if filter.matches(&s.topic) => Some(s),
            Ok(_) => None,
            Err(BroadcastStreamRecvError::Lagged(n)) => {
                log::warn!("telemetry subscriber skipped {n} samples");
                None
            }
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("invalid topic filter: {0}")]
    Filter(#[from] FilterError),
    #[error("time range is empty: from {from} is after to {to}")]
    Range { from: Millis, to: Millis },
    #[error("telemetry history: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default)]
struct Ring {
    samples: VecDeque<TelemetrySample>,
    /// Whether older samples were dropped from memory.
    evicted: bool,
}

/// Per-topic ring buffers plus an optional append-only NDJSON history.
#[derive(Debug)]
pub struct TelemetryStore {
    capacity: usize,
    rings: Mutex<BTreeMap<String, Ring>>,
    history: Option<(PathBuf, Mutex<File>)>,
}

impl TelemetryStore {
    pub fn in_memory(capacity: usize) -> Self {
        TelemetryStore {
            capacity: capacity.max(1),
            rings: Mutex::default(),
            history: None,
        }
    }

    /// Appends to `path`, creating it if needed.
    pub fn persistent(capacity: usize, path: &Path) -> Result<Self, TelemetryError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TelemetryStore {
            history: Some((path.to_path_buf(), Mutex::new(file))),
            ..Self::in_memory(capacity)
        })
    }

    pub fn append(&self, sample: &TelemetrySample) {
        if let Some((path, file)) = &self.history {
            let mut line = serde_json::to_string(sample).expect("sample serializes");
            line.push('\n');
            if let Err(e) = file.lock().expect("history lock").write_all(line.as_bytes()) {
                log::warn!("telemetry history {}: {e}", path.display());
            }
        }
        let mut rings = self.rings.lock().expect("rings lock");
        let ring = rings.entry(sample.topic.clone()).or_default();
        // Keep timestamp order even if a publisher's clock is behind.
        let mut s = sample.clone();
        if let Some(last) = ring.samples.back() {
            s.at = s.at.max(last.at);
        }
        if ring.samples.len() == self.capacity {
            ring.samples.pop_front();
            ring.evicted = true;
        }
        ring.samples.push_back(s);
    }

    pub fn topics(&self) -> Vec<String> {
        self.rings.lock().expect("rings lock").keys().cloned().collect()
    }

    /// Samples whose topic matches `filter` with `from <= at <= to`, in
    /// timestamp order (topic order breaks ties).
    pub fn query(
        &self,
        filter: &str,
        from: Option<Millis>,
        to: Option<Millis>,
    ) -> Result<Vec<TelemetrySample>, TelemetryError> {
        let filter = TopicFilter::parse(filter)?;
        let (from, to) = (from.unwrap_or(0), to.unwrap_or(Millis::MAX));
        if from > to {
            return Err(TelemetryError::Range { from, to });
        }
        let in_range = |s: &TelemetrySample| s.at >= from && s.at <= to;
        let mut out = Vec::new();
        let mut from_history = Vec::new();
        {
            let rings = self.rings.lock().expect("rings lock");
            for (topic, ring) in rings.iter().filter(|(t, _)| filter.matches(t)) {
                let oldest = ring.samples.front().map_or(Millis::MAX, |s| s.at);
                if ring.evicted && from < oldest {
                    from_history.push((topic.clone(), oldest));
                }
                out.extend(ring.samples.iter().filter(|s| in_range(s)).cloned());
            }
        }
        if !from_history.is_empty() {
            if let Some((path, file)) = &self.history {
                file.lock().expect("history lock").flush()?;
                let wanted: BTreeMap<String, Millis> = from_history.into_iter().collect();
                for line in BufReader::new(File::open(path)?).lines() {
                    let Ok(s) = serde_json::from_str::<TelemetrySample>(&line?) else {
                        continue;
                    };
                    if wanted.get(&s.topic).is_some_and(|&oldest| s.at < oldest) && in_range(&s) {
                        out.push(s);
                    }
                }
            }
        }
        out.sort_by(|a, b| a.at.cmp(&b.at).then_with(|| a.topic.cmp(&b.topic)));
        Ok(out)
    }
}

impl TelemetrySink for TelemetryStore {
    fn accept(&self, sample: &TelemetrySample) {
        self.append(sample)
    }
}

/// Republishes samples to an external MQTT broker as
/// `{"ts": <epoch-ms>, "value": <v>}` on the sample's topic.
#[cfg(feature = "mqtt")]
pub mod mqtt {
    use std::time::Duration;

    use rumqttc::{AsyncClient, MqttOptions, QoS};
    use serde::{Deserialize, Serialize};
    use twinloop_core::events::TelemetrySample;

    use super::TelemetrySink;

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct MqttConfig {
        pub host: String,
        #[serde(default = "default_port")]
        pub port: u16,
        #[serde(default = "default_client_id")]
        pub client_id: String,
    }

    fn default_port() -> u16 {
        1883
    }

    fn default_client_id() -> String {
        "twinloop".into()
    }

    pub fn payload(sample: &TelemetrySample) -> String {
        serde_json::json!({ "ts": sample.at, "value": sample.value }).to_string()
    }

    pub struct MqttBridge {
        client: AsyncClient,
        _driver: tokio::task::JoinHandle<()>,
    }

    impl MqttBridge {
        /// Connects lazily; the event loop keeps retrying in the background.
        pub fn start(cfg: &MqttConfig) -> Self {
            let mut opts = MqttOptions::new(cfg.client_id.clone(), cfg.host.clone(), cfg.port);
            opts.set_keep_alive(Duration::from_secs(30));
            let (client, mut eventloop) = AsyncClient::new(opts, 1024);
            let driver = tokio::spawn(async move {
                loop {
                    if let Err(e) = eventloop.poll().await {
                        log::warn!("mqtt bridge: {e}");
                        tokio::time::sleep(Duration::from_secs(1)).await;
                    }
                }
            });
            MqttBridge {
                client,
                _driver: driver,
            }
        }
    }

    impl Drop for MqttBridge {
        fn drop(&mut self) {
            self._driver.abort();
        }
    }

    impl TelemetrySink for MqttBridge {
        fn accept(&self, sample: &TelemetrySample) {
            if let Err(e) = self
                .client
                .try_publish(sample.topic.clone(), QoS::AtMostOnce, false, payload(sample))
            {
                log::debug!("mqtt bridge dropped {}: {e}", sample.topic);
            }
        }
    }
}
