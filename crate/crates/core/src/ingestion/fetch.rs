//! Hourly product download from public object-store buckets.
//!
//! Buckets are listed with the S3 `list-type=2` API. Every fetched hour gets
//! an `index.json` in the cache recording the object keys and sizes, so a
//! repeated request for a complete hour touches the network zero times.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Datelike, Duration, DurationRound, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureId;

pub const GOES_ENDPOINT: &str = "https://noaa-goes16.s3.amazonaws.com";
pub const NEXRAD_L3_ENDPOINT: &str = "https://unidata-nexrad-level3.s3.amazonaws.com";
pub const DEFAULT_STATION: &str = "TDAL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Goes,
    Nexrad,
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goes" => Ok(Source::Goes),
            "nexrad" => Ok(Source::Nexrad),
            _ => Err(Error::Config(format!("unknown source '{s}' (expected goes or nexrad)"))),
        }
    }
}

/// A remote product and the grid features derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Product {
    pub name: &'static str,
    pub variable: &'static str,
    pub features: &'static [FeatureId],
}

pub const GOES_PRODUCTS: [Product; 4] = [
    Product {
        name: "ABI-L2-ACHAC",
        variable: "HT",
        features: &[FeatureId::CloudTopHeight],
    },
    Product {
        name: "ABI-L2-CTPC",
        variable: "PRES",
        features: &[FeatureId::CloudTopPressure],
    },
    Product {
        name: "ABI-L2-CODC",
        variable: "COD",
        features: &[FeatureId::CloudOpticalDepth],
    },
    Product {
        name: "GLM-L2-LCFA",
        variable: "flash_energy",
        features: &[FeatureId::Occurrence, FeatureId::FlashCount, FeatureId::FlashEnergy],
    },
];

/// Level-3 long-range reflectivity from a terminal Doppler radar.
pub const NEXRAD_PRODUCT: Product = Product {
    name: "TZL",
    variable: "reflectivity",
    features: &[FeatureId::Reflectivity],
};

/// Failure reported by a [`Transport`].
#[derive(Debug, Clone)]
pub struct TransportError {
    pub retryable: bool,
    pub message: String,
}

/// Minimal HTTP GET abstraction so the fetcher can be exercised offline.
pub trait Transport {
    /// Body of `url`, or `Ok(None)` if the object does not exist.
    fn get(&self, url: &str) -> std::result::Result<Option<Vec<u8>>, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: StdDuration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpTransport { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(StdDuration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> std::result::Result<Option<Vec<u8>>, TransportError> {
        let mut resp = self.agent.get(url).call().map_err(|e| TransportError {
            retryable: true,
            message: e.to_string(),
        })?;
        match resp.status().as_u16() {
            200 => resp
                .body_mut()
                .with_config()
                .limit(u64::MAX)
                .read_to_vec()
                .map(Some)
                .map_err(|e| TransportError {
                    retryable: true,
                    message: e.to_string(),
                }),
            404 => Ok(None),
            code => Err(TransportError {
                retryable: code == 429 || code >= 500,
                message: format!("http status {code}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchConfig {
    pub cache_dir: PathBuf,
    pub goes_endpoint: String,
    pub nexrad_endpoint: String,
    pub station: String,
    pub max_attempts: u32,
    pub backoff: StdDuration,
}

impl FetchConfig {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        FetchConfig {
            cache_dir: cache_dir.into(),
            goes_endpoint: GOES_ENDPOINT.into(),
            nexrad_endpoint: NEXRAD_L3_ENDPOINT.into(),
            station: DEFAULT_STATION.into(),
            max_attempts: 4,
            backoff: StdDuration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteObject {
    pub key: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchedHour {
    pub product: String,
    pub hour: DateTime<Utc>,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FetchReport {
    pub fetched: Vec<FetchedHour>,
    /// `(product, hour)` pairs with no remote objects.
    pub gaps: Vec<(String, DateTime<Utc>)>,
    pub downloaded: usize,
    pub reused: usize,
}

/// Download every product of `source` for each hour in `[start, end)`.
pub fn fetch_products(
    transport: &dyn Transport,
    config: &FetchConfig,
    source: Source,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<FetchReport> {
    let first = start
        .duration_trunc(Duration::hours(1))
        .map_err(|e| Error::Config(e.to_string()))?;
    if end <= first {
        return Err(Error::Config(format!("empty time range {start} .. {end}")));
    }
    let mut report = FetchReport::default();
    let mut hour = first;
    while hour < end {
        match source {
            Source::Goes => {
                for product in GOES_PRODUCTS {
                    let prefix = format!(
                        "{}/{:04}/{:03}/{:02}/",
                        product.name,
                        hour.year(),
                        hour.ordinal(),
                        hour.hour()
                    );
                    fetch_hour(transport, config, &config.goes_endpoint, product.name, &prefix, hour, &mut report)?;
                }
            }
            Source::Nexrad => {
                let site = config.station.get(1..).unwrap_or(&config.station);
                let prefix = format!("{site}_{}_{}_", NEXRAD_PRODUCT.name, hour.format("%Y_%m_%d_%H"));
                fetch_hour(
                    transport,
                    config,
                    &config.nexrad_endpoint,
                    NEXRAD_PRODUCT.name,
                    &prefix,
                    hour,
                    &mut report,
                )?;
            }
        }
        hour += Duration::hours(1);
    }
    Ok(report)
}

fn hour_dir(config: &FetchConfig, product: &str, hour: DateTime<Utc>) -> PathBuf {
    config
        .cache_dir
        .join(product)
        .join(hour.format("%Y%m%d%H").to_string())
}

fn file_size(path: &Path) -> Option<u64> {
    fs::metadata(path).ok().map(|m| m.len())
}

fn fetch_hour(
    transport: &dyn Transport,
    config: &FetchConfig,
    endpoint: &str,
    product: &str,
    prefix: &str,
    hour: DateTime<Utc>,
    report: &mut FetchReport,
) -> Result<()> {
    let dir = hour_dir(config, product, hour);
    let index_path = dir.join("index.json");
    let file_of = |key: &str| dir.join(key.rsplit('/').next().unwrap_or(key));

    if let Ok(text) = fs::read_to_string(&index_path) {
        if let Ok(objects) = serde_json::from_str::<Vec<RemoteObject>>(&text) {
            if !objects.is_empty() && objects.iter().all(|o| file_size(&file_of(&o.key)) == Some(o.size)) {
                report.reused += objects.len();
                report.fetched.push(FetchedHour {
                    product: product.into(),
                    hour,
                    files: objects.iter().map(|o| file_of(&o.key)).collect(),
                });
                return Ok(());
            }
        }
    }

    let objects = list_objects(transport, config, endpoint, prefix)?;
    if objects.is_empty() {
        log::warn!("{product} {hour}: no remote objects, gap-marking");
        report.gaps.push((product.into(), hour));
        return Ok(());
    }
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for o in &objects {
        let path = file_of(&o.key);
        if file_size(&path) == Some(o.size) {
            report.reused += 1;
            files.push(path);
            continue;
        }
        let url = format!("{endpoint}/{}", o.key);
        match get_with_retry(transport, config, &url)? {
            Some(bytes) => {
                let tmp = path.with_extension("part");
                fs::write(&tmp, &bytes)?;
                fs::rename(&tmp, &path)?;
                report.downloaded += 1;
                files.push(path);
            }
            None => log::warn!("{url} listed but missing"),
        }
    }
    if files.is_empty() {
        report.gaps.push((product.into(), hour));
        return Ok(());
    }
    let present: Vec<&RemoteObject> = objects.iter().filter(|o| file_of(&o.key).exists()).collect();
    fs::write(&index_path, serde_json::to_vec_pretty(&present)?)?;
    report.fetched.push(FetchedHour {
        product: product.into(),
        hour,
        files,
    });
    Ok(())
}

fn get_with_retry(transport: &dyn Transport, config: &FetchConfig, url: &str) -> Result<Option<Vec<u8>>> {
    let attempts = config.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        match transport.get(url) {
            Ok(body) => return Ok(body),
            Err(e) if e.retryable && attempt + 1 < attempts => {
                log::warn!("{url}: {} (attempt {}/{attempts})", e.message, attempt + 1);
                thread::sleep(config.backoff * 2u32.pow(attempt));
                last = e.message;
            }
            Err(e) => {
                last = e.message;
                break;
            }
        }
    }
    Err(Error::Fetch {
        url: url.into(),
        reason: last,
    })
}

fn list_objects(
    transport: &dyn Transport,
    config: &FetchConfig,
    endpoint: &str,
    prefix: &str,
) -> Result<Vec<RemoteObject>> {
    let mut objects = Vec::new();
    let mut token: Option<String> = None;
    loop {
        let mut url = format!("{endpoint}/?list-type=2&prefix={prefix}");
        if let Some(t) = &token {
            url.push_str("&continuation-token=");
            url.push_str(&percent_encode(t));
        }
        let Some(body) = get_with_retry(transport, config, &url)? else {
            return Ok(objects);
        };
        let xml = String::from_utf8_lossy(&body);
        objects.extend(parse_listing(&xml));
        token = tag_values(&xml, "NextContinuationToken").into_iter().next();
        if tag_values(&xml, "IsTruncated").first().map(String::as_str) != Some("true") || token.is_none() {
            return Ok(objects);
        }
    }
}

fn percent_encode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

fn tag_values(xml: &str, tag: &str) -> Vec<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = xml;
    while let Some(i) = rest.find(&open) {
        rest = &rest[i + open.len()..];
        let Some(j) = rest.find(&close) else { break };
        out.push(rest[..j].to_string());
        rest = &rest[j + close.len()..];
    }
    out
}

/// Keys and sizes from a `ListObjectsV2` response body.
pub fn parse_listing(xml: &str) -> Vec<RemoteObject> {
    tag_values(xml, "Contents")
        .iter()
        .filter_map(|c| {
            let key = tag_values(c, "Key").into_iter().next()?;
            let size = tag_values(c, "Size").first()?.parse().ok()?;
            Some(RemoteObject { key, size })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use std::cell::RefCell;
    use std::collections::HashMap;

    /// In-memory bucket that counts every request.
    struct MockBucket {
        objects: HashMap<String, Vec<u8>>,
        calls: RefCell<Vec<String>>,
        fail_first: RefCell<u32>,
    }

    impl MockBucket {
        fn new(keys: &[(&str, usize)]) -> Self {
            MockBucket {
                objects: keys.iter().map(|&(k, n)| (k.to_string(), vec![7u8; n])).collect(),
                calls: RefCell::new(Vec::new()),
                fail_first: RefCell::new(0),
            }
        }
    }

    impl Transport for MockBucket {
        fn get(&self, url: &str) -> std::result::Result<Option<Vec<u8>>, TransportError> {
            self.calls.borrow_mut().push(url.to_string());
            if *self.fail_first.borrow() > 0 {
                *self.fail_first.borrow_mut() -= 1;
                return Err(TransportError {
                    retryable: true,
                    message: "connection reset".into(),
                });
            }
            let path = url.split_once(".com/").map(|x| x.1).unwrap_or("");
            if let Some(prefix) = path.strip_prefix("?list-type=2&prefix=") {
                let mut keys: Vec<_> = self.objects.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
                keys.sort();
                let body: String = keys
                    .iter()
                    .map(|(k, v)| format!("<Contents><Key>{k}</Key><Size>{}</Size></Contents>", v.len()))
                    .collect();
                return Ok(Some(
                    format!("<ListBucketResult><IsTruncated>false</IsTruncated>{body}</ListBucketResult>").into_bytes(),
                ));
            }
            Ok(self.objects.get(path).cloned())
        }
    }

    fn config(dir: &Path) -> FetchConfig {
        FetchConfig {
            backoff: StdDuration::from_millis(1),
            ..FetchConfig::new(dir)
        }
    }

    fn goes_keys(day: u32, hour: u32) -> Vec<(String, usize)> {
        GOES_PRODUCTS
            .iter()
            .flat_map(|p| {
                (0..2).map(move |m| (format!("{}/2023/{day:03}/{hour:02}/OR_{}_s{m}.nc", p.name, p.name), 100 + m))
            })
            .collect()
    }

    fn bucket(keys: &[(String, usize)]) -> MockBucket {
        let refs: Vec<(&str, usize)> = keys.iter().map(|(k, n)| (k.as_str(), *n)).collect();
        MockBucket::new(&refs)
    }

    #[test]
    fn second_request_makes_no_network_calls() {
        let dir = tempfile::tempdir().unwrap();
        let t = Utc.with_ymd_and_hms(2023, 4, 1, 5, 0, 0).unwrap();
        let b = bucket(&goes_keys(91, 5));
        let cfg = config(dir.path());
        let first = fetch_products(&b, &cfg, Source::Goes, t, t + Duration::hours(1)).unwrap();
        assert_eq!(first.downloaded, 8);
        assert!(first.gaps.is_empty());
        b.calls.borrow_mut().clear();
        let again = fetch_products(&b, &cfg, Source::Goes, t, t + Duration::hours(1)).unwrap();
        assert!(b.calls.borrow().is_empty());
        assert_eq!(again.reused, 8);
        assert_eq!(again.fetched, first.fetched);
    }

    #[test]
    fn truncated_file_is_downloaded_again() {
        let dir = tempfile::tempdir().unwrap();
        let t = Utc.with_ymd_and_hms(2023, 4, 1, 5, 0, 0).unwrap();
        let b = bucket(&goes_keys(91, 5));
        let cfg = config(dir.path());
        let first = fetch_products(&b, &cfg, Source::Goes, t, t + Duration::hours(1)).unwrap();
        fs::write(&first.fetched[0].files[0], b"x").unwrap();
        let again = fetch_products(&b, &cfg, Source::Goes, t, t + Duration::hours(1)).unwrap();
        assert_eq!(again.downloaded, 1);
    }

    #[test]
    fn missing_hour_is_a_gap() {
        let dir = tempfile::tempdir().unwrap();
        let t = Utc.with_ymd_and_hms(2023, 4, 1, 6, 0, 0).unwrap();
        let b = bucket(&goes_keys(91, 5));
        let report = fetch_products(&b, &config(dir.path()), Source::Goes, t, t + Duration::hours(1)).unwrap();
        assert_eq!(report.gaps.len(), GOES_PRODUCTS.len());
        assert!(report.fetched.is_empty());
    }

    #[test]
    fn two_hours_give_files_per_product_per_hour() {
        let dir = tempfile::tempdir().unwrap();
        let t = Utc.with_ymd_and_hms(2023, 4, 1, 5, 0, 0).unwrap();
        let mut keys = goes_keys(91, 5);
        keys.extend(goes_keys(91, 6));
        let b = bucket(&keys);
        let report = fetch_products(&b, &config(dir.path()), Source::Goes, t, t + Duration::hours(2)).unwrap();
        for p in GOES_PRODUCTS {
            let n: usize = report
                .fetched
                .iter()
                .filter(|f| f.product == p.name)
                .map(|f| f.files.len())
                .sum();
            assert!(n >= 2, "{}", p.name);
        }
    }

    #[test]
    fn nexrad_keys_use_station_site_code() {
        let dir = tempfile::tempdir().unwrap();
        let t = Utc.with_ymd_and_hms(2023, 4, 1, 5, 0, 0).unwrap();
        let keys = vec![
            ("DAL_TZL_2023_04_01_05_02_11".to_string(), 50),
            ("DAL_TZL_2023_04_01_05_31_40".to_string(), 60),
            ("DAL_TZL_2023_04_01_06_00_05".to_string(), 70),
        ];
        let b = bucket(&keys);
        let report = fetch_products(&b, &config(dir.path()), Source::Nexrad, t, t + Duration::hours(1)).unwrap();
        assert_eq!(report.downloaded, 2);
    }

    #[test]
    fn transient_errors_are_retried_then_surface() {
        let dir = tempfile::tempdir().unwrap();
        let t = Utc.with_ymd_and_hms(2023, 4, 1, 5, 0, 0).unwrap();
        let b = bucket(&goes_keys(91, 5));
        *b.fail_first.borrow_mut() = 2;
        let cfg = config(dir.path());
        assert!(fetch_products(&b, &cfg, Source::Goes, t, t + Duration::hours(1)).is_ok());

        let b = bucket(&goes_keys(91, 5));
        *b.fail_first.borrow_mut() = 100;
        let err = fetch_products(&b, &config(dir.path()), Source::Nexrad, t, t + Duration::hours(1)).unwrap_err();
        assert!(matches!(err, Error::Fetch { .. }));
        assert_eq!(b.calls.borrow().len(), cfg.max_attempts as usize);
    }

    #[test]
    fn listing_parser_reads_keys_and_sizes() {
        let xml = "<ListBucketResult><Contents><Key>a/b.nc</Key><LastModified>x</LastModified>\
                   <Size>12</Size></Contents><Contents><Key>c</Key><Size>3</Size></Contents></ListBucketResult>";
        assert_eq!(
            parse_listing(xml),
            vec![
                RemoteObject {
                    key: "a/b.nc".into(),
                    size: 12
                },
                RemoteObject { key: "c".into(), size: 3 }
            ]
        );
    }
}
