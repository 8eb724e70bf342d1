"""
Constants for the NFV gateway emulator.
"""

# Service hosts used by the in-process transport
GATEWAY_HOST = "gateway:8000"
VWSN1_HOST = "vwsn1:8001"
VWSN2_HOST = "vwsn2:8002"
APP_HOST = "app:9000"
# parent of a split run; children relay control events to it
HARNESS_HOST = "harness:9100"

DEFAULT_CALLBACK_PATH = "/measurements"
NF_VI_PATH = "/nf-vi"
LOOPBACK_ADDRESS = "127.0.0.1"
DEFAULT_SPLIT_BASE_PORT = 18080
EVENTS_PATH = "/events"
SHUTDOWN_PATH = "/shutdown"
SPLIT_START_TIMEOUT_S = 30
SPLIT_STOP_TIMEOUT_S = 30

SENML_CONTENT_TYPE = "application/senml+json"
RAW_CONTENT_TYPE = "application/octet-stream"
JSON_CONTENT_TYPE = "application/json"

TRACE_ID_HEADER = "X-Trace-Id"
TRACE_META_HEADER = "X-Trace-Meta"
EMIT_TIME_HEADER = "X-Emit-Ms"

# Scenario timing defaults (milliseconds unless noted)
DEFAULT_EPOCH_MS = 1_700_000_000_000
DEFAULT_CONTROL_LATENCY_MS = 5
DEFAULT_LINK_LATENCY_MS = 2
DEFAULT_LEG_TIMEOUT_MS = 10_000
DEFAULT_RECONCILE_PERIOD_MS = 1_000
DEFAULT_DURATION_S = 60
DEFAULT_DRAIN_S = 10
DEFAULT_SEED = 7

# Load estimation
LOAD_WINDOW_S = 5
LOAD_BUCKET_MS = 1_000

# Service request constraints
MIN_PERIODIC_INTERVAL_MS = 100

CONTROL_RETRY_ATTEMPTS = 3
