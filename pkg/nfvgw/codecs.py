"""
Wire codecs for the two sensor brands, the CoAP-lite and HTTP framings, and the SenML
information model.

Every multi-byte integer is big-endian on every format. All functions are pure.
"""

import math
import re
from dataclasses import dataclass
from enum import IntEnum
from struct import Struct
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple
from urllib.parse import urlsplit

import orjson

from .errors import BadUrl, EmptyInput, FrameError, MixedSensorIds, UnknownSensorCode
from .types import UNITS, Quantity, SensorBrand, SensorReading

# --- BrandA: length-prefixed CSV line ---

BRAND_A_TAG = "SPOT"
_LENGTH_PREFIX = Struct(">H")

QTY_CODES: Mapping[str, Quantity] = {
    "temp": Quantity.TEMPERATURE,
    "hum": Quantity.HUMIDITY,
    "wind": Quantity.WIND_SPEED,
    "co2": Quantity.CO2,
    "rain": Quantity.RAINFALL,
}
_CODE_FOR_QTY: Mapping[Quantity, str] = {qty: code for code, qty in QTY_CODES.items()}

_VALUE_RE = re.compile(r"-?\d+\.\d{2}")
_EPOCH_RE = re.compile(r"\d+")


def encode_brand_a(reading: SensorReading) -> bytes:
    """Frame ``reading`` as ``len(2B) + "SPOT,<id>,<code>,<value>,<epoch_ms>\\n"``."""
    if "," in reading.sensor_id or "\n" in reading.sensor_id:
        raise ValueError("sensor_id may not contain ',' or newlines")
    line = (
        f"{BRAND_A_TAG},{reading.sensor_id},{_CODE_FOR_QTY[reading.quantity]},"
        f"{reading.value:.2f},{reading.timestamp}\n"
    ).encode("ascii")
    if len(line) > 0xFFFF:
        raise ValueError("BrandA line exceeds the 16-bit length prefix")
    return _LENGTH_PREFIX.pack(len(line)) + line


def decode_brand_a(data: bytes) -> SensorReading:
    """Decode one length-prefixed BrandA frame."""
    if len(data) < _LENGTH_PREFIX.size:
        raise FrameError("BrandA frame shorter than its length prefix")
    (declared,) = _LENGTH_PREFIX.unpack_from(data)
    body = data[_LENGTH_PREFIX.size:]
    if len(body) != declared:
        raise FrameError(f"BrandA length prefix {declared} does not match body length {len(body)}")
    if not body.endswith(b"\n"):
        raise FrameError("BrandA line is not newline terminated")

    try:
        line = body[:-1].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FrameError("BrandA line is not ASCII") from exc

    fields = line.split(",")
    if len(fields) != 5:
        raise FrameError(f"BrandA line has {len(fields)} fields, expected 5")
    tag, sensor_id, qty_code, value_text, epoch_text = fields

    if tag != BRAND_A_TAG:
        raise FrameError(f"BrandA line starts with {tag!r}")
    if not sensor_id:
        raise FrameError("BrandA line has an empty sensor id")
    if qty_code not in QTY_CODES:
        raise FrameError(f"Unknown BrandA quantity code {qty_code!r}")
    if not _VALUE_RE.fullmatch(value_text):
        raise FrameError(f"BrandA value {value_text!r} is not a 2-digit decimal")
    if not _EPOCH_RE.fullmatch(epoch_text) or int(epoch_text) <= 0:
        raise FrameError(f"BrandA timestamp {epoch_text!r} is not a positive integer")

    return SensorReading(
        sensor_id=sensor_id,
        brand=SensorBrand.BRAND_A,
        quantity=QTY_CODES[qty_code],
        value=float(value_text),
        timestamp=int(epoch_text),
    )


# --- BrandB: 11-byte binary record with XOR checksum ---

BRAND_B_MAGIC = 0xAD
BRAND_B_FRAME_SIZE = 11
_BRAND_B_HEADER = Struct(">BHBHI")  # magic, sensor_id, sensor_code, raw_adc, epoch_s


class BrandBCode(IntEnum):
    TEMPERATURE = 0x01
    HUMIDITY = 0x02


BRAND_B_QUANTITIES: Mapping[int, Quantity] = {
    BrandBCode.TEMPERATURE: Quantity.TEMPERATURE,
    BrandBCode.HUMIDITY: Quantity.HUMIDITY,
}


class BrandBFields(NamedTuple):
    sensor_id: int
    sensor_code: int
    raw_adc: int
    epoch_s: int


def xor_checksum(data: bytes) -> int:
    checksum = 0
    for byte in data:
        checksum ^= byte
    return checksum


def encode_brand_b(sensor_id: int, sensor_code: int, raw_adc: int, epoch_s: int) -> bytes:
    if sensor_code not in BRAND_B_QUANTITIES:
        raise UnknownSensorCode(f"Unknown BrandB sensor code 0x{sensor_code:02x}")
    header = _BRAND_B_HEADER.pack(BRAND_B_MAGIC, sensor_id, sensor_code, raw_adc, epoch_s)
    return header + bytes([xor_checksum(header)])


def decode_brand_b(data: bytes) -> BrandBFields:
    """Decode one BrandB frame; the checksum is verified before any field is read."""
    if len(data) != BRAND_B_FRAME_SIZE:
        raise FrameError(f"BrandB frame is {len(data)} bytes, expected {BRAND_B_FRAME_SIZE}")
    if xor_checksum(data[:-1]) != data[-1]:
        raise FrameError("BrandB checksum mismatch")

    magic, sensor_id, sensor_code, raw_adc, epoch_s = _BRAND_B_HEADER.unpack_from(data)
    if magic != BRAND_B_MAGIC:
        raise FrameError(f"BrandB magic 0x{magic:02x} is not 0x{BRAND_B_MAGIC:02x}")
    if sensor_code not in BRAND_B_QUANTITIES:
        raise UnknownSensorCode(f"Unknown BrandB sensor code 0x{sensor_code:02x}")
    return BrandBFields(sensor_id, sensor_code, raw_adc, epoch_s)


# SHT11-class conversion coefficients
TEMP_D1 = -39.6
TEMP_D2 = 0.01
HUM_C1 = -2.0468
HUM_C2 = 0.0367
HUM_C3 = -1.5955e-6


def convert_brand_b(raw_adc: int, sensor_code: int) -> float:
    """Convert a raw BrandB ADC reading into physical units (°C or %RH)."""
    if sensor_code == BrandBCode.TEMPERATURE:
        return TEMP_D1 + TEMP_D2 * raw_adc
    if sensor_code == BrandBCode.HUMIDITY:
        return HUM_C1 + HUM_C2 * raw_adc + HUM_C3 * raw_adc * raw_adc
    raise UnknownSensorCode(f"Unknown BrandB sensor code 0x{sensor_code:02x}")


def raw_adc_for(value: float, sensor_code: int) -> int:
    """Inverse of convert_brand_b, rounded to the nearest representable ADC count."""
    if sensor_code == BrandBCode.TEMPERATURE:
        raw = round((value - TEMP_D1) / TEMP_D2)
    elif sensor_code == BrandBCode.HUMIDITY:
        # smaller root of HUM_C3*r^2 + HUM_C2*r + (HUM_C1 - value) = 0
        discriminant = HUM_C2 * HUM_C2 - 4 * HUM_C3 * (HUM_C1 - value)
        if discriminant < 0:
            raise ValueError(f"Humidity {value} is outside the sensor range")
        raw = round((-HUM_C2 + math.sqrt(discriminant)) / (2 * HUM_C3))
    else:
        raise UnknownSensorCode(f"Unknown BrandB sensor code 0x{sensor_code:02x}")
    return min(max(raw, 0), 0xFFFF)


def brand_b_reading(fields: BrandBFields) -> SensorReading:
    return SensorReading(
        sensor_id=str(fields.sensor_id),
        brand=SensorBrand.BRAND_B,
        quantity=BRAND_B_QUANTITIES[fields.sensor_code],
        value=convert_brand_b(fields.raw_adc, fields.sensor_code),
        timestamp=fields.epoch_s * 1000,
    )


def peek_sensor_id(brand: SensorBrand, data: bytes) -> str:
    """Best-effort sensor id of an undecoded frame; empty when the frame is unreadable."""
    if brand is SensorBrand.BRAND_A:
        parts = data[_LENGTH_PREFIX.size:].split(b",", 2)
        if len(parts) >= 2:
            return parts[1].decode("ascii", errors="replace")
        return ""
    if len(data) >= 3:
        return str(int.from_bytes(data[1:3], "big"))
    return ""


# --- CoAP-lite ---

COAP_VERSION = 1
COAP_PAYLOAD_MARKER = 0xFF
COAP_POST = 0x02
_COAP_HEADER = Struct(">BBH")


class CoapType(IntEnum):
    CON = 0
    NON = 1
    ACK = 2


@dataclass(frozen=True)
class CoapLiteMessage:
    type: CoapType
    code: int
    message_id: int
    payload: bytes = b""
    version: int = COAP_VERSION
    token_length: int = 0


def encode_coaplite(msg: CoapLiteMessage) -> bytes:
    if msg.version != COAP_VERSION:
        raise ValueError(f"CoAP-lite version must be {COAP_VERSION}")
    if msg.token_length != 0:
        raise ValueError("CoAP-lite token_length is fixed at 0")
    if not 0 <= msg.code <= 0xFF:
        raise ValueError("code must fit in one byte")
    if not 0 <= msg.message_id <= 0xFFFF:
        raise ValueError("message_id must fit in two bytes")

    first = (msg.version << 6) | (int(CoapType(msg.type)) << 4) | msg.token_length
    header = _COAP_HEADER.pack(first, msg.code, msg.message_id)
    if not msg.payload:
        return header
    return header + bytes([COAP_PAYLOAD_MARKER]) + msg.payload


def decode_coaplite(data: bytes) -> CoapLiteMessage:
    if len(data) < _COAP_HEADER.size:
        raise FrameError(f"CoAP-lite message is {len(data)} bytes, need at least 4")
    first, code, message_id = _COAP_HEADER.unpack_from(data)

    version = first >> 6
    type_bits = (first >> 4) & 0x03
    token_length = first & 0x0F
    if version != COAP_VERSION:
        raise FrameError(f"CoAP-lite version {version} is not {COAP_VERSION}")
    if token_length != 0:
        raise FrameError(f"CoAP-lite token length {token_length} is not 0")
    if type_bits not in CoapType._value2member_map_:
        raise FrameError(f"CoAP-lite type {type_bits} is not supported")

    rest = data[_COAP_HEADER.size:]
    payload = b""
    if rest:
        if rest[0] != COAP_PAYLOAD_MARKER:
            raise FrameError("CoAP-lite payload is missing its 0xFF marker")
        payload = rest[1:]
        if not payload:
            raise FrameError("CoAP-lite payload marker is followed by no payload")

    return CoapLiteMessage(
        type=CoapType(type_bits),
        code=code,
        message_id=message_id,
        payload=payload,
    )


# --- SenML ---

SENML_BASE_NAME_PREFIX = "urn:dev:sn:"
SENML_UNITS = frozenset(UNITS.values())


def encode_senml(readings: Sequence[SensorReading]) -> bytes:
    """Encode readings of one sensor as a SenML pack with a fixed key order."""
    if not readings:
        raise EmptyInput("encode_senml needs at least one reading")
    sensor_ids = {reading.sensor_id for reading in readings}
    if len(sensor_ids) > 1:
        raise MixedSensorIds(f"Readings span sensors {sorted(sensor_ids)}")

    records: List[Dict[str, object]] = []
    for index, reading in enumerate(readings):
        record: Dict[str, object] = {}
        if index == 0:
            record["bn"] = f"{SENML_BASE_NAME_PREFIX}{reading.sensor_id}"
        record["n"] = reading.quantity.value
        record["u"] = UNITS[reading.quantity]
        record["v"] = reading.value
        record["t"] = reading.timestamp // 1000
        records.append(record)
    return orjson.dumps(records)


def senml_violations(pack: object) -> List[str]:
    """Check a parsed SenML pack against the pack invariants."""
    if not isinstance(pack, list):
        return ["pack is not a JSON array"]
    if not pack:
        return ["pack is empty"]

    violations: List[str] = []
    for index, record in enumerate(pack):
        if not isinstance(record, dict):
            violations.append(f"record {index} is not an object")
            continue
        if index == 0:
            base_name = record.get("bn")
            if not isinstance(base_name, str) or not base_name.startswith(SENML_BASE_NAME_PREFIX):
                violations.append("record 0 lacks a urn:dev:sn base name")
        elif "bn" in record:
            violations.append(f"record {index} repeats bn")
        if not isinstance(record.get("n"), str):
            violations.append(f"record {index} lacks a name")
        if record.get("u") not in SENML_UNITS:
            violations.append(f"record {index} has unknown unit {record.get('u')!r}")
        value = record.get("v")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            violations.append(f"record {index} lacks a numeric v")
        extra_values = {"vs", "vb", "vd"} & set(record)
        if extra_values:
            violations.append(f"record {index} carries more than one value field")
        if not isinstance(record.get("t"), int):
            violations.append(f"record {index} lacks an integer t")
    return violations


def decode_senml(data: bytes) -> List[Dict[str, object]]:
    try:
        pack = orjson.loads(data)
    except orjson.JSONDecodeError as exc:
        raise FrameError("SenML pack is not valid JSON") from exc
    violations = senml_violations(pack)
    if violations:
        raise FrameError("; ".join(violations))
    return pack


# --- HTTP/1.1 POST template ---


@dataclass(frozen=True)
class HttpPost:
    host: str
    path: str
    content_type: str
    body: bytes


def split_url(url: str) -> Tuple[str, str]:
    """Return (host, path) of an absolute http(s) URL."""
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.netloc:
        raise BadUrl(f"URL {url!r} needs an http(s) scheme and a host")
    path = parts.path or "/"
    if parts.query:
        path = f"{path}?{parts.query}"
    return parts.netloc, path


def frame_http_post(url: str, content_type: str, body: bytes) -> bytes:
    host, path = split_url(url)
    head = (
        f"POST {path} HTTP/1.1\r\n"
        f"Host: {host}\r\n"
        f"Content-Type: {content_type}\r\n"
        f"Content-Length: {len(body)}\r\n"
        "\r\n"
    )
    return head.encode("ascii") + body


def parse_http_post(data: bytes) -> HttpPost:
    """Parse bytes produced by frame_http_post."""
    head, separator, body = data.partition(b"\r\n\r\n")
    if not separator:
        raise FrameError("HTTP request has no header terminator")
    lines = head.decode("ascii", errors="replace").split("\r\n")
    request_line = lines[0].split(" ")
    if len(request_line) != 3 or request_line[0] != "POST" or request_line[2] != "HTTP/1.1":
        raise FrameError(f"Unsupported HTTP request line {lines[0]!r}")

    headers: Dict[str, str] = {}
    for line in lines[1:]:
        name, colon, value = line.partition(":")
        if not colon:
            raise FrameError(f"Malformed HTTP header {line!r}")
        headers[name.strip().lower()] = value.strip()

    declared: Optional[str] = headers.get("content-length")
    if declared is None or not declared.isdigit() or int(declared) != len(body):
        raise FrameError("HTTP Content-Length does not match the body")
    if "host" not in headers:
        raise FrameError("HTTP request has no Host header")
    return HttpPost(
        host=headers["host"],
        path=request_line[1],
        content_type=headers.get("content-type", ""),
        body=body,
    )
