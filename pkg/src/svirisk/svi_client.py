"""Street-view imagery client: metadata probing, filtering, caching and rate limiting.

Providers implement two methods, ``probe(coordinate) -> ImageMetadata`` and
``fetch(metadata, size) -> bytes``. :class:`SviClient` adds the month/source
filter, transient-error retries, an on-disk cache and a shared rate limiter.
"""

from __future__ import annotations

import io
import logging
import os
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from PIL import Image

from .artifacts import atomic_write_bytes, read_json, write_json
from .errors import IntegrityError, TransportError, ValidationError
from .projection import Wgs84Point

log = logging.getLogger(__name__)

ACQUISITION_SIZE = (512, 512)
API_KEY_ENV = "SVI_API_KEY"


@dataclass(frozen=True)
class MonthWindow:
    first_month: int = 5
    last_month: int = 9

    def __post_init__(self):
        if not 1 <= self.first_month <= self.last_month <= 12:
            raise ValidationError(f"invalid month window {self.first_month}-{self.last_month}")

    @classmethod
    def parse(cls, text: str) -> "MonthWindow":
        a, _, b = str(text).partition("-")
        try:
            return cls(int(a), int(b or a))
        except ValueError:
            raise ValidationError(f"month window must look like 5-9, got {text!r}") from None

    def __contains__(self, month: int) -> bool:
        return self.first_month <= month <= self.last_month


@dataclass(frozen=True)
class ImageRequest:
    coordinate: Wgs84Point
    size: tuple = ACQUISITION_SIZE
    pano_id: str | None = None


@dataclass(frozen=True)
class ImageMetadata:
    pano_id: str | None
    capture_date: str | None  # "YYYY-MM"
    source: str  # official | third_party
    status: str  # ok | not_found
    lat: float | None = None
    lon: float | None = None

    @property
    def capture_month(self) -> int | None:
        if not self.capture_date:
            return None
        return int(self.capture_date.split("-")[1])

    def acceptable(self, window: MonthWindow) -> bool:
        month = self.capture_month
        return self.status == "ok" and self.source == "official" and month is not None and month in window


def with_transport_retries(fn: Callable, retries: int = 3, base_delay: float = 1.0, sleep=time.sleep):
    """Call ``fn()`` retrying :class:`TransportError` up to ``retries`` times with exponential backoff."""
    for attempt in range(retries + 1):
        try:
            return fn()
        except TransportError as exc:
            if attempt == retries:
                raise
            delay = base_delay * 2**attempt
            log.warning("transient provider error (%s); retry %d/%d in %.1fs", exc, attempt + 1, retries, delay)
            sleep(delay)


class RateLimiter:
    """Spaces calls at least ``1/limit`` seconds apart across threads.

    Even spacing keeps every half-open one-second window at or below ``limit``
    calls without allowing an initial burst.
    """

    def __init__(self, limit: float, clock=time.monotonic, sleep=time.sleep):
        if not limit > 0:
            raise ValidationError("rate limit must be > 0")
        self.interval = 1.0 / limit
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = None

    def acquire(self) -> float:
        # Releases are serialized and spaced from the actual wake-up time, so
        # oversleeping one call never lets the next one catch up.
        with self._lock:
            if self._next is not None:
                wait = self._next - self._clock()
                if wait > 0:
                    self._sleep(wait)
            now = self._clock()
            self._next = now + self.interval
            return now


def rate_limited_execute(requests, limit: float, workers: int = 4, limiter: RateLimiter | None = None) -> dict:
    """Run callables under a shared rate limit.

    ``requests`` maps request id to a zero-argument callable (or is an
    iterable of ``(id, callable)`` pairs). Returns ``id -> result``; a request
    that raised maps to the exception instance.
    """
    items = list(requests.items() if isinstance(requests, Mapping) else requests)
    limiter = limiter or RateLimiter(limit)

    def run(fn):
        limiter.acquire()
        try:
            return fn()
        except Exception as exc:  # per-request failures are returned, not raised
            return exc

    if not items:
        return {}
    with ThreadPoolExecutor(max(1, min(workers, len(items)))) as ex:
        futures = {rid: ex.submit(run, fn) for rid, fn in items}
        return {rid: f.result() for rid, f in futures.items()}


class MockProvider:
    """Deterministic offline provider.

    Availability, capture month and source are derived from a hash of the
    rounded coordinate, so the same coordinate always gives the same answer.
    ``metadata_fn`` overrides that with a scripted response; ``color_fn``
    chooses the base RGB colour of the synthesized image for a coordinate.
    Every provider call is recorded in ``calls`` with a monotonic timestamp.
    """

    def __init__(
        self,
        seed: int = 0,
        coverage: float = 0.8,
        official_rate: float = 0.9,
        metadata_fn: Callable | None = None,
        color_fn: Callable | None = None,
        fail_fetch: Mapping | None = None,
        image_size: tuple = ACQUISITION_SIZE,
    ):
        self.seed = seed
        self.coverage = coverage
        self.official_rate = official_rate
        self.metadata_fn = metadata_fn
        self.color_fn = color_fn
        self.fail_fetch = dict(fail_fetch or {})
        self.image_size = image_size
        self.calls = []
        self._lock = threading.Lock()
        self._by_pano = {}

    def _record(self, kind, key):
        with self._lock:
            self.calls.append((kind, key, time.monotonic()))

    def _u(self, coordinate: Wgs84Point, salt: str) -> float:
        key = f"{self.seed}:{salt}:{coordinate.lat:.7f}:{coordinate.lon:.7f}".encode()
        return zlib.crc32(key) / 2**32

    def probe(self, coordinate: Wgs84Point) -> ImageMetadata:
        self._record("probe", (coordinate.lat, coordinate.lon))
        if self.metadata_fn is not None:
            meta = self.metadata_fn(coordinate)
        elif self._u(coordinate, "cov") >= self.coverage:
            meta = ImageMetadata(None, None, "official", "not_found")
        else:
            month = 1 + int(self._u(coordinate, "month") * 12)
            year = 2016 + int(self._u(coordinate, "year") * 7)
            source = "official" if self._u(coordinate, "src") < self.official_rate else "third_party"
            pano = f"mock{zlib.crc32(f'{self.seed}:{coordinate.lat:.7f}:{coordinate.lon:.7f}'.encode()):08x}"
            meta = ImageMetadata(pano, f"{year}-{month:02d}", source, "ok", coordinate.lat, coordinate.lon)
        if meta.pano_id:
            with self._lock:
                self._by_pano[meta.pano_id] = meta
        return meta

    def fetch(self, metadata: ImageMetadata, size: tuple) -> bytes:
        self._record("fetch", metadata.pano_id)
        if metadata.pano_id in self.fail_fetch:
            status = self.fail_fetch[metadata.pano_id]
            raise TransportError(f"HTTP {status}: mock provider refused {metadata.pano_id}", status=status)
        w, h = self.image_size
        rng = np.random.default_rng(zlib.crc32(str(metadata.pano_id).encode()))
        base = np.array([0.5, 0.5, 0.5])
        if self.color_fn is not None and metadata.lat is not None:
            base = np.asarray(self.color_fn(Wgs84Point(metadata.lat, metadata.lon)), dtype=float)
        img = base[None, None, :] + rng.normal(0.0, 0.08, (h, w, 3))
        # a horizon band gives the images some spatial structure
        img[: h // 3] = 0.6 * img[: h // 3] + 0.4 * np.array([0.55, 0.7, 0.9])
        arr = (np.clip(img, 0, 1) * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=90)
        return buf.getvalue()


class HttpProvider:
    """Official street-view HTTP API.

    The metadata endpoint returns JSON with ``status``, ``date`` ("YYYY-MM"),
    ``copyright`` and ``pano_id``; imagery counts as official when the
    copyright names ``official_copyright``. The key comes from ``SVI_API_KEY``
    and is never logged.
    """

    def __init__(
        self,
        metadata_url: str = "https://maps.googleapis.com/maps/api/streetview/metadata",
        image_url: str = "https://maps.googleapis.com/maps/api/streetview",
        api_key: str | None = None,
        official_copyright: str = "Google",
        session=None,
        timeout: float = 30.0,
    ):
        self.metadata_url = metadata_url
        self.image_url = image_url
        self._key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self._key:
            raise ValidationError(f"set {API_KEY_ENV} to use the HTTP provider")
        self.official_copyright = official_copyright
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.timeout = timeout

    def __repr__(self):
        return f"HttpProvider(metadata_url={self.metadata_url!r})"

    def _get(self, url, params):
        try:
            resp = self.session.get(url, params=dict(params, key=self._key), timeout=self.timeout)
        except Exception as exc:
            raise TransportError(f"request to {url} failed: {type(exc).__name__}") from None
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code)
        return resp

    def probe(self, coordinate: Wgs84Point) -> ImageMetadata:
        data = self._get(self.metadata_url, {"location": f"{coordinate.lat},{coordinate.lon}"}).json()
        if data.get("status") != "OK":
            return ImageMetadata(None, None, "official", "not_found")
        loc = data.get("location") or {}
        source = "official" if self.official_copyright in (data.get("copyright") or "") else "third_party"
        return ImageMetadata(
            data.get("pano_id"), data.get("date"), source, "ok",
            loc.get("lat", coordinate.lat), loc.get("lng", coordinate.lon),
        )

    def fetch(self, metadata: ImageMetadata, size: tuple) -> bytes:
        params = {"pano": metadata.pano_id, "size": f"{size[0]}x{size[1]}"}
        return self._get(self.image_url, params).content


@dataclass
class ClientStats:
    probes: int = 0
    network_fetches: int = 0
    cache_hits: int = 0


class SviClient:
    def __init__(
        self,
        provider,
        cache_dir,
        window: MonthWindow = MonthWindow(),
        rate_limit: float | None = None,
        retries: int = 3,
        backoff_base: float = 1.0,
        sleep=time.sleep,
    ):
        self.provider = provider
        self.cache_dir = Path(cache_dir)
        self.window = window
        self.limiter = RateLimiter(rate_limit, sleep=sleep) if rate_limit else None
        self.retries = retries
        self.backoff_base = backoff_base
        self._sleep = sleep
        self.stats = ClientStats()

    def _call(self, fn):
        def limited():
            if self.limiter is not None:
                self.limiter.acquire()
            return fn()

        return with_transport_retries(limited, self.retries, self.backoff_base, self._sleep)

    def probe_metadata(self, coordinate: Wgs84Point, window: MonthWindow | None = None) -> ImageMetadata | None:
        """Metadata for acquirable imagery at ``coordinate``, or None.

        Transport failures surface as :class:`TransportError` after retries,
        distinct from the None returned for absent or filtered imagery.
        """
        self.stats.probes += 1
        meta = self._call(lambda: self.provider.probe(coordinate))
        return meta if meta.acceptable(window or self.window) else None

    def cache_path(self, pano_id: str, size: tuple) -> Path:
        return self.cache_dir / pano_id / f"{size[0]}x{size[1]}.jpg"

    def fetch_image(self, request: ImageRequest, metadata: ImageMetadata | None = None) -> np.ndarray:
        """Return the image as a ``(H, W, 3)`` uint8 array, downloading on cache miss."""
        meta = metadata
        if meta is None:
            meta = self.probe_metadata(request.coordinate)
            if meta is None:
                raise ValidationError(f"no acquirable imagery at {request.coordinate}")
        pano = request.pano_id or meta.pano_id
        path = self.cache_path(pano, request.size)
        if path.exists():
            self.stats.cache_hits += 1
            data = path.read_bytes()
        else:
            data = self._call(lambda: self.provider.fetch(meta, request.size))
            self.stats.network_fetches += 1
            arr = _decode(data, request.size)
            atomic_write_bytes(path, data)
            write_json(path.with_suffix(".json"), {k: v for k, v in asdict(meta).items()})
            return arr
        return _decode(data, request.size)

    def cached_metadata(self, pano_id: str, size: tuple = ACQUISITION_SIZE) -> ImageMetadata:
        return ImageMetadata(**read_json(self.cache_path(pano_id, size).with_suffix(".json")))


def _decode(data: bytes, size: tuple) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise IntegrityError(f"undecodable image payload: {exc}") from None
    arr = np.asarray(img.convert("RGB"))
    if (arr.shape[1], arr.shape[0]) != tuple(size):
        raise IntegrityError(f"expected {size[0]}x{size[1]} image, got {arr.shape[1]}x{arr.shape[0]}")
    return arr


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))
