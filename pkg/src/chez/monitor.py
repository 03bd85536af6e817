"""Session monitoring pipeline: ingestion, per-site windowed KPIs, a
deterministic statistical anomaly detector, and the risk score behind
adaptive MFA.

Time comes exclusively from the events themselves; nothing in here reads a
wall clock, so identical event sequences always produce identical
snapshots, flags and scores.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping, Optional

from .audit import AuditLog
from .errors import MalformedEvent, WindowMismatch


class EventKind(str, enum.Enum):
    LOGIN_SUCCESS = "LOGIN_SUCCESS"
    LOGIN_FAILURE = "LOGIN_FAILURE"
    ACCESS_DENIED = "ACCESS_DENIED"
    ACCESS_PERMITTED = "ACCESS_PERMITTED"
    LATENCY_SAMPLE = "LATENCY_SAMPLE"
    CUSTOM = "CUSTOM"


@dataclass(frozen=True)
class TelemetryEvent:
    time: float
    site: str
    kind: EventKind
    subject: Optional[str] = None
    attributes: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "TelemetryEvent":
        try:
            kind = EventKind(raw["kind"])
            time_value = float(raw["time"])
            site = raw["site"]
        except (KeyError, ValueError, TypeError):
            raise MalformedEvent("event needs time, site and a known kind") from None
        if not isinstance(site, str) or not site:
            raise MalformedEvent("site must be a non-empty string")
        return cls(time=time_value, site=site, kind=kind,
                   subject=raw.get("subject"),
                   attributes=dict(raw.get("attributes", {})))


# --- latency histograms -------------------------------------------------------

# Fixed exponential boundaries (ms), 1 ms .. ~16 s, shared by every site so
# histograms merge bucket-wise.
HISTOGRAM_BOUNDS: tuple[float, ...] = tuple(float(2 ** i) for i in range(15))
_OVERFLOW_EDGE = HISTOGRAM_BOUNDS[-1] * 2


class Histogram:
    __slots__ = ("counts",)

    def __init__(self, counts: Optional[list[int]] = None):
        self.counts = counts or [0] * (len(HISTOGRAM_BOUNDS) + 1)

    def add(self, value_ms: float) -> None:
        for i, bound in enumerate(HISTOGRAM_BOUNDS):
            if value_ms <= bound:
                self.counts[i] += 1
                return
        self.counts[-1] += 1

    def merge(self, other: "Histogram") -> "Histogram":
        return Histogram([a + b for a, b in zip(self.counts, other.counts)])

    @property
    def total(self) -> int:
        return sum(self.counts)

    def percentile(self, q: float) -> Optional[float]:
        """Upper edge of the bucket where the CDF crosses q."""
        total = self.total
        if total == 0:
            return None
        target = q * total
        cumulative = 0
        for i, count in enumerate(self.counts):
            cumulative += count
            if cumulative >= target:
                return HISTOGRAM_BOUNDS[i] if i < len(HISTOGRAM_BOUNDS) else _OVERFLOW_EDGE
        return _OVERFLOW_EDGE


@dataclass
class KpiSnapshot:
    site: str
    window_start: float
    window_end: float
    counters: dict[str, int]
    histogram: Histogram

    @property
    def p50(self) -> Optional[float]:
        return self.histogram.percentile(0.50)

    @property
    def p95(self) -> Optional[float]:
        return self.histogram.percentile(0.95)

    def as_dict(self) -> dict:
        return {
            "site": self.site,
            "window": [self.window_start, self.window_end],
            "counters": dict(self.counters),
            "p50": self.p50,
            "p95": self.p95,
        }


# --- EWMA baseline and detector -------------------------------------------------

class EwmaBaseline:
    """Exponentially weighted mean/variance; first sample seeds the mean."""

    __slots__ = ("alpha", "count", "mean", "var")

    def __init__(self, alpha: float):
        self.alpha = alpha
        self.count = 0
        self.mean = 0.0
        self.var = 0.0

    def update(self, x: float) -> None:
        if self.count == 0:
            self.mean = x
            self.var = 0.0
        else:
            diff = x - self.mean
            incr = self.alpha * diff
            self.mean += incr
            self.var = (1.0 - self.alpha) * (self.var + diff * incr)
        self.count += 1

    @property
    def std(self) -> float:
        return math.sqrt(self.var)


@dataclass(frozen=True)
class AnomalyFlag:
    time: float
    kind: str
    site: str
    metric: str
    observed: float
    threshold: float

    def as_record(self) -> dict:
        return {"time": self.time, "kind": self.kind, "site": self.site,
                "metric": self.metric, "observed": self.observed,
                "threshold": self.threshold}


class AnomalyDetector:
    """Flags windows whose metric exceeds EWMA mean + k * EWMA std.

    The incoming window is evaluated against the baseline built from the
    windows before it, then folded into the baseline; no flags are raised
    until the baseline holds at least ``warmup`` windows.
    """

    FAILED_LOGIN_SPIKE = "FAILED_LOGIN_SPIKE"
    LATENCY_P95_SPIKE = "LATENCY_P95_SPIKE"

    def __init__(self, alpha: float = 0.3, k: float = 3.0, warmup: int = 10):
        self.alpha = alpha
        self.k = k
        self.warmup = warmup
        self._baselines: dict[tuple[str, str], EwmaBaseline] = {}

    def observe(self, snapshot: KpiSnapshot) -> list[AnomalyFlag]:
        flags = []
        failures = float(snapshot.counters.get(EventKind.LOGIN_FAILURE.value, 0))
        flag = self._observe_metric(snapshot, "login_failures", failures,
                                    self.FAILED_LOGIN_SPIKE)
        if flag:
            flags.append(flag)
        p95 = snapshot.p95
        if p95 is not None:
            flag = self._observe_metric(snapshot, "latency_p95", p95,
                                        self.LATENCY_P95_SPIKE)
            if flag:
                flags.append(flag)
        return flags

    def _observe_metric(self, snapshot: KpiSnapshot, metric: str, value: float,
                        flag_kind: str) -> Optional[AnomalyFlag]:
        baseline = self._baselines.setdefault((snapshot.site, metric),
                                              EwmaBaseline(self.alpha))
        flag = None
        if baseline.count >= self.warmup:
            threshold = baseline.mean + self.k * baseline.std
            if value > threshold:
                flag = AnomalyFlag(time=snapshot.window_end, kind=flag_kind,
                                   site=snapshot.site, metric=metric,
                                   observed=value, threshold=threshold)
        baseline.update(value)
        return flag


# --- risk scoring ---------------------------------------------------------------

@dataclass(frozen=True)
class RiskContext:
    subject: str
    recent_failures: int
    new_device: bool
    new_location: bool
    off_hours: bool


@dataclass(frozen=True)
class RiskWeights:
    failures: float = 0.4
    new_device: float = 0.3
    new_location: float = 0.2
    off_hours: float = 0.1


def risk_score(context: RiskContext, weights: RiskWeights = RiskWeights()) -> float:
    raw = (
        weights.failures * min(context.recent_failures / 5.0, 1.0)
        + weights.new_device * (1.0 if context.new_device else 0.0)
        + weights.new_location * (1.0 if context.new_location else 0.0)
        + weights.off_hours * (1.0 if context.off_hours else 0.0)
    )
    return max(0.0, min(1.0, raw))


OFF_HOURS_START = 22  # inclusive, UTC hour
OFF_HOURS_END = 6  # exclusive


def is_off_hours(at_time: float) -> bool:
    hour = datetime.fromtimestamp(at_time, tz=timezone.utc).hour
    return hour >= OFF_HOURS_START or hour < OFF_HOURS_END


# --- per-site mediation engine ---------------------------------------------------

class MediationEngine:
    """Orders one site's stream into fixed windows and keeps its KPIs."""

    def __init__(self, site: str, window_seconds: float, detector: AnomalyDetector):
        self.site = site
        self.window_seconds = window_seconds
        self.detector = detector
        self.watermark: Optional[float] = None
        self.events: list[TelemetryEvent] = []
        self.snapshots: list[KpiSnapshot] = []
        self.flags: list[AnomalyFlag] = []
        self._open_start: Optional[float] = None
        self._open_counters: dict[str, int] = {}
        self._open_hist = Histogram()
        self._lock = threading.Lock()

    def ingest(self, event: TelemetryEvent) -> None:
        with self._lock:
            if self.watermark is not None and event.time < self.watermark:
                raise MalformedEvent("out-of-order event (behind stream watermark)")
            self.watermark = event.time
            window_start = math.floor(event.time / self.window_seconds) * self.window_seconds
            if self._open_start is None:
                self._open_start = window_start
            elif window_start > self._open_start:
                self._close_window()
                self._open_start = window_start
            self.events.append(event)
            self._open_counters[event.kind.value] = \
                self._open_counters.get(event.kind.value, 0) + 1
            if event.kind is EventKind.LATENCY_SAMPLE:
                latency = event.attributes.get("latency_ms")
                if latency is None:
                    raise MalformedEvent("latency sample without latency_ms")
                self._open_hist.add(float(latency))

    def flush(self) -> None:
        """Close the in-progress window, if any."""
        with self._lock:
            if self._open_start is not None and (self._open_counters or
                                                 self._open_hist.total):
                self._close_window()
            self._open_start = None

    def _close_window(self) -> None:
        snapshot = KpiSnapshot(
            site=self.site,
            window_start=self._open_start,
            window_end=self._open_start + self.window_seconds,
            counters=dict(self._open_counters),
            histogram=self._open_hist,
        )
        self.snapshots.append(snapshot)
        self.flags.extend(self.detector.observe(snapshot))
        self._open_counters = {}
        self._open_hist = Histogram()

    def snapshot_for(self, window_start: float) -> Optional[KpiSnapshot]:
        for snap in self.snapshots:
            if snap.window_start == window_start:
                return snap
        return None


# --- aggregation ------------------------------------------------------------------

def aggregate_global(snapshots: Iterable[KpiSnapshot]) -> KpiSnapshot:
    """Merge aligned per-site snapshots: counters sum, histograms merge
    bucket-wise (never averaged)."""
    snapshots = list(snapshots)
    if not snapshots:
        raise WindowMismatch("nothing to aggregate")
    window = (snapshots[0].window_start, snapshots[0].window_end)
    counters: dict[str, int] = {}
    hist = Histogram()
    for snap in snapshots:
        if (snap.window_start, snap.window_end) != window:
            raise WindowMismatch(
                f"window {snap.window_start} does not align with {window[0]}")
        for kind, count in snap.counters.items():
            counters[kind] = counters.get(kind, 0) + count
        hist = hist.merge(snap.histogram)
    return KpiSnapshot(site="*", window_start=window[0], window_end=window[1],
                       counters=counters, histogram=hist)


# --- facade -------------------------------------------------------------------------

RECENT_FAILURE_WINDOW = 600.0  # trailing seconds counted into the risk context


class SessionMonitor:
    """Telemetry entry point plus the per-subject state behind risk scoring."""

    def __init__(self, window_seconds: float = 10.0, alpha: float = 0.3,
                 k: float = 3.0, warmup: int = 10,
                 weights: RiskWeights = RiskWeights(),
                 audit: Optional[AuditLog] = None):
        self.window_seconds = window_seconds
        self.alpha = alpha
        self.k = k
        self.warmup = warmup
        self.weights = weights
        self.audit = audit
        self._sites: dict[str, MediationEngine] = {}
        self._subject_failures: dict[str, list[float]] = {}
        self._subject_devices: dict[str, set] = {}
        self._subject_locations: dict[str, set] = {}
        self._lock = threading.Lock()

    # -- ingestion ------------------------------------------------------------

    def ingest(self, event: TelemetryEvent) -> None:
        engine = self._engine(event.site)
        flags_before = len(engine.flags)
        engine.ingest(event)
        self._track_subject(event)
        self._emit_flags(engine, flags_before)

    def ingest_dict(self, raw: Mapping[str, Any]) -> None:
        self.ingest(TelemetryEvent.from_dict(raw))

    def flush(self) -> None:
        for engine in list(self._sites.values()):
            flags_before = len(engine.flags)
            engine.flush()
            self._emit_flags(engine, flags_before)

    def _engine(self, site: str) -> MediationEngine:
        with self._lock:
            if site not in self._sites:
                detector = AnomalyDetector(self.alpha, self.k, self.warmup)
                self._sites[site] = MediationEngine(site, self.window_seconds,
                                                    detector)
            return self._sites[site]

    def _emit_flags(self, engine: MediationEngine, since: int) -> None:
        if self.audit is None:
            return
        for flag in engine.flags[since:]:
            self.audit.emit("anomaly_flag", **flag.as_record())

    def _track_subject(self, event: TelemetryEvent) -> None:
        if not event.subject:
            return
        with self._lock:
            if event.kind is EventKind.LOGIN_FAILURE:
                self._subject_failures.setdefault(event.subject, []).append(event.time)
            elif event.kind is EventKind.LOGIN_SUCCESS:
                device = event.attributes.get("device_id")
                if device:
                    self._subject_devices.setdefault(event.subject, set()).add(device)
                source = event.attributes.get("source")
                if source:
                    self._subject_locations.setdefault(event.subject, set()).add(source)

    # -- queries ---------------------------------------------------------------

    def sites(self) -> list[str]:
        with self._lock:
            return sorted(self._sites)

    def kpi(self, site: str, window_start: float) -> Optional[KpiSnapshot]:
        with self._lock:
            engine = self._sites.get(site)
        return engine.snapshot_for(window_start) if engine else None

    def snapshots(self, site: str) -> list[KpiSnapshot]:
        with self._lock:
            engine = self._sites.get(site)
        return list(engine.snapshots) if engine else []

    def flags(self, site: Optional[str] = None) -> list[AnomalyFlag]:
        with self._lock:
            engines = ([self._sites[site]] if site and site in self._sites
                       else list(self._sites.values()))
        out: list[AnomalyFlag] = []
        for engine in engines:
            out.extend(engine.flags)
        return out

    def global_kpi(self, window_start: float) -> KpiSnapshot:
        snaps = [s for site in self.sites()
                 for s in [self.kpi(site, window_start)] if s is not None]
        return aggregate_global(snaps)

    def search(self, subject: str) -> list[TelemetryEvent]:
        """Global search: the subject's events across every site."""
        with self._lock:
            engines = list(self._sites.values())
        found = [e for engine in engines for e in engine.events
                 if e.subject == subject]
        return sorted(found, key=lambda e: (e.time, e.site))

    # -- risk ---------------------------------------------------------------------

    def risk_context(self, subject: str, at_time: float,
                     device_id: Optional[str] = None,
                     source: Optional[str] = None) -> RiskContext:
        with self._lock:
            failures = self._subject_failures.get(subject, [])
            recent = sum(1 for t in failures
                         if at_time - RECENT_FAILURE_WINDOW <= t <= at_time)
            known_devices = self._subject_devices.get(subject, set())
            known_locations = self._subject_locations.get(subject, set())
        return RiskContext(
            subject=subject,
            recent_failures=recent,
            new_device=device_id is not None and device_id not in known_devices,
            new_location=source is not None and source not in known_locations,
            off_hours=is_off_hours(at_time),
        )

    def risk_score(self, context: RiskContext) -> float:
        return risk_score(context, self.weights)
