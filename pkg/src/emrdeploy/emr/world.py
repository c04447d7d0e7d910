"""Generative simulated EMR.

A latent severity factor per patient drives problem-list codes, medication
orders, background lab values and, with tunable strength, the abnormality of
ordered lab results. The same world backs both the warehouse export and the
transactional API, so a single source of truth underlies train and serve.

Randomness is split into independent seeded streams (patients, code tables,
per-patient timelines, per-panel-year orders, per-order results) so that a
drift configuration changes only facts on or after its start time.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from statistics import NormalDist
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from ..clock import UTC, format_ts, from_epoch, parse_ts, to_epoch, utc
from .catalog import COMPONENTS, LAB_CODES, PANELS, RACE_WEIGHTS, RACES, SEX_WEIGHTS, SEXES

logger = logging.getLogger(__name__)

YEAR_SECONDS = 365.25 * 86400
CONDITION, MEDICATION, LAB = 0, 1, 2
KIND_NAMES = ("Condition", "Medication", "LabResult")
KIND_INDEX = {name: i for i, name in enumerate(KIND_NAMES)}

# Coupling of the ordered result to severity at signal_strength=1, and of
# background lab values to severity.
RESULT_COUPLING = 0.9
LAB_COUPLING = 0.75
# Probit/logit scale factor used to convert log-odds deltas to latent shifts.
LOGIT_PROBIT = 1.702
LOOKBACK_BEFORE_START = timedelta(days=60)
HISTORY_YEARS = 5
# Orders pick patients with weight exp(ORDER_TILT * z), which shifts the
# ordered population's severity to N(ORDER_TILT, 1). A covariate shift adds
# its delta to the tilt, so the presenting population's mean moves by delta.
ORDER_TILT = 0.5


class InvalidConfig(ValueError):
    pass


class UnknownPatient(KeyError):
    pass


class UnknownOrder(KeyError):
    pass


@dataclass(frozen=True)
class DriftConfig:
    start_time: datetime
    covariate_shift: float = 0.0
    prevalence_shift: Mapping[str, float] = field(default_factory=dict)
    concept_shift: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "start_time": format_ts(self.start_time),
            "covariate_shift": self.covariate_shift,
            "prevalence_shift": dict(sorted(self.prevalence_shift.items())),
            "concept_shift": self.concept_shift,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DriftConfig:
        return cls(
            start_time=parse_ts(d["start_time"]),
            covariate_shift=float(d.get("covariate_shift", 0.0)),
            prevalence_shift={str(k): float(v) for k, v in d.get("prevalence_shift", {}).items()},
            concept_shift=float(d.get("concept_shift", 0.0)),
        )


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_patients: int = 5000
    condition_vocab_size: int = 200
    medication_vocab_size: int = 100
    signal_strength: float = 1.0
    result_delay: timedelta = timedelta(hours=2)
    drift: DriftConfig | None = None
    start_year: int = 2015
    n_years: int = 7
    prospective_days: int = 120
    orders_per_year: int = 2400
    panels: tuple[str, ...] = ("CBC", "METABOLIC", "MAGNESIUM")
    n_units: int | None = None
    medication_rate: float = 10.0
    lab_rate: float = 8.0

    def validate(self) -> None:
        if self.condition_vocab_size < 1 or self.medication_vocab_size < 1:
            raise InvalidConfig("vocabulary sizes must be >= 1")
        if self.n_patients < 1:
            raise InvalidConfig("n_patients must be >= 1")
        if self.signal_strength < 0:
            raise InvalidConfig("signal_strength must be >= 0")
        if self.result_delay < timedelta(0):
            raise InvalidConfig("result_delay must be non-negative")
        if self.n_years < 1 or self.prospective_days < 0 or self.orders_per_year < 0:
            raise InvalidConfig("bad timeline settings")
        unknown = set(self.panels) - set(PANELS)
        if unknown:
            raise InvalidConfig(f"unknown panels {sorted(unknown)}")
        if self.n_units is not None and self.n_units < 1:
            raise InvalidConfig("n_units must be >= 1")
        if self.drift is not None:
            if self.drift.start_time.second or self.drift.start_time.microsecond:
                raise InvalidConfig("drift start_time must fall on a whole minute")
            bad = set(self.drift.prevalence_shift) - set(COMPONENTS)
            if bad:
                raise InvalidConfig(f"prevalence_shift names unknown components {sorted(bad)}")

    @property
    def units(self) -> tuple[str, ...]:
        n = self.n_units if self.n_units is not None else max(1, self.n_patients // 100)
        return tuple(f"UNIT-{i + 1:02d}" for i in range(n))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["result_delay"] = self.result_delay.total_seconds()
        d["drift"] = None if self.drift is None else self.drift.to_dict()
        d["panels"] = list(self.panels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> WorldConfig:
        d = dict(d)
        if "result_delay" in d:
            d["result_delay"] = timedelta(seconds=float(d["result_delay"]))
        if d.get("drift") is not None:
            d["drift"] = DriftConfig.from_dict(d["drift"])
        if "panels" in d:
            d["panels"] = tuple(d["panels"])
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown world config keys {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    birth_date: date
    sex: str
    race: str
    unit_id: str
    severity: float = field(repr=False, compare=False)

    def public(self) -> dict[str, str]:
        return {
            "patient_id": self.patient_id,
            "birth_date": self.birth_date.isoformat(),
            "sex": self.sex,
            "race": self.race,
            "unit_id": self.unit_id,
        }


@dataclass(frozen=True)
class ClinicalEvent:
    patient_id: str
    kind: str
    code: str
    numeric_value: float | None
    abnormal: bool | None
    effective_time: datetime

    def __post_init__(self) -> None:
        if (self.kind == "LabResult") != (self.numeric_value is not None):
            raise ValueError("numeric_value present iff kind=LabResult")


@dataclass(frozen=True)
class DiagnosticOrder:
    order_id: str
    patient_id: str
    panel_code: str
    component_codes: tuple[str, ...]
    order_time: datetime


@dataclass(frozen=True)
class LabResult:
    order_id: str
    component_code: str
    value: float
    ref_low: float
    ref_high: float
    abnormal: bool
    result_time: datetime


@dataclass
class _Timeline:
    """Columnar per-patient event store, sorted by (time, kind, code, value)."""

    times: np.ndarray  # int64 epoch seconds
    kinds: np.ndarray  # int8
    codes: np.ndarray  # int32 index into World.code_table
    values: np.ndarray  # float64, NaN when absent
    abnormal: np.ndarray  # int8, -1 when absent


@dataclass
class Subscription:
    subscription_id: str
    panel_code: str
    callback_url: str


WRITEBACK_TARGETS = {"score": "ScoreColumn", "flowsheet": "Flowsheet", "inbasket": "Inbasket"}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


class World:
    """The simulated EMR: warehouse facts, transactional reads and write-back logs.

    All mutations and reads take the same lock so reads see a consistent snapshot.
    """

    def __init__(self, config: WorldConfig):
        config.validate()
        self.config = config
        self.retro_start = utc(config.start_year)
        self.retro_end = utc(config.start_year + config.n_years)
        self.horizon_end = self.retro_end + timedelta(days=config.prospective_days)
        self.start_time = utc(config.start_year - HISTORY_YEARS)
        self.units = config.units
        self._lock = threading.RLock()
        self.patients: dict[str, PatientRecord] = {}
        self._patient_index: dict[str, int] = {}
        self._severity = np.zeros(0)
        self.code_table: list[str] = []
        self._timelines: list[_Timeline] = []
        self.orders: dict[str, DiagnosticOrder] = {}
        self.results: dict[str, tuple[LabResult, ...]] = {}
        self._orders_by_patient: dict[str, list[str]] = {}
        self._order_seq = 0
        self.withheld: set[str] = set()
        self.ref_ranges: dict[str, tuple[float, float]] = {}
        self.subscriptions: list[Subscription] = []
        self.callback_log: list[dict[str, Any]] = []
        self.alert_log: list[dict[str, Any]] = []
        self.writeback_logs: dict[str, list[dict[str, Any]]] = {t: [] for t in WRITEBACK_TARGETS.values()}
        self.order_log: list[dict[str, Any]] = []
        self.transport: Any = None

    # ------------------------------------------------------------------ drift
    def _drift_epoch(self) -> float:
        d = self.config.drift
        return math.inf if d is None else float(to_epoch(d.start_time))

    def _tilt(self, epoch: float) -> float:
        d = self.config.drift
        return ORDER_TILT + (d.covariate_shift if d is not None and epoch >= self._drift_epoch() else 0.0)

    def _coupling(self, post: bool) -> float:
        c = self.config.signal_strength * RESULT_COUPLING
        if post and self.config.drift is not None:
            c *= 1.0 - self.config.drift.concept_shift
        return c

    # --------------------------------------------------------------- queries
    def patient(self, patient_id: str) -> PatientRecord:
        try:
            return self.patients[patient_id]
        except KeyError:
            raise UnknownPatient(patient_id) from None

    def severity(self, patient_id: str) -> float:
        return float(self._severity[self._patient_index[patient_id]])

    def events(self, patient_id: str, kind: str | None = None, since: datetime | None = None,
               until: datetime | None = None) -> list[ClinicalEvent]:
        """Events with since <= effective_time <= until (bounds optional)."""
        idx = self._patient_index.get(patient_id)
        if idx is None:
            raise UnknownPatient(patient_id)
        tl = self._timelines[idx]
        lo = 0 if since is None else int(np.searchsorted(tl.times, to_epoch(since), "left"))
        hi = len(tl.times) if until is None else int(np.searchsorted(tl.times, to_epoch(until), "right"))
        sel = np.arange(lo, hi)
        if kind is not None:
            sel = sel[tl.kinds[lo:hi] == KIND_INDEX[kind]]
        return [self._materialize(patient_id, tl, i) for i in sel]

    def _materialize(self, patient_id: str, tl: _Timeline, i: int) -> ClinicalEvent:
        k = int(tl.kinds[i])
        value = None if k != LAB else float(tl.values[i])
        abn = None if k != LAB else bool(tl.abnormal[i])
        return ClinicalEvent(patient_id, KIND_NAMES[k], self.code_table[int(tl.codes[i])], value, abn,
                             from_epoch(int(tl.times[i])))

    def iter_events(self, until: datetime | None = None) -> Iterator[ClinicalEvent]:
        for pid in self.patients:
            yield from self.events(pid, until=until)

    @property
    def n_events(self) -> int:
        return int(sum(len(t.times) for t in self._timelines))

    def unit_roster(self, unit_id: str) -> list[str]:
        if unit_id not in self.units:
            raise KeyError(unit_id)
        return sorted(p.patient_id for p in self.patients.values() if p.unit_id == unit_id)

    def visible_results(self, order_id: str, as_of: datetime) -> tuple[LabResult, ...]:
        with self._lock:
            if order_id not in self.orders:
                raise UnknownOrder(order_id)
            if order_id in self.withheld:
                return ()
            return tuple(r for r in self.results.get(order_id, ()) if r.result_time <= as_of)

    def orders_for(self, patient_id: str) -> list[DiagnosticOrder]:
        return [self.orders[o] for o in self._orders_by_patient.get(patient_id, [])]

    def sample_patients(self, rng: np.random.Generator, times: Sequence[int]) -> list[str]:
        """Order-bearing patients for orders at epoch seconds ``times``, weighted toward higher severity.

        One uniform is drawn per order whatever the drift, so every order
        before the drift start picks the same patient as in the no-drift world.
        """
        u = rng.random(len(times))
        ids = list(self.patients)
        cdfs: dict[float, np.ndarray] = {}
        out = []
        for ui, t in zip(u, times):
            tilt = self._tilt(float(t))
            if tilt not in cdfs:
                w = np.exp(tilt * self._severity)
                cdfs[tilt] = np.cumsum(w) / w.sum()
            cdf = cdfs[tilt]
            out.append(ids[min(int(np.searchsorted(cdf, ui, "right")), len(cdf) - 1)])
        return out

    # ------------------------------------------------------------- mutations
    def withhold_results(self, order_id: str) -> None:
        """Never release the results of ``order_id`` (scripted missing labels)."""
        with self._lock:
            if order_id not in self.orders:
                raise UnknownOrder(order_id)
            self.withheld.add(order_id)

    def sign_order(self, patient_id: str, panel_code: str, time: datetime,
                   dispatch: bool = True) -> DiagnosticOrder:
        """Persist an order, schedule its results and fire matching webhooks."""
        if panel_code not in PANELS:
            raise ValueError(f"unknown panel {panel_code!r}")
        with self._lock:
            idx = self._patient_index.get(patient_id)
            if idx is None:
                raise UnknownPatient(patient_id)
            time = time.replace(microsecond=0)
            self._order_seq += 1
            seq = self._order_seq
            order = DiagnosticOrder(f"O{seq:08d}", patient_id, panel_code, PANELS[panel_code], time)
            rng = _rng(self.config.seed, 30, seq)
            noise = rng.standard_normal(len(order.component_codes))
            results = self._results_for(order, float(self._severity[idx]), noise)
            self._add_order(order, results)
            self.order_log.append({"order_id": order.order_id, "patient_id": patient_id,
                                   "panel_code": panel_code, "order_time": format_ts(time)})
            subs = [s for s in self.subscriptions if s.panel_code == panel_code]
        if dispatch:
            for sub in subs:
                self._deliver(sub, order)
        return order

    def replay_orders(self, order_log: Iterable[Mapping[str, Any]]) -> int:
        """Re-sign logged orders on a fresh world without webhooks.

        Order ids and results come out identical because both depend only on
        the seed and the signing sequence.
        """
        n = 0
        for entry in order_log:
            order = self.sign_order(entry["patient_id"], entry["panel_code"], parse_ts(entry["order_time"]),
                                    dispatch=False)
            if order.order_id != entry["order_id"]:
                raise ValueError(f"order log diverged: expected {entry['order_id']}, got {order.order_id}")
            n += 1
        return n

    def _deliver(self, sub: Subscription, order: DiagnosticOrder) -> None:
        payload = {"patient_id": order.patient_id, "order_id": order.order_id,
                   "panel_code": order.panel_code, "order_time": format_ts(order.order_time)}
        entry: dict[str, Any] = {"order_id": order.order_id, "subscription_id": sub.subscription_id,
                                 "callback_url": sub.callback_url}
        try:
            if self.transport is None:
                raise ConnectionError("no transport attached")
            resp = self.transport.request("POST", sub.callback_url, json_body=payload)
        except Exception as exc:  # noqa: BLE001 - at-most-once delivery, failures are logged
            logger.warning("webhook %s for %s failed: %s", sub.callback_url, order.order_id, exc)
            entry.update(status=None, delivered=False, error=str(exc))
        else:
            entry.update(status=resp.status, delivered=resp.ok, error=None if resp.ok else resp.text[:200])
            body = resp.body.lstrip()
            if resp.ok and body.startswith(b"<alert"):
                with self._lock:
                    self.alert_log.append({"order_id": order.order_id, "patient_id": order.patient_id,
                                           "subscription_id": sub.subscription_id,
                                           "document": body.decode("utf-8")})
        with self._lock:
            self.callback_log.append(entry)

    def add_subscription(self, panel_code: str, callback_url: str) -> Subscription:
        if panel_code not in PANELS:
            raise ValueError(f"unknown panel {panel_code!r}")
        with self._lock:
            sub = Subscription(f"SUB{len(self.subscriptions) + 1:04d}", panel_code, callback_url)
            self.subscriptions.append(sub)
            return sub

    def remove_subscription(self, subscription_id: str) -> bool:
        with self._lock:
            before = len(self.subscriptions)
            self.subscriptions = [s for s in self.subscriptions if s.subscription_id != subscription_id]
            return len(self.subscriptions) < before

    def writeback(self, target: str, payload: Mapping[str, Any], received: datetime) -> dict[str, Any]:
        if target not in self.writeback_logs:
            raise KeyError(target)
        pid = payload.get("patient_id")
        if pid not in self.patients:
            raise UnknownPatient(pid)
        with self._lock:
            entry = dict(payload)
            entry["received_time"] = format_ts(received)
            log = self.writeback_logs[target]
            entry["sequence"] = len(log) + 1
            log.append(entry)
            return entry

    @property
    def delivered_callbacks(self) -> int:
        return sum(1 for e in self.callback_log if e["delivered"])

    # ------------------------------------------------------------ generation
    def _results_for(self, order: DiagnosticOrder, z: float, noise: np.ndarray) -> tuple[LabResult, ...]:
        post = to_epoch(order.order_time) >= self._drift_epoch()
        coupling = self._coupling(post)
        resid = math.sqrt(1.0 - RESULT_COUPLING ** 2)
        prev_shift = self.config.drift.prevalence_shift if (post and self.config.drift) else {}
        out = []
        for code, eps in zip(order.component_codes, noise):
            spec = COMPONENTS[code]
            t = spec.direction * (coupling * z + resid * float(eps))
            if code in prev_shift:
                t += spec.direction * prev_shift[code] / LOGIT_PROBIT * self._result_sd()
            value = round(spec.mean + spec.sd * t, spec.decimals)
            low, high = self.ref_ranges[code]
            out.append(LabResult(order.order_id, code, value, low, high, value < low or value > high,
                                 order.order_time + self.config.result_delay))
        return tuple(out)

    def _result_sd(self) -> float:
        c = self.config.signal_strength * RESULT_COUPLING
        return math.sqrt(c * c + 1.0 - RESULT_COUPLING ** 2)

    def _add_order(self, order: DiagnosticOrder, results: tuple[LabResult, ...]) -> None:
        self.orders[order.order_id] = order
        self.results[order.order_id] = results
        self._orders_by_patient.setdefault(order.patient_id, []).append(order.order_id)


def _reference_ranges(config: WorldConfig) -> dict[str, tuple[float, float]]:
    """Fixed per-component ranges hitting the catalog prevalence among ordered results.

    90% of the abnormal mass sits in the severe tail. Ranges are centred on the
    order-weighted severity distribution rather than the whole population.
    """
    c = config.signal_strength * RESULT_COUPLING
    sd_t = math.sqrt(c * c + 1.0 - RESULT_COUPLING ** 2)
    centre = c * ORDER_TILT
    nd = NormalDist()
    out = {}
    for code, spec in COMPONENTS.items():
        severe_tail = centre + nd.inv_cdf(1.0 - 0.9 * spec.prevalence) * sd_t
        other_tail = nd.inv_cdf(1.0 - 0.1 * spec.prevalence) * sd_t - centre
        if spec.direction > 0:
            low, high = spec.mean - spec.sd * other_tail, spec.mean + spec.sd * severe_tail
        else:
            low, high = spec.mean - spec.sd * severe_tail, spec.mean + spec.sd * other_tail
        out[code] = (round(low, spec.decimals), round(high, spec.decimals))
    return out


def _unique_codes(rng: np.random.Generator, n: int, make: Callable[[np.random.Generator], str]) -> list[str]:
    seen: set[str] = set()
    codes: list[str] = []
    while len(codes) < n:
        c = make(rng)
        if c not in seen:
            seen.add(c)
            codes.append(c)
    return codes


_ICD_LETTERS = "ABCDEFGHIJKLMNOPQRSTVWXYZ"


def _icd(rng: np.random.Generator) -> str:
    return f"{_ICD_LETTERS[rng.integers(len(_ICD_LETTERS))]}{rng.integers(100):02d}.{rng.integers(10)}"


def _rxnorm(rng: np.random.Generator) -> str:
    return f"RX{rng.integers(100000, 1000000)}"


def generate_world(config: WorldConfig) -> World:
    """Build a deterministic world from ``config`` (identical config, identical world)."""
    world = World(config)
    seed = config.seed
    n = config.n_patients
    world.ref_ranges = _reference_ranges(config)

    # Patients: age and severity share a factor so older patients run sicker.
    rng = _rng(seed, 1)
    a = rng.standard_normal(n)
    e = rng.standard_normal(n)
    sex_u = rng.random(n)
    race_u = rng.random(n)
    unit_idx = rng.integers(0, len(world.units), n)
    z = 0.3 * a + math.sqrt(1 - 0.09) * e
    ages = np.clip(48.0 + 20.0 * a, 18.0, 92.0)
    sex_cdf = np.cumsum(SEX_WEIGHTS) / sum(SEX_WEIGHTS)
    race_cdf = np.cumsum(RACE_WEIGHTS) / sum(RACE_WEIGHTS)
    start_date = world.retro_start.date()
    for i in range(n):
        pid = f"P{i + 1:06d}"
        birth = start_date - timedelta(days=int(round(ages[i] * 365.25)))
        sex = SEXES[min(int(np.searchsorted(sex_cdf, sex_u[i], "right")), len(SEXES) - 1)]
        race = RACES[min(int(np.searchsorted(race_cdf, race_u[i], "right")), len(RACES) - 1)]
        world.patients[pid] = PatientRecord(pid, birth, sex, race, world.units[unit_idx[i]], float(z[i]))
        world._patient_index[pid] = i
    world._severity = z

    # Code tables and per-code loadings.
    rng = _rng(seed, 2)
    cond_codes = _unique_codes(rng, config.condition_vocab_size, _icd)
    med_codes = _unique_codes(rng, config.medication_vocab_size, _rxnorm)
    cond_base = rng.uniform(-4.5, -1.5, config.condition_vocab_size)
    cond_load = rng.normal(0.6, 0.9, config.condition_vocab_size)
    med_base = rng.normal(0.0, 1.0, config.medication_vocab_size)
    med_load = rng.normal(0.0, 1.2, config.medication_vocab_size)
    lab_weight = rng.uniform(0.5, 1.5, len(LAB_CODES))
    lab_load = np.array([COMPONENTS[c].direction for c in LAB_CODES]) * rng.uniform(0.8, 1.0, len(LAB_CODES))
    world.code_table = list(cond_codes) + list(med_codes) + list(LAB_CODES)
    med_offset = len(cond_codes)
    lab_offset = med_offset + len(med_codes)

    # Problem-list conditions, all recorded before the retrospective window.
    rng = _rng(seed, 3)
    presence = rng.random((n, len(cond_codes))) < _sigmoid(cond_base[None, :] + cond_load[None, :] * z[:, None])
    onset_lo = to_epoch(world.start_time) + 60
    onset_hi = to_epoch(world.retro_start) - 60
    onsets = rng.integers(onset_lo, onset_hi, size=(n, len(cond_codes))) // 60 * 60

    t0 = float(to_epoch(world.retro_start - LOOKBACK_BEFORE_START))
    t_end = float(to_epoch(world.horizon_end))
    lab_cdf = np.cumsum(lab_weight) / lab_weight.sum()
    specs = [COMPONENTS[c] for c in LAB_CODES]
    lab_mu = np.array([sp.mean for sp in specs])
    lab_sd = np.array([sp.sd for sp in specs])
    lab_dec = np.array([sp.decimals for sp in specs])
    lab_low = np.array([world.ref_ranges[c][0] for c in LAB_CODES])
    lab_high = np.array([world.ref_ranges[c][1] for c in LAB_CODES])
    lab_resid = math.sqrt(1 - LAB_COUPLING ** 2)

    def med_cdf(zz: float) -> np.ndarray:
        w = np.exp(med_base + med_load * zz)
        return np.cumsum(w) / w.sum()

    for i in range(n):
        zi = float(z[i])
        prng = _rng(seed, 10, i)
        parts_t, parts_k, parts_c, parts_v, parts_a = [], [], [], [], []

        ci = np.flatnonzero(presence[i])
        parts_t.append(onsets[i, ci])
        parts_k.append(np.full(len(ci), CONDITION, np.int8))
        parts_c.append(ci.astype(np.int32))
        parts_v.append(np.full(len(ci), np.nan))
        parts_a.append(np.full(len(ci), -1, np.int8))

        for kind, base_rate in ((MEDICATION, config.medication_rate), (LAB, config.lab_rate)):
            rate = base_rate * math.exp(0.5 * zi - 0.125) / YEAR_SECONDS
            needed = rate * (t_end - t0)
            cap = int(needed + 6 * math.sqrt(needed) + 20)
            cum = np.cumsum(prng.standard_exponential(cap))
            u = prng.random(cap)
            eps = prng.standard_normal(cap)
            if cum[-1] < needed:
                xrng = _rng(seed, 11 + kind, i)
                while cum[-1] < needed:
                    cum = np.concatenate([cum, cum[-1] + np.cumsum(xrng.standard_exponential(cap))])
                    u = np.concatenate([u, xrng.random(cap)])
                    eps = np.concatenate([eps, xrng.standard_normal(cap)])
            times = t0 + cum / rate
            keep = times < t_end
            times, u, eps = times[keep], u[keep], eps[keep]
            times = times.astype(np.int64) // 60 * 60
            if kind == MEDICATION:
                codes = np.searchsorted(med_cdf(zi), u, "right")
                codes = np.minimum(codes, len(med_codes) - 1) + med_offset
                values = np.full(len(times), np.nan)
                abn = np.full(len(times), -1, np.int8)
            else:
                li = np.minimum(np.searchsorted(lab_cdf, u, "right"), len(LAB_CODES) - 1)
                raw = lab_mu[li] + lab_sd[li] * (lab_load[li] * zi + lab_resid * eps)
                values = np.array([round(float(v), int(d)) for v, d in zip(raw, lab_dec[li])])
                abn = ((values < lab_low[li]) | (values > lab_high[li])).astype(np.int8)
                codes = li + lab_offset
            parts_t.append(times)
            parts_k.append(np.full(len(times), kind, np.int8))
            parts_c.append(codes.astype(np.int32))
            parts_v.append(values)
            parts_a.append(abn)

        times = np.concatenate(parts_t).astype(np.int64)
        kinds = np.concatenate(parts_k)
        codes = np.concatenate(parts_c)
        values = np.concatenate(parts_v)
        abn = np.concatenate(parts_a)
        order = np.lexsort((np.nan_to_num(values, nan=-np.inf), codes, kinds, times))
        world._timelines.append(_Timeline(times[order], kinds[order], codes[order], values[order], abn[order]))

    # Historical orders, one stream per (panel, year).
    pending: list[tuple[int, int, str, str, np.ndarray]] = []
    for p_idx, panel in enumerate(sorted(config.panels)):
        for year in range(config.start_year, config.start_year + config.n_years):
            orng = _rng(seed, 20, p_idx, year)
            lo, hi = to_epoch(utc(year)), to_epoch(utc(year + 1))
            m = config.orders_per_year
            times = np.sort(orng.integers(lo, hi, m) // 60 * 60)
            pids = world.sample_patients(orng, times)
            noise = orng.standard_normal((m, len(PANELS[panel])))
            for k in range(m):
                pending.append((int(times[k]), p_idx, panel, pids[k], noise[k]))
    pending.sort(key=lambda r: (r[0], r[1], r[3]))
    for t, _, panel, pid, noise in pending:
        world._order_seq += 1
        order = DiagnosticOrder(f"O{world._order_seq:08d}", pid, panel, PANELS[panel], from_epoch(t))
        world._add_order(order, world._results_for(order, world.severity(pid), noise))
    return world


def world_digest(world: World) -> str:
    """sha256 over every fact in the world (run-manifest digest)."""
    h = hashlib.sha256()
    for tl in world._timelines:
        for arr in (tl.times, tl.kinds, tl.codes, tl.values, tl.abnormal):
            h.update(arr.tobytes())
    for oid in sorted(world.results):
        for r in world.results[oid]:
            h.update(f"{oid}|{r.component_code}|{r.value!r}|{format_ts(r.result_time)}\n".encode())
    return h.hexdigest()
