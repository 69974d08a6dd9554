"""Impression logs: synthetic MNAR generation, downsampling, splits and I/O.

The generator draws latent user and item traits, derives a true click
propensity ``q`` and a true post-click conversion rate ``cvr`` from them, and
then samples clicks and potential conversions. ``alpha_couple`` feeds
``logit(q)`` into the conversion logit, so users who are likely to click are
also likely to convert: the click space over-represents converters, which is
exactly the selection effect the debiased estimators must undo.

Features are categorical: every latent user/item trait and every per-user
and per-item offset is quantised into equal-probability bins. A network over
these fields can represent ``q`` and ``cvr`` up to quantisation error, and
every category is shared by many records.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.special import ndtri

from ._numerics import logit, sigmoid
from .errors import (
    AssumptionViolated,
    ConfigError,
    IntegrityError,
    ParseError,
    RatioInfeasible,
)
from .neural import FieldSchema

SHARD_SIZE = 1 << 15


@dataclass(frozen=True)
class ImpressionRecord:
    user_id: int
    item_id: int
    features: tuple
    o: int
    r: int
    q_true: Optional[float] = None
    cvr_true: Optional[float] = None
    r_potential: Optional[int] = None

    def __post_init__(self):
        if self.o not in (0, 1) or self.r not in (0, 1):
            raise IntegrityError("click and conversion must be 0 or 1")
        if self.r > self.o:
            raise IntegrityError("conversion without click")
        if self.r_potential is not None and self.o == 1 and self.r != self.r_potential:
            raise IntegrityError("observed conversion disagrees with potential outcome")


@dataclass
class Dataset:
    """Columnar impression log. Row order doubles as time order."""

    schema: FieldSchema
    user_id: np.ndarray
    item_id: np.ndarray
    features: np.ndarray
    o: np.ndarray
    r: np.ndarray
    q_true: Optional[np.ndarray] = None
    cvr_true: Optional[np.ndarray] = None
    r_potential: Optional[np.ndarray] = None

    def __post_init__(self):
        self.user_id = np.asarray(self.user_id, dtype=np.int64)
        self.item_id = np.asarray(self.item_id, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.int64).reshape(-1, self.schema.field_count)
        self.o = np.asarray(self.o, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.int64)
        for name in ("q_true", "cvr_true"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))
        if self.r_potential is not None:
            self.r_potential = np.asarray(self.r_potential, dtype=np.int64)
        if np.any(self.r > self.o):
            raise IntegrityError("conversion without click")

    def __len__(self) -> int:
        return int(self.o.shape[0])

    def __getitem__(self, i: int) -> ImpressionRecord:
        opt = lambda a, cast: None if a is None else cast(a[i])  # noqa: E731
        return ImpressionRecord(
            int(self.user_id[i]),
            int(self.item_id[i]),
            tuple(int(x) for x in self.features[i]),
            int(self.o[i]),
            int(self.r[i]),
            opt(self.q_true, float),
            opt(self.cvr_true, float),
            opt(self.r_potential, int),
        )

    def __iter__(self) -> Iterator[ImpressionRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def has_ground_truth(self) -> bool:
        return self.q_true is not None and self.cvr_true is not None

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return Dataset(
            self.schema,
            self.user_id[index],
            self.item_id[index],
            self.features[index],
            self.o[index],
            self.r[index],
            pick(self.q_true),
            pick(self.cvr_true),
            pick(self.r_potential),
        )

    @property
    def n_clicks(self) -> int:
        return int(self.o.sum())

    @property
    def n_conversions(self) -> int:
        return int(self.r.sum())

    def click_space_cvr(self) -> float:
        return self.n_conversions / self.n_clicks if self.n_clicks else float("nan")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in ("user_id", "item_id", "features", "o", "r", "q_true", "cvr_true", "r_potential"):
            v = getattr(self, name)
            h.update(name.encode())
            if v is not None:
                h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        if self.schema != other.schema:
            return False
        for name in ("user_id", "item_id", "features", "o", "r", "q_true", "cvr_true", "r_potential"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 1000
    n_records: int = 100_000
    latent_dim: int = 4
    ctr_bias: float = -1.5
    cvr_bias: float = -1.0
    alpha_couple: float = 1.0
    seed: int = 0
    field_layout: Optional[FieldSchema] = None
    trait_bins: int = 8
    trait_scale: float = 1.0
    bias_scale: float = 0.5
    embedding_dim: int = 5
    id_fields: bool = False  # prepend raw user_id / item_id fields

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_records", "trait_bins"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be at least 2")
        if self.alpha_couple < 0:
            raise ConfigError("alpha_couple must be non-negative")
        expected = self.derived_layout()
        if self.field_layout is None:
            self.field_layout = expected
        elif self.field_layout.cardinalities != expected.cardinalities:
            raise ConfigError(
                f"field_layout {self.field_layout.cardinalities} does not match the generator's "
                f"fields {expected.cardinalities}"
            )

    def derived_layout(self) -> FieldSchema:
        cards = [self.trait_bins] * (2 * (self.latent_dim + 2))
        if self.id_fields:
            cards = [self.n_users, self.n_items] + cards
        dim = self.field_layout.embedding_dim if self.field_layout is not None else self.embedding_dim
        return FieldSchema(len(cards), tuple(cards), dim)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "field_layout"}
        d["field_layout"] = self.field_layout.to_dict()
        return d


@dataclass
class GenerationReport:
    n_records: int
    n_clicks: int
    n_conversions: int
    mean_q: float
    mean_cvr: float
    click_space_cvr: float
    mean_r_potential: float
    selection_gap: float
    selection_gap_se: float
    assumption_holds: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class _Latents:
    U: np.ndarray
    V: np.ndarray
    ctr_user: np.ndarray
    ctr_item: np.ndarray
    cvr_user: np.ndarray
    cvr_item: np.ndarray
    user_bins: np.ndarray = field(default=None)
    item_bins: np.ndarray = field(default=None)


def _draw_latents(config: SynthConfig, rng: np.random.Generator) -> _Latents:
    k = config.latent_dim
    lat = _Latents(
        U=rng.standard_normal((config.n_users, k)),
        V=rng.standard_normal((config.n_items, k)),
        ctr_user=rng.normal(0.0, config.bias_scale, config.n_users),
        ctr_item=rng.normal(0.0, config.bias_scale, config.n_items),
        cvr_user=rng.normal(0.0, config.bias_scale, config.n_users),
        cvr_item=rng.normal(0.0, config.bias_scale, config.n_items),
    )
    edges = ndtri(np.arange(1, config.trait_bins) / config.trait_bins)
    user_traits = np.column_stack([lat.U, lat.ctr_user / config.bias_scale, lat.cvr_user / config.bias_scale])
    item_traits = np.column_stack([lat.V, lat.ctr_item / config.bias_scale, lat.cvr_item / config.bias_scale])
    lat.user_bins = np.searchsorted(edges, user_traits)
    lat.item_bins = np.searchsorted(edges, item_traits)
    return lat


def true_logits(config: SynthConfig, lat: _Latents, users, items):
    """Ground-truth (logit q, logit cvr) for user/item index arrays."""
    h = config.latent_dim // 2
    s = config.trait_scale
    click_affinity = np.einsum("nj,nj->n", lat.U[users, :h], lat.V[items, :h]) / math.sqrt(h)
    buy_affinity = np.einsum("nj,nj->n", lat.U[users, h:], lat.V[items, h:]) / math.sqrt(
        config.latent_dim - h
    )
    logit_q = config.ctr_bias + lat.ctr_user[users] + lat.ctr_item[items] + s * click_affinity
    logit_cvr = (
        config.cvr_bias
        + lat.cvr_user[users]
        + lat.cvr_item[items]
        + s * buy_affinity
        + config.alpha_couple * logit_q
    )
    return logit_q, logit_cvr


def generate(config: SynthConfig) -> tuple[Dataset, GenerationReport]:
    """Draw a synthetic impression log with per-record ground truth.

    Raises AssumptionViolated when ``alpha_couple > 0`` but the sample
    conversion rate over clicks does not exceed the exposure-space rate.
    """
    latent_seq, record_seq = np.random.SeedSequence(config.seed).spawn(2)
    lat = _draw_latents(config, np.random.default_rng(latent_seq))

    n = config.n_records
    n_shards = -(-n // SHARD_SIZE)
    users, items, clicks, potentials = [], [], [], []
    qs, cvrs = [], []
    for shard, child in enumerate(record_seq.spawn(n_shards)):
        rng = np.random.default_rng(child)
        size = min(SHARD_SIZE, n - shard * SHARD_SIZE)
        u = rng.integers(0, config.n_users, size)
        i = rng.integers(0, config.n_items, size)
        lq, lc = true_logits(config, lat, u, i)
        q, cvr = sigmoid(lq), sigmoid(lc)
        o = (rng.random(size) < q).astype(np.int64)
        rp = (rng.random(size) < cvr).astype(np.int64)
        users.append(u)
        items.append(i)
        qs.append(q)
        cvrs.append(cvr)
        clicks.append(o)
        potentials.append(rp)

    u = np.concatenate(users)
    i = np.concatenate(items)
    o = np.concatenate(clicks)
    rp = np.concatenate(potentials)
    features = np.concatenate([lat.user_bins[u], lat.item_bins[i]], axis=1)
    if config.id_fields:
        features = np.concatenate([u[:, None], i[:, None], features], axis=1)
    ds = Dataset(
        schema=config.field_layout,
        user_id=u,
        item_id=i,
        features=features,
        o=o,
        r=o * rp,
        q_true=np.concatenate(qs),
        cvr_true=np.concatenate(cvrs),
        r_potential=rp,
    )
    report = generation_report(ds)
    if config.alpha_couple > 0 and not report.assumption_holds:
        raise AssumptionViolated(
            f"E_O[r]={report.click_space_cvr:.4f} does not exceed "
            f"E_D[r]={report.mean_r_potential:.4f}; increase alpha_couple"
        )
    return ds, report


def generation_report(ds: Dataset) -> GenerationReport:
    """Summary rates; fields needing ground truth are NaN for ingested logs."""
    nan = float("nan")
    mean = lambda a: nan if a is None or a.size == 0 else float(a.mean())  # noqa: E731
    clicked = ds.o == 1
    n_o = int(clicked.sum())
    eo = float(ds.r[clicked].mean()) if n_o else nan
    ed = mean(ds.r_potential)
    # two-sample standard error of the difference of means
    se = math.sqrt(eo * (1 - eo) / max(n_o, 1) + ed * (1 - ed) / max(len(ds), 1))
    return GenerationReport(
        n_records=len(ds),
        n_clicks=n_o,
        n_conversions=ds.n_conversions,
        mean_q=mean(ds.q_true),
        mean_cvr=mean(ds.cvr_true),
        click_space_cvr=eo,
        mean_r_potential=ed,
        selection_gap=eo - ed,
        selection_gap_se=se,
        assumption_holds=bool(n_o > 0 and eo > ed),
    )


def downsample(
    dataset: Dataset, target_ratio=(100, 10, 1), seed: int = 0, tolerance: float = 0.05
) -> Dataset:
    """Drop unclicked rows at random until exposures:clicks meets the target.

    Only the exposure:click part of the ratio can be moved by removing
    negatives; clicked rows are never removed and the original row order is
    kept.
    """
    exposures, clicks = float(target_ratio[0]), float(target_ratio[1])
    if exposures <= 0 or clicks <= 0 or clicks > exposures:
        raise ConfigError(f"invalid target ratio {target_ratio}")
    n_click = dataset.n_clicks
    if n_click == 0:
        raise RatioInfeasible("no clicked records to anchor the ratio")
    want = n_click * exposures / clicks
    have = len(dataset)
    if abs(have - want) <= tolerance * want:
        return dataset
    if have < want:
        raise RatioInfeasible(
            f"{have} exposures for {n_click} clicks; reaching {target_ratio} would require "
            f"removing clicked records"
        )
    n_remove = have - int(round(want))
    negatives = np.flatnonzero(dataset.o == 0)
    rng = np.random.default_rng(seed)
    drop = rng.choice(negatives, size=n_remove, replace=False)
    keep = np.ones(have, dtype=bool)
    keep[drop] = False
    return dataset.subset(np.flatnonzero(keep))


def chronological_split(dataset: Dataset, fractions=(0.8, 0.1, 0.1)):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ConfigError("fractions must be three non-negative numbers summing to 1")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_valid = min(int(round(fractions[1] * n)), n - n_train)
    cuts = [0, n_train, n_train + n_valid, n]
    return tuple(dataset.subset(np.arange(cuts[k], cuts[k + 1])) for k in range(3))


# --------------------------------------------------------------------------
# file formats


def _columns(schema: FieldSchema, with_truth: bool) -> list:
    cols = ["user_id", "item_id"] + [f"f{k}" for k in range(schema.field_count)] + ["click", "conversion"]
    if with_truth:
        cols += ["true_ctr", "true_cvr"]
    return cols


def _fmt_float(x) -> str:
    return repr(float(x))


def _detect_format(path, fmt):
    if fmt is not None:
        fmt = fmt.upper()
        if fmt not in ("CSV", "JSONL"):
            raise ConfigError(f"unknown log format {fmt!r}")
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "CSV"
    if suffix in (".jsonl", ".json"):
        return "JSONL"
    raise ConfigError(f"cannot infer log format from {path!r}")


def dumps_log(dataset: Dataset, fmt: str = "CSV") -> str:
    truth = dataset.has_ground_truth
    cols = _columns(dataset.schema, truth)
    fmt = fmt.upper()
    lines = []
    if fmt == "CSV":
        lines.append(",".join(cols))
    for k in range(len(dataset)):
        values = [int(dataset.user_id[k]), int(dataset.item_id[k])]
        values += [int(x) for x in dataset.features[k]]
        values += [int(dataset.o[k]), int(dataset.r[k])]
        if truth:
            values += [float(dataset.q_true[k]), float(dataset.cvr_true[k])]
        if fmt == "CSV":
            lines.append(",".join(_fmt_float(v) if isinstance(v, float) else str(v) for v in values))
        else:
            lines.append(json.dumps(dict(zip(cols, values)), separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


def save_log(dataset: Dataset, path, fmt: Optional[str] = None):
    """Write CSV or JSONL (UTF-8, LF line endings)."""
    fmt = _detect_format(path, fmt)
    Path(path).write_bytes(dumps_log(dataset, fmt).encode("utf-8"))


def _parse_int(text, line, name):
    try:
        if isinstance(text, bool):
            raise ValueError
        if isinstance(text, int):
            return text
        if isinstance(text, str) and text.strip() == text and text:
            return int(text)
        raise ValueError
    except ValueError:
        raise ParseError(f"{name}: expected integer, got {text!r}", line) from None


def _parse_prob(text, line, name):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"{name}: expected number, got {text!r}", line) from None
    if not 0.0 < value < 1.0:
        raise ParseError(f"{name}: {value} outside (0, 1)", line)
    return value


def _rows_from_text(text: str, fmt: str, schema: FieldSchema):
    """Yield (line_number, {column: raw value}) and the detected column list."""
    k = schema.field_count
    base = _columns(schema, False)
    full = _columns(schema, True)
    if fmt == "CSV":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise ParseError("missing header", 1)
        header = lines[0].split(",")
        if header not in (base, full):
            raise ParseError(f"header {header} does not match a {k}-field schema", 1)
        rows = []
        body = "".join(line + "\n" for line in lines[1:])
        for n, raw in enumerate(csv.reader(io.StringIO(body)), start=2):
            if len(raw) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(raw)}", n)
            rows.append((n, dict(zip(header, raw))))
        return header, rows
    rows = []
    header = None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for n, raw in enumerate(lines, start=1):
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", n) from None
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", n)
        keys = list(obj)
        if keys not in (base, full):
            raise ParseError(f"keys {keys} do not match a {k}-field schema", n)
        if header is None:
            header = keys
        elif keys != header:
            raise ParseError("inconsistent keys across lines", n)
        rows.append((n, obj))
    return header or base, rows


def loads_log(text: str, schema: FieldSchema, fmt: str = "CSV") -> Dataset:
    fmt = fmt.upper()
    header, rows = _rows_from_text(text, fmt, schema)
    truth = "true_ctr" in header
    k = schema.field_count
    n = len(rows)
    user = np.zeros(n, dtype=np.int64)
    item = np.zeros(n, dtype=np.int64)
    feats = np.zeros((n, k), dtype=np.int64)
    o = np.zeros(n, dtype=np.int64)
    r = np.zeros(n, dtype=np.int64)
    q = np.zeros(n) if truth else None
    c = np.zeros(n) if truth else None
    for idx, (line, row) in enumerate(rows):
        user[idx] = _parse_int(row["user_id"], line, "user_id")
        item[idx] = _parse_int(row["item_id"], line, "item_id")
        for f in range(k):
            v = _parse_int(row[f"f{f}"], line, f"f{f}")
            if not 0 <= v < schema.cardinalities[f]:
                raise ParseError(f"f{f}={v} outside cardinality {schema.cardinalities[f]}", line)
            feats[idx, f] = v
        click = _parse_int(row["click"], line, "click")
        conv = _parse_int(row["conversion"], line, "conversion")
        if click not in (0, 1) or conv not in (0, 1):
            raise ParseError("click and conversion must be 0 or 1", line)
        if conv > click:
            raise IntegrityError("conversion=1 on an unclicked row", line)
        o[idx], r[idx] = click, conv
        if truth:
            q[idx] = _parse_prob(row["true_ctr"], line, "true_ctr")
            c[idx] = _parse_prob(row["true_cvr"], line, "true_cvr")
    return Dataset(schema, user, item, feats, o, r, q, c, None)


def load_log(path, schema: FieldSchema, fmt: Optional[str] = None) -> Dataset:
    """Read a CSV or JSONL impression log into a Dataset."""
    fmt = _detect_format(path, fmt)
    text = Path(path).read_bytes().decode("utf-8")
    return loads_log(text, schema, fmt)
