"""Endpoint-error metrics, Middlebury flow I/O, colorization and reports."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .cost import FlowField, require_same_resolution
from .errors import DataError, FormatError, InvalidArgument, MetricError

FLO_MAGIC = b"PIEH"


def epe_map(flow: FlowField, gt: FlowField) -> np.ndarray:
    """Per-pixel Euclidean endpoint error."""
    require_same_resolution(flow, gt)
    d = flow.values - gt.values
    return np.sqrt(d[0] ** 2 + d[1] ** 2)


def aepe(flow: FlowField, gt: FlowField, valid: np.ndarray) -> float:
    """Mean endpoint error over valid pixels."""
    if valid.shape != (gt.h, gt.w):
        raise InvalidArgument("valid mask resolution mismatch")
    if not valid.any():
        raise MetricError("AEPE undefined: empty valid mask")
    return float(epe_map(flow, gt)[valid].mean())


def pck(flow: FlowField, gt: FlowField, valid: np.ndarray, threshold: float) -> float:
    """Fraction of valid pixels with endpoint error <= threshold."""
    if threshold <= 0:
        raise InvalidArgument("threshold must be positive")
    if not valid.any():
        raise MetricError("PCK undefined: empty valid mask")
    return float((epe_map(flow, gt)[valid] <= threshold).mean())


# ---------------------------------------------------------------------------
# Middlebury .flo format
# ---------------------------------------------------------------------------


def flo_bytes(flow: FlowField) -> bytes:
    """magic 'PIEH' | width i32 LE | height i32 LE | row-major (u, v) f32 LE."""
    if not np.all(np.isfinite(flow.values)):
        raise InvalidArgument("refusing to write non-finite flow")
    interleaved = np.stack([flow.values[0], flow.values[1]], axis=-1).astype("<f4")
    return FLO_MAGIC + struct.pack("<ii", flow.w, flow.h) + interleaved.tobytes()


def write_flo(path, flow: FlowField) -> None:
    with open(path, "wb") as fh:
        fh.write(flo_bytes(flow))


def parse_flo(raw: bytes) -> FlowField:
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise FormatError("bad flo magic")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"bad flo dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise FormatError(f"flo payload is {len(raw)} bytes, expected {need}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(np.stack([data[..., 0], data[..., 1]]).astype(np.float64))


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        return parse_flo(fh.read())


# ---------------------------------------------------------------------------
# flow colorization
# ---------------------------------------------------------------------------


def flow_to_color(flow: FlowField, max_norm: float | None = None) -> np.ndarray:
    """Color-wheel image: hue from atan2(v, u), saturation from magnitude."""
    u, v = flow.values[0], flow.values[1]
    mag = np.sqrt(u * u + v * v)
    if max_norm is None:
        max_norm = float(np.percentile(mag, 99))
    max_norm = max(max_norm, 1e-9)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_norm, 0.0, 1.0)
    val = np.ones_like(sat)
    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = val * (1 - sat)
    q = val * (1 - f * sat)
    t = val * (1 - (1 - f) * sat)
    r = np.choose(i, [val, q, p, p, t, val])
    g = np.choose(i, [t, val, val, q, p, p])
    b = np.choose(i, [p, p, t, val, val, q])
    return np.stack([r, g, b])


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    pair_id: int
    aepe: float
    pck1: float
    pck3: float
    pck5: float
    corruption: str  # "clean" or "kind:severity"
    magnitude: float
    magnitude_bin: str

    def metrics(self) -> dict:
        return {"aepe": self.aepe, "pck1": self.pck1, "pck3": self.pck3, "pck5": self.pck5}


@dataclass
class EvalReport:
    schema_version: int
    manifest: dict
    samples: list[SampleRecord]
    failures: list[dict]
    overall: dict
    by_corruption: dict
    by_magnitude: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "manifest": self.manifest,
            "samples": [asdict(s) for s in self.samples],
            "failures": self.failures,
            "overall": self.overall,
            "by_corruption": self.by_corruption,
            "by_magnitude": self.by_magnitude,
        }

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def _aggregate(records: list[SampleRecord]) -> dict:
    keys = ("aepe", "pck1", "pck3", "pck5")
    return {
        "count": len(records),
        **{k: float(np.mean([getattr(r, k) for r in records])) for k in keys},
    }


def _magnitude_bin(mag: float, edges: tuple[float, ...]) -> str:
    lo = 0.0
    for e in edges:
        if mag < e:
            return f"[{lo:g},{e:g})"
        lo = e
    return f"[{lo:g},inf)"


def corruption_label(pair) -> str:
    if pair.corruption is None:
        return "clean"
    return f"{pair.corruption.kind}:{pair.corruption.severity}"


def evaluate(
    predict_fn,
    pairs,
    *,
    thresholds: tuple[float, float, float] = (1.0, 3.0, 5.0),
    magnitude_bins: tuple[float, ...] = (8.0, 16.0, 24.0),
    fail_limit: float = 0.1,
    manifest: dict | None = None,
    viz_dir=None,
    threads: int = 1,
) -> EvalReport:
    """Run ``predict_fn(pair) -> FlowField`` over pairs and aggregate metrics.

    Failed samples are recorded and skipped; more than ``fail_limit`` of the
    set failing aborts the run. Groups partition samples by corruption label
    and by warp-magnitude bin. ``threads`` bounds per-sample parallelism;
    results are gathered in input order, so they do not depend on it.
    """
    records: list[SampleRecord] = []
    failures: list[dict] = []
    pairs = list(pairs)
    if not pairs:
        raise DataError("no samples to evaluate")

    def _run(pair):
        return predict_fn(pair)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            futures = [ex.submit(_run, p) for p in pairs]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append((f.result(), None))
                except Exception as exc:  # noqa: BLE001
                    outcomes.append((None, exc))
    else:
        outcomes = []
        for p in pairs:
            try:
                outcomes.append((_run(p), None))
            except Exception as exc:  # noqa: BLE001
                outcomes.append((None, exc))
    for pair, (flow, err) in zip(pairs, outcomes):
        try:
            if err is not None:
                raise err
            rec = SampleRecord(
                pair_id=pair.pair_id,
                aepe=aepe(flow, pair.flow, pair.valid),
                pck1=pck(flow, pair.flow, pair.valid, thresholds[0]),
                pck3=pck(flow, pair.flow, pair.valid, thresholds[1]),
                pck5=pck(flow, pair.flow, pair.valid, thresholds[2]),
                corruption=corruption_label(pair),
                magnitude=pair.warp.magnitude,
                magnitude_bin=_magnitude_bin(pair.warp.magnitude, magnitude_bins),
            )
        except Exception as exc:  # noqa: BLE001 - failures are data, not bugs
            failures.append({"pair_id": pair.pair_id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        records.append(rec)
        if viz_dir is not None:
            from pathlib import Path

            from .imageio import write_ppm

            out = Path(viz_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_ppm(out / f"{pair.pair_id:06d}_flow.ppm", flow_to_color(flow))
    if len(failures) > fail_limit * len(pairs):
        raise DataError(
            f"{len(failures)}/{len(pairs)} samples failed (limit {fail_limit:.0%})"
        )
    by_corr: dict[str, list[SampleRecord]] = {}
    by_mag: dict[str, list[SampleRecord]] = {}
    for r in records:
        by_corr.setdefault(r.corruption, []).append(r)
        by_mag.setdefault(r.magnitude_bin, []).append(r)
    return EvalReport(
        schema_version=1,
        manifest=manifest or {},
        samples=records,
        failures=failures,
        overall=_aggregate(records),
        by_corruption={k: _aggregate(v) for k, v in sorted(by_corr.items())},
        by_magnitude={k: _aggregate(v) for k, v in sorted(by_mag.items())},
    )
