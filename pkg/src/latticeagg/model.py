"""The six-layer lattice aggregation function over sets of tokens.

    f(x) = rho(mean_m phi(x_m))

phi is K calibrated lattices (layers 1-2), the mean over tokens is layer 3,
and rho is K calibrators, one K-input lattice and an output calibrator
(layers 4-6).
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from latticeagg.errors import ConfigError, MissingToken, SchemaError, ShapeError
from latticeagg.lattice_core import (
    INCREASING,
    MONOTONICITIES,
    NONE,
    Calibrator,
    CalibratorTrace,
    Lattice,
    LatticeTrace,
    calibrate_batch,
    lattice_batch,
)

FORMAT_VERSION = 1


@dataclasses.dataclass
class ExampleSet:
    """One example: ``M`` tokens of ``D`` features (NaN = missing) and a label."""

    tokens: np.ndarray
    label: float = 0.0
    group_id: Optional[str] = None
    example_id: Optional[str] = None
    token_names: Optional[List[str]] = None

    def __post_init__(self):
        tokens = np.array(self.tokens, dtype=float)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ShapeError("an example needs at least one token vector")
        self.tokens = tokens
        self.label = float(self.label)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclasses.dataclass(eq=False)
class AggModel:
    phi_calibrators: List[List[Calibrator]]
    phi_lattices: List[Lattice]
    rho_calibrators: List[Calibrator]
    rho_lattice: Lattice
    output_calibrator: Calibrator
    feature_monotonicity: List[str]
    feature_names: List[str]

    @property
    def D(self) -> int:
        return len(self.feature_monotonicity)

    @property
    def K(self) -> int:
        return len(self.phi_lattices)

    def calibrators(self) -> List[Tuple[int, Optional[int], Optional[int], Calibrator]]:
        """Every calibrator as ``(layer, k, d, calibrator)``."""
        out = []
        for k, row in enumerate(self.phi_calibrators):
            for d, cal in enumerate(row):
                out.append((1, k, d, cal))
        for k, cal in enumerate(self.rho_calibrators):
            out.append((4, k, None, cal))
        out.append((6, None, None, self.output_calibrator))
        return out

    def lattices(self) -> List[Lattice]:
        return list(self.phi_lattices) + [self.rho_lattice]

    # -- flat parameter view used by the trainer ---------------------------

    def param_layout(self) -> List[Tuple[str, int]]:
        """Names and sizes of every trainable array, in flattening order."""
        layout = []
        for k, row in enumerate(self.phi_calibrators):
            for d, cal in enumerate(row):
                layout.append((f"phi_cal[{k}][{d}].values", cal.values.size))
                if cal.missing_value_output is not None:
                    layout.append((f"phi_cal[{k}][{d}].missing", 1))
        for k, lat in enumerate(self.phi_lattices):
            layout.append((f"phi_lattice[{k}]", lat.params.size))
        for k, cal in enumerate(self.rho_calibrators):
            layout.append((f"rho_cal[{k}].values", cal.values.size))
            if cal.missing_value_output is not None:
                layout.append((f"rho_cal[{k}].missing", 1))
        layout.append(("rho_lattice", self.rho_lattice.params.size))
        layout.append(("output_cal.values", self.output_calibrator.values.size))
        if self.output_calibrator.missing_value_output is not None:
            layout.append(("output_cal.missing", 1))
        return layout

    def flatten(self) -> np.ndarray:
        parts = []

        def add_cal(cal):
            parts.append(cal.values)
            if cal.missing_value_output is not None:
                parts.append([cal.missing_value_output])

        for row in self.phi_calibrators:
            for cal in row:
                add_cal(cal)
        for lat in self.phi_lattices:
            parts.append(lat.params)
        for cal in self.rho_calibrators:
            add_cal(cal)
        parts.append(self.rho_lattice.params)
        add_cal(self.output_calibrator)
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def unflatten(self, theta: np.ndarray) -> "AggModel":
        """A copy of this model with parameters taken from ``theta``."""
        theta = np.asarray(theta, dtype=float)
        pos = 0

        def take(n):
            nonlocal pos
            chunk = theta[pos:pos + n].copy()
            pos += n
            return chunk

        def cal_from(cal):
            values = take(cal.values.size)
            missing = None if cal.missing_value_output is None else float(take(1)[0])
            return cal.replace(values=values, missing_value_output=missing)

        phi_cals = [[cal_from(c) for c in row] for row in self.phi_calibrators]
        phi_lats = [lat.replace(params=take(lat.params.size)) for lat in self.phi_lattices]
        rho_cals = [cal_from(c) for c in self.rho_calibrators]
        rho_lat = self.rho_lattice.replace(params=take(self.rho_lattice.params.size))
        out_cal = cal_from(self.output_calibrator)
        if pos != theta.size:
            raise ShapeError(f"expected {pos} parameters, got {theta.size}")
        return dataclasses.replace(
            self, phi_calibrators=phi_cals, phi_lattices=phi_lats, rho_calibrators=rho_cals,
            rho_lattice=rho_lat, output_calibrator=out_cal,
        )

    def violations(self) -> float:
        comps = [c for *_, c in self.calibrators()] + self.lattices()
        return max(c.violations() for c in comps)

    def is_feasible(self, tol: float = 0.0) -> bool:
        return self.violations() <= tol

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "D": self.D,
            "K": self.K,
            "feature_names": list(self.feature_names),
            "feature_monotonicity": list(self.feature_monotonicity),
            "phi_calibrators": [[c.to_dict() for c in row] for row in self.phi_calibrators],
            "phi_lattices": [lat.to_dict() for lat in self.phi_lattices],
            "rho_calibrators": [c.to_dict() for c in self.rho_calibrators],
            "rho_lattice": self.rho_lattice.to_dict(),
            "output_calibrator": self.output_calibrator.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggModel":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise SchemaError(f"unsupported model format_version {version!r}")
        model = cls(
            phi_calibrators=[[Calibrator.from_dict(c) for c in row] for row in d["phi_calibrators"]],
            phi_lattices=[Lattice.from_dict(x) for x in d["phi_lattices"]],
            rho_calibrators=[Calibrator.from_dict(c) for c in d["rho_calibrators"]],
            rho_lattice=Lattice.from_dict(d["rho_lattice"]),
            output_calibrator=Calibrator.from_dict(d["output_calibrator"]),
            feature_monotonicity=list(d["feature_monotonicity"]),
            feature_names=list(d.get("feature_names") or [f"f{i}" for i in range(d["D"])]),
        )
        if model.D != d["D"] or model.K != d["K"]:
            raise SchemaError("D/K fields disagree with the stored components")
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "AggModel":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def quantile_keypoints(values, num_keypoints: int) -> np.ndarray:
    """Keypoints at empirical quantiles of ``values`` (NaNs ignored).

    Duplicate quantiles are merged; if that leaves fewer than requested a
    warning is issued and the reduced set is returned.
    """
    if num_keypoints < 2:
        raise ConfigError("need at least 2 keypoints")
    vals = np.asarray(values, dtype=float)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        warnings.warn("no observed values; using keypoints [0, 1]")
        return np.array([0.0, 1.0])
    kp = np.unique(np.quantile(vals, np.linspace(0.0, 1.0, num_keypoints)))
    if kp.size < num_keypoints:
        warnings.warn(f"only {kp.size} distinct quantiles for {num_keypoints} requested keypoints")
    if kp.size < 2:
        kp = np.array([kp[0], kp[0] + 1.0])
    return kp


def _per_feature(value, D: int, name: str) -> list:
    if isinstance(value, (int, np.integer)):
        return [int(value)] * D
    value = list(value)
    if len(value) != D:
        raise ConfigError(f"{name} needs {D} entries, got {len(value)}")
    return value


def _linear_ramp(sizes: Tuple[int, ...]) -> np.ndarray:
    """Params of the lattice computing ``2 * mean(u) - 1``.

    A zero rho lattice gives every vertex the same gradient at the all-0.5
    point that zero phi outputs map to, so phi would never receive gradient.
    The ramp still outputs exactly 0 there.
    """
    axes = np.meshgrid(*[np.arange(s) / (s - 1) for s in sizes], indexing="ij")
    return (2.0 * sum(axes) / len(sizes) - 1.0).ravel()


def init_model(
    D: int,
    K: int = 1,
    *,
    feature_values: Optional[Sequence[Sequence[float]]] = None,
    feature_keypoints: Optional[Sequence[Sequence[float]]] = None,
    num_keypoints=5,
    lattice_size=2,
    rho_lattice_size: int = 2,
    rho_keypoints: int = 5,
    output_keypoints: int = 5,
    feature_monotonicity: Optional[Sequence[str]] = None,
    feature_names: Optional[Sequence[str]] = None,
    missing_values: bool = True,
    monotonic_calibrators: bool = True,
    output_init_range: Optional[Tuple[float, float]] = None,
) -> AggModel:
    """Build a feasible model whose output is 0 on every input.

    Parameters
    ----------
    D, K : int
        Features per token and intermediate dimensions.
    feature_values : list of arrays, optional
        Training values per feature; layer-1 keypoints go at their quantiles.
    feature_keypoints : list of arrays, optional
        Explicit layer-1 keypoints per feature (overrides ``feature_values``).
    num_keypoints : int or list of int
        Layer-1 keypoint count per feature.
    lattice_size : int or list of int
        Vertices per dimension of each phi lattice.
    feature_monotonicity : list of str
        ``"increasing"``, ``"decreasing"`` or ``"none"`` per feature.
    missing_values : bool
        Give every layer-1 calibrator a learned missing-input output.
    output_init_range : (float, float), optional
        Initialize the output calibrator linearly onto this range instead of
        the identity. Useful when labels are far from [-1, 1].

    Notes
    -----
    Phi lattices start at zero and the rho lattice as a linear ramp.
    """
    if D < 1 or K < 1:
        raise ConfigError("D and K must be at least 1")
    mono = list(feature_monotonicity or [NONE] * D)
    if len(mono) != D or any(m not in MONOTONICITIES for m in mono):
        raise ConfigError(f"feature_monotonicity must list {D} of {MONOTONICITIES}")
    names = list(feature_names or [f"f{i}" for i in range(D)])
    counts = _per_feature(num_keypoints, D, "num_keypoints")
    sizes = _per_feature(lattice_size, D, "lattice_size")

    keypoints = []
    for d in range(D):
        if feature_keypoints is not None:
            kp = np.unique(np.asarray(feature_keypoints[d], dtype=float))
        elif feature_values is not None:
            kp = quantile_keypoints(feature_values[d], counts[d])
        else:
            kp = np.linspace(0.0, 1.0, counts[d])
        keypoints.append(kp)

    phi_cals = [
        [
            Calibrator(
                keypoints=kp,
                values=np.linspace(0.0, 1.0, kp.size),
                output_bounds=(0.0, 1.0),
                monotonic=monotonic_calibrators or mono[d] != NONE,
                missing_value_output=0.5 if missing_values else None,
            )
            for d, kp in enumerate(keypoints)
        ]
        for _ in range(K)
    ]
    phi_lats = [
        Lattice(dim_sizes=tuple(sizes), params=np.zeros(math.prod(sizes)), param_bounds=(-1.0, 1.0),
                monotone_dims=tuple(mono))
        for _ in range(K)
    ]
    rho_kp = np.linspace(-1.0, 1.0, rho_keypoints)
    rho_cals = [
        Calibrator(keypoints=rho_kp, values=np.linspace(0.0, 1.0, rho_keypoints), output_bounds=(0.0, 1.0),
                   monotonic=True)
        for _ in range(K)
    ]
    rho_sizes = (rho_lattice_size,) * K
    rho_lat = Lattice(dim_sizes=rho_sizes, params=_linear_ramp(rho_sizes), param_bounds=(-1.0, 1.0),
                      monotone_dims=(INCREASING,) * K)
    out_kp = np.linspace(-1.0, 1.0, output_keypoints)
    out_vals = out_kp.copy() if output_init_range is None else np.linspace(*output_init_range, output_keypoints)
    out_cal = Calibrator(keypoints=out_kp, values=out_vals, output_bounds=(-math.inf, math.inf), monotonic=True)
    return AggModel(
        phi_calibrators=phi_cals, phi_lattices=phi_lats, rho_calibrators=rho_cals, rho_lattice=rho_lat,
        output_calibrator=out_cal, feature_monotonicity=mono, feature_names=names,
    )


def init_model_from_examples(examples: Sequence[ExampleSet], K: int = 1, **kwargs) -> AggModel:
    """``init_model`` with layer-1 keypoints at the quantiles of ``examples``."""
    if not examples:
        raise ConfigError("cannot initialize from an empty example list")
    tokens = np.concatenate([ex.tokens for ex in examples])
    return init_model(tokens.shape[1], K, feature_values=list(tokens.T), **kwargs)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TokenBatch:
    """Tokens of several examples stacked into one array."""

    tokens: np.ndarray  # (T, D)
    segment: np.ndarray  # (T,) example index of each token
    counts: np.ndarray  # (N,) tokens per example

    @classmethod
    def from_examples(cls, examples: Sequence[ExampleSet]) -> "TokenBatch":
        counts = np.array([ex.num_tokens for ex in examples], dtype=np.int64)
        tokens = np.concatenate([ex.tokens for ex in examples]) if examples else np.zeros((0, 0))
        segment = np.repeat(np.arange(len(examples)), counts)
        return cls(tokens=tokens, segment=segment, counts=counts)

    @property
    def num_examples(self) -> int:
        return self.counts.size


def segment_mean(values: np.ndarray, segment: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per-segment mean of ``values`` (T, K).

    Values are sorted within each segment before summation, so the result
    does not depend on token order, bit for bit.
    """
    n, K = counts.size, values.shape[1]
    out = np.empty((n, K))
    if n == 0:
        return out
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    for k in range(K):
        order = np.lexsort((values[:, k], segment))
        out[:, k] = np.add.reduceat(values[order, k], starts) / counts
    return out


def _check_width(model: AggModel, tokens: np.ndarray):
    if tokens.ndim != 2 or tokens.shape[1] != model.D:
        raise ShapeError(f"model expects {model.D} features per token, got shape {tokens.shape}")


@dataclasses.dataclass
class PhiTrace:
    calibrated: List[List[CalibratorTrace]]  # [k][d]
    lattices: List[LatticeTrace]  # [k]
    phi: np.ndarray  # (T, K)


def phi_batch(model: AggModel, tokens: np.ndarray, with_partials: bool = True) -> PhiTrace:
    tokens = np.asarray(tokens, dtype=float)
    _check_width(model, tokens)
    cal_traces, lat_traces = [], []
    phi = np.empty((tokens.shape[0], model.K))
    for k in range(model.K):
        row = [calibrate_batch(cal, tokens[:, d]) for d, cal in enumerate(model.phi_calibrators[k])]
        u = np.stack([tr.output for tr in row], axis=1) if row else np.zeros((tokens.shape[0], 0))
        lt = lattice_batch(model.phi_lattices[k], u, with_partials=with_partials)
        cal_traces.append(row)
        lat_traces.append(lt)
        phi[:, k] = lt.output
    return PhiTrace(calibrated=cal_traces, lattices=lat_traces, phi=phi)


@dataclasses.dataclass
class RhoTrace:
    calibrated: List[CalibratorTrace]
    lattice: LatticeTrace
    output_cal: CalibratorTrace
    output: np.ndarray


def rho_batch(model: AggModel, mean: np.ndarray, with_partials: bool = True) -> RhoTrace:
    """Layers 4-6 applied to rows of ``mean`` (N, K)."""
    mean = np.asarray(mean, dtype=float)
    cal = [calibrate_batch(c, mean[:, k]) for k, c in enumerate(model.rho_calibrators)]
    u = np.stack([tr.output for tr in cal], axis=1)
    lat = lattice_batch(model.rho_lattice, u, with_partials=with_partials)
    out = calibrate_batch(model.output_calibrator, lat.output)
    return RhoTrace(calibrated=cal, lattice=lat, output_cal=out, output=out.output)


def phi_forward(model: AggModel, token: Sequence[Optional[float]]) -> np.ndarray:
    """The K-vector phi(token); ``None``/NaN entries are missing."""
    vec = np.array([np.nan if v is None else v for v in token], dtype=float)[None, :]
    return phi_batch(model, vec, with_partials=False).phi[0]


def forward_batch(model: AggModel, examples: Sequence[ExampleSet], chunk_size: int = 2048) -> np.ndarray:
    """Predictions for many examples, evaluated in chunks."""
    out = np.empty(len(examples))
    for start in range(0, len(examples), chunk_size):
        chunk = examples[start:start + chunk_size]
        batch = TokenBatch.from_examples(chunk)
        phi = phi_batch(model, batch.tokens, with_partials=False).phi
        mean = segment_mean(phi, batch.segment, batch.counts)
        out[start:start + len(chunk)] = rho_batch(model, mean, with_partials=False).output
    return out


def forward(model: AggModel, example: ExampleSet) -> float:
    return float(forward_batch(model, [example])[0])


def average_phi(phi_values) -> np.ndarray:
    """Layer-3 mean of per-token phi outputs, shape (M, K) or (M,)."""
    phi = np.asarray(phi_values, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    return segment_mean(phi, np.zeros(phi.shape[0], dtype=np.int64), np.array([phi.shape[0]]))[0]


def explain(model: AggModel, example: ExampleSet) -> dict:
    """Per-token breakdown of one prediction.

    The reported ``mean`` is computed from the reported ``phi`` values with
    the same reduction as :func:`forward`, so the two agree exactly.
    """
    tokens = example.tokens
    trace = phi_batch(model, tokens, with_partials=False)
    M = tokens.shape[0]
    mean = segment_mean(trace.phi, np.zeros(M, dtype=np.int64), np.array([M]))
    rho = rho_batch(model, mean, with_partials=False)
    records = []
    for m in range(M):
        name = example.token_names[m] if example.token_names else None
        records.append({
            "index": m,
            "name": name,
            "features": [None if np.isnan(v) else float(v) for v in tokens[m]],
            "calibrated": [[float(tr.output[m]) for tr in trace.calibrated[k]] for k in range(model.K)],
            "phi": trace.phi[m].tolist(),
        })
    return {
        "example_id": example.example_id,
        "tokens": records,
        "mean": mean[0].tolist(),
        "rho_calibrated": [float(tr.output[0]) for tr in rho.calibrated],
        "rho_lattice": float(rho.lattice.output[0]),
        "output": float(rho.output[0]),
    }


def format_explanation(report: dict, digits: int = 3) -> str:
    """Human-readable listing: one ``token: phi`` line per token, then the output."""
    lines = []
    for rec in report["tokens"]:
        label = rec["name"] or "(" + ", ".join("NA" if v is None else f"{v:g}" for v in rec["features"]) + ")"
        phi = ", ".join(f"{v:.{digits}f}" for v in rec["phi"])
        lines.append(f"{label}: {phi}")
    lines.append("mean: " + ", ".join(f"{v:.{digits}f}" for v in report["mean"]))
    lines.append(f"output: {report['output']:.{digits}f}")
    return "\n".join(lines)


def _token_key(token) -> tuple:
    return tuple(None if (v is None or (isinstance(v, float) and math.isnan(v))) else float(v)
                 for v in np.asarray(token, dtype=float).tolist())


class TokenScoreTable:
    """Precomputed phi values of a K=1 model with the rho stage kept for scoring."""

    def __init__(self, model: AggModel, scores: Dict[tuple, float]):
        self.model = model
        self.scores = scores

    def __len__(self):
        return len(self.scores)

    def lookup(self, token) -> float:
        key = _token_key(token)
        try:
            return self.scores[key]
        except KeyError:
            raise MissingToken(key) from None

    def score(self, example: ExampleSet) -> float:
        phi = np.array([[self.lookup(tok)] for tok in example.tokens])
        mean = segment_mean(phi, np.zeros(phi.shape[0], dtype=np.int64), np.array([phi.shape[0]]))
        return float(rho_batch(self.model, mean, with_partials=False).output[0])


def export_token_scores(model: AggModel, universe: Iterable) -> TokenScoreTable:
    """Compute phi offline for every token vector in ``universe`` (K must be 1)."""
    if model.K != 1:
        raise ConfigError(f"token score tables need K == 1, model has K == {model.K}")
    keys = list(dict.fromkeys(_token_key(t) for t in universe))
    if not keys:
        return TokenScoreTable(model, {})
    arr = np.array([[np.nan if v is None else v for v in key] for key in keys], dtype=float)
    phi = phi_batch(model, arr, with_partials=False).phi[:, 0]
    return TokenScoreTable(model, dict(zip(keys, phi.tolist())))


def export_calibrator_curves(model: AggModel) -> List[dict]:
    """Stored keypoints/values of every calibrator, for plotting."""
    return [
        {"layer": layer, "k": k, "d": d, "keypoints": cal.keypoints.tolist(), "values": cal.values.tolist()}
        for layer, k, d, cal in model.calibrators()
    ]


def write_curves_csv(curves: Sequence[dict], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", "k", "d", "keypoint", "value"])
        for c in curves:
            for x, y in zip(c["keypoints"], c["values"]):
                w.writerow([c["layer"], "" if c["k"] is None else c["k"], "" if c["d"] is None else c["d"],
                            repr(x), repr(y)])
