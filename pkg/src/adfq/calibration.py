"""Calibration pass: per-site statistics and quantizer initialization.

Statistics merge associatively and bit-exactly regardless of sample order.
Histograms use power-of-two bin widths aligned to multiples of the width,
which makes rebinning to a coarser sibling an exact integer index shift,
so ``merge(stats(A), stats(B)) == stats(A | B)`` holds bin-for-bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .blobio import read_tensor_file, write_tensor_file
from .errors import ConfigError, DomainError, ShapeError
from .quantizers import (
    DEFAULT_SHIFT_EPSILON,
    Log2Params,
    OutlierConfig,
    QuantizedTensor,
    UniformParams,
    check_bits,
    outlier_split,
    uniform_params_from_minmax,
    uq_dequantize,
    uq_quantize,
)
from .vit import SITE_KINDS, WEIGHT_KINDS, ViTModel, model_forward, site_id

BUNDLE_FORMAT = "ADFQ-QNT"
BUNDLE_VERSION = 1

HIST_BINS = 2048
# width also resolves magnitude so degenerate (constant) sites stay exact
_MAG_RESOLUTION_EXP = -22


# ---------------------------------------------------------------------------
# mergeable histogram
# ---------------------------------------------------------------------------

def _width_exponent(vmin: float, vmax: float) -> int:
    span = vmax - vmin
    mag = max(abs(vmin), abs(vmax), 2.0 ** -100)
    target = max(span, mag * 2.0 ** _MAG_RESOLUTION_EXP)
    e = math.ceil(math.log2(target / HIST_BINS))
    while math.floor(math.ldexp(vmax, -e)) - math.floor(math.ldexp(vmin, -e)) + 1 > HIST_BINS:
        e += 1
    return e


@dataclass(frozen=True)
class Pow2Histogram:
    """Fixed 2048-bin histogram with a power-of-two, offset-aligned width."""

    width_exp: int
    start_index: int
    counts: np.ndarray  # int64[HIST_BINS]
    value_min: float
    value_max: float

    @classmethod
    def from_values(cls, values: np.ndarray) -> "Pow2Histogram":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise DomainError("histogram needs at least one value")
        vmin, vmax = float(values.min()), float(values.max())
        e = _width_exponent(vmin, vmax)
        idx = np.floor(np.ldexp(values, -e)).astype(np.int64)
        start = int(math.floor(math.ldexp(vmin, -e)))
        counts = np.bincount(idx - start, minlength=HIST_BINS).astype(np.int64)
        return cls(width_exp=e, start_index=start, counts=counts,
                   value_min=vmin, value_max=vmax)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "Pow2Histogram") -> "Pow2Histogram":
        vmin = min(self.value_min, other.value_min)
        vmax = max(self.value_max, other.value_max)
        e = _width_exponent(vmin, vmax)
        start = int(math.floor(math.ldexp(vmin, -e)))
        counts = np.zeros(HIST_BINS, dtype=np.int64)
        for part in (self, other):
            shift = e - part.width_exp
            if shift < 0:
                raise DomainError("histogram widths are not merge-compatible")
            occupied = np.nonzero(part.counts)[0]
            abs_idx = (part.start_index + occupied) >> shift
            np.add.at(counts, abs_idx - start, part.counts[occupied])
        return Pow2Histogram(width_exp=e, start_index=start, counts=counts,
                             value_min=vmin, value_max=vmax)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.start_index + np.arange(HIST_BINS + 1, dtype=np.float64)
        bounds = np.ldexp(idx, self.width_exp)
        return bounds[:-1], bounds[1:]


# ---------------------------------------------------------------------------
# per-site statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteStats:
    granularity: str            # "per-patch" | "per-tensor"
    alpha: float                # inf when the site has no outlier handling
    one_sided: bool
    group_min: np.ndarray       # [n] or scalar ()
    group_max: np.ndarray
    outlier_count: int
    total_count: int
    hist: Pow2Histogram
    n_samples: int

    @property
    def outlier_ratio(self) -> float:
        return self.outlier_count / self.total_count if self.total_count else 0.0

    def validate(self) -> None:
        if np.any(self.group_max < self.group_min):
            raise DomainError("site stats with max < min")
        if not (0.0 <= self.outlier_ratio <= 1.0):
            raise DomainError("outlier ratio outside [0, 1]")
        if self.hist.total != self.total_count:
            raise DomainError("histogram mass does not equal element count")

    def merge(self, other: "SiteStats") -> "SiteStats":
        if (self.granularity != other.granularity or self.alpha != other.alpha
                or self.one_sided != other.one_sided
                or self.group_min.shape != other.group_min.shape):
            raise ShapeError("cannot merge incompatible site stats")
        return SiteStats(
            granularity=self.granularity, alpha=self.alpha,
            one_sided=self.one_sided,
            group_min=np.minimum(self.group_min, other.group_min),
            group_max=np.maximum(self.group_max, other.group_max),
            outlier_count=self.outlier_count + other.outlier_count,
            total_count=self.total_count + other.total_count,
            hist=self.hist.merge(other.hist),
            n_samples=self.n_samples + other.n_samples)


def _site_stats_from_tap(tensor: np.ndarray, policy_entry,
                         one_sided: bool) -> SiteStats:
    raw = np.asarray(tensor, dtype=np.float64)
    alpha = policy_entry.alpha
    if policy_entry.quant == "poq":
        cfg = OutlierConfig(alpha=alpha, one_sided=one_sided)
        dense, sparse = outlier_split(raw, cfg)
        gmin, gmax = dense.min(axis=1), dense.max(axis=1)
        granularity = "per-patch"
        outliers = sparse.nnz
    else:
        gmin, gmax = np.asarray(raw.min()), np.asarray(raw.max())
        granularity = "per-tensor"
        if math.isinf(alpha):
            outliers = 0
        elif one_sided:
            outliers = int(np.count_nonzero(raw >= alpha))
        else:
            outliers = int(np.count_nonzero(np.abs(raw) >= alpha))
    return SiteStats(granularity=granularity, alpha=alpha, one_sided=one_sided,
                     group_min=gmin, group_max=gmax, outlier_count=outliers,
                     total_count=raw.size, hist=Pow2Histogram.from_values(raw),
                     n_samples=1)


@dataclass
class CalibStats:
    sites: dict[str, SiteStats]
    n_samples: int

    def merge(self, other: "CalibStats") -> "CalibStats":
        if set(self.sites) != set(other.sites):
            raise ShapeError("cannot merge stats covering different sites")
        return CalibStats(
            sites={k: self.sites[k].merge(other.sites[k]) for k in self.sites},
            n_samples=self.n_samples + other.n_samples)

    def validate(self) -> None:
        for st in self.sites.values():
            st.validate()

    def to_json_dict(self) -> dict:
        out = {"n_samples": self.n_samples, "sites": {}}
        for sid in sorted(self.sites):
            st = self.sites[sid]
            out["sites"][sid] = {
                "granularity": st.granularity,
                "alpha": None if math.isinf(st.alpha) else st.alpha,
                "min": np.asarray(st.group_min).ravel().tolist(),
                "max": np.asarray(st.group_max).ravel().tolist(),
                "outlier_ratio": st.outlier_ratio,
                "count": st.total_count,
            }
        return out


# ---------------------------------------------------------------------------
# placement policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SitePolicy:
    quant: str          # "uniform" | "poq" | "log2" | "shift-log2"
    granularity: str    # grouping for the uniform part
    alpha: float = math.inf


@dataclass(frozen=True)
class PlacementPolicy:
    sites: dict[str, SitePolicy]
    epsilon: float = DEFAULT_SHIFT_EPSILON
    one_sided: bool = False


_OVERRIDABLE = {"uniform-per-tensor", "uniform-per-patch", "poq", "log2",
                "shift-log2"}


def build_policy(alpha_qkv: float = 5.0, alpha_fc1: float = 10.0,
                 epsilon: float = DEFAULT_SHIFT_EPSILON,
                 enable_poq: bool = True, enable_slq: bool = True,
                 one_sided: bool = False,
                 overrides: dict[str, str] | None = None) -> PlacementPolicy:
    """Quantizer placement: weights per-channel uniform; QKV/FC1 inputs
    outlier-aware per-patch; FC2 input shift-log2; post-softmax log2; the
    remaining matmul inputs per-tensor uniform.  Disabling a component
    falls back to per-tensor uniform at its sites."""
    sites = {}
    for kind in ("q", "k", "v", "attn_out_input"):
        sites[kind] = SitePolicy(quant="uniform", granularity="per-tensor")
    if enable_poq:
        sites["qkv_input"] = SitePolicy(quant="poq", granularity="per-patch",
                                        alpha=alpha_qkv)
        sites["fc1_input"] = SitePolicy(quant="poq", granularity="per-patch",
                                        alpha=alpha_fc1)
    else:
        sites["qkv_input"] = SitePolicy(quant="uniform", granularity="per-tensor")
        sites["fc1_input"] = SitePolicy(quant="uniform", granularity="per-tensor")
    sites["post_softmax"] = SitePolicy(quant="log2", granularity="per-tensor")
    if enable_slq:
        sites["fc2_input"] = SitePolicy(quant="shift-log2",
                                        granularity="per-tensor")
    else:
        sites["fc2_input"] = SitePolicy(quant="uniform", granularity="per-tensor")
    for kind, choice in (overrides or {}).items():
        if kind not in SITE_KINDS:
            raise ConfigError(f"unknown site kind {kind!r} in policy override")
        if choice not in _OVERRIDABLE:
            raise ConfigError(f"unknown quantizer {choice!r} for site {kind!r}")
        if choice == "poq":
            alpha = alpha_qkv if kind == "qkv_input" else alpha_fc1
            sites[kind] = SitePolicy(quant="poq", granularity="per-patch",
                                     alpha=alpha)
        elif choice == "uniform-per-patch":
            sites[kind] = SitePolicy(quant="uniform", granularity="per-patch")
        elif choice == "uniform-per-tensor":
            sites[kind] = SitePolicy(quant="uniform", granularity="per-tensor")
        else:
            sites[kind] = SitePolicy(quant=choice, granularity="per-tensor")
    return PlacementPolicy(sites=sites, epsilon=epsilon, one_sided=one_sided)


# ---------------------------------------------------------------------------
# stats collection
# ---------------------------------------------------------------------------

def collect_stats(model: ViTModel, images, policy: PlacementPolicy) -> CalibStats:
    """Run calibration samples through the FP model and merge tap statistics."""
    images = list(images)
    if not images:
        raise DomainError("calibration needs at least one sample")
    acc: CalibStats | None = None
    for img in images:
        _, taps = model_forward(img, model, collect_taps=True)
        sites = {}
        for tap in taps:
            entry = policy.sites[tap.kind]
            sites[site_id(tap.block, tap.kind)] = _site_stats_from_tap(
                tap.tensor, entry, policy.one_sided)
        sample_stats = CalibStats(sites=sites, n_samples=1)
        acc = sample_stats if acc is None else acc.merge(sample_stats)
    acc.validate()
    return acc


# ---------------------------------------------------------------------------
# quantizer bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteParams:
    kind: str                            # "uniform" | "log2" | "shift-log2"
    uniform: UniformParams | None = None
    log2: Log2Params | None = None
    outlier: OutlierConfig | None = None


@dataclass
class WeightQuantState:
    params: UniformParams   # per-channel
    v: np.ndarray           # rounding logits, same shape as the weight
    codes: np.ndarray       # deployed integer codes
    hardened: bool = False  # True once V has been optimized and binarized


@dataclass
class QuantBundle:
    bits_w: int
    bits_a: int
    sites: dict[str, SiteParams]
    weights: dict[str, WeightQuantState]
    meta: dict = field(default_factory=dict)
    _dequant_cache: dict = field(default_factory=dict, repr=False)

    def site(self, block: int, kind: str) -> SiteParams:
        return self.sites[site_id(block, kind)]

    def weight_state(self, block: int, wname: str) -> WeightQuantState:
        return self.weights[f"block{block}.{wname}"]

    def weight_quantized(self, block: int, wname: str) -> QuantizedTensor:
        st = self.weight_state(block, wname)
        return QuantizedTensor(codes=st.codes, params=st.params)

    def weight_dequant(self, block: int, wname: str) -> np.ndarray:
        key = f"block{block}.{wname}"
        if key not in self._dequant_cache:
            self._dequant_cache[key] = uq_dequantize(self.weight_quantized(block, wname))
        return self._dequant_cache[key]

    def invalidate_cache(self) -> None:
        self._dequant_cache.clear()

    def replace_site(self, sid: str, params: SiteParams) -> None:
        self.sites[sid] = params

    def n_blocks(self) -> int:
        blocks = {int(k.split(".")[0][5:]) for k in self.sites}
        return max(blocks) + 1 if blocks else 0

    # -- serialization ------------------------------------------------------

    def save(self, path: str) -> None:
        manifest_sites = {}
        tensors: list[tuple[str, np.ndarray]] = []
        for sid in sorted(self.sites):
            sp = self.sites[sid]
            entry = {"kind": sp.kind}
            if sp.uniform is not None:
                entry["granularity"] = sp.uniform.granularity
                entry["k"] = sp.uniform.bits
                tensors.append((f"{sid}.scale", np.atleast_1d(sp.uniform.scale)))
                tensors.append((f"{sid}.zero",
                                np.atleast_1d(sp.uniform.zero_point).astype(np.float64)))
            if sp.log2 is not None:
                entry["k"] = sp.log2.bits
                entry["shift"] = sp.log2.shift
                entry["epsilon"] = sp.log2.epsilon
                tensors.append((f"{sid}.scale", np.atleast_1d(sp.log2.scale)))
            if sp.outlier is not None:
                entry["alpha"] = ("inf" if math.isinf(sp.outlier.alpha)
                                  else sp.outlier.alpha)
                entry["one_sided"] = sp.outlier.one_sided
            manifest_sites[sid] = entry
        manifest_weights = {}
        for wid in sorted(self.weights):
            st = self.weights[wid]
            manifest_weights[wid] = {"k": st.params.bits, "hardened": st.hardened}
            tensors.append((f"{wid}.scale", st.params.scale))
            tensors.append((f"{wid}.zero", st.params.zero_point.astype(np.float64)))
            tensors.append((f"{wid}.v", st.v))
            tensors.append((f"{wid}.codes", st.codes.astype(np.float64)))
        write_tensor_file(path, BUNDLE_FORMAT, BUNDLE_VERSION,
                          {"bits_w": self.bits_w, "bits_a": self.bits_a,
                           "meta": self.meta, "sites": manifest_sites,
                           "weights": manifest_weights}, tensors)

    @classmethod
    def load(cls, path: str) -> "QuantBundle":
        manifest, tensors = read_tensor_file(path, BUNDLE_FORMAT, BUNDLE_VERSION)
        sites: dict[str, SiteParams] = {}
        for sid, entry in manifest["sites"].items():
            kind = entry["kind"]
            if kind == "uniform":
                scale = tensors[f"{sid}.scale"]
                zero = tensors[f"{sid}.zero"].astype(np.int64)
                gran = entry["granularity"]
                if gran == "per-tensor":
                    scale, zero = scale.reshape(())[()], zero.reshape(())[()]
                    scale, zero = np.asarray(scale), np.asarray(zero)
                up = UniformParams(scale=scale, zero_point=zero,
                                   bits=entry["k"], granularity=gran)
                outlier = None
                if "alpha" in entry:
                    alpha = (math.inf if entry["alpha"] == "inf"
                             else float(entry["alpha"]))
                    outlier = OutlierConfig(alpha=alpha,
                                            one_sided=entry.get("one_sided", False))
                sites[sid] = SiteParams(kind="uniform", uniform=up, outlier=outlier)
            elif kind in ("log2", "shift-log2"):
                lp = Log2Params(scale=float(tensors[f"{sid}.scale"][0]),
                                bits=entry["k"], shift=entry["shift"],
                                epsilon=entry["epsilon"], kind=kind)
                sites[sid] = SiteParams(kind=kind, log2=lp)
            else:
                raise ConfigError(f"unknown site kind {kind!r} in bundle")
        weights: dict[str, WeightQuantState] = {}
        for wid, entry in manifest["weights"].items():
            params = UniformParams(scale=tensors[f"{wid}.scale"],
                                   zero_point=tensors[f"{wid}.zero"].astype(np.int64),
                                   bits=entry["k"], granularity="per-channel")
            weights[wid] = WeightQuantState(
                params=params, v=tensors[f"{wid}.v"],
                codes=tensors[f"{wid}.codes"].astype(np.int64),
                hardened=entry["hardened"])
        return cls(bits_w=manifest["bits_w"], bits_a=manifest["bits_a"],
                   sites=sites, weights=weights, meta=manifest.get("meta", {}))


def _site_params_from_stats(st: SiteStats, entry: SitePolicy, bits_a: int,
                            epsilon: float, one_sided: bool) -> SiteParams:
    if entry.quant in ("uniform", "poq"):
        up = uniform_params_from_minmax(st.group_min, st.group_max, bits_a,
                                        entry.granularity)
        outlier = None
        if entry.quant == "poq":
            outlier = OutlierConfig(alpha=entry.alpha, one_sided=one_sided)
        return SiteParams(kind="uniform", uniform=up, outlier=outlier)
    if entry.quant == "log2":
        smax = float(np.max(st.group_max))
        lp = Log2Params(scale=smax if smax > 0 else 1.0, bits=bits_a, kind="log2")
        return SiteParams(kind="log2", log2=lp)
    if entry.quant == "shift-log2":
        m = float(np.min(st.group_min))
        s = float(np.max(st.group_max)) - m + epsilon
        lp = Log2Params(scale=s, bits=bits_a, shift=m, epsilon=epsilon,
                        kind="shift-log2")
        return SiteParams(kind="shift-log2", log2=lp)
    raise ConfigError(f"unknown site quantizer {entry.quant!r}")


def init_weight_state(w: np.ndarray, bits_w: int) -> WeightQuantState:
    """Per-channel params, nearest-rounded deployment codes, and V chosen so
    the soft weight starts at the real-valued weight (h(v0) = fractional
    rounding residual, clipped to (0.01, 0.99) before inverting the gate)."""
    params = uniform_params_from_minmax(w.min(axis=0), w.max(axis=0), bits_w,
                                        "per-channel")
    codes = uq_quantize(w, params).codes
    sb = params.scale.reshape(1, -1)
    frac = w / sb - np.floor(w / sb)
    v0 = ad.rect_sigmoid_inverse(np.clip(frac, 0.01, 0.99))
    return WeightQuantState(params=params, v=v0, codes=codes, hardened=False)


def init_bundle(stats: CalibStats, model: ViTModel, policy: PlacementPolicy,
                bits_w: int, bits_a: int) -> QuantBundle:
    """Initialize every quantizer of the placement policy from statistics."""
    check_bits(bits_w)
    check_bits(bits_a)
    sites: dict[str, SiteParams] = {}
    for block in range(model.config.blocks):
        for kind in SITE_KINDS:
            sid = site_id(block, kind)
            if sid not in stats.sites:
                raise ConfigError(f"statistics missing for site {sid}")
            sites[sid] = _site_params_from_stats(
                stats.sites[sid], policy.sites[kind], bits_a,
                policy.epsilon, policy.one_sided)
    weights = {}
    for block in range(model.config.blocks):
        for wname in WEIGHT_KINDS:
            weights[f"block{block}.{wname}"] = init_weight_state(
                model.weight_matrix(block, wname), bits_w)
    meta = {"bits_w": bits_w, "bits_a": bits_a,
            "epsilon": policy.epsilon, "one_sided": policy.one_sided,
            "policy": {k: policy.sites[k].quant for k in SITE_KINDS},
            "alphas": {k: ("inf" if math.isinf(policy.sites[k].alpha)
                           else policy.sites[k].alpha) for k in SITE_KINDS}}
    return QuantBundle(bits_w=bits_w, bits_a=bits_a, sites=sites,
                       weights=weights, meta=meta)
