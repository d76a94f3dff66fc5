"""Encoder-decoder point network predicting four material fractions per point.

Encoder stage s runs a rigid kernel point convolution (radius
``first_radius_ratio * dl_s``), batch normalization with leaky ReLU, then a
unary block; between stages the cloud is grid-subsampled at ``dl_{s+1} =
2 dl_s``.  The decoder copies coarse features to finer points by nearest
neighbor, concatenates the encoder skip, and applies a unary block.  The head
is a unary block, a biased linear map to four logits and a softmax, so the
outputs are non-negative and sum to one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from voxfrac.kpnet import layers as L
from voxfrac.kpnet.kernels import KernelLayout, init_kernel_points
from voxfrac.kpnet.neighbors import Pooling, grid_pooling, nearest_index, radius_neighbors

CHECKPOINT_MAGIC = b"VFK1"


class NetworkError(ValueError):
    pass


@dataclass
class NetworkConfig:
    voxel_size: float = 1.0
    stages: int = 4
    base_channels: int = 64
    kernel_points: int = 15
    first_radius_ratio: float = 2.5
    sigma_ratio: float = 0.3
    max_neighbors: int = 40
    input_sphere_radius: float | None = None
    in_features: int = 2
    out_features: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.input_sphere_radius is None:
            self.input_sphere_radius = 12.0 * self.voxel_size

    def validate(self) -> None:
        if not self.voxel_size > 0:
            raise NetworkError("voxel_size must be positive")
        if self.stages < 2:
            raise NetworkError(f"need at least two stages, got {self.stages}")
        if self.base_channels < 1 or self.max_neighbors < 1:
            raise NetworkError("base_channels and max_neighbors must be >= 1")
        if not self.input_sphere_radius > self.radius(0):
            raise NetworkError(
                f"input sphere radius {self.input_sphere_radius} must exceed the first layer radius {self.radius(0)}")

    def dl(self, stage: int) -> float:
        return self.voxel_size * 2.0**stage

    def radius(self, stage: int) -> float:
        return self.first_radius_ratio * self.dl(stage)

    def channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: NetworkConfig) -> int:
    """Closed-form count of trainable parameters."""
    K, S = cfg.kernel_points, cfg.stages
    total = 0
    c_prev = cfg.in_features
    for s in range(S):
        c = cfg.channels(s)
        total += K * c_prev * c + 2 * c + c * c + 2 * c
        c_prev = c
    for s in range(S - 2, -1, -1):
        c = cfg.channels(s)
        total += (cfg.channels(s + 1) + c) * c + 2 * c
    c0 = cfg.channels(0)
    return total + c0 * c0 + 2 * c0 + c0 * cfg.out_features + cfg.out_features


@dataclass
class Geometry:
    """Parameter-independent structure of one input cloud."""

    points: list[np.ndarray]
    neighbors: list[np.ndarray]
    pools: list[Pooling]
    upsample: list[np.ndarray]

    @property
    def n_points(self) -> int:
        return len(self.points[0])


def build_geometry(points, cfg: NetworkConfig) -> Geometry:
    pts = [np.asarray(points, dtype=np.float64).reshape(-1, 3)]
    if len(pts[0]) == 0:
        raise NetworkError("empty input cloud")
    neighbors, pools, ups = [], [], []
    for s in range(cfg.stages):
        neighbors.append(radius_neighbors(pts[s], pts[s], cfg.radius(s), cfg.max_neighbors))
        if s + 1 < cfg.stages:
            pool = grid_pooling(pts[s], cfg.dl(s + 1))
            pools.append(pool)
            pts.append(pool.points)
            ups.append(nearest_index(pool.points, pts[s]))
    return Geometry(pts, neighbors, pools, ups)


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NetworkError(f"non-finite activations after {where}")


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class KpNetwork:
    config: NetworkConfig
    kernel: KernelLayout
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: NetworkConfig) -> "KpNetwork":
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        kernel = init_kernel_points(cfg.kernel_points, rng_seed=cfg.seed, sigma=cfg.sigma_ratio)
        net = cls(cfg, kernel)
        K = cfg.kernel_points
        c_prev = cfg.in_features
        for s in range(cfg.stages):
            c = cfg.channels(s)
            net.params[f"enc{s}.conv.W"] = _he(rng, (K, c_prev, c), K * c_prev)
            net._add_norm(f"enc{s}.conv_bn", c)
            net.params[f"enc{s}.unary.W"] = _he(rng, (c, c), c)
            net._add_norm(f"enc{s}.unary_bn", c)
            c_prev = c
        for s in range(cfg.stages - 2, -1, -1):
            c = cfg.channels(s)
            fan = cfg.channels(s + 1) + c
            net.params[f"dec{s}.unary.W"] = _he(rng, (fan, c), fan)
            net._add_norm(f"dec{s}.unary_bn", c)
        c0 = cfg.channels(0)
        net.params["head.unary.W"] = _he(rng, (c0, c0), c0)
        net._add_norm("head.unary_bn", c0)
        net.params["head.out.W"] = rng.normal(0.0, np.sqrt(1.0 / c0), size=(c0, cfg.out_features))
        net.params["head.out.b"] = np.zeros(cfg.out_features)
        return net

    def _add_norm(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = np.ones(c)
        self.params[f"{name}.beta"] = np.zeros(c)
        self.buffers[f"{name}.mean"] = np.zeros(c)
        self.buffers[f"{name}.var"] = np.ones(c)

    def _norm(self, name: str) -> L.NormState:
        return L.NormState(self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                           self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"])

    def _store(self, name: str, state: L.NormState) -> None:
        self.buffers[f"{name}.mean"] = state.running_mean
        self.buffers[f"{name}.var"] = state.running_var

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward / backward ---------------------------------------------------

    def forward(self, points, features, training: bool = False, geometry: Geometry | None = None):
        """Return (probabilities (N, 4), cache)."""
        cfg = self.config
        geo = geometry if geometry is not None else build_geometry(points, cfg)
        x = np.asarray(features, dtype=np.float64)
        if x.shape != (geo.n_points, cfg.in_features):
            raise NetworkError(f"features must be ({geo.n_points}, {cfg.in_features}), got {x.shape}")
        cache: dict = {"geo": geo}
        skips = []
        for s in range(cfg.stages):
            kp, sigma = self.kernel.scaled(cfg.radius(s))
            pts = geo.points[s]
            x, cache[f"enc{s}.conv"] = L.kpconv_forward(pts, pts, geo.neighbors[s], x, kp, sigma,
                                                        self.params[f"enc{s}.conv.W"])
            x = self._norm_act(x, f"enc{s}.conv_bn", training, cache)
            x = self._unary(x, f"enc{s}", training, cache)
            _check_finite(x, f"encoder stage {s}")
            skips.append(x)
            if s + 1 < cfg.stages:
                x = geo.pools[s].pool(x)
        for s in range(cfg.stages - 2, -1, -1):
            x = np.concatenate([x[geo.upsample[s]], skips[s]], axis=1)
            x = self._unary(x, f"dec{s}", training, cache)
            _check_finite(x, f"decoder stage {s}")
        x = self._unary(x, "head", training, cache)
        cache["head.in"] = x
        logits = x @ self.params["head.out.W"] + self.params["head.out.b"]
        _check_finite(logits, "head")
        probs = L.softmax(logits)
        cache["probs"] = probs
        return probs, cache

    def _norm_act(self, x, name, training, cache):
        state = self._norm(name)
        out, cache[name] = L.norm_act_forward(x, state, training)
        self._store(name, state)
        return out

    def _unary(self, x, prefix, training, cache):
        state = self._norm(f"{prefix}.unary_bn")
        out, cache[f"{prefix}.unary"] = L.unary_forward(x, self.params[f"{prefix}.unary.W"], state, training)
        self._store(f"{prefix}.unary_bn", state)
        return out

    def backward(self, grad_probs, cache) -> dict[str, np.ndarray]:
        cfg = self.config
        geo: Geometry = cache["geo"]
        grads: dict[str, np.ndarray] = {}
        g = L.softmax_backward(np.asarray(grad_probs, dtype=np.float64), cache["probs"])
        grads["head.out.W"] = cache["head.in"].T @ g
        grads["head.out.b"] = g.sum(axis=0)
        g = g @ self.params["head.out.W"].T
        g = self._unary_back(g, "head", cache, grads)
        skip_grads = [None] * cfg.stages
        for s in range(cfg.stages - 1):
            g = self._unary_back(g, f"dec{s}", cache, grads)
            c_up = g.shape[1] - cfg.channels(s)
            g_up, skip_grads[s] = g[:, :c_up], g[:, c_up:]
            coarse = np.zeros((len(geo.points[s + 1]), c_up))
            np.add.at(coarse, geo.upsample[s], g_up)
            g = coarse
        # g now holds the gradient wrt the deepest encoder output
        for s in range(cfg.stages - 1, -1, -1):
            if s + 1 < cfg.stages:
                g = geo.pools[s].unpool_grad(g) + skip_grads[s]
            g = self._unary_back(g, f"enc{s}", cache, grads)
            g, grads[f"enc{s}.conv_bn.gamma"], grads[f"enc{s}.conv_bn.beta"] = \
                L.norm_act_backward(g, cache[f"enc{s}.conv_bn"])
            g, grads[f"enc{s}.conv.W"] = L.kpconv_backward(g, cache[f"enc{s}.conv"])
        return grads

    def _unary_back(self, g, prefix, cache, grads):
        g, grads[f"{prefix}.unary.W"], grads[f"{prefix}.unary_bn.gamma"], grads[f"{prefix}.unary_bn.beta"] = \
            L.unary_backward(g, cache[f"{prefix}.unary"])
        return g

    def predict(self, points, features, geometry: Geometry | None = None) -> np.ndarray:
        return self.forward(points, features, training=False, geometry=geometry)[0]

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        """VFK1: magic, u64 config length + JSON, then named f64 tensors to EOF."""
        header = {"config": self.config.to_dict(), "kernel_sigma": self.kernel.sigma}
        blob = json.dumps(header, sort_keys=True).encode()
        tensors = [("kernel.points", self.kernel.points)]
        tensors += [(n, self.params[n]) for n in sorted(self.params)]
        tensors += [(f"buffer:{n}", self.buffers[n]) for n in sorted(self.buffers)]
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for name, arr in tensors:
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "KpNetwork":
        data = Path(path).read_bytes()
        if data[:4] != CHECKPOINT_MAGIC:
            raise NetworkError(f"{path}: not a VFK1 checkpoint")
        (n,) = struct.unpack_from("<Q", data, 4)
        header = json.loads(data[12:12 + n].decode())
        off = 12 + n
        tensors = {}
        while off < len(data):
            (ln,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + ln].decode()
            off += 4 + ln
            (rank,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{rank}I", data, off + 1)
            off += 1 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if off + 8 * count > len(data):
                raise NetworkError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
        cfg = NetworkConfig(**header["config"])
        net = cls(cfg, KernelLayout(tensors.pop("kernel.points"), header["kernel_sigma"]))
        for name, arr in tensors.items():
            if name.startswith("buffer:"):
                net.buffers[name[7:]] = arr
            else:
                net.params[name] = arr
        return net
