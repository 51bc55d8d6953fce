"""Input perturbations for vectors and (h, w, c) grids, with keyed RNG streams."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

VARIANTS = ("gaussian", "uniform", "occlusion", "stripes", "du_sample", "compose")
GRID_ONLY = ("occlusion", "stripes", "du_sample")


def stream(seed, *key) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, *key)``.

    Keys are nonnegative integers; the same key always yields the same
    stream regardless of what else has been drawn.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


@dataclass(frozen=True)
class Gaussian:
    sigma: float
    variant: str = field(default="gaussian", init=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class Uniform:
    amplitude: float
    variant: str = field(default="uniform", init=False)

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")


@dataclass(frozen=True)
class Occlusion:
    n_patches: int = 20
    patch_h: int = 4
    patch_w: int = 4
    fill_value: float = 0.0
    variant: str = field(default="occlusion", init=False)

    def __post_init__(self):
        if self.n_patches < 0 or self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("occlusion needs n_patches >= 0 and positive patch extents")


@dataclass(frozen=True)
class Stripes:
    n_stripes: int = 10
    thickness: int = 1
    orientation: str = "vertical"
    fill_value: float = 0.0
    variant: str = field(default="stripes", init=False)

    def __post_init__(self):
        if self.n_stripes < 0 or self.thickness < 1:
            raise ValueError("stripes need n_stripes >= 0 and thickness >= 1")
        if self.orientation not in ("vertical", "horizontal"):
            raise ValueError("orientation is 'vertical' or 'horizontal'")


@dataclass(frozen=True)
class DUSample:
    down_factor: int = 2
    variant: str = field(default="du_sample", init=False)

    def __post_init__(self):
        if int(self.down_factor) != self.down_factor or self.down_factor < 2:
            raise ValueError("down_factor must be an integer >= 2")


@dataclass(frozen=True)
class Compose:
    specs: tuple = ()
    variant: str = field(default="compose", init=False)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        if any(isinstance(s, Compose) for s in self.specs):
            raise ValueError("nested compose is not supported")


_CLASSES = {"gaussian": Gaussian, "uniform": Uniform, "occlusion": Occlusion,
            "stripes": Stripes, "du_sample": DUSample}


def is_identity(spec) -> bool:
    if isinstance(spec, Gaussian):
        return spec.sigma == 0
    if isinstance(spec, Uniform):
        return spec.amplitude == 0
    if isinstance(spec, Compose):
        return all(is_identity(s) for s in spec.specs)
    if isinstance(spec, (Occlusion, Stripes)):
        return (spec.n_patches if isinstance(spec, Occlusion) else spec.n_stripes) == 0
    return False


def label(spec) -> str:
    """Short human-readable tag, e.g. ``gaussian(sigma=0.1)``."""
    if isinstance(spec, Compose):
        return "+".join(label(s) for s in spec.specs) or "clean"
    args = ",".join(f"{f.name}={getattr(spec, f.name)}" for f in fields(spec) if f.init)
    return f"{spec.variant}({args})"


# ------------------------------------------------------------------ apply

def _require_grid(spec, x):
    if x.ndim != 3:
        raise ValueError(f"{spec.variant} needs an (h, w, c) grid, got shape {x.shape}")


def _occlude(spec, x, rng):
    h, w, _ = x.shape
    if spec.patch_h > h or spec.patch_w > w:
        raise ValueError("patch larger than grid")
    out = x.copy()
    tops = rng.integers(0, h - spec.patch_h + 1, size=spec.n_patches)
    lefts = rng.integers(0, w - spec.patch_w + 1, size=spec.n_patches)
    for r, c in zip(tops, lefts):
        out[r:r + spec.patch_h, c:c + spec.patch_w, :] = spec.fill_value
    return out


def _stripe(spec, x, rng):
    vertical = spec.orientation == "vertical"
    out = x if vertical else np.swapaxes(x, 0, 1)
    width = out.shape[1]
    if spec.thickness > width:
        raise ValueError("stripe thicker than grid")
    out = out.copy()
    for c in rng.integers(0, width - spec.thickness + 1, size=spec.n_stripes):
        out[:, c:c + spec.thickness, :] = spec.fill_value
    return out if vertical else np.swapaxes(out, 0, 1).copy()


def _du_sample(spec, x):
    k = int(spec.down_factor)
    h, w, ch = x.shape
    if k > h or k > w:
        raise ValueError("down_factor larger than grid")
    # ragged trailing blocks are averaged over the cells they actually cover
    hb, wb = -(-h // k), -(-w // k)
    pad = np.zeros((hb * k, wb * k, ch))
    cnt = np.zeros((hb * k, wb * k, 1))
    pad[:h, :w] = x
    cnt[:h, :w] = 1.0
    sums = pad.reshape(hb, k, wb, k, ch).sum(axis=(1, 3))
    counts = cnt.reshape(hb, k, wb, k, 1).sum(axis=(1, 3))
    small = sums / counts
    return np.repeat(np.repeat(small, k, axis=0), k, axis=1)[:h, :w]


def apply(spec, x, rng: np.random.Generator, clamp=None):
    """Perturb one sample (vector or (h, w, c) grid).

    ``clamp`` is an optional (low, high) range applied after perturbing.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.variant in GRID_ONLY:
        _require_grid(spec, x)
    if isinstance(spec, Gaussian):
        out = x + spec.sigma * rng.standard_normal(x.shape) if spec.sigma else x.copy()
    elif isinstance(spec, Uniform):
        out = x + rng.uniform(-spec.amplitude, spec.amplitude, x.shape) if spec.amplitude else x.copy()
    elif isinstance(spec, Occlusion):
        out = _occlude(spec, x, rng)
    elif isinstance(spec, Stripes):
        out = _stripe(spec, x, rng)
    elif isinstance(spec, DUSample):
        out = _du_sample(spec, x)
    elif isinstance(spec, Compose):
        out = x.copy()
        for s in spec.specs:
            out = apply(s, out, rng)
    else:
        raise TypeError(f"not a perturbation spec: {spec!r}")
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


def apply_batch(spec, xs, rng: np.random.Generator):
    """Perturb a stack of samples from one stream (used for training noise)."""
    xs = np.asarray(xs, dtype=np.float64)
    if isinstance(spec, Gaussian):
        return xs + spec.sigma * rng.standard_normal(xs.shape) if spec.sigma else xs.copy()
    if isinstance(spec, Uniform):
        return xs + rng.uniform(-spec.amplitude, spec.amplitude, xs.shape) if spec.amplitude else xs.copy()
    return np.stack([apply(spec, x, rng) for x in xs])


def noised_samples(samples, spec, seed, indices=None, clamp=None, key=()):
    """Perturb each sample with a stream keyed by ``(seed, *key, original index)``."""
    samples = np.asarray(samples, dtype=np.float64)
    if indices is None:
        indices = np.arange(samples.shape[0])
    if is_identity(spec):
        return samples.copy()
    return np.stack([apply(spec, x, stream(seed, *key, int(i)), clamp) for x, i in zip(samples, indices)])


def noised_dataset(dataset, spec, seed, clamp=None, key=()):
    """Copy of ``dataset`` with perturbed samples.

    Streams are keyed by ``dataset.index`` (original sample indices) when
    present, so a permuted or split dataset perturbs each sample the same way.
    """
    idx = getattr(dataset, "index", None)
    return dataset.with_samples(noised_samples(dataset.x, spec, seed, idx, clamp, key))


# ------------------------------------------------------- flat config keys

def to_flat(spec, prefix="perturb") -> dict:
    out = {f"{prefix}.variant": spec.variant}
    if isinstance(spec, Compose):
        for i, s in enumerate(spec.specs):
            out.update(to_flat(s, f"{prefix}.{i}"))
        return out
    for f in fields(spec):
        if f.init:
            out[f"{prefix}.{f.name}"] = str(getattr(spec, f.name))
    return out


def _coerce(cls, name, raw):
    kind = {f.name: f.type for f in fields(cls)}[name]
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return str(raw)


def from_flat(values: dict, prefix="perturb"):
    """Inverse of :func:`to_flat`; unknown keys under ``prefix`` are errors."""
    variant = values.get(f"{prefix}.variant")
    if variant not in VARIANTS:
        raise ValueError(f"{prefix}.variant: unknown perturbation {variant!r}")
    own = {k[len(prefix) + 1:]: v for k, v in values.items()
           if k.startswith(prefix + ".") and k != f"{prefix}.variant"}
    if variant == "compose":
        parts = sorted({int(k.split(".")[0]) for k in own if k.split(".")[0].isdigit()})
        stray = [k for k in own if not k.split(".")[0].isdigit()]
        if stray:
            raise ValueError(f"unknown keys for compose: {stray}")
        if parts != list(range(len(parts))):
            raise ValueError(f"{prefix}: compose parts must be numbered 0..n-1")
        return Compose(tuple(from_flat(values, f"{prefix}.{i}") for i in parts))
    cls = _CLASSES[variant]
    allowed = {f.name for f in fields(cls) if f.init}
    kwargs = {}
    for k, v in own.items():
        if k.split(".")[0].isdigit():
            continue
        if k not in allowed:
            raise ValueError(f"unknown key {prefix}.{k} for {variant}")
        kwargs[k] = _coerce(cls, k, v)
    return cls(**kwargs)
