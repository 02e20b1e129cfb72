"""Procedural image pairs with exact ground-truth flow, plus corruptions.

Pairs come from known homographies: the target image is the source warped
through H, the flow is computed analytically from H^-1, and the master
invariant warp_image(I_src, F_gt) == I_tgt holds to float precision on the
valid mask. Corruptions are a deterministic desk-scale subset of the common
image-robustness suite with the usual five severity levels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cost import FlowField
from .errors import DataError, InvalidArgument
from .ops import bilinear_gather

TEXTURE_KINDS = ("blobs", "checker", "gradient", "mixed")

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "brightness",
    "contrast",
    "pixelate",
    "fog",
)

# severity -> parameter tables (index severity-1)
_GAUSS_SIGMA = (0.08, 0.12, 0.18, 0.26, 0.38)
_SHOT_COUNTS = (60.0, 25.0, 12.0, 5.0, 3.0)
_IMPULSE_AMOUNT = (0.03, 0.06, 0.09, 0.17, 0.27)
_DEFOCUS_RADIUS = (3, 4, 6, 8, 10)
_MOTION_LENGTH = (7, 11, 15, 19, 23)
_BRIGHTNESS_ADD = (0.1, 0.2, 0.3, 0.4, 0.5)
_CONTRAST_SCALE = (0.4, 0.3, 0.2, 0.1, 0.05)
_PIXELATE_FRACTION = (0.6, 0.5, 0.4, 0.3, 0.25)
_FOG_PARAMS = ((1.5, 2.0), (2.0, 2.0), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4))


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise InvalidArgument(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise InvalidArgument("severity must be in 1..5")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "severity": self.severity, "seed": self.seed}


@dataclass(frozen=True)
class WarpSpec:
    """Homography mapping source pixel coordinates to target coordinates."""

    matrix: np.ndarray  # (3, 3), H[2,2] == 1
    magnitude: float  # realized max corner displacement (L-inf, px)
    gen_magnitude: float  # the bound m the corners were drawn from
    seed: int

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "magnitude": self.magnitude,
            "gen_magnitude": self.gen_magnitude,
            "seed": self.seed,
        }


@dataclass
class SamplePair:
    src: np.ndarray  # (3, H, W) in [0, 1]
    tgt: np.ndarray  # (3, H, W) in [0, 1]; corrupted if corruption is set
    flow: FlowField  # ground truth at (H, W), target-anchored
    valid: np.ndarray  # (H, W) bool
    warp: WarpSpec
    texture_seed: int = 0
    texture_kind: str = "mixed"
    corruption: CorruptionSpec | None = None
    pair_id: int = 0

    @property
    def resolution(self) -> tuple[int, int]:
        return self.src.shape[1], self.src.shape[2]


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(key)))


def checker_period(seed: int) -> int:
    """Full tiling period (two tiles) the checker texture repeats with."""
    tile = int(_rng_for(seed, 101).choice((8, 12, 16)))
    return 2 * tile


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Band-limited noise: random lattice values bilinearly interpolated."""
    gh, gw = h // cell + 2, w // cell + 2
    lattice = rng.uniform(-1.0, 1.0, size=(3, gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = lattice[:, y0][:, :, x0] * (1 - wx) + lattice[:, y0][:, :, x0 + 1] * wx
    bot = lattice[:, y0 + 1][:, :, x0] * (1 - wx) + lattice[:, y0 + 1][:, :, x0 + 1] * wx
    return top * (1 - wy) + bot * wy


def _texture_blobs(seed: int, h: int, w: int) -> np.ndarray:
    rng = _rng_for(seed, 102)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.tile(rng.uniform(0.2, 0.8, size=(3, 1, 1)), (1, h, w))
    for _ in range(18):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(3.0, 14.0)
        color = rng.uniform(-0.9, 0.9, size=(3, 1, 1))
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        img = img + color * bump
    # multi-octave detail so local appearance stays discriminative
    img = img + 0.35 * _value_noise(rng, h, w, 6) + 0.2 * _value_noise(rng, h, w, 2)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def _texture_checker(seed: int, h: int, w: int) -> np.ndarray:
    rng = _rng_for(seed, 101)
    tile = int(rng.choice((8, 12, 16)))
    col_a = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    col_b = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parity = ((yy // tile + xx // tile) % 2).astype(np.float64)
    return col_a * (1 - parity) + col_b * parity


def _texture_gradient(seed: int, h: int, w: int) -> np.ndarray:
    rng = _rng_for(seed, 103)
    theta = rng.uniform(0, 2 * np.pi)
    col_a = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    col_b = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    return col_a + (col_b - col_a) * t


def _texture_mixed(seed: int, h: int, w: int) -> np.ndarray:
    rng = _rng_for(seed, 104)
    img = 0.75 * _texture_blobs(seed, h, w) + 0.25 * _texture_gradient(seed, h, w)
    # paste a repetitive patch to exercise the ambiguous-matching cases
    ph, pw = h // 3, w // 3
    y0 = int(rng.integers(0, h - ph + 1))
    x0 = int(rng.integers(0, w - pw + 1))
    checker = _texture_checker(seed, h, w)
    img[:, y0 : y0 + ph, x0 : x0 + pw] = (
        0.5 * img[:, y0 : y0 + ph, x0 : x0 + pw]
        + 0.5 * checker[:, y0 : y0 + ph, x0 : x0 + pw]
    )
    return np.clip(img, 0.0, 1.0)


def gen_texture(seed: int, kind: str = "mixed", size: tuple[int, int] = (128, 128)) -> np.ndarray:
    """Deterministic (3, H, W) texture in [0, 1]."""
    h, w = size
    if h < 32 or w < 32:
        raise InvalidArgument("texture size must be at least 32x32")
    if kind == "blobs":
        return _texture_blobs(seed, h, w)
    if kind == "checker":
        return _texture_checker(seed, h, w)
    if kind == "gradient":
        return _texture_gradient(seed, h, w)
    if kind == "mixed":
        return _texture_mixed(seed, h, w)
    raise InvalidArgument(f"unknown texture kind {kind!r}")


# ---------------------------------------------------------------------------
# homographies and rendering
# ---------------------------------------------------------------------------


def _solve_homography(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """Exact 8-DOF homography through 4 correspondences (row-normalized DLT)."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (xx, yy)) in enumerate(zip(src_pts, dst_pts)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -x * xx, -y * xx]
        b[2 * i] = xx
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -x * yy, -y * yy]
        b[2 * i + 1] = yy
    h = np.linalg.solve(a, b)
    return np.concatenate([h, [1.0]]).reshape(3, 3)


def sample_homography(
    seed: int, magnitude: float, size: tuple[int, int] = (128, 128)
) -> WarpSpec:
    """Perturb the image corners by uniform offsets in [-m, m] and solve H."""
    if magnitude < 0:
        raise InvalidArgument("magnitude must be non-negative")
    h, w = size
    corners = np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]]
    )
    rng = _rng_for(seed, 201)
    for _ in range(64):
        offsets = rng.uniform(-magnitude, magnitude, size=(4, 2))
        dst = corners + offsets
        try:
            mat = _solve_homography(corners, dst)
        except np.linalg.LinAlgError:
            continue  # degenerate draw, resample
        if abs(np.linalg.det(mat)) < 1e-9:
            continue
        realized = float(np.abs(offsets).max())
        return WarpSpec(
            matrix=mat, magnitude=realized, gen_magnitude=float(magnitude), seed=int(seed)
        )
    raise DataError("could not sample a non-degenerate homography")


def flow_from_homography(warp: WarpSpec, size: tuple[int, int]) -> tuple[FlowField, np.ndarray]:
    """Ground-truth flow and valid mask on the target grid."""
    h, w = size
    hinv = np.linalg.inv(warp.matrix)
    ty, tx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    den = hinv[2, 0] * tx + hinv[2, 1] * ty + hinv[2, 2]
    den = np.where(np.abs(den) < 1e-9, 1e-9, den)
    px = (hinv[0, 0] * tx + hinv[0, 1] * ty + hinv[0, 2]) / den
    py = (hinv[1, 0] * tx + hinv[1, 1] * ty + hinv[1, 2]) / den
    valid = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    return FlowField(np.stack([px - tx, py - ty])), valid


def warp_image(image: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Backward warp by bilinear sampling; out-of-bounds reads 0, mask False."""
    if image.shape[1:] != (flow.h, flow.w):
        raise InvalidArgument(
            f"image {image.shape[1:]} and flow {flow.resolution} resolutions differ"
        )
    h, w = flow.h, flow.w
    ty, tx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cx = tx + flow.values[0]
    cy = ty + flow.values[1]
    sampled, _, _ = bilinear_gather(image[None], cx[None], cy[None])
    warped = sampled[0].transpose(2, 0, 1)
    coverage = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
    return warped, coverage


def render_pair(texture: np.ndarray, warp: WarpSpec) -> SamplePair:
    """I_src = texture; I_tgt(i) = I_src sampled at H^-1(i); exact GT flow."""
    size = (texture.shape[1], texture.shape[2])
    flow, valid = flow_from_homography(warp, size)
    tgt, _ = warp_image(texture, flow)
    return SamplePair(
        src=texture, tgt=tgt, flow=flow, valid=valid, warp=warp
    )


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------


def _disk_kernel(radius: int) -> np.ndarray:
    yy, xx = np.meshgrid(
        np.arange(-radius, radius + 1), np.arange(-radius, radius + 1), indexing="ij"
    )
    k = ((yy * yy + xx * xx) <= radius * radius).astype(np.float64)
    return k / k.sum()


def _line_kernel(length: int, theta: float) -> np.ndarray:
    """Anti-aliased line through the kernel center at angle theta."""
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    for s in np.linspace(-c, c, 4 * length):
        y = c + s * np.sin(theta)
        x = c + s * np.cos(theta)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        wy, wx = y - y0, x - x0
        for dy, dx, wgt in (
            (0, 0, (1 - wy) * (1 - wx)),
            (0, 1, (1 - wy) * wx),
            (1, 0, wy * (1 - wx)),
            (1, 1, wy * wx),
        ):
            if 0 <= y0 + dy < length and 0 <= x0 + dx < length:
                k[y0 + dy, x0 + dx] += wgt
    return k / k.sum()


def _convolve_channels(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack(
        [ndimage.convolve(img[c], kernel, mode="reflect") for c in range(img.shape[0])]
    )


def _plasma_fractal(size: int, wibbledecay: float, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square heightmap in [0, 1] on a (size, size) wraparound grid."""
    n = 1
    while n < size:
        n *= 2
    arr = np.zeros((n, n))
    step = n
    wibble = 1.0
    while step > 1:
        half = step // 2
        # diamond
        blocks = arr[0:n:step, 0:n:step]
        diag = (
            blocks
            + np.roll(blocks, -1, axis=0)
            + np.roll(blocks, -1, axis=1)
            + np.roll(np.roll(blocks, -1, axis=0), -1, axis=1)
        ) / 4.0
        arr[half:n:step, half:n:step] = diag + rng.uniform(
            -wibble, wibble, size=diag.shape
        )
        # square
        for oy, ox in ((0, half), (half, 0)):
            ys = np.arange(oy, n, step)
            xs = np.arange(ox, n, step)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            neigh = (
                arr[(yy - half) % n, xx % n]
                + arr[(yy + half) % n, xx % n]
                + arr[yy % n, (xx - half) % n]
                + arr[yy % n, (xx + half) % n]
            ) / 4.0
            arr[yy, xx] = neigh + rng.uniform(-wibble, wibble, size=neigh.shape)
        step = half
        wibble /= wibbledecay
    lo, hi = arr.min(), arr.max()
    return ((arr - lo) / max(hi - lo, 1e-12))[:size, :size]


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption; deterministic given spec.seed, clamped to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    s = spec.severity - 1
    rng = _rng_for(spec.seed, 300 + s)
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, _GAUSS_SIGMA[s], size=x.shape)
    elif spec.kind == "shot_noise":
        c = _SHOT_COUNTS[s]
        out = rng.poisson(np.clip(x, 0, 1) * c) / c
    elif spec.kind == "impulse_noise":
        a = _IMPULSE_AMOUNT[s]
        u = rng.uniform(size=x.shape)
        out = np.where(u < a / 2, 1.0, np.where(u < a, 0.0, x))
    elif spec.kind == "defocus_blur":
        out = _convolve_channels(x, _disk_kernel(_DEFOCUS_RADIUS[s]))
    elif spec.kind == "motion_blur":
        theta = rng.uniform(0, np.pi)
        out = _convolve_channels(x, _line_kernel(_MOTION_LENGTH[s], theta))
    elif spec.kind == "brightness":
        out = x + _BRIGHTNESS_ADD[s]
    elif spec.kind == "contrast":
        means = x.mean(axis=(1, 2), keepdims=True)
        out = (x - means) * _CONTRAST_SCALE[s] + means
    elif spec.kind == "pixelate":
        f = _PIXELATE_FRACTION[s]
        _, h, w = x.shape
        hh, ww = max(1, round(h * f)), max(1, round(w * f))
        iy = np.clip(np.floor((np.arange(hh) + 0.5) * h / hh), 0, h - 1).astype(int)
        ix = np.clip(np.floor((np.arange(ww) + 0.5) * w / ww), 0, w - 1).astype(int)
        small = x[:, iy][:, :, ix]
        ry = np.clip(np.floor((np.arange(h) + 0.5) * hh / h), 0, hh - 1).astype(int)
        rx = np.clip(np.floor((np.arange(w) + 0.5) * ww / w), 0, ww - 1).astype(int)
        out = small[:, ry][:, :, rx]
    elif spec.kind == "fog":
        c, decay = _FOG_PARAMS[s]
        _, h, w = x.shape
        plasma = _plasma_fractal(max(h, w), decay, rng)[:h, :w]
        max_val = x.max()
        out = (x + c * plasma[None]) * max_val / (max_val + c)
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise InvalidArgument(f"unknown corruption kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# pair assembly and on-disk dataset
# ---------------------------------------------------------------------------


def make_pair(
    pair_seed: int,
    size: tuple[int, int] = (128, 128),
    magnitude: float = 24.0,
    texture_kind: str = "mixed",
    corruption: CorruptionSpec | None = None,
    corrupt_both: bool = False,
    pair_id: int = 0,
) -> SamplePair:
    """Texture -> homography -> render -> (optional) corruption."""
    texture = gen_texture(pair_seed, texture_kind, size)
    warp = sample_homography(pair_seed, magnitude, size)
    pair = render_pair(texture, warp)
    pair.texture_seed = int(pair_seed)
    pair.texture_kind = texture_kind
    pair.pair_id = int(pair_id)
    if corruption is not None:
        pair.corruption = corruption
        pair.tgt = corrupt(pair.tgt, corruption)
        if corrupt_both:
            pair.src = corrupt(pair.src, corruption)
    return pair


@dataclass
class DatasetSpec:
    """Everything needed to regenerate a dataset byte-identically."""

    count: int
    resolution: int = 128
    magnitude: float = 24.0
    textures: tuple[str, ...] = TEXTURE_KINDS
    seed: int = 0
    corruption_kind: str | None = None
    corruption_severity: int = 3
    corrupt_both: bool = False

    def pair(self, index: int) -> SamplePair:
        if not 0 <= index < self.count:
            raise InvalidArgument(f"index {index} outside dataset of {self.count}")
        kind = self.textures[index % len(self.textures)]
        pair_seed = int(
            np.random.SeedSequence((self.seed, index)).generate_state(1)[0]
        )
        corr = None
        if self.corruption_kind is not None:
            corr = CorruptionSpec(
                kind=self.corruption_kind,
                severity=self.corruption_severity,
                seed=pair_seed,
            )
        return make_pair(
            pair_seed,
            size=(self.resolution, self.resolution),
            magnitude=self.magnitude,
            texture_kind=kind,
            corruption=corr,
            corrupt_both=self.corrupt_both,
            pair_id=index,
        )

    def pairs(self):
        for i in range(self.count):
            yield self.pair(i)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "resolution": self.resolution,
            "magnitude": self.magnitude,
            "textures": list(self.textures),
            "seed": self.seed,
            "corruption_kind": self.corruption_kind,
            "corruption_severity": self.corruption_severity,
            "corrupt_both": self.corrupt_both,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["textures"] = tuple(d["textures"])
        return cls(**d)


def save_dataset(spec: DatasetSpec, out_dir) -> None:
    """Write pairs/NNNNNN/{src.ppm, tgt.ppm, flow.flo, valid.pgm, meta.json}."""
    from pathlib import Path

    from .imageio import write_pgm, write_ppm
    from .metrics import write_flo

    root = Path(out_dir)
    pairs_dir = root / "pairs"
    pairs_dir.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(spec.pairs()):
        d = pairs_dir / f"{i:06d}"
        d.mkdir(exist_ok=True)
        write_ppm(d / "src.ppm", pair.src)
        write_ppm(d / "tgt.ppm", pair.tgt)
        write_flo(d / "flow.flo", pair.flow)
        write_pgm(d / "valid.pgm", pair.valid.astype(np.float64))
        meta = {
            "pair_id": i,
            "texture_seed": pair.texture_seed,
            "texture_kind": pair.texture_kind,
            "warp": pair.warp.to_dict(),
            "corruption": pair.corruption.to_dict() if pair.corruption else None,
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    manifest = {"schema_version": 1, "dataset": spec.to_dict()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset_spec(root) -> DatasetSpec:
    from pathlib import Path

    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
        return DatasetSpec.from_dict(manifest["dataset"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"bad dataset manifest: {exc}") from exc


def load_pair_dir(pair_dir) -> SamplePair:
    """Read one stored pair (8-bit images; flow in float32)."""
    from pathlib import Path

    from .imageio import read_pgm, read_ppm
    from .metrics import read_flo

    d = Path(pair_dir)
    try:
        src = read_ppm(d / "src.ppm")
        tgt = read_ppm(d / "tgt.ppm")
        flow = read_flo(d / "flow.flo")
        valid = read_pgm(d / "valid.pgm") > 0.5
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable pair at {d}: {exc}") from exc
    warp = WarpSpec(
        matrix=np.asarray(meta["warp"]["matrix"], dtype=np.float64),
        magnitude=float(meta["warp"]["magnitude"]),
        gen_magnitude=float(meta["warp"]["gen_magnitude"]),
        seed=int(meta["warp"]["seed"]),
    )
    corr = None
    if meta.get("corruption"):
        corr = CorruptionSpec(**meta["corruption"])
    return SamplePair(
        src=src,
        tgt=tgt,
        flow=flow,
        valid=valid,
        warp=warp,
        texture_seed=int(meta["texture_seed"]),
        texture_kind=meta["texture_kind"],
        corruption=corr,
        pair_id=int(meta["pair_id"]),
    )


def load_dataset(root) -> list[SamplePair]:
    from pathlib import Path

    pairs_dir = Path(root) / "pairs"
    if not pairs_dir.is_dir():
        raise DataError(f"no pairs directory under {root}")
    return [load_pair_dir(d) for d in sorted(pairs_dir.iterdir()) if d.is_dir()]
